#include <fstream>
#include <iostream>
#include <optional>
#include <string>

#include <CLI11.hpp>
#include <fmt/format.h>

#include "sparsefit/errors.hpp"
#include "sparsefit/runner.hpp"
#include "sparsefit/stats.hpp"

namespace fs = std::filesystem;
using namespace sparsefit;

namespace {

struct Overrides {
  std::string config;
  std::string out;
  std::optional<std::uint64_t> seed;
  std::optional<std::size_t> parallel;
  std::string grid;
};

void add_common(CLI::App* cmd, Overrides& o, bool config_required) {
  auto* opt = cmd->add_option("--config", o.config, "run configuration (JSON)");
  if (config_required) opt->required();
  opt->check(CLI::ExistingFile);
  cmd->add_option("--out", o.out, "output directory (overrides the config)");
  cmd->add_option("--seed", o.seed, "master seed (overrides the config)");
  cmd->add_option("--parallel", o.parallel, "splits trained concurrently");
  cmd->add_option("--grid", o.grid, "grid file (overrides the config)")->check(CLI::ExistingFile);
}

RunConfig make_config(const Overrides& o) {
  RunConfig c = o.config.empty() ? RunConfig{} : RunConfig::load(o.config);
  if (!o.out.empty()) c.output_dir = o.out;
  if (o.seed) c.master_seed = *o.seed;
  if (o.parallel) c.parallel_splits = *o.parallel;
  if (!o.grid.empty()) c.grid_file = fs::path(o.grid);
  return c;
}

void print_failures(const RunSummary& s) {
  for (const auto& f : s.failures) std::cerr << "failed: " << f << "\n";
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Sparse fine-tuning experiments for self-rationalizing encoder-decoder models"};
  app.require_subcommand(1);

  Overrides run_o, count_o, score_o, table_o;
  auto* run = app.add_subcommand("run", "train and evaluate every (config, split) cell");
  add_common(run, run_o, true);

  auto* count = app.add_subcommand("count", "trainable-parameter percentages only");
  add_common(count, count_o, false);
  std::string count_model;
  bool count_csv_out = false;
  count->add_option("--model", count_model, "toy or t5-large-shape-symbolic (default: config or symbolic)");
  count->add_flag("--csv", count_csv_out, "print CSV instead of markdown");

  auto* score = app.add_subcommand("score", "re-score existing predictions");
  add_common(score, score_o, true);

  auto* table = app.add_subcommand("table", "re-emit reports from finished cells");
  add_common(table, table_o, true);

  auto* kappa = app.add_subcommand("kappa", "plausibility and agreement from human annotations");
  std::string annotations;
  kappa->add_option("--annotations", annotations, "annotation JSONL file")->required()->check(CLI::ExistingFile);

  CLI11_PARSE(app, argc, argv);

  try {
    if (*run) {
      const RunConfig c = make_config(run_o);
      const RunSummary s = run_experiment(c, std::cout);
      std::cout << fmt::format("{} cells: {} run, {} skipped, {} failed\n", s.cells_total, s.cells_run,
                               s.cells_skipped, s.failures.size());
      print_failures(s);
      return s.exit_code();
    }
    if (*count) {
      RunConfig c = make_config(count_o);
      if (!count_model.empty()) {
        c.model = count_model;
      } else if (count_o.config.empty()) {
        c.model = std::string(kSymbolicT5Large);
      }
      c.validate(true);
      // The toy vocabulary depends on the data; without it, count the default toy shape.
      const ModelConfig m = c.symbolic() ? ModelConfig::t5_large()
                            : c.model == kCustomModel && c.custom_model.vocab_size > 0
                                ? c.custom_model
                                : ModelConfig::toy();
      const auto rows = count_grid(m, c.grid(), c.lora);
      std::cout << (count_csv_out ? count_csv(rows) : count_markdown(rows));
      return 0;
    }
    if (*score) {
      const RunSummary s = rescore(make_config(score_o), std::cout);
      std::cout << fmt::format("{} cells re-scored, {} without predictions\n", s.cells_run, s.cells_skipped);
      print_failures(s);
      return s.exit_code();
    }
    if (*table) {
      const RunConfig c = make_config(table_o);
      c.validate();
      write_reports(c, std::cout);
      std::ifstream md(c.output_dir / "table.md");
      std::cout << md.rdbuf();
      return 0;
    }
    if (*kappa) {
      std::cout << kappa_markdown(kappa_report(load_annotations(annotations)));
      return 0;
    }
  } catch (const ConfigError& e) {
    std::cerr << "configuration error: " << e.what() << "\n";
    return 1;
  } catch (const DataError& e) {
    std::cerr << "data error: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
  return 0;
}
