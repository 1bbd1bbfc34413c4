#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

#include "sparsefit/data.hpp"
#include "sparsefit/model.hpp"
#include "sparsefit/selector.hpp"
#include "sparsefit/stats.hpp"
#include "sparsefit/trainer.hpp"

namespace sparsefit {

inline constexpr std::string_view kToyModel = "toy";
inline constexpr std::string_view kSymbolicT5Large = "t5-large-shape-symbolic";
inline constexpr std::string_view kCustomModel = "custom";

struct Grid {
  std::string baseline = "full";
  std::vector<SparseFitConfig> configs;

  // Throws ConfigError on duplicate names, invalid configs or a missing
  // baseline.
  void validate() const;
  const SparseFitConfig* find(std::string_view name) const;
};

// full + singles + pairs + lora, baseline "full".
Grid default_run_grid();
nlohmann::ordered_json grid_to_json(const Grid& grid);
Grid grid_from_json(const nlohmann::json& doc);
Grid load_grid(const std::filesystem::path& path);
void save_grid(const Grid& grid, const std::filesystem::path& path);
// 64-bit FNV-1a, printed as 16 hex digits in manifests.
std::uint64_t fnv1a(std::string_view bytes);
std::string grid_hash(const Grid& grid);

struct RunConfig {
  std::filesystem::path dataset;
  std::string schema = "nli";
  std::string model = std::string(kToyModel);
  ModelConfig custom_model;  // used when model == "custom"; vocab_size 0 means "from data"
  std::optional<std::filesystem::path> grid_file;
  std::optional<std::string> baseline;  // overrides the grid file's baseline
  TrainPlan plan;
  std::size_t max_generate_len = 64;
  SplitOptions splits;
  std::uint64_t master_seed = 0;
  std::filesystem::path output_dir = "runs/out";
  std::size_t parallel_splits = 1;
  LoraOptions lora;
  std::string embedder = "one-hot";  // or a word-vector file

  // Relative paths resolve against base_dir.
  static RunConfig from_json(const nlohmann::json& doc,
                             const std::filesystem::path& base_dir = {});
  static RunConfig load(const std::filesystem::path& path);
  nlohmann::ordered_json to_json() const;

  bool symbolic() const { return model == kSymbolicT5Large; }
  // Throws ConfigError. Training runs need an existing dataset and an
  // allocatable model.
  void validate(bool counting_only = false) const;
  Grid grid() const;
  // Model shape for `vocab_size` data tokens.
  ModelConfig model_config(std::size_t vocab_size) const;
};

struct CellResult {
  std::string config;
  std::size_t split_id = 0;
  double accuracy = 0.0;
  double mean_nle_score = 0.0;
  std::size_t num_records = 0;
  std::size_t trainable_params = 0;
  std::size_t total_params = 0;
  double percent_params = 0.0;

  nlohmann::ordered_json to_json() const;
  static CellResult from_json(const nlohmann::json& doc);
};

struct ConfigAggregate {
  SparseFitConfig config;
  std::vector<CellResult> cells;  // ordered by split id
  std::size_t missing_splits = 0;
  std::optional<Aggregate> summary;  // absent when no split finished
  std::size_t trainable_params = 0;
  std::size_t total_params = 0;
  double percent_params = 0.0;
};

struct TableRow {
  std::string config;
  double percent_params = 0.0;
  std::size_t num_splits = 0;
  double acc_mean = 0.0, acc_std = 0.0;  // 0-100 scale
  double nle_mean = 0.0, nle_std = 0.0;  // 0-100 scale
  double tradeoff = 0.0;
  std::optional<TTestResult> acc_test;  // versus the baseline
  std::optional<TTestResult> nle_test;
  bool baseline = false;
};

// Throws ConfigError when the baseline has no finished splits.
std::vector<TableRow> build_table(const std::vector<ConfigAggregate>& aggregates,
                                  const std::string& baseline);
std::string table_csv(const std::vector<TableRow>& rows);
std::string table_markdown(const std::vector<TableRow>& rows);

struct RunSummary {
  std::size_t cells_total = 0;
  std::size_t cells_run = 0;
  std::size_t cells_skipped = 0;
  std::vector<std::string> failures;  // "config/split_i: message"

  int exit_code() const { return failures.empty() ? 0 : 2; }
};

// Trains and evaluates every (config, split) cell that has no result yet,
// then writes scores, aggregates and tables. Per-cell failures are logged
// and reported in the summary.
RunSummary run_experiment(const RunConfig& config, std::ostream& log);

// Rebuilds scores/, aggregate.csv and table.{csv,md} from the cell results.
std::vector<ConfigAggregate> write_reports(const RunConfig& config, std::ostream& log);

// Re-scores every cell's predictions.jsonl with the configured embedder,
// rewrites records and results, then rebuilds the reports.
RunSummary rescore(const RunConfig& config, std::ostream& log);

struct CountRow {
  std::string config;
  std::size_t trainable = 0;
  std::size_t total = 0;
  double percent = 0.0;
};

// Parameter shares for every grid config without allocating tensors.
std::vector<CountRow> count_grid(const ModelConfig& model, const Grid& grid, const LoraOptions& lora);
std::string count_csv(const std::vector<CountRow>& rows);
std::string count_markdown(const std::vector<CountRow>& rows);

struct KappaReport {
  std::vector<std::string> annotators;  // sorted; the first two are compared
  std::size_t aligned_examples = 0;
  double kappa = 0.0;
  double plausibility = 0.0;  // over every annotation
  std::vector<std::pair<std::string, double>> per_annotator_plausibility;
  std::vector<std::pair<std::string, std::size_t>> shortcoming_counts;  // fixed category order
};

// Throws DataError unless exactly two annotators share at least one example.
KappaReport kappa_report(const std::vector<HumanAnnotation>& annotations);
std::string kappa_markdown(const KappaReport& report);

}  // namespace sparsefit
