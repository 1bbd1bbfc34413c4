// Regenerates the bundled synthetic corpus and the default grid file.
#include <iostream>

#include <CLI11.hpp>

#include "sparsefit/runner.hpp"
#include "sparsefit/synthetic.hpp"

using namespace sparsefit;

int main(int argc, char** argv) {
  CLI::App app{"write bundled fixtures"};
  std::string data_dir = "data";
  std::size_t per_label = 200;
  std::uint64_t seed = 2024;
  app.add_option("--dir", data_dir, "destination directory");
  app.add_option("--per-label", per_label, "examples per label");
  app.add_option("--seed", seed, "generator seed");
  CLI11_PARSE(app, argc, argv);

  const std::filesystem::path dir(data_dir);
  std::filesystem::create_directories(dir);
  write_dataset(make_synthetic_nli(per_label, seed), TaskKind::kNli, dir / "synthetic_nli.jsonl");
  save_grid(default_run_grid(), dir / "default_grid.json");
  std::cout << "wrote " << (dir / "synthetic_nli.jsonl").string() << " and "
            << (dir / "default_grid.json").string() << "\n";
  return 0;
}
