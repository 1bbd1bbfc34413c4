#include "sparsefit/runner.hpp"

#include <algorithm>
#include <atomic>
#include <chrono>
#include <fstream>
#include <map>
#include <memory>
#include <mutex>
#include <ostream>
#include <set>
#include <sstream>
#include <thread>

#include <fmt/format.h>

#include "sparsefit/errors.hpp"
#include "sparsefit/eval.hpp"

namespace sparsefit {

namespace fs = std::filesystem;
using nlohmann::json;
using nlohmann::ordered_json;

namespace {

// Seed streams, so model init, shuffling and adapters never share a seed.
constexpr std::uint64_t kModelStream = 0x6d6f64656cULL;
constexpr std::uint64_t kShuffleStream = 0x73687566ULL;
constexpr std::uint64_t kLoraStream = 0x6c6f7261ULL;

std::uint64_t stream_seed(std::uint64_t master, std::uint64_t stream, std::size_t split) {
  return derive_seed(derive_seed(master, stream), split);
}

std::string read_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot read " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

// Write-then-rename so a crash never leaves a half-written result behind.
void write_file(const fs::path& path, std::string_view content) {
  fs::create_directories(path.parent_path());
  const fs::path tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw DataError("cannot write " + tmp.string());
    out << content;
    if (!out) throw DataError("write failed: " + tmp.string());
  }
  fs::rename(tmp, path);
}

std::string num(double v) { return fmt::format("{}", v); }

void check_keys(const json& doc, std::initializer_list<std::string_view> allowed, const char* where) {
  if (!doc.is_object()) throw ConfigError(std::string(where) + " must be an object");
  for (const auto& [key, value] : doc.items()) {
    if (std::find(allowed.begin(), allowed.end(), key) == allowed.end()) {
      throw ConfigError(fmt::format("unknown key '{}' in {}", key, where));
    }
  }
}

template <typename T>
T get_or(const json& doc, const char* key, T fallback) {
  if (!doc.contains(key)) return fallback;
  try {
    return doc.at(key).get<T>();
  } catch (const json::exception& e) {
    throw ConfigError(fmt::format("bad value for '{}': {}", key, e.what()));
  }
}

fs::path resolve_path(const fs::path& base, const std::string& p) {
  const fs::path path(p);
  return path.is_absolute() || base.empty() ? path : base / path;
}

fs::path cell_dir(const fs::path& out, const std::string& config, std::size_t split) {
  return out / "cells" / config / fmt::format("split_{}", split);
}

ordered_json model_config_json(const ModelConfig& c) {
  ordered_json j;
  j["vocab_size"] = c.vocab_size;
  j["d_model"] = c.d_model;
  j["d_kv"] = c.d_kv;
  j["num_heads"] = c.num_heads;
  j["d_ff"] = c.d_ff;
  j["num_encoder_blocks"] = c.num_encoder_blocks;
  j["num_decoder_blocks"] = c.num_decoder_blocks;
  j["rel_pos_buckets"] = c.rel_pos_buckets;
  j["rel_pos_max_distance"] = c.rel_pos_max_distance;
  j["tie_embedding_to_lm_head"] = c.tie_embedding_to_lm_head;
  j["norm_eps"] = c.norm_eps;
  return j;
}

ModelConfig model_config_from_json(const json& j) {
  check_keys(j,
             {"vocab_size", "d_model", "d_kv", "num_heads", "d_ff", "num_encoder_blocks",
              "num_decoder_blocks", "rel_pos_buckets", "rel_pos_max_distance",
              "tie_embedding_to_lm_head", "norm_eps"},
             "model_config");
  ModelConfig c;
  c.vocab_size = get_or<std::size_t>(j, "vocab_size", 0);
  c.d_model = get_or(j, "d_model", c.d_model);
  c.d_kv = get_or(j, "d_kv", c.d_kv);
  c.num_heads = get_or(j, "num_heads", c.num_heads);
  c.d_ff = get_or(j, "d_ff", c.d_ff);
  c.num_encoder_blocks = get_or(j, "num_encoder_blocks", c.num_encoder_blocks);
  c.num_decoder_blocks = get_or(j, "num_decoder_blocks", c.num_decoder_blocks);
  c.rel_pos_buckets = get_or(j, "rel_pos_buckets", c.rel_pos_buckets);
  c.rel_pos_max_distance = get_or(j, "rel_pos_max_distance", c.rel_pos_max_distance);
  c.tie_embedding_to_lm_head = get_or(j, "tie_embedding_to_lm_head", c.tie_embedding_to_lm_head);
  c.norm_eps = get_or(j, "norm_eps", c.norm_eps);
  return c;
}

std::unique_ptr<TokenEmbedder> make_embedder(const std::string& spec) {
  if (spec == "one-hot") return std::make_unique<OneHotEmbedder>();
  return std::make_unique<WordVectorEmbedder>(WordVectorEmbedder::load(spec));
}

// Everything a cell needs, built once per run.
struct Prepared {
  TaskSchema schema;
  std::vector<Example> examples;
  std::map<std::string, std::size_t> by_id;
  std::size_t dataset_errors = 0;
  std::string dataset_hash;
  std::vector<FewShotSplit> splits;
  Vocabulary vocab;
  ModelConfig model;
  std::unique_ptr<TokenEmbedder> embedder;
  Grid grid;

  const Example& example(const std::string& id) const { return examples.at(by_id.at(id)); }
};

Prepared prepare(const RunConfig& config, std::ostream& log) {
  Prepared p;
  p.schema = resolve_schema(config.schema);
  LoadResult loaded = load_dataset(config.dataset, p.schema);
  for (const auto& e : loaded.errors) {
    log << fmt::format("dataset line {}: {}\n", e.line, e.message);
  }
  p.dataset_errors = loaded.errors.size();
  p.examples = std::move(loaded.examples);
  for (std::size_t i = 0; i < p.examples.size(); ++i) p.by_id[p.examples[i].id] = i;
  p.dataset_hash = fmt::format("{:016x}", fnv1a(read_file(config.dataset)));

  SplitOptions so = config.splits;
  so.master_seed = config.master_seed;
  p.splits = sample_splits(p.examples, p.schema, so);

  std::vector<std::string> texts;
  texts.reserve(p.examples.size() * 2);
  for (const auto& ex : p.examples) {
    RenderedExample r = render_prompt(ex, p.schema);
    texts.push_back(std::move(r.input_text));
    texts.push_back(std::move(r.target_text));
  }
  p.vocab = Vocabulary::build(texts);
  p.model = config.model_config(p.vocab.size());
  p.embedder = make_embedder(config.embedder);
  p.grid = config.grid();
  return p;
}

ordered_json manifest(const RunConfig& config, const Prepared& p) {
  ordered_json m;
  m["format"] = "sparsefit-report/1";
  m["template_version"] = std::string(kTemplateVersion);
  m["embedder"] = p.embedder->name();
  m["significance_test"] = "welch two-sided";
  m["significance_level"] = kSignificanceLevel;
  m["std_estimator"] = "sample (n-1)";
  m["dataset"] = {{"file", config.dataset.filename().string()},
                  {"fnv1a", p.dataset_hash},
                  {"records", p.examples.size()},
                  {"invalid_lines", p.dataset_errors}};
  m["schema"] = {{"task", to_string(p.schema.task_kind)},
                 {"labels", p.schema.label_set},
                 {"slots", p.schema.slots}};
  m["model"] = config.model;
  m["model_config"] = model_config_json(p.model);
  m["grid_fnv1a"] = grid_hash(p.grid);
  m["baseline"] = p.grid.baseline;
  m["configs"] = p.grid.configs.size();
  m["master_seed"] = config.master_seed;
  m["splits"] = {{"num_splits", config.splits.num_splits},
                 {"train_total", config.splits.train_total},
                 {"val_size", config.splits.val_size}};
  std::vector<std::size_t> truncated;
  for (const auto& s : p.splits) {
    if (s.val_truncated) truncated.push_back(s.split_id);
  }
  m["truncated_validation_splits"] = truncated;
  m["plan"] = config.to_json()["plan"];
  m["max_generate_len"] = config.max_generate_len;
  m["lora"] = config.to_json()["lora"];
  return m;
}

CellResult run_cell(const RunConfig& config, const Prepared& p, const SparseFitConfig& sc,
                    const FewShotSplit& split, const fs::path& dir) {
  Model model = build_model(p.model, stream_seed(config.master_seed, kModelStream, split.split_id));
  if (sc.kind == ConfigKind::kLora) {
    LoraOptions lo = config.lora;
    lo.seed = stream_seed(config.master_seed, kLoraStream, split.split_id);
    inject_lora(model.registry(), lo);
  }
  const TrainabilityMask mask = resolve(sc, model.registry());
  apply_freeze(model.registry(), mask);
  const ParameterCount count = count_mask(model.registry(), mask);

  std::vector<TrainPair> train;
  train.reserve(split.train_ids.size());
  for (const auto& id : split.train_ids) {
    const RenderedExample r = render_prompt(p.example(id), p.schema);
    train.push_back({tokenize(r.input_text, p.vocab), tokenize(r.target_text, p.vocab)});
  }
  TrainPlan plan = config.plan;
  plan.seed = stream_seed(config.master_seed, kShuffleStream, split.split_id);
  const TrainedSnapshot snap = train_split(model, train, plan);

  std::string predictions, records_text;
  std::vector<EvalRecord> records;
  records.reserve(split.val_ids.size());
  for (const auto& id : split.val_ids) {
    const Example& ex = p.example(id);
    const std::string input = render_input(ex, p.schema);
    const std::string text =
        detokenize(generate(model, tokenize(input, p.vocab), config.max_generate_len), p.vocab);
    ordered_json line;
    line["example_id"] = id;
    line["generated_text"] = text;
    predictions += line.dump() + "\n";
    records.push_back(score_prediction(id, text, ex.label, ex.explanation, *p.embedder));
  }
  const SplitResult result = summarize_split(split.split_id, std::move(records));

  CellResult cell;
  cell.config = sc.name;
  cell.split_id = split.split_id;
  cell.accuracy = result.accuracy;
  cell.mean_nle_score = result.mean_nle_score;
  cell.num_records = result.records.size();
  cell.trainable_params = count.selected;
  cell.total_params = count.total;
  cell.percent_params = count.percent;

  std::ostringstream loss;
  loss << "epoch,mean_loss\n";
  for (std::size_t e = 0; e < snap.epoch_loss.size(); ++e) loss << e << "," << num(snap.epoch_loss[e]) << "\n";
  write_file(dir / "predictions.jsonl", predictions);
  write_file(dir / "loss.csv", loss.str());
  return cell;
}

std::string records_jsonl(const std::vector<EvalRecord>& records) {
  std::string out;
  for (const auto& r : records) {
    ordered_json j;
    j["example_id"] = r.example_id;
    j["generated_text"] = r.generated_text;
    j["parsed_label"] = r.parsed_label ? json(*r.parsed_label) : json(nullptr);
    j["parsed_explanation"] = r.parsed_explanation ? json(*r.parsed_explanation) : json(nullptr);
    j["gold_label"] = r.gold_label;
    j["gold_explanation"] = r.gold_explanation;
    j["correct"] = r.correct;
    j["nle_score"] = r.nle_score;
    out += j.dump() + "\n";
  }
  return out;
}

// Scores predictions.jsonl of one cell against the gold data.
SplitResult score_cell(const Prepared& p, const fs::path& dir, std::size_t split_id) {
  std::istringstream in(read_file(dir / "predictions.jsonl"));
  std::vector<EvalRecord> records;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const json j = json::parse(line);
    const std::string id = j.at("example_id").get<std::string>();
    if (!p.by_id.count(id)) throw DataError("prediction for unknown example " + id);
    const Example& ex = p.example(id);
    records.push_back(score_prediction(id, j.at("generated_text").get<std::string>(), ex.label,
                                       ex.explanation, *p.embedder));
  }
  return summarize_split(split_id, std::move(records));
}

void check_manifest(const fs::path& out, const std::string& fresh) {
  const fs::path path = out / "manifest.json";
  if (fs::exists(path) && read_file(path) != fresh) {
    throw ConfigError("output directory " + out.string() +
                      " holds a run with a different configuration");
  }
}

}  // namespace

// ---------------------------------------------------------------------------
// Grid

void Grid::validate() const {
  if (configs.empty()) throw ConfigError("grid has no configs");
  std::set<std::string> names;
  for (const auto& c : configs) {
    c.validate();
    if (c.name.find('/') != std::string::npos || c.name == "." || c.name == "..") {
      throw ConfigError("config name cannot be used as a directory: " + c.name);
    }
    if (!names.insert(c.name).second) throw ConfigError("duplicate config name: " + c.name);
  }
  if (!names.count(baseline)) throw ConfigError("baseline '" + baseline + "' is not in the grid");
}

const SparseFitConfig* Grid::find(std::string_view name) const {
  for (const auto& c : configs) {
    if (c.name == name) return &c;
  }
  return nullptr;
}

Grid default_run_grid() {
  Grid g;
  g.baseline = "full";
  g.configs = default_grid();
  return g;
}

ordered_json grid_to_json(const Grid& grid) {
  ordered_json j;
  j["baseline"] = grid.baseline;
  j["configs"] = ordered_json::array();
  for (const auto& c : grid.configs) {
    ordered_json e;
    e["name"] = c.name;
    e["kind"] = to_string(c.kind);
    e["selectors"] = c.selectors;
    j["configs"].push_back(std::move(e));
  }
  return j;
}

Grid grid_from_json(const json& doc) {
  check_keys(doc, {"baseline", "configs"}, "grid");
  Grid g;
  g.baseline = get_or<std::string>(doc, "baseline", "full");
  if (!doc.contains("configs") || !doc.at("configs").is_array()) {
    throw ConfigError("grid needs a 'configs' array");
  }
  for (const auto& e : doc.at("configs")) {
    check_keys(e, {"name", "kind", "selectors"}, "grid config");
    SparseFitConfig c;
    c.name = get_or<std::string>(e, "name", "");
    c.kind = parse_config_kind(get_or<std::string>(e, "kind", "sparse_mask"));
    c.selectors = get_or<std::vector<std::string>>(e, "selectors", {});
    g.configs.push_back(std::move(c));
  }
  g.validate();
  return g;
}

Grid load_grid(const fs::path& path) {
  json doc;
  try {
    doc = json::parse(read_file(path));
  } catch (const json::exception& e) {
    throw ConfigError("grid file " + path.string() + ": " + e.what());
  }
  return grid_from_json(doc);
}

void save_grid(const Grid& grid, const fs::path& path) {
  write_file(path, grid_to_json(grid).dump(2) + "\n");
}

std::uint64_t fnv1a(std::string_view bytes) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

std::string grid_hash(const Grid& grid) {
  return fmt::format("{:016x}", fnv1a(grid_to_json(grid).dump()));
}

// ---------------------------------------------------------------------------
// RunConfig

RunConfig RunConfig::from_json(const json& doc, const fs::path& base_dir) {
  check_keys(doc,
             {"dataset", "schema", "model", "model_config", "grid", "baseline", "plan",
              "max_generate_len", "splits", "master_seed", "output_dir", "parallel_splits", "lora",
              "embedder"},
             "run config");
  RunConfig c;
  if (doc.contains("dataset")) c.dataset = resolve_path(base_dir, get_or<std::string>(doc, "dataset", ""));
  c.schema = get_or(doc, "schema", c.schema);
  if (c.schema.find('/') != std::string::npos || c.schema.ends_with(".json")) {
    c.schema = resolve_path(base_dir, c.schema).string();
  }
  c.model = get_or(doc, "model", c.model);
  if (doc.contains("model_config")) c.custom_model = model_config_from_json(doc.at("model_config"));
  if (doc.contains("grid")) c.grid_file = resolve_path(base_dir, get_or<std::string>(doc, "grid", ""));
  if (doc.contains("baseline")) c.baseline = get_or<std::string>(doc, "baseline", "");
  if (doc.contains("plan")) {
    const json& p = doc.at("plan");
    check_keys(p,
               {"epochs", "batch_size", "max_target_len", "shuffle", "lr", "beta1", "beta2", "eps",
                "weight_decay", "max_grad_norm"},
               "plan");
    c.plan.epochs = get_or(p, "epochs", c.plan.epochs);
    c.plan.batch_size = get_or(p, "batch_size", c.plan.batch_size);
    c.plan.max_target_len = get_or(p, "max_target_len", c.plan.max_target_len);
    c.plan.shuffle = get_or(p, "shuffle", c.plan.shuffle);
    c.plan.optimizer.lr = get_or(p, "lr", c.plan.optimizer.lr);
    c.plan.optimizer.beta1 = get_or(p, "beta1", c.plan.optimizer.beta1);
    c.plan.optimizer.beta2 = get_or(p, "beta2", c.plan.optimizer.beta2);
    c.plan.optimizer.eps = get_or(p, "eps", c.plan.optimizer.eps);
    c.plan.optimizer.weight_decay = get_or(p, "weight_decay", c.plan.optimizer.weight_decay);
    if (p.contains("max_grad_norm") && !p.at("max_grad_norm").is_null()) {
      c.plan.max_grad_norm = get_or<double>(p, "max_grad_norm", 0.0);
    }
  }
  c.max_generate_len = get_or(doc, "max_generate_len", c.max_generate_len);
  if (doc.contains("splits")) {
    const json& s = doc.at("splits");
    check_keys(s, {"num_splits", "train_total", "val_size"}, "splits");
    c.splits.num_splits = get_or(s, "num_splits", c.splits.num_splits);
    c.splits.train_total = get_or(s, "train_total", c.splits.train_total);
    c.splits.val_size = get_or(s, "val_size", c.splits.val_size);
  }
  c.master_seed = get_or(doc, "master_seed", c.master_seed);
  if (doc.contains("output_dir")) c.output_dir = resolve_path(base_dir, get_or<std::string>(doc, "output_dir", ""));
  c.parallel_splits = get_or(doc, "parallel_splits", c.parallel_splits);
  if (doc.contains("lora")) {
    const json& l = doc.at("lora");
    check_keys(l, {"rank", "alpha", "targets"}, "lora");
    c.lora.rank = get_or(l, "rank", c.lora.rank);
    c.lora.alpha = get_or(l, "alpha", c.lora.alpha);
    c.lora.targets = get_or(l, "targets", c.lora.targets);
  }
  c.embedder = get_or(doc, "embedder", c.embedder);
  if (c.embedder != "one-hot") c.embedder = resolve_path(base_dir, c.embedder).string();
  return c;
}

RunConfig RunConfig::load(const fs::path& path) {
  json doc;
  try {
    doc = json::parse(read_file(path));
  } catch (const json::exception& e) {
    throw ConfigError("config file " + path.string() + ": " + e.what());
  } catch (const DataError& e) {
    throw ConfigError(e.what());
  }
  return from_json(doc, path.parent_path());
}

ordered_json RunConfig::to_json() const {
  ordered_json j;
  j["dataset"] = dataset.string();
  j["schema"] = schema;
  j["model"] = model;
  if (model == kCustomModel) j["model_config"] = model_config_json(custom_model);
  if (grid_file) j["grid"] = grid_file->string();
  if (baseline) j["baseline"] = *baseline;
  ordered_json p;
  p["epochs"] = plan.epochs;
  p["batch_size"] = plan.batch_size;
  p["max_target_len"] = plan.max_target_len;
  p["shuffle"] = plan.shuffle;
  p["lr"] = plan.optimizer.lr;
  p["beta1"] = plan.optimizer.beta1;
  p["beta2"] = plan.optimizer.beta2;
  p["eps"] = plan.optimizer.eps;
  p["weight_decay"] = plan.optimizer.weight_decay;
  p["max_grad_norm"] = plan.max_grad_norm ? json(*plan.max_grad_norm) : json(nullptr);
  j["plan"] = p;
  j["max_generate_len"] = max_generate_len;
  j["splits"] = {{"num_splits", splits.num_splits},
                 {"train_total", splits.train_total},
                 {"val_size", splits.val_size}};
  j["master_seed"] = master_seed;
  j["output_dir"] = output_dir.string();
  j["parallel_splits"] = parallel_splits;
  j["lora"] = {{"rank", lora.rank}, {"alpha", lora.alpha}, {"targets", lora.targets}};
  j["embedder"] = embedder;
  return j;
}

void RunConfig::validate(bool counting_only) const {
  if (model != kToyModel && model != kSymbolicT5Large && model != kCustomModel) {
    throw ConfigError("unknown model '" + model + "' (toy, t5-large-shape-symbolic, custom)");
  }
  if (grid_file && !fs::exists(*grid_file)) throw ConfigError("grid file not found: " + grid_file->string());
  grid();
  if (counting_only) return;
  if (symbolic()) throw ConfigError("the symbolic model only supports counting runs");
  if (dataset.empty()) throw ConfigError("run config needs a dataset");
  if (!fs::exists(dataset)) throw ConfigError("dataset not found: " + dataset.string());
  resolve_schema(schema).validate();
  if (embedder != "one-hot" && !fs::exists(embedder)) throw ConfigError("embedder file not found: " + embedder);
  plan.validate();
  if (max_generate_len == 0) throw ConfigError("max_generate_len must be >= 1");
  if (splits.num_splits == 0) throw ConfigError("num_splits must be >= 1");
  if (parallel_splits == 0) throw ConfigError("parallel_splits must be >= 1");
  if (model == kCustomModel) {
    ModelConfig probe = custom_model;
    if (probe.vocab_size == 0) probe.vocab_size = 4;
    probe.validate();
  }
}

Grid RunConfig::grid() const {
  Grid g = grid_file ? load_grid(*grid_file) : default_run_grid();
  if (baseline) g.baseline = *baseline;
  g.validate();
  return g;
}

ModelConfig RunConfig::model_config(std::size_t vocab_size) const {
  if (model == kSymbolicT5Large) return ModelConfig::t5_large();
  ModelConfig c = model == kCustomModel ? custom_model : ModelConfig::toy();
  if (model == kToyModel || c.vocab_size == 0) c.vocab_size = vocab_size;
  if (c.vocab_size < vocab_size) {
    throw ConfigError(fmt::format("vocab_size {} is smaller than the data vocabulary ({})",
                                  c.vocab_size, vocab_size));
  }
  c.validate();
  return c;
}

// ---------------------------------------------------------------------------
// Cells

ordered_json CellResult::to_json() const {
  ordered_json j;
  j["config"] = config;
  j["split_id"] = split_id;
  j["accuracy"] = accuracy;
  j["mean_nle_score"] = mean_nle_score;
  j["num_records"] = num_records;
  j["trainable_params"] = trainable_params;
  j["total_params"] = total_params;
  j["percent_params"] = percent_params;
  return j;
}

CellResult CellResult::from_json(const json& doc) {
  CellResult c;
  c.config = doc.at("config").get<std::string>();
  c.split_id = doc.at("split_id").get<std::size_t>();
  c.accuracy = doc.at("accuracy").get<double>();
  c.mean_nle_score = doc.at("mean_nle_score").get<double>();
  c.num_records = doc.at("num_records").get<std::size_t>();
  c.trainable_params = doc.at("trainable_params").get<std::size_t>();
  c.total_params = doc.at("total_params").get<std::size_t>();
  c.percent_params = doc.at("percent_params").get<double>();
  return c;
}

RunSummary run_experiment(const RunConfig& config, std::ostream& log) {
  config.validate();
  const Prepared p = prepare(config, log);
  const fs::path out = config.output_dir;
  const std::string fresh_manifest = manifest(config, p).dump(2) + "\n";
  check_manifest(out, fresh_manifest);
  fs::create_directories(out);
  write_file(out / "manifest.json", fresh_manifest);
  save_grid(p.grid, out / "grid.json");

  struct Cell {
    const SparseFitConfig* config;
    const FewShotSplit* split;
  };
  RunSummary summary;
  std::vector<Cell> todo;
  for (const auto& sc : p.grid.configs) {
    for (const auto& split : p.splits) {
      ++summary.cells_total;
      if (fs::exists(cell_dir(out, sc.name, split.split_id) / "result.json")) {
        ++summary.cells_skipped;
      } else {
        todo.push_back({&sc, &split});
      }
    }
  }
  log << fmt::format("{} cells, {} already done, {} to run\n", summary.cells_total,
                     summary.cells_skipped, todo.size());

  std::mutex mu;
  std::atomic<std::size_t> next{0};
  auto worker = [&] {
    for (std::size_t i = next++; i < todo.size(); i = next++) {
      const Cell& cell = todo[i];
      const fs::path dir = cell_dir(out, cell.config->name, cell.split->split_id);
      const std::string label = fmt::format("{}/split_{}", cell.config->name, cell.split->split_id);
      const auto t0 = std::chrono::steady_clock::now();
      try {
        fs::remove(dir / "error.txt");
        CellResult r = run_cell(config, p, *cell.config, *cell.split, dir);
        const SplitResult scored = score_cell(p, dir, r.split_id);
        write_file(dir / "records.jsonl", records_jsonl(scored.records));
        const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        write_file(dir / "timing.json", ordered_json{{"wall_seconds", secs}}.dump() + "\n");
        write_file(dir / "result.json", r.to_json().dump(2) + "\n");
        std::lock_guard<std::mutex> lock(mu);
        ++summary.cells_run;
        log << fmt::format("{}: acc {:.3f} nle {:.3f} ({:.1f}s)\n", label, r.accuracy,
                           r.mean_nle_score, secs);
      } catch (const std::exception& e) {
        try {
          write_file(dir / "error.txt", std::string(e.what()) + "\n");
        } catch (const std::exception&) {
        }
        std::lock_guard<std::mutex> lock(mu);
        summary.failures.push_back(label + ": " + e.what());
        log << label << " FAILED: " << e.what() << "\n";
      }
    }
  };
  const std::size_t threads = std::min(config.parallel_splits, std::max<std::size_t>(todo.size(), 1));
  if (threads <= 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    for (std::size_t t = 0; t < threads; ++t) pool.emplace_back(worker);
    for (auto& t : pool) t.join();
  }
  std::sort(summary.failures.begin(), summary.failures.end());

  try {
    write_reports(config, log);
  } catch (const ConfigError& e) {
    summary.failures.push_back(std::string("reports: ") + e.what());
  }
  return summary;
}

std::vector<ConfigAggregate> write_reports(const RunConfig& config, std::ostream& log) {
  const fs::path out = config.output_dir;
  const Grid grid = config.grid();
  std::vector<ConfigAggregate> aggregates;
  std::ostringstream agg_csv, timings;
  agg_csv << "config,kind,num_splits,missing_splits,trainable_params,total_params,percent_params,"
             "mean_acc,std_acc,mean_nle,std_nle,single_split\n";
  timings << "config,split_id,wall_seconds\n";
  for (const auto& sc : grid.configs) {
    ConfigAggregate a;
    a.config = sc;
    std::ostringstream scores;
    scores << "split_id,accuracy,mean_nle_score\n";
    std::vector<SplitResult> splits;
    for (std::size_t s = 0; s < config.splits.num_splits; ++s) {
      const fs::path dir = cell_dir(out, sc.name, s);
      if (!fs::exists(dir / "result.json")) {
        ++a.missing_splits;
        continue;
      }
      CellResult r = CellResult::from_json(json::parse(read_file(dir / "result.json")));
      scores << r.split_id << "," << num(r.accuracy) << "," << num(r.mean_nle_score) << "\n";
      SplitResult sr;
      sr.split_id = r.split_id;
      sr.accuracy = r.accuracy;
      sr.mean_nle_score = r.mean_nle_score;
      splits.push_back(std::move(sr));
      if (fs::exists(dir / "timing.json")) {
        const json t = json::parse(read_file(dir / "timing.json"));
        timings << sc.name << "," << s << "," << num(t.at("wall_seconds").get<double>()) << "\n";
      }
      a.trainable_params = r.trainable_params;
      a.total_params = r.total_params;
      a.percent_params = r.percent_params;
      a.cells.push_back(std::move(r));
    }
    write_file(out / "scores" / (sc.name + ".csv"), scores.str());
    if (!splits.empty()) a.summary = aggregate(splits);
    agg_csv << sc.name << "," << to_string(sc.kind) << "," << a.cells.size() << "," << a.missing_splits
            << "," << a.trainable_params << "," << a.total_params << "," << num(a.percent_params);
    if (a.summary) {
      agg_csv << "," << num(a.summary->mean_acc) << "," << num(a.summary->std_acc) << ","
              << num(a.summary->mean_nle) << "," << num(a.summary->std_nle) << ","
              << (a.summary->single_split ? 1 : 0) << "\n";
    } else {
      agg_csv << ",,,,,\n";
    }
    aggregates.push_back(std::move(a));
  }
  write_file(out / "aggregate.csv", agg_csv.str());
  write_file(out / "timings.csv", timings.str());
  try {
    const auto rows = build_table(aggregates, grid.baseline);
    write_file(out / "table.csv", table_csv(rows));
    write_file(out / "table.md", table_markdown(rows));
  } catch (const ConfigError& e) {
    log << "table not written: " << e.what() << "\n";
    throw;
  }
  return aggregates;
}

RunSummary rescore(const RunConfig& config, std::ostream& log) {
  config.validate();
  const Prepared p = prepare(config, log);
  RunSummary summary;
  for (const auto& sc : p.grid.configs) {
    for (const auto& split : p.splits) {
      ++summary.cells_total;
      const fs::path dir = cell_dir(config.output_dir, sc.name, split.split_id);
      if (!fs::exists(dir / "result.json") || !fs::exists(dir / "predictions.jsonl")) {
        ++summary.cells_skipped;
        continue;
      }
      try {
        CellResult r = CellResult::from_json(json::parse(read_file(dir / "result.json")));
        const SplitResult scored = score_cell(p, dir, split.split_id);
        r.accuracy = scored.accuracy;
        r.mean_nle_score = scored.mean_nle_score;
        r.num_records = scored.records.size();
        write_file(dir / "records.jsonl", records_jsonl(scored.records));
        write_file(dir / "result.json", r.to_json().dump(2) + "\n");
        ++summary.cells_run;
      } catch (const std::exception& e) {
        summary.failures.push_back(fmt::format("{}/split_{}: {}", sc.name, split.split_id, e.what()));
      }
    }
  }
  try {
    write_reports(config, log);
  } catch (const ConfigError& e) {
    summary.failures.push_back(std::string("reports: ") + e.what());
  }
  return summary;
}

// ---------------------------------------------------------------------------
// Tables

std::vector<TableRow> build_table(const std::vector<ConfigAggregate>& aggregates,
                                  const std::string& baseline) {
  const ConfigAggregate* base = nullptr;
  for (const auto& a : aggregates) {
    if (a.config.name == baseline) base = &a;
  }
  if (!base) throw ConfigError("baseline '" + baseline + "' is not among the configs");
  if (!base->summary) throw ConfigError("baseline '" + baseline + "' has no finished splits");

  auto column = [](const ConfigAggregate& a, bool acc) {
    std::vector<double> v;
    for (const auto& c : a.cells) v.push_back(100.0 * (acc ? c.accuracy : c.mean_nle_score));
    return v;
  };
  const auto base_acc = column(*base, true), base_nle = column(*base, false);

  std::vector<TableRow> rows;
  for (const auto& a : aggregates) {
    if (!a.summary) continue;
    TableRow r;
    r.config = a.config.name;
    r.baseline = &a == base;
    r.percent_params = a.percent_params;
    r.num_splits = a.summary->num_splits;
    r.acc_mean = 100.0 * a.summary->mean_acc;
    r.acc_std = 100.0 * a.summary->std_acc;
    r.nle_mean = 100.0 * a.summary->mean_nle;
    r.nle_std = 100.0 * a.summary->std_nle;
    r.tradeoff = tradeoff_score(r.percent_params, r.nle_mean);
    if (!r.baseline && a.cells.size() >= 2 && base->cells.size() >= 2) {
      r.acc_test = welch_t_test(column(a, true), base_acc);
      r.nle_test = welch_t_test(column(a, false), base_nle);
    }
    rows.push_back(std::move(r));
  }
  return rows;
}

std::string table_csv(const std::vector<TableRow>& rows) {
  std::ostringstream out;
  out << "config,percent_params,num_splits,acc_mean,acc_std,nle_mean,nle_std,tradeoff,"
         "acc_t,acc_p,acc_significant,nle_t,nle_p,nle_significant\n";
  auto test = [](const std::optional<TTestResult>& t) {
    if (!t) return std::string(",,");
    return fmt::format("{},{},{}", t->t, t->p, t->significant ? 1 : 0);
  };
  for (const auto& r : rows) {
    out << r.config << "," << num(r.percent_params) << "," << r.num_splits << "," << num(r.acc_mean)
        << "," << num(r.acc_std) << "," << num(r.nle_mean) << "," << num(r.nle_std) << ","
        << num(r.tradeoff) << "," << test(r.acc_test) << "," << test(r.nle_test) << "\n";
  }
  return out.str();
}

std::string table_markdown(const std::vector<TableRow>& rows) {
  std::ostringstream out;
  out << "| Config | %Params | Acc | nle | Trade-off |\n";
  out << "|---|---:|---:|---:|---:|\n";
  auto mark = [](const std::optional<TTestResult>& t) { return t && t->significant ? "*" : ""; };
  for (const auto& r : rows) {
    out << fmt::format("| {} | {:.2f} | {:.1f} ± {:.1f}{} | {:.1f} ± {:.1f}{} | {:.1f} |\n", r.config,
                       r.percent_params, r.acc_mean, r.acc_std, mark(r.acc_test), r.nle_mean,
                       r.nle_std, mark(r.nle_test), r.tradeoff);
  }
  out << "\n* p < 0.01 versus the baseline (Welch t-test over splits).\n";
  return out.str();
}

// ---------------------------------------------------------------------------
// Counting

std::vector<CountRow> count_grid(const ModelConfig& model, const Grid& grid, const LoraOptions& lora) {
  const ParameterRegistry base = symbolic_registry(model);
  std::vector<CountRow> rows;
  for (const auto& sc : grid.configs) {
    ParameterRegistry reg = base;
    if (sc.kind == ConfigKind::kLora) inject_lora(reg, lora);
    const ParameterCount c = count_mask(reg, resolve(sc, reg));
    rows.push_back({sc.name, c.selected, c.total, c.percent});
  }
  return rows;
}

std::string count_csv(const std::vector<CountRow>& rows) {
  std::ostringstream out;
  out << "config,trainable_params,total_params,percent_params\n";
  for (const auto& r : rows) out << r.config << "," << r.trainable << "," << r.total << "," << num(r.percent) << "\n";
  return out.str();
}

std::string count_markdown(const std::vector<CountRow>& rows) {
  std::ostringstream out;
  out << "| Config | Trainable | Total | %Params |\n|---|---:|---:|---:|\n";
  for (const auto& r : rows) {
    out << fmt::format("| {} | {} | {} | {:.2f} |\n", r.config, r.trainable, r.total, r.percent);
  }
  return out.str();
}

// ---------------------------------------------------------------------------
// Human evaluation

KappaReport kappa_report(const std::vector<HumanAnnotation>& annotations) {
  std::map<std::string, std::map<std::string, Verdict>> by_annotator;
  std::vector<Verdict> all;
  std::map<std::string, std::size_t> shortcomings;
  for (const auto& a : annotations) {
    if (!by_annotator[a.annotator_id].emplace(a.example_id, a.verdict).second) {
      throw DataError(fmt::format("annotator {} rates example {} twice", a.annotator_id, a.example_id));
    }
    all.push_back(a.verdict);
    for (const auto& s : a.shortcomings) ++shortcomings[s];
  }
  if (by_annotator.size() != 2) {
    throw DataError(fmt::format("agreement needs exactly two annotators, found {}", by_annotator.size()));
  }
  KappaReport r;
  for (const auto& [name, verdicts] : by_annotator) {
    r.annotators.push_back(name);
    std::vector<Verdict> v;
    for (const auto& [id, verdict] : verdicts) v.push_back(verdict);
    r.per_annotator_plausibility.emplace_back(name, plausibility_to_numeric(v));
  }
  const auto& first = by_annotator.at(r.annotators[0]);
  const auto& second = by_annotator.at(r.annotators[1]);
  std::vector<Verdict> x, y;
  for (const auto& [id, verdict] : first) {
    auto it = second.find(id);
    if (it == second.end()) continue;
    x.push_back(verdict);
    y.push_back(it->second);
  }
  if (x.empty()) throw DataError("the two annotators share no examples");
  r.aligned_examples = x.size();
  r.kappa = cohen_kappa(x, y);
  r.plausibility = plausibility_to_numeric(all);
  for (const auto category : kShortcomingCategories) {
    const auto it = shortcomings.find(std::string(category));
    r.shortcoming_counts.emplace_back(std::string(category), it == shortcomings.end() ? 0 : it->second);
  }
  return r;
}

std::string kappa_markdown(const KappaReport& r) {
  std::ostringstream out;
  out << fmt::format("Annotators: {} and {}, {} shared examples\n\n", r.annotators[0], r.annotators[1],
                     r.aligned_examples);
  out << fmt::format("Cohen's kappa: {:.4f}\n", r.kappa);
  out << fmt::format("Plausibility (all annotations): {:.4f}\n\n", r.plausibility);
  out << "| Annotator | Plausibility |\n|---|---:|\n";
  for (const auto& [name, v] : r.per_annotator_plausibility) out << fmt::format("| {} | {:.4f} |\n", name, v);
  out << "\n| Shortcoming | Count |\n|---|---:|\n";
  for (const auto& [name, n] : r.shortcoming_counts) out << fmt::format("| {} | {} |\n", name, n);
  return out.str();
}

}  // namespace sparsefit
