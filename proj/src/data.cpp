#include "sparsefit/data.hpp"

#include <algorithm>
#include <fstream>
#include <random>
#include <set>
#include <sstream>
#include <unordered_set>

#include <nlohmann/json.hpp>

#include "sparsefit/errors.hpp"

namespace sparsefit {

using nlohmann::json;

std::string to_string(TaskKind kind) {
  switch (kind) {
    case TaskKind::kNli: return "nli";
    case TaskKind::kMultipleChoiceQa: return "qa";
    case TaskKind::kOffensiveness: return "offensiveness";
    case TaskKind::kChoiceOfTwo: return "choice_of_two";
  }
  return "?";
}

TaskKind parse_task_kind(std::string_view text) {
  if (text == "nli") return TaskKind::kNli;
  if (text == "qa" || text == "multiple_choice_qa") return TaskKind::kMultipleChoiceQa;
  if (text == "offensiveness") return TaskKind::kOffensiveness;
  if (text == "choice_of_two") return TaskKind::kChoiceOfTwo;
  throw ConfigError("unknown task kind: " + std::string(text));
}

// ---------------------------------------------------------------------------
// Schemas

namespace {

bool has_slot(const TaskSchema& s, std::string_view slot) {
  return std::find(s.slots.begin(), s.slots.end(), slot) != s.slots.end();
}

}  // namespace

void TaskSchema::validate() const {
  std::set<std::string> unique(label_set.begin(), label_set.end());
  if (unique.size() != label_set.size()) throw ConfigError("schema label_set has duplicates");
  for (const auto& l : label_set) {
    if (l.empty()) throw ConfigError("schema label_set contains an empty label");
    if (l.find(kConnective) != std::string::npos) {
      throw ConfigError("label '" + l + "' contains the explanation connective");
    }
  }
  auto need_labels = [&](std::size_t n) {
    if (label_set.size() != n) {
      throw ConfigError(to_string(task_kind) + " schema needs exactly " + std::to_string(n) +
                        " labels, got " + std::to_string(label_set.size()));
    }
  };
  auto need_slot = [&](std::string_view slot) {
    if (!has_slot(*this, slot)) {
      throw ConfigError(to_string(task_kind) + " schema is missing slot '" + std::string(slot) + "'");
    }
  };
  switch (task_kind) {
    case TaskKind::kNli:
      need_labels(3);
      need_slot("premise");
      need_slot("hypothesis");
      break;
    case TaskKind::kMultipleChoiceQa:
      need_labels(0);
      need_slot("question");
      if (slots.size() < 2) throw ConfigError("qa schema needs at least one choice slot");
      break;
    case TaskKind::kOffensiveness:
      need_labels(2);
      need_slot("post");
      break;
    case TaskKind::kChoiceOfTwo:
      need_labels(2);
      need_slot("choice1");
      need_slot("choice2");
      break;
  }
}

TaskSchema TaskSchema::builtin(TaskKind kind) {
  TaskSchema s;
  s.task_kind = kind;
  switch (kind) {
    case TaskKind::kNli:
      s.label_set = {"entailment", "neutral", "contradiction"};
      s.slots = {"premise", "hypothesis"};
      break;
    case TaskKind::kMultipleChoiceQa:
      s.slots = {"question", "choice1", "choice2", "choice3", "choice4", "choice5"};
      break;
    case TaskKind::kOffensiveness:
      s.label_set = {"offensive", "non-offensive"};
      s.slots = {"post"};
      break;
    case TaskKind::kChoiceOfTwo:
      s.label_set = {"choice 1", "choice 2"};
      s.slots = {"choice1", "choice2"};
      break;
  }
  return s;
}

TaskSchema TaskSchema::load(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open schema file: " + path.string());
  json doc;
  try {
    doc = json::parse(in);
    TaskSchema s;
    s.task_kind = parse_task_kind(doc.at("task_kind").get<std::string>());
    s.label_set = doc.value("label_set", std::vector<std::string>{});
    s.slots = doc.at("slots").get<std::vector<std::string>>();
    s.validate();
    return s;
  } catch (const json::exception& e) {
    throw ConfigError("invalid schema file " + path.string() + ": " + e.what());
  }
}

TaskSchema resolve_schema(const std::string& name_or_path) {
  for (TaskKind k : {TaskKind::kNli, TaskKind::kMultipleChoiceQa, TaskKind::kOffensiveness,
                     TaskKind::kChoiceOfTwo}) {
    if (name_or_path == to_string(k)) return TaskSchema::builtin(k);
  }
  if (name_or_path == "multiple_choice_qa") return TaskSchema::builtin(TaskKind::kMultipleChoiceQa);
  return TaskSchema::load(name_or_path);
}

// ---------------------------------------------------------------------------
// Loading

namespace {

Example parse_record(const std::string& line, const TaskSchema& schema) {
  json doc;
  try {
    doc = json::parse(line);
  } catch (const json::parse_error& e) {
    throw DataError(std::string("malformed JSON: ") + e.what());
  }
  if (!doc.is_object()) throw DataError("record is not an object");
  auto str_field = [&](const char* key) {
    if (!doc.contains(key)) throw DataError(std::string("missing field '") + key + "'");
    if (!doc[key].is_string()) throw DataError(std::string("field '") + key + "' is not a string");
    return doc[key].get<std::string>();
  };
  Example ex;
  ex.id = str_field("id");
  if (ex.id.empty()) throw DataError("empty id");
  if (doc.contains("task")) {
    const std::string task = doc["task"].is_string() ? doc["task"].get<std::string>() : "";
    if (parse_task_kind(task) != schema.task_kind) {
      throw DataError("task '" + task + "' does not match schema " + to_string(schema.task_kind));
    }
  }
  if (!doc.contains("inputs") || !doc["inputs"].is_object()) throw DataError("missing inputs object");
  for (const auto& slot : schema.slots) {
    const auto& inputs = doc["inputs"];
    if (!inputs.contains(slot) || !inputs[slot].is_string()) {
      throw DataError("missing slot '" + slot + "'");
    }
    ex.inputs[slot] = inputs[slot].get<std::string>();
  }
  ex.label = str_field("label");
  if (schema.labeled() &&
      std::find(schema.label_set.begin(), schema.label_set.end(), ex.label) == schema.label_set.end()) {
    throw DataError("label '" + ex.label + "' is not in the label set");
  }
  if (ex.label.empty()) throw DataError("empty label");
  ex.explanation = str_field("explanation");
  return ex;
}

}  // namespace

LoadResult parse_dataset(std::string_view text, const TaskSchema& schema) {
  schema.validate();
  LoadResult result;
  std::unordered_set<std::string> ids;
  std::size_t nonblank = 0;
  std::size_t line_no = 0;
  std::istringstream in{std::string(text)};
  std::string line;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    ++nonblank;
    try {
      Example ex = parse_record(line, schema);
      if (!ids.insert(ex.id).second) throw DataError("duplicate id '" + ex.id + "'");
      result.examples.push_back(std::move(ex));
    } catch (const std::exception& e) {
      result.errors.push_back({line_no, e.what()});
    }
  }
  if (nonblank > 0 && result.errors.size() * 10 > nonblank) {
    std::string message = std::to_string(result.errors.size()) + " of " + std::to_string(nonblank) +
                          " records are invalid";
    for (std::size_t i = 0; i < std::min<std::size_t>(3, result.errors.size()); ++i) {
      message += "; line " + std::to_string(result.errors[i].line) + ": " + result.errors[i].message;
    }
    throw DataError(message);
  }
  return result;
}

LoadResult load_dataset(const std::filesystem::path& path, const TaskSchema& schema) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open dataset: " + path.string());
  std::ostringstream buffer;
  buffer << in.rdbuf();
  return parse_dataset(buffer.str(), schema);
}

// ---------------------------------------------------------------------------
// Splits

std::uint64_t derive_seed(std::uint64_t master_seed, std::uint64_t index) {
  auto mix = [](std::uint64_t z) {
    z += 0x9e3779b97f4a7c15ULL;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
  };
  return mix(master_seed ^ mix(index));
}

std::vector<FewShotSplit> sample_splits(const std::vector<Example>& examples,
                                        const TaskSchema& schema, const SplitOptions& options) {
  if (options.train_total == 0) throw ConfigError("train_total must be positive");
  std::vector<std::vector<std::size_t>> pools;
  std::size_t quota = options.train_total;
  if (schema.labeled()) {
    if (options.train_total % schema.label_set.size() != 0) {
      throw ConfigError("train_total " + std::to_string(options.train_total) +
                        " does not divide evenly over " + std::to_string(schema.label_set.size()) +
                        " labels");
    }
    quota = options.train_total / schema.label_set.size();
    pools.resize(schema.label_set.size());
    for (std::size_t i = 0; i < examples.size(); ++i) {
      auto it = std::find(schema.label_set.begin(), schema.label_set.end(), examples[i].label);
      if (it == schema.label_set.end()) throw ConfigError("example label outside the label set");
      pools[static_cast<std::size_t>(it - schema.label_set.begin())].push_back(i);
    }
  } else {
    pools.emplace_back(examples.size());
    for (std::size_t i = 0; i < examples.size(); ++i) pools[0][i] = i;
  }
  for (std::size_t l = 0; l < pools.size(); ++l) {
    if (pools[l].size() < quota) {
      const std::string label = schema.labeled() ? schema.label_set[l] : "<all>";
      throw ConfigError("label '" + label + "' has " + std::to_string(pools[l].size()) +
                        " examples, quota needs " + std::to_string(quota));
    }
  }

  std::vector<FewShotSplit> splits;
  splits.reserve(options.num_splits);
  for (std::size_t s = 0; s < options.num_splits; ++s) {
    std::mt19937_64 rng(derive_seed(options.master_seed, s));
    FewShotSplit split;
    split.split_id = s;
    std::vector<bool> in_train(examples.size(), false);
    for (const auto& pool : pools) {
      std::vector<std::size_t> order = pool;
      std::shuffle(order.begin(), order.end(), rng);
      for (std::size_t k = 0; k < quota; ++k) {
        in_train[order[k]] = true;
        split.train_ids.push_back(examples[order[k]].id);
      }
    }
    std::vector<std::size_t> rest;
    for (std::size_t i = 0; i < examples.size(); ++i) {
      if (!in_train[i]) rest.push_back(i);
    }
    std::shuffle(rest.begin(), rest.end(), rng);
    const std::size_t take = std::min(options.val_size, rest.size());
    split.val_truncated = take < options.val_size;
    for (std::size_t k = 0; k < take; ++k) split.val_ids.push_back(examples[rest[k]].id);
    splits.push_back(std::move(split));
  }
  return splits;
}

// ---------------------------------------------------------------------------
// Prompts

std::string render_input(const Example& example, const TaskSchema& schema) {
  auto slot = [&](const std::string& name) -> const std::string& {
    auto it = example.inputs.find(name);
    if (it == example.inputs.end()) throw DataError("example " + example.id + " lacks slot " + name);
    return it->second;
  };
  switch (schema.task_kind) {
    case TaskKind::kNli:
      return "explain nli premise: " + slot("premise") + " hypothesis: " + slot("hypothesis");
    case TaskKind::kMultipleChoiceQa: {
      std::string text = "explain qa question: " + slot("question") + " choices:";
      bool first = true;
      for (const auto& s : schema.slots) {
        if (s == "question") continue;
        text += first ? " " : " | ";
        text += slot(s);
        first = false;
      }
      return text;
    }
    case TaskKind::kOffensiveness:
      return "explain offensive post: " + slot("post");
    case TaskKind::kChoiceOfTwo:
      return "explain nonsense choice 1: " + slot("choice1") + " choice 2: " + slot("choice2");
  }
  return {};
}

RenderedExample render_prompt(const Example& example, const TaskSchema& schema) {
  return {render_input(example, schema),
          example.label + std::string(kConnective) + example.explanation};
}

// ---------------------------------------------------------------------------
// Tokens

namespace {

bool is_split_punct(char c) {
  switch (c) {
    case '.': case ',': case '!': case '?': case ';': case ':':
    case '(': case ')': case '"': case '|':
      return true;
    default:
      return false;
  }
}

bool is_space(char c) { return c == ' ' || c == '\t' || c == '\n' || c == '\r' || c == '\f' || c == '\v'; }

bool attaches_left(const std::string& tok) {
  return tok == "." || tok == "," || tok == "!" || tok == "?" || tok == ";" || tok == ":" || tok == ")";
}

std::string join_words(const std::vector<std::string>& words) {
  std::string out;
  bool glue_next = false;
  for (const auto& w : words) {
    if (!out.empty() && !glue_next && !attaches_left(w)) out += ' ';
    out += w;
    glue_next = w == "(";
  }
  return out;
}

}  // namespace

std::vector<std::string> word_tokens(std::string_view text) {
  std::vector<std::string> out;
  std::string current;
  auto flush = [&] {
    if (!current.empty()) out.push_back(std::move(current));
    current.clear();
  };
  for (char c : text) {
    if (is_space(c)) {
      flush();
    } else if (is_split_punct(c)) {
      flush();
      out.emplace_back(1, c);
    } else {
      current += c;
    }
  }
  flush();
  return out;
}

std::string normalize_whitespace(std::string_view text) { return join_words(word_tokens(text)); }

Vocabulary::Vocabulary() {
  add("<pad>");
  add("</s>");
  add("<unk>");
  add("because");
}

void Vocabulary::add(const std::string& token) {
  if (index_.count(token)) return;
  index_.emplace(token, tokens_.size());
  tokens_.push_back(token);
}

Vocabulary Vocabulary::build(const std::vector<std::string>& texts) {
  std::set<std::string> words;
  for (const auto& t : texts) {
    for (auto& w : word_tokens(t)) words.insert(std::move(w));
  }
  Vocabulary vocab;
  for (const auto& w : words) vocab.add(w);
  return vocab;
}

std::size_t Vocabulary::index(std::string_view token) const {
  auto it = index_.find(std::string(token));
  return it == index_.end() ? kUnk : it->second;
}

const std::string& Vocabulary::token(std::size_t index) const {
  if (index >= tokens_.size()) return tokens_[kUnk];
  return tokens_[index];
}

std::vector<std::size_t> tokenize(std::string_view text, const Vocabulary& vocab) {
  std::vector<std::size_t> out;
  for (const auto& w : word_tokens(text)) out.push_back(vocab.index(w));
  out.push_back(Vocabulary::kEos);
  return out;
}

std::string detokenize(const std::vector<std::size_t>& indices, const Vocabulary& vocab) {
  std::vector<std::string> words;
  for (std::size_t i : indices) {
    if (i == Vocabulary::kEos) break;
    if (i == Vocabulary::kPad) continue;
    words.push_back(vocab.token(i));
  }
  return join_words(words);
}

}  // namespace sparsefit
