#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

namespace sparsefit {

enum class TaskKind { kNli, kMultipleChoiceQa, kOffensiveness, kChoiceOfTwo };

std::string to_string(TaskKind kind);
TaskKind parse_task_kind(std::string_view text);

struct TaskSchema {
  TaskKind task_kind = TaskKind::kNli;
  std::vector<std::string> label_set;  // empty for open-choice QA
  std::vector<std::string> slots;

  bool labeled() const { return !label_set.empty(); }
  // Throws ConfigError when the label set or slots break the task's shape.
  void validate() const;

  static TaskSchema builtin(TaskKind kind);
  // JSON: {"task_kind": "...", "label_set": [...], "slots": [...]}.
  static TaskSchema load(const std::filesystem::path& path);
};

// Accepts a built-in task name ("nli", "qa", ...) or a schema file path.
TaskSchema resolve_schema(const std::string& name_or_path);

struct Example {
  std::string id;
  std::map<std::string, std::string> inputs;
  std::string label;
  std::string explanation;
};

struct LineError {
  std::size_t line = 0;  // 1-based
  std::string message;
};

struct LoadResult {
  std::vector<Example> examples;
  std::vector<LineError> errors;
};

// One JSON record per line: {id, task, inputs{...}, label, explanation}.
// Invalid lines are reported and skipped; more than 10% invalid lines throws
// DataError.
LoadResult load_dataset(const std::filesystem::path& path, const TaskSchema& schema);
LoadResult parse_dataset(std::string_view text, const TaskSchema& schema);

struct FewShotSplit {
  std::size_t split_id = 0;
  std::vector<std::string> train_ids;
  std::vector<std::string> val_ids;
  bool val_truncated = false;  // fewer than val_size examples were left
};

struct SplitOptions {
  std::size_t num_splits = 60;
  std::size_t train_total = 48;
  std::size_t val_size = 350;
  std::uint64_t master_seed = 0;
};

std::uint64_t derive_seed(std::uint64_t master_seed, std::uint64_t index);

// Train side is stratified at train_total / |labels| per label (train_total
// for open-choice QA); validation is drawn from the rest. Throws ConfigError
// naming the deficient label when a quota cannot be met.
std::vector<FewShotSplit> sample_splits(const std::vector<Example>& examples,
                                        const TaskSchema& schema, const SplitOptions& options);

inline constexpr std::string_view kTemplateVersion = "templates-v1";
inline constexpr std::string_view kConnective = " because ";

struct RenderedExample {
  std::string input_text;
  std::string target_text;
};

// "{label} because {explanation}" target and the task's fixed input template.
RenderedExample render_prompt(const Example& example, const TaskSchema& schema);
std::string render_input(const Example& example, const TaskSchema& schema);

// Word-level tokens: whitespace-separated, with . , ! ? ; : ( ) " | split off.
std::vector<std::string> word_tokens(std::string_view text);
// Collapses runs of whitespace and drops spaces before closing punctuation.
std::string normalize_whitespace(std::string_view text);

class Vocabulary {
 public:
  static constexpr std::size_t kPad = 0;
  static constexpr std::size_t kEos = 1;
  static constexpr std::size_t kUnk = 2;
  static constexpr std::size_t kBecause = 3;

  Vocabulary();
  // Reserved tokens, then every word of `texts` in sorted order.
  static Vocabulary build(const std::vector<std::string>& texts);

  std::size_t size() const { return tokens_.size(); }
  std::size_t index(std::string_view token) const;  // kUnk when absent
  const std::string& token(std::size_t index) const;
  const std::vector<std::string>& tokens() const { return tokens_; }

 private:
  void add(const std::string& token);

  std::vector<std::string> tokens_;
  std::unordered_map<std::string, std::size_t> index_;
};

// Word indices followed by end-of-sequence.
std::vector<std::size_t> tokenize(std::string_view text, const Vocabulary& vocab);
// Stops at end-of-sequence; padding is skipped.
std::string detokenize(const std::vector<std::size_t>& indices, const Vocabulary& vocab);

}  // namespace sparsefit
