#pragma once

#include <cstddef>
#include <filesystem>
#include <memory>
#include <optional>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "sparsefit/model.hpp"

namespace sparsefit {

// Greedy argmax decoding from the decoder start token. Stops after emitting
// end-of-sequence or max_len tokens; the returned sequence includes the
// end-of-sequence token when one was produced.
std::vector<std::size_t> generate(const Model& model, std::span<const std::size_t> input_tokens,
                                  std::size_t max_len);

struct ParsedPrediction {
  std::optional<std::string> label;
  std::optional<std::string> explanation;
};

// Splits at the first " because ". A trailing " because" with nothing after
// it yields an empty explanation.
ParsedPrediction parse_prediction(std::string_view text);

// Case-insensitive comparison after trimming.
bool labels_match(std::string_view predicted, std::string_view gold);

// Cosine similarity between two tokens' embeddings.
class TokenEmbedder {
 public:
  virtual ~TokenEmbedder() = default;
  virtual double cosine(const std::string& a, const std::string& b) const = 0;
  virtual std::string name() const = 0;
};

// One-hot vectors: identical tokens score 1, everything else 0.
class OneHotEmbedder final : public TokenEmbedder {
 public:
  double cosine(const std::string& a, const std::string& b) const override { return a == b ? 1.0 : 0.0; }
  std::string name() const override { return "one-hot"; }
};

// Static word vectors, one "word v1 v2 ..." line per token. Tokens missing
// from the table fall back to one-hot behaviour.
class WordVectorEmbedder final : public TokenEmbedder {
 public:
  static WordVectorEmbedder load(const std::filesystem::path& path);
  explicit WordVectorEmbedder(std::unordered_map<std::string, std::vector<double>> vectors,
                              std::string source = "inline");

  double cosine(const std::string& a, const std::string& b) const override;
  std::string name() const override { return "word-vectors:" + source_; }

 private:
  std::unordered_map<std::string, std::vector<double>> vectors_;
  std::string source_;
};

struct SimilarityScore {
  double precision = 0.0;
  double recall = 0.0;
  double f1 = 0.0;
};

// Greedy matching: precision averages each candidate token's best cosine
// against the reference, recall the reverse; cosines are clamped at 0.
// Either side empty scores 0.
SimilarityScore similarity(const std::vector<std::string>& candidate,
                           const std::vector<std::string>& reference, const TokenEmbedder& embedder);
double similarity_f1(const std::vector<std::string>& candidate,
                     const std::vector<std::string>& reference, const TokenEmbedder& embedder);

struct EvalRecord {
  std::string example_id;
  std::string generated_text;
  std::optional<std::string> parsed_label;
  std::optional<std::string> parsed_explanation;
  std::string gold_label;
  std::string gold_explanation;
  bool correct = false;
  double nle_score = 0.0;
};

// 0 unless the label is correct and the explanation is non-empty; otherwise
// the similarity F1 against the gold explanation.
double normalized_nle_score(const EvalRecord& record, const TokenEmbedder& embedder);

// Parses the generated text and fills correct / nle_score.
EvalRecord score_prediction(std::string example_id, std::string generated_text,
                            std::string gold_label, std::string gold_explanation,
                            const TokenEmbedder& embedder);

struct SplitResult {
  std::size_t split_id = 0;
  double accuracy = 0.0;
  double mean_nle_score = 0.0;
  std::vector<EvalRecord> records;
};

SplitResult summarize_split(std::size_t split_id, std::vector<EvalRecord> records);

}  // namespace sparsefit
