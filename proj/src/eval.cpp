#include "sparsefit/eval.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <fstream>
#include <sstream>

#include "sparsefit/data.hpp"
#include "sparsefit/errors.hpp"

namespace sparsefit {

std::vector<std::size_t> generate(const Model& model, std::span<const std::size_t> input_tokens,
                                  std::size_t max_len) {
  if (max_len == 0) throw ContractError("generate: max_len must be >= 1");
  autograd::NoGradGuard no_grad;
  const Tensor encoded = model.encode(input_tokens);
  Model::DecoderCache cache = model.start_decoding(encoded);
  std::vector<std::size_t> out;
  std::size_t next = Model::kPadId;
  while (out.size() < max_len) {
    const Tensor logits = model.decode_next(cache, next);
    const auto row = logits.data();
    next = static_cast<std::size_t>(std::max_element(row.begin(), row.end()) - row.begin());
    out.push_back(next);
    if (next == Vocabulary::kEos) break;
  }
  return out;
}

namespace {

std::string_view trim(std::string_view s) {
  const auto first = s.find_first_not_of(" \t\r\n");
  if (first == std::string_view::npos) return {};
  const auto last = s.find_last_not_of(" \t\r\n");
  return s.substr(first, last - first + 1);
}

std::optional<std::string> non_empty(std::string_view s) {
  if (s.empty()) return std::nullopt;
  return std::string(s);
}

}  // namespace

ParsedPrediction parse_prediction(std::string_view text) {
  ParsedPrediction out;
  if (trim(text).empty()) return out;
  const auto pos = text.find(kConnective);
  if (pos != std::string_view::npos) {
    out.label = non_empty(trim(text.substr(0, pos)));
    out.explanation = std::string(text.substr(pos + kConnective.size()));
    return out;
  }
  constexpr std::string_view kTrailing = " because";
  const std::string_view body = trim(text);
  if (body.size() >= kTrailing.size() &&
      body.substr(body.size() - kTrailing.size()) == kTrailing) {
    out.label = non_empty(trim(body.substr(0, body.size() - kTrailing.size())));
    out.explanation = std::string();
    return out;
  }
  out.label = std::string(body);
  return out;
}

bool labels_match(std::string_view predicted, std::string_view gold) {
  const auto a = trim(predicted), b = trim(gold);
  if (a.size() != b.size()) return false;
  for (std::size_t i = 0; i < a.size(); ++i) {
    if (std::tolower(static_cast<unsigned char>(a[i])) != std::tolower(static_cast<unsigned char>(b[i]))) {
      return false;
    }
  }
  return true;
}

// ---------------------------------------------------------------------------
// Embedders

WordVectorEmbedder::WordVectorEmbedder(std::unordered_map<std::string, std::vector<double>> vectors,
                                       std::string source)
    : vectors_(std::move(vectors)), source_(std::move(source)) {
  std::size_t width = 0;
  for (const auto& [word, vec] : vectors_) {
    if (width == 0) width = vec.size();
    if (vec.empty() || vec.size() != width) throw DataError("word vectors must share one non-zero width");
  }
}

WordVectorEmbedder WordVectorEmbedder::load(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open word vectors: " + path.string());
  std::unordered_map<std::string, std::vector<double>> vectors;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    std::istringstream fields(line);
    std::string word;
    if (!(fields >> word)) continue;
    std::vector<double> vec;
    double v;
    while (fields >> v) vec.push_back(v);
    if (!fields.eof()) throw DataError("bad number on word-vector line " + std::to_string(line_no));
    vectors[word] = std::move(vec);
  }
  return WordVectorEmbedder(std::move(vectors), path.filename().string());
}

double WordVectorEmbedder::cosine(const std::string& a, const std::string& b) const {
  auto ia = vectors_.find(a), ib = vectors_.find(b);
  if (ia == vectors_.end() || ib == vectors_.end()) return a == b ? 1.0 : 0.0;
  double dot = 0.0, na = 0.0, nb = 0.0;
  for (std::size_t i = 0; i < ia->second.size(); ++i) {
    dot += ia->second[i] * ib->second[i];
    na += ia->second[i] * ia->second[i];
    nb += ib->second[i] * ib->second[i];
  }
  if (na == 0.0 || nb == 0.0) return a == b ? 1.0 : 0.0;
  return dot / std::sqrt(na * nb);
}

// ---------------------------------------------------------------------------
// Scores

SimilarityScore similarity(const std::vector<std::string>& candidate,
                           const std::vector<std::string>& reference, const TokenEmbedder& embedder) {
  SimilarityScore s;
  if (candidate.empty() || reference.empty()) return s;
  std::vector<double> best_for_ref(reference.size(), 0.0);
  double precision_sum = 0.0;
  for (const auto& c : candidate) {
    double best = 0.0;
    for (std::size_t j = 0; j < reference.size(); ++j) {
      const double cos = std::clamp(embedder.cosine(c, reference[j]), 0.0, 1.0);
      best = std::max(best, cos);
      best_for_ref[j] = std::max(best_for_ref[j], cos);
    }
    precision_sum += best;
  }
  double recall_sum = 0.0;
  for (double b : best_for_ref) recall_sum += b;
  s.precision = precision_sum / static_cast<double>(candidate.size());
  s.recall = recall_sum / static_cast<double>(reference.size());
  s.f1 = s.precision + s.recall > 0.0 ? 2.0 * s.precision * s.recall / (s.precision + s.recall) : 0.0;
  return s;
}

double similarity_f1(const std::vector<std::string>& candidate,
                     const std::vector<std::string>& reference, const TokenEmbedder& embedder) {
  return similarity(candidate, reference, embedder).f1;
}

double normalized_nle_score(const EvalRecord& record, const TokenEmbedder& embedder) {
  if (!record.correct || !record.parsed_explanation) return 0.0;
  const auto candidate = word_tokens(*record.parsed_explanation);
  if (candidate.empty()) return 0.0;
  return similarity_f1(candidate, word_tokens(record.gold_explanation), embedder);
}

EvalRecord score_prediction(std::string example_id, std::string generated_text,
                            std::string gold_label, std::string gold_explanation,
                            const TokenEmbedder& embedder) {
  EvalRecord r;
  r.example_id = std::move(example_id);
  r.generated_text = std::move(generated_text);
  r.gold_label = std::move(gold_label);
  r.gold_explanation = std::move(gold_explanation);
  const ParsedPrediction parsed = parse_prediction(r.generated_text);
  r.parsed_label = parsed.label;
  r.parsed_explanation = parsed.explanation;
  r.correct = r.parsed_label.has_value() && labels_match(*r.parsed_label, r.gold_label);
  r.nle_score = normalized_nle_score(r, embedder);
  return r;
}

SplitResult summarize_split(std::size_t split_id, std::vector<EvalRecord> records) {
  SplitResult result;
  result.split_id = split_id;
  if (!records.empty()) {
    double correct = 0.0, nle = 0.0;
    for (const auto& r : records) {
      correct += r.correct ? 1.0 : 0.0;
      nle += r.nle_score;
    }
    result.accuracy = correct / static_cast<double>(records.size());
    result.mean_nle_score = nle / static_cast<double>(records.size());
  }
  result.records = std::move(records);
  return result;
}

}  // namespace sparsefit
