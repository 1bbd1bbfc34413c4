#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "sparsefit/autograd.hpp"

namespace sparsefit {

using autograd::Shape;
using autograd::Tensor;

struct ModelConfig {
  std::size_t vocab_size = 64;
  std::size_t d_model = 32;
  std::size_t d_kv = 8;
  std::size_t num_heads = 4;
  std::size_t d_ff = 64;
  std::size_t num_encoder_blocks = 2;
  std::size_t num_decoder_blocks = 2;
  std::size_t rel_pos_buckets = 32;
  std::size_t rel_pos_max_distance = 128;
  bool tie_embedding_to_lm_head = true;
  double norm_eps = 1e-6;

  std::size_t inner_dim() const { return num_heads * d_kv; }
  // Throws ConfigError on any zero count.
  void validate() const;

  static ModelConfig toy();
  // vocab 32128, d_model 1024, d_kv 64, 16 heads, d_ff 4096, 24 + 24 blocks.
  static ModelConfig t5_large();
};

enum class Stack { kEncoder, kDecoder, kLmHead, kSharedEmbedding };

enum class LayerRole {
  kSelfAttnQ,
  kSelfAttnK,
  kSelfAttnV,
  kSelfAttnO,
  kCrossAttnQ,
  kCrossAttnK,
  kCrossAttnV,
  kCrossAttnO,
  kFfWi,
  kFfWo,
  kLayerNorm,
  kRelPosBias,
  kEmbedding,
  kLmProjection,
};

enum class Adapter { kNone, kLoraA, kLoraB };

struct ParameterTag {
  Stack stack = Stack::kEncoder;
  std::optional<std::size_t> block;
  LayerRole role = LayerRole::kEmbedding;
  Adapter adapter = Adapter::kNone;

  bool operator==(const ParameterTag&) const = default;
};

// Recovers the tag from a registry name path such as
// "decoder.block.3.cross_attn.k" or "encoder.block.0.self_attn.q.lora_a".
// Throws ConfigError for names outside the naming scheme.
ParameterTag parse_parameter_name(std::string_view name);

std::string to_string(Stack stack);
std::string to_string(LayerRole role);

struct RegistryEntry {
  std::string name;
  ParameterTag tag;
  Shape shape;
  Tensor tensor;  // undefined in symbolic mode
  double adapter_scale = 0.0;  // alpha / rank, set on LoRA B entries

  std::size_t count() const { return autograd::numel(shape); }
};

// Every model parameter with its structural tag, in a deterministic order.
class ParameterRegistry {
 public:
  enum class Mode { kAllocated, kSymbolic };

  explicit ParameterRegistry(Mode mode) : mode_(mode) {}

  Mode mode() const { return mode_; }
  bool symbolic() const { return mode_ == Mode::kSymbolic; }

  // Throws ContractError on duplicate names or a tensor/shape disagreement.
  RegistryEntry& add(std::string name, ParameterTag tag, Shape shape, Tensor tensor = {});

  const std::vector<RegistryEntry>& entries() const { return entries_; }
  std::size_t size() const { return entries_.size(); }
  bool contains(std::string_view name) const;
  const RegistryEntry& at(std::string_view name) const;
  const RegistryEntry* find(std::string_view name) const;
  // Tensor for an allocated entry; throws ContractError when symbolic or absent.
  Tensor tensor(std::string_view name) const;

  std::size_t total_count() const;

 private:
  Mode mode_;
  std::vector<RegistryEntry> entries_;
  std::unordered_map<std::string, std::size_t> index_;
};

// Shapes and tags for every parameter of `config`, nothing allocated.
ParameterRegistry symbolic_registry(const ModelConfig& config);

using TagPredicate = std::function<bool(const ParameterTag&)>;

struct ParameterCount {
  std::size_t selected = 0;
  std::size_t total = 0;
  double percent = 0.0;
};

ParameterCount count_parameters(const ParameterRegistry& registry, const TagPredicate& selector);

// T5-shaped encoder-decoder. Parameters live in the registry; the model
// looks them up by name, so adapters added to the registry take effect
// without rebuilding the model.
class Model {
 public:
  static constexpr std::size_t kPadId = 0;  // also the decoder start token

  Model(ModelConfig config, ParameterRegistry registry);

  const ModelConfig& config() const { return config_; }
  const ParameterRegistry& registry() const { return registry_; }
  ParameterRegistry& registry() { return registry_; }

  // Encoder states [src_len x d_model].
  Tensor encode(std::span<const std::size_t> src) const;
  // Next-token logits [tgt_len x vocab] for decoder inputs given encoder states.
  Tensor decode(const Tensor& encoded, std::span<const std::size_t> decoder_input) const;
  Tensor forward(std::span<const std::size_t> src, std::span<const std::size_t> decoder_input) const;

  // Cached keys and values for step-by-step decoding.
  class DecoderCache {
   private:
    friend class Model;
    std::vector<Tensor> self_k, self_v, cross_k, cross_v;
    std::size_t length = 0;
  };
  DecoderCache start_decoding(const Tensor& encoded) const;
  // Feeds one decoder input token; returns next-token logits [1 x vocab].
  // Matches the last row of decode() over the same prefix.
  Tensor decode_next(DecoderCache& cache, std::size_t token) const;

  // Deep copy with freshly allocated leaf tensors.
  Model clone() const;

 private:
  Tensor param(const std::string& name) const;
  Tensor project(const Tensor& x, const std::string& weight) const;
  std::vector<Tensor> position_bias(std::size_t query_len, std::size_t key_len,
                                    const std::string& table, bool decoder,
                                    std::size_t query_offset = 0) const;
  Tensor attend(const Tensor& q, const Tensor& k, const Tensor& v, const std::string& prefix,
                std::span<const Tensor> head_bias) const;
  Tensor attention(const Tensor& query_in, const Tensor& key_value_in, const std::string& prefix,
                   std::span<const Tensor> head_bias) const;
  Tensor lm_logits(const Tensor& hidden) const;
  Tensor feed_forward(const Tensor& x, const std::string& prefix) const;
  void check_tokens(std::span<const std::size_t> tokens, const char* what) const;

  ModelConfig config_;
  ParameterRegistry registry_;
};

// Allocates every parameter from a normal with standard deviation
// 1/sqrt(d_model); norm gains start at one.
Model build_model(const ModelConfig& config, std::uint64_t seed);

// T5 relative-position bucketing.
std::size_t relative_position_bucket(std::int64_t relative_position, bool bidirectional,
                                     std::size_t num_buckets, std::size_t max_distance);

// [pad] + target[0..n-1]
std::vector<std::size_t> shift_right(std::span<const std::size_t> target);

// Flat binary key -> array map keyed by registry names.
void save_checkpoint(const ParameterRegistry& registry, const std::filesystem::path& path);
// Loads values into an allocated registry; every stored name must exist with
// an identical shape. Throws DataError otherwise.
void load_checkpoint(ParameterRegistry& registry, const std::filesystem::path& path);

}  // namespace sparsefit
