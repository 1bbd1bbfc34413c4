#include "sparsefit/model.hpp"

#include <cmath>
#include <cstring>
#include <fstream>
#include <random>

#include "sparsefit/errors.hpp"

namespace sparsefit {

namespace ag = autograd;

// ---------------------------------------------------------------------------
// ModelConfig

void ModelConfig::validate() const {
  const std::pair<const char*, std::size_t> counts[] = {
      {"vocab_size", vocab_size},
      {"d_model", d_model},
      {"d_kv", d_kv},
      {"num_heads", num_heads},
      {"d_ff", d_ff},
      {"num_encoder_blocks", num_encoder_blocks},
      {"num_decoder_blocks", num_decoder_blocks},
      {"rel_pos_buckets", rel_pos_buckets},
      {"rel_pos_max_distance", rel_pos_max_distance},
  };
  for (const auto& [name, value] : counts) {
    if (value == 0) throw ConfigError(std::string("model config: ") + name + " must be >= 1");
  }
  if (!(norm_eps > 0.0)) throw ConfigError("model config: norm_eps must be > 0");
}

ModelConfig ModelConfig::toy() { return ModelConfig{}; }

ModelConfig ModelConfig::t5_large() {
  ModelConfig c;
  c.vocab_size = 32128;
  c.d_model = 1024;
  c.d_kv = 64;
  c.num_heads = 16;
  c.d_ff = 4096;
  c.num_encoder_blocks = 24;
  c.num_decoder_blocks = 24;
  c.rel_pos_buckets = 32;
  c.tie_embedding_to_lm_head = true;
  return c;
}

// ---------------------------------------------------------------------------
// Names and tags

std::string to_string(Stack stack) {
  switch (stack) {
    case Stack::kEncoder: return "encoder";
    case Stack::kDecoder: return "decoder";
    case Stack::kLmHead: return "lm_head";
    case Stack::kSharedEmbedding: return "shared";
  }
  return "?";
}

std::string to_string(LayerRole role) {
  switch (role) {
    case LayerRole::kSelfAttnQ: return "self_attn_q";
    case LayerRole::kSelfAttnK: return "self_attn_k";
    case LayerRole::kSelfAttnV: return "self_attn_v";
    case LayerRole::kSelfAttnO: return "self_attn_o";
    case LayerRole::kCrossAttnQ: return "cross_attn_q";
    case LayerRole::kCrossAttnK: return "cross_attn_k";
    case LayerRole::kCrossAttnV: return "cross_attn_v";
    case LayerRole::kCrossAttnO: return "cross_attn_o";
    case LayerRole::kFfWi: return "ff_wi";
    case LayerRole::kFfWo: return "ff_wo";
    case LayerRole::kLayerNorm: return "layer_norm";
    case LayerRole::kRelPosBias: return "rel_pos_bias";
    case LayerRole::kEmbedding: return "embedding";
    case LayerRole::kLmProjection: return "lm_projection";
  }
  return "?";
}

namespace {

std::vector<std::string_view> split_dots(std::string_view name) {
  std::vector<std::string_view> parts;
  std::size_t start = 0;
  while (true) {
    const std::size_t dot = name.find('.', start);
    parts.push_back(name.substr(start, dot - start));
    if (dot == std::string_view::npos) break;
    start = dot + 1;
  }
  return parts;
}

[[noreturn]] void bad_name(std::string_view name) {
  throw ConfigError("unrecognized parameter name: " + std::string(name));
}

std::optional<LayerRole> attention_role(std::string_view kind, std::string_view proj) {
  const bool self = kind == "self_attn";
  if (!self && kind != "cross_attn") return std::nullopt;
  if (proj == "q") return self ? LayerRole::kSelfAttnQ : LayerRole::kCrossAttnQ;
  if (proj == "k") return self ? LayerRole::kSelfAttnK : LayerRole::kCrossAttnK;
  if (proj == "v") return self ? LayerRole::kSelfAttnV : LayerRole::kCrossAttnV;
  if (proj == "o") return self ? LayerRole::kSelfAttnO : LayerRole::kCrossAttnO;
  return std::nullopt;
}

}  // namespace

ParameterTag parse_parameter_name(std::string_view name) {
  auto parts = split_dots(name);
  ParameterTag tag;
  if (parts.size() >= 2 && (parts.back() == "lora_a" || parts.back() == "lora_b")) {
    tag.adapter = parts.back() == "lora_a" ? Adapter::kLoraA : Adapter::kLoraB;
    parts.pop_back();
  }
  if (parts.size() == 2 && parts[0] == "shared" && parts[1] == "embedding") {
    tag.stack = Stack::kSharedEmbedding;
    tag.role = LayerRole::kEmbedding;
  } else if (parts.size() == 2 && parts[0] == "lm_head" && parts[1] == "projection") {
    tag.stack = Stack::kLmHead;
    tag.role = LayerRole::kLmProjection;
  } else if (parts.size() >= 2 && (parts[0] == "encoder" || parts[0] == "decoder")) {
    tag.stack = parts[0] == "encoder" ? Stack::kEncoder : Stack::kDecoder;
    if (parts.size() == 2 && parts[1] == "rel_pos_bias") {
      tag.role = LayerRole::kRelPosBias;
    } else if (parts.size() == 2 && parts[1] == "final_layer_norm") {
      tag.role = LayerRole::kLayerNorm;
    } else if (parts.size() >= 4 && parts[1] == "block") {
      std::size_t block = 0;
      for (char c : parts[2]) {
        if (c < '0' || c > '9') bad_name(name);
        block = block * 10 + static_cast<std::size_t>(c - '0');
      }
      if (parts[2].empty()) bad_name(name);
      tag.block = block;
      if (parts.size() == 4 && (parts[3] == "self_attn_layer_norm" || parts[3] == "ff_layer_norm" ||
                                (parts[3] == "cross_attn_layer_norm" && tag.stack == Stack::kDecoder))) {
        tag.role = LayerRole::kLayerNorm;
      } else if (parts.size() == 5 && parts[3] == "ff" && (parts[4] == "wi" || parts[4] == "wo")) {
        tag.role = parts[4] == "wi" ? LayerRole::kFfWi : LayerRole::kFfWo;
      } else if (parts.size() == 5) {
        auto role = attention_role(parts[3], parts[4]);
        if (!role) bad_name(name);
        if (parts[3] == "cross_attn" && tag.stack != Stack::kDecoder) bad_name(name);
        tag.role = *role;
      } else {
        bad_name(name);
      }
    } else {
      bad_name(name);
    }
  } else {
    bad_name(name);
  }
  return tag;
}

// ---------------------------------------------------------------------------
// Registry

RegistryEntry& ParameterRegistry::add(std::string name, ParameterTag tag, Shape shape, Tensor tensor) {
  if (index_.count(name)) throw ContractError("duplicate parameter name: " + name);
  if (mode_ == Mode::kAllocated) {
    if (!tensor.defined()) throw ContractError("allocated registry needs a tensor for " + name);
    if (tensor.shape() != shape) throw ContractError("tensor shape disagrees with entry " + name);
  } else if (tensor.defined()) {
    throw ContractError("symbolic registry cannot hold tensors: " + name);
  }
  index_.emplace(name, entries_.size());
  entries_.push_back(RegistryEntry{std::move(name), tag, std::move(shape), std::move(tensor)});
  return entries_.back();
}

bool ParameterRegistry::contains(std::string_view name) const { return find(name) != nullptr; }

const RegistryEntry* ParameterRegistry::find(std::string_view name) const {
  auto it = index_.find(std::string(name));
  return it == index_.end() ? nullptr : &entries_[it->second];
}

const RegistryEntry& ParameterRegistry::at(std::string_view name) const {
  const RegistryEntry* e = find(name);
  if (!e) throw ContractError("no parameter named " + std::string(name));
  return *e;
}

Tensor ParameterRegistry::tensor(std::string_view name) const {
  if (symbolic()) throw ContractError("symbolic registry has no tensors");
  return at(name).tensor;
}

std::size_t ParameterRegistry::total_count() const {
  std::size_t total = 0;
  for (const auto& e : entries_) total += e.count();
  return total;
}

namespace {

// Visits every parameter of the architecture in registry order.
template <typename Visit>
void visit_layout(const ModelConfig& c, Visit&& visit) {
  const std::size_t d = c.d_model, inner = c.inner_dim();
  visit("shared.embedding", Shape{c.vocab_size, d});
  if (!c.tie_embedding_to_lm_head) visit("lm_head.projection", Shape{c.vocab_size, d});
  for (const char* stack : {"encoder", "decoder"}) {
    const bool decoder = std::string_view(stack) == "decoder";
    const std::string s(stack);
    visit(s + ".rel_pos_bias", Shape{c.rel_pos_buckets, c.num_heads});
    const std::size_t blocks = decoder ? c.num_decoder_blocks : c.num_encoder_blocks;
    for (std::size_t b = 0; b < blocks; ++b) {
      const std::string p = s + ".block." + std::to_string(b) + ".";
      visit(p + "self_attn_layer_norm", Shape{d});
      visit(p + "self_attn.q", Shape{d, inner});
      visit(p + "self_attn.k", Shape{d, inner});
      visit(p + "self_attn.v", Shape{d, inner});
      visit(p + "self_attn.o", Shape{inner, d});
      if (decoder) {
        visit(p + "cross_attn_layer_norm", Shape{d});
        visit(p + "cross_attn.q", Shape{d, inner});
        visit(p + "cross_attn.k", Shape{d, inner});
        visit(p + "cross_attn.v", Shape{d, inner});
        visit(p + "cross_attn.o", Shape{inner, d});
      }
      visit(p + "ff_layer_norm", Shape{d});
      visit(p + "ff.wi", Shape{d, c.d_ff});
      visit(p + "ff.wo", Shape{c.d_ff, d});
    }
    visit(s + ".final_layer_norm", Shape{d});
  }
}

}  // namespace

ParameterRegistry symbolic_registry(const ModelConfig& config) {
  config.validate();
  ParameterRegistry registry(ParameterRegistry::Mode::kSymbolic);
  visit_layout(config, [&](const std::string& name, Shape shape) {
    registry.add(name, parse_parameter_name(name), std::move(shape));
  });
  return registry;
}

ParameterCount count_parameters(const ParameterRegistry& registry, const TagPredicate& selector) {
  ParameterCount c;
  for (const auto& e : registry.entries()) {
    c.total += e.count();
    if (selector(e.tag)) c.selected += e.count();
  }
  c.percent = c.total == 0 ? 0.0
                           : static_cast<double>(c.selected) / static_cast<double>(c.total) * 100.0;
  return c;
}

// ---------------------------------------------------------------------------
// Network

std::size_t relative_position_bucket(std::int64_t relative_position, bool bidirectional,
                                     std::size_t num_buckets, std::size_t max_distance) {
  std::size_t bucket = 0;
  std::int64_t n = static_cast<std::int64_t>(num_buckets);
  std::int64_t pos = relative_position;
  if (bidirectional) {
    n /= 2;
    if (n == 0) return 0;
    if (pos > 0) bucket += static_cast<std::size_t>(n);
    pos = pos < 0 ? -pos : pos;
  } else {
    pos = pos < 0 ? -pos : 0;
  }
  const std::int64_t max_exact = n / 2;
  if (pos < max_exact || max_exact == 0) {
    return bucket + static_cast<std::size_t>(std::min(pos, n - 1));
  }
  const double scaled = std::log(static_cast<double>(pos) / static_cast<double>(max_exact)) /
                        std::log(static_cast<double>(max_distance) / static_cast<double>(max_exact)) *
                        static_cast<double>(n - max_exact);
  const std::int64_t large = std::min(max_exact + static_cast<std::int64_t>(scaled), n - 1);
  return bucket + static_cast<std::size_t>(large);
}

std::vector<std::size_t> shift_right(std::span<const std::size_t> target) {
  std::vector<std::size_t> out;
  out.reserve(target.size());
  if (target.empty()) return out;
  out.push_back(Model::kPadId);
  out.insert(out.end(), target.begin(), target.end() - 1);
  return out;
}

Model::Model(ModelConfig config, ParameterRegistry registry)
    : config_(std::move(config)), registry_(std::move(registry)) {
  config_.validate();
  if (registry_.symbolic()) throw ContractError("a model needs an allocated registry");
}

Model build_model(const ModelConfig& config, std::uint64_t seed) {
  config.validate();
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, 1.0 / std::sqrt(static_cast<double>(config.d_model)));
  ParameterRegistry registry(ParameterRegistry::Mode::kAllocated);
  visit_layout(config, [&](const std::string& name, Shape shape) {
    const ParameterTag tag = parse_parameter_name(name);
    std::vector<double> values(ag::numel(shape));
    if (tag.role == LayerRole::kLayerNorm) {
      std::fill(values.begin(), values.end(), 1.0);
    } else {
      for (double& v : values) v = normal(rng);
    }
    registry.add(name, tag, shape, Tensor::from(shape, std::move(values), true));
  });
  return Model(config, std::move(registry));
}

Tensor Model::param(const std::string& name) const { return registry_.tensor(name); }

Tensor Model::project(const Tensor& x, const std::string& weight) const {
  Tensor y = ag::matmul(x, param(weight));
  const RegistryEntry* a = registry_.find(weight + ".lora_a");
  if (a) {
    const RegistryEntry& b = registry_.at(weight + ".lora_b");
    // x A^T B^T == x (B A)^T, with A [r x in] and B [out x r].
    Tensor low = ag::matmul(ag::matmul(x, ag::transpose(a->tensor)), ag::transpose(b.tensor));
    y = ag::add(y, ag::scale(low, b.adapter_scale));
  }
  return y;
}

std::vector<Tensor> Model::position_bias(std::size_t query_len, std::size_t key_len,
                                         const std::string& table, bool decoder,
                                         std::size_t query_offset) const {
  std::vector<std::size_t> buckets(query_len * key_len);
  std::vector<double> mask(query_len * key_len, 0.0);
  bool masked = false;
  for (std::size_t q = 0; q < query_len; ++q) {
    const std::size_t qpos = q + query_offset;
    for (std::size_t k = 0; k < key_len; ++k) {
      const auto rel = static_cast<std::int64_t>(k) - static_cast<std::int64_t>(qpos);
      buckets[q * key_len + k] = relative_position_bucket(rel, !decoder, config_.rel_pos_buckets,
                                                          config_.rel_pos_max_distance);
      if (decoder && k > qpos) {
        mask[q * key_len + k] = -1e9;
        masked = true;
      }
    }
  }
  Tensor gathered = ag::embedding(param(table), buckets);  // [q*k x heads]
  Tensor causal = Tensor::from({query_len, key_len}, std::move(mask));
  std::vector<Tensor> heads;
  heads.reserve(config_.num_heads);
  for (std::size_t h = 0; h < config_.num_heads; ++h) {
    Tensor bias = ag::reshape(ag::slice(gathered, 1, h, h + 1), {query_len, key_len});
    heads.push_back(masked ? ag::add(bias, causal) : bias);
  }
  return heads;
}

Tensor Model::attend(const Tensor& q, const Tensor& k, const Tensor& v, const std::string& prefix,
                     std::span<const Tensor> head_bias) const {
  const std::size_t dk = config_.d_kv;
  std::vector<Tensor> heads;
  heads.reserve(config_.num_heads);
  for (std::size_t h = 0; h < config_.num_heads; ++h) {
    const Tensor qh = ag::slice(q, 1, h * dk, (h + 1) * dk);
    const Tensor kh = ag::slice(k, 1, h * dk, (h + 1) * dk);
    const Tensor vh = ag::slice(v, 1, h * dk, (h + 1) * dk);
    Tensor scores = ag::matmul(qh, ag::transpose(kh));
    if (!head_bias.empty()) scores = ag::add(scores, head_bias[h]);
    heads.push_back(ag::matmul(ag::softmax(scores), vh));
  }
  return project(ag::concat(heads, 1), prefix + ".o");
}

Tensor Model::attention(const Tensor& query_in, const Tensor& key_value_in,
                        const std::string& prefix, std::span<const Tensor> head_bias) const {
  return attend(project(query_in, prefix + ".q"), project(key_value_in, prefix + ".k"),
                project(key_value_in, prefix + ".v"), prefix, head_bias);
}

Tensor Model::feed_forward(const Tensor& x, const std::string& prefix) const {
  return project(ag::relu(project(x, prefix + ".wi")), prefix + ".wo");
}

void Model::check_tokens(std::span<const std::size_t> tokens, const char* what) const {
  if (tokens.empty()) throw ContractError(std::string(what) + " sequence is empty");
  for (std::size_t t : tokens) {
    if (t >= config_.vocab_size) {
      throw ContractError(std::string(what) + " token " + std::to_string(t) +
                          " outside vocabulary of " + std::to_string(config_.vocab_size));
    }
  }
}

Tensor Model::encode(std::span<const std::size_t> src) const {
  check_tokens(src, "source");
  const double eps = config_.norm_eps;
  Tensor x = ag::embedding(param("shared.embedding"), src);
  const auto bias = position_bias(src.size(), src.size(), "encoder.rel_pos_bias", false);
  for (std::size_t b = 0; b < config_.num_encoder_blocks; ++b) {
    const std::string p = "encoder.block." + std::to_string(b) + ".";
    Tensor h = ag::rmsnorm(x, param(p + "self_attn_layer_norm"), eps);
    x = ag::add(x, attention(h, h, p + "self_attn", bias));
    h = ag::rmsnorm(x, param(p + "ff_layer_norm"), eps);
    x = ag::add(x, feed_forward(h, p + "ff"));
  }
  return ag::rmsnorm(x, param("encoder.final_layer_norm"), eps);
}

Tensor Model::decode(const Tensor& encoded, std::span<const std::size_t> decoder_input) const {
  check_tokens(decoder_input, "target");
  const double eps = config_.norm_eps;
  Tensor y = ag::embedding(param("shared.embedding"), decoder_input);
  const auto bias =
      position_bias(decoder_input.size(), decoder_input.size(), "decoder.rel_pos_bias", true);
  for (std::size_t b = 0; b < config_.num_decoder_blocks; ++b) {
    const std::string p = "decoder.block." + std::to_string(b) + ".";
    Tensor h = ag::rmsnorm(y, param(p + "self_attn_layer_norm"), eps);
    y = ag::add(y, attention(h, h, p + "self_attn", bias));
    h = ag::rmsnorm(y, param(p + "cross_attn_layer_norm"), eps);
    y = ag::add(y, attention(h, encoded, p + "cross_attn", {}));
    h = ag::rmsnorm(y, param(p + "ff_layer_norm"), eps);
    y = ag::add(y, feed_forward(h, p + "ff"));
  }
  return lm_logits(y);
}

Tensor Model::lm_logits(const Tensor& hidden) const {
  const Tensor y = ag::rmsnorm(hidden, param("decoder.final_layer_norm"), config_.norm_eps);
  const Tensor head = param(config_.tie_embedding_to_lm_head ? "shared.embedding" : "lm_head.projection");
  return ag::matmul(y, ag::transpose(head));
}

Model::DecoderCache Model::start_decoding(const Tensor& encoded) const {
  DecoderCache cache;
  for (std::size_t b = 0; b < config_.num_decoder_blocks; ++b) {
    const std::string p = "decoder.block." + std::to_string(b) + ".cross_attn";
    cache.cross_k.push_back(project(encoded, p + ".k"));
    cache.cross_v.push_back(project(encoded, p + ".v"));
  }
  cache.self_k.resize(config_.num_decoder_blocks);
  cache.self_v.resize(config_.num_decoder_blocks);
  return cache;
}

Tensor Model::decode_next(DecoderCache& cache, std::size_t token) const {
  const std::size_t one[] = {token};
  check_tokens(one, "target");
  if (cache.cross_k.size() != config_.num_decoder_blocks) {
    throw ContractError("decoder cache was not started for this model");
  }
  const double eps = config_.norm_eps;
  const std::size_t pos = cache.length;
  Tensor y = ag::embedding(param("shared.embedding"), one);
  const auto bias = position_bias(1, pos + 1, "decoder.rel_pos_bias", true, pos);
  for (std::size_t b = 0; b < config_.num_decoder_blocks; ++b) {
    const std::string p = "decoder.block." + std::to_string(b) + ".";
    Tensor h = ag::rmsnorm(y, param(p + "self_attn_layer_norm"), eps);
    const Tensor k = project(h, p + "self_attn.k");
    const Tensor v = project(h, p + "self_attn.v");
    if (pos == 0) {
      cache.self_k[b] = k;
      cache.self_v[b] = v;
    } else {
      const Tensor ks[] = {cache.self_k[b], k};
      const Tensor vs[] = {cache.self_v[b], v};
      cache.self_k[b] = ag::concat(ks, 0);
      cache.self_v[b] = ag::concat(vs, 0);
    }
    y = ag::add(y, attend(project(h, p + "self_attn.q"), cache.self_k[b], cache.self_v[b],
                          p + "self_attn", bias));
    h = ag::rmsnorm(y, param(p + "cross_attn_layer_norm"), eps);
    y = ag::add(y, attend(project(h, p + "cross_attn.q"), cache.cross_k[b], cache.cross_v[b],
                          p + "cross_attn", {}));
    h = ag::rmsnorm(y, param(p + "ff_layer_norm"), eps);
    y = ag::add(y, feed_forward(h, p + "ff"));
  }
  ++cache.length;
  return lm_logits(y);
}

Tensor Model::forward(std::span<const std::size_t> src,
                      std::span<const std::size_t> decoder_input) const {
  return decode(encode(src), decoder_input);
}

Model Model::clone() const {
  ParameterRegistry copy(ParameterRegistry::Mode::kAllocated);
  for (const auto& e : registry_.entries()) {
    Tensor t = e.tensor.detach();
    t.set_requires_grad(e.tensor.requires_grad());
    copy.add(e.name, e.tag, e.shape, t).adapter_scale = e.adapter_scale;
  }
  return Model(config_, std::move(copy));
}

// ---------------------------------------------------------------------------
// Checkpoints

namespace {

constexpr char kMagic[8] = {'S', 'P', 'F', 'T', 'C', 'K', 'P', 'T'};
constexpr std::uint32_t kVersion = 1;

template <typename T>
void write_pod(std::ostream& out, const T& value) {
  out.write(reinterpret_cast<const char*>(&value), sizeof(T));
}

template <typename T>
T read_pod(std::istream& in, const std::filesystem::path& path) {
  T value{};
  in.read(reinterpret_cast<char*>(&value), sizeof(T));
  if (!in) throw DataError("truncated checkpoint: " + path.string());
  return value;
}

}  // namespace

void save_checkpoint(const ParameterRegistry& registry, const std::filesystem::path& path) {
  if (registry.symbolic()) throw ContractError("cannot save a symbolic registry");
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write checkpoint: " + path.string());
  out.write(kMagic, sizeof(kMagic));
  write_pod(out, kVersion);
  write_pod(out, static_cast<std::uint64_t>(registry.size()));
  for (const auto& e : registry.entries()) {
    write_pod(out, static_cast<std::uint32_t>(e.name.size()));
    out.write(e.name.data(), static_cast<std::streamsize>(e.name.size()));
    write_pod(out, static_cast<std::uint32_t>(e.shape.size()));
    for (std::size_t extent : e.shape) write_pod(out, static_cast<std::uint64_t>(extent));
    const auto data = e.tensor.data();
    out.write(reinterpret_cast<const char*>(data.data()),
              static_cast<std::streamsize>(data.size() * sizeof(double)));
  }
  if (!out) throw DataError("failed writing checkpoint: " + path.string());
}

void load_checkpoint(ParameterRegistry& registry, const std::filesystem::path& path) {
  if (registry.symbolic()) throw ContractError("cannot load into a symbolic registry");
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open checkpoint: " + path.string());
  char magic[sizeof(kMagic)];
  in.read(magic, sizeof(magic));
  if (!in || std::memcmp(magic, kMagic, sizeof(kMagic)) != 0) {
    throw DataError("not a checkpoint file: " + path.string());
  }
  if (read_pod<std::uint32_t>(in, path) != kVersion) throw DataError("unsupported checkpoint version");
  const auto count = read_pod<std::uint64_t>(in, path);
  if (count != registry.size()) {
    throw DataError("checkpoint holds " + std::to_string(count) + " tensors, model expects " +
                    std::to_string(registry.size()));
  }
  // Stage everything first so a bad file leaves the registry untouched.
  std::vector<std::pair<const RegistryEntry*, std::vector<double>>> staged;
  std::unordered_map<std::string, bool> seen;
  for (std::uint64_t i = 0; i < count; ++i) {
    const auto len = read_pod<std::uint32_t>(in, path);
    std::string name(len, '\0');
    in.read(name.data(), len);
    const RegistryEntry* entry = registry.find(name);
    if (!in || !entry) throw DataError("checkpoint tensor not in model: " + name);
    if (!seen.emplace(name, true).second) throw DataError("duplicate checkpoint tensor: " + name);
    const auto ndim = read_pod<std::uint32_t>(in, path);
    Shape shape(ndim);
    for (auto& extent : shape) extent = static_cast<std::size_t>(read_pod<std::uint64_t>(in, path));
    if (shape != entry->shape) {
      throw DataError("shape mismatch for " + name + ": file " + ag::shape_string(shape) +
                      ", model " + ag::shape_string(entry->shape));
    }
    std::vector<double> values(entry->count());
    in.read(reinterpret_cast<char*>(values.data()),
            static_cast<std::streamsize>(values.size() * sizeof(double)));
    if (!in) throw DataError("truncated checkpoint: " + path.string());
    for (double v : values) {
      if (!std::isfinite(v)) throw DataError("non-finite value in checkpoint tensor " + name);
    }
    staged.emplace_back(entry, std::move(values));
  }
  for (auto& [entry, values] : staged) {
    Tensor t = entry->tensor;
    auto dst = t.mutable_data();
    std::copy(values.begin(), values.end(), dst.begin());
  }
}

}  // namespace sparsefit
