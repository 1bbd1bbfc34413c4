#include "sparsefit/selector.hpp"

#include <algorithm>
#include <cmath>
#include <random>
#include <unordered_set>

#include "sparsefit/errors.hpp"

namespace sparsefit {

namespace {

bool base(const ParameterTag& t) { return t.adapter == Adapter::kNone; }

bool is_self_attention(LayerRole r) {
  return r == LayerRole::kSelfAttnQ || r == LayerRole::kSelfAttnK || r == LayerRole::kSelfAttnV ||
         r == LayerRole::kSelfAttnO;
}

bool is_cross_attention(LayerRole r) {
  return r == LayerRole::kCrossAttnQ || r == LayerRole::kCrossAttnK ||
         r == LayerRole::kCrossAttnV || r == LayerRole::kCrossAttnO;
}

bool is_projection(LayerRole r) {
  return is_self_attention(r) || is_cross_attention(r) || r == LayerRole::kFfWi ||
         r == LayerRole::kFfWo;
}

TagPredicate role_is(std::initializer_list<LayerRole> roles) {
  std::vector<LayerRole> list(roles);
  return [list](const ParameterTag& t) {
    return base(t) && std::find(list.begin(), list.end(), t.role) != list.end();
  };
}

std::vector<Component> make_components() {
  using R = LayerRole;
  return {
      {"encoder", "every encoder block plus the encoder's final norm and position bias",
       [](const ParameterTag& t) { return base(t) && t.stack == Stack::kEncoder; }},
      {"decoder", "every decoder block (including cross-attention) plus final norm and position bias",
       [](const ParameterTag& t) { return base(t) && t.stack == Stack::kDecoder; }},
      {"lm_head", "LM projection, including the shared embedding it is tied to",
       [](const ParameterTag& t) {
         return base(t) && (t.stack == Stack::kLmHead || t.stack == Stack::kSharedEmbedding);
       }},
      {"attention_q", "self-attention query projections", role_is({R::kSelfAttnQ})},
      {"attention_k", "self-attention key projections", role_is({R::kSelfAttnK})},
      {"attention_v", "self-attention value projections", role_is({R::kSelfAttnV})},
      {"attention_o", "self-attention output projections", role_is({R::kSelfAttnO})},
      {"attention_kqv", "self-attention query, key and value projections",
       role_is({R::kSelfAttnQ, R::kSelfAttnK, R::kSelfAttnV})},
      {"self_attention", "self-attention query, key, value and output projections",
       role_is({R::kSelfAttnQ, R::kSelfAttnK, R::kSelfAttnV, R::kSelfAttnO})},
      {"cross_attention", "encoder-decoder attention projections",
       role_is({R::kCrossAttnQ, R::kCrossAttnK, R::kCrossAttnV, R::kCrossAttnO})},
      {"ff_wi", "feed-forward input projections", role_is({R::kFfWi})},
      {"ff_wo", "feed-forward output projections", role_is({R::kFfWo})},
      {"dense_both", "feed-forward input and output projections", role_is({R::kFfWi, R::kFfWo})},
      {"layer_norm", "every RMS norm gain, including the final norms", role_is({R::kLayerNorm})},
      {"rel_pos_bias", "relative-position bias tables", role_is({R::kRelPosBias})},
      {"lora", "low-rank adapter factors",
       [](const ParameterTag& t) { return t.adapter != Adapter::kNone; }},
  };
}

}  // namespace

const std::vector<Component>& components() {
  static const std::vector<Component> all = make_components();
  return all;
}

const Component& find_component(std::string_view name) {
  for (const auto& c : components()) {
    if (c.name == name) return c;
  }
  throw ConfigError("unknown component: " + std::string(name));
}

std::string to_string(ConfigKind kind) {
  switch (kind) {
    case ConfigKind::kSparseMask: return "sparse_mask";
    case ConfigKind::kFull: return "full";
    case ConfigKind::kLora: return "lora";
  }
  return "?";
}

ConfigKind parse_config_kind(std::string_view text) {
  if (text == "sparse_mask") return ConfigKind::kSparseMask;
  if (text == "full") return ConfigKind::kFull;
  if (text == "lora") return ConfigKind::kLora;
  throw ConfigError("unknown config kind: " + std::string(text));
}

void SparseFitConfig::validate() const {
  if (name.empty()) throw ConfigError("config name is empty");
  switch (kind) {
    case ConfigKind::kFull:
      if (!selectors.empty()) throw ConfigError("full config '" + name + "' must not list selectors");
      break;
    case ConfigKind::kSparseMask:
      if (selectors.empty() || selectors.size() > 2) {
        throw ConfigError("sparse config '" + name + "' needs one or two selectors");
      }
      for (const auto& s : selectors) find_component(s);
      break;
    case ConfigKind::kLora:
      for (const auto& s : selectors) find_component(s);
      break;
  }
}

SparseFitConfig single_config(const std::string& component) {
  return {component, ConfigKind::kSparseMask, {component}};
}

SparseFitConfig pair_config(const std::string& first, const std::string& second) {
  return {first + "+" + second, ConfigKind::kSparseMask, {first, second}};
}

SparseFitConfig full_config(std::string name) { return {std::move(name), ConfigKind::kFull, {}}; }

SparseFitConfig lora_config(std::string name) { return {std::move(name), ConfigKind::kLora, {}}; }

bool TrainabilityMask::contains(std::string_view name) const {
  return std::find(trainable.begin(), trainable.end(), name) != trainable.end();
}

TrainabilityMask resolve(const SparseFitConfig& config, const ParameterRegistry& registry) {
  config.validate();
  std::vector<const Component*> selected;
  if (config.kind == ConfigKind::kLora) {
    selected.push_back(&find_component("lora"));
  } else {
    for (const auto& s : config.selectors) selected.push_back(&find_component(s));
  }
  TrainabilityMask mask;
  for (const auto& e : registry.entries()) {
    bool take = config.kind == ConfigKind::kFull;
    for (const Component* c : selected) take = take || c->matches(e.tag);
    if (take) mask.trainable.push_back(e.name);
  }
  return mask;
}

ParameterCount count_mask(const ParameterRegistry& registry, const TrainabilityMask& mask) {
  std::unordered_set<std::string> names(mask.trainable.begin(), mask.trainable.end());
  ParameterCount c;
  for (const auto& e : registry.entries()) {
    c.total += e.count();
    if (names.count(e.name)) c.selected += e.count();
  }
  c.percent = c.total == 0 ? 0.0
                           : static_cast<double>(c.selected) / static_cast<double>(c.total) * 100.0;
  return c;
}

std::vector<SparseFitConfig> enumerate_grid(const std::vector<std::string>& components,
                                            bool include_pairs,
                                            const std::set<std::string>& pair_exclusions) {
  std::vector<SparseFitConfig> grid;
  for (const auto& c : components) {
    find_component(c);
    grid.push_back(single_config(c));
  }
  if (!include_pairs) return grid;
  std::vector<std::string> eligible;
  for (const auto& c : components) {
    if (!pair_exclusions.count(c)) eligible.push_back(c);
  }
  for (std::size_t i = 0; i < eligible.size(); ++i) {
    for (std::size_t j = i + 1; j < eligible.size(); ++j) {
      grid.push_back(pair_config(eligible[i], eligible[j]));
    }
  }
  return grid;
}

std::vector<std::string> default_grid_components() {
  return {"encoder", "decoder",       "lm_head", "attention_q", "attention_k", "attention_v",
          "attention_kqv", "ff_wi",   "ff_wo",   "dense_both",  "layer_norm"};
}

std::vector<SparseFitConfig> default_grid() {
  std::vector<SparseFitConfig> grid{full_config()};
  for (auto& c : enumerate_grid(default_grid_components(), true, {"encoder", "decoder"})) {
    grid.push_back(std::move(c));
  }
  grid.push_back(lora_config());
  return grid;
}

void apply_freeze(ParameterRegistry& registry, const TrainabilityMask& mask) {
  if (registry.symbolic()) throw ContractError("apply_freeze needs an allocated registry");
  std::unordered_set<std::string> names(mask.trainable.begin(), mask.trainable.end());
  for (const auto& e : registry.entries()) {
    Tensor t = e.tensor;
    const bool trainable = names.count(e.name) > 0;
    t.set_requires_grad(trainable);
    if (!trainable) t.clear_grad();
  }
}

std::vector<std::string> inject_lora(ParameterRegistry& registry, const LoraOptions& options) {
  if (options.rank == 0) throw ConfigError("LoRA rank must be positive");
  if (options.targets.empty()) throw ConfigError("LoRA needs at least one target component");
  std::vector<const Component*> targets;
  for (const auto& t : options.targets) targets.push_back(&find_component(t));

  std::vector<std::size_t> chosen;
  for (std::size_t i = 0; i < registry.entries().size(); ++i) {
    const auto& e = registry.entries()[i];
    if (e.tag.adapter != Adapter::kNone) continue;
    bool hit = false;
    for (const Component* c : targets) hit = hit || c->matches(e.tag);
    if (!hit) continue;
    if (!is_projection(e.tag.role) || e.shape.size() != 2) {
      throw ConfigError("LoRA target '" + e.name + "' is not a 2-D projection");
    }
    if (registry.contains(e.name + ".lora_a")) {
      throw ConfigError("LoRA already injected into " + e.name);
    }
    const std::size_t in = e.shape[0], out = e.shape[1];
    if (options.rank >= std::min(in, out)) {
      throw ConfigError("LoRA rank " + std::to_string(options.rank) + " must be below min(in, out) = " +
                        std::to_string(std::min(in, out)) + " for " + e.name);
    }
    chosen.push_back(i);
  }
  if (chosen.empty()) throw ConfigError("LoRA targets matched no parameters");

  std::mt19937_64 rng(options.seed);
  std::vector<std::string> added;
  const double scale = options.alpha / static_cast<double>(options.rank);
  for (std::size_t i : chosen) {
    // Copy: adding entries may reallocate the registry's storage.
    const RegistryEntry target = registry.entries()[i];
    const std::size_t in = target.shape[0], out = target.shape[1];
    ParameterTag tag_a = target.tag, tag_b = target.tag;
    tag_a.adapter = Adapter::kLoraA;
    tag_b.adapter = Adapter::kLoraB;
    const Shape shape_a{options.rank, in}, shape_b{out, options.rank};
    Tensor a, b;
    if (!registry.symbolic()) {
      std::normal_distribution<double> normal(0.0, 1.0 / std::sqrt(static_cast<double>(in)));
      std::vector<double> values(options.rank * in);
      for (double& v : values) v = normal(rng);
      a = Tensor::from(shape_a, std::move(values), true);
      b = Tensor::zeros(shape_b, true);
    }
    registry.add(target.name + ".lora_a", tag_a, shape_a, a);
    registry.add(target.name + ".lora_b", tag_b, shape_b, b).adapter_scale = scale;
    added.push_back(target.name + ".lora_a");
    added.push_back(target.name + ".lora_b");
  }
  return added;
}

}  // namespace sparsefit
