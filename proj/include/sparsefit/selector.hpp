#pragma once

#include <cstdint>
#include <set>
#include <string>
#include <string_view>
#include <vector>

#include "sparsefit/model.hpp"

namespace sparsefit {

// A named, architecturally defined parameter group.
struct Component {
  std::string name;
  std::string description;
  TagPredicate matches;
};

// All known components, in a fixed order:
//   encoder, decoder, lm_head, attention_q, attention_k, attention_v,
//   attention_o, attention_kqv, self_attention, cross_attention, ff_wi,
//   ff_wo, dense_both, layer_norm, rel_pos_bias, lora.
// Self-attention selectors never match cross-attention weights; the shared
// embedding counts as part of lm_head.
const std::vector<Component>& components();
// Throws ConfigError for an unknown name.
const Component& find_component(std::string_view name);

enum class ConfigKind { kSparseMask, kFull, kLora };

std::string to_string(ConfigKind kind);
ConfigKind parse_config_kind(std::string_view text);

struct SparseFitConfig {
  std::string name;
  ConfigKind kind = ConfigKind::kSparseMask;
  std::vector<std::string> selectors;

  // Throws ConfigError when selectors do not fit the kind.
  void validate() const;
};

SparseFitConfig single_config(const std::string& component);
SparseFitConfig pair_config(const std::string& first, const std::string& second);
SparseFitConfig full_config(std::string name = "full");
SparseFitConfig lora_config(std::string name = "lora");

// Set of trainable registry names, kept in registry order.
struct TrainabilityMask {
  std::vector<std::string> trainable;

  bool contains(std::string_view name) const;
  std::size_t size() const { return trainable.size(); }
};

// Union of selector matches over base (non-adapter) parameters; kind=full
// selects every name, kind=lora selects the adapter tensors.
TrainabilityMask resolve(const SparseFitConfig& config, const ParameterRegistry& registry);

// Trainable share of the registry under `mask`.
ParameterCount count_mask(const ParameterRegistry& registry, const TrainabilityMask& mask);

// Singles in the given order, then every unordered pair over the
// non-excluded components in index-lexicographic order.
std::vector<SparseFitConfig> enumerate_grid(const std::vector<std::string>& components,
                                            bool include_pairs,
                                            const std::set<std::string>& pair_exclusions);

// encoder, decoder, lm_head, attention_q, attention_k, attention_v,
// attention_kqv, ff_wi, ff_wo, dense_both, layer_norm.
std::vector<std::string> default_grid_components();
// "full" baseline, every single and pair from default_grid_components()
// (pairs exclude encoder and decoder), then "lora".
std::vector<SparseFitConfig> default_grid();

// requires_grad becomes true exactly for masked names; every other tensor
// is frozen and its gradient slot cleared.
void apply_freeze(ParameterRegistry& registry, const TrainabilityMask& mask);

struct LoraOptions {
  std::size_t rank = 8;
  double alpha = 16.0;
  std::vector<std::string> targets{"attention_q", "attention_v"};
  std::uint64_t seed = 0;
};

// Adds A [rank x in] (seeded normal) and B [out x rank] (zeros) next to every
// targeted 2-D projection W, so the model computes W + (alpha/rank) B A.
// Works on symbolic registries too. Returns the new adapter names.
// Throws ConfigError when rank >= min(in, out) or a target is not a projection.
std::vector<std::string> inject_lora(ParameterRegistry& registry, const LoraOptions& options);

}  // namespace sparsefit
