#include <cmath>
#include <filesystem>
#include <fstream>
#include <random>
#include <set>

#include <gtest/gtest.h>

#include "sparsefit/errors.hpp"
#include "sparsefit/model.hpp"
#include "sparsefit/selector.hpp"
#include "sparsefit/trainer.hpp"
#include "test_util.hpp"

using namespace sparsefit;
namespace ag = sparsefit::autograd;

namespace {

// Closed-form parameter arithmetic for a T5 layout, written independently
// of the registry: attention = 4 * d * inner, ff = 2 * d * d_ff, norms = d.
struct T5Arithmetic {
  double d, inner, ff, vocab, n_enc, n_dec, bias;
  explicit T5Arithmetic(const ModelConfig& c)
      : d(c.d_model), inner(c.num_heads * c.d_kv), ff(c.d_ff), vocab(c.vocab_size),
        n_enc(c.num_encoder_blocks), n_dec(c.num_decoder_blocks),
        bias(static_cast<double>(c.rel_pos_buckets * c.num_heads)) {}
  double attn() const { return 4 * d * inner; }
  double proj() const { return d * inner; }
  double encoder() const { return n_enc * (attn() + 2 * d * ff + 2 * d) + d + bias; }
  double decoder() const { return n_dec * (2 * attn() + 2 * d * ff + 3 * d) + d + bias; }
  double embedding() const { return vocab * d; }
  double total() const { return encoder() + decoder() + embedding(); }
  double pct(double x) const { return 100.0 * x / total(); }
  double q() const { return (n_enc + n_dec) * proj(); }
  double wi() const { return (n_enc + n_dec) * d * ff; }
  double norms() const { return (2 * n_enc + 3 * n_dec + 2) * d; }
};

std::size_t count_of(const ParameterRegistry& r, const std::string& component) {
  return count_parameters(r, find_component(component).matches).selected;
}

std::vector<std::size_t> toks(std::initializer_list<std::size_t> v) { return v; }

}  // namespace

TEST(Config, ToyAndValidation) {
  const ModelConfig toy = ModelConfig::toy();
  EXPECT_EQ(toy.vocab_size, 64u);
  EXPECT_EQ(toy.d_model, 32u);
  EXPECT_EQ(toy.inner_dim(), 32u);
  ModelConfig bad = toy;
  bad.num_heads = 0;
  EXPECT_THROW(bad.validate(), ConfigError);
}

TEST(Registry, ToyStructure) {
  const Model m = build_model(ModelConfig::toy(), 1);
  std::set<std::size_t> enc_blocks;
  std::map<std::size_t, int> dec_norms;
  for (const auto& e : m.registry().entries()) {
    if (e.tag.stack == Stack::kEncoder && e.tag.block) enc_blocks.insert(*e.tag.block);
    if (e.tag.stack == Stack::kDecoder && e.tag.block && e.tag.role == LayerRole::kLayerNorm) {
      ++dec_norms[*e.tag.block];
    }
    const bool cross = e.tag.role == LayerRole::kCrossAttnQ || e.tag.role == LayerRole::kCrossAttnK ||
                       e.tag.role == LayerRole::kCrossAttnV || e.tag.role == LayerRole::kCrossAttnO;
    if (cross) {
      EXPECT_EQ(e.tag.stack, Stack::kDecoder);
    }
  }
  EXPECT_EQ(enc_blocks, (std::set<std::size_t>{0, 1}));
  EXPECT_EQ(dec_norms.size(), 2u);
  for (const auto& [b, n] : dec_norms) EXPECT_EQ(n, 3);
}

TEST(Registry, NamesRoundTripToTags) {
  const ParameterRegistry r = symbolic_registry(ModelConfig::toy());
  for (const auto& e : r.entries()) EXPECT_EQ(parse_parameter_name(e.name), e.tag) << e.name;
  EXPECT_THROW(parse_parameter_name("encoder.block.0.cross_attn.q"), ConfigError);
  EXPECT_THROW(parse_parameter_name("bogus"), ConfigError);
  const ParameterTag lora = parse_parameter_name("encoder.block.0.self_attn.q.lora_a");
  EXPECT_EQ(lora.adapter, Adapter::kLoraA);
  EXPECT_EQ(lora.role, LayerRole::kSelfAttnQ);
}

TEST(Registry, SymbolicMatchesAllocated) {
  const ModelConfig c = ModelConfig::toy();
  const ParameterRegistry sym = symbolic_registry(c);
  const Model m = build_model(c, 4);
  ASSERT_EQ(sym.size(), m.registry().size());
  for (std::size_t i = 0; i < sym.size(); ++i) {
    EXPECT_EQ(sym.entries()[i].name, m.registry().entries()[i].name);
    EXPECT_EQ(sym.entries()[i].shape, m.registry().entries()[i].shape);
  }
  for (const auto& comp : components()) {
    const auto a = count_parameters(sym, comp.matches), b = count_parameters(m.registry(), comp.matches);
    EXPECT_EQ(a.selected, b.selected) << comp.name;
    EXPECT_EQ(a.total, b.total);
  }
}

TEST(Registry, PartitionSumsToTotal) {
  for (const ModelConfig& c : {ModelConfig::toy(), ModelConfig::t5_large()}) {
    const ParameterRegistry r = symbolic_registry(c);
    std::size_t enc = 0, dec = 0, shared = 0, finals = 0, bias = 0;
    for (const auto& e : r.entries()) {
      if (e.tag.role == LayerRole::kRelPosBias) {
        bias += e.count();
      } else if (e.tag.role == LayerRole::kLayerNorm && !e.tag.block) {
        finals += e.count();
      } else if (e.tag.stack == Stack::kEncoder) {
        enc += e.count();
      } else if (e.tag.stack == Stack::kDecoder) {
        dec += e.count();
      } else {
        shared += e.count();
      }
    }
    EXPECT_EQ(enc + dec + shared + finals + bias, r.total_count());
    // Tied: the embedding appears exactly once.
    EXPECT_EQ(shared, c.vocab_size * c.d_model);
    EXPECT_FALSE(r.contains("lm_head.projection"));
  }
}

TEST(Registry, UntiedHeadIsSeparate) {
  ModelConfig c = ModelConfig::toy();
  c.tie_embedding_to_lm_head = false;
  const ParameterRegistry r = symbolic_registry(c);
  EXPECT_TRUE(r.contains("lm_head.projection"));
  EXPECT_EQ(count_of(r, "lm_head"), 2 * c.vocab_size * c.d_model);
}

TEST(SymbolicCount, T5LargeMatchesClosedForm) {
  const ModelConfig c = ModelConfig::t5_large();
  const ParameterRegistry r = symbolic_registry(c);
  const T5Arithmetic o(c);
  EXPECT_EQ(static_cast<double>(r.total_count()), o.total());
  EXPECT_EQ(r.total_count(), 737668096u);
  EXPECT_EQ(static_cast<double>(count_of(r, "encoder")), o.encoder());
  EXPECT_EQ(static_cast<double>(count_of(r, "decoder")), o.decoder());
  EXPECT_EQ(static_cast<double>(count_of(r, "lm_head")), o.embedding());
  EXPECT_EQ(static_cast<double>(count_of(r, "attention_q")), o.q());
  EXPECT_EQ(static_cast<double>(count_of(r, "attention_kqv")), 3 * o.q());
  EXPECT_EQ(static_cast<double>(count_of(r, "ff_wi")), o.wi());
  EXPECT_EQ(static_cast<double>(count_of(r, "dense_both")), 2 * o.wi());
  EXPECT_EQ(static_cast<double>(count_of(r, "layer_norm")), o.norms());
  EXPECT_EQ(static_cast<double>(count_of(r, "rel_pos_bias")), 2 * o.bias);
}

TEST(SymbolicCount, TablePercentages) {
  const ParameterRegistry r = symbolic_registry(ModelConfig::t5_large());
  auto pct = [&](const SparseFitConfig& sc) { return count_mask(r, resolve(sc, r)).percent; };
  EXPECT_NEAR(pct(single_config("decoder")), 54.60, 0.3);
  EXPECT_NEAR(pct(single_config("encoder")), 40.95, 0.3);
  EXPECT_NEAR(pct(single_config("ff_wo")), 27.29, 0.3);
  EXPECT_NEAR(pct(single_config("ff_wi")), 27.29, 0.3);
  EXPECT_NEAR(pct(single_config("attention_kqv")), 20.47, 0.3);
  EXPECT_NEAR(pct(pair_config("lm_head", "attention_q")), 11.28, 0.3);
  EXPECT_NEAR(pct(pair_config("layer_norm", "attention_q")), 6.84, 0.3);
  EXPECT_NEAR(pct(single_config("attention_q")), 6.82, 0.3);
  EXPECT_NEAR(pct(single_config("attention_k")), 6.82, 0.3);
  EXPECT_NEAR(pct(single_config("attention_v")), 6.82, 0.3);
  EXPECT_NEAR(pct(single_config("lm_head")), 4.46, 0.3);
  EXPECT_NEAR(pct(single_config("layer_norm")), 0.02, 0.3);
  EXPECT_DOUBLE_EQ(pct(full_config()), 100.0);
  const auto none = count_parameters(r, [](const ParameterTag&) { return false; });
  EXPECT_EQ(none.selected, 0u);
  EXPECT_EQ(none.percent, 0.0);
}

TEST(Model, DeterministicInit) {
  const Model a = build_model(ModelConfig::toy(), 77), b = build_model(ModelConfig::toy(), 77);
  const Model c = build_model(ModelConfig::toy(), 78);
  bool differs = false;
  for (std::size_t i = 0; i < a.registry().size(); ++i) {
    const auto x = a.registry().entries()[i].tensor.data(), y = b.registry().entries()[i].tensor.data();
    EXPECT_TRUE(std::equal(x.begin(), x.end(), y.begin()));
    const auto z = c.registry().entries()[i].tensor.data();
    differs |= !std::equal(x.begin(), x.end(), z.begin());
  }
  EXPECT_TRUE(differs);
}

TEST(Model, ForwardShapeAndPositionSensitivity) {
  const Model m = build_model(ModelConfig::toy(), 2);
  const auto src = toks({5, 9, 12, 1}), swapped = toks({9, 5, 12, 1}), tgt = toks({0, 7, 8});
  const Tensor a = m.forward(src, tgt), b = m.forward(swapped, tgt);
  EXPECT_EQ(a.shape(), (Shape{3, 64}));
  EXPECT_FALSE(std::equal(a.data().begin(), a.data().end(), b.data().begin()));
  EXPECT_THROW(m.forward({}, tgt), ContractError);
  EXPECT_THROW(m.forward(src, {}), ContractError);
  EXPECT_THROW(m.forward(toks({64}), tgt), ContractError);
}

TEST(Model, DecoderIsCausal) {
  const Model m = build_model(ModelConfig::toy(), 2);
  const auto src = toks({5, 9, 12, 1});
  const Tensor a = m.forward(src, toks({0, 7, 8})), b = m.forward(src, toks({0, 7, 30}));
  for (std::size_t i = 0; i < 2 * 64; ++i) EXPECT_NEAR(a.data()[i], b.data()[i], 1e-12);
}

TEST(Model, IncrementalDecodingMatchesFullDecode) {
  const Model m = build_model(ModelConfig::toy(), 6);
  ag::NoGradGuard guard;
  const Tensor enc = m.encode(toks({3, 4, 5, 6, 7, 1}));
  const auto dec = toks({0, 11, 12, 13, 40});
  const Tensor full = m.decode(enc, dec);
  auto cache = m.start_decoding(enc);
  for (std::size_t t = 0; t < dec.size(); ++t) {
    const Tensor step = m.decode_next(cache, dec[t]);
    for (std::size_t v = 0; v < 64; ++v) EXPECT_NEAR(step.data()[v], full.data()[t * 64 + v], 1e-12);
  }
}

TEST(Model, EndToEndGradientMatchesFiniteDifferences) {
  ModelConfig c = ModelConfig::toy();
  Model m = build_model(c, 8);
  const std::vector<TrainPair> data = {{toks({4, 5, 6, 1}), toks({7, 8, 1})},
                                       {toks({9, 10, 1}), toks({11, 12, 13, 1})}};
  const std::size_t batch[] = {0, 1};
  std::vector<Tensor> leaves;
  for (const auto& e : m.registry().entries()) leaves.push_back(e.tensor);
  // One random probe in each of 20+ randomly chosen tensors.
  std::mt19937_64 rng(99);
  std::shuffle(leaves.begin(), leaves.end(), rng);
  leaves.resize(24);
  const auto report = testutil::check_gradients([&] { return batch_loss(m, data, batch, 16); }, leaves,
                                               rng, 1, 1e-5, 1e-3);
  EXPECT_GE(report.probes, 20u);
  EXPECT_LT(report.worst, 1e-3);
}

TEST(Model, RelativePositionBuckets) {
  EXPECT_EQ(relative_position_bucket(0, true, 32, 128), 0u);
  EXPECT_EQ(relative_position_bucket(1, true, 32, 128), 17u);
  EXPECT_EQ(relative_position_bucket(-1, true, 32, 128), 1u);
  EXPECT_EQ(relative_position_bucket(10, true, 32, 128), 24u);
  EXPECT_EQ(relative_position_bucket(200, true, 32, 128), 31u);
  EXPECT_EQ(relative_position_bucket(-3, false, 32, 128), 3u);
  EXPECT_EQ(relative_position_bucket(5, false, 32, 128), 0u);
  EXPECT_EQ(relative_position_bucket(-20, false, 32, 128), 17u);
}

TEST(Model, ShiftRight) {
  EXPECT_EQ(shift_right(toks({7, 8, 1})), toks({0, 7, 8}));
}

TEST(Checkpoint, RoundTripAndValidation) {
  const auto dir = std::filesystem::temp_directory_path() / "sparsefit_ckpt_test";
  std::filesystem::create_directories(dir);
  const Model a = build_model(ModelConfig::toy(), 10);
  Model b = build_model(ModelConfig::toy(), 11);
  save_checkpoint(a.registry(), dir / "a.bin");
  load_checkpoint(b.registry(), dir / "a.bin");
  for (std::size_t i = 0; i < a.registry().size(); ++i) {
    const auto x = a.registry().entries()[i].tensor.data(), y = b.registry().entries()[i].tensor.data();
    EXPECT_TRUE(std::equal(x.begin(), x.end(), y.begin()));
  }
  ModelConfig wide = ModelConfig::toy();
  wide.d_ff = 48;
  Model c = build_model(wide, 1);
  EXPECT_THROW(load_checkpoint(c.registry(), dir / "a.bin"), DataError);
  std::ofstream(dir / "junk.bin") << "not a checkpoint";
  EXPECT_THROW(load_checkpoint(b.registry(), dir / "junk.bin"), DataError);
  std::filesystem::remove_all(dir);
}

TEST(Model, CloneIsIndependent) {
  Model a = build_model(ModelConfig::toy(), 12);
  Model b = a.clone();
  b.registry().tensor("shared.embedding").mutable_data()[0] += 1.0;
  EXPECT_NE(a.registry().tensor("shared.embedding").data()[0], b.registry().tensor("shared.embedding").data()[0]);
}
