#include <cmath>
#include <filesystem>
#include <fstream>
#include <random>

#include <gtest/gtest.h>

#include "freeze_check.hpp"
#include "sparsefit/data.hpp"
#include "sparsefit/errors.hpp"
#include "sparsefit/trainer.hpp"

using namespace sparsefit;
namespace ag = sparsefit::autograd;

namespace {

// Registry holding one scalar parameter.
ParameterRegistry scalar_registry(double theta) {
  ParameterRegistry r(ParameterRegistry::Mode::kAllocated);
  const std::string name = "encoder.final_layer_norm";
  r.add(name, parse_parameter_name(name), {1}, Tensor::from({1}, {theta}, true));
  return r;
}

void set_gradient(ParameterRegistry& r, double g) {
  Tensor t = r.tensor("encoder.final_layer_norm");
  ag::backward(ag::sum(ag::reshape(ag::multiply(t, Tensor::scalar(g)), {1, 1})));
}

double theta(const ParameterRegistry& r) { return r.tensor("encoder.final_layer_norm").data()[0]; }

// 20 random sequences; the target repeats the source.
std::vector<TrainPair> copy_task(std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<std::size_t> tok(4, 20), len(3, 6);
  std::vector<TrainPair> out(20);
  for (auto& p : out) {
    for (std::size_t i = len(rng); i > 0; --i) p.source.push_back(tok(rng));
    p.source.push_back(Vocabulary::kEos);
    p.target = p.source;
  }
  return out;
}

}  // namespace

TEST(AdamW, SingleStepClosedForm) {
  ParameterRegistry r = scalar_registry(1.0);
  AdamWOptions o;
  o.lr = 0.1;
  AdamW opt(r, o);
  set_gradient(r, 1.0);
  opt.step(r);
  // m_hat = g, v_hat = g^2
  EXPECT_NEAR(theta(r), 1.0 - 0.1 * (1.0 / (1.0 + 1e-8)), 1e-15);
  EXPECT_NEAR(theta(r), 0.9, 1e-8);
  EXPECT_EQ(opt.step_count(), 1u);
  EXPECT_NEAR(opt.first_moment("encoder.final_layer_norm")[0], 0.1, 1e-15);
  EXPECT_NEAR(opt.second_moment("encoder.final_layer_norm")[0], 0.001, 1e-15);
  EXPECT_FALSE(r.tensor("encoder.final_layer_norm").has_grad());
}

TEST(AdamW, PureDecayPath) {
  ParameterRegistry r = scalar_registry(1.0);
  AdamWOptions o;
  o.lr = 0.1;
  o.weight_decay = 0.1;
  AdamW opt(r, o);
  set_gradient(r, 0.0);
  opt.step(r);
  EXPECT_NEAR(theta(r), 0.99, 1e-15);
}

TEST(AdamW, TwoStepsMatchHandComputation) {
  ParameterRegistry r = scalar_registry(0.5);
  AdamWOptions o;
  o.lr = 0.01;
  AdamW opt(r, o);
  double th = 0.5, m = 0, v = 0;
  const double grads[] = {0.3, -0.7};
  for (int t = 1; t <= 2; ++t) {
    const double g = grads[t - 1];
    set_gradient(r, g);
    opt.step(r);
    m = 0.9 * m + 0.1 * g;
    v = 0.999 * v + 0.001 * g * g;
    const double mh = m / (1 - std::pow(0.9, t)), vh = v / (1 - std::pow(0.999, t));
    th -= 0.01 * mh / (std::sqrt(vh) + 1e-8);
    EXPECT_NEAR(theta(r), th, 1e-15);
  }
}

TEST(AdamW, MissingGradientIsContractError) {
  ParameterRegistry r = scalar_registry(1.0);
  AdamW opt(r, AdamWOptions{});
  EXPECT_THROW(opt.step(r), ContractError);
}

TEST(AdamW, FrozenTensorWithStaleGradientUnchanged) {
  ParameterRegistry r(ParameterRegistry::Mode::kAllocated);
  r.add("encoder.final_layer_norm", parse_parameter_name("encoder.final_layer_norm"), {1},
        Tensor::from({1}, {1.0}, true));
  r.add("decoder.final_layer_norm", parse_parameter_name("decoder.final_layer_norm"), {1},
        Tensor::from({1}, {2.0}, true));
  Tensor a = r.tensor("encoder.final_layer_norm"), b = r.tensor("decoder.final_layer_norm");
  ag::backward(ag::sum(ag::reshape(ag::multiply(a, b), {1, 1})));
  b.set_requires_grad(false);  // stale gradient stays in the slot
  AdamW opt(r, AdamWOptions{0.1});
  EXPECT_TRUE(opt.tracks("encoder.final_layer_norm"));
  EXPECT_FALSE(opt.tracks("decoder.final_layer_norm"));
  opt.step(r);
  EXPECT_EQ(b.data()[0], 2.0);
  EXPECT_NE(a.data()[0], 1.0);
}

TEST(AdamW, MomentsOnlyForTrainable) {
  Model m = build_model(ModelConfig::toy(), 1);
  apply_freeze(m.registry(), resolve(single_config("attention_q"), m.registry()));
  const AdamW opt(m.registry(), AdamWOptions{});
  EXPECT_EQ(opt.tracked_count(), 4u);  // 2 encoder + 2 decoder blocks
  for (const auto& e : m.registry().entries()) {
    EXPECT_EQ(opt.tracks(e.name), e.tag.role == LayerRole::kSelfAttnQ) << e.name;
  }
}

TEST(Clip, RescalesToMaxNorm) {
  ParameterRegistry r(ParameterRegistry::Mode::kAllocated);
  r.add("encoder.final_layer_norm", parse_parameter_name("encoder.final_layer_norm"), {2},
        Tensor::from({2}, {0.0, 0.0}, true));
  Tensor t = r.tensor("encoder.final_layer_norm");
  ag::backward(ag::sum(ag::reshape(ag::multiply(t, Tensor::from({2}, {3.0, 4.0})), {1, 2})));
  EXPECT_DOUBLE_EQ(clip_grad_norm(r, 1.0), 5.0);
  EXPECT_NEAR(t.grad()[0], 0.6, 1e-15);
  EXPECT_NEAR(t.grad()[1], 0.8, 1e-15);
}

TEST(Plan, Validation) {
  TrainPlan p;
  EXPECT_EQ(p.epochs, 25u);
  EXPECT_EQ(p.batch_size, 4u);
  EXPECT_EQ(p.optimizer.lr, 3e-5);
  p.epochs = 0;
  EXPECT_THROW(p.validate(), ConfigError);
  p = TrainPlan{};
  p.batch_size = 0;
  EXPECT_THROW(p.validate(), ConfigError);
}

TEST(BatchLoss, PaddingInvariance) {
  const Model m = build_model(ModelConfig::toy(), 3);
  const std::vector<TrainPair> plain = {{{5, 6, 7, 1}, {8, 9, 1}}};
  const std::vector<TrainPair> padded = {{{5, 6, 7, 1}, {8, 9, 1, 0, 0, 0}}};
  const std::size_t batch[] = {0};
  EXPECT_NEAR(batch_loss(m, plain, batch, 64).item(), batch_loss(m, padded, batch, 64).item(), 1e-14);
}

TEST(BatchLoss, TokenWeightedMeanOverExamples) {
  const Model m = build_model(ModelConfig::toy(), 3);
  const std::vector<TrainPair> pairs = {{{5, 6, 1}, {8, 1}}, {{7, 1}, {9, 10, 11, 1}}};
  const std::size_t both[] = {0, 1}, first[] = {0}, second[] = {1};
  const double l0 = batch_loss(m, pairs, first, 64).item(), l1 = batch_loss(m, pairs, second, 64).item();
  EXPECT_NEAR(batch_loss(m, pairs, both, 64).item(), (2 * l0 + 4 * l1) / 6, 1e-13);
  // Truncation keeps only the first max_target_len targets.
  const std::vector<TrainPair> cut = {{{7, 1}, {9, 10}}};
  EXPECT_NEAR(batch_loss(m, pairs, second, 2).item(), batch_loss(m, cut, first, 64).item(), 1e-14);
}

TEST(TrainSplit, CopyTaskLossDecreases) {
  int monotone = 0, improved = 0;
  for (std::uint64_t seed = 1; seed <= 5; ++seed) {
    Model m = build_model(ModelConfig::toy(), seed);
    TrainPlan plan;
    plan.epochs = 5;
    plan.seed = seed;
    plan.optimizer.lr = 1e-3;
    const auto snap = train_split(m, copy_task(seed), plan);
    bool mono = true;
    for (std::size_t e = 1; e < snap.epoch_loss.size(); ++e) mono = mono && snap.epoch_loss[e] < snap.epoch_loss[e - 1];
    monotone += mono;
    improved += snap.epoch_loss.back() < snap.epoch_loss.front();
  }
  EXPECT_GE(monotone, 4);
  EXPECT_GE(improved, 4);
}

TEST(TrainSplit, Deterministic) {
  auto run = [] {
    Model m = build_model(ModelConfig::toy(), 9);
    TrainPlan plan;
    plan.epochs = 2;
    plan.seed = 4;
    plan.optimizer.lr = 1e-3;
    return train_split(m, copy_task(2), plan);
  };
  const auto a = run(), b = run();
  EXPECT_EQ(a.epoch_loss, b.epoch_loss);
  EXPECT_EQ(a.weights, b.weights);
}

TEST(TrainSplit, FrozenParametersBitIdenticalOverWholeRun) {
  const auto out = testutil::freeze_check(pair_config("ff_wi", "layer_norm"), 30);
  EXPECT_TRUE(out.unmasked_changed.empty());
  EXPECT_GE(out.masked_changed, 1u);
}

TEST(TrainSplit, NonFiniteAbortsWithCoordinates) {
  Model m = build_model(ModelConfig::toy(), 9);
  TrainPlan plan;
  plan.epochs = 3;
  plan.optimizer.lr = 1e300;
  try {
    train_split(m, copy_task(2), plan);
    FAIL() << "expected TrainingError";
  } catch (const TrainingError& e) {
    EXPECT_LT(e.epoch(), 3u);
    EXPECT_NE(std::string(e.what()).find("epoch"), std::string::npos);
  }
}

TEST(TrainSplit, LossCsv) {
  const auto path = std::filesystem::temp_directory_path() / "sparsefit_loss_test.csv";
  write_loss_csv({1.5, 0.25}, path);
  std::ifstream in(path);
  std::string text((std::istreambuf_iterator<char>(in)), {});
  EXPECT_EQ(text, "epoch,mean_loss\n0,1.5\n1,0.25\n");
  std::filesystem::remove(path);
}
