#include "sparsefit/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <random>

#include <fmt/format.h>

#include "sparsefit/data.hpp"
#include "sparsefit/errors.hpp"

namespace sparsefit {

namespace ag = autograd;

AdamW::AdamW(const ParameterRegistry& registry, AdamWOptions options) : options_(options) {
  if (registry.symbolic()) throw ContractError("optimizer needs an allocated registry");
  if (!(options_.lr >= 0.0) || !(options_.eps > 0.0) || options_.beta1 < 0.0 || options_.beta1 >= 1.0 ||
      options_.beta2 < 0.0 || options_.beta2 >= 1.0 || options_.weight_decay < 0.0) {
    throw ConfigError("invalid AdamW hyperparameters");
  }
  for (const auto& e : registry.entries()) {
    if (!e.tensor.requires_grad()) continue;
    moments_.emplace(e.name, Moments{std::vector<double>(e.count(), 0.0),
                                     std::vector<double>(e.count(), 0.0)});
  }
}

const std::vector<double>& AdamW::first_moment(const std::string& name) const {
  auto it = moments_.find(name);
  if (it == moments_.end()) throw ContractError("no optimizer state for " + name);
  return it->second.m;
}

const std::vector<double>& AdamW::second_moment(const std::string& name) const {
  auto it = moments_.find(name);
  if (it == moments_.end()) throw ContractError("no optimizer state for " + name);
  return it->second.v;
}

void AdamW::step(ParameterRegistry& registry) {
  for (const auto& [name, state] : moments_) {
    if (!registry.at(name).tensor.has_grad()) {
      throw ContractError("trainable parameter " + name + " has no gradient");
    }
  }
  ++step_;
  const double t = static_cast<double>(step_);
  const double bias1 = 1.0 - std::pow(options_.beta1, t);
  const double bias2 = 1.0 - std::pow(options_.beta2, t);
  for (auto& [name, state] : moments_) {
    Tensor param = registry.at(name).tensor;
    const auto grad = param.grad();
    auto theta = param.mutable_data();
    for (std::size_t i = 0; i < theta.size(); ++i) {
      const double g = grad[i];
      state.m[i] = options_.beta1 * state.m[i] + (1.0 - options_.beta1) * g;
      state.v[i] = options_.beta2 * state.v[i] + (1.0 - options_.beta2) * g * g;
      const double m_hat = state.m[i] / bias1;
      const double v_hat = state.v[i] / bias2;
      const double old = theta[i];
      theta[i] = old - options_.lr * (m_hat / (std::sqrt(v_hat) + options_.eps)) -
                 options_.lr * options_.weight_decay * old;
      if (!std::isfinite(theta[i])) throw NonFiniteError("AdamW produced a non-finite value in " + name);
    }
    param.clear_grad();
  }
}

double clip_grad_norm(ParameterRegistry& registry, double max_norm) {
  double total = 0.0;
  for (const auto& e : registry.entries()) {
    if (!e.tensor.requires_grad() || !e.tensor.has_grad()) continue;
    for (double g : e.tensor.grad()) total += g * g;
  }
  const double norm = std::sqrt(total);
  if (norm > max_norm && norm > 0.0) {
    const double factor = max_norm / norm;
    for (const auto& e : registry.entries()) {
      if (!e.tensor.requires_grad() || !e.tensor.has_grad()) continue;
      // Gradient slots are owned by the node; rescale through it.
      for (double& g : e.tensor.node()->grad) g *= factor;
    }
  }
  return norm;
}

void TrainPlan::validate() const {
  if (epochs == 0) throw ConfigError("epochs must be >= 1");
  if (batch_size == 0) throw ConfigError("batch_size must be >= 1");
  if (max_target_len == 0) throw ConfigError("max_target_len must be >= 1");
  if (max_grad_norm && !(*max_grad_norm > 0.0)) throw ConfigError("max_grad_norm must be > 0");
}

Tensor batch_loss(const Model& model, const std::vector<TrainPair>& pairs,
                  std::span<const std::size_t> batch, std::size_t max_target_len) {
  std::vector<Tensor> logits;
  std::vector<std::size_t> targets;
  for (std::size_t idx : batch) {
    const TrainPair& pair = pairs.at(idx);
    const std::size_t len = std::min(pair.target.size(), max_target_len);
    std::span<const std::size_t> target(pair.target.data(), len);
    logits.push_back(model.forward(pair.source, shift_right(target)));
    targets.insert(targets.end(), target.begin(), target.end());
  }
  return ag::softmax_cross_entropy(ag::concat(logits, 0), targets, Vocabulary::kPad);
}

TrainedSnapshot train_split(Model& model, const std::vector<TrainPair>& data, const TrainPlan& plan) {
  plan.validate();
  if (data.empty()) throw ContractError("train_split: no training pairs");
  ParameterRegistry& registry = model.registry();
  AdamW optimizer(registry, plan.optimizer);
  std::mt19937_64 rng(plan.seed);
  std::vector<std::size_t> order(data.size());
  std::iota(order.begin(), order.end(), std::size_t{0});

  TrainedSnapshot snapshot;
  for (std::size_t epoch = 0; epoch < plan.epochs; ++epoch) {
    if (plan.shuffle) std::shuffle(order.begin(), order.end(), rng);
    double loss_sum = 0.0;
    std::size_t batches = 0;
    for (std::size_t start = 0; start < order.size(); start += plan.batch_size) {
      const std::size_t end = std::min(order.size(), start + plan.batch_size);
      std::span<const std::size_t> batch(order.data() + start, end - start);
      try {
        Tensor loss = batch_loss(model, data, batch, plan.max_target_len);
        loss_sum += loss.item();
        if (loss.requires_grad() && optimizer.tracked_count() > 0) {
          ag::backward(loss);
          if (plan.max_grad_norm) clip_grad_norm(registry, *plan.max_grad_norm);
          optimizer.step(registry);
        }
      } catch (const NonFiniteError& e) {
        throw TrainingError(fmt::format("non-finite value at epoch {} batch {}: {}", epoch, batches,
                                        e.what()),
                            epoch, batches);
      }
      ++batches;
    }
    snapshot.epoch_loss.push_back(loss_sum / static_cast<double>(batches));
  }
  for (const auto& e : registry.entries()) {
    const auto values = e.tensor.data();
    snapshot.weights.emplace(e.name, std::vector<double>(values.begin(), values.end()));
  }
  return snapshot;
}

void write_loss_csv(const std::vector<double>& epoch_loss, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write " + path.string());
  out << "epoch,mean_loss\n";
  for (std::size_t i = 0; i < epoch_loss.size(); ++i) out << fmt::format("{},{}\n", i, epoch_loss[i]);
}

}  // namespace sparsefit
