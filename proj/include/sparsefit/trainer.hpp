#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "sparsefit/model.hpp"

namespace sparsefit {

struct AdamWOptions {
  double lr = 3e-5;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.0;
};

// Decoupled weight decay:
//   theta -= lr * m_hat / (sqrt(v_hat) + eps) + lr * wd * theta
// Moments exist only for tensors that required a gradient when the
// optimizer was created.
class AdamW {
 public:
  AdamW(const ParameterRegistry& registry, AdamWOptions options);

  // Updates every tracked tensor and clears its gradient. Throws
  // ContractError if a tracked tensor has no gradient.
  void step(ParameterRegistry& registry);

  const AdamWOptions& options() const { return options_; }
  std::size_t step_count() const { return step_; }
  bool tracks(const std::string& name) const { return moments_.count(name) > 0; }
  std::size_t tracked_count() const { return moments_.size(); }
  const std::vector<double>& first_moment(const std::string& name) const;
  const std::vector<double>& second_moment(const std::string& name) const;

 private:
  struct Moments {
    std::vector<double> m;
    std::vector<double> v;
  };

  AdamWOptions options_;
  std::size_t step_ = 0;
  std::map<std::string, Moments> moments_;
};

// Global L2 norm over gradients of trainable tensors; rescales them in
// place when it exceeds max_norm. Returns the norm before clipping.
double clip_grad_norm(ParameterRegistry& registry, double max_norm);

struct TrainPlan {
  std::size_t epochs = 25;
  std::size_t batch_size = 4;
  std::size_t max_target_len = 64;
  std::uint64_t seed = 0;
  bool shuffle = true;
  AdamWOptions optimizer;
  std::optional<double> max_grad_norm;

  void validate() const;
};

// One tokenized (source, target) pair; target ends with end-of-sequence.
struct TrainPair {
  std::vector<std::size_t> source;
  std::vector<std::size_t> target;
};

struct TrainedSnapshot {
  std::map<std::string, std::vector<double>> weights;
  std::vector<double> epoch_loss;  // mean batch loss per epoch
};

class TrainingError : public std::runtime_error {
 public:
  TrainingError(const std::string& what, std::size_t epoch, std::size_t batch)
      : std::runtime_error(what), epoch_(epoch), batch_(batch) {}
  std::size_t epoch() const { return epoch_; }
  std::size_t batch() const { return batch_; }

 private:
  std::size_t epoch_;
  std::size_t batch_;
};

// Token-mean cross-entropy of a batch under teacher forcing. Targets are
// truncated to max_target_len; padding positions never count.
Tensor batch_loss(const Model& model, const std::vector<TrainPair>& pairs,
                  std::span<const std::size_t> batch, std::size_t max_target_len);

// Fine-tunes whatever is currently trainable in the model's registry.
TrainedSnapshot train_split(Model& model, const std::vector<TrainPair>& data, const TrainPlan& plan);

void write_loss_csv(const std::vector<double>& epoch_loss, const std::filesystem::path& path);

}  // namespace sparsefit
