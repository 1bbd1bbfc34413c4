#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <numeric>
#include <random>
#include <vector>

#include "sparsefit/autograd.hpp"

namespace sparsefit::testutil {

using autograd::Tensor;

inline std::vector<double> uniform(std::size_t n, std::mt19937_64& rng, double lo = -2.0, double hi = 2.0) {
  std::uniform_real_distribution<double> d(lo, hi);
  std::vector<double> v(n);
  for (auto& x : v) x = d(rng);
  return v;
}

inline Tensor random_tensor(autograd::Shape shape, std::mt19937_64& rng, bool requires_grad = true) {
  const std::size_t n = autograd::numel(shape);
  return Tensor::from(std::move(shape), uniform(n, rng), requires_grad);
}

struct FdReport {
  std::size_t probes = 0;
  double worst = 0.0;  // worst relative error
};

// Central differences against the analytic gradient from backward(). The
// callable must rebuild the graph from the leaves' current values. Probes
// every element when a leaf has at most `max_per_leaf` entries, otherwise
// a random sample of that size.
inline FdReport check_gradients(const std::function<Tensor()>& f, const std::vector<Tensor>& leaves,
                                std::mt19937_64& rng, std::size_t max_per_leaf = 64,
                                double h = 1e-5, double floor = 1e-3) {
  for (auto leaf : leaves) leaf.clear_grad();
  autograd::backward(f());
  std::vector<std::vector<double>> analytic;
  for (const auto& leaf : leaves) {
    if (leaf.has_grad()) {
      analytic.emplace_back(leaf.grad().begin(), leaf.grad().end());
    } else {
      analytic.emplace_back(leaf.numel(), 0.0);
    }
  }
  FdReport report;
  for (std::size_t l = 0; l < leaves.size(); ++l) {
    Tensor leaf = leaves[l];
    std::vector<std::size_t> idx(leaf.numel());
    std::iota(idx.begin(), idx.end(), 0);
    if (idx.size() > max_per_leaf) {
      std::shuffle(idx.begin(), idx.end(), rng);
      idx.resize(max_per_leaf);
    }
    for (std::size_t i : idx) {
      auto data = leaf.mutable_data();
      const double saved = data[i];
      data[i] = saved + h;
      const double up = f().item();
      data[i] = saved - h;
      const double down = f().item();
      data[i] = saved;
      const double numeric = (up - down) / (2.0 * h);
      const double a = analytic[l][i];
      const double rel = std::fabs(a - numeric) / std::max({std::fabs(a), std::fabs(numeric), floor});
      report.worst = std::max(report.worst, rel);
      ++report.probes;
    }
  }
  for (auto leaf : leaves) leaf.clear_grad();
  return report;
}

}  // namespace sparsefit::testutil
