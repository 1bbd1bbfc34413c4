#include <cmath>
#include <random>

#include <gtest/gtest.h>

#include "sparsefit/autograd.hpp"
#include "sparsefit/errors.hpp"
#include "test_util.hpp"

namespace ag = sparsefit::autograd;
using ag::Tensor;
using sparsefit::testutil::check_gradients;
using sparsefit::testutil::random_tensor;

namespace {

std::vector<double> values(const Tensor& t) { return {t.data().begin(), t.data().end()}; }

// Fixed random weights so sum(w * y) has a non-trivial gradient.
Tensor weighted_sum(const Tensor& y, std::mt19937_64& rng) {
  return ag::sum(ag::multiply(y, random_tensor(y.shape(), rng, false)));
}

}  // namespace

TEST(Matmul, IdentityAndProjector) {
  const Tensor eye = Tensor::from({2, 2}, {1, 0, 0, 1});
  const Tensor m = Tensor::from({2, 2}, {1, 2, 3, 4});
  EXPECT_EQ(values(ag::matmul(eye, m)), (std::vector<double>{1, 2, 3, 4}));
  const Tensor p = Tensor::from({2, 2}, {1, 0, 0, 0});
  const Tensor col = Tensor::from({2, 1}, {5, 7});
  const Tensor out = ag::matmul(p, col);
  EXPECT_EQ(out.shape(), (ag::Shape{2, 1}));
  EXPECT_EQ(values(out), (std::vector<double>{5, 0}));
}

TEST(Matmul, MatchesTripleLoop) {
  std::mt19937_64 rng(11);
  for (int trial = 0; trial < 5; ++trial) {
    const std::size_t m = 3 + trial, k = 3, n = 3 + (trial % 2);
    const Tensor a = random_tensor({m, k}, rng, false), b = random_tensor({k, n}, rng, false);
    const Tensor c = ag::matmul(a, b);
    for (std::size_t i = 0; i < m; ++i) {
      for (std::size_t j = 0; j < n; ++j) {
        double s = 0.0;
        for (std::size_t p = 0; p < k; ++p) s += a.data()[i * k + p] * b.data()[p * n + j];
        EXPECT_NEAR(c.data()[i * n + j], s, 1e-12);
      }
    }
  }
}

TEST(Matmul, ShapeMismatchThrows) {
  EXPECT_THROW(ag::matmul(Tensor::zeros({2, 3}), Tensor::zeros({2, 3})), sparsefit::ShapeError);
}

TEST(Rmsnorm, HandValues) {
  const Tensor ones = Tensor::full({3}, 1.0);
  EXPECT_EQ(values(ag::rmsnorm(Tensor::from({3}, {2, 2, 2}), ones, 0.0)), (std::vector<double>{1, 1, 1}));
  const Tensor y = ag::rmsnorm(Tensor::from({2}, {3, 4}), Tensor::from({2}, {2, 2}), 0.0);
  EXPECT_NEAR(y.data()[0], 2 * 3 / std::sqrt(12.5), 1e-12);
  EXPECT_NEAR(y.data()[1], 2 * 4 / std::sqrt(12.5), 1e-12);
  EXPECT_NEAR(y.data()[0], 1.6971, 1e-4);
  EXPECT_NEAR(y.data()[1], 2.2627, 1e-4);
}

TEST(Rmsnorm, GainLengthMustMatch) {
  EXPECT_THROW(ag::rmsnorm(Tensor::zeros({2, 3}), Tensor::full({2}, 1.0)), sparsefit::ShapeError);
}

TEST(CrossEntropy, HandValues) {
  const std::size_t t0[] = {0};
  EXPECT_NEAR(ag::softmax_cross_entropy(Tensor::from({1, 2}, {0, 0}), t0, 99).item(), std::log(2.0), 1e-12);
  const double expected = -10.0 + std::log(std::exp(10.0) + 1.0);
  const double ce = ag::softmax_cross_entropy(Tensor::from({1, 2}, {10, 0}), t0, 99).item();
  EXPECT_NEAR(ce, expected, 1e-15);
  EXPECT_NEAR(ce, 4.54e-5, 1e-7);
}

TEST(CrossEntropy, IgnoredPositionsDoNotCount) {
  const Tensor two = Tensor::from({2, 3}, {0.3, -1.0, 2.0, 5.0, 1.0, -2.0});
  const Tensor one = Tensor::from({1, 3}, {0.3, -1.0, 2.0});
  const std::size_t masked[] = {2, 7}, single[] = {2};
  EXPECT_DOUBLE_EQ(ag::softmax_cross_entropy(two, masked, 7).item(),
                   ag::softmax_cross_entropy(one, single, 7).item());
  const std::size_t all[] = {7, 7};
  EXPECT_THROW(ag::softmax_cross_entropy(two, all, 7), sparsefit::ContractError);
}

TEST(Backward, SumAndSquare) {
  Tensor x = Tensor::from({2, 3}, {1, 2, 3, 4, 5, 6}, true);
  ag::backward(ag::sum(x));
  EXPECT_EQ(values(Tensor::from({6}, {x.grad().begin(), x.grad().end()})), std::vector<double>(6, 1.0));
  Tensor v = Tensor::from({3}, {1, 2, 3}, true);
  ag::backward(ag::sum(ag::reshape(ag::multiply(v, v), {1, 3})));
  EXPECT_EQ(std::vector<double>(v.grad().begin(), v.grad().end()), (std::vector<double>{2, 4, 6}));
}

TEST(Backward, NonScalarRootThrows) {
  Tensor x = Tensor::zeros({2, 2}, true);
  EXPECT_THROW(ag::backward(ag::relu(x)), sparsefit::ContractError);
}

TEST(Backward, TwiceDoublesGradients) {
  std::mt19937_64 rng(5);
  Tensor a = random_tensor({3, 4}, rng), b = random_tensor({4, 2}, rng);
  const Tensor loss = weighted_sum(ag::softmax(ag::matmul(a, b)), rng);
  ag::backward(loss);
  const std::vector<double> once(a.grad().begin(), a.grad().end());
  ag::backward(loss);
  for (std::size_t i = 0; i < once.size(); ++i) EXPECT_EQ(a.grad()[i], 2.0 * once[i]);
}

TEST(Backward, NoGradGuardRecordsNothing) {
  Tensor x = Tensor::from({1, 2}, {1, 2}, true);
  ag::NoGradGuard guard;
  const Tensor y = ag::sum(ag::relu(x));
  EXPECT_FALSE(y.requires_grad());
}

TEST(Softmax, RowsSumToOne) {
  std::mt19937_64 rng(9);
  const Tensor s = ag::softmax(ag::scale(random_tensor({7, 11}, rng, false), 20.0));
  for (std::size_t r = 0; r < 7; ++r) {
    double total = 0.0;
    for (std::size_t c = 0; c < 11; ++c) total += s.data()[r * 11 + c];
    EXPECT_NEAR(total, 1.0, 1e-12);
  }
}

TEST(NonFinite, RaisesImmediately) {
  EXPECT_THROW(Tensor::from({1}, {std::nan("")}), sparsefit::NonFiniteError);
  const Tensor big = Tensor::from({1, 1}, {1e200});
  EXPECT_THROW(ag::matmul(big, big), sparsefit::NonFiniteError);
}

TEST(Ops, InputsAreNotMutated) {
  std::mt19937_64 rng(3);
  Tensor a = random_tensor({3, 4}, rng), b = random_tensor({4, 3}, rng);
  const auto a0 = values(a), b0 = values(b);
  ag::backward(weighted_sum(ag::rmsnorm(ag::add(ag::matmul(a, b), ag::transpose(ag::matmul(a, b))),
                                        Tensor::full({3}, 1.0)),
                            rng));
  EXPECT_EQ(values(a), a0);
  EXPECT_EQ(values(b), b0);
}

TEST(Ops, ShapeOps) {
  const Tensor x = Tensor::from({2, 3}, {1, 2, 3, 4, 5, 6});
  EXPECT_EQ(values(ag::transpose(x)), (std::vector<double>{1, 4, 2, 5, 3, 6}));
  EXPECT_EQ(values(ag::slice(x, 1, 1, 3)), (std::vector<double>{2, 3, 5, 6}));
  EXPECT_EQ(values(ag::slice(x, 0, 1, 2)), (std::vector<double>{4, 5, 6}));
  const Tensor parts[] = {x, x};
  EXPECT_EQ(ag::concat(parts, 0).shape(), (ag::Shape{4, 3}));
  EXPECT_EQ(values(ag::concat(parts, 1)), (std::vector<double>{1, 2, 3, 1, 2, 3, 4, 5, 6, 4, 5, 6}));
  EXPECT_THROW(ag::reshape(x, {4, 2}), sparsefit::ShapeError);
  const std::size_t idx[] = {1, 0, 1};
  EXPECT_EQ(values(ag::embedding(x, idx)), (std::vector<double>{4, 5, 6, 1, 2, 3, 4, 5, 6}));
  const std::size_t bad[] = {2};
  EXPECT_THROW(ag::embedding(x, bad), sparsefit::ShapeError);
}

// Central finite differences for every primitive, rel tol 1e-4.
class GradientCheck : public ::testing::Test {
 protected:
  std::mt19937_64 rng{20240611};
  void expect_ok(const std::function<Tensor()>& f, const std::vector<Tensor>& leaves) {
    const auto r = check_gradients(f, leaves, rng);
    EXPECT_GE(r.probes, 20u);
    EXPECT_LT(r.worst, 1e-4);
  }
};

TEST_F(GradientCheck, Matmul) {
  Tensor a = random_tensor({4, 5}, rng), b = random_tensor({5, 3}, rng);
  const Tensor w = random_tensor({4, 3}, rng, false);
  expect_ok([&] { return ag::sum(ag::multiply(ag::matmul(a, b), w)); }, {a, b});
}

TEST_F(GradientCheck, AddAndMultiply) {
  Tensor a = random_tensor({4, 5}, rng), b = random_tensor({4, 5}, rng), s = random_tensor({1}, rng);
  const Tensor w = random_tensor({4, 5}, rng, false);
  expect_ok([&] { return ag::sum(ag::multiply(ag::multiply(ag::add(a, s), b), w)); }, {a, b, s});
  expect_ok([&] { return ag::sum(ag::multiply(ag::add(ag::multiply(a, s), b), w)); }, {a, b, s});
}

TEST_F(GradientCheck, Relu) {
  std::vector<double> v = sparsefit::testutil::uniform(30, rng);
  for (auto& x : v) x += x >= 0 ? 0.1 : -0.1;  // stay away from the kink
  Tensor x = Tensor::from({5, 6}, v, true);
  const Tensor w = random_tensor({5, 6}, rng, false);
  expect_ok([&] { return ag::sum(ag::multiply(ag::relu(x), w)); }, {x});
}

TEST_F(GradientCheck, Embedding) {
  Tensor table = random_tensor({6, 4}, rng);
  const std::size_t idx[] = {1, 3, 1, 5, 0, 3};
  const Tensor w = random_tensor({6, 4}, rng, false);
  expect_ok([&] { return ag::sum(ag::multiply(ag::embedding(table, idx), w)); }, {table});
}

TEST_F(GradientCheck, Rmsnorm) {
  Tensor x = random_tensor({3, 8}, rng), g = random_tensor({8}, rng);
  const Tensor w = random_tensor({3, 8}, rng, false);
  expect_ok([&] { return ag::sum(ag::multiply(ag::rmsnorm(x, g, 1e-6), w)); }, {x, g});
  expect_ok([&] { return ag::sum(ag::rmsnorm(x, g)); }, {x});
}

TEST_F(GradientCheck, Softmax) {
  Tensor x = random_tensor({4, 6}, rng);
  const Tensor w = random_tensor({4, 6}, rng, false);
  expect_ok([&] { return ag::sum(ag::multiply(ag::softmax(x), w)); }, {x});
}

TEST_F(GradientCheck, CrossEntropy) {
  Tensor logits = random_tensor({6, 5}, rng);
  const std::size_t targets[] = {0, 4, 9, 2, 2, 1};
  expect_ok([&] { return ag::softmax_cross_entropy(logits, targets, 9); }, {logits});
}

TEST_F(GradientCheck, ReshapeTransposeConcatSlice) {
  Tensor a = random_tensor({3, 4}, rng), b = random_tensor({3, 4}, rng);
  const Tensor w0 = random_tensor({6, 3}, rng, false), w1 = random_tensor({4, 3}, rng, false);
  expect_ok(
      [&] {
        const Tensor rows[] = {a, b};
        const Tensor r = ag::transpose(ag::reshape(ag::concat(rows, 0), {4, 6}));  // [6 x 4]
        return ag::sum(ag::multiply(ag::slice(r, 1, 1, 4), w0));
      },
      {a, b});
  expect_ok(
      [&] {
        const Tensor cols[] = {a, b};
        const Tensor c = ag::concat(cols, 1);  // [3 x 8]
        return ag::sum(ag::multiply(ag::transpose(ag::slice(c, 1, 2, 5)), ag::slice(w1, 0, 0, 3)));
      },
      {a, b});
}

TEST_F(GradientCheck, FanOutAccumulates) {
  Tensor x = random_tensor({5, 5}, rng);
  expect_ok([&] { return ag::sum(ag::matmul(ag::softmax(x), ag::add(x, ag::transpose(x)))); }, {x});
}
