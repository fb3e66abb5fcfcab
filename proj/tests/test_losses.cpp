#include <algorithm>
#include <cmath>
#include <random>

#include <gtest/gtest.h>

#include "kdreid/losses.hpp"

using namespace kdreid;

namespace {

Tensor random_tensor(std::size_t r, std::size_t c, std::mt19937_64& rng, double sd = 1.0) {
  std::normal_distribution<double> n(0.0, sd);
  Tensor t(r, c);
  for (double& v : t.values()) v = n(rng);
  return t;
}

double triplet_value(const Tensor& f, const std::vector<int>& ids, double margin = 0.3) {
  Tape t;
  return batch_hard_triplet(t.constant(f), ids, margin).scalar();
}

// All-anchors brute force, Euclidean distances computed directly.
double triplet_oracle(const Tensor& f, const std::vector<int>& ids, double margin) {
  const std::size_t n = f.rows();
  double total = 0.0;
  for (std::size_t a = 0; a < n; ++a) {
    double dp = 0.0, dn = INFINITY;
    for (std::size_t j = 0; j < n; ++j) {
      if (j == a) continue;
      double s = 0.0;
      for (std::size_t k = 0; k < f.cols(); ++k) s += (f(a, k) - f(j, k)) * (f(a, k) - f(j, k));
      const double d = std::sqrt(s);
      if (ids[j] == ids[a]) dp = std::max(dp, d);
      else dn = std::min(dn, d);
    }
    total += std::max(0.0, margin + dp - dn);
  }
  return total / static_cast<double>(n);
}

double kernel(std::span<const double> x, std::span<const double> y, double b) {
  double s = 0.0;
  for (std::size_t k = 0; k < x.size(); ++k) s += (x[k] - y[k]) * (x[k] - y[k]);
  return std::exp(-s / b);
}

double mmd_value(const Tensor& s, const Tensor& t, std::vector<double> bw) {
  Tape tape;
  return mmd_loss(tape.constant(s), tape.constant(t), bw).scalar();
}

}  // namespace

TEST(CrossEntropy, HandExamples) {
  Tape t;
  const std::vector<int> y0{0};
  EXPECT_NEAR(cross_entropy_loss(t.constant(Tensor{{0.3, 0.3, 0.3, 0.3}}), y0).scalar(), std::log(4.0), 1e-12);
  EXPECT_NEAR(cross_entropy_loss(t.constant(Tensor{{20, 0, 0}}), y0).scalar(), 0.0, 1e-8);
  const std::vector<int> y1{1};
  EXPECT_NEAR(cross_entropy_loss(t.constant(Tensor{{1, 2}}), y1).scalar(), std::log(1.0 + std::exp(1.0)) - 1.0, 1e-12);
  EXPECT_NEAR(cross_entropy_loss(t.constant(Tensor{{1, 2}}), y0).scalar(), std::log(1.0 + std::exp(1.0)), 1e-12);
}

TEST(CrossEntropy, StableForLargeLogits) {
  Tape t;
  const std::vector<int> y{1};
  EXPECT_NEAR(cross_entropy_loss(t.constant(Tensor{{1000, 1001}}), y).scalar(), std::log(1.0 + std::exp(-1.0)), 1e-12);
}

TEST(CrossEntropy, RejectsBadLabels) {
  Tape t;
  const std::vector<int> bad{2}, neg{-1}, two{0, 1};
  EXPECT_THROW(cross_entropy_loss(t.constant(Tensor{{1, 2}}), bad), LabelError);
  EXPECT_THROW(cross_entropy_loss(t.constant(Tensor{{1, 2}}), neg), LabelError);
  EXPECT_THROW(cross_entropy_loss(t.constant(Tensor{{1, 2}}), two), Error);
}

TEST(Triplet, SeparatedClustersGiveZero) {
  EXPECT_EQ(triplet_value(Tensor{{0, 0}, {0, 0}, {5, 5}, {5, 5}}, {0, 0, 1, 1}), 0.0);
  EXPECT_EQ(triplet_value(Tensor{{0}, {0}, {1}, {1}}, {0, 0, 1, 1}, 0.3), 0.0);
}

TEST(Triplet, ThreePointHandCase) {
  // a: dp 0.5 dn 0.6 -> 0.2; second a: dp 0.5 dn 0.1 -> 0.7; b: no positive, dn 0.1 -> 0.2
  EXPECT_NEAR(triplet_value(Tensor{{0}, {0.5}, {0.6}}, {0, 0, 1}, 0.3), (0.2 + 0.7 + 0.2) / 3.0, 1e-12);
}

TEST(Triplet, MatchesBruteForce) {
  std::mt19937_64 rng(7);
  std::uniform_int_distribution<int> nid(2, 4), nn(2, 16);
  for (int trial = 0; trial < 200; ++trial) {
    const std::size_t n = nn(rng);
    const int k = std::min<int>(nid(rng), static_cast<int>(n));
    std::vector<int> ids(n);
    for (std::size_t i = 0; i < n; ++i) ids[i] = static_cast<int>(i % k);
    std::shuffle(ids.begin(), ids.end(), rng);
    if (std::all_of(ids.begin(), ids.end(), [&](int v) { return std::count(ids.begin(), ids.end(), v) == 1; })) continue;
    const Tensor f = random_tensor(n, 3, rng);
    EXPECT_NEAR(triplet_value(f, ids, 0.3), triplet_oracle(f, ids, 0.3), 1e-12);
  }
}

TEST(Triplet, MiningErrors) {
  EXPECT_THROW(triplet_value(Tensor{{0}, {1}}, {3, 3}), MiningError);
  EXPECT_THROW(triplet_value(Tensor{{0}, {1}}, {0, 1}), MiningError);
}

TEST(Mmd, IdenticalSamplesGiveZero) {
  std::mt19937_64 rng(1);
  const Tensor x = random_tensor(6, 3, rng);
  EXPECT_NEAR(mmd_value(x, x, {0.5, 1.0, 2.0}), 0.0, 1e-9);
}

TEST(Mmd, SymmetricInArguments) {
  std::mt19937_64 rng(2);
  for (std::size_t nt : {5u, 7u}) {
    const Tensor s = random_tensor(5, 3, rng), t = random_tensor(nt, 3, rng, 2.0);
    EXPECT_NEAR(mmd_value(s, t, {1.0, 4.0}), mmd_value(t, s, {1.0, 4.0}), 1e-12);
  }
}

TEST(Mmd, TwoByTwoHandExpansion) {
  const Tensor s{{0.0, 1.0}, {0.5, -0.25}}, t{{1.0, 1.0}, {2.0, 0.0}};
  const double b = 1.7;
  const double expected = kernel(s.row(0), s.row(1), b) + kernel(t.row(0), t.row(1), b) -
                          (kernel(s.row(0), t.row(1), b) + kernel(s.row(1), t.row(0), b));
  EXPECT_NEAR(mmd_value(s, t, {b}), expected, 1e-14);
}

TEST(Mmd, UnequalSizesHandExpansion) {
  const Tensor s{{0.0}, {1.0}}, t{{2.0}, {3.0}, {-1.0}};
  const double b = 2.0;
  double ss = 2 * kernel(s.row(0), s.row(1), b) / 2.0;
  double tt = 0.0;
  for (std::size_t i = 0; i < 3; ++i)
    for (std::size_t j = 0; j < 3; ++j)
      if (i != j) tt += kernel(t.row(i), t.row(j), b);
  tt /= 6.0;
  double st = 0.0;
  for (std::size_t i = 0; i < 2; ++i)
    for (std::size_t j = 0; j < 3; ++j) st += kernel(s.row(i), t.row(j), b);
  st = 2.0 * st / 6.0;
  EXPECT_NEAR(mmd_value(s, t, {b}), ss + tt - st, 1e-14);
}

TEST(Mmd, Errors) {
  const Tensor a(3, 2), b(3, 3);
  EXPECT_THROW(mmd_value(a, a, {}), ConfigError);
  EXPECT_THROW(mmd_value(a, a, {1.0, 0.0}), ConfigError);
  EXPECT_THROW(mmd_value(a, b, {1.0}), DimensionError);
  EXPECT_THROW(mmd_value(Tensor(1, 2), a, {1.0}), DimensionError);
}

TEST(Mmd, MedianBandwidths) {
  const Tensor s{{0.0}, {1.0}}, t{{3.0}};
  // squared distances 1, 9, 4 -> median 4
  const auto bw = median_bandwidths(s, t, default_bandwidth_multipliers());
  EXPECT_EQ(bw, (std::vector<double>{2, 4, 8, 16, 32}));
}

TEST(KdLoss, HandExamples) {
  EXPECT_EQ(kd_similarity_loss(Tensor{{1, 2}, {3, 4}}, Tensor{{1, 2}, {3, 4}}), 0.0);
  EXPECT_NEAR(kd_similarity_loss(Tensor{{1, 0}, {0, 1}}, Tensor{{1, 0}, {1, 0}}), std::sqrt(2.0), 1e-15);
  Tensor s(8, 8), t(8, 64);
  for (std::size_t i = 0; i < 8; ++i) {
    s(i, i) = 2.0;
    t(i, 8 * i) = 0.5;
  }
  EXPECT_NEAR(kd_similarity_loss(s, t), 0.0, 1e-12);
  EXPECT_THROW(kd_similarity_loss(Tensor(3, 2), Tensor(4, 2)), BatchError);
}

TEST(KdLoss, DistanceReadingIsEquivalent) {
  std::mt19937_64 rng(4);
  for (int trial = 0; trial < 50; ++trial) {
    const Tensor s = random_tensor(6, 4, rng), t = random_tensor(6, 9, rng);
    Tensor ds = SimilarityMatrix::from_features(s).values, dt = SimilarityMatrix::from_features(t).values;
    for (double& v : ds.values()) v = 1.0 - v;
    for (double& v : dt.values()) v = 1.0 - v;
    EXPECT_NEAR(kd_similarity_loss(s, t), frobenius_norm_diff(ds, dt), 1e-12);
  }
}

TEST(KdLoss, RowRescalingInvariant) {
  std::mt19937_64 rng(6);
  std::uniform_real_distribution<double> pos(0.1, 10.0);
  for (int trial = 0; trial < 50; ++trial) {
    const Tensor s = random_tensor(5, 3, rng), t = random_tensor(5, 7, rng);
    Tensor s2 = s, t2 = t;
    for (std::size_t i = 0; i < 5; ++i) {
      const double a = pos(rng), b = pos(rng);
      for (double& v : s2.row(i)) v *= a;
      for (double& v : t2.row(i)) v *= b;
    }
    EXPECT_NEAR(kd_similarity_loss(s, t), kd_similarity_loss(s2, t), 1e-9);
    EXPECT_NEAR(kd_similarity_loss(s, t), kd_similarity_loss(s, t2), 1e-9);
  }
}

TEST(KdLoss, TapeValueMatchesPlainAndTeacherIsConstant) {
  std::mt19937_64 rng(8);
  Tensor s = random_tensor(4, 3, rng);
  const Tensor t = random_tensor(4, 5, rng);
  Tape tape;
  Var loss = kd_similarity_loss(tape.parameter(s), t);
  EXPECT_NEAR(loss.scalar(), kd_similarity_loss(s, t), 1e-14);
  std::size_t params = 0;
  for (std::size_t i = 0; i < tape.size(); ++i) params += tape.node(i).parameter != nullptr;
  EXPECT_EQ(params, 1u);
}

TEST(SimilarityMatrix, SymmetricUnitDiagonal) {
  std::mt19937_64 rng(9);
  const Tensor a = SimilarityMatrix::from_features(random_tensor(6, 4, rng)).values;
  for (std::size_t i = 0; i < 6; ++i) {
    EXPECT_NEAR(a(i, i), 1.0, 1e-9);
    for (std::size_t j = 0; j < 6; ++j) EXPECT_NEAR(a(i, j), a(j, i), 1e-9);
  }
}

TEST(LossGradients, FiniteDifferences) {
  std::mt19937_64 rng(10);
  std::uniform_int_distribution<std::size_t> dn(4, 8), dd(2, 6);
  for (int trial = 0; trial < 20; ++trial) {
    const std::size_t n = dn(rng), d = dd(rng);
    Tensor x = random_tensor(n, d, rng);
    std::vector<int> ids(n);
    for (std::size_t i = 0; i < n; ++i) ids[i] = static_cast<int>(i % 2);
    Tensor* p[] = {&x};
    EXPECT_LT(finite_difference_check([&](Tape& t) { return cross_entropy_loss(t.parameter(x), ids); }, p, 1e-5),
              1e-5);
    EXPECT_LT(finite_difference_check([&](Tape& t) { return batch_hard_triplet(t.parameter(x), ids, 0.3); }, p, 1e-5),
              1e-5);
    const Tensor other = random_tensor(n, d, rng, 1.5);
    const std::vector<double> bw{0.5, 2.0, 8.0};
    EXPECT_LT(finite_difference_check([&](Tape& t) { return mmd_loss(t.parameter(x), t.constant(other), bw); }, p, 1e-5),
              1e-5);
    const Tensor teacher = random_tensor(n, d + 3, rng);
    EXPECT_LT(finite_difference_check([&](Tape& t) { return kd_similarity_loss(t.parameter(x), teacher); }, p, 1e-5),
              1e-5);
  }
}
