#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <set>
#include <span>
#include <string>
#include <vector>

#include "kdreid/errors.hpp"
#include "kdreid/tape.hpp"
#include "kdreid/tensor.hpp"

namespace kdreid {

/// Embedded batch handed to the losses and the evaluator.
struct FeatureBatch {
  Tensor feats;  // N x D, one row per sample
  std::vector<int> identities;  // empty when unknown
  std::string domain_id;
};

/// N x N pairwise cosine affinities of a batch.
struct SimilarityMatrix {
  Tensor values;

  static SimilarityMatrix from_features(const Tensor& feats) {
    return {gram_matrix(l2_normalize_rows(feats))};
  }
};

inline constexpr double kDefaultTripletMargin = 0.3;
inline constexpr double kNormEpsilon = 1e-12;

/// Mean softmax cross-entropy, stabilized by subtracting the row max.
inline Var cross_entropy_loss(Var logits, std::span<const int> labels) {
  const Tensor& z = logits.value();
  const std::size_t n = z.rows(), c = z.cols();
  if (labels.size() != n) {
    throw LabelError("cross_entropy_loss: " + std::to_string(labels.size()) + " labels for " +
                     std::to_string(n) + " rows");
  }
  for (std::size_t i = 0; i < n; ++i) {
    if (labels[i] < 0 || static_cast<std::size_t>(labels[i]) >= c) {
      throw LabelError("cross_entropy_loss: label " + std::to_string(labels[i]) + " at row " +
                       std::to_string(i) + " outside [0, " + std::to_string(c) + ")");
    }
  }
  Tensor probs(n, c);
  double total = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    auto r = z.row(i);
    const double mx = *std::max_element(r.begin(), r.end());
    double denom = 0.0;
    for (std::size_t j = 0; j < c; ++j) denom += std::exp(r[j] - mx);
    for (std::size_t j = 0; j < c; ++j) probs(i, j) = std::exp(r[j] - mx) / denom;
    total += std::log(denom) - (r[labels[i]] - mx);
  }
  std::vector<int> y(labels.begin(), labels.end());
  return logits.tape->record(
      "cross_entropy_loss", Tensor(1, 1, total / static_cast<double>(n)), {logits},
      [probs = std::move(probs), y = std::move(y)](Tape& t, std::size_t self) {
        const double g = t.grad_of(self)[0] / static_cast<double>(probs.rows());
        auto gz = t.grad_of(t.parent(self, 0));
        const std::size_t c = probs.cols();
        for (std::size_t i = 0; i < probs.rows(); ++i)
          for (std::size_t j = 0; j < c; ++j)
            gz[i * c + j] += g * (probs(i, j) - (static_cast<int>(j) == y[i] ? 1.0 : 0.0));
      });
}

/// Batch-hard triplet loss on raw (unnormalized) features with Euclidean
/// distances. An anchor without a positive uses d_pos = 0.
inline Var batch_hard_triplet(Var feats, std::span<const int> identities, double margin = kDefaultTripletMargin) {
  const Tensor& f = feats.value();
  const std::size_t n = f.rows(), d = f.cols();
  if (identities.size() != n) throw LabelError("batch_hard_triplet: label count does not match batch");
  std::set<int> distinct(identities.begin(), identities.end());
  if (distinct.size() < 2) throw MiningError("batch_hard_triplet: batch needs at least 2 identities");
  if (distinct.size() == n) throw MiningError("batch_hard_triplet: no identity has 2 samples in the batch");

  Tensor dist(n, n);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = i + 1; j < n; ++j) {
      double s = 0.0;
      for (std::size_t c = 0; c < d; ++c) {
        const double diff = f(i, c) - f(j, c);
        s += diff * diff;
      }
      dist(i, j) = dist(j, i) = std::sqrt(s);
    }

  struct Active {
    std::size_t anchor, pos, neg;
    bool has_pos;
  };
  std::vector<Active> active;
  double total = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    double dp = 0.0, dn = std::numeric_limits<double>::infinity();
    std::size_t p = i, q = i;
    bool has_pos = false;
    for (std::size_t j = 0; j < n; ++j) {
      if (j == i) continue;
      if (identities[j] == identities[i]) {
        if (!has_pos || dist(i, j) > dp) {
          dp = dist(i, j);
          p = j;
          has_pos = true;
        }
      } else if (dist(i, j) < dn) {
        dn = dist(i, j);
        q = j;
      }
    }
    const double l = margin + dp - dn;
    if (l > 0.0) {
      total += l;
      active.push_back({i, p, q, has_pos});
    }
  }
  return feats.tape->record(
      "batch_hard_triplet", Tensor(1, 1, total / static_cast<double>(n)), {feats},
      [active = std::move(active), dist = std::move(dist)](Tape& t, std::size_t self) {
        const std::size_t fi = t.parent(self, 0);
        const Tensor& f = t.value(fi);
        const std::size_t d = f.cols();
        const double g = t.grad_of(self)[0] / static_cast<double>(f.rows());
        auto gf = t.grad_of(fi);
        // d|a-b|/da = (a-b)/|a-b|, subgradient 0 at coincident points
        auto push = [&](std::size_t a, std::size_t b, double sign) {
          const double ab = dist(a, b);
          if (ab == 0.0) return;
          for (std::size_t c = 0; c < d; ++c) {
            const double v = sign * g * (f(a, c) - f(b, c)) / ab;
            gf[a * d + c] += v;
            gf[b * d + c] -= v;
          }
        };
        for (const Active& a : active) {
          if (a.has_pos) push(a.anchor, a.pos, 1.0);
          push(a.anchor, a.neg, -1.0);
        }
      });
}

/// Median heuristic: multipliers x median off-diagonal squared distance of
/// the joined batch (1.0 when the median is zero).
inline std::vector<double> median_bandwidths(const Tensor& source, const Tensor& target,
                                             std::span<const double> multipliers) {
  const Tensor parts[] = {source, target};
  const Tensor joined = vstack(parts);
  const Tensor d2 = pairwise_sq_distances(joined, joined);
  std::vector<double> off;
  for (std::size_t i = 0; i < d2.rows(); ++i)
    for (std::size_t j = i + 1; j < d2.cols(); ++j) off.push_back(d2(i, j));
  double median = 1.0;
  if (!off.empty()) {
    std::nth_element(off.begin(), off.begin() + off.size() / 2, off.end());
    median = off[off.size() / 2];
  }
  if (!(median > 0.0)) median = 1.0;
  std::vector<double> out;
  for (double m : multipliers) out.push_back(m * median);
  return out;
}

inline const std::vector<double>& default_bandwidth_multipliers() {
  static const std::vector<double> m{0.5, 1.0, 2.0, 4.0, 8.0};
  return m;
}

/// Unbiased multi-kernel squared MMD with k(x, y) = sum_b exp(-|x - y|^2 / b).
///
/// Within-domain sums skip the diagonal. For equal batch sizes the cross term
/// also skips i == j, which is the paired U-statistic; it is exactly zero when
/// both arguments hold the same samples.
inline Var mmd_loss(Var source, Var target, std::span<const double> bandwidths) {
  if (bandwidths.empty()) throw ConfigError("mmd_loss: empty bandwidth list");
  for (double b : bandwidths)
    if (!(b > 0.0)) throw ConfigError("mmd_loss: bandwidths must be positive");
  const std::size_t ns = source.value().rows(), nt = target.value().rows();
  if (source.value().cols() != target.value().cols()) {
    throw DimensionError("mmd_loss: feature dimension mismatch " + source.value().shape() + " vs " +
                         target.value().shape());
  }
  if (ns < 2 || nt < 2) throw DimensionError("mmd_loss: both batches need at least 2 samples");

  auto off_diagonal = [](std::size_t r, std::size_t c, double w) {
    Tensor m(r, c, w);
    for (std::size_t i = 0; i < std::min(r, c); ++i) m(i, i) = 0.0;
    return m;
  };
  const double ds = static_cast<double>(ns), dt = static_cast<double>(nt);
  const Tensor w_ss = off_diagonal(ns, ns, 1.0 / (ds * (ds - 1.0)));
  const Tensor w_tt = off_diagonal(nt, nt, 1.0 / (dt * (dt - 1.0)));
  const Tensor w_st = ns == nt ? off_diagonal(ns, nt, -2.0 / (ds * (ds - 1.0))) : Tensor(ns, nt, -2.0 / (ds * dt));

  const Var d_ss = pairwise_sq_distances(source, source);
  const Var d_tt = pairwise_sq_distances(target, target);
  const Var d_st = pairwise_sq_distances(source, target);
  Var total{};
  bool first = true;
  for (double b : bandwidths) {
    Var term = add(add(weighted_sum(exp(scale(d_ss, -1.0 / b)), w_ss), weighted_sum(exp(scale(d_tt, -1.0 / b)), w_tt)),
                   weighted_sum(exp(scale(d_st, -1.0 / b)), w_st));
    total = first ? term : add(total, term);
    first = false;
  }
  return total;
}

/// Frobenius distance between the student's and the teacher's cosine
/// self-similarity matrices over the same batch. The teacher side is a
/// constant: no gradient reaches the model that produced it. Feature
/// dimensions of the two sides may differ.
inline Var kd_similarity_loss(Var student_feats, const Tensor& teacher_feats) {
  if (student_feats.value().rows() != teacher_feats.rows()) {
    throw BatchError("kd_similarity_loss: student batch has " + std::to_string(student_feats.value().rows()) +
                     " rows, teacher batch " + std::to_string(teacher_feats.rows()));
  }
  Tape& t = *student_feats.tape;
  const Var a_stu = gram_matrix(l2_normalize_rows(student_feats, kNormEpsilon));
  const Var a_tea = t.constant(SimilarityMatrix::from_features(teacher_feats).values);
  return frobenius_norm_diff(a_stu, a_tea);
}

inline double kd_similarity_loss(const Tensor& student_feats, const Tensor& teacher_feats) {
  if (student_feats.rows() != teacher_feats.rows()) {
    throw BatchError("kd_similarity_loss: batch size mismatch " + student_feats.shape() + " vs " +
                     teacher_feats.shape());
  }
  return frobenius_norm_diff(SimilarityMatrix::from_features(student_feats).values,
                             SimilarityMatrix::from_features(teacher_feats).values);
}

}  // namespace kdreid
