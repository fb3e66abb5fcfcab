#pragma once

#include <algorithm>
#include <cstddef>
#include <cstdint>
#include <numeric>
#include <string>
#include <vector>

#include "kdreid/errors.hpp"
#include "kdreid/losses.hpp"
#include "kdreid/model.hpp"
#include "kdreid/synth.hpp"
#include "kdreid/tensor.hpp"

namespace kdreid {

/// Retrieval quality. cmc[r] is the fraction of queries whose first correct
/// match sits within the top r + 1 gallery entries.
struct Metrics {
  double mAP = 0.0;
  std::vector<double> cmc;
  std::size_t num_queries = 0;

  /// CMC at 1-based rank k (clamped to the last entry).
  double rank(std::size_t k) const {
    if (cmc.empty() || k == 0) return 0.0;
    return cmc[std::min(k, cmc.size()) - 1];
  }
  double rank1() const { return rank(1); }
};

enum class Protocol { CrossCamera, All };

struct LabeledFeatures {
  Tensor feats;
  std::vector<int> identities;
  std::vector<int> cameras;
};

/// L2-normalized embeddings of every sample; nothing is recorded for
/// gradients and no labels are read.
inline FeatureBatch extract_features(const BackboneModel& model, const DomainDataset& dataset) {
  if (dataset.input_dim() != model.input_dim()) {
    throw DimensionError("extract_features: dataset '" + dataset.domain_id() + "' has " +
                         std::to_string(dataset.input_dim()) + " features, model expects " +
                         std::to_string(model.input_dim()));
  }
  return {l2_normalize_rows(model.embed(dataset.inputs()), kNormEpsilon), {}, dataset.domain_id()};
}

/// Cosine affinities between query rows and gallery rows.
inline Tensor cosine_affinity(const Tensor& query, const Tensor& gallery) {
  if (query.cols() != gallery.cols()) {
    throw DimensionError("cosine_affinity: " + query.shape() + " vs " + gallery.shape());
  }
  const Tensor q = l2_normalize_rows(query, kNormEpsilon);
  const Tensor g = l2_normalize_rows(gallery, kNormEpsilon);
  Tensor out(q.rows(), g.rows());
  for (std::size_t i = 0; i < q.rows(); ++i)
    for (std::size_t j = 0; j < g.rows(); ++j) out(i, j) = dot(q.row(i), g.row(j));
  return out;
}

/// mAP and CMC. Gallery entries are ranked by descending cosine affinity,
/// ties by original gallery index. Under CrossCamera, entries with the
/// query's identity and camera are dropped from that query's ranking.
inline Metrics cmc_map(const LabeledFeatures& query, const LabeledFeatures& gallery,
                       Protocol protocol = Protocol::CrossCamera) {
  const std::size_t nq = query.feats.rows(), ng = gallery.feats.rows();
  if (query.identities.size() != nq || query.cameras.size() != nq || gallery.identities.size() != ng ||
      gallery.cameras.size() != ng) {
    throw DimensionError("cmc_map: label columns do not match feature rows");
  }
  const Tensor aff = cosine_affinity(query.feats, gallery.feats);
  Metrics m;
  m.num_queries = nq;
  m.cmc.assign(ng, 0.0);
  double ap_sum = 0.0;
  std::vector<std::size_t> order(ng);
  for (std::size_t q = 0; q < nq; ++q) {
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return aff(q, a) > aff(q, b); });
    std::size_t pos = 0, hits = 0, first_hit = ng;
    double precision_sum = 0.0;
    for (std::size_t g : order) {
      const bool same_id = gallery.identities[g] == query.identities[q];
      if (protocol == Protocol::CrossCamera && same_id && gallery.cameras[g] == query.cameras[q]) continue;
      ++pos;
      if (same_id) {
        ++hits;
        if (first_hit == ng) first_hit = pos - 1;
        precision_sum += static_cast<double>(hits) / static_cast<double>(pos);
      }
    }
    if (hits == 0) {
      throw ProtocolError("cmc_map: query " + std::to_string(q) + " (identity " + std::to_string(query.identities[q]) +
                          ") has no valid gallery match");
    }
    ap_sum += precision_sum / static_cast<double>(hits);
    for (std::size_t r = first_hit; r < ng; ++r) m.cmc[r] += 1.0;
  }
  for (double& c : m.cmc) c /= static_cast<double>(nq);
  m.mAP = ap_sum / static_cast<double>(nq);
  return m;
}

/// Embeds both sides with `model` and scores them; labels are read inside
/// an EvaluationScope.
inline Metrics evaluate(const BackboneModel& model, const QueryGallerySplit& split,
                        Protocol protocol = Protocol::CrossCamera) {
  EvaluationScope scope;
  LabeledFeatures q{extract_features(model, split.query).feats, split.query.identities(), split.query.cameras()};
  LabeledFeatures g{extract_features(model, split.gallery).feats, split.gallery.identities(), split.gallery.cameras()};
  return cmc_map(q, g, protocol);
}

struct ComplexityReport {
  std::uint64_t num_parameters = 0;
  std::uint64_t flops_per_sample = 0;

  bool operator==(const ComplexityReport&) const = default;
};

/// Counts for the deployed feature extractor (the pre-training classifier is
/// not part of it). FLOPs: 2 x fan_in x fan_out per affine layer plus one
/// per activation output.
inline ComplexityReport complexity_report(const BackboneModel& model) {
  ComplexityReport r;
  auto add = [&](const DenseLayer& l) {
    r.num_parameters += l.weight.size() + l.bias.size();
    r.flops_per_sample += 2ULL * l.fan_in() * l.fan_out();
    if (l.relu) r.flops_per_sample += l.fan_out();
  };
  for (const auto& l : model.hidden_layers()) add(l);
  add(model.embedding_head());
  return r;
}

}  // namespace kdreid
