#pragma once

#include <algorithm>
#include <cstddef>
#include <map>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "kdreid/errors.hpp"
#include "kdreid/synth.hpp"
#include "kdreid/tensor.hpp"

namespace kdreid {

/// P groups of K consecutive samples; each group shares one identity.
///
/// Batches drawn from an unlabeled dataset group by tracklet instead of by
/// identity and keep their identities hidden like the dataset does.
class Batch {
 public:
  Batch(Tensor inputs, std::vector<int> identities, std::vector<int> cameras, std::string domain_id, std::size_t p,
        std::size_t k, bool labeled)
      : inputs_(std::move(inputs)),
        identities_(std::move(identities)),
        cameras_(std::move(cameras)),
        domain_id_(std::move(domain_id)),
        p_(p),
        k_(k),
        labeled_(labeled) {}

  const Tensor& inputs() const { return inputs_; }
  const std::vector<int>& identities() const { return guarded_labels(identities_, labeled_, domain_id_); }
  const std::vector<int>& cameras() const { return cameras_; }
  const std::string& domain_id() const { return domain_id_; }
  std::size_t size() const { return inputs_.rows(); }
  std::size_t groups() const { return p_; }
  std::size_t group_size() const { return k_; }
  bool labeled() const { return labeled_; }

 private:
  Tensor inputs_;
  std::vector<int> identities_;
  std::vector<int> cameras_;
  std::string domain_id_;
  std::size_t p_, k_;
  bool labeled_;
};

inline constexpr std::size_t kPairedGroups = 8;  // 8 x 4 = 32 per side
inline constexpr std::size_t kTargetGroups = 16;  // 16 x 4 = 64

namespace detail {

// Draw units for PK sampling: identities when labels are readable, tracklet
// groups otherwise.
struct SamplingUnits {
  std::vector<std::vector<std::vector<std::size_t>>> units;  // unit -> groups -> member indices
};

inline SamplingUnits sampling_units(const DomainDataset& ds) {
  SamplingUnits out;
  if (ds.labeled()) {
    for (auto& ig : groups_by_identity(ds, ds.identities())) out.units.push_back(std::move(ig.groups));
  } else {
    for (auto& g : ds.group_members()) out.units.push_back({std::move(g)});
  }
  return out;
}

inline std::vector<std::size_t> draw_from_unit(const std::vector<std::vector<std::size_t>>& groups, std::size_t k,
                                               std::mt19937_64& rng) {
  if (k == kTrackletSize) {
    std::uniform_int_distribution<std::size_t> pick(0, groups.size() - 1);
    return groups[pick(rng)];
  }
  std::vector<std::size_t> pool;
  for (const auto& g : groups) pool.insert(pool.end(), g.begin(), g.end());
  std::shuffle(pool.begin(), pool.end(), rng);
  pool.resize(k);
  std::sort(pool.begin(), pool.end());
  return pool;
}

inline Batch assemble(const DomainDataset& ds, const std::vector<std::size_t>& rows, std::size_t p, std::size_t k) {
  std::vector<int> ids, cams;
  const auto& hidden = ds.labeled() ? ds.identities() : std::vector<int>{};
  for (std::size_t r : rows) {
    cams.push_back(ds.cameras()[r]);
    ids.push_back(ds.labeled() ? hidden[r] : -1);
  }
  return Batch(select_rows(ds.inputs(), rows), std::move(ids), std::move(cams), ds.domain_id(), p, k, ds.labeled());
}

inline void check_pk(const DomainDataset& ds, const SamplingUnits& su, std::size_t p, std::size_t k) {
  if (p < 2) throw SamplingError("pk_sample: P=" + std::to_string(p) + " but triplet mining needs at least 2 groups");
  if (k < 1) throw SamplingError("pk_sample: K must be positive");
  std::size_t eligible = 0;
  for (const auto& u : su.units) {
    std::size_t n = 0;
    for (const auto& g : u) n += g.size();
    if (n >= k) ++eligible;
  }
  if (eligible < p) {
    throw SamplingError("pk_sample: '" + ds.domain_id() + "' has " + std::to_string(eligible) + " " +
                        (ds.labeled() ? "identities" : "tracklets") + " with >= " + std::to_string(k) +
                        " samples, need P=" + std::to_string(p));
  }
}

}  // namespace detail

/// One PK batch: P distinct units (identities, or tracklets for unlabeled
/// data) drawn without replacement, K samples each. With K = 4 a unit
/// contributes one whole tracklet group.
inline Batch pk_sample(const DomainDataset& dataset, std::size_t p, std::size_t k, std::mt19937_64& rng) {
  const auto su = detail::sampling_units(dataset);
  detail::check_pk(dataset, su, p, k);
  std::vector<std::size_t> order;
  for (std::size_t u = 0; u < su.units.size(); ++u) {
    std::size_t n = 0;
    for (const auto& g : su.units[u]) n += g.size();
    if (n >= k) order.push_back(u);
  }
  std::shuffle(order.begin(), order.end(), rng);
  std::vector<std::size_t> rows;
  for (std::size_t i = 0; i < p; ++i) {
    const auto part = detail::draw_from_unit(su.units[order[i]], k, rng);
    rows.insert(rows.end(), part.begin(), part.end());
  }
  return detail::assemble(dataset, rows, p, k);
}

/// Source and target 32-sample batches drawn from one stream, source first.
inline std::pair<Batch, Batch> paired_batch(const DomainDataset& source, const DomainDataset& target,
                                            std::mt19937_64& rng) {
  Batch s = pk_sample(source, kPairedGroups, kTrackletSize, rng);
  Batch t = pk_sample(target, kPairedGroups, kTrackletSize, rng);
  return {std::move(s), std::move(t)};
}

/// Cycling PK sampler: units are drawn without replacement from a shuffled
/// list that is reshuffled once exhausted. An epoch is batches_per_epoch()
/// draws, i.e. one pass worth of samples.
class PkSampler {
 public:
  PkSampler(const DomainDataset& dataset, std::size_t p, std::size_t k)
      : dataset_(&dataset), units_(detail::sampling_units(dataset)), p_(p), k_(k) {
    detail::check_pk(dataset, units_, p, k);
    for (std::size_t u = 0; u < units_.units.size(); ++u) {
      std::size_t n = 0;
      for (const auto& g : units_.units[u]) n += g.size();
      if (n >= k) {
        eligible_.push_back(u);
        eligible_samples_ += n;
      }
    }
  }

  /// Batches needed to cover the eligible samples once.
  std::size_t batches_per_epoch() const { return std::max<std::size_t>(1, eligible_samples_ / (p_ * k_)); }

  Batch next(std::mt19937_64& rng) {
    if (cursor_ + p_ > order_.size()) {
      order_ = eligible_;
      std::shuffle(order_.begin(), order_.end(), rng);
      cursor_ = 0;
    }
    std::vector<std::size_t> rows;
    for (std::size_t i = 0; i < p_; ++i) {
      const auto part = detail::draw_from_unit(units_.units[order_[cursor_++]], k_, rng);
      rows.insert(rows.end(), part.begin(), part.end());
    }
    return detail::assemble(*dataset_, rows, p_, k_);
  }

 private:
  const DomainDataset* dataset_;
  detail::SamplingUnits units_;
  std::vector<std::size_t> eligible_;
  std::vector<std::size_t> order_;
  std::size_t eligible_samples_ = 0;
  std::size_t cursor_ = 0;
  std::size_t p_, k_;
};

}  // namespace kdreid
