#pragma once

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <istream>
#include <map>
#include <ostream>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "kdreid/errors.hpp"
#include "kdreid/tensor.hpp"

namespace kdreid {

inline constexpr std::size_t kTrackletSize = 4;

// ---------------------------------------------------------------------------
// Label access audit.
//
// Identity labels of an unlabeled dataset are kept for evaluation. They can
// only be read while an EvaluationScope is open on the current thread; any
// other read is counted as a violation and throws AccessViolation.

struct LabelAudit {
  std::uint64_t violations = 0;
  std::uint64_t evaluation_reads = 0;
};

namespace detail {
inline std::atomic<std::uint64_t> g_label_violations{0};
inline std::atomic<std::uint64_t> g_label_evaluation_reads{0};
inline thread_local int g_evaluation_depth = 0;
}  // namespace detail

inline LabelAudit label_audit() {
  return {detail::g_label_violations.load(), detail::g_label_evaluation_reads.load()};
}

inline void reset_label_audit() {
  detail::g_label_violations = 0;
  detail::g_label_evaluation_reads = 0;
}

class EvaluationScope {
 public:
  EvaluationScope() { ++detail::g_evaluation_depth; }
  ~EvaluationScope() { --detail::g_evaluation_depth; }
  EvaluationScope(const EvaluationScope&) = delete;
  EvaluationScope& operator=(const EvaluationScope&) = delete;

  static bool active() { return detail::g_evaluation_depth > 0; }
};

/// Returns `labels`, enforcing the hidden-label contract when `labeled` is false.
inline const std::vector<int>& guarded_labels(const std::vector<int>& labels, bool labeled, const std::string& owner) {
  if (labeled) return labels;
  if (!EvaluationScope::active()) {
    ++detail::g_label_violations;
    throw AccessViolation("identity labels of unlabeled '" + owner + "' read outside evaluation");
  }
  ++detail::g_label_evaluation_reads;
  return labels;
}

// ---------------------------------------------------------------------------

struct DomainShift {
  double rotation_angle = 0.0;  // radians
  double scale = 1.0;
  std::vector<double> translation;  // input_dim entries, or empty for zero
  double noise_std = 0.0;
  double camera_offset_std = 0.0;

  bool operator==(const DomainShift&) const = default;
};

struct DomainSpec {
  std::string domain_id;
  std::size_t num_identities = 2;
  std::size_t cameras = 2;
  std::size_t samples_per_identity_per_camera = kTrackletSize;
  std::size_t input_dim = 2;
  DomainShift shift;
  std::uint64_t seed = 0;

  bool operator==(const DomainSpec&) const = default;

  void validate() const {
    auto fail = [&](const std::string& m) { throw SpecError("domain '" + domain_id + "': " + m); };
    if (domain_id.empty() || domain_id.find_first_of(" \t\n") != std::string::npos) {
      fail("domain_id must be a non-empty token");
    }
    if (num_identities < 2) fail("num_identities must be >= 2");
    if (cameras < 1) fail("cameras must be >= 1");
    // Groups never straddle cameras, so each camera block holds whole groups.
    if (samples_per_identity_per_camera < 1 || samples_per_identity_per_camera % kTrackletSize != 0) {
      fail("samples_per_identity_per_camera must be a positive multiple of " + std::to_string(kTrackletSize));
    }
    if (input_dim < 2) fail("input_dim must be >= 2");
    if (!(shift.scale > 0.0)) fail("shift scale must be positive");
    if (!(shift.noise_std >= 0.0)) fail("noise_std must be nonnegative");
    if (!(shift.camera_offset_std >= 0.0)) fail("camera_offset_std must be nonnegative");
    if (!shift.translation.empty() && shift.translation.size() != input_dim) {
      fail("translation has " + std::to_string(shift.translation.size()) + " entries, input_dim is " +
           std::to_string(input_dim));
    }
  }

  /// Identity prototypes occupy the leading coordinates of the latent space;
  /// camera offsets live in the remaining ones.
  std::size_t identity_dims() const { return input_dim / 2; }
};

/// Samples of one domain with identity, camera and tracklet-group tags.
///
/// Every tracklet group has exactly four members sharing an identity and a
/// camera. When `labeled()` is false the identities are hidden (see
/// EvaluationScope).
class DomainDataset {
 public:
  DomainDataset(std::string domain_id, Tensor inputs, std::vector<int> identities, std::vector<int> cameras,
                std::vector<int> tracklet_groups, bool labeled)
      : domain_id_(std::move(domain_id)),
        inputs_(std::move(inputs)),
        identities_(std::move(identities)),
        cameras_(std::move(cameras)),
        groups_(std::move(tracklet_groups)),
        labeled_(labeled) {
    validate();
  }

  const std::string& domain_id() const { return domain_id_; }
  const Tensor& inputs() const { return inputs_; }
  std::size_t size() const { return inputs_.rows(); }
  std::size_t input_dim() const { return inputs_.cols(); }
  const std::vector<int>& cameras() const { return cameras_; }
  const std::vector<int>& tracklet_groups() const { return groups_; }
  bool labeled() const { return labeled_; }

  const std::vector<int>& identities() const { return guarded_labels(identities_, labeled_, domain_id_); }

  DomainDataset without_labels() const {
    DomainDataset d = *this;
    d.labeled_ = false;
    return d;
  }

  /// Oracle access used by the supervised-on-targets reference row.
  DomainDataset with_revealed_labels() const {
    (void)identities();
    DomainDataset d = *this;
    d.labeled_ = true;
    return d;
  }

  /// Member indices of each tracklet group, groups ordered by first appearance.
  std::vector<std::vector<std::size_t>> group_members() const {
    std::map<int, std::size_t> slot;
    std::vector<std::vector<std::size_t>> out;
    for (std::size_t i = 0; i < groups_.size(); ++i) {
      auto [it, inserted] = slot.emplace(groups_[i], out.size());
      if (inserted) out.emplace_back();
      out[it->second].push_back(i);
    }
    return out;
  }

  std::size_t num_groups() const { return std::set<int>(groups_.begin(), groups_.end()).size(); }

  /// Samples at `indices`; groups must be selected whole.
  DomainDataset subset(std::span<const std::size_t> indices, std::string domain_id = {}) const {
    std::vector<int> ids, cams, groups;
    for (std::size_t i : indices) {
      ids.push_back(identities_[i]);
      cams.push_back(cameras_[i]);
      groups.push_back(groups_[i]);
    }
    return DomainDataset(domain_id.empty() ? domain_id_ : std::move(domain_id), select_rows(inputs_, indices),
                         std::move(ids), std::move(cams), std::move(groups), labeled_);
  }

  /// Concatenation with identities and groups re-indexed to be disjoint
  /// across parts. Labeled only if every part is.
  static DomainDataset concatenate(std::span<const DomainDataset> parts, std::string domain_id) {
    if (parts.empty()) throw SpecError("concatenate: no datasets");
    std::vector<Tensor> inputs;
    std::vector<int> ids, cams, groups;
    int id_offset = 0, group_offset = 0;
    bool labeled = true;
    for (const DomainDataset& p : parts) {
      if (p.input_dim() != parts.front().input_dim()) {
        throw DimensionError("blend: input_dim " + std::to_string(p.input_dim()) + " of '" + p.domain_id() +
                             "' differs from " + std::to_string(parts.front().input_dim()));
      }
      inputs.push_back(p.inputs_);
      int max_id = -1, max_group = -1;
      for (std::size_t i = 0; i < p.size(); ++i) {
        ids.push_back(p.identities_[i] + id_offset);
        cams.push_back(p.cameras_[i]);
        groups.push_back(p.groups_[i] + group_offset);
        max_id = std::max(max_id, p.identities_[i]);
        max_group = std::max(max_group, p.groups_[i]);
      }
      id_offset += max_id + 1;
      group_offset += max_group + 1;
      labeled = labeled && p.labeled_;
    }
    return DomainDataset(std::move(domain_id), vstack(inputs), std::move(ids), std::move(cams), std::move(groups),
                         labeled);
  }

  /// Column-oriented text layout:
  ///   kdreid-dataset v1 domain=<id> samples=<M> dim=<D> labeled=<0|1>
  ///   <domain_id> <identity> <camera> <group> <v_1> ... <v_D>      (M lines)
  /// Values use %.17g so a read returns bit-identical inputs.
  void write(std::ostream& os) const {
    os << "kdreid-dataset v1 domain=" << domain_id_ << " samples=" << size() << " dim=" << input_dim()
       << " labeled=" << (labeled_ ? 1 : 0) << '\n';
    char buf[32];
    for (std::size_t i = 0; i < size(); ++i) {
      os << domain_id_ << ' ' << identities_[i] << ' ' << cameras_[i] << ' ' << groups_[i];
      for (double v : inputs_.row(i)) {
        std::snprintf(buf, sizeof buf, "%.17g", v);
        os << ' ' << buf;
      }
      os << '\n';
    }
  }

  static DomainDataset read(std::istream& is) {
    std::string magic, version, line;
    if (!std::getline(is, line)) throw FormatError("dataset: missing header");
    std::istringstream hs(line);
    hs >> magic >> version;
    if (magic != "kdreid-dataset" || version != "v1") throw FormatError("dataset: bad header '" + line + "'");
    std::map<std::string, std::string> kv;
    for (std::string tok; hs >> tok;) {
      const auto eq = tok.find('=');
      if (eq == std::string::npos) throw FormatError("dataset: bad header field '" + tok + "'");
      kv[tok.substr(0, eq)] = tok.substr(eq + 1);
    }
    for (const char* k : {"domain", "samples", "dim", "labeled"})
      if (!kv.count(k)) throw FormatError(std::string("dataset: header lacks ") + k);
    const std::size_t m = std::stoul(kv["samples"]), d = std::stoul(kv["dim"]);
    Tensor inputs(m, d);
    std::vector<int> ids(m), cams(m), groups(m);
    for (std::size_t i = 0; i < m; ++i) {
      if (!std::getline(is, line)) throw FormatError("dataset: expected " + std::to_string(m) + " sample lines");
      std::istringstream ls(line);
      std::string dom;
      ls >> dom >> ids[i] >> cams[i] >> groups[i];
      for (std::size_t c = 0; c < d; ++c) {
        std::string tok;
        ls >> tok;
        if (!ls) throw FormatError("dataset: short sample line " + std::to_string(i + 2));
        inputs(i, c) = std::strtod(tok.c_str(), nullptr);
      }
      if (dom != kv["domain"]) throw FormatError("dataset: domain mismatch on line " + std::to_string(i + 2));
    }
    return DomainDataset(kv["domain"], std::move(inputs), std::move(ids), std::move(cams), std::move(groups),
                         kv["labeled"] == "1");
  }

 private:
  void validate() const {
    const std::size_t m = inputs_.rows();
    if (identities_.size() != m || cameras_.size() != m || groups_.size() != m) {
      throw SpecError("dataset '" + domain_id_ + "': label columns do not match " + std::to_string(m) + " samples");
    }
    for (const auto& members : group_members()) {
      bool ok = members.size() == kTrackletSize;
      for (std::size_t i : members)
        ok = ok && identities_[i] == identities_[members[0]] && cameras_[i] == cameras_[members[0]];
      if (!ok) {
        throw SpecError("dataset '" + domain_id_ + "': tracklet group " + std::to_string(groups_[members[0]]) +
                        " is not 4 samples of one identity under one camera");
      }
    }
  }

  std::string domain_id_;
  Tensor inputs_;
  std::vector<int> identities_;
  std::vector<int> cameras_;
  std::vector<int> groups_;
  bool labeled_;
};

namespace detail {

// Random orthonormal basis, columns of the returned matrix.
inline Tensor random_orthonormal(std::size_t d, std::mt19937_64& rng) {
  std::normal_distribution<double> normal(0.0, 1.0);
  Tensor q(d, d);
  for (std::size_t c = 0; c < d; ++c) {
    std::vector<double> v(d);
    for (double& x : v) x = normal(rng);
    for (std::size_t p = 0; p < c; ++p) {
      double proj = 0.0;
      for (std::size_t r = 0; r < d; ++r) proj += v[r] * q(r, p);
      for (std::size_t r = 0; r < d; ++r) v[r] -= proj * q(r, p);
    }
    const double n = std::sqrt(dot(v, v));
    for (std::size_t r = 0; r < d; ++r) q(r, c) = v[r] / n;
  }
  return q;
}

// Q B Q^T where B rotates consecutive column pairs of Q by `angle`.
inline Tensor plane_rotation(std::size_t d, double angle, std::mt19937_64& rng) {
  const Tensor q = random_orthonormal(d, rng);
  Tensor b = Tensor::identity(d);
  const double c = std::cos(angle), s = std::sin(angle);
  for (std::size_t p = 0; p + 1 < d; p += 2) {
    b(p, p) = c;
    b(p, p + 1) = -s;
    b(p + 1, p) = s;
    b(p + 1, p + 1) = c;
  }
  return matmul(matmul(q, b), transpose(q));
}

// Rotation planes are fixed per input size and shared by every domain, so
// rotation_angle acts as a scalar shift magnitude along one common direction.
inline Tensor shared_rotation(std::size_t d, double angle) {
  std::mt19937_64 frame(0x6b6472656964ULL + d);
  return plane_rotation(d, angle, frame);
}

}  // namespace detail

/// Samples one Gaussian cluster per identity around an N(0, I) prototype and
/// applies the domain's camera offsets, rotation, scale, translation and
/// sensor noise.
///
/// Layout: identity-major, then camera, then sample; every 4 consecutive
/// samples form one tracklet group.
inline DomainDataset generate_domain(const DomainSpec& spec) {
  spec.validate();
  std::mt19937_64 rng(spec.seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  const std::size_t d = spec.input_dim, k = spec.identity_dims();
  const DomainShift& sh = spec.shift;

  Tensor rotation;
  if (sh.rotation_angle != 0.0) rotation = detail::shared_rotation(d, sh.rotation_angle);

  // Draw order is fixed: prototypes, camera offsets, samples.
  Tensor prototypes(spec.num_identities, d);
  for (std::size_t i = 0; i < spec.num_identities; ++i)
    for (std::size_t c = 0; c < k; ++c) prototypes(i, c) = normal(rng);

  Tensor offsets(spec.cameras, d);
  for (std::size_t cam = 0; cam < spec.cameras; ++cam)
    for (std::size_t c = k; c < d; ++c) offsets(cam, c) = sh.camera_offset_std * normal(rng);

  const std::size_t per_cam = spec.samples_per_identity_per_camera;
  const std::size_t m = spec.num_identities * spec.cameras * per_cam;
  Tensor latent(m, d);
  std::vector<int> ids(m), cams(m), groups(m);
  std::size_t row = 0;
  for (std::size_t id = 0; id < spec.num_identities; ++id)
    for (std::size_t cam = 0; cam < spec.cameras; ++cam)
      for (std::size_t s = 0; s < per_cam; ++s, ++row) {
        for (std::size_t c = 0; c < d; ++c) latent(row, c) = prototypes(id, c) + offsets(cam, c);
        ids[row] = static_cast<int>(id);
        cams[row] = static_cast<int>(cam);
        groups[row] = static_cast<int>(row / kTrackletSize);
      }

  Tensor inputs = rotation.empty() ? latent : matmul(latent, transpose(rotation));
  for (std::size_t r = 0; r < m; ++r)
    for (std::size_t c = 0; c < d; ++c) {
      double v = sh.scale * inputs(r, c);
      if (!sh.translation.empty()) v += sh.translation[c];
      if (sh.noise_std > 0.0) v += sh.noise_std * normal(rng);
      inputs(r, c) = v;
    }
  return DomainDataset(spec.domain_id, std::move(inputs), std::move(ids), std::move(cams), std::move(groups), true);
}

/// Concatenates target datasets into one "blend" domain with globally unique
/// identities.
inline DomainDataset blend_targets(std::span<const DomainDataset> targets) {
  if (targets.empty()) throw SpecError("blend_targets: at least one target required");
  return DomainDataset::concatenate(targets, "blend");
}

namespace detail {

struct IdentityGroups {
  int identity;
  std::vector<std::vector<std::size_t>> groups;  // member indices
};

inline std::vector<IdentityGroups> groups_by_identity(const DomainDataset& ds, const std::vector<int>& ids) {
  std::map<int, std::size_t> slot;
  std::vector<IdentityGroups> out;
  for (auto& members : ds.group_members()) {
    const int id = ids[members.front()];
    auto [it, inserted] = slot.emplace(id, out.size());
    if (inserted) out.push_back({id, {}});
    out[it->second].groups.push_back(std::move(members));
  }
  std::sort(out.begin(), out.end(), [](const auto& a, const auto& b) { return a.identity < b.identity; });
  return out;
}

}  // namespace detail

struct QueryGallerySplit {
  DomainDataset query;
  DomainDataset gallery;
};

/// Per identity, assigns whole tracklet groups to the query side so that
/// every query sample keeps at least one gallery match under another camera.
/// Part of the evaluation protocol: reads hidden labels inside an
/// EvaluationScope.
inline QueryGallerySplit split_query_gallery(const DomainDataset& dataset, double query_fraction, std::uint64_t seed) {
  if (!(query_fraction > 0.0 && query_fraction < 1.0)) {
    throw ProtocolError("split_query_gallery: query_fraction must lie in (0, 1)");
  }
  EvaluationScope scope;
  const auto& ids = dataset.identities();
  const auto& cams = dataset.cameras();
  std::mt19937_64 rng(seed);
  std::vector<std::size_t> query, gallery;
  for (auto& ig : detail::groups_by_identity(dataset, ids)) {
    std::set<int> camset;
    for (const auto& g : ig.groups) camset.insert(cams[g.front()]);
    if (camset.size() < 2) {
      throw ProtocolError("split_query_gallery: identity " + std::to_string(ig.identity) + " of '" +
                          dataset.domain_id() + "' appears under a single camera");
    }
    std::shuffle(ig.groups.begin(), ig.groups.end(), rng);
    const std::size_t want = std::max<std::size_t>(
        1, static_cast<std::size_t>(std::lround(query_fraction * static_cast<double>(ig.groups.size()))));
    std::vector<bool> in_query(ig.groups.size(), false);
    std::size_t taken = 0;
    auto feasible = [&] {
      for (std::size_t a = 0; a < ig.groups.size(); ++a) {
        if (!in_query[a]) continue;
        bool matched = false;
        for (std::size_t b = 0; b < ig.groups.size() && !matched; ++b)
          matched = !in_query[b] && cams[ig.groups[b].front()] != cams[ig.groups[a].front()];
        if (!matched) return false;
      }
      return true;
    };
    for (std::size_t a = 0; a < ig.groups.size() && taken < want; ++a) {
      in_query[a] = true;
      if (feasible()) {
        ++taken;
      } else {
        in_query[a] = false;
      }
    }
    for (std::size_t a = 0; a < ig.groups.size(); ++a) {
      auto& dst = in_query[a] ? query : gallery;
      dst.insert(dst.end(), ig.groups[a].begin(), ig.groups[a].end());
    }
  }
  std::sort(query.begin(), query.end());
  std::sort(gallery.begin(), gallery.end());
  return {dataset.subset(query), dataset.subset(gallery)};
}

struct IdentityPartition {
  DomainDataset train;
  DomainDataset test;
};

/// Disjoint identity partition (open-set: test identities never appear in
/// train). Reads labels, so unlabeled inputs require an EvaluationScope.
inline IdentityPartition partition_identities(const DomainDataset& dataset, double test_fraction, std::uint64_t seed) {
  const auto& ids = dataset.identities();
  std::vector<int> distinct(ids.begin(), ids.end());
  std::sort(distinct.begin(), distinct.end());
  distinct.erase(std::unique(distinct.begin(), distinct.end()), distinct.end());
  std::mt19937_64 rng(seed);
  std::shuffle(distinct.begin(), distinct.end(), rng);
  const auto n_test = static_cast<std::size_t>(std::lround(test_fraction * static_cast<double>(distinct.size())));
  if (n_test < 2 || distinct.size() - n_test < 2) {
    throw SpecError("partition_identities: both sides need at least 2 identities");
  }
  const std::set<int> test_ids(distinct.begin(), distinct.begin() + static_cast<std::ptrdiff_t>(n_test));
  std::vector<std::size_t> train, test;
  for (std::size_t i = 0; i < ids.size(); ++i) (test_ids.count(ids[i]) ? test : train).push_back(i);
  return {dataset.subset(train), dataset.subset(test)};
}

}  // namespace kdreid
