#include <algorithm>
#include <cmath>
#include <map>
#include <set>
#include <sstream>

#include <gtest/gtest.h>

#include "kdreid/synth.hpp"

using namespace kdreid;

namespace {

DomainSpec spec(std::string id, std::size_t ids, std::size_t cams, std::size_t spc, std::uint64_t seed,
                std::size_t dim = 8) {
  DomainSpec s;
  s.domain_id = std::move(id);
  s.num_identities = ids;
  s.cameras = cams;
  s.samples_per_identity_per_camera = spc;
  s.input_dim = dim;
  s.seed = seed;
  s.shift.noise_std = 0.1;
  s.shift.camera_offset_std = 0.5;
  return s;
}

double sq(std::span<const double> a, std::span<const double> b) {
  double s = 0.0;
  for (std::size_t k = 0; k < a.size(); ++k) s += (a[k] - b[k]) * (a[k] - b[k]);
  return s;
}

void expect_group_invariant(const DomainDataset& ds) {
  EvaluationScope scope;
  const auto& ids = ds.identities();
  for (const auto& g : ds.group_members()) {
    ASSERT_EQ(g.size(), kTrackletSize);
    for (std::size_t m : g) {
      EXPECT_EQ(ids[m], ids[g.front()]);
      EXPECT_EQ(ds.cameras()[m], ds.cameras()[g.front()]);
    }
  }
}

}  // namespace

TEST(GenerateDomain, CountsAndGroups) {
  const DomainDataset ds = generate_domain(spec("a", 10, 2, 4, 1));
  EXPECT_EQ(ds.size(), 80u);
  EXPECT_EQ(ds.num_groups(), 20u);
  EXPECT_TRUE(ds.labeled());
  expect_group_invariant(ds);
}

TEST(GenerateDomain, DeterministicForSeed) {
  DomainSpec s = spec("a", 6, 3, 8, 42);
  s.shift = DomainShift{};
  const DomainDataset a = generate_domain(s), b = generate_domain(s);
  EXPECT_EQ(a.inputs(), b.inputs());
  EXPECT_EQ(a.identities(), b.identities());
  EXPECT_EQ(a.cameras(), b.cameras());
  EXPECT_EQ(a.tracklet_groups(), b.tracklet_groups());
  s.seed = 43;
  EXPECT_FALSE(generate_domain(s).inputs() == a.inputs());
}

TEST(GenerateDomain, RotationMovesDomainApart) {
  DomainSpec a = spec("a", 20, 2, 4, 5, 12);
  DomainSpec b = a;
  b.domain_id = "b";
  b.shift.rotation_angle = 1.0;
  const DomainDataset da = generate_domain(a), db = generate_domain(b);
  double intra = 0.0, inter = 0.0;
  std::size_t ni = 0, nx = 0;
  for (std::size_t i = 0; i < da.size(); ++i)
    for (std::size_t j = 0; j < da.size(); ++j) {
      if (i != j) {
        intra += std::sqrt(sq(da.inputs().row(i), da.inputs().row(j)));
        ++ni;
      }
      inter += std::sqrt(sq(da.inputs().row(i), db.inputs().row(j)));
      ++nx;
    }
  EXPECT_GT(inter / nx, intra / ni);
}

TEST(GenerateDomain, NoiselessIdentitiesKeepPrototypeSeparation) {
  DomainSpec s = spec("a", 8, 3, 4, 9, 10);
  s.shift = DomainShift{};
  s.shift.camera_offset_std = 0.7;
  const DomainDataset ds = generate_domain(s);
  const auto& ids = ds.identities();
  const std::size_t k = s.identity_dims();
  // Prototypes are recoverable from the identity coordinates when noise is 0.
  std::map<int, std::vector<double>> proto;
  for (std::size_t i = 0; i < ds.size(); ++i) {
    std::vector<double> p(ds.inputs().row(i).begin(), ds.inputs().row(i).begin() + k);
    auto [it, fresh] = proto.emplace(ids[i], p);
    if (!fresh) EXPECT_EQ(it->second, p);
  }
  double min_proto = INFINITY;
  for (const auto& [a, pa] : proto)
    for (const auto& [b, pb] : proto)
      if (a < b) min_proto = std::min(min_proto, sq(pa, pb));
  for (std::size_t i = 0; i < ds.size(); ++i)
    for (std::size_t j = 0; j < ds.size(); ++j)
      if (ids[i] != ids[j]) EXPECT_GE(sq(ds.inputs().row(i), ds.inputs().row(j)), min_proto - 1e-12);
}

TEST(GenerateDomain, InvalidSpecs) {
  EXPECT_THROW(generate_domain(spec("a", 1, 2, 4, 0)), SpecError);
  EXPECT_THROW(generate_domain(spec("a", 4, 2, 3, 0)), SpecError);
  EXPECT_THROW(generate_domain(spec("", 4, 2, 4, 0)), SpecError);
  DomainSpec s = spec("a", 4, 2, 4, 0);
  s.shift.scale = 0.0;
  EXPECT_THROW(generate_domain(s), SpecError);
  s = spec("a", 4, 2, 4, 0);
  s.shift.noise_std = -1.0;
  EXPECT_THROW(generate_domain(s), SpecError);
  s = spec("a", 4, 2, 4, 0);
  s.shift.translation = {1.0, 2.0};
  EXPECT_THROW(generate_domain(s), SpecError);
}

TEST(DomainDataset, RejectsBrokenGroups) {
  Tensor x(4, 2);
  EXPECT_THROW(DomainDataset("d", x, {0, 0, 0, 1}, {0, 0, 0, 0}, {0, 0, 0, 0}, true), SpecError);
  EXPECT_THROW(DomainDataset("d", x, {0, 0, 0, 0}, {0, 0, 1, 0}, {0, 0, 0, 0}, true), SpecError);
  EXPECT_THROW(DomainDataset("d", x, {0, 0, 0}, {0, 0, 0, 0}, {0, 0, 0, 0}, true), Error);
}

TEST(LabelGuard, HiddenLabelsNeedEvaluationScope) {
  const DomainDataset hidden = generate_domain(spec("t", 4, 2, 4, 3)).without_labels();
  reset_label_audit();
  EXPECT_THROW(hidden.identities(), AccessViolation);
  EXPECT_EQ(label_audit().violations, 1u);
  {
    EvaluationScope scope;
    EXPECT_EQ(hidden.identities().size(), hidden.size());
  }
  EXPECT_EQ(label_audit().evaluation_reads, 1u);
  EXPECT_THROW(hidden.with_revealed_labels(), AccessViolation);
  reset_label_audit();
}

TEST(BlendTargets, ReindexesIdentities) {
  const DomainDataset a = generate_domain(spec("a", 10, 2, 4, 1)), b = generate_domain(spec("b", 10, 2, 4, 2));
  const DomainDataset parts[] = {a, b};
  const DomainDataset blend = blend_targets(parts);
  EXPECT_EQ(blend.domain_id(), "blend");
  EXPECT_EQ(blend.size(), 160u);
  EXPECT_EQ(blend.num_groups(), a.num_groups() + b.num_groups());
  const auto& ids = blend.identities();
  std::set<int> first(ids.begin(), ids.begin() + 80), second(ids.begin() + 80, ids.end());
  EXPECT_EQ(first.size(), 10u);
  EXPECT_EQ(second.size(), 10u);
  for (int v : first) EXPECT_EQ(second.count(v), 0u);
  expect_group_invariant(blend);
}

TEST(BlendTargets, SingleTargetAndOrderInvariance) {
  const DomainDataset a = generate_domain(spec("a", 5, 2, 4, 1)), b = generate_domain(spec("b", 6, 2, 4, 2));
  const DomainDataset one[] = {a};
  EXPECT_EQ(blend_targets(one).inputs(), a.inputs());
  const DomainDataset ab[] = {a, b}, ba[] = {b, a};
  auto rows = [](const DomainDataset& d) {
    std::multiset<std::vector<double>> out;
    for (std::size_t i = 0; i < d.size(); ++i) out.emplace(d.inputs().row(i).begin(), d.inputs().row(i).end());
    return out;
  };
  EXPECT_EQ(rows(blend_targets(ab)), rows(blend_targets(ba)));
  const DomainDataset c = generate_domain(spec("c", 5, 2, 4, 1, 6));
  const DomainDataset ac[] = {a, c};
  EXPECT_THROW(blend_targets(ac), DimensionError);
}

TEST(SplitQueryGallery, ProtocolHolds) {
  const DomainDataset ds = generate_domain(spec("a", 12, 3, 8, 4)).without_labels();
  const auto split = split_query_gallery(ds, 0.5, 77);
  EvaluationScope scope;
  const auto& qi = split.query.identities();
  const auto& gi = split.gallery.identities();
  EXPECT_EQ(split.query.size() + split.gallery.size(), ds.size());
  for (std::size_t q = 0; q < split.query.size(); ++q) {
    bool match = false;
    for (std::size_t g = 0; g < split.gallery.size() && !match; ++g)
      match = gi[g] == qi[q] && split.gallery.cameras()[g] != split.query.cameras()[q];
    EXPECT_TRUE(match);
  }
  // disjoint and covering: compare multisets of rows
  std::multiset<std::vector<double>> all, parts;
  for (std::size_t i = 0; i < ds.size(); ++i) all.emplace(ds.inputs().row(i).begin(), ds.inputs().row(i).end());
  for (const DomainDataset* d : {&split.query, &split.gallery})
    for (std::size_t i = 0; i < d->size(); ++i) parts.emplace(d->inputs().row(i).begin(), d->inputs().row(i).end());
  EXPECT_EQ(all, parts);
}

TEST(SplitQueryGallery, DeterministicAndTwoCameras) {
  const DomainDataset ds = generate_domain(spec("a", 6, 2, 4, 4));
  const auto a = split_query_gallery(ds, 0.5, 3), b = split_query_gallery(ds, 0.5, 3);
  EXPECT_EQ(a.query.inputs(), b.query.inputs());
  EXPECT_EQ(a.gallery.inputs(), b.gallery.inputs());
  std::set<int> gallery_ids(a.gallery.identities().begin(), a.gallery.identities().end());
  for (int id : a.query.identities()) EXPECT_EQ(gallery_ids.count(id), 1u);
}

TEST(SplitQueryGallery, SingleCameraIdentityIsRejected) {
  try {
    split_query_gallery(generate_domain(spec("solo", 3, 1, 8, 1)), 0.5, 1);
    FAIL();
  } catch (const ProtocolError& e) {
    EXPECT_NE(std::string(e.what()).find("identity"), std::string::npos);
  }
}

TEST(PartitionIdentities, DisjointIdentities) {
  const DomainDataset ds = generate_domain(spec("a", 10, 2, 4, 8));
  const auto p = partition_identities(ds, 0.5, 5);
  std::set<int> tr(p.train.identities().begin(), p.train.identities().end());
  std::set<int> te(p.test.identities().begin(), p.test.identities().end());
  EXPECT_EQ(tr.size() + te.size(), 10u);
  for (int v : te) EXPECT_EQ(tr.count(v), 0u);
}

TEST(DatasetFormat, RoundTrip) {
  const DomainDataset ds = generate_domain(spec("a", 4, 2, 4, 8));
  std::stringstream ss;
  ds.write(ss);
  const DomainDataset back = DomainDataset::read(ss);
  EXPECT_EQ(back.domain_id(), ds.domain_id());
  EXPECT_EQ(back.inputs(), ds.inputs());
  EXPECT_EQ(back.identities(), ds.identities());
  EXPECT_EQ(back.cameras(), ds.cameras());
  EXPECT_EQ(back.tracklet_groups(), ds.tracklet_groups());
  std::istringstream bad("kdreid-dataset v9 domain=a samples=0 dim=2 labeled=1\n");
  EXPECT_THROW(DomainDataset::read(bad), Error);
}
