#include <map>
#include <set>

#include <gtest/gtest.h>

#include "kdreid/sampling.hpp"

using namespace kdreid;

namespace {

DomainDataset domain(std::string id, std::size_t ids, std::size_t spc, std::uint64_t seed) {
  DomainSpec s;
  s.domain_id = std::move(id);
  s.num_identities = ids;
  s.cameras = 2;
  s.samples_per_identity_per_camera = spc;
  s.input_dim = 6;
  s.seed = seed;
  return generate_domain(s);
}

// Rows come in P blocks of K; every block is one identity and, at K = 4, one camera.
void expect_pk_blocks(const Batch& b, std::size_t p, std::size_t k) {
  ASSERT_EQ(b.size(), p * k);
  EXPECT_EQ(b.groups(), p);
  EXPECT_EQ(b.group_size(), k);
  EvaluationScope scope;
  const auto& ids = b.identities();
  std::set<int> distinct;
  for (std::size_t g = 0; g < p; ++g) {
    for (std::size_t j = 0; j < k; ++j) {
      EXPECT_EQ(ids[g * k + j], ids[g * k]);
      if (k == kTrackletSize) EXPECT_EQ(b.cameras()[g * k + j], b.cameras()[g * k]);
    }
    distinct.insert(ids[g * k]);
  }
  if (b.labeled()) EXPECT_EQ(distinct.size(), p);
}

}  // namespace

TEST(PkSample, StandardSizesAndGroupInvariant) {
  const DomainDataset ds = domain("s", 24, 4, 1);
  std::mt19937_64 rng(3);
  for (int i = 0; i < 50; ++i) {
    expect_pk_blocks(pk_sample(ds, kPairedGroups, kTrackletSize, rng), 8, 4);
    expect_pk_blocks(pk_sample(ds, kTargetGroups, kTrackletSize, rng), 16, 4);
  }
  expect_pk_blocks(pk_sample(ds, 4, 2, rng), 4, 2);
}

TEST(PkSample, RejectsSingleGroupAndShortDatasets) {
  const DomainDataset ds = domain("s", 6, 4, 1);
  std::mt19937_64 rng(3);
  try {
    pk_sample(ds, 1, 4, rng);
    FAIL();
  } catch (const SamplingError& e) {
    EXPECT_NE(std::string(e.what()).find("P=1"), std::string::npos);
  }
  EXPECT_THROW(pk_sample(ds, 7, 4, rng), SamplingError);
  EXPECT_THROW(PkSampler(ds, 7, 4), SamplingError);
}

TEST(PkSample, UnlabeledUsesTrackletsAndHidesLabels) {
  const DomainDataset ds = domain("t", 6, 4, 2).without_labels();
  std::mt19937_64 rng(5);
  // 6 identities but 12 tracklets, so P = 10 is possible.
  const Batch b = pk_sample(ds, 10, 4, rng);
  EXPECT_FALSE(b.labeled());
  reset_label_audit();
  EXPECT_THROW(b.identities(), AccessViolation);
  EXPECT_EQ(label_audit().violations, 1u);
  reset_label_audit();
  expect_pk_blocks(b, 10, 4);
}

TEST(PkSample, IdentityFrequencyNearUniform) {
  const DomainDataset ds = domain("s", 20, 4, 7);
  std::mt19937_64 rng(11);
  std::map<int, std::size_t> count;
  PkSampler sampler(ds, 8, 4);
  for (int i = 0; i < 10000; ++i) {
    const Batch b = sampler.next(rng);
    for (std::size_t g = 0; g < b.groups(); ++g) ++count[b.identities()[g * 4]];
  }
  ASSERT_EQ(count.size(), 20u);
  const double uniform = 10000.0 * 8 / 20;
  for (const auto& [id, n] : count) {
    EXPECT_GT(n, uniform / 5);
    EXPECT_LT(n, uniform * 5);
  }
}

TEST(PkSampler, BatchesPerEpochCoverEligibleSamples) {
  const DomainDataset ds = domain("s", 20, 4, 7);  // 160 samples
  EXPECT_EQ(PkSampler(ds, 8, 4).batches_per_epoch(), 5u);
  EXPECT_EQ(PkSampler(ds, 16, 4).batches_per_epoch(), 2u);
  std::mt19937_64 rng(1);
  PkSampler sampler(ds, 16, 4);
  for (int i = 0; i < 20; ++i) expect_pk_blocks(sampler.next(rng), 16, 4);
}

TEST(PairedBatch, ThirtyTwoPlusThirtyTwoAndDeterministic) {
  const DomainDataset src = domain("s", 16, 4, 1);
  const DomainDataset tgt = domain("t", 10, 4, 2).without_labels();
  std::mt19937_64 r1(9), r2(9);
  for (int i = 0; i < 20; ++i) {
    const auto [s1, t1] = paired_batch(src, tgt, r1);
    const auto [s2, t2] = paired_batch(src, tgt, r2);
    EXPECT_EQ(s1.size(), 32u);
    EXPECT_EQ(t1.size(), 32u);
    EXPECT_EQ(s1.domain_id(), "s");
    EXPECT_EQ(t1.domain_id(), "t");
    EXPECT_EQ(s1.inputs(), s2.inputs());
    EXPECT_EQ(t1.inputs(), t2.inputs());
    expect_pk_blocks(s1, 8, 4);
    expect_pk_blocks(t1, 8, 4);
  }
}
