#include <gtest/gtest.h>

#include "pic/sampling.hpp"
#include "pic/taskgen.hpp"
#include "test_util.hpp"

using namespace pic;

TEST(JointSample, SharedCentersAndPerCloudKnn) {
  for (std::uint64_t s = 0; s < 20; ++s) {
    const auto input = testutil::random_cloud(256, s);
    const auto target = testutil::random_cloud(256, s + 500);
    const auto [a, b] = joint_sample(input, target, 16, 8, s);
    EXPECT_EQ(a.center_indices, b.center_indices);
    EXPECT_EQ(a.source, Segment::QueryInput);
    EXPECT_EQ(b.source, Segment::QueryTarget);
    for (std::size_t c = 0; c < 16; ++c) {
      const auto ia = testutil::naive_knn(input.points, input.points[a.center_indices[c]], 8);
      const auto ib = testutil::naive_knn(target.points, target.points[b.center_indices[c]], 8);
      EXPECT_TRUE(std::equal(ia.begin(), ia.end(), a.patch_indices(c).begin()));
      EXPECT_TRUE(std::equal(ib.begin(), ib.end(), b.patch_indices(c).begin()));
      for (std::size_t j = 0; j < 8; ++j) EXPECT_EQ(a.patch(c)[j], input.points[ia[j]]);
      EXPECT_EQ(b.centers[c], target.points[b.center_indices[c]]);
    }
  }
}

TEST(JointSample, PromptTagsAndDeterminism) {
  const auto input = testutil::random_cloud(100, 1);
  const auto [a, b] = joint_sample(input, input, 10, 4, 3, true);
  EXPECT_EQ(a.source, Segment::PromptInput);
  EXPECT_EQ(b.source, Segment::PromptTarget);
  EXPECT_EQ(joint_sample(input, input, 10, 4, 3, true).first, a);
}

TEST(JointSample, Errors) {
  const auto a = testutil::random_cloud(100, 1);
  const auto b = testutil::random_cloud(90, 1);
  EXPECT_THROW(joint_sample(a, b, 10, 4, 0), std::invalid_argument);
  EXPECT_THROW(joint_sample(a, a, 101, 4, 0), std::invalid_argument);
  EXPECT_THROW(joint_sample(a, a, 10, 101, 0), std::invalid_argument);
}

TEST(IndependentSample, CentersUsuallyDiffer) {
  const auto input = testutil::random_cloud(200, 1);
  const auto target = testutil::random_cloud(200, 2);
  const auto [a, b] = independent_sample(input, target, 16, 8, 5);
  EXPECT_NE(a.center_indices, b.center_indices);
}

TEST(Mask, ExactCountAcrossRatios) {
  for (std::size_t n : {1u, 7u, 64u, 128u, 200u}) {
    for (int r = 0; r <= 20; ++r) {
      const double ratio = r / 20.0;
      for (std::uint64_t seed = 0; seed < 5; ++seed) {
        const auto m = build_mask(n, ratio, seed);
        ASSERT_EQ(m.flags.size(), n);
        EXPECT_EQ(m.masked_count(), round_half_up_count(n, ratio)) << n << " " << ratio;
      }
    }
  }
  EXPECT_EQ(build_mask(64, 0.7, 1).masked_count(), 45u);
  EXPECT_THROW(build_mask(10, 1.5, 0), std::invalid_argument);
  EXPECT_THROW(build_mask(10, -0.1, 0), std::invalid_argument);
}

TEST(Mask, PositionsVaryWithSeed) {
  std::vector<int> hits(64, 0);
  for (std::uint64_t s = 0; s < 400; ++s) {
    const auto m = build_mask(64, 0.5, s);
    for (std::size_t i = 0; i < 64; ++i) hits[i] += m.flags[i];
  }
  // Each position is masked with probability 1/2: 200 +- 5 sigma (sigma = 10).
  for (const int h : hits) {
    EXPECT_GT(h, 150);
    EXPECT_LT(h, 250);
  }
}

TEST(Layout, SepAndCatCounts) {
  for (std::uint64_t s = 0; s < 10; ++s) {
    const auto sep = sep_training_layout(64, 0.7, s);
    EXPECT_EQ(sep.masked_count(Segment::PromptInput), 0u);
    EXPECT_EQ(sep.masked_count(Segment::QueryInput), 0u);
    EXPECT_EQ(sep.masked_count(), 90u);
    const auto query_only = sep_training_layout(64, 0.7, s, false);
    EXPECT_EQ(query_only.masked_count(Segment::QueryTarget), 45u);
    EXPECT_EQ(query_only.masked_count(), 45u);
    const auto cat = cat_training_layout(64, 0.7, s);
    EXPECT_EQ(cat.masked_count(), round_half_up_count(256, 0.7));
  }
  const auto inf = inference_layout(32);
  EXPECT_EQ(inf.masked_count(Segment::QueryTarget), 32u);
  EXPECT_EQ(inf.masked_count(), 32u);
}

TEST(Layout, ApplyMaskSep) {
  const auto cloud = testutil::random_cloud(64, 1);
  const auto [a, b] = joint_sample(cloud, cloud, 8, 4, 0);
  const auto mask = build_mask(8, 0.5, 2);
  const auto layout = apply_mask_sep(b, mask);
  EXPECT_EQ(layout.masked[static_cast<std::size_t>(Segment::QueryTarget)], mask.flags);
  EXPECT_EQ(layout.masked_count(), 4u);
  EXPECT_THROW(apply_mask_sep(b, build_mask(9, 0.5, 2)), std::invalid_argument);
}
