#include <gtest/gtest.h>

#include <cmath>
#include <set>

#include "pic/icl.hpp"
#include "test_util.hpp"

using namespace pic;

namespace {

std::vector<Label> random_labels(std::size_t n, Label k, Rng& rng) {
  std::vector<Label> labels(n);
  for (auto& l : labels) l = static_cast<Label>(rng.index(k));
  return labels;
}

// Exhaustive nearest mapped point; ties by lower bank index.
std::vector<Label> brute_decode(const PointCloud& pred, const LabelMapping& mapping) {
  std::vector<Label> out;
  for (const auto& p : pred.points) {
    std::size_t best = 0;
    double best_d = 1e300;
    for (std::size_t k = 0; k < mapping.size(); ++k) {
      const double d = testutil::sq(p, mapping.points[k]);
      if (d < best_d || (d == best_d && mapping.bank_indices[k] < mapping.bank_indices[best])) {
        best = k;
        best_d = d;
      }
    }
    out.push_back(mapping.parts[best]);
  }
  return out;
}

}  // namespace

TEST(LabelBank, SeparationAndDeterminism) {
  for (std::size_t n : {1u, 8u, 20u, 50u}) {
    const auto bank = build_label_bank(n, 3);
    ASSERT_EQ(bank.size(), n);
    for (std::size_t i = 0; i < n; ++i) {
      EXPECT_LE(bank.points[i].cwiseAbs().maxCoeff(), 1.0f);
      for (std::size_t j = i + 1; j < n; ++j) {
        EXPECT_GE((bank.points[i] - bank.points[j]).norm(), LabelBank::kMinSeparation);
      }
    }
    EXPECT_EQ(build_label_bank(n, 3), bank);
  }
  EXPECT_NE(build_label_bank(8, 3), build_label_bank(8, 4));
}

TEST(LabelBank, TooLargeThrows) { EXPECT_THROW(build_label_bank(5000, 1), std::invalid_argument); }

TEST(Mapping, BijectiveAndOverflow) {
  const auto bank = build_label_bank(8, 1);
  const std::vector<Label> all = {0, 1, 2, 3, 4, 5, 6, 7};
  const auto full = draw_mapping(bank, all, 9);
  EXPECT_EQ(std::set<std::size_t>(full.bank_indices.begin(), full.bank_indices.end()).size(), 8u);
  for (std::size_t k = 0; k < full.size(); ++k) EXPECT_EQ(full.points[k], bank.points[full.bank_indices[k]]);
  const std::vector<Label> nine = {0, 1, 2, 3, 4, 5, 6, 7, 8};
  EXPECT_THROW(draw_mapping(bank, nine, 0), std::invalid_argument);
  const std::vector<Label> one = {12};
  EXPECT_EQ(draw_mapping(bank, one, 4).size(), 1u);
}

TEST(Mapping, SelectionFrequencyUniform) {
  const auto bank = build_label_bank(8, 2);
  const std::vector<Label> parts = {3, 4};
  std::vector<int> counts(8, 0);
  std::vector<int> first(8, 0);
  constexpr int kDraws = 10000;
  for (int t = 0; t < kDraws; ++t) {
    const auto m = draw_mapping(bank, parts, static_cast<std::uint64_t>(t));
    for (const auto idx : m.bank_indices) ++counts[idx];
    ++first[m.bank_indices[0]];
  }
  // Each point is chosen with probability 2/8 per draw.
  const double mean = kDraws * 0.25;
  const double sigma = std::sqrt(kDraws * 0.25 * 0.75);
  for (const int c : counts) EXPECT_LT(std::abs(c - mean), 3.0 * sigma);
  // Part 3 alone lands on each point with probability 1/8.
  const double mean1 = kDraws / 8.0;
  const double sigma1 = std::sqrt(kDraws * (1.0 / 8.0) * (7.0 / 8.0));
  for (const int c : first) EXPECT_LT(std::abs(c - mean1), 3.0 * sigma1);
}

TEST(Encode, RoundTripAndBruteForceDecode) {
  Rng rng(31);
  for (int t = 0; t < 300; ++t) {
    const std::size_t n_b = 6 + rng.index(10);
    const auto bank = build_label_bank(n_b, static_cast<std::uint64_t>(t));
    const Label k = static_cast<Label>(1 + rng.index(n_b));
    std::vector<Label> parts(k);
    std::iota(parts.begin(), parts.end(), Label{0});
    const auto mapping = draw_mapping(bank, parts, static_cast<std::uint64_t>(t) + 7);
    const auto labels = random_labels(64, k, rng);
    const auto encoded = encode_labels(labels, mapping);
    EXPECT_EQ(decode_labels(encoded, mapping), labels);

    const auto noisy = testutil::random_cloud(200, static_cast<std::uint64_t>(t) + 1000);
    EXPECT_EQ(decode_labels(noisy, mapping), brute_decode(noisy, mapping));
  }
}

TEST(Encode, KnownDecodeAndErrors) {
  LabelMapping m;
  m.parts = {0, 1};
  m.bank_indices = {0, 1};
  m.points = {Point(0, 0, 0), Point(1, 1, 1)};
  PointCloud p;
  p.points = {Point(0.1f, 0, 0), Point(0.9f, 1, 1)};
  EXPECT_EQ(decode_labels(p, m), (std::vector<Label>{0, 1}));
  const std::vector<Label> bad = {0, 2};
  EXPECT_THROW(encode_labels(bad, m), std::invalid_argument);
}

TEST(Encode, DecodeInvariantToCommonRotation) {
  const auto bank = build_label_bank(8, 5);
  const std::vector<Label> parts = {0, 1, 2, 3, 4};
  auto mapping = draw_mapping(bank, parts, 1);
  const auto pred = testutil::random_cloud(300, 8);
  const auto before = decode_labels(pred, mapping);
  const Eigen::Vector3d axis(0.0, 0.6, 0.8);
  const auto rotated = rotate(pred, axis, 1.1);
  PointCloud mp;
  mp.points = mapping.points;
  mapping.points = rotate(mp, axis, 1.1).points;
  EXPECT_EQ(decode_labels(rotated, mapping), before);
}

TEST(Encode, MappingFromEncodedRecovers) {
  const auto bank = build_label_bank(8, 6);
  const std::vector<Label> parts = {5, 6, 7};
  const auto mapping = draw_mapping(bank, parts, 2);
  const std::vector<Label> labels = {7, 5, 5, 6, 7};
  const auto encoded = encode_labels(labels, mapping);
  const auto recovered = mapping_from_encoded(labels, encoded);
  EXPECT_EQ(decode_labels(encoded, recovered), labels);
  auto broken = encoded;
  broken.points[1] = broken.points[0];
  EXPECT_THROW(mapping_from_encoded(labels, broken), std::invalid_argument);
}

TEST(Assemble, PromptAndQueryShareMapping) {
  const auto bank = build_label_bank(8, 1);
  const auto q = gen_shape(ShapeKind::Chair, 256, 1);
  const auto p = gen_shape(ShapeKind::Chair, 256, 2);
  const auto s = assemble_icl_segmentation(q, p, bank, 3);
  EXPECT_NO_THROW(validate_sample(s));
  const auto from_prompt = mapping_from_encoded(s.prompt_labels, s.prompt_target);
  EXPECT_EQ(decode_labels(s.query_target, from_prompt), s.query_labels);
  EXPECT_THROW(assemble_icl_segmentation(q, p, build_label_bank(2, 1), 3), std::invalid_argument);
}

TEST(Corrupt, OperatorContracts) {
  const auto c = testutil::random_cloud(200, 4);
  CorruptionOp jitter{.kind = CorruptionKind::Jitter, .sigma = 0.0, .seed = 1};
  EXPECT_EQ(corrupt(c, jitter), c);
  jitter.sigma = 0.5;
  const auto j = corrupt(c, jitter);
  ASSERT_EQ(j.size(), c.size());
  for (const auto& p : j.points) EXPECT_LE(p.cwiseAbs().maxCoeff(), 1.0f);

  CorruptionOp drop{.kind = CorruptionKind::Drop, .drop_fraction = 1.0, .seed = 2};
  for (const auto& p : corrupt(c, drop).points) EXPECT_EQ(p, Point::Zero());
  drop.drop_fraction = 0.3;
  const auto d = corrupt(c, drop);
  std::size_t zeros = 0;
  for (std::size_t i = 0; i < c.size(); ++i) {
    if (d.points[i] == Point::Zero()) {
      ++zeros;
    } else {
      EXPECT_EQ(d.points[i], c.points[i]);
    }
  }
  EXPECT_EQ(zeros, 60u);

  const CorruptionOp local{.kind = CorruptionKind::LocalMask, .radius = 0.4, .seed = 3};
  const auto l = corrupt(c, local);
  ASSERT_EQ(l.size(), c.size());
  std::size_t changed = 0;
  for (std::size_t i = 0; i < c.size(); ++i) changed += l.points[i] != c.points[i];
  EXPECT_GT(changed, 0u);
  // Masked points form a ball: every masked point lies within 2 radii of every other.
  for (std::size_t i = 0; i < c.size(); ++i) {
    if (l.points[i] == c.points[i]) continue;
    EXPECT_EQ(l.points[i], Point::Zero());
    for (std::size_t k = 0; k < c.size(); ++k) {
      if (l.points[k] != c.points[k]) EXPECT_LE((c.points[i] - c.points[k]).norm(), 0.8f + 1e-5f);
    }
  }
}

TEST(Ice, SampleHasNoLabels) {
  const auto q = gen_shape(ShapeKind::Torus, 256, 1);
  const auto p = gen_shape(ShapeKind::Lamp, 256, 2);
  const CorruptionOp op{.kind = CorruptionKind::Jitter, .sigma = 0.0, .seed = 9};
  const auto s = make_ice_sample(q, p, op, 4);
  EXPECT_EQ(s.task.task, Task::IceRestoration);
  EXPECT_TRUE(s.prompt_labels.empty());
  EXPECT_TRUE(s.query_labels.empty());
  EXPECT_EQ(s.query_input.points, s.query_target.points);
  EXPECT_NO_THROW(validate_sample(s));
}
