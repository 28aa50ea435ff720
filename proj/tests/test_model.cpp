#include <gtest/gtest.h>

#include "grad_check.hpp"
#include "pic/model.hpp"
#include "pic/train.hpp"

using namespace pic;

TEST(ModelConfig, KeyValueRoundTrip) {
  ModelConfig c = ModelConfig::defaults(Variant::Cat);
  c.mask_ratio = 0.35;
  c.seed = 123456789012345ULL;
  EXPECT_EQ(ModelConfig::from_key_values(c.to_key_values()), c);
  EXPECT_EQ(c.target_position, TargetPosition::InputAligned);
  EXPECT_EQ(ModelConfig::defaults(Variant::Sep).target_position, TargetPosition::None);
  EXPECT_EQ(ModelConfig{}.mask_ratio, 0.7);
}

TEST(ModelConfig, ValidateRejectsBadSettings) {
  ModelConfig c;
  c.feature_dim = 30;  // not a multiple of 4 heads
  EXPECT_THROW(c.validate(), std::invalid_argument);
  c = ModelConfig{};
  c.merge_block = c.encoder_depth;
  EXPECT_THROW(c.validate(), std::invalid_argument);
  c = ModelConfig{};
  c.mask_ratio = 1.2;
  EXPECT_THROW(c.validate(), std::invalid_argument);
}

TEST(Params, ShapesAndGroups) {
  const ModelConfig c;
  const auto state = init_params<float>(c);
  const auto shapes = parameter_shapes(c);
  ASSERT_EQ(state.tensors.size(), shapes.size());
  std::size_t total = 0;
  for (std::size_t k = 0; k < shapes.size(); ++k) {
    EXPECT_EQ(state.tensors[k].name, shapes[k].first);
    EXPECT_EQ(state[k].rows(), shapes[k].second.first);
    EXPECT_EQ(state[k].cols(), shapes[k].second.second);
    total += static_cast<std::size_t>(state[k].size());
  }
  EXPECT_EQ(state.parameter_count(), total);
  EXPECT_EQ(state.find("head.w")->value.cols(), 3 * c.m);
  EXPECT_EQ(state.find("segment")->value.rows(), 4);
  EXPECT_EQ(group_of("enc0.qkv.w"), ParamGroup::Blocks);
  EXPECT_EQ(group_of("patch.fc1.w"), ParamGroup::PatchEmbed);
  EXPECT_EQ(group_of("mask_token"), ParamGroup::MaskToken);
  EXPECT_TRUE(state.all_finite());
  EXPECT_EQ(init_params<float>(c).tensors[3].value, state.tensors[3].value);
}

TEST(PatchEmbed, PermutationInvariant) {
  ModelConfig c;
  c.feature_dim = 16;
  c.heads = 2;
  c.m = 8;
  const auto state = init_params<double>(c);
  const auto cloud = testutil::random_cloud(16, 4);
  Matrix<double> pts(16, 3);
  for (int i = 0; i < 16; ++i) pts.row(i) = cloud.points[static_cast<std::size_t>(i)].cast<double>().transpose();
  Matrix<double> perm = pts;
  for (int i = 0; i < 8; ++i) perm.row(i) = pts.row(7 - i);
  Tape<double> tape(false);
  const auto params = bind_parameters(tape, state);
  const auto a = embed_patches<double>(tape, params, state.layout, tape.constant(pts), 8);
  const auto b = embed_patches<double>(tape, params, state.layout, tape.constant(perm), 8);
  EXPECT_EQ(tape.value(a), tape.value(b));
  EXPECT_EQ(tape.value(a).rows(), 2);
}

TEST(Forward, ShapesAndErrors) {
  auto f = testutil::grad_fixture(Variant::Sep, 3);
  Tape<double> tape(false);
  const auto params = bind_parameters(tape, f.state);
  const auto out = forward<double>(tape, params, f.state, f.seqs, f.mask);
  EXPECT_EQ(static_cast<std::size_t>(tape.value(out.prediction).rows()), f.mask.masked_count());
  EXPECT_EQ(tape.value(out.prediction).cols(), 24);
  for (const auto& p : out.positions) EXPECT_TRUE(f.mask.is_masked(p.segment, p.patch));

  MaskLayout bad = f.mask;
  bad.masked[static_cast<std::size_t>(Segment::QueryInput)][0] = 1;
  EXPECT_THROW(forward<double>(tape, params, f.state, f.seqs, bad), std::invalid_argument);
  MaskLayout none = inference_layout(4);
  none.masked[static_cast<std::size_t>(Segment::QueryTarget)].assign(4, 0);
  EXPECT_THROW(forward<double>(tape, params, f.state, f.seqs, none), std::invalid_argument);
}

TEST(Tape, BackwardWithoutGraphThrows) {
  Tape<double> idle(false);
  const auto v = idle.variable(Matrix<double>::Ones(1, 1));
  EXPECT_THROW(idle.backward(v), std::logic_error);
  Tape<double> tape;
  const auto w = tape.variable(Matrix<double>::Ones(1, 1));
  const auto y = tape.scale(w, 2.0);
  tape.backward(y);
  EXPECT_DOUBLE_EQ(tape.grad(w)(0, 0), 2.0);
  EXPECT_THROW(tape.backward(y), std::logic_error);
}

class GradientCheck : public ::testing::TestWithParam<std::tuple<Variant, LossMode>> {};

TEST_P(GradientCheck, MatchesCentralDifferences) {
  const auto [variant, mode] = GetParam();
  const auto f = testutil::grad_fixture(variant, 11);
  const auto errors = testutil::gradient_errors(f, mode, 1e-4, 6, 5);
  EXPECT_EQ(errors.size(), 6u);
  for (const auto& [group, e] : errors) {
    EXPECT_GT(e.checked, 0u);
    EXPECT_LT(e.max_rel, 1e-3) << group;
  }
}

INSTANTIATE_TEST_SUITE_P(AllVariants, GradientCheck,
                         ::testing::Combine(::testing::Values(Variant::Sep, Variant::Cat),
                                            ::testing::Values(LossMode::CD, LossMode::CDSmoothL1,
                                                              LossMode::SmoothL1)));

namespace {

// Forward output with every masked target patch (and centre) replaced.
Matrix<double> perturbed_prediction(const testutil::GradFixture& f, std::uint64_t seed, double scale) {
  SampleSequences seqs = f.seqs;
  Rng rng(seed);
  for (const Segment s : {Segment::PromptTarget, Segment::QueryTarget, Segment::PromptInput, Segment::QueryInput}) {
    auto& seq = seqs[s];
    for (std::size_t c = 0; c < seq.num_patches(); ++c) {
      if (!f.mask.is_masked(s, c)) continue;
      for (std::size_t j = 0; j < seq.m; ++j) {
        seq.points[c * seq.m + j] = Point(static_cast<float>(scale * rng.normal()),
                                          static_cast<float>(scale * rng.normal()),
                                          static_cast<float>(scale * rng.normal()));
      }
      seq.centers[c] = seq.points[c * seq.m];
    }
  }
  Tape<double> tape(false);
  const auto params = bind_parameters(tape, f.state);
  return tape.value(forward<double>(tape, params, f.state, seqs, f.mask).prediction);
}

}  // namespace

TEST(Leakage, MaskedContentNeverRead) {
  for (const Variant v : {Variant::Sep, Variant::Cat}) {
    for (std::uint64_t s = 0; s < 10; ++s) {
      const auto f = testutil::grad_fixture(v, s);
      Tape<double> tape(false);
      const auto params = bind_parameters(tape, f.state);
      const Matrix<double> base = tape.value(forward<double>(tape, params, f.state, f.seqs, f.mask).prediction);
      EXPECT_EQ(perturbed_prediction(f, s + 100, 1e3), base);
    }
  }
}

TEST(Leakage, VisibleContentIsRead) {
  const auto f = testutil::grad_fixture(Variant::Sep, 1);
  Tape<double> tape(false);
  const auto params = bind_parameters(tape, f.state);
  const Matrix<double> base = tape.value(forward<double>(tape, params, f.state, f.seqs, f.mask).prediction);
  SampleSequences seqs = f.seqs;
  seqs[Segment::QueryInput].points[0] += Point(0.5f, 0.0f, 0.0f);
  const Matrix<double> moved = tape.value(forward<double>(tape, params, f.state, seqs, f.mask).prediction);
  EXPECT_NE(moved, base);
}
