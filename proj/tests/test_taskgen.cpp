#include <gtest/gtest.h>

#include <numbers>

#include "pic/error.hpp"
#include "pic/io_util.hpp"
#include "pic/taskgen.hpp"
#include "test_util.hpp"

using namespace pic;

TEST(Shapes, DeterministicNormalizedAndLabeled) {
  for (const auto kind : all_shapes()) {
    const auto a = gen_shape(kind, 512, 9);
    const auto b = gen_shape(kind, 512, 9);
    EXPECT_EQ(a, b) << shape_name(kind);
    ASSERT_EQ(a.size(), 512u);
    ASSERT_EQ(a.labels.size(), 512u);
    EXPECT_EQ(a.category, kind);
    float max_abs = 0.0f;
    for (const auto& p : a.points) max_abs = std::max(max_abs, p.cwiseAbs().maxCoeff());
    EXPECT_LE(max_abs, 1.0f);
    EXPECT_NEAR(max_abs, 1.0f, 1e-5f);
    const auto parts = parts_of(kind);
    const std::set<Label> seen(a.labels.begin(), a.labels.end());
    EXPECT_EQ(seen, std::set<Label>(parts.begin(), parts.end())) << shape_name(kind);
    EXPECT_NE(gen_shape(kind, 512, 10).points, a.points);
  }
}

TEST(Shapes, PartRangesAreDisjoint) {
  std::set<Label> all;
  for (const auto kind : all_shapes()) {
    for (const Label p : parts_of(kind)) {
      EXPECT_TRUE(all.insert(p).second);
      EXPECT_EQ(category_of_part(p), kind);
    }
  }
  EXPECT_EQ(all.size(), static_cast<std::size_t>(kNumGlobalParts));
}

TEST(Names, RoundTrip) {
  for (const auto kind : all_shapes()) EXPECT_EQ(parse_shape(shape_name(kind)), kind);
  for (int t = 0; t <= 4; ++t) EXPECT_EQ(parse_task(task_name(static_cast<Task>(t))), static_cast<Task>(t));
  EXPECT_FALSE(parse_task("bogus"));
}

TEST(TaskKind, LevelRules) {
  EXPECT_NO_THROW(TaskKind::make(Task::Denoising, 3));
  EXPECT_THROW(TaskKind::make(Task::Denoising, 0), std::invalid_argument);
  EXPECT_THROW(TaskKind::make(Task::Registration, 6), std::invalid_argument);
  EXPECT_THROW(TaskKind::make(Task::Segmentation, 1), std::invalid_argument);
}

TEST(Counts, RoundHalfUp) {
  EXPECT_EQ(round_half_up_count(64, 0.7), 45u);
  EXPECT_EQ(round_half_up_count(128, 0.7), 90u);
  EXPECT_EQ(round_half_up_count(1024, 0.3), 307u);
  EXPECT_EQ(round_half_up_count(10, 0.25), 3u);
  EXPECT_EQ(round_half_up_count(10, 0.0), 0u);
  EXPECT_EQ(round_half_up_count(10, 1.0), 10u);
}

TEST(Reconstruction, DropsExpectedCount) {
  const auto cloud = gen_shape(ShapeKind::Chair, 1024, 1);
  for (int level = 1; level <= 5; ++level) {
    const auto pair = make_reconstruction_pair(cloud, level, 3);
    EXPECT_EQ(pair.target.points, cloud.points);
    std::size_t changed = 0;
    for (std::size_t i = 0; i < cloud.size(); ++i) {
      if (pair.input.points[i] != cloud.points[i]) {
        ++changed;
        EXPECT_EQ(pair.input.points[i], Point::Zero());
      }
    }
    const std::size_t dropped = round_half_up_count(1024, 1.0 - reconstruction_keep_ratio(level));
    EXPECT_LE(changed, dropped);
    EXPECT_GE(changed + 2, dropped);  // an original point may already sit at the origin
  }
}

TEST(Denoising, ReplacesExactFraction) {
  const auto cloud = gen_shape(ShapeKind::Lamp, 1000, 2);
  for (int level = 1; level <= 5; ++level) {
    const auto pair = make_denoising_pair(cloud, level, 8);
    std::size_t changed = 0;
    for (std::size_t i = 0; i < cloud.size(); ++i) {
      if (pair.input.points[i] != pair.target.points[i]) ++changed;
      EXPECT_LE(pair.input.points[i].cwiseAbs().maxCoeff(), 1.0f);
    }
    EXPECT_EQ(changed, round_half_up_count(1000, denoising_noise_ratio(level)));
  }
}

TEST(Registration, IsometryWithLevelAngle) {
  const auto cloud = gen_shape(ShapeKind::Table, 256, 4);
  for (int level = 1; level <= 5; ++level) {
    const Rotation r = draw_registration_rotation(level, 77);
    EXPECT_NEAR(r.axis.norm(), 1.0, 1e-12);
    EXPECT_DOUBLE_EQ(r.angle, registration_angle(level));
    const auto pair = make_registration_pair(cloud, r);
    EXPECT_EQ(pair.target.points, cloud.points);
    const Eigen::Matrix3f m = rotation_matrix(r.axis, r.angle).cast<float>();
    for (std::size_t i = 0; i < cloud.size(); ++i) {
      EXPECT_LT((pair.input.points[i] - m * cloud.points[i]).norm(), 1e-5f);
    }
  }
  EXPECT_NEAR(registration_angle(3), std::numbers::pi / 4.0, 1e-15);
}

TEST(Registration, DualOrientationFlipsSecondHalf) {
  const auto cloud = gen_shape(ShapeKind::Rocket, 100, 4);
  const auto pair = make_registration_pair(cloud, Rotation{}, true);
  for (std::size_t i = 0; i < 50; ++i) EXPECT_EQ(pair.target.points[i], cloud.points[i]);
  for (std::size_t i = 50; i < 100; ++i) {
    EXPECT_NEAR(pair.target.points[i].y(), -cloud.points[i].y(), 1e-6f);
    EXPECT_NEAR(pair.target.points[i].z(), -cloud.points[i].z(), 1e-6f);
  }
}

TEST(StaticMap, SeparatedAndConsistentAcrossSubsets) {
  const auto all = StaticLabelMap::all_parts();
  for (const auto& [a, pa] : all.table()) {
    for (const auto& [b, pb] : all.table()) {
      if (a != b) {
        EXPECT_GE((pa - pb).norm(), StaticLabelMap::kMinSeparation - 1e-6);
      }
    }
    EXPECT_LE(pa.cwiseAbs().maxCoeff(), 0.9f + 1e-6f);
    EXPECT_EQ(all.decode(pa), a);
  }
  const StaticLabelMap sub({5, 6, 7, 8});
  for (const Label p : sub.parts()) EXPECT_EQ(sub.at(p), all.at(p));
  EXPECT_THROW(sub.at(0), std::invalid_argument);
  EXPECT_THROW(StaticLabelMap({99}), std::invalid_argument);
}

TEST(Assemble, RegistrationPromptSharesRotation) {
  const auto q = gen_shape(ShapeKind::Chair, 300, 1);
  const auto p = gen_shape(ShapeKind::Lamp, 300, 2);
  const auto s = assemble_sample(TaskKind::make(Task::Registration, 4), q, p, 5);
  const Rotation r = draw_registration_rotation(4, derive_seed(5, 3));
  const Eigen::Matrix3f m = rotation_matrix(r.axis, r.angle).cast<float>();
  for (std::size_t i = 0; i < 300; ++i) {
    EXPECT_LT((s.query_input.points[i] - m * s.query_target.points[i]).norm(), 1e-5f);
    EXPECT_LT((s.prompt_input.points[i] - m * s.prompt_target.points[i]).norm(), 1e-5f);
  }
}

TEST(Assemble, SegmentationNeedsMapAndSameCategory) {
  const auto map = StaticLabelMap::all_parts();
  const auto chair = gen_shape(ShapeKind::Chair, 200, 1);
  const auto lamp = gen_shape(ShapeKind::Lamp, 200, 2);
  AssembleOptions opt{&map, false};
  EXPECT_THROW(assemble_sample(TaskKind::make(Task::Segmentation), chair, lamp, 1, opt), std::invalid_argument);
  EXPECT_THROW(assemble_sample(TaskKind::make(Task::Segmentation), chair, chair, 1), std::invalid_argument);
  const auto s = assemble_sample(TaskKind::make(Task::Segmentation), chair, gen_shape(ShapeKind::Chair, 200, 3), 1, opt);
  for (std::size_t i = 0; i < 200; ++i) EXPECT_EQ(s.query_target.points[i], map.at(s.query_labels[i]));
  EXPECT_EQ(s.query_input.points, chair.points);
  EXPECT_TRUE(s.query_input.labels.empty());
}

TEST(Assemble, LengthMismatchThrows) {
  EXPECT_THROW(assemble_sample(TaskKind::make(Task::Denoising, 1), gen_shape(ShapeKind::Cube, 100, 1),
                               gen_shape(ShapeKind::Cube, 120, 1), 1),
               std::invalid_argument);
}

namespace {

std::vector<InContextSample> small_dataset() {
  const auto map = StaticLabelMap::all_parts();
  AssembleOptions opt{&map, false};
  std::vector<InContextSample> out;
  out.push_back(assemble_sample(TaskKind::make(Task::Reconstruction, 2), gen_shape(ShapeKind::Sphere, 128, 1),
                                gen_shape(ShapeKind::Cube, 128, 2), 1));
  out.push_back(assemble_sample(TaskKind::make(Task::Registration, 5), gen_shape(ShapeKind::Torus, 128, 3),
                                gen_shape(ShapeKind::Chair, 128, 4), 2));
  out.push_back(assemble_sample(TaskKind::make(Task::Segmentation), gen_shape(ShapeKind::Rocket, 128, 5),
                                gen_shape(ShapeKind::Rocket, 128, 6), 3, opt));
  return out;
}

}  // namespace

TEST(DatasetIo, RoundTripAndManifest) {
  const auto dir = testutil::temp_dir("dataset_io");
  const auto data = small_dataset();
  write_dataset(data, dir / "d.pic", {{"seed", "1"}});
  EXPECT_EQ(read_dataset(dir / "d.pic"), data);
  const auto m = read_manifest(dir / "d.pic");
  EXPECT_EQ(m.total, 3u);
  EXPECT_EQ(m.counts.at("task.registration.L5"), 1u);
  EXPECT_EQ(m.counts.at("task.segmentation"), 1u);
  EXPECT_EQ(m.extra.at("seed"), "1");
}

TEST(DatasetIo, EmptyDatasetIsValid) {
  const auto bytes = encode_dataset({});
  EXPECT_TRUE(decode_dataset(bytes).empty());
}

TEST(DatasetIo, TruncationReportsOffset) {
  const auto bytes = encode_dataset(small_dataset());
  for (const std::size_t cut : {std::size_t{3}, std::size_t{9}, bytes.size() / 2, bytes.size() - 1}) {
    std::vector<std::uint8_t> part(bytes.begin(), bytes.begin() + static_cast<long>(cut));
    try {
      decode_dataset(part);
      FAIL() << "no error for cut " << cut;
    } catch (const ParseError& e) {
      EXPECT_LE(e.offset(), cut);
      EXPECT_NE(std::string(e.what()).find("offset"), std::string::npos);
    }
  }
}

TEST(DatasetIo, BadMagicAndTrailingBytes) {
  auto bytes = encode_dataset(small_dataset());
  auto bad = bytes;
  bad[0] = 'X';
  EXPECT_THROW(decode_dataset(bad), ParseError);
  bytes.push_back(0);
  EXPECT_THROW(decode_dataset(bytes), ParseError);
}

TEST(IoUtil, GitBlobHash) {
  // `git hash-object` of an empty file and of "hello\n".
  EXPECT_EQ(content_hash({}), "e69de29bb2d1d6434b8b29ae775ad8c2e48c5391");
  const std::string hello = "hello\n";
  EXPECT_EQ(content_hash(std::vector<std::uint8_t>(hello.begin(), hello.end())),
            "ce013625030ba8dba906f756967f9e9ca394464a");
}

TEST(IoUtil, KeyValues) {
  const auto kv = parse_key_values("# c\n a = 1\n\nb=x=y\n", "t");
  ASSERT_EQ(kv.size(), 2u);
  EXPECT_EQ(kv[0], (std::pair<std::string, std::string>{"a", "1"}));
  EXPECT_EQ(kv[1].second, "x=y");
  EXPECT_THROW(parse_key_values("novalue\n", "t"), Error);
}
