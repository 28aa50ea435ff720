#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "pic/geometry.hpp"

namespace pic {

inline constexpr std::size_t kDefaultPoints = 1024;
inline constexpr int kNumLevels = 5;

enum class Task : std::uint8_t {
  Reconstruction = 0,
  Denoising = 1,
  Registration = 2,
  Segmentation = 3,
  IceRestoration = 4,
};

/// A task plus its corruption level. Level is 1..5 for the three corruption
/// tasks and 0 otherwise.
struct TaskKind {
  Task task = Task::Reconstruction;
  int level = 0;

  static TaskKind make(Task task, int level = 0);
  bool has_level() const noexcept;
  friend bool operator==(const TaskKind&, const TaskKind&) = default;
};

std::string_view task_name(Task task);
std::optional<Task> parse_task(std::string_view name);

std::string_view shape_name(ShapeKind kind);
std::optional<ShapeKind> parse_shape(std::string_view name);
std::vector<ShapeKind> all_shapes();
std::vector<ShapeKind> composite_shapes();

/// Global part identifiers owned by a shape family. Every family owns a
/// disjoint contiguous range; the single-part primitives own one id each.
std::vector<Label> parts_of(ShapeKind kind);
ShapeKind category_of_part(Label part);
inline constexpr Label kNumGlobalParts = 16;

/// Deterministic procedural shape, normalized to [-1, 1]^3, with per-point
/// part labels.
PointCloud gen_shape(ShapeKind kind, std::size_t n_points, std::uint64_t seed);

double reconstruction_keep_ratio(int level);
double denoising_noise_ratio(int level);
double registration_angle(int level);

/// floor(n * ratio + 1/2) with a small guard against representation error.
std::size_t round_half_up_count(std::size_t n, double ratio);

struct CloudPair {
  PointCloud input;
  PointCloud target;
};

CloudPair make_reconstruction_pair(const PointCloud& cloud, int level, std::uint64_t seed);
CloudPair make_denoising_pair(const PointCloud& cloud, int level, std::uint64_t seed);

struct Rotation {
  Eigen::Vector3d axis = Eigen::Vector3d::UnitZ();
  double angle = 0.0;
};

/// Axis uniform on the sphere, angle from the level table.
Rotation draw_registration_rotation(int level, std::uint64_t seed);

/// With `dual_orientation`, the second half of the target is flipped
/// upside-down (pi about the x axis).
CloudPair make_registration_pair(const PointCloud& cloud, const Rotation& rotation,
                                 bool dual_orientation = false);
CloudPair make_registration_pair(const PointCloud& cloud, int level, std::uint64_t seed,
                                 bool dual_orientation = false);

/// Fixed part -> point table used by the static-label segmentation format.
/// Points come from a Halton lattice in [-1,1]^3 thinned to a minimum
/// separation of 0.2; part id k always maps to the k-th lattice point, so
/// maps built over different part subsets agree on shared parts.
class StaticLabelMap {
 public:
  static constexpr double kMinSeparation = 0.2;

  explicit StaticLabelMap(std::vector<Label> parts);
  static StaticLabelMap all_parts();

  bool contains(Label part) const noexcept;
  const Point& at(Label part) const;
  const std::vector<Label>& parts() const noexcept { return parts_; }
  const std::map<Label, Point>& table() const noexcept { return table_; }

  /// Nearest label point, ties to the smaller part id.
  Label decode(const Point& p) const;

 private:
  std::vector<Label> parts_;
  std::map<Label, Point> table_;
};

CloudPair make_segmentation_pair_static(const PointCloud& cloud, const StaticLabelMap& map);

/// One in-context example: a prompt pair and a query pair for the same task.
/// Clouds hold coordinates only; part labels of the source shapes live in
/// the sample so that targets can be re-encoded and scored.
struct InContextSample {
  TaskKind task;
  PointCloud prompt_input;
  PointCloud prompt_target;
  PointCloud query_input;
  PointCloud query_target;
  std::vector<Label> prompt_labels;
  std::vector<Label> query_labels;
  std::optional<ShapeKind> prompt_category;
  std::optional<ShapeKind> query_category;
  std::uint64_t seed = 0;

  std::size_t size() const noexcept { return query_input.size(); }
  friend bool operator==(const InContextSample&, const InContextSample&) = default;
};

/// Throws std::invalid_argument when any InContextSample invariant fails.
void validate_sample(const InContextSample& sample);

struct AssembleOptions {
  const StaticLabelMap* static_map = nullptr;
  bool dual_orientation = false;
};

/// Builds both pairs with the task's constructor. Registration prompts reuse
/// the query's rotation. Segmentation needs `options.static_map` and two
/// clouds of the same category; PIC++ label-bank samples are assembled by
/// the icl module instead.
InContextSample assemble_sample(TaskKind task, const PointCloud& query_cloud,
                                const PointCloud& prompt_cloud, std::uint64_t seed,
                                const AssembleOptions& options = {});

struct DatasetManifest {
  std::size_t total = 0;
  std::map<std::string, std::size_t> counts;
  std::map<std::string, std::string> extra;
};

DatasetManifest summarize(const std::vector<InContextSample>& samples);

std::filesystem::path manifest_path(const std::filesystem::path& dataset);

/// Binary dataset ("PIC1") plus a key=value manifest sidecar.
void write_dataset(const std::vector<InContextSample>& samples, const std::filesystem::path& path,
                   const std::map<std::string, std::string>& extra = {});
std::vector<InContextSample> read_dataset(const std::filesystem::path& path);
std::vector<InContextSample> decode_dataset(const std::vector<std::uint8_t>& bytes);
std::vector<std::uint8_t> encode_dataset(const std::vector<InContextSample>& samples);
DatasetManifest read_manifest(const std::filesystem::path& dataset);

}  // namespace pic
