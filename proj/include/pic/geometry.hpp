#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <vector>

#include <Eigen/Core>

namespace pic {

using Point = Eigen::Vector3f;
using Label = std::uint16_t;

/// Shape families produced by the synthetic generator. Stored as a tag on
/// point clouds so prompt selection can match categories.
enum class ShapeKind : std::uint8_t {
  Sphere = 0,
  Cube,
  Cylinder,
  Torus,
  Lamp,
  Table,
  Chair,
  Rocket,
};

struct PointCloud {
  std::vector<Point> points;
  /// Per-point part identifiers; empty when the cloud is unlabeled.
  std::vector<Label> labels;
  std::optional<ShapeKind> category;

  std::size_t size() const noexcept { return points.size(); }
  bool has_labels() const noexcept { return !labels.empty(); }

  friend bool operator==(const PointCloud&, const PointCloud&) = default;
};

/// Evaluation figures: Chamfer distance scaled by 1000 and mIoU in percent.
struct Metric {
  double chamfer_x1000 = 0.0;
  double miou_percent = 0.0;
};

/// Centers the cloud at its bounding-box midpoint and scales it uniformly so
/// the largest absolute coordinate is 1. A cloud collapsed to a single
/// location uses scale 1.
PointCloud normalize(const PointCloud& cloud);

/// Farthest point sampling. The first index is drawn uniformly from `seed`.
/// Ties are broken by the smallest index.
std::vector<std::size_t> farthest_point_sample(const PointCloud& cloud, std::size_t count,
                                               std::uint64_t seed);

/// Same as above with an explicit first index.
std::vector<std::size_t> farthest_point_sample_from(std::span<const Point> points,
                                                    std::size_t count, std::size_t start);

/// k nearest neighbours of points[center], sorted by (squared distance, index).
std::vector<std::size_t> knn(std::span<const Point> points, const Point& center, std::size_t k);
std::vector<std::size_t> knn(const PointCloud& cloud, std::size_t center_index, std::size_t k);

/// Symmetric l2 Chamfer distance with squared terms:
/// mean_p min_g |p-g|^2 + mean_g min_p |g-p|^2.
double chamfer_l2(std::span<const Point> pred, std::span<const Point> gt);
double chamfer_l2(const PointCloud& pred, const PointCloud& gt);

/// Mean Smooth-l1 over all 3N index-aligned coordinate residuals.
double smooth_l1(std::span<const Point> pred, std::span<const Point> gt, double beta = 1.0);
double smooth_l1(const PointCloud& pred, const PointCloud& gt, double beta = 1.0);

/// Rodrigues rotation about a unit axis. Labels and category are kept.
PointCloud rotate(const PointCloud& cloud, const Eigen::Vector3d& axis, double angle);
Eigen::Matrix3d rotation_matrix(const Eigen::Vector3d& axis, double angle);

/// Mean per-part IoU in percent. A part absent from both sequences scores 1.
double instance_miou(std::span<const Label> pred, std::span<const Label> gt,
                     std::span<const Label> parts);

}  // namespace pic
