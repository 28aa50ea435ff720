#include "pic/geometry.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <set>
#include <stdexcept>

#include "pic/rng.hpp"

namespace pic {
namespace {

double squared_distance(const Point& a, const Point& b) {
  const double dx = static_cast<double>(a.x()) - b.x();
  const double dy = static_cast<double>(a.y()) - b.y();
  const double dz = static_cast<double>(a.z()) - b.z();
  return dx * dx + dy * dy + dz * dz;
}

double directed_term(std::span<const Point> from, std::span<const Point> to) {
  double sum = 0.0;
  for (const auto& p : from) {
    double best = std::numeric_limits<double>::infinity();
    for (const auto& g : to) best = std::min(best, squared_distance(p, g));
    sum += best;
  }
  return sum / static_cast<double>(from.size());
}

}  // namespace

PointCloud normalize(const PointCloud& cloud) {
  if (cloud.points.empty()) throw std::invalid_argument("normalize: empty cloud");
  Eigen::Vector3d lo = cloud.points.front().cast<double>();
  Eigen::Vector3d hi = lo;
  for (const auto& p : cloud.points) {
    lo = lo.cwiseMin(p.cast<double>());
    hi = hi.cwiseMax(p.cast<double>());
  }
  const Eigen::Vector3d mid = 0.5 * (lo + hi);
  double extent = 0.0;
  for (const auto& p : cloud.points) extent = std::max(extent, (p.cast<double>() - mid).cwiseAbs().maxCoeff());
  const double scale = extent > 0.0 ? 1.0 / extent : 1.0;

  PointCloud out = cloud;
  for (auto& p : out.points) {
    Eigen::Vector3d q = (p.cast<double>() - mid) * scale;
    p = q.cwiseMax(-1.0).cwiseMin(1.0).cast<float>();
  }
  return out;
}

std::vector<std::size_t> farthest_point_sample_from(std::span<const Point> points,
                                                    std::size_t count, std::size_t start) {
  const std::size_t n = points.size();
  if (count > n) throw std::invalid_argument("farthest_point_sample: insufficient points");
  if (count == 0) return {};
  if (start >= n) throw std::invalid_argument("farthest_point_sample: start index out of range");

  std::vector<std::size_t> chosen;
  chosen.reserve(count);
  std::vector<double> min_dist(n, std::numeric_limits<double>::infinity());
  std::vector<char> taken(n, 0);
  std::size_t current = start;
  while (true) {
    chosen.push_back(current);
    taken[current] = 1;
    if (chosen.size() == count) break;
    std::size_t best = n;
    double best_dist = -1.0;
    for (std::size_t i = 0; i < n; ++i) {
      if (taken[i]) continue;
      min_dist[i] = std::min(min_dist[i], squared_distance(points[i], points[current]));
      if (min_dist[i] > best_dist) {
        best_dist = min_dist[i];
        best = i;
      }
    }
    current = best;
  }
  return chosen;
}

std::vector<std::size_t> farthest_point_sample(const PointCloud& cloud, std::size_t count,
                                               std::uint64_t seed) {
  if (cloud.points.empty()) throw std::invalid_argument("farthest_point_sample: empty cloud");
  if (count > cloud.size()) throw std::invalid_argument("farthest_point_sample: insufficient points");
  Rng rng(seed);
  const auto start = static_cast<std::size_t>(rng.index(cloud.size()));
  return farthest_point_sample_from(cloud.points, count, start);
}

std::vector<std::size_t> knn(std::span<const Point> points, const Point& center, std::size_t k) {
  const std::size_t n = points.size();
  if (k == 0 || k > n) throw std::invalid_argument("knn: k must be in [1, N]");
  std::vector<std::pair<double, std::size_t>> keyed(n);
  for (std::size_t i = 0; i < n; ++i) keyed[i] = {squared_distance(points[i], center), i};
  std::partial_sort(keyed.begin(), keyed.begin() + static_cast<std::ptrdiff_t>(k), keyed.end());
  std::vector<std::size_t> out(k);
  for (std::size_t i = 0; i < k; ++i) out[i] = keyed[i].second;
  return out;
}

std::vector<std::size_t> knn(const PointCloud& cloud, std::size_t center_index, std::size_t k) {
  if (center_index >= cloud.size()) throw std::invalid_argument("knn: center index out of range");
  return knn(cloud.points, cloud.points[center_index], k);
}

double chamfer_l2(std::span<const Point> pred, std::span<const Point> gt) {
  if (pred.empty() || gt.empty()) throw std::invalid_argument("chamfer_l2: empty cloud");
  return directed_term(pred, gt) + directed_term(gt, pred);
}

double chamfer_l2(const PointCloud& pred, const PointCloud& gt) {
  return chamfer_l2(std::span<const Point>(pred.points), std::span<const Point>(gt.points));
}

double smooth_l1(std::span<const Point> pred, std::span<const Point> gt, double beta) {
  if (pred.size() != gt.size()) throw std::invalid_argument("smooth_l1: length mismatch");
  if (pred.empty()) throw std::invalid_argument("smooth_l1: empty cloud");
  if (!(beta > 0.0)) throw std::invalid_argument("smooth_l1: beta must be positive");
  double sum = 0.0;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    for (int c = 0; c < 3; ++c) {
      const double r = std::abs(static_cast<double>(pred[i][c]) - gt[i][c]);
      sum += r < beta ? 0.5 * r * r / beta : r - 0.5 * beta;
    }
  }
  return sum / (3.0 * static_cast<double>(pred.size()));
}

double smooth_l1(const PointCloud& pred, const PointCloud& gt, double beta) {
  return smooth_l1(std::span<const Point>(pred.points), std::span<const Point>(gt.points), beta);
}

Eigen::Matrix3d rotation_matrix(const Eigen::Vector3d& axis, double angle) {
  const double norm = axis.norm();
  if (norm == 0.0) throw std::invalid_argument("rotate: zero axis");
  if (std::abs(norm - 1.0) > 1e-6) throw std::invalid_argument("rotate: axis must have unit norm");
  Eigen::Matrix3d k;
  k << 0, -axis.z(), axis.y(),  //
      axis.z(), 0, -axis.x(),   //
      -axis.y(), axis.x(), 0;
  return Eigen::Matrix3d::Identity() + std::sin(angle) * k + (1.0 - std::cos(angle)) * k * k;
}

PointCloud rotate(const PointCloud& cloud, const Eigen::Vector3d& axis, double angle) {
  const Eigen::Matrix3d r = rotation_matrix(axis, angle);
  PointCloud out = cloud;
  for (auto& p : out.points) p = (r * p.cast<double>()).cast<float>();
  return out;
}

double instance_miou(std::span<const Label> pred, std::span<const Label> gt,
                     std::span<const Label> parts) {
  if (pred.size() != gt.size()) throw std::invalid_argument("instance_miou: length mismatch");
  if (parts.empty()) throw std::invalid_argument("instance_miou: empty part set");
  double total = 0.0;
  for (const Label part : parts) {
    std::size_t inter = 0;
    std::size_t uni = 0;
    for (std::size_t i = 0; i < pred.size(); ++i) {
      const bool a = pred[i] == part;
      const bool b = gt[i] == part;
      inter += (a && b) ? 1 : 0;
      uni += (a || b) ? 1 : 0;
    }
    total += uni == 0 ? 1.0 : static_cast<double>(inter) / static_cast<double>(uni);
  }
  return 100.0 * total / static_cast<double>(parts.size());
}

}  // namespace pic
