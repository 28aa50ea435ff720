#include <array>
#include <cmath>
#include <numbers>
#include <numeric>
#include <stdexcept>

#include <Eigen/Geometry>

#include "pic/rng.hpp"
#include "pic/taskgen.hpp"

namespace pic {
namespace {

using Vec = Eigen::Vector3d;
constexpr double kPi = std::numbers::pi;

struct Sampler {
  Rng& rng;
  std::vector<Point>& out;

  void push(const Vec& v) { out.push_back(v.cast<float>()); }

  void box(const Vec& center, const Vec& half, std::size_t count) {
    const std::array<double, 3> face_area = {half.y() * half.z(), half.x() * half.z(),
                                             half.x() * half.y()};
    const double total = 2.0 * (face_area[0] + face_area[1] + face_area[2]);
    for (std::size_t i = 0; i < count; ++i) {
      double pick = rng.uniform() * total;
      int axis = 0;
      while (axis < 2 && pick >= 2.0 * face_area[axis]) {
        pick -= 2.0 * face_area[axis];
        ++axis;
      }
      Vec p(rng.uniform(-1, 1), rng.uniform(-1, 1), rng.uniform(-1, 1));
      p[axis] = pick < face_area[axis] ? -1.0 : 1.0;
      push(center + p.cwiseProduct(half));
    }
  }

  // Surface of a truncated cone along +z starting at `base`, caps included
  // where the radius is non-zero.
  void frustum(const Vec& base, double r_bottom, double r_top, double height, std::size_t count,
               bool caps = true) {
    const double slant = std::hypot(height, r_bottom - r_top);
    const double side = kPi * (r_bottom + r_top) * slant;
    const double cap_bottom = caps ? kPi * r_bottom * r_bottom : 0.0;
    const double cap_top = caps ? kPi * r_top * r_top : 0.0;
    const double total = side + cap_bottom + cap_top;
    const double r_max = std::max(r_bottom, r_top);
    for (std::size_t i = 0; i < count; ++i) {
      const double pick = rng.uniform() * total;
      const double theta = rng.uniform(0.0, 2.0 * kPi);
      if (pick < side) {
        double t = rng.uniform();
        double r = r_bottom + (r_top - r_bottom) * t;
        while (rng.uniform() * r_max > r) {
          t = rng.uniform();
          r = r_bottom + (r_top - r_bottom) * t;
        }
        push(base + Vec(r * std::cos(theta), r * std::sin(theta), height * t));
      } else {
        const bool bottom = pick < side + cap_bottom;
        const double r = (bottom ? r_bottom : r_top) * std::sqrt(rng.uniform());
        push(base + Vec(r * std::cos(theta), r * std::sin(theta), bottom ? 0.0 : height));
      }
    }
  }

  void sphere(std::size_t count) {
    for (std::size_t i = 0; i < count; ++i) {
      Vec v(rng.normal(), rng.normal(), rng.normal());
      while (v.norm() < 1e-12) v = Vec(rng.normal(), rng.normal(), rng.normal());
      push(v.normalized());
    }
  }

  void torus(double major, double minor, std::size_t count) {
    for (std::size_t i = 0; i < count; ++i) {
      double u = rng.uniform(0.0, 2.0 * kPi);
      double v = rng.uniform(0.0, 2.0 * kPi);
      // Area element is proportional to (major + minor cos v).
      while (rng.uniform() * (major + minor) > major + minor * std::cos(v)) {
        v = rng.uniform(0.0, 2.0 * kPi);
      }
      const double ring = major + minor * std::cos(v);
      push(Vec(ring * std::cos(u), ring * std::sin(u), minor * std::sin(v)));
    }
  }
};

// Splits n points over parts by fraction, giving every part at least
// min(16, n / parts) points.
std::vector<std::size_t> allocate(std::size_t n, const std::vector<double>& fractions) {
  const std::size_t parts = fractions.size();
  if (n < parts) throw std::invalid_argument("gen_shape: fewer points than parts");
  const std::size_t floor_count = std::min<std::size_t>(16, n / parts);
  std::vector<std::size_t> counts(parts);
  std::size_t used = 0;
  for (std::size_t k = 0; k + 1 < parts; ++k) {
    counts[k] = std::max(floor_count, static_cast<std::size_t>(std::llround(fractions[k] * static_cast<double>(n))));
    used += counts[k];
  }
  if (used + floor_count > n) throw std::invalid_argument("gen_shape: point budget too small");
  counts[parts - 1] = n - used;
  return counts;
}

struct Jitter {
  Rng& rng;
  double operator()(double value) { return value * rng.uniform(0.85, 1.15); }
};

}  // namespace

std::string_view shape_name(ShapeKind kind) {
  switch (kind) {
    case ShapeKind::Sphere: return "sphere";
    case ShapeKind::Cube: return "cube";
    case ShapeKind::Cylinder: return "cylinder";
    case ShapeKind::Torus: return "torus";
    case ShapeKind::Lamp: return "lamp";
    case ShapeKind::Table: return "table";
    case ShapeKind::Chair: return "chair";
    case ShapeKind::Rocket: return "rocket";
  }
  return "unknown";
}

std::optional<ShapeKind> parse_shape(std::string_view name) {
  for (const auto kind : all_shapes()) {
    if (shape_name(kind) == name) return kind;
  }
  return std::nullopt;
}

std::vector<ShapeKind> all_shapes() {
  return {ShapeKind::Sphere, ShapeKind::Cube,  ShapeKind::Cylinder, ShapeKind::Torus,
          ShapeKind::Lamp,   ShapeKind::Table, ShapeKind::Chair,    ShapeKind::Rocket};
}

std::vector<ShapeKind> composite_shapes() {
  return {ShapeKind::Lamp, ShapeKind::Table, ShapeKind::Chair, ShapeKind::Rocket};
}

std::vector<Label> parts_of(ShapeKind kind) {
  switch (kind) {
    case ShapeKind::Lamp: return {0, 1, 2};
    case ShapeKind::Table: return {3, 4};
    case ShapeKind::Chair: return {5, 6, 7, 8};
    case ShapeKind::Rocket: return {9, 10, 11};
    case ShapeKind::Sphere: return {12};
    case ShapeKind::Cube: return {13};
    case ShapeKind::Cylinder: return {14};
    case ShapeKind::Torus: return {15};
  }
  throw std::invalid_argument("parts_of: unknown shape kind");
}

ShapeKind category_of_part(Label part) {
  for (const auto kind : all_shapes()) {
    for (const Label p : parts_of(kind)) {
      if (p == part) return kind;
    }
  }
  throw std::invalid_argument("category_of_part: unknown part id " + std::to_string(part));
}

PointCloud gen_shape(ShapeKind kind, std::size_t n_points, std::uint64_t seed) {
  if (n_points == 0) throw std::invalid_argument("gen_shape: n_points must be positive");
  if (static_cast<unsigned>(kind) > static_cast<unsigned>(ShapeKind::Rocket)) {
    throw std::invalid_argument("gen_shape: unknown shape kind");
  }
  Rng rng(derive_seed(seed, 0x5A4E + static_cast<std::uint64_t>(kind)));
  Jitter jit{rng};
  PointCloud cloud;
  cloud.category = kind;
  cloud.points.reserve(n_points);
  Sampler s{rng, cloud.points};
  const std::vector<Label> parts = parts_of(kind);

  std::vector<std::size_t> counts;
  switch (kind) {
    case ShapeKind::Sphere:
      counts = {n_points};
      s.sphere(n_points);
      break;
    case ShapeKind::Cube:
      counts = {n_points};
      s.box(Vec::Zero(), Vec(jit(1.0), jit(1.0), jit(1.0)), n_points);
      break;
    case ShapeKind::Cylinder: {
      counts = {n_points};
      const double h = jit(2.0);
      s.frustum(Vec(0, 0, -h / 2), jit(0.6), jit(0.6), h, n_points);
      break;
    }
    case ShapeKind::Torus:
      counts = {n_points};
      s.torus(jit(0.7), jit(0.3), n_points);
      break;
    case ShapeKind::Lamp: {
      counts = allocate(n_points, {0.25, 0.2, 0.55});
      const double base_h = jit(0.1);
      const double pole_h = jit(1.2);
      s.frustum(Vec::Zero(), jit(0.5), jit(0.45), base_h, counts[0]);
      s.frustum(Vec(0, 0, base_h), jit(0.05), jit(0.05), pole_h, counts[1], false);
      s.frustum(Vec(0, 0, base_h + pole_h * 0.85), jit(0.65), jit(0.3), jit(0.55), counts[2], false);
      break;
    }
    case ShapeKind::Table: {
      counts = allocate(n_points, {0.55, 0.45});
      const double hx = jit(0.9), hy = jit(0.6), leg_h = jit(0.8), top_t = jit(0.05), leg_w = jit(0.05);
      s.box(Vec(0, 0, leg_h + top_t), Vec(hx, hy, top_t), counts[0]);
      std::array<std::size_t, 4> per_leg{};
      for (std::size_t k = 0; k < 4; ++k) per_leg[k] = counts[1] / 4 + (k < counts[1] % 4 ? 1 : 0);
      const double ox = hx - 2 * leg_w, oy = hy - 2 * leg_w;
      const std::array<Vec, 4> corners = {Vec(ox, oy, 0), Vec(-ox, oy, 0), Vec(ox, -oy, 0), Vec(-ox, -oy, 0)};
      for (std::size_t k = 0; k < 4; ++k) {
        s.box(corners[k] + Vec(0, 0, leg_h / 2), Vec(leg_w, leg_w, leg_h / 2), per_leg[k]);
      }
      break;
    }
    case ShapeKind::Chair: {
      counts = allocate(n_points, {0.3, 0.3, 0.2, 0.2});
      const double w = jit(0.45), seat_z = jit(0.5), back_h = jit(0.5), leg_w = jit(0.04);
      s.box(Vec(0, 0, seat_z), Vec(w, w, 0.05), counts[0]);
      s.box(Vec(0, -w, seat_z + back_h), Vec(w, 0.05, back_h), counts[1]);
      const double ox = w - leg_w;
      const std::array<Vec, 4> corners = {Vec(ox, ox, 0), Vec(-ox, ox, 0), Vec(ox, -ox, 0), Vec(-ox, -ox, 0)};
      for (std::size_t k = 0; k < 4; ++k) {
        const std::size_t c = counts[2] / 4 + (k < counts[2] % 4 ? 1 : 0);
        s.box(corners[k] + Vec(0, 0, seat_z / 2), Vec(leg_w, leg_w, seat_z / 2), c);
      }
      const double arm_z = seat_z + jit(0.3);
      s.box(Vec(w, 0, arm_z), Vec(0.04, w * 0.9, 0.03), counts[3] / 2);
      s.box(Vec(-w, 0, arm_z), Vec(0.04, w * 0.9, 0.03), counts[3] - counts[3] / 2);
      break;
    }
    case ShapeKind::Rocket: {
      counts = allocate(n_points, {0.55, 0.25, 0.2});
      const double r = jit(0.25), body_h = jit(1.4);
      s.frustum(Vec::Zero(), r, r, body_h, counts[0], false);
      s.frustum(Vec(0, 0, body_h), r, 0.0, jit(0.5), counts[1], false);
      const double fin_len = jit(0.3);
      for (std::size_t k = 0; k < 3; ++k) {
        const std::size_t c = counts[2] / 3 + (k < counts[2] % 3 ? 1 : 0);
        const double a = 2.0 * kPi * static_cast<double>(k) / 3.0;
        std::vector<Point> fin;
        Sampler fs{rng, fin};
        fs.box(Vec(r + fin_len / 2, 0, 0.2), Vec(fin_len / 2, 0.02, 0.2), c);
        const Eigen::Matrix3d rot = Eigen::AngleAxisd(a, Vec::UnitZ()).toRotationMatrix();
        for (const auto& p : fin) s.push(rot * p.cast<double>());
      }
      break;
    }
  }

  cloud.labels.reserve(n_points);
  for (std::size_t k = 0; k < counts.size(); ++k) cloud.labels.insert(cloud.labels.end(), counts[k], parts[k]);

  // Shuffle so that part membership is not encoded in point order.
  std::vector<std::size_t> order(n_points);
  std::iota(order.begin(), order.end(), 0);
  rng.shuffle(order.begin(), order.end());
  PointCloud shuffled;
  shuffled.category = kind;
  shuffled.points.reserve(n_points);
  shuffled.labels.reserve(n_points);
  for (const auto i : order) {
    shuffled.points.push_back(cloud.points[i]);
    shuffled.labels.push_back(cloud.labels[i]);
  }
  return normalize(shuffled);
}

}  // namespace pic
