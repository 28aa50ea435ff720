#include <algorithm>
#include <array>
#include <cmath>
#include <numbers>
#include <numeric>
#include <set>
#include <stdexcept>

#include "pic/rng.hpp"
#include "pic/taskgen.hpp"

namespace pic {
namespace {

constexpr std::array<double, kNumLevels> kKeepRatio = {0.03, 0.06, 0.12, 0.25, 0.50};
constexpr std::array<double, kNumLevels> kNoiseRatio = {0.10, 0.20, 0.30, 0.40, 0.50};
constexpr std::array<double, kNumLevels> kAngleDegrees = {15.0, 30.0, 45.0, 60.0, 90.0};

void check_level(int level) {
  if (level < 1 || level > kNumLevels) {
    throw std::invalid_argument("corruption level must be in 1..5, got " + std::to_string(level));
  }
}

// The first `count` entries of a seeded permutation of [0, n).
std::vector<std::size_t> choose_subset(std::size_t n, std::size_t count, Rng& rng) {
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), 0);
  for (std::size_t i = 0; i < count; ++i) {
    const auto j = i + static_cast<std::size_t>(rng.index(n - i));
    std::swap(idx[i], idx[j]);
  }
  idx.resize(count);
  return idx;
}

PointCloud coordinates_only(const PointCloud& cloud) {
  PointCloud out;
  out.points = cloud.points;
  return out;
}

double halton(std::uint64_t index, std::uint64_t base) {
  double f = 1.0;
  double r = 0.0;
  while (index > 0) {
    f /= static_cast<double>(base);
    r += f * static_cast<double>(index % base);
    index /= base;
  }
  return r;
}

const std::vector<Point>& lattice() {
  static const std::vector<Point> points = [] {
    std::vector<Point> out;
    for (std::uint64_t i = 1; out.size() < kNumGlobalParts; ++i) {
      const Point p(static_cast<float>(1.8 * halton(i, 2) - 0.9), static_cast<float>(1.8 * halton(i, 3) - 0.9),
                    static_cast<float>(1.8 * halton(i, 5) - 0.9));
      const bool far = std::all_of(out.begin(), out.end(), [&](const Point& q) {
        return (p - q).norm() >= StaticLabelMap::kMinSeparation;
      });
      if (far) out.push_back(p);
    }
    return out;
  }();
  return points;
}

}  // namespace

TaskKind TaskKind::make(Task task, int level) {
  TaskKind kind{task, level};
  if (kind.has_level()) {
    check_level(level);
  } else if (level != 0) {
    throw std::invalid_argument("task " + std::string(task_name(task)) + " takes no level");
  }
  return kind;
}

bool TaskKind::has_level() const noexcept {
  return task == Task::Reconstruction || task == Task::Denoising || task == Task::Registration;
}

std::string_view task_name(Task task) {
  switch (task) {
    case Task::Reconstruction: return "reconstruction";
    case Task::Denoising: return "denoising";
    case Task::Registration: return "registration";
    case Task::Segmentation: return "segmentation";
    case Task::IceRestoration: return "ice";
  }
  return "unknown";
}

std::optional<Task> parse_task(std::string_view name) {
  for (int t = 0; t <= static_cast<int>(Task::IceRestoration); ++t) {
    if (task_name(static_cast<Task>(t)) == name) return static_cast<Task>(t);
  }
  return std::nullopt;
}

double reconstruction_keep_ratio(int level) {
  check_level(level);
  return kKeepRatio[static_cast<std::size_t>(level - 1)];
}

double denoising_noise_ratio(int level) {
  check_level(level);
  return kNoiseRatio[static_cast<std::size_t>(level - 1)];
}

double registration_angle(int level) {
  check_level(level);
  return kAngleDegrees[static_cast<std::size_t>(level - 1)] * std::numbers::pi / 180.0;
}

std::size_t round_half_up_count(std::size_t n, double ratio) {
  return static_cast<std::size_t>(std::floor(static_cast<double>(n) * ratio + 0.5 + 1e-9));
}

CloudPair make_reconstruction_pair(const PointCloud& cloud, int level, std::uint64_t seed) {
  const double keep = reconstruction_keep_ratio(level);
  const std::size_t n = cloud.size();
  const std::size_t dropped = round_half_up_count(n, 1.0 - keep);
  Rng rng(seed);
  CloudPair pair{cloud, cloud};
  for (const auto i : choose_subset(n, dropped, rng)) pair.input.points[i] = Point::Zero();
  return pair;
}

CloudPair make_denoising_pair(const PointCloud& cloud, int level, std::uint64_t seed) {
  const double ratio = denoising_noise_ratio(level);
  const std::size_t n = cloud.size();
  Rng rng(seed);
  CloudPair pair{cloud, cloud};
  for (const auto i : choose_subset(n, round_half_up_count(n, ratio), rng)) {
    Point& p = pair.input.points[i];
    for (int c = 0; c < 3; ++c) p[c] = static_cast<float>(std::clamp(rng.normal(), -1.0, 1.0));
  }
  return pair;
}

Rotation draw_registration_rotation(int level, std::uint64_t seed) {
  Rng rng(seed);
  Eigen::Vector3d axis(rng.normal(), rng.normal(), rng.normal());
  while (axis.norm() < 1e-9) axis = Eigen::Vector3d(rng.normal(), rng.normal(), rng.normal());
  return {axis.normalized(), registration_angle(level)};
}

CloudPair make_registration_pair(const PointCloud& cloud, const Rotation& rotation, bool dual_orientation) {
  CloudPair pair{rotate(cloud, rotation.axis, rotation.angle), cloud};
  if (dual_orientation) {
    const PointCloud flipped = rotate(cloud, Eigen::Vector3d::UnitX(), std::numbers::pi);
    for (std::size_t i = cloud.size() / 2; i < cloud.size(); ++i) pair.target.points[i] = flipped.points[i];
  }
  return pair;
}

CloudPair make_registration_pair(const PointCloud& cloud, int level, std::uint64_t seed, bool dual_orientation) {
  return make_registration_pair(cloud, draw_registration_rotation(level, seed), dual_orientation);
}

StaticLabelMap::StaticLabelMap(std::vector<Label> parts) : parts_(std::move(parts)) {
  std::sort(parts_.begin(), parts_.end());
  parts_.erase(std::unique(parts_.begin(), parts_.end()), parts_.end());
  if (parts_.empty()) throw std::invalid_argument("StaticLabelMap: empty part list");
  for (const Label p : parts_) {
    if (p >= kNumGlobalParts) throw std::invalid_argument("StaticLabelMap: part id out of range");
    table_.emplace(p, lattice()[p]);
  }
}

StaticLabelMap StaticLabelMap::all_parts() {
  std::vector<Label> parts(kNumGlobalParts);
  std::iota(parts.begin(), parts.end(), Label{0});
  return StaticLabelMap(std::move(parts));
}

bool StaticLabelMap::contains(Label part) const noexcept { return table_.contains(part); }

const Point& StaticLabelMap::at(Label part) const {
  const auto it = table_.find(part);
  if (it == table_.end()) {
    throw std::invalid_argument("static label map has no point for part " + std::to_string(part));
  }
  return it->second;
}

Label StaticLabelMap::decode(const Point& p) const {
  Label best = parts_.front();
  double best_d = std::numeric_limits<double>::infinity();
  for (const auto& [part, q] : table_) {
    const double d = (p.cast<double>() - q.cast<double>()).squaredNorm();
    if (d < best_d) {
      best_d = d;
      best = part;
    }
  }
  return best;
}

CloudPair make_segmentation_pair_static(const PointCloud& cloud, const StaticLabelMap& map) {
  if (!cloud.has_labels()) throw std::invalid_argument("segmentation pair requires a labeled cloud");
  CloudPair pair{cloud, cloud};
  for (std::size_t i = 0; i < cloud.size(); ++i) pair.target.points[i] = map.at(cloud.labels[i]);
  return pair;
}

void validate_sample(const InContextSample& s) {
  const std::size_t n = s.query_input.size();
  if (n == 0) throw std::invalid_argument("sample: empty clouds");
  for (const PointCloud* c : {&s.prompt_input, &s.prompt_target, &s.query_target}) {
    if (c->size() != n) throw std::invalid_argument("sample: all four clouds must share N");
  }
  for (const auto* labels : {&s.prompt_labels, &s.query_labels}) {
    if (!labels->empty() && labels->size() != n) throw std::invalid_argument("sample: label length mismatch");
  }
  if (s.task.has_level()) {
    check_level(s.task.level);
  } else if (s.task.level != 0) {
    throw std::invalid_argument("sample: level set for a task without levels");
  }
  if (s.task.task == Task::Segmentation && (s.prompt_labels.empty() || s.query_labels.empty())) {
    throw std::invalid_argument("sample: segmentation requires labels");
  }
  if (s.task.task == Task::IceRestoration && (!s.prompt_labels.empty() || !s.query_labels.empty())) {
    throw std::invalid_argument("sample: restoration samples carry no labels");
  }
}

InContextSample assemble_sample(TaskKind task, const PointCloud& query_cloud, const PointCloud& prompt_cloud,
                                std::uint64_t seed, const AssembleOptions& options) {
  if (query_cloud.size() != prompt_cloud.size()) {
    throw std::invalid_argument("assemble_sample: prompt and query must have the same point count");
  }
  const std::uint64_t query_seed = derive_seed(seed, 1);
  const std::uint64_t prompt_seed = derive_seed(seed, 2);
  CloudPair query;
  CloudPair prompt;
  switch (task.task) {
    case Task::Reconstruction:
      query = make_reconstruction_pair(query_cloud, task.level, query_seed);
      prompt = make_reconstruction_pair(prompt_cloud, task.level, prompt_seed);
      break;
    case Task::Denoising:
      query = make_denoising_pair(query_cloud, task.level, query_seed);
      prompt = make_denoising_pair(prompt_cloud, task.level, prompt_seed);
      break;
    case Task::Registration: {
      const Rotation r = draw_registration_rotation(task.level, derive_seed(seed, 3));
      query = make_registration_pair(query_cloud, r, options.dual_orientation);
      prompt = make_registration_pair(prompt_cloud, r, options.dual_orientation);
      break;
    }
    case Task::Segmentation:
      if (options.static_map == nullptr) {
        throw std::invalid_argument("assemble_sample: segmentation needs a static label map");
      }
      if (!query_cloud.has_labels() || !prompt_cloud.has_labels() ||
          query_cloud.category != prompt_cloud.category) {
        throw std::invalid_argument("assemble_sample: task mismatch, segmentation prompt must share the query category");
      }
      query = make_segmentation_pair_static(query_cloud, *options.static_map);
      prompt = make_segmentation_pair_static(prompt_cloud, *options.static_map);
      break;
    case Task::IceRestoration:
      throw std::invalid_argument("assemble_sample: task mismatch, restoration samples come from make_ice_sample");
  }

  InContextSample sample;
  sample.task = TaskKind::make(task.task, task.level);
  sample.prompt_input = coordinates_only(prompt.input);
  sample.prompt_target = coordinates_only(prompt.target);
  sample.query_input = coordinates_only(query.input);
  sample.query_target = coordinates_only(query.target);
  sample.prompt_labels = prompt_cloud.labels;
  sample.query_labels = query_cloud.labels;
  sample.prompt_category = prompt_cloud.category;
  sample.query_category = query_cloud.category;
  sample.seed = seed;
  validate_sample(sample);
  return sample;
}

}  // namespace pic
