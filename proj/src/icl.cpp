#include "pic/icl.hpp"

#include <algorithm>
#include <limits>
#include <numeric>
#include <set>
#include <stdexcept>

#include "pic/rng.hpp"

namespace pic {

LabelBank build_label_bank(std::size_t n_b, std::uint64_t seed) {
  if (n_b == 0) throw std::invalid_argument("build_label_bank: bank size must be positive");
  LabelBank bank;
  bank.seed = seed;
  Rng rng(seed);
  int attempts = 0;
  while (bank.points.size() < n_b) {
    if (++attempts > LabelBank::kMaxAttempts) {
      throw std::invalid_argument("build_label_bank: could not place " + std::to_string(n_b) +
                                  " points with the required separation");
    }
    // Uniform in the unit cube, mapped to [-1,1]^3.
    const Point p(static_cast<float>(2.0 * rng.uniform() - 1.0), static_cast<float>(2.0 * rng.uniform() - 1.0),
                  static_cast<float>(2.0 * rng.uniform() - 1.0));
    const bool far = std::all_of(bank.points.begin(), bank.points.end(), [&](const Point& q) {
      return (p.cast<double>() - q.cast<double>()).norm() >= LabelBank::kMinSeparation;
    });
    if (far) bank.points.push_back(p);
  }
  return bank;
}

const Point& LabelMapping::point_of(Label part) const {
  for (std::size_t i = 0; i < parts.size(); ++i) {
    if (parts[i] == part) return points[i];
  }
  throw std::invalid_argument("label mapping has no point for part " + std::to_string(part));
}

bool LabelMapping::contains(Label part) const noexcept {
  return std::find(parts.begin(), parts.end(), part) != parts.end();
}

LabelMapping draw_mapping(const LabelBank& bank, std::span<const Label> parts, std::uint64_t seed) {
  std::vector<Label> unique(parts.begin(), parts.end());
  std::sort(unique.begin(), unique.end());
  unique.erase(std::unique(unique.begin(), unique.end()), unique.end());
  if (unique.size() > bank.size()) {
    throw std::invalid_argument("bank overflow: " + std::to_string(unique.size()) + " parts but bank holds " +
                                std::to_string(bank.size()));
  }
  // A uniform random prefix of a permutation of the bank indices, matched in
  // order to the sorted parts, is a uniform subset with a uniform matching.
  std::vector<std::size_t> order(bank.size());
  std::iota(order.begin(), order.end(), 0);
  Rng rng(seed);
  for (std::size_t i = 0; i < unique.size(); ++i) {
    const auto j = i + static_cast<std::size_t>(rng.index(order.size() - i));
    std::swap(order[i], order[j]);
  }
  LabelMapping mapping;
  mapping.parts = unique;
  mapping.bank_indices.assign(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(unique.size()));
  for (const auto i : mapping.bank_indices) mapping.points.push_back(bank.points[i]);
  return mapping;
}

PointCloud encode_labels(std::span<const Label> labels, const LabelMapping& mapping) {
  PointCloud out;
  out.points.reserve(labels.size());
  for (const Label l : labels) out.points.push_back(mapping.point_of(l));
  return out;
}

PointCloud encode_labels(const PointCloud& cloud, const LabelMapping& mapping) {
  if (!cloud.has_labels()) throw std::invalid_argument("encode_labels: cloud has no labels");
  return encode_labels(cloud.labels, mapping);
}

std::vector<Label> decode_labels(const PointCloud& pred, const LabelMapping& mapping) {
  if (mapping.parts.empty()) throw std::invalid_argument("decode_labels: empty mapping");
  // Scan in ascending bank index so strict improvement keeps the lower index on ties.
  std::vector<std::size_t> order(mapping.size());
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(),
            [&](std::size_t a, std::size_t b) { return mapping.bank_indices[a] < mapping.bank_indices[b]; });
  std::vector<Label> out;
  out.reserve(pred.size());
  for (const auto& p : pred.points) {
    double best = std::numeric_limits<double>::infinity();
    Label label = mapping.parts[order.front()];
    for (const auto k : order) {
      const double d = (p.cast<double>() - mapping.points[k].cast<double>()).squaredNorm();
      if (d < best) {
        best = d;
        label = mapping.parts[k];
      }
    }
    out.push_back(label);
  }
  return out;
}

LabelMapping mapping_from_encoded(std::span<const Label> labels, const PointCloud& encoded) {
  if (labels.size() != encoded.size()) throw std::invalid_argument("mapping_from_encoded: length mismatch");
  LabelMapping mapping;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    const auto it = std::find(mapping.parts.begin(), mapping.parts.end(), labels[i]);
    if (it == mapping.parts.end()) {
      mapping.parts.push_back(labels[i]);
      mapping.points.push_back(encoded.points[i]);
      mapping.bank_indices.push_back(mapping.parts.size() - 1);
    } else if (mapping.points[static_cast<std::size_t>(it - mapping.parts.begin())] != encoded.points[i]) {
      throw std::invalid_argument("mapping_from_encoded: part " + std::to_string(labels[i]) +
                                  " is encoded by more than one point");
    }
  }
  return mapping;
}

InContextSample assemble_icl_segmentation(const PointCloud& query_cloud, const PointCloud& prompt_cloud,
                                          const LabelBank& bank, std::uint64_t seed) {
  if (!query_cloud.has_labels() || !prompt_cloud.has_labels()) {
    throw std::invalid_argument("assemble_icl_segmentation: clouds must be labeled");
  }
  if (query_cloud.size() != prompt_cloud.size()) {
    throw std::invalid_argument("assemble_icl_segmentation: prompt and query must share N");
  }
  const std::set<Label> query_parts(query_cloud.labels.begin(), query_cloud.labels.end());
  for (const Label l : prompt_cloud.labels) {
    if (!query_parts.contains(l)) {
      throw std::invalid_argument("assemble_icl_segmentation: prompt has a part the query lacks");
    }
  }
  const std::vector<Label> parts(query_parts.begin(), query_parts.end());
  const LabelMapping mapping = draw_mapping(bank, parts, derive_seed(seed, 7));

  InContextSample s;
  s.task = TaskKind::make(Task::Segmentation);
  s.prompt_input.points = prompt_cloud.points;
  s.query_input.points = query_cloud.points;
  s.prompt_labels = prompt_cloud.labels;
  s.query_labels = query_cloud.labels;
  s.prompt_category = prompt_cloud.category;
  s.query_category = query_cloud.category;
  s.seed = seed;
  relabel(s, mapping);
  validate_sample(s);
  return s;
}

void relabel(InContextSample& sample, const LabelMapping& mapping) {
  if (sample.task.task != Task::Segmentation) throw std::invalid_argument("relabel: not a segmentation sample");
  sample.prompt_target = encode_labels(sample.prompt_labels, mapping);
  sample.query_target = encode_labels(sample.query_labels, mapping);
}

std::string_view corruption_name(CorruptionKind kind) {
  switch (kind) {
    case CorruptionKind::LocalMask: return "local-mask";
    case CorruptionKind::Jitter: return "jitter";
    case CorruptionKind::Drop: return "drop";
  }
  return "unknown";
}

PointCloud corrupt(const PointCloud& cloud, const CorruptionOp& op) {
  PointCloud out = cloud;
  Rng rng(op.seed);
  switch (op.kind) {
    case CorruptionKind::LocalMask: {
      if (cloud.points.empty()) return out;
      const Point center = cloud.points[static_cast<std::size_t>(rng.index(cloud.size()))];
      const double r2 = op.radius * op.radius;
      for (auto& p : out.points) {
        if ((p.cast<double>() - center.cast<double>()).squaredNorm() <= r2) p = Point::Zero();
      }
      break;
    }
    case CorruptionKind::Jitter:
      for (auto& p : out.points) {
        for (int c = 0; c < 3; ++c) {
          p[c] = static_cast<float>(std::clamp(static_cast<double>(p[c]) + op.sigma * rng.normal(), -1.0, 1.0));
        }
      }
      break;
    case CorruptionKind::Drop: {
      const std::size_t n = cloud.size();
      const std::size_t count = std::min(n, round_half_up_count(n, op.drop_fraction));
      std::vector<std::size_t> order(n);
      std::iota(order.begin(), order.end(), 0);
      for (std::size_t i = 0; i < count; ++i) {
        const auto j = i + static_cast<std::size_t>(rng.index(n - i));
        std::swap(order[i], order[j]);
        out.points[order[i]] = Point::Zero();
      }
      break;
    }
  }
  return out;
}

InContextSample make_ice_sample(const PointCloud& query_cloud, const PointCloud& prompt_cloud, const CorruptionOp& op,
                                std::uint64_t seed) {
  if (query_cloud.size() != prompt_cloud.size()) throw std::invalid_argument("make_ice_sample: N mismatch");
  CorruptionOp query_op = op;
  CorruptionOp prompt_op = op;
  query_op.seed = derive_seed(seed, 11);
  prompt_op.seed = derive_seed(seed, 12);
  InContextSample s;
  s.task = TaskKind::make(Task::IceRestoration);
  s.query_target.points = query_cloud.points;
  s.prompt_target.points = prompt_cloud.points;
  s.query_input.points = corrupt(s.query_target, query_op).points;
  s.prompt_input.points = corrupt(s.prompt_target, prompt_op).points;
  s.seed = seed;
  validate_sample(s);
  return s;
}

}  // namespace pic
