#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "pic/geometry.hpp"
#include "pic/taskgen.hpp"

namespace pic {

/// Candidate label points, uniform in [-1,1]^3 with a minimum pairwise
/// separation enforced by rejection.
struct LabelBank {
  static constexpr double kMinSeparation = 0.15;
  static constexpr int kMaxAttempts = 10000;
  static constexpr std::size_t kDefaultSize = 8;

  std::vector<Point> points;
  std::uint64_t seed = 0;

  std::size_t size() const noexcept { return points.size(); }
  friend bool operator==(const LabelBank&, const LabelBank&) = default;
};

LabelBank build_label_bank(std::size_t n_b, std::uint64_t seed);

/// Per-sample bijection from the sample's parts to distinct bank points.
/// parts[i] maps to bank.points[bank_indices[i]] == points[i].
struct LabelMapping {
  std::vector<Label> parts;
  std::vector<std::size_t> bank_indices;
  std::vector<Point> points;

  std::size_t size() const noexcept { return parts.size(); }
  const Point& point_of(Label part) const;
  bool contains(Label part) const noexcept;
  friend bool operator==(const LabelMapping&, const LabelMapping&) = default;
};

LabelMapping draw_mapping(const LabelBank& bank, std::span<const Label> parts, std::uint64_t seed);

/// Cloud whose point i is the mapped label point of labels[i].
PointCloud encode_labels(std::span<const Label> labels, const LabelMapping& mapping);
PointCloud encode_labels(const PointCloud& cloud, const LabelMapping& mapping);

/// Nearest mapped point per predicted point; ties go to the lower bank index.
std::vector<Label> decode_labels(const PointCloud& pred, const LabelMapping& mapping);

/// Recovers the mapping implied by a labeled cloud and its encoded target.
/// Throws when one part is encoded by two different points.
LabelMapping mapping_from_encoded(std::span<const Label> labels, const PointCloud& encoded);

/// Assembles a label-bank segmentation sample. Prompt and query share one
/// mapping drawn from the bank over the query's parts.
InContextSample assemble_icl_segmentation(const PointCloud& query_cloud, const PointCloud& prompt_cloud,
                                          const LabelBank& bank, std::uint64_t seed);

/// Re-encodes both targets of a segmentation sample with `mapping`.
void relabel(InContextSample& sample, const LabelMapping& mapping);

enum class CorruptionKind : std::uint8_t { LocalMask = 0, Jitter = 1, Drop = 2 };

struct CorruptionOp {
  CorruptionKind kind = CorruptionKind::Jitter;
  double radius = 0.4;          // LocalMask
  double sigma = 0.02;          // Jitter
  double drop_fraction = 0.30;  // Drop
  std::uint64_t seed = 0;

  friend bool operator==(const CorruptionOp&, const CorruptionOp&) = default;
};

std::string_view corruption_name(CorruptionKind kind);

/// Zero-fills (LocalMask, Drop) or jitters points; length is preserved.
PointCloud corrupt(const PointCloud& cloud, const CorruptionOp& op);

/// Restoration pair built from one corruption op applied to both clouds with
/// independent randomness. Carries no labels.
InContextSample make_ice_sample(const PointCloud& query_cloud, const PointCloud& prompt_cloud, const CorruptionOp& op,
                                std::uint64_t seed);

}  // namespace pic
