#pragma once

#include <array>
#include <cstdint>
#include <span>
#include <utility>
#include <vector>

#include "pic/geometry.hpp"

namespace pic {

/// Position of a cloud inside an in-context sample. The numeric value is the
/// segment-embedding row and the order of the concatenated layout.
enum class Segment : std::uint8_t { PromptInput = 0, PromptTarget = 1, QueryInput = 2, QueryTarget = 3 };
inline constexpr std::size_t kNumSegments = 4;

/// N_C patches of M points each, grouped around FPS centers.
struct PatchSequence {
  std::vector<std::size_t> center_indices;
  std::vector<Point> centers;
  /// neighbor_indices[c * m + j] is the j-th nearest cloud point to center c.
  std::vector<std::size_t> neighbor_indices;
  /// points[c * m + j] == cloud.points[neighbor_indices[c * m + j]].
  std::vector<Point> points;
  std::size_t m = 0;
  Segment source = Segment::QueryInput;

  std::size_t num_patches() const noexcept { return center_indices.size(); }
  std::span<const Point> patch(std::size_t c) const { return {points.data() + c * m, m}; }
  std::span<const std::size_t> patch_indices(std::size_t c) const { return {neighbor_indices.data() + c * m, m}; }

  friend bool operator==(const PatchSequence&, const PatchSequence&) = default;
};

/// Groups `cloud` around the given center indices, KNN within the cloud itself.
PatchSequence group_patches(const PointCloud& cloud, std::span<const std::size_t> center_indices,
                            std::size_t m, Segment source);

/// Joint Sampling: FPS once on the input, the same center indices reused on
/// the target, then KNN inside each cloud around its own centers.
/// `prompt` selects the PromptInput/PromptTarget segment tags instead of the
/// query ones.
std::pair<PatchSequence, PatchSequence> joint_sample(const PointCloud& input, const PointCloud& target,
                                                     std::size_t n_c, std::size_t m, std::uint64_t seed,
                                                     bool prompt = false);

/// Ablation path: FPS run separately on each cloud with unrelated seeds.
std::pair<PatchSequence, PatchSequence> independent_sample(const PointCloud& input, const PointCloud& target,
                                                           std::size_t n_c, std::size_t m, std::uint64_t seed,
                                                           bool prompt = false);

struct MaskSpec {
  std::vector<std::uint8_t> flags;  // 1 = masked
  double ratio = 0.0;
  std::uint64_t seed = 0;

  std::size_t masked_count() const noexcept;
};

/// Exactly round_half_up(n * ratio) positions, chosen uniformly per seed.
MaskSpec build_mask(std::size_t n, double ratio, std::uint64_t seed);

/// Which patches of each segment are replaced by the mask token.
struct MaskLayout {
  std::array<std::vector<std::uint8_t>, kNumSegments> masked;

  std::size_t n_c() const noexcept { return masked[0].size(); }
  bool is_masked(Segment s, std::size_t c) const { return masked[static_cast<std::size_t>(s)][c] != 0; }
  std::size_t masked_count() const noexcept;
  std::size_t masked_count(Segment s) const noexcept;
};

/// Inference layout: query target fully masked, everything else visible.
MaskLayout inference_layout(std::size_t n_c);

/// Separate-track training layout. The mask is drawn over the target track
/// (prompt target then query target). With `mask_prompt_target == false`
/// only the query target is masked, with the same ratio.
MaskLayout sep_training_layout(std::size_t n_c, double ratio, std::uint64_t seed, bool mask_prompt_target = true);

/// Concatenated training layout: one mask drawn over all four segments.
MaskLayout cat_training_layout(std::size_t n_c, double ratio, std::uint64_t seed);

/// Layout for a query-target mask with a fully visible prompt target.
MaskLayout apply_mask_sep(const PatchSequence& query_target, const MaskSpec& mask);

}  // namespace pic
