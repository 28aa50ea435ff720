#include "pic/sampling.hpp"

#include <algorithm>
#include <numeric>
#include <stdexcept>

#include "pic/rng.hpp"
#include "pic/taskgen.hpp"

namespace pic {

PatchSequence group_patches(const PointCloud& cloud, std::span<const std::size_t> center_indices, std::size_t m,
                            Segment source) {
  if (m == 0 || m > cloud.size()) throw std::invalid_argument("group_patches: m must be in [1, N]");
  PatchSequence seq;
  seq.m = m;
  seq.source = source;
  seq.center_indices.assign(center_indices.begin(), center_indices.end());
  seq.centers.reserve(center_indices.size());
  seq.neighbor_indices.reserve(center_indices.size() * m);
  seq.points.reserve(center_indices.size() * m);
  for (const auto c : center_indices) {
    if (c >= cloud.size()) throw std::invalid_argument("group_patches: center index out of range");
    seq.centers.push_back(cloud.points[c]);
    for (const auto i : knn(cloud, c, m)) {
      seq.neighbor_indices.push_back(i);
      seq.points.push_back(cloud.points[i]);
    }
  }
  return seq;
}

std::pair<PatchSequence, PatchSequence> joint_sample(const PointCloud& input, const PointCloud& target,
                                                     std::size_t n_c, std::size_t m, std::uint64_t seed,
                                                     bool prompt) {
  if (input.size() != target.size()) throw std::invalid_argument("joint sampling requires aligned clouds");
  if (n_c == 0 || n_c > input.size()) throw std::invalid_argument("joint_sample: n_c must be in [1, N]");
  const auto centers = farthest_point_sample(input, n_c, seed);
  return {group_patches(input, centers, m, prompt ? Segment::PromptInput : Segment::QueryInput),
          group_patches(target, centers, m, prompt ? Segment::PromptTarget : Segment::QueryTarget)};
}

std::pair<PatchSequence, PatchSequence> independent_sample(const PointCloud& input, const PointCloud& target,
                                                           std::size_t n_c, std::size_t m, std::uint64_t seed,
                                                           bool prompt) {
  if (input.size() != target.size()) throw std::invalid_argument("independent_sample: length mismatch");
  const auto input_centers = farthest_point_sample(input, n_c, derive_seed(seed, 1));
  const auto target_centers = farthest_point_sample(target, n_c, derive_seed(seed, 2));
  return {group_patches(input, input_centers, m, prompt ? Segment::PromptInput : Segment::QueryInput),
          group_patches(target, target_centers, m, prompt ? Segment::PromptTarget : Segment::QueryTarget)};
}

std::size_t MaskSpec::masked_count() const noexcept {
  return static_cast<std::size_t>(std::count(flags.begin(), flags.end(), std::uint8_t{1}));
}

MaskSpec build_mask(std::size_t n, double ratio, std::uint64_t seed) {
  if (!(ratio >= 0.0 && ratio <= 1.0)) throw std::invalid_argument("build_mask: ratio must be in [0, 1]");
  MaskSpec mask;
  mask.ratio = ratio;
  mask.seed = seed;
  mask.flags.assign(n, 0);
  const std::size_t count = std::min(n, round_half_up_count(n, ratio));
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  Rng rng(seed);
  for (std::size_t i = 0; i < count; ++i) {
    const auto j = i + static_cast<std::size_t>(rng.index(n - i));
    std::swap(order[i], order[j]);
    mask.flags[order[i]] = 1;
  }
  return mask;
}

std::size_t MaskLayout::masked_count() const noexcept {
  std::size_t total = 0;
  for (std::size_t s = 0; s < kNumSegments; ++s) total += masked_count(static_cast<Segment>(s));
  return total;
}

std::size_t MaskLayout::masked_count(Segment s) const noexcept {
  const auto& f = masked[static_cast<std::size_t>(s)];
  return static_cast<std::size_t>(std::count(f.begin(), f.end(), std::uint8_t{1}));
}

namespace {

MaskLayout empty_layout(std::size_t n_c) {
  MaskLayout layout;
  for (auto& f : layout.masked) f.assign(n_c, 0);
  return layout;
}

}  // namespace

MaskLayout inference_layout(std::size_t n_c) {
  MaskLayout layout = empty_layout(n_c);
  layout.masked[static_cast<std::size_t>(Segment::QueryTarget)].assign(n_c, 1);
  return layout;
}

MaskLayout sep_training_layout(std::size_t n_c, double ratio, std::uint64_t seed, bool mask_prompt_target) {
  MaskLayout layout = empty_layout(n_c);
  auto& pt = layout.masked[static_cast<std::size_t>(Segment::PromptTarget)];
  auto& qt = layout.masked[static_cast<std::size_t>(Segment::QueryTarget)];
  if (mask_prompt_target) {
    const MaskSpec track = build_mask(2 * n_c, ratio, seed);
    std::copy_n(track.flags.begin(), n_c, pt.begin());
    std::copy_n(track.flags.begin() + static_cast<std::ptrdiff_t>(n_c), n_c, qt.begin());
  } else {
    qt = build_mask(n_c, ratio, seed).flags;
  }
  return layout;
}

MaskLayout cat_training_layout(std::size_t n_c, double ratio, std::uint64_t seed) {
  MaskLayout layout = empty_layout(n_c);
  const MaskSpec all = build_mask(kNumSegments * n_c, ratio, seed);
  for (std::size_t s = 0; s < kNumSegments; ++s) {
    std::copy_n(all.flags.begin() + static_cast<std::ptrdiff_t>(s * n_c), n_c, layout.masked[s].begin());
  }
  return layout;
}

MaskLayout apply_mask_sep(const PatchSequence& query_target, const MaskSpec& mask) {
  if (mask.flags.size() != query_target.num_patches()) {
    throw std::invalid_argument("apply_mask_sep: mask length must equal the number of patches");
  }
  MaskLayout layout = empty_layout(query_target.num_patches());
  layout.masked[static_cast<std::size_t>(Segment::QueryTarget)] = mask.flags;
  return layout;
}

}  // namespace pic
