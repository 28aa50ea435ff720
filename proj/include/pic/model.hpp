#pragma once

#include <array>
#include <cstdint>
#include <map>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "pic/autodiff.hpp"
#include "pic/sampling.hpp"

namespace pic {

/// Separate input/target tracks merged by averaging, or one concatenated track.
enum class Variant : std::uint8_t { Sep, Cat };

/// Which positional embedding target-segment tokens receive.
///  None:         no coordinate embedding at all.
///  Visible:      own center, visible target patches only.
///  InputAligned: center of the index-aligned input patch, when that patch is visible.
enum class TargetPosition : std::uint8_t { None, Visible, InputAligned };

/// Whether the prompt pair precedes or follows the query pair in each track.
enum class PromptPosition : std::uint8_t { Before, Behind };

struct ModelConfig {
  int feature_dim = 96;
  int encoder_depth = 4;
  int decoder_depth = 2;
  int heads = 4;
  int mlp_ratio = 4;
  int patch_hidden = 64;
  Variant variant = Variant::Sep;
  int merge_block = 2;
  int n_c = 64;
  int m = 32;
  double mask_ratio = 0.7;
  TargetPosition target_position = TargetPosition::None;
  PromptPosition prompt_position = PromptPosition::Before;
  std::uint64_t seed = 0;

  /// Defaults for a variant: Cat needs an index cue on its target tokens,
  /// so it uses InputAligned positions.
  static ModelConfig defaults(Variant variant);

  /// Throws std::invalid_argument on inconsistent settings.
  void validate() const;

  std::map<std::string, std::string> to_key_values() const;
  static ModelConfig from_key_values(const std::map<std::string, std::string>& kv);

  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

std::string_view variant_name(Variant v);
Variant parse_variant(std::string_view name);
std::string_view target_position_name(TargetPosition p);
TargetPosition parse_target_position(std::string_view name);

template <typename T>
struct NamedTensor {
  std::string name;
  Matrix<T> value;
};

/// Index of every parameter tensor inside ModelState::tensors.
struct ParamLayout {
  struct Block {
    std::size_t ln1_g, ln1_b, qkv_w, qkv_b, proj_w, proj_b, ln2_g, ln2_b, fc1_w, fc1_b, fc2_w, fc2_b;
  };
  std::size_t patch_w1, patch_b1, patch_w2, patch_b2;
  std::size_t pos_w1, pos_b1, pos_w2, pos_b2;
  std::size_t segment, mask_token;
  std::vector<Block> blocks;  // encoder blocks then decoder blocks
  std::size_t norm_g, norm_b, head_w, head_b;
  std::size_t count = 0;

  static ParamLayout build(const ModelConfig& config);
};

/// Parameter groups used for gradient reporting and checks.
enum class ParamGroup : std::uint8_t { PatchEmbed, PosEmbed, Segment, MaskToken, Blocks, Head };
ParamGroup group_of(std::string_view tensor_name);
std::string_view group_name(ParamGroup g);

template <typename T>
struct ModelState {
  ModelConfig config;
  ParamLayout layout;
  std::vector<NamedTensor<T>> tensors;

  Matrix<T>& operator[](std::size_t i) { return tensors[i].value; }
  const Matrix<T>& operator[](std::size_t i) const { return tensors[i].value; }
  const NamedTensor<T>* find(std::string_view name) const;
  std::size_t parameter_count() const;
  bool all_finite() const;

  template <typename U>
  ModelState<U> cast() const {
    ModelState<U> out;
    out.config = config;
    out.layout = layout;
    for (const auto& t : tensors) out.tensors.push_back({t.name, t.value.template cast<U>()});
    return out;
  }
};

/// Names and shapes of all parameters, in layout order.
std::vector<std::pair<std::string, std::pair<int, int>>> parameter_shapes(const ModelConfig& config);

template <typename T>
ModelState<T> init_params(const ModelConfig& config);

/// Four index-aligned patch sequences of one in-context sample.
struct SampleSequences {
  std::array<PatchSequence, kNumSegments> seq;

  const PatchSequence& operator[](Segment s) const { return seq[static_cast<std::size_t>(s)]; }
  PatchSequence& operator[](Segment s) { return seq[static_cast<std::size_t>(s)]; }
};

/// A masked patch position, in the row order of the forward output.
struct MaskedPosition {
  Segment segment;
  std::size_t patch;
  friend bool operator==(const MaskedPosition&, const MaskedPosition&) = default;
};

template <typename T>
struct ForwardOutput {
  typename Tape<T>::Var prediction;  // (#masked) x (3 m), absolute xyz
  std::vector<MaskedPosition> positions;
};

/// Registers every parameter of `state` on the tape, in layout order.
template <typename T>
std::vector<typename Tape<T>::Var> bind_parameters(Tape<T>& tape, const ModelState<T>& state);

/// Patch embedder: pointwise two-layer map then max-pool over each group of
/// m consecutive rows of `points` ((#patches * m) x 3).
template <typename T>
typename Tape<T>::Var embed_patches(Tape<T>& tape, const std::vector<typename Tape<T>::Var>& params,
                                    const ParamLayout& layout, typename Tape<T>::Var points, int m);

/// Full forward pass. Masked patches are never read; masked tokens carry the
/// mask token plus their segment embedding only.
template <typename T>
ForwardOutput<T> forward(Tape<T>& tape, const std::vector<typename Tape<T>::Var>& params,
                         const ModelState<T>& state, const SampleSequences& sequences, const MaskLayout& mask);

/// Ground-truth rows for the masked positions, matching ForwardOutput order.
template <typename T>
Matrix<T> masked_targets(const SampleSequences& sequences, const std::vector<MaskedPosition>& positions);

/// Predicted patches as plain points, row r -> m points.
std::vector<std::vector<Point>> unpack_patches(const Matrix<float>& prediction, int m);

}  // namespace pic
