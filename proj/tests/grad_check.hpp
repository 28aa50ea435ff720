#pragma once

#include <algorithm>
#include <cmath>
#include <map>
#include <string>

#include "pic/train.hpp"
#include "test_util.hpp"

namespace testutil {

// Small double-precision model and one masked sample for finite differences.
struct GradFixture {
  pic::ModelState<double> state;
  pic::SampleSequences seqs;
  pic::MaskLayout mask;
};

inline GradFixture grad_fixture(pic::Variant variant, std::uint64_t seed) {
  pic::ModelConfig cfg = pic::ModelConfig::defaults(variant);
  cfg.feature_dim = 16;
  cfg.heads = 2;
  cfg.encoder_depth = 2;
  cfg.decoder_depth = 1;
  cfg.merge_block = 1;
  cfg.mlp_ratio = 2;
  cfg.patch_hidden = 8;
  cfg.n_c = 4;
  cfg.m = 8;
  cfg.seed = seed;
  GradFixture f;
  f.state = pic::init_params<double>(cfg);
  // Larger-than-init weights so every path carries visible gradient.
  pic::Rng rng(pic::derive_seed(seed, 77));
  for (auto& t : f.state.tensors) {
    for (Eigen::Index i = 0; i < t.value.size(); ++i) t.value.data()[i] += 0.1 * rng.normal();
  }
  pic::InContextSample s;
  s.task = pic::TaskKind::make(pic::Task::Denoising, 1);
  s.prompt_input = random_cloud(48, seed + 1);
  s.prompt_target = random_cloud(48, seed + 2);
  s.query_input = random_cloud(48, seed + 3);
  s.query_target = random_cloud(48, seed + 4);
  f.seqs = pic::sample_sequences(s, 4, 8, seed);
  f.mask = variant == pic::Variant::Sep ? pic::sep_training_layout(4, 0.5, seed)
                                        : pic::cat_training_layout(4, 0.5, seed);
  return f;
}

inline double fixture_loss(const GradFixture& f, pic::LossMode mode) {
  pic::Tape<double> tape(false);
  const auto params = pic::bind_parameters(tape, f.state);
  const auto out = pic::forward<double>(tape, params, f.state, f.seqs, f.mask);
  const auto gt = pic::masked_targets<double>(f.seqs, out.positions);
  return tape.value(pic::loss_on_tape<double>(tape, out.prediction, gt, mode))(0, 0);
}

struct GroupError {
  double max_rel = 0.0;
  std::size_t checked = 0;
};

// Worst relative error per parameter group between analytic and central
// difference gradients, over up to `per_tensor` entries of every tensor.
inline std::map<std::string, GroupError> gradient_errors(GradFixture f, pic::LossMode mode, double step,
                                                         std::size_t per_tensor, std::uint64_t seed) {
  std::vector<pic::Matrix<double>> analytic;
  {
    pic::Tape<double> tape;
    const auto params = pic::bind_parameters(tape, f.state);
    const auto out = pic::forward<double>(tape, params, f.state, f.seqs, f.mask);
    const auto gt = pic::masked_targets<double>(f.seqs, out.positions);
    const auto loss = pic::loss_on_tape<double>(tape, out.prediction, gt, mode);
    tape.backward(loss);
    for (std::size_t k = 0; k < params.size(); ++k) {
      const auto& g = tape.grad(params[k]);
      analytic.push_back(g.size() == 0 ? pic::Matrix<double>::Zero(f.state[k].rows(), f.state[k].cols()) : g);
    }
  }
  std::map<std::string, GroupError> errors;
  pic::Rng rng(seed);
  for (std::size_t k = 0; k < f.state.tensors.size(); ++k) {
    auto& value = f.state.tensors[k].value;
    const auto group = std::string(pic::group_name(pic::group_of(f.state.tensors[k].name)));
    const auto n = static_cast<std::size_t>(value.size());
    for (std::size_t t = 0; t < std::min(n, per_tensor); ++t) {
      const auto idx = static_cast<Eigen::Index>(n <= per_tensor ? t : rng.index(n));
      const double orig = value.data()[idx];
      value.data()[idx] = orig + step;
      const double up = fixture_loss(f, mode);
      value.data()[idx] = orig - step;
      const double down = fixture_loss(f, mode);
      value.data()[idx] = orig;
      const double numeric = (up - down) / (2.0 * step);
      const double a = analytic[k].data()[idx];
      const double scale = std::max({std::abs(a), std::abs(numeric), 1e-6});
      auto& e = errors[group];
      e.max_rel = std::max(e.max_rel, std::abs(a - numeric) / scale);
      ++e.checked;
    }
  }
  return errors;
}

}  // namespace testutil
