#include <charconv>
#include <cmath>
#include <numbers>
#include <numeric>
#include <set>
#include <sstream>
#include <stdexcept>
#include <thread>

#include "pic/error.hpp"
#include "pic/io_util.hpp"
#include "pic/rng.hpp"
#include "pic/train.hpp"

namespace pic {
namespace {

std::string format_double(double v) {
  char buf[64];
  const auto res = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, res.ptr);
}

double to_double(const std::map<std::string, std::string>& kv, const std::string& key) {
  const auto it = kv.find(key);
  if (it == kv.end()) throw std::invalid_argument("train config: missing " + key);
  double v = 0.0;
  const auto& s = it->second;
  const auto res = std::from_chars(s.data(), s.data() + s.size(), v);
  if (res.ec != std::errc() || res.ptr != s.data() + s.size()) throw std::invalid_argument("bad number for " + key);
  return v;
}

long long to_int(const std::map<std::string, std::string>& kv, const std::string& key) {
  const auto it = kv.find(key);
  if (it == kv.end()) throw std::invalid_argument("train config: missing " + key);
  long long v = 0;
  const auto& s = it->second;
  const auto res = std::from_chars(s.data(), s.data() + s.size(), v);
  if (res.ec != std::errc() || res.ptr != s.data() + s.size()) throw std::invalid_argument("bad integer for " + key);
  return v;
}

const std::string& to_str(const std::map<std::string, std::string>& kv, const std::string& key) {
  const auto it = kv.find(key);
  if (it == kv.end()) throw std::invalid_argument("train config: missing " + key);
  return it->second;
}

bool decays(const std::string& name) { return name.ends_with(".w"); }

std::set<Label> parts_in(const std::vector<InContextSample>& dataset) {
  std::set<Label> parts;
  for (const auto& s : dataset) {
    if (s.task.task != Task::Segmentation) continue;
    parts.insert(s.query_labels.begin(), s.query_labels.end());
    parts.insert(s.prompt_labels.begin(), s.prompt_labels.end());
  }
  return parts;
}

std::vector<std::size_t> epoch_order(std::size_t n, std::uint64_t seed, long epoch) {
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  Rng rng(derive_seed(seed, 0xE0000ULL + static_cast<std::uint64_t>(epoch)));
  rng.shuffle(order.begin(), order.end());
  return order;
}

struct SampleGrad {
  double loss = 0.0;
  std::vector<Matrix<float>> grads;
};

SampleGrad sample_gradient(const TrainState& state, const InContextSample& stored, std::uint64_t seed) {
  const ModelConfig& cfg = state.model.config;
  const InContextSample* sample = &stored;
  InContextSample relabeled;
  if (stored.task.task == Task::Segmentation && state.train.label_mode == LabelMode::Bank) {
    relabeled = stored;
    const LabelMapping mapping = draw_mapping(*state.bank, stored.query_labels, derive_seed(seed, 1));
    relabel(relabeled, mapping);
    sample = &relabeled;
  }
  const auto n_c = static_cast<std::size_t>(cfg.n_c);
  const SampleSequences seqs =
      sample_sequences(*sample, n_c, static_cast<std::size_t>(cfg.m), derive_seed(seed, 2), state.train.joint_sampling);
  const MaskLayout layout = cfg.variant == Variant::Sep
                                ? sep_training_layout(n_c, cfg.mask_ratio, derive_seed(seed, 4),
                                                      state.train.mask_prompt_target)
                                : cat_training_layout(n_c, cfg.mask_ratio, derive_seed(seed, 4));
  Tape<float> tape;
  const auto params = bind_parameters(tape, state.model);
  const auto out = forward<float>(tape, params, state.model, seqs, layout);
  const Matrix<float> gt = masked_targets<float>(seqs, out.positions);
  const auto loss = loss_on_tape<float>(tape, out.prediction, gt, state.train.loss_mode);
  tape.backward(loss);
  SampleGrad result;
  result.loss = static_cast<double>(tape.value(loss)(0, 0));
  result.grads.reserve(params.size());
  for (std::size_t k = 0; k < params.size(); ++k) {
    const auto& g = tape.grad(params[k]);
    result.grads.push_back(g.size() == 0 ? Matrix<float>::Zero(state.model[k].rows(), state.model[k].cols()) : g);
  }
  return result;
}

}  // namespace

std::string_view loss_mode_name(LossMode mode) {
  switch (mode) {
    case LossMode::CD: return "cd";
    case LossMode::SmoothL1: return "sl1";
    case LossMode::CDSmoothL1: return "cd+sl1";
  }
  return "cd";
}

LossMode parse_loss_mode(std::string_view name) {
  if (name == "cd") return LossMode::CD;
  if (name == "sl1") return LossMode::SmoothL1;
  if (name == "cd+sl1") return LossMode::CDSmoothL1;
  throw std::invalid_argument("unknown loss mode '" + std::string(name) + "'");
}

void TrainConfig::validate() const {
  if (!(learning_rate >= 0.0)) throw std::invalid_argument("train config: learning_rate must be non-negative");
  if (!(weight_decay >= 0.0)) throw std::invalid_argument("train config: weight_decay must be non-negative");
  if (epochs < 1) throw std::invalid_argument("train config: epochs must be >= 1");
  if (batch_size < 1) throw std::invalid_argument("train config: batch_size must be >= 1");
  if (max_steps < 0) throw std::invalid_argument("train config: max_steps must be >= 0");
  if (threads < 1) throw std::invalid_argument("train config: threads must be >= 1");
  if (bank_size < 1) throw std::invalid_argument("train config: bank size must be >= 1");
}

std::map<std::string, std::string> TrainConfig::to_key_values() const {
  return {
      {"train.learning_rate", format_double(learning_rate)},
      {"train.weight_decay", format_double(weight_decay)},
      {"train.beta1", format_double(beta1)},
      {"train.beta2", format_double(beta2)},
      {"train.epsilon", format_double(epsilon)},
      {"train.epochs", std::to_string(epochs)},
      {"train.batch_size", std::to_string(batch_size)},
      {"train.max_steps", std::to_string(max_steps)},
      {"train.loss", std::string(loss_mode_name(loss_mode))},
      {"train.labels", label_mode == LabelMode::Bank ? "bank" : "static"},
      {"train.bank_size", std::to_string(bank_size)},
      {"train.mask_prompt_target", mask_prompt_target ? "1" : "0"},
      {"train.joint_sampling", joint_sampling ? "1" : "0"},
      {"train.seed", std::to_string(seed)},
  };
}

TrainConfig TrainConfig::from_key_values(const std::map<std::string, std::string>& kv) {
  TrainConfig c;
  c.learning_rate = to_double(kv, "train.learning_rate");
  c.weight_decay = to_double(kv, "train.weight_decay");
  c.beta1 = to_double(kv, "train.beta1");
  c.beta2 = to_double(kv, "train.beta2");
  c.epsilon = to_double(kv, "train.epsilon");
  c.epochs = static_cast<int>(to_int(kv, "train.epochs"));
  c.batch_size = static_cast<int>(to_int(kv, "train.batch_size"));
  c.max_steps = static_cast<long>(to_int(kv, "train.max_steps"));
  c.loss_mode = parse_loss_mode(to_str(kv, "train.loss"));
  const auto& labels = to_str(kv, "train.labels");
  if (labels != "bank" && labels != "static") throw std::invalid_argument("train config: bad labels mode");
  c.label_mode = labels == "bank" ? LabelMode::Bank : LabelMode::Static;
  c.bank_size = static_cast<std::size_t>(to_int(kv, "train.bank_size"));
  c.mask_prompt_target = to_int(kv, "train.mask_prompt_target") != 0;
  c.joint_sampling = to_int(kv, "train.joint_sampling") != 0;
  c.seed = static_cast<std::uint64_t>(to_int(kv, "train.seed"));
  c.validate();
  return c;
}

double cosine_lr(double base, long step, long total) {
  if (total <= 0) return base;
  const double progress = std::clamp(static_cast<double>(step) / static_cast<double>(total), 0.0, 1.0);
  return 0.5 * base * (1.0 + std::cos(std::numbers::pi * progress));
}

OptimizerState OptimizerState::zeros_like(const ModelState<float>& model) {
  OptimizerState s;
  for (const auto& t : model.tensors) {
    s.first.push_back(Matrix<float>::Zero(t.value.rows(), t.value.cols()));
    s.second.push_back(Matrix<float>::Zero(t.value.rows(), t.value.cols()));
  }
  return s;
}

double compute_loss(const std::vector<std::vector<Point>>& pred, const std::vector<std::vector<Point>>& gt,
                    LossMode mode) {
  if (pred.size() != gt.size()) throw std::invalid_argument("compute_loss: mismatched patch counts");
  if (pred.empty()) throw std::invalid_argument("compute_loss: no patches");
  double cd = 0.0;
  double sl1 = 0.0;
  for (std::size_t p = 0; p < pred.size(); ++p) {
    if (mode != LossMode::SmoothL1) cd += chamfer_l2(pred[p], gt[p]);
    if (mode != LossMode::CD) sl1 += smooth_l1(pred[p], gt[p], 1.0);
  }
  const auto n = static_cast<double>(pred.size());
  return cd / n + sl1 / n;
}

template <typename T>
typename Tape<T>::Var loss_on_tape(Tape<T>& tape, typename Tape<T>::Var pred, const Matrix<T>& gt, LossMode mode) {
  switch (mode) {
    case LossMode::CD: return tape.chamfer_patches(pred, gt);
    case LossMode::SmoothL1: return tape.smooth_l1_patches(pred, gt, T(1));
    case LossMode::CDSmoothL1: return tape.add(tape.chamfer_patches(pred, gt), tape.smooth_l1_patches(pred, gt, T(1)));
  }
  throw std::invalid_argument("loss_on_tape: bad mode");
}

template Tape<float>::Var loss_on_tape<float>(Tape<float>&, Tape<float>::Var, const Matrix<float>&, LossMode);
template Tape<double>::Var loss_on_tape<double>(Tape<double>&, Tape<double>::Var, const Matrix<double>&, LossMode);

SampleSequences sample_sequences(const InContextSample& sample, std::size_t n_c, std::size_t m, std::uint64_t seed,
                                 bool joint) {
  const auto sampler = joint ? &joint_sample : &independent_sample;
  SampleSequences seqs;
  auto [pi, pt] = sampler(sample.prompt_input, sample.prompt_target, n_c, m, derive_seed(seed, 1), true);
  auto [qi, qt] = sampler(sample.query_input, sample.query_target, n_c, m, derive_seed(seed, 2), false);
  seqs[Segment::PromptInput] = std::move(pi);
  seqs[Segment::PromptTarget] = std::move(pt);
  seqs[Segment::QueryInput] = std::move(qi);
  seqs[Segment::QueryTarget] = std::move(qt);
  return seqs;
}

BatchResult batch_gradients(const TrainState& state, const std::vector<const InContextSample*>& batch,
                            const std::vector<std::uint64_t>& seeds) {
  if (batch.empty() || batch.size() != seeds.size()) throw std::invalid_argument("batch_gradients: bad batch");
  const std::size_t threads = std::min<std::size_t>(static_cast<std::size_t>(state.train.threads), batch.size());
  BatchResult result;
  result.grads.reserve(state.model.tensors.size());
  for (const auto& t : state.model.tensors) result.grads.push_back(Matrix<float>::Zero(t.value.rows(), t.value.cols()));
  std::vector<double> losses(batch.size());

  const auto reduce = [&](std::size_t i, const SampleGrad& g) {
    losses[i] = g.loss;
    for (std::size_t k = 0; k < g.grads.size(); ++k) result.grads[k] += g.grads[k];
  };

  if (threads <= 1) {
    for (std::size_t i = 0; i < batch.size(); ++i) reduce(i, sample_gradient(state, *batch[i], seeds[i]));
  } else {
    std::vector<SampleGrad> per_sample(batch.size());
    std::vector<std::exception_ptr> errors(threads);
    {
      std::vector<std::jthread> workers;
      for (std::size_t w = 0; w < threads; ++w) {
        workers.emplace_back([&, w] {
          try {
            for (std::size_t i = w; i < batch.size(); i += threads) {
              per_sample[i] = sample_gradient(state, *batch[i], seeds[i]);
            }
          } catch (...) {
            errors[w] = std::current_exception();
          }
        });
      }
    }
    for (const auto& e : errors) {
      if (e) std::rethrow_exception(e);
    }
    for (std::size_t i = 0; i < batch.size(); ++i) reduce(i, per_sample[i]);
  }

  const float inv = 1.0f / static_cast<float>(batch.size());
  for (auto& g : result.grads) g *= inv;
  double total = 0.0;
  for (const double l : losses) total += l;
  result.loss = total / static_cast<double>(batch.size());
  return result;
}

void apply_update(TrainState& state, const std::vector<Matrix<float>>& grads, double learning_rate) {
  auto& opt = state.optimizer;
  const auto& cfg = state.train;
  if (grads.size() != state.model.tensors.size()) throw std::invalid_argument("apply_update: gradient count mismatch");
  ++opt.step;
  const auto t = static_cast<double>(opt.step);
  const auto b1 = static_cast<float>(cfg.beta1);
  const auto b2 = static_cast<float>(cfg.beta2);
  const auto c1 = static_cast<float>(1.0 - std::pow(cfg.beta1, t));
  const auto c2 = static_cast<float>(1.0 - std::pow(cfg.beta2, t));
  const auto lr = static_cast<float>(learning_rate);
  const auto eps = static_cast<float>(cfg.epsilon);
  const auto decay = static_cast<float>(1.0 - learning_rate * cfg.weight_decay);
  for (std::size_t k = 0; k < grads.size(); ++k) {
    auto& param = state.model.tensors[k];
    auto m = opt.first[k].array();
    auto v = opt.second[k].array();
    const auto g = grads[k].array();
    m = b1 * m + (1.0f - b1) * g;
    v = b2 * v + (1.0f - b2) * g.square();
    if (decays(param.name) && cfg.weight_decay != 0.0) param.value *= decay;
    param.value.array() -= lr * ((m / c1) / ((v / c2).sqrt() + eps));
  }
}

long steps_per_epoch(std::size_t dataset_size, int batch_size) {
  if (dataset_size == 0) return 0;
  return static_cast<long>((dataset_size + static_cast<std::size_t>(batch_size) - 1) /
                           static_cast<std::size_t>(batch_size));
}

TrainState make_train_state(const ModelConfig& model, const TrainConfig& train,
                            const std::vector<InContextSample>& dataset) {
  model.validate();
  train.validate();
  TrainState state;
  state.model = init_params<float>(model);
  state.optimizer = OptimizerState::zeros_like(state.model);
  state.train = train;
  state.total_steps = train.max_steps > 0 ? train.max_steps
                                          : static_cast<long>(train.epochs) *
                                                steps_per_epoch(dataset.size(), train.batch_size);
  const std::set<Label> parts = parts_in(dataset);
  if (train.label_mode == LabelMode::Bank) {
    state.bank = build_label_bank(train.bank_size, derive_seed(train.seed, 0xBA4C));
  } else if (!parts.empty()) {
    state.static_map = StaticLabelMap(std::vector<Label>(parts.begin(), parts.end()));
  }
  return state;
}

void preflight(const TrainState& state, const std::vector<InContextSample>& dataset) {
  if (dataset.empty()) throw std::invalid_argument("training dataset is empty");
  const auto& cfg = state.model.config;
  for (std::size_t i = 0; i < dataset.size(); ++i) {
    const auto& s = dataset[i];
    validate_sample(s);
    if (s.size() < static_cast<std::size_t>(cfg.n_c) || s.size() < static_cast<std::size_t>(cfg.m)) {
      throw std::invalid_argument("sample " + std::to_string(i) + " has fewer points than n_c or m");
    }
    if (s.task.task != Task::Segmentation) continue;
    const std::set<Label> parts(s.query_labels.begin(), s.query_labels.end());
    if (state.train.label_mode == LabelMode::Bank) {
      if (!state.bank) throw std::invalid_argument("bank label mode without a label bank");
      if (parts.size() > state.bank->size()) {
        throw std::invalid_argument("sample " + std::to_string(i) + " has " + std::to_string(parts.size()) +
                                    " parts but the label bank holds " + std::to_string(state.bank->size()));
      }
      for (const Label l : s.prompt_labels) {
        if (!parts.contains(l)) throw std::invalid_argument("sample " + std::to_string(i) + ": prompt part missing from query");
      }
    } else {
      if (!state.static_map) throw std::invalid_argument("static label mode without a label map");
      for (std::size_t k = 0; k < s.size(); ++k) {
        const Label l = s.query_labels[k];
        if (!state.static_map->contains(l) || state.static_map->at(l) != s.query_target.points[k]) {
          throw std::invalid_argument("sample " + std::to_string(i) +
                                      ": segmentation target does not use the static label map");
        }
      }
    }
  }
}

std::vector<StepRecord> train(const std::vector<InContextSample>& dataset, TrainState& state, long stop_after,
                              const std::function<void(const StepRecord&)>& on_step) {
  preflight(state, dataset);
  const long spe = steps_per_epoch(dataset.size(), state.train.batch_size);
  const auto batch_size = static_cast<std::size_t>(state.train.batch_size);
  std::vector<StepRecord> curve;
  long done = 0;
  std::vector<std::size_t> order;
  long order_epoch = -1;
  while (state.optimizer.step < state.total_steps && (stop_after == 0 || done < stop_after)) {
    const long step = state.optimizer.step;
    const long epoch = step / spe;
    if (epoch != order_epoch) {
      order = epoch_order(dataset.size(), state.train.seed, epoch);
      order_epoch = epoch;
    }
    const std::size_t begin = static_cast<std::size_t>(step % spe) * batch_size;
    const std::size_t end = std::min(begin + batch_size, dataset.size());
    std::vector<const InContextSample*> batch;
    std::vector<std::uint64_t> seeds;
    const std::uint64_t step_seed = derive_seed(state.train.seed, static_cast<std::uint64_t>(step) + 1);
    for (std::size_t i = begin; i < end; ++i) {
      batch.push_back(&dataset[order[i]]);
      seeds.push_back(derive_seed(step_seed, i - begin));
    }
    const BatchResult result = batch_gradients(state, batch, seeds);
    if (!std::isfinite(result.loss)) {
      throw Error("non-finite loss at step " + std::to_string(step));
    }
    const double lr = cosine_lr(state.train.learning_rate, step, state.total_steps);
    apply_update(state, result.grads, lr);
    const StepRecord rec{step, result.loss, lr};
    curve.push_back(rec);
    if (on_step) on_step(rec);
    ++done;
  }
  return curve;
}

// ------------------------------------------------------------- checkpoint

namespace {

constexpr std::uint16_t kCheckpointVersion = 1;

void put_tensor(ByteWriter& w, const std::string& name, const Matrix<float>& m) {
  w.str(name);
  w.u32(static_cast<std::uint32_t>(m.rows()));
  w.u32(static_cast<std::uint32_t>(m.cols()));
  for (Eigen::Index i = 0; i < m.size(); ++i) w.f32(m.data()[i]);
}

}  // namespace

std::vector<std::uint8_t> encode_checkpoint(const TrainState& state) {
  std::map<std::string, std::string> meta = state.model.config.to_key_values();
  for (const auto& [k, v] : state.train.to_key_values()) meta[k] = v;
  meta["state.step"] = std::to_string(state.optimizer.step);
  meta["state.total_steps"] = std::to_string(state.total_steps);
  if (state.bank) meta["state.bank_seed"] = std::to_string(state.bank->seed);
  std::ostringstream text;
  for (const auto& [k, v] : meta) text << k << "=" << v << "\n";

  ByteWriter w;
  w.bytes("PICK", 4);
  w.u16(kCheckpointVersion);
  w.str(text.str());
  std::size_t count = state.model.tensors.size() * 3 + (state.bank ? 1 : 0) + (state.static_map ? 1 : 0);
  w.u32(static_cast<std::uint32_t>(count));
  for (const auto& t : state.model.tensors) put_tensor(w, t.name, t.value);
  for (std::size_t k = 0; k < state.model.tensors.size(); ++k) {
    put_tensor(w, "adam.m/" + state.model.tensors[k].name, state.optimizer.first[k]);
    put_tensor(w, "adam.v/" + state.model.tensors[k].name, state.optimizer.second[k]);
  }
  if (state.bank) {
    Matrix<float> b(static_cast<Eigen::Index>(state.bank->size()), 3);
    for (std::size_t i = 0; i < state.bank->size(); ++i) b.row(static_cast<Eigen::Index>(i)) = state.bank->points[i].transpose();
    put_tensor(w, "icl.bank", b);
  }
  if (state.static_map) {
    const auto& parts = state.static_map->parts();
    Matrix<float> p(1, static_cast<Eigen::Index>(parts.size()));
    for (std::size_t i = 0; i < parts.size(); ++i) p(0, static_cast<Eigen::Index>(i)) = static_cast<float>(parts[i]);
    put_tensor(w, "static.parts", p);
  }
  return w.take();
}

TrainState decode_checkpoint(const std::vector<std::uint8_t>& bytes) {
  ByteReader r(bytes);
  char magic[4];
  r.bytes(magic, 4);
  if (std::string(magic, 4) != "PICK") throw ParseError("bad checkpoint magic", 0);
  const std::uint16_t version = r.u16();
  if (version != kCheckpointVersion) throw ParseError("unsupported checkpoint version " + std::to_string(version), 4);
  const std::size_t text_offset = r.offset();
  std::map<std::string, std::string> meta;
  for (auto& [k, v] : parse_key_values(r.str(), "checkpoint config")) meta[k] = v;

  TrainState state;
  try {
    state.model.config = ModelConfig::from_key_values(meta);
    state.train = TrainConfig::from_key_values(meta);
    state.optimizer.step = static_cast<long>(std::stoll(meta.at("state.step")));
    state.total_steps = static_cast<long>(std::stoll(meta.at("state.total_steps")));
  } catch (const std::exception& e) {
    throw ParseError(std::string("checkpoint config: ") + e.what(), text_offset);
  }
  state.model.layout = ParamLayout::build(state.model.config);

  std::map<std::string, Matrix<float>> tensors;
  const std::uint32_t count = r.u32();
  for (std::uint32_t i = 0; i < count; ++i) {
    const std::size_t at = r.offset();
    std::string name = r.str();
    const std::uint32_t rows = r.u32();
    const std::uint32_t cols = r.u32();
    if (static_cast<std::uint64_t>(rows) * cols * 4 > bytes.size()) throw ParseError("tensor '" + name + "' too large", at);
    Matrix<float> m(rows, cols);
    for (Eigen::Index k = 0; k < m.size(); ++k) m.data()[k] = r.f32();
    tensors[std::move(name)] = std::move(m);
  }
  if (!r.at_end()) throw ParseError("trailing bytes after last tensor", r.offset());

  const auto take = [&](const std::string& name, int rows, int cols) {
    const auto it = tensors.find(name);
    if (it == tensors.end()) throw Error("checkpoint is missing tensor '" + name + "'");
    if (it->second.rows() != rows || it->second.cols() != cols) {
      throw Error("checkpoint tensor '" + name + "' has shape " + std::to_string(it->second.rows()) + "x" +
                  std::to_string(it->second.cols()) + ", expected " + std::to_string(rows) + "x" + std::to_string(cols));
    }
    return it->second;
  };
  for (const auto& [name, shape] : parameter_shapes(state.model.config)) {
    state.model.tensors.push_back({name, take(name, shape.first, shape.second)});
    state.optimizer.first.push_back(take("adam.m/" + name, shape.first, shape.second));
    state.optimizer.second.push_back(take("adam.v/" + name, shape.first, shape.second));
  }
  if (const auto it = tensors.find("icl.bank"); it != tensors.end()) {
    if (it->second.cols() != 3) throw Error("checkpoint tensor 'icl.bank' must have 3 columns");
    LabelBank bank;
    bank.seed = meta.contains("state.bank_seed") ? std::stoull(meta.at("state.bank_seed")) : 0;
    for (Eigen::Index i = 0; i < it->second.rows(); ++i) bank.points.push_back(it->second.row(i).transpose());
    state.bank = std::move(bank);
  }
  if (const auto it = tensors.find("static.parts"); it != tensors.end()) {
    std::vector<Label> parts;
    for (Eigen::Index i = 0; i < it->second.size(); ++i) parts.push_back(static_cast<Label>(it->second.data()[i]));
    state.static_map = StaticLabelMap(std::move(parts));
  }
  return state;
}

void save_checkpoint(const TrainState& state, const std::filesystem::path& path) {
  write_file(path, encode_checkpoint(state));
}

TrainState load_checkpoint(const std::filesystem::path& path) { return decode_checkpoint(read_file(path)); }

}  // namespace pic
