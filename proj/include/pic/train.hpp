#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "pic/icl.hpp"
#include "pic/model.hpp"
#include "pic/taskgen.hpp"

namespace pic {

enum class LossMode : std::uint8_t { CD, SmoothL1, CDSmoothL1 };

std::string_view loss_mode_name(LossMode mode);
LossMode parse_loss_mode(std::string_view name);

/// How segmentation targets are encoded during training and evaluation.
///  Static: fixed global label map (PIC).
///  Bank:   per-iteration random mapping into a label bank (PIC++).
enum class LabelMode : std::uint8_t { Static, Bank };

struct TrainConfig {
  double learning_rate = 1e-3;
  double weight_decay = 0.05;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
  int epochs = 100;
  int batch_size = 16;
  /// When positive, overrides epochs * steps_per_epoch as the schedule length.
  long max_steps = 0;
  LossMode loss_mode = LossMode::CD;
  LabelMode label_mode = LabelMode::Static;
  std::size_t bank_size = LabelBank::kDefaultSize;
  bool mask_prompt_target = true;
  bool joint_sampling = true;
  int threads = 1;
  std::uint64_t seed = 0;

  void validate() const;
  std::map<std::string, std::string> to_key_values() const;
  static TrainConfig from_key_values(const std::map<std::string, std::string>& kv);
};

/// Cosine decay from `base` to 0 over `total` steps, evaluated at 0-based `step`.
double cosine_lr(double base, long step, long total);

/// Per-parameter first and second moments for the decoupled-weight-decay
/// Adam update.
struct OptimizerState {
  std::vector<Matrix<float>> first;
  std::vector<Matrix<float>> second;
  long step = 0;

  static OptimizerState zeros_like(const ModelState<float>& model);
};

/// Everything needed to continue training or to evaluate.
struct TrainState {
  ModelState<float> model;
  OptimizerState optimizer;
  TrainConfig train;
  long total_steps = 0;
  std::optional<LabelBank> bank;
  std::optional<StaticLabelMap> static_map;
};

struct StepRecord {
  long step = 0;
  double loss = 0.0;
  double learning_rate = 0.0;
};

/// Loss of one prediction against index-aligned ground-truth patches.
/// CD: mean over patches of chamfer_l2; CD+SmoothL1 adds the mean Smooth-l1
/// term with weight 1.
double compute_loss(const std::vector<std::vector<Point>>& pred, const std::vector<std::vector<Point>>& gt,
                    LossMode mode);

/// Same quantity recorded on a tape (rows are patches of xyz triples).
template <typename T>
typename Tape<T>::Var loss_on_tape(Tape<T>& tape, typename Tape<T>::Var pred, const Matrix<T>& gt, LossMode mode);

/// Patch sequences for a sample; uses joint or independent sampling.
SampleSequences sample_sequences(const InContextSample& sample, std::size_t n_c, std::size_t m, std::uint64_t seed,
                                 bool joint = true);

/// Gradients of the mean loss over `batch`, in layout order. Per-sample
/// gradients are reduced in batch order, so any thread count gives the
/// same bits.
struct BatchResult {
  double loss = 0.0;
  std::vector<Matrix<float>> grads;
};
BatchResult batch_gradients(const TrainState& state, const std::vector<const InContextSample*>& batch,
                            const std::vector<std::uint64_t>& seeds);

/// Applies one decoupled-weight-decay Adam step with the scheduled rate.
void apply_update(TrainState& state, const std::vector<Matrix<float>>& grads, double learning_rate);

/// Fresh state: parameters from the model config, zero moments, label
/// structures sized from the dataset.
TrainState make_train_state(const ModelConfig& model, const TrainConfig& train,
                            const std::vector<InContextSample>& dataset);

long steps_per_epoch(std::size_t dataset_size, int batch_size);

/// Checks that the dataset fits the model and label configuration. Throws
/// std::invalid_argument before any training starts.
void preflight(const TrainState& state, const std::vector<InContextSample>& dataset);

/// Runs training until `state.total_steps`, or until `stop_after` more steps
/// when non-zero. Resuming from a saved state reproduces the uninterrupted
/// run.
std::vector<StepRecord> train(const std::vector<InContextSample>& dataset, TrainState& state, long stop_after = 0,
                              const std::function<void(const StepRecord&)>& on_step = {});

/// Checkpoint container: little-endian, named f32 tensors plus a key=value
/// config echo.
void save_checkpoint(const TrainState& state, const std::filesystem::path& path);
TrainState load_checkpoint(const std::filesystem::path& path);
std::vector<std::uint8_t> encode_checkpoint(const TrainState& state);
TrainState decode_checkpoint(const std::vector<std::uint8_t>& bytes);

// ------------------------------------------------------------- inference

/// Prompt and query handed to the model at inference.
struct PromptPair {
  const PointCloud* input = nullptr;
  const PointCloud* target = nullptr;
};

/// Predicts the full query target, reassembled onto the query's point
/// indices and clipped to [-1, 1].
PointCloud infer(const ModelState<float>& model, const PointCloud& prompt_input, const PointCloud& prompt_target,
                 const PointCloud& query_input, std::uint64_t seed = 0);

/// Reassembles per-patch predictions onto the query's point indices. A point
/// takes the prediction from the patch where it has the lowest neighbour
/// rank; equal ranks are averaged. Points no patch covers copy the nearest
/// covered point.
PointCloud reassemble(const PatchSequence& query_input, const std::vector<std::vector<Point>>& patches,
                      const PointCloud& query_cloud);

// ------------------------------------------------------ prompt selection

enum class PromptStrategy : std::uint8_t { Random, ClassAware, CdAware, FeaAware };

std::string_view strategy_name(PromptStrategy s);
PromptStrategy parse_strategy(std::string_view name);

/// A candidate prompt pair from a pool.
struct PoolEntry {
  const PointCloud* input = nullptr;
  const PointCloud* target = nullptr;
  const std::vector<Label>* labels = nullptr;
  std::optional<ShapeKind> category;
};

/// Handcrafted 16-d shape descriptor: centroid, sorted covariance
/// eigenvalues, 10-bin radial histogram.
std::vector<double> shape_descriptor(const PointCloud& cloud);

/// Index into `pool` chosen by the strategy. Throws on an empty pool.
std::size_t select_prompt(PromptStrategy strategy, const PointCloud& query_input,
                          std::optional<ShapeKind> query_category, const std::vector<PoolEntry>& pool,
                          std::uint64_t seed);

// ------------------------------------------------------------ evaluation

struct EvalOptions {
  PromptStrategy strategy = PromptStrategy::Random;
  bool ideal_prompt = false;
  /// Emit the prompt target as the prediction (the "Copy" floor).
  bool copy_baseline = false;
  std::uint64_t seed = 0;
};

struct MetricRow {
  std::string task;
  std::string level;
  std::string metric;
  double value = 0.0;
  std::size_t n_samples = 0;
  std::uint64_t seed = 0;
};

struct EvalReport {
  std::vector<MetricRow> rows;
  /// Per evaluated sample: CD x1000 for geometric tasks, mIoU for segmentation.
  std::vector<double> per_sample;
};

/// Scores every sample of `eval` with prompts drawn from `pool` (same task
/// and level; registration prompts are re-rotated to the query's rotation;
/// segmentation prompts share the query's category and label encoding).
EvalReport evaluate(const TrainState& state, const std::vector<InContextSample>& eval,
                    const std::vector<InContextSample>& pool, const EvalOptions& options);

/// Same scoring with a caller-supplied prediction per sample; used for
/// the ground-truth and copy checks.
EvalReport score_predictions(const std::vector<InContextSample>& eval, const std::vector<PointCloud>& predictions,
                             const TrainState* state, std::uint64_t seed);

std::string metrics_tsv(const EvalReport& report);

struct GeneralizationReport {
  double miou = 0.0;
  double random_baseline = 0.0;
  std::size_t n_samples = 0;
  std::vector<double> per_sample;
};

/// One-shot segmentation on shape families absent from training. Each
/// query receives a fresh mapping from the state's label bank and a prompt
/// of the same category from `held_out` (or itself when `ideal_prompt`).
/// Refuses static-label states: a fixed map has no points for novel parts.
GeneralizationReport evaluate_generalization(const TrainState& state, const std::vector<PointCloud>& held_out,
                                             bool ideal_prompt, std::uint64_t seed);

/// Expected mIoU (percent) of assigning each point a uniformly random part.
double random_assignment_miou(std::span<const Label> gt, std::span<const Label> parts);

// -------------------------------------------------------------- ablations

enum class AblationAxis : std::uint8_t { MaskRatio, LossMode, BankSize };

std::string_view axis_name(AblationAxis axis);
AblationAxis parse_axis(std::string_view name);
std::vector<std::string> default_axis_values(AblationAxis axis);

struct AblationRun {
  std::string setting;
  double final_loss = 0.0;
  std::uint64_t train_seed = 0;
  EvalReport report;
};

/// Trains one model per setting from the same base configs and evaluates
/// each on `eval` (prompts drawn from `eval` itself).
std::vector<AblationRun> run_ablation(AblationAxis axis, const std::vector<std::string>& values,
                                      const ModelConfig& model, const TrainConfig& train,
                                      const std::vector<InContextSample>& train_set,
                                      const std::vector<InContextSample>& eval, std::uint64_t eval_seed);

/// Header: axis, setting, task, level, metric, value, n_samples, seed.
/// Each setting also gets a "train - final_loss" row.
std::string ablation_tsv(AblationAxis axis, const std::vector<AblationRun>& runs);

}  // namespace pic
