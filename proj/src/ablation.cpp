#include <cstdio>
#include <sstream>
#include <stdexcept>

#include "pic/train.hpp"

namespace pic {

std::string_view axis_name(AblationAxis axis) {
  switch (axis) {
    case AblationAxis::MaskRatio:
      return "mask-ratio";
    case AblationAxis::LossMode:
      return "loss";
    case AblationAxis::BankSize:
      return "nb";
  }
  return "?";
}

AblationAxis parse_axis(std::string_view name) {
  for (const auto a : {AblationAxis::MaskRatio, AblationAxis::LossMode, AblationAxis::BankSize}) {
    if (axis_name(a) == name) return a;
  }
  throw std::invalid_argument("unknown ablation axis '" + std::string(name) + "'");
}

std::vector<std::string> default_axis_values(AblationAxis axis) {
  switch (axis) {
    case AblationAxis::MaskRatio:
      return {"0.2", "0.3", "0.4", "0.5", "0.6", "0.7"};
    case AblationAxis::LossMode:
      return {"cd", "sl1", "cd+sl1"};
    case AblationAxis::BankSize:
      return {"8", "20", "50"};
  }
  return {};
}

namespace {

void apply_setting(AblationAxis axis, const std::string& value, ModelConfig& model, TrainConfig& train) {
  std::size_t used = 0;
  switch (axis) {
    case AblationAxis::MaskRatio:
      model.mask_ratio = std::stod(value, &used);
      break;
    case AblationAxis::LossMode:
      train.loss_mode = parse_loss_mode(value);
      used = value.size();
      break;
    case AblationAxis::BankSize:
      train.bank_size = std::stoul(value, &used);
      train.label_mode = LabelMode::Bank;
      break;
  }
  if (used != value.size()) throw std::invalid_argument("bad ablation value '" + value + "'");
}

}  // namespace

std::vector<AblationRun> run_ablation(AblationAxis axis, const std::vector<std::string>& values,
                                      const ModelConfig& model, const TrainConfig& train,
                                      const std::vector<InContextSample>& train_set,
                                      const std::vector<InContextSample>& eval, std::uint64_t eval_seed) {
  if (values.empty()) throw std::invalid_argument("ablation needs at least one setting");
  std::vector<AblationRun> runs;
  for (const auto& value : values) {
    ModelConfig mc = model;
    TrainConfig tc = train;
    apply_setting(axis, value, mc, tc);
    TrainState state = make_train_state(mc, tc, train_set);
    preflight(state, train_set);
    const auto curve = pic::train(train_set, state);
    AblationRun run;
    run.setting = value;
    run.final_loss = curve.empty() ? 0.0 : curve.back().loss;
    run.train_seed = tc.seed;
    EvalOptions opts;
    opts.seed = eval_seed;
    run.report = evaluate(state, eval, eval, opts);
    runs.push_back(std::move(run));
  }
  return runs;
}

std::string ablation_tsv(AblationAxis axis, const std::vector<AblationRun>& runs) {
  std::ostringstream out;
  out << "axis\tsetting\ttask\tlevel\tmetric\tvalue\tn_samples\tseed\n";
  char buf[64];
  for (const auto& run : runs) {
    std::snprintf(buf, sizeof(buf), "%.6f", run.final_loss);
    out << axis_name(axis) << '\t' << run.setting << "\ttrain\t-\tfinal_loss\t" << buf << "\t1\t" << run.train_seed
        << '\n';
    for (const auto& r : run.report.rows) {
      std::snprintf(buf, sizeof(buf), "%.6f", r.value);
      out << axis_name(axis) << '\t' << run.setting << '\t' << r.task << '\t' << r.level << '\t' << r.metric << '\t'
          << buf << '\t' << r.n_samples << '\t' << r.seed << '\n';
    }
  }
  return out.str();
}

}  // namespace pic
