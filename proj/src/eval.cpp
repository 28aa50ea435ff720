#include <Eigen/Eigenvalues>
#include <Eigen/SVD>
#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>
#include <map>
#include <set>
#include <sstream>

#include "pic/error.hpp"
#include "pic/rng.hpp"
#include "pic/train.hpp"

namespace pic {
namespace {

constexpr std::size_t kRadialBins = 10;

// Rotation R with b ~= R a, from index-aligned points about the origin.
Eigen::Matrix3d kabsch(std::span<const Point> a, std::span<const Point> b) {
  Eigen::Matrix3d h = Eigen::Matrix3d::Zero();
  for (std::size_t i = 0; i < a.size(); ++i) h += a[i].cast<double>() * b[i].cast<double>().transpose();
  const Eigen::JacobiSVD<Eigen::Matrix3d> svd(h, Eigen::ComputeFullU | Eigen::ComputeFullV);
  Eigen::Matrix3d d = Eigen::Matrix3d::Identity();
  d(2, 2) = (svd.matrixV() * svd.matrixU().transpose()).determinant() < 0 ? -1.0 : 1.0;
  return svd.matrixV() * d * svd.matrixU().transpose();
}

// Rotation of a registration pair, fitted on the first half of the points
// (the half that dual orientation leaves untouched).
Eigen::Matrix3d pair_rotation(const PointCloud& input, const PointCloud& target) {
  const std::size_t half = std::max<std::size_t>(input.size() / 2, std::min<std::size_t>(input.size(), 3));
  return kabsch(std::span(target.points).first(half), std::span(input.points).first(half));
}

PointCloud transform(const PointCloud& cloud, const Eigen::Matrix3d& r) {
  PointCloud out;
  out.points.reserve(cloud.size());
  const Eigen::Matrix3f rf = r.cast<float>();
  for (const auto& p : cloud.points) out.points.push_back(rf * p);
  return out;
}

std::string level_name(const TaskKind& task) {
  return task.has_level() ? "L" + std::to_string(task.level) : "-";
}

bool labels_covered(const std::vector<Label>& labels, const LabelMapping& mapping) {
  return std::all_of(labels.begin(), labels.end(), [&](Label l) { return mapping.contains(l); });
}

std::vector<Label> sorted_parts(std::span<const Label> labels) {
  std::set<Label> s(labels.begin(), labels.end());
  return {s.begin(), s.end()};
}

std::vector<Label> decode_segmentation(const InContextSample& sample, const PointCloud& pred, const TrainState* state) {
  if (state != nullptr && state->train.label_mode == LabelMode::Static && state->static_map) {
    std::vector<Label> out;
    out.reserve(pred.size());
    for (const auto& p : pred.points) out.push_back(state->static_map->decode(p));
    return out;
  }
  return decode_labels(pred, mapping_from_encoded(sample.query_labels, sample.query_target));
}

// Owns the clouds of the chosen prompt when they had to be rebuilt.
struct ResolvedPrompt {
  PointCloud input;
  PointCloud target;
};

ResolvedPrompt resolve_prompt(const TrainState& state, const InContextSample& query,
                              const std::vector<InContextSample>& pool, const EvalOptions& options,
                              std::uint64_t seed) {
  if (options.ideal_prompt) return {query.query_input, query.query_target};

  const Task task = query.task.task;
  std::optional<LabelMapping> mapping;
  if (task == Task::Segmentation && state.train.label_mode == LabelMode::Bank) {
    mapping = mapping_from_encoded(query.query_labels, query.query_target);
  }
  std::vector<std::size_t> owners;
  std::vector<PoolEntry> entries;
  for (std::size_t i = 0; i < pool.size(); ++i) {
    const auto& c = pool[i];
    if (c.task != query.task) continue;
    if (task == Task::Segmentation) {
      if (c.prompt_category != query.query_category) continue;
      if (mapping && !labels_covered(c.prompt_labels, *mapping)) continue;
    }
    owners.push_back(i);
    entries.push_back({&c.prompt_input, &c.prompt_target, &c.prompt_labels, c.prompt_category});
  }
  if (entries.empty()) {
    throw Error("no prompt candidates in the pool for task " + std::string(task_name(task)) + " " +
                level_name(query.task));
  }
  const std::size_t pick = select_prompt(options.strategy, query.query_input, query.query_category, entries, seed);
  const InContextSample& chosen = pool[owners[pick]];

  if (task == Task::Registration) {
    const Eigen::Matrix3d r_query = pair_rotation(query.prompt_input, query.prompt_target);
    const Eigen::Matrix3d r_chosen = pair_rotation(chosen.prompt_input, chosen.prompt_target);
    return {transform(chosen.prompt_input, r_query * r_chosen.transpose()), chosen.prompt_target};
  }
  if (mapping) return {chosen.prompt_input, encode_labels(chosen.prompt_labels, *mapping)};
  return {chosen.prompt_input, chosen.prompt_target};
}

void append_group_rows(EvalReport& report, const std::string& task, const std::string& metric,
                       const std::map<std::string, std::vector<double>>& by_level, std::uint64_t seed) {
  double level_sum = 0.0;
  std::size_t total = 0;
  for (const auto& [level, values] : by_level) {
    double sum = 0.0;
    for (const double v : values) sum += v;
    const double mean = sum / static_cast<double>(values.size());
    report.rows.push_back({task, level, metric, mean, values.size(), seed});
    level_sum += mean;
    total += values.size();
  }
  if (by_level.size() > 1 || (by_level.size() == 1 && by_level.begin()->first != "-")) {
    report.rows.push_back({task, "avg", metric, level_sum / static_cast<double>(by_level.size()), total, seed});
  }
}

}  // namespace

PointCloud reassemble(const PatchSequence& query_input, const std::vector<std::vector<Point>>& patches,
                      const PointCloud& query_cloud) {
  const std::size_t n = query_cloud.size();
  if (patches.size() != query_input.num_patches()) throw std::invalid_argument("reassemble: patch count mismatch");
  constexpr std::size_t kNone = std::numeric_limits<std::size_t>::max();
  std::vector<std::size_t> rank(n, kNone);
  std::vector<Eigen::Vector3d> sum(n, Eigen::Vector3d::Zero());
  std::vector<int> hits(n, 0);
  for (std::size_t c = 0; c < patches.size(); ++c) {
    const auto idx = query_input.patch_indices(c);
    if (patches[c].size() != idx.size()) throw std::invalid_argument("reassemble: patch size mismatch");
    for (std::size_t j = 0; j < idx.size(); ++j) {
      const std::size_t i = idx[j];
      if (j < rank[i]) {
        rank[i] = j;
        sum[i] = Eigen::Vector3d::Zero();
        hits[i] = 0;
      }
      if (j == rank[i]) {
        sum[i] += patches[c][j].cast<double>();
        ++hits[i];
      }
    }
  }
  std::vector<std::size_t> covered;
  for (std::size_t i = 0; i < n; ++i) {
    if (hits[i] > 0) covered.push_back(i);
  }
  if (covered.empty()) throw std::invalid_argument("reassemble: no point covered");
  PointCloud out;
  out.points.resize(n);
  for (const std::size_t i : covered) out.points[i] = (sum[i] / hits[i]).cast<float>();
  for (std::size_t i = 0; i < n; ++i) {
    if (hits[i] > 0) continue;
    std::size_t best = covered.front();
    float best_d = std::numeric_limits<float>::infinity();
    for (const std::size_t k : covered) {
      const float d = (query_cloud.points[k] - query_cloud.points[i]).squaredNorm();
      if (d < best_d) {
        best_d = d;
        best = k;
      }
    }
    out.points[i] = out.points[best];
  }
  for (auto& p : out.points) p = p.cwiseMax(-1.0f).cwiseMin(1.0f);
  return out;
}

PointCloud infer(const ModelState<float>& model, const PointCloud& prompt_input, const PointCloud& prompt_target,
                 const PointCloud& query_input, std::uint64_t seed) {
  const auto n_c = static_cast<std::size_t>(model.config.n_c);
  const auto m = static_cast<std::size_t>(model.config.m);
  if (prompt_input.size() != prompt_target.size()) throw std::invalid_argument("infer: prompt pair is not aligned");
  if (query_input.size() < n_c || prompt_input.size() < n_c) {
    throw std::invalid_argument("infer: clouds have fewer points than n_c");
  }
  SampleSequences seqs;
  auto [pi, pt] = joint_sample(prompt_input, prompt_target, n_c, m, derive_seed(seed, 1), true);
  // The query target is fully masked, so its sequence only supplies shape.
  auto [qi, qt] = joint_sample(query_input, query_input, n_c, m, derive_seed(seed, 2), false);
  seqs[Segment::PromptInput] = std::move(pi);
  seqs[Segment::PromptTarget] = std::move(pt);
  seqs[Segment::QueryInput] = std::move(qi);
  seqs[Segment::QueryTarget] = std::move(qt);

  Tape<float> tape(false);
  const auto params = bind_parameters(tape, model);
  const auto out = forward<float>(tape, params, model, seqs, inference_layout(n_c));
  const auto patches = unpack_patches(tape.value(out.prediction), model.config.m);
  return reassemble(seqs[Segment::QueryInput], patches, query_input);
}

std::string_view strategy_name(PromptStrategy s) {
  switch (s) {
    case PromptStrategy::Random: return "random";
    case PromptStrategy::ClassAware: return "class";
    case PromptStrategy::CdAware: return "cd";
    case PromptStrategy::FeaAware: return "fea";
  }
  return "random";
}

PromptStrategy parse_strategy(std::string_view name) {
  if (name == "random") return PromptStrategy::Random;
  if (name == "class") return PromptStrategy::ClassAware;
  if (name == "cd") return PromptStrategy::CdAware;
  if (name == "fea") return PromptStrategy::FeaAware;
  throw std::invalid_argument("unknown prompt strategy '" + std::string(name) + "'");
}

std::vector<double> shape_descriptor(const PointCloud& cloud) {
  if (cloud.size() == 0) throw std::invalid_argument("shape_descriptor: empty cloud");
  const auto n = static_cast<double>(cloud.size());
  Eigen::Vector3d mean = Eigen::Vector3d::Zero();
  for (const auto& p : cloud.points) mean += p.cast<double>();
  mean /= n;
  Eigen::Matrix3d cov = Eigen::Matrix3d::Zero();
  std::vector<double> hist(kRadialBins, 0.0);
  const double max_radius = std::sqrt(3.0) * 2.0;
  for (const auto& p : cloud.points) {
    const Eigen::Vector3d d = p.cast<double>() - mean;
    cov += d * d.transpose();
    const auto bin = static_cast<std::size_t>(d.norm() / max_radius * kRadialBins);
    hist[std::min(bin, kRadialBins - 1)] += 1.0 / n;
  }
  cov /= n;
  const Eigen::SelfAdjointEigenSolver<Eigen::Matrix3d> eig(cov, Eigen::EigenvaluesOnly);
  const Eigen::Vector3d ev = eig.eigenvalues();  // ascending
  std::vector<double> out = {mean.x(), mean.y(), mean.z(), ev(2), ev(1), ev(0)};
  out.insert(out.end(), hist.begin(), hist.end());
  return out;
}

std::size_t select_prompt(PromptStrategy strategy, const PointCloud& query_input,
                          std::optional<ShapeKind> query_category, const std::vector<PoolEntry>& pool,
                          std::uint64_t seed) {
  if (pool.empty()) throw std::invalid_argument("select_prompt: empty prompt pool");
  switch (strategy) {
    case PromptStrategy::Random: {
      Rng rng(seed);
      return rng.index(pool.size());
    }
    case PromptStrategy::ClassAware: {
      std::vector<std::size_t> same;
      for (std::size_t i = 0; i < pool.size(); ++i) {
        if (query_category && pool[i].category == query_category) same.push_back(i);
      }
      Rng rng(seed);
      if (same.empty()) return rng.index(pool.size());
      return same[rng.index(same.size())];
    }
    case PromptStrategy::CdAware: {
      std::size_t best = 0;
      double best_cd = std::numeric_limits<double>::infinity();
      for (std::size_t i = 0; i < pool.size(); ++i) {
        const double cd = chamfer_l2(*pool[i].input, query_input);
        if (cd < best_cd) {
          best_cd = cd;
          best = i;
        }
      }
      return best;
    }
    case PromptStrategy::FeaAware: {
      const auto q = shape_descriptor(query_input);
      const auto norm = [](const std::vector<double>& v) {
        double s = 0.0;
        for (const double x : v) s += x * x;
        return std::sqrt(s);
      };
      const double qn = norm(q);
      std::size_t best = 0;
      double best_sim = -std::numeric_limits<double>::infinity();
      for (std::size_t i = 0; i < pool.size(); ++i) {
        const auto d = shape_descriptor(*pool[i].input);
        double dot = 0.0;
        for (std::size_t k = 0; k < d.size(); ++k) dot += d[k] * q[k];
        const double denom = norm(d) * qn;
        const double sim = denom > 0.0 ? dot / denom : 0.0;
        if (sim > best_sim) {
          best_sim = sim;
          best = i;
        }
      }
      return best;
    }
  }
  throw std::invalid_argument("select_prompt: bad strategy");
}

EvalReport score_predictions(const std::vector<InContextSample>& eval, const std::vector<PointCloud>& predictions,
                             const TrainState* state, std::uint64_t seed) {
  if (eval.size() != predictions.size()) throw std::invalid_argument("score_predictions: count mismatch");
  std::map<std::string, std::map<std::string, std::vector<double>>> cd;
  std::vector<double> miou;
  EvalReport report;
  for (std::size_t i = 0; i < eval.size(); ++i) {
    const auto& s = eval[i];
    if (s.task.task == Task::Segmentation) {
      const auto pred = decode_segmentation(s, predictions[i], state);
      const double v = instance_miou(pred, s.query_labels, sorted_parts(s.query_labels));
      miou.push_back(v);
      report.per_sample.push_back(v);
    } else {
      const double v = 1000.0 * chamfer_l2(predictions[i], s.query_target);
      cd[std::string(task_name(s.task.task))][level_name(s.task)].push_back(v);
      report.per_sample.push_back(v);
    }
  }
  for (const auto& [task, levels] : cd) append_group_rows(report, task, "cd_x1000", levels, seed);
  if (!miou.empty()) append_group_rows(report, "segmentation", "miou", {{"-", miou}}, seed);
  return report;
}

EvalReport evaluate(const TrainState& state, const std::vector<InContextSample>& eval,
                    const std::vector<InContextSample>& pool, const EvalOptions& options) {
  std::vector<PointCloud> predictions;
  predictions.reserve(eval.size());
  for (std::size_t i = 0; i < eval.size(); ++i) {
    const auto& s = eval[i];
    const std::uint64_t sample_seed = derive_seed(options.seed, i);
    const ResolvedPrompt prompt = resolve_prompt(state, s, pool, options, derive_seed(sample_seed, 1));
    if (options.copy_baseline) {
      predictions.push_back(prompt.target);
    } else {
      predictions.push_back(infer(state.model, prompt.input, prompt.target, s.query_input, derive_seed(sample_seed, 2)));
    }
  }
  return score_predictions(eval, predictions, &state, options.seed);
}

std::string metrics_tsv(const EvalReport& report) {
  std::ostringstream out;
  out << "task\tlevel\tmetric\tvalue\tn_samples\tseed\n";
  for (const auto& r : report.rows) {
    char value[64];
    std::snprintf(value, sizeof(value), "%.6f", r.value);
    out << r.task << '\t' << r.level << '\t' << r.metric << '\t' << value << '\t' << r.n_samples << '\t' << r.seed
        << '\n';
  }
  return out.str();
}

double random_assignment_miou(std::span<const Label> gt, std::span<const Label> parts) {
  if (gt.empty() || parts.empty()) throw std::invalid_argument("random_assignment_miou: empty input");
  const auto k = static_cast<double>(parts.size());
  const auto n = static_cast<double>(gt.size());
  double sum = 0.0;
  for (const Label p : parts) {
    const auto nk = static_cast<double>(std::count(gt.begin(), gt.end(), p));
    const double inter = nk / k;
    const double uni = nk + n / k - inter;
    sum += uni > 0.0 ? inter / uni : 1.0;
  }
  return 100.0 * sum / k;
}

GeneralizationReport evaluate_generalization(const TrainState& state, const std::vector<PointCloud>& held_out,
                                             bool ideal_prompt, std::uint64_t seed) {
  if (!state.bank) {
    throw Error("generalization needs a label-bank model; a static label map has no points for novel parts");
  }
  GeneralizationReport report;
  double sum = 0.0;
  double baseline = 0.0;
  for (std::size_t i = 0; i < held_out.size(); ++i) {
    const auto& query = held_out[i];
    if (!query.has_labels()) throw std::invalid_argument("evaluate_generalization: held-out cloud without labels");
    const std::uint64_t s = derive_seed(seed, i);
    const LabelMapping mapping = draw_mapping(*state.bank, query.labels, derive_seed(s, 1));

    std::size_t prompt_index = i;
    if (!ideal_prompt) {
      std::vector<std::size_t> same;
      for (std::size_t j = 0; j < held_out.size(); ++j) {
        if (j != i && held_out[j].category == query.category && labels_covered(held_out[j].labels, mapping)) {
          same.push_back(j);
        }
      }
      if (same.empty()) throw Error("no held-out prompt shares the category of sample " + std::to_string(i));
      Rng rng(derive_seed(s, 2));
      prompt_index = same[rng.index(same.size())];
    }
    const PointCloud& prompt = held_out[prompt_index];
    PointCloud prompt_input;
    prompt_input.points = prompt.points;
    PointCloud query_input;
    query_input.points = query.points;
    const PointCloud pred =
        infer(state.model, prompt_input, encode_labels(prompt.labels, mapping), query_input, derive_seed(s, 3));
    const auto parts = sorted_parts(query.labels);
    const double v = instance_miou(decode_labels(pred, mapping), query.labels, parts);
    report.per_sample.push_back(v);
    sum += v;
    baseline += random_assignment_miou(query.labels, parts);
  }
  report.n_samples = held_out.size();
  if (report.n_samples > 0) {
    report.miou = sum / static_cast<double>(report.n_samples);
    report.random_baseline = baseline / static_cast<double>(report.n_samples);
  }
  return report;
}

}  // namespace pic
