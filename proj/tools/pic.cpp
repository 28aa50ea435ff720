#include <CLI11.hpp>

#include <algorithm>
#include <cstdlib>
#include <fstream>
#include <iostream>
#include <map>
#include <set>
#include <sstream>

#include "pic/error.hpp"
#include "pic/icl.hpp"
#include "pic/io_util.hpp"
#include "pic/rng.hpp"
#include "pic/train.hpp"

namespace {

using namespace pic;

// Bad flag combinations found after parsing; exit code 2 like parse errors.
struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

std::vector<std::string> split_list(const std::string& text) {
  std::vector<std::string> out;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    if (!item.empty()) out.push_back(item);
  }
  return out;
}

// Run manifest written next to every output: flag echo plus content hashes.
class RunManifest {
 public:
  explicit RunManifest(std::string command) { set("command", std::move(command)); }
  void set(const std::string& key, std::string value) { entries_[key] = std::move(value); }
  void hash(const std::string& key, const std::filesystem::path& path) { set(key + ".sha1", file_content_hash(path)); }
  // Effective value of every flag, defaults included.
  void echo(const CLI::App& app) {
    std::istringstream text(app.config_to_str(true, false));
    std::string line;
    while (std::getline(text, line)) {
      const auto eq = line.find('=');
      if (eq == std::string::npos || line.starts_with('[')) continue;
      set("flag." + line.substr(0, eq), line.substr(eq + 1));
    }
  }
  void write(const std::filesystem::path& output) const {
    std::ostringstream text;
    for (const auto& [k, v] : entries_) text << k << "=" << v << "\n";
    write_text_file(output.string() + ".run", text.str());
  }

 private:
  std::map<std::string, std::string> entries_;
};

// ------------------------------------------------------------------ gen-data

struct GenOptions {
  std::string out;
  std::string tasks = "all";
  std::string levels = "1,2,3,4,5";
  std::string shapes = "all";
  std::size_t count = 100;
  std::uint64_t seed = 0;
  std::size_t n_points = 1024;
  bool icl = false;
  bool static_labels = false;
  double ice_mix = 0.0;
  std::size_t nb = LabelBank::kDefaultSize;
  bool dual_orientation = false;
};

std::vector<Task> parse_tasks(const std::string& text) {
  if (text == "all") return {Task::Reconstruction, Task::Denoising, Task::Registration, Task::Segmentation};
  std::vector<Task> out;
  for (const auto& name : split_list(text)) {
    const auto t = parse_task(name);
    if (!t || *t == Task::IceRestoration) throw UsageError("unknown task '" + name + "'");
    out.push_back(*t);
  }
  if (out.empty()) throw UsageError("--tasks is empty");
  return out;
}

std::vector<ShapeKind> parse_shapes(const std::string& text) {
  if (text == "all") return all_shapes();
  if (text == "composite") return composite_shapes();
  std::vector<ShapeKind> out;
  for (const auto& name : split_list(text)) {
    const auto s = parse_shape(name);
    if (!s) throw UsageError("unknown shape '" + name + "'");
    out.push_back(*s);
  }
  if (out.empty()) throw UsageError("--shapes is empty");
  return out;
}

int cmd_gen_data(const GenOptions& o, const CLI::App& app) {
  if (o.icl && o.static_labels) throw UsageError("--icl and --static-labels are mutually exclusive");
  if (o.ice_mix < 0.0 || o.ice_mix > 1.0) throw UsageError("--ice-mix must be in [0, 1]");
  const auto tasks = parse_tasks(o.tasks);
  const auto shapes = parse_shapes(o.shapes);
  std::vector<int> levels;
  for (const auto& l : split_list(o.levels)) {
    int v = 0;
    try {
      v = std::stoi(l);
    } catch (const std::exception&) {
      throw UsageError("bad level '" + l + "'");
    }
    if (v < 1 || v > kNumLevels) throw UsageError("levels must be in 1..5");
    levels.push_back(v);
  }
  if (levels.empty()) throw UsageError("--levels is empty");
  std::vector<ShapeKind> seg_shapes;
  for (const auto s : shapes) {
    if (parts_of(s).size() > 1) seg_shapes.push_back(s);
  }
  const bool wants_seg = std::find(tasks.begin(), tasks.end(), Task::Segmentation) != tasks.end();
  if (wants_seg && seg_shapes.empty()) throw UsageError("segmentation needs at least one multi-part shape");

  const StaticLabelMap static_map = StaticLabelMap::all_parts();
  std::optional<LabelBank> bank;
  if (o.icl) bank = build_label_bank(o.nb, derive_seed(o.seed, 0xBA4C));

  std::vector<InContextSample> samples;
  samples.reserve(o.count);
  for (std::size_t i = 0; i < o.count; ++i) {
    const std::uint64_t s = derive_seed(o.seed, i);
    Rng rng(derive_seed(s, 100));
    if (o.ice_mix > 0.0 && rng.uniform() < o.ice_mix) {
      const ShapeKind qk = shapes[rng.index(shapes.size())];
      const ShapeKind pk = shapes[rng.index(shapes.size())];
      CorruptionOp op;
      op.kind = static_cast<CorruptionKind>(rng.index(3));
      op.seed = derive_seed(s, 101);
      samples.push_back(make_ice_sample(gen_shape(qk, o.n_points, derive_seed(s, 102)),
                                        gen_shape(pk, o.n_points, derive_seed(s, 103)), op, s));
      continue;
    }
    const Task task = tasks[i % tasks.size()];
    const int level = levels[(i / tasks.size()) % levels.size()];
    if (task == Task::Segmentation) {
      const ShapeKind k = seg_shapes[rng.index(seg_shapes.size())];
      const PointCloud q = gen_shape(k, o.n_points, derive_seed(s, 102));
      const PointCloud p = gen_shape(k, o.n_points, derive_seed(s, 103));
      if (bank) {
        samples.push_back(assemble_icl_segmentation(q, p, *bank, s));
      } else {
        AssembleOptions opt{&static_map, o.dual_orientation};
        samples.push_back(assemble_sample(TaskKind::make(task), q, p, s, opt));
      }
      continue;
    }
    const ShapeKind qk = shapes[rng.index(shapes.size())];
    const ShapeKind pk = shapes[rng.index(shapes.size())];
    AssembleOptions opt{nullptr, o.dual_orientation};
    samples.push_back(assemble_sample(TaskKind::make(task, level), gen_shape(qk, o.n_points, derive_seed(s, 102)),
                                      gen_shape(pk, o.n_points, derive_seed(s, 103)), s, opt));
  }

  std::map<std::string, std::string> extra = {
      {"seed", std::to_string(o.seed)},
      {"n_points", std::to_string(o.n_points)},
      {"labels", o.icl ? "bank" : "static"},
  };
  if (bank) extra["bank_size"] = std::to_string(o.nb);
  write_dataset(samples, o.out, extra);

  const DatasetManifest m = summarize(samples);
  std::cout << "wrote " << m.total << " samples to " << o.out << "\n";
  for (const auto& [k, v] : m.counts) {
    if (k.find(".L") == std::string::npos) std::cout << "  " << k << "\t" << v << "\n";
  }
  RunManifest run("gen-data");
  run.echo(app);
  run.hash("dataset", o.out);
  run.write(o.out);
  return 0;
}

// --------------------------------------------------------------------- train

struct TrainOptions {
  std::string data;
  std::string out;
  std::string log;
  std::string variant = "sep";
  double mask_ratio = 0.7;
  int epochs = 100;
  int batch = 16;
  long max_steps = 0;
  long stop_after = 0;
  double lr = 1e-3;
  double weight_decay = 0.05;
  std::string loss = "cd";
  std::string labels = "auto";
  std::size_t nb = LabelBank::kDefaultSize;
  std::string init_from;
  std::string resume;
  int threads = 1;
  std::uint64_t seed = 0;
  int dim = 96;
  int depth = 4;
  int decoder_depth = 2;
  int merge_block = 2;
  int heads = 4;
  int n_c = 64;
  int m = 32;
  std::string target_pos = "default";
  std::string prompt_position = "before";
  bool no_joint_sampling = false;
};

std::pair<ModelConfig, TrainConfig> build_configs(const TrainOptions& o) {
  ModelConfig mc = ModelConfig::defaults(parse_variant(o.variant));
  mc.feature_dim = o.dim;
  mc.encoder_depth = o.depth;
  mc.decoder_depth = o.decoder_depth;
  mc.merge_block = o.merge_block;
  mc.heads = o.heads;
  mc.n_c = o.n_c;
  mc.m = o.m;
  mc.mask_ratio = o.mask_ratio;
  mc.seed = o.seed;
  mc.prompt_position = o.prompt_position == "behind" ? PromptPosition::Behind : PromptPosition::Before;
  if (o.target_pos != "default") mc.target_position = parse_target_position(o.target_pos);

  TrainConfig tc;
  tc.learning_rate = o.lr;
  tc.weight_decay = o.weight_decay;
  tc.epochs = o.epochs;
  tc.batch_size = o.batch;
  tc.max_steps = o.max_steps;
  tc.loss_mode = parse_loss_mode(o.loss);
  tc.bank_size = o.nb;
  tc.threads = o.threads;
  tc.seed = o.seed;
  tc.joint_sampling = !o.no_joint_sampling;
  std::string labels = o.labels;
  if (labels == "auto") {
    const auto manifest = read_manifest(o.data);
    const auto it = manifest.extra.find("labels");
    labels = it != manifest.extra.end() ? it->second : "static";
  }
  if (labels != "static" && labels != "bank") throw UsageError("--labels must be auto, static or bank");
  tc.label_mode = labels == "bank" ? LabelMode::Bank : LabelMode::Static;
  try {
    mc.validate();
    tc.validate();
  } catch (const std::invalid_argument& e) {
    throw UsageError(e.what());
  }
  return {mc, tc};
}

int cmd_train(const TrainOptions& o, const CLI::App& app) {
  const auto dataset = read_dataset(o.data);
  TrainState state;
  const bool resuming = !o.resume.empty();
  if (resuming) {
    state = load_checkpoint(o.resume);
    state.train.threads = o.threads;
  } else {
    const auto [mc, tc] = build_configs(o);
    state = make_train_state(mc, tc, dataset);
    if (!o.init_from.empty()) {
      const TrainState init = load_checkpoint(o.init_from);
      if (init.model.tensors.size() != state.model.tensors.size()) {
        throw Error("--init-from checkpoint has a different architecture");
      }
      for (std::size_t k = 0; k < state.model.tensors.size(); ++k) {
        const auto& src = init.model.tensors[k];
        auto& dst = state.model.tensors[k];
        if (src.name != dst.name || src.value.rows() != dst.value.rows() || src.value.cols() != dst.value.cols()) {
          throw Error("--init-from tensor '" + src.name + "' does not match the model configuration");
        }
        dst.value = src.value;
      }
    }
  }
  preflight(state, dataset);

  const std::string log_path = o.log.empty() ? o.out + ".loss.tsv" : o.log;
  std::ofstream log;
  if (resuming && std::filesystem::exists(log_path)) {
    log.open(log_path, std::ios::app);
  } else {
    log.open(log_path, std::ios::trunc);
    log << "step\tloss\tlr\n";
  }
  if (!log) throw Error("cannot open loss log " + log_path);
  const auto curve = train(dataset, state, o.stop_after, [&](const StepRecord& r) {
    char line[128];
    std::snprintf(line, sizeof(line), "%ld\t%.9g\t%.9g\n", r.step, r.loss, r.learning_rate);
    log << line;
    log.flush();
  });
  save_checkpoint(state, o.out);
  std::cout << "trained " << curve.size() << " steps (" << state.optimizer.step << "/" << state.total_steps << ")";
  if (!curve.empty()) std::cout << ", final loss " << curve.back().loss;
  std::cout << "\n";

  RunManifest run("train");
  run.echo(app);
  run.hash("dataset", o.data);
  run.hash("checkpoint", o.out);
  for (const auto& [k, v] : state.model.config.to_key_values()) run.set("config." + k, v);
  for (const auto& [k, v] : state.train.to_key_values()) run.set("config." + k, v);
  run.write(o.out);
  return 0;
}

// ---------------------------------------------------------------------- eval

struct EvalCliOptions {
  std::string ckpt;
  std::string data;
  std::string pool;
  std::string out;
  std::string strategy = "random";
  bool ideal_prompt = false;
  bool copy = false;
  bool generalization = false;
  std::uint64_t seed = 0;
};

int cmd_eval(const EvalCliOptions& o, const CLI::App& app) {
  const PromptStrategy strategy = parse_strategy(o.strategy);
  const TrainState state = load_checkpoint(o.ckpt);
  const auto eval = read_dataset(o.data);
  EvalReport report;
  if (o.generalization) {
    std::vector<PointCloud> held_out;
    for (const auto& s : eval) {
      if (s.task.task != Task::Segmentation) continue;
      PointCloud c;
      c.points = s.query_input.points;
      c.labels = s.query_labels;
      c.category = s.query_category;
      held_out.push_back(std::move(c));
    }
    if (held_out.empty()) throw Error("--generalization needs segmentation samples");
    const auto g = evaluate_generalization(state, held_out, o.ideal_prompt, o.seed);
    report.rows.push_back({"generalization", "-", "miou", g.miou, g.n_samples, o.seed});
    report.rows.push_back({"generalization", "-", "random_baseline", g.random_baseline, g.n_samples, o.seed});
  } else {
    std::vector<InContextSample> pool;
    if (!o.pool.empty()) {
      pool = read_dataset(o.pool);
      if (pool.empty()) throw Error("prompt pool " + o.pool + " is empty");
    } else {
      pool = eval;
    }
    EvalOptions opts;
    opts.strategy = strategy;
    opts.ideal_prompt = o.ideal_prompt;
    opts.copy_baseline = o.copy;
    opts.seed = o.seed;
    report = evaluate(state, eval, pool, opts);
  }
  const std::string tsv = metrics_tsv(report);
  if (o.out.empty()) {
    std::cout << tsv;
  } else {
    write_text_file(o.out, tsv);
    std::cout << tsv;
    RunManifest run("eval");
    run.echo(app);
    run.hash("dataset", o.data);
    run.hash("checkpoint", o.ckpt);
    if (!o.pool.empty()) run.hash("pool", o.pool);
    run.hash("metrics", o.out);
    run.write(o.out);
  }
  return 0;
}

// -------------------------------------------------------------------- ablate

struct AblateOptions {
  std::string eval;
  std::string out;
  std::string axis;
  std::string values;
};

int cmd_ablate(const TrainOptions& o, const AblateOptions& a, const CLI::App& app) {
  const AblationAxis axis = parse_axis(a.axis);
  const auto values = a.values.empty() ? default_axis_values(axis) : split_list(a.values);
  const auto train_set = read_dataset(o.data);
  const auto eval = read_dataset(a.eval);
  if (eval.empty()) throw Error("evaluation dataset " + a.eval + " is empty");
  const auto [mc, tc] = build_configs(o);
  const auto runs = run_ablation(axis, values, mc, tc, train_set, eval, o.seed);
  const std::string tsv = ablation_tsv(axis, runs);
  std::cout << tsv;
  if (!a.out.empty()) {
    write_text_file(a.out, tsv);
    RunManifest run("ablate");
    run.echo(app);
    run.hash("dataset", o.data);
    run.hash("eval", a.eval);
    run.hash("metrics", a.out);
    run.write(a.out);
  }
  return 0;
}

// --------------------------------------------------------------------- infer

struct InferOptions {
  std::string ckpt;
  std::string prompt;
  std::string query;
  std::string out;
  std::size_t prompt_index = 0;
  std::size_t query_index = 0;
  std::uint64_t seed = 0;
};

int cmd_infer(const InferOptions& o, const CLI::App& app) {
  const TrainState state = load_checkpoint(o.ckpt);
  const auto prompts = read_dataset(o.prompt);
  const auto queries = read_dataset(o.query);
  if (o.prompt_index >= prompts.size()) throw Error("prompt index out of range");
  if (o.query_index >= queries.size()) throw Error("query index out of range");
  const InContextSample& p = prompts[o.prompt_index];
  const InContextSample& q = queries[o.query_index];

  InContextSample result;
  result.task = p.task;
  result.prompt_input = p.prompt_input;
  result.prompt_target = p.prompt_target;
  result.prompt_labels = p.prompt_labels;
  result.prompt_category = p.prompt_category;
  result.query_input = q.query_input;
  result.seed = o.seed;
  result.query_target = infer(state.model, p.prompt_input, p.prompt_target, q.query_input, o.seed);

  if (p.task.task == Task::Segmentation) {
    if (state.train.label_mode == LabelMode::Bank) {
      if (p.prompt_labels.empty()) throw Error("label-bank segmentation needs a labeled prompt to recover the mapping");
      const LabelMapping mapping = mapping_from_encoded(p.prompt_labels, p.prompt_target);
      result.query_labels = decode_labels(result.query_target, mapping);
    } else {
      if (!state.static_map) throw Error("checkpoint has no static label map");
      for (const auto& pt : result.query_target.points) result.query_labels.push_back(state.static_map->decode(pt));
    }
    result.query_category = category_of_part(result.query_labels.front());
    std::ofstream labels(o.out + ".labels.txt");
    for (const Label l : result.query_labels) labels << l << "\n";
    if (!labels) throw Error("cannot write " + o.out + ".labels.txt");
  }
  write_dataset({result}, o.out, {{"source", "infer"}});
  std::cout << "wrote prediction (" << result.query_target.size() << " points) to " << o.out << "\n";

  RunManifest run("infer");
  run.echo(app);
  run.hash("checkpoint", o.ckpt);
  run.hash("prompt", o.prompt);
  run.hash("query", o.query);
  run.hash("prediction", o.out);
  run.write(o.out);
  return 0;
}

// ------------------------------------------------------------------- inspect

int cmd_inspect(const std::string& data, const std::string& ckpt) {
  if (data.empty() == ckpt.empty()) throw UsageError("inspect takes exactly one of --data or --ckpt");
  if (!data.empty()) {
    const auto samples = read_dataset(data);
    const DatasetManifest m = summarize(samples);
    std::cout << "samples\t" << m.total << "\n";
    for (const auto& [k, v] : m.counts) std::cout << k << "\t" << v << "\n";
    std::cout << "sha1\t" << file_content_hash(data) << "\n";
    return 0;
  }
  const TrainState state = load_checkpoint(ckpt);
  for (const auto& [k, v] : state.model.config.to_key_values()) std::cout << k << "\t" << v << "\n";
  for (const auto& [k, v] : state.train.to_key_values()) std::cout << k << "\t" << v << "\n";
  std::cout << "state.step\t" << state.optimizer.step << "\nstate.total_steps\t" << state.total_steps << "\n";
  std::cout << "parameters\t" << state.model.parameter_count() << "\n";
  for (const auto& t : state.model.tensors) {
    std::cout << "tensor\t" << t.name << "\t" << t.value.rows() << "x" << t.value.cols() << "\n";
  }
  if (state.bank) std::cout << "label_bank\t" << state.bank->size() << "\n";
  if (state.static_map) std::cout << "static_parts\t" << state.static_map->parts().size() << "\n";
  return 0;
}

// Splices `--config FILE` entries in front of the command-line flags so that
// explicit flags take precedence. Unknown keys are rejected.
std::vector<std::string> expand_config(CLI::App& app, const std::vector<std::string>& args) {
  const auto at = std::find(args.begin(), args.end(), "--config");
  if (at == args.end()) return args;
  if (args.empty() || std::next(at) == args.end()) throw UsageError("--config needs a file");
  CLI::App* sub = app.get_subcommand_no_throw(args.front());
  if (sub == nullptr || sub->get_option_no_throw("--config") == nullptr) {
    throw UsageError("--config must follow a subcommand that accepts it");
  }
  std::vector<std::string> out = {args.front()};
  for (const auto& [key, value] : read_key_values(*std::next(at))) {
    const CLI::Option* opt = sub->get_option_no_throw("--" + key);
    if (opt == nullptr || key == "config") throw UsageError("unknown config key '" + key + "'");
    if (opt->get_expected_max() == 0) {
      if (value == "true" || value == "1") out.push_back("--" + key);
      else if (value != "false" && value != "0") throw UsageError("config key '" + key + "' takes true or false");
      continue;
    }
    out.push_back("--" + key);
    out.push_back(value);
  }
  for (auto it = std::next(args.begin()); it != args.end(); ++it) {
    if (it == at) {
      ++it;
      continue;
    }
    out.push_back(*it);
  }
  return out;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Point-cloud in-context learning: data, training, evaluation"};
  app.require_subcommand(1);
  app.allow_config_extras(false);
  app.option_defaults()->always_capture_default()->multi_option_policy(CLI::MultiOptionPolicy::TakeLast);

  const auto seed_option = [](CLI::App* sub, std::uint64_t& seed) {
    sub->add_option("--seed", seed, "Random seed")->envname("PIC_SEED");
  };
  const auto with_config = [](CLI::App* sub) {
    sub->add_option("--config", "key=value file; keys are long flag names, flags on the command line win");
  };

  GenOptions gen;
  auto* gen_cmd = app.add_subcommand("gen-data", "Generate an in-context dataset");
  with_config(gen_cmd);
  gen_cmd->add_option("--out", gen.out, "Output dataset path")->required();
  gen_cmd->add_option("--tasks", gen.tasks, "Comma list or 'all'");
  gen_cmd->add_option("--levels", gen.levels, "Comma list of corruption levels");
  gen_cmd->add_option("--shapes", gen.shapes, "Comma list, 'all' or 'composite'");
  gen_cmd->add_option("--count", gen.count, "Number of samples");
  seed_option(gen_cmd, gen.seed);
  gen_cmd->add_option("--n-points", gen.n_points, "Points per cloud")->check(CLI::Range(16, 65535));
  gen_cmd->add_flag("--icl", gen.icl, "Label-bank segmentation format");
  gen_cmd->add_flag("--static-labels", gen.static_labels, "Static label-map segmentation format");
  gen_cmd->add_option("--ice-mix", gen.ice_mix, "Fraction of restoration samples");
  gen_cmd->add_option("--nb", gen.nb, "Label bank size")->check(CLI::PositiveNumber);
  gen_cmd->add_flag("--dual-orientation", gen.dual_orientation, "Upright and upside-down registration targets");

  const auto model_train_flags = [&](CLI::App* sub, TrainOptions& t) {
    sub->add_option("--data", t.data, "Training dataset")->required()->check(CLI::ExistingFile);
    sub->add_option("--variant", t.variant, "sep or cat")->check(CLI::IsMember({"sep", "cat"}));
    sub->add_option("--mask-ratio", t.mask_ratio, "Mask ratio")->check(CLI::Range(0.0, 1.0));
    sub->add_option("--epochs", t.epochs, "Epochs")->check(CLI::PositiveNumber);
    sub->add_option("--batch", t.batch, "Batch size")->check(CLI::PositiveNumber);
    sub->add_option("--max-steps", t.max_steps, "Schedule length override")->check(CLI::NonNegativeNumber);
    sub->add_option("--lr", t.lr, "Base learning rate")->check(CLI::NonNegativeNumber);
    sub->add_option("--weight-decay", t.weight_decay, "Decoupled weight decay")->check(CLI::NonNegativeNumber);
    sub->add_option("--loss", t.loss, "cd, sl1 or cd+sl1")->check(CLI::IsMember({"cd", "sl1", "cd+sl1"}));
    sub->add_option("--labels", t.labels, "auto, static or bank");
    sub->add_option("--nb", t.nb, "Label bank size")->check(CLI::PositiveNumber);
    sub->add_option("--threads", t.threads, "Worker threads")->check(CLI::PositiveNumber);
    seed_option(sub, t.seed);
    sub->add_option("--dim", t.dim, "Feature dimension")->check(CLI::PositiveNumber);
    sub->add_option("--depth", t.depth, "Encoder blocks")->check(CLI::PositiveNumber);
    sub->add_option("--decoder-depth", t.decoder_depth, "Decoder blocks")->check(CLI::NonNegativeNumber);
    sub->add_option("--merge-block", t.merge_block, "Encoder block after which the two tracks merge (sep)")
        ->check(CLI::NonNegativeNumber);
    sub->add_option("--heads", t.heads, "Attention heads")->check(CLI::PositiveNumber);
    sub->add_option("--n-c", t.n_c, "Patches per cloud")->check(CLI::PositiveNumber);
    sub->add_option("--m", t.m, "Points per patch")->check(CLI::PositiveNumber);
    sub->add_option("--target-pos", t.target_pos, "default, none, visible or input-aligned");
    sub->add_option("--prompt-position", t.prompt_position, "Prompt pair before or behind the query")
        ->check(CLI::IsMember({"before", "behind"}));
    sub->add_flag("--no-joint-sampling", t.no_joint_sampling, "Sample input and target independently");
  };

  TrainOptions tr;
  auto* train_cmd = app.add_subcommand("train", "Train a model");
  with_config(train_cmd);
  model_train_flags(train_cmd, tr);
  train_cmd->add_option("--out", tr.out, "Checkpoint path")->required();
  train_cmd->add_option("--log", tr.log, "Loss log (TSV); default <out>.loss.tsv");
  train_cmd->add_option("--stop-after", tr.stop_after, "Stop after this many steps (resumable)")
      ->check(CLI::NonNegativeNumber);
  train_cmd->add_option("--init-from", tr.init_from, "Initialize parameters from a checkpoint")
      ->check(CLI::ExistingFile);
  train_cmd->add_option("--resume", tr.resume, "Continue training from a checkpoint")->check(CLI::ExistingFile);
  train_cmd->get_option("--resume")->excludes("--init-from");

  EvalCliOptions ev;
  auto* eval_cmd = app.add_subcommand("eval", "Evaluate a checkpoint");
  with_config(eval_cmd);
  eval_cmd->add_option("--ckpt", ev.ckpt, "Checkpoint")->required()->check(CLI::ExistingFile);
  eval_cmd->add_option("--data", ev.data, "Evaluation dataset")->required()->check(CLI::ExistingFile);
  eval_cmd->add_option("--pool", ev.pool, "Prompt pool dataset (default: evaluation prompts)")
      ->check(CLI::ExistingFile);
  eval_cmd->add_option("--out", ev.out, "Metrics TSV path");
  eval_cmd->add_option("--strategy", ev.strategy, "random, class, cd or fea")
      ->check(CLI::IsMember({"random", "class", "cd", "fea"}));
  eval_cmd->add_flag("--ideal-prompt", ev.ideal_prompt, "Use the query pair as its own prompt");
  eval_cmd->add_flag("--copy", ev.copy, "Emit the prompt target (floor reference)");
  eval_cmd->add_flag("--generalization", ev.generalization, "One-shot segmentation with fresh label mappings");
  seed_option(eval_cmd, ev.seed);

  TrainOptions ab_train;
  AblateOptions ab;
  auto* ablate_cmd = app.add_subcommand("ablate", "Train and evaluate one model per setting of an ablation axis");
  with_config(ablate_cmd);
  model_train_flags(ablate_cmd, ab_train);
  ablate_cmd->add_option("--eval", ab.eval, "Evaluation dataset")->required()->check(CLI::ExistingFile);
  ablate_cmd->add_option("--axis", ab.axis, "mask-ratio, loss or nb")
      ->required()
      ->check(CLI::IsMember({"mask-ratio", "loss", "nb"}));
  ablate_cmd->add_option("--values", ab.values, "Comma list of settings (default: the full axis)");
  ablate_cmd->add_option("--out", ab.out, "Results TSV path");

  InferOptions inf;
  auto* infer_cmd = app.add_subcommand("infer", "Predict one query target");
  with_config(infer_cmd);
  infer_cmd->add_option("--ckpt", inf.ckpt, "Checkpoint")->required()->check(CLI::ExistingFile);
  infer_cmd->add_option("--prompt", inf.prompt, "Dataset holding the prompt pair")->required()->check(CLI::ExistingFile);
  infer_cmd->add_option("--query", inf.query, "Dataset holding the query input")->required()->check(CLI::ExistingFile);
  infer_cmd->add_option("--prompt-index", inf.prompt_index, "Sample index in the prompt file");
  infer_cmd->add_option("--query-index", inf.query_index, "Sample index in the query file");
  infer_cmd->add_option("--out", inf.out, "Output dataset path")->required();
  seed_option(infer_cmd, inf.seed);

  std::string inspect_data;
  std::string inspect_ckpt;
  auto* inspect_cmd = app.add_subcommand("inspect", "Summarize a dataset or checkpoint");
  inspect_cmd->add_option("--data", inspect_data, "Dataset")->check(CLI::ExistingFile);
  inspect_cmd->add_option("--ckpt", inspect_ckpt, "Checkpoint")->check(CLI::ExistingFile);

  std::vector<std::string> args;
  try {
    args = expand_config(app, std::vector<std::string>(argv + 1, argv + argc));
  } catch (const std::exception& e) {
    std::cerr << "usage error: " << e.what() << "\n";
    return 2;
  }
  try {
    std::reverse(args.begin(), args.end());
    app.parse(args);
  } catch (const CLI::ParseError& e) {
    return app.exit(e) == 0 ? 0 : 2;
  }

  try {
    if (*gen_cmd) return cmd_gen_data(gen, *gen_cmd);
    if (*train_cmd) return cmd_train(tr, *train_cmd);
    if (*eval_cmd) return cmd_eval(ev, *eval_cmd);
    if (*ablate_cmd) return cmd_ablate(ab_train, ab, *ablate_cmd);
    if (*infer_cmd) return cmd_infer(inf, *infer_cmd);
    if (*inspect_cmd) return cmd_inspect(inspect_data, inspect_ckpt);
  } catch (const UsageError& e) {
    std::cerr << "usage error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 1;
}
