#include "pic/model.hpp"

#include <charconv>
#include <cmath>
#include <stdexcept>

#include "pic/rng.hpp"

namespace pic {
namespace {

std::string format_double(double v) {
  char buf[64];
  const auto res = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, res.ptr);
}

double parse_double(const std::string& s, const std::string& key) {
  double v = 0.0;
  const auto res = std::from_chars(s.data(), s.data() + s.size(), v);
  if (res.ec != std::errc() || res.ptr != s.data() + s.size()) {
    throw std::invalid_argument("bad number for " + key + ": '" + s + "'");
  }
  return v;
}

long long parse_int(const std::string& s, const std::string& key) {
  long long v = 0;
  const auto res = std::from_chars(s.data(), s.data() + s.size(), v);
  if (res.ec != std::errc() || res.ptr != s.data() + s.size()) {
    throw std::invalid_argument("bad integer for " + key + ": '" + s + "'");
  }
  return v;
}

std::array<Segment, 2> pair_order(PromptPosition pos, Segment prompt, Segment query) {
  return pos == PromptPosition::Before ? std::array<Segment, 2>{prompt, query} : std::array<Segment, 2>{query, prompt};
}

Segment aligned_input(Segment s) {
  switch (s) {
    case Segment::PromptTarget: return Segment::PromptInput;
    case Segment::QueryTarget: return Segment::QueryInput;
    default: return s;
  }
}

bool is_target(Segment s) { return s == Segment::PromptTarget || s == Segment::QueryTarget; }

}  // namespace

ModelConfig ModelConfig::defaults(Variant variant) {
  ModelConfig c;
  c.variant = variant;
  if (variant == Variant::Cat) c.target_position = TargetPosition::InputAligned;
  return c;
}

void ModelConfig::validate() const {
  if (feature_dim <= 0 || heads <= 0 || feature_dim % heads != 0) {
    throw std::invalid_argument("model config: feature_dim must be a positive multiple of heads");
  }
  if (encoder_depth < 1 || decoder_depth < 0) throw std::invalid_argument("model config: bad depth");
  if (variant == Variant::Sep && (merge_block < 0 || merge_block >= encoder_depth)) {
    throw std::invalid_argument("model config: merge_block must be in [0, encoder_depth)");
  }
  if (n_c <= 0 || m <= 0) throw std::invalid_argument("model config: n_c and m must be positive");
  if (!(mask_ratio >= 0.0 && mask_ratio <= 1.0)) throw std::invalid_argument("model config: mask_ratio in [0,1]");
  if (mlp_ratio <= 0 || patch_hidden <= 0) throw std::invalid_argument("model config: bad hidden width");
}

std::string_view variant_name(Variant v) { return v == Variant::Sep ? "sep" : "cat"; }

Variant parse_variant(std::string_view name) {
  if (name == "sep") return Variant::Sep;
  if (name == "cat") return Variant::Cat;
  throw std::invalid_argument("unknown variant '" + std::string(name) + "'");
}

std::string_view target_position_name(TargetPosition p) {
  switch (p) {
    case TargetPosition::None: return "none";
    case TargetPosition::Visible: return "visible";
    case TargetPosition::InputAligned: return "input-aligned";
  }
  return "none";
}

TargetPosition parse_target_position(std::string_view name) {
  if (name == "none") return TargetPosition::None;
  if (name == "visible") return TargetPosition::Visible;
  if (name == "input-aligned") return TargetPosition::InputAligned;
  throw std::invalid_argument("unknown target position mode '" + std::string(name) + "'");
}

std::map<std::string, std::string> ModelConfig::to_key_values() const {
  return {
      {"model.feature_dim", std::to_string(feature_dim)},
      {"model.encoder_depth", std::to_string(encoder_depth)},
      {"model.decoder_depth", std::to_string(decoder_depth)},
      {"model.heads", std::to_string(heads)},
      {"model.mlp_ratio", std::to_string(mlp_ratio)},
      {"model.patch_hidden", std::to_string(patch_hidden)},
      {"model.variant", std::string(variant_name(variant))},
      {"model.merge_block", std::to_string(merge_block)},
      {"model.n_c", std::to_string(n_c)},
      {"model.m", std::to_string(m)},
      {"model.mask_ratio", format_double(mask_ratio)},
      {"model.target_position", std::string(target_position_name(target_position))},
      {"model.prompt_position", prompt_position == PromptPosition::Before ? "before" : "behind"},
      {"model.seed", std::to_string(seed)},
  };
}

ModelConfig ModelConfig::from_key_values(const std::map<std::string, std::string>& kv) {
  ModelConfig c;
  const auto get = [&](const std::string& key) -> const std::string& {
    const auto it = kv.find(key);
    if (it == kv.end()) throw std::invalid_argument("model config: missing " + key);
    return it->second;
  };
  const auto int_of = [&](const std::string& key) { return static_cast<int>(parse_int(get(key), key)); };
  c.feature_dim = int_of("model.feature_dim");
  c.encoder_depth = int_of("model.encoder_depth");
  c.decoder_depth = int_of("model.decoder_depth");
  c.heads = int_of("model.heads");
  c.mlp_ratio = int_of("model.mlp_ratio");
  c.patch_hidden = int_of("model.patch_hidden");
  c.variant = parse_variant(get("model.variant"));
  c.merge_block = int_of("model.merge_block");
  c.n_c = int_of("model.n_c");
  c.m = int_of("model.m");
  c.mask_ratio = parse_double(get("model.mask_ratio"), "model.mask_ratio");
  c.target_position = parse_target_position(get("model.target_position"));
  const std::string& pp = get("model.prompt_position");
  if (pp != "before" && pp != "behind") throw std::invalid_argument("model config: bad prompt_position");
  c.prompt_position = pp == "before" ? PromptPosition::Before : PromptPosition::Behind;
  c.seed = static_cast<std::uint64_t>(parse_int(get("model.seed"), "model.seed"));
  c.validate();
  return c;
}

std::vector<std::pair<std::string, std::pair<int, int>>> parameter_shapes(const ModelConfig& c) {
  const int d = c.feature_dim;
  const int h = c.patch_hidden;
  const int f = c.feature_dim * c.mlp_ratio;
  std::vector<std::pair<std::string, std::pair<int, int>>> out = {
      {"patch.fc1.w", {3, h}}, {"patch.fc1.b", {1, h}}, {"patch.fc2.w", {h, d}}, {"patch.fc2.b", {1, d}},
      {"pos.fc1.w", {3, d}},   {"pos.fc1.b", {1, d}},   {"pos.fc2.w", {d, d}},   {"pos.fc2.b", {1, d}},
      {"segment", {static_cast<int>(kNumSegments), d}}, {"mask_token", {1, d}},
  };
  const auto add_block = [&](const std::string& p) {
    out.push_back({p + ".ln1.g", {1, d}});
    out.push_back({p + ".ln1.b", {1, d}});
    out.push_back({p + ".qkv.w", {d, 3 * d}});
    out.push_back({p + ".qkv.b", {1, 3 * d}});
    out.push_back({p + ".proj.w", {d, d}});
    out.push_back({p + ".proj.b", {1, d}});
    out.push_back({p + ".ln2.g", {1, d}});
    out.push_back({p + ".ln2.b", {1, d}});
    out.push_back({p + ".fc1.w", {d, f}});
    out.push_back({p + ".fc1.b", {1, f}});
    out.push_back({p + ".fc2.w", {f, d}});
    out.push_back({p + ".fc2.b", {1, d}});
  };
  for (int i = 0; i < c.encoder_depth; ++i) add_block("enc" + std::to_string(i));
  for (int i = 0; i < c.decoder_depth; ++i) add_block("dec" + std::to_string(i));
  out.push_back({"norm.g", {1, d}});
  out.push_back({"norm.b", {1, d}});
  out.push_back({"head.w", {d, 3 * c.m}});
  out.push_back({"head.b", {1, 3 * c.m}});
  return out;
}

ParamLayout ParamLayout::build(const ModelConfig& config) {
  ParamLayout l;
  std::size_t i = 0;
  l.patch_w1 = i++;
  l.patch_b1 = i++;
  l.patch_w2 = i++;
  l.patch_b2 = i++;
  l.pos_w1 = i++;
  l.pos_b1 = i++;
  l.pos_w2 = i++;
  l.pos_b2 = i++;
  l.segment = i++;
  l.mask_token = i++;
  for (int b = 0; b < config.encoder_depth + config.decoder_depth; ++b) {
    Block blk{};
    blk.ln1_g = i++;
    blk.ln1_b = i++;
    blk.qkv_w = i++;
    blk.qkv_b = i++;
    blk.proj_w = i++;
    blk.proj_b = i++;
    blk.ln2_g = i++;
    blk.ln2_b = i++;
    blk.fc1_w = i++;
    blk.fc1_b = i++;
    blk.fc2_w = i++;
    blk.fc2_b = i++;
    l.blocks.push_back(blk);
  }
  l.norm_g = i++;
  l.norm_b = i++;
  l.head_w = i++;
  l.head_b = i++;
  l.count = i;
  return l;
}

ParamGroup group_of(std::string_view name) {
  if (name.starts_with("patch.")) return ParamGroup::PatchEmbed;
  if (name.starts_with("pos.")) return ParamGroup::PosEmbed;
  if (name == "segment") return ParamGroup::Segment;
  if (name == "mask_token") return ParamGroup::MaskToken;
  if (name.starts_with("head.")) return ParamGroup::Head;
  return ParamGroup::Blocks;
}

std::string_view group_name(ParamGroup g) {
  switch (g) {
    case ParamGroup::PatchEmbed: return "patch_embed";
    case ParamGroup::PosEmbed: return "pos_embed";
    case ParamGroup::Segment: return "segment";
    case ParamGroup::MaskToken: return "mask_token";
    case ParamGroup::Blocks: return "blocks";
    case ParamGroup::Head: return "head";
  }
  return "unknown";
}

template <typename T>
const NamedTensor<T>* ModelState<T>::find(std::string_view name) const {
  for (const auto& t : tensors) {
    if (t.name == name) return &t;
  }
  return nullptr;
}

template <typename T>
std::size_t ModelState<T>::parameter_count() const {
  std::size_t n = 0;
  for (const auto& t : tensors) n += static_cast<std::size_t>(t.value.size());
  return n;
}

template <typename T>
bool ModelState<T>::all_finite() const {
  for (const auto& t : tensors) {
    if (!t.value.allFinite()) return false;
  }
  return true;
}

template <typename T>
ModelState<T> init_params(const ModelConfig& config) {
  config.validate();
  ModelState<T> state;
  state.config = config;
  state.layout = ParamLayout::build(config);
  const auto shapes = parameter_shapes(config);
  std::uint64_t k = 0;
  for (const auto& [name, shape] : shapes) {
    const auto [rows, cols] = shape;
    Matrix<T> v(rows, cols);
    Rng rng(derive_seed(config.seed, k++));
    if (name.ends_with(".w")) {
      const double sd = 1.0 / std::sqrt(static_cast<double>(rows));
      for (Eigen::Index i = 0; i < v.size(); ++i) v.data()[i] = static_cast<T>(rng.normal() * sd);
    } else if (name.ends_with(".g")) {
      v.setOnes();
    } else if (name == "segment" || name == "mask_token") {
      for (Eigen::Index i = 0; i < v.size(); ++i) v.data()[i] = static_cast<T>(rng.normal() * 0.02);
    } else {
      v.setZero();
    }
    state.tensors.push_back({name, std::move(v)});
  }
  return state;
}

template <typename T>
std::vector<typename Tape<T>::Var> bind_parameters(Tape<T>& tape, const ModelState<T>& state) {
  std::vector<typename Tape<T>::Var> vars;
  vars.reserve(state.tensors.size());
  for (const auto& t : state.tensors) vars.push_back(tape.parameter(t.value));
  return vars;
}

template <typename T>
typename Tape<T>::Var embed_patches(Tape<T>& tape, const std::vector<typename Tape<T>::Var>& p,
                                    const ParamLayout& l, typename Tape<T>::Var points, int m) {
  auto h = tape.gelu(tape.linear(points, p[l.patch_w1], p[l.patch_b1]));
  return tape.group_max(tape.linear(h, p[l.patch_w2], p[l.patch_b2]), m);
}

namespace {

template <typename T>
typename Tape<T>::Var transformer_block(Tape<T>& tape, const std::vector<typename Tape<T>::Var>& p,
                                        const ParamLayout::Block& b, typename Tape<T>::Var x, int heads) {
  auto h = tape.layer_norm(x, p[b.ln1_g], p[b.ln1_b]);
  auto a = tape.attention(tape.linear(h, p[b.qkv_w], p[b.qkv_b]), heads);
  x = tape.add(x, tape.linear(a, p[b.proj_w], p[b.proj_b]));
  h = tape.layer_norm(x, p[b.ln2_g], p[b.ln2_b]);
  auto f = tape.linear(tape.gelu(tape.linear(h, p[b.fc1_w], p[b.fc1_b])), p[b.fc2_w], p[b.fc2_b]);
  return tape.add(x, f);
}

}  // namespace

template <typename T>
ForwardOutput<T> forward(Tape<T>& tape, const std::vector<typename Tape<T>::Var>& p, const ModelState<T>& state,
                         const SampleSequences& sequences, const MaskLayout& mask) {
  using Var = typename Tape<T>::Var;
  const ModelConfig& cfg = state.config;
  const ParamLayout& l = state.layout;
  const auto n_c = static_cast<std::size_t>(cfg.n_c);
  const auto m = static_cast<std::size_t>(cfg.m);
  if (p.size() != l.count) throw std::invalid_argument("forward: parameter count mismatch");
  if (mask.n_c() != n_c) throw std::invalid_argument("forward: mask layout does not match n_c");
  for (std::size_t s = 0; s < kNumSegments; ++s) {
    const auto& seq = sequences.seq[s];
    if (seq.num_patches() != n_c || seq.m != m || seq.points.size() != n_c * m) {
      throw std::invalid_argument("forward: patch sequence shape does not match the model config");
    }
    if (mask.masked[s].size() != n_c) throw std::invalid_argument("forward: mask layout shape mismatch");
  }
  if (cfg.variant == Variant::Sep) {
    for (const Segment s : {Segment::PromptInput, Segment::QueryInput}) {
      if (mask.masked_count(s) != 0) throw std::invalid_argument("forward: the separate variant never masks inputs");
    }
  }

  // Visible patches (embedding rows) and positional-embedding sources.
  std::array<std::vector<int>, kNumSegments> embed_row;
  std::array<std::vector<int>, kNumSegments> pos_row;
  std::vector<std::pair<Segment, std::size_t>> visible;
  std::vector<const Point*> pos_centers;
  for (std::size_t si = 0; si < kNumSegments; ++si) {
    const auto s = static_cast<Segment>(si);
    embed_row[si].assign(n_c, -1);
    pos_row[si].assign(n_c, -1);
    for (std::size_t c = 0; c < n_c; ++c) {
      const bool masked = mask.is_masked(s, c);
      if (!masked) {
        embed_row[si][c] = static_cast<int>(visible.size());
        visible.emplace_back(s, c);
      }
      const Point* center = nullptr;
      if (!is_target(s)) {
        if (!masked) center = &sequences[s].centers[c];
      } else if (cfg.target_position == TargetPosition::Visible) {
        if (!masked) center = &sequences[s].centers[c];
      } else if (cfg.target_position == TargetPosition::InputAligned) {
        if (!mask.is_masked(aligned_input(s), c)) center = &sequences[aligned_input(s)].centers[c];
      }
      if (center != nullptr) {
        pos_row[si][c] = static_cast<int>(pos_centers.size());
        pos_centers.push_back(center);
      }
    }
  }

  const int d = cfg.feature_dim;
  Var embeddings = tape.constant(Matrix<T>::Zero(1, d));
  if (!visible.empty()) {
    Matrix<T> pts(static_cast<Eigen::Index>(visible.size() * m), 3);
    Eigen::Index r = 0;
    for (const auto& [s, c] : visible) {
      for (const auto& q : sequences[s].patch(c)) {
        pts(r, 0) = static_cast<T>(q.x());
        pts(r, 1) = static_cast<T>(q.y());
        pts(r, 2) = static_cast<T>(q.z());
        ++r;
      }
    }
    embeddings = embed_patches<T>(tape, p, l, tape.constant(std::move(pts)), cfg.m);
  }
  Var positions = tape.constant(Matrix<T>::Zero(1, d));
  if (!pos_centers.empty()) {
    Matrix<T> cs(static_cast<Eigen::Index>(pos_centers.size()), 3);
    for (std::size_t i = 0; i < pos_centers.size(); ++i) {
      for (int k = 0; k < 3; ++k) cs(static_cast<Eigen::Index>(i), k) = static_cast<T>((*pos_centers[i])[k]);
    }
    auto h = tape.gelu(tape.linear(tape.constant(std::move(cs)), p[l.pos_w1], p[l.pos_b1]));
    positions = tape.linear(h, p[l.pos_w2], p[l.pos_b2]);
  }

  const auto build_track = [&](const std::vector<Segment>& segs) {
    const auto rows = static_cast<Eigen::Index>(segs.size() * n_c);
    typename Tape<T>::RowSource emb{embeddings, {}}, msk{p[l.mask_token], {}}, seg{p[l.segment], {}},
        pos{positions, {}};
    for (const Segment s : segs) {
      const auto si = static_cast<std::size_t>(s);
      for (std::size_t c = 0; c < n_c; ++c) {
        emb.rows.push_back(embed_row[si][c]);
        msk.rows.push_back(mask.is_masked(s, c) ? 0 : -1);
        seg.rows.push_back(static_cast<int>(si));
        pos.rows.push_back(pos_row[si][c]);
      }
    }
    return tape.gather_sum({std::move(emb), std::move(msk), std::move(seg), std::move(pos)}, rows);
  };

  std::vector<Segment> out_segments;
  Var x;
  std::size_t next_block = 0;
  const auto n_blocks = static_cast<std::size_t>(cfg.encoder_depth + cfg.decoder_depth);
  if (cfg.variant == Variant::Sep) {
    const auto in = pair_order(cfg.prompt_position, Segment::PromptInput, Segment::QueryInput);
    const auto tg = pair_order(cfg.prompt_position, Segment::PromptTarget, Segment::QueryTarget);
    Var xi = build_track({in[0], in[1]});
    Var xt = build_track({tg[0], tg[1]});
    for (; next_block < static_cast<std::size_t>(cfg.merge_block); ++next_block) {
      xi = transformer_block<T>(tape, p, l.blocks[next_block], xi, cfg.heads);
      xt = transformer_block<T>(tape, p, l.blocks[next_block], xt, cfg.heads);
    }
    x = tape.average(xi, xt);
    out_segments = {tg[0], tg[1]};
  } else {
    const auto a = pair_order(cfg.prompt_position, Segment::PromptInput, Segment::QueryInput);
    const auto b = pair_order(cfg.prompt_position, Segment::PromptTarget, Segment::QueryTarget);
    out_segments = {a[0], b[0], a[1], b[1]};
    x = build_track(out_segments);
  }
  for (; next_block < n_blocks; ++next_block) x = transformer_block<T>(tape, p, l.blocks[next_block], x, cfg.heads);
  x = tape.layer_norm(x, p[l.norm_g], p[l.norm_b]);

  ForwardOutput<T> out;
  std::vector<int> pick;
  for (std::size_t k = 0; k < out_segments.size(); ++k) {
    for (std::size_t c = 0; c < n_c; ++c) {
      if (mask.is_masked(out_segments[k], c)) {
        pick.push_back(static_cast<int>(k * n_c + c));
        out.positions.push_back({out_segments[k], c});
      }
    }
  }
  if (pick.empty()) throw std::invalid_argument("forward: no masked positions to predict");
  const auto count = static_cast<Eigen::Index>(pick.size());
  Var selected = tape.gather_sum({{x, std::move(pick)}}, count);
  out.prediction = tape.linear(selected, p[l.head_w], p[l.head_b]);
  return out;
}

template <typename T>
Matrix<T> masked_targets(const SampleSequences& sequences, const std::vector<MaskedPosition>& positions) {
  if (positions.empty()) throw std::invalid_argument("masked_targets: no positions");
  const std::size_t m = sequences.seq[0].m;
  Matrix<T> gt(static_cast<Eigen::Index>(positions.size()), static_cast<Eigen::Index>(3 * m));
  for (std::size_t r = 0; r < positions.size(); ++r) {
    const auto patch = sequences[positions[r].segment].patch(positions[r].patch);
    for (std::size_t j = 0; j < m; ++j) {
      for (int k = 0; k < 3; ++k) {
        gt(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(3 * j + static_cast<std::size_t>(k))) =
            static_cast<T>(patch[j][k]);
      }
    }
  }
  return gt;
}

std::vector<std::vector<Point>> unpack_patches(const Matrix<float>& prediction, int m) {
  if (prediction.cols() != 3 * m) throw std::invalid_argument("unpack_patches: width must be 3 m");
  std::vector<std::vector<Point>> out(static_cast<std::size_t>(prediction.rows()));
  for (Eigen::Index r = 0; r < prediction.rows(); ++r) {
    auto& patch = out[static_cast<std::size_t>(r)];
    patch.reserve(static_cast<std::size_t>(m));
    for (int j = 0; j < m; ++j) patch.emplace_back(prediction(r, 3 * j), prediction(r, 3 * j + 1), prediction(r, 3 * j + 2));
  }
  return out;
}

#define PIC_INSTANTIATE(T)                                                                                          \
  template struct ModelState<T>;                                                                                   \
  template ModelState<T> init_params<T>(const ModelConfig&);                                                        \
  template std::vector<Tape<T>::Var> bind_parameters<T>(Tape<T>&, const ModelState<T>&);                           \
  template Tape<T>::Var embed_patches<T>(Tape<T>&, const std::vector<Tape<T>::Var>&, const ParamLayout&,            \
                                         Tape<T>::Var, int);                                                        \
  template ForwardOutput<T> forward<T>(Tape<T>&, const std::vector<Tape<T>::Var>&, const ModelState<T>&,            \
                                       const SampleSequences&, const MaskLayout&);                                  \
  template Matrix<T> masked_targets<T>(const SampleSequences&, const std::vector<MaskedPosition>&);

PIC_INSTANTIATE(float)
PIC_INSTANTIATE(double)

#undef PIC_INSTANTIATE

}  // namespace pic
