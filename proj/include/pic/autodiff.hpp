#pragma once

// Minimal reverse-mode differentiation over dense row-major matrices.
//
// A Tape records every operation with its backward closure. Values are
// stored once per node; parameters are referenced rather than copied and
// must outlive the tape. Operations are the handful the point transformer
// needs, several of them fused (attention, layer norm, patch losses) so the
// backward pass stays close to hand-written speed.

#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <span>
#include <stdexcept>
#include <utility>
#include <vector>

#include <Eigen/Core>

namespace pic {

template <typename T>
using Matrix = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

template <typename T>
class Tape {
 public:
  using Mat = Matrix<T>;

  struct Var {
    std::uint32_t id = 0;
  };

  /// Row gather used by gather_sum: row r of the output receives
  /// source.row(rows[r]) unless rows[r] < 0.
  struct RowSource {
    Var source;
    std::vector<int> rows;
  };

  explicit Tape(bool recording = true) : recording_(recording) { nodes_.reserve(256); }

  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  bool recording() const noexcept { return recording_; }
  std::size_t size() const noexcept { return nodes_.size(); }

  Var constant(Mat value) { return push(std::move(value), false); }

  /// Owned leaf whose gradient is tracked (used for input-gradient checks).
  Var variable(Mat value) { return push(std::move(value), recording_); }

  /// Leaf that references `value` in place. Tracked when recording.
  Var parameter(const Mat& value) {
    Node n;
    n.ref = &value;
    n.needs_grad = recording_;
    nodes_.push_back(std::move(n));
    return {static_cast<std::uint32_t>(nodes_.size() - 1)};
  }

  const Mat& value(Var v) const {
    const Node& n = nodes_[v.id];
    return n.ref ? *n.ref : n.value;
  }

  /// Gradient of the last backward() target with respect to v. Zero-sized
  /// when v did not influence the loss.
  const Mat& grad(Var v) const { return nodes_[v.id].grad; }

  bool needs_grad(Var v) const { return nodes_[v.id].needs_grad; }

  // ---------------------------------------------------------------- ops

  Var matmul(Var a, Var b) {
    Mat out = value(a) * value(b);
    return record(std::move(out), {a, b}, [a, b](Tape& t, const Mat& g) {
      if (t.needs_grad(a)) t.acc(a).noalias() += g * t.value(b).transpose();
      if (t.needs_grad(b)) t.acc(b).noalias() += t.value(a).transpose() * g;
    });
  }

  /// x * w + b with b a 1 x out row broadcast over rows.
  Var linear(Var x, Var w, Var b) {
    Mat out(value(x).rows(), value(w).cols());
    out.noalias() = value(x) * value(w);
    out.rowwise() += value(b).row(0);
    return record(std::move(out), {x, w, b}, [x, w, b](Tape& t, const Mat& g) {
      if (t.needs_grad(x)) t.acc(x).noalias() += g * t.value(w).transpose();
      if (t.needs_grad(w)) t.acc(w).noalias() += t.value(x).transpose() * g;
      if (t.needs_grad(b)) t.acc(b).row(0) += g.colwise().sum();
    });
  }

  Var add(Var a, Var b) {
    check_same(a, b, "add");
    Mat out = value(a) + value(b);
    return record(std::move(out), {a, b}, [a, b](Tape& t, const Mat& g) {
      if (t.needs_grad(a)) t.acc(a) += g;
      if (t.needs_grad(b)) t.acc(b) += g;
    });
  }

  Var scale(Var a, T s) {
    Mat out = value(a) * s;
    return record(std::move(out), {a}, [a, s](Tape& t, const Mat& g) { t.acc(a) += g * s; });
  }

  /// Positionwise mean of two equally shaped tensors.
  Var average(Var a, Var b) { return scale(add(a, b), T(0.5)); }

  /// GELU, tanh approximation.
  Var gelu(Var a) {
    const auto x = value(a).array();
    Mat th = (kGeluC * (x + T(0.044715) * x.cube())).tanh().matrix();
    Mat out = (T(0.5) * x * (T(1) + th.array())).matrix();
    return record(std::move(out), {a}, [a, th = std::move(th)](Tape& t, const Mat& g) {
      const auto xv = t.value(a).array();
      const auto tv = th.array();
      t.acc(a).array() += g.array() * (T(0.5) * (T(1) + tv) + T(0.5) * xv * (T(1) - tv.square()) * kGeluC *
                                                                   (T(1) + T(3) * T(0.044715) * xv.square()));
    });
  }

  /// Row-wise layer normalization with gain and bias rows (1 x d).
  Var layer_norm(Var x, Var gain, Var bias, T eps = T(1e-5)) {
    const Mat& xv = value(x);
    const auto d = xv.cols();
    Mat xhat(xv.rows(), d);
    std::vector<T> inv_std(static_cast<std::size_t>(xv.rows()));
    for (Eigen::Index r = 0; r < xv.rows(); ++r) {
      const T mean = xv.row(r).mean();
      const T var = (xv.row(r).array() - mean).square().mean();
      const T is = T(1) / std::sqrt(var + eps);
      inv_std[static_cast<std::size_t>(r)] = is;
      xhat.row(r) = (xv.row(r).array() - mean) * is;
    }
    Mat out = (xhat.array().rowwise() * value(gain).row(0).array()).rowwise() + value(bias).row(0).array();
    return record(std::move(out), {x, gain, bias},
                  [x, gain, bias, xhat = std::move(xhat), inv_std = std::move(inv_std)](Tape& t, const Mat& g) {
                    if (t.needs_grad(gain)) t.acc(gain).row(0) += g.cwiseProduct(xhat).colwise().sum();
                    if (t.needs_grad(bias)) t.acc(bias).row(0) += g.colwise().sum();
                    if (!t.needs_grad(x)) return;
                    Mat& gx = t.acc(x);
                    const auto gamma = t.value(gain).row(0).array();
                    const T inv_d = T(1) / static_cast<T>(xhat.cols());
                    for (Eigen::Index r = 0; r < xhat.rows(); ++r) {
                      const auto dxhat = (g.row(r).array() * gamma).eval();
                      const T mean_d = dxhat.sum() * inv_d;
                      const T mean_dx = (dxhat * xhat.row(r).array()).sum() * inv_d;
                      gx.row(r).array() +=
                          inv_std[static_cast<std::size_t>(r)] * (dxhat - mean_d - xhat.row(r).array() * mean_dx);
                    }
                  });
  }

  /// Multi-head scaled dot-product self-attention on a fused projection:
  /// qkv is n x 3d laid out [Q | K | V]; returns n x d with heads concatenated.
  Var attention(Var qkv, int heads) {
    const Mat& in = value(qkv);
    const auto n = in.rows();
    const auto d = in.cols() / 3;
    if (in.cols() % 3 != 0 || d % heads != 0) throw std::invalid_argument("attention: bad qkv shape");
    const auto dh = d / heads;
    const T sc = T(1) / std::sqrt(static_cast<T>(dh));
    Mat out(n, d);
    std::vector<Mat> probs(static_cast<std::size_t>(heads));
    for (int h = 0; h < heads; ++h) {
      const auto q = in.middleCols(h * dh, dh);
      const auto k = in.middleCols(d + h * dh, dh);
      const auto v = in.middleCols(2 * d + h * dh, dh);
      Mat& a = probs[static_cast<std::size_t>(h)];
      a.noalias() = (q * k.transpose()) * sc;
      for (Eigen::Index r = 0; r < n; ++r) {
        const T mx = a.row(r).maxCoeff();
        a.row(r) = (a.row(r).array() - mx).exp();
        a.row(r) /= a.row(r).sum();
      }
      out.middleCols(h * dh, dh).noalias() = a * v;
    }
    return record(std::move(out), {qkv}, [qkv, heads, d, dh, sc, probs = std::move(probs)](Tape& t, const Mat& g) {
      const Mat& in = t.value(qkv);
      Mat& gin = t.acc(qkv);
      Mat da;
      for (int h = 0; h < heads; ++h) {
        const Mat& a = probs[static_cast<std::size_t>(h)];
        const auto go = g.middleCols(h * dh, dh);
        const auto q = in.middleCols(h * dh, dh);
        const auto k = in.middleCols(d + h * dh, dh);
        const auto v = in.middleCols(2 * d + h * dh, dh);
        gin.middleCols(2 * d + h * dh, dh).noalias() += a.transpose() * go;
        da.noalias() = go * v.transpose();
        // softmax backward: ds = a * (da - rowsum(da * a))
        const auto row_dot = (da.cwiseProduct(a)).rowwise().sum().eval();
        da = a.cwiseProduct(da.colwise() - row_dot) * sc;
        gin.middleCols(h * dh, dh).noalias() += da * k;
        gin.middleCols(d + h * dh, dh).noalias() += da.transpose() * q;
      }
    });
  }

  /// Column-wise max over consecutive groups of `group` rows.
  Var group_max(Var x, int group) {
    const Mat& xv = value(x);
    if (group <= 0 || xv.rows() % group != 0) throw std::invalid_argument("group_max: rows not divisible by group");
    const auto groups = xv.rows() / group;
    Mat out(groups, xv.cols());
    std::vector<int> arg(static_cast<std::size_t>(groups * xv.cols()));
    for (Eigen::Index gi = 0; gi < groups; ++gi) {
      for (Eigen::Index c = 0; c < xv.cols(); ++c) {
        Eigen::Index best = gi * group;
        T bv = xv(best, c);
        for (Eigen::Index r = best + 1; r < (gi + 1) * group; ++r) {
          if (xv(r, c) > bv) {
            bv = xv(r, c);
            best = r;
          }
        }
        out(gi, c) = bv;
        arg[static_cast<std::size_t>(gi * xv.cols() + c)] = static_cast<int>(best);
      }
    }
    return record(std::move(out), {x}, [x, arg = std::move(arg)](Tape& t, const Mat& g) {
      Mat& gx = t.acc(x);
      const auto cols = g.cols();
      for (Eigen::Index gi = 0; gi < g.rows(); ++gi) {
        for (Eigen::Index c = 0; c < cols; ++c) gx(arg[static_cast<std::size_t>(gi * cols + c)], c) += g(gi, c);
      }
    });
  }

  /// out.row(r) = sum over sources s with s.rows[r] >= 0 of s.source.row(s.rows[r]).
  Var gather_sum(std::vector<RowSource> sources, Eigen::Index rows) {
    if (sources.empty()) throw std::invalid_argument("gather_sum: no sources");
    const auto cols = value(sources.front().source).cols();
    Mat out = Mat::Zero(rows, cols);
    std::vector<Var> deps;
    for (const auto& s : sources) {
      const Mat& sv = value(s.source);
      if (sv.cols() != cols || static_cast<Eigen::Index>(s.rows.size()) != rows) {
        throw std::invalid_argument("gather_sum: shape mismatch");
      }
      for (Eigen::Index r = 0; r < rows; ++r) {
        const int src = s.rows[static_cast<std::size_t>(r)];
        if (src >= sv.rows()) throw std::invalid_argument("gather_sum: row index out of range");
        if (src >= 0) out.row(r) += sv.row(src);
      }
      deps.push_back(s.source);
    }
    return record(std::move(out), deps, [sources = std::move(sources)](Tape& t, const Mat& g) {
      for (const auto& s : sources) {
        if (!t.needs_grad(s.source)) continue;
        Mat& gs = t.acc(s.source);
        for (Eigen::Index r = 0; r < g.rows(); ++r) {
          const int src = s.rows[static_cast<std::size_t>(r)];
          if (src >= 0) gs.row(src) += g.row(r);
        }
      }
    });
  }

  /// Mean over rows (patches) of the squared-l2 Chamfer distance between
  /// pred.row(p) and gt.row(p), each row holding m points as xyz triples.
  Var chamfer_patches(Var pred, const Mat& gt) {
    const Mat& pv = value(pred);
    check_patch_shapes(pv, gt, "chamfer_patches");
    const Eigen::Index patches = pv.rows();
    const Eigen::Index m = pv.cols() / 3;
    // nearest[p][i] for pred->gt, then gt->pred
    std::vector<int> near_pg(static_cast<std::size_t>(patches * m));
    std::vector<int> near_gp(static_cast<std::size_t>(patches * m));
    T total = 0;
    for (Eigen::Index p = 0; p < patches; ++p) {
      T term_a = 0;
      T term_b = 0;
      for (Eigen::Index i = 0; i < m; ++i) {
        T best = std::numeric_limits<T>::infinity();
        int arg = 0;
        for (Eigen::Index j = 0; j < m; ++j) {
          const T dd = sq(pv, p, i, gt, p, j);
          if (dd < best) {
            best = dd;
            arg = static_cast<int>(j);
          }
        }
        near_pg[static_cast<std::size_t>(p * m + i)] = arg;
        term_a += best;
      }
      for (Eigen::Index j = 0; j < m; ++j) {
        T best = std::numeric_limits<T>::infinity();
        int arg = 0;
        for (Eigen::Index i = 0; i < m; ++i) {
          const T dd = sq(pv, p, i, gt, p, j);
          if (dd < best) {
            best = dd;
            arg = static_cast<int>(i);
          }
        }
        near_gp[static_cast<std::size_t>(p * m + j)] = arg;
        term_b += best;
      }
      total += (term_a + term_b) / static_cast<T>(m);
    }
    Mat out(1, 1);
    out(0, 0) = total / static_cast<T>(patches);
    return record(std::move(out), {pred},
                  [pred, gt, m, near_pg = std::move(near_pg), near_gp = std::move(near_gp)](Tape& t, const Mat& g) {
                    const Mat& pv = t.value(pred);
                    Mat& gp = t.acc(pred);
                    const T w = g(0, 0) * T(2) / (static_cast<T>(m) * static_cast<T>(pv.rows()));
                    for (Eigen::Index p = 0; p < pv.rows(); ++p) {
                      for (Eigen::Index i = 0; i < m; ++i) {
                        const int j = near_pg[static_cast<std::size_t>(p * m + i)];
                        for (int c = 0; c < 3; ++c) gp(p, 3 * i + c) += w * (pv(p, 3 * i + c) - gt(p, 3 * j + c));
                      }
                      for (Eigen::Index j = 0; j < m; ++j) {
                        const int i = near_gp[static_cast<std::size_t>(p * m + j)];
                        for (int c = 0; c < 3; ++c) gp(p, 3 * i + c) += w * (pv(p, 3 * i + c) - gt(p, 3 * j + c));
                      }
                    }
                  });
  }

  /// Mean Smooth-l1 over all coordinates of index-aligned patches.
  Var smooth_l1_patches(Var pred, const Mat& gt, T beta = T(1)) {
    const Mat& pv = value(pred);
    check_patch_shapes(pv, gt, "smooth_l1_patches");
    const T count = static_cast<T>(pv.size());
    const Mat r = pv - gt;
    T total = 0;
    for (Eigen::Index k = 0; k < r.size(); ++k) {
      const T a = std::abs(r.data()[k]);
      total += a < beta ? T(0.5) * a * a / beta : a - T(0.5) * beta;
    }
    Mat out(1, 1);
    out(0, 0) = total / count;
    return record(std::move(out), {pred}, [pred, r, beta, count](Tape& t, const Mat& g) {
      t.acc(pred) += (g(0, 0) / count) * r.unaryExpr([beta](T v) {
        return std::abs(v) < beta ? v / beta : (v > 0 ? T(1) : T(-1));
      });
    });
  }

  // ----------------------------------------------------------- backward

  /// Reverse sweep from a 1 x 1 node. The graph is consumed; calling again
  /// throws.
  void backward(Var loss) {
    if (!recording_ || consumed_ || loss.id >= nodes_.size() || !nodes_[loss.id].needs_grad) {
      throw std::logic_error("backward called without a recorded graph");
    }
    if (value(loss).size() != 1) throw std::invalid_argument("backward: loss must be a scalar");
    acc(loss).setConstant(T(1));
    for (std::size_t i = loss.id + 1; i-- > 0;) {
      Node& n = nodes_[i];
      if (!n.back || n.grad.size() == 0) continue;
      n.back(*this, n.grad);
    }
    consumed_ = true;
  }

 private:
  static constexpr T kGeluC = T(0.7978845608028654);

  using Backward = std::function<void(Tape&, const Mat&)>;

  struct Node {
    Mat value;
    const Mat* ref = nullptr;
    Mat grad;
    bool needs_grad = false;
    Backward back;
  };

  Var push(Mat value, bool needs_grad) {
    Node n;
    n.value = std::move(value);
    n.needs_grad = needs_grad;
    nodes_.push_back(std::move(n));
    return {static_cast<std::uint32_t>(nodes_.size() - 1)};
  }

  Var record(Mat value, std::initializer_list<Var> deps, Backward back) {
    return record(std::move(value), std::vector<Var>(deps), std::move(back));
  }

  Var record(Mat value, const std::vector<Var>& deps, Backward back) {
    bool any = false;
    for (const auto d : deps) any = any || nodes_[d.id].needs_grad;
    Var v = push(std::move(value), recording_ && any);
    if (nodes_[v.id].needs_grad) nodes_[v.id].back = std::move(back);
    return v;
  }

  Mat& acc(Var v) {
    Node& n = nodes_[v.id];
    if (n.grad.size() == 0) {
      const Mat& val = n.ref ? *n.ref : n.value;
      n.grad = Mat::Zero(val.rows(), val.cols());
    }
    return n.grad;
  }

  void check_same(Var a, Var b, const char* op) const {
    if (value(a).rows() != value(b).rows() || value(a).cols() != value(b).cols()) {
      throw std::invalid_argument(std::string(op) + ": shape mismatch");
    }
  }

  static void check_patch_shapes(const Mat& pred, const Mat& gt, const char* op) {
    if (pred.rows() != gt.rows() || pred.cols() != gt.cols()) {
      throw std::invalid_argument(std::string(op) + ": mismatched patch counts");
    }
    if (pred.rows() == 0 || pred.cols() == 0 || pred.cols() % 3 != 0) {
      throw std::invalid_argument(std::string(op) + ": patches must be non-empty xyz rows");
    }
  }

  static T sq(const Mat& a, Eigen::Index ra, Eigen::Index ia, const Mat& b, Eigen::Index rb, Eigen::Index ib) {
    const T dx = a(ra, 3 * ia) - b(rb, 3 * ib);
    const T dy = a(ra, 3 * ia + 1) - b(rb, 3 * ib + 1);
    const T dz = a(ra, 3 * ia + 2) - b(rb, 3 * ib + 2);
    return dx * dx + dy * dy + dz * dz;
  }

  bool recording_;
  bool consumed_ = false;
  std::vector<Node> nodes_;
};

}  // namespace pic
