#pragma once

// Reverse-mode automatic differentiation over dense double matrices.
//
// A Tape records every operation of one forward pass. Nodes are stored by
// index, so backward closures stay valid while the tape grows. A tape built
// with gradients disabled only evaluates values (used for inference).

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <limits>
#include <functional>
#include <memory>
#include <string>
#include <unordered_map>
#include <vector>

#include "hiesql/util.hpp"

namespace hiesql {

using Mat = Eigen::MatrixXd;
using RowVec = Eigen::RowVectorXd;

// A named trainable tensor. `group` selects the learning-rate group.
struct Param {
  std::string name;
  Mat value;
  bool frozen = false;
  int group = 0;
};

namespace ag {

class Tape;

struct Var {
  Tape* tape = nullptr;
  int id = -1;

  const Mat& val() const;
  Eigen::Index rows() const { return val().rows(); }
  Eigen::Index cols() const { return val().cols(); }
  double scalar() const { return val()(0, 0); }
  bool valid() const { return tape != nullptr; }
};

class Tape {
 public:
  using Backward = std::function<void(Tape&, const Mat&)>;

  explicit Tape(bool grad_enabled = true) : grad_enabled_(grad_enabled) { nodes_.reserve(512); }

  bool grad_enabled() const { return grad_enabled_; }

  Var constant(Mat v) { return push(std::move(v), false, nullptr); }
  Var leaf(Mat v) { return push(std::move(v), grad_enabled_, nullptr); }

  // One leaf per parameter per tape, so repeated use accumulates into one grad.
  Var param(Param& p) {
    auto it = param_ids_.find(&p);
    if (it != param_ids_.end()) return Var{this, it->second};
    Var v = push(p.value, grad_enabled_ && !p.frozen, nullptr);
    param_ids_.emplace(&p, v.id);
    params_.emplace_back(&p, v.id);
    return v;
  }

  const Mat& value(int id) const { return nodes_[id].value; }
  bool requires_grad(int id) const { return nodes_[id].requires_grad; }

  // Records the result of an op. `backward` receives d(loss)/d(output).
  Var record(Mat value, std::initializer_list<Var> inputs, Backward backward) {
    bool rg = false;
    if (grad_enabled_)
      for (const auto& in : inputs) rg = rg || nodes_[in.id].requires_grad;
    return push(std::move(value), rg, rg ? std::move(backward) : nullptr);
  }
  Var record(Mat value, const std::vector<Var>& inputs, Backward backward) {
    bool rg = false;
    if (grad_enabled_)
      for (const auto& in : inputs) rg = rg || nodes_[in.id].requires_grad;
    return push(std::move(value), rg, rg ? std::move(backward) : nullptr);
  }

  // Adds `g` into the gradient of node `id` if it participates in backprop.
  template <typename Expr>
  void accum(int id, const Expr& g) {
    auto& n = nodes_[id];
    if (!n.requires_grad) return;
    if (n.grad.size() == 0) {
      n.grad = g;
    } else {
      n.grad += g;
    }
  }
  template <typename Expr>
  void accum_row(int id, Eigen::Index r, const Expr& g) {
    auto& n = nodes_[id];
    if (!n.requires_grad) return;
    if (n.grad.size() == 0) n.grad = Mat::Zero(n.value.rows(), n.value.cols());
    n.grad.row(r) += g;
  }

  void backward(Var loss) {
    check(loss.tape == this, "backward: variable from another tape");
    check(loss.val().size() == 1, "backward: loss must be a scalar");
    if (!nodes_[loss.id].requires_grad) return;
    nodes_[loss.id].grad = Mat::Ones(1, 1);
    for (int i = loss.id; i >= 0; --i) {
      auto& n = nodes_[i];
      if (!n.backward || n.grad.size() == 0) continue;
      // Inputs always precede outputs, so n.grad is not written while in use.
      n.backward(*this, n.grad);
    }
  }

  const Mat& grad(Var v) {
    auto& n = nodes_[v.id];
    if (n.grad.size() == 0) n.grad = Mat::Zero(n.value.rows(), n.value.cols());
    return n.grad;
  }

  // Parameters touched by this tape, in first-use order.
  const std::vector<std::pair<Param*, int>>& params() const { return params_; }

  std::size_t size() const { return nodes_.size(); }

 private:
  struct Node {
    Mat value;
    Mat grad;
    bool requires_grad = false;
    Backward backward;
  };

  Var push(Mat v, bool rg, Backward bw) {
    nodes_.push_back(Node{std::move(v), Mat(), rg, std::move(bw)});
    return Var{this, static_cast<int>(nodes_.size()) - 1};
  }

  bool grad_enabled_;
  std::vector<Node> nodes_;
  std::unordered_map<const Param*, int> param_ids_;
  std::vector<std::pair<Param*, int>> params_;
};

inline const Mat& Var::val() const { return tape->value(id); }

// ---------------------------------------------------------------------------
// Elementwise and linear algebra

inline Var matmul(Var a, Var b) {
  check(a.cols() == b.rows(), "matmul: shape mismatch ", a.rows(), "x", a.cols(), " * ", b.rows(), "x", b.cols());
  Mat out = a.val() * b.val();
  return a.tape->record(std::move(out), {a, b}, [a, b](Tape& t, const Mat& g) {
    if (t.requires_grad(a.id)) t.accum(a.id, g * b.val().transpose());
    if (t.requires_grad(b.id)) t.accum(b.id, a.val().transpose() * g);
  });
}

inline Var add(Var a, Var b) {
  check(a.rows() == b.rows() && a.cols() == b.cols(), "add: shape mismatch");
  return a.tape->record(a.val() + b.val(), {a, b}, [a, b](Tape& t, const Mat& g) {
    t.accum(a.id, g);
    t.accum(b.id, g);
  });
}

inline Var sub(Var a, Var b) {
  check(a.rows() == b.rows() && a.cols() == b.cols(), "sub: shape mismatch");
  return a.tape->record(a.val() - b.val(), {a, b}, [a, b](Tape& t, const Mat& g) {
    t.accum(a.id, g);
    t.accum(b.id, -g);
  });
}

inline Var mul(Var a, Var b) {
  check(a.rows() == b.rows() && a.cols() == b.cols(), "mul: shape mismatch");
  Mat out = a.val().cwiseProduct(b.val());
  return a.tape->record(std::move(out), {a, b}, [a, b](Tape& t, const Mat& g) {
    if (t.requires_grad(a.id)) t.accum(a.id, g.cwiseProduct(b.val()));
    if (t.requires_grad(b.id)) t.accum(b.id, g.cwiseProduct(a.val()));
  });
}

inline Var scale(Var a, double s) {
  return a.tape->record(a.val() * s, {a}, [a, s](Tape& t, const Mat& g) { t.accum(a.id, g * s); });
}

// a (n x m) + row (1 x m) broadcast over rows.
inline Var add_row(Var a, Var row) {
  check(row.rows() == 1 && row.cols() == a.cols(), "add_row: shape mismatch");
  Mat out = a.val().rowwise() + row.val().row(0);
  return a.tape->record(std::move(out), {a, row}, [a, row](Tape& t, const Mat& g) {
    t.accum(a.id, g);
    if (t.requires_grad(row.id)) t.accum(row.id, g.colwise().sum());
  });
}

inline Var tanh(Var a) {
  Mat out = a.val().array().tanh().matrix();
  Mat y = out;
  return a.tape->record(std::move(out), {a}, [a, y](Tape& t, const Mat& g) {
    t.accum(a.id, g.cwiseProduct((1.0 - y.array().square()).matrix()));
  });
}

inline Var sigmoid(Var a) {
  Mat out = (1.0 / (1.0 + (-a.val().array()).exp())).matrix();
  Mat y = out;
  return a.tape->record(std::move(out), {a}, [a, y](Tape& t, const Mat& g) {
    t.accum(a.id, g.cwiseProduct((y.array() * (1.0 - y.array())).matrix()));
  });
}

inline Var exp(Var a) {
  Mat out = a.val().array().exp().matrix();
  Mat y = out;
  return a.tape->record(std::move(out), {a}, [a, y](Tape& t, const Mat& g) { t.accum(a.id, g.cwiseProduct(y)); });
}

inline Var transpose(Var a) {
  Mat out = a.val().transpose();
  return a.tape->record(std::move(out), {a}, [a](Tape& t, const Mat& g) { t.accum(a.id, g.transpose()); });
}

// tanh approximation of GELU
inline Var gelu(Var a) {
  static constexpr double k = 0.7978845608028654;  // sqrt(2/pi)
  static constexpr double c = 0.044715;
  const Mat& x = a.val();
  Mat inner = (k * (x.array() + c * x.array().cube())).matrix();
  Mat th = inner.array().tanh().matrix();
  Mat out = (0.5 * x.array() * (1.0 + th.array())).matrix();
  return a.tape->record(std::move(out), {a}, [a, th](Tape& t, const Mat& g) {
    const auto x = a.val().array();
    auto dinner = k * (1.0 + 3.0 * c * x.square());
    auto d = 0.5 * (1.0 + th.array()) + 0.5 * x * (1.0 - th.array().square()) * dinner;
    t.accum(a.id, (g.array() * d).matrix());
  });
}

// Row-wise layer normalization with learned gain and bias (both 1 x m).
inline Var layer_norm(Var x, Var gamma, Var beta, double eps = 1e-5) {
  const Mat& v = x.val();
  const auto n = v.rows();
  const auto m = v.cols();
  Mat xhat(n, m);
  Eigen::VectorXd inv_std(n);
  for (Eigen::Index i = 0; i < n; ++i) {
    double mean = v.row(i).mean();
    double var = (v.row(i).array() - mean).square().mean();
    inv_std(i) = 1.0 / std::sqrt(var + eps);
    xhat.row(i) = (v.row(i).array() - mean) * inv_std(i);
  }
  Mat out = (xhat.array().rowwise() * gamma.val().row(0).array()).matrix();
  out.rowwise() += beta.val().row(0);
  return x.tape->record(std::move(out), {x, gamma, beta}, [x, gamma, beta, xhat, inv_std](Tape& t, const Mat& g) {
    const auto m = xhat.cols();
    if (t.requires_grad(gamma.id)) t.accum(gamma.id, g.cwiseProduct(xhat).colwise().sum());
    if (t.requires_grad(beta.id)) t.accum(beta.id, g.colwise().sum());
    if (t.requires_grad(x.id)) {
      Mat dxhat = (g.array().rowwise() * gamma.val().row(0).array()).matrix();
      Mat dx(xhat.rows(), m);
      for (Eigen::Index i = 0; i < xhat.rows(); ++i) {
        double s1 = dxhat.row(i).sum();
        double s2 = dxhat.row(i).dot(xhat.row(i));
        dx.row(i) = (inv_std(i) / static_cast<double>(m)) *
                    (static_cast<double>(m) * dxhat.row(i).array() - s1 - xhat.row(i).array() * s2).matrix();
      }
      t.accum(x.id, dx);
    }
  });
}

// Inverted dropout. `p` is the drop probability; p == 0 is the identity.
inline Var dropout(Var a, double p, Rng& rng) {
  if (p <= 0.0) return a;
  Mat mask(a.rows(), a.cols());
  const double keep = 1.0 - p;
  for (Eigen::Index i = 0; i < mask.size(); ++i) mask.data()[i] = uniform01(rng) < keep ? 1.0 / keep : 0.0;
  Mat out = a.val().cwiseProduct(mask);
  return a.tape->record(std::move(out), {a}, [a, mask](Tape& t, const Mat& g) { t.accum(a.id, g.cwiseProduct(mask)); });
}

// ---------------------------------------------------------------------------
// Shape manipulation

inline Var gather_rows(Var table, const std::vector<int>& ids) {
  Mat out(static_cast<Eigen::Index>(ids.size()), table.cols());
  for (std::size_t i = 0; i < ids.size(); ++i) {
    check(ids[i] >= 0 && ids[i] < table.rows(), "gather_rows: index ", ids[i], " out of range");
    out.row(static_cast<Eigen::Index>(i)) = table.val().row(ids[i]);
  }
  return table.tape->record(std::move(out), {table}, [table, ids](Tape& t, const Mat& g) {
    for (std::size_t i = 0; i < ids.size(); ++i) t.accum_row(table.id, ids[i], g.row(static_cast<Eigen::Index>(i)));
  });
}

inline Var concat_cols(const std::vector<Var>& parts) {
  check(!parts.empty(), "concat_cols: no inputs");
  Eigen::Index rows = parts[0].rows(), cols = 0;
  for (const auto& p : parts) {
    check(p.rows() == rows, "concat_cols: row mismatch");
    cols += p.cols();
  }
  Mat out(rows, cols);
  Eigen::Index off = 0;
  for (const auto& p : parts) {
    out.middleCols(off, p.cols()) = p.val();
    off += p.cols();
  }
  return parts[0].tape->record(std::move(out), parts, [parts](Tape& t, const Mat& g) {
    Eigen::Index off = 0;
    for (const auto& p : parts) {
      if (t.requires_grad(p.id)) t.accum(p.id, g.middleCols(off, p.cols()));
      off += p.cols();
    }
  });
}

inline Var concat_rows(const std::vector<Var>& parts) {
  check(!parts.empty(), "concat_rows: no inputs");
  Eigen::Index cols = parts[0].cols(), rows = 0;
  for (const auto& p : parts) {
    check(p.cols() == cols, "concat_rows: column mismatch");
    rows += p.rows();
  }
  Mat out(rows, cols);
  Eigen::Index off = 0;
  for (const auto& p : parts) {
    out.middleRows(off, p.rows()) = p.val();
    off += p.rows();
  }
  return parts[0].tape->record(std::move(out), parts, [parts](Tape& t, const Mat& g) {
    Eigen::Index off = 0;
    for (const auto& p : parts) {
      if (t.requires_grad(p.id)) t.accum(p.id, g.middleRows(off, p.rows()));
      off += p.rows();
    }
  });
}

inline Var slice_cols(Var a, Eigen::Index begin, Eigen::Index n) {
  check(begin >= 0 && begin + n <= a.cols(), "slice_cols: out of range");
  Mat out = a.val().middleCols(begin, n);
  return a.tape->record(std::move(out), {a}, [a, begin, n](Tape& t, const Mat& g) {
    Mat full = Mat::Zero(a.rows(), a.cols());
    full.middleCols(begin, n) = g;
    t.accum(a.id, full);
  });
}

inline Var slice_rows(Var a, Eigen::Index begin, Eigen::Index n) {
  check(begin >= 0 && begin + n <= a.rows(), "slice_rows: out of range");
  Mat out = a.val().middleRows(begin, n);
  return a.tape->record(std::move(out), {a}, [a, begin, n](Tape& t, const Mat& g) {
    Mat full = Mat::Zero(a.rows(), a.cols());
    full.middleRows(begin, n) = g;
    t.accum(a.id, full);
  });
}

// Mean of a group of rows, one output row per group.
inline Var mean_row_groups(Var a, const std::vector<std::vector<int>>& groups) {
  Mat out = Mat::Zero(static_cast<Eigen::Index>(groups.size()), a.cols());
  for (std::size_t k = 0; k < groups.size(); ++k) {
    check(!groups[k].empty(), "mean_row_groups: empty group");
    for (int r : groups[k]) out.row(static_cast<Eigen::Index>(k)) += a.val().row(r);
    out.row(static_cast<Eigen::Index>(k)) /= static_cast<double>(groups[k].size());
  }
  return a.tape->record(std::move(out), {a}, [a, groups](Tape& t, const Mat& g) {
    for (std::size_t k = 0; k < groups.size(); ++k) {
      const double w = 1.0 / static_cast<double>(groups[k].size());
      for (int r : groups[k]) t.accum_row(a.id, r, w * g.row(static_cast<Eigen::Index>(k)));
    }
  });
}

// Copy of `base` with base.row(rows[k]) replaced by src.row(k).
inline Var splice_rows(Var base, const std::vector<int>& rows, Var src) {
  check(static_cast<Eigen::Index>(rows.size()) == src.rows(), "splice_rows: row count mismatch");
  check(base.cols() == src.cols(), "splice_rows: width mismatch");
  Mat out = base.val();
  for (std::size_t k = 0; k < rows.size(); ++k) out.row(rows[k]) = src.val().row(static_cast<Eigen::Index>(k));
  return base.tape->record(std::move(out), {base, src}, [base, rows, src](Tape& t, const Mat& g) {
    if (t.requires_grad(base.id)) {
      Mat gb = g;
      for (int r : rows) gb.row(r).setZero();
      t.accum(base.id, gb);
    }
    if (t.requires_grad(src.id)) {
      Mat gs(src.rows(), src.cols());
      for (std::size_t k = 0; k < rows.size(); ++k) gs.row(static_cast<Eigen::Index>(k)) = g.row(rows[k]);
      t.accum(src.id, gs);
    }
  });
}

// Selects entries of a row vector.
inline Var gather_cols(Var row, const std::vector<int>& idx) {
  check(row.rows() == 1, "gather_cols: expects a row vector");
  Mat out(1, static_cast<Eigen::Index>(idx.size()));
  for (std::size_t k = 0; k < idx.size(); ++k) out(0, static_cast<Eigen::Index>(k)) = row.val()(0, idx[k]);
  return row.tape->record(std::move(out), {row}, [row, idx](Tape& t, const Mat& g) {
    Mat full = Mat::Zero(1, row.cols());
    for (std::size_t k = 0; k < idx.size(); ++k) full(0, idx[k]) += g(0, static_cast<Eigen::Index>(k));
    t.accum(row.id, full);
  });
}

inline Var sum(Var a) {
  Mat out(1, 1);
  out(0, 0) = a.val().sum();
  return a.tape->record(std::move(out), {a}, [a](Tape& t, const Mat& g) {
    t.accum(a.id, Mat::Constant(a.rows(), a.cols(), g(0, 0)));
  });
}

inline Var pick(Var a, Eigen::Index r, Eigen::Index c) {
  Mat out(1, 1);
  out(0, 0) = a.val()(r, c);
  return a.tape->record(std::move(out), {a}, [a, r, c](Tape& t, const Mat& g) {
    Mat full = Mat::Zero(a.rows(), a.cols());
    full(r, c) = g(0, 0);
    t.accum(a.id, full);
  });
}

// ---------------------------------------------------------------------------
// Normalizers and losses

// log-softmax of a 1 x n row.
inline Var log_softmax(Var a) {
  check(a.rows() == 1 && a.cols() > 0, "log_softmax: expects a non-empty row vector");
  const double mx = a.val().maxCoeff();
  const double lse = mx + std::log((a.val().array() - mx).exp().sum());
  Mat out = (a.val().array() - lse).matrix();
  Mat p = out.array().exp().matrix();
  return a.tape->record(std::move(out), {a}, [a, p](Tape& t, const Mat& g) {
    t.accum(a.id, g - p * g.sum());
  });
}

// Output entry k is logsumexp over the input entries listed in groups[k].
inline Var logsumexp_groups(Var row, const std::vector<std::vector<int>>& groups) {
  check(row.rows() == 1, "logsumexp_groups: expects a row vector");
  Mat out(1, static_cast<Eigen::Index>(groups.size()));
  for (std::size_t k = 0; k < groups.size(); ++k) {
    check(!groups[k].empty(), "logsumexp_groups: empty group");
    double mx = -std::numeric_limits<double>::infinity();
    for (int i : groups[k]) mx = std::max(mx, row.val()(0, i));
    double s = 0;
    for (int i : groups[k]) s += std::exp(row.val()(0, i) - mx);
    out(0, static_cast<Eigen::Index>(k)) = mx + std::log(s);
  }
  Mat y = out;
  return row.tape->record(std::move(out), {row}, [row, groups, y](Tape& t, const Mat& g) {
    Mat full = Mat::Zero(1, row.cols());
    for (std::size_t k = 0; k < groups.size(); ++k)
      for (int i : groups[k])
        full(0, i) += g(0, static_cast<Eigen::Index>(k)) * std::exp(row.val()(0, i) - y(0, static_cast<Eigen::Index>(k)));
    t.accum(row.id, full);
  });
}

// Sum over rows of -log softmax(logits.row(i))[targets[i]].
inline Var softmax_nll(Var logits, const std::vector<int>& targets) {
  check(static_cast<Eigen::Index>(targets.size()) == logits.rows(), "softmax_nll: target count mismatch");
  const Mat& z = logits.val();
  Mat p(z.rows(), z.cols());
  double loss = 0;
  for (Eigen::Index i = 0; i < z.rows(); ++i) {
    const double mx = z.row(i).maxCoeff();
    RowVec e = (z.row(i).array() - mx).exp().matrix();
    const double s = e.sum();
    p.row(i) = e / s;
    loss -= z(i, targets[i]) - mx - std::log(s);
  }
  Mat out(1, 1);
  out(0, 0) = loss;
  return logits.tape->record(std::move(out), {logits}, [logits, p, targets](Tape& t, const Mat& g) {
    Mat d = p;
    for (std::size_t i = 0; i < targets.size(); ++i) d(static_cast<Eigen::Index>(i), targets[i]) -= 1.0;
    t.accum(logits.id, d * g(0, 0));
  });
}

// Smoothed symmetric KL between two distributions given as log-probability
// rows: 0.5 * (KL(P||Q) + KL(Q||P)), KL(P||Q) = sum p (log(p+eps) - log(q+eps)).
inline Var symmetric_kl(Var logp, Var logq, double eps) {
  check(logp.rows() == 1 && logq.rows() == 1 && logp.cols() == logq.cols(), "symmetric_kl: shape mismatch");
  const Mat p = logp.val().array().exp().matrix();
  const Mat q = logq.val().array().exp().matrix();
  const Mat lp = (p.array() + eps).log().matrix();
  const Mat lq = (q.array() + eps).log().matrix();
  const double forward = (p.array() * (lp - lq).array()).sum();
  const double reverse = (q.array() * (lq - lp).array()).sum();
  Mat out(1, 1);
  out(0, 0) = 0.5 * (forward + reverse);
  return logp.tape->record(std::move(out), {logp, logq}, [logp, logq, p, q, lp, lq, eps](Tape& t, const Mat& g) {
    const double s = g(0, 0);
    // d/dp_i = 0.5 * (lp_i - lq_i + (p_i - q_i) / (p_i + eps)); chain through p = exp(logp).
    const Mat dp = 0.5 * ((lp - lq).array() + (p - q).array() / (p.array() + eps)).matrix();
    const Mat dq = 0.5 * ((lq - lp).array() + (q - p).array() / (q.array() + eps)).matrix();
    t.accum(logp.id, (s * dp.array() * p.array()).matrix());
    t.accum(logq.id, (s * dq.array() * q.array()).matrix());
  });
}

// ---------------------------------------------------------------------------
// Relation-aware multi-head attention core.
//
// Given projected queries/keys/values (L x M), an optional relation table
// (E x M, head h uses columns [h*dz, (h+1)*dz)) and an L x L matrix of relation
// ids, computes for every head
//   e_ij  = q_i . (k_j + r_ij) / sqrt(dz)
//   a_ij  = softmax_j e_ij
//   z_i   = sum_j a_ij (v_j + r_ij)
// and returns the concatenated heads (L x M). Without a relation table the
// r terms vanish and this is standard scaled dot-product attention.

using RelationIds = Eigen::Matrix<int, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

struct AttentionTrace {
  std::vector<Mat> probs;  // one L x L matrix per head
};

inline Var relation_attention(Var q, Var k, Var v, const Var* rel_table, std::shared_ptr<const RelationIds> rel_ids,
                              int heads, AttentionTrace* trace = nullptr) {
  const Eigen::Index L = q.rows();
  const Eigen::Index M = q.cols();
  check(heads > 0 && M % heads == 0, "relation_attention: width ", M, " not divisible by ", heads, " heads");
  check(k.rows() == L && v.rows() == L && k.cols() == M && v.cols() == M, "relation_attention: shape mismatch");
  const bool use_rel = rel_table != nullptr;
  if (use_rel) {
    check(rel_ids && rel_ids->rows() == L && rel_ids->cols() == L, "relation_attention: relation matrix is not ", L, "x", L);
    check(rel_table->cols() == M, "relation_attention: relation table width mismatch");
    for (Eigen::Index i = 0; i < rel_ids->size(); ++i)
      check(rel_ids->data()[i] >= 0 && rel_ids->data()[i] < rel_table->rows(), "relation_attention: relation id out of range");
  }
  check(q.val().allFinite() && k.val().allFinite() && v.val().allFinite(), "relation_attention: non-finite input");

  const Eigen::Index dz = M / heads;
  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(dz));
  const Eigen::Index E = use_rel ? rel_table->rows() : 0;

  std::vector<Mat> alphas(static_cast<std::size_t>(heads));
  Mat out(L, M);
  for (int h = 0; h < heads; ++h) {
    const Eigen::Index c0 = h * dz;
    const auto Qh = q.val().middleCols(c0, dz);
    const auto Kh = k.val().middleCols(c0, dz);
    const auto Vh = v.val().middleCols(c0, dz);
    Mat e = Qh * Kh.transpose();
    Mat qt;
    if (use_rel) {
      qt = Qh * rel_table->val().middleCols(c0, dz).transpose();  // L x E
      for (Eigen::Index i = 0; i < L; ++i)
        for (Eigen::Index j = 0; j < L; ++j) e(i, j) += qt(i, (*rel_ids)(i, j));
    }
    e *= inv_sqrt;
    Mat& a = alphas[static_cast<std::size_t>(h)];
    a.resize(L, L);
    for (Eigen::Index i = 0; i < L; ++i) {
      const double mx = e.row(i).maxCoeff();
      a.row(i) = (e.row(i).array() - mx).exp().matrix();
      a.row(i) /= a.row(i).sum();
    }
    Mat z = a * Vh;
    if (use_rel) {
      Mat agg = Mat::Zero(L, E);
      for (Eigen::Index i = 0; i < L; ++i)
        for (Eigen::Index j = 0; j < L; ++j) agg(i, (*rel_ids)(i, j)) += a(i, j);
      z += agg * rel_table->val().middleCols(c0, dz);
    }
    out.middleCols(c0, dz) = z;
  }
  if (trace) trace->probs = alphas;

  std::vector<Var> inputs{q, k, v};
  Var rel = use_rel ? *rel_table : Var{};
  if (use_rel) inputs.push_back(rel);
  return q.tape->record(std::move(out), inputs, [q, k, v, rel, use_rel, rel_ids, alphas, heads, dz, inv_sqrt, L, E](Tape& t, const Mat& g) {
    const Eigen::Index M = q.cols();
    Mat dq = Mat::Zero(L, M), dk = Mat::Zero(L, M), dv = Mat::Zero(L, M);
    Mat drel = use_rel ? Mat::Zero(E, M) : Mat();
    for (int h = 0; h < heads; ++h) {
      const Eigen::Index c0 = h * dz;
      const Mat& a = alphas[static_cast<std::size_t>(h)];
      const auto Qh = q.val().middleCols(c0, dz);
      const auto Kh = k.val().middleCols(c0, dz);
      const auto Vh = v.val().middleCols(c0, dz);
      const auto gz = g.middleCols(c0, dz);
      Mat da = gz * Vh.transpose();
      if (use_rel) {
        const auto Th = rel.val().middleCols(c0, dz);
        Mat gt = gz * Th.transpose();  // L x E
        Mat agg = Mat::Zero(L, E);
        for (Eigen::Index i = 0; i < L; ++i)
          for (Eigen::Index j = 0; j < L; ++j) {
            const int r = (*rel_ids)(i, j);
            da(i, j) += gt(i, r);
            agg(i, r) += a(i, j);
          }
        drel.middleCols(c0, dz) += agg.transpose() * gz;
      }
      dv.middleCols(c0, dz) += a.transpose() * gz;
      Mat de(L, L);
      for (Eigen::Index i = 0; i < L; ++i) {
        const double s = a.row(i).dot(da.row(i));
        de.row(i) = a.row(i).array() * (da.row(i).array() - s);
      }
      de *= inv_sqrt;
      dq.middleCols(c0, dz) += de * Kh;
      dk.middleCols(c0, dz) += de.transpose() * Qh;
      if (use_rel) {
        const auto Th = rel.val().middleCols(c0, dz);
        Mat b = Mat::Zero(L, E);
        for (Eigen::Index i = 0; i < L; ++i)
          for (Eigen::Index j = 0; j < L; ++j) b(i, (*rel_ids)(i, j)) += de(i, j);
        dq.middleCols(c0, dz) += b * Th;
        drel.middleCols(c0, dz) += b.transpose() * Qh;
      }
    }
    t.accum(q.id, dq);
    t.accum(k.id, dk);
    t.accum(v.id, dv);
    if (use_rel) t.accum(rel.id, drel);
  });
}

}  // namespace ag
}  // namespace hiesql
