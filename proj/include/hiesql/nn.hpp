#pragma once

// Parameter store, dense layers, transformer blocks and Adam.

#include <cmath>
#include <map>
#include <memory>
#include <string>
#include <vector>

#include "hiesql/autograd.hpp"
#include "hiesql/util.hpp"

namespace hiesql {

// Owns named parameters in insertion order. Copying deep-copies values.
class ParamStore {
 public:
  ParamStore() = default;
  ParamStore(const ParamStore& o) { *this = o; }
  ParamStore& operator=(const ParamStore& o) {
    if (this == &o) return *this;
    params_.clear();
    index_.clear();
    for (const auto& p : o.params_) {
      params_.push_back(std::make_unique<Param>(*p));
      index_[p->name] = params_.back().get();
    }
    return *this;
  }
  ParamStore(ParamStore&&) = default;
  ParamStore& operator=(ParamStore&&) = default;

  Param& add(const std::string& name, Mat init, int group = 0) {
    check(!index_.count(name), "duplicate parameter '", name, "'");
    check(init.allFinite(), "parameter '", name, "' initialized with non-finite values");
    params_.push_back(std::make_unique<Param>(Param{name, std::move(init), false, group}));
    index_[name] = params_.back().get();
    return *params_.back();
  }

  Param& get(const std::string& name) {
    auto it = index_.find(name);
    check(it != index_.end(), "unknown parameter '", name, "'");
    return *it->second;
  }
  const Param& get(const std::string& name) const {
    auto it = index_.find(name);
    check(it != index_.end(), "unknown parameter '", name, "'");
    return *it->second;
  }
  bool has(const std::string& name) const { return index_.count(name) > 0; }

  std::vector<Param*> all() {
    std::vector<Param*> out;
    for (auto& p : params_) out.push_back(p.get());
    return out;
  }
  std::vector<const Param*> all() const {
    std::vector<const Param*> out;
    for (const auto& p : params_) out.push_back(p.get());
    return out;
  }
  std::size_t size() const { return params_.size(); }

  void set_frozen(bool frozen) {
    for (auto& p : params_) p->frozen = frozen;
  }

  std::size_t count_scalars() const {
    std::size_t n = 0;
    for (const auto& p : params_) n += static_cast<std::size_t>(p->value.size());
    return n;
  }

  // Checksum over names, shapes and raw values.
  std::uint64_t checksum() const {
    std::uint64_t h = fnv1a("params", 6);
    for (const auto& p : params_) {
      h = fnv1a(p->name.data(), p->name.size(), h);
      const std::int64_t shape[2] = {p->value.rows(), p->value.cols()};
      h = fnv1a(shape, sizeof shape, h);
      h = fnv1a(p->value.data(), sizeof(double) * static_cast<std::size_t>(p->value.size()), h);
    }
    return h;
  }

 private:
  std::vector<std::unique_ptr<Param>> params_;
  std::map<std::string, Param*> index_;
};

// ---------------------------------------------------------------------------
// Initializers

inline Mat init_uniform(Eigen::Index rows, Eigen::Index cols, double bound, Rng& rng) {
  std::uniform_real_distribution<double> d(-bound, bound);
  Mat m(rows, cols);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = d(rng);
  return m;
}

inline Mat init_xavier(Eigen::Index in, Eigen::Index out, Rng& rng) {
  return init_uniform(in, out, std::sqrt(6.0 / static_cast<double>(in + out)), rng);
}

// ---------------------------------------------------------------------------
// Layers. Each layer records parameter names; `bind` maps them onto a tape.

struct Linear {
  std::string w, b;

  static Linear create(ParamStore& ps, const std::string& name, int in, int out, Rng& rng, int group = 0, bool bias = true) {
    Linear l{name + ".w", bias ? name + ".b" : ""};
    ps.add(l.w, init_xavier(in, out, rng), group);
    if (bias) ps.add(l.b, Mat::Zero(1, out), group);
    return l;
  }

  ag::Var operator()(ag::Tape& t, ParamStore& ps, ag::Var x) const {
    ag::Var y = ag::matmul(x, t.param(ps.get(w)));
    return b.empty() ? y : ag::add_row(y, t.param(ps.get(b)));
  }
};

struct LayerNorm {
  std::string gamma, beta;

  static LayerNorm create(ParamStore& ps, const std::string& name, int width, int group = 0) {
    LayerNorm l{name + ".gamma", name + ".beta"};
    ps.add(l.gamma, Mat::Ones(1, width), group);
    ps.add(l.beta, Mat::Zero(1, width), group);
    return l;
  }

  ag::Var operator()(ag::Tape& t, ParamStore& ps, ag::Var x) const {
    return ag::layer_norm(x, t.param(ps.get(gamma)), t.param(ps.get(beta)));
  }
};

// Dropout that is a no-op when `rng` is null or p is 0.
inline ag::Var maybe_dropout(ag::Var x, double p, Rng* rng) {
  if (!rng || p <= 0.0) return x;
  return ag::dropout(x, p, *rng);
}

// Post-norm transformer block whose attention optionally adds relation
// embeddings (one table shared by the caller, sliced per head).
struct TransformerBlock {
  Linear q, k, v, o, ff1, ff2;
  LayerNorm ln1, ln2;
  int heads = 1;

  static TransformerBlock create(ParamStore& ps, const std::string& name, int width, int heads, Rng& rng, int group = 0) {
    check(heads > 0 && width % heads == 0, name, ": width ", width, " not divisible by ", heads, " heads");
    TransformerBlock b;
    b.q = Linear::create(ps, name + ".q", width, width, rng, group);
    b.k = Linear::create(ps, name + ".k", width, width, rng, group);
    b.v = Linear::create(ps, name + ".v", width, width, rng, group);
    b.o = Linear::create(ps, name + ".o", width, width, rng, group);
    b.ln1 = LayerNorm::create(ps, name + ".ln1", width, group);
    b.ff1 = Linear::create(ps, name + ".ff1", width, 4 * width, rng, group);
    b.ff2 = Linear::create(ps, name + ".ff2", 4 * width, width, rng, group);
    b.ln2 = LayerNorm::create(ps, name + ".ln2", width, group);
    b.heads = heads;
    return b;
  }

  // Multi-head (relation-aware) attention followed by the output projection.
  ag::Var attend(ag::Tape& t, ParamStore& ps, ag::Var x, const ag::Var* rel_table,
                 const std::shared_ptr<const ag::RelationIds>& rel_ids, ag::AttentionTrace* trace = nullptr) const {
    return o(t, ps, ag::relation_attention(q(t, ps, x), k(t, ps, x), v(t, ps, x), rel_table, rel_ids, heads, trace));
  }

  ag::Var operator()(ag::Tape& t, ParamStore& ps, ag::Var x, const ag::Var* rel_table,
                     const std::shared_ptr<const ag::RelationIds>& rel_ids, double dropout, Rng* rng,
                     ag::AttentionTrace* trace = nullptr) const {
    ag::Var a = maybe_dropout(attend(t, ps, x, rel_table, rel_ids, trace), dropout, rng);
    ag::Var h = ln1(t, ps, ag::add(x, a));
    ag::Var f = maybe_dropout(ff2(t, ps, ag::gelu(ff1(t, ps, h))), dropout, rng);
    return ln2(t, ps, ag::add(h, f));
  }
};

// ---------------------------------------------------------------------------
// Adam with per-group learning rates, global-norm clipping, ordered updates.

struct AdamState {
  Mat m, v;
};

class Adam {
 public:
  explicit Adam(double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8) : b1_(beta1), b2_(beta2), eps_(eps) {}

  // grads[i] belongs to params[i]; lr_of_group maps group id to learning rate.
  // Returns the pre-clipping global gradient norm.
  template <typename LrFn>
  double step(const std::vector<Param*>& params, const std::vector<Mat>& grads, LrFn lr_of_group, double clip_norm) {
    check(params.size() == grads.size(), "Adam: parameter/gradient count mismatch");
    double sq = 0.0;
    for (const auto& g : grads) sq += g.squaredNorm();
    const double norm = std::sqrt(sq);
    check(std::isfinite(norm), "Adam: non-finite gradient norm");
    const double scale = clip_norm > 0.0 && norm > clip_norm ? clip_norm / norm : 1.0;
    ++t_;
    const double c1 = 1.0 - std::pow(b1_, static_cast<double>(t_));
    const double c2 = 1.0 - std::pow(b2_, static_cast<double>(t_));
    for (std::size_t i = 0; i < params.size(); ++i) {
      Param& p = *params[i];
      if (p.frozen) continue;
      auto& st = state_[p.name];
      if (st.m.size() == 0) {
        st.m = Mat::Zero(p.value.rows(), p.value.cols());
        st.v = Mat::Zero(p.value.rows(), p.value.cols());
      }
      const Mat g = grads[i] * scale;
      st.m = b1_ * st.m + (1.0 - b1_) * g;
      st.v = b2_ * st.v + (1.0 - b2_) * g.cwiseProduct(g);
      const double lr = lr_of_group(p.group);
      p.value.array() -= lr * (st.m.array() / c1) / ((st.v.array() / c2).sqrt() + eps_);
    }
    return norm;
  }

  long steps() const { return t_; }

 private:
  double b1_, b2_, eps_;
  long t_ = 0;
  std::map<std::string, AdamState> state_;
};

// Accumulates gradients of many tapes in a fixed parameter order.
class GradBuffer {
 public:
  explicit GradBuffer(std::vector<Param*> params) : params_(std::move(params)) {
    for (auto* p : params_) grads_.push_back(Mat::Zero(p->value.rows(), p->value.cols()));
    for (std::size_t i = 0; i < params_.size(); ++i) index_[params_[i]] = i;
  }

  void add(ag::Tape& t, double weight = 1.0) {
    for (auto [p, id] : t.params()) {
      auto it = index_.find(p);
      if (it == index_.end() || !t.requires_grad(id)) continue;
      grads_[it->second] += weight * t.grad(ag::Var{&t, id});
    }
  }
  void add(const GradBuffer& o) {
    for (std::size_t i = 0; i < grads_.size(); ++i) grads_[i] += o.grads_[i];
  }
  void scale(double s) {
    for (auto& g : grads_) g *= s;
  }

  const std::vector<Param*>& params() const { return params_; }
  const std::vector<Mat>& grads() const { return grads_; }
  bool finite() const {
    for (const auto& g : grads_)
      if (!g.allFinite()) return false;
    return true;
  }

 private:
  std::vector<Param*> params_;
  std::vector<Mat> grads_;
  std::map<const Param*, std::size_t> index_;
};

}  // namespace hiesql
