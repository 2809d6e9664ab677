#include "motion_r1/nn.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

namespace mr1::nn {

namespace {

int64_t numel_of(const std::vector<int64_t>& s) {
  int64_t n = 1;
  for (int64_t d : s) {
    if (d <= 0) throw NnError("non-positive dimension in shape");
    n *= d;
  }
  return n;
}

}  // namespace

Tensor::Tensor(std::vector<int64_t> s) : shape(std::move(s)) {
  v.assign(static_cast<size_t>(numel_of(shape)), 0.0);
}

Tensor Tensor::scalar(double x) {
  Tensor t({1});
  t.v[0] = x;
  return t;
}

Tensor Tensor::vec(std::vector<double> x) {
  Tensor t;
  t.shape = {static_cast<int64_t>(x.size())};
  t.v = std::move(x);
  return t;
}

Tensor Tensor::full(std::vector<int64_t> s, double x) {
  Tensor t(std::move(s));
  std::fill(t.v.begin(), t.v.end(), x);
  return t;
}

Tensor Tensor::randn(Rng& rng, std::vector<int64_t> s, double stddev) {
  Tensor t(std::move(s));
  for (double& x : t.v) x = rng.normal() * stddev;
  return t;
}

int64_t Tensor::cols() const {
  if (shape.size() == 2) return shape[1];
  if (shape.size() == 1) return shape[0];
  if (shape.empty()) return 1;
  throw NnError("cols() on tensor with rank > 2");
}

bool Tensor::all_finite() const {
  for (double x : v)
    if (!std::isfinite(x)) return false;
  return true;
}

std::string Tensor::shape_str() const {
  std::ostringstream os;
  os << "(";
  for (size_t i = 0; i < shape.size(); ++i)
    os << shape[i] << (i + 1 < shape.size() ? "," : "");
  os << ")";
  return os.str();
}

Tensor& ParameterSet::add(const std::string& name, Tensor init) {
  if (values.count(name)) throw NnError("duplicate parameter: " + name);
  auto& t = values[name] = std::move(init);
  opt[name] = AdamState{Tensor(t.shape), Tensor(t.shape)};
  return t;
}

Tensor& ParameterSet::at(const std::string& name) {
  auto it = values.find(name);
  if (it == values.end()) throw NnError("unknown parameter: " + name);
  return it->second;
}

const Tensor& ParameterSet::at(const std::string& name) const {
  auto it = values.find(name);
  if (it == values.end()) throw NnError("unknown parameter: " + name);
  return it->second;
}

int64_t ParameterSet::param_count() const {
  int64_t n = 0;
  for (auto& [k, t] : values) n += t.numel();
  return n;
}

void adam_step(ParameterSet& ps, const GradMap& grads, double lr, double beta1,
               double beta2, double eps) {
  if (lr < 0) throw NnError("adam_step: negative learning rate");
  ps.step += 1;
  const double t = static_cast<double>(ps.step);
  const double bc1 = 1.0 - std::pow(beta1, t);
  const double bc2 = 1.0 - std::pow(beta2, t);
  for (auto& [name, g] : grads) {
    if (!ps.has(name)) continue;
    if (!g.all_finite())
      throw NnError("adam_step: non-finite gradient for " + name);
    Tensor& p = ps.at(name);
    AdamState& st = ps.opt.at(name);
    if (!g.same_shape(p))
      throw NnError("adam_step: gradient shape mismatch for " + name);
    for (int64_t i = 0; i < p.numel(); ++i) {
      double gi = g.v[i];
      st.m.v[i] = beta1 * st.m.v[i] + (1 - beta1) * gi;
      st.v.v[i] = beta2 * st.v.v[i] + (1 - beta2) * gi * gi;
      double mhat = st.m.v[i] / bc1;
      double vhat = st.v.v[i] / bc2;
      p.v[i] -= lr * mhat / (std::sqrt(vhat) + eps);
    }
  }
}

double cosine_lr(int64_t step, int64_t total_steps, double lr_max,
                 double lr_min) {
  if (total_steps <= 0) throw NnError("cosine_lr: total_steps must be > 0");
  if (lr_max < lr_min || lr_min < 0)
    throw NnError("cosine_lr: require lr_max >= lr_min >= 0");
  if (step >= total_steps) return lr_min;
  if (step < 0) throw NnError("cosine_lr: negative step");
  constexpr double kPi = 3.14159265358979323846;
  double frac = static_cast<double>(step) / static_cast<double>(total_steps);
  return lr_min + 0.5 * (lr_max - lr_min) * (1.0 + std::cos(kPi * frac));
}

// ---------------------------------------------------------------------------
// Tape

NodeId Tape::push(Tensor value, bool requires_grad,
                  std::function<void(Tape&)> back) {
  Node n;
  n.value = std::move(value);
  n.requires_grad = requires_grad;
  n.back = std::move(back);
  nodes_.push_back(std::move(n));
  return static_cast<NodeId>(nodes_.size() - 1);
}

Tensor& Tape::grad_buf(NodeId id) {
  Node& n = node(id);
  if (n.grad.v.empty()) n.grad = Tensor(n.value.shape);
  return n.grad;
}

const Tensor& Tape::grad(NodeId id) const {
  if (!ran_backward_) throw NnError("grad() before backward()");
  return node(id).grad;
}

NodeId Tape::constant(Tensor t) { return push(std::move(t), false, nullptr); }

NodeId Tape::input(Tensor t) { return push(std::move(t), true, nullptr); }

NodeId Tape::param(const std::string& name) {
  if (!params_) throw NnError("param() on tape without a parameter set");
  NodeId id = push(params_->at(name), true, nullptr);
  node(id).pname = name;
  return id;
}

#define MR1_CHECK_SHAPE(a, b, op)                                       \
  if (!value(a).same_shape(value(b)))                                   \
    throw NnError(std::string(op) + ": shape mismatch " +               \
                  value(a).shape_str() + " vs " + value(b).shape_str());

NodeId Tape::add(NodeId a, NodeId b) {
  MR1_CHECK_SHAPE(a, b, "add");
  Tensor out = value(a);
  for (int64_t i = 0; i < out.numel(); ++i) out.v[i] += value(b).v[i];
  bool rg = needs(a) || needs(b);
  NodeId id = push(std::move(out), rg, nullptr);
  if (rg)
    node(id).back = [id, a, b](Tape& t) {
      const Tensor& g = t.node(id).grad;
      if (t.needs(a)) {
        Tensor& ga = t.grad_buf(a);
        for (int64_t i = 0; i < g.numel(); ++i) ga.v[i] += g.v[i];
      }
      if (t.needs(b)) {
        Tensor& gb = t.grad_buf(b);
        for (int64_t i = 0; i < g.numel(); ++i) gb.v[i] += g.v[i];
      }
    };
  return id;
}

NodeId Tape::sub(NodeId a, NodeId b) {
  MR1_CHECK_SHAPE(a, b, "sub");
  Tensor out = value(a);
  for (int64_t i = 0; i < out.numel(); ++i) out.v[i] -= value(b).v[i];
  bool rg = needs(a) || needs(b);
  NodeId id = push(std::move(out), rg, nullptr);
  if (rg)
    node(id).back = [id, a, b](Tape& t) {
      const Tensor& g = t.node(id).grad;
      if (t.needs(a)) {
        Tensor& ga = t.grad_buf(a);
        for (int64_t i = 0; i < g.numel(); ++i) ga.v[i] += g.v[i];
      }
      if (t.needs(b)) {
        Tensor& gb = t.grad_buf(b);
        for (int64_t i = 0; i < g.numel(); ++i) gb.v[i] -= g.v[i];
      }
    };
  return id;
}

NodeId Tape::mul(NodeId a, NodeId b) {
  MR1_CHECK_SHAPE(a, b, "mul");
  Tensor out = value(a);
  for (int64_t i = 0; i < out.numel(); ++i) out.v[i] *= value(b).v[i];
  bool rg = needs(a) || needs(b);
  NodeId id = push(std::move(out), rg, nullptr);
  if (rg)
    node(id).back = [id, a, b](Tape& t) {
      const Tensor& g = t.node(id).grad;
      if (t.needs(a)) {
        Tensor& ga = t.grad_buf(a);
        for (int64_t i = 0; i < g.numel(); ++i)
          ga.v[i] += g.v[i] * t.value(b).v[i];
      }
      if (t.needs(b)) {
        Tensor& gb = t.grad_buf(b);
        for (int64_t i = 0; i < g.numel(); ++i)
          gb.v[i] += g.v[i] * t.value(a).v[i];
      }
    };
  return id;
}

NodeId Tape::scale(NodeId a, double c) {
  Tensor out = value(a);
  for (double& x : out.v) x *= c;
  bool rg = needs(a);
  NodeId id = push(std::move(out), rg, nullptr);
  if (rg)
    node(id).back = [id, a, c](Tape& t) {
      const Tensor& g = t.node(id).grad;
      Tensor& ga = t.grad_buf(a);
      for (int64_t i = 0; i < g.numel(); ++i) ga.v[i] += c * g.v[i];
    };
  return id;
}

NodeId Tape::add_scalar(NodeId a, double c) {
  Tensor out = value(a);
  for (double& x : out.v) x += c;
  bool rg = needs(a);
  NodeId id = push(std::move(out), rg, nullptr);
  if (rg)
    node(id).back = [id, a](Tape& t) {
      const Tensor& g = t.node(id).grad;
      Tensor& ga = t.grad_buf(a);
      for (int64_t i = 0; i < g.numel(); ++i) ga.v[i] += g.v[i];
    };
  return id;
}

NodeId Tape::exp_(NodeId a) {
  Tensor out = value(a);
  for (double& x : out.v) x = std::exp(x);
  bool rg = needs(a);
  NodeId id = push(std::move(out), rg, nullptr);
  if (rg)
    node(id).back = [id, a](Tape& t) {
      const Tensor& g = t.node(id).grad;
      const Tensor& y = t.value(id);
      Tensor& ga = t.grad_buf(a);
      for (int64_t i = 0; i < g.numel(); ++i) ga.v[i] += g.v[i] * y.v[i];
    };
  return id;
}

NodeId Tape::relu(NodeId a) {
  Tensor out = value(a);
  for (double& x : out.v) x = x > 0 ? x : 0.0;
  bool rg = needs(a);
  NodeId id = push(std::move(out), rg, nullptr);
  if (rg)
    node(id).back = [id, a](Tape& t) {
      const Tensor& g = t.node(id).grad;
      const Tensor& x = t.value(a);
      Tensor& ga = t.grad_buf(a);
      for (int64_t i = 0; i < g.numel(); ++i)
        if (x.v[i] > 0) ga.v[i] += g.v[i];
    };
  return id;
}

NodeId Tape::tanh_(NodeId a) {
  Tensor out = value(a);
  for (double& x : out.v) x = std::tanh(x);
  bool rg = needs(a);
  NodeId id = push(std::move(out), rg, nullptr);
  if (rg)
    node(id).back = [id, a](Tape& t) {
      const Tensor& g = t.node(id).grad;
      const Tensor& y = t.value(id);
      Tensor& ga = t.grad_buf(a);
      for (int64_t i = 0; i < g.numel(); ++i)
        ga.v[i] += g.v[i] * (1.0 - y.v[i] * y.v[i]);
    };
  return id;
}

NodeId Tape::clamp(NodeId a, double lo, double hi) {
  Tensor out = value(a);
  for (double& x : out.v) x = std::min(std::max(x, lo), hi);
  bool rg = needs(a);
  NodeId id = push(std::move(out), rg, nullptr);
  if (rg)
    node(id).back = [id, a, lo, hi](Tape& t) {
      const Tensor& g = t.node(id).grad;
      const Tensor& x = t.value(a);
      Tensor& ga = t.grad_buf(a);
      for (int64_t i = 0; i < g.numel(); ++i)
        if (x.v[i] > lo && x.v[i] < hi) ga.v[i] += g.v[i];
    };
  return id;
}

NodeId Tape::minimum(NodeId a, NodeId b) {
  MR1_CHECK_SHAPE(a, b, "minimum");
  Tensor out = value(a);
  for (int64_t i = 0; i < out.numel(); ++i)
    out.v[i] = std::min(out.v[i], value(b).v[i]);
  bool rg = needs(a) || needs(b);
  NodeId id = push(std::move(out), rg, nullptr);
  if (rg)
    node(id).back = [id, a, b](Tape& t) {
      const Tensor& g = t.node(id).grad;
      const Tensor& xa = t.value(a);
      const Tensor& xb = t.value(b);
      for (int64_t i = 0; i < g.numel(); ++i) {
        bool pick_a = xa.v[i] <= xb.v[i];
        if (pick_a && t.needs(a)) t.grad_buf(a).v[i] += g.v[i];
        if (!pick_a && t.needs(b)) t.grad_buf(b).v[i] += g.v[i];
      }
    };
  return id;
}

NodeId Tape::matmul(NodeId a, NodeId b) {
  const Tensor& A = value(a);
  const Tensor& B = value(b);
  if (A.shape.size() != 2 || B.shape.size() != 2 || A.shape[1] != B.shape[0])
    throw NnError("matmul: incompatible shapes " + A.shape_str() + " x " +
                  B.shape_str());
  int64_t m = A.shape[0], k = A.shape[1], n = B.shape[1];
  Tensor out({m, n});
  for (int64_t i = 0; i < m; ++i)
    for (int64_t p = 0; p < k; ++p) {
      double av = A.v[i * k + p];
      if (av == 0.0) continue;
      const double* brow = &B.v[p * n];
      double* orow = &out.v[i * n];
      for (int64_t j = 0; j < n; ++j) orow[j] += av * brow[j];
    }
  bool rg = needs(a) || needs(b);
  NodeId id = push(std::move(out), rg, nullptr);
  if (rg)
    node(id).back = [id, a, b, m, k, n](Tape& t) {
      const Tensor& g = t.node(id).grad;
      if (t.needs(a)) {  // dA = g * B^T
        Tensor& ga = t.grad_buf(a);
        const Tensor& B2 = t.value(b);
        for (int64_t i = 0; i < m; ++i)
          for (int64_t p = 0; p < k; ++p) {
            double s = 0;
            const double* grow = &g.v[i * n];
            const double* brow = &B2.v[p * n];
            for (int64_t j = 0; j < n; ++j) s += grow[j] * brow[j];
            ga.v[i * k + p] += s;
          }
      }
      if (t.needs(b)) {  // dB = A^T * g
        Tensor& gb = t.grad_buf(b);
        const Tensor& A2 = t.value(a);
        for (int64_t i = 0; i < m; ++i) {
          const double* grow = &g.v[i * n];
          for (int64_t p = 0; p < k; ++p) {
            double av = A2.v[i * k + p];
            if (av == 0.0) continue;
            double* gbrow = &gb.v[p * n];
            for (int64_t j = 0; j < n; ++j) gbrow[j] += av * grow[j];
          }
        }
      }
    };
  return id;
}

NodeId Tape::matmul_nt(NodeId a, NodeId b) {
  const Tensor& A = value(a);
  const Tensor& B = value(b);
  if (A.shape.size() != 2 || B.shape.size() != 2 || A.shape[1] != B.shape[1])
    throw NnError("matmul_nt: incompatible shapes " + A.shape_str() + " x " +
                  B.shape_str() + "^T");
  int64_t m = A.shape[0], k = A.shape[1], n = B.shape[0];
  Tensor out({m, n});
  for (int64_t i = 0; i < m; ++i)
    for (int64_t j = 0; j < n; ++j) {
      double s = 0;
      const double* arow = &A.v[i * k];
      const double* brow = &B.v[j * k];
      for (int64_t p = 0; p < k; ++p) s += arow[p] * brow[p];
      out.v[i * n + j] = s;
    }
  bool rg = needs(a) || needs(b);
  NodeId id = push(std::move(out), rg, nullptr);
  if (rg)
    node(id).back = [id, a, b, m, k, n](Tape& t) {
      const Tensor& g = t.node(id).grad;
      if (t.needs(a)) {  // dA = g * B
        Tensor& ga = t.grad_buf(a);
        const Tensor& B2 = t.value(b);
        for (int64_t i = 0; i < m; ++i)
          for (int64_t j = 0; j < n; ++j) {
            double gv = g.v[i * n + j];
            if (gv == 0.0) continue;
            const double* brow = &B2.v[j * k];
            double* garow = &ga.v[i * k];
            for (int64_t p = 0; p < k; ++p) garow[p] += gv * brow[p];
          }
      }
      if (t.needs(b)) {  // dB = g^T * A
        Tensor& gb = t.grad_buf(b);
        const Tensor& A2 = t.value(a);
        for (int64_t i = 0; i < m; ++i)
          for (int64_t j = 0; j < n; ++j) {
            double gv = g.v[i * n + j];
            if (gv == 0.0) continue;
            const double* arow = &A2.v[i * k];
            double* gbrow = &gb.v[j * k];
            for (int64_t p = 0; p < k; ++p) gbrow[p] += gv * arow[p];
          }
      }
    };
  return id;
}

NodeId Tape::add_rowvec(NodeId x, NodeId b) {
  const Tensor& X = value(x);
  const Tensor& B = value(b);
  if (X.shape.size() != 2 || B.shape.size() != 1 || X.shape[1] != B.shape[0])
    throw NnError("add_rowvec: shapes " + X.shape_str() + " + " +
                  B.shape_str());
  int64_t m = X.shape[0], n = X.shape[1];
  Tensor out = X;
  for (int64_t i = 0; i < m; ++i)
    for (int64_t j = 0; j < n; ++j) out.v[i * n + j] += B.v[j];
  bool rg = needs(x) || needs(b);
  NodeId id = push(std::move(out), rg, nullptr);
  if (rg)
    node(id).back = [id, x, b, m, n](Tape& t) {
      const Tensor& g = t.node(id).grad;
      if (t.needs(x)) {
        Tensor& gx = t.grad_buf(x);
        for (int64_t i = 0; i < g.numel(); ++i) gx.v[i] += g.v[i];
      }
      if (t.needs(b)) {
        Tensor& gb = t.grad_buf(b);
        for (int64_t i = 0; i < m; ++i)
          for (int64_t j = 0; j < n; ++j) gb.v[j] += g.v[i * n + j];
      }
    };
  return id;
}

NodeId Tape::rows(NodeId table, std::vector<int64_t> ids) {
  const Tensor& T = value(table);
  if (T.shape.size() != 2) throw NnError("rows: table must be 2-D");
  int64_t n = T.shape[0], d = T.shape[1];
  for (int64_t i : ids)
    if (i < 0 || i >= n) throw NnError("rows: index out of range");
  Tensor out({static_cast<int64_t>(ids.size()), d});
  for (size_t r = 0; r < ids.size(); ++r)
    std::copy(&T.v[ids[r] * d], &T.v[ids[r] * d + d], &out.v[r * d]);
  bool rg = needs(table);
  NodeId id = push(std::move(out), rg, nullptr);
  if (rg)
    node(id).back = [id, table, ids = std::move(ids), d](Tape& t) {
      const Tensor& g = t.node(id).grad;
      Tensor& gt = t.grad_buf(table);
      for (size_t r = 0; r < ids.size(); ++r)
        for (int64_t j = 0; j < d; ++j)
          gt.v[ids[r] * d + j] += g.v[r * d + j];
    };
  return id;
}

NodeId Tape::slice_cols(NodeId x, int64_t c0, int64_t c1) {
  const Tensor& X = value(x);
  if (X.shape.size() != 2 || c0 < 0 || c1 > X.shape[1] || c0 >= c1)
    throw NnError("slice_cols: bad range");
  int64_t m = X.shape[0], n = X.shape[1], w = c1 - c0;
  Tensor out({m, w});
  for (int64_t i = 0; i < m; ++i)
    std::copy(&X.v[i * n + c0], &X.v[i * n + c1], &out.v[i * w]);
  bool rg = needs(x);
  NodeId id = push(std::move(out), rg, nullptr);
  if (rg)
    node(id).back = [id, x, c0, m, n, w](Tape& t) {
      const Tensor& g = t.node(id).grad;
      Tensor& gx = t.grad_buf(x);
      for (int64_t i = 0; i < m; ++i)
        for (int64_t j = 0; j < w; ++j)
          gx.v[i * n + c0 + j] += g.v[i * w + j];
    };
  return id;
}

NodeId Tape::concat_cols(const std::vector<NodeId>& xs) {
  if (xs.empty()) throw NnError("concat_cols: empty list");
  int64_t m = value(xs[0]).shape[0];
  int64_t total = 0;
  bool rg = false;
  for (NodeId x : xs) {
    const Tensor& X = value(x);
    if (X.shape.size() != 2 || X.shape[0] != m)
      throw NnError("concat_cols: row mismatch");
    total += X.shape[1];
    rg = rg || needs(x);
  }
  Tensor out({m, total});
  int64_t off = 0;
  for (NodeId x : xs) {
    const Tensor& X = value(x);
    int64_t w = X.shape[1];
    for (int64_t i = 0; i < m; ++i)
      std::copy(&X.v[i * w], &X.v[i * w + w], &out.v[i * total + off]);
    off += w;
  }
  NodeId id = push(std::move(out), rg, nullptr);
  if (rg)
    node(id).back = [id, xs, m, total](Tape& t) {
      const Tensor& g = t.node(id).grad;
      int64_t off2 = 0;
      for (NodeId x : xs) {
        int64_t w = t.value(x).shape[1];
        if (t.needs(x)) {
          Tensor& gx = t.grad_buf(x);
          for (int64_t i = 0; i < m; ++i)
            for (int64_t j = 0; j < w; ++j)
              gx.v[i * w + j] += g.v[i * total + off2 + j];
        }
        off2 += w;
      }
    };
  return id;
}

namespace {

void softmax_row(const double* x, double* y, int64_t n) {
  double mx = x[0];
  for (int64_t j = 1; j < n; ++j) mx = std::max(mx, x[j]);
  double s = 0;
  for (int64_t j = 0; j < n; ++j) {
    y[j] = std::exp(x[j] - mx);
    s += y[j];
  }
  for (int64_t j = 0; j < n; ++j) y[j] /= s;
}

}  // namespace

NodeId Tape::softmax_rows(NodeId x) {
  const Tensor& X = value(x);
  if (X.shape.size() != 2) throw NnError("softmax_rows: need 2-D");
  int64_t m = X.shape[0], n = X.shape[1];
  Tensor out(X.shape);
  for (int64_t i = 0; i < m; ++i)
    softmax_row(&X.v[i * n], &out.v[i * n], n);
  bool rg = needs(x);
  NodeId id = push(std::move(out), rg, nullptr);
  if (rg)
    node(id).back = [id, x, m, n](Tape& t) {
      const Tensor& g = t.node(id).grad;
      const Tensor& y = t.value(id);
      Tensor& gx = t.grad_buf(x);
      for (int64_t i = 0; i < m; ++i) {
        double dot = 0;
        for (int64_t j = 0; j < n; ++j) dot += g.v[i * n + j] * y.v[i * n + j];
        for (int64_t j = 0; j < n; ++j)
          gx.v[i * n + j] += y.v[i * n + j] * (g.v[i * n + j] - dot);
      }
    };
  return id;
}

NodeId Tape::causal_softmax(NodeId scores) {
  const Tensor& X = value(scores);
  if (X.shape.size() != 2 || X.shape[0] != X.shape[1])
    throw NnError("causal_softmax: need square matrix");
  int64_t n = X.shape[0];
  Tensor out(X.shape);
  for (int64_t i = 0; i < n; ++i) {
    int64_t w = i + 1;  // positions 0..i
    softmax_row(&X.v[i * n], &out.v[i * n], w);
    for (int64_t j = w; j < n; ++j) out.v[i * n + j] = 0.0;
  }
  bool rg = needs(scores);
  NodeId id = push(std::move(out), rg, nullptr);
  if (rg)
    node(id).back = [id, scores, n](Tape& t) {
      const Tensor& g = t.node(id).grad;
      const Tensor& y = t.value(id);
      Tensor& gx = t.grad_buf(scores);
      for (int64_t i = 0; i < n; ++i) {
        int64_t w = i + 1;
        double dot = 0;
        for (int64_t j = 0; j < w; ++j) dot += g.v[i * n + j] * y.v[i * n + j];
        for (int64_t j = 0; j < w; ++j)
          gx.v[i * n + j] += y.v[i * n + j] * (g.v[i * n + j] - dot);
      }
    };
  return id;
}

NodeId Tape::log_softmax_rows(NodeId x) {
  const Tensor& X = value(x);
  if (X.shape.size() != 2) throw NnError("log_softmax_rows: need 2-D");
  int64_t m = X.shape[0], n = X.shape[1];
  Tensor out(X.shape);
  for (int64_t i = 0; i < m; ++i) {
    const double* xr = &X.v[i * n];
    double mx = xr[0];
    for (int64_t j = 1; j < n; ++j) mx = std::max(mx, xr[j]);
    double s = 0;
    for (int64_t j = 0; j < n; ++j) s += std::exp(xr[j] - mx);
    double lse = mx + std::log(s);
    for (int64_t j = 0; j < n; ++j) out.v[i * n + j] = xr[j] - lse;
  }
  bool rg = needs(x);
  NodeId id = push(std::move(out), rg, nullptr);
  if (rg)
    node(id).back = [id, x, m, n](Tape& t) {
      const Tensor& g = t.node(id).grad;
      const Tensor& y = t.value(id);
      Tensor& gx = t.grad_buf(x);
      for (int64_t i = 0; i < m; ++i) {
        double gs = 0;
        for (int64_t j = 0; j < n; ++j) gs += g.v[i * n + j];
        for (int64_t j = 0; j < n; ++j)
          gx.v[i * n + j] += g.v[i * n + j] - std::exp(y.v[i * n + j]) * gs;
      }
    };
  return id;
}

NodeId Tape::pick(NodeId x, std::vector<int64_t> cols) {
  const Tensor& X = value(x);
  if (X.shape.size() != 2 ||
      static_cast<int64_t>(cols.size()) != X.shape[0])
    throw NnError("pick: need one column per row");
  int64_t n = X.shape[1];
  Tensor out({X.shape[0]});
  for (size_t i = 0; i < cols.size(); ++i) {
    if (cols[i] < 0 || cols[i] >= n) throw NnError("pick: column out of range");
    out.v[i] = X.v[static_cast<int64_t>(i) * n + cols[i]];
  }
  bool rg = needs(x);
  NodeId id = push(std::move(out), rg, nullptr);
  if (rg)
    node(id).back = [id, x, cols = std::move(cols), n](Tape& t) {
      const Tensor& g = t.node(id).grad;
      Tensor& gx = t.grad_buf(x);
      for (size_t i = 0; i < cols.size(); ++i)
        gx.v[static_cast<int64_t>(i) * n + cols[i]] += g.v[i];
    };
  return id;
}

NodeId Tape::layer_norm(NodeId x, NodeId gain, NodeId bias) {
  const Tensor& X = value(x);
  const Tensor& G = value(gain);
  const Tensor& B = value(bias);
  if (X.shape.size() != 2 || G.shape.size() != 1 || B.shape.size() != 1 ||
      G.shape[0] != X.shape[1] || B.shape[0] != X.shape[1])
    throw NnError("layer_norm: shape mismatch");
  int64_t m = X.shape[0], n = X.shape[1];
  constexpr double kEps = 1e-5;
  Tensor out(X.shape);
  Tensor xhat(X.shape);
  std::vector<double> inv_std(static_cast<size_t>(m));
  for (int64_t i = 0; i < m; ++i) {
    double mean = 0;
    for (int64_t j = 0; j < n; ++j) mean += X.v[i * n + j];
    mean /= static_cast<double>(n);
    double var = 0;
    for (int64_t j = 0; j < n; ++j) {
      double d = X.v[i * n + j] - mean;
      var += d * d;
    }
    var /= static_cast<double>(n);
    double is = 1.0 / std::sqrt(var + kEps);
    inv_std[static_cast<size_t>(i)] = is;
    for (int64_t j = 0; j < n; ++j) {
      double h = (X.v[i * n + j] - mean) * is;
      xhat.v[i * n + j] = h;
      out.v[i * n + j] = h * G.v[j] + B.v[j];
    }
  }
  bool rg = needs(x) || needs(gain) || needs(bias);
  NodeId id = push(std::move(out), rg, nullptr);
  if (rg)
    node(id).back = [id, x, gain, bias, m, n, xhat = std::move(xhat),
                     inv_std = std::move(inv_std)](Tape& t) {
      const Tensor& g = t.node(id).grad;
      const Tensor& G2 = t.value(gain);
      for (int64_t i = 0; i < m; ++i) {
        if (t.needs(gain)) {
          Tensor& gg = t.grad_buf(gain);
          for (int64_t j = 0; j < n; ++j)
            gg.v[j] += g.v[i * n + j] * xhat.v[i * n + j];
        }
        if (t.needs(bias)) {
          Tensor& gb = t.grad_buf(bias);
          for (int64_t j = 0; j < n; ++j) gb.v[j] += g.v[i * n + j];
        }
        if (t.needs(x)) {
          Tensor& gx = t.grad_buf(x);
          double sum_dh = 0, sum_dh_h = 0;
          std::vector<double> dh(static_cast<size_t>(n));
          for (int64_t j = 0; j < n; ++j) {
            dh[static_cast<size_t>(j)] = g.v[i * n + j] * G2.v[j];
            sum_dh += dh[static_cast<size_t>(j)];
            sum_dh_h += dh[static_cast<size_t>(j)] * xhat.v[i * n + j];
          }
          double is = inv_std[static_cast<size_t>(i)];
          double inv_n = 1.0 / static_cast<double>(n);
          for (int64_t j = 0; j < n; ++j)
            gx.v[i * n + j] +=
                is * (dh[static_cast<size_t>(j)] - inv_n * sum_dh -
                      xhat.v[i * n + j] * inv_n * sum_dh_h);
        }
      }
    };
  return id;
}

NodeId Tape::cross_entropy_rows(NodeId logits, std::vector<int64_t> targets,
                                std::vector<double> weights) {
  const Tensor& X = value(logits);
  if (X.shape.size() != 2 ||
      static_cast<int64_t>(targets.size()) != X.shape[0] ||
      weights.size() != targets.size())
    throw NnError("cross_entropy_rows: shape mismatch");
  int64_t m = X.shape[0], n = X.shape[1];
  double wsum = 0;
  for (double w : weights) wsum += w;
  if (wsum <= 0) throw NnError("cross_entropy_rows: zero total weight");
  Tensor probs(X.shape);
  double loss = 0;
  for (int64_t i = 0; i < m; ++i) {
    if (targets[static_cast<size_t>(i)] < 0 ||
        targets[static_cast<size_t>(i)] >= n)
      throw NnError("cross_entropy_rows: target out of range");
    softmax_row(&X.v[i * n], &probs.v[i * n], n);
    double p = probs.v[i * n + targets[static_cast<size_t>(i)]];
    loss -= weights[static_cast<size_t>(i)] * std::log(std::max(p, 1e-300));
  }
  loss /= wsum;
  bool rg = needs(logits);
  NodeId id = push(Tensor::scalar(loss), rg, nullptr);
  if (rg)
    node(id).back = [id, logits, targets = std::move(targets),
                     weights = std::move(weights), probs = std::move(probs),
                     wsum, m, n](Tape& t) {
      double gs = t.node(id).grad.v[0];
      Tensor& gx = t.grad_buf(logits);
      for (int64_t i = 0; i < m; ++i) {
        double w = weights[static_cast<size_t>(i)] / wsum;
        if (w == 0.0) continue;
        for (int64_t j = 0; j < n; ++j) {
          double d = probs.v[i * n + j];
          if (j == targets[static_cast<size_t>(i)]) d -= 1.0;
          gx.v[i * n + j] += gs * w * d;
        }
      }
    };
  return id;
}

NodeId Tape::sum_all(NodeId x) {
  const Tensor& X = value(x);
  double s = 0;
  for (double v : X.v) s += v;
  bool rg = needs(x);
  NodeId id = push(Tensor::scalar(s), rg, nullptr);
  if (rg)
    node(id).back = [id, x](Tape& t) {
      double g = t.node(id).grad.v[0];
      Tensor& gx = t.grad_buf(x);
      for (double& v : gx.v) v += g;
    };
  return id;
}

NodeId Tape::mean_all(NodeId x) {
  const Tensor& X = value(x);
  double n = static_cast<double>(X.numel());
  double s = 0;
  for (double v : X.v) s += v;
  bool rg = needs(x);
  NodeId id = push(Tensor::scalar(s / n), rg, nullptr);
  if (rg)
    node(id).back = [id, x, n](Tape& t) {
      double g = t.node(id).grad.v[0] / n;
      Tensor& gx = t.grad_buf(x);
      for (double& v : gx.v) v += g;
    };
  return id;
}

NodeId Tape::smooth_l1(NodeId a, NodeId b) {
  MR1_CHECK_SHAPE(a, b, "smooth_l1");
  const Tensor& A = value(a);
  const Tensor& B = value(b);
  Tensor out(A.shape);
  for (int64_t i = 0; i < A.numel(); ++i) {
    double d = A.v[i] - B.v[i];
    out.v[i] = std::abs(d) < 1.0 ? 0.5 * d * d : std::abs(d) - 0.5;
  }
  bool rg = needs(a) || needs(b);
  NodeId id = push(std::move(out), rg, nullptr);
  if (rg)
    node(id).back = [id, a, b](Tape& t) {
      const Tensor& g = t.node(id).grad;
      const Tensor& A2 = t.value(a);
      const Tensor& B2 = t.value(b);
      for (int64_t i = 0; i < g.numel(); ++i) {
        double d = A2.v[i] - B2.v[i];
        double dd = std::abs(d) < 1.0 ? d : (d > 0 ? 1.0 : -1.0);
        if (t.needs(a)) t.grad_buf(a).v[i] += g.v[i] * dd;
        if (t.needs(b)) t.grad_buf(b).v[i] -= g.v[i] * dd;
      }
    };
  return id;
}

NodeId Tape::diff_time(NodeId x) {
  const Tensor& X = value(x);
  if (X.shape.size() != 2 || X.shape[0] < 2)
    throw NnError("diff_time: need 2-D with at least 2 rows");
  int64_t m = X.shape[0], n = X.shape[1];
  Tensor out({m - 1, n});
  for (int64_t i = 0; i + 1 < m; ++i)
    for (int64_t j = 0; j < n; ++j)
      out.v[i * n + j] = X.v[(i + 1) * n + j] - X.v[i * n + j];
  bool rg = needs(x);
  NodeId id = push(std::move(out), rg, nullptr);
  if (rg)
    node(id).back = [id, x, m, n](Tape& t) {
      const Tensor& g = t.node(id).grad;
      Tensor& gx = t.grad_buf(x);
      for (int64_t i = 0; i + 1 < m; ++i)
        for (int64_t j = 0; j < n; ++j) {
          gx.v[(i + 1) * n + j] += g.v[i * n + j];
          gx.v[i * n + j] -= g.v[i * n + j];
        }
    };
  return id;
}

NodeId Tape::conv1d(NodeId x, NodeId w, NodeId b, int64_t k, int64_t stride,
                    int64_t pad) {
  const Tensor& X = value(x);
  const Tensor& W = value(w);
  const Tensor& B = value(b);
  if (X.shape.size() != 2 || W.shape.size() != 2 || B.shape.size() != 1)
    throw NnError("conv1d: bad ranks");
  int64_t T = X.shape[0], cin = X.shape[1], cout = W.shape[1];
  if (W.shape[0] != k * cin || B.shape[0] != cout)
    throw NnError("conv1d: weight shape mismatch");
  int64_t tout = (T + 2 * pad - k) / stride + 1;
  if (tout < 1) throw NnError("conv1d: input too short");
  Tensor out({tout, cout});
  for (int64_t o = 0; o < tout; ++o)
    for (int64_t j = 0; j < cout; ++j) {
      double s = B.v[j];
      for (int64_t kk = 0; kk < k; ++kk) {
        int64_t ti = o * stride - pad + kk;
        if (ti < 0 || ti >= T) continue;
        const double* xr = &X.v[ti * cin];
        for (int64_t c = 0; c < cin; ++c)
          s += xr[c] * W.v[(kk * cin + c) * cout + j];
      }
      out.v[o * cout + j] = s;
    }
  bool rg = needs(x) || needs(w) || needs(b);
  NodeId id = push(std::move(out), rg, nullptr);
  if (rg)
    node(id).back = [id, x, w, b, k, stride, pad, T, cin, cout,
                     tout](Tape& t) {
      const Tensor& g = t.node(id).grad;
      const Tensor& X2 = t.value(x);
      const Tensor& W2 = t.value(w);
      for (int64_t o = 0; o < tout; ++o)
        for (int64_t j = 0; j < cout; ++j) {
          double gv = g.v[o * cout + j];
          if (gv == 0.0) continue;
          if (t.needs(b)) t.grad_buf(b).v[j] += gv;
          for (int64_t kk = 0; kk < k; ++kk) {
            int64_t ti = o * stride - pad + kk;
            if (ti < 0 || ti >= T) continue;
            for (int64_t c = 0; c < cin; ++c) {
              if (t.needs(w))
                t.grad_buf(w).v[(kk * cin + c) * cout + j] +=
                    gv * X2.v[ti * cin + c];
              if (t.needs(x))
                t.grad_buf(x).v[ti * cin + c] +=
                    gv * W2.v[(kk * cin + c) * cout + j];
            }
          }
        }
    };
  return id;
}

NodeId Tape::tconv1d(NodeId x, NodeId w, NodeId b, int64_t k, int64_t stride,
                     int64_t pad) {
  const Tensor& X = value(x);
  const Tensor& W = value(w);
  const Tensor& B = value(b);
  if (X.shape.size() != 2 || W.shape.size() != 2 || B.shape.size() != 1)
    throw NnError("tconv1d: bad ranks");
  int64_t T = X.shape[0], cin = X.shape[1], cout = W.shape[1];
  if (W.shape[0] != k * cin || B.shape[0] != cout)
    throw NnError("tconv1d: weight shape mismatch");
  int64_t tout = stride * (T - 1) + k - 2 * pad;
  if (tout < 1) throw NnError("tconv1d: output too short");
  Tensor out({tout, cout});
  for (int64_t o = 0; o < tout; ++o)
    for (int64_t j = 0; j < cout; ++j) out.v[o * cout + j] = B.v[j];
  for (int64_t ti = 0; ti < T; ++ti)
    for (int64_t kk = 0; kk < k; ++kk) {
      int64_t o = ti * stride - pad + kk;
      if (o < 0 || o >= tout) continue;
      const double* xr = &X.v[ti * cin];
      for (int64_t c = 0; c < cin; ++c) {
        double xv = xr[c];
        if (xv == 0.0) continue;
        for (int64_t j = 0; j < cout; ++j)
          out.v[o * cout + j] += xv * W.v[(kk * cin + c) * cout + j];
      }
    }
  bool rg = needs(x) || needs(w) || needs(b);
  NodeId id = push(std::move(out), rg, nullptr);
  if (rg)
    node(id).back = [id, x, w, b, k, stride, pad, T, cin, cout,
                     tout](Tape& t) {
      const Tensor& g = t.node(id).grad;
      const Tensor& X2 = t.value(x);
      const Tensor& W2 = t.value(w);
      if (t.needs(b)) {
        Tensor& gb = t.grad_buf(b);
        for (int64_t o = 0; o < tout; ++o)
          for (int64_t j = 0; j < cout; ++j) gb.v[j] += g.v[o * cout + j];
      }
      for (int64_t ti = 0; ti < T; ++ti)
        for (int64_t kk = 0; kk < k; ++kk) {
          int64_t o = ti * stride - pad + kk;
          if (o < 0 || o >= tout) continue;
          for (int64_t c = 0; c < cin; ++c) {
            for (int64_t j = 0; j < cout; ++j) {
              double gv = g.v[o * cout + j];
              if (gv == 0.0) continue;
              if (t.needs(w))
                t.grad_buf(w).v[(kk * cin + c) * cout + j] +=
                    gv * X2.v[ti * cin + c];
              if (t.needs(x))
                t.grad_buf(x).v[ti * cin + c] +=
                    gv * W2.v[(kk * cin + c) * cout + j];
            }
          }
        }
    };
  return id;
}

NodeId Tape::straight_through(NodeId z, Tensor q) {
  if (!value(z).same_shape(q))
    throw NnError("straight_through: shape mismatch");
  if (!q.all_finite()) throw NnError("straight_through: non-finite values");
  bool rg = needs(z);
  NodeId id = push(std::move(q), rg, nullptr);
  if (rg)
    node(id).back = [id, z](Tape& t) {
      const Tensor& g = t.node(id).grad;
      Tensor& gz = t.grad_buf(z);
      for (int64_t i = 0; i < g.numel(); ++i) gz.v[i] += g.v[i];
    };
  return id;
}

GradMap Tape::backward(NodeId out, const Tensor* seed) {
  if (nodes_.empty()) throw NnError("backward: empty tape");
  Node& o = node(out);
  if (seed) {
    if (!seed->same_shape(o.value))
      throw NnError("backward: seed shape mismatch");
    o.grad = *seed;
  } else {
    o.grad = Tensor::full(o.value.shape, 1.0);
  }
  for (int64_t i = static_cast<int64_t>(nodes_.size()) - 1; i >= 0; --i) {
    Node& n = nodes_[static_cast<size_t>(i)];
    if (n.back && !n.grad.v.empty()) n.back(*this);
  }
  ran_backward_ = true;
  GradMap grads;
  if (params_)
    for (auto& [name, t] : params_->values) grads[name] = Tensor(t.shape);
  for (Node& n : nodes_) {
    if (n.pname.empty() || n.grad.v.empty()) continue;
    Tensor& g = grads[n.pname];
    if (g.v.empty()) g = Tensor(n.value.shape);
    for (int64_t i = 0; i < g.numel(); ++i) g.v[i] += n.grad.v[i];
  }
  return grads;
}

GradCheckReport grad_check(ParameterSet& params,
                           const std::function<NodeId(Tape&)>& build,
                           double tolerance, double h) {
  Tape tape(&params);
  NodeId out = build(tape);
  if (tape.val(out).numel() != 1)
    throw NnError("grad_check: output must be scalar");
  GradMap analytic = tape.backward(out);

  GradCheckReport report;
  auto eval = [&]() {
    Tape t2(&params);
    return t2.val(build(t2)).v[0];
  };
  for (auto& [name, p] : params.values) {
    GradCheckEntry e;
    e.name = name;
    const Tensor& g = analytic.at(name);
    for (int64_t i = 0; i < p.numel(); ++i) {
      double orig = p.v[i];
      p.v[i] = orig + h;
      double fp = eval();
      p.v[i] = orig - h;
      double fm = eval();
      p.v[i] = orig;
      double fd = (fp - fm) / (2 * h);
      double denom = std::max({std::abs(fd), std::abs(g.v[i]), 1e-8});
      double rel = std::abs(fd - g.v[i]) / denom;
      e.max_rel_err = std::max(e.max_rel_err, rel);
    }
    e.ok = e.max_rel_err < tolerance;
    report.max_rel_err = std::max(report.max_rel_err, e.max_rel_err);
    report.ok = report.ok && e.ok;
    report.entries.push_back(std::move(e));
  }
  return report;
}

}  // namespace mr1::nn
