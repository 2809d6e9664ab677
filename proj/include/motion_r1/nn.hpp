#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include "motion_r1/rng.hpp"

namespace mr1::nn {

struct NnError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Dense row-major 64-bit float array, 1-D or 2-D in practice.
struct Tensor {
  std::vector<int64_t> shape;
  std::vector<double> v;

  Tensor() = default;
  explicit Tensor(std::vector<int64_t> s);

  static Tensor scalar(double x);
  static Tensor vec(std::vector<double> x);
  static Tensor zeros(std::vector<int64_t> s) { return Tensor(std::move(s)); }
  static Tensor full(std::vector<int64_t> s, double x);
  static Tensor randn(Rng& rng, std::vector<int64_t> s, double stddev);

  int64_t numel() const { return static_cast<int64_t>(v.size()); }
  int64_t rows() const { return shape.empty() ? 1 : shape[0]; }
  int64_t cols() const;
  double& at(int64_t i, int64_t j) { return v[i * cols() + j]; }
  double at(int64_t i, int64_t j) const { return v[i * cols() + j]; }
  bool same_shape(const Tensor& o) const { return shape == o.shape; }
  bool all_finite() const;
  std::string shape_str() const;
};

struct AdamState {
  Tensor m;
  Tensor v;
};

// Named trainable parameters plus their Adam moments.
struct ParameterSet {
  std::map<std::string, Tensor> values;
  std::map<std::string, AdamState> opt;
  int64_t step = 0;

  Tensor& add(const std::string& name, Tensor init);
  Tensor& at(const std::string& name);
  const Tensor& at(const std::string& name) const;
  bool has(const std::string& name) const { return values.count(name) != 0; }
  int64_t param_count() const;
};

using GradMap = std::map<std::string, Tensor>;

void adam_step(ParameterSet& ps, const GradMap& grads, double lr,
               double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8);

// lr_min + 0.5*(lr_max-lr_min)*(1+cos(pi*step/total)); steps past the end
// clamp to lr_min.
double cosine_lr(int64_t step, int64_t total_steps, double lr_max,
                 double lr_min);

using NodeId = int32_t;

// Eagerly evaluated reverse-mode tape. Each primitive computes its value on
// record and stores a backward closure; backward() walks the records in
// reverse and accumulates parameter gradients by name.
class Tape {
 public:
  explicit Tape(ParameterSet* params = nullptr) : params_(params) {}

  NodeId constant(Tensor t);
  NodeId input(Tensor t);  // like constant but receives a gradient
  NodeId param(const std::string& name);

  const Tensor& val(NodeId id) const { return node(id).value; }
  const Tensor& grad(NodeId id) const;  // valid after backward()

  NodeId add(NodeId a, NodeId b);
  NodeId sub(NodeId a, NodeId b);
  NodeId mul(NodeId a, NodeId b);
  NodeId scale(NodeId a, double c);
  NodeId add_scalar(NodeId a, double c);
  NodeId exp_(NodeId a);
  NodeId relu(NodeId a);
  NodeId tanh_(NodeId a);
  NodeId clamp(NodeId a, double lo, double hi);
  NodeId minimum(NodeId a, NodeId b);  // elementwise; ties route grad to a

  NodeId matmul(NodeId a, NodeId b);     // A(m,k) * B(k,n)
  NodeId matmul_nt(NodeId a, NodeId b);  // A(m,k) * B(n,k)^T
  NodeId add_rowvec(NodeId x, NodeId b);

  NodeId rows(NodeId table, std::vector<int64_t> ids);  // embedding gather
  NodeId slice_cols(NodeId x, int64_t c0, int64_t c1);
  NodeId concat_cols(const std::vector<NodeId>& xs);

  NodeId softmax_rows(NodeId x);
  NodeId causal_softmax(NodeId scores);  // square matrix, row i attends <= i
  NodeId log_softmax_rows(NodeId x);
  NodeId pick(NodeId x, std::vector<int64_t> cols);  // one entry per row
  NodeId layer_norm(NodeId x, NodeId gain, NodeId bias);

  // Mean over rows with weight w_i of -log softmax(x_i)[target_i].
  NodeId cross_entropy_rows(NodeId logits, std::vector<int64_t> targets,
                            std::vector<double> weights);

  NodeId sum_all(NodeId x);
  NodeId mean_all(NodeId x);
  // Elementwise smooth-L1 (0.5 d^2 for |d|<1, |d|-0.5 beyond).
  NodeId smooth_l1(NodeId a, NodeId b);
  NodeId diff_time(NodeId x);  // first differences along rows; needs T >= 2

  // 1-D convolution over time. x is T x Cin, w is (k*Cin) x Cout laid out
  // [tap][cin] by row, b is Cout. Output floor((T+2p-k)/s)+1 x Cout.
  NodeId conv1d(NodeId x, NodeId w, NodeId b, int64_t k, int64_t stride,
                int64_t pad);
  // Adjoint convolution (upsampling). Output s*(T-1)+k-2p x Cout.
  NodeId tconv1d(NodeId x, NodeId w, NodeId b, int64_t k, int64_t stride,
                 int64_t pad);

  // Value of q, gradient copied through to z unchanged.
  NodeId straight_through(NodeId z, Tensor q);

  // Seeds the output gradient (ones if seed null) and accumulates parameter
  // gradients. Every parameter in the bound set appears in the result;
  // unreached ones map to zeros.
  GradMap backward(NodeId out, const Tensor* seed = nullptr);

  int64_t size() const { return static_cast<int64_t>(nodes_.size()); }

 private:
  struct Node {
    Tensor value;
    Tensor grad;
    bool requires_grad = false;
    std::string pname;  // non-empty for parameter leaves
    std::function<void(Tape&)> back;
  };

  Node& node(NodeId id) { return nodes_[static_cast<size_t>(id)]; }
  const Tensor& value(NodeId id) const {
    return nodes_[static_cast<size_t>(id)].value;
  }
  const Node& node(NodeId id) const { return nodes_[static_cast<size_t>(id)]; }
  NodeId push(Tensor value, bool requires_grad,
              std::function<void(Tape&)> back);
  Tensor& grad_buf(NodeId id);
  bool needs(NodeId id) const { return node(id).requires_grad; }

  ParameterSet* params_ = nullptr;
  std::vector<Node> nodes_;
  bool ran_backward_ = false;
};

struct GradCheckEntry {
  std::string name;
  double max_rel_err = 0.0;
  bool ok = true;
};

struct GradCheckReport {
  std::vector<GradCheckEntry> entries;
  double max_rel_err = 0.0;
  bool ok = true;
};

// Central finite differences of a scalar-valued rebuild function against the
// analytic gradients it produces. `build` must construct a fresh tape from the
// current parameter values and return the scalar output node.
GradCheckReport grad_check(
    ParameterSet& params,
    const std::function<NodeId(Tape&)>& build, double tolerance,
    double h = 1e-5);

}  // namespace mr1::nn
