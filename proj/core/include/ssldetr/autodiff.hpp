#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <string>
#include <vector>

#include "ssldetr/tensor.hpp"

namespace ssldetr {

// Named trainable tensor. Gradients accumulate across backward passes until
// the optimizer consumes and zeroes them.
struct Parameter {
  std::string name;
  Tensor value;
  Tensor grad;

  explicit Parameter(std::string n, Tensor v)
      : name(std::move(n)), value(std::move(v)), grad(Tensor::zeros(value.shape())) {}

  void zero_grad() { grad.fill(0.0); }
};

namespace ad {

class Tape;

// Handle into a tape; cheap to copy.
struct Var {
  int32_t id = -1;
  Tape* tape = nullptr;

  bool valid() const { return tape != nullptr && id >= 0; }
  const Tensor& value() const;
};

// Reverse-mode automatic differentiation over a dynamically built graph.
// Nodes only reference earlier nodes, so creation order is a topological
// order and backward() is a single reverse sweep. Single-threaded by design;
// results are bit-stable for a fixed graph.
class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var leaf(Tensor value, bool requires_grad = false);
  Var param(Parameter& p);  // memoized: one node per parameter per tape

  const Tensor& value(Var v) const;
  Tensor grad(Var v) const;  // valid after backward(); zeros if untouched

  // Seeds d(root)/d(root) = 1 and accumulates gradients into every
  // requires-grad leaf and into Parameter::grad for parameter nodes.
  void backward(Var root);

  const std::vector<Parameter*>& touched_params() const { return touched_; }
  size_t size() const { return nodes_.size(); }

  // ---- elementwise ----
  Var add(Var a, Var b);
  Var sub(Var a, Var b);
  Var mul(Var a, Var b);
  Var div(Var a, Var b);
  Var scale(Var a, double c);
  Var add_scalar(Var a, double c);
  Var neg(Var a) { return scale(a, -1.0); }
  Var abs(Var a);
  Var gelu(Var a);
  Var sigmoid(Var a);
  Var relu(Var a);
  Var min_const(Var a, Tensor c);  // elementwise min(a, c)
  Var max_const(Var a, Tensor c);
  Var mul_const(Var a, Tensor c);

  // ---- linear algebra (2-D) ----
  Var matmul(Var a, Var b);
  Var transpose(Var a);
  Var add_row_broadcast(Var a, Var row);  // a[m,n] + row[n]

  // ---- shape & indexing ----
  Var reshape(Var a, std::vector<int64_t> shape);
  Var slice_cols(Var a, int64_t start, int64_t count);
  Var slice_rows(Var a, int64_t start, int64_t count);
  Var concat_cols(const std::vector<Var>& parts);
  Var gather_rows(Var a, std::vector<int64_t> rows);
  // out[i] = a.flat[index_map[i]]; index_map need not be a bijection.
  Var permute_gather(Var a, std::vector<int64_t> index_map, std::vector<int64_t> out_shape);

  // ---- reductions & normalization ----
  Var sum(Var a);
  Var mean(Var a);
  Var softmax_rows(Var a);
  Var layer_norm_rows(Var x, Var gamma, Var beta, double eps = 1e-5);

  // ---- composite losses (fused forward/backward) ----
  // Weighted mean cross entropy over rows of logits [n, k]:
  //   loss = sum_i u_i * nll_i / sum_i u_i,  u_i = row_weight_i * class_weight[t_i]
  // Empty weight vectors mean all ones; total weight 0 yields loss 0.
  Var cross_entropy_rows(Var logits, const std::vector<int64_t>& targets,
                         const std::vector<double>& class_weight = {},
                         const std::vector<double>& row_weight = {});
  // sum(|pred - target| * mask) / sum(mask); sum(mask) == 0 yields 0.
  Var masked_l1(Var pred, Tensor target, Tensor mask);

  // ---- convolution (CHW single image) ----
  Var conv2d(Var x, Var weight, Var bias, int64_t stride, int64_t padding);
  Var avg_pool(Var x, int64_t k);  // kernel k, stride k, no padding

 private:
  struct Node {
    Tensor value;
    Tensor grad;
    bool requires_grad = false;
    std::function<void(Tape&, const Tensor&)> backward_fn;
    Parameter* parameter = nullptr;
  };

  Var make(Tensor value, bool requires_grad, std::function<void(Tape&, const Tensor&)> fn);
  void accumulate(int32_t id, const Tensor& g);
  bool rg(Var v) const { return nodes_[static_cast<size_t>(v.id)].requires_grad; }
  const Tensor& val(Var v) const { return nodes_[static_cast<size_t>(v.id)].value; }
  void check_tape(Var v) const;

  std::vector<Node> nodes_;
  std::map<Parameter*, int32_t> param_nodes_;
  std::vector<Parameter*> touched_;
};

}  // namespace ad
}  // namespace ssldetr
