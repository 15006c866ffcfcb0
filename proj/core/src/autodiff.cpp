#include "ssldetr/autodiff.hpp"

#include <Eigen/Core>
#include <cmath>

#include "ssldetr/errors.hpp"

namespace ssldetr {
namespace ad {

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapMat = Eigen::Map<RowMat>;
using MapConstMat = Eigen::Map<const RowMat>;

MapConstMat as_mat(const Tensor& t) {
  return MapConstMat(t.data(), t.dim(0), t.dim(1));
}

MapMat as_mat(Tensor& t) {
  return MapMat(t.data(), t.dim(0), t.dim(1));
}

void require_2d(const Tensor& t, const char* op) {
  if (t.rank() != 2) {
    throw ShapeError(std::string(op) + ": expected 2-D tensor, got " + t.shape_str());
  }
}

double gelu_phi(double x) { return 0.5 * (1.0 + std::erf(x * M_SQRT1_2)); }
double gelu_pdf(double x) { return std::exp(-0.5 * x * x) * 0.3989422804014327; }

}  // namespace

const Tensor& Var::value() const { return tape->value(*this); }

void Tape::check_tape(Var v) const {
  if (!v.valid() || v.tape != this || static_cast<size_t>(v.id) >= nodes_.size()) {
    throw ContractError("Var does not belong to this tape");
  }
}

Var Tape::make(Tensor value, bool requires_grad, std::function<void(Tape&, const Tensor&)> fn) {
  Node node;
  node.value = std::move(value);
  node.requires_grad = requires_grad;
  if (requires_grad) {
    node.backward_fn = std::move(fn);
  }
  nodes_.push_back(std::move(node));
  return Var{static_cast<int32_t>(nodes_.size() - 1), this};
}

Var Tape::leaf(Tensor value, bool requires_grad) {
  return make(std::move(value), requires_grad, nullptr);
}

Var Tape::param(Parameter& p) {
  auto it = param_nodes_.find(&p);
  if (it != param_nodes_.end()) {
    return Var{it->second, this};
  }
  Var v = make(p.value, true, nullptr);
  nodes_[static_cast<size_t>(v.id)].parameter = &p;
  param_nodes_.emplace(&p, v.id);
  touched_.push_back(&p);
  return v;
}

const Tensor& Tape::value(Var v) const {
  check_tape(v);
  return nodes_[static_cast<size_t>(v.id)].value;
}

Tensor Tape::grad(Var v) const {
  check_tape(v);
  const Node& n = nodes_[static_cast<size_t>(v.id)];
  if (n.grad.numel() != n.value.numel()) {
    return Tensor::zeros(n.value.shape());
  }
  return n.grad;
}

void Tape::accumulate(int32_t id, const Tensor& g) {
  Node& n = nodes_[static_cast<size_t>(id)];
  if (!n.requires_grad) {
    return;
  }
  if (n.grad.numel() != n.value.numel()) {
    n.grad = Tensor::zeros(n.value.shape());
  }
  n.grad.add_(g);
}

void Tape::backward(Var root) {
  check_tape(root);
  if (value(root).numel() != 1) {
    throw ShapeError("backward: root must be scalar, got " + value(root).shape_str());
  }
  Node& r = nodes_[static_cast<size_t>(root.id)];
  if (!r.requires_grad) {
    return;
  }
  for (Node& n : nodes_) {
    n.grad = Tensor();
  }
  r.grad = Tensor::full(r.value.shape(), 1.0);
  for (int32_t i = root.id; i >= 0; --i) {
    Node& n = nodes_[static_cast<size_t>(i)];
    if (!n.requires_grad || n.grad.numel() != n.value.numel()) {
      continue;
    }
    if (n.backward_fn) {
      n.backward_fn(*this, n.grad);
    }
    if (n.parameter != nullptr) {
      n.parameter->grad.add_(n.grad);
    }
  }
}

// ---------------------------------------------------------------------------
// elementwise
// ---------------------------------------------------------------------------

Var Tape::add(Var a, Var b) {
  check_tape(a);
  check_tape(b);
  if (!val(a).same_shape(val(b))) {
    throw ShapeError("add: " + val(a).shape_str() + " vs " + val(b).shape_str());
  }
  Tensor out = val(a);
  out.add_(val(b));
  const int32_t ia = a.id, ib = b.id;
  return make(std::move(out), rg(a) || rg(b), [ia, ib](Tape& t, const Tensor& g) {
    t.accumulate(ia, g);
    t.accumulate(ib, g);
  });
}

Var Tape::sub(Var a, Var b) { return add(a, scale(b, -1.0)); }

Var Tape::mul(Var a, Var b) {
  check_tape(a);
  check_tape(b);
  if (!val(a).same_shape(val(b))) {
    throw ShapeError("mul: " + val(a).shape_str() + " vs " + val(b).shape_str());
  }
  Tensor out = val(a);
  for (int64_t i = 0; i < out.numel(); ++i) {
    out[i] *= val(b)[i];
  }
  const int32_t ia = a.id, ib = b.id;
  return make(std::move(out), rg(a) || rg(b), [ia, ib](Tape& t, const Tensor& g) {
    const Tensor& va = t.nodes_[static_cast<size_t>(ia)].value;
    const Tensor& vb = t.nodes_[static_cast<size_t>(ib)].value;
    Tensor ga = g, gb = g;
    for (int64_t i = 0; i < g.numel(); ++i) {
      ga[i] *= vb[i];
      gb[i] *= va[i];
    }
    t.accumulate(ia, ga);
    t.accumulate(ib, gb);
  });
}

Var Tape::div(Var a, Var b) {
  check_tape(a);
  check_tape(b);
  if (!val(a).same_shape(val(b))) {
    throw ShapeError("div: " + val(a).shape_str() + " vs " + val(b).shape_str());
  }
  Tensor out = val(a);
  for (int64_t i = 0; i < out.numel(); ++i) {
    out[i] /= val(b)[i];
  }
  const int32_t ia = a.id, ib = b.id;
  return make(std::move(out), rg(a) || rg(b), [ia, ib](Tape& t, const Tensor& g) {
    const Tensor& va = t.nodes_[static_cast<size_t>(ia)].value;
    const Tensor& vb = t.nodes_[static_cast<size_t>(ib)].value;
    Tensor ga = g, gb = g;
    for (int64_t i = 0; i < g.numel(); ++i) {
      ga[i] /= vb[i];
      gb[i] *= -va[i] / (vb[i] * vb[i]);
    }
    t.accumulate(ia, ga);
    t.accumulate(ib, gb);
  });
}

Var Tape::scale(Var a, double c) {
  check_tape(a);
  Tensor out = val(a);
  out.scale_(c);
  const int32_t ia = a.id;
  return make(std::move(out), rg(a), [ia, c](Tape& t, const Tensor& g) {
    Tensor ga = g;
    ga.scale_(c);
    t.accumulate(ia, ga);
  });
}

Var Tape::add_scalar(Var a, double c) {
  check_tape(a);
  Tensor out = val(a);
  for (int64_t i = 0; i < out.numel(); ++i) {
    out[i] += c;
  }
  const int32_t ia = a.id;
  return make(std::move(out), rg(a),
              [ia](Tape& t, const Tensor& g) { t.accumulate(ia, g); });
}

Var Tape::abs(Var a) {
  check_tape(a);
  Tensor out = val(a);
  for (int64_t i = 0; i < out.numel(); ++i) {
    out[i] = std::fabs(out[i]);
  }
  const int32_t ia = a.id;
  return make(std::move(out), rg(a), [ia](Tape& t, const Tensor& g) {
    const Tensor& va = t.nodes_[static_cast<size_t>(ia)].value;
    Tensor ga = g;
    for (int64_t i = 0; i < g.numel(); ++i) {
      ga[i] *= (va[i] > 0.0) ? 1.0 : (va[i] < 0.0 ? -1.0 : 0.0);
    }
    t.accumulate(ia, ga);
  });
}

Var Tape::gelu(Var a) {
  check_tape(a);
  Tensor out = val(a);
  for (int64_t i = 0; i < out.numel(); ++i) {
    out[i] = out[i] * gelu_phi(out[i]);
  }
  const int32_t ia = a.id;
  return make(std::move(out), rg(a), [ia](Tape& t, const Tensor& g) {
    const Tensor& va = t.nodes_[static_cast<size_t>(ia)].value;
    Tensor ga = g;
    for (int64_t i = 0; i < g.numel(); ++i) {
      const double x = va[i];
      ga[i] *= gelu_phi(x) + x * gelu_pdf(x);
    }
    t.accumulate(ia, ga);
  });
}

Var Tape::sigmoid(Var a) {
  check_tape(a);
  Tensor out = val(a);
  for (int64_t i = 0; i < out.numel(); ++i) {
    out[i] = 1.0 / (1.0 + std::exp(-out[i]));
  }
  const int32_t ia = a.id, io = static_cast<int32_t>(nodes_.size());
  return make(std::move(out), rg(a), [ia, io](Tape& t, const Tensor& g) {
    const Tensor& y = t.nodes_[static_cast<size_t>(io)].value;
    Tensor ga = g;
    for (int64_t i = 0; i < g.numel(); ++i) {
      ga[i] *= y[i] * (1.0 - y[i]);
    }
    t.accumulate(ia, ga);
  });
}

Var Tape::relu(Var a) {
  check_tape(a);
  Tensor out = val(a);
  for (int64_t i = 0; i < out.numel(); ++i) {
    out[i] = std::max(0.0, out[i]);
  }
  const int32_t ia = a.id;
  return make(std::move(out), rg(a), [ia](Tape& t, const Tensor& g) {
    const Tensor& va = t.nodes_[static_cast<size_t>(ia)].value;
    Tensor ga = g;
    for (int64_t i = 0; i < g.numel(); ++i) {
      ga[i] *= va[i] > 0.0 ? 1.0 : 0.0;
    }
    t.accumulate(ia, ga);
  });
}

Var Tape::min_const(Var a, Tensor c) {
  check_tape(a);
  if (!val(a).same_shape(c)) {
    throw ShapeError("min_const: " + val(a).shape_str() + " vs " + c.shape_str());
  }
  Tensor out = val(a);
  for (int64_t i = 0; i < out.numel(); ++i) {
    out[i] = std::min(out[i], c[i]);
  }
  const int32_t ia = a.id;
  return make(std::move(out), rg(a), [ia, c = std::move(c)](Tape& t, const Tensor& g) {
    const Tensor& va = t.nodes_[static_cast<size_t>(ia)].value;
    Tensor ga = g;
    for (int64_t i = 0; i < g.numel(); ++i) {
      ga[i] *= va[i] <= c[i] ? 1.0 : 0.0;
    }
    t.accumulate(ia, ga);
  });
}

Var Tape::max_const(Var a, Tensor c) {
  check_tape(a);
  if (!val(a).same_shape(c)) {
    throw ShapeError("max_const: " + val(a).shape_str() + " vs " + c.shape_str());
  }
  Tensor out = val(a);
  for (int64_t i = 0; i < out.numel(); ++i) {
    out[i] = std::max(out[i], c[i]);
  }
  const int32_t ia = a.id;
  return make(std::move(out), rg(a), [ia, c = std::move(c)](Tape& t, const Tensor& g) {
    const Tensor& va = t.nodes_[static_cast<size_t>(ia)].value;
    Tensor ga = g;
    for (int64_t i = 0; i < g.numel(); ++i) {
      ga[i] *= va[i] >= c[i] ? 1.0 : 0.0;
    }
    t.accumulate(ia, ga);
  });
}

Var Tape::mul_const(Var a, Tensor c) {
  check_tape(a);
  if (!val(a).same_shape(c)) {
    throw ShapeError("mul_const: " + val(a).shape_str() + " vs " + c.shape_str());
  }
  Tensor out = val(a);
  for (int64_t i = 0; i < out.numel(); ++i) {
    out[i] *= c[i];
  }
  const int32_t ia = a.id;
  return make(std::move(out), rg(a), [ia, c = std::move(c)](Tape& t, const Tensor& g) {
    Tensor ga = g;
    for (int64_t i = 0; i < g.numel(); ++i) {
      ga[i] *= c[i];
    }
    t.accumulate(ia, ga);
  });
}

// ---------------------------------------------------------------------------
// linear algebra
// ---------------------------------------------------------------------------

Var Tape::matmul(Var a, Var b) {
  check_tape(a);
  check_tape(b);
  require_2d(val(a), "matmul");
  require_2d(val(b), "matmul");
  if (val(a).dim(1) != val(b).dim(0)) {
    throw ShapeError("matmul: " + val(a).shape_str() + " x " + val(b).shape_str());
  }
  Tensor out({val(a).dim(0), val(b).dim(1)});
  as_mat(out).noalias() = as_mat(val(a)) * as_mat(val(b));
  const int32_t ia = a.id, ib = b.id;
  return make(std::move(out), rg(a) || rg(b), [ia, ib](Tape& t, const Tensor& g) {
    const Tensor& va = t.nodes_[static_cast<size_t>(ia)].value;
    const Tensor& vb = t.nodes_[static_cast<size_t>(ib)].value;
    if (t.nodes_[static_cast<size_t>(ia)].requires_grad) {
      Tensor ga({va.dim(0), va.dim(1)});
      as_mat(ga).noalias() = as_mat(g) * as_mat(vb).transpose();
      t.accumulate(ia, ga);
    }
    if (t.nodes_[static_cast<size_t>(ib)].requires_grad) {
      Tensor gb({vb.dim(0), vb.dim(1)});
      as_mat(gb).noalias() = as_mat(va).transpose() * as_mat(g);
      t.accumulate(ib, gb);
    }
  });
}

Var Tape::transpose(Var a) {
  check_tape(a);
  require_2d(val(a), "transpose");
  const int64_t m = val(a).dim(0), n = val(a).dim(1);
  Tensor out({n, m});
  as_mat(out) = as_mat(val(a)).transpose();
  const int32_t ia = a.id;
  return make(std::move(out), rg(a), [ia, m, n](Tape& t, const Tensor& g) {
    Tensor ga({m, n});
    as_mat(ga) = as_mat(g).transpose();
    t.accumulate(ia, ga);
  });
}

Var Tape::add_row_broadcast(Var a, Var row) {
  check_tape(a);
  check_tape(row);
  require_2d(val(a), "add_row_broadcast");
  if (val(row).rank() != 1 || val(row).dim(0) != val(a).dim(1)) {
    throw ShapeError("add_row_broadcast: " + val(a).shape_str() + " + " + val(row).shape_str());
  }
  const int64_t m = val(a).dim(0), n = val(a).dim(1);
  Tensor out = val(a);
  for (int64_t i = 0; i < m; ++i) {
    for (int64_t j = 0; j < n; ++j) {
      out.at(i, j) += val(row)[j];
    }
  }
  const int32_t ia = a.id, ir = row.id;
  return make(std::move(out), rg(a) || rg(row), [ia, ir, m, n](Tape& t, const Tensor& g) {
    t.accumulate(ia, g);
    Tensor gr({n});
    for (int64_t i = 0; i < m; ++i) {
      for (int64_t j = 0; j < n; ++j) {
        gr[j] += g.at(i, j);
      }
    }
    t.accumulate(ir, gr);
  });
}

// ---------------------------------------------------------------------------
// shape & indexing
// ---------------------------------------------------------------------------

Var Tape::reshape(Var a, std::vector<int64_t> shape) {
  check_tape(a);
  Tensor out = val(a).reshaped(shape);
  const int32_t ia = a.id;
  std::vector<int64_t> old_shape = val(a).shape();
  return make(std::move(out), rg(a), [ia, old_shape](Tape& t, const Tensor& g) {
    t.accumulate(ia, g.reshaped(old_shape));
  });
}

Var Tape::slice_cols(Var a, int64_t start, int64_t count) {
  check_tape(a);
  require_2d(val(a), "slice_cols");
  const int64_t m = val(a).dim(0), n = val(a).dim(1);
  if (start < 0 || count < 0 || start + count > n) {
    throw ShapeError("slice_cols out of range");
  }
  Tensor out({m, count});
  for (int64_t i = 0; i < m; ++i) {
    for (int64_t j = 0; j < count; ++j) {
      out.at(i, j) = val(a).at(i, start + j);
    }
  }
  const int32_t ia = a.id;
  return make(std::move(out), rg(a), [ia, start, count, m, n](Tape& t, const Tensor& g) {
    Tensor ga({m, n});
    for (int64_t i = 0; i < m; ++i) {
      for (int64_t j = 0; j < count; ++j) {
        ga.at(i, start + j) = g.at(i, j);
      }
    }
    t.accumulate(ia, ga);
  });
}

Var Tape::slice_rows(Var a, int64_t start, int64_t count) {
  check_tape(a);
  require_2d(val(a), "slice_rows");
  const int64_t m = val(a).dim(0), n = val(a).dim(1);
  if (start < 0 || count < 0 || start + count > m) {
    throw ShapeError("slice_rows out of range");
  }
  Tensor out({count, n});
  std::copy(val(a).data() + start * n, val(a).data() + (start + count) * n, out.data());
  const int32_t ia = a.id;
  return make(std::move(out), rg(a), [ia, start, count, m, n](Tape& t, const Tensor& g) {
    Tensor ga({m, n});
    std::copy(g.data(), g.data() + count * n, ga.data() + start * n);
    t.accumulate(ia, ga);
  });
}

Var Tape::concat_cols(const std::vector<Var>& parts) {
  if (parts.empty()) {
    throw ShapeError("concat_cols: no parts");
  }
  int64_t m = -1, n = 0;
  bool any_rg = false;
  for (Var p : parts) {
    check_tape(p);
    require_2d(val(p), "concat_cols");
    if (m < 0) {
      m = val(p).dim(0);
    } else if (val(p).dim(0) != m) {
      throw ShapeError("concat_cols: row count mismatch");
    }
    n += val(p).dim(1);
    any_rg = any_rg || rg(p);
  }
  Tensor out({m, n});
  std::vector<int32_t> ids;
  std::vector<int64_t> widths;
  int64_t off = 0;
  for (Var p : parts) {
    const int64_t w = val(p).dim(1);
    for (int64_t i = 0; i < m; ++i) {
      for (int64_t j = 0; j < w; ++j) {
        out.at(i, off + j) = val(p).at(i, j);
      }
    }
    ids.push_back(p.id);
    widths.push_back(w);
    off += w;
  }
  return make(std::move(out), any_rg, [ids, widths, m](Tape& t, const Tensor& g) {
    int64_t off = 0;
    for (size_t k = 0; k < ids.size(); ++k) {
      Tensor gp({m, widths[k]});
      for (int64_t i = 0; i < m; ++i) {
        for (int64_t j = 0; j < widths[k]; ++j) {
          gp.at(i, j) = g.at(i, off + j);
        }
      }
      t.accumulate(ids[k], gp);
      off += widths[k];
    }
  });
}

Var Tape::gather_rows(Var a, std::vector<int64_t> rows) {
  check_tape(a);
  require_2d(val(a), "gather_rows");
  const int64_t m = val(a).dim(0), n = val(a).dim(1);
  Tensor out({static_cast<int64_t>(rows.size()), n});
  for (size_t i = 0; i < rows.size(); ++i) {
    if (rows[i] < 0 || rows[i] >= m) {
      throw ShapeError("gather_rows: index out of range");
    }
    std::copy(val(a).data() + rows[i] * n, val(a).data() + (rows[i] + 1) * n,
              out.data() + static_cast<int64_t>(i) * n);
  }
  const int32_t ia = a.id;
  return make(std::move(out), rg(a), [ia, rows = std::move(rows), m, n](Tape& t, const Tensor& g) {
    Tensor ga({m, n});
    for (size_t i = 0; i < rows.size(); ++i) {
      for (int64_t j = 0; j < n; ++j) {
        ga.at(rows[i], j) += g.at(static_cast<int64_t>(i), j);
      }
    }
    t.accumulate(ia, ga);
  });
}

Var Tape::permute_gather(Var a, std::vector<int64_t> index_map, std::vector<int64_t> out_shape) {
  check_tape(a);
  if (Tensor::shape_numel(out_shape) != static_cast<int64_t>(index_map.size())) {
    throw ShapeError("permute_gather: index map size does not match output shape");
  }
  const int64_t in_numel = val(a).numel();
  Tensor out(std::move(out_shape));
  for (size_t i = 0; i < index_map.size(); ++i) {
    if (index_map[i] < 0 || index_map[i] >= in_numel) {
      throw ShapeError("permute_gather: index out of range");
    }
    out[static_cast<int64_t>(i)] = val(a)[index_map[i]];
  }
  const int32_t ia = a.id;
  std::vector<int64_t> in_shape = val(a).shape();
  return make(std::move(out), rg(a),
              [ia, index_map = std::move(index_map), in_shape](Tape& t, const Tensor& g) {
                Tensor ga(in_shape);
                for (size_t i = 0; i < index_map.size(); ++i) {
                  ga[index_map[i]] += g[static_cast<int64_t>(i)];
                }
                t.accumulate(ia, ga);
              });
}

// ---------------------------------------------------------------------------
// reductions & normalization
// ---------------------------------------------------------------------------

Var Tape::sum(Var a) {
  check_tape(a);
  double s = 0.0;
  for (int64_t i = 0; i < val(a).numel(); ++i) {
    s += val(a)[i];
  }
  const int32_t ia = a.id;
  std::vector<int64_t> in_shape = val(a).shape();
  return make(Tensor::from_scalar(s), rg(a), [ia, in_shape](Tape& t, const Tensor& g) {
    t.accumulate(ia, Tensor::full(in_shape, g[0]));
  });
}

Var Tape::mean(Var a) {
  const int64_t n = val(a).numel();
  if (n == 0) {
    return leaf(Tensor::from_scalar(0.0));
  }
  return scale(sum(a), 1.0 / static_cast<double>(n));
}

Var Tape::softmax_rows(Var a) {
  check_tape(a);
  require_2d(val(a), "softmax_rows");
  const int64_t m = val(a).dim(0), n = val(a).dim(1);
  Tensor out = val(a);
  for (int64_t i = 0; i < m; ++i) {
    double mx = -1e300;
    for (int64_t j = 0; j < n; ++j) {
      mx = std::max(mx, out.at(i, j));
    }
    double z = 0.0;
    for (int64_t j = 0; j < n; ++j) {
      out.at(i, j) = std::exp(out.at(i, j) - mx);
      z += out.at(i, j);
    }
    for (int64_t j = 0; j < n; ++j) {
      out.at(i, j) /= z;
    }
  }
  const int32_t ia = a.id, io = static_cast<int32_t>(nodes_.size());
  return make(std::move(out), rg(a), [ia, io, m, n](Tape& t, const Tensor& g) {
    const Tensor& y = t.nodes_[static_cast<size_t>(io)].value;
    Tensor ga({m, n});
    for (int64_t i = 0; i < m; ++i) {
      double dot = 0.0;
      for (int64_t j = 0; j < n; ++j) {
        dot += g.at(i, j) * y.at(i, j);
      }
      for (int64_t j = 0; j < n; ++j) {
        ga.at(i, j) = y.at(i, j) * (g.at(i, j) - dot);
      }
    }
    t.accumulate(ia, ga);
  });
}

Var Tape::layer_norm_rows(Var x, Var gamma, Var beta, double eps) {
  check_tape(x);
  check_tape(gamma);
  check_tape(beta);
  require_2d(val(x), "layer_norm_rows");
  const int64_t m = val(x).dim(0), n = val(x).dim(1);
  if (val(gamma).rank() != 1 || val(gamma).dim(0) != n || !val(gamma).same_shape(val(beta))) {
    throw ShapeError("layer_norm_rows: gamma/beta must be [" + std::to_string(n) + "]");
  }
  Tensor xhat({m, n});
  Tensor inv_std({m});
  Tensor out({m, n});
  for (int64_t i = 0; i < m; ++i) {
    double mu = 0.0;
    for (int64_t j = 0; j < n; ++j) {
      mu += val(x).at(i, j);
    }
    mu /= static_cast<double>(n);
    double var = 0.0;
    for (int64_t j = 0; j < n; ++j) {
      const double d = val(x).at(i, j) - mu;
      var += d * d;
    }
    var /= static_cast<double>(n);
    const double is = 1.0 / std::sqrt(var + eps);
    inv_std[i] = is;
    for (int64_t j = 0; j < n; ++j) {
      xhat.at(i, j) = (val(x).at(i, j) - mu) * is;
      out.at(i, j) = val(gamma)[j] * xhat.at(i, j) + val(beta)[j];
    }
  }
  const int32_t ix = x.id, ig = gamma.id, ib = beta.id;
  return make(std::move(out), rg(x) || rg(gamma) || rg(beta),
              [ix, ig, ib, m, n, xhat = std::move(xhat),
               inv_std = std::move(inv_std)](Tape& t, const Tensor& g) {
                const Tensor& vg = t.nodes_[static_cast<size_t>(ig)].value;
                Tensor dgamma({n}), dbeta({n}), dx({m, n});
                for (int64_t i = 0; i < m; ++i) {
                  double mean_dxhat = 0.0, mean_dxhat_xhat = 0.0;
                  for (int64_t j = 0; j < n; ++j) {
                    const double dxhat = g.at(i, j) * vg[j];
                    mean_dxhat += dxhat;
                    mean_dxhat_xhat += dxhat * xhat.at(i, j);
                    dgamma[j] += g.at(i, j) * xhat.at(i, j);
                    dbeta[j] += g.at(i, j);
                  }
                  mean_dxhat /= static_cast<double>(n);
                  mean_dxhat_xhat /= static_cast<double>(n);
                  for (int64_t j = 0; j < n; ++j) {
                    const double dxhat = g.at(i, j) * vg[j];
                    dx.at(i, j) =
                        inv_std[i] * (dxhat - mean_dxhat - xhat.at(i, j) * mean_dxhat_xhat);
                  }
                }
                t.accumulate(ix, dx);
                t.accumulate(ig, dgamma);
                t.accumulate(ib, dbeta);
              });
}

// ---------------------------------------------------------------------------
// losses
// ---------------------------------------------------------------------------

Var Tape::cross_entropy_rows(Var logits, const std::vector<int64_t>& targets,
                             const std::vector<double>& class_weight,
                             const std::vector<double>& row_weight) {
  check_tape(logits);
  require_2d(val(logits), "cross_entropy_rows");
  const int64_t m = val(logits).dim(0), n = val(logits).dim(1);
  if (static_cast<int64_t>(targets.size()) != m) {
    throw ShapeError("cross_entropy_rows: need one target per row");
  }
  if (!class_weight.empty() && static_cast<int64_t>(class_weight.size()) != n) {
    throw ShapeError("cross_entropy_rows: class_weight size mismatch");
  }
  if (!row_weight.empty() && static_cast<int64_t>(row_weight.size()) != m) {
    throw ShapeError("cross_entropy_rows: row_weight size mismatch");
  }

  std::vector<double> u(static_cast<size_t>(m), 0.0);
  double total_weight = 0.0;
  double loss = 0.0;
  Tensor logz({m});  // per-row log-sum-exp, reused in backward
  for (int64_t i = 0; i < m; ++i) {
    double mx = -1e300;
    for (int64_t j = 0; j < n; ++j) {
      mx = std::max(mx, val(logits).at(i, j));
    }
    double z = 0.0;
    for (int64_t j = 0; j < n; ++j) {
      z += std::exp(val(logits).at(i, j) - mx);
    }
    logz[i] = mx + std::log(z);

    const int64_t ti = targets[static_cast<size_t>(i)];
    if (ti < 0) {
      continue;  // row carries no supervision
    }
    if (ti >= n) {
      throw RangeError("cross_entropy_rows: target out of range");
    }
    double w = row_weight.empty() ? 1.0 : row_weight[static_cast<size_t>(i)];
    if (!class_weight.empty()) {
      w *= class_weight[static_cast<size_t>(ti)];
    }
    u[static_cast<size_t>(i)] = w;
    total_weight += w;
    loss += w * (logz[i] - val(logits).at(i, ti));
  }
  if (total_weight > 0.0) {
    loss /= total_weight;
  } else {
    loss = 0.0;
  }

  const int32_t il = logits.id;
  std::vector<int64_t> tgt = targets;
  return make(Tensor::from_scalar(loss), rg(logits),
              [il, m, n, tgt = std::move(tgt), u = std::move(u), total_weight,
               logz = std::move(logz)](Tape& t, const Tensor& g) {
                if (total_weight <= 0.0) {
                  return;
                }
                const Tensor& vl = t.nodes_[static_cast<size_t>(il)].value;
                Tensor gl({m, n});
                for (int64_t i = 0; i < m; ++i) {
                  const double w = u[static_cast<size_t>(i)];
                  if (w == 0.0) {
                    continue;
                  }
                  const double c = g[0] * w / total_weight;
                  for (int64_t j = 0; j < n; ++j) {
                    const double p = std::exp(vl.at(i, j) - logz[i]);
                    gl.at(i, j) = c * (p - (j == tgt[static_cast<size_t>(i)] ? 1.0 : 0.0));
                  }
                }
                t.accumulate(il, gl);
              });
}

Var Tape::masked_l1(Var pred, Tensor target, Tensor mask) {
  check_tape(pred);
  if (!val(pred).same_shape(target) || !val(pred).same_shape(mask)) {
    throw ShapeError("masked_l1: pred " + val(pred).shape_str() + ", target " +
                     target.shape_str() + ", mask " + mask.shape_str());
  }
  double mass = 0.0;
  for (int64_t i = 0; i < mask.numel(); ++i) {
    mass += mask[i];
  }
  double loss = 0.0;
  if (mass > 0.0) {
    for (int64_t i = 0; i < mask.numel(); ++i) {
      if (mask[i] != 0.0) {
        loss += mask[i] * std::fabs(val(pred)[i] - target[i]);
      }
    }
    loss /= mass;
  }
  const int32_t ip = pred.id;
  return make(Tensor::from_scalar(loss), rg(pred),
              [ip, target = std::move(target), mask = std::move(mask), mass](Tape& t,
                                                                             const Tensor& g) {
                if (mass <= 0.0) {
                  return;
                }
                const Tensor& vp = t.nodes_[static_cast<size_t>(ip)].value;
                Tensor gp(vp.shape());
                for (int64_t i = 0; i < gp.numel(); ++i) {
                  if (mask[i] == 0.0) {
                    continue;
                  }
                  const double d = vp[i] - target[i];
                  const double s = d > 0.0 ? 1.0 : (d < 0.0 ? -1.0 : 0.0);
                  gp[i] = g[0] * mask[i] * s / mass;
                }
                t.accumulate(ip, gp);
              });
}

// ---------------------------------------------------------------------------
// convolution
// ---------------------------------------------------------------------------

namespace {

struct ConvDims {
  int64_t cin, h, w, cout, k, stride, pad, ho, wo;
};

ConvDims conv_dims(const Tensor& x, const Tensor& weight, int64_t stride, int64_t padding) {
  if (x.rank() != 3 || weight.rank() != 4) {
    throw ShapeError("conv2d: expected x[C,H,W], weight[Cout,Cin,k,k]");
  }
  ConvDims d;
  d.cin = x.dim(0);
  d.h = x.dim(1);
  d.w = x.dim(2);
  d.cout = weight.dim(0);
  d.k = weight.dim(2);
  d.stride = stride;
  d.pad = padding;
  if (weight.dim(1) != d.cin || weight.dim(3) != d.k) {
    throw ShapeError("conv2d: weight " + weight.shape_str() + " incompatible with input " +
                     x.shape_str());
  }
  d.ho = (d.h + 2 * padding - d.k) / stride + 1;
  d.wo = (d.w + 2 * padding - d.k) / stride + 1;
  if (d.ho <= 0 || d.wo <= 0) {
    throw ShapeError("conv2d: kernel larger than padded input");
  }
  return d;
}

Tensor im2col(const Tensor& x, const ConvDims& d) {
  Tensor col({d.cin * d.k * d.k, d.ho * d.wo});
  for (int64_t ci = 0; ci < d.cin; ++ci) {
    for (int64_t dy = 0; dy < d.k; ++dy) {
      for (int64_t dx = 0; dx < d.k; ++dx) {
        const int64_t r = (ci * d.k + dy) * d.k + dx;
        for (int64_t oy = 0; oy < d.ho; ++oy) {
          const int64_t iy = oy * d.stride + dy - d.pad;
          if (iy < 0 || iy >= d.h) {
            continue;
          }
          for (int64_t ox = 0; ox < d.wo; ++ox) {
            const int64_t ix = ox * d.stride + dx - d.pad;
            if (ix < 0 || ix >= d.w) {
              continue;
            }
            col.at(r, oy * d.wo + ox) = x.at(ci, iy, ix);
          }
        }
      }
    }
  }
  return col;
}

void col2im_add(const Tensor& col, const ConvDims& d, Tensor& gx) {
  for (int64_t ci = 0; ci < d.cin; ++ci) {
    for (int64_t dy = 0; dy < d.k; ++dy) {
      for (int64_t dx = 0; dx < d.k; ++dx) {
        const int64_t r = (ci * d.k + dy) * d.k + dx;
        for (int64_t oy = 0; oy < d.ho; ++oy) {
          const int64_t iy = oy * d.stride + dy - d.pad;
          if (iy < 0 || iy >= d.h) {
            continue;
          }
          for (int64_t ox = 0; ox < d.wo; ++ox) {
            const int64_t ix = ox * d.stride + dx - d.pad;
            if (ix < 0 || ix >= d.w) {
              continue;
            }
            gx.at(ci, iy, ix) += col.at(r, oy * d.wo + ox);
          }
        }
      }
    }
  }
}

}  // namespace

Var Tape::conv2d(Var x, Var weight, Var bias, int64_t stride, int64_t padding) {
  check_tape(x);
  check_tape(weight);
  check_tape(bias);
  const ConvDims d = conv_dims(val(x), val(weight), stride, padding);
  if (val(bias).rank() != 1 || val(bias).dim(0) != d.cout) {
    throw ShapeError("conv2d: bias must be [Cout]");
  }

  Tensor col = im2col(val(x), d);
  Tensor w2d = val(weight).reshaped({d.cout, d.cin * d.k * d.k});
  Tensor out2d({d.cout, d.ho * d.wo});
  as_mat(out2d).noalias() = as_mat(w2d) * as_mat(col);
  for (int64_t co = 0; co < d.cout; ++co) {
    for (int64_t i = 0; i < d.ho * d.wo; ++i) {
      out2d.at(co, i) += val(bias)[co];
    }
  }

  const int32_t ix = x.id, iw = weight.id, ib = bias.id;
  return make(out2d.reshaped({d.cout, d.ho, d.wo}), rg(x) || rg(weight) || rg(bias),
              [ix, iw, ib, d, col = std::move(col)](Tape& t, const Tensor& g) {
                const Tensor g2d = g.reshaped({d.cout, d.ho * d.wo});
                if (t.nodes_[static_cast<size_t>(iw)].requires_grad) {
                  Tensor gw({d.cout, d.cin * d.k * d.k});
                  as_mat(gw).noalias() = as_mat(g2d) * as_mat(col).transpose();
                  t.accumulate(iw, gw.reshaped({d.cout, d.cin, d.k, d.k}));
                }
                if (t.nodes_[static_cast<size_t>(ib)].requires_grad) {
                  Tensor gb({d.cout});
                  for (int64_t co = 0; co < d.cout; ++co) {
                    for (int64_t i = 0; i < d.ho * d.wo; ++i) {
                      gb[co] += g2d.at(co, i);
                    }
                  }
                  t.accumulate(ib, gb);
                }
                if (t.nodes_[static_cast<size_t>(ix)].requires_grad) {
                  const Tensor& vw = t.nodes_[static_cast<size_t>(iw)].value;
                  Tensor w2d = vw.reshaped({d.cout, d.cin * d.k * d.k});
                  Tensor gcol({d.cin * d.k * d.k, d.ho * d.wo});
                  as_mat(gcol).noalias() = as_mat(w2d).transpose() * as_mat(g2d);
                  Tensor gx({d.cin, d.h, d.w});
                  col2im_add(gcol, d, gx);
                  t.accumulate(ix, gx);
                }
              });
}

Var Tape::avg_pool(Var x, int64_t k) {
  check_tape(x);
  if (val(x).rank() != 3) {
    throw ShapeError("avg_pool: expected [C,H,W], got " + val(x).shape_str());
  }
  const int64_t c = val(x).dim(0), h = val(x).dim(1), w = val(x).dim(2);
  if (k <= 0 || h % k != 0 || w % k != 0) {
    throw DimensionError("avg_pool: spatial dims " + std::to_string(h) + "x" + std::to_string(w) +
                         " not divisible by kernel " + std::to_string(k));
  }
  const int64_t ho = h / k, wo = w / k;
  Tensor out({c, ho, wo});
  const double inv = 1.0 / static_cast<double>(k * k);
  for (int64_t ci = 0; ci < c; ++ci) {
    for (int64_t oy = 0; oy < ho; ++oy) {
      for (int64_t ox = 0; ox < wo; ++ox) {
        double s = 0.0;
        for (int64_t dy = 0; dy < k; ++dy) {
          for (int64_t dx = 0; dx < k; ++dx) {
            s += val(x).at(ci, oy * k + dy, ox * k + dx);
          }
        }
        out.at(ci, oy, ox) = s * inv;
      }
    }
  }
  const int32_t ix = x.id;
  return make(std::move(out), rg(x), [ix, c, h, w, k, ho, wo, inv](Tape& t, const Tensor& g) {
    Tensor gx({c, h, w});
    for (int64_t ci = 0; ci < c; ++ci) {
      for (int64_t oy = 0; oy < ho; ++oy) {
        for (int64_t ox = 0; ox < wo; ++ox) {
          const double v = g.at(ci, oy, ox) * inv;
          for (int64_t dy = 0; dy < k; ++dy) {
            for (int64_t dx = 0; dx < k; ++dx) {
              gx.at(ci, oy * k + dy, ox * k + dx) += v;
            }
          }
        }
      }
    }
    t.accumulate(ix, gx);
  });
}

}  // namespace ad
}  // namespace ssldetr
