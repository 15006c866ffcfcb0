#include <doctest.h>

#include <cmath>
#include <functional>
#include <vector>

#include "helpers.hpp"
#include "ssldetr/autodiff.hpp"
#include "ssldetr/errors.hpp"
#include "ssldetr/rng.hpp"
#include "ssldetr/tensor.hpp"

using namespace ssldetr;
using ad::Tape;
using ad::Var;

namespace {

using Builder = std::function<Var(Tape&, const std::vector<Var>&)>;

double eval(const std::vector<Tensor>& inputs, const Builder& f) {
  Tape tape;
  std::vector<Var> leaves;
  leaves.reserve(inputs.size());
  for (const Tensor& t : inputs) {
    leaves.push_back(tape.leaf(t));
  }
  return tape.value(f(tape, leaves)).scalar();
}

// Central-difference check of d(root)/d(every input element).
void check_gradients(std::vector<Tensor> inputs, const Builder& f, double eps = 1e-6,
                     double tol = 1e-6) {
  Tape tape;
  std::vector<Var> leaves;
  for (const Tensor& t : inputs) {
    leaves.push_back(tape.leaf(t, /*requires_grad=*/true));
  }
  const Var root = f(tape, leaves);
  REQUIRE(tape.value(root).numel() == 1);
  tape.backward(root);

  for (size_t i = 0; i < inputs.size(); ++i) {
    const Tensor analytic = tape.grad(leaves[i]);
    for (int64_t j = 0; j < inputs[i].numel(); ++j) {
      const double keep = inputs[i][j];
      inputs[i][j] = keep + eps;
      const double up = eval(inputs, f);
      inputs[i][j] = keep - eps;
      const double down = eval(inputs, f);
      inputs[i][j] = keep;
      const double numeric = (up - down) / (2.0 * eps);
      const double err = std::abs(analytic[j] - numeric) /
                         std::max({std::abs(numeric), std::abs(analytic[j]), 1.0});
      CHECK_MESSAGE(err < tol, "input " << i << " elem " << j << ": analytic " << analytic[j]
                                        << " numeric " << numeric);
    }
  }
}

Tensor rand_tensor(std::vector<int64_t> shape, Rng& rng, double lo = -1.0, double hi = 1.0) {
  Tensor t(std::move(shape));
  for (int64_t i = 0; i < t.numel(); ++i) {
    t[i] = rng.uniform(lo, hi);
  }
  return t;
}

}  // namespace

TEST_SUITE("autodiff") {

TEST_CASE("forward values of elementwise ops") {
  Tape tape;
  Var a = tape.leaf(Tensor({2}, {1.0, -2.0}));
  Var b = tape.leaf(Tensor({2}, {3.0, 5.0}));
  CHECK(tape.value(tape.add(a, b))[0] == 4.0);
  CHECK(tape.value(tape.sub(a, b))[1] == -7.0);
  CHECK(tape.value(tape.mul(a, b))[1] == -10.0);
  CHECK(tape.value(tape.div(b, a))[1] == -2.5);
  CHECK(tape.value(tape.scale(a, 2.0))[0] == 2.0);
  CHECK(tape.value(tape.add_scalar(a, 10.0))[1] == 8.0);
  CHECK(tape.value(tape.abs(a))[1] == 2.0);
  CHECK(tape.value(tape.relu(a))[1] == 0.0);
  CHECK(tape.value(tape.sigmoid(tape.leaf(Tensor({1}, {0.0}))))[0] == doctest::Approx(0.5));
}

TEST_CASE("elementwise gradient checks") {
  Rng rng(1);
  // values away from the |x| and relu kinks
  Tensor a({2, 3}, {0.5, -0.7, 1.2, -0.3, 0.9, -1.5});
  Tensor b({2, 3}, {1.1, 0.4, -0.8, 0.6, -1.3, 0.2});
  check_gradients({a, b}, [](Tape& t, const std::vector<Var>& v) {
    return t.mean(t.add(t.mul(v[0], v[1]), t.sub(v[0], v[1])));
  });
  check_gradients({a, b}, [](Tape& t, const std::vector<Var>& v) {
    return t.mean(t.div(v[0], v[1]));
  });
  check_gradients({a}, [](Tape& t, const std::vector<Var>& v) {
    return t.mean(t.abs(t.scale(v[0], 3.0)));
  });
  check_gradients({a}, [](Tape& t, const std::vector<Var>& v) {
    return t.mean(t.relu(t.add_scalar(v[0], 0.05)));
  });
  check_gradients({a}, [](Tape& t, const std::vector<Var>& v) {
    return t.mean(t.sigmoid(v[0]));
  });
  check_gradients({a}, [](Tape& t, const std::vector<Var>& v) {
    return t.mean(t.gelu(v[0]));
  }, 1e-6, 1e-5);
}

TEST_CASE("min/max/mul against constant tensors") {
  Rng rng(2);
  Tensor a = rand_tensor({2, 2}, rng);
  // constants offset so no element sits on the min/max switch point
  Tensor c({2, 2}, {0.321, -0.4567, 0.1234, 0.789});
  check_gradients({a}, [&](Tape& t, const std::vector<Var>& v) {
    return t.mean(t.min_const(v[0], c));
  });
  check_gradients({a}, [&](Tape& t, const std::vector<Var>& v) {
    return t.mean(t.max_const(v[0], c));
  });
  check_gradients({a}, [&](Tape& t, const std::vector<Var>& v) {
    return t.mean(t.mul_const(v[0], c));
  });
}

TEST_CASE("matmul forward against hand computation") {
  Tape tape;
  Var a = tape.leaf(Tensor({2, 3}, {1, 2, 3, 4, 5, 6}));
  Var b = tape.leaf(Tensor({3, 2}, {7, 8, 9, 10, 11, 12}));
  const Tensor& c = tape.value(tape.matmul(a, b));
  CHECK(c.at(0, 0) == 58.0);
  CHECK(c.at(0, 1) == 64.0);
  CHECK(c.at(1, 0) == 139.0);
  CHECK(c.at(1, 1) == 154.0);
}

TEST_CASE("matmul rejects inner-dimension mismatch") {
  Tape tape;
  Var a = tape.leaf(Tensor({2, 3}));
  Var b = tape.leaf(Tensor({2, 2}));
  CHECK_THROWS_AS(tape.matmul(a, b), ShapeError);
}

TEST_CASE("linear algebra gradient checks") {
  Rng rng(3);
  Tensor a = rand_tensor({3, 4}, rng);
  Tensor b = rand_tensor({4, 2}, rng);
  Tensor row = rand_tensor({4}, rng);
  check_gradients({a, b}, [](Tape& t, const std::vector<Var>& v) {
    return t.mean(t.matmul(v[0], v[1]));
  });
  check_gradients({a}, [](Tape& t, const std::vector<Var>& v) {
    return t.mean(t.transpose(v[0]));
  });
  check_gradients({a, row}, [](Tape& t, const std::vector<Var>& v) {
    return t.mean(t.add_row_broadcast(v[0], v[1]));
  });
}

TEST_CASE("shape and indexing gradient checks") {
  Rng rng(4);
  Tensor a = rand_tensor({3, 4}, rng);
  check_gradients({a}, [](Tape& t, const std::vector<Var>& v) {
    return t.mean(t.reshape(v[0], {4, 3}));
  });
  check_gradients({a}, [](Tape& t, const std::vector<Var>& v) {
    return t.mean(t.slice_cols(v[0], 1, 2));
  });
  check_gradients({a}, [](Tape& t, const std::vector<Var>& v) {
    return t.mean(t.slice_rows(v[0], 0, 2));
  });
  Tensor b = rand_tensor({3, 2}, rng);
  check_gradients({a, b}, [](Tape& t, const std::vector<Var>& v) {
    return t.mean(t.concat_cols({v[0], v[1]}));
  });
  // gather with a repeated row: gradient must accumulate
  check_gradients({a}, [](Tape& t, const std::vector<Var>& v) {
    return t.mean(t.gather_rows(v[0], {2, 0, 2}));
  });
  // non-bijective index map (element 5 used twice, some elements unused)
  check_gradients({a}, [](Tape& t, const std::vector<Var>& v) {
    return t.mean(t.permute_gather(v[0], {5, 5, 0, 11, 3, 7}, {2, 3}));
  });
}

TEST_CASE("permute_gather moves values") {
  Tape tape;
  Var a = tape.leaf(Tensor({2, 2}, {10, 20, 30, 40}));
  const Tensor& out = tape.value(tape.permute_gather(a, {3, 2, 1, 0}, {2, 2}));
  CHECK(out[0] == 40.0);
  CHECK(out[3] == 10.0);
}

TEST_CASE("reductions and normalizers") {
  Rng rng(5);
  Tensor a = rand_tensor({3, 5}, rng);
  check_gradients({a}, [](Tape& t, const std::vector<Var>& v) { return t.sum(v[0]); });
  check_gradients({a}, [](Tape& t, const std::vector<Var>& v) { return t.mean(v[0]); });
  Tensor pick = rand_tensor({3, 5}, rng);
  check_gradients({a}, [&](Tape& t, const std::vector<Var>& v) {
    return t.mean(t.mul_const(t.softmax_rows(v[0]), pick));
  });
  Tensor gamma = rand_tensor({5}, rng, 0.5, 1.5);
  Tensor beta = rand_tensor({5}, rng);
  check_gradients({a, gamma, beta}, [&](Tape& t, const std::vector<Var>& v) {
    return t.mean(t.mul_const(t.layer_norm_rows(v[0], v[1], v[2]), pick));
  }, 1e-6, 1e-5);
}

TEST_CASE("softmax rows sum to one") {
  Tape tape;
  Rng rng(6);
  Var a = tape.leaf(rand_tensor({4, 7}, rng, -5.0, 5.0));
  const Tensor& s = tape.value(tape.softmax_rows(a));
  for (int64_t i = 0; i < 4; ++i) {
    double total = 0.0;
    for (int64_t j = 0; j < 7; ++j) {
      CHECK(s.at(i, j) > 0.0);
      total += s.at(i, j);
    }
    CHECK(total == doctest::Approx(1.0).epsilon(1e-12));
  }
}

TEST_CASE("softmax is shift-invariant and overflow-safe") {
  Tape tape;
  Var a = tape.leaf(Tensor({1, 3}, {1000.0, 1001.0, 1002.0}));
  Var b = tape.leaf(Tensor({1, 3}, {0.0, 1.0, 2.0}));
  const Tensor& sa = tape.value(tape.softmax_rows(a));
  const Tensor& sb = tape.value(tape.softmax_rows(b));
  CHECK(sa.all_finite());
  for (int64_t j = 0; j < 3; ++j) {
    CHECK(sa[j] == doctest::Approx(sb[j]).epsilon(1e-12));
  }
}

TEST_CASE("layer_norm_rows normalizes each row") {
  Tape tape;
  Rng rng(7);
  Var x = tape.leaf(rand_tensor({3, 8}, rng, -2.0, 2.0));
  Var gamma = tape.leaf(Tensor::full({8}, 1.0));
  Var beta = tape.leaf(Tensor({8}));
  const Tensor& y = tape.value(tape.layer_norm_rows(x, gamma, beta));
  for (int64_t i = 0; i < 3; ++i) {
    double mean = 0.0, var = 0.0;
    for (int64_t j = 0; j < 8; ++j) {
      mean += y.at(i, j);
    }
    mean /= 8.0;
    for (int64_t j = 0; j < 8; ++j) {
      var += (y.at(i, j) - mean) * (y.at(i, j) - mean);
    }
    var /= 8.0;
    CHECK(mean == doctest::Approx(0.0).epsilon(1e-10));
    CHECK(var == doctest::Approx(1.0).epsilon(1e-4));  // eps in the denominator
  }
}

TEST_CASE("cross_entropy_rows forward value") {
  // Two rows, uniform logits: loss = log(3). Row weights scale the mix.
  Tape tape;
  Var logits = tape.leaf(Tensor({2, 3}));
  Var ce = tape.cross_entropy_rows(logits, {0, 2});
  CHECK(tape.value(ce).scalar() == doctest::Approx(std::log(3.0)).epsilon(1e-12));
}

TEST_CASE("cross_entropy_rows weighted mean") {
  // logits row0 = [1,0], row1 = [0,1]; targets 0,0.
  // nll0 = log(1+e^-1), nll1 = log(1+e). weights: class_weight[0]=0.5 both rows,
  // row_weight = {1, 3} -> u = {0.5, 1.5}
  Tape tape;
  Var logits = tape.leaf(Tensor({2, 2}, {1, 0, 0, 1}));
  Var ce = tape.cross_entropy_rows(logits, {0, 0}, {0.5, 2.0}, {1.0, 3.0});
  const double nll0 = std::log(1.0 + std::exp(-1.0));
  const double nll1 = std::log(1.0 + std::exp(1.0));
  const double expect = (0.5 * nll0 + 1.5 * nll1) / 2.0;
  CHECK(tape.value(ce).scalar() == doctest::Approx(expect).epsilon(1e-12));
}

TEST_CASE("cross_entropy_rows ignores negative targets") {
  Tape tape;
  Var logits = tape.leaf(Tensor({3, 4}, std::vector<double>(12, 0.25)), true);
  Var ce = tape.cross_entropy_rows(logits, {-1, 1, -1});
  CHECK(tape.value(ce).scalar() == doctest::Approx(std::log(4.0)));
  tape.backward(ce);
  const Tensor g = tape.grad(logits);
  for (int64_t j = 0; j < 4; ++j) {
    CHECK(g.at(0, j) == 0.0);  // ignored rows get no gradient
    CHECK(g.at(2, j) == 0.0);
    CHECK(g.at(1, j) != 0.0);
  }
}

TEST_CASE("cross_entropy_rows with no supervised rows is zero") {
  Tape tape;
  Var logits = tape.leaf(Tensor({2, 3}), true);
  Var ce = tape.cross_entropy_rows(logits, {-1, -1});
  CHECK(tape.value(ce).scalar() == 0.0);
  CHECK_NOTHROW(tape.backward(ce));
}

TEST_CASE("cross_entropy_rows gradient check") {
  Rng rng(8);
  Tensor logits = rand_tensor({4, 5}, rng, -2.0, 2.0);
  check_gradients({logits}, [](Tape& t, const std::vector<Var>& v) {
    return t.cross_entropy_rows(v[0], {1, -1, 4, 0}, {1.0, 0.5, 2.0, 1.0, 1.0},
                                {1.0, 9.0, 0.25, 2.0});
  });
}

TEST_CASE("cross_entropy_rows rejects bad targets") {
  Tape tape;
  Var logits = tape.leaf(Tensor({2, 3}));
  CHECK_THROWS_AS(tape.cross_entropy_rows(logits, {0, 3}), RangeError);
  CHECK_THROWS_AS(tape.cross_entropy_rows(logits, {0}), ShapeError);
}

TEST_CASE("masked_l1 forward and gradient") {
  Tape tape;
  Var pred = tape.leaf(Tensor({2, 2}, {1.0, 2.0, 3.0, 4.0}));
  Tensor target({2, 2}, {0.0, 2.5, 10.0, 3.0});
  Tensor mask({2, 2}, {1.0, 1.0, 0.0, 1.0});
  Var loss = tape.masked_l1(pred, target, mask);
  // (|1-0| + |2-2.5| + |4-3|) / 3
  CHECK(tape.value(loss).scalar() == doctest::Approx(2.5 / 3.0).epsilon(1e-12));

  Rng rng(9);
  Tensor p = rand_tensor({3, 4}, rng);
  Tensor tgt = rand_tensor({3, 4}, rng);  // random values: no |0| kinks hit
  Tensor m({3, 4});
  for (int64_t i = 0; i < m.numel(); ++i) {
    m[i] = (i % 3 == 0) ? 1.0 : 0.0;
  }
  check_gradients({p}, [&](Tape& t, const std::vector<Var>& v) {
    return t.masked_l1(v[0], tgt, m);
  });
}

TEST_CASE("masked_l1 with empty mask is zero") {
  Tape tape;
  Var pred = tape.leaf(Tensor({2, 2}, {1, 2, 3, 4}), true);
  Var loss = tape.masked_l1(pred, Tensor({2, 2}), Tensor({2, 2}));
  CHECK(tape.value(loss).scalar() == 0.0);
  CHECK_NOTHROW(tape.backward(loss));
  CHECK(tape.grad(pred).max_abs() == 0.0);
}

TEST_CASE("conv2d forward against hand computation") {
  // 1-channel 3x3 image, 1 output channel, 2x2 kernel of ones, stride 1, no padding
  Tape tape;
  Var x = tape.leaf(Tensor({1, 3, 3}, {1, 2, 3, 4, 5, 6, 7, 8, 9}));
  Var w = tape.leaf(Tensor({1, 1, 2, 2}, {1, 1, 1, 1}));
  Var b = tape.leaf(Tensor({1}, {0.5}));
  const Tensor& y = tape.value(tape.conv2d(x, w, b, 1, 0));
  CHECK(y.dim(1) == 2);
  CHECK(y.dim(2) == 2);
  CHECK(y.at(0, 0, 0) == 12.5);  // 1+2+4+5 + 0.5
  CHECK(y.at(0, 1, 1) == 28.5);  // 5+6+8+9 + 0.5
}

TEST_CASE("conv2d stride and padding geometry") {
  Tape tape;
  Var x = tape.leaf(Tensor({2, 4, 4}));
  Var w = tape.leaf(Tensor({3, 2, 3, 3}));
  Var b = tape.leaf(Tensor({3}));
  const Tensor& y = tape.value(tape.conv2d(x, w, b, 2, 1));
  CHECK(y.dim(0) == 3);
  CHECK(y.dim(1) == 2);
  CHECK(y.dim(2) == 2);
}

TEST_CASE("conv2d gradient check") {
  Rng rng(10);
  Tensor x = rand_tensor({2, 5, 5}, rng);
  Tensor w = rand_tensor({3, 2, 3, 3}, rng);
  Tensor b = rand_tensor({3}, rng);
  check_gradients({x, w, b}, [](Tape& t, const std::vector<Var>& v) {
    return t.mean(t.conv2d(v[0], v[1], v[2], 2, 1));
  });
}

TEST_CASE("avg_pool forward and gradient") {
  Tape tape;
  Var x = tape.leaf(Tensor({1, 4, 4}, {1, 2, 3, 4, 5, 6, 7, 8, 9, 10, 11, 12, 13, 14, 15, 16}));
  const Tensor& y = tape.value(tape.avg_pool(x, 2));
  CHECK(y.dim(1) == 2);
  CHECK(y.at(0, 0, 0) == doctest::Approx(3.5));   // mean of 1,2,5,6
  CHECK(y.at(0, 1, 1) == doctest::Approx(13.5));  // mean of 11,12,15,16

  Rng rng(11);
  Tensor xr = rand_tensor({2, 6, 6}, rng);
  check_gradients({xr}, [](Tape& t, const std::vector<Var>& v) {
    return t.mean(t.avg_pool(v[0], 3));
  });
}

TEST_CASE("fan-out accumulates gradients") {
  // y = x*x + x => dy/dx = 2x + 1
  Tape tape;
  Var x = tape.leaf(Tensor({1}, {3.0}), true);
  Var y = tape.sum(tape.add(tape.mul(x, x), x));
  tape.backward(y);
  CHECK(tape.grad(x)[0] == doctest::Approx(7.0));
}

TEST_CASE("parameters are memoized per tape and collected once") {
  Parameter p("weight", Tensor({2}, {1.0, 2.0}));
  Tape tape;
  Var a = tape.param(p);
  Var b = tape.param(p);
  CHECK(a.id == b.id);
  REQUIRE(tape.touched_params().size() == 1);
  CHECK(tape.touched_params()[0] == &p);

  Var loss = tape.sum(tape.mul(a, b));  // x^2 per element
  tape.backward(loss);
  CHECK(p.grad[0] == doctest::Approx(2.0));
  CHECK(p.grad[1] == doctest::Approx(4.0));

  // gradients accumulate across backward passes until zeroed
  tape.backward(loss);
  CHECK(p.grad[0] == doctest::Approx(4.0));
  p.zero_grad();
  CHECK(p.grad[0] == 0.0);
}

TEST_CASE("untouched leaves report zero gradients") {
  Tape tape;
  Var x = tape.leaf(Tensor({2}, {1.0, 2.0}), true);
  Var y = tape.leaf(Tensor({2}, {1.0, 2.0}), true);
  tape.backward(tape.sum(x));
  CHECK(tape.grad(y).max_abs() == 0.0);
}

TEST_CASE("vars from another tape are rejected") {
  Tape t1, t2;
  Var x = t1.leaf(Tensor({1}, {1.0}));
  CHECK_THROWS_AS(t2.scale(x, 2.0), ContractError);
}

TEST_CASE("elementwise shape mismatches are rejected") {
  Tape tape;
  Var a = tape.leaf(Tensor({2}));
  Var b = tape.leaf(Tensor({3}));
  CHECK_THROWS_AS(tape.add(a, b), ShapeError);
  CHECK_THROWS_AS(tape.mul(a, b), ShapeError);
}

}  // TEST_SUITE
