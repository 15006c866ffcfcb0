#include <doctest.h>

#include <cmath>
#include <limits>

#include "ssldetr/errors.hpp"
#include "ssldetr/tensor.hpp"

using namespace ssldetr;

TEST_SUITE("tensor") {

TEST_CASE("zeros construction") {
  Tensor t({2, 3});
  CHECK(t.rank() == 2);
  CHECK(t.dim(0) == 2);
  CHECK(t.dim(1) == 3);
  CHECK(t.numel() == 6);
  for (int64_t i = 0; i < t.numel(); ++i) {
    CHECK(t[i] == 0.0);
  }
}

TEST_CASE("data constructor validates element count") {
  CHECK_NOTHROW(Tensor({2, 2}, {1, 2, 3, 4}));
  CHECK_THROWS_AS(Tensor({2, 2}, {1, 2, 3}), ShapeError);
}

TEST_CASE("scalar tensor") {
  Tensor s = Tensor::from_scalar(2.5);
  CHECK(s.rank() == 0);
  CHECK(s.numel() == 1);
  CHECK(s.scalar() == 2.5);
  Tensor v({3});
  CHECK_THROWS_AS(v.scalar(), ShapeError);
}

TEST_CASE("full fills") {
  Tensor t = Tensor::full({2, 2}, 7.0);
  for (int64_t i = 0; i < 4; ++i) {
    CHECK(t[i] == 7.0);
  }
}

TEST_CASE("row-major 2d and 3d accessors") {
  Tensor m({2, 3}, {0, 1, 2, 3, 4, 5});
  CHECK(m.at(0, 2) == 2.0);
  CHECK(m.at(1, 0) == 3.0);
  Tensor c({2, 2, 2}, {0, 1, 2, 3, 4, 5, 6, 7});
  CHECK(c.at(0, 1, 0) == 2.0);
  CHECK(c.at(1, 0, 1) == 5.0);
  c.at(1, 1, 1) = -1.0;
  CHECK(c[7] == -1.0);
}

TEST_CASE("reshaped keeps data, checks count") {
  Tensor m({2, 3}, {0, 1, 2, 3, 4, 5});
  Tensor r = m.reshaped({3, 2});
  CHECK(r.dim(0) == 3);
  CHECK(r.at(2, 1) == 5.0);
  CHECK_THROWS_AS(m.reshaped({4, 2}), ShapeError);
}

TEST_CASE("in-place arithmetic") {
  Tensor a({3}, {1, 2, 3});
  Tensor b({3}, {10, 20, 30});
  a.add_(b);
  CHECK(a[1] == 22.0);
  a.scale_(0.5);
  CHECK(a[2] == 16.5);
  Tensor wrong({2});
  CHECK_THROWS_AS(a.add_(wrong), ShapeError);
  a.fill(-1.0);
  CHECK(a[0] == -1.0);
}

TEST_CASE("all_finite and max_abs") {
  Tensor t({3}, {1.0, -4.0, 2.0});
  CHECK(t.all_finite());
  CHECK(t.max_abs() == 4.0);
  t[1] = std::numeric_limits<double>::quiet_NaN();
  CHECK_FALSE(t.all_finite());
  t[1] = std::numeric_limits<double>::infinity();
  CHECK_FALSE(t.all_finite());
}

TEST_CASE("allclose tolerances") {
  Tensor a({2}, {1.0, 2.0});
  Tensor b({2}, {1.0 + 5e-13, 2.0});
  CHECK(allclose(a, b));                    // default atol 1e-12
  CHECK_FALSE(allclose(a, b, 1e-14));
  Tensor c({2}, {1.001, 2.0});
  CHECK(allclose(a, c, 0.0, 1e-2));
  CHECK_FALSE(allclose(a, c, 0.0, 1e-4));
  Tensor d({3});
  CHECK_FALSE(allclose(a, d));  // shape mismatch is never close
}

TEST_CASE("shape_str formatting") {
  Tensor t({2, 3, 4});
  CHECK(t.shape_str() == "[2, 3, 4]");
  CHECK(Tensor::shape_str({}) == "[]");
}

TEST_CASE("shape_numel") {
  CHECK(Tensor::shape_numel({2, 3, 4}) == 24);
  CHECK(Tensor::shape_numel({}) == 1);
  CHECK(Tensor::shape_numel({5, 0}) == 0);
}

TEST_CASE("negative dimensions are rejected") {
  CHECK_THROWS_AS(Tensor({2, -1}), ShapeError);
}

}  // TEST_SUITE
