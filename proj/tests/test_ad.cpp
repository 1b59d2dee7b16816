#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <cmath>
#include <functional>
#include <vector>

#include "doctest.h"
#include "stag/ad.hpp"
#include "stag/rng.hpp"

using stag::Mat;
namespace ad = stag::ad;

namespace {

Mat random_mat(int r, int c, uint64_t seed, double lo = -2.0, double hi = 2.0) {
  Mat m(r, c);
  uint64_t s = seed;
  for (auto& v : m.a) {
    s = stag::splitmix64(s);
    v = lo + static_cast<double>(s >> 11) * 0x1.0p-53 * (hi - lo);
  }
  return m;
}

using Builder = std::function<ad::Var(ad::Graph&, const std::vector<ad::Var>&)>;

double eval_scalar(std::vector<Mat>& storage, const Builder& build) {
  ad::Graph g;
  std::vector<ad::Var> ps;
  for (size_t i = 0; i < storage.size(); ++i) ps.push_back(g.param(&storage[i], "p" + std::to_string(i)));
  return g.val(build(g, ps))(0, 0);
}

// Central finite differences against the tape's analytic gradient, every
// entry of every parameter.
void check_fd(std::vector<Mat> storage, const Builder& build, double tol = 1e-6) {
  std::vector<Mat> analytic;
  {
    ad::Graph g;
    std::vector<ad::Var> ps;
    for (size_t i = 0; i < storage.size(); ++i) ps.push_back(g.param(&storage[i], "p" + std::to_string(i)));
    ad::Var loss = build(g, ps);
    REQUIRE(g.val(loss).rows == 1);
    REQUIRE(g.val(loss).cols == 1);
    g.backward(loss);
    for (auto p : ps) analytic.push_back(g.grad_of(p));
  }
  for (size_t i = 0; i < storage.size(); ++i) {
    for (size_t e = 0; e < storage[i].a.size(); ++e) {
      double theta = storage[i].a[e];
      double h = 1e-5 * std::max(1.0, std::fabs(theta));
      storage[i].a[e] = theta + h;
      double up = eval_scalar(storage, build);
      storage[i].a[e] = theta - h;
      double dn = eval_scalar(storage, build);
      storage[i].a[e] = theta;
      double fd = (up - dn) / (2 * h);
      double an = analytic[i].a[e];
      double rel = std::fabs(fd - an) / std::max({1.0, std::fabs(fd), std::fabs(an)});
      CAPTURE(i);
      CAPTURE(e);
      CAPTURE(fd);
      CAPTURE(an);
      CHECK(rel <= tol);
    }
  }
}

}  // namespace

TEST_CASE("elementwise op gradients match finite differences") {
  Mat A = random_mat(3, 4, 1), B = random_mat(3, 4, 2);
  check_fd({A, B}, [](ad::Graph& g, const std::vector<ad::Var>& p) {
    auto x = g.add(p[0], p[1]);
    auto y = g.sub(g.hadamard(x, p[1]), g.affine(p[0], 0.5, -1.25));
    return g.mean_all(y);
  });
}

TEST_CASE("scale_by, add_rowvec and col_scale gradients match finite differences") {
  check_fd({random_mat(3, 4, 3), Mat::scalar(1.7), random_mat(1, 4, 4), random_mat(3, 1, 5)},
           [](ad::Graph& g, const std::vector<ad::Var>& p) {
             auto x = g.scale_by(p[0], p[1]);
             auto y = g.add_rowvec(x, p[2]);
             return g.sum_all(g.col_scale(y, p[3]));
           });
}

TEST_CASE("matmul gradients match finite differences in all supported modes") {
  Mat A = random_mat(3, 4, 6), B = random_mat(4, 2, 7);
  check_fd({A, B}, [](ad::Graph& g, const std::vector<ad::Var>& p) {
    return g.sum_all(g.hadamard(g.matmul(p[0], p[1]), g.matmul(p[0], p[1])));
  });
  Mat At = random_mat(4, 3, 8);
  check_fd({At, B}, [](ad::Graph& g, const std::vector<ad::Var>& p) {
    return g.mean_all(g.matmul(p[0], p[1], true, false));
  });
  Mat Bt = random_mat(2, 4, 9);
  check_fd({A, Bt}, [](ad::Graph& g, const std::vector<ad::Var>& p) {
    return g.mean_all(g.matmul(p[0], p[1], false, true));
  });
}

TEST_CASE("row selection and substitution gradients match finite differences") {
  check_fd({random_mat(5, 3, 10), random_mat(1, 3, 11)}, [](ad::Graph& g, const std::vector<ad::Var>& p) {
    auto sub = g.substitute_rows(p[0], {1, 3}, p[1]);
    auto gath = g.gather_rows(sub, {0, 1, 1, 4});
    return g.mean_all(g.hadamard(gath, gath));
  });
}

TEST_CASE("concat_cols and mean_of gradients match finite differences") {
  check_fd({random_mat(3, 2, 12), random_mat(3, 3, 13), random_mat(3, 2, 14)},
           [](ad::Graph& g, const std::vector<ad::Var>& p) {
             auto cat = g.concat_cols({p[0], p[1], p[2]});
             auto avg = g.mean_of({p[0], p[2]});
             return g.add(g.mean_all(g.hadamard(cat, cat)), g.sum_all(avg));
           });
}

TEST_CASE("segment_sum and segment_softmax gradients match finite differences") {
  ad::SegmentPlan plan;
  plan.offsets = {0, 2, 5};
  check_fd({random_mat(5, 3, 15), random_mat(5, 1, 16)}, [plan](ad::Graph& g, const std::vector<ad::Var>& p) {
    auto w = g.segment_softmax(p[1], plan);
    auto mixed = g.segment_sum(g.col_scale(p[0], w), plan);
    return g.mean_all(g.hadamard(mixed, mixed));
  });
}

TEST_CASE("segment_softmax normalizes within each segment") {
  ad::SegmentPlan plan;
  plan.offsets = {0, 3, 4};
  ad::Graph g;
  Mat logits = random_mat(4, 1, 17);
  auto w = g.segment_softmax(g.constant(logits), plan);
  const Mat& v = g.val(w);
  CHECK(v(0, 0) + v(1, 0) + v(2, 0) == doctest::Approx(1.0).epsilon(1e-12));
  CHECK(v(3, 0) == doctest::Approx(1.0).epsilon(1e-12));
}

TEST_CASE("normalization, softmax and cosine gradients match finite differences") {
  check_fd({random_mat(4, 5, 18), random_mat(4, 5, 19)}, [](ad::Graph& g, const std::vector<ad::Var>& p) {
    auto a = g.l2_normalize_rows(p[0]);
    auto s = g.softmax_rows(p[1]);
    auto d = g.rows_dot(a, s);
    auto c = g.cosine_rows(p[0], p[1]);
    return g.add(g.mean_all(d), g.mean_all(c));
  });
}

TEST_CASE("activation gradients match finite differences away from kinks") {
  Mat X = random_mat(4, 6, 20);
  for (auto& v : X.a)
    if (std::fabs(v) < 0.05) v += 0.1;
  check_fd({X, Mat::scalar(0.3)}, [](ad::Graph& g, const std::vector<ad::Var>& p) {
    auto r = g.activation(p[0], ad::Act::relu);
    auto e = g.activation(p[0], ad::Act::elu);
    auto pr = g.activation(p[0], ad::Act::prelu, p[1]);
    auto l = g.leaky_relu(p[0], 0.2);
    return g.mean_all(g.add(g.add(r, e), g.add(pr, l)));
  });
}

TEST_CASE("scalar nonlinearity gradients match finite differences") {
  Mat X = random_mat(3, 4, 21, 0.2, 2.0);
  check_fd({X}, [](ad::Graph& g, const std::vector<ad::Var>& p) {
    auto s = g.sigmoid(p[0]);
    auto lg = g.log_(p[0]);
    auto ex = g.exp_(g.affine(p[0], -0.5, 0.0));
    auto pw = g.pow_clamped(p[0], 2.5);
    return g.mean_all(g.add(g.add(s, lg), g.add(ex, pw)));
  });
}

TEST_CASE("kl_rowmean value and gradient") {
  Mat P = Mat::from_rows({{1.0, 0.0}, {0.5, 0.5}});
  {
    ad::Graph g;
    auto q = g.constant(Mat::from_rows({{0.5, 0.5}, {0.5, 0.5}}));
    auto kl = g.kl_rowmean(P, q);
    CHECK(g.val(kl)(0, 0) == doctest::Approx(0.5 * std::log(2.0)).epsilon(1e-14));
  }
  check_fd({random_mat(2, 2, 22)}, [P](ad::Graph& g, const std::vector<ad::Var>& p) {
    return g.kl_rowmean(P, g.softmax_rows(p[0]));
  });
}

TEST_CASE("detach blocks gradient flow") {
  Mat X = random_mat(2, 3, 23);
  ad::Graph g;
  auto x = g.param(&X, "x");
  auto loss = g.mean_all(g.hadamard(g.detach(x), g.constant(random_mat(2, 3, 24))));
  g.backward(loss);
  Mat grd = g.grad_of(x);
  for (double v : grd.a) CHECK(v == 0.0);
}

TEST_CASE("gradients accumulate when a node feeds multiple consumers") {
  Mat X = Mat::scalar(3.0);
  ad::Graph g;
  auto x = g.param(&X, "x");
  auto loss = g.add(x, x);
  g.backward(loss);
  CHECK(g.grad_of(x)(0, 0) == 2.0);
}

TEST_CASE("backward rejects non-scalar losses and invalid handles") {
  ad::Graph g;
  auto x = g.constant(random_mat(2, 2, 25));
  CHECK_THROWS_AS(g.backward(x), stag::ValidationError);
  CHECK_THROWS_AS(g.val(ad::Var{}), stag::ValidationError);
}
