#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <cmath>
#include <cstring>

#include "doctest.h"
#include "stag/kernels.hpp"
#include "stag/rng.hpp"

using stag::Mat;
namespace K = stag::kernels;

namespace {

bool bytes_equal(const Mat& a, const Mat& b) {
  return a.rows == b.rows && a.cols == b.cols &&
         std::memcmp(a.a.data(), b.a.data(), a.size() * sizeof(double)) == 0;
}

Mat random_mat(int r, int c, uint64_t seed) {
  Mat m(r, c);
  uint64_t s = seed;
  for (auto& v : m.a) {
    s = stag::splitmix64(s);
    v = static_cast<double>(s >> 11) * 0x1.0p-53 * 4.0 - 2.0;
    if (v == 0.0) v = 0.25;
  }
  return m;
}

}  // namespace

TEST_CASE("matmul matches hand-computed products for every transpose mode") {
  Mat A = Mat::from_rows({{1, 2, 3}, {4, 5, 6}});
  Mat B = Mat::from_rows({{7, 8}, {9, 10}, {11, 12}});
  Mat C;
  K::matmul(A, false, B, false, C);
  CHECK(C.rows == 2);
  CHECK(C.cols == 2);
  CHECK(C(0, 0) == doctest::Approx(58).epsilon(1e-15));
  CHECK(C(0, 1) == doctest::Approx(64).epsilon(1e-15));
  CHECK(C(1, 0) == doctest::Approx(139).epsilon(1e-15));
  CHECK(C(1, 1) == doctest::Approx(154).epsilon(1e-15));

  // A^T (3x2) * A (2x3) -> 3x3 gram
  Mat G;
  K::matmul(A, true, A, false, G);
  CHECK(G.rows == 3);
  CHECK(G(0, 0) == doctest::Approx(17));
  CHECK(G(2, 2) == doctest::Approx(45));
  CHECK(G(0, 2) == G(2, 0));

  // A (2x3) * A^T -> 2x2
  Mat H;
  K::matmul(A, false, A, true, H);
  CHECK(H(0, 0) == doctest::Approx(14));
  CHECK(H(0, 1) == doctest::Approx(32));
  CHECK(H(1, 1) == doctest::Approx(77));
}

TEST_CASE("matmul rejects shape mismatches and the double-transpose mode") {
  Mat A(2, 3), B(4, 2), C;
  CHECK_THROWS_AS(K::matmul(A, false, B, false, C), stag::ValidationError);
  CHECK_THROWS_AS(K::matmul(A, true, B, true, C), stag::ValidationError);
  Mat ok(3, 4);
  CHECK_NOTHROW(K::matmul(A, false, ok, false, C));
}

TEST_CASE("l2_normalize_rows produces exact unit rows on pythagorean input") {
  Mat X = Mat::from_rows({{3, 4}, {-6, 8}});
  Mat Y;
  K::l2_normalize_rows(X, Y);
  CHECK(Y(0, 0) == 0.6);
  CHECK(Y(0, 1) == 0.8);
  CHECK(Y(1, 0) == -0.6);
  CHECK(Y(1, 1) == 0.8);
}

TEST_CASE("l2_normalize_rows rejects zero rows and propagates non-finite input as failure") {
  Mat X = Mat::from_rows({{1, 2}, {0, 0}});
  Mat Y;
  CHECK_THROWS_AS(K::l2_normalize_rows(X, Y), stag::ValidationError);
  Mat Z = Mat::from_rows({{1, std::numeric_limits<double>::infinity()}});
  CHECK_THROWS_AS(K::l2_normalize_rows(Z, Y), stag::RuntimeFailure);
}

TEST_CASE("softmax_rows matches closed forms and survives large logits") {
  Mat S = Mat::from_rows({{0, 0}, {std::log(2.0), 0}, {1000, 1000}});
  Mat P;
  K::softmax_rows(S, P);
  CHECK(P(0, 0) == doctest::Approx(0.5).epsilon(1e-15));
  CHECK(P(1, 0) == doctest::Approx(2.0 / 3.0).epsilon(1e-12));
  CHECK(P(1, 1) == doctest::Approx(1.0 / 3.0).epsilon(1e-12));
  CHECK(P(2, 0) == doctest::Approx(0.5).epsilon(1e-15));
  for (int i = 0; i < P.rows; ++i) {
    double s = 0;
    for (int j = 0; j < P.cols; ++j) s += P(i, j);
    CHECK(s == doctest::Approx(1.0).epsilon(1e-12));
  }
}

TEST_CASE("cosine_matrix is 1 on identical rows and 0 on orthogonal rows") {
  Mat A = Mat::from_rows({{2, 0}, {0, 5}});
  Mat B = Mat::from_rows({{1, 0}, {0, -3}, {4, 3}});
  Mat C;
  K::cosine_matrix(A, B, C);
  CHECK(C.rows == 2);
  CHECK(C.cols == 3);
  CHECK(C(0, 0) == doctest::Approx(1.0).epsilon(1e-15));
  CHECK(C(0, 1) == doctest::Approx(0.0).epsilon(1e-15));
  CHECK(C(0, 2) == doctest::Approx(0.8).epsilon(1e-15));
  CHECK(C(1, 1) == doctest::Approx(-1.0).epsilon(1e-15));
  CHECK(C(1, 2) == doctest::Approx(0.6).epsilon(1e-15));
}

TEST_CASE("soft_assign_batch composes cosine and a tempered softmax") {
  Mat Z = random_mat(5, 8, 11);
  Mat E = random_mat(6, 8, 22);
  double tau = 0.25;
  Mat attn;
  K::soft_assign_batch(Z, E, tau, attn);
  Mat cosm;
  K::cosine_matrix(Z, E, cosm);
  for (auto& v : cosm.a) v /= tau;
  Mat want;
  K::softmax_rows(cosm, want);
  CHECK(bytes_equal(attn, want));
  CHECK_THROWS_AS(K::soft_assign_batch(Z, E, 0.0, attn), stag::ValidationError);
  CHECK_THROWS_AS(K::soft_assign_batch(Z, E, -1.0, attn), stag::ValidationError);
}

TEST_CASE("quantize_rows mixes codewords by attention weight") {
  Mat attn = Mat::from_rows({{0.25, 0.75}, {1.0, 0.0}});
  Mat E = Mat::from_rows({{2, 0}, {0, 4}});
  Mat out;
  K::quantize_rows(attn, E, out);
  CHECK(out(0, 0) == doctest::Approx(0.5).epsilon(1e-15));
  CHECK(out(0, 1) == doctest::Approx(3.0).epsilon(1e-15));
  CHECK(out(1, 0) == 2.0);
  CHECK(out(1, 1) == 0.0);
}

TEST_CASE("parallel kernels are byte-identical to the serial reference") {
  const int shapes[][2] = {{1, 1}, {3, 7}, {16, 5}, {33, 17}, {64, 24}};
  for (auto [n, d] : shapes) {
    Mat X = random_mat(n, d, 1000 + n * 31 + d);
    Mat E = random_mat(d + 2, d, 7 + n);

    Mat a, b;
    K::l2_normalize_rows(X, a);
    K::serial::l2_normalize_rows(X, b);
    CHECK(bytes_equal(a, b));

    K::softmax_rows(X, a);
    K::serial::softmax_rows(X, b);
    CHECK(bytes_equal(a, b));

    K::cosine_matrix(X, E, a);
    K::serial::cosine_matrix(X, E, b);
    CHECK(bytes_equal(a, b));

    K::soft_assign_batch(X, E, 0.1, a);
    K::serial::soft_assign_batch(X, E, 0.1, b);
    CHECK(bytes_equal(a, b));

    Mat attn;
    K::soft_assign_batch(X, E, 0.5, attn);
    K::quantize_rows(attn, E, a);
    K::serial::quantize_rows(attn, E, b);
    CHECK(bytes_equal(a, b));

    Mat M = random_mat(n, d, 3 * n + d);
    Mat N = random_mat(d, n + 3, 5 * n + d);
    K::matmul(M, false, N, false, a);
    K::serial::matmul(M, false, N, false, b);
    CHECK(bytes_equal(a, b));
    Mat Mt = random_mat(d, n, 13 * n + d);
    K::matmul(Mt, true, N, false, a);
    K::serial::matmul(Mt, true, N, false, b);
    CHECK(bytes_equal(a, b));
    Mat Nt = random_mat(n + 3, d, 17 * n + d);
    K::matmul(M, false, Nt, true, a);
    K::serial::matmul(M, false, Nt, true, b);
    CHECK(bytes_equal(a, b));
  }
}
