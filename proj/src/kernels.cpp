#include "stag/kernels.hpp"

#include <cmath>
#include <vector>

namespace stag::kernels {

namespace {

void check_matmul_shapes(const Mat& A, bool ta, const Mat& B, bool tb, int& m, int& n, int& k) {
  if (ta && tb) throw ValidationError("matmul: ta && tb unsupported");
  m = ta ? A.cols : A.rows;
  k = ta ? A.rows : A.cols;
  int kb = tb ? B.cols : B.rows;
  n = tb ? B.rows : B.cols;
  if (k != kb)
    throw ValidationError("matmul: inner dimensions disagree (" + shape_str(A) + (ta ? "^T" : "") + " * " +
                          shape_str(B) + (tb ? "^T" : "") + ")");
}

// Norms computed up front (and validated outside any parallel region) so the
// division pass is embarrassingly parallel.
std::vector<double> row_norms_checked(const Mat& X, const char* who) {
  std::vector<double> norms(X.rows);
  for (int i = 0; i < X.rows; ++i) {
    norms[i] = X.row_norm(i);
    if (norms[i] == 0.0) throw ValidationError(std::string(who) + ": zero-norm row " + std::to_string(i));
    if (!std::isfinite(norms[i])) throw RuntimeFailure(std::string(who) + ": non-finite row " + std::to_string(i));
  }
  return norms;
}

inline void softmax_row(const double* s, double* y, int n) {
  double mx = s[0];
  for (int j = 1; j < n; ++j) mx = std::max(mx, s[j]);
  double z = 0.0;
  for (int j = 0; j < n; ++j) {
    y[j] = std::exp(s[j] - mx);
    z += y[j];
  }
  for (int j = 0; j < n; ++j) y[j] /= z;
}

}  // namespace

void matmul(const Mat& A, bool ta, const Mat& B, bool tb, Mat& C) {
  int m, n, k;
  check_matmul_shapes(A, ta, B, tb, m, n, k);
  C = Mat(m, n);
  if (!ta && !tb) {
#pragma omp parallel for schedule(static)
    for (int i = 0; i < m; ++i) {
      const double* ai = A[i];
      double* ci = C[i];
      for (int j = 0; j < n; ++j) {
        double s = 0.0;
        for (int p = 0; p < k; ++p) s += ai[p] * B(p, j);
        ci[j] = s;
      }
    }
  } else if (!ta && tb) {
#pragma omp parallel for schedule(static)
    for (int i = 0; i < m; ++i) {
      const double* ai = A[i];
      double* ci = C[i];
      for (int j = 0; j < n; ++j) {
        const double* bj = B[j];
        double s = 0.0;
        for (int p = 0; p < k; ++p) s += ai[p] * bj[p];
        ci[j] = s;
      }
    }
  } else {  // ta && !tb
#pragma omp parallel for schedule(static)
    for (int i = 0; i < m; ++i) {
      double* ci = C[i];
      for (int j = 0; j < n; ++j) {
        double s = 0.0;
        for (int p = 0; p < k; ++p) s += A(p, i) * B(p, j);
        ci[j] = s;
      }
    }
  }
}

void l2_normalize_rows(const Mat& X, Mat& out) {
  auto norms = row_norms_checked(X, "l2_normalize_rows");
  out = Mat(X.rows, X.cols);
#pragma omp parallel for schedule(static)
  for (int i = 0; i < X.rows; ++i) {
    const double* xi = X[i];
    double* yi = out[i];
    double norm = norms[i];
    for (int j = 0; j < X.cols; ++j) yi[j] = xi[j] / norm;
  }
}

void softmax_rows(const Mat& S, Mat& out) {
  if (S.cols == 0) throw ValidationError("softmax_rows: empty rows");
  out = Mat(S.rows, S.cols);
#pragma omp parallel for schedule(static)
  for (int i = 0; i < S.rows; ++i) softmax_row(S[i], out[i], S.cols);
}

void cosine_matrix(const Mat& A, const Mat& B, Mat& C) {
  if (A.cols != B.cols) throw ValidationError("cosine_matrix: dimension mismatch");
  Mat An, Bn;
  l2_normalize_rows(A, An);
  l2_normalize_rows(B, Bn);
  matmul(An, false, Bn, true, C);
}

void soft_assign_batch(const Mat& Z, const Mat& E, double tau, Mat& attn) {
  if (tau <= 0.0) throw ValidationError("soft_assign: tau must be > 0");
  Mat C;
  cosine_matrix(Z, E, C);
  for (double& v : C.a) v /= tau;
  softmax_rows(C, attn);
}

void quantize_rows(const Mat& attn, const Mat& E, Mat& out) { matmul(attn, false, E, false, out); }

namespace serial {

void matmul(const Mat& A, bool ta, const Mat& B, bool tb, Mat& C) {
  int m, n, k;
  check_matmul_shapes(A, ta, B, tb, m, n, k);
  C = Mat(m, n);
  for (int i = 0; i < m; ++i)
    for (int j = 0; j < n; ++j) {
      double s = 0.0;
      for (int p = 0; p < k; ++p) {
        double av = ta ? A(p, i) : A(i, p);
        double bv = tb ? B(j, p) : B(p, j);
        s += av * bv;
      }
      C(i, j) = s;
    }
}

void l2_normalize_rows(const Mat& X, Mat& out) {
  auto norms = row_norms_checked(X, "l2_normalize_rows");
  out = Mat(X.rows, X.cols);
  for (int i = 0; i < X.rows; ++i)
    for (int j = 0; j < X.cols; ++j) out(i, j) = X(i, j) / norms[i];
}

void softmax_rows(const Mat& S, Mat& out) {
  if (S.cols == 0) throw ValidationError("softmax_rows: empty rows");
  out = Mat(S.rows, S.cols);
  for (int i = 0; i < S.rows; ++i) softmax_row(S[i], out[i], S.cols);
}

void cosine_matrix(const Mat& A, const Mat& B, Mat& C) {
  if (A.cols != B.cols) throw ValidationError("cosine_matrix: dimension mismatch");
  Mat An, Bn;
  l2_normalize_rows(A, An);
  l2_normalize_rows(B, Bn);
  matmul(An, false, Bn, true, C);
}

void soft_assign_batch(const Mat& Z, const Mat& E, double tau, Mat& attn) {
  if (tau <= 0.0) throw ValidationError("soft_assign: tau must be > 0");
  Mat C;
  cosine_matrix(Z, E, C);
  for (double& v : C.a) v /= tau;
  softmax_rows(C, attn);
}

void quantize_rows(const Mat& attn, const Mat& E, Mat& out) { matmul(attn, false, E, false, out); }

}  // namespace serial

}  // namespace stag::kernels
