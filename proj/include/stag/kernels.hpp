#pragma once

#include "stag/mat.hpp"

// Dense kernels used by the model. The default entry points are
// OpenMP-parallel over rows/output elements with a fixed per-element
// accumulation order, so results are bit-identical across thread counts.
// stag::kernels::serial holds independently written naive loops kept as a
// reference; tests assert exact equality between the two and
// tools/bench_kernels compares their throughput.
namespace stag::kernels {

// C = op(A) * op(B) where op transposes when the flag is set. ta && tb is not
// supported (never needed, rejected).
void matmul(const Mat& A, bool ta, const Mat& B, bool tb, Mat& C);

// out[i] = X[i] / ||X[i]||_2. A zero-norm row is a ValidationError: callers
// rely on degenerate inputs surfacing instead of being smoothed over.
void l2_normalize_rows(const Mat& X, Mat& out);

// Row-wise softmax with max subtraction.
void softmax_rows(const Mat& S, Mat& out);

// C[i][k] = cos(A_i, B_k). Zero-norm rows raise ValidationError.
void cosine_matrix(const Mat& A, const Mat& B, Mat& C);

// attn = softmax_rows(cosine_matrix(Z, E) / tau).
void soft_assign_batch(const Mat& Z, const Mat& E, double tau, Mat& attn);

// out = attn * E.
void quantize_rows(const Mat& attn, const Mat& E, Mat& out);

namespace serial {
void matmul(const Mat& A, bool ta, const Mat& B, bool tb, Mat& C);
void l2_normalize_rows(const Mat& X, Mat& out);
void softmax_rows(const Mat& S, Mat& out);
void cosine_matrix(const Mat& A, const Mat& B, Mat& C);
void soft_assign_batch(const Mat& Z, const Mat& E, double tau, Mat& attn);
void quantize_rows(const Mat& attn, const Mat& E, Mat& out);
}  // namespace serial

}  // namespace stag::kernels
