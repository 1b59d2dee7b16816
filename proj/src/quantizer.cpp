#include "stag/quantizer.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "stag/kernels.hpp"

namespace stag {

void QuantizerConfig::validate(int codebook_size) const {
  if (tau_sa <= 0.0) throw ValidationError("quantizer: tau_sa must be > 0");
  if (beta <= 0.0 || beta > 2.0) throw ValidationError("quantizer: beta must lie in (0, 2]");
  if (top_k < 1) throw ValidationError("quantizer: top_k must be >= 1");
  if (codebook_size > 0 && top_k > codebook_size)
    throw ValidationError("quantizer: top_k exceeds codebook size");
}

Mat soft_assign(const Mat& Z, const Codebook& cb, double tau_sa) {
  cb.validate();
  if (Z.cols != cb.dim()) throw ValidationError("soft_assign: dim mismatch with codebook");
  Mat attn;
  kernels::soft_assign_batch(Z, cb.embeddings, tau_sa, attn);
  return attn;
}

Mat hard_assign(const Mat& Z, const Codebook& cb) {
  cb.validate();
  if (Z.cols != cb.dim()) throw ValidationError("hard_assign: dim mismatch with codebook");
  Mat cos;
  kernels::cosine_matrix(Z, cb.embeddings, cos);
  Mat out(Z.rows, cb.size());
  for (int i = 0; i < Z.rows; ++i) {
    int best = 0;
    for (int k = 1; k < cb.size(); ++k)
      if (cos(i, k) > cos(i, best)) best = k;  // strict: ties keep the lower index
    out(i, best) = 1.0;
  }
  return out;
}

Mat quantize(const Mat& attn, const Codebook& cb) {
  cb.validate();
  if (attn.cols != cb.size()) throw ValidationError("quantize: attention width must equal codebook size");
  Mat out;
  kernels::quantize_rows(attn, cb.embeddings, out);
  return out;
}

double commitment_loss(const Mat& z_f, const Mat& z_q, double beta) {
  if (beta <= 0.0 || beta > 2.0) throw ValidationError("commitment_loss: beta must lie in (0, 2]");
  if (!z_f.same_shape(z_q)) throw ValidationError("commitment_loss: shape mismatch");
  if (z_f.rows == 0) throw ValidationError("commitment_loss: empty input");
  Mat fn, qn;
  kernels::l2_normalize_rows(z_f, fn);
  kernels::l2_normalize_rows(z_q, qn);
  double total = 0.0;
  for (int i = 0; i < z_f.rows; ++i) {
    double c = 0.0;
    for (int j = 0; j < z_f.cols; ++j) c += fn(i, j) * qn(i, j);
    total += 1.0 - c;
  }
  return beta * total / z_f.rows;
}

double kl_alignment_loss(const Mat& attn_p, const Mat& attn_q) {
  if (!attn_p.same_shape(attn_q)) throw ValidationError("kl_alignment_loss: shape mismatch");
  if (attn_p.rows == 0) throw ValidationError("kl_alignment_loss: empty input");
  double total = 0.0;
  for (int i = 0; i < attn_p.rows; ++i)
    for (int j = 0; j < attn_p.cols; ++j) {
      double p = attn_p(i, j);
      if (p < 0.0) throw ValidationError("kl_alignment_loss: negative mass in p");
      if (p == 0.0) continue;
      double q = attn_q(i, j);
      if (q <= 0.0) throw RuntimeFailure("kl_alignment_loss: zero mass in q where p has mass");
      total += p * (std::log(p) - std::log(q));
    }
  return total / attn_p.rows;
}

std::vector<int> top_k_indices(const Mat& attn_row, int k) {
  if (attn_row.rows != 1) throw ValidationError("top_k_indices: expects a single row");
  int K = attn_row.cols;
  if (k < 1 || k > K) throw ValidationError("top_k_indices: k out of range");
  std::vector<int> order(K);
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](int a, int b) {
    if (attn_row(0, a) != attn_row(0, b)) return attn_row(0, a) > attn_row(0, b);
    return a < b;  // exact ties resolve to the lower index
  });
  order.resize(k);
  return order;
}

std::vector<std::string> top_k_tokens(const Mat& attn_row, const Codebook& cb, int k) {
  if (attn_row.cols != cb.size()) throw ValidationError("top_k_tokens: attention width must equal codebook size");
  std::vector<std::string> out;
  for (int idx : top_k_indices(attn_row, k)) out.push_back(cb.tokens[idx]);
  return out;
}

int nearest_codeword(const Mat& z_row, const Codebook& cb) {
  if (z_row.rows != 1) throw ValidationError("nearest_codeword: expects a single row");
  Mat onehot = hard_assign(z_row, cb);
  for (int k = 0; k < onehot.cols; ++k)
    if (onehot(0, k) == 1.0) return k;
  throw RuntimeFailure("nearest_codeword: no selection");
}

}  // namespace stag
