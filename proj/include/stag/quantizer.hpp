#pragma once

#include <string>
#include <vector>

#include "stag/codebook.hpp"
#include "stag/mat.hpp"

namespace stag {

struct QuantizerConfig {
  double tau_sa = 0.1;    // soft-assignment temperature
  double beta = 1.0;      // commitment weight
  int top_k = 13;         // tokens emitted per node
  bool hard_mode = false; // quantize to the single best codeword instead of the mixture

  void validate(int codebook_size) const;
};

// attn[i] = softmax_k(cos(Z_i, E_k) / tau_sa). Rows of Z and codebook rows
// must be nonzero.
Mat soft_assign(const Mat& Z, const Codebook& cb, double tau_sa);

// One-hot rows selecting the highest-cosine codeword; ties take the lowest
// index.
Mat hard_assign(const Mat& Z, const Codebook& cb);

// z_q rows = attn * E.
Mat quantize(const Mat& attn, const Codebook& cb);

// beta * mean_i (1 - cos(z_f_i, z_q_i)). beta must lie in (0, 2].
double commitment_loss(const Mat& z_f, const Mat& z_q, double beta);

// mean_i KL(attn_p_i || attn_q_i). Zero mass in q where p has mass is an
// error; zero entries of p contribute nothing.
double kl_alignment_loss(const Mat& attn_p, const Mat& attn_q);

// Indices of the k largest entries, sorted by descending value with ties
// broken toward the lower index.
std::vector<int> top_k_indices(const Mat& attn_row, int k);

std::vector<std::string> top_k_tokens(const Mat& attn_row, const Codebook& cb, int k);

// Highest-cosine codeword index for one row; ties take the lowest index.
int nearest_codeword(const Mat& z_row, const Codebook& cb);

}  // namespace stag
