#pragma once

#include <filesystem>
#include <vector>

#include "stag/codebook.hpp"
#include "stag/mat.hpp"
#include "stag/rng.hpp"

namespace stag {

// Two-layer bottleneck gate over a frozen representation:
//   gate = sigmoid(W2 relu(W1 z + b1) + b2),  z_p = gate (elementwise*) z.
// Initialized so the gate starts near all-ones and z_p starts near z.
struct PromptNetParams {
  Mat w1;  // bottleneck_dim x input_dim
  Mat b1;  // 1 x bottleneck_dim
  Mat w2;  // input_dim x bottleneck_dim
  Mat b2;  // 1 x input_dim

  int input_dim() const { return w1.cols; }
  int bottleneck_dim() const { return w1.rows; }
  void validate() const;

  static PromptNetParams init(int input_dim, int bottleneck_dim, Rng& rng);
  // Default bottleneck: input_dim / 4, at least 1.
  static PromptNetParams init(int input_dim, Rng& rng);
};

struct PromptTuneConfig {
  double beta_p = 1.0;   // commitment weight
  double tau_p = 0.5;    // class-contrastive temperature
  double tau_sa = 0.1;   // quantization temperature for the commitment term
  double learning_rate = 1e-2;
  int steps = 100;
  uint64_t seed = 1;

  void validate() const;
};

// z_p rows for a batch of frozen z_f rows.
Mat prompt_forward(const Mat& z, const PromptNetParams& p);

// beta_p * mean_i (1 - cos(z_p_i, z_q_i)); gradient-free helper, z_q already
// treated as constant by the caller.
double prompt_commit_loss(const Mat& z_p, const Mat& z_q, double beta_p);

// -(1/n) sum_i sum_j theta(c_i, j) log softmax_j(cos(z_p_i, e_j) / tau_p)
// where theta(c, j) = cos(e_c, e_j) over class-codebook embeddings and c_i is
// the label of row i.
double weighted_class_contrastive(const Mat& z_p, const std::vector<int>& labels, const ClassCodebook& cc,
                                  double tau_p);

// Trains only the prompt net (everything else already frozen upstream):
// objective = commitment against full-codebook soft quantization of z_p plus
// the weighted class contrastive. labels index into cc.class_names.
PromptNetParams tune_prompt(const Mat& support_zf, const std::vector<int>& labels, const Codebook& cb,
                            const ClassCodebook& cc, const PromptTuneConfig& cfg);

// argmax_c cos(z, e_c); exact ties take the lowest class index.
int classify_by_class_codebook(const Mat& z_row, const ClassCodebook& cc);

// Directory layout: prompt.f32 (w1|b1|w2|b2 concatenated) + prompt_config.json.
void save_prompt(const PromptNetParams& p, const PromptTuneConfig& cfg, const std::filesystem::path& dir);
std::pair<PromptNetParams, PromptTuneConfig> load_prompt(const std::filesystem::path& dir);

}  // namespace stag
