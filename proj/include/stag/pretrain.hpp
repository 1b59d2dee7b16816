#pragma once

#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "nlohmann/json.hpp"
#include "stag/codebook.hpp"
#include "stag/gnn.hpp"
#include "stag/quantizer.hpp"
#include "stag/rng.hpp"
#include "stag/tag.hpp"

namespace stag {

struct TrainConfig {
  // objective
  double mask_rate = 0.5;
  double learning_rate = 1e-3;
  double weight_decay = 0.0;
  int epochs = 20;
  int batch_subgraphs = 32;
  int num_neg = 20;
  double tau_c = 0.5;
  double gamma = 2.0;       // SCE sharpening, >= 1
  double lambda_kl = 1.0;   // 0 disables distribution alignment
  QuantizerConfig quantizer;
  uint64_t seed = 1;
  // architecture
  int hidden_dim = 256;
  int num_layers = 3;
  int num_heads = 2;
  int decoder_layers = 1;
  std::string activation = "elu";
  // subgraph sampling
  int num_hops = 2;
  int fanout = 10;
  // ablation switch: drop the normalized-feature residual from fusion
  bool use_fusion = true;

  void validate() const;
  nlohmann::json to_json() const;
  static TrainConfig from_json(const nlohmann::json& j);
  static TrainConfig from_file(const std::filesystem::path& path);
};

// All trainable state. The codebook is deliberately absent: it is frozen and
// receives no gradient.
struct ModelParams {
  EncoderParams encoder;
  DecoderParams decoder;
  Mat w_f;        // feature_dim x hidden_dim
  Mat phi_raw;    // 1x1, fusion weight before sigmoid
  Mat psi_raw;    // 1x1
  Mat mask_token; // 1 x feature_dim
  int feature_dim = 0;

  static ModelParams init(const TrainConfig& cfg, int feature_dim, Rng& rng);
  FusionParams fusion() const;
};

// Checkpoint directory: config.json (architecture + hyperparameters + tensor
// shapes) plus one .f32 file per named parameter.
void save_checkpoint(const ModelParams& model, const TrainConfig& cfg, const std::filesystem::path& dir);
std::pair<ModelParams, TrainConfig> load_checkpoint(const std::filesystem::path& dir);

struct LossComponents {
  double reconstruction = 0.0;
  double contrastive = 0.0;
  double commit_rec = 0.0;
  double commit_contrast = 0.0;
  double kl = 0.0;
  double total = 0.0;
};

// total = 0.5 * (commit_rec + commit_contrast) + reconstruction + contrastive
//         + lambda_kl * kl
double total_loss(const LossComponents& c, double lambda_kl);

// mean_i (1 - cos(X_i, Zd_i))^gamma
double sce_loss(const Mat& X, const Mat& Zd, double gamma);

// InfoNCE over masked nodes: positives are (decoded, original) pairs at the
// same node; negatives are originals of up to num_neg other masked nodes.
double contrastive_loss(const Mat& Zd_masked, const Mat& X_masked, double tau_c, int num_neg, Rng& rng);

// One batch's frozen randomness: subgraphs, mask draws and negative pairs are
// fixed before any gradient work, so the objective is a deterministic function
// of the parameters (finite differences rely on this).
struct StepPlan {
  struct Item {
    Subgraph sg;
    GraphPlan plan;
    std::vector<int> masked_ids;          // local, sorted
    std::vector<int> neg_anchor;          // flattened pairs, position into masked_ids
    std::vector<int> neg_other;
    ad::SegmentPlan negs_by_anchor;       // pairs grouped per anchor
  };
  std::vector<Item> items;
};

StepPlan make_step_plan(const TextAttributedGraph& g, const std::vector<int>& centers, const TrainConfig& cfg,
                        Rng& rng);

struct ObjectiveVars {
  ad::Var total, reconstruction, contrastive, commit_rec, commit_contrast, kl;
  // Per plan item, both branches. Gradient checks need these to evaluate the
  // frozen-target objective the tape differentiates (z_q is a constant inside
  // the commitment terms).
  std::vector<ad::Var> zf_rec, zq_rec, zf_con, zq_con;
};

// Builds the full two-branch objective on the tape. When trainable is false,
// parameters enter as constants (forward evaluation only).
ObjectiveVars build_objective(ad::Graph& g, ModelParams& model, const Codebook& cb, const StepPlan& plan,
                              const TrainConfig& cfg, bool trainable = true);

class AdamW {
 public:
  AdamW(double lr, double weight_decay, double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8);
  // Applies one update to every registered parameter; gradients must already
  // be non-finite-checked by the caller.
  void step(ad::Graph& g);

 private:
  struct Slot {
    Mat m, v;
  };
  double lr_, wd_, beta1_, beta2_, eps_;
  int t_ = 0;
  std::map<std::string, Slot> state_;
};

// One optimizer step over a prepared batch; returns the loss components
// measured before the update.
LossComponents pretrain_step(ModelParams& model, AdamW& opt, const Codebook& cb, const StepPlan& plan,
                             const TrainConfig& cfg);

struct TrainReport {
  std::vector<LossComponents> epochs;
  double wall_seconds = 0.0;
  nlohmann::json config;
  std::string checkpoint_dir;

  nlohmann::json to_json() const;
  std::string to_csv() const;
};

// Full pretraining run: every node serves as a subgraph center once per
// epoch, in a seed-shuffled order. Writes checkpoint + report.json +
// epochs.csv under out_dir.
TrainReport run_pretraining(const TextAttributedGraph& g, const Codebook& cb, const TrainConfig& cfg,
                            const std::filesystem::path& out_dir);

// Frozen-model inference: per-node subgraph pipeline producing z_e, z_f,
// attn, z_q, z_d rows for the requested nodes. Deterministic in (seed, node).
struct NodeEmbedder {
  ModelParams* model;
  const Codebook* cb;
  TrainConfig cfg;
  uint64_t seed = 0;

  EncoderBundle bundle_for(const TextAttributedGraph& g, int node) const;
  // z_f rows for many nodes (parallel across nodes).
  Mat embed_nodes(const TextAttributedGraph& g, const std::vector<int>& nodes) const;
  // Mean z_f over a sampled subgraph around the node.
  Mat embed_subgraph(const TextAttributedGraph& g, int center) const;
  std::vector<std::string> tokens_for(const TextAttributedGraph& g, int node) const;
};

}  // namespace stag
