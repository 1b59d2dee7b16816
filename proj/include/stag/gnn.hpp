#pragma once

#include <string>
#include <vector>

#include "stag/ad.hpp"
#include "stag/rng.hpp"
#include "stag/tag.hpp"

namespace stag {

ad::Act act_from_string(const std::string& s);
std::string act_to_string(ad::Act a);

// One graph-attention layer: per head, a linear map W plus the two halves of
// the additive attention vector. prelu_slope is used only when the stack's
// activation is prelu and the layer output is activated.
struct GatLayerParams {
  std::vector<Mat> W;      // head: out_dim x in_dim
  std::vector<Mat> a_src;  // head: out_dim x 1
  std::vector<Mat> a_dst;  // head: out_dim x 1
  Mat prelu_slope;         // 1x1
  int heads() const { return static_cast<int>(W.size()); }
};

// Hidden layers concatenate heads (head width = hidden_dim / heads) and apply
// the activation; the final layer averages full-width heads with no
// activation.
struct EncoderParams {
  std::vector<GatLayerParams> layers;
  int input_dim = 0;
  int hidden_dim = 0;
  int num_heads = 1;
  ad::Act activation = ad::Act::elu;

  static EncoderParams init(int input_dim, int hidden_dim, int num_layers, int num_heads, ad::Act act, Rng& rng);
};

// Decoder mirrors the encoder but maps quantized features back to the input
// feature space.
struct DecoderParams {
  std::vector<GatLayerParams> layers;
  int dim = 0;         // input and output width
  int hidden_dim = 0;  // used when num_layers > 1
  int num_heads = 1;
  ad::Act activation = ad::Act::elu;

  static DecoderParams init(int dim, int hidden_dim, int num_layers, int num_heads, ad::Act act, Rng& rng);
};

// Constrained fusion parameters: phi and psi live in (0, 1].
struct FusionParams {
  Mat w_f;  // feature_dim x hidden_dim
  double phi = 0.5;
  double psi = 0.5;
};

// Message-passing plan for one subgraph: the undirected edge list expanded to
// both directions plus a self-loop per node, sorted by destination so
// attention normalizes over contiguous segments.
struct GraphPlan {
  int num_nodes = 0;
  std::vector<int> src;
  std::vector<int> dst;
  ad::SegmentPlan by_dst;

  static GraphPlan build(int num_nodes, const std::vector<std::pair<int, int>>& undirected_edges);
  static GraphPlan build(const Subgraph& sg) { return build(static_cast<int>(sg.node_ids.size()), sg.local_edges); }
};

// Per-node outputs of the full frozen pipeline.
struct EncoderBundle {
  Mat z_e;   // n x hidden_dim
  Mat z_f;   // n x feature_dim
  Mat attn;  // n x K
  Mat z_q;   // n x feature_dim
  Mat z_d;   // n x feature_dim
};

namespace gnn {

// Tape handles for a stack's parameters. Registered once per tape and reused
// by every branch that runs the stack, so each parameter owns a single node
// and its gradient accumulates in one place.
struct GatStackVars {
  struct LayerVars {
    std::vector<ad::Var> W, a_src, a_dst;
    ad::Var prelu;
  };
  std::vector<LayerVars> layers;
};

GatStackVars register_gat_stack(ad::Graph& g, std::vector<GatLayerParams>& layers, ad::Act act,
                                const std::string& prefix, bool trainable);

// Runs the stack. X must have plan.num_nodes rows.
ad::Var build_gat_stack(ad::Graph& g, const GraphPlan& plan, ad::Var X, const GatStackVars& vars, ad::Act act);

struct FusionVars {
  ad::Var w_f, phi_raw, psi_raw;
};

FusionVars register_fusion(ad::Graph& g, Mat& w_f, Mat& phi_raw, Mat& psi_raw, bool trainable);

// z_f rows = sigmoid(phi_raw) * normalize(Ze W_f^T) + sigmoid(psi_raw) *
// normalize(X). With use_semantic_residual off, only the projected structural
// half is kept.
ad::Var build_fusion(ad::Graph& g, ad::Var Ze, ad::Var X, const FusionVars& vars, bool use_semantic_residual);

}  // namespace gnn

// Plain forward passes (no gradients) used by inference.
Mat gnn_encode(EncoderParams& enc, const GraphPlan& plan, const Mat& X);
Mat gnn_decode(DecoderParams& dec, const GraphPlan& plan, const Mat& Zq);

// Single-row fusion. Zero-norm projections or features are errors; phi/psi
// must lie in (0, 1].
Mat fuse(const Mat& z_e, const Mat& x, const FusionParams& fp);
// Row-batched variant.
Mat fuse_rows(const Mat& Ze, const Mat& X, const FusionParams& fp);

}  // namespace stag
