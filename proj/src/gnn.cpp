#include "stag/gnn.hpp"

#include <algorithm>
#include <cmath>

#include "stag/kernels.hpp"

namespace stag {

ad::Act act_from_string(const std::string& s) {
  if (s == "elu") return ad::Act::elu;
  if (s == "prelu") return ad::Act::prelu;
  if (s == "relu") return ad::Act::relu;
  throw ValidationError("unknown activation '" + s + "' (expected elu, prelu or relu)");
}

std::string act_to_string(ad::Act a) {
  switch (a) {
    case ad::Act::elu: return "elu";
    case ad::Act::prelu: return "prelu";
    case ad::Act::relu: return "relu";
  }
  throw ValidationError("unknown activation enum");
}

namespace {

Mat glorot(int rows, int cols, Rng& rng) {
  double limit = std::sqrt(6.0 / (rows + cols));
  Mat m(rows, cols);
  for (double& v : m.a) v = rng.uniform(-limit, limit);
  return m;
}

GatLayerParams init_layer(int in_dim, int head_out, int heads, Rng& rng) {
  GatLayerParams layer;
  for (int h = 0; h < heads; ++h) {
    layer.W.push_back(glorot(head_out, in_dim, rng));
    layer.a_src.push_back(glorot(head_out, 1, rng));
    layer.a_dst.push_back(glorot(head_out, 1, rng));
  }
  layer.prelu_slope = Mat::scalar(0.25);
  return layer;
}

std::vector<GatLayerParams> init_stack(int in_dim, int hidden_dim, int out_dim, int num_layers, int num_heads,
                                       Rng& rng) {
  if (num_layers < 1) throw ValidationError("gnn: num_layers must be >= 1");
  if (num_heads < 1) throw ValidationError("gnn: num_heads must be >= 1");
  if (num_layers > 1 && hidden_dim % num_heads != 0)
    throw ValidationError("gnn: hidden_dim must be divisible by num_heads");
  std::vector<GatLayerParams> layers;
  int cur = in_dim;
  for (int l = 0; l < num_layers - 1; ++l) {
    layers.push_back(init_layer(cur, hidden_dim / num_heads, num_heads, rng));
    cur = hidden_dim;
  }
  layers.push_back(init_layer(cur, out_dim, num_heads, rng));
  return layers;
}

}  // namespace

EncoderParams EncoderParams::init(int input_dim, int hidden_dim, int num_layers, int num_heads, ad::Act act,
                                  Rng& rng) {
  if (input_dim < 1 || hidden_dim < 1) throw ValidationError("gnn: dimensions must be positive");
  EncoderParams p;
  p.input_dim = input_dim;
  p.hidden_dim = hidden_dim;
  p.num_heads = num_heads;
  p.activation = act;
  p.layers = init_stack(input_dim, hidden_dim, hidden_dim, num_layers, num_heads, rng);
  return p;
}

DecoderParams DecoderParams::init(int dim, int hidden_dim, int num_layers, int num_heads, ad::Act act, Rng& rng) {
  if (dim < 1 || hidden_dim < 1) throw ValidationError("gnn: dimensions must be positive");
  DecoderParams p;
  p.dim = dim;
  p.hidden_dim = hidden_dim;
  p.num_heads = num_heads;
  p.activation = act;
  p.layers = init_stack(dim, hidden_dim, dim, num_layers, num_heads, rng);
  return p;
}

GraphPlan GraphPlan::build(int num_nodes, const std::vector<std::pair<int, int>>& undirected_edges) {
  if (num_nodes < 1) throw ValidationError("GraphPlan: need at least one node");
  std::vector<std::pair<int, int>> directed;  // (dst, src), sorted
  directed.reserve(undirected_edges.size() * 2 + num_nodes);
  for (const auto& [u, v] : undirected_edges) {
    if (u < 0 || u >= num_nodes || v < 0 || v >= num_nodes)
      throw ValidationError("GraphPlan: edge endpoint out of range");
    directed.emplace_back(v, u);
    directed.emplace_back(u, v);
  }
  for (int i = 0; i < num_nodes; ++i) directed.emplace_back(i, i);
  std::sort(directed.begin(), directed.end());
  directed.erase(std::unique(directed.begin(), directed.end()), directed.end());

  GraphPlan plan;
  plan.num_nodes = num_nodes;
  plan.src.reserve(directed.size());
  plan.dst.reserve(directed.size());
  for (const auto& [d, s] : directed) {
    plan.dst.push_back(d);
    plan.src.push_back(s);
  }
  plan.by_dst.offsets.assign(num_nodes + 1, 0);
  for (int d : plan.dst) ++plan.by_dst.offsets[d + 1];
  for (int i = 0; i < num_nodes; ++i) plan.by_dst.offsets[i + 1] += plan.by_dst.offsets[i];
  return plan;
}

namespace gnn {

namespace {

constexpr double kAttnLeak = 0.2;

ad::Var head_forward(ad::Graph& g, const GraphPlan& plan, ad::Var X, ad::Var W, ad::Var a_src, ad::Var a_dst) {
  ad::Var G = g.matmul(X, W, false, true);                    // n x out
  ad::Var s_src = g.matmul(G, a_src);                         // n x 1
  ad::Var s_dst = g.matmul(G, a_dst);                         // n x 1
  ad::Var e = g.add(g.gather_rows(s_src, plan.src), g.gather_rows(s_dst, plan.dst));
  ad::Var alpha = g.segment_softmax(g.leaky_relu(e, kAttnLeak), plan.by_dst);
  ad::Var msgs = g.col_scale(g.gather_rows(G, plan.src), alpha);
  return g.segment_sum(msgs, plan.by_dst);
}

}  // namespace

GatStackVars register_gat_stack(ad::Graph& g, std::vector<GatLayerParams>& layers, ad::Act act,
                                const std::string& prefix, bool trainable) {
  GatStackVars vars;
  for (size_t l = 0; l < layers.size(); ++l) {
    GatLayerParams& layer = layers[l];
    std::string base = prefix + ".l" + std::to_string(l);
    GatStackVars::LayerVars lv;
    for (int h = 0; h < layer.heads(); ++h) {
      std::string hb = base + ".h" + std::to_string(h);
      lv.W.push_back(trainable ? g.param(&layer.W[h], hb + ".w") : g.constant(layer.W[h]));
      lv.a_src.push_back(trainable ? g.param(&layer.a_src[h], hb + ".a_src") : g.constant(layer.a_src[h]));
      lv.a_dst.push_back(trainable ? g.param(&layer.a_dst[h], hb + ".a_dst") : g.constant(layer.a_dst[h]));
    }
    // The slope only trains where an activation actually uses it.
    bool slope_used = act == ad::Act::prelu && l + 1 < layers.size();
    lv.prelu = (trainable && slope_used) ? g.param(&layer.prelu_slope, base + ".prelu")
                                         : g.constant(layer.prelu_slope);
    vars.layers.push_back(std::move(lv));
  }
  return vars;
}

ad::Var build_gat_stack(ad::Graph& g, const GraphPlan& plan, ad::Var X, const GatStackVars& vars, ad::Act act) {
  if (g.val(X).rows != plan.num_nodes) throw ValidationError("build_gat_stack: feature rows disagree with plan");
  if (vars.layers.empty()) throw ValidationError("build_gat_stack: no layers");
  ad::Var cur = X;
  for (size_t l = 0; l < vars.layers.size(); ++l) {
    const auto& lv = vars.layers[l];
    bool last = (l + 1 == vars.layers.size());
    std::vector<ad::Var> heads;
    for (size_t h = 0; h < lv.W.size(); ++h)
      heads.push_back(head_forward(g, plan, cur, lv.W[h], lv.a_src[h], lv.a_dst[h]));
    if (last) {
      cur = g.mean_of(heads);  // no activation on the output layer
    } else {
      ad::Var cat = g.concat_cols(heads);
      cur = (act == ad::Act::prelu) ? g.activation(cat, act, lv.prelu) : g.activation(cat, act);
    }
  }
  return cur;
}

FusionVars register_fusion(ad::Graph& g, Mat& w_f, Mat& phi_raw, Mat& psi_raw, bool trainable) {
  FusionVars vars;
  vars.w_f = trainable ? g.param(&w_f, "fusion.w_f") : g.constant(w_f);
  vars.phi_raw = trainable ? g.param(&phi_raw, "fusion.phi_raw") : g.constant(phi_raw);
  vars.psi_raw = trainable ? g.param(&psi_raw, "fusion.psi_raw") : g.constant(psi_raw);
  return vars;
}

ad::Var build_fusion(ad::Graph& g, ad::Var Ze, ad::Var X, const FusionVars& vars, bool use_semantic_residual) {
  ad::Var proj = g.l2_normalize_rows(g.matmul(Ze, vars.w_f, false, true));
  ad::Var structural = g.scale_by(proj, g.sigmoid(vars.phi_raw));
  if (!use_semantic_residual) return structural;
  ad::Var semantic = g.scale_by(g.l2_normalize_rows(X), g.sigmoid(vars.psi_raw));
  return g.add(structural, semantic);
}

}  // namespace gnn

Mat gnn_encode(EncoderParams& enc, const GraphPlan& plan, const Mat& X) {
  if (X.cols != enc.input_dim) throw ValidationError("gnn_encode: feature dim mismatch");
  ad::Graph g;
  auto vars = gnn::register_gat_stack(g, enc.layers, enc.activation, "encoder", false);
  ad::Var out = gnn::build_gat_stack(g, plan, g.constant(X), vars, enc.activation);
  return g.val(out);
}

Mat gnn_decode(DecoderParams& dec, const GraphPlan& plan, const Mat& Zq) {
  if (Zq.cols != dec.dim) throw ValidationError("gnn_decode: input dim mismatch");
  ad::Graph g;
  auto vars = gnn::register_gat_stack(g, dec.layers, dec.activation, "decoder", false);
  ad::Var out = gnn::build_gat_stack(g, plan, g.constant(Zq), vars, dec.activation);
  return g.val(out);
}

Mat fuse_rows(const Mat& Ze, const Mat& X, const FusionParams& fp) {
  if (fp.phi <= 0.0 || fp.phi > 1.0 || fp.psi <= 0.0 || fp.psi > 1.0)
    throw ValidationError("fuse: phi and psi must lie in (0, 1]");
  if (fp.w_f.cols != Ze.cols) throw ValidationError("fuse: W_f columns must match encoder output dim");
  if (fp.w_f.rows != X.cols) throw ValidationError("fuse: W_f rows must match feature dim");
  if (Ze.rows != X.rows) throw ValidationError("fuse: row count mismatch");
  Mat proj;
  kernels::matmul(Ze, false, fp.w_f, true, proj);
  Mat proj_n, x_n;
  kernels::l2_normalize_rows(proj, proj_n);  // zero-norm rows raise here
  kernels::l2_normalize_rows(X, x_n);
  Mat out(X.rows, X.cols);
  for (int i = 0; i < out.rows; ++i)
    for (int j = 0; j < out.cols; ++j) out(i, j) = fp.phi * proj_n(i, j) + fp.psi * x_n(i, j);
  return out;
}

Mat fuse(const Mat& z_e, const Mat& x, const FusionParams& fp) {
  if (z_e.rows != 1 || x.rows != 1) throw ValidationError("fuse: expects single rows");
  return fuse_rows(z_e, x, fp);
}

}  // namespace stag
