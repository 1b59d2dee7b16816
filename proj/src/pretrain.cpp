#include "stag/pretrain.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <sstream>

#include "stag/kernels.hpp"
#include "stag/tensor_io.hpp"

namespace stag {

using nlohmann::json;
namespace fs = std::filesystem;

void TrainConfig::validate() const {
  if (mask_rate < 0.0 || mask_rate > 1.0) throw ValidationError("config: mask_rate must lie in [0, 1]");
  if (learning_rate <= 0.0) throw ValidationError("config: learning_rate must be > 0");
  if (weight_decay < 0.0) throw ValidationError("config: weight_decay must be >= 0");
  if (epochs < 1) throw ValidationError("config: epochs must be >= 1");
  if (batch_subgraphs < 1) throw ValidationError("config: batch_subgraphs must be >= 1");
  if (num_neg < 0) throw ValidationError("config: num_neg must be >= 0");
  if (tau_c <= 0.0) throw ValidationError("config: tau_c must be > 0");
  if (gamma < 1.0) throw ValidationError("config: gamma must be >= 1");
  if (lambda_kl < 0.0) throw ValidationError("config: lambda_kl must be >= 0");
  if (hidden_dim < 1 || num_layers < 1 || num_heads < 1 || decoder_layers < 1)
    throw ValidationError("config: architecture dimensions must be positive");
  if (num_layers > 1 && hidden_dim % num_heads != 0)
    throw ValidationError("config: hidden_dim must be divisible by num_heads");
  if (num_hops < 0 || fanout < 0) throw ValidationError("config: sampling parameters must be >= 0");
  act_from_string(activation);
  quantizer.validate(0);
}

json TrainConfig::to_json() const {
  json j;
  j["mask_rate"] = mask_rate;
  j["learning_rate"] = learning_rate;
  j["weight_decay"] = weight_decay;
  j["epochs"] = epochs;
  j["batch_subgraphs"] = batch_subgraphs;
  j["num_neg"] = num_neg;
  j["tau_c"] = tau_c;
  j["gamma"] = gamma;
  j["lambda_kl"] = lambda_kl;
  j["quantizer"] = {{"tau_sa", quantizer.tau_sa},
                    {"beta", quantizer.beta},
                    {"top_k", quantizer.top_k},
                    {"hard_mode", quantizer.hard_mode}};
  j["seed"] = seed;
  j["hidden_dim"] = hidden_dim;
  j["num_layers"] = num_layers;
  j["num_heads"] = num_heads;
  j["decoder_layers"] = decoder_layers;
  j["activation"] = activation;
  j["num_hops"] = num_hops;
  j["fanout"] = fanout;
  j["use_fusion"] = use_fusion;
  return j;
}

TrainConfig TrainConfig::from_json(const json& j) {
  TrainConfig c;
  auto get = [&](const char* key, auto& into) {
    if (j.contains(key)) into = j.at(key).template get<std::decay_t<decltype(into)>>();
  };
  get("mask_rate", c.mask_rate);
  get("learning_rate", c.learning_rate);
  get("weight_decay", c.weight_decay);
  get("epochs", c.epochs);
  get("batch_subgraphs", c.batch_subgraphs);
  get("num_neg", c.num_neg);
  get("tau_c", c.tau_c);
  get("gamma", c.gamma);
  get("lambda_kl", c.lambda_kl);
  if (j.contains("quantizer")) {
    const auto& q = j.at("quantizer");
    if (q.contains("tau_sa")) c.quantizer.tau_sa = q.at("tau_sa").get<double>();
    if (q.contains("beta")) c.quantizer.beta = q.at("beta").get<double>();
    if (q.contains("top_k")) c.quantizer.top_k = q.at("top_k").get<int>();
    if (q.contains("hard_mode")) c.quantizer.hard_mode = q.at("hard_mode").get<bool>();
  }
  get("seed", c.seed);
  get("hidden_dim", c.hidden_dim);
  get("num_layers", c.num_layers);
  get("num_heads", c.num_heads);
  get("decoder_layers", c.decoder_layers);
  get("activation", c.activation);
  get("num_hops", c.num_hops);
  get("fanout", c.fanout);
  get("use_fusion", c.use_fusion);
  c.validate();
  return c;
}

TrainConfig TrainConfig::from_file(const fs::path& path) {
  json j;
  try {
    j = json::parse(read_text_file(path));
  } catch (const json::exception& e) {
    throw ValidationError("config " + path.string() + ": " + std::string(e.what()));
  }
  return from_json(j);
}

ModelParams ModelParams::init(const TrainConfig& cfg, int feature_dim, Rng& rng) {
  cfg.validate();
  if (feature_dim < 1) throw ValidationError("model init: feature_dim must be positive");
  ModelParams m;
  m.feature_dim = feature_dim;
  ad::Act act = act_from_string(cfg.activation);
  m.encoder = EncoderParams::init(feature_dim, cfg.hidden_dim, cfg.num_layers, cfg.num_heads, act, rng);
  m.decoder = DecoderParams::init(feature_dim, cfg.hidden_dim, cfg.decoder_layers, cfg.num_heads, act, rng);
  double limit = std::sqrt(6.0 / (feature_dim + cfg.hidden_dim));
  m.w_f = Mat(feature_dim, cfg.hidden_dim);
  for (double& v : m.w_f.a) v = rng.uniform(-limit, limit);
  m.phi_raw = Mat::scalar(0.0);  // sigmoid(0) = 0.5
  m.psi_raw = Mat::scalar(0.0);
  m.mask_token = Mat(1, feature_dim);
  for (double& v : m.mask_token.a) v = rng.normal(0.0, 0.1);
  return m;
}

FusionParams ModelParams::fusion() const {
  FusionParams fp;
  fp.w_f = w_f;
  fp.phi = 1.0 / (1.0 + std::exp(-phi_raw(0, 0)));
  fp.psi = 1.0 / (1.0 + std::exp(-psi_raw(0, 0)));
  return fp;
}

namespace {

std::vector<std::pair<std::string, Mat*>> named_tensors(ModelParams& m) {
  std::vector<std::pair<std::string, Mat*>> out;
  auto add_stack = [&](std::vector<GatLayerParams>& layers, const std::string& prefix) {
    for (size_t l = 0; l < layers.size(); ++l) {
      std::string base = prefix + ".l" + std::to_string(l);
      for (int h = 0; h < layers[l].heads(); ++h) {
        std::string hb = base + ".h" + std::to_string(h);
        out.emplace_back(hb + ".w", &layers[l].W[h]);
        out.emplace_back(hb + ".a_src", &layers[l].a_src[h]);
        out.emplace_back(hb + ".a_dst", &layers[l].a_dst[h]);
      }
      out.emplace_back(base + ".prelu", &layers[l].prelu_slope);
    }
  };
  add_stack(m.encoder.layers, "encoder");
  add_stack(m.decoder.layers, "decoder");
  out.emplace_back("fusion.w_f", &m.w_f);
  out.emplace_back("fusion.phi_raw", &m.phi_raw);
  out.emplace_back("fusion.psi_raw", &m.psi_raw);
  out.emplace_back("mask_token", &m.mask_token);
  return out;
}

}  // namespace

void save_checkpoint(const ModelParams& model, const TrainConfig& cfg, const fs::path& dir) {
  fs::create_directories(dir);
  auto tensors = named_tensors(const_cast<ModelParams&>(model));
  json j;
  j["train"] = cfg.to_json();
  j["feature_dim"] = model.feature_dim;
  json shapes = json::object();
  for (auto& [name, mat] : tensors) {
    shapes[name] = {mat->rows, mat->cols};
    write_f32(dir / (name + ".f32"), *mat);
  }
  j["tensors"] = shapes;
  write_text_file(dir / "config.json", j.dump(2) + "\n");
}

std::pair<ModelParams, TrainConfig> load_checkpoint(const fs::path& dir) {
  if (!fs::is_directory(dir)) throw ValidationError("checkpoint directory not found: " + dir.string());
  json j;
  try {
    j = json::parse(read_text_file(dir / "config.json"));
  } catch (const json::exception& e) {
    throw ValidationError("checkpoint config.json: " + std::string(e.what()));
  }
  TrainConfig cfg = TrainConfig::from_json(j.at("train"));
  int feature_dim = j.at("feature_dim").get<int>();
  Rng scratch(0);
  ModelParams model = ModelParams::init(cfg, feature_dim, scratch);
  const json& shapes = j.at("tensors");
  for (auto& [name, mat] : named_tensors(model)) {
    if (!shapes.contains(name)) throw ValidationError("checkpoint: missing tensor entry " + name);
    auto dims = shapes.at(name).get<std::vector<int>>();
    if (dims.size() != 2 || dims[0] != mat->rows || dims[1] != mat->cols)
      throw ValidationError("checkpoint: tensor " + name + " has unexpected shape");
    *mat = read_f32(dir / (name + ".f32"), dims[0], dims[1]);
  }
  return {std::move(model), std::move(cfg)};
}

double total_loss(const LossComponents& c, double lambda_kl) {
  double t = 0.5 * (c.commit_rec + c.commit_contrast) + c.reconstruction + c.contrastive + lambda_kl * c.kl;
  if (!std::isfinite(t)) throw RuntimeFailure("total_loss: non-finite components");
  return t;
}

double sce_loss(const Mat& X, const Mat& Zd, double gamma) {
  if (gamma < 1.0) throw ValidationError("sce_loss: gamma must be >= 1");
  if (!X.same_shape(Zd)) throw ValidationError("sce_loss: shape mismatch");
  if (X.rows == 0) throw ValidationError("sce_loss: empty input");
  Mat xn, dn;
  kernels::l2_normalize_rows(X, xn);
  kernels::l2_normalize_rows(Zd, dn);
  double total = 0.0;
  for (int i = 0; i < X.rows; ++i) {
    double c = 0.0;
    for (int j = 0; j < X.cols; ++j) c += xn(i, j) * dn(i, j);
    double base = 1.0 - c;
    total += std::pow(base > 0.0 ? base : 0.0, gamma);
  }
  return total / X.rows;
}

namespace {

// Draws up to num_neg negatives per anchor from the other masked nodes.
// Anchors are processed in ascending order; the flattened pair list is grouped
// per anchor for segment reduction.
void sample_negative_pairs(int m, int num_neg, Rng& rng, std::vector<int>& anchor, std::vector<int>& other,
                           ad::SegmentPlan& plan) {
  anchor.clear();
  other.clear();
  plan.offsets.assign(1, 0);
  for (int i = 0; i < m; ++i) {
    if (m - 1 <= num_neg) {
      for (int j = 0; j < m; ++j)
        if (j != i) {
          anchor.push_back(i);
          other.push_back(j);
        }
    } else {
      for (int pos : rng.sample_without_replacement(m - 1, num_neg)) {
        int j = pos < i ? pos : pos + 1;  // skip the anchor itself
        anchor.push_back(i);
        other.push_back(j);
      }
    }
    plan.offsets.push_back(static_cast<int>(anchor.size()));
  }
}

}  // namespace

double contrastive_loss(const Mat& Zd_masked, const Mat& X_masked, double tau_c, int num_neg, Rng& rng) {
  if (tau_c <= 0.0) throw ValidationError("contrastive_loss: tau_c must be > 0");
  if (num_neg < 0) throw ValidationError("contrastive_loss: num_neg must be >= 0");
  if (!Zd_masked.same_shape(X_masked)) throw ValidationError("contrastive_loss: shape mismatch");
  int m = Zd_masked.rows;
  if (m == 0) return 0.0;

  Mat zn, xn;
  kernels::l2_normalize_rows(Zd_masked, zn);
  kernels::l2_normalize_rows(X_masked, xn);
  auto cos_rows = [&](int a, int b) {
    double s = 0.0;
    for (int j = 0; j < zn.cols; ++j) s += zn(a, j) * xn(b, j);
    return s;
  };

  std::vector<int> anchor, other;
  ad::SegmentPlan plan;
  sample_negative_pairs(m, num_neg, rng, anchor, other, plan);

  double total = 0.0;
  for (int i = 0; i < m; ++i) {
    double s_pos = cos_rows(i, i) / tau_c;
    double denom = std::exp(s_pos);
    for (int p = plan.offsets[i]; p < plan.offsets[i + 1]; ++p)
      denom += std::exp(cos_rows(anchor[p], other[p]) / tau_c);
    total += std::log(denom) - s_pos;
  }
  return total / m;
}

StepPlan make_step_plan(const TextAttributedGraph& g, const std::vector<int>& centers, const TrainConfig& cfg,
                        Rng& rng) {
  if (centers.empty()) throw ValidationError("make_step_plan: no centers");
  StepPlan plan;
  Mat dummy_token(1, g.feature_dim);  // only the mask draw matters here
  for (int center : centers) {
    StepPlan::Item item;
    item.sg = sample_subgraph(g, center, cfg.num_hops, cfg.fanout, rng);
    item.plan = GraphPlan::build(item.sg);
    auto [corrupted, spec] = mask_nodes(item.sg, cfg.mask_rate, dummy_token, rng);
    (void)corrupted;
    item.masked_ids = spec.masked_ids;
    sample_negative_pairs(static_cast<int>(item.masked_ids.size()), cfg.num_neg, rng, item.neg_anchor,
                          item.neg_other, item.negs_by_anchor);
    plan.items.push_back(std::move(item));
  }
  return plan;
}

namespace {

struct BranchVars {
  ad::Var z_f, attn_soft, z_q, z_d, commit;
};

// Shared encode -> fuse -> quantize -> commit -> decode pipeline. Both
// branches run it; they differ only in their input features.
BranchVars build_branch(ad::Graph& g, const StepPlan::Item& item, ad::Var X_in, const gnn::GatStackVars& enc,
                        const gnn::GatStackVars& dec, const gnn::FusionVars& fus, ad::Var E_norm, ad::Var E_raw,
                        const Codebook& cb, const TrainConfig& cfg, ad::Act act) {
  BranchVars b;
  ad::Var Ze = gnn::build_gat_stack(g, item.plan, X_in, enc, act);
  b.z_f = gnn::build_fusion(g, Ze, X_in, fus, cfg.use_fusion);

  ad::Var sims = g.matmul(g.l2_normalize_rows(b.z_f), E_norm, false, true);
  b.attn_soft = g.softmax_rows(g.affine(sims, 1.0 / cfg.quantizer.tau_sa, 0.0));

  if (cfg.quantizer.hard_mode) {
    // Single-codeword quantization: the argmax selection is a constant on the
    // tape, so no gradient flows into the encoder through z_q.
    const Mat& attn_val = g.val(b.attn_soft);
    Mat onehot(attn_val.rows, attn_val.cols);
    for (int i = 0; i < attn_val.rows; ++i) {
      int best = 0;
      for (int k = 1; k < attn_val.cols; ++k)
        if (attn_val(i, k) > attn_val(i, best)) best = k;
      onehot(i, best) = 1.0;
    }
    b.z_q = g.matmul(g.constant(onehot), E_raw);
  } else {
    b.z_q = g.matmul(b.attn_soft, E_raw);
  }

  ad::Var commit_cos = g.cosine_rows(b.z_f, g.detach(b.z_q));
  b.commit = g.affine(g.mean_all(g.affine(commit_cos, -1.0, 1.0)), cfg.quantizer.beta, 0.0);

  b.z_d = gnn::build_gat_stack(g, item.plan, b.z_q, dec, act);
  (void)cb;
  return b;
}

}  // namespace

ObjectiveVars build_objective(ad::Graph& g, ModelParams& model, const Codebook& cb, const StepPlan& plan,
                              const TrainConfig& cfg, bool trainable) {
  cfg.validate();
  cb.validate();
  cfg.quantizer.validate(cb.size());
  if (cb.dim() != model.feature_dim)
    throw ValidationError("build_objective: codebook dim disagrees with feature dim");
  if (plan.items.empty()) throw ValidationError("build_objective: empty step plan");

  ad::Act act = act_from_string(cfg.activation);
  auto enc_vars = gnn::register_gat_stack(g, model.encoder.layers, act, "encoder", trainable);
  auto dec_vars = gnn::register_gat_stack(g, model.decoder.layers, act, "decoder", trainable);
  auto fus_vars = gnn::register_fusion(g, model.w_f, model.phi_raw, model.psi_raw, trainable);
  ad::Var mask_tok = trainable ? g.param(&model.mask_token, "mask_token") : g.constant(model.mask_token);
  ad::Var E_raw = g.constant(cb.embeddings);  // frozen: no gradient ever reaches the codebook
  ad::Var E_norm = g.l2_normalize_rows(E_raw);

  ObjectiveVars out;
  std::vector<ad::Var> recs, cons, commits_r, commits_c, kls;
  for (const auto& item : plan.items) {
    ad::Var X = g.constant(item.sg.features);

    // Reconstruction branch: clean features in, reconstruct every node.
    BranchVars rec_b = build_branch(g, item, X, enc_vars, dec_vars, fus_vars, E_norm, E_raw, cb, cfg, act);
    ad::Var rec_cos = g.cosine_rows(X, rec_b.z_d);
    recs.push_back(g.mean_all(g.pow_clamped(g.affine(rec_cos, -1.0, 1.0), cfg.gamma)));
    commits_r.push_back(rec_b.commit);
    out.zf_rec.push_back(rec_b.z_f);
    out.zq_rec.push_back(rec_b.z_q);

    // Distribution alignment compares the frozen token view of the raw
    // features with the token view of the fused representation.
    Mat attn_x;
    kernels::soft_assign_batch(item.sg.features, cb.embeddings, cfg.quantizer.tau_sa, attn_x);
    kls.push_back(g.kl_rowmean(attn_x, rec_b.attn_soft));

    // Contrastive branch: masked features in, InfoNCE on the masked nodes.
    ad::Var Xc = item.masked_ids.empty() ? X : g.substitute_rows(X, item.masked_ids, mask_tok);
    BranchVars con_b = build_branch(g, item, Xc, enc_vars, dec_vars, fus_vars, E_norm, E_raw, cb, cfg, act);
    commits_c.push_back(con_b.commit);
    out.zf_con.push_back(con_b.z_f);
    out.zq_con.push_back(con_b.z_q);

    if (item.masked_ids.empty()) {
      cons.push_back(g.constant(Mat::scalar(0.0)));
    } else {
      ad::Var Zdm = g.gather_rows(con_b.z_d, item.masked_ids);
      ad::Var Xm = g.gather_rows(X, item.masked_ids);
      ad::Var s_pos = g.affine(g.cosine_rows(Zdm, Xm), 1.0 / cfg.tau_c, 0.0);
      ad::Var denom;
      if (item.neg_anchor.empty()) {
        denom = g.exp_(s_pos);
      } else {
        ad::Var s_neg = g.affine(g.cosine_rows(g.gather_rows(Zdm, item.neg_anchor), g.gather_rows(Xm, item.neg_other)),
                                 1.0 / cfg.tau_c, 0.0);
        denom = g.add(g.exp_(s_pos), g.segment_sum(g.exp_(s_neg), item.negs_by_anchor));
      }
      cons.push_back(g.mean_all(g.sub(g.log_(denom), s_pos)));
    }
  }

  out.reconstruction = g.mean_of(recs);
  out.contrastive = g.mean_of(cons);
  out.commit_rec = g.mean_of(commits_r);
  out.commit_contrast = g.mean_of(commits_c);
  out.kl = g.mean_of(kls);
  // Built to associate exactly like total_loss() so the reported identity is
  // bitwise, not approximate.
  ad::Var half = g.affine(g.add(out.commit_rec, out.commit_contrast), 0.5, 0.0);
  out.total = g.add(g.add(g.add(half, out.reconstruction), out.contrastive), g.affine(out.kl, cfg.lambda_kl, 0.0));
  return out;
}

AdamW::AdamW(double lr, double weight_decay, double beta1, double beta2, double eps)
    : lr_(lr), wd_(weight_decay), beta1_(beta1), beta2_(beta2), eps_(eps) {
  if (lr <= 0.0) throw ValidationError("AdamW: learning rate must be > 0");
}

void AdamW::step(ad::Graph& g) {
  ++t_;
  double bc1 = 1.0 - std::pow(beta1_, t_);
  double bc2 = 1.0 - std::pow(beta2_, t_);
  for (const auto& ref : g.params()) {
    Mat grad = g.grad_of(ad::Var{ref.node});
    Mat& theta = *ref.storage;
    Slot& slot = state_[ref.name];
    if (slot.m.empty()) {
      slot.m = Mat(theta.rows, theta.cols);
      slot.v = Mat(theta.rows, theta.cols);
    }
    for (size_t i = 0; i < theta.a.size(); ++i) {
      double gi = grad.a[i];
      slot.m.a[i] = beta1_ * slot.m.a[i] + (1.0 - beta1_) * gi;
      slot.v.a[i] = beta2_ * slot.v.a[i] + (1.0 - beta2_) * gi * gi;
      double mhat = slot.m.a[i] / bc1;
      double vhat = slot.v.a[i] / bc2;
      theta.a[i] -= lr_ * (mhat / (std::sqrt(vhat) + eps_) + wd_ * theta.a[i]);
    }
  }
}

LossComponents pretrain_step(ModelParams& model, AdamW& opt, const Codebook& cb, const StepPlan& plan,
                             const TrainConfig& cfg) {
  ad::Graph g;
  ObjectiveVars obj = build_objective(g, model, cb, plan, cfg, true);

  LossComponents c;
  c.reconstruction = g.val(obj.reconstruction)(0, 0);
  c.contrastive = g.val(obj.contrastive)(0, 0);
  c.commit_rec = g.val(obj.commit_rec)(0, 0);
  c.commit_contrast = g.val(obj.commit_contrast)(0, 0);
  c.kl = g.val(obj.kl)(0, 0);
  c.total = g.val(obj.total)(0, 0);
  if (!std::isfinite(c.total)) throw RuntimeFailure("pretrain_step: non-finite loss");
  if (std::abs(c.total - total_loss(c, cfg.lambda_kl)) > 1e-6)
    throw RuntimeFailure("pretrain_step: loss identity violated");

  g.backward(obj.total);
  for (const auto& ref : g.params()) {
    Mat grad = g.grad_of(ad::Var{ref.node});
    if (!grad.all_finite()) throw RuntimeFailure("pretrain_step: non-finite gradient in parameter " + ref.name);
  }
  opt.step(g);
  return c;
}

nlohmann::json TrainReport::to_json() const {
  json j;
  j["config"] = config;
  j["checkpoint"] = checkpoint_dir;
  j["wall_seconds"] = wall_seconds;
  json eps = json::array();
  for (size_t i = 0; i < epochs.size(); ++i) {
    const auto& c = epochs[i];
    eps.push_back({{"epoch", i},
                   {"reconstruction", c.reconstruction},
                   {"contrastive", c.contrastive},
                   {"commit_rec", c.commit_rec},
                   {"commit_contrast", c.commit_contrast},
                   {"kl", c.kl},
                   {"total", c.total}});
  }
  j["epochs"] = eps;
  return j;
}

std::string TrainReport::to_csv() const {
  std::ostringstream os;
  os << "epoch,reconstruction,contrastive,commit_rec,commit_contrast,kl,total\n";
  os.precision(17);
  for (size_t i = 0; i < epochs.size(); ++i) {
    const auto& c = epochs[i];
    os << i << ',' << c.reconstruction << ',' << c.contrastive << ',' << c.commit_rec << ','
       << c.commit_contrast << ',' << c.kl << ',' << c.total << '\n';
  }
  return os.str();
}

TrainReport run_pretraining(const TextAttributedGraph& g, const Codebook& cb, const TrainConfig& cfg,
                            const fs::path& out_dir) {
  cfg.validate();
  cb.validate();
  cfg.quantizer.validate(cb.size());
  g.validate();
  if (g.num_nodes < 1) throw ValidationError("run_pretraining: empty graph");
  if (cb.dim() != g.feature_dim) throw ValidationError("run_pretraining: codebook dim disagrees with features");

  auto t0 = std::chrono::steady_clock::now();
  Rng rng(cfg.seed);
  ModelParams model = ModelParams::init(cfg, g.feature_dim, rng);
  AdamW opt(cfg.learning_rate, cfg.weight_decay);

  TrainReport report;
  report.config = cfg.to_json();

  std::vector<int> order(g.num_nodes);
  for (int i = 0; i < g.num_nodes; ++i) order[i] = i;

  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    rng.shuffle(order);
    LossComponents sum;
    int steps = 0;
    for (int start = 0; start < g.num_nodes; start += cfg.batch_subgraphs) {
      int end = std::min(g.num_nodes, start + cfg.batch_subgraphs);
      std::vector<int> centers(order.begin() + start, order.begin() + end);
      StepPlan plan = make_step_plan(g, centers, cfg, rng);
      LossComponents c = pretrain_step(model, opt, cb, plan, cfg);
      sum.reconstruction += c.reconstruction;
      sum.contrastive += c.contrastive;
      sum.commit_rec += c.commit_rec;
      sum.commit_contrast += c.commit_contrast;
      sum.kl += c.kl;
      sum.total += c.total;
      ++steps;
    }
    LossComponents mean;
    mean.reconstruction = sum.reconstruction / steps;
    mean.contrastive = sum.contrastive / steps;
    mean.commit_rec = sum.commit_rec / steps;
    mean.commit_contrast = sum.commit_contrast / steps;
    mean.kl = sum.kl / steps;
    mean.total = sum.total / steps;
    report.epochs.push_back(mean);
  }

  fs::create_directories(out_dir);
  fs::path ckpt = out_dir / "checkpoint";
  save_checkpoint(model, cfg, ckpt);
  report.checkpoint_dir = "checkpoint";
  report.wall_seconds =
      std::chrono::duration_cast<std::chrono::duration<double>>(std::chrono::steady_clock::now() - t0).count();
  write_text_file(out_dir / "report.json", report.to_json().dump(2) + "\n");
  write_text_file(out_dir / "epochs.csv", report.to_csv());
  return report;
}

EncoderBundle NodeEmbedder::bundle_for(const TextAttributedGraph& g, int node) const {
  if (!model || !cb) throw ValidationError("NodeEmbedder: model and codebook must be set");
  Rng r = Rng(seed).fork(static_cast<uint64_t>(node));
  Subgraph sg = sample_subgraph(g, node, cfg.num_hops, cfg.fanout, r);
  GraphPlan plan = GraphPlan::build(sg);

  ad::Graph tape;
  ad::Act act = act_from_string(cfg.activation);
  auto enc_vars = gnn::register_gat_stack(tape, model->encoder.layers, act, "encoder", false);
  auto dec_vars = gnn::register_gat_stack(tape, model->decoder.layers, act, "decoder", false);
  auto fus_vars = gnn::register_fusion(tape, model->w_f, model->phi_raw, model->psi_raw, false);
  ad::Var E_raw = tape.constant(cb->embeddings);
  ad::Var E_norm = tape.l2_normalize_rows(E_raw);

  StepPlan::Item item;
  item.sg = sg;
  item.plan = plan;
  ad::Var X = tape.constant(sg.features);

  ad::Var Ze = gnn::build_gat_stack(tape, plan, X, enc_vars, act);
  ad::Var Zf = gnn::build_fusion(tape, Ze, X, fus_vars, cfg.use_fusion);
  ad::Var sims = tape.matmul(tape.l2_normalize_rows(Zf), E_norm, false, true);
  ad::Var attn = tape.softmax_rows(tape.affine(sims, 1.0 / cfg.quantizer.tau_sa, 0.0));

  EncoderBundle b;
  b.z_e = tape.val(Ze);
  b.z_f = tape.val(Zf);
  b.attn = tape.val(attn);
  if (cfg.quantizer.hard_mode) {
    Mat onehot(b.attn.rows, b.attn.cols);
    for (int i = 0; i < b.attn.rows; ++i) {
      int best = 0;
      for (int k = 1; k < b.attn.cols; ++k)
        if (b.attn(i, k) > b.attn(i, best)) best = k;
      onehot(i, best) = 1.0;
    }
    kernels::quantize_rows(onehot, cb->embeddings, b.z_q);
  } else {
    kernels::quantize_rows(b.attn, cb->embeddings, b.z_q);
  }
  ad::Var Zd = gnn::build_gat_stack(tape, plan, tape.constant(b.z_q), dec_vars, act);
  b.z_d = tape.val(Zd);
  return b;
}

Mat NodeEmbedder::embed_nodes(const TextAttributedGraph& g, const std::vector<int>& nodes) const {
  if (nodes.empty()) throw ValidationError("embed_nodes: empty node list");
  Mat out(static_cast<int>(nodes.size()), model->feature_dim);
  std::vector<std::string> errors(nodes.size());
#pragma omp parallel for schedule(dynamic)
  for (int i = 0; i < static_cast<int>(nodes.size()); ++i) {
    try {
      EncoderBundle b = bundle_for(g, nodes[i]);
      for (int j = 0; j < out.cols; ++j) out(i, j) = b.z_f(0, j);  // center row is local 0
    } catch (const std::exception& e) {
      errors[i] = e.what();
    }
  }
  for (const auto& err : errors)
    if (!err.empty()) throw RuntimeFailure("embed_nodes: " + err);
  return out;
}

Mat NodeEmbedder::embed_subgraph(const TextAttributedGraph& g, int center) const {
  EncoderBundle b = bundle_for(g, center);
  Mat out(1, b.z_f.cols);
  for (int i = 0; i < b.z_f.rows; ++i)
    for (int j = 0; j < b.z_f.cols; ++j) out(0, j) += b.z_f(i, j);
  for (double& v : out.a) v /= b.z_f.rows;
  return out;
}

std::vector<std::string> NodeEmbedder::tokens_for(const TextAttributedGraph& g, int node) const {
  EncoderBundle b = bundle_for(g, node);
  Mat row = b.attn.row_copy(0);
  if (cfg.quantizer.hard_mode) return top_k_tokens(row, *cb, 1);
  return top_k_tokens(row, *cb, cfg.quantizer.top_k);
}

}  // namespace stag
