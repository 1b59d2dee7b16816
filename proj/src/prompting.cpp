#include "stag/prompting.hpp"

#include <cmath>

#include "stag/ad.hpp"
#include "stag/kernels.hpp"
#include "stag/pretrain.hpp"
#include "stag/tensor_io.hpp"

namespace stag {

using nlohmann::json;
namespace fs = std::filesystem;

void PromptNetParams::validate() const {
  if (w1.rows < 1 || w1.cols < 1) throw ValidationError("prompt net: empty w1");
  if (b1.rows != 1 || b1.cols != w1.rows) throw ValidationError("prompt net: b1 shape mismatch");
  if (w2.rows != w1.cols || w2.cols != w1.rows) throw ValidationError("prompt net: w2 shape mismatch");
  if (b2.rows != 1 || b2.cols != w2.rows) throw ValidationError("prompt net: b2 shape mismatch");
}

PromptNetParams PromptNetParams::init(int input_dim, int bottleneck_dim, Rng& rng) {
  if (input_dim < 1 || bottleneck_dim < 1) throw ValidationError("prompt net: dimensions must be positive");
  auto glorot = [&](int r, int c, double scale) {
    double limit = scale * std::sqrt(6.0 / (r + c));
    Mat m(r, c);
    for (double& v : m.a) v = rng.uniform(-limit, limit);
    return m;
  };
  PromptNetParams p;
  p.w1 = glorot(bottleneck_dim, input_dim, 1.0);
  p.b1 = Mat(1, bottleneck_dim);
  // Small w2 plus a positive bias keeps the initial gate near 1, so tuning
  // starts from z_p almost equal to z_f.
  p.w2 = glorot(input_dim, bottleneck_dim, 0.1);
  p.b2 = Mat(1, input_dim, 4.0);
  return p;
}

PromptNetParams PromptNetParams::init(int input_dim, Rng& rng) {
  return init(input_dim, std::max(1, input_dim / 4), rng);
}

void PromptTuneConfig::validate() const {
  if (beta_p <= 0.0 || beta_p > 2.0) throw ValidationError("prompt tune: beta_p must lie in (0, 2]");
  if (tau_p <= 0.0) throw ValidationError("prompt tune: tau_p must be > 0");
  if (tau_sa <= 0.0) throw ValidationError("prompt tune: tau_sa must be > 0");
  if (learning_rate <= 0.0) throw ValidationError("prompt tune: learning_rate must be > 0");
  if (steps < 1) throw ValidationError("prompt tune: steps must be >= 1");
}

namespace {

struct PromptVars {
  ad::Var w1, b1, w2, b2;
};

ad::Var build_prompt_forward(ad::Graph& g, ad::Var Z, const PromptVars& pv) {
  ad::Var H = g.activation(g.add_rowvec(g.matmul(Z, pv.w1, false, true), pv.b1), ad::Act::relu);
  ad::Var gate = g.sigmoid(g.add_rowvec(g.matmul(H, pv.w2, false, true), pv.b2));
  return g.hadamard(gate, Z);
}

}  // namespace

Mat prompt_forward(const Mat& z, const PromptNetParams& p) {
  p.validate();
  if (z.cols != p.input_dim()) throw ValidationError("prompt_forward: dim mismatch");
  ad::Graph g;
  PromptVars pv{g.constant(p.w1), g.constant(p.b1), g.constant(p.w2), g.constant(p.b2)};
  return g.val(build_prompt_forward(g, g.constant(z), pv));
}

double prompt_commit_loss(const Mat& z_p, const Mat& z_q, double beta_p) {
  if (beta_p <= 0.0 || beta_p > 2.0) throw ValidationError("prompt_commit_loss: beta_p must lie in (0, 2]");
  if (!z_p.same_shape(z_q)) throw ValidationError("prompt_commit_loss: shape mismatch");
  if (z_p.rows == 0) throw ValidationError("prompt_commit_loss: empty input");
  Mat pn, qn;
  kernels::l2_normalize_rows(z_p, pn);
  kernels::l2_normalize_rows(z_q, qn);
  double total = 0.0;
  for (int i = 0; i < z_p.rows; ++i) {
    double c = 0.0;
    for (int j = 0; j < z_p.cols; ++j) c += pn(i, j) * qn(i, j);
    total += 1.0 - c;
  }
  return beta_p * total / z_p.rows;
}

double weighted_class_contrastive(const Mat& z_p, const std::vector<int>& labels, const ClassCodebook& cc,
                                  double tau_p) {
  cc.validate();
  if (tau_p <= 0.0) throw ValidationError("weighted_class_contrastive: tau_p must be > 0");
  if (z_p.rows != static_cast<int>(labels.size()))
    throw ValidationError("weighted_class_contrastive: labels length mismatch");
  if (z_p.rows == 0) throw ValidationError("weighted_class_contrastive: empty input");
  if (z_p.cols != cc.dim()) throw ValidationError("weighted_class_contrastive: dim mismatch");
  for (int l : labels)
    if (l < 0 || l >= cc.size()) throw ValidationError("weighted_class_contrastive: label out of range");

  Mat theta;  // theta[c][j] = cos(e_c, e_j)
  kernels::cosine_matrix(cc.embeddings, cc.embeddings, theta);
  Mat sims;
  kernels::cosine_matrix(z_p, cc.embeddings, sims);
  for (double& v : sims.a) v /= tau_p;
  Mat probs;
  kernels::softmax_rows(sims, probs);

  double total = 0.0;
  for (int i = 0; i < z_p.rows; ++i)
    for (int j = 0; j < cc.size(); ++j) total += theta(labels[i], j) * std::log(probs(i, j));
  return -total / z_p.rows;
}

PromptNetParams tune_prompt(const Mat& support_zf, const std::vector<int>& labels, const Codebook& cb,
                            const ClassCodebook& cc, const PromptTuneConfig& cfg) {
  cfg.validate();
  cb.validate();
  cc.validate();
  if (support_zf.rows == 0) throw ValidationError("tune_prompt: empty support set");
  if (support_zf.rows != static_cast<int>(labels.size()))
    throw ValidationError("tune_prompt: labels length mismatch");
  if (support_zf.cols != cb.dim() || support_zf.cols != cc.dim())
    throw ValidationError("tune_prompt: dim mismatch with codebooks");
  for (int l : labels)
    if (l < 0 || l >= cc.size()) throw ValidationError("tune_prompt: label out of range");

  Rng rng(cfg.seed);
  PromptNetParams p = PromptNetParams::init(support_zf.cols, rng);

  Mat theta;
  kernels::cosine_matrix(cc.embeddings, cc.embeddings, theta);
  Mat weights(support_zf.rows, cc.size());
  for (int i = 0; i < support_zf.rows; ++i)
    for (int j = 0; j < cc.size(); ++j) weights(i, j) = theta(labels[i], j);

  AdamW opt(cfg.learning_rate, 0.0);
  double inv_n = 1.0 / support_zf.rows;

  for (int step = 0; step < cfg.steps; ++step) {
    ad::Graph g;
    PromptVars pv{g.param(&p.w1, "prompt.w1"), g.param(&p.b1, "prompt.b1"), g.param(&p.w2, "prompt.w2"),
                  g.param(&p.b2, "prompt.b2")};
    ad::Var Z = g.constant(support_zf);
    ad::Var Zp = build_prompt_forward(g, Z, pv);

    // Commitment against the full frozen codebook.
    ad::Var E = g.constant(cb.embeddings);
    ad::Var attn = g.softmax_rows(
        g.affine(g.matmul(g.l2_normalize_rows(Zp), g.l2_normalize_rows(E), false, true), 1.0 / cfg.tau_sa, 0.0));
    ad::Var Zq = g.matmul(attn, E);
    ad::Var commit_cos = g.cosine_rows(Zp, g.detach(Zq));
    ad::Var commit = g.affine(g.mean_all(g.affine(commit_cos, -1.0, 1.0)), cfg.beta_p, 0.0);

    // Weighted class contrastive against the class codebook.
    ad::Var Ec = g.constant(cc.embeddings);
    ad::Var sims = g.affine(g.matmul(g.l2_normalize_rows(Zp), g.l2_normalize_rows(Ec), false, true),
                            1.0 / cfg.tau_p, 0.0);
    ad::Var logp = g.log_(g.softmax_rows(sims));
    ad::Var contrast = g.affine(g.sum_all(g.hadamard(g.constant(weights), logp)), -inv_n, 0.0);

    ad::Var loss = g.add(commit, contrast);
    g.backward(loss);
    for (const auto& ref : g.params()) {
      Mat grad = g.grad_of(ad::Var{ref.node});
      if (!grad.all_finite()) throw RuntimeFailure("tune_prompt: non-finite gradient in " + ref.name);
    }
    opt.step(g);
  }
  return p;
}

int classify_by_class_codebook(const Mat& z_row, const ClassCodebook& cc) {
  cc.validate();
  if (z_row.rows != 1) throw ValidationError("classify_by_class_codebook: expects a single row");
  if (z_row.cols != cc.dim()) throw ValidationError("classify_by_class_codebook: dim mismatch");
  Mat cos;
  kernels::cosine_matrix(z_row, cc.embeddings, cos);
  int best = 0;
  for (int c = 1; c < cc.size(); ++c)
    if (cos(0, c) > cos(0, best)) best = c;  // strict: ties keep the lower index
  return best;
}

void save_prompt(const PromptNetParams& p, const PromptTuneConfig& cfg, const fs::path& dir) {
  p.validate();
  fs::create_directories(dir);
  // One flat tensor file, tensors in fixed order.
  Mat flat(1, static_cast<int>(p.w1.size() + p.b1.size() + p.w2.size() + p.b2.size()));
  size_t off = 0;
  for (const Mat* m : {&p.w1, &p.b1, &p.w2, &p.b2})
    for (double v : m->a) flat.a[off++] = v;
  write_f32(dir / "prompt.f32", flat);
  json j;
  j["input_dim"] = p.input_dim();
  j["bottleneck_dim"] = p.bottleneck_dim();
  j["beta_p"] = cfg.beta_p;
  j["tau_p"] = cfg.tau_p;
  j["tau_sa"] = cfg.tau_sa;
  j["learning_rate"] = cfg.learning_rate;
  j["steps"] = cfg.steps;
  j["seed"] = cfg.seed;
  write_text_file(dir / "prompt_config.json", j.dump(2) + "\n");
}

std::pair<PromptNetParams, PromptTuneConfig> load_prompt(const fs::path& dir) {
  json j;
  try {
    j = json::parse(read_text_file(dir / "prompt_config.json"));
  } catch (const json::exception& e) {
    throw ValidationError("prompt_config.json: " + std::string(e.what()));
  }
  int d = j.at("input_dim").get<int>();
  int b = j.at("bottleneck_dim").get<int>();
  PromptTuneConfig cfg;
  cfg.beta_p = j.at("beta_p").get<double>();
  cfg.tau_p = j.at("tau_p").get<double>();
  cfg.tau_sa = j.at("tau_sa").get<double>();
  cfg.learning_rate = j.at("learning_rate").get<double>();
  cfg.steps = j.at("steps").get<int>();
  cfg.seed = j.at("seed").get<uint64_t>();
  cfg.validate();

  PromptNetParams p;
  p.w1 = Mat(b, d);
  p.b1 = Mat(1, b);
  p.w2 = Mat(d, b);
  p.b2 = Mat(1, d);
  size_t total = p.w1.size() + p.b1.size() + p.w2.size() + p.b2.size();
  Mat flat = read_f32(dir / "prompt.f32", 1, static_cast<int>(total));
  size_t off = 0;
  for (Mat* m : {&p.w1, &p.b1, &p.w2, &p.b2})
    for (double& v : m->a) v = flat.a[off++];
  p.validate();
  return {std::move(p), cfg};
}

}  // namespace stag
