#include "stag/evalcli.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <iomanip>
#include <sstream>

#include "stag/error.hpp"
#include "stag/kernels.hpp"
#include "stag/tensor_io.hpp"

namespace stag {

using nlohmann::json;
namespace fs = std::filesystem;

EvalPath eval_path_from_string(const std::string& s) {
  if (s == "llm") return EvalPath::llm;
  if (s == "stub") return EvalPath::stub;
  if (s == "linear") return EvalPath::linear;
  if (s == "class-codebook") return EvalPath::class_codebook;
  throw ValidationError("unknown eval path: " + s + " (expected llm|stub|linear|class-codebook)");
}

std::string to_string(EvalPath p) {
  switch (p) {
    case EvalPath::llm: return "llm";
    case EvalPath::stub: return "stub";
    case EvalPath::linear: return "linear";
    case EvalPath::class_codebook: return "class-codebook";
  }
  throw ValidationError("unknown eval path value");
}

void EvalConfig::validate() const {
  if (n_way < 1) throw ValidationError("eval: n_way must be >= 1");
  if (k_shot < 0) throw ValidationError("eval: k_shot must be >= 0");
  if (num_tasks < 1) throw ValidationError("eval: num_tasks must be >= 1");
  if (total_queries < 1) throw ValidationError("eval: total_queries must be >= 1");
}

json EvalConfig::to_json() const {
  json j;
  j["n_way"] = n_way;
  j["k_shot"] = k_shot;
  j["num_tasks"] = num_tasks;
  j["total_queries"] = total_queries;
  j["path"] = to_string(path);
  j["seed"] = seed;
  return j;
}

EvalConfig EvalConfig::from_json(const json& j) {
  EvalConfig cfg;
  if (j.contains("n_way")) cfg.n_way = j.at("n_way").get<int>();
  if (j.contains("k_shot")) cfg.k_shot = j.at("k_shot").get<int>();
  if (j.contains("num_tasks")) cfg.num_tasks = j.at("num_tasks").get<int>();
  if (j.contains("total_queries")) cfg.total_queries = j.at("total_queries").get<int>();
  if (j.contains("path")) cfg.path = eval_path_from_string(j.at("path").get<std::string>());
  if (j.contains("seed")) cfg.seed = j.at("seed").get<uint64_t>();
  cfg.validate();
  return cfg;
}

int queries_per_class(const EvalConfig& cfg) {
  int per_task = (cfg.total_queries + cfg.num_tasks - 1) / cfg.num_tasks;
  return (per_task + cfg.n_way - 1) / cfg.n_way;
}

namespace {

std::string csv_escape(const std::string& s) {
  if (s.find_first_of(",\"\n") == std::string::npos) return s;
  std::string out = "\"";
  for (char c : s) {
    if (c == '"') out += "\"\"";
    out += c;
  }
  return out + "\"";
}

std::string fmt17(double v) {
  std::ostringstream os;
  os << std::setprecision(17) << v;
  return os.str();
}

}  // namespace

json EvalReport::to_json() const {
  json j;
  j["config"] = config.to_json();
  j["task_accuracy"] = task_accuracy;
  j["task_queries"] = task_queries;
  j["mean_accuracy"] = mean_accuracy;
  j["std_accuracy"] = std_accuracy;
  j["total_queries"] = total_queries;
  json recs = json::array();
  for (const auto& r : records)
    recs.push_back(json{{"task", r.task},
                        {"node", r.node},
                        {"gold", r.gold},
                        {"predicted", r.predicted},
                        {"correct", r.correct}});
  j["records"] = recs;
  return j;
}

std::string EvalReport::tasks_csv() const {
  std::string out = "task,queries,accuracy\n";
  for (size_t i = 0; i < task_accuracy.size(); ++i)
    out += std::to_string(i) + "," + std::to_string(task_queries[i]) + "," + fmt17(task_accuracy[i]) + "\n";
  return out;
}

std::string EvalReport::queries_csv() const {
  std::string out = "task,node,gold,predicted,correct\n";
  for (const auto& r : records)
    out += std::to_string(r.task) + "," + std::to_string(r.node) + "," + csv_escape(r.gold) + "," +
           csv_escape(r.predicted) + "," + (r.correct ? "1" : "0") + "\n";
  return out;
}

void save_eval_report(const EvalReport& r, const fs::path& dir) {
  fs::create_directories(dir);
  write_text_file(dir / "report.json", r.to_json().dump(2) + "\n");
  write_text_file(dir / "tasks.csv", r.tasks_csv());
  write_text_file(dir / "queries.csv", r.queries_csv());
}

namespace {

void check_context(const EvalContext& ctx, const EvalConfig& cfg, bool zero_shot) {
  if (!ctx.graph || !ctx.model || !ctx.codebook) throw ValidationError("eval: graph, model and codebook required");
  if (!ctx.graph->has_labels()) throw ValidationError("eval: dataset has no labels");
  if (ctx.model->feature_dim != ctx.graph->feature_dim)
    throw ValidationError("eval: checkpoint feature_dim " + std::to_string(ctx.model->feature_dim) +
                          " does not match dataset feature_dim " + std::to_string(ctx.graph->feature_dim));
  if (ctx.codebook->dim() != ctx.graph->feature_dim) throw ValidationError("eval: codebook dim mismatch");
  if (cfg.path == EvalPath::llm && !ctx.llm)
    throw ValidationError("eval: llm path needs an endpoint (use --llm <endpoint> or --llm stub)");
  if ((cfg.path == EvalPath::stub || cfg.path == EvalPath::class_codebook) && !ctx.class_codebook)
    throw ValidationError("eval: " + to_string(cfg.path) + " path needs a class codebook");
  if (cfg.path == EvalPath::linear && zero_shot)
    throw ValidationError("eval: linear path needs support examples (use the few-shot evaluator)");
  if (cfg.path == EvalPath::linear && cfg.k_shot < 1)
    throw ValidationError("eval: linear path needs k_shot >= 1");
}

Mat gather_class_rows(const ClassCodebook& cc, const std::vector<std::string>& names) {
  Mat rows(static_cast<int>(names.size()), cc.dim());
  for (size_t i = 0; i < names.size(); ++i) {
    int ci = cc.index_of(names[i]);
    if (ci < 0) throw ValidationError("eval: class not in class codebook: " + names[i]);
    for (int j = 0; j < cc.dim(); ++j) rows(static_cast<int>(i), j) = cc.embeddings(ci, j);
  }
  return rows;
}

int argmax_cosine(const Mat& z_row, const Mat& rows) {
  Mat cos;
  kernels::cosine_matrix(z_row, rows, cos);
  int best = 0;
  for (int i = 1; i < cos.cols; ++i)
    if (cos(0, i) > cos(0, best)) best = i;
  return best;
}

struct TaskResult {
  double accuracy = 0.0;
  std::vector<QueryRecord> records;
};

TaskResult evaluate_task(const EvalContext& ctx, const EvalConfig& cfg, const NodeEmbedder& embedder,
                         const FewShotTask& task, int task_index) {
  const TextAttributedGraph& g = *ctx.graph;
  TaskResult res;
  res.records.reserve(task.query.size());

  std::vector<std::vector<std::string>> support_tokens;
  LinearProbe probe;
  Mat class_rows;
  if (cfg.path == EvalPath::llm || cfg.path == EvalPath::stub) {
    for (const auto& [node, cls] : task.support) {
      (void)cls;
      support_tokens.push_back(embedder.tokens_for(g, node));
    }
  } else if (cfg.path == EvalPath::linear) {
    std::vector<int> nodes, labels;
    for (const auto& [node, cls] : task.support) {
      nodes.push_back(node);
      labels.push_back(cls);
    }
    Mat zs = embedder.embed_nodes(g, nodes);
    probe = train_linear_probe(zs, labels, task.class_names, ProbeConfig{});
  } else if (cfg.path == EvalPath::class_codebook) {
    class_rows = gather_class_rows(*ctx.class_codebook, task.class_names);
  }

  int correct = 0;
  for (size_t qi = 0; qi < task.query.size(); ++qi) {
    auto [node, gold_cls] = task.query[qi];
    std::string gold = task.class_names[gold_cls];
    std::string predicted;
    switch (cfg.path) {
      case EvalPath::llm: {
        auto tokens = embedder.tokens_for(g, node);
        PromptBundle bundle = task.k_shot > 0 ? render_fewshot_prompt(task, support_tokens, tokens)
                                              : render_zeroshot_prompt(task.class_names, tokens);
        std::string task_id = "t" + std::to_string(task_index) + ":q" + std::to_string(qi);
        predicted = llm_classify(bundle, *ctx.llm, ctx.audit, task_id, gold);
        break;
      }
      case EvalPath::stub: {
        auto tokens = embedder.tokens_for(g, node);
        PromptBundle bundle = task.k_shot > 0 ? render_fewshot_prompt(task, support_tokens, tokens)
                                              : render_zeroshot_prompt(task.class_names, tokens);
        predicted = stub_classify(bundle, *ctx.codebook, *ctx.class_codebook);
        break;
      }
      case EvalPath::linear: {
        Mat z = embedder.embed_nodes(g, {node});
        predicted = task.class_names[predict_linear(probe, z)];
        break;
      }
      case EvalPath::class_codebook: {
        Mat z = embedder.embed_nodes(g, {node});
        predicted = task.class_names[argmax_cosine(z, class_rows)];
        break;
      }
    }
    bool ok = predicted == gold;
    correct += ok ? 1 : 0;
    res.records.push_back({task_index, node, gold, predicted, ok});
  }
  res.accuracy = static_cast<double>(correct) / static_cast<double>(task.query.size());
  return res;
}

EvalReport run_eval(const EvalContext& ctx, const EvalConfig& cfg, bool zero_shot) {
  cfg.validate();
  ctx.train_cfg.validate();
  check_context(ctx, cfg, zero_shot);

  int qpc = queries_per_class(cfg);
  Rng task_rng(cfg.seed);
  std::vector<FewShotTask> tasks;
  tasks.reserve(cfg.num_tasks);
  for (int t = 0; t < cfg.num_tasks; ++t) tasks.push_back(sample_task(*ctx.graph, cfg.n_way, cfg.k_shot, qpc, task_rng));

  NodeEmbedder embedder{ctx.model, ctx.codebook, ctx.train_cfg, cfg.seed};

  std::vector<TaskResult> results(tasks.size());
  if (cfg.path == EvalPath::llm) {
    for (size_t t = 0; t < tasks.size(); ++t)
      results[t] = evaluate_task(ctx, cfg, embedder, tasks[t], static_cast<int>(t));
  } else {
    std::vector<std::string> errors(tasks.size());
#pragma omp parallel for schedule(dynamic)
    for (int t = 0; t < static_cast<int>(tasks.size()); ++t) {
      try {
        results[t] = evaluate_task(ctx, cfg, embedder, tasks[t], t);
      } catch (const std::exception& e) {
        errors[t] = e.what();
      }
    }
    for (const auto& e : errors)
      if (!e.empty()) throw RuntimeFailure("eval task failed: " + e);
  }

  EvalReport rep;
  rep.config = cfg;
  for (const auto& r : results) {
    rep.task_accuracy.push_back(r.accuracy);
    rep.task_queries.push_back(static_cast<int>(r.records.size()));
    rep.total_queries += static_cast<int>(r.records.size());
    rep.records.insert(rep.records.end(), r.records.begin(), r.records.end());
  }
  double sum = 0.0;
  for (double a : rep.task_accuracy) sum += a;
  rep.mean_accuracy = sum / rep.task_accuracy.size();
  if (rep.task_accuracy.size() > 1) {
    double ss = 0.0;
    for (double a : rep.task_accuracy) ss += (a - rep.mean_accuracy) * (a - rep.mean_accuracy);
    rep.std_accuracy = std::sqrt(ss / (rep.task_accuracy.size() - 1));
  }
  return rep;
}

}  // namespace

EvalReport run_fewshot_eval(const EvalContext& ctx, const EvalConfig& cfg) {
  if (cfg.k_shot < 1) throw ValidationError("run_fewshot_eval: k_shot must be >= 1 (use run_zeroshot_eval)");
  return run_eval(ctx, cfg, false);
}

EvalReport run_zeroshot_eval(const EvalContext& ctx, const EvalConfig& cfg) {
  EvalConfig zc = cfg;
  zc.k_shot = 0;
  return run_eval(ctx, zc, true);
}

std::vector<std::pair<std::string, TrainConfig>> ablation_variants(const TrainConfig& base) {
  TrainConfig no_fusion = base;
  no_fusion.use_fusion = false;
  TrainConfig no_kl = base;
  no_kl.lambda_kl = 0.0;
  TrainConfig no_soft = base;
  no_soft.quantizer.hard_mode = true;
  return {{"full", base}, {"no_fusion", no_fusion}, {"no_kl", no_kl}, {"no_soft", no_soft}};
}

json AblationReport::to_json() const {
  json j;
  j["base_config"] = base_config;
  j["eval_config"] = eval_config.to_json();
  json es = json::array();
  for (const auto& e : entries)
    es.push_back(json{{"variant", e.variant},
                      {"train_seed", e.train_seed},
                      {"linear_accuracy", e.linear_accuracy},
                      {"stub_accuracy", e.stub_accuracy},
                      {"initial_total", e.initial_total},
                      {"final_total", e.final_total}});
  j["entries"] = es;
  return j;
}

std::string AblationReport::to_csv() const {
  std::string out = "variant,train_seed,linear_accuracy,stub_accuracy,initial_total,final_total\n";
  for (const auto& e : entries)
    out += e.variant + "," + std::to_string(e.train_seed) + "," + fmt17(e.linear_accuracy) + "," +
           fmt17(e.stub_accuracy) + "," + fmt17(e.initial_total) + "," + fmt17(e.final_total) + "\n";
  return out;
}

double AblationReport::mean_accuracy(const std::string& variant, bool linear_path) const {
  double sum = 0.0;
  int n = 0;
  for (const auto& e : entries)
    if (e.variant == variant) {
      sum += linear_path ? e.linear_accuracy : e.stub_accuracy;
      ++n;
    }
  if (n == 0) throw ValidationError("ablation report: no entries for variant " + variant);
  return sum / n;
}

const AblationEntry& AblationReport::entry(const std::string& variant, uint64_t train_seed) const {
  for (const auto& e : entries)
    if (e.variant == variant && e.train_seed == train_seed) return e;
  throw ValidationError("ablation report: no entry for " + variant + " seed " + std::to_string(train_seed));
}

AblationReport run_ablation(const TextAttributedGraph& g, const Codebook& cb, const ClassCodebook& cc,
                            const TrainConfig& base, const EvalConfig& eval_cfg,
                            const std::vector<uint64_t>& train_seeds, const fs::path& work_dir) {
  if (train_seeds.empty()) throw ValidationError("run_ablation: no train seeds");
  base.validate();
  eval_cfg.validate();

  AblationReport rep;
  rep.base_config = base.to_json();
  rep.eval_config = eval_cfg;

  for (const auto& [name, variant_cfg] : ablation_variants(base)) {
    for (uint64_t seed : train_seeds) {
      TrainConfig tc = variant_cfg;
      tc.seed = seed;
      fs::path dir = work_dir / (name + "_s" + std::to_string(seed));
      TrainReport tr = run_pretraining(g, cb, tc, dir);
      auto [model, loaded_cfg] = load_checkpoint(dir / "checkpoint");

      EvalContext ctx;
      ctx.graph = &g;
      ctx.model = &model;
      ctx.codebook = &cb;
      ctx.class_codebook = &cc;
      ctx.train_cfg = loaded_cfg;

      EvalConfig ec = eval_cfg;
      ec.path = EvalPath::linear;
      EvalReport lin = run_fewshot_eval(ctx, ec);
      ec.path = EvalPath::stub;
      EvalReport stub = run_fewshot_eval(ctx, ec);

      AblationEntry e;
      e.variant = name;
      e.train_seed = seed;
      e.linear_accuracy = lin.mean_accuracy;
      e.stub_accuracy = stub.mean_accuracy;
      e.initial_total = tr.epochs.front().total;
      e.final_total = tr.epochs.back().total;
      rep.entries.push_back(std::move(e));
    }
  }

  fs::create_directories(work_dir);
  write_text_file(work_dir / "ablation.json", rep.to_json().dump(2) + "\n");
  write_text_file(work_dir / "ablation.csv", rep.to_csv());
  return rep;
}

void BenchConfig::validate() const {
  if (grid_b.empty() || grid_k.empty() || grid_d.empty()) throw ValidationError("bench: empty grid");
  for (int v : grid_b)
    if (v < 1) throw ValidationError("bench: grid_b values must be >= 1");
  for (int v : grid_k)
    if (v < 1) throw ValidationError("bench: grid_k values must be >= 1");
  for (int v : grid_d)
    if (v < 1) throw ValidationError("bench: grid_d values must be >= 1");
  if (repeats < 1) throw ValidationError("bench: repeats must be >= 1");
  if (tau_sa <= 0.0) throw ValidationError("bench: tau_sa must be > 0");
}

namespace {

double median(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  size_t n = v.size();
  if (n % 2 == 1) return v[n / 2];
  return 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

double time_cell(int b, int k, int d, double tau, int repeats, Rng& rng) {
  Mat Z(b, d), E(k, d);
  for (double& v : Z.a) v = rng.normal(0.0, 1.0);
  for (double& v : E.a) v = rng.normal(0.0, 1.0);
  Mat attn, zq;
  kernels::soft_assign_batch(Z, E, tau, attn);  // warmup
  kernels::quantize_rows(attn, E, zq);
  std::vector<double> times;
  times.reserve(repeats);
  for (int r = 0; r < repeats; ++r) {
    auto t0 = std::chrono::steady_clock::now();
    kernels::soft_assign_batch(Z, E, tau, attn);
    kernels::quantize_rows(attn, E, zq);
    auto t1 = std::chrono::steady_clock::now();
    times.push_back(std::chrono::duration<double>(t1 - t0).count());
  }
  double t = median(std::move(times));
  if (t <= 0.0) throw RuntimeFailure("bench: non-positive timing (clock resolution too coarse)");
  return t;
}

BenchFit fit_axis(const std::string& axis, const std::vector<double>& x, const std::vector<double>& y) {
  double n = static_cast<double>(x.size());
  double sx = 0, sy = 0, sxx = 0, sxy = 0;
  for (size_t i = 0; i < x.size(); ++i) {
    sx += x[i];
    sy += y[i];
    sxx += x[i] * x[i];
    sxy += x[i] * y[i];
  }
  double denom = n * sxx - sx * sx;
  if (std::fabs(denom) < 1e-12) throw ValidationError("bench: degenerate axis grid for " + axis);
  BenchFit f;
  f.axis = axis;
  f.slope = (n * sxy - sx * sy) / denom;
  f.intercept = (sy - f.slope * sx) / n;
  double mean_y = sy / n, ss_res = 0, ss_tot = 0;
  for (size_t i = 0; i < x.size(); ++i) {
    double pred = f.slope * x[i] + f.intercept;
    ss_res += (y[i] - pred) * (y[i] - pred);
    ss_tot += (y[i] - mean_y) * (y[i] - mean_y);
  }
  f.r2 = ss_tot < 1e-30 ? (ss_res < 1e-30 ? 1.0 : 0.0) : 1.0 - ss_res / ss_tot;
  return f;
}

}  // namespace

json BenchReport::to_json() const {
  json j;
  j["config"] = config;
  json cs = json::array();
  for (const auto& c : cells)
    cs.push_back(json{{"axis", c.axis}, {"b", c.b}, {"k", c.k}, {"d", c.d}, {"seconds", c.seconds}});
  j["cells"] = cs;
  json fs_ = json::array();
  for (const auto& f : fits)
    fs_.push_back(json{{"axis", f.axis}, {"slope", f.slope}, {"intercept", f.intercept}, {"r2", f.r2}});
  j["fits"] = fs_;
  return j;
}

std::string BenchReport::to_csv() const {
  std::string out = "axis,b,k,d,seconds\n";
  for (const auto& c : cells)
    out += c.axis + "," + std::to_string(c.b) + "," + std::to_string(c.k) + "," + std::to_string(c.d) + "," +
           fmt17(c.seconds) + "\n";
  return out;
}

const BenchFit& BenchReport::fit(const std::string& axis) const {
  for (const auto& f : fits)
    if (f.axis == axis) return f;
  throw ValidationError("bench report: no fit for axis " + axis);
}

BenchReport bench_quantize(const BenchConfig& cfg) {
  cfg.validate();
  int b0 = cfg.grid_b[0], k0 = cfg.grid_k[0], d0 = cfg.grid_d[0];

  BenchReport rep;
  rep.config = json{{"grid_b", cfg.grid_b}, {"grid_k", cfg.grid_k},    {"grid_d", cfg.grid_d},
                    {"repeats", cfg.repeats}, {"tau_sa", cfg.tau_sa}, {"seed", cfg.seed}};

  Rng rng(cfg.seed);
  auto sweep = [&](const std::string& axis, const std::vector<int>& grid, auto make_dims) {
    std::vector<double> xs, ys;
    for (int v : grid) {
      auto [b, k, d] = make_dims(v);
      double t = time_cell(b, k, d, cfg.tau_sa, cfg.repeats, rng);
      rep.cells.push_back({axis, b, k, d, t});
      xs.push_back(static_cast<double>(v));
      ys.push_back(t);
    }
    if (grid.size() >= 2) rep.fits.push_back(fit_axis(axis, xs, ys));
  };
  sweep("B", cfg.grid_b, [&](int v) { return std::tuple<int, int, int>(v, k0, d0); });
  sweep("K", cfg.grid_k, [&](int v) { return std::tuple<int, int, int>(b0, v, d0); });
  sweep("D", cfg.grid_d, [&](int v) { return std::tuple<int, int, int>(b0, k0, v); });
  return rep;
}

}  // namespace stag
