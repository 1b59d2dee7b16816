#include <algorithm>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "stag/codebook.hpp"
#include "stag/error.hpp"
#include "stag/evalcli.hpp"
#include "stag/infer.hpp"
#include "stag/kernels.hpp"
#include "stag/pretrain.hpp"
#include "stag/prompting.hpp"
#include "stag/quantizer.hpp"
#include "stag/tag.hpp"
#include "stag/tensor_io.hpp"

using nlohmann::json;
namespace fs = std::filesystem;

namespace {

struct GlobalArgs {
  std::string config_path;
  uint64_t seed = 0;
  bool seed_set = false;
  std::string llm;  // empty | "stub" | endpoint URL
};

std::vector<std::string> read_lines(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw stag::ValidationError("cannot open " + path.string());
  std::vector<std::string> lines;
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (!line.empty()) lines.push_back(line);
  }
  return lines;
}

stag::Embedder make_embedder(const std::string& kind, int dim) {
  if (kind == "hash") {
    if (dim < 1) throw stag::ValidationError("--dim must be >= 1 for the hash embedder");
    return [dim](const std::string& text) { return stag::hash_embedding(text, dim); };
  }
  if (kind == "remote") {
    auto ec = stag::EmbedEndpointConfig::from_env();
    return [ec](const std::string& text) {
      stag::Mat m = stag::embed_remote({text}, ec);
      std::vector<double> v(m.a.begin(), m.a.end());
      return v;
    };
  }
  throw stag::ValidationError("unknown embedder: " + kind + " (expected hash|remote)");
}

stag::LLMClientConfig make_llm_config(const GlobalArgs& g) {
  auto cfg = stag::LLMClientConfig::from_env();
  if (!g.llm.empty() && g.llm != "stub") cfg.endpoint = g.llm;
  return cfg;
}

stag::TrainConfig train_config_from(const GlobalArgs& g) {
  stag::TrainConfig cfg;
  if (!g.config_path.empty()) cfg = stag::TrainConfig::from_file(g.config_path);
  if (g.seed_set) cfg.seed = g.seed;
  return cfg;
}

int restricted_argmax(const stag::Mat& z_row, const stag::ClassCodebook& cc,
                      const std::vector<std::string>& names) {
  stag::Mat rows(static_cast<int>(names.size()), cc.dim());
  for (size_t i = 0; i < names.size(); ++i) {
    int ci = cc.index_of(names[i]);
    if (ci < 0) throw stag::ValidationError("class not in class codebook: " + names[i]);
    for (int j = 0; j < cc.dim(); ++j) rows(static_cast<int>(i), j) = cc.embeddings(ci, j);
  }
  stag::Mat cos;
  stag::kernels::cosine_matrix(z_row, rows, cos);
  int best = 0;
  for (int i = 1; i < cos.cols; ++i)
    if (cos(0, i) > cos(0, best)) best = i;
  return best;
}

void cmd_build_codebook(const GlobalArgs& g, const std::string& vocab, const std::string& classes,
                        const std::string& embedder, int dim, const std::string& out) {
  (void)g;
  if (!classes.empty()) {
    json spec;
    try {
      spec = json::parse(stag::read_text_file(classes));
    } catch (const json::exception& e) {
      throw stag::ValidationError("classes file: " + std::string(e.what()));
    }
    auto names = spec.at("class_names").get<std::vector<std::string>>();
    auto expl = spec.at("explanations").get<std::vector<std::string>>();
    auto cc = stag::build_class_codebook(names, expl, make_embedder(embedder, dim));
    stag::save_class_codebook(cc, out);
    std::cout << "class codebook: " << cc.size() << " classes, dim " << cc.dim() << " -> " << out << "\n";
    return;
  }
  if (vocab.empty()) throw stag::ValidationError("build-codebook: --vocab or --classes required");
  auto raw = read_lines(vocab);
  auto filtered = stag::filter_vocabulary(raw);
  if (filtered.empty()) throw stag::ValidationError("build-codebook: vocabulary filtered to nothing");
  auto cb = stag::build_codebook(filtered, make_embedder(embedder, dim));
  cb.source_meta["vocab_file"] = vocab;
  cb.source_meta["embedder"] = embedder;
  stag::save_codebook(cb, out);
  std::cout << "codebook: " << cb.size() << " tokens (from " << raw.size() << "), dim " << cb.dim() << " -> "
            << out << "\n";
}

void cmd_pretrain(const GlobalArgs& g, const std::string& data, const std::string& codebook,
                  const std::string& out) {
  auto graph = stag::load_dataset(data);
  auto cb = stag::load_codebook(codebook);
  stag::TrainConfig cfg = train_config_from(g);
  auto report = stag::run_pretraining(graph, cb, cfg, out);
  const auto& first = report.epochs.front();
  const auto& last = report.epochs.back();
  std::cout << "pretrained " << graph.name << " for " << report.epochs.size() << " epochs in "
            << report.wall_seconds << "s\n"
            << "total loss " << first.total << " -> " << last.total << "\n"
            << "checkpoint: " << report.checkpoint_dir << "\n";
}

void cmd_tokenize(const GlobalArgs& g, const std::string& data, const std::string& checkpoint,
                  const std::string& codebook, const std::string& out, std::vector<int> nodes) {
  auto graph = stag::load_dataset(data);
  auto cb = stag::load_codebook(codebook);
  auto [model, tcfg] = stag::load_checkpoint(checkpoint);
  stag::NodeEmbedder emb{&model, &cb, tcfg, g.seed_set ? g.seed : tcfg.seed};
  if (nodes.empty()) {
    nodes.resize(graph.num_nodes);
    for (int i = 0; i < graph.num_nodes; ++i) nodes[i] = i;
  }
  std::ofstream os(out, std::ios::binary);
  if (!os) throw stag::RuntimeFailure("cannot open " + out);
  int k = tcfg.quantizer.hard_mode ? 1 : tcfg.quantizer.top_k;
  for (int node : nodes) {
    auto bundle = emb.bundle_for(graph, node);
    stag::Mat row = bundle.attn.row_copy(0);
    auto idx = stag::top_k_indices(row, k);
    json rec;
    rec["node"] = node;
    json toks = json::array(), weights = json::array();
    for (int i : idx) {
      toks.push_back(cb.tokens[i]);
      weights.push_back(row(0, i));
    }
    rec["tokens"] = toks;
    rec["weights"] = weights;
    os << rec.dump() << "\n";
  }
  std::cout << "tokenized " << nodes.size() << " nodes (top-" << k << ") -> " << out << "\n";
}

struct EvalArgs {
  std::string data, checkpoint, codebook, class_codebook, out, path = "linear";
  int n_way = 5, k_shot = 5, num_tasks = 20, total_queries = 2000;
};

void cmd_eval(const GlobalArgs& g, const EvalArgs& a, bool zero_shot) {
  auto graph = stag::load_dataset(a.data);
  auto cb = stag::load_codebook(a.codebook);
  auto [model, tcfg] = stag::load_checkpoint(a.checkpoint);

  stag::EvalConfig ec;
  ec.n_way = a.n_way;
  ec.k_shot = zero_shot ? 0 : a.k_shot;
  ec.num_tasks = a.num_tasks;
  ec.total_queries = a.total_queries;
  ec.path = stag::eval_path_from_string(a.path);
  if (ec.path == stag::EvalPath::llm && g.llm == "stub") ec.path = stag::EvalPath::stub;
  ec.seed = g.seed_set ? g.seed : 1;

  stag::EvalContext ctx;
  ctx.graph = &graph;
  ctx.model = &model;
  ctx.codebook = &cb;
  ctx.train_cfg = tcfg;

  stag::ClassCodebook cc;
  if (!a.class_codebook.empty()) {
    cc = stag::load_class_codebook(a.class_codebook);
    ctx.class_codebook = &cc;
  }

  std::optional<stag::LlmClient> client;
  std::optional<stag::AuditLog> audit;
  if (ec.path == stag::EvalPath::llm) {
    client.emplace(make_llm_config(g));
    ctx.llm = &*client;
    fs::create_directories(a.out);
    audit.emplace(fs::path(a.out) / "audit.jsonl");
    ctx.audit = &*audit;
  }

  stag::EvalReport rep = zero_shot ? stag::run_zeroshot_eval(ctx, ec) : stag::run_fewshot_eval(ctx, ec);
  stag::save_eval_report(rep, a.out);
  std::cout << (zero_shot ? "zero-shot" : "few-shot") << " " << ec.n_way << "-way"
            << (zero_shot ? "" : " " + std::to_string(ec.k_shot) + "-shot") << " [" << stag::to_string(ec.path)
            << "]: accuracy " << rep.mean_accuracy << " +- " << rep.std_accuracy << " over "
            << rep.task_accuracy.size() << " tasks (" << rep.total_queries << " queries) -> " << a.out << "\n";
}

void cmd_prompt_tune(const GlobalArgs& g, const std::string& data, const std::string& checkpoint,
                     const std::string& codebook, const std::string& class_codebook, const std::string& out,
                     int n_way, int k_shot, int q_per_class, int steps, double lr, double beta_p, double tau_p) {
  auto graph = stag::load_dataset(data);
  auto cb = stag::load_codebook(codebook);
  auto cc = stag::load_class_codebook(class_codebook);
  auto [model, tcfg] = stag::load_checkpoint(checkpoint);
  uint64_t seed = g.seed_set ? g.seed : 1;

  stag::Rng rng(seed);
  auto task = stag::sample_task(graph, n_way, k_shot, q_per_class, rng);
  stag::NodeEmbedder emb{&model, &cb, tcfg, seed};

  std::vector<int> support_nodes, support_cc_labels;
  for (auto [node, cls] : task.support) {
    support_nodes.push_back(node);
    int ci = cc.index_of(task.class_names[cls]);
    if (ci < 0) throw stag::ValidationError("class not in class codebook: " + task.class_names[cls]);
    support_cc_labels.push_back(ci);
  }
  stag::Mat zs = emb.embed_nodes(graph, support_nodes);

  stag::PromptTuneConfig pcfg;
  pcfg.beta_p = beta_p;
  pcfg.tau_p = tau_p;
  pcfg.tau_sa = tcfg.quantizer.tau_sa;
  pcfg.learning_rate = lr;
  pcfg.steps = steps;
  pcfg.seed = seed;
  auto params = stag::tune_prompt(zs, support_cc_labels, cb, cc, pcfg);
  stag::save_prompt(params, pcfg, out);

  int correct_raw = 0, correct_tuned = 0;
  for (auto [node, cls] : task.query) {
    stag::Mat zf = emb.embed_nodes(graph, {node});
    stag::Mat zp = stag::prompt_forward(zf, params);
    correct_raw += restricted_argmax(zf, cc, task.class_names) == cls ? 1 : 0;
    correct_tuned += restricted_argmax(zp, cc, task.class_names) == cls ? 1 : 0;
  }
  double n = static_cast<double>(task.query.size());
  json rep;
  rep["classes"] = task.class_names;
  rep["steps"] = steps;
  rep["accuracy_untuned"] = correct_raw / n;
  rep["accuracy_tuned"] = correct_tuned / n;
  stag::write_text_file(fs::path(out) / "tune_report.json", rep.dump(2) + "\n");
  std::cout << "prompt tuning (" << n_way << "-way " << k_shot << "-shot): accuracy " << correct_raw / n
            << " -> " << correct_tuned / n << " on " << task.query.size() << " held-out queries -> " << out
            << "\n";
}

void cmd_linkpred(const GlobalArgs& g, const std::string& data, const std::string& checkpoint,
                  const std::string& codebook, const std::string& pairs, double threshold,
                  const std::string& out) {
  auto graph = stag::load_dataset(data);
  auto cb = stag::load_codebook(codebook);
  auto [model, tcfg] = stag::load_checkpoint(checkpoint);
  stag::NodeEmbedder emb{&model, &cb, tcfg, g.seed_set ? g.seed : tcfg.seed};

  bool use_llm = !g.llm.empty() && g.llm != "stub";
  std::optional<stag::LlmClient> client;
  if (use_llm) client.emplace(make_llm_config(g));

  std::ofstream os(out, std::ios::binary);
  if (!os) throw stag::RuntimeFailure("cannot open " + out);
  os << "u,v,connected\n";
  int connected_count = 0, total = 0;
  for (const auto& line : read_lines(pairs)) {
    std::istringstream ls(line);
    int u, v;
    if (!(ls >> u >> v)) throw stag::ValidationError("pairs file: bad line: " + line);
    bool connected;
    if (use_llm) {
      connected = stag::llm_link_predict(emb.tokens_for(graph, u), emb.tokens_for(graph, v), *client);
    } else {
      stag::Mat zu = emb.embed_nodes(graph, {u});
      stag::Mat zv = emb.embed_nodes(graph, {v});
      connected = stag::link_predict(zu, zv, threshold);
    }
    os << u << "," << v << "," << (connected ? "1" : "0") << "\n";
    connected_count += connected ? 1 : 0;
    ++total;
  }
  std::cout << "link prediction: " << connected_count << "/" << total << " pairs connected -> " << out << "\n";
}

void cmd_edgecls(const GlobalArgs& g, const std::string& data, const std::string& checkpoint,
                 const std::string& codebook, const std::string& edge_labels, const std::string& relations,
                 const std::string& out) {
  auto graph = stag::load_dataset(data);
  auto cb = stag::load_codebook(codebook);
  auto [model, tcfg] = stag::load_checkpoint(checkpoint);
  stag::NodeEmbedder emb{&model, &cb, tcfg, g.seed_set ? g.seed : tcfg.seed};
  auto names = read_lines(relations);
  if (names.empty()) throw stag::ValidationError("edgecls: empty relations file");

  std::vector<std::tuple<int, int, int>> edges;
  for (const auto& line : read_lines(edge_labels)) {
    std::istringstream ls(line);
    int h, t, r;
    if (!(ls >> h >> t >> r)) throw stag::ValidationError("edge labels: bad line: " + line);
    edges.emplace_back(h, t, r);
  }
  if (edges.empty()) throw stag::ValidationError("edgecls: no labeled edges");

  std::vector<int> wanted;
  for (auto [h, t, r] : edges) {
    wanted.push_back(h);
    wanted.push_back(t);
  }
  std::sort(wanted.begin(), wanted.end());
  wanted.erase(std::unique(wanted.begin(), wanted.end()), wanted.end());
  stag::Mat zall = emb.embed_nodes(graph, wanted);
  auto row_of = [&](int node) {
    auto it = std::lower_bound(wanted.begin(), wanted.end(), node);
    return static_cast<int>(it - wanted.begin());
  };

  int d = zall.cols;
  stag::Mat Z(static_cast<int>(edges.size()), 2 * d);
  std::vector<int> labels;
  for (size_t i = 0; i < edges.size(); ++i) {
    auto [h, t, r] = edges[i];
    for (int j = 0; j < d; ++j) {
      Z(static_cast<int>(i), j) = zall(row_of(h), j);
      Z(static_cast<int>(i), d + j) = zall(row_of(t), j);
    }
    labels.push_back(r);
  }
  auto probe = stag::train_linear_probe(Z, labels, names, stag::ProbeConfig{});

  std::ofstream os(out, std::ios::binary);
  if (!os) throw stag::RuntimeFailure("cannot open " + out);
  os << "head,tail,gold,predicted\n";
  int correct = 0;
  for (size_t i = 0; i < edges.size(); ++i) {
    auto [h, t, r] = edges[i];
    int pred = stag::predict_linear(probe, Z.row_copy(static_cast<int>(i)));
    correct += pred == r ? 1 : 0;
    os << h << "," << t << "," << names[r] << "," << names[pred] << "\n";
  }
  std::cout << "edge classification: " << correct << "/" << edges.size() << " correct -> " << out << "\n";
}

void cmd_subgraphcls(const GlobalArgs& g, const std::string& data, const std::string& checkpoint,
                     const std::string& codebook, const std::string& centers, const std::string& class_names,
                     const std::string& out) {
  auto graph = stag::load_dataset(data);
  auto cb = stag::load_codebook(codebook);
  auto [model, tcfg] = stag::load_checkpoint(checkpoint);
  stag::NodeEmbedder emb{&model, &cb, tcfg, g.seed_set ? g.seed : tcfg.seed};
  auto names = read_lines(class_names);
  if (names.empty()) throw stag::ValidationError("subgraphcls: empty class names file");

  std::vector<std::pair<int, int>> items;
  for (const auto& line : read_lines(centers)) {
    std::istringstream ls(line);
    int node, label;
    if (!(ls >> node >> label)) throw stag::ValidationError("centers file: bad line: " + line);
    items.emplace_back(node, label);
  }
  if (items.empty()) throw stag::ValidationError("subgraphcls: no centers");

  stag::Mat Z(static_cast<int>(items.size()), graph.feature_dim);
  std::vector<int> labels;
  for (size_t i = 0; i < items.size(); ++i) {
    stag::Mat z = emb.embed_subgraph(graph, items[i].first);
    for (int j = 0; j < z.cols; ++j) Z(static_cast<int>(i), j) = z(0, j);
    labels.push_back(items[i].second);
  }
  auto probe = stag::train_linear_probe(Z, labels, names, stag::ProbeConfig{});

  std::ofstream os(out, std::ios::binary);
  if (!os) throw stag::RuntimeFailure("cannot open " + out);
  os << "center,gold,predicted\n";
  int correct = 0;
  for (size_t i = 0; i < items.size(); ++i) {
    int pred = stag::predict_linear(probe, Z.row_copy(static_cast<int>(i)));
    correct += pred == items[i].second ? 1 : 0;
    os << items[i].first << "," << names[items[i].second] << "," << names[pred] << "\n";
  }
  std::cout << "subgraph classification: " << correct << "/" << items.size() << " correct -> " << out << "\n";
}

void cmd_ablate(const GlobalArgs& g, const std::string& data, const std::string& codebook,
                const std::string& class_codebook, const std::string& out, std::vector<uint64_t> train_seeds,
                const EvalArgs& ea) {
  auto graph = stag::load_dataset(data);
  auto cb = stag::load_codebook(codebook);
  auto cc = stag::load_class_codebook(class_codebook);
  stag::TrainConfig base;
  if (!g.config_path.empty()) base = stag::TrainConfig::from_file(g.config_path);
  if (train_seeds.empty()) train_seeds = {1, 2, 3, 4, 5};

  stag::EvalConfig ec;
  ec.n_way = ea.n_way;
  ec.k_shot = ea.k_shot;
  ec.num_tasks = ea.num_tasks;
  ec.total_queries = ea.total_queries;
  ec.seed = g.seed_set ? g.seed : 1;

  auto rep = stag::run_ablation(graph, cb, cc, base, ec, train_seeds, out);
  std::cout << "variant      linear   stub\n";
  for (const auto& [name, cfg] : stag::ablation_variants(base)) {
    (void)cfg;
    std::cout << name << std::string(name.size() < 12 ? 12 - name.size() : 1, ' ')
              << rep.mean_accuracy(name, true) << "   " << rep.mean_accuracy(name, false) << "\n";
  }
  std::cout << "-> " << out << "\n";
}

void cmd_bench_quantize(const GlobalArgs& g, const std::string& out, std::vector<int> grid_b,
                        std::vector<int> grid_k, std::vector<int> grid_d, int repeats) {
  stag::BenchConfig cfg;
  if (!grid_b.empty()) cfg.grid_b = grid_b;
  if (!grid_k.empty()) cfg.grid_k = grid_k;
  if (!grid_d.empty()) cfg.grid_d = grid_d;
  cfg.repeats = repeats;
  if (g.seed_set) cfg.seed = g.seed;

  auto rep = stag::bench_quantize(cfg);
  fs::create_directories(out);
  stag::write_text_file(fs::path(out) / "bench.json", rep.to_json().dump(2) + "\n");
  stag::write_text_file(fs::path(out) / "bench.csv", rep.to_csv());
  for (const auto& f : rep.fits)
    std::cout << "axis " << f.axis << ": seconds = " << f.slope << " * x + " << f.intercept
              << "  (R^2 = " << f.r2 << ")\n";
  std::cout << "-> " << out << "\n";
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"graph tokenizer: self-supervised TAG encoding with frozen-codebook quantization"};
  app.require_subcommand(1);

  GlobalArgs g;
  app.add_option("--config", g.config_path, "JSON config file");
  auto* seed_opt = app.add_option("--seed", g.seed, "seed override");
  app.add_option("--llm", g.llm, "LLM endpoint URL, or 'stub' for the offline classifier");

  auto* build = app.add_subcommand("build-codebook", "filter a vocabulary and embed it into a frozen codebook");
  std::string b_vocab, b_classes, b_embedder = "hash", b_out;
  int b_dim = 384;
  build->add_option("--vocab", b_vocab, "vocabulary file, one token per line");
  build->add_option("--classes", b_classes, "class JSON {class_names, explanations}: build a class codebook");
  build->add_option("--embedder", b_embedder, "hash|remote")->default_val("hash");
  build->add_option("--dim", b_dim, "embedding dim for the hash embedder");
  build->add_option("--out", b_out, "output directory")->required();

  auto* pre = app.add_subcommand("pretrain", "self-supervised pre-training on a TAG dataset");
  std::string p_data, p_codebook, p_out;
  pre->add_option("--data", p_data, "dataset directory")->required();
  pre->add_option("--codebook", p_codebook, "codebook directory")->required();
  pre->add_option("--out", p_out, "output directory")->required();

  auto* tok = app.add_subcommand("tokenize", "emit top-k discrete tokens per node as JSONL");
  std::string t_data, t_checkpoint, t_codebook, t_out;
  std::vector<int> t_nodes;
  tok->add_option("--data", t_data)->required();
  tok->add_option("--checkpoint", t_checkpoint)->required();
  tok->add_option("--codebook", t_codebook)->required();
  tok->add_option("--out", t_out, "output JSONL file")->required();
  tok->add_option("--nodes", t_nodes, "node ids (default: all)")->delimiter(',');

  EvalArgs fa;
  auto* fev = app.add_subcommand("eval-fewshot", "episodic N-way k-shot evaluation");
  fev->add_option("--data", fa.data)->required();
  fev->add_option("--checkpoint", fa.checkpoint)->required();
  fev->add_option("--codebook", fa.codebook)->required();
  fev->add_option("--class-codebook", fa.class_codebook);
  fev->add_option("--out", fa.out, "report directory")->required();
  fev->add_option("--n-way", fa.n_way);
  fev->add_option("--k-shot", fa.k_shot);
  fev->add_option("--num-tasks", fa.num_tasks);
  fev->add_option("--total-queries", fa.total_queries);
  fev->add_option("--path", fa.path, "llm|stub|linear|class-codebook");

  EvalArgs za;
  auto* zev = app.add_subcommand("eval-zeroshot", "episodic N-way zero-shot evaluation");
  zev->add_option("--data", za.data)->required();
  zev->add_option("--checkpoint", za.checkpoint)->required();
  zev->add_option("--codebook", za.codebook)->required();
  zev->add_option("--class-codebook", za.class_codebook);
  zev->add_option("--out", za.out, "report directory")->required();
  zev->add_option("--n-way", za.n_way);
  zev->add_option("--num-tasks", za.num_tasks);
  zev->add_option("--total-queries", za.total_queries);
  zev->add_option("--path", za.path, "llm|stub|class-codebook");

  auto* pt = app.add_subcommand("prompt-tune", "tune the prompt gate on one few-shot task");
  std::string pt_data, pt_checkpoint, pt_codebook, pt_cc, pt_out;
  int pt_nway = 5, pt_kshot = 5, pt_qpc = 20, pt_steps = 100;
  double pt_lr = 1e-2, pt_beta = 1.0, pt_tau = 0.5;
  pt->add_option("--data", pt_data)->required();
  pt->add_option("--checkpoint", pt_checkpoint)->required();
  pt->add_option("--codebook", pt_codebook)->required();
  pt->add_option("--class-codebook", pt_cc)->required();
  pt->add_option("--out", pt_out)->required();
  pt->add_option("--n-way", pt_nway);
  pt->add_option("--k-shot", pt_kshot);
  pt->add_option("--queries-per-class", pt_qpc);
  pt->add_option("--steps", pt_steps);
  pt->add_option("--lr", pt_lr);
  pt->add_option("--beta-p", pt_beta);
  pt->add_option("--tau-p", pt_tau);

  auto* lp = app.add_subcommand("linkpred", "cosine or LLM link prediction over node pairs");
  std::string lp_data, lp_checkpoint, lp_codebook, lp_pairs, lp_out;
  double lp_threshold = 0.5;
  lp->add_option("--data", lp_data)->required();
  lp->add_option("--checkpoint", lp_checkpoint)->required();
  lp->add_option("--codebook", lp_codebook)->required();
  lp->add_option("--pairs", lp_pairs, "TSV of node pairs")->required();
  lp->add_option("--threshold", lp_threshold);
  lp->add_option("--out", lp_out, "output CSV")->required();

  auto* ec_ = app.add_subcommand("edgecls", "linear relation classification on concatenated embeddings");
  std::string ec_data, ec_checkpoint, ec_codebook, ec_edges, ec_relations, ec_out;
  ec_->add_option("--data", ec_data)->required();
  ec_->add_option("--checkpoint", ec_checkpoint)->required();
  ec_->add_option("--codebook", ec_codebook)->required();
  ec_->add_option("--edge-labels", ec_edges, "TSV head tail relation_index")->required();
  ec_->add_option("--relations", ec_relations, "relation names, one per line")->required();
  ec_->add_option("--out", ec_out, "output CSV")->required();

  auto* sg = app.add_subcommand("subgraphcls", "linear classification of mean-pooled subgraph embeddings");
  std::string sg_data, sg_checkpoint, sg_codebook, sg_centers, sg_classes, sg_out;
  sg->add_option("--data", sg_data)->required();
  sg->add_option("--checkpoint", sg_checkpoint)->required();
  sg->add_option("--codebook", sg_codebook)->required();
  sg->add_option("--centers", sg_centers, "TSV center label_index")->required();
  sg->add_option("--class-names", sg_classes, "class names, one per line")->required();
  sg->add_option("--out", sg_out, "output CSV")->required();

  EvalArgs aa;
  auto* ab = app.add_subcommand("ablate", "train and compare full / no_fusion / no_kl / no_soft");
  std::string ab_data, ab_codebook, ab_cc, ab_out;
  std::vector<uint64_t> ab_seeds;
  ab->add_option("--data", ab_data)->required();
  ab->add_option("--codebook", ab_codebook)->required();
  ab->add_option("--class-codebook", ab_cc)->required();
  ab->add_option("--out", ab_out)->required();
  ab->add_option("--train-seeds", ab_seeds, "comma-separated training seeds")->delimiter(',');
  ab->add_option("--n-way", aa.n_way);
  ab->add_option("--k-shot", aa.k_shot);
  ab->add_option("--num-tasks", aa.num_tasks);
  ab->add_option("--total-queries", aa.total_queries);

  auto* bq = app.add_subcommand("bench-quantize", "time soft assignment across a (B, K, d) grid");
  std::string bq_out;
  std::vector<int> bq_b, bq_k, bq_d;
  int bq_repeats = 5;
  bq->add_option("--out", bq_out)->required();
  bq->add_option("--grid-b", bq_b)->delimiter(',');
  bq->add_option("--grid-k", bq_k)->delimiter(',');
  bq->add_option("--grid-d", bq_d)->delimiter(',');
  bq->add_option("--repeats", bq_repeats);

  for (auto* sub : {build, pre, tok, fev, zev, pt, lp, ec_, sg, ab, bq}) sub->fallthrough();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 1;
  }
  g.seed_set = seed_opt->count() > 0;

  try {
    if (build->parsed()) cmd_build_codebook(g, b_vocab, b_classes, b_embedder, b_dim, b_out);
    if (pre->parsed()) cmd_pretrain(g, p_data, p_codebook, p_out);
    if (tok->parsed()) cmd_tokenize(g, t_data, t_checkpoint, t_codebook, t_out, t_nodes);
    if (fev->parsed()) cmd_eval(g, fa, false);
    if (zev->parsed()) cmd_eval(g, za, true);
    if (pt->parsed())
      cmd_prompt_tune(g, pt_data, pt_checkpoint, pt_codebook, pt_cc, pt_out, pt_nway, pt_kshot, pt_qpc,
                      pt_steps, pt_lr, pt_beta, pt_tau);
    if (lp->parsed()) cmd_linkpred(g, lp_data, lp_checkpoint, lp_codebook, lp_pairs, lp_threshold, lp_out);
    if (ec_->parsed()) cmd_edgecls(g, ec_data, ec_checkpoint, ec_codebook, ec_edges, ec_relations, ec_out);
    if (sg->parsed()) cmd_subgraphcls(g, sg_data, sg_checkpoint, sg_codebook, sg_centers, sg_classes, sg_out);
    if (ab->parsed()) cmd_ablate(g, ab_data, ab_codebook, ab_cc, ab_out, ab_seeds, aa);
    if (bq->parsed()) cmd_bench_quantize(g, bq_out, bq_b, bq_k, bq_d, bq_repeats);
  } catch (const stag::ValidationError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
  return 0;
}
