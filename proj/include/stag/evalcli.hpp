#pragma once

#include <filesystem>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "stag/codebook.hpp"
#include "stag/infer.hpp"
#include "stag/pretrain.hpp"
#include "stag/tag.hpp"

namespace stag {

enum class EvalPath { llm, stub, linear, class_codebook };
EvalPath eval_path_from_string(const std::string& s);  // llm|stub|linear|class-codebook
std::string to_string(EvalPath p);

struct EvalConfig {
  int n_way = 5;
  int k_shot = 5;
  int num_tasks = 20;
  int total_queries = 2000;
  EvalPath path = EvalPath::linear;
  uint64_t seed = 1;

  void validate() const;
  nlohmann::json to_json() const;
  static EvalConfig from_json(const nlohmann::json& j);
};

// Balanced per-class query count: ceil(ceil(total_queries / num_tasks) / n_way).
int queries_per_class(const EvalConfig& cfg);

struct QueryRecord {
  int task = 0;
  int node = 0;
  std::string gold;
  std::string predicted;
  bool correct = false;
};

struct EvalReport {
  EvalConfig config;
  std::vector<double> task_accuracy;
  std::vector<int> task_queries;
  double mean_accuracy = 0.0;
  double std_accuracy = 0.0;  // sample std over tasks, 0 for a single task
  int total_queries = 0;
  std::vector<QueryRecord> records;

  nlohmann::json to_json() const;
  std::string tasks_csv() const;
  std::string queries_csv() const;
};

// report.json + tasks.csv + queries.csv under dir.
void save_eval_report(const EvalReport& r, const std::filesystem::path& dir);

// Read-only state shared by evaluation paths. class_codebook is required for
// the stub and class-codebook paths, llm for the llm path.
struct EvalContext {
  const TextAttributedGraph* graph = nullptr;
  ModelParams* model = nullptr;
  const Codebook* codebook = nullptr;
  const ClassCodebook* class_codebook = nullptr;
  TrainConfig train_cfg;
  LlmClient* llm = nullptr;
  AuditLog* audit = nullptr;
};

EvalReport run_fewshot_eval(const EvalContext& ctx, const EvalConfig& cfg);
// k_shot forced to 0; the linear path needs support examples and is rejected.
EvalReport run_zeroshot_eval(const EvalContext& ctx, const EvalConfig& cfg);

// Ablation matrix: full / no_fusion / no_kl / no_soft, in that order.
std::vector<std::pair<std::string, TrainConfig>> ablation_variants(const TrainConfig& base);

struct AblationEntry {
  std::string variant;
  uint64_t train_seed = 0;
  double linear_accuracy = 0.0;
  double stub_accuracy = 0.0;
  double initial_total = 0.0;
  double final_total = 0.0;
};

struct AblationReport {
  nlohmann::json base_config;
  EvalConfig eval_config;
  std::vector<AblationEntry> entries;  // variant-major, seeds inner

  nlohmann::json to_json() const;
  std::string to_csv() const;
  double mean_accuracy(const std::string& variant, bool linear_path) const;
  const AblationEntry& entry(const std::string& variant, uint64_t train_seed) const;
};

// Trains each variant per seed, then evaluates linear-probe and stub paths on
// episodes fixed by eval_cfg.seed (identical across variants).
AblationReport run_ablation(const TextAttributedGraph& g, const Codebook& cb, const ClassCodebook& cc,
                            const TrainConfig& base, const EvalConfig& eval_cfg,
                            const std::vector<uint64_t>& train_seeds, const std::filesystem::path& work_dir);

struct BenchConfig {
  std::vector<int> grid_b{256, 512, 768, 1024};
  std::vector<int> grid_k{512, 1024, 1536, 2048};
  std::vector<int> grid_d{64, 128, 192, 256};
  int repeats = 5;
  double tau_sa = 0.1;
  uint64_t seed = 1;

  void validate() const;
};

struct BenchCell {
  std::string axis;  // which sweep this cell belongs to: B, K, or D
  int b = 0, k = 0, d = 0;
  double seconds = 0.0;
};

struct BenchFit {
  std::string axis;
  double slope = 0.0;
  double intercept = 0.0;
  double r2 = 0.0;
};

struct BenchReport {
  nlohmann::json config;
  std::vector<BenchCell> cells;
  std::vector<BenchFit> fits;  // one per axis with >= 2 sweep points

  nlohmann::json to_json() const;
  std::string to_csv() const;
  const BenchFit& fit(const std::string& axis) const;
};

// Times soft assignment + quantization per grid cell (median of repeats) and
// fits seconds linearly along each axis with the other two held at their
// first grid values.
BenchReport bench_quantize(const BenchConfig& cfg);

}  // namespace stag
