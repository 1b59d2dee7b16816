#pragma once

#include <condition_variable>
#include <filesystem>
#include <fstream>
#include <mutex>
#include <string>
#include <utility>
#include <vector>

#include "stag/codebook.hpp"
#include "stag/mat.hpp"
#include "stag/tag.hpp"

namespace stag {

// Rendered classification prompt. full_text() is the canonical string form;
// system_text/user_text() split it for chat endpoints.
struct PromptBundle {
  std::string system_text;
  std::vector<std::pair<std::vector<std::string>, std::string>> support_examples;  // (tokens, class name)
  std::vector<std::string> test_tokens;
  std::vector<std::string> candidate_classes;

  std::string user_text() const;
  std::string full_text() const;  // system_text + blank line + user_text()
};

// support_tokens[i] are the tokens of task.support[i]. Requires a non-empty
// support set; zero-shot callers use render_zeroshot_prompt instead.
PromptBundle render_fewshot_prompt(const FewShotTask& task,
                                   const std::vector<std::vector<std::string>>& support_tokens,
                                   const std::vector<std::string>& test_tokens);

PromptBundle render_zeroshot_prompt(const std::vector<std::string>& candidate_classes,
                                    const std::vector<std::string>& test_tokens);

// (system, user) strings asking for a yes/no connectivity judgment.
std::pair<std::string, std::string> render_link_prompt(const std::vector<std::string>& tokens_a,
                                                       const std::vector<std::string>& tokens_b);

// Normalizes the reply (trim whitespace and edge punctuation, lowercase) and
// matches candidates exactly; otherwise falls back to the candidate with the
// longest common substring, earliest candidate on ties. Empty reply is an error.
std::string parse_class_reply(const std::string& reply, const std::vector<std::string>& candidates);

// Same normalization, then "yes"/"no"; a reply containing exactly one of the
// two words also parses. Anything else fails.
bool parse_yes_no(const std::string& reply);

struct LLMClientConfig {
  std::string endpoint;
  std::string model;
  std::string api_key;
  double temperature = 0.0;
  int max_tokens = 16;
  int max_retries = 3;
  int timeout_sec = 60;
  int max_in_flight = 4;

  void validate() const;
  static LLMClientConfig from_env();  // LLM_ENDPOINT / LLM_API_KEY / LLM_MODEL
};

// JSONL audit trail: one {"task_id","prompt","raw_reply","parsed","gold"}
// object per line, flushed as written.
class AuditLog {
 public:
  explicit AuditLog(const std::filesystem::path& path);
  void append(const std::string& task_id, const std::string& prompt, const std::string& raw_reply,
              const std::string& parsed, const std::string& gold);

 private:
  std::ofstream out_;
  std::mutex mu_;
};

// Chat-completions client; enforces cfg.max_in_flight across threads and
// retries connection failures and 5xx responses.
class LlmClient {
 public:
  explicit LlmClient(LLMClientConfig cfg);
  std::string chat(const std::string& system_text, const std::string& user_text);
  const LLMClientConfig& config() const { return cfg_; }

 private:
  LLMClientConfig cfg_;
  std::mutex mu_;
  std::condition_variable cv_;
  int in_flight_ = 0;
};

std::string llm_classify(const PromptBundle& bundle, LlmClient& client, AuditLog* audit = nullptr,
                         const std::string& task_id = "", const std::string& gold = "");

// Offline deterministic substitute: mean of test-token embeddings classified
// against the class codebook by cosine. Ignores support examples.
std::string stub_classify(const PromptBundle& bundle, const Codebook& cb, const ClassCodebook& cc);

struct ProbeConfig {
  int steps = 500;
  double learning_rate = 0.5;
  double weight_decay = 1e-4;

  void validate() const;
};

struct LinearProbe {
  Mat w;  // num_classes x input_dim
  std::vector<std::string> class_names;

  int num_classes() const { return w.rows; }
  int input_dim() const { return w.cols; }
  void validate() const;
};

// Full-batch softmax regression without bias, weight decay included in the
// gradient. Every class in class_names needs at least one example.
LinearProbe train_linear_probe(const Mat& z, const std::vector<int>& labels,
                               const std::vector<std::string>& class_names, const ProbeConfig& cfg);
int predict_linear(const LinearProbe& probe, const Mat& z_row);

// cos(z_u, z_v) > threshold, strict. Zero-norm inputs are errors.
bool link_predict(const Mat& z_u, const Mat& z_v, double threshold = 0.5);
bool llm_link_predict(const std::vector<std::string>& tokens_a, const std::vector<std::string>& tokens_b,
                      LlmClient& client, AuditLog* audit = nullptr, const std::string& task_id = "",
                      const std::string& gold = "");

// Relation classification over [z_head ; z_tail]; probe input_dim must be 2 d_x.
int edge_classify(const LinearProbe& probe, const Mat& z_head, const Mat& z_tail);

// Arithmetic mean of embedding rows.
Mat subgraph_embed(const Mat& zf_rows);

}  // namespace stag
