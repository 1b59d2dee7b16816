#include "stag/infer.hpp"

#include <algorithm>
#include <cctype>
#include <chrono>
#include <cmath>
#include <thread>

#include <httplib.h>
#include <nlohmann/json.hpp>

#include "stag/error.hpp"
#include "stag/kernels.hpp"

namespace stag {

using nlohmann::json;
namespace fs = std::filesystem;

namespace {

std::string join_tokens(const std::vector<std::string>& tokens) {
  std::string out;
  for (size_t i = 0; i < tokens.size(); ++i) {
    if (i > 0) out += ", ";
    out += tokens[i];
  }
  return out;
}

std::string bracketed(const std::vector<std::string>& items) { return "[" + join_tokens(items) + "]"; }

void check_tokens(const std::vector<std::string>& tokens, const char* what) {
  if (tokens.empty()) throw ValidationError(std::string(what) + ": token list is empty");
  for (const auto& t : tokens)
    if (t.empty()) throw ValidationError(std::string(what) + ": empty token");
}

std::string categories_line(const std::vector<std::string>& candidates) {
  return "You are an AI assistant tasked with classifying input word sequences into one of the following "
         "categories: " +
         bracketed(candidates) + ".";
}

constexpr const char* kStrictLine = "You must choose strictly from these categories and no others.";
constexpr const char* kOutputLine = "**IMPORTANT:** Output only the category name and nothing else.";

}  // namespace

std::string PromptBundle::user_text() const { return "Input: " + bracketed(test_tokens); }

std::string PromptBundle::full_text() const { return system_text + "\n\n" + user_text(); }

PromptBundle render_fewshot_prompt(const FewShotTask& task,
                                   const std::vector<std::vector<std::string>>& support_tokens,
                                   const std::vector<std::string>& test_tokens) {
  if (task.class_names.empty()) throw ValidationError("render_fewshot_prompt: no candidate classes");
  if (task.support.empty())
    throw ValidationError("render_fewshot_prompt: no support examples (use the zero-shot renderer)");
  if (task.support.size() != static_cast<size_t>(task.n_way) * task.k_shot)
    throw ValidationError("render_fewshot_prompt: support size != n_way * k_shot");
  if (support_tokens.size() != task.support.size())
    throw ValidationError("render_fewshot_prompt: one token list per support example required");
  check_tokens(test_tokens, "render_fewshot_prompt");

  PromptBundle b;
  b.candidate_classes = task.class_names;
  b.test_tokens = test_tokens;
  for (size_t i = 0; i < task.support.size(); ++i) {
    check_tokens(support_tokens[i], "render_fewshot_prompt");
    int cls = task.support[i].second;
    if (cls < 0 || cls >= static_cast<int>(task.class_names.size()))
      throw ValidationError("render_fewshot_prompt: support class outside candidate list");
    b.support_examples.emplace_back(support_tokens[i], task.class_names[cls]);
  }

  std::string examples;
  for (size_t i = 0; i < b.support_examples.size(); ++i) {
    if (i > 0) examples += "\n\n";
    examples += "Input: " + bracketed(b.support_examples[i].first) + "\nCategory: " + b.support_examples[i].second;
  }

  b.system_text = categories_line(b.candidate_classes) + "\n\n" + kStrictLine + "\n\n" +
                  "Each category has characteristic patterns shown in its examples." + "\n\n" +
                  "Here are examples of input sequences and their corresponding categories to guide you:" + "\n\n" +
                  examples + "\n\n" +
                  "When given a new input sequence, identify its key patterns and match them to the most similar "
                  "category from the examples." +
                  "\n\n" + "If no category is a clear match, choose the closest one." + "\n\n" + kOutputLine;
  return b;
}

PromptBundle render_zeroshot_prompt(const std::vector<std::string>& candidate_classes,
                                    const std::vector<std::string>& test_tokens) {
  if (candidate_classes.empty()) throw ValidationError("render_zeroshot_prompt: no candidate classes");
  check_tokens(test_tokens, "render_zeroshot_prompt");

  PromptBundle b;
  b.candidate_classes = candidate_classes;
  b.test_tokens = test_tokens;
  b.system_text = categories_line(candidate_classes) + "\n\n" + kStrictLine + "\n\n" +
                  "When given a new input sequence, classify it into one of the categories." + "\n\n" + kOutputLine;
  return b;
}

std::pair<std::string, std::string> render_link_prompt(const std::vector<std::string>& tokens_a,
                                                       const std::vector<std::string>& tokens_b) {
  check_tokens(tokens_a, "render_link_prompt");
  check_tokens(tokens_b, "render_link_prompt");
  std::string system_text =
      "You are an AI assistant that decides whether two nodes in a graph are connected.\n\n"
      "Each node is described by a sequence of tokens.\n\n"
      "**IMPORTANT:** Output only yes or no and nothing else.";
  std::string user_text = "Node A: " + bracketed(tokens_a) + "\nNode B: " + bracketed(tokens_b) +
                          "\nAre node A and node B connected?";
  return {system_text, user_text};
}

namespace {

bool is_edge_punct(char c) {
  static const std::string punct = ".,;:!?'\"()[]{}<>*`";
  return punct.find(c) != std::string::npos;
}

std::string normalize_reply(const std::string& s) {
  size_t b = 0, e = s.size();
  while (b < e && (std::isspace(static_cast<unsigned char>(s[b])) || is_edge_punct(s[b]))) ++b;
  while (e > b && (std::isspace(static_cast<unsigned char>(s[e - 1])) || is_edge_punct(s[e - 1]))) --e;
  std::string out = s.substr(b, e - b);
  for (char& c : out) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
  return out;
}

size_t longest_common_substring(const std::string& a, const std::string& b) {
  if (a.empty() || b.empty()) return 0;
  std::vector<size_t> prev(b.size() + 1, 0), cur(b.size() + 1, 0);
  size_t best = 0;
  for (size_t i = 1; i <= a.size(); ++i) {
    for (size_t j = 1; j <= b.size(); ++j) {
      cur[j] = (a[i - 1] == b[j - 1]) ? prev[j - 1] + 1 : 0;
      best = std::max(best, cur[j]);
    }
    std::swap(prev, cur);
  }
  return best;
}

}  // namespace

std::string parse_class_reply(const std::string& reply, const std::vector<std::string>& candidates) {
  if (candidates.empty()) throw ValidationError("parse_class_reply: no candidates");
  std::string r = normalize_reply(reply);
  if (r.empty()) throw RuntimeFailure("parse_class_reply: empty reply");
  for (const auto& c : candidates)
    if (normalize_reply(c) == r) return c;
  size_t best_score = 0;
  size_t best = 0;
  for (size_t i = 0; i < candidates.size(); ++i) {
    size_t score = longest_common_substring(normalize_reply(candidates[i]), r);
    if (score > best_score) {
      best_score = score;
      best = i;
    }
  }
  return candidates[best];
}

bool parse_yes_no(const std::string& reply) {
  std::string r = normalize_reply(reply);
  if (r.empty()) throw RuntimeFailure("parse_yes_no: empty reply");
  if (r == "yes") return true;
  if (r == "no") return false;
  bool has_yes = r.find("yes") != std::string::npos;
  bool has_no = r.find("no") != std::string::npos;
  if (has_yes && !has_no) return true;
  if (has_no && !has_yes) return false;
  throw RuntimeFailure("parse_yes_no: unparseable reply: " + reply);
}

void LLMClientConfig::validate() const {
  if (endpoint.empty()) throw ValidationError("llm client: endpoint required (set LLM_ENDPOINT)");
  if (model.empty()) throw ValidationError("llm client: model required (set LLM_MODEL)");
  if (temperature < 0.0) throw ValidationError("llm client: temperature must be >= 0");
  if (max_tokens < 1) throw ValidationError("llm client: max_tokens must be >= 1");
  if (max_retries < 0) throw ValidationError("llm client: max_retries must be >= 0");
  if (timeout_sec < 1) throw ValidationError("llm client: timeout_sec must be >= 1");
  if (max_in_flight < 1) throw ValidationError("llm client: max_in_flight must be >= 1");
}

LLMClientConfig LLMClientConfig::from_env() {
  LLMClientConfig cfg;
  if (const char* v = std::getenv("LLM_ENDPOINT")) cfg.endpoint = v;
  if (const char* v = std::getenv("LLM_API_KEY")) cfg.api_key = v;
  if (const char* v = std::getenv("LLM_MODEL")) cfg.model = v;
  return cfg;
}

AuditLog::AuditLog(const fs::path& path) : out_(path, std::ios::binary | std::ios::trunc) {
  if (!out_) throw RuntimeFailure("audit log: cannot open " + path.string());
}

void AuditLog::append(const std::string& task_id, const std::string& prompt, const std::string& raw_reply,
                      const std::string& parsed, const std::string& gold) {
  json j;
  j["task_id"] = task_id;
  j["prompt"] = prompt;
  j["raw_reply"] = raw_reply;
  j["parsed"] = parsed;
  j["gold"] = gold;
  std::lock_guard<std::mutex> lock(mu_);
  out_ << j.dump() << "\n";
  out_.flush();
}

namespace {

// Splits "http://host:port/path" into base and path.
std::pair<std::string, std::string> split_url(const std::string& url) {
  size_t scheme = url.find("://");
  if (scheme == std::string::npos) throw ValidationError("bad endpoint url: " + url);
  size_t path = url.find('/', scheme + 3);
  if (path == std::string::npos) return {url, "/"};
  return {url.substr(0, path), url.substr(path)};
}

}  // namespace

LlmClient::LlmClient(LLMClientConfig cfg) : cfg_(std::move(cfg)) { cfg_.validate(); }

std::string LlmClient::chat(const std::string& system_text, const std::string& user_text) {
  {
    std::unique_lock<std::mutex> lock(mu_);
    cv_.wait(lock, [&] { return in_flight_ < cfg_.max_in_flight; });
    ++in_flight_;
  }
  struct Release {
    LlmClient* c;
    ~Release() {
      std::lock_guard<std::mutex> lock(c->mu_);
      --c->in_flight_;
      c->cv_.notify_one();
    }
  } release{this};

  auto [base, path] = split_url(cfg_.endpoint);
  json body;
  body["model"] = cfg_.model;
  body["messages"] = json::array({json{{"role", "system"}, {"content", system_text}},
                                  json{{"role", "user"}, {"content", user_text}}});
  body["temperature"] = cfg_.temperature;
  body["max_tokens"] = cfg_.max_tokens;
  std::string payload = body.dump();

  std::string last_err;
  for (int attempt = 0; attempt <= cfg_.max_retries; ++attempt) {
    if (attempt > 0) std::this_thread::sleep_for(std::chrono::milliseconds(100 * attempt));
    httplib::Client cli(base);
    cli.set_connection_timeout(cfg_.timeout_sec);
    cli.set_read_timeout(cfg_.timeout_sec);
    httplib::Headers headers;
    if (!cfg_.api_key.empty()) headers.emplace("Authorization", "Bearer " + cfg_.api_key);
    auto res = cli.Post(path, headers, payload, "application/json");
    if (!res) {
      last_err = "connection failed: " + httplib::to_string(res.error());
      continue;  // transient
    }
    if (res->status >= 500) {
      last_err = "server error " + std::to_string(res->status);
      continue;  // transient
    }
    if (res->status != 200)
      throw RuntimeFailure("llm chat: endpoint returned status " + std::to_string(res->status));

    json reply;
    try {
      reply = json::parse(res->body);
    } catch (const json::exception& e) {
      throw RuntimeFailure("llm chat: malformed JSON reply: " + std::string(e.what()));
    }
    if (!reply.contains("choices") || !reply["choices"].is_array() || reply["choices"].empty())
      throw RuntimeFailure("llm chat: reply lacks choices");
    const auto& choice = reply["choices"][0];
    if (choice.contains("message") && choice["message"].contains("content"))
      return choice["message"]["content"].get<std::string>();
    if (choice.contains("text")) return choice["text"].get<std::string>();
    throw RuntimeFailure("llm chat: choice lacks message content");
  }
  throw RuntimeFailure("llm chat: retries exhausted; last error: " + last_err);
}

std::string llm_classify(const PromptBundle& bundle, LlmClient& client, AuditLog* audit,
                         const std::string& task_id, const std::string& gold) {
  if (bundle.candidate_classes.empty()) throw ValidationError("llm_classify: no candidate classes");
  std::string raw = client.chat(bundle.system_text, bundle.user_text());
  std::string parsed = parse_class_reply(raw, bundle.candidate_classes);
  if (audit) audit->append(task_id, bundle.full_text(), raw, parsed, gold);
  return parsed;
}

std::string stub_classify(const PromptBundle& bundle, const Codebook& cb, const ClassCodebook& cc) {
  cb.validate();
  cc.validate();
  if (bundle.candidate_classes.empty()) throw ValidationError("stub_classify: no candidate classes");
  check_tokens(bundle.test_tokens, "stub_classify");
  if (cb.dim() != cc.dim()) throw ValidationError("stub_classify: codebook dim mismatch");

  Mat mean(1, cb.dim());
  for (const auto& t : bundle.test_tokens) {
    int idx = cb.index_of(t);
    if (idx < 0) throw ValidationError("stub_classify: unknown token: " + t);
    for (int j = 0; j < cb.dim(); ++j) mean(0, j) += cb.embeddings(idx, j);
  }
  for (double& v : mean.a) v /= static_cast<double>(bundle.test_tokens.size());

  Mat rows(static_cast<int>(bundle.candidate_classes.size()), cc.dim());
  for (size_t i = 0; i < bundle.candidate_classes.size(); ++i) {
    int ci = cc.index_of(bundle.candidate_classes[i]);
    if (ci < 0) throw ValidationError("stub_classify: class not in class codebook: " + bundle.candidate_classes[i]);
    for (int j = 0; j < cc.dim(); ++j) rows(static_cast<int>(i), j) = cc.embeddings(ci, j);
  }
  Mat cos;
  kernels::cosine_matrix(mean, rows, cos);
  int best = 0;
  for (int i = 1; i < cos.cols; ++i)
    if (cos(0, i) > cos(0, best)) best = i;
  return bundle.candidate_classes[best];
}

void ProbeConfig::validate() const {
  if (steps < 1) throw ValidationError("probe: steps must be >= 1");
  if (learning_rate <= 0.0) throw ValidationError("probe: learning_rate must be > 0");
  if (weight_decay < 0.0) throw ValidationError("probe: weight_decay must be >= 0");
}

void LinearProbe::validate() const {
  if (w.rows < 1 || w.cols < 1) throw ValidationError("probe: empty weight matrix");
  if (static_cast<int>(class_names.size()) != w.rows)
    throw ValidationError("probe: class_names size != weight rows");
}

LinearProbe train_linear_probe(const Mat& z, const std::vector<int>& labels,
                               const std::vector<std::string>& class_names, const ProbeConfig& cfg) {
  cfg.validate();
  int n_classes = static_cast<int>(class_names.size());
  if (n_classes < 1) throw ValidationError("train_linear_probe: no classes");
  if (z.rows < 1) throw ValidationError("train_linear_probe: no examples");
  if (z.rows != static_cast<int>(labels.size()))
    throw ValidationError("train_linear_probe: labels length mismatch");
  std::vector<int> counts(n_classes, 0);
  for (int l : labels) {
    if (l < 0 || l >= n_classes) throw ValidationError("train_linear_probe: label out of range");
    ++counts[l];
  }
  for (int c = 0; c < n_classes; ++c)
    if (counts[c] == 0)
      throw ValidationError("train_linear_probe: class without examples: " + class_names[c]);

  LinearProbe probe;
  probe.w = Mat(n_classes, z.cols);
  probe.class_names = class_names;

  Mat logits, probs, grad(n_classes, z.cols);
  double inv_n = 1.0 / z.rows;
  for (int step = 0; step < cfg.steps; ++step) {
    kernels::matmul(z, false, probe.w, true, logits);
    kernels::softmax_rows(logits, probs);
    for (int i = 0; i < z.rows; ++i) probs(i, labels[i]) -= 1.0;
    kernels::matmul(probs, true, z, false, grad);
    for (int c = 0; c < n_classes; ++c)
      for (int j = 0; j < z.cols; ++j)
        probe.w(c, j) -= cfg.learning_rate * (grad(c, j) * inv_n + cfg.weight_decay * probe.w(c, j));
  }
  if (!probe.w.all_finite()) throw RuntimeFailure("train_linear_probe: diverged to non-finite weights");
  return probe;
}

int predict_linear(const LinearProbe& probe, const Mat& z_row) {
  probe.validate();
  if (z_row.rows != 1) throw ValidationError("predict_linear: expects a single row");
  if (z_row.cols != probe.input_dim()) throw ValidationError("predict_linear: dim mismatch");
  Mat logits;
  kernels::matmul(z_row, false, probe.w, true, logits);
  int best = 0;
  for (int c = 1; c < logits.cols; ++c)
    if (logits(0, c) > logits(0, best)) best = c;
  return best;
}

bool link_predict(const Mat& z_u, const Mat& z_v, double threshold) {
  if (z_u.rows != 1 || z_v.rows != 1) throw ValidationError("link_predict: expects single rows");
  if (z_u.cols != z_v.cols) throw ValidationError("link_predict: dim mismatch");
  if (z_u.row_norm(0) == 0.0 || z_v.row_norm(0) == 0.0) throw ValidationError("link_predict: zero-norm input");
  Mat cos;
  kernels::cosine_matrix(z_u, z_v, cos);
  return cos(0, 0) > threshold;
}

bool llm_link_predict(const std::vector<std::string>& tokens_a, const std::vector<std::string>& tokens_b,
                      LlmClient& client, AuditLog* audit, const std::string& task_id, const std::string& gold) {
  auto [system_text, user_text] = render_link_prompt(tokens_a, tokens_b);
  std::string raw = client.chat(system_text, user_text);
  bool connected = parse_yes_no(raw);
  if (audit) audit->append(task_id, system_text + "\n\n" + user_text, raw, connected ? "yes" : "no", gold);
  return connected;
}

int edge_classify(const LinearProbe& probe, const Mat& z_head, const Mat& z_tail) {
  if (z_head.rows != 1 || z_tail.rows != 1) throw ValidationError("edge_classify: expects single rows");
  if (z_head.cols != z_tail.cols) throw ValidationError("edge_classify: dim mismatch");
  if (probe.input_dim() != 2 * z_head.cols)
    throw ValidationError("edge_classify: probe expects concatenated head and tail");
  Mat cat(1, 2 * z_head.cols);
  for (int j = 0; j < z_head.cols; ++j) {
    cat(0, j) = z_head(0, j);
    cat(0, z_head.cols + j) = z_tail(0, j);
  }
  return predict_linear(probe, cat);
}

Mat subgraph_embed(const Mat& zf_rows) {
  if (zf_rows.rows < 1) throw ValidationError("subgraph_embed: empty subgraph");
  Mat out(1, zf_rows.cols);
  for (int i = 0; i < zf_rows.rows; ++i)
    for (int j = 0; j < zf_rows.cols; ++j) out(0, j) += zf_rows(i, j);
  for (double& v : out.a) v /= static_cast<double>(zf_rows.rows);
  return out;
}

}  // namespace stag
