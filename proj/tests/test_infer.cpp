#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <atomic>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <thread>

#include "doctest.h"
#include "httplib.h"
#include "nlohmann/json.hpp"
#include "stag/infer.hpp"
#include "stag/tensor_io.hpp"
#include "support/synthetic.hpp"

using namespace stag;
using nlohmann::json;
namespace fs = std::filesystem;

namespace {

const std::vector<std::string> kClasses3 = {"Research Paper", "Dataset", "Software"};
const std::vector<std::string> kTestTokens = {"algorithm", "computation", "optimization"};

FewShotTask golden_task() {
  FewShotTask t;
  t.n_way = 3;
  t.k_shot = 1;
  t.class_names = kClasses3;
  t.class_ids = {0, 1, 2};
  t.support = {{0, 0}, {1, 1}, {2, 2}};
  return t;
}

std::vector<std::vector<std::string>> golden_support_tokens() {
  return {{"research", "methodology", "experiment"},
          {"benchmark", "statistics", "collection"},
          {"implementation", "code", "library"}};
}

std::string golden(const char* name) { return read_text_file(fs::path(TEST_DIR) / "golden" / name); }

// Chat-completions mock; the handler sees the 1-based hit count.
struct MockChatServer {
  httplib::Server svr;
  std::thread th;
  int port = 0;
  std::atomic<int> hits{0};

  explicit MockChatServer(std::function<void(const httplib::Request&, httplib::Response&, int)> handler) {
    svr.Post("/v1/chat/completions", [this, handler](const httplib::Request& req, httplib::Response& res) {
      handler(req, res, ++hits);
    });
    port = svr.bind_to_any_port("127.0.0.1");
    th = std::thread([this] { svr.listen_after_bind(); });
    svr.wait_until_ready();
  }
  ~MockChatServer() {
    svr.stop();
    th.join();
  }
  LLMClientConfig config() const {
    LLMClientConfig cfg;
    cfg.endpoint = "http://127.0.0.1:" + std::to_string(port) + "/v1/chat/completions";
    cfg.model = "test-model";
    cfg.api_key = "sesame";
    cfg.max_retries = 3;
    cfg.timeout_sec = 5;
    return cfg;
  }
};

void reply_content(httplib::Response& res, const std::string& content) {
  json choice;
  choice["message"]["content"] = content;
  json body;
  body["choices"] = json::array({choice});
  res.set_content(body.dump(), "application/json");
}

}  // namespace

TEST_CASE("few-shot prompt matches the golden rendering byte for byte") {
  PromptBundle b = render_fewshot_prompt(golden_task(), golden_support_tokens(), kTestTokens);
  CHECK(b.full_text() == golden("fewshot_3way_1shot.txt"));
  CHECK(b.user_text() == "Input: [algorithm, computation, optimization]");
  CHECK(b.candidate_classes == kClasses3);
  CHECK(b.support_examples.size() == 3);
  CHECK(b.support_examples[1].second == "Dataset");
}

TEST_CASE("zero-shot prompt matches the golden rendering byte for byte") {
  std::vector<std::string> classes4 = {"Research Paper", "Dataset", "Software", "Survey Paper"};
  PromptBundle b = render_zeroshot_prompt(classes4, kTestTokens);
  CHECK(b.full_text() == golden("zeroshot_4way.txt"));
  CHECK(b.support_examples.empty());
}

TEST_CASE("link prompt matches the golden rendering byte for byte") {
  auto [system_text, user_text] =
      render_link_prompt({"graph", "neural", "network"}, {"message", "passing", "aggregation"});
  CHECK(system_text + "\n\n" + user_text == golden("link_prompt.txt"));
}

TEST_CASE("renderers reject malformed episodes") {
  FewShotTask t = golden_task();
  auto toks = golden_support_tokens();

  FewShotTask empty_support = t;
  empty_support.support.clear();
  CHECK_THROWS_WITH_AS(render_fewshot_prompt(empty_support, {}, kTestTokens),
                       doctest::Contains("zero-shot"), ValidationError);

  FewShotTask short_support = t;
  short_support.support.pop_back();
  CHECK_THROWS_AS(render_fewshot_prompt(short_support, toks, kTestTokens), ValidationError);

  CHECK_THROWS_AS(render_fewshot_prompt(t, {toks[0], toks[1]}, kTestTokens), ValidationError);
  CHECK_THROWS_AS(render_fewshot_prompt(t, toks, {}), ValidationError);
  CHECK_THROWS_AS(render_fewshot_prompt(t, toks, {"a", ""}), ValidationError);

  FewShotTask bad_class = t;
  bad_class.support[0].second = 7;
  CHECK_THROWS_AS(render_fewshot_prompt(bad_class, toks, kTestTokens), ValidationError);

  CHECK_THROWS_AS(render_zeroshot_prompt({}, kTestTokens), ValidationError);
  CHECK_THROWS_AS(render_zeroshot_prompt(kClasses3, {}), ValidationError);
  CHECK_THROWS_AS(render_link_prompt({}, {"x"}), ValidationError);
}

TEST_CASE("prompt renderers preserve token order") {
  PromptBundle b = render_zeroshot_prompt(kClasses3, {"zeta", "alpha", "mid"});
  CHECK(b.user_text() == "Input: [zeta, alpha, mid]");
}

TEST_CASE("parse_class_reply handles exact matches and decorated replies") {
  CHECK(parse_class_reply("Research Paper", kClasses3) == "Research Paper");
  CHECK(parse_class_reply("  research paper.\n", kClasses3) == "Research Paper");
  for (const auto& c : kClasses3) {
    std::string upper = c;
    for (char& ch : upper) ch = static_cast<char>(std::toupper(static_cast<unsigned char>(ch)));
    CHECK(parse_class_reply(upper + ".", kClasses3) == c);
    CHECK(parse_class_reply("  \"" + c + "\"  ", kClasses3) == c);
    CHECK(parse_class_reply("\n\t" + c + "!\n", kClasses3) == c);
  }
}

TEST_CASE("parse_class_reply falls back to longest common substring") {
  CHECK(parse_class_reply("I think it is a Dataset entry", kClasses3) == "Dataset");
  CHECK(parse_class_reply("softwar", kClasses3) == "Software");
  // equal overlap takes the earliest candidate
  CHECK(parse_class_reply("abxcd", {"ab", "cd"}) == "ab");
  // zero overlap degrades to the first candidate
  CHECK(parse_class_reply("zzz", kClasses3) == "Research Paper");
  CHECK_THROWS_AS(parse_class_reply("  .\n", kClasses3), RuntimeFailure);
  CHECK_THROWS_AS(parse_class_reply("x", {}), ValidationError);
}

TEST_CASE("parse_yes_no accepts bare and embedded answers, rejects ambiguity") {
  CHECK(parse_yes_no("yes"));
  CHECK(parse_yes_no("Yes."));
  CHECK_FALSE(parse_yes_no("  NO\n"));
  CHECK(parse_yes_no("I believe yes, they share an edge"));
  CHECK_FALSE(parse_yes_no("definitely not, no edge"));
  CHECK_THROWS_AS(parse_yes_no("maybe"), RuntimeFailure);
  CHECK_THROWS_AS(parse_yes_no("yes and no"), RuntimeFailure);
  CHECK_THROWS_AS(parse_yes_no("   "), RuntimeFailure);
}

TEST_CASE("client config validates and reads the environment") {
  LLMClientConfig cfg;
  cfg.endpoint = "http://x/v1";
  cfg.model = "m";
  CHECK_NOTHROW(cfg.validate());
  cfg.model.clear();
  CHECK_THROWS_AS(cfg.validate(), ValidationError);
  cfg.model = "m";
  cfg.max_in_flight = 0;
  CHECK_THROWS_AS(cfg.validate(), ValidationError);

  ::setenv("LLM_ENDPOINT", "http://env-host/v1/chat/completions", 1);
  ::setenv("LLM_MODEL", "env-model", 1);
  ::setenv("LLM_API_KEY", "env-key", 1);
  LLMClientConfig env = LLMClientConfig::from_env();
  CHECK(env.endpoint == "http://env-host/v1/chat/completions");
  CHECK(env.model == "env-model");
  CHECK(env.api_key == "env-key");
  ::unsetenv("LLM_ENDPOINT");
  ::unsetenv("LLM_MODEL");
  ::unsetenv("LLM_API_KEY");
}

TEST_CASE("chat posts an openai-shaped request and returns the first choice") {
  json seen;
  std::string auth;
  MockChatServer server([&](const httplib::Request& req, httplib::Response& res, int) {
    seen = json::parse(req.body);
    auth = req.get_header_value("Authorization");
    reply_content(res, "Dataset");
  });
  LlmClient client(server.config());
  std::string raw = client.chat("sys text", "user text");
  CHECK(raw == "Dataset");
  CHECK(server.hits == 1);
  CHECK(auth == "Bearer sesame");
  CHECK(seen.at("model") == "test-model");
  CHECK(seen.at("temperature") == 0.0);
  CHECK(seen.at("max_tokens") == 16);
  REQUIRE(seen.at("messages").size() == 2);
  CHECK(seen["messages"][0].at("role") == "system");
  CHECK(seen["messages"][0].at("content") == "sys text");
  CHECK(seen["messages"][1].at("role") == "user");
  CHECK(seen["messages"][1].at("content") == "user text");
}

TEST_CASE("chat retries 5xx then succeeds, and gives up when the budget runs out") {
  MockChatServer server([&](const httplib::Request&, httplib::Response& res, int hit) {
    if (hit <= 2) {
      res.status = 503;
      return;
    }
    reply_content(res, "ok");
  });
  LlmClient client(server.config());
  CHECK(client.chat("s", "u") == "ok");
  CHECK(server.hits == 3);

  MockChatServer always_down([&](const httplib::Request&, httplib::Response& res, int) { res.status = 500; });
  LLMClientConfig cfg = always_down.config();
  cfg.max_retries = 1;
  LlmClient capped(cfg);
  CHECK_THROWS_AS(capped.chat("s", "u"), RuntimeFailure);
  CHECK(always_down.hits == 2);
}

TEST_CASE("chat treats 4xx and malformed bodies as hard failures") {
  MockChatServer notfound([&](const httplib::Request&, httplib::Response& res, int) { res.status = 404; });
  LlmClient c1(notfound.config());
  CHECK_THROWS_AS(c1.chat("s", "u"), RuntimeFailure);
  CHECK(notfound.hits == 1);

  MockChatServer garbled([&](const httplib::Request&, httplib::Response& res, int) {
    res.set_content("not json", "text/plain");
  });
  LlmClient c2(garbled.config());
  CHECK_THROWS_AS(c2.chat("s", "u"), RuntimeFailure);

  MockChatServer empty_choice([&](const httplib::Request&, httplib::Response& res, int) {
    res.set_content(R"({"choices":[{}]})", "application/json");
  });
  LlmClient c3(empty_choice.config());
  CHECK_THROWS_AS(c3.chat("s", "u"), RuntimeFailure);
}

TEST_CASE("chat falls back to the completions text field") {
  MockChatServer server([&](const httplib::Request&, httplib::Response& res, int) {
    res.set_content(R"({"choices":[{"text":"  software!  "}]})", "application/json");
  });
  LlmClient client(server.config());
  CHECK(client.chat("s", "u") == "  software!  ");
}

TEST_CASE("llm_classify parses the reply and writes one audit line per call") {
  MockChatServer server([&](const httplib::Request&, httplib::Response& res, int) {
    reply_content(res, " dataset.\n");
  });
  LlmClient client(server.config());
  PromptBundle bundle = render_fewshot_prompt(golden_task(), golden_support_tokens(), kTestTokens);

  fs::path log = fs::temp_directory_path() / ("stag_audit_" + std::to_string(::getpid()) + ".jsonl");
  fs::remove(log);
  {
    AuditLog audit(log);
    CHECK(llm_classify(bundle, client, &audit, "task-7", "Dataset") == "Dataset");
    CHECK(llm_classify(bundle, client) == "Dataset");
  }
  std::ifstream in(log);
  std::string line;
  int lines = 0;
  while (std::getline(in, line)) {
    ++lines;
    json j = json::parse(line);
    CHECK(j.at("task_id") == "task-7");
    CHECK(j.at("prompt") == bundle.full_text());
    CHECK(j.at("raw_reply") == " dataset.\n");
    CHECK(j.at("parsed") == "Dataset");
    CHECK(j.at("gold") == "Dataset");
  }
  CHECK(lines == 1);
  fs::remove(log);
}

TEST_CASE("llm_link_predict round-trips through the chat endpoint") {
  MockChatServer server([&](const httplib::Request& req, httplib::Response& res, int) {
    json body = json::parse(req.body);
    std::string user = body["messages"][1]["content"];
    reply_content(res, user.find("alpha") != std::string::npos ? "yes" : "no");
  });
  LlmClient client(server.config());
  CHECK(llm_link_predict({"alpha", "x"}, {"y"}, client));
  CHECK_FALSE(llm_link_predict({"b"}, {"c"}, client));
}

TEST_CASE("stub_classify recovers the class whose tokens it is shown and ignores support") {
  Codebook cb = testsup::class_aligned_codebook(3, 4, 8, 0.05, 5);
  ClassCodebook cc = testsup::axis_class_codebook({"alpha", "beta", "gamma"}, 8);

  for (int c = 0; c < 3; ++c) {
    PromptBundle b;
    b.candidate_classes = cc.class_names;
    b.test_tokens = {cb.tokens[c * 4], cb.tokens[c * 4 + 1]};
    CHECK(stub_classify(b, cb, cc) == cc.class_names[c]);

    PromptBundle with_support = b;
    with_support.support_examples = {{{cb.tokens[(c + 1) % 3 * 4]}, cc.class_names[(c + 1) % 3]}};
    CHECK(stub_classify(with_support, cb, cc) == stub_classify(b, cb, cc));
  }

  PromptBundle unknown;
  unknown.candidate_classes = cc.class_names;
  unknown.test_tokens = {"nosuch"};
  CHECK_THROWS_AS(stub_classify(unknown, cb, cc), ValidationError);

  PromptBundle badclass;
  badclass.candidate_classes = {"missing"};
  badclass.test_tokens = {cb.tokens[0]};
  CHECK_THROWS_AS(stub_classify(badclass, cb, cc), ValidationError);
}

TEST_CASE("linear probe separates a linearly separable set and validates inputs") {
  Rng rng(41);
  Mat z(40, 6);
  std::vector<int> labels(40);
  for (int i = 0; i < 40; ++i) {
    int c = i % 2;
    labels[i] = c;
    for (int j = 0; j < 6; ++j) z(i, j) = (j == c ? 2.0 : 0.0) + 0.2 * rng.normal();
  }
  ProbeConfig cfg;
  LinearProbe probe = train_linear_probe(z, labels, {"neg", "pos"}, cfg);
  int correct = 0;
  for (int i = 0; i < 40; ++i) correct += predict_linear(probe, z.row_copy(i)) == labels[i];
  CHECK(correct == 40);
  CHECK(probe.num_classes() == 2);
  CHECK(probe.input_dim() == 6);

  CHECK_THROWS_WITH_AS(train_linear_probe(z, labels, {"neg", "pos", "ghost"}, cfg), doctest::Contains("ghost"),
                       ValidationError);
  std::vector<int> bad = labels;
  bad[0] = -1;
  CHECK_THROWS_AS(train_linear_probe(z, bad, {"neg", "pos"}, cfg), ValidationError);
  ProbeConfig badcfg;
  badcfg.steps = 0;
  CHECK_THROWS_AS(train_linear_probe(z, labels, {"neg", "pos"}, badcfg), ValidationError);
}

TEST_CASE("single-class probe predicts that class everywhere") {
  Mat z = Mat::from_rows({{1, 2}, {3, 4}});
  LinearProbe probe = train_linear_probe(z, {0, 0}, {"only"}, ProbeConfig{});
  CHECK(predict_linear(probe, Mat::from_rows({{-9, 9}})) == 0);
}

TEST_CASE("link_predict applies a strict cosine threshold") {
  Mat a = Mat::from_rows({{1, 0}});
  Mat b = Mat::from_rows({{2, 0}});
  Mat c = Mat::from_rows({{-1, 0}});
  Mat d = Mat::from_rows({{1, 1}});
  CHECK(link_predict(a, b));
  CHECK_FALSE(link_predict(a, c));
  CHECK_FALSE(link_predict(a, d, 1.0 / std::sqrt(2.0)));  // equality is not above
  CHECK(link_predict(a, d, 0.7));
  Mat zero = Mat::from_rows({{0, 0}});
  CHECK_THROWS_AS(link_predict(a, zero), ValidationError);
  CHECK_THROWS_AS(link_predict(a, Mat::from_rows({{1, 0, 0}})), ValidationError);
}

TEST_CASE("edge_classify concatenates head then tail") {
  // class 0 iff the head half carries the signal; direction must matter
  Rng rng(43);
  int n = 60, d = 4;
  Mat z(n, 2 * d);
  std::vector<int> labels(n);
  for (int i = 0; i < n; ++i) {
    int c = i % 2;
    labels[i] = c;
    for (int j = 0; j < 2 * d; ++j) {
      bool head_half = j < d;
      z(i, j) = ((c == 0) == head_half ? 1.5 : -1.5) + 0.1 * rng.normal();
    }
  }
  LinearProbe probe = train_linear_probe(z, labels, {"fwd", "rev"}, ProbeConfig{});
  Mat hi(1, d, 1.5), lo(1, d, -1.5);
  CHECK(edge_classify(probe, hi, lo) == 0);
  CHECK(edge_classify(probe, lo, hi) == 1);
  CHECK_THROWS_AS(edge_classify(probe, hi, Mat(1, d + 1, 1.0)), ValidationError);
  LinearProbe narrow = train_linear_probe(Mat::from_rows({{1, 0}, {0, 1}}), {0, 1}, {"a", "b"}, ProbeConfig{});
  CHECK_THROWS_AS(edge_classify(narrow, hi, lo), ValidationError);
}

TEST_CASE("subgraph_embed averages rows") {
  Mat rows = Mat::from_rows({{1, 0}, {0, 1}});
  Mat m = subgraph_embed(rows);
  CHECK(m.rows == 1);
  CHECK(m(0, 0) == 0.5);
  CHECK(m(0, 1) == 0.5);
  Mat same = Mat::from_rows({{2, 3}, {2, 3}, {2, 3}});
  Mat s = subgraph_embed(same);
  CHECK(s(0, 0) == 2.0);
  CHECK(s(0, 1) == 3.0);
  CHECK_THROWS_AS(subgraph_embed(Mat(0, 3)), ValidationError);
}
