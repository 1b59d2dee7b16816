#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <atomic>
#include <cmath>
#include <filesystem>
#include <thread>

#include "doctest.h"
#include "httplib.h"
#include "stag/codebook.hpp"
#include "stag/tensor_io.hpp"

using namespace stag;
namespace fs = std::filesystem;

namespace {

fs::path temp_dir(const std::string& tag) {
  fs::path p = fs::temp_directory_path() / ("stag_cbtest_" + tag + "_" + std::to_string(::getpid()));
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

Embedder stub_embedder(int dim) {
  return [dim](const std::string& text) {
    std::vector<double> v(dim, 0.0);
    v[static_cast<int>(text.size()) % dim] = 1.0;
    v[0] += 0.001 * static_cast<double>(static_cast<unsigned char>(text.empty() ? 0 : text[0]));
    return v;
  };
}

// Local HTTP server for the remote-embedding client. Each test configures a
// handler, the fixture owns lifecycle and the hit counter.
struct MockEmbedServer {
  httplib::Server svr;
  std::thread th;
  int port = 0;
  std::atomic<int> hits{0};

  explicit MockEmbedServer(std::function<void(const httplib::Request&, httplib::Response&, int)> handler) {
    svr.Post("/embed", [this, handler](const httplib::Request& req, httplib::Response& res) {
      handler(req, res, ++hits);
    });
    port = svr.bind_to_any_port("127.0.0.1");
    th = std::thread([this] { svr.listen_after_bind(); });
    svr.wait_until_ready();
  }
  ~MockEmbedServer() {
    svr.stop();
    th.join();
  }
  EmbedEndpointConfig config() const {
    EmbedEndpointConfig cfg;
    cfg.url = "http://127.0.0.1:" + std::to_string(port) + "/embed";
    cfg.max_retries = 3;
    cfg.timeout_sec = 5;
    return cfg;
  }
};

}  // namespace

TEST_CASE("filter_vocabulary keeps letter-only tokens and dedups whitespace variants") {
  std::vector<std::string> raw = {"cat", " cat", "Cat", "λx", "dog1"};
  CHECK(filter_vocabulary(raw) == std::vector<std::string>{"cat", "Cat"});
  CHECK(filter_vocabulary({}) == std::vector<std::string>{});
}

TEST_CASE("filter_vocabulary strips subword markers before dedup and is idempotent") {
  std::vector<std::string> raw = {"dog", "▁dog", "##dog", "ing", "##ing", "  spaced  ", "spaced", "megaWord"};
  std::vector<std::string> once = filter_vocabulary(raw);
  CHECK(once == std::vector<std::string>{"dog", "ing", "spaced", "megaWord"});
  CHECK(filter_vocabulary(once) == once);
}

TEST_CASE("build_codebook embeds tokens in order and rejects duplicates") {
  auto cb = build_codebook({"aa", "bbb", "c"}, stub_embedder(4));
  CHECK(cb.size() == 3);
  CHECK(cb.dim() == 4);
  auto want = stub_embedder(4)("bbb");
  for (int j = 0; j < 4; ++j) CHECK(cb.embeddings(1, j) == want[j]);
  CHECK(cb.index_of("c") == 2);
  CHECK(cb.index_of("zz") == -1);

  CHECK_THROWS_AS(build_codebook({"x", "x"}, stub_embedder(4)), ValidationError);
  CHECK_THROWS_AS(build_codebook({}, stub_embedder(4)), ValidationError);
  Embedder ragged = [](const std::string& t) { return std::vector<double>(t.size() + 1, 1.0); };
  CHECK_THROWS_AS(build_codebook({"a", "bb"}, ragged), ValidationError);
}

TEST_CASE("codebook validate rejects zero-norm rows and token/row count mismatch") {
  Codebook cb;
  cb.tokens = {"a", "b"};
  cb.embeddings = Mat::from_rows({{1, 0}, {0, 0}});
  CHECK_THROWS_AS(cb.validate(), ValidationError);
  cb.embeddings = Mat::from_rows({{1, 0}});
  CHECK_THROWS_AS(cb.validate(), ValidationError);
}

TEST_CASE("codebook save/load round-trips byte-identically") {
  auto cb = build_codebook({"alpha", "beta", "gamma"}, stub_embedder(6));
  cb.source_meta["origin"] = "unit test";
  fs::path d1 = temp_dir("cb1"), d2 = temp_dir("cb2");
  save_codebook(cb, d1);
  Codebook r = load_codebook(d1);
  CHECK(r.tokens == cb.tokens);
  CHECK(r.source_meta["origin"] == "unit test");
  save_codebook(r, d2);
  for (const char* f : {"tokens.txt", "embeddings.f32", "meta.json"})
    CHECK(read_text_file(d1 / f) == read_text_file(d2 / f));
  fs::remove_all(d1);
  fs::remove_all(d2);
}

TEST_CASE("class codebook builds from explanations and round-trips") {
  std::vector<std::string> names = {"alpha", "beta"};
  std::vector<std::string> expl = {"first category", "second category"};
  ClassCodebook cc = build_class_codebook(names, expl, stub_embedder(5));
  CHECK(cc.size() == 2);
  auto want = stub_embedder(5)("second category");
  for (int j = 0; j < 5; ++j) CHECK(cc.embeddings(1, j) == want[j]);
  CHECK(cc.index_of("beta") == 1);
  CHECK(cc.index_of("nope") == -1);

  // on-disk embeddings are f32, so round-trip equality holds at file level
  fs::path d = temp_dir("cc"), d2 = temp_dir("cc2");
  save_class_codebook(cc, d);
  ClassCodebook r = load_class_codebook(d);
  CHECK(r.class_names == names);
  CHECK(r.explanations == expl);
  for (size_t i = 0; i < r.embeddings.a.size(); ++i)
    CHECK(r.embeddings.a[i] == doctest::Approx(cc.embeddings.a[i]).epsilon(1e-6));
  save_class_codebook(r, d2);
  CHECK(read_text_file(d / "embeddings.f32") == read_text_file(d2 / "embeddings.f32"));
  CHECK(read_text_file(d / "classes.json") == read_text_file(d2 / "classes.json"));
  fs::remove_all(d);
  fs::remove_all(d2);

  CHECK_THROWS_AS(build_class_codebook(names, {"only one"}, stub_embedder(5)), ValidationError);
}

TEST_CASE("hash_embedding is deterministic, unit-norm and text-sensitive") {
  auto a1 = hash_embedding("graph", 16);
  auto a2 = hash_embedding("graph", 16);
  auto b = hash_embedding("graphs", 16);
  CHECK(a1 == a2);
  CHECK(a1 != b);
  double n = 0;
  for (double v : a1) n += v * v;
  CHECK(std::sqrt(n) == doctest::Approx(1.0).epsilon(1e-12));
  CHECK_THROWS_AS(hash_embedding("x", 0), ValidationError);
}

TEST_CASE("embed_remote returns served vectors in order") {
  MockEmbedServer srv([](const httplib::Request& req, httplib::Response& res, int) {
    auto body = nlohmann::json::parse(req.body);
    REQUIRE(body["texts"].size() == 2);
    res.set_content(R"({"vectors": [[1.0, 2.0, 3.0], [4.0, 5.0, 6.0]]})", "application/json");
  });
  Mat out = embed_remote({"first", "second"}, srv.config());
  CHECK(out.rows == 2);
  CHECK(out.cols == 3);
  CHECK(out(0, 0) == 1.0);
  CHECK(out(1, 2) == 6.0);
  CHECK(srv.hits.load() == 1);
}

TEST_CASE("embed_remote sends the bearer token when an api key is set") {
  std::string seen_auth;
  MockEmbedServer srv([&seen_auth](const httplib::Request& req, httplib::Response& res, int) {
    seen_auth = req.get_header_value("Authorization");
    res.set_content(R"({"vectors": [[1.0]]})", "application/json");
  });
  EmbedEndpointConfig cfg = srv.config();
  cfg.api_key = "sesame";
  embed_remote({"x"}, cfg);
  CHECK(seen_auth == "Bearer sesame");
}

TEST_CASE("embed_remote with no texts makes no network call") {
  MockEmbedServer srv([](const httplib::Request&, httplib::Response& res, int) {
    res.set_content(R"({"vectors": []})", "application/json");
  });
  Mat out = embed_remote({}, srv.config());
  CHECK(out.rows == 0);
  CHECK(srv.hits.load() == 0);
}

TEST_CASE("embed_remote rejects a reply with the wrong vector count") {
  MockEmbedServer srv([](const httplib::Request&, httplib::Response& res, int) {
    res.set_content(R"({"vectors": [[1.0]]})", "application/json");
  });
  CHECK_THROWS_AS(embed_remote({"a", "b"}, srv.config()), RuntimeFailure);
}

TEST_CASE("embed_remote retries 5xx responses and succeeds once the server recovers") {
  MockEmbedServer srv([](const httplib::Request&, httplib::Response& res, int hit) {
    if (hit <= 2) {
      res.status = 503;
      res.set_content("overloaded", "text/plain");
    } else {
      res.set_content(R"({"vectors": [[7.0, 8.0]]})", "application/json");
    }
  });
  Mat out = embed_remote({"retry me"}, srv.config());
  CHECK(out(0, 1) == 8.0);
  CHECK(srv.hits.load() == 3);
}

TEST_CASE("embed_remote gives up after the retry budget") {
  MockEmbedServer srv([](const httplib::Request&, httplib::Response& res, int) {
    res.status = 500;
    res.set_content("broken", "text/plain");
  });
  EmbedEndpointConfig cfg = srv.config();
  cfg.max_retries = 1;
  CHECK_THROWS_AS(embed_remote({"x"}, cfg), RuntimeFailure);
  CHECK(srv.hits.load() == 2);
}
