#include "stag/codebook.hpp"

#include <algorithm>
#include <cctype>
#include <sstream>
#include <thread>
#include <unordered_map>
#include <unordered_set>

#include "httplib.h"
#include "stag/rng.hpp"
#include "stag/tensor_io.hpp"

namespace stag {

using nlohmann::json;
namespace fs = std::filesystem;

namespace {

bool is_ascii_letter(char c) { return (c >= 'a' && c <= 'z') || (c >= 'A' && c <= 'Z'); }

std::string trim_token(std::string s) {
  auto is_ws = [](unsigned char c) { return std::isspace(c) != 0; };
  size_t b = 0, e = s.size();
  while (b < e && is_ws(static_cast<unsigned char>(s[b]))) ++b;
  while (e > b && is_ws(static_cast<unsigned char>(s[e - 1]))) --e;
  s = s.substr(b, e - b);
  // Leading subword markers from common tokenizers: U+2581 (sentencepiece) and
  // "##" (WordPiece continuation). Strip repeatedly so nested markers go too.
  const std::string sp = "\xe2\x96\x81";
  while (true) {
    if (s.rfind(sp, 0) == 0) {
      s.erase(0, sp.size());
    } else if (s.rfind("##", 0) == 0) {
      s.erase(0, 2);
    } else {
      break;
    }
  }
  return s;
}

}  // namespace

std::vector<std::string> filter_vocabulary(const std::vector<std::string>& raw) {
  std::vector<std::string> out;
  std::unordered_set<std::string> seen;
  for (const auto& r : raw) {
    std::string t = trim_token(r);
    if (t.empty()) continue;
    bool ok = true;
    for (char c : t)
      if (!is_ascii_letter(c)) {
        ok = false;
        break;
      }
    if (!ok) continue;
    if (seen.insert(t).second) out.push_back(std::move(t));
  }
  return out;
}

void Codebook::validate() const {
  if (tokens.empty()) throw ValidationError("codebook: empty token list");
  if (embeddings.rows != size()) throw ValidationError("codebook: embedding row count mismatch");
  if (embeddings.cols <= 0) throw ValidationError("codebook: embedding dim must be positive");
  std::unordered_set<std::string> seen;
  for (const auto& t : tokens) {
    if (t.empty()) throw ValidationError("codebook: empty token");
    if (t.find('\n') != std::string::npos) throw ValidationError("codebook: token contains newline");
    if (!seen.insert(t).second) throw ValidationError("codebook: duplicate token '" + t + "'");
  }
  for (int i = 0; i < embeddings.rows; ++i) {
    double n = embeddings.row_norm(i);
    if (!std::isfinite(n)) throw ValidationError("codebook: non-finite embedding row " + std::to_string(i));
    if (n == 0.0) throw ValidationError("codebook: zero embedding row " + std::to_string(i));
  }
}

int Codebook::index_of(const std::string& token) const {
  for (int i = 0; i < size(); ++i)
    if (tokens[i] == token) return i;
  return -1;
}

Codebook build_codebook(const std::vector<std::string>& tokens, const Embedder& embed) {
  if (tokens.empty()) throw ValidationError("build_codebook: empty token list");
  Codebook cb;
  cb.tokens = tokens;
  int dim = -1;
  for (size_t i = 0; i < tokens.size(); ++i) {
    std::vector<double> v = embed(tokens[i]);
    if (dim < 0) {
      dim = static_cast<int>(v.size());
      if (dim == 0) throw ValidationError("build_codebook: embedder returned empty vector");
      cb.embeddings = Mat(static_cast<int>(tokens.size()), dim);
    }
    if (static_cast<int>(v.size()) != dim)
      throw ValidationError("build_codebook: inconsistent embedding length for '" + tokens[i] + "'");
    for (int j = 0; j < dim; ++j) cb.embeddings(static_cast<int>(i), j) = v[j];
  }
  cb.validate();
  return cb;
}

void save_codebook(const Codebook& cb, const fs::path& dir) {
  cb.validate();
  fs::create_directories(dir);
  std::ostringstream os;
  for (const auto& t : cb.tokens) os << t << '\n';
  write_text_file(dir / "tokens.txt", os.str());
  write_f32(dir / "embeddings.f32", cb.embeddings);
  json meta;
  meta["dim"] = cb.dim();
  meta["size"] = cb.size();
  meta["source"] = cb.source_meta;
  write_text_file(dir / "meta.json", meta.dump(2) + "\n");
}

Codebook load_codebook(const fs::path& dir) {
  if (!fs::is_directory(dir)) throw ValidationError("codebook directory not found: " + dir.string());
  Codebook cb;
  {
    std::istringstream is(read_text_file(dir / "tokens.txt"));
    std::string line;
    while (std::getline(is, line))
      if (!line.empty()) cb.tokens.push_back(line);
  }
  json meta;
  try {
    meta = json::parse(read_text_file(dir / "meta.json"));
  } catch (const json::exception& e) {
    throw ValidationError("codebook meta.json: " + std::string(e.what()));
  }
  int dim = meta.at("dim").get<int>();
  int size = meta.at("size").get<int>();
  if (size != static_cast<int>(cb.tokens.size()))
    throw ValidationError("codebook: meta.json size disagrees with tokens.txt");
  if (meta.contains("source")) cb.source_meta = meta.at("source");
  cb.embeddings = read_f32(dir / "embeddings.f32", size, dim);
  cb.validate();
  return cb;
}

void ClassCodebook::validate() const {
  if (class_names.empty()) throw ValidationError("class codebook: empty class list");
  if (explanations.size() != class_names.size())
    throw ValidationError("class codebook: explanations length mismatch");
  if (embeddings.rows != size()) throw ValidationError("class codebook: embedding row count mismatch");
  if (embeddings.cols <= 0) throw ValidationError("class codebook: embedding dim must be positive");
  std::unordered_set<std::string> seen;
  for (const auto& c : class_names) {
    if (c.empty()) throw ValidationError("class codebook: empty class name");
    if (!seen.insert(c).second) throw ValidationError("class codebook: duplicate class '" + c + "'");
  }
  for (int i = 0; i < embeddings.rows; ++i) {
    double n = embeddings.row_norm(i);
    if (!std::isfinite(n) || n == 0.0)
      throw ValidationError("class codebook: degenerate embedding row " + std::to_string(i));
  }
}

int ClassCodebook::index_of(const std::string& name) const {
  for (int i = 0; i < size(); ++i)
    if (class_names[i] == name) return i;
  return -1;
}

ClassCodebook build_class_codebook(const std::vector<std::string>& class_names,
                                   const std::vector<std::string>& explanations, const Embedder& embed) {
  if (class_names.empty()) throw ValidationError("build_class_codebook: empty class list");
  if (class_names.size() != explanations.size())
    throw ValidationError("build_class_codebook: class/explanation count mismatch");
  ClassCodebook cc;
  cc.class_names = class_names;
  cc.explanations = explanations;
  int dim = -1;
  for (size_t i = 0; i < class_names.size(); ++i) {
    std::vector<double> v = embed(explanations[i]);
    if (dim < 0) {
      dim = static_cast<int>(v.size());
      if (dim == 0) throw ValidationError("build_class_codebook: embedder returned empty vector");
      cc.embeddings = Mat(static_cast<int>(class_names.size()), dim);
    }
    if (static_cast<int>(v.size()) != dim)
      throw ValidationError("build_class_codebook: inconsistent embedding length");
    for (int j = 0; j < dim; ++j) cc.embeddings(static_cast<int>(i), j) = v[j];
  }
  cc.validate();
  return cc;
}

void save_class_codebook(const ClassCodebook& cc, const fs::path& dir) {
  cc.validate();
  fs::create_directories(dir);
  json doc;
  doc["class_names"] = cc.class_names;
  doc["explanations"] = cc.explanations;
  doc["dim"] = cc.dim();
  write_text_file(dir / "classes.json", doc.dump(2) + "\n");
  write_f32(dir / "embeddings.f32", cc.embeddings);
}

ClassCodebook load_class_codebook(const fs::path& dir) {
  if (!fs::is_directory(dir)) throw ValidationError("class codebook directory not found: " + dir.string());
  json doc;
  try {
    doc = json::parse(read_text_file(dir / "classes.json"));
  } catch (const json::exception& e) {
    throw ValidationError("classes.json: " + std::string(e.what()));
  }
  ClassCodebook cc;
  cc.class_names = doc.at("class_names").get<std::vector<std::string>>();
  cc.explanations = doc.at("explanations").get<std::vector<std::string>>();
  int dim = doc.at("dim").get<int>();
  cc.embeddings = read_f32(dir / "embeddings.f32", static_cast<int>(cc.class_names.size()), dim);
  cc.validate();
  return cc;
}

EmbedEndpointConfig EmbedEndpointConfig::from_env() {
  EmbedEndpointConfig cfg;
  if (const char* url = std::getenv("EMBED_ENDPOINT")) cfg.url = url;
  if (const char* key = std::getenv("EMBED_API_KEY")) cfg.api_key = key;
  return cfg;
}

namespace {

// Splits "http://host:port/path" into base and path. httplib::Client accepts
// the scheme+authority part directly.
std::pair<std::string, std::string> split_url(const std::string& url) {
  size_t scheme = url.find("://");
  if (scheme == std::string::npos) throw ValidationError("bad endpoint url: " + url);
  size_t path = url.find('/', scheme + 3);
  if (path == std::string::npos) return {url, "/"};
  return {url.substr(0, path), url.substr(path)};
}

}  // namespace

Mat embed_remote(const std::vector<std::string>& texts, const EmbedEndpointConfig& cfg) {
  if (texts.empty()) return Mat(0, 0);
  if (cfg.url.empty()) throw ValidationError("embed_remote: no endpoint configured (set EMBED_ENDPOINT)");
  auto [base, path] = split_url(cfg.url);

  json body;
  body["texts"] = texts;
  std::string payload = body.dump();

  std::string last_err;
  for (int attempt = 0; attempt <= cfg.max_retries; ++attempt) {
    if (attempt > 0) std::this_thread::sleep_for(std::chrono::milliseconds(100 * attempt));
    httplib::Client cli(base);
    cli.set_connection_timeout(cfg.timeout_sec);
    cli.set_read_timeout(cfg.timeout_sec);
    httplib::Headers headers;
    if (!cfg.api_key.empty()) headers.emplace("Authorization", "Bearer " + cfg.api_key);
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
      throw RuntimeFailure("embed_remote: endpoint returned status " + std::to_string(res->status));

    json reply;
    try {
      reply = json::parse(res->body);
    } catch (const json::exception& e) {
      throw RuntimeFailure("embed_remote: malformed JSON reply: " + std::string(e.what()));
    }
    if (!reply.contains("vectors") || !reply["vectors"].is_array())
      throw RuntimeFailure("embed_remote: reply lacks 'vectors' array");
    const auto& vecs = reply["vectors"];
    if (vecs.size() != texts.size())
      throw RuntimeFailure("embed_remote: got " + std::to_string(vecs.size()) + " vectors for " +
                           std::to_string(texts.size()) + " texts");
    Mat out;
    for (size_t i = 0; i < vecs.size(); ++i) {
      auto v = vecs[i].get<std::vector<double>>();
      if (i == 0) {
        if (v.empty()) throw RuntimeFailure("embed_remote: empty embedding vector");
        out = Mat(static_cast<int>(texts.size()), static_cast<int>(v.size()));
      }
      if (static_cast<int>(v.size()) != out.cols)
        throw RuntimeFailure("embed_remote: ragged embedding vectors");
      for (int j = 0; j < out.cols; ++j) out(static_cast<int>(i), j) = v[j];
    }
    return out;
  }
  throw RuntimeFailure("embed_remote: retries exhausted; last error: " + last_err);
}

std::vector<double> hash_embedding(const std::string& text, int dim) {
  if (dim <= 0) throw ValidationError("hash_embedding: dim must be positive");
  // FNV-1a over the bytes seeds the draw, so equal strings map to equal
  // vectors on every platform and run.
  uint64_t h = 1469598103934665603ULL;
  for (unsigned char c : text) {
    h ^= c;
    h *= 1099511628211ULL;
  }
  Rng rng(h);
  std::vector<double> v(dim);
  double norm2 = 0.0;
  for (int i = 0; i < dim; ++i) {
    v[i] = rng.normal();
    norm2 += v[i] * v[i];
  }
  double inv = 1.0 / std::sqrt(norm2);
  for (double& x : v) x *= inv;
  return v;
}

}  // namespace stag
