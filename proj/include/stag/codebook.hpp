#pragma once

#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include "nlohmann/json.hpp"
#include "stag/mat.hpp"

namespace stag {

// Frozen token codebook: one embedding row per token. Embeddings are stored
// exactly as produced (unnormalized); consumers normalize as needed. Once
// built, a codebook never changes during training.
struct Codebook {
  std::vector<std::string> tokens;
  Mat embeddings;  // K x dim
  nlohmann::json source_meta = nlohmann::json::object();

  int size() const { return static_cast<int>(tokens.size()); }
  int dim() const { return embeddings.cols; }
  void validate() const;
  // -1 when the token is absent.
  int index_of(const std::string& token) const;
};

// Keeps tokens that are pure ASCII-letter words after trimming whitespace and
// stripping leading subword markers ("▁" and "##"). Deduplicates exact
// post-trim matches keeping the first. Idempotent.
std::vector<std::string> filter_vocabulary(const std::vector<std::string>& raw);

using Embedder = std::function<std::vector<double>(const std::string&)>;

Codebook build_codebook(const std::vector<std::string>& tokens, const Embedder& embed);

// Directory layout: tokens.txt (one per line), embeddings.f32, meta.json.
void save_codebook(const Codebook& cb, const std::filesystem::path& dir);
Codebook load_codebook(const std::filesystem::path& dir);

// Class-level codebook: one embedding per class, produced from a textual
// explanation of the class.
struct ClassCodebook {
  std::vector<std::string> class_names;
  std::vector<std::string> explanations;
  Mat embeddings;  // num_classes x dim

  int size() const { return static_cast<int>(class_names.size()); }
  int dim() const { return embeddings.cols; }
  void validate() const;
  int index_of(const std::string& name) const;
};

ClassCodebook build_class_codebook(const std::vector<std::string>& class_names,
                                   const std::vector<std::string>& explanations, const Embedder& embed);

// Directory layout: classes.json (names + explanations), embeddings.f32.
void save_class_codebook(const ClassCodebook& cc, const std::filesystem::path& dir);
ClassCodebook load_class_codebook(const std::filesystem::path& dir);

struct EmbedEndpointConfig {
  std::string url;      // e.g. http://host:port/embed
  std::string api_key;  // sent as a bearer token when non-empty
  int max_retries = 3;
  int timeout_sec = 30;

  // Reads EMBED_ENDPOINT / EMBED_API_KEY.
  static EmbedEndpointConfig from_env();
};

// POSTs {"texts": [...]} and expects {"vectors": [[...], ...]}, one vector per
// input, all the same length. An empty input returns an empty Mat without
// touching the network. Transient failures (connect errors, 5xx) are retried.
Mat embed_remote(const std::vector<std::string>& texts, const EmbedEndpointConfig& cfg);

// Deterministic offline embedder: unit vector seeded by the text bytes.
// Stands in for a remote embedding model in tests and offline runs.
std::vector<double> hash_embedding(const std::string& text, int dim);

}  // namespace stag
