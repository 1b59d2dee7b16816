#pragma once

#include <filesystem>
#include <string>
#include <utility>
#include <vector>

#include "stag/mat.hpp"
#include "stag/rng.hpp"

namespace stag {

// A graph whose nodes carry dense features, optional labels and optional raw
// text. Edges are undirected and stored canonically: (min, max), sorted,
// deduplicated, no duplicates of either orientation.
struct TextAttributedGraph {
  std::string name;
  int num_nodes = 0;
  int feature_dim = 0;
  std::vector<std::pair<int, int>> edges;
  Mat features;                          // num_nodes x feature_dim
  std::vector<int> labels;               // -1 = unlabeled; empty when no labels at all
  std::vector<std::string> class_names;
  std::vector<std::string> texts;        // empty when absent
  std::vector<std::vector<int>> adjacency;  // sorted neighbor lists, built on load

  bool has_labels() const;
  void canonicalize_edges();
  void build_adjacency();
  void validate() const;
};

// Dataset directory layout:
//   meta.json     {"name", "num_nodes", "feature_dim", "class_names"}
//   edges.tsv     one "src<TAB>dst" pair per line
//   features.f32  row-major little-endian float32, num_nodes x feature_dim
//   labels.tsv    optional, "node<TAB>class_index" per line
//   texts.jsonl   optional, {"id": int, "text": str} per line
TextAttributedGraph load_dataset(const std::filesystem::path& dir);
void save_dataset(const TextAttributedGraph& g, const std::filesystem::path& dir);

// Node-induced neighborhood around a center. node_ids[0] is the center;
// local_edges use local indices and are canonical like the parent graph's.
struct Subgraph {
  std::vector<int> node_ids;
  std::vector<std::pair<int, int>> local_edges;
  Mat features;
};

// Breadth-first expansion: per hop, each frontier node contributes at most
// `fanout` uniformly sampled neighbors (without replacement). Edges are those
// of the parent graph induced on the selected set.
Subgraph sample_subgraph(const TextAttributedGraph& g, int center, int num_hops, int fanout, Rng& rng);

struct MaskSpec {
  std::vector<int> masked_ids;  // local indices, sorted ascending
  Mat mask_token;               // 1 x feature_dim, the row written over masked nodes
};

// Replaces round(mask_rate * n) node feature rows (round half up, at least one
// when mask_rate > 0) with the shared mask token. Returns the corrupted
// feature matrix; the subgraph itself is untouched.
std::pair<Mat, MaskSpec> mask_nodes(const Subgraph& sg, double mask_rate, const Mat& mask_token, Rng& rng);

// Few-shot episode: n_way classes, k_shot support and q_per_class query nodes
// per class, disjoint. Class indices in support/query are positions into
// class_ids/class_names (0..n_way-1).
struct FewShotTask {
  int n_way = 0;
  int k_shot = 0;
  std::vector<std::pair<int, int>> support;  // (node, class position)
  std::vector<std::pair<int, int>> query;
  std::vector<int> class_ids;                // original label ids, in draw order
  std::vector<std::string> class_names;
};

FewShotTask sample_task(const TextAttributedGraph& g, int n_way, int k_shot, int q_per_class, Rng& rng);

}  // namespace stag
