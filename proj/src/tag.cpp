#include "stag/tag.hpp"

#include <algorithm>
#include <charconv>
#include <fstream>
#include <set>
#include <sstream>

#include "nlohmann/json.hpp"
#include "stag/tensor_io.hpp"

namespace stag {

using nlohmann::json;

namespace {

namespace fs = std::filesystem;

int parse_int(const std::string& s, const std::string& where) {
  int v = 0;
  auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc() || p != s.data() + s.size())
    throw ValidationError(where + ": not an integer: '" + s + "'");
  return v;
}

std::vector<std::string> split_tabs(const std::string& line) {
  std::vector<std::string> out;
  size_t pos = 0;
  while (true) {
    size_t tab = line.find('\t', pos);
    if (tab == std::string::npos) {
      out.push_back(line.substr(pos));
      break;
    }
    out.push_back(line.substr(pos, tab - pos));
    pos = tab + 1;
  }
  return out;
}

}  // namespace

bool TextAttributedGraph::has_labels() const {
  for (int l : labels)
    if (l >= 0) return true;
  return false;
}

void TextAttributedGraph::canonicalize_edges() {
  for (auto& e : edges)
    if (e.first > e.second) std::swap(e.first, e.second);
  std::sort(edges.begin(), edges.end());
  edges.erase(std::unique(edges.begin(), edges.end()), edges.end());
}

void TextAttributedGraph::build_adjacency() {
  adjacency.assign(num_nodes, {});
  for (const auto& [u, v] : edges) {
    adjacency[u].push_back(v);
    if (u != v) adjacency[v].push_back(u);
  }
  for (auto& nbrs : adjacency) {
    std::sort(nbrs.begin(), nbrs.end());
    nbrs.erase(std::unique(nbrs.begin(), nbrs.end()), nbrs.end());
  }
}

void TextAttributedGraph::validate() const {
  if (num_nodes < 0) throw ValidationError("dataset: negative num_nodes");
  if (feature_dim <= 0) throw ValidationError("dataset: feature_dim must be positive");
  if (features.rows != num_nodes || features.cols != feature_dim)
    throw ValidationError("dataset: features are " + shape_str(features) + ", expected " +
                          std::to_string(num_nodes) + "x" + std::to_string(feature_dim));
  for (const auto& [u, v] : edges) {
    if (u < 0 || u >= num_nodes || v < 0 || v >= num_nodes)
      throw ValidationError("dataset: edge endpoint out of range: (" + std::to_string(u) + ", " +
                            std::to_string(v) + ")");
    if (u > v) throw ValidationError("dataset: edges not canonical");
  }
  if (!labels.empty() && static_cast<int>(labels.size()) != num_nodes)
    throw ValidationError("dataset: labels length mismatch");
  for (int l : labels)
    if (l >= 0 && l >= static_cast<int>(class_names.size()))
      throw ValidationError("dataset: label " + std::to_string(l) + " exceeds class_names");
  if (!texts.empty() && static_cast<int>(texts.size()) != num_nodes)
    throw ValidationError("dataset: texts length mismatch");
}

TextAttributedGraph load_dataset(const fs::path& dir) {
  if (!fs::is_directory(dir)) throw ValidationError("dataset directory not found: " + dir.string());
  TextAttributedGraph g;

  json meta;
  try {
    meta = json::parse(read_text_file(dir / "meta.json"));
  } catch (const json::exception& e) {
    throw ValidationError("meta.json: " + std::string(e.what()));
  }
  if (!meta.is_object() || !meta.contains("name") || !meta.contains("num_nodes") || !meta.contains("feature_dim"))
    throw ValidationError("meta.json: requires name, num_nodes, feature_dim");
  g.name = meta.at("name").get<std::string>();
  g.num_nodes = meta.at("num_nodes").get<int>();
  g.feature_dim = meta.at("feature_dim").get<int>();
  if (meta.contains("class_names")) g.class_names = meta.at("class_names").get<std::vector<std::string>>();
  if (g.num_nodes < 0) throw ValidationError("meta.json: negative num_nodes");
  if (g.feature_dim <= 0) throw ValidationError("meta.json: feature_dim must be positive");

  g.features = read_f32(dir / "features.f32", g.num_nodes, g.feature_dim);

  {
    std::ifstream f(dir / "edges.tsv");
    if (!f) throw ValidationError("cannot open edges.tsv in " + dir.string());
    std::string line;
    int lineno = 0;
    while (std::getline(f, line)) {
      ++lineno;
      if (line.empty()) continue;
      auto parts = split_tabs(line);
      if (parts.size() != 2)
        throw ValidationError("edges.tsv line " + std::to_string(lineno) + ": expected src<TAB>dst");
      int u = parse_int(parts[0], "edges.tsv line " + std::to_string(lineno));
      int v = parse_int(parts[1], "edges.tsv line " + std::to_string(lineno));
      if (u < 0 || u >= g.num_nodes || v < 0 || v >= g.num_nodes)
        throw ValidationError("edges.tsv line " + std::to_string(lineno) + ": node out of range");
      g.edges.emplace_back(u, v);  // directed inputs become undirected below
    }
  }
  g.canonicalize_edges();

  if (fs::exists(dir / "labels.tsv")) {
    g.labels.assign(g.num_nodes, -1);
    std::ifstream f(dir / "labels.tsv");
    std::string line;
    int lineno = 0;
    while (std::getline(f, line)) {
      ++lineno;
      if (line.empty()) continue;
      auto parts = split_tabs(line);
      if (parts.size() != 2)
        throw ValidationError("labels.tsv line " + std::to_string(lineno) + ": expected node<TAB>class");
      int node = parse_int(parts[0], "labels.tsv line " + std::to_string(lineno));
      int cls = parse_int(parts[1], "labels.tsv line " + std::to_string(lineno));
      if (node < 0 || node >= g.num_nodes)
        throw ValidationError("labels.tsv line " + std::to_string(lineno) + ": node out of range");
      if (cls < 0 || cls >= static_cast<int>(g.class_names.size()))
        throw ValidationError("labels.tsv line " + std::to_string(lineno) + ": class out of range");
      g.labels[node] = cls;
    }
  }

  if (fs::exists(dir / "texts.jsonl")) {
    g.texts.assign(g.num_nodes, "");
    std::ifstream f(dir / "texts.jsonl");
    std::string line;
    int lineno = 0;
    while (std::getline(f, line)) {
      ++lineno;
      if (line.empty()) continue;
      json row;
      try {
        row = json::parse(line);
      } catch (const json::exception& e) {
        throw ValidationError("texts.jsonl line " + std::to_string(lineno) + ": " + std::string(e.what()));
      }
      int id = row.at("id").get<int>();
      if (id < 0 || id >= g.num_nodes)
        throw ValidationError("texts.jsonl line " + std::to_string(lineno) + ": id out of range");
      g.texts[id] = row.at("text").get<std::string>();
    }
  }

  g.build_adjacency();
  g.validate();
  return g;
}

void save_dataset(const TextAttributedGraph& g, const fs::path& dir) {
  g.validate();
  fs::create_directories(dir);

  json meta;
  meta["name"] = g.name;
  meta["num_nodes"] = g.num_nodes;
  meta["feature_dim"] = g.feature_dim;
  meta["class_names"] = g.class_names;
  write_text_file(dir / "meta.json", meta.dump(2) + "\n");

  {
    std::ostringstream os;
    for (const auto& [u, v] : g.edges) os << u << '\t' << v << '\n';
    write_text_file(dir / "edges.tsv", os.str());
  }

  write_f32(dir / "features.f32", g.features);

  if (g.has_labels()) {
    std::ostringstream os;
    for (int i = 0; i < g.num_nodes; ++i)
      if (g.labels[i] >= 0) os << i << '\t' << g.labels[i] << '\n';
    write_text_file(dir / "labels.tsv", os.str());
  }

  if (!g.texts.empty()) {
    std::ostringstream os;
    for (int i = 0; i < g.num_nodes; ++i) {
      json row;
      row["id"] = i;
      row["text"] = g.texts[i];
      os << row.dump() << '\n';
    }
    write_text_file(dir / "texts.jsonl", os.str());
  }
}

Subgraph sample_subgraph(const TextAttributedGraph& g, int center, int num_hops, int fanout, Rng& rng) {
  if (center < 0 || center >= g.num_nodes) throw ValidationError("sample_subgraph: center out of range");
  if (num_hops < 0) throw ValidationError("sample_subgraph: num_hops must be >= 0");
  if (fanout < 0) throw ValidationError("sample_subgraph: fanout must be >= 0");
  if (g.adjacency.empty() && g.num_nodes > 0)
    throw ValidationError("sample_subgraph: adjacency not built");

  Subgraph sg;
  std::vector<int> local_of(g.num_nodes, -1);
  sg.node_ids.push_back(center);
  local_of[center] = 0;
  std::vector<int> frontier{center};

  for (int hop = 0; hop < num_hops && !frontier.empty(); ++hop) {
    std::vector<int> next;
    for (int u : frontier) {
      const auto& nbrs = g.adjacency[u];
      int deg = static_cast<int>(nbrs.size());
      std::vector<int> picked;
      if (deg <= fanout) {
        picked = nbrs;
      } else {
        for (int pos : rng.sample_without_replacement(deg, fanout)) picked.push_back(nbrs[pos]);
      }
      for (int v : picked) {
        if (local_of[v] >= 0) continue;
        local_of[v] = static_cast<int>(sg.node_ids.size());
        sg.node_ids.push_back(v);
        next.push_back(v);
      }
    }
    frontier = std::move(next);
  }

  for (int lu = 0; lu < static_cast<int>(sg.node_ids.size()); ++lu) {
    int u = sg.node_ids[lu];
    for (int v : g.adjacency[u]) {
      int lv = local_of[v];
      if (lv < 0) continue;
      if (lu < lv || (u == v && lu == lv)) sg.local_edges.emplace_back(lu, lv);
    }
  }
  std::sort(sg.local_edges.begin(), sg.local_edges.end());

  sg.features = Mat(static_cast<int>(sg.node_ids.size()), g.feature_dim);
  for (size_t i = 0; i < sg.node_ids.size(); ++i)
    for (int j = 0; j < g.feature_dim; ++j) sg.features(static_cast<int>(i), j) = g.features(sg.node_ids[i], j);
  return sg;
}

std::pair<Mat, MaskSpec> mask_nodes(const Subgraph& sg, double mask_rate, const Mat& mask_token, Rng& rng) {
  int n = sg.features.rows;
  if (n == 0) throw ValidationError("mask_nodes: empty subgraph");
  if (mask_rate < 0.0 || mask_rate > 1.0) throw ValidationError("mask_nodes: mask_rate must be in [0, 1]");
  if (mask_token.rows != 1 || mask_token.cols != sg.features.cols)
    throw ValidationError("mask_nodes: mask_token must be 1x" + std::to_string(sg.features.cols));

  int count = 0;
  if (mask_rate > 0.0) {
    count = static_cast<int>(std::floor(mask_rate * n + 0.5));  // round half up
    count = std::max(1, std::min(count, n));
  }

  MaskSpec spec;
  spec.mask_token = mask_token;
  spec.masked_ids = rng.sample_without_replacement(n, count);
  std::sort(spec.masked_ids.begin(), spec.masked_ids.end());

  Mat corrupted = sg.features;
  for (int r : spec.masked_ids)
    for (int j = 0; j < corrupted.cols; ++j) corrupted(r, j) = mask_token(0, j);
  return {std::move(corrupted), std::move(spec)};
}

FewShotTask sample_task(const TextAttributedGraph& g, int n_way, int k_shot, int q_per_class, Rng& rng) {
  if (n_way < 1) throw ValidationError("sample_task: n_way must be >= 1");
  if (k_shot < 0) throw ValidationError("sample_task: k_shot must be >= 0");
  if (q_per_class < 1) throw ValidationError("sample_task: q_per_class must be >= 1");
  if (g.labels.empty()) throw ValidationError("sample_task: dataset has no labels");

  std::vector<std::vector<int>> by_class(g.class_names.size());
  for (int i = 0; i < g.num_nodes; ++i)
    if (g.labels[i] >= 0) by_class[g.labels[i]].push_back(i);

  int need = k_shot + q_per_class;
  std::vector<int> eligible;
  for (size_t c = 0; c < by_class.size(); ++c)
    if (static_cast<int>(by_class[c].size()) >= need) eligible.push_back(static_cast<int>(c));
  if (static_cast<int>(eligible.size()) < n_way)
    throw ValidationError("sample_task: only " + std::to_string(eligible.size()) + " classes have " +
                          std::to_string(need) + "+ labeled nodes, need " + std::to_string(n_way));

  FewShotTask task;
  task.n_way = n_way;
  task.k_shot = k_shot;
  for (int pos : rng.sample_without_replacement(static_cast<int>(eligible.size()), n_way))
    task.class_ids.push_back(eligible[pos]);
  for (int c : task.class_ids) task.class_names.push_back(g.class_names[c]);

  for (int cpos = 0; cpos < n_way; ++cpos) {
    const auto& pool = by_class[task.class_ids[cpos]];
    auto draw = rng.sample_without_replacement(static_cast<int>(pool.size()), need);
    for (int i = 0; i < k_shot; ++i) task.support.emplace_back(pool[draw[i]], cpos);
    for (int i = k_shot; i < need; ++i) task.query.emplace_back(pool[draw[i]], cpos);
  }
  return task;
}

}  // namespace stag
