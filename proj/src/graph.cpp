#include "pagnn/graph.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <sstream>

#include <json.hpp>

#include "pagnn/random.hpp"

namespace pagnn {

using ordered_json = nlohmann::ordered_json;

Edge make_edge(std::uint32_t a, std::uint32_t b) {
  if (a == b) throw GraphError("self pair (" + std::to_string(a) + ", " + std::to_string(b) + ")");
  return a < b ? Edge{a, b} : Edge{b, a};
}

namespace {

std::vector<Edge> canonical_edges(std::vector<Edge> edges) {
  for (Edge& e : edges) e = make_edge(e.u, e.v);
  std::sort(edges.begin(), edges.end());
  edges.erase(std::unique(edges.begin(), edges.end()), edges.end());
  return edges;
}

}  // namespace

Graph::Graph(Tensor features, std::vector<Edge> edges, std::vector<int> labels, int n_classes)
    : features_(std::move(features)), labels_(std::move(labels)), n_classes_(n_classes) {
  if (n_classes_ < 1) throw GraphError("n_classes must be at least 1");
  if (features_.rows() != labels_.size()) {
    throw GraphError("feature rows (" + std::to_string(features_.rows()) +
                     ") differ from label count (" + std::to_string(labels_.size()) + ")");
  }
  const std::size_t n = labels_.size();
  for (std::size_t i = 0; i < n; ++i) {
    const int y = labels_[i];
    if (y != kUnlabeled && (y < 0 || y >= n_classes_)) {
      throw GraphError("label " + std::to_string(y) + " of node " + std::to_string(i) +
                       " outside [0, " + std::to_string(n_classes_) + ")");
    }
  }
  edges_ = canonical_edges(std::move(edges));
  for (const Edge& e : edges_) {
    if (e.v >= n) {
      throw GraphError("edge (" + std::to_string(e.u) + ", " + std::to_string(e.v) +
                       ") has an endpoint outside [0, " + std::to_string(n) + ")");
    }
  }
}

bool Graph::has_edge(std::uint32_t a, std::uint32_t b) const {
  if (a == b) return false;
  const Edge e = a < b ? Edge{a, b} : Edge{b, a};
  return std::binary_search(edges_.begin(), edges_.end(), e);
}

NodeIds Graph::labeled_nodes() const {
  NodeIds out;
  for (std::size_t i = 0; i < labels_.size(); ++i)
    if (labels_[i] != kUnlabeled) out.push_back(static_cast<std::uint32_t>(i));
  return out;
}

std::vector<std::size_t> Graph::degrees() const {
  std::vector<std::size_t> deg(n_nodes(), 0);
  for (const Edge& e : edges_) {
    ++deg[e.u];
    ++deg[e.v];
  }
  return deg;
}

Graph Graph::with_edges(std::vector<Edge> edges) const {
  return Graph(features_, std::move(edges), labels_, n_classes_);
}

bool operator==(const Graph& a, const Graph& b) {
  return a.n_classes() == b.n_classes() && a.features() == b.features() &&
         std::ranges::equal(a.edges(), b.edges()) && std::ranges::equal(a.labels(), b.labels());
}

PerturbationSet::PerturbationSet(std::vector<Edge> e) : edges(canonical_edges(std::move(e))) {}

bool PerturbationSet::contains(const Edge& e) const {
  return std::binary_search(edges.begin(), edges.end(), e);
}

bool PerturbationSet::subset_of(const Graph& g) const {
  return std::ranges::all_of(edges, [&](const Edge& e) { return g.has_edge(e.u, e.v); });
}

// ---------------------------------------------------------------------------
// File format

namespace {

ordered_json edges_to_json(std::span<const Edge> edges) {
  ordered_json arr = ordered_json::array();
  for (const Edge& e : edges) arr.push_back({e.u, e.v});
  return arr;
}

std::string line_context(const std::string& text, std::size_t byte) {
  std::size_t line = 1, col = 1;
  for (std::size_t i = 0; i < std::min(byte, text.size()); ++i) {
    if (text[i] == '\n') {
      ++line;
      col = 1;
    } else {
      ++col;
    }
  }
  return "line " + std::to_string(line) + ", column " + std::to_string(col);
}

const ordered_json& field(const ordered_json& doc, const char* name) {
  auto it = doc.find(name);
  if (it == doc.end()) throw LoadError(std::string("missing field '") + name + "'");
  return *it;
}

std::int64_t as_integer(const ordered_json& v, const std::string& where) {
  if (!v.is_number_integer()) throw LoadError(where + ": expected an integer");
  return v.get<std::int64_t>();
}

std::vector<Edge> parse_edge_list(const ordered_json& arr, const char* name, std::size_t n_nodes) {
  if (!arr.is_array()) throw LoadError(std::string("'") + name + "' must be an array");
  std::vector<Edge> edges;
  edges.reserve(arr.size());
  for (std::size_t i = 0; i < arr.size(); ++i) {
    const std::string where = std::string(name) + "[" + std::to_string(i) + "]";
    const auto& pair = arr[i];
    if (!pair.is_array() || pair.size() != 2) throw LoadError(where + ": expected [u, v]");
    const std::int64_t u = as_integer(pair[0], where);
    const std::int64_t v = as_integer(pair[1], where);
    if (u < 0 || v < 0 || static_cast<std::size_t>(u) >= n_nodes ||
        static_cast<std::size_t>(v) >= n_nodes) {
      throw LoadError(where + ": endpoint outside [0, " + std::to_string(n_nodes) + ")");
    }
    if (u == v) throw LoadError(where + ": self-loop entries are not allowed");
    edges.push_back(make_edge(static_cast<std::uint32_t>(u), static_cast<std::uint32_t>(v)));
  }
  return edges;
}

}  // namespace

std::string serialize_graph(const Graph& graph, const PerturbationSet* perturbed) {
  ordered_json doc;
  doc["n_nodes"] = graph.n_nodes();
  doc["n_classes"] = graph.n_classes();
  ordered_json features = ordered_json::array();
  for (std::size_t r = 0; r < graph.n_nodes(); ++r) {
    const auto row = graph.features().row(r);
    features.push_back(std::vector<double>(row.begin(), row.end()));
  }
  doc["features"] = std::move(features);
  doc["edges"] = edges_to_json(graph.edges());
  doc["labels"] = std::vector<int>(graph.labels().begin(), graph.labels().end());
  if (perturbed != nullptr) doc["perturbed_edges"] = edges_to_json(perturbed->edges);
  return doc.dump() + "\n";
}

GraphFile parse_graph(const std::string& text) {
  ordered_json doc;
  try {
    doc = ordered_json::parse(text);
  } catch (const nlohmann::json::parse_error& e) {
    throw LoadError("parse error at " + line_context(text, e.byte) + ": " + e.what());
  }
  if (!doc.is_object()) throw LoadError("top-level value must be an object");

  const std::int64_t n_nodes = as_integer(field(doc, "n_nodes"), "n_nodes");
  const std::int64_t n_classes = as_integer(field(doc, "n_classes"), "n_classes");
  if (n_nodes < 0) throw LoadError("n_nodes must be non-negative");
  if (n_classes < 1) throw LoadError("n_classes must be positive");
  const auto n = static_cast<std::size_t>(n_nodes);

  const auto& features = field(doc, "features");
  if (!features.is_array() || features.size() != n) {
    throw LoadError("'features' must be an array of n_nodes rows");
  }
  const std::size_t dim = n == 0 ? 0 : features[0].size();
  std::vector<double> values;
  values.reserve(n * dim);
  for (std::size_t r = 0; r < n; ++r) {
    const auto& row = features[r];
    const std::string where = "features[" + std::to_string(r) + "]";
    if (!row.is_array() || row.size() != dim) {
      throw LoadError(where + ": expected " + std::to_string(dim) + " values");
    }
    for (const auto& x : row) {
      if (!x.is_number()) throw LoadError(where + ": non-numeric feature");
      values.push_back(x.get<double>());
    }
  }

  const auto& labels_json = field(doc, "labels");
  if (!labels_json.is_array() || labels_json.size() != n) {
    throw LoadError("'labels' must be an array of n_nodes integers");
  }
  std::vector<int> labels;
  labels.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    const std::string where = "labels[" + std::to_string(i) + "]";
    const std::int64_t y = as_integer(labels_json[i], where);
    if (y != kUnlabeled && (y < 0 || y >= n_classes)) {
      throw LoadError(where + ": label " + std::to_string(y) + " outside [0, n_classes) and not -1");
    }
    labels.push_back(static_cast<int>(y));
  }

  std::vector<Edge> edges = parse_edge_list(field(doc, "edges"), "edges", n);

  GraphFile out;
  try {
    out.graph = Graph(Tensor(n, dim, std::move(values)), std::move(edges), std::move(labels),
                      static_cast<int>(n_classes));
  } catch (const NonFiniteError& e) {
    throw LoadError(std::string("features: ") + e.what());
  } catch (const GraphError& e) {
    throw LoadError(e.what());
  }

  if (auto it = doc.find("perturbed_edges"); it != doc.end()) {
    PerturbationSet p(parse_edge_list(*it, "perturbed_edges", n));
    for (std::size_t i = 0; i < p.edges.size(); ++i) {
      const Edge& e = p.edges[i];
      if (!out.graph.has_edge(e.u, e.v)) {
        throw LoadError("perturbed_edges: (" + std::to_string(e.u) + ", " + std::to_string(e.v) +
                        ") is not an edge of the graph");
      }
    }
    out.perturbed = std::move(p);
  }
  return out;
}

GraphFile load_graph_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw LoadError("cannot open graph file " + path.string());
  std::ostringstream buffer;
  buffer << in.rdbuf();
  try {
    return parse_graph(buffer.str());
  } catch (const LoadError& e) {
    throw LoadError(path.string() + ": " + e.what());
  }
}

Graph load_graph(const std::filesystem::path& path) { return load_graph_file(path).graph; }

void save_graph(const Graph& graph, const std::filesystem::path& path,
                const PerturbationSet* perturbed) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw GraphError("cannot write graph file " + path.string());
  out << serialize_graph(graph, perturbed);
  if (!out) throw GraphError("failed writing graph file " + path.string());
}

// ---------------------------------------------------------------------------
// Generation and splitting

Graph sbm_generate(const SbmParams& p, std::uint64_t seed) {
  if (p.n_nodes == 0) throw GraphError("sbm_generate: n_nodes must be positive");
  if (p.n_classes < 1 || static_cast<std::size_t>(p.n_classes) > p.n_nodes) {
    throw GraphError("sbm_generate: n_classes must lie in [1, n_nodes]");
  }
  if (!(p.p_out >= 0.0 && p.p_out < p.p_in && p.p_in <= 1.0)) {
    throw GraphError("sbm_generate: require 0 <= p_out < p_in <= 1");
  }
  if (!(p.feature_noise >= 0.0) || !std::isfinite(p.feature_noise)) {
    throw GraphError("sbm_generate: feature_noise must be a finite non-negative number");
  }
  const std::size_t n = p.n_nodes;
  const auto c = static_cast<std::size_t>(p.n_classes);
  const std::size_t d = p.feature_dim;

  std::vector<int> labels(n);
  for (std::size_t i = 0; i < n; ++i) labels[i] = static_cast<int>(i * c / n);

  Rng mean_rng(derive_seed(seed, "sbm-means"));
  std::normal_distribution<double> normal(0.0, 1.0);
  std::vector<double> means(c * d, 0.0);
  for (std::size_t k = 0; k < c; ++k) {
    double norm = 0.0;
    for (std::size_t j = 0; j < d; ++j) {
      means[k * d + j] = normal(mean_rng);
      norm += means[k * d + j] * means[k * d + j];
    }
    norm = std::sqrt(norm);
    if (norm > 0.0)
      for (std::size_t j = 0; j < d; ++j) means[k * d + j] /= norm;
  }

  Rng noise_rng(derive_seed(seed, "sbm-noise"));
  std::vector<double> features(n * d);
  for (std::size_t i = 0; i < n; ++i) {
    const auto k = static_cast<std::size_t>(labels[i]);
    for (std::size_t j = 0; j < d; ++j) {
      features[i * d + j] = means[k * d + j] + p.feature_noise * normal(noise_rng);
    }
  }

  Rng edge_rng(derive_seed(seed, "sbm-edges"));
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  std::vector<Edge> edges;
  for (std::uint32_t i = 0; i < n; ++i) {
    for (std::uint32_t j = i + 1; j < n; ++j) {
      const double prob = labels[i] == labels[j] ? p.p_in : p.p_out;
      if (unit(edge_rng) < prob) edges.push_back({i, j});
    }
  }
  return Graph(Tensor(n, d, std::move(features)), std::move(edges), std::move(labels), p.n_classes);
}

std::vector<Graph> split_into_subgraphs(const Graph& graph, std::size_t k, std::uint64_t seed) {
  if (k == 0) throw GraphError("split_into_subgraphs: k must be positive");
  if (k == 1) return {graph};
  const std::size_t n = graph.n_nodes();
  if (n < 10 * k) {
    throw GraphError("split_into_subgraphs: " + std::to_string(n) + " nodes is too few for " +
                     std::to_string(k) + " parts (need at least " + std::to_string(10 * k) + ")");
  }
  NodeIds order(n);
  std::iota(order.begin(), order.end(), 0u);
  Rng rng(derive_seed(seed, "subgraph-split"));
  std::shuffle(order.begin(), order.end(), rng);

  std::vector<std::size_t> part_of(n);
  std::vector<std::uint32_t> local_id(n);
  std::vector<NodeIds> members(k);
  for (std::size_t p = 0; p < k; ++p) {
    const std::size_t begin = p * n / k, end = (p + 1) * n / k;
    members[p].assign(order.begin() + static_cast<std::ptrdiff_t>(begin),
                      order.begin() + static_cast<std::ptrdiff_t>(end));
    std::sort(members[p].begin(), members[p].end());
    for (std::size_t i = 0; i < members[p].size(); ++i) {
      part_of[members[p][i]] = p;
      local_id[members[p][i]] = static_cast<std::uint32_t>(i);
    }
  }

  std::vector<std::vector<Edge>> part_edges(k);
  for (const Edge& e : graph.edges()) {
    if (part_of[e.u] == part_of[e.v]) part_edges[part_of[e.u]].push_back({local_id[e.u], local_id[e.v]});
  }

  const std::size_t d = graph.feature_dim();
  std::vector<Graph> parts;
  parts.reserve(k);
  for (std::size_t p = 0; p < k; ++p) {
    std::vector<double> features;
    features.reserve(members[p].size() * d);
    std::vector<int> labels;
    for (std::uint32_t node : members[p]) {
      const auto row = graph.features().row(node);
      features.insert(features.end(), row.begin(), row.end());
      labels.push_back(graph.label(node));
    }
    parts.emplace_back(Tensor(members[p].size(), d, std::move(features)), std::move(part_edges[p]),
                       std::move(labels), graph.n_classes());
  }
  return parts;
}

NodeSplit make_label_splits(const Graph& graph, double train_frac, double val_frac,
                            std::uint64_t seed) {
  if (!(train_frac >= 0.0 && val_frac >= 0.0 && train_frac + val_frac < 1.0)) {
    throw GraphError("make_label_splits: need train_frac, val_frac >= 0 and train_frac + val_frac < 1");
  }
  NodeIds labeled = graph.labeled_nodes();
  Rng rng(derive_seed(seed, "label-splits"));
  std::shuffle(labeled.begin(), labeled.end(), rng);
  const auto count = static_cast<double>(labeled.size());
  const auto n_train = static_cast<std::size_t>(std::floor(train_frac * count));
  const auto n_val = static_cast<std::size_t>(std::floor(val_frac * count));

  NodeSplit split;
  auto first = labeled.begin();
  split.train.assign(first, first + static_cast<std::ptrdiff_t>(n_train));
  split.validation.assign(first + static_cast<std::ptrdiff_t>(n_train),
                          first + static_cast<std::ptrdiff_t>(n_train + n_val));
  split.test.assign(first + static_cast<std::ptrdiff_t>(n_train + n_val), labeled.end());
  std::sort(split.train.begin(), split.train.end());
  std::sort(split.validation.begin(), split.validation.end());
  std::sort(split.test.begin(), split.test.end());
  return split;
}

SupportQuerySplit support_query_split(std::span<const std::uint32_t> pool, std::uint64_t seed) {
  if (pool.size() < 2) throw GraphError("support_query_split: pool needs at least 2 nodes");
  NodeIds shuffled(pool.begin(), pool.end());
  Rng rng(derive_seed(seed, "support-query"));
  std::shuffle(shuffled.begin(), shuffled.end(), rng);
  const std::size_t half = (shuffled.size() + 1) / 2;
  SupportQuerySplit split;
  split.support.assign(shuffled.begin(), shuffled.begin() + static_cast<std::ptrdiff_t>(half));
  split.query.assign(shuffled.begin() + static_cast<std::ptrdiff_t>(half), shuffled.end());
  std::sort(split.support.begin(), split.support.end());
  std::sort(split.query.begin(), split.query.end());
  return split;
}

NodeIds sample_labeled_pool(const Graph& graph, double fraction, std::uint64_t seed) {
  if (!(fraction > 0.0 && fraction <= 1.0)) {
    throw GraphError("sample_labeled_pool: fraction must lie in (0, 1]");
  }
  NodeIds labeled = graph.labeled_nodes();
  Rng rng(derive_seed(seed, "labeled-pool"));
  std::shuffle(labeled.begin(), labeled.end(), rng);
  const auto keep =
      static_cast<std::size_t>(std::floor(fraction * static_cast<double>(labeled.size())));
  labeled.resize(keep);
  std::sort(labeled.begin(), labeled.end());
  return labeled;
}

}  // namespace pagnn
