#pragma once

#include <compare>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "pagnn/tensor.hpp"

namespace pagnn {

class GraphError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Parse or validation failure while reading a graph file.
class LoadError : public GraphError {
 public:
  using GraphError::GraphError;
};

inline constexpr int kUnlabeled = -1;

using NodeIds = std::vector<std::uint32_t>;

// Undirected node pair stored with u < v.
struct Edge {
  std::uint32_t u = 0;
  std::uint32_t v = 0;
  auto operator<=>(const Edge&) const = default;
};

// Canonical edge for an unordered pair; throws GraphError on a self pair.
Edge make_edge(std::uint32_t a, std::uint32_t b);

class Graph {
 public:
  Graph() = default;
  // Normalizes edge orientation, drops duplicates and validates every
  // invariant. Throws GraphError on self pairs, out-of-range endpoints or
  // labels, or a label count that does not match the feature rows.
  Graph(Tensor features, std::vector<Edge> edges, std::vector<int> labels, int n_classes);

  std::size_t n_nodes() const { return labels_.size(); }
  int n_classes() const { return n_classes_; }
  std::size_t feature_dim() const { return features_.cols(); }
  const Tensor& features() const { return features_; }
  std::span<const Edge> edges() const { return edges_; }
  std::span<const int> labels() const { return labels_; }
  int label(std::uint32_t node) const { return labels_.at(node); }
  bool has_edge(std::uint32_t a, std::uint32_t b) const;
  NodeIds labeled_nodes() const;
  std::vector<std::size_t> degrees() const;

  // Same nodes, features and labels with a different edge set.
  Graph with_edges(std::vector<Edge> edges) const;

 private:
  Tensor features_;
  std::vector<Edge> edges_;  // sorted, unique
  std::vector<int> labels_;
  int n_classes_ = 0;
};

bool operator==(const Graph& a, const Graph& b);

// Known adversarial insertions; always a subset of the graph they belong to.
struct PerturbationSet {
  std::vector<Edge> edges;  // sorted, unique

  PerturbationSet() = default;
  explicit PerturbationSet(std::vector<Edge> e);
  bool empty() const { return edges.empty(); }
  std::size_t size() const { return edges.size(); }
  bool contains(const Edge& e) const;
  bool subset_of(const Graph& g) const;
};

struct NodeSplit {
  NodeIds train;
  NodeIds validation;
  NodeIds test;
};

struct SupportQuerySplit {
  NodeIds support;
  NodeIds query;
};

struct GraphFile {
  Graph graph;
  std::optional<PerturbationSet> perturbed;
};

std::string serialize_graph(const Graph& graph, const PerturbationSet* perturbed = nullptr);
GraphFile parse_graph(const std::string& text);

GraphFile load_graph_file(const std::filesystem::path& path);
Graph load_graph(const std::filesystem::path& path);
void save_graph(const Graph& graph, const std::filesystem::path& path,
                const PerturbationSet* perturbed = nullptr);

struct SbmParams {
  std::size_t n_nodes = 1000;
  int n_classes = 4;
  double p_in = 0.1;
  double p_out = 0.01;
  std::size_t feature_dim = 16;
  double feature_noise = 1.0;
};

// Planted-partition graph. Node i belongs to block i * C / N. Features are
// the block's random unit-norm mean plus isotropic Gaussian noise.
Graph sbm_generate(const SbmParams& params, std::uint64_t seed);

// Random node partition into k parts whose sizes differ by at most one.
// Each part keeps its internal edges; ids are relabeled in increasing order.
std::vector<Graph> split_into_subgraphs(const Graph& graph, std::size_t k, std::uint64_t seed);

// Train/validation/test over labeled nodes with floor rounding; the
// remainder goes to test.
NodeSplit make_label_splits(const Graph& graph, double train_frac, double val_frac,
                            std::uint64_t seed);

// Fresh random halving of a labeled pool.
SupportQuerySplit support_query_split(std::span<const std::uint32_t> pool, std::uint64_t seed);

// Uniform sample of floor(fraction * labeled) labeled nodes, sorted.
NodeIds sample_labeled_pool(const Graph& graph, double fraction, std::uint64_t seed);

}  // namespace pagnn
