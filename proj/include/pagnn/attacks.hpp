#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <stdexcept>
#include <vector>

#include "pagnn/graph.hpp"

namespace pagnn {

class AttackError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct AttackBudget {
  enum class Mode { Rate, Count };
  Mode mode = Mode::Rate;
  double value = 0.0;

  static AttackBudget rate(double r) { return {Mode::Rate, r}; }
  static AttackBudget count(std::size_t n) { return {Mode::Count, static_cast<double>(n)}; }
  // Number of flips for a graph: round(rate * |E|) or the count itself.
  std::size_t resolve(const Graph& graph) const;
};

struct AttackStep {
  Edge edge;
  double score = 0.0;
};

struct AttackResult {
  Graph poisoned;
  PerturbationSet perturbations;  // inserted edges
  std::vector<AttackStep> log;    // insertions in decision order
  std::vector<Edge> deletions;    // removed edges (random flips only)
};

// Flips uniformly sampled node pairs: present edges are removed, absent ones
// inserted.
AttackResult random_attack(const Graph& graph, const AttackBudget& budget, std::uint64_t seed);

struct GreedyOptions {
  std::size_t surrogate_steps = 100;
  double surrogate_learning_rate = 0.5;
  // Insertions taken from each gradient evaluation.
  std::size_t edges_per_step = 1;
  // Restrict candidates to pairs with different known labels while any remain.
  bool prefer_cross_class = true;
};

// Linear two-hop surrogate: logits = A_hat A_hat X W.
struct Surrogate {
  Tensor weight;  // d x C
};

Surrogate train_surrogate(const Graph& graph, std::span<const std::uint32_t> nodes, std::size_t steps,
                          double learning_rate, std::uint64_t seed);
Tensor surrogate_logits(const Surrogate& surrogate, const Graph& graph);

// Inserts the non-adjacent pairs whose adjacency gradient most increases the
// surrogate's training loss over the labeled nodes.
AttackResult greedy_gradient_attack(const Graph& graph, const AttackBudget& budget,
                                    const GreedyOptions& options, std::uint64_t seed);

// For every target, links it to the differently labeled nodes with the lowest
// feature cosine similarity.
AttackResult targeted_attack(const Graph& graph, std::span<const std::uint32_t> targets,
                             std::size_t per_target_budget, std::uint64_t seed);

NodeIds pick_targets(const Graph& graph, std::size_t count, std::uint64_t seed);

// CSV with header step,u,v,score.
void write_attack_log(const AttackResult& result, const std::filesystem::path& path);

}  // namespace pagnn
