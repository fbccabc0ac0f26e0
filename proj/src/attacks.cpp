#include "pagnn/attacks.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <set>

#include "pagnn/losses.hpp"
#include "pagnn/random.hpp"
#include "pagnn/tape.hpp"

namespace pagnn {

std::size_t AttackBudget::resolve(const Graph& graph) const {
  if (!std::isfinite(value) || value < 0.0) throw AttackError("attack budget must be non-negative");
  if (mode == Mode::Count) return static_cast<std::size_t>(value);
  if (value > 1.0) throw AttackError("attack rate must lie in [0, 1]");
  return static_cast<std::size_t>(std::llround(value * static_cast<double>(graph.edges().size())));
}

namespace {

std::size_t pair_count(std::size_t n) { return n * (n - 1) / 2; }

AttackResult finish(const Graph& graph, std::vector<Edge> edges, std::vector<AttackStep> log,
                    std::vector<Edge> deletions) {
  std::vector<Edge> inserted;
  for (const auto& s : log) inserted.push_back(s.edge);
  return {graph.with_edges(std::move(edges)), PerturbationSet(std::move(inserted)), std::move(log),
          std::move(deletions)};
}

}  // namespace

AttackResult random_attack(const Graph& graph, const AttackBudget& budget, std::uint64_t seed) {
  const std::size_t flips = budget.resolve(graph);
  const std::size_t n = graph.n_nodes();
  if (n < 2 ? flips > 0 : flips > pair_count(n)) {
    throw AttackError("random attack: budget " + std::to_string(flips) + " exceeds the number of node pairs");
  }
  Rng rng(derive_seed(seed, "random-attack"));
  std::uniform_int_distribution<std::uint32_t> pick(0, static_cast<std::uint32_t>(n - 1));
  std::set<Edge> chosen;
  std::vector<Edge> order;
  while (order.size() < flips) {
    const std::uint32_t a = pick(rng), b = pick(rng);
    if (a == b) continue;
    const Edge e = make_edge(a, b);
    if (chosen.insert(e).second) order.push_back(e);
  }
  std::vector<AttackStep> log;
  std::vector<Edge> deletions;
  for (const Edge& e : order) {
    if (graph.has_edge(e.u, e.v)) {
      deletions.push_back(e);
    } else {
      log.push_back({e, 1.0});
    }
  }
  std::vector<Edge> edges;
  const std::set<Edge> removed(deletions.begin(), deletions.end());
  for (const Edge& e : graph.edges())
    if (!removed.count(e)) edges.push_back(e);
  for (const auto& s : log) edges.push_back(s.edge);
  return finish(graph, std::move(edges), std::move(log), std::move(deletions));
}

// ---------------------------------------------------------------------------
// Gradient surrogate

namespace {

Tensor dense_adjacency(const Graph& graph) {
  const std::size_t n = graph.n_nodes();
  std::vector<double> a(n * n, 0.0);
  for (const Edge& e : graph.edges()) {
    a[e.u * n + e.v] = 1.0;
    a[e.v * n + e.u] = 1.0;
  }
  return Tensor(n, n, std::move(a));
}

// D^-1/2 (A + I) D^-1/2 on the tape, differentiable in A.
Var normalized_adjacency(Var adjacency) {
  const std::size_t n = adjacency.value().rows();
  std::vector<double> eye(n * n, 0.0);
  for (std::size_t i = 0; i < n; ++i) eye[i * n + i] = 1.0;
  Var with_loops = adjacency + adjacency.tape()->constant(Tensor(n, n, std::move(eye)));
  Var inv_sqrt = pow(row_sum(with_loops), -0.5);
  return row_scale(transpose(row_scale(with_loops, inv_sqrt)), inv_sqrt);
}

Var surrogate_forward(Var adjacency_hat, Var features, Var weight) {
  return matmul(adjacency_hat, matmul(adjacency_hat, matmul(features, weight)));
}

}  // namespace

Surrogate train_surrogate(const Graph& graph, std::span<const std::uint32_t> nodes, std::size_t steps,
                          double learning_rate, std::uint64_t seed) {
  if (nodes.empty()) throw AttackError("surrogate: no labeled training nodes");
  const std::size_t d = graph.feature_dim(), c = static_cast<std::size_t>(graph.n_classes());
  Rng rng(derive_seed(seed, "surrogate-init"));
  const double limit = std::sqrt(6.0 / static_cast<double>(d + c));
  std::uniform_real_distribution<double> u(-limit, limit);
  std::vector<double> w(d * c);
  for (auto& x : w) x = u(rng);
  Tensor weight(d, c, std::move(w));

  Tape tape;
  Var propagated;
  {
    Var a_hat = normalized_adjacency(tape.constant(dense_adjacency(graph)));
    propagated = tape.constant(matmul(a_hat, matmul(a_hat, tape.constant(graph.features()))).value());
  }
  for (std::size_t step = 0; step < steps; ++step) {
    Var wv = tape.leaf(weight);
    Var loss = cross_entropy(matmul(propagated, wv), graph.labels(), nodes);
    const GradientMap grads = tape.backward(loss);
    const Tensor& g = grads.at(wv.id());
    std::vector<double> next(weight.values().begin(), weight.values().end());
    for (std::size_t k = 0; k < next.size(); ++k) next[k] -= learning_rate * g[k];
    weight = Tensor(d, c, std::move(next));
  }
  return {weight};
}

Tensor surrogate_logits(const Surrogate& surrogate, const Graph& graph) {
  Tape tape;
  Var a_hat = normalized_adjacency(tape.constant(dense_adjacency(graph)));
  return surrogate_forward(a_hat, tape.constant(graph.features()), tape.constant(surrogate.weight)).value();
}

AttackResult greedy_gradient_attack(const Graph& graph, const AttackBudget& budget,
                                    const GreedyOptions& options, std::uint64_t seed) {
  const std::size_t total = budget.resolve(graph);
  if (total == 0) return {graph, PerturbationSet{}, {}, {}};
  if (options.edges_per_step == 0) throw AttackError("greedy attack: edges_per_step must be positive");
  const NodeIds labeled = graph.labeled_nodes();
  const Surrogate surrogate =
      train_surrogate(graph, labeled, options.surrogate_steps, options.surrogate_learning_rate, seed);

  const std::size_t n = graph.n_nodes();
  const auto labels = graph.labels();
  std::vector<Edge> edges(graph.edges().begin(), graph.edges().end());
  std::vector<char> adjacent(n * n, 0);
  for (const Edge& e : edges) adjacent[e.u * n + e.v] = 1;
  auto cross = [&](std::uint32_t a, std::uint32_t b) {
    return labels[a] != kUnlabeled && labels[b] != kUnlabeled && labels[a] != labels[b];
  };

  std::vector<AttackStep> log;
  Graph current = graph;
  while (log.size() < total) {
    Tape tape;
    Var adjacency = tape.leaf(dense_adjacency(current));
    Var logits = surrogate_forward(normalized_adjacency(adjacency), tape.constant(graph.features()),
                                   tape.constant(surrogate.weight));
    const GradientMap grads = tape.backward(cross_entropy(logits, labels, labeled));
    const Tensor& g = grads.at(adjacency.id());

    struct Candidate {
      double score;
      Edge edge;
    };
    std::vector<Candidate> pool, fallback;
    for (std::uint32_t a = 0; a < n; ++a)
      for (std::uint32_t b = a + 1; b < n; ++b) {
        if (adjacent[a * n + b]) continue;
        const Candidate c{g(a, b) + g(b, a), {a, b}};
        (!options.prefer_cross_class || cross(a, b) ? pool : fallback).push_back(c);
      }
    if (pool.empty()) pool.swap(fallback);
    if (pool.empty()) {
      throw AttackError("greedy attack: candidate pool exhausted after " + std::to_string(log.size()) +
                        " of " + std::to_string(total) + " insertions");
    }
    const std::size_t take = std::min({options.edges_per_step, total - log.size(), pool.size()});
    std::partial_sort(pool.begin(), pool.begin() + take, pool.end(), [](const Candidate& x, const Candidate& y) {
      return x.score != y.score ? x.score > y.score : x.edge < y.edge;
    });
    for (std::size_t k = 0; k < take; ++k) {
      const Edge e = pool[k].edge;
      adjacent[e.u * n + e.v] = 1;
      edges.push_back(e);
      log.push_back({e, pool[k].score});
    }
    current = graph.with_edges(edges);
  }
  return finish(graph, std::move(edges), std::move(log), {});
}

// ---------------------------------------------------------------------------
// Targeted surrogate

AttackResult targeted_attack(const Graph& graph, std::span<const std::uint32_t> targets,
                             std::size_t per_target_budget, std::uint64_t seed) {
  const std::size_t n = graph.n_nodes();
  const Tensor& x = graph.features();
  std::vector<double> norms(n, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    for (double v : x.row(i)) norms[i] += v * v;
    norms[i] = std::sqrt(norms[i]);
  }
  auto cosine = [&](std::uint32_t a, std::uint32_t b) {
    if (norms[a] == 0.0 || norms[b] == 0.0) return 0.0;
    double dot = 0.0;
    for (std::size_t k = 0; k < x.cols(); ++k) dot += x(a, k) * x(b, k);
    return dot / (norms[a] * norms[b]);
  };

  Rng rng(derive_seed(seed, "targeted-attack"));
  std::vector<std::uint32_t> order(n);
  std::iota(order.begin(), order.end(), 0u);
  std::set<Edge> present(graph.edges().begin(), graph.edges().end());
  std::vector<Edge> edges(graph.edges().begin(), graph.edges().end());
  std::vector<AttackStep> log;
  for (std::uint32_t t : targets) {
    if (t >= n) throw AttackError("targeted attack: target " + std::to_string(t) + " out of range");
    const int yt = graph.label(t);
    std::shuffle(order.begin(), order.end(), rng);
    std::vector<std::pair<double, std::uint32_t>> eligible;
    for (std::uint32_t v : order) {
      if (v == t || graph.label(v) == kUnlabeled || graph.label(v) == yt) continue;
      if (present.count(make_edge(t, v))) continue;
      eligible.push_back({cosine(t, v), v});
    }
    if (eligible.size() < per_target_budget) {
      throw AttackError("targeted attack: node " + std::to_string(t) + " has only " +
                        std::to_string(eligible.size()) + " eligible counterparts");
    }
    std::stable_sort(eligible.begin(), eligible.end(),
                     [](const auto& a, const auto& b) { return a.first < b.first; });
    for (std::size_t k = 0; k < per_target_budget; ++k) {
      const Edge e = make_edge(t, eligible[k].second);
      present.insert(e);
      edges.push_back(e);
      log.push_back({e, eligible[k].first});
    }
  }
  return finish(graph, std::move(edges), std::move(log), {});
}

NodeIds pick_targets(const Graph& graph, std::size_t count, std::uint64_t seed) {
  NodeIds labeled = graph.labeled_nodes();
  if (count > labeled.size()) {
    throw AttackError("pick_targets: requested " + std::to_string(count) + " of " +
                      std::to_string(labeled.size()) + " labeled nodes");
  }
  Rng rng(derive_seed(seed, "pick-targets"));
  std::shuffle(labeled.begin(), labeled.end(), rng);
  labeled.resize(count);
  std::sort(labeled.begin(), labeled.end());
  return labeled;
}

void write_attack_log(const AttackResult& result, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write attack log " + path.string());
  out << "step,u,v,score\n";
  out.precision(17);
  for (std::size_t k = 0; k < result.log.size(); ++k) {
    const auto& s = result.log[k];
    out << k << ',' << s.edge.u << ',' << s.edge.v << ',' << s.score << '\n';
  }
}

}  // namespace pagnn
