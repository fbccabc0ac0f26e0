#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <set>

#include "pagnn/attacks.hpp"
#include "pagnn/model.hpp"

using namespace pagnn;

namespace {

Graph two_blocks(std::uint64_t seed, std::size_t n = 40) {
  SbmParams p;
  p.n_nodes = n;
  p.n_classes = 2;
  p.p_in = 0.3;
  p.p_out = 0.02;
  p.feature_dim = 4;
  return sbm_generate(p, seed);
}

void check_untouched(const Graph& before, const AttackResult& r) {
  CHECK(r.poisoned.features() == before.features());
  CHECK(std::equal(r.poisoned.labels().begin(), r.poisoned.labels().end(), before.labels().begin()));
  CHECK(r.perturbations.subset_of(r.poisoned));
  CHECK(r.log.size() == r.perturbations.size());
  for (const Edge& e : r.perturbations.edges) CHECK_FALSE(before.has_edge(e.u, e.v));
}

// Loss of the linear surrogate evaluated with plain loops on a dense adjacency.
double surrogate_loss(const std::vector<double>& a, const Graph& g, const Tensor& w) {
  const std::size_t n = g.n_nodes(), d = g.feature_dim(), c = w.cols();
  std::vector<double> deg(n, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    deg[i] = 1.0;
    for (std::size_t j = 0; j < n; ++j) deg[i] += a[i * n + j];
  }
  auto ahat = [&](std::size_t i, std::size_t j) {
    return ((i == j ? 1.0 : 0.0) + a[i * n + j]) / std::sqrt(deg[i] * deg[j]);
  };
  std::vector<double> xw(n * c, 0.0), h1(n * c, 0.0), h2(n * c, 0.0);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t k = 0; k < c; ++k)
      for (std::size_t r = 0; r < d; ++r) xw[i * c + k] += g.features()(i, r) * w(r, k);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j)
      for (std::size_t k = 0; k < c; ++k) h1[i * c + k] += ahat(i, j) * xw[j * c + k];
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j)
      for (std::size_t k = 0; k < c; ++k) h2[i * c + k] += ahat(i, j) * h1[j * c + k];
  double loss = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    double z = 0.0;
    for (std::size_t k = 0; k < c; ++k) z += std::exp(h2[i * c + k]);
    loss -= h2[i * c + g.label(i)] - std::log(z);
  }
  return loss / static_cast<double>(n);
}

}  // namespace

TEST_CASE("budget resolution") {
  const Graph g = two_blocks(1);
  CHECK(AttackBudget::rate(0.0).resolve(g) == 0);
  CHECK(AttackBudget::rate(0.1).resolve(g) ==
        static_cast<std::size_t>(std::llround(0.1 * static_cast<double>(g.edges().size()))));
  CHECK(AttackBudget::count(7).resolve(g) == 7);
  CHECK_THROWS_AS(AttackBudget::rate(1.5).resolve(g), AttackError);
  CHECK_THROWS_AS(AttackBudget::rate(-0.1).resolve(g), AttackError);
}

TEST_CASE("random attack") {
  const Graph g = two_blocks(2);
  const AttackResult none = random_attack(g, AttackBudget::rate(0.0), 1);
  CHECK(none.poisoned == g);
  CHECK(none.perturbations.empty());

  const Graph empty(Tensor::zeros(10, 2), {}, std::vector<int>(10, 0), 1);
  const AttackResult forced = random_attack(empty, AttackBudget::count(12), 3);
  CHECK(forced.perturbations.size() == 12);
  CHECK(forced.deletions.empty());
  CHECK(forced.poisoned.edges().size() == 12);

  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    const AttackResult r = random_attack(g, AttackBudget::rate(0.3), seed);
    const std::size_t flips = AttackBudget::rate(0.3).resolve(g);
    CHECK(r.perturbations.size() + r.deletions.size() == flips);
    CHECK(r.poisoned.edges().size() == g.edges().size() + r.perturbations.size() - r.deletions.size());
    for (const Edge& e : r.deletions) CHECK_FALSE(r.poisoned.has_edge(e.u, e.v));
    check_untouched(g, r);
    const AttackResult again = random_attack(g, AttackBudget::rate(0.3), seed);
    CHECK(again.poisoned == r.poisoned);
    CHECK(again.perturbations.edges == r.perturbations.edges);
  }
  CHECK_THROWS_AS(random_attack(empty, AttackBudget::count(46), 0), AttackError);
}

TEST_CASE("greedy attack basics") {
  const Graph g = two_blocks(3);
  const AttackResult none = greedy_gradient_attack(g, AttackBudget::count(0), {}, 1);
  CHECK(none.poisoned == g);
  CHECK(none.perturbations.empty());

  const AttackResult r = greedy_gradient_attack(g, AttackBudget::rate(0.2), {}, 1);
  CHECK(r.perturbations.size() == AttackBudget::rate(0.2).resolve(g));
  check_untouched(g, r);
  for (const auto& s : r.log) CHECK(g.label(s.edge.u) != g.label(s.edge.v));
  const AttackResult again = greedy_gradient_attack(g, AttackBudget::rate(0.2), {}, 1);
  CHECK(again.poisoned == r.poisoned);

  GreedyOptions batched;
  batched.edges_per_step = 4;
  CHECK(greedy_gradient_attack(g, AttackBudget::count(10), batched, 1).perturbations.size() == 10);

  const Graph complete(Tensor::zeros(3, 1), {{0, 1}, {0, 2}, {1, 2}}, {0, 1, 0}, 2);
  CHECK_THROWS_AS(greedy_gradient_attack(complete, AttackBudget::count(1), {}, 1), AttackError);
}

TEST_CASE("greedy score is the directional derivative of the surrogate loss") {
  const Graph g = two_blocks(4, 16);
  GreedyOptions opt;
  opt.prefer_cross_class = false;
  const AttackResult r = greedy_gradient_attack(g, AttackBudget::count(1), opt, 9);
  const Surrogate s = train_surrogate(g, g.labeled_nodes(), opt.surrogate_steps, opt.surrogate_learning_rate, 9);
  const std::size_t n = g.n_nodes();
  std::vector<double> a(n * n, 0.0);
  for (const Edge& e : g.edges()) a[e.u * n + e.v] = a[e.v * n + e.u] = 1.0;
  const double h = 1e-6;
  double best = -INFINITY;
  Edge best_edge{};
  for (std::uint32_t u = 0; u < n; ++u)
    for (std::uint32_t v = u + 1; v < n; ++v) {
      if (g.has_edge(u, v)) continue;
      auto plus = a, minus = a;
      plus[u * n + v] = plus[v * n + u] = h;
      minus[u * n + v] = minus[v * n + u] = -h;
      const double d = (surrogate_loss(plus, g, s.weight) - surrogate_loss(minus, g, s.weight)) / (2 * h);
      if (d > best) {
        best = d;
        best_edge = {u, v};
      }
    }
  REQUIRE(r.log.size() == 1);
  CHECK(r.log[0].edge == best_edge);
  CHECK(r.log[0].score == doctest::Approx(best).epsilon(1e-6));
}

TEST_CASE("unrestricted greedy insertion crosses communities") {
  GreedyOptions opt;
  opt.prefer_cross_class = false;
  int crossing = 0;
  for (std::uint64_t seed = 0; seed < 50; ++seed) {
    const Graph g = two_blocks(100 + seed);
    const AttackResult r = greedy_gradient_attack(g, AttackBudget::count(1), opt, seed);
    crossing += g.label(r.log[0].edge.u) != g.label(r.log[0].edge.v);
  }
  CHECK(crossing >= 48);
}

TEST_CASE("surrogate accuracy falls as greedy insertions accumulate") {
  const Graph g = two_blocks(5, 80);
  const AttackResult r = greedy_gradient_attack(g, AttackBudget::rate(0.3), {}, 2);
  const GreedyOptions opt;
  const Surrogate s = train_surrogate(g, g.labeled_nodes(), opt.surrogate_steps, opt.surrogate_learning_rate, 2);
  const NodeIds all = g.labeled_nodes();
  std::vector<double> acc;
  for (double rate : {0.0, 0.1, 0.2, 0.3}) {
    const std::size_t k = AttackBudget::rate(rate).resolve(g);
    std::vector<Edge> edges(g.edges().begin(), g.edges().end());
    for (std::size_t i = 0; i < k; ++i) edges.push_back(r.log[i].edge);
    acc.push_back(accuracy(surrogate_logits(s, g.with_edges(edges)), g, all));
  }
  for (std::size_t i = 1; i < acc.size(); ++i) CHECK(acc[i] <= acc[i - 1] + 1.0 / 80.0);
  CHECK(acc.back() < acc.front());
}

TEST_CASE("targeted attack links targets to dissimilar nodes of other classes") {
  SbmParams p;
  p.n_nodes = 60;
  p.n_classes = 3;
  p.p_in = 0.2;
  p.p_out = 0.02;
  const Graph g = sbm_generate(p, 6);
  const NodeIds targets = pick_targets(g, 5, 1);
  CHECK(targets.size() == 5);
  CHECK(std::is_sorted(targets.begin(), targets.end()));
  const AttackResult r = targeted_attack(g, targets, 5, 1);
  CHECK(r.perturbations.size() == 25);
  check_untouched(g, r);

  auto cosine = [&](std::uint32_t a, std::uint32_t b) {
    double dot = 0, na = 0, nb = 0;
    for (std::size_t k = 0; k < g.feature_dim(); ++k) {
      dot += g.features()(a, k) * g.features()(b, k);
      na += g.features()(a, k) * g.features()(a, k);
      nb += g.features()(b, k) * g.features()(b, k);
    }
    return dot / std::sqrt(na * nb);
  };
  std::size_t step = 0;
  for (std::uint32_t t : targets) {
    std::set<std::uint32_t> chosen;
    double worst_chosen = -INFINITY;
    for (std::size_t k = 0; k < 5; ++k, ++step) {
      const Edge e = r.log[step].edge;
      const std::uint32_t other = e.u == t ? e.v : e.u;
      CHECK(g.label(other) != g.label(t));
      chosen.insert(other);
      worst_chosen = std::max(worst_chosen, cosine(t, other));
    }
    for (std::uint32_t v = 0; v < g.n_nodes(); ++v) {
      if (v == t || chosen.count(v) || g.label(v) == g.label(t) || r.poisoned.has_edge(t, v)) continue;
      CHECK(cosine(t, v) >= worst_chosen - 1e-12);
    }
  }
  CHECK_THROWS_AS(targeted_attack(g, targets, 100, 1), AttackError);
  CHECK_THROWS_AS(pick_targets(g, 61, 1), AttackError);
}

TEST_CASE("attack log sidecar") {
  const Graph g = two_blocks(7);
  const AttackResult r = greedy_gradient_attack(g, AttackBudget::count(3), {}, 1);
  const auto path = std::filesystem::temp_directory_path() / "pagnn_attack_log.csv";
  write_attack_log(r, path);
  std::ifstream in(path);
  std::string line;
  std::getline(in, line);
  CHECK(line == "step,u,v,score");
  int rows = 0;
  while (std::getline(in, line)) ++rows;
  CHECK(rows == 3);
  std::filesystem::remove(path);
}
