#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <random>

#include "pagnn/gradcheck.hpp"
#include "pagnn/losses.hpp"

using namespace pagnn;

namespace {

Tensor random_tensor(std::size_t r, std::size_t c, std::mt19937_64& rng, double scale = 1.0) {
  std::uniform_real_distribution<double> u(-scale, scale);
  std::vector<double> v(r * c);
  for (auto& x : v) x = u(rng);
  return Tensor(r, c, std::move(v));
}

Graph toy_graph(std::mt19937_64& rng) {
  return Graph(random_tensor(6, 3, rng), {{0, 1}, {1, 2}, {2, 3}, {3, 4}, {4, 5}, {0, 3}, {1, 4}},
               {0, 1, 2, 0, 1, 2}, 3);
}

ModelConfig small_config() {
  ModelConfig c;
  c.hidden_total = 4;
  c.n_heads = 2;
  return c;
}

}  // namespace

TEST_CASE("loss config validation") {
  CHECK_NOTHROW(validate(LossConfig{}));
  CHECK_THROWS_AS(validate(LossConfig{-1.0, 100.0}), std::invalid_argument);
  CHECK_THROWS_AS(validate(LossConfig{1.0, NAN}), std::invalid_argument);
}

TEST_CASE("cross entropy closed forms") {
  Tape tape;
  const std::vector<int> labels{0, 1, 2, 3};
  const std::vector<std::uint32_t> all{0, 1, 2, 3};
  Var uniform = tape.leaf(Tensor::filled(4, 4, 0.7));
  CHECK(cross_entropy(uniform, labels, all).value().item() == doctest::Approx(std::log(4.0)).epsilon(1e-14));

  double previous = INFINITY;
  for (double margin : {1.0, 5.0, 20.0, 200.0}) {
    std::vector<double> v(16, 0.0);
    for (int i = 0; i < 4; ++i) v[i * 4 + i] = margin;
    const double loss = cross_entropy(tape.leaf(Tensor(4, 4, v)), labels, all).value().item();
    CHECK(loss < previous);
    CHECK(loss >= 0.0);
    previous = loss;
  }
  CHECK(previous < 1e-80);

  const std::vector<int> partial{0, kUnlabeled, 1, 1};
  CHECK_THROWS_AS(cross_entropy(uniform, partial, all), ContractViolation);
  CHECK_THROWS_AS(cross_entropy(uniform, labels, std::vector<std::uint32_t>{}), ContractViolation);
}

TEST_CASE("cross entropy matches direct evaluation") {
  std::mt19937_64 rng(3);
  for (int trial = 0; trial < 20; ++trial) {
    const Tensor z = random_tensor(5, 3, rng, 3.0);
    const std::vector<int> labels{2, 0, 1, 1, 0};
    const std::vector<std::uint32_t> nodes{0, 2, 3};
    double expected = 0.0;
    for (std::uint32_t v : nodes) {
      double denom = 0.0;
      for (std::size_t c = 0; c < 3; ++c) denom += std::exp(z(v, c));
      expected -= std::log(std::exp(z(v, labels[v])) / denom);
    }
    expected /= 3.0;
    Tape tape;
    CHECK(std::abs(cross_entropy(tape.leaf(z), labels, nodes).value().item() - expected) < 1e-12);
  }
}

TEST_CASE("edge masks split message edges and skip self loops") {
  const Graph g(Tensor::zeros(4, 1), {{0, 1}, {1, 2}, {2, 3}}, {0, 0, 0, 0}, 1);
  const MessageGraph m = MessageGraph::build(g);
  const EdgeMasks masks = edge_masks(m, PerturbationSet({{1, 2}}));
  CHECK(masks.n_perturbed == 2);
  CHECK(masks.n_normal == 4);
  for (std::size_t k = 0; k < m.size(); ++k) {
    const bool self = (*m.receiver)[k] == (*m.sender)[k];
    CHECK(masks.perturbed(k, 0) + masks.normal(k, 0) == (self ? 0.0 : 1.0));
  }
}

TEST_CASE("perturbation attention sum") {
  std::mt19937_64 rng(7);
  const Graph g = toy_graph(rng);
  const MessageGraph m = MessageGraph::build(g);
  const ModelConfig c = small_config();
  const ModelOutput out = model_forward(init_params(c, 3, 3, 1), c, g);

  CHECK(perturb_attention_sum(out.records, edge_masks(m, PerturbationSet{})) == 0.0);

  const EdgeMasks all = edge_masks(m, PerturbationSet(std::vector<Edge>(g.edges().begin(), g.edges().end())));
  double expected_all = 0.0;
  for (const auto& rec : out.records)
    for (std::size_t k = 0; k < m.size(); ++k)
      if (m.undirected[k] >= 0) expected_all += rec.scores(k, 0);
  CHECK(perturb_attention_sum(out.records, all) == doctest::Approx(expected_all).epsilon(1e-13));

  // Two perturbed pairs, both directions, every (layer, head): 2 * 2 * 3 terms.
  const EdgeMasks two = edge_masks(m, PerturbationSet({{0, 3}, {1, 4}}));
  double expected = 0.0;
  std::size_t terms = 0;
  for (const auto& rec : out.records)
    for (std::size_t k = 0; k < m.size(); ++k) {
      const auto r = (*m.receiver)[k], s = (*m.sender)[k];
      if ((r == 0 && s == 3) || (r == 3 && s == 0) || (r == 1 && s == 4) || (r == 4 && s == 1)) {
        expected += rec.scores(k, 0);
        ++terms;
      }
    }
  CHECK(terms == 12);
  CHECK(perturb_attention_sum(out.records, two) == doctest::Approx(expected).epsilon(1e-13));
}

TEST_CASE("distance loss hinge values") {
  // Three message edges: two normal, one perturbed; no self loops involved.
  EdgeMasks masks{Tensor::column({0, 0, 1}), Tensor::column({1, 1, 0}), 1, 2};
  Tape tape;
  auto eval = [&](std::vector<double> s, double eta) {
    const Var v = tape.leaf(Tensor::column(s));
    return dist_loss(std::span<const Var>(&v, 1), masks, eta).value().item();
  };
  CHECK(eval({4, 6, 3}, 100) == doctest::Approx(-2.0).epsilon(1e-14));
  CHECK(eval({150, 150, 0}, 100) == -100.0);
  CHECK(eval({3, 3, 3}, 100) == 0.0);
  CHECK(eval({1, 1, 5}, 100) == doctest::Approx(4.0).epsilon(1e-14));

  const EdgeMasks none{Tensor::column({0, 0, 0}), Tensor::column({1, 1, 1}), 0, 3};
  const Var v = tape.leaf(Tensor::column({1, 2, 3}));
  CHECK(dist_loss(std::span<const Var>(&v, 1), none, 100).value().item() == 0.0);
  const EdgeMasks no_normal{Tensor::column({1, 1, 1}), Tensor::column({0, 0, 0}), 3, 0};
  CHECK_THROWS_AS(dist_loss(std::span<const Var>(&v, 1), no_normal, 100), ContractViolation);
}

TEST_CASE("distance loss range and gradient signs") {
  std::mt19937_64 rng(13);
  std::bernoulli_distribution coin(0.3);
  for (int trial = 0; trial < 200; ++trial) {
    const std::size_t e = 12;
    std::vector<double> ptb(e), normal(e);
    std::size_t np = 0;
    for (std::size_t k = 0; k < e; ++k) {
      ptb[k] = coin(rng) ? 1.0 : 0.0;
      normal[k] = 1.0 - ptb[k];
      np += ptb[k] > 0;
    }
    if (np == 0 || np == e) continue;
    const EdgeMasks masks{Tensor::column(ptb), Tensor::column(normal), np, e - np};
    const double eta = std::uniform_real_distribution<double>(0.0, 3.0)(rng);
    Tape tape;
    std::vector<Var> cols{tape.leaf(random_tensor(e, 1, rng, 3.0)), tape.leaf(random_tensor(e, 1, rng, 3.0))};
    Var loss = dist_loss(cols, masks, eta);
    const double value = loss.value().item();
    CHECK(value >= -eta);
    const auto grads = tape.grad(loss, cols);
    const bool saturated = value == -eta;
    for (const auto& g : grads)
      for (std::size_t k = 0; k < e; ++k) {
        if (saturated) {
          CHECK(g.value()(k, 0) == 0.0);
        } else if (ptb[k] > 0) {
          CHECK(g.value()(k, 0) > 0.0);
        } else {
          CHECK(g.value()(k, 0) < 0.0);
        }
      }
  }
}

TEST_CASE("total loss assembly") {
  std::mt19937_64 rng(17);
  const Graph g = toy_graph(rng);
  const MessageGraph m = MessageGraph::build(g);
  const ModelConfig c = small_config();
  const auto params = init_params(c, 3, 3, 5).flatten();
  const std::vector<std::uint32_t> nodes{0, 1, 2, 5};
  const EdgeMasks masks = edge_masks(m, PerturbationSet({{0, 3}, {1, 4}}));

  for (double lambda : {0.0, 0.5, 1.0, 3.0}) {
    Tape tape;
    std::vector<Var> vars;
    for (const auto& t : params) vars.push_back(tape.leaf(t));
    const ForwardPass pass = model_forward(tape, vars, c, m, g.features());
    const TotalLoss loss = total_loss(pass, g, nodes, masks, {lambda, 100.0});
    const auto& b = loss.breakdown;
    CHECK(std::abs(b.total - (b.classification + lambda * b.distance)) < 1e-12);
    CHECK(b.total == loss.total.value().item());
    const double ce = cross_entropy(pass.logits, g.labels(), nodes).value().item();
    if (lambda == 0.0) {
      CHECK(b.total == ce);
      CHECK(tape.grad(loss.total, vars)[0].value() == tape.grad(cross_entropy(pass.logits, g.labels(), nodes), vars)[0].value());
    }
  }
}

TEST_CASE("total loss gradient matches finite differences") {
  std::mt19937_64 rng(19);
  const Graph g = toy_graph(rng);
  const MessageGraph m = MessageGraph::build(g);
  const ModelConfig c = small_config();
  const EdgeMasks masks = edge_masks(m, PerturbationSet({{0, 3}, {1, 4}}));
  const std::vector<std::uint32_t> nodes{0, 1, 2, 3, 4, 5};
  const ScalarFunction f = [&](Tape& tape, std::span<const Var> params) {
    const ForwardPass pass = model_forward(tape, params, c, m, g.features());
    return total_loss(pass, g, nodes, masks, {1.0, 100.0}).total;
  };
  for (std::uint64_t seed : {1, 2, 3}) {
    const auto point = init_params(c, 3, 3, seed).flatten();
    CHECK(finite_diff_check(f, point, 1e-6).max_relative_error < 1e-4);
  }
}
