// Acceptance suite: one PASS/FAIL line per criterion. Optional arguments
// select criteria by number, e.g. `test_acceptance 1 7 9`.
#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <functional>
#include <map>
#include <random>
#include <set>
#include <string>
#include <vector>

#include "pagnn/gradcheck.hpp"
#include "pagnn/harness.hpp"
#include "pagnn/random.hpp"

using namespace pagnn;

namespace {

std::string num(double x) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.4g", x);
  return buf;
}

struct Outcome {
  bool pass = false;
  std::string detail;
};

Tensor random_tensor(std::size_t r, std::size_t c, std::mt19937_64& rng, double range = 1.0) {
  std::uniform_real_distribution<double> u(-range, range);
  std::vector<double> v(r * c);
  for (auto& x : v) x = u(rng);
  return Tensor(r, c, std::move(v));
}

Graph random_graph(std::size_t n, std::size_t d, int classes, double p, std::mt19937_64& rng) {
  std::bernoulli_distribution coin(p);
  std::vector<Edge> edges;
  for (std::uint32_t i = 0; i < n; ++i)
    for (std::uint32_t j = i + 1; j < n; ++j)
      if (coin(rng)) edges.push_back({i, j});
  std::vector<int> labels(n);
  for (std::size_t i = 0; i < n; ++i) labels[i] = std::uniform_int_distribution<int>(-1, classes - 1)(rng);
  return Graph(random_tensor(n, d, rng), edges, labels, classes);
}

// Pipeline shared by criteria 4, 5, 6 and 8.
ExperimentConfig pipeline() {
  ExperimentConfig c;
  c.sbm.n_nodes = 1000;
  c.sbm.n_classes = 4;
  c.sbm.feature_noise = 0.5;
  c.n_subgraphs = 5;
  c.attack.kind = AttackKind::Greedy;
  c.attack.clean_budget = 0.1;
  c.lambdas = {1.0};
  c.etas = {1.0};
  c.meta.inner_lr = 0.05;
  c.meta.outer_lr = 0.05;
  c.meta.inner_steps = 5;
  c.meta.second_order = true;
  c.meta.max_outer_iters = 30;
  c.meta.patience = 10;
  c.fine_tune.max_steps = 200;
  c.fine_tune.lr = 0.3;
  c.fine_tune.patience = 30;
  return c;
}

Outcome gradient_correctness() {
  std::mt19937_64 rng(1);
  const Graph g(random_tensor(6, 3, rng),
                {{0, 1}, {1, 2}, {2, 3}, {3, 4}, {4, 5}, {0, 5}, {0, 3}, {1, 4}}, {0, 1, 2, 0, 1, 2}, 3);
  ModelConfig model;
  model.n_layers = 2;
  model.hidden_total = 4;
  model.n_heads = 2;
  const MessageGraph messages = MessageGraph::build(g);
  const EdgeMasks masks = edge_masks(messages, PerturbationSet({{0, 3}, {1, 4}}));
  const std::vector<std::uint32_t> nodes{0, 1, 2, 3, 4, 5};
  const ScalarFunction f = [&](Tape& tape, std::span<const Var> params) {
    const ForwardPass pass = model_forward(tape, params, model, messages, g.features());
    return total_loss(pass, g, nodes, masks, {1.0, 100.0}).total;
  };
  double worst = 0.0;
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    const auto point = init_params(model, 3, 3, seed).flatten();
    worst = std::max(worst, finite_diff_check(f, point, 1e-5).max_relative_error);
  }
  return {worst < 1e-4, "max relative error " + num(worst) + " over 5 parameter draws"};
}

Outcome attention_normalization() {
  std::mt19937_64 rng(2);
  double worst = 0.0;
  double smallest = 1.0;
  for (int draw = 0; draw < 100; ++draw) {
    const std::size_t n = 5 + draw % 40;
    const Graph g = random_graph(n, 4, 3, std::uniform_real_distribution<double>(0.02, 0.5)(rng), rng);
    ModelConfig model;
    model.hidden_total = 2 * (1 + draw % 4);
    model.n_heads = 1 + draw % 2;
    const ModelOutput out = model_forward(init_params(model, 4, 3, rng()), model, g);
    const MessageGraph m = MessageGraph::build(g);
    for (const AttentionRecord& rec : out.records) {
      std::vector<double> sums(n, 0.0);
      for (std::size_t k = 0; k < m.size(); ++k) {
        sums[(*m.receiver)[k]] += rec.normalized(k, 0);
        smallest = std::min(smallest, rec.normalized(k, 0));
      }
      for (double s : sums) worst = std::max(worst, std::abs(s - 1.0));
    }
  }
  return {worst < 1e-9 && smallest > 0.0,
          "max |sum - 1| " + num(worst) + ", min coefficient " + num(smallest)};
}

Objective quadratic(double c) {
  return [c](std::span<const Var> p) { return Evaluation{scale(sum(p[0] * p[0]), c), {}}; };
}

Outcome meta_gradient_oracle() {
  const double cs[] = {0.5, 2.0};
  std::vector<TaskObjectives> tasks;
  for (double c : cs) tasks.push_back({"q" + std::to_string(c), quadratic(c), quadratic(c)});
  double worst = 0.0;
  for (std::size_t steps : {1u, 5u}) {
    for (double alpha : {0.05, 0.1, 0.2}) {
      for (double theta0 : {1.0, -0.4, 3.0}) {
        // d/dθ Σ c (θ r^k)^2 with r = 1 - 2αc.
        double exact = 0.0;
        for (double c : cs) exact += 2.0 * c * std::pow(1.0 - 2.0 * alpha * c, 2.0 * static_cast<double>(steps)) * theta0;
        MetaConfig cfg;
        cfg.inner_lr = alpha;
        cfg.inner_steps = steps;
        const Tensor theta[] = {Tensor::scalar(theta0)};
        worst = std::max(worst, std::abs(meta_step(theta, tasks, cfg).meta_gradient[0].item() - exact));
      }
    }
  }
  MetaConfig cfg;
  cfg.inner_lr = 0.0;
  cfg.outer_lr = 0.1;
  const Tensor theta[] = {Tensor::scalar(1.7)};
  const double stepped = meta_step(theta, tasks, cfg).theta[0].item();
  const double plain = 1.7 - 0.1 * (2.0 * 0.5 + 2.0 * 2.0) * 1.7;
  const double gd_error = std::abs(stepped - plain);
  return {worst < 1e-6 && gd_error < 1e-10,
          "max meta-gradient error " + num(worst) + ", zero-rate step error " + num(gd_error)};
}

Outcome penalty_direction() {
  const ExperimentConfig c = pipeline();
  const std::uint64_t seed = c.seeds.front();
  const SyntheticData data = generate_data(c, seed);
  std::vector<Task> tasks;
  for (std::size_t i = 0; i < data.clean.size(); ++i) {
    const AttackResult r = run_attack(c.attack, data.clean[i], c.attack.clean_budget,
                                      derive_seed(seed, "clean-attack-" + std::to_string(i)));
    tasks.push_back(make_task("clean" + std::to_string(i), r.poisoned, r.perturbations,
                              sample_labeled_pool(r.poisoned, c.splits.pool, derive_seed(seed, "pool-" + std::to_string(i)))));
  }
  const AttackResult target = run_attack(c.attack, data.target, 0.2, derive_seed(seed, "target-attack"));
  const NodeSplit split = target_split(c, target.poisoned, seed);
  const TargetData target_data = make_target(target.poisoned, split);
  const ModelParams init = init_params(c.model, target.poisoned.feature_dim(), target.poisoned.n_classes(),
                                       derive_seed(seed, "init-params"));
  const LossConfig loss{c.lambdas.front(), c.etas.front()};
  const TrainResult meta = train_meta(init, tasks, target_data, c.model, loss, c.meta, derive_seed(seed, "train"));

  bool pass = tasks.size() == 4;
  std::string detail;
  for (const Task& t : tasks) {
    const EvalMetrics m = evaluate_model(meta.params, c.model, *t.graph->graph, {{}, {}, t.labeled_pool}, t.perturbations, loss.eta);
    pass = pass && m.mean_perturbed < m.mean_normal;
    detail += t.name + " " + num(m.mean_perturbed) + "<" + num(m.mean_normal) + "; ";
  }
  const TrainResult tuned = fine_tune(meta.params, target_data, c.model, c.fine_tune);
  const EvalMetrics m = evaluate_model(tuned.params, c.model, target.poisoned, split, target.perturbations, loss.eta);
  pass = pass && m.mean_perturbed < m.mean_normal;
  detail += "target " + num(m.mean_perturbed) + "<" + num(m.mean_normal);
  return {pass, detail};
}

MetricsReport robustness_sweep() {
  ExperimentConfig c = pipeline();
  c.attack.budgets = {0.2};
  c.methods = {Method::PaGnn, Method::NoPenalty};
  return run_sweep(c, 1);
}

MetricsReport first_sweep;

Outcome robustness_gap() {
  first_sweep = robustness_sweep();
  std::map<std::uint64_t, double> pagnn, np;
  for (const CellResult& r : first_sweep.cells)
    (r.cell.method == Method::PaGnn ? pagnn : np)[r.cell.seed] = r.metrics.test_accuracy;
  double gap = 0.0;
  int positive = 0;
  std::string per_seed;
  for (const auto& [seed, acc] : pagnn) {
    const double d = acc - np.at(seed);
    gap += d;
    positive += d > 0.0;
    per_seed += std::to_string(static_cast<int>(std::lround(d * 1000.0))) + " ";
  }
  gap /= static_cast<double>(pagnn.size());
  return {gap >= 0.02 && positive >= 8,
          "mean gap " + num(100.0 * gap) + " points, positive in " + std::to_string(positive) + "/" +
              std::to_string(pagnn.size()) + " seeds (per-seed gap x1000: " + per_seed + ")"};
}

Outcome attack_potency() {
  ExperimentConfig c = pipeline();
  c.attack.budgets = {0.0, 0.1, 0.2, 0.3};
  c.methods = {Method::Vanilla};
  const MetricsReport report = run_sweep(c, 1);
  std::vector<double> means;
  for (const SummaryRow& row : report.summary) means.push_back(row.mean_accuracy);
  bool pass = means.size() == 4 && means.front() - means.back() >= 0.03;
  std::string detail = "mean accuracy";
  for (std::size_t k = 0; k < means.size(); ++k) {
    if (k > 0) pass = pass && means[k] <= means[k - 1] + 0.01;
    detail += " " + num(means[k]);
  }
  return {pass, detail};
}

Outcome hinge_behavior() {
  const EdgeMasks masks{Tensor::column({0, 0, 1}), Tensor::column({1, 1, 0}), 1, 2};
  const EdgeMasks none{Tensor::column({0, 0, 0}), Tensor::column({1, 1, 1}), 0, 3};
  Tape tape;
  auto eval = [&](std::vector<double> s, const EdgeMasks& m) {
    const Var v = tape.leaf(Tensor::column(std::move(s)));
    return dist_loss(std::span<const Var>(&v, 1), m, 100.0).value().item();
  };
  const double a = eval({4, 6, 3}, masks);
  const double b = eval({150, 150, 0}, masks);
  const double z = eval({1, 2, 3}, none);
  return {a == -2.0 && b == -100.0 && z == 0.0,
          "gap 2 -> " + num(a) + ", gap 150 -> " + num(b) + ", empty -> " + num(z)};
}

Outcome determinism() {
  if (first_sweep.cells.empty()) first_sweep = robustness_sweep();
  const MetricsReport again = robustness_sweep();
  const bool same = first_sweep.cells_csv() == again.cells_csv() && first_sweep.summary_csv() == again.summary_csv() &&
                    first_sweep.summary_json() == again.summary_json();
  return {same, same ? "metrics.csv, summary.csv and summary.json identical" : "metrics differ between runs"};
}

Outcome format_round_trip() {
  std::mt19937_64 rng(9);
  int identical = 0;
  for (int k = 0; k < 100; ++k) {
    const Graph g = random_graph(1 + k % 30, 1 + k % 5, 1 + k % 4, 0.2, rng);
    std::vector<Edge> picked;
    for (const Edge& e : g.edges())
      if (rng() % 3 == 0) picked.push_back(e);
    const PerturbationSet p(picked);
    const std::string first = serialize_graph(g, k % 2 ? &p : nullptr);
    const GraphFile loaded = parse_graph(first);
    const std::string second = serialize_graph(loaded.graph, loaded.perturbed ? &*loaded.perturbed : nullptr);
    identical += first == second && loaded.graph == g;
  }
  return {identical == 100, std::to_string(identical) + "/100 graphs byte-identical"};
}

}  // namespace

int main(int argc, char** argv) {
  const std::vector<std::pair<std::string, std::function<Outcome()>>> criteria{
      {"gradient correctness", gradient_correctness},
      {"attention normalization", attention_normalization},
      {"meta-gradient oracle", meta_gradient_oracle},
      {"penalty direction", penalty_direction},
      {"robustness gap", robustness_gap},
      {"attack potency", attack_potency},
      {"hinge behavior", hinge_behavior},
      {"determinism", determinism},
      {"format round trip", format_round_trip},
  };
  std::set<int> selected;
  for (int i = 1; i < argc; ++i) selected.insert(std::atoi(argv[i]));
  int failures = 0;
  for (std::size_t k = 0; k < criteria.size(); ++k) {
    const int id = static_cast<int>(k + 1);
    if (!selected.empty() && !selected.count(id)) continue;
    const auto start = std::chrono::steady_clock::now();
    Outcome o;
    try {
      o = criteria[k].second();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    std::printf("criterion %d %s: %s (%.1f s) %s\n", id, criteria[k].first.c_str(), o.pass ? "PASS" : "FAIL", secs,
                o.detail.c_str());
    std::fflush(stdout);
    failures += !o.pass;
  }
  return failures == 0 ? EXIT_SUCCESS : EXIT_FAILURE;
}
