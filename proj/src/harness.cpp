#include "pagnn/harness.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <exception>
#include <fstream>
#include <iomanip>
#include <map>
#include <mutex>
#include <set>
#include <sstream>
#include <thread>

#include <json.hpp>

#include "pagnn/random.hpp"

namespace pagnn {

using ordered_json = nlohmann::ordered_json;

// ---------------------------------------------------------------------------
// Names

const char* method_name(Method method) {
  switch (method) {
    case Method::PaGnn: return "pagnn";
    case Method::NoPenalty: return "np";
    case Method::SecondTime: return "second_time";
    case Method::PretrainFinetune: return "ft";
    case Method::Joint: return "jt";
    case Method::Vanilla: return "vanilla";
    case Method::Preprocess: return "preprocess_baseline";
  }
  return "unknown";
}

Method parse_method(const std::string& name) {
  for (Method m : {Method::PaGnn, Method::NoPenalty, Method::SecondTime, Method::PretrainFinetune, Method::Joint,
                   Method::Vanilla, Method::Preprocess})
    if (name == method_name(m)) return m;
  throw ConfigError("unknown method '" + name + "'");
}

const char* attack_kind_name(AttackKind kind) {
  switch (kind) {
    case AttackKind::Greedy: return "greedy";
    case AttackKind::Random: return "random";
    case AttackKind::Targeted: return "targeted";
  }
  return "unknown";
}

namespace {

AttackKind parse_attack_kind(const std::string& name) {
  for (AttackKind k : {AttackKind::Greedy, AttackKind::Random, AttackKind::Targeted})
    if (name == attack_kind_name(k)) return k;
  throw ConfigError("attack.kind: unknown attack '" + name + "'");
}

bool uses_tasks(Method m) {
  return m == Method::PaGnn || m == Method::NoPenalty || m == Method::PretrainFinetune || m == Method::Joint;
}

bool uses_penalty(Method m) {
  return m == Method::PaGnn || m == Method::SecondTime || m == Method::PretrainFinetune || m == Method::Joint;
}

// ---------------------------------------------------------------------------
// Config parsing

class Reader {
 public:
  Reader(const ordered_json& j, std::string path) : j_(j), path_(std::move(path)) {
    if (!j_.is_object()) throw ConfigError(where() + "expected an object");
  }

  template <typename T>
  void get(const char* key, T& out) {
    seen_.insert(key);
    if (!j_.contains(key)) return;
    try {
      out = j_.at(key).get<T>();
    } catch (const nlohmann::json::exception&) {
      throw ConfigError(field(key) + ": wrong type");
    }
  }

  bool has(const char* key) const { return j_.contains(key); }

  Reader child(const char* key) {
    seen_.insert(key);
    return Reader(j_.at(key), field(key));
  }

  // A number or a list of numbers.
  void grid(const char* key, std::vector<double>& out) {
    seen_.insert(key);
    if (!j_.contains(key)) return;
    const auto& v = j_.at(key);
    try {
      out = v.is_array() ? v.get<std::vector<double>>() : std::vector<double>{v.get<double>()};
    } catch (const nlohmann::json::exception&) {
      throw ConfigError(field(key) + ": expected a number or a list of numbers");
    }
  }

  void finish() const {
    for (const auto& [key, value] : j_.items())
      if (!seen_.count(key)) throw ConfigError(field(key.c_str()) + ": unknown field");
  }

  std::string field(const char* key) const { return path_.empty() ? key : path_ + "." + key; }

 private:
  std::string where() const { return path_.empty() ? "" : path_ + ": "; }

  const ordered_json& j_;
  std::string path_;
  std::set<std::string> seen_;
};

}  // namespace

ExperimentConfig parse_config(const std::string& text) {
  ordered_json doc;
  try {
    doc = ordered_json::parse(text);
  } catch (const nlohmann::json::parse_error& e) {
    throw ConfigError(std::string("config parse error: ") + e.what());
  }
  ExperimentConfig c;
  Reader r(doc, "");
  if (r.has("sbm")) {
    Reader s = r.child("sbm");
    s.get("n_nodes", c.sbm.n_nodes);
    s.get("n_classes", c.sbm.n_classes);
    s.get("p_in", c.sbm.p_in);
    s.get("p_out", c.sbm.p_out);
    s.get("feature_dim", c.sbm.feature_dim);
    s.get("feature_noise", c.sbm.feature_noise);
    s.finish();
  }
  r.get("n_subgraphs", c.n_subgraphs);
  std::vector<std::string> clean;
  r.get("clean_graphs", clean);
  c.clean_graphs.assign(clean.begin(), clean.end());
  if (r.has("target_graph")) {
    std::string t;
    r.get("target_graph", t);
    c.target_graph = t;
  }
  if (r.has("attack")) {
    Reader a = r.child("attack");
    std::string kind = attack_kind_name(c.attack.kind);
    a.get("kind", kind);
    c.attack.kind = parse_attack_kind(kind);
    a.get("clean_budget", c.attack.clean_budget);
    a.grid("budgets", c.attack.budgets);
    a.get("surrogate_steps", c.attack.greedy.surrogate_steps);
    a.get("surrogate_learning_rate", c.attack.greedy.surrogate_learning_rate);
    a.get("edges_per_step", c.attack.greedy.edges_per_step);
    a.get("prefer_cross_class", c.attack.greedy.prefer_cross_class);
    a.get("per_target_budget", c.attack.per_target_budget);
    a.finish();
  }
  if (r.has("splits")) {
    Reader s = r.child("splits");
    s.get("train", c.splits.train);
    s.get("validation", c.splits.validation);
    s.get("pool", c.splits.pool);
    s.finish();
  }
  if (r.has("model")) {
    Reader m = r.child("model");
    m.get("n_layers", c.model.n_layers);
    m.get("hidden_total", c.model.hidden_total);
    m.get("n_heads", c.model.n_heads);
    m.get("output_heads", c.model.output_heads);
    std::string act = c.model.activation == Activation::Elu ? "elu" : "relu";
    m.get("activation", act);
    if (act != "elu" && act != "relu") throw ConfigError("model.activation: expected elu or relu");
    c.model.activation = act == "elu" ? Activation::Elu : Activation::Relu;
    m.get("leaky_slope", c.model.leaky_slope);
    m.finish();
  }
  if (r.has("loss")) {
    Reader l = r.child("loss");
    c.lambda_overridden = l.has("lambda");
    l.grid("lambda", c.lambdas);
    l.grid("eta", c.etas);
    l.finish();
  }
  if (r.has("meta")) {
    Reader m = r.child("meta");
    m.get("inner_lr", c.meta.inner_lr);
    m.get("outer_lr", c.meta.outer_lr);
    m.get("inner_steps", c.meta.inner_steps);
    m.get("max_outer_iters", c.meta.max_outer_iters);
    m.get("patience", c.meta.patience);
    m.get("second_order", c.meta.second_order);
    m.finish();
  }
  if (r.has("fine_tune")) {
    Reader f = r.child("fine_tune");
    f.get("max_steps", c.fine_tune.max_steps);
    f.get("lr", c.fine_tune.lr);
    f.get("patience", c.fine_tune.patience);
    f.finish();
  }
  if (r.has("methods")) {
    std::vector<std::string> names;
    r.get("methods", names);
    c.methods.clear();
    for (const auto& n : names) c.methods.push_back(parse_method(n));
  }
  r.get("seeds", c.seeds);
  r.get("preprocess_threshold", c.preprocess_threshold);
  r.get("histogram_bins", c.histogram_bins);
  std::string out = c.output.string();
  r.get("output", out);
  c.output = out;
  r.finish();
  validate(c);
  return c;
}

ExperimentConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config " + path.string());
  std::ostringstream buffer;
  buffer << in.rdbuf();
  return parse_config(buffer.str());
}

void validate(const ExperimentConfig& c) {
  auto require = [](bool ok, const std::string& msg) {
    if (!ok) throw ConfigError(msg);
  };
  auto wrap = [](const char* field, auto&& f) {
    try {
      f();
    } catch (const std::invalid_argument& e) {
      throw ConfigError(std::string(field) + ": " + e.what());
    }
  };
  wrap("model", [&] { validate(c.model); });
  wrap("meta", [&] { validate(c.meta); });
  require(!c.lambdas.empty(), "loss.lambda: grid is empty");
  require(!c.etas.empty(), "loss.eta: grid is empty");
  for (double l : c.lambdas)
    for (double e : c.etas) wrap("loss", [&] { validate(LossConfig{l, e}); });
  require(!c.attack.budgets.empty(), "attack.budgets: grid is empty");
  for (double b : c.attack.budgets) require(b >= 0.0 && b <= 1.0, "attack.budgets: rates must lie in [0, 1]");
  require(c.attack.clean_budget > 0.0 && c.attack.clean_budget <= 1.0, "attack.clean_budget: must lie in (0, 1]");
  require(!c.methods.empty(), "methods: list is empty");
  require(!c.seeds.empty(), "seeds: list is empty");
  require(c.splits.train > 0 && c.splits.validation > 0 && c.splits.train + c.splits.validation < 1.0,
          "splits: train and validation must be positive and leave room for test");
  require(c.splits.pool > 0 && c.splits.pool <= 1.0, "splits.pool: must lie in (0, 1]");
  require(c.histogram_bins >= 1, "histogram_bins: must be positive");
  require(c.fine_tune.lr > 0.0, "fine_tune.lr: must be positive");
  require(c.target_graph.has_value() || c.n_subgraphs >= 2, "n_subgraphs: need at least one clean graph and a target");
  const bool has_np = std::find(c.methods.begin(), c.methods.end(), Method::NoPenalty) != c.methods.end();
  const bool any_penalty = std::any_of(c.methods.begin(), c.methods.end(), uses_penalty);
  require(!(has_np && c.lambda_overridden && !any_penalty), "method np fixes lambda = 0; remove the lambda override");
  for (const auto& p : c.clean_graphs) require(std::filesystem::exists(p), "clean_graphs: missing file " + p.string());
  if (c.target_graph) require(std::filesystem::exists(*c.target_graph), "target_graph: missing file " + c.target_graph->string());
}

// ---------------------------------------------------------------------------
// Data and attacks

SyntheticData generate_data(const ExperimentConfig& config, std::uint64_t seed) {
  const Graph parent = sbm_generate(config.sbm, derive_seed(seed, "parent-sbm"));
  std::vector<Graph> parts = split_into_subgraphs(parent, config.n_subgraphs, derive_seed(seed, "subgraphs"));
  SyntheticData out;
  out.target = std::move(parts.back());
  parts.pop_back();
  out.clean = std::move(parts);
  return out;
}

AttackResult run_attack(const AttackSpec& spec, const Graph& graph, double rate, std::uint64_t seed) {
  switch (spec.kind) {
    case AttackKind::Greedy: return greedy_gradient_attack(graph, AttackBudget::rate(rate), spec.greedy, seed);
    case AttackKind::Random: return random_attack(graph, AttackBudget::rate(rate), seed);
    case AttackKind::Targeted: {
      if (spec.per_target_budget == 0) throw ConfigError("attack.per_target_budget: must be positive");
      const std::size_t total = AttackBudget::rate(rate).resolve(graph);
      const std::size_t n_targets = (total + spec.per_target_budget / 2) / spec.per_target_budget;
      const NodeIds targets = pick_targets(graph, n_targets, seed);
      return targeted_attack(graph, targets, spec.per_target_budget, seed);
    }
  }
  throw ConfigError("unknown attack kind");
}

namespace {

double cosine(const Tensor& x, std::uint32_t a, std::uint32_t b) {
  double dot = 0.0, na = 0.0, nb = 0.0;
  for (std::size_t k = 0; k < x.cols(); ++k) {
    dot += x(a, k) * x(b, k);
    na += x(a, k) * x(a, k);
    nb += x(b, k) * x(b, k);
  }
  return na == 0.0 || nb == 0.0 ? 0.0 : dot / std::sqrt(na * nb);
}

PerturbationSet restrict_to(const PerturbationSet& p, const Graph& g) {
  std::vector<Edge> kept;
  for (const Edge& e : p.edges)
    if (g.has_edge(e.u, e.v)) kept.push_back(e);
  return PerturbationSet(std::move(kept));
}

}  // namespace

Graph preprocess_graph(const Graph& graph, double threshold) {
  std::vector<Edge> kept;
  for (const Edge& e : graph.edges())
    if (cosine(graph.features(), e.u, e.v) >= threshold) kept.push_back(e);
  return graph.with_edges(std::move(kept));
}

// ---------------------------------------------------------------------------
// Training

NodeSplit target_split(const ExperimentConfig& config, const Graph& target, std::uint64_t seed) {
  return make_label_splits(target, config.splits.train, config.splits.validation, derive_seed(seed, "target-split"));
}

TrainOutcome train_method(Method method, const ExperimentConfig& config, const TrainInputs& inputs,
                          const LossConfig& loss, std::uint64_t seed) {
  validate(loss);
  if (method == Method::NoPenalty && loss.lambda != 0.0) {
    throw ConfigError("method np fixes lambda = 0");
  }
  TrainOutcome out;
  out.split = target_split(config, inputs.target, seed);
  const Graph& target = inputs.target;
  const ModelParams init =
      init_params(config.model, target.feature_dim(), target.n_classes(), derive_seed(seed, "init-params"));

  AblationInputs ab;
  ab.init = init;
  ab.target = make_target(target, out.split);
  ab.model = config.model;
  ab.loss = loss;
  ab.meta = config.meta;
  ab.fine_tune = config.fine_tune;
  ab.second_attack_rate = config.attack.clean_budget;
  ab.attack = config.attack.greedy;
  if (uses_tasks(method)) {
    if (inputs.clean.empty()) throw ConfigError(std::string("method ") + method_name(method) + " needs clean graphs");
    for (std::size_t i = 0; i < inputs.clean.size(); ++i) {
      const GraphFile& f = inputs.clean[i];
      if (!f.perturbed || f.perturbed->empty()) {
        throw ConfigError("clean graph " + std::to_string(i) + " has no perturbed_edges; method " +
                          method_name(method) + " needs them");
      }
      ab.tasks.push_back(make_task("clean" + std::to_string(i), f.graph, *f.perturbed,
                                   sample_labeled_pool(f.graph, config.splits.pool, derive_seed(seed, "pool-" + std::to_string(i)))));
    }
  }
  const std::uint64_t train_seed = derive_seed(seed, "train");

  switch (method) {
    case Method::PaGnn: {
      TrainResult meta = train_meta(init, ab.tasks, ab.target, config.model, loss, config.meta, train_seed);
      TrainResult tuned = fine_tune(meta.params, ab.target, config.model, config.fine_tune);
      out.params = tuned.params;
      out.log = std::move(meta.log);
      out.log.extend(tuned.log);
      break;
    }
    case Method::NoPenalty:
    case Method::SecondTime:
    case Method::PretrainFinetune:
    case Method::Joint: {
      const Ablation regime = method == Method::NoPenalty        ? Ablation::NoPenalty
                              : method == Method::SecondTime     ? Ablation::SecondTime
                              : method == Method::PretrainFinetune ? Ablation::PretrainFinetune
                                                                 : Ablation::Joint;
      TrainResult r = train_ablation(regime, std::move(ab), train_seed);
      out.params = std::move(r.params);
      out.log = std::move(r.log);
      break;
    }
    case Method::Vanilla: {
      TrainResult r = fine_tune(init, ab.target, config.model, config.fine_tune);
      out.params = std::move(r.params);
      out.log = std::move(r.log);
      break;
    }
    case Method::Preprocess: {
      const TargetData cleaned = make_target(preprocess_graph(target, config.preprocess_threshold), out.split);
      TrainResult r = fine_tune(init, cleaned, config.model, config.fine_tune);
      out.params = std::move(r.params);
      out.log = std::move(r.log);
      break;
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Evaluation

EvalMetrics evaluate_model(const ModelParams& params, const ModelConfig& model, const Graph& graph,
                           const NodeSplit& split, const PerturbationSet& perturbed, double eta) {
  const ModelOutput out = model_forward(params, model, graph);
  EvalMetrics m;
  m.test_accuracy = accuracy(out.logits, graph, split.test);
  const std::vector<int> pred = predict(out.logits);
  std::vector<std::size_t> hit(graph.n_classes(), 0), seen(graph.n_classes(), 0);
  for (std::uint32_t v : split.test) {
    ++seen[graph.label(v)];
    hit[graph.label(v)] += pred[v] == graph.label(v);
  }
  for (int c = 0; c < graph.n_classes(); ++c) {
    m.per_class_accuracy.push_back(seen[c] ? static_cast<double>(hit[c]) / static_cast<double>(seen[c]) : 0.0);
  }
  const PerturbationSet present = restrict_to(perturbed, graph);
  if (present.empty()) return m;
  const MessageGraph messages = MessageGraph::build(graph);
  const EdgeMasks masks = edge_masks(messages, present);
  m.perturb_attention_sum = perturb_attention_sum(out.records, masks);
  double normal = 0.0, ptb = 0.0;
  for (const auto& rec : out.records)
    for (std::size_t k = 0; k < messages.size(); ++k) {
      normal += rec.scores(k, 0) * masks.normal(k, 0);
      ptb += rec.scores(k, 0) * masks.perturbed(k, 0);
    }
  const double cols = static_cast<double>(out.records.size());
  m.mean_perturbed = ptb / (cols * static_cast<double>(masks.n_perturbed));
  if (masks.n_normal > 0) {
    m.mean_normal = normal / (cols * static_cast<double>(masks.n_normal));
    m.dist_loss = -std::min(eta, m.mean_normal - m.mean_perturbed);
  }
  return m;
}

AttentionHistogram attention_histogram(const ModelParams& params, const ModelConfig& model, const Graph& graph,
                                       const PerturbationSet& perturbed, std::size_t bins) {
  if (bins == 0) throw std::invalid_argument("attention histogram: bins must be positive");
  const ModelOutput out = model_forward(params, model, graph);
  const MessageGraph messages = MessageGraph::build(graph);
  const EdgeMasks masks = edge_masks(messages, restrict_to(perturbed, graph));
  std::vector<double> value;
  std::vector<bool> is_ptb;
  for (std::size_t k = 0; k < messages.size(); ++k) {
    if (messages.undirected[k] < 0) continue;
    double s = 0.0;
    for (const auto& rec : out.records) s += rec.scores(k, 0);
    value.push_back(s / static_cast<double>(out.records.size()));
    is_ptb.push_back(masks.perturbed(k, 0) > 0.0);
  }
  AttentionHistogram h;
  h.normal.assign(bins, 0);
  h.perturbed.assign(bins, 0);
  double lo = 0.0, hi = 0.0;
  if (!value.empty()) {
    lo = *std::min_element(value.begin(), value.end());
    hi = *std::max_element(value.begin(), value.end());
  }
  if (hi - lo <= 0.0) {
    lo -= 0.5;
    hi += 0.5;
  }
  for (std::size_t b = 0; b <= bins; ++b) h.boundaries.push_back(lo + (hi - lo) * static_cast<double>(b) / static_cast<double>(bins));
  double sum_n = 0.0, sum_p = 0.0;
  for (std::size_t k = 0; k < value.size(); ++k) {
    const auto b = std::min<std::size_t>(bins - 1, static_cast<std::size_t>((value[k] - lo) / (hi - lo) * static_cast<double>(bins)));
    if (is_ptb[k]) {
      ++h.perturbed[b];
      sum_p += value[k];
    } else {
      ++h.normal[b];
      sum_n += value[k];
    }
  }
  if (masks.n_normal) h.mean_normal = sum_n / static_cast<double>(masks.n_normal);
  if (masks.n_perturbed) h.mean_perturbed = sum_p / static_cast<double>(masks.n_perturbed);
  return h;
}

namespace {

std::string fmt(double x) {
  std::ostringstream s;
  s << std::setprecision(12) << x;
  return s.str();
}

void write_file(const std::filesystem::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << text;
}

}  // namespace

void write_histogram(const AttentionHistogram& hist, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  std::ostringstream csv;
  csv << "bin_left,bin_right,count_normal,count_perturbed\n";
  for (std::size_t b = 0; b < hist.normal.size(); ++b) {
    csv << fmt(hist.boundaries[b]) << ',' << fmt(hist.boundaries[b + 1]) << ',' << hist.normal[b] << ','
        << hist.perturbed[b] << '\n';
  }
  write_file(dir / "attention_histogram.csv", csv.str());
  write_file(dir / "attention_means.csv",
             "edge_type,mean\nnormal," + fmt(hist.mean_normal) + "\nperturbed," + fmt(hist.mean_perturbed) + "\n");
}

// ---------------------------------------------------------------------------
// Cells and sweeps

CellResult run_cell(const ExperimentConfig& config, const Cell& cell) {
  TrainInputs inputs;
  Graph clean_target;
  if (config.target_graph) {
    for (const auto& p : config.clean_graphs) inputs.clean.push_back(load_graph_file(p));
    clean_target = load_graph(*config.target_graph);
  } else {
    SyntheticData data = generate_data(config, cell.seed);
    for (std::size_t i = 0; i < data.clean.size(); ++i) {
      if (!uses_tasks(cell.method)) break;
      AttackResult r = run_attack(config.attack, data.clean[i], config.attack.clean_budget,
                                  derive_seed(cell.seed, "clean-attack-" + std::to_string(i)));
      inputs.clean.push_back({std::move(r.poisoned), std::move(r.perturbations)});
    }
    clean_target = std::move(data.target);
  }
  AttackResult attacked = run_attack(config.attack, clean_target, cell.budget, derive_seed(cell.seed, "target-attack"));
  inputs.target = attacked.poisoned;

  const LossConfig loss{cell.method == Method::NoPenalty ? 0.0 : cell.lambda, cell.eta};
  const TrainOutcome outcome = train_method(cell.method, config, inputs, loss, cell.seed);
  const Graph eval_graph =
      cell.method == Method::Preprocess ? preprocess_graph(inputs.target, config.preprocess_threshold) : inputs.target;
  CellResult result;
  result.cell = cell;
  result.metrics = evaluate_model(outcome.params, config.model, eval_graph, outcome.split, attacked.perturbations, cell.eta);
  result.best_val_accuracy = accuracy(model_forward(outcome.params, config.model, eval_graph).logits, eval_graph,
                                      outcome.split.validation);
  return result;
}

std::vector<Cell> sweep_cells(const ExperimentConfig& config) {
  std::vector<Cell> cells;
  for (double budget : config.attack.budgets)
    for (Method m : config.methods) {
      const std::vector<double> lambdas = uses_penalty(m) ? config.lambdas : std::vector<double>{0.0};
      const std::vector<double> etas = uses_penalty(m) ? config.etas : std::vector<double>{config.etas.front()};
      for (double l : lambdas)
        for (double e : etas)
          for (std::uint64_t seed : config.seeds) cells.push_back({seed, budget, m, l, e});
    }
  return cells;
}

MetricsReport aggregate(std::vector<CellResult> cells) {
  MetricsReport report;
  report.cells = std::move(cells);
  std::vector<std::vector<double>> groups;
  for (const CellResult& r : report.cells) {
    const Cell& c = r.cell;
    auto it = std::find_if(report.summary.begin(), report.summary.end(), [&](const SummaryRow& s) {
      return s.budget == c.budget && s.method == c.method && s.lambda == c.lambda && s.eta == c.eta;
    });
    if (it == report.summary.end()) {
      report.summary.push_back({c.budget, c.method, c.lambda, c.eta, 0, 0.0, 0.0});
      groups.emplace_back();
      it = report.summary.end() - 1;
    }
    groups[it - report.summary.begin()].push_back(r.metrics.test_accuracy);
  }
  for (std::size_t g = 0; g < groups.size(); ++g) {
    const auto& xs = groups[g];
    SummaryRow& row = report.summary[g];
    row.runs = xs.size();
    double mean = 0.0;
    for (double x : xs) mean += x;
    mean /= static_cast<double>(xs.size());
    double ss = 0.0;
    for (double x : xs) ss += (x - mean) * (x - mean);
    row.mean_accuracy = mean;
    row.std_accuracy = xs.size() > 1 ? std::sqrt(ss / static_cast<double>(xs.size() - 1)) : 0.0;
  }
  return report;
}

std::string MetricsReport::cells_csv() const {
  std::ostringstream out;
  out << "seed,budget,method,lambda,eta,test_accuracy,val_accuracy,dist_loss,perturb_attention_sum,"
         "mean_normal,mean_perturbed\n";
  for (const CellResult& r : cells) {
    const auto& m = r.metrics;
    out << r.cell.seed << ',' << fmt(r.cell.budget) << ',' << method_name(r.cell.method) << ',' << fmt(r.cell.lambda)
        << ',' << fmt(r.cell.eta) << ',' << fmt(m.test_accuracy) << ',' << fmt(r.best_val_accuracy) << ','
        << fmt(m.dist_loss) << ',' << fmt(m.perturb_attention_sum) << ',' << fmt(m.mean_normal) << ','
        << fmt(m.mean_perturbed) << '\n';
  }
  return out.str();
}

std::string MetricsReport::summary_csv() const {
  std::ostringstream out;
  out << "budget,method,lambda,eta,runs,mean_accuracy,std_accuracy\n";
  for (const SummaryRow& s : summary) {
    out << fmt(s.budget) << ',' << method_name(s.method) << ',' << fmt(s.lambda) << ',' << fmt(s.eta) << ','
        << s.runs << ',' << fmt(s.mean_accuracy) << ',' << fmt(s.std_accuracy) << '\n';
  }
  return out.str();
}

std::string MetricsReport::summary_json() const {
  ordered_json doc;
  doc["cells"] = ordered_json::array();
  for (const CellResult& r : cells) {
    const auto& m = r.metrics;
    doc["cells"].push_back({{"seed", r.cell.seed},
                            {"budget", r.cell.budget},
                            {"method", method_name(r.cell.method)},
                            {"lambda", r.cell.lambda},
                            {"eta", r.cell.eta},
                            {"test_accuracy", m.test_accuracy},
                            {"per_class_accuracy", m.per_class_accuracy},
                            {"val_accuracy", r.best_val_accuracy},
                            {"dist_loss", m.dist_loss},
                            {"perturb_attention_sum", m.perturb_attention_sum},
                            {"mean_normal", m.mean_normal},
                            {"mean_perturbed", m.mean_perturbed}});
  }
  doc["summary"] = ordered_json::array();
  for (const SummaryRow& s : summary) {
    doc["summary"].push_back({{"budget", s.budget},
                              {"method", method_name(s.method)},
                              {"lambda", s.lambda},
                              {"eta", s.eta},
                              {"runs", s.runs},
                              {"mean_accuracy", s.mean_accuracy},
                              {"std_accuracy", s.std_accuracy}});
  }
  return doc.dump(2) + "\n";
}

void MetricsReport::write(const std::filesystem::path& dir) const {
  std::filesystem::create_directories(dir);
  write_file(dir / "metrics.csv", cells_csv());
  write_file(dir / "summary.csv", summary_csv());
  write_file(dir / "summary.json", summary_json());
}

MetricsReport run_sweep(const ExperimentConfig& config, std::size_t workers) {
  validate(config);
  const std::vector<Cell> cells = sweep_cells(config);
  std::vector<CellResult> results(cells.size());
  std::atomic<std::size_t> next{0};
  std::exception_ptr failure;
  std::mutex failure_mutex;
  auto work = [&] {
    for (std::size_t i = next++; i < cells.size(); i = next++) {
      try {
        results[i] = run_cell(config, cells[i]);
      } catch (...) {
        std::lock_guard lock(failure_mutex);
        if (!failure) failure = std::current_exception();
        next = cells.size();
      }
    }
  };
  const std::size_t n = std::max<std::size_t>(1, std::min(workers, cells.size()));
  if (n == 1) {
    work();
  } else {
    std::vector<std::thread> pool;
    for (std::size_t t = 0; t < n; ++t) pool.emplace_back(work);
    for (auto& t : pool) t.join();
  }
  if (failure) std::rethrow_exception(failure);
  return aggregate(std::move(results));
}

}  // namespace pagnn
