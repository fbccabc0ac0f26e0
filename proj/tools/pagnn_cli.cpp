#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "pagnn/harness.hpp"
#include "pagnn/random.hpp"

namespace fs = std::filesystem;
using namespace pagnn;

namespace {

struct Globals {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string out;
  std::size_t workers = 1;
  bool quiet = false;
};

class Context {
 public:
  explicit Context(const Globals& g) : globals_(g) {
    config_ = g.config.empty() ? ExperimentConfig{} : load_config(g.config);
    if (!g.out.empty()) config_.output = g.out;
  }

  ExperimentConfig& config() { return config_; }
  std::uint64_t seed() const { return globals_.seed.value_or(config_.seeds.front()); }
  fs::path out(const fs::path& sub) const {
    const fs::path p = config_.output / sub;
    fs::create_directories(p);
    return p;
  }
  void say(const std::string& msg) const {
    if (!globals_.quiet) std::cerr << msg << '\n';
  }

 private:
  Globals globals_;
  ExperimentConfig config_;
};

std::string budget_tag(double rate) {
  return std::to_string(static_cast<int>(std::lround(rate * 100.0)));
}

void cmd_generate(Context& ctx) {
  const SyntheticData data = generate_data(ctx.config(), ctx.seed());
  const fs::path dir = ctx.out("data");
  for (std::size_t i = 0; i < data.clean.size(); ++i) save_graph(data.clean[i], dir / ("clean_" + std::to_string(i) + ".json"));
  save_graph(data.target, dir / "target.json");
  ctx.say("wrote " + std::to_string(data.clean.size()) + " clean graphs and a target to " + dir.string());
}

void cmd_attack(Context& ctx, const std::string& input) {
  const ExperimentConfig& c = ctx.config();
  const fs::path in = input.empty() ? c.output / "data" : fs::path(input);
  if (!fs::exists(in / "target.json")) throw ConfigError("attack: no target.json in " + in.string());
  const fs::path dir = ctx.out("attacked");
  for (std::size_t i = 0;; ++i) {
    const fs::path p = in / ("clean_" + std::to_string(i) + ".json");
    if (!fs::exists(p)) break;
    const AttackResult r = run_attack(c.attack, load_graph(p), c.attack.clean_budget,
                                      derive_seed(ctx.seed(), "clean-attack-" + std::to_string(i)));
    save_graph(r.poisoned, dir / p.filename(), &r.perturbations);
    write_attack_log(r, dir / ("clean_" + std::to_string(i) + ".log.csv"));
  }
  const Graph target = load_graph(in / "target.json");
  for (double b : c.attack.budgets) {
    const AttackResult r = run_attack(c.attack, target, b, derive_seed(ctx.seed(), "target-attack"));
    save_graph(r.poisoned, dir / ("target_" + budget_tag(b) + ".json"), &r.perturbations);
    write_attack_log(r, dir / ("target_" + budget_tag(b) + ".log.csv"));
  }
  ctx.say("wrote attacked graphs to " + dir.string());
}

void cmd_train(Context& ctx, const std::string& method_text, const std::vector<std::string>& clean,
               const std::string& target, std::optional<double> lambda, std::optional<double> eta) {
  ExperimentConfig& c = ctx.config();
  const Method method = parse_method(method_text);
  if (lambda && method == Method::NoPenalty) throw ConfigError("method np fixes lambda = 0; --lambda is not allowed");
  if (lambda) c.lambda_overridden = true;
  TrainInputs inputs;
  std::vector<fs::path> clean_paths(clean.begin(), clean.end());
  if (clean_paths.empty()) clean_paths = c.clean_graphs;
  for (const auto& p : clean_paths) inputs.clean.push_back(load_graph_file(p));
  std::optional<fs::path> target_path = target.empty() ? c.target_graph : std::optional<fs::path>(target);
  if (!target_path) throw ConfigError("train: no target graph (use --target or target_graph)");
  inputs.target = load_graph(*target_path);
  const LossConfig loss{method == Method::NoPenalty ? 0.0 : lambda.value_or(c.lambdas.front()),
                        eta.value_or(c.etas.front())};
  const TrainOutcome outcome = train_method(method, c, inputs, loss, ctx.seed());
  const fs::path dir = ctx.out(fs::path("train") / method_name(method));
  save_checkpoint({c.model, outcome.params}, dir / "checkpoint.json");
  outcome.log.write_csv(dir / "train_log.csv");
  ctx.say("wrote checkpoint and train log to " + dir.string());
}

void cmd_evaluate(Context& ctx, const std::string& checkpoint, const std::string& graph_path) {
  const Checkpoint ck = load_checkpoint(checkpoint);
  const GraphFile file = load_graph_file(graph_path);
  const NodeSplit split = target_split(ctx.config(), file.graph, ctx.seed());
  const double eta = ctx.config().etas.front();
  const EvalMetrics m =
      evaluate_model(ck.params, ck.config, file.graph, split, file.perturbed.value_or(PerturbationSet{}), eta);
  nlohmann::ordered_json doc{{"test_accuracy", m.test_accuracy},
                             {"per_class_accuracy", m.per_class_accuracy}};
  if (file.perturbed) {
    doc["perturb_attention_sum"] = m.perturb_attention_sum;
    doc["dist_loss"] = m.dist_loss;
    doc["mean_normal"] = m.mean_normal;
    doc["mean_perturbed"] = m.mean_perturbed;
  }
  const std::string text = doc.dump(2) + "\n";
  std::ofstream(ctx.out("evaluate") / "metrics.json") << text;
  std::cout << text;
}

void cmd_sweep(Context& ctx, std::size_t workers) {
  const MetricsReport report = run_sweep(ctx.config(), workers);
  const fs::path dir = ctx.out("sweep");
  report.write(dir);
  if (!ctx.config().methods.empty()) std::cout << report.summary_csv();
  ctx.say("wrote metrics to " + dir.string());
}

void cmd_export_attention(Context& ctx, const std::string& checkpoint, const std::string& graph_path) {
  const Checkpoint ck = load_checkpoint(checkpoint);
  const GraphFile file = load_graph_file(graph_path);
  if (!file.perturbed) throw ConfigError("export-attention: graph file has no perturbed_edges");
  const AttentionHistogram h =
      attention_histogram(ck.params, ck.config, file.graph, *file.perturbed, ctx.config().histogram_bins);
  const fs::path dir = ctx.out("attention");
  write_histogram(h, dir);
  ctx.say("wrote attention histograms to " + dir.string());
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Penalized-aggregation graph attention networks: data, attacks, training, evaluation"};
  app.require_subcommand(1);
  Globals g;
  app.add_option("--config", g.config, "Experiment configuration (JSON)")->check(CLI::ExistingFile);
  app.add_option("--seed", g.seed, "Seed (defaults to the first configured seed)");
  app.add_option("--out", g.out, "Output directory");
  app.add_option("--workers", g.workers, "Parallel sweep workers")->check(CLI::PositiveNumber);
  app.add_flag("--quiet", g.quiet, "Suppress progress messages");
  app.fallthrough();

  auto* generate = app.add_subcommand("generate", "Generate clean SBM subgraphs and a target graph");
  std::string attack_input;
  auto* attack = app.add_subcommand("attack", "Attack the clean graphs and the target at every budget");
  attack->add_option("--input", attack_input, "Directory with clean_*.json and target.json");

  auto* train = app.add_subcommand("train", "Train a model");
  std::string method, target;
  std::vector<std::string> clean;
  std::optional<double> lambda, eta;
  train->add_option("--method", method, "pagnn, np, second_time, ft, jt, vanilla or preprocess_baseline")->required();
  train->add_option("--clean", clean, "Attacked clean graphs with perturbed_edges");
  train->add_option("--target", target, "Poisoned target graph");
  train->add_option("--lambda", lambda, "Penalty weight");
  train->add_option("--eta", eta, "Penalty margin");

  std::string checkpoint, graph;
  auto* evaluate = app.add_subcommand("evaluate", "Evaluate a checkpoint on a graph");
  evaluate->add_option("--checkpoint", checkpoint)->required()->check(CLI::ExistingFile);
  evaluate->add_option("--graph", graph)->required()->check(CLI::ExistingFile);

  auto* sweep = app.add_subcommand("sweep", "Run every (budget, method, lambda, eta, seed) cell");

  auto* export_attention = app.add_subcommand("export-attention", "Attention histograms for normal and perturbed edges");
  export_attention->add_option("--checkpoint", checkpoint)->required()->check(CLI::ExistingFile);
  export_attention->add_option("--graph", graph)->required()->check(CLI::ExistingFile);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 1;
  }

  try {
    Context ctx(g);
    if (*generate) cmd_generate(ctx);
    if (*attack) cmd_attack(ctx, attack_input);
    if (*train) cmd_train(ctx, method, clean, target, lambda, eta);
    if (*evaluate) cmd_evaluate(ctx, checkpoint, graph);
    if (*sweep) cmd_sweep(ctx, g.workers);
    if (*export_attention) cmd_export_attention(ctx, checkpoint, graph);
  } catch (const ConfigError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  } catch (const LoadError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 2;
  }
  return 0;
}
