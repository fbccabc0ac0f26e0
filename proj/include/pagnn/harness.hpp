#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "pagnn/attacks.hpp"
#include "pagnn/graph.hpp"
#include "pagnn/losses.hpp"
#include "pagnn/meta.hpp"
#include "pagnn/model.hpp"

namespace pagnn {

// Invalid configuration or command-line usage.
class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

enum class Method { PaGnn, NoPenalty, SecondTime, PretrainFinetune, Joint, Vanilla, Preprocess };

const char* method_name(Method method);
Method parse_method(const std::string& name);

enum class AttackKind { Greedy, Random, Targeted };

const char* attack_kind_name(AttackKind kind);

struct AttackSpec {
  AttackKind kind = AttackKind::Greedy;
  double clean_budget = 0.1;                                          // rate on each clean graph
  std::vector<double> budgets{0.0, 0.05, 0.10, 0.15, 0.20, 0.25, 0.30};  // rates on the target
  GreedyOptions greedy;
  std::size_t per_target_budget = 5;
  // Targeted attacks: number of targets is round(rate * |E| / per_target_budget).
};

struct SplitSpec {
  double train = 0.1;
  double validation = 0.2;
  double pool = 0.4;  // labeled fraction of each clean graph used for support and query
};

struct ExperimentConfig {
  SbmParams sbm;
  std::size_t n_subgraphs = 5;
  std::vector<std::filesystem::path> clean_graphs;  // attacked clean graphs with perturbed_edges
  std::optional<std::filesystem::path> target_graph;
  AttackSpec attack;
  SplitSpec splits;
  ModelConfig model;
  std::vector<double> lambdas{1.0};
  std::vector<double> etas{100.0};
  bool lambda_overridden = false;
  MetaConfig meta;
  FineTuneConfig fine_tune;
  std::vector<Method> methods{Method::PaGnn};
  std::vector<std::uint64_t> seeds{0, 1, 2, 3, 4, 5, 6, 7, 8, 9};
  double preprocess_threshold = 0.0;
  std::size_t histogram_bins = 20;
  std::filesystem::path output = "pagnn-out";
};

// Throws ConfigError naming the offending field.
ExperimentConfig parse_config(const std::string& text);
ExperimentConfig load_config(const std::filesystem::path& path);
void validate(const ExperimentConfig& config);

// Parent SBM split into subgraphs: all but the last are clean, the last is the target.
struct SyntheticData {
  std::vector<Graph> clean;
  Graph target;
};

SyntheticData generate_data(const ExperimentConfig& config, std::uint64_t seed);

AttackResult run_attack(const AttackSpec& spec, const Graph& graph, double rate, std::uint64_t seed);

// Drops edges whose endpoint features have cosine similarity below `threshold`.
Graph preprocess_graph(const Graph& graph, double threshold);

struct TrainInputs {
  std::vector<GraphFile> clean;  // each with its perturbations
  Graph target;                  // poisoned graph
};

struct TrainOutcome {
  ModelParams params;
  TrainLog log;
  NodeSplit split;
};

NodeSplit target_split(const ExperimentConfig& config, const Graph& target, std::uint64_t seed);

TrainOutcome train_method(Method method, const ExperimentConfig& config, const TrainInputs& inputs,
                          const LossConfig& loss, std::uint64_t seed);

struct EvalMetrics {
  double test_accuracy = 0.0;
  std::vector<double> per_class_accuracy;
  double perturb_attention_sum = 0.0;
  double dist_loss = 0.0;
  double mean_normal = 0.0;
  double mean_perturbed = 0.0;
};

// Test accuracy and, when `perturbed` is non-empty, attention statistics.
EvalMetrics evaluate_model(const ModelParams& params, const ModelConfig& model, const Graph& graph,
                           const NodeSplit& split, const PerturbationSet& perturbed, double eta);

struct AttentionHistogram {
  std::vector<double> boundaries;  // bins + 1 entries
  std::vector<std::size_t> normal;
  std::vector<std::size_t> perturbed;
  double mean_normal = 0.0;
  double mean_perturbed = 0.0;
};

// One value per directed message edge: its unnormalized coefficient averaged
// over every layer and head. Self loops are excluded.
AttentionHistogram attention_histogram(const ModelParams& params, const ModelConfig& model, const Graph& graph,
                                       const PerturbationSet& perturbed, std::size_t bins);
void write_histogram(const AttentionHistogram& hist, const std::filesystem::path& dir);

struct Cell {
  std::uint64_t seed = 0;
  double budget = 0.0;
  Method method = Method::PaGnn;
  double lambda = 1.0;
  double eta = 100.0;
};

struct CellResult {
  Cell cell;
  EvalMetrics metrics;
  double best_val_accuracy = 0.0;
};

CellResult run_cell(const ExperimentConfig& config, const Cell& cell);

struct SummaryRow {
  double budget = 0.0;
  Method method = Method::PaGnn;
  double lambda = 0.0;
  double eta = 0.0;
  std::size_t runs = 0;
  double mean_accuracy = 0.0;
  double std_accuracy = 0.0;  // sample standard deviation, 0 for a single run
};

struct MetricsReport {
  std::vector<CellResult> cells;
  std::vector<SummaryRow> summary;

  std::string cells_csv() const;
  std::string summary_csv() const;
  std::string summary_json() const;
  void write(const std::filesystem::path& dir) const;
};

std::vector<Cell> sweep_cells(const ExperimentConfig& config);
MetricsReport aggregate(std::vector<CellResult> cells);
MetricsReport run_sweep(const ExperimentConfig& config, std::size_t workers);

}  // namespace pagnn
