#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "pagnn/attacks.hpp"
#include "pagnn/graph.hpp"
#include "pagnn/losses.hpp"
#include "pagnn/model.hpp"

namespace pagnn {

class DivergenceError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct MetaConfig {
  double inner_lr = 0.01;
  double outer_lr = 0.001;
  std::size_t inner_steps = 5;
  std::size_t max_outer_iters = 200;
  std::size_t patience = 20;
  bool second_order = true;
};

void validate(const MetaConfig& config);

struct Evaluation {
  Var loss;
  LossBreakdown breakdown;
};

// Scalar objective of a parameter list living on one tape.
using Objective = std::function<Evaluation(std::span<const Var> params)>;

struct AdaptResult {
  std::vector<Var> params;
  std::vector<double> losses;  // objective before each step
};

// `steps` gradient-descent steps on `objective`. In second-order mode the
// steps stay differentiable w.r.t. `theta`; otherwise each gradient is
// treated as a constant.
AdaptResult inner_adapt(std::span<const Var> theta, const Objective& objective, std::size_t steps,
                        double lr, bool second_order, const std::string& task_name);

struct TaskObjectives {
  std::string name;
  Objective support;
  Objective query;
};

struct TaskStepStats {
  double support_loss = 0.0;
  double query_loss = 0.0;
  double query_distance = 0.0;
};

struct MetaStepResult {
  std::vector<Tensor> theta;
  std::vector<Tensor> meta_gradient;
  std::vector<TaskStepStats> tasks;
};

// One outer update: theta - outer_lr * d/dtheta sum_i query_i(adapt_i(theta)).
MetaStepResult meta_step(std::span<const Tensor> theta, std::span<const TaskObjectives> tasks,
                         const MetaConfig& config);

// Graph with its message structure and perturbation masks.
struct PreparedGraph {
  std::shared_ptr<const Graph> graph;
  MessageGraph messages;
  EdgeMasks masks;

  static PreparedGraph make(Graph graph, const PerturbationSet& perturbed = {});
};

// Total loss of the attention model on `nodes` of a prepared graph.
Objective gnn_objective(const ModelConfig& model, std::shared_ptr<const PreparedGraph> graph, NodeIds nodes,
                        const LossConfig& loss);

struct Task {
  std::string name;
  std::shared_ptr<const PreparedGraph> graph;  // attacked clean graph
  PerturbationSet perturbations;
  NodeIds labeled_pool;
  SupportQuerySplit split;
};

Task make_task(std::string name, const Graph& attacked, const PerturbationSet& perturbations, NodeIds pool);

struct TrainLogRow {
  std::size_t iteration = 0;
  std::string phase;
  std::string task;
  double support_loss = 0.0;
  double query_loss = 0.0;
  double dist_loss = 0.0;
  double val_accuracy = 0.0;
  double seconds = 0.0;
};

struct TrainLog {
  std::vector<TrainLogRow> rows;

  void append(TrainLogRow row);
  // Appends `other` with its iteration indices shifted past the last row.
  void extend(const TrainLog& other);
  // Header: iteration,phase,task,support_loss,query_loss,dist_loss,val_accuracy,seconds
  std::string to_csv(bool include_time = true) const;
  void write_csv(const std::filesystem::path& path) const;
};

// Poisoned graph and the nodes used for fitting and early stopping.
struct TargetData {
  std::shared_ptr<const PreparedGraph> graph;
  NodeSplit split;
};

TargetData make_target(const Graph& poisoned, NodeSplit split);

struct TrainResult {
  ModelParams params;
  TrainLog log;
  std::size_t best_iteration = 0;
  double best_val_accuracy = 0.0;
};

double validation_accuracy(const ModelParams& params, const ModelConfig& model, const TargetData& target);

TrainResult train_meta(const ModelParams& init, std::vector<Task>& tasks, const TargetData& target,
                       const ModelConfig& model, const LossConfig& loss, const MetaConfig& config,
                       std::uint64_t seed);

struct FineTuneConfig {
  std::size_t max_steps = 200;
  double lr = 0.05;
  std::size_t patience = 20;
};

// Gradient descent on classification loss over the target's training nodes.
TrainResult fine_tune(const ModelParams& init, const TargetData& target, const ModelConfig& model,
                      const FineTuneConfig& config);

// Plain gradient descent on the summed objectives, early-stopped on the
// target's validation accuracy.
TrainResult train_joint(const ModelParams& init, std::span<const Objective> objectives,
                        const TargetData& target, const ModelConfig& model, const FineTuneConfig& config,
                        const std::string& phase);

enum class Ablation { NoPenalty, SecondTime, PretrainFinetune, Joint };

const char* ablation_name(Ablation regime);
Ablation parse_ablation(const std::string& name);

struct AblationInputs {
  ModelParams init;
  std::vector<Task> tasks;
  TargetData target;
  ModelConfig model;
  LossConfig loss;
  MetaConfig meta;
  FineTuneConfig fine_tune;
  // Budget and options of the second attack fabricating perturbations on the target.
  double second_attack_rate = 0.1;
  GreedyOptions attack;
};

// no-penalty: meta training with lambda = 0, then fine-tuning.
// second-time: re-attack the target and train on it with the full loss.
// pretrain-finetune: joint training on the clean tasks, then fine-tuning.
// joint: joint training on the clean tasks plus the target's classification loss.
TrainResult train_ablation(Ablation regime, AblationInputs inputs, std::uint64_t seed);

}  // namespace pagnn
