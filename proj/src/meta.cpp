#include "pagnn/meta.hpp"

#include <chrono>
#include <cmath>
#include <fstream>
#include <sstream>

#include "pagnn/random.hpp"

namespace pagnn {

void validate(const MetaConfig& c) {
  if (!(c.inner_lr >= 0.0) || !std::isfinite(c.inner_lr)) throw std::invalid_argument("meta: inner_lr must be non-negative");
  if (!(c.outer_lr > 0.0) || !std::isfinite(c.outer_lr)) throw std::invalid_argument("meta: outer_lr must be positive");
  if (c.inner_steps < 1) throw std::invalid_argument("meta: inner_steps must be at least 1");
}

namespace {

template <typename F>
auto guarded(const std::string& task, F&& f) {
  try {
    return f();
  } catch (const NonFiniteError& e) {
    throw DivergenceError("task '" + task + "' diverged: " + e.what());
  }
}

std::vector<Tensor> descend(std::span<const Tensor> theta, std::span<const Tensor> grads, double lr) {
  std::vector<Tensor> out;
  out.reserve(theta.size());
  for (std::size_t k = 0; k < theta.size(); ++k) {
    std::vector<double> v(theta[k].values().begin(), theta[k].values().end());
    for (std::size_t i = 0; i < v.size(); ++i) v[i] -= lr * grads[k][i];
    out.emplace_back(theta[k].rows(), theta[k].cols(), std::move(v));
  }
  return out;
}

std::vector<Tensor> collect(const GradientMap& grads, std::span<const Var> leaves) {
  std::vector<Tensor> out;
  for (const Var& v : leaves) {
    auto it = grads.find(v.id());
    out.push_back(it == grads.end() ? Tensor::zeros(v.value().rows(), v.value().cols()) : it->second);
  }
  return out;
}

double seconds_since(std::chrono::steady_clock::time_point start) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
}

}  // namespace

AdaptResult inner_adapt(std::span<const Var> theta, const Objective& objective, std::size_t steps,
                        double lr, bool second_order, const std::string& task_name) {
  if (theta.empty()) throw ContractViolation("inner_adapt: no parameters");
  Tape& tape = *theta[0].tape();
  AdaptResult out;
  out.params.assign(theta.begin(), theta.end());
  for (std::size_t step = 0; step < steps; ++step) {
    guarded(task_name, [&] {
      const Evaluation eval = objective(out.params);
      out.losses.push_back(eval.loss.value().item());
      std::vector<Var> grads = tape.grad(eval.loss, out.params);
      for (std::size_t k = 0; k < grads.size(); ++k) {
        Var g = second_order ? grads[k] : tape.constant(grads[k].value());
        out.params[k] = out.params[k] - scale(g, lr);
      }
      return 0;
    });
  }
  return out;
}

MetaStepResult meta_step(std::span<const Tensor> theta, std::span<const TaskObjectives> tasks,
                         const MetaConfig& config) {
  validate(config);
  if (tasks.empty()) throw ContractViolation("meta_step: no tasks");
  MetaStepResult out;
  std::vector<Tensor> total;
  for (const Tensor& t : theta) total.push_back(Tensor::zeros(t.rows(), t.cols()));
  for (const TaskObjectives& task : tasks) {
    guarded(task.name, [&] {
      Tape tape;
      std::vector<Var> leaves;
      for (const Tensor& t : theta) leaves.push_back(tape.leaf(t));
      const AdaptResult adapted =
          inner_adapt(leaves, task.support, config.inner_steps, config.inner_lr, config.second_order, task.name);
      const Evaluation query = task.query(adapted.params);
      const GradientMap grads = config.second_order && config.inner_steps > 0
                                    ? tape.backward_through_gradients(query.loss)
                                    : tape.backward(query.loss);
      const std::vector<Tensor> g = collect(grads, leaves);
      total = descend(total, g, -1.0);
      out.tasks.push_back({adapted.losses.front(), query.loss.value().item(), query.breakdown.distance});
      return 0;
    });
  }
  out.theta = descend(theta, total, config.outer_lr);
  out.meta_gradient = std::move(total);
  return out;
}

PreparedGraph PreparedGraph::make(Graph graph, const PerturbationSet& perturbed) {
  PreparedGraph out;
  out.messages = MessageGraph::build(graph);
  out.masks = edge_masks(out.messages, perturbed);
  out.graph = std::make_shared<const Graph>(std::move(graph));
  return out;
}

Objective gnn_objective(const ModelConfig& model, std::shared_ptr<const PreparedGraph> graph, NodeIds nodes,
                        const LossConfig& loss) {
  return [model, graph = std::move(graph), nodes = std::move(nodes), loss](std::span<const Var> params) {
    Tape& tape = *params[0].tape();
    const ForwardPass pass = model_forward(tape, params, model, graph->messages, graph->graph->features());
    TotalLoss total = total_loss(pass, *graph->graph, nodes, graph->masks, loss);
    return Evaluation{total.total, total.breakdown};
  };
}

Task make_task(std::string name, const Graph& attacked, const PerturbationSet& perturbations, NodeIds pool) {
  if (pool.empty()) throw ContractViolation("task '" + name + "': empty labeled pool");
  if (!perturbations.subset_of(attacked)) {
    throw ContractViolation("task '" + name + "': perturbations are not edges of the graph");
  }
  Task t;
  t.name = std::move(name);
  t.graph = std::make_shared<const PreparedGraph>(PreparedGraph::make(attacked, perturbations));
  t.perturbations = perturbations;
  t.labeled_pool = std::move(pool);
  return t;
}

void TrainLog::append(TrainLogRow row) {
  if (!rows.empty() && row.iteration < rows.back().iteration) {
    throw ContractViolation("train log: iteration index must not decrease");
  }
  rows.push_back(std::move(row));
}

void TrainLog::extend(const TrainLog& other) {
  const std::size_t base = rows.empty() ? 0 : rows.back().iteration;
  for (TrainLogRow row : other.rows) {
    row.iteration += base;
    append(std::move(row));
  }
}

std::string TrainLog::to_csv(bool include_time) const {
  std::ostringstream out;
  out.precision(17);
  out << "iteration,phase,task,support_loss,query_loss,dist_loss,val_accuracy" << (include_time ? ",seconds" : "")
      << '\n';
  for (const auto& r : rows) {
    out << r.iteration << ',' << r.phase << ',' << r.task << ',' << r.support_loss << ',' << r.query_loss << ','
        << r.dist_loss << ',' << r.val_accuracy;
    if (include_time) out << ',' << r.seconds;
    out << '\n';
  }
  return out.str();
}

void TrainLog::write_csv(const std::filesystem::path& path) const {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write train log " + path.string());
  out << to_csv();
}

TargetData make_target(const Graph& poisoned, NodeSplit split) {
  return {std::make_shared<const PreparedGraph>(PreparedGraph::make(poisoned)), std::move(split)};
}

double validation_accuracy(const ModelParams& params, const ModelConfig& model, const TargetData& target) {
  Tape tape;
  std::vector<Var> vars;
  for (const Tensor& t : params.flatten()) vars.push_back(tape.constant(t));
  const ForwardPass pass = model_forward(tape, vars, model, target.graph->messages, target.graph->graph->features());
  return accuracy(pass.logits.value(), *target.graph->graph, target.split.validation);
}

TrainResult train_meta(const ModelParams& init, std::vector<Task>& tasks, const TargetData& target,
                       const ModelConfig& model, const LossConfig& loss, const MetaConfig& config,
                       std::uint64_t seed) {
  validate(config);
  validate(loss);
  if (tasks.empty()) throw ContractViolation("train_meta: no tasks");
  const auto start = std::chrono::steady_clock::now();
  TrainResult result;
  result.params = init;
  result.best_val_accuracy = validation_accuracy(init, model, target);
  std::vector<Tensor> theta = init.flatten();
  for (std::size_t iter = 1; iter <= config.max_outer_iters; ++iter) {
    std::vector<TaskObjectives> objectives;
    for (std::size_t i = 0; i < tasks.size(); ++i) {
      Task& t = tasks[i];
      t.split = support_query_split(t.labeled_pool, derive_seed(seed, (iter - 1) * tasks.size() + i));
      objectives.push_back({t.name, gnn_objective(model, t.graph, t.split.support, loss),
                            gnn_objective(model, t.graph, t.split.query, loss)});
    }
    MetaStepResult step = meta_step(theta, objectives, config);
    theta = std::move(step.theta);
    const ModelParams current = ModelParams::unflatten(init, theta);
    const double val = validation_accuracy(current, model, target);
    for (std::size_t i = 0; i < tasks.size(); ++i) {
      result.log.append({iter, "meta", tasks[i].name, step.tasks[i].support_loss, step.tasks[i].query_loss,
                         step.tasks[i].query_distance, val, seconds_since(start)});
    }
    if (val > result.best_val_accuracy) {
      result.best_val_accuracy = val;
      result.best_iteration = iter;
      result.params = current;
    }
    if (iter - result.best_iteration >= config.patience) break;
  }
  return result;
}

TrainResult train_joint(const ModelParams& init, std::span<const Objective> objectives, const TargetData& target,
                        const ModelConfig& model, const FineTuneConfig& config, const std::string& phase) {
  if (objectives.empty()) throw ContractViolation("train_joint: no objectives");
  const auto start = std::chrono::steady_clock::now();
  TrainResult result;
  result.params = init;
  result.best_val_accuracy = validation_accuracy(init, model, target);
  std::vector<Tensor> theta = init.flatten();
  for (std::size_t iter = 1; iter <= config.max_steps; ++iter) {
    Tape tape;
    std::vector<Var> leaves;
    for (const Tensor& t : theta) leaves.push_back(tape.leaf(t));
    Evaluation first = objectives[0](leaves);
    Var total = first.loss;
    double distance = first.breakdown.distance;
    for (std::size_t k = 1; k < objectives.size(); ++k) {
      const Evaluation e = objectives[k](leaves);
      total = total + e.loss;
      distance += e.breakdown.distance;
    }
    const double loss_value = total.value().item();
    const std::vector<Tensor> grads = guarded(phase, [&] { return collect(tape.backward(total), leaves); });
    theta = guarded(phase, [&] { return descend(theta, grads, config.lr); });
    const ModelParams current = ModelParams::unflatten(init, theta);
    const double val = validation_accuracy(current, model, target);
    result.log.append({iter, phase, "all", loss_value, 0.0, distance, val, seconds_since(start)});
    if (val > result.best_val_accuracy) {
      result.best_val_accuracy = val;
      result.best_iteration = iter;
      result.params = current;
    }
    if (iter - result.best_iteration >= config.patience) break;
  }
  return result;
}

TrainResult fine_tune(const ModelParams& init, const TargetData& target, const ModelConfig& model,
                      const FineTuneConfig& config) {
  const Objective ce = gnn_objective(model, target.graph, target.split.train, LossConfig{0.0, 0.0});
  return train_joint(init, std::span(&ce, 1), target, model, config, "fine_tune");
}

// ---------------------------------------------------------------------------
// Ablations

const char* ablation_name(Ablation regime) {
  switch (regime) {
    case Ablation::NoPenalty: return "np";
    case Ablation::SecondTime: return "second_time";
    case Ablation::PretrainFinetune: return "pretrain_finetune";
    case Ablation::Joint: return "joint";
  }
  return "unknown";
}

Ablation parse_ablation(const std::string& name) {
  for (Ablation a : {Ablation::NoPenalty, Ablation::SecondTime, Ablation::PretrainFinetune, Ablation::Joint})
    if (name == ablation_name(a)) return a;
  throw std::invalid_argument("unknown ablation '" + name + "'");
}

namespace {

TrainResult then_fine_tune(TrainResult first, const AblationInputs& in) {
  TrainResult tuned = fine_tune(first.params, in.target, in.model, in.fine_tune);
  TrainLog log = std::move(first.log);
  log.extend(tuned.log);
  tuned.log = std::move(log);
  return tuned;
}

std::vector<Objective> task_objectives(const AblationInputs& in) {
  std::vector<Objective> out;
  for (const Task& t : in.tasks) out.push_back(gnn_objective(in.model, t.graph, t.labeled_pool, in.loss));
  return out;
}

}  // namespace

TrainResult train_ablation(Ablation regime, AblationInputs in, std::uint64_t seed) {
  const bool needs_tasks = regime != Ablation::SecondTime;
  if (needs_tasks && in.tasks.empty()) {
    throw std::invalid_argument(std::string("ablation ") + ablation_name(regime) + " needs clean tasks");
  }
  if (!needs_tasks && !in.tasks.empty()) {
    throw std::invalid_argument("ablation second_time ignores clean tasks; none may be given");
  }
  switch (regime) {
    case Ablation::NoPenalty: {
      LossConfig loss = in.loss;
      loss.lambda = 0.0;
      return then_fine_tune(train_meta(in.init, in.tasks, in.target, in.model, loss, in.meta, seed), in);
    }
    case Ablation::SecondTime: {
      const Graph& target = *in.target.graph->graph;
      const AttackResult again =
          greedy_gradient_attack(target, AttackBudget::rate(in.second_attack_rate), in.attack, derive_seed(seed, "second-attack"));
      auto prepared = std::make_shared<const PreparedGraph>(PreparedGraph::make(again.poisoned, again.perturbations));
      const Objective obj = gnn_objective(in.model, prepared, in.target.split.train, in.loss);
      return train_joint(in.init, std::span(&obj, 1), in.target, in.model, in.fine_tune, "second_time");
    }
    case Ablation::PretrainFinetune: {
      const std::vector<Objective> objs = task_objectives(in);
      return then_fine_tune(train_joint(in.init, objs, in.target, in.model, in.fine_tune, "pretrain"), in);
    }
    case Ablation::Joint: {
      std::vector<Objective> objs = task_objectives(in);
      objs.push_back(gnn_objective(in.model, in.target.graph, in.target.split.train, LossConfig{0.0, 0.0}));
      return train_joint(in.init, objs, in.target, in.model, in.fine_tune, "joint");
    }
  }
  throw std::invalid_argument("unknown ablation");
}

}  // namespace pagnn
