#pragma once

#include <cstdint>
#include <span>

#include "pagnn/graph.hpp"
#include "pagnn/model.hpp"
#include "pagnn/tape.hpp"

namespace pagnn {

struct LossConfig {
  double lambda = 1.0;
  double eta = 100.0;
};

// Throws std::invalid_argument unless both values are finite and non-negative.
void validate(const LossConfig& config);

struct LossBreakdown {
  double classification = 0.0;
  double distance = 0.0;
  double perturb_attention_sum = 0.0;
  double total = 0.0;
};

// Mean negative log-likelihood of the labels of `nodes` under softmax(logits).
Var cross_entropy(Var logits, std::span<const int> labels, std::span<const std::uint32_t> nodes);

// 0/1 column masks over the message edges of a graph. Self loops belong to
// neither set.
struct EdgeMasks {
  Tensor perturbed;
  Tensor normal;
  std::size_t n_perturbed = 0;
  std::size_t n_normal = 0;
};

EdgeMasks edge_masks(const MessageGraph& messages, const PerturbationSet& perturbed);

// Sum of unnormalized coefficients on perturbed message edges, over every
// score column given (one per layer and head).
Var perturb_attention_sum(std::span<const Var> scores, const EdgeMasks& masks);
double perturb_attention_sum(std::span<const AttentionRecord> records, const EdgeMasks& masks);

// -min(eta, mean over normal edges - mean over perturbed edges), pooled over
// every score column. Zero when there are no perturbed edges.
Var dist_loss(std::span<const Var> scores, const EdgeMasks& masks, double eta);

// Score columns of every layer and head of a forward pass.
std::vector<Var> attention_scores(const ForwardPass& pass);

struct TotalLoss {
  Var total;
  LossBreakdown breakdown;
};

TotalLoss total_loss(const ForwardPass& pass, const Graph& graph, std::span<const std::uint32_t> nodes,
                     const EdgeMasks& masks, const LossConfig& config);

}  // namespace pagnn
