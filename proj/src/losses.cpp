#include "pagnn/losses.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <string>

namespace pagnn {

void validate(const LossConfig& config) {
  if (!std::isfinite(config.lambda) || config.lambda < 0.0) {
    throw std::invalid_argument("loss: lambda must be finite and non-negative");
  }
  if (!std::isfinite(config.eta) || config.eta < 0.0) {
    throw std::invalid_argument("loss: eta must be finite and non-negative");
  }
}

Var cross_entropy(Var logits, std::span<const int> labels, std::span<const std::uint32_t> nodes) {
  if (nodes.empty()) throw ContractViolation("cross_entropy: empty node set");
  const Tensor& z = logits.value();
  if (labels.size() != z.rows()) throw ShapeError("cross_entropy: label count differs from logit rows");
  const std::size_t n = nodes.size(), c = z.cols();
  std::vector<double> shift(n * c), onehot(n * c, 0.0);
  for (std::size_t k = 0; k < n; ++k) {
    const std::uint32_t v = nodes[k];
    if (v >= z.rows()) throw ContractViolation("cross_entropy: node " + std::to_string(v) + " out of range");
    const int y = labels[v];
    if (y < 0 || static_cast<std::size_t>(y) >= c) {
      throw ContractViolation("cross_entropy: node " + std::to_string(v) + " is unlabeled");
    }
    const auto row = z.row(v);
    std::fill_n(shift.begin() + k * c, c, *std::max_element(row.begin(), row.end()));
    onehot[k * c + y] = 1.0;
  }
  Var selected = gather_rows(logits, make_index(std::vector<std::uint32_t>(nodes.begin(), nodes.end())));
  Var shifted = selected - logits.tape()->constant(Tensor(n, c, std::move(shift)));
  Var lse = log(row_sum(exp(shifted)));
  Var picked = row_sum(mask_mul(shifted, Tensor(n, c, std::move(onehot))));
  return scale(sum(lse - picked), 1.0 / static_cast<double>(n));
}

EdgeMasks edge_masks(const MessageGraph& messages, const PerturbationSet& perturbed) {
  const std::size_t e = messages.size();
  std::vector<double> ptb(e, 0.0), normal(e, 0.0);
  EdgeMasks out;
  for (std::size_t k = 0; k < e; ++k) {
    if (messages.undirected[k] < 0) continue;
    const Edge edge = make_edge((*messages.receiver)[k], (*messages.sender)[k]);
    if (perturbed.contains(edge)) {
      ptb[k] = 1.0;
      ++out.n_perturbed;
    } else {
      normal[k] = 1.0;
      ++out.n_normal;
    }
  }
  out.perturbed = Tensor(e, 1, std::move(ptb));
  out.normal = Tensor(e, 1, std::move(normal));
  return out;
}

namespace {

Var masked_total(std::span<const Var> scores, const Tensor& mask) {
  if (scores.empty()) throw ContractViolation("attention loss: no score columns");
  Var total = sum(mask_mul(scores[0], mask));
  for (std::size_t k = 1; k < scores.size(); ++k) total = total + sum(mask_mul(scores[k], mask));
  return total;
}

}  // namespace

Var perturb_attention_sum(std::span<const Var> scores, const EdgeMasks& masks) {
  return masked_total(scores, masks.perturbed);
}

double perturb_attention_sum(std::span<const AttentionRecord> records, const EdgeMasks& masks) {
  double total = 0.0;
  for (const auto& rec : records)
    for (std::size_t k = 0; k < rec.scores.rows(); ++k) total += rec.scores(k, 0) * masks.perturbed(k, 0);
  return total;
}

Var dist_loss(std::span<const Var> scores, const EdgeMasks& masks, double eta) {
  if (scores.empty()) throw ContractViolation("dist_loss: no score columns");
  if (masks.n_normal == 0) throw ContractViolation("dist_loss: no normal edges");
  if (masks.n_perturbed == 0) return scale(sum(scores[0]), 0.0);
  const double columns = static_cast<double>(scores.size());
  Var mean_normal = scale(masked_total(scores, masks.normal), 1.0 / (columns * masks.n_normal));
  Var mean_ptb = scale(masked_total(scores, masks.perturbed), 1.0 / (columns * masks.n_perturbed));
  Var gap = mean_normal - mean_ptb;
  if (gap.value().item() >= eta) return add_const(scale(gap, 0.0), -eta);
  return -gap;
}

std::vector<Var> attention_scores(const ForwardPass& pass) {
  std::vector<Var> out;
  for (const auto& layer : pass.layers)
    for (const auto& head : layer.heads) out.push_back(head.scores);
  return out;
}

TotalLoss total_loss(const ForwardPass& pass, const Graph& graph, std::span<const std::uint32_t> nodes,
                     const EdgeMasks& masks, const LossConfig& config) {
  validate(config);
  Var ce = cross_entropy(pass.logits, graph.labels(), nodes);
  const std::vector<Var> scores = attention_scores(pass);
  TotalLoss out;
  out.breakdown.classification = ce.value().item();
  out.breakdown.perturb_attention_sum = perturb_attention_sum(scores, masks).value().item();
  if (config.lambda == 0.0 || masks.n_perturbed == 0) {
    out.total = ce;
    out.breakdown.total = out.breakdown.classification;
    if (masks.n_perturbed > 0 && masks.n_normal > 0) {
      out.breakdown.distance = dist_loss(scores, masks, config.eta).value().item();
    }
    return out;
  }
  Var dist = dist_loss(scores, masks, config.eta);
  out.total = ce + scale(dist, config.lambda);
  out.breakdown.distance = dist.value().item();
  out.breakdown.total = out.total.value().item();
  return out;
}

}  // namespace pagnn
