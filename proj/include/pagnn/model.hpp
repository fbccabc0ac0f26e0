#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "pagnn/graph.hpp"
#include "pagnn/tape.hpp"

namespace pagnn {

enum class Activation { Elu, Relu };

struct ModelConfig {
  std::size_t n_layers = 2;
  std::size_t hidden_total = 64;  // hidden width summed over heads
  std::size_t n_heads = 8;        // heads on hidden layers (concatenated)
  std::size_t output_heads = 1;   // heads on the output layer (averaged)
  Activation activation = Activation::Elu;
  double leaky_slope = 0.2;
};

// Throws std::invalid_argument when the configuration is inconsistent.
void validate(const ModelConfig& config);

struct HeadParams {
  Tensor weight;     // d_in x f
  Tensor attention;  // 2f x 1: first half scores the receiving node, second the sender
};

struct LayerParams {
  std::vector<HeadParams> heads;
};

struct ModelParams {
  std::vector<LayerParams> layers;

  // Layer-major, head-major, weight before attention.
  std::vector<Tensor> flatten() const;
  // Inverse of flatten(); `layout` supplies the structure.
  static ModelParams unflatten(const ModelParams& layout, std::span<const Tensor> tensors);
  std::size_t tensor_count() const;
};

ModelParams init_params(const ModelConfig& config, std::size_t input_dim, int n_classes,
                        std::uint64_t seed);

// Directed message edges (receiver <- sender) for every stored pair in both
// directions plus one self loop per node, ordered by (receiver, sender).
struct MessageGraph {
  std::size_t n_nodes = 0;
  Index receiver;
  Index sender;
  // Position of the undirected edge in Graph::edges(), or -1 for a self loop.
  std::vector<std::int64_t> undirected;

  std::size_t size() const { return receiver->size(); }
  static MessageGraph build(const Graph& graph);
};

// Unnormalized and normalized coefficients of one head, on the tape.
struct HeadAttention {
  Var scores;      // E x 1
  Var normalized;  // E x 1
};

struct LayerResult {
  Var output;                       // N x width
  std::vector<HeadAttention> heads;
};

struct ForwardPass {
  Var logits;                           // N x C
  std::vector<LayerResult> layers;
};

// Per-edge leaky_relu(a^T [W h_i ++ W h_j]); `projected` is H W.
Var attention_coefficients(Var projected, Var attention, const MessageGraph& messages,
                           double leaky_slope);
// Softmax of the scores over each receiver's neighborhood (self loop included).
Var normalize_attention(Var scores, const MessageGraph& messages);

// One attention layer. `params` holds [W, a] per head in order.
LayerResult layer_forward(std::span<const Var> params, Var input, const MessageGraph& messages,
                          const ModelConfig& config, bool output_layer);

// Full forward pass over flattened parameters.
ForwardPass model_forward(Tape& tape, std::span<const Var> params, const ModelConfig& config,
                          const MessageGraph& messages, const Tensor& features);

// Attention of one (layer, head), as plain values.
struct AttentionRecord {
  std::size_t layer = 0;
  std::size_t head = 0;
  Tensor scores;
  Tensor normalized;
};

struct ModelOutput {
  Tensor logits;
  std::vector<AttentionRecord> records;
};

ModelOutput model_forward(const ModelParams& params, const ModelConfig& config, const Graph& graph);

std::vector<int> predict(const Tensor& logits);
double accuracy(const Tensor& logits, const Graph& graph, std::span<const std::uint32_t> nodes);

struct Checkpoint {
  ModelConfig config;
  ModelParams params;
};

std::string serialize_checkpoint(const Checkpoint& checkpoint);
Checkpoint parse_checkpoint(const std::string& text);
void save_checkpoint(const Checkpoint& checkpoint, const std::filesystem::path& path);
Checkpoint load_checkpoint(const std::filesystem::path& path);

}  // namespace pagnn
