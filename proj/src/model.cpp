#include "pagnn/model.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <sstream>
#include <stdexcept>

#include <json.hpp>

#include "pagnn/random.hpp"

namespace pagnn {

void validate(const ModelConfig& c) {
  if (c.n_layers < 1) throw std::invalid_argument("model: n_layers must be at least 1");
  if (c.n_heads < 1 || c.output_heads < 1) throw std::invalid_argument("model: head counts must be positive");
  if (c.n_layers > 1 && (c.hidden_total == 0 || c.hidden_total % c.n_heads != 0)) {
    throw std::invalid_argument("model: hidden_total must be a positive multiple of n_heads");
  }
  if (!(c.leaky_slope > 0.0 && c.leaky_slope < 1.0)) {
    throw std::invalid_argument("model: leaky_slope must lie in (0, 1)");
  }
}

std::vector<Tensor> ModelParams::flatten() const {
  std::vector<Tensor> out;
  for (const auto& layer : layers)
    for (const auto& head : layer.heads) {
      out.push_back(head.weight);
      out.push_back(head.attention);
    }
  return out;
}

std::size_t ModelParams::tensor_count() const {
  std::size_t n = 0;
  for (const auto& layer : layers) n += 2 * layer.heads.size();
  return n;
}

ModelParams ModelParams::unflatten(const ModelParams& layout, std::span<const Tensor> tensors) {
  if (tensors.size() != layout.tensor_count()) {
    throw ShapeError("unflatten: expected " + std::to_string(layout.tensor_count()) + " tensors, got " +
                     std::to_string(tensors.size()));
  }
  ModelParams out;
  std::size_t k = 0;
  for (const auto& layer : layout.layers) {
    LayerParams lp;
    for (const auto& head : layer.heads) {
      if (!tensors[k].same_shape(head.weight) || !tensors[k + 1].same_shape(head.attention)) {
        throw ShapeError("unflatten: tensor shape does not match layout");
      }
      lp.heads.push_back({tensors[k], tensors[k + 1]});
      k += 2;
    }
    out.layers.push_back(std::move(lp));
  }
  return out;
}

namespace {

Tensor glorot(std::size_t fan_in, std::size_t fan_out, Rng& rng) {
  const double limit = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
  std::uniform_real_distribution<double> u(-limit, limit);
  std::vector<double> v(fan_in * fan_out);
  for (auto& x : v) x = u(rng);
  return Tensor(fan_in, fan_out, std::move(v));
}

struct LayerShape {
  std::size_t in = 0;
  std::size_t per_head = 0;
  std::size_t heads = 0;
};

std::vector<LayerShape> layer_shapes(const ModelConfig& c, std::size_t input_dim, int n_classes) {
  std::vector<LayerShape> shapes;
  std::size_t in = input_dim;
  for (std::size_t l = 0; l < c.n_layers; ++l) {
    const bool last = l + 1 == c.n_layers;
    if (last) {
      shapes.push_back({in, static_cast<std::size_t>(n_classes), c.output_heads});
    } else {
      shapes.push_back({in, c.hidden_total / c.n_heads, c.n_heads});
      in = c.hidden_total;
    }
  }
  return shapes;
}

}  // namespace

ModelParams init_params(const ModelConfig& config, std::size_t input_dim, int n_classes,
                        std::uint64_t seed) {
  validate(config);
  if (n_classes < 1) throw std::invalid_argument("init_params: n_classes must be positive");
  Rng rng(derive_seed(seed, "init-params"));
  ModelParams params;
  for (const LayerShape& s : layer_shapes(config, input_dim, n_classes)) {
    LayerParams layer;
    for (std::size_t h = 0; h < s.heads; ++h) {
      Tensor w = glorot(s.in, s.per_head, rng);
      Tensor a = glorot(2 * s.per_head, 1, rng);
      layer.heads.push_back({std::move(w), std::move(a)});
    }
    params.layers.push_back(std::move(layer));
  }
  return params;
}

MessageGraph MessageGraph::build(const Graph& graph) {
  struct Message {
    std::uint32_t receiver, sender;
    std::int64_t edge;
  };
  std::vector<Message> messages;
  messages.reserve(2 * graph.edges().size() + graph.n_nodes());
  for (std::uint32_t i = 0; i < graph.n_nodes(); ++i) messages.push_back({i, i, -1});
  const auto edges = graph.edges();
  for (std::size_t k = 0; k < edges.size(); ++k) {
    messages.push_back({edges[k].u, edges[k].v, static_cast<std::int64_t>(k)});
    messages.push_back({edges[k].v, edges[k].u, static_cast<std::int64_t>(k)});
  }
  std::sort(messages.begin(), messages.end(), [](const Message& a, const Message& b) {
    return a.receiver != b.receiver ? a.receiver < b.receiver : a.sender < b.sender;
  });
  std::vector<std::uint32_t> receiver, sender;
  MessageGraph out;
  out.n_nodes = graph.n_nodes();
  for (const Message& m : messages) {
    receiver.push_back(m.receiver);
    sender.push_back(m.sender);
    out.undirected.push_back(m.edge);
  }
  out.receiver = make_index(std::move(receiver));
  out.sender = make_index(std::move(sender));
  return out;
}

Var attention_coefficients(Var projected, Var attention, const MessageGraph& messages,
                           double leaky_slope) {
  const std::size_t f = projected.value().cols();
  if (attention.value().rows() != 2 * f || attention.value().cols() != 1) {
    throw ShapeError("attention vector " + attention.value().shape_string() + " does not fit width " +
                     std::to_string(f));
  }
  std::vector<std::uint32_t> first(f), second(f);
  std::iota(first.begin(), first.end(), 0u);
  std::iota(second.begin(), second.end(), static_cast<std::uint32_t>(f));
  Var receiver_part = matmul(projected, gather_rows(attention, make_index(std::move(first))));
  Var sender_part = matmul(projected, gather_rows(attention, make_index(std::move(second))));
  Var raw = gather_rows(receiver_part, messages.receiver) + gather_rows(sender_part, messages.sender);
  return leaky_relu(raw, leaky_slope);
}

Var normalize_attention(Var scores, const MessageGraph& messages) {
  return segment_softmax(scores, messages.receiver, messages.n_nodes);
}

LayerResult layer_forward(std::span<const Var> params, Var input, const MessageGraph& messages,
                          const ModelConfig& config, bool output_layer) {
  if (params.empty() || params.size() % 2 != 0) throw ShapeError("layer_forward: expected [W, a] pairs");
  const std::size_t n_heads = params.size() / 2;
  LayerResult result;
  std::vector<Var> outputs;
  for (std::size_t h = 0; h < n_heads; ++h) {
    Var projected = matmul(input, params[2 * h]);
    Var scores = attention_coefficients(projected, params[2 * h + 1], messages, config.leaky_slope);
    Var alpha = normalize_attention(scores, messages);
    Var incoming = row_scale(gather_rows(projected, messages.sender), alpha);
    Var aggregated = scatter_add_rows(incoming, messages.receiver, messages.n_nodes);
    result.heads.push_back({scores, alpha});
    outputs.push_back(aggregated);
  }
  if (output_layer) {
    Var total = outputs[0];
    for (std::size_t h = 1; h < n_heads; ++h) total = total + outputs[h];
    result.output = n_heads == 1 ? total : scale(total, 1.0 / static_cast<double>(n_heads));
  } else {
    Var joined = n_heads == 1 ? outputs[0] : concat_cols(outputs);
    result.output = config.activation == Activation::Elu ? elu(joined) : relu(joined);
  }
  return result;
}

ForwardPass model_forward(Tape& tape, std::span<const Var> params, const ModelConfig& config,
                          const MessageGraph& messages, const Tensor& features) {
  if (features.rows() != messages.n_nodes) throw ShapeError("model_forward: feature rows differ from node count");
  const std::size_t hidden_tensors = 2 * config.n_heads;
  const std::size_t output_tensors = 2 * config.output_heads;
  if (params.size() != (config.n_layers - 1) * hidden_tensors + output_tensors) {
    throw ShapeError("model_forward: parameter count does not match the configuration");
  }
  ForwardPass pass;
  Var h = tape.constant(features);
  std::size_t offset = 0;
  for (std::size_t l = 0; l < config.n_layers; ++l) {
    const bool last = l + 1 == config.n_layers;
    const std::size_t count = last ? output_tensors : hidden_tensors;
    LayerResult layer = layer_forward(params.subspan(offset, count), h, messages, config, last);
    offset += count;
    h = layer.output;
    pass.layers.push_back(std::move(layer));
  }
  pass.logits = h;
  return pass;
}

ModelOutput model_forward(const ModelParams& params, const ModelConfig& config, const Graph& graph) {
  Tape tape;
  std::vector<Var> vars;
  for (const Tensor& t : params.flatten()) vars.push_back(tape.constant(t));
  const MessageGraph messages = MessageGraph::build(graph);
  const ForwardPass pass = model_forward(tape, vars, config, messages, graph.features());
  ModelOutput out;
  out.logits = pass.logits.value();
  for (std::size_t l = 0; l < pass.layers.size(); ++l)
    for (std::size_t h = 0; h < pass.layers[l].heads.size(); ++h) {
      const auto& head = pass.layers[l].heads[h];
      out.records.push_back({l, h, head.scores.value(), head.normalized.value()});
    }
  return out;
}

std::vector<int> predict(const Tensor& logits) {
  std::vector<int> out(logits.rows());
  for (std::size_t r = 0; r < logits.rows(); ++r) {
    const auto row = logits.row(r);
    out[r] = static_cast<int>(std::max_element(row.begin(), row.end()) - row.begin());
  }
  return out;
}

double accuracy(const Tensor& logits, const Graph& graph, std::span<const std::uint32_t> nodes) {
  if (nodes.empty()) return 0.0;
  const std::vector<int> pred = predict(logits);
  std::size_t correct = 0;
  for (std::uint32_t v : nodes) correct += pred.at(v) == graph.label(v);
  return static_cast<double>(correct) / static_cast<double>(nodes.size());
}

// ---------------------------------------------------------------------------
// Checkpoints

namespace {

using ordered_json = nlohmann::ordered_json;

const char* activation_name(Activation a) { return a == Activation::Elu ? "elu" : "relu"; }

Activation parse_activation(const std::string& s) {
  if (s == "elu") return Activation::Elu;
  if (s == "relu") return Activation::Relu;
  throw std::invalid_argument("unknown activation '" + s + "'");
}

std::string tensor_name(std::size_t layer, std::size_t head, const char* part) {
  return "layer" + std::to_string(layer) + ".head" + std::to_string(head) + "." + part;
}

ordered_json tensor_json(const Tensor& t) {
  ordered_json j;
  j["shape"] = {t.rows(), t.cols()};
  j["values"] = std::vector<double>(t.values().begin(), t.values().end());
  return j;
}

Tensor tensor_from_json(const ordered_json& j, const std::string& name) {
  try {
    const auto shape = j.at("shape").get<std::vector<std::size_t>>();
    if (shape.size() != 2) throw std::invalid_argument("shape must have two entries");
    return Tensor(shape[0], shape[1], j.at("values").get<std::vector<double>>());
  } catch (const std::exception& e) {
    throw std::invalid_argument("checkpoint tensor '" + name + "': " + e.what());
  }
}

}  // namespace

std::string serialize_checkpoint(const Checkpoint& checkpoint) {
  const ModelConfig& c = checkpoint.config;
  ordered_json doc;
  doc["config"] = {{"n_layers", c.n_layers},         {"hidden_total", c.hidden_total},
                   {"n_heads", c.n_heads},           {"output_heads", c.output_heads},
                   {"activation", activation_name(c.activation)}, {"leaky_slope", c.leaky_slope}};
  ordered_json tensors = ordered_json::object();
  for (std::size_t l = 0; l < checkpoint.params.layers.size(); ++l)
    for (std::size_t h = 0; h < checkpoint.params.layers[l].heads.size(); ++h) {
      const auto& head = checkpoint.params.layers[l].heads[h];
      tensors[tensor_name(l, h, "weight")] = tensor_json(head.weight);
      tensors[tensor_name(l, h, "attention")] = tensor_json(head.attention);
    }
  doc["tensors"] = std::move(tensors);
  return doc.dump(1) + "\n";
}

Checkpoint parse_checkpoint(const std::string& text) {
  ordered_json doc;
  try {
    doc = ordered_json::parse(text);
  } catch (const nlohmann::json::parse_error& e) {
    throw std::invalid_argument(std::string("checkpoint parse error: ") + e.what());
  }
  Checkpoint out;
  try {
    const auto& c = doc.at("config");
    out.config.n_layers = c.at("n_layers").get<std::size_t>();
    out.config.hidden_total = c.at("hidden_total").get<std::size_t>();
    out.config.n_heads = c.at("n_heads").get<std::size_t>();
    out.config.output_heads = c.at("output_heads").get<std::size_t>();
    out.config.activation = parse_activation(c.at("activation").get<std::string>());
    out.config.leaky_slope = c.at("leaky_slope").get<double>();
  } catch (const nlohmann::json::exception& e) {
    throw std::invalid_argument(std::string("checkpoint config: ") + e.what());
  }
  validate(out.config);
  const auto& tensors = doc.at("tensors");
  for (std::size_t l = 0; l < out.config.n_layers; ++l) {
    const bool last = l + 1 == out.config.n_layers;
    const std::size_t heads = last ? out.config.output_heads : out.config.n_heads;
    LayerParams layer;
    for (std::size_t h = 0; h < heads; ++h) {
      const std::string wn = tensor_name(l, h, "weight"), an = tensor_name(l, h, "attention");
      if (!tensors.contains(wn) || !tensors.contains(an)) {
        throw std::invalid_argument("checkpoint is missing tensors for " + wn);
      }
      layer.heads.push_back({tensor_from_json(tensors[wn], wn), tensor_from_json(tensors[an], an)});
    }
    out.params.layers.push_back(std::move(layer));
  }
  return out;
}

void save_checkpoint(const Checkpoint& checkpoint, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write checkpoint " + path.string());
  out << serialize_checkpoint(checkpoint);
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open checkpoint " + path.string());
  std::ostringstream buffer;
  buffer << in.rdbuf();
  return parse_checkpoint(buffer.str());
}

}  // namespace pagnn
