#include "pagnn/tape.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>

namespace pagnn {

Index make_index(std::vector<std::uint32_t> ids) {
  return std::make_shared<const std::vector<std::uint32_t>>(std::move(ids));
}

const char* op_name(Op op) {
  switch (op) {
    case Op::Leaf: return "leaf";
    case Op::MatMul: return "matmul";
    case Op::Transpose: return "transpose";
    case Op::Add: return "add";
    case Op::Sub: return "sub";
    case Op::Mul: return "mul";
    case Op::Scale: return "scale";
    case Op::AddConst: return "add_const";
    case Op::MaskMul: return "mask_mul";
    case Op::LeakyRelu: return "leaky_relu";
    case Op::Relu: return "relu";
    case Op::Elu: return "elu";
    case Op::Exp: return "exp";
    case Op::Log: return "log";
    case Op::Pow: return "pow";
    case Op::RowSum: return "row_sum";
    case Op::BroadcastCols: return "broadcast_cols";
    case Op::Sum: return "sum";
    case Op::Fill: return "fill";
    case Op::GatherRows: return "gather_rows";
    case Op::ScatterAddRows: return "scatter_add_rows";
    case Op::SegmentSoftmax: return "segment_softmax";
    case Op::RowScale: return "row_scale";
    case Op::ConcatCols: return "concat_cols";
    case Op::SliceCols: return "slice_cols";
    case Op::EmbedCols: return "embed_cols";
    case Op::Reshape: return "reshape";
  }
  return "unknown";
}

const Tensor& Var::value() const { return tape_->value(id_); }
bool Var::requires_grad() const { return tape_->requires_grad(id_); }

Var Tape::push(Node node) {
  if (recording_gradient_) {
    node.from_gradient = true;
    ++gradient_nodes_;
  }
  nodes_.push_back(std::move(node));
  return Var(this, static_cast<NodeId>(nodes_.size() - 1));
}

Var Tape::leaf(Tensor value, bool requires_grad) {
  Node node;
  node.op = Op::Leaf;
  node.value = std::move(value);
  node.requires_grad = requires_grad;
  return push(std::move(node));
}

namespace detail {

Var record_n(Op op, std::span<const Var> inputs, Tensor value, NodeAttrs attrs) {
  if (inputs.empty()) throw ContractViolation(std::string(op_name(op)) + ": no inputs");
  Tape* tape = inputs.front().tape();
  Tape::Node node;
  node.op = op;
  node.value = std::move(value);
  node.scalar = attrs.scalar;
  node.aux = attrs.aux;
  node.aux2 = attrs.aux2;
  node.index = std::move(attrs.index);
  node.mask = std::move(attrs.mask);
  node.inputs.reserve(inputs.size());
  for (const Var& in : inputs) {
    if (in.tape() != tape) {
      throw ContractViolation(std::string(op_name(op)) + ": inputs live on different tapes");
    }
    const auto& src = tape->nodes_[in.id()];
    node.requires_grad = node.requires_grad || src.requires_grad;
    node.from_gradient = node.from_gradient || src.from_gradient;
    node.inputs.push_back(in.id());
  }
  return tape->push(std::move(node));
}

Var record(Op op, std::initializer_list<Var> inputs, Tensor value, NodeAttrs attrs) {
  return record_n(op, std::span<const Var>(inputs.begin(), inputs.size()), std::move(value),
                  std::move(attrs));
}

}  // namespace detail

namespace {

using detail::NodeAttrs;
using detail::record;

void require_same_shape(const char* what, const Tensor& a, const Tensor& b) {
  if (!a.same_shape(b)) {
    throw ShapeError(std::string(what) + ": shape mismatch " + a.shape_string() + " vs " +
                     b.shape_string());
  }
}

template <typename F>
Tensor map_values(const Tensor& a, F f) {
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < a.size(); ++i) out[i] = f(a[i]);
  return Tensor(a.rows(), a.cols(), std::move(out));
}

template <typename F>
Tensor zip_values(const Tensor& a, const Tensor& b, F f) {
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < a.size(); ++i) out[i] = f(a[i], b[i]);
  return Tensor(a.rows(), a.cols(), std::move(out));
}

Tensor matmul_values(const Tensor& a, const Tensor& b) {
  const std::size_t m = a.rows(), k = a.cols(), n = b.cols();
  std::vector<double> out(m * n, 0.0);
  const auto av = a.values();
  const auto bv = b.values();
  for (std::size_t i = 0; i < m; ++i) {
    double* row = out.data() + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const double aip = av[i * k + p];
      if (aip == 0.0) continue;
      const double* brow = bv.data() + p * n;
      for (std::size_t j = 0; j < n; ++j) row[j] += aip * brow[j];
    }
  }
  return Tensor(m, n, std::move(out));
}

Tensor transpose_values(const Tensor& a) {
  std::vector<double> out(a.size());
  for (std::size_t r = 0; r < a.rows(); ++r)
    for (std::size_t c = 0; c < a.cols(); ++c) out[c * a.rows() + r] = a(r, c);
  return Tensor(a.cols(), a.rows(), std::move(out));
}

}  // namespace

Var matmul(Var a, Var b) {
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  if (av.cols() != bv.rows()) {
    throw ShapeError("matmul: inner dimensions differ " + av.shape_string() + " x " +
                     bv.shape_string());
  }
  return record(Op::MatMul, {a, b}, matmul_values(av, bv));
}

Var transpose(Var a) { return record(Op::Transpose, {a}, transpose_values(a.value())); }

Var operator+(Var a, Var b) {
  require_same_shape("add", a.value(), b.value());
  return record(Op::Add, {a, b},
                zip_values(a.value(), b.value(), [](double x, double y) { return x + y; }));
}

Var operator-(Var a, Var b) {
  require_same_shape("sub", a.value(), b.value());
  return record(Op::Sub, {a, b},
                zip_values(a.value(), b.value(), [](double x, double y) { return x - y; }));
}

Var operator*(Var a, Var b) {
  require_same_shape("mul", a.value(), b.value());
  return record(Op::Mul, {a, b},
                zip_values(a.value(), b.value(), [](double x, double y) { return x * y; }));
}

Var operator-(Var a) { return scale(a, -1.0); }

Var scale(Var a, double factor) {
  NodeAttrs attrs;
  attrs.scalar = factor;
  return record(Op::Scale, {a}, map_values(a.value(), [=](double x) { return factor * x; }),
                attrs);
}

Var add_const(Var a, double c) {
  NodeAttrs attrs;
  attrs.scalar = c;
  return record(Op::AddConst, {a}, map_values(a.value(), [=](double x) { return x + c; }),
                attrs);
}

Var mask_mul(Var a, Tensor mask) {
  require_same_shape("mask_mul", a.value(), mask);
  Tensor out = zip_values(a.value(), mask, [](double x, double m) { return x * m; });
  NodeAttrs attrs;
  attrs.mask = std::make_shared<const Tensor>(std::move(mask));
  return record(Op::MaskMul, {a}, std::move(out), std::move(attrs));
}

Var leaky_relu(Var a, double slope) {
  NodeAttrs attrs;
  attrs.scalar = slope;
  return record(Op::LeakyRelu, {a},
                map_values(a.value(), [=](double x) { return x > 0.0 ? x : slope * x; }), attrs);
}

Var relu(Var a) {
  return record(Op::Relu, {a}, map_values(a.value(), [](double x) { return x > 0.0 ? x : 0.0; }));
}

Var elu(Var a) {
  return record(Op::Elu, {a},
                map_values(a.value(), [](double x) { return x > 0.0 ? x : std::expm1(x); }));
}

Var exp(Var a) {
  return record(Op::Exp, {a}, map_values(a.value(), [](double x) { return std::exp(x); }));
}

Var log(Var a) {
  return record(Op::Log, {a}, map_values(a.value(), [](double x) { return std::log(x); }));
}

Var pow(Var a, double exponent) {
  NodeAttrs attrs;
  attrs.scalar = exponent;
  return record(Op::Pow, {a},
                map_values(a.value(), [=](double x) { return std::pow(x, exponent); }), attrs);
}

Var row_sum(Var a) {
  const Tensor& v = a.value();
  std::vector<double> out(v.rows(), 0.0);
  for (std::size_t r = 0; r < v.rows(); ++r)
    for (double x : v.row(r)) out[r] += x;
  return record(Op::RowSum, {a}, Tensor(v.rows(), 1, std::move(out)));
}

Var broadcast_cols(Var a, std::size_t cols) {
  const Tensor& v = a.value();
  if (v.cols() != 1) throw ShapeError("broadcast_cols: expected a column, got " + v.shape_string());
  std::vector<double> out(v.rows() * cols);
  for (std::size_t r = 0; r < v.rows(); ++r)
    std::fill_n(out.begin() + static_cast<std::ptrdiff_t>(r * cols), cols, v[r]);
  NodeAttrs attrs;
  attrs.aux = cols;
  return record(Op::BroadcastCols, {a}, Tensor(v.rows(), cols, std::move(out)), attrs);
}

Var sum(Var a) {
  double total = 0.0;
  for (double x : a.value().values()) total += x;
  return record(Op::Sum, {a}, Tensor::scalar(total));
}

Var fill(Var a, std::size_t rows, std::size_t cols) {
  NodeAttrs attrs;
  attrs.aux = rows;
  attrs.aux2 = cols;
  return record(Op::Fill, {a}, Tensor::filled(rows, cols, a.value().item()), attrs);
}

Var gather_rows(Var a, Index rows) {
  const Tensor& v = a.value();
  const std::size_t c = v.cols();
  std::vector<double> out;
  out.reserve(rows->size() * c);
  for (std::uint32_t r : *rows) {
    if (r >= v.rows()) {
      throw ShapeError("gather_rows: row " + std::to_string(r) + " out of range for " +
                       v.shape_string());
    }
    const auto src = v.row(r);
    out.insert(out.end(), src.begin(), src.end());
  }
  const std::size_t m = rows->size();
  NodeAttrs attrs;
  attrs.index = std::move(rows);
  return record(Op::GatherRows, {a}, Tensor(m, c, std::move(out)), std::move(attrs));
}

Var scatter_add_rows(Var a, Index rows, std::size_t n_rows) {
  const Tensor& v = a.value();
  if (rows->size() != v.rows()) {
    throw ShapeError("scatter_add_rows: " + std::to_string(rows->size()) + " indices for " +
                     v.shape_string());
  }
  const std::size_t c = v.cols();
  std::vector<double> out(n_rows * c, 0.0);
  for (std::size_t i = 0; i < rows->size(); ++i) {
    const std::uint32_t r = (*rows)[i];
    if (r >= n_rows) throw ShapeError("scatter_add_rows: target row out of range");
    const auto src = v.row(i);
    for (std::size_t j = 0; j < c; ++j) out[r * c + j] += src[j];
  }
  NodeAttrs attrs;
  attrs.index = std::move(rows);
  attrs.aux = n_rows;
  return record(Op::ScatterAddRows, {a}, Tensor(n_rows, c, std::move(out)), std::move(attrs));
}

Var segment_softmax(Var scores, Index segments, std::size_t n_segments) {
  const Tensor& s = scores.value();
  if (s.cols() != 1) throw ShapeError("segment_softmax: scores must be a column");
  if (segments->size() != s.rows()) throw ShapeError("segment_softmax: segment ids/score count differ");
  std::vector<double> seg_max(n_segments, -std::numeric_limits<double>::infinity());
  std::vector<std::size_t> seg_count(n_segments, 0);
  for (std::size_t e = 0; e < s.rows(); ++e) {
    const std::uint32_t g = (*segments)[e];
    if (g >= n_segments) throw ShapeError("segment_softmax: segment id out of range");
    seg_max[g] = std::max(seg_max[g], s[e]);
    ++seg_count[g];
  }
  for (std::size_t g = 0; g < n_segments; ++g) {
    if (seg_count[g] == 0) {
      throw ContractViolation("segment_softmax: segment " + std::to_string(g) + " is empty");
    }
  }
  std::vector<double> out(s.rows());
  std::vector<double> seg_sum(n_segments, 0.0);
  for (std::size_t e = 0; e < s.rows(); ++e) {
    const std::uint32_t g = (*segments)[e];
    out[e] = std::exp(s[e] - seg_max[g]);
    seg_sum[g] += out[e];
  }
  for (std::size_t e = 0; e < s.rows(); ++e) out[e] /= seg_sum[(*segments)[e]];
  NodeAttrs attrs;
  attrs.index = std::move(segments);
  attrs.aux = n_segments;
  return record(Op::SegmentSoftmax, {scores}, Tensor(s.rows(), 1, std::move(out)),
                std::move(attrs));
}

Var row_scale(Var a, Var s) {
  const Tensor& av = a.value();
  const Tensor& sv = s.value();
  if (sv.cols() != 1 || sv.rows() != av.rows()) {
    throw ShapeError("row_scale: scale " + sv.shape_string() + " does not fit " + av.shape_string());
  }
  std::vector<double> out(av.size());
  for (std::size_t r = 0; r < av.rows(); ++r)
    for (std::size_t c = 0; c < av.cols(); ++c) out[r * av.cols() + c] = av(r, c) * sv[r];
  return record(Op::RowScale, {a, s}, Tensor(av.rows(), av.cols(), std::move(out)));
}

Var concat_cols(std::span<const Var> parts) {
  if (parts.empty()) throw ShapeError("concat_cols: no parts");
  const std::size_t rows = parts.front().value().rows();
  std::size_t total = 0;
  for (const Var& p : parts) {
    if (p.value().rows() != rows) throw ShapeError("concat_cols: row counts differ");
    total += p.value().cols();
  }
  std::vector<double> out(rows * total);
  std::size_t offset = 0;
  for (const Var& p : parts) {
    const Tensor& v = p.value();
    for (std::size_t r = 0; r < rows; ++r)
      for (std::size_t c = 0; c < v.cols(); ++c) out[r * total + offset + c] = v(r, c);
    offset += v.cols();
  }
  return detail::record_n(Op::ConcatCols, parts, Tensor(rows, total, std::move(out)));
}

Var slice_cols(Var a, std::size_t begin, std::size_t count) {
  const Tensor& v = a.value();
  if (begin + count > v.cols()) throw ShapeError("slice_cols: range exceeds " + v.shape_string());
  std::vector<double> out(v.rows() * count);
  for (std::size_t r = 0; r < v.rows(); ++r)
    for (std::size_t c = 0; c < count; ++c) out[r * count + c] = v(r, begin + c);
  NodeAttrs attrs;
  attrs.aux = begin;
  return record(Op::SliceCols, {a}, Tensor(v.rows(), count, std::move(out)), attrs);
}

Var embed_cols(Var a, std::size_t begin, std::size_t total_cols) {
  const Tensor& v = a.value();
  if (begin + v.cols() > total_cols) throw ShapeError("embed_cols: range exceeds target width");
  std::vector<double> out(v.rows() * total_cols, 0.0);
  for (std::size_t r = 0; r < v.rows(); ++r)
    for (std::size_t c = 0; c < v.cols(); ++c) out[r * total_cols + begin + c] = v(r, c);
  NodeAttrs attrs;
  attrs.aux = begin;
  attrs.aux2 = total_cols;
  return record(Op::EmbedCols, {a}, Tensor(v.rows(), total_cols, std::move(out)), attrs);
}

Var reshape(Var a, std::size_t rows, std::size_t cols) {
  const Tensor& v = a.value();
  if (rows * cols != v.size()) {
    throw ShapeError("reshape: cannot view " + v.shape_string() + " as " + std::to_string(rows) +
                     "x" + std::to_string(cols));
  }
  std::vector<double> out(v.values().begin(), v.values().end());
  return record(Op::Reshape, {a}, Tensor(rows, cols, std::move(out)));
}

std::vector<Var> Tape::reverse_sweep(Var output, std::span<const Var> wrt) {
  if (output.tape() != this) throw ContractViolation("backward: output lives on another tape");
  const Tensor& out_value = value(output.id());
  if (out_value.rows() != 1 || out_value.cols() != 1) {
    throw ContractViolation("backward: output must be a scalar, got " + out_value.shape_string());
  }
  const NodeId top = output.id();
  std::vector<Var> adjoint(static_cast<std::size_t>(top) + 1);

  struct RecordingScope {
    Tape& tape;
    bool previous;
    explicit RecordingScope(Tape& t) : tape(t), previous(t.recording_gradient_) {
      tape.recording_gradient_ = true;
    }
    ~RecordingScope() { tape.recording_gradient_ = previous; }
  } scope(*this);

  adjoint[top] = constant(Tensor::scalar(1.0));

  auto accumulate = [&](NodeId target, Var contribution) {
    Var& slot = adjoint[target];
    slot = slot.valid() ? slot + contribution : contribution;
  };

  for (std::int64_t i = top; i >= 0; --i) {
    const NodeId id = static_cast<NodeId>(i);
    if (!adjoint[id].valid()) continue;
    // Pushing new nodes may reallocate nodes_, so copy what is needed.
    const Op kind = nodes_[id].op;
    if (kind == Op::Leaf) continue;
    const std::vector<NodeId> in = nodes_[id].inputs;
    const double scalar = nodes_[id].scalar;
    const std::size_t aux = nodes_[id].aux;
    const Index index = nodes_[id].index;
    const Var g = adjoint[id];
    const Var self(this, id);
    auto needs = [&](std::size_t k) { return nodes_[in[k]].requires_grad; };
    auto input = [&](std::size_t k) { return Var(this, in[k]); };

    switch (kind) {
      case Op::Leaf:
        break;
      case Op::MatMul:
        if (needs(0)) accumulate(in[0], matmul(g, transpose(input(1))));
        if (needs(1)) accumulate(in[1], matmul(transpose(input(0)), g));
        break;
      case Op::Transpose:
        if (needs(0)) accumulate(in[0], transpose(g));
        break;
      case Op::Add:
        if (needs(0)) accumulate(in[0], g);
        if (needs(1)) accumulate(in[1], g);
        break;
      case Op::Sub:
        if (needs(0)) accumulate(in[0], g);
        if (needs(1)) accumulate(in[1], -g);
        break;
      case Op::Mul:
        if (needs(0)) accumulate(in[0], g * input(1));
        if (needs(1)) accumulate(in[1], g * input(0));
        break;
      case Op::Scale:
        if (needs(0)) accumulate(in[0], scale(g, scalar));
        break;
      case Op::AddConst:
        if (needs(0)) accumulate(in[0], g);
        break;
      case Op::MaskMul: {
        const auto mask = nodes_[id].mask;
        if (needs(0)) accumulate(in[0], mask_mul(g, *mask));
        break;
      }
      case Op::LeakyRelu: {
        Tensor slope_mask =
            map_values(value(in[0]), [=](double x) { return x > 0.0 ? 1.0 : scalar; });
        if (needs(0)) accumulate(in[0], mask_mul(g, std::move(slope_mask)));
        break;
      }
      case Op::Relu: {
        Tensor step = map_values(value(in[0]), [](double x) { return x > 0.0 ? 1.0 : 0.0; });
        if (needs(0)) accumulate(in[0], mask_mul(g, std::move(step)));
        break;
      }
      case Op::Elu: {
        // d/dx elu = 1 for x > 0 and elu(x) + 1 otherwise.
        Tensor neg = map_values(value(in[0]), [](double x) { return x > 0.0 ? 0.0 : 1.0; });
        if (needs(0)) accumulate(in[0], g * add_const(mask_mul(self, std::move(neg)), 1.0));
        break;
      }
      case Op::Exp:
        if (needs(0)) accumulate(in[0], g * self);
        break;
      case Op::Log:
        if (needs(0)) accumulate(in[0], g * pow(input(0), -1.0));
        break;
      case Op::Pow:
        if (needs(0)) accumulate(in[0], g * scale(pow(input(0), scalar - 1.0), scalar));
        break;
      case Op::RowSum:
        if (needs(0)) accumulate(in[0], broadcast_cols(g, value(in[0]).cols()));
        break;
      case Op::BroadcastCols:
        if (needs(0)) accumulate(in[0], row_sum(g));
        break;
      case Op::Sum:
        if (needs(0)) accumulate(in[0], fill(g, value(in[0]).rows(), value(in[0]).cols()));
        break;
      case Op::Fill:
        if (needs(0)) accumulate(in[0], sum(g));
        break;
      case Op::GatherRows:
        if (needs(0)) accumulate(in[0], scatter_add_rows(g, index, value(in[0]).rows()));
        break;
      case Op::ScatterAddRows:
        if (needs(0)) accumulate(in[0], gather_rows(g, index));
        break;
      case Op::SegmentSoftmax:
        // y * (g - sum_{segment}(y * g))
        if (needs(0)) {
          Var weighted = g * self;
          Var per_segment = gather_rows(scatter_add_rows(weighted, index, aux), index);
          accumulate(in[0], self * (g - per_segment));
        }
        break;
      case Op::RowScale:
        if (needs(0)) accumulate(in[0], row_scale(g, input(1)));
        if (needs(1)) accumulate(in[1], row_sum(g * input(0)));
        break;
      case Op::ConcatCols: {
        std::size_t offset = 0;
        for (std::size_t k = 0; k < in.size(); ++k) {
          const std::size_t width = value(in[k]).cols();
          if (needs(k)) accumulate(in[k], slice_cols(g, offset, width));
          offset += width;
        }
        break;
      }
      case Op::SliceCols:
        if (needs(0)) accumulate(in[0], embed_cols(g, aux, value(in[0]).cols()));
        break;
      case Op::EmbedCols:
        if (needs(0)) accumulate(in[0], slice_cols(g, aux, value(in[0]).cols()));
        break;
      case Op::Reshape:
        if (needs(0)) accumulate(in[0], reshape(g, value(in[0]).rows(), value(in[0]).cols()));
        break;
    }
  }

  std::vector<Var> result;
  result.reserve(wrt.size());
  for (const Var& w : wrt) {
    if (w.tape() != this) throw ContractViolation("grad: variable lives on another tape");
    if (w.id() <= top && adjoint[w.id()].valid()) {
      result.push_back(adjoint[w.id()]);
    } else {
      const Tensor& v = value(w.id());
      result.push_back(constant(Tensor::zeros(v.rows(), v.cols())));
    }
  }
  return result;
}

std::vector<Var> Tape::grad(Var output, std::span<const Var> wrt) {
  return reverse_sweep(output, wrt);
}

GradientMap Tape::backward(Var output) {
  const std::size_t mark = nodes_.size();
  const std::size_t gradient_mark = gradient_nodes_;
  std::vector<Var> leaves;
  for (std::size_t i = 0; i < mark; ++i) {
    if (nodes_[i].op == Op::Leaf && nodes_[i].requires_grad) {
      leaves.emplace_back(this, static_cast<NodeId>(i));
    }
  }
  GradientMap result;
  try {
    const std::vector<Var> grads = reverse_sweep(output, leaves);
    for (std::size_t k = 0; k < leaves.size(); ++k) {
      result.emplace(leaves[k].id(), grads[k].value());
    }
  } catch (...) {
    nodes_.resize(mark);
    gradient_nodes_ = gradient_mark;
    throw;
  }
  nodes_.resize(mark);
  gradient_nodes_ = gradient_mark;
  return result;
}

GradientMap Tape::backward_through_gradients(Var outer_output) {
  if (outer_output.tape() != this || !nodes_.at(outer_output.id()).from_gradient) {
    throw ContractViolation(
        "backward_through_gradients: output does not depend on any recorded gradient");
  }
  return backward(outer_output);
}

}  // namespace pagnn
