#pragma once

// Reverse-mode automatic differentiation over dense tensors.
//
// Every primitive appends a node to a Tape. Gradients are themselves built
// out of tape primitives, so a gradient returned by Tape::grad() is an
// ordinary differentiable Var and can feed a second backward sweep. That
// second sweep is what produces exact meta-gradients through an unrolled
// inner optimization loop.

#include <cstdint>
#include <deque>
#include <initializer_list>
#include <map>
#include <memory>
#include <span>
#include <stdexcept>
#include <vector>

#include "pagnn/tensor.hpp"

namespace pagnn {

class ContractViolation : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

using NodeId = std::uint32_t;
using Index = std::shared_ptr<const std::vector<std::uint32_t>>;

Index make_index(std::vector<std::uint32_t> ids);

enum class Op : std::uint8_t {
  Leaf,
  MatMul,
  Transpose,
  Add,
  Sub,
  Mul,
  Scale,
  AddConst,
  MaskMul,
  LeakyRelu,
  Relu,
  Elu,
  Exp,
  Log,
  Pow,
  RowSum,
  BroadcastCols,
  Sum,
  Fill,
  GatherRows,
  ScatterAddRows,
  SegmentSoftmax,
  RowScale,
  ConcatCols,
  SliceCols,
  EmbedCols,
  Reshape,
};

const char* op_name(Op op);

class Tape;
class Var;

namespace detail {
struct NodeAttrs {
  double scalar = 0.0;
  std::size_t aux = 0;
  std::size_t aux2 = 0;
  Index index;
  std::shared_ptr<const Tensor> mask;
};
Var record(Op op, std::initializer_list<Var> inputs, Tensor value, NodeAttrs attrs = {});
Var record_n(Op op, std::span<const Var> inputs, Tensor value, NodeAttrs attrs = {});
}  // namespace detail

// Handle to a node on a tape. Cheap to copy; the tape must outlive it.
class Var {
 public:
  Var() = default;
  Var(Tape* tape, NodeId id) : tape_(tape), id_(id) {}

  Tape* tape() const { return tape_; }
  NodeId id() const { return id_; }
  bool valid() const { return tape_ != nullptr; }
  const Tensor& value() const;
  bool requires_grad() const;

 private:
  Tape* tape_ = nullptr;
  NodeId id_ = 0;
};

// Gradient of a scalar output with respect to tape leaves, keyed by leaf id.
using GradientMap = std::map<NodeId, Tensor>;

class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  // Leaf node. Parameters use requires_grad = true; inputs and constants false.
  Var leaf(Tensor value, bool requires_grad = true);
  Var constant(Tensor value) { return leaf(std::move(value), false); }

  std::size_t size() const { return nodes_.size(); }
  const Tensor& value(NodeId id) const { return nodes_.at(id).value; }
  Op op(NodeId id) const { return nodes_.at(id).op; }
  std::span<const NodeId> inputs(NodeId id) const { return nodes_.at(id).inputs; }
  bool requires_grad(NodeId id) const { return nodes_.at(id).requires_grad; }

  // Recorded gradients of a scalar output w.r.t. `wrt`. The result lives on
  // this tape and is differentiable again. Inputs the output does not depend
  // on receive a zero constant.
  std::vector<Var> grad(Var output, std::span<const Var> wrt);

  // Plain reverse sweep: gradient w.r.t. every leaf that requires grad.
  // Leaves the tape unchanged.
  GradientMap backward(Var output);

  // Reverse sweep for an objective assembled from recorded gradients.
  // Returns the full second-order derivative w.r.t. the original leaves.
  GradientMap backward_through_gradients(Var outer_output);

  // Number of nodes created by grad() that are still on the tape.
  std::size_t recorded_gradient_nodes() const { return gradient_nodes_; }

 private:
  struct Node {
    Op op = Op::Leaf;
    std::vector<NodeId> inputs;
    Tensor value;
    double scalar = 0.0;       // slope, scale, exponent or added constant
    std::size_t aux = 0;       // row count, column offset or segment count
    std::size_t aux2 = 0;      // total column count for EmbedCols
    Index index;               // gather/scatter/segment indices
    std::shared_ptr<const Tensor> mask;  // MaskMul constant
    bool requires_grad = false;
    bool from_gradient = false;  // created by grad() or computed from such nodes
  };

  Var push(Node node);
  std::vector<Var> reverse_sweep(Var output, std::span<const Var> wrt);

  std::deque<Node> nodes_;  // stable references across push_back
  bool recording_gradient_ = false;
  std::size_t gradient_nodes_ = 0;

  friend Var detail::record(Op, std::initializer_list<Var>, Tensor, detail::NodeAttrs);
  friend Var detail::record_n(Op, std::span<const Var>, Tensor, detail::NodeAttrs);
};

// Primitives. All inputs must live on the same tape.
Var matmul(Var a, Var b);
Var transpose(Var a);
Var operator+(Var a, Var b);
Var operator-(Var a, Var b);
Var operator*(Var a, Var b);  // elementwise
Var operator-(Var a);
Var scale(Var a, double factor);
Var add_const(Var a, double c);
Var mask_mul(Var a, Tensor mask);
Var leaky_relu(Var a, double slope);
Var relu(Var a);
Var elu(Var a);
Var exp(Var a);
Var log(Var a);
Var pow(Var a, double exponent);
Var row_sum(Var a);                          // r x c -> r x 1
Var broadcast_cols(Var a, std::size_t cols);  // r x 1 -> r x c
Var sum(Var a);                              // -> 1 x 1
Var fill(Var a, std::size_t rows, std::size_t cols);  // 1 x 1 -> rows x cols
Var gather_rows(Var a, Index rows);
Var scatter_add_rows(Var a, Index rows, std::size_t n_rows);
// Softmax over a column of scores, independently within each segment.
Var segment_softmax(Var scores, Index segments, std::size_t n_segments);
Var row_scale(Var a, Var s);  // row r of a multiplied by s[r]
Var concat_cols(std::span<const Var> parts);
Var slice_cols(Var a, std::size_t begin, std::size_t count);
Var embed_cols(Var a, std::size_t begin, std::size_t total_cols);
Var reshape(Var a, std::size_t rows, std::size_t cols);

}  // namespace pagnn
