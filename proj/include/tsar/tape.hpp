#pragma once

// Reverse-mode autodiff over a flat, append-only record of operations.
//
// Every op appends a node holding its result. Backward walks the record in
// reverse; with create_graph the gradient computations are themselves
// appended as differentiable nodes, so gradients of gradients work by running
// backward again over the grown tape.

#include <cstdint>
#include <deque>
#include <memory>
#include <span>
#include <vector>

#include "tsar/tensor.hpp"

namespace tsar {

enum class OpKind : std::uint8_t {
  kLeaf,
  kConstant,
  kAdd,
  kSub,
  kMul,
  kMulConst,
  kAffine,
  kExp,
  kLog,
  kPow,
  kRelu,
  kSigmoid,
  kConv2d,
  kConv2dGradInput,
  kConv2dGradWeight,
  kMaxPool,
  kPoolGather,
  kPoolScatter,
  kMatMul,
  kTranspose,
  kReshape,
  kSumMiddle,
  kBroadcastMiddle,
};

const char* op_name(OpKind kind);

struct OpAttrs {
  double a = 0.0;
  double b = 0.0;
  // Sum/broadcast over a (outer, middle, inner) view of the data.
  std::int64_t outer = 0;
  std::int64_t inner = 0;
  Shape shape;  // target shape for reshape/broadcast/scatter/grad ops
  std::shared_ptr<const Tensor> constant;
  // Maxpool argmax indices (flat, into the pooled input); shared with the
  // gather/scatter nodes emitted by its backward.
  std::shared_ptr<const std::vector<std::int64_t>> indices;
};

struct Node {
  OpKind kind = OpKind::kConstant;
  std::vector<int> inputs;
  OpAttrs attrs;
  Tensor value;
  bool requires_grad = false;
};

class Tape;

// Handle to a node on a tape. Cheap to copy; valid while the tape lives.
class Var {
 public:
  Var() = default;
  Var(Tape* tape, int id) : tape_(tape), id_(id) {}

  Tape* tape() const noexcept { return tape_; }
  int id() const noexcept { return id_; }
  bool valid() const noexcept { return tape_ != nullptr; }

  const Tensor& value() const;
  const Shape& shape() const { return value().shape(); }
  bool requires_grad() const;

 private:
  Tape* tape_ = nullptr;
  int id_ = -1;
};

struct GradMode {
  bool create_graph = false;
};

class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  // A differentiable input. Leaves created with requires_grad are the
  // tape's roots.
  Var leaf(Tensor value, bool requires_grad = true);
  Var constant(Tensor value);

  const Node& node(int id) const { return nodes_.at(static_cast<std::size_t>(id)); }
  int size() const noexcept { return static_cast<int>(nodes_.size()); }
  const std::vector<int>& roots() const noexcept { return roots_; }
  int differentiable_count() const noexcept { return differentiable_count_; }

  // When false, new nodes never require grad (used for no-graph backward
  // and for inference).
  bool recording() const noexcept { return recording_; }
  void set_recording(bool on) noexcept { recording_ = on; }

  // Strict mode rejects non-finite inputs to every op.
  bool strict() const noexcept { return strict_; }
  void set_strict(bool on) noexcept { strict_ = on; }

  // Recomputes every non-leaf node from its recorded inputs. Returns true
  // when every recomputed value equals the stored one bit for bit.
  bool replay();

  // Appends an op node. Used by the op functions in ops.hpp.
  Var push(OpKind kind, std::vector<int> inputs, OpAttrs attrs, Tensor value);

  // Backward internals: in-place gradient accumulation and freeing of
  // consumed gradient buffers.
  Tensor& mutable_value(int id);
  void drop_value(int id);

 private:
  std::deque<Node> nodes_;
  std::vector<int> roots_;
  int differentiable_count_ = 0;
  bool recording_ = true;
  bool strict_ = false;
};

// RAII: disables recording on a tape for the lifetime of the guard.
class NoGradGuard {
 public:
  explicit NoGradGuard(Tape& tape) : tape_(tape), prev_(tape.recording()) { tape.set_recording(false); }
  ~NoGradGuard() { tape_.set_recording(prev_); }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  Tape& tape_;
  bool prev_;
};

struct GradResult {
  std::vector<Var> grads;        // one per requested target, same order
  std::vector<bool> detached;    // target had no path to the loss
  bool any_detached = false;
};

// d loss / d target for each target. loss must hold exactly one element.
GradResult grad(Var loss, std::span<const Var> targets, GradMode mode = {});

// Gradients with respect to every root of the tape, in root order.
GradResult backward(Tape& tape, Var loss, GradMode mode = {});

// Forward recomputation of one node kind from input values. Shared by op
// construction and replay so both follow one code path.
Tensor compute_op(OpKind kind, std::span<const Tensor* const> inputs, OpAttrs& attrs);

}  // namespace tsar
