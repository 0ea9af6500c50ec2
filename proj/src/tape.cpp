#include "tsar/tape.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <functional>
#include <limits>
#include <optional>

#include "kernels.hpp"
#include "tsar/error.hpp"
#include "tsar/ops.hpp"
#include "tsar/testing.hpp"

namespace tsar {
namespace {

OpKind g_fault_op = OpKind::kLeaf;  // kLeaf means no fault injected

[[noreturn]] void shape_error(OpKind kind, const std::string& detail) {
  fail(ErrorKind::kShape, std::string(op_name(kind)) + ": " + detail);
}

void require_same(OpKind kind, const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) {
    shape_error(kind, "operand shapes differ " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  }
}

void require_rank(OpKind kind, const Tensor& t, std::size_t rank, const char* what) {
  if (t.rank() != rank) {
    shape_error(kind, std::string(what) + " must have rank " + std::to_string(rank) + ", got " + shape_str(t.shape()));
  }
}

template <typename F>
Tensor map1(const Tensor& a, F f) {
  Tensor out(a.shape());
  const double* ap = a.ptr();
  double* op = out.ptr();
  for (std::int64_t i = 0; i < a.numel(); ++i) op[i] = f(ap[i]);
  return out;
}

template <typename F>
Tensor map2(const Tensor& a, const Tensor& b, F f) {
  Tensor out(a.shape());
  const double* ap = a.ptr();
  const double* bp = b.ptr();
  double* op = out.ptr();
  for (std::int64_t i = 0; i < a.numel(); ++i) op[i] = f(ap[i], bp[i]);
  return out;
}

void check_conv(OpKind kind, const Shape& x, const Shape& w) {
  if (x.size() != 4) shape_error(kind, "input must be NCHW, got " + shape_str(x));
  if (w.size() != 4) shape_error(kind, "kernel must be OIHW, got " + shape_str(w));
  if (x[1] != w[1]) {
    shape_error(kind, "input channels " + std::to_string(x[1]) + " != kernel in-channels " + std::to_string(w[1]) +
                          " (input " + shape_str(x) + ", kernel " + shape_str(w) + ")");
  }
  if (x[2] < w[2] || x[3] < w[3]) {
    shape_error(kind, "spatial dims " + shape_str(x) + " smaller than kernel " + shape_str(w));
  }
}

Shape conv_out_shape(const Shape& x, const Shape& w) { return Shape{x[0], w[0], x[2] - w[2] + 1, x[3] - w[3] + 1}; }

}  // namespace

const char* op_name(OpKind kind) {
  switch (kind) {
    case OpKind::kLeaf: return "leaf";
    case OpKind::kConstant: return "constant";
    case OpKind::kAdd: return "add";
    case OpKind::kSub: return "sub";
    case OpKind::kMul: return "elementwise_mul";
    case OpKind::kMulConst: return "mul_const";
    case OpKind::kAffine: return "affine";
    case OpKind::kExp: return "exp";
    case OpKind::kLog: return "log";
    case OpKind::kPow: return "pow";
    case OpKind::kRelu: return "relu";
    case OpKind::kSigmoid: return "sigmoid";
    case OpKind::kConv2d: return "conv2d";
    case OpKind::kConv2dGradInput: return "conv2d_grad_input";
    case OpKind::kConv2dGradWeight: return "conv2d_grad_weight";
    case OpKind::kMaxPool: return "maxpool2d";
    case OpKind::kPoolGather: return "pool_gather";
    case OpKind::kPoolScatter: return "pool_scatter";
    case OpKind::kMatMul: return "matmul";
    case OpKind::kTranspose: return "transpose";
    case OpKind::kReshape: return "reshape";
    case OpKind::kSumMiddle: return "sum_middle";
    case OpKind::kBroadcastMiddle: return "broadcast_middle";
  }
  return "unknown";
}

namespace testing {
void inject_backward_fault(OpKind kind) { g_fault_op = kind; }
void clear_backward_fault() { g_fault_op = OpKind::kLeaf; }
}  // namespace testing

const Tensor& Var::value() const { return tape_->node(id_).value; }
bool Var::requires_grad() const { return tape_->node(id_).requires_grad; }

Var Tape::leaf(Tensor value, bool requires_grad) {
  if (strict_ && !value.all_finite()) fail(ErrorKind::kNumeric, "leaf: non-finite value");
  Node n;
  n.kind = OpKind::kLeaf;
  n.value = std::move(value);
  n.requires_grad = requires_grad;
  nodes_.push_back(std::move(n));
  const int id = size() - 1;
  if (requires_grad) {
    roots_.push_back(id);
    ++differentiable_count_;
  }
  return Var(this, id);
}

Var Tape::constant(Tensor value) {
  Node n;
  n.kind = OpKind::kConstant;
  n.value = std::move(value);
  nodes_.push_back(std::move(n));
  return Var(this, size() - 1);
}

Tensor& Tape::mutable_value(int id) { return nodes_.at(static_cast<std::size_t>(id)).value; }

void Tape::drop_value(int id) { nodes_.at(static_cast<std::size_t>(id)).value = Tensor(); }

Var Tape::push(OpKind kind, std::vector<int> inputs, OpAttrs attrs, Tensor value) {
  Node n;
  n.kind = kind;
  n.requires_grad = false;
  if (recording_) {
    for (int id : inputs) n.requires_grad = n.requires_grad || node(id).requires_grad;
  }
  n.inputs = std::move(inputs);
  n.attrs = std::move(attrs);
  n.value = std::move(value);
  if (n.requires_grad) ++differentiable_count_;
  nodes_.push_back(std::move(n));
  return Var(this, size() - 1);
}

bool Tape::replay() {
  bool identical = true;
  std::vector<const Tensor*> in;
  for (auto& n : nodes_) {
    if (n.kind == OpKind::kLeaf || n.kind == OpKind::kConstant) continue;
    in.clear();
    for (int id : n.inputs) in.push_back(&node(id).value);
    Tensor v = compute_op(n.kind, in, n.attrs);
    if (v.shape() != n.value.shape() ||
        std::memcmp(v.ptr(), n.value.ptr(), sizeof(double) * static_cast<std::size_t>(v.numel())) != 0) {
      identical = false;
    }
    n.value = std::move(v);
  }
  return identical;
}

Tensor compute_op(OpKind kind, std::span<const Tensor* const> in, OpAttrs& attrs) {
  switch (kind) {
    case OpKind::kLeaf:
    case OpKind::kConstant:
      fail(ErrorKind::kInvalidArgument, "compute_op: leaves carry no computation");
    case OpKind::kAdd:
      require_same(kind, *in[0], *in[1]);
      return map2(*in[0], *in[1], [](double a, double b) { return a + b; });
    case OpKind::kSub:
      require_same(kind, *in[0], *in[1]);
      return map2(*in[0], *in[1], [](double a, double b) { return a - b; });
    case OpKind::kMul:
      require_same(kind, *in[0], *in[1]);
      return map2(*in[0], *in[1], [](double a, double b) { return a * b; });
    case OpKind::kMulConst:
      require_same(kind, *in[0], *attrs.constant);
      return map2(*in[0], *attrs.constant, [](double a, double b) { return a * b; });
    case OpKind::kAffine: {
      const double s = attrs.a, t = attrs.b;
      return map1(*in[0], [s, t](double a) { return s * a + t; });
    }
    case OpKind::kExp:
      return map1(*in[0], [](double a) { return std::exp(a); });
    case OpKind::kLog:
      return map1(*in[0], [](double a) { return std::log(a); });
    case OpKind::kPow: {
      const double p = attrs.a;
      if (p == -0.5) return map1(*in[0], [](double a) { return 1.0 / std::sqrt(a); });
      if (p == 2.0) return map1(*in[0], [](double a) { return a * a; });
      return map1(*in[0], [p](double a) { return std::pow(a, p); });
    }
    case OpKind::kRelu:
      return map1(*in[0], [](double a) { return a > 0.0 ? a : 0.0; });
    case OpKind::kSigmoid:
      return map1(*in[0], [](double a) {
        // Clamped so saturated inputs still land strictly inside (0,1).
        constexpr double kLo = std::numeric_limits<double>::min();
        constexpr double kHi = 1.0 - std::numeric_limits<double>::epsilon() / 2.0;
        double s;
        if (a >= 0.0) {
          s = 1.0 / (1.0 + std::exp(-a));
        } else {
          const double e = std::exp(a);
          s = e / (1.0 + e);
        }
        return std::clamp(s, kLo, kHi);
      });
    case OpKind::kConv2d:
      check_conv(kind, in[0]->shape(), in[1]->shape());
      return kernels::conv2d(*in[0], *in[1]);
    case OpKind::kConv2dGradInput: {
      check_conv(kind, attrs.shape, in[1]->shape());
      const Shape expect = conv_out_shape(attrs.shape, in[1]->shape());
      if (in[0]->shape() != expect) {
        shape_error(kind, "grad_out " + shape_str(in[0]->shape()) + " != expected " + shape_str(expect));
      }
      return kernels::conv2d_grad_input(*in[0], *in[1], attrs.shape);
    }
    case OpKind::kConv2dGradWeight: {
      check_conv(kind, in[0]->shape(), attrs.shape);
      const Shape expect = conv_out_shape(in[0]->shape(), attrs.shape);
      if (in[1]->shape() != expect) {
        shape_error(kind, "grad_out " + shape_str(in[1]->shape()) + " != expected " + shape_str(expect));
      }
      return kernels::conv2d_grad_weight(*in[0], *in[1], attrs.shape);
    }
    case OpKind::kMaxPool: {
      require_rank(kind, *in[0], 4, "input");
      if (in[0]->dim(2) < 2 || in[0]->dim(3) < 2) {
        shape_error(kind, "spatial dims of " + shape_str(in[0]->shape()) + " collapse below 1 after pooling");
      }
      auto idx = std::make_shared<std::vector<std::int64_t>>();
      Tensor out = kernels::maxpool2d(*in[0], *idx);
      attrs.indices = std::move(idx);
      return out;
    }
    case OpKind::kPoolGather: {
      const auto& idx = *attrs.indices;
      Tensor out(attrs.shape);
      if (static_cast<std::int64_t>(idx.size()) != out.numel()) shape_error(kind, "index count mismatch");
      for (std::size_t i = 0; i < idx.size(); ++i) out[static_cast<std::int64_t>(i)] = (*in[0])[idx[i]];
      return out;
    }
    case OpKind::kPoolScatter: {
      const auto& idx = *attrs.indices;
      if (static_cast<std::int64_t>(idx.size()) != in[0]->numel()) shape_error(kind, "index count mismatch");
      Tensor out(attrs.shape);
      for (std::size_t i = 0; i < idx.size(); ++i) out[idx[i]] += (*in[0])[static_cast<std::int64_t>(i)];
      return out;
    }
    case OpKind::kMatMul: {
      require_rank(kind, *in[0], 2, "lhs");
      require_rank(kind, *in[1], 2, "rhs");
      const bool ta = attrs.a != 0.0, tb = attrs.b != 0.0;
      const std::int64_t ka = ta ? in[0]->dim(0) : in[0]->dim(1);
      const std::int64_t kb = tb ? in[1]->dim(1) : in[1]->dim(0);
      if (ka != kb) {
        shape_error(kind, "inner dims differ: " + shape_str(in[0]->shape()) + (ta ? "^T" : "") + " x " +
                              shape_str(in[1]->shape()) + (tb ? "^T" : ""));
      }
      return kernels::matmul(*in[0], *in[1], ta, tb);
    }
    case OpKind::kTranspose: {
      require_rank(kind, *in[0], 2, "input");
      const std::int64_t r = in[0]->dim(0), c = in[0]->dim(1);
      Tensor out(Shape{c, r});
      for (std::int64_t i = 0; i < r; ++i) {
        for (std::int64_t j = 0; j < c; ++j) out[j * r + i] = (*in[0])[i * c + j];
      }
      return out;
    }
    case OpKind::kReshape:
      return in[0]->reshaped(attrs.shape);
    case OpKind::kSumMiddle: {
      const std::int64_t outer = attrs.outer, inner = attrs.inner;
      if (outer <= 0 || inner <= 0 || in[0]->numel() % (outer * inner) != 0) {
        shape_error(kind, "cannot view " + shape_str(in[0]->shape()) + " as (" + std::to_string(outer) + ",*," +
                              std::to_string(inner) + ")");
      }
      const std::int64_t mid = in[0]->numel() / (outer * inner);
      Tensor out(Shape{mid});
      const double* p = in[0]->ptr();
      for (std::int64_t o = 0; o < outer; ++o) {
        for (std::int64_t m = 0; m < mid; ++m) {
          const double* row = p + (o * mid + m) * inner;
          double s = 0.0;
          for (std::int64_t i = 0; i < inner; ++i) s += row[i];
          out[m] += s;
        }
      }
      return out;
    }
    case OpKind::kBroadcastMiddle: {
      const std::int64_t outer = attrs.outer, inner = attrs.inner;
      require_rank(kind, *in[0], 1, "vector");
      const std::int64_t mid = in[0]->dim(0);
      Tensor out(attrs.shape);
      if (out.numel() != outer * mid * inner) {
        shape_error(kind, "target " + shape_str(attrs.shape) + " is not (" + std::to_string(outer) + "," +
                              std::to_string(mid) + "," + std::to_string(inner) + ")");
      }
      double* p = out.ptr();
      for (std::int64_t o = 0; o < outer; ++o) {
        for (std::int64_t m = 0; m < mid; ++m) {
          const double v = (*in[0])[m];
          double* row = p + (o * mid + m) * inner;
          for (std::int64_t i = 0; i < inner; ++i) row[i] = v;
        }
      }
      return out;
    }
  }
  fail(ErrorKind::kInvalidArgument, "compute_op: unknown op");
}

namespace {

// Emits d(loss)/d(input_k) contributions for one node given its upstream
// gradient g. Only inputs flagged in `want` receive contributions.
void backward_rule(Tape& tape, int id, Var g, const std::vector<char>& want,
                   const std::function<void(int, Var)>& emit) {
  const Node& n = tape.node(id);
  auto in = [&](std::size_t k) { return Var(&tape, n.inputs[k]); };
  auto wants = [&](std::size_t k) { return want[static_cast<std::size_t>(n.inputs[k])] != 0; };
  const bool fault = g_fault_op == n.kind;
  switch (n.kind) {
    case OpKind::kLeaf:
    case OpKind::kConstant:
      return;
    case OpKind::kAdd:
      if (wants(0)) emit(n.inputs[0], g);
      if (wants(1)) emit(n.inputs[1], g);
      return;
    case OpKind::kSub:
      if (wants(0)) emit(n.inputs[0], g);
      if (wants(1)) emit(n.inputs[1], ops::neg(g));
      return;
    case OpKind::kMul:
      if (wants(0)) emit(n.inputs[0], ops::mul(g, in(1)));
      if (wants(1)) emit(n.inputs[1], ops::mul(g, in(0)));
      return;
    case OpKind::kMulConst:
      emit(n.inputs[0], ops::mul_const(g, *n.attrs.constant));
      return;
    case OpKind::kAffine:
      emit(n.inputs[0], ops::affine(g, n.attrs.a, 0.0));
      return;
    case OpKind::kExp:
      emit(n.inputs[0], ops::mul(g, Var(&tape, id)));
      return;
    case OpKind::kLog:
      emit(n.inputs[0], ops::mul(g, ops::pow(in(0), -1.0)));
      return;
    case OpKind::kPow: {
      const double p = n.attrs.a;
      Var d = p == 2.0 ? ops::affine(in(0), 2.0, 0.0) : ops::affine(ops::pow(in(0), p - 1.0), p, 0.0);
      emit(n.inputs[0], ops::mul(g, d));
      return;
    }
    case OpKind::kRelu: {
      const Tensor& x = tape.node(n.inputs[0]).value;
      Tensor mask(x.shape());
      for (std::int64_t i = 0; i < x.numel(); ++i) mask[i] = x[i] > 0.0 ? 1.0 : 0.0;
      emit(n.inputs[0], ops::mul_const(g, std::move(mask)));
      return;
    }
    case OpKind::kSigmoid: {
      Var s(&tape, id);
      emit(n.inputs[0], ops::mul(g, ops::mul(s, ops::affine(s, -1.0, 1.0))));
      return;
    }
    case OpKind::kConv2d: {
      if (wants(0)) emit(n.inputs[0], ops::conv2d_grad_input(g, in(1), in(0).shape()));
      if (wants(1)) {
        Var gw = ops::conv2d_grad_weight(in(0), g, in(1).shape());
        emit(n.inputs[1], fault ? ops::affine(gw, 1.5, 0.0) : gw);
      }
      return;
    }
    case OpKind::kConv2dGradInput: {
      // z = conv2d_grad_input(gy, w)
      if (wants(0)) emit(n.inputs[0], ops::conv2d(g, in(1)));
      if (wants(1)) emit(n.inputs[1], ops::conv2d_grad_weight(g, in(0), in(1).shape()));
      return;
    }
    case OpKind::kConv2dGradWeight: {
      // z = conv2d_grad_weight(x, gy)
      if (wants(0)) emit(n.inputs[0], ops::conv2d_grad_input(in(1), g, in(0).shape()));
      if (wants(1)) emit(n.inputs[1], ops::conv2d(in(0), g));
      return;
    }
    case OpKind::kMaxPool:
      emit(n.inputs[0], ops::pool_scatter(g, n.attrs.indices, in(0).shape()));
      return;
    case OpKind::kPoolGather:
      emit(n.inputs[0], ops::pool_scatter(g, n.attrs.indices, in(0).shape()));
      return;
    case OpKind::kPoolScatter:
      emit(n.inputs[0], ops::pool_gather(g, n.attrs.indices, in(0).shape()));
      return;
    case OpKind::kMatMul: {
      const bool ta = n.attrs.a != 0.0, tb = n.attrs.b != 0.0;
      auto mm = [&](Var a, Var b, bool x, bool y) {
        OpAttrs at;
        at.a = x ? 1.0 : 0.0;
        at.b = y ? 1.0 : 0.0;
        const Tensor* ins[2] = {&a.value(), &b.value()};
        Tensor v = compute_op(OpKind::kMatMul, ins, at);
        return tape.push(OpKind::kMatMul, {a.id(), b.id()}, std::move(at), std::move(v));
      };
      Var a = in(0), b = in(1);
      if (wants(0)) {
        Var ga = !ta ? (!tb ? mm(g, b, false, true) : mm(g, b, false, false))
                     : (!tb ? mm(b, g, false, true) : mm(b, g, true, true));
        emit(n.inputs[0], ga);
      }
      if (wants(1)) {
        Var gb = !tb ? (!ta ? mm(a, g, true, false) : mm(a, g, false, false))
                     : (!ta ? mm(g, a, true, false) : mm(g, a, true, true));
        emit(n.inputs[1], gb);
      }
      return;
    }
    case OpKind::kTranspose:
      emit(n.inputs[0], ops::transpose(g));
      return;
    case OpKind::kReshape:
      emit(n.inputs[0], ops::reshape(g, in(0).shape()));
      return;
    case OpKind::kSumMiddle:
      emit(n.inputs[0], ops::broadcast_middle(g, n.attrs.outer, n.attrs.inner, in(0).shape()));
      return;
    case OpKind::kBroadcastMiddle:
      emit(n.inputs[0], ops::sum_middle(g, n.attrs.outer, in(0).value().numel(), n.attrs.inner));
      return;
  }
}

}  // namespace

GradResult grad(Var loss, std::span<const Var> targets, GradMode mode) {
  Tape& tape = *loss.tape();
  if (loss.value().numel() != 1) {
    fail(ErrorKind::kShape, "backward: loss must be a scalar, got shape " + shape_str(loss.shape()));
  }
  const int n_nodes = tape.size();
  GradResult result;
  result.grads.resize(targets.size());
  result.detached.assign(targets.size(), false);

  // Nodes that depend on some differentiable target.
  std::vector<char> relevant(static_cast<std::size_t>(n_nodes), 0);
  int lo = n_nodes;
  for (const Var& t : targets) {
    if (t.tape() != &tape) fail(ErrorKind::kInvalidArgument, "backward: target lives on another tape");
    if (t.requires_grad()) {
      relevant[static_cast<std::size_t>(t.id())] = 1;
      lo = std::min(lo, t.id());
    }
  }
  for (int i = lo; i <= loss.id(); ++i) {
    const Node& n = tape.node(i);
    if (relevant[static_cast<std::size_t>(i)] || !n.requires_grad) continue;
    for (int in : n.inputs) {
      if (relevant[static_cast<std::size_t>(in)]) {
        relevant[static_cast<std::size_t>(i)] = 1;
        break;
      }
    }
  }

  std::optional<NoGradGuard> guard;
  if (!mode.create_graph) guard.emplace(tape);

  std::vector<int> grads(static_cast<std::size_t>(n_nodes), -1);
  std::vector<char> is_target(static_cast<std::size_t>(n_nodes), 0);
  for (const Var& t : targets) is_target[static_cast<std::size_t>(t.id())] = 1;

  // Without create_graph every gradient node is a throwaway buffer: each is
  // owned by at most one slot, accumulated in place, and freed once consumed.
  const bool transient = !mode.create_graph;
  const int first_new = tape.size();
  std::vector<char> owned;
  auto is_owned = [&](int id) {
    const auto k = static_cast<std::size_t>(id - first_new);
    return id >= first_new && k < owned.size() && owned[k];
  };
  auto set_owned = [&](int id, bool on) {
    if (id < first_new) return;
    const auto k = static_cast<std::size_t>(id - first_new);
    if (owned.size() <= k) owned.resize(k + 1, 0);
    owned[k] = on ? 1 : 0;
  };
  int current = -1;

  auto emit = [&](int input, Var contrib) {
    int& slot = grads[static_cast<std::size_t>(input)];
    if (!transient) {
      slot = slot < 0 ? contrib.id() : ops::add(Var(&tape, slot), contrib).id();
      return;
    }
    if (slot < 0) {
      if (contrib.id() < first_new || contrib.id() == current || is_owned(contrib.id())) {
        contrib = tape.constant(contrib.value());
      }
      slot = contrib.id();
      set_owned(slot, true);
      return;
    }
    Tensor& acc = tape.mutable_value(slot);
    if (acc.shape() != contrib.shape()) {
      fail(ErrorKind::kShape, "backward: gradient shape mismatch at node " + std::to_string(input));
    }
    const double* c = contrib.value().ptr();
    double* a = acc.ptr();
    for (std::int64_t i = 0; i < acc.numel(); ++i) a[i] += c[i];
  };

  if (relevant[static_cast<std::size_t>(loss.id())]) {
    grads[static_cast<std::size_t>(loss.id())] = tape.constant(Tensor(loss.shape(), 1.0)).id();
    set_owned(grads[static_cast<std::size_t>(loss.id())], true);
    for (int i = loss.id(); i >= lo; --i) {
      const int gi = grads[static_cast<std::size_t>(i)];
      if (gi < 0 || !relevant[static_cast<std::size_t>(i)]) continue;
      const int step_start = tape.size();
      current = gi;
      backward_rule(tape, i, Var(&tape, gi), relevant, emit);
      current = -1;
      if (is_target[static_cast<std::size_t>(i)]) continue;
      grads[static_cast<std::size_t>(i)] = -1;
      if (transient) {
        set_owned(gi, false);
        tape.drop_value(gi);
        for (int t = step_start; t < tape.size(); ++t) {
          if (!is_owned(t)) tape.drop_value(t);
        }
      }
    }
  }

  for (std::size_t k = 0; k < targets.size(); ++k) {
    const int gi = grads[static_cast<std::size_t>(targets[k].id())];
    if (gi < 0) {
      result.detached[k] = true;
      result.any_detached = true;
      result.grads[k] = tape.constant(Tensor(targets[k].shape()));
    } else {
      result.grads[k] = Var(&tape, gi);
    }
  }
  return result;
}

GradResult backward(Tape& tape, Var loss, GradMode mode) {
  std::vector<Var> roots;
  roots.reserve(tape.roots().size());
  for (int id : tape.roots()) roots.emplace_back(&tape, id);
  return grad(loss, roots, mode);
}

}  // namespace tsar
