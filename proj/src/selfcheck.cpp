#include "tsar/selfcheck.hpp"

#include <chrono>
#include <cmath>
#include <random>

#include "tsar/error.hpp"
#include "tsar/meta.hpp"
#include "tsar/ops.hpp"
#include "tsar/testing.hpp"

namespace tsar {

namespace {

// 0.5 t'At - b't on a 2-vector.
struct Quadratic {
  double a[4];
  double b[2];

  Var operator()(Var theta) const {
    Tape& tape = *theta.tape();
    Var at = ops::matmul(ops::reshape(theta, Shape{1, 2}), tape.constant(Tensor(Shape{2, 2}, {a[0], a[1], a[2], a[3]})));
    Var quad = ops::affine(ops::sum(ops::mul(ops::reshape(at, Shape{2}), theta)), 0.5, 0.0);
    return ops::sub(quad, ops::sum(ops::mul_const(theta, Tensor(Shape{2}, {b[0], b[1]}))));
  }
  double value(const double t[2]) const {
    const double at0 = a[0] * t[0] + a[2] * t[1], at1 = a[1] * t[0] + a[3] * t[1];
    return 0.5 * (at0 * t[0] + at1 * t[1]) - b[0] * t[0] - b[1] * t[1];
  }
  void gradient(const double t[2], double g[2]) const {
    g[0] = a[0] * t[0] + a[1] * t[1] - b[0];
    g[1] = a[2] * t[0] + a[3] * t[1] - b[1];
  }
};

std::vector<double> toy_meta_grad(const Quadratic& inner, const Quadratic& outer, const double t0[2], int steps,
                                  double lr, MetaOrder order) {
  Tape tape;
  Var theta = tape.leaf(Tensor(Shape{2}, {t0[0], t0[1]}));
  const Var th0[1] = {theta};
  const Unrolled u = unroll(th0, {true}, [&](std::span<const Var> th, int) { return inner(th[0]); }, steps, lr,
                            order == MetaOrder::kSecond);
  const std::vector<Tensor> g = meta_gradient(th0, u, outer(u.theta[0]), order);
  return {g[0][0], g[0][1]};
}

OpKind op_of(PrimitiveKind k) {
  if (k == PrimitiveKind::kConv2d) return OpKind::kConv2d;
  fail(ErrorKind::kInvalidArgument, std::string("fault injection is only wired into conv2d, not ") + primitive_name(k));
}

}  // namespace

CheckTolerance check_tolerance(CheckPrecision p) {
  return p == CheckPrecision::kF64 ? CheckTolerance{1e-5, 1e-4} : CheckTolerance{4e-3, 1e-2};
}

bool SelfCheckReport::passed() const {
  for (const CheckRow& r : rows)
    if (!r.passed) return false;
  return !rows.empty();
}

PrimitiveKind parse_primitive(const std::string& name) {
  for (PrimitiveKind k : all_primitives())
    if (name == primitive_name(k)) return k;
  fail(ErrorKind::kInvalidArgument, "unknown primitive '" + name + "'");
}

SelfCheckReport run_self_checks(int instances, std::uint64_t seed, CheckPrecision precision,
                                std::optional<PrimitiveKind> fault) {
  if (instances < 1) fail(ErrorKind::kInvalidArgument, "instances must be >= 1");
  const auto start = std::chrono::steady_clock::now();
  const CheckTolerance tol = check_tolerance(precision);
  if (fault) testing::inject_backward_fault(op_of(*fault));
  SelfCheckReport report;
  std::mt19937_64 rng(seed);
  try {
    for (PrimitiveKind kind : all_primitives()) {
      CheckRow row{primitive_name(kind), instances, 0.0, tol.max_rel_error, false};
      for (int i = 0; i < instances; ++i) {
        const GradCase c = random_primitive_case(kind, rng);
        const double e = precision == CheckPrecision::kF64 ? grad_check(c.fn, c.params, tol.eps)
                                                           : grad_check_f32(c.fn, c.params, tol.eps);
        row.worst = std::max(row.worst, e);
      }
      row.passed = row.worst < row.threshold;
      report.rows.push_back(row);
    }
  } catch (...) {
    testing::clear_backward_fault();
    throw;
  }
  testing::clear_backward_fault();

  const Quadratic inner{{2.0, 0.5, 0.5, 1.0}, {0.3, -0.2}};
  const Quadratic outer{{1.0, -0.3, -0.3, 3.0}, {-0.5, 0.4}};
  const double lr = 0.1, h = 1e-5;
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  CheckRow second{"meta_gradient_second_order", 0, 0.0, 1e-5, false};
  CheckRow first{"meta_gradient_first_order_gap", 0, 0.0, 1e-12, false};
  for (int i = 0; i < instances; ++i) {
    const double t0[2] = {u(rng), u(rng)};
    for (int steps = 1; steps <= 3; ++steps) {
      const auto objective = [&](const double t[2]) {
        double th[2] = {t[0], t[1]};
        for (int k = 0; k < steps; ++k) {
          double g[2];
          inner.gradient(th, g);
          th[0] -= lr * g[0];
          th[1] -= lr * g[1];
        }
        return outer.value(th);
      };
      const std::vector<double> g = toy_meta_grad(inner, outer, t0, steps, lr, MetaOrder::kSecond);
      for (int j = 0; j < 2; ++j) {
        double up[2] = {t0[0], t0[1]}, down[2] = {t0[0], t0[1]};
        up[j] += h;
        down[j] -= h;
        const double fd = (objective(up) - objective(down)) / (2 * h);
        second.worst = std::max(second.worst, std::abs(g[static_cast<std::size_t>(j)] - fd));
      }
      ++second.instances;
    }
    // One step: second order is (I - lr A)' g, first order is g.
    const std::vector<double> s1 = toy_meta_grad(inner, outer, t0, 1, lr, MetaOrder::kSecond);
    const std::vector<double> f1 = toy_meta_grad(inner, outer, t0, 1, lr, MetaOrder::kFirst);
    double gi[2], t1[2], go[2];
    inner.gradient(t0, gi);
    t1[0] = t0[0] - lr * gi[0];
    t1[1] = t0[1] - lr * gi[1];
    outer.gradient(t1, go);
    const double hg[2] = {inner.a[0] * go[0] + inner.a[2] * go[1], inner.a[1] * go[0] + inner.a[3] * go[1]};
    for (std::size_t j = 0; j < 2; ++j) {
      first.worst = std::max(first.worst, std::abs(f1[j] - go[j]));
      first.worst = std::max(first.worst, std::abs((f1[j] - s1[j]) - lr * hg[j]));
    }
    ++first.instances;
  }
  second.passed = second.worst < second.threshold;
  first.passed = first.worst < first.threshold;
  report.rows.push_back(second);
  report.rows.push_back(first);
  report.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return report;
}

}  // namespace tsar
