#pragma once

// Built-in gradient and meta-gradient checks behind the `gradcheck` command.

#include <optional>
#include <string>
#include <vector>

#include "tsar/gradcheck.hpp"

namespace tsar {

enum class CheckPrecision { kF64, kF32 };

// Finite-difference step and pass threshold per precision. In f32 mode the
// inputs and every loss value are rounded to single precision; the step sits
// near the cube root of the f32 unit roundoff, where truncation and rounding
// error balance, and the threshold allows for losses of magnitude up to ~100.
struct CheckTolerance {
  double eps;
  double max_rel_error;
};
CheckTolerance check_tolerance(CheckPrecision p);

struct CheckRow {
  std::string name;
  int instances = 0;
  double worst = 0.0;
  double threshold = 0.0;
  bool passed = false;
};

struct SelfCheckReport {
  std::vector<CheckRow> rows;
  double seconds = 0.0;
  bool passed() const;
};

// Every primitive on `instances` random cases, then the meta-gradient of a
// 2-parameter quadratic through 1, 2 and 3 inner steps against finite
// differences of the meta-objective (second order, threshold 1e-5) and the
// exact lr*H gap between first and second order (threshold 1e-12).
// `fault` corrupts that primitive's backward for the duration of the run.
SelfCheckReport run_self_checks(int instances, std::uint64_t seed, CheckPrecision precision = CheckPrecision::kF64,
                                std::optional<PrimitiveKind> fault = std::nullopt);

PrimitiveKind parse_primitive(const std::string& name);

}  // namespace tsar
