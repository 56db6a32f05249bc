#pragma once

#include <functional>
#include <iosfwd>
#include <string>
#include <span>
#include <vector>

#include "cmac/tape.hpp"

namespace cmac {

// Central-difference gradient of `f` with respect to every coordinate of
// `params`: (f(p + eps e_i) - f(p - eps e_i)) / (2 eps). Parameter values are
// restored before returning. One tensor per parameter, same shape.
std::vector<Tensor> finite_diff_grad(const std::function<double()>& f,
                                     std::span<Parameter* const> params, double eps);

// Central difference for a single coordinate.
double finite_diff_coordinate(const std::function<double()>& f, Parameter& param,
                              std::size_t index, double eps);

// |a - b| / max(|a|, |b|), with both-tiny values (below `floor`) counted as 0.
double relative_error(double analytic, double numeric, double floor = 1e-10);

struct LossEvaluation {
  double loss = 0.0;
  std::uint64_t signature = 0;  // Tape::branch_signature of the forward pass
};

// Evaluates the loss; when `with_backward` is set it also accumulates
// analytic gradients into the parameters' grad fields.
using LossFunction = std::function<LossEvaluation(bool with_backward)>;

struct GradcheckOptions {
  double eps = 1e-3;
  double tolerance = 1e-4;
  std::size_t coords_per_group = 24;
  // Gradients smaller than this in both estimates are not compared.
  double floor = 1e-10;
  std::uint64_t seed = 0;
};

struct GroupReport {
  std::string group;
  std::size_t checked = 0;
  std::size_t skipped = 0;  // coordinates whose +-eps probes straddle a kink
  double max_rel_error = 0.0;
  double tolerance = 0.0;
  bool passed() const { return checked > 0 && max_rel_error <= tolerance; }
};

// Compares the analytic gradient with central differences on a random sample
// of coordinates per parameter group. Coordinates where the branch signature
// at p+eps or p-eps differs from the one at p are skipped and resampled.
std::vector<GroupReport> check_gradients(const LossFunction& f, std::span<Parameter* const> params,
                                         const GradcheckOptions& options);

void write_gradcheck_report(std::ostream& os, std::span<const GroupReport> groups);

}  // namespace cmac
