#include "cmac/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <ostream>

#include "cmac/rng.hpp"

namespace cmac {

double finite_diff_coordinate(const std::function<double()>& f, Parameter& param,
                              std::size_t index, double eps) {
  if (!(eps > 0.0)) throw ContractError("finite_diff: eps must be positive");
  const double saved = param.value[index];
  param.value[index] = saved + eps;
  const double up = f();
  param.value[index] = saved - eps;
  const double down = f();
  param.value[index] = saved;
  return (up - down) / (2.0 * eps);
}

std::vector<Tensor> finite_diff_grad(const std::function<double()>& f,
                                     std::span<Parameter* const> params, double eps) {
  std::vector<Tensor> grads;
  grads.reserve(params.size());
  for (Parameter* p : params) {
    Tensor g(p->value.shape());
    for (std::size_t i = 0; i < g.numel(); ++i) g[i] = finite_diff_coordinate(f, *p, i, eps);
    grads.push_back(std::move(g));
  }
  return grads;
}

double relative_error(double analytic, double numeric, double floor) {
  const double scale = std::max(std::abs(analytic), std::abs(numeric));
  if (scale < floor) return 0.0;
  return std::abs(analytic - numeric) / scale;
}

std::vector<GroupReport> check_gradients(const LossFunction& f, std::span<Parameter* const> params,
                                         const GradcheckOptions& options) {
  for (Parameter* p : params) p->zero_grad();
  const LossEvaluation base = f(true);
  std::vector<Tensor> analytic;
  for (Parameter* p : params) analytic.push_back(p->grad);

  std::vector<std::string> order;
  for (Parameter* p : params) {
    if (std::find(order.begin(), order.end(), p->group) == order.end()) order.push_back(p->group);
  }
  Rng rng(options.seed);
  std::vector<GroupReport> reports;
  for (const std::string& group : order) {
    GroupReport r;
    r.group = group;
    r.tolerance = options.tolerance;
    std::vector<std::pair<std::size_t, std::size_t>> coords;
    for (std::size_t k = 0; k < params.size(); ++k) {
      if (params[k]->group != group) continue;
      for (std::size_t i = 0; i < params[k]->value.numel(); ++i) coords.emplace_back(k, i);
    }
    // Partial Fisher-Yates: visit coordinates in random order until enough were checked.
    for (std::size_t n = 0; n < coords.size() && r.checked < options.coords_per_group; ++n) {
      std::swap(coords[n], coords[n + rng.below(coords.size() - n)]);
      const auto [k, i] = coords[n];
      Parameter& p = *params[k];
      const double saved = p.value[i];
      p.value[i] = saved + options.eps;
      const LossEvaluation up = f(false);
      p.value[i] = saved - options.eps;
      const LossEvaluation down = f(false);
      p.value[i] = saved;
      if (up.signature != base.signature || down.signature != base.signature) {
        ++r.skipped;
        continue;
      }
      const double numeric = (up.loss - down.loss) / (2.0 * options.eps);
      r.max_rel_error = std::max(r.max_rel_error, relative_error(analytic[k][i], numeric, options.floor));
      ++r.checked;
    }
    reports.push_back(r);
  }
  return reports;
}

void write_gradcheck_report(std::ostream& os, std::span<const GroupReport> groups) {
  os << std::left << std::setw(16) << "group" << std::right << std::setw(8) << "checked" << std::setw(9)
     << "skipped" << std::setw(14) << "max_rel_err" << "  status\n";
  for (const GroupReport& g : groups) {
    os << std::left << std::setw(16) << g.group << std::right << std::setw(8) << g.checked << std::setw(9)
       << g.skipped << std::setw(14) << std::scientific << std::setprecision(3) << g.max_rel_error
       << std::defaultfloat << "  " << (g.passed() ? "pass" : "FAIL") << '\n';
  }
}

}  // namespace cmac
