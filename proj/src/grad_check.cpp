#include "mivhead/grad_check.hpp"

#include <algorithm>
#include <cmath>

#include "mivhead/error.hpp"

namespace mivhead {

double gradient_rel_error(double analytic, double numeric) {
  return std::abs(analytic - numeric) / std::max(1e-6, std::abs(analytic) + std::abs(numeric));
}

namespace {

struct Evaluation {
  double value = 0.0;
  std::vector<bool> abs_signs;
};

Evaluation evaluate(const ScalarFn& f, const std::vector<NamedTensor>& params) {
  Tape tape;
  std::vector<Var> leaves;
  leaves.reserve(params.size());
  for (const auto& p : params) leaves.push_back(tape.constant(p.value));
  const double v = f(tape, leaves).value().item();
  if (!std::isfinite(v)) throw NumericError("grad_check: objective is not finite");
  return {v, tape.sign_pattern("abs")};
}

}  // namespace

GradCheckReport grad_check(const ScalarFn& f, const std::vector<NamedTensor>& params, double eps, double tol) {
  std::vector<Tensor> analytic;
  {
    Tape tape;
    std::vector<Var> leaves;
    for (const auto& p : params) leaves.push_back(tape.parameter(p.value, p.name));
    Var out = f(tape, leaves);
    tape.backward(out);
    for (const auto& v : leaves) analytic.push_back(tape.grad(v));
  }

  GradCheckReport report;
  std::vector<NamedTensor> work = params;
  const std::vector<bool> base_signs = evaluate(f, work).abs_signs;
  for (std::size_t q = 0; q < work.size(); ++q) {
    Tensor& t = work[q].value;
    for (std::size_t i = 0; i < t.size(); ++i) {
      const double orig = t[i];
      t[i] = orig + eps;
      Evaluation up, down;
      try {
        up = evaluate(f, work);
        t[i] = orig - eps;
        down = evaluate(f, work);
      } catch (const NumericError&) {
        t[i] = orig;
        throw NumericError("grad_check: objective not finite when perturbing " + work[q].name + "[" +
                           std::to_string(i) + "]");
      }
      t[i] = orig;
      if (up.abs_signs != base_signs || down.abs_signs != base_signs) {
        ++report.straddled;
        continue;
      }
      const double numeric = (up.value - down.value) / (2.0 * eps);
      const double a = analytic[q][i];
      const double rel = gradient_rel_error(a, numeric);
      ++report.checked;
      if (report.worst_name.empty() || rel > report.max_rel_error) {
        report.max_rel_error = rel;
        report.worst_name = work[q].name;
        report.worst_index = i;
      }
      if (rel > tol) report.failures.push_back({work[q].name, i, a, numeric, rel});
    }
  }
  return report;
}

}  // namespace mivhead
