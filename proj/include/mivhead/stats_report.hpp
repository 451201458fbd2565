#pragma once

#include <span>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "mivhead/adapt.hpp"

namespace mivhead::stats {

// Per-task accuracies of one method on one suite, sorted by task id.
struct MethodSeries {
  std::string method;
  std::string config_hash;
  std::string suite = "default";
  std::vector<std::string> task_ids;
  std::vector<double> values;

  void validate() const;
};

// Groups rows by (suite, method). Mixed config hashes within a group, or a
// task id repeated within a group, raise FormatError.
std::vector<MethodSeries> series_from_rows(const std::vector<adapt::ResultRow>& rows);

struct MeanCI {
  double mean = 0.0;
  double halfwidth = 0.0;  // 1.96 * sd / sqrt(n), sd with n-1 denominator
};

MeanCI mean_ci95(std::span<const double> values);

// Regularized incomplete beta I_x(a, b).
double incomplete_beta(double a, double b, double x);
double student_t_cdf(double t, double df);

struct TTest {
  double t = 0.0;
  double df = 0.0;
  double p_two_sided = 1.0;
  bool significant = false;  // p_two_sided < alpha

  // p for the alternative mean(a - b) > 0.
  double p_greater() const;
};

TTest paired_ttest(std::span<const double> a, std::span<const double> b, double alpha = 0.01);
// Requires identical task ids in the same order.
TTest paired_ttest(const MethodSeries& a, const MethodSeries& b, double alpha = 0.01);

struct Report {
  std::string text;
  nlohmann::json json;
};

// Pairings name methods; each is tested within every suite holding both.
Report render_report(const std::vector<MethodSeries>& series,
                     const std::vector<std::pair<std::string, std::string>>& pairings, double alpha = 0.01);

}  // namespace mivhead::stats
