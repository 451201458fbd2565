#include "mivhead/stats_report.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>
#include <map>
#include <numeric>

#include "mivhead/error.hpp"

using nlohmann::json;

namespace mivhead::stats {

void MethodSeries::validate() const {
  if (task_ids.size() != values.size())
    throw FormatError("series " + method + ": " + std::to_string(task_ids.size()) + " task ids for " +
                      std::to_string(values.size()) + " values");
  for (double v : values)
    if (!(v >= 0.0 && v <= 1.0)) throw FormatError("series " + method + ": accuracy outside [0,1]");
}

std::vector<MethodSeries> series_from_rows(const std::vector<adapt::ResultRow>& rows) {
  std::map<std::pair<std::string, std::string>, std::vector<const adapt::ResultRow*>> groups;
  for (const auto& r : rows) groups[{r.suite, r.method}].push_back(&r);
  std::vector<MethodSeries> out;
  for (auto& [key, members] : groups) {
    std::sort(members.begin(), members.end(),
              [](const adapt::ResultRow* a, const adapt::ResultRow* b) { return a->task_id < b->task_id; });
    MethodSeries s;
    s.suite = key.first;
    s.method = key.second;
    s.config_hash = members.front()->config_hash;
    for (const auto* r : members) {
      if (r->config_hash != s.config_hash)
        throw FormatError("method " + s.method + " has rows from configs " + s.config_hash + " and " + r->config_hash);
      if (!s.task_ids.empty() && s.task_ids.back() == r->task_id)
        throw FormatError("method " + s.method + " repeats task " + r->task_id);
      s.task_ids.push_back(r->task_id);
      s.values.push_back(r->accuracy);
    }
    s.validate();
    out.push_back(std::move(s));
  }
  return out;
}

MeanCI mean_ci95(std::span<const double> values) {
  const std::size_t n = values.size();
  if (n < 2) throw Error("mean_ci95 needs at least 2 values, got " + std::to_string(n));
  const double mean = std::accumulate(values.begin(), values.end(), 0.0) / double(n);
  double ss = 0.0;
  for (double v : values) ss += (v - mean) * (v - mean);
  const double sd = std::sqrt(ss / double(n - 1));
  return {mean, 1.96 * sd / std::sqrt(double(n))};
}

namespace {

// Continued fraction for I_x(a,b), modified Lentz.
double beta_fraction(double a, double b, double x) {
  constexpr double tiny = 1e-300;
  constexpr double eps = 1e-16;
  const double qab = a + b, qap = a + 1.0, qam = a - 1.0;
  double c = 1.0;
  double d = 1.0 - qab * x / qap;
  if (std::fabs(d) < tiny) d = tiny;
  d = 1.0 / d;
  double h = d;
  for (int m = 1; m <= 10000; ++m) {
    const double m2 = 2.0 * m;
    double aa = m * (b - m) * x / ((qam + m2) * (a + m2));
    d = 1.0 + aa * d;
    if (std::fabs(d) < tiny) d = tiny;
    c = 1.0 + aa / c;
    if (std::fabs(c) < tiny) c = tiny;
    d = 1.0 / d;
    h *= d * c;
    aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2));
    d = 1.0 + aa * d;
    if (std::fabs(d) < tiny) d = tiny;
    c = 1.0 + aa / c;
    if (std::fabs(c) < tiny) c = tiny;
    d = 1.0 / d;
    const double del = d * c;
    h *= del;
    if (std::fabs(del - 1.0) < eps) return h;
  }
  throw NumericError("incomplete beta continued fraction did not converge");
}

double beta_prefactor(double a, double b, double x) {
  return std::exp(std::lgamma(a + b) - std::lgamma(a) - std::lgamma(b) + a * std::log(x) + b * std::log1p(-x));
}

}  // namespace

double incomplete_beta(double a, double b, double x) {
  if (!(a > 0.0 && b > 0.0)) throw Error("incomplete_beta needs a, b > 0");
  if (!(x >= 0.0 && x <= 1.0)) throw Error("incomplete_beta needs x in [0,1]");
  if (x == 0.0 || x == 1.0) return x;
  if (x < (a + 1.0) / (a + b + 2.0)) return beta_prefactor(a, b, x) * beta_fraction(a, b, x) / a;
  return 1.0 - beta_prefactor(b, a, 1.0 - x) * beta_fraction(b, a, 1.0 - x) / b;
}

double student_t_cdf(double t, double df) {
  if (!(df > 0.0)) throw Error("student_t_cdf needs df > 0");
  if (std::isinf(t)) return t > 0 ? 1.0 : 0.0;
  const double t2 = t * t;
  // Lower tail mass P(T < -|t|) = I_x(df/2, 1/2) / 2 with x = df/(df+t^2);
  // near t = 0 the complement is evaluated at 1-x = t^2/(df+t^2) directly.
  const double x = df / (df + t2);
  const double a = df / 2.0;
  const double tail = x < (a + 1.0) / (a + 2.5) ? 0.5 * incomplete_beta(a, 0.5, x)
                                                 : 0.5 * (1.0 - incomplete_beta(0.5, a, t2 / (df + t2)));
  return t > 0 ? 1.0 - tail : tail;
}

double TTest::p_greater() const { return t >= 0 ? p_two_sided / 2.0 : 1.0 - p_two_sided / 2.0; }

TTest paired_ttest(std::span<const double> a, std::span<const double> b, double alpha) {
  if (a.size() != b.size())
    throw Error("paired_ttest: series lengths " + std::to_string(a.size()) + " and " + std::to_string(b.size()));
  const std::size_t n = a.size();
  if (n < 2) throw Error("paired_ttest needs at least 2 pairs");
  std::vector<double> d(n);
  for (std::size_t i = 0; i < n; ++i) d[i] = a[i] - b[i];
  const double mean = std::accumulate(d.begin(), d.end(), 0.0) / double(n);
  double ss = 0.0;
  for (double v : d) ss += (v - mean) * (v - mean);
  const double sd = std::sqrt(ss / double(n - 1));
  TTest r;
  r.df = double(n - 1);
  if (sd == 0.0) {
    r.t = mean == 0.0 ? 0.0 : std::copysign(std::numeric_limits<double>::infinity(), mean);
    r.p_two_sided = mean == 0.0 ? 1.0 : 0.0;
  } else {
    r.t = mean / (sd / std::sqrt(double(n)));
    r.p_two_sided = std::min(1.0, 2.0 * student_t_cdf(-std::fabs(r.t), r.df));
  }
  r.significant = r.p_two_sided < alpha;
  return r;
}

TTest paired_ttest(const MethodSeries& a, const MethodSeries& b, double alpha) {
  if (a.task_ids != b.task_ids)
    throw FormatError("paired_ttest: " + a.method + " and " + b.method + " are not aligned by task id");
  return paired_ttest(a.values, b.values, alpha);
}

namespace {

std::string fmt(const char* f, double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, f, v);
  return buf;
}

std::string cell_text(const MeanCI& ci) { return fmt("%.2f", 100.0 * ci.mean) + " ± " + fmt("%.2f", 100.0 * ci.halfwidth); }

json finite_or_null(double v) { return std::isfinite(v) ? json(v) : json(nullptr); }

// Display width, counting each UTF-8 sequence as one column.
std::size_t width(const std::string& s) {
  return std::count_if(s.begin(), s.end(), [](char c) { return (static_cast<unsigned char>(c) & 0xC0) != 0x80; });
}

std::string pad(const std::string& s, std::size_t w) { return s + std::string(w > width(s) ? w - width(s) : 0, ' '); }

}  // namespace

Report render_report(const std::vector<MethodSeries>& series,
                     const std::vector<std::pair<std::string, std::string>>& pairings, double alpha) {
  if (series.empty()) throw Error("render_report needs at least one series");
  std::vector<std::string> methods, suites;
  std::map<std::pair<std::string, std::string>, const MethodSeries*> by_key;  // (suite, method)
  for (const auto& s : series) {
    s.validate();
    if (!by_key.emplace(std::pair{s.suite, s.method}, &s).second)
      throw FormatError("duplicate series " + s.method + " on suite " + s.suite);
    if (std::find(methods.begin(), methods.end(), s.method) == methods.end()) methods.push_back(s.method);
    if (std::find(suites.begin(), suites.end(), s.suite) == suites.end()) suites.push_back(s.suite);
  }
  for (const auto& [a, b] : pairings)
    for (const auto& m : {a, b})
      if (std::find(methods.begin(), methods.end(), m) == methods.end())
        throw Error("pairing names unknown method " + m);

  std::map<std::pair<std::string, std::string>, MeanCI> cis;
  std::map<std::pair<std::string, std::string>, bool> bold;
  for (const auto& [key, s] : by_key) cis[key] = mean_ci95(s->values);

  json jpairs = json::array();
  std::vector<std::string> pair_lines;
  for (const auto& suite : suites)
    for (const auto& [a, b] : pairings) {
      const auto ia = by_key.find({suite, a}), ib = by_key.find({suite, b});
      if (ia == by_key.end() || ib == by_key.end()) continue;
      const TTest t = paired_ttest(*ia->second, *ib->second, alpha);
      const double ma = cis[{suite, a}].mean, mb = cis[{suite, b}].mean;
      std::string winner;
      if (t.significant && ma != mb) {
        winner = ma > mb ? a : b;
        bold[{suite, winner}] = true;
      }
      jpairs.push_back({{"suite", suite}, {"a", a}, {"b", b}, {"t", finite_or_null(t.t)}, {"df", t.df},
                        {"p", t.p_two_sided}, {"significant", t.significant},
                        {"winner", winner.empty() ? json(nullptr) : json(winner)}});
      pair_lines.push_back(suite + "  " + a + " vs " + b + "  t=" + fmt("%.4f", t.t) + " df=" + fmt("%.0f", t.df) +
                           " p=" + fmt("%.4g", t.p_two_sided) + (t.significant ? "  significant" : ""));
    }

  // Table cells.
  std::vector<std::vector<std::string>> table;
  table.push_back({"suite"});
  for (const auto& m : methods) table.back().push_back(m);
  json jsuites = json::array();
  for (const auto& suite : suites) {
    auto& row = table.emplace_back(std::vector<std::string>{suite});
    json cells = json::object();
    for (const auto& m : methods) {
      const auto it = cis.find({suite, m});
      if (it == cis.end()) {
        row.push_back("-");
        continue;
      }
      const bool b = bold.contains({suite, m});
      row.push_back(b ? "**" + cell_text(it->second) + "**" : cell_text(it->second));
      cells[m] = {{"mean", it->second.mean},
                  {"halfwidth", it->second.halfwidth},
                  {"n", by_key.at({suite, m})->values.size()},
                  {"config_hash", by_key.at({suite, m})->config_hash},
                  {"bold", b}};
    }
    jsuites.push_back({{"suite", suite}, {"cells", cells}});
  }
  auto& avg_row = table.emplace_back(std::vector<std::string>{"average"});
  json javg = json::object();
  for (const auto& m : methods) {
    double sum = 0.0;
    std::size_t k = 0;
    for (const auto& suite : suites)
      if (const auto it = cis.find({suite, m}); it != cis.end()) {
        sum += it->second.mean;
        ++k;
      }
    avg_row.push_back(fmt("%.2f", 100.0 * sum / double(k)));
    javg[m] = {{"mean", sum / double(k)}, {"suites", k}};
  }

  std::vector<std::size_t> widths(table.front().size(), 0);
  for (const auto& row : table)
    for (std::size_t c = 0; c < row.size(); ++c) widths[c] = std::max(widths[c], width(row[c]));
  std::string text;
  auto emit = [&](const std::vector<std::string>& row) {
    std::string line;
    for (std::size_t c = 0; c < row.size(); ++c) line += (c ? " | " : "") + pad(row[c], widths[c]);
    while (!line.empty() && line.back() == ' ') line.pop_back();
    text += line + "\n";
  };
  emit(table.front());
  std::string rule;
  for (std::size_t c = 0; c < widths.size(); ++c) rule += (c ? "-+-" : "") + std::string(widths[c], '-');
  text += rule + "\n";
  for (std::size_t r = 1; r < table.size(); ++r) {
    if (r + 1 == table.size()) text += rule + "\n";
    emit(table[r]);
  }
  text += "\naccuracy (%) mean ± 95% CI; ** marks the higher mean of a pairing with two-sided paired t-test p < " +
          fmt("%g", alpha) + "\n";
  if (!pair_lines.empty()) {
    text += "\n";
    for (const auto& l : pair_lines) text += l + "\n";
  }

  Report rep;
  rep.text = std::move(text);
  rep.json = {{"alpha", alpha},   {"methods", methods},     {"suites", jsuites},
              {"average", javg},  {"pairings", jpairs}};
  return rep;
}

}  // namespace mivhead::stats
