#include "mivhead/cli.hpp"

#include <CLI11.hpp>

#include <cctype>
#include <chrono>
#include <cstring>
#include <cstdlib>
#include <map>
#include <optional>

#include "mivhead/adapt.hpp"
#include "mivhead/error.hpp"
#include "mivhead/experiment.hpp"
#include "mivhead/grad_suite.hpp"
#include "mivhead/io.hpp"
#include "mivhead/seeding.hpp"
#include "mivhead/stats_report.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace mivhead::cli {

namespace {

// Raised for bad flag values found after parsing; printed with usage.
struct UsageError : Error {
  using Error::Error;
};

json read_json(const fs::path& p) {
  try {
    return json::parse(io::read_file(p));
  } catch (const json::exception& e) {
    throw ConfigError(p.string() + ": " + e.what());
  }
}

std::size_t default_workers() {
  const char* env = std::getenv("MIVHEAD_WORKERS");
  if (!env || !*env) return 1;
  try {
    std::size_t used = 0;
    const auto n = std::stoul(env, &used);
    if (used == std::strlen(env) && n > 0) return n;
  } catch (const std::exception&) {
  }
  throw UsageError(std::string("MIVHEAD_WORKERS must be a positive integer, got '") + env + "'");
}

fs::path config_path_for(const fs::path& out) {
  fs::path p = out;
  p.replace_extension(".resolved_config.json");
  return p;
}

struct RunOpts {
  std::string pack, tasks, method, head_config, method_config, out, suite = "default", name;
  std::optional<std::size_t> workers;
  std::uint64_t seed = 0;
};

adapt::MethodSpec build_method(const RunOpts& o) {
  adapt::MethodSpec m;
  if (!o.method_config.empty()) {
    json j = read_json(o.method_config);
    if (j.contains("method")) j = j.at("method");  // a resolved_config.json from an earlier run
    m = experiment::method_from_json(j);
  } else {
    m.kind = adapt::parse_method(o.method);
    m.name = o.method;
    if (!o.head_config.empty()) m.head = head::HeadConfig::from_json(read_json(o.head_config));
  }
  if (!o.method.empty() && adapt::parse_method(o.method) != m.kind)
    throw ConfigError("--method " + o.method + " disagrees with the method config");
  if (!o.name.empty()) m.name = o.name;
  m.head.init_seed = derive_seed(o.seed, "head_init");
  return m;
}

int cmd_run(const RunOpts& o, std::ostream& out) {
  if (o.method.empty() && o.method_config.empty()) throw UsageError("run needs --method or --method-config");
  const adapt::MethodSpec m = build_method(o);
  const auto pack = fmpack::PackReader::open(o.pack);
  const auto tasks = episodes::read_tasks(o.tasks);
  const std::size_t workers = o.workers.value_or(default_workers());
  adapt::MethodSpec resolved = m;
  if (m.kind == adapt::MethodKind::miv) resolved.head = m.head.resolve(pack.manifest());
  json method_j = resolved.to_json();
  method_j["name"] = m.name;
  const auto t0 = std::chrono::steady_clock::now();
  const auto rows = adapt::run_suite(pack, tasks, m, workers, o.suite);
  adapt::write_results(o.out, rows);
  experiment::write_resolved_config(config_path_for(o.out), {{"command", "run"},
                                                              {"pack", fs::absolute(o.pack).string()},
                                                              {"tasks", fs::absolute(o.tasks).string()},
                                                              {"suite", o.suite},
                                                              {"seed", o.seed},
                                                              {"method", method_j},
                                                              {"config_hash", resolved.config_hash()}});
  double acc = 0.0;
  for (const auto& r : rows) acc += r.accuracy;
  out << m.name << ": " << rows.size() << " tasks, mean accuracy " << (rows.empty() ? 0.0 : acc / double(rows.size()))
      << ", " << std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count() << " s\n";
  return 0;
}

std::string file_safe(const std::string& name) {
  std::string s;
  for (char c : name) s += std::isalnum(static_cast<unsigned char>(c)) || c == '-' || c == '_' || c == '=' || c == '.' ? c : '_';
  return s;
}

int cmd_ablate(const RunOpts& o, const std::string& grid_path, std::ostream& out) {
  const json grid = read_json(grid_path);
  const auto pack = fmpack::PackReader::open(o.pack);
  auto points = experiment::expand_grid(grid, pack.manifest());
  const auto tasks = episodes::read_tasks(o.tasks);
  const std::size_t workers = o.workers.value_or(default_workers());
  io::StagedDirectory stage(o.out);
  json listing = json::array();
  std::map<std::string, std::string> files;
  for (auto& p : points) {
    p.method.head.init_seed = derive_seed(o.seed, "head_init");
    std::string file = file_safe(p.name) + ".jsonl";
    if (files.contains(file)) throw ConfigError("grid points " + files[file] + " and " + p.name + " share a file name");
    files[file] = p.name;
    const auto rows = adapt::run_suite(pack, tasks, p.method, workers, o.suite);
    adapt::write_results(stage.path() / file, rows);
    adapt::MethodSpec resolved = p.method;
    if (p.method.kind == adapt::MethodKind::miv) resolved.head = p.method.head.resolve(pack.manifest());
    json mj = resolved.to_json();
    mj["name"] = p.name;
    listing.push_back({{"name", p.name}, {"file", file}, {"method", mj}, {"config_hash", resolved.config_hash()}});
    double acc = 0.0;
    for (const auto& r : rows) acc += r.accuracy;
    out << p.name << ": mean accuracy " << acc / double(std::max<std::size_t>(1, rows.size())) << "\n";
  }
  experiment::write_resolved_config(stage.path() / "resolved_config.json",
                                    {{"command", "ablate"},
                                     {"pack", fs::absolute(o.pack).string()},
                                     {"tasks", fs::absolute(o.tasks).string()},
                                     {"suite", o.suite},
                                     {"seed", o.seed},
                                     {"grid", grid},
                                     {"points", listing}});
  stage.commit();
  return 0;
}

int cmd_gradcheck(std::size_t seeds, std::size_t episodes, double tol, std::ostream& out) {
  const auto t0 = std::chrono::steady_clock::now();
  double worst = 0.0;
  std::size_t checks = 0, failed = 0, straddled = 0;
  auto show = [&](const std::string& group, std::uint64_t seed, const std::vector<GradSuiteEntry>& entries) {
    for (const auto& e : entries) {
      ++checks;
      worst = std::max(worst, e.report.max_rel_error);
      straddled += e.report.straddled;
      if (!e.report.passed()) ++failed;
      out << group << " seed=" << seed << " " << e.label << ": max_rel_error=" << e.report.max_rel_error
          << " coords=" << e.report.checked << " skipped_kinks=" << e.report.straddled
          << (e.report.passed() ? " ok" : " FAIL") << "\n";
    }
  };
  for (std::uint64_t s = 1; s <= seeds; ++s) {
    show("ops", s, ops_grad_suite(s, tol));
    show("head", s, head_grad_suite(episodes, s, tol));
  }
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  out << "gradcheck: " << checks << " checks, " << failed << " failed, max relative error " << worst << " (tol "
      << tol << "), " << straddled << " coordinates skipped at |x| kinks, " << secs << " s\n";
  return failed ? 1 : 0;
}

int cmd_report(const std::vector<std::string>& inputs, const std::vector<std::string>& pairs, double alpha,
               const std::string& out_dir, std::ostream& out) {
  std::vector<std::pair<std::string, std::string>> pairings;
  for (const auto& p : pairs) {
    const auto colon = p.find(':');
    if (colon == std::string::npos || colon == 0 || colon + 1 == p.size())
      throw UsageError("--pair expects a:b, got '" + p + "'");
    pairings.emplace_back(p.substr(0, colon), p.substr(colon + 1));
  }
  std::vector<adapt::ResultRow> rows;
  for (const auto& f : inputs) {
    auto r = adapt::read_results(f);
    rows.insert(rows.end(), r.begin(), r.end());
  }
  const auto rep = stats::render_report(stats::series_from_rows(rows), pairings, alpha);
  io::StagedDirectory stage(out_dir);
  io::write_file_atomic(stage.path() / "report.txt", rep.text);
  io::write_file_atomic(stage.path() / "report.json", rep.json.dump(2) + "\n");
  json in = json::array();
  for (const auto& f : inputs) in.push_back(fs::path(f).filename().string());
  experiment::write_resolved_config(stage.path() / "resolved_config.json",
                                    {{"command", "report"}, {"inputs", in}, {"pairs", pairs}, {"alpha", alpha}});
  stage.commit();
  out << rep.text;
  return 0;
}

}  // namespace

int cli_main(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"MIV-head few-shot classification head: synthetic suites, adaptation runs and reports", "mivhead"};
  app.require_subcommand(1);
  app.set_version_flag("--version", experiment::kVersion);

  std::string synth_config, synth_out;
  std::optional<std::uint64_t> synth_seed;
  auto* synth = app.add_subcommand("synth", "Generate a synthetic pack and sample its tasks");
  synth->add_option("--config", synth_config, "Suite config JSON (default: the built-in heterogeneous suite)")
      ->check(CLI::ExistingFile);
  synth->add_option("--seed", synth_seed, "Root seed (overrides the config's)");
  synth->add_option("--out", synth_out, "Output directory")->required();

  RunOpts run_opts;
  auto* run = app.add_subcommand("run", "Run one method over a task list");
  run->add_option("--pack", run_opts.pack, "Pack directory")->required()->check(CLI::ExistingDirectory);
  run->add_option("--tasks", run_opts.tasks, "tasks.jsonl")->required()->check(CLI::ExistingFile);
  run->add_option("--method", run_opts.method, "miv | ncc | cosine");
  run->add_option("--head-config", run_opts.head_config, "Head config JSON for miv")->check(CLI::ExistingFile);
  run->add_option("--method-config", run_opts.method_config, "Method JSON, or an earlier run's resolved config")
      ->check(CLI::ExistingFile);
  run->add_option("--name", run_opts.name, "Method label written to the results");
  run->add_option("--suite", run_opts.suite, "Suite label written to the results");
  run->add_option("--workers", run_opts.workers, "Worker threads (default $MIVHEAD_WORKERS or 1)")
      ->check(CLI::PositiveNumber);
  run->add_option("--seed", run_opts.seed, "Root seed");
  run->add_option("--out", run_opts.out, "results.jsonl")->required();

  RunOpts abl_opts;
  std::string grid;
  auto* ablate = app.add_subcommand("ablate", "Run every point of an ablation grid");
  ablate->add_option("--pack", abl_opts.pack, "Pack directory")->required()->check(CLI::ExistingDirectory);
  ablate->add_option("--tasks", abl_opts.tasks, "tasks.jsonl")->required()->check(CLI::ExistingFile);
  ablate->add_option("--grid", grid, "Grid JSON")->required()->check(CLI::ExistingFile);
  ablate->add_option("--suite", abl_opts.suite, "Suite label written to the results");
  ablate->add_option("--workers", abl_opts.workers, "Worker threads (default $MIVHEAD_WORKERS or 1)")
      ->check(CLI::PositiveNumber);
  ablate->add_option("--seed", abl_opts.seed, "Root seed");
  ablate->add_option("--out", abl_opts.out, "Output directory")->required();

  std::size_t gc_seeds = 1, gc_episodes = 5;
  double gc_tol = 1e-4;
  auto* gradcheck = app.add_subcommand("gradcheck", "Finite-difference check of the ops and the head");
  gradcheck->add_option("--seeds", gc_seeds, "Number of seeds (1..K)")->check(CLI::PositiveNumber);
  gradcheck->add_option("--episodes", gc_episodes, "Random episodes per seed")->check(CLI::PositiveNumber);
  gradcheck->add_option("--tol", gc_tol, "Relative error tolerance");

  std::vector<std::string> rep_inputs, rep_pairs;
  double alpha = 0.01;
  std::string rep_out;
  auto* report = app.add_subcommand("report", "Means, 95% intervals and paired t-tests over result files");
  report->add_option("--inputs", rep_inputs, "results.jsonl files")->required()->check(CLI::ExistingFile);
  report->add_option("--pair", rep_pairs, "Methods to compare, a:b (repeatable)");
  report->add_option("--alpha", alpha, "Significance level for bolding")->check(CLI::Range(0.0, 1.0));
  report->add_option("--out", rep_out, "Output directory")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? 0 : 2;
  }

  CLI::App* active = app.get_subcommands().front();
  try {
    if (active == synth) {
      experiment::SuiteConfig cfg =
          synth_config.empty() ? experiment::default_suite() : experiment::SuiteConfig::from_json(read_json(synth_config));
      if (synth_seed) cfg.seed = *synth_seed;
      experiment::generate_suite(cfg, synth_out);
      out << "wrote " << synth_out << " (" << cfg.n_tasks << " tasks)\n";
      return 0;
    }
    if (active == run) return cmd_run(run_opts, out);
    if (active == ablate) return cmd_ablate(abl_opts, grid, out);
    if (active == gradcheck) return cmd_gradcheck(gc_seeds, gc_episodes, gc_tol, out);
    return cmd_report(rep_inputs, rep_pairs, alpha, rep_out, out);
  } catch (const UsageError& e) {
    err << "error: " << e.what() << "\n" << active->help();
    return 2;
  } catch (const ConfigError& e) {
    err << "error: " << e.what() << "\n" << active->help();
    return 2;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return 1;
  }
}

}  // namespace mivhead::cli
