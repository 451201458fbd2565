#include "mivhead/adapt.hpp"

#include <atomic>
#include <chrono>
#include <cmath>
#include <exception>
#include <mutex>
#include <sstream>
#include <thread>

#include "mivhead/error.hpp"
#include "mivhead/io.hpp"
#include "mivhead/seeding.hpp"

using nlohmann::json;

namespace mivhead::adapt {

using fmpack::ImageRecord;

TaskData load_task(const episodes::TaskSpec& spec, const fmpack::PackReader& pack) {
  spec.validate();
  TaskData t;
  t.spec = spec;
  for (const auto& cls : spec.support) {
    auto& bag = t.support.emplace_back();
    for (const auto& id : cls) bag.push_back(pack.record(id));
  }
  for (const auto& q : spec.queries) {
    t.queries.push_back(pack.record(q.image_id));
    t.query_labels.push_back(spec.class_index(q.class_label));
  }
  for (const auto& p : spec.pseudo_queries) {
    if (p.image_id.empty()) continue;
    t.pseudo.push_back(pack.record(p.image_id));
    t.pseudo_labels.push_back(spec.class_index(p.class_label));
  }
  return t;
}

namespace {

struct TrainingLayout {
  head::ImageBatch batch;
  head::BagLayout bags;
  TrainingPool pool;
};

TrainingLayout training_layout(const TaskData& task, const head::HeadConfig& cfg) {
  TrainingLayout out;
  std::vector<const ImageRecord*> images;
  for (std::size_t l = 0; l < task.support.size(); ++l) {
    const std::size_t begin = images.size();
    for (const auto& r : task.support[l]) {
      out.pool.rows.push_back(images.size());
      out.pool.in_bag.push_back(images.size());
      out.pool.labels.push_back(l);
      out.bags.support_rows.push_back(images.size());
      images.push_back(&r);
    }
    out.bags.segments.push_back({begin, images.size()});
  }
  if (cfg.augment) {
    for (std::size_t k = 0; k < task.pseudo.size(); ++k) {
      out.pool.rows.push_back(images.size());
      out.pool.in_bag.push_back(std::nullopt);
      out.pool.labels.push_back(task.pseudo_labels[k]);
      images.push_back(&task.pseudo[k]);
    }
  }
  out.batch = head::prepare_images(images, cfg);
  return out;
}

}  // namespace

TrainState init_state(const TaskData& task, const fmpack::PackManifest& m, const head::HeadConfig& cfg,
                      std::uint64_t seed) {
  TrainState s;
  s.seed = seed;
  s.params = head::init_params(cfg, m, derive_seed(seed, "init/" + task.spec.task_id));
  for (const auto& nt : s.params.named()) s.momentum.emplace_back(nt.value.shape(), 0.0);
  return s;
}

TrainState train_episode(const TaskData& task, const fmpack::PackManifest& m, const head::HeadConfig& cfg,
                         std::uint64_t seed, const StepHook& hook) {
  TrainState state = init_state(task, m, cfg, seed);
  if (cfg.training.iterations == 0) return state;
  const auto layout = training_layout(task, cfg);
  const auto& pool = layout.pool;
  if (pool.rows.empty()) throw ConfigError("train_episode: empty training pool");
  const std::size_t cap = cfg.training.batch_cap;
  const auto c1 = state.params.component1_mask();

  for (std::size_t step = 0; step < cfg.training.iterations; ++step) {
    head::QuerySet qs;
    std::vector<std::size_t> labels;
    const std::size_t n = std::min(cap, pool.rows.size());
    for (std::size_t k = 0; k < n; ++k) {
      const std::size_t at = pool.rows.size() <= cap ? k : (step * cap + k) % pool.rows.size();
      qs.rows.push_back(pool.rows[at]);
      qs.in_bag.push_back(pool.in_bag[at]);
      labels.push_back(pool.labels[at]);
    }
    Tape tape;
    const auto hv = head::bind_params(tape, state.params, true);
    Var logits = head::head_logits(tape, hv, layout.batch, layout.bags, qs, cfg);
    Var loss = ops::cross_entropy(logits, labels);
    const double lv = loss.value().item();
    if (!std::isfinite(lv)) {
      throw NumericError("task " + task.spec.task_id + ": non-finite loss at step " + std::to_string(step));
    }
    state.loss_trace.push_back(lv);
    tape.backward(loss);

    std::vector<Tensor> values;
    const auto& leaves = tape.parameters();
    const auto named = state.params.named();
    for (std::size_t k = 0; k < leaves.size(); ++k) {
      Tensor g = tape.grad(leaves[k]);
      Tensor p = named[k].value;
      Tensor& buf = state.momentum[k];
      const double lr = cfg.training.lr * (c1[k] ? cfg.training.component1_lr_factor : 1.0);
      for (std::size_t i = 0; i < p.size(); ++i) {
        const double gi = g[i] + cfg.training.weight_decay * p[i];
        buf[i] = cfg.training.momentum * buf[i] + gi;
        p[i] -= lr * buf[i];
      }
      values.push_back(std::move(p));
    }
    state.params.assign(values);
    state.step = step + 1;
    if (hook) hook(state);
  }
  return state;
}

Tensor query_logits(const TaskData& task, const head::HeadParams& params, const head::HeadConfig& cfg,
                    std::span<const std::size_t> query_indices) {
  std::vector<const ImageRecord*> images;
  head::BagLayout bags;
  for (const auto& cls : task.support) {
    const std::size_t begin = images.size();
    for (const auto& r : cls) {
      bags.support_rows.push_back(images.size());
      images.push_back(&r);
    }
    bags.segments.push_back({begin, images.size()});
  }
  head::QuerySet qs;
  for (std::size_t q : query_indices) {
    qs.rows.push_back(images.size());
    qs.in_bag.push_back(std::nullopt);
    images.push_back(&task.queries.at(q));
  }
  const auto batch = head::prepare_images(images, cfg);
  Tape tape;
  const auto hv = head::bind_params(tape, params, false);
  return head::head_logits(tape, hv, batch, bags, qs, cfg).value();
}

namespace {

TaskEval score(const Tensor& logits, const std::vector<std::size_t>& labels) {
  TaskEval e;
  e.logits = logits;
  const std::size_t q = logits.dim(0), l = logits.dim(1);
  std::size_t correct = 0;
  for (std::size_t i = 0; i < q; ++i) {
    std::size_t best = 0;
    for (std::size_t k = 1; k < l; ++k)
      if (logits[i * l + k] > logits[i * l + best]) best = k;
    e.predictions.push_back(best);
    correct += best == labels[i];
  }
  e.accuracy = q == 0 ? 0.0 : double(correct) / double(q);
  return e;
}

}  // namespace

TaskEval evaluate_task(const TaskData& task, const head::HeadParams& params, const head::HeadConfig& cfg) {
  std::vector<std::size_t> all(task.queries.size());
  for (std::size_t i = 0; i < all.size(); ++i) all[i] = i;
  return score(query_logits(task, params, cfg, all), task.query_labels);
}

std::vector<double> baseline_embedding(const ImageRecord& r, int block_id, fmpack::BackboneFamily family) {
  const auto& b = r.block(block_id);
  if (family == fmpack::BackboneFamily::vit) {
    if (!b.cls) throw FormatError("vit record '" + r.image_id + "' lacks a cls row");
    return {b.cls->begin(), b.cls->end()};
  }
  const std::size_t p = b.h * b.w;
  std::vector<double> out(b.c), col(p);
  for (std::size_t ch = 0; ch < b.c; ++ch) {
    for (std::size_t k = 0; k < p; ++k) col[k] = b.patches[k * b.c + ch];
    out[ch] = canonical_sum(col) / double(p);
  }
  return out;
}

namespace {

std::vector<double> unit(std::vector<double> v) {
  std::vector<double> sq(v.size());
  for (std::size_t i = 0; i < v.size(); ++i) sq[i] = v[i] * v[i];
  const double n = std::sqrt(canonical_sum(sq)) + ops::kNormEps;
  for (auto& x : v) x /= n;
  return v;
}

double dot(const std::vector<double>& a, const std::vector<double>& b) {
  std::vector<double> p(a.size());
  for (std::size_t i = 0; i < a.size(); ++i) p[i] = a[i] * b[i];
  return canonical_sum(p);
}

// Class means of unit-normalised support embeddings, (L,C).
Tensor class_means(const TaskData& task, int block_id, fmpack::BackboneFamily family) {
  std::size_t c = 0;
  std::vector<std::vector<double>> rows;
  for (const auto& cls : task.support) {
    std::vector<std::vector<double>> embs;
    for (const auto& r : cls) embs.push_back(unit(baseline_embedding(r, block_id, family)));
    c = embs.front().size();
    std::vector<double> mean(c), col(embs.size());
    for (std::size_t ch = 0; ch < c; ++ch) {
      for (std::size_t k = 0; k < embs.size(); ++k) col[k] = embs[k][ch];
      mean[ch] = canonical_sum(col) / double(embs.size());
    }
    rows.push_back(std::move(mean));
  }
  return Tensor::from_rows(rows);
}

}  // namespace

TaskEval ncc_classify(const TaskData& task, int block_id, fmpack::BackboneFamily family) {
  const Tensor protos = class_means(task, block_id, family);
  const std::size_t l = protos.dim(0), c = protos.dim(1);
  std::vector<std::vector<double>> unit_protos;
  for (std::size_t k = 0; k < l; ++k)
    unit_protos.push_back(unit(std::vector<double>(protos.vec().begin() + long(k * c), protos.vec().begin() + long((k + 1) * c))));
  Tensor logits({task.queries.size(), l});
  for (std::size_t i = 0; i < task.queries.size(); ++i) {
    const auto e = unit(baseline_embedding(task.queries[i], block_id, family));
    for (std::size_t k = 0; k < l; ++k) logits[i * l + k] = dot(e, unit_protos[k]);
  }
  return score(logits, task.query_labels);
}

TaskEval cosine_classifier(const TaskData& task, int block_id, fmpack::BackboneFamily family,
                           const CosineConfig& cfg) {
  Tensor w = class_means(task, block_id, family);
  const std::size_t l = w.dim(0);
  std::vector<std::vector<double>> sup_rows;
  std::vector<std::size_t> labels;
  for (std::size_t k = 0; k < l; ++k)
    for (const auto& r : task.support[k]) {
      sup_rows.push_back(unit(baseline_embedding(r, block_id, family)));
      labels.push_back(k);
    }
  const auto emb = std::make_shared<const Tensor>(Tensor::from_rows(sup_rows));

  // Adam, default moments.
  const double b1 = 0.9, b2 = 0.999, eps = 1e-8;
  Tensor m1(w.shape(), 0.0), m2(w.shape(), 0.0);
  for (std::size_t step = 1; step <= cfg.iterations; ++step) {
    Tape tape;
    Var wv = tape.parameter(w, "weights");
    Var logits = ops::scale(ops::matmul(tape.constant(emb), ops::transpose(ops::l2_normalize(wv, 1))), 1.0 / cfg.sigma);
    Var loss = ops::cross_entropy(logits, labels);
    if (!std::isfinite(loss.value().item())) {
      throw NumericError("cosine classifier: non-finite loss on task " + task.spec.task_id);
    }
    tape.backward(loss);
    const Tensor g = tape.grad(wv);
    const double c1 = 1.0 - std::pow(b1, double(step));
    const double c2 = 1.0 - std::pow(b2, double(step));
    for (std::size_t i = 0; i < w.size(); ++i) {
      m1[i] = b1 * m1[i] + (1 - b1) * g[i];
      m2[i] = b2 * m2[i] + (1 - b2) * g[i] * g[i];
      w[i] -= cfg.lr * (m1[i] / c1) / (std::sqrt(m2[i] / c2) + eps);
    }
  }

  Tensor logits({task.queries.size(), l});
  const std::size_t c = w.dim(1);
  for (std::size_t i = 0; i < task.queries.size(); ++i) {
    const auto e = unit(baseline_embedding(task.queries[i], block_id, family));
    for (std::size_t k = 0; k < l; ++k) {
      const auto row = unit(std::vector<double>(w.vec().begin() + long(k * c), w.vec().begin() + long((k + 1) * c)));
      logits[i * l + k] = dot(e, row) / cfg.sigma;
    }
  }
  return score(logits, task.query_labels);
}

MethodKind parse_method(const std::string& s) {
  if (s == "miv") return MethodKind::miv;
  if (s == "ncc") return MethodKind::ncc;
  if (s == "cosine") return MethodKind::cosine;
  throw ConfigError("unknown method '" + s + "' (expected miv, ncc or cosine)");
}

namespace {

const char* kind_name(MethodKind k) {
  switch (k) {
    case MethodKind::miv:
      return "miv";
    case MethodKind::ncc:
      return "ncc";
    case MethodKind::cosine:
      return "cosine";
  }
  return "?";
}

}  // namespace

json MethodSpec::to_json() const {
  json j = {{"kind", kind_name(kind)}, {"block_id", block_id ? json(*block_id) : json(nullptr)}};
  if (kind == MethodKind::miv) j["head"] = head.to_json();
  if (kind == MethodKind::cosine)
    j["cosine"] = {{"lr", cosine.lr}, {"iterations", cosine.iterations}, {"sigma", cosine.sigma}};
  return j;
}

std::string MethodSpec::config_hash() const {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(fnv1a64(to_json().dump())));
  return buf;
}

json to_json(const ResultRow& r) {
  return {{"task_id", r.task_id},         {"method", r.method},         {"config_hash", r.config_hash},
          {"accuracy", r.accuracy},       {"wall_time", r.wall_time},   {"loss_trace", r.loss_trace},
          {"suite", r.suite}};
}

ResultRow row_from_json(const json& j) {
  ResultRow r;
  r.task_id = j.at("task_id").get<std::string>();
  r.method = j.at("method").get<std::string>();
  r.config_hash = j.value("config_hash", "");
  r.accuracy = j.at("accuracy").get<double>();
  r.wall_time = j.value("wall_time", 0.0);
  r.loss_trace = j.value("loss_trace", std::vector<double>{});
  r.suite = j.value("suite", "default");
  return r;
}

namespace {

int deepest_block(const fmpack::PackManifest& m) {
  int id = m.blocks.front().block_id;
  for (const auto& b : m.blocks) id = std::max(id, b.block_id);
  return id;
}

ResultRow run_one(const fmpack::PackReader& pack, const episodes::TaskSpec& spec, const MethodSpec& method,
                  const head::HeadConfig* resolved, const std::string& hash, const std::string& suite) {
  const auto t0 = std::chrono::steady_clock::now();
  const TaskData task = load_task(spec, pack);
  ResultRow row;
  row.task_id = spec.task_id;
  row.method = method.name;
  row.config_hash = hash;
  row.suite = suite;
  const int block = method.block_id.value_or(deepest_block(pack.manifest()));
  switch (method.kind) {
    case MethodKind::miv: {
      const auto state = train_episode(task, pack.manifest(), *resolved, resolved->init_seed);
      row.accuracy = evaluate_task(task, state.params, *resolved).accuracy;
      row.loss_trace = state.loss_trace;
      break;
    }
    case MethodKind::ncc:
      row.accuracy = ncc_classify(task, block, pack.family()).accuracy;
      break;
    case MethodKind::cosine:
      row.accuracy = cosine_classifier(task, block, pack.family(), method.cosine).accuracy;
      break;
  }
  row.wall_time = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return row;
}

}  // namespace

std::vector<ResultRow> run_suite(const fmpack::PackReader& pack, const std::vector<episodes::TaskSpec>& tasks,
                                 const MethodSpec& method, std::size_t workers, const std::string& suite) {
  std::optional<head::HeadConfig> resolved;
  MethodSpec hashed = method;
  if (method.kind == MethodKind::miv) hashed.head = *(resolved = method.head.resolve(pack.manifest()));
  const std::string hash = hashed.config_hash();
  std::vector<ResultRow> rows(tasks.size());
  std::vector<std::exception_ptr> errors(tasks.size());
  std::atomic<std::size_t> next{0};
  auto work = [&] {
    for (std::size_t i = next++; i < tasks.size(); i = next++) {
      try {
        rows[i] = run_one(pack, tasks[i], method, resolved ? &*resolved : nullptr, hash, suite);
      } catch (...) {
        errors[i] = std::current_exception();
      }
    }
  };
  workers = std::max<std::size_t>(1, std::min(workers, tasks.size()));
  if (workers == 1) {
    work();
  } else {
    std::vector<std::thread> pool;
    for (std::size_t w = 0; w < workers; ++w) pool.emplace_back(work);
    for (auto& t : pool) t.join();
  }
  for (std::size_t i = 0; i < tasks.size(); ++i) {
    if (!errors[i]) continue;
    try {
      std::rethrow_exception(errors[i]);
    } catch (const std::exception& e) {
      throw Error("task " + tasks[i].task_id + " failed: " + e.what());
    }
  }
  return rows;
}

void write_results(const std::filesystem::path& path, const std::vector<ResultRow>& rows) {
  std::string text;
  for (const auto& r : rows) text += to_json(r).dump() + "\n";
  io::write_file_atomic(path, text);
}

std::vector<ResultRow> read_results(const std::filesystem::path& path) {
  std::istringstream in(io::read_file(path));
  std::vector<ResultRow> out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    try {
      out.push_back(row_from_json(json::parse(line)));
    } catch (const json::exception& e) {
      throw FormatError(path.string() + ":" + std::to_string(lineno) + ": " + e.what());
    }
  }
  return out;
}

}  // namespace mivhead::adapt
