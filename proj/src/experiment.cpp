#include "mivhead/experiment.hpp"

#include <algorithm>
#include <cmath>
#include <functional>

#include "mivhead/error.hpp"
#include "mivhead/io.hpp"
#include "mivhead/seeding.hpp"

using nlohmann::json;

namespace mivhead::experiment {

SuiteConfig SuiteConfig::resolved() const {
  SuiteConfig r = *this;
  r.synth.seed = derive_seed(seed, "synth");
  return r;
}

json SuiteConfig::to_json() const {
  return {{"synth", synth}, {"sample", sample}, {"n_tasks", n_tasks}, {"seed", seed}};
}

SuiteConfig SuiteConfig::from_json(const json& j) {
  SuiteConfig c;
  try {
    for (const auto& [k, v] : j.items())
      if (k != "synth" && k != "sample" && k != "n_tasks" && k != "seed" && k != "version")
        throw ConfigError("suite config: unknown key '" + k + "'");
    if (j.contains("synth")) c.synth = j.at("synth").get<episodes::SynthConfig>();
    if (j.contains("sample")) c.sample = j.at("sample").get<episodes::SampleParams>();
    c.n_tasks = j.value("n_tasks", c.n_tasks);
    c.seed = j.value("seed", c.seed);
  } catch (const json::exception& e) {
    throw ConfigError(std::string("suite config: ") + e.what());
  }
  c.synth.validate();
  return c;
}

SuiteConfig default_suite() {
  SuiteConfig c;
  auto& s = c.synth;
  s.family = fmpack::BackboneFamily::cnn;
  s.n_classes = 8;
  s.images_per_class = 24;
  s.modes_per_class = 3;
  s.latent_dim = 16;
  s.blocks = {{-2, 6, 6, 64, 0}, {-1, 3, 3, 64, 0}};
  s.distractor_fraction = 0.5;
  s.patch_noise = 1.0;
  s.mode_noise = 0.5;
  s.bg_noise = 1.0;
  s.pseudo_views_per_image = 15;
  c.sample.max_ways = 8;
  c.sample.max_shots = 10;
  c.sample.queries_per_class = 10;
  c.sample.aug_threshold = 15;
  c.n_tasks = 100;
  c.seed = 20240611;
  return c;
}

void generate_suite(const SuiteConfig& cfg, const std::filesystem::path& dir) {
  const SuiteConfig r = cfg.resolved();
  io::StagedDirectory stage(dir);
  episodes::synth_generate(r.synth, stage.path() / "pack");
  const auto pack = fmpack::PackReader::open(stage.path() / "pack");
  episodes::write_tasks(stage.path() / "tasks.jsonl",
                        episodes::sample_tasks(pack, r.n_tasks, r.sample, derive_seed(cfg.seed, "sample")));
  write_resolved_config(stage.path() / "resolved_config.json", r.to_json());
  stage.commit();
}

adapt::MethodSpec method_from_json(const json& j) {
  adapt::MethodSpec m;
  try {
    for (const auto& [k, v] : j.items())
      if (k != "name" && k != "kind" && k != "head" && k != "cosine" && k != "block_id")
        throw ConfigError("method: unknown key '" + k + "'");
    m.kind = adapt::parse_method(j.value("kind", "miv"));
    m.name = j.value("name", j.value("kind", "miv"));
    if (j.contains("head")) m.head = head::HeadConfig::from_json(j.at("head"));
    if (j.contains("cosine")) {
      const auto& c = j.at("cosine");
      m.cosine.lr = c.value("lr", m.cosine.lr);
      m.cosine.iterations = c.value("iterations", m.cosine.iterations);
      m.cosine.sigma = c.value("sigma", m.cosine.sigma);
    }
    if (j.contains("block_id") && !j.at("block_id").is_null()) m.block_id = j.at("block_id").get<int>();
  } catch (const json::exception& e) {
    throw ConfigError(std::string("method: ") + e.what());
  }
  return m;
}

namespace {

std::vector<int> deepest_ids(const fmpack::PackManifest& m, std::size_t n) {
  std::vector<int> ids;
  for (const auto& b : m.blocks) ids.push_back(b.block_id);
  std::sort(ids.begin(), ids.end());
  if (n < 1 || n > ids.size())
    throw ConfigError("grid: N=" + std::to_string(n) + " but the pack has " + std::to_string(ids.size()) + " blocks");
  return {ids.end() - long(n), ids.end()};
}

// D spatial candidates per block: D equally spaced picks from the default
// list, always keeping the full extent. On vit packs resolve() appends CLS.
void apply_d(head::HeadConfig& h, std::size_t d, const fmpack::PackManifest& m) {
  if (d < 1) throw ConfigError("grid: D must be >= 1");
  if (h.blocks.empty())
    for (int id : deepest_ids(m, std::min<std::size_t>(2, m.blocks.size()))) h.blocks.push_back({id, {}, 0});
  for (auto& bc : h.blocks) {
    std::size_t index = m.blocks.size();
    for (std::size_t k = 0; k < m.blocks.size(); ++k)
      if (m.blocks[k].block_id == bc.block_id) index = k;
    if (index == m.blocks.size()) throw ConfigError("grid: block " + std::to_string(bc.block_id) + " not in pack");
    std::vector<head::Candidate> spatial;
    for (const auto& c : head::default_candidates(m.blocks, index, h.family))
      if (!c.cls) spatial.push_back(c);
    if (spatial.empty()) continue;  // deepest vit block: CLS only
    std::vector<head::Candidate> picked;
    const std::size_t n = spatial.size(), dd = std::min(d, n);
    for (std::size_t k = 0; k < dd; ++k) {
      const std::size_t i = dd == 1 ? n - 1 : n - 1 - std::size_t(std::lround(double(k) * double(n - 1) / double(dd - 1)));
      if (picked.empty() || !(picked.back() == spatial[i])) picked.push_back(spatial[i]);
    }
    std::reverse(picked.begin(), picked.end());
    bc.candidates = picked;
  }
}

std::string value_str(const json& v) { return v.is_string() ? v.get<std::string>() : v.dump(); }

}  // namespace

std::vector<GridPoint> expand_grid(const json& grid, const fmpack::PackManifest& m) {
  for (const auto& [k, v] : grid.items())
    if (k != "base" && k != "axes" && k != "points" && k != "version") throw ConfigError("grid: unknown key '" + k + "'");
  const json base = grid.value("base", json::object());
  std::vector<GridPoint> out;
  const json axes = grid.value("axes", json::object());
  if (!axes.empty()) {
    std::vector<std::pair<std::string, std::vector<json>>> dims;
    for (const auto& [k, v] : axes.items()) {
      if (!v.is_array() || v.empty()) throw ConfigError("grid: axis " + k + " needs a non-empty list");
      dims.push_back({k, std::vector<json>(v.begin(), v.end())});
    }
    std::vector<std::size_t> at(dims.size(), 0);
    while (true) {
      json patch = base;
      std::size_t d = 0, n = 0;
      std::string name;
      for (std::size_t a = 0; a < dims.size(); ++a) {
        const auto& [axis, values] = dims[a];
        const json& v = values[at[a]];
        name += (a ? "," : "") + axis + "=" + value_str(v);
        if (axis == "D") d = v.get<std::size_t>();
        else if (axis == "N") n = v.get<std::size_t>();
        else if (axis == "aug") patch["augment"] = v;
        else if (axis == "cross_attention" || axis == "coexcitation" || axis == "skip_mode" || axis == "cas_kind" ||
                 axis == "pooling" || axis == "prototype")
          patch[axis] = v;
        else
          throw ConfigError("grid: unknown axis '" + axis + "'");
      }
      adapt::MethodSpec ms;
      ms.name = name;
      ms.kind = adapt::MethodKind::miv;
      ms.head = head::HeadConfig::from_json(patch);
      if (n) {
        ms.head.blocks.clear();
        for (int id : deepest_ids(m, n)) ms.head.blocks.push_back({id, {}, 0});
      }
      if (d) apply_d(ms.head, d, m);
      out.push_back({name, std::move(ms)});
      std::size_t a = dims.size();
      while (a > 0 && ++at[a - 1] == dims[a - 1].second.size()) at[--a] = 0;
      if (a == 0) break;
    }
  }
  for (const auto& p : grid.value("points", json::array())) {
    json merged = p;
    if (merged.value("kind", "miv") == "miv") {
      json h = base;
      h.merge_patch(p.value("head", json::object()));
      merged["head"] = h;
    }
    adapt::MethodSpec ms = method_from_json(merged);
    out.push_back({ms.name, std::move(ms)});
  }
  if (out.empty()) throw ConfigError("grid: no axes and no points");
  for (std::size_t i = 0; i < out.size(); ++i)
    for (std::size_t k = 0; k < i; ++k)
      if (out[i].name == out[k].name) throw ConfigError("grid: duplicate point name " + out[i].name);
  for (auto& p : out)
    if (p.method.kind == adapt::MethodKind::miv) p.method.head.resolve(m);  // validate early
  return out;
}

void write_resolved_config(const std::filesystem::path& path, json contents) {
  contents["version"] = kVersion;
  io::write_file_atomic(path, contents.dump(2) + "\n");
}

}  // namespace mivhead::experiment
