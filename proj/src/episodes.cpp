#include "mivhead/episodes.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>
#include <random>
#include <set>
#include <sstream>

#include "mivhead/error.hpp"
#include "mivhead/io.hpp"
#include "mivhead/seeding.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace mivhead::episodes {

using fmpack::BackboneFamily;
using fmpack::BlockFeatures;
using fmpack::ImageRecord;
using fmpack::Role;

void SynthConfig::validate() const {
  if (n_classes < 2) throw ConfigError("synth: n_classes must be >= 2");
  if (images_per_class < 1) throw ConfigError("synth: images_per_class must be >= 1");
  if (modes_per_class < 1) throw ConfigError("synth: modes_per_class must be >= 1");
  if (latent_dim < 1) throw ConfigError("synth: latent_dim must be >= 1");
  if (blocks.empty()) throw ConfigError("synth: at least one block required");
  for (const auto& b : blocks)
    if (b.h == 0 || b.w == 0 || b.c == 0) throw ConfigError("synth: block extents must be positive");
  if (!(distractor_fraction >= 0.0 && distractor_fraction < 1.0))
    throw ConfigError("synth: distractor_fraction must lie in [0,1)");
  for (double s : {patch_noise, mode_noise, cls_noise, bg_noise})
    if (!(s >= 0.0) || !std::isfinite(s)) throw ConfigError("synth: noise levels must be finite and >= 0");
}

void to_json(json& j, const SynthConfig& c) {
  json blocks = json::array();
  for (const auto& b : c.blocks)
    blocks.push_back({{"block_id", b.block_id}, {"h", b.h}, {"w", b.w}, {"c", b.c}, {"map_seed", b.map_seed}});
  j = {{"family", fmpack::to_string(c.family)},
       {"n_classes", c.n_classes},
       {"images_per_class", c.images_per_class},
       {"modes_per_class", c.modes_per_class},
       {"latent_dim", c.latent_dim},
       {"blocks", blocks},
       {"distractor_fraction", c.distractor_fraction},
       {"patch_noise", c.patch_noise},
       {"mode_noise", c.mode_noise},
       {"cls_noise", c.cls_noise},
       {"bg_noise", c.bg_noise},
       {"pseudo_views_per_image", c.pseudo_views_per_image},
       {"seed", c.seed}};
}

void from_json(const json& j, SynthConfig& c) {
  SynthConfig d;
  c.family = fmpack::parse_family(j.value("family", fmpack::to_string(d.family)));
  c.n_classes = j.value("n_classes", d.n_classes);
  c.images_per_class = j.value("images_per_class", d.images_per_class);
  c.modes_per_class = j.value("modes_per_class", d.modes_per_class);
  c.latent_dim = j.value("latent_dim", d.latent_dim);
  c.blocks.clear();
  for (const auto& b : j.at("blocks")) {
    c.blocks.push_back({b.at("block_id").get<int>(), b.at("h").get<std::size_t>(), b.at("w").get<std::size_t>(),
                        b.at("c").get<std::size_t>(), b.value("map_seed", std::uint64_t{0})});
  }
  c.distractor_fraction = j.value("distractor_fraction", d.distractor_fraction);
  c.patch_noise = j.value("patch_noise", d.patch_noise);
  c.mode_noise = j.value("mode_noise", d.mode_noise);
  c.cls_noise = j.value("cls_noise", d.cls_noise);
  c.bg_noise = j.value("bg_noise", d.bg_noise);
  c.pseudo_views_per_image = j.value("pseudo_views_per_image", d.pseudo_views_per_image);
  c.seed = j.value("seed", d.seed);
}

namespace {

using Vec = std::vector<double>;

Vec normal_vec(std::size_t n, double sd, std::mt19937_64& rng) {
  std::normal_distribution<double> nd(0.0, 1.0);
  Vec v(n);
  for (auto& x : v) x = sd * nd(rng);
  return v;
}

// c x latent, entries N(0, 1/latent) so that embeddings have unit-scale rows.
struct LinearMap {
  std::size_t rows = 0, cols = 0;
  Vec w;

  Vec apply(const Vec& z) const {
    Vec out(rows, 0.0);
    for (std::size_t r = 0; r < rows; ++r) {
      double acc = 0.0;
      for (std::size_t k = 0; k < cols; ++k) acc += w[r * cols + k] * z[k];
      out[r] = acc;
    }
    return out;
  }
};

std::string image_name(std::size_t cls, std::size_t i) {
  std::ostringstream s;
  s << "c" << cls << "_i" << i;
  return s.str();
}

struct ImageLatents {
  Vec z;
  Vec z_bg;
};

std::vector<BlockFeatures> render_blocks(const SynthConfig& cfg, const std::vector<LinearMap>& maps,
                                         const ImageLatents& lat, std::mt19937_64& rng) {
  std::normal_distribution<double> nd(0.0, 1.0);
  std::vector<BlockFeatures> out;
  for (std::size_t b = 0; b < cfg.blocks.size(); ++b) {
    const auto& sb = cfg.blocks[b];
    const std::size_t hw = sb.h * sb.w;
    const Vec signal = maps[b].apply(lat.z);
    const Vec background = maps[b].apply(lat.z_bg);
    const auto n_bg = static_cast<std::size_t>(std::floor(cfg.distractor_fraction * static_cast<double>(hw) + 0.5));
    std::vector<std::size_t> pos(hw);
    std::iota(pos.begin(), pos.end(), 0);
    std::shuffle(pos.begin(), pos.end(), rng);
    std::vector<char> is_bg(hw, 0);
    for (std::size_t k = 0; k < std::min(n_bg, hw - 1); ++k) is_bg[pos[k]] = 1;

    BlockFeatures f{sb.block_id, sb.h, sb.w, sb.c, std::vector<float>(hw * sb.c), std::nullopt};
    for (std::size_t p = 0; p < hw; ++p) {
      const Vec& base = is_bg[p] ? background : signal;
      for (std::size_t ch = 0; ch < sb.c; ++ch)
        f.patches[p * sb.c + ch] = static_cast<float>(base[ch] + cfg.patch_noise * nd(rng));
    }
    if (cfg.family == BackboneFamily::vit) {
      f.cls.emplace(sb.c);
      for (std::size_t ch = 0; ch < sb.c; ++ch)
        (*f.cls)[ch] = static_cast<float>(signal[ch] + cfg.cls_noise * nd(rng));
    }
    out.push_back(std::move(f));
  }
  return out;
}

}  // namespace

std::vector<ImageRecord> synth_records(const SynthConfig& cfg) {
  cfg.validate();
  std::vector<LinearMap> maps;
  for (const auto& b : cfg.blocks) {
    std::mt19937_64 rng(derive_seed(cfg.seed ^ b.map_seed, "map/" + std::to_string(b.block_id)));
    maps.push_back({b.c, cfg.latent_dim, normal_vec(b.c * cfg.latent_dim, 1.0 / std::sqrt(double(cfg.latent_dim)), rng)});
  }
  std::mt19937_64 proto_rng(derive_seed(cfg.seed, "modes"));
  std::vector<std::vector<Vec>> modes(cfg.n_classes);
  for (auto& cls : modes)
    for (std::size_t m = 0; m < cfg.modes_per_class; ++m) cls.push_back(normal_vec(cfg.latent_dim, 1.0, proto_rng));
  std::mt19937_64 bg_rng(derive_seed(cfg.seed, "background"));
  const Vec bg_offset = normal_vec(cfg.latent_dim, 1.0, bg_rng);

  std::vector<ImageRecord> base;
  std::vector<ImageRecord> views;
  for (std::size_t cls = 0; cls < cfg.n_classes; ++cls) {
    for (std::size_t i = 0; i < cfg.images_per_class; ++i) {
      const std::string id = image_name(cls, i);
      std::mt19937_64 rng(derive_seed(cfg.seed, "image/" + id));
      std::uniform_int_distribution<std::size_t> pick(0, cfg.modes_per_class - 1);
      ImageLatents lat;
      lat.z = modes[cls][pick(rng)];
      const Vec jitter = normal_vec(cfg.latent_dim, cfg.mode_noise, rng);
      for (std::size_t k = 0; k < cfg.latent_dim; ++k) lat.z[k] += jitter[k];
      lat.z_bg = normal_vec(cfg.latent_dim, cfg.bg_noise, rng);
      for (std::size_t k = 0; k < cfg.latent_dim; ++k) lat.z_bg[k] += bg_offset[k];

      ImageRecord r;
      r.image_id = id;
      r.class_label = static_cast<int>(cls);
      r.role = Role::support;
      r.blocks = render_blocks(cfg, maps, lat, rng);
      base.push_back(std::move(r));

      for (std::size_t v = 0; v < cfg.pseudo_views_per_image; ++v) {
        ImageRecord pv;
        pv.image_id = id + "_v" + std::to_string(v);
        pv.class_label = static_cast<int>(cls);
        pv.role = Role::pseudo_query;
        pv.source_id = id;
        std::mt19937_64 vrng(derive_seed(cfg.seed, "view/" + pv.image_id));
        pv.blocks = render_blocks(cfg, maps, lat, vrng);
        views.push_back(std::move(pv));
      }
    }
  }
  base.insert(base.end(), std::make_move_iterator(views.begin()), std::make_move_iterator(views.end()));
  return base;
}

void synth_generate(const SynthConfig& cfg, const fs::path& dir) {
  json j = cfg;
  fmpack::write_pack(dir, synth_records(cfg), cfg.family, "synthetic generator " + j.dump());
}

std::size_t TaskSpec::total_shots() const {
  std::size_t n = 0;
  for (const auto& s : support) n += s.size();
  return n;
}

std::size_t TaskSpec::class_index(int class_label) const {
  auto it = std::find(class_ids.begin(), class_ids.end(), class_label);
  if (it == class_ids.end()) throw NotFoundError("class " + std::to_string(class_label) + " not in task " + task_id);
  return static_cast<std::size_t>(it - class_ids.begin());
}

void TaskSpec::validate() const {
  if (class_ids.size() < 2) throw ConfigError("task " + task_id + ": needs at least 2 classes");
  if (support.size() != class_ids.size()) throw ConfigError("task " + task_id + ": support/class count mismatch");
  std::set<std::string> sup;
  for (const auto& s : support) {
    if (s.empty()) throw ConfigError("task " + task_id + ": empty support class");
    sup.insert(s.begin(), s.end());
  }
  for (const auto& q : queries) {
    class_index(q.class_label);
    if (sup.count(q.image_id)) throw ConfigError("task " + task_id + ": query " + q.image_id + " is in the support set");
  }
  for (const auto& p : pseudo_queries) {
    class_index(p.class_label);
    if (!sup.count(p.source_id)) throw ConfigError("task " + task_id + ": pseudo-query source outside support");
  }
}

void to_json(json& j, const TaskSpec& t) {
  json q = json::array();
  for (const auto& x : t.queries) q.push_back({x.image_id, x.class_label});
  json p = json::array();
  for (const auto& x : t.pseudo_queries) {
    p.push_back({{"image_id", x.image_id.empty() ? json(nullptr) : json(x.image_id)},
                 {"source_id", x.source_id},
                 {"class_label", x.class_label}});
  }
  j = {{"task_id", t.task_id}, {"class_ids", t.class_ids}, {"support", t.support}, {"queries", q},
       {"pseudo_queries", p}};
}

void from_json(const json& j, TaskSpec& t) {
  t.task_id = j.at("task_id").get<std::string>();
  t.class_ids = j.at("class_ids").get<std::vector<int>>();
  t.support = j.at("support").get<std::vector<std::vector<std::string>>>();
  t.queries.clear();
  for (const auto& q : j.at("queries")) t.queries.push_back({q.at(0).get<std::string>(), q.at(1).get<int>()});
  t.pseudo_queries.clear();
  for (const auto& p : j.value("pseudo_queries", json::array())) {
    PseudoQuery x;
    if (!p.at("image_id").is_null()) x.image_id = p.at("image_id").get<std::string>();
    x.source_id = p.at("source_id").get<std::string>();
    x.class_label = p.at("class_label").get<int>();
    t.pseudo_queries.push_back(std::move(x));
  }
}

namespace {

std::string mode_name(SampleMode m) { return m == SampleMode::varying ? "varying" : "five_way_one_shot"; }

SampleMode parse_mode(const std::string& s) {
  if (s == "varying") return SampleMode::varying;
  if (s == "five_way_one_shot") return SampleMode::five_way_one_shot;
  throw ConfigError("unknown sampling mode '" + s + "'");
}

}  // namespace

void to_json(json& j, const SampleParams& p) {
  j = {{"mode", mode_name(p.mode)},           {"max_ways", p.max_ways}, {"max_shots", p.max_shots},
       {"queries_per_class", p.queries_per_class}, {"augment", p.augment},   {"aug_threshold", p.aug_threshold}};
}

void from_json(const json& j, SampleParams& p) {
  SampleParams d;
  p.mode = parse_mode(j.value("mode", mode_name(d.mode)));
  p.max_ways = j.value("max_ways", d.max_ways);
  p.max_shots = j.value("max_shots", d.max_shots);
  p.queries_per_class = j.value("queries_per_class", d.queries_per_class);
  p.augment = j.value("augment", d.augment);
  p.aug_threshold = j.value("aug_threshold", d.aug_threshold);
}

std::size_t pseudo_query_count(std::size_t shots, std::size_t threshold) {
  if (shots == 0) throw ConfigError("pseudo_query_count: shots must be >= 1");
  if (shots >= threshold) return 0;
  return std::max<std::size_t>(1, threshold / shots);
}

std::vector<TaskSpec> sample_tasks(const fmpack::PackReader& pack, std::size_t n_tasks, const SampleParams& params,
                                   std::uint64_t seed) {
  const bool fixed = params.mode == SampleMode::five_way_one_shot;
  if (!fixed && params.max_ways < 5) throw ConfigError("sample_tasks: max_ways must be >= 5");
  if (params.max_shots < 1) throw ConfigError("sample_tasks: max_shots must be >= 1");

  std::map<int, std::vector<std::string>> by_class;
  std::map<std::string, std::vector<std::string>> views;
  bool has_views = false;
  for (std::size_t i = 0; i < pack.size(); ++i) {
    const auto& e = pack.manifest().records[i];
    if (e.role == Role::pseudo_query) {
      views[*e.source_id].push_back(e.image_id);
      has_views = true;
    } else {
      by_class[e.class_label].push_back(e.image_id);
    }
  }
  std::vector<int> classes;
  for (const auto& [label, ids] : by_class) classes.push_back(label);

  const std::size_t ways_hi = fixed ? 5 : std::min(params.max_ways, classes.size());
  if (classes.size() < 5 || (!fixed && classes.size() < params.max_ways)) {
    throw ConfigError("sample_tasks: pack has " + std::to_string(classes.size()) + " classes, need " +
                      std::to_string(fixed ? 5 : params.max_ways));
  }

  std::vector<TaskSpec> out;
  for (std::size_t t = 0; t < n_tasks; ++t) {
    TaskSpec task;
    task.task_id = "t" + std::to_string(t);
    std::mt19937_64 rng(derive_seed(seed, "task/" + std::to_string(t)));
    const std::size_t ways = fixed ? 5 : std::uniform_int_distribution<std::size_t>(5, ways_hi)(rng);
    std::vector<int> pool = classes;
    std::shuffle(pool.begin(), pool.end(), rng);
    pool.resize(ways);
    std::uniform_real_distribution<double> u(0.0, std::log(double(params.max_shots)));
    for (int label : pool) {
      std::size_t shots = 1;
      if (!fixed) shots = std::clamp<std::size_t>(static_cast<std::size_t>(std::floor(std::exp(u(rng)))), 1, params.max_shots);
      std::vector<std::string> ids = by_class.at(label);
      std::shuffle(ids.begin(), ids.end(), rng);
      if (ids.size() < shots + 1) {
        throw ConfigError("sample_tasks: class " + std::to_string(label) + " has " + std::to_string(ids.size()) +
                          " images, needs at least " + std::to_string(shots + 1));
      }
      const std::size_t q = std::min(params.queries_per_class, ids.size() - shots);
      task.class_ids.push_back(label);
      task.support.emplace_back(ids.begin(), ids.begin() + static_cast<std::ptrdiff_t>(shots));
      for (std::size_t k = 0; k < q; ++k) task.queries.push_back({ids[shots + k], label});

      if (!params.augment) continue;
      const std::size_t n_pseudo = pseudo_query_count(shots, params.aug_threshold);
      const auto& sup = task.support.back();
      for (std::size_t j = 0; j < n_pseudo; ++j) {
        PseudoQuery pq{"", sup[j % shots], label};
        const std::size_t view = j / shots;
        if (has_views) {
          auto it = views.find(pq.source_id);
          if (it == views.end() || it->second.size() <= view) {
            throw ConfigError("sample_tasks: pack lacks view " + std::to_string(view) + " of " + pq.source_id);
          }
          pq.image_id = it->second[view];
        }
        task.pseudo_queries.push_back(std::move(pq));
      }
    }
    task.validate();
    out.push_back(std::move(task));
  }
  return out;
}

void write_tasks(const fs::path& path, const std::vector<TaskSpec>& tasks) {
  std::string text;
  for (const auto& t : tasks) text += json(t).dump() + "\n";
  io::write_file_atomic(path, text);
}

std::vector<TaskSpec> read_tasks(const fs::path& path) {
  std::istringstream in(io::read_file(path));
  std::vector<TaskSpec> out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    try {
      out.push_back(json::parse(line).get<TaskSpec>());
    } catch (const json::exception& e) {
      throw FormatError(path.string() + ":" + std::to_string(lineno) + ": " + e.what());
    }
  }
  return out;
}

}  // namespace mivhead::episodes
