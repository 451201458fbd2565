#include <algorithm>
#include <cmath>
#include <cstdio>
#include <map>

#include "mivhead/error.hpp"
#include "mivhead/miv_head.hpp"
#include "mivhead/seeding.hpp"

using nlohmann::json;

namespace mivhead::head {

std::string Candidate::str() const { return cls ? "CLS" : std::to_string(h) + "x" + std::to_string(w); }

Candidate Candidate::parse(const std::string& s) {
  if (s == "CLS" || s == "cls") return cls_row();
  const auto x = s.find('x');
  try {
    if (x != std::string::npos) {
      std::size_t used_h = 0, used_w = 0;
      const auto h = std::stoul(s.substr(0, x), &used_h);
      const auto w = std::stoul(s.substr(x + 1), &used_w);
      if (used_h == x && used_w == s.size() - x - 1 && h > 0 && w > 0) return shape(h, w);
    }
  } catch (const std::exception&) {
  }
  throw ConfigError("bad candidate '" + s + "' (expected HxW or CLS)");
}

namespace {

template <class E>
struct EnumNames {
  std::vector<std::pair<E, const char*>> names;

  std::string name(E e) const {
    for (auto& [v, n] : names)
      if (v == e) return n;
    return "?";
  }
  E parse(const std::string& s, const char* what) const {
    for (auto& [v, n] : names)
      if (s == n) return v;
    throw ConfigError(std::string("unknown ") + what + " '" + s + "'");
  }
};

const EnumNames<CasKind> kCas{{{CasKind::dba, "dba"}, {CasKind::sdpa, "sdpa"}}};
const EnumNames<SkipMode> kSkip{{{SkipMode::in_attention, "in_attention"}, {SkipMode::none, "none"}}};
const EnumNames<SelfInBag> kSelf{{{SelfInBag::include, "include"}, {SelfInBag::exclude_if_bag_gt1, "exclude_if_bag_gt1"}}};
const EnumNames<Pooling> kPool{{{Pooling::attention, "attention"}, {Pooling::gap, "gap"}}};
const EnumNames<Prototype> kProto{{{Prototype::cap, "cap"}, {Prototype::mean, "mean"}}};

}  // namespace

double HeadConfig::tau_value() const {
  if (tau) return *tau;
  return family == BackboneFamily::cnn ? 500.0 : 200.0;
}

json HeadConfig::to_json() const {
  json blocks_j = json::array();
  for (const auto& b : blocks) {
    json c = json::array();
    for (const auto& cand : b.candidates) c.push_back(cand.str());
    blocks_j.push_back({{"block_id", b.block_id}, {"candidates", c}, {"heads", b.heads}});
  }
  return {{"family", fmpack::to_string(family)},
          {"blocks", blocks_j},
          {"tau", tau_value()},
          {"eta", eta},
          {"sigma", sigma},
          {"cas_kind", kCas.name(cas_kind)},
          {"skip_mode", kSkip.name(skip_mode)},
          {"coexcitation", coexcitation},
          {"cross_attention", cross_attention},
          {"pooling", kPool.name(pooling)},
          {"prototype", kProto.name(prototype)},
          {"self_in_bag", kSelf.name(self_in_bag)},
          {"augment", augment},
          {"training",
           {{"lr", training.lr},
            {"component1_lr_factor", training.component1_lr_factor},
            {"momentum", training.momentum},
            {"weight_decay", training.weight_decay},
            {"iterations", training.iterations},
            {"batch_cap", training.batch_cap}}},
          {"init_seed", init_seed}};
}

HeadConfig HeadConfig::from_json(const json& j) {
  HeadConfig c;
  try {
    if (j.contains("family")) c.family = fmpack::parse_family(j.at("family").get<std::string>());
    for (const auto& b : j.value("blocks", json::array())) {
      BlockConfig bc;
      bc.block_id = b.at("block_id").get<int>();
      for (const auto& s : b.value("candidates", json::array())) bc.candidates.push_back(Candidate::parse(s.get<std::string>()));
      bc.heads = b.value("heads", std::size_t{0});
      c.blocks.push_back(std::move(bc));
    }
    if (j.contains("tau") && !j.at("tau").is_null()) c.tau = j.at("tau").get<double>();
    c.eta = j.value("eta", c.eta);
    c.sigma = j.value("sigma", c.sigma);
    if (j.contains("cas_kind")) c.cas_kind = kCas.parse(j.at("cas_kind").get<std::string>(), "cas_kind");
    if (j.contains("skip_mode")) c.skip_mode = kSkip.parse(j.at("skip_mode").get<std::string>(), "skip_mode");
    c.coexcitation = j.value("coexcitation", c.coexcitation);
    c.cross_attention = j.value("cross_attention", c.cross_attention);
    if (j.contains("pooling")) c.pooling = kPool.parse(j.at("pooling").get<std::string>(), "pooling");
    if (j.contains("prototype")) c.prototype = kProto.parse(j.at("prototype").get<std::string>(), "prototype");
    if (j.contains("self_in_bag")) c.self_in_bag = kSelf.parse(j.at("self_in_bag").get<std::string>(), "self_in_bag");
    c.augment = j.value("augment", c.augment);
    if (j.contains("training")) {
      const auto& t = j.at("training");
      c.training.lr = t.value("lr", c.training.lr);
      c.training.component1_lr_factor = t.value("component1_lr_factor", c.training.component1_lr_factor);
      c.training.momentum = t.value("momentum", c.training.momentum);
      c.training.weight_decay = t.value("weight_decay", c.training.weight_decay);
      c.training.iterations = t.value("iterations", c.training.iterations);
      c.training.batch_cap = t.value("batch_cap", c.training.batch_cap);
    }
    c.init_seed = j.value("init_seed", c.init_seed);
  } catch (const json::exception& e) {
    throw ConfigError(std::string("head config: ") + e.what());
  }
  if (!(c.sigma > 0.0)) throw ConfigError("head config: sigma must be > 0");
  if (!(c.eta >= 0.0)) throw ConfigError("head config: eta must be >= 0");
  if (c.training.batch_cap == 0) throw ConfigError("head config: batch_cap must be >= 1");
  return c;
}

std::string HeadConfig::hash() const {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(fnv1a64(to_json().dump())));
  return buf;
}

std::vector<Candidate> default_candidates(const std::vector<fmpack::BlockShape>& blocks, std::size_t index,
                                          BackboneFamily family) {
  const auto& b = blocks.at(index);
  const fmpack::BlockShape* deeper = nullptr;
  for (const auto& o : blocks)
    if (o.block_id > b.block_id && (!deeper || o.block_id < deeper->block_id)) deeper = &o;
  std::vector<Candidate> out;
  if (family == BackboneFamily::vit && !deeper) return {Candidate::cls_row()};
  const std::size_t lo_h = std::min(b.h, deeper ? deeper->h + 1 : std::size_t{2});
  const std::size_t lo_w = std::min(b.w, deeper ? deeper->w + 1 : std::size_t{2});
  const std::size_t n = std::min<std::size_t>(4, std::min(b.h - lo_h, b.w - lo_w) + 1);
  for (std::size_t k = 0; k < n; ++k) {
    auto at = [&](std::size_t lo, std::size_t hi) {
      if (n == 1) return hi;
      return lo + static_cast<std::size_t>(std::lround(double(k) * double(hi - lo) / double(n - 1)));
    };
    out.push_back(Candidate::shape(at(lo_h, b.h), at(lo_w, b.w)));
  }
  if (family == BackboneFamily::vit) out.push_back(Candidate::cls_row());
  return out;
}

HeadConfig HeadConfig::resolve(const fmpack::PackManifest& m) const {
  if (m.backbone_family != family) {
    throw ConfigError("head config is for " + fmpack::to_string(family) + " but the pack is " +
                      fmpack::to_string(m.backbone_family));
  }
  HeadConfig r = *this;
  if (!r.tau) r.tau = tau_value();
  if (r.blocks.empty()) {
    std::vector<int> ids;
    for (const auto& b : m.blocks) ids.push_back(b.block_id);
    std::sort(ids.begin(), ids.end());
    for (std::size_t k = ids.size() > 2 ? ids.size() - 2 : 0; k < ids.size(); ++k) r.blocks.push_back({ids[k], {}, 0});
  }
  std::map<int, int> seen;
  for (auto& bc : r.blocks) {
    if (seen[bc.block_id]++) throw ConfigError("block " + std::to_string(bc.block_id) + " listed twice");
    std::size_t index = m.blocks.size();
    for (std::size_t k = 0; k < m.blocks.size(); ++k)
      if (m.blocks[k].block_id == bc.block_id) index = k;
    if (index == m.blocks.size()) throw ConfigError("block " + std::to_string(bc.block_id) + " not in pack");
    const auto& shape = m.blocks[index];
    if (bc.candidates.empty()) bc.candidates = default_candidates(m.blocks, index, family);
    std::size_t n_cls = 0;
    for (const auto& c : bc.candidates) {
      if (c.cls) {
        if (family == BackboneFamily::cnn) throw ConfigError("CLS candidate requested on a cnn pack");
        ++n_cls;
      } else if (c.h < 1 || c.w < 1 || c.h > shape.h || c.w > shape.w) {
        throw ConfigError("candidate " + c.str() + " exceeds block " + std::to_string(bc.block_id) + " extent " +
                          std::to_string(shape.h) + "x" + std::to_string(shape.w));
      }
    }
    if (n_cls > 1) throw ConfigError("CLS listed twice for block " + std::to_string(bc.block_id));
    if (family == BackboneFamily::vit && n_cls == 0) bc.candidates.push_back(Candidate::cls_row());
    if (bc.heads == 0) {
      if (shape.c % 64 != 0) {
        throw ConfigError("block " + std::to_string(bc.block_id) + " has " + std::to_string(shape.c) +
                          " channels, not divisible by 64; give an explicit head count");
      }
      bc.heads = shape.c / 64;
    }
    if (shape.c % bc.heads != 0) {
      throw ConfigError("block " + std::to_string(bc.block_id) + ": " + std::to_string(shape.c) +
                        " channels do not split into " + std::to_string(bc.heads) + " heads");
    }
  }
  return r;
}

}  // namespace mivhead::head
