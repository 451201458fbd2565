#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include <json.hpp>

#include "mivhead/adapt.hpp"
#include "mivhead/episodes.hpp"

namespace mivhead::experiment {

inline constexpr const char* kVersion = "0.1.0";

// A synthetic pack plus its sampled tasks. Every seed is derived from `seed`:
// the generator uses derive_seed(seed, "synth"), the sampler
// derive_seed(seed, "sample").
struct SuiteConfig {
  episodes::SynthConfig synth;
  episodes::SampleParams sample;
  std::size_t n_tasks = 100;
  std::uint64_t seed = 0;

  // Copy with the derived seeds written into place.
  SuiteConfig resolved() const;
  nlohmann::json to_json() const;
  static SuiteConfig from_json(const nlohmann::json& j);
};

// The heterogeneous suite the acceptance checks run on.
SuiteConfig default_suite();

// Writes DIR/pack, DIR/tasks.jsonl and DIR/resolved_config.json; DIR is
// staged and only appears once complete.
void generate_suite(const SuiteConfig& cfg, const std::filesystem::path& dir);

// {"name", "kind": miv|ncc|cosine, "head": {...}, "cosine": {...}, "block_id"}.
// The name defaults to the kind.
adapt::MethodSpec method_from_json(const nlohmann::json& j);

struct GridPoint {
  std::string name;
  adapt::MethodSpec method;
};

// Expands {"base": head, "axes": {axis: [values]}, "points": [method]} into
// named methods. Axes: D (candidates per block), N (deepest N blocks),
// cross_attention, coexcitation, skip_mode, cas_kind, pooling, prototype, aug.
// Axis points are named "axis=value,..." in key order; "points" entries are
// merged over "base" and keep their own names.
std::vector<GridPoint> expand_grid(const nlohmann::json& grid, const fmpack::PackManifest& m);

// Writes `contents` next to an output with the tool version added.
void write_resolved_config(const std::filesystem::path& path, nlohmann::json contents);

}  // namespace mivhead::experiment
