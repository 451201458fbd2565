#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include <json.hpp>

#include "mivhead/fmpack.hpp"

namespace mivhead::episodes {

struct SynthBlock {
  int block_id = -1;
  std::size_t h = 1, w = 1, c = 1;
  std::uint64_t map_seed = 0;
};

// Generator for a frozen multi-block "backbone". Each class owns
// modes_per_class latent modes; an image picks one, jitters it by mode_noise
// and maps it through a fixed per-block linear map. A distractor_fraction of
// the patch positions of every block instead carry the image's background
// latent, which scatters around one offset shared by all classes.
struct SynthConfig {
  fmpack::BackboneFamily family = fmpack::BackboneFamily::cnn;
  std::size_t n_classes = 10;
  std::size_t images_per_class = 30;
  std::size_t modes_per_class = 3;
  std::size_t latent_dim = 16;
  std::vector<SynthBlock> blocks;
  double distractor_fraction = 0.5;
  double patch_noise = 1.0;
  double mode_noise = 0.5;
  double cls_noise = 0.5;
  double bg_noise = 1.0;
  // Pseudo-query views stored per image (0 disables them).
  std::size_t pseudo_views_per_image = 0;
  std::uint64_t seed = 0;

  void validate() const;
};

void to_json(nlohmann::json& j, const SynthConfig& c);
void from_json(const nlohmann::json& j, SynthConfig& c);

// Pure function of cfg. Base images come first (class-major), then views.
std::vector<fmpack::ImageRecord> synth_records(const SynthConfig& cfg);
void synth_generate(const SynthConfig& cfg, const std::filesystem::path& dir);

struct Query {
  std::string image_id;
  int class_label = 0;
  friend bool operator==(const Query&, const Query&) = default;
};

// An unbound pseudo-query (empty image_id) is a demand for a view of
// source_id that the pack does not hold yet.
struct PseudoQuery {
  std::string image_id;
  std::string source_id;
  int class_label = 0;
  friend bool operator==(const PseudoQuery&, const PseudoQuery&) = default;
};

struct TaskSpec {
  std::string task_id;
  std::vector<int> class_ids;
  std::vector<std::vector<std::string>> support;
  std::vector<Query> queries;
  std::vector<PseudoQuery> pseudo_queries;

  std::size_t ways() const { return class_ids.size(); }
  std::size_t total_shots() const;
  // Position of a pack label in class_ids.
  std::size_t class_index(int class_label) const;
  void validate() const;
  friend bool operator==(const TaskSpec&, const TaskSpec&) = default;
};

void to_json(nlohmann::json& j, const TaskSpec& t);
void from_json(const nlohmann::json& j, TaskSpec& t);

enum class SampleMode { varying, five_way_one_shot };

struct SampleParams {
  SampleMode mode = SampleMode::varying;
  std::size_t max_ways = 20;
  std::size_t max_shots = 30;
  std::size_t queries_per_class = 10;
  bool augment = true;
  std::size_t aug_threshold = 15;
};

void to_json(nlohmann::json& j, const SampleParams& p);
void from_json(const nlohmann::json& j, SampleParams& p);

// max(1, floor(T/S)) when S < T, else 0.
std::size_t pseudo_query_count(std::size_t shots, std::size_t threshold);

std::vector<TaskSpec> sample_tasks(const fmpack::PackReader& pack, std::size_t n_tasks, const SampleParams& params,
                                   std::uint64_t seed);

void write_tasks(const std::filesystem::path& path, const std::vector<TaskSpec>& tasks);
std::vector<TaskSpec> read_tasks(const std::filesystem::path& path);

}  // namespace mivhead::episodes
