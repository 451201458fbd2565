#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "mivhead/episodes.hpp"
#include "mivhead/fmpack.hpp"
#include "mivhead/miv_head.hpp"

namespace mivhead::adapt {

// A task with its records loaded. Labels are positions in spec.class_ids.
struct TaskData {
  episodes::TaskSpec spec;
  std::vector<std::vector<fmpack::ImageRecord>> support;
  std::vector<fmpack::ImageRecord> queries;
  std::vector<std::size_t> query_labels;
  std::vector<fmpack::ImageRecord> pseudo;  // bound pseudo-queries only
  std::vector<std::size_t> pseudo_labels;

  std::size_t ways() const { return support.size(); }
};

TaskData load_task(const episodes::TaskSpec& spec, const fmpack::PackReader& pack);

struct TrainState {
  head::HeadParams params;
  std::vector<Tensor> momentum;  // one per HeadParams::named() entry
  std::size_t step = 0;
  std::uint64_t seed = 0;
  std::vector<double> loss_trace;  // loss before each update
};

TrainState init_state(const TaskData& task, const fmpack::PackManifest& m, const head::HeadConfig& resolved,
                      std::uint64_t seed);

// Observer called after every step with the updated state.
using StepHook = std::function<void(const TrainState&)>;

// Support-as-queries plus (when cfg.augment) the task's pseudo-queries form
// the training pool; each step uses it whole, or a round-robin window of
// cfg.training.batch_cap queries when larger.
TrainState train_episode(const TaskData& task, const fmpack::PackManifest& m, const head::HeadConfig& resolved,
                         std::uint64_t seed, const StepHook& hook = {});

// Pool of training queries in the order the round-robin walks it.
struct TrainingPool {
  std::vector<std::size_t> rows;                  // rows of the training ImageBatch
  std::vector<std::optional<std::size_t>> in_bag;
  std::vector<std::size_t> labels;
};

struct TaskEval {
  double accuracy = 0.0;
  Tensor logits;  // (Q,L)
  std::vector<std::size_t> predictions;
};

// Logits of the given queries, each computed from (support set, that query)
// alone.
Tensor query_logits(const TaskData& task, const head::HeadParams& params, const head::HeadConfig& resolved,
                    std::span<const std::size_t> query_indices);
TaskEval evaluate_task(const TaskData& task, const head::HeadParams& params, const head::HeadConfig& resolved);

// Raw-block embedding used by the baselines: GAP of the patches, or the cls
// row on vit packs.
std::vector<double> baseline_embedding(const fmpack::ImageRecord& r, int block_id, fmpack::BackboneFamily family);

TaskEval ncc_classify(const TaskData& task, int block_id, fmpack::BackboneFamily family);

struct CosineConfig {
  double lr = 0.03;
  std::size_t iterations = 400;
  double sigma = 0.1;
};

TaskEval cosine_classifier(const TaskData& task, int block_id, fmpack::BackboneFamily family,
                           const CosineConfig& cfg = {});

enum class MethodKind { miv, ncc, cosine };

struct MethodSpec {
  std::string name;  // label written to results
  MethodKind kind = MethodKind::miv;
  head::HeadConfig head;
  CosineConfig cosine;
  std::optional<int> block_id;  // baselines; default deepest block

  nlohmann::json to_json() const;
  std::string config_hash() const;
};

MethodKind parse_method(const std::string& s);

struct ResultRow {
  std::string task_id;
  std::string method;
  std::string config_hash;
  double accuracy = 0.0;
  double wall_time = 0.0;  // seconds; the only field that varies between runs
  std::vector<double> loss_trace;
  std::string suite;
};

nlohmann::json to_json(const ResultRow& r);
ResultRow row_from_json(const nlohmann::json& j);

// Tasks are spread over `workers` threads; rows come back in task order. A
// failing task is reported by id.
std::vector<ResultRow> run_suite(const fmpack::PackReader& pack, const std::vector<episodes::TaskSpec>& tasks,
                                 const MethodSpec& method, std::size_t workers, const std::string& suite = "default");

void write_results(const std::filesystem::path& path, const std::vector<ResultRow>& rows);
std::vector<ResultRow> read_results(const std::filesystem::path& path);

}  // namespace mivhead::adapt
