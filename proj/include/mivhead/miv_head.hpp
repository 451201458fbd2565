#pragma once

#include <cmath>
#include <cstdint>
#include <memory>
#include <numbers>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "mivhead/fmpack.hpp"
#include "mivhead/grad_check.hpp"
#include "mivhead/ops.hpp"
#include "mivhead/tape.hpp"

namespace mivhead::head {

using fmpack::BackboneFamily;

enum class CasKind { dba, sdpa };
enum class SkipMode { in_attention, none };
enum class SelfInBag { include, exclude_if_bag_gt1 };
// gap replaces both pooling attentions by a plain mean over the raw block.
enum class Pooling { attention, gap };
// mean replaces the cross-attention prototype by the bag mean.
enum class Prototype { cap, mean };

// One pooling candidate: an adaptive max-pool target or the cls row.
struct Candidate {
  std::size_t h = 0, w = 0;
  bool cls = false;

  static Candidate shape(std::size_t h, std::size_t w) { return {h, w, false}; }
  static Candidate cls_row() { return {0, 0, true}; }
  // "HxW" or "CLS"
  std::string str() const;
  static Candidate parse(const std::string& s);
  friend bool operator==(const Candidate&, const Candidate&) = default;
};

struct BlockConfig {
  int block_id = -1;
  std::vector<Candidate> candidates;  // empty: filled in by resolve()
  std::size_t heads = 0;              // 0: channels / 64
};

struct TrainConfig {
  double lr = 0.3;
  double component1_lr_factor = 0.05;
  double momentum = 0.9;
  double weight_decay = 0.0;
  std::size_t iterations = 40;
  std::size_t batch_cap = 256;
};

struct HeadConfig {
  BackboneFamily family = BackboneFamily::cnn;
  std::vector<BlockConfig> blocks;
  std::optional<double> tau;  // 500 cnn, 200 vit
  double eta = 0.1;
  double sigma = 0.1;
  CasKind cas_kind = CasKind::dba;
  SkipMode skip_mode = SkipMode::in_attention;
  bool coexcitation = true;
  bool cross_attention = true;
  Pooling pooling = Pooling::attention;
  Prototype prototype = Prototype::cap;
  SelfInBag self_in_bag = SelfInBag::include;
  bool augment = true;
  TrainConfig training;
  std::uint64_t init_seed = 0;

  double tau_value() const;
  // Canonical JSON with every field present.
  nlohmann::json to_json() const;
  static HeadConfig from_json(const nlohmann::json& j);
  // FNV-1a 64 of the canonical JSON, as 16 hex digits.
  std::string hash() const;

  // Copy with default block list, candidates and head counts filled in from
  // the pack layout, then validated against it.
  HeadConfig resolve(const fmpack::PackManifest& m) const;
};

// Up to four equally spaced square shapes from `lo` to the block's extent
// (lo: one more than the next deeper block's extent, or 2 for the last one).
std::vector<Candidate> default_candidates(const std::vector<fmpack::BlockShape>& blocks, std::size_t index,
                                          BackboneFamily family);

struct BlockParams {
  int block_id = -1;
  std::size_t channels = 0;
  std::size_t heads = 1;
  // Empty tensors mark parameters the configuration does not use.
  Tensor theta, mu;              // (C)
  Tensor vit_gamma, vit_beta;    // (C)
  Tensor ln_gamma, ln_beta;      // (C)
  Tensor wk, wv, kappa;          // (C, C): per-head C x d blocks side by side
};

struct HeadParams {
  std::vector<BlockParams> blocks;

  // Non-empty parameters in a fixed order, named "b<id>.<field>".
  std::vector<NamedTensor> named() const;
  // Inverse of named(): values in the same order.
  void assign(const std::vector<Tensor>& values);
  // Whether named()[k] is trained at the Component 1 rate.
  std::vector<bool> component1_mask() const;
  friend bool operator==(const HeadParams& a, const HeadParams& b);
};

HeadParams init_params(const HeadConfig& resolved, const fmpack::PackManifest& m, std::uint64_t seed);

struct BlockVars {
  std::optional<Var> theta, mu, vit_gamma, vit_beta, ln_gamma, ln_beta, wk, wv, kappa;
  std::size_t channels = 0, heads = 1;
};

struct HeadVars {
  std::vector<BlockVars> blocks;
};

// Leaves on `tape`: trainable parameters or constants.
HeadVars bind_params(Tape& tape, const HeadParams& p, bool trainable);
// Maps leaves given in named() order onto the layout of `p`.
HeadVars bind_params(const HeadParams& p, const std::vector<Var>& leaves);

// ---- single-instance building blocks ----

// Adaptive max-pool candidates of one block (the cls row for a CLS entry).
std::vector<Tensor> build_candidates(const fmpack::BlockFeatures& block, const std::vector<Candidate>& candidates);

// A: (H',W',C) or (P,C). Returns (C). For vit, ln_vit is applied afterwards
// when gamma/beta are given.
Var pool_candidate(Var a, Var theta, double tau, BackboneFamily family, std::optional<Var> vit_gamma = std::nullopt,
                   std::optional<Var> vit_beta = std::nullopt);
// Candidates are (C) each; returns (C).
Var pool_image(std::span<const Var> candidates, Var mu, double tau, BackboneFamily family);

inline double dba_center(std::size_t d) { return std::sqrt(4.0 / std::numbers::pi) * static_cast<double>(d); }
inline double dba_scale(std::size_t d) { return std::sqrt((2.0 - 4.0 / std::numbers::pi) * static_cast<double>(d)); }

// yk, zk: (1,S,d) -> (1,S)
Var dba_scores(Var yk, Var zk, double eta);
// x: (1,C), kappa: (C,d) -> (1,d)
Var mhce(Var x, Var kappa);

// P: (S,C) bag, Q: (1,C) query -> (v^P (1,C), v^Q (1,C))
std::pair<Var, Var> cap_forward(Var p, Var q, const BlockVars& bv, const HeadConfig& cfg);
// vp: (L,C), vq: (1,C) -> (1,L)
Var block_logits(Var vp, Var vq, double sigma);
// (N,L) -> (1,L)
Var aggregate_logits(Var per_block);

// ---- batched pipeline ----

// Query-independent constants for a set of images: per block, the stacked
// candidate maps of every image.
struct ImageBatch {
  struct Block {
    std::vector<std::shared_ptr<const Tensor>> raw;    // per spatial candidate (NI,P,C)
    std::vector<std::shared_ptr<const Tensor>> normed; // same, attention-normalised
    std::shared_ptr<const Tensor> cls;                 // (NI,C), vit only
    std::shared_ptr<const Tensor> gap;                 // (NI,C) mean of raw patches
    std::vector<int> order;  // per candidate: spatial index, or -1 for cls
  };
  std::vector<std::string> ids;
  std::vector<Block> blocks;
};

ImageBatch prepare_images(const std::vector<const fmpack::ImageRecord*>& images, const HeadConfig& resolved);

// Per block (NI,C) image embeddings M.
std::vector<Var> embed_images(Tape& tape, const HeadVars& hv, const ImageBatch& batch, const HeadConfig& cfg);

// Class-contiguous bag layout over rows of the support embeddings.
struct BagLayout {
  std::vector<std::size_t> support_rows;  // rows of the ImageBatch, class-major
  std::vector<ops::Segment> segments;     // one per class over support_rows
};

struct QuerySet {
  std::vector<std::size_t> rows;                    // rows of the ImageBatch
  std::vector<std::optional<std::size_t>> in_bag;   // position in support_rows, if a member
};

// m: (Qn,C) queries, s: (S,C) bag members -> (v^P (Qn,L,C), v^Q (Qn,C))
std::pair<Var, Var> cap_batched(Var m_query, Var m_support, const std::vector<ops::Segment>& segments,
                                const Tensor* mask, const BlockVars& bv, const HeadConfig& cfg);
// vp: (Qn,L,C), vq: (Qn,C) -> (Qn,L)
Var block_logits_batched(Var vp, Var vq, double sigma);

// Rows of `mask` for segment_softmax given the self_in_bag rule, or nullopt
// when nothing is excluded.
std::optional<Tensor> self_mask(const BagLayout& bags, const QuerySet& queries, SelfInBag rule);

// (Qn,L) logits.
Var head_logits(Tape& tape, const HeadVars& hv, const ImageBatch& batch, const BagLayout& bags,
                const QuerySet& queries, const HeadConfig& cfg);

// One query against class bags; the query counts as a bag member when it is
// one of the support records (by image_id). Returns (L).
Tensor head_forward(const std::vector<std::vector<const fmpack::ImageRecord*>>& support,
                    const fmpack::ImageRecord& query, const HeadParams& params, const HeadConfig& resolved);

}  // namespace mivhead::head
