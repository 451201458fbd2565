#include "mivhead/miv_head.hpp"

#include <algorithm>
#include <cmath>
#include <random>

#include "mivhead/error.hpp"
#include "mivhead/seeding.hpp"

namespace mivhead::head {

namespace {

// Field visitor shared by named(), assign() and the binders.
template <class BP, class F>
void visit_fields(BP& b, F&& f) {
  f("theta", b.theta, true);
  f("mu", b.mu, true);
  f("vit_gamma", b.vit_gamma, true);
  f("vit_beta", b.vit_beta, true);
  f("ln_gamma", b.ln_gamma, false);
  f("ln_beta", b.ln_beta, false);
  f("wk", b.wk, false);
  f("wv", b.wv, false);
  f("kappa", b.kappa, false);
}

std::optional<Var>& var_slot(BlockVars& v, const std::string& field) {
  if (field == "theta") return v.theta;
  if (field == "mu") return v.mu;
  if (field == "vit_gamma") return v.vit_gamma;
  if (field == "vit_beta") return v.vit_beta;
  if (field == "ln_gamma") return v.ln_gamma;
  if (field == "ln_beta") return v.ln_beta;
  if (field == "wk") return v.wk;
  if (field == "wv") return v.wv;
  return v.kappa;
}

std::string param_name(int block_id, const char* field) { return "b" + std::to_string(block_id) + "." + field; }

Var need(const std::optional<Var>& v, const char* what) {
  if (!v) throw ConfigError(std::string("parameter ") + what + " is not configured");
  return *v;
}

Tensor uniform_matrix(std::size_t rows, std::size_t cols, double a, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(-a, a);
  Tensor t({rows, cols});
  for (std::size_t i = 0; i < t.size(); ++i) t[i] = u(rng);
  return t;
}

}  // namespace

std::vector<NamedTensor> HeadParams::named() const {
  std::vector<NamedTensor> out;
  for (const auto& b : blocks)
    visit_fields(b, [&](const char* field, const Tensor& t, bool) {
      if (!t.empty()) out.push_back({param_name(b.block_id, field), t});
    });
  return out;
}

void HeadParams::assign(const std::vector<Tensor>& values) {
  std::size_t k = 0;
  for (auto& b : blocks)
    visit_fields(b, [&](const char* field, Tensor& t, bool) {
      if (t.empty()) return;
      if (k >= values.size() || values[k].shape() != t.shape()) {
        throw ShapeError("HeadParams::assign: mismatch at " + param_name(b.block_id, field));
      }
      t = values[k++];
    });
  if (k != values.size()) throw ShapeError("HeadParams::assign: too many values");
}

std::vector<bool> HeadParams::component1_mask() const {
  std::vector<bool> out;
  for (const auto& b : blocks)
    visit_fields(b, [&](const char*, const Tensor& t, bool c1) {
      if (!t.empty()) out.push_back(c1);
    });
  return out;
}

bool operator==(const HeadParams& a, const HeadParams& b) {
  const auto x = a.named();
  const auto y = b.named();
  if (x.size() != y.size()) return false;
  for (std::size_t k = 0; k < x.size(); ++k)
    if (x[k].name != y[k].name || !(x[k].value == y[k].value)) return false;
  return true;
}

HeadParams init_params(const HeadConfig& cfg, const fmpack::PackManifest& m, std::uint64_t seed) {
  HeadParams p;
  for (const auto& bc : cfg.blocks) {
    const fmpack::BlockShape* shape = nullptr;
    for (const auto& s : m.blocks)
      if (s.block_id == bc.block_id) shape = &s;
    if (!shape) throw ConfigError("block " + std::to_string(bc.block_id) + " not in pack");
    if (bc.heads == 0) throw ConfigError("init_params needs a resolved config");
    BlockParams b;
    b.block_id = bc.block_id;
    b.channels = shape->c;
    b.heads = bc.heads;
    const std::size_t c = shape->c;
    const std::size_t d = c / bc.heads;
    if (cfg.pooling == Pooling::attention) {
      b.theta = Tensor({c}, 0.0);
      b.mu = Tensor({c}, 0.0);
      if (cfg.family == BackboneFamily::vit) {
        b.vit_gamma = Tensor({c}, 1.0);
        b.vit_beta = Tensor({c}, 0.0);
      }
    }
    if (cfg.prototype == Prototype::cap) {
      const double a = std::sqrt(6.0 / double(c + d));
      b.ln_gamma = Tensor({c}, 1.0);
      b.ln_beta = Tensor({c}, 0.0);
      if (cfg.cross_attention) b.wk = uniform_matrix(c, c, a, derive_seed(seed, param_name(b.block_id, "wk")));
      b.wv = uniform_matrix(c, c, a, derive_seed(seed, param_name(b.block_id, "wv")));
      if (cfg.coexcitation) b.kappa = uniform_matrix(c, c, a, derive_seed(seed, param_name(b.block_id, "kappa")));
    }
    p.blocks.push_back(std::move(b));
  }
  return p;
}

HeadVars bind_params(Tape& tape, const HeadParams& p, bool trainable) {
  HeadVars hv;
  for (const auto& b : p.blocks) {
    BlockVars bv;
    bv.channels = b.channels;
    bv.heads = b.heads;
    visit_fields(b, [&](const char* field, const Tensor& t, bool) {
      if (t.empty()) return;
      var_slot(bv, field) = trainable ? tape.parameter(t, param_name(b.block_id, field)) : tape.constant(t);
    });
    hv.blocks.push_back(std::move(bv));
  }
  return hv;
}

HeadVars bind_params(const HeadParams& p, const std::vector<Var>& leaves) {
  HeadVars hv;
  std::size_t k = 0;
  for (const auto& b : p.blocks) {
    BlockVars bv;
    bv.channels = b.channels;
    bv.heads = b.heads;
    visit_fields(b, [&](const char* field, const Tensor& t, bool) {
      if (t.empty()) return;
      if (k >= leaves.size()) throw ShapeError("bind_params: too few leaves");
      var_slot(bv, field) = leaves[k++];
    });
    hv.blocks.push_back(std::move(bv));
  }
  if (k != leaves.size()) throw ShapeError("bind_params: too many leaves");
  return hv;
}

// ---- single-instance building blocks ----

std::vector<Tensor> build_candidates(const fmpack::BlockFeatures& block, const std::vector<Candidate>& candidates) {
  std::vector<Tensor> out;
  const Tensor raw = block.patch_tensor();
  for (const auto& c : candidates) {
    if (c.cls) {
      if (!block.cls) throw ConfigError("CLS candidate requested on a block without a cls row");
      out.push_back(block.cls_tensor());
      continue;
    }
    if (c.h < 1 || c.w < 1 || c.h > block.h || c.w > block.w) {
      throw ConfigError("candidate " + c.str() + " exceeds block extent " + std::to_string(block.h) + "x" +
                        std::to_string(block.w));
    }
    out.push_back(c.h == block.h && c.w == block.w ? raw : ops::adaptive_max_pool_2d(raw, c.h, c.w));
  }
  return out;
}

namespace {

// x: (..., C) with attention-normalised rows per family.
Var attention_norm(Var x, std::size_t axis, BackboneFamily family) {
  const double c = static_cast<double>(x.shape().back());
  return family == BackboneFamily::cnn ? ops::l2_normalize(x, axis) : ops::scale(x, 1.0 / std::sqrt(c));
}

}  // namespace

Var pool_candidate(Var a, Var theta, double tau, BackboneFamily family, std::optional<Var> vit_gamma,
                   std::optional<Var> vit_beta) {
  const Shape& s = a.shape();
  if (s.size() != 2 && s.size() != 3) throw ShapeError("pool_candidate expects (P,C) or (H,W,C)");
  const std::size_t c = s.back();
  const std::size_t p = a.value().size() / c;
  if (p == 0) throw ShapeError("pool_candidate: empty candidate");
  Var flat = ops::reshape(a, {p, c});
  Var logits = ops::matmul(attention_norm(flat, 1, family), ops::reshape(theta, {c, 1}));
  Var w = ops::softmax(ops::scale(ops::reshape(logits, {1, p}), tau / std::sqrt(double(c))), 1);
  Var out = ops::reshape(ops::matmul(w, flat), {c});
  if (family == BackboneFamily::vit && vit_gamma && vit_beta) out = ops::layer_norm(out, *vit_gamma, *vit_beta);
  return out;
}

Var pool_image(std::span<const Var> candidates, Var mu, double tau, BackboneFamily family) {
  if (candidates.empty()) throw ShapeError("pool_image: no candidates");
  const Shape first = candidates[0].shape();
  for (const auto& v : candidates)
    if (v.shape() != first || first.size() != 1) throw ShapeError("pool_image: candidates must share one (C) shape");
  const std::size_t c = first[0];
  const std::size_t k = candidates.size();
  Var b = ops::stack(candidates);
  Var logits = ops::matmul(attention_norm(b, 1, family), ops::reshape(mu, {c, 1}));
  Var w = ops::softmax(ops::scale(ops::reshape(logits, {1, k}), tau / std::sqrt(double(c))), 1);
  return ops::reshape(ops::matmul(w, b), {c});
}

Var dba_scores(Var yk, Var zk, double eta) {
  const Shape& s = yk.shape();
  if (s.size() != 3 || s[0] != 1) throw ShapeError("dba_scores expects (1,S,d)");
  const std::size_t d = s[2];
  Var dist = ops::sum(ops::abs(ops::sub(yk, zk)), 2);
  Var z = ops::scale(ops::add_scalar(ops::scale(dist, -1.0), dba_center(d)), eta / dba_scale(d));
  return ops::softmax(z, 1);
}

Var mhce(Var x, Var kappa) { return ops::sigmoid(ops::matmul(x, kappa)); }

std::pair<Var, Var> cap_forward(Var p, Var q, const BlockVars& bv, const HeadConfig& cfg) {
  if (p.shape().size() != 2 || p.shape()[0] == 0) throw ShapeError("cap_forward: bag must be a non-empty (S,C)");
  const std::size_t s = p.shape()[0];
  const std::size_t c = p.shape()[1];
  const std::vector<ops::Segment> one{{0, s}};
  auto [vp, vq] = cap_batched(q, p, one, nullptr, bv, cfg);
  return {ops::reshape(vp, {1, c}), vq};
}

Var block_logits(Var vp, Var vq, double sigma) {
  const std::size_t l = vp.shape().at(0);
  const std::size_t c = vp.shape().at(1);
  return block_logits_batched(ops::reshape(vp, {1, l, c}), vq, sigma);
}

Var aggregate_logits(Var per_block) {
  const std::size_t l = per_block.shape().at(1);
  return ops::reshape(ops::logsumexp(per_block, 0), {1, l});
}

// ---- batched pipeline ----

std::pair<Var, Var> cap_batched(Var mq, Var ms, const std::vector<ops::Segment>& segments, const Tensor* mask,
                                const BlockVars& bv, const HeadConfig& cfg) {
  Tape& tape = *mq.tape;
  const std::size_t qn = mq.shape().at(0);
  const std::size_t s = ms.shape().at(0);
  const std::size_t c = ms.shape().at(1);
  const std::size_t l = segments.size();
  if (s == 0) throw ShapeError("cap: empty bag");
  if (mq.shape().at(1) != c) throw ShapeError("cap: query and bag channel counts differ");

  if (cfg.prototype == Prototype::mean) {
    Var w = ops::segment_softmax(tape.constant(Tensor({qn, s}, 0.0)), 1, segments, mask);
    Var weighted = ops::mul(ops::reshape(w, {qn, s, 1}), ops::reshape(ms, {1, s, c}));
    return {ops::segment_sum(weighted, 1, segments), mq};
  }

  const std::size_t h = bv.heads;
  if (h == 0 || c % h != 0) throw ShapeError("cap: channels do not split into heads");
  const std::size_t d = c / h;
  Var gamma = need(bv.ln_gamma, "ln_gamma");
  Var beta = need(bv.ln_beta, "ln_beta");
  Var wv = need(bv.wv, "wv");

  Var vq = ops::layer_norm(mq, gamma, beta);
  Var vs = ops::layer_norm(ms, gamma, beta);
  Var val_s = ops::matmul(vs, wv);
  Var val_q = ops::matmul(vq, wv);
  std::optional<Var> key_s, key_q;
  if (cfg.cross_attention) {
    Var wk = need(bv.wk, "wk");
    key_s = ops::matmul(vs, wk);
    key_q = ops::matmul(vq, wk);
  }

  // Values: V (x) G [+ K, or + v without cross-attention].
  Var bag_vals = ops::reshape(val_s, {1, s, c});
  Var query_vals = val_q;
  if (cfg.coexcitation) {
    Var g = mhce(vq, need(bv.kappa, "kappa"));
    bag_vals = ops::mul(bag_vals, ops::reshape(g, {qn, 1, c}));
    query_vals = ops::mul(query_vals, g);
  }
  if (cfg.skip_mode == SkipMode::in_attention) {
    bag_vals = ops::add(bag_vals, ops::reshape(key_s ? *key_s : vs, {1, s, c}));
    query_vals = ops::add(query_vals, key_q ? *key_q : vq);
  }

  Var weights = [&] {
    if (!cfg.cross_attention) return ops::segment_softmax(tape.constant(Tensor({qn, s, h}, 0.0)), 1, segments, mask);
    Var kq = ops::reshape(*key_q, {qn, 1, c});
    Var ks = ops::reshape(*key_s, {1, s, c});
    Var z;
    if (cfg.cas_kind == CasKind::dba) {
      Var dist = ops::sum(ops::reshape(ops::abs(ops::sub(kq, ks)), {qn, s, h, d}), 3);
      z = ops::scale(ops::add_scalar(ops::scale(dist, -1.0), dba_center(d)), cfg.eta / dba_scale(d));
    } else {
      Var dot = ops::sum(ops::reshape(ops::mul(kq, ks), {qn, s, h, d}), 3);
      z = ops::scale(dot, cfg.eta / std::sqrt(double(d)));
    }
    return ops::segment_softmax(z, 1, segments, mask);
  }();

  const std::size_t vb = bag_vals.shape()[0];
  Var weighted = ops::mul(ops::reshape(weights, {qn, s, h, 1}), ops::reshape(bag_vals, {vb, s, h, d}));
  Var vp = ops::reshape(ops::segment_sum(weighted, 1, segments), {qn, l, c});
  return {vp, query_vals};
}

Var block_logits_batched(Var vp, Var vq, double sigma) {
  const std::size_t qn = vp.shape().at(0);
  const std::size_t l = vp.shape().at(1);
  const std::size_t c = vp.shape().at(2);
  if (l < 2) throw ShapeError("block_logits: needs at least 2 classes");
  Var m = ops::mean(vp, 1, ops::SumOrder::canonical);
  Var a = ops::l2_normalize(ops::sub(vq, m), 1);
  Var b = ops::l2_normalize(ops::sub(vp, ops::reshape(m, {qn, 1, c})), 2);
  return ops::scale(ops::sum(ops::mul(ops::reshape(a, {qn, 1, c}), b), 2), 1.0 / sigma);
}

ImageBatch prepare_images(const std::vector<const fmpack::ImageRecord*>& images, const HeadConfig& cfg) {
  ImageBatch batch;
  const std::size_t ni = images.size();
  for (const auto* r : images) batch.ids.push_back(r->image_id);
  for (const auto& bc : cfg.blocks) {
    ImageBatch::Block blk;
    std::vector<Tensor> raw;
    std::size_t c = 0;
    Tensor gap;
    Tensor cls;
    for (std::size_t i = 0; i < ni; ++i) {
      const auto& bf = images[i]->block(bc.block_id);
      c = bf.c;
      if (i == 0) {
        gap = Tensor({ni, c});
        if (bf.cls) cls = Tensor({ni, c});
      }
      if (bf.c != c || gap.dim(1) != c) throw ShapeError("prepare_images: channel mismatch in block");
      const std::size_t p = bf.h * bf.w;
      std::vector<double> col(p);
      for (std::size_t ch = 0; ch < c; ++ch) {
        for (std::size_t k = 0; k < p; ++k) col[k] = bf.patches[k * c + ch];
        gap[i * c + ch] = canonical_sum(col) / double(p);
      }
      if (bf.cls && !cls.empty())
        for (std::size_t ch = 0; ch < c; ++ch) cls[i * c + ch] = (*bf.cls)[ch];

      if (cfg.pooling != Pooling::attention) continue;
      const auto cands = build_candidates(bf, bc.candidates);
      std::size_t spatial = 0;
      for (std::size_t k = 0; k < bc.candidates.size(); ++k) {
        if (bc.candidates[k].cls) continue;
        const Tensor& t = cands[k];
        const std::size_t pk = t.dim(0) * t.dim(1);
        if (i == 0) raw.emplace_back(Shape{ni, pk, c});
        std::copy(t.vec().begin(), t.vec().end(), raw[spatial].data().begin() + static_cast<std::ptrdiff_t>(i * pk * c));
        ++spatial;
      }
    }
    blk.gap = std::make_shared<const Tensor>(std::move(gap));
    if (!cls.empty()) blk.cls = std::make_shared<const Tensor>(std::move(cls));
    if (cfg.pooling == Pooling::attention) {
      int spatial = 0;
      for (const auto& cand : bc.candidates) blk.order.push_back(cand.cls ? -1 : spatial++);
      for (auto& t : raw) {
        // Forward-only normalisation of constants, same formula as the ops.
        Tape scratch;
        Tensor normed = attention_norm(scratch.constant(t), 2, cfg.family).value();
        blk.raw.push_back(std::make_shared<const Tensor>(std::move(t)));
        blk.normed.push_back(std::make_shared<const Tensor>(std::move(normed)));
      }
    }
    batch.blocks.push_back(std::move(blk));
  }
  return batch;
}

std::vector<Var> embed_images(Tape& tape, const HeadVars& hv, const ImageBatch& batch, const HeadConfig& cfg) {
  std::vector<Var> out;
  const std::size_t ni = batch.ids.size();
  const double tau = cfg.tau_value();
  for (std::size_t n = 0; n < batch.blocks.size(); ++n) {
    const auto& blk = batch.blocks[n];
    const auto& bv = hv.blocks.at(n);
    if (cfg.pooling == Pooling::gap) {
      out.push_back(tape.constant(blk.gap));
      continue;
    }
    const std::size_t c = blk.gap->dim(1);
    const double scale = tau / std::sqrt(double(c));
    Var theta = ops::reshape(need(bv.theta, "theta"), {c, 1});
    std::vector<Var> rows;
    for (int idx : blk.order) {
      if (idx < 0) {
        if (!blk.cls) throw ConfigError("CLS candidate on images without a cls row");
        rows.push_back(ops::reshape(tape.constant(blk.cls), {ni, 1, c}));
        continue;
      }
      const auto& raw = blk.raw[static_cast<std::size_t>(idx)];
      const std::size_t p = raw->dim(1);
      Var normed = tape.constant(blk.normed[static_cast<std::size_t>(idx)]);
      Var logits = ops::reshape(ops::matmul(ops::reshape(normed, {ni * p, c}), theta), {ni, p});
      Var w = ops::reshape(ops::softmax(ops::scale(logits, scale), 1), {ni, 1, p});
      Var pooled = ops::reshape(ops::bmm(w, tape.constant(raw)), {ni, c});
      if (cfg.family == BackboneFamily::vit) {
        pooled = ops::layer_norm(pooled, need(bv.vit_gamma, "vit_gamma"), need(bv.vit_beta, "vit_beta"));
      }
      rows.push_back(ops::reshape(pooled, {ni, 1, c}));
    }
    const std::size_t dn = rows.size();
    Var b = ops::concat(rows, 1);
    Var logits = ops::reshape(ops::matmul(ops::reshape(attention_norm(b, 2, cfg.family), {ni * dn, c}),
                                          ops::reshape(need(bv.mu, "mu"), {c, 1})),
                              {ni, dn});
    Var w = ops::reshape(ops::softmax(ops::scale(logits, scale), 1), {ni, 1, dn});
    out.push_back(ops::reshape(ops::bmm(w, b), {ni, c}));
  }
  return out;
}

std::optional<Tensor> self_mask(const BagLayout& bags, const QuerySet& queries, SelfInBag rule) {
  if (rule == SelfInBag::include) return std::nullopt;
  const std::size_t s = bags.support_rows.size();
  Tensor mask({queries.rows.size(), s}, 1.0);
  bool any = false;
  for (std::size_t k = 0; k < queries.rows.size(); ++k) {
    if (!queries.in_bag.at(k)) continue;
    const std::size_t pos = *queries.in_bag[k];
    for (const auto& seg : bags.segments) {
      if (pos >= seg.begin && pos < seg.end && seg.end - seg.begin > 1) {
        mask[k * s + pos] = 0.0;
        any = true;
      }
    }
  }
  if (!any) return std::nullopt;
  return mask;
}

Var head_logits(Tape& tape, const HeadVars& hv, const ImageBatch& batch, const BagLayout& bags,
                const QuerySet& queries, const HeadConfig& cfg) {
  if (bags.segments.size() < 2) throw ShapeError("head: needs at least 2 classes");
  const auto embeddings = embed_images(tape, hv, batch, cfg);
  const auto mask = self_mask(bags, queries, cfg.self_in_bag);
  std::vector<Var> per_block;
  for (std::size_t n = 0; n < embeddings.size(); ++n) {
    Var ms = ops::take(embeddings[n], 0, bags.support_rows);
    Var mq = ops::take(embeddings[n], 0, queries.rows);
    auto [vp, vq] = cap_batched(mq, ms, bags.segments, mask ? &*mask : nullptr, hv.blocks.at(n), cfg);
    Var logits = block_logits_batched(vp, vq, cfg.sigma);
    const Shape s = logits.shape();
    per_block.push_back(ops::reshape(logits, {1, s[0], s[1]}));
  }
  if (per_block.size() == 1) return ops::reshape(per_block[0], {queries.rows.size(), bags.segments.size()});
  return ops::logsumexp(ops::concat(per_block, 0), 0);
}

Tensor head_forward(const std::vector<std::vector<const fmpack::ImageRecord*>>& support,
                    const fmpack::ImageRecord& query, const HeadParams& params, const HeadConfig& cfg) {
  std::vector<const fmpack::ImageRecord*> images;
  BagLayout bags;
  QuerySet qs;
  std::optional<std::size_t> self;
  for (const auto& cls : support) {
    if (cls.empty()) throw ShapeError("head_forward: empty class bag");
    const std::size_t begin = images.size();
    for (const auto* r : cls) {
      if (r->image_id == query.image_id) self = images.size();
      bags.support_rows.push_back(images.size());
      images.push_back(r);
    }
    bags.segments.push_back({begin, images.size()});
  }
  if (self) {
    qs.rows.push_back(*self);
  } else {
    qs.rows.push_back(images.size());
    images.push_back(&query);
  }
  qs.in_bag.push_back(self);
  const auto batch = prepare_images(images, cfg);
  Tape tape;
  const auto hv = bind_params(tape, params, false);
  Var logits = head_logits(tape, hv, batch, bags, qs, cfg);
  return logits.value().reshaped({support.size()});
}

}  // namespace mivhead::head
