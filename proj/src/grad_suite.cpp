#include "mivhead/grad_suite.hpp"

#include <functional>
#include <random>

#include "mivhead/miv_head.hpp"
#include "mivhead/ops.hpp"
#include "mivhead/seeding.hpp"

namespace mivhead {

namespace {

Tensor normal(Shape shape, std::mt19937_64& rng, double sd = 1.0) {
  std::normal_distribution<double> n(0.0, sd);
  Tensor t(std::move(shape));
  for (std::size_t i = 0; i < t.size(); ++i) t[i] = n(rng);
  return t;
}

// Collapses any tensor into a scalar that depends on every element.
Var project(Var x, const Tensor& w) {
  Var prod = ops::mul(x, x.tape->constant(w));
  return ops::sum(ops::reshape(prod, {prod.value().size()}), 0);
}

GradSuiteEntry check_unary(const std::string& label, Shape shape, std::mt19937_64& rng, double tol,
                           const std::function<Var(Var)>& op) {
  const Tensor x = normal(shape, rng);
  Tape probe;
  const Tensor w = normal(op(probe.constant(x)).shape(), rng);
  auto f = [&](Tape&, const std::vector<Var>& p) { return project(op(p[0]), w); };
  return {label, grad_check(f, {{"x", x}}, 1e-5, tol)};
}

}  // namespace

std::vector<GradSuiteEntry> ops_grad_suite(std::uint64_t seed, double tol) {
  std::mt19937_64 rng(derive_seed(seed, "ops"));
  std::vector<GradSuiteEntry> out;
  out.push_back(check_unary("softmax", {3, 5}, rng, tol, [](Var x) { return ops::softmax(x, 1); }));
  out.push_back(check_unary("logsumexp", {4, 3}, rng, tol, [](Var x) { return ops::logsumexp(x, 0); }));
  out.push_back(check_unary("l2_normalize", {3, 6}, rng, tol, [](Var x) { return ops::l2_normalize(x, 1); }));
  out.push_back(check_unary("sigmoid", {7}, rng, tol, [](Var x) { return ops::sigmoid(x); }));
  out.push_back(check_unary("abs", {9}, rng, tol, [](Var x) { return ops::abs(x); }));
  out.push_back(check_unary("mean", {2, 3, 4}, rng, tol, [](Var x) { return ops::mean(x, 1); }));
  out.push_back(check_unary("adaptive_max_pool_2d", {5, 4, 2}, rng, tol,
                            [](Var x) { return ops::adaptive_max_pool_2d(x, 3, 2); }));
  const std::vector<ops::Segment> segs{{0, 2}, {2, 5}};
  out.push_back(check_unary("segment_softmax", {2, 5}, rng, tol,
                            [&](Var x) { return ops::segment_softmax(x, 1, segs); }));
  out.push_back(check_unary("segment_sum", {2, 5, 3}, rng, tol,
                            [&](Var x) { return ops::segment_sum(x, 1, segs); }));
  {
    const Tensor x = normal({3, 6}, rng), g = normal({6}, rng), b = normal({6}, rng), w = normal({3, 6}, rng);
    auto f = [&](Tape&, const std::vector<Var>& p) { return project(ops::layer_norm(p[0], p[1], p[2]), w); };
    out.push_back({"layer_norm", grad_check(f, {{"x", x}, {"gamma", g}, {"beta", b}}, 1e-5, tol)});
  }
  {
    const Tensor a = normal({2, 3, 4}, rng), b = normal({2, 4, 5}, rng), w = normal({2, 3, 5}, rng);
    auto f = [&](Tape&, const std::vector<Var>& p) { return project(ops::bmm(p[0], p[1]), w); };
    out.push_back({"bmm", grad_check(f, {{"a", a}, {"b", b}}, 1e-5, tol)});
  }
  {
    const Tensor a = normal({3, 1, 4}, rng), b = normal({1, 5, 4}, rng), w = normal({3, 5, 4}, rng);
    auto f = [&](Tape&, const std::vector<Var>& p) { return project(ops::mul(p[0], ops::sub(p[1], p[0])), w); };
    out.push_back({"broadcast mul/sub", grad_check(f, {{"a", a}, {"b", b}}, 1e-5, tol)});
  }
  {
    const Tensor x = normal({4, 3}, rng);
    const std::vector<std::size_t> labels{0, 2, 1, 2};
    auto f = [&](Tape&, const std::vector<Var>& p) { return ops::cross_entropy(p[0], labels); };
    out.push_back({"cross_entropy", grad_check(f, {{"logits", x}}, 1e-5, tol)});
  }
  return out;
}

namespace {

struct EpisodeShape {
  fmpack::BackboneFamily family;
  std::size_t channels, heads, ways;
  head::CasKind cas;
  head::SelfInBag self;
};

fmpack::BlockFeatures random_block(int id, std::size_t h, std::size_t w, std::size_t c, bool vit, std::mt19937_64& rng) {
  std::normal_distribution<float> n;
  fmpack::BlockFeatures b{id, h, w, c, std::vector<float>(h * w * c), std::nullopt};
  for (auto& v : b.patches) v = n(rng);
  if (vit) {
    b.cls.emplace(c);
    for (auto& v : *b.cls) v = n(rng);
  }
  return b;
}

}  // namespace

// The pooling attentions run at scale tau/sqrt(C) (hundreds), so the loss is
// strongly curved in theta and mu; a smaller step keeps the truncation error
// of the central difference well below the tolerance.
constexpr double kHeadStep = 1e-6;

std::vector<GradSuiteEntry> head_grad_suite(std::size_t episodes, std::uint64_t seed, double tol) {
  using fmpack::BackboneFamily;
  const EpisodeShape rotation[] = {
      {BackboneFamily::cnn, 16, 2, 3, head::CasKind::dba, head::SelfInBag::include},
      {BackboneFamily::vit, 8, 2, 2, head::CasKind::dba, head::SelfInBag::include},
      {BackboneFamily::cnn, 32, 4, 4, head::CasKind::dba, head::SelfInBag::exclude_if_bag_gt1},
      {BackboneFamily::vit, 16, 4, 3, head::CasKind::sdpa, head::SelfInBag::include},
      {BackboneFamily::cnn, 8, 1, 4, head::CasKind::sdpa, head::SelfInBag::exclude_if_bag_gt1},
  };
  std::vector<GradSuiteEntry> out;
  for (std::size_t e = 0; e < episodes; ++e) {
    const EpisodeShape& es = rotation[e % std::size(rotation)];
    std::mt19937_64 rng(derive_seed(seed, "episode/" + std::to_string(e)));
    std::uniform_int_distribution<std::size_t> shots(1, 4), ext(2, 4), ext_small(1, 2);
    const bool vit = es.family == BackboneFamily::vit;
    const std::size_t h2 = ext(rng), w2 = ext(rng), h1 = ext_small(rng), w1 = ext_small(rng);

    fmpack::PackManifest m;
    m.backbone_family = es.family;
    m.blocks = {{-2, h2, w2, es.channels}, {-1, h1, w1, es.channels}};

    std::vector<fmpack::ImageRecord> images;
    head::BagLayout bags;
    head::QuerySet qs;
    std::vector<std::size_t> labels;
    for (std::size_t l = 0; l < es.ways; ++l) {
      const std::size_t begin = images.size();
      const std::size_t s = shots(rng);
      for (std::size_t k = 0; k < s; ++k) {
        fmpack::ImageRecord r;
        r.image_id = "s" + std::to_string(images.size());
        r.blocks = {random_block(-2, h2, w2, es.channels, vit, rng), random_block(-1, h1, w1, es.channels, vit, rng)};
        bags.support_rows.push_back(images.size());
        qs.rows.push_back(images.size());
        qs.in_bag.push_back(images.size());
        labels.push_back(l);
        images.push_back(std::move(r));
      }
      bags.segments.push_back({begin, images.size()});
    }
    for (std::size_t l = 0; l < es.ways; ++l) {
      fmpack::ImageRecord r;
      r.image_id = "q" + std::to_string(l);
      r.blocks = {random_block(-2, h2, w2, es.channels, vit, rng), random_block(-1, h1, w1, es.channels, vit, rng)};
      qs.rows.push_back(images.size());
      qs.in_bag.push_back(std::nullopt);
      labels.push_back(l);
      images.push_back(std::move(r));
    }

    head::HeadConfig cfg;
    cfg.family = es.family;
    cfg.blocks = {{-2, {head::Candidate::shape(h2, w2), head::Candidate::shape(1, 1)}, es.heads},
                  {-1, {head::Candidate::shape(h1, w1)}, es.heads}};
    cfg.cas_kind = es.cas;
    cfg.self_in_bag = es.self;
    cfg = cfg.resolve(m);

    head::HeadParams params = head::init_params(cfg, m, derive_seed(seed, "init/" + std::to_string(e)));
    std::vector<Tensor> values;
    for (const auto& nt : params.named()) {
      Tensor t = nt.value;
      const double sd = nt.name.ends_with("theta") || nt.name.ends_with("mu") ? 0.01 : 0.1;
      const Tensor noise = normal(t.shape(), rng, sd);
      for (std::size_t i = 0; i < t.size(); ++i) t[i] += noise[i];
      values.push_back(std::move(t));
    }
    params.assign(values);

    std::vector<const fmpack::ImageRecord*> ptrs;
    for (const auto& r : images) ptrs.push_back(&r);
    const auto batch = head::prepare_images(ptrs, cfg);
    auto f = [&](Tape& tape, const std::vector<Var>& leaves) {
      const auto hv = head::bind_params(params, leaves);
      return ops::cross_entropy(head::head_logits(tape, hv, batch, bags, qs, cfg), labels);
    };
    std::string label = fmpack::to_string(es.family) + " C=" + std::to_string(es.channels) +
                        " h=" + std::to_string(es.heads) + " L=" + std::to_string(es.ways) +
                        (es.cas == head::CasKind::sdpa ? " sdpa" : " dba");
    out.push_back({std::move(label), grad_check(f, params.named(), kHeadStep, tol)});
  }
  return out;
}

}  // namespace mivhead
