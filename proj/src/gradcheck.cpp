#include "lemevit/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

namespace lemevit {

namespace {

double eval_loss(const GradLossFn& loss) {
  Graph<double> g(GradMode::Disabled);
  return loss(g).value()[0];
}

std::vector<std::size_t> pick_coords(std::size_t numel, std::size_t k, std::mt19937_64& rng) {
  std::vector<std::size_t> all(numel);
  std::iota(all.begin(), all.end(), std::size_t{0});
  if (k == 0 || k >= numel) return all;
  std::vector<std::size_t> out;
  std::sample(all.begin(), all.end(), std::back_inserter(out), k, rng);
  return out;
}

void perturb(Tensor<double>& t, std::mt19937_64& rng, double stddev) {
  std::normal_distribution<double> noise(0.0, stddev);
  for (auto& v : t.data()) v += noise(rng);
}

Var<double> weighted_sum(const Var<double>& x, const Tensor<double>& weights) {
  return sum(mul(x, x.graph().constant(weights)));
}

}  // namespace

GradcheckResult check_gradients(const std::string& name, const GradLeaves& leaves,
                                const GradLossFn& loss, const GradcheckOptions& opts) {
  for (auto& [leaf_name, t] : leaves) {
    t->set_requires_grad(true);
    t->clear_grad();
  }
  {
    Graph<double> g;
    g.backward(loss(g));
  }
  GradcheckResult r;
  r.name = name;
  std::mt19937_64 rng(opts.seed);
  for (auto& [leaf_name, t] : leaves) {
    std::vector<double> analytic(t->numel(), 0.0);
    if (t->has_grad()) std::copy(t->grad().begin(), t->grad().end(), analytic.begin());
    for (std::size_t i : pick_coords(t->numel(), opts.coords_per_tensor, rng)) {
      const double orig = (*t)[i];
      (*t)[i] = orig + opts.step;
      const double up = eval_loss(loss);
      (*t)[i] = orig - opts.step;
      const double down = eval_loss(loss);
      (*t)[i] = orig;
      const double numeric = (up - down) / (2.0 * opts.step);
      const double denom = std::max({std::abs(analytic[i]), std::abs(numeric), opts.floor});
      const double err = std::abs(analytic[i] - numeric) / denom;
      ++r.coords;
      if (err > r.max_rel_err || std::isnan(err)) {
        r.max_rel_err = std::isnan(err) ? INFINITY : err;
        r.worst = leaf_name + "[" + std::to_string(i) + "]";
      }
    }
    t->clear_grad();
  }
  return r;
}

GradcheckResult gradcheck_block(BlockKind kind, bool dca_sequential, const GradcheckOptions& opts) {
  constexpr std::size_t kDim = 8, kSide = 4, kMeta = 4;
  std::mt19937_64 rng(opts.seed + 17);
  BlockConfig cfg;
  cfg.kind = kind;
  cfg.dim = kDim;
  cfg.head_dim = 4;
  cfg.expansion = 4;
  cfg.dca_sequential = dca_sequential;
  BlockParams<double> params(cfg, rng);

  GradLeaves leaves;
  params.visit("block", [&](const std::string& n, Tensor<double>& t) {
    perturb(t, rng, 0.3);
    leaves.emplace_back(n, &t);
  });
  Tensor<double> image = random_uniform<double>({kSide * kSide, kDim}, rng, -1.0, 1.0);
  Tensor<double> meta = random_uniform<double>({kMeta, kDim}, rng, -1.0, 1.0);
  const Tensor<double> w_image = random_uniform<double>(image.shape(), rng, -1.0, 1.0);
  const Tensor<double> w_meta = random_uniform<double>(meta.shape(), rng, -1.0, 1.0);
  leaves.emplace_back("image", &image);
  leaves.emplace_back("meta", &meta);

  auto loss = [&](Graph<double>& g) {
    TokenGrid<double> grid{g.param(image), kSide, kSide};
    BlockOutput<double> out = run_block(grid, g.param(meta), params);
    Var<double> l = weighted_sum(out.meta, w_meta);
    // CA returns image tokens untouched; they carry no block gradient.
    if (kind != BlockKind::CrossAttention) l = add(l, weighted_sum(out.image.tokens, w_image));
    return l;
  };
  std::string name = to_string(kind);
  if (kind == BlockKind::DualCrossAttention) name += dca_sequential ? "-sequential" : "-parallel";
  return check_gradients(name + " block", leaves, loss, opts);
}

GradcheckResult gradcheck_model(const GradcheckOptions& opts) {
  VariantSpec spec = variant("tiny-narrow");
  spec.meta_len = 4;
  std::mt19937_64 rng(opts.seed + 29);
  Model<double> model = Model<double>::build(spec, opts.seed);

  GradLeaves leaves;
  model.visit([&](const std::string& n, Tensor<double>& t) {
    perturb(t, rng, 0.05);
    leaves.emplace_back(n, &t);
  });
  Tensor<double> image = random_uniform<double>({3, 64, 64}, rng, -1.0, 1.0);
  leaves.emplace_back("image", &image);
  const Tensor<double> w = random_uniform<double>({spec.num_classes}, rng, -1.0, 1.0);

  auto loss = [&](Graph<double>& g) {
    return weighted_sum(model.forward(g.param(image)).logits, w);
  };
  GradcheckOptions sampled = opts;
  if (sampled.coords_per_tensor == 0) sampled.coords_per_tensor = 3;
  return check_gradients("tiny-narrow model", leaves, loss, sampled);
}

std::vector<GradcheckResult> run_gradcheck_suite(const GradcheckOptions& opts) {
  return {gradcheck_block(BlockKind::CrossAttention, false, opts),
          gradcheck_block(BlockKind::DualCrossAttention, false, opts),
          gradcheck_block(BlockKind::DualCrossAttention, true, opts),
          gradcheck_block(BlockKind::StandardAttention, false, opts),
          gradcheck_model(opts)};
}

}  // namespace lemevit
