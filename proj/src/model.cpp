#include "lemevit/model.hpp"

#include <random>

namespace lemevit {

void VariantSpec::validate() const {
  const auto fail = [&](const std::string& what) {
    throw ConfigError("variant '" + name + "': " + what);
  };
  if (head_dim == 0) fail("head_dim must be positive");
  for (std::size_t i = 0; i < dims.size(); ++i) {
    if (dims[i] == 0 || dims[i] % head_dim != 0) {
      fail("D" + std::to_string(i + 1) + "=" + std::to_string(dims[i]) +
           " is not a positive multiple of head_dim " + std::to_string(head_dim));
    }
  }
  if (meta_len < 2) fail("meta_len must be at least 2");
  if (use_meta_stem && meta_dim0 == 0) fail("meta_dim0 must be positive");
  if (expansion == 0) fail("expansion must be positive");
  if (cpe_kernel % 2 == 0) fail("cpe_kernel must be odd");
  if (num_classes == 0) fail("num_classes must be positive");
  if (in_channels == 0) fail("in_channels must be positive");
}

VariantSpec variant(std::string_view name) {
  VariantSpec s;
  s.name = std::string(name);
  if (name == "tiny") {
    s.blocks = {1, 2, 2, 8, 2};
    s.dims = {64, 128, 192, 320};
  } else if (name == "small") {
    s.blocks = {1, 2, 2, 6, 2};
    s.dims = {96, 192, 320, 384};
  } else if (name == "base") {
    s.blocks = {2, 4, 4, 18, 4};
    s.dims = {96, 192, 384, 512};
  } else if (name == "tiny-narrow") {
    s.blocks = {1, 1, 1, 2, 1};
    s.dims = {32, 64, 96, 128};
    s.num_classes = 3;
  } else {
    throw ConfigError("unknown variant '" + std::string(name) + "'");
  }
  return s;
}

std::vector<std::string> variant_names() { return {"tiny", "small", "base", "tiny-narrow"}; }

void check_input_extent(std::size_t height, std::size_t width) {
  if (height == 0 || width == 0 || height % 32 != 0 || width % 32 != 0) {
    throw InputError("input extents " + std::to_string(height) + "x" + std::to_string(width) +
                     " must be positive multiples of 32");
  }
}

template <typename T>
Model<T> Model<T>::build(const VariantSpec& spec, std::uint64_t seed) {
  spec.validate();
  std::mt19937_64 rng(seed);
  Model m;
  m.spec_ = spec;
  m.meta_init_ = make_weight<T>({spec.meta_len, spec.initial_meta_dim()}, rng);
  m.image_stem_ = ImageStemParams<T>(spec.in_channels, spec.dims[0], rng);
  if (spec.use_meta_stem) m.meta_stem_ = MetaStemParams<T>(spec.meta_dim0, spec.dims[0], rng);

  const auto block_cfg = [&](BlockKind kind, std::size_t dim) {
    BlockConfig c;
    c.kind = kind;
    c.dim = dim;
    c.head_dim = spec.head_dim;
    c.expansion = spec.expansion;
    c.cpe_kernel = spec.cpe_kernel;
    c.dca_sequential = spec.dca_sequential;
    return c;
  };
  const std::array<BlockKind, 4> stage_kind = {
      BlockKind::DualCrossAttention, BlockKind::DualCrossAttention,
      BlockKind::StandardAttention, BlockKind::StandardAttention};
  for (std::size_t i = 0; i < spec.ca_blocks(); ++i) {
    m.stages_[0].emplace_back(block_cfg(BlockKind::CrossAttention, spec.dims[0]), rng);
  }
  for (std::size_t s = 0; s < 4; ++s) {
    if (s > 0) {
      m.downsample_[s - 1] = DownsampleParams<T>(spec.dims[s - 1], spec.dims[s], rng);
      m.meta_proj_[s - 1] = Linear<T>(spec.dims[s - 1], spec.dims[s], rng);
    }
    for (std::size_t i = 0; i < spec.blocks[s + 1]; ++i) {
      m.stages_[s].emplace_back(block_cfg(stage_kind[s], spec.dims[s]), rng);
    }
  }
  m.head_norm_image_ = LayerNormParams<T>(spec.dims[3]);
  if (spec.use_meta_pooling) m.head_norm_meta_ = LayerNormParams<T>(spec.dims[3]);
  m.head_ = Linear<T>(spec.dims[3], spec.num_classes, rng);
  return m;
}

template <typename T>
void Model<T>::visit(const ParamVisitor<T>& fn) {
  fn("meta_tokens", meta_init_);
  image_stem_.visit("stem.image", fn);
  if (spec_.use_meta_stem) meta_stem_.visit("stem.meta", fn);
  for (std::size_t s = 0; s < 4; ++s) {
    const std::string stage = "stage" + std::to_string(s + 1);
    if (s > 0) {
      downsample_[s - 1].visit(stage + ".downsample", fn);
      meta_proj_[s - 1].visit(stage + ".meta_proj", fn);
    }
    for (std::size_t i = 0; i < stages_[s].size(); ++i) {
      stages_[s][i].visit(stage + ".blocks." + std::to_string(i), fn);
    }
  }
  head_norm_image_.visit("head.norm_image", fn);
  if (spec_.use_meta_pooling) head_norm_meta_.visit("head.norm_meta", fn);
  head_.visit("head.fc", fn);
}

template <typename T>
std::size_t Model<T>::num_params() {
  std::size_t n = 0;
  visit([&](const std::string&, Tensor<T>& t) { n += t.numel(); });
  return n;
}

template <typename T>
void Model<T>::zero_grad() {
  visit([](const std::string&, Tensor<T>& t) { t.zero_grad(); });
}

template <typename T>
ForwardResult<T> Model<T>::forward(const Var<T>& image, const ForwardOptions& opts) {
  if (image.rank() != 3 || image.dim(0) != spec_.in_channels) {
    throw InputError("expected a [" + std::to_string(spec_.in_channels) + "xHxW] image, got " +
                     shape_str(image.shape()));
  }
  check_input_extent(image.dim(1), image.dim(2));
  auto& g = image.graph();
  ForwardResult<T> r;

  TokenGrid<T> grid = stem_image(image, image_stem_);
  Var<T> meta = g.param(meta_init_);
  if (spec_.use_meta_stem) meta = stem_meta(meta, meta_stem_);

  for (std::size_t s = 0; s < 4; ++s) {
    if (s > 0) {
      grid = downsample(grid, downsample_[s - 1]);
      meta = meta_proj_[s - 1](meta);
    }
    auto& blocks = stages_[s];
    for (std::size_t i = 0; i < blocks.size(); ++i) {
      const bool retain = opts.retain_attention && s == 1 && i + 1 == blocks.size();
      BlockOutput<T> out = run_block(grid, meta, blocks[i], retain);
      grid = out.image;
      meta = out.meta;
      if (retain) {
        r.meta_attention = std::move(out.meta_attention);
        r.attention_height = grid.height;
        r.attention_width = grid.width;
        r.attention_retained = true;
      }
    }
    r.features[s] = grid;
    r.meta[s] = meta;
  }

  Var<T> pooled = global_avg_pool(head_norm_image_(grid.tokens));
  if (spec_.use_meta_pooling) pooled = add(pooled, global_avg_pool(head_norm_meta_(meta)));
  r.logits = head_(pooled);
  return r;
}

template <typename T>
Tensor<T> forward_classify(Model<T>& model, const Tensor<T>& image) {
  Graph<T> g(GradMode::Disabled);
  return model.forward(g.constant(image)).logits.value();
}

template <typename T>
std::array<FeatureMap<T>, 4> forward_features(Model<T>& model, const Tensor<T>& image) {
  Graph<T> g(GradMode::Disabled);
  ForwardResult<T> r = model.forward(g.constant(image));
  std::array<FeatureMap<T>, 4> out;
  for (std::size_t s = 0; s < 4; ++s) {
    out[s] = {r.features[s].tokens.value(), r.features[s].height, r.features[s].width};
  }
  return out;
}

template <typename T>
std::vector<AttentionMap<T>> export_attention_maps(const ForwardResult<T>& result) {
  if (!result.attention_retained || !result.meta_attention.defined()) {
    throw ContractError(
        "attention maps were not retained; run forward with retain_attention on a model with "
        "at least one stage-2 DCA block");
  }
  const Tensor<T>& a = result.meta_attention;
  const std::size_t m = a.dim(0), n = a.dim(1);
  if (n != result.attention_height * result.attention_width) {
    throw ContractError("retained attention does not match the stage-2 grid");
  }
  std::vector<AttentionMap<T>> maps;
  maps.reserve(m);
  for (std::size_t i = 0; i < m; ++i) {
    std::vector<T> row(a.data().begin() + static_cast<std::ptrdiff_t>(i * n),
                       a.data().begin() + static_cast<std::ptrdiff_t>((i + 1) * n));
    maps.push_back({i, Tensor<T>({result.attention_height, result.attention_width}, std::move(row))});
  }
  return maps;
}

template <typename T>
std::vector<AttentionMap<T>> export_attention_maps(Model<T>& model, const Tensor<T>& image) {
  Graph<T> g(GradMode::Disabled);
  return export_attention_maps(model.forward(g.constant(image), {.retain_attention = true}));
}

#define LEMEVIT_INSTANTIATE_MODEL(T)                                                            \
  template class Model<T>;                                                                      \
  template Tensor<T> forward_classify<T>(Model<T>&, const Tensor<T>&);                          \
  template std::array<FeatureMap<T>, 4> forward_features<T>(Model<T>&, const Tensor<T>&);       \
  template std::vector<AttentionMap<T>> export_attention_maps<T>(const ForwardResult<T>&);      \
  template std::vector<AttentionMap<T>> export_attention_maps<T>(Model<T>&, const Tensor<T>&);

LEMEVIT_INSTANTIATE_MODEL(float)
LEMEVIT_INSTANTIATE_MODEL(double)

#undef LEMEVIT_INSTANTIATE_MODEL

}  // namespace lemevit
