#include "lemevit/blocks.hpp"

namespace lemevit {

std::string to_string(BlockKind kind) {
  switch (kind) {
    case BlockKind::CrossAttention: return "ca";
    case BlockKind::DualCrossAttention: return "dca";
    case BlockKind::StandardAttention: return "sa";
  }
  return "unknown";
}

void BlockConfig::validate() const {
  AttentionConfig{dim, head_dim, AttentionScaling::Standard}.validate();
  if (expansion == 0) throw ConfigError("block: expansion must be positive");
  if (cpe_kernel % 2 == 0) throw ConfigError("block: CPE kernel must be odd");
}

template <typename T>
BlockParams<T>::BlockParams(const BlockConfig& cfg, std::mt19937_64& rng) : config(cfg) {
  cfg.validate();
  const std::size_t d = cfg.dim;
  if (cfg.has_cpe()) cpe = Conv2dParams<T>(d, d, cfg.cpe_kernel, {1, cfg.cpe_kernel / 2, d}, rng);
  if (cfg.kind != BlockKind::CrossAttention) {
    norm_image_ffn = LayerNormParams<T>(d);
  }
  norm_image_attn = LayerNormParams<T>(d);
  norm_meta_attn = LayerNormParams<T>(d);
  norm_meta_ffn = LayerNormParams<T>(d);
  attn = MhaParams<T>(d, rng);
  ffn = FfnParams<T>(d, cfg.expansion, rng);
}

template <typename T>
void BlockParams<T>::visit(const std::string& prefix, const ParamVisitor<T>& fn) {
  if (cpe.defined()) cpe.visit(prefix + ".cpe", fn);
  norm_image_attn.visit(prefix + ".norm_image_attn", fn);
  norm_meta_attn.visit(prefix + ".norm_meta_attn", fn);
  if (norm_image_ffn.defined()) norm_image_ffn.visit(prefix + ".norm_image_ffn", fn);
  norm_meta_ffn.visit(prefix + ".norm_meta_ffn", fn);
  attn.visit(prefix + ".attn", fn);
  ffn.visit(prefix + ".ffn", fn);
}

template <typename T>
Var<T> grid_to_chw(const TokenGrid<T>& grid) {
  if (grid.tokens.dim(0) != grid.count()) {
    throw ContractError("token grid holds " + std::to_string(grid.tokens.dim(0)) +
                        " tokens but is " + std::to_string(grid.height) + "x" +
                        std::to_string(grid.width));
  }
  return reshape(transpose(grid.tokens), {grid.channels(), grid.height, grid.width});
}

template <typename T>
TokenGrid<T> chw_to_grid(const Var<T>& chw) {
  const std::size_t c = chw.dim(0), h = chw.dim(1), w = chw.dim(2);
  return {transpose(reshape(chw, {c, h * w})), h, w};
}

template <typename T>
TokenGrid<T> cpe(const TokenGrid<T>& grid, Conv2dParams<T>& conv) {
  if (grid.tokens.rank() != 2 || grid.tokens.dim(0) != grid.count()) {
    throw ContractError("cpe: " + shape_str(grid.tokens.shape()) + " tokens cannot form a " +
                        std::to_string(grid.height) + "x" + std::to_string(grid.width) + " grid");
  }
  if (grid.height < 2 || grid.width < 2) {
    throw ContractError("cpe: grid must be at least 2 tokens wide in each direction");
  }
  Var<T> pos = chw_to_grid(conv(grid_to_chw(grid))).tokens;
  return {add(grid.tokens, pos), grid.height, grid.width};
}

namespace {

template <typename T>
void check_widths(const TokenGrid<T>& grid, const Var<T>& meta, const BlockConfig& cfg) {
  if (grid.tokens.rank() != 2 || meta.rank() != 2 || grid.channels() != cfg.dim ||
      meta.dim(1) != cfg.dim) {
    throw ConfigError(to_string(cfg.kind) + " block of width " + std::to_string(cfg.dim) +
                      " got image " + shape_str(grid.tokens.shape()) + " and meta " +
                      shape_str(meta.shape()));
  }
  if (grid.tokens.dim(0) != grid.count()) {
    throw ContractError("token grid holds " + std::to_string(grid.tokens.dim(0)) +
                        " tokens but is " + std::to_string(grid.height) + "x" +
                        std::to_string(grid.width));
  }
}

AttentionConfig cross_config(const BlockConfig& cfg) {
  return {cfg.dim, cfg.head_dim, AttentionScaling::EntropyInvariant};
}

AttentionConfig self_config(const BlockConfig& cfg) {
  return {cfg.dim, cfg.head_dim, AttentionScaling::Standard};
}

}  // namespace

template <typename T>
BlockOutput<T> ca_block(const TokenGrid<T>& grid, const Var<T>& meta, BlockParams<T>& p,
                        bool retain_attention) {
  check_widths(grid, meta, p.config);
  BlockOutput<T> out;
  out.image = grid;
  Var<T> xn = p.norm_image_attn(grid.tokens);
  Var<T> mn = p.norm_meta_attn(meta);
  Var<T> m = add(meta, multi_head_attention(mn, xn, xn, cross_config(p.config), p.attn,
                                            retain_attention ? &out.meta_attention : nullptr));
  out.meta = add(m, p.ffn(p.norm_meta_ffn(m)));
  return out;
}

template <typename T>
BlockOutput<T> dca_block(const TokenGrid<T>& grid, const Var<T>& meta, BlockParams<T>& p,
                         bool retain_attention) {
  check_widths(grid, meta, p.config);
  if (grid.count() < 2 || meta.dim(0) < 2) {
    throw InputError("dca block needs at least 2 image and 2 meta tokens");
  }
  const AttentionConfig cfg = cross_config(p.config);
  BlockOutput<T> out;
  TokenGrid<T> x = p.config.has_cpe() ? cpe(grid, p.cpe) : grid;
  Var<T> xn = p.norm_image_attn(x.tokens);
  Var<T> mn = p.norm_meta_attn(meta);
  Tensor<T>* attn_sink = retain_attention ? &out.meta_attention : nullptr;

  Var<T> x1 = add(x.tokens, multi_head_attention(xn, mn, mn, cfg, p.attn));
  Var<T> m1;
  if (p.config.dca_sequential) {
    Var<T> xn1 = p.norm_image_attn(x1);
    m1 = add(meta, multi_head_attention(mn, xn1, xn1, cfg, p.attn, attn_sink));
  } else {
    m1 = add(meta, multi_head_attention(mn, xn, xn, cfg, p.attn, attn_sink));
  }

  out.image = {add(x1, p.ffn(p.norm_image_ffn(x1))), x.height, x.width};
  out.meta = add(m1, p.ffn(p.norm_meta_ffn(m1)));
  return out;
}

template <typename T>
BlockOutput<T> sa_block(const TokenGrid<T>& grid, const Var<T>& meta, BlockParams<T>& p) {
  check_widths(grid, meta, p.config);
  const AttentionConfig cfg = self_config(p.config);
  BlockOutput<T> out;

  TokenGrid<T> x = p.config.has_cpe() ? cpe(grid, p.cpe) : grid;
  Var<T> xn = p.norm_image_attn(x.tokens);
  Var<T> x1 = add(x.tokens, multi_head_attention(xn, xn, xn, cfg, p.attn));
  out.image = {add(x1, p.ffn(p.norm_image_ffn(x1))), x.height, x.width};

  Var<T> mn = p.norm_meta_attn(meta);
  Var<T> m1 = add(meta, multi_head_attention(mn, mn, mn, cfg, p.attn));
  out.meta = add(m1, p.ffn(p.norm_meta_ffn(m1)));
  return out;
}

template <typename T>
BlockOutput<T> run_block(const TokenGrid<T>& grid, const Var<T>& meta, BlockParams<T>& p,
                         bool retain_attention) {
  switch (p.config.kind) {
    case BlockKind::CrossAttention: return ca_block(grid, meta, p, retain_attention);
    case BlockKind::DualCrossAttention: return dca_block(grid, meta, p, retain_attention);
    case BlockKind::StandardAttention: return sa_block(grid, meta, p);
  }
  throw ConfigError("unknown block kind");
}

template <typename T>
ImageStemParams<T>::ImageStemParams(std::size_t in_channels, std::size_t dim,
                                    std::mt19937_64& rng)
    : conv1(in_channels, dim / 2, 3, {2, 1, 1}, rng), conv2(dim / 2, dim, 3, {2, 1, 1}, rng) {
  if (dim < 2) throw ConfigError("image stem width must be at least 2");
}

template <typename T>
void ImageStemParams<T>::visit(const std::string& prefix, const ParamVisitor<T>& fn) {
  conv1.visit(prefix + ".conv1", fn);
  conv2.visit(prefix + ".conv2", fn);
}

template <typename T>
TokenGrid<T> stem_image(const Var<T>& img, ImageStemParams<T>& p) {
  if (img.rank() != 3 || img.dim(0) != p.conv1.in_channels()) {
    throw InputError("stem: expected a [" + std::to_string(p.conv1.in_channels()) +
                     "xHxW] image, got " + shape_str(img.shape()));
  }
  if (img.dim(1) % 4 != 0 || img.dim(2) % 4 != 0) {
    throw InputError("stem: image extents " + std::to_string(img.dim(1)) + "x" +
                     std::to_string(img.dim(2)) + " are not divisible by 4");
  }
  return chw_to_grid(gelu(p.conv2(gelu(p.conv1(img)))));
}

template <typename T>
Var<T> stem_meta(const Var<T>& m0, MetaStemParams<T>& p) {
  if (m0.rank() != 2 || m0.dim(1) != p.fc1.in_features()) {
    throw ConfigError("meta stem: expected [Mx" + std::to_string(p.fc1.in_features()) +
                      "] meta tokens, got " + shape_str(m0.shape()));
  }
  return p.fc2(gelu(p.fc1(m0)));
}

template <typename T>
TokenGrid<T> downsample(const TokenGrid<T>& grid, DownsampleParams<T>& p) {
  if (grid.height < 2 || grid.width < 2) {
    throw InputError("downsample: grid " + std::to_string(grid.height) + "x" +
                     std::to_string(grid.width) + " is too small to halve");
  }
  return chw_to_grid(p.conv(grid_to_chw(grid)));
}

#define LEMEVIT_INSTANTIATE_BLOCKS(T)                                                           \
  template struct BlockParams<T>;                                                               \
  template struct ImageStemParams<T>;                                                           \
  template Var<T> grid_to_chw<T>(const TokenGrid<T>&);                                          \
  template TokenGrid<T> chw_to_grid<T>(const Var<T>&);                                          \
  template TokenGrid<T> cpe<T>(const TokenGrid<T>&, Conv2dParams<T>&);                          \
  template BlockOutput<T> ca_block<T>(const TokenGrid<T>&, const Var<T>&, BlockParams<T>&, bool); \
  template BlockOutput<T> dca_block<T>(const TokenGrid<T>&, const Var<T>&, BlockParams<T>&,     \
                                       bool);                                                   \
  template BlockOutput<T> sa_block<T>(const TokenGrid<T>&, const Var<T>&, BlockParams<T>&);     \
  template BlockOutput<T> run_block<T>(const TokenGrid<T>&, const Var<T>&, BlockParams<T>&,     \
                                       bool);                                                   \
  template TokenGrid<T> stem_image<T>(const Var<T>&, ImageStemParams<T>&);                      \
  template Var<T> stem_meta<T>(const Var<T>&, MetaStemParams<T>&);                              \
  template TokenGrid<T> downsample<T>(const TokenGrid<T>&, DownsampleParams<T>&);

LEMEVIT_INSTANTIATE_BLOCKS(float)
LEMEVIT_INSTANTIATE_BLOCKS(double)

#undef LEMEVIT_INSTANTIATE_BLOCKS

}  // namespace lemevit
