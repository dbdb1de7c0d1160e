#pragma once

// The three attention block types plus the token-grid plumbing around them.
//
// Every block is pre-norm: LN → attention → residual, LN → FFN → residual.
// Image and meta streams have their own LayerNorms but run through the same
// attention projections and the same FFN weights. CPE (residual depthwise
// conv over the 2-D grid) is applied to image tokens at block entry in DCA
// and SA blocks; the CA block leaves image tokens untouched.

#include <cstddef>
#include <random>
#include <string>

#include "lemevit/attention.hpp"

namespace lemevit {

enum class BlockKind { CrossAttention, DualCrossAttention, StandardAttention };

std::string to_string(BlockKind kind);

struct BlockConfig {
  BlockKind kind = BlockKind::DualCrossAttention;
  std::size_t dim = 64;
  std::size_t head_dim = 32;
  std::size_t expansion = 4;
  std::size_t cpe_kernel = 3;
  bool use_cpe = true;
  /// DCA only: update image tokens first, then let meta tokens attend to the
  /// updated image tokens. Default is the parallel dual-branch form.
  bool dca_sequential = false;

  void validate() const;
  bool has_cpe() const { return use_cpe && kind != BlockKind::CrossAttention; }
};

/// Tokens [N×D] laid out row-major over a height×width grid.
template <typename T>
struct TokenGrid {
  Var<T> tokens;
  std::size_t height = 0;
  std::size_t width = 0;

  std::size_t count() const { return height * width; }
  std::size_t channels() const { return tokens.dim(1); }
};

template <typename T>
struct BlockParams {
  BlockConfig config;
  Conv2dParams<T> cpe;  // depthwise k×k; absent in CA blocks
  LayerNormParams<T> norm_image_attn;
  LayerNormParams<T> norm_meta_attn;
  LayerNormParams<T> norm_image_ffn;  // absent in CA blocks
  LayerNormParams<T> norm_meta_ffn;
  MhaParams<T> attn;
  FfnParams<T> ffn;

  BlockParams() = default;
  BlockParams(const BlockConfig& cfg, std::mt19937_64& rng);

  void visit(const std::string& prefix, const ParamVisitor<T>& fn);
};

template <typename T>
struct BlockOutput {
  TokenGrid<T> image;
  Var<T> meta;
  /// Head-averaged attention of meta queries over image keys [M×N], when
  /// retention was requested and the block has that branch (CA, DCA).
  Tensor<T> meta_attention;
};

/// x + depthwise_conv(x) over the grid.
template <typename T>
TokenGrid<T> cpe(const TokenGrid<T>& grid, Conv2dParams<T>& conv);

template <typename T>
BlockOutput<T> ca_block(const TokenGrid<T>& grid, const Var<T>& meta, BlockParams<T>& p,
                        bool retain_attention = false);
template <typename T>
BlockOutput<T> dca_block(const TokenGrid<T>& grid, const Var<T>& meta, BlockParams<T>& p,
                         bool retain_attention = false);
template <typename T>
BlockOutput<T> sa_block(const TokenGrid<T>& grid, const Var<T>& meta, BlockParams<T>& p);

/// Dispatches on p.config.kind.
template <typename T>
BlockOutput<T> run_block(const TokenGrid<T>& grid, const Var<T>& meta, BlockParams<T>& p,
                         bool retain_attention = false);

/// Two 3×3 stride-2 convs (3 → D1/2 → D1), each followed by GELU.
template <typename T>
struct ImageStemParams {
  Conv2dParams<T> conv1, conv2;

  ImageStemParams() = default;
  ImageStemParams(std::size_t in_channels, std::size_t dim, std::mt19937_64& rng);
  void visit(const std::string& prefix, const ParamVisitor<T>& fn);
};

/// Linear D0→D1, GELU, Linear D1→D1.
template <typename T>
struct MetaStemParams {
  Linear<T> fc1, fc2;

  MetaStemParams() = default;
  MetaStemParams(std::size_t in_dim, std::size_t dim, std::mt19937_64& rng)
      : fc1(in_dim, dim, rng), fc2(dim, dim, rng) {}
  void visit(const std::string& prefix, const ParamVisitor<T>& fn) {
    fc1.visit(prefix + ".fc1", fn);
    fc2.visit(prefix + ".fc2", fn);
  }
};

/// One 3×3 stride-2 padding-1 conv D_k → D_{k+1}.
template <typename T>
struct DownsampleParams {
  Conv2dParams<T> conv;

  DownsampleParams() = default;
  DownsampleParams(std::size_t in_dim, std::size_t out_dim, std::mt19937_64& rng)
      : conv(in_dim, out_dim, 3, {2, 1, 1}, rng) {}
  void visit(const std::string& prefix, const ParamVisitor<T>& fn) { conv.visit(prefix + ".conv", fn); }
};

/// img is [3×H×W] with H, W divisible by 4; yields an (H/4)×(W/4) grid.
template <typename T>
TokenGrid<T> stem_image(const Var<T>& img, ImageStemParams<T>& p);

template <typename T>
Var<T> stem_meta(const Var<T>& m0, MetaStemParams<T>& p);

template <typename T>
TokenGrid<T> downsample(const TokenGrid<T>& grid, DownsampleParams<T>& p);

/// [N×D] grid → [D×H×W] and back.
template <typename T>
Var<T> grid_to_chw(const TokenGrid<T>& grid);
template <typename T>
TokenGrid<T> chw_to_grid(const Var<T>& chw);

}  // namespace lemevit
