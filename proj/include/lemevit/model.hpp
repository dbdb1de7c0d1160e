#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

#include "lemevit/blocks.hpp"

namespace lemevit {

/// Architecture description of one model variant.
///
/// Stage layout: stem → S0 CA blocks and S1 DCA blocks at stride 4 / D1 →
/// downsample → S2 DCA at stride 8 / D2 → downsample → S3 SA at stride 16 /
/// D3 → downsample → S4 SA at stride 32 / D4 → head. The CA stage shares the
/// first stage's resolution and width.
struct VariantSpec {
  std::string name = "custom";
  std::array<std::size_t, 5> blocks{};  // S0..S4
  std::array<std::size_t, 4> dims{};    // D1..D4
  std::size_t meta_len = 16;
  std::size_t meta_dim0 = 64;
  std::size_t head_dim = 32;
  std::size_t expansion = 4;
  std::size_t cpe_kernel = 3;
  std::size_t num_classes = 1000;
  std::size_t in_channels = 3;

  bool use_ca_stage = true;
  bool use_meta_stem = true;
  bool use_meta_pooling = true;
  bool dca_sequential = false;

  /// Throws ConfigError on any inconsistency.
  void validate() const;
  /// Width of the learnable initial meta tokens: D0, or D1 when the meta stem is disabled.
  std::size_t initial_meta_dim() const { return use_meta_stem ? meta_dim0 : dims[0]; }
  /// Blocks per stage after applying the CA toggle: stage 0 runs S0 + S1 blocks.
  std::size_t ca_blocks() const { return use_ca_stage ? blocks[0] : 0; }
};

/// Named registry: "tiny", "small", "base" (published sizes) and "tiny-narrow"
/// (a desk-scale variant for fast tests, not a published size).
VariantSpec variant(std::string_view name);
std::vector<std::string> variant_names();

/// Throws InputError unless both extents are positive multiples of 32.
void check_input_extent(std::size_t height, std::size_t width);

struct ForwardOptions {
  bool retain_attention = false;
};

template <typename T>
struct ForwardResult {
  std::array<TokenGrid<T>, 4> features;  // image tokens at stride 4/8/16/32
  std::array<Var<T>, 4> meta;            // meta tokens after each stage
  Var<T> logits;
  bool attention_retained = false;
  /// Meta-query attention of the last stage-2 DCA block, head-averaged [M×N].
  Tensor<T> meta_attention;
  std::size_t attention_height = 0;
  std::size_t attention_width = 0;
};

template <typename T>
class Model {
 public:
  Model() = default;

  /// Deterministic in (spec, seed).
  static Model build(const VariantSpec& spec, std::uint64_t seed);

  const VariantSpec& spec() const noexcept { return spec_; }

  /// Visits every parameter tensor with a stable, unique dotted name.
  void visit(const ParamVisitor<T>& fn);
  std::size_t num_params();
  void zero_grad();

  Tensor<T>& meta_tokens() noexcept { return meta_init_; }

  /// Full forward pass on a [C×H×W] image.
  ForwardResult<T> forward(const Var<T>& image, const ForwardOptions& opts = {});

 private:
  VariantSpec spec_;
  Tensor<T> meta_init_;
  ImageStemParams<T> image_stem_;
  MetaStemParams<T> meta_stem_;
  std::array<std::vector<BlockParams<T>>, 4> stages_;
  std::array<DownsampleParams<T>, 3> downsample_;
  std::array<Linear<T>, 3> meta_proj_;
  LayerNormParams<T> head_norm_image_;
  LayerNormParams<T> head_norm_meta_;
  Linear<T> head_;
};

/// Logits for one image, computed without gradient recording.
template <typename T>
Tensor<T> forward_classify(Model<T>& model, const Tensor<T>& image);

/// The four stride-4/8/16/32 image-token grids as [N×D] tensors.
template <typename T>
struct FeatureMap {
  Tensor<T> tokens;
  std::size_t height = 0;
  std::size_t width = 0;
};

template <typename T>
std::array<FeatureMap<T>, 4> forward_features(Model<T>& model, const Tensor<T>& image);

/// One meta token's attention over the stride-8 image grid, [H/8 × W/8].
template <typename T>
struct AttentionMap {
  std::size_t meta_index = 0;
  Tensor<T> map;
};

/// Splits the retained meta-query attention into per-meta-token spatial maps.
/// Throws ContractError when the forward pass ran without retention.
template <typename T>
std::vector<AttentionMap<T>> export_attention_maps(const ForwardResult<T>& result);

/// Runs a retaining forward pass and exports the maps.
template <typename T>
std::vector<AttentionMap<T>> export_attention_maps(Model<T>& model, const Tensor<T>& image);

}  // namespace lemevit
