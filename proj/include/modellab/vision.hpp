#pragma once

#include <random>
#include <span>
#include <string>
#include <vector>

#include "modellab/attention.hpp"
#include "modellab/tensor.hpp"

namespace mlab {

/// Toy patch encoder geometry. Tap layers are 1-based and refer to the hidden
/// state right after that block.
struct VisionConfig {
  Index image_size = 24;
  Index patch_size = 4;
  Index channels = 8;
  Index width = 64;
  Index layers = 6;
  Index heads = 4;
  Index mlp_hidden = 128;
  float position_stddev = 1.0f;
  std::vector<Index> taps{2, 4, 5};

  Index grid_side() const { return image_size / patch_size; }
  Index num_patches() const { return grid_side() * grid_side(); }
  Index patch_dim() const { return patch_size * patch_size * channels; }
  Index tap_count() const { return static_cast<Index>(taps.size()); }
  void validate() const;
};

struct EncoderBlock {
  Tensor attn_norm;
  QkvParams attn;
  Tensor mlp_norm;
  Linear fc1, fc2;
};

struct NamedTensor {
  std::string name;
  Tensor tensor;
};

/// Randomly initialized, frozen stand-in for a pretrained ViT: linear patch
/// embedding, learned position table, pre-norm bidirectional blocks.
class VisionEncoder {
 public:
  static VisionEncoder random(const VisionConfig& cfg, std::mt19937_64& rng);

  const VisionConfig& config() const { return cfg_; }

  /// [image_size, image_size, channels] -> [n, patch_dim], row-major over the
  /// patch grid, pixels then channels within a patch.
  Tensor patchify(const Tensor& image) const;
  /// Patch embedding before the position table is added: [n, width].
  Tensor embed_patches(const Tensor& image) const;

  void collect(std::vector<NamedTensor>& out, const std::string& prefix) const;

  Linear patch_embed;
  Tensor position;
  std::vector<EncoderBlock> blocks;

 private:
  VisionConfig cfg_;
  friend std::vector<Tensor> encode_image(const Tensor& image, const VisionEncoder& encoder);
};

/// One forward pass; returns the K tapped hidden states [n, width] in tap order.
std::vector<Tensor> encode_image(const Tensor& image, const VisionEncoder& encoder);

/// Two-layer MLP connector mapping K*d_V concatenated features to d_L.
struct Projector {
  Linear fc1, fc2;

  static Projector random(Index input_width, Index output_width, std::mt19937_64& rng);
  Index input_width() const { return fc1.in_features(); }
  Index output_width() const { return fc2.out_features(); }
  void collect(std::vector<NamedTensor>& out, const std::string& prefix) const;
};

/// Concatenates the K feature maps per patch and applies the projector. The
/// token count n is preserved.
Tensor connect(std::span<const Tensor> features, const Projector& proj);

}  // namespace mlab
