#pragma once

#include <optional>
#include <random>
#include <span>
#include <utility>
#include <vector>

#include "modellab/mask.hpp"
#include "modellab/tensor.hpp"

namespace mlab {

/// y = x · weight (+ bias); weight is [in, out].
struct Linear {
  Tensor weight;
  Tensor bias;  // undefined when the projection has no bias

  Index in_features() const { return weight.dim(0); }
  Index out_features() const { return weight.dim(1); }
  Index param_count() const { return weight.numel() + (bias.defined() ? bias.numel() : 0); }

  /// Normal(0, stddev) weights, zero bias.
  static Linear random(Index in, Index out, bool with_bias, float stddev, std::mt19937_64& rng);
  /// Bit-identical copy in fresh leaves.
  Linear clone() const;
};

Tensor apply_linear(const Tensor& x, const Linear& layer);

struct AttnConfig {
  Index width = 128;
  Index heads = 4;
  float rope_base = 10000.0f;
  bool rotary = true;
  bool separate_visual_qkv = false;

  Index head_dim() const { return width / heads; }
  void validate() const;
};

/// Attention weights. The output projection is shared by both modalities;
/// the visual query/key/value projections are either all present or absent.
struct QkvParams {
  Linear q_text, k_text, v_text;
  Linear out;
  std::optional<Linear> q_vis, k_vis, v_vis;

  bool has_visual() const { return q_vis.has_value(); }
  static QkvParams random(Index width, bool qkv_bias, float stddev, float out_stddev, std::mt19937_64& rng);
  /// Sets the visual projections to exact copies of the text ones.
  void copy_init_visual();
  void drop_visual();
};

struct Qkv {
  Tensor q, k, v;
};

/// Projects each row of x[N, d]: rows inside the layout's visual span use the
/// visual weights when `cfg.separate_visual_qkv`, all other rows (and every
/// row otherwise) use the text weights. Rows are projected per segment
/// (system, visual, user) in both modes, so a copy-initialized model computes
/// exactly the same values as one without visual weights.
Qkv project_qkv(const Tensor& x, const TokenLayout& layout, const QkvParams& params, const AttnConfig& cfg);

/// Rotary embedding on [..., N, head_dim] tensors ("rotate half" pairing:
/// channel c pairs with c + head_dim/2). Position 0 is the identity.
std::pair<Tensor, Tensor> apply_rope(const Tensor& q, const Tensor& k, std::span<const Index> positions, float base);

/// Single-tensor rotary op used by apply_rope.
Tensor rotary(const Tensor& x, std::span<const Index> positions, float base);

/// Multi-head masked attention of the (already normalized) input, including
/// the output projection. Rows in mask.bypassed() contribute exactly zero, so
/// the caller's residual leaves those hidden states unchanged.
Tensor attend(const Tensor& x, const AttentionMask& mask, const QkvParams& params, const AttnConfig& cfg,
              const TokenLayout& layout);

}  // namespace mlab
