#pragma once

#include <span>
#include <vector>

#include "modellab/mask.hpp"
#include "modellab/tensor.hpp"

namespace mlab {

/// a[..., p, q] · b[..., q, r]. Batch extents must match, or one operand is a
/// plain matrix broadcast over the other's batch.
Tensor matmul(const Tensor& a, const Tensor& b);

/// Elementwise; `b` may also be a trailing-suffix shape of `a` (e.g. a bias).
Tensor add(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, float factor);
Tensor silu(const Tensor& a);
Tensor sum(const Tensor& a);

/// Swaps the two innermost axes.
Tensor transpose(const Tensor& a);
Tensor reshape(const Tensor& a, Shape shape);

Tensor concat_last_dim(std::span<const Tensor> parts);
/// Concatenates along axis 0.
Tensor concat_rows(std::span<const Tensor> parts);
/// Rows [begin, end) along axis 0.
Tensor slice_rows(const Tensor& a, Index begin, Index end);

/// table[vocab, d] gathered at `ids` -> [ids.size(), d].
Tensor embedding_lookup(const Tensor& table, std::span<const int> ids);

/// Mean next-token cross-entropy of logits[N, V] against targets[N]; entries
/// equal to `ignore_index` do not contribute. Throws if nothing is supervised.
Tensor cross_entropy_with_ignore_index(const Tensor& logits, std::span<const int> targets,
                                       int ignore_index);

/// x / sqrt(mean(x^2) + eps) * gain over the last axis.
Tensor layer_norm_rms(const Tensor& x, const Tensor& gain, float eps);

/// Row softmax of scores[..., N, N] restricted to the mask's allowed entries.
/// Masked entries are exactly 0 and receive no gradient.
Tensor masked_softmax(const Tensor& scores, const AttentionMask& mask);

/// [N, heads * head_dim] -> [heads, N, head_dim] and back.
Tensor split_heads(const Tensor& x, Index heads);
Tensor merge_heads(const Tensor& x);

/// factor * q_i · k_j for allowed (i, j), 0 elsewhere: [H, N, hd] x2 -> [H, N, N].
/// Only allowed entries are computed (and counted as multiply-adds).
Tensor masked_scores(const Tensor& q, const Tensor& k, const AttentionMask& mask, float factor);

/// sum over allowed j of p_ij v_j: [H, N, N] x [H, N, hd] -> [H, N, hd].
Tensor masked_weighted_sum(const Tensor& p, const Tensor& v, const AttentionMask& mask);

/// Zeroes every axis-0 row whose `keep` flag is false.
Tensor mask_rows(const Tensor& x, const std::vector<bool>& keep);

}  // namespace mlab
