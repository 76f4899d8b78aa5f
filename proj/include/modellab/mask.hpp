#pragma once

#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

#include "modellab/tensor.hpp"

namespace mlab {

/// Segmentation of one sequence into system prompt, image and user text:
/// positions [0, system) are system tokens, the next `visual` positions are
/// the image, and the remaining `user` positions hold prompt and answer.
struct TokenLayout {
  Index system = 0;
  Index visual = 0;
  Index user = 0;

  Index size() const noexcept { return system + visual + user; }
  /// 0-based visual index range [visual_begin, visual_end). The 1-based set
  /// {m+1, ..., m+n} maps here by subtracting one.
  Index visual_begin() const noexcept { return system; }
  Index visual_end() const noexcept { return system + visual; }
  bool is_visual(Index i) const noexcept { return i >= visual_begin() && i < visual_end(); }

  void validate() const;
  friend bool operator==(const TokenLayout&, const TokenLayout&) = default;
};

enum class MaskPolicy { Causal, VisualBidirectional, NoVisualAttention };

/// Accepts "causal", "bidir"/"visual-bidirectional", "novis"/"no-visual-attention".
MaskPolicy parse_policy(std::string_view token);
std::string_view policy_name(MaskPolicy policy);

/// Dense N x N attention pattern plus the query rows whose attention output
/// is discarded (the no-visual-attention ablation).
class AttentionMask {
 public:
  AttentionMask() = default;
  explicit AttentionMask(Index size, bool allow_all = false);

  /// Every query sees every key; used by the vision encoder.
  static AttentionMask full(Index size) { return AttentionMask(size, true); }

  Index size() const noexcept { return size_; }
  bool allowed(Index i, Index j) const { return allowed_[static_cast<std::size_t>(i * size_ + j)] != 0; }
  bool bypassed(Index i) const { return bypass_[static_cast<std::size_t>(i)] != 0; }
  bool has_bypass() const noexcept;

  void set_allowed(Index i, Index j, bool on);
  void set_bypassed(Index i, bool on);

  Index allowed_count() const noexcept;
  /// Allowed columns of row i, ascending.
  const std::vector<Index>& row_support(Index i) const { return support_[static_cast<std::size_t>(i)]; }

  friend bool operator==(const AttentionMask& a, const AttentionMask& b) {
    return a.size_ == b.size_ && a.allowed_ == b.allowed_ && a.bypass_ == b.bypass_;
  }

 private:
  void rebuild_support(Index i);

  Index size_ = 0;
  std::vector<std::uint8_t> allowed_;
  std::vector<std::uint8_t> bypass_;
  std::vector<std::vector<Index>> support_;
};

AttentionMask build_mask(const TokenLayout& layout, MaskPolicy policy);

enum class MaskFormat { Ascii, Pgm };
MaskFormat parse_mask_format(std::string_view token);

/// ASCII: rows joined by '\n' (no trailing newline); '#' allowed, '.' masked,
/// allowed entries of bypassed rows drawn as 'B'. PGM: binary P5 with one
/// pixel per entry, 255 allowed and 0 masked.
std::string render_mask(const AttentionMask& mask, MaskFormat format);

}  // namespace mlab
