#include "modellab/mask.hpp"

#include <algorithm>

#include "modellab/errors.hpp"

namespace mlab {

void TokenLayout::validate() const {
  if (system < 0 || visual < 0 || user < 0) throw ContractError("token layout counts must be non-negative");
  if (size() < 1) throw ContractError("token layout must contain at least one token");
}

MaskPolicy parse_policy(std::string_view token) {
  if (token == "causal") return MaskPolicy::Causal;
  if (token == "bidir" || token == "visual-bidirectional") return MaskPolicy::VisualBidirectional;
  if (token == "novis" || token == "no-visual-attention") return MaskPolicy::NoVisualAttention;
  throw ContractError("unknown mask policy '" + std::string(token) + "'");
}

std::string_view policy_name(MaskPolicy policy) {
  switch (policy) {
    case MaskPolicy::Causal:
      return "causal";
    case MaskPolicy::VisualBidirectional:
      return "bidir";
    case MaskPolicy::NoVisualAttention:
      return "novis";
  }
  return "causal";
}

AttentionMask::AttentionMask(Index size, bool allow_all)
    : size_(size),
      allowed_(static_cast<std::size_t>(size * size), allow_all ? 1 : 0),
      bypass_(static_cast<std::size_t>(size), 0),
      support_(static_cast<std::size_t>(size)) {
  if (size < 1) throw ContractError("attention mask needs at least one position");
  if (allow_all) {
    for (Index i = 0; i < size; ++i) rebuild_support(i);
  }
}

bool AttentionMask::has_bypass() const noexcept {
  return std::any_of(bypass_.begin(), bypass_.end(), [](std::uint8_t b) { return b != 0; });
}

void AttentionMask::set_allowed(Index i, Index j, bool on) {
  auto& cell = allowed_[static_cast<std::size_t>(i * size_ + j)];
  if ((cell != 0) == on) return;
  cell = on ? 1 : 0;
  auto& row = support_[static_cast<std::size_t>(i)];
  if (on && (row.empty() || row.back() < j)) {
    row.push_back(j);
  } else if (on) {
    row.insert(std::lower_bound(row.begin(), row.end(), j), j);
  } else {
    row.erase(std::lower_bound(row.begin(), row.end(), j));
  }
}

void AttentionMask::set_bypassed(Index i, bool on) { bypass_[static_cast<std::size_t>(i)] = on ? 1 : 0; }

Index AttentionMask::allowed_count() const noexcept {
  return static_cast<Index>(std::count(allowed_.begin(), allowed_.end(), std::uint8_t{1}));
}

void AttentionMask::rebuild_support(Index i) {
  auto& row = support_[static_cast<std::size_t>(i)];
  row.clear();
  for (Index j = 0; j < size_; ++j) {
    if (allowed(i, j)) row.push_back(j);
  }
}

AttentionMask build_mask(const TokenLayout& layout, MaskPolicy policy) {
  layout.validate();
  const Index n = layout.size();
  AttentionMask mask(n);
  const bool bidir = policy == MaskPolicy::VisualBidirectional;
  for (Index i = 0; i < n; ++i) {
    for (Index j = 0; j < n; ++j) {
      bool ok = j <= i || (bidir && layout.is_visual(i) && layout.is_visual(j));
      if (ok) mask.set_allowed(i, j, true);
    }
    if (policy == MaskPolicy::NoVisualAttention && layout.is_visual(i)) mask.set_bypassed(i, true);
  }
  return mask;
}

MaskFormat parse_mask_format(std::string_view token) {
  if (token == "ascii") return MaskFormat::Ascii;
  if (token == "pgm") return MaskFormat::Pgm;
  throw ContractError("unsupported mask format '" + std::string(token) + "'");
}

std::string render_mask(const AttentionMask& mask, MaskFormat format) {
  const Index n = mask.size();
  std::string out;
  if (format == MaskFormat::Ascii) {
    if (n > 4096) throw ContractError("ascii rendering is limited to N <= 4096");
    out.reserve(static_cast<std::size_t>(n * (n + 1)));
    for (Index i = 0; i < n; ++i) {
      if (i) out.push_back('\n');
      const char on = mask.bypassed(i) ? 'B' : '#';
      for (Index j = 0; j < n; ++j) out.push_back(mask.allowed(i, j) ? on : '.');
    }
    return out;
  }
  out = "P5\n" + std::to_string(n) + " " + std::to_string(n) + "\n255\n";
  out.reserve(out.size() + static_cast<std::size_t>(n * n));
  for (Index i = 0; i < n; ++i) {
    for (Index j = 0; j < n; ++j) out.push_back(static_cast<char>(mask.allowed(i, j) ? 0xFF : 0x00));
  }
  return out;
}

}  // namespace mlab
