#pragma once

#include <string>
#include <utility>
#include <vector>

#include "json.hpp"
#include "modellab/model.hpp"

namespace mlab {

struct LensEntry {
  Index token = 0;  // visual token index
  Index row = 0, col = 0;
  std::vector<std::pair<int, float>> top;  // (word id, score), descending
};

struct LensReport {
  enum class Kind { Input, Output };
  Kind kind = Kind::Input;
  Index grid = 1;
  std::vector<LensEntry> entries;

  nlohmann::ordered_json to_json() const;
  /// Binary PPM of the patch grid, `cell` pixels per patch. Gray level is the
  /// top-1 score (cosine mapped from [-1, 1], probability from [0, 1]).
  std::string to_ppm(Index cell = 8) const;
};

/// Cosine similarity of each row of `visual` [n, d] with each row of
/// `embed` [V, d]; zero-norm rows score 0. Returns [n][V].
std::vector<std::vector<float>> cosine_table(const Tensor& visual, const Tensor& embed);

/// Top-k words by cosine similarity to each visual row, `grid` patches per side.
LensReport input_lens(const Tensor& visual, const Tensor& embed, Index grid, Index k);
LensReport input_lens(const MllmModel& model, const AssembledBatch& batch, Index k);
LensReport output_lens(const MllmModel& model, const AssembledBatch& batch, Index k);

}  // namespace mlab
