#pragma once

#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

#include "modellab/model.hpp"

namespace mlab {

/// Token ids of the synthetic grid-world vocabulary (ids 0-2 are pad/bos/eos).
namespace synth_token {
inline constexpr int kSystem = 3;
inline constexpr int kDescribe = 4;
inline constexpr int kAskColor = 5;
inline constexpr int kQuestionMark = 6;
inline constexpr int kColorBase = 8;   // up to 16 colors
inline constexpr int kShapeBase = 24;  // up to 4 shapes
inline constexpr int kRowBase = 32;    // up to 8 rows
inline constexpr int kColBase = 40;    // up to 8 columns
inline constexpr int kCellBase = 48;   // one token per cell, row-major, up to 8x8
inline constexpr int kMinVocab = 112;
}  // namespace synth_token

enum class Shape2D : std::uint8_t { Square, Frame, Cross, Diagonal };
inline constexpr int kShapeCount = 4;

/// One grid cell per patch: cell (r, c) is patch (r, c), drawn in channel
/// `color`. Patches outside the g x g grid stay blank.
struct SynthSpec {
  Index grid = 3;
  Index palette = 6;
  Index shapes = 4;
  Index image_size = 16;
  Index patch_size = 4;
  Index channels = 8;
  Index train_count = 512;
  Index eval_count = 128;

  Index patch_side() const { return image_size / patch_size; }
  void validate() const;
};

struct GridCell {
  int color = 0;
  int shape = 0;
};

struct SynthSample {
  Index grid = 1;
  std::vector<GridCell> cells;  // row-major g x g
  Tensor image;                 // [image_size, image_size, channels]
  std::vector<int> caption;     // (color, shape, row, col) per cell, then EOS
  std::vector<int> question;    // ASK_COLOR CELL(r, c) ?
  std::vector<int> answer;      // color EOS
  std::uint64_t image_hash = 0;
};

struct SynthDataset {
  std::vector<SynthSample> train;
  std::vector<SynthSample> eval;
};

/// Deterministic for a fixed seed. Every image is distinct, so train and eval
/// never share an image.
SynthDataset gen_dataset(std::uint64_t seed, const SynthSpec& spec);

Tensor render_image(const SynthSpec& spec, const std::vector<GridCell>& cells);
std::uint64_t hash_image(const std::vector<GridCell>& cells);

/// Caption-supervised sample for the alignment stage.
Sample caption_sample(const SynthSample& s);
/// Question-answer sample; only the answer is supervised.
Sample qa_sample(const SynthSample& s);

/// One JSON object per line: cells, question, answer, caption, split.
/// Images are re-rendered from the cells on load; lines carrying a
/// "provenance" key are skipped.
std::string dataset_to_jsonl(const SynthDataset& ds);
SynthDataset dataset_from_jsonl(std::string_view text, const SynthSpec& spec);

}  // namespace mlab
