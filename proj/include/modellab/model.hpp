#pragma once

#include <cstdint>
#include <functional>
#include <set>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "modellab/attention.hpp"
#include "modellab/mask.hpp"
#include "modellab/tensor.hpp"
#include "modellab/vision.hpp"

namespace mlab {

/// Reserved ids of the synthetic tokenizer.
namespace token {
inline constexpr int kPad = 0;
inline constexpr int kBos = 1;
inline constexpr int kEos = 2;
}  // namespace token

struct ModelConfig {
  Index vocab_size = 512;
  Index width = 128;
  Index layers = 4;
  Index heads = 4;
  Index mlp_hidden = 344;
  float rope_base = 10000.0f;
  float norm_eps = 1e-6f;
  bool qkv_bias = true;
  MaskPolicy policy = MaskPolicy::Causal;
  bool separate_visual_qkv = false;
  VisionConfig vision;

  Index taps() const { return vision.tap_count(); }
  AttnConfig attn_config() const { return {width, heads, rope_base, true, separate_visual_qkv}; }
  void validate() const;
};

enum class ParamGroup { Embed, TextQkv, VisualQkv, AttnOut, Mlp, LmHead, Projector, Encoder };

inline constexpr ParamGroup kAllGroups[] = {ParamGroup::Embed, ParamGroup::TextQkv,   ParamGroup::VisualQkv,
                                            ParamGroup::AttnOut, ParamGroup::Mlp,    ParamGroup::LmHead,
                                            ParamGroup::Projector, ParamGroup::Encoder};

std::string_view group_name(ParamGroup group);
ParamGroup parse_group(std::string_view name);

struct ParamRef {
  std::string name;
  ParamGroup group;
  Tensor tensor;
};

struct DecoderBlock {
  Tensor attn_norm;
  QkvParams attn;
  Tensor mlp_norm;
  Linear gate, up, down;
};

/// One training or evaluation example before embedding. A sample without an
/// image is a plain text sequence.
struct Sample {
  std::vector<int> system;
  std::vector<int> user;
  std::vector<int> answer;
  Tensor image;                       // [S, S, C] or undefined
  std::vector<Tensor> features;       // cached encoder taps (optional)
};

/// A sample spliced into one sequence (system, visual, user + answer).
struct AssembledBatch {
  std::vector<int> tokens;      // -1 at visual positions
  std::vector<int> loss_mask;   // 1 on answer positions only
  TokenLayout layout;
  Tensor image;
  Tensor visual_tokens;         // projector output [n, d_L]; undefined if n == 0
  Tensor embeddings;            // [N, d_L]

  /// Next-token targets aligned with logits rows; -1 where unsupervised.
  std::vector<int> targets() const;
  Index supervised() const;
};

/// Per-layer record of the attention sublayer, for information-flow tests.
struct ForwardTrace {
  std::vector<Tensor> attn_input;  // residual stream entering the sublayer
  std::vector<Tensor> attn_delta;  // what the sublayer adds to it
};

class MllmModel {
 public:
  /// Deterministic random initialization. The encoder is drawn first and the
  /// projector last, so variants that differ only in flags or tap count share
  /// every other weight. Visual QKV (when enabled) are copies of text QKV.
  static MllmModel random(const ModelConfig& cfg, std::uint64_t seed);

  const ModelConfig& config() const { return cfg_; }

  /// Encoder taps for an image (the encoder is frozen; result has no graph).
  std::vector<Tensor> encode(const Tensor& image) const;

  AssembledBatch assemble(const Sample& sample) const;

  /// Runs the decoder stack on given input embeddings; returns the final
  /// normalized hidden states [N, d_L].
  Tensor hidden_states(const Tensor& embeddings, const TokenLayout& layout, ForwardTrace* trace = nullptr) const;
  Tensor lm_head(const Tensor& hidden) const;
  Tensor forward(const AssembledBatch& batch, ForwardTrace* trace = nullptr) const;

  /// Mean next-token cross-entropy over answer tokens.
  Tensor loss(const Tensor& logits, const AssembledBatch& batch) const;
  /// Same objective, computing LM-head logits only on supervised rows.
  Tensor training_loss(const AssembledBatch& batch) const;

  /// Appends argmax tokens (ties to the lower id) until EOS or max_new.
  std::vector<int> generate_greedy(const Sample& prompt, int max_new) const;

  /// Softmax of the output logits at each visual position; top-k (id, prob).
  std::vector<std::vector<std::pair<int, float>>> logit_lens_output(const AssembledBatch& batch, Index k) const;

  std::vector<ParamRef> parameters() const;
  Index parameter_count() const;
  /// requires_grad on exactly the listed groups.
  void set_trainable(const std::set<ParamGroup>& groups);
  void zero_grad();

  Tensor embed;  // word embeddings [vocab, d_L]
  std::vector<DecoderBlock> blocks;
  Tensor final_norm;
  Linear head;
  Projector projector;
  VisionEncoder encoder;

 private:
  ModelConfig cfg_;
};

/// Greedy generation over several prompts; each prompt is decoded
/// independently of the others.
std::vector<std::vector<int>> generate_greedy_batch(const MllmModel& model, std::span<const Sample> prompts,
                                                    int max_new);

/// Top-k of a score vector, descending, ties broken by lower index.
std::vector<std::pair<int, float>> top_k(std::span<const float> scores, Index k);

}  // namespace mlab
