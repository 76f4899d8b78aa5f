#include "modellab/model.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

#include "modellab/errors.hpp"
#include "modellab/ops.hpp"

namespace mlab {

namespace {

Tensor random_normal(Shape shape, float stddev, std::mt19937_64& rng) {
  std::normal_distribution<float> dist(0.0f, stddev);
  std::vector<float> v(static_cast<std::size_t>(numel(shape)));
  for (auto& x : v) x = dist(rng);
  return Tensor(std::move(shape), std::move(v));
}

void push_linear(std::vector<ParamRef>& out, const std::string& name, ParamGroup group, const Linear& l) {
  out.push_back({name + ".weight", group, l.weight});
  if (l.bias.defined()) out.push_back({name + ".bias", group, l.bias});
}

int argmax_lowest(std::span<const float> row) {
  int best = 0;
  for (std::size_t j = 1; j < row.size(); ++j) {
    if (row[j] > row[static_cast<std::size_t>(best)]) best = static_cast<int>(j);
  }
  return best;
}

}  // namespace

void ModelConfig::validate() const {
  if (vocab_size < 3 || width < 1 || layers < 0 || heads < 1 || mlp_hidden < 1) {
    throw ContractError("model dims must be positive (vocab >= 3 for pad/bos/eos)");
  }
  attn_config().validate();
  vision.validate();
}

std::string_view group_name(ParamGroup group) {
  switch (group) {
    case ParamGroup::Embed:
      return "embed";
    case ParamGroup::TextQkv:
      return "text_qkv";
    case ParamGroup::VisualQkv:
      return "visual_qkv";
    case ParamGroup::AttnOut:
      return "attn_out";
    case ParamGroup::Mlp:
      return "mlp";
    case ParamGroup::LmHead:
      return "lm_head";
    case ParamGroup::Projector:
      return "projector";
    case ParamGroup::Encoder:
      return "encoder";
  }
  return "embed";
}

ParamGroup parse_group(std::string_view name) {
  for (ParamGroup g : kAllGroups) {
    if (group_name(g) == name) return g;
  }
  throw ContractError("unknown parameter group '" + std::string(name) + "'");
}

std::vector<int> AssembledBatch::targets() const {
  std::vector<int> t(tokens.size(), -1);
  for (std::size_t i = 0; i + 1 < tokens.size(); ++i) {
    if (loss_mask[i + 1]) t[i] = tokens[i + 1];
  }
  return t;
}

Index AssembledBatch::supervised() const {
  return std::accumulate(loss_mask.begin(), loss_mask.end(), Index{0});
}

MllmModel MllmModel::random(const ModelConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  std::mt19937_64 rng(seed);
  MllmModel m;
  m.cfg_ = cfg;
  m.encoder = VisionEncoder::random(cfg.vision, rng);

  const Index d = cfg.width;
  const float w_std = 1.0f / std::sqrt(static_cast<float>(d));
  const float depth = std::sqrt(2.0f * static_cast<float>(std::max<Index>(cfg.layers, 1)));
  m.embed = random_normal({cfg.vocab_size, d}, 1.0f, rng);
  for (Index l = 0; l < cfg.layers; ++l) {
    DecoderBlock b;
    b.attn_norm = Tensor::full({d}, 1.0f);
    b.attn = QkvParams::random(d, cfg.qkv_bias, w_std, w_std / depth, rng);
    if (cfg.separate_visual_qkv) b.attn.copy_init_visual();
    b.mlp_norm = Tensor::full({d}, 1.0f);
    b.gate = Linear::random(d, cfg.mlp_hidden, false, w_std, rng);
    b.up = Linear::random(d, cfg.mlp_hidden, false, w_std, rng);
    b.down = Linear::random(cfg.mlp_hidden, d, false, 1.0f / std::sqrt(static_cast<float>(cfg.mlp_hidden)) / depth, rng);
    m.blocks.push_back(std::move(b));
  }
  m.final_norm = Tensor::full({d}, 1.0f);
  m.head = Linear::random(d, cfg.vocab_size, false, w_std, rng);
  m.projector = Projector::random(cfg.taps() * cfg.vision.width, d, rng);
  return m;
}

std::vector<Tensor> MllmModel::encode(const Tensor& image) const {
  NoGradGuard guard;
  return encode_image(image, encoder);
}

AssembledBatch MllmModel::assemble(const Sample& sample) const {
  AssembledBatch b;
  const bool has_image = sample.image.defined() || !sample.features.empty();
  b.layout.system = static_cast<Index>(sample.system.size());
  b.layout.visual = has_image ? cfg_.vision.num_patches() : 0;
  b.layout.user = static_cast<Index>(sample.user.size() + sample.answer.size());
  b.layout.validate();
  b.image = sample.image;

  const auto check_ids = [&](const std::vector<int>& ids) {
    for (int id : ids) {
      if (id < 0 || id >= cfg_.vocab_size) {
        throw ContractError("token id " + std::to_string(id) + " outside vocabulary of " + std::to_string(cfg_.vocab_size));
      }
    }
  };
  check_ids(sample.system);
  check_ids(sample.user);
  check_ids(sample.answer);

  b.tokens = sample.system;
  b.tokens.insert(b.tokens.end(), static_cast<std::size_t>(b.layout.visual), -1);
  b.tokens.insert(b.tokens.end(), sample.user.begin(), sample.user.end());
  b.tokens.insert(b.tokens.end(), sample.answer.begin(), sample.answer.end());
  b.loss_mask.assign(b.tokens.size(), 0);
  std::fill(b.loss_mask.end() - static_cast<std::ptrdiff_t>(sample.answer.size()), b.loss_mask.end(), 1);

  std::vector<Tensor> parts;
  if (!sample.system.empty()) parts.push_back(embedding_lookup(embed, sample.system));
  if (has_image) {
    const std::vector<Tensor> feats = sample.features.empty() ? encode(sample.image) : sample.features;
    b.visual_tokens = connect(feats, projector);
    parts.push_back(b.visual_tokens);
  }
  std::vector<int> tail = sample.user;
  tail.insert(tail.end(), sample.answer.begin(), sample.answer.end());
  if (!tail.empty()) parts.push_back(embedding_lookup(embed, tail));
  b.embeddings = parts.size() == 1 ? parts[0] : concat_rows(parts);
  return b;
}

Tensor MllmModel::hidden_states(const Tensor& embeddings, const TokenLayout& layout, ForwardTrace* trace) const {
  if (embeddings.rank() != 2 || embeddings.dim(0) != layout.size() || embeddings.dim(1) != cfg_.width) {
    throw ShapeError("embeddings " + to_string(embeddings.shape()) + " do not match layout of " +
                     std::to_string(layout.size()) + " tokens");
  }
  const AttentionMask mask = build_mask(layout, cfg_.policy);
  const AttnConfig attn_cfg = cfg_.attn_config();
  Tensor h = embeddings;
  for (const auto& blk : blocks) {
    Tensor delta = attend(layer_norm_rms(h, blk.attn_norm, cfg_.norm_eps), mask, blk.attn, attn_cfg, layout);
    if (trace) {
      trace->attn_input.push_back(h);
      trace->attn_delta.push_back(delta);
    }
    h = add(h, delta);
    Tensor normed = layer_norm_rms(h, blk.mlp_norm, cfg_.norm_eps);
    Tensor gated = mul(silu(apply_linear(normed, blk.gate)), apply_linear(normed, blk.up));
    h = add(h, apply_linear(gated, blk.down));
  }
  return layer_norm_rms(h, final_norm, cfg_.norm_eps);
}

Tensor MllmModel::lm_head(const Tensor& hidden) const { return apply_linear(hidden, head); }

Tensor MllmModel::forward(const AssembledBatch& batch, ForwardTrace* trace) const {
  return lm_head(hidden_states(batch.embeddings, batch.layout, trace));
}

Tensor MllmModel::loss(const Tensor& logits, const AssembledBatch& batch) const {
  if (logits.rank() != 2 || logits.dim(0) != batch.layout.size() || logits.dim(1) != cfg_.vocab_size) {
    throw ShapeError("logits " + to_string(logits.shape()) + " inconsistent with batch");
  }
  const auto targets = batch.targets();
  return cross_entropy_with_ignore_index(logits, targets, -1);
}

Tensor MllmModel::training_loss(const AssembledBatch& batch) const {
  const auto targets = batch.targets();
  auto first = std::find_if(targets.begin(), targets.end(), [](int t) { return t >= 0; });
  if (first == targets.end()) throw ContractError("cross entropy with an empty supervision set");
  auto last = std::find_if(targets.rbegin(), targets.rend(), [](int t) { return t >= 0; }).base();
  const Index begin = first - targets.begin(), end = last - targets.begin();
  Tensor hidden = hidden_states(batch.embeddings, batch.layout);
  Tensor logits = lm_head(slice_rows(hidden, begin, end));
  return cross_entropy_with_ignore_index(logits, std::span<const int>(targets).subspan(static_cast<std::size_t>(begin),
                                                                                        static_cast<std::size_t>(end - begin)),
                                         -1);
}

std::vector<int> MllmModel::generate_greedy(const Sample& prompt, int max_new) const {
  if (max_new < 1) throw ContractError("max_new must be at least 1");
  NoGradGuard guard;
  Sample s = prompt;
  s.answer.clear();
  if (s.image.defined() && s.features.empty()) s.features = encode(s.image);
  std::vector<int> out;
  for (int step = 0; step < max_new; ++step) {
    const AssembledBatch b = assemble(s);
    const Index n = b.layout.size();
    Tensor hidden = hidden_states(b.embeddings, b.layout);
    Tensor logits = lm_head(slice_rows(hidden, n - 1, n));
    const int next = argmax_lowest(logits.values());
    out.push_back(next);
    if (next == token::kEos) break;
    s.user.push_back(next);
  }
  return out;
}

std::vector<std::vector<std::pair<int, float>>> MllmModel::logit_lens_output(const AssembledBatch& batch, Index k) const {
  if (k < 1 || k > cfg_.vocab_size) {
    throw ContractError("k = " + std::to_string(k) + " outside [1, " + std::to_string(cfg_.vocab_size) + "]");
  }
  if (batch.layout.visual < 1) throw ContractError("logit lens needs at least one visual token");
  NoGradGuard guard;
  const Tensor logits = forward(batch);
  const Index v = cfg_.vocab_size;
  std::vector<std::vector<std::pair<int, float>>> out;
  std::vector<float> probs(static_cast<std::size_t>(v));
  for (Index i = batch.layout.visual_begin(); i < batch.layout.visual_end(); ++i) {
    const auto row = logits.values().subspan(static_cast<std::size_t>(i * v), static_cast<std::size_t>(v));
    const float mx = *std::max_element(row.begin(), row.end());
    double z = 0.0;
    for (float x : row) z += std::exp(static_cast<double>(x - mx));
    for (Index j = 0; j < v; ++j) {
      probs[static_cast<std::size_t>(j)] = static_cast<float>(std::exp(static_cast<double>(row[static_cast<std::size_t>(j)] - mx)) / z);
    }
    out.push_back(top_k(probs, k));
  }
  return out;
}

std::vector<ParamRef> MllmModel::parameters() const {
  std::vector<ParamRef> out;
  out.push_back({"embed", ParamGroup::Embed, embed});
  for (std::size_t l = 0; l < blocks.size(); ++l) {
    const std::string p = "layers." + std::to_string(l) + ".";
    const auto& b = blocks[l];
    out.push_back({p + "attn_norm", ParamGroup::AttnOut, b.attn_norm});
    push_linear(out, p + "attn.q_text", ParamGroup::TextQkv, b.attn.q_text);
    push_linear(out, p + "attn.k_text", ParamGroup::TextQkv, b.attn.k_text);
    push_linear(out, p + "attn.v_text", ParamGroup::TextQkv, b.attn.v_text);
    if (b.attn.has_visual()) {
      push_linear(out, p + "attn.q_vis", ParamGroup::VisualQkv, *b.attn.q_vis);
      push_linear(out, p + "attn.k_vis", ParamGroup::VisualQkv, *b.attn.k_vis);
      push_linear(out, p + "attn.v_vis", ParamGroup::VisualQkv, *b.attn.v_vis);
    }
    push_linear(out, p + "attn.out", ParamGroup::AttnOut, b.attn.out);
    out.push_back({p + "mlp_norm", ParamGroup::Mlp, b.mlp_norm});
    push_linear(out, p + "mlp.gate", ParamGroup::Mlp, b.gate);
    push_linear(out, p + "mlp.up", ParamGroup::Mlp, b.up);
    push_linear(out, p + "mlp.down", ParamGroup::Mlp, b.down);
  }
  out.push_back({"final_norm", ParamGroup::LmHead, final_norm});
  push_linear(out, "lm_head", ParamGroup::LmHead, head);
  std::vector<NamedTensor> named;
  projector.collect(named, "projector.");
  for (auto& t : named) out.push_back({t.name, ParamGroup::Projector, t.tensor});
  named.clear();
  encoder.collect(named, "encoder.");
  for (auto& t : named) out.push_back({t.name, ParamGroup::Encoder, t.tensor});
  return out;
}

Index MllmModel::parameter_count() const {
  Index total = 0;
  for (const auto& p : parameters()) total += p.tensor.numel();
  return total;
}

void MllmModel::set_trainable(const std::set<ParamGroup>& groups) {
  for (auto& p : parameters()) p.tensor.set_requires_grad(groups.count(p.group) > 0);
}

void MllmModel::zero_grad() {
  for (auto& p : parameters()) p.tensor.clear_grad();
}

std::vector<std::vector<int>> generate_greedy_batch(const MllmModel& model, std::span<const Sample> prompts, int max_new) {
  std::vector<std::vector<int>> out;
  out.reserve(prompts.size());
  for (const auto& p : prompts) out.push_back(model.generate_greedy(p, max_new));
  return out;
}

std::vector<std::pair<int, float>> top_k(std::span<const float> scores, Index k) {
  if (k < 1 || k > static_cast<Index>(scores.size())) {
    throw ContractError("k = " + std::to_string(k) + " outside [1, " + std::to_string(scores.size()) + "]");
  }
  std::vector<int> idx(scores.size());
  std::iota(idx.begin(), idx.end(), 0);
  std::partial_sort(idx.begin(), idx.begin() + k, idx.end(), [&](int a, int b) {
    const float sa = scores[static_cast<std::size_t>(a)], sb = scores[static_cast<std::size_t>(b)];
    return sa > sb || (sa == sb && a < b);
  });
  std::vector<std::pair<int, float>> out;
  out.reserve(static_cast<std::size_t>(k));
  for (Index i = 0; i < k; ++i) out.emplace_back(idx[static_cast<std::size_t>(i)], scores[static_cast<std::size_t>(idx[static_cast<std::size_t>(i)])]);
  return out;
}

}  // namespace mlab
