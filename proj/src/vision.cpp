#include "modellab/vision.hpp"

#include <cmath>

#include "modellab/errors.hpp"
#include "modellab/ops.hpp"

namespace mlab {

namespace {

constexpr float kNormEps = 1e-6f;

Tensor random_normal(Shape shape, float stddev, std::mt19937_64& rng) {
  std::normal_distribution<float> dist(0.0f, 1.0f);
  std::vector<float> v(static_cast<std::size_t>(numel(shape)));
  for (auto& x : v) x = stddev * dist(rng);
  return Tensor(std::move(shape), std::move(v));
}

void push_linear(std::vector<NamedTensor>& out, const std::string& name, const Linear& l) {
  out.push_back({name + ".weight", l.weight});
  if (l.bias.defined()) out.push_back({name + ".bias", l.bias});
}

}  // namespace

void VisionConfig::validate() const {
  if (image_size < 1 || patch_size < 1 || image_size % patch_size != 0) {
    throw ContractError("image size " + std::to_string(image_size) + " not divisible by patch size " +
                        std::to_string(patch_size));
  }
  if (channels < 1 || width < 1 || layers < 1 || mlp_hidden < 1) throw ContractError("vision dims must be positive");
  if (taps.empty()) throw ContractError("at least one tap layer is required");
  for (std::size_t i = 0; i < taps.size(); ++i) {
    if (taps[i] < 1 || taps[i] > layers) {
      throw ContractError("tap layer " + std::to_string(taps[i]) + " outside [1, " + std::to_string(layers) + "]");
    }
    if (i > 0 && taps[i] <= taps[i - 1]) throw ContractError("tap layers must be strictly increasing");
  }
  AttnConfig{width, heads, 10000.0f, false, false}.validate();
}

VisionEncoder VisionEncoder::random(const VisionConfig& cfg, std::mt19937_64& rng) {
  cfg.validate();
  VisionEncoder enc;
  enc.cfg_ = cfg;
  const float in_std = 1.0f / std::sqrt(static_cast<float>(cfg.patch_dim()));
  const float w_std = 1.0f / std::sqrt(static_cast<float>(cfg.width));
  const float h_std = 1.0f / std::sqrt(static_cast<float>(cfg.mlp_hidden));
  enc.patch_embed = Linear::random(cfg.patch_dim(), cfg.width, true, in_std, rng);
  enc.position = random_normal({cfg.num_patches(), cfg.width}, cfg.position_stddev, rng);
  for (Index l = 0; l < cfg.layers; ++l) {
    EncoderBlock b;
    b.attn_norm = Tensor::full({cfg.width}, 1.0f);
    b.attn = QkvParams::random(cfg.width, true, w_std, w_std, rng);
    b.mlp_norm = Tensor::full({cfg.width}, 1.0f);
    b.fc1 = Linear::random(cfg.width, cfg.mlp_hidden, true, w_std, rng);
    b.fc2 = Linear::random(cfg.mlp_hidden, cfg.width, true, h_std, rng);
    enc.blocks.push_back(std::move(b));
  }
  return enc;
}

Tensor VisionEncoder::patchify(const Tensor& image) const {
  const Index s = cfg_.image_size, p = cfg_.patch_size, c = cfg_.channels, g = cfg_.grid_side();
  if (image.shape() != Shape{s, s, c}) {
    throw ShapeError("image " + to_string(image.shape()) + " does not match encoder input " + to_string({s, s, c}));
  }
  const auto iv = image.values();
  std::vector<float> out(static_cast<std::size_t>(g * g * p * p * c));
  std::size_t o = 0;
  for (Index pr = 0; pr < g; ++pr)
    for (Index pc = 0; pc < g; ++pc)
      for (Index y = 0; y < p; ++y)
        for (Index x = 0; x < p; ++x)
          for (Index ch = 0; ch < c; ++ch) out[o++] = iv[static_cast<std::size_t>(((pr * p + y) * s + pc * p + x) * c + ch)];
  return Tensor({g * g, p * p * c}, std::move(out));
}

Tensor VisionEncoder::embed_patches(const Tensor& image) const { return apply_linear(patchify(image), patch_embed); }

void VisionEncoder::collect(std::vector<NamedTensor>& out, const std::string& prefix) const {
  push_linear(out, prefix + "patch_embed", patch_embed);
  out.push_back({prefix + "position", position});
  for (std::size_t l = 0; l < blocks.size(); ++l) {
    const std::string b = prefix + "blocks." + std::to_string(l) + ".";
    const auto& blk = blocks[l];
    out.push_back({b + "attn_norm", blk.attn_norm});
    push_linear(out, b + "attn.q", blk.attn.q_text);
    push_linear(out, b + "attn.k", blk.attn.k_text);
    push_linear(out, b + "attn.v", blk.attn.v_text);
    push_linear(out, b + "attn.out", blk.attn.out);
    out.push_back({b + "mlp_norm", blk.mlp_norm});
    push_linear(out, b + "fc1", blk.fc1);
    push_linear(out, b + "fc2", blk.fc2);
  }
}

std::vector<Tensor> encode_image(const Tensor& image, const VisionEncoder& encoder) {
  const auto& cfg = encoder.cfg_;
  Tensor x = add(encoder.embed_patches(image), encoder.position);
  const Index n = cfg.num_patches();
  const AttentionMask mask = AttentionMask::full(n);
  const TokenLayout layout{0, 0, n};
  const AttnConfig attn_cfg{cfg.width, cfg.heads, 10000.0f, false, false};
  std::vector<Tensor> taps;
  taps.reserve(cfg.taps.size());
  std::size_t next_tap = 0;
  for (Index l = 0; l < cfg.layers; ++l) {
    const auto& blk = encoder.blocks[static_cast<std::size_t>(l)];
    x = add(x, attend(layer_norm_rms(x, blk.attn_norm, kNormEps), mask, blk.attn, attn_cfg, layout));
    x = add(x, apply_linear(silu(apply_linear(layer_norm_rms(x, blk.mlp_norm, kNormEps), blk.fc1)), blk.fc2));
    ++op_counters().encoder_blocks;
    if (next_tap < cfg.taps.size() && l + 1 == cfg.taps[next_tap]) {
      taps.push_back(x);
      ++next_tap;
    }
  }
  return taps;
}

Projector Projector::random(Index input_width, Index output_width, std::mt19937_64& rng) {
  Projector p;
  p.fc1 = Linear::random(input_width, output_width, true, 1.0f / std::sqrt(static_cast<float>(input_width)), rng);
  p.fc2 = Linear::random(output_width, output_width, true, 1.0f / std::sqrt(static_cast<float>(output_width)), rng);
  return p;
}

void Projector::collect(std::vector<NamedTensor>& out, const std::string& prefix) const {
  push_linear(out, prefix + "fc1", fc1);
  push_linear(out, prefix + "fc2", fc2);
}

Tensor connect(std::span<const Tensor> features, const Projector& proj) {
  if (features.empty()) throw ContractError("connect needs at least one feature map");
  for (const auto& f : features) {
    if (f.rank() != 2 || f.shape() != features[0].shape()) {
      throw ShapeError("feature maps disagree: " + to_string(features[0].shape()) + " vs " + to_string(f.shape()));
    }
  }
  const Index width = features[0].dim(1) * static_cast<Index>(features.size());
  if (width != proj.input_width()) {
    throw ShapeError("projector expects width " + std::to_string(proj.input_width()) + ", got " + std::to_string(width));
  }
  Tensor x = features.size() == 1 ? features[0] : concat_last_dim(features);
  return apply_linear(silu(apply_linear(x, proj.fc1)), proj.fc2);
}

}  // namespace mlab
