#include "modellab/attention.hpp"

#include <cmath>

#include "modellab/errors.hpp"
#include "modellab/ops.hpp"

namespace mlab {

namespace {

Tensor random_tensor(Shape shape, float stddev, std::mt19937_64& rng) {
  std::normal_distribution<float> dist(0.0f, stddev);
  std::vector<float> v(static_cast<std::size_t>(numel(shape)));
  for (auto& x : v) x = dist(rng);
  return Tensor(std::move(shape), std::move(v));
}

struct Segment {
  Index begin, end;
  bool visual;
};

std::vector<Segment> segments(const TokenLayout& layout, Index rows) {
  if (layout.visual == 0) return {{0, rows, false}};
  std::vector<Segment> out;
  if (layout.system > 0) out.push_back({0, layout.system, false});
  out.push_back({layout.visual_begin(), layout.visual_end(), true});
  if (layout.user > 0) out.push_back({layout.visual_end(), rows, false});
  return out;
}

Tensor project_rows(const Tensor& x, const std::vector<Segment>& segs, const Linear& text, const Linear* visual) {
  if (segs.size() == 1) return apply_linear(x, segs[0].visual && visual ? *visual : text);
  std::vector<Tensor> parts;
  parts.reserve(segs.size());
  for (const auto& s : segs) {
    parts.push_back(apply_linear(slice_rows(x, s.begin, s.end), s.visual && visual ? *visual : text));
  }
  return concat_rows(parts);
}

}  // namespace

Linear Linear::random(Index in, Index out, bool with_bias, float stddev, std::mt19937_64& rng) {
  Linear l;
  l.weight = random_tensor({in, out}, stddev, rng);
  if (with_bias) l.bias = Tensor::zeros({out});
  return l;
}

Linear Linear::clone() const {
  Linear l;
  l.weight = weight.detach();
  if (bias.defined()) l.bias = bias.detach();
  return l;
}

Tensor apply_linear(const Tensor& x, const Linear& layer) {
  Tensor y = matmul(x, layer.weight);
  return layer.bias.defined() ? add(y, layer.bias) : y;
}

void AttnConfig::validate() const {
  if (width < 1 || heads < 1 || width % heads != 0) {
    throw ContractError("attention width " + std::to_string(width) + " not divisible by " + std::to_string(heads) +
                        " heads");
  }
  if (rotary && head_dim() % 2 != 0) throw ContractError("rotary embedding needs an even head dimension");
  if (!(rope_base > 0.0f)) throw ContractError("rope base must be positive");
}

QkvParams QkvParams::random(Index width, bool qkv_bias, float stddev, float out_stddev, std::mt19937_64& rng) {
  QkvParams p;
  p.q_text = Linear::random(width, width, qkv_bias, stddev, rng);
  p.k_text = Linear::random(width, width, qkv_bias, stddev, rng);
  p.v_text = Linear::random(width, width, qkv_bias, stddev, rng);
  p.out = Linear::random(width, width, false, out_stddev, rng);
  return p;
}

void QkvParams::copy_init_visual() {
  q_vis = q_text.clone();
  k_vis = k_text.clone();
  v_vis = v_text.clone();
}

void QkvParams::drop_visual() {
  q_vis.reset();
  k_vis.reset();
  v_vis.reset();
}

Qkv project_qkv(const Tensor& x, const TokenLayout& layout, const QkvParams& params, const AttnConfig& cfg) {
  if (x.rank() != 2 || x.dim(0) != layout.size()) {
    throw ShapeError("project_qkv input " + to_string(x.shape()) + " does not match layout of " +
                     std::to_string(layout.size()) + " tokens");
  }
  if (cfg.separate_visual_qkv && !params.has_visual()) {
    throw ContractError("separate visual QKV requested but the layer has no visual projections");
  }
  const bool routed = cfg.separate_visual_qkv;
  const auto segs = segments(layout, x.dim(0));
  return Qkv{
      project_rows(x, segs, params.q_text, routed ? &*params.q_vis : nullptr),
      project_rows(x, segs, params.k_text, routed ? &*params.k_vis : nullptr),
      project_rows(x, segs, params.v_text, routed ? &*params.v_vis : nullptr),
  };
}

Tensor rotary(const Tensor& x, std::span<const Index> positions, float base) {
  if (x.rank() < 2) throw ShapeError("rotary expects [..., N, head_dim], got " + to_string(x.shape()));
  const Index n = x.dim(-2), hd = x.dim(-1);
  if (hd % 2 != 0) throw ContractError("rotary embedding needs an even head dimension, got " + std::to_string(hd));
  if (static_cast<Index>(positions.size()) != n) {
    throw ShapeError("rotary: " + std::to_string(positions.size()) + " positions for " + std::to_string(n) + " rows");
  }
  const Index half = hd / 2;
  std::vector<float> cosv(static_cast<std::size_t>(n * half)), sinv(cosv.size());
  for (Index i = 0; i < n; ++i) {
    for (Index c = 0; c < half; ++c) {
      const double inv = std::pow(static_cast<double>(base), -2.0 * static_cast<double>(c) / static_cast<double>(hd));
      const double angle = static_cast<double>(positions[static_cast<std::size_t>(i)]) * inv;
      cosv[static_cast<std::size_t>(i * half + c)] = static_cast<float>(std::cos(angle));
      sinv[static_cast<std::size_t>(i * half + c)] = static_cast<float>(std::sin(angle));
    }
  }
  const Index planes = x.numel() / (n * hd);
  const auto xv = x.values();
  std::vector<float> out(xv.size());
  for (Index t = 0; t < planes; ++t) {
    for (Index i = 0; i < n; ++i) {
      const std::size_t row = static_cast<std::size_t>((t * n + i) * hd);
      for (Index c = 0; c < half; ++c) {
        const float cs = cosv[static_cast<std::size_t>(i * half + c)], sn = sinv[static_cast<std::size_t>(i * half + c)];
        const float a = xv[row + static_cast<std::size_t>(c)], b = xv[row + static_cast<std::size_t>(c + half)];
        out[row + static_cast<std::size_t>(c)] = a * cs - b * sn;
        out[row + static_cast<std::size_t>(c + half)] = a * sn + b * cs;
      }
    }
  }
  return make_result("rotary", x.shape(), std::move(out), {x},
                     [x, cosv = std::move(cosv), sinv = std::move(sinv), planes, n, hd, half](
                         std::span<const float>, std::span<const float> g) {
                       auto gx = grad_sink(x);
                       if (gx.empty()) return;
                       for (Index t = 0; t < planes; ++t) {
                         for (Index i = 0; i < n; ++i) {
                           const std::size_t row = static_cast<std::size_t>((t * n + i) * hd);
                           for (Index c = 0; c < half; ++c) {
                             const float cs = cosv[static_cast<std::size_t>(i * half + c)];
                             const float sn = sinv[static_cast<std::size_t>(i * half + c)];
                             const float ga = g[row + static_cast<std::size_t>(c)];
                             const float gb = g[row + static_cast<std::size_t>(c + half)];
                             gx[row + static_cast<std::size_t>(c)] += ga * cs + gb * sn;
                             gx[row + static_cast<std::size_t>(c + half)] += -ga * sn + gb * cs;
                           }
                         }
                       }
                     });
}

std::pair<Tensor, Tensor> apply_rope(const Tensor& q, const Tensor& k, std::span<const Index> positions, float base) {
  return {rotary(q, positions, base), rotary(k, positions, base)};
}

Tensor attend(const Tensor& x, const AttentionMask& mask, const QkvParams& params, const AttnConfig& cfg,
              const TokenLayout& layout) {
  cfg.validate();
  const Index n = x.dim(0);
  if (mask.size() != n) {
    throw ShapeError("mask of size " + std::to_string(mask.size()) + " for " + std::to_string(n) + " tokens");
  }
  Qkv qkv = project_qkv(x, layout, params, cfg);
  Tensor q = split_heads(qkv.q, cfg.heads);
  Tensor k = split_heads(qkv.k, cfg.heads);
  Tensor v = split_heads(qkv.v, cfg.heads);
  if (cfg.rotary) {
    // Absolute sequence index for every token, visual span included.
    std::vector<Index> positions(static_cast<std::size_t>(n));
    for (Index i = 0; i < n; ++i) positions[static_cast<std::size_t>(i)] = i;
    std::tie(q, k) = apply_rope(q, k, positions, cfg.rope_base);
  }
  const float factor = 1.0f / std::sqrt(static_cast<float>(cfg.head_dim()));
  Tensor probs = masked_softmax(masked_scores(q, k, mask, factor), mask);
  Tensor out = apply_linear(merge_heads(masked_weighted_sum(probs, v, mask)), params.out);
  if (!mask.has_bypass()) return out;
  std::vector<bool> keep(static_cast<std::size_t>(n));
  for (Index i = 0; i < n; ++i) keep[static_cast<std::size_t>(i)] = !mask.bypassed(i);
  return mask_rows(out, keep);
}

}  // namespace mlab
