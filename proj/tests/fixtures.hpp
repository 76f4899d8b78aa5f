#pragma once

#include <random>

#include "modellab/model.hpp"
#include "support.hpp"

namespace mlab::testing {

inline ModelConfig tiny_config(MaskPolicy policy = MaskPolicy::Causal, bool sep = false, Index layers = 2) {
  ModelConfig c;
  c.vocab_size = 32;
  c.width = 16;
  c.layers = layers;
  c.heads = 2;
  c.mlp_hidden = 24;
  c.rope_base = 100.0f;
  c.policy = policy;
  c.separate_visual_qkv = sep;
  c.vision.image_size = 8;
  c.vision.patch_size = 4;
  c.vision.channels = 3;
  c.vision.width = 8;
  c.vision.layers = 3;
  c.vision.heads = 2;
  c.vision.mlp_hidden = 16;
  c.vision.taps = {3};
  return c;
}

inline Sample random_sample(std::mt19937_64& rng, const ModelConfig& cfg, Index sys = 2, Index usr = 3, Index ans = 2) {
  std::uniform_int_distribution<int> id(3, static_cast<int>(cfg.vocab_size) - 1);
  Sample s;
  for (Index i = 0; i < sys; ++i) s.system.push_back(id(rng));
  for (Index i = 0; i < usr; ++i) s.user.push_back(id(rng));
  for (Index i = 0; i < ans; ++i) s.answer.push_back(id(rng));
  const Index side = cfg.vision.image_size;
  s.image = randn({side, side, cfg.vision.channels}, rng, 1.0f, false);
  return s;
}

}  // namespace mlab::testing
