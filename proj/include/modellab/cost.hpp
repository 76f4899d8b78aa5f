#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "json.hpp"
#include "modellab/mask.hpp"
#include "modellab/model.hpp"

namespace mlab {

using Count = std::uint64_t;

/// Decoder-only language model dims.
struct LlmDims {
  Count width = 0;
  Count layers = 0;
  Count q_width = 0;
  Count kv_width = 0;
  Count mlp_hidden = 0;
  Count vocab = 0;
  bool qkv_bias = true;
  bool tied_embeddings = false;
};

/// Pre-norm ViT dims. The flags cover both CLIP-style and toy encoders.
struct VisionDims {
  Count width = 0;
  Count layers = 0;
  Count mlp_hidden = 0;
  Count patch_dim = 0;     // patch * patch * channels
  Count positions = 0;     // learned position rows (includes class token)
  bool class_token = false;
  bool patch_bias = false;
  bool norm_bias = false;  // LayerNorm vs gain-only RMS norm
  bool pre_norm = false;   // norm before the first block
  bool post_norm = false;  // norm after the last block
  bool qkv_bias = true;
  bool out_bias = true;
  bool mlp_bias = true;
};

struct CostDims {
  std::string name;
  LlmDims llm;
  VisionDims vision;
  Count taps = 1;  // encoder layers concatenated into the projector input
};

CostDims dims_from_config(const ModelConfig& cfg, std::string name = "config");

/// Preset catalog stored as versioned JSON.
struct DimsCatalog {
  int version = 0;
  std::map<std::string, LlmDims> llm;
  std::map<std::string, VisionDims> vision;
  std::map<std::string, CostDims> presets;

  const CostDims& preset(const std::string& name) const;
};

DimsCatalog parse_dims_catalog(const nlohmann::json& j);
DimsCatalog load_dims_catalog(const std::filesystem::path& path = MODELLAB_DIMS_FILE);

struct ParamReport {
  std::vector<std::pair<std::string, Count>> parts;  // named groups, fixed order
  Count total = 0;
  bool separate_visual_qkv = false;
  Count taps = 1;

  Count part(const std::string& name) const;
  nlohmann::ordered_json to_json() const;
};

ParamReport count_params(const CostDims& dims, bool separate_visual_qkv);
/// Params added by visual QKV copies: layers x (Wq + Wk + Wv + biases).
Count separate_qkv_delta(const LlmDims& llm);

struct FlopConventions {
  Count mac_flops = 2;
  Count mlp_matmuls = 2;  // 2 prices up + down only; 3 counts the gate
};

struct FlopReport {
  TokenLayout layout;
  MaskPolicy policy = MaskPolicy::Causal;
  FlopConventions conventions;
  Count allowed_entries = 0;
  Count attention_projections = 0;  // per layer
  Count attention_scores = 0;       // per layer, QK^T plus weighting of V
  Count attention_per_layer = 0;
  Count mlp_per_layer = 0;
  Count lm_head = 0;
  Count layers = 0;
  Count total = 0;

  nlohmann::ordered_json to_json() const;
  bool operator==(const FlopReport&) const = default;
};

/// Closed-form number of allowed query-key pairs under `policy`.
Count allowed_entries(const TokenLayout& layout, MaskPolicy policy);

/// LLM FLOPs with K/V priced at full width and scores over allowed entries.
FlopReport count_flops(const LlmDims& llm, const TokenLayout& layout, MaskPolicy policy,
                       const FlopConventions& conventions = {});

}  // namespace mlab
