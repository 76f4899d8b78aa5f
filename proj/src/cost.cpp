#include "modellab/cost.hpp"

#include <fstream>

#include "modellab/errors.hpp"
#include "modellab/checkpoint.hpp"
#include "modellab/file_io.hpp"

namespace mlab {

namespace {

constexpr int kDimsVersion = 1;

Count u(Index v) {
  if (v < 0) throw ContractError("negative dimension");
  return static_cast<Count>(v);
}

double giga(Count x) { return static_cast<double>(x) / 1e9; }

}  // namespace

CostDims dims_from_config(const ModelConfig& cfg, std::string name) {
  CostDims d;
  d.name = std::move(name);
  d.llm.width = u(cfg.width);
  d.llm.layers = u(cfg.layers);
  d.llm.q_width = u(cfg.width);
  d.llm.kv_width = u(cfg.width);
  d.llm.mlp_hidden = u(cfg.mlp_hidden);
  d.llm.vocab = u(cfg.vocab_size);
  d.llm.qkv_bias = cfg.qkv_bias;
  d.llm.tied_embeddings = false;
  const auto& v = cfg.vision;
  d.vision.width = u(v.width);
  d.vision.layers = u(v.layers);
  d.vision.mlp_hidden = u(v.mlp_hidden);
  d.vision.patch_dim = u(v.patch_dim());
  d.vision.positions = u(v.num_patches());
  d.vision.class_token = false;
  d.vision.patch_bias = true;
  d.vision.norm_bias = false;
  d.vision.pre_norm = false;
  d.vision.post_norm = false;
  d.vision.qkv_bias = true;
  d.vision.out_bias = false;
  d.vision.mlp_bias = true;
  d.taps = u(cfg.taps());
  return d;
}

const CostDims& DimsCatalog::preset(const std::string& name) const {
  auto it = presets.find(name);
  if (it == presets.end()) {
    std::string known;
    for (const auto& [k, _] : presets) known += (known.empty() ? "" : ", ") + k;
    throw ContractError("unknown dims preset '" + name + "' (known: " + known + ")");
  }
  return it->second;
}

DimsCatalog parse_dims_catalog(const nlohmann::json& j) {
  try {
    DimsCatalog c;
    c.version = j.at("version").get<int>();
    if (c.version != kDimsVersion) throw VersionError(kDimsVersion, static_cast<std::uint32_t>(c.version));
    for (const auto& [name, e] : j.at("llm").items()) {
      LlmDims d;
      d.width = e.at("hidden").get<Count>();
      d.layers = e.at("layers").get<Count>();
      d.q_width = e.at("q_width").get<Count>();
      d.kv_width = e.at("kv_width").get<Count>();
      d.mlp_hidden = e.at("mlp_hidden").get<Count>();
      d.vocab = e.at("vocab").get<Count>();
      d.qkv_bias = e.at("qkv_bias").get<bool>();
      d.tied_embeddings = e.at("tied_embeddings").get<bool>();
      c.llm[name] = d;
    }
    for (const auto& [name, e] : j.at("vision").items()) {
      VisionDims d;
      d.width = e.at("hidden").get<Count>();
      d.layers = e.at("layers").get<Count>();
      d.mlp_hidden = e.at("mlp_hidden").get<Count>();
      d.patch_dim = e.at("patch_dim").get<Count>();
      d.positions = e.at("positions").get<Count>();
      d.class_token = e.at("class_token").get<bool>();
      d.patch_bias = e.at("patch_bias").get<bool>();
      d.norm_bias = e.at("norm_bias").get<bool>();
      d.pre_norm = e.at("pre_norm").get<bool>();
      d.post_norm = e.at("post_norm").get<bool>();
      d.qkv_bias = e.at("qkv_bias").get<bool>();
      d.out_bias = e.at("out_bias").get<bool>();
      d.mlp_bias = e.at("mlp_bias").get<bool>();
      c.vision[name] = d;
    }
    for (const auto& [name, e] : j.at("presets").items()) {
      CostDims d;
      d.name = name;
      const auto llm = e.at("llm").get<std::string>();
      const auto vis = e.at("vision").get<std::string>();
      if (!c.llm.count(llm) || !c.vision.count(vis)) {
        throw FormatError("preset '" + name + "' references unknown dims");
      }
      d.llm = c.llm.at(llm);
      d.vision = c.vision.at(vis);
      d.taps = e.at("taps").get<Count>();
      c.presets[name] = d;
    }
    return c;
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("bad dims catalog: ") + e.what());
  }
}

DimsCatalog load_dims_catalog(const std::filesystem::path& path) {
  try {
    return parse_dims_catalog(nlohmann::json::parse(read_file(path)));
  } catch (const nlohmann::json::exception& e) {
    throw FormatError("cannot parse " + path.string() + ": " + e.what());
  }
}

Count ParamReport::part(const std::string& name) const {
  for (const auto& [k, v] : parts) {
    if (k == name) return v;
  }
  throw ContractError("no parameter group '" + name + "'");
}

nlohmann::ordered_json ParamReport::to_json() const {
  nlohmann::ordered_json j;
  j["separate_visual_qkv"] = separate_visual_qkv;
  j["taps"] = taps;
  nlohmann::ordered_json p;
  for (const auto& [k, v] : parts) p[k] = v;
  j["params"] = p;
  j["total"] = total;
  j["total_billions"] = giga(total);
  return j;
}

Count separate_qkv_delta(const LlmDims& l) {
  const Count b = l.qkv_bias ? 1 : 0;
  return l.layers * (l.width * l.q_width + b * l.q_width + 2 * (l.width * l.kv_width + b * l.kv_width));
}

ParamReport count_params(const CostDims& dims, bool separate_visual_qkv) {
  const auto& v = dims.vision;
  const Count norm = v.width * (v.norm_bias ? 2 : 1);
  Count vision = v.patch_dim * v.width + (v.patch_bias ? v.width : 0) + (v.class_token ? v.width : 0) +
                 v.positions * v.width + (v.pre_norm ? norm : 0) + (v.post_norm ? norm : 0);
  const Count vblock = 4 * v.width * v.width + (v.qkv_bias ? 3 * v.width : 0) + (v.out_bias ? v.width : 0) + 2 * norm +
                       2 * v.width * v.mlp_hidden + (v.mlp_bias ? v.mlp_hidden + v.width : 0);
  vision += v.layers * vblock;

  const auto& l = dims.llm;
  const Count d = l.width;
  const Count proj_in = dims.taps * v.width;
  const Count projector = proj_in * d + d + d * d + d;
  const Count b = l.qkv_bias ? 1 : 0;
  const Count text_qkv = l.layers * (d * l.q_width + b * l.q_width + 2 * (d * l.kv_width + b * l.kv_width));

  ParamReport r;
  r.separate_visual_qkv = separate_visual_qkv;
  r.taps = dims.taps;
  r.parts = {
      {"vision_encoder", vision},
      {"projector", projector},
      {"embed", l.vocab * d},
      {"text_qkv", text_qkv},
      {"visual_qkv", separate_visual_qkv ? separate_qkv_delta(l) : 0},
      {"attn_out", l.layers * l.q_width * d},
      {"mlp", l.layers * 3 * d * l.mlp_hidden},
      {"norms", l.layers * 2 * d + d},
      {"lm_head", l.tied_embeddings ? 0 : l.vocab * d},
  };
  for (const auto& [_, c] : r.parts) r.total += c;
  return r;
}

Count allowed_entries(const TokenLayout& layout, MaskPolicy policy) {
  layout.validate();
  const Count n_all = u(layout.size()), n = u(layout.visual);
  Count a = n_all * (n_all + 1) / 2;
  if (policy == MaskPolicy::VisualBidirectional && n > 0) a += n * (n - 1) / 2;
  return a;
}

FlopReport count_flops(const LlmDims& l, const TokenLayout& layout, MaskPolicy policy,
                       const FlopConventions& conventions) {
  if (layout.size() < 1) throw ContractError("FLOPs need a non-empty sequence");
  FlopReport r;
  r.layout = layout;
  r.policy = policy;
  r.conventions = conventions;
  const Count n = u(layout.size()), d = l.width, k = conventions.mac_flops;
  r.allowed_entries = allowed_entries(layout, policy);
  r.attention_projections = k * n * (d * l.q_width + 2 * d * d + l.q_width * d);
  r.attention_scores = k * 2 * r.allowed_entries * l.q_width;
  r.attention_per_layer = r.attention_projections + r.attention_scores;
  r.mlp_per_layer = k * conventions.mlp_matmuls * n * d * l.mlp_hidden;
  r.lm_head = k * n * d * l.vocab;
  r.layers = l.layers;
  r.total = l.layers * (r.attention_per_layer + r.mlp_per_layer) + r.lm_head;
  return r;
}

nlohmann::ordered_json FlopReport::to_json() const {
  nlohmann::ordered_json j;
  j["scenario"] = {{"system", layout.system},
                   {"visual", layout.visual},
                   {"user", layout.user},
                   {"sequence", layout.size()},
                   {"policy", std::string(policy_name(policy))}};
  j["conventions"] = {{"mac_flops", conventions.mac_flops},
                      {"causal_scores", "lower_triangle"},
                      {"kv_width", "full_d_model"},
                      {"mlp_matmuls", conventions.mlp_matmuls}};
  j["allowed_entries"] = allowed_entries;
  j["flops"] = {{"attention_projections", attention_projections},
                {"attention_scores", attention_scores},
                {"attention_per_layer", attention_per_layer},
                {"mlp_per_layer", mlp_per_layer},
                {"lm_head", lm_head},
                {"layers", layers},
                {"total", total}};
  j["attention_per_layer_gflops"] = giga(attention_per_layer);
  j["mlp_per_layer_gflops"] = giga(mlp_per_layer);
  j["lm_head_gflops"] = giga(lm_head);
  j["total_gflops"] = giga(total);
  return j;
}

}  // namespace mlab
