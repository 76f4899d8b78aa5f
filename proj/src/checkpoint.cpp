#include "modellab/checkpoint.hpp"

#include <bit>
#include <cmath>
#include <cstring>
#include <map>

#include "modellab/file_io.hpp"

namespace mlab {

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

namespace {

template <typename T>
void put(std::string& out, T value) {
  char buf[sizeof(T)];
  std::memcpy(buf, &value, sizeof(T));
  out.append(buf, sizeof(T));
}

class Reader {
 public:
  explicit Reader(std::string_view bytes) : bytes_(bytes) {}

  template <typename T>
  T get() {
    need(sizeof(T));
    T value;
    std::memcpy(&value, bytes_.data() + pos_, sizeof(T));
    pos_ += sizeof(T);
    return value;
  }

  std::string_view take(std::size_t n) {
    need(n);
    auto s = bytes_.substr(pos_, n);
    pos_ += n;
    return s;
  }

  bool done() const { return pos_ == bytes_.size(); }

 private:
  void need(std::size_t n) const {
    if (bytes_.size() - pos_ < n) throw FormatError("truncated checkpoint");
  }
  std::string_view bytes_;
  std::size_t pos_ = 0;
};

}  // namespace

nlohmann::ordered_json config_to_json(const ModelConfig& cfg) {
  nlohmann::ordered_json v;
  v["image_size"] = cfg.vision.image_size;
  v["patch_size"] = cfg.vision.patch_size;
  v["channels"] = cfg.vision.channels;
  v["width"] = cfg.vision.width;
  v["layers"] = cfg.vision.layers;
  v["heads"] = cfg.vision.heads;
  v["mlp_hidden"] = cfg.vision.mlp_hidden;
  v["position_stddev"] = cfg.vision.position_stddev;
  v["taps"] = cfg.vision.taps;

  nlohmann::ordered_json j;
  j["vocab_size"] = cfg.vocab_size;
  j["width"] = cfg.width;
  j["layers"] = cfg.layers;
  j["heads"] = cfg.heads;
  j["mlp_hidden"] = cfg.mlp_hidden;
  j["rope_base"] = cfg.rope_base;
  j["norm_eps"] = cfg.norm_eps;
  j["qkv_bias"] = cfg.qkv_bias;
  j["policy"] = std::string(policy_name(cfg.policy));
  j["separate_visual_qkv"] = cfg.separate_visual_qkv;
  j["vision"] = v;
  return j;
}

ModelConfig config_from_json(const nlohmann::json& j) {
  try {
    ModelConfig cfg;
    cfg.vocab_size = j.at("vocab_size").get<Index>();
    cfg.width = j.at("width").get<Index>();
    cfg.layers = j.at("layers").get<Index>();
    cfg.heads = j.at("heads").get<Index>();
    cfg.mlp_hidden = j.at("mlp_hidden").get<Index>();
    cfg.rope_base = j.at("rope_base").get<float>();
    cfg.norm_eps = j.at("norm_eps").get<float>();
    cfg.qkv_bias = j.at("qkv_bias").get<bool>();
    cfg.policy = parse_policy(j.at("policy").get<std::string>());
    cfg.separate_visual_qkv = j.at("separate_visual_qkv").get<bool>();
    const auto& v = j.at("vision");
    cfg.vision.image_size = v.at("image_size").get<Index>();
    cfg.vision.patch_size = v.at("patch_size").get<Index>();
    cfg.vision.channels = v.at("channels").get<Index>();
    cfg.vision.width = v.at("width").get<Index>();
    cfg.vision.layers = v.at("layers").get<Index>();
    cfg.vision.heads = v.at("heads").get<Index>();
    cfg.vision.mlp_hidden = v.at("mlp_hidden").get<Index>();
    cfg.vision.position_stddev = v.at("position_stddev").get<float>();
    cfg.vision.taps = v.at("taps").get<std::vector<Index>>();
    cfg.validate();
    return cfg;
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("bad model config: ") + e.what());
  }
}

std::string serialize_checkpoint(const MllmModel& model) {
  std::string out = "MLAB";
  put<std::uint32_t>(out, kCheckpointVersion);
  const std::string cfg = config_to_json(model.config()).dump();
  put<std::uint32_t>(out, static_cast<std::uint32_t>(cfg.size()));
  out += cfg;
  const auto params = model.parameters();
  put<std::uint32_t>(out, static_cast<std::uint32_t>(params.size()));
  for (const auto& p : params) {
    put<std::uint32_t>(out, static_cast<std::uint32_t>(p.name.size()));
    out += p.name;
    put<std::uint32_t>(out, static_cast<std::uint32_t>(p.tensor.rank()));
    for (Index e : p.tensor.shape()) put<std::uint64_t>(out, static_cast<std::uint64_t>(e));
    const auto v = p.tensor.values();
    out.append(reinterpret_cast<const char*>(v.data()), v.size_bytes());
  }
  return out;
}

MllmModel deserialize_checkpoint(std::string_view bytes) {
  Reader r(bytes);
  if (r.take(4) != "MLAB") throw FormatError("not a checkpoint (bad magic)");
  const auto version = r.get<std::uint32_t>();
  if (version != kCheckpointVersion) throw VersionError(kCheckpointVersion, version);
  const auto cfg_len = r.get<std::uint32_t>();
  nlohmann::json cfg_json;
  try {
    cfg_json = nlohmann::json::parse(r.take(cfg_len));
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("bad checkpoint config: ") + e.what());
  }
  MllmModel model = MllmModel::random(config_from_json(cfg_json), 0);

  std::map<std::string, Tensor> by_name;
  for (auto& p : model.parameters()) by_name.emplace(p.name, p.tensor);
  const auto count = r.get<std::uint32_t>();
  if (count != by_name.size()) {
    throw FormatError("checkpoint holds " + std::to_string(count) + " tensors, model expects " +
                      std::to_string(by_name.size()));
  }
  for (std::uint32_t i = 0; i < count; ++i) {
    const std::string name(r.take(r.get<std::uint32_t>()));
    auto it = by_name.find(name);
    if (it == by_name.end()) throw FormatError("unexpected tensor '" + name + "' in checkpoint");
    const auto rank = r.get<std::uint32_t>();
    Shape shape;
    for (std::uint32_t a = 0; a < rank; ++a) shape.push_back(static_cast<Index>(r.get<std::uint64_t>()));
    if (shape != it->second.shape()) {
      throw FormatError("tensor '" + name + "' has shape " + to_string(shape) + ", expected " +
                        to_string(it->second.shape()));
    }
    auto dst = it->second.mutable_values();
    const auto payload = r.take(dst.size_bytes());
    std::memcpy(dst.data(), payload.data(), payload.size());
    for (float v : dst)
      if (!std::isfinite(v)) throw FormatError("tensor '" + name + "' holds a non-finite value");
    by_name.erase(it);
  }
  if (!r.done()) throw FormatError("trailing bytes after checkpoint payload");
  return model;
}

void save_checkpoint(const MllmModel& model, const std::filesystem::path& path) {
  write_file_atomic(path, serialize_checkpoint(model));
}

MllmModel load_checkpoint(const std::filesystem::path& path) { return deserialize_checkpoint(read_file(path)); }

}  // namespace mlab
