#include "modellab/run_config.hpp"

#include <charconv>
#include <cstdio>
#include <functional>
#include <map>
#include <fstream>
#include <sstream>

#include "modellab/errors.hpp"

namespace mlab {

namespace {

std::string_view trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

template <typename T>
T parse_number(std::string_view v) {
  T out{};
  auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || p != v.data() + v.size()) throw FormatError("'" + std::string(v) + "' is not a number");
  return out;
}

bool parse_bool(std::string_view v) {
  if (v == "true" || v == "1") return true;
  if (v == "false" || v == "0") return false;
  throw FormatError("'" + std::string(v) + "' is not a boolean");
}

template <typename T>
std::vector<T> parse_list(std::string_view v) {
  std::vector<T> out;
  while (!v.empty()) {
    const auto comma = v.find(',');
    out.push_back(parse_number<T>(trim(v.substr(0, comma))));
    if (comma == std::string_view::npos) break;
    v.remove_prefix(comma + 1);
  }
  return out;
}

std::string fmt(double x) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.17g", x);
  return buf;
}

template <typename T>
std::string fmt_list(const std::vector<T>& xs) {
  std::string s;
  for (std::size_t i = 0; i < xs.size(); ++i) s += (i ? "," : "") + std::to_string(xs[i]);
  return s;
}

struct Field {
  std::function<void(RunConfig&, std::string_view)> set;
  std::function<std::string(const RunConfig&)> get;
};

using FieldTable = std::map<std::string, std::map<std::string, Field>>;

#define MLAB_INT(expr) \
  Field { [](RunConfig& c, std::string_view v) { expr = parse_number<Index>(v); }, [](const RunConfig& c) { return std::to_string(expr); } }
#define MLAB_REAL(expr, T) \
  Field { [](RunConfig& c, std::string_view v) { expr = static_cast<T>(parse_number<double>(v)); }, [](const RunConfig& c) { return fmt(expr); } }
#define MLAB_BOOL(expr) \
  Field { [](RunConfig& c, std::string_view v) { expr = parse_bool(v); }, [](const RunConfig& c) { return std::string(expr ? "true" : "false"); } }

std::map<std::string, Field> stage_fields(StageSpec ExperimentConfig::*member) {
  std::map<std::string, Field> f;
  f["base_lr"] = {[member](RunConfig& c, std::string_view v) { (c.experiment.*member).base_lr = parse_number<double>(v); },
                  [member](const RunConfig& c) { return fmt((c.experiment.*member).base_lr); }};
  f["epochs"] = {[member](RunConfig& c, std::string_view v) { (c.experiment.*member).epochs = parse_number<Index>(v); },
                 [member](const RunConfig& c) { return std::to_string((c.experiment.*member).epochs); }};
  f["batch_size"] = {
      [member](RunConfig& c, std::string_view v) { (c.experiment.*member).batch_size = parse_number<Index>(v); },
      [member](const RunConfig& c) { return std::to_string((c.experiment.*member).batch_size); }};
  f["schedule"] = {[member](RunConfig& c, std::string_view v) {
                     auto& s = (c.experiment.*member).schedule;
                     if (v == "cosine") {
                       s.kind = Schedule::Kind::Cosine;
                     } else if (v == "constant") {
                       s.kind = Schedule::Kind::Constant;
                     } else {
                       throw FormatError("schedule must be cosine or constant, got '" + std::string(v) + "'");
                     }
                   },
                   [member](const RunConfig& c) {
                     return std::string((c.experiment.*member).schedule.kind == Schedule::Kind::Cosine ? "cosine"
                                                                                                        : "constant");
                   }};
  f["warmup_fraction"] = {
      [member](RunConfig& c, std::string_view v) {
        (c.experiment.*member).schedule.warmup_fraction = parse_number<double>(v);
      },
      [member](const RunConfig& c) { return fmt((c.experiment.*member).schedule.warmup_fraction); }};
  f["min_factor"] = {
      [member](RunConfig& c, std::string_view v) { (c.experiment.*member).schedule.min_factor = parse_number<double>(v); },
      [member](const RunConfig& c) { return fmt((c.experiment.*member).schedule.min_factor); }};
  for (ParamGroup g : kAllGroups) {
    if (g == ParamGroup::Encoder) continue;
    f["lr." + std::string(group_name(g))] = {
        [member, g](RunConfig& c, std::string_view v) {
          (c.experiment.*member).lr_overrides[g] = parse_number<double>(v);
        },
        [member, g](const RunConfig& c) {
          const auto& o = (c.experiment.*member).lr_overrides;
          auto it = o.find(g);
          return it == o.end() ? std::string() : fmt(it->second);
        }};
  }
  return f;
}

const FieldTable& fields() {
  static const FieldTable table = [] {
    FieldTable t;
    auto& m = t["model"];
    m["vocab_size"] = MLAB_INT(c.experiment.model.vocab_size);
    m["width"] = MLAB_INT(c.experiment.model.width);
    m["layers"] = MLAB_INT(c.experiment.model.layers);
    m["heads"] = MLAB_INT(c.experiment.model.heads);
    m["mlp_hidden"] = MLAB_INT(c.experiment.model.mlp_hidden);
    m["rope_base"] = MLAB_REAL(c.experiment.model.rope_base, float);
    m["norm_eps"] = MLAB_REAL(c.experiment.model.norm_eps, float);
    m["qkv_bias"] = MLAB_BOOL(c.experiment.model.qkv_bias);
    m["separate_visual_qkv"] = MLAB_BOOL(c.experiment.model.separate_visual_qkv);
    m["policy"] = {[](RunConfig& c, std::string_view v) { c.experiment.model.policy = parse_policy(v); },
                   [](const RunConfig& c) { return std::string(policy_name(c.experiment.model.policy)); }};

    auto& v = t["vision"];
    v["image_size"] = MLAB_INT(c.experiment.model.vision.image_size);
    v["patch_size"] = MLAB_INT(c.experiment.model.vision.patch_size);
    v["channels"] = MLAB_INT(c.experiment.model.vision.channels);
    v["width"] = MLAB_INT(c.experiment.model.vision.width);
    v["layers"] = MLAB_INT(c.experiment.model.vision.layers);
    v["heads"] = MLAB_INT(c.experiment.model.vision.heads);
    v["mlp_hidden"] = MLAB_INT(c.experiment.model.vision.mlp_hidden);
    v["position_stddev"] = MLAB_REAL(c.experiment.model.vision.position_stddev, float);
    v["taps"] = {[](RunConfig& c, std::string_view s) { c.experiment.model.vision.taps = parse_list<Index>(s); },
                 [](const RunConfig& c) { return fmt_list(c.experiment.model.vision.taps); }};

    t["stage.pretrain"] = stage_fields(&ExperimentConfig::pretrain);
    t["stage.finetune"] = stage_fields(&ExperimentConfig::finetune);

    auto& d = t["data"];
    d["grid"] = MLAB_INT(c.experiment.data.grid);
    d["palette"] = MLAB_INT(c.experiment.data.palette);
    d["shapes"] = MLAB_INT(c.experiment.data.shapes);
    d["train"] = MLAB_INT(c.experiment.data.train_count);
    d["eval"] = MLAB_INT(c.experiment.data.eval_count);

    t["seed"]["value"] = {[](RunConfig& c, std::string_view s) { c.experiment.seed = parse_number<std::uint64_t>(s); },
                          [](const RunConfig& c) { return std::to_string(c.experiment.seed); }};

    auto& a = t["ablation"];
    a["seeds"] = {[](RunConfig& c, std::string_view s) { c.ablation.seeds = parse_list<std::uint64_t>(s); },
                  [](const RunConfig& c) { return fmt_list(c.ablation.seeds); }};
    a["single_tap"] = MLAB_INT(c.ablation.single_tap);
    a["multi_taps"] = {[](RunConfig& c, std::string_view s) { c.ablation.multi_taps = parse_list<Index>(s); },
                       [](const RunConfig& c) { return fmt_list(c.ablation.multi_taps); }};
    return t;
  }();
  return table;
}

#undef MLAB_INT
#undef MLAB_REAL
#undef MLAB_BOOL

void sync_derived(RunConfig& c) {
  auto& e = c.experiment;
  e.data.image_size = e.model.vision.image_size;
  e.data.channels = e.model.vision.channels;
  e.data.patch_size = e.model.vision.patch_size;
  e.refresh_stage_groups();
}

}  // namespace

RunConfig default_run_config() {
  RunConfig c;
  c.experiment.pretrain = StageSpec::pretrain(c.experiment.model);
  c.experiment.finetune = StageSpec::finetune(c.experiment.model);
  sync_derived(c);
  return c;
}

RunConfig parse_run_config(std::string_view text) {
  RunConfig cfg = default_run_config();
  const auto& table = fields();
  const std::map<std::string, Field>* section = nullptr;
  int line_no = 0;
  while (!text.empty()) {
    ++line_no;
    const auto nl = text.find('\n');
    std::string_view line = text.substr(0, nl);
    text = nl == std::string_view::npos ? std::string_view{} : text.substr(nl + 1);
    if (const auto hash = line.find('#'); hash != std::string_view::npos) line = line.substr(0, hash);
    line = trim(line);
    if (line.empty()) continue;
    const std::string where = "config line " + std::to_string(line_no) + ": ";
    if (line.front() == '[') {
      if (line.back() != ']') throw FormatError(where + "unterminated section header");
      const std::string name(trim(line.substr(1, line.size() - 2)));
      auto it = table.find(name);
      if (it == table.end()) throw FormatError(where + "unknown section [" + name + "]");
      section = &it->second;
      continue;
    }
    if (!section) throw FormatError(where + "key outside of any section");
    const auto eq = line.find('=');
    if (eq == std::string_view::npos) throw FormatError(where + "expected key = value");
    const std::string key(trim(line.substr(0, eq)));
    auto it = section->find(key);
    if (it == section->end()) throw FormatError(where + "unknown key '" + key + "'");
    try {
      it->second.set(cfg, trim(line.substr(eq + 1)));
    } catch (const std::exception& e) {
      throw FormatError(where + key + ": " + e.what());
    }
  }
  sync_derived(cfg);
  cfg.experiment.model.validate();
  cfg.experiment.pretrain.validate(cfg.experiment.model);
  cfg.experiment.finetune.validate(cfg.experiment.model);
  cfg.experiment.data.validate();
  if (cfg.ablation.seeds.empty()) throw FormatError("ablation needs at least one seed");
  return cfg;
}

RunConfig load_run_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open config " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_run_config(ss.str());
}

std::string format_run_config(const RunConfig& cfg) {
  std::ostringstream os;
  bool first = true;
  for (const char* name : {"model", "vision", "stage.pretrain", "stage.finetune", "data", "seed", "ablation"}) {
    if (!first) os << '\n';
    first = false;
    os << '[' << name << "]\n";
    for (const auto& [key, field] : fields().at(name)) {
      const std::string value = field.get(cfg);
      if (!value.empty()) os << key << " = " << value << '\n';
    }
  }
  return os.str();
}

}  // namespace mlab
