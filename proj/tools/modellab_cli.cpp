#include <chrono>
#include <cstdio>
#include <filesystem>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"
#include "modellab/checkpoint.hpp"
#include "modellab/cost.hpp"
#include "modellab/errors.hpp"
#include "modellab/file_io.hpp"
#include "modellab/mask.hpp"
#include "modellab/probes.hpp"
#include "modellab/run_config.hpp"
#include "modellab/synth.hpp"
#include "modellab/train.hpp"

namespace fs = std::filesystem;
using json = nlohmann::ordered_json;
using namespace mlab;

namespace {

struct Common {
  std::optional<std::uint64_t> seed;
  std::string config;
};

void add_common(CLI::App* cmd, Common& c) {
  cmd->add_option("--seed", c.seed, "seed for data generation, init and ordering (overrides [seed] value)");
  cmd->add_option("--config", c.config, "run config file")->check(CLI::ExistingFile);
}

RunConfig resolve_config(const Common& c) {
  RunConfig cfg = c.config.empty() ? default_run_config() : load_run_config(c.config);
  if (c.seed) cfg.experiment.seed = *c.seed;
  return cfg;
}

std::string command_line(int argc, char** argv) {
  std::string s;
  for (int i = 1; i < argc; ++i) s += (i > 1 ? " " : "") + std::string(argv[i]);
  return s;
}

json provenance(const std::string& cmdline, const Common& c, const RunConfig* cfg) {
  json p;
  p["command"] = cmdline;
  p["config"] = c.config;
  if (cfg) {
    p["seed"] = cfg->experiment.seed;
    p["fingerprint"] = fingerprint(cfg->experiment);
  } else {
    p["seed"] = c.seed.value_or(0);
  }
  return p;
}

std::vector<Index> parse_layout(const std::string& text) {
  std::vector<Index> v;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    try {
      std::size_t used = 0;
      v.push_back(std::stoll(item, &used));
      if (used != item.size()) throw std::invalid_argument(item);
    } catch (const std::exception&) {
      throw CLI::ValidationError("--layout", "expected three integers m,n,o");
    }
  }
  if (v.size() != 3) throw CLI::ValidationError("--layout", "expected three integers m,n,o");
  return v;
}

/// Variant labels accepted by train: the ablation rows, no_visual_attention,
/// or "config" for the [model] section as written.
Variant pick_variant(const RunConfig& cfg, const std::string& label) {
  if (label == "config") return {"config", cfg.experiment.model};
  auto vs = ablation_variants(cfg.experiment.model, cfg.ablation.single_tap, cfg.ablation.multi_taps);
  vs.push_back(no_visual_attention_variant(vs.front().config));
  for (auto& v : vs)
    if (v.label == label) return v;
  std::string known = "config";
  for (const auto& v : vs) known += ", " + v.label;
  throw CLI::ValidationError("--variant", "unknown variant '" + label + "' (known: " + known + ")");
}

/// Data spec matching the image geometry of a loaded model.
SynthSpec spec_for(const RunConfig& cfg, const ModelConfig& model) {
  SynthSpec s = cfg.experiment.data;
  s.image_size = model.vision.image_size;
  s.patch_size = model.vision.patch_size;
  s.channels = model.vision.channels;
  return s;
}

SynthDataset load_or_generate(const RunConfig& cfg, const SynthSpec& spec, const std::string& data_path) {
  if (!data_path.empty()) return dataset_from_jsonl(read_file(data_path), spec);
  return gen_dataset(cfg.experiment.seed, spec);
}

std::string jsonl_with_header(const json& prov, const std::vector<json>& rows) {
  std::string out = json{{"provenance", prov}}.dump() + "\n";
  for (const auto& r : rows) out += r.dump() + "\n";
  return out;
}

/// Metrics are appended while training runs, to a side file that is moved
/// into place once the command succeeds.
class PendingJsonl {
 public:
  explicit PendingJsonl(const std::string& path) {
    if (path.empty()) return;
    final_ = path;
    partial_ = path + ".partial";
    fs::remove(partial_);
    writer_.emplace(partial_);
  }
  const JsonlWriter* writer() const { return writer_ ? &*writer_ : nullptr; }
  void commit(const json& prov) {
    if (!writer_) return;
    write_file_atomic(final_, json{{"provenance", prov}}.dump() + "\n" + read_file(partial_));
    fs::remove(partial_);
  }

 private:
  fs::path final_, partial_;
  std::optional<JsonlWriter> writer_;
};

int run_gen_data(const Common& c, const std::string& out, const std::string& cmdline) {
  const auto cfg = resolve_config(c);
  const auto ds = gen_dataset(cfg.experiment.seed, cfg.experiment.data);
  const json prov = provenance(cmdline, c, &cfg);
  write_file_atomic(out, json{{"provenance", prov}}.dump() + "\n" + dataset_to_jsonl(ds));
  std::cout << "wrote " << ds.train.size() << " train and " << ds.eval.size() << " eval samples to " << out << "\n";
  return 0;
}

int run_train(const Common& c, const std::string& variant, const std::string& data, const std::string& out,
              const std::string& report_path, const std::string& metrics_path, const std::string& cmdline) {
  auto cfg = resolve_config(c);
  const Variant v = pick_variant(cfg, variant);
  const auto ds = load_or_generate(cfg, cfg.experiment.data, data);
  PendingJsonl metrics(metrics_path);
  const auto t0 = std::chrono::steady_clock::now();
  auto res = run_experiment(cfg.experiment, v, ds, cfg.experiment.seed, metrics.writer());
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  const json prov = provenance(cmdline, c, &cfg);

  save_checkpoint(res.model, out);
  if (!report_path.empty()) {
    json r = res.report.to_json();
    r["variant"] = v.label;
    r["seconds"] = secs;
    r["provenance"] = prov;
    write_file_atomic(report_path, r.dump(2) + "\n");
  }
  metrics.commit(prov);
  std::printf("variant %s seed %llu accuracy %.4f (%zu steps, %.1f s) -> %s\n", v.label.c_str(),
              static_cast<unsigned long long>(cfg.experiment.seed), res.accuracy, res.report.steps.size(), secs,
              out.c_str());
  return 0;
}

int run_ablate(const Common& c, const std::string& out, const std::string& metrics_path, int threads,
               const std::string& cmdline) {
  const auto cfg = resolve_config(c);
  auto variants = ablation_variants(cfg.experiment.model, cfg.ablation.single_tap, cfg.ablation.multi_taps);
  variants.push_back(no_visual_attention_variant(variants.front().config));
  PendingJsonl metrics(metrics_path);
  const auto t0 = std::chrono::steady_clock::now();
  const auto table = run_ablation_matrix(cfg.experiment, variants, cfg.ablation.seeds, metrics.writer(), threads);
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  const json prov = provenance(cmdline, c, &cfg);
  std::cout << table.to_text();
  std::printf("total %.1f s on %d thread(s)\n", secs, threads);
  if (!out.empty()) {
    json j = table.to_json();
    j["seconds"] = secs;
    j["threads"] = threads;
    j["provenance"] = prov;
    write_file_atomic(out, j.dump(2) + "\n");
  }
  metrics.commit(prov);
  return 0;
}

int run_eval(const Common& c, const std::string& ckpt, const std::string& data, const std::string& split,
             const std::string& records_path, const std::string& cmdline) {
  const auto cfg = resolve_config(c);
  const auto model = load_checkpoint(ckpt);
  const auto ds = load_or_generate(cfg, spec_for(cfg, model.config()), data);
  const auto& pool = split == "train" ? ds.train : ds.eval;
  std::vector<Sample> samples;
  for (const auto& s : pool) samples.push_back(qa_sample(s));
  std::vector<SampleResult> results;
  const double acc = evaluate_accuracy(model, samples, &results);
  Index correct = 0;
  for (const auto& r : results) correct += r.correct;

  if (!records_path.empty()) {
    std::vector<json> rows;
    for (const auto& r : results)
      rows.push_back({{"index", r.index}, {"expected", r.expected}, {"generated", r.generated}, {"correct", r.correct}});
    json prov = provenance(cmdline, c, &cfg);
    prov["checkpoint"] = ckpt;
    prov["split"] = split;
    write_file_atomic(records_path, jsonl_with_header(prov, rows));
  }
  std::printf("accuracy %.4f (%lld/%zu)\n", acc, static_cast<long long>(correct), results.size());
  return 0;
}

int run_probe(const Common& c, const std::string& ckpt, const std::string& lens, Index k, Index index,
              const std::string& data, const std::string& out, const std::string& ppm, const std::string& cmdline) {
  const auto cfg = resolve_config(c);
  const auto model = load_checkpoint(ckpt);
  const auto ds = load_or_generate(cfg, spec_for(cfg, model.config()), data);
  if (index < 0 || index >= static_cast<Index>(ds.eval.size())) {
    throw CLI::ValidationError("--index", "eval split has " + std::to_string(ds.eval.size()) + " samples");
  }
  const auto batch = model.assemble(qa_sample(ds.eval[static_cast<std::size_t>(index)]));
  const auto report = lens == "input" ? input_lens(model, batch, k) : output_lens(model, batch, k);
  json j = report.to_json();
  j["sample"] = index;
  j["provenance"] = provenance(cmdline, c, &cfg);
  if (!ppm.empty()) write_file_atomic(ppm, report.to_ppm());
  if (out.empty()) {
    std::cout << j.dump(2) << "\n";
  } else {
    write_file_atomic(out, j.dump(2) + "\n");
    for (const auto& e : report.entries) {
      std::printf("(%lld,%lld)", static_cast<long long>(e.row), static_cast<long long>(e.col));
      for (const auto& [id, s] : e.top) std::printf(" %d:%.3f", id, s);
      std::printf("\n");
    }
  }
  return 0;
}

int run_mask(const std::string& layout_text, const std::string& policy, const std::string& format,
             const std::string& out) {
  const auto v = parse_layout(layout_text);
  const auto mask = build_mask({v[0], v[1], v[2]}, parse_policy(policy));
  const auto text = render_mask(mask, parse_mask_format(format));
  if (out.empty()) {
    std::cout << text;
    if (format == "ascii") std::cout << "\n";
  } else {
    write_file_atomic(out, text);
  }
  return 0;
}

int run_cost(const Common& c, const std::string& dims_name, const std::string& dims_file, std::optional<Index> seq,
             Index visual, Index system, const std::string& policy, int mlp_matmuls, const std::string& out,
             const std::string& cmdline) {
  CostDims dims;
  std::optional<RunConfig> cfg;
  if (!dims_name.empty()) {
    dims = (dims_file.empty() ? load_dims_catalog() : load_dims_catalog(dims_file)).preset(dims_name);
  } else {
    cfg = resolve_config(c);
    dims = dims_from_config(cfg->experiment.model, c.config.empty() ? "default" : c.config);
  }
  const Index n = seq.value_or(system + visual + 1);
  if (system + visual > n) throw CLI::ValidationError("--seq", "must cover --system plus --visual tokens");
  const TokenLayout layout{system, visual, n - system - visual};
  FlopConventions conv;
  conv.mlp_matmuls = static_cast<Count>(mlp_matmuls);
  const auto flops = count_flops(dims.llm, layout, parse_policy(policy), conv);
  const auto base = count_params(dims, false), sep = count_params(dims, true);

  json j = flops.to_json();
  j["dims"] = dims.name;
  j["params"] = {{"baseline", base.to_json()},
                 {"separate_qkv", sep.to_json()},
                 {"delta", sep.total - base.total},
                 {"delta_pct", 100.0 * static_cast<double>(sep.total - base.total) / static_cast<double>(base.total)}};
  j["provenance"] = provenance(cmdline, c, cfg ? &*cfg : nullptr);
  std::cout << j.dump(2) << "\n";
  if (!out.empty()) write_file_atomic(out, j.dump(2) + "\n");
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"modellab: toy multimodal LLM laboratory"};
  app.require_subcommand(1, 1);
  const std::string cmdline = command_line(argc, argv);

  Common gen_c, train_c, ablate_c, probe_c, mask_c, cost_c, eval_c;

  auto* gen = app.add_subcommand("gen-data", "generate the synthetic grid dataset as JSONL");
  add_common(gen, gen_c);
  std::string gen_out;
  gen->add_option("--out", gen_out, "output JSONL")->required();

  auto* train = app.add_subcommand("train", "pretrain + finetune one variant, then evaluate");
  add_common(train, train_c);
  std::string variant = "config", train_data, train_out, report_path, train_metrics;
  train->add_option("--variant", variant, "config | baseline | +sep_qkv | +sep_qkv+bidir | +sep_qkv+local_global | "
                                          "llavit | no_visual_attention");
  train->add_option("--data", train_data, "dataset JSONL (default: generate from config and seed)")
      ->check(CLI::ExistingFile);
  train->add_option("--out", train_out, "checkpoint path")->required();
  train->add_option("--report", report_path, "run report JSON");
  train->add_option("--metrics", train_metrics, "per-step metrics JSONL");

  auto* ablate = app.add_subcommand("ablate", "train every ablation variant for every seed");
  add_common(ablate, ablate_c);
  std::string ablate_out, ablate_metrics;
  int threads = threads_from_env();
  ablate->add_option("--out", ablate_out, "table JSON");
  ablate->add_option("--metrics", ablate_metrics, "per-step metrics JSONL");
  ablate->add_option("--threads", threads, "worker threads (default MODELLAB_THREADS or 1)")
      ->check(CLI::Range(1, 256));

  auto* probe = app.add_subcommand("probe", "logit-lens probes on one eval sample");
  add_common(probe, probe_c);
  std::string probe_ckpt, lens = "input", probe_data, probe_out, ppm;
  Index k = 3, index = 0;
  probe->add_option("--checkpoint", probe_ckpt)->required()->check(CLI::ExistingFile);
  probe->add_option("--lens", lens)->check(CLI::IsMember({"input", "output"}));
  probe->add_option("--k", k)->check(CLI::PositiveNumber);
  probe->add_option("--index", index, "eval sample index");
  probe->add_option("--data", probe_data)->check(CLI::ExistingFile);
  probe->add_option("--out", probe_out, "report JSON (default: stdout)");
  probe->add_option("--ppm", ppm, "top-1 score heatmap");

  auto* mask = app.add_subcommand("mask", "render an attention mask");
  add_common(mask, mask_c);
  std::string layout, policy = "causal", format = "ascii", mask_out;
  mask->add_option("--layout", layout, "m,n,o token counts")->required();
  mask->add_option("--policy", policy)->check(CLI::IsMember({"causal", "bidir", "visual-bidirectional", "novis",
                                                             "no-visual-attention"}));
  mask->add_option("--format", format)->check(CLI::IsMember({"ascii", "pgm"}));
  mask->add_option("--out", mask_out);

  auto* cost = app.add_subcommand("cost", "FLOP and parameter accounting");
  add_common(cost, cost_c);
  std::string dims_name, dims_file, cost_policy = "causal", cost_out;
  std::optional<Index> seq;
  Index visual = 0, system = 0;
  int mlp_matmuls = 2;
  cost->add_option("--dims", dims_name, "preset name from the dims catalog (default: --config model)");
  cost->add_option("--dims-file", dims_file)->check(CLI::ExistingFile);
  cost->add_option("--seq", seq, "sequence length N")->check(CLI::PositiveNumber);
  cost->add_option("--visual", visual, "visual tokens n")->check(CLI::NonNegativeNumber);
  cost->add_option("--system", system, "system tokens before the image")->check(CLI::NonNegativeNumber);
  cost->add_option("--policy", cost_policy)->check(CLI::IsMember({"causal", "bidir", "visual-bidirectional", "novis",
                                                                  "no-visual-attention"}));
  cost->add_option("--mlp-matmuls", mlp_matmuls)->check(CLI::Range(2, 3));
  cost->add_option("--out", cost_out, "also write the JSON here");

  auto* eval = app.add_subcommand("eval", "exact-match accuracy of a checkpoint");
  add_common(eval, eval_c);
  std::string eval_ckpt, eval_data, split = "eval", records;
  eval->add_option("--checkpoint", eval_ckpt)->required()->check(CLI::ExistingFile);
  eval->add_option("--data", eval_data)->check(CLI::ExistingFile);
  eval->add_option("--split", split)->check(CLI::IsMember({"train", "eval"}));
  eval->add_option("--records", records, "per-sample JSONL");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 1;
  }

  try {
    if (*gen) return run_gen_data(gen_c, gen_out, cmdline);
    if (*train) return run_train(train_c, variant, train_data, train_out, report_path, train_metrics, cmdline);
    if (*ablate) return run_ablate(ablate_c, ablate_out, ablate_metrics, threads, cmdline);
    if (*probe) return run_probe(probe_c, probe_ckpt, lens, k, index, probe_data, probe_out, ppm, cmdline);
    if (*mask) return run_mask(layout, policy, format, mask_out);
    if (*cost)
      return run_cost(cost_c, dims_name, dims_file, seq, visual, system, cost_policy, mlp_matmuls, cost_out, cmdline);
    if (*eval) return run_eval(eval_c, eval_ckpt, eval_data, split, records, cmdline);
  } catch (const CLI::ValidationError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const VersionError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const std::logic_error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
  return 1;
}
