#include "modellab/train.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <mutex>
#include <numeric>
#include <random>
#include <sstream>
#include <thread>

#include "modellab/checkpoint.hpp"
#include "modellab/errors.hpp"
#include "modellab/ops.hpp"

namespace mlab {

std::string_view stage_name(StageKind kind) { return kind == StageKind::Pretrain ? "pretrain" : "finetune"; }

StageKind parse_stage(std::string_view name) {
  if (name == "pretrain") return StageKind::Pretrain;
  if (name == "finetune") return StageKind::Finetune;
  throw ContractError("unknown stage '" + std::string(name) + "'");
}

double lr_factor(const Schedule& schedule, Index step, Index total_steps) {
  if (total_steps < 1 || step < 0 || step >= total_steps) {
    throw ContractError("step " + std::to_string(step) + " outside schedule of " + std::to_string(total_steps));
  }
  if (schedule.kind == Schedule::Kind::Constant) return 1.0;
  const auto warmup = static_cast<Index>(std::ceil(schedule.warmup_fraction * static_cast<double>(total_steps)));
  if (step < warmup) return static_cast<double>(step + 1) / static_cast<double>(warmup);
  const double p = static_cast<double>(step - warmup) / static_cast<double>(std::max<Index>(1, total_steps - 1 - warmup));
  return schedule.min_factor + (1.0 - schedule.min_factor) * 0.5 * (1.0 + std::cos(M_PI * p));
}

StageSpec StageSpec::pretrain(const ModelConfig& cfg) {
  StageSpec s;
  s.kind = StageKind::Pretrain;
  s.trainable = {ParamGroup::Projector};
  if (cfg.separate_visual_qkv) s.trainable.insert(ParamGroup::VisualQkv);
  s.lr_overrides = {{ParamGroup::VisualQkv, 2e-4}};
  s.base_lr = 1e-3;
  return s;
}

StageSpec StageSpec::finetune(const ModelConfig& cfg) {
  StageSpec s;
  s.kind = StageKind::Finetune;
  s.trainable = {ParamGroup::Embed, ParamGroup::TextQkv, ParamGroup::AttnOut, ParamGroup::Mlp, ParamGroup::LmHead,
                 ParamGroup::Projector};
  if (cfg.separate_visual_qkv) s.trainable.insert(ParamGroup::VisualQkv);
  s.lr_overrides = {{ParamGroup::VisualQkv, 2e-4}};
  s.base_lr = 2e-4;
  return s;
}

double StageSpec::lr_for(ParamGroup group) const {
  auto it = lr_overrides.find(group);
  return it == lr_overrides.end() ? base_lr : it->second;
}

void StageSpec::validate(const ModelConfig& cfg) const {
  if (trainable.count(ParamGroup::Encoder)) throw ContractError("the vision encoder is never trainable");
  if (trainable.count(ParamGroup::VisualQkv) && !cfg.separate_visual_qkv) {
    throw ContractError("stage trains visual_qkv but the model has no separate visual QKV");
  }
  if (epochs < 1 || batch_size < 1) throw ContractError("epochs and batch size must be positive");
  if (!(base_lr > 0.0)) throw ContractError("base learning rate must be positive");
  if (schedule.warmup_fraction < 0.0 || schedule.warmup_fraction > 1.0) {
    throw ContractError("warmup fraction must be in [0, 1]");
  }
}

AdamW::AdamW(std::vector<ParamRef> params, AdamWConfig cfg) : cfg_(cfg) {
  for (auto& p : params) {
    const auto n = static_cast<std::size_t>(p.tensor.numel());
    slots_.push_back({std::move(p), std::vector<double>(n, 0.0), std::vector<double>(n, 0.0)});
  }
}

void AdamW::step(const std::map<ParamGroup, double>& lr_by_group) {
  ++t_;
  const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
  const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
  for (auto& s : slots_) {
    if (!s.param.tensor.has_grad()) continue;
    auto it = lr_by_group.find(s.param.group);
    if (it == lr_by_group.end()) throw ContractError("no learning rate for group " + std::string(group_name(s.param.group)));
    const double lr = it->second;
    const auto g = s.param.tensor.grad();
    auto w = s.param.tensor.mutable_values();
    for (std::size_t i = 0; i < w.size(); ++i) {
      const double gi = g[i];
      s.m[i] = cfg_.beta1 * s.m[i] + (1.0 - cfg_.beta1) * gi;
      s.v[i] = cfg_.beta2 * s.v[i] + (1.0 - cfg_.beta2) * gi * gi;
      const double mhat = s.m[i] / bc1, vhat = s.v[i] / bc2;
      const double wi = w[i];
      w[i] = static_cast<float>(wi - lr * (mhat / (std::sqrt(vhat) + cfg_.eps) + cfg_.weight_decay * wi));
    }
  }
}

nlohmann::ordered_json step_json(const StepRecord& r) {
  nlohmann::ordered_json j;
  j["step"] = r.step;
  j["stage"] = r.stage;
  j["loss"] = r.loss;
  j["lr_by_group"] = r.lr_by_group;
  return j;
}

nlohmann::ordered_json eval_json(const EvalRecord& r) {
  nlohmann::ordered_json j;
  j["variant"] = r.variant;
  j["seed"] = r.seed;
  j["accuracy"] = r.accuracy;
  return j;
}

nlohmann::ordered_json RunReport::to_json() const {
  nlohmann::ordered_json j;
  j["fingerprint"] = fingerprint;
  j["seed"] = seed;
  j["steps"] = nlohmann::ordered_json::array();
  for (const auto& s : steps) j["steps"].push_back(step_json(s));
  j["evals"] = nlohmann::ordered_json::array();
  for (const auto& e : evals) j["evals"].push_back(eval_json(e));
  return j;
}

void cache_features(const MllmModel& model, std::vector<Sample>& samples) {
  for (auto& s : samples) {
    if (s.image.defined() && s.features.empty()) s.features = model.encode(s.image);
  }
}

RunReport run_stage(MllmModel& model, const StageSpec& stage, std::span<const Sample> data, const RunOptions& options) {
  stage.validate(model.config());
  if (data.empty()) throw ContractError("cannot train on an empty dataset");
  model.set_trainable(stage.trainable);
  std::vector<ParamRef> trainable;
  for (auto& p : model.parameters()) {
    if (stage.trainable.count(p.group)) trainable.push_back(p);
  }
  AdamW opt(trainable);

  const auto n = static_cast<Index>(data.size());
  const Index per_epoch = (n + stage.batch_size - 1) / stage.batch_size;
  const Index total = per_epoch * stage.epochs;
  std::vector<Index> order(static_cast<std::size_t>(n));
  std::mt19937_64 rng(options.seed ^ (stage.kind == StageKind::Pretrain ? 0x5157ull : 0xf17eull));

  RunReport report;
  report.seed = options.seed;
  Index step = 0;
  for (Index epoch = 0; epoch < stage.epochs; ++epoch) {
    std::iota(order.begin(), order.end(), Index{0});
    std::shuffle(order.begin(), order.end(), rng);
    for (Index b = 0; b < n; b += stage.batch_size) {
      const Index end = std::min(n, b + stage.batch_size);
      const float inv = 1.0f / static_cast<float>(end - b);
      model.zero_grad();
      double loss_sum = 0.0;
      for (Index i = b; i < end; ++i) {
        const auto batch = model.assemble(data[static_cast<std::size_t>(order[static_cast<std::size_t>(i)])]);
        const Tensor l = model.training_loss(batch);
        loss_sum += l.item();
        backward(scale(l, inv));
      }
      const double loss = loss_sum / static_cast<double>(end - b);
      if (!std::isfinite(loss)) {
        throw NumericError("non-finite loss at " + std::string(stage_name(stage.kind)) + " step " +
                           std::to_string(step + 1));
      }
      const double factor = lr_factor(stage.schedule, step, total);
      std::map<ParamGroup, double> lrs;
      StepRecord rec;
      rec.step = step + 1;
      rec.stage = std::string(stage_name(stage.kind));
      rec.loss = loss;
      for (ParamGroup g : stage.trainable) {
        lrs[g] = stage.lr_for(g) * factor;
        rec.lr_by_group[std::string(group_name(g))] = lrs[g];
      }
      opt.step(lrs);
      if (options.metrics) options.metrics->append(step_json(rec).dump());
      report.steps.push_back(std::move(rec));
      ++step;
    }
  }
  model.zero_grad();
  model.set_trainable({});
  return report;
}

double evaluate_accuracy(const MllmModel& model, std::span<const Sample> data, std::vector<SampleResult>* records) {
  if (data.empty()) throw ContractError("cannot evaluate an empty split");
  Index correct = 0;
  for (std::size_t i = 0; i < data.size(); ++i) {
    Sample prompt = data[i];
    prompt.answer.clear();
    const auto out = model.generate_greedy(prompt, static_cast<int>(data[i].answer.size()));
    const bool ok = out == data[i].answer;
    correct += ok;
    if (records) records->push_back({static_cast<Index>(i), data[i].answer, out, ok});
  }
  return static_cast<double>(correct) / static_cast<double>(data.size());
}

namespace {

nlohmann::ordered_json stage_to_json(const StageSpec& s) {
  nlohmann::ordered_json j;
  j["stage"] = std::string(stage_name(s.kind));
  std::vector<std::string> groups;
  for (auto g : s.trainable) groups.emplace_back(group_name(g));
  j["trainable"] = groups;
  nlohmann::ordered_json o = nlohmann::ordered_json::object();
  for (auto& [g, lr] : s.lr_overrides) o[std::string(group_name(g))] = lr;
  j["lr_overrides"] = o;
  j["base_lr"] = s.base_lr;
  j["epochs"] = s.epochs;
  j["batch_size"] = s.batch_size;
  j["schedule"] = s.schedule.kind == Schedule::Kind::Cosine ? "cosine" : "constant";
  j["warmup_fraction"] = s.schedule.warmup_fraction;
  j["min_factor"] = s.schedule.min_factor;
  return j;
}

}  // namespace

void ExperimentConfig::refresh_stage_groups() {
  pretrain.trainable = StageSpec::pretrain(model).trainable;
  finetune.trainable = StageSpec::finetune(model).trainable;
}

std::string fingerprint(const ExperimentConfig& cfg) {
  nlohmann::ordered_json j;
  j["model"] = config_to_json(cfg.model);
  j["pretrain"] = stage_to_json(cfg.pretrain);
  j["finetune"] = stage_to_json(cfg.finetune);
  j["data"] = {{"grid", cfg.data.grid},           {"palette", cfg.data.palette},
               {"shapes", cfg.data.shapes},       {"train", cfg.data.train_count},
               {"eval", cfg.data.eval_count}};
  j["seed"] = cfg.seed;
  std::uint64_t h = 1469598103934665603ull;
  for (unsigned char c : j.dump()) {
    h ^= c;
    h *= 1099511628211ull;
  }
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

std::vector<Variant> ablation_variants(const ModelConfig& base, Index single_tap, const std::vector<Index>& multi_taps) {
  ModelConfig b = base;
  b.policy = MaskPolicy::Causal;
  b.separate_visual_qkv = false;
  b.vision.taps = {single_tap};
  b.validate();

  std::vector<Variant> out;
  out.push_back({"baseline", b});
  ModelConfig sep = b;
  sep.separate_visual_qkv = true;
  out.push_back({"+sep_qkv", sep});
  ModelConfig bi = sep;
  bi.policy = MaskPolicy::VisualBidirectional;
  out.push_back({"+sep_qkv+bidir", bi});
  ModelConfig lg = sep;
  lg.vision.taps = multi_taps;
  out.push_back({"+sep_qkv+local_global", lg});
  ModelConfig all = bi;
  all.vision.taps = multi_taps;
  out.push_back({"llavit", all});
  for (const auto& v : out) v.config.validate();
  return out;
}

Variant no_visual_attention_variant(const ModelConfig& baseline) {
  ModelConfig c = baseline;
  c.policy = MaskPolicy::NoVisualAttention;
  c.validate();
  return {"no_visual_attention", c};
}

ExperimentResult run_experiment(const ExperimentConfig& cfg, const Variant& variant, const SynthDataset& data,
                                std::uint64_t seed, const JsonlWriter* metrics) {
  ExperimentConfig ec = cfg;
  ec.model = variant.config;
  ec.refresh_stage_groups();
  if (ec.model.vocab_size < synth_token::kMinVocab) {
    throw ContractError("the synthetic task needs vocab_size >= " + std::to_string(synth_token::kMinVocab));
  }

  ExperimentResult res;
  res.model = MllmModel::random(ec.model, seed);
  std::vector<Sample> captions, qa, eval;
  for (const auto& s : data.train) {
    captions.push_back(caption_sample(s));
    qa.push_back(qa_sample(s));
  }
  for (const auto& s : data.eval) eval.push_back(qa_sample(s));
  cache_features(res.model, captions);
  for (std::size_t i = 0; i < qa.size(); ++i) qa[i].features = captions[i].features;
  cache_features(res.model, eval);

  RunOptions opts{seed, metrics};
  auto pre = run_stage(res.model, ec.pretrain, captions, opts);
  auto fine = run_stage(res.model, ec.finetune, qa, opts);

  res.report.seed = seed;
  res.report.fingerprint = fingerprint(ec);
  res.report.steps = std::move(pre.steps);
  res.report.steps.insert(res.report.steps.end(), fine.steps.begin(), fine.steps.end());
  res.accuracy = evaluate_accuracy(res.model, eval);
  EvalRecord rec{variant.label, seed, res.accuracy};
  if (metrics) metrics->append(eval_json(rec).dump());
  res.report.evals.push_back(rec);
  return res;
}

nlohmann::ordered_json AblationTable::to_json() const {
  nlohmann::ordered_json j;
  j["seeds"] = seeds;
  j["rows"] = nlohmann::ordered_json::array();
  for (const auto& r : rows) {
    nlohmann::ordered_json row;
    row["variant"] = r.label;
    row["accuracy"] = r.accuracy;
    row["mean"] = r.mean;
    row["min"] = r.min;
    row["max"] = r.max;
    j["rows"].push_back(row);
  }
  return j;
}

std::string AblationTable::to_text() const {
  std::ostringstream os;
  char buf[64];
  os << "variant";
  for (auto s : seeds) os << "\tseed" << s;
  os << "\tmean\trange\n";
  for (const auto& r : rows) {
    os << r.label;
    for (double a : r.accuracy) {
      std::snprintf(buf, sizeof(buf), "\t%.3f", a);
      os << buf;
    }
    std::snprintf(buf, sizeof(buf), "\t%.3f\t[%.3f, %.3f]\n", r.mean, r.min, r.max);
    os << buf;
  }
  return os.str();
}

const AblationRow& AblationTable::row(std::string_view label) const {
  for (const auto& r : rows) {
    if (r.label == label) return r;
  }
  throw ContractError("no ablation row '" + std::string(label) + "'");
}

AblationTable run_ablation_matrix(const ExperimentConfig& cfg, const std::vector<Variant>& variants,
                                  const std::vector<std::uint64_t>& seeds, const JsonlWriter* metrics, int threads) {
  if (seeds.empty()) throw ContractError("ablation needs at least one seed");
  if (variants.empty()) throw ContractError("ablation needs at least one variant");
  const SynthDataset data = gen_dataset(cfg.seed, cfg.data);

  const std::size_t jobs = variants.size() * seeds.size();
  std::vector<double> acc(jobs, 0.0);
  std::vector<std::exception_ptr> errors(jobs);
  std::atomic<std::size_t> next{0};
  auto worker = [&] {
    for (std::size_t j; (j = next.fetch_add(1)) < jobs;) {
      try {
        acc[j] = run_experiment(cfg, variants[j / seeds.size()], data, seeds[j % seeds.size()], metrics).accuracy;
      } catch (...) {
        errors[j] = std::current_exception();
      }
    }
  };
  const int n_threads = std::clamp<int>(threads, 1, static_cast<int>(jobs));
  if (n_threads == 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    for (int t = 0; t < n_threads; ++t) pool.emplace_back(worker);
    for (auto& t : pool) t.join();
  }
  for (auto& e : errors) {
    if (e) std::rethrow_exception(e);
  }

  AblationTable table;
  table.seeds = seeds;
  for (std::size_t v = 0; v < variants.size(); ++v) {
    AblationRow row;
    row.label = variants[v].label;
    row.accuracy.assign(acc.begin() + static_cast<std::ptrdiff_t>(v * seeds.size()),
                        acc.begin() + static_cast<std::ptrdiff_t>((v + 1) * seeds.size()));
    row.mean = std::accumulate(row.accuracy.begin(), row.accuracy.end(), 0.0) / static_cast<double>(seeds.size());
    row.min = *std::min_element(row.accuracy.begin(), row.accuracy.end());
    row.max = *std::max_element(row.accuracy.begin(), row.accuracy.end());
    table.rows.push_back(std::move(row));
  }
  return table;
}

int threads_from_env() {
  const char* v = std::getenv("MODELLAB_THREADS");
  if (!v) return 1;
  char* end = nullptr;
  const long n = std::strtol(v, &end, 10);
  if (end == v || *end != '\0' || n < 1) return 1;
  return static_cast<int>(std::min<long>(n, 256));
}

}  // namespace mlab
