#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"
#include "modellab/file_io.hpp"
#include "modellab/model.hpp"
#include "modellab/synth.hpp"

namespace mlab {

enum class StageKind { Pretrain, Finetune };
std::string_view stage_name(StageKind kind);
StageKind parse_stage(std::string_view name);

struct Schedule {
  enum class Kind { Cosine, Constant };
  Kind kind = Kind::Cosine;
  double warmup_fraction = 0.03;
  double min_factor = 0.0;
};

/// Multiplier on the base rate at zero-based `step` of `total_steps`.
/// Linear warmup over the first ceil(warmup_fraction * total) steps, then
/// cosine decay from 1 at the first post-warmup step to min_factor at the last.
double lr_factor(const Schedule& schedule, Index step, Index total_steps);

struct StageSpec {
  StageKind kind = StageKind::Pretrain;
  std::set<ParamGroup> trainable;
  std::map<ParamGroup, double> lr_overrides;
  double base_lr = 1e-3;
  Index epochs = 1;
  Index batch_size = 32;
  Schedule schedule;

  static StageSpec pretrain(const ModelConfig& cfg);
  static StageSpec finetune(const ModelConfig& cfg);

  double lr_for(ParamGroup group) const;
  /// Throws if a group is absent from the model or the encoder is listed.
  void validate(const ModelConfig& cfg) const;
};

struct AdamWConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.0;
};

/// Moments are allocated only for the parameters handed to the constructor.
class AdamW {
 public:
  AdamW(std::vector<ParamRef> params, AdamWConfig cfg = {});

  /// One update with per-group learning rates; parameters without a gradient
  /// are skipped.
  void step(const std::map<ParamGroup, double>& lr_by_group);
  Index steps_taken() const { return t_; }
  std::size_t state_size() const { return slots_.size(); }

 private:
  struct Slot {
    ParamRef param;
    std::vector<double> m, v;
  };
  std::vector<Slot> slots_;
  AdamWConfig cfg_;
  Index t_ = 0;
};

struct StepRecord {
  Index step = 0;  // 1-based
  std::string stage;
  double loss = 0.0;
  std::map<std::string, double> lr_by_group;
};

struct EvalRecord {
  std::string variant;
  std::uint64_t seed = 0;
  double accuracy = 0.0;
};

struct SampleResult {
  Index index = 0;
  std::vector<int> expected;
  std::vector<int> generated;
  bool correct = false;
};

struct RunReport {
  std::vector<StepRecord> steps;
  std::vector<EvalRecord> evals;
  std::string fingerprint;
  std::uint64_t seed = 0;

  nlohmann::ordered_json to_json() const;
};

nlohmann::ordered_json step_json(const StepRecord& r);
nlohmann::ordered_json eval_json(const EvalRecord& r);

struct RunOptions {
  std::uint64_t seed = 0;  // drives data order
  const JsonlWriter* metrics = nullptr;
};

/// Fills each sample's cached encoder features. The encoder is frozen, so
/// caching does not change any computed value.
void cache_features(const MllmModel& model, std::vector<Sample>& samples);

/// Trains `model` in place on one stage. Aborts with NumericError on a
/// non-finite loss.
RunReport run_stage(MllmModel& model, const StageSpec& stage, std::span<const Sample> data,
                    const RunOptions& options = {});

/// Exact-match accuracy of greedy answers (answer tokens include EOS).
double evaluate_accuracy(const MllmModel& model, std::span<const Sample> data,
                         std::vector<SampleResult>* records = nullptr);

struct ExperimentConfig {
  ModelConfig model;
  StageSpec pretrain;
  StageSpec finetune;
  SynthSpec data;
  std::uint64_t seed = 0;

  /// Stage specs recomputed for the current model flags, keeping rates,
  /// epochs, batch and schedule.
  void refresh_stage_groups();
};

std::string fingerprint(const ExperimentConfig& cfg);

struct Variant {
  std::string label;
  ModelConfig config;
};

/// Rows of the ablation table in order: baseline, +Sep. QKV, +BiAttn,
/// +Local/Global, all three. The baseline taps only `single_tap`.
std::vector<Variant> ablation_variants(const ModelConfig& base, Index single_tap, const std::vector<Index>& multi_taps);
/// Baseline with visual rows cut off from all attention.
Variant no_visual_attention_variant(const ModelConfig& baseline);

struct ExperimentResult {
  RunReport report;
  double accuracy = 0.0;
  MllmModel model;
};

/// Pretrain then finetune a fresh model of `variant` on `data`, then evaluate.
ExperimentResult run_experiment(const ExperimentConfig& cfg, const Variant& variant, const SynthDataset& data,
                                std::uint64_t seed, const JsonlWriter* metrics = nullptr);

struct AblationRow {
  std::string label;
  std::vector<double> accuracy;  // one per seed
  double mean = 0.0, min = 0.0, max = 0.0;
};

struct AblationTable {
  std::vector<std::uint64_t> seeds;
  std::vector<AblationRow> rows;

  nlohmann::ordered_json to_json() const;
  std::string to_text() const;
  const AblationRow& row(std::string_view label) const;
};

/// Trains every variant for every seed on the same dataset. Jobs run on up
/// to `threads` workers; results are placed by (variant, seed), so the table
/// is independent of scheduling.
AblationTable run_ablation_matrix(const ExperimentConfig& cfg, const std::vector<Variant>& variants,
                                  const std::vector<std::uint64_t>& seeds, const JsonlWriter* metrics = nullptr,
                                  int threads = 1);

/// MODELLAB_THREADS if set to a positive integer, else 1.
int threads_from_env();

}  // namespace mlab
