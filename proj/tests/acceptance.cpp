// Acceptance run: one PASS/FAIL line per criterion. Exit status is nonzero if
// any criterion fails.

#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <ctime>
#include <functional>
#include <map>
#include <numeric>
#include <set>
#include <sstream>
#include <string>
#include <thread>

#include "modellab/checkpoint.hpp"
#include "modellab/cost.hpp"
#include "modellab/probes.hpp"
#include "modellab/run_config.hpp"
#include "modellab/train.hpp"
#include "fixtures.hpp"

using namespace mlab;
using namespace mlab::testing;

namespace {

constexpr double kFlopsTol = 0.05;
constexpr double kLmHeadTol = 0.02;
constexpr double kDeltaTolPp = 0.5;
constexpr double kTotalTol = 0.02;
constexpr float kEquivTol = 1e-6f;
constexpr float kFlowTol = 1e-6f;
constexpr double kVariantFloor = 0.9;
constexpr double kNoVisGapPp = 5.0;
constexpr double kAblationCpuBudgetS = 600.0;

struct Outcome {
  bool pass = true;
  std::ostringstream detail;

  void check(bool ok, const std::string& what) {
    if (!ok) {
      if (!pass) detail << "; ";
      else detail.str("");
      pass = false;
      detail << what;
    }
  }
};

double rel(double got, double want) { return std::abs(got - want) / std::abs(want); }

float max_diff(const Tensor& a, const Tensor& b) { return max_abs_diff(a.values(), b.values()); }

float row_diff(const Tensor& a, const Tensor& b, Index row) {
  const Index w = a.dim(1);
  const auto off = static_cast<std::size_t>(row * w);
  return max_abs_diff(a.values().subspan(off, w), b.values().subspan(off, w));
}

const DimsCatalog& catalog() {
  static const DimsCatalog c = load_dims_catalog();
  return c;
}

void cost_table(Outcome& o) {
  const auto& llm = catalog().preset("qwen2.5-3b").llm;
  const TokenLayout l{0, 576, 448};
  const auto c = count_flops(llm, l, MaskPolicy::Causal);
  const auto b = count_flops(llm, l, MaskPolicy::VisualBidirectional);
  const std::tuple<const char*, double, double, double> rows[] = {
      {"attn causal", c.attention_per_layer / 1e9, 38.7, kFlopsTol},
      {"attn bidir", b.attention_per_layer / 1e9, 40.8, kFlopsTol},
      {"mlp", c.mlp_per_layer / 1e9, 92.4, kFlopsTol},
      {"lm head", c.lm_head / 1e9, 632.7, kLmHeadTol},
      {"total causal", c.total / 1e9, 5348.7, kFlopsTol},
      {"total bidir", b.total / 1e9, 5426.1, kFlopsTol}};
  for (const auto& [name, got, want, tol] : rows) {
    o.check(rel(got, want) <= tol, std::string(name) + " " + std::to_string(got));
    o.detail << name << " " << got << " ";
  }
}

void param_table(Outcome& o) {
  const std::tuple<const char*, double, double, double> rows[] = {
      {"qwen2.5-1.5b", 4.9, 1850740736.0, 1942024192.0},
      {"qwen2.5-3b", 5.7, 3396186688.0, 3588216832.0},
      {"qwen2.5-7b", 5.9, 7932786176.0, 8402677248.0},
      {"qwen2.5-14b", 11.7, 15100928000.0, 16873365504.0}};
  for (const auto& [name, pct, base, ours] : rows) {
    const auto& d = catalog().preset(name);
    const double a = static_cast<double>(count_params(d, false).total);
    const double b = static_cast<double>(count_params(d, true).total);
    const double delta = 100.0 * (b - a) / a;
    o.check(std::abs(delta - pct) <= kDeltaTolPp, std::string(name) + " delta " + std::to_string(delta));
    o.check(rel(a, base) <= kTotalTol && rel(b, ours) <= kTotalTol, std::string(name) + " totals");
    o.detail << name << " +" << std::round(delta * 100) / 100 << "% ";
  }
}

void copy_init(Outcome& o) {
  const auto base_cfg = tiny_config();
  auto sep_cfg = base_cfg;
  sep_cfg.separate_visual_qkv = true;
  const auto base = MllmModel::random(base_cfg, 11);
  const auto sep = MllmModel::random(sep_cfg, 11);
  std::mt19937_64 rng(11);
  float worst = 0.0f;
  for (int i = 0; i < 100; ++i) {
    const Sample s = random_sample(rng, base_cfg, i % 4, 1 + i % 5, 1 + i % 2);
    worst = std::max(worst, max_diff(base.forward(base.assemble(s)), sep.forward(sep.assemble(s))));
  }
  o.check(worst <= kEquivTol, "max abs " + std::to_string(worst));
  o.detail << "100 batches, max abs " << worst;
}

void mask_semantics(Outcome& o) {
  std::size_t layouts = 0;
  for (Index m = 0; m <= 12; ++m)
    for (Index n = 0; m + n <= 12; ++n)
      for (Index u = 0; m + n + u <= 12; ++u) {
        const TokenLayout l{m, n, u};
        const Index total = l.size();
        if (total == 0) continue;
        ++layouts;
        for (auto p : {MaskPolicy::Causal, MaskPolicy::VisualBidirectional, MaskPolicy::NoVisualAttention}) {
          const auto mask = build_mask(l, p);
          for (Index i = 0; i < total; ++i)
            for (Index j = 0; j < total; ++j) {
              const bool want =
                  j <= i || (p == MaskPolicy::VisualBidirectional && l.is_visual(i) && l.is_visual(j));
              if (mask.allowed(i, j) != want) {
                o.check(false, std::string(policy_name(p)) + " entry mismatch");
                return;
              }
            }
          const Index want = total * (total + 1) / 2 + (p == MaskPolicy::VisualBidirectional ? n * (n - 1) / 2 : 0);
          o.check(mask.allowed_count() == want, "count mismatch");
        }
      }
  o.detail << layouts << " layouts x 3 policies";
}

Tensor perturbed_hidden(const MllmModel& m, const AssembledBatch& b, Index p) {
  Tensor emb = b.embeddings.detach();
  const Index w = m.config().width;
  for (Index c = 0; c < w; ++c) emb.mutable_values()[static_cast<std::size_t>(p * w + c)] += 0.5f;
  return m.hidden_states(emb, b.layout);
}

void information_flow(Outcome& o) {
  std::mt19937_64 rng(12);
  for (auto policy : {MaskPolicy::Causal, MaskPolicy::VisualBidirectional}) {
    const auto cfg = tiny_config(policy);
    const auto m = MllmModel::random(cfg, 12);
    const auto b = m.assemble(random_sample(rng, cfg, 3, 4, 2));
    const Tensor base = m.hidden_states(b.embeddings, b.layout);
    const auto& l = b.layout;
    for (Index p = 0; p < l.size(); ++p) {
      const Tensor out = perturbed_hidden(m, b, p);
      const bool bidir_vis = policy == MaskPolicy::VisualBidirectional && l.is_visual(p);
      const Index earliest = bidir_vis ? l.visual_begin() : p;
      for (Index i = 0; i < l.size(); ++i) {
        const float d = row_diff(out, base, i);
        if (i < earliest) o.check(d <= kFlowTol, std::string(policy_name(policy)) + " earlier row moved");
        else o.check(d > kFlowTol, std::string(policy_name(policy)) + " later row unaffected");
      }
    }
  }

  const auto cfg = tiny_config(MaskPolicy::NoVisualAttention);
  const auto m = MllmModel::random(cfg, 13);
  const auto b = m.assemble(random_sample(rng, cfg, 2, 3, 2));
  ForwardTrace trace;
  const Tensor base = m.hidden_states(b.embeddings, b.layout, &trace);
  for (const auto& d : trace.attn_delta)
    for (Index i = b.layout.visual_begin(); i < b.layout.visual_end(); ++i)
      o.check(row_diff(d, Tensor::zeros(d.shape()), i) == 0.0f, "novis visual delta nonzero");
  const Tensor out = perturbed_hidden(m, b, b.layout.visual_begin());
  for (Index i = b.layout.visual_end(); i < b.layout.size(); ++i)
    o.check(row_diff(out, base, i) > kFlowTol, "novis text row ignores visual input");
  o.detail << "causal, bidir, novis over every position";
}

void trainable(Linear& l) {
  l.weight.set_requires_grad(true);
  if (l.bias.defined()) l.bias.set_requires_grad(true);
}

Tensor uniform(Shape shape, std::mt19937_64& rng) {
  std::uniform_real_distribution<float> d(-1.0f, 1.0f);
  std::vector<float> v(static_cast<std::size_t>(numel(shape)));
  for (auto& x : v) x = d(rng);
  return Tensor(std::move(shape), std::move(v), true);
}

void gradients(Outcome& o) {
  std::mt19937_64 rng(14);
  int checks = 0;
  const auto run = [&](const std::string& name, const Fn& f, const std::vector<Tensor>& in) {
    const auto r = grad_check(f, in);
    ++checks;
    std::ostringstream s;
    s << name << " " << r;
    o.check(r.ok(), s.str());
  };
  const auto mask = build_mask({1, 3, 2}, MaskPolicy::VisualBidirectional);
  const std::vector<int> ids{4, 1, 1, 0};
  const std::vector<int> targets{4, -1, 0};
  const std::vector<Index> pos{0, 1, 2, 7, 30};
  const std::vector<bool> keep{true, false, true};

  run("matmul", [](const auto& x) { return matmul(x[0], x[1]); }, {uniform({5, 7}, rng), uniform({7, 3}, rng)});
  run("matmul batched", [](const auto& x) { return matmul(x[0], x[1]); },
      {uniform({2, 4, 3}, rng), uniform({3, 5}, rng)});
  run("add", [](const auto& x) { return add(x[0], x[1]); }, {uniform({3, 4}, rng), uniform({4}, rng)});
  run("mul", [](const auto& x) { return mul(x[0], x[1]); }, {uniform({3, 4}, rng), uniform({3, 4}, rng)});
  run("scale", [](const auto& x) { return scale(x[0], 0.37f); }, {uniform({3, 4}, rng)});
  run("silu", [](const auto& x) { return silu(x[0]); }, {uniform({3, 4}, rng)});
  run("transpose", [](const auto& x) { return transpose(x[0]); }, {uniform({2, 3, 4}, rng)});
  run("reshape", [](const auto& x) { return reshape(x[0], {6, 4}); }, {uniform({2, 3, 4}, rng)});
  run("slice_rows", [](const auto& x) { return slice_rows(x[0], 1, 3); }, {uniform({3, 4}, rng)});
  run("concat_last_dim", [](const auto& x) { return concat_last_dim(x); },
      {uniform({3, 4}, rng), uniform({3, 2}, rng)});
  run("concat_rows", [](const auto& x) { return concat_rows(x); }, {uniform({2, 4}, rng), uniform({1, 4}, rng)});
  run("embedding_lookup", [&](const auto& x) { return embedding_lookup(x[0], ids); }, {uniform({5, 3}, rng)});
  run("cross_entropy", [&](const auto& x) { return cross_entropy_with_ignore_index(x[0], targets, -1); },
      {uniform({3, 5}, rng)});
  run("rms_norm", [](const auto& x) { return layer_norm_rms(x[0], x[1], 1e-6f); },
      {uniform({3, 6}, rng), uniform({6}, rng)});
  run("masked_softmax", [&](const auto& x) { return masked_softmax(x[0], mask); }, {uniform({2, 6, 6}, rng)});
  run("split_heads", [](const auto& x) { return split_heads(x[0], 4); }, {uniform({5, 8}, rng)});
  run("merge_heads", [](const auto& x) { return merge_heads(x[0]); }, {uniform({2, 5, 4}, rng)});
  run("masked_scores", [&](const auto& x) { return masked_scores(x[0], x[1], mask, 0.5f); },
      {uniform({2, 6, 4}, rng), uniform({2, 6, 4}, rng)});
  {
    Tensor p = masked_softmax(uniform({2, 6, 6}, rng).detach(), mask).detach();
    p.set_requires_grad(true);
    run("masked_weighted_sum", [&](const auto& x) { return masked_weighted_sum(x[0], x[1], mask); },
        {p, uniform({2, 6, 4}, rng)});
  }
  run("mask_rows", [&](const auto& x) { return mask_rows(x[0], keep); }, {uniform({3, 2}, rng)});
  run("rotary", [&](const auto& x) { return rotary(x[0], pos, 100.0f); }, {uniform({2, 5, 6}, rng)});

  for (bool sep : {false, true}) {
    for (auto policy : {MaskPolicy::Causal, MaskPolicy::VisualBidirectional, MaskPolicy::NoVisualAttention}) {
      const AttnConfig cfg{8, 2, 100.0f, true, sep};
      const TokenLayout layout{1, 3, 2};
      const auto m = build_mask(layout, policy);
      auto params = QkvParams::random(8, true, 0.3f, 0.3f, rng);
      std::vector<Tensor> in{randn({6, 8}, rng)};
      std::vector<Linear*> ls{&params.q_text, &params.k_text, &params.v_text, &params.out};
      if (sep) {
        params.copy_init_visual();
        for (auto& w : params.q_vis->weight.mutable_values()) w += 0.05f;
        ls.insert(ls.end(), {&*params.q_vis, &*params.k_vis, &*params.v_vis});
      }
      for (Linear* l : ls) {
        trainable(*l);
        in.push_back(l->weight);
        if (l->bias.defined()) in.push_back(l->bias);
      }
      run(std::string("attend ") + std::string(policy_name(policy)) + (sep ? " sep" : ""),
          [&](const auto& x) { return attend(x[0], m, params, cfg, layout); }, in);
    }
  }
  {
    auto proj = Projector::random(12, 6, rng);
    trainable(proj.fc1);
    trainable(proj.fc2);
    run("connect",
        [&](const auto& x) {
          std::vector<Tensor> f{x[0], x[1]};
          return connect(f, proj);
        },
        {randn({4, 6}, rng), randn({4, 6}, rng), proj.fc1.weight, proj.fc1.bias, proj.fc2.weight, proj.fc2.bias});
  }

  for (auto policy : {MaskPolicy::Causal, MaskPolicy::VisualBidirectional, MaskPolicy::NoVisualAttention}) {
    auto cfg = tiny_config(policy, policy != MaskPolicy::NoVisualAttention, 2);
    cfg.vision.taps = {1, 3};
    auto m = MllmModel::random(cfg, 15);
    for (auto& blk : m.blocks)
      if (blk.attn.has_visual())
        for (auto& w : blk.attn.q_vis->weight.mutable_values()) w += 0.05f;
    std::set<ParamGroup> groups(std::begin(kAllGroups), std::end(kAllGroups));
    groups.erase(ParamGroup::Encoder);
    m.set_trainable(groups);
    std::vector<Tensor> params;
    for (const auto& p : m.parameters())
      if (p.group != ParamGroup::Encoder) params.push_back(p.tensor);
    const Sample s = random_sample(rng, cfg);
    run(std::string("end-to-end ") + std::string(policy_name(policy)),
        [&](const auto&) { return m.training_loss(m.assemble(s)); }, params);
  }
  if (o.pass) o.detail << checks << " finite-difference checks";
}

std::vector<Sample> random_samples(const ModelConfig& cfg, int count, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::vector<Sample> out;
  for (int i = 0; i < count; ++i) out.push_back(random_sample(rng, cfg));
  return out;
}

void stage_freezing(Outcome& o) {
  for (bool sep : {false, true}) {
    const auto cfg = tiny_config(MaskPolicy::Causal, sep);
    auto m = MllmModel::random(cfg, 16);
    std::map<std::string, std::vector<float>> before;
    for (const auto& p : m.parameters()) before[p.name] = {p.tensor.values().begin(), p.tensor.values().end()};
    auto stage = StageSpec::pretrain(cfg);
    stage.batch_size = 1;
    const Index total = 40;
    const auto report = run_stage(m, stage, random_samples(cfg, total, 16), {16});
    const std::string dead = "layers." + std::to_string(cfg.layers - 1) + ".attn.q_vis";
    for (const auto& p : m.parameters()) {
      const bool changed = !std::equal(before[p.name].begin(), before[p.name].end(), p.tensor.values().begin());
      const bool trains = p.group == ParamGroup::Projector || (sep && p.group == ParamGroup::VisualQkv);
      if (!trains) o.check(!changed, p.name + " changed");
      else if (p.name.rfind(dead, 0) != 0) o.check(changed, p.name + " unchanged");
    }
    if (sep) {
      const auto warmup = static_cast<std::size_t>(std::ceil(stage.schedule.warmup_fraction * total));
      const double lr = report.steps.at(warmup).lr_by_group.at("visual_qkv");
      o.check(lr == 2e-4, "visual_qkv lr " + std::to_string(lr));
      o.detail << "visual_qkv lr at step " << warmup + 1 << " = " << lr;
    }
  }
}

void ablation(Outcome& o) {
  const auto cfg = load_run_config(std::string(MODELLAB_DATA_DIR) + "/ablation.ini");
  auto variants = ablation_variants(cfg.experiment.model, cfg.ablation.single_tap, cfg.ablation.multi_taps);
  variants.push_back(no_visual_attention_variant(variants.front().config));
  const int threads = std::getenv("MODELLAB_THREADS")
                          ? threads_from_env()
                          : std::max(1, static_cast<int>(std::thread::hardware_concurrency()));
  const std::clock_t cpu0 = std::clock();
  const auto wall0 = std::chrono::steady_clock::now();
  const auto table = run_ablation_matrix(cfg.experiment, variants, cfg.ablation.seeds, nullptr, threads);
  const double cpu = double(std::clock() - cpu0) / CLOCKS_PER_SEC;
  const double wall = std::chrono::duration<double>(std::chrono::steady_clock::now() - wall0).count();

  std::printf("%s", table.to_text().c_str());
  const std::vector<std::string> rows{"baseline", "+sep_qkv", "+sep_qkv+bidir", "+sep_qkv+local_global", "llavit"};
  for (std::size_t i = 0; i < rows.size(); ++i)
    o.check(i < table.rows.size() && table.rows[i].label == rows[i], "missing row " + rows[i]);
  o.check(table.seeds.size() == 3, "expected 3 seeds");
  const double base = table.row("baseline").mean;
  for (const auto& r : rows)
    o.check(table.row(r).mean >= kVariantFloor * base, r + " below 0.9x baseline");
  const double gap = 100.0 * (base - table.row("no_visual_attention").mean);
  o.check(gap >= kNoVisGapPp, "no_visual_attention only " + std::to_string(gap) + "pp below baseline");
  o.check(cpu <= kAblationCpuBudgetS, "cpu " + std::to_string(cpu) + " s");
  o.detail << " (baseline " << base << ", gap " << gap << "pp, cpu " << cpu << " s, wall " << wall << " s on "
           << threads << " threads)";
}

std::vector<double> softmax_row(const Tensor& logits, Index row) {
  const Index v = logits.dim(1);
  std::vector<double> p(static_cast<std::size_t>(v));
  double mx = -INFINITY, z = 0.0;
  for (Index w = 0; w < v; ++w) mx = std::max(mx, double(logits.values()[row * v + w]));
  for (Index w = 0; w < v; ++w) z += p[w] = std::exp(double(logits.values()[row * v + w]) - mx);
  for (auto& x : p) x /= z;
  return p;
}

std::vector<double> cosine_row(const Tensor& x, Index i, const Tensor& e) {
  const Index d = x.dim(1);
  std::vector<double> out(static_cast<std::size_t>(e.dim(0)));
  for (Index w = 0; w < e.dim(0); ++w) {
    double dot = 0, nx = 0, ne = 0;
    for (Index c = 0; c < d; ++c) {
      const double a = x.values()[i * d + c], b = e.values()[w * d + c];
      dot += a * b;
      nx += a * a;
      ne += b * b;
    }
    out[w] = nx == 0 || ne == 0 ? 0.0 : dot / std::sqrt(nx * ne);
  }
  return out;
}

bool matches_argsort(const std::vector<std::pair<int, float>>& top, const std::vector<double>& s, Index k) {
  std::vector<int> idx(s.size());
  std::iota(idx.begin(), idx.end(), 0);
  std::stable_sort(idx.begin(), idx.end(), [&](int a, int b) { return s[a] > s[b]; });
  if (static_cast<Index>(top.size()) != k) return false;
  for (Index r = 0; r < k; ++r)
    if (top[r].first != idx[r] || std::abs(top[r].second - s[idx[r]]) > 1e-6) return false;
  return true;
}

void lens_oracles(Outcome& o) {
  std::mt19937_64 rng(17);
  int tokens = 0;
  for (auto policy : {MaskPolicy::Causal, MaskPolicy::VisualBidirectional}) {
    const auto cfg = tiny_config(policy, true);
    const auto m = MllmModel::random(cfg, 17);
    for (int trial = 0; trial < 3; ++trial) {
      const auto b = m.assemble(random_sample(rng, cfg));
      const Tensor logits = m.forward(b);
      for (Index k : {Index{1}, Index{3}, cfg.vocab_size}) {
        const auto in = input_lens(m, b, k);
        const auto out = output_lens(m, b, k);
        for (Index i = 0; i < b.layout.visual; ++i, ++tokens) {
          o.check(matches_argsort(in.entries[i].top, cosine_row(b.visual_tokens, i, m.embed), k), "input lens");
          o.check(matches_argsort(out.entries[i].top, softmax_row(logits, b.layout.visual_begin() + i), k),
                  "output lens");
        }
      }
    }
  }
  o.detail << tokens << " visual tokens x 2 lenses";
}

void round_trip(Outcome& o) {
  SynthSpec spec;
  spec.grid = 2;
  spec.palette = 3;
  spec.shapes = 2;
  spec.image_size = 8;
  spec.patch_size = 4;
  spec.channels = 3;
  spec.train_count = 32;
  spec.eval_count = 16;
  const auto ds = gen_dataset(18, spec);
  auto cfg = tiny_config(MaskPolicy::VisualBidirectional, true);
  cfg.vocab_size = synth_token::kMinVocab;
  auto m = MllmModel::random(cfg, 18);
  std::vector<Sample> train, eval;
  for (const auto& s : ds.train) train.push_back(qa_sample(s));
  for (const auto& s : ds.eval) eval.push_back(qa_sample(s));
  auto stage = StageSpec::finetune(cfg);
  stage.batch_size = 8;
  stage.epochs = 20;
  stage.base_lr = 5e-3;
  run_stage(m, stage, train, {18});

  const auto dir = std::filesystem::temp_directory_path() / "modellab_acceptance";
  std::filesystem::create_directories(dir);
  save_checkpoint(m, dir / "a.ckpt");
  const auto reloaded = load_checkpoint(dir / "a.ckpt");
  save_checkpoint(reloaded, dir / "b.ckpt");
  const bool same = read_file(dir / "a.ckpt") == read_file(dir / "b.ckpt");
  std::filesystem::remove_all(dir);
  o.check(same, "rewritten checkpoint differs");

  std::vector<SampleResult> r1, r2;
  const double a1 = evaluate_accuracy(m, eval, &r1);
  const double a2 = evaluate_accuracy(reloaded, eval, &r2);
  o.check(a1 > 0.0, "trained model scores 0, eval comparison is vacuous");
  o.check(a1 == a2, "accuracy differs");
  for (std::size_t i = 0; i < r1.size(); ++i)
    o.check(r1[i].generated == r2[i].generated, "generation differs at " + std::to_string(i));
  o.detail << "bit-identical rewrite, accuracy " << a1 << " before and after";
}

}  // namespace

// Optional arguments select criteria by number.
int main(int argc, char** argv) {
  std::set<int> only;
  for (int i = 1; i < argc; ++i) only.insert(std::atoi(argv[i]));
  const std::pair<const char*, void (*)(Outcome&)> criteria[] = {
      {"cost table", cost_table},
      {"parameter deltas", param_table},
      {"copy-init equivalence", copy_init},
      {"mask semantics", mask_semantics},
      {"causality and information flow", information_flow},
      {"gradient correctness", gradients},
      {"stage freezing", stage_freezing},
      {"ablation ordering", ablation},
      {"lens oracles", lens_oracles},
      {"checkpoint round trip", round_trip},
  };
  int failed = 0;
  int n = 0;
  for (const auto& [name, fn] : criteria) {
    if (!only.empty() && !only.count(n + 1)) {
      ++n;
      continue;
    }
    Outcome o;
    try {
      fn(o);
    } catch (const std::exception& e) {
      o.check(false, std::string("exception: ") + e.what());
    }
    failed += !o.pass;
    std::printf("%s %2d %s: %s\n", o.pass ? "PASS" : "FAIL", ++n, name, o.detail.str().c_str());
    std::fflush(stdout);
  }
  const int ran = only.empty() ? n : static_cast<int>(only.size());
  std::printf("%d of %d criteria passed\n", ran - failed, ran);
  return failed == 0 ? 0 : 1;
}
