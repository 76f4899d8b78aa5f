#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <numeric>

#include "modellab/errors.hpp"
#include "modellab/probes.hpp"
#include "fixtures.hpp"

using namespace mlab;
using namespace mlab::testing;

namespace {

std::vector<int> argsort_desc(const std::vector<double>& s) {
  std::vector<int> idx(s.size());
  std::iota(idx.begin(), idx.end(), 0);
  std::stable_sort(idx.begin(), idx.end(), [&](int a, int b) { return s[a] > s[b]; });
  return idx;
}

std::vector<double> brute_cosines(const Tensor& x, Index i, const Tensor& e) {
  const Index d = x.dim(1), v = e.dim(0);
  std::vector<double> out(static_cast<std::size_t>(v));
  for (Index w = 0; w < v; ++w) {
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

void expect_matches_oracle(const std::vector<std::pair<int, float>>& top, const std::vector<double>& scores, Index k) {
  const auto order = argsort_desc(scores);
  ASSERT_EQ(static_cast<Index>(top.size()), k);
  for (Index r = 0; r < k; ++r) {
    EXPECT_EQ(top[r].first, order[r]) << "rank " << r;
    EXPECT_NEAR(top[r].second, scores[order[r]], 1e-6);
  }
}

}  // namespace

TEST(InputLens, EmbeddingRowScoresOneAndOrthogonalScoresZero) {
  std::mt19937_64 rng(1);
  const Tensor embed = randn({6, 4}, rng, 1.0f, false);
  std::vector<float> rows;
  for (int j : {4, 1}) rows.insert(rows.end(), embed.values().begin() + j * 4, embed.values().begin() + j * 4 + 4);
  const auto r = input_lens(Tensor({2, 4}, rows), embed, 1, 1);
  EXPECT_EQ(r.entries[0].top[0].first, 4);
  EXPECT_NEAR(r.entries[0].top[0].second, 1.0f, 1e-6f);
  EXPECT_EQ(r.entries[1].top[0].first, 1);

  const Tensor e2({2, 2}, {1, 0, 0, 1});
  const auto t = cosine_table(Tensor({1, 2}, {0, 3}), e2);
  EXPECT_EQ(t[0][0], 0.0f);
  EXPECT_FLOAT_EQ(t[0][1], 1.0f);
  EXPECT_EQ(cosine_table(Tensor({1, 2}, {0, 0}), e2)[0][1], 0.0f);
}

TEST(InputLens, MatchesBruteForceArgsort) {
  std::mt19937_64 rng(2);
  for (int trial = 0; trial < 5; ++trial) {
    const Tensor vis = randn({9, 6}, rng, 1.0f, false);
    const Tensor embed = randn({20, 6}, rng, 1.0f, false);
    for (Index k : {1, 3, 20}) {
      const auto r = input_lens(vis, embed, 3, k);
      ASSERT_EQ(r.entries.size(), 9u);
      for (Index i = 0; i < 9; ++i) {
        EXPECT_EQ(r.entries[i].row, i / 3);
        EXPECT_EQ(r.entries[i].col, i % 3);
        expect_matches_oracle(r.entries[i].top, brute_cosines(vis, i, embed), k);
      }
    }
  }
  const Tensor embed = randn({5, 2}, rng, 1.0f, false);
  EXPECT_THROW(input_lens(randn({1, 2}, rng, 1.0f, false), embed, 1, 6), ContractError);
  EXPECT_THROW(input_lens(randn({1, 2}, rng, 1.0f, false), embed, 1, 0), ContractError);
  EXPECT_THROW(input_lens(randn({1, 3}, rng, 1.0f, false), embed, 1, 1), ShapeError);
}

TEST(InputLens, ModelOverloadUsesProjectedTokensAndEmbeddingTable) {
  const auto cfg = tiny_config();
  const auto m = MllmModel::random(cfg, 3);
  std::mt19937_64 rng(3);
  const auto batch = m.assemble(random_sample(rng, cfg));
  const auto a = input_lens(m, batch, 3);
  const auto b = input_lens(batch.visual_tokens, m.embed, cfg.vision.grid_side(), 3);
  ASSERT_EQ(a.entries.size(), 4u);
  for (std::size_t i = 0; i < 4; ++i) EXPECT_EQ(a.entries[i].top, b.entries[i].top);
}

TEST(OutputLens, MatchesBruteForceSoftmaxArgsort) {
  for (auto policy : {MaskPolicy::Causal, MaskPolicy::VisualBidirectional}) {
    const auto cfg = tiny_config(policy, true);
    const auto m = MllmModel::random(cfg, 4);
    std::mt19937_64 rng(4);
    const auto batch = m.assemble(random_sample(rng, cfg));
    const Tensor logits = m.forward(batch);
    const Index v = cfg.vocab_size;
    for (Index k : {Index{1}, Index{3}, v}) {
      const auto r = output_lens(m, batch, k);
      ASSERT_EQ(static_cast<Index>(r.entries.size()), batch.layout.visual);
      for (Index i = 0; i < batch.layout.visual; ++i) {
        const Index row = batch.layout.visual_begin() + i;
        std::vector<double> p(static_cast<std::size_t>(v));
        double mx = -INFINITY, z = 0.0;
        for (Index w = 0; w < v; ++w) mx = std::max(mx, double(logits.values()[row * v + w]));
        for (Index w = 0; w < v; ++w) z += p[w] = std::exp(double(logits.values()[row * v + w]) - mx);
        for (auto& x : p) x /= z;
        EXPECT_EQ(r.entries[i].row, i / 2);
        EXPECT_EQ(r.entries[i].col, i % 2);
        expect_matches_oracle(r.entries[i].top, p, k);
      }
    }
    EXPECT_THROW(output_lens(m, batch, v + 1), ContractError);
  }
}

TEST(Lens, TextOnlyBatchRejected) {
  const auto cfg = tiny_config();
  const auto m = MllmModel::random(cfg, 5);
  Sample s;
  s.system = {1};
  s.user = {4, 5};
  const auto batch = m.assemble(s);
  EXPECT_THROW(input_lens(m, batch, 1), ContractError);
  EXPECT_THROW(output_lens(m, batch, 1), ContractError);
}

TEST(Lens, JsonAndPpm) {
  const Tensor embed({2, 2}, {1, 0, 0, 1});
  const auto r = input_lens(Tensor({4, 2}, {1, 0, 0, 1, 1, 1, -1, 0}), embed, 2, 2);
  const auto j = r.to_json();
  EXPECT_EQ(j["kind"], "input");
  EXPECT_EQ(j["tokens"].size(), 4u);
  EXPECT_EQ(j["tokens"][1]["top"][0]["id"], 1);
  const auto ppm = r.to_ppm(2);
  const std::string header = "P6\n4 4\n255\n";
  ASSERT_EQ(ppm.size(), header.size() + 4 * 4 * 3);
  EXPECT_EQ(ppm.substr(0, header.size()), header);
  EXPECT_EQ(static_cast<unsigned char>(ppm[header.size()]), 255);
  // token 3 is (-1, 0): best cosine 0 maps to mid gray
  EXPECT_EQ(static_cast<unsigned char>(ppm.back()), 128);
  EXPECT_THROW(r.to_ppm(0), ContractError);
}
