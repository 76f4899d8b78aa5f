#include "modellab/probes.hpp"

#include <algorithm>
#include <cmath>

#include "modellab/errors.hpp"

namespace mlab {

namespace {

LensEntry entry_at(Index t, Index grid) {
  LensEntry e;
  e.token = t;
  e.row = t / grid;
  e.col = t % grid;
  return e;
}

void require_visual(const AssembledBatch& batch) {
  if (batch.layout.visual < 1 || !batch.visual_tokens.defined()) {
    throw ContractError("lens needs a batch with at least one visual token");
  }
}

}  // namespace

std::vector<std::vector<float>> cosine_table(const Tensor& visual, const Tensor& embed) {
  if (visual.rank() != 2 || embed.rank() != 2 || visual.dim(1) != embed.dim(1)) {
    throw ShapeError("cosine table of " + to_string(visual.shape()) + " against " + to_string(embed.shape()));
  }
  const Index n = visual.dim(0), v = embed.dim(0), d = visual.dim(1);
  const auto xv = visual.values(), ev = embed.values();
  std::vector<double> enorm(static_cast<std::size_t>(v));
  for (Index w = 0; w < v; ++w) {
    double s = 0.0;
    for (Index c = 0; c < d; ++c) s += double(ev[w * d + c]) * ev[w * d + c];
    enorm[w] = std::sqrt(s);
  }
  std::vector<std::vector<float>> out(static_cast<std::size_t>(n), std::vector<float>(static_cast<std::size_t>(v)));
  for (Index i = 0; i < n; ++i) {
    double xn = 0.0;
    for (Index c = 0; c < d; ++c) xn += double(xv[i * d + c]) * xv[i * d + c];
    xn = std::sqrt(xn);
    for (Index w = 0; w < v; ++w) {
      if (xn == 0.0 || enorm[w] == 0.0) {
        out[i][w] = 0.0f;
        continue;
      }
      double dot = 0.0;
      for (Index c = 0; c < d; ++c) dot += double(xv[i * d + c]) * ev[w * d + c];
      out[i][w] = static_cast<float>(std::clamp(dot / (xn * enorm[w]), -1.0, 1.0));
    }
  }
  return out;
}

LensReport input_lens(const Tensor& visual, const Tensor& embed, Index grid, Index k) {
  if (k < 1 || k > embed.dim(0)) {
    throw ContractError("k = " + std::to_string(k) + " outside [1, " + std::to_string(embed.dim(0)) + "]");
  }
  LensReport r;
  r.kind = LensReport::Kind::Input;
  r.grid = grid;
  const auto table = cosine_table(visual, embed);
  for (std::size_t i = 0; i < table.size(); ++i) {
    auto e = entry_at(static_cast<Index>(i), grid);
    e.top = top_k(table[i], k);
    r.entries.push_back(std::move(e));
  }
  return r;
}

LensReport input_lens(const MllmModel& model, const AssembledBatch& batch, Index k) {
  require_visual(batch);
  return input_lens(batch.visual_tokens, model.embed, model.config().vision.grid_side(), k);
}

LensReport output_lens(const MllmModel& model, const AssembledBatch& batch, Index k) {
  require_visual(batch);
  if (k < 1 || k > model.config().vocab_size) {
    throw ContractError("k = " + std::to_string(k) + " outside [1, " + std::to_string(model.config().vocab_size) + "]");
  }
  LensReport r;
  r.kind = LensReport::Kind::Output;
  r.grid = model.config().vision.grid_side();
  auto tops = model.logit_lens_output(batch, k);
  for (std::size_t i = 0; i < tops.size(); ++i) {
    auto e = entry_at(static_cast<Index>(i), r.grid);
    e.top = std::move(tops[i]);
    r.entries.push_back(std::move(e));
  }
  return r;
}

nlohmann::ordered_json LensReport::to_json() const {
  nlohmann::ordered_json j;
  j["kind"] = kind == Kind::Input ? "input" : "output";
  j["score"] = kind == Kind::Input ? "cosine" : "probability";
  j["grid"] = grid;
  j["tokens"] = nlohmann::ordered_json::array();
  for (const auto& e : entries) {
    nlohmann::ordered_json t;
    t["token"] = e.token;
    t["row"] = e.row;
    t["col"] = e.col;
    t["top"] = nlohmann::ordered_json::array();
    for (const auto& [id, s] : e.top) t["top"].push_back({{"id", id}, {"score", s}});
    j["tokens"].push_back(t);
  }
  return j;
}

std::string LensReport::to_ppm(Index cell) const {
  if (cell < 1) throw ContractError("PPM cell size must be positive");
  const Index side = grid * cell;
  std::string out = "P6\n" + std::to_string(side) + " " + std::to_string(side) + "\n255\n";
  std::vector<unsigned char> level(static_cast<std::size_t>(grid * grid), 0);
  for (const auto& e : entries) {
    if (e.top.empty() || e.token >= grid * grid) continue;
    double s = e.top.front().second;
    if (kind == Kind::Input) s = (s + 1.0) / 2.0;
    level[static_cast<std::size_t>(e.token)] = static_cast<unsigned char>(std::lround(std::clamp(s, 0.0, 1.0) * 255.0));
  }
  for (Index y = 0; y < side; ++y) {
    for (Index x = 0; x < side; ++x) {
      const unsigned char g = level[static_cast<std::size_t>((y / cell) * grid + x / cell)];
      out.append(3, static_cast<char>(g));
    }
  }
  return out;
}

}  // namespace mlab
