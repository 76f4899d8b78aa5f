#include "modellab/synth.hpp"

#include <algorithm>
#include <array>
#include <random>
#include <unordered_set>

#include "json.hpp"
#include "modellab/errors.hpp"

namespace mlab {

namespace {

bool shape_pixel(int shape, Index y, Index x, Index size) {
  const bool edge = y == 0 || x == 0 || y == size - 1 || x == size - 1;
  const Index lo = (size - 1) / 2, hi = size / 2;
  switch (static_cast<Shape2D>(shape)) {
    case Shape2D::Square:
      return !edge;
    case Shape2D::Frame:
      return edge;
    case Shape2D::Cross:
      return y == lo || y == hi || x == lo || x == hi;
    case Shape2D::Diagonal:
      return x == y || x + y == size - 1;
  }
  return false;
}

void draw(std::vector<float>& px, const SynthSpec& spec, Index pr, Index pc, int shape, int channel) {
  const Index p = spec.patch_size, s = spec.image_size, c = spec.channels;
  for (Index y = 0; y < p; ++y) {
    for (Index x = 0; x < p; ++x) {
      if (shape_pixel(shape, y, x, p)) px[static_cast<std::size_t>(((pr * p + y) * s + pc * p + x) * c + channel)] = 1.0f;
    }
  }
}

double count_distinct(const SynthSpec& spec) {
  const double per_cell = static_cast<double>(spec.shapes * spec.palette);
  double grids = 1.0;
  for (Index i = 0; i < spec.grid * spec.grid; ++i) grids *= per_cell;
  return grids;
}

void fill_text(SynthSample& s, int pick) {
  const auto g = static_cast<int>(s.grid);
  s.caption.clear();
  for (int r = 0; r < g; ++r) {
    for (int c = 0; c < g; ++c) {
      const auto& gc = s.cells[static_cast<std::size_t>(r * g + c)];
      s.caption.insert(s.caption.end(), {synth_token::kColorBase + gc.color, synth_token::kShapeBase + gc.shape,
                                         synth_token::kRowBase + r, synth_token::kColBase + c});
    }
  }
  s.caption.push_back(token::kEos);
  s.question = {synth_token::kAskColor, synth_token::kCellBase + pick, synth_token::kQuestionMark};
  s.answer = {synth_token::kColorBase + s.cells[static_cast<std::size_t>(pick)].color, token::kEos};
}

}  // namespace

void SynthSpec::validate() const {
  if (patch_size < 3 || image_size % patch_size != 0) {
    throw ContractError("image size " + std::to_string(image_size) + " must be a multiple of a patch size >= 3");
  }
  if (grid < 1 || grid > 8) throw ContractError("grid side must be in [1, 8]");
  if (shapes < 1 || shapes > kShapeCount) throw ContractError("shape count must be in [1, 4]");
  if (palette < 1 || palette > 16) throw ContractError("palette size must be in [1, 16]");
  if (palette > channels) {
    throw ContractError("palette of " + std::to_string(palette) + " colors exceeds " + std::to_string(channels) +
                        " image channels");
  }
  const Index side = patch_side();
  if (grid > side) {
    throw ContractError("a " + std::to_string(grid) + "x" + std::to_string(grid) + " grid does not fit in " +
                        std::to_string(side) + "x" + std::to_string(side) + " patches");
  }
  if (train_count < 0 || eval_count < 0) throw ContractError("sample counts must be non-negative");
  if (static_cast<double>(train_count + eval_count) > count_distinct(*this)) {
    throw ContractError("requested " + std::to_string(train_count + eval_count) + " distinct images but only " +
                        std::to_string(static_cast<long long>(count_distinct(*this))) + " exist");
  }
}

std::uint64_t hash_image(const std::vector<GridCell>& cells) {
  std::uint64_t h = 1469598103934665603ull;
  const auto mix = [&](int v) {
    h ^= static_cast<std::uint64_t>(v) + 1;
    h *= 1099511628211ull;
  };
  for (const auto& c : cells) {
    mix(c.shape);
    mix(c.color);
  }
  return h;
}

Tensor render_image(const SynthSpec& spec, const std::vector<GridCell>& cells) {
  const Index s = spec.image_size;
  std::vector<float> px(static_cast<std::size_t>(s * s * spec.channels), 0.0f);
  for (Index r = 0; r < spec.grid; ++r) {
    for (Index c = 0; c < spec.grid; ++c) {
      const auto& cell = cells[static_cast<std::size_t>(r * spec.grid + c)];
      draw(px, spec, r, c, cell.shape, cell.color);
    }
  }
  return Tensor({s, s, spec.channels}, std::move(px));
}

SynthDataset gen_dataset(std::uint64_t seed, const SynthSpec& spec) {
  spec.validate();
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<int> shape(0, static_cast<int>(spec.shapes) - 1);
  std::uniform_int_distribution<int> color(0, static_cast<int>(spec.palette) - 1);
  std::uniform_int_distribution<int> cell_pick(0, static_cast<int>(spec.grid * spec.grid) - 1);
  const Index total = spec.train_count + spec.eval_count;

  SynthDataset ds;
  std::unordered_set<std::uint64_t> seen;
  while (static_cast<Index>(seen.size()) < total) {
    SynthSample s;
    s.grid = spec.grid;
    s.cells.resize(static_cast<std::size_t>(spec.grid * spec.grid));
    for (auto& c : s.cells) {
      c.shape = shape(rng);
      c.color = color(rng);
    }
    const int pick = cell_pick(rng);
    s.image_hash = hash_image(s.cells);
    if (!seen.insert(s.image_hash).second) continue;

    s.image = render_image(spec, s.cells);
    fill_text(s, pick);
    (static_cast<Index>(ds.train.size()) < spec.train_count ? ds.train : ds.eval).push_back(std::move(s));
  }
  return ds;
}

Sample caption_sample(const SynthSample& s) {
  Sample out;
  out.system = {token::kBos, synth_token::kSystem};
  out.user = {synth_token::kDescribe};
  out.answer = s.caption;
  out.image = s.image;
  return out;
}

Sample qa_sample(const SynthSample& s) {
  Sample out;
  out.system = {token::kBos, synth_token::kSystem};
  out.user = s.question;
  out.answer = s.answer;
  out.image = s.image;
  return out;
}

std::string dataset_to_jsonl(const SynthDataset& ds) {
  std::string out;
  for (const auto* split : {&ds.train, &ds.eval}) {
    for (const auto& s : *split) {
      nlohmann::ordered_json j;
      j["split"] = split == &ds.train ? "train" : "eval";
      j["grid"] = s.grid;
      std::vector<std::array<int, 2>> cells;
      for (const auto& c : s.cells) cells.push_back({c.color, c.shape});
      j["cells"] = cells;
      j["question"] = s.question;
      j["answer"] = s.answer;
      j["caption"] = s.caption;
      j["image_hash"] = s.image_hash;
      out += j.dump() + "\n";
    }
  }
  return out;
}

SynthDataset dataset_from_jsonl(std::string_view text, const SynthSpec& spec) {
  SynthDataset ds;
  int line_no = 0;
  while (!text.empty()) {
    ++line_no;
    const auto nl = text.find('\n');
    const auto line = text.substr(0, nl);
    text = nl == std::string_view::npos ? std::string_view{} : text.substr(nl + 1);
    if (line.empty()) continue;
    try {
      const auto j = nlohmann::json::parse(line);
      if (j.contains("provenance")) continue;
      SynthSample s;
      s.grid = j.at("grid").get<Index>();
      if (s.grid != spec.grid) throw FormatError("sample grid does not match the data spec");
      for (const auto& [color, shape] : j.at("cells").get<std::vector<std::array<int, 2>>>()) {
        if (shape < 0 || shape >= spec.shapes || color < 0 || color >= spec.palette) {
          throw FormatError("cell out of range");
        }
        s.cells.push_back({color, shape});
      }
      if (static_cast<Index>(s.cells.size()) != spec.grid * spec.grid) throw FormatError("wrong cell count");
      s.question = j.at("question").get<std::vector<int>>();
      s.answer = j.at("answer").get<std::vector<int>>();
      s.caption = j.at("caption").get<std::vector<int>>();
      s.image_hash = hash_image(s.cells);
      s.image = render_image(spec, s.cells);
      const auto split = j.at("split").get<std::string>();
      if (split == "train") {
        ds.train.push_back(std::move(s));
      } else if (split == "eval") {
        ds.eval.push_back(std::move(s));
      } else {
        throw FormatError("unknown split '" + split + "'");
      }
    } catch (const nlohmann::json::exception& e) {
      throw FormatError("dataset line " + std::to_string(line_no) + ": " + e.what());
    } catch (const FormatError& e) {
      throw FormatError("dataset line " + std::to_string(line_no) + ": " + e.what());
    }
  }
  return ds;
}

}  // namespace mlab
