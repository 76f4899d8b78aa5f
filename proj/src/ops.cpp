#include "modellab/ops.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <limits>

#include "modellab/errors.hpp"

namespace mlab {

namespace {

using RowMat = Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ConstMap = Eigen::Map<const RowMat>;
using MutMap = Eigen::Map<RowMat>;

Shape batch_of(const Shape& s) { return Shape(s.begin(), s.end() - 2); }

bool is_suffix(const Shape& big, const Shape& small) {
  if (small.size() > big.size()) return false;
  return std::equal(small.rbegin(), small.rend(), big.rbegin());
}

std::size_t usize(Index i) { return static_cast<std::size_t>(i); }

// Shared broadcasting logic for add/mul: returns the repeat count of `b`.
Index broadcast_repeats(const char* op, const Tensor& a, const Tensor& b) {
  if (a.shape() == b.shape()) return 1;
  if (is_suffix(a.shape(), b.shape())) return a.numel() / b.numel();
  throw ShapeError(std::string(op) + ": cannot broadcast " + to_string(b.shape()) + " onto " +
                   to_string(a.shape()));
}

}  // namespace

Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.rank() < 2 || b.rank() < 2) {
    throw ShapeError("matmul needs rank >= 2 operands, got " + to_string(a.shape()) + " and " +
                     to_string(b.shape()));
  }
  const Index p = a.dim(-2), q = a.dim(-1), q2 = b.dim(-2), r = b.dim(-1);
  if (q != q2) {
    throw ShapeError("matmul inner extents differ: " + to_string(a.shape()) + " · " + to_string(b.shape()));
  }
  const Shape ba = batch_of(a.shape()), bb = batch_of(b.shape());
  Shape out_batch;
  enum class Mode { Same, BroadcastB, BroadcastA } mode;
  if (bb.empty()) {
    mode = Mode::BroadcastB;
    out_batch = ba;
  } else if (ba.empty()) {
    mode = Mode::BroadcastA;
    out_batch = bb;
  } else if (ba == bb) {
    mode = Mode::Same;
    out_batch = ba;
  } else {
    throw ShapeError("matmul batch extents not broadcastable: " + to_string(a.shape()) + " · " +
                     to_string(b.shape()));
  }
  const Index batch = numel(out_batch);
  Shape out_shape = out_batch;
  out_shape.push_back(p);
  out_shape.push_back(r);

  std::vector<float> out(usize(batch * p * r));
  const float* av = a.values().data();
  const float* bv = b.values().data();
  if (mode == Mode::BroadcastB) {
    MutMap(out.data(), batch * p, r).noalias() = ConstMap(av, batch * p, q) * ConstMap(bv, q, r);
  } else {
    for (Index t = 0; t < batch; ++t) {
      const float* at = mode == Mode::BroadcastA ? av : av + t * p * q;
      MutMap(out.data() + t * p * r, p, r).noalias() = ConstMap(at, p, q) * ConstMap(bv + t * q * r, q, r);
    }
  }
  op_counters().macs += static_cast<std::uint64_t>(batch * p * q * r);

  return make_result("matmul", std::move(out_shape), std::move(out), {a, b},
                     [a, b, mode, batch, p, q, r](std::span<const float>, std::span<const float> g) {
                       const float* av = a.values().data();
                       const float* bv = b.values().data();
                       if (auto ga = grad_sink(a); !ga.empty()) {
                         if (mode == Mode::BroadcastB) {
                           MutMap(ga.data(), batch * p, q).noalias() +=
                               ConstMap(g.data(), batch * p, r) * ConstMap(bv, q, r).transpose();
                         } else {
                           for (Index t = 0; t < batch; ++t) {
                             float* gat = mode == Mode::BroadcastA ? ga.data() : ga.data() + t * p * q;
                             MutMap(gat, p, q).noalias() += ConstMap(g.data() + t * p * r, p, r) *
                                                            ConstMap(bv + t * q * r, q, r).transpose();
                           }
                         }
                       }
                       if (auto gb = grad_sink(b); !gb.empty()) {
                         if (mode == Mode::BroadcastB) {
                           MutMap(gb.data(), q, r).noalias() +=
                               ConstMap(av, batch * p, q).transpose() * ConstMap(g.data(), batch * p, r);
                         } else {
                           for (Index t = 0; t < batch; ++t) {
                             const float* at = mode == Mode::BroadcastA ? av : av + t * p * q;
                             MutMap(gb.data() + t * q * r, q, r).noalias() +=
                                 ConstMap(at, p, q).transpose() * ConstMap(g.data() + t * p * r, p, r);
                           }
                         }
                       }
                     });
}

Tensor add(const Tensor& a, const Tensor& b) {
  const Index reps = broadcast_repeats("add", a, b);
  const Index nb = b.numel();
  std::vector<float> out(a.values().begin(), a.values().end());
  const auto bv = b.values();
  for (Index t = 0; t < reps; ++t) {
    for (Index i = 0; i < nb; ++i) out[usize(t * nb + i)] += bv[usize(i)];
  }
  return make_result("add", a.shape(), std::move(out), {a, b},
                     [a, b, reps, nb](std::span<const float>, std::span<const float> g) {
                       if (auto ga = grad_sink(a); !ga.empty()) {
                         for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
                       }
                       if (auto gb = grad_sink(b); !gb.empty()) {
                         for (Index t = 0; t < reps; ++t) {
                           for (Index i = 0; i < nb; ++i) gb[usize(i)] += g[usize(t * nb + i)];
                         }
                       }
                     });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  const Index reps = broadcast_repeats("mul", a, b);
  const Index nb = b.numel();
  std::vector<float> out(a.values().begin(), a.values().end());
  const auto bv = b.values();
  for (Index t = 0; t < reps; ++t) {
    for (Index i = 0; i < nb; ++i) out[usize(t * nb + i)] *= bv[usize(i)];
  }
  return make_result("mul", a.shape(), std::move(out), {a, b},
                     [a, b, reps, nb](std::span<const float>, std::span<const float> g) {
                       const auto av = a.values();
                       const auto bv = b.values();
                       if (auto ga = grad_sink(a); !ga.empty()) {
                         for (Index t = 0; t < reps; ++t) {
                           for (Index i = 0; i < nb; ++i) ga[usize(t * nb + i)] += g[usize(t * nb + i)] * bv[usize(i)];
                         }
                       }
                       if (auto gb = grad_sink(b); !gb.empty()) {
                         for (Index t = 0; t < reps; ++t) {
                           for (Index i = 0; i < nb; ++i) gb[usize(i)] += g[usize(t * nb + i)] * av[usize(t * nb + i)];
                         }
                       }
                     });
}

Tensor scale(const Tensor& a, float factor) {
  std::vector<float> out(a.values().begin(), a.values().end());
  for (auto& v : out) v *= factor;
  return make_result("scale", a.shape(), std::move(out), {a},
                     [a, factor](std::span<const float>, std::span<const float> g) {
                       if (auto ga = grad_sink(a); !ga.empty()) {
                         for (std::size_t i = 0; i < g.size(); ++i) ga[i] += factor * g[i];
                       }
                     });
}

Tensor silu(const Tensor& a) {
  const auto av = a.values();
  std::vector<float> out(av.size());
  for (std::size_t i = 0; i < av.size(); ++i) out[i] = av[i] / (1.0f + std::exp(-av[i]));
  return make_result("silu", a.shape(), std::move(out), {a},
                     [a](std::span<const float>, std::span<const float> g) {
                       auto ga = grad_sink(a);
                       if (ga.empty()) return;
                       const auto av = a.values();
                       for (std::size_t i = 0; i < g.size(); ++i) {
                         const float s = 1.0f / (1.0f + std::exp(-av[i]));
                         ga[i] += g[i] * s * (1.0f + av[i] * (1.0f - s));
                       }
                     });
}

Tensor sum(const Tensor& a) {
  double total = 0.0;
  for (float v : a.values()) total += v;
  return make_result("sum", {1}, {static_cast<float>(total)}, {a},
                     [a](std::span<const float>, std::span<const float> g) {
                       if (auto ga = grad_sink(a); !ga.empty()) {
                         for (auto& v : ga) v += g[0];
                       }
                     });
}

Tensor transpose(const Tensor& a) {
  if (a.rank() < 2) throw ShapeError("transpose needs rank >= 2, got " + to_string(a.shape()));
  const Index rows = a.dim(-2), cols = a.dim(-1);
  const Index batch = a.numel() / (rows * cols);
  Shape shape = a.shape();
  std::swap(shape[shape.size() - 1], shape[shape.size() - 2]);
  std::vector<float> out(a.values().size());
  for (Index t = 0; t < batch; ++t) {
    MutMap(out.data() + t * rows * cols, cols, rows) = ConstMap(a.values().data() + t * rows * cols, rows, cols).transpose();
  }
  return make_result("transpose", std::move(shape), std::move(out), {a},
                     [a, batch, rows, cols](std::span<const float>, std::span<const float> g) {
                       auto ga = grad_sink(a);
                       if (ga.empty()) return;
                       for (Index t = 0; t < batch; ++t) {
                         MutMap(ga.data() + t * rows * cols, rows, cols) +=
                             ConstMap(g.data() + t * rows * cols, cols, rows).transpose();
                       }
                     });
}

Tensor reshape(const Tensor& a, Shape shape) {
  if (numel(shape) != a.numel()) {
    throw ShapeError("reshape " + to_string(a.shape()) + " -> " + to_string(shape) + " changes element count");
  }
  return make_result("reshape", std::move(shape), std::vector<float>(a.values().begin(), a.values().end()), {a},
                     [a](std::span<const float>, std::span<const float> g) {
                       if (auto ga = grad_sink(a); !ga.empty()) {
                         for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
                       }
                     });
}

Tensor concat_last_dim(std::span<const Tensor> parts) {
  if (parts.empty()) throw ContractError("concat_last_dim of nothing");
  Shape lead(parts[0].shape().begin(), parts[0].shape().end() - 1);
  std::vector<Index> widths;
  Index total = 0;
  for (const auto& t : parts) {
    Shape l(t.shape().begin(), t.shape().end() - 1);
    if (l != lead) {
      throw ShapeError("concat_last_dim leading extents differ: " + to_string(parts[0].shape()) + " vs " +
                       to_string(t.shape()));
    }
    widths.push_back(t.dim(-1));
    total += t.dim(-1);
  }
  const Index rows = numel(lead);
  std::vector<float> out(usize(rows * total));
  Index offset = 0;
  for (std::size_t k = 0; k < parts.size(); ++k) {
    const auto v = parts[k].values();
    for (Index r = 0; r < rows; ++r) {
      std::copy_n(v.begin() + r * widths[k], widths[k], out.begin() + r * total + offset);
    }
    offset += widths[k];
  }
  Shape shape = lead;
  shape.push_back(total);
  std::vector<Tensor> inputs(parts.begin(), parts.end());
  return make_result("concat_last_dim", std::move(shape), std::move(out), inputs,
                     [inputs, widths, rows, total](std::span<const float>, std::span<const float> g) {
                       Index offset = 0;
                       for (std::size_t k = 0; k < inputs.size(); ++k) {
                         if (auto gk = grad_sink(inputs[k]); !gk.empty()) {
                           for (Index r = 0; r < rows; ++r) {
                             for (Index c = 0; c < widths[k]; ++c) {
                               gk[usize(r * widths[k] + c)] += g[usize(r * total + offset + c)];
                             }
                           }
                         }
                         offset += widths[k];
                       }
                     });
}

Tensor concat_rows(std::span<const Tensor> parts) {
  if (parts.empty()) throw ContractError("concat_rows of nothing");
  const Shape tail(parts[0].shape().begin() + 1, parts[0].shape().end());
  Index rows = 0;
  std::vector<float> out;
  for (const auto& t : parts) {
    if (Shape(t.shape().begin() + 1, t.shape().end()) != tail) {
      throw ShapeError("concat_rows trailing extents differ: " + to_string(parts[0].shape()) + " vs " +
                       to_string(t.shape()));
    }
    rows += t.dim(0);
    out.insert(out.end(), t.values().begin(), t.values().end());
  }
  Shape shape{rows};
  shape.insert(shape.end(), tail.begin(), tail.end());
  std::vector<Tensor> inputs(parts.begin(), parts.end());
  return make_result("concat_rows", std::move(shape), std::move(out), inputs,
                     [inputs](std::span<const float>, std::span<const float> g) {
                       std::size_t offset = 0;
                       for (const auto& t : inputs) {
                         const auto n = static_cast<std::size_t>(t.numel());
                         if (auto gt = grad_sink(t); !gt.empty()) {
                           for (std::size_t i = 0; i < n; ++i) gt[i] += g[offset + i];
                         }
                         offset += n;
                       }
                     });
}

Tensor slice_rows(const Tensor& a, Index begin, Index end) {
  if (a.rank() < 1 || begin < 0 || end > a.dim(0) || begin >= end) {
    throw ShapeError("slice_rows [" + std::to_string(begin) + ", " + std::to_string(end) + ") invalid for " +
                     to_string(a.shape()));
  }
  const Index row = a.numel() / a.dim(0);
  Shape shape = a.shape();
  shape[0] = end - begin;
  std::vector<float> out(a.values().begin() + begin * row, a.values().begin() + end * row);
  return make_result("slice_rows", std::move(shape), std::move(out), {a},
                     [a, begin, row](std::span<const float>, std::span<const float> g) {
                       if (auto ga = grad_sink(a); !ga.empty()) {
                         for (std::size_t i = 0; i < g.size(); ++i) ga[usize(begin * row) + i] += g[i];
                       }
                     });
}

Tensor embedding_lookup(const Tensor& table, std::span<const int> ids) {
  if (table.rank() != 2) throw ShapeError("embedding table must be [vocab, d], got " + to_string(table.shape()));
  if (ids.empty()) throw ContractError("embedding_lookup with no ids");
  const Index vocab = table.dim(0), d = table.dim(1);
  std::vector<float> out(ids.size() * usize(d));
  const auto tv = table.values();
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] < 0 || ids[i] >= vocab) {
      throw ContractError("token id " + std::to_string(ids[i]) + " outside vocabulary of " + std::to_string(vocab));
    }
    std::copy_n(tv.begin() + ids[i] * d, d, out.begin() + static_cast<std::ptrdiff_t>(i) * d);
  }
  std::vector<int> idv(ids.begin(), ids.end());
  return make_result("embedding_lookup", {static_cast<Index>(ids.size()), d}, std::move(out), {table},
                     [table, idv, d](std::span<const float>, std::span<const float> g) {
                       auto gt = grad_sink(table);
                       if (gt.empty()) return;
                       for (std::size_t i = 0; i < idv.size(); ++i) {
                         for (Index c = 0; c < d; ++c) gt[usize(idv[i] * d + c)] += g[i * usize(d) + usize(c)];
                       }
                     });
}

Tensor cross_entropy_with_ignore_index(const Tensor& logits, std::span<const int> targets, int ignore_index) {
  if (logits.rank() != 2) throw ShapeError("cross entropy expects [N, V] logits, got " + to_string(logits.shape()));
  const Index n = logits.dim(0), v = logits.dim(1);
  if (static_cast<Index>(targets.size()) != n) {
    throw ShapeError("cross entropy: " + std::to_string(targets.size()) + " targets for " + std::to_string(n) + " rows");
  }
  const auto lv = logits.values();
  std::vector<float> probs(lv.size(), 0.0f);
  double total = 0.0;
  Index count = 0;
  for (Index i = 0; i < n; ++i) {
    const int t = targets[usize(i)];
    if (t == ignore_index) continue;
    if (t < 0 || t >= v) throw ContractError("target id " + std::to_string(t) + " outside vocabulary");
    const float* row = lv.data() + i * v;
    const float mx = *std::max_element(row, row + v);
    double z = 0.0;
    for (Index j = 0; j < v; ++j) z += std::exp(static_cast<double>(row[j] - mx));
    for (Index j = 0; j < v; ++j) probs[usize(i * v + j)] = static_cast<float>(std::exp(row[j] - mx) / z);
    total += std::log(z) + mx - row[t];
    ++count;
  }
  if (count == 0) throw ContractError("cross entropy with an empty supervision set");
  std::vector<int> tv(targets.begin(), targets.end());
  return make_result("cross_entropy", {1}, {static_cast<float>(total / static_cast<double>(count))}, {logits},
                     [logits, probs = std::move(probs), tv, ignore_index, n, v, count](std::span<const float>,
                                                                                     std::span<const float> g) {
                       auto gl = grad_sink(logits);
                       if (gl.empty()) return;
                       const float s = g[0] / static_cast<float>(count);
                       for (Index i = 0; i < n; ++i) {
                         if (tv[usize(i)] == ignore_index) continue;
                         for (Index j = 0; j < v; ++j) gl[usize(i * v + j)] += s * probs[usize(i * v + j)];
                         gl[usize(i * v + tv[usize(i)])] -= s;
                       }
                     });
}

Tensor layer_norm_rms(const Tensor& x, const Tensor& gain, float eps) {
  if (!(eps > 0.0f)) throw ContractError("rms norm eps must be positive");
  const Index d = x.dim(-1);
  if (gain.rank() != 1 || gain.dim(0) != d) {
    throw ShapeError("rms norm gain " + to_string(gain.shape()) + " does not match input " + to_string(x.shape()));
  }
  const Index rows = x.numel() / d;
  const auto xv = x.values();
  const auto gv = gain.values();
  std::vector<float> inv(usize(rows));
  std::vector<float> out(xv.size());
  for (Index r = 0; r < rows; ++r) {
    double ss = 0.0;
    for (Index c = 0; c < d; ++c) ss += static_cast<double>(xv[usize(r * d + c)]) * xv[usize(r * d + c)];
    const float k = static_cast<float>(1.0 / std::sqrt(ss / static_cast<double>(d) + eps));
    inv[usize(r)] = k;
    for (Index c = 0; c < d; ++c) out[usize(r * d + c)] = xv[usize(r * d + c)] * k * gv[usize(c)];
  }
  return make_result("layer_norm_rms", x.shape(), std::move(out), {x, gain},
                     [x, gain, inv = std::move(inv), rows, d](std::span<const float>, std::span<const float> g) {
                       const auto xv = x.values();
                       const auto gv = gain.values();
                       auto gx = grad_sink(x);
                       auto gg = grad_sink(gain);
                       for (Index r = 0; r < rows; ++r) {
                         const float k = inv[usize(r)];
                         double dot = 0.0;
                         for (Index c = 0; c < d; ++c) {
                           const auto i = usize(r * d + c);
                           dot += static_cast<double>(g[i]) * gv[usize(c)] * xv[i];
                           if (!gg.empty()) gg[usize(c)] += g[i] * xv[i] * k;
                         }
                         if (gx.empty()) continue;
                         const float coef = static_cast<float>(dot) * k * k * k / static_cast<float>(d);
                         for (Index c = 0; c < d; ++c) {
                           const auto i = usize(r * d + c);
                           gx[i] += k * gv[usize(c)] * g[i] - coef * xv[i];
                         }
                       }
                     });
}

Tensor masked_softmax(const Tensor& scores, const AttentionMask& mask) {
  if (scores.rank() < 2 || scores.dim(-1) != scores.dim(-2)) {
    throw ShapeError("masked_softmax expects [..., N, N], got " + to_string(scores.shape()));
  }
  const Index n = scores.dim(-1);
  if (mask.size() != n) {
    throw ShapeError("mask of size " + std::to_string(mask.size()) + " applied to scores " + to_string(scores.shape()));
  }
  for (Index i = 0; i < n; ++i) {
    if (mask.row_support(i).empty()) {
      throw ContractError("attention row " + std::to_string(i) + " is fully masked");
    }
  }
  const Index planes = scores.numel() / (n * n);
  const auto sv = scores.values();
  std::vector<float> out(sv.size(), 0.0f);
  for (Index t = 0; t < planes; ++t) {
    for (Index i = 0; i < n; ++i) {
      const float* row = sv.data() + (t * n + i) * n;
      float* o = out.data() + (t * n + i) * n;
      const auto& support = mask.row_support(i);
      float mx = -std::numeric_limits<float>::infinity();
      for (Index j : support) mx = std::max(mx, row[j]);
      double z = 0.0;
      for (Index j : support) z += std::exp(static_cast<double>(row[j] - mx));
      for (Index j : support) o[j] = static_cast<float>(std::exp(static_cast<double>(row[j] - mx)) / z);
    }
  }
  return make_result("masked_softmax", scores.shape(), std::move(out), {scores},
                     [scores, planes, n](std::span<const float> p, std::span<const float> g) {
                       // Masked entries carry p == 0 and therefore receive no gradient.
                       auto gs = grad_sink(scores);
                       if (gs.empty()) return;
                       for (Index t = 0; t < planes; ++t) {
                         for (Index i = 0; i < n; ++i) {
                           const std::size_t base = usize((t * n + i) * n);
                           double dot = 0.0;
                           for (Index j = 0; j < n; ++j) dot += static_cast<double>(p[base + usize(j)]) * g[base + usize(j)];
                           for (Index j = 0; j < n; ++j) {
                             const float pj = p[base + usize(j)];
                             if (pj != 0.0f) gs[base + usize(j)] += pj * (g[base + usize(j)] - static_cast<float>(dot));
                           }
                         }
                       }
                     });
}

Tensor split_heads(const Tensor& x, Index heads) {
  if (x.rank() != 2 || heads < 1 || x.dim(1) % heads != 0) {
    throw ShapeError("split_heads: " + to_string(x.shape()) + " not divisible into " + std::to_string(heads) + " heads");
  }
  const Index n = x.dim(0), hd = x.dim(1) / heads;
  const auto xv = x.values();
  std::vector<float> out(xv.size());
  for (Index h = 0; h < heads; ++h)
    for (Index i = 0; i < n; ++i)
      std::copy_n(xv.begin() + i * heads * hd + h * hd, hd, out.begin() + (h * n + i) * hd);
  return make_result("split_heads", {heads, n, hd}, std::move(out), {x},
                     [x, heads, n, hd](std::span<const float>, std::span<const float> g) {
                       auto gx = grad_sink(x);
                       if (gx.empty()) return;
                       for (Index h = 0; h < heads; ++h)
                         for (Index i = 0; i < n; ++i)
                           for (Index c = 0; c < hd; ++c) gx[usize(i * heads * hd + h * hd + c)] += g[usize((h * n + i) * hd + c)];
                     });
}

Tensor merge_heads(const Tensor& x) {
  if (x.rank() != 3) throw ShapeError("merge_heads expects [H, N, hd], got " + to_string(x.shape()));
  const Index heads = x.dim(0), n = x.dim(1), hd = x.dim(2);
  const auto xv = x.values();
  std::vector<float> out(xv.size());
  for (Index h = 0; h < heads; ++h)
    for (Index i = 0; i < n; ++i)
      std::copy_n(xv.begin() + (h * n + i) * hd, hd, out.begin() + i * heads * hd + h * hd);
  return make_result("merge_heads", {n, heads * hd}, std::move(out), {x},
                     [x, heads, n, hd](std::span<const float>, std::span<const float> g) {
                       auto gx = grad_sink(x);
                       if (gx.empty()) return;
                       for (Index h = 0; h < heads; ++h)
                         for (Index i = 0; i < n; ++i)
                           for (Index c = 0; c < hd; ++c) gx[usize((h * n + i) * hd + c)] += g[usize(i * heads * hd + h * hd + c)];
                     });
}

Tensor masked_scores(const Tensor& q, const Tensor& k, const AttentionMask& mask, float factor) {
  if (q.rank() != 3 || q.shape() != k.shape()) {
    throw ShapeError("masked_scores expects matching [H, N, hd], got " + to_string(q.shape()) + " and " +
                     to_string(k.shape()));
  }
  const Index heads = q.dim(0), n = q.dim(1), hd = q.dim(2);
  if (mask.size() != n) throw ShapeError("mask size does not match sequence length " + std::to_string(n));
  std::vector<std::vector<Index>> support(usize(n));
  Index allowed = 0;
  for (Index i = 0; i < n; ++i) {
    support[usize(i)] = mask.row_support(i);
    allowed += static_cast<Index>(support[usize(i)].size());
  }
  const float* qv = q.values().data();
  const float* kv = k.values().data();
  std::vector<float> out(usize(heads * n * n), 0.0f);
  for (Index h = 0; h < heads; ++h) {
    for (Index i = 0; i < n; ++i) {
      const float* qi = qv + (h * n + i) * hd;
      float* o = out.data() + (h * n + i) * n;
      for (Index j : support[usize(i)]) {
        const float* kj = kv + (h * n + j) * hd;
        float acc = 0.0f;
        for (Index c = 0; c < hd; ++c) acc += qi[c] * kj[c];
        o[j] = factor * acc;
      }
    }
  }
  op_counters().macs += static_cast<std::uint64_t>(heads * allowed * hd);
  return make_result("masked_scores", {heads, n, n}, std::move(out), {q, k},
                     [q, k, support = std::move(support), heads, n, hd, factor](std::span<const float>,
                                                                               std::span<const float> g) {
                       const float* qv = q.values().data();
                       const float* kv = k.values().data();
                       auto gq = grad_sink(q);
                       auto gk = grad_sink(k);
                       for (Index h = 0; h < heads; ++h) {
                         for (Index i = 0; i < n; ++i) {
                           for (Index j : support[usize(i)]) {
                             const float gij = factor * g[usize((h * n + i) * n + j)];
                             if (gij == 0.0f) continue;
                             for (Index c = 0; c < hd; ++c) {
                               if (!gq.empty()) gq[usize((h * n + i) * hd + c)] += gij * kv[(h * n + j) * hd + c];
                               if (!gk.empty()) gk[usize((h * n + j) * hd + c)] += gij * qv[(h * n + i) * hd + c];
                             }
                           }
                         }
                       }
                     });
}

Tensor masked_weighted_sum(const Tensor& p, const Tensor& v, const AttentionMask& mask) {
  if (p.rank() != 3 || v.rank() != 3 || p.dim(0) != v.dim(0) || p.dim(1) != p.dim(2) || p.dim(2) != v.dim(1)) {
    throw ShapeError("masked_weighted_sum expects [H, N, N] and [H, N, hd], got " + to_string(p.shape()) + " and " +
                     to_string(v.shape()));
  }
  const Index heads = v.dim(0), n = v.dim(1), hd = v.dim(2);
  if (mask.size() != n) throw ShapeError("mask size does not match sequence length " + std::to_string(n));
  std::vector<std::vector<Index>> support(usize(n));
  Index allowed = 0;
  for (Index i = 0; i < n; ++i) {
    support[usize(i)] = mask.row_support(i);
    allowed += static_cast<Index>(support[usize(i)].size());
  }
  const float* pv = p.values().data();
  const float* vv = v.values().data();
  std::vector<float> out(usize(heads * n * hd), 0.0f);
  for (Index h = 0; h < heads; ++h) {
    for (Index i = 0; i < n; ++i) {
      float* o = out.data() + (h * n + i) * hd;
      for (Index j : support[usize(i)]) {
        const float w = pv[(h * n + i) * n + j];
        const float* vj = vv + (h * n + j) * hd;
        for (Index c = 0; c < hd; ++c) o[c] += w * vj[c];
      }
    }
  }
  op_counters().macs += static_cast<std::uint64_t>(heads * allowed * hd);
  return make_result("masked_weighted_sum", {heads, n, hd}, std::move(out), {p, v},
                     [p, v, support = std::move(support), heads, n, hd](std::span<const float>, std::span<const float> g) {
                       const float* pv = p.values().data();
                       const float* vv = v.values().data();
                       auto gp = grad_sink(p);
                       auto gv = grad_sink(v);
                       for (Index h = 0; h < heads; ++h) {
                         for (Index i = 0; i < n; ++i) {
                           const float* gi = g.data() + (h * n + i) * hd;
                           for (Index j : support[usize(i)]) {
                             if (!gp.empty()) {
                               float acc = 0.0f;
                               for (Index c = 0; c < hd; ++c) acc += gi[c] * vv[(h * n + j) * hd + c];
                               gp[usize((h * n + i) * n + j)] += acc;
                             }
                             if (!gv.empty()) {
                               const float w = pv[(h * n + i) * n + j];
                               for (Index c = 0; c < hd; ++c) gv[usize((h * n + j) * hd + c)] += w * gi[c];
                             }
                           }
                         }
                       }
                     });
}

Tensor mask_rows(const Tensor& x, const std::vector<bool>& keep) {
  if (x.rank() < 1 || static_cast<Index>(keep.size()) != x.dim(0)) {
    throw ShapeError("mask_rows: " + std::to_string(keep.size()) + " flags for " + to_string(x.shape()));
  }
  const Index row = x.numel() / x.dim(0);
  std::vector<float> out(x.values().begin(), x.values().end());
  for (std::size_t r = 0; r < keep.size(); ++r) {
    if (!keep[r]) std::fill_n(out.begin() + static_cast<std::ptrdiff_t>(r) * row, row, 0.0f);
  }
  return make_result("mask_rows", x.shape(), std::move(out), {x},
                     [x, keep, row](std::span<const float>, std::span<const float> g) {
                       auto gx = grad_sink(x);
                       if (gx.empty()) return;
                       for (std::size_t r = 0; r < keep.size(); ++r) {
                         if (!keep[r]) continue;
                         for (Index c = 0; c < row; ++c) gx[r * usize(row) + usize(c)] += g[r * usize(row) + usize(c)];
                       }
                     });
}

}  // namespace mlab
