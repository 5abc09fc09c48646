// Copyright 2026 The epilab Authors.
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#include "epi/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <sstream>
#include <unordered_set>

#include <Eigen/Core>

#include "epi/errors.hpp"

namespace epi {

namespace {

thread_local bool g_grad_enabled = true;

using detail::Node;
using NodePtr = std::shared_ptr<Node>;

using RowMajor = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatMap = Eigen::Map<RowMajor>;
using ConstMatMap = Eigen::Map<const RowMajor>;

NodePtr make_leaf(Shape shape, std::vector<double> data, bool requires_grad) {
  auto node = std::make_shared<Node>();
  node->shape = std::move(shape);
  node->data = std::move(data);
  node->requires_grad = requires_grad;
  node->is_leaf = true;
  return node;
}

// Wraps a forward result. History is recorded only in grad mode and only
// when at least one input participates in the reverse pass.
Tensor make_result(Shape shape, std::vector<double> data, std::vector<NodePtr> parents,
                   std::function<void(Node&)> backward_fn) {
  auto node = std::make_shared<Node>();
  node->shape = std::move(shape);
  node->data = std::move(data);
  const bool track = g_grad_enabled && std::any_of(parents.begin(), parents.end(),
                                                   [](const NodePtr& p) { return p->requires_grad; });
  if (track) {
    node->requires_grad = true;
    node->is_leaf = false;
    node->parents = std::move(parents);
    node->backward = std::move(backward_fn);
  }
  return Tensor(std::move(node));
}

void check_finite_shape(const Shape& shape) {
  for (std::size_t d : shape) {
    if (d == 0) throw DimensionError("tensor dimensions must be positive, got " + shape_str(shape));
  }
}

// Smaller operand must match the trailing dimensions of the larger one.
Shape broadcast_shape(const Shape& a, const Shape& b, const char* op) {
  const Shape& big = a.size() >= b.size() ? a : b;
  const Shape& small = a.size() >= b.size() ? b : a;
  const std::size_t offset = big.size() - small.size();
  for (std::size_t i = 0; i < small.size(); ++i) {
    if (big[offset + i] != small[i]) {
      throw DimensionError(std::string(op) + ": shapes " + shape_str(a) + " and " + shape_str(b) +
                           " are not broadcast-compatible");
    }
  }
  return big;
}

// Calls f(i, ia, ib) for every output index; the smaller operand is tiled.
template <typename F>
void broadcast_loop(std::size_t n, std::size_t na, std::size_t nb, F&& f) {
  if (na == n && nb == n) {
    for (std::size_t i = 0; i < n; ++i) f(i, i, i);
  } else if (na == n) {
    for (std::size_t r = 0; r < n; r += nb)
      for (std::size_t j = 0; j < nb; ++j) f(r + j, r + j, j);
  } else {
    for (std::size_t r = 0; r < n; r += na)
      for (std::size_t j = 0; j < na; ++j) f(r + j, j, r + j);
  }
}

// Forward half of a broadcasting binary op, returned as an untracked leaf.
template <typename Fwd>
Tensor binary(const Tensor& a, const Tensor& b, const char* name, Fwd fwd) {
  Shape out_shape = broadcast_shape(a.shape(), b.shape(), name);
  const std::size_t n = shape_numel(out_shape);
  std::vector<double> out(n);
  const double* ad = a.data().data();
  const double* bd = b.data().data();
  double* o = out.data();
  broadcast_loop(n, a.numel(), b.numel(), [&](std::size_t i, std::size_t ia, std::size_t ib) { o[i] = fwd(ad[ia], bd[ib]); });
  return Tensor(make_leaf(std::move(out_shape), std::move(out), false));
}

}  // namespace

std::size_t shape_numel(const Shape& shape) {
  std::size_t n = 1;
  for (std::size_t d : shape) n *= d;
  return n;
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << 'x';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

Tensor Tensor::zeros(const Shape& shape, bool requires_grad) {
  return full(shape, 0.0, requires_grad);
}

Tensor Tensor::full(const Shape& shape, double value, bool requires_grad) {
  check_finite_shape(shape);
  return Tensor(make_leaf(shape, std::vector<double>(shape_numel(shape), value), requires_grad));
}

Tensor Tensor::from(const Shape& shape, std::vector<double> values, bool requires_grad) {
  check_finite_shape(shape);
  if (shape_numel(shape) != values.size()) {
    throw DimensionError("shape " + shape_str(shape) + " holds " + std::to_string(shape_numel(shape)) +
                         " values, got " + std::to_string(values.size()));
  }
  return Tensor(make_leaf(shape, std::move(values), requires_grad));
}

Tensor Tensor::scalar(double value, bool requires_grad) { return from({1}, {value}, requires_grad); }

double Tensor::item() const {
  if (numel() != 1) throw ContractError("item() on tensor of shape " + shape_str(shape()));
  return node_->data[0];
}

void Tensor::set_requires_grad(bool enabled) {
  if (!node_->is_leaf) throw ContractError("requires_grad can only be set on leaf tensors");
  node_->requires_grad = enabled;
}

Tensor Tensor::detach() const { return Tensor(make_leaf(node_->shape, node_->data, false)); }

Tensor Tensor::clone() const {
  auto node = make_leaf(node_->shape, node_->data, node_->requires_grad);
  node->grad = node_->grad;
  return Tensor(std::move(node));
}

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }
bool grad_mode_enabled() { return g_grad_enabled; }

Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0)) {
    throw DimensionError("matmul: incompatible shapes " + shape_str(a.shape()) + " and " +
                         shape_str(b.shape()));
  }
  const auto m = static_cast<Eigen::Index>(a.dim(0));
  const auto k = static_cast<Eigen::Index>(a.dim(1));
  const auto n = static_cast<Eigen::Index>(b.dim(1));
  std::vector<double> c(static_cast<std::size_t>(m * n));
  MatMap(c.data(), m, n).noalias() = ConstMatMap(a.data().data(), m, k) * ConstMatMap(b.data().data(), k, n);
  return make_result({a.dim(0), b.dim(1)}, std::move(c), {a.node_ptr(), b.node_ptr()}, [m, k, n](Node& out) {
    Node& na = *out.parents[0];
    Node& nb = *out.parents[1];
    ConstMatMap G(out.grad.data(), m, n);
    if (na.requires_grad) {
      MatMap(na.ensure_grad().data(), m, k).noalias() += G * ConstMatMap(nb.data.data(), k, n).transpose();
    }
    if (nb.requires_grad) {
      MatMap(nb.ensure_grad().data(), k, n).noalias() += ConstMatMap(na.data.data(), m, k).transpose() * G;
    }
  });
}

Tensor add(const Tensor& a, const Tensor& b) {
  Tensor r = binary(a, b, "add", [](double x, double y) { return x + y; });
  const std::size_t na = a.numel(), nb = b.numel();
  auto& node = *r.node_ptr();
  return make_result(node.shape, std::move(node.data), {a.node_ptr(), b.node_ptr()}, [na, nb](Node& out) {
    const std::size_t n = out.grad.size();
    const double* g = out.grad.data();
    Node& pa = *out.parents[0];
    Node& pb = *out.parents[1];
    if (pa.requires_grad) {
      double* d = pa.ensure_grad().data();
      broadcast_loop(n, na, nb, [&](std::size_t i, std::size_t ia, std::size_t) { d[ia] += g[i]; });
    }
    if (pb.requires_grad) {
      double* d = pb.ensure_grad().data();
      broadcast_loop(n, na, nb, [&](std::size_t i, std::size_t, std::size_t ib) { d[ib] += g[i]; });
    }
  });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  Tensor r = binary(a, b, "sub", [](double x, double y) { return x - y; });
  const std::size_t na = a.numel(), nb = b.numel();
  auto& node = *r.node_ptr();
  return make_result(node.shape, std::move(node.data), {a.node_ptr(), b.node_ptr()}, [na, nb](Node& out) {
    const std::size_t n = out.grad.size();
    const double* g = out.grad.data();
    Node& pa = *out.parents[0];
    Node& pb = *out.parents[1];
    if (pa.requires_grad) {
      double* d = pa.ensure_grad().data();
      broadcast_loop(n, na, nb, [&](std::size_t i, std::size_t ia, std::size_t) { d[ia] += g[i]; });
    }
    if (pb.requires_grad) {
      double* d = pb.ensure_grad().data();
      broadcast_loop(n, na, nb, [&](std::size_t i, std::size_t, std::size_t ib) { d[ib] -= g[i]; });
    }
  });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  Tensor r = binary(a, b, "mul", [](double x, double y) { return x * y; });
  const std::size_t na = a.numel(), nb = b.numel();
  auto& node = *r.node_ptr();
  return make_result(node.shape, std::move(node.data), {a.node_ptr(), b.node_ptr()}, [na, nb](Node& out) {
    const std::size_t n = out.grad.size();
    const double* g = out.grad.data();
    Node& pa = *out.parents[0];
    Node& pb = *out.parents[1];
    const double* av = pa.data.data();
    const double* bv = pb.data.data();
    if (pa.requires_grad) {
      double* d = pa.ensure_grad().data();
      broadcast_loop(n, na, nb, [&](std::size_t i, std::size_t ia, std::size_t ib) { d[ia] += g[i] * bv[ib]; });
    }
    if (pb.requires_grad) {
      double* d = pb.ensure_grad().data();
      broadcast_loop(n, na, nb, [&](std::size_t i, std::size_t ia, std::size_t ib) { d[ib] += g[i] * av[ia]; });
    }
  });
}

Tensor scale(const Tensor& a, double factor) {
  std::vector<double> out(a.data().begin(), a.data().end());
  for (double& v : out) v *= factor;
  return make_result(a.shape(), std::move(out), {a.node_ptr()}, [factor](Node& out) {
    double* d = out.parents[0]->ensure_grad().data();
    for (std::size_t i = 0; i < out.grad.size(); ++i) d[i] += factor * out.grad[i];
  });
}

Tensor relu(const Tensor& a) {
  std::vector<double> out(a.data().begin(), a.data().end());
  for (double& v : out) v = v > 0.0 ? v : 0.0;
  return make_result(a.shape(), std::move(out), {a.node_ptr()}, [](Node& out) {
    Node& p = *out.parents[0];
    double* d = p.ensure_grad().data();
    for (std::size_t i = 0; i < out.grad.size(); ++i) {
      if (p.data[i] > 0.0) d[i] += out.grad[i];
    }
  });
}

Tensor gelu(const Tensor& a) {
  // Exact form: x * Phi(x).
  const std::size_t n = a.numel();
  std::vector<double> out(n);
  auto x = a.data();
  for (std::size_t i = 0; i < n; ++i) out[i] = 0.5 * x[i] * (1.0 + std::erf(x[i] * (1.0 / std::numbers::sqrt2)));
  return make_result(a.shape(), std::move(out), {a.node_ptr()}, [](Node& out) {
    Node& p = *out.parents[0];
    double* d = p.ensure_grad().data();
    constexpr double inv_sqrt_2pi = 0.3989422804014327;
    for (std::size_t i = 0; i < out.grad.size(); ++i) {
      const double xi = p.data[i];
      const double cdf = 0.5 * (1.0 + std::erf(xi * (1.0 / std::numbers::sqrt2)));
      const double pdf = inv_sqrt_2pi * std::exp(-0.5 * xi * xi);
      d[i] += out.grad[i] * (cdf + xi * pdf);
    }
  });
}

Tensor sum(const Tensor& a) {
  double s = 0.0;
  for (double v : a.data()) s += v;
  return make_result({1}, {s}, {a.node_ptr()}, [](Node& out) {
    Node& p = *out.parents[0];
    double* d = p.ensure_grad().data();
    const double g = out.grad[0];
    for (std::size_t i = 0; i < p.data.size(); ++i) d[i] += g;
  });
}

Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps) {
  if (eps <= 0.0) throw ContractError("layer_norm: eps must be positive");
  if (x.rank() == 0) throw DimensionError("layer_norm: input has no axes");
  const std::size_t d = x.shape().back();
  if (d == 0) throw DimensionError("layer_norm: last dimension is zero");
  if (gain.numel() != d || bias.numel() != d) {
    throw DimensionError("layer_norm: gain " + shape_str(gain.shape()) + " / bias " + shape_str(bias.shape()) +
                         " do not match last dimension of " + shape_str(x.shape()));
  }
  const std::size_t rows = x.numel() / d;
  std::vector<double> out(x.numel());
  auto xhat = std::make_shared<std::vector<double>>(x.numel());
  auto rstd = std::make_shared<std::vector<double>>(rows);
  auto xd = x.data();
  auto g = gain.data();
  auto b = bias.data();
  for (std::size_t r = 0; r < rows; ++r) {
    const double* row = xd.data() + r * d;
    double mean = 0.0;
    for (std::size_t j = 0; j < d; ++j) mean += row[j];
    mean /= static_cast<double>(d);
    double var = 0.0;
    for (std::size_t j = 0; j < d; ++j) var += (row[j] - mean) * (row[j] - mean);
    var /= static_cast<double>(d);
    const double rs = 1.0 / std::sqrt(var + eps);
    (*rstd)[r] = rs;
    for (std::size_t j = 0; j < d; ++j) {
      const double h = (row[j] - mean) * rs;
      (*xhat)[r * d + j] = h;
      out[r * d + j] = h * g[j] + b[j];
    }
  }
  return make_result(x.shape(), std::move(out), {x.node_ptr(), gain.node_ptr(), bias.node_ptr()},
                     [xhat, rstd, rows, d](Node& out) {
                       Node& px = *out.parents[0];
                       Node& pg = *out.parents[1];
                       Node& pb = *out.parents[2];
                       const double* G = out.grad.data();
                       const double* H = xhat->data();
                       if (pg.requires_grad) {
                         double* dg = pg.ensure_grad().data();
                         for (std::size_t r = 0; r < rows; ++r)
                           for (std::size_t j = 0; j < d; ++j) dg[j] += G[r * d + j] * H[r * d + j];
                       }
                       if (pb.requires_grad) {
                         double* db = pb.ensure_grad().data();
                         for (std::size_t r = 0; r < rows; ++r)
                           for (std::size_t j = 0; j < d; ++j) db[j] += G[r * d + j];
                       }
                       if (px.requires_grad) {
                         double* dx = px.ensure_grad().data();
                         const double* gain = pg.data.data();
                         const double inv_d = 1.0 / static_cast<double>(d);
                         for (std::size_t r = 0; r < rows; ++r) {
                           double mean_dh = 0.0, mean_dh_h = 0.0;
                           for (std::size_t j = 0; j < d; ++j) {
                             const double dh = G[r * d + j] * gain[j];
                             mean_dh += dh;
                             mean_dh_h += dh * H[r * d + j];
                           }
                           mean_dh *= inv_d;
                           mean_dh_h *= inv_d;
                           const double rs = (*rstd)[r];
                           for (std::size_t j = 0; j < d; ++j) {
                             const double dh = G[r * d + j] * gain[j];
                             dx[r * d + j] += rs * (dh - mean_dh - H[r * d + j] * mean_dh_h);
                           }
                         }
                       }
                     });
}

Tensor softmax_cross_entropy(const Tensor& logits, std::span<const std::size_t> targets) {
  if (logits.rank() != 2) throw DimensionError("softmax_cross_entropy: logits must be 2-D, got " + shape_str(logits.shape()));
  const std::size_t n = logits.dim(0), v = logits.dim(1);
  if (targets.size() != n) {
    throw DimensionError("softmax_cross_entropy: " + std::to_string(targets.size()) + " targets for " +
                         std::to_string(n) + " rows");
  }
  auto probs = std::make_shared<std::vector<double>>(n * v);
  auto tgt = std::make_shared<std::vector<std::size_t>>(targets.begin(), targets.end());
  auto L = logits.data();
  double loss = 0.0;
  for (std::size_t r = 0; r < n; ++r) {
    if ((*tgt)[r] >= v) {
      throw IndexError("softmax_cross_entropy: target " + std::to_string((*tgt)[r]) + " out of range for " +
                       std::to_string(v) + " classes");
    }
    const double* row = L.data() + r * v;
    const double mx = *std::max_element(row, row + v);
    double z = 0.0;
    for (std::size_t j = 0; j < v; ++j) {
      const double e = std::exp(row[j] - mx);
      (*probs)[r * v + j] = e;
      z += e;
    }
    for (std::size_t j = 0; j < v; ++j) (*probs)[r * v + j] /= z;
    loss += (mx + std::log(z)) - row[(*tgt)[r]];
  }
  loss /= static_cast<double>(n);
  return make_result({1}, {loss}, {logits.node_ptr()}, [probs, tgt, n, v](Node& out) {
    Node& p = *out.parents[0];
    double* d = p.ensure_grad().data();
    const double g = out.grad[0] / static_cast<double>(n);
    for (std::size_t r = 0; r < n; ++r) {
      for (std::size_t j = 0; j < v; ++j) d[r * v + j] += g * (*probs)[r * v + j];
      d[r * v + (*tgt)[r]] -= g;
    }
  });
}

Tensor embedding(const Tensor& table, std::span<const std::size_t> ids) {
  if (table.rank() != 2) throw DimensionError("embedding: table must be 2-D, got " + shape_str(table.shape()));
  if (ids.empty()) throw DimensionError("embedding: no ids");
  const std::size_t vocab = table.dim(0), d = table.dim(1);
  auto idx = std::make_shared<std::vector<std::size_t>>(ids.begin(), ids.end());
  std::vector<double> out(idx->size() * d);
  auto T = table.data();
  for (std::size_t r = 0; r < idx->size(); ++r) {
    if ((*idx)[r] >= vocab) {
      throw IndexError("embedding: id " + std::to_string((*idx)[r]) + " out of range for table of " +
                       std::to_string(vocab) + " rows");
    }
    std::copy_n(T.data() + (*idx)[r] * d, d, out.data() + r * d);
  }
  return make_result({idx->size(), d}, std::move(out), {table.node_ptr()}, [idx, d](Node& out) {
    double* dt = out.parents[0]->ensure_grad().data();
    for (std::size_t r = 0; r < idx->size(); ++r) {
      double* dst = dt + (*idx)[r] * d;
      const double* src = out.grad.data() + r * d;
      for (std::size_t j = 0; j < d; ++j) dst[j] += src[j];
    }
  });
}

Tensor attention(const Tensor& q, const Tensor& k, const Tensor& v, std::span<const AttentionSegment> segments,
                 std::size_t heads, bool causal) {
  if (q.rank() != 2 || k.rank() != 2 || v.rank() != 2 || q.dim(1) != k.dim(1) || k.shape() != v.shape()) {
    throw DimensionError("attention: incompatible shapes q" + shape_str(q.shape()) + " k" + shape_str(k.shape()) +
                         " v" + shape_str(v.shape()));
  }
  const std::size_t d = q.dim(1);
  if (heads == 0 || d % heads != 0) throw DimensionError("attention: width " + std::to_string(d) + " not divisible by heads");
  const std::size_t dh = d / heads;
  const double inv_scale = 1.0 / std::sqrt(static_cast<double>(dh));
  auto segs = std::make_shared<std::vector<AttentionSegment>>(segments.begin(), segments.end());

  // Offsets of each segment's probability block: heads * q_len * k_len.
  auto prob_offsets = std::make_shared<std::vector<std::size_t>>();
  std::size_t total = 0;
  for (const auto& s : *segs) {
    if (s.q_offset + s.q_len > q.dim(0) || s.k_offset + s.k_len > k.dim(0) || s.k_len == 0) {
      throw DimensionError("attention: segment out of range");
    }
    if (causal && s.q_len != s.k_len) throw DimensionError("attention: causal segments must be square");
    prob_offsets->push_back(total);
    total += heads * s.q_len * s.k_len;
  }
  auto probs = std::make_shared<std::vector<double>>(total, 0.0);
  std::vector<double> out(q.numel(), 0.0);
  const double* Q = q.data().data();
  const double* K = k.data().data();
  const double* V = v.data().data();

  for (std::size_t si = 0; si < segs->size(); ++si) {
    const auto& s = (*segs)[si];
    for (std::size_t h = 0; h < heads; ++h) {
      double* P = probs->data() + (*prob_offsets)[si] + h * s.q_len * s.k_len;
      for (std::size_t i = 0; i < s.q_len; ++i) {
        const double* qi = Q + (s.q_offset + i) * d + h * dh;
        const std::size_t visible = causal ? i + 1 : s.k_len;
        double* prow = P + i * s.k_len;
        double mx = -INFINITY;
        for (std::size_t j = 0; j < visible; ++j) {
          const double* kj = K + (s.k_offset + j) * d + h * dh;
          double acc = 0.0;
          for (std::size_t c = 0; c < dh; ++c) acc += qi[c] * kj[c];
          prow[j] = acc * inv_scale;
          mx = std::max(mx, prow[j]);
        }
        double z = 0.0;
        for (std::size_t j = 0; j < visible; ++j) {
          prow[j] = std::exp(prow[j] - mx);
          z += prow[j];
        }
        double* oi = out.data() + (s.q_offset + i) * d + h * dh;
        for (std::size_t j = 0; j < visible; ++j) {
          prow[j] /= z;
          const double* vj = V + (s.k_offset + j) * d + h * dh;
          for (std::size_t c = 0; c < dh; ++c) oi[c] += prow[j] * vj[c];
        }
      }
    }
  }

  return make_result(q.shape(), std::move(out), {q.node_ptr(), k.node_ptr(), v.node_ptr()},
                     [segs, prob_offsets, probs, heads, d, dh, inv_scale, causal](Node& out) {
                       Node& nq = *out.parents[0];
                       Node& nk = *out.parents[1];
                       Node& nv = *out.parents[2];
                       const double* G = out.grad.data();
                       const double* Q = nq.data.data();
                       const double* K = nk.data.data();
                       const double* V = nv.data.data();
                       double* dQ = nq.requires_grad ? nq.ensure_grad().data() : nullptr;
                       double* dK = nk.requires_grad ? nk.ensure_grad().data() : nullptr;
                       double* dV = nv.requires_grad ? nv.ensure_grad().data() : nullptr;
                       std::vector<double> dp;
                       for (std::size_t si = 0; si < segs->size(); ++si) {
                         const auto& s = (*segs)[si];
                         dp.assign(s.k_len, 0.0);
                         for (std::size_t h = 0; h < heads; ++h) {
                           const double* P = probs->data() + (*prob_offsets)[si] + h * s.q_len * s.k_len;
                           for (std::size_t i = 0; i < s.q_len; ++i) {
                             const std::size_t visible = causal ? i + 1 : s.k_len;
                             const double* gi = G + (s.q_offset + i) * d + h * dh;
                             const double* prow = P + i * s.k_len;
                             double dot = 0.0;
                             for (std::size_t j = 0; j < visible; ++j) {
                               const double* vj = V + (s.k_offset + j) * d + h * dh;
                               double acc = 0.0;
                               for (std::size_t c = 0; c < dh; ++c) acc += gi[c] * vj[c];
                               dp[j] = acc;
                               dot += prow[j] * acc;
                               if (dV) {
                                 double* dvj = dV + (s.k_offset + j) * d + h * dh;
                                 for (std::size_t c = 0; c < dh; ++c) dvj[c] += prow[j] * gi[c];
                               }
                             }
                             const double* qi = Q + (s.q_offset + i) * d + h * dh;
                             double* dqi = dQ ? dQ + (s.q_offset + i) * d + h * dh : nullptr;
                             for (std::size_t j = 0; j < visible; ++j) {
                               const double ds = prow[j] * (dp[j] - dot) * inv_scale;
                               if (ds == 0.0) continue;
                               const double* kj = K + (s.k_offset + j) * d + h * dh;
                               if (dqi) {
                                 for (std::size_t c = 0; c < dh; ++c) dqi[c] += ds * kj[c];
                               }
                               if (dK) {
                                 double* dkj = dK + (s.k_offset + j) * d + h * dh;
                                 for (std::size_t c = 0; c < dh; ++c) dkj[c] += ds * qi[c];
                               }
                             }
                           }
                         }
                       }
                     });
}

void backward(const Tensor& loss) {
  if (!loss.defined() || loss.numel() != 1) {
    throw ContractError("backward: loss must be a scalar, got " + (loss.defined() ? shape_str(loss.shape()) : "undefined"));
  }
  Node* root = loss.node();
  if (!root->requires_grad) throw ContractError("backward: loss has no recorded history");

  // Iterative post-order DFS gives a topological order (inputs before outputs).
  std::vector<Node*> order;
  std::unordered_set<Node*> visited;
  std::vector<std::pair<Node*, std::size_t>> stack{{root, 0}};
  visited.insert(root);
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      Node* parent = node->parents[next++].get();
      if (parent->requires_grad && !visited.count(parent)) {
        visited.insert(parent);
        stack.emplace_back(parent, 0);
      }
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  root->ensure_grad();
  root->grad[0] += 1.0;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node* node = *it;
    if (node->is_leaf || !node->backward || node->grad.empty()) continue;
    node->backward(*node);
  }
  for (Node* node : order) {
    if (node->is_leaf) continue;
    node->backward = nullptr;
    node->parents.clear();
    node->grad.clear();
    node->grad.shrink_to_fit();
  }
}

}  // namespace epi
