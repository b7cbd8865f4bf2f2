#include "ouro/ops.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>

namespace ouro {

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << "x";
    os << shape[i];
  }
  os << ']';
  return os.str();
}

Index shape_numel(const Shape& shape) {
  Index n = 1;
  for (Index e : shape) n *= e;
  return n;
}

namespace {

template <typename T>
using StridedMap = Eigen::Map<RowMat<T>, 0, Eigen::OuterStride<>>;
template <typename T>
using ConstStridedMap = Eigen::Map<const RowMat<T>, 0, Eigen::OuterStride<>>;

template <typename T>
void require_same_shape(const char* op, const Tensor<T>& a, const Tensor<T>& b) {
  if (a.shape() != b.shape()) {
    throw DimensionError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
  }
}

template <typename T>
void require_rank(const char* op, const Tensor<T>& a, Index rank) {
  if (a.rank() != rank) {
    throw DimensionError(std::string(op) + ": expected rank " + std::to_string(rank) + ", got shape " +
                         shape_str(a.shape()));
  }
}

template <typename T>
T stable_sigmoid(T x) {
  if (x >= T(0)) return T(1) / (T(1) + std::exp(-x));
  const T e = std::exp(x);
  return e / (T(1) + e);
}

template <typename T>
ConstMatMap<T> as_matrix(const Vec<T>& v, Index rows, Index cols) {
  return ConstMatMap<T>(v.data(), rows, cols);
}

template <typename T>
MatMap<T> as_matrix(Vec<T>& v, Index rows, Index cols) {
  return MatMap<T>(v.data(), rows, cols);
}

}  // namespace

template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0)) {
    throw DimensionError("matmul: cannot multiply " + shape_str(a.shape()) + " by " + shape_str(b.shape()));
  }
  const Index m = a.dim(0), k = a.dim(1), n = b.dim(1);
  Vec<T> out(m * n);
  as_matrix(out, m, n).noalias() = as_matrix(a.value(), m, k) * as_matrix(b.value(), k, n);
  return make_op_result<T>({m, n}, std::move(out), {a, b}, [a, b, m, k, n](const Tensor<T>& y) {
    const auto g = as_matrix(y.grad(), m, n);
    if (a.requires_grad()) as_matrix(a.grad_accumulator(), m, k).noalias() += g * as_matrix(b.value(), k, n).transpose();
    if (b.requires_grad()) as_matrix(b.grad_accumulator(), k, n).noalias() += as_matrix(a.value(), m, k).transpose() * g;
  });
}

template <typename T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& w) {
  if (w.rank() != 2 || x.dim(-1) != w.dim(1)) {
    throw DimensionError("linear: input " + shape_str(x.shape()) + " does not match weight " + shape_str(w.shape()));
  }
  const Index in = w.dim(1), out_dim = w.dim(0), rows = x.numel() / in;
  Shape shape = x.shape();
  shape.back() = out_dim;
  Vec<T> out(rows * out_dim);
  as_matrix(out, rows, out_dim).noalias() = as_matrix(x.value(), rows, in) * as_matrix(w.value(), out_dim, in).transpose();
  return make_op_result<T>(std::move(shape), std::move(out), {x, w}, [x, w, in, out_dim, rows](const Tensor<T>& y) {
    const auto g = as_matrix(y.grad(), rows, out_dim);
    if (x.requires_grad()) as_matrix(x.grad_accumulator(), rows, in).noalias() += g * as_matrix(w.value(), out_dim, in);
    if (w.requires_grad()) as_matrix(w.grad_accumulator(), out_dim, in).noalias() += g.transpose() * as_matrix(x.value(), rows, in);
  });
}

template <typename T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b) {
  return add_bias(linear(x, w), b);
}

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  require_same_shape("add", a, b);
  return make_op_result<T>(a.shape(), a.value() + b.value(), {a, b}, [a, b](const Tensor<T>& y) {
    if (a.requires_grad()) a.grad_accumulator() += y.grad();
    if (b.requires_grad()) b.grad_accumulator() += y.grad();
  });
}

template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  require_same_shape("sub", a, b);
  return make_op_result<T>(a.shape(), a.value() - b.value(), {a, b}, [a, b](const Tensor<T>& y) {
    if (a.requires_grad()) a.grad_accumulator() += y.grad();
    if (b.requires_grad()) b.grad_accumulator() -= y.grad();
  });
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  require_same_shape("mul", a, b);
  Vec<T> out = a.value().cwiseProduct(b.value());
  return make_op_result<T>(a.shape(), std::move(out), {a, b}, [a, b](const Tensor<T>& y) {
    if (a.requires_grad()) a.grad_accumulator() += y.grad().cwiseProduct(b.value());
    if (b.requires_grad()) b.grad_accumulator() += y.grad().cwiseProduct(a.value());
  });
}

template <typename T>
Tensor<T> scale(const Tensor<T>& a, T factor) {
  return make_op_result<T>(a.shape(), a.value() * factor, {a}, [a, factor](const Tensor<T>& y) {
    if (a.requires_grad()) a.grad_accumulator() += y.grad() * factor;
  });
}

template <typename T>
Tensor<T> add_bias(const Tensor<T>& x, const Tensor<T>& b) {
  if (b.rank() != 1 || b.dim(0) != x.dim(-1)) {
    throw DimensionError("add_bias: bias " + shape_str(b.shape()) + " does not match input " + shape_str(x.shape()));
  }
  const Index d = b.dim(0), rows = x.numel() / d;
  Vec<T> out = x.value();
  as_matrix(out, rows, d).rowwise() += b.value().transpose();
  return make_op_result<T>(x.shape(), std::move(out), {x, b}, [x, b, rows, d](const Tensor<T>& y) {
    if (x.requires_grad()) x.grad_accumulator() += y.grad();
    if (b.requires_grad()) b.grad_accumulator() += as_matrix(y.grad(), rows, d).colwise().sum().transpose();
  });
}

template <typename T>
Tensor<T> sigmoid(const Tensor<T>& x) {
  Vec<T> out = x.value().unaryExpr([](T v) { return stable_sigmoid(v); });
  return make_op_result<T>(x.shape(), std::move(out), {x}, [x](const Tensor<T>& y) {
    if (!x.requires_grad()) return;
    const auto s = y.value().array();
    x.grad_accumulator().array() += y.grad().array() * s * (T(1) - s);
  });
}

template <typename T>
Tensor<T> silu(const Tensor<T>& x) {
  Vec<T> out = x.value().unaryExpr([](T v) { return v * stable_sigmoid(v); });
  return make_op_result<T>(x.shape(), std::move(out), {x}, [x](const Tensor<T>& y) {
    if (!x.requires_grad()) return;
    const Vec<T> s = x.value().unaryExpr([](T v) { return stable_sigmoid(v); });
    x.grad_accumulator().array() +=
        y.grad().array() * (s.array() + x.value().array() * s.array() * (T(1) - s.array()));
  });
}

template <typename T>
Tensor<T> blend(const Tensor<T>& g, const Tensor<T>& a, const Tensor<T>& b) {
  require_same_shape("blend", g, a);
  require_same_shape("blend", a, b);
  Vec<T> out = (g.value().array() * a.value().array() + (T(1) - g.value().array()) * b.value().array()).matrix();
  return make_op_result<T>(a.shape(), std::move(out), {g, a, b}, [g, a, b](const Tensor<T>& y) {
    const auto gy = y.grad().array();
    if (g.requires_grad()) g.grad_accumulator().array() += gy * (a.value().array() - b.value().array());
    if (a.requires_grad()) a.grad_accumulator().array() += gy * g.value().array();
    if (b.requires_grad()) b.grad_accumulator().array() += gy * (T(1) - g.value().array());
  });
}

template <typename T>
Tensor<T> sum(const Tensor<T>& x) {
  Vec<T> out(1);
  out[0] = x.value().sum();
  return make_op_result<T>({1}, std::move(out), {x}, [x](const Tensor<T>& y) {
    if (x.requires_grad()) x.grad_accumulator().array() += y.grad()[0];
  });
}

template <typename T>
Tensor<T> reshape(const Tensor<T>& x, Shape shape) {
  if (shape_numel(shape) != x.numel()) {
    throw DimensionError("reshape: cannot view " + shape_str(x.shape()) + " as " + shape_str(shape));
  }
  return make_op_result<T>(std::move(shape), x.value(), {x}, [x](const Tensor<T>& y) {
    if (x.requires_grad()) x.grad_accumulator() += y.grad();
  });
}

template <typename T>
Tensor<T> rms_norm(const Tensor<T>& x, const Tensor<T>& gamma, T eps) {
  if (gamma.rank() != 1 || gamma.dim(0) != x.dim(-1)) {
    throw DimensionError("rms_norm: gamma " + shape_str(gamma.shape()) + " does not match input " + shape_str(x.shape()));
  }
  if (!(eps >= T(0))) throw ContractError("rms_norm: eps must be non-negative");
  const Index d = gamma.dim(0), rows = x.numel() / d;
  const auto xm = as_matrix(x.value(), rows, d);
  Vec<T> inv(rows);
  for (Index i = 0; i < rows; ++i) {
    inv[i] = T(1) / std::sqrt(xm.row(i).squaredNorm() / T(d) + eps);
  }
  Vec<T> out(rows * d);
  auto om = as_matrix(out, rows, d);
  for (Index i = 0; i < rows; ++i) {
    om.row(i) = (xm.row(i).array() * inv[i] * gamma.value().transpose().array()).matrix();
  }
  return make_op_result<T>(x.shape(), std::move(out), {x, gamma}, [x, gamma, inv, rows, d](const Tensor<T>& y) {
    const auto g = as_matrix(y.grad(), rows, d);
    const auto xm = as_matrix(x.value(), rows, d);
    if (x.requires_grad()) {
      auto dx = as_matrix(x.grad_accumulator(), rows, d);
      for (Index i = 0; i < rows; ++i) {
        const auto gg = (g.row(i).array() * gamma.value().transpose().array()).matrix();
        const T dot = gg.dot(xm.row(i));
        const T r = inv[i];
        dx.row(i) += gg * r - xm.row(i) * (r * r * r * dot / T(d));
      }
    }
    if (gamma.requires_grad()) {
      auto& dg = gamma.grad_accumulator();
      for (Index i = 0; i < rows; ++i) {
        dg += (g.row(i).array() * xm.row(i).array() * inv[i]).matrix().transpose();
      }
    }
  });
}

template <typename T>
Tensor<T> mean_pool(const Tensor<T>& h, const Tensor<T>& mask) {
  require_rank("mean_pool", h, 3);
  require_rank("mean_pool", mask, 2);
  const Index B = h.dim(0), S = h.dim(1), d = h.dim(2);
  if (mask.dim(0) != B || mask.dim(1) != S) {
    throw DimensionError("mean_pool: mask " + shape_str(mask.shape()) + " does not match hidden " + shape_str(h.shape()));
  }
  Vec<T> weights(B * S);
  for (Index b = 0; b < B; ++b) {
    T count = 0;
    for (Index t = 0; t < S; ++t) count += mask.value()[b * S + t];
    if (count <= T(0)) {
      throw DegenerateInputError("mean_pool: batch row " + std::to_string(b) + " has an all-zero mask");
    }
    for (Index t = 0; t < S; ++t) weights[b * S + t] = mask.value()[b * S + t] / count;
  }
  Vec<T> out = Vec<T>::Zero(B * d);
  for (Index b = 0; b < B; ++b) {
    const auto hb = as_matrix(h.value(), B * S, d).middleRows(b * S, S);
    out.segment(b * d, d).noalias() = hb.transpose() * weights.segment(b * S, S);
  }
  return make_op_result<T>({B, d}, std::move(out), {h, mask}, [h, weights, B, S, d](const Tensor<T>& y) {
    if (!h.requires_grad()) return;
    auto dh = as_matrix(h.grad_accumulator(), B * S, d);
    for (Index b = 0; b < B; ++b) {
      dh.middleRows(b * S, S).noalias() += weights.segment(b * S, S) * y.grad().segment(b * d, d).transpose();
    }
  });
}

template <typename T>
Tensor<T> cross_entropy(const Tensor<T>& logits, std::span<const std::int32_t> targets,
                        std::span<const std::uint8_t> ignore) {
  const Index V = logits.dim(-1), rows = logits.numel() / V;
  if (static_cast<Index>(targets.size()) != rows) {
    throw DimensionError("cross_entropy: " + std::to_string(targets.size()) + " targets for logits " +
                         shape_str(logits.shape()));
  }
  if (!ignore.empty() && static_cast<Index>(ignore.size()) != rows) {
    throw DimensionError("cross_entropy: ignore mask length does not match targets");
  }
  const auto lm = as_matrix(logits.value(), rows, V);
  Vec<T> probs(rows * V);
  auto pm = as_matrix(probs, rows, V);
  double total = 0.0;
  Index count = 0;
  for (Index i = 0; i < rows; ++i) {
    const std::int32_t tgt = targets[static_cast<std::size_t>(i)];
    if (tgt < 0 || tgt >= V) {
      throw IndexError("cross_entropy: target " + std::to_string(tgt) + " outside [0, " + std::to_string(V) + ")");
    }
    const T mx = lm.row(i).maxCoeff();
    pm.row(i) = (lm.row(i).array() - mx).exp().matrix();
    const T z = pm.row(i).sum();
    pm.row(i) /= z;
    if (!ignore.empty() && ignore[static_cast<std::size_t>(i)]) continue;
    total += static_cast<double>(std::log(z) - (lm(i, tgt) - mx));
    ++count;
  }
  if (count == 0) throw DegenerateInputError("cross_entropy: every position is ignored");
  Vec<T> out(1);
  out[0] = static_cast<T>(total / static_cast<double>(count));
  std::vector<std::int32_t> tg(targets.begin(), targets.end());
  std::vector<std::uint8_t> ig(ignore.begin(), ignore.end());
  return make_op_result<T>({1}, std::move(out), {logits},
                           [logits, probs = std::move(probs), tg = std::move(tg), ig = std::move(ig), rows, V,
                            count](const Tensor<T>& y) {
                             if (!logits.requires_grad()) return;
                             const T g = y.grad()[0] / static_cast<T>(count);
                             auto dl = as_matrix(logits.grad_accumulator(), rows, V);
                             const auto pm = as_matrix(probs, rows, V);
                             for (Index i = 0; i < rows; ++i) {
                               if (!ig.empty() && ig[static_cast<std::size_t>(i)]) continue;
                               dl.row(i) += pm.row(i) * g;
                               dl(i, tg[static_cast<std::size_t>(i)]) -= g;
                             }
                           });
}

template <typename T>
Tensor<T> embedding(const Tensor<T>& table, std::span<const std::int32_t> tokens, Index batch, Index seq) {
  require_rank("embedding", table, 2);
  if (static_cast<Index>(tokens.size()) != batch * seq) {
    throw DimensionError("embedding: " + std::to_string(tokens.size()) + " tokens for batch " +
                         std::to_string(batch) + " x " + std::to_string(seq));
  }
  const Index V = table.dim(0), d = table.dim(1);
  std::vector<std::int32_t> ids(tokens.begin(), tokens.end());
  for (std::int32_t id : ids) {
    if (id < 0 || id >= V) {
      throw IndexError("embedding: token " + std::to_string(id) + " outside vocabulary of " + std::to_string(V));
    }
  }
  Vec<T> out(batch * seq * d);
  const auto tm = as_matrix(table.value(), V, d);
  auto om = as_matrix(out, batch * seq, d);
  for (std::size_t i = 0; i < ids.size(); ++i) om.row(static_cast<Index>(i)) = tm.row(ids[i]);
  return make_op_result<T>({batch, seq, d}, std::move(out), {table}, [table, ids = std::move(ids), V, d](const Tensor<T>& y) {
    if (!table.requires_grad()) return;
    auto dt = as_matrix(table.grad_accumulator(), V, d);
    const auto g = as_matrix(y.grad(), static_cast<Index>(ids.size()), d);
    for (std::size_t i = 0; i < ids.size(); ++i) dt.row(ids[i]) += g.row(static_cast<Index>(i));
  });
}

template <typename T>
Tensor<T> rope(const Tensor<T>& x, Index head_dim, double theta, std::span<const Index> positions) {
  require_rank("rope", x, 3);
  if (head_dim <= 0 || head_dim % 2 != 0) {
    throw ConfigError("rope: head_dim must be positive and even, got " + std::to_string(head_dim));
  }
  const Index B = x.dim(0), S = x.dim(1), D = x.dim(2);
  if (D % head_dim != 0) {
    throw DimensionError("rope: width " + std::to_string(D) + " is not a multiple of head_dim " + std::to_string(head_dim));
  }
  if (!positions.empty() && static_cast<Index>(positions.size()) != S) {
    throw DimensionError("rope: positions list length does not match sequence length");
  }
  const Index half = head_dim / 2;
  Vec<T> cosv(S * half), sinv(S * half);
  for (Index t = 0; t < S; ++t) {
    const double pos = positions.empty() ? static_cast<double>(t) : static_cast<double>(positions[static_cast<std::size_t>(t)]);
    for (Index i = 0; i < half; ++i) {
      const double angle = pos * std::pow(theta, -2.0 * static_cast<double>(i) / static_cast<double>(head_dim));
      cosv[t * half + i] = static_cast<T>(std::cos(angle));
      sinv[t * half + i] = static_cast<T>(std::sin(angle));
    }
  }
  const Index heads = D / head_dim;
  auto rotate = [=](const Vec<T>& src, Vec<T>& dst, T sign) {
    for (Index b = 0; b < B; ++b) {
      for (Index t = 0; t < S; ++t) {
        const Index base = (b * S + t) * D;
        for (Index h = 0; h < heads; ++h) {
          for (Index i = 0; i < half; ++i) {
            const Index p = base + h * head_dim + 2 * i;
            const T c = cosv[t * half + i], s = sign * sinv[t * half + i];
            const T x0 = src[p], x1 = src[p + 1];
            dst[p] += x0 * c - x1 * s;
            dst[p + 1] += x0 * s + x1 * c;
          }
        }
      }
    }
  };
  Vec<T> out = Vec<T>::Zero(x.numel());
  rotate(x.value(), out, T(1));
  return make_op_result<T>(x.shape(), std::move(out), {x}, [x, rotate](const Tensor<T>& y) {
    if (x.requires_grad()) rotate(y.grad(), x.grad_accumulator(), T(-1));
  });
}

template <typename T>
Tensor<T> causal_attention(const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>& v, Index n_heads,
                           Index n_kv_heads) {
  require_rank("causal_attention", q, 3);
  require_rank("causal_attention", k, 3);
  require_same_shape("causal_attention", k, v);
  if (n_heads <= 0 || n_kv_heads <= 0 || n_heads % n_kv_heads != 0) {
    throw ConfigError("causal_attention: n_heads must be a positive multiple of n_kv_heads");
  }
  const Index B = q.dim(0), S = q.dim(1), Dq = q.dim(2), Dk = k.dim(2);
  if (k.dim(0) != B || k.dim(1) != S || Dq % n_heads != 0 || Dk != (Dq / n_heads) * n_kv_heads) {
    throw DimensionError("causal_attention: q " + shape_str(q.shape()) + " incompatible with k/v " + shape_str(k.shape()));
  }
  const Index hd = Dq / n_heads, group = n_heads / n_kv_heads;
  const T inv_sqrt = T(1) / std::sqrt(static_cast<T>(hd));
  const Eigen::OuterStride<> sq(Dq), sk(Dk);
  std::vector<RowMat<T>> probs(static_cast<std::size_t>(B * n_heads));
  Vec<T> out(q.numel());
  for (Index b = 0; b < B; ++b) {
    for (Index h = 0; h < n_heads; ++h) {
      const Index g = h / group;
      ConstStridedMap<T> qh(q.data() + b * S * Dq + h * hd, S, hd, sq);
      ConstStridedMap<T> kg(k.data() + b * S * Dk + g * hd, S, hd, sk);
      ConstStridedMap<T> vg(v.data() + b * S * Dk + g * hd, S, hd, sk);
      RowMat<T>& p = probs[static_cast<std::size_t>(b * n_heads + h)];
      p.noalias() = (qh * kg.transpose()) * inv_sqrt;
      for (Index i = 0; i < S; ++i) {
        const T mx = p.row(i).head(i + 1).maxCoeff();
        p.row(i).head(i + 1) = (p.row(i).head(i + 1).array() - mx).exp().matrix();
        p.row(i).head(i + 1) /= p.row(i).head(i + 1).sum();
        if (i + 1 < S) p.row(i).tail(S - i - 1).setZero();
      }
      StridedMap<T> oh(out.data() + b * S * Dq + h * hd, S, hd, sq);
      oh.noalias() = p * vg;
    }
  }
  return make_op_result<T>(q.shape(), std::move(out), {q, k, v},
                           [q, k, v, probs = std::move(probs), B, S, Dq, Dk, hd, n_heads, group, inv_sqrt](const Tensor<T>& y) {
                             const Eigen::OuterStride<> sq(Dq), sk(Dk);
                             T* dq = q.requires_grad() ? q.grad_accumulator().data() : nullptr;
                             T* dk = k.requires_grad() ? k.grad_accumulator().data() : nullptr;
                             T* dv = v.requires_grad() ? v.grad_accumulator().data() : nullptr;
                             RowMat<T> dp, ds;
                             for (Index b = 0; b < B; ++b) {
                               for (Index h = 0; h < n_heads; ++h) {
                                 const Index g = h / group;
                                 const RowMat<T>& p = probs[static_cast<std::size_t>(b * n_heads + h)];
                                 ConstStridedMap<T> go(y.grad().data() + b * S * Dq + h * hd, S, hd, sq);
                                 ConstStridedMap<T> qh(q.data() + b * S * Dq + h * hd, S, hd, sq);
                                 ConstStridedMap<T> kg(k.data() + b * S * Dk + g * hd, S, hd, sk);
                                 ConstStridedMap<T> vg(v.data() + b * S * Dk + g * hd, S, hd, sk);
                                 if (dv) {
                                   StridedMap<T> dvg(dv + b * S * Dk + g * hd, S, hd, sk);
                                   dvg.noalias() += p.transpose() * go;
                                 }
                                 if (!dq && !dk) continue;
                                 dp.noalias() = go * vg.transpose();
                                 const Vec<T> row_dot = (dp.array() * p.array()).rowwise().sum().matrix();
                                 ds = (p.array() * (dp.colwise() - row_dot).array()).matrix() * inv_sqrt;
                                 if (dq) {
                                   StridedMap<T> dqh(dq + b * S * Dq + h * hd, S, hd, sq);
                                   dqh.noalias() += ds * kg;
                                 }
                                 if (dk) {
                                   StridedMap<T> dkg(dk + b * S * Dk + g * hd, S, hd, sk);
                                   dkg.noalias() += ds.transpose() * qh;
                                 }
                               }
                             }
                           });
}

template <typename T>
Tensor<T> concat_last(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.rank() != b.rank() || !std::equal(a.shape().begin(), a.shape().end() - 1, b.shape().begin())) {
    throw DimensionError("concat_last: leading extents differ " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  }
  const Index p = a.dim(-1), r = b.dim(-1), rows = a.numel() / p;
  Shape shape = a.shape();
  shape.back() = p + r;
  Vec<T> out(rows * (p + r));
  auto om = as_matrix(out, rows, p + r);
  om.leftCols(p) = as_matrix(a.value(), rows, p);
  om.rightCols(r) = as_matrix(b.value(), rows, r);
  return make_op_result<T>(std::move(shape), std::move(out), {a, b}, [a, b, p, r, rows](const Tensor<T>& y) {
    const auto g = as_matrix(y.grad(), rows, p + r);
    if (a.requires_grad()) as_matrix(a.grad_accumulator(), rows, p) += g.leftCols(p);
    if (b.requires_grad()) as_matrix(b.grad_accumulator(), rows, r) += g.rightCols(r);
  });
}

template <typename T>
Tensor<T> tile_rows(const Tensor<T>& v, Index n) {
  if (n <= 0) throw DimensionError("tile_rows: count must be positive");
  Shape shape{n};
  shape.insert(shape.end(), v.shape().begin(), v.shape().end());
  const Index w = v.numel();
  Vec<T> out(n * w);
  as_matrix(out, n, w).rowwise() = v.value().transpose();
  return make_op_result<T>(std::move(shape), std::move(out), {v}, [v, n, w](const Tensor<T>& y) {
    if (v.requires_grad()) v.grad_accumulator() += as_matrix(y.grad(), n, w).colwise().sum().transpose();
  });
}

template <typename T>
Tensor<T> select_row(const Tensor<T>& table, Index i) {
  const Index n = table.dim(0);
  if (i < 0 || i >= n) {
    throw IndexError("select_row: index " + std::to_string(i) + " outside [0, " + std::to_string(n) + ")");
  }
  Shape shape(table.shape().begin() + 1, table.shape().end());
  if (shape.empty()) shape = {1};
  const Index w = table.numel() / n;
  Vec<T> out = table.value().segment(i * w, w);
  return make_op_result<T>(std::move(shape), std::move(out), {table}, [table, i, w](const Tensor<T>& y) {
    if (table.requires_grad()) table.grad_accumulator().segment(i * w, w) += y.grad();
  });
}

template <typename T>
Tensor<T> select_middle(const Tensor<T>& x, Index k) {
  require_rank("select_middle", x, 3);
  const Index B = x.dim(0), K = x.dim(1), r = x.dim(2);
  if (k < 0 || k >= K) {
    throw IndexError("select_middle: index " + std::to_string(k) + " outside [0, " + std::to_string(K) + ")");
  }
  Vec<T> out(B * r);
  for (Index b = 0; b < B; ++b) out.segment(b * r, r) = x.value().segment((b * K + k) * r, r);
  return make_op_result<T>({B, r}, std::move(out), {x}, [x, B, K, r, k](const Tensor<T>& y) {
    if (!x.requires_grad()) return;
    auto& dx = x.grad_accumulator();
    for (Index b = 0; b < B; ++b) dx.segment((b * K + k) * r, r) += y.grad().segment(b * r, r);
  });
}

template <typename T>
Tensor<T> scale_rows_per_batch(const Tensor<T>& u, const Tensor<T>& d) {
  require_rank("scale_rows_per_batch", u, 3);
  require_rank("scale_rows_per_batch", d, 2);
  const Index B = u.dim(0), S = u.dim(1), r = u.dim(2);
  if (d.dim(0) != B || d.dim(1) != r) {
    throw DimensionError("scale_rows_per_batch: scale " + shape_str(d.shape()) + " does not match input " +
                         shape_str(u.shape()));
  }
  Vec<T> out(u.numel());
  for (Index b = 0; b < B; ++b) {
    as_matrix(out, B * S, r).middleRows(b * S, S) =
        as_matrix(u.value(), B * S, r).middleRows(b * S, S) * d.value().segment(b * r, r).asDiagonal();
  }
  return make_op_result<T>(u.shape(), std::move(out), {u, d}, [u, d, B, S, r](const Tensor<T>& y) {
    const auto g = as_matrix(y.grad(), B * S, r);
    for (Index b = 0; b < B; ++b) {
      const auto gb = g.middleRows(b * S, S);
      if (u.requires_grad()) {
        as_matrix(u.grad_accumulator(), B * S, r).middleRows(b * S, S) += gb * d.value().segment(b * r, r).asDiagonal();
      }
      if (d.requires_grad()) {
        const auto ub = as_matrix(u.value(), B * S, r).middleRows(b * S, S);
        d.grad_accumulator().segment(b * r, r) += (gb.array() * ub.array()).colwise().sum().matrix().transpose();
      }
    }
  });
}

#define OURO_INSTANTIATE_OPS(T)                                                                            \
  template Tensor<T> matmul(const Tensor<T>&, const Tensor<T>&);                                           \
  template Tensor<T> linear(const Tensor<T>&, const Tensor<T>&);                                           \
  template Tensor<T> linear(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&);                         \
  template Tensor<T> add(const Tensor<T>&, const Tensor<T>&);                                              \
  template Tensor<T> sub(const Tensor<T>&, const Tensor<T>&);                                              \
  template Tensor<T> mul(const Tensor<T>&, const Tensor<T>&);                                              \
  template Tensor<T> scale(const Tensor<T>&, T);                                                           \
  template Tensor<T> add_bias(const Tensor<T>&, const Tensor<T>&);                                         \
  template Tensor<T> sigmoid(const Tensor<T>&);                                                            \
  template Tensor<T> silu(const Tensor<T>&);                                                               \
  template Tensor<T> blend(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&);                          \
  template Tensor<T> sum(const Tensor<T>&);                                                                \
  template Tensor<T> reshape(const Tensor<T>&, Shape);                                                     \
  template Tensor<T> rms_norm(const Tensor<T>&, const Tensor<T>&, T);                                      \
  template Tensor<T> mean_pool(const Tensor<T>&, const Tensor<T>&);                                        \
  template Tensor<T> cross_entropy(const Tensor<T>&, std::span<const std::int32_t>, std::span<const std::uint8_t>); \
  template Tensor<T> embedding(const Tensor<T>&, std::span<const std::int32_t>, Index, Index);             \
  template Tensor<T> rope(const Tensor<T>&, Index, double, std::span<const Index>);                        \
  template Tensor<T> causal_attention(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, Index, Index); \
  template Tensor<T> concat_last(const Tensor<T>&, const Tensor<T>&);                                      \
  template Tensor<T> tile_rows(const Tensor<T>&, Index);                                                   \
  template Tensor<T> select_row(const Tensor<T>&, Index);                                                  \
  template Tensor<T> select_middle(const Tensor<T>&, Index);                                               \
  template Tensor<T> scale_rows_per_batch(const Tensor<T>&, const Tensor<T>&);

OURO_INSTANTIATE_OPS(float)
OURO_INSTANTIATE_OPS(double)

}  // namespace ouro
