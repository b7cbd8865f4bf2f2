#include "ouro/surgery.hpp"

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <numeric>
#include <sstream>

namespace ouro {

SplitSpec SplitSpec::make(Index n_layers, Index prelude, Index recurrent, Index coda) {
  SplitSpec s;
  s.n_layers = n_layers;
  s.prelude = prelude;
  s.recurrent = recurrent;
  s.coda = coda;
  for (Index l = prelude; l < n_layers - coda; ++l) {
    if (l != recurrent) s.removed.push_back(l);
  }
  s.validate();
  return s;
}

void SplitSpec::validate() const {
  auto fail = [&](const std::string& why) {
    throw ConfigError("invalid split (L=" + std::to_string(n_layers) + ", P=" + std::to_string(prelude) +
                      ", R=" + std::to_string(recurrent) + ", C=" + std::to_string(coda) + "): " + why);
  };
  if (n_layers <= 0) fail("no layers");
  if (prelude < 0 || coda < 0) fail("negative section size");
  if (prelude + coda >= n_layers) fail("prelude and coda leave no room for a recurrent layer");
  if (recurrent < prelude || recurrent >= n_layers - coda) fail("recurrent layer lies inside prelude or coda");
  std::vector<Index> expected;
  for (Index l = prelude; l < n_layers - coda; ++l) {
    if (l != recurrent) expected.push_back(l);
  }
  if (removed != expected) fail("removed set is not the middle section minus the recurrent layer");
  if (prelude + coda + 1 + static_cast<Index>(removed.size()) != n_layers) fail("sections do not cover every layer");
}

Eigen::MatrixXd average_residual(const std::vector<Eigen::MatrixXd>& removed, const Eigen::MatrixXd& recurrent) {
  if (removed.empty()) throw ConfigError("average_residual: the removed-layer set is empty");
  Eigen::MatrixXd acc = Eigen::MatrixXd::Zero(recurrent.rows(), recurrent.cols());
  for (const auto& w : removed) {
    if (w.rows() != recurrent.rows() || w.cols() != recurrent.cols()) {
      throw DimensionError("average_residual: removed layer weight is " + std::to_string(w.rows()) + "x" +
                           std::to_string(w.cols()) + ", recurrent is " + std::to_string(recurrent.rows()) + "x" +
                           std::to_string(recurrent.cols()));
    }
    acc += w - recurrent;
  }
  return acc / static_cast<double>(removed.size());
}

template <typename T>
Eigen::MatrixXd to_eigen(const Tensor<T>& m) {
  if (m.rank() != 2) throw DimensionError("to_eigen: expected a matrix, got " + shape_str(m.shape()));
  return ConstMatMap<T>(m.data(), m.dim(0), m.dim(1)).template cast<double>();
}

template <typename T>
Eigen::MatrixXd average_residual(const BaseModel<T>& base, const SplitSpec& split, Target target) {
  split.validate();
  if (split.n_layers != static_cast<Index>(base.layers.size())) {
    throw ConfigError("split is for " + std::to_string(split.n_layers) + " layers, model has " +
                      std::to_string(base.layers.size()));
  }
  std::vector<Eigen::MatrixXd> removed;
  for (Index l : split.removed) removed.push_back(to_eigen(base.layers[static_cast<std::size_t>(l)].target(target)));
  return average_residual(removed, to_eigen(base.layers[static_cast<std::size_t>(split.recurrent)].target(target)));
}

SymmetricEigen jacobi_eigen(const Eigen::MatrixXd& input, double tol, int max_sweeps) {
  if (input.rows() != input.cols()) throw DimensionError("jacobi_eigen: matrix is not square");
  const Index n = input.rows();
  Eigen::MatrixXd a = 0.5 * (input + input.transpose());
  Eigen::MatrixXd v = Eigen::MatrixXd::Identity(n, n);
  const double scale = std::max(a.norm(), std::numeric_limits<double>::min());
  int sweep = 0;
  for (; sweep < max_sweeps; ++sweep) {
    double off = 0.0;
    for (Index p = 0; p < n; ++p) {
      for (Index q = p + 1; q < n; ++q) off += a(p, q) * a(p, q);
    }
    if (std::sqrt(off) <= tol * scale) break;
    for (Index p = 0; p < n; ++p) {
      for (Index q = p + 1; q < n; ++q) {
        const double apq = a(p, q);
        if (apq == 0.0) continue;
        const double theta = (a(q, q) - a(p, p)) / (2.0 * apq);
        const double t = (theta >= 0.0 ? 1.0 : -1.0) / (std::abs(theta) + std::sqrt(theta * theta + 1.0));
        const double c = 1.0 / std::sqrt(t * t + 1.0);
        const double s = t * c;
        for (Index k = 0; k < n; ++k) {
          const double akp = a(k, p), akq = a(k, q);
          a(k, p) = c * akp - s * akq;
          a(k, q) = s * akp + c * akq;
        }
        for (Index k = 0; k < n; ++k) {
          const double apk = a(p, k), aqk = a(q, k);
          a(p, k) = c * apk - s * aqk;
          a(q, k) = s * apk + c * aqk;
        }
        for (Index k = 0; k < n; ++k) {
          const double vkp = v(k, p), vkq = v(k, q);
          v(k, p) = c * vkp - s * vkq;
          v(k, q) = s * vkp + c * vkq;
        }
      }
    }
  }
  std::vector<Index> order(static_cast<std::size_t>(n));
  std::iota(order.begin(), order.end(), Index{0});
  std::stable_sort(order.begin(), order.end(), [&](Index i, Index j) { return a(i, i) > a(j, j); });
  SymmetricEigen out;
  out.values.resize(n);
  out.vectors.resize(n, n);
  for (Index i = 0; i < n; ++i) {
    out.values[i] = a(order[static_cast<std::size_t>(i)], order[static_cast<std::size_t>(i)]);
    out.vectors.col(i) = v.col(order[static_cast<std::size_t>(i)]);
  }
  out.sweeps = sweep;
  return out;
}

namespace {

// Completes `basis` columns [filled, r) with unit vectors orthogonal to all
// earlier columns (Gram–Schmidt over the standard basis).
void complete_orthonormal(Eigen::MatrixXd& basis, Index filled) {
  const Index m = basis.rows();
  Index next = 0;
  for (Index c = filled; c < basis.cols(); ++c) {
    for (; next < m; ++next) {
      Eigen::VectorXd e = Eigen::VectorXd::Unit(m, next);
      for (int pass = 0; pass < 2; ++pass) {
        for (Index j = 0; j < c; ++j) e -= basis.col(j).dot(e) * basis.col(j);
      }
      if (e.norm() > 1e-6) {
        basis.col(c) = e.normalized();
        ++next;
        break;
      }
    }
  }
}

}  // namespace

TruncatedSvd truncated_svd(const Eigen::MatrixXd& m, Index r) {
  const Index rows = m.rows(), cols = m.cols();
  const Index small = std::min(rows, cols);
  if (r < 1 || r > small) {
    throw ConfigError("truncated_svd: rank " + std::to_string(r) + " outside [1, " + std::to_string(small) + "]");
  }
  // Eigenvectors of the smaller Gram matrix give one side; the other side is
  // recovered as M·x / σ.
  const bool tall = rows >= cols;
  const Eigen::MatrixXd gram = tall ? Eigen::MatrixXd(m.transpose() * m) : Eigen::MatrixXd(m * m.transpose());
  const SymmetricEigen eig = jacobi_eigen(gram);

  TruncatedSvd out;
  out.s.resize(r);
  Eigen::MatrixXd near = eig.vectors.leftCols(r);  // v when tall, u otherwise
  Eigen::MatrixXd far = Eigen::MatrixXd::Zero(tall ? rows : cols, r);
  // Below this the Gram route cannot resolve σ; such directions are treated
  // as exact zeros.
  const double cutoff = std::max(eig.values[0], 0.0) * 1e-14;
  Index filled = 0;
  for (Index i = 0; i < r; ++i) {
    const double lambda = eig.values[i];
    if (!(lambda > cutoff) || filled != i) {
      out.s[i] = 0.0;
      continue;
    }
    out.s[i] = std::sqrt(lambda);
    Eigen::VectorXd x = tall ? Eigen::VectorXd(m * near.col(i)) : Eigen::VectorXd(m.transpose() * near.col(i));
    x /= out.s[i];
    for (int pass = 0; pass < 2; ++pass) {
      for (Index j = 0; j < i; ++j) x -= far.col(j).dot(x) * far.col(j);
    }
    far.col(i) = x.normalized();
    ++filled;
  }
  complete_orthonormal(far, filled);
  out.v = tall ? near : far;
  out.u = tall ? far : near;

  for (Index i = 0; i < r; ++i) {
    const Eigen::VectorXd col = out.v.col(i);
    const double tiny = 1e-12 * std::max(col.cwiseAbs().maxCoeff(), 1e-300);
    for (Index j = 0; j < col.size(); ++j) {
      if (std::abs(col[j]) > tiny) {
        if (col[j] < 0.0) {
          out.v.col(i) *= -1.0;
          out.u.col(i) *= -1.0;
        }
        break;
      }
    }
  }
  return out;
}

template <typename T>
NamedTensors<T> LoraBasisSet<T>::named() const {
  NamedTensors<T> out;
  for (Target t : kAllTargets) {
    const std::string base = "lora." + std::string(target_name(t)) + ".";
    out.push_back({base + "A", a_of(t)});
    out.push_back({base + "B", b_of(t)});
  }
  return out;
}

template <typename T>
LoraBasisSet<T> empty_bases(const ModelConfig& cfg, Index rank, double alpha) {
  if (rank < 1) throw ConfigError("LoRA rank must be at least 1");
  if (!(alpha > 0.0)) throw ConfigError("LoRA alpha must be positive");
  LoraBasisSet<T> set;
  set.rank = rank;
  set.alpha = alpha;
  for (Target t : kAllTargets) {
    const auto [out_dim, in_dim] = target_shape(cfg, t);
    const auto i = static_cast<std::size_t>(t);
    set.a[i] = Tensor<T>({rank, in_dim});
    set.b[i] = Tensor<T>({out_dim, rank});
    set.effective_rank[i] = std::min({rank, out_dim, in_dim});
  }
  return set;
}

template <typename T>
LoraBasisSet<T> build_bases(const BaseModel<T>& base, const SplitSpec& split, Index rank, double alpha) {
  LoraBasisSet<T> set = empty_bases<T>(base.config, rank, alpha);
  for (Target t : kAllTargets) {
    const auto i = static_cast<std::size_t>(t);
    const Eigen::MatrixXd delta = average_residual(base, split, t);
    const Index r_eff = set.effective_rank[i];
    const TruncatedSvd svd = truncated_svd(delta, r_eff);
    Eigen::MatrixXd a = Eigen::MatrixXd::Zero(rank, delta.cols());
    Eigen::MatrixXd b = Eigen::MatrixXd::Zero(delta.rows(), rank);
    a.topRows(r_eff) = svd.v.transpose();
    b.leftCols(r_eff) = svd.u * svd.s.asDiagonal();
    MatMap<T>(set.a[i].mutable_value().data(), rank, delta.cols()) = a.cast<T>();
    MatMap<T>(set.b[i].mutable_value().data(), delta.rows(), rank) = b.cast<T>();
    const double total = delta.norm();
    set.relative_tail[i] = total > 0.0 ? (delta - b * a).norm() / total : 0.0;
  }
  return set;
}

template <typename T>
std::string surgery_manifest(const SplitSpec& split, const LoraBasisSet<T>& bases) {
  std::ostringstream os;
  os << "layers\t" << split.n_layers << "\n";
  os << "prelude\t" << split.prelude << "\n";
  os << "recurrent\t" << split.recurrent << "\n";
  os << "coda\t" << split.coda << "\n";
  os << "removed\t";
  for (std::size_t i = 0; i < split.removed.size(); ++i) os << (i ? "," : "") << split.removed[i];
  os << "\n";
  os << "retained\t" << split.retained() << "\n";
  os << "rank\t" << bases.rank << "\n";
  os << "alpha\t" << bases.alpha << "\n";
  os << "scaling\t" << bases.scaling() << "\n";
  os << "target\teffective_rank\trelative_tail_energy\n";
  os << std::setprecision(10);
  for (Target t : kAllTargets) {
    const auto i = static_cast<std::size_t>(t);
    os << target_name(t) << "\t" << bases.effective_rank[i] << "\t" << bases.relative_tail[i] << "\n";
  }
  return os.str();
}

#define OURO_INSTANTIATE_SURGERY(T)                                                           \
  template Eigen::MatrixXd to_eigen(const Tensor<T>&);                                        \
  template Eigen::MatrixXd average_residual(const BaseModel<T>&, const SplitSpec&, Target);   \
  template struct LoraBasisSet<T>;                                                            \
  template LoraBasisSet<T> empty_bases<T>(const ModelConfig&, Index, double);                 \
  template LoraBasisSet<T> build_bases(const BaseModel<T>&, const SplitSpec&, Index, double); \
  template std::string surgery_manifest(const SplitSpec&, const LoraBasisSet<T>&);

OURO_INSTANTIATE_SURGERY(float)
OURO_INSTANTIATE_SURGERY(double)

}  // namespace ouro
