#pragma once

#include <Eigen/Dense>

#include <array>
#include <string>
#include <vector>

#include "ouro/transformer.hpp"

namespace ouro {

// Prelude = [0, prelude), coda = [n_layers − coda, n_layers), one recurrent
// layer in between; every other middle layer is removed.
struct SplitSpec {
  Index n_layers = 0;
  Index prelude = 0;
  Index recurrent = 0;
  Index coda = 0;
  std::vector<Index> removed;

  static SplitSpec make(Index n_layers, Index prelude, Index recurrent, Index coda);

  // Throws ConfigError if the partition is not exact.
  void validate() const;

  // Layers kept by the converted model (prelude + recurrent + coda).
  Index retained() const { return prelude + 1 + coda; }
};

// Mean of (W_l − W_R) over the removed layers.
Eigen::MatrixXd average_residual(const std::vector<Eigen::MatrixXd>& removed, const Eigen::MatrixXd& recurrent);

template <typename T>
Eigen::MatrixXd average_residual(const BaseModel<T>& base, const SplitSpec& split, Target target);

struct SymmetricEigen {
  Eigen::VectorXd values;   // descending
  Eigen::MatrixXd vectors;  // column i pairs with values[i]
  int sweeps = 0;
};

// Cyclic Jacobi rotations on a symmetric matrix. Equal eigenvalues keep the
// order in which the rotations left them.
SymmetricEigen jacobi_eigen(const Eigen::MatrixXd& a, double tol = 1e-15, int max_sweeps = 100);

struct TruncatedSvd {
  Eigen::MatrixXd u;  // [m, r], orthonormal columns
  Eigen::VectorXd s;  // [r], descending, non-negative
  Eigen::MatrixXd v;  // [n, r], orthonormal columns
};

// Top-r singular triplets from the eigendecomposition of the smaller Gram
// matrix. Each v column is sign-flipped so its first non-negligible entry is
// positive (u flipped with it), which makes the result reproducible.
TruncatedSvd truncated_svd(const Eigen::MatrixXd& m, Index r);

// Frozen low-rank factors for the seven projections of the recurrent layer.
// Every A is stored as [rank, in] and every B as [out, rank]; a target whose
// matrix cannot support the nominal rank gets zero rows/columns past its
// effective rank.
template <typename T>
struct LoraBasisSet {
  Index rank = 0;
  double alpha = 0.0;
  std::array<Tensor<T>, kNumTargets> a;
  std::array<Tensor<T>, kNumTargets> b;
  std::array<Index, kNumTargets> effective_rank{};
  // ‖Δ̄ − B·A‖_F / ‖Δ̄‖_F per target (0 when Δ̄ = 0).
  std::array<double, kNumTargets> relative_tail{};

  double scaling() const { return alpha / static_cast<double>(rank); }
  const Tensor<T>& a_of(Target t) const { return a[static_cast<std::size_t>(t)]; }
  const Tensor<T>& b_of(Target t) const { return b[static_cast<std::size_t>(t)]; }
  NamedTensors<T> named() const;
};

template <typename T>
LoraBasisSet<T> build_bases(const BaseModel<T>& base, const SplitSpec& split, Index rank, double alpha);

// Empty bases with the right shapes, to be filled from a checkpoint.
template <typename T>
LoraBasisSet<T> empty_bases(const ModelConfig& cfg, Index rank, double alpha);

template <typename T>
Eigen::MatrixXd to_eigen(const Tensor<T>& m);

// Plain-text manifest: split, per-target effective rank and relative tail energy.
template <typename T>
std::string surgery_manifest(const SplitSpec& split, const LoraBasisSet<T>& bases);

}  // namespace ouro
