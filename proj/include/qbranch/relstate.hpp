#pragma once

// Relative states and the biorthogonal (Schmidt) decomposition across a
// two-block split of a tensor-factored state.

#include <Eigen/Dense>
#include <Eigen/SVD>

#include <cmath>
#include <complex>
#include <optional>
#include <vector>

#include "qbranch/common.hpp"
#include "qbranch/hilbert.hpp"

namespace qbranch {

enum class Side { Left, Right };

template <typename Scalar = double>
struct SchmidtDecomposition {
  std::vector<Scalar> coefficients;               // non-negative, descending
  std::vector<StateVector<Scalar>> left_basis;    // orthonormal
  std::vector<StateVector<Scalar>> right_basis;   // orthonormal
  /// False when two coefficients coincide within the degeneracy tolerance;
  /// the bases of a degenerate block are then an arbitrary orthonormal choice.
  bool unique = true;
};

namespace detail {

template <typename Scalar>
struct BlockShape {
  Index dim_left = 1, dim_right = 1;
  std::vector<Index> dims_left, dims_right;
};

template <typename Scalar>
BlockShape<Scalar> split_shape(const StateVector<Scalar>& psi, Index split) {
  if (psi.factor_count() < 2)
    throw StructureError("state has a single tensor factor; nothing to split");
  if (split <= 0 || split >= psi.factor_count())
    throw StructureError("split boundary must lie strictly inside the factor list");
  BlockShape<Scalar> s;
  for (Index f = 0; f < split; ++f) {
    s.dim_left *= psi.factor_dims[f];
    s.dims_left.push_back(psi.factor_dims[f]);
  }
  for (Index f = split; f < psi.factor_count(); ++f) {
    s.dim_right *= psi.factor_dims[f];
    s.dims_right.push_back(psi.factor_dims[f]);
  }
  return s;
}

// Amplitudes as the dim_left x dim_right coefficient matrix (left index slow).
template <typename Scalar>
ComplexMatrix<Scalar> coefficient_matrix(const StateVector<Scalar>& psi,
                                         const BlockShape<Scalar>& s) {
  using RowMajorMap = Eigen::Map<const Eigen::Matrix<std::complex<Scalar>, Eigen::Dynamic,
                                                     Eigen::Dynamic, Eigen::RowMajor>>;
  return RowMajorMap(psi.amplitudes.data(), s.dim_left, s.dim_right);
}

template <typename Scalar>
StateVector<Scalar> from_matrix(const ComplexMatrix<Scalar>& m,
                                const StateVector<Scalar>& like) {
  using RowMajorMat = Eigen::Matrix<std::complex<Scalar>, Eigen::Dynamic, Eigen::Dynamic,
                                    Eigen::RowMajor>;
  RowMajorMat rm = m;
  typename StateVector<Scalar>::VectorType v =
      Eigen::Map<const ComplexVector<Scalar>>(rm.data(), rm.size());
  return StateVector<Scalar>(std::move(v), like.factor_dims);
}

}  // namespace detail

/// Biorthogonal decomposition of psi across the factor boundary `split`
/// (factors [0, split) to the left, the rest to the right):
///   psi = sum_k c_k |left_k> (x) |right_k>,  c_k >= 0 descending.
/// Phase convention: the first significant amplitude of each left vector is
/// rotated to be real positive, with the compensating phase on the right.
template <typename Scalar>
SchmidtDecomposition<Scalar> schmidt_decompose(const StateVector<Scalar>& psi,
                                               Index split,
                                               Scalar degeneracy_tol = Scalar(1e-10)) {
  const auto shape = detail::split_shape(psi, split);
  ComplexMatrix<Scalar> m = detail::coefficient_matrix(psi, shape);

  Eigen::BDCSVD<ComplexMatrix<Scalar>> svd(m, Eigen::ComputeThinU | Eigen::ComputeThinV);
  const auto& sv = svd.singularValues();
  if (sv.size() == 0 || sv[0] <= Scalar(0))
    throw ContractError("cannot decompose the zero state");

  const Scalar cutoff = sv[0] * Scalar(1e-12);
  SchmidtDecomposition<Scalar> out;
  for (Index k = 0; k < sv.size(); ++k) {
    if (sv[k] <= cutoff) break;
    ComplexVector<Scalar> u = svd.matrixU().col(k);
    ComplexVector<Scalar> w = svd.matrixV().col(k).conjugate();
    // fix the left phase
    for (Index i = 0; i < u.size(); ++i) {
      if (std::abs(u[i]) > Scalar(1e-12)) {
        std::complex<Scalar> ph = u[i] / std::abs(u[i]);
        u /= ph;
        w *= ph;
        break;
      }
    }
    out.coefficients.push_back(sv[k]);
    out.left_basis.emplace_back(std::move(u), shape.dims_left);
    out.right_basis.emplace_back(std::move(w), shape.dims_right);
  }
  for (size_t k = 0; k + 1 < out.coefficients.size(); ++k)
    if (out.coefficients[k] - out.coefficients[k + 1] < degeneracy_tol)
      out.unique = false;
  return out;
}

/// Normalized state of the complementary block given a (normalized) probe
/// state on `side`: the |w> in (P_probe (x) I)|Psi> = |probe> (x) |w| w>.
/// An empty optional signals "no relative state" (the projection vanished);
/// conditioning on a zero-measure probe is never a silent zero vector.
template <typename Scalar>
std::optional<StateVector<Scalar>> relative_state(const StateVector<Scalar>& psi,
                                                  const StateVector<Scalar>& probe,
                                                  Side side,
                                                  Index split,
                                                  Scalar floor = Scalar(1e-12)) {
  const auto shape = detail::split_shape(psi, split);
  const Index block_dim = side == Side::Left ? shape.dim_left : shape.dim_right;
  if (probe.dim() != block_dim)
    throw DimensionError("probe does not live in the chosen block");
  if (!probe.is_normalized(Scalar(1e-10)))
    throw ContractError("probe must be normalized");

  ComplexMatrix<Scalar> m = detail::coefficient_matrix(psi, shape);
  ComplexVector<Scalar> w;
  if (side == Side::Left)
    w = m.transpose() * probe.amplitudes.conjugate();
  else
    w = m * probe.amplitudes.conjugate();

  if (w.norm() <= floor * psi.norm()) return std::nullopt;
  w /= w.norm();
  return StateVector<Scalar>(std::move(w),
                             side == Side::Left ? shape.dims_right : shape.dims_left);
}

/// Normalized (P_delta (x) I)|Psi> (or (I (x) P_delta) for the right block):
/// the relative state given a range of values rather than a single probe.
/// Lives in the full space. Empty optional as in relative_state.
template <typename Scalar>
std::optional<StateVector<Scalar>> relative_state_ranged(
    const StateVector<Scalar>& psi, const Operator<Scalar>& p_delta, Side side,
    Index split, Scalar tol = Scalar(Defaults::validation_tol),
    Scalar floor = Scalar(1e-12)) {
  const auto shape = detail::split_shape(psi, split);
  const Index block_dim = side == Side::Left ? shape.dim_left : shape.dim_right;
  if (p_delta.dim() != block_dim)
    throw DimensionError("projector does not act on the chosen block");
  if (projector_defect<Scalar>(p_delta.entries) >= tol)
    throw ContractError("relative_state_ranged requires a validated projector");

  ComplexMatrix<Scalar> m = detail::coefficient_matrix(psi, shape);
  ComplexMatrix<Scalar> projected = side == Side::Left
                                        ? (p_delta.entries * m).eval()
                                        : (m * p_delta.entries.transpose()).eval();
  StateVector<Scalar> out = detail::from_matrix(projected, psi);
  if (out.norm() <= floor * psi.norm()) return std::nullopt;
  return out.normalized();
}

}  // namespace qbranch
