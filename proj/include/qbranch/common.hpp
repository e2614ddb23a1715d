#pragma once

#include <Eigen/Dense>

#include <complex>
#include <stdexcept>
#include <string>

namespace qbranch {

using Index = Eigen::Index;

template <typename Scalar>
using ComplexVector = Eigen::Matrix<std::complex<Scalar>, Eigen::Dynamic, 1>;
template <typename Scalar>
using ComplexMatrix = Eigen::Matrix<std::complex<Scalar>, Eigen::Dynamic, Eigen::Dynamic>;

using VectorXcd = Eigen::VectorXcd;
using MatrixXcd = Eigen::MatrixXcd;
using cxd = std::complex<double>;

/// Base class for all engine errors.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Operand dimensions do not match.
class DimensionError : public Error {
 public:
  using Error::Error;
};

/// A configured size cap (amplitude count, history count, trial count) was exceeded.
class SizeLimitError : public Error {
 public:
  using Error::Error;
};

/// A caller-side contract was violated (non-hermitian Hamiltonian,
/// non-orthogonal decomposition, inconsistent space where consistency is required).
class ContractError : public Error {
 public:
  using Error::Error;
};

/// Malformed structural input (factor bookkeeping, non-partition map, duplicate labels).
class StructureError : public Error {
 public:
  using Error::Error;
};

/// A label was not found where one was required.
class LookupError : public Error {
 public:
  using Error::Error;
};

/// An operation was invoked on an ensemble in the wrong mode.
class ModeError : public Error {
 public:
  using Error::Error;
};

/// Conditioning on an event of (numerically) zero measure.
class ConditioningError : public Error {
 public:
  using Error::Error;
};

/// A scenario configuration is invalid.
class ConfigError : public Error {
 public:
  using Error::Error;
};

/// A numerical stability bound was exceeded (e.g. norm drift per step).
class StabilityError : public Error {
 public:
  using Error::Error;
};

/// Default numerical tolerances and size caps. All are per-call overridable
/// where they matter; these are the documented engine-wide defaults.
struct Defaults {
  static constexpr double validation_tol = 1e-10;    // projector/unitary/family defects
  static constexpr double consistency_tol = 1e-8;    // decoherence functional off-diagonals
  static constexpr double branching_tol = 1e-6;      // distance from {0,1} in past/future conditionals
  static constexpr double conditioning_floor = 1e-12;  // smallest measure one may condition on
  static constexpr double weight_floor = 1e-12;      // rows below this weight are skipped in reports
  static constexpr Index max_tensor_amplitudes = Index{1} << 22;
  static constexpr int max_fresh_trials = 24;
  static constexpr int max_materialized_branches = 1 << 20;
  static constexpr Index max_histories = 4096;
  static constexpr Index max_dense_dim = 4096;
};

}  // namespace qbranch
