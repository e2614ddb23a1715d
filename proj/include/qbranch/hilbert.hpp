#pragma once

// Finite-dimensional complex Hilbert-space kernel: state vectors with explicit
// tensor-factor structure, dense operators with validated kind flags, projector
// families (resolutions of the identity), Kronecker products, and unitary time
// evolution e^{-iHt} via eigendecomposition.
//
// Conventions, fixed project-wide:
//   * Kronecker ordering is left-slow: (a (x) b)[i*dim_b + j] = a[i]*b[j].
//   * inner(a, b) is conjugate-linear in the FIRST argument.
//   * Heisenberg projectors are P(t) = U(-t) P U(t) with U(t) = e^{-iHt}.

#include <Eigen/Dense>
#include <unsupported/Eigen/KroneckerProduct>

#include <algorithm>
#include <array>
#include <cmath>
#include <complex>
#include <memory>
#include <numeric>
#include <string>
#include <utility>
#include <vector>

#include "qbranch/common.hpp"

namespace qbranch {

// ---------------------------------------------------------------------------
// StateVector
// ---------------------------------------------------------------------------

/// Complex amplitude vector over a finite-dimensional Hilbert space together
/// with its tensor-factor structure. The coefficient count always equals the
/// product of factor_dims; violating that is a structure error at construction.
template <typename Scalar = double>
struct StateVector {
  using Complex = std::complex<Scalar>;
  using VectorType = ComplexVector<Scalar>;

  VectorType amplitudes;
  std::vector<Index> factor_dims;

  StateVector() = default;

  StateVector(VectorType amps, std::vector<Index> dims)
      : amplitudes(std::move(amps)), factor_dims(std::move(dims)) {
    Index prod = 1;
    for (Index d : factor_dims) {
      if (d <= 0) throw StructureError("factor dimensions must be positive");
      prod *= d;
    }
    if (prod != amplitudes.size())
      throw StructureError("amplitude count " + std::to_string(amplitudes.size()) +
                           " does not match factor product " + std::to_string(prod));
  }

  /// Single-factor state.
  explicit StateVector(VectorType amps) : amplitudes(std::move(amps)) {
    if (amplitudes.size() == 0) throw StructureError("empty state vector");
    factor_dims = {amplitudes.size()};
  }

  Index dim() const { return amplitudes.size(); }
  Index factor_count() const { return static_cast<Index>(factor_dims.size()); }

  Scalar squared_norm() const { return amplitudes.squaredNorm(); }
  Scalar norm() const { return amplitudes.norm(); }

  bool is_normalized(Scalar tol = Scalar(1e-12)) const {
    return std::abs(squared_norm() - Scalar(1)) < tol;
  }

  /// Unit-norm copy. Throws on (numerically) zero vectors.
  StateVector normalized() const {
    Scalar n = norm();
    if (n <= Scalar(0) || !std::isfinite(static_cast<double>(n)))
      throw ContractError("cannot normalize a zero or non-finite state");
    StateVector out = *this;
    out.amplitudes /= n;
    return out;
  }
};

using StateVectorXd = StateVector<double>;

namespace detail {

inline StructureError bad_dims(const char* what) { return StructureError(what); }

}  // namespace detail

/// Strides of a left-slow mixed-radix index: flat = sum_f digit_f * stride_f.
inline std::vector<Index> factor_strides(const std::vector<Index>& dims) {
  std::vector<Index> s(dims.size(), 1);
  for (Index f = static_cast<Index>(dims.size()) - 2; f >= 0; --f)
    s[f] = s[f + 1] * dims[f + 1];
  return s;
}

/// Computational basis state e_flat over the given factor structure.
template <typename Scalar = double>
StateVector<Scalar> basis_state(std::vector<Index> dims, Index flat) {
  Index prod = 1;
  for (Index d : dims) prod *= d;
  if (flat < 0 || flat >= prod) throw StructureError("basis index out of range");
  typename StateVector<Scalar>::VectorType v =
      StateVector<Scalar>::VectorType::Zero(prod);
  v[flat] = std::complex<Scalar>(1, 0);
  return StateVector<Scalar>(std::move(v), std::move(dims));
}

// ---------------------------------------------------------------------------
// Operator
// ---------------------------------------------------------------------------

/// Claimed structural properties of an operator. Claims are validated by the
/// factories and re-validated by any operation whose contract depends on them;
/// they are never trusted blindly.
enum OperatorKind : unsigned {
  kNone = 0,
  kHermitian = 1u << 0,
  kUnitary = 1u << 1,
  kProjector = 1u << 2,
};

/// Dense complex square matrix acting on one Hilbert space.
template <typename Scalar = double>
struct Operator {
  using Complex = std::complex<Scalar>;
  using MatrixType = ComplexMatrix<Scalar>;

  MatrixType entries;
  unsigned kind = kNone;

  Operator() = default;
  explicit Operator(MatrixType m, unsigned kind_flags = kNone)
      : entries(std::move(m)), kind(kind_flags) {
    if (entries.rows() != entries.cols())
      throw StructureError("operator matrix must be square");
  }

  Index dim() const { return entries.rows(); }

  static Operator identity(Index d) {
    return Operator(MatrixType::Identity(d, d), kHermitian | kUnitary | kProjector);
  }

  Operator adjoint() const { return Operator(entries.adjoint(), kind); }
};

using OperatorXd = Operator<double>;

/// max_ij |(M - M^+)_ij|
template <typename Scalar>
Scalar hermiticity_defect(const ComplexMatrix<Scalar>& m) {
  return (m - m.adjoint()).cwiseAbs().maxCoeff();
}

/// max_ij |(M^+ M - I)_ij|
template <typename Scalar>
Scalar unitarity_defect(const ComplexMatrix<Scalar>& m) {
  ComplexMatrix<Scalar> g = m.adjoint() * m;
  g.diagonal().array() -= std::complex<Scalar>(1, 0);
  return g.cwiseAbs().maxCoeff();
}

/// max(||P^2 - P||_max, ||P - P^+||_max)
template <typename Scalar>
Scalar projector_defect(const ComplexMatrix<Scalar>& m) {
  Scalar idem = (m * m - m).cwiseAbs().maxCoeff();
  return std::max(idem, hermiticity_defect(m));
}

template <typename Scalar>
Operator<Scalar> make_hermitian(ComplexMatrix<Scalar> m,
                                Scalar tol = Scalar(Defaults::validation_tol)) {
  if (hermiticity_defect<Scalar>(m) >= tol)
    throw ContractError("matrix is not hermitian within tolerance");
  return Operator<Scalar>(std::move(m), kHermitian);
}

template <typename Scalar>
Operator<Scalar> make_unitary(ComplexMatrix<Scalar> m,
                              Scalar tol = Scalar(Defaults::validation_tol)) {
  if (unitarity_defect<Scalar>(m) >= tol)
    throw ContractError("matrix is not unitary within tolerance");
  return Operator<Scalar>(std::move(m), kUnitary);
}

template <typename Scalar>
Operator<Scalar> make_projector(ComplexMatrix<Scalar> m,
                                Scalar tol = Scalar(Defaults::validation_tol)) {
  if (projector_defect<Scalar>(m) >= tol)
    throw ContractError("matrix is not an orthogonal projector within tolerance");
  return Operator<Scalar>(std::move(m), kProjector | kHermitian);
}

/// Rank-1 projector |v><v| / <v|v>.
template <typename Scalar>
Operator<Scalar> rank1_projector(const ComplexVector<Scalar>& v) {
  Scalar n2 = v.squaredNorm();
  if (n2 <= Scalar(0)) throw ContractError("cannot project onto the zero vector");
  ComplexMatrix<Scalar> m = (v * v.adjoint()) / n2;
  return Operator<Scalar>(std::move(m), kProjector | kHermitian);
}

// ---------------------------------------------------------------------------
// Projector families
// ---------------------------------------------------------------------------

/// Opaque cell identifier, optionally carrying the parameter-space interval(s)
/// the cell covers (position windows, spin sectors, ...).
struct CellLabel {
  std::string name;
  std::vector<std::array<double, 2>> extent;  // optional

  CellLabel() = default;
  CellLabel(std::string n) : name(std::move(n)) {}  // NOLINT: implicit by design
  CellLabel(std::string n, double lo, double hi) : name(std::move(n)) {
    extent.push_back({lo, hi});
  }
};

template <typename Scalar = double>
struct ProjectorCell {
  CellLabel label;
  Operator<Scalar> projector;
};

/// A labeled orthogonal decomposition of the identity. Label uniqueness and
/// dimension agreement are structural (checked at construction); orthogonality
/// and completeness are numerical properties reported by validate_family.
template <typename Scalar = double>
class ProjectorFamily {
 public:
  ProjectorFamily() = default;

  explicit ProjectorFamily(std::vector<ProjectorCell<Scalar>> cells)
      : cells_(std::move(cells)) {
    if (cells_.empty()) throw StructureError("projector family needs at least one cell");
    dim_ = cells_.front().projector.dim();
    for (const auto& c : cells_) {
      if (c.projector.dim() != dim_)
        throw StructureError("projector family cells have mixed dimensions");
      for (const auto& o : cells_)
        if (&o != &c && o.label.name == c.label.name)
          throw StructureError("duplicate cell label '" + c.label.name + "'");
    }
  }

  Index dim() const { return dim_; }
  Index size() const { return static_cast<Index>(cells_.size()); }
  const std::vector<ProjectorCell<Scalar>>& cells() const { return cells_; }
  const ProjectorCell<Scalar>& cell(Index i) const { return cells_.at(i); }

  /// Index of the cell with the given label name; LookupError if absent.
  Index find(const std::string& name) const {
    for (Index i = 0; i < size(); ++i)
      if (cells_[i].label.name == name) return i;
    throw LookupError("no cell labeled '" + name + "'");
  }

 private:
  std::vector<ProjectorCell<Scalar>> cells_;
  Index dim_ = 0;
};

using ProjectorFamilyXd = ProjectorFamily<double>;

struct FamilyValidation {
  double orthogonality_defect = 0;  // max ||P_a P_b||_max, a != b
  double completeness_defect = 0;   // ||sum_a P_a - I||_max
  double projector_defect = 0;      // worst per-cell projector defect (informational)
  double tol = Defaults::validation_tol;
  bool passed = false;
};

/// Reports orthogonality and completeness defects; passes iff both are below
/// tol. Never throws.
template <typename Scalar>
FamilyValidation validate_family(const ProjectorFamily<Scalar>& f,
                                 Scalar tol = Scalar(Defaults::validation_tol)) {
  FamilyValidation r;
  r.tol = static_cast<double>(tol);
  ComplexMatrix<Scalar> sum = ComplexMatrix<Scalar>::Zero(f.dim(), f.dim());
  for (Index a = 0; a < f.size(); ++a) {
    const auto& pa = f.cell(a).projector.entries;
    sum += pa;
    r.projector_defect =
        std::max(r.projector_defect, static_cast<double>(projector_defect<Scalar>(pa)));
    for (Index b = a + 1; b < f.size(); ++b) {
      const auto& pb = f.cell(b).projector.entries;
      double d = static_cast<double>((pa * pb).cwiseAbs().maxCoeff());
      r.orthogonality_defect = std::max(r.orthogonality_defect, d);
    }
  }
  sum.diagonal().array() -= std::complex<Scalar>(1, 0);
  r.completeness_defect = static_cast<double>(sum.cwiseAbs().maxCoeff());
  r.passed = r.orthogonality_defect < r.tol && r.completeness_defect < r.tol;
  return r;
}

// ---------------------------------------------------------------------------
// Tensor products
// ---------------------------------------------------------------------------

template <typename Scalar>
StateVector<Scalar> tensor(const StateVector<Scalar>& a, const StateVector<Scalar>& b,
                           Index max_amplitudes = Defaults::max_tensor_amplitudes) {
  if (a.dim() == 0 || b.dim() == 0) throw StructureError("tensor of empty state");
  if (a.dim() > max_amplitudes / b.dim())
    throw SizeLimitError("tensor product would exceed " +
                         std::to_string(max_amplitudes) + " amplitudes");
  StateVector<Scalar> out;
  out.amplitudes = Eigen::kroneckerProduct(a.amplitudes, b.amplitudes);
  out.factor_dims = a.factor_dims;
  out.factor_dims.insert(out.factor_dims.end(), b.factor_dims.begin(),
                         b.factor_dims.end());
  return out;
}

/// Operator Kronecker product. Kind flags survive only where the property
/// survives the product (all three do).
template <typename Scalar>
Operator<Scalar> tensor(const Operator<Scalar>& a, const Operator<Scalar>& b,
                        Index max_amplitudes = Defaults::max_tensor_amplitudes) {
  Index d = a.dim() * b.dim();
  if (a.dim() > 0 && d > 0 && d > max_amplitudes / d)
    throw SizeLimitError("operator tensor product entry count would exceed " +
                         std::to_string(max_amplitudes));
  Operator<Scalar> out(Eigen::kroneckerProduct(a.entries, b.entries).eval(),
                       a.kind & b.kind);
  return out;
}

// ---------------------------------------------------------------------------
// Inner product and local operator application
// ---------------------------------------------------------------------------

/// <a|b>, conjugate-linear in the first argument.
template <typename Scalar>
std::complex<Scalar> inner(const StateVector<Scalar>& a, const StateVector<Scalar>& b) {
  if (a.dim() != b.dim()) throw DimensionError("inner product dimension mismatch");
  return a.amplitudes.dot(b.amplitudes);
}

/// Apply `op` to the listed tensor factors of `s` (identity elsewhere).
/// The order of `targets` defines the factor ordering of op's own index,
/// left slow. Targets need not be adjacent and may be in any order.
template <typename Scalar>
void apply_to_factors_in_place(const Operator<Scalar>& op,
                               typename StateVector<Scalar>::VectorType& amps,
                               const std::vector<Index>& dims,
                               const std::vector<Index>& targets) {
  const std::vector<Index> strides = factor_strides(dims);
  Index t_dim = 1;
  std::vector<char> is_target(dims.size(), 0);
  for (Index f : targets) {
    if (f < 0 || f >= static_cast<Index>(dims.size()))
      throw StructureError("target factor index out of range");
    if (is_target[f]) throw StructureError("duplicate target factor");
    is_target[f] = 1;
    t_dim *= dims[f];
  }
  if (t_dim != op.dim())
    throw DimensionError("operator dimension does not match target factors");

  // Flat offsets of the op's basis within the full index, left slow in targets.
  std::vector<Index> t_offsets(t_dim, 0);
  {
    Index reps = 1;
    for (auto it = targets.rbegin(); it != targets.rend(); ++it) {
      Index f = *it, d = dims[f], block = reps * d;
      for (Index i = 0; i < t_dim; ++i)
        t_offsets[i] += ((i / reps) % d) * strides[f];
      reps = block;
    }
  }

  std::vector<Index> rest;  // non-target factors
  for (Index f = 0; f < static_cast<Index>(dims.size()); ++f)
    if (!is_target[f]) rest.push_back(f);
  Index r_count = 1;
  for (Index f : rest) r_count *= dims[f];

  ComplexVector<Scalar> x(t_dim), y(t_dim);
  std::vector<Index> digit(rest.size(), 0);
  Index base = 0;
  for (Index r = 0; r < r_count; ++r) {
    for (Index i = 0; i < t_dim; ++i) x[i] = amps[base + t_offsets[i]];
    y.noalias() = op.entries * x;
    for (Index i = 0; i < t_dim; ++i) amps[base + t_offsets[i]] = y[i];
    // increment mixed-radix counter over the rest factors (rightmost fastest)
    for (Index j = static_cast<Index>(rest.size()) - 1; j >= 0; --j) {
      Index f = rest[j];
      base += strides[f];
      if (++digit[j] < dims[f]) break;
      base -= digit[j] * strides[f];
      digit[j] = 0;
    }
  }
}

template <typename Scalar>
StateVector<Scalar> apply_to_factors(const Operator<Scalar>& op,
                                     const StateVector<Scalar>& s,
                                     const std::vector<Index>& targets) {
  StateVector<Scalar> out = s;
  apply_to_factors_in_place(op, out.amplitudes, out.factor_dims, targets);
  return out;
}

// ---------------------------------------------------------------------------
// Unitary time evolution
// ---------------------------------------------------------------------------

/// e^{-iHt}|state>, H hermitian (validated, ContractError otherwise).
/// Computed by eigendecomposition, so the result is unitary by construction.
template <typename Scalar>
StateVector<Scalar> evolve(const StateVector<Scalar>& state, const Operator<Scalar>& H,
                           Scalar t, Scalar tol = Scalar(Defaults::validation_tol)) {
  if (H.dim() != state.dim()) throw DimensionError("evolve: dimension mismatch");
  if (hermiticity_defect<Scalar>(H.entries) >= tol)
    throw ContractError("evolve requires a hermitian Hamiltonian");
  Eigen::SelfAdjointEigenSolver<ComplexMatrix<Scalar>> es(H.entries);
  if (es.info() != Eigen::Success)
    throw Error("eigendecomposition failed in evolve");
  ComplexVector<Scalar> coeffs = es.eigenvectors().adjoint() * state.amplitudes;
  for (Index j = 0; j < coeffs.size(); ++j) {
    Scalar phase = -es.eigenvalues()[j] * t;
    coeffs[j] *= std::complex<Scalar>(std::cos(phase), std::sin(phase));
  }
  StateVector<Scalar> out = state;
  out.amplitudes = es.eigenvectors() * coeffs;
  return out;
}

/// A family of unitaries U(t_from -> t_to) implementing e^{-iH(t_to-t_from)}
/// (or its time-dependent generalization). Propagating with t_to < t_from
/// applies the inverse. Implementations must compose exactly:
/// U(a->c) = U(b->c) U(a->b) up to roundoff.
template <typename Scalar = double>
class Propagator {
 public:
  virtual ~Propagator() = default;
  virtual Index dim() const = 0;
  virtual void propagate(Scalar t_from, Scalar t_to,
                         ComplexVector<Scalar>& v) const = 0;
};

using PropagatorXd = Propagator<double>;

/// Exact propagator for a time-independent hermitian H, via one
/// eigendecomposition at construction.
template <typename Scalar = double>
class EigenbasisPropagator final : public Propagator<Scalar> {
 public:
  EigenbasisPropagator(ComplexMatrix<Scalar> basis, Eigen::VectorXd eigenvalues)
      : basis_(std::move(basis)), eigenvalues_(std::move(eigenvalues)) {}

  explicit EigenbasisPropagator(const Operator<Scalar>& H,
                                Scalar tol = Scalar(Defaults::validation_tol)) {
    if (hermiticity_defect<Scalar>(H.entries) >= tol)
      throw ContractError("propagator requires a hermitian Hamiltonian");
    Eigen::SelfAdjointEigenSolver<ComplexMatrix<Scalar>> es(H.entries);
    if (es.info() != Eigen::Success)
      throw Error("eigendecomposition failed for propagator");
    basis_ = es.eigenvectors();
    eigenvalues_ = es.eigenvalues().template cast<double>();
  }

  Index dim() const override { return basis_.rows(); }

  void propagate(Scalar t_from, Scalar t_to, ComplexVector<Scalar>& v) const override {
    const Scalar dt = t_to - t_from;
    ComplexVector<Scalar> c = basis_.adjoint() * v;
    for (Index j = 0; j < c.size(); ++j) {
      Scalar phase = -static_cast<Scalar>(eigenvalues_[j]) * dt;
      c[j] *= std::complex<Scalar>(std::cos(phase), std::sin(phase));
    }
    v.noalias() = basis_ * c;
  }

 private:
  ComplexMatrix<Scalar> basis_;
  Eigen::VectorXd eigenvalues_;
};

/// Propagator generated by repeated application of one fixed unitary per unit
/// time. Only integer time differences are meaningful; anything else is a
/// contract violation.
template <typename Scalar = double>
class StepUnitaryPropagator final : public Propagator<Scalar> {
 public:
  explicit StepUnitaryPropagator(Operator<Scalar> step,
                                 Scalar tol = Scalar(Defaults::validation_tol))
      : step_(std::move(step)) {
    if (unitarity_defect<Scalar>(step_.entries) >= tol)
      throw ContractError("step propagator requires a unitary step");
    adjoint_ = step_.entries.adjoint();
  }

  Index dim() const override { return step_.dim(); }

  void propagate(Scalar t_from, Scalar t_to, ComplexVector<Scalar>& v) const override {
    const Scalar dt = t_to - t_from;
    const long long n = std::llround(static_cast<double>(dt));
    if (std::abs(static_cast<double>(dt) - static_cast<double>(n)) > 1e-9)
      throw ContractError("step propagator only evaluates integer time offsets");
    if (n >= 0)
      for (long long k = 0; k < n; ++k) v = step_.entries * v;
    else
      for (long long k = 0; k < -n; ++k) v = adjoint_ * v;
  }

 private:
  Operator<Scalar> step_;
  ComplexMatrix<Scalar> adjoint_;
};

/// Materialize U(0 -> t) column by column. Guarded by max_dim since this is
/// O(dim^2) memory and dim applications.
template <typename Scalar>
ComplexMatrix<Scalar> materialize_unitary(const Propagator<Scalar>& prop, Scalar t,
                                          Index max_dim = Defaults::max_dense_dim) {
  const Index d = prop.dim();
  if (d > max_dim)
    throw SizeLimitError("dense materialization above the configured cap");
  ComplexMatrix<Scalar> u(d, d);
  ComplexVector<Scalar> col(d);
  for (Index j = 0; j < d; ++j) {
    col.setZero();
    col[j] = std::complex<Scalar>(1, 0);
    prop.propagate(Scalar(0), t, col);
    u.col(j) = col;
  }
  return u;
}

}  // namespace qbranch
