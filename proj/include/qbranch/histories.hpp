#pragma once

// The quantum histories formalism: Heisenberg projectors P(t) = U(-t) P U(t),
// chain operators C_alpha = P_{a_N}(t_N) ... P_{a_1}(t_1), the decoherence
// functional D(a,a') = <psi| C+_{a'} C_a |psi>, consistency and sum-rule
// checks, coarse-graining, conditional probabilities between coarse histories,
// branching-structure diagnostics, and branch trees.
//
// Chain operators are never materialized unless explicitly requested: all
// measures run through vector pipelines against the space's propagator, so
// grid-sized spaces (thousands of points) stay cheap. Cell projectors come in
// two representations: dense matrices, or 0/1 diagonal indicators in the
// computational basis (the natural form for position windows and register
// readouts).

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <complex>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <utility>
#include <variant>
#include <vector>

#include "qbranch/common.hpp"
#include "qbranch/hilbert.hpp"

namespace qbranch {

// ---------------------------------------------------------------------------
// Cell projectors and per-time families
// ---------------------------------------------------------------------------

/// A projector usable as a history cell: dense, or a diagonal 0/1 indicator.
class CellProjector {
 public:
  static CellProjector dense(OperatorXd op) { return CellProjector(std::move(op)); }

  static CellProjector indicator(Eigen::ArrayXd mask) {
    for (Index i = 0; i < mask.size(); ++i)
      if (mask[i] != 0.0 && mask[i] != 1.0)
        throw StructureError("indicator masks must be exactly 0/1");
    return CellProjector(std::move(mask));
  }

  Index dim() const {
    if (const auto* op = std::get_if<OperatorXd>(&rep_)) return op->dim();
    return std::get<Eigen::ArrayXd>(rep_).size();
  }

  bool is_indicator() const { return std::holds_alternative<Eigen::ArrayXd>(rep_); }

  const Eigen::ArrayXd& mask() const { return std::get<Eigen::ArrayXd>(rep_); }
  const OperatorXd& dense_op() const { return std::get<OperatorXd>(rep_); }

  void apply_in_place(VectorXcd& v) const {
    if (const auto* m = std::get_if<Eigen::ArrayXd>(&rep_))
      v.array() *= m->cast<cxd>();
    else
      v = std::get<OperatorXd>(rep_).entries * v;
  }

  MatrixXcd dense_matrix() const {
    if (const auto* m = std::get_if<Eigen::ArrayXd>(&rep_))
      return m->cast<cxd>().matrix().asDiagonal();
    return std::get<OperatorXd>(rep_).entries;
  }

  double projector_defect_value() const {
    if (is_indicator()) return 0.0;  // 0/1 masks are exact projectors
    return projector_defect<double>(dense_op().entries);
  }

 private:
  explicit CellProjector(OperatorXd op) : rep_(std::move(op)) {}
  explicit CellProjector(Eigen::ArrayXd mask) : rep_(std::move(mask)) {}
  std::variant<OperatorXd, Eigen::ArrayXd> rep_;
};

/// A labeled resolution of the identity at one time slice.
class CellFamily {
 public:
  CellFamily() = default;

  CellFamily(std::vector<CellLabel> labels, std::vector<CellProjector> cells)
      : labels_(std::move(labels)), cells_(std::move(cells)) {
    if (labels_.size() != cells_.size() || cells_.empty())
      throw StructureError("cell family needs matching, non-empty labels and cells");
    dim_ = cells_.front().dim();
    for (const auto& c : cells_)
      if (c.dim() != dim_) throw StructureError("cell family has mixed dimensions");
    for (size_t a = 0; a < labels_.size(); ++a)
      for (size_t b = a + 1; b < labels_.size(); ++b)
        if (labels_[a].name == labels_[b].name)
          throw StructureError("duplicate cell label '" + labels_[a].name + "'");
  }

  /// Adopt a dense projector family from the kernel.
  static CellFamily from_dense(const ProjectorFamilyXd& f) {
    std::vector<CellLabel> labels;
    std::vector<CellProjector> cells;
    for (const auto& c : f.cells()) {
      labels.push_back(c.label);
      cells.push_back(CellProjector::dense(c.projector));
    }
    return CellFamily(std::move(labels), std::move(cells));
  }

  Index dim() const { return dim_; }
  Index size() const { return static_cast<Index>(cells_.size()); }
  const CellLabel& label(Index i) const { return labels_.at(i); }
  const CellProjector& projector(Index i) const { return cells_.at(i); }

  Index find(const std::string& name) const {
    for (Index i = 0; i < size(); ++i)
      if (labels_[i].name == name) return i;
    throw LookupError("no cell labeled '" + name + "'");
  }

 private:
  std::vector<CellLabel> labels_;
  std::vector<CellProjector> cells_;
  Index dim_ = 0;
};

inline FamilyValidation validate_cell_family(const CellFamily& f,
                                             double tol = Defaults::validation_tol) {
  FamilyValidation r;
  r.tol = tol;
  bool all_indicator = true;
  for (Index i = 0; i < f.size(); ++i) all_indicator &= f.projector(i).is_indicator();

  if (all_indicator) {
    Eigen::ArrayXd sum = Eigen::ArrayXd::Zero(f.dim());
    for (Index a = 0; a < f.size(); ++a) {
      sum += f.projector(a).mask();
      for (Index b = a + 1; b < f.size(); ++b) {
        double d = (f.projector(a).mask() * f.projector(b).mask()).maxCoeff();
        r.orthogonality_defect = std::max(r.orthogonality_defect, d);
      }
    }
    r.completeness_defect = (sum - 1.0).abs().maxCoeff();
  } else {
    MatrixXcd sum = MatrixXcd::Zero(f.dim(), f.dim());
    for (Index a = 0; a < f.size(); ++a) {
      MatrixXcd pa = f.projector(a).dense_matrix();
      sum += pa;
      r.projector_defect =
          std::max(r.projector_defect, f.projector(a).projector_defect_value());
      for (Index b = a + 1; b < f.size(); ++b) {
        MatrixXcd pb = f.projector(b).dense_matrix();
        double d = (pa * pb).cwiseAbs().maxCoeff();
        r.orthogonality_defect = std::max(r.orthogonality_defect, d);
      }
    }
    sum.diagonal().array() -= cxd(1, 0);
    r.completeness_defect = sum.cwiseAbs().maxCoeff();
  }
  r.passed = r.orthogonality_defect < tol && r.completeness_defect < tol;
  return r;
}

// ---------------------------------------------------------------------------
// History spaces
// ---------------------------------------------------------------------------

/// One fine cell index per time, chronological order (the formalism indexes
/// histories latest-first; storage here is earliest-first).
using History = std::vector<Index>;

/// A subset of fine cells at one time (a coarse cell). May be empty, in which
/// case the associated projector is zero.
using CellSelection = std::vector<Index>;

/// One coarse cell per time, chronological order.
using CoarseHistory = std::vector<CellSelection>;

/// The quadruple (initial state, evolution, time grid, per-time families).
/// Evolution is carried by a Propagator; the dense Hamiltonian is optional
/// and only needed when chain operators are materialized from it externally.
class HistorySpace {
 public:
  HistorySpace(StateVectorXd initial_state, std::shared_ptr<const PropagatorXd> prop,
               std::vector<double> times, std::vector<CellFamily> families,
               std::optional<OperatorXd> hamiltonian = std::nullopt,
               double family_tol = Defaults::validation_tol)
      : state_(std::move(initial_state)),
        prop_(std::move(prop)),
        times_(std::move(times)),
        families_(std::move(families)),
        hamiltonian_(std::move(hamiltonian)) {
    if (!prop_) throw StructureError("history space needs a propagator");
    if (prop_->dim() != state_.dim())
      throw DimensionError("propagator dimension does not match the state");
    if (times_.empty() || times_.size() != families_.size())
      throw StructureError("need one projector family per time");
    double prev = 0.0;
    for (double t : times_) {
      if (!(t > prev)) throw StructureError("times must be strictly increasing and > 0");
      prev = t;
    }
    for (const auto& f : families_) {
      if (f.dim() != state_.dim())
        throw DimensionError("family dimension does not match the state");
      auto v = validate_cell_family(f, family_tol);
      if (!v.passed)
        throw ContractError(
            "projector family fails validation (orthogonality defect " +
            std::to_string(v.orthogonality_defect) + ", completeness defect " +
            std::to_string(v.completeness_defect) + ")");
    }
  }

  /// Build from a dense hermitian Hamiltonian and kernel projector families.
  static HistorySpace from_hamiltonian(StateVectorXd psi, const OperatorXd& h,
                                       std::vector<double> times,
                                       const std::vector<ProjectorFamilyXd>& fams,
                                       double tol = Defaults::validation_tol) {
    std::vector<CellFamily> cf;
    cf.reserve(fams.size());
    for (const auto& f : fams) cf.push_back(CellFamily::from_dense(f));
    auto prop = std::make_shared<EigenbasisPropagator<double>>(h);
    return HistorySpace(std::move(psi), std::move(prop), std::move(times),
                        std::move(cf), h, tol);
  }

  const StateVectorXd& initial_state() const { return state_; }
  const PropagatorXd& propagator() const { return *prop_; }
  std::shared_ptr<const PropagatorXd> propagator_ptr() const { return prop_; }
  const std::vector<double>& times() const { return times_; }
  Index n_times() const { return static_cast<Index>(times_.size()); }
  const CellFamily& family(Index k) const { return families_.at(k); }
  const std::vector<CellFamily>& families() const { return families_; }
  const std::optional<OperatorXd>& hamiltonian() const { return hamiltonian_; }
  Index dim() const { return state_.dim(); }

  /// Total fine history count; SizeLimitError beyond `cap`.
  Index history_count(Index cap = Defaults::max_histories) const {
    Index count = 1;
    for (const auto& f : families_) {
      if (count > cap / f.size() + 1) throw SizeLimitError("history count exceeds cap");
      count *= f.size();
      if (count > cap) throw SizeLimitError("history count exceeds cap");
    }
    return count;
  }

 private:
  StateVectorXd state_;
  std::shared_ptr<const PropagatorXd> prop_;
  std::vector<double> times_;
  std::vector<CellFamily> families_;
  std::optional<OperatorXd> hamiltonian_;
};

/// All fine histories, lexicographic in chronological cell indices (the last
/// time is the fastest index).
inline std::vector<History> enumerate_histories(const HistorySpace& space,
                                                Index cap = Defaults::max_histories) {
  const Index count = space.history_count(cap);
  std::vector<History> out;
  out.reserve(count);
  History h(space.n_times(), 0);
  for (Index i = 0; i < count; ++i) {
    out.push_back(h);
    for (Index k = space.n_times() - 1; k >= 0; --k) {
      if (++h[k] < space.family(k).size()) break;
      h[k] = 0;
    }
  }
  return out;
}

/// Resolve a label sequence to a History. LookupError on unknown labels.
inline History history_from_labels(const HistorySpace& space,
                                   const std::vector<std::string>& labels) {
  if (static_cast<Index>(labels.size()) != space.n_times())
    throw StructureError("history label count does not match the time grid");
  History h;
  for (Index k = 0; k < space.n_times(); ++k)
    h.push_back(space.family(k).find(labels[k]));
  return h;
}

namespace detail {

inline void check_history(const HistorySpace& space, const History& h) {
  if (static_cast<Index>(h.size()) != space.n_times())
    throw StructureError("history length does not match the time grid");
  for (Index k = 0; k < space.n_times(); ++k)
    if (h[k] < 0 || h[k] >= space.family(k).size())
      throw LookupError("cell index out of range at time " + std::to_string(k));
}

inline void check_coarse(const HistorySpace& space, const CoarseHistory& h) {
  if (static_cast<Index>(h.size()) != space.n_times())
    throw StructureError("coarse history length does not match the time grid");
  for (Index k = 0; k < space.n_times(); ++k)
    for (Index c : h[k])
      if (c < 0 || c >= space.family(k).size())
        throw LookupError("cell index out of range at time " + std::to_string(k));
}

// Apply the (possibly summed) projector of a cell selection in place.
inline void apply_selection(const CellFamily& fam, const CellSelection& sel,
                            VectorXcd& v) {
  if (sel.empty()) {
    v.setZero();
    return;
  }
  if (sel.size() == 1) {
    fam.projector(sel[0]).apply_in_place(v);
    return;
  }
  bool all_indicator = true;
  for (Index c : sel) all_indicator &= fam.projector(c).is_indicator();
  if (all_indicator) {
    Eigen::ArrayXd mask = Eigen::ArrayXd::Zero(fam.dim());
    for (Index c : sel) mask += fam.projector(c).mask();
    v.array() *= mask.cast<cxd>();
  } else {
    MatrixXcd sum = MatrixXcd::Zero(fam.dim(), fam.dim());
    for (Index c : sel) sum += fam.projector(c).dense_matrix();
    v = sum * v;
  }
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Chain application (vector pipeline)
// ---------------------------------------------------------------------------

/// C_alpha |psi> in the Heisenberg picture (anchored at t0 = 0): propagate,
/// project at each time, then propagate back to 0.
inline VectorXcd chain_apply(const HistorySpace& space, const CoarseHistory& h) {
  detail::check_coarse(space, h);
  VectorXcd v = space.initial_state().amplitudes;
  double t_prev = 0.0;
  for (Index k = 0; k < space.n_times(); ++k) {
    space.propagator().propagate(t_prev, space.times()[k], v);
    detail::apply_selection(space.family(k), h[k], v);
    t_prev = space.times()[k];
  }
  space.propagator().propagate(t_prev, 0.0, v);
  return v;
}

inline VectorXcd chain_apply(const HistorySpace& space, const History& h) {
  detail::check_history(space, h);
  CoarseHistory coarse;
  for (Index c : h) coarse.push_back({c});
  return chain_apply(space, coarse);
}

/// Weight mu[alpha] = ||C_alpha psi||^2 without the final back-propagation.
inline double history_weight(const HistorySpace& space, const CoarseHistory& h) {
  detail::check_coarse(space, h);
  VectorXcd v = space.initial_state().amplitudes;
  double t_prev = 0.0;
  for (Index k = 0; k < space.n_times(); ++k) {
    space.propagator().propagate(t_prev, space.times()[k], v);
    detail::apply_selection(space.family(k), h[k], v);
    t_prev = space.times()[k];
  }
  return v.squaredNorm();
}

// ---------------------------------------------------------------------------
// Dense operators (small spaces)
// ---------------------------------------------------------------------------

/// U(-t) P U(t). P must be a projector and H hermitian; the result is
/// re-checked to be a projector.
inline OperatorXd heisenberg_projector(const OperatorXd& p, const OperatorXd& h,
                                       double t,
                                       double tol = Defaults::validation_tol) {
  if (p.dim() != h.dim()) throw DimensionError("heisenberg_projector: dimension mismatch");
  if (projector_defect<double>(p.entries) >= tol)
    throw ContractError("heisenberg_projector requires a projector");
  if (hermiticity_defect<double>(h.entries) >= tol)
    throw ContractError("heisenberg_projector requires a hermitian Hamiltonian");
  EigenbasisPropagator<double> prop{h};
  MatrixXcd u = materialize_unitary<double>(prop, t, p.dim());
  MatrixXcd out = u.adjoint() * p.entries * u;
  if (projector_defect<double>(out) >= std::max(tol, 1e-9))
    throw Error("heisenberg projector lost projector structure");
  return OperatorXd(std::move(out), kProjector | kHermitian);
}

/// Dense C_alpha = P_{a_N}(t_N) ... P_{a_1}(t_1), latest time leftmost.
/// Materializes the propagator, so it is guarded by max_dim.
inline OperatorXd chain_operator(const HistorySpace& space, const History& h,
                                 Index max_dim = Defaults::max_dense_dim) {
  detail::check_history(space, h);
  const Index d = space.dim();
  if (d > max_dim) throw SizeLimitError("chain operator materialization above the cap");
  MatrixXcd c = MatrixXcd::Identity(d, d);
  for (Index k = 0; k < space.n_times(); ++k) {
    MatrixXcd u = materialize_unitary<double>(space.propagator(), space.times()[k], max_dim);
    MatrixXcd pk = u.adjoint() * space.family(k).projector(h[k]).dense_matrix() * u;
    c = pk * c;  // later times multiply on the left
  }
  return OperatorXd(std::move(c));
}

/// Dense coarse chain operator: product over times of summed member projectors.
inline OperatorXd coarse_chain_operator(const HistorySpace& space, const CoarseHistory& h,
                                        Index max_dim = Defaults::max_dense_dim) {
  detail::check_coarse(space, h);
  const Index d = space.dim();
  if (d > max_dim) throw SizeLimitError("chain operator materialization above the cap");
  MatrixXcd c = MatrixXcd::Identity(d, d);
  for (Index k = 0; k < space.n_times(); ++k) {
    MatrixXcd p = MatrixXcd::Zero(d, d);
    for (Index cell : h[k]) p += space.family(k).projector(cell).dense_matrix();
    MatrixXcd u = materialize_unitary<double>(space.propagator(), space.times()[k], max_dim);
    c = (u.adjoint() * p * u) * c;
  }
  return OperatorXd(std::move(c));
}

// ---------------------------------------------------------------------------
// Branch vectors and the decoherence functional
// ---------------------------------------------------------------------------

struct BranchVector {
  History history;
  StateVectorXd vector;  // C_alpha |psi>, Heisenberg picture
  double weight = 0;     // ||C_alpha psi||^2
};

inline BranchVector branch_vector(const HistorySpace& space, const History& h) {
  BranchVector out;
  out.history = h;
  VectorXcd v = chain_apply(space, h);
  out.weight = v.squaredNorm();
  out.vector = StateVectorXd(std::move(v), space.initial_state().factor_dims);
  return out;
}

/// || sum_alpha C_alpha psi - psi ||: the residual of the identity
/// sum_alpha C_alpha = I, which holds for any complete families regardless
/// of decoherence.
inline double superposition_identity_check(const HistorySpace& space,
                                           Index cap = Defaults::max_histories) {
  VectorXcd sum = VectorXcd::Zero(space.dim());
  for (const auto& h : enumerate_histories(space, cap)) sum += chain_apply(space, h);
  return (sum - space.initial_state().amplitudes).norm();
}

/// D(a, a') = <psi| C+_{a'} C_a |psi> over all fine history pairs.
struct DecoherenceFunctional {
  MatrixXcd entries;               // entries(i, j) = D(histories[i], histories[j])
  std::vector<History> histories;  // row/column index, enumeration order

  double hermiticity_defect_value() const { return hermiticity_defect<double>(entries); }
  cxd trace() const { return entries.trace(); }
  Eigen::VectorXd diagonal_weights() const { return entries.diagonal().real(); }
};

inline DecoherenceFunctional decoherence_functional(const HistorySpace& space,
                                                    Index cap = Defaults::max_histories) {
  DecoherenceFunctional d;
  d.histories = enumerate_histories(space, cap);
  const Index m = static_cast<Index>(d.histories.size());
  MatrixXcd branches(space.dim(), m);
  for (Index i = 0; i < m; ++i) branches.col(i) = chain_apply(space, d.histories[i]);
  // <C_{a'} psi | C_a psi> = (B^+ B)(a', a)
  d.entries = (branches.adjoint() * branches).transpose();
  return d;
}

// ---------------------------------------------------------------------------
// Consistency (decoherence) checks
// ---------------------------------------------------------------------------

/// `Full` demands the off-diagonal moduli vanish (orthogonal branch vectors,
/// the defining condition of a decoherent history space); `Medium` only the
/// real parts (exactly what the sum rule requires).
enum class ConsistencyCriterion { Medium, Full };

struct ConsistencyReport {
  bool passed = true;
  double max_defect = 0;  // worst normalized off-diagonal
  Index worst_row = -1, worst_col = -1;
  ConsistencyCriterion criterion = ConsistencyCriterion::Full;
  double tol = Defaults::consistency_tol;
  double weight_floor = Defaults::weight_floor;
  Index skipped_rows = 0;  // rows with diagonal weight below the floor
};

/// Off-diagonals are normalized by sqrt(D_aa D_a'a'); rows whose weight falls
/// below `weight_floor` carry no usable branch and are skipped.
inline ConsistencyReport consistency_check(
    const DecoherenceFunctional& d, double tol = Defaults::consistency_tol,
    ConsistencyCriterion criterion = ConsistencyCriterion::Full,
    double weight_floor = Defaults::weight_floor) {
  ConsistencyReport r;
  r.criterion = criterion;
  r.tol = tol;
  r.weight_floor = weight_floor;
  const Index m = d.entries.rows();
  Eigen::VectorXd diag = d.entries.diagonal().real();
  const double scale = std::max(diag.sum(), 1e-300);
  std::vector<char> live(m, 0);
  for (Index i = 0; i < m; ++i) {
    live[i] = diag[i] > weight_floor * scale;
    if (!live[i]) ++r.skipped_rows;
  }
  for (Index i = 0; i < m; ++i) {
    if (!live[i]) continue;
    for (Index j = i + 1; j < m; ++j) {
      if (!live[j]) continue;
      const cxd e = d.entries(i, j);
      double raw = criterion == ConsistencyCriterion::Full ? std::abs(e)
                                                           : std::abs(e.real());
      double defect = raw / std::sqrt(diag[i] * diag[j]);
      if (defect > r.max_defect) {
        r.max_defect = defect;
        r.worst_row = i;
        r.worst_col = j;
      }
    }
  }
  r.passed = r.max_defect < tol;
  return r;
}

// ---------------------------------------------------------------------------
// Coarse-graining and the sum rule
// ---------------------------------------------------------------------------

/// Per time: coarse_of[k][fine_cell] = coarse cell id (0-based, contiguous).
struct CoarsePartition {
  std::vector<std::vector<Index>> coarse_of;
};

/// Build a partition from label maps (fine name -> coarse name per time).
/// Every fine cell must be covered exactly once; anything else is a
/// structure error.
inline CoarsePartition partition_from_labels(
    const HistorySpace& space,
    const std::vector<std::map<std::string, std::string>>& maps) {
  if (static_cast<Index>(maps.size()) != space.n_times())
    throw StructureError("need one partition map per time");
  CoarsePartition p;
  for (Index k = 0; k < space.n_times(); ++k) {
    const auto& fam = space.family(k);
    std::vector<std::string> coarse_names;
    std::vector<Index> ids(fam.size(), -1);
    for (Index c = 0; c < fam.size(); ++c) {
      auto it = maps[k].find(fam.label(c).name);
      if (it == maps[k].end())
        throw StructureError("partition misses fine cell '" + fam.label(c).name + "'");
      auto found = std::find(coarse_names.begin(), coarse_names.end(), it->second);
      if (found == coarse_names.end()) {
        coarse_names.push_back(it->second);
        ids[c] = static_cast<Index>(coarse_names.size()) - 1;
      } else {
        ids[c] = static_cast<Index>(found - coarse_names.begin());
      }
    }
    if (static_cast<Index>(maps[k].size()) != fam.size())
      throw StructureError("partition map mentions unknown cells");
    p.coarse_of.push_back(std::move(ids));
  }
  return p;
}

/// Coarse cells (as fine-cell selections) per time, plus all coarse histories.
struct CoarseGraining {
  std::vector<std::vector<CellSelection>> cells;  // [time][coarse id] -> fine members
  std::vector<CoarseHistory> histories;           // all combinations, lexicographic
};

inline CoarseGraining coarse_grain(const HistorySpace& space, const CoarsePartition& part,
                                   Index cap = Defaults::max_histories) {
  if (static_cast<Index>(part.coarse_of.size()) != space.n_times())
    throw StructureError("partition does not cover every time");
  CoarseGraining g;
  for (Index k = 0; k < space.n_times(); ++k) {
    const auto& ids = part.coarse_of[k];
    if (static_cast<Index>(ids.size()) != space.family(k).size())
      throw StructureError("partition does not cover every fine cell");
    Index n_coarse = 0;
    for (Index id : ids) {
      if (id < 0) throw StructureError("negative coarse id");
      n_coarse = std::max(n_coarse, id + 1);
    }
    std::vector<CellSelection> cells(n_coarse);
    for (Index c = 0; c < static_cast<Index>(ids.size()); ++c)
      cells[ids[c]].push_back(c);
    for (const auto& sel : cells)
      if (sel.empty()) throw StructureError("coarse ids must be contiguous");
    g.cells.push_back(std::move(cells));
  }
  Index count = 1;
  for (const auto& cells : g.cells) {
    if (count > cap / static_cast<Index>(cells.size()) + 1)
      throw SizeLimitError("coarse history count exceeds cap");
    count *= static_cast<Index>(cells.size());
    if (count > cap) throw SizeLimitError("coarse history count exceeds cap");
  }
  CoarseHistory h(space.n_times());
  std::vector<Index> idx(space.n_times(), 0);
  for (Index i = 0; i < count; ++i) {
    for (Index k = 0; k < space.n_times(); ++k) h[k] = g.cells[k][idx[k]];
    g.histories.push_back(h);
    for (Index k = space.n_times() - 1; k >= 0; --k) {
      if (++idx[k] < static_cast<Index>(g.cells[k].size())) break;
      idx[k] = 0;
    }
  }
  return g;
}

/// max over coarse histories beta of | ||C_beta psi||^2 - sum_{a in beta}
/// ||C_a psi||^2 |. Zero (to roundoff) exactly when the space decoheres.
inline double sum_rule_violation(const HistorySpace& space, const CoarsePartition& part,
                                 Index cap = Defaults::max_histories) {
  CoarseGraining g = coarse_grain(space, part, cap);

  // fine weights, grouped by their coarse image
  std::map<std::vector<Index>, double> fine_sums;
  for (const auto& fine : enumerate_histories(space, cap)) {
    std::vector<Index> image(space.n_times());
    CoarseHistory as_coarse(space.n_times());
    for (Index k = 0; k < space.n_times(); ++k) {
      image[k] = part.coarse_of[k][fine[k]];
      as_coarse[k] = {fine[k]};
    }
    fine_sums[image] += history_weight(space, as_coarse);
  }

  double worst = 0;
  std::vector<Index> idx(space.n_times(), 0);
  for (const auto& beta : g.histories) {
    double coarse_w = history_weight(space, beta);
    double fine_w = 0;
    if (auto it = fine_sums.find(idx); it != fine_sums.end()) fine_w = it->second;
    worst = std::max(worst, std::abs(coarse_w - fine_w));
    for (Index k = space.n_times() - 1; k >= 0; --k) {
      if (++idx[k] < static_cast<Index>(g.cells[k].size())) break;
      idx[k] = 0;
    }
  }
  return worst;
}

// ---------------------------------------------------------------------------
// Conditional probabilities and branching structure
// ---------------------------------------------------------------------------

/// mu[gamma * delta] / mu[delta] with gamma * delta the per-time intersection.
/// Conditioning on a history whose relative measure is below `floor` is an
/// error ("no relative history"), never a 0/0.
inline double conditional_probability(const HistorySpace& space, const CoarseHistory& gamma,
                                      const CoarseHistory& delta,
                                      double floor = Defaults::conditioning_floor) {
  detail::check_coarse(space, gamma);
  detail::check_coarse(space, delta);
  const double psi2 = space.initial_state().squared_norm();
  const double mu_delta = history_weight(space, delta);
  if (mu_delta <= floor * psi2)
    throw ConditioningError("no relative history: conditioning measure below floor");
  CoarseHistory meet(space.n_times());
  for (Index k = 0; k < space.n_times(); ++k) {
    CellSelection a = gamma[k], b = delta[k];
    std::sort(a.begin(), a.end());
    std::sort(b.begin(), b.end());
    std::set_intersection(a.begin(), a.end(), b.begin(), b.end(),
                          std::back_inserter(meet[k]));
  }
  return history_weight(space, meet) / mu_delta;
}

struct BranchingReport {
  bool passed = true;
  double max_distance = 0;  // worst min(x, |1-x|) over evaluated conditionals
  Index worst_future_time = -1, worst_future_cell = -1;
  Index worst_past_time = -1, worst_past_cell = -1;
  double worst_conditional = 0;
  Index evaluated = 0;
  double tol = Defaults::branching_tol;
  double floor = Defaults::conditioning_floor;
};

/// For every pair of times t_j < t_k and cells with mu[eps_k] above the floor,
/// evaluates mu[eps_j / eps_k] = ||P_{eps_k}(t_k) P_{eps_j}(t_j) psi||^2 /
/// ||P_{eps_k}(t_k) psi||^2 and reports the worst distance from {0, 1}.
/// Passing means pasts of events are (approximately) unique: histories only
/// diverge toward the future. Refuses inconsistent spaces.
inline BranchingReport branching_structure_check(
    const HistorySpace& space, double tol = Defaults::branching_tol,
    double floor = Defaults::conditioning_floor,
    double consistency_tol = Defaults::consistency_tol,
    Index cap = Defaults::max_histories) {
  auto d = decoherence_functional(space, cap);
  auto cons = consistency_check(d, consistency_tol);
  if (!cons.passed)
    throw ContractError("branching structure is undefined on an inconsistent space "
                        "(worst normalized off-diagonal " +
                        std::to_string(cons.max_defect) + ")");

  BranchingReport r;
  r.tol = tol;
  r.floor = floor;
  const double psi2 = space.initial_state().squared_norm();
  const VectorXcd& psi = space.initial_state().amplitudes;

  for (Index k = 1; k < space.n_times(); ++k) {
    for (Index ck = 0; ck < space.family(k).size(); ++ck) {
      VectorXcd vk = psi;
      space.propagator().propagate(0.0, space.times()[k], vk);
      space.family(k).projector(ck).apply_in_place(vk);
      const double mu_k = vk.squaredNorm();
      if (mu_k <= floor * psi2) continue;
      for (Index j = 0; j < k; ++j) {
        for (Index cj = 0; cj < space.family(j).size(); ++cj) {
          VectorXcd v = psi;
          space.propagator().propagate(0.0, space.times()[j], v);
          space.family(j).projector(cj).apply_in_place(v);
          space.propagator().propagate(space.times()[j], space.times()[k], v);
          space.family(k).projector(ck).apply_in_place(v);
          const double cond = v.squaredNorm() / mu_k;
          const double dist = std::min(std::abs(cond), std::abs(1.0 - cond));
          ++r.evaluated;
          if (dist > r.max_distance) {
            r.max_distance = dist;
            r.worst_future_time = k;
            r.worst_future_cell = ck;
            r.worst_past_time = j;
            r.worst_past_cell = cj;
            r.worst_conditional = cond;
          }
        }
      }
    }
  }
  r.passed = r.max_distance < tol;
  return r;
}

// ---------------------------------------------------------------------------
// Branch measures and branch trees
// ---------------------------------------------------------------------------

/// Weights of an orthogonal decomposition psi = sum_i v_i, normalized by
/// ||psi||^2. Non-orthogonal input is a contract error: additivity (and with
/// it the whole measure) depends on it.
inline std::vector<double> branch_measure(const std::vector<StateVectorXd>& vectors,
                                          double orth_tol = 1e-10) {
  if (vectors.empty()) throw StructureError("empty decomposition");
  const Index d = vectors.front().dim();
  VectorXcd total = VectorXcd::Zero(d);
  for (const auto& v : vectors) {
    if (v.dim() != d) throw DimensionError("decomposition dimensions differ");
    total += v.amplitudes;
  }
  for (size_t a = 0; a < vectors.size(); ++a)
    for (size_t b = a + 1; b < vectors.size(); ++b) {
      const double na = vectors[a].norm(), nb = vectors[b].norm();
      if (na == 0 || nb == 0) continue;
      if (std::abs(vectors[a].amplitudes.dot(vectors[b].amplitudes)) / (na * nb) >=
          orth_tol)
        throw ContractError("branch measure requires pairwise orthogonal components");
    }
  const double norm2 = total.squaredNorm();
  if (norm2 <= 0) throw ContractError("decomposition sums to zero");
  std::vector<double> weights;
  weights.reserve(vectors.size());
  for (const auto& v : vectors) weights.push_back(v.squared_norm() / norm2);
  return weights;
}

struct BranchTreeNode {
  Index id = 0;
  Index parent = -1;                // -1: root
  Index time_index = 0;             // 0 = initial state, k = after time t_k
  std::vector<std::string> prefix;  // cell labels along the path
  double weight = 0;
};

struct BranchTree {
  std::vector<BranchTreeNode> nodes;  // nodes[0] is the root
  double pruned_mass = 0;             // weight dropped below the cutoff
  double cutoff = 0;
};

/// Tree of history prefixes with weight above `cutoff`. Children partition
/// their parent's weight (one-time families are complete), so sibling weights
/// sum to the parent weight up to roundoff. Requires a consistent space with
/// branching structure; refuses otherwise.
inline BranchTree extract_branch_tree(const HistorySpace& space, double cutoff,
                                      double branching_tol = Defaults::branching_tol,
                                      double consistency_tol = Defaults::consistency_tol,
                                      Index cap = Defaults::max_histories) {
  auto br = branching_structure_check(space, branching_tol,
                                      Defaults::conditioning_floor, consistency_tol, cap);
  if (!br.passed)
    throw ContractError("space lacks branching structure (max distance from {0,1} = " +
                        std::to_string(br.max_distance) + "); no faithful tree exists");

  BranchTree tree;
  tree.cutoff = cutoff;
  tree.nodes.push_back(BranchTreeNode{0, -1, 0, {}, space.initial_state().squared_norm()});

  struct Frame {
    Index node;
    VectorXcd state;  // propagated to times()[time_index - 1] (or 0 for the root)
  };
  std::vector<Frame> stack;
  stack.push_back({0, space.initial_state().amplitudes});
  while (!stack.empty()) {
    Frame f = std::move(stack.back());
    stack.pop_back();
    const Index k = tree.nodes[f.node].time_index;
    if (k >= space.n_times()) continue;
    const double t_prev = k == 0 ? 0.0 : space.times()[k - 1];
    VectorXcd moved = f.state;
    space.propagator().propagate(t_prev, space.times()[k], moved);
    for (Index c = 0; c < space.family(k).size(); ++c) {
      VectorXcd child = moved;
      space.family(k).projector(c).apply_in_place(child);
      const double w = child.squaredNorm();
      if (w <= cutoff) {
        tree.pruned_mass += w;
        continue;
      }
      BranchTreeNode node;
      node.id = static_cast<Index>(tree.nodes.size());
      node.parent = f.node;
      node.time_index = k + 1;
      node.prefix = tree.nodes[f.node].prefix;
      node.prefix.push_back(space.family(k).label(c).name);
      node.weight = w;
      tree.nodes.push_back(node);
      stack.push_back({node.id, std::move(child)});
    }
  }
  return tree;
}

}  // namespace qbranch
