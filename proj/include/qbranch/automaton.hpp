#pragma once

// Everett's mechanical observer: a two-outcome measurement protocol realized
// as a single unitary U = U0 Um on system (x) pointer (x) memory, repeated
// measurements on fresh systems or the same system, exact branch enumeration,
// and the quantum Bernoulli statistics of outcome frequencies.
//
// Register layout. The pointer is a 3-level display {ready, +, -}; each memory
// slot is a 3-level cell {blank, +, -}. Um correlates the pointer with the
// system along the protocol basis; U0 copies the pointer into the addressed
// slot and resets the display. Both are permutations of the computational
// basis (up to the protocol-basis rotation), so the action on the orthogonal
// complement of the protocol subspace is fixed and deterministic.

#include <Eigen/Dense>

#include <cmath>
#include <complex>
#include <cstdint>
#include <memory>
#include <string>
#include <utility>
#include <vector>

#include "qbranch/common.hpp"
#include "qbranch/hilbert.hpp"
#include "qbranch/histories.hpp"

namespace qbranch {

constexpr Index kSystemDim = 2;
constexpr Index kPointerDim = 3;  // 0 = ready, 1 = "+", 2 = "-"
constexpr Index kSlotDim = 3;     // 0 = blank, 1 = "+", 2 = "-"

/// The two-outcome measurement protocol: an orthonormal system basis
/// (|phi+>, |phi->), the fixed pointer/memory alphabets, and repeatability.
/// A non-repeatable device records faithfully but leaves the system in |phi+>.
struct MeasurementProtocol {
  StateVectorXd basis_plus;   // |phi+>
  StateVectorXd basis_minus;  // |phi->
  bool repeatable = true;

  static constexpr const char* pointer_states = "0+-";
  static constexpr const char* memory_alphabet = "+-";

  MeasurementProtocol(StateVectorXd plus, StateVectorXd minus, bool is_repeatable = true)
      : basis_plus(std::move(plus)), basis_minus(std::move(minus)),
        repeatable(is_repeatable) {
    if (basis_plus.dim() != kSystemDim || basis_minus.dim() != kSystemDim)
      throw ContractError("protocol system basis must be two-dimensional");
    if (std::abs(basis_plus.squared_norm() - 1.0) > 1e-10 ||
        std::abs(basis_minus.squared_norm() - 1.0) > 1e-10 ||
        std::abs(inner(basis_plus, basis_minus)) > 1e-10)
      throw ContractError("protocol system basis must be orthonormal");
  }

  /// Computational-basis protocol (|0>, |1>).
  static MeasurementProtocol z_basis(bool repeatable = true) {
    return MeasurementProtocol(basis_state({kSystemDim}, 0), basis_state({kSystemDim}, 1),
                               repeatable);
  }
};

/// Classical record content of the memory: written symbols, oldest first.
struct MemoryRegister {
  std::vector<char> slots;  // each '+' or '-'
  int capacity = 0;

  MemoryRegister(std::vector<char> written, int cap)
      : slots(std::move(written)), capacity(cap) {
    if (static_cast<int>(slots.size()) > capacity)
      throw StructureError("memory register over capacity");
    for (char c : slots)
      if (c != '+' && c != '-') throw StructureError("memory symbols are '+' or '-'");
  }

  std::string to_string() const { return std::string(slots.begin(), slots.end()); }
};

struct BranchRecord {
  std::string record;  // e.g. "++-"
  cxd amplitude = 0;
  double weight = 0;  // |amplitude|^2
};

enum class TrialMode { FreshSystems, SameSystem };

/// Exact branch ensemble of N repeated measurements. Amplitudes are stored
/// for the internally normalized (c+, c-); the input norm is kept alongside.
/// Branches are materialized only below the materialization cap; use
/// for_each_branch to stream all of them in enumeration order ('+' < '-',
/// earliest trial most significant).
struct BranchEnsemble {
  cxd c_plus = 0, c_minus = 0;  // normalized
  double raw_norm2 = 0;         // |c+|^2 + |c-|^2 of the input
  double p = 0;                 // Born weight of "+" after normalization
  int trials = 0;
  TrialMode mode = TrialMode::FreshSystems;
  std::vector<BranchRecord> branches;  // empty when not materialized
  bool materialized = false;

  std::int64_t branch_count() const {
    return mode == TrialMode::SameSystem ? 2 : std::int64_t{1} << trials;
  }

  template <typename F>
  void for_each_branch(F&& f) const {
    if (mode == TrialMode::SameSystem) {
      f(BranchRecord{std::string(trials, '+'), c_plus, std::norm(c_plus)});
      f(BranchRecord{std::string(trials, '-'), c_minus, std::norm(c_minus)});
      return;
    }
    std::vector<cxd> pow_plus(trials + 1), pow_minus(trials + 1);
    pow_plus[0] = pow_minus[0] = 1.0;
    for (int j = 1; j <= trials; ++j) {
      pow_plus[j] = pow_plus[j - 1] * c_plus;
      pow_minus[j] = pow_minus[j - 1] * c_minus;
    }
    const std::int64_t total = std::int64_t{1} << trials;
    std::string rec(trials, '+');
    for (std::int64_t bits = 0; bits < total; ++bits) {
      int minus_count = 0;
      for (int j = 0; j < trials; ++j) {
        const bool minus = (bits >> (trials - 1 - j)) & 1;
        rec[j] = minus ? '-' : '+';
        minus_count += minus;
      }
      cxd amp = pow_plus[trials - minus_count] * pow_minus[minus_count];
      f(BranchRecord{rec, amp, std::norm(amp)});
    }
  }
};

/// Enumerate all branches of N trials with amplitudes fixed by the unitary
/// dynamics alone: fresh systems give 2^N branches with amplitude
/// c+^{#+} c-^{#-}; repeated measurement of one system gives the two
/// persistent records.
inline BranchEnsemble run_trials(cxd c_plus, cxd c_minus, int trials, TrialMode mode,
                                 int max_trials = Defaults::max_fresh_trials,
                                 int materialize_cap = Defaults::max_materialized_branches) {
  const double raw = std::norm(c_plus) + std::norm(c_minus);
  if (raw <= 0) throw ContractError("(c+, c-) must not both vanish");
  if (trials < 1) throw ContractError("need at least one trial");
  if (mode == TrialMode::FreshSystems && trials > max_trials)
    throw SizeLimitError("fresh-systems enumeration capped at " +
                         std::to_string(max_trials) + " trials");
  BranchEnsemble e;
  e.raw_norm2 = raw;
  e.c_plus = c_plus / std::sqrt(raw);
  e.c_minus = c_minus / std::sqrt(raw);
  e.p = std::norm(e.c_plus);
  e.trials = trials;
  e.mode = mode;
  if (e.branch_count() <= materialize_cap) {
    e.branches.reserve(static_cast<size_t>(e.branch_count()));
    e.for_each_branch([&](const BranchRecord& b) { e.branches.push_back(b); });
    e.materialized = true;
  }
  return e;
}

/// Weights of the frequency classes (number of "+" outcomes) after n trials,
/// accumulated trial by trial. Index k of the result is the total weight of
/// all branches with exactly k "+" records.
inline Eigen::VectorXd frequency_class_weights(double p, int trials) {
  if (p < 0 || p > 1) throw ContractError("p must lie in [0, 1]");
  Eigen::VectorXd w = Eigen::VectorXd::Zero(trials + 1);
  w[0] = 1.0;
  for (int n = 1; n <= trials; ++n)
    for (int k = n; k >= 0; --k)
      w[k] = (k > 0 ? p * w[k - 1] : 0.0) + (1.0 - p) * (k <= n - 1 ? w[k] : 0.0);
  return w;
}

/// Total weight of the branches with exactly k "+" outcomes.
inline double frequency_class_weight(const BranchEnsemble& ens, int k) {
  if (ens.mode != TrialMode::FreshSystems)
    throw ModeError("frequency classes require fresh-systems mode");
  if (k < 0 || k > ens.trials) throw StructureError("class index out of range");
  return frequency_class_weights(ens.p, ens.trials)[k];
}

/// Parameters of the quantum Bernoulli falloff exp(-N eps^2 / kappa).
struct BernoulliParams {
  double p = 0.5;
  int trials = 1;
  double epsilon = 0;
  double kappa = 1.0;  // 4 p (1 - p), stored exactly as computed

  BernoulliParams(double born_p, int n, double eps)
      : p(born_p), trials(n), epsilon(eps), kappa(4.0 * born_p * (1.0 - born_p)) {
    if (!(p > 0 && p < 1)) throw ContractError("p must lie strictly in (0, 1)");
    if (n < 1) throw ContractError("need at least one trial");
    if (eps < 0) throw ContractError("epsilon must be non-negative");
  }
};

/// The amplitude envelope exp(-N eps^2 / kappa) for frequency deviations eps.
inline double bernoulli_envelope(const BernoulliParams& params) {
  return std::exp(-params.trials * params.epsilon * params.epsilon / params.kappa);
}

/// Amplitude (root of summed weight) of the superposition of all branches
/// whose "+" frequency deviates from p by at least eps. The comparison is
/// done in outcome counts with a roundoff guard so boundary classes
/// (|k/N - p| = eps exactly) are always included.
inline double deviant_set_amplitude(double p, int trials, double eps) {
  const Eigen::VectorXd w = frequency_class_weights(p, trials);
  double sum = 0;
  for (int k = 0; k <= trials; ++k)
    if (std::abs(k - p * trials) >= eps * trials - 1e-9) sum += w[k];
  return std::sqrt(sum);
}

inline double deviant_set_amplitude(const BranchEnsemble& ens, double eps) {
  if (ens.mode != TrialMode::FreshSystems)
    throw ModeError("deviant sets require fresh-systems mode");
  return deviant_set_amplitude(ens.p, ens.trials, eps);
}

// ---------------------------------------------------------------------------
// The measurement unitary
// ---------------------------------------------------------------------------

namespace detail {

inline MatrixXcd pointer_swap(Index a, Index b) {
  MatrixXcd m = MatrixXcd::Identity(kPointerDim, kPointerDim);
  m(a, a) = m(b, b) = 0;
  m(a, b) = m(b, a) = 1;
  return m;
}

// Um on system (x) pointer: measure along the protocol basis into the display.
inline MatrixXcd measure_core(const MeasurementProtocol& proto) {
  const auto& u = proto.basis_plus.amplitudes;
  const auto& w = proto.basis_minus.amplitudes;
  MatrixXcd proj_plus = u * u.adjoint();
  MatrixXcd proj_minus = w * w.adjoint();
  return Eigen::kroneckerProduct(proj_plus, pointer_swap(0, 1)).eval() +
         Eigen::kroneckerProduct(proj_minus, pointer_swap(0, 2)).eval();
}

// U0 on pointer (x) slot: write the displayed outcome into a blank slot and
// reset the display. A permutation: (+ , blank) <-> (ready, +) and
// (-, blank) <-> (ready, -), all other basis states fixed.
inline MatrixXcd record_core() {
  const Index d = kPointerDim * kSlotDim;
  MatrixXcd m = MatrixXcd::Identity(d, d);
  auto idx = [](Index ptr, Index slot) { return ptr * kSlotDim + slot; };
  auto swap = [&](Index a, Index b) {
    m(a, a) = m(b, b) = 0;
    m(a, b) = m(b, a) = 1;
  };
  swap(idx(1, 0), idx(0, 1));
  swap(idx(2, 0), idx(0, 2));
  return m;
}

// Pointer-controlled return of the system to |phi+> (used by non-repeatable
// devices after Um, before the record/reset step).
inline MatrixXcd disturb_core(const MeasurementProtocol& proto) {
  const auto& u = proto.basis_plus.amplitudes;
  const auto& w = proto.basis_minus.amplitudes;
  MatrixXcd flip = u * w.adjoint() + w * u.adjoint();  // swaps phi+ <-> phi-
  MatrixXcd id2 = MatrixXcd::Identity(kSystemDim, kSystemDim);
  MatrixXcd m = MatrixXcd::Zero(kSystemDim * kPointerDim, kSystemDim * kPointerDim);
  for (Index ptr = 0; ptr < kPointerDim; ++ptr) {
    const MatrixXcd& sys = ptr == 2 ? flip : id2;
    for (Index i = 0; i < kSystemDim; ++i)
      for (Index j = 0; j < kSystemDim; ++j)
        m(i * kPointerDim + ptr, j * kPointerDim + ptr) = sys(i, j);
  }
  return m;
}

}  // namespace detail

/// One full measurement step U = U0 Um on system (x) pointer (x) slot
/// (dimension 18). The slot is the addressed memory cell.
inline OperatorXd measurement_step_core(const MeasurementProtocol& proto) {
  MatrixXcd um = Eigen::kroneckerProduct(detail::measure_core(proto),
                                         MatrixXcd::Identity(kSlotDim, kSlotDim));
  if (!proto.repeatable)
    um = Eigen::kroneckerProduct(detail::disturb_core(proto),
                                 MatrixXcd::Identity(kSlotDim, kSlotDim)) *
         um;
  MatrixXcd u0 = Eigen::kroneckerProduct(MatrixXcd::Identity(kSystemDim, kSystemDim),
                                         detail::record_core());
  return OperatorXd(u0 * um, kUnitary);
}

/// The measurement unitary on the full register system (x) pointer (x)
/// capacity slots, addressing the given slot and acting as the identity on
/// every other slot. Dense; use the dynamics runner for large registers.
inline OperatorXd build_measurement_unitary(const MeasurementProtocol& proto, int slot,
                                            int capacity,
                                            Index max_amplitudes =
                                                Defaults::max_tensor_amplitudes) {
  if (capacity < 1) throw ContractError("memory capacity must be positive");
  if (slot < 0 || slot >= capacity) throw StructureError("slot index out of range");
  Index dim = kSystemDim * kPointerDim;
  for (int s = 0; s < capacity; ++s) {
    if (dim > max_amplitudes / kSlotDim)
      throw SizeLimitError("register dimension exceeds the amplitude cap");
    dim *= kSlotDim;
  }
  std::vector<Index> dims{kSystemDim, kPointerDim};
  for (int s = 0; s < capacity; ++s) dims.push_back(kSlotDim);

  const OperatorXd core = measurement_step_core(proto);
  MatrixXcd u(dim, dim);
  VectorXcd col(dim);
  for (Index j = 0; j < dim; ++j) {
    col.setZero();
    col[j] = 1.0;
    apply_to_factors_in_place(core, col, dims, {0, 1, 2 + slot});
    u.col(j) = col;
  }
  return OperatorXd(std::move(u), kUnitary);
}

// ---------------------------------------------------------------------------
// Register dynamics
// ---------------------------------------------------------------------------

namespace detail {

// Slot-controlled rotation returning the post-measurement system to |phi+>
// (acting on slot (x) system), followed by re-preparation: together they
// realize swapping in a fresh system between trials without enlarging the
// register.
inline OperatorXd fresh_swap_core(const MeasurementProtocol& proto) {
  const auto& u = proto.basis_plus.amplitudes;
  const auto& w = proto.basis_minus.amplitudes;
  MatrixXcd flip = u * w.adjoint() + w * u.adjoint();
  MatrixXcd id2 = MatrixXcd::Identity(kSystemDim, kSystemDim);
  MatrixXcd m = MatrixXcd::Zero(kSlotDim * kSystemDim, kSlotDim * kSystemDim);
  for (Index s = 0; s < kSlotDim; ++s) {
    const MatrixXcd& sys = s == 2 ? flip : id2;  // slot "-" holds the phi- branch
    m.block(s * kSystemDim, s * kSystemDim, kSystemDim, kSystemDim) = sys;
  }
  return OperatorXd(std::move(m), kUnitary);
}

// Unitary taking |phi+> to the prepared superposition c+|phi+> + c-|phi->.
inline OperatorXd prepare_core(const MeasurementProtocol& proto, cxd c_plus, cxd c_minus) {
  const auto& u = proto.basis_plus.amplitudes;
  const auto& w = proto.basis_minus.amplitudes;
  VectorXcd target = c_plus * u + c_minus * w;
  VectorXcd ortho = -std::conj(c_minus) * u + std::conj(c_plus) * w;
  MatrixXcd m = target * u.adjoint() + ortho * w.adjoint();
  return OperatorXd(std::move(m), kUnitary);
}

}  // namespace detail

struct RegisterDynamics {
  StateVectorXd final_state;          // system (x) pointer (x) slots
  std::vector<BranchRecord> branches;  // read off memory components, enumeration order
  double unread_mass = 0;              // residual mass outside the expected pattern
};

/// Run N sequential measurement steps on the full register state and read the
/// branch amplitudes off the memory-basis components. Fresh-systems mode
/// swaps in a freshly prepared system between trials (a unitary pair:
/// slot-controlled decorrelation, then re-preparation), so one register
/// factorization serves both modes.
inline RegisterDynamics simulate_register_dynamics(const MeasurementProtocol& proto,
                                                   cxd c_plus, cxd c_minus, int trials,
                                                   TrialMode mode) {
  const double raw = std::norm(c_plus) + std::norm(c_minus);
  if (raw <= 0) throw ContractError("(c+, c-) must not both vanish");
  if (trials < 1) throw ContractError("need at least one trial");
  const cxd cp = c_plus / std::sqrt(raw), cm = c_minus / std::sqrt(raw);

  std::vector<Index> dims{kSystemDim, kPointerDim};
  for (int s = 0; s < trials; ++s) dims.push_back(kSlotDim);
  Index dim = kSystemDim * kPointerDim;
  for (int s = 0; s < trials; ++s) {
    if (dim > Defaults::max_tensor_amplitudes / kSlotDim)
      throw SizeLimitError("register dimension exceeds the amplitude cap");
    dim *= kSlotDim;
  }

  const Index mem_dim = dim / (kSystemDim * kPointerDim);
  VectorXcd v = VectorXcd::Zero(dim);
  const VectorXcd psi = cp * proto.basis_plus.amplitudes + cm * proto.basis_minus.amplitudes;
  // memory all blank (index 0), pointer ready (index 0)
  v[0 * (kPointerDim * mem_dim) + 0 * mem_dim + 0] = psi[0];
  v[1 * (kPointerDim * mem_dim) + 0 * mem_dim + 0] = psi[1];

  const OperatorXd core = measurement_step_core(proto);
  const OperatorXd swap_core = detail::fresh_swap_core(proto);
  const OperatorXd prep = detail::prepare_core(proto, cp, cm);
  for (int k = 0; k < trials; ++k) {
    apply_to_factors_in_place(core, v, dims, {0, 1, 2 + k});
    if (mode == TrialMode::FreshSystems) {
      apply_to_factors_in_place(swap_core, v, dims, {2 + k, 0});
      apply_to_factors_in_place(prep, v, dims, {0});
    }
  }

  RegisterDynamics out;
  out.final_state = StateVectorXd(v, dims);

  // Expected (system, pointer) pattern per record: pointer ready; system is
  // the fresh preparation, or the protocol state of the last outcome.
  const std::int64_t n_records = std::int64_t{1} << trials;
  std::vector<Index> slot_weight(trials);
  {
    Index wgt = 1;
    for (int j = trials - 1; j >= 0; --j) {
      slot_weight[j] = wgt;
      wgt *= kSlotDim;
    }
  }
  double read_mass = 0;
  for (std::int64_t bits = 0; bits < n_records; ++bits) {
    std::string rec(trials, '+');
    Index mem_index = 0;
    for (int j = 0; j < trials; ++j) {
      const bool minus = (bits >> (trials - 1 - j)) & 1;
      rec[j] = minus ? '-' : '+';
      mem_index += (minus ? 2 : 1) * slot_weight[j];
    }
    VectorXcd pattern;
    if (mode == TrialMode::FreshSystems)
      pattern = psi;
    else
      pattern = rec.back() == '+' ? proto.basis_plus.amplitudes
                                  : proto.basis_minus.amplitudes;
    cxd amp = 0;
    for (Index s = 0; s < kSystemDim; ++s)
      amp += std::conj(pattern[s]) * v[s * (kPointerDim * mem_dim) + 0 * mem_dim + mem_index];
    out.branches.push_back(BranchRecord{rec, amp, std::norm(amp)});
    read_mass += std::norm(amp);
  }
  out.unread_mass = std::abs(v.squaredNorm() - read_mass);
  return out;
}

// ---------------------------------------------------------------------------
// The automaton as a history space
// ---------------------------------------------------------------------------

/// Matrix-free single-step propagator for the automaton register extended by
/// a write head: factors [system, pointer, slot_1..slot_N, head(N+1)]. One
/// time step measures the slot under the head and advances the head, so the
/// whole run is generated by a single time-independent unitary and integer
/// times 1..N index the trials.
class AutomatonStepPropagator final : public PropagatorXd {
 public:
  AutomatonStepPropagator(const MeasurementProtocol& proto, cxd c_plus, cxd c_minus,
                          int trials, TrialMode mode)
      : trials_(trials), mode_(mode), core_(measurement_step_core(proto)),
        swap_core_(detail::fresh_swap_core(proto)),
        prep_(detail::prepare_core(proto, c_plus, c_minus)) {
    if (trials < 1) throw ContractError("need at least one trial");
    dims_ = {kSystemDim, kPointerDim};
    for (int s = 0; s < trials; ++s) dims_.push_back(kSlotDim);
    register_dim_ = kSystemDim * kPointerDim;
    for (int s = 0; s < trials; ++s) {
      if (register_dim_ > Defaults::max_tensor_amplitudes / kSlotDim)
        throw SizeLimitError("register dimension exceeds the amplitude cap");
      register_dim_ *= kSlotDim;
    }
    head_dim_ = trials + 1;
    if (register_dim_ > Defaults::max_tensor_amplitudes / head_dim_)
      throw SizeLimitError("register dimension exceeds the amplitude cap");
  }

  Index dim() const override { return register_dim_ * head_dim_; }
  Index head_dim() const { return head_dim_; }
  Index register_dim() const { return register_dim_; }
  const std::vector<Index>& register_dims() const { return dims_; }

  void propagate(double t_from, double t_to, VectorXcd& v) const override {
    const double dt = t_to - t_from;
    const long long n = std::llround(dt);
    if (std::abs(dt - static_cast<double>(n)) > 1e-9)
      throw ContractError("automaton propagator only evaluates integer time offsets");
    for (long long s = 0; s < n; ++s) step(v, false);
    for (long long s = 0; s < -n; ++s) step(v, true);
  }

 private:
  // The head is the fastest factor: flat = register_index * head_dim + head.
  void step(VectorXcd& v, bool inverse) const {
    VectorXcd out = VectorXcd::Zero(v.size());
    VectorXcd reg(register_dim_);
    for (Index h = 0; h < head_dim_; ++h) {
      const Index h_from = inverse ? (h + 1) % head_dim_ : h;
      const Index h_to = inverse ? h : (h + 1) % head_dim_;
      for (Index r = 0; r < register_dim_; ++r) reg[r] = v[r * head_dim_ + h_from];
      const Index k = inverse ? h : h_from;  // trial index of the payload
      if (k < trials_) {
        if (!inverse) {
          apply_to_factors_in_place(core_, reg, dims_, {0, 1, 2 + k});
          if (mode_ == TrialMode::FreshSystems) {
            apply_to_factors_in_place(swap_core_, reg, dims_, {2 + k, 0});
            apply_to_factors_in_place(prep_, reg, dims_, {0});
          }
        } else {
          if (mode_ == TrialMode::FreshSystems) {
            apply_to_factors_in_place(prep_.adjoint(), reg, dims_, {0});
            apply_to_factors_in_place(swap_core_.adjoint(), reg, dims_, {2 + k, 0});
          }
          apply_to_factors_in_place(core_.adjoint(), reg, dims_, {0, 1, 2 + k});
        }
      }
      for (Index r = 0; r < register_dim_; ++r) out[r * head_dim_ + h_to] = reg[r];
    }
    v = std::move(out);
  }

  int trials_;
  TrialMode mode_;
  OperatorXd core_, swap_core_, prep_;
  std::vector<Index> dims_;
  Index register_dim_ = 0, head_dim_ = 0;
};

/// Prefix tree of the ensemble's records, weights taken from the per-trial
/// Born factors. Same node schema as extract_branch_tree on the recast
/// history space, and identical numbers where both are computable; this one
/// stays cheap at large trial counts because pruning cuts whole subtrees.
inline BranchTree ensemble_branch_tree(const BranchEnsemble& ens, double cutoff) {
  BranchTree tree;
  tree.cutoff = cutoff;
  tree.nodes.push_back(BranchTreeNode{0, -1, 0, {}, 1.0});
  struct Frame {
    Index node;
    double weight;
    int plus_count;
    std::string record;
  };
  const double p = ens.p, q = 1.0 - ens.p;
  std::vector<Frame> stack{{0, 1.0, 0, ""}};
  while (!stack.empty()) {
    Frame f = stack.back();
    stack.pop_back();
    const int depth = static_cast<int>(f.record.size());
    if (depth >= ens.trials) continue;
    for (char symbol : {'+', '-'}) {
      double w;
      if (ens.mode == TrialMode::SameSystem) {
        // records never mix: a uniform prefix keeps its branch weight, a
        // mixed one is dead
        const bool extends = f.record.empty() || f.record.back() == symbol;
        w = !extends ? 0.0 : (f.record.empty() ? (symbol == '+' ? p : q) : f.weight);
      } else {
        w = f.weight * (symbol == '+' ? p : q);
      }
      if (w <= cutoff) {
        tree.pruned_mass += w;
        continue;
      }
      BranchTreeNode node;
      node.id = static_cast<Index>(tree.nodes.size());
      node.parent = f.node;
      node.time_index = depth + 1;
      node.prefix = tree.nodes[f.node].prefix;
      node.prefix.push_back(f.record + symbol);
      node.weight = w;
      tree.nodes.push_back(node);
      stack.push_back({node.id, w, f.plus_count + (symbol == '+'), f.record + symbol});
    }
  }
  return tree;
}

/// The automaton run recast as a history space: times 1..N, and at time k the
/// family of indicators on the full record written so far (slots 1..k), plus
/// one catch-all cell for incompletely written registers. Conditioning events
/// on the whole persistent record is what gives repeated measurements their
/// branching structure: the past of a record is its prefix and nothing else.
inline HistorySpace automaton_history_space(const MeasurementProtocol& proto, cxd c_plus,
                                            cxd c_minus, int trials, TrialMode mode) {
  auto prop = std::make_shared<AutomatonStepPropagator>(proto, c_plus, c_minus, trials, mode);
  const double raw = std::norm(c_plus) + std::norm(c_minus);
  if (raw <= 0) throw ContractError("(c+, c-) must not both vanish");
  const cxd cp = c_plus / std::sqrt(raw), cm = c_minus / std::sqrt(raw);

  const Index head_dim = prop->head_dim();
  const Index reg_dim = prop->register_dim();
  const Index mem_dim = reg_dim / (kSystemDim * kPointerDim);
  VectorXcd v = VectorXcd::Zero(reg_dim * head_dim);
  const VectorXcd psi = cp * proto.basis_plus.amplitudes + cm * proto.basis_minus.amplitudes;
  // pointer ready, memory blank, head at 0
  v[(0 * (kPointerDim * mem_dim) + 0) * head_dim + 0] = psi[0];
  v[(1 * (kPointerDim * mem_dim) + 0) * head_dim + 0] = psi[1];
  std::vector<Index> dims = prop->register_dims();
  dims.push_back(head_dim);
  StateVectorXd initial(v, dims);

  // strides of the slot digits in the flat index (head is the fastest factor)
  std::vector<Index> slot_stride(trials);
  {
    Index s = head_dim;
    for (int j = trials - 1; j >= 0; --j) {
      slot_stride[j] = s;
      s *= kSlotDim;
    }
  }

  std::vector<double> times;
  std::vector<CellFamily> families;
  const Index total = reg_dim * head_dim;
  for (int k = 1; k <= trials; ++k) {
    times.push_back(static_cast<double>(k));
    const Index n_records = Index{1} << k;
    std::vector<Eigen::ArrayXd> masks(n_records, Eigen::ArrayXd::Zero(total));
    Eigen::ArrayXd incomplete = Eigen::ArrayXd::Ones(total);
    for (Index flat = 0; flat < total; ++flat) {
      Index rec = 0;
      bool written = true;
      for (int j = 0; j < k; ++j) {
        const Index digit = (flat / slot_stride[j]) % kSlotDim;
        if (digit == 0) {
          written = false;
          break;
        }
        rec = (rec << 1) | (digit == 2 ? 1 : 0);
      }
      if (written) {
        masks[rec][flat] = 1.0;
        incomplete[flat] = 0.0;
      }
    }
    std::vector<CellLabel> labels;
    std::vector<CellProjector> cells;
    for (Index r = 0; r < n_records; ++r) {
      std::string name;
      for (int j = k - 1; j >= 0; --j) name += ((r >> j) & 1) ? '-' : '+';
      labels.emplace_back(name);
      cells.push_back(CellProjector::indicator(masks[r]));
    }
    labels.emplace_back("incomplete");
    cells.push_back(CellProjector::indicator(incomplete));
    families.emplace_back(std::move(labels), std::move(cells));
  }
  return HistorySpace(std::move(initial), std::move(prop), std::move(times),
                      std::move(families));
}

}  // namespace qbranch
