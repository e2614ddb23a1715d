#pragma once

// Quasiclassical dynamics on a 1D periodic grid: split-operator Schroedinger
// evolution, Ehrenfest expectation tracks against symplectic classical
// trajectories, and the two-slit history space (position-window families over
// free evolution, optionally with a which-path ancilla qubit).
//
// Grid conventions: the domain is [x_min, x_max) with n (a power of two)
// points, periodic; the grid measure is dx, so sum |psi_j|^2 dx = 1 for a
// normalized state. Embedding into the l2 history machinery multiplies
// amplitudes by sqrt(dx).

#include <Eigen/Dense>
#include <unsupported/Eigen/FFT>

#include <algorithm>
#include <cmath>
#include <complex>
#include <memory>
#include <string>
#include <utility>
#include <vector>

#include "qbranch/common.hpp"
#include "qbranch/hilbert.hpp"
#include "qbranch/histories.hpp"

namespace qbranch {

// ---------------------------------------------------------------------------
// Grid states and potentials
// ---------------------------------------------------------------------------

struct GridState {
  VectorXcd values;  // psi(x_j)
  double x_min = -1, x_max = 1;
  double mass = 1, hbar = 1;

  GridState() = default;
  GridState(VectorXcd v, double lo, double hi, double m = 1, double h = 1)
      : values(std::move(v)), x_min(lo), x_max(hi), mass(m), hbar(h) {
    if (x_max <= x_min) throw StructureError("grid needs x_max > x_min");
    if (mass <= 0 || hbar <= 0) throw StructureError("mass and hbar must be positive");
    const Index count = values.size();
    if (count < 2 || (count & (count - 1)) != 0)
      throw StructureError("grid point count must be a power of two");
  }

  Index n() const { return values.size(); }
  double length() const { return x_max - x_min; }
  double dx() const { return length() / static_cast<double>(n()); }
  double x(Index j) const { return x_min + static_cast<double>(j) * dx(); }
  double norm2() const { return values.squaredNorm() * dx(); }
  bool is_normalized(double tol = 1e-8) const { return std::abs(norm2() - 1.0) < tol; }

  GridState normalized() const {
    const double n2 = norm2();
    if (n2 <= 0) throw ContractError("cannot normalize a zero grid state");
    GridState out = *this;
    out.values /= std::sqrt(n2);
    return out;
  }
};

/// Normalized Gaussian packet exp(-(x-x0)^2 / 4 sigma^2 + i k0 x).
inline GridState gaussian_packet(Index n, double x_min, double x_max, double x0,
                                 double sigma, double k0, double mass = 1,
                                 double hbar = 1) {
  if (sigma <= 0) throw StructureError("packet width must be positive");
  VectorXcd v(n);
  const double dx = (x_max - x_min) / static_cast<double>(n);
  for (Index j = 0; j < n; ++j) {
    const double x = x_min + j * dx;
    const double d = x - x0;
    v[j] = std::exp(cxd(-d * d / (4 * sigma * sigma), k0 * x));
  }
  GridState out(std::move(v), x_min, x_max, mass, hbar);
  return out.normalized();
}

enum class PotentialKind { Free, Harmonic, Quartic, Barrier, TwoSlitMask };

/// V(x). Harmonic: (1/2) m omega^2 x^2. Quartic: lambda x^4. Barrier: a
/// rectangular step of the given height and width about `center`. TwoSlitMask:
/// a barrier with two open windows (the transmissive slits) of halfwidth
/// `slit_halfwidth` at center +- slit_separation/2.
struct PotentialSpec {
  PotentialKind kind = PotentialKind::Free;
  double mass = 1;
  double omega = 1;
  double lambda = 1;
  double height = 0, width = 1, center = 0;
  double slit_separation = 0, slit_halfwidth = 0;

  static PotentialSpec free_particle() { return {}; }
  static PotentialSpec harmonic(double omega, double mass = 1) {
    PotentialSpec v;
    v.kind = PotentialKind::Harmonic;
    v.omega = omega;
    v.mass = mass;
    return v;
  }
  static PotentialSpec quartic(double lambda) {
    PotentialSpec v;
    v.kind = PotentialKind::Quartic;
    v.lambda = lambda;
    return v;
  }
  static PotentialSpec barrier(double height, double width, double center = 0) {
    PotentialSpec v;
    v.kind = PotentialKind::Barrier;
    v.height = height;
    v.width = width;
    v.center = center;
    return v;
  }
  static PotentialSpec two_slit_mask(double height, double width, double center,
                                     double separation, double slit_halfwidth) {
    PotentialSpec v;
    v.kind = PotentialKind::TwoSlitMask;
    v.height = height;
    v.width = width;
    v.center = center;
    v.slit_separation = separation;
    v.slit_halfwidth = slit_halfwidth;
    return v;
  }

  double value(double x) const {
    switch (kind) {
      case PotentialKind::Free:
        return 0;
      case PotentialKind::Harmonic:
        return 0.5 * mass * omega * omega * x * x;
      case PotentialKind::Quartic:
        return lambda * x * x * x * x;
      case PotentialKind::Barrier:
        return std::abs(x - center) <= width / 2 ? height : 0.0;
      case PotentialKind::TwoSlitMask: {
        if (std::abs(x - center) > width / 2) return 0.0;
        const double lo = center - slit_separation / 2, hi = center + slit_separation / 2;
        if (std::abs(x - lo) <= slit_halfwidth || std::abs(x - hi) <= slit_halfwidth)
          return 0.0;
        return height;
      }
    }
    return 0;
  }

  /// dV/dx where it exists; rectangular masks are not differentiable and
  /// cannot drive classical trajectories.
  double gradient(double x) const {
    switch (kind) {
      case PotentialKind::Free:
        return 0;
      case PotentialKind::Harmonic:
        return mass * omega * omega * x;
      case PotentialKind::Quartic:
        return 4 * lambda * x * x * x;
      default:
        throw ContractError("potential is not differentiable");
    }
  }
};

// ---------------------------------------------------------------------------
// Split-operator evolution
// ---------------------------------------------------------------------------

enum class Boundary { Periodic, Absorbing };

struct GridSample {
  double t = 0;
  GridState state;
};

namespace detail {

inline Eigen::ArrayXd wavenumbers(Index n, double length) {
  Eigen::ArrayXd k(n);
  const double base = 2 * M_PI / length;
  for (Index j = 0; j < n; ++j)
    k[j] = base * static_cast<double>(j < n / 2 ? j : j - n);
  return k;
}

// smooth absorbing ramp over the outer tenth of the box
inline Eigen::ArrayXd absorbing_mask(Index n, double strength_dt) {
  Eigen::ArrayXd mask = Eigen::ArrayXd::Ones(n);
  const Index margin = n / 10;
  for (Index j = 0; j < margin; ++j) {
    const double s = 1.0 - static_cast<double>(j) / margin;  // 1 at the edge
    const double damp = std::exp(-strength_dt * s * s);
    mask[j] *= damp;
    mask[n - 1 - j] *= damp;
  }
  return mask;
}

}  // namespace detail

/// Strang-split propagation psi -> e^{-iV dt/2} e^{-iK dt} e^{-iV dt/2} psi,
/// kinetic step exact in Fourier space. Samples every `stride` steps (plus the
/// initial and final states). Periodic steps are exactly unitary; the
/// absorbing boundary deliberately leaks norm and is excluded from identity
/// checks elsewhere.
inline std::vector<GridSample> split_step_evolve(const GridState& initial,
                                                 const PotentialSpec& v, double dt,
                                                 long steps, long stride = 1,
                                                 Boundary boundary = Boundary::Periodic,
                                                 double norm_drift_tol = 1e-10) {
  if (dt <= 0) throw StructureError("dt must be positive");
  if (steps < 0) throw StructureError("step count must be non-negative");
  if (stride < 1) stride = 1;
  if (!initial.is_normalized())
    throw ContractError("initial grid state must be normalized (grid measure)");

  const Index n = initial.n();
  Eigen::ArrayXcd half_v(n);
  for (Index j = 0; j < n; ++j) {
    const double phase = -v.value(initial.x(j)) * dt / (2 * initial.hbar);
    half_v[j] = std::polar(1.0, phase);
  }
  const Eigen::ArrayXd k = detail::wavenumbers(n, initial.length());
  Eigen::ArrayXcd kinetic(n);
  for (Index j = 0; j < n; ++j) {
    const double phase = -initial.hbar * k[j] * k[j] * dt / (2 * initial.mass);
    kinetic[j] = std::polar(1.0, phase);
  }
  const Eigen::ArrayXd absorb = boundary == Boundary::Absorbing
                                    ? detail::absorbing_mask(n, 5.0 * dt)
                                    : Eigen::ArrayXd::Ones(n);

  std::vector<GridSample> samples;
  samples.push_back({0.0, initial});
  GridState current = initial;
  Eigen::FFT<double> fft;
  VectorXcd freq(n), out(n);
  double prev_norm2 = current.norm2();
  for (long s = 1; s <= steps; ++s) {
    current.values.array() *= half_v;
    fft.fwd(freq, current.values);
    freq.array() *= kinetic;
    fft.inv(out, freq);
    current.values = out;
    current.values.array() *= half_v;
    if (boundary == Boundary::Absorbing) current.values.array() *= absorb.cast<cxd>();

    const double n2 = current.norm2();
    if (boundary == Boundary::Periodic && std::abs(n2 - prev_norm2) > norm_drift_tol)
      throw StabilityError("norm drift " + std::to_string(std::abs(n2 - prev_norm2)) +
                           " exceeds tolerance; retry with dt = " +
                           std::to_string(dt / 2));
    prev_norm2 = n2;
    if (s % stride == 0 || s == steps) samples.push_back({s * dt, current});
  }
  return samples;
}

// ---------------------------------------------------------------------------
// Ehrenfest tracks and classical trajectories
// ---------------------------------------------------------------------------

struct PhaseSpacePoint {
  double x = 0;
  double p = 0;
};

struct EhrenfestSample {
  double t = 0;
  double x_mean = 0;
  double p_mean = 0;
  double x_width = 0;  // sqrt(<x^2> - <x>^2), the packet width
};

/// <x> by grid quadrature, <p> by spectral quadrature, per trajectory sample.
inline std::vector<EhrenfestSample> ehrenfest_track(const std::vector<GridSample>& traj) {
  if (traj.empty()) throw StructureError("empty trajectory");
  std::vector<EhrenfestSample> out;
  out.reserve(traj.size());
  Eigen::FFT<double> fft;
  for (const auto& sample : traj) {
    const GridState& g = sample.state;
    const Index n = g.n();
    double norm = 0, x1 = 0, x2 = 0;
    for (Index j = 0; j < n; ++j) {
      const double w = std::norm(g.values[j]);
      norm += w;
      x1 += g.x(j) * w;
      x2 += g.x(j) * g.x(j) * w;
    }
    x1 /= norm;
    x2 /= norm;
    VectorXcd freq(n);
    VectorXcd vals = g.values;
    fft.fwd(freq, vals);
    const Eigen::ArrayXd k = detail::wavenumbers(n, g.length());
    double pw = 0, ptotal = 0;
    for (Index j = 0; j < n; ++j) {
      const double w = std::norm(freq[j]);
      ptotal += w;
      pw += g.hbar * k[j] * w;
    }
    out.push_back({sample.t, x1, pw / ptotal, std::sqrt(std::max(0.0, x2 - x1 * x1))});
  }
  return out;
}

struct PhaseSpaceSample {
  double t = 0;
  PhaseSpacePoint point;
};

/// Velocity-Verlet (leapfrog) integration of m x'' = -dV/dx.
inline std::vector<PhaseSpaceSample> classical_trajectory(const PotentialSpec& v,
                                                          PhaseSpacePoint start,
                                                          double mass, double dt,
                                                          long steps, long stride = 1) {
  if (dt <= 0) throw StructureError("dt must be positive");
  if (mass <= 0) throw StructureError("mass must be positive");
  if (stride < 1) stride = 1;
  std::vector<PhaseSpaceSample> out;
  out.push_back({0.0, start});
  double x = start.x, p = start.p;
  double force = -v.gradient(x);
  for (long s = 1; s <= steps; ++s) {
    x += (p / mass) * dt + 0.5 * (force / mass) * dt * dt;
    const double new_force = -v.gradient(x);
    p += 0.5 * (force + new_force) * dt;
    force = new_force;
    if (s % stride == 0 || s == steps) out.push_back({s * dt, {x, p}});
  }
  return out;
}

struct DeviationReport {
  double max_abs = 0;
  double rms = 0;
  /// Set when the position deviation grows beyond the instantaneous packet
  /// width somewhere along the run (the quasiclassical description is then
  /// breaking down and branching is underway).
  bool exceeds_packet_width = false;
  std::vector<double> deviations;  // per sample, quantum <x> minus classical x
};

inline DeviationReport ehrenfest_deviation(const std::vector<EhrenfestSample>& quantum,
                                           const std::vector<PhaseSpaceSample>& classical) {
  if (quantum.size() != classical.size())
    throw DimensionError("trajectory sample counts differ");
  DeviationReport r;
  double sq = 0;
  for (size_t i = 0; i < quantum.size(); ++i) {
    if (std::abs(quantum[i].t - classical[i].t) > 1e-9)
      throw DimensionError("trajectory time grids differ");
    const double d = quantum[i].x_mean - classical[i].point.x;
    r.deviations.push_back(d);
    r.max_abs = std::max(r.max_abs, std::abs(d));
    sq += d * d;
    if (std::abs(d) > quantum[i].x_width) r.exceeds_packet_width = true;
  }
  r.rms = std::sqrt(sq / quantum.size());
  return r;
}

// ---------------------------------------------------------------------------
// Grid-backed history spaces
// ---------------------------------------------------------------------------

/// Embed a grid state into the l2 history machinery (amplitudes scaled by
/// sqrt(dx)), optionally tensored with an ancilla prepared in |0>.
inline StateVectorXd grid_to_state(const GridState& g, Index ancilla_dim = 1) {
  const double root = std::sqrt(g.dx());
  if (ancilla_dim == 1) {
    VectorXcd v = g.values * root;
    return StateVectorXd(std::move(v), {g.n()});
  }
  VectorXcd v = VectorXcd::Zero(g.n() * ancilla_dim);
  for (Index j = 0; j < g.n(); ++j) v[j * ancilla_dim] = g.values[j] * root;
  return StateVectorXd(std::move(v), {g.n(), ancilla_dim});
}

/// 0/1 indicator of a position window [lo, hi], replicated over the ancilla.
inline Eigen::ArrayXd window_mask(const GridState& like, double lo, double hi,
                                  Index ancilla_dim = 1) {
  Eigen::ArrayXd mask = Eigen::ArrayXd::Zero(like.n() * ancilla_dim);
  for (Index j = 0; j < like.n(); ++j)
    if (like.x(j) >= lo && like.x(j) <= hi)
      for (Index a = 0; a < ancilla_dim; ++a) mask[j * ancilla_dim + a] = 1.0;
  return mask;
}

/// Exact free-particle propagator on the periodic grid (kinetic phases in
/// Fourier space), optionally carrying an ancilla factor and a list of
/// instantaneous unitary kicks (mask-controlled ancilla flips). A kick at
/// time s acts on evolutions crossing s from below: U(0 -> s) excludes it,
/// U(0 -> s + e) includes it, so a projector placed at s sees the state
/// before the kick. kinetic_sign = -1 propagates under -H (time reversal).
class FreeGridPropagator final : public PropagatorXd {
 public:
  FreeGridPropagator(Index n, double length, double mass, double hbar,
                     Index ancilla_dim = 1, double kinetic_sign = 1.0)
      : n_(n), ancilla_(ancilla_dim), length_(length), mass_(mass), hbar_(hbar),
        sign_(kinetic_sign), k_(detail::wavenumbers(n, length)) {
    if (ancilla_ < 1) throw StructureError("ancilla dimension must be positive");
    if ((n_ & (n_ - 1)) != 0 || n_ < 2)
      throw StructureError("grid point count must be a power of two");
  }

  /// Controlled flip: where mask = 1, swap the two ancilla levels at `time`.
  void add_flip_kick(double time, Eigen::ArrayXd grid_mask) {
    if (ancilla_ != 2) throw StructureError("flip kicks need a two-level ancilla");
    if (grid_mask.size() != n_) throw DimensionError("kick mask must live on the grid");
    kicks_.push_back({time, std::move(grid_mask)});
    std::sort(kicks_.begin(), kicks_.end(),
              [](const Kick& a, const Kick& b) { return a.time < b.time; });
  }

  Index dim() const override { return n_ * ancilla_; }

  void propagate(double t_from, double t_to, VectorXcd& v) const override {
    if (t_to == t_from) return;
    if (t_to > t_from) {
      double at = t_from;
      for (const auto& kick : kicks_) {
        if (kick.time < at || kick.time >= t_to) continue;  // acts on [at, t_to)
        free_segment(kick.time - at, v);
        apply_flip(kick.grid_mask, v);
        at = kick.time;
      }
      free_segment(t_to - at, v);
    } else {
      // inverse of propagate(t_to, t_from): undo segments and kicks in reverse
      double at = t_from;
      for (auto it = kicks_.rbegin(); it != kicks_.rend(); ++it) {
        if (it->time < t_to || it->time >= t_from) continue;
        free_segment(it->time - at, v);           // negative duration: inverse
        apply_flip(it->grid_mask, v);             // flips are involutions
        at = it->time;
      }
      free_segment(t_to - at, v);
    }
  }

 private:
  struct Kick {
    double time;
    Eigen::ArrayXd grid_mask;
  };

  void free_segment(double dt, VectorXcd& v) const {
    if (dt == 0) return;
    Eigen::FFT<double> fft;
    VectorXcd block(n_), freq(n_);
    for (Index a = 0; a < ancilla_; ++a) {
      for (Index j = 0; j < n_; ++j) block[j] = v[j * ancilla_ + a];
      fft.fwd(freq, block);
      for (Index j = 0; j < n_; ++j) {
        const double phase = -sign_ * hbar_ * k_[j] * k_[j] * dt / (2 * mass_);
        freq[j] *= std::polar(1.0, phase);
      }
      fft.inv(block, freq);
      for (Index j = 0; j < n_; ++j) v[j * ancilla_ + a] = block[j];
    }
  }

  void apply_flip(const Eigen::ArrayXd& mask, VectorXcd& v) const {
    for (Index j = 0; j < n_; ++j)
      if (mask[j] != 0.0) std::swap(v[j * ancilla_], v[j * ancilla_ + 1]);
  }

  Index n_, ancilla_;
  double length_, mass_, hbar_, sign_;
  Eigen::ArrayXd k_;
  std::vector<Kick> kicks_;
};

/// Geometry of the two-slit history space. The particle starts as a Gaussian
/// packet, passes a wide aperture at t1, the double slit at t2, and a screen
/// window at t3; every family is completed by an "elsewhere" cell. With
/// mask_minus_slit the initial state is prepared as the component that will
/// pass the "+" slit (a barrier closing the "-" slit), and the aperture
/// family collapses to the trivial one. With which_path_ancilla a two-level
/// tag is flipped right after the slits wherever the particle sits in the
/// "-" window.
struct TwoSlitGeometry {
  Index n = 4096;
  double x_min = -150, x_max = 250;
  double mass = 1, hbar = 1;
  double packet_x0 = -80, packet_sigma = 6, packet_k0 = 2;
  double aperture_center = -40, aperture_halfwidth = 30;
  double slit_separation = 6, slit_halfwidth = 0.75;
  double screen_lo = 52, screen_hi = 68;
  double t1 = 20, t2 = 40, t3 = 70;
  bool which_path_ancilla = false;
  bool mask_minus_slit = false;
};

inline HistorySpace two_slit_space(const TwoSlitGeometry& g) {
  if (!(g.t1 > 0 && g.t2 > g.t1 && g.t3 > g.t2))
    throw ConfigError("two-slit times must satisfy 0 < t1 < t2 < t3");
  if (g.slit_separation <= 2 * g.slit_halfwidth)
    throw ConfigError("slit windows overlap; increase the separation");
  const double dx = (g.x_max - g.x_min) / static_cast<double>(g.n);
  if (dx > g.slit_halfwidth)
    throw ConfigError("grid does not resolve the slit width");

  GridState packet = gaussian_packet(g.n, g.x_min, g.x_max, g.packet_x0,
                                     g.packet_sigma, g.packet_k0, g.mass, g.hbar);
  const Index ancilla = g.which_path_ancilla ? 2 : 1;
  auto prop = std::make_shared<FreeGridPropagator>(g.n, g.x_max - g.x_min, g.mass,
                                                   g.hbar, ancilla);

  const double plus_lo = g.slit_separation / 2 - g.slit_halfwidth;
  const double plus_hi = g.slit_separation / 2 + g.slit_halfwidth;
  Eigen::ArrayXd plus_mask = window_mask(packet, plus_lo, plus_hi, ancilla);
  Eigen::ArrayXd minus_mask = window_mask(packet, -plus_hi, -plus_lo, ancilla);
  Eigen::ArrayXd aperture_mask =
      window_mask(packet, g.aperture_center - g.aperture_halfwidth,
                  g.aperture_center + g.aperture_halfwidth, ancilla);
  Eigen::ArrayXd screen_mask = window_mask(packet, g.screen_lo, g.screen_hi, ancilla);

  if (g.which_path_ancilla) {
    Eigen::ArrayXd flip = Eigen::ArrayXd::Zero(g.n);
    for (Index j = 0; j < g.n; ++j)
      if (packet.x(j) >= -plus_hi && packet.x(j) <= -plus_lo) flip[j] = 1.0;
    prop->add_flip_kick(g.t2, flip);
  }

  StateVectorXd initial = grid_to_state(packet, ancilla);
  if (g.mask_minus_slit) {
    // prepare the component that passes the "+" slit: P_{+}(t2) psi, renormalized
    VectorXcd v = initial.amplitudes;
    prop->propagate(0.0, g.t2, v);
    v.array() *= plus_mask.cast<cxd>();
    prop->propagate(g.t2, 0.0, v);
    const double nrm = v.norm();
    if (nrm <= 1e-12) throw ConfigError("masked preparation annihilated the packet");
    initial = StateVectorXd(v / nrm, initial.factor_dims);
  }

  const Index total = g.n * ancilla;
  auto complement = [&](std::initializer_list<const Eigen::ArrayXd*> parts) {
    Eigen::ArrayXd rest = Eigen::ArrayXd::Ones(total);
    for (const auto* part : parts) rest -= *part;
    return rest;
  };

  std::vector<CellFamily> families;
  if (g.mask_minus_slit) {
    families.emplace_back(
        std::vector<CellLabel>{CellLabel("anywhere")},
        std::vector<CellProjector>{CellProjector::indicator(Eigen::ArrayXd::Ones(total))});
  } else {
    families.emplace_back(
        std::vector<CellLabel>{
            CellLabel("aperture", g.aperture_center - g.aperture_halfwidth,
                      g.aperture_center + g.aperture_halfwidth),
            CellLabel("elsewhere@t1")},
        std::vector<CellProjector>{CellProjector::indicator(aperture_mask),
                                   CellProjector::indicator(complement({&aperture_mask}))});
  }
  families.emplace_back(
      std::vector<CellLabel>{CellLabel("slit+", plus_lo, plus_hi),
                             CellLabel("slit-", -plus_hi, -plus_lo),
                             CellLabel("elsewhere@t2")},
      std::vector<CellProjector>{
          CellProjector::indicator(plus_mask), CellProjector::indicator(minus_mask),
          CellProjector::indicator(complement({&plus_mask, &minus_mask}))});
  families.emplace_back(
      std::vector<CellLabel>{CellLabel("screen", g.screen_lo, g.screen_hi),
                             CellLabel("elsewhere@t3")},
      std::vector<CellProjector>{CellProjector::indicator(screen_mask),
                                 CellProjector::indicator(complement({&screen_mask}))});

  return HistorySpace(std::move(initial), std::move(prop), {g.t1, g.t2, g.t3},
                      std::move(families));
}

/// The alpha_+ / alpha_- fine histories of a two-slit space (through the
/// aperture when present, through the given slit, onto the screen).
inline History two_slit_history(const HistorySpace& space, bool plus_slit) {
  History h;
  if (space.family(0).size() == 1)
    h.push_back(0);
  else
    h.push_back(space.family(0).find("aperture"));
  h.push_back(space.family(1).find(plus_slit ? "slit+" : "slit-"));
  h.push_back(space.family(2).find("screen"));
  return h;
}

}  // namespace qbranch
