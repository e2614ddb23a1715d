#include "doctest.h"

#include <Eigen/Dense>

#include <cmath>
#include <complex>
#include <set>
#include <string>

#include "oracles.hpp"
#include "qbranch/automaton.hpp"

using namespace qbranch;
using oracles::max_abs_diff;
using Eigen::MatrixXcd;
using Eigen::VectorXcd;

namespace {

// x-basis protocol: a rotated system basis exercises the non-computational path
MeasurementProtocol x_basis_protocol() {
  VectorXcd plus(2), minus(2);
  plus << 1 / std::sqrt(2.0), 1 / std::sqrt(2.0);
  minus << 1 / std::sqrt(2.0), -1 / std::sqrt(2.0);
  return MeasurementProtocol(StateVectorXd(plus), StateVectorXd(minus));
}

StateVectorXd register_input(const MeasurementProtocol& proto, const VectorXcd& sys,
                             int capacity, const std::string& prewritten) {
  auto state = tensor(StateVectorXd(sys), basis_state({kPointerDim}, 0));
  for (int s = 0; s < capacity; ++s) {
    Index digit = 0;
    if (s < static_cast<int>(prewritten.size()) && prewritten[s] == '+') digit = 1;
    if (s < static_cast<int>(prewritten.size()) && prewritten[s] == '-') digit = 2;
    state = tensor(state, basis_state({kSlotDim}, digit));
  }
  return state;
}

}  // namespace

TEST_SUITE_BEGIN("automaton");

TEST_CASE("the measurement unitary reproduces both protocol lines exactly") {
  for (const auto& proto : {MeasurementProtocol::z_basis(), x_basis_protocol()}) {
    auto u = build_measurement_unitary(proto, 0, 1);
    CHECK(unitarity_defect<double>(u.entries) < 1e-10);

    // |phi+> (x) |ready> (x) |blank>  ->  |phi+> (x) |ready> (x) |+>
    auto in_plus = register_input(proto, proto.basis_plus.amplitudes, 1, "");
    auto expect_plus = register_input(proto, proto.basis_plus.amplitudes, 1, "+");
    CHECK(max_abs_diff(u.entries * in_plus.amplitudes, expect_plus.amplitudes) < 1e-12);

    auto in_minus = register_input(proto, proto.basis_minus.amplitudes, 1, "");
    auto expect_minus = register_input(proto, proto.basis_minus.amplitudes, 1, "-");
    CHECK(max_abs_diff(u.entries * in_minus.amplitudes, expect_minus.amplitudes) < 1e-12);
  }
}

TEST_CASE("a superposed input branches by linearity") {
  auto proto = x_basis_protocol();
  auto u = build_measurement_unitary(proto, 0, 1);
  const cxd cp(0.6, 0.0), cm(0.0, 0.8);
  VectorXcd sys = cp * proto.basis_plus.amplitudes + cm * proto.basis_minus.amplitudes;
  auto in = register_input(proto, sys, 1, "");
  VectorXcd got = u.entries * in.amplitudes;
  VectorXcd expect =
      cp * register_input(proto, proto.basis_plus.amplitudes, 1, "+").amplitudes +
      cm * register_input(proto, proto.basis_minus.amplitudes, 1, "-").amplitudes;
  CHECK(max_abs_diff(got, expect) < 1e-12);
}

TEST_CASE("the unitary addresses only its slot") {
  auto proto = MeasurementProtocol::z_basis();
  auto u = build_measurement_unitary(proto, 1, 3);
  // slot 0 already holds '-', slots 1-2 blank; measurement writes slot 1 only
  auto in = register_input(proto, proto.basis_plus.amplitudes, 3, "-");
  auto expect = register_input(proto, proto.basis_plus.amplitudes, 3, "-+");
  CHECK(max_abs_diff(u.entries * in.amplitudes, expect.amplitudes) < 1e-12);
}

TEST_CASE("two sequential slots reproduce the repeated-measurement display") {
  auto proto = MeasurementProtocol::z_basis();
  auto u0 = build_measurement_unitary(proto, 0, 2);
  auto u1 = build_measurement_unitary(proto, 1, 2);
  const cxd cp(0.6, 0.0), cm(0.8, 0.0);
  VectorXcd sys = cp * proto.basis_plus.amplitudes + cm * proto.basis_minus.amplitudes;
  auto in = register_input(proto, sys, 2, "");
  VectorXcd out = u1.entries * (u0.entries * in.amplitudes);
  VectorXcd expect =
      cp * register_input(proto, proto.basis_plus.amplitudes, 2, "++").amplitudes +
      cm * register_input(proto, proto.basis_minus.amplitudes, 2, "--").amplitudes;
  CHECK(max_abs_diff(out, expect) < 1e-12);
}

TEST_CASE("a non-repeatable device records faithfully but disturbs the system") {
  auto proto = MeasurementProtocol::z_basis(false);
  auto u = build_measurement_unitary(proto, 0, 1);
  CHECK(unitarity_defect<double>(u.entries) < 1e-10);
  auto in = register_input(proto, proto.basis_minus.amplitudes, 1, "");
  // record '-' lands in memory, but the system comes out as |phi+>
  auto expect = register_input(proto, proto.basis_plus.amplitudes, 1, "-");
  CHECK(max_abs_diff(u.entries * in.amplitudes, expect.amplitudes) < 1e-12);
}

TEST_CASE("protocol construction rejects a non-orthonormal basis") {
  VectorXcd a(2), b(2);
  a << 1, 0;
  b << 1 / std::sqrt(2.0), 1 / std::sqrt(2.0);
  CHECK_THROWS_AS(MeasurementProtocol(StateVectorXd(a), StateVectorXd(b)), ContractError);
}

TEST_CASE("slot addressing is validated") {
  auto proto = MeasurementProtocol::z_basis();
  CHECK_THROWS_AS(build_measurement_unitary(proto, 2, 2), StructureError);
  CHECK_THROWS_AS(build_measurement_unitary(proto, 0, 0), ContractError);
}

TEST_CASE("memory register validates symbols and capacity") {
  CHECK_NOTHROW(MemoryRegister({'+', '-'}, 4));
  CHECK_THROWS_AS(MemoryRegister({'+', '-', '+'}, 2), StructureError);
  CHECK_THROWS_AS(MemoryRegister({'x'}, 2), StructureError);
}

TEST_CASE("run_trials enumerates symmetric single-trial branches") {
  auto ens = run_trials(1 / std::sqrt(2.0), 1 / std::sqrt(2.0), 1,
                        TrialMode::FreshSystems);
  REQUIRE(ens.branches.size() == 2);
  CHECK(ens.branches[0].record == "+");
  CHECK(ens.branches[0].weight == doctest::Approx(0.5).epsilon(1e-12));
  CHECK(ens.branches[1].record == "-");
  CHECK(ens.branches[1].weight == doctest::Approx(0.5).epsilon(1e-12));
}

TEST_CASE("a certain outcome concentrates all weight on one record") {
  auto ens = run_trials(1.0, 0.0, 3, TrialMode::FreshSystems);
  REQUIRE(ens.branches.size() == 8);
  double total = 0;
  for (const auto& b : ens.branches) {
    if (b.record == "+++")
      CHECK(b.weight == doctest::Approx(1.0).epsilon(1e-12));
    else
      CHECK(b.weight == 0.0);
    total += b.weight;
  }
  CHECK(total == doctest::Approx(1.0).epsilon(1e-12));
}

TEST_CASE("same-system repetition yields the two persistent records") {
  auto ens = run_trials(0.6, 0.8, 2, TrialMode::SameSystem);
  REQUIRE(ens.branches.size() == 2);
  CHECK(ens.branches[0].record == "++");
  CHECK(ens.branches[0].weight == doctest::Approx(0.36).epsilon(1e-12));
  CHECK(ens.branches[1].record == "--");
  CHECK(ens.branches[1].weight == doctest::Approx(0.64).epsilon(1e-12));
}

TEST_CASE("branch weights factor into per-trial Born probabilities") {
  auto ens = run_trials(cxd(0.48, 0.36), cxd(0.0, 0.8), 5, TrialMode::FreshSystems);
  const double p = ens.p;
  CHECK(p == doctest::Approx(0.36).epsilon(1e-12));
  double total = 0;
  for (const auto& b : ens.branches) {
    int plus = 0;
    for (char c : b.record) plus += c == '+';
    CHECK(std::abs(b.weight - std::pow(p, plus) * std::pow(1 - p, 5 - plus)) < 1e-14);
    total += b.weight;
  }
  CHECK(std::abs(total - 1.0) < 1e-10);
}

TEST_CASE("run_trials validates its inputs") {
  CHECK_THROWS_AS(run_trials(0.0, 0.0, 2, TrialMode::FreshSystems), ContractError);
  CHECK_THROWS_AS(run_trials(1.0, 0.0, 0, TrialMode::FreshSystems), ContractError);
  CHECK_THROWS_AS(run_trials(1.0, 0.0, 30, TrialMode::FreshSystems), SizeLimitError);
  CHECK_NOTHROW(run_trials(1.0, 0.0, 30, TrialMode::SameSystem));
}

TEST_CASE("frequency classes match the binomial oracle") {
  auto half = run_trials(1.0, 1.0, 2, TrialMode::FreshSystems);
  CHECK(frequency_class_weight(half, 1) == doctest::Approx(0.5).epsilon(1e-12));
  auto four = run_trials(1.0, 1.0, 4, TrialMode::FreshSystems);
  CHECK(frequency_class_weight(four, 4) == doctest::Approx(0.0625).epsilon(1e-12));

  auto ens = run_trials(0.6, 0.8, 3, TrialMode::FreshSystems);
  auto pmf = oracles::binomial_pmf(3, 0.36);
  for (int k = 0; k <= 3; ++k)
    CHECK(std::abs(frequency_class_weight(ens, k) - pmf[k]) < 1e-12);

  auto same = run_trials(0.6, 0.8, 3, TrialMode::SameSystem);
  CHECK_THROWS_AS(frequency_class_weight(same, 1), ModeError);
  CHECK_THROWS_AS(frequency_class_weight(ens, 4), StructureError);
}

TEST_CASE("frequency classes agree with materialized branch sums") {
  auto ens = run_trials(cxd(0.3, 0.4), 0.866, 9, TrialMode::FreshSystems);
  Eigen::VectorXd by_class = Eigen::VectorXd::Zero(10);
  ens.for_each_branch([&](const BranchRecord& b) {
    int plus = 0;
    for (char c : b.record) plus += c == '+';
    by_class[plus] += b.weight;
  });
  for (int k = 0; k <= 9; ++k)
    CHECK(std::abs(by_class[k] - frequency_class_weight(ens, k)) < 1e-13);
}

TEST_CASE("bernoulli envelope evaluates the paper formula") {
  CHECK(bernoulli_envelope({0.5, 100, 0.1}) ==
        doctest::Approx(std::exp(-1.0)).epsilon(1e-12));
  CHECK(bernoulli_envelope({0.3, 7, 0.0}) == 1.0);
  CHECK(bernoulli_envelope({0.25, 64, 0.125}) ==
        doctest::Approx(std::exp(-4.0 / 3.0)).epsilon(1e-12));
  BernoulliParams params(0.36, 12, 0.125);
  CHECK(params.kappa == 4.0 * 0.36 * 0.64);
  CHECK_THROWS_AS(BernoulliParams(0.0, 5, 0.1), ContractError);
  CHECK_THROWS_AS(BernoulliParams(1.0, 5, 0.1), ContractError);
  CHECK_THROWS_AS(BernoulliParams(0.4, 5, -0.1), ContractError);
}

TEST_CASE("deviant-set amplitude matches the exact binomial tail") {
  auto ens = run_trials(1.0, 1.0, 20, TrialMode::FreshSystems);
  CHECK(deviant_set_amplitude(ens, 2.0) == 0.0);
  CHECK(deviant_set_amplitude(ens, 0.0) == doctest::Approx(1.0).epsilon(1e-12));

  // p = 0.5, N = 20, eps = 0.2: both tails k <= 6 and k >= 14
  double expect = std::sqrt(oracles::binomial_tail_weight(20, 0.5, 0.2));
  CHECK(std::abs(deviant_set_amplitude(ens, 0.2) - expect) < 1e-12);

  for (double p : {0.25, 0.5, 0.64})
    for (int n : {20, 50, 100})
      for (double eps : {0.1, 0.2, 0.3})
        CHECK(std::abs(deviant_set_amplitude(p, n, eps) -
                       std::sqrt(oracles::binomial_tail_weight(n, p, eps))) < 1e-12);

  auto same = run_trials(1.0, 1.0, 4, TrialMode::SameSystem);
  CHECK_THROWS_AS(deviant_set_amplitude(same, 0.1), ModeError);
}

TEST_CASE("the deviant amplitude tracks the exponential envelope at leading order") {
  // kappa = 1 at p = 0.5. Pointwise log-ratios drift above the leading-order
  // band when N eps^2 is small (the prefactor dominates there), so the
  // pointwise check is restricted to N eps^2 >= 0.45; the local decay rate
  // d(-log amp)/d(N eps^2) is prefactor-free and must sit in the band
  // everywhere.
  const std::vector<double> grid{0.1, 0.15, 0.2, 0.25, 0.3};
  for (int n : {20, 50, 100}) {
    for (size_t i = 0; i < grid.size(); ++i) {
      const double eps = grid[i];
      const double amp = deviant_set_amplitude(0.5, n, eps);
      if (n * eps * eps >= 0.45) {
        const double ratio = std::log(amp) / (-n * eps * eps);
        CHECK(ratio >= 0.8);
        CHECK(ratio <= 1.6);
      }
      if (i + 1 < grid.size()) {
        const double next = deviant_set_amplitude(0.5, n, grid[i + 1]);
        const double slope = (std::log(amp) - std::log(next)) /
                             (n * (grid[i + 1] * grid[i + 1] - eps * eps));
        CHECK(slope >= 0.8);
        CHECK(slope <= 1.6);
      }
    }
  }
}

TEST_CASE("register dynamics reproduces the combinatorial ensemble branch for branch") {
  for (auto mode : {TrialMode::FreshSystems, TrialMode::SameSystem}) {
    for (const auto& proto : {MeasurementProtocol::z_basis(), x_basis_protocol()}) {
      const cxd cp(0.48, 0.36), cm(0.8, 0.0);
      const int n = 6;
      auto dyn = simulate_register_dynamics(proto, cp, cm, n, mode);
      auto ens = run_trials(cp, cm, n, mode);
      CHECK(dyn.unread_mass < 1e-12);
      if (mode == TrialMode::SameSystem) {
        // dynamics enumerates all 2^n records; only the two persistent ones live
        double worst = 0;
        for (const auto& b : dyn.branches) {
          if (b.record == std::string(n, '+'))
            worst = std::max(worst, std::abs(b.amplitude - ens.c_plus));
          else if (b.record == std::string(n, '-'))
            worst = std::max(worst, std::abs(b.amplitude - ens.c_minus));
          else
            worst = std::max(worst, std::abs(b.amplitude));
        }
        CHECK(worst < 1e-10);
      } else {
        REQUIRE(dyn.branches.size() == ens.branches.size());
        double worst = 0;
        for (size_t i = 0; i < ens.branches.size(); ++i) {
          REQUIRE(dyn.branches[i].record == ens.branches[i].record);
          worst = std::max(worst,
                           std::abs(dyn.branches[i].amplitude - ens.branches[i].amplitude));
        }
        CHECK(worst < 1e-10);
      }
    }
  }
}

TEST_CASE("the compressed fresh-systems register matches an expanded register oracle") {
  // oracle: one genuine system factor per trial, measured in sequence
  auto proto = x_basis_protocol();
  const cxd cp(0.6, 0.0), cm(0.0, 0.8);
  const int n = 4;
  const VectorXcd sys = cp * proto.basis_plus.amplitudes + cm * proto.basis_minus.amplitudes;

  StateVectorXd state = StateVectorXd(sys);
  for (int i = 1; i < n; ++i) state = tensor(state, StateVectorXd(sys));
  state = tensor(state, basis_state({kPointerDim}, 0));
  for (int i = 0; i < n; ++i) state = tensor(state, basis_state({kSlotDim}, 0));

  auto core = measurement_step_core(proto);
  for (int i = 0; i < n; ++i)
    state = apply_to_factors(core, state, {Index(i), Index(n), Index(n + 1 + i)});

  auto ens = run_trials(cp, cm, n, TrialMode::FreshSystems);
  double worst = 0;
  for (const auto& b : ens.branches) {
    // expected register component: each measured system in its outcome state
    StateVectorXd pattern =
        b.record[0] == '+' ? proto.basis_plus : proto.basis_minus;
    for (int i = 1; i < n; ++i)
      pattern = tensor(pattern,
                       b.record[i] == '+' ? proto.basis_plus : proto.basis_minus);
    pattern = tensor(pattern, basis_state({kPointerDim}, 0));
    for (int i = 0; i < n; ++i)
      pattern = tensor(pattern, basis_state({kSlotDim}, b.record[i] == '+' ? 1 : 2));
    cxd amp = inner(pattern, state);
    worst = std::max(worst, std::abs(amp - b.amplitude));
  }
  CHECK(worst < 1e-12);
}

TEST_CASE("branches with distinct records stay orthogonal under further steps") {
  // run two trials, split the state by the two-slot record, run a third trial
  // on each component separately: record retention keeps them orthogonal
  auto proto = MeasurementProtocol::z_basis();
  const int n = 3;
  std::vector<Index> dims{kSystemDim, kPointerDim};
  for (int s = 0; s < n; ++s) dims.push_back(kSlotDim);
  auto strides = factor_strides(dims);

  const cxd cp = 0.6, cm = 0.8;
  const VectorXcd sys = cp * proto.basis_plus.amplitudes + cm * proto.basis_minus.amplitudes;
  Index dim = kSystemDim * kPointerDim;
  for (int s = 0; s < n; ++s) dim *= kSlotDim;
  const Index mem_dim = dim / (kSystemDim * kPointerDim);
  VectorXcd v = VectorXcd::Zero(dim);
  v[0 * (kPointerDim * mem_dim)] = sys[0];
  v[1 * (kPointerDim * mem_dim)] = sys[1];
  auto core = measurement_step_core(proto);
  apply_to_factors_in_place(core, v, dims, {0, 1, 2});
  apply_to_factors_in_place(core, v, dims, {0, 1, 3});

  // mask by the first two slot digits
  auto masked = [&](Index d0, Index d1) {
    VectorXcd w = v;
    for (Index flat = 0; flat < dim; ++flat) {
      Index s0 = (flat / strides[2]) % kSlotDim;
      Index s1 = (flat / strides[3]) % kSlotDim;
      if (s0 != d0 || s1 != d1) w[flat] = 0;
    }
    return w;
  };
  VectorXcd branch_pp = masked(1, 1);
  VectorXcd branch_mm = masked(2, 2);
  REQUIRE(branch_pp.squaredNorm() > 0.1);
  REQUIRE(branch_mm.squaredNorm() > 0.3);

  apply_to_factors_in_place(core, branch_pp, dims, {0, 1, 4});
  apply_to_factors_in_place(core, branch_mm, dims, {0, 1, 4});
  CHECK(std::abs(branch_pp.dot(branch_mm)) < 1e-14);
}

TEST_CASE("combinatorial and register branch trees agree") {
  auto proto = MeasurementProtocol::z_basis();
  const cxd cp = 0.6, cm = 0.8;
  auto ens = run_trials(cp, cm, 3, TrialMode::FreshSystems);
  auto combinatorial = ensemble_branch_tree(ens, 0.05);
  auto space = automaton_history_space(proto, cp, cm, 3, TrialMode::FreshSystems);
  auto dynamical = extract_branch_tree(space, 0.05);
  REQUIRE(combinatorial.nodes.size() == dynamical.nodes.size());
  std::map<std::vector<std::string>, double> by_prefix;
  for (const auto& n : dynamical.nodes) by_prefix[n.prefix] = n.weight;
  for (const auto& n : combinatorial.nodes) {
    REQUIRE(by_prefix.count(n.prefix) == 1);
    CHECK(std::abs(by_prefix[n.prefix] - n.weight) < 1e-10);
  }
  CHECK(std::abs(combinatorial.pruned_mass - dynamical.pruned_mass) < 1e-10);

  // large N: a balanced tree at cutoff 0.01 keeps exactly depths 0..6
  // (2^-6 > 0.01 > 2^-7) and prunes the whole depth-7 layer, whose mass is 1
  auto big = run_trials(1.0, 1.0, 20, TrialMode::FreshSystems);
  auto tree = ensemble_branch_tree(big, 0.01);
  CHECK(tree.nodes.size() == 127);  // 1 + 2 + ... + 64
  CHECK(tree.pruned_mass == doctest::Approx(1.0).epsilon(1e-12));
  for (const auto& n : tree.nodes)
    if (n.time_index == 6)
      CHECK(n.weight == doctest::Approx(1.0 / 64).epsilon(1e-12));

  auto same = run_trials(0.6, 0.8, 5, TrialMode::SameSystem);
  auto same_tree = ensemble_branch_tree(same, 1e-6);
  REQUIRE(same_tree.nodes.size() == 11);  // root + two length-5 paths
  std::set<double> leaf_weights;
  for (const auto& n : same_tree.nodes)
    if (n.time_index == 5) leaf_weights.insert(n.weight);
  CHECK(leaf_weights.count(0.36) == 1);
  CHECK(leaf_weights.count(0.64) == 1);
}

TEST_CASE("the automaton history space inherits the ensemble weights") {
  auto proto = MeasurementProtocol::z_basis();
  auto space = automaton_history_space(proto, 0.6, 0.8, 2, TrialMode::SameSystem);
  auto h = history_from_labels(space, {"+", "++"});
  auto bv = branch_vector(space, h);
  CHECK(bv.weight == doctest::Approx(0.36).epsilon(1e-10));
  auto hm = history_from_labels(space, {"-", "--"});
  CHECK(branch_vector(space, hm).weight == doctest::Approx(0.64).epsilon(1e-10));
  auto mixed = history_from_labels(space, {"+", "+-"});
  CHECK(branch_vector(space, mixed).weight < 1e-20);

  auto fresh = automaton_history_space(proto, 0.6, 0.8, 3, TrialMode::FreshSystems);
  auto hf = history_from_labels(fresh, {"+", "+-", "+-+"});
  CHECK(branch_vector(fresh, hf).weight ==
        doctest::Approx(0.36 * 0.64 * 0.36).epsilon(1e-10));
}

TEST_SUITE_END();
