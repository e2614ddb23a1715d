#include "doctest.h"

#include <Eigen/Dense>

#include <cmath>
#include <complex>
#include <map>

#include "oracles.hpp"
#include "qbranch/automaton.hpp"
#include "qbranch/histories.hpp"
#include "test_spaces.hpp"

using namespace qbranch;
using oracles::max_abs_diff;
using test_spaces::make_commuting_space;
using test_spaces::make_generic_space;
using Eigen::MatrixXcd;
using Eigen::VectorXcd;

TEST_SUITE_BEGIN("histories");

TEST_CASE("heisenberg projector at t = 0 is the projector itself") {
  auto gen = oracles::rng(1);
  MatrixXcd u = oracles::haar_unitary(4, gen);
  MatrixXcd p = u.col(0) * u.col(0).adjoint() + u.col(1) * u.col(1).adjoint();
  MatrixXcd h = oracles::random_hermitian(4, gen);
  auto got = heisenberg_projector(OperatorXd(p), OperatorXd(h), 0.0);
  CHECK(max_abs_diff(got.entries, p) < 1e-12);
}

TEST_CASE("heisenberg projector is static when [H, P] = 0") {
  auto gen = oracles::rng(2);
  MatrixXcd basis = oracles::haar_unitary(4, gen);
  Eigen::VectorXd evals(4);
  evals << 0.3, -1.2, 0.9, 2.0;
  MatrixXcd h = basis * evals.asDiagonal() * basis.adjoint();
  MatrixXcd p = basis.col(0) * basis.col(0).adjoint() +
                basis.col(2) * basis.col(2).adjoint();
  for (double t : {0.3, 1.7, -2.1}) {
    auto got = heisenberg_projector(OperatorXd(p), OperatorXd((h + h.adjoint()) / 2.0), t);
    CHECK(max_abs_diff(got.entries, p) < 1e-11);
  }
}

TEST_CASE("spin-1/2 x-rotation carries |0><0| to |1><1| after half a period") {
  const double omega = 2.0;
  MatrixXcd sx(2, 2);
  sx << 0, 1, 1, 0;
  MatrixXcd h = (omega / 2.0) * sx;
  MatrixXcd p0 = MatrixXcd::Zero(2, 2);
  p0(0, 0) = 1;
  const double t = M_PI / omega;
  auto got = heisenberg_projector(OperatorXd(p0), OperatorXd(h), t);
  MatrixXcd p1 = MatrixXcd::Zero(2, 2);
  p1(1, 1) = 1;
  CHECK(max_abs_diff(got.entries, p1) < 1e-12);

  // closed-form 2x2 oracle: U = cos(wt/2) I - i sin(wt/2) sx
  const double half = omega * t / 2.0;
  MatrixXcd u = std::cos(half) * MatrixXcd::Identity(2, 2) -
                cxd(0, 1) * std::sin(half) * sx;
  CHECK(max_abs_diff(u.adjoint() * p0 * u, got.entries) < 1e-12);
}

TEST_CASE("heisenberg projector validates its inputs") {
  MatrixXcd not_proj(2, 2);
  not_proj << 1, 0.4, 0.4, 0;
  MatrixXcd h = MatrixXcd::Identity(2, 2);
  CHECK_THROWS_AS(heisenberg_projector(OperatorXd(not_proj), OperatorXd(h), 1.0),
                  ContractError);
  MatrixXcd p = MatrixXcd::Zero(2, 2);
  p(0, 0) = 1;
  MatrixXcd skew(2, 2);
  skew << 0, 1, 0, 0;
  CHECK_THROWS_AS(heisenberg_projector(OperatorXd(p), OperatorXd(skew), 1.0),
                  ContractError);
}

TEST_CASE("single-time chain operators are the Heisenberg projectors") {
  auto space = make_generic_space(5, 6, 1);
  auto c = chain_operator(space, {0});
  auto expected = heisenberg_projector(
      OperatorXd(space.family(0).projector(0).dense_matrix()),
      *space.hamiltonian(), space.times()[0]);
  CHECK(max_abs_diff(c.entries, expected.entries) < 1e-10);
}

TEST_CASE("identity-cell families give the identity chain") {
  auto gen = oracles::rng(9);
  MatrixXcd h = oracles::random_hermitian(5, gen);
  std::vector<ProjectorCell<double>> one{{CellLabel("all"), OperatorXd::identity(5)}};
  std::vector<ProjectorFamilyXd> fams{ProjectorFamilyXd(one), ProjectorFamilyXd(one)};
  StateVectorXd psi{oracles::random_state(5, gen)};
  auto space = HistorySpace::from_hamiltonian(psi, OperatorXd(h), {0.7, 1.9}, fams);
  auto c = chain_operator(space, {0, 0});
  CHECK(max_abs_diff(c.entries, MatrixXcd::Identity(5, 5)) < 1e-10);
}

TEST_CASE("two-time chain operator matches the explicit matrix product") {
  auto gen = oracles::rng(12);
  MatrixXcd h = oracles::random_hermitian(2, gen);
  MatrixXcd uz = MatrixXcd::Identity(2, 2);
  MatrixXcd ux(2, 2);
  ux << 1 / std::sqrt(2.0), 1 / std::sqrt(2.0), 1 / std::sqrt(2.0), -1 / std::sqrt(2.0);
  auto fam_z = test_spaces::family_from_columns(uz, {1, 1}, "z");
  auto fam_x = test_spaces::family_from_columns(ux, {1, 1}, "x");
  StateVectorXd psi{oracles::random_state(2, gen)};
  auto space = HistorySpace::from_hamiltonian(psi, OperatorXd(h), {0.5, 1.3},
                                              {fam_z, fam_x});
  auto c = chain_operator(space, {1, 0});

  // oracle: dense products with the Taylor propagator
  MatrixXcd u1 = oracles::taylor_evolution(h, 0.5);
  MatrixXcd u2 = oracles::taylor_evolution(h, 1.3);
  MatrixXcd p1 = fam_z.cell(1).projector.entries;
  MatrixXcd p2 = fam_x.cell(0).projector.entries;
  MatrixXcd expect = (u2.adjoint() * p2 * u2) * (u1.adjoint() * p1 * u1);
  CHECK(max_abs_diff(c.entries, expect) < 1e-9);

  CHECK_THROWS_AS(chain_operator(space, {2, 0}), LookupError);
  CHECK_THROWS_AS(history_from_labels(space, {"z9", "x0"}), LookupError);
}

TEST_CASE("branch vectors equal the chain operator applied to the state") {
  auto space = make_generic_space(23, 6, 2);
  for (const auto& h : enumerate_histories(space)) {
    auto bv = branch_vector(space, h);
    VectorXcd direct = chain_operator(space, h).entries *
                       space.initial_state().amplitudes;
    CHECK(max_abs_diff(bv.vector.amplitudes, direct) < 1e-10);
    CHECK(std::abs(bv.weight - direct.squaredNorm()) < 1e-12);
  }
}

TEST_CASE("branch weights and vectors match the sequential measurement oracle") {
  for (std::uint64_t seed : {101u, 102u}) {
    auto space = make_generic_space(seed, 7, 3);
    for (const auto& h : enumerate_histories(space)) {
      auto bv = branch_vector(space, h);
      auto seq = test_spaces::sequential_measurement_oracle(space, h, true);
      CHECK(std::abs(bv.weight - seq.weight) < 1e-9);
      if (bv.weight > 1e-12) {
        // same state up to normalization: C_alpha psi = sqrt(w) * (unit state)
        VectorXcd expect = seq.heisenberg_state * std::sqrt(seq.weight);
        double align = std::abs(expect.dot(bv.vector.amplitudes));
        CHECK(std::abs(align - bv.weight) < 1e-9);
      }
    }
  }
}

TEST_CASE("the chain superposition recovers the initial state") {
  CHECK(superposition_identity_check(make_generic_space(31, 6, 3)) < 1e-9);
  CHECK(superposition_identity_check(make_commuting_space(32, 6, 3)) < 1e-9);
  auto single = make_generic_space(33, 5, 1);
  CHECK(superposition_identity_check(single) < 1e-12);
}

TEST_CASE("Heisenberg and Schroedinger pictures agree at the final time") {
  auto space = make_generic_space(57, 6, 3);
  VectorXcd sum = VectorXcd::Zero(space.dim());
  for (const auto& h : enumerate_histories(space)) sum += chain_apply(space, h);
  const double t_final = space.times().back();
  VectorXcd lhs = sum;
  space.propagator().propagate(0.0, t_final, lhs);
  VectorXcd rhs = space.initial_state().amplitudes;
  space.propagator().propagate(0.0, t_final, rhs);
  CHECK(max_abs_diff(lhs, rhs) < 1e-9);
}

TEST_CASE("the decoherence functional is hermitian with unit trace") {
  auto space = make_generic_space(41, 6, 3);
  auto d = decoherence_functional(space);
  CHECK(d.hermiticity_defect_value() < 1e-12);
  CHECK(std::abs(d.trace() - cxd(space.initial_state().squared_norm(), 0)) < 1e-10);
  for (Index i = 0; i < d.entries.rows(); ++i)
    CHECK(d.entries(i, i).real() >= -1e-12);
}

TEST_CASE("a single-time functional is exactly diagonal") {
  auto space = make_generic_space(43, 6, 1);
  auto d = decoherence_functional(space);
  for (Index i = 0; i < d.entries.rows(); ++i)
    for (Index j = 0; j < d.entries.cols(); ++j)
      if (i != j) CHECK(std::abs(d.entries(i, j)) < 1e-12);
}

TEST_CASE("the automaton functional decoheres and its D is diagonal") {
  auto proto = MeasurementProtocol::z_basis();
  auto space = automaton_history_space(proto, 0.6, 0.8, 3, TrialMode::FreshSystems);
  auto d = decoherence_functional(space);
  auto rep = consistency_check(d, 1e-8);
  CHECK(rep.passed);
  CHECK(superposition_identity_check(space) < 1e-10);
}

TEST_CASE("consistency_check normalizes, skips dead rows, and names the worst pair") {
  DecoherenceFunctional d;
  d.histories = {{0}, {1}, {2}};
  d.entries = MatrixXcd::Zero(3, 3);
  d.entries(0, 0) = 0.5;
  d.entries(1, 1) = 0.5;
  d.entries(2, 2) = 1e-18;  // dead branch
  d.entries(0, 1) = cxd(0.05, 0.0);
  d.entries(1, 0) = cxd(0.05, 0.0);
  d.entries(0, 2) = cxd(1e-3, 0);  // huge if normalized, but the row is skipped
  d.entries(2, 0) = cxd(1e-3, 0);

  auto rep = consistency_check(d, 1e-8);
  CHECK_FALSE(rep.passed);
  CHECK(rep.max_defect == doctest::Approx(0.1).epsilon(1e-9));
  CHECK(rep.worst_row == 0);
  CHECK(rep.worst_col == 1);
  CHECK(rep.skipped_rows == 1);

  SUBCASE("diagonal D passes at any tolerance") {
    d.entries(0, 1) = d.entries(1, 0) = 0;
    d.entries(0, 2) = d.entries(2, 0) = 0;
    CHECK(consistency_check(d, 1e-14).passed);
    CHECK(consistency_check(d, 1e-14, ConsistencyCriterion::Medium).passed);
  }

  SUBCASE("imaginary off-diagonals pass medium but fail full") {
    d.entries(0, 1) = cxd(0, 0.05);
    d.entries(1, 0) = cxd(0, -0.05);
    d.entries(0, 2) = d.entries(2, 0) = 0;
    CHECK(consistency_check(d, 1e-8, ConsistencyCriterion::Medium).passed);
    CHECK_FALSE(consistency_check(d, 1e-8, ConsistencyCriterion::Full).passed);
  }
}

TEST_CASE("coarse graining sums fine chain operators") {
  auto space = make_generic_space(61, 6, 2);
  // merge the two cells at time 0, keep time 1 fine
  CoarsePartition part;
  part.coarse_of = {{0, 0}, {0, 1}};
  auto g = coarse_grain(space, part);
  REQUIRE(g.histories.size() == 2);
  for (const auto& beta : g.histories) {
    MatrixXcd sum = MatrixXcd::Zero(space.dim(), space.dim());
    for (Index a : beta[0])
      for (Index b : beta[1]) sum += chain_operator(space, {a, b}).entries;
    auto coarse_op = coarse_chain_operator(space, beta);
    CHECK(max_abs_diff(coarse_op.entries, sum) < 1e-12);
  }
}

TEST_CASE("identity and total partitions behave as expected") {
  auto space = make_generic_space(67, 5, 2);
  CoarsePartition ident;
  ident.coarse_of = {{0, 1}, {0, 1}};
  auto gi = coarse_grain(space, ident);
  CHECK(gi.histories.size() == 4);
  for (const auto& beta : gi.histories)
    for (const auto& sel : beta) CHECK(sel.size() == 1);

  CoarsePartition total;
  total.coarse_of = {{0, 0}, {0, 0}};
  auto gt = coarse_grain(space, total);
  REQUIRE(gt.histories.size() == 1);
  auto c = coarse_chain_operator(space, gt.histories[0]);
  CHECK(max_abs_diff(c.entries, MatrixXcd::Identity(5, 5)) < 1e-10);
}

TEST_CASE("partition validation rejects non-partitions") {
  auto space = make_generic_space(71, 5, 2);
  CoarsePartition bad;
  bad.coarse_of = {{0, 2}, {0, 0}};  // coarse id 1 missing
  CHECK_THROWS_AS(coarse_grain(space, bad), StructureError);
  CoarsePartition short_map;
  short_map.coarse_of = {{0, 0}};
  CHECK_THROWS_AS(coarse_grain(space, short_map), StructureError);

  std::map<std::string, std::string> m0{{"t0c0", "a"}};  // misses t0c1
  std::map<std::string, std::string> m1{{"t1c0", "a"}, {"t1c1", "b"}};
  CHECK_THROWS_AS(partition_from_labels(space, {m0, m1}), StructureError);
}

TEST_CASE("consistent spaces obey the sum rule on any partition") {
  for (std::uint64_t seed : {5u, 6u, 7u}) {
    auto space = make_commuting_space(seed, 8, 3);
    CoarsePartition part;
    for (Index k = 0; k < space.n_times(); ++k)
      part.coarse_of.push_back(std::vector<Index>(space.family(k).size(), 0));
    CHECK(sum_rule_violation(space, part) < 1e-10);
  }
}

TEST_CASE("merging two histories exposes the interference cross term") {
  auto space = make_generic_space(73, 6, 2);
  auto d = decoherence_functional(space);
  // merging the two cells at time 0 makes beta = {(0,b),(1,b)} for each b
  CoarsePartition part;
  part.coarse_of = {{0, 0}, {0, 1}};
  const double violation = sum_rule_violation(space, part);
  // cross term: | w_beta - sum w_alpha | = |2 Re D(alpha, alpha')|
  double expect = 0;
  auto idx = [&](Index a, Index b) { return a * 2 + b; };  // enumeration order
  for (Index b = 0; b < 2; ++b)
    expect = std::max(expect,
                      std::abs(2.0 * d.entries(idx(0, b), idx(1, b)).real()));
  CHECK(violation == doctest::Approx(expect).epsilon(1e-9));
  CHECK(violation > 1e-4);  // generic spaces interfere
}

TEST_CASE("conditional probabilities follow the composition rule") {
  auto proto = MeasurementProtocol::z_basis();
  auto space = automaton_history_space(proto, 0.6, 0.8, 2, TrialMode::SameSystem);
  const Index plus = space.family(0).find("+");
  const Index minus = space.family(0).find("-");
  const Index blank = space.family(0).find("incomplete");
  const Index pp = space.family(1).find("++");
  CellSelection everything_later;
  for (Index c = 0; c < space.family(1).size(); ++c) everything_later.push_back(c);

  CoarseHistory delta{{plus}, {pp}};                    // the "++" record
  CoarseHistory gamma_first{{plus}, everything_later};  // "+" then anything
  CHECK(conditional_probability(space, gamma_first, delta) ==
        doctest::Approx(1.0).epsilon(1e-10));

  CHECK(conditional_probability(space, delta, delta) ==
        doctest::Approx(1.0).epsilon(1e-12));

  CoarseHistory disjoint{{minus}, {pp}};
  CHECK(conditional_probability(space, disjoint, delta) == 0.0);

  CoarseHistory dead{{blank}, {pp}};
  CHECK_THROWS_AS(conditional_probability(space, gamma_first, dead), ConditioningError);
}

TEST_CASE("conditionals are invariant under global phase and scaling") {
  auto base = make_commuting_space(83, 6, 2);
  StateVectorXd scaled = base.initial_state();
  scaled.amplitudes *= cxd(1.3, 0.0) * std::exp(cxd(0, 0.7));
  HistorySpace moved(scaled, base.propagator_ptr(), base.times(), base.families(),
                     base.hamiltonian());
  CoarseHistory gamma{{0}, {0, 1}};
  CoarseHistory delta{{0, 1}, {0}};
  const double a = conditional_probability(base, gamma, delta);
  const double b = conditional_probability(moved, gamma, delta);
  CHECK(a == doctest::Approx(b).epsilon(1e-12));
}

TEST_CASE("branching structure holds for record-keeping automata") {
  auto proto = MeasurementProtocol::z_basis();
  for (auto mode : {TrialMode::FreshSystems, TrialMode::SameSystem}) {
    auto space = automaton_history_space(proto, 0.6, 0.8, 3, mode);
    auto rep = branching_structure_check(space);
    CHECK(rep.passed);
    CHECK(rep.max_distance < 1e-10);
    CHECK(rep.evaluated > 0);
  }
}

TEST_CASE("single-time spaces pass branching vacuously") {
  auto space = make_generic_space(91, 5, 1);
  auto rep = branching_structure_check(space);
  CHECK(rep.passed);
  CHECK(rep.evaluated == 0);
}

TEST_CASE("branching check refuses inconsistent spaces") {
  auto space = make_generic_space(97, 6, 3);
  auto d = decoherence_functional(space);
  REQUIRE_FALSE(consistency_check(d).passed);  // generic spaces interfere
  CHECK_THROWS_AS(branching_structure_check(space), ContractError);
}

TEST_CASE("branch_measure squares amplitudes and the linear alternative fails") {
  VectorXcd e0 = VectorXcd::Zero(2), e1 = VectorXcd::Zero(2);
  e0[0] = 1;
  e1[1] = 1;
  StateVectorXd a{VectorXcd(0.6 * e0)};
  StateVectorXd b{VectorXcd(0.8 * e1)};
  auto weights = branch_measure({a, b});
  CHECK(weights[0] == doctest::Approx(0.36).epsilon(1e-12));
  CHECK(weights[1] == doctest::Approx(0.64).epsilon(1e-12));
  // amplitude-linear alternative: 0.6 + 0.8 = 1.4, violating additivity
  CHECK(std::abs(a.norm() + b.norm() - 1.0) > 0.05);

  auto single = branch_measure({StateVectorXd{VectorXcd(e0 + e1)}});
  CHECK(single[0] == doctest::Approx(1.0).epsilon(1e-12));
}

TEST_CASE("branch_measure on random orthogonal splits") {
  auto gen = oracles::rng(7);
  for (int rep = 0; rep < 10; ++rep) {
    MatrixXcd u = oracles::haar_unitary(8, gen);
    VectorXcd psi = oracles::random_state(8, gen);
    std::vector<StateVectorXd> parts;
    std::vector<Index> sizes{3, 3, 2};
    Index at = 0;
    for (Index s : sizes) {
      VectorXcd comp = VectorXcd::Zero(8);
      for (Index j = at; j < at + s; ++j) comp += u.col(j) * (u.col(j).dot(psi));
      at += s;
      parts.emplace_back(comp);
    }
    auto weights = branch_measure(parts);
    double sum = 0;
    for (size_t i = 0; i < parts.size(); ++i) {
      CHECK(std::abs(weights[i] - parts[i].squared_norm()) < 1e-10);
      sum += weights[i];
    }
    CHECK(std::abs(sum - 1.0) < 1e-10);
  }
}

TEST_CASE("branch_measure rejects non-orthogonal components") {
  VectorXcd v0(2), v1(2);
  v0 << 1, 0;
  v1 << 1 / std::sqrt(2.0), 1 / std::sqrt(2.0);
  CHECK_THROWS_AS(branch_measure({StateVectorXd{v0}, StateVectorXd{v1}}), ContractError);
}

TEST_CASE("a balanced automaton yields a balanced branch tree") {
  auto proto = MeasurementProtocol::z_basis();
  const double r = 1 / std::sqrt(2.0);
  auto space = automaton_history_space(proto, r, r, 2, TrialMode::FreshSystems);
  auto tree = extract_branch_tree(space, 1e-6);
  // root + 2 + 4
  REQUIRE(tree.nodes.size() == 7);
  int leaves = 0;
  for (const auto& node : tree.nodes)
    if (node.time_index == 2) {
      CHECK(node.weight == doctest::Approx(0.25).epsilon(1e-10));
      ++leaves;
    }
  CHECK(leaves == 4);
  CHECK(tree.pruned_mass < 1e-12);
}

TEST_CASE("a certain outcome gives a single-path tree") {
  auto proto = MeasurementProtocol::z_basis();
  auto space = automaton_history_space(proto, 1.0, 0.0, 3, TrialMode::FreshSystems);
  auto tree = extract_branch_tree(space, 1e-6);
  REQUIRE(tree.nodes.size() == 4);  // root + one node per time
  CHECK(tree.nodes.back().weight == doctest::Approx(1.0).epsilon(1e-10));
  CHECK(tree.nodes.back().prefix == std::vector<std::string>{"+", "++", "+++"});
}

TEST_CASE("tree pruning reports the dropped mass") {
  auto proto = MeasurementProtocol::z_basis();
  auto space = automaton_history_space(proto, 0.6, 0.8, 3, TrialMode::FreshSystems);
  auto tree = extract_branch_tree(space, 0.05);
  // binomial leaf weights: 0.36^k 0.64^(3-k); only "+++" = 0.046656 < 0.05
  double expect_pruned = 0.36 * 0.36 * 0.36;
  CHECK(tree.pruned_mass == doctest::Approx(expect_pruned).epsilon(1e-9));
  std::map<std::string, double> leaf_weights;
  for (const auto& node : tree.nodes)
    if (node.time_index == 3) leaf_weights[node.prefix.back()] = node.weight;
  CHECK(leaf_weights.size() == 7);
  CHECK(leaf_weights.at("++-") == doctest::Approx(0.36 * 0.36 * 0.64).epsilon(1e-9));
  CHECK(leaf_weights.at("---") == doctest::Approx(0.64 * 0.64 * 0.64).epsilon(1e-9));

  // children sum to their parent
  for (const auto& node : tree.nodes) {
    if (node.time_index >= 3) continue;
    double child_sum = 0;
    bool has_children = false;
    for (const auto& c : tree.nodes)
      if (c.parent == node.id) {
        child_sum += c.weight;
        has_children = true;
      }
    if (has_children && node.time_index < 2)
      CHECK(std::abs(child_sum - node.weight) < 1e-9);
  }
}

TEST_CASE("tree extraction refuses non-branching spaces") {
  auto space = make_generic_space(99, 6, 2);
  CHECK_THROWS_AS(extract_branch_tree(space, 0.01), ContractError);
}

TEST_CASE("history enumeration is lexicographic and capped") {
  auto space = make_generic_space(3, 6, 3);
  auto hist = enumerate_histories(space);
  REQUIRE(hist.size() == 8);
  CHECK(hist[0] == History{0, 0, 0});
  CHECK(hist[1] == History{0, 0, 1});
  CHECK(hist.back() == History{1, 1, 1});
  CHECK_THROWS_AS(enumerate_histories(space, 4), SizeLimitError);
  CHECK_THROWS_AS(decoherence_functional(space, 4), SizeLimitError);
}

TEST_SUITE_END();
