#pragma once

// Grid-backed history spaces used by the unit and acceptance suites:
// a recombining space (consistent, but with a genuinely non-unique past) and
// the fine-tuned re-run of a two-slit branch state.

#include <memory>

#include "qbranch/histories.hpp"
#include "qbranch/quasiclassical.hpp"

namespace grid_spaces {

using namespace qbranch;

/// Two momentum-orthogonal packets converging onto the same center window:
/// every pair of branch vectors stays orthogonal (the counter-propagating
/// overlaps are momentum-suppressed and all cut debris falls below the row
/// floor), yet the past of the center event is split 50/50 between the left
/// and right cells. Consistency holds; branching structure fails at 0.5.
inline HistorySpace make_recombining_space() {
  const Index n = 1024;
  const double x_min = -150, x_max = 150, sigma = 4, k = 4, x0 = 48;
  auto from_left = gaussian_packet(n, x_min, x_max, -x0, sigma, +k);
  auto from_right = gaussian_packet(n, x_min, x_max, +x0, sigma, -k);
  GridState both = from_left;
  both.values = (from_left.values + from_right.values) / std::sqrt(2.0);
  both = both.normalized();

  auto prop = std::make_shared<FreeGridPropagator>(n, x_max - x_min, both.mass,
                                                   both.hbar);
  Eigen::ArrayXd left = window_mask(both, x_min, -1e-12);
  Eigen::ArrayXd right = Eigen::ArrayXd::Ones(n) - left;
  Eigen::ArrayXd center = window_mask(both, -34.0, 34.0);
  Eigen::ArrayXd outside = Eigen::ArrayXd::Ones(n) - center;

  std::vector<CellFamily> families;
  families.emplace_back(
      std::vector<CellLabel>{CellLabel("left", x_min, 0), CellLabel("right", 0, x_max)},
      std::vector<CellProjector>{CellProjector::indicator(left),
                                 CellProjector::indicator(right)});
  families.emplace_back(
      std::vector<CellLabel>{CellLabel("center", -34, 34), CellLabel("outside")},
      std::vector<CellProjector>{CellProjector::indicator(center),
                                 CellProjector::indicator(outside)});
  return HistorySpace(grid_to_state(both), std::move(prop), {3.0, 12.0},
                      std::move(families));
}

/// The same space with the renormalized branch vector C_alpha |psi> as the
/// initial state: the branch's own past is a delicately tuned superposition,
/// so re-running the family structure over it breaks decoherence.
inline HistorySpace fine_tuned_rerun(const HistorySpace& space, const History& alpha) {
  VectorXcd chi = chain_apply(space, alpha);
  const double norm = chi.norm();
  if (norm <= 0) throw ContractError("branch vector vanishes; nothing to re-run");
  chi /= norm;
  return HistorySpace(StateVectorXd(std::move(chi), space.initial_state().factor_dims),
                      space.propagator_ptr(), space.times(), space.families());
}

}  // namespace grid_spaces
