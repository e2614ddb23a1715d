#pragma once

// Artifact emitters: CSV for series and tables, JSON for matrices, reports,
// and trees, DOT for tree rendering, plus the FNV-1a checksum used by run
// manifests. All floating-point output goes through format_double (%.17g)
// so identical inputs produce byte-identical artifacts.

#include <cinttypes>
#include <cstdint>
#include <cstdio>
#include <ostream>
#include <string>
#include <vector>

#include "json.hpp"

#include "qbranch/automaton.hpp"
#include "qbranch/histories.hpp"
#include "qbranch/quasiclassical.hpp"

namespace qbranch::report {

inline std::string format_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

inline std::uint64_t fnv1a64(const std::string& bytes) {
  std::uint64_t h = 0xcbf29ce484222325ull;
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 0x100000001b3ull;
  }
  return h;
}

inline std::string fnv1a64_hex(const std::string& bytes) {
  char buf[20];
  std::snprintf(buf, sizeof buf, "%016" PRIx64, fnv1a64(bytes));
  return buf;
}

// ---------------------------------------------------------------------------
// Automaton CSV tables
// ---------------------------------------------------------------------------

/// record, amplitude_re, amplitude_im, weight
inline void write_ensemble_csv(std::ostream& out, const BranchEnsemble& ens) {
  out << "record,amplitude_re,amplitude_im,weight\n";
  ens.for_each_branch([&](const BranchRecord& b) {
    out << b.record << ',' << format_double(b.amplitude.real()) << ','
        << format_double(b.amplitude.imag()) << ',' << format_double(b.weight)
        << '\n';
  });
}

/// k, weight, envelope — the frequency-class weights next to the amplitude
/// envelope exp(-N eps_k^2 / kappa) at eps_k = |k/N - p|. A deterministic
/// input (kappa = 0) degenerates the envelope to an indicator on k = pN.
inline void write_frequency_csv(std::ostream& out, const BranchEnsemble& ens) {
  if (ens.mode != TrialMode::FreshSystems)
    throw ModeError("frequency tables require fresh-systems mode");
  const Eigen::VectorXd weights = frequency_class_weights(ens.p, ens.trials);
  const double kappa = 4 * ens.p * (1 - ens.p);
  out << "k,weight,envelope\n";
  for (int k = 0; k <= ens.trials; ++k) {
    const double eps = std::abs(static_cast<double>(k) / ens.trials - ens.p);
    double envelope;
    if (kappa > 0)
      envelope = std::exp(-ens.trials * eps * eps / kappa);
    else
      envelope = eps == 0 ? 1.0 : 0.0;
    out << k << ',' << format_double(weights[k]) << ',' << format_double(envelope)
        << '\n';
  }
}

// ---------------------------------------------------------------------------
// Histories JSON
// ---------------------------------------------------------------------------

inline nlohmann::json consistency_json(const ConsistencyReport& r) {
  nlohmann::json j;
  j["criterion"] = r.criterion == ConsistencyCriterion::Full ? "full" : "medium";
  j["tol"] = r.tol;
  j["passed"] = r.passed;
  j["max_normalized_offdiag"] = r.max_defect;
  j["worst_pair"] = {r.worst_row, r.worst_col};
  j["skipped_rows"] = r.skipped_rows;
  j["weight_floor"] = r.weight_floor;
  return j;
}

/// History labels, complex entries, diagonal weights, and the consistency
/// report for both criteria.
inline nlohmann::json dmatrix_json(const HistorySpace& space,
                                   const DecoherenceFunctional& d,
                                   double tol = Defaults::consistency_tol) {
  nlohmann::json j;
  nlohmann::json histories = nlohmann::json::array();
  for (const auto& h : d.histories) {
    nlohmann::json labels = nlohmann::json::array();
    for (Index k = 0; k < static_cast<Index>(h.size()); ++k)
      labels.push_back(space.family(k).label(h[k]).name);
    histories.push_back(labels);
  }
  j["histories"] = histories;
  nlohmann::json entries = nlohmann::json::array();
  for (Index i = 0; i < d.entries.rows(); ++i) {
    nlohmann::json row = nlohmann::json::array();
    for (Index k = 0; k < d.entries.cols(); ++k)
      row.push_back({d.entries(i, k).real(), d.entries(i, k).imag()});
    entries.push_back(row);
  }
  j["entries"] = entries;
  nlohmann::json diag = nlohmann::json::array();
  for (Index i = 0; i < d.entries.rows(); ++i) diag.push_back(d.entries(i, i).real());
  j["diagonal"] = diag;
  j["trace"] = {d.trace().real(), d.trace().imag()};
  j["hermiticity_defect"] = d.hermiticity_defect_value();
  j["consistency_full"] = consistency_json(consistency_check(d, tol));
  j["consistency_medium"] =
      consistency_json(consistency_check(d, tol, ConsistencyCriterion::Medium));
  return j;
}

inline nlohmann::json tree_json(const BranchTree& tree) {
  nlohmann::json j;
  j["cutoff"] = tree.cutoff;
  j["pruned_mass"] = tree.pruned_mass;
  nlohmann::json nodes = nlohmann::json::array();
  nlohmann::json edges = nlohmann::json::array();
  for (const auto& n : tree.nodes) {
    nlohmann::json node;
    node["id"] = n.id;
    node["time_index"] = n.time_index;
    node["prefix"] = n.prefix;
    node["weight"] = n.weight;
    nodes.push_back(node);
    if (n.parent >= 0) edges.push_back({n.parent, n.id});
  }
  j["nodes"] = nodes;
  j["edges"] = edges;
  return j;
}

inline std::string tree_dot(const BranchTree& tree) {
  std::string out = "digraph branches {\n  rankdir=LR;\n";
  for (const auto& n : tree.nodes) {
    const std::string label =
        n.prefix.empty() ? "root" : n.prefix.back();
    out += "  n" + std::to_string(n.id) + " [label=\"" + label + "\\nw=" +
           format_double(n.weight) + "\"];\n";
  }
  for (const auto& n : tree.nodes)
    if (n.parent >= 0)
      out += "  n" + std::to_string(n.parent) + " -> n" + std::to_string(n.id) + ";\n";
  out += "}\n";
  return out;
}

// ---------------------------------------------------------------------------
// Quasiclassical CSV
// ---------------------------------------------------------------------------

/// t, x, p, deviation (quantum track against a classical reference)
inline void write_trajectory_csv(std::ostream& out,
                                 const std::vector<EhrenfestSample>& quantum,
                                 const std::vector<PhaseSpaceSample>& classical,
                                 const DeviationReport& dev) {
  out << "t,x_mean,p_mean,x_classical,p_classical,deviation\n";
  for (size_t i = 0; i < quantum.size(); ++i) {
    out << format_double(quantum[i].t) << ',' << format_double(quantum[i].x_mean) << ','
        << format_double(quantum[i].p_mean) << ','
        << format_double(classical[i].point.x) << ','
        << format_double(classical[i].point.p) << ','
        << format_double(dev.deviations[i]) << '\n';
  }
}

/// x, |psi|^2, Re psi, Im psi
inline void write_snapshot_csv(std::ostream& out, const GridState& g) {
  out << "x,density,re,im\n";
  for (Index j = 0; j < g.n(); ++j) {
    out << format_double(g.x(j)) << ',' << format_double(std::norm(g.values[j])) << ','
        << format_double(g.values[j].real()) << ','
        << format_double(g.values[j].imag()) << '\n';
  }
}

}  // namespace qbranch::report
