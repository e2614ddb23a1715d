#include "qbranch/scenario.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <random>
#include <set>
#include <sstream>

#include "json.hpp"
#include "toml_lite.hpp"

#include "qbranch/automaton.hpp"
#include "qbranch/histories.hpp"
#include "qbranch/quasiclassical.hpp"
#include "qbranch/report.hpp"

namespace qbranch::scenario {

namespace {

using nlohmann::json;

// ---------------------------------------------------------------------------
// Typed config access with exhaustive error collection
// ---------------------------------------------------------------------------

class Checker {
 public:
  Checker(const toml::Table& table, std::vector<std::string>& errors)
      : table_(table), errors_(errors) {}

  bool has(const std::string& key) {
    consumed_.insert(key);
    return table_.has(key);
  }

  std::string str(const std::string& key, const std::string& fallback) {
    consumed_.insert(key);
    if (!table_.has(key)) return fallback;
    const auto& v = table_.at(key);
    if (v.kind != toml::Value::Kind::String) {
      errors_.push_back(key + " must be a string");
      return fallback;
    }
    return v.str;
  }

  bool boolean(const std::string& key, bool fallback) {
    consumed_.insert(key);
    if (!table_.has(key)) return fallback;
    const auto& v = table_.at(key);
    if (v.kind != toml::Value::Kind::Boolean) {
      errors_.push_back(key + " must be a boolean");
      return fallback;
    }
    return v.boolean;
  }

  double number(const std::string& key, double fallback) {
    consumed_.insert(key);
    if (!table_.has(key)) return fallback;
    const auto& v = table_.at(key);
    if (!v.is_number()) {
      errors_.push_back(key + " must be a number");
      return fallback;
    }
    return v.as_number();
  }

  long long integer(const std::string& key, long long fallback) {
    consumed_.insert(key);
    if (!table_.has(key)) return fallback;
    const auto& v = table_.at(key);
    if (v.kind != toml::Value::Kind::Integer) {
      errors_.push_back(key + " must be an integer");
      return fallback;
    }
    return v.integer;
  }

  std::vector<double> number_array(const std::string& key) {
    consumed_.insert(key);
    std::vector<double> out;
    if (!table_.has(key)) return out;
    const auto& v = table_.at(key);
    if (v.kind == toml::Value::Kind::Array) {
      for (const auto& e : v.array) {
        if (!e.is_number()) {
          errors_.push_back(key + " must contain numbers only");
          return {};
        }
        out.push_back(e.as_number());
      }
    } else if (v.is_number()) {
      out.push_back(v.as_number());
    } else {
      errors_.push_back(key + " must be a number or an array of numbers");
    }
    return out;
  }

  void require(bool condition, const std::string& message) {
    if (!condition) errors_.push_back(message);
  }

  /// Reject anything the scenario did not consume.
  void finish() {
    for (const auto& [key, value] : table_.values)
      if (!consumed_.count(key)) errors_.push_back("unknown key '" + key + "'");
  }

 private:
  const toml::Table& table_;
  std::vector<std::string>& errors_;
  std::set<std::string> consumed_;
};

bool power_of_two(long long v) { return v >= 2 && (v & (v - 1)) == 0; }

// ---------------------------------------------------------------------------
// Deterministic random sources (fixed algorithm, independent of the standard
// library's distribution implementations)
// ---------------------------------------------------------------------------

double uniform01(std::mt19937_64& gen) {
  return static_cast<double>(gen() >> 11) * 0x1.0p-53;
}

double gaussian(std::mt19937_64& gen) {
  double u = 0;
  while (u == 0) u = uniform01(gen);
  const double v = uniform01(gen);
  return std::sqrt(-2.0 * std::log(u)) * std::cos(2 * M_PI * v);
}

MatrixXcd haar_unitary(Index d, std::mt19937_64& gen) {
  MatrixXcd m(d, d);
  for (Index i = 0; i < d; ++i)
    for (Index j = 0; j < d; ++j) m(i, j) = cxd(gaussian(gen), gaussian(gen));
  Eigen::HouseholderQR<MatrixXcd> qr(m);
  MatrixXcd q = qr.householderQ();
  MatrixXcd r = qr.matrixQR().triangularView<Eigen::Upper>();
  for (Index j = 0; j < d; ++j) {
    const cxd rj = r(j, j);
    q.col(j) *= std::abs(rj) > 0 ? rj / std::abs(rj) : cxd(1, 0);
  }
  return q;
}

// ---------------------------------------------------------------------------
// Parsed configuration
// ---------------------------------------------------------------------------

struct Config {
  std::string scenario;
  std::string output_dir = "out";
  std::uint64_t seed = 0;
  double tol_consistency = Defaults::consistency_tol;
  double tol_branching = Defaults::branching_tol;
  toml::Table raw;
};

const char* kScenarios[] = {"automaton", "two_slit", "ehrenfest",
                            "custom_history_space"};

void validate_automaton(Checker& c) {
  const bool has_p = c.has("parameters.p");
  const bool has_c = c.has("parameters.c_plus") || c.has("parameters.c_minus");
  c.require(has_p || has_c, "parameters: give either p or c_plus/c_minus");
  c.require(!(has_p && has_c), "parameters: p and c_plus/c_minus are exclusive");
  if (has_p) {
    const double p = c.number("parameters.p", 0.5);
    c.require(p > 0 && p < 1, "parameters.p must lie strictly in (0, 1)");
  }
  if (has_c) {
    for (const char* key : {"parameters.c_plus", "parameters.c_minus"}) {
      auto v = c.number_array(key);
      c.require(v.size() == 1 || v.size() == 2,
                std::string(key) + " must be a number or [re, im]");
    }
    // both amplitudes zero is checked at run time against the actual values
  }
  const std::string mode = c.str("parameters.mode", "fresh_systems");
  c.require(mode == "fresh_systems" || mode == "same_system",
            "parameters.mode must be fresh_systems or same_system");
  const long long trials = c.integer("parameters.trials", 0);
  c.require(trials >= 1, "parameters.trials must be >= 1");
  if (mode == "fresh_systems")
    c.require(trials <= Defaults::max_fresh_trials,
              "parameters.trials exceeds the fresh-systems enumeration cap of " +
                  std::to_string(Defaults::max_fresh_trials));
  for (double eps : c.number_array("parameters.epsilon"))
    c.require(eps > 0, "parameters.epsilon must be > 0");
  const double cutoff = c.number("parameters.tree_cutoff", 1e-3);
  c.require(cutoff >= 0, "parameters.tree_cutoff must be >= 0");
}

void validate_two_slit(Checker& c) {
  const long long n = c.integer("parameters.n", 4096);
  c.require(power_of_two(n) && n >= 512,
            "parameters.n must be a power of two >= 512");
  const double x_min = c.number("parameters.x_min", -150);
  const double x_max = c.number("parameters.x_max", 250);
  c.require(x_max > x_min, "parameters.x_max must exceed parameters.x_min");
  c.require(c.number("parameters.packet_sigma", 6) > 0,
            "parameters.packet_sigma must be > 0");
  c.number("parameters.packet_x0", -80);
  c.number("parameters.packet_k0", 2);
  c.number("parameters.aperture_center", -40);
  c.require(c.number("parameters.aperture_halfwidth", 30) > 0,
            "parameters.aperture_halfwidth must be > 0");
  const double sep = c.number("parameters.slit_separation", 6);
  const double hw = c.number("parameters.slit_halfwidth", 0.75);
  c.require(hw > 0, "parameters.slit_halfwidth must be > 0");
  c.require(sep > 2 * hw, "parameters.slit_separation must exceed twice the halfwidth");
  const double lo = c.number("parameters.screen_lo", 52);
  const double hi = c.number("parameters.screen_hi", 68);
  c.require(hi > lo, "parameters.screen_hi must exceed parameters.screen_lo");
  const double t1 = c.number("parameters.t1", 20);
  const double t2 = c.number("parameters.t2", 40);
  const double t3 = c.number("parameters.t3", 70);
  c.require(t1 > 0 && t2 > t1 && t3 > t2, "times must satisfy 0 < t1 < t2 < t3");
  c.require(c.number("parameters.mass", 1) > 0, "parameters.mass must be > 0");
  c.require(c.number("parameters.hbar", 1) > 0, "parameters.hbar must be > 0");
  const bool which_path = c.boolean("parameters.which_path", false);
  const bool mask_minus = c.boolean("parameters.mask_minus", false);
  c.require(!(which_path && mask_minus),
            "parameters: which_path and mask_minus are exclusive");
}

void validate_ehrenfest(Checker& c) {
  const std::string kind = c.str("parameters.potential", "harmonic");
  c.require(kind == "free" || kind == "harmonic" || kind == "quartic",
            "parameters.potential must be free, harmonic, or quartic");
  if (kind == "harmonic")
    c.require(c.number("parameters.omega", 1) > 0, "parameters.omega must be > 0");
  if (kind == "quartic")
    c.require(c.number("parameters.lambda", 0.25) > 0, "parameters.lambda must be > 0");
  const long long n = c.integer("parameters.n", 2048);
  c.require(power_of_two(n), "parameters.n must be a power of two");
  const double x_min = c.number("parameters.x_min", -12);
  const double x_max = c.number("parameters.x_max", 12);
  c.require(x_max > x_min, "parameters.x_max must exceed parameters.x_min");
  c.require(c.number("parameters.packet_sigma", 0.6) > 0,
            "parameters.packet_sigma must be > 0");
  c.number("parameters.packet_x0", 1.0);
  c.number("parameters.packet_k0", 0.0);
  c.require(c.number("parameters.dt", 5e-4) > 0, "parameters.dt must be > 0");
  c.require(c.integer("parameters.steps", 12566) >= 1, "parameters.steps must be >= 1");
  c.require(c.integer("parameters.stride", 100) >= 1, "parameters.stride must be >= 1");
  c.require(c.number("parameters.mass", 1) > 0, "parameters.mass must be > 0");
  c.require(c.number("parameters.hbar", 1) > 0, "parameters.hbar must be > 0");
  c.boolean("parameters.emit_snapshots", false);
  if (c.has("expect.max_deviation"))
    c.require(c.number("expect.max_deviation", 1) > 0,
              "expect.max_deviation must be > 0");
}

void validate_custom(Checker& c) {
  const long long dim = c.integer("parameters.dimension", 8);
  c.require(dim >= 2 && dim <= 32, "parameters.dimension must lie in [2, 32]");
  auto times = c.number_array("parameters.times");
  c.require(!times.empty() && times.size() <= 4,
            "parameters.times must hold 1 to 4 entries");
  double prev = 0;
  for (double t : times) {
    c.require(t > prev, "parameters.times must be strictly increasing and > 0");
    prev = t;
  }
  const long long cells = c.integer("parameters.cells_per_time", 2);
  c.require(cells >= 2 && cells <= 4, "parameters.cells_per_time must lie in [2, 4]");
  c.require(cells <= dim, "parameters.cells_per_time cannot exceed the dimension");
  const std::string kind = c.str("parameters.kind", "generic");
  c.require(kind == "commuting" || kind == "generic",
            "parameters.kind must be commuting or generic");
  c.boolean("expect.consistent", kind == "commuting");
}

std::vector<std::string> validate_table(const toml::Table& table, Config* out) {
  std::vector<std::string> errors;
  Checker c(table, errors);

  Config cfg;
  cfg.raw = table;
  cfg.scenario = c.str("scenario", "");
  const bool known = std::find_if(std::begin(kScenarios), std::end(kScenarios),
                                  [&](const char* s) { return cfg.scenario == s; }) !=
                     std::end(kScenarios);
  if (!known) {
    errors.push_back("unknown scenario '" + cfg.scenario + "'");
    return errors;  // per-scenario keys cannot be checked
  }
  cfg.output_dir = c.str("output_dir", "out");
  const long long seed = c.integer("seed", 0);
  c.require(seed >= 0, "seed must be >= 0");
  cfg.seed = static_cast<std::uint64_t>(std::max<long long>(seed, 0));
  cfg.tol_consistency = c.number("tolerances.consistency", Defaults::consistency_tol);
  c.require(cfg.tol_consistency > 0, "tolerances.consistency must be > 0");
  cfg.tol_branching = c.number("tolerances.branching", Defaults::branching_tol);
  c.require(cfg.tol_branching > 0, "tolerances.branching must be > 0");

  if (cfg.scenario == "automaton") validate_automaton(c);
  if (cfg.scenario == "two_slit") validate_two_slit(c);
  if (cfg.scenario == "ehrenfest") validate_ehrenfest(c);
  if (cfg.scenario == "custom_history_space") validate_custom(c);
  c.finish();

  if (out) *out = cfg;
  return errors;
}

// ---------------------------------------------------------------------------
// Artifact writing
// ---------------------------------------------------------------------------

class ArtifactSink {
 public:
  ArtifactSink(std::string dir, Manifest* manifest)
      : dir_(std::move(dir)), manifest_(manifest) {
    std::filesystem::create_directories(dir_);
  }

  void write(const std::string& name, const std::string& bytes) {
    const std::string path = (std::filesystem::path(dir_) / name).string();
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw Error("cannot write artifact '" + path + "'");
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    out.close();
    manifest_->artifacts.push_back(
        {name, path, bytes.size(), report::fnv1a64_hex(bytes)});
  }

  void write_json(const std::string& name, const json& j) {
    write(name, j.dump(2) + "\n");
  }

 private:
  std::string dir_;
  Manifest* manifest_;
};

double get_number(const toml::Table& t, const std::string& key, double fallback) {
  return t.has(key) ? t.at(key).as_number() : fallback;
}

long long get_int(const toml::Table& t, const std::string& key, long long fallback) {
  return t.has(key) ? t.at(key).integer : fallback;
}

std::string get_str(const toml::Table& t, const std::string& key,
                    const std::string& fallback) {
  return t.has(key) ? t.at(key).str : fallback;
}

bool get_bool(const toml::Table& t, const std::string& key, bool fallback) {
  return t.has(key) ? t.at(key).boolean : fallback;
}

cxd get_complex(const toml::Table& t, const std::string& key, cxd fallback) {
  if (!t.has(key)) return fallback;
  const auto& v = t.at(key);
  if (v.kind == toml::Value::Kind::Array) {
    const double re = v.array.at(0).as_number();
    const double im = v.array.size() > 1 ? v.array.at(1).as_number() : 0.0;
    return {re, im};
  }
  return {v.as_number(), 0.0};
}

// ---------------------------------------------------------------------------
// Scenario runners
// ---------------------------------------------------------------------------

void run_automaton(const Config& cfg, ArtifactSink& sink, Manifest& manifest) {
  const auto& t = cfg.raw;
  cxd c_plus, c_minus;
  if (t.has("parameters.p")) {
    const double p = get_number(t, "parameters.p", 0.5);
    c_plus = std::sqrt(p);
    c_minus = std::sqrt(1 - p);
  } else {
    c_plus = get_complex(t, "parameters.c_plus", 0);
    c_minus = get_complex(t, "parameters.c_minus", 0);
  }
  const int trials = static_cast<int>(get_int(t, "parameters.trials", 1));
  const TrialMode mode = get_str(t, "parameters.mode", "fresh_systems") == "same_system"
                             ? TrialMode::SameSystem
                             : TrialMode::FreshSystems;
  const double cutoff = get_number(t, "parameters.tree_cutoff", 1e-3);
  std::vector<double> epsilons;
  if (t.has("parameters.epsilon")) {
    const auto& v = t.at("parameters.epsilon");
    if (v.kind == toml::Value::Kind::Array)
      for (const auto& e : v.array) epsilons.push_back(e.as_number());
    else
      epsilons.push_back(v.as_number());
  } else {
    epsilons = {0.1, 0.2, 0.3};
  }

  auto ens = run_trials(c_plus, c_minus, trials, mode);

  if (mode == TrialMode::FreshSystems) {
    std::ostringstream freq;
    report::write_frequency_csv(freq, ens);
    sink.write("frequency_classes.csv", freq.str());
  }
  if (ens.branch_count() <= 4096) {
    std::ostringstream branches;
    report::write_ensemble_csv(branches, ens);
    sink.write("branches.csv", branches.str());
  }

  json summary;
  summary["p"] = ens.p;
  summary["trials"] = trials;
  summary["mode"] = mode == TrialMode::SameSystem ? "same_system" : "fresh_systems";
  summary["raw_norm2"] = ens.raw_norm2;
  double weight_sum = 0;
  ens.for_each_branch([&](const BranchRecord& b) { weight_sum += b.weight; });
  summary["weight_sum"] = weight_sum;
  if (std::abs(weight_sum - 1.0) > 1e-10)
    manifest.assertion_failures.push_back("branch weights do not sum to 1");

  if (mode == TrialMode::FreshSystems && ens.p > 0 && ens.p < 1) {
    json bernoulli = json::array();
    const double kappa = 4 * ens.p * (1 - ens.p);
    for (double eps : epsilons) {
      const double amp = deviant_set_amplitude(ens, eps);
      json row;
      row["epsilon"] = eps;
      row["amplitude"] = amp;
      row["envelope"] = bernoulli_envelope(BernoulliParams(ens.p, trials, eps));
      row["log_ratio"] =
          amp > 0 ? std::log(amp) / (-trials * eps * eps / kappa) : 0.0;
      bernoulli.push_back(row);
    }
    summary["bernoulli"] = bernoulli;
  }

  // branch tree: the history-space route where the register fits, the
  // combinatorial route beyond it (identical numbers, see the unit suite)
  BranchTree tree;
  if (trials <= 4) {
    auto proto = MeasurementProtocol::z_basis();
    auto space = automaton_history_space(proto, c_plus, c_minus, trials, mode);
    summary["identity_residual"] = superposition_identity_check(space);
    auto d = decoherence_functional(space);
    auto cons = consistency_check(d, cfg.tol_consistency);
    auto branching = branching_structure_check(space, cfg.tol_branching,
                                               Defaults::conditioning_floor,
                                               cfg.tol_consistency);
    summary["consistency"] = report::consistency_json(cons);
    summary["branching_max_distance"] = branching.max_distance;
    if (!cons.passed)
      manifest.assertion_failures.push_back("automaton space failed consistency");
    if (!branching.passed)
      manifest.assertion_failures.push_back("automaton space failed branching structure");
    tree = extract_branch_tree(space, cutoff, cfg.tol_branching, cfg.tol_consistency);
  } else {
    tree = ensemble_branch_tree(ens, cutoff);
    summary["tree_route"] = "combinatorial";
  }
  sink.write_json("branch_tree.json", report::tree_json(tree));
  sink.write("branch_tree.dot", report::tree_dot(tree));
  sink.write_json("summary.json", summary);
}

void run_two_slit(const Config& cfg, ArtifactSink& sink, Manifest& manifest) {
  const auto& t = cfg.raw;
  TwoSlitGeometry g;
  g.n = get_int(t, "parameters.n", g.n);
  g.x_min = get_number(t, "parameters.x_min", g.x_min);
  g.x_max = get_number(t, "parameters.x_max", g.x_max);
  g.mass = get_number(t, "parameters.mass", g.mass);
  g.hbar = get_number(t, "parameters.hbar", g.hbar);
  g.packet_x0 = get_number(t, "parameters.packet_x0", g.packet_x0);
  g.packet_sigma = get_number(t, "parameters.packet_sigma", g.packet_sigma);
  g.packet_k0 = get_number(t, "parameters.packet_k0", g.packet_k0);
  g.aperture_center = get_number(t, "parameters.aperture_center", g.aperture_center);
  g.aperture_halfwidth =
      get_number(t, "parameters.aperture_halfwidth", g.aperture_halfwidth);
  g.slit_separation = get_number(t, "parameters.slit_separation", g.slit_separation);
  g.slit_halfwidth = get_number(t, "parameters.slit_halfwidth", g.slit_halfwidth);
  g.screen_lo = get_number(t, "parameters.screen_lo", g.screen_lo);
  g.screen_hi = get_number(t, "parameters.screen_hi", g.screen_hi);
  g.t1 = get_number(t, "parameters.t1", g.t1);
  g.t2 = get_number(t, "parameters.t2", g.t2);
  g.t3 = get_number(t, "parameters.t3", g.t3);
  g.which_path_ancilla = get_bool(t, "parameters.which_path", false);
  g.mask_minus_slit = get_bool(t, "parameters.mask_minus", false);

  auto space = two_slit_space(g);
  const double residual = superposition_identity_check(space);
  auto d = decoherence_functional(space);
  sink.write_json("dmatrix.json", report::dmatrix_json(space, d, cfg.tol_consistency));

  const auto hp = two_slit_history(space, true), hm = two_slit_history(space, false);
  Index ip = -1, im = -1;
  for (Index i = 0; i < static_cast<Index>(d.histories.size()); ++i) {
    if (d.histories[i] == hp) ip = i;
    if (d.histories[i] == hm) im = i;
  }
  const double wp = d.entries(ip, ip).real(), wm = d.entries(im, im).real();
  const double pair_offdiag =
      wp > 0 && wm > 0 ? std::abs(d.entries(ip, im)) / std::sqrt(wp * wm) : 0.0;

  json rep;
  rep["identity_residual"] = residual;
  rep["slit_pair"] = {{"weight_plus", wp},
                      {"weight_minus", wm},
                      {"normalized_offdiag", pair_offdiag}};
  if (residual > 1e-8)
    manifest.assertion_failures.push_back("chain superposition identity violated");

  if (!g.mask_minus_slit) {
    CoarsePartition merge;
    merge.coarse_of = {{0, 1}, {0, 0, 1}, {0, 1}};
    const double violation = sum_rule_violation(space, merge);
    rep["sum_rule_violation_slit_merge"] = violation;
    if (g.which_path_ancilla) {
      rep["expectation"] = "slit pair decoheres (which-path record)";
      if (pair_offdiag >= 1e-8)
        manifest.assertion_failures.push_back(
            "which-path record failed to decohere the slit pair");
    } else {
      rep["expectation"] = "inconsistent, as expected";
      if (pair_offdiag <= 0.01)
        manifest.assertion_failures.push_back(
            "two-slit interference below the expected threshold");
      if (violation <= 0.01)
        manifest.assertion_failures.push_back(
            "sum-rule violation below the expected threshold");
    }
  } else {
    auto cons = consistency_check(d, cfg.tol_consistency);
    rep["consistency"] = report::consistency_json(cons);
    rep["expectation"] = "consistent (one slit masked)";
    if (!cons.passed)
      manifest.assertion_failures.push_back("masked two-slit space failed consistency");
  }
  sink.write_json("report.json", rep);
}

void run_ehrenfest(const Config& cfg, ArtifactSink& sink, Manifest& manifest) {
  const auto& t = cfg.raw;
  const std::string kind = get_str(t, "parameters.potential", "harmonic");
  PotentialSpec v = PotentialSpec::free_particle();
  const double mass = get_number(t, "parameters.mass", 1.0);
  if (kind == "harmonic")
    v = PotentialSpec::harmonic(get_number(t, "parameters.omega", 1.0), mass);
  if (kind == "quartic")
    v = PotentialSpec::quartic(get_number(t, "parameters.lambda", 0.25));

  auto packet = gaussian_packet(
      get_int(t, "parameters.n", 2048), get_number(t, "parameters.x_min", -12),
      get_number(t, "parameters.x_max", 12), get_number(t, "parameters.packet_x0", 1.0),
      get_number(t, "parameters.packet_sigma", 0.6),
      get_number(t, "parameters.packet_k0", 0.0), mass,
      get_number(t, "parameters.hbar", 1.0));
  const double dt = get_number(t, "parameters.dt", 5e-4);
  const long steps = get_int(t, "parameters.steps", 12566);
  const long stride = get_int(t, "parameters.stride", 100);

  auto traj = split_step_evolve(packet, v, dt, steps, stride);
  auto quantum = ehrenfest_track(traj);
  auto classical =
      classical_trajectory(v, {quantum[0].x_mean, quantum[0].p_mean}, mass, dt, steps,
                           stride);
  auto dev = ehrenfest_deviation(quantum, classical);

  std::ostringstream csv;
  report::write_trajectory_csv(csv, quantum, classical, dev);
  sink.write("deviation.csv", csv.str());

  if (get_bool(t, "parameters.emit_snapshots", false)) {
    std::ostringstream first, last;
    report::write_snapshot_csv(first, traj.front().state);
    report::write_snapshot_csv(last, traj.back().state);
    sink.write("snapshot_initial.csv", first.str());
    sink.write("snapshot_final.csv", last.str());
  }

  json summary;
  summary["potential"] = kind;
  summary["max_deviation"] = dev.max_abs;
  summary["rms_deviation"] = dev.rms;
  summary["exceeds_packet_width"] = dev.exceeds_packet_width;
  summary["final_norm2"] = traj.back().state.norm2();
  if (t.has("expect.max_deviation")) {
    const double bound = get_number(t, "expect.max_deviation", 0);
    summary["expected_max_deviation"] = bound;
    if (dev.max_abs > bound)
      manifest.assertion_failures.push_back(
          "deviation " + report::format_double(dev.max_abs) +
          " exceeds the expected bound " + report::format_double(bound));
  }
  sink.write_json("summary.json", summary);
}

void run_custom(const Config& cfg, ArtifactSink& sink, Manifest& manifest) {
  const auto& t = cfg.raw;
  const Index dim = get_int(t, "parameters.dimension", 8);
  const Index cells = get_int(t, "parameters.cells_per_time", 2);
  const std::string kind = get_str(t, "parameters.kind", "generic");
  std::vector<double> times;
  const auto& tv = t.at("parameters.times");
  if (tv.kind == toml::Value::Kind::Array)
    for (const auto& e : tv.array) times.push_back(e.as_number());
  else
    times.push_back(tv.as_number());

  std::mt19937_64 gen(cfg.seed);
  auto family_from = [&](const MatrixXcd& basis, int time_index) {
    std::vector<CellLabel> labels;
    std::vector<CellProjector> projs;
    const Index base = dim / cells, extra = dim % cells;
    Index at = 0;
    for (Index g = 0; g < cells; ++g) {
      const Index count = base + (g < extra ? 1 : 0);
      MatrixXcd p = MatrixXcd::Zero(dim, dim);
      for (Index j = at; j < at + count; ++j) p += basis.col(j) * basis.col(j).adjoint();
      at += count;
      labels.emplace_back("t" + std::to_string(time_index) + "c" + std::to_string(g));
      projs.push_back(CellProjector::dense(OperatorXd(p)));
    }
    return CellFamily(std::move(labels), std::move(projs));
  };

  MatrixXcd shared_basis = haar_unitary(dim, gen);
  Eigen::VectorXd evals(dim);
  for (Index i = 0; i < dim; ++i) evals[i] = gaussian(gen);
  MatrixXcd h;
  std::vector<CellFamily> families;
  if (kind == "commuting") {
    h = shared_basis * evals.asDiagonal() * shared_basis.adjoint();
    for (size_t k = 0; k < times.size(); ++k)
      families.push_back(family_from(shared_basis, static_cast<int>(k)));
  } else {
    MatrixXcd m(dim, dim);
    for (Index i = 0; i < dim; ++i)
      for (Index j = 0; j < dim; ++j) m(i, j) = cxd(gaussian(gen), gaussian(gen));
    h = (m + m.adjoint()) / 2;
    for (size_t k = 0; k < times.size(); ++k)
      families.push_back(family_from(haar_unitary(dim, gen), static_cast<int>(k)));
  }
  VectorXcd psi(dim);
  for (Index i = 0; i < dim; ++i) psi[i] = cxd(gaussian(gen), gaussian(gen));
  psi.normalize();

  auto prop = std::make_shared<EigenbasisPropagator<double>>(
      OperatorXd((h + h.adjoint()) / 2));
  HistorySpace space(StateVectorXd(psi), prop, times, families,
                     OperatorXd((h + h.adjoint()) / 2));

  const double residual = superposition_identity_check(space);
  auto d = decoherence_functional(space);
  auto cons = consistency_check(d, cfg.tol_consistency);
  sink.write_json("dmatrix.json", report::dmatrix_json(space, d, cfg.tol_consistency));

  CoarsePartition total;
  for (Index k = 0; k < space.n_times(); ++k)
    total.coarse_of.push_back(std::vector<Index>(space.family(k).size(), 0));

  json rep;
  rep["kind"] = kind;
  rep["identity_residual"] = residual;
  rep["consistency"] = report::consistency_json(cons);
  rep["sum_rule_violation_total_merge"] = sum_rule_violation(space, total);
  if (residual > 1e-8)
    manifest.assertion_failures.push_back("chain superposition identity violated");

  const bool expect_consistent = get_bool(t, "expect.consistent", kind == "commuting");
  rep["expected_consistent"] = expect_consistent;
  if (cons.passed != expect_consistent)
    manifest.assertion_failures.push_back(
        std::string("consistency expectation violated: expected ") +
        (expect_consistent ? "consistent" : "inconsistent"));

  if (cons.passed) {
    auto branching = branching_structure_check(space, cfg.tol_branching,
                                               Defaults::conditioning_floor,
                                               cfg.tol_consistency);
    rep["branching_max_distance"] = branching.max_distance;
    if (branching.passed) {
      auto tree = extract_branch_tree(space, 1e-4, cfg.tol_branching,
                                      cfg.tol_consistency);
      sink.write_json("branch_tree.json", report::tree_json(tree));
    }
  }
  sink.write_json("report.json", rep);
}

}  // namespace

std::vector<std::pair<std::string, std::string>> known_scenarios() {
  return {
      {"automaton", "repeated two-outcome measurements: branch ensembles, "
                    "frequency classes, Bernoulli envelope, branch tree"},
      {"two_slit", "double-slit history space: decoherence functional, sum-rule "
                   "violation, which-path and masked-slit variants"},
      {"ehrenfest", "wave-packet expectation values against a classical "
                    "trajectory for free/harmonic/quartic potentials"},
      {"custom_history_space", "seeded random history space (commuting or "
                               "generic) with consistency and sum-rule reports"},
  };
}

ValidationResult validate_config(const std::string& path) {
  ValidationResult result;
  toml::Table table;
  try {
    table = toml::parse_file(path);
  } catch (const ConfigError& e) {
    result.errors.push_back(e.what());
    return result;
  }
  result.errors = validate_table(table, nullptr);
  return result;
}

Manifest run_scenario(const std::string& path, const Overrides& overrides) {
  toml::Table table = toml::parse_file(path);  // ConfigError propagates
  Config cfg;
  auto errors = validate_table(table, &cfg);
  if (!errors.empty()) {
    std::string joined = "invalid config:";
    for (const auto& e : errors) joined += "\n  " + e;
    throw ConfigError(joined);
  }
  if (overrides.output_dir) cfg.output_dir = *overrides.output_dir;
  if (overrides.seed) cfg.seed = *overrides.seed;
  if (overrides.tol_consistency) cfg.tol_consistency = *overrides.tol_consistency;
  if (overrides.tol_branching) cfg.tol_branching = *overrides.tol_branching;

  Manifest manifest;
  manifest.scenario = cfg.scenario;
  manifest.config_path = path;
  manifest.seed = cfg.seed;
  {
    std::ifstream in(path, std::ios::binary);
    std::ostringstream buf;
    buf << in.rdbuf();
    manifest.config_checksum = report::fnv1a64_hex(buf.str());
  }

  ArtifactSink sink(cfg.output_dir, &manifest);
  if (cfg.scenario == "automaton") run_automaton(cfg, sink, manifest);
  if (cfg.scenario == "two_slit") run_two_slit(cfg, sink, manifest);
  if (cfg.scenario == "ehrenfest") run_ehrenfest(cfg, sink, manifest);
  if (cfg.scenario == "custom_history_space") run_custom(cfg, sink, manifest);

  json j;
  j["scenario"] = manifest.scenario;
  j["config_checksum"] = manifest.config_checksum;
  j["seed"] = manifest.seed;
  j["status"] = manifest.assertion_failures.empty() ? "ok" : "assertion_failed";
  j["assertion_failures"] = manifest.assertion_failures;
  j["notes"] = manifest.notes;
  json artifacts = json::array();
  for (const auto& a : manifest.artifacts)
    artifacts.push_back(
        {{"name", a.name}, {"bytes", a.bytes}, {"fnv1a64", a.checksum}});
  j["artifacts"] = artifacts;
  const std::string manifest_path =
      (std::filesystem::path(cfg.output_dir) / "manifest.json").string();
  std::ofstream out(manifest_path, std::ios::binary | std::ios::trunc);
  out << j.dump(2) << "\n";
  return manifest;
}

}  // namespace qbranch::scenario
