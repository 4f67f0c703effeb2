#ifndef ENTLAB_SCENARIO_HPP
#define ENTLAB_SCENARIO_HPP

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <map>
#include <optional>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

#include "entlab/dissipation.hpp"
#include "entlab/io.hpp"
#include "entlab/reversal.hpp"
#include "entlab/transport.hpp"

namespace entlab::scenario {

using nlohmann::json;

// ---------------------------------------------------------------------------
// Source positions for diagnostics

namespace detail {

// Maps JSON pointers to the line they start on. Assumes the text already parsed.
class JsonLocator {
 public:
  explicit JsonLocator(std::string_view text) : s_(text) { value(""); }

  int line_of(std::string ptr) const {
    while (true) {
      if (auto it = lines_.find(ptr); it != lines_.end()) return it->second;
      const auto cut = ptr.rfind('/');
      if (cut == std::string::npos || ptr.empty()) return 0;
      ptr.erase(cut);
    }
  }

 private:
  char peek() const { return pos_ < s_.size() ? s_[pos_] : '\0'; }
  void ws() {
    while (pos_ < s_.size() && std::isspace(static_cast<unsigned char>(s_[pos_]))) {
      if (s_[pos_] == '\n') ++line_;
      ++pos_;
    }
  }
  std::string string() {
    std::string out;
    ++pos_;
    while (pos_ < s_.size() && s_[pos_] != '"') {
      if (s_[pos_] == '\\') ++pos_;
      if (pos_ < s_.size()) out += s_[pos_++];
    }
    ++pos_;
    return out;
  }
  void value(const std::string& path) {
    ws();
    const char c = peek();
    if (c == '{') {
      ++pos_;
      ws();
      if (peek() == '}') {
        ++pos_;
        return;
      }
      while (pos_ < s_.size()) {
        ws();
        const int line = line_;
        const std::string key = path + "/" + string();
        lines_[key] = line;
        ws();
        ++pos_;  // ':'
        value(key);
        ws();
        if (peek() == ',') {
          ++pos_;
          continue;
        }
        ++pos_;
        return;
      }
    } else if (c == '[') {
      ++pos_;
      ws();
      if (peek() == ']') {
        ++pos_;
        return;
      }
      for (int i = 0; pos_ < s_.size(); ++i) {
        ws();
        const std::string key = path + "/" + std::to_string(i);
        lines_[key] = line_;
        value(key);
        ws();
        if (peek() == ',') {
          ++pos_;
          continue;
        }
        ++pos_;
        return;
      }
    } else if (c == '"') {
      string();
    } else {
      while (pos_ < s_.size() && std::string_view(",}] \t\r\n").find(s_[pos_]) == std::string_view::npos) ++pos_;
    }
  }

  std::string_view s_;
  std::size_t pos_ = 0;
  int line_ = 1;
  std::map<std::string, int> lines_;
};

}  // namespace detail

class ConfigSource {
 public:
  ConfigSource(std::string name, std::string text) : name_(std::move(name)), text_(std::move(text)) {
    try {
      root_ = json::parse(text_);
    } catch (const json::parse_error& e) {
      std::size_t line = 1, col = 1;
      for (std::size_t i = 0; i + 1 < e.byte && i < text_.size(); ++i) {
        if (text_[i] == '\n') {
          ++line;
          col = 1;
        } else {
          ++col;
        }
      }
      std::ostringstream os;
      os << name_ << ":" << line << ":" << col << ": syntax error: " << e.what();
      fail(ErrorKind::config, os.str());
    }
    locator_.emplace(text_);
  }

  const json& root() const { return root_; }
  const std::string& name() const { return name_; }

  [[noreturn]] void error(const std::string& ptr, const std::string& msg) const {
    std::ostringstream os;
    os << name_;
    if (const int line = locator_->line_of(ptr); line > 0) os << ":" << line;
    os << ": " << (ptr.empty() ? "/" : ptr) << ": " << msg;
    fail(ErrorKind::config, os.str());
  }

 private:
  std::string name_;
  std::string text_;
  json root_;
  std::optional<detail::JsonLocator> locator_;
};

// Strict object reader: every key must be consumed before done().
class Fields {
 public:
  Fields(const ConfigSource& src, const json& j, std::string ptr) : src_(src), j_(j), ptr_(std::move(ptr)) {
    if (!j_.is_object()) src_.error(ptr_, "expected an object");
  }

  std::string at(const std::string& key) const { return ptr_ + "/" + key; }
  bool has(const std::string& key) const { return j_.contains(key); }

  const json* find(const std::string& key) {
    seen_.insert(key);
    const auto it = j_.find(key);
    return it == j_.end() ? nullptr : &*it;
  }

  double number(const std::string& key, std::optional<double> def = std::nullopt) {
    const json* v = find(key);
    if (v == nullptr) {
      if (!def) src_.error(at(key), "required number is missing");
      return *def;
    }
    if (!v->is_number()) src_.error(at(key), "expected a number");
    const double x = v->get<double>();
    if (!std::isfinite(x)) src_.error(at(key), "must be finite");
    return x;
  }

  double positive(const std::string& key, std::optional<double> def = std::nullopt) {
    const double x = number(key, def);
    if (!(x > 0.0)) src_.error(at(key), "must be positive");
    return x;
  }

  std::uint64_t count(const std::string& key, std::uint64_t def) {
    const json* v = find(key);
    if (v == nullptr) return def;
    if (v->is_number_unsigned()) return v->get<std::uint64_t>();
    if (v->is_number_float()) {
      const double x = v->get<double>();
      if (x >= 0.0 && x == std::floor(x) && x < 1.8e19) return static_cast<std::uint64_t>(x);
    }
    src_.error(at(key), "expected a nonnegative integer");
  }

  bool flag(const std::string& key, bool def) {
    const json* v = find(key);
    if (v == nullptr) return def;
    if (!v->is_boolean()) src_.error(at(key), "expected true or false");
    return v->get<bool>();
  }

  std::string text(const std::string& key, std::optional<std::string> def = std::nullopt) {
    const json* v = find(key);
    if (v == nullptr) {
      if (!def) src_.error(at(key), "required string is missing");
      return *def;
    }
    if (!v->is_string()) src_.error(at(key), "expected a string");
    return v->get<std::string>();
  }

  // A scalar sets the first coordinate; an array must have `dim` entries.
  Vec vec(const std::string& key, int dim, Vec def = {}) {
    const json* v = find(key);
    if (v == nullptr) return def;
    Vec out{};
    if (v->is_number()) {
      out[0] = v->get<double>();
      return out;
    }
    if (!v->is_array() || static_cast<int>(v->size()) != dim)
      src_.error(at(key), "expected a number or an array of " + std::to_string(dim) + " numbers");
    for (int a = 0; a < dim; ++a) {
      if (!(*v)[a].is_number()) src_.error(at(key) + "/" + std::to_string(a), "expected a number");
      out[a] = (*v)[a].get<double>();
    }
    return out;
  }

  void done() const {
    for (const auto& [k, v] : j_.items())
      if (!seen_.count(k)) src_.error(at(k), "unknown key");
  }

 private:
  const ConfigSource& src_;
  const json& j_;
  std::string ptr_;
  std::set<std::string> seen_;
};

// ---------------------------------------------------------------------------
// Config

struct PotentialConfig {
  std::string kind = "quadratic";
  double kappa = 1.0;
  double a = 1.0;
  double b = 0.0;
  double growth_constant = 10.0;
};

struct PerturbationConfig {
  double amplitude = 0.5;
  double radius = 1.0;
  Vec center{};
  double t0 = 0.0;
};

struct InitialConfig {
  std::string kind = "gaussian";  // gaussian | stationary | file
  Vec mean{};
  double variance = 0.25;
  std::string path;
  std::uint64_t snapshot = 0;
};

struct DumpConfig {
  bool paths = false;
  bool densities = false;
  bool ledger = false;
  std::uint64_t path_count = 1000;
};

struct CheckConfig {
  std::string name;
  json params;  // defaults merged with the user's values
};

struct ScenarioConfig {
  std::string name;
  std::uint64_t seed = 0;
  int dim = 1;
  PotentialConfig potential;
  std::optional<PerturbationConfig> perturbation;
  InitialConfig initial;
  double lower = -6.0, upper = 6.0;
  int cells = 512;
  std::uint64_t ensemble = 10000;
  double dt = 1e-3;
  double fpe_dt = 2.5e-4;
  int record_every = 4;
  double T = 1.0;
  double t0 = 0.0;
  std::vector<CheckConfig> checks;
  std::string output_dir = "out";
  DumpConfig dump;
  std::filesystem::path base_dir;  // for relative file references

  GridSpec grid() const { return dim == 1 ? GridSpec::line(lower, upper, cells) : GridSpec::square(lower, upper, cells); }
  double interval() const { return fpe_dt * record_every; }
  const CheckConfig* find_check(const std::string& n) const {
    for (const auto& c : checks)
      if (c.name == n) return &c;
    return nullptr;
  }
};

// ---------------------------------------------------------------------------
// Run context: lazily built solver outputs shared between checks

inline bool on_lattice(double t, double step) {
  const double r = t / step;
  return std::abs(r - std::round(r)) <= 1e-9 * std::max(1.0, r);
}

class Context {
 public:
  explicit Context(const ScenarioConfig& cfg) : cfg_(cfg), grid_(cfg.grid()) {
    const auto& pc = cfg.potential;
    pot_ = pc.kind == "quadratic" ? Potential::quadratic(cfg.dim, pc.kappa)
                                  : Potential::double_well(cfg.dim, pc.a, pc.b, pc.growth_constant);
    if (cfg.perturbation) pert_ = make_bump(cfg.perturbation->t0);
    p0_ = initial_density();
  }

  template <class F>
  auto timed(const std::string& stage, F&& f) {
    const auto t = std::chrono::steady_clock::now();
    auto out = f();
    timings.push_back({stage, std::chrono::duration<double>(std::chrono::steady_clock::now() - t).count()});
    return out;
  }

  const ScenarioConfig& cfg() const { return cfg_; }
  const Potential& pot() const { return *pot_; }
  PerturbationRef pert() const { return pert_ ? &*pert_ : nullptr; }
  const GridSpec& grid() const { return grid_; }
  const GridDensity& p0() const { return p0_; }

  Perturbation make_bump(double t0) const {
    const auto& p = *cfg_.perturbation;
    return Perturbation::bump(cfg_.dim, p.amplitude, p.radius, p.center, t0);
  }

  // Derivative checks are taken at the activation time when a perturbation is present.
  double anchor_time() const { return pert_ ? pert_->activation_time() : cfg_.t0; }

  FpeSolution run_fpe(PerturbationRef pert, double dt, int record_every, double T, const std::string& stage) {
    return timed(stage, [&] {
      FpeOptions fo;
      fo.record_every = record_every;
      return solve_fpe(p0_, *pot_, pert, dt, T, fo);
    });
  }

  const FpeSolution& fpe(bool perturbed) {
    auto& slot = perturbed && pert_ ? perturbed_ : free_;
    if (!slot)
      slot = run_fpe(perturbed ? pert() : nullptr, cfg_.fpe_dt, cfg_.record_every, cfg_.T,
                     perturbed && pert_ ? "fpe_perturbed" : "fpe");
    return *slot;
  }

  const ScoreTable& scores() {
    if (!scores_) scores_.emplace(fpe(true), *pot_);
    return *scores_;
  }

  // Unperturbed H and I at every solver step.
  const EntropyReport& tracked(double dt) {
    auto it = tracked_.find(dt);
    if (it != tracked_.end()) return it->second;
    EntropyTracker tr(grid_, *pot_, nullptr);
    timed("fpe_tracked", [&] {
      FpeOptions fo;
      fo.record_every = 1 << 30;
      fo.observer = std::ref(tr);
      solve_fpe(p0_, *pot_, nullptr, dt, cfg_.T, fo);
      return 0;
    });
    return tracked_.emplace(dt, tr.take()).first->second;
  }

  EnsembleState initial(std::size_t n, std::uint64_t salt = 0) const {
    const std::uint64_t seed = cfg_.seed + salt;
    if (cfg_.initial.kind == "gaussian")
      return EnsembleState::gaussian(n, cfg_.dim, cfg_.initial.mean, cfg_.initial.variance, seed);
    return EnsembleState::from_points(cfg_.dim, sample_grid_density(p0_, n, seed ^ 0x5bd1e995u), seed);
  }

  // Backward ensemble at reversed time `start`, drawn from the perturbed-run snapshot.
  EnsembleState reversed_start(double start, std::size_t n, std::uint64_t salt = 0) {
    const FpeSolution& sol = fpe(true);
    const std::uint64_t seed = cfg_.seed + salt;
    return EnsembleState::from_points(cfg_.dim, sample_grid_density(sol.at(sol.horizon() - start), n, seed), seed,
                                      start);
  }

  std::optional<TrajectorialLedger> ledger;
  std::optional<PathBundle> paths;
  std::vector<io::Timing> timings;

 private:
  GridDensity initial_density() const {
    const auto& ic = cfg_.initial;
    GridDensity p;
    if (ic.kind == "gaussian") {
      p = gaussian_density(grid_, ic.mean, ic.variance);
    } else if (ic.kind == "stationary") {
      const Potential& pot = *pot_;
      p = discretize(grid_, [&](const Vec& x) { return std::exp(-2.0 * pot.value(x)); });
    } else {
      const auto path = (cfg_.base_dir / ic.path).string();
      auto snaps = io::read_grid_snapshots(path);
      if (ic.snapshot >= snaps.size()) fail(ErrorKind::config, path + ": snapshot index out of range");
      p = std::move(snaps[ic.snapshot]);
      if (!p.grid.same_as(grid_)) fail(ErrorKind::config, path + ": snapshot grid differs from the scenario grid");
    }
    p.time = 0.0;
    normalize(p);
    return p;
  }

  const ScenarioConfig& cfg_;
  GridSpec grid_;
  std::optional<Potential> pot_;
  std::optional<Perturbation> pert_;
  GridDensity p0_;
  std::optional<FpeSolution> free_, perturbed_;
  std::optional<ScoreTable> scores_;
  std::map<double, EntropyReport> tracked_;
};

// ---------------------------------------------------------------------------
// Check registry

struct Params {
  const json& j;
  double num(const char* k) const { return j.at(k).get<double>(); }
  std::size_t count(const char* k) const { return static_cast<std::size_t>(j.at(k).get<double>()); }
  bool flag(const char* k) const { return j.at(k).get<bool>(); }
  bool is_auto(const char* k) const { return j.at(k).is_null(); }
  double num_or(const char* k, double def) const { return is_auto(k) ? def : num(k); }
  std::vector<double> list(const char* k) const { return j.at(k).get<std::vector<double>>(); }
};

using CheckFn = std::function<void(Context&, const Params&, std::vector<CheckReport>&)>;

struct CheckEntry {
  std::string name;
  std::string description;
  std::string anchor;
  json defaults;
  CheckFn run;
  bool needs_perturbation = false;
  bool one_dimensional = false;
  bool needs_quadratic = false;
};

namespace detail {

inline CheckReport renamed(CheckReport r, const std::string& name) {
  r.name = name;
  return r;
}

// Control passes when the wrapped test rejects.
inline CheckReport negative_control(const CheckReport& c, const std::string& name, bool rejected,
                                    const std::string& what) {
  CheckReport r = c;
  r.name = name;
  r.pass = rejected;
  r.notes.insert(r.notes.begin(), "negative control (" + what + "); passes when the test rejects");
  return r;
}

inline std::vector<double> reversed_checkpoints(double T, int n) {
  std::vector<double> cps;
  for (int k = 0; k <= n; ++k) cps.push_back(T * k / n);
  return cps;
}

inline double uniform01(std::mt19937_64& g) { return static_cast<double>(g() >> 11) * 0x1.0p-53; }

inline GridDensity normalized_gaussian(const GridSpec& g, const Vec& m, double s2) {
  GridDensity p = gaussian_density(g, m, s2);
  normalize(p);
  return p;
}

// H and I of N(m, s2 I) against e^{-kappa |x|^2}; grad R = a x + b.
inline std::pair<double, double> gaussian_closed_form(const Vec& m, double s2, double kappa, int d) {
  double m2 = 0.0;
  for (int i = 0; i < d; ++i) m2 += m[i] * m[i];
  const double H = d * (-0.5 * std::log(2.0 * std::numbers::pi * s2) - 0.5) + kappa * (m2 + d * s2);
  const double a = 2.0 * kappa - 1.0 / s2;
  const double I = a * a * (m2 + d * s2) + 2.0 * a * m2 / s2 + m2 / (s2 * s2);
  return {H, I};
}

// beta = lambda grad R at t0, built from the grid field; the support ball covers the whole grid.
inline Perturbation parallel_field(const GridDensity& p, const Potential& pot, double lambda, double t0) {
  const GridSpec& g = p.grid;
  auto R = std::make_shared<std::vector<double>>(log_likelihood_field(p, pot));
  auto G = std::make_shared<std::vector<Vec>>(log_likelihood_gradient(p, pot));
  auto div = std::make_shared<std::vector<double>>(g.size(), 0.0);
  for (int a = 0; a < g.dim; ++a) {
    std::vector<double> comp(g.size());
    for (std::size_t k = 0; k < g.size(); ++k) comp[k] = (*G)[k][a];
    const auto dg = log_gradient(g, comp);
    for (std::size_t k = 0; k < g.size(); ++k) (*div)[k] += dg[k][a];
  }
  Vec center{};
  double radius2 = 0.0;
  for (int a = 0; a < g.dim; ++a) {
    center[a] = 0.5 * (g.axes[a].lower + g.axes[a].upper);
    const double h = 0.5 * (g.axes[a].upper - g.axes[a].lower);
    radius2 += h * h;
  }
  return Perturbation::custom(
      g.dim, [g, R, lambda](const Vec& x) { return lambda * interpolate(g, *R, x); },
      [g, G, lambda](const Vec& x) { return lambda * interpolate_field(g, *G, x); },
      [g, div, lambda](const Vec& x) { return lambda * interpolate(g, *div, x); }, center, 1.01 * std::sqrt(radius2),
      t0);
}

inline double w2_to_density(const GridDensity& p, std::span<const double> positions) {
  if (p.grid.dim == 1) return w2_samples_to_density(positions, p);
  return w2_grid(histogram(p.grid, positions, p.grid.dim, p.time), p);
}

}  // namespace detail

inline const std::vector<CheckEntry>& registry() {
  using detail::renamed;
  static const std::vector<CheckEntry> entries = [] {
    std::vector<CheckEntry> e;

    e.push_back({"backward_brownian", "reconstructed backward noise passes the Brownian null tests",
                 "backward Brownian motion of the reversed diffusion",
                 {{"checkpoints", 10}, {"negative_control", true}},
                 [](Context& c, const Params& p, std::vector<CheckReport>& out) {
                   const auto& cfg = c.cfg();
                   ReconstructionOptions o;
                   o.checkpoints = static_cast<int>(p.count("checkpoints"));
                   const auto init = c.initial(cfg.ensemble);
                   out.push_back(renamed(reconstruction_check(init, c.pot(), c.pert(), cfg.dt, cfg.T, c.scores(), o),
                                         "backward_brownian"));
                   if (p.flag("negative_control")) {
                     o.score_correction = false;
                     const auto bad = reconstruction_check(init, c.pot(), c.pert(), cfg.dt, cfg.T, c.scores(), o);
                     const double corr = bad.find("terminal_corr_pass") ? *bad.find("terminal_corr_pass") : 1.0;
                     out.push_back(detail::negative_control(bad, "backward_brownian_control", corr == 0.0,
                                                            "score term omitted"));
                   }
                 }});

    e.push_back({"backward_marginal", "backward ensemble at reversed time T matches the initial density in W2",
                 "time-reversed diffusion marginal",
                 {{"tolerance", 0.05}},
                 [](Context& c, const Params& p, std::vector<CheckReport>& out) {
                   const auto& cfg = c.cfg();
                   const auto res = simulate_backward(c.reversed_start(0.0, cfg.ensemble), c.scores(), c.pert(), cfg.dt);
                   CheckReport r;
                   r.name = "backward_marginal";
                   r.anchor = "time-reversed diffusion marginal";
                   r.lhs = detail::w2_to_density(c.p0(), res.final_state.positions);
                   r.rhs = 0.0;
                   r.tolerance = p.num("tolerance");
                   r.abs_gap = r.lhs;
                   r.rel_gap = r.lhs;
                   r.pass = r.lhs < r.tolerance;
                   r.metric("paths", static_cast<double>(cfg.ensemble));
                   out.push_back(r);
                 }});

    e.push_back({"de_bruijn", "dH/dt + I/2 vanishes along the unperturbed flow",
                 "classical entropy dissipation identity",
                 {{"tolerance", 0.02}, {"t_min", 0.1}, {"t_max", nullptr}},
                 [](Context& c, const Params& p, std::vector<CheckReport>& out) {
                   DeBruijnOptions o;
                   o.tolerance = p.num("tolerance");
                   o.t_min = p.num("t_min");
                   o.t_max = p.num_or("t_max", c.cfg().T);
                   out.push_back(de_bruijn_check(c.tracked(c.cfg().fpe_dt), o));
                 }});

    e.push_back({"de_bruijn_refinement", "de Bruijn gap shrinks when the FPE step is halved",
                 "classical entropy dissipation identity",
                 {{"tolerance", 0.02}, {"t_min", 0.1}, {"t_max", nullptr}, {"min_ratio", 1.8}},
                 [](Context& c, const Params& p, std::vector<CheckReport>& out) {
                   DeBruijnOptions o;
                   o.tolerance = p.num("tolerance");
                   o.t_min = p.num("t_min");
                   o.t_max = p.num_or("t_max", c.cfg().T);
                   const double dt = c.cfg().fpe_dt;
                   const EntropyReport& coarse = c.tracked(dt);
                   out.push_back(renamed(de_bruijn_refinement(coarse, c.tracked(0.5 * dt), o, p.num("min_ratio")),
                                         "de_bruijn_refinement"));
                 }});

    e.push_back({"displacement_identity", "H(t) - H(t0) equals the integrated dissipation and perturbation terms",
                 "entropy displacement identity",
                 {{"tolerance", 0.02}, {"from", nullptr}, {"to", nullptr}},
                 [](Context& c, const Params& p, std::vector<CheckReport>& out) {
                   DisplacementIdentityOptions o;
                   o.tolerance = p.num("tolerance");
                   out.push_back(displacement_identity_check(c.fpe(true), c.pot(), c.pert(),
                                                             p.num_or("from", c.anchor_time()),
                                                             p.num_or("to", c.cfg().T), o));
                 }});

    e.push_back({"drift_condition", "x . grad(psi) >= -C |x|^2 outside the ball of radius R",
                 "drift condition x.grad(psi) >= -C|x|^2",
                 {{"C", 1.0}, {"R", 1.0}, {"extent", 8.0}, {"points", 201}},
                 [](Context& c, const Params& p, std::vector<CheckReport>& out) {
                   const double L = p.num("extent");
                   const auto pts = box_samples(c.cfg().dim, -L, L, static_cast<int>(p.count("points")));
                   out.push_back(check_drift_condition(c.pot(), p.num("C"), p.num("R"), pts));
                 }});

    e.push_back({"exponential_decay", "H(t) <= H(t0) exp(-kappa (t - t0)) on the positive range; late slope reported",
                 "exponential decay of relative entropy",
                 {{"late_fraction", 0.5}},
                 [](Context& c, const Params& p, std::vector<CheckReport>& out) {
                   DecayOptions o;
                   o.t0 = c.cfg().t0;
                   o.late_fraction = p.num("late_fraction");
                   const auto rep = entropy_report(c.fpe(false), c.pot());
                   out.push_back(exponential_decay_check(rep, curvature_of(c.pot(), c.grid()),
                                                         log_reference_mass(c.grid(), c.pot()), o));
                 }});

    e.push_back({"forward_defect", "E[lap(l)/l - 2 grad R . grad psi] vanishes (integration by parts)",
                 "forward semimartingale defect",
                 {{"time", nullptr}},
                 [](Context& c, const Params& p, std::vector<CheckReport>& out) {
                   out.push_back(forward_defect_check(c.fpe(false).at(p.num_or("time", c.cfg().T)), c.pot()));
                 }});

    e.push_back({"gaussian_oracle", "grid H and I match closed forms for Gaussians",
                 "relative entropy and Fisher information of Gaussians",
                 {{"tolerance", 1e-3},
                  {"means", {-2.0, -1.0, 0.0, 0.5, 1.0, 2.0}},
                  {"variances", {0.1, 0.25, 0.5, 1.0, 1.5, 2.0}}},
                 [](Context& c, const Params& p, std::vector<CheckReport>& out) {
                   const ReferenceMeasure m{c.pot()};
                   const int d = c.cfg().dim;
                   CheckReport r;
                   r.name = "gaussian_oracle";
                   r.anchor = "relative entropy and Fisher information of Gaussians";
                   r.tolerance = p.num("tolerance");
                   double worst_h = 0.0, worst_i = 0.0;
                   std::size_t cases = 0;
                   for (double mean : p.list("means"))
                     for (double s2 : p.list("variances")) {
                       const Vec mv{mean, 0.0, 0.0};
                       const auto g = detail::normalized_gaussian(c.grid(), mv, s2);
                       const auto [Ho, Io] = detail::gaussian_closed_form(mv, s2, c.pot().kappa(), d);
                       const double eh = std::abs(relative_entropy(g, m) - Ho) / std::max(std::abs(Ho), 1.0);
                       const double ei = std::abs(fisher_information(g, m) - Io) / std::max(std::abs(Io), 1.0);
                       if (eh > worst_h || ei > worst_i) {
                         r.lhs = std::max(eh, ei);
                         r.metric("worst_mean", mean);
                         r.metric("worst_variance", s2);
                       }
                       worst_h = std::max(worst_h, eh);
                       worst_i = std::max(worst_i, ei);
                       ++cases;
                     }
                   r.lhs = std::max(worst_h, worst_i);
                   r.rhs = 0.0;
                   r.abs_gap = r.lhs;
                   r.rel_gap = r.lhs;
                   r.pass = r.lhs < r.tolerance;
                   r.metric("cases", static_cast<double>(cases));
                   r.metric("max_rel_error_H", worst_h);
                   r.metric("max_rel_error_I", worst_i);
                   out.push_back(r);
                 },
                 false, false, true});

    e.push_back({"geodesic_entropy_derivative", "one-sided derivative of H along the displacement geodesic",
                 "entropy derivative along a constant-speed geodesic",
                 {{"tolerance", 0.03}, {"target_mean", 1.0}, {"target_variance", 0.25},
                  {"deltas", {0.1, 0.05, 0.025, 0.0125}}},
                 [](Context& c, const Params& p, std::vector<CheckReport>& out) {
                   GeodesicCheckOptions o;
                   o.tolerance = p.num("tolerance");
                   const auto target =
                       detail::normalized_gaussian(c.grid(), Vec{p.num("target_mean")}, p.num("target_variance"));
                   const auto deltas = p.list("deltas");
                   out.push_back(geodesic_entropy_derivative_check(c.p0(), target, c.pot(), deltas, o));
                 },
                 false, true});

    e.push_back({"girsanov", "perturbed/unperturbed density ratio stays inside the Girsanov envelope",
                 "Girsanov change of measure",
                 {{"path_samples", 4000}, {"path_dt", 0.01}},
                 [](Context& c, const Params& p, std::vector<CheckReport>& out) {
                   SimOptions so;
                   so.record_paths = true;
                   const auto fwd = simulate_forward(c.initial(p.count("path_samples")), c.pot(), nullptr,
                                                     p.num("path_dt"), c.cfg().T, so);
                   out.push_back(renamed(
                       girsanov_ratio_checks(c.fpe(true), c.fpe(false), c.pot(), c.pert(), &*fwd.paths), "girsanov"));
                 },
                 true});

    e.push_back({"gronwall_envelope", "ensemble second moment stays below the Gronwall envelope",
                 "second-moment Gronwall bound",
                 {{"C", 1.0}, {"R", 1.0}},
                 [](Context& c, const Params& p, std::vector<CheckReport>& out) {
                   MomentSeries s;
                   const auto init = c.initial(c.cfg().ensemble);
                   append_moment(s, 0.0, init.positions, init.dim);
                   SimOptions so;
                   so.observer = [&](const StepView& v) { append_moment(s, v.t + v.dt, v.after, v.dim); };
                   simulate_forward(init, c.pot(), c.pert(), c.cfg().dt, c.cfg().T, so);
                   out.push_back(gronwall_envelope_check(s, c.pot(), c.pert(), p.num("C"), p.num("R")));
                 }});

    e.push_back({"hwi", "H(a) - H(b) <= W2 sqrt(I(a)) - kappa/2 W2^2 over random Gaussian pairs",
                 "HWI inequality",
                 {{"pairs", 50}, {"mean_range", 2.0}, {"variance_min", 0.1}, {"variance_max", 2.0}},
                 [](Context& c, const Params& p, std::vector<CheckReport>& out) {
                   std::mt19937_64 gen(c.cfg().seed);
                   const double mr = p.num("mean_range"), vlo = p.num("variance_min"), vhi = p.num("variance_max");
                   const double kappa = curvature_of(c.pot(), c.grid());
                   auto draw = [&] {
                     Vec m{};
                     for (int a = 0; a < c.cfg().dim; ++a) m[a] = mr * (2.0 * detail::uniform01(gen) - 1.0);
                     const double s2 = vlo + (vhi - vlo) * detail::uniform01(gen);
                     return detail::normalized_gaussian(c.grid(), m, s2);
                   };
                   CheckReport worst;
                   std::size_t failures = 0, n = p.count("pairs");
                   for (std::size_t i = 0; i < n; ++i) {
                     const auto a = draw();
                     const auto b = draw();
                     const auto r = hwi_check(a, b, c.pot(), kappa);
                     if (!r.pass) ++failures;
                     if (i == 0 || *r.find("slack") < *worst.find("slack")) worst = r;
                   }
                   worst.name = "hwi";
                   worst.pass = failures == 0;
                   worst.metric("pairs", static_cast<double>(n));
                   worst.metric("failures", static_cast<double>(failures));
                   worst.notes.push_back("values are for the pair with the smallest slack");
                   out.push_back(worst);
                 }});

    e.push_back({"linear_growth", "|grad psi(x)| <= K (1 + |x|) on the sample box", "linear growth of grad(psi)",
                 {{"extent", nullptr}, {"points", 201}},
                 [](Context& c, const Params& p, std::vector<CheckReport>& out) {
                   const double L = p.num_or("extent", std::max(std::abs(c.cfg().lower), std::abs(c.cfg().upper)));
                   const auto pts = box_samples(c.cfg().dim, -L, L, static_cast<int>(p.count("points")));
                   out.push_back(check_linear_growth(c.pot(), pts));
                 }});

    e.push_back({"martingale", "entropy-process martingale part: orthogonality and L2 isometry",
                 "martingale part of the relative entropy process",
                 {{"checkpoints", 10}, {"negative_control", true}, {"min_paths", 10000}},
                 [](Context& c, const Params& p, std::vector<CheckReport>& out) {
                   const auto& cfg = c.cfg();
                   auto led = c.timed("backward_ledger", [&] {
                     return backward_ledger(c.reversed_start(0.0, cfg.ensemble), c.scores(), c.pert(), cfg.dt, {},
                                            detail::reversed_checkpoints(cfg.T, static_cast<int>(p.count("checkpoints"))));
                   });
                   MartingaleOptions o;
                   o.min_paths = p.count("min_paths");
                   out.push_back(renamed(martingale_test(led, o), "martingale"));
                   if (p.flag("negative_control")) {
                     o.substitute_entropy_increments = true;
                     const auto bad = martingale_test(led, o);
                     out.push_back(detail::negative_control(bad, "martingale_control", !bad.pass,
                                                            "entropy increments substituted"));
                   }
                   c.ledger = std::move(led);
                 }});

    e.push_back({"metric_derivative", "W2(P_{t0+d}, P_t0)/d tends to |grad R + 2 beta|_{L2(p)}/2",
                 "metric derivative of the Wasserstein distance",
                 {{"tolerance", 0.05}, {"deltas", {0.1, 0.05, 0.025, 0.0125}}},
                 [](Context& c, const Params& p, std::vector<CheckReport>& out) {
                   TransportCheckOptions o;
                   o.tolerance = p.num("tolerance");
                   const auto deltas = p.list("deltas");
                   out.push_back(renamed(metric_derivative_check(c.fpe(false), c.pot(), nullptr, c.cfg().t0, deltas, o),
                                         "metric_derivative"));
                   if (c.pert() != nullptr)
                     out.push_back(renamed(metric_derivative_check(c.fpe(true), c.pot(), c.pert(),
                                                                   c.pert()->activation_time(), deltas, o),
                                           "metric_derivative_perturbed"));
                 }});

    e.push_back({"noise_variance", "stored Brownian increments have variance dt per coordinate",
                 "Brownian increments",
                 {{"path_samples", 10000}},
                 [](Context& c, const Params& p, std::vector<CheckReport>& out) {
                   SimOptions so;
                   so.record_paths = true;
                   auto fwd = simulate_forward(c.initial(std::min<std::size_t>(p.count("path_samples"), c.cfg().ensemble)),
                                               c.pot(), c.pert(), c.cfg().dt, c.cfg().T, so);
                   out.push_back(noise_variance_check(*fwd.paths));
                   c.paths = std::move(*fwd.paths);
                 }});

    e.push_back({"perturbed_derivative", "dH/dt at t0+ equals -I/2 - E[beta . grad R]",
                 "entropy derivative under a perturbation",
                 {{"tolerance", 0.03}, {"deltas", {0.1, 0.05, 0.025}}},
                 [](Context& c, const Params& p, std::vector<CheckReport>& out) {
                   DerivativeOptions o;
                   o.tolerance = p.num("tolerance");
                   const auto deltas = p.list("deltas");
                   out.push_back(perturbed_derivative_check(c.fpe(true), c.pot(), c.pert(), c.anchor_time(), deltas, o));
                 }});

    e.push_back({"sde_pde_consistency", "W2 between the particle histogram and the FPE density",
                 "agreement of particle and grid solutions",
                 {{"tolerance", 0.05}, {"time", nullptr}},
                 [](Context& c, const Params& p, std::vector<CheckReport>& out) {
                   const double t = p.num_or("time", c.cfg().T);
                   const auto res = c.timed("ensemble", [&] {
                     return simulate_forward(c.initial(c.cfg().ensemble), c.pot(), c.pert(), c.cfg().dt, t);
                   });
                   out.push_back(renamed(sde_pde_consistency(c.fpe(true).at(t), res.final_state.positions, p.num("tolerance")),
                                         "sde_pde_consistency"));
                 }});

    e.push_back({"stationarity", "FPE started at q/Z stays put; generator residual converges at order 2",
                 "stationarity of the reference measure",
                 {{"max_drift", 1e-4}, {"max_residual", 1e-3}, {"ratio_target", 4.0}, {"ratio_tolerance", 0.3}},
                 [](Context& c, const Params& p, std::vector<CheckReport>& out) {
                   StationarityOptions o;
                   o.max_drift = p.num("max_drift");
                   o.max_residual = p.num("max_residual");
                   o.ratio_target = p.num("ratio_target");
                   o.ratio_tolerance = p.num("ratio_tolerance");
                   out.push_back(stationarity_check(c.pot(), c.grid(), c.cfg().fpe_dt, c.cfg().T, o));
                 }});

    e.push_back({"steepest_descent", "entropy drop per unit W2 is steepest without perturbation",
                 "steepest descent property",
                 {{"tolerance", 0.05}, {"deltas", {0.1, 0.05, 0.025, 0.0125}}, {"parallel_lambda", 0.5}},
                 [](Context& c, const Params& p, std::vector<CheckReport>& out) {
                   TransportCheckOptions o;
                   o.tolerance = p.num("tolerance");
                   const auto deltas = p.list("deltas");
                   const auto& cfg = c.cfg();
                   const double t0 = cfg.t0;
                   const FpeSolution& free = c.fpe(false);
                   std::vector<Perturbation> perts;
                   std::vector<std::string> labels;
                   if (cfg.perturbation) {
                     perts.push_back(c.make_bump(t0));
                     labels.push_back("bump");
                   }
                   if (const double lam = p.num("parallel_lambda"); lam != 0.0) {
                     perts.push_back(detail::parallel_field(free.at(t0), c.pot(), lam, t0));
                     labels.push_back("parallel");
                   }
                   std::vector<FpeSolution> sols;
                   for (std::size_t i = 0; i < perts.size(); ++i)
                     sols.push_back(c.run_fpe(&perts[i], cfg.fpe_dt, cfg.record_every, cfg.T, "fpe_" + labels[i]));
                   std::vector<PerturbedRun> runs;
                   for (std::size_t i = 0; i < perts.size(); ++i) runs.push_back({labels[i], &sols[i], &perts[i]});
                   out.push_back(steepest_descent_check(free, runs, c.pot(), t0, deltas, o));
                 }});

    e.push_back({"trajectorial_displacement", "binned E[R_t0 - R_{T-t} | X] matches the cumulative Fisher process",
                 "trajectorial relative entropy displacement",
                 {{"t", 0.5}, {"bins", 64}, {"min_per_bin", 30}, {"x_limit", 2.0}, {"tolerance", 0.1},
                  {"refinement", true}, {"min_ratio", 1.6}},
                 [](Context& c, const Params& p, std::vector<CheckReport>& out) {
                   const auto& cfg = c.cfg();
                   const double t = p.num("t"), t0 = cfg.t0;
                   DisplacementOptions o;
                   o.bins = static_cast<int>(p.count("bins"));
                   o.min_per_bin = p.count("min_per_bin");
                   o.x_limit = p.num("x_limit");
                   o.tolerance = p.num("tolerance");
                   auto run = [&](std::size_t n, double dt, std::uint64_t salt, const std::string& stage) {
                     BackwardOptions bo;
                     bo.start = t;
                     bo.stop = cfg.T - t0;
                     return c.timed(stage, [&] {
                       return backward_ledger(c.reversed_start(t, n, salt), c.scores(), c.pert(), dt, bo,
                                              {t, cfg.T - t0});
                     });
                   };
                   auto fine_led = run(cfg.ensemble, cfg.dt, 0, "ledger_fine");
                   const auto fine = trajectorial_displacement_check(fine_led, t, t0, o);
                   out.push_back(renamed(fine, "trajectorial_displacement"));
                   if (p.flag("refinement")) {
                     const auto coarse_led = run(cfg.ensemble / 4, 2.0 * cfg.dt, 1, "ledger_coarse");
                     const auto coarse = trajectorial_displacement_check(coarse_led, t, t0, o);
                     out.push_back(renamed(displacement_refinement(coarse, fine, p.num("min_ratio")),
                                           "trajectorial_displacement_refinement"));
                   }
                   c.ledger = std::move(fine_led);
                 }});

    e.push_back({"trajectorial_rate", "window quotients of the entropy process approach E[|grad R|^2/2] at t0",
                 "trajectorial rate of relative entropy",
                 {{"deltas", {0.2, 0.1, 0.05, 0.025}}, {"bins", 64}, {"min_per_bin", 30}, {"tolerance", 0.05}},
                 [](Context& c, const Params& p, std::vector<CheckReport>& out) {
                   const auto& cfg = c.cfg();
                   const double t0 = c.anchor_time();
                   const auto deltas = p.list("deltas");
                   const double end = cfg.T - t0;
                   std::vector<double> cps{end};
                   for (double d : deltas) cps.push_back(end - d);
                   std::sort(cps.begin(), cps.end());
                   const double step = cfg.interval();
                   if (cps.front() < 0.0) fail(ErrorKind::precondition, "rate windows reach before the horizon start");
                   // a little burn-in ahead of the widest window
                   const double lead = cps.front() - 0.25 * (end - cps.front());
                   const double start = std::max(0.0, std::floor(lead / step + 1e-9) * step);
                   BackwardOptions bo;
                   bo.start = start;
                   bo.stop = end;
                   auto led = c.timed("backward_ledger", [&] {
                     return backward_ledger(c.reversed_start(start, cfg.ensemble), c.scores(), c.pert(), cfg.dt, bo, cps);
                   });
                   RateOptions o;
                   o.bins = static_cast<int>(p.count("bins"));
                   o.min_per_bin = p.count("min_per_bin");
                   o.relative_tolerance = p.num("tolerance");
                   out.push_back(renamed(trajectorial_rate_check(led, t0, deltas, c.pot(), c.pert(), o),
                                         "trajectorial_rate"));
                   c.ledger = std::move(led);
                 }});

    std::sort(e.begin(), e.end(), [](const auto& a, const auto& b) { return a.name < b.name; });
    return e;
  }();
  return entries;
}

inline const CheckEntry* find_check(const std::string& name) {
  for (const auto& e : registry())
    if (e.name == name) return &e;
  return nullptr;
}

// ---------------------------------------------------------------------------
// Parsing

namespace detail {

inline std::string known_checks() {
  std::string s;
  for (const auto& e : registry()) s += (s.empty() ? "" : ", ") + e.name;
  return s;
}

inline CheckConfig parse_check(const ConfigSource& src, const json& j, const std::string& ptr) {
  CheckConfig c;
  json user = json::object();
  if (j.is_string()) {
    c.name = j.get<std::string>();
  } else if (j.is_object()) {
    Fields f(src, j, ptr);
    c.name = f.text("name");
    for (const auto& [k, v] : j.items())
      if (k != "name") user[k] = v;
  } else {
    src.error(ptr, "expected a check name or an object with a \"name\" key");
  }
  const CheckEntry* e = find_check(c.name);
  if (e == nullptr) src.error(ptr, "unknown check \"" + c.name + "\" (known: " + known_checks() + ")");
  c.params = e->defaults;
  for (const auto& [k, v] : user.items()) {
    const std::string at = ptr + "/" + k;
    if (!e->defaults.contains(k)) src.error(at, "unknown parameter for check " + c.name);
    const json& def = e->defaults.at(k);
    if (def.is_boolean()) {
      if (!v.is_boolean()) src.error(at, "expected true or false");
    } else if (def.is_array()) {
      if (!v.is_array() || v.empty()) src.error(at, "expected a nonempty array of numbers");
      const bool positive = std::all_of(def.begin(), def.end(), [](const json& x) { return x.get<double>() > 0.0; });
      for (const auto& x : v) {
        if (!x.is_number() || !std::isfinite(x.get<double>())) src.error(at, "entries must be finite numbers");
        if (positive && !(x.get<double>() > 0.0)) src.error(at, "entries must be positive");
      }
    } else if (!v.is_null()) {
      if (!v.is_number() || !std::isfinite(v.get<double>())) src.error(at, "expected a finite number");
      const double x = v.get<double>();
      if (def.is_number_integer() && (x < 0.0 || x != std::floor(x))) src.error(at, "expected a nonnegative integer");
      if (def.is_null() && x < 0.0) src.error(at, "must be nonnegative");
      if (def.is_number() && def.get<double>() > 0.0 && !(x > 0.0)) src.error(at, "must be positive");
    }
    c.params[k] = v;
  }
  return c;
}

}  // namespace detail

inline ScenarioConfig parse_config(const ConfigSource& src) {
  ScenarioConfig cfg;
  Fields top(src, src.root(), "");
  cfg.name = top.text("scenario");
  cfg.seed = top.count("seed", 0);
  cfg.dim = static_cast<int>(top.count("dimension", 1));
  if (cfg.dim < 1 || cfg.dim > 2) src.error("/dimension", "must be 1 or 2");

  if (const json* p = top.find("potential")) {
    Fields f(src, *p, "/potential");
    auto& pc = cfg.potential;
    pc.kind = f.text("kind", "quadratic");
    if (pc.kind == "quadratic") {
      pc.kappa = f.positive("kappa", 1.0);
    } else if (pc.kind == "double_well") {
      pc.a = f.number("a", 1.0);
      pc.b = f.number("b", 0.0);
      pc.growth_constant = f.positive("growth_constant", 10.0);
    } else {
      src.error("/potential/kind", "expected \"quadratic\" or \"double_well\"");
    }
    f.done();
  }

  if (const json* p = top.find("perturbation"); p != nullptr && !p->is_null()) {
    Fields f(src, *p, "/perturbation");
    PerturbationConfig pc;
    pc.amplitude = f.number("amplitude", 0.5);
    pc.radius = f.positive("radius", 1.0);
    pc.center = f.vec("center", cfg.dim);
    pc.t0 = f.number("t0", 0.0);
    if (pc.t0 < 0.0) src.error(f.at("t0"), "activation time must be nonnegative");
    f.done();
    cfg.perturbation = pc;
  }

  if (const json* p = top.find("initial")) {
    Fields f(src, *p, "/initial");
    auto& ic = cfg.initial;
    ic.kind = f.text("kind", "gaussian");
    if (ic.kind == "gaussian") {
      ic.mean = f.vec("mean", cfg.dim);
      ic.variance = f.positive("variance", 0.25);
    } else if (ic.kind == "file") {
      ic.path = f.text("path");
      ic.snapshot = f.count("snapshot", 0);
    } else if (ic.kind != "stationary") {
      src.error(f.at("kind"), "expected \"gaussian\", \"stationary\" or \"file\"");
    }
    f.done();
  }

  if (const json* p = top.find("grid")) {
    Fields f(src, *p, "/grid");
    cfg.lower = f.number("lower", -6.0);
    cfg.upper = f.number("upper", 6.0);
    const auto cells = f.count("cells", 512);
    if (!(cfg.upper > cfg.lower)) src.error(f.at("upper"), "must exceed lower");
    if (cells < 16 || cells > (cfg.dim == 1 ? 1u << 20 : 4096u)) src.error(f.at("cells"), "out of range");
    cfg.cells = static_cast<int>(cells);
    f.done();
  }

  cfg.ensemble = top.count("ensemble", 10000);
  if (cfg.ensemble < 1) src.error("/ensemble", "must be at least 1");
  cfg.T = top.positive("T", 1.0);
  cfg.dt = top.positive("dt", 1e-3);
  cfg.fpe_dt = top.positive("fpe_dt", 2.5e-4);
  cfg.record_every = static_cast<int>(top.count("record_every", 4));
  cfg.t0 = top.number("t0", 0.0);
  cfg.output_dir = top.text("output_dir", "out/" + cfg.name);

  if (cfg.dt > cfg.T) src.error("/dt", "time step exceeds the horizon T");
  if (cfg.fpe_dt > cfg.T) src.error("/fpe_dt", "time step exceeds the horizon T");
  if (!on_lattice(cfg.T, cfg.dt)) src.error("/dt", "T must be an integer multiple of dt");
  if (cfg.record_every < 1) src.error("/record_every", "must be at least 1");
  if (!on_lattice(cfg.T, cfg.interval())) src.error("/record_every", "T must be a multiple of fpe_dt * record_every");
  const double h = (cfg.upper - cfg.lower) / cfg.cells;
  if (cfg.fpe_dt > h * h / (2.0 * cfg.dim))
    src.error("/fpe_dt", "violates the explicit stability bound h^2/(2d) = " + std::to_string(h * h / (2.0 * cfg.dim)));
  if (cfg.t0 < 0.0 || cfg.t0 >= cfg.T) src.error("/t0", "must lie in [0, T)");
  if (!on_lattice(cfg.t0, cfg.interval())) src.error("/t0", "must be a multiple of the snapshot interval");
  if (cfg.perturbation) {
    const double a = cfg.perturbation->t0;
    if (a >= cfg.T) src.error("/perturbation/t0", "activation must precede T");
    if (!on_lattice(a, cfg.interval())) src.error("/perturbation/t0", "must be a multiple of the snapshot interval");
  }

  if (const json* p = top.find("dump")) {
    Fields f(src, *p, "/dump");
    cfg.dump.paths = f.flag("paths", false);
    cfg.dump.densities = f.flag("densities", false);
    cfg.dump.ledger = f.flag("ledger", false);
    cfg.dump.path_count = f.count("path_count", 1000);
    f.done();
  }

  const json* checks = top.find("checks");
  if (checks == nullptr || !checks->is_array() || checks->empty())
    src.error("/checks", "expected a nonempty array of checks");
  for (std::size_t i = 0; i < checks->size(); ++i) {
    const std::string ptr = "/checks/" + std::to_string(i);
    CheckConfig c = detail::parse_check(src, (*checks)[i], ptr);
    if (cfg.find_check(c.name)) src.error(ptr, "duplicate check \"" + c.name + "\"");
    const CheckEntry& e = *find_check(c.name);
    if (e.needs_perturbation && !cfg.perturbation) src.error(ptr, "check " + c.name + " needs a perturbation");
    if (e.one_dimensional && cfg.dim != 1) src.error(ptr, "check " + c.name + " is one-dimensional");
    if (e.needs_quadratic && cfg.potential.kind != "quadratic")
      src.error(ptr, "check " + c.name + " needs a quadratic potential");
    cfg.checks.push_back(std::move(c));
  }
  top.done();
  return cfg;
}

inline ScenarioConfig load_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) fail(ErrorKind::config, "cannot open config " + path);
  std::stringstream ss;
  ss << in.rdbuf();
  ScenarioConfig cfg = parse_config(ConfigSource(path, ss.str()));
  cfg.base_dir = std::filesystem::path(path).parent_path();
  return cfg;
}

// ---------------------------------------------------------------------------
// Running

struct RunOptions {
  std::optional<std::string> output_dir;  // overrides config and environment
  std::vector<std::string> only;           // restrict to these checks
  bool write_files = true;
  std::ostream* log = nullptr;
};

struct RunResult {
  int exit_code = 0;
  std::vector<CheckReport> reports;
  io::ordered_json report;
  std::string output_dir;
};

inline std::string resolve_output_dir(const ScenarioConfig& cfg, const RunOptions& opts) {
  if (opts.output_dir) return *opts.output_dir;
  if (const char* env = std::getenv("ENTLAB_OUTPUT_DIR"); env != nullptr && *env != '\0')
    return (std::filesystem::path(env) / cfg.name).string();
  return cfg.output_dir;
}

inline RunResult run_scenario(const ScenarioConfig& cfg, const RunOptions& opts = {}) {
  std::vector<CheckConfig> selected;
  if (opts.only.empty()) {
    selected = cfg.checks;
  } else {
    for (const auto& n : opts.only) {
      const CheckEntry* e = find_check(n);
      if (e == nullptr) fail(ErrorKind::config, "unknown check \"" + n + "\" (known: " + detail::known_checks() + ")");
      if (e->needs_perturbation && !cfg.perturbation) fail(ErrorKind::config, "check " + n + " needs a perturbation");
      const CheckConfig* c = cfg.find_check(n);
      selected.push_back(c != nullptr ? *c : CheckConfig{n, e->defaults});
    }
  }
  std::sort(selected.begin(), selected.end(), [](const auto& a, const auto& b) { return a.name < b.name; });

  Context ctx(cfg);
  RunResult res;
  for (const auto& c : selected) {
    const CheckEntry& e = *find_check(c.name);
    const Params p{c.params};
    const auto before = res.reports.size();
    ctx.timed(c.name, [&] {
      e.run(ctx, p, res.reports);
      return 0;
    });
    for (auto i = before; i < res.reports.size(); ++i) res.reports[i].anchor = e.anchor;
    if (opts.log != nullptr)
      for (auto i = before; i < res.reports.size(); ++i) {
        const auto& r = res.reports[i];
        *opts.log << (r.pass ? "PASS " : "FAIL ") << r.name << "  lhs=" << r.lhs << " rhs=" << r.rhs
                  << " gap=" << r.rel_gap << " tol=" << r.tolerance << '\n';
      }
  }
  for (const auto& r : res.reports)
    if (!r.pass) res.exit_code = 1;

  res.report = io::report_json(cfg.name, cfg.seed, res.reports, ctx.timings);
  res.output_dir = resolve_output_dir(cfg, opts);
  if (!opts.write_files) return res;

  namespace fs = std::filesystem;
  std::error_code ec;
  fs::create_directories(res.output_dir, ec);
  if (ec) fail(ErrorKind::io, "cannot create output directory " + res.output_dir + ": " + ec.message());
  const fs::path out(res.output_dir);
  io::write_json((out / "report.json").string(), res.report);
  const FpeSolution& primary = ctx.fpe(true);
  io::write_entropy_csv((out / "entropy.csv").string(), entropy_report(primary, ctx.pot()));
  if (cfg.dump.densities) io::write_grid_snapshots((out / "densities.entg").string(), primary.snapshots);
  if (cfg.dump.paths) {
    if (!ctx.paths) {
      SimOptions so;
      so.record_paths = true;
      ctx.paths = std::move(
          *simulate_forward(ctx.initial(cfg.dump.path_count), ctx.pot(), ctx.pert(), cfg.dt, cfg.T, so).paths);
    }
    io::write_path_bundle((out / "paths.entf").string(), *ctx.paths);
  }
  if (cfg.dump.ledger) {
    if (ctx.ledger)
      io::write_ledger((out / "ledger.entl").string(), *ctx.ledger);
    else if (opts.log != nullptr)
      *opts.log << "note: no check built a trajectorial ledger; ledger dump skipped\n";
  }
  return res;
}

// 2 for configuration problems, 3 for anything raised while computing.
inline int exit_code_for(const Error& e) { return e.kind() == ErrorKind::config ? 2 : 3; }

}  // namespace entlab::scenario

#endif  // ENTLAB_SCENARIO_HPP
