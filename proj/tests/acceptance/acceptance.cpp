// Runs the bundled scenarios and prints one verdict line per acceptance criterion.
// Exits nonzero when any criterion fails.

#include <cmath>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "entlab/scenario.hpp"

namespace fs = std::filesystem;
namespace sc = entlab::scenario;
using entlab::CheckReport;

namespace {

const fs::path kConfigs = ENTLAB_CONFIG_DIR;
const fs::path kScratch = fs::temp_directory_path() / "entlab_acceptance";

struct Outcome {
  std::vector<CheckReport> reports;
  std::string stable;
  std::string error;
};

std::map<std::string, Outcome> cache;

Outcome run(const std::string& scenario, const std::string& tag = "a") {
  sc::RunOptions o;
  o.output_dir = (kScratch / (scenario + "_" + tag)).string();
  Outcome out;
  try {
    const auto res = sc::run_scenario(sc::load_config((kConfigs / (scenario + ".json")).string()), o);
    out.reports = res.reports;
    std::ifstream in(fs::path(res.output_dir) / "report.json");
    out.stable = entlab::io::stable_report_text(entlab::io::ordered_json::parse(in));
  } catch (const std::exception& e) {
    out.error = e.what();
  }
  return out;
}

const Outcome& scenario(const std::string& name) {
  auto it = cache.find(name);
  if (it == cache.end()) it = cache.emplace(name, run(name)).first;
  return it->second;
}

const CheckReport* report(const std::string& scen, const std::string& check) {
  for (const auto& r : scenario(scen).reports)
    if (r.name == check) return &r;
  return nullptr;
}

double metric(const CheckReport* r, const std::string& key) {
  if (r == nullptr) return std::nan("");
  return r->find(key).value_or(std::nan(""));
}

struct Verdict {
  bool pass = true;
  std::ostringstream detail;

  // Records a named requirement; a missing report counts as a failure.
  void need(const std::string& what, const CheckReport* r, bool extra = true) {
    const bool ok = r != nullptr && r->pass && extra;
    if (!ok) detail << " [" << what << " failed]";
    pass = pass && ok;
  }
  void need(const std::string& what, bool ok) {
    if (!ok) detail << " [" << what << " failed]";
    pass = pass && ok;
  }
};

int failures = 0;

void criterion(int id, const std::string& title, Verdict& v, const std::vector<std::string>& scenarios) {
  for (const auto& s : scenarios)
    if (!scenario(s).error.empty()) {
      v.pass = false;
      v.detail << " [" << s << ": " << scenario(s).error << "]";
    }
  if (!v.pass) ++failures;
  std::cout << (v.pass ? "PASS" : "FAIL") << "  " << id << ". " << title << ":" << v.detail.str() << std::endl;
}

}  // namespace

int main() {
  fs::create_directories(kScratch);
  std::cout.precision(4);

  {
    Verdict v;
    const auto* r = report("stationarity", "stationarity");
    v.need("stationarity", r);
    v.detail << " drift " << metric(r, "max_norm_drift") << ", residual " << metric(r, "residual") << ", ratio "
             << metric(r, "residual_ratio");
    criterion(1, "reference density is stationary", v, {"stationarity"});
  }
  {
    Verdict v;
    const auto* r = report("gaussian_oracle", "gaussian_oracle");
    v.need("gaussian_oracle", r);
    v.detail << " worst relative error " << (r ? r->lhs : NAN) << " over " << metric(r, "cases") << " cases";
    criterion(2, "grid H and I match Gaussian closed forms", v, {"gaussian_oracle"});
  }
  {
    Verdict v;
    const auto* a = report("ou_debruijn", "de_bruijn");
    const auto* b = report("ou_debruijn", "de_bruijn_refinement");
    v.need("de_bruijn", a);
    v.need("de_bruijn_refinement", b);
    v.detail << " max gap " << (a ? a->rel_gap : NAN) << ", refinement ratio " << (b ? b->lhs : NAN);
    criterion(3, "de Bruijn identity with first-order refinement", v, {"ou_debruijn"});
  }
  {
    Verdict v;
    const auto* r = report("bump_derivative", "perturbed_derivative");
    v.need("perturbed_derivative", r);
    v.detail << " measured " << (r ? r->lhs : NAN) << " vs " << (r ? r->rhs : NAN);
    criterion(4, "perturbed entropy derivative at activation", v, {"bump_derivative"});
  }
  {
    Verdict v;
    const auto* m = report("ou_reversal", "backward_marginal");
    const auto* c = report("ou_reversal", "backward_brownian_control");
    v.need("backward_marginal", m);
    v.need("score-free control rejected", c, metric(c, "terminal_corr_pass") == 0.0);
    v.detail << " W2 " << (m ? m->lhs : NAN) << ", control terminal-correlation z "
             << metric(c, "max_cumulative_terminal_corr_z");
    criterion(5, "time reversal recovers p0; score-free control fails", v, {"ou_reversal"});
  }
  {
    Verdict v;
    const auto* m = report("ou_reversal", "martingale");
    const auto* c = report("ou_reversal", "martingale_control");
    v.need("martingale", m);
    v.need("substitution control rejected", c);
    v.detail << " max z " << metric(m, "max_coefficient_z") << ", isometry gap " << metric(m, "isometry_rel_gap")
             << ", control z " << metric(c, "max_coefficient_z");
    criterion(6, "martingale orthogonality and isometry", v, {"ou_reversal"});
  }
  {
    Verdict v;
    const auto* d = report("trajectorial_displacement", "trajectorial_displacement");
    const auto* f = report("trajectorial_displacement", "trajectorial_displacement_refinement");
    v.need("trajectorial_displacement", d);
    v.need("refinement", f);
    v.detail << " worst bin gap " << (d ? d->rel_gap : NAN) << ", refinement ratio " << (f ? f->lhs : NAN);
    criterion(7, "trajectorial displacement per bin", v, {"trajectorial_displacement"});
  }
  {
    Verdict v;
    const auto* u = report("metric_derivative", "metric_derivative");
    const auto* p = report("metric_derivative", "metric_derivative_perturbed");
    v.need("unperturbed", u, u != nullptr && std::abs(u->rhs - 0.5) < 1e-3);
    v.need("perturbed", p);
    v.detail << " unperturbed " << (u ? u->lhs : NAN) << " vs " << (u ? u->rhs : NAN) << ", perturbed "
             << (p ? p->lhs : NAN) << " vs " << (p ? p->rhs : NAN);
    criterion(8, "metric derivative of W2", v, {"metric_derivative"});
  }
  {
    Verdict v;
    const auto* r = report("steepest_descent", "steepest_descent");
    v.need("steepest_descent", r, metric(r, "margin_bump") > 0.0);
    v.detail << " ratio " << (r ? r->lhs : NAN) << " vs " << (r ? r->rhs : NAN) << ", bump margin "
             << metric(r, "margin_bump") << ", parallel margin " << metric(r, "margin_parallel");
    criterion(9, "steepest descent", v, {"steepest_descent"});
  }
  {
    Verdict v;
    const auto* r = report("hwi", "hwi");
    v.need("hwi", r, metric(r, "pairs") == 50.0);
    v.detail << " smallest slack " << metric(r, "slack") << " over " << metric(r, "pairs") << " pairs";
    criterion(10, "HWI inequality", v, {"hwi"});
  }
  {
    Verdict v;
    const auto* r = report("exponential_decay", "exponential_decay");
    const double slope = metric(r, "late_log_slope");
    v.need("exponential_decay", r, slope >= -2.4 && slope <= -1.6);
    v.detail << " max excess " << metric(r, "max_excess") << ", late slope " << slope;
    criterion(11, "exponential entropy decay", v, {"exponential_decay"});
  }
  {
    Verdict v;
    const auto* a = report("sde_pde_1d", "sde_pde_consistency");
    const auto* b = report("sde_pde_2d", "sde_pde_consistency");
    v.need("1D", a, a != nullptr && a->lhs < 0.05);
    v.need("2D", b, b != nullptr && b->lhs < 0.08);
    v.detail << " W2 1D " << (a ? a->lhs : NAN) << ", 2D " << (b ? b->lhs : NAN);
    criterion(12, "particles agree with the FPE density", v, {"sde_pde_1d", "sde_pde_2d"});
  }
  {
    Verdict v;
    const std::vector<std::string> repeat{"ou_debruijn", "hwi", "trajectorial_rate", "model_checks", "sde_pde_2d",
                                          "steepest_descent", "girsanov", "geodesic"};
    for (const auto& s : repeat) {
      const Outcome again = run(s, "b");
      const bool same = again.error.empty() && !again.stable.empty() && again.stable == scenario(s).stable;
      v.need(s, same);
    }
    v.detail << " " << repeat.size() << " scenarios rerun with identical reports";
    criterion(13, "determinism", v, repeat);
  }

  std::cout << (failures == 0 ? "all criteria passed" : std::to_string(failures) + " criteria failed") << std::endl;
  return failures == 0 ? 0 : 1;
}
