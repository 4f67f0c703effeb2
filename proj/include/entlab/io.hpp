#ifndef ENTLAB_IO_HPP
#define ENTLAB_IO_HPP

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <iomanip>
#include <limits>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "entlab/core.hpp"
#include "entlab/entropy.hpp"
#include "entlab/grid.hpp"
#include "entlab/reversal.hpp"
#include "entlab/simulate.hpp"
#include "entlab/transport.hpp"

namespace entlab::io {

inline constexpr std::uint32_t kFormatVersion = 1;

// ---------------------------------------------------------------------------
// Little-endian binary container

class BinaryWriter {
 public:
  explicit BinaryWriter(const std::string& path) : out_(path, std::ios::binary) {
    if (!out_) fail(ErrorKind::io, "cannot open " + path + " for writing");
  }

  void magic(const char (&m)[5]) { out_.write(m, 4); }
  void u32(std::uint32_t v) { put(v); }
  void u64(std::uint64_t v) { put(v); }
  void f64(double v) { put(std::bit_cast<std::uint64_t>(v)); }
  void f64s(std::span<const double> v) {
    for (double x : v) f64(x);
  }
  void finish() {
    out_.flush();
    if (!out_) fail(ErrorKind::io, "write failed");
  }

 private:
  template <class T>
  void put(T v) {
    unsigned char b[sizeof(T)];
    for (std::size_t i = 0; i < sizeof(T); ++i) b[i] = static_cast<unsigned char>((v >> (8 * i)) & 0xff);
    out_.write(reinterpret_cast<const char*>(b), sizeof(T));
  }
  std::ofstream out_;
};

class BinaryReader {
 public:
  explicit BinaryReader(const std::string& path) : in_(path, std::ios::binary), path_(path) {
    if (!in_) fail(ErrorKind::io, "cannot open " + path);
  }

  void expect_magic(const char (&m)[5]) {
    char b[4];
    read(b, 4);
    if (std::memcmp(b, m, 4) != 0) fail(ErrorKind::io, path_ + ": bad magic, expected " + std::string(m));
    const std::uint32_t v = u32();
    if (v != kFormatVersion) fail(ErrorKind::io, path_ + ": unsupported version " + std::to_string(v));
  }
  std::uint32_t u32() { return get<std::uint32_t>(); }
  std::uint64_t u64() { return get<std::uint64_t>(); }
  double f64() { return std::bit_cast<double>(get<std::uint64_t>()); }
  std::vector<double> f64s(std::uint64_t n) {
    if (n > (std::uint64_t{1} << 36)) fail(ErrorKind::io, path_ + ": implausible array length");
    std::vector<double> v(n);
    for (auto& x : v) x = f64();
    return v;
  }

 private:
  void read(char* b, std::size_t n) {
    in_.read(b, static_cast<std::streamsize>(n));
    if (in_.gcount() != static_cast<std::streamsize>(n)) fail(ErrorKind::io, path_ + ": truncated file");
  }
  template <class T>
  T get() {
    unsigned char b[sizeof(T)];
    read(reinterpret_cast<char*>(b), sizeof(T));
    T v = 0;
    for (std::size_t i = 0; i < sizeof(T); ++i) v |= static_cast<T>(b[i]) << (8 * i);
    return v;
  }
  std::ifstream in_;
  std::string path_;
};

// Header: magic "ENTF", version, N, steps, d, dt, t0 (activation, negative when
// unperturbed), seed; then start time, states, noise length, noise.
inline void write_path_bundle(const std::string& path, const PathBundle& b) {
  BinaryWriter w(path);
  w.magic("ENTF");
  w.u32(kFormatVersion);
  w.u64(b.paths);
  w.u64(b.steps);
  w.u32(static_cast<std::uint32_t>(b.dim));
  w.f64(b.dt);
  w.f64(b.activation_time);
  w.u64(b.seed);
  w.f64(b.start_time);
  w.u64(b.config_hash);
  w.f64s(b.states);
  w.u64(b.noise.size());
  w.f64s(b.noise);
  w.finish();
}

inline PathBundle read_path_bundle(const std::string& path) {
  BinaryReader r(path);
  r.expect_magic("ENTF");
  PathBundle b;
  b.paths = r.u64();
  b.steps = r.u64();
  b.dim = static_cast<int>(r.u32());
  if (b.dim < 1 || b.dim > kMaxDim) fail(ErrorKind::io, path + ": bad dimension");
  b.dt = r.f64();
  b.activation_time = r.f64();
  b.seed = r.u64();
  b.start_time = r.f64();
  b.config_hash = r.u64();
  b.states = r.f64s(b.paths * (b.steps + 1) * b.dim);
  b.noise = r.f64s(r.u64());
  if (!b.noise.empty() && b.noise.size() != b.paths * b.steps * b.dim) fail(ErrorKind::io, path + ": noise size mismatch");
  return b;
}

// "ENTG": grid spec then (time, values) per snapshot.
inline void write_grid_snapshots(const std::string& path, std::span<const GridDensity> snaps) {
  require(!snaps.empty(), "no snapshots to write");
  const GridSpec& g = snaps.front().grid;
  BinaryWriter w(path);
  w.magic("ENTG");
  w.u32(kFormatVersion);
  w.u32(static_cast<std::uint32_t>(g.dim));
  for (const Axis& a : g.axes) {
    w.f64(a.lower);
    w.f64(a.upper);
    w.u64(static_cast<std::uint64_t>(a.cells));
  }
  w.u64(snaps.size());
  for (const GridDensity& s : snaps) {
    require(s.grid.same_as(g), "snapshots must share a grid");
    w.f64(s.time);
    w.f64s(s.values);
  }
  w.finish();
}

inline std::vector<GridDensity> read_grid_snapshots(const std::string& path) {
  BinaryReader r(path);
  r.expect_magic("ENTG");
  GridSpec g;
  g.dim = static_cast<int>(r.u32());
  for (Axis& a : g.axes) {
    a.lower = r.f64();
    a.upper = r.f64();
    a.cells = static_cast<int>(r.u64());
  }
  try {
    g.validate();
  } catch (const Error& e) {
    fail(ErrorKind::io, path + ": " + e.what());
  }
  const std::uint64_t n = r.u64();
  std::vector<GridDensity> out;
  for (std::uint64_t i = 0; i < n; ++i) {
    GridDensity p{g, {}, r.f64()};
    p.values = r.f64s(g.size());
    out.push_back(std::move(p));
  }
  return out;
}

// "ENTL": ledger checkpoints (per-path X, R, grad R, M, F, residual, qv).
inline void write_ledger(const std::string& path, const TrajectorialLedger& led) {
  BinaryWriter w(path);
  w.magic("ENTL");
  w.u32(kFormatVersion);
  w.u64(led.paths);
  w.u32(static_cast<std::uint32_t>(led.dim));
  w.f64(led.dt);
  w.f64(led.horizon);
  w.f64(led.start);
  w.u64(led.checkpoints.size());
  for (const auto& c : led.checkpoints) {
    w.f64(c.t);
    for (const auto* v : {&c.X, &c.R, &c.gradR, &c.M, &c.F, &c.residual, &c.qv}) {
      w.u64(v->size());
      w.f64s(*v);
    }
  }
  w.finish();
}

inline TrajectorialLedger read_ledger(const std::string& path) {
  BinaryReader r(path);
  r.expect_magic("ENTL");
  TrajectorialLedger led;
  led.paths = r.u64();
  led.dim = static_cast<int>(r.u32());
  led.dt = r.f64();
  led.horizon = r.f64();
  led.start = r.f64();
  const std::uint64_t n = r.u64();
  for (std::uint64_t i = 0; i < n; ++i) {
    LedgerCheckpoint c;
    c.t = r.f64();
    for (auto* v : {&c.X, &c.R, &c.gradR, &c.M, &c.F, &c.residual, &c.qv}) *v = r.f64s(r.u64());
    led.checkpoints.push_back(std::move(c));
  }
  return led;
}

// ---------------------------------------------------------------------------
// CSV

inline std::ofstream open_text(const std::string& path) {
  std::ofstream out(path);
  if (!out) fail(ErrorKind::io, "cannot open " + path + " for writing");
  out << std::setprecision(17);
  return out;
}

inline void write_moments_csv(const std::string& path, const MomentSeries& s) {
  auto out = open_text(path);
  out << "t,second_moment,stderr\n";
  for (std::size_t i = 0; i < s.times.size(); ++i)
    out << s.times[i] << ',' << s.second_moment[i] << ',' << s.stderr_[i] << '\n';
}

inline void write_grid_csv(std::ostream& out, const GridDensity& p) {
  out << std::setprecision(17);
  out << (p.grid.dim == 2 ? "x,y,p\n" : "x,p\n");
  for (std::size_t k = 0; k < p.grid.size(); ++k) {
    const Vec x = p.grid.center(k);
    out << x[0] << ',';
    if (p.grid.dim == 2) out << x[1] << ',';
    out << p.values[k] << '\n';
  }
}

inline void write_grid_csv(const std::string& path, const GridDensity& p) {
  auto out = open_text(path);
  write_grid_csv(out, p);
}

inline void write_entropy_csv(std::ostream& out, const EntropyReport& rep) {
  out << std::setprecision(17);
  out << "t,H,I,estimator\n";
  for (std::size_t i = 0; i < rep.size(); ++i)
    out << rep.times[i] << ',' << rep.H[i] << ',' << rep.I[i] << ',' << to_string(rep.estimator) << '\n';
}

inline void write_entropy_csv(const std::string& path, const EntropyReport& rep) {
  auto out = open_text(path);
  write_entropy_csv(out, rep);
}

inline void write_plan_csv(const std::string& path, const TransportPlan& plan) {
  auto out = open_text(path);
  out << "i,j,mass\n";
  for (const auto& [i, j, m] : plan.coupling) out << i << ',' << j << ',' << m << '\n';
}

// ---------------------------------------------------------------------------
// JSON

using nlohmann::ordered_json;

inline ordered_json number(double v) {
  if (std::isfinite(v)) return v;
  return std::isnan(v) ? "nan" : (v > 0 ? "inf" : "-inf");
}

inline ordered_json entropy_json(const std::string& scenario, const EntropyReport& rep) {
  ordered_json j;
  j["scenario"] = scenario;
  j["times"] = rep.times;
  j["H"] = rep.H;
  j["I"] = rep.I;
  return j;
}

inline ordered_json check_json(const CheckReport& r) {
  ordered_json j;
  j["name"] = r.name;
  j["paper_anchor"] = r.anchor;
  j["lhs"] = number(r.lhs);
  j["rhs"] = number(r.rhs);
  j["gap"] = number(r.rel_gap);
  j["abs_gap"] = number(r.abs_gap);
  j["rel_gap"] = number(r.rel_gap);
  j["tolerance"] = number(r.tolerance);
  j["pass"] = r.pass;
  if (r.refinement_slope) j["refinement_slope"] = number(*r.refinement_slope);
  ordered_json m = ordered_json::object();
  for (const auto& [k, v] : r.metrics) m[k] = number(v);
  j["metrics"] = m;
  j["notes"] = r.notes;
  return j;
}

struct Timing {
  std::string stage;
  double seconds = 0.0;
};

// report.json; checks sorted by name, timings last so they can be stripped.
inline ordered_json report_json(const std::string& scenario, std::uint64_t seed, std::vector<CheckReport> checks,
                                std::span<const Timing> timings) {
  std::stable_sort(checks.begin(), checks.end(), [](const auto& a, const auto& b) { return a.name < b.name; });
  ordered_json j;
  j["scenario"] = scenario;
  j["seed"] = seed;
  ordered_json arr = ordered_json::array();
  for (const auto& c : checks) arr.push_back(check_json(c));
  j["checks"] = arr;
  ordered_json t = ordered_json::object();
  for (const auto& x : timings) t[x.stage] = x.seconds;
  j["timings"] = t;
  return j;
}

// Serialized report without the timings object, for determinism comparisons.
inline std::string stable_report_text(const ordered_json& report) {
  ordered_json copy = report;
  copy.erase("timings");
  return copy.dump(2);
}

inline void write_json(const std::string& path, const ordered_json& j) {
  std::ofstream out(path);
  if (!out) fail(ErrorKind::io, "cannot open " + path + " for writing");
  out << j.dump(2) << '\n';
}

// ---------------------------------------------------------------------------
// Export of binary dumps and reports

enum class ExportFormat { csv, json };

inline std::string sniff_magic(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail(ErrorKind::io, "cannot open " + path);
  char b[4] = {};
  in.read(b, 4);
  return std::string(b, static_cast<std::size_t>(in.gcount()));
}

inline void export_paths(const PathBundle& b, ExportFormat f, std::ostream& out) {
  out << std::setprecision(17);
  if (f == ExportFormat::csv) {
    out << (b.dim == 1 ? "path,step,t,x\n" : b.dim == 2 ? "path,step,t,x,y\n" : "path,step,t,x,y,z\n");
    for (std::size_t p = 0; p < b.paths; ++p)
      for (std::size_t k = 0; k <= b.steps; ++k) {
        out << p << ',' << k << ',' << b.time(k);
        for (int a = 0; a < b.dim; ++a) out << ',' << b.states[b.state_index(p, k) + a];
        out << '\n';
      }
    return;
  }
  ordered_json j;
  j["format"] = "ENTF";
  j["paths"] = b.paths;
  j["steps"] = b.steps;
  j["dim"] = b.dim;
  j["dt"] = b.dt;
  j["start_time"] = b.start_time;
  j["activation_time"] = b.activation_time;
  j["seed"] = b.seed;
  j["states"] = b.states;
  out << j.dump(2) << '\n';
}

inline void export_grids(std::span<const GridDensity> snaps, ExportFormat f, std::ostream& out) {
  out << std::setprecision(17);
  if (f == ExportFormat::csv) {
    if (snaps.empty()) return;
    out << (snaps.front().grid.dim == 2 ? "t,x,y,p\n" : "t,x,p\n");
    for (const auto& s : snaps)
      for (std::size_t k = 0; k < s.grid.size(); ++k) {
        const Vec x = s.grid.center(k);
        out << s.time << ',' << x[0] << ',';
        if (s.grid.dim == 2) out << x[1] << ',';
        out << s.values[k] << '\n';
      }
    return;
  }
  ordered_json j;
  j["format"] = "ENTG";
  ordered_json arr = ordered_json::array();
  for (const auto& s : snaps) {
    ordered_json e;
    e["t"] = s.time;
    e["values"] = s.values;
    arr.push_back(e);
  }
  if (!snaps.empty()) {
    const GridSpec& g = snaps.front().grid;
    ordered_json axes = ordered_json::array();
    for (int a = 0; a < g.dim; ++a)
      axes.push_back({{"lower", g.axes[a].lower}, {"upper", g.axes[a].upper}, {"cells", g.axes[a].cells}});
    j["axes"] = axes;
  }
  j["snapshots"] = arr;
  out << j.dump(2) << '\n';
}

inline void export_ledger(const TrajectorialLedger& led, ExportFormat f, std::ostream& out) {
  out << std::setprecision(17);
  if (f == ExportFormat::csv) {
    out << "t,path";
    for (int a = 0; a < led.dim; ++a) out << ",x" << a;
    out << ",R,M,F,residual\n";
    for (const auto& c : led.checkpoints)
      for (std::size_t p = 0; p < led.paths; ++p) {
        out << c.t << ',' << p;
        for (int a = 0; a < led.dim; ++a) out << ',' << c.X[p * led.dim + a];
        out << ',' << c.R[p] << ',' << c.M[p] << ',' << c.F[p] << ',' << c.residual[p] << '\n';
      }
    return;
  }
  ordered_json j;
  j["format"] = "ENTL";
  j["paths"] = led.paths;
  j["dim"] = led.dim;
  j["dt"] = led.dt;
  j["horizon"] = led.horizon;
  ordered_json arr = ordered_json::array();
  for (const auto& c : led.checkpoints) {
    ordered_json e;
    e["t"] = c.t;
    e["X"] = c.X;
    e["R"] = c.R;
    e["M"] = c.M;
    e["F"] = c.F;
    e["residual"] = c.residual;
    arr.push_back(e);
  }
  j["checkpoints"] = arr;
  out << j.dump(2) << '\n';
}

inline void export_report(const std::string& path, ExportFormat f, std::ostream& out) {
  std::ifstream in(path);
  ordered_json j;
  try {
    j = ordered_json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorKind::io, path + ": not a binary dump or a JSON report: " + e.what());
  }
  if (!j.contains("checks") || !j["checks"].is_array()) fail(ErrorKind::io, path + ": JSON file has no checks array");
  if (f == ExportFormat::json) {
    out << j.dump(2) << '\n';
    return;
  }
  auto cell = [](const ordered_json& v) { return v.is_string() ? v.get<std::string>() : v.dump(); };
  out << "name,lhs,rhs,gap,tolerance,pass\n";
  for (const auto& c : j["checks"])
    out << c.value("name", "") << ',' << cell(c["lhs"]) << ',' << cell(c["rhs"]) << ',' << cell(c["gap"]) << ','
        << cell(c["tolerance"]) << ',' << (c.value("pass", false) ? "true" : "false") << '\n';
}

// Dispatches on the file's magic; anything else is read as a JSON report.
inline void export_file(const std::string& path, ExportFormat f, std::ostream& out) {
  const std::string magic = sniff_magic(path);
  if (magic == "ENTF") return export_paths(read_path_bundle(path), f, out);
  if (magic == "ENTG") return export_grids(read_grid_snapshots(path), f, out);
  if (magic == "ENTL") return export_ledger(read_ledger(path), f, out);
  export_report(path, f, out);
}

}  // namespace entlab::io

#endif  // ENTLAB_IO_HPP
