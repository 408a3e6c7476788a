#pragma once

// Run configuration: strict JSON schema, defaults echoed into a resolved
// tree that feeds the provenance header of every output file.

#include <fstream>
#include <iomanip>
#include <memory>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "kinlab/collision.hpp"
#include "kinlab/common.hpp"
#include "kinlab/evolve.hpp"
#include "kinlab/phase.hpp"

namespace kinlab::config {

using json = nlohmann::json;

// A JSON object read under a key whitelist. Every value read (given or
// defaulted) is written to the shared resolved tree at the same path.
class Block {
 public:
  Block(const json& in, std::string path, std::shared_ptr<json> root, json::json_pointer ptr,
        std::vector<std::string> allowed)
      : in_(in), path_(std::move(path)), root_(std::move(root)), ptr_(std::move(ptr)) {
    if (!in_.is_object() && !in_.is_null()) fail("expected an object");
    if (in_.is_object())
      for (auto it = in_.begin(); it != in_.end(); ++it)
        if (std::find(allowed.begin(), allowed.end(), it.key()) == allowed.end())
          fail("unknown key '" + it.key() + "'");
    out() = json::object();
  }

  static Block root(const json& in, std::shared_ptr<json> tree, std::vector<std::string> allowed) {
    return Block(in, "", std::move(tree), json::json_pointer(""), std::move(allowed));
  }

  bool has(const std::string& k) const { return in_.is_object() && in_.contains(k) && !in_[k].is_null(); }
  const json& raw(const std::string& k) const { return in_[k]; }
  std::string path(const std::string& k) const { return path_.empty() ? k : path_ + "." + k; }

  [[noreturn]] void fail(const std::string& msg) const {
    throw SchemaError((path_.empty() ? std::string("config") : path_) + ": " + msg);
  }

  double num(const std::string& k, double def) {
    double v = def;
    if (has(k)) {
      if (!in_[k].is_number()) fail("'" + k + "' must be a number");
      v = in_[k].get<double>();
    }
    if (!std::isfinite(v)) fail("'" + k + "' must be finite");
    out()[k] = v;
    return v;
  }
  double positive(const std::string& k, double def) {
    double v = num(k, def);
    if (!(v > 0)) fail("'" + k + "' must be > 0");
    return v;
  }
  long integer(const std::string& k, long def, long lo = std::numeric_limits<long>::min()) {
    long v = def;
    if (has(k)) {
      if (!in_[k].is_number_integer()) fail("'" + k + "' must be an integer");
      v = in_[k].get<long>();
    }
    if (v < lo) fail("'" + k + "' must be >= " + std::to_string(lo));
    out()[k] = v;
    return v;
  }
  bool flag(const std::string& k, bool def) {
    bool v = def;
    if (has(k)) {
      if (!in_[k].is_boolean()) fail("'" + k + "' must be true or false");
      v = in_[k].get<bool>();
    }
    out()[k] = v;
    return v;
  }
  std::string choice(const std::string& k, const std::string& def, const std::vector<std::string>& options) {
    std::string v = def;
    if (has(k)) {
      if (!in_[k].is_string()) fail("'" + k + "' must be a string");
      v = in_[k].get<std::string>();
    }
    if (std::find(options.begin(), options.end(), v) == options.end()) {
      std::string all;
      for (auto& o : options) all += (all.empty() ? "" : ", ") + o;
      fail("'" + k + "' must be one of: " + all);
    }
    out()[k] = v;
    return v;
  }
  std::vector<double> nums(const std::string& k, std::vector<double> def) {
    if (has(k)) {
      if (!in_[k].is_array()) fail("'" + k + "' must be an array of numbers");
      def.clear();
      for (auto& e : in_[k]) {
        if (!e.is_number()) fail("'" + k + "' must be an array of numbers");
        def.push_back(e.get<double>());
      }
    }
    out()[k] = def;
    return def;
  }
  std::vector<int> ints(const std::string& k, std::vector<int> def, int lo) {
    if (has(k)) {
      if (!in_[k].is_array()) fail("'" + k + "' must be an array of integers");
      def.clear();
      for (auto& e : in_[k]) {
        if (!e.is_number_integer()) fail("'" + k + "' must be an array of integers");
        def.push_back(e.get<int>());
      }
    }
    for (int v : def)
      if (v < lo) fail("'" + k + "' entries must be >= " + std::to_string(lo));
    out()[k] = def;
    return def;
  }
  Block sub(const std::string& k, std::vector<std::string> allowed) {
    static const json null_json;
    return Block(has(k) ? in_[k] : null_json, path(k), root_, ptr_ / k, std::move(allowed));
  }
  void echo(const std::string& k, const json& v) { out()[k] = v; }

 private:
  json& out() { return (*root_)[ptr_]; }

  const json& in_;
  std::string path_;
  std::shared_ptr<json> root_;
  json::json_pointer ptr_;
};

// {"box": [x0, x1(, y0, y1)]}, {"xstrip": [x0, x1]}, {"ystrip": [y0, y1]} or
// {"ball": [cx, cy, r]}; a two-entry box and the strips are unbounded across.
inline phase::Region read_region(Block& b, const std::string& key) {
  phase::Region r;
  if (!b.has(key)) {
    b.echo(key, json::array());
    return r;
  }
  const json& arr = b.raw(key);
  if (!arr.is_array()) b.fail("'" + key + "' must be an array of shapes");
  constexpr double big = 1e9;
  for (auto& s : arr) {
    auto nums = [&](const char* k) {
      std::vector<double> v;
      if (!s[k].is_array()) b.fail("shape '" + std::string(k) + "' must be an array");
      for (auto& e : s[k]) {
        if (!e.is_number()) b.fail("shape coordinates must be numbers");
        v.push_back(e.get<double>());
      }
      return v;
    };
    if (!s.is_object() || s.size() != 1) b.fail("each shape is an object with one key: box, xstrip, ystrip or ball");
    if (s.contains("box")) {
      auto v = nums("box");
      if (v.size() == 2) v = {v[0], v[1], -big, big};
      if (v.size() != 4 || !(v[1] > v[0]) || !(v[3] > v[2])) b.fail("box needs [x0, x1] or [x0, x1, y0, y1]");
      r.shapes.push_back(phase::Shape::box(v[0], v[1], v[2], v[3]));
    } else if (s.contains("xstrip") || s.contains("ystrip")) {
      bool vertical = s.contains("xstrip");
      auto v = nums(vertical ? "xstrip" : "ystrip");
      if (v.size() != 2 || !(v[1] > v[0])) b.fail("strip needs [lo, hi] with hi > lo");
      r.shapes.push_back(vertical ? phase::Shape::box(v[0], v[1], -big, big) : phase::Shape::box(-big, big, v[0], v[1]));
    } else if (s.contains("ball")) {
      auto v = nums("ball");
      if (v.size() != 3 || !(v[2] > 0)) b.fail("ball needs [cx, cy, r] with r > 0");
      r.shapes.push_back(phase::Shape::ball({v[0], v[1]}, v[2]));
    } else {
      b.fail("unknown shape; use box, xstrip, ystrip or ball");
    }
  }
  b.echo(key, arr);
  return r;
}

inline std::vector<Vec2> read_points(Block& b, const std::string& key) {
  std::vector<Vec2> out;
  if (!b.has(key)) return out;
  const json& arr = b.raw(key);
  if (!arr.is_array()) b.fail("'" + key + "' must be an array of [x, y] pairs");
  for (auto& e : arr) {
    if (!e.is_array() || e.size() != 2 || !e[0].is_number() || !e[1].is_number())
      b.fail("'" + key + "' entries must be [x, y] number pairs");
    out.push_back({e[0].get<double>(), e[1].get<double>()});
  }
  b.echo(key, arr);
  return out;
}

// ----------------------------------------------------------------- model

struct ModelSpec {
  bool present = false;
  phase::SpatialDomain domain = phase::Torus1D{};
  int nx = 0, ny = 1;
  std::string velocity = "line";  // circle | line | plane | kernel
  int nv = 0;
  double v_max = 6.0, offset = 0.5;
  phase::Potential potential = phase::Potential::zero();
  phase::DegeneracyWeight sigma = phase::DegeneracyWeight::constant(1.0);
  std::string collision = "bgk";  // bgk | fokker_planck | reversible_kernel | random_kernel
  int kernel_m = 0;
  long kernel_seed = 0;
  std::vector<double> alpha{0.0};

  bool grid_capable() const { return !std::holds_alternative<phase::Disc2D>(domain); }
  // Σ as a region: the indicator's support, everywhere for σ > 0 constant
  phase::Region sigma_region() const {
    if (sigma.kind == phase::DegeneracyWeight::Kind::Indicator) return sigma.region;
    return phase::Region::everywhere();
  }
  double sigma_max() const {
    switch (sigma.kind) {
      case phase::DegeneracyWeight::Kind::Constant:
        return sigma.value;
      case phase::DegeneracyWeight::Kind::Indicator:
        return std::max(sigma.inside, sigma.outside);
      default:
        return 1.0;
    }
  }
};

inline ModelSpec read_model(Block& top) {
  ModelSpec m;
  m.present = top.has("model");
  Block b = top.sub("model", {"domain", "velocity", "potential", "sigma", "collision", "alpha"});
  if (!m.present) return m;
  Block d = b.sub("domain", {"type", "length", "a", "b", "lx", "ly", "radius", "nx", "ny"});
  std::string type = d.choice("type", "torus1d", {"torus1d", "interval", "torus2d", "disc"});
  m.nx = static_cast<int>(d.integer("nx", 32, 1));
  if (type == "torus1d") {
    m.domain = phase::Torus1D{d.positive("length", 1.0)};
  } else if (type == "interval") {
    double a = d.num("a", 0.0), bb = d.num("b", 1.0);
    if (!(bb > a)) d.fail("interval needs b > a");
    m.domain = phase::Interval1D{a, bb};
  } else if (type == "torus2d") {
    m.domain = phase::Torus2D{d.positive("lx", 1.0), d.positive("ly", 1.0)};
    m.ny = static_cast<int>(d.integer("ny", m.nx, 1));
  } else {
    m.domain = phase::Disc2D{d.positive("radius", 1.0)};
  }
  Block c = b.sub("collision", {"type", "m", "seed"});
  m.collision = c.choice("type", "bgk", {"bgk", "fokker_planck", "reversible_kernel", "random_kernel"});
  bool kernel = m.collision == "reversible_kernel" || m.collision == "random_kernel";
  if (kernel) {
    m.kernel_m = static_cast<int>(c.integer("m", 6, 2));
    m.kernel_seed = c.integer("seed", 1, 0);
  }
  Block v = b.sub("velocity", {"type", "n", "v_max", "offset"});
  m.velocity = v.choice("type", kernel ? "kernel" : (phase::dimension(m.domain) == 1 ? "line" : "circle"),
                        {"circle", "line", "plane", "kernel"});
  if ((m.velocity == "kernel") != kernel) v.fail("velocity type 'kernel' goes with kernel collisions only");
  if (!kernel) {
    m.nv = static_cast<int>(v.integer("n", 16, 1));
    if (m.velocity == "circle") m.offset = v.num("offset", 0.5);
    else m.v_max = v.positive("v_max", 6.0);
  }
  Block p = b.sub("potential", {"type", "omega"});
  if (p.choice("type", "zero", {"zero", "harmonic"}) == "harmonic") m.potential = phase::Potential::harmonic(p.positive("omega", 1.0));
  Block s = b.sub("sigma", {"type", "value", "shapes", "inside", "outside", "p"});
  std::string st = s.choice("type", "constant", {"constant", "indicator", "power_law"});
  try {
    if (st == "constant") m.sigma = phase::DegeneracyWeight::constant(s.num("value", 1.0));
    if (st == "indicator") {
      auto region = read_region(s, "shapes");
      m.sigma = phase::DegeneracyWeight::indicator(region, s.num("inside", 1.0), s.num("outside", 0.0));
    }
    if (st == "power_law") m.sigma = phase::DegeneracyWeight::power_law(s.positive("p", 1.0));
  } catch (const PreconditionError& e) {
    s.fail(e.what());
  }
  m.alpha = b.nums("alpha", {0.0});
  for (double a : m.alpha)
    if (a < 0 || a > 1) b.fail("alpha entries must lie in [0, 1]");
  return m;
}

inline collision::CollisionOperator make_collision(const ModelSpec& m, const phase::VelocitySpace& vel) {
  if (m.collision == "bgk") return collision::bgk(vel);
  if (m.collision == "fokker_planck") return collision::fokker_planck(vel);
  if (m.collision == "reversible_kernel") return collision::random_reversible_kernel(m.kernel_m, m.kernel_seed);
  return collision::random_kernel(m.kernel_m, m.kernel_seed);
}

inline phase::VelocitySpace make_velocity(const ModelSpec& m) {
  if (m.velocity == "circle") return phase::VelocitySpace::circle(m.nv, m.offset);
  if (m.velocity == "line") return phase::VelocitySpace::line(m.nv, m.v_max);
  if (m.velocity == "plane") return phase::VelocitySpace::plane(m.nv, m.v_max);
  return make_collision(m, phase::VelocitySpace::line(2)).vel;
}

inline phase::GridPtr make_grid(const ModelSpec& m) {
  require(m.present, "this task needs a model block");
  if (!m.grid_capable()) throw PreconditionError("disc domains support characteristic tracing only, not grid runs");
  return phase::make_phase_grid(phase::SpatialGrid::make(m.domain, m.nx, m.ny), make_velocity(m), m.potential);
}

inline evolve::Model make_model(const ModelSpec& m) {
  auto g = make_grid(m);
  return evolve::make_model(g, m.sigma, make_collision(m, g->vel), m.alpha);
}

// ----------------------------------------------------------------- tasks

struct SimulateSpec {
  double dt = 0.0;  // 0: largest stable explicit step, or 0.05 for implicit transport
  double T = 10.0;
  evolve::Splitting splitting = evolve::Splitting::Strang;
  int battery = 0;
  double battery_T = 0.0;
  bool slow_mode = true;
  bool require_decay = true;
  double min_r2 = 0.99;
  double certificate_slack = 0.1;
  double monotone_tol = 1e-8;
  double stationarity_tol = 1e-8;
  int stationarity_steps = 10;
};

struct GapSpec {
  long dense_cap = 5000;
  double arnoldi_tau = 0.0;  // 0: refuse above the cap
  bool compare_fit = false;
  double fit_T = 30.0, fit_dt = 0.0, fit_tol = 0.15;
};

struct GccSpec {
  double T = 8.0;
  int steps = 1024;
  double threshold = 1.0;
  double ramp = 1.0 / 24;  // 0: indicator χ
  std::optional<phase::Region> chi_region;
  int nx = 32, ny = 32, nv = 32;
  double offset = 0.0;
  int refine = 0;
  std::string expect = "pass";
  std::string mode = "deterministic";
  std::vector<Vec2> positions, velocities;  // override the sample grid when given
  int particles = 10000, min_particles = 100;
  std::vector<int> psi_steps;
  int psi_samples = 8, psi_plan = 4;
  long psi_seed = 5;
  double psi_tol = 1e-3, psi_halving_tol = 0.3;
};

struct CheegerSpec {
  std::string battery = "cheeger";
  int count = 100, m_min = 2, m_max = 12;
  double tol = 1e-9;
};

struct IneqSpec {
  std::string kind = "divergence";
  int dim = 2;
  double x0 = 0, x1 = 1, y0 = 0, y1 = 1;
  std::string potential = "zero";
  double ax = 1, ay = 1, cx = 0, cy = 0;
  std::vector<int> resolutions{16, 32, 64};
  int angles = 0;  // 0: match the grid
  double residual_tol = 1e-6, spread_tol = 0.2;
  bool interval_check = true;
  double interval_tol = 1e-10;
  std::string korn_mode = "averages";
};

struct HypoSpec {
  std::string kappa = "tanh";
  double omega = 1.0, delta0 = 1.0;
  bool commutators = true;
  std::vector<int> nodes{257, 513, 1025};
  double min_order = 2.0, exact_tol = 1e-10, antisymmetry_tol = 1e-10;
  bool poincare = true;
  std::vector<int> poincare_n{32, 64};
  double poincare_L = 6.0;
  int poincare_dense = 24, poincare_random = 100;
  double poincare_tol = 0.05;
  bool gap_scan = false;
  std::vector<double> exponents{1, 2, 3};
  std::vector<int> resolutions{24, 32};
  double scan_L = 6.0;
  bool include_constant = true;
  double variation_tol = 0.25;
};

struct ValidateSpec {
  double regularity_eps = 1.0, regularity_constant = 4.0;
  std::optional<phase::Region> poincare_region;
  int compatibility_samples = 200;
};

struct OutputSpec {
  int stride = 1;
  bool plot_script = false;
};

inline const std::vector<std::string>& task_names() {
  static const std::vector<std::string> t{"simulate", "gap", "gcc", "cheeger", "ineq", "hypo", "validate"};
  return t;
}

struct Config {
  json resolved;
  std::vector<std::string> tasks;
  std::string name;
  std::uint64_t seed = 0;
  int threads = 1;
  ModelSpec model;
  SimulateSpec simulate;
  GapSpec gap;
  GccSpec gcc;
  CheegerSpec cheeger;
  IneqSpec ineq;
  HypoSpec hypo;
  ValidateSpec validate;
  OutputSpec output;

  std::string hash() const {
    std::ostringstream os;
    os << std::hex << std::setw(16) << std::setfill('0') << fnv1a(resolved.dump());
    return os.str();
  }
  // Comment header for every output file.
  std::string header() const {
    return "# kinlab " + std::string(version) + " config=" + hash() + " seed=" + std::to_string(seed) +
           "\n# config " + resolved.dump() + "\n";
  }
};

struct Overrides {
  std::optional<std::uint64_t> seed;
  std::optional<int> threads;
};

inline Config parse(const json& in, const Overrides& ov = {}) {
  if (!in.is_object()) throw SchemaError("config: top level must be an object");
  auto tree = std::make_shared<json>(json::object());
  Block top = Block::root(in, tree, {"name", "task", "seed", "threads", "model", "numerics", "output"});
  Config c;
  if (top.has("name")) {
    if (!top.raw("name").is_string()) top.fail("'name' must be a string");
    c.name = top.raw("name").get<std::string>();
    top.echo("name", c.name);
  }
  if (top.has("task")) {
    const json& t = top.raw("task");
    if (t.is_string()) c.tasks = {t.get<std::string>()};
    else if (t.is_array())
      for (auto& e : t) {
        if (!e.is_string()) top.fail("'task' entries must be strings");
        c.tasks.push_back(e.get<std::string>());
      }
    else top.fail("'task' must be a string or an array of strings");
    for (auto& t2 : c.tasks)
      if (std::find(task_names().begin(), task_names().end(), t2) == task_names().end())
        top.fail("unknown task '" + t2 + "'");
  }
  top.echo("task", c.tasks);
  long seed = top.integer("seed", 0, 0);
  if (ov.seed) {
    seed = static_cast<long>(*ov.seed);
    top.echo("seed", seed);
  }
  c.seed = static_cast<std::uint64_t>(seed);
  c.threads = static_cast<int>(top.integer("threads", 1, 1));
  if (ov.threads) {
    if (*ov.threads < 1) top.fail("threads must be >= 1");
    c.threads = *ov.threads;
    top.echo("threads", c.threads);
  }
  c.model = read_model(top);

  Block num = top.sub("numerics", task_names());
  {
    Block b = num.sub("simulate", {"dt", "T", "splitting", "battery", "battery_T", "slow_mode", "require_decay",
                                   "min_r2", "certificate_slack", "monotone_tol", "stationarity_tol",
                                   "stationarity_steps"});
    auto& s = c.simulate;
    s.dt = b.num("dt", 0.0);
    if (s.dt < 0) b.fail("'dt' must be >= 0");
    s.T = b.positive("T", 10.0);
    s.splitting = b.choice("splitting", "strang", {"strang", "lie"}) == "lie" ? evolve::Splitting::Lie
                                                                             : evolve::Splitting::Strang;
    s.battery = static_cast<int>(b.integer("battery", 0, 0));
    s.battery_T = b.num("battery_T", s.T);
    if (!(s.battery_T > 0)) b.fail("'battery_T' must be > 0");
    s.slow_mode = b.flag("slow_mode", true);
    s.require_decay = b.flag("require_decay", true);
    s.min_r2 = b.num("min_r2", 0.99);
    s.certificate_slack = b.num("certificate_slack", 0.1);
    s.monotone_tol = b.num("monotone_tol", 1e-8);
    s.stationarity_tol = b.num("stationarity_tol", 1e-8);
    s.stationarity_steps = static_cast<int>(b.integer("stationarity_steps", 10, 1));
  }
  {
    Block b = num.sub("gap", {"dense_cap", "arnoldi_tau", "compare_fit", "fit_T", "fit_dt", "fit_tol"});
    auto& g = c.gap;
    g.dense_cap = b.integer("dense_cap", 5000, 2);
    g.arnoldi_tau = b.num("arnoldi_tau", 0.0);
    g.compare_fit = b.flag("compare_fit", false);
    g.fit_T = b.positive("fit_T", 30.0);
    g.fit_dt = b.num("fit_dt", 0.0);
    g.fit_tol = b.positive("fit_tol", 0.15);
  }
  {
    Block b = num.sub("gcc", {"T", "steps", "threshold", "chi", "samples", "expect", "mode", "monte_carlo", "psi"});
    auto& g = c.gcc;
    g.T = b.positive("T", 8.0);
    g.steps = static_cast<int>(b.integer("steps", 1024, 1));
    g.threshold = b.num("threshold", 1.0);
    Block chi = b.sub("chi", {"ramp", "shapes"});
    g.ramp = chi.num("ramp", 1.0 / 24);
    if (g.ramp < 0) chi.fail("'ramp' must be >= 0");
    if (chi.has("shapes")) g.chi_region = read_region(chi, "shapes");
    Block sm = b.sub("samples", {"nx", "ny", "nv", "offset", "refine", "positions", "velocities"});
    g.nx = static_cast<int>(sm.integer("nx", 32, 1));
    g.ny = static_cast<int>(sm.integer("ny", g.nx, 1));
    g.nv = static_cast<int>(sm.integer("nv", 32, 1));
    g.offset = sm.num("offset", 0.0);
    g.refine = static_cast<int>(sm.integer("refine", 0, 0));
    g.positions = read_points(sm, "positions");
    g.velocities = read_points(sm, "velocities");
    g.expect = b.choice("expect", "pass", {"pass", "fail"});
    g.mode = b.choice("mode", "deterministic", {"deterministic", "monte_carlo"});
    Block mc = b.sub("monte_carlo", {"particles", "min_particles"});
    g.particles = static_cast<int>(mc.integer("particles", 10000, 1));
    g.min_particles = static_cast<int>(mc.integer("min_particles", 100, 1));
    Block psi = b.sub("psi", {"steps", "samples", "plan", "seed", "tol", "halving_tol"});
    g.psi_steps = psi.ints("steps", {}, 1);
    g.psi_samples = static_cast<int>(psi.integer("samples", 8, 1));
    g.psi_plan = static_cast<int>(psi.integer("plan", 4, 1));
    g.psi_seed = psi.integer("seed", 5, 0);
    g.psi_tol = psi.positive("tol", 1e-3);
    g.psi_halving_tol = psi.positive("halving_tol", 0.3);
  }
  {
    Block b = num.sub("cheeger", {"battery", "count", "m_min", "m_max", "tol"});
    auto& s = c.cheeger;
    s.battery = b.choice("battery", "cheeger", {"cheeger", "gamma2"});
    s.count = static_cast<int>(b.integer("count", 100, 1));
    s.m_min = static_cast<int>(b.integer("m_min", 2, 2));
    s.m_max = static_cast<int>(b.integer("m_max", 12, s.m_min));
    s.tol = b.num("tol", s.battery == "cheeger" ? 1e-9 : 1e-10);
  }
  {
    Block b = num.sub("ineq", {"kind", "domain", "potential", "resolutions", "angles", "residual_tol", "spread_tol",
                               "interval_check", "interval_tol", "korn_mode"});
    auto& s = c.ineq;
    s.kind = b.choice("kind", "divergence", {"divergence", "korn", "poincare_lions", "stokes", "weighted_poincare"});
    Block d = b.sub("domain", {"dim", "x0", "x1", "y0", "y1"});
    s.dim = static_cast<int>(d.integer("dim", 2, 1));
    if (s.dim > 2) d.fail("'dim' must be 1 or 2");
    s.x0 = d.num("x0", 0.0);
    s.x1 = d.num("x1", 1.0);
    if (!(s.x1 > s.x0)) d.fail("needs x1 > x0");
    if (s.dim == 2) {
      s.y0 = d.num("y0", 0.0);
      s.y1 = d.num("y1", 1.0);
      if (!(s.y1 > s.y0)) d.fail("needs y1 > y0");
    }
    Block p = b.sub("potential", {"type", "ax", "ay", "cx", "cy"});
    s.potential = p.choice("type", "zero", {"zero", "quadratic"});
    if (s.potential == "quadratic") {
      s.ax = p.positive("ax", 1.0);
      s.ay = p.positive("ay", 1.0);
      s.cx = p.num("cx", 0.0);
      s.cy = p.num("cy", 0.0);
    }
    s.resolutions = b.ints("resolutions", {16, 32, 64}, 4);
    if (s.resolutions.empty()) b.fail("'resolutions' must not be empty");
    s.angles = static_cast<int>(b.integer("angles", 0, 0));
    s.residual_tol = b.positive("residual_tol", 1e-6);
    s.spread_tol = b.positive("spread_tol", 0.2);
    s.interval_check = b.flag("interval_check", s.kind == "divergence");
    s.interval_tol = b.positive("interval_tol", 1e-10);
    s.korn_mode = b.choice("korn_mode", "averages", {"averages", "boundary", "both"});
  }
  {
    Block b = num.sub("hypo", {"kappa", "omega", "delta0", "commutators", "poincare", "gap_scan"});
    auto& h = c.hypo;
    h.kappa = b.choice("kappa", "tanh", {"tanh", "atan", "tanh3"});
    h.omega = b.positive("omega", 1.0);
    h.delta0 = b.positive("delta0", 1.0);
    Block cm = b.sub("commutators", {"enabled", "nodes", "min_order", "exact_tol", "antisymmetry_tol"});
    h.commutators = cm.flag("enabled", true);
    h.nodes = cm.ints("nodes", {257, 513, 1025}, 9);
    h.min_order = cm.positive("min_order", 2.0);
    h.exact_tol = cm.positive("exact_tol", 1e-10);
    h.antisymmetry_tol = cm.positive("antisymmetry_tol", 1e-10);
    Block pc = b.sub("poincare", {"enabled", "n", "L", "dense_n", "random", "tol"});
    h.poincare = pc.flag("enabled", true);
    h.poincare_n = pc.ints("n", {32, 64}, 4);
    h.poincare_L = pc.positive("L", 6.0);
    h.poincare_dense = static_cast<int>(pc.integer("dense_n", 24, 4));
    h.poincare_random = static_cast<int>(pc.integer("random", 100, 0));
    h.poincare_tol = pc.positive("tol", 0.05);
    Block gs = b.sub("gap_scan", {"enabled", "exponents", "resolutions", "L", "include_constant", "variation_tol"});
    h.gap_scan = gs.flag("enabled", false);
    h.exponents = gs.nums("exponents", {1, 2, 3});
    for (double p : h.exponents)
      if (!(p > 0)) gs.fail("'exponents' must be > 0");
    h.resolutions = gs.ints("resolutions", {24, 32}, 4);
    h.scan_L = gs.positive("L", 6.0);
    h.include_constant = gs.flag("include_constant", true);
    h.variation_tol = gs.positive("variation_tol", 0.25);
  }
  {
    Block b = num.sub("validate", {"regularity_eps", "regularity_constant", "poincare_shapes", "compatibility_samples"});
    auto& v = c.validate;
    v.regularity_eps = b.positive("regularity_eps", 1.0);
    v.regularity_constant = b.positive("regularity_constant", 4.0);
    if (b.has("poincare_shapes")) v.poincare_region = read_region(b, "poincare_shapes");
    v.compatibility_samples = static_cast<int>(b.integer("compatibility_samples", 200, 1));
  }
  {
    Block b = top.sub("output", {"stride", "plot_script"});
    c.output.stride = static_cast<int>(b.integer("stride", 1, 1));
    c.output.plot_script = b.flag("plot_script", false);
  }
  c.resolved = *tree;
  return c;
}

inline json load_json(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw SchemaError("cannot read config file " + path);
  try {
    return json::parse(in);
  } catch (const json::parse_error& e) {
    throw SchemaError(path + ": " + e.what());
  }
}

inline std::string preset_path(const std::string& name) {
#ifdef KINLAB_PRESET_DIR
  return std::string(KINLAB_PRESET_DIR) + "/" + name + ".json";
#else
  return "presets/" + name + ".json";
#endif
}

}  // namespace kinlab::config
