#pragma once

// Task runners shared by the CLI and the acceptance binary. Each returns a
// summary with named checks; artifacts go to ctx.out_dir when it is set.

#include <chrono>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "kinlab/config.hpp"
#include "kinlab/control.hpp"
#include "kinlab/funineq.hpp"
#include "kinlab/hypo.hpp"

namespace kinlab::run {

using config::Config;
using config::json;
using Eigen::VectorXd;

struct Check {
  std::string name;
  bool pass = false;
  double value = 0.0;
  double bound = 0.0;
  std::string note;
  bool applicable = true;
};

struct Summary {
  std::string task;
  json report = json::object();
  std::vector<Check> checks;
  double seconds = 0.0;

  bool passed() const {
    for (auto& c : checks)
      if (c.applicable && !c.pass) return false;
    return true;
  }
  void add(std::string name, bool pass, double value, double bound, std::string note = "") {
    checks.push_back({std::move(name), pass, value, bound, std::move(note), true});
  }
  json to_json() const {
    json j;
    j["task"] = task;
    j["report"] = report;
    j["seconds"] = seconds;
    j["passed"] = passed();
    j["checks"] = json::array();
    for (auto& c : checks)
      j["checks"].push_back({{"name", c.name},
                             {"status", !c.applicable ? "n/a" : (c.pass ? "pass" : "fail")},
                             {"value", std::isfinite(c.value) ? json(c.value) : json(nullptr)},
                             {"bound", c.bound},
                             {"note", c.note}});
    return j;
  }
};

struct Context {
  std::string out_dir;  // empty: no files

  bool writing() const { return !out_dir.empty(); }
  std::string file(const std::string& name) const { return out_dir + "/" + name; }
};

// Puts the provenance header in front of a file written by a module writer.
inline void stamp(const std::string& path, const std::string& header) {
  std::ifstream in(path);
  std::stringstream body;
  body << in.rdbuf();
  in.close();
  std::ofstream out(path, std::ios::trunc);
  out << header << body.str();
}

inline json vec_json(Vec2 v) { return json::array({v.x, v.y}); }

inline double default_dt(const evolve::Model& m, double dt) {
  if (dt > 0) return dt;
  return m.transport.explicit_scheme ? m.transport.max_dt : 0.05;
}

// f∞ plus a unit zero-mass perturbation.
inline phase::Field initial_data(const phase::GridPtr& g, std::uint64_t seed) {
  phase::Field p = evolve::random_smooth_zero_mass(g, seed, 0);
  p.values /= phase::weighted_norm(p);
  p.values += g->finf;
  return p;
}

// Largest per-step change of f∞ over `steps` steps, relative to max f∞.
inline double stationarity_defect(const evolve::Model& m, const evolve::EvolutionConfig& cfg, int steps) {
  phase::Field f = phase::build_equilibrium(m.grid);
  const double scale = f.values.cwiseAbs().maxCoeff();
  double worst = 0.0;
  for (int k = 0; k < steps; ++k) {
    phase::Field next = evolve::step(m, f, cfg);
    worst = std::max(worst, (next.values - f.values).cwiseAbs().maxCoeff() / scale);
    f = next;
  }
  return worst;
}

// Largest relative increase between consecutive recorded norms.
inline double monotonicity_defect(const std::vector<double>& norm) {
  double worst = 0.0;
  const double floor = 1e-14 * (norm.empty() ? 0.0 : norm.front());
  for (std::size_t k = 1; k < norm.size(); ++k)
    if (norm[k - 1] > floor) worst = std::max(worst, (norm[k] - norm[k - 1]) / norm[k - 1]);
  return worst;
}

inline void write_plot_script(const std::string& path) {
  std::ofstream os(path);
  os << "import sys\nimport matplotlib\nmatplotlib.use('Agg')\nimport matplotlib.pyplot as plt\n"
        "import numpy as np\n\n"
        "d = np.genfromtxt(sys.argv[1] if len(sys.argv) > 1 else 'decay.csv', delimiter=',', comments='#',"
        " names=True)\n"
        "plt.semilogy(d['t'], d['norm'])\nplt.xlabel('t')\nplt.ylabel('distance to equilibrium')\n"
        "plt.savefig('decay.png', dpi=120)\n";
}

// ------------------------------------------------------------- simulate

inline Summary simulate(const Config& c, const Context& ctx) {
  Summary s;
  s.task = "simulate";
  const auto& sp = c.simulate;
  auto m = config::make_model(c.model);
  evolve::EvolutionConfig cfg;
  cfg.dt = default_dt(m, sp.dt);
  cfg.T_final = sp.T;
  cfg.splitting = sp.splitting;
  cfg.record_stride = c.output.stride;
  s.report["dt"] = cfg.dt;
  s.report["unknowns"] = m.grid->size();

  double stat = stationarity_defect(m, cfg, sp.stationarity_steps);
  s.add("equilibrium_stationary", stat <= sp.stationarity_tol, stat, sp.stationarity_tol);

  auto rep = evolve::run_decay(m, initial_data(m.grid, c.seed), cfg);
  double mono = monotonicity_defect(rep.norm);
  s.add("norm_monotone", mono <= sp.monotone_tol, mono, sp.monotone_tol);
  s.report["lambda_fit"] = rep.lambda_fit;
  s.report["r2"] = rep.r2;
  s.report["C_fit"] = rep.C_fit;
  s.report["fit_window"] = {rep.fit_t0, rep.fit_t1};
  s.report["eta"] = rep.eta;
  s.report["norm0"] = rep.norm0;
  s.report["norm_final"] = rep.norm.back();
  if (sp.require_decay) {
    s.add("lambda_fit_positive", rep.fitted && rep.lambda_fit > 0, rep.lambda_fit, 0.0);
    s.add("fit_r2", rep.fitted && rep.r2 >= sp.min_r2, rep.r2, sp.min_r2);
  }
  if (ctx.writing()) {
    evolve::write_decay_csv(rep, ctx.file("decay.csv"), c.header());
    if (c.output.plot_script) write_plot_script(ctx.file("plot_decay.py"));
  }

  if (sp.battery > 0) {
    std::optional<phase::Field> slow;
    if (sp.slow_mode) {
      phase::Field tail = phase::remove_equilibrium(rep.final_state);
      double n = phase::weighted_norm(tail);
      if (n > 0) {
        tail.values /= n;
        slow = tail;
      }
    }
    evolve::EvolutionConfig bc = cfg;
    bc.T_final = sp.battery_T;
    auto bat = evolve::eta_battery(m, bc, sp.battery, c.seed, slow);
    s.report["eta_min"] = bat.eta_min;
    s.report["eta_argmin"] = bat.argmin;
    s.report["certified"] = bat.certified;
    if (bat.certified) {
      s.report["certificate"] = {{"C", bat.certificate.C},
                                 {"Lambda", bat.certificate.Lambda},
                                 {"norm_rate", bat.certificate.norm_rate()},
                                 {"T", bat.certificate.T}};
    }
    double bound = (1 + sp.certificate_slack) * rep.lambda_fit;
    s.add("certificate_below_fit", bat.certified && bat.certificate.norm_rate() <= bound,
          bat.certified ? bat.certificate.norm_rate() : std::numeric_limits<double>::quiet_NaN(), bound,
          "norm rate Lambda/2 against the fitted norm decay rate");
    if (ctx.writing()) {
      std::ofstream os(ctx.file("battery.csv"));
      os << c.header() << "index,eta,slow_mode\n" << std::setprecision(12);
      for (std::size_t k = 0; k < bat.etas.size(); ++k)
        os << k << ',' << bat.etas[k] << ',' << (slow && k + 1 == bat.etas.size() ? 1 : 0) << '\n';
    }
  }
  return s;
}

// ------------------------------------------------------------------ gap

inline Summary gap(const Config& c, const Context& ctx) {
  Summary s;
  s.task = "gap";
  const auto& gp = c.gap;
  auto m = config::make_model(c.model);
  auto G = evolve::assemble_generator(m);
  std::function<VectorXd(const VectorXd&)> prop;
  evolve::EvolutionConfig pc;
  pc.dt = gp.arnoldi_tau;
  if (gp.arnoldi_tau > 0) prop = [&](const VectorXd& v) { return evolve::step(m, phase::Field(m.grid, v), pc).values; };
  auto rep = evolve::generator_spectral_gap(G, static_cast<std::size_t>(gp.dense_cap), prop, gp.arnoldi_tau);
  s.report["unknowns"] = G.G.rows();
  s.report["gap"] = rep.gap;
  s.report["rightmost"] = {rep.rightmost.real(), rep.rightmost.imag()};
  s.report["dense"] = rep.dense;
  s.add("gap_positive", rep.gap > 0, rep.gap, 0.0);
  if (gp.compare_fit) {
    evolve::EvolutionConfig cfg;
    cfg.dt = default_dt(m, gp.fit_dt);
    cfg.T_final = gp.fit_T;
    auto d = evolve::run_decay(m, initial_data(m.grid, c.seed), cfg);
    double rel = std::abs(d.lambda_fit - rep.gap) / rep.gap;
    s.report["lambda_fit"] = d.lambda_fit;
    s.report["r2"] = d.r2;
    s.add("gap_matches_fit", d.fitted && rel <= gp.fit_tol, rel, gp.fit_tol, "relative difference");
    if (ctx.writing()) evolve::write_decay_csv(d, ctx.file("decay.csv"), c.header());
  }
  if (ctx.writing()) {
    std::ofstream os(ctx.file("gap.csv"));
    os << c.header() << "unknowns,gap,re,im,dense\n" << std::setprecision(12) << G.G.rows() << ',' << rep.gap << ','
       << rep.rightmost.real() << ',' << rep.rightmost.imag() << ',' << (rep.dense ? 1 : 0) << '\n';
  }
  return s;
}

// ------------------------------------------------------------------ gcc

inline control::ControlConfig control_config(const Config& c) {
  const auto& g = c.gcc;
  require(c.model.present, "gcc needs a model block");
  control::ControlConfig cc;
  cc.sigma_region = g.chi_region ? *g.chi_region : c.model.sigma_region();
  if (g.ramp > 0) {
    cc.chi = control::plateau_chi(cc.sigma_region, g.ramp);
  } else {
    phase::Region r = cc.sigma_region;
    cc.chi = [r](Vec2 x) { return r.contains(x) ? 1.0 : 0.0; };
  }
  cc.T = g.T;
  cc.steps = g.steps;
  cc.threshold = g.threshold;
  cc.particles = g.particles;
  cc.min_particles = g.min_particles;
  cc.seed = c.seed;
  cc.threads = c.threads;
  phase::VelocitySpace vel = phase::dimension(c.model.domain) == 2 ? phase::VelocitySpace::circle(g.nv, g.offset)
                                                                   : phase::VelocitySpace::line(g.nv, c.model.v_max);
  if (g.positions.empty() || g.velocities.empty()) cc.plan = control::tensor_plan(c.model.domain, g.nx, g.ny, vel, g.refine);
  if (!g.positions.empty()) cc.plan.positions = g.positions;
  if (!g.velocities.empty()) cc.plan.velocities = g.velocities;
  return cc;
}

inline transport::ParticleModel particle_model(const Config& c) {
  transport::ParticleModel pm;
  pm.flow = transport::Flow(c.model.domain, c.model.potential);
  pm.law.dim = phase::dimension(c.model.domain);
  pm.law.kind = c.model.velocity == "circle" ? transport::VelocityLaw::Kind::UnitCircle
                                             : transport::VelocityLaw::Kind::Gaussian;
  auto sigma = c.model.sigma;
  pm.sigma = [sigma](Vec2 x) { return sigma(x); };
  pm.sigma_max = c.model.sigma_max();
  double a = c.model.alpha.empty() ? 0.0 : c.model.alpha[0];
  pm.alpha = [a](Vec2) { return a; };
  return pm;
}

// ψ normalization at each configured step count, on a 2D torus.
inline std::vector<double> psi_deviations(const Config& c, const transport::Flow& flow) {
  const auto& g = c.gcc;
  auto* t = std::get_if<phase::Torus2D>(&c.model.domain);
  require(t != nullptr, "the psi check runs on a 2D torus");
  std::mt19937_64 rng(static_cast<std::uint64_t>(g.psi_seed));
  std::uniform_real_distribution<double> U(0, 1);
  std::vector<std::pair<Vec2, Vec2>> samples;
  for (int k = 0; k < g.psi_samples; ++k) {
    double th = 2 * pi * U(rng);
    samples.push_back({{t->lx * U(rng), t->ly * U(rng)}, {std::cos(th), std::sin(th)}});
  }
  std::vector<double> out;
  for (int steps : g.psi_steps) {
    auto cc = control_config(c);
    cc.steps = steps;
    cc.plan = control::tensor_plan(c.model.domain, g.psi_plan, g.psi_plan, phase::VelocitySpace::circle(g.psi_plan, g.offset));
    out.push_back(control::psi_normalization_check(control::build_psi(flow, cc), samples));
  }
  return out;
}

inline Summary gcc(const Config& c, const Context& ctx) {
  Summary s;
  s.task = "gcc";
  const auto& g = c.gcc;
  auto cc = control_config(c);
  transport::Flow flow(c.model.domain, c.model.potential);
  control::GccReport rep = g.mode == "deterministic" ? control::gcc_deterministic(flow, cc)
                                                     : control::gcc_full_monte_carlo(particle_model(c), cc);
  s.report["mode"] = control::mode_name(rep.mode);
  s.report["c_min"] = rep.c_min;
  s.report["c_mean"] = rep.c_mean;
  s.report["lower_bound"] = rep.lower_bound;
  s.report["half_width"] = rep.half_width;
  s.report["samples"] = rep.samples;
  s.report["flagged"] = rep.flagged;
  s.report["argmin_x"] = vec_json(rep.argmin_x);
  s.report["argmin_v"] = vec_json(rep.argmin_v);
  s.report["threshold"] = rep.threshold;
  s.report["passed"] = rep.passed;
  if (g.expect == "pass") {
    s.add("gcc_pass", rep.passed, rep.mode == control::GccReport::Mode::Full ? rep.lower_bound : rep.c_min,
          rep.threshold);
  } else {
    // noise floor: exact zero for tracing, the confidence half-width for Monte Carlo
    double floor = rep.mode == control::GccReport::Mode::Full ? std::max(rep.half_width, 1e-12 * g.T) : 1e-12 * g.T;
    s.add("gcc_fails_with_witness", !rep.passed && rep.c_min <= floor, rep.c_min, floor);
  }
  if (ctx.writing()) {
    control::write_gcc_csv(rep, ctx.file("gcc.csv"), c.header());
    if (rep.mode == control::GccReport::Mode::Deterministic && phase::dimension(c.model.domain) == 2 && g.positions.empty())
      control::write_gcc_heatmap(rep, cc.plan, ctx.file("gcc_heatmap.csv"), c.header());
  }
  if (!g.psi_steps.empty()) {
    auto dev = psi_deviations(c, flow);
    s.report["psi_steps"] = g.psi_steps;
    s.report["psi_deviation"] = dev;
    s.add("psi_normalization", dev[0] <= g.psi_tol, dev[0], g.psi_tol);
    for (std::size_t k = 1; k < dev.size(); ++k) {
      double ratio = dev[k - 1] / dev[k];
      double expect = static_cast<double>(g.psi_steps[k]) / g.psi_steps[k - 1];
      s.add("psi_first_order_" + std::to_string(g.psi_steps[k]), std::abs(ratio / expect - 1) <= g.psi_halving_tol,
            ratio, expect);
    }
    if (ctx.writing()) {
      std::ofstream os(ctx.file("psi.csv"));
      os << c.header() << "steps,deviation\n" << std::setprecision(12);
      for (std::size_t k = 0; k < dev.size(); ++k) os << g.psi_steps[k] << ',' << dev[k] << '\n';
    }
  }
  return s;
}

// -------------------------------------------------------------- cheeger

inline Summary cheeger(const Config& c, const Context& ctx) {
  Summary s;
  s.task = "cheeger";
  const auto& cp = c.cheeger;
  const int span = cp.m_max - cp.m_min + 1;
  std::vector<json> rows(cp.count);
  std::vector<double> margin(cp.count);
  parallel_for(static_cast<std::size_t>(cp.count), c.threads, [&](std::size_t k) {
    int m = cp.m_min + static_cast<int>(k % span);
    std::uint64_t seed = splitmix64(c.seed) + k;
    auto L = collision::random_reversible_kernel(m, seed);
    if (cp.battery == "cheeger") {
      double phi = collision::cheeger_constant(L).phi;
      double l1 = collision::spectral_gap(L).lambda1;
      margin[k] = 2 * l1 - phi * phi;
      rows[k] = {k, m, phi, l1, margin[k]};
    } else {
      auto rng = stream_rng(seed, 1);
      std::normal_distribution<double> N01;
      VectorXd f = L.M();
      for (auto& x : f) x *= std::exp(0.7 * N01(rng));
      margin[k] = collision::gamma2_check(L, f).min_value;
      rows[k] = {k, m, margin[k]};
    }
  });
  double worst = *std::min_element(margin.begin(), margin.end());
  s.report["battery"] = cp.battery;
  s.report["count"] = cp.count;
  s.report["worst_margin"] = worst;
  if (cp.battery == "cheeger")
    s.add("two_lambda1_ge_phi_squared", worst >= -cp.tol, worst, -cp.tol, "min of 2 lambda1 - Phi^2");
  else
    s.add("gamma2_nonnegative", worst >= -cp.tol, worst, -cp.tol, "min of M L(f^2/M) - 2 f L f");
  if (ctx.writing()) {
    std::ofstream os(ctx.file(cp.battery + ".csv"));
    os << c.header() << (cp.battery == "cheeger" ? "index,m,phi,lambda1,margin\n" : "index,m,min_gamma2\n")
       << std::setprecision(12);
    for (auto& r : rows) {
      for (std::size_t i = 0; i < r.size(); ++i) os << (i ? "," : "") << r[i];
      os << '\n';
    }
  }
  return s;
}

// ----------------------------------------------------------------- ineq

inline funineq::WeightedDomain ineq_domain(const config::IneqSpec& sp, int n) {
  auto pot = sp.potential == "zero" ? funineq::WPotential::zero()
                                    : funineq::WPotential::quadratic(sp.ax, sp.ay, {sp.cx, sp.cy});
  return sp.dim == 1 ? funineq::interval_domain(sp.x0, sp.x1, n, pot)
                     : funineq::rectangle_domain(sp.x0, sp.x1, sp.y0, sp.y1, n, n, pot);
}

// Smooth zero-mass data scaled to the domain.
inline VectorXd ineq_data(const funineq::WeightedDomain& d) {
  VectorXd g(d.cells());
  for (int c = 0; c < d.cells(); ++c) {
    Vec2 p = d.cell_center(c);
    double u = (p.x - d.x0) / (d.x1 - d.x0), w = d.dim == 2 ? (p.y - d.y0) / (d.y1 - d.y0) : 0.25;
    g(c) = std::sin(2 * pi * u) * std::sin(2 * pi * w) + 0.5 * std::cos(2 * pi * u);
  }
  g.array() -= g.mean();
  return g;
}

inline VectorXd ineq_forcing(const funineq::WeightedDomain& d) {
  VectorXd s(d.faces());
  for (int f = 0; f < d.faces(); ++f) {
    Vec2 p = d.face_point(f);
    double u = (p.x - d.x0) / (d.x1 - d.x0), w = (p.y - d.y0) / (d.y1 - d.y0);
    s(f) = d.is_x_face(f) ? std::sin(pi * w) : std::cos(pi * u) * (w - 0.5);
  }
  return s;
}

// Max error of the 1D solve against the antiderivative of sin(2πx) on [0,1].
inline double interval_antiderivative_error(int n) {
  auto d = funineq::interval_domain(0, 1, n);
  VectorXd g(d.cells());
  for (int i = 0; i < d.nx; ++i) {
    double a = d.x0 + i * d.hx, b = a + d.hx;
    g(i) = (std::cos(2 * pi * a) - std::cos(2 * pi * b)) / (2 * pi * d.hx);
  }
  auto s = funineq::solve_divergence_H1(d, g);
  double err = 0.0;
  for (int f = 0; f < d.faces(); ++f)
    err = std::max(err, std::abs(s.F(f) - (1 - std::cos(2 * pi * d.face_point(f).x)) / (2 * pi)));
  return err;
}

inline double spread(const std::vector<double>& v) {
  auto [lo, hi] = std::minmax_element(v.begin(), v.end());
  return *hi / *lo - 1.0;
}

inline Summary ineq(const Config& c, const Context& ctx) {
  Summary s;
  s.task = "ineq";
  const auto& sp = c.ineq;
  s.report["kind"] = sp.kind;
  std::vector<double> constants;
  json rows = json::array();
  auto note_spread = [&](const std::string& what) {
    if (constants.size() >= 2) s.add(what + "_stable", spread(constants) <= sp.spread_tol, spread(constants), sp.spread_tol,
                                     "max/min - 1 over resolutions");
  };
  if (sp.kind == "divergence") {
    double worst_res = 0.0, worst_bnd = 0.0;
    for (int n : sp.resolutions) {
      auto d = ineq_domain(sp, n);
      funineq::DivergenceOptions o;
      o.angles = sp.angles > 0 ? sp.angles : std::max(32, n);
      o.threads = c.threads;
      auto sol = funineq::solve_divergence_H1(d, ineq_data(d), o);
      worst_res = std::max(worst_res, sol.residual);
      worst_bnd = std::max(worst_bnd, sol.boundary_max);
      constants.push_back(sol.ratio);
      rows.push_back({{"n", n}, {"C_D", sol.ratio}, {"residual", sol.residual}, {"raw_residual", sol.raw_residual},
                      {"correction", sol.correction}, {"patches", sol.patches}});
      if (ctx.writing() && n == sp.resolutions.back()) {
        funineq::write_face_field_csv(d, sol.F, ctx.file("divergence_F.csv"));
        stamp(ctx.file("divergence_F.csv"), c.header());
      }
    }
    s.add("residual", worst_res <= sp.residual_tol, worst_res, sp.residual_tol);
    s.add("boundary_exact_zero", worst_bnd == 0.0, worst_bnd, 0.0);
    note_spread("C_D");
    if (sp.interval_check) {
      double err = interval_antiderivative_error(64);
      s.report["interval_error"] = err;
      s.add("interval_antiderivative", err <= sp.interval_tol, err, sp.interval_tol);
    }
  } else if (sp.kind == "korn") {
    std::vector<funineq::KornConstraint> modes;
    if (sp.korn_mode != "boundary") modes.push_back(funineq::KornConstraint::Averages);
    if (sp.korn_mode != "averages") modes.push_back(funineq::KornConstraint::Boundary);
    for (auto mode : modes) {
      constants.clear();
      std::string tag = mode == funineq::KornConstraint::Averages ? "korn_averages" : "korn_boundary";
      for (int n : sp.resolutions) {
        auto rep = funineq::korn_constant(ineq_domain(sp, n), mode);
        constants.push_back(rep.constant);
        json r = {{"mode", tag}, {"n", n}, {"C_K", rep.constant}};
        for (auto& [k, v] : rep.details) r[k] = v;
        rows.push_back(r);
      }
      s.add(tag + "_finite", std::isfinite(constants.back()) && constants.back() > 0, constants.back(), 0.0);
      note_spread(tag);
    }
  } else if (sp.kind == "poincare_lions") {
    for (int n : sp.resolutions) {
      auto rep = funineq::poincare_lions_constant(ineq_domain(sp, n), 24, c.seed + 1);
      constants.push_back(rep.constant);
      rows.push_back({{"n", n}, {"C_PL", rep.constant}});
    }
    s.add("C_PL_finite", std::isfinite(constants.back()) && constants.back() > 0, constants.back(), 0.0);
    note_spread("C_PL");
  } else if (sp.kind == "stokes") {
    require(sp.dim == 2, "stokes runs on rectangles");
    double worst_div = 0.0, worst_bnd = 0.0;
    for (int n : sp.resolutions) {
      auto d = ineq_domain(sp, n);
      auto r = funineq::stokes_solve(d, ineq_forcing(d));
      worst_div = std::max(worst_div, r.div_max);
      worst_bnd = std::max(worst_bnd, r.boundary_max);
      constants.push_back(r.C_S);
      rows.push_back({{"n", n}, {"C_S", r.C_S}, {"div_max", r.div_max}, {"s_mean", r.s_mean}});
    }
    s.add("divergence_free", worst_div <= sp.residual_tol, worst_div, sp.residual_tol);
    s.add("boundary_exact_zero", worst_bnd == 0.0, worst_bnd, 0.0);
    note_spread("C_S");
  } else {
    for (int n : sp.resolutions) {
      auto rep = funineq::weighted_poincare_check(ineq_domain(sp, n));
      constants.push_back(rep.constant);
      json r = {{"n", n}, {"constant", rep.constant}};
      for (auto& [k, v] : rep.details) r[k] = v;
      rows.push_back(r);
    }
    s.add("constant_finite", std::isfinite(constants.back()) && constants.back() > 0, constants.back(), 0.0);
    note_spread("constant");
  }
  s.report["rows"] = rows;
  if (ctx.writing()) {
    std::ofstream os(ctx.file("ineq.csv"));
    os << c.header() << "row\n";
    for (auto& r : rows) os << r.dump() << '\n';
  }
  return s;
}

// ----------------------------------------------------------------- hypo

inline Summary hypo(const Config& c, const Context& ctx) {
  Summary s;
  s.task = "hypo";
  const auto& hp = c.hypo;
  hypo::Trap trap{hp.omega};
  auto sys = hypo::build_system(hypo::Kappa::named(hp.kappa), trap, hp.delta0);
  s.report["system"] = {{"kappa", hp.kappa},   {"delta", sys.delta},     {"halvings", sys.halvings},
                        {"w_min", sys.w_min},  {"w_max", sys.w_max},     {"dkt_min", sys.dkt_min},
                        {"dkt_sup", sys.dkt_sup}, {"kt_sup", sys.kt_sup}, {"weighted_dkt_sup", sys.weighted_dkt_sup},
                        {"kappa_c3", sys.kappa_c3}};
  s.add("w_band", sys.w_min >= 0.5 && sys.w_max <= 1.5, sys.w_min, 0.5);
  s.add("dkt_lower_bound", sys.dkt_min >= -0.5, sys.dkt_min, -0.5);
  if (hp.commutators) {
    hypo::ResidualOptions o;
    o.nodes = hp.nodes;
    o.exact_tol = hp.exact_tol;
    o.min_order = hp.min_order;
    auto rows = hypo::verify_commutator_chain(sys, o);
    auto br = hypo::verify_bracket_table(sys, o);
    rows.insert(rows.end(), br.begin(), br.end());
    json tab = json::array();
    for (auto& r : rows) {
      std::ostringstream note;
      note << "exact residuals " << std::scientific << std::setprecision(2) << r.exact_poly << " / " << r.exact_gauss;
      s.add("identity " + r.name, r.passed, r.order, hp.min_order, note.str());
      tab.push_back({{"identity", r.name}, {"exact_poly", r.exact_poly}, {"exact_gauss", r.exact_gauss},
                     {"fd", r.fd}, {"order", r.order}, {"passed", r.passed}});
    }
    s.report["identities"] = tab;
    double anti = 0.0;
    for (int k = 0; k < 4; ++k)
      anti = std::max(anti, hypo::antisymmetry_defect(sys, hypo::gaussian_test(0.8 + 0.1 * k, 0.5 - 0.2 * k, -0.3),
                                                      hypo::gaussian_test(1.1, -0.4, 0.6 - 0.3 * k)));
    s.add("B_antisymmetric", anti <= hp.antisymmetry_tol, anti, hp.antisymmetry_tol);
    if (ctx.writing()) {
      hypo::write_residual_csv(ctx.file("commutators.csv"), rows);
      stamp(ctx.file("commutators.csv"), c.header());
    }
  }
  if (hp.poincare) {
    auto oracle = hypo::weighted_poincare_2d_check(hp.poincare_dense, hp.poincare_L, hp.poincare_dense, 0);
    double rel = std::abs(oracle.lambda - oracle.dense_lambda) / oracle.dense_lambda;
    s.add("poincare2d_sparse_vs_dense", rel <= hp.poincare_tol, rel, hp.poincare_tol);
    std::vector<double> lams;
    json tab = json::array();
    for (std::size_t k = 0; k < hp.poincare_n.size(); ++k) {
      int n = hp.poincare_n[k];
      bool last = k + 1 == hp.poincare_n.size();
      auto p = hypo::weighted_poincare_2d_check(n, hp.poincare_L, 0, last ? hp.poincare_random : 0, c.seed + 3);
      lams.push_back(p.lambda);
      tab.push_back({{"n", n}, {"lambda", p.lambda}, {"constant", p.constant}, {"quotient_x", p.quotient_x}});
      if (last) {
        s.add("poincare2d_hermite_x", std::abs(p.quotient_x - 2.0) <= 2.0 * hp.poincare_tol, p.quotient_x, 2.0);
        s.add("poincare2d_random_functions", p.random_violations == 0, p.random_violations, 0.0);
      }
    }
    if (lams.size() >= 2) {
      double v = std::abs(lams.back() - lams[lams.size() - 2]) / lams.back();
      s.add("poincare2d_refinement", v <= hp.poincare_tol, v, hp.poincare_tol);
    }
    s.report["poincare2d"] = tab;
  }
  if (hp.gap_scan) {
    hypo::GapScanConfig gc;
    gc.exponents = hp.exponents;
    gc.resolutions = hp.resolutions;
    gc.L = hp.scan_L;
    gc.omega = hp.omega;
    gc.include_constant = hp.include_constant;
    gc.threads = c.threads;
    auto scan = hypo::gap_vs_degeneracy(gc);
    json tab = json::array();
    bool ok = true;
    for (auto& cell : scan.cells) {
      ok = ok && cell.error.empty() && cell.gap > 0;
      tab.push_back({{"p", cell.p}, {"n", cell.n}, {"gap", cell.gap}, {"error", cell.error}});
    }
    s.report["gap_scan"] = tab;
    s.add("gaps_positive", ok, ok ? 1.0 : 0.0, 1.0);
    s.add("gap_monotone_in_degeneracy", scan.monotone(), 0.0, 0.0);
    int fine = *std::max_element(gc.resolutions.begin(), gc.resolutions.end());
    if (scan.find(1.0, fine)) {
      if (gc.resolutions.size() >= 2) s.add("gap_p1_stable", scan.variation(1.0) <= hp.variation_tol, scan.variation(1.0), hp.variation_tol);
      double pmax = *std::max_element(gc.exponents.begin(), gc.exponents.end());
      if (pmax > 1.0)
        s.add("gap_p1_above_p" + std::to_string(static_cast<int>(pmax)), scan.gap(pmax, fine) < scan.gap(1.0, fine),
              scan.gap(pmax, fine), scan.gap(1.0, fine));
    }
    if (ctx.writing()) {
      hypo::write_gap_csv(ctx.file("gap_scan.csv"), scan);
      stamp(ctx.file("gap_scan.csv"), c.header());
    }
  }
  return s;
}

// ------------------------------------------------------------- validate

inline Summary validate(const Config& c, const Context& ctx) {
  Summary s;
  s.task = "validate";
  require(c.model.present, "validate needs a model block");
  const auto& m = c.model;
  auto na = [&](const std::string& name, const std::string& why) {
    s.checks.push_back({name, false, std::numeric_limits<double>::quiet_NaN(), 0.0, why, false});
  };

  // H1 geometry and potential regularity
  try {
    auto r = phase::regularity_check(m.domain, m.potential, phase::Region::everywhere(), c.validate.regularity_eps,
                                     c.validate.regularity_constant);
    s.add("H1 geometry", r.pass, r.sup_ratio, c.validate.regularity_constant, "sup |D2 phi| / (1 + |D phi|)");
  } catch (const PreconditionError& e) {
    na("H1 geometry", e.what());
  }

  std::optional<evolve::Model> model;
  if (m.grid_capable()) model = config::make_model(m);

  // H2 equilibrium
  if (model) {
    auto G = evolve::assemble_generator(*model);
    double r = (G.G * G.finf).cwiseAbs().maxCoeff() / G.finf.cwiseAbs().maxCoeff();
    evolve::EvolutionConfig cfg;
    cfg.dt = default_dt(*model, 0.0);
    double st = 0.0;
    std::string note = "generator and step residual on f_inf";
    try {
      st = stationarity_defect(*model, cfg, 5);
    } catch (const NumericalError& e) {
      st = std::numeric_limits<double>::infinity();
      note = e.what();
    }
    s.add("H2 equilibrium", r <= 1e-10 && st <= 1e-8, std::max(r, st), 1e-8, note);
  } else {
    na("H2 equilibrium", "grid runs are not available on this domain");
  }

  // H3 local gap, and the Γ2 sign for reversible kernels
  auto vel = config::make_velocity(m);
  auto L = config::make_collision(m, vel);
  double l1 = collision::spectral_gap(L).lambda1;
  s.add("H3 local gap", l1 > 1e-10, l1, 0.0, "lambda_1 of the collision operator");
  {
    auto rng = stream_rng(c.seed, 77);
    std::normal_distribution<double> N01;
    VectorXd f = L.M();
    for (auto& x : f) x *= std::exp(0.5 * N01(rng));
    auto g2 = collision::gamma2_check(L, f);
    if (g2.applicable) s.add("Gamma2 sign", g2.min_value >= -1e-10, g2.min_value, -1e-10);
    else na("Gamma2 sign", "kernel is not reversible");
  }

  // H4 boundary contraction
  if (model && phase::has_boundary(m.domain)) {
    auto R = transport::make_boundary(model->grid, m.alpha);
    double defect = transport::maxwell_mass_defect(R);
    auto comp = transport::boundary_compatibility_check(R, c.validate.compatibility_samples, c.seed + 1);
    s.add("H4 boundary", defect <= 1e-12 && comp.max_ratio <= 1 + 1e-6, comp.max_ratio, 1 + 1e-6,
          "mass defect " + std::to_string(defect));
  } else {
    na("H4 boundary", phase::has_boundary(m.domain) ? "grid runs are not available on this domain" : "no boundary");
  }

  // H5' control
  {
    auto cc = control_config(c);
    transport::Flow flow(m.domain, m.potential);
    auto r = control::gcc_deterministic(flow, cc);
    std::ostringstream note;
    note << "c_min at x=(" << r.argmin_x.x << "," << r.argmin_x.y << "), v=(" << r.argmin_v.x << "," << r.argmin_v.y
         << ")";
    s.add("H5' control", r.passed, r.c_min, r.threshold, note.str());
    s.report["control_witness"] = {{"x", vec_json(r.argmin_x)}, {"v", vec_json(r.argmin_v)}, {"c_min", r.c_min}};
  }

  // H6 macroscopic coercivity on Σ
  if (m.grid_capable()) {
    try {
      auto space = phase::SpatialGrid::make(m.domain, m.nx, m.ny);
      auto region = c.validate.poincare_region ? *c.validate.poincare_region : m.sigma_region();
      auto p = phase::poincare_constant(space, m.potential, region);
      s.add("H6 Poincare", p.valid, p.lambda2, 0.0, p.connected ? "lambda_2" : "region is not connected");
    } catch (const PreconditionError& e) {
      na("H6 Poincare", e.what());
    }
  } else {
    na("H6 Poincare", "grid runs are not available on this domain");
  }
  if (ctx.writing()) {
    std::ofstream os(ctx.file("validate.csv"));
    os << c.header() << "check,status,value,bound,note\n" << std::setprecision(12);
    for (auto& ch : s.checks)
      os << '"' << ch.name << "\"," << (!ch.applicable ? "n/a" : (ch.pass ? "pass" : "fail")) << ',' << ch.value << ','
         << ch.bound << ",\"" << ch.note << "\"\n";
  }
  return s;
}

inline Summary run_task(const std::string& task, const Config& c, const Context& ctx) {
  auto t0 = std::chrono::steady_clock::now();
  Summary s;
  if (task == "simulate") s = simulate(c, ctx);
  else if (task == "gap") s = gap(c, ctx);
  else if (task == "gcc") s = gcc(c, ctx);
  else if (task == "cheeger") s = cheeger(c, ctx);
  else if (task == "ineq") s = ineq(c, ctx);
  else if (task == "hypo") s = hypo(c, ctx);
  else if (task == "validate") s = validate(c, ctx);
  else throw SchemaError("unknown task '" + task + "'");
  s.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return s;
}

}  // namespace kinlab::run
