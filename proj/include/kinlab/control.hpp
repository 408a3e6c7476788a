#pragma once

#include <cmath>
#include <fstream>
#include <functional>
#include <limits>
#include <string>
#include <vector>

#include "kinlab/common.hpp"
#include "kinlab/phase.hpp"
#include "kinlab/transport.hpp"

namespace kinlab::control {

using phase::SpatialDomain;
using phase::VelocitySpace;
using transport::Flow;

// ------------------------------------------------------------- sampling

// Tensor product of positions × velocities, plus an optional low-discrepancy
// cloud around the worst tensor sample.
struct SamplingPlan {
  std::vector<Vec2> positions;
  std::vector<Vec2> velocities;
  Vec2 position_spacing;
  VelocitySpace::Kind velocity_kind = VelocitySpace::Kind::Discrete;
  double velocity_spacing = 0.0;  // angle for Circle, component step for Line/Plane
  int refine = 0;

  std::size_t tensor_size() const { return positions.size() * velocities.size(); }
};

inline SamplingPlan tensor_plan(const SpatialDomain& d, int nx, int ny, const VelocitySpace& vel, int refine = 0) {
  require(nx >= 1 && ny >= 1, "sampling grid needs at least one point per axis");
  require(vel.size() > 0, "sampling needs at least one velocity");
  require(refine >= 0, "refinement count must be >= 0");
  SamplingPlan p;
  p.velocities = vel.v;
  p.velocity_kind = vel.kind;
  p.velocity_spacing = vel.spacing;
  p.refine = refine;
  auto axis = [](double a, double b, int n, std::vector<double>& out) {
    for (int i = 0; i < n; ++i) out.push_back(a + (i + 0.5) * (b - a) / n);
    return (b - a) / n;
  };
  std::vector<double> xs, ys{0.0};
  if (auto* t = std::get_if<phase::Torus1D>(&d)) {
    p.position_spacing.x = axis(0, t->length, nx, xs);
  } else if (auto* iv = std::get_if<phase::Interval1D>(&d)) {
    p.position_spacing.x = axis(iv->a, iv->b, nx, xs);
  } else if (auto* t2 = std::get_if<phase::Torus2D>(&d)) {
    ys.clear();
    p.position_spacing.x = axis(0, t2->lx, nx, xs);
    p.position_spacing.y = axis(0, t2->ly, ny, ys);
  } else {
    const double R = std::get<phase::Disc2D>(d).radius;
    ys.clear();
    p.position_spacing.x = axis(-R, R, nx, xs);
    p.position_spacing.y = axis(-R, R, ny, ys);
  }
  for (double y : ys)
    for (double x : xs)
      if (phase::signed_distance(d, {x, y}) < 0) p.positions.push_back({x, y});
  require(!p.positions.empty(), "sampling grid has no interior point");
  return p;
}

inline double radical_inverse(std::uint64_t i, unsigned base) {
  double inv = 1.0 / base, f = inv, r = 0.0;
  while (i > 0) {
    r += f * static_cast<double>(i % base);
    i /= base;
    f *= inv;
  }
  return r;
}

// ---------------------------------------------------------------- config

struct ControlConfig {
  phase::Region sigma_region;      // Σ
  std::function<double(Vec2)> chi;  // supported in Σ
  double chi_sup = 1.0;
  std::function<double(Vec2)> w = [](Vec2) { return 1.0; };
  double w_sup = 1.0;
  double T = 1.0;
  int steps = 1024;  // quadrature steps on [0, T]
  double threshold = 1.0;
  SamplingPlan plan;
  int particles = 10000;
  int min_particles = 100;
  std::uint64_t seed = 0;
  int threads = 1;
  double psi_floor = 1e-6;  // lower bound for the ψ denominator
  int psi_times = 5;        // snapshot times stored in PsiWeight

  double dt() const { return T / steps; }
};

// C¹ plateau inside Σ; zero on the complement, so supp χ ⊆ Σ.
inline std::function<double(Vec2)> plateau_chi(const phase::Region& sigma, double ramp, double height = 1.0) {
  require(ramp > 0 && height > 0, "plateau needs ramp > 0 and height > 0");
  return [sigma, ramp, height](Vec2 x) { return height * sigma.profile(x, ramp); };
}

inline void validate(const ControlConfig& c) {
  require(c.T > 0, "control horizon T must be > 0");
  require(c.steps >= 1, "quadrature needs at least one step");
  require(static_cast<bool>(c.chi) && static_cast<bool>(c.w), "chi and w must be set");
  require(c.plan.tensor_size() > 0, "sampling plan is empty");
  for (auto& x : c.plan.positions) {
    double v = c.chi(x);
    require(v >= 0 && std::isfinite(v), "chi must be finite and >= 0");
    require(v <= c.chi_sup * (1 + 1e-12), "chi exceeds its declared bound");
    require(v == 0 || c.sigma_region.contains(x), "supp chi must lie inside the thermalisation region");
  }
}

// ---------------------------------------------------------------- report

struct GccSample {
  Vec2 x, v;
  double integral = 0.0;
  double stderr_ = 0.0;
  bool flagged = false;
};

struct GccReport {
  enum class Mode { Deterministic, Full };
  Mode mode = Mode::Deterministic;
  double T = 0.0;
  double threshold = 1.0;
  double c_min = 0.0;
  double c_mean = 0.0;
  Vec2 argmin_x, argmin_v;
  std::size_t samples = 0;
  std::size_t flagged = 0;
  int particles = 0;
  double half_width = 0.0;   // 99% normal half-width at the argmin
  double lower_bound = 0.0;  // min over samples of mean − half-width
  bool passed = false;
  std::vector<GccSample> records;
};

inline const char* mode_name(GccReport::Mode m) { return m == GccReport::Mode::Full ? "full" : "deterministic"; }

constexpr double z99 = 2.5758293035489004;

// ∫₀ᵀ χ(X_t) w(V_t) dt by the trapezoid rule along the specular flow.
inline double control_integral(const Flow& flow, const ControlConfig& c, Vec2 x, Vec2 v) {
  const double h = c.dt();
  double prev = c.chi(x) * c.w(v), s = 0.0;
  for (int k = 0; k < c.steps; ++k) {
    flow.advance(x, v, h);
    double cur = c.chi(x) * c.w(v);
    s += 0.5 * h * (prev + cur);
    prev = cur;
  }
  return s;
}

namespace detail {

inline void summarize(GccReport& r) {
  double sum = 0.0;
  std::size_t ok = 0;
  r.c_min = std::numeric_limits<double>::infinity();
  r.lower_bound = std::numeric_limits<double>::infinity();
  r.flagged = 0;
  for (auto& s : r.records) {
    if (s.flagged) {
      ++r.flagged;
      continue;
    }
    ++ok;
    sum += s.integral;
    double hw = z99 * s.stderr_;
    r.lower_bound = std::min(r.lower_bound, s.integral - hw);
    if (s.integral < r.c_min) {
      r.c_min = s.integral;
      r.argmin_x = s.x;
      r.argmin_v = s.v;
      r.half_width = hw;
    }
  }
  r.samples = r.records.size();
  if (ok == 0) throw NumericalError("every control sample failed");
  r.c_mean = sum / static_cast<double>(ok);
  if (r.mode == GccReport::Mode::Deterministic) {
    r.lower_bound = r.c_min;
    r.passed = r.flagged == 0 && r.c_min >= r.threshold;
  } else {
    r.passed = r.flagged == 0 && r.lower_bound > 0 && r.lower_bound >= r.threshold;
  }
}

// Halton points in a cell-sized box around (x, v).
inline std::vector<std::pair<Vec2, Vec2>> refinement_points(const SpatialDomain& d, const SamplingPlan& p, Vec2 x,
                                                            Vec2 v) {
  std::vector<std::pair<Vec2, Vec2>> out;
  const bool two = phase::dimension(d) == 2;
  for (int i = 1; i <= p.refine; ++i) {
    auto u = static_cast<std::uint64_t>(i);
    double a = radical_inverse(u, 2) - 0.5, b = radical_inverse(u, 3) - 0.5;
    double c = radical_inverse(u, 5) - 0.5, e = radical_inverse(u, 7) - 0.5;
    Vec2 xr{x.x + a * p.position_spacing.x, two ? x.y + b * p.position_spacing.y : 0.0};
    if (phase::signed_distance(d, xr) >= 0) continue;
    xr = phase::wrap(d, xr);
    Vec2 vr = v;
    if (p.velocity_kind == VelocitySpace::Kind::Circle) {
      double th = std::atan2(v.y, v.x) + c * p.velocity_spacing;
      vr = {std::cos(th), std::sin(th)};
    } else if (p.velocity_kind == VelocitySpace::Kind::Line) {
      vr.x += c * p.velocity_spacing;
    } else if (p.velocity_kind == VelocitySpace::Kind::Plane) {
      vr = {v.x + c * p.velocity_spacing, v.y + e * p.velocity_spacing};
    }
    out.push_back({xr, vr});
  }
  return out;
}

}  // namespace detail

// Deterministic checker: trapezoid quadrature along specular characteristics for
// every sample; min/mean and the argmin; pass iff every sample reaches the threshold.
inline GccReport gcc_deterministic(const Flow& flow, const ControlConfig& c) {
  validate(c);
  GccReport r;
  r.T = c.T;
  r.threshold = c.threshold;
  const auto& p = c.plan;
  auto eval = [&](GccSample& s) {
    try {
      s.integral = control_integral(flow, c, s.x, s.v);
    } catch (const NumericalError&) {
      s.flagged = true;
      s.integral = std::numeric_limits<double>::quiet_NaN();
    }
  };
  r.records.resize(p.tensor_size());
  parallel_for(r.records.size(), c.threads, [&](std::size_t i) {
    auto& s = r.records[i];
    s.x = p.positions[i / p.velocities.size()];
    s.v = p.velocities[i % p.velocities.size()];
    eval(s);
  });
  detail::summarize(r);
  if (p.refine > 0) {
    auto pts = detail::refinement_points(flow.domain, p, r.argmin_x, r.argmin_v);
    std::vector<GccSample> extra(pts.size());
    parallel_for(pts.size(), c.threads, [&](std::size_t i) {
      extra[i].x = pts[i].first;
      extra[i].v = pts[i].second;
      eval(extra[i]);
    });
    r.records.insert(r.records.end(), extra.begin(), extra.end());
    detail::summarize(r);
  }
  return r;
}

// Full-semigroup checker: E[∫₀ᵀ χ(X_t) dt] over particles started at each sample,
// with collisions and Maxwell walls from the particle model.
inline GccReport gcc_full_monte_carlo(const transport::ParticleModel& m, const ControlConfig& c) {
  validate(c);
  if (c.particles <= 0) throw PreconditionError("Monte Carlo needs at least one particle");
  require(c.particles >= c.min_particles, "particle count below the configured minimum");
  GccReport r;
  r.mode = GccReport::Mode::Full;
  r.T = c.T;
  r.threshold = c.threshold;
  r.particles = c.particles;
  const auto& p = c.plan;
  const double h = c.dt();
  const std::size_t np = static_cast<std::size_t>(c.particles);
  auto run = [&](GccSample& s, std::uint64_t sample_id) {
    std::vector<double> vals(np);
    std::vector<char> bad(np, 0);
    parallel_for(np, c.threads, [&](std::size_t k) {
      auto rng = stream_rng(c.seed, sample_id * np + k);
      transport::ParticleState st;
      st.x = s.x;
      st.v = s.v;
      if (m.law.kind == transport::VelocityLaw::Kind::Nodes) {
        for (std::size_t j = 0; j < m.law.nodes.size(); ++j)
          if (norm(m.law.nodes.v[j] - s.v) < 1e-12) st.j = static_cast<int>(j);
      }
      try {
        double prev = c.chi(st.x), acc = 0.0;
        for (int i = 0; i < c.steps; ++i) {
          st = transport::monte_carlo_step(m, st, h, rng);
          double cur = c.chi(st.x);
          acc += 0.5 * h * (prev + cur);
          prev = cur;
        }
        vals[k] = acc;
      } catch (const NumericalError&) {
        bad[k] = 1;
      }
    });
    double mean = 0.0, sq = 0.0;
    for (std::size_t k = 0; k < np; ++k) {
      if (bad[k]) {
        s.flagged = true;
        s.integral = std::numeric_limits<double>::quiet_NaN();
        return;
      }
      mean += vals[k];
    }
    mean /= static_cast<double>(np);
    for (double v : vals) sq += (v - mean) * (v - mean);
    s.integral = mean;
    s.stderr_ = np > 1 ? std::sqrt(sq / static_cast<double>(np - 1) / static_cast<double>(np)) : 0.0;
  };
  r.records.resize(p.tensor_size());
  for (std::size_t i = 0; i < r.records.size(); ++i) {
    r.records[i].x = p.positions[i / p.velocities.size()];
    r.records[i].v = p.velocities[i % p.velocities.size()];
    run(r.records[i], i);
  }
  detail::summarize(r);
  if (p.refine > 0) {
    auto pts = detail::refinement_points(m.flow.domain, p, r.argmin_x, r.argmin_v);
    for (std::size_t i = 0; i < pts.size(); ++i) {
      GccSample s;
      s.x = pts[i].first;
      s.v = pts[i].second;
      run(s, r.records.size() + i);
      r.records.push_back(s);
    }
    detail::summarize(r);
  }
  return r;
}

inline void write_gcc_csv(const GccReport& r, const std::string& file, const std::string& header = "") {
  std::ofstream out(file);
  if (!out) throw PreconditionError("cannot write " + file);
  out << header << "x0,y0,vx0,vy0,integral,stderr,flagged\n";
  out.precision(17);
  for (auto& s : r.records)
    out << s.x.x << ',' << s.x.y << ',' << s.v.x << ',' << s.v.y << ',' << s.integral << ',' << s.stderr_ << ','
        << (s.flagged ? 1 : 0) << '\n';
}

// Worst integral over velocities at each tensor position.
inline void write_gcc_heatmap(const GccReport& r, const SamplingPlan& p, const std::string& file,
                              const std::string& header = "") {
  std::ofstream out(file);
  if (!out) throw PreconditionError("cannot write " + file);
  out << header << "x,y,min_integral\n";
  out.precision(17);
  const std::size_t nv = p.velocities.size();
  for (std::size_t i = 0; i < p.positions.size(); ++i) {
    double m = std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < nv && i * nv + j < r.records.size(); ++j) m = std::min(m, r.records[i * nv + j].integral);
    out << p.positions[i].x << ',' << p.positions[i].y << ',' << m << '\n';
  }
}

// -------------------------------------------------------------------- ψ

struct PsiRefused : PreconditionError {
  Vec2 x, v;
  double denominator;
  PsiRefused(Vec2 x_, Vec2 v_, double d)
      : PreconditionError("psi denominator below floor at x=(" + std::to_string(x_.x) + "," + std::to_string(x_.y) +
                          "), v=(" + std::to_string(v_.x) + "," + std::to_string(v_.y) +
                          "): " + std::to_string(d)),
        x(x_),
        v(v_),
        denominator(d) {}
};

// ψ(t,x,v) = χ(x)w(v) / ((1/T)∫₀ᵀ χw(Φ_{s−t}(x,v)) ds), evaluated on demand by
// tracing back to time 0; snapshots on the plan grid are kept for inspection.
struct PsiWeight {
  Flow flow;
  ControlConfig config;
  std::vector<double> times;
  std::vector<double> denominator;        // t = 0, tensor plan order
  std::vector<std::vector<double>> psi;   // [time][tensor sample]
  double denominator_min = 0.0;
  double psi_max = 0.0;

  // (1/T) trapezoid of χw along Φ_{s−t}(x,v), s ∈ [0, T].
  double denominator_at(double t, Vec2 x, Vec2 v) const {
    const double h = config.dt();
    long back = std::lround(t / h);
    require(std::abs(back * h - t) <= 1e-9 * (1 + t), "psi is tabulated on multiples of dt");
    v = -v;
    for (long k = 0; k < back; ++k) flow.advance(x, v, h);
    v = -v;
    return control_integral(flow, config, x, v) / config.T;
  }

  double operator()(double t, Vec2 x, Vec2 v) const {
    double num = config.chi(x) * config.w(v);
    if (num == 0) return 0.0;
    double d = denominator_at(t, x, v);
    if (d < config.psi_floor) throw PsiRefused(x, v, d);
    return num / d;
  }
};

inline PsiWeight build_psi(const Flow& flow, const ControlConfig& c) {
  validate(c);
  require(c.psi_floor > 0, "psi floor must be > 0");
  require(c.psi_times >= 1, "psi needs at least one snapshot time");
  PsiWeight P;
  P.flow = flow;
  P.config = c;
  const auto& p = c.plan;
  const std::size_t n = p.tensor_size(), nv = p.velocities.size();
  P.denominator.resize(n);
  parallel_for(n, c.threads, [&](std::size_t i) {
    P.denominator[i] = control_integral(flow, c, p.positions[i / nv], p.velocities[i % nv]) / c.T;
  });
  std::size_t worst = 0;
  for (std::size_t i = 0; i < n; ++i)
    if (P.denominator[i] < P.denominator[worst]) worst = i;
  P.denominator_min = P.denominator[worst];
  if (P.denominator_min < c.psi_floor) throw PsiRefused(p.positions[worst / nv], p.velocities[worst % nv], P.denominator_min);
  for (int k = 0; k < c.psi_times; ++k) {
    long idx = c.psi_times == 1 ? 0 : std::lround(static_cast<double>(k) * c.steps / (c.psi_times - 1));
    P.times.push_back(idx * c.dt());
  }
  for (double t : P.times) {
    std::vector<double> snap(n);
    parallel_for(n, c.threads, [&](std::size_t i) { snap[i] = P(t, p.positions[i / nv], p.velocities[i % nv]); });
    for (double s : snap) P.psi_max = std::max(P.psi_max, s);
    P.psi.push_back(std::move(snap));
  }
  return P;
}

// max |(1/T) Σ_k ψ(t_k, X_{t_k}, V_{t_k}) dt − 1| over the given starting points
// (left Riemann sum on the ψ time grid).
inline double psi_normalization_check(const PsiWeight& P, const std::vector<std::pair<Vec2, Vec2>>& samples) {
  const auto& c = P.config;
  const double h = c.dt();
  std::vector<double> dev(samples.size());
  parallel_for(samples.size(), c.threads, [&](std::size_t i) {
    Vec2 x = samples[i].first, v = samples[i].second;
    double s = 0.0;
    for (int k = 0; k < c.steps; ++k) {
      s += P(k * h, x, v) * h;
      P.flow.advance(x, v, h);
    }
    dev[i] = std::abs(s / c.T - 1.0);
  });
  double worst = 0.0;
  for (double d : dev) worst = std::max(worst, d);
  return worst;
}

}  // namespace kinlab::control
