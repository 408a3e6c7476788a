#pragma once

#include <unsupported/Eigen/MatrixFunctions>

#include <Eigen/Dense>
#include <Eigen/Sparse>
#include <cmath>
#include <fstream>
#include <map>
#include <memory>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "kinlab/collision.hpp"
#include "kinlab/common.hpp"
#include "kinlab/linalg.hpp"
#include "kinlab/phase.hpp"
#include "kinlab/transport.hpp"

namespace kinlab::evolve {

using collision::CollisionOperator;
using Eigen::MatrixXd;
using Eigen::VectorXd;
using phase::Field;
using phase::GridPtr;
using transport::SpMat;

// ∂_t f + 𝒯f = σℒf on a phase grid, with Maxwell walls where the domain has them.
struct Model {
  GridPtr grid;
  phase::DegeneracyWeight sigma;
  CollisionOperator L;
  std::vector<double> alpha{0.0};
  std::vector<double> sigma_cell;
  transport::TransportOperator transport;

  // collision propagators keyed by σ·dt
  mutable std::map<double, MatrixXd> prop_cache;
};

inline Model make_model(const GridPtr& g, phase::DegeneracyWeight sigma, CollisionOperator L,
                        std::vector<double> alpha = {0.0}) {
  require(L.size() == g->nv(), "collision operator lives on a different velocity grid");
  for (std::size_t j = 0; j < g->nv(); ++j)
    if (std::abs(L.vel.M[j] - g->vel.M[j]) > 1e-14 || norm(L.vel.v[j] - g->vel.v[j]) > 1e-14)
      throw GridMismatch("collision operator lives on a different velocity grid");
  Model m;
  m.grid = g;
  m.sigma = std::move(sigma);
  m.L = std::move(L);
  m.alpha = alpha;
  for (std::size_t c = 0; c < g->space.size(); ++c) {
    double s = m.sigma(g->space.center(c));
    require(s >= 0 && std::isfinite(s), "sigma must be finite and >= 0 on the grid");
    m.sigma_cell.push_back(s);
  }
  m.transport = transport::build_transport(g, alpha);
  return m;
}

enum class Splitting { Lie, Strang };

struct EvolutionConfig {
  double dt = 1e-2;
  double T_final = 1.0;
  Splitting splitting = Splitting::Strang;
  int record_stride = 1;
  double growth_tol = 1e-8;  // relative norm growth tolerated per step
};

inline void validate(const EvolutionConfig& c) {
  require(c.dt > 0, "dt must be > 0");
  require(c.T_final >= c.dt, "T_final must be >= dt");
  require(c.record_stride >= 1, "record stride must be >= 1");
}

// exp(s ℒ) for BGK and scattering, Crank-Nicolson for Fokker-Planck.
inline const MatrixXd& collision_propagator(const Model& m, double s) {
  auto it = m.prop_cache.find(s);
  if (it != m.prop_cache.end()) return it->second;
  const std::size_t n = m.L.size();
  MatrixXd P;
  MatrixXd I = MatrixXd::Identity(n, n);
  switch (m.L.kind) {
    case CollisionOperator::Kind::Bgk: {
      MatrixXd Pi = m.L.L + I;  // M dvᵀ
      P = Pi + std::exp(-s) * (I - Pi);
      break;
    }
    case CollisionOperator::Kind::Scattering:
      P = (s * m.L.L).exp();
      break;
    case CollisionOperator::Kind::FokkerPlanck:
      P = (I - 0.5 * s * m.L.L).partialPivLu().solve(I + 0.5 * s * m.L.L);
      break;
  }
  return m.prop_cache.emplace(s, std::move(P)).first->second;
}

inline void collision_substep(const Model& m, Field& f, double dt) {
  const std::size_t nv = m.grid->nv();
  for (std::size_t c = 0; c < m.grid->space.size(); ++c) {
    double s = m.sigma_cell[c] * dt;
    if (s == 0) continue;
    const MatrixXd& P = collision_propagator(m, s);
    auto seg = f.values.segment(static_cast<Eigen::Index>(c * nv), static_cast<Eigen::Index>(nv));
    VectorXd tmp = P * seg;
    seg = tmp;
  }
}

// Explicit transport is sub-stepped to respect its CFL bound.
inline void transport_substep(const Model& m, Field& f, double dt) {
  const auto& op = m.transport;
  if (op.explicit_scheme && dt > op.max_dt * (1 + 1e-12)) {
    int k = static_cast<int>(std::ceil(dt / op.max_dt - 1e-12));
    for (int i = 0; i < k; ++i) f = transport::transport_step(op, f, dt / k);
  } else {
    f = transport::transport_step(op, f, dt);
  }
}

// One time step. Strang: for implicit transport half/full/half with the collision in
// the middle; for explicit transport the collision is split instead, so the transport
// keeps the full step (exact lattice shift at CFL 1).
inline Field step(const Model& m, const Field& f, const EvolutionConfig& cfg) {
  phase::check_grid(f, m.grid);
  require(cfg.dt > 0, "dt must be > 0");
  Field out = f;
  const double dt = cfg.dt;
  if (cfg.splitting == Splitting::Lie) {
    transport_substep(m, out, dt);
    collision_substep(m, out, dt);
  } else if (m.transport.explicit_scheme) {
    collision_substep(m, out, 0.5 * dt);
    transport_substep(m, out, dt);
    collision_substep(m, out, 0.5 * dt);
  } else {
    transport_substep(m, out, 0.5 * dt);
    collision_substep(m, out, dt);
    transport_substep(m, out, 0.5 * dt);
  }
  double n0 = phase::weighted_norm(f), n1 = phase::weighted_norm(out);
  if (!out.finite() || n1 > n0 * (1 + cfg.growth_tol) + 1e-300)
    throw NumericalError("norm growth detected in step: " + std::to_string(n0) + " -> " +
                         std::to_string(n1));
  return out;
}

// Interior part −2∫σ f ℒf dμ.
inline double dissipation_interior(const Model& m, const Field& f) {
  const auto& g = *m.grid;
  const std::size_t nv = g.nv();
  double s = 0.0;
  for (std::size_t c = 0; c < g.space.size(); ++c) {
    if (m.sigma_cell[c] == 0) continue;
    auto seg = f.values.segment(static_cast<Eigen::Index>(c * nv), static_cast<Eigen::Index>(nv));
    VectorXd Lf = m.L.L * seg;
    double q = 0.0;
    for (std::size_t j = 0; j < nv; ++j) q += seg(j) * Lf(j) * g.w_mu(g.idx(c, j));
    s += -2.0 * m.sigma_cell[c] * q;
  }
  return s;
}

// Boundary part −∫_{Γ₊}[(ℛγ₊f)² − (γ₊f)²] dν.
inline double dissipation_boundary(const Model& m, const Field& f) {
  if (!m.transport.boundary) return 0.0;
  const auto& R = *m.transport.boundary;
  VectorXd g = transport::outgoing_trace(R, f);
  return transport::nu_norm2_plus(R, g) - transport::nu_norm2_minus(R, transport::maxwell_apply(R, g));
}

inline double dissipation_total(const Model& m, const Field& f) {
  phase::check_grid(f, m.grid);
  return dissipation_interior(m, f) + dissipation_boundary(m, f);
}

// ------------------------------------------------------------ generator

struct GeneratorMatrix {
  SpMat G;            // d/dt f = G f
  VectorXd finf;      // kernel vector
  VectorXd mass;      // mass functional (dx dv weights)
};

inline GeneratorMatrix assemble_generator(const Model& m) {
  const auto& g = *m.grid;
  const std::size_t nv = g.nv();
  transport::Triplets t;
  for (std::size_t c = 0; c < g.space.size(); ++c) {
    double s = m.sigma_cell[c];
    if (s == 0) continue;
    for (std::size_t i = 0; i < nv; ++i)
      for (std::size_t j = 0; j < nv; ++j)
        if (m.L.L(i, j) != 0)
          t.emplace_back(static_cast<Eigen::Index>(g.idx(c, i)), static_cast<Eigen::Index>(g.idx(c, j)),
                         s * m.L.L(i, j));
  }
  const Eigen::Index n = static_cast<Eigen::Index>(g.size());
  SpMat C(n, n);
  C.setFromTriplets(t.begin(), t.end());
  GeneratorMatrix out;
  out.G = m.transport.A + C;
  out.finf = g.finf;
  out.mass = g.w_dxdv;
  return out;
}

// Discrete dissipation −2⟨f, Gf⟩_μ, including the numerical part of the scheme.
inline double dissipation_discrete(const Model& m, const GeneratorMatrix& G, const Field& f) {
  phase::check_grid(f, m.grid);
  VectorXd Gf = G.G * f.values;
  return -2.0 * f.values.cwiseProduct(Gf).dot(m.grid->w_mu);
}

inline void export_generator(const GeneratorMatrix& G, const std::string& file,
                             const std::string& header = "") {
  std::ofstream out(file);
  if (!out) throw PreconditionError("cannot write " + file);
  out << header;
  out.precision(17);
  for (int k = 0; k < G.G.outerSize(); ++k)
    for (SpMat::InnerIterator it(G.G, k); it; ++it) out << it.row() << ' ' << it.col() << ' ' << it.value() << '\n';
}

struct GapReport {
  double gap = 0.0;
  std::complex<double> rightmost;
  bool dense = true;
  bool converged = true;
  VectorXd witness;
};

// −max Re λ over the mass-zero subspace. The kernel direction f∞ is deflated by
// G − s f∞ mᵀ, which leaves every other eigenvalue in place (mᵀG = 0).
inline GapReport generator_spectral_gap(const GeneratorMatrix& G, std::size_t dense_cap = 5000,
                                        const std::function<VectorXd(const VectorXd&)>& propagate = nullptr,
                                        double tau = 0.0) {
  const Eigen::Index n = G.G.rows();
  GapReport rep;
  const double mf = G.mass.dot(G.finf);
  if (static_cast<std::size_t>(n) <= dense_cap) {
    MatrixXd A(G.G);
    double shift = 10.0 + 2.0 * A.diagonal().cwiseAbs().maxCoeff();
    A -= (shift / mf) * G.finf * G.mass.transpose();
    auto ep = linalg::rightmost_eigenpair(A);
    rep.rightmost = ep.value;
    rep.witness = ep.vector.real();
    rep.gap = std::max(0.0, -ep.value.real());
    if (std::abs(ep.value.real()) < 1e-10) rep.gap = 0.0;
    return rep;
  }
  if (!propagate || !(tau > 0))
    throw CapacityError("generator exceeds the dense eigensolve cap and no propagator was given");
  rep.dense = false;
  std::mt19937_64 rng(12345);
  std::normal_distribution<double> N01;
  VectorXd start(n);
  for (auto& x : start) x = N01(rng);
  auto deflate = [&](VectorXd v) {
    v -= (G.mass.dot(v) / mf) * G.finf;
    return v;
  };
  start = deflate(start);
  auto res = linalg::arnoldi_rightmost([&](const VectorXd& v) { return deflate(propagate(deflate(v))); },
                                       start, tau, 40, 40, 1e-7);
  rep.rightmost = res.rightmost;
  rep.witness = res.witness;
  rep.converged = res.converged;
  rep.gap = std::max(0.0, -res.rightmost.real());
  if (!res.converged) throw NumericalError("Arnoldi iteration did not converge");
  return rep;
}

// ---------------------------------------------------------- decay runs

struct DecayReport {
  std::vector<double> t, norm, dissipation;
  double lambda_fit = 0.0;  // rate of ‖f_t − (∫f)f∞‖
  double C_fit = 0.0;
  double r2 = 0.0;
  bool fitted = false;
  double fit_t0 = 0.0, fit_t1 = 0.0;
  double eta = 0.0;       // ∫₀ᵀ D dt / ‖f_init − (∫f)f∞‖², T = T_final
  double norm0 = 0.0;
  Field final_state;
};

struct Fit {
  double lambda = 0.0, C = 0.0, r2 = 0.0;
  bool ok = false;
  double t0 = 0.0, t1 = 0.0;
};

// Least squares of log y = log C − Λ t over the last half of the series (the first
// 10% is always discarded), truncated before underflow.
inline Fit fit_decay(const std::vector<double>& t, const std::vector<double>& y, double norm0,
                     double window = 0.5, double discard = 0.1) {
  Fit fit;
  if (t.size() < 4 || !(norm0 > 0)) return fit;
  std::size_t end = t.size();
  for (std::size_t k = 0; k < t.size(); ++k)
    if (y[k] <= 1e-12 * norm0) {
      end = k;
      break;
    }
  if (end < 4) return fit;
  const double T = t[end - 1];
  const double start_t = std::max(discard * t.back(), T - window * t.back());
  std::vector<double> xs, ls;
  for (std::size_t k = 0; k < end; ++k)
    if (t[k] >= start_t) {
      xs.push_back(t[k]);
      ls.push_back(std::log(y[k]));
    }
  if (xs.size() < 3) return fit;
  const double n = static_cast<double>(xs.size());
  double mx = 0, my = 0;
  for (std::size_t k = 0; k < xs.size(); ++k) {
    mx += xs[k] / n;
    my += ls[k] / n;
  }
  double sxx = 0, sxy = 0, syy = 0;
  for (std::size_t k = 0; k < xs.size(); ++k) {
    sxx += (xs[k] - mx) * (xs[k] - mx);
    sxy += (xs[k] - mx) * (ls[k] - my);
    syy += (ls[k] - my) * (ls[k] - my);
  }
  double slope = sxy / sxx;
  fit.lambda = -slope;
  fit.C = std::exp(my - slope * mx) / norm0;
  fit.r2 = syy > 0 ? sxy * sxy / (sxx * syy) : 1.0;
  fit.ok = true;
  fit.t0 = xs.front();
  fit.t1 = xs.back();
  return fit;
}

inline DecayReport run_decay(const Model& m, const Field& f_init, const EvolutionConfig& cfg) {
  validate(cfg);
  phase::check_grid(f_init, m.grid);
  DecayReport rep;
  const double mass = f_init.mass();
  Field f = f_init;
  auto dist = [&](const Field& u) {
    Field d = u;
    d.values -= mass * m.grid->finf;
    return d;
  };
  Field d0 = dist(f);
  rep.norm0 = phase::weighted_norm(d0);
  const long nsteps = static_cast<long>(std::llround(cfg.T_final / cfg.dt));
  double Dprev = dissipation_total(m, d0), integral = 0.0;
  rep.t.push_back(0.0);
  rep.norm.push_back(rep.norm0);
  rep.dissipation.push_back(Dprev);
  for (long k = 1; k <= nsteps; ++k) {
    f = step(m, f, cfg);
    Field d = dist(f);
    double D = dissipation_total(m, d);
    integral += 0.5 * cfg.dt * (D + Dprev);
    Dprev = D;
    if (k % cfg.record_stride == 0 || k == nsteps) {
      rep.t.push_back(k * cfg.dt);
      rep.norm.push_back(phase::weighted_norm(d));
      rep.dissipation.push_back(D);
    }
  }
  rep.final_state = f;
  if (rep.norm0 > 1e-300) rep.eta = integral / (rep.norm0 * rep.norm0);
  if (rep.norm0 > 1e-12 * phase::weighted_norm(f_init)) {
    Fit fit = fit_decay(rep.t, rep.norm, rep.norm0);
    rep.fitted = fit.ok;
    rep.lambda_fit = fit.lambda;
    rep.C_fit = fit.C;
    rep.r2 = fit.r2;
    rep.fit_t0 = fit.t0;
    rep.fit_t1 = fit.t1;
  }
  return rep;
}

inline void write_decay_csv(const DecayReport& r, const std::string& file, const std::string& header = "") {
  std::ofstream out(file);
  if (!out) throw PreconditionError("cannot write " + file);
  out << header << "t,norm,dissipation\n";
  out.precision(17);
  for (std::size_t k = 0; k < r.t.size(); ++k) out << r.t[k] << ',' << r.norm[k] << ',' << r.dissipation[k] << '\n';
}

// --------------------------------------------------------- certificate

struct Certificate {
  double eta = 0.0;
  double T = 0.0;
  double C = 0.0;
  double Lambda = 0.0;  // rate for the squared norm: ‖f_t‖² ≤ C e^{−Λt} ‖f_0‖²
  double norm_rate() const { return 0.5 * Lambda; }
};

inline Certificate certified_rate(double eta, double T) {
  require(T > 0, "certificate horizon must be > 0");
  if (!(eta > 0)) throw PreconditionError("no measured dissipation: eta <= 0, no certificate");
  if (!(eta < 1)) throw PreconditionError("eta must be < 1");
  Certificate c;
  c.eta = eta;
  c.T = T;
  c.C = 1.0 / (1.0 - eta);
  c.Lambda = -std::log(1.0 - eta) / T;
  return c;
}

// Smooth zero-mass data: low Fourier modes in x times a quadratic in v, times f∞.
inline Field random_smooth_zero_mass(const GridPtr& g, std::uint64_t seed, std::uint64_t counter) {
  auto rng = stream_rng(seed, counter);
  std::normal_distribution<double> N01;
  const auto& sp = g->space;
  const double Lx = sp.nx * sp.dx, Ly = sp.ny * sp.dy;
  const int lmax = sp.dim() == 2 ? 2 : 0;
  std::vector<double> ca, sa;
  for (int k = 0; k <= 2; ++k)
    for (int l = -lmax; l <= lmax; ++l) {
      ca.push_back(N01(rng));
      sa.push_back(N01(rng));
    }
  double b[3];
  for (double& x : b) x = N01(rng);
  Field f(g);
  for (std::size_t c = 0; c < sp.size(); ++c) {
    Vec2 x = sp.center(c);
    double ux = (x.x - sp.x0) / Lx, uy = sp.dim() == 2 ? x.y / Ly : 0.0;
    double s = 0.0;
    std::size_t q = 0;
    for (int k = 0; k <= 2; ++k)
      for (int l = -lmax; l <= lmax; ++l, ++q) {
        double ph = 2 * pi * (k * ux + l * uy);
        s += ca[q] * std::cos(ph) + sa[q] * std::sin(ph);
      }
    for (std::size_t j = 0; j < g->nv(); ++j) {
      Vec2 v = g->vel.v[j];
      double p = 1.0 + b[0] * v.x + b[1] * v.y + 0.5 * b[2] * (v.x * v.x - v.y * v.y);
      f(c, j) = s * p * g->finf(g->idx(c, j));
    }
  }
  return phase::remove_equilibrium(f);
}

struct BatteryReport {
  std::vector<double> etas;
  double eta_min = 0.0;
  int argmin = -1;          // index into etas; the slow mode (if given) is last
  Certificate certificate;
  bool certified = false;
};

// Worst η over a seeded battery of zero-mass data, plus an optional slow-mode candidate.
inline BatteryReport eta_battery(const Model& m, const EvolutionConfig& cfg, int count, std::uint64_t seed,
                                 const std::optional<Field>& slow = std::nullopt) {
  BatteryReport rep;
  std::vector<Field> data;
  for (int k = 0; k < count; ++k) data.push_back(random_smooth_zero_mass(m.grid, seed, static_cast<std::uint64_t>(k)));
  if (slow) data.push_back(phase::remove_equilibrium(*slow));
  for (auto& f0 : data) {
    EvolutionConfig c = cfg;
    c.record_stride = std::max<int>(1, static_cast<int>(std::llround(cfg.T_final / cfg.dt)));
    rep.etas.push_back(run_decay(m, f0, c).eta);
  }
  for (std::size_t k = 0; k < rep.etas.size(); ++k)
    if (rep.argmin < 0 || rep.etas[k] < rep.eta_min) {
      rep.eta_min = rep.etas[k];
      rep.argmin = static_cast<int>(k);
    }
  if (rep.eta_min > 0 && rep.eta_min < 1) {
    rep.certificate = certified_rate(rep.eta_min, cfg.T_final);
    rep.certified = true;
  }
  return rep;
}

}  // namespace kinlab::evolve
