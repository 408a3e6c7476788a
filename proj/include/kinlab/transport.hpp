#pragma once

#include <Eigen/Dense>
#include <Eigen/Sparse>
#include <Eigen/SparseLU>
#include <cmath>
#include <fstream>
#include <functional>
#include <map>
#include <memory>
#include <random>
#include <string>
#include <vector>

#include "kinlab/collision.hpp"
#include "kinlab/common.hpp"
#include "kinlab/phase.hpp"

namespace kinlab::transport {

using Eigen::VectorXd;
using phase::Field;
using phase::GridPtr;
using phase::Potential;
using phase::SpatialDomain;
using SpMat = Eigen::SparseMatrix<double>;
using Triplets = std::vector<Eigen::Triplet<double>>;

// ------------------------------------------------------- characteristics

enum Event : unsigned { None = 0, Reflect = 1, Wrap = 2, Diffuse = 4, Scatter = 8 };

struct CharacteristicState {
  Vec2 x;
  Vec2 v;
  double t = 0.0;
  unsigned flags = 0;  // events since the previous recorded state
};

inline Vec2 specular_reflect(Vec2 v, Vec2 n) {
  require(std::abs(norm(n) - 1.0) <= 1e-12, "reflection normal must be a unit vector");
  return reflect(v, n);
}

// Re-emission rule at a boundary hit: (position, outward normal, velocity) -> velocity.
using WallRule = std::function<Vec2(Vec2, Vec2, Vec2, unsigned&)>;

struct Flow {
  SpatialDomain domain;
  Potential potential;
  double escape_radius = 1e6;

  Flow() = default;
  Flow(SpatialDomain d, Potential p) : domain(std::move(d)), potential(std::move(p)) {
    phase::validate(domain);
  }

  int dim() const { return phase::dimension(domain); }

  double energy(Vec2 x, Vec2 v) const {
    double kin = dim() == 1 ? 0.5 * v.x * v.x : 0.5 * dot(v, v);
    return kin + potential.raw(x);
  }

  // Flight without boundaries for time h.
  void drift(Vec2& x, Vec2& v, double h) const {
    const bool one = dim() == 1;
    switch (potential.kind) {
      case Potential::Kind::Zero:
        x.x += h * v.x;
        if (!one) x.y += h * v.y;
        return;
      case Potential::Kind::Harmonic: {
        const double w = potential.omega, c = std::cos(w * h), s = std::sin(w * h);
        auto rot = [&](double& q, double& p) {
          double q1 = q * c + p * s / w;
          double p1 = -q * w * s + p * c;
          q = q1;
          p = p1;
        };
        rot(x.x, v.x);
        if (!one) rot(x.y, v.y);
        return;
      }
      case Potential::Kind::Tabulated: {
        // Störmer-Verlet, one substep
        Vec2 g = potential.grad(x);
        v.x -= 0.5 * h * g.x;
        x.x += h * v.x;
        g = potential.grad(x);
        v.x -= 0.5 * h * g.x;
        return;
      }
    }
  }

  // One step of length h with boundary events; returns the event flags.
  unsigned advance(Vec2& x, Vec2& v, double h, const WallRule& rule = nullptr) const {
    unsigned flags = 0;
    if (phase::has_boundary(domain)) {
      double remaining = h;
      for (int hits = 0; remaining > 0; ++hits) {
        if (hits > 10000) throw NumericalError("too many boundary events in one step");
        Vec2 xt = x, vt = v;
        drift(xt, vt, remaining);
        if (phase::signed_distance(domain, xt) <= 0) {
          x = xt;
          v = vt;
          break;
        }
        // bisection on the first exit time
        double lo = 0.0, hi = remaining;
        for (int it = 0; it < 80 && hi - lo > 1e-15 * (1.0 + h); ++it) {
          double mid = 0.5 * (lo + hi);
          Vec2 xm = x, vm = v;
          drift(xm, vm, mid);
          (phase::signed_distance(domain, xm) > 0 ? hi : lo) = mid;
        }
        drift(x, v, lo);
        remaining -= lo;
        Vec2 n = phase::outward_normal(domain, x);
        if (dot(n, v) <= 0) {
          // grazing or numerically inside: nudge forward
          drift(x, v, std::min(remaining, 1e-14));
          remaining -= std::min(remaining, 1e-14);
          continue;
        }
        if (rule) {
          v = rule(x, n, v, flags);
        } else {
          v = reflect(v, n);
          flags |= Reflect;
        }
        if (hits > 0 && lo == 0.0 && remaining > 0) {
          // stuck at the wall; move a tiny amount inwards
          drift(x, v, std::min(remaining, 1e-14));
          remaining -= std::min(remaining, 1e-14);
        }
      }
    } else {
      drift(x, v, h);
      Vec2 w = phase::wrap(domain, x);
      if (w.x != x.x || w.y != x.y) flags |= Wrap;
      x = w;
    }
    if (!std::isfinite(x.x) || !std::isfinite(x.y) || !std::isfinite(v.x) || !std::isfinite(v.y) ||
        norm(x) > escape_radius)
      throw NumericalError("trajectory escaped the domain");
    return flags;
  }
};

// States at t = 0, dt, 2dt, ..., T (last step shortened to land on T).
inline std::vector<CharacteristicState> trace_characteristic(const Flow& flow, Vec2 x0, Vec2 v0,
                                                             double T, double dt) {
  require(T >= 0 && dt > 0, "trace needs T >= 0 and dt > 0");
  if (phase::has_boundary(flow.domain))
    require(phase::signed_distance(flow.domain, x0) <= 0, "initial point outside the domain");
  std::vector<CharacteristicState> path;
  CharacteristicState s{phase::wrap(flow.domain, x0), v0, 0.0, 0};
  path.push_back(s);
  const long n = static_cast<long>(std::ceil(T / dt - 1e-12));
  for (long k = 0; k < n; ++k) {
    double h = std::min(dt, T - s.t);
    if (k == n - 1) h = T - s.t;
    s.flags = flow.advance(s.x, s.v, h);
    s.t = (k == n - 1) ? T : s.t + h;
    path.push_back(s);
  }
  return path;
}

inline void write_trajectory_csv(const std::vector<CharacteristicState>& path,
                                 const std::string& file, const std::string& header = "") {
  std::ofstream out(file);
  if (!out) throw PreconditionError("cannot write " + file);
  out << header;
  out << "t,x,y,vx,vy,reflect,wrap,diffuse,scatter\n";
  out.precision(17);
  for (auto& s : path)
    out << s.t << ',' << s.x.x << ',' << s.x.y << ',' << s.v.x << ',' << s.v.y << ','
        << ((s.flags & Reflect) ? 1 : 0) << ',' << ((s.flags & Wrap) ? 1 : 0) << ','
        << ((s.flags & Diffuse) ? 1 : 0) << ',' << ((s.flags & Scatter) ? 1 : 0) << '\n';
}

// ------------------------------------------------------ Maxwell boundary

// Maxwell reflection on the walls of an Interval1D phase grid. Functions on Γ₊
// are vectors indexed like grid->gamma_plus, on Γ₋ like grid->gamma_minus.
struct BoundaryOperator {
  GridPtr grid;
  std::vector<double> alpha;   // per wall
  std::vector<double> speed;   // flux speed per velocity node along +x
  std::vector<double> c;       // per wall: 1 / Σ_{out} s M dv
  std::vector<int> mirror_of_minus;  // Γ₋ node -> Γ₊ node with the mirrored velocity

  std::size_t n_plus() const { return grid->gamma_plus.size(); }
  std::size_t n_minus() const { return grid->gamma_minus.size(); }

  double flux_speed(const phase::BoundaryNode& b) const {
    return std::abs(b.normal.x * speed[b.j]);
  }
  double nu(const phase::BoundaryNode& b) const {
    return flux_speed(b) * grid->vel.dv[b.j] / (b.E_wall * grid->vel.M[b.j]);
  }
  double finf(const phase::BoundaryNode& b) const { return b.E_wall * grid->vel.M[b.j]; }
};

// speeds: flux speed per node (defaults to v_j.x); must be odd under the mirror.
inline BoundaryOperator make_boundary(const GridPtr& g, std::vector<double> alpha,
                                      std::vector<double> speeds = {}) {
  require(std::holds_alternative<phase::Interval1D>(g->space.domain),
          "Maxwell boundary operator needs an Interval1D grid");
  if (alpha.size() == 1) alpha.push_back(alpha[0]);
  require(alpha.size() == 2, "one accommodation coefficient per wall");
  for (double a : alpha) require(a >= 0 && a <= 1, "accommodation coefficient must lie in [0,1]");
  BoundaryOperator R;
  R.grid = g;
  R.alpha = alpha;
  const auto& vel = g->vel;
  if (speeds.empty())
    for (auto& v : vel.v) speeds.push_back(v.x);
  require(speeds.size() == vel.size(), "one flux speed per velocity node");
  R.speed = speeds;
  R.c.assign(2, 0.0);
  for (auto& b : g->gamma_plus) R.c[b.wall] += R.flux_speed(b) * vel.M[b.j] * vel.dv[b.j];
  for (double& cw : R.c) {
    require(cw > 0, "wall has no outgoing velocities");
    cw = 1.0 / cw;
  }
  for (auto& b : g->gamma_minus) {
    int jm = vel.mirror(b.j, b.normal);
    int found = -1;
    for (std::size_t k = 0; k < g->gamma_plus.size() && jm >= 0; ++k)
      if (g->gamma_plus[k].wall == b.wall && g->gamma_plus[k].j == jm) found = static_cast<int>(k);
    if (found < 0) throw PreconditionError("velocity set is not mirror symmetric at the wall");
    require(std::abs(speeds[b.j] + speeds[jm]) <= 1e-12 * (1 + std::abs(speeds[jm])),
            "flux speeds must be odd under the mirror");
    require(std::abs(vel.M[b.j] - vel.M[jm]) <= 1e-12 * vel.M[jm],
            "equilibrium must be mirror symmetric for specular reflection");
    R.mirror_of_minus.push_back(found);
  }
  return R;
}

// ℛ as an operator Γ₊ -> Γ₊: (1-α) g + α c M ∫ g (n·v) dv.
inline VectorXd maxwell_apply_plus(const BoundaryOperator& R, const VectorXd& g) {
  require(static_cast<std::size_t>(g.size()) == R.n_plus(), "trace size mismatch");
  const auto& gp = R.grid->gamma_plus;
  const auto& vel = R.grid->vel;
  double flux[2] = {0.0, 0.0};
  for (std::size_t k = 0; k < gp.size(); ++k)
    flux[gp[k].wall] += R.flux_speed(gp[k]) * vel.dv[gp[k].j] * g(k);
  VectorXd out(g.size());
  for (std::size_t k = 0; k < gp.size(); ++k) {
    int w = gp[k].wall;
    out(k) = (1 - R.alpha[w]) * g(k) + R.alpha[w] * R.c[w] * vel.M[gp[k].j] * flux[w];
  }
  return out;
}

// Incoming trace on Γ₋ from the outgoing trace on Γ₊.
inline VectorXd maxwell_apply(const BoundaryOperator& R, const VectorXd& g) {
  VectorXd plus = maxwell_apply_plus(R, g);
  VectorXd out(R.n_minus());
  for (std::size_t k = 0; k < R.n_minus(); ++k) out(k) = plus(R.mirror_of_minus[k]);
  return out;
}

// Outgoing trace γ₊f. For a centred-cell grid the trace is E_wall M h at the boundary cell.
inline VectorXd outgoing_trace(const BoundaryOperator& R, const Field& f) {
  phase::check_grid(f, R.grid);
  const auto& gp = R.grid->gamma_plus;
  VectorXd g(gp.size());
  for (std::size_t k = 0; k < gp.size(); ++k)
    g(k) = f(gp[k].cell, gp[k].j) * gp[k].E_wall / R.grid->E[gp[k].cell];
  return g;
}

inline double nu_norm2_plus(const BoundaryOperator& R, const VectorXd& g) {
  double s = 0.0;
  for (std::size_t k = 0; k < R.n_plus(); ++k) s += g(k) * g(k) * R.nu(R.grid->gamma_plus[k]);
  return s;
}
inline double nu_norm2_minus(const BoundaryOperator& R, const VectorXd& g) {
  double s = 0.0;
  for (std::size_t k = 0; k < R.n_minus(); ++k) s += g(k) * g(k) * R.nu(R.grid->gamma_minus[k]);
  return s;
}

// Largest deviation of Σ_out R(v, v*) (n·v) dv from 1 over incoming v*.
inline double maxwell_mass_defect(const BoundaryOperator& R) {
  double worst = 0.0;
  const auto& gp = R.grid->gamma_plus;
  for (std::size_t k = 0; k < gp.size(); ++k) {
    VectorXd e = VectorXd::Zero(gp.size());
    e(static_cast<Eigen::Index>(k)) = 1.0 / (R.flux_speed(gp[k]) * R.grid->vel.dv[gp[k].j]);
    VectorXd out = maxwell_apply(R, e);
    double s = 0.0;
    for (std::size_t m = 0; m < R.n_minus(); ++m) {
      const auto& b = R.grid->gamma_minus[m];
      if (b.wall == gp[k].wall) s += out(m) * R.flux_speed(b) * R.grid->vel.dv[b.j];
    }
    worst = std::max(worst, std::abs(s - 1.0));
  }
  return worst;
}

struct CompatibilityReport {
  double max_ratio = 0.0;
  int samples = 0;
  int violations = 0;  // zero entropy production with nonzero left-hand side
};

// Empirical C_r: sup over random (g, φ) of
//   ∫ φ [f∞ ℛ(f∞⁻¹ g²) - (ℛg)²] dν / (‖φ‖_∞ ∫ [g² - (ℛg)²] dν).
inline CompatibilityReport boundary_compatibility_check(const BoundaryOperator& R, int samples,
                                                        std::uint64_t seed = 1) {
  CompatibilityReport rep;
  const auto& gp = R.grid->gamma_plus;
  const std::size_t n = gp.size();
  for (int s = 0; s < samples; ++s) {
    auto rng = stream_rng(seed, static_cast<std::uint64_t>(s));
    std::normal_distribution<double> N01;
    std::uniform_real_distribution<double> U(-1.0, 1.0);
    VectorXd g(n), phi(n), fi(n);
    double scale = std::exp(U(rng));
    for (std::size_t k = 0; k < n; ++k) {
      fi(k) = R.finf(gp[k]);
      g(k) = (s % 2 ? 1.0 + 0.3 * N01(rng) : N01(rng)) * fi(k) * scale;
      phi(k) = s % 3 == 0 ? (U(rng) < 0 ? -1.0 : 1.0) : U(rng);
    }
    VectorXd Rg = maxwell_apply_plus(R, g);
    VectorXd Rg2 = maxwell_apply_plus(R, g.cwiseProduct(g).cwiseQuotient(fi));
    double lhs = 0.0, ep = 0.0, gnorm = 0.0;
    for (std::size_t k = 0; k < n; ++k) {
      double nu = R.nu(gp[k]);
      lhs += phi(k) * (fi(k) * Rg2(k) - Rg(k) * Rg(k)) * nu;
      ep += (g(k) * g(k) - Rg(k) * Rg(k)) * nu;
      gnorm += g(k) * g(k) * nu;
    }
    double pinf = phi.cwiseAbs().maxCoeff();
    ++rep.samples;
    const double floor = 1e-13 * gnorm;
    if (ep <= floor) {
      if (std::abs(lhs) > 1e-10 * gnorm) ++rep.violations;
      continue;
    }
    rep.max_ratio = std::max(rep.max_ratio, lhs / (pinf * ep));
  }
  return rep;
}

// ------------------------------------------------------ transport operator

// df/dt = A f for free transport with the boundary rule. Explicit schemes are
// stored as per-axis factors applied in sequence (directional splitting).
struct TransportOperator {
  GridPtr grid;
  std::optional<BoundaryOperator> boundary;
  bool explicit_scheme = true;
  double max_dt = std::numeric_limits<double>::infinity();
  std::vector<SpMat> factors;  // explicit: per axis
  SpMat A;                     // full generator
  std::vector<double> xspeed;  // flux speed per velocity node
  mutable std::map<double, std::shared_ptr<Eigen::SparseLU<SpMat>>> cn_cache;
  mutable std::map<double, SpMat> cn_rhs;
};

namespace detail {

// Face values of M for a truncated line: Gaussian with the node normalization, zero at the ends.
inline std::vector<double> line_face_M(const phase::VelocitySpace& vel) {
  const int n = static_cast<int>(vel.size());
  double tot = std::exp(-0.5 * vel.v[0].x * vel.v[0].x) / vel.M[0];
  std::vector<double> Mf(n + 1, 0.0);
  for (int f = 1; f < n; ++f) {
    double vf = -vel.v_max + f * vel.spacing;
    Mf[f] = std::exp(-0.5 * vf * vf) / tot;
  }
  return Mf;
}

}  // namespace detail

inline TransportOperator build_transport(const GridPtr& g, std::vector<double> alpha = {0.0}) {
  TransportOperator op;
  op.grid = g;
  const auto& sp = g->space;
  const auto& vel = g->vel;
  const std::size_t nc = sp.size(), nv = vel.size(), n = g->size();
  const bool force = g->potential.kind != Potential::Kind::Zero;
  if (phase::is_periodic(sp.domain) && force)
    throw PreconditionError("potentials on periodic domains are not supported");
  if (force && (sp.dim() != 1 || vel.kind != phase::VelocitySpace::Kind::Line))
    throw PreconditionError("potential-driven transport needs a 1D domain with line velocities");

  // flux speeds; with a force the modified speeds make K·1 = 0 exact
  std::vector<double> Mf;
  op.xspeed.resize(nv);
  for (std::size_t j = 0; j < nv; ++j) op.xspeed[j] = vel.v[j].x;
  if (force) {
    Mf = detail::line_face_M(vel);
    for (std::size_t j = 0; j < nv; ++j)
      op.xspeed[j] = -(Mf[j + 1] - Mf[j]) / (vel.spacing * vel.M[j]);
  }
  if (std::holds_alternative<phase::Interval1D>(sp.domain))
    op.boundary = make_boundary(g, alpha, op.xspeed);

  auto Eat = [&](double x) { return std::exp(-g->potential.value({x, 0.0})); };
  Triplets tx, ty, tv;

  // x faces: upwind flux s M E_f h_up, written on f.
  const double dx = sp.dx;
  for (int iy = 0; iy < sp.ny; ++iy)
    for (int ix = 0; ix < sp.nx; ++ix) {
      bool last = ix + 1 == sp.nx;
      if (last && !phase::is_periodic(sp.domain)) continue;
      std::size_t l = sp.index(ix, iy), r = sp.index(last ? 0 : ix + 1, iy);
      double Ef = force ? Eat(sp.x0 + (ix + 1) * dx) : 1.0;
      double El = force ? g->E[l] : 1.0, Er = force ? g->E[r] : 1.0;
      for (std::size_t j = 0; j < nv; ++j) {
        double s = op.xspeed[j];
        if (s == 0) continue;
        // flux F from l to r, depends on the upwind cell's f
        std::size_t src = s > 0 ? l : r;
        double coef = std::abs(s) * Ef / (s > 0 ? El : Er) / dx;
        double sgn = s > 0 ? 1.0 : -1.0;
        Eigen::Index il = static_cast<Eigen::Index>(g->idx(l, j));
        Eigen::Index ir = static_cast<Eigen::Index>(g->idx(r, j));
        Eigen::Index is = static_cast<Eigen::Index>(g->idx(src, j));
        tx.emplace_back(il, is, -sgn * coef);
        tx.emplace_back(ir, is, sgn * coef);
      }
    }
  // y faces (Torus2D)
  if (sp.dim() == 2) {
    const double dy = sp.dy;
    for (int iy = 0; iy < sp.ny; ++iy)
      for (int ix = 0; ix < sp.nx; ++ix) {
        std::size_t l = sp.index(ix, iy), r = sp.index(ix, iy + 1 == sp.ny ? 0 : iy + 1);
        for (std::size_t j = 0; j < nv; ++j) {
          double s = vel.v[j].y;
          if (s == 0) continue;
          std::size_t src = s > 0 ? l : r;
          double coef = std::abs(s) / dy;
          double sgn = s > 0 ? 1.0 : -1.0;
          Eigen::Index il = static_cast<Eigen::Index>(g->idx(l, j));
          Eigen::Index ir = static_cast<Eigen::Index>(g->idx(r, j));
          Eigen::Index is = static_cast<Eigen::Index>(g->idx(src, j));
          ty.emplace_back(il, is, -sgn * coef);
          ty.emplace_back(ir, is, sgn * coef);
        }
      }
  }
  // walls: outflow s E_w f/E_c, inflow |s| (ℛγ₊f)
  if (op.boundary) {
    const auto& R = *op.boundary;
    for (auto& b : g->gamma_plus) {
      Eigen::Index i = static_cast<Eigen::Index>(g->idx(b.cell, b.j));
      tx.emplace_back(i, i, -R.flux_speed(b) * b.E_wall / g->E[b.cell] / dx);
    }
    // linear map outgoing f -> incoming flux
    for (std::size_t k = 0; k < R.n_plus(); ++k) {
      const auto& src = g->gamma_plus[k];
      VectorXd e = VectorXd::Zero(R.n_plus());
      e(static_cast<Eigen::Index>(k)) = src.E_wall / g->E[src.cell];
      VectorXd in = maxwell_apply(R, e);
      Eigen::Index col = static_cast<Eigen::Index>(g->idx(src.cell, src.j));
      for (std::size_t m = 0; m < R.n_minus(); ++m) {
        if (in(m) == 0) continue;
        const auto& b = g->gamma_minus[m];
        tx.emplace_back(static_cast<Eigen::Index>(g->idx(b.cell, b.j)), col,
                        R.flux_speed(b) * in(m) / dx);
      }
    }
  }
  // v faces under the force: speed a_i = -φ̂'_i, flux a E_i M_f h_up
  if (force) {
    const double dv = vel.spacing;
    for (std::size_t c = 0; c < nc; ++c) {
      double xc = sp.center(c).x;
      double El = Eat(xc - 0.5 * dx), Er = Eat(xc + 0.5 * dx);
      if (c == 0) El = Eat(sp.x0);
      if (c + 1 == nc) Er = Eat(sp.x0 + sp.nx * dx);
      double a = (Er - El) / (dx * g->E[c]);  // = -φ̂'
      if (a == 0) continue;
      for (std::size_t j = 0; j + 1 < nv; ++j) {
        std::size_t src = a > 0 ? j : j + 1;
        double coef = std::abs(a) * Mf[j + 1] / vel.M[src] / dv;
        double sgn = a > 0 ? 1.0 : -1.0;
        Eigen::Index il = static_cast<Eigen::Index>(g->idx(c, j));
        Eigen::Index ir = static_cast<Eigen::Index>(g->idx(c, j + 1));
        Eigen::Index is = static_cast<Eigen::Index>(g->idx(c, src));
        tv.emplace_back(il, is, -sgn * coef);
        tv.emplace_back(ir, is, sgn * coef);
      }
    }
  }
  const Eigen::Index N = static_cast<Eigen::Index>(n);
  SpMat Ax(N, N), Ay(N, N), Av(N, N);
  Ax.setFromTriplets(tx.begin(), tx.end());
  Ay.setFromTriplets(ty.begin(), ty.end());
  Av.setFromTriplets(tv.begin(), tv.end());
  op.A = Ax + Ay + Av;
  if (force) {
    op.explicit_scheme = false;
  } else {
    op.explicit_scheme = true;
    op.factors.push_back(Ax);
    double vmx = 0.0, vmy = 0.0;
    for (std::size_t j = 0; j < nv; ++j) {
      vmx = std::max(vmx, std::abs(op.xspeed[j]));
      vmy = std::max(vmy, std::abs(vel.v[j].y));
    }
    op.max_dt = vmx > 0 ? dx / vmx : std::numeric_limits<double>::infinity();
    if (sp.dim() == 2) {
      op.factors.push_back(Ay);
      if (vmy > 0) op.max_dt = std::min(op.max_dt, sp.dy / vmy);
    }
  }
  return op;
}

// Crank-Nicolson solve of (I - dt/2 B) y = (I + dt/2 B) x with cached factorization.
inline VectorXd cn_apply(const SpMat& B, double dt, const VectorXd& x,
                         std::map<double, std::shared_ptr<Eigen::SparseLU<SpMat>>>& cache,
                         std::map<double, SpMat>& rhs) {
  auto it = cache.find(dt);
  if (it == cache.end()) {
    SpMat I(B.rows(), B.cols());
    I.setIdentity();
    SpMat lhs = I - 0.5 * dt * B;
    auto lu = std::make_shared<Eigen::SparseLU<SpMat>>();
    lu->compute(lhs);
    if (lu->info() != Eigen::Success) throw NumericalError("Crank-Nicolson factorization failed");
    it = cache.emplace(dt, lu).first;
    rhs.emplace(dt, SpMat(I + 0.5 * dt * B));
  }
  VectorXd y = it->second->solve(rhs.at(dt) * x);
  if (!y.allFinite()) throw NumericalError("Crank-Nicolson solve produced non-finite values");
  return y;
}

inline Field transport_step(const TransportOperator& op, const Field& f, double dt) {
  phase::check_grid(f, op.grid);
  require(dt > 0, "dt must be > 0");
  Field out = f;
  if (op.explicit_scheme) {
    if (dt > op.max_dt * (1 + 1e-12))
      throw PreconditionError("dt exceeds the CFL bound of the semi-Lagrangian step");
    for (auto& F : op.factors) out.values += dt * (F * out.values);
  } else {
    out.values = cn_apply(op.A, dt, f.values, op.cn_cache, op.cn_rhs);
  }
  return out;
}

// ------------------------------------------------------------ Monte Carlo

struct ParticleState {
  Vec2 x;
  Vec2 v;
  int j = -1;  // velocity node for discrete spaces
  double t = 0.0;
  unsigned flags = 0;
  long scatters = 0;
};

// Velocity law for re-emission and BGK jumps.
struct VelocityLaw {
  enum class Kind { Gaussian, UnitCircle, Nodes };
  Kind kind = Kind::Gaussian;
  int dim = 2;
  phase::VelocitySpace nodes;  // Kind::Nodes
};

struct ParticleModel {
  Flow flow;
  VelocityLaw law;
  std::function<double(Vec2)> sigma = [](Vec2) { return 0.0; };
  double sigma_max = 0.0;
  std::function<double(Vec2)> alpha = [](Vec2) { return 0.0; };
  std::optional<collision::CollisionOperator> kernel;  // scattering on Kind::Nodes; BGK otherwise
};

inline Vec2 sample_equilibrium(const VelocityLaw& law, std::mt19937_64& rng, int* j = nullptr) {
  std::normal_distribution<double> N01;
  std::uniform_real_distribution<double> U(0.0, 1.0);
  switch (law.kind) {
    case VelocityLaw::Kind::Gaussian:
      return {N01(rng), law.dim == 2 ? N01(rng) : 0.0};
    case VelocityLaw::Kind::UnitCircle: {
      double th = 2 * pi * U(rng);
      return {std::cos(th), std::sin(th)};
    }
    case VelocityLaw::Kind::Nodes: {
      std::vector<double> w;
      for (std::size_t k = 0; k < law.nodes.size(); ++k) w.push_back(law.nodes.M[k] * law.nodes.dv[k]);
      std::discrete_distribution<int> D(w.begin(), w.end());
      int k = D(rng);
      if (j) *j = k;
      return law.nodes.v[k];
    }
  }
  return {};
}

// Velocity ∝ (|n·v|) M(v) on {n·v < 0}.
inline Vec2 sample_flux_maxwellian(const VelocityLaw& law, Vec2 n, std::mt19937_64& rng,
                                   int* j = nullptr) {
  std::normal_distribution<double> N01;
  std::uniform_real_distribution<double> U(0.0, 1.0);
  Vec2 t{-n.y, n.x};
  switch (law.kind) {
    case VelocityLaw::Kind::Gaussian: {
      double r = std::sqrt(-2.0 * std::log(1.0 - U(rng)));  // Rayleigh
      if (law.dim == 1) return (-r) * n;
      return (-r) * n + N01(rng) * t;
    }
    case VelocityLaw::Kind::UnitCircle: {
      double b = std::asin(2.0 * U(rng) - 1.0);  // density cos β / 2
      return (-std::cos(b)) * n + std::sin(b) * t;
    }
    case VelocityLaw::Kind::Nodes: {
      std::vector<double> w;
      for (std::size_t k = 0; k < law.nodes.size(); ++k) {
        double s = dot(n, law.nodes.v[k]);
        w.push_back(s < 0 ? -s * law.nodes.M[k] * law.nodes.dv[k] : 0.0);
      }
      std::discrete_distribution<int> D(w.begin(), w.end());
      int k = D(rng);
      if (j) *j = k;
      return law.nodes.v[k];
    }
  }
  return {};
}

// Advance one particle by dt: flight along characteristics, Maxwell walls, and
// collisions on a Poisson clock thinned from rate σ_max · λ_max.
inline ParticleState monte_carlo_step(const ParticleModel& m, ParticleState s, double dt,
                                      std::mt19937_64& rng,
                                      std::vector<double>* scatter_times = nullptr) {
  std::uniform_real_distribution<double> U(0.0, 1.0);
  WallRule rule = [&](Vec2 x, Vec2 n, Vec2 v, unsigned& flags) {
    double a = m.alpha(x);
    if (a > 0 && U(rng) < a) {
      flags |= Diffuse;
      return sample_flux_maxwellian(m.law, n, rng, &s.j);
    }
    flags |= Reflect;
    if (m.law.kind == VelocityLaw::Kind::Nodes && s.j >= 0) {
      int k = m.law.nodes.mirror(s.j, n);
      if (k >= 0) s.j = k;
    }
    return reflect(v, n);
  };
  double lam_max = 1.0;
  if (m.kernel) {
    lam_max = 0.0;
    for (std::size_t k = 0; k < m.kernel->size(); ++k) lam_max = std::max(lam_max, m.kernel->jump_rate(k));
  }
  const double rate = m.sigma_max * lam_max;
  s.flags = 0;
  double remaining = dt;
  while (remaining > 0) {
    double tau = rate > 0 ? -std::log(1.0 - U(rng)) / rate : std::numeric_limits<double>::infinity();
    if (tau >= remaining) {
      s.flags |= m.flow.advance(s.x, s.v, remaining, rule);
      s.t += remaining;
      break;
    }
    s.flags |= m.flow.advance(s.x, s.v, tau, rule);
    s.t += tau;
    remaining -= tau;
    double lam = m.kernel ? m.kernel->jump_rate(static_cast<std::size_t>(s.j)) : 1.0;
    if (U(rng) * rate >= m.sigma(s.x) * lam) continue;  // thinned
    if (m.kernel) {
      std::vector<double> w;
      for (std::size_t i = 0; i < m.kernel->size(); ++i)
        w.push_back(m.kernel->kernel(i, s.j) * m.kernel->vel.dv[i]);
      std::discrete_distribution<int> D(w.begin(), w.end());
      s.j = D(rng);
      s.v = m.kernel->vel.v[s.j];
    } else {
      s.v = sample_equilibrium(m.law, rng, &s.j);
    }
    s.flags |= Scatter;
    ++s.scatters;
    if (scatter_times) scatter_times->push_back(s.t);
  }
  return s;
}

}  // namespace kinlab::transport
