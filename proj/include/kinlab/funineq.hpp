#pragma once

#include <Eigen/Dense>
#include <Eigen/Sparse>
#include <Eigen/SparseCholesky>
#include <Eigen/SparseLU>
#include <algorithm>
#include <cmath>
#include <fstream>
#include <functional>
#include <map>
#include <numeric>
#include <random>
#include <string>
#include <vector>

#include "kinlab/common.hpp"
#include "kinlab/linalg.hpp"

namespace kinlab::funineq {

using Eigen::MatrixXd;
using Eigen::VectorXd;
using SpMat = Eigen::SparseMatrix<double>;
using Triplet = Eigen::Triplet<double>;

// ------------------------------------------------------------- domain

struct WPotential {
  std::function<double(Vec2)> value;
  std::function<Vec2(Vec2)> grad;
  std::function<double(Vec2)> hess_norm;

  static WPotential zero() {
    return {[](Vec2) { return 0.0; }, [](Vec2) { return Vec2{}; }, [](Vec2) { return 0.0; }};
  }
  // Φ = ax (x-cx)²/2 + ay (y-cy)²/2
  static WPotential quadratic(double ax, double ay, Vec2 c = {}) {
    return {[=](Vec2 p) { return 0.5 * ax * (p.x - c.x) * (p.x - c.x) + 0.5 * ay * (p.y - c.y) * (p.y - c.y); },
            [=](Vec2 p) { return Vec2{ax * (p.x - c.x), ay * (p.y - c.y)}; },
            [=](Vec2) { return std::max(std::abs(ax), std::abs(ay)); }};
  }
};

// Uniform cell grid on an interval (dim 1) or rectangle (dim 2). Vector
// fields live on a staggered (MAC) layout: x-faces first, index
// i + (nx+1) j, then y-faces, index nfx + i + nx j. Φ is shifted so that
// ∫ e^{-Φ} = 1 on the grid.
struct WeightedDomain {
  int dim = 2;
  int nx = 0, ny = 1;
  double x0 = 0, x1 = 1, y0 = -0.5, y1 = 0.5;
  double hx = 1, hy = 1;
  WPotential pot = WPotential::zero();
  double log_mass = 0.0;

  VectorXd cell_phi, cell_bracket;
  double regularity_ratio = 0.0;  // sup |∇²Φ| / ⌊∇Φ⌉
  double weight_variation = 1.0;  // max ⌊∇Φ⌉ / min ⌊∇Φ⌉

  int cells() const { return nx * ny; }
  int nfx() const { return (nx + 1) * ny; }
  int nfy() const { return dim == 2 ? nx * (ny + 1) : 0; }
  int faces() const { return nfx() + nfy(); }
  double cell_volume() const { return hx * hy; }
  double width() const { return x1 - x0; }
  double height() const { return y1 - y0; }
  double inradius() const { return dim == 1 ? 0.5 * width() : 0.5 * std::min(width(), height()); }

  Vec2 cell_center(int c) const { return {x0 + (c % nx + 0.5) * hx, y0 + (c / nx + 0.5) * hy}; }
  bool is_x_face(int f) const { return f < nfx(); }
  Vec2 face_point(int f) const {
    if (f < nfx()) return {x0 + (f % (nx + 1)) * hx, y0 + (f / (nx + 1) + 0.5) * hy};
    int k = f - nfx();
    return {x0 + (k % nx + 0.5) * hx, y0 + (k / nx) * hy};
  }
  bool is_boundary_face(int f) const {
    if (f < nfx()) {
      int i = f % (nx + 1);
      return i == 0 || i == nx;
    }
    int j = (f - nfx()) / nx;
    return j == 0 || j == ny;
  }
  int xface(int i, int j) const { return i + (nx + 1) * j; }
  int yface(int i, int j) const { return nfx() + i + nx * j; }

  double phi(Vec2 p) const { return pot.value(p) + log_mass; }
  double bracket(Vec2 p) const {
    Vec2 g = pot.grad(p);
    return std::sqrt(1.0 + dot(g, g));
  }
  bool inside(Vec2 p) const {
    return p.x >= x0 && p.x <= x1 && (dim == 1 || (p.y >= y0 && p.y <= y1));
  }
};

inline WeightedDomain make_domain(int dim, double x0, double x1, int nx, double y0, double y1, int ny,
                                  WPotential pot) {
  require(dim == 1 || dim == 2, "weighted domain: dim must be 1 or 2");
  require(nx >= 2 && x1 > x0, "weighted domain: bad x extent");
  WeightedDomain d;
  d.dim = dim;
  d.nx = nx;
  d.x0 = x0;
  d.x1 = x1;
  d.hx = (x1 - x0) / nx;
  if (dim == 2) {
    require(ny >= 2 && y1 > y0, "weighted domain: bad y extent");
    d.ny = ny;
    d.y0 = y0;
    d.y1 = y1;
    d.hy = (y1 - y0) / ny;
  }
  d.pot = std::move(pot);
  const int n = d.cells();
  d.cell_phi.resize(n);
  d.cell_bracket.resize(n);
  double mass = 0.0, raw_min = std::numeric_limits<double>::infinity();
  VectorXd raw(n);
  for (int c = 0; c < n; ++c) {
    raw(c) = d.pot.value(d.cell_center(c));
    raw_min = std::min(raw_min, raw(c));
  }
  for (int c = 0; c < n; ++c) mass += std::exp(-(raw(c) - raw_min)) * d.cell_volume();
  d.log_mass = std::log(mass) - raw_min;
  for (int c = 0; c < n; ++c) {
    Vec2 p = d.cell_center(c);
    d.cell_phi(c) = d.phi(p);
    d.cell_bracket(c) = d.bracket(p);
    d.regularity_ratio = std::max(d.regularity_ratio, d.pot.hess_norm(p) / d.cell_bracket(c));
  }
  d.weight_variation = d.cell_bracket.maxCoeff() / d.cell_bracket.minCoeff();
  return d;
}

inline WeightedDomain interval_domain(double a, double b, int n, WPotential pot = WPotential::zero()) {
  return make_domain(1, a, b, n, -0.5, 0.5, 1, std::move(pot));
}
inline WeightedDomain rectangle_domain(double x0, double x1, double y0, double y1, int nx, int ny,
                                       WPotential pot = WPotential::zero()) {
  return make_domain(2, x0, x1, nx, y0, y1, ny, std::move(pot));
}

// ------------------------------------------------------------- discrete operators

// Cell divergence of a face field.
inline SpMat divergence_matrix(const WeightedDomain& d) {
  std::vector<Triplet> t;
  for (int j = 0; j < d.ny; ++j)
    for (int i = 0; i < d.nx; ++i) {
      int c = i + d.nx * j;
      t.emplace_back(c, d.xface(i + 1, j), 1.0 / d.hx);
      t.emplace_back(c, d.xface(i, j), -1.0 / d.hx);
      if (d.dim == 2) {
        t.emplace_back(c, d.yface(i, j + 1), 1.0 / d.hy);
        t.emplace_back(c, d.yface(i, j), -1.0 / d.hy);
      }
    }
  SpMat D(d.cells(), d.faces());
  D.setFromTriplets(t.begin(), t.end());
  return D;
}

// Face gradient of a cell field on interior faces (boundary rows empty).
inline SpMat cell_gradient_matrix(const WeightedDomain& d) {
  std::vector<Triplet> t;
  for (int j = 0; j < d.ny; ++j)
    for (int i = 1; i < d.nx; ++i) {
      t.emplace_back(d.xface(i, j), i + d.nx * j, 1.0 / d.hx);
      t.emplace_back(d.xface(i, j), i - 1 + d.nx * j, -1.0 / d.hx);
    }
  if (d.dim == 2)
    for (int j = 1; j < d.ny; ++j)
      for (int i = 0; i < d.nx; ++i) {
        t.emplace_back(d.yface(i, j), i + d.nx * j, 1.0 / d.hy);
        t.emplace_back(d.yface(i, j), i + d.nx * (j - 1), -1.0 / d.hy);
      }
  SpMat G(d.faces(), d.cells());
  G.setFromTriplets(t.begin(), t.end());
  return G;
}

// Componentwise gradient of a face field that vanishes on ∂U. Tangential
// derivatives next to a wall use the ghost value -F, so wall samples carry
// half a dual cell.
struct FaceGradient {
  SpMat G;
  std::vector<Vec2> points;
  VectorXd volume;
};

inline FaceGradient face_gradient(const WeightedDomain& d) {
  std::vector<Triplet> t;
  FaceGradient out;
  std::vector<double> vol;
  auto add_row = [&](Vec2 p, double v) {
    out.points.push_back(p);
    vol.push_back(v);
    return static_cast<int>(out.points.size()) - 1;
  };
  const double V = d.cell_volume();
  for (int j = 0; j < d.ny; ++j)
    for (int i = 0; i < d.nx; ++i) {
      int r = add_row(d.cell_center(i + d.nx * j), V);
      if (i + 1 < d.nx) t.emplace_back(r, d.xface(i + 1, j), 1.0 / d.hx);
      if (i > 0) t.emplace_back(r, d.xface(i, j), -1.0 / d.hx);
    }
  if (d.dim == 2) {
    // ∂y of x-faces, on horizontal lines between rows (walls included)
    for (int j = 0; j <= d.ny; ++j)
      for (int i = 1; i < d.nx; ++i) {
        bool wall = (j == 0 || j == d.ny);
        int r = add_row({d.x0 + i * d.hx, d.y0 + j * d.hy}, wall ? 0.5 * V : V);
        if (j < d.ny) t.emplace_back(r, d.xface(i, j), wall ? 2.0 / d.hy : 1.0 / d.hy);
        if (j > 0) t.emplace_back(r, d.xface(i, j - 1), wall ? -2.0 / d.hy : -1.0 / d.hy);
      }
    for (int j = 0; j < d.ny; ++j)
      for (int i = 0; i < d.nx; ++i) {
        int r = add_row(d.cell_center(i + d.nx * j), V);
        if (j + 1 < d.ny) t.emplace_back(r, d.yface(i, j + 1), 1.0 / d.hy);
        if (j > 0) t.emplace_back(r, d.yface(i, j), -1.0 / d.hy);
      }
    for (int i = 0; i <= d.nx; ++i)
      for (int j = 1; j < d.ny; ++j) {
        bool wall = (i == 0 || i == d.nx);
        int r = add_row({d.x0 + i * d.hx, d.y0 + j * d.hy}, wall ? 0.5 * V : V);
        if (i < d.nx) t.emplace_back(r, d.yface(i, j), wall ? 2.0 / d.hx : 1.0 / d.hx);
        if (i > 0) t.emplace_back(r, d.yface(i - 1, j), wall ? -2.0 / d.hx : -1.0 / d.hx);
      }
  }
  out.G.resize(static_cast<Eigen::Index>(out.points.size()), d.faces());
  out.G.setFromTriplets(t.begin(), t.end());
  out.volume = Eigen::Map<VectorXd>(vol.data(), static_cast<Eigen::Index>(vol.size()));
  return out;
}

inline VectorXd face_weights(const WeightedDomain& d, const std::function<double(Vec2)>& w) {
  VectorXd out(d.faces());
  for (int f = 0; f < d.faces(); ++f) out(f) = d.is_boundary_face(f) ? 0.0 : w(d.face_point(f)) * d.cell_volume();
  return out;
}
inline VectorXd sample_weights(const FaceGradient& fg, const std::function<double(Vec2)>& w) {
  VectorXd out(fg.volume.size());
  for (Eigen::Index s = 0; s < out.size(); ++s) out(s) = w(fg.points[static_cast<std::size_t>(s)]) * fg.volume(s);
  return out;
}
inline VectorXd cell_weights(const WeightedDomain& d, const std::function<double(Vec2)>& w) {
  VectorXd out(d.cells());
  for (int c = 0; c < d.cells(); ++c) out(c) = w(d.cell_center(c)) * d.cell_volume();
  return out;
}

inline std::vector<int> interior_faces(const WeightedDomain& d) {
  std::vector<int> out;
  for (int f = 0; f < d.faces(); ++f)
    if (!d.is_boundary_face(f)) out.push_back(f);
  return out;
}

// Column selection P (faces × interior) so that F = P F_int.
inline SpMat interior_embedding(const WeightedDomain& d) {
  auto in = interior_faces(d);
  std::vector<Triplet> t;
  for (std::size_t k = 0; k < in.size(); ++k) t.emplace_back(in[k], static_cast<int>(k), 1.0);
  SpMat P(d.faces(), static_cast<Eigen::Index>(in.size()));
  P.setFromTriplets(t.begin(), t.end());
  return P;
}

// Weighted norms used throughout: ‖F‖ with ⌊∇Φ⌉²e^Φ, ‖∇F‖ with e^Φ,
// ‖g‖ with e^Φ.
inline double norm_cells(const WeightedDomain& d, const VectorXd& g, const std::function<double(Vec2)>& w) {
  return std::sqrt(g.cwiseAbs2().dot(cell_weights(d, w)));
}
inline double norm_faces(const WeightedDomain& d, const VectorXd& F, const std::function<double(Vec2)>& w) {
  return std::sqrt(F.cwiseAbs2().dot(face_weights(d, w)));
}
inline double norm_face_gradient(const WeightedDomain& d, const FaceGradient& fg, const VectorXd& F,
                                 const std::function<double(Vec2)>& w) {
  (void)d;
  VectorXd g = fg.G * F;
  return std::sqrt(g.cwiseAbs2().dot(sample_weights(fg, w)));
}

inline std::function<double(Vec2)> w_exp_phi(const WeightedDomain& d) {
  return [&d](Vec2 p) { return std::exp(d.phi(p)); };
}
inline std::function<double(Vec2)> w_exp_mphi(const WeightedDomain& d) {
  return [&d](Vec2 p) { return std::exp(-d.phi(p)); };
}
inline std::function<double(Vec2)> w_bracket2_exp_phi(const WeightedDomain& d) {
  return [&d](Vec2 p) {
    double b = d.bracket(p);
    return b * b * std::exp(d.phi(p));
  };
}

inline double total_mass(const WeightedDomain& d, const VectorXd& g) { return g.sum() * d.cell_volume(); }

inline void require_zero_mass(const WeightedDomain& d, const VectorXd& g, const char* who) {
  require(g.size() == d.cells(), std::string(who) + ": data has wrong size");
  double scale = g.cwiseAbs().sum() * d.cell_volume();
  double m = total_mass(d, g);
  if (std::abs(m) > 1e-10 * std::max(scale, 1e-300) && std::abs(m) > 1e-300)
    throw PreconditionError(std::string(who) + ": data must have zero mass (got " + std::to_string(m) + ")");
}

// ------------------------------------------------------------- L² divergence solve

struct DivergenceSolution {
  VectorXd F;                  // face field
  double residual = 0.0;       // ‖∇·F - g‖ / ‖g‖ (cell l², unweighted)
  double boundary_max = 0.0;   // max |F| on boundary faces
  double norm_F = 0.0;         // ‖F‖ with ⌊∇Φ⌉² e^Φ
  double norm_gradF = 0.0;     // ‖∇F‖ with e^Φ
  double norm_g = 0.0;         // ‖g‖ with e^Φ
  double ratio = 0.0;          // (norm_F + norm_gradF) / norm_g
  double raw_residual = 0.0;   // before the discrete projection (H¹ route only)
  double correction = 0.0;     // ‖projection‖ / ‖F‖ (H¹ route only)
  int patches = 0;
};

inline double relative_residual(const WeightedDomain& d, const VectorXd& F, const VectorXd& g) {
  VectorXd r = divergence_matrix(d) * F - g;
  double gn = g.norm();
  return gn > 0 ? r.norm() / gn : r.norm();
}

inline void fill_norms(const WeightedDomain& d, const VectorXd& g, DivergenceSolution& s, bool with_gradient) {
  s.residual = relative_residual(d, s.F, g);
  s.boundary_max = 0.0;
  for (int f = 0; f < d.faces(); ++f)
    if (d.is_boundary_face(f)) s.boundary_max = std::max(s.boundary_max, std::abs(s.F(f)));
  s.norm_F = norm_faces(d, s.F, w_bracket2_exp_phi(d));
  if (with_gradient) s.norm_gradF = norm_face_gradient(d, face_gradient(d), s.F, w_exp_phi(d));
  s.norm_g = norm_cells(d, g, w_exp_phi(d));
  s.ratio = s.norm_g > 0 ? (s.norm_F + s.norm_gradF) / s.norm_g : 0.0;
}

// Neumann problem ∇·(a ∇q) = r on cells with a > 0 on interior faces;
// returns the face field a ∇q. r must have zero sum.
inline VectorXd neumann_flux(const WeightedDomain& d, const VectorXd& a, const VectorXd& r) {
  SpMat G = cell_gradient_matrix(d);
  SpMat L = G.transpose() * a.asDiagonal() * G;  // = -∇·(a∇)
  const int n = d.cells();
  SpMat Lr = L.bottomRightCorner(n - 1, n - 1);
  Eigen::SimplicialLDLT<SpMat> ldlt(Lr);
  if (ldlt.info() != Eigen::Success) throw NumericalError("neumann solve: factorization failed");
  VectorXd q = VectorXd::Zero(n);
  q.tail(n - 1) = ldlt.solve(-r.tail(n - 1));
  if (ldlt.info() != Eigen::Success || !q.allFinite()) throw NumericalError("neumann solve failed");
  return a.cwiseProduct(G * q);
}

// F₀ = e^{-Φ̃} ∇q with Φ̃ = Φ + 2 ln⌊∇Φ⌉, ∇·F₀ = g, F₀·n = 0.
inline DivergenceSolution solve_divergence_L2(const WeightedDomain& d, const VectorXd& g) {
  require_zero_mass(d, g, "solve_divergence_L2");
  VectorXd a(d.faces());
  for (int f = 0; f < d.faces(); ++f) {
    Vec2 p = d.face_point(f);
    double b = d.bracket(p);
    a(f) = d.is_boundary_face(f) ? 0.0 : std::exp(-d.phi(p)) / (b * b);
  }
  DivergenceSolution s;
  if (g.cwiseAbs().maxCoeff() == 0.0) {
    s.F = VectorXd::Zero(d.faces());
  } else {
    // rescale so the pinned system is well balanced
    double scale = a.maxCoeff();
    s.F = scale * neumann_flux(d, a / scale, g / scale);
  }
  fill_norms(d, g, s, false);
  if (s.norm_g > 0 && !(s.residual <= 1e-8)) throw NumericalError("solve_divergence_L2: residual too large");
  return s;
}

// ------------------------------------------------------------- Bogovskiǐ kernel

// ψ(p) = 3/(πR²) (1 - |p-c|²/R²)², unit mass on B(c, R).
struct Bump {
  Vec2 c;
  double R = 1.0;
  double operator()(Vec2 p) const {
    double q = 1.0 - dot(p - c, p - c) / (R * R);
    return q > 0 ? 3.0 / (pi * R * R) * q * q : 0.0;
  }
};

// A = ∫₀^∞ ψ(x+sω) s ds and B = ∫₀^∞ ψ(x+sω) ds, exact (polynomial on the chord).
inline std::pair<double, double> bump_ray_moments(const Bump& b, Vec2 x, Vec2 w) {
  Vec2 dlt = x - b.c;
  double beta = dot(dlt, w);
  double R2 = b.R * b.R;
  double alpha = 1.0 - (dot(dlt, dlt) - beta * beta) / R2;
  if (alpha <= 0) return {0.0, 0.0};
  // t = s + β; ψ ∝ (α - t²/R²)² on |t| < R√α, and s ≥ 0 means t ≥ β
  double tmax = b.R * std::sqrt(alpha);
  double t1 = std::max(-tmax, beta), t2 = tmax;
  if (t1 >= t2) return {0.0, 0.0};
  auto prim0 = [&](double t) {
    return alpha * alpha * t - 2.0 * alpha * t * t * t / (3.0 * R2) + std::pow(t, 5) / (5.0 * R2 * R2);
  };
  auto prim1 = [&](double t) {
    return alpha * alpha * t * t / 2.0 - alpha * std::pow(t, 4) / (2.0 * R2) + std::pow(t, 6) / (6.0 * R2 * R2);
  };
  double C = 3.0 / (pi * R2);
  double B = C * (prim0(t2) - prim0(t1));
  double A = C * (prim1(t2) - prim1(t1)) - beta * B;
  return {A, B};
}

inline void gauss_legendre(int n, std::vector<double>& x, std::vector<double>& w) {
  x.assign(n, 0.0);
  w.assign(n, 0.0);
  for (int i = 0; i < n; ++i) {
    double z = std::cos(pi * (i + 0.75) / (n + 0.5)), dp = 0.0;
    for (int it = 0; it < 100; ++it) {
      double p0 = 1.0, p1 = 0.0;
      for (int k = 1; k <= n; ++k) {
        double p2 = p1;
        p1 = p0;
        p0 = ((2.0 * k - 1.0) * z * p1 - (k - 1.0) * p2) / k;
      }
      dp = n * (z * p0 - p1) / (z * z - 1.0);
      double dz = p0 / dp;
      z -= dz;
      if (std::abs(dz) < 1e-15) break;
    }
    x[i] = z;
    w[i] = 2.0 / ((1.0 - z * z) * dp * dp);
  }
}

// Angular nodes for the polar form: the sector subtended by the bump from
// x (Gauss-Legendre), or the full circle when x lies inside it.
inline void bump_angles(const Bump& b, Vec2 x, int m, std::vector<double>& th, std::vector<double>& wt) {
  Vec2 dc = b.c - x;
  double dist = norm(dc);
  if (dist <= b.R) {
    int n = 2 * m;
    th.resize(n);
    wt.assign(n, 2 * pi / n);
    for (int k = 0; k < n; ++k) th[k] = 2 * pi * (k + 0.5) / n;
    return;
  }
  double half = std::asin(b.R / dist), mid = std::atan2(dc.y, dc.x);
  std::vector<double> gx, gw;
  gauss_legendre(m, gx, gw);
  th.resize(m);
  wt.resize(m);
  for (int k = 0; k < m; ++k) {
    th[k] = mid + half * gx[k];
    wt[k] = half * gw[k];
  }
}

// Pointwise Bogovskiǐ field in polar coordinates around x:
//   F(x) = ∫ ω ∫₀^∞ g(x - ρω) (A(ω) + ρ B(ω)) dρ dω,
// which carries no singularity. g is a function supported in the disc
// patch (centre, radius); the radial integral uses Gauss-Legendre.
inline Vec2 bogovskii_point(const std::function<double(Vec2)>& g, Vec2 centre, double radius, const Bump& b,
                            Vec2 x, int angles = 64, int radial = 32) {
  std::vector<double> th, wt, rx, rw;
  bump_angles(b, x, angles, th, wt);
  gauss_legendre(radial, rx, rw);
  Vec2 F{};
  for (std::size_t k = 0; k < th.size(); ++k) {
    Vec2 w{std::cos(th[k]), std::sin(th[k])};
    auto [A, B] = bump_ray_moments(b, x, w);
    if (A == 0.0 && B == 0.0) continue;
    // exit distance of x - ρω from the patch disc
    Vec2 e = x - centre;
    double bb = dot(e, w), cc = dot(e, e) - radius * radius;
    double disc = bb * bb - cc;
    if (disc <= 0) continue;
    double rmax = bb + std::sqrt(disc);
    if (rmax <= 0) continue;
    double acc = 0.0;
    for (int q = 0; q < radial; ++q) {
      double rho = 0.5 * rmax * (rx[q] + 1.0);
      acc += 0.5 * rmax * rw[q] * g(x - rho * w) * (A + rho * B);
    }
    F = F + (wt[k] * acc) * w;
  }
  return F;
}

// ∫ g(x - ρω)(A + ρB) dρ for a cell-constant g, exact along the ray.
// Only cells in the index box [ia, ib] × [ja, jb] are visited.
inline double ray_integral(const WeightedDomain& d, const VectorXd& g, Vec2 x, Vec2 w, double A, double B, int ia,
                           int ib, int ja, int jb) {
  Vec2 dir = -w;
  double bx0 = d.x0 + ia * d.hx, bx1 = d.x0 + (ib + 1) * d.hx;
  double by0 = d.y0 + ja * d.hy, by1 = d.y0 + (jb + 1) * d.hy;
  double t0 = 0.0, t1 = std::numeric_limits<double>::infinity();
  auto slab = [&](double p, double v, double lo, double hi) {
    if (std::abs(v) < 1e-300) return p >= lo && p <= hi;
    double a = (lo - p) / v, c = (hi - p) / v;
    if (a > c) std::swap(a, c);
    t0 = std::max(t0, a);
    t1 = std::min(t1, c);
    return t0 < t1;
  };
  if (!slab(x.x, dir.x, bx0, bx1) || !slab(x.y, dir.y, by0, by1)) return 0.0;
  double tm = 0.5 * (t0 + std::min(t1, t0 + 0.5 * std::min(d.hx, d.hy)));
  Vec2 p = x + tm * dir;
  int i = std::clamp(static_cast<int>(std::floor((p.x - d.x0) / d.hx)), ia, ib);
  int j = std::clamp(static_cast<int>(std::floor((p.y - d.y0) / d.hy)), ja, jb);
  int si = dir.x > 0 ? 1 : -1, sj = dir.y > 0 ? 1 : -1;
  auto next = [&](double pos, double v, double lo, double h, int idx, int s) {
    if (std::abs(v) < 1e-300) return std::numeric_limits<double>::infinity();
    double edge = lo + (s > 0 ? idx + 1 : idx) * h;
    return (edge - pos) / v;
  };
  double tx = next(x.x, dir.x, d.x0, d.hx, i, si), ty = next(x.y, dir.y, d.y0, d.hy, j, sj);
  double dtx = std::abs(dir.x) < 1e-300 ? std::numeric_limits<double>::infinity() : d.hx / std::abs(dir.x);
  double dty = std::abs(dir.y) < 1e-300 ? std::numeric_limits<double>::infinity() : d.hy / std::abs(dir.y);
  double t = t0, acc = 0.0;
  while (t < t1) {
    double tn = std::min({tx, ty, t1});
    if (tn > t) {
      double gv = g(i + d.nx * j);
      if (gv != 0.0) acc += gv * (A * (tn - t) + 0.5 * B * (tn * tn - t * t));
    }
    t = tn;
    if (t >= t1) break;
    if (tx <= ty) {
      i += si;
      tx += dtx;
    } else {
      j += sj;
      ty += dty;
    }
    if (i < ia || i > ib || j < ja || j > jb) break;
  }
  return acc;
}

struct CellBox {
  int ia = 0, ib = -1, ja = 0, jb = -1;
  bool empty() const { return ib < ia || jb < ja; }
};

// Bogovskiǐ field of a cell-constant g with bump b, sampled as normal
// components at face midpoints. Only faces inside the bounding box of
// supp g ∪ supp ψ are touched; boundary faces of U stay exactly zero.
inline VectorXd bogovskii_local(const WeightedDomain& d, const VectorXd& g, const Bump& b, int angles = 32) {
  require(d.dim == 2, "bogovskii_local: 2D patches only (1D uses the primitive)");
  CellBox box;
  box.ia = d.nx;
  box.ja = d.ny;
  for (int c = 0; c < d.cells(); ++c)
    if (g(c) != 0.0) {
      box.ia = std::min(box.ia, c % d.nx);
      box.ib = std::max(box.ib, c % d.nx);
      box.ja = std::min(box.ja, c / d.nx);
      box.jb = std::max(box.jb, c / d.nx);
    }
  VectorXd F = VectorXd::Zero(d.faces());
  if (box.empty()) return F;
  double scale = g.cwiseAbs().sum();
  if (std::abs(g.sum()) > 1e-10 * scale) throw PreconditionError("bogovskii_local: patch data must have zero mass");
  double fx0 = std::min(d.x0 + box.ia * d.hx, b.c.x - b.R), fx1 = std::max(d.x0 + (box.ib + 1) * d.hx, b.c.x + b.R);
  double fy0 = std::min(d.y0 + box.ja * d.hy, b.c.y - b.R), fy1 = std::max(d.y0 + (box.jb + 1) * d.hy, b.c.y + b.R);
  std::vector<double> th, wt;
  for (int f = 0; f < d.faces(); ++f) {
    if (d.is_boundary_face(f)) continue;
    Vec2 x = d.face_point(f);
    if (x.x < fx0 || x.x > fx1 || x.y < fy0 || x.y > fy1) continue;
    bool xf = d.is_x_face(f);
    bump_angles(b, x, angles, th, wt);
    double acc = 0.0;
    for (std::size_t k = 0; k < th.size(); ++k) {
      Vec2 w{std::cos(th[k]), std::sin(th[k])};
      double wn = xf ? w.x : w.y;
      if (wn == 0.0) continue;
      auto [A, B] = bump_ray_moments(b, x, w);
      if (A == 0.0 && B == 0.0) continue;
      acc += wt[k] * wn * ray_integral(d, g, x, w, A, B, box.ia, box.ib, box.ja, box.jb);
    }
    F(f) = acc;
  }
  return F;
}

// 1D: F(x) = ∫_{x0}^x g, exact on faces.
inline VectorXd primitive_1d(const WeightedDomain& d, const VectorXd& g) {
  VectorXd F = VectorXd::Zero(d.faces());
  double acc = 0.0;
  for (int i = 0; i < d.nx; ++i) {
    acc += g(i) * d.hx;
    F(i + 1) = acc;
  }
  F(d.nx) = 0.0;
  return F;
}

// ------------------------------------------------------------- covering

struct Ball {
  Vec2 z;
  double r = 0.0;
  Bump star;  // inner ball for the local kernel, inside B(z, r) ∩ U
};

struct Covering {
  std::vector<Ball> balls;
  double eps = 0.0;
  int max_overlap = 0;
  double partition_defect = 0.0;  // max |Σθ - 1| over cells and faces
  double min_xi_sum = 0.0;        // min Σξ over faces and cells
  double max_grad_theta = 0.0;    // max r_k |∇θ_k| at cell centres
  double ratio_worst = 1.0;       // max over balls of max/min ⌊∇Φ⌉ inside
  double r_min = 0.0, r_max = 0.0;
  // θ_k on faces, stored per ball as (face, value)
  std::vector<std::vector<std::pair<int, double>>> theta_faces;
};

namespace detail {
// 1 on t ≤ 1/2, 0 on t ≥ 1, quintic smoothstep between.
inline double xi_profile(double t) {
  if (t <= 0.5) return 1.0;
  if (t >= 1.0) return 0.0;
  double s = 2.0 * (1.0 - t);
  return s * s * s * (10.0 - 15.0 * s + 6.0 * s * s);
}
inline double xi_slope(double t) {
  if (t <= 0.5 || t >= 1.0) return 0.0;
  double s = 2.0 * (1.0 - t);
  return -2.0 * 30.0 * s * s * (1.0 - s) * (1.0 - s);
}
inline double dist(const WeightedDomain& d, Vec2 a, Vec2 b) { return d.dim == 1 ? std::abs(a.x - b.x) : norm(a - b); }
}  // namespace detail

// Balls B(z, ε/⌊∇Φ(z)⌉) chosen greedily until every cell centre lies within
// 3/4 of some radius; ξ_k = profile(|x - z_k|/r_k), θ_k = ξ_k / Σξ.
inline Covering build_covering(const WeightedDomain& d, double eps_max = 1.0) {
  Covering cov;
  double worst = 0.0;
  for (int c = 0; c < d.cells(); ++c) {
    Vec2 p = d.cell_center(c);
    double b = d.cell_bracket(c);
    worst = std::max(worst, d.pot.hess_norm(p) / (b * b));
  }
  // |∇Φ(y) - ∇Φ(x)| ≤ 2ε sup|∇²Φ| / ⌊∇Φ(x)⌉ keeps the ratio below 4
  cov.eps = worst > 0 ? std::min(eps_max, 1.5 / worst) : eps_max;
  const double h = std::max(d.hx, d.dim == 2 ? d.hy : 0.0);
  std::vector<int> order(d.cells());
  std::iota(order.begin(), order.end(), 0);
  auto wall_dist = [&](Vec2 p) {
    double m = std::min(p.x - d.x0, d.x1 - p.x);
    if (d.dim == 2) m = std::min({m, p.y - d.y0, d.y1 - p.y});
    return m;
  };
  std::stable_sort(order.begin(), order.end(),
                   [&](int a, int b) { return wall_dist(d.cell_center(a)) < wall_dist(d.cell_center(b)); });
  std::vector<char> covered(d.cells(), 0);
  auto cells_near = [&](Vec2 z, double r, auto&& fn) {
    int i0 = std::max(0, static_cast<int>(std::floor((z.x - r - d.x0) / d.hx)));
    int i1 = std::min(d.nx - 1, static_cast<int>(std::floor((z.x + r - d.x0) / d.hx)));
    int j0 = 0, j1 = 0;
    if (d.dim == 2) {
      j0 = std::max(0, static_cast<int>(std::floor((z.y - r - d.y0) / d.hy)));
      j1 = std::min(d.ny - 1, static_cast<int>(std::floor((z.y + r - d.y0) / d.hy)));
    }
    for (int j = j0; j <= j1; ++j)
      for (int i = i0; i <= i1; ++i) fn(i + d.nx * j);
  };
  for (int c : order) {
    if (covered[c]) continue;
    Ball B;
    B.z = d.cell_center(c);
    B.r = cov.eps / d.cell_bracket(c);
    double q = B.r / 4;
    Vec2 s = B.z;
    s.x = (d.width() > 2 * q) ? std::clamp(s.x, d.x0 + q, d.x1 - q) : 0.5 * (d.x0 + d.x1);
    if (d.dim == 2) s.y = (d.height() > 2 * q) ? std::clamp(s.y, d.y0 + q, d.y1 - q) : 0.5 * (d.y0 + d.y1);
    B.star = Bump{s, q};
    cells_near(B.z, B.r, [&](int k) {
      if (detail::dist(d, d.cell_center(k), B.z) <= 0.75 * B.r) covered[k] = 1;
    });
    cov.balls.push_back(B);
  }
  cov.r_min = std::numeric_limits<double>::infinity();
  for (auto& B : cov.balls) {
    cov.r_min = std::min(cov.r_min, B.r);
    cov.r_max = std::max(cov.r_max, B.r);
  }
  if (cov.r_min < 2 * h)
    throw PreconditionError("build_covering: degenerate covering (radius " + std::to_string(cov.r_min) +
                            " below twice the grid step); refine the grid");

  // ξ sums on faces and cells
  VectorXd sum_f = VectorXd::Zero(d.faces()), sum_c = VectorXd::Zero(d.cells());
  std::vector<Vec2> gsum(d.cells(), Vec2{});
  std::vector<int> overlap(d.cells(), 0);
  auto faces_near = [&](const Ball& B, auto&& fn) {
    cells_near(B.z, B.r + h, [&](int c) {
      int i = c % d.nx, j = c / d.nx;
      fn(d.xface(i, j));
      if (i == d.nx - 1) fn(d.xface(i + 1, j));
      if (d.dim == 2) {
        fn(d.yface(i, j));
        if (j == d.ny - 1) fn(d.yface(i, j + 1));
      }
    });
  };
  for (auto& B : cov.balls) {
    cells_near(B.z, B.r, [&](int c) {
      Vec2 p = d.cell_center(c);
      double t = detail::dist(d, p, B.z) / B.r;
      double xi = detail::xi_profile(t);
      if (xi > 0) ++overlap[c];
      sum_c(c) += xi;
      if (t > 0) {
        Vec2 u = (1.0 / (t * B.r)) * (p - B.z);
        gsum[c] = gsum[c] + (detail::xi_slope(t) / B.r) * u;
      }
    });
    faces_near(B, [&](int f) { sum_f(f) += detail::xi_profile(detail::dist(d, d.face_point(f), B.z) / B.r); });
  }
  cov.min_xi_sum = std::min(sum_c.minCoeff(), sum_f.minCoeff());
  if (!(cov.min_xi_sum > 0)) throw NumericalError("build_covering: some grid point is not covered");
  cov.max_overlap = *std::max_element(overlap.begin(), overlap.end());

  VectorXd theta_sum_c = VectorXd::Zero(d.cells()), theta_sum_f = VectorXd::Zero(d.faces());
  cov.theta_faces.resize(cov.balls.size());
  for (std::size_t k = 0; k < cov.balls.size(); ++k) {
    const Ball& B = cov.balls[k];
    double lo = std::numeric_limits<double>::infinity(), hi = 0.0;
    cells_near(B.z, B.r, [&](int c) {
      Vec2 p = d.cell_center(c);
      double t = detail::dist(d, p, B.z) / B.r;
      if (t >= 1.0) return;
      lo = std::min(lo, d.cell_bracket(c));
      hi = std::max(hi, d.cell_bracket(c));
      double xi = detail::xi_profile(t);
      theta_sum_c(c) += xi / sum_c(c);
      Vec2 gx{};
      if (t > 0) gx = (detail::xi_slope(t) / (t * B.r * B.r)) * (p - B.z);
      Vec2 gt = (1.0 / sum_c(c)) * gx - (xi / (sum_c(c) * sum_c(c))) * gsum[c];
      cov.max_grad_theta = std::max(cov.max_grad_theta, B.r * norm(gt));
    });
    if (hi > 0) cov.ratio_worst = std::max(cov.ratio_worst, hi / lo);
    faces_near(B, [&](int f) {
      double xi = detail::xi_profile(detail::dist(d, d.face_point(f), B.z) / B.r);
      if (xi > 0) {
        double th = xi / sum_f(f);
        cov.theta_faces[k].emplace_back(f, th);
        theta_sum_f(f) += th;
      }
    });
  }
  cov.partition_defect = std::max((theta_sum_c.array() - 1.0).abs().maxCoeff(),
                                  (theta_sum_f.array() - 1.0).abs().maxCoeff());
  return cov;
}

// ------------------------------------------------------------- H¹ divergence solve

struct DivergenceOptions {
  int angles = 32;
  int threads = 1;
  bool force_multipatch = false;
  double eps_max = 1.0;
};

// Right inverse of the divergence with F = 0 on ∂U. One patch (the whole
// rectangle, bump at its centre) when ⌊∇Φ⌉ varies by at most 4; otherwise
// F = Σ_k F_k with F_k the local kernel applied to g_k = ∇·(θ_k F₀). The
// kernel's small discrete residual is removed by a Neumann projection,
// whose relative size is reported as `correction`.
inline DivergenceSolution solve_divergence_H1(const WeightedDomain& d, const VectorXd& g,
                                              const DivergenceOptions& opt = {}) {
  require_zero_mass(d, g, "solve_divergence_H1");
  DivergenceSolution s;
  s.F = VectorXd::Zero(d.faces());
  if (g.cwiseAbs().maxCoeff() == 0.0) {
    fill_norms(d, g, s, true);
    return s;
  }
  const bool single = !opt.force_multipatch && d.weight_variation <= 4.0;
  SpMat D = divergence_matrix(d);
  if (single) {
    s.patches = 1;
    if (d.dim == 1) {
      s.F = primitive_1d(d, g);
    } else {
      Bump b{{0.5 * (d.x0 + d.x1), 0.5 * (d.y0 + d.y1)}, 0.5 * d.inradius()};
      s.F = bogovskii_local(d, g, b, opt.angles);
    }
  } else {
    VectorXd F0 = solve_divergence_L2(d, g).F;
    Covering cov = build_covering(d, opt.eps_max);
    s.patches = static_cast<int>(cov.balls.size());
    std::vector<std::vector<std::pair<int, double>>> parts(cov.balls.size());
    parallel_for(cov.balls.size(), opt.threads, [&](std::size_t k) {
      VectorXd tf = VectorXd::Zero(d.faces());
      for (auto [f, th] : cov.theta_faces[k]) tf(f) = th * F0(f);
      VectorXd gk = D * tf;
      VectorXd Fk;
      if (d.dim == 1) {
        Fk = primitive_1d(d, gk);
      } else {
        Fk = bogovskii_local(d, gk, cov.balls[k].star, opt.angles);
      }
      for (Eigen::Index f = 0; f < Fk.size(); ++f)
        if (Fk(f) != 0.0) parts[k].emplace_back(static_cast<int>(f), Fk(f));
    });
    for (auto& part : parts)
      for (auto [f, v] : part) s.F(f) += v;
  }
  VectorXd r = g - D * s.F;
  s.raw_residual = r.norm() / g.norm();
  if (d.dim == 2 || !single) {
    r.array() -= r.mean();
    VectorXd a = VectorXd::Ones(d.faces());
    for (int f = 0; f < d.faces(); ++f)
      if (d.is_boundary_face(f)) a(f) = 0.0;
    VectorXd delta = neumann_flux(d, a, r);
    double fn = s.F.norm();
    s.F += delta;
    s.correction = fn > 0 ? delta.norm() / fn : 0.0;
  }
  for (int f = 0; f < d.faces(); ++f)
    if (d.is_boundary_face(f)) s.F(f) = 0.0;
  fill_norms(d, g, s, true);
  return s;
}

// ------------------------------------------------------------- reports

struct InequalityReport {
  std::string name;
  double constant = 0.0;
  VectorXd witness;
  int nx = 0, ny = 0;
  std::map<std::string, double> details;
};

// Random smooth data: a few cosine modes with decaying amplitudes.
inline VectorXd random_smooth_cells(const WeightedDomain& d, std::mt19937_64& rng, int modes = 4) {
  std::normal_distribution<double> N(0.0, 1.0);
  VectorXd h = VectorXd::Zero(d.cells());
  for (int a = 0; a <= modes; ++a)
    for (int b = 0; b <= (d.dim == 2 ? modes : 0); ++b) {
      double amp = N(rng) / (1.0 + a * a + b * b);
      for (int c = 0; c < d.cells(); ++c) {
        Vec2 p = d.cell_center(c);
        double sx = (p.x - d.x0) / d.width(), sy = d.dim == 2 ? (p.y - d.y0) / d.height() : 0.0;
        h(c) += amp * std::cos(pi * a * sx) * std::cos(pi * b * sy);
      }
    }
  return h;
}

// ------------------------------------------------------------- Poincaré-Lions

// Pieces of the dual norm of G = ∇h + h∇Φ in (H¹₀(e^Φ))': the Riesz
// operator on interior faces, the map h ↦ pairing vector, and cell masses.
struct PoincareLionsSystem {
  SpMat riesz;     // interior × interior
  SpMat pairing;   // interior × cells: h ↦ (∫ G·e_f e^Φ)
  VectorXd mass;   // cell weights e^Φ vol
  VectorXd volume; // cell volumes
};

inline PoincareLionsSystem poincare_lions_system(const WeightedDomain& d) {
  PoincareLionsSystem S;
  SpMat P = interior_embedding(d);
  FaceGradient fg = face_gradient(d);
  VectorXd Wg = sample_weights(fg, w_exp_phi(d));
  VectorXd Wf = face_weights(d, w_bracket2_exp_phi(d));
  SpMat Gi = fg.G * P;
  SpMat M0(P.cols(), P.cols());
  VectorXd wfi = P.transpose() * Wf;
  M0 = SpMat(wfi.asDiagonal());
  S.riesz = SpMat(Gi.transpose() * Wg.asDiagonal() * Gi) + M0;
  // G_f = e^{-Φ_f} ∂(h e^Φ) on faces, paired with e^{Φ_f} vol
  VectorXd ephi(d.cells());
  for (int c = 0; c < d.cells(); ++c) ephi(c) = std::exp(d.cell_phi(c));
  SpMat grad = cell_gradient_matrix(d);
  VectorXd pair_w(d.faces());
  for (int f = 0; f < d.faces(); ++f) pair_w(f) = d.cell_volume();  // e^{-Φ_f} e^{Φ_f} vol
  S.pairing = P.transpose() * pair_w.asDiagonal() * grad * ephi.asDiagonal();
  S.mass = cell_weights(d, w_exp_phi(d));
  S.volume = VectorXd::Constant(d.cells(), d.cell_volume());
  return S;
}

// C_PL estimated on the span of a random smooth zero-mass battery
// (Rayleigh-Ritz), then reported alongside the best single sample.
inline InequalityReport poincare_lions_constant(const WeightedDomain& d, int battery = 24, std::uint64_t seed = 1) {
  require(battery >= 1, "poincare_lions_constant: battery must be non-empty");
  auto S = poincare_lions_system(d);
  Eigen::SimplicialLDLT<SpMat> ldlt(S.riesz);
  if (ldlt.info() != Eigen::Success) throw NumericalError("poincare_lions_constant: Riesz factorization failed");
  std::mt19937_64 rng(seed);
  MatrixXd H(d.cells(), battery);
  for (int k = 0; k < battery; ++k) {
    VectorXd h = random_smooth_cells(d, rng, 3 + k % 5);
    h.array() -= h.dot(S.volume) / S.volume.sum();
    H.col(k) = h;
  }
  MatrixXd B = S.pairing * H;
  MatrixXd Y = ldlt.solve(B);
  if (ldlt.info() != Eigen::Success || !Y.allFinite()) throw NumericalError("poincare_lions_constant: solve failed");
  MatrixXd Q = B.transpose() * Y;
  MatrixXd M = H.transpose() * S.mass.asDiagonal() * H;
  Q = 0.5 * (Q + Q.transpose());
  M = 0.5 * (M + M.transpose());
  double best_single = 0.0;
  for (int k = 0; k < battery; ++k) best_single = std::max(best_single, std::sqrt(M(k, k) / Q(k, k)));
  // largest μ of M v = μ Q v
  Eigen::GeneralizedSelfAdjointEigenSolver<MatrixXd> es(M, Q);
  if (es.info() != Eigen::Success) throw NumericalError("poincare_lions_constant: Ritz eigensolve failed");
  InequalityReport rep;
  rep.name = "poincare_lions";
  rep.constant = std::sqrt(es.eigenvalues().maxCoeff());
  rep.witness = H * es.eigenvectors().col(es.eigenvectors().cols() - 1);
  rep.nx = d.nx;
  rep.ny = d.ny;
  rep.details["best_single_sample"] = best_single;
  rep.details["battery"] = battery;
  return rep;
}

// ‖∇h + h∇Φ‖ in (H¹₀(e^Φ))' and ‖h‖_{L²(e^Φ)} for one h.
inline std::pair<double, double> poincare_lions_ratio_parts(const WeightedDomain& d, const VectorXd& h) {
  auto S = poincare_lions_system(d);
  Eigen::SimplicialLDLT<SpMat> ldlt(S.riesz);
  VectorXd b = S.pairing * h;
  double dual = std::sqrt(std::max(0.0, b.dot(ldlt.solve(b))));
  return {std::sqrt(h.cwiseAbs2().dot(S.mass)), dual};
}

// Dense oracle: min of hᵀQh / hᵀMh over ∫h = 0 with Q = Bᵀ A⁻¹ B.
inline double poincare_lions_dense(const WeightedDomain& d) {
  require(d.cells() <= 3000, "poincare_lions_dense: grid too large for the dense oracle");
  auto S = poincare_lions_system(d);
  MatrixXd A = MatrixXd(S.riesz);
  MatrixXd B = MatrixXd(S.pairing);
  Eigen::LLT<MatrixXd> llt(A);
  if (llt.info() != Eigen::Success) throw NumericalError("poincare_lions_dense: Riesz matrix not SPD");
  MatrixXd Q = B.transpose() * llt.solve(B);
  auto ev = linalg::constrained_min_eig(0.5 * (Q + Q.transpose()), S.mass, S.volume, 1);
  return 1.0 / std::sqrt(ev[0].value);
}

// ------------------------------------------------------------- weighted Poincaré

// Smallest λ of ∫|∇(ρe^Φ)|² e^{-Φ} ≥ λ ∫ ρ² ⌊∇Φ⌉² e^Φ over ∫ρ = 0, in the
// variable r = ρ e^Φ (cell finite volumes, Neumann).
inline InequalityReport weighted_poincare_check(const WeightedDomain& d) {
  require(d.cells() <= 4000, "weighted_poincare_check: grid too large for the dense eigensolve");
  SpMat G = cell_gradient_matrix(d);
  VectorXd a = face_weights(d, w_exp_mphi(d));
  MatrixXd S = MatrixXd(SpMat(G.transpose() * a.asDiagonal() * G));
  VectorXd W(d.cells()), c(d.cells());
  for (int k = 0; k < d.cells(); ++k) {
    double em = std::exp(-d.cell_phi(k));
    W(k) = em * d.cell_bracket(k) * d.cell_bracket(k) * d.cell_volume();
    c(k) = em * d.cell_volume();
  }
  auto ev = linalg::constrained_min_eig(S, W, c, 1);
  InequalityReport rep;
  rep.name = "weighted_poincare";
  rep.constant = ev[0].value;
  rep.witness = ev[0].vector;
  for (int k = 0; k < d.cells(); ++k) rep.witness(k) *= std::exp(-d.cell_phi(k));
  rep.nx = d.nx;
  rep.ny = d.ny;
  // hypothesis n·∇Φ ≥ 0 on ∂U, sampled on a fine boundary grid
  double worst = std::numeric_limits<double>::infinity();
  int m = 4 * std::max(d.nx, d.ny);
  for (int k = 0; k <= m; ++k) {
    double s = static_cast<double>(k) / m;
    if (d.dim == 1) {
      worst = std::min({worst, -d.pot.grad({d.x0, 0}).x, d.pot.grad({d.x1, 0}).x});
      break;
    }
    double x = d.x0 + s * d.width(), y = d.y0 + s * d.height();
    worst = std::min({worst, -d.pot.grad({d.x0, y}).x, d.pot.grad({d.x1, y}).x, -d.pot.grad({x, d.y0}).y,
                      d.pot.grad({x, d.y1}).y});
  }
  rep.details["boundary_min_normal_grad"] = worst;
  rep.details["hypothesis_ok"] = worst >= -1e-12 ? 1.0 : 0.0;
  return rep;
}

// ------------------------------------------------------------- Korn

enum class KornConstraint { Averages, Boundary };

// Bilinear (Q1) nodal elements for v = u e^Φ on a rectangle. Forms:
// full ∫|∇v|² e^{-Φ}, sym ∫|sym ∇v|² e^{-Φ}. Dofs: 2 per node, (vx, vy).
struct KornSystem {
  SpMat full, sym;
  MatrixXd constraints;  // dofs × m, admissible set {Cᵀ v = 0}
  int nodes_x = 0, nodes_y = 0;
};

inline KornSystem korn_system(const WeightedDomain& d, KornConstraint mode) {
  require(d.dim == 2, "korn_system: 2D only");
  KornSystem K;
  K.nodes_x = d.nx + 1;
  K.nodes_y = d.ny + 1;
  const int nn = K.nodes_x * K.nodes_y, nd = 2 * nn;
  auto node = [&](int i, int j) { return i + K.nodes_x * j; };
  std::vector<Triplet> tf, ts;
  VectorXd rot = VectorXd::Zero(nd), cx = VectorXd::Zero(nd), cy = VectorXd::Zero(nd);
  const double g = 1.0 / std::sqrt(3.0);
  const double gp[2] = {0.5 * (1 - g), 0.5 * (1 + g)};
  for (int j = 0; j < d.ny; ++j)
    for (int i = 0; i < d.nx; ++i) {
      int nid[4] = {node(i, j), node(i + 1, j), node(i, j + 1), node(i + 1, j + 1)};
      Eigen::Matrix<double, 8, 8> Ef = Eigen::Matrix<double, 8, 8>::Zero(), Es = Ef;
      for (double sx : gp)
        for (double sy : gp) {
          Vec2 p{d.x0 + (i + sx) * d.hx, d.y0 + (j + sy) * d.hy};
          double w = std::exp(-d.phi(p)) * 0.25 * d.hx * d.hy;
          double N[4] = {(1 - sx) * (1 - sy), sx * (1 - sy), (1 - sx) * sy, sx * sy};
          double dx[4] = {-(1 - sy) / d.hx, (1 - sy) / d.hx, -sy / d.hx, sy / d.hx};
          double dy[4] = {-(1 - sx) / d.hy, -sx / d.hy, (1 - sx) / d.hy, sx / d.hy};
          // local dof 2a + comp
          for (int a = 0; a < 4; ++a) {
            rot(2 * nid[a] + 1) += w * dx[a];
            rot(2 * nid[a]) -= w * dy[a];
            cx(2 * nid[a]) += w * N[a];
            cy(2 * nid[a] + 1) += w * N[a];
            for (int b = 0; b < 4; ++b) {
              double gg = dx[a] * dx[b] + dy[a] * dy[b];
              Ef(2 * a, 2 * b) += w * gg;
              Ef(2 * a + 1, 2 * b + 1) += w * gg;
              // ε11² + ε22² + 2 ε12², ε12 = (∂y vx + ∂x vy)/2
              Es(2 * a, 2 * b) += w * (dx[a] * dx[b] + 0.5 * dy[a] * dy[b]);
              Es(2 * a + 1, 2 * b + 1) += w * (dy[a] * dy[b] + 0.5 * dx[a] * dx[b]);
              Es(2 * a, 2 * b + 1) += w * 0.5 * dy[a] * dx[b];
              Es(2 * a + 1, 2 * b) += w * 0.5 * dx[a] * dy[b];
            }
          }
        }
      for (int a = 0; a < 8; ++a)
        for (int b = 0; b < 8; ++b) {
          int ra = 2 * nid[a / 2] + a % 2, rb = 2 * nid[b / 2] + b % 2;
          tf.emplace_back(ra, rb, Ef(a, b));
          ts.emplace_back(ra, rb, Es(a, b));
        }
    }
  K.full.resize(nd, nd);
  K.sym.resize(nd, nd);
  K.full.setFromTriplets(tf.begin(), tf.end());
  K.sym.setFromTriplets(ts.begin(), ts.end());
  if (mode == KornConstraint::Averages) {
    K.constraints.resize(nd, 3);
    K.constraints << rot, cx, cy;
  } else {
    std::vector<int> fixed;
    for (int j = 0; j < K.nodes_y; ++j)
      for (int i = 0; i < K.nodes_x; ++i) {
        if (i == 0 || i == d.nx) fixed.push_back(2 * node(i, j));
        if (j == 0 || j == d.ny) fixed.push_back(2 * node(i, j) + 1);
      }
    K.constraints = MatrixXd::Zero(nd, static_cast<Eigen::Index>(fixed.size()));
    for (std::size_t k = 0; k < fixed.size(); ++k) K.constraints(fixed[k], static_cast<Eigen::Index>(k)) = 1.0;
  }
  return K;
}

// Compatibility of the non-penetration boundary with rotations and drifts:
// smallest singular value of the functionals χ ↦ (∫χ n·e₁, ∫χ n·e₂,
// ∫χ n·E¹²(z-p)) on the polynomial basis {1, x, y, xy, x², y²}. Positive
// means χ^i, χ^{ij} with the required moments exist.
inline double korn_boundary_compatibility(const WeightedDomain& d) {
  Vec2 p{};
  for (int c = 0; c < d.cells(); ++c) p = p + (std::exp(-d.cell_phi(c)) * d.cell_volume()) * d.cell_center(c);
  auto basis = [&](Vec2 z, int k) {
    double x = (z.x - p.x) / d.width(), y = (z.y - p.y) / d.height();
    switch (k) {
      case 0: return 1.0;
      case 1: return x;
      case 2: return y;
      case 3: return x * y;
      case 4: return x * x;
      default: return y * y;
    }
  };
  MatrixXd L = MatrixXd::Zero(3, 6);
  const int m = 400;
  auto edge = [&](Vec2 a, Vec2 b, Vec2 n) {
    double len = norm(b - a) / m;
    for (int s = 0; s < m; ++s) {
      Vec2 z = a + ((s + 0.5) / m) * (b - a);
      double rotn = n.x * (z.y - p.y) - n.y * (z.x - p.x);
      for (int k = 0; k < 6; ++k) {
        double chi = basis(z, k) * len;
        L(0, k) += chi * n.x;
        L(1, k) += chi * n.y;
        L(2, k) += chi * rotn;
      }
    }
  };
  edge({d.x0, d.y0}, {d.x1, d.y0}, {0, -1});
  edge({d.x1, d.y0}, {d.x1, d.y1}, {1, 0});
  edge({d.x0, d.y1}, {d.x1, d.y1}, {0, 1});
  edge({d.x0, d.y0}, {d.x0, d.y1}, {-1, 0});
  Eigen::JacobiSVD<MatrixXd> svd(L);
  return svd.singularValues().minCoeff();
}

namespace detail {
inline MatrixXd null_basis(const MatrixXd& C) {
  Eigen::ColPivHouseholderQR<MatrixXd> qr(C);
  Eigen::Index r = qr.rank();
  MatrixXd Q = qr.householderQ();
  return Q.rightCols(C.rows() - r);
}
}  // namespace detail

// Dense oracle: λ_min of sym v = λ full v on {Cᵀv = 0}; C_K = λ^{-1/2}.
inline double korn_dense(const WeightedDomain& d, KornConstraint mode) {
  auto K = korn_system(d, mode);
  require(K.full.rows() <= 2500, "korn_dense: grid too large for the dense oracle");
  MatrixXd Z = detail::null_basis(K.constraints);
  MatrixXd Ks = Z.transpose() * MatrixXd(K.sym) * Z, Kf = Z.transpose() * MatrixXd(K.full) * Z;
  Eigen::GeneralizedSelfAdjointEigenSolver<MatrixXd> es(0.5 * (Ks + Ks.transpose()), 0.5 * (Kf + Kf.transpose()));
  if (es.info() != Eigen::Success) throw NumericalError("korn_dense: eigensolve failed");
  return 1.0 / std::sqrt(es.eigenvalues()(0));
}

// Sparse estimator: block inverse iteration with a KKT factorization and
// Rayleigh-Ritz on the iterates.
inline InequalityReport korn_constant(const WeightedDomain& d, KornConstraint mode, double c_pl = 0.0,
                                      int block = 6, int iterations = 200) {
  InequalityReport rep;
  rep.name = mode == KornConstraint::Averages ? "korn_averages" : "korn_boundary";
  rep.nx = d.nx;
  rep.ny = d.ny;
  if (d.dim == 1) {
    rep.constant = 1.0;  // the symmetric gradient is the gradient
    return rep;
  }
  auto K = korn_system(d, mode);
  const Eigen::Index nd = K.full.rows(), m = K.constraints.cols();
  if (m >= nd) throw PreconditionError("korn_constant: constraint subspace is empty");
  std::vector<Triplet> t;
  for (int k = 0; k < K.sym.outerSize(); ++k)
    for (SpMat::InnerIterator it(K.sym, k); it; ++it) t.emplace_back(it.row(), it.col(), it.value());
  for (Eigen::Index c = 0; c < m; ++c)
    for (Eigen::Index r = 0; r < nd; ++r)
      if (K.constraints(r, c) != 0.0) {
        t.emplace_back(r, nd + c, K.constraints(r, c));
        t.emplace_back(nd + c, r, K.constraints(r, c));
      }
  SpMat KKT(nd + m, nd + m);
  KKT.setFromTriplets(t.begin(), t.end());
  Eigen::SparseLU<SpMat> lu;
  lu.compute(KKT);
  if (lu.info() != Eigen::Success) throw NumericalError("korn_constant: KKT factorization failed");
  std::mt19937_64 rng(7);
  std::normal_distribution<double> N(0.0, 1.0);
  MatrixXd X(nd, block);
  for (Eigen::Index i = 0; i < X.size(); ++i) X.data()[i] = N(rng);
  double lam = std::numeric_limits<double>::infinity();
  VectorXd best;
  int it = 0;
  for (; it < iterations; ++it) {
    MatrixXd R = MatrixXd::Zero(nd + m, block);
    R.topRows(nd) = K.full * X;
    MatrixXd Y = lu.solve(R).topRows(nd);
    MatrixXd Ys = Y.transpose() * (K.sym * Y), Yf = Y.transpose() * (K.full * Y);
    Eigen::GeneralizedSelfAdjointEigenSolver<MatrixXd> es(0.5 * (Ys + Ys.transpose()), 0.5 * (Yf + Yf.transpose()));
    if (es.info() != Eigen::Success) throw NumericalError("korn_constant: Ritz step failed");
    X = Y * es.eigenvectors();
    for (int k = 0; k < block; ++k) X.col(k) /= X.col(k).norm();
    double l = es.eigenvalues()(0);
    best = X.col(0);
    bool done = std::abs(l - lam) <= 1e-12 * std::abs(l);
    lam = l;
    if (done) break;
  }
  if (!(lam > 0)) throw NumericalError("korn_constant: symmetric form is singular on the constraint set");
  rep.constant = 1.0 / std::sqrt(lam);
  rep.witness = best;
  rep.details["iterations"] = it + 1;
  rep.details["lambda_min"] = lam;
  if (mode == KornConstraint::Boundary) rep.details["boundary_compatibility"] = korn_boundary_compatibility(d);
  if (c_pl > 0) rep.details["chain_bound"] = std::sqrt(1.0 + 4.0 * d.dim * c_pl * c_pl);
  return rep;
}

// ------------------------------------------------------------- Stokes

struct StokesSolution {
  VectorXd u;  // face field
  VectorXd p;  // cell field
  double div_max = 0.0, boundary_max = 0.0, p_mean = 0.0, s_mean = 0.0;
  double term_u = 0.0, term_grad = 0.0, term_p = 0.0, norm_s = 0.0;
  double C_S = 0.0;
};

// -∇·(∇+∇Φ)u + (∇+∇Φ)p = s, ∇·u = 0, u = 0 on ∂U, ∫p = 0, on the MAC
// grid. Weak form tested with w e^Φ, so the velocity block is
// Σ_j ∫|∇(u_j e^Φ)|² e^{-Φ} and the pressure block is -∫ p e^Φ ∇·w.
inline StokesSolution stokes_solve(const WeightedDomain& d, const VectorXd& s) {
  require(d.dim == 2, "stokes_solve: 2D rectangle only");
  require(s.size() == d.faces(), "stokes_solve: forcing must be a face field");
  SpMat P = interior_embedding(d);
  const Eigen::Index ni = P.cols(), nc = d.cells();
  FaceGradient fg = face_gradient(d);
  VectorXd E(d.faces());
  for (int f = 0; f < d.faces(); ++f) E(f) = std::exp(d.phi(d.face_point(f)));
  SpMat GE = fg.G * E.asDiagonal() * P;
  VectorXd Wg = sample_weights(fg, w_exp_mphi(d));
  SpMat A = GE.transpose() * Wg.asDiagonal() * GE;
  VectorXd ce(nc);
  for (int c = 0; c < nc; ++c) ce(c) = std::exp(d.cell_phi(c)) * d.cell_volume();
  SpMat Bm = -(ce.asDiagonal() * divergence_matrix(d) * P);
  std::vector<Triplet> t;
  for (int k = 0; k < A.outerSize(); ++k)
    for (SpMat::InnerIterator it(A, k); it; ++it) t.emplace_back(it.row(), it.col(), it.value());
  for (int k = 0; k < Bm.outerSize(); ++k)
    for (SpMat::InnerIterator it(Bm, k); it; ++it) {
      t.emplace_back(ni + it.row(), it.col(), it.value());
      t.emplace_back(it.col(), ni + it.row(), it.value());
    }
  for (Eigen::Index c = 0; c < nc; ++c) {
    t.emplace_back(ni + c, ni + nc, d.cell_volume());
    t.emplace_back(ni + nc, ni + c, d.cell_volume());
  }
  const Eigen::Index N = ni + nc + 1;
  SpMat KKT(N, N);
  KKT.setFromTriplets(t.begin(), t.end());
  VectorXd rhs = VectorXd::Zero(N);
  VectorXd sw = s.cwiseProduct(E) * d.cell_volume();
  rhs.head(ni) = P.transpose() * sw;
  Eigen::SparseLU<SpMat> lu;
  lu.compute(KKT);
  if (lu.info() != Eigen::Success) throw NumericalError("stokes_solve: saddle factorization failed");
  VectorXd x = lu.solve(rhs);
  if (lu.info() != Eigen::Success || !x.allFinite()) throw NumericalError("stokes_solve: saddle solve failed");
  StokesSolution out;
  out.u = P * x.head(ni);
  out.p = x.segment(ni, nc);
  VectorXd div = divergence_matrix(d) * out.u;
  double scale = std::max(1e-300, out.u.cwiseAbs().maxCoeff() / std::min(d.hx, d.hy));
  out.div_max = div.cwiseAbs().maxCoeff() / scale;
  for (int f = 0; f < d.faces(); ++f)
    if (d.is_boundary_face(f)) out.boundary_max = std::max(out.boundary_max, std::abs(out.u(f)));
  out.p_mean = out.p.sum() * d.cell_volume();
  double sx = 0, sy = 0;
  for (int f = 0; f < d.faces(); ++f) (d.is_x_face(f) ? sx : sy) += s(f) * d.cell_volume();
  out.s_mean = std::hypot(sx, sy);
  // three terms of the a priori bound
  double ux = 0, uy = 0;
  for (int f = 0; f < d.faces(); ++f) (d.is_x_face(f) ? ux : uy) += out.u(f) * d.cell_volume();
  VectorXd ured = out.u;
  for (int f = 0; f < d.faces(); ++f)
    if (!d.is_boundary_face(f)) ured(f) -= (d.is_x_face(f) ? ux : uy) * std::exp(-d.phi(d.face_point(f)));
  out.term_u = norm_faces(d, ured, w_bracket2_exp_phi(d));
  out.term_grad = norm_face_gradient(d, fg, out.u.cwiseProduct(E), w_exp_mphi(d));
  out.term_p = norm_cells(d, out.p, w_exp_phi(d));
  out.norm_s = norm_faces(d, s, w_exp_phi(d));
  out.C_S = out.norm_s > 0 ? (out.term_u + out.term_grad + out.term_p) / out.norm_s : 0.0;
  return out;
}

// ------------------------------------------------------------- export

inline void write_face_field_csv(const WeightedDomain& d, const VectorXd& F, const std::string& path,
                                 const std::string& header = "") {
  std::ofstream o(path);
  if (!o) throw SchemaError("cannot write " + path);
  o << header << "x,y,component,value\n";
  o.precision(17);
  for (int f = 0; f < d.faces(); ++f) {
    Vec2 p = d.face_point(f);
    o << p.x << ',' << p.y << ',' << (d.is_x_face(f) ? 'x' : 'y') << ',' << F(f) << '\n';
  }
}

inline void write_cell_field_csv(const WeightedDomain& d, const VectorXd& g, const std::string& path,
                                 const std::string& header = "") {
  std::ofstream o(path);
  if (!o) throw SchemaError("cannot write " + path);
  o << header << "x,y,value\n";
  o.precision(17);
  for (int c = 0; c < d.cells(); ++c) {
    Vec2 p = d.cell_center(c);
    o << p.x << ',' << p.y << ',' << g(c) << '\n';
  }
}

}  // namespace kinlab::funineq
