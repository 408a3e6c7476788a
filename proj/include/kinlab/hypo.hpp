#pragma once

// Commutator chain for degenerate thermalisation on a 1D harmonic trap, its
// numerical verification, and the generator gap as a function of how fast σ
// vanishes at x = 0.

#include <Eigen/Dense>
#include <Eigen/Sparse>
#include <Eigen/SparseLU>
#include <fstream>
#include <functional>
#include <iomanip>
#include <limits>
#include <map>
#include <string>
#include <vector>

#include "kinlab/common.hpp"
#include "kinlab/evolve.hpp"
#include "kinlab/linalg.hpp"

namespace kinlab::hypo {

using Eigen::MatrixXd;
using Eigen::VectorXd;
using SpMat = Eigen::SparseMatrix<double>;
using Triplet = Eigen::Triplet<double>;

// ------------------------------------------------------------- profiles

struct Kappa {
  std::string name;
  std::function<double(double)> f, d1, d2;

  static Kappa tanh_profile() {
    return {"tanh", [](double x) { return std::tanh(x); },
            [](double x) {
              double c = std::cosh(x);
              return 1.0 / (c * c);
            },
            [](double x) {
              double c = std::cosh(x);
              return -2.0 * std::tanh(x) / (c * c);
            }};
  }
  static Kappa atan_profile() {
    return {"atan", [](double x) { return std::atan(x); }, [](double x) { return 1.0 / (1.0 + x * x); },
            [](double x) { return -2.0 * x / ((1.0 + x * x) * (1.0 + x * x)); }};
  }
  // κ'(0) = 0: kept as a negative example
  static Kappa tanh_cubed() {
    return {"tanh3", [](double x) { return std::pow(std::tanh(x), 3); },
            [](double x) {
              double t = std::tanh(x), s = 1.0 - t * t;
              return 3.0 * t * t * s;
            },
            [](double x) {
              double t = std::tanh(x), s = 1.0 - t * t;
              return 6.0 * t * s * s - 6.0 * t * t * t * s;
            }};
  }
  static Kappa named(const std::string& n) {
    if (n == "tanh") return tanh_profile();
    if (n == "atan") return atan_profile();
    if (n == "tanh3") return tanh_cubed();
    throw SchemaError("unknown kappa profile '" + n + "'");
  }
};

// φ = ω²x²/2
struct Trap {
  double omega = 1.0;
  double d1(double x) const { return omega * omega * x; }
  double d2(double) const { return omega * omega; }
  double d3(double) const { return 0.0; }
};

// Smooth cutoff: 1 on |x| ≤ 1, 0 on |x| ≥ 2, built from e^{-1/t}.
inline double cutoff(double x) {
  auto psi = [](double t) { return t > 0 ? std::exp(-1.0 / t) : 0.0; };
  double s = std::abs(x), a = psi(2.0 - s), b = psi(s - 1.0);
  return a / (a + b);
}

inline double cutoff_d1(double x) {
  auto psi = [](double t) { return t > 0 ? std::exp(-1.0 / t) : 0.0; };
  auto dpsi = [&](double t) { return t > 0 ? psi(t) / (t * t) : 0.0; };
  double s = std::abs(x), a = psi(2.0 - s), b = psi(s - 1.0);
  double ds = -(dpsi(2.0 - s) * b + a * dpsi(s - 1.0)) / ((a + b) * (a + b));
  return x < 0 ? -ds : ds;
}

// ------------------------------------------------------------- operators

// A coefficient with its gradient in (x, v).
struct Coef {
  double val = 0.0, dx = 0.0, dv = 0.0;
};

// X f = a ∂x f + b ∂v f + c f
struct OpCoef {
  Coef a, b, c;
};
using Op = std::function<OpCoef(double, double)>;

// Test function with derivatives up to second order.
struct Jet2 {
  double f = 0, fx = 0, fv = 0, fxx = 0, fxv = 0, fvv = 0;
};
using TestFunction = std::function<Jet2(double, double)>;

// e^{-s((x-x0)² + (v-v0)²)}
inline TestFunction gaussian_test(double s = 1.0, double x0 = 0.0, double v0 = 0.0) {
  return [s, x0, v0](double X, double V) {
    double x = X - x0, v = V - v0;
    double e = std::exp(-s * (x * x + v * v));
    Jet2 j;
    j.f = e;
    j.fx = -2 * s * x * e;
    j.fv = -2 * s * v * e;
    j.fxx = (4 * s * s * x * x - 2 * s) * e;
    j.fvv = (4 * s * s * v * v - 2 * s) * e;
    j.fxv = 4 * s * s * x * v * e;
    return j;
  };
}

// p = c0 + c1 x + c2 v + c3 x² + c4 xv + c5 v²
inline TestFunction quadratic_test(std::array<double, 6> c) {
  return [c](double x, double v) {
    Jet2 j;
    j.f = c[0] + c[1] * x + c[2] * v + c[3] * x * x + c[4] * x * v + c[5] * v * v;
    j.fx = c[1] + 2 * c[3] * x + c[4] * v;
    j.fv = c[2] + c[4] * x + 2 * c[5] * v;
    j.fxx = 2 * c[3];
    j.fxv = c[4];
    j.fvv = 2 * c[5];
    return j;
  };
}

// (Xf, ∂x Xf, ∂v Xf) at a point from the coefficient jets and second derivatives of f.
inline std::array<double, 3> apply_jet(const OpCoef& k, const Jet2& j) {
  double val = k.a.val * j.fx + k.b.val * j.fv + k.c.val * j.f;
  double gx = k.a.dx * j.fx + k.a.val * j.fxx + k.b.dx * j.fv + k.b.val * j.fxv + k.c.dx * j.f + k.c.val * j.fx;
  double gv = k.a.dv * j.fx + k.a.val * j.fxv + k.b.dv * j.fv + k.b.val * j.fvv + k.c.dv * j.f + k.c.val * j.fv;
  return {val, gx, gv};
}

// [X, Y] f = X(Yf) - Y(Xf), exactly.
inline double commutator_exact(const Op& X, const Op& Y, const TestFunction& f, double x, double v) {
  OpCoef kx = X(x, v), ky = Y(x, v);
  Jet2 j = f(x, v);
  auto yf = apply_jet(ky, j), xf = apply_jet(kx, j);
  double xyf = kx.a.val * yf[1] + kx.b.val * yf[2] + kx.c.val * yf[0];
  double yxf = ky.a.val * xf[1] + ky.b.val * xf[2] + ky.c.val * xf[0];
  return xyf - yxf;
}

// ------------------------------------------------------------- system

struct CommutatorSystem {
  Kappa kappa;
  Trap trap;
  double delta = 1.0;
  double L = 8.0;

  // diagnostics on the check grid
  double w_min = 0, w_max = 0, dkt_min = 0, dkt_sup = 0, kt_sup = 0, weighted_dkt_sup = 0;
  double dkappa_min = 0, kappa_c3 = 0, kappa_far_min = 0, xdkappa_sup = 0;
  int halvings = 0;

  double k(double x) const { return kappa.f(x); }
  double k1(double x) const { return kappa.d1(x); }
  double k2(double x) const { return kappa.d2(x); }
  double gamma(double x) const { return cutoff(x / delta); }
  double dgamma(double x) const { return cutoff_d1(x / delta) / delta; }
  double w(double x) const {
    double g = gamma(x);
    return g * k1(x) + 1.0 - g;
  }
  double dw(double x) const { return dgamma(x) * k1(x) + gamma(x) * k2(x) - dgamma(x); }
  double kt(double x) const { return k(x) / w(x); }
  double dkt(double x) const {
    double ww = w(x);
    return (k1(x) * ww - k(x) * dw(x)) / (ww * ww);
  }
  // coefficient of C3 and its x-derivative
  double a3(double x) const { return trap.d2(x) * kt(x) - trap.d1(x); }
  double da3(double x) const { return trap.d3(x) * kt(x) + trap.d2(x) * dkt(x) - trap.d2(x); }

  Op A() const {
    return [this](double x, double) { return OpCoef{{}, {k(x), k1(x), 0}, {}}; };
  }
  Op B() const {
    return [this](double x, double v) { return OpCoef{{v, 0, 1}, {-trap.d1(x), -trap.d2(x), 0}, {}}; };
  }
  // κv - A
  Op A_adj() const {
    return [this](double x, double v) { return OpCoef{{}, {-k(x), -k1(x), 0}, {k(x) * v, k1(x) * v, k(x)}}; };
  }
  Op C(int j) const {
    switch (j) {
      case 0:
        return A();
      case 1:
        return [this](double x, double v) { return OpCoef{{kt(x), dkt(x), 0}, {-v, 0, -1}, {}}; };
      case 2:
        return [this](double x, double v) { return OpCoef{{-v, 0, -1}, {-trap.d1(x), -trap.d2(x), 0}, {}}; };
      case 3:
        return [this](double x, double) { return OpCoef{{a3(x), da3(x), 0}, {}, {}}; };
      default:
        return [](double, double) { return OpCoef{}; };
    }
  }
  double Z(int j, double x) const {
    switch (j) {
      case 1:
        return w(x);
      case 2:
        return 1.0 + dkt(x);
      case 3:
        return 2.0;
      default:
        return 1.0;
    }
  }
  // Remainders; only coefficient values enter the identities.
  Op R(int j) const {
    switch (j) {
      case 1:
        return [this](double x, double v) {
          return OpCoef{{}, {(1.0 - gamma(x)) * (1.0 - k1(x)) * v, 0, 0}, {}};
        };
      case 2:
        return [this](double x, double) {
          return OpCoef{{}, {dkt(x) * trap.d1(x) - kt(x) * trap.d2(x), 0, 0}, {}};
        };
      case 3:
        return [this](double x, double v) {
          double s = -2.0 * trap.d2(x);
          return OpCoef{{s * kt(x), 0, 0}, {-s * v, 0, 0}, {}};
        };
      default:
        return [this](double x, double v) {
          return OpCoef{{-v * da3(x), 0, 0}, {-a3(x) * trap.d2(x), 0, 0}, {}};
        };
    }
  }
};

// Rejects κ that break the structural assumptions, then halves δ from
// delta0 until the multiplier bands hold on a grid of [-L, L].
inline CommutatorSystem build_system(Kappa kappa, Trap trap = {}, double delta0 = 1.0, double L = 8.0,
                                     int points = 4001) {
  require(delta0 > 0 && L > 2 && points >= 101, "build_system: bad search parameters");
  require(std::abs(kappa.f(0.0)) <= 1e-12, "kappa must vanish at 0");
  if (std::abs(kappa.d1(0.0) - 1.0) > 1e-12) throw PreconditionError("kappa'(0) must be 1");
  CommutatorSystem s;
  s.kappa = kappa;
  s.trap = trap;
  s.L = L;
  const double h = 2 * L / (points - 1);
  std::vector<double> xs(points);
  for (int i = 0; i < points; ++i) xs[i] = -L + i * h;
  s.dkappa_min = std::numeric_limits<double>::infinity();
  s.kappa_far_min = std::numeric_limits<double>::infinity();
  for (int i = 0; i < points; ++i) {
    double x = xs[i];
    s.dkappa_min = std::min(s.dkappa_min, kappa.d1(x));
    s.xdkappa_sup = std::max(s.xdkappa_sup, std::abs(x * kappa.d1(x)));
    if (std::abs(x) >= 1) s.kappa_far_min = std::min(s.kappa_far_min, std::abs(kappa.f(x)));
    if (i >= 1 && i + 1 < points)
      s.kappa_c3 = std::max(s.kappa_c3, std::abs(kappa.d2(xs[i + 1]) - kappa.d2(xs[i - 1])) / (2 * h));
  }
  if (s.dkappa_min < -0.25) throw PreconditionError("kappa' must be >= -1/4");
  if (!(s.kappa_far_min > 0)) throw PreconditionError("kappa must stay away from 0 for |x| >= 1");
  if (!std::isfinite(s.kappa_c3)) throw PreconditionError("kappa must be C^3 on the grid");
  for (double delta = delta0; delta >= delta0 / 1024; delta *= 0.5, ++s.halvings) {
    s.delta = delta;
    s.w_min = s.dkt_min = s.kt_sup = s.dkt_sup = s.weighted_dkt_sup = 0;
    s.w_min = s.dkt_min = std::numeric_limits<double>::infinity();
    s.w_max = -s.w_min;
    for (double x : xs) {
      double w = s.w(x), d = s.dkt(x);
      s.w_min = std::min(s.w_min, w);
      s.w_max = std::max(s.w_max, w);
      s.dkt_min = std::min(s.dkt_min, d);
      s.dkt_sup = std::max(s.dkt_sup, std::abs(d));
      s.kt_sup = std::max(s.kt_sup, std::abs(s.kt(x)));
      s.weighted_dkt_sup = std::max(s.weighted_dkt_sup, (1 + std::abs(x)) * std::abs(d));
    }
    if (s.w_min >= 0.5 && s.w_max <= 1.5 && s.dkt_min >= -0.5) return s;
  }
  throw PreconditionError("no admissible delta in [delta0/1024, delta0]");
}

// ------------------------------------------------------------- identities

struct Term {
  std::function<double(double, double)> mult;  // empty means 1
  Op op;
};

struct Identity {
  std::string name;
  Op X, Y;
  std::vector<Term> rhs;
};

// [C_j, B] = Z_{j+1} C_{j+1} + R_{j+1}, j = 0..3, with C_4 = 0.
inline std::vector<Identity> chain_identities(const CommutatorSystem& s) {
  std::vector<Identity> out;
  for (int j = 0; j <= 3; ++j) {
    Identity id;
    id.name = "[C" + std::to_string(j) + ",B]";
    id.X = s.C(j);
    id.Y = s.B();
    if (j < 3) id.rhs.push_back({[&s, j](double x, double) { return s.Z(j + 1, x); }, s.C(j + 1)});
    id.rhs.push_back({{}, s.R(j + 1)});
    out.push_back(std::move(id));
  }
  return out;
}

inline Op multiply(std::function<double(double, double)> m) {
  return [m](double x, double v) { return OpCoef{{}, {}, {m(x, v), 0, 0}}; };
}

inline Op combine(Op a, Op b, double sb = 1.0) {
  return [a, b, sb](double x, double v) {
    OpCoef p = a(x, v), q = b(x, v);
    return OpCoef{{p.a.val + sb * q.a.val, 0, 0}, {p.b.val + sb * q.b.val, 0, 0}, {p.c.val + sb * q.c.val, 0, 0}};
  };
}

// [A, C_k] and [C_k, A*] for k = 0..3.
inline std::vector<Identity> bracket_identities(const CommutatorSystem& s) {
  std::vector<Identity> out;
  std::vector<Op> ac(4);
  ac[0] = [](double, double) { return OpCoef{}; };
  ac[1] = [&s](double x, double) { return OpCoef{{}, {-(s.k(x) + s.kt(x) * s.k1(x)), 0, 0}, {}}; };
  ac[2] = [&s](double x, double v) { return OpCoef{{-s.k(x), 0, 0}, {v * s.k1(x), 0, 0}, {}}; };
  ac[3] = [&s](double x, double) { return OpCoef{{}, {-s.a3(x) * s.k1(x), 0, 0}, {}}; };
  std::vector<std::function<double(double, double)>> extra(4);
  extra[0] = [&s](double x, double) { return s.k(x) * s.k(x); };
  extra[1] = [&s](double x, double v) { return (s.kt(x) * s.k1(x) - s.k(x)) * v; };
  extra[2] = [&s](double x, double v) { return -v * v * s.k1(x) - s.k(x) * s.trap.d1(x); };
  extra[3] = [&s](double x, double v) { return s.a3(x) * s.k1(x) * v; };
  for (int k = 0; k <= 3; ++k) {
    out.push_back({"[A,C" + std::to_string(k) + "]", s.A(), s.C(k), {{{}, ac[k]}}});
    out.push_back({"[C" + std::to_string(k) + ",A*]", s.C(k), s.A_adj(), {{{}, ac[k]}, {{}, multiply(extra[k])}}});
  }
  return out;
}

// ------------------------------------------------------------- grid route

// Node grid on [-L, L]² with 4th-order centred differences; values outside
// the grid are taken as zero.
struct NodeGrid {
  int n = 0;  // nodes per axis
  double L = 8.0, h = 0.0;
  NodeGrid(int n_, double L_) : n(n_), L(L_), h(2 * L_ / (n_ - 1)) {}
  double x(int i) const { return -L + i * h; }
  std::size_t id(int i, int j) const { return static_cast<std::size_t>(j) * n + i; }
  std::size_t size() const { return static_cast<std::size_t>(n) * n; }

  std::vector<double> sample(const std::function<double(double, double)>& f) const {
    std::vector<double> g(size());
    for (int j = 0; j < n; ++j)
      for (int i = 0; i < n; ++i) g[id(i, j)] = f(x(i), x(j));
    return g;
  }
  // axis 0 differentiates in x, 1 in v
  std::vector<double> diff(const std::vector<double>& g, int axis) const {
    std::vector<double> d(size());
    auto at = [&](int i, int j) { return (i < 0 || j < 0 || i >= n || j >= n) ? 0.0 : g[id(i, j)]; };
    for (int j = 0; j < n; ++j)
      for (int i = 0; i < n; ++i) {
        int di = axis == 0, dj = axis == 1;
        d[id(i, j)] = (-at(i + 2 * di, j + 2 * dj) + 8 * at(i + di, j + dj) - 8 * at(i - di, j - dj) +
                       at(i - 2 * di, j - 2 * dj)) /
                      (12 * h);
      }
    return d;
  }
  std::vector<double> apply(const Op& X, const std::vector<double>& g) const {
    auto gx = diff(g, 0), gv = diff(g, 1);
    std::vector<double> out(size());
    for (int j = 0; j < n; ++j)
      for (int i = 0; i < n; ++i) {
        OpCoef k = X(x(i), x(j));
        std::size_t c = id(i, j);
        out[c] = k.a.val * gx[c] + k.b.val * gv[c] + k.c.val * g[c];
      }
    return out;
  }
  double l2(const std::vector<double>& g) const {
    double s = 0;
    for (double v : g) s += v * v;
    return std::sqrt(s * h * h);
  }
};

inline double identity_residual_grid(const Identity& id, const TestFunction& f, const NodeGrid& g) {
  auto fv = g.sample([&](double x, double v) { return f(x, v).f; });
  auto xy = g.apply(id.X, g.apply(id.Y, fv));
  auto yx = g.apply(id.Y, g.apply(id.X, fv));
  std::vector<double> r(g.size());
  for (std::size_t c = 0; c < r.size(); ++c) r[c] = xy[c] - yx[c];
  for (const auto& t : id.rhs) {
    auto tf = g.apply(t.op, fv);
    for (int j = 0; j < g.n; ++j)
      for (int i = 0; i < g.n; ++i) {
        std::size_t c = g.id(i, j);
        r[c] -= (t.mult ? t.mult(g.x(i), g.x(j)) : 1.0) * tf[c];
      }
  }
  return g.l2(r) / g.l2(fv);
}

// Pointwise exact route: max |LHS - RHS| / max |f| over an m×m sample of [-R, R]².
inline double identity_residual_exact(const Identity& id, const TestFunction& f, double R = 4.0, int m = 41) {
  double num = 0, den = 0;
  for (int j = 0; j < m; ++j)
    for (int i = 0; i < m; ++i) {
      double x = -R + 2 * R * i / (m - 1), v = -R + 2 * R * j / (m - 1);
      Jet2 jt = f(x, v);
      double r = commutator_exact(id.X, id.Y, f, x, v);
      for (const auto& t : id.rhs) r -= (t.mult ? t.mult(x, v) : 1.0) * apply_jet(t.op(x, v), jt)[0];
      num = std::max(num, std::abs(r));
      den = std::max(den, std::abs(jt.f));
    }
  return num / std::max(den, 1e-300);
}

struct ResidualRow {
  std::string name;
  double exact_poly = 0, exact_gauss = 0;
  std::vector<int> nodes;
  std::vector<double> fd;
  double order = 0;  // between the two finest grids
  bool passed = false;
};

struct ResidualOptions {
  std::vector<int> nodes{257, 513, 1025};  // the cutoff transition needs h well below δ/4
  double L = 8.0;
  double exact_tol = 1e-10;
  double zero_tol = 1e-12;
  double min_order = 2.0;
};

inline ResidualRow check_identity(const Identity& id, const ResidualOptions& o = {}) {
  ResidualRow row;
  row.name = id.name;
  row.exact_poly = identity_residual_exact(id, quadratic_test({1.0, 0.3, -0.7, 0.5, -0.2, 0.8}));
  row.exact_gauss = identity_residual_exact(id, gaussian_test());
  auto f = gaussian_test();
  for (int n : o.nodes) {
    NodeGrid g(n, o.L);
    row.nodes.push_back(n);
    row.fd.push_back(identity_residual_grid(id, f, g));
  }
  std::size_t k = row.fd.size();
  bool exact_zero = row.fd.back() <= o.zero_tol;
  if (k >= 2 && !exact_zero && row.fd[k - 1] > 0) {
    double hr = (row.nodes[k - 1] - 1.0) / (row.nodes[k - 2] - 1.0);
    row.order = std::log(row.fd[k - 2] / row.fd[k - 1]) / std::log(hr);
  }
  row.passed = row.exact_poly <= o.exact_tol && row.exact_gauss <= o.exact_tol &&
               (exact_zero || row.order >= o.min_order);
  return row;
}

inline std::vector<ResidualRow> verify_commutator_chain(const CommutatorSystem& s, const ResidualOptions& o = {}) {
  std::vector<ResidualRow> out;
  for (const auto& id : chain_identities(s)) out.push_back(check_identity(id, o));
  return out;
}

inline std::vector<ResidualRow> verify_bracket_table(const CommutatorSystem& s, const ResidualOptions& o = {}) {
  std::vector<ResidualRow> out;
  for (const auto& id : bracket_identities(s)) out.push_back(check_identity(id, o));
  return out;
}

inline void write_residual_csv(const std::string& path, const std::vector<ResidualRow>& rows) {
  std::ofstream os(path);
  if (!os) throw SchemaError("cannot write " + path);
  os << "identity,exact_poly,exact_gauss,nodes,fd_residual,order,passed\n" << std::setprecision(10);
  for (const auto& r : rows)
    for (std::size_t k = 0; k < r.fd.size(); ++k)
      os << '"' << r.name << "\"," << r.exact_poly << ',' << r.exact_gauss << ',' << r.nodes[k] << ','
         << r.fd[k] << ',' << r.order << ',' << (r.passed ? 1 : 0) << '\n';
}

// ⟨Bf, g⟩ + ⟨f, Bg⟩ in L²(f∞⁻¹) with f∞ = e^{-φ - v²/2}, pointwise exact
// values and the trapezoid rule on [-L, L]²; relative to ‖f‖‖g‖.
inline double antisymmetry_defect(const CommutatorSystem& s, const TestFunction& f, const TestFunction& g,
                                  int nodes = 321, double L = 8.0) {
  const double h = 2 * L / (nodes - 1), om2 = s.trap.omega * s.trap.omega;
  Op B = s.B();
  double sym = 0, ff = 0, gg = 0;
  for (int j = 0; j < nodes; ++j)
    for (int i = 0; i < nodes; ++i) {
      double x = -L + i * h, v = -L + j * h;
      double wt = ((i == 0 || i == nodes - 1) ? 0.5 : 1.0) * ((j == 0 || j == nodes - 1) ? 0.5 : 1.0);
      double inv = std::exp(0.5 * om2 * x * x + 0.5 * v * v);
      Jet2 a = f(x, v), b = g(x, v);
      OpCoef k = B(x, v);
      double Bf = apply_jet(k, a)[0], Bg = apply_jet(k, b)[0];
      sym += wt * (Bf * b.f + a.f * Bg) * inv;
      ff += wt * a.f * a.f * inv;
      gg += wt * b.f * b.f * inv;
    }
  return std::abs(sym) / std::sqrt(ff * gg);
}

// ------------------------------------------------------------- 2D Poincaré

// ∫|h|² f∞ ≤ c ∫(x²+v²)|∇h|² f∞ for ∫h f∞ = 0, f∞ = e^{-(x²+v²)/2}, on a
// cell grid of [-L, L]² with natural boundary conditions.
struct Poincare2D {
  int n = 0;
  double L = 0, h = 0;
  SpMat S;     // Σ_faces w_f (Δh)²
  VectorXd M;  // cell masses f∞ h²
};

inline Poincare2D poincare2d_system(int n, double L = 6.0) {
  require(n >= 4 && L > 0, "poincare2d: need n >= 4 and L > 0");
  Poincare2D p;
  p.n = n;
  p.L = L;
  p.h = 2 * L / n;
  auto c = [&](int i) { return -L + (i + 0.5) * p.h; };
  auto finf = [](double x, double v) { return std::exp(-0.5 * (x * x + v * v)); };
  auto id = [n](int i, int j) { return j * n + i; };
  p.M.resize(n * n);
  std::vector<Triplet> t;
  for (int j = 0; j < n; ++j)
    for (int i = 0; i < n; ++i) {
      p.M(id(i, j)) = finf(c(i), c(j)) * p.h * p.h;
      for (int dir = 0; dir < 2; ++dir) {
        int i2 = i + (dir == 0), j2 = j + (dir == 1);
        if (i2 >= n || j2 >= n) continue;
        double fx = dir == 0 ? -L + (i + 1) * p.h : c(i), fv = dir == 1 ? -L + (j + 1) * p.h : c(j);
        double w = (fx * fx + fv * fv) * finf(fx, fv);
        int a = id(i, j), b = id(i2, j2);
        t.emplace_back(a, a, w);
        t.emplace_back(b, b, w);
        t.emplace_back(a, b, -w);
        t.emplace_back(b, a, -w);
      }
    }
  p.S.resize(n * n, n * n);
  p.S.setFromTriplets(t.begin(), t.end());
  return p;
}

inline double poincare2d_quotient(const Poincare2D& p, const VectorXd& h) {
  double mean = p.M.dot(h) / p.M.sum();
  VectorXd z = h.array() - mean;
  return z.dot(p.S * z) / z.dot(p.M.asDiagonal() * z);
}

struct PoincareCheck {
  double lambda = 0, constant = 0;  // constant = 1/lambda
  double dense_lambda = 0;          // 0 when the dense oracle was skipped
  double quotient_x = 0;            // Rayleigh quotient of h = x
  int random_violations = 0;
  double random_min_quotient = 0;
  int iterations = 0;
  VectorXd witness;
};

// Block inverse iteration on the KKT system; dense oracle for n ≤ dense_max.
inline PoincareCheck weighted_poincare_2d_check(int n, double L = 6.0, int dense_max = 32, int random = 100,
                                                std::uint64_t seed = 3) {
  Poincare2D p = poincare2d_system(n, L);
  const Eigen::Index N = p.M.size();
  std::vector<Triplet> t;
  for (int k = 0; k < p.S.outerSize(); ++k)
    for (SpMat::InnerIterator it(p.S, k); it; ++it) t.emplace_back(it.row(), it.col(), it.value());
  for (Eigen::Index r = 0; r < N; ++r) {
    t.emplace_back(r, N, p.M(r));
    t.emplace_back(N, r, p.M(r));
  }
  SpMat K(N + 1, N + 1);
  K.setFromTriplets(t.begin(), t.end());
  Eigen::SparseLU<SpMat> lu;
  lu.compute(K);
  if (lu.info() != Eigen::Success) throw NumericalError("poincare2d: KKT factorization failed");
  PoincareCheck out;
  const int block = 4;
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> N01(0.0, 1.0);
  MatrixXd X(N, block);
  for (Eigen::Index i = 0; i < X.size(); ++i) X.data()[i] = N01(rng);
  double lam = std::numeric_limits<double>::infinity();
  for (out.iterations = 1; out.iterations <= 500; ++out.iterations) {
    MatrixXd R = MatrixXd::Zero(N + 1, block);
    R.topRows(N) = p.M.asDiagonal() * X;
    MatrixXd Y = lu.solve(R).topRows(N);
    MatrixXd Ys = Y.transpose() * (p.S * Y), Ym = Y.transpose() * p.M.asDiagonal() * Y;
    Eigen::GeneralizedSelfAdjointEigenSolver<MatrixXd> es(0.5 * (Ys + Ys.transpose()), 0.5 * (Ym + Ym.transpose()));
    if (es.info() != Eigen::Success) throw NumericalError("poincare2d: Ritz step failed");
    X = Y * es.eigenvectors();
    for (int k = 0; k < block; ++k) X.col(k) /= X.col(k).norm();
    double l = es.eigenvalues()(0);
    bool done = std::abs(l - lam) <= 1e-13 * std::abs(l);
    lam = l;
    if (done) break;
  }
  if (!(lam > 0)) throw NumericalError("poincare2d: weighted form is singular on zero-mean functions");
  out.lambda = lam;
  out.constant = 1.0 / lam;
  out.witness = X.col(0);
  if (n <= dense_max) out.dense_lambda = linalg::constrained_min_eig(MatrixXd(p.S), p.M, p.M)[0].value;
  VectorXd hx(N);
  for (int j = 0; j < n; ++j)
    for (int i = 0; i < n; ++i) hx(j * n + i) = -L + (i + 0.5) * p.h;
  out.quotient_x = poincare2d_quotient(p, hx);
  out.random_min_quotient = std::numeric_limits<double>::infinity();
  std::uniform_real_distribution<double> U(-1.0, 1.0);
  for (int r = 0; r < random; ++r) {
    // low modes dominate the quotient; mix a few smooth modes with noise
    double a = U(rng), b = U(rng), c = U(rng), d = U(rng), e = 0.05 * U(rng);
    VectorXd hr(N);
    for (int j = 0; j < n; ++j)
      for (int i = 0; i < n; ++i) {
        double x = -L + (i + 0.5) * p.h, v = -L + (j + 0.5) * p.h;
        hr(j * n + i) = a * x + b * v + c * (x * x - v * v) + d * std::sin(x * v) + e * N01(rng);
      }
    double q = poincare2d_quotient(p, hr);
    out.random_min_quotient = std::min(out.random_min_quotient, q);
    if (q < lam * (1 - 1e-9)) ++out.random_violations;
  }
  return out;
}

// ------------------------------------------------------------- gap scan

struct GapScanConfig {
  std::vector<double> exponents{1, 2, 3};
  std::vector<int> resolutions{24, 32};
  bool include_constant = true;  // σ ≡ 1, recorded as p = 0
  double L = 6.0;
  double omega = 1.0;
  int threads = 1;
};

struct GapCell {
  double p = 0;
  int n = 0;
  double gap = std::numeric_limits<double>::quiet_NaN();
  std::size_t unknowns = 0;
  bool dense = false;
  std::string error;
};

struct GapScan {
  GapScanConfig config;
  std::vector<GapCell> cells;

  const GapCell* find(double p, int n) const {
    for (const auto& c : cells)
      if (c.p == p && c.n == n) return &c;
    return nullptr;
  }
  double gap(double p, int n) const {
    const GapCell* c = find(p, n);
    return c ? c->gap : std::numeric_limits<double>::quiet_NaN();
  }
  // |g_fine - g_coarse| / g_fine over the two finest resolutions
  double variation(double p) const {
    auto r = config.resolutions;
    std::sort(r.begin(), r.end());
    if (r.size() < 2) return std::numeric_limits<double>::quiet_NaN();
    double a = gap(p, r[r.size() - 2]), b = gap(p, r.back());
    return std::abs(b - a) / b;
  }
  // gap weakly decreasing in p at every resolution (σ_p decreasing in p)
  bool monotone() const {
    std::vector<double> ps = config.exponents;
    if (config.include_constant) ps.insert(ps.begin(), 0.0);
    std::sort(ps.begin(), ps.end());
    for (int n : config.resolutions)
      for (std::size_t k = 1; k < ps.size(); ++k)
        if (!(gap(ps[k], n) <= gap(ps[k - 1], n))) return false;
    return true;
  }
};

inline double scan_gap(double p, int n, const GapScanConfig& c, GapCell* cell = nullptr) {
  using namespace phase;
  auto g = make_phase_grid(SpatialGrid::make(Interval1D{-c.L, c.L}, n), VelocitySpace::line(n, c.L),
                           Potential::harmonic(c.omega));
  auto sigma = p == 0 ? DegeneracyWeight::constant(1.0) : DegeneracyWeight::power_law(p);
  auto m = evolve::make_model(g, sigma, collision::fokker_planck(g->vel), {0.0});
  auto rep = evolve::generator_spectral_gap(evolve::assemble_generator(m));
  if (cell) {
    cell->unknowns = g->size();
    cell->dense = rep.dense;
  }
  return rep.gap;
}

inline GapScan gap_vs_degeneracy(const GapScanConfig& c) {
  require(!c.exponents.empty() && !c.resolutions.empty(), "gap scan needs exponents and resolutions");
  for (double p : c.exponents) require(p > 0, "degeneracy exponents must be > 0");
  for (int n : c.resolutions) require(n >= 4, "gap scan resolutions must be >= 4");
  GapScan s;
  s.config = c;
  std::vector<double> ps = c.exponents;
  if (c.include_constant) ps.insert(ps.begin(), 0.0);
  for (double p : ps)
    for (int n : c.resolutions) {
      GapCell cell;
      cell.p = p;
      cell.n = n;
      s.cells.push_back(cell);
    }
  parallel_for(s.cells.size(), c.threads, [&](std::size_t k) {
    GapCell& cell = s.cells[k];
    try {
      cell.gap = scan_gap(cell.p, cell.n, c, &cell);
      if (!(cell.gap >= 0)) cell.error = "negative or undefined gap";
    } catch (const std::exception& e) {
      cell.error = e.what();
    }
  });
  return s;
}

inline void write_gap_csv(const std::string& path, const GapScan& s) {
  std::ofstream os(path);
  if (!os) throw SchemaError("cannot write " + path);
  os << "p,n,unknowns,gap,dense,error\n" << std::setprecision(10);
  for (const auto& c : s.cells)
    os << c.p << ',' << c.n << ',' << c.unknowns << ',' << c.gap << ',' << (c.dense ? 1 : 0) << ",\"" << c.error
       << "\"\n";
}

}  // namespace kinlab::hypo
