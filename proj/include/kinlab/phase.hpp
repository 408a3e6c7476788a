#pragma once

#include <Eigen/Dense>
#include <algorithm>
#include <atomic>
#include <cmath>
#include <fstream>
#include <functional>
#include <limits>
#include <memory>
#include <optional>
#include <queue>
#include <sstream>
#include <string>
#include <variant>
#include <vector>

#include "kinlab/common.hpp"
#include "kinlab/linalg.hpp"

namespace kinlab::phase {

// ---------------------------------------------------------------- domains

struct Torus1D {
  double length = 1.0;
};
struct Interval1D {
  double a = 0.0;
  double b = 1.0;
};
struct Torus2D {
  double lx = 1.0;
  double ly = 1.0;
};
struct Disc2D {
  double radius = 1.0;
};

using SpatialDomain = std::variant<Torus1D, Interval1D, Torus2D, Disc2D>;

inline int dimension(const SpatialDomain& d) {
  return (std::holds_alternative<Torus1D>(d) || std::holds_alternative<Interval1D>(d)) ? 1 : 2;
}

inline bool has_boundary(const SpatialDomain& d) {
  return std::holds_alternative<Interval1D>(d) || std::holds_alternative<Disc2D>(d);
}

inline bool is_periodic(const SpatialDomain& d) { return !has_boundary(d); }

inline void validate(const SpatialDomain& d) {
  std::visit(
      [](const auto& s) {
        using T = std::decay_t<decltype(s)>;
        if constexpr (std::is_same_v<T, Torus1D>) require(s.length > 0, "torus length must be > 0");
        if constexpr (std::is_same_v<T, Interval1D>) require(s.b > s.a, "interval needs b > a");
        if constexpr (std::is_same_v<T, Torus2D>)
          require(s.lx > 0 && s.ly > 0, "torus lengths must be > 0");
        if constexpr (std::is_same_v<T, Disc2D>) require(s.radius > 0, "disc radius must be > 0");
      },
      d);
}

// Signed distance to the boundary (negative inside). Tori return -inf.
inline double signed_distance(const SpatialDomain& d, Vec2 x) {
  if (auto* iv = std::get_if<Interval1D>(&d)) return std::max(iv->a - x.x, x.x - iv->b);
  if (auto* dc = std::get_if<Disc2D>(&d)) return norm(x) - dc->radius;
  return -std::numeric_limits<double>::infinity();
}

// Outward unit normal at a boundary point.
inline Vec2 outward_normal(const SpatialDomain& d, Vec2 x) {
  if (auto* iv = std::get_if<Interval1D>(&d)) {
    return (std::abs(x.x - iv->a) < std::abs(x.x - iv->b)) ? Vec2{-1.0, 0.0} : Vec2{1.0, 0.0};
  }
  if (std::holds_alternative<Disc2D>(d)) {
    double r = norm(x);
    require(r > 0, "normal undefined at disc centre");
    return (1.0 / r) * x;
  }
  throw PreconditionError("periodic domain has no boundary normal");
}

// Wrap into the fundamental cell of a torus; identity otherwise.
inline Vec2 wrap(const SpatialDomain& d, Vec2 x) {
  auto w = [](double s, double L) {
    double r = std::fmod(s, L);
    if (r < 0) r += L;
    if (r >= L) r -= L;
    return r;
  };
  if (auto* t = std::get_if<Torus1D>(&d)) return {w(x.x, t->length), 0.0};
  if (auto* t = std::get_if<Torus2D>(&d)) return {w(x.x, t->lx), w(x.y, t->ly)};
  return x;
}

// --------------------------------------------------------- velocity space

struct VelocitySpace {
  enum class Kind { Discrete, Circle, Line, Plane };
  Kind kind = Kind::Discrete;
  int dim = 1;
  std::vector<Vec2> v;
  std::vector<double> dv;  // quadrature weight of each node
  std::vector<double> M;   // equilibrium density value at each node
  double v_max = 0.0;
  double tail_mass = 0.0;  // Gaussian mass lost to truncation
  int n_axis = 0;
  double spacing = 0.0;  // Line/Plane node spacing

  std::size_t size() const { return v.size(); }

  double integrate(const Eigen::VectorXd& g) const {
    double s = 0.0;
    for (std::size_t j = 0; j < size(); ++j) s += g(j) * dv[j];
    return s;
  }

  // Index of v_j - 2(n·v_j)n, or -1 when the mirror image is not a node.
  int mirror(int j, Vec2 n) const {
    Vec2 r = reflect(v[j], n);
    double scale = std::max(1.0, norm(v[j]));
    for (std::size_t k = 0; k < size(); ++k)
      if (norm(v[k] - r) <= 1e-9 * scale) return static_cast<int>(k);
    return -1;
  }

  bool is_even() const {
    for (std::size_t j = 0; j < size(); ++j) {
      Vec2 r = -v[j];
      bool found = false;
      for (std::size_t k = 0; k < size() && !found; ++k)
        found = norm(v[k] - r) <= 1e-9 * std::max(1.0, norm(r));
      if (!found) return false;
    }
    return true;
  }

  bool spans() const {
    if (dim == 1) {
      for (auto& p : v)
        if (std::abs(p.x) > 0) return true;
      return false;
    }
    for (std::size_t a = 0; a < size(); ++a)
      for (std::size_t b = a + 1; b < size(); ++b)
        if (std::abs(v[a].x * v[b].y - v[a].y * v[b].x) > 1e-12) return true;
    return false;
  }

  static VelocitySpace discrete(std::vector<Vec2> points, std::vector<double> weights, int dim) {
    require(dim == 1 || dim == 2, "discrete velocity dimension must be 1 or 2");
    require(!points.empty() && points.size() == weights.size(),
            "discrete velocity set needs one weight per point");
    VelocitySpace s;
    s.kind = Kind::Discrete;
    s.dim = dim;
    s.v = std::move(points);
    if (dim == 1)
      for (auto& p : s.v) p.y = 0.0;
    double tot = 0.0;
    for (double w : weights) {
      require(w > 0 && std::isfinite(w), "discrete equilibrium weights must be positive");
      tot += w;
    }
    for (double& w : weights) w /= tot;
    s.M = std::move(weights);
    s.dv.assign(s.v.size(), 1.0);
    for (auto& p : s.v) s.v_max = std::max(s.v_max, norm(p));
    require(s.is_even(), "discrete velocity set must be even (-V = V)");
    require(s.spans(), "discrete velocity set must span R^d");
    return s;
  }

  // N angles θ_k = (k + offset)·2π/N on the unit circle, uniform M.
  static VelocitySpace circle(int n, double offset = 0.5) {
    require(n >= 2 && n % 2 == 0, "circle needs an even number of angles >= 2");
    VelocitySpace s;
    s.kind = Kind::Circle;
    s.dim = 2;
    s.n_axis = n;
    s.spacing = 2.0 * pi / n;
    for (int k = 0; k < n; ++k) {
      double th = (k + offset) * s.spacing;
      s.v.push_back({std::cos(th), std::sin(th)});
      s.dv.push_back(s.spacing);
      s.M.push_back(1.0 / (2.0 * pi));
    }
    s.v_max = 1.0;
    return s;
  }

  // Cell-centred nodes on [-v_max, v_max], Gaussian M normalized by the quadrature.
  static VelocitySpace line(int n, double v_max = 6.0) {
    require(n >= 2 && n % 2 == 0, "truncated line needs an even node count >= 2");
    require(v_max > 0, "v_max must be > 0");
    VelocitySpace s;
    s.kind = Kind::Line;
    s.dim = 1;
    s.n_axis = n;
    s.v_max = v_max;
    s.spacing = 2.0 * v_max / n;
    double tot = 0.0;
    for (int j = 0; j < n; ++j) {
      double vj = -v_max + (j + 0.5) * s.spacing;
      s.v.push_back({vj, 0.0});
      s.dv.push_back(s.spacing);
      s.M.push_back(std::exp(-0.5 * vj * vj));
      tot += s.M.back() * s.spacing;
    }
    for (double& m : s.M) m /= tot;
    s.tail_mass = std::erfc(v_max / std::sqrt(2.0));
    return s;
  }

  // Tensor grid on [-v_max, v_max]², 2D Gaussian M.
  static VelocitySpace plane(int n, double v_max = 6.0) {
    VelocitySpace l = line(n, v_max);
    VelocitySpace s;
    s.kind = Kind::Plane;
    s.dim = 2;
    s.n_axis = n;
    s.v_max = v_max;
    s.spacing = l.spacing;
    for (int a = 0; a < n; ++a)
      for (int b = 0; b < n; ++b) {
        s.v.push_back({l.v[b].x, l.v[a].x});
        s.dv.push_back(l.spacing * l.spacing);
        s.M.push_back(l.M[a] * l.M[b]);
      }
    s.tail_mass = 1.0 - std::pow(1.0 - l.tail_mass, 2);
    return s;
  }
};

// -------------------------------------------------------------- potential

struct Potential {
  enum class Kind { Zero, Harmonic, Tabulated };
  Kind kind = Kind::Zero;
  double omega = 1.0;
  std::vector<double> tx, tphi, tdphi, td2phi;  // 1D tables
  double shift = 0.0;                           // added after normalization

  static Potential zero() { return {}; }
  static Potential harmonic(double omega) {
    require(omega > 0, "harmonic frequency must be > 0");
    Potential p;
    p.kind = Kind::Harmonic;
    p.omega = omega;
    return p;
  }
  static Potential tabulated(std::vector<double> x, std::vector<double> phi,
                             std::vector<double> dphi = {}, std::vector<double> d2phi = {}) {
    require(x.size() >= 2 && phi.size() == x.size(), "tabulated potential needs x and phi columns");
    for (std::size_t i = 1; i < x.size(); ++i)
      require(x[i] > x[i - 1], "tabulated x must be strictly increasing");
    require(dphi.empty() || dphi.size() == x.size(), "dphi column length mismatch");
    require(d2phi.empty() || d2phi.size() == x.size(), "d2phi column length mismatch");
    Potential p;
    p.kind = Kind::Tabulated;
    p.tx = std::move(x);
    p.tphi = std::move(phi);
    p.tdphi = std::move(dphi);
    p.td2phi = std::move(d2phi);
    return p;
  }

  // CSV with header; columns x, phi[, dphi, d2phi].
  static Potential from_csv(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw PreconditionError("cannot open potential table " + path);
    std::vector<double> c[4];
    std::string line;
    int ncol = -1;
    while (std::getline(in, line)) {
      if (line.empty() || line[0] == '#') continue;
      if (!(std::isdigit(static_cast<unsigned char>(line[0])) || line[0] == '-' ||
            line[0] == '+' || line[0] == '.'))
        continue;  // header
      std::stringstream ss(line);
      std::string cell;
      int k = 0;
      while (std::getline(ss, cell, ',') && k < 4) c[k++].push_back(std::stod(cell));
      if (ncol < 0) ncol = k;
      require(k == ncol, "ragged potential table");
    }
    require(ncol >= 2, "potential table needs at least x, phi");
    return tabulated(c[0], c[1], ncol >= 3 ? c[2] : std::vector<double>{},
                     ncol >= 4 ? c[3] : std::vector<double>{});
  }

  bool has_derivatives() const { return kind != Kind::Tabulated || !td2phi.empty(); }

  double raw(Vec2 x) const {
    switch (kind) {
      case Kind::Zero:
        return 0.0;
      case Kind::Harmonic:
        return 0.5 * omega * omega * (x.x * x.x + x.y * x.y);
      case Kind::Tabulated:
        return interp(tphi, x.x);
    }
    return 0.0;
  }
  double value(Vec2 x) const { return raw(x) + shift; }

  Vec2 grad(Vec2 x) const {
    switch (kind) {
      case Kind::Zero:
        return {};
      case Kind::Harmonic:
        return (omega * omega) * x;
      case Kind::Tabulated:
        if (!tdphi.empty()) return {interp(tdphi, x.x), 0.0};
        return {slope(tphi, x.x), 0.0};
    }
    return {};
  }

  // Operator norm of the Hessian.
  double hessian_norm(Vec2 x) const {
    switch (kind) {
      case Kind::Zero:
        return 0.0;
      case Kind::Harmonic:
        return omega * omega;
      case Kind::Tabulated:
        if (td2phi.empty()) throw PreconditionError("tabulated potential lacks second derivatives");
        return std::abs(interp(td2phi, x.x));
    }
    return 0.0;
  }

 private:
  std::size_t locate(double s) const {
    auto it = std::upper_bound(tx.begin(), tx.end(), s);
    std::size_t i = (it == tx.begin()) ? 0 : static_cast<std::size_t>(it - tx.begin()) - 1;
    return std::min(i, tx.size() - 2);
  }
  double interp(const std::vector<double>& col, double s) const {
    std::size_t i = locate(s);
    double t = (s - tx[i]) / (tx[i + 1] - tx[i]);
    return (1 - t) * col[i] + t * col[i + 1];
  }
  double slope(const std::vector<double>& col, double s) const {
    std::size_t i = locate(s);
    return (col[i + 1] - col[i]) / (tx[i + 1] - tx[i]);
  }
};

// ---------------------------------------------------------------- regions

struct Shape {
  enum class Kind { Box, Ball };
  Kind kind = Kind::Box;
  double x0 = -std::numeric_limits<double>::infinity();
  double x1 = std::numeric_limits<double>::infinity();
  double y0 = -std::numeric_limits<double>::infinity();
  double y1 = std::numeric_limits<double>::infinity();
  Vec2 c;
  double r = 0.0;

  static Shape box(double x0, double x1, double y0, double y1) {
    Shape s;
    s.x0 = x0;
    s.x1 = x1;
    s.y0 = y0;
    s.y1 = y1;
    return s;
  }
  static Shape ball(Vec2 c, double r) {
    Shape s;
    s.kind = Kind::Ball;
    s.c = c;
    s.r = r;
    return s;
  }

  bool contains(Vec2 p) const {
    if (kind == Kind::Ball) return norm(p - c) <= r;
    return p.x >= x0 && p.x <= x1 && p.y >= y0 && p.y <= y1;
  }

  // C¹ plateau equal to 1 deeper than `ramp` inside, 0 outside.
  double profile(Vec2 p, double ramp) const {
    if (ramp <= 0) return contains(p) ? 1.0 : 0.0;
    auto step = [ramp](double depth) {
      if (depth <= 0) return 0.0;
      if (depth >= ramp) return 1.0;
      double u = depth / ramp;
      return u * u * (3.0 - 2.0 * u);
    };
    if (kind == Kind::Ball) return step(r - norm(p - c));
    double v = 1.0;
    if (std::isfinite(x0)) v *= step(p.x - x0);
    if (std::isfinite(x1)) v *= step(x1 - p.x);
    if (std::isfinite(y0)) v *= step(p.y - y0);
    if (std::isfinite(y1)) v *= step(y1 - p.y);
    return v;
  }
};

struct Region {
  std::vector<Shape> shapes;  // union; empty means everywhere

  static Region everywhere() { return {}; }
  bool contains(Vec2 p) const {
    if (shapes.empty()) return true;
    for (auto& s : shapes)
      if (s.contains(p)) return true;
    return false;
  }
  double profile(Vec2 p, double ramp) const {
    if (shapes.empty()) return 1.0;
    double m = 0.0;
    for (auto& s : shapes) m = std::max(m, s.profile(p, ramp));
    return m;
  }
};

// ------------------------------------------------------- degeneracy weight

struct DegeneracyWeight {
  enum class Kind { Constant, Indicator, PowerLaw, Tabulated };
  Kind kind = Kind::Constant;
  double value = 1.0;
  Region region;
  double inside = 1.0;
  double outside = 0.0;
  double p = 1.0;
  Vec2 center;
  std::vector<double> tx, tsigma;

  static DegeneracyWeight constant(double c) {
    require(c >= 0 && std::isfinite(c), "sigma must be finite and >= 0");
    DegeneracyWeight w;
    w.value = c;
    return w;
  }
  static DegeneracyWeight indicator(Region r, double inside = 1.0, double outside = 0.0) {
    require(inside >= 0 && outside >= 0 && std::isfinite(inside) && std::isfinite(outside),
            "sigma must be finite and >= 0");
    DegeneracyWeight w;
    w.kind = Kind::Indicator;
    w.region = std::move(r);
    w.inside = inside;
    w.outside = outside;
    return w;
  }
  // min(1, |x - center|^{2p})
  static DegeneracyWeight power_law(double p, Vec2 center = {}) {
    require(p > 0, "power-law exponent must be > 0");
    DegeneracyWeight w;
    w.kind = Kind::PowerLaw;
    w.p = p;
    w.center = center;
    return w;
  }
  static DegeneracyWeight tabulated(std::vector<double> x, std::vector<double> s) {
    require(x.size() >= 2 && x.size() == s.size(), "tabulated sigma needs matching columns");
    for (double v : s) require(v >= 0 && std::isfinite(v), "tabulated sigma must be bounded, >= 0");
    DegeneracyWeight w;
    w.kind = Kind::Tabulated;
    w.tx = std::move(x);
    w.tsigma = std::move(s);
    return w;
  }

  double operator()(Vec2 x) const {
    switch (kind) {
      case Kind::Constant:
        return value;
      case Kind::Indicator:
        return region.contains(x) ? inside : outside;
      case Kind::PowerLaw:
        return std::min(1.0, std::pow(norm(x - center), 2.0 * p));
      case Kind::Tabulated: {
        auto it = std::upper_bound(tx.begin(), tx.end(), x.x);
        if (it == tx.begin()) return tsigma.front();
        if (it == tx.end()) return tsigma.back();
        std::size_t i = static_cast<std::size_t>(it - tx.begin()) - 1;
        double t = (x.x - tx[i]) / (tx[i + 1] - tx[i]);
        return (1 - t) * tsigma[i] + t * tsigma[i + 1];
      }
    }
    return 0.0;
  }
};

// ----------------------------------------------------------------- grids

struct SpatialGrid {
  SpatialDomain domain;
  int nx = 1;
  int ny = 1;
  double x0 = 0.0, y0 = 0.0;
  double dx = 1.0, dy = 1.0;

  int dim() const { return dimension(domain); }
  std::size_t size() const { return static_cast<std::size_t>(nx) * ny; }
  double cell_volume() const { return dim() == 1 ? dx : dx * dy; }
  std::size_t index(int ix, int iy) const { return static_cast<std::size_t>(iy) * nx + ix; }
  int ix(std::size_t c) const { return static_cast<int>(c % nx); }
  int iy(std::size_t c) const { return static_cast<int>(c / nx); }
  Vec2 center(std::size_t c) const {
    Vec2 p{x0 + (ix(c) + 0.5) * dx, 0.0};
    if (dim() == 2) p.y = y0 + (iy(c) + 0.5) * dy;
    return p;
  }

  static SpatialGrid make(const SpatialDomain& d, int nx, int ny = 1) {
    validate(d);
    SpatialGrid g;
    g.domain = d;
    require(nx >= 1, "grid needs at least one cell");
    if (auto* t = std::get_if<Torus1D>(&d)) {
      g.nx = nx;
      g.dx = t->length / nx;
    } else if (auto* iv = std::get_if<Interval1D>(&d)) {
      g.nx = nx;
      g.x0 = iv->a;
      g.dx = (iv->b - iv->a) / nx;
    } else if (auto* t2 = std::get_if<Torus2D>(&d)) {
      require(ny >= 1, "grid needs at least one cell per axis");
      g.nx = nx;
      g.ny = ny;
      g.dx = t2->lx / nx;
      g.dy = t2->ly / ny;
    } else {
      throw PreconditionError("Disc2D supports trajectory tracing only, not phase grids");
    }
    return g;
  }
};

struct BoundaryNode {
  std::size_t cell = 0;
  int j = 0;           // velocity index
  Vec2 normal;         // outward
  double E_wall = 0;   // normalized e^{-φ} at the wall
  int wall = 0;        // 0 = left/lower, 1 = right/upper
};

struct PhaseGrid {
  SpatialGrid space;
  VelocitySpace vel;
  Potential potential;  // normalized: ∫ e^{-φ} dx = 1 on the grid
  std::vector<double> E;          // e^{-φ} at cell centres
  Eigen::VectorXd finf;           // E_c M_j
  Eigen::VectorXd w_dxdv;         // cell volume × dv_j
  Eigen::VectorXd w_mu;           // w_dxdv / finf
  std::vector<BoundaryNode> gamma_plus;   // outgoing: n·v > 0
  std::vector<BoundaryNode> gamma_minus;  // incoming: n·v < 0
  std::vector<double> E_wall;     // per wall (Interval1D)
  std::uint64_t id = 0;

  std::size_t nv() const { return vel.size(); }
  std::size_t size() const { return space.size() * vel.size(); }
  std::size_t idx(std::size_t c, std::size_t j) const { return c * vel.size() + j; }

  // Measure dν = (n·v) f∞⁻¹ dS dv of a Γ₊ (or Γ₋, with |n·v|) node.
  double nu_weight(const BoundaryNode& b) const {
    double fw = b.E_wall * vel.M[b.j];
    return std::abs(dot(b.normal, vel.v[b.j])) * vel.dv[b.j] / fw;
  }
};

using GridPtr = std::shared_ptr<const PhaseGrid>;

inline std::uint64_t next_grid_id() {
  static std::atomic<std::uint64_t> counter{1};
  return counter++;
}

inline GridPtr make_phase_grid(const SpatialGrid& space, const VelocitySpace& vel,
                               const Potential& pot) {
  require(vel.dim >= space.dim(), "velocity dimension must be at least the spatial dimension");
  auto g = std::make_shared<PhaseGrid>();
  g->space = space;
  g->vel = vel;
  g->potential = pot;
  g->potential.shift = 0.0;
  const std::size_t nc = space.size(), nv = vel.size();
  double Z = 0.0;
  double phimin = std::numeric_limits<double>::infinity();
  for (std::size_t c = 0; c < nc; ++c) phimin = std::min(phimin, pot.raw(space.center(c)));
  for (std::size_t c = 0; c < nc; ++c)
    Z += std::exp(-(pot.raw(space.center(c)) - phimin)) * space.cell_volume();
  if (!(Z > 0) || !std::isfinite(Z) || !std::isfinite(phimin))
    throw PreconditionError("potential is not normalizable on the grid");
  g->potential.shift = -phimin + std::log(Z);
  g->E.resize(nc);
  for (std::size_t c = 0; c < nc; ++c) g->E[c] = std::exp(-g->potential.value(space.center(c)));
  g->finf.resize(nc * nv);
  g->w_dxdv.resize(nc * nv);
  g->w_mu.resize(nc * nv);
  for (std::size_t c = 0; c < nc; ++c)
    for (std::size_t j = 0; j < nv; ++j) {
      std::size_t i = c * nv + j;
      g->finf(i) = g->E[c] * vel.M[j];
      g->w_dxdv(i) = space.cell_volume() * vel.dv[j];
      g->w_mu(i) = g->w_dxdv(i) / g->finf(i);
    }
  if (auto* iv = std::get_if<Interval1D>(&space.domain)) {
    double Ea = std::exp(-g->potential.value({iv->a, 0.0}));
    double Eb = std::exp(-g->potential.value({iv->b, 0.0}));
    g->E_wall = {Ea, Eb};
    for (int wall = 0; wall < 2; ++wall) {
      Vec2 n{wall == 0 ? -1.0 : 1.0, 0.0};
      std::size_t cell = wall == 0 ? 0 : space.nx - 1;
      for (std::size_t j = 0; j < nv; ++j) {
        double s = dot(n, vel.v[j]);
        BoundaryNode b{cell, static_cast<int>(j), n, g->E_wall[wall], wall};
        if (s > 0) g->gamma_plus.push_back(b);
        if (s < 0) g->gamma_minus.push_back(b);
      }
    }
  }
  g->id = next_grid_id();
  return g;
}

// ------------------------------------------------------------------ field

struct Field {
  GridPtr grid;
  Eigen::VectorXd values;

  Field() = default;
  explicit Field(GridPtr g) : grid(std::move(g)), values(Eigen::VectorXd::Zero(grid->size())) {}
  Field(GridPtr g, Eigen::VectorXd v) : grid(std::move(g)), values(std::move(v)) {
    require(static_cast<std::size_t>(values.size()) == grid->size(), "field size mismatch");
  }

  double& operator()(std::size_t c, std::size_t j) { return values(grid->idx(c, j)); }
  double operator()(std::size_t c, std::size_t j) const { return values(grid->idx(c, j)); }

  bool finite() const { return values.allFinite(); }
  double mass() const { return values.dot(grid->w_dxdv); }
};

inline void check_same_grid(const Field& a, const Field& b) {
  if (!a.grid || !b.grid || a.grid->id != b.grid->id) throw GridMismatch("fields live on different grids");
}

inline void check_grid(const Field& f, const GridPtr& g) {
  if (!f.grid || f.grid->id != g->id) throw GridMismatch("field does not belong to this grid");
}

// ------------------------------------------------------------- operations

inline Field build_equilibrium(const GridPtr& g) { return Field(g, g->finf); }

struct NormWeight {
  enum class Kind { Mu, DxDv, Custom };
  Kind kind = Kind::Mu;
  std::function<double(Vec2, Vec2)> w;  // custom w(x, v)

  static NormWeight mu() { return {}; }
  static NormWeight dxdv() { return {Kind::DxDv, {}}; }
  static NormWeight custom(std::function<double(Vec2, Vec2)> f) { return {Kind::Custom, std::move(f)}; }
};

inline double weighted_norm(const Field& f, const NormWeight& w = NormWeight::mu()) {
  const PhaseGrid& g = *f.grid;
  switch (w.kind) {
    case NormWeight::Kind::Mu:
      return std::sqrt(f.values.cwiseAbs2().dot(g.w_mu));
    case NormWeight::Kind::DxDv:
      return std::sqrt(f.values.cwiseAbs2().dot(g.w_dxdv));
    case NormWeight::Kind::Custom: {
      double s = 0.0;
      for (std::size_t c = 0; c < g.space.size(); ++c)
        for (std::size_t j = 0; j < g.nv(); ++j) {
          std::size_t i = g.idx(c, j);
          s += f.values(i) * f.values(i) * w.w(g.space.center(c), g.vel.v[j]) * g.w_dxdv(i);
        }
      return std::sqrt(s);
    }
  }
  return 0.0;
}

inline double inner_mu(const Field& a, const Field& b) {
  check_same_grid(a, b);
  return a.values.cwiseProduct(b.values).dot(a.grid->w_mu);
}

// ⟨f⟩(x) M(v)
inline Field project_local_equilibrium(const Field& f) {
  const PhaseGrid& g = *f.grid;
  Field out(f.grid);
  for (std::size_t c = 0; c < g.space.size(); ++c) {
    double rho = 0.0;
    for (std::size_t j = 0; j < g.nv(); ++j) rho += f(c, j) * g.vel.dv[j];
    for (std::size_t j = 0; j < g.nv(); ++j) out(c, j) = rho * g.vel.M[j];
  }
  return out;
}

// f - (∫f) f∞
inline Field remove_equilibrium(const Field& f) {
  Field out = f;
  out.values -= f.mass() * f.grid->finf;
  return out;
}

// --------------------------------------------------- Poincaré on a region

inline std::vector<std::size_t> region_cells(const SpatialGrid& g, const Region& r) {
  std::vector<std::size_t> cells;
  for (std::size_t c = 0; c < g.size(); ++c)
    if (r.contains(g.center(c))) cells.push_back(c);
  return cells;
}

// Neighbour pairs (4-neighbourhood, periodic where the domain is).
inline std::vector<std::pair<std::size_t, std::size_t>> grid_edges(const SpatialGrid& g,
                                                                   int axis) {
  std::vector<std::pair<std::size_t, std::size_t>> e;
  bool per = is_periodic(g.domain);
  if (axis == 0) {
    for (int iy = 0; iy < g.ny; ++iy)
      for (int ix = 0; ix < g.nx; ++ix) {
        if (ix + 1 < g.nx) e.push_back({g.index(ix, iy), g.index(ix + 1, iy)});
        else if (per && g.nx > 2) e.push_back({g.index(ix, iy), g.index(0, iy)});
      }
  } else if (g.dim() == 2) {
    for (int iy = 0; iy < g.ny; ++iy)
      for (int ix = 0; ix < g.nx; ++ix) {
        if (iy + 1 < g.ny) e.push_back({g.index(ix, iy), g.index(ix, iy + 1)});
        else if (per && g.ny > 2) e.push_back({g.index(ix, iy), g.index(ix, 0)});
      }
  }
  return e;
}

inline bool cells_connected(const SpatialGrid& g, const std::vector<std::size_t>& cells) {
  if (cells.empty()) return false;
  std::vector<int> in(g.size(), 0), seen(g.size(), 0);
  for (auto c : cells) in[c] = 1;
  std::vector<std::vector<std::size_t>> adj(g.size());
  for (int axis = 0; axis < g.dim(); ++axis)
    for (auto [a, b] : grid_edges(g, axis))
      if (in[a] && in[b]) {
        adj[a].push_back(b);
        adj[b].push_back(a);
      }
  std::queue<std::size_t> q;
  q.push(cells[0]);
  seen[cells[0]] = 1;
  std::size_t count = 1;
  while (!q.empty()) {
    auto a = q.front();
    q.pop();
    for (auto b : adj[a])
      if (!seen[b]) {
        seen[b] = 1;
        ++count;
        q.push(b);
      }
  }
  return count == cells.size();
}

struct PoincareReport {
  double lambda2 = 0.0;
  bool connected = true;
  bool valid = true;
  std::size_t cells = 0;
  Eigen::VectorXd witness;  // u = ρ e^{φ} on the region cells
};

// Smallest nonzero eigenvalue of ∫|∇u|² e^{-φ} / ∫|u - ū|² ⌊∇φ⌉² e^{-φ} on the region,
// u = ρ e^{φ}. With bracket = false the ⌊∇φ⌉² factor is replaced by 1.
inline PoincareReport poincare_constant(const SpatialGrid& g, const Potential& pot,
                                        const Region& region, bool bracket = true) {
  auto cells = region_cells(g, region);
  if (cells.size() < 2) throw PreconditionError("Poincaré region must contain at least two cells");
  PoincareReport rep;
  rep.cells = cells.size();
  rep.connected = cells_connected(g, cells);
  std::vector<long> pos(g.size(), -1);
  for (std::size_t k = 0; k < cells.size(); ++k) pos[cells[k]] = static_cast<long>(k);
  const Eigen::Index n = static_cast<Eigen::Index>(cells.size());
  Eigen::MatrixXd S = Eigen::MatrixXd::Zero(n, n);
  Eigen::VectorXd W(n), c(n);
  double vol = g.cell_volume();
  for (Eigen::Index k = 0; k < n; ++k) {
    Vec2 x = g.center(cells[k]);
    double e = std::exp(-pot.raw(x));
    double br = bracket ? 1.0 + dot(pot.grad(x), pot.grad(x)) : 1.0;
    W(k) = e * br * vol;
    c(k) = e * vol;
  }
  for (int axis = 0; axis < g.dim(); ++axis) {
    double h = axis == 0 ? g.dx : g.dy;
    for (auto [a, b] : grid_edges(g, axis)) {
      if (pos[a] < 0 || pos[b] < 0) continue;
      Vec2 xa = g.center(a), xb = g.center(b);
      // edge midpoint; for wrapped edges use the cell value of a
      Vec2 mid = 0.5 * (xa + xb);
      if (std::abs(xa.x - xb.x) > 1.5 * g.dx || std::abs(xa.y - xb.y) > 1.5 * g.dy) mid = xa;
      double wgt = std::exp(-pot.raw(mid)) * vol / (h * h);
      long i = pos[a], j = pos[b];
      S(i, i) += wgt;
      S(j, j) += wgt;
      S(i, j) -= wgt;
      S(j, i) -= wgt;
    }
  }
  auto ep = linalg::constrained_min_eig(S, W, c, 1);
  rep.lambda2 = ep[0].value;
  rep.witness = ep[0].vector;
  rep.valid = rep.connected && rep.lambda2 > 1e-10;
  return rep;
}

// ------------------------------------------------------- regularity check

struct RegularityReport {
  double sup_ratio = 0.0;
  double edge_ratio = 0.0;  // ratio at the outermost sample
  double mid_ratio = 0.0;   // ratio at half the outer radius
  bool growing = false;
  bool charts_ok = true;
  double min_chart_radius = 0.0;
  bool pass = false;
};

// sup |∇²φ|/(1+|∇φ|) over sample points of the region, a growth check towards
// the outer samples, and the boundary chart scale ε⌊∇φ⌉⁻¹ against the domain size.
inline RegularityReport regularity_check(const SpatialDomain& dom, const Potential& pot,
                                         const Region& region, double eps,
                                         double constant = 4.0, int samples = 2001,
                                         std::optional<std::pair<double, double>> range = {}) {
  if (!pot.has_derivatives()) throw PreconditionError("regularity check needs derivative tables");
  require(eps > 0, "epsilon must be > 0");
  RegularityReport rep;
  double lo, hi;
  double feature;
  if (range) {
    lo = range->first;
    hi = range->second;
  } else if (auto* iv = std::get_if<Interval1D>(&dom)) {
    lo = iv->a;
    hi = iv->b;
  } else if (auto* t = std::get_if<Torus1D>(&dom)) {
    lo = 0;
    hi = t->length;
  } else if (auto* t2 = std::get_if<Torus2D>(&dom)) {
    lo = 0;
    hi = std::max(t2->lx, t2->ly);
  } else {
    double r = std::get<Disc2D>(dom).radius;
    lo = -r;
    hi = r;
  }
  feature = 0.5 * (hi - lo);
  int dim = dimension(dom);
  double centre = 0.5 * (lo + hi);
  auto ratio_at = [&](Vec2 x) {
    return pot.hessian_norm(x) / (1.0 + norm(pot.grad(x)));
  };
  int m = dim == 1 ? samples : static_cast<int>(std::sqrt(static_cast<double>(samples))) + 1;
  for (int a = 0; a < m; ++a)
    for (int b = 0; b < (dim == 1 ? 1 : m); ++b) {
      Vec2 x{lo + (hi - lo) * a / (m - 1), dim == 1 ? 0.0 : lo + (hi - lo) * b / (m - 1)};
      if (!region.contains(x)) continue;
      rep.sup_ratio = std::max(rep.sup_ratio, ratio_at(x));
    }
  // growth along the ray from the centre to the outer edge
  Vec2 edge{hi, dim == 1 ? 0.0 : centre};
  Vec2 mid{centre + 0.5 * (hi - centre), dim == 1 ? 0.0 : centre};
  rep.edge_ratio = ratio_at(edge);
  rep.mid_ratio = ratio_at(mid);
  rep.growing = rep.edge_ratio > 1.5 * rep.mid_ratio && rep.edge_ratio > 1.0;
  if (has_boundary(dom)) {
    rep.min_chart_radius = std::numeric_limits<double>::infinity();
    std::vector<Vec2> pts;
    if (auto* iv = std::get_if<Interval1D>(&dom)) pts = {{iv->a, 0}, {iv->b, 0}};
    if (auto* dc = std::get_if<Disc2D>(&dom))
      for (int k = 0; k < 64; ++k)
        pts.push_back({dc->radius * std::cos(2 * pi * k / 64), dc->radius * std::sin(2 * pi * k / 64)});
    for (auto& p : pts) {
      double r = eps / std::sqrt(1.0 + dot(pot.grad(p), pot.grad(p)));
      rep.min_chart_radius = std::min(rep.min_chart_radius, r);
      if (r > feature) rep.charts_ok = false;
    }
  }
  rep.pass = rep.sup_ratio <= constant && !rep.growing && rep.charts_ok;
  return rep;
}

}  // namespace kinlab::phase
