#include <gtest/gtest.h>

#include <cstdio>
#include <fstream>

#include "kinlab/funineq.hpp"

using namespace kinlab;
using namespace kinlab::funineq;

namespace {

// Exact cell averages of sin(2πx) on [0,1].
VectorXd sine_averages(const WeightedDomain& d) {
  VectorXd g(d.cells());
  for (int i = 0; i < d.nx; ++i) {
    double a = d.x0 + i * d.hx, b = a + d.hx;
    g(i) = (std::cos(2 * pi * a) - std::cos(2 * pi * b)) / (2 * pi * d.hx);
  }
  return g;
}

VectorXd square_data(const WeightedDomain& d) {
  VectorXd g(d.cells());
  for (int c = 0; c < d.cells(); ++c) {
    Vec2 p = d.cell_center(c);
    g(c) = std::sin(2 * pi * p.x) * std::sin(2 * pi * p.y) + 0.5 * std::cos(2 * pi * p.x);
  }
  g.array() -= g.mean();
  return g;
}

VectorXd random_zero_mass(const WeightedDomain& d, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  VectorXd g = random_smooth_cells(d, rng);
  g.array() -= g.mean();
  return g;
}

double max_boundary(const WeightedDomain& d, const VectorXd& F) {
  double m = 0.0;
  for (int f = 0; f < d.faces(); ++f)
    if (d.is_boundary_face(f)) m = std::max(m, std::abs(F(f)));
  return m;
}

}  // namespace

TEST(Domain, WeightIsNormalized) {
  auto d = rectangle_domain(-2, 3, -1, 1, 40, 20, WPotential::quadratic(1.0, 2.0, {0.5, 0.0}));
  double m = 0.0;
  for (int c = 0; c < d.cells(); ++c) m += std::exp(-d.cell_phi(c)) * d.cell_volume();
  EXPECT_NEAR(m, 1.0, 1e-12);
  EXPECT_GT(d.weight_variation, 1.0);
  EXPECT_LE(d.regularity_ratio, 2.0);
  auto z = interval_domain(0, 1, 10);
  EXPECT_NEAR(z.cell_phi(3), 0.0, 1e-14);
  EXPECT_EQ(z.faces(), 11);
  EXPECT_DOUBLE_EQ(z.weight_variation, 1.0);
}

TEST(Operators, DivergenceOfGradientIsSymmetric) {
  auto d = rectangle_domain(0, 1, 0, 2, 5, 7);
  SpMat D = divergence_matrix(d), G = cell_gradient_matrix(d);
  SpMat P = interior_embedding(d);
  MatrixXd lhs = MatrixXd(D * P), rhs = -MatrixXd(SpMat(G.transpose() * P));
  EXPECT_LT((lhs - rhs).cwiseAbs().maxCoeff(), 1e-12);
}

TEST(DivergenceL2, ZeroData) {
  auto d = rectangle_domain(0, 1, 0, 1, 8, 8, WPotential::quadratic(1, 1));
  auto s = solve_divergence_L2(d, VectorXd::Zero(d.cells()));
  EXPECT_EQ(s.F.cwiseAbs().maxCoeff(), 0.0);
}

TEST(DivergenceL2, IntervalMatchesAntiderivative) {
  for (int n : {16, 100, 333}) {
    auto d = interval_domain(0, 1, n);
    auto s = solve_divergence_L2(d, sine_averages(d));
    for (int f = 0; f < d.faces(); ++f) {
      double x = d.face_point(f).x;
      EXPECT_NEAR(s.F(f), (1 - std::cos(2 * pi * x)) / (2 * pi), 1e-10);
    }
  }
}

TEST(DivergenceL2, QuadraticRectangleIsStable) {
  double prev = 0.0;
  for (int n : {24, 48}) {
    auto d = rectangle_domain(-2, 2, -1.5, 1.5, n, n, WPotential::quadratic(1.0, 0.5));
    auto s = solve_divergence_L2(d, random_zero_mass(d, 4));
    EXPECT_LE(s.residual, 1e-8);
    EXPECT_EQ(s.boundary_max, 0.0);
    EXPECT_TRUE(std::isfinite(s.ratio));
    if (prev > 0) {
      EXPECT_NEAR(s.ratio / prev, 1.0, 0.2);
    }
    prev = s.ratio;
  }
}

TEST(DivergenceL2, NonzeroMassRejected) {
  auto d = interval_domain(0, 1, 10);
  EXPECT_THROW(solve_divergence_L2(d, VectorXd::Ones(10)), PreconditionError);
}

TEST(Covering, ConstantWeightIsSingleScale) {
  auto d = rectangle_domain(0, 2, 0, 1, 40, 20);
  auto c = build_covering(d, 0.5);
  EXPECT_DOUBLE_EQ(c.r_min, c.r_max);
  EXPECT_DOUBLE_EQ(c.r_min, 0.5);
  EXPECT_LE(c.partition_defect, 1e-12);
}

TEST(Covering, QuadraticRadiiShrink) {
  auto d = rectangle_domain(-4, 4, -4, 4, 96, 96, WPotential::quadratic(1, 1));
  auto c = build_covering(d);
  for (auto& b : c.balls) EXPECT_NEAR(b.r * d.bracket(b.z), c.eps, 1e-12);
  EXPECT_LT(c.r_min, 0.25 * c.r_max);
  EXPECT_LE(c.partition_defect, 1e-12);
  EXPECT_LE(c.max_overlap, 16);
  EXPECT_GT(c.min_xi_sum, 0.5);
  EXPECT_LT(c.max_grad_theta, 10.0);
  EXPECT_LE(c.ratio_worst, 4.0);
  for (auto& b : c.balls) {
    EXPECT_LE(norm(b.star.c - b.z) + b.star.R, b.r);
    EXPECT_TRUE(d.inside(b.star.c + Vec2{b.star.R, 0}) && d.inside(b.star.c - Vec2{b.star.R, 0}));
    EXPECT_TRUE(d.inside(b.star.c + Vec2{0, b.star.R}) && d.inside(b.star.c - Vec2{0, b.star.R}));
  }
}

TEST(Covering, DegenerateGridRejected) {
  auto d = rectangle_domain(-4, 4, -4, 4, 24, 24, WPotential::quadratic(1, 1));
  EXPECT_THROW(build_covering(d), PreconditionError);
}

TEST(Bogovskii, ZeroData) {
  auto d = rectangle_domain(0, 1, 0, 1, 8, 8);
  auto F = bogovskii_local(d, VectorXd::Zero(d.cells()), Bump{{0.5, 0.5}, 0.25});
  EXPECT_EQ(F.cwiseAbs().maxCoeff(), 0.0);
}

TEST(Bogovskii, BumpMomentsMatchQuadrature) {
  // fine composite midpoint rule along the ray as the independent route
  Bump b{{0.2, -0.1}, 0.3};
  const int n = 200000;
  const double L = 2.0, h = L / n;
  for (Vec2 x : {Vec2{0.0, 0.0}, Vec2{0.25, -0.05}, Vec2{-0.5, 0.4}}) {
    for (double th : {0.1, 1.0, 2.5, -0.6}) {
      Vec2 w{std::cos(th), std::sin(th)};
      auto [A, B] = bump_ray_moments(b, x, w);
      double qa = 0, qb = 0;
      for (int k = 0; k < n; ++k) {
        double s = (k + 0.5) * h;
        double psi = b(x + s * w);
        qa += h * psi * s;
        qb += h * psi;
      }
      EXPECT_NEAR(A, qa, 1e-8);
      EXPECT_NEAR(B, qb, 1e-8);
    }
  }
}

TEST(Bogovskii, RadialDiscOracle) {
  // g = 1 - 2r² on the unit disc has zero mass; F_r = (r - r³)/2
  Bump b{{0, 0}, 0.25};
  auto g = [](Vec2 p) {
    double r2 = dot(p, p);
    return r2 < 1 ? 1 - 2 * r2 : 0.0;
  };
  for (double r : {0.05, 0.2, 0.45, 0.7, 0.95}) {
    for (double th : {0.3, 2.0, 4.4}) {
      Vec2 e{std::cos(th), std::sin(th)};
      Vec2 F = bogovskii_point(g, {0, 0}, 1.0, b, r * e);
      EXPECT_NEAR(dot(F, e), 0.5 * (r - r * r * r), 1e-10);
      EXPECT_NEAR(F.x * e.y - F.y * e.x, 0.0, 1e-10);
    }
  }
}

TEST(Bogovskii, DiscreteResidualDropsUnderRefinement) {
  auto raw = [](int n) {
    auto d = rectangle_domain(0, 1, 0, 1, n, n);
    VectorXd g = square_data(d);
    VectorXd F = bogovskii_local(d, g, Bump{{0.5, 0.5}, 0.25}, n);
    return relative_residual(d, F, g);
  };
  double e1 = raw(16), e2 = raw(32), e3 = raw(64);
  EXPECT_LT(e2, 0.6 * e1);
  EXPECT_LT(e3, 0.6 * e2);
}

TEST(Bogovskii, SupportStaysInHull) {
  auto d = rectangle_domain(0, 1, 0, 1, 32, 32);
  VectorXd g = VectorXd::Zero(d.cells());
  g(5 + 32 * 5) = 1.0;
  g(6 + 32 * 5) = -1.0;
  VectorXd F = bogovskii_local(d, g, Bump{{0.2, 0.2}, 0.05});
  for (int f = 0; f < d.faces(); ++f) {
    Vec2 p = d.face_point(f);
    if (p.x > 0.4 || p.y > 0.4) {
      EXPECT_EQ(F(f), 0.0);
    }
  }
  EXPECT_THROW(bogovskii_local(d, VectorXd::Ones(d.cells()), Bump{{0.5, 0.5}, 0.25}), PreconditionError);
}

TEST(DivergenceH1, ZeroData) {
  auto d = rectangle_domain(0, 1, 0, 1, 8, 8);
  auto s = solve_divergence_H1(d, VectorXd::Zero(d.cells()));
  EXPECT_EQ(s.F.cwiseAbs().maxCoeff(), 0.0);
}

TEST(DivergenceH1, SquareIsExactAndStable) {
  std::vector<double> ratios;
  for (int n : {16, 32, 64}) {
    auto d = rectangle_domain(0, 1, 0, 1, n, n);
    VectorXd g = square_data(d);
    auto s = solve_divergence_H1(d, g);
    EXPECT_LE(s.residual, 1e-6);
    EXPECT_EQ(max_boundary(d, s.F), 0.0);
    EXPECT_LT(s.correction, 0.02);
    ratios.push_back(s.ratio);
  }
  auto [lo, hi] = std::minmax_element(ratios.begin(), ratios.end());
  EXPECT_LE(*hi / *lo, 1.2);
}

TEST(DivergenceH1, IntervalIsThePrimitive) {
  auto d = interval_domain(0, 1, 64);
  auto s = solve_divergence_H1(d, sine_averages(d));
  for (int f = 0; f < d.faces(); ++f)
    EXPECT_NEAR(s.F(f), (1 - std::cos(2 * pi * d.face_point(f).x)) / (2 * pi), 1e-12);
  EXPECT_EQ(s.patches, 1);
}

TEST(DivergenceH1, Linearity) {
  auto check = [](const WeightedDomain& d, DivergenceOptions o) {
    VectorXd g1 = random_zero_mass(d, 1), g2 = random_zero_mass(d, 2);
    auto a = solve_divergence_H1(d, g1, o), b = solve_divergence_H1(d, g2, o);
    auto c = solve_divergence_H1(d, 2.0 * g1 - 0.5 * g2, o);
    VectorXd lin = 2.0 * a.F - 0.5 * b.F;
    EXPECT_LT((c.F - lin).norm(), 1e-10 * lin.norm());
  };
  check(rectangle_domain(0, 1, 0, 1, 16, 16), {});
  DivergenceOptions multi;
  multi.force_multipatch = true;
  multi.eps_max = 0.5;
  check(rectangle_domain(-1, 1, -1, 1, 24, 24, WPotential::quadratic(1, 1)), multi);
}

TEST(DivergenceH1, MultipatchIsStable) {
  std::vector<double> ratios;
  for (int n : {64, 96}) {
    auto d = rectangle_domain(-3, 3, -3, 3, n, n, WPotential::quadratic(1, 1));
    ASSERT_GT(d.weight_variation, 4.0);
    DivergenceOptions o;
    o.threads = 2;
    auto s = solve_divergence_H1(d, random_zero_mass(d, 3), o);
    EXPECT_GT(s.patches, 1);
    EXPECT_LE(s.residual, 1e-6);
    EXPECT_EQ(max_boundary(d, s.F), 0.0);
    EXPECT_LT(s.correction, 0.1);
    ratios.push_back(s.ratio);
  }
  EXPECT_NEAR(ratios[1] / ratios[0], 1.0, 0.2);
}

TEST(DivergenceH1, QuadraticRatiosBounded) {
  auto d = rectangle_domain(-2, 2, -2, 2, 32, 32, WPotential::quadratic(1, 1));
  double worst = 0.0;
  for (std::uint64_t k = 0; k < 50; ++k) {
    auto s = solve_divergence_H1(d, random_zero_mass(d, 100 + k));
    ASSERT_TRUE(std::isfinite(s.ratio));
    EXPECT_LE(s.norm_F, s.ratio * s.norm_g * (1 + 1e-12));
    worst = std::max(worst, s.ratio);
  }
  EXPECT_LT(worst, 50.0);
}

TEST(PoincareLions, ZeroIsTrivial) {
  auto d = interval_domain(0, 1, 20);
  auto [a, b] = poincare_lions_ratio_parts(d, VectorXd::Zero(20));
  EXPECT_EQ(a, 0.0);
  EXPECT_EQ(b, 0.0);
}

TEST(PoincareLions, IntervalMatchesOracle) {
  auto d = interval_domain(0, 1, 200);
  auto rep = poincare_lions_constant(d);
  double dense = poincare_lions_dense(d);
  EXPECT_NEAR(rep.constant / dense, 1.0, 0.1);
  EXPECT_LE(rep.constant, dense * (1 + 1e-8));
  // continuum value: h = cos πx gives (1 + π²)/π²
  EXPECT_NEAR(dense, std::sqrt(1 + 1 / (pi * pi)), 0.01);
}

TEST(PoincareLions, SquareMatchesOracle) {
  auto d = rectangle_domain(-1, 1, -1, 1, 16, 16, WPotential::quadratic(1, 1));
  auto rep = poincare_lions_constant(d);
  double dense = poincare_lions_dense(d);
  EXPECT_NEAR(rep.constant / dense, 1.0, 0.1);
  EXPECT_LE(rep.constant, dense * (1 + 1e-8));
}

TEST(PoincareLions, DualBelowGradientNorm) {
  auto d = rectangle_domain(0, 1, 0, 1, 12, 12, WPotential::quadratic(0.5, 0.5));
  std::mt19937_64 rng(9);
  SpMat G = cell_gradient_matrix(d);
  for (int k = 0; k < 10; ++k) {
    VectorXd h = random_smooth_cells(d, rng);
    auto [hn, dual] = poincare_lions_ratio_parts(d, h);
    VectorXd ephi(d.cells());
    for (int c = 0; c < d.cells(); ++c) ephi(c) = std::exp(d.cell_phi(c));
    VectorXd grad = G * h.cwiseProduct(ephi);
    double l2 = 0.0;
    for (int f = 0; f < d.faces(); ++f) {
      double gf = grad(f) * std::exp(-d.phi(d.face_point(f)));
      l2 += gf * gf * std::exp(d.phi(d.face_point(f))) * d.cell_volume();
    }
    EXPECT_LE(dual, std::sqrt(l2) * (1 + 1e-12));
    EXPECT_GT(hn, 0.0);
  }
}

TEST(Korn, RotationIsExcluded) {
  auto d = rectangle_domain(0, 1, 0, 1, 6, 6);
  auto K = korn_system(d, KornConstraint::Averages);
  VectorXd v(K.full.rows());
  for (int j = 0; j < K.nodes_y; ++j)
    for (int i = 0; i < K.nodes_x; ++i) {
      int n = i + K.nodes_x * j;
      v(2 * n) = -(d.y0 + j * d.hy);
      v(2 * n + 1) = d.x0 + i * d.hx;
    }
  EXPECT_NEAR(v.dot(K.sym * v), 0.0, 1e-12);
  EXPECT_GT(v.dot(K.full * v), 1.0);
  EXPECT_GT(std::abs(K.constraints.col(0).dot(v)), 1.0);
}

TEST(Korn, GradientFieldHasRatioOne) {
  auto d = rectangle_domain(0, 1, 0, 1, 6, 6, WPotential::quadratic(1, 1));
  auto K = korn_system(d, KornConstraint::Averages);
  VectorXd v(K.full.rows());
  for (int j = 0; j < K.nodes_y; ++j)
    for (int i = 0; i < K.nodes_x; ++i) {
      int n = i + K.nodes_x * j;
      double x = d.x0 + i * d.hx, y = d.y0 + j * d.hy;
      v(2 * n) = 2 * x + 3 * y;
      v(2 * n + 1) = 3 * x - 2 * y;
    }
  EXPECT_NEAR(v.dot(K.sym * v) / v.dot(K.full * v), 1.0, 1e-12);
}

TEST(Korn, AveragesMatchOracle) {
  auto d = rectangle_domain(0, 1, 0, 1, 12, 12);
  auto rep = korn_constant(d, KornConstraint::Averages);
  double dense = korn_dense(d, KornConstraint::Averages);
  EXPECT_GE(rep.constant, 1.0);
  EXPECT_NEAR(rep.constant / dense, 1.0, 0.1);
}

TEST(Korn, BoundaryMatchesOracle) {
  auto d = rectangle_domain(0, 2, 0, 1, 12, 8, WPotential::quadratic(1, 1, {1.0, 0.5}));
  auto rep = korn_constant(d, KornConstraint::Boundary);
  double dense = korn_dense(d, KornConstraint::Boundary);
  EXPECT_GE(rep.constant, 1.0);
  EXPECT_NEAR(rep.constant / dense, 1.0, 0.1);
  EXPECT_GT(rep.details.at("boundary_compatibility"), 1e-3);
}

TEST(Korn, IntervalIsOne) {
  EXPECT_EQ(korn_constant(interval_domain(0, 1, 10), KornConstraint::Averages).constant, 1.0);
}

TEST(Korn, ChainBoundRecorded) {
  auto d = rectangle_domain(0, 1, 0, 1, 10, 10);
  double cpl = poincare_lions_constant(d).constant;
  auto rep = korn_constant(d, KornConstraint::Averages, cpl);
  EXPECT_GT(rep.details.at("chain_bound"), 1.0);
}

namespace {

struct Manufactured {
  static double p(Vec2 z) { return std::cos(2 * pi * z.x) * std::cos(2 * pi * z.y); }
  static Vec2 u(Vec2 z) {
    double sx = std::sin(pi * z.x), sy = std::sin(pi * z.y);
    return {pi * sx * sx * std::sin(2 * pi * z.y), -pi * std::sin(2 * pi * z.x) * sy * sy};
  }
  static Vec2 s(Vec2 z) {
    double sx = std::sin(pi * z.x), sy = std::sin(pi * z.y);
    double lap1 = pi * std::sin(2 * pi * z.y) * (2 * pi * pi * std::cos(2 * pi * z.x) - 4 * pi * pi * sx * sx);
    double lap2 = -pi * std::sin(2 * pi * z.x) * (2 * pi * pi * std::cos(2 * pi * z.y) - 4 * pi * pi * sy * sy);
    return {-lap1 - 2 * pi * std::sin(2 * pi * z.x) * std::cos(2 * pi * z.y),
            -lap2 - 2 * pi * std::cos(2 * pi * z.x) * std::sin(2 * pi * z.y)};
  }
};

VectorXd face_sample(const WeightedDomain& d, Vec2 (*fn)(Vec2)) {
  VectorXd v(d.faces());
  for (int f = 0; f < d.faces(); ++f) {
    Vec2 q = fn(d.face_point(f));
    v(f) = d.is_x_face(f) ? q.x : q.y;
  }
  return v;
}

}  // namespace

TEST(Stokes, ZeroForcing) {
  auto d = rectangle_domain(0, 1, 0, 1, 8, 8, WPotential::quadratic(1, 1));
  auto s = stokes_solve(d, VectorXd::Zero(d.faces()));
  EXPECT_EQ(s.u.cwiseAbs().maxCoeff(), 0.0);
  EXPECT_EQ(s.p.cwiseAbs().maxCoeff(), 0.0);
}

TEST(Stokes, ManufacturedSolutionConverges) {
  std::vector<double> eu, ep;
  for (int n : {16, 32}) {
    auto d = rectangle_domain(0, 1, 0, 1, n, n);
    auto s = stokes_solve(d, face_sample(d, Manufactured::s));
    EXPECT_LE(s.div_max, 1e-8);
    EXPECT_EQ(s.boundary_max, 0.0);
    EXPECT_NEAR(s.p_mean, 0.0, 1e-10);
    VectorXd ue = face_sample(d, Manufactured::u);
    eu.push_back((s.u - ue).cwiseAbs().maxCoeff());
    double e = 0.0;
    for (int c = 0; c < d.cells(); ++c) e = std::max(e, std::abs(s.p(c) - Manufactured::p(d.cell_center(c))));
    ep.push_back(e);
  }
  EXPECT_LT(eu[0], 0.1);
  EXPECT_GT(eu[0] / eu[1], 1.7);
  EXPECT_GT(ep[0] / ep[1], 1.7);
}

TEST(Stokes, QuadraticConstantIsStable) {
  std::vector<double> cs;
  for (int n : {16, 24, 32}) {
    auto d = rectangle_domain(-1.5, 1.5, -1.5, 1.5, n, n, WPotential::quadratic(1, 1));
    VectorXd s(d.faces());
    for (int f = 0; f < d.faces(); ++f) {
      Vec2 p = d.face_point(f);
      s(f) = d.is_x_face(f) ? std::sin(pi * p.y) : std::cos(pi * p.x) * p.y;
    }
    auto r = stokes_solve(d, s);
    EXPECT_LE(r.div_max, 1e-8);
    cs.push_back(r.C_S);
  }
  auto [lo, hi] = std::minmax_element(cs.begin(), cs.end());
  EXPECT_LE(*hi / *lo, 1.2);
}

TEST(WeightedPoincare, FlatIntervalIsPiSquared) {
  auto rep = weighted_poincare_check(interval_domain(0, 1, 200));
  EXPECT_NEAR(rep.constant, pi * pi, 0.03 * pi * pi);
  EXPECT_EQ(rep.details.at("hypothesis_ok"), 1.0);
  // the minimizer is orthogonal to constants
  EXPECT_NEAR(rep.witness.sum(), 0.0, 1e-8 * rep.witness.cwiseAbs().sum());
}

TEST(WeightedPoincare, HarmonicIsPositiveAndStable) {
  double a = weighted_poincare_check(interval_domain(-6, 6, 120, WPotential::quadratic(1, 0))).constant;
  double b = weighted_poincare_check(interval_domain(-6, 6, 240, WPotential::quadratic(1, 0))).constant;
  EXPECT_GT(a, 0.0);
  EXPECT_NEAR(a / b, 1.0, 0.05);
}

TEST(WeightedPoincare, HypothesisViolationIsReported) {
  auto rep = weighted_poincare_check(interval_domain(-1, 1, 50, WPotential::quadratic(-1, 0)));
  EXPECT_EQ(rep.details.at("hypothesis_ok"), 0.0);
  EXPECT_TRUE(std::isfinite(rep.constant));
}

TEST(Export, FieldCsv) {
  auto d = rectangle_domain(0, 1, 0, 1, 3, 2);
  std::string f1 = testing::TempDir() + "faces.csv", f2 = testing::TempDir() + "cells.csv";
  write_face_field_csv(d, VectorXd::Zero(d.faces()), f1);
  write_cell_field_csv(d, VectorXd::Zero(d.cells()), f2, "# h\n");
  std::ifstream a(f1), b(f2);
  std::string line;
  int rows = 0;
  while (std::getline(a, line)) ++rows;
  EXPECT_EQ(rows, 1 + d.faces());
  rows = 0;
  while (std::getline(b, line)) ++rows;
  EXPECT_EQ(rows, 2 + d.cells());
  std::remove(f1.c_str());
  std::remove(f2.c_str());
}
