#include <gtest/gtest.h>

#include <cstdio>
#include <fstream>
#include <random>

#include "kinlab/phase.hpp"

using namespace kinlab;
using namespace kinlab::phase;

namespace {

GridPtr torus_circle(int nx, int nth) {
  return make_phase_grid(SpatialGrid::make(Torus1D{1.0}, nx), VelocitySpace::circle(nth),
                         Potential::zero());
}

GridPtr harmonic_line(int nx, int nv) {
  return make_phase_grid(SpatialGrid::make(Interval1D{-6.0, 6.0}, nx), VelocitySpace::line(nv),
                         Potential::harmonic(1.0));
}

Field random_field(const GridPtr& g, unsigned seed) {
  std::mt19937 rng(seed);
  std::normal_distribution<double> N;
  Field f(g);
  for (Eigen::Index i = 0; i < f.values.size(); ++i) f.values(i) = N(rng);
  return f;
}

}  // namespace

TEST(Domain, BoundaryFlags) {
  EXPECT_FALSE(has_boundary(Torus1D{1}));
  EXPECT_FALSE(has_boundary(Torus2D{1, 2}));
  EXPECT_TRUE(has_boundary(Interval1D{0, 1}));
  EXPECT_TRUE(has_boundary(Disc2D{1}));
  EXPECT_THROW(validate(Torus1D{0.0}), PreconditionError);
  EXPECT_THROW(validate(Disc2D{-1.0}), PreconditionError);
  EXPECT_THROW(SpatialGrid::make(Disc2D{1.0}, 8, 8), PreconditionError);
}

TEST(Velocity, NormalizationAndEvenness) {
  for (auto vs : {VelocitySpace::circle(8), VelocitySpace::line(64), VelocitySpace::plane(16),
                  VelocitySpace::discrete({{-1, 0}, {1, 0}}, {3.0, 3.0}, 1)}) {
    double tot = 0.0;
    for (std::size_t j = 0; j < vs.size(); ++j) tot += vs.M[j] * vs.dv[j];
    EXPECT_NEAR(tot, 1.0, 1e-12);
    EXPECT_TRUE(vs.is_even());
  }
  EXPECT_THROW(VelocitySpace::discrete({{1, 0}, {2, 0}}, {1, 1}, 1), PreconditionError);
  EXPECT_THROW(VelocitySpace::discrete({{1, 0}, {-1, 0}}, {1, 1}, 2), PreconditionError);
  auto line = VelocitySpace::line(128);
  EXPECT_NEAR(line.tail_mass, 1.973e-9, 1e-11);
}

TEST(Equilibrium, UniformTorusCircle) {
  auto g = torus_circle(10, 8);
  Field f = build_equilibrium(g);
  EXPECT_NEAR(f.mass(), 1.0, 1e-14);
  for (std::size_t j = 0; j < 8; ++j) EXPECT_NEAR(f(3, j) * g->vel.dv[j], 1.0 / 8.0, 1e-15);
  EXPECT_NEAR(weighted_norm(f), 1.0, 1e-14);
}

TEST(Equilibrium, HarmonicMatchesGaussianOracle) {
  auto g = harmonic_line(120, 64);
  Field f = build_equilibrium(g);
  EXPECT_NEAR(f.mass(), 1.0, 1e-8);
  // oracle: normalized density e^{-x²/2}/√(2π), independent of the grid's normalization
  for (std::size_t c = 0; c < g->space.size(); c += 7) {
    double x = g->space.center(c).x;
    EXPECT_NEAR(g->E[c], std::exp(-0.5 * x * x) / std::sqrt(2 * pi), 1e-8);
  }
  EXPECT_NEAR(weighted_norm(f), 1.0, 1e-10);
}

TEST(Equilibrium, NonNormalizablePotentialRejected) {
  auto pot = Potential::tabulated({0.0, 1.0}, {INFINITY, INFINITY});
  EXPECT_THROW(make_phase_grid(SpatialGrid::make(Interval1D{0, 1}, 4), VelocitySpace::line(4), pot),
               PreconditionError);
}

TEST(Norm, TrivialCases) {
  auto g = torus_circle(6, 4);
  Field f = build_equilibrium(g);
  EXPECT_NEAR(weighted_norm(f), 1.0, 1e-14);
  Field z(g);
  EXPECT_EQ(weighted_norm(z), 0.0);
  Field two = f;
  two.values *= 2.0;
  EXPECT_NEAR(weighted_norm(two), 2.0, 1e-14);
}

TEST(Norm, QuadratureConsistency) {
  auto g = harmonic_line(40, 32);
  Field f = random_field(g, 3);
  double direct = 0.0;
  for (std::size_t c = 0; c < g->space.size(); ++c)
    for (std::size_t j = 0; j < g->nv(); ++j)
      direct += f(c, j) * f(c, j) * g->space.dx * g->vel.dv[j] / (g->E[c] * g->vel.M[j]);
  double n = weighted_norm(f);
  EXPECT_NEAR(n * n / direct, 1.0, 1e-12);
}

TEST(Norm, GridMismatchDetected) {
  auto a = torus_circle(6, 4);
  auto b = torus_circle(6, 4);
  Field fa(a), fb(b);
  EXPECT_THROW(inner_mu(fa, fb), GridMismatch);
}

TEST(Projection, LocalEquilibrium) {
  auto g = harmonic_line(30, 16);
  Field feq = build_equilibrium(g);
  EXPECT_LT((project_local_equilibrium(feq).values - feq.values).norm(), 1e-14);
  Field rhoM(g);
  for (std::size_t c = 0; c < g->space.size(); ++c)
    for (std::size_t j = 0; j < g->nv(); ++j) rhoM(c, j) = (1.0 + c) * g->vel.M[j];
  EXPECT_LT((project_local_equilibrium(rhoM).values - rhoM.values).norm(), 1e-12);
  Field odd(g);
  for (std::size_t c = 0; c < g->space.size(); ++c)
    for (std::size_t j = 0; j < g->nv(); ++j) odd(c, j) = g->vel.v[j].x * g->vel.M[j] * (c + 1);
  EXPECT_LT(project_local_equilibrium(odd).values.norm(), 1e-13);
}

TEST(Projection, OrthogonalAndIdempotent) {
  auto g = harmonic_line(30, 16);
  for (unsigned s = 0; s < 10; ++s) {
    Field f = random_field(g, s), h = random_field(g, 100 + s);
    Field Pf = project_local_equilibrium(f), Ph = project_local_equilibrium(h);
    Field r = f;
    r.values -= Pf.values;
    double scale = weighted_norm(f) * weighted_norm(h);
    EXPECT_NEAR(inner_mu(r, Ph) / scale, 0.0, 1e-10);
    EXPECT_LT((project_local_equilibrium(Pf).values - Pf.values).norm(), 1e-12 * Pf.values.norm());
    // spatial density preserved
    EXPECT_NEAR(Pf.mass(), f.mass(), 1e-10 * f.values.cwiseAbs().sum());
  }
}

TEST(Poincare, GaussianConstantIsOne) {
  auto g = SpatialGrid::make(Interval1D{-6, 6}, 240);
  auto rep = poincare_constant(g, Potential::harmonic(1.0), Region::everywhere(), false);
  EXPECT_NEAR(rep.lambda2, 1.0, 0.03);
  EXPECT_TRUE(rep.valid);
}

TEST(Poincare, TorusFourierOracle) {
  auto g = SpatialGrid::make(Torus1D{1.0}, 200);
  auto rep = poincare_constant(g, Potential::zero(), Region::everywhere(), true);
  // discrete Fourier oracle: (2/h)² sin²(πh) → (2π)²
  double h = 1.0 / 200;
  double oracle = std::pow(2.0 / h * std::sin(pi * h), 2);
  EXPECT_NEAR(rep.lambda2, oracle, 1e-8 * oracle);
  EXPECT_NEAR(rep.lambda2, 4 * pi * pi, 0.03 * 4 * pi * pi);
}

TEST(Poincare, DegenerateRegions) {
  auto g = SpatialGrid::make(Torus1D{1.0}, 20);
  Region single{{Shape::box(0.0, 0.06, -1, 1)}};
  EXPECT_THROW(poincare_constant(g, Potential::zero(), single), PreconditionError);
  Region split{{Shape::box(0.0, 0.2, -1, 1), Shape::box(0.5, 0.7, -1, 1)}};
  auto rep = poincare_constant(g, Potential::zero(), split);
  EXPECT_FALSE(rep.connected);
  EXPECT_FALSE(rep.valid);
  EXPECT_NEAR(rep.lambda2, 0.0, 1e-8);
}

TEST(Regularity, Examples) {
  auto harm = regularity_check(Interval1D{-6, 6}, Potential::harmonic(1.0), Region::everywhere(), 0.5);
  EXPECT_NEAR(harm.sup_ratio, 1.0, 1e-12);
  EXPECT_TRUE(harm.pass);
  auto flat = regularity_check(Torus1D{1}, Potential::zero(), Region::everywhere(), 0.5);
  EXPECT_EQ(flat.sup_ratio, 0.0);
  EXPECT_TRUE(flat.pass);
  std::vector<double> x, p, dp, d2p;
  for (int i = 0; i <= 600; ++i) {
    double s = -3.0 + 6.0 * i / 600;
    x.push_back(s);
    p.push_back(std::exp(s * s));
    dp.push_back(2 * s * std::exp(s * s));
    d2p.push_back((2 + 4 * s * s) * std::exp(s * s));
  }
  auto steep = regularity_check(Interval1D{-3, 3}, Potential::tabulated(x, p, dp, d2p),
                                Region::everywhere(), 0.5);
  // direct evaluation at x = 3: (2+36)e⁹ / (1+6e⁹)
  EXPECT_NEAR(steep.edge_ratio, 38.0 * std::exp(9.0) / (1 + 6 * std::exp(9.0)), 1e-3);
  EXPECT_TRUE(steep.growing);
  EXPECT_FALSE(steep.pass);
  EXPECT_THROW(regularity_check(Interval1D{-3, 3}, Potential::tabulated(x, p), Region::everywhere(), 0.5),
               PreconditionError);
}

TEST(Potential, CsvRoundTrip) {
  std::string path = ::testing::TempDir() + "pot.csv";
  {
    std::ofstream out(path);
    out << "x,phi,dphi,d2phi\n";
    for (int i = 0; i <= 10; ++i) {
      double s = -1 + 0.2 * i;
      out << s << "," << 0.5 * s * s << "," << s << ",1\n";
    }
  }
  auto pot = Potential::from_csv(path);
  EXPECT_NEAR(pot.raw({0.3, 0}), 0.5 * 0.09, 0.01);
  EXPECT_NEAR(pot.grad({0.3, 0}).x, 0.3, 1e-12);
  EXPECT_NEAR(pot.hessian_norm({0.3, 0}), 1.0, 1e-12);
  std::remove(path.c_str());
}

TEST(Sigma, Variants) {
  EXPECT_EQ(DegeneracyWeight::constant(2.0)({0.3, 0.1}), 2.0);
  Region cross{{Shape::box(1. / 3, 2. / 3, -1e9, 1e9), Shape::box(-1e9, 1e9, 1. / 3, 2. / 3)}};
  auto s = DegeneracyWeight::indicator(cross);
  EXPECT_EQ(s({0.5, 0.1}), 1.0);
  EXPECT_EQ(s({0.1, 0.1}), 0.0);
  auto pw = DegeneracyWeight::power_law(1.0);
  EXPECT_NEAR(pw({0.5, 0}), 0.25, 1e-15);
  EXPECT_EQ(pw({2.0, 0}), 1.0);
  EXPECT_THROW(DegeneracyWeight::constant(-1.0), PreconditionError);
  EXPECT_THROW(DegeneracyWeight::tabulated({0, 1}, {0, INFINITY}), PreconditionError);
}

TEST(Boundary, GammaPlusIsOutgoingSet) {
  auto g = make_phase_grid(SpatialGrid::make(Interval1D{0, 1}, 8), VelocitySpace::line(6),
                           Potential::zero());
  EXPECT_EQ(g->gamma_plus.size(), 6u);
  for (auto& b : g->gamma_plus) EXPECT_GT(dot(b.normal, g->vel.v[b.j]), 0.0);
  for (auto& b : g->gamma_minus) EXPECT_LT(dot(b.normal, g->vel.v[b.j]), 0.0);
}
