#include <gtest/gtest.h>

#include <Eigen/Eigenvalues>
#include <algorithm>
#include <cstdio>
#include <fstream>
#include <random>

#include "kinlab/transport.hpp"

using namespace kinlab;
using namespace kinlab::transport;
using phase::Interval1D;
using phase::SpatialGrid;
using phase::Torus1D;
using phase::Torus2D;
using phase::VelocitySpace;

namespace {

// Two-sided K-S statistic against a continuous CDF.
template <class Cdf>
double ks_statistic(std::vector<double> xs, Cdf cdf) {
  std::sort(xs.begin(), xs.end());
  const double n = static_cast<double>(xs.size());
  double d = 0.0;
  for (std::size_t i = 0; i < xs.size(); ++i) {
    double F = cdf(xs[i]);
    d = std::max({d, (i + 1) / n - F, F - i / n});
  }
  return d;
}
// 1% critical value, asymptotic
double ks_critical(std::size_t n) { return 1.628 / std::sqrt(static_cast<double>(n)); }

VelocitySpace two_point() { return VelocitySpace::discrete({{-1, 0}, {1, 0}}, {0.5, 0.5}, 1); }

GridPtr interval_line(int nx, int nv, Potential pot = Potential::zero(), double L = 6.0) {
  return phase::make_phase_grid(SpatialGrid::make(Interval1D{-L, L}, nx), VelocitySpace::line(nv, L),
                                pot);
}

}  // namespace

TEST(Specular, Examples) {
  Vec2 r = specular_reflect({1, 2}, {1, 0});
  EXPECT_DOUBLE_EQ(r.x, -1);
  EXPECT_DOUBLE_EQ(r.y, 2);
  Vec2 t = specular_reflect({0, 3}, {1, 0});
  EXPECT_DOUBLE_EQ(t.x, 0);
  EXPECT_DOUBLE_EQ(t.y, 3);
  std::mt19937 rng(3);
  std::normal_distribution<double> N;
  for (int k = 0; k < 100; ++k) {
    double th = 2 * pi * k / 100.0;
    Vec2 n{std::cos(th), std::sin(th)}, v{N(rng), N(rng)};
    Vec2 w = specular_reflect(v, n);
    EXPECT_NEAR(norm(w), norm(v), 1e-14);
    EXPECT_NEAR(dot(n, w), -dot(n, v), 1e-14);
    Vec2 back = specular_reflect(w, n);
    EXPECT_NEAR(norm(back - v), 0, 1e-14);
  }
  EXPECT_THROW(specular_reflect({1, 0}, {2, 0}), PreconditionError);
}

TEST(Characteristics, HarmonicClosesAfterPeriod) {
  Flow flow(Interval1D{-10, 10}, Potential::harmonic(1.0));
  auto path = trace_characteristic(flow, {0, 0}, {1, 0}, 2 * pi, 0.013);
  auto& end = path.back();
  EXPECT_NEAR(end.t, 2 * pi, 1e-14);
  EXPECT_NEAR(end.x.x, 0.0, 1e-8);
  EXPECT_NEAR(end.v.x, 1.0, 1e-8);
  double E0 = flow.energy(path[0].x, path[0].v);
  for (auto& s : path) EXPECT_LE(std::abs(flow.energy(s.x, s.v) - E0) / E0, 1e-8);
}

TEST(Characteristics, TorusStraightLine) {
  Flow flow(Torus2D{1, 1}, Potential::zero());
  Vec2 x0{0.3, 0.9}, v0{0.7, -1.3};
  auto path = trace_characteristic(flow, x0, v0, 3.0, 0.1);
  for (auto& s : path) {
    double ex = std::fmod(x0.x + s.t * v0.x, 1.0), ey = std::fmod(x0.y + s.t * v0.y, 1.0);
    if (ex < 0) ex += 1;
    if (ey < 0) ey += 1;
    auto circ = [](double a, double b) { return std::min(std::abs(a - b), 1 - std::abs(a - b)); };
    EXPECT_LT(circ(s.x.x, ex), 1e-12);
    EXPECT_LT(circ(s.x.y, ey), 1e-12);
  }
  bool wrapped = false;
  for (auto& s : path) wrapped |= (s.flags & Wrap) != 0;
  EXPECT_TRUE(wrapped);
}

TEST(Characteristics, DiscChordReflection) {
  Flow flow(phase::Disc2D{1.0}, Potential::zero());
  // chord y = -1/2 hits the circle at (√3/2, -1/2) at t = √3/2
  const double s3 = std::sqrt(3.0) / 2;
  auto path = trace_characteristic(flow, {0, -0.5}, {1, 0}, s3 + 0.5, 0.05);
  Vec2 n{s3, -0.5};
  Vec2 vin{1, 0}, vout = path.back().v;
  EXPECT_NEAR(dot(vout, n), -dot(vin, n), 1e-12);
  Vec2 t{-n.y, n.x};
  EXPECT_NEAR(dot(vout, t), dot(vin, t), 1e-12);
  Vec2 expect = n + 0.5 * vout;
  EXPECT_LT(norm(path.back().x - expect), 1e-10);
  int reflections = 0;
  for (auto& s : path) reflections += (s.flags & Reflect) ? 1 : 0;
  EXPECT_EQ(reflections, 1);
}

TEST(Characteristics, VerletEnergyIsSecondOrder) {
  std::vector<double> x, p, d, d2;
  for (int i = 0; i <= 4000; ++i) {
    double s = -5 + 10.0 * i / 4000;
    x.push_back(s);
    p.push_back(0.25 * s * s * s * s);
    d.push_back(s * s * s);
    d2.push_back(3 * s * s);
  }
  Flow flow(Interval1D{-5, 5}, Potential::tabulated(x, p, d, d2));
  auto err = [&](double dt) {
    auto path = trace_characteristic(flow, {0.5, 0}, {1.0, 0}, 5.0, dt);
    double E0 = flow.energy(path[0].x, path[0].v), e = 0;
    for (auto& s : path) e = std::max(e, std::abs(flow.energy(s.x, s.v) - E0));
    return e;
  };
  double e1 = err(0.02), e2 = err(0.01);
  EXPECT_LT(e1, 1e-2);
  EXPECT_NEAR(e1 / e2, 4.0, 1.0);
}

TEST(Characteristics, EscapeIsReported) {
  Flow flow(Torus1D{1.0}, Potential::zero());
  flow.escape_radius = 1.0;
  // positions are wrapped on the torus, so a finite velocity never escapes
  EXPECT_NO_THROW(trace_characteristic(flow, {0.5, 0}, {100, 0}, 1, 0.1));
  EXPECT_THROW(trace_characteristic(flow, {0.5, 0}, {NAN, 0}, 1, 0.1), NumericalError);
}

TEST(Maxwell, MassConservationPerNode) {
  auto g = interval_line(8, 32);
  for (double a : {0.0, 0.3, 0.7, 1.0}) {
    auto R = make_boundary(g, {a, 1 - a});
    EXPECT_LE(maxwell_mass_defect(R), 1e-12);
  }
  EXPECT_THROW(make_boundary(g, {1.5}), PreconditionError);
  EXPECT_THROW(make_boundary(g, {-0.1}), PreconditionError);
}

TEST(Maxwell, SpecularAndDiffusiveLimits) {
  auto g = interval_line(8, 16);
  std::mt19937 rng(1);
  std::uniform_real_distribution<double> U(0, 1);
  VectorXd trace(g->gamma_plus.size());
  for (auto& t : trace) t = U(rng);

  auto R0 = make_boundary(g, {0.0});
  VectorXd out = maxwell_apply(R0, trace);
  for (std::size_t m = 0; m < g->gamma_minus.size(); ++m) {
    const auto& b = g->gamma_minus[m];
    int jm = g->vel.mirror(b.j, b.normal);
    for (std::size_t k = 0; k < g->gamma_plus.size(); ++k)
      if (g->gamma_plus[k].wall == b.wall && g->gamma_plus[k].j == jm) {
        EXPECT_EQ(out(m), trace(k));
      }
  }

  auto R1 = make_boundary(g, {1.0});
  out = maxwell_apply(R1, trace);
  for (int wall = 0; wall < 2; ++wall) {
    double flux = 0, norm = 0;
    for (std::size_t k = 0; k < g->gamma_plus.size(); ++k)
      if (g->gamma_plus[k].wall == wall)
        flux += std::abs(g->vel.v[g->gamma_plus[k].j].x) * g->vel.dv[g->gamma_plus[k].j] * trace(k);
    for (std::size_t k = 0; k < g->gamma_minus.size(); ++k)
      if (g->gamma_minus[k].wall == wall) {
        int j = g->gamma_minus[k].j;
        norm += std::abs(g->vel.v[j].x) * g->vel.M[j] * g->vel.dv[j];
      }
    for (std::size_t m = 0; m < g->gamma_minus.size(); ++m)
      if (g->gamma_minus[m].wall == wall) {
        EXPECT_NEAR(out(m), g->vel.M[g->gamma_minus[m].j] * flux / norm, 1e-14);
      }
  }
}

TEST(Maxwell, EquilibriumIsFixedPoint) {
  auto g = interval_line(10, 24, Potential::harmonic(1.0));
  for (double a : {0.0, 0.4, 1.0}) {
    auto R = make_boundary(g, {a, 0.5 * a});
    VectorXd eq(g->gamma_plus.size());
    for (Eigen::Index k = 0; k < eq.size(); ++k) eq(k) = R.finf(g->gamma_plus[k]);
    VectorXd out = maxwell_apply(R, eq);
    for (std::size_t m = 0; m < g->gamma_minus.size(); ++m)
      EXPECT_NEAR(out(m), R.finf(g->gamma_minus[m]), 1e-14 * R.finf(g->gamma_minus[m]) + 1e-300);
  }
}

TEST(Maxwell, ContractionInNu) {
  auto g = interval_line(6, 32, Potential::harmonic(0.7));
  std::mt19937 rng(9);
  std::normal_distribution<double> N;
  for (double a : {0.0, 0.25, 1.0}) {
    auto R = make_boundary(g, {a});
    for (int s = 0; s < 200; ++s) {
      VectorXd tr(g->gamma_plus.size());
      for (std::size_t k = 0; k < g->gamma_plus.size(); ++k) tr(k) = N(rng) * R.finf(g->gamma_plus[k]);
      double in = nu_norm2_plus(R, tr), out = nu_norm2_minus(R, maxwell_apply(R, tr));
      EXPECT_LE(out, in * (1 + 1e-12));
      if (a == 0.0) {
        EXPECT_NEAR(out, in, 1e-12 * in);
      }
    }
  }
}

TEST(Maxwell, CompatibilityRatio) {
  auto g = interval_line(6, 32);
  auto half = boundary_compatibility_check(make_boundary(g, {0.5}), 200, 7);
  EXPECT_EQ(half.samples, 200);
  EXPECT_EQ(half.violations, 0);
  EXPECT_GT(half.max_ratio, 0.0);
  EXPECT_LE(half.max_ratio, 1 + 1e-6);
  auto spec = boundary_compatibility_check(make_boundary(g, {0.0}), 50, 7);
  EXPECT_EQ(spec.violations, 0);
  EXPECT_EQ(spec.max_ratio, 0.0);
  for (double a : {0.1, 0.9, 1.0})
    EXPECT_LE(boundary_compatibility_check(make_boundary(g, {a}), 200, 3).max_ratio, 1 + 1e-6);
}

TEST(TransportStep, EquilibriumIsStationary) {
  std::vector<GridPtr> grids = {
      phase::make_phase_grid(SpatialGrid::make(Torus2D{1, 1}, 16, 16), VelocitySpace::circle(12),
                             Potential::zero()),
      interval_line(20, 16),
      interval_line(24, 24, Potential::harmonic(1.0)),
  };
  for (auto& g : grids) {
    auto op = build_transport(g, {0.5, 0.2});
    Field f = phase::build_equilibrium(g);
    double dt = std::isfinite(op.max_dt) ? op.max_dt : 0.1;
    for (int k = 0; k < 10; ++k) {
      Field next = transport_step(op, f, dt);
      EXPECT_LT((next.values - f.values).cwiseAbs().maxCoeff(), 1e-8);
      f = next;
    }
  }
}

TEST(TransportStep, FourierModeOnePeriod) {
  // v = ±1 on the unit torus: one period is t = 1
  for (int nx : {128, 256}) {
    auto g = phase::make_phase_grid(SpatialGrid::make(Torus1D{1.0}, nx), two_point(), Potential::zero());
    auto op = build_transport(g);
    Field f(g);
    for (int c = 0; c < nx; ++c)
      for (int j = 0; j < 2; ++j) f(c, j) = 1 + 0.5 * std::sin(2 * pi * g->space.center(c).x);
    Field f0 = f;
    // CFL 1 is an exact shift
    Field e = f;
    for (int k = 0; k < nx; ++k) e = transport_step(op, e, g->space.dx);
    EXPECT_LT((e.values - f0.values).cwiseAbs().maxCoeff(), 1e-12);
    // CFL 1/2 diffuses; amplitude factor per period ≈ exp(-2π² dx (1-c) / 1) for upwind
    for (int k = 0; k < 2 * nx; ++k) f = transport_step(op, f, 0.5 * g->space.dx);
    double amp = (f.values.array() - 1).abs().maxCoeff() / 0.5;
    double predicted = std::exp(-2 * pi * pi * g->space.dx * 0.5);
    EXPECT_NEAR(amp, predicted, 0.02);
    EXPECT_NEAR(f.mass(), f0.mass(), 1e-12);
  }
}

TEST(TransportStep, SpecularIntervalIsometry) {
  // lattice-aligned testbed: dt = dx makes free transport and specular walls exact
  auto g = phase::make_phase_grid(SpatialGrid::make(Interval1D{0, 1}, 64), two_point(), Potential::zero());
  auto op = build_transport(g, {0.0});
  Field f(g);
  std::mt19937 rng(5);
  std::uniform_real_distribution<double> U(0.1, 1);
  for (auto& x : f.values) x = U(rng);
  double n0 = phase::weighted_norm(f), m0 = f.mass();
  for (int k = 0; k < 64; ++k) {
    f = transport_step(op, f, g->space.dx);
    EXPECT_NEAR(phase::weighted_norm(f), n0, 1e-12);
  }
  EXPECT_NEAR(f.mass(), m0, 1e-12);
}

TEST(TransportStep, MassAndMonotonicity) {
  auto g = interval_line(32, 16);
  auto op = build_transport(g, {0.6, 0.3});
  Field f(g);
  std::mt19937 rng(2);
  std::uniform_real_distribution<double> U(0, 1);
  for (std::size_t c = 0; c < 32; ++c)
    for (std::size_t j = 0; j < 16; ++j) f(c, j) = g->vel.M[j] * (0.2 + U(rng));
  double m0 = f.mass(), n0 = phase::weighted_norm(f);
  double lo = (f.values.array() / g->finf.array()).minCoeff();
  double hi = (f.values.array() / g->finf.array()).maxCoeff();
  for (int k = 0; k < 200; ++k) {
    Field next = transport_step(op, f, 0.9 * op.max_dt);
    EXPECT_NEAR(next.mass(), m0, 1e-12);
    EXPECT_LE(phase::weighted_norm(next), phase::weighted_norm(f) * (1 + 1e-12));
    f = next;
  }
  // ratio to equilibrium stays inside the initial range (maximum principle)
  EXPECT_GE((f.values.array() / g->finf.array()).minCoeff(), lo - 1e-12);
  EXPECT_LE((f.values.array() / g->finf.array()).maxCoeff(), hi + 1e-12);
  EXPECT_LT(phase::weighted_norm(f), n0);
  EXPECT_THROW(transport_step(op, f, 1.5 * op.max_dt), PreconditionError);
}

TEST(TransportStep, PhasePlaneIsDissipativeAndConservative) {
  auto g = interval_line(20, 20, Potential::harmonic(1.0));
  for (double a : {0.0, 0.5, 1.0}) {
    auto op = build_transport(g, {a});
    EXPECT_FALSE(op.explicit_scheme);
    // symmetric part of the generator in L²(dμ) is negative semidefinite
    Eigen::MatrixXd A(op.A);
    Eigen::MatrixXd W = g->w_mu.asDiagonal();
    Eigen::MatrixXd S = W * A;
    S = 0.5 * (S + S.transpose()).eval();
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(S);
    EXPECT_LE(es.eigenvalues().maxCoeff(), 1e-10 * es.eigenvalues().cwiseAbs().maxCoeff());
    // mass: column sums weighted by dx dv vanish
    Eigen::VectorXd cs = A.transpose() * g->w_dxdv;
    EXPECT_LT(cs.cwiseAbs().maxCoeff(), 1e-10);
    EXPECT_LT((A * g->finf).cwiseAbs().maxCoeff(), 1e-10);
  }
}

TEST(TransportStep, PotentialOnTorusRejected) {
  std::vector<double> x{0, 1}, p{0, 1};
  auto g = phase::make_phase_grid(SpatialGrid::make(Torus1D{1.0}, 8), VelocitySpace::line(8),
                                  Potential::tabulated(x, p));
  EXPECT_THROW(build_transport(g), PreconditionError);
}

TEST(MonteCarlo, DeterministicWithoutRandomness) {
  ParticleModel m;
  m.flow = Flow(phase::Disc2D{1.0}, Potential::zero());
  auto path = trace_characteristic(m.flow, {0.1, -0.3}, {0.8, 0.5}, 7.0, 0.01);
  ParticleState s{{0.1, -0.3}, {0.8, 0.5}};
  std::mt19937_64 rng(1);
  for (std::size_t k = 1; k < path.size(); ++k) {
    s = monte_carlo_step(m, s, path[k].t - path[k - 1].t, rng);
    EXPECT_LT(norm(s.x - path[k].x), 1e-9);
    EXPECT_LT(norm(s.v - path[k].v), 1e-9);
  }
}

TEST(MonteCarlo, FluxMaxwellianSpeedLaw) {
  // in 2D the flux-weighted Gaussian has speed density ∝ s² e^{-s²/2} (chi with 3 d.o.f.)
  auto chi3 = [](double s) {
    return std::erf(s / std::sqrt(2.0)) - std::sqrt(2.0 / pi) * s * std::exp(-0.5 * s * s);
  };
  VelocityLaw law;
  std::mt19937_64 rng(11);
  std::vector<double> speeds;
  Vec2 n{std::cos(0.3), std::sin(0.3)};
  for (int k = 0; k < 10000; ++k) {
    Vec2 v = sample_flux_maxwellian(law, n, rng);
    ASSERT_LT(dot(v, n), 0);
    speeds.push_back(norm(v));
  }
  EXPECT_LT(ks_statistic(speeds, chi3), ks_critical(speeds.size()));

  // through the particle step: re-emitted velocities after a diffusive hit
  ParticleModel m;
  m.flow = Flow(phase::Disc2D{1.0}, Potential::zero());
  m.alpha = [](Vec2) { return 1.0; };
  std::vector<double> post;
  for (int k = 0; k < 10000; ++k) {
    ParticleState s{{0.95, 0.0}, {1.0, 0.0}};
    auto r = stream_rng(4, static_cast<std::uint64_t>(k));
    s = monte_carlo_step(m, s, 0.0501, r);
    ASSERT_TRUE(s.flags & Diffuse);
    post.push_back(norm(s.v));
  }
  EXPECT_LT(ks_statistic(post, chi3), ks_critical(post.size()));

  // unit circle velocities: angle from the inward normal has density cos β / 2
  VelocityLaw circ;
  circ.kind = VelocityLaw::Kind::UnitCircle;
  std::vector<double> betas;
  for (int k = 0; k < 10000; ++k) {
    Vec2 v = sample_flux_maxwellian(circ, {1, 0}, rng);
    betas.push_back(std::atan2(v.y, -v.x));
  }
  EXPECT_LT(ks_statistic(betas, [](double b) { return 0.5 * (std::sin(b) + 1); }),
            ks_critical(betas.size()));
}

TEST(MonteCarlo, BgkClockIsExponential) {
  const double sigma = 2.0;
  ParticleModel m;
  m.flow = Flow(Torus2D{1, 1}, Potential::zero());
  m.sigma = [=](Vec2) { return sigma; };
  m.sigma_max = 3.0;  // thinning from a larger rate must not bias the clock
  ParticleState s{{0.5, 0.5}, {0.3, 0.1}};
  std::mt19937_64 rng(21);
  std::vector<double> times;
  for (int k = 0; k < 5000; ++k) s = monte_carlo_step(m, s, 1.0, rng, &times);
  std::vector<double> gaps;
  for (std::size_t k = 1; k < times.size(); ++k) gaps.push_back(times[k] - times[k - 1]);
  ASSERT_GT(gaps.size(), 5000u);
  EXPECT_LT(ks_statistic(gaps, [=](double t) { return 1 - std::exp(-sigma * t); }),
            ks_critical(gaps.size()));
}

TEST(MonteCarlo, ScatteringJumpsFollowKernel) {
  auto L = collision::random_reversible_kernel(4, 3);
  ParticleModel m;
  m.flow = Flow(Torus1D{1.0}, Potential::zero());
  m.law.kind = VelocityLaw::Kind::Nodes;
  m.law.nodes = L.vel;
  m.kernel = L;
  m.sigma = [](Vec2) { return 1.0; };
  m.sigma_max = 1.0;
  // long-run occupation of nodes follows M
  ParticleState s{{0.2, 0}, L.vel.v[0], 0};
  std::mt19937_64 rng(8);
  std::vector<double> occ(4, 0.0);
  for (int k = 0; k < 200000; ++k) {
    s = monte_carlo_step(m, s, 0.05, rng);
    occ[static_cast<std::size_t>(s.j)] += 1;
  }
  for (int j = 0; j < 4; ++j) EXPECT_NEAR(occ[j] / 200000.0, L.vel.M[j], 0.02);
}

TEST(Trajectory, CsvDump) {
  Flow flow(phase::Disc2D{1.0}, Potential::zero());
  auto path = trace_characteristic(flow, {0, 0}, {1, 0}, 3.5, 0.25);
  std::string file = testing::TempDir() + "traj.csv";
  write_trajectory_csv(path, file, "# test\n");
  std::ifstream in(file);
  std::string line;
  std::getline(in, line);
  EXPECT_EQ(line, "# test");
  std::getline(in, line);
  EXPECT_EQ(line, "t,x,y,vx,vy,reflect,wrap,diffuse,scatter");
  int rows = 0, refl = 0;
  while (std::getline(in, line)) {
    ++rows;
    refl += line.ends_with(",1,0,0,0");
  }
  EXPECT_EQ(rows, static_cast<int>(path.size()));
  EXPECT_EQ(refl, 2);
  std::remove(file.c_str());
}
