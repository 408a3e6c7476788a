#include <gtest/gtest.h>

#include <Eigen/Eigenvalues>
#include <cstdio>
#include <fstream>

#include "kinlab/evolve.hpp"

using namespace kinlab;
using namespace kinlab::evolve;
using phase::DegeneracyWeight;
using phase::Interval1D;
using phase::Potential;
using phase::SpatialGrid;
using phase::Torus1D;
using phase::Torus2D;
using phase::VelocitySpace;

namespace {

VelocitySpace two_point() { return VelocitySpace::discrete({{-1, 0}, {1, 0}}, {0.5, 0.5}, 1); }

Model lattice_testbed(int nx, DegeneracyWeight sigma, std::vector<double> alpha) {
  auto g = phase::make_phase_grid(SpatialGrid::make(Interval1D{0, 1}, nx), two_point(), Potential::zero());
  return make_model(g, std::move(sigma), collision::bgk(g->vel), alpha);
}

Model harmonic_fp(int n, DegeneracyWeight sigma, double L = 6.0) {
  auto g = phase::make_phase_grid(SpatialGrid::make(Interval1D{-L, L}, n), VelocitySpace::line(n, L),
                                  Potential::harmonic(1.0));
  return make_model(g, std::move(sigma), collision::fokker_planck(g->vel), {0.0});
}

Model torus_cross(int nx, int nv) {
  auto g = phase::make_phase_grid(SpatialGrid::make(Torus2D{1, 1}, nx, nx), VelocitySpace::circle(nv),
                                  Potential::zero());
  phase::Region cross;
  cross.shapes = {phase::Shape::box(1.0 / 3, 2.0 / 3, -1, 2), phase::Shape::box(-1, 2, 1.0 / 3, 2.0 / 3)};
  return make_model(g, DegeneracyWeight::indicator(cross), collision::bgk(g->vel));
}

Field bumpy(const GridPtr& g, unsigned seed) {
  std::mt19937 rng(seed);
  std::uniform_real_distribution<double> U(0.5, 1.5);
  Field f(g);
  for (Eigen::Index i = 0; i < f.values.size(); ++i) f.values(i) = g->finf(i) * U(rng);
  return f;
}

}  // namespace

TEST(Step, EquilibriumIsStationary) {
  std::vector<Model> models = {torus_cross(16, 8), harmonic_fp(16, DegeneracyWeight::power_law(1.0)),
                               lattice_testbed(32, DegeneracyWeight::constant(0.5), {0.3, 1.0})};
  for (auto& m : models) {
    Field f = phase::build_equilibrium(m.grid);
    EvolutionConfig cfg;
    cfg.dt = m.transport.explicit_scheme ? m.transport.max_dt : 0.05;
    for (int k = 0; k < 20; ++k) {
      Field next = step(m, f, cfg);
      EXPECT_LT((next.values - f.values).cwiseAbs().maxCoeff(), 1e-8);
      EXPECT_NEAR(next.mass(), f.mass(), 1e-8);
      f = next;
    }
  }
}

TEST(Step, FreeSpecularTransportConservesNorm) {
  auto m = lattice_testbed(64, DegeneracyWeight::constant(0.0), {0.0});
  Field f = bumpy(m.grid, 3);
  EvolutionConfig cfg;
  cfg.dt = m.grid->space.dx;
  double n0 = phase::weighted_norm(f);
  for (int k = 0; k < 64; ++k) f = step(m, f, cfg);
  EXPECT_NEAR(phase::weighted_norm(f), n0, 1e-6 * n0);
}

TEST(Step, UniformDataRelaxesAtBgkRate) {
  auto g = phase::make_phase_grid(SpatialGrid::make(Torus1D{1.0}, 8), VelocitySpace::line(24, 6.0),
                                  Potential::zero());
  auto m = make_model(g, DegeneracyWeight::constant(1.0), collision::bgk(g->vel));
  Field f(g);
  for (std::size_t c = 0; c < 8; ++c)
    for (std::size_t j = 0; j < 24; ++j) f(c, j) = g->vel.M[j] * (1 + 0.5 * g->vel.v[j].x);
  Field eq = phase::project_local_equilibrium(f);
  double d0 = phase::weighted_norm(Field(g, f.values - eq.values));
  EvolutionConfig cfg;
  cfg.dt = 1e-3;
  for (int k = 0; k < 1000; ++k) f = step(m, f, cfg);
  double d1 = phase::weighted_norm(Field(g, f.values - eq.values));
  EXPECT_NEAR(d1 / d0, std::exp(-1.0), 0.01 * std::exp(-1.0));
}

TEST(Step, NormDecreasesAlongRuns) {
  std::vector<Model> models = {torus_cross(16, 8), harmonic_fp(16, DegeneracyWeight::power_law(1.0)),
                               lattice_testbed(32, DegeneracyWeight::constant(0.5), {0.3, 1.0})};
  for (auto& m : models) {
    Field f = bumpy(m.grid, 7);
    EvolutionConfig cfg;
    cfg.dt = m.transport.explicit_scheme ? 0.9 * m.transport.max_dt : 0.05;
    double prev = phase::weighted_norm(f);
    for (int k = 0; k < 50; ++k) {
      f = step(m, f, cfg);
      double n = phase::weighted_norm(f);
      EXPECT_LE(n, prev * (1 + 1e-8));
      prev = n;
    }
  }
}

TEST(Step, GrowthIsDetected) {
  auto m = harmonic_fp(8, DegeneracyWeight::constant(1.0));
  transport::SpMat I(m.transport.A.rows(), m.transport.A.cols());
  I.setIdentity();
  m.transport.A += I;
  Field f = bumpy(m.grid, 1);
  EvolutionConfig cfg;
  cfg.dt = 0.1;
  EXPECT_THROW(step(m, f, cfg), NumericalError);
}

TEST(Step, SplittingOrder) {
  auto m = harmonic_fp(16, DegeneracyWeight::indicator([] {
    phase::Region r;
    r.shapes = {phase::Shape::box(-1, 1, -1, 1)};
    return r;
  }()));
  Field f0 = bumpy(m.grid, 5);
  auto run = [&](double dt, Splitting s) {
    EvolutionConfig cfg;
    cfg.dt = dt;
    cfg.splitting = s;
    Field f = f0;
    long n = std::lround(1.0 / dt);
    for (long k = 0; k < n; ++k) f = step(m, f, cfg);
    return f;
  };
  for (auto s : {Splitting::Strang, Splitting::Lie}) {
    double dt = 0.1;
    Field ref = run(dt / 16, s);
    double e1 = phase::weighted_norm(Field(m.grid, run(dt, s).values - ref.values));
    double e2 = phase::weighted_norm(Field(m.grid, run(dt / 2, s).values - ref.values));
    double order = std::log2(e1 / e2);
    if (s == Splitting::Strang) {
      EXPECT_NEAR(order, 2.0, 0.35);
    } else {
      EXPECT_NEAR(order, 1.0, 0.35);
    }
  }
}

TEST(Dissipation, TrivialCases) {
  auto m = torus_cross(16, 8);
  EXPECT_NEAR(dissipation_total(m, phase::build_equilibrium(m.grid)), 0.0, 1e-12);
  auto spec = lattice_testbed(16, DegeneracyWeight::constant(0.0), {0.0});
  EXPECT_NEAR(dissipation_total(spec, bumpy(spec.grid, 2)), 0.0, 1e-12);
  auto h = harmonic_fp(16, DegeneracyWeight::power_law(1.0));
  EXPECT_NEAR(dissipation_total(h, phase::build_equilibrium(h.grid)), 0.0, 1e-12);
  for (unsigned s = 0; s < 10; ++s) {
    EXPECT_GE(dissipation_total(m, bumpy(m.grid, s)), -1e-10);
    EXPECT_GE(dissipation_total(h, bumpy(h.grid, s)), -1e-10);
  }
}

TEST(Dissipation, MatchesNormDecreaseToFirstOrder) {
  // lattice testbed: exact transport, so the only discrepancy is the time step
  auto defect = [](int nx) {
    phase::Region r;
    r.shapes = {phase::Shape::box(0.2, 0.6, -1, 1)};
    auto m = lattice_testbed(nx, DegeneracyWeight::indicator(r, 1.0, 0.1), {0.5, 0.2});
    Field f(m.grid);
    for (int c = 0; c < nx; ++c) {
      double x = m.grid->space.center(c).x;
      f(c, 0) = 0.5 * (1 + 0.5 * std::cos(2 * pi * x));
      f(c, 1) = 0.5 * (1 + 0.3 * std::sin(2 * pi * x));
    }
    EvolutionConfig cfg;
    cfg.dt = m.grid->space.dx;
    cfg.splitting = Splitting::Lie;
    double worst = 0.0;
    Field u = phase::remove_equilibrium(f);
    for (int k = 0; k < nx / 2; ++k) {
      f = step(m, f, cfg);
      Field next = phase::remove_equilibrium(f);
      double n0 = std::pow(phase::weighted_norm(u), 2), n1 = std::pow(phase::weighted_norm(next), 2);
      double D = 0.5 * (dissipation_total(m, u) + dissipation_total(m, next));
      worst = std::max(worst, std::abs((n1 - n0) / cfg.dt + D));
      u = next;
    }
    return worst;
  };
  double e1 = defect(64), e2 = defect(128);
  EXPECT_LT(e1, 0.05);
  EXPECT_LT(e2, 0.6 * e1);
}

TEST(Generator, KernelAndMass) {
  std::vector<Model> models = {torus_cross(8, 8), harmonic_fp(12, DegeneracyWeight::power_law(1.0)),
                               lattice_testbed(16, DegeneracyWeight::constant(0.5), {0.3, 1.0})};
  for (auto& m : models) {
    auto G = assemble_generator(m);
    EXPECT_LT((G.G * G.finf).cwiseAbs().maxCoeff(), 1e-8);
    VectorXd cs = G.G.transpose() * G.mass;
    EXPECT_LT(cs.cwiseAbs().maxCoeff(), 1e-8);
  }
}

TEST(Generator, MatchesStepToFirstOrder) {
  auto m = harmonic_fp(12, DegeneracyWeight::power_law(1.0));
  auto G = assemble_generator(m);
  Field f = bumpy(m.grid, 4);
  auto err = [&](double dt) {
    EvolutionConfig cfg;
    cfg.dt = dt;
    Field next = step(m, f, cfg);
    VectorXd fd = (next.values - f.values) / dt;
    return (fd - G.G * f.values).norm() / (G.G * f.values).norm();
  };
  double e1 = err(1e-3), e2 = err(5e-4);
  EXPECT_LT(e1, 1e-2);
  EXPECT_LT(e2, 0.6 * e1);
}

TEST(Generator, BgkBlockOnUniformModes) {
  const double sigma = 0.7;
  auto g = phase::make_phase_grid(SpatialGrid::make(Torus1D{1.0}, 6), VelocitySpace::line(10, 5.0),
                                  Potential::zero());
  auto m = make_model(g, DegeneracyWeight::constant(sigma), collision::bgk(g->vel));
  auto G = assemble_generator(m);
  // x-uniform basis: e_j repeated over cells
  MatrixXd B = MatrixXd::Zero(static_cast<Eigen::Index>(g->size()), 10);
  for (std::size_t c = 0; c < 6; ++c)
    for (std::size_t j = 0; j < 10; ++j) B(static_cast<Eigen::Index>(g->idx(c, j)), static_cast<Eigen::Index>(j)) = 1.0 / 6;
  MatrixXd GB = G.G * B;
  // invariant subspace: G B = B R
  MatrixXd R = (B.transpose() * B).ldlt().solve(B.transpose() * GB);
  EXPECT_LT((GB - B * R).cwiseAbs().maxCoeff(), 1e-12);
  Eigen::EigenSolver<MatrixXd> es(R);
  std::vector<double> ev;
  for (int k = 0; k < 10; ++k) ev.push_back(es.eigenvalues()(k).real());
  std::sort(ev.begin(), ev.end());
  EXPECT_NEAR(ev.back(), 0.0, 1e-12);
  for (int k = 0; k < 9; ++k) EXPECT_NEAR(ev[k], -sigma, 1e-12);
}

TEST(Generator, GapZeroWithoutCollisions) {
  auto g = phase::make_phase_grid(SpatialGrid::make(Torus1D{1.0}, 16), VelocitySpace::line(8, 4.0),
                                  Potential::zero());
  auto m = make_model(g, DegeneracyWeight::constant(0.0), collision::bgk(g->vel));
  EXPECT_NEAR(generator_spectral_gap(assemble_generator(m)).gap, 0.0, 1e-8);
}

TEST(Generator, TorusBgkGapStableUnderRefinement) {
  auto gap = [](int r) {
    auto g = phase::make_phase_grid(SpatialGrid::make(Torus1D{1.0}, 16 * r), VelocitySpace::line(8 * r, 5.0),
                                    Potential::zero());
    auto m = make_model(g, DegeneracyWeight::constant(1.0), collision::bgk(g->vel));
    return generator_spectral_gap(assemble_generator(m)).gap;
  };
  double g2 = gap(2), g4 = gap(4);
  EXPECT_GT(g4, 0.0);
  EXPECT_NEAR(g2 / g4, 1.0, 0.05);
}

TEST(Generator, ArnoldiAgreesWithDense) {
  auto m = harmonic_fp(16, DegeneracyWeight::constant(1.0));
  auto G = assemble_generator(m);
  auto dense = generator_spectral_gap(G);
  const double tau = 0.02;
  EvolutionConfig cfg;
  cfg.dt = tau;
  auto prop = [&](const VectorXd& v) { return step(m, Field(m.grid, v), cfg).values; };
  auto iter = generator_spectral_gap(G, 10, prop, tau);
  EXPECT_FALSE(iter.dense);
  EXPECT_NEAR(iter.gap, dense.gap, 0.01 * dense.gap);
  EXPECT_THROW(generator_spectral_gap(G, 10), CapacityError);
}

TEST(Generator, ExportFormat) {
  auto m = lattice_testbed(4, DegeneracyWeight::constant(1.0), {0.5});
  auto G = assemble_generator(m);
  std::string file = testing::TempDir() + "gen.txt";
  export_generator(G, file, "# hdr\n");
  std::ifstream in(file);
  std::string line;
  std::getline(in, line);
  EXPECT_EQ(line, "# hdr");
  long r, c;
  double v;
  int count = 0;
  while (in >> r >> c >> v) {
    EXPECT_NEAR(G.G.coeff(r, c), v, 1e-15 * std::abs(v));
    ++count;
  }
  EXPECT_EQ(count, G.G.nonZeros());
  std::remove(file.c_str());
}

TEST(Decay, EquilibriumSkipsFit) {
  auto m = torus_cross(8, 8);
  EvolutionConfig cfg;
  cfg.dt = m.transport.max_dt;
  cfg.T_final = 1.0;
  auto rep = run_decay(m, phase::build_equilibrium(m.grid), cfg);
  for (double n : rep.norm) EXPECT_LT(n, 1e-12);
  EXPECT_FALSE(rep.fitted);
}

TEST(Decay, FitAndCertificate) {
  auto m = harmonic_fp(20, DegeneracyWeight::constant(1.0));
  EvolutionConfig cfg;
  cfg.dt = 0.05;
  cfg.T_final = 20.0;
  Field f0 = evolve::random_smooth_zero_mass(m.grid, 9, 0);
  auto rep = run_decay(m, f0, cfg);
  ASSERT_TRUE(rep.fitted);
  EXPECT_GT(rep.lambda_fit, 0.0);
  EXPECT_GE(rep.r2, 0.99);
  for (std::size_t k = 1; k < rep.norm.size(); ++k) EXPECT_LE(rep.norm[k], rep.norm[k - 1] * (1 + 1e-8));
  for (double D : rep.dissipation) EXPECT_GE(D, -1e-10);
  EXPECT_GT(rep.eta, 0.0);
  EXPECT_LT(rep.eta, 1.0);
  auto cert = certified_rate(rep.eta, cfg.T_final);
  // soundness on the run that produced η
  double ratio = rep.norm.back() / rep.norm0;
  EXPECT_GE(std::exp(-cert.Lambda * cfg.T_final) * cert.C, ratio);
  EXPECT_GE(std::sqrt(cert.C * std::exp(-cert.Lambda * cfg.T_final)), ratio);
}

TEST(Decay, GapMatchesFit) {
  phase::Region core;
  core.shapes = {phase::Shape::box(-1, 1, -1, 1)};
  auto m = harmonic_fp(24, DegeneracyWeight::indicator(core));
  double gap = generator_spectral_gap(assemble_generator(m)).gap;
  EvolutionConfig cfg;
  cfg.dt = 0.02;
  cfg.T_final = 30.0;
  auto rep = run_decay(m, evolve::random_smooth_zero_mass(m.grid, 2, 0), cfg);
  EXPECT_NEAR(rep.lambda_fit, gap, 0.15 * gap);
}

TEST(Decay, CsvOutput) {
  auto m = harmonic_fp(8, DegeneracyWeight::constant(1.0));
  EvolutionConfig cfg;
  cfg.dt = 0.1;
  cfg.T_final = 1.0;
  cfg.record_stride = 2;
  auto rep = run_decay(m, evolve::random_smooth_zero_mass(m.grid, 1, 0), cfg);
  EXPECT_EQ(rep.t.size(), 6u);
  std::string file = testing::TempDir() + "decay.csv";
  write_decay_csv(rep, file, "# hdr\n");
  std::ifstream in(file);
  std::string line;
  std::getline(in, line);
  std::getline(in, line);
  EXPECT_EQ(line, "t,norm,dissipation");
  std::remove(file.c_str());
}

TEST(Certificate, Arithmetic) {
  auto c = certified_rate(1 - std::exp(-1.0), 1.0);
  EXPECT_NEAR(c.C, std::exp(1.0), 1e-12);
  EXPECT_NEAR(c.Lambda, 1.0, 1e-12);
  EXPECT_NEAR(c.norm_rate(), 0.5, 1e-12);
  EXPECT_THROW(certified_rate(0.0, 1.0), PreconditionError);
  EXPECT_THROW(certified_rate(-0.1, 1.0), PreconditionError);
  EXPECT_THROW(certified_rate(1.0, 1.0), PreconditionError);
}

TEST(Certificate, BatteryIsBelowFit) {
  auto m = harmonic_fp(16, DegeneracyWeight::constant(1.0));
  EvolutionConfig cfg;
  cfg.dt = 0.05;
  cfg.T_final = 20.0;
  auto slow = run_decay(m, evolve::random_smooth_zero_mass(m.grid, 3, 0), cfg);
  Field tail = slow.final_state;
  tail.values /= phase::weighted_norm(phase::remove_equilibrium(tail));
  EvolutionConfig short_cfg = cfg;
  short_cfg.T_final = 4.0;
  auto bat = eta_battery(m, short_cfg, 8, 17, tail);
  ASSERT_TRUE(bat.certified);
  EXPECT_EQ(bat.etas.size(), 9u);
  for (double e : bat.etas) EXPECT_GE(e, bat.eta_min);
  EXPECT_LE(bat.certificate.norm_rate(), 1.1 * slow.lambda_fit);
}

TEST(Model, VelocityGridMismatch) {
  auto g = phase::make_phase_grid(SpatialGrid::make(Torus1D{1.0}, 4), VelocitySpace::line(8),
                                  Potential::zero());
  EXPECT_THROW(make_model(g, DegeneracyWeight::constant(1.0), collision::bgk(VelocitySpace::line(10))),
               PreconditionError);
  EXPECT_THROW(make_model(g, DegeneracyWeight::constant(1.0), collision::bgk(VelocitySpace::line(8, 5.0))),
               GridMismatch);
}
