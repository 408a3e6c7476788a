#pragma once

#include <Eigen/Dense>
#include <cmath>
#include <fstream>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "kinlab/common.hpp"
#include "kinlab/linalg.hpp"
#include "kinlab/phase.hpp"

namespace kinlab::collision {

using Eigen::MatrixXd;
using Eigen::VectorXd;
using phase::VelocitySpace;

struct CollisionOperator {
  enum class Kind { Bgk, Scattering, FokkerPlanck };
  Kind kind = Kind::Bgk;
  VelocitySpace vel;
  MatrixXd kernel;     // k(v_i, v_j); BGK uses k(v, v*) = M(v)
  MatrixXd A;          // Fokker-Planck factor, faces × nodes
  VectorXd face_dv;    // quadrature weight per face
  MatrixXd L;          // assembled operator on nodal values
  VectorXd weight;     // coercivity weight w(v_j)

  std::size_t size() const { return vel.size(); }

  VectorXd M() const { return Eigen::Map<const VectorXd>(vel.M.data(), vel.size()); }
  VectorXd dv() const { return Eigen::Map<const VectorXd>(vel.dv.data(), vel.size()); }

  // Total outgoing jump rate at node j: Σ_i k(v_i, v_j) dv_i.
  double jump_rate(std::size_t j) const {
    if (kind == Kind::FokkerPlanck) return 0.0;
    double s = 0.0;
    for (std::size_t i = 0; i < size(); ++i) s += kernel(i, j) * vel.dv[i];
    return s;
  }

  CollisionOperator scaled(double c) const {
    require(c > 0, "scale must be > 0");
    CollisionOperator o = *this;
    o.kernel *= c;
    o.A *= std::sqrt(c);
    o.L *= c;
    return o;
  }

  void set_weight(const VectorXd& w) {
    require(static_cast<std::size_t>(w.size()) == size(), "weight size mismatch");
    require(w.minCoeff() > 0, "coercivity weight must be positive");
    weight = w;
  }
};

inline MatrixXd kernel_matrix_to_L(const VelocitySpace& vel, const MatrixXd& k) {
  const std::size_t n = vel.size();
  MatrixXd L = MatrixXd::Zero(n, n);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j) {
      L(i, j) += k(i, j) * vel.dv[j];
      L(j, j) -= k(i, j) * vel.dv[i];
    }
  return L;
}

inline CollisionOperator bgk(const VelocitySpace& vel) {
  CollisionOperator op;
  op.kind = CollisionOperator::Kind::Bgk;
  op.vel = vel;
  const std::size_t n = vel.size();
  op.kernel.resize(n, n);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j) op.kernel(i, j) = vel.M[i];
  // ⟨g⟩M − g, written directly so the equilibrium is exact
  op.L = -MatrixXd::Identity(n, n);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j) op.L(i, j) += vel.M[i] * vel.dv[j];
  op.weight = VectorXd::Ones(n);
  return op;
}

inline CollisionOperator scattering(const VelocitySpace& vel, const MatrixXd& k) {
  const std::size_t n = vel.size();
  require(static_cast<std::size_t>(k.rows()) == n && static_cast<std::size_t>(k.cols()) == n,
          "kernel must be |V| x |V|");
  require(k.minCoeff() >= 0.0 && k.allFinite(), "kernel entries must be finite and >= 0");
  CollisionOperator op;
  op.kind = CollisionOperator::Kind::Scattering;
  op.vel = vel;
  op.kernel = k;
  op.L = kernel_matrix_to_L(vel, k);
  op.weight = VectorXd::Ones(n);
  return op;
}

// ℒ = −A*A with (Ag)_f = √M_f (h_{j+1} − h_j)/Δ, h = g/M, zero flux at truncation.
inline CollisionOperator fokker_planck(const VelocitySpace& vel) {
  using K = VelocitySpace::Kind;
  require(vel.kind == K::Line || vel.kind == K::Circle,
          "Fokker-Planck needs a truncated line or circle velocity space");
  const std::size_t n = vel.size();
  CollisionOperator op;
  op.kind = CollisionOperator::Kind::FokkerPlanck;
  op.vel = vel;
  const double h = vel.spacing;
  std::size_t nf = vel.kind == K::Line ? n - 1 : n;
  op.A = MatrixXd::Zero(nf, n);
  op.face_dv = VectorXd::Constant(nf, h);
  double Zq = 0.0;  // node normalization, reused for face values
  if (vel.kind == K::Line)
    for (std::size_t j = 0; j < n; ++j) Zq += std::exp(-0.5 * vel.v[j].x * vel.v[j].x) * h;
  for (std::size_t f = 0; f < nf; ++f) {
    std::size_t a = f, b = (f + 1) % n;
    double mf;
    if (vel.kind == K::Line) {
      double vf = 0.5 * (vel.v[a].x + vel.v[b].x);
      mf = std::exp(-0.5 * vf * vf) / Zq;
    } else {
      mf = vel.M[a];
    }
    double s = std::sqrt(mf) / h;
    op.A(f, b) += s / vel.M[b];
    op.A(f, a) -= s / vel.M[a];
  }
  // A* = diag(M) Aᵀ diag(face_dv) diag(dv)⁻¹ ; all dv equal to h here.
  op.L = -(VectorXd(op.M()).asDiagonal() * op.A.transpose() * op.A);
  op.weight = VectorXd::Ones(n);
  return op;
}

inline void check_profile(const CollisionOperator& L, const VectorXd& g) {
  if (static_cast<std::size_t>(g.size()) != L.size())
    throw GridMismatch("velocity profile size does not match the operator");
}

inline VectorXd apply(const CollisionOperator& L, const VectorXd& g) {
  check_profile(L, g);
  return L.L * g;
}

// −⟨g, ℒg⟩ in L²(M⁻¹)
inline double dissipation_v(const CollisionOperator& L, const VectorXd& g) {
  check_profile(L, g);
  if (L.kind == CollisionOperator::Kind::FokkerPlanck) {
    VectorXd a = L.A * g;
    return a.cwiseAbs2().dot(L.face_dv);
  }
  VectorXd Lg = L.L * g;
  double s = 0.0;
  for (std::size_t j = 0; j < L.size(); ++j) s -= g(j) * Lg(j) * L.vel.dv[j] / L.vel.M[j];
  return s;
}

struct SpectralGapReport {
  double lambda1 = 0.0;
  VectorXd witness;  // velocity profile, ⊥ M in L²(M⁻¹)
};

// Symmetric dissipation form in h = g/M variables.
inline MatrixXd dissipation_form(const CollisionOperator& L) {
  VectorXd dv = L.dv(), M = L.M();
  MatrixXd S = -(dv.asDiagonal() * L.L * M.asDiagonal());
  return 0.5 * (S + S.transpose());
}

inline SpectralGapReport spectral_gap(const CollisionOperator& L) {
  require(L.size() >= 2, "spectral gap needs at least two velocity nodes");
  VectorXd M = L.M(), dv = L.dv();
  VectorXd W = M.cwiseProduct(dv).cwiseProduct(L.weight);
  VectorXd c = M.cwiseProduct(dv);
  auto ep = linalg::constrained_min_eig(dissipation_form(L), W, c, 1);
  SpectralGapReport r;
  r.lambda1 = std::max(0.0, ep[0].value);
  r.witness = M.cwiseProduct(ep[0].vector);
  return r;
}

struct CheegerReport {
  double phi = 0.0;
  std::vector<int> subset;  // witness A
};

inline CheegerReport cheeger_constant(const CollisionOperator& L, int cap = 20) {
  require(L.kind != CollisionOperator::Kind::FokkerPlanck,
          "Cheeger constant needs a jump kernel");
  const int m = static_cast<int>(L.size());
  if (m > cap)
    throw CapacityError("Cheeger brute force capped at " + std::to_string(cap) +
                        " velocity nodes; got " + std::to_string(m));
  require(m >= 2, "Cheeger constant needs at least two nodes");
  const auto& M = L.vel.M;
  const auto& dv = L.vel.dv;
  // c(i,j) = √(q_ij M_i M_j) dv_i dv_j with q_ij = k_ij M_j
  MatrixXd c(m, m);
  for (int i = 0; i < m; ++i)
    for (int j = 0; j < m; ++j)
      c(i, j) = (i == j) ? 0.0
                         : std::sqrt(L.kernel(i, j) * M[j] * M[i] * M[j]) * dv[i] * dv[j];
  double total = 0.0;
  for (int i = 0; i < m; ++i) total += M[i] * dv[i];
  // Gray-code walk: cut(A) and |A|_M updated in O(m) per flip.
  std::vector<char> inA(m, 0);
  double cut = 0.0, massA = 0.0;
  CheegerReport best;
  best.phi = std::numeric_limits<double>::infinity();
  std::uint64_t prev = 0;
  const std::uint64_t count = 1ULL << m;
  for (std::uint64_t s = 1; s < count; ++s) {
    std::uint64_t gray = s ^ (s >> 1);
    std::uint64_t diff = gray ^ prev;
    int i = __builtin_ctzll(diff);
    prev = gray;
    if (!inA[i]) {
      for (int j = 0; j < m; ++j) {
        if (j == i) continue;
        if (inA[j]) cut -= c(j, i);
        else cut += c(i, j);
      }
      inA[i] = 1;
      massA += M[i] * dv[i];
    } else {
      for (int j = 0; j < m; ++j) {
        if (j == i) continue;
        if (inA[j]) cut += c(j, i);
        else cut -= c(i, j);
      }
      inA[i] = 0;
      massA -= M[i] * dv[i];
    }
    if (gray == count - 1) continue;  // A = V is not proper
    double denom = std::min(massA, total - massA);
    double val = cut / denom;
    if (val < best.phi) {
      best.phi = val;
      best.subset.clear();
      for (int j = 0; j < m; ++j)
        if (inA[j]) best.subset.push_back(j);
    }
  }
  best.phi = std::max(0.0, best.phi);
  return best;
}

struct BalanceReport {
  bool pass = false;
  double max_violation = 0.0;
};

inline BalanceReport detailed_balance_check(const CollisionOperator& L, double tol = 1e-12) {
  require(L.kind != CollisionOperator::Kind::FokkerPlanck, "detailed balance needs a kernel");
  BalanceReport r;
  const std::size_t n = L.size();
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j)
      r.max_violation = std::max(r.max_violation, std::abs(L.kernel(i, j) * L.vel.M[j] -
                                                           L.kernel(j, i) * L.vel.M[i]));
  r.pass = r.max_violation <= tol;
  return r;
}

struct Gamma2Report {
  double min_value = 0.0;
  VectorXd pointwise;
  bool applicable = true;  // false for non-reversible kernels
};

// min over v of M ℒ(f²/M) − 2 f ℒf
inline Gamma2Report gamma2_check(const CollisionOperator& L, const VectorXd& f) {
  check_profile(L, f);
  require(f.minCoeff() > 0, "Γ2 check needs a positive profile");
  Gamma2Report r;
  if (L.kind != CollisionOperator::Kind::FokkerPlanck)
    r.applicable = detailed_balance_check(L, 1e-10).pass;
  VectorXd M = L.M();
  VectorXd q = f.cwiseAbs2().cwiseQuotient(M);
  if (L.kind == CollisionOperator::Kind::FokkerPlanck) {
    // factored form: M_j/Δ² Σ_faces m_f (Δh)², identical to the expanded form in exact arithmetic
    VectorXd a = L.A * f;
    r.pointwise = VectorXd::Zero(L.size());
    for (Eigen::Index fc = 0; fc < L.A.rows(); ++fc)
      for (Eigen::Index j = 0; j < L.A.cols(); ++j)
        if (L.A(fc, j) != 0.0) r.pointwise(j) += M(j) * a(fc) * a(fc) * L.face_dv(fc) /
                                                (L.vel.dv[j]);
  } else {
    r.pointwise = M.cwiseProduct(L.L * q) - 2.0 * f.cwiseProduct(L.L * f);
  }
  r.min_value = r.pointwise.minCoeff();
  return r;
}

// Discrete set v_i = i − (m−1)/2 with random M; k_ij = q_ij / M_j, q symmetric and irreducible.
inline CollisionOperator random_reversible_kernel(int m, std::uint64_t seed) {
  require(m >= 2, "random kernel needs m >= 2");
  auto rng = stream_rng(seed, static_cast<std::uint64_t>(m));
  std::uniform_real_distribution<double> U(0.0, 1.0);
  std::vector<Vec2> pts;
  std::vector<double> w;
  for (int i = 0; i < m; ++i) {
    pts.push_back({i - 0.5 * (m - 1), 0.0});
    w.push_back(0.2 + U(rng));
  }
  // evenness: mirror weights so M(v) = M(−v)
  for (int i = 0; i < m / 2; ++i) w[m - 1 - i] = w[i];
  auto vel = VelocitySpace::discrete(pts, w, 1);
  MatrixXd q = MatrixXd::Zero(m, m);
  for (int i = 0; i < m; ++i)
    for (int j = i + 1; j < m; ++j) {
      double val = (U(rng) < 0.5 || j == i + 1) ? U(rng) + 0.05 : 0.0;
      q(i, j) = q(j, i) = val;
    }
  MatrixXd k(m, m);
  for (int i = 0; i < m; ++i)
    for (int j = 0; j < m; ++j) k(i, j) = q(i, j) / vel.M[j];
  return scattering(vel, k);
}

// Kernels that violate detailed balance, for negative controls.
inline CollisionOperator random_kernel(int m, std::uint64_t seed) {
  auto base = random_reversible_kernel(m, seed);
  auto rng = stream_rng(seed ^ 0xabcdefULL, static_cast<std::uint64_t>(m));
  std::uniform_real_distribution<double> U(0.0, 2.0);
  MatrixXd k = base.kernel;
  for (int i = 0; i < m; ++i)
    for (int j = 0; j < m; ++j) k(i, j) *= U(rng);
  return scattering(base.vel, k);
}

inline void export_kernel_csv(const MatrixXd& k, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw PreconditionError("cannot write " + path);
  out.precision(17);
  for (Eigen::Index i = 0; i < k.rows(); ++i) {
    for (Eigen::Index j = 0; j < k.cols(); ++j) out << (j ? "," : "") << k(i, j);
    out << "\n";
  }
}

inline MatrixXd import_kernel_csv(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw PreconditionError("cannot open kernel " + path);
  std::vector<std::vector<double>> rows;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty() || line[0] == '#') continue;
    std::stringstream ss(line);
    std::string cell;
    std::vector<double> r;
    while (std::getline(ss, cell, ',')) r.push_back(std::stod(cell));
    rows.push_back(r);
  }
  require(!rows.empty(), "empty kernel file");
  const std::size_t n = rows.size();
  MatrixXd k(n, n);
  for (std::size_t i = 0; i < n; ++i) {
    require(rows[i].size() == n, "kernel CSV must be square");
    for (std::size_t j = 0; j < n; ++j) k(i, j) = rows[i][j];
  }
  return k;
}

}  // namespace kinlab::collision
