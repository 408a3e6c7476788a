#pragma once

#include <Eigen/Dense>
#include <Eigen/Sparse>
#include <algorithm>
#include <complex>
#include <functional>
#include <random>
#include <vector>

#include <lapacke.h>

#include "kinlab/common.hpp"

namespace kinlab::linalg {

using Eigen::MatrixXd;
using Eigen::VectorXd;
using SpMat = Eigen::SparseMatrix<double>;

struct EigenPair {
  double value = 0.0;
  VectorXd vector;
};

// Smallest eigenpairs of S u = λ diag(W) u restricted to {cᵀu = 0}.
// S symmetric, W > 0. Returned vectors are W-normalized.
inline std::vector<EigenPair> constrained_min_eig(const MatrixXd& S, const VectorXd& W,
                                                  const VectorXd& c, int count = 1) {
  const Eigen::Index n = S.rows();
  require(n >= 2 && S.cols() == n && W.size() == n && c.size() == n,
          "constrained_min_eig: dimension mismatch");
  require(W.minCoeff() > 0.0, "constrained_min_eig: weights must be positive");
  VectorXd isw = W.cwiseSqrt().cwiseInverse();
  MatrixXd Sp = isw.asDiagonal() * S * isw.asDiagonal();
  Sp = 0.5 * (Sp + Sp.transpose());
  VectorXd cp = isw.cwiseProduct(c);
  Eigen::HouseholderQR<MatrixXd> qr(cp);
  MatrixXd Q = qr.householderQ();
  MatrixXd B = Q.rightCols(n - 1);
  MatrixXd R = B.transpose() * Sp * B;
  Eigen::SelfAdjointEigenSolver<MatrixXd> es(0.5 * (R + R.transpose()));
  if (es.info() != Eigen::Success) throw NumericalError("symmetric eigensolve failed");
  std::vector<EigenPair> out;
  for (int k = 0; k < std::min<int>(count, static_cast<int>(n - 1)); ++k) {
    VectorXd y = B * es.eigenvectors().col(k);
    out.push_back({es.eigenvalues()(k), isw.cwiseProduct(y)});
  }
  return out;
}

// Full spectrum of a general real matrix (LAPACK dgeev).
inline std::vector<std::complex<double>> eigenvalues(const MatrixXd& A) {
  const lapack_int n = static_cast<lapack_int>(A.rows());
  MatrixXd a = A;
  std::vector<double> wr(n), wi(n);
  double dummy = 0.0;
  lapack_int info = LAPACKE_dgeev(LAPACK_COL_MAJOR, 'N', 'N', n, a.data(), n, wr.data(),
                                  wi.data(), &dummy, 1, &dummy, 1);
  if (info != 0) throw NumericalError("dgeev failed with info " + std::to_string(info));
  std::vector<std::complex<double>> ev(n);
  for (lapack_int i = 0; i < n; ++i) ev[i] = {wr[i], wi[i]};
  return ev;
}

struct ComplexEigenPair {
  std::complex<double> value;
  Eigen::VectorXcd vector;
};

// Eigenpair with the largest real part (ties broken by smaller |imag|).
inline ComplexEigenPair rightmost_eigenpair(const MatrixXd& A) {
  const lapack_int n = static_cast<lapack_int>(A.rows());
  MatrixXd a = A;
  std::vector<double> wr(n), wi(n);
  MatrixXd vr(n, n);
  double dummy = 0.0;
  lapack_int info = LAPACKE_dgeev(LAPACK_COL_MAJOR, 'N', 'V', n, a.data(), n, wr.data(),
                                  wi.data(), &dummy, 1, vr.data(), n);
  if (info != 0) throw NumericalError("dgeev failed with info " + std::to_string(info));
  lapack_int best = 0;
  for (lapack_int i = 1; i < n; ++i) {
    if (wr[i] > wr[best] + 1e-12 ||
        (std::abs(wr[i] - wr[best]) <= 1e-12 && std::abs(wi[i]) < std::abs(wi[best])))
      best = i;
  }
  ComplexEigenPair out;
  out.value = {wr[best], wi[best]};
  out.vector.resize(n);
  if (wi[best] == 0.0) {
    for (lapack_int r = 0; r < n; ++r) out.vector(r) = vr(r, best);
  } else {
    // dgeev stores conjugate pairs as (re, im) in consecutive columns.
    lapack_int j = best;
    double sgn = 1.0;
    if (wi[best] < 0.0) {
      j = best - 1;
      sgn = -1.0;
    }
    for (lapack_int r = 0; r < n; ++r) out.vector(r) = {vr(r, j), sgn * vr(r, j + 1)};
  }
  return out;
}

// Rightmost eigenvalues of a generator G, using only products with P ≈ exp(tau·G).
// Ritz values μ of P map to λ = log(μ)/tau; largest |μ| ⇔ largest Re λ.
struct ArnoldiResult {
  std::complex<double> rightmost;
  VectorXd witness;
  int iterations = 0;
  bool converged = false;
};

inline ArnoldiResult arnoldi_rightmost(const std::function<VectorXd(const VectorXd&)>& propagate,
                                       const VectorXd& start, double tau, int m = 30,
                                       int max_restarts = 30, double tol = 1e-8) {
  const Eigen::Index n = start.size();
  ArnoldiResult res;
  VectorXd v0 = start / start.norm();
  std::complex<double> prev{1e300, 0.0};
  for (int r = 0; r < max_restarts; ++r) {
    MatrixXd V = MatrixXd::Zero(n, m + 1);
    MatrixXd H = MatrixXd::Zero(m + 1, m);
    V.col(0) = v0;
    int k_used = m;
    for (int k = 0; k < m; ++k) {
      VectorXd w = propagate(V.col(k));
      for (int pass = 0; pass < 2; ++pass) {
        for (int i = 0; i <= k; ++i) {
          double h = V.col(i).dot(w);
          H(i, k) += h;
          w -= h * V.col(i);
        }
      }
      double beta = w.norm();
      H(k + 1, k) = beta;
      if (beta < 1e-14) {
        k_used = k + 1;
        break;
      }
      V.col(k + 1) = w / beta;
    }
    MatrixXd Hk = H.topLeftCorner(k_used, k_used);
    Eigen::EigenSolver<MatrixXd> es(Hk);
    int best = 0;
    for (int i = 1; i < k_used; ++i)
      if (std::abs(es.eigenvalues()(i)) > std::abs(es.eigenvalues()(best))) best = i;
    std::complex<double> mu = es.eigenvalues()(best);
    Eigen::VectorXcd y = es.eigenvectors().col(best);
    Eigen::VectorXcd x = V.leftCols(k_used).cast<std::complex<double>>() * y;
    VectorXd xr = x.real();
    if (xr.norm() < 1e-8 * x.norm()) xr = x.imag();
    res.rightmost = std::log(mu) / tau;
    res.witness = xr / xr.norm();
    res.iterations = r + 1;
    if (std::abs(res.rightmost - prev) <= tol * std::max(1.0, std::abs(res.rightmost))) {
      res.converged = true;
      break;
    }
    prev = res.rightmost;
    // Restart from the Ritz direction plus a little of the previous start to keep pairs.
    v0 = x.real() + x.imag();
    v0 /= v0.norm();
  }
  return res;
}

}  // namespace kinlab::linalg
