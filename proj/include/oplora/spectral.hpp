#pragma once

// Singular value decomposition and the spectral diagnostics built on it.

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Dense>

#include "oplora/autodiff.hpp"
#include "oplora/errors.hpp"

namespace oplora {

struct SvdResult {
  Matrix u;   // m x k, orthonormal columns
  Vector s;   // k, descending, non-negative
  Matrix vt;  // k x n, orthonormal rows
  int sweeps = 0;
  bool converged = false;
  double off_diagonal_mass = 0.0;  // relative to |M|_F^2, at the last sweep

  Matrix reconstruct() const { return u * s.asDiagonal() * vt; }
};

namespace detail {

inline void require_finite(const Matrix& m, const char* what) {
  if (!m.allFinite()) throw ContractError(std::string(what) + ": input has non-finite entries");
}

// Extends the columns [0, filled) of `q` (orthonormal) to a full orthonormal
// set by Gram-Schmidt on standard basis vectors.
inline void complete_orthonormal(Matrix& q, Eigen::Index filled) {
  const Eigen::Index m = q.rows();
  Eigen::Index e = 0;
  for (Eigen::Index j = filled; j < q.cols(); ++j) {
    for (; e < m; ++e) {
      Vector v = Vector::Unit(m, e);
      for (int pass = 0; pass < 2; ++pass) {
        for (Eigen::Index i = 0; i < j; ++i) v -= q.col(i).dot(v) * q.col(i);
      }
      const double n = v.norm();
      if (n > 1e-6) {
        q.col(j) = v / n;
        ++e;
        break;
      }
    }
  }
}

// One-sided (Hestenes) Jacobi for m >= n.
inline SvdResult jacobi_svd_tall(const Matrix& a) {
  constexpr int kMaxSweeps = 60;
  const Eigen::Index m = a.rows(), n = a.cols();
  const double pair_tol = static_cast<double>(std::max<Eigen::Index>(m, 1)) *
                          std::numeric_limits<double>::epsilon();
  Matrix w = a;
  Matrix v = Matrix::Identity(n, n);
  const double total = a.squaredNorm();

  SvdResult out;
  if (total == 0.0) {
    out.converged = true;
  }
  for (int sweep = 0; sweep < kMaxSweeps && !out.converged; ++sweep) {
    out.sweeps = sweep + 1;
    double off_mass = 0.0;
    bool rotated = false;
    for (Eigen::Index p = 0; p + 1 < n; ++p) {
      for (Eigen::Index q = p + 1; q < n; ++q) {
        const double alpha = w.col(p).squaredNorm();
        const double beta = w.col(q).squaredNorm();
        const double gamma = w.col(p).dot(w.col(q));
        off_mass += gamma * gamma;
        if (gamma == 0.0 || std::abs(gamma) <= pair_tol * std::sqrt(alpha * beta)) continue;
        rotated = true;
        const double zeta = (beta - alpha) / (2.0 * gamma);
        const double t = std::copysign(1.0, zeta) / (std::abs(zeta) + std::sqrt(1.0 + zeta * zeta));
        const double c = 1.0 / std::sqrt(1.0 + t * t);
        const double s = c * t;
        for (Eigen::Index i = 0; i < m; ++i) {
          const double wp = w(i, p), wq = w(i, q);
          w(i, p) = c * wp - s * wq;
          w(i, q) = s * wp + c * wq;
        }
        for (Eigen::Index i = 0; i < n; ++i) {
          const double vp = v(i, p), vq = v(i, q);
          v(i, p) = c * vp - s * vq;
          v(i, q) = s * vp + c * vq;
        }
      }
    }
    // Converged once every pair passes the relative orthogonality test; a
    // global Gram-mass bound alone leaves vectors of tiny singular values skewed.
    out.off_diagonal_mass = std::sqrt(off_mass) / (total > 0.0 ? total : 1.0);
    if (!rotated) out.converged = true;
  }

  Vector s = w.colwise().norm();
  std::vector<Eigen::Index> order(static_cast<std::size_t>(n));
  std::iota(order.begin(), order.end(), Eigen::Index{0});
  std::stable_sort(order.begin(), order.end(), [&](auto i, auto j) { return s(i) > s(j); });

  out.s.resize(n);
  out.u.resize(m, n);
  Matrix vs(n, n);
  const double s_max = n > 0 ? s(order[0]) : 0.0;
  Eigen::Index nonzero = 0;
  for (Eigen::Index k = 0; k < n; ++k) {
    const auto src = order[static_cast<std::size_t>(k)];
    out.s(k) = s(src);
    vs.col(k) = v.col(src);
    if (s(src) > std::numeric_limits<double>::epsilon() * s_max * static_cast<double>(m) && s(src) > 0.0) {
      out.u.col(k) = w.col(src) / s(src);
      nonzero = k + 1;
    }
  }
  // Columns past `nonzero` are numerically zero and carry no direction.
  complete_orthonormal(out.u, nonzero);
  out.vt = vs.transpose();
  return out;
}

}  // namespace detail

/// Thin SVD by one-sided Jacobi rotations: u (m x k), s (k), vt (k x n), k = min(m, n).
inline SvdResult svd(const Matrix& m) {
  detail::require_finite(m, "svd");
  if (m.rows() >= m.cols()) return detail::jacobi_svd_tall(m);
  SvdResult t = detail::jacobi_svd_tall(m.transpose());
  return SvdResult{t.vt.transpose(), std::move(t.s), t.u.transpose(), t.sweeps, t.converged,
                   t.off_diagonal_mass};
}

inline Vector singular_values(const Matrix& m) { return svd(m).s; }

/// Singular values of the product b * a (b: m x r, a: r x n) without forming
/// it: b = U S V^T gives sv(b a) = sv(S V^T a), an r x n problem.
inline Vector product_singular_values(const Matrix& b, const Matrix& a) {
  if (b.cols() != a.rows()) {
    throw DimensionError("product_singular_values: " + shape_str(b) + " x " + shape_str(a));
  }
  if (b.cols() >= std::min(b.rows(), a.cols())) return singular_values(b * a);
  const SvdResult sb = svd(b);
  const Matrix core = sb.s.asDiagonal() * sb.vt * a;
  return singular_values(core);
}

struct RankApproximation {
  Matrix matrix;
  double error = 0.0;  // squared Frobenius error, sum of discarded s_i^2
};

/// Best rank-r approximation (truncated SVD) and its squared error.
inline RankApproximation best_rank_r(const Matrix& m, Eigen::Index r) {
  const Eigen::Index k = std::min(m.rows(), m.cols());
  if (r < 1 || r > k) {
    throw ContractError("best_rank_r: rank " + std::to_string(r) + " outside [1, " + std::to_string(k) + "]");
  }
  const SvdResult d = svd(m);
  RankApproximation out;
  out.matrix = d.u.leftCols(r) * d.s.head(r).asDiagonal() * d.vt.topRows(r);
  out.error = d.s.tail(k - r).squaredNorm();
  return out;
}

enum class SpectrumNormalization { sum, max };

struct EffectiveRank {
  double value = 1.0;
  bool degenerate = false;  // all-zero spectrum; value fixed to 1
};

/// exp of the entropy of the normalised spectrum; 0 log 0 := 0.
///
/// `sum` divides by the total (a probability distribution, bounded by rank).
/// `max` divides by the largest value; it is an alternative diagnostic only.
inline EffectiveRank effective_rank_from_spectrum(const Vector& s,
                                                  SpectrumNormalization norm = SpectrumNormalization::sum) {
  const double denom = norm == SpectrumNormalization::sum ? s.sum() : (s.size() ? s.maxCoeff() : 0.0);
  if (!(denom > 0.0)) return {1.0, true};
  double entropy = 0.0;
  for (Eigen::Index i = 0; i < s.size(); ++i) {
    const double p = s(i) / denom;
    if (p > 0.0) entropy -= p * std::log(p);
  }
  return {std::exp(entropy), false};
}

inline EffectiveRank effective_rank(const Matrix& m,
                                    SpectrumNormalization norm = SpectrumNormalization::sum) {
  return effective_rank_from_spectrum(singular_values(m), norm);
}

/// s_max / s_min over singular values above 1e-12 * s_max. Returns +inf when
/// only s_max clears the tolerance in a matrix with more than one singular value.
inline double condition_number(const Matrix& m) {
  const Vector s = singular_values(m);
  if (s.size() == 0 || s(0) == 0.0) throw ContractError("condition_number: zero matrix");
  const double tol = 1e-12 * s(0);
  double s_min = s(0);
  Eigen::Index kept = 0;
  for (Eigen::Index i = 0; i < s.size(); ++i) {
    if (s(i) > tol) {
      s_min = s(i);
      ++kept;
    }
  }
  if (kept == 1 && s.size() > 1) return std::numeric_limits<double>::infinity();
  return s(0) / s_min;
}

/// Number of singular values above tol * s_max.
inline Eigen::Index numerical_rank(const Matrix& m, double tol = 1e-9) {
  const Vector s = singular_values(m);
  if (s.size() == 0 || s(0) == 0.0) return 0;
  return (s.array() > tol * s(0)).count();
}

}  // namespace oplora
