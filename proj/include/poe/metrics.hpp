#pragma once

// Divergences between learned and reference distributions.

#include <functional>
#include <random>

#include "poe/variational.hpp"

namespace poe {

using LogDensity = std::function<double(const VectorXd&)>;

struct GridAxis {
  double lo = 0.0, hi = 1.0;
  int n = 16;
};

struct GridSpec {
  std::vector<GridAxis> axes;

  int dim() const { return static_cast<int>(axes.size()); }
  Eigen::Index size() const {
    Eigen::Index s = 1;
    for (const auto& a : axes) s *= a.n;
    return s;
  }

  static GridSpec box(const std::vector<std::pair<double, double>>& limits, int n) {
    GridSpec g;
    for (const auto& [lo, hi] : limits) g.axes.push_back({lo, hi, n});
    return g;
  }
};

inline void validate_grid(const GridSpec& g) {
  require(g.dim() >= 1 && g.dim() <= 3, "grid methods support 1 to 3 dimensions");
  for (const auto& a : g.axes) {
    require(a.lo < a.hi, "grid axis needs lo < hi");
    require(a.n >= 16, "grid axis needs at least 16 points");
  }
}

/// Grid nodes, first axis fastest.
inline MatrixXd grid_points(const GridSpec& g) {
  validate_grid(g);
  MatrixXd X(g.size(), g.dim());
  for (Eigen::Index i = 0; i < X.rows(); ++i) {
    Eigen::Index r = i;
    for (int k = 0; k < g.dim(); ++k) {
      const auto& a = g.axes[static_cast<std::size_t>(k)];
      const auto j = r % a.n;
      r /= a.n;
      X(i, k) = a.lo + (a.hi - a.lo) * static_cast<double>(j) / (a.n - 1);
    }
  }
  return X;
}

/// Tensor-product trapezoid weights matching grid_points.
inline VectorXd grid_weights(const GridSpec& g) {
  validate_grid(g);
  VectorXd w = VectorXd::Ones(g.size());
  for (Eigen::Index i = 0; i < w.size(); ++i) {
    Eigen::Index r = i;
    for (const auto& a : g.axes) {
      const auto j = r % a.n;
      r /= a.n;
      const double h = (a.hi - a.lo) / (a.n - 1);
      w[i] *= (j == 0 || j == a.n - 1) ? 0.5 * h : h;
    }
  }
  return w;
}

inline VectorXd evaluate_on(const LogDensity& f, const MatrixXd& X) {
  VectorXd v(X.rows());
  for (Eigen::Index i = 0; i < X.rows(); ++i) v[i] = f(X.row(i).transpose());
  return v;
}

namespace detail {

constexpr double kDensityFloor = 1e-12;

/// Normalized log density on the grid, floored at log 1e-12.
inline VectorXd normalize_on_grid(const VectorXd& logp, const VectorXd& logw) {
  const double max = logp.maxCoeff();
  if (!std::isfinite(max)) throw NumericalError("density is zero or non-finite on the whole grid");
  const double log_z = log_sum_exp(logp + logw);
  return (logp.array() - log_z).max(std::log(kDensityFloor)).matrix();
}

}  // namespace detail

/// D_{1/2} = -2 log Σ w √(p q) from log densities already evaluated on the
/// grid nodes.
inline double alpha_half_divergence_values(const VectorXd& logp, const VectorXd& logq, const VectorXd& weights) {
  require(logp.size() == weights.size() && logq.size() == weights.size(), "grid value sizes differ");
  const VectorXd logw = weights.array().log().matrix();
  const VectorXd lp = detail::normalize_on_grid(logp, logw);
  const VectorXd lq = detail::normalize_on_grid(logq, logw);
  return -2.0 * log_sum_exp(0.5 * (lp + lq) + logw);
}

inline double alpha_half_divergence(const LogDensity& p, const LogDensity& q, const GridSpec& grid) {
  const MatrixXd X = grid_points(grid);
  return alpha_half_divergence_values(evaluate_on(p, X), evaluate_on(q, X), grid_weights(grid));
}

struct Divergence {
  double value = 0.0;
  double error = 0.0;  ///< quadrature or Monte Carlo standard error
};

/// Grid divergence with the change against a half-resolution grid as its
/// quadrature error.
inline Divergence alpha_half_divergence_with_error(const LogDensity& p, const LogDensity& q, const GridSpec& grid) {
  GridSpec coarse = grid;
  for (auto& a : coarse.axes) a.n = std::max(16, (a.n + 1) / 2);
  const double fine = alpha_half_divergence(p, q, grid);
  return {fine, std::abs(fine - alpha_half_divergence(p, q, coarse))};
}

/// Equal-weight union of two mixtures, a proposal covering both.
inline MixtureVariational combine_mixtures(const MixtureVariational& a, const MixtureVariational& b) {
  require(a.dim() == b.dim(), "mixtures of different dimension");
  MixtureVariational out;
  out.logits.resize(a.size() + b.size());
  out.logits << detail::log_weights(a).array() - std::log(2.0), detail::log_weights(b).array() - std::log(2.0);
  out.components = a.components;
  out.components.insert(out.components.end(), b.components.begin(), b.components.end());
  return out;
}

/// D_{1/2} between two unnormalized densities by self-normalized importance
/// sampling from `proposal`; the error is the delta-method standard error.
inline Divergence alpha_half_divergence_is(const LogDensity& p, const LogDensity& q, const MixtureVariational& proposal,
                                           int n, std::uint64_t seed) {
  require(n >= 2, "importance sampling needs at least 2 draws");
  validate_mixture(proposal);
  const MatrixXd X = mix_sample(proposal, n, seed);
  const auto N = X.rows();
  VectorXd la(N), lb(N), lc(N);
  for (Eigen::Index i = 0; i < N; ++i) {
    const VectorXd x = X.row(i).transpose();
    const double lr = mix_logpdf(proposal, x), lp = p(x), lq = q(x);
    lb[i] = lp - lr;
    lc[i] = lq - lr;
    la[i] = 0.5 * (lp + lq) - lr;
  }
  const double sa = la.maxCoeff(), sb = lb.maxCoeff(), sc = lc.maxCoeff();
  if (!std::isfinite(sb) || !std::isfinite(sc)) throw NumericalError("importance weights vanish for one of the densities");
  if (!std::isfinite(sa)) return {-2.0 * std::log(detail::kDensityFloor), 0.0};
  MatrixXd S(N, 3);
  S.col(0) = (la.array() - sa).exp();
  S.col(1) = (lb.array() - sb).exp();
  S.col(2) = (lc.array() - sc).exp();
  const Eigen::RowVector3d mean = S.colwise().mean();
  const MatrixXd centered = S.rowwise() - mean;
  const Eigen::Matrix3d cov = centered.transpose() * centered / static_cast<double>(N - 1);
  const Eigen::Vector3d grad(1.0 / mean[0], -0.5 / mean[1], -0.5 / mean[2]);
  const double log_bc = std::log(mean[0]) + sa - 0.5 * (std::log(mean[1]) + sb) - 0.5 * (std::log(mean[2]) + sc);
  const double var = grad.dot(cov * grad) / static_cast<double>(N);
  return {-2.0 * log_bc, 2.0 * std::sqrt(std::max(var, 0.0))};
}

// ---------------------------------------------------------------------------
// Maximum mean discrepancy

namespace detail {

/// Row sums of the RBF kernel between the rows of A and B, the diagonal
/// excluded when A and B are the same set.
inline VectorXd kernel_row_sums(const MatrixXd& A, const MatrixXd& B, double gamma, bool same) {
  VectorXd r = VectorXd::Zero(A.rows());
  for (Eigen::Index i = 0; i < A.rows(); ++i)
    for (Eigen::Index j = 0; j < B.rows(); ++j)
      if (!same || i != j) r[i] += std::exp(-gamma * (A.row(i) - B.row(j)).squaredNorm());
  return r;
}

}  // namespace detail

/// Unbiased squared MMD with k(a, b) = exp(-γ‖a - b‖²), one sample per row.
/// The error is the leave-one-out jackknife standard error.
inline Divergence mmd_u_with_error(const MatrixXd& X, const MatrixXd& Y, double gamma) {
  const auto n = X.rows(), m = Y.rows();
  require(n >= 3 && m >= 3, "mmd needs at least 3 samples per set for an error estimate");
  require(X.cols() == Y.cols(), "sample sets of different dimension");
  require(gamma > 0.0, "kernel gamma must be positive");
  const VectorXd rxx = detail::kernel_row_sums(X, X, gamma, true);
  const VectorXd ryy = detail::kernel_row_sums(Y, Y, gamma, true);
  const VectorXd rxy = detail::kernel_row_sums(X, Y, gamma, false);
  const VectorXd ryx = detail::kernel_row_sums(Y, X, gamma, false);
  const double sxx = rxx.sum(), syy = ryy.sum(), sxy = rxy.sum();
  const auto dn = static_cast<double>(n), dm = static_cast<double>(m);
  auto stat = [](double xx, double yy, double xy, double a, double b) {
    return xx / (a * (a - 1.0)) + yy / (b * (b - 1.0)) - 2.0 * xy / (a * b);
  };
  const double value = stat(sxx, syy, sxy, dn, dm);

  auto jackknife_var = [](const VectorXd& theta) {
    const double mean = theta.mean();
    return (theta.size() - 1.0) / theta.size() * (theta.array() - mean).square().sum();
  };
  VectorXd tx(n), ty(m);
  for (Eigen::Index i = 0; i < n; ++i) tx[i] = stat(sxx - 2.0 * rxx[i], syy, sxy - rxy[i], dn - 1.0, dm);
  for (Eigen::Index j = 0; j < m; ++j) ty[j] = stat(sxx, syy - 2.0 * ryy[j], sxy - ryx[j], dn, dm - 1.0);
  return {value, std::sqrt(jackknife_var(tx) + jackknife_var(ty))};
}

inline double mmd_u(const MatrixXd& X, const MatrixXd& Y, double gamma = 0.1) {
  const auto n = X.rows(), m = Y.rows();
  require(n >= 2 && m >= 2, "mmd needs at least 2 samples per set");
  require(X.cols() == Y.cols(), "sample sets of different dimension");
  require(gamma > 0.0, "kernel gamma must be positive");
  const double sxx = detail::kernel_row_sums(X, X, gamma, true).sum();
  const double syy = detail::kernel_row_sums(Y, Y, gamma, true).sum();
  const double sxy = detail::kernel_row_sums(X, Y, gamma, false).sum();
  const auto dn = static_cast<double>(n), dm = static_cast<double>(m);
  return sxx / (dn * (dn - 1.0)) + syy / (dm * (dm - 1.0)) - 2.0 * sxy / (dn * dm);
}

}  // namespace poe
