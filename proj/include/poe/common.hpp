#pragma once

#include <cmath>
#include <limits>
#include <numbers>
#include <optional>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Dense>

namespace poe {

using Eigen::MatrixXd;
using Eigen::VectorXd;
using Vec2 = Eigen::Vector2d;
using Mat2 = Eigen::Matrix2d;

/// Raised when a caller violates an operation's preconditions (dimension
/// mismatch, invalid index, empty input).
struct ContractError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

/// Raised when a gradient is requested through a map that has none.
struct UnsupportedGradient : std::logic_error {
  using std::logic_error::logic_error;
};

/// Raised on divergence or non-finite values during an iterative procedure.
struct NumericalError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// Raised by configuration and CLI validation.
struct ValidationError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

template <class... Ts>
struct overloaded : Ts... {
  using Ts::operator()...;
};
template <class... Ts>
overloaded(Ts...) -> overloaded<Ts...>;

inline constexpr double kPi = std::numbers::pi;
inline constexpr double kLog2Pi = 1.8378770664093454836;
inline constexpr double kSigmaFloor = 1e-4;
inline constexpr double kDefaultDamping = 1e-8;
inline constexpr double kSingularLogDet = -1e9;

inline void require(bool condition, const std::string& message) {
  if (!condition) throw ContractError(message);
}

/// Wraps an angle to (-pi, pi].
inline double wrap_angle(double a) {
  double r = std::remainder(a, 2.0 * kPi);
  if (r <= -kPi) r += 2.0 * kPi;
  return r;
}

inline double log_sum_exp(double a, double b) {
  if (a == -std::numeric_limits<double>::infinity()) return b;
  if (b == -std::numeric_limits<double>::infinity()) return a;
  const double m = std::max(a, b);
  return m + std::log(std::exp(a - m) + std::exp(b - m));
}

inline double log_sum_exp(const VectorXd& v) {
  if (v.size() == 0) return -std::numeric_limits<double>::infinity();
  const double m = v.maxCoeff();
  if (!std::isfinite(m)) return m;
  return m + std::log((v.array() - m).exp().sum());
}

inline VectorXd softmax(const VectorXd& logits) {
  VectorXd p = (logits.array() - logits.maxCoeff()).exp();
  return p / p.sum();
}

inline bool all_finite(const VectorXd& v) { return v.allFinite(); }

/// Standard normal log-CDF, accurate deep into the lower tail.
inline double log_normal_cdf(double z) {
  if (z > -30.0) return std::log(0.5 * std::erfc(-z / std::numbers::sqrt2));
  const double z2 = z * z;
  return -0.5 * z2 - std::log(-z) - 0.5 * kLog2Pi +
         std::log1p(-1.0 / z2 + 3.0 / (z2 * z2));
}

/// phi(z) / Phi(z), the inverse Mills ratio.
inline double normal_hazard(double z) {
  const double log_pdf = -0.5 * z * z - 0.5 * kLog2Pi;
  return std::exp(log_pdf - log_normal_cdf(z));
}

/// Lower-triangular entries of a square matrix, row-major, with the diagonal
/// stored as its logarithm.
inline int tril_size(int n) { return n * (n + 1) / 2; }

inline void pack_log_chol(const MatrixXd& L, double* out) {
  const int n = static_cast<int>(L.rows());
  int k = 0;
  for (int i = 0; i < n; ++i)
    for (int j = 0; j <= i; ++j) out[k++] = (i == j) ? std::log(L(i, i)) : L(i, j);
}

inline MatrixXd unpack_log_chol(const double* in, int n, double min_diag = kSigmaFloor) {
  MatrixXd L = MatrixXd::Zero(n, n);
  int k = 0;
  for (int i = 0; i < n; ++i)
    for (int j = 0; j <= i; ++j) {
      const double v = in[k++];
      L(i, j) = (i == j) ? std::max(std::exp(v), min_diag) : v;
    }
  return L;
}

/// Chain rule from d/dL (dense) to the packed log-Cholesky coordinates.
inline void pack_chol_gradient(const MatrixXd& dL, const MatrixXd& L, double* out) {
  const int n = static_cast<int>(L.rows());
  int k = 0;
  for (int i = 0; i < n; ++i)
    for (int j = 0; j <= i; ++j) out[k++] = (i == j) ? dL(i, i) * L(i, i) : dL(i, j);
}

/// Lower-triangular factor of a symmetric matrix whose eigenvalues are first
/// floored at `floor_eig`.
inline MatrixXd floored_cholesky(const MatrixXd& S, double floor_eig) {
  Eigen::SelfAdjointEigenSolver<MatrixXd> es(0.5 * (S + S.transpose()));
  VectorXd ev = es.eigenvalues().cwiseMax(floor_eig);
  MatrixXd R = es.eigenvectors() * ev.asDiagonal() * es.eigenvectors().transpose();
  Eigen::LLT<MatrixXd> llt(0.5 * (R + R.transpose()));
  return llt.matrixL();
}

}  // namespace poe
