#pragma once

// Parametric (possibly unnormalized) densities over task-space values.
//
// Every family is stored in its natural form but exposes a flat unconstrained
// parameter vector (log scales, log-diagonal Cholesky factors, logit weights)
// so that training is plain unconstrained gradient ascent.

#include <memory>
#include <string>
#include <variant>

#include "poe/common.hpp"

namespace poe {

/// Copyable owning pointer, used for the recursive uni-Gauss family.
template <class T>
class Boxed {
 public:
  Boxed() = default;
  Boxed(T value) : ptr_(std::make_unique<T>(std::move(value))) {}
  Boxed(const Boxed& o) : ptr_(o.ptr_ ? std::make_unique<T>(*o.ptr_) : nullptr) {}
  Boxed(Boxed&&) noexcept = default;
  Boxed& operator=(const Boxed& o) {
    if (this != &o) ptr_ = o.ptr_ ? std::make_unique<T>(*o.ptr_) : nullptr;
    return *this;
  }
  Boxed& operator=(Boxed&&) noexcept = default;
  const T& operator*() const { return *ptr_; }
  const T* operator->() const { return ptr_.get(); }
  T& operator*() { return *ptr_; }

 private:
  std::unique_ptr<T> ptr_;
};

struct GaussianExpert {
  VectorXd mean;
  MatrixXd chol;  ///< lower-triangular, positive diagonal
};

struct IsotropicGaussianExpert {
  VectorXd mean;
  double log_sigma = 0.0;
};

/// Sigma = diag(exp(2 log_sigma)) + factor factor^T.
struct LowRankGaussianExpert {
  VectorXd mean;
  VectorXd log_sigma;
  MatrixXd factor;
};

struct ScalarGaussianExpert {
  double mean = 0.0;
  double log_sigma = 0.0;
};

enum class BoundSide { Below, Above };

/// log P(x <= b) (Below) or log P(x >= b) (Above), x ~ N(y, sigma^2).
struct CdfExpert {
  double bound = 0.0;
  double log_sigma = 0.0;
  BoundSide side = BoundSide::Below;
};

/// Normalized RBF features over a phase in [0, 1].
struct PrompBasis {
  int n_basis = 5;
  int n_steps = 10;
  int dims = 1;
};

/// Gaussian over a whole trajectory y (n_steps x dims, time-major) induced by
/// a Gaussian weight vector: N(Psi^T mu_w, Psi^T Sigma_w Psi + sigma_x^2 I).
struct PrompExpert {
  VectorXd weight_mean;
  MatrixXd weight_chol;
  double log_sigma_obs = -2.0;
  PrompBasis basis;
};

struct UniGaussExpert;

using Expert = std::variant<GaussianExpert, IsotropicGaussianExpert, LowRankGaussianExpert,
                            ScalarGaussianExpert, CdfExpert, PrompExpert, UniGaussExpert>;

/// pi * p(y) + (1 - pi) * p_wide(y), where p_wide is the inner family with its
/// scale multiplied by `inflate`.
struct UniGaussExpert {
  Boxed<Expert> inner;
  double logit_weight = 2.0;
  double inflate = 10.0;
};

struct FieldSlice {
  std::string name;
  int offset;
  int size;
};

// ---------------------------------------------------------------------------
// ProMP basis

/// Basis matrix Psi (n_basis*dims x n_steps*dims), block-diagonal across dims.
inline MatrixXd promp_basis_matrix(const PrompBasis& b) {
  require(b.n_basis >= 1 && b.n_steps >= 1 && b.dims >= 1, "invalid ProMP basis");
  const double spacing = b.n_basis > 1 ? 1.0 / (b.n_basis - 1) : 1.0;
  const double width = 1.5 * spacing;
  MatrixXd phi(b.n_basis, b.n_steps);
  for (int t = 0; t < b.n_steps; ++t) {
    const double phase = b.n_steps > 1 ? static_cast<double>(t) / (b.n_steps - 1) : 0.0;
    for (int k = 0; k < b.n_basis; ++k) {
      const double c = b.n_basis > 1 ? k * spacing : 0.5;
      phi(k, t) = std::exp(-0.5 * (phase - c) * (phase - c) / (width * width));
    }
    phi.col(t) /= phi.col(t).sum();
  }
  MatrixXd psi = MatrixXd::Zero(b.n_basis * b.dims, b.n_steps * b.dims);
  for (int d = 0; d < b.dims; ++d)
    for (int t = 0; t < b.n_steps; ++t)
      for (int k = 0; k < b.n_basis; ++k) psi(d * b.n_basis + k, t * b.dims + d) = phi(k, t);
  return psi;
}

struct GaussianMoments {
  VectorXd mean;
  MatrixXd cov;
};

/// N(Psi^T mu_w, Psi^T Sigma_w Psi + sigma_x^2 I).
inline GaussianMoments promp_marginal(const MatrixXd& psi, const VectorXd& weight_mean,
                                      const MatrixXd& weight_cov, double sigma_obs) {
  require(psi.rows() == weight_mean.size(), "basis rows must match weight dimension");
  require(weight_cov.rows() == weight_mean.size() && weight_cov.cols() == weight_mean.size(),
          "weight covariance must be square and match the weight dimension");
  GaussianMoments g;
  g.mean = psi.transpose() * weight_mean;
  g.cov = psi.transpose() * weight_cov * psi;
  g.cov.diagonal().array() += sigma_obs * sigma_obs;
  return g;
}

// ---------------------------------------------------------------------------
// Structure queries

inline int expert_dim(const Expert& e) {
  return std::visit(overloaded{
                        [](const GaussianExpert& g) { return static_cast<int>(g.mean.size()); },
                        [](const IsotropicGaussianExpert& g) { return static_cast<int>(g.mean.size()); },
                        [](const LowRankGaussianExpert& g) { return static_cast<int>(g.mean.size()); },
                        [](const ScalarGaussianExpert&) { return 1; },
                        [](const CdfExpert&) { return 1; },
                        [](const PrompExpert& p) { return p.basis.n_steps * p.basis.dims; },
                        [](const UniGaussExpert& u) { return expert_dim(*u.inner); },
                    },
                    e);
}

inline std::string family_name(const Expert& e) {
  return std::visit(overloaded{
                        [](const GaussianExpert&) { return std::string("gaussian"); },
                        [](const IsotropicGaussianExpert&) { return std::string("isotropic_gaussian"); },
                        [](const LowRankGaussianExpert&) { return std::string("low_rank_gaussian"); },
                        [](const ScalarGaussianExpert&) { return std::string("scalar_gaussian"); },
                        [](const CdfExpert&) { return std::string("cdf"); },
                        [](const PrompExpert&) { return std::string("promp"); },
                        [](const UniGaussExpert&) { return std::string("uni_gauss"); },
                    },
                    e);
}

/// Named slices of the flat parameter vector.
inline std::vector<FieldSlice> field_layout(const Expert& e) {
  return std::visit(
      overloaded{
          [](const GaussianExpert& g) {
            const int d = static_cast<int>(g.mean.size());
            return std::vector<FieldSlice>{{"mean", 0, d}, {"chol", d, tril_size(d)}};
          },
          [](const IsotropicGaussianExpert& g) {
            const int d = static_cast<int>(g.mean.size());
            return std::vector<FieldSlice>{{"mean", 0, d}, {"log_sigma", d, 1}};
          },
          [](const LowRankGaussianExpert& g) {
            const int d = static_cast<int>(g.mean.size());
            const int r = static_cast<int>(g.factor.cols());
            return std::vector<FieldSlice>{{"mean", 0, d}, {"log_sigma", d, d}, {"factor", 2 * d, d * r}};
          },
          [](const ScalarGaussianExpert&) {
            return std::vector<FieldSlice>{{"mean", 0, 1}, {"log_sigma", 1, 1}};
          },
          [](const CdfExpert&) {
            return std::vector<FieldSlice>{{"bound", 0, 1}, {"log_sigma", 1, 1}};
          },
          [](const PrompExpert& p) {
            const int w = static_cast<int>(p.weight_mean.size());
            return std::vector<FieldSlice>{
                {"weight_mean", 0, w}, {"weight_chol", w, tril_size(w)}, {"log_sigma_obs", w + tril_size(w), 1}};
          },
          [](const UniGaussExpert& u) {
            auto inner = field_layout(*u.inner);
            int n = 0;
            for (const auto& s : inner) n += s.size;
            inner.push_back({"logit_weight", n, 1});
            return inner;
          },
      },
      e);
}

inline int num_params(const Expert& e) {
  int n = 0;
  for (const auto& s : field_layout(e)) n += s.size;
  return n;
}

inline const FieldSlice& find_field(const std::vector<FieldSlice>& layout, const std::string& name) {
  for (const auto& s : layout)
    if (s.name == name) return s;
  throw ContractError("unknown expert field '" + name + "'");
}

// ---------------------------------------------------------------------------
// Flat parameters

inline VectorXd expert_params(const Expert& e) {
  VectorXd p(num_params(e));
  std::visit(overloaded{
                 [&](const GaussianExpert& g) {
                   const auto d = g.mean.size();
                   p.head(d) = g.mean;
                   pack_log_chol(g.chol, p.data() + d);
                 },
                 [&](const IsotropicGaussianExpert& g) {
                   p.head(g.mean.size()) = g.mean;
                   p[g.mean.size()] = g.log_sigma;
                 },
                 [&](const LowRankGaussianExpert& g) {
                   const auto d = g.mean.size();
                   p.head(d) = g.mean;
                   p.segment(d, d) = g.log_sigma;
                   p.tail(g.factor.size()) = g.factor.reshaped();
                 },
                 [&](const ScalarGaussianExpert& g) { p << g.mean, g.log_sigma; },
                 [&](const CdfExpert& c) { p << c.bound, c.log_sigma; },
                 [&](const PrompExpert& m) {
                   const auto w = m.weight_mean.size();
                   p.head(w) = m.weight_mean;
                   pack_log_chol(m.weight_chol, p.data() + w);
                   p[p.size() - 1] = m.log_sigma_obs;
                 },
                 [&](const UniGaussExpert& u) {
                   const VectorXd inner = expert_params(*u.inner);
                   p.head(inner.size()) = inner;
                   p[inner.size()] = u.logit_weight;
                 },
             },
             e);
  return p;
}

/// Copy of `e` with its flat parameters replaced. Log scales are floored at
/// log(sigma_floor).
inline Expert with_params(const Expert& e, const VectorXd& p) {
  require(p.size() == num_params(e), "parameter vector has the wrong size for " + family_name(e));
  const double log_floor = std::log(kSigmaFloor);
  return std::visit(
      overloaded{
          [&](const GaussianExpert& g) -> Expert {
            const auto d = g.mean.size();
            return GaussianExpert{p.head(d), unpack_log_chol(p.data() + d, static_cast<int>(d))};
          },
          [&](const IsotropicGaussianExpert& g) -> Expert {
            const auto d = g.mean.size();
            return IsotropicGaussianExpert{p.head(d), std::max(p[d], log_floor)};
          },
          [&](const LowRankGaussianExpert& g) -> Expert {
            const auto d = g.mean.size();
            MatrixXd f = p.tail(g.factor.size()).reshaped(g.factor.rows(), g.factor.cols());
            return LowRankGaussianExpert{p.head(d), p.segment(d, d).cwiseMax(log_floor), f};
          },
          [&](const ScalarGaussianExpert&) -> Expert {
            return ScalarGaussianExpert{p[0], std::max(p[1], log_floor)};
          },
          [&](const CdfExpert& c) -> Expert {
            return CdfExpert{p[0], std::max(p[1], log_floor), c.side};
          },
          [&](const PrompExpert& m) -> Expert {
            const auto w = m.weight_mean.size();
            return PrompExpert{p.head(w), unpack_log_chol(p.data() + w, static_cast<int>(w)),
                               std::max(p[p.size() - 1], log_floor), m.basis};
          },
          [&](const UniGaussExpert& u) -> Expert {
            const int n = num_params(*u.inner);
            return UniGaussExpert{with_params(*u.inner, p.head(n)), p[n], u.inflate};
          },
      },
      e);
}

namespace detail {

/// Elementwise affine map theta' = scale * theta + shift that widens a family
/// by a factor c in standard deviation.
struct Inflation {
  VectorXd scale;
  VectorXd shift;
};

inline void fill_chol_inflation(Inflation& inf, int offset, int n, double c) {
  int k = offset;
  for (int i = 0; i < n; ++i)
    for (int j = 0; j <= i; ++j, ++k) {
      if (i == j) {
        inf.shift[k] = std::log(c);
      } else {
        inf.scale[k] = c;
      }
    }
}

inline Inflation inflation(const Expert& e, double c) {
  const int n = num_params(e);
  Inflation inf{VectorXd::Ones(n), VectorXd::Zero(n)};
  std::visit(overloaded{
                 [&](const GaussianExpert& g) {
                   fill_chol_inflation(inf, static_cast<int>(g.mean.size()), static_cast<int>(g.mean.size()), c);
                 },
                 [&](const IsotropicGaussianExpert& g) { inf.shift[g.mean.size()] = std::log(c); },
                 [&](const LowRankGaussianExpert& g) {
                   const auto d = g.mean.size();
                   inf.shift.segment(d, d).setConstant(std::log(c));
                   inf.scale.tail(g.factor.size()).setConstant(c);
                 },
                 [&](const ScalarGaussianExpert&) { inf.shift[1] = std::log(c); },
                 [&](const CdfExpert&) { inf.shift[1] = std::log(c); },
                 [&](const PrompExpert& m) {
                   const int w = static_cast<int>(m.weight_mean.size());
                   fill_chol_inflation(inf, w, w, c);
                   inf.shift[n - 1] = std::log(c);
                 },
                 [&](const UniGaussExpert&) {
                   throw ContractError("nested uni-Gauss experts are not supported");
                 },
             },
             e);
  return inf;
}

inline Expert inflated(const Expert& e, double c) {
  const Inflation inf = inflation(e, c);
  return with_params(e, inf.scale.cwiseProduct(expert_params(e)) + inf.shift);
}

/// log N(y; mean, cov) pieces for dense covariance: value, alpha = cov^-1 r
/// and the symmetric d/dcov gradient G = 0.5 (alpha alpha^T - cov^-1).
struct DenseGaussianEval {
  double value;
  VectorXd alpha;
  MatrixXd cov_inv;
};

inline DenseGaussianEval dense_gaussian(const VectorXd& y, const VectorXd& mean, const MatrixXd& cov) {
  Eigen::LLT<MatrixXd> llt(cov);
  if (llt.info() != Eigen::Success) throw NumericalError("covariance is not positive definite");
  const VectorXd r = y - mean;
  const MatrixXd L = llt.matrixL();
  const VectorXd z = L.triangularView<Eigen::Lower>().solve(r);
  DenseGaussianEval out;
  out.value = -0.5 * z.squaredNorm() - L.diagonal().array().log().sum() -
              0.5 * static_cast<double>(y.size()) * kLog2Pi;
  out.alpha = llt.solve(r);
  out.cov_inv = llt.solve(MatrixXd::Identity(y.size(), y.size()));
  return out;
}

inline MatrixXd low_rank_cov(const LowRankGaussianExpert& g) {
  MatrixXd S = g.factor * g.factor.transpose();
  S.diagonal().array() += (2.0 * g.log_sigma.array()).exp();
  return S;
}

inline MatrixXd promp_cov(const PrompExpert& m, const MatrixXd& psi) {
  return promp_marginal(psi, m.weight_mean, m.weight_chol * m.weight_chol.transpose(),
                        std::exp(m.log_sigma_obs))
      .cov;
}

inline void check_dim(const Expert& e, const VectorXd& y) {
  if (y.size() != expert_dim(e))
    throw ContractError(family_name(e) + " expert expects dimension " +
                        std::to_string(expert_dim(e)) + ", got " + std::to_string(y.size()));
}

inline double cdf_z(const CdfExpert& c, double y) {
  const double s = std::exp(c.log_sigma);
  return c.side == BoundSide::Below ? (c.bound - y) / s : (y - c.bound) / s;
}

inline double cdf_dz_dy(const CdfExpert& c) {
  const double s = std::exp(c.log_sigma);
  return c.side == BoundSide::Below ? -1.0 / s : 1.0 / s;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Evaluation

struct ExpertEval {
  double value = 0.0;
  VectorXd grad_y;
};

inline double expert_logpdf(const Expert& e, const VectorXd& y);
inline VectorXd expert_grad_y(const Expert& e, const VectorXd& y);

namespace detail {

struct UniGaussParts {
  double log_w_inner, log_w_wide, value, r_inner, r_wide;
  Expert wide;
};

inline UniGaussParts unigauss_parts(const UniGaussExpert& u, const VectorXd& y) {
  UniGaussParts p{0, 0, 0, 0, 0, inflated(*u.inner, u.inflate)};
  const double log_pi = -std::log1p(std::exp(-u.logit_weight));
  const double log_1mpi = -std::log1p(std::exp(u.logit_weight));
  p.log_w_inner = log_pi + expert_logpdf(*u.inner, y);
  p.log_w_wide = log_1mpi + expert_logpdf(p.wide, y);
  p.value = log_sum_exp(p.log_w_inner, p.log_w_wide);
  p.r_inner = std::exp(p.log_w_inner - p.value);
  p.r_wide = std::exp(p.log_w_wide - p.value);
  return p;
}

}  // namespace detail

/// Log density. Gaussian families return the normalized log-pdf.
inline double expert_logpdf(const Expert& e, const VectorXd& y) {
  detail::check_dim(e, y);
  return std::visit(
      overloaded{
          [&](const GaussianExpert& g) {
            const VectorXd z = g.chol.triangularView<Eigen::Lower>().solve(y - g.mean);
            return -0.5 * z.squaredNorm() - g.chol.diagonal().array().log().sum() -
                   0.5 * static_cast<double>(y.size()) * kLog2Pi;
          },
          [&](const IsotropicGaussianExpert& g) {
            const double d = static_cast<double>(y.size());
            return -0.5 * (y - g.mean).squaredNorm() * std::exp(-2.0 * g.log_sigma) -
                   d * g.log_sigma - 0.5 * d * kLog2Pi;
          },
          [&](const LowRankGaussianExpert& g) {
            return detail::dense_gaussian(y, g.mean, detail::low_rank_cov(g)).value;
          },
          [&](const ScalarGaussianExpert& g) {
            const double r = y[0] - g.mean;
            return -0.5 * r * r * std::exp(-2.0 * g.log_sigma) - g.log_sigma - 0.5 * kLog2Pi;
          },
          [&](const CdfExpert& c) { return log_normal_cdf(detail::cdf_z(c, y[0])); },
          [&](const PrompExpert& m) {
            const MatrixXd psi = promp_basis_matrix(m.basis);
            return detail::dense_gaussian(y, psi.transpose() * m.weight_mean, detail::promp_cov(m, psi))
                .value;
          },
          [&](const UniGaussExpert& u) { return detail::unigauss_parts(u, y).value; },
      },
      e);
}

inline VectorXd expert_grad_y(const Expert& e, const VectorXd& y) {
  detail::check_dim(e, y);
  return std::visit(
      overloaded{
          [&](const GaussianExpert& g) -> VectorXd {
            const VectorXd z = g.chol.triangularView<Eigen::Lower>().solve(y - g.mean);
            return -g.chol.transpose().triangularView<Eigen::Upper>().solve(z);
          },
          [&](const IsotropicGaussianExpert& g) -> VectorXd {
            return -(y - g.mean) * std::exp(-2.0 * g.log_sigma);
          },
          [&](const LowRankGaussianExpert& g) -> VectorXd {
            return -detail::dense_gaussian(y, g.mean, detail::low_rank_cov(g)).alpha;
          },
          [&](const ScalarGaussianExpert& g) -> VectorXd {
            return VectorXd::Constant(1, -(y[0] - g.mean) * std::exp(-2.0 * g.log_sigma));
          },
          [&](const CdfExpert& c) -> VectorXd {
            return VectorXd::Constant(1, normal_hazard(detail::cdf_z(c, y[0])) * detail::cdf_dz_dy(c));
          },
          [&](const PrompExpert& m) -> VectorXd {
            const MatrixXd psi = promp_basis_matrix(m.basis);
            return -detail::dense_gaussian(y, psi.transpose() * m.weight_mean, detail::promp_cov(m, psi))
                        .alpha;
          },
          [&](const UniGaussExpert& u) -> VectorXd {
            const auto p = detail::unigauss_parts(u, y);
            return p.r_inner * expert_grad_y(*u.inner, y) + p.r_wide * expert_grad_y(p.wide, y);
          },
      },
      e);
}

/// Hessian of the log density in y.
inline MatrixXd expert_hess_y(const Expert& e, const VectorXd& y) {
  detail::check_dim(e, y);
  return std::visit(
      overloaded{
          [&](const GaussianExpert& g) -> MatrixXd {
            const MatrixXd Linv = g.chol.triangularView<Eigen::Lower>().solve(
                MatrixXd::Identity(y.size(), y.size()));
            return -Linv.transpose() * Linv;
          },
          [&](const IsotropicGaussianExpert& g) -> MatrixXd {
            return -MatrixXd::Identity(y.size(), y.size()) * std::exp(-2.0 * g.log_sigma);
          },
          [&](const LowRankGaussianExpert& g) -> MatrixXd {
            return -detail::dense_gaussian(y, g.mean, detail::low_rank_cov(g)).cov_inv;
          },
          [&](const ScalarGaussianExpert& g) -> MatrixXd {
            return MatrixXd::Constant(1, 1, -std::exp(-2.0 * g.log_sigma));
          },
          [&](const CdfExpert& c) -> MatrixXd {
            const double z = detail::cdf_z(c, y[0]);
            const double h = normal_hazard(z);
            const double dz = detail::cdf_dz_dy(c);
            return MatrixXd::Constant(1, 1, -h * (z + h) * dz * dz);
          },
          [&](const PrompExpert& m) -> MatrixXd {
            const MatrixXd psi = promp_basis_matrix(m.basis);
            return -detail::dense_gaussian(y, psi.transpose() * m.weight_mean, detail::promp_cov(m, psi))
                        .cov_inv;
          },
          [&](const UniGaussExpert& u) -> MatrixXd {
            const auto p = detail::unigauss_parts(u, y);
            const VectorXd g1 = expert_grad_y(*u.inner, y);
            const VectorXd g2 = expert_grad_y(p.wide, y);
            const VectorXd gm = p.r_inner * g1 + p.r_wide * g2;
            return p.r_inner * (expert_hess_y(*u.inner, y) + g1 * g1.transpose()) +
                   p.r_wide * (expert_hess_y(p.wide, y) + g2 * g2.transpose()) - gm * gm.transpose();
          },
      },
      e);
}

/// Gradient of expert_logpdf with respect to the flat unconstrained parameters.
inline VectorXd expert_grad_params(const Expert& e, const VectorXd& y) {
  detail::check_dim(e, y);
  VectorXd out(num_params(e));
  std::visit(
      overloaded{
          [&](const GaussianExpert& g) {
            const auto d = y.size();
            const VectorXd z = g.chol.triangularView<Eigen::Lower>().solve(y - g.mean);
            const VectorXd a = g.chol.transpose().triangularView<Eigen::Upper>().solve(z);
            out.head(d) = a;
            MatrixXd dL = (a * z.transpose()).triangularView<Eigen::Lower>();
            dL.diagonal() -= g.chol.diagonal().cwiseInverse();
            pack_chol_gradient(dL, g.chol, out.data() + d);
          },
          [&](const IsotropicGaussianExpert& g) {
            const auto d = y.size();
            const double inv_var = std::exp(-2.0 * g.log_sigma);
            out.head(d) = (y - g.mean) * inv_var;
            out[d] = (y - g.mean).squaredNorm() * inv_var - static_cast<double>(d);
          },
          [&](const LowRankGaussianExpert& g) {
            const auto d = y.size();
            const auto ev = detail::dense_gaussian(y, g.mean, detail::low_rank_cov(g));
            const MatrixXd G = 0.5 * (ev.alpha * ev.alpha.transpose() - ev.cov_inv);
            out.head(d) = ev.alpha;
            out.segment(d, d) = G.diagonal().cwiseProduct((2.0 * g.log_sigma.array()).exp().matrix()) * 2.0;
            out.tail(g.factor.size()) = (2.0 * G * g.factor).reshaped();
          },
          [&](const ScalarGaussianExpert& g) {
            const double r = y[0] - g.mean;
            const double inv_var = std::exp(-2.0 * g.log_sigma);
            out << r * inv_var, r * r * inv_var - 1.0;
          },
          [&](const CdfExpert& c) {
            const double z = detail::cdf_z(c, y[0]);
            const double h = normal_hazard(z);
            const double s = std::exp(c.log_sigma);
            const double dz_db = c.side == BoundSide::Below ? 1.0 / s : -1.0 / s;
            out << h * dz_db, -h * z;
          },
          [&](const PrompExpert& m) {
            const MatrixXd psi = promp_basis_matrix(m.basis);
            const auto w = m.weight_mean.size();
            const double s2 = std::exp(2.0 * m.log_sigma_obs);
            const auto ev = detail::dense_gaussian(y, psi.transpose() * m.weight_mean, detail::promp_cov(m, psi));
            const MatrixXd G = 0.5 * (ev.alpha * ev.alpha.transpose() - ev.cov_inv);
            out.head(w) = psi * ev.alpha;
            const MatrixXd dL = (2.0 * psi * G * psi.transpose() * m.weight_chol).triangularView<Eigen::Lower>();
            pack_chol_gradient(dL, m.weight_chol, out.data() + w);
            out[out.size() - 1] = 2.0 * s2 * G.trace();
          },
          [&](const UniGaussExpert& u) {
            const auto p = detail::unigauss_parts(u, y);
            const auto inf = detail::inflation(*u.inner, u.inflate);
            const int n = num_params(*u.inner);
            out.head(n) = p.r_inner * expert_grad_params(*u.inner, y) +
                          p.r_wide * inf.scale.cwiseProduct(expert_grad_params(p.wide, y));
            const double pi = 1.0 / (1.0 + std::exp(-u.logit_weight));
            out[n] = p.r_inner - pi;
          },
      },
      e);
  return out;
}

// ---------------------------------------------------------------------------
// Independent maximum likelihood

namespace detail {

inline GaussianMoments sample_moments(const MatrixXd& Y) {
  GaussianMoments m;
  m.mean = Y.colwise().mean().transpose();
  const MatrixXd C = Y.rowwise() - m.mean.transpose();
  m.cov = C.transpose() * C / static_cast<double>(Y.rows());
  return m;
}

inline double floored_log_sigma(double var) {
  return 0.5 * std::log(std::max(var, kSigmaFloor * kSigmaFloor));
}

}  // namespace detail

/// Closed-form / moment-based fit of the family of `prototype` to rows of Y.
/// The prototype provides structure only (dimension, rank, bound side,
/// inflation, basis); its parameter values are ignored.
inline Expert mle_fit(const Expert& prototype, const MatrixXd& Y) {
  if (Y.rows() < 2) throw ContractError("mle_fit needs at least 2 samples");
  if (Y.cols() != expert_dim(prototype))
    throw ContractError("sample dimension does not match the " + family_name(prototype) + " expert");
  const double floor2 = kSigmaFloor * kSigmaFloor;
  return std::visit(
      overloaded{
          [&](const GaussianExpert&) -> Expert {
            if (Y.rows() < Y.cols() + 1)
              throw ContractError("full-covariance Gaussian needs at least dim+1 samples");
            const auto m = detail::sample_moments(Y);
            return GaussianExpert{m.mean, floored_cholesky(m.cov, floor2)};
          },
          [&](const IsotropicGaussianExpert&) -> Expert {
            const auto m = detail::sample_moments(Y);
            return IsotropicGaussianExpert{m.mean,
                                           detail::floored_log_sigma(m.cov.trace() / static_cast<double>(Y.cols()))};
          },
          [&](const LowRankGaussianExpert& proto) -> Expert {
            const auto m = detail::sample_moments(Y);
            const auto d = Y.cols();
            const auto r = proto.factor.cols();
            Eigen::SelfAdjointEigenSolver<MatrixXd> es(m.cov);
            // eigenvalues ascending: the leading r are the last columns
            const VectorXd ev = es.eigenvalues();
            const double resid = r < d ? ev.head(d - r).mean() : 0.0;
            MatrixXd F(d, r);
            for (Eigen::Index k = 0; k < r; ++k) {
              const Eigen::Index idx = d - 1 - k;
              F.col(k) = es.eigenvectors().col(idx) * std::sqrt(std::max(ev[idx] - resid, 0.0));
            }
            VectorXd diag = (m.cov - F * F.transpose()).diagonal();
            VectorXd log_sigma(d);
            for (Eigen::Index i = 0; i < d; ++i) log_sigma[i] = detail::floored_log_sigma(diag[i]);
            return LowRankGaussianExpert{m.mean, log_sigma, F};
          },
          [&](const ScalarGaussianExpert&) -> Expert {
            const auto m = detail::sample_moments(Y);
            return ScalarGaussianExpert{m.mean[0], detail::floored_log_sigma(m.cov(0, 0))};
          },
          [&](const CdfExpert& proto) -> Expert {
            // Moment-matched: sigma is the sample std, the bound sits one sigma
            // beyond the most extreme sample on the constrained side.
            const auto m = detail::sample_moments(Y);
            const double ls = detail::floored_log_sigma(m.cov(0, 0));
            const double s = std::exp(ls);
            const double b = proto.side == BoundSide::Below ? Y.col(0).maxCoeff() + s : Y.col(0).minCoeff() - s;
            return CdfExpert{b, ls, proto.side};
          },
          [&](const PrompExpert& proto) -> Expert {
            const MatrixXd psi = promp_basis_matrix(proto.basis);
            const auto nw = psi.rows();
            // ridge regression of each trajectory onto the basis
            MatrixXd A = psi * psi.transpose();
            A.diagonal().array() += 1e-6;
            const auto solver = A.ldlt();
            MatrixXd W(Y.rows(), nw);
            double sq = 0.0;
            for (Eigen::Index n = 0; n < Y.rows(); ++n) {
              const VectorXd y = Y.row(n).transpose();
              const VectorXd w = solver.solve(psi * y);
              W.row(n) = w.transpose();
              sq += (y - psi.transpose() * w).squaredNorm();
            }
            const auto m = detail::sample_moments(W);
            const double obs_var = sq / static_cast<double>(Y.rows() * Y.cols());
            return PrompExpert{m.mean, floored_cholesky(m.cov, floor2), detail::floored_log_sigma(obs_var),
                               proto.basis};
          },
          [&](const UniGaussExpert& proto) -> Expert {
            return UniGaussExpert{mle_fit(*proto.inner, Y), proto.logit_weight, proto.inflate};
          },
      },
      prototype);
}

/// Mean and covariance of a Gaussian-family expert, if it has one.
inline std::optional<GaussianMoments> gaussian_moments(const Expert& e) {
  return std::visit(
      overloaded{
          [](const GaussianExpert& g) -> std::optional<GaussianMoments> {
            return GaussianMoments{g.mean, g.chol * g.chol.transpose()};
          },
          [](const IsotropicGaussianExpert& g) -> std::optional<GaussianMoments> {
            const auto d = g.mean.size();
            return GaussianMoments{g.mean, MatrixXd::Identity(d, d) * std::exp(2.0 * g.log_sigma)};
          },
          [](const LowRankGaussianExpert& g) -> std::optional<GaussianMoments> {
            return GaussianMoments{g.mean, detail::low_rank_cov(g)};
          },
          [](const ScalarGaussianExpert& g) -> std::optional<GaussianMoments> {
            return GaussianMoments{VectorXd::Constant(1, g.mean),
                                   MatrixXd::Constant(1, 1, std::exp(2.0 * g.log_sigma))};
          },
          [](const PrompExpert& m) -> std::optional<GaussianMoments> {
            return promp_marginal(promp_basis_matrix(m.basis), m.weight_mean,
                                  m.weight_chol * m.weight_chol.transpose(), std::exp(m.log_sigma_obs));
          },
          [](const auto&) -> std::optional<GaussianMoments> { return std::nullopt; },
      },
      e);
}

}  // namespace poe
