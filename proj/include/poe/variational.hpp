#pragma once

// Gaussian-mixture variational approximation of unnormalized (or gradient-only)
// targets.

#include <functional>
#include <optional>
#include <random>

#include "poe/optim.hpp"
#include "poe/product_model.hpp"

namespace poe {

struct MixtureComponent {
  VectorXd mean;
  MatrixXd chol;  ///< lower-triangular, positive diagonal
};

struct MixtureVariational {
  VectorXd logits;
  std::vector<MixtureComponent> components;

  int size() const { return static_cast<int>(components.size()); }
  int dim() const { return components.empty() ? 0 : static_cast<int>(components.front().mean.size()); }
  VectorXd weights() const { return softmax(logits); }
};

inline void validate_mixture(const MixtureVariational& v) {
  require(v.size() >= 1, "a mixture needs at least one component");
  require(v.logits.size() == v.size(), "one logit per component required");
  for (const auto& c : v.components) {
    require(c.mean.size() == v.dim(), "all components must share a dimension");
    require(c.chol.rows() == v.dim() && c.chol.cols() == v.dim(), "component factor has the wrong shape");
    require((c.chol.diagonal().array() > 0.0).all(), "component factor needs a positive diagonal");
  }
}

/// Unnormalized target. `eval` returns log p~(q) and the gradient used for
/// fitting. Gradient-only targets (nullspace-filtered products) still report
/// a value, but it is not the potential of the gradient and is only used to
/// weigh components; they cannot be importance-sampled.
struct TargetDensity {
  struct Eval {
    double value = 0.0;
    VectorXd grad;
  };
  int dim = 0;
  std::function<Eval(const VectorXd&)> eval;
  bool has_logpdf = true;
};

inline TargetDensity poe_target(const ProductModel& model, int situation = 0, bool filtered = false) {
  check_situation(model, situation);
  TargetDensity t;
  t.dim = model.dof();
  t.has_logpdf = !filtered;
  if (filtered) {
    t.eval = [model, situation](const VectorXd& q) {
      auto r = grad_q_ns_detailed(model, q, situation);
      return TargetDensity::Eval{r.value, std::move(r.grad)};
    };
  } else {
    t.eval = [model, situation](const VectorXd& q) {
      auto r = log_unnorm_and_grad(model, q, situation);
      return TargetDensity::Eval{r.value, std::move(r.grad)};
    };
  }
  return t;
}

/// Means uniform in the box, covariances (0.3 range)^2 I, equal weights.
inline MixtureVariational init_mixture(int K, const std::vector<std::pair<double, double>>& box,
                                       std::uint64_t seed) {
  require(K >= 1, "a mixture needs at least one component");
  require(!box.empty(), "initialization box is empty");
  std::mt19937_64 rng(seed);
  const int d = static_cast<int>(box.size());
  MixtureVariational v;
  v.logits = VectorXd::Zero(K);
  for (int k = 0; k < K; ++k) {
    MixtureComponent c{VectorXd(d), MatrixXd::Zero(d, d)};
    for (int i = 0; i < d; ++i) {
      const auto [lo, hi] = box[static_cast<std::size_t>(i)];
      c.mean[i] = std::uniform_real_distribution<double>(lo, hi)(rng);
      c.chol(i, i) = 0.3 * (hi - lo);
    }
    v.components.push_back(std::move(c));
  }
  return v;
}

// ---------------------------------------------------------------------------
// Density

namespace detail {

/// Per-component log N(q) (weight included) and d/dq of that log density.
struct ComponentTerms {
  VectorXd log_weighted;
  std::vector<VectorXd> grads;
};

inline ComponentTerms component_terms(const MixtureVariational& v, const VectorXd& logw, const VectorXd& q,
                                      bool with_grad) {
  const int K = v.size();
  const double d = static_cast<double>(q.size());
  ComponentTerms t{VectorXd(K), {}};
  if (with_grad) t.grads.resize(static_cast<std::size_t>(K));
  for (int k = 0; k < K; ++k) {
    const auto& c = v.components[static_cast<std::size_t>(k)];
    const VectorXd z = c.chol.triangularView<Eigen::Lower>().solve(q - c.mean);
    t.log_weighted[k] = logw[k] - 0.5 * z.squaredNorm() - c.chol.diagonal().array().log().sum() - 0.5 * d * kLog2Pi;
    if (with_grad) t.grads[static_cast<std::size_t>(k)] = -c.chol.transpose().triangularView<Eigen::Upper>().solve(z);
  }
  return t;
}

inline VectorXd log_weights(const MixtureVariational& v) {
  return v.logits.array() - log_sum_exp(v.logits);
}

}  // namespace detail

inline double mix_logpdf(const MixtureVariational& v, const VectorXd& q) {
  require(q.size() == v.dim(), "point dimension does not match the mixture");
  return log_sum_exp(detail::component_terms(v, detail::log_weights(v), q, false).log_weighted);
}

struct MixtureGrad {
  double value = 0.0;
  VectorXd grad;
};

inline MixtureGrad mix_logpdf_grad(const MixtureVariational& v, const VectorXd& q) {
  require(q.size() == v.dim(), "point dimension does not match the mixture");
  const auto t = detail::component_terms(v, detail::log_weights(v), q, true);
  MixtureGrad out{log_sum_exp(t.log_weighted), VectorXd::Zero(q.size())};
  for (int k = 0; k < v.size(); ++k)
    out.grad += std::exp(t.log_weighted[k] - out.value) * t.grads[static_cast<std::size_t>(k)];
  return out;
}

/// n x dim samples: categorical component draw, then mu_k + L_k eta.
inline MatrixXd mix_sample(const MixtureVariational& v, int n, std::uint64_t seed) {
  require(n >= 1, "need at least one sample");
  validate_mixture(v);
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> unif(0.0, 1.0);
  std::normal_distribution<double> normal(0.0, 1.0);
  const VectorXd w = v.weights();
  MatrixXd out(n, v.dim());
  for (int i = 0; i < n; ++i) {
    const double u = unif(rng);
    int k = 0;
    for (double acc = w[0]; k + 1 < v.size() && u >= acc; acc += w[++k]) {
    }
    VectorXd eta(v.dim());
    for (auto& e : eta) e = normal(rng);
    const auto& c = v.components[static_cast<std::size_t>(k)];
    out.row(i) = (c.mean + c.chol * eta).transpose();
  }
  return out;
}

// ---------------------------------------------------------------------------
// ELBO

struct Estimate {
  double value = 0.0;
  double std_error = 0.0;
};

inline int samples_per_component(int n, int K) { return std::max(2, (n + K - 1) / K); }

/// L(lambda) = sum_k pi_k E_{N_k}[log q~ - log p~], estimated per component.
/// Minimized by fit; L >= -log C.
inline Estimate elbo(const MixtureVariational& v, const TargetDensity& target, int n, std::uint64_t seed) {
  validate_mixture(v);
  require(target.dim == v.dim(), "target and mixture dimensions differ");
  require(target.has_logpdf, "the ELBO needs a target with a log density");
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  const int K = v.size();
  const int nk = samples_per_component(n, K);
  const VectorXd w = v.weights();
  Estimate out;
  for (int k = 0; k < K; ++k) {
    const auto& c = v.components[static_cast<std::size_t>(k)];
    double sum = 0.0, sum2 = 0.0;
    for (int s = 0; s < nk; ++s) {
      VectorXd eta(v.dim());
      for (auto& e : eta) e = normal(rng);
      const VectorXd x = c.mean + c.chol * eta;
      const double h = mix_logpdf(v, x) - target.eval(x).value;
      sum += h;
      sum2 += h * h;
    }
    const double mean = sum / nk;
    const double var = std::max(sum2 / nk - mean * mean, 0.0) * nk / (nk - 1);
    out.value += w[k] * mean;
    out.std_error += w[k] * w[k] * var / nk;
  }
  out.std_error = std::sqrt(out.std_error);
  return out;
}

// ---------------------------------------------------------------------------
// Fitting

struct FitOptions {
  int steps = 3000;
  double lr = 5e-3;
  int n_samples = 64;
  std::uint64_t seed = 0;
  bool rescue_dead = true;
  double dead_weight = 1e-4;
  int dead_patience = 200;
  int weight_warmup = 300;  ///< steps during which the mixture weights stay fixed
};

struct FitResult {
  MixtureVariational var;
  std::vector<double> elbo_trace;  ///< per-step batch estimate of L(lambda)
  int rescued = 0;
};

namespace detail {

inline int mixture_param_count(int K, int d) { return K + K * (d + tril_size(d)); }

inline VectorXd pack_mixture(const MixtureVariational& v) {
  const int K = v.size(), d = v.dim();
  VectorXd p(mixture_param_count(K, d));
  p.head(K) = v.logits;
  int off = K;
  for (const auto& c : v.components) {
    p.segment(off, d) = c.mean;
    pack_log_chol(c.chol, p.data() + off + d);
    off += d + tril_size(d);
  }
  return p;
}

inline void unpack_mixture(const VectorXd& p, MixtureVariational& v) {
  const int K = v.size(), d = v.dim();
  v.logits = p.head(K);
  int off = K;
  for (auto& c : v.components) {
    c.mean = p.segment(off, d);
    c.chol = unpack_log_chol(p.data() + off + d, d);
    off += d + tril_size(d);
  }
}

}  // namespace detail

/// Stateful fitter so that training can interleave a few refresh steps with
/// parameter updates of the target.
class MixtureFitter {
 public:
  MixtureFitter(MixtureVariational init, FitOptions opts)
      : var_(std::move(init)), opts_(opts), adam_(opts.lr), rng_(opts.seed) {
    validate_mixture(var_);
    require(opts_.n_samples >= 1 && opts_.lr > 0.0, "invalid fit options");
    low_count_.assign(static_cast<std::size_t>(var_.size()), 0);
  }

  /// One stochastic descent step on L(lambda); returns the batch estimate.
  double step(const TargetDensity& target) {
    require(target.dim == var_.dim(), "target and mixture dimensions differ");
    const int K = var_.size(), d = var_.dim();
    const int nk = samples_per_component(opts_.n_samples, K);
    const VectorXd logw = detail::log_weights(var_);
    const VectorXd w = logw.array().exp();
    VectorXd grad = VectorXd::Zero(detail::mixture_param_count(K, d));
    VectorXd hbar = VectorXd::Zero(K);
    std::normal_distribution<double> normal(0.0, 1.0);
    double best_value = -std::numeric_limits<double>::infinity();
    VectorXd best_x;
    int off = K;
    for (int k = 0; k < K; ++k) {
      const auto& c = var_.components[static_cast<std::size_t>(k)];
      VectorXd g_mean = VectorXd::Zero(d);
      MatrixXd g_chol = MatrixXd::Zero(d, d);
      for (int s = 0; s < nk; ++s) {
        VectorXd eta(d);
        for (auto& e : eta) e = normal(rng_);
        const VectorXd x = c.mean + c.chol * eta;
        const auto t = target.eval(x);
        const auto terms = detail::component_terms(var_, logw, x, true);
        const double lq = log_sum_exp(terms.log_weighted);
        // sticking-the-landing: the score of q~ is dropped, only the path remains
        VectorXd gq = VectorXd::Zero(d);
        for (int j = 0; j < K; ++j) gq += std::exp(terms.log_weighted[j] - lq) * terms.grads[static_cast<std::size_t>(j)];
        const VectorXd gx = gq - t.grad;
        hbar[k] += (lq - t.value) / nk;
        g_mean += gx / nk;
        g_chol += gx * eta.transpose() / nk;
        if (t.value > best_value) {
          best_value = t.value;
          best_x = x;
        }
      }
      grad.segment(off, d) = w[k] * g_mean;
      const MatrixXd gL = w[k] * MatrixXd(g_chol.triangularView<Eigen::Lower>());
      pack_chol_gradient(gL, c.chol, grad.data() + off + d);
      off += d + tril_size(d);
    }
    const double L = w.dot(hbar);
    if (steps_ >= opts_.weight_warmup) grad.head(K) = w.array() * (hbar.array() - L);
    ++steps_;
    if (!grad.allFinite() || !std::isfinite(L))
      throw NumericalError("variational fit diverged: non-finite ELBO gradient");
    VectorXd p = detail::pack_mixture(var_);
    p -= adam_.step(grad);
    if (!p.allFinite()) throw NumericalError("variational fit diverged: non-finite mixture parameters");
    detail::unpack_mixture(p, var_);
    if (opts_.rescue_dead && best_x.size() == d) rescue(target, best_x);
    return L;
  }

  FitResult run(const TargetDensity& target, int steps) {
    FitResult r;
    r.elbo_trace.reserve(static_cast<std::size_t>(steps));
    for (int i = 0; i < steps; ++i) r.elbo_trace.push_back(step(target));
    r.var = var_;
    r.rescued = rescued_;
    return r;
  }

  const MixtureVariational& mixture() const { return var_; }
  int rescued() const { return rescued_; }

  /// Points known to carry target mass (rows). Dead components are then moved
  /// to the candidate with the largest log p~ - log q instead of the batch
  /// maximum of p~, so modes the mixture has missed get picked up.
  void set_rescue_candidates(MatrixXd candidates) {
    require(candidates.rows() == 0 || candidates.cols() == var_.dim(), "rescue candidates have the wrong dimension");
    candidates_ = std::move(candidates);
  }

 private:
  VectorXd least_covered(const TargetDensity& target) const {
    Eigen::Index best = 0;
    double best_gap = -std::numeric_limits<double>::infinity();
    for (Eigen::Index i = 0; i < candidates_.rows(); ++i) {
      const VectorXd x = candidates_.row(i).transpose();
      const double gap = target.eval(x).value - mix_logpdf(var_, x);
      if (gap > best_gap) best_gap = gap, best = i;
    }
    return candidates_.row(best).transpose();
  }

  void rescue(const TargetDensity& target, const VectorXd& best_x) {
    const VectorXd w = var_.weights();
    const int K = var_.size(), d = var_.dim();
    int heaviest = 0;
    w.maxCoeff(&heaviest);
    std::optional<VectorXd> spot;
    for (int k = 0; k < K; ++k) {
      auto& cnt = low_count_[static_cast<std::size_t>(k)];
      cnt = w[k] < opts_.dead_weight ? cnt + 1 : 0;
      if (cnt < opts_.dead_patience) continue;
      if (!spot) spot = candidates_.rows() > 0 && target.has_logpdf ? least_covered(target) : best_x;
      auto& c = var_.components[static_cast<std::size_t>(k)];
      c.mean = *spot;
      c.chol = var_.components[static_cast<std::size_t>(heaviest)].chol;
      var_.logits[k] = var_.logits.maxCoeff() - std::log(static_cast<double>(K));
      adam_.reset_slice(k, 1);
      adam_.reset_slice(K + k * (d + tril_size(d)), d + tril_size(d));
      cnt = 0;
      ++rescued_;
    }
  }

  MixtureVariational var_;
  FitOptions opts_;
  Adam adam_;
  std::mt19937_64 rng_;
  std::vector<int> low_count_;
  MatrixXd candidates_;
  int rescued_ = 0;
  int steps_ = 0;
};

inline FitResult fit(const MixtureVariational& init, const TargetDensity& target, const FitOptions& opts) {
  MixtureFitter f(init, opts);
  return f.run(target, opts.steps);
}

// ---------------------------------------------------------------------------
// Normalizer

struct NormalizerEstimate {
  double value = 0.0;      ///< log C
  double std_error = 0.0;  ///< delta-method standard error of log C
  double ess = 0.0;        ///< effective sample size of the importance weights
  bool low_ess = false;    ///< ess < 0.01 n
};

/// Self-normalizing importance weights log p~(x) - log q~(x) of samples `X`.
inline VectorXd log_importance_weights(const MixtureVariational& v, const TargetDensity& target, const MatrixXd& X) {
  require(target.has_logpdf, "importance weights need a target with a log density");
  VectorXd lw(X.rows());
  for (Eigen::Index i = 0; i < X.rows(); ++i) {
    const VectorXd x = X.row(i).transpose();
    lw[i] = target.eval(x).value - mix_logpdf(v, x);
  }
  return lw;
}

inline NormalizerEstimate log_normalizer(const MixtureVariational& v, const TargetDensity& target, int n,
                                         std::uint64_t seed) {
  require(target.dim == v.dim(), "target and mixture dimensions differ");
  const VectorXd lw = log_importance_weights(v, target, mix_sample(v, n, seed));
  NormalizerEstimate out;
  const double lse = log_sum_exp(lw);
  out.value = lse - std::log(static_cast<double>(n));
  const VectorXd r = (lw.array() - out.value).exp();  // w_i / mean(w)
  const double var = (r.array() - 1.0).square().sum() / std::max(n - 1, 1);
  out.std_error = std::sqrt(var / n);
  const VectorXd nw = (lw.array() - lse).exp();
  out.ess = 1.0 / nw.squaredNorm();
  out.low_ess = out.ess < 0.01 * n;
  return out;
}

}  // namespace poe
