#pragma once

// Maximum-likelihood training of product models.

#include <chrono>

#include "poe/variational.hpp"

namespace poe {

struct Dataset {
  MatrixXd samples;             ///< N x dof joint angles
  std::vector<int> situation;   ///< empty, or one label per sample

  int size() const { return static_cast<int>(samples.rows()); }
  int dof() const { return static_cast<int>(samples.cols()); }
  int label(int i) const { return situation.empty() ? 0 : situation[static_cast<std::size_t>(i)]; }
  VectorXd row(int i) const { return samples.row(i).transpose(); }

  /// Sample indices grouped by situation, in ascending index order.
  std::vector<std::vector<int>> by_situation(int n_situations) const {
    std::vector<std::vector<int>> out(static_cast<std::size_t>(n_situations));
    for (int i = 0; i < size(); ++i) out[static_cast<std::size_t>(label(i))].push_back(i);
    return out;
  }

  Dataset subset(const std::vector<int>& idx) const {
    Dataset d;
    d.samples.resize(static_cast<Eigen::Index>(idx.size()), samples.cols());
    for (std::size_t k = 0; k < idx.size(); ++k) d.samples.row(static_cast<Eigen::Index>(k)) = samples.row(idx[k]);
    if (!situation.empty())
      for (int i : idx) d.situation.push_back(situation[static_cast<std::size_t>(i)]);
    return d;
  }
};

inline void validate_dataset(const Dataset& d, const ProductModel& m) {
  require(d.size() >= 2, "a dataset needs at least 2 samples");
  require(d.dof() == m.dof(), "dataset has " + std::to_string(d.dof()) + " columns, model has " +
                                  std::to_string(m.dof()) + " joints");
  require(d.samples.allFinite(), "dataset contains non-finite values");
  require(d.situation.empty() || static_cast<int>(d.situation.size()) == d.size(),
          "one situation label per sample required");
  for (int i = 0; i < d.size(); ++i) {
    require(d.label(i) >= 0 && d.label(i) < m.situations(),
            "situation label " + std::to_string(d.label(i)) + " out of range");
    for (int j = 0; j < d.dof(); ++j) {
      const auto [lo, hi] = m.tree.limits()[static_cast<std::size_t>(j)];
      require(d.samples(i, j) >= lo - 1e-6 && d.samples(i, j) <= hi + 1e-6,
              "sample " + std::to_string(i) + " violates the limits of joint " + std::to_string(j));
    }
  }
}

// ---------------------------------------------------------------------------
// Independent initialization

/// Fits every expert to the transformed samples on its own. Situation-bound
/// fields come from per-situation fits; tied fields average the per-situation
/// fits in the unconstrained parameterization. Trainable map parameters start
/// at 0 and frozen fields keep their values.
inline ProductModel init_independent(const ProductModel& model, const Dataset& data) {
  validate_model(model);
  validate_dataset(data, model);
  ProductModel out = model;
  const int S = model.situations();
  const auto groups = data.by_situation(S);
  for (auto& e : out.entries) {
    if (map_param_count(e.map) > 0) e.map = with_map_params(e.map, VectorXd::Zero(map_param_count(e.map)));
    const int d = output_dim(e.map, out.tree);
    auto transformed = [&](const std::vector<int>& idx) {
      MatrixXd Y(static_cast<Eigen::Index>(idx.size()), d);
      for (std::size_t k = 0; k < idx.size(); ++k)
        Y.row(static_cast<Eigen::Index>(k)) = map_value(e.map, out.tree, data.row(idx[k])).transpose();
      return Y;
    };
    const auto layout = field_layout(e.experts.front());
    auto keep_frozen = [&](const Expert& fitted, const Expert& original) {
      VectorXd p = expert_params(fitted);
      const VectorXd p0 = expert_params(original);
      for (const auto& f : e.frozen_fields) {
        const auto& s = find_field(layout, f);
        p.segment(s.offset, s.size) = p0.segment(s.offset, s.size);
      }
      return with_params(original, p);
    };
    if (e.experts.size() == 1) {
      std::vector<int> all(static_cast<std::size_t>(data.size()));
      for (int i = 0; i < data.size(); ++i) all[static_cast<std::size_t>(i)] = i;
      e.experts[0] = keep_frozen(mle_fit(e.experts[0], transformed(all)), e.experts[0]);
      continue;
    }
    std::vector<VectorXd> fits;
    for (int s = 0; s < S; ++s) {
      const auto& idx = groups[static_cast<std::size_t>(s)];
      if (idx.size() < 2) throw ContractError("situation " + std::to_string(s) + " has fewer than 2 samples");
      fits.push_back(expert_params(mle_fit(e.experts[static_cast<std::size_t>(s)], transformed(idx))));
    }
    VectorXd tied = VectorXd::Zero(fits.front().size());
    for (const auto& p : fits) tied += p / static_cast<double>(S);
    for (int s = 0; s < S; ++s) {
      VectorXd p = tied;
      for (const auto& f : e.bound_fields) {
        const auto& sl = find_field(layout, f);
        p.segment(sl.offset, sl.size) = fits[static_cast<std::size_t>(s)].segment(sl.offset, sl.size);
      }
      auto& x = e.experts[static_cast<std::size_t>(s)];
      x = keep_frozen(with_params(x, p), x);
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Sampling helpers

/// Metropolis-adjusted Langevin chain. Targets without a log density get
/// plain unadjusted Langevin on the supplied gradient.
inline VectorXd langevin_chain(const TargetDensity& target, VectorXd x, int steps, double h, std::mt19937_64& rng,
                               int* accepted = nullptr) {
  std::normal_distribution<double> normal(0.0, 1.0);
  std::uniform_real_distribution<double> unif(0.0, 1.0);
  auto cur = target.eval(x);
  for (int s = 0; s < steps; ++s) {
    VectorXd xi(x.size());
    for (auto& v : xi) v = normal(rng);
    const VectorXd prop = x + h * cur.grad + std::sqrt(2.0 * h) * xi;
    const auto next = target.eval(prop);
    bool accept = true;
    if (target.has_logpdf) {
      const double fwd = -(prop - x - h * cur.grad).squaredNorm() / (4.0 * h);
      const double bwd = -(x - prop - h * next.grad).squaredNorm() / (4.0 * h);
      const double log_a = next.value - cur.value + bwd - fwd;
      accept = std::isfinite(log_a) && std::log(unif(rng)) < log_a;
    }
    if (accept) {
      x = prop;
      cur = next;
      if (accepted) ++*accepted;
    }
  }
  return x;
}

/// Mixture samples optionally refined by `mala_steps` Langevin steps on the
/// target, which removes most of the residual approximation error locally.
inline MatrixXd sample_target(const MixtureVariational& var, const TargetDensity& target, int n, std::uint64_t seed,
                              int mala_steps = 0, double h = 1e-2) {
  MatrixXd X = mix_sample(var, n, seed);
  if (mala_steps <= 0) return X;
  std::mt19937_64 rng(seed ^ 0x9e3779b97f4a7c15ULL);
  for (Eigen::Index i = 0; i < X.rows(); ++i)
    X.row(i) = langevin_chain(target, X.row(i).transpose(), mala_steps, h, rng).transpose();
  return X;
}

// ---------------------------------------------------------------------------
// Training

enum class Method { Vi, Cd };

inline std::string method_name(Method m) { return m == Method::Vi ? "vi" : "cd"; }

struct TrainOptions {
  Method method = Method::Vi;
  int outer_steps = 1000;
  double expert_lr = 1e-2;
  int vi_refresh_steps = 20;
  int model_samples = 64;
  /// Fraction of model samples from data-initialized chains. Unset: 0.5 for
  /// plain products, 0 for nullspace-filtered ones.
  std::optional<double> chain_fraction;
  int cd_steps = 5;
  double cd_step_size = 1e-2;
  std::uint64_t seed = 0;
  bool hierarchy = false;  ///< use nullspace-filtered gradients in q
  int vi_components = 20;
  int vi_warmup_steps = 1000;
  int vi_samples = 64;
  double vi_lr = 5e-3;
};

inline void validate_options(const TrainOptions& o) {
  require(o.outer_steps >= 0, "outer_steps must be non-negative");
  require(o.expert_lr > 0.0, "expert_lr must be positive");
  require(o.vi_refresh_steps >= 0 && o.vi_warmup_steps >= 0, "VI step counts must be non-negative");
  require(o.model_samples >= 1, "model_samples must be positive");
  require(!o.chain_fraction || (*o.chain_fraction >= 0.0 && *o.chain_fraction <= 1.0),
          "chain_fraction must lie in [0, 1]");
  require(o.cd_steps >= 1 && o.cd_step_size > 0.0, "cd_steps and cd_step_size must be positive");
  require(o.vi_components >= 1 && o.vi_samples >= 1 && o.vi_lr > 0.0, "invalid VI options");
}

struct GradientTerms {
  VectorXd data;      ///< mean data-term gradient
  VectorXd model;     ///< estimated model-term gradient
  VectorXd data_se;   ///< elementwise standard errors
  VectorXd model_se;
  VectorXd gap() const { return data - model; }
};

struct TrainReport {
  std::string method;
  int steps = 0;
  std::vector<double> data_norm, model_norm, gap_norm;
  std::vector<double> elbo_trace;  ///< situation-averaged VI estimate per outer step
  double grad_gap = 0.0;           ///< final gap norm
  bool aborted = false;
  std::string message;
  std::vector<std::string> warnings;
  double wallclock_s = 0.0;
};

struct TrainResult {
  ProductModel model;
  std::vector<MixtureVariational> mixtures;  ///< one per situation (VI only)
  TrainReport report;
};

namespace detail {

struct Accumulator {
  VectorXd sum, sum2;
  double n = 0;
  explicit Accumulator(Eigen::Index p) : sum(VectorXd::Zero(p)), sum2(VectorXd::Zero(p)) {}
  void add(const VectorXd& g, double w = 1.0) {
    sum += w * g;
    sum2 += w * g.cwiseAbs2();
    n += w;
  }
  VectorXd mean() const { return n > 0 ? VectorXd(sum / n) : VectorXd(VectorXd::Zero(sum.size())); }
  /// standard error of the mean with effective sample size `ess`
  VectorXd se(double ess) const {
    if (n <= 0 || ess <= 1) return VectorXd::Zero(sum.size());
    const VectorXd m = mean();
    return ((sum2 / n - m.cwiseAbs2()).cwiseMax(0.0) / ess).cwiseSqrt();
  }
};

}  // namespace detail

/// Per-situation sums of the data-term gradient and of its elementwise
/// square, each reduced in ascending sample order.
struct SituationSums {
  std::vector<VectorXd> sum, sum2;
  std::vector<int> count;
};

inline SituationSums situation_sums(const ProductModel& m, const Dataset& data) {
  const int S = m.situations();
  const auto groups = data.by_situation(S);
  const Eigen::Index P = num_parameters(m);
  SituationSums out;
  for (int s = 0; s < S; ++s) {
    VectorXd acc = VectorXd::Zero(P), acc2 = VectorXd::Zero(P);
    for (int i : groups[static_cast<std::size_t>(s)]) {
      const VectorXd g = grad_params(m, data.row(i), s);
      acc += g;
      acc2 += g.cwiseAbs2();
    }
    out.sum.push_back(std::move(acc));
    out.sum2.push_back(std::move(acc2));
    out.count.push_back(static_cast<int>(groups[static_cast<std::size_t>(s)].size()));
  }
  return out;
}

/// Mean data-term gradient and its standard error, combining the
/// per-situation sums in situation order.
inline std::pair<VectorXd, VectorXd> combine_sums(const SituationSums& sums) {
  const Eigen::Index P = sums.sum.front().size();
  VectorXd total = VectorXd::Zero(P), total2 = VectorXd::Zero(P);
  double N = 0;
  for (std::size_t s = 0; s < sums.sum.size(); ++s) {
    total += sums.sum[s];
    total2 += sums.sum2[s];
    N += sums.count[s];
  }
  const VectorXd mean = total / N;
  const VectorXd se = ((total2 / N - mean.cwiseAbs2()).cwiseMax(0.0) / N).cwiseSqrt();
  return {mean, se};
}

inline std::pair<VectorXd, VectorXd> data_term(const ProductModel& m, const Dataset& data) {
  return combine_sums(situation_sums(m, data));
}

/// Model-term estimate for one situation: importance-weighted mixture
/// samples (or equal weights for filtered targets) and data-started chains.
inline std::pair<VectorXd, VectorXd> model_term_situation(const ProductModel& m, int s, const TargetDensity& target,
                                                          const MixtureVariational* var,
                                                          const std::vector<int>& starts, const Dataset& data,
                                                          int n_mix, int n_chain, int chain_steps, double h,
                                                          std::mt19937_64& rng) {
  const Eigen::Index P = num_parameters(m);
  VectorXd mean = VectorXd::Zero(P), var_sum = VectorXd::Zero(P);
  double total = 0.0;
  if (n_mix > 0) {
    require(var != nullptr, "model term needs a mixture");
    const MatrixXd X = mix_sample(*var, n_mix, rng());
    VectorXd w = VectorXd::Constant(n_mix, 1.0 / n_mix);
    if (target.has_logpdf) w = softmax(log_importance_weights(*var, target, X));
    detail::Accumulator acc(P);
    for (int i = 0; i < n_mix; ++i) acc.add(grad_params(m, X.row(i).transpose(), s), w[i]);
    const double ess = 1.0 / w.squaredNorm();
    mean += n_mix * acc.mean();
    var_sum += static_cast<double>(n_mix) * n_mix * acc.se(ess).cwiseAbs2();
    total += n_mix;
  }
  if (n_chain > 0) {
    std::uniform_int_distribution<std::size_t> pick(0, starts.size() - 1);
    detail::Accumulator acc(P);
    for (int c = 0; c < n_chain; ++c) {
      const VectorXd x = langevin_chain(target, data.row(starts[pick(rng)]), chain_steps, h, rng);
      acc.add(grad_params(m, x, s));
    }
    mean += n_chain * acc.mean();
    var_sum += static_cast<double>(n_chain) * n_chain * acc.se(n_chain).cwiseAbs2();
    total += n_chain;
  }
  return {mean / total, var_sum.cwiseSqrt() / total};
}

/// Trainer state: the model, one mixture fitter per situation and the RNG.
class Trainer {
 public:
  Trainer(ProductModel model, Dataset data, TrainOptions opts)
      : model_(std::move(model)), data_(std::move(data)), opts_(opts), adam_(opts.expert_lr), rng_(opts.seed) {
    validate_model(model_);
    validate_dataset(data_, model_);
    validate_options(opts_);
    if (opts_.method == Method::Cd && opts_.hierarchy)
      throw ContractError("contrastive divergence needs a log density and cannot train a filtered product");
    rho_ = opts_.method == Method::Cd ? 1.0 : opts_.chain_fraction.value_or(opts_.hierarchy ? 0.0 : 0.5);
    if (opts_.hierarchy && rho_ > 0.0)
      warnings_.push_back("chains on a filtered product run unadjusted Langevin (no Metropolis correction)");
    groups_ = data_.by_situation(model_.situations());
    for (int s = 0; s < model_.situations(); ++s)
      if (groups_[static_cast<std::size_t>(s)].empty())
        throw ContractError("situation " + std::to_string(s) + " has no samples");
    if (opts_.method == Method::Vi) {
      for (int s = 0; s < model_.situations(); ++s) {
        const auto init = init_mixture(opts_.vi_components, model_.tree.limits(), opts_.seed * 7919 + 17 * s + 1);
        fitters_.emplace_back(init, FitOptions{.steps = 0, .lr = opts_.vi_lr, .n_samples = opts_.vi_samples,
                                               .seed = opts_.seed * 104729 + 31 * s + 3});
        const auto& rows = groups_[static_cast<std::size_t>(s)];
        MatrixXd own(static_cast<Eigen::Index>(rows.size()), model_.dof());
        for (std::size_t i = 0; i < rows.size(); ++i) own.row(static_cast<Eigen::Index>(i)) = data_.samples.row(rows[i]);
        fitters_.back().set_rescue_candidates(std::move(own));
      }
    }
  }

  const ProductModel& model() const { return model_; }
  const std::vector<std::string>& warnings() const { return warnings_; }

  std::vector<MixtureVariational> mixtures() const {
    std::vector<MixtureVariational> out;
    for (const auto& f : fitters_) out.push_back(f.mixture());
    return out;
  }

  /// Refreshes every situation's mixture on the current model; returns the
  /// situation-averaged last ELBO estimate.
  double refresh(int steps) {
    double acc = 0.0;
    for (int s = 0; s < static_cast<int>(fitters_.size()); ++s) {
      const auto target = poe_target(model_, s, opts_.hierarchy);
      double last = 0.0;
      for (int i = 0; i < steps; ++i) last = fitters_[static_cast<std::size_t>(s)].step(target);
      acc += last / static_cast<double>(fitters_.size());
    }
    return acc;
  }

  GradientTerms gradient_terms() {
    GradientTerms t;
    std::tie(t.data, t.data_se) = data_term(model_, data_);
    const Eigen::Index P = t.data.size();
    t.model = VectorXd::Zero(P);
    VectorXd var = VectorXd::Zero(P);
    const int n = opts_.model_samples;
    const int n_chain = static_cast<int>(std::lround(rho_ * n));
    const int n_mix = n - n_chain;
    const int chain_steps = opts_.cd_steps;
    for (int s = 0; s < model_.situations(); ++s) {
      const auto& starts = groups_[static_cast<std::size_t>(s)];
      const double frac = static_cast<double>(starts.size()) / data_.size();
      const auto target = poe_target(model_, s, opts_.hierarchy);
      const MixtureVariational* mix = fitters_.empty() ? nullptr : &fitters_[static_cast<std::size_t>(s)].mixture();
      const auto [mean, se] = model_term_situation(model_, s, target, mix, starts, data_, n_mix, n_chain, chain_steps,
                                                   opts_.cd_step_size, rng_);
      t.model += frac * mean;
      var += frac * frac * se.cwiseAbs2();
    }
    t.model_se = var.cwiseSqrt();
    return t;
  }

  /// One ascent step on the log-likelihood. Returns the terms used.
  GradientTerms update() {
    GradientTerms t = gradient_terms();
    const VectorXd theta = get_parameters(model_) + adam_.step(t.gap());
    if (!theta.allFinite()) throw NumericalError("parameter update produced non-finite values");
    ProductModel next = with_parameters(model_, theta);
    for (int i = 0; i < data_.size(); ++i)
      if (!std::isfinite(log_unnorm(next, data_.row(i), data_.label(i))))
        throw NumericalError("model density became non-finite on the data");
    model_ = std::move(next);
    return t;
  }

  TrainResult run() {
    const auto start = std::chrono::steady_clock::now();
    TrainResult r;
    r.report.method = method_name(opts_.method) + (opts_.hierarchy ? "-ns" : "");
    r.report.warnings = warnings_;
    ProductModel last_good = model_;
    try {
      if (opts_.method == Method::Vi) refresh(opts_.vi_warmup_steps);
      for (int step = 0; step < opts_.outer_steps; ++step) {
        if (opts_.method == Method::Vi) r.report.elbo_trace.push_back(refresh(opts_.vi_refresh_steps));
        const GradientTerms t = update();
        last_good = model_;
        r.report.data_norm.push_back(t.data.norm());
        r.report.model_norm.push_back(t.model.norm());
        r.report.gap_norm.push_back(t.gap().norm());
        r.report.steps = step + 1;
      }
      if (opts_.method == Method::Vi) refresh(opts_.vi_refresh_steps);
      r.report.grad_gap = gradient_terms().gap().norm();
    } catch (const NumericalError& e) {
      model_ = last_good;
      r.report.aborted = true;
      r.report.message = e.what();
    }
    r.model = model_;
    r.mixtures = mixtures();
    r.report.wallclock_s = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    return r;
  }

 private:
  ProductModel model_;
  Dataset data_;
  TrainOptions opts_;
  Adam adam_;
  std::mt19937_64 rng_;
  double rho_ = 0.5;
  std::vector<std::vector<int>> groups_;
  std::vector<MixtureFitter> fitters_;
  std::vector<std::string> warnings_;
};

inline TrainResult train_vi(const ProductModel& model, const Dataset& data, TrainOptions opts) {
  opts.method = Method::Vi;
  return Trainer(model, data, opts).run();
}

inline TrainResult train_cd(const ProductModel& model, const Dataset& data, TrainOptions opts) {
  opts.method = Method::Cd;
  return Trainer(model, data, opts).run();
}

// ---------------------------------------------------------------------------
// Evaluation

struct LoglikReport {
  double value = 0.0;
  double std_error = 0.0;
  bool low_ess = false;
};

/// Mean normalized log-likelihood (1/N) sum log p~(q_n | s_n) - log C_s, with
/// each C_s importance-sampled from its mixture.
inline LoglikReport loglik_report(const ProductModel& m, const std::vector<MixtureVariational>& vars,
                                  const Dataset& data, int n = 20000, std::uint64_t seed = 0) {
  validate_dataset(data, m);
  require(static_cast<int>(vars.size()) == m.situations(), "one mixture per situation required");
  LoglikReport r;
  double var = 0.0;
  const auto groups = data.by_situation(m.situations());
  for (int s = 0; s < m.situations(); ++s) {
    const auto& idx = groups[static_cast<std::size_t>(s)];
    if (idx.empty()) continue;
    const auto c = log_normalizer(vars[static_cast<std::size_t>(s)], poe_target(m, s), n, seed + static_cast<std::uint64_t>(s));
    const double frac = static_cast<double>(idx.size()) / data.size();
    double sum = 0.0;
    for (int i : idx) sum += log_unnorm(m, data.row(i), s);
    r.value += sum / data.size() - frac * c.value;
    var += frac * frac * c.std_error * c.std_error;
    r.low_ess = r.low_ess || c.low_ess;
  }
  r.std_error = std::sqrt(var);
  return r;
}

}  // namespace poe
