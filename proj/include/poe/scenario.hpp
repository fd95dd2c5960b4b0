#pragma once

// Scenario configuration, ground-truth data generation and experiment runs.

#include <algorithm>
#include <filesystem>
#include <map>

#include "poe/io.hpp"
#include "poe/metrics.hpp"
#include "poe/svg.hpp"

namespace poe {

inline constexpr int kSchemaVersion = 1;

// ---------------------------------------------------------------------------
// Mixture approximation of an arbitrary target

struct ApproxOptions {
  int components = 50;
  int steps = 6000;
  double lr = 1e-3;
  int samples = 200;
  int support_steps = 2000;  ///< unadjusted Langevin steps bringing each seed onto the support
  double support_step = 1e-4;
  double init_scale = 0.02;  ///< initial component std
};

inline void validate_approx(const ApproxOptions& o) {
  require(o.components >= 1 && o.steps >= 0 && o.samples >= 1, "invalid approximation sizes");
  require(o.lr > 0.0 && o.support_step > 0.0 && o.init_scale > 0.0 && o.support_steps >= 0,
          "approximation step sizes must be positive");
}

/// Fits a mixture to `target`. Component means start where unadjusted
/// Langevin chains launched uniformly in `box` end up, which places them on
/// thin supports that a uniform initialization rarely hits.
inline MixtureVariational approximate(const TargetDensity& target, const std::vector<std::pair<double, double>>& box,
                                      const ApproxOptions& o, std::uint64_t seed) {
  validate_approx(o);
  require(static_cast<int>(box.size()) == target.dim, "box and target dimensions differ");
  TargetDensity walker = target;
  walker.has_logpdf = false;
  std::mt19937_64 rng(seed);
  MixtureVariational v;
  v.logits = VectorXd::Zero(o.components);
  for (int k = 0; k < o.components; ++k) {
    VectorXd x(target.dim);
    for (int i = 0; i < target.dim; ++i) {
      const auto [lo, hi] = box[static_cast<std::size_t>(i)];
      x[i] = std::uniform_real_distribution<double>(lo, hi)(rng);
    }
    x = langevin_chain(walker, x, o.support_steps, o.support_step, rng);
    if (!x.allFinite()) throw NumericalError("support search diverged; lower support_step");
    v.components.push_back({x, o.init_scale * MatrixXd::Identity(target.dim, target.dim)});
  }
  return fit(v, target, {.steps = o.steps, .lr = o.lr, .n_samples = o.samples, .seed = seed ^ 0x5bd1e995ULL}).var;
}

/// n mixture samples inside the box, by rejection.
inline MatrixXd sample_in_box(const MixtureVariational& v, int n, const std::vector<std::pair<double, double>>& box,
                              std::uint64_t seed) {
  MatrixXd out(n, v.dim());
  int filled = 0;
  for (std::uint64_t round = 0; filled < n; ++round) {
    if (round == 1000) throw NumericalError("mixture puts almost no mass inside the joint limits");
    const MatrixXd X = mix_sample(v, std::max(2 * n, 64), seed + 7919 * round);
    for (Eigen::Index i = 0; i < X.rows() && filled < n; ++i) {
      bool inside = true;
      for (int j = 0; j < v.dim(); ++j)
        inside = inside && X(i, j) >= box[static_cast<std::size_t>(j)].first && X(i, j) <= box[static_cast<std::size_t>(j)].second;
      if (inside) out.row(filled++) = X.row(i);
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Configuration

enum class MetricKind { Grid, Mixture, Mmd };

inline std::string metric_name(MetricKind k) {
  switch (k) {
    case MetricKind::Grid: return "grid_alpha_half";
    case MetricKind::Mixture: return "mixture_alpha_half";
    case MetricKind::Mmd: return "mmd_u";
  }
  return "";
}

struct DatasetSpec {
  int n_per_situation = 30;
  std::uint64_t seed = 0;
  bool heldout = false;  ///< last situation is kept out of training
  ApproxOptions approx;
};

struct MetricOptions {
  MetricKind kind = MetricKind::Grid;
  int grid_resolution = 300;
  int is_samples = 200000;
  ApproxOptions approx;  ///< used for learned models
  int mmd_samples = 500;
  double mmd_gamma = 0.1;
  int mmd_entry = 0;  ///< entry whose ground-truth map gives the compared positions
  int mala_steps = 100;
  double mala_step = 1e-4;
};

inline const std::vector<std::string>& known_methods() {
  static const std::vector<std::string> m = {"independent", "vi", "cd", "poens"};
  return m;
}

struct ScenarioConfig {
  std::string name;
  ProductModel ground_truth;
  DatasetSpec dataset;
  std::vector<std::string> methods;
  std::vector<std::uint64_t> seeds;
  double log_sigma_jitter = 0.0;  ///< U(-a, a) shift of every trainable log sigma per seed
  TrainOptions trainer;
  MetricOptions metric;
  Json published = Json::object();  ///< published reference values per method

  int situations() const { return ground_truth.situations(); }
  int training_situations() const { return situations() - (dataset.heldout ? 1 : 0); }
};

inline void validate_config(const ScenarioConfig& c) {
  auto check = [](bool ok, const std::string& msg) {
    if (!ok) throw ValidationError("config: " + msg);
  };
  check(!c.methods.empty(), "method list is empty");
  for (const auto& m : c.methods)
    check(std::find(known_methods().begin(), known_methods().end(), m) != known_methods().end(),
          "unknown method '" + m + "'");
  check(!c.seeds.empty(), "seed list is empty");
  check(c.dataset.n_per_situation >= 2, "n_per_situation must be at least 2");
  check(c.log_sigma_jitter >= 0.0, "log_sigma_jitter must be non-negative");
  try {
    validate_model(c.ground_truth);
    validate_options(c.trainer);
    validate_approx(c.dataset.approx);
    validate_approx(c.metric.approx);
  } catch (const ContractError& e) {
    throw ValidationError(std::string("config: ") + e.what());
  }
  if (c.dataset.heldout) check(c.situations() >= 3, "a held-out situation needs at least 2 training situations");
  const bool has_poens = std::find(c.methods.begin(), c.methods.end(), "poens") != c.methods.end();
  switch (c.metric.kind) {
    case MetricKind::Grid:
      check(!c.ground_truth.has_hierarchy() && !has_poens, "grid divergence needs log densities (no hierarchy)");
      check(c.ground_truth.dof() <= 3, "grid divergence supports at most 3 joints");
      check(c.metric.grid_resolution >= 16, "grid_resolution must be at least 16");
      break;
    case MetricKind::Mixture:
      check(c.metric.is_samples >= 2, "is_samples must be at least 2");
      break;
    case MetricKind::Mmd:
      check(c.dataset.heldout, "mmd metric is evaluated on the held-out situation");
      check(c.metric.mmd_samples >= 3 && c.metric.mmd_gamma > 0.0, "invalid mmd options");
      check(c.metric.mmd_entry >= 0 && c.metric.mmd_entry < static_cast<int>(c.ground_truth.entries.size()),
            "mmd_entry out of range");
      break;
  }
  if (std::find(c.methods.begin(), c.methods.end(), "cd") != c.methods.end())
    check(!c.trainer.hierarchy, "cd cannot train a filtered product");
}

namespace detail {

inline ApproxOptions approx_from_json(const Json& j, ApproxOptions o = {}) {
  if (j.is_null()) return o;
  o.components = value_or(j, "components", o.components);
  o.steps = value_or(j, "steps", o.steps);
  o.lr = value_or(j, "lr", o.lr);
  o.samples = value_or(j, "samples", o.samples);
  o.support_steps = value_or(j, "support_steps", o.support_steps);
  o.support_step = value_or(j, "support_step", o.support_step);
  o.init_scale = value_or(j, "init_scale", o.init_scale);
  return o;
}

inline Json approx_to_json(const ApproxOptions& o) {
  return {{"components", o.components}, {"steps", o.steps}, {"lr", o.lr}, {"samples", o.samples},
          {"support_steps", o.support_steps}, {"support_step", o.support_step}, {"init_scale", o.init_scale}};
}

}  // namespace detail

inline TrainOptions train_options_from_json(const Json& j) {
  TrainOptions o;
  if (j.is_null()) return o;
  using detail::value_or;
  o.outer_steps = value_or(j, "outer_steps", o.outer_steps);
  o.expert_lr = value_or(j, "expert_lr", o.expert_lr);
  o.vi_refresh_steps = value_or(j, "vi_refresh_steps", o.vi_refresh_steps);
  o.model_samples = value_or(j, "model_samples", o.model_samples);
  if (j.contains("chain_fraction")) o.chain_fraction = j["chain_fraction"].get<double>();
  o.cd_steps = value_or(j, "cd_steps", o.cd_steps);
  o.cd_step_size = value_or(j, "cd_step_size", o.cd_step_size);
  o.vi_components = value_or(j, "vi_components", o.vi_components);
  o.vi_warmup_steps = value_or(j, "vi_warmup_steps", o.vi_warmup_steps);
  o.vi_samples = value_or(j, "vi_samples", o.vi_samples);
  o.vi_lr = value_or(j, "vi_lr", o.vi_lr);
  return o;
}

inline Json to_json(const TrainOptions& o) {
  Json j = {{"outer_steps", o.outer_steps},       {"expert_lr", o.expert_lr},
            {"vi_refresh_steps", o.vi_refresh_steps}, {"model_samples", o.model_samples},
            {"cd_steps", o.cd_steps},             {"cd_step_size", o.cd_step_size},
            {"vi_components", o.vi_components},   {"vi_warmup_steps", o.vi_warmup_steps},
            {"vi_samples", o.vi_samples},         {"vi_lr", o.vi_lr}};
  if (o.chain_fraction) j["chain_fraction"] = *o.chain_fraction;
  return j;
}

inline ScenarioConfig config_from_json(const Json& j) {
  using detail::value_or;
  try {
    if (!j.is_object()) throw ValidationError("config: expected a JSON object");
    const int version = detail::integer(detail::field(j, "schema_version", "config"), "config.schema_version");
    if (version != kSchemaVersion)
      throw ValidationError("config: unsupported schema_version " + std::to_string(version));
    ScenarioConfig c;
    c.name = value_or<std::string>(j, "name", "scenario");
    c.ground_truth = model_from_json(detail::field(j, "model", "config"), value_or(j, "situations", 1));
    if (const auto it = j.find("dataset"); it != j.end()) {
      c.dataset.n_per_situation = value_or(*it, "n_per_situation", c.dataset.n_per_situation);
      c.dataset.seed = value_or<std::uint64_t>(*it, "seed", c.dataset.seed);
      c.dataset.heldout = value_or(*it, "heldout", false);
      c.dataset.approx = detail::approx_from_json(it->value("approx", Json()));
    }
    c.methods = detail::field(j, "methods", "config").get<std::vector<std::string>>();
    c.seeds = value_or(j, "seeds", std::vector<std::uint64_t>{0});
    if (const auto it = j.find("init"); it != j.end()) c.log_sigma_jitter = value_or(*it, "log_sigma_jitter", 0.0);
    c.trainer = train_options_from_json(j.value("trainer", Json()));
    if (const auto it = j.find("metric"); it != j.end()) {
      const auto kind = value_or<std::string>(*it, "kind", "grid");
      if (kind == "grid") c.metric.kind = MetricKind::Grid;
      else if (kind == "mixture") c.metric.kind = MetricKind::Mixture;
      else if (kind == "mmd") c.metric.kind = MetricKind::Mmd;
      else throw ValidationError("config: unknown metric kind '" + kind + "'");
      auto& m = c.metric;
      m.grid_resolution = value_or(*it, "grid_resolution", m.grid_resolution);
      m.is_samples = value_or(*it, "is_samples", m.is_samples);
      m.approx = detail::approx_from_json(it->value("approx", Json()));
      m.mmd_samples = value_or(*it, "mmd_samples", m.mmd_samples);
      m.mmd_gamma = value_or(*it, "mmd_gamma", m.mmd_gamma);
      m.mmd_entry = value_or(*it, "mmd_entry", m.mmd_entry);
      m.mala_steps = value_or(*it, "mala_steps", m.mala_steps);
      m.mala_step = value_or(*it, "mala_step", m.mala_step);
    }
    c.published = j.value("published", Json::object());
    validate_config(c);
    return c;
  } catch (const Json::exception& e) {
    throw ValidationError(std::string("config: ") + e.what());
  }
}

inline ScenarioConfig read_config(const std::string& path) { return config_from_json(read_json(path)); }

// ---------------------------------------------------------------------------
// Ground truth

struct GeneratedScenario {
  Dataset data;                                ///< every situation, held-out one included
  std::vector<MixtureVariational> mixtures;    ///< ground-truth approximation per situation
};

inline GeneratedScenario generate_scenario(const ScenarioConfig& c) {
  validate_config(c);
  const auto& gt = c.ground_truth;
  const int n = c.dataset.n_per_situation;
  GeneratedScenario g;
  g.data.samples.resize(static_cast<Eigen::Index>(n) * c.situations(), gt.dof());
  for (int s = 0; s < c.situations(); ++s) {
    const auto target = poe_target(gt, s, gt.has_hierarchy());
    const std::uint64_t seed = c.dataset.seed * 1000003ULL + static_cast<std::uint64_t>(s) * 101ULL;
    g.mixtures.push_back(approximate(target, gt.tree.limits(), c.dataset.approx, seed));
    g.data.samples.middleRows(static_cast<Eigen::Index>(s) * n, n) =
        sample_in_box(g.mixtures.back(), n, gt.tree.limits(), seed + 17);
    if (c.situations() > 1) g.data.situation.insert(g.data.situation.end(), static_cast<std::size_t>(n), s);
  }
  return g;
}

/// The ground-truth structure restricted to the training situations.
inline ProductModel training_skeleton(const ScenarioConfig& c) {
  ProductModel m = c.ground_truth;
  if (!c.dataset.heldout) return m;
  for (auto& e : m.entries)
    if (e.experts.size() > 1) e.experts.pop_back();
  return m;
}

inline Dataset training_data(const ScenarioConfig& c, const Dataset& all) {
  if (!c.dataset.heldout) return all;
  std::vector<int> idx;
  for (int i = 0; i < all.size(); ++i)
    if (all.label(i) < c.training_situations()) idx.push_back(i);
  Dataset d = all.subset(idx);
  if (c.training_situations() == 1) d.situation.clear();
  return d;
}

/// Appends a situation whose bound fields come from `source` situation `s`
/// (a target given at test time) and whose tied fields stay learned.
inline ProductModel with_situation_from(const ProductModel& learned, const ProductModel& source, int s) {
  require(learned.entries.size() == source.entries.size(), "models have different entries");
  ProductModel out = learned;
  for (std::size_t i = 0; i < out.entries.size(); ++i) {
    auto& e = out.entries[i];
    if (e.bound_fields.empty()) continue;
    const auto layout = field_layout(e.experts.front());
    VectorXd p = expert_params(e.experts.front());
    const VectorXd ps = expert_params(source.entries[i].expert(s));
    for (const auto& f : e.bound_fields) {
      const auto& sl = find_field(layout, f);
      p.segment(sl.offset, sl.size) = ps.segment(sl.offset, sl.size);
    }
    e.experts.push_back(with_params(e.experts.front(), p));
  }
  return out;
}

/// Shifts every non-frozen log sigma field by U(-a, a); tied fields get one
/// draw per entry so situation copies stay equal.
inline ProductModel jitter_log_sigma(const ProductModel& m, double a, std::uint64_t seed) {
  if (a <= 0.0) return m;
  std::mt19937_64 rng(seed ^ 0x6a09e667f3bcc908ULL);
  std::uniform_real_distribution<double> u(-a, a);
  ProductModel out = m;
  for (auto& e : out.entries) {
    if (std::find(e.frozen_fields.begin(), e.frozen_fields.end(), "log_sigma") != e.frozen_fields.end()) continue;
    const auto layout = field_layout(e.experts.front());
    const auto it = std::find_if(layout.begin(), layout.end(), [](const FieldSlice& f) { return f.name == "log_sigma"; });
    if (it == layout.end()) continue;
    const bool bound = std::find(e.bound_fields.begin(), e.bound_fields.end(), "log_sigma") != e.bound_fields.end();
    VectorXd shift(it->size);
    for (auto& v : shift) v = u(rng);
    for (auto& x : e.experts) {
      if (bound)
        for (auto& v : shift) v = u(rng);
      VectorXd p = expert_params(x);
      p.segment(it->offset, it->size) += shift;
      x = with_params(x, p);
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Runs

struct RunOutcome {
  std::string method;
  std::uint64_t seed = 0;
  ProductModel model;
  std::optional<TrainReport> report;  ///< absent for independent initialization
};

inline RunOutcome run_method(const ScenarioConfig& c, const Dataset& all, const std::string& method, std::uint64_t seed) {
  const Dataset data = training_data(c, all);
  RunOutcome r{method, seed, init_independent(training_skeleton(c), data), std::nullopt};
  if (method == "independent") return r;
  TrainOptions o = c.trainer;
  o.seed = seed;
  o.hierarchy = method == "poens";
  const ProductModel start = jitter_log_sigma(r.model, c.log_sigma_jitter, seed);
  TrainResult t = method == "cd" ? train_cd(start, data, o) : train_vi(start, data, o);
  r.model = std::move(t.model);
  r.report = std::move(t.report);
  return r;
}

struct Evaluation {
  Divergence value;
  MatrixXd samples;  ///< configurations drawn from the learned model, for plots (may be empty)
};

/// Compares a learned model with the ground truth using the configured metric.
/// `filtered` evaluates the nullspace-filtered product.
inline Evaluation evaluate_model(const ScenarioConfig& c, const GeneratedScenario& g, const ProductModel& model,
                                 bool filtered, std::uint64_t seed, bool want_samples = false) {
  const auto& gt = c.ground_truth;
  const auto& box = gt.tree.limits();
  Evaluation ev;
  switch (c.metric.kind) {
    case MetricKind::Grid: {
      const auto grid = GridSpec::box(box, c.metric.grid_resolution);
      double var = 0.0;
      for (int s = 0; s < c.situations(); ++s) {
        const auto d = alpha_half_divergence_with_error([&](const VectorXd& q) { return log_unnorm(gt, q, s); },
                                                        [&](const VectorXd& q) { return log_unnorm(model, q, s); }, grid);
        ev.value.value += d.value / c.situations();
        var += d.error * d.error;
      }
      ev.value.error = std::sqrt(var) / c.situations();
      if (want_samples)
        ev.samples = mix_sample(approximate(poe_target(model, 0), box, c.metric.approx, seed), 300, seed + 1);
      break;
    }
    case MetricKind::Mixture: {
      double var = 0.0;
      for (int s = 0; s < c.situations(); ++s) {
        const auto& ref = g.mixtures[static_cast<std::size_t>(s)];
        const auto mix = approximate(poe_target(model, s, filtered), box, c.metric.approx, seed * 7919ULL + 13ULL * s + 5);
        const auto d = alpha_half_divergence_is([&](const VectorXd& q) { return mix_logpdf(ref, q); },
                                                [&](const VectorXd& q) { return mix_logpdf(mix, q); },
                                                combine_mixtures(ref, mix), c.metric.is_samples, seed + 31ULL * s);
        ev.value.value += d.value / c.situations();
        var += d.error * d.error;
        if (want_samples && s == 0) ev.samples = mix_sample(mix, 300, seed + 1);
      }
      ev.value.error = std::sqrt(var) / c.situations();
      break;
    }
    case MetricKind::Mmd: {
      const int s = c.situations() - 1;
      const ProductModel full = with_situation_from(model, gt, s);
      const auto target = poe_target(full, s, filtered);
      const auto mix = approximate(target, box, c.metric.approx, seed * 7919ULL + 5);
      const MatrixXd Xl = sample_target(mix, target, c.metric.mmd_samples, seed + 1, c.metric.mala_steps, c.metric.mala_step);
      const MatrixXd Xg = sample_target(g.mixtures[static_cast<std::size_t>(s)], poe_target(gt, s, gt.has_hierarchy()),
                                        c.metric.mmd_samples, seed + 2, c.metric.mala_steps, c.metric.mala_step);
      const auto& map = gt.entries[static_cast<std::size_t>(c.metric.mmd_entry)].map;
      auto positions = [&](const MatrixXd& X) {
        MatrixXd Y(X.rows(), output_dim(map, gt.tree));
        for (Eigen::Index i = 0; i < X.rows(); ++i) Y.row(i) = map_value(map, gt.tree, VectorXd(X.row(i).transpose())).transpose();
        return Y;
      };
      ev.value = mmd_u_with_error(positions(Xl), positions(Xg), c.metric.mmd_gamma);
      if (want_samples) ev.samples = Xl;
      break;
    }
  }
  return ev;
}

// ---------------------------------------------------------------------------
// Report

struct RunRecord {
  std::string method;
  std::uint64_t seed = 0;
  std::optional<Divergence> metric;
  double train_wallclock_s = 0.0;
  bool aborted = false;
  std::string error;  ///< stage failure, if any
  Json model;
  Json map_params = Json::array();  ///< trainable map parameters per entry
  std::vector<double> elbo_trace;
};

struct ExperimentReport {
  std::string scenario;
  MetricKind metric = MetricKind::Grid;
  std::vector<std::string> methods;
  std::vector<std::uint64_t> seeds;
  std::vector<RunRecord> runs;
  Json ground_truth;
  Json published = Json::object();
  std::vector<std::string> notes;
  std::map<std::string, MatrixXd> samples;  ///< first-seed samples per method, for plots
  MatrixXd data;

  /// Median metric value of a method over successful runs; NaN when none.
  double median(const std::string& method) const {
    std::vector<double> v;
    for (const auto& r : runs)
      if (r.method == method && r.metric) v.push_back(r.metric->value);
    if (v.empty()) return std::numeric_limits<double>::quiet_NaN();
    std::sort(v.begin(), v.end());
    const auto n = v.size();
    return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
  }

  const RunRecord* find(const std::string& method, std::uint64_t seed) const {
    for (const auto& r : runs)
      if (r.method == method && r.seed == seed) return &r;
    return nullptr;
  }
};

inline Json map_params_json(const ProductModel& m) {
  Json out = Json::array();
  for (const auto& e : m.entries) out.push_back(map_param_count(e.map) > 0 ? to_json(map_params(e.map)) : Json());
  return out;
}

inline Json to_json(const ExperimentReport& r) {
  Json methods = Json::array();
  for (const auto& m : r.methods) {
    Json runs = Json::array();
    for (const auto& x : r.runs) {
      if (x.method != m) continue;
      Json run = {{"seed", x.seed},
                  {"value", x.metric ? Json(x.metric->value) : Json()},
                  {"error", x.metric ? Json(x.metric->error) : Json()},
                  {"train_wallclock_s", x.train_wallclock_s},
                  {"aborted", x.aborted},
                  {"failure", x.error},
                  {"map_params", x.map_params},
                  {"model", x.model}};
      runs.push_back(std::move(run));
    }
    const double med = r.median(m);
    methods.push_back({{"method", m},
                       {"median", std::isfinite(med) ? Json(med) : Json()},
                       {"published", r.published.value(m, Json())},
                       {"runs", runs}});
  }
  return {{"schema_version", kSchemaVersion}, {"scenario", r.scenario},     {"metric", metric_name(r.metric)},
          {"seeds", r.seeds},                 {"methods", methods},         {"ground_truth", r.ground_truth},
          {"notes", r.notes}};
}

/// Plots of the first seed: joint-space scatter of data and model samples and
/// the VI objective trace.
inline void write_plots(const ExperimentReport& r, const std::string& dir) {
  namespace fs = std::filesystem;
  std::vector<svg::Series> pts;
  auto cols = [](const MatrixXd& X, int j) { return std::vector<double>(X.col(j).data(), X.col(j).data() + X.rows()); };
  if (r.data.cols() >= 2) pts.push_back({"data", "#000000", cols(r.data, 0), cols(r.data, 1)});
  std::size_t k = 0;
  for (const auto& [name, X] : r.samples)
    if (X.cols() >= 2) pts.push_back({name, svg::palette()[k++ % svg::palette().size()], cols(X, 0), cols(X, 1)});
  write_text((fs::path(dir) / "scatter.svg").string(), svg::scatter(r.scenario + ": samples", "q0", "q1", pts));

  std::vector<svg::Series> trace;
  k = 0;
  for (const auto& m : r.methods) {
    const auto* run = r.find(m, r.seeds.front());
    if (!run || run->elbo_trace.empty()) continue;
    svg::Series s{m, svg::palette()[k++ % svg::palette().size()], {}, run->elbo_trace};
    for (std::size_t i = 0; i < s.y.size(); ++i) s.x.push_back(static_cast<double>(i));
    trace.push_back(std::move(s));
    std::string csv = "step,elbo\n";
    for (std::size_t i = 0; i < run->elbo_trace.size(); ++i) csv += std::to_string(i) + "," + format_double(run->elbo_trace[i]) + "\n";
    write_text((fs::path(dir) / ("elbo_" + m + ".csv")).string(), csv);
  }
  write_text((fs::path(dir) / "elbo.svg").string(), svg::lines(r.scenario + ": ELBO", "outer step", "ELBO", trace));
}

/// Generates the scenario, runs every method for every seed, evaluates each
/// run against the ground truth and, when `out_dir` is given, writes the
/// dataset, report.json and plots there. Failed stages are recorded in the
/// report instead of aborting the experiment.
inline ExperimentReport run_experiment(const ScenarioConfig& c, const std::string& out_dir = "") {
  validate_config(c);
  const GeneratedScenario g = generate_scenario(c);
  ExperimentReport r;
  r.scenario = c.name;
  r.metric = c.metric.kind;
  r.methods = c.methods;
  r.seeds = c.seeds;
  r.published = c.published;
  r.ground_truth = to_json(c.ground_truth);
  r.data = training_data(c, g.data).samples;
  if (c.dataset.heldout) r.notes.push_back("metric evaluated on held-out situation " + std::to_string(c.situations() - 1));
  for (const auto& m : c.methods) {
    for (const auto seed : c.seeds) {
      RunRecord rec;
      rec.method = m;
      rec.seed = seed;
      try {
        const RunOutcome run = run_method(c, g.data, m, seed);
        rec.model = to_json(run.model);
        rec.map_params = map_params_json(run.model);
        if (run.report) {
          rec.train_wallclock_s = run.report->wallclock_s;
          rec.aborted = run.report->aborted;
          rec.elbo_trace = run.report->elbo_trace;
          if (rec.aborted) rec.error = run.report->message;
        }
        const bool first = seed == c.seeds.front();
        auto ev = evaluate_model(c, g, run.model, m == "poens", seed + 4099, first && !out_dir.empty());
        rec.metric = ev.value;
        if (ev.samples.size()) r.samples[m] = std::move(ev.samples);
      } catch (const std::exception& e) {
        rec.error = e.what();
      }
      r.runs.push_back(std::move(rec));
    }
  }
  if (!out_dir.empty()) {
    std::filesystem::create_directories(out_dir);
    write_dataset((std::filesystem::path(out_dir) / "dataset.csv").string(), g.data);
    write_json((std::filesystem::path(out_dir) / "report.json").string(), to_json(r));
    write_plots(r, out_dir);
  }
  return r;
}

}  // namespace poe
