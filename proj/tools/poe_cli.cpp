// Command-line front end: scenario generation, training, evaluation,
// control and experiment reports.

#include <filesystem>
#include <iostream>

#include <CLI11.hpp>

#include "poe/controller.hpp"
#include "poe/scenario.hpp"

namespace fs = std::filesystem;
using namespace poe;

namespace {

struct Globals {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string out = ".";
};

std::string in_out(const Globals& g, const std::string& name) { return (fs::path(g.out) / name).string(); }

ScenarioConfig load_config(const Globals& g) {
  if (g.config.empty()) throw ValidationError("--config is required for this command");
  return read_config(g.config);
}

void ensure_out(const Globals& g) { fs::create_directories(g.out); }

Dataset load_dataset(const Globals& g) {
  const auto path = in_out(g, "dataset.csv");
  if (!fs::exists(path)) throw ValidationError("no dataset at " + path + "; run generate first");
  return read_dataset(path);
}

/// A model tag names model_<tag>.json in the output directory; anything
/// ending in .json is taken as a path.
std::string model_path(const Globals& g, const std::string& tag) {
  return tag.ends_with(".json") ? tag : in_out(g, "model_" + tag + ".json");
}

std::string tag_stem(const std::string& tag) { return tag.ends_with(".json") ? fs::path(tag).stem().string() : tag; }

ProductModel load_model(const Globals& g, const std::string& tag) {
  const auto path = model_path(g, tag);
  if (!fs::exists(path)) throw ValidationError("no trained model at " + path + "; run train or init first");
  return model_from_json(read_json(path));
}

bool is_filtered_tag(const std::string& tag) { return tag_stem(tag).find("poens") != std::string::npos; }

Json mixtures_json(const std::vector<MixtureVariational>& v) {
  Json a = Json::array();
  for (const auto& m : v) a.push_back(to_json(m));
  return {{"mixtures", a}};
}

std::vector<MixtureVariational> load_mixtures(const std::string& path, const std::string& hint) {
  if (!fs::exists(path)) throw ValidationError("no mixtures at " + path + "; " + hint);
  std::vector<MixtureVariational> out;
  const Json j = read_json(path);
  for (const auto& m : detail::field(j, "mixtures", path)) out.push_back(mixture_from_json(m));
  return out;
}

std::string matrix_csv(const std::vector<std::pair<std::string, MatrixXd>>& blocks, const VectorXd& first) {
  std::string out = "t";
  for (const auto& [name, M] : blocks)
    for (Eigen::Index j = 0; j < M.cols(); ++j) out += "," + name + std::to_string(j);
  out += "\n";
  for (Eigen::Index i = 0; i < first.size(); ++i) {
    out += format_double(first[i]);
    for (const auto& [name, M] : blocks)
      for (Eigen::Index j = 0; j < M.cols(); ++j) out += "," + format_double(M(i, j));
    out += "\n";
  }
  return out;
}

int cmd_generate(const Globals& g) {
  auto c = load_config(g);
  if (g.seed) c.dataset.seed = *g.seed;
  ensure_out(g);
  const auto gen = generate_scenario(c);
  write_dataset(in_out(g, "dataset.csv"), gen.data);
  write_json(in_out(g, "ground_truth.json"), to_json(c.ground_truth));
  write_json(in_out(g, "ground_truth_mixtures.json"), mixtures_json(gen.mixtures));
  std::cout << "wrote " << gen.data.size() << " samples to " << in_out(g, "dataset.csv") << "\n";
  return 0;
}

int cmd_init(const Globals& g) {
  const auto c = load_config(g);
  const auto data = training_data(c, load_dataset(g));
  const auto m = init_independent(training_skeleton(c), data);
  write_json(model_path(g, "independent"), to_json(m));
  std::cout << "wrote " << model_path(g, "independent") << "\n";
  return 0;
}

int cmd_train(const Globals& g, const std::string& method, bool hierarchy) {
  const auto c = load_config(g);
  const auto data = training_data(c, load_dataset(g));
  const std::uint64_t seed = g.seed.value_or(c.seeds.front());
  TrainOptions o = c.trainer;
  o.seed = seed;
  o.hierarchy = hierarchy;
  const ProductModel start = jitter_log_sigma(init_independent(training_skeleton(c), data), c.log_sigma_jitter, seed);
  const TrainResult r = method == "cd" ? train_cd(start, data, o) : train_vi(start, data, o);
  const std::string tag = hierarchy ? "poens" : method;
  write_json(model_path(g, tag), to_json(r.model));
  write_json(in_out(g, "train_" + tag + ".json"), to_json(r.report));
  if (!r.mixtures.empty()) write_json(in_out(g, "mixtures_" + tag + ".json"), mixtures_json(r.mixtures));
  std::string csv = "step,elbo,data_norm,model_norm,gap_norm\n";
  for (int i = 0; i < r.report.steps; ++i) {
    const auto k = static_cast<std::size_t>(i);
    csv += std::to_string(i) + "," + (k < r.report.elbo_trace.size() ? format_double(r.report.elbo_trace[k]) : "") + "," +
           format_double(r.report.data_norm[k]) + "," + format_double(r.report.model_norm[k]) + "," +
           format_double(r.report.gap_norm[k]) + "\n";
  }
  write_text(in_out(g, "trace_" + tag + ".csv"), csv);
  for (const auto& w : r.report.warnings) std::cerr << "warning: " << w << "\n";
  if (r.report.aborted) {
    std::cerr << "training aborted: " << r.report.message << " (last good parameters written)\n";
    return 2;
  }
  std::cout << "wrote " << model_path(g, tag) << " (" << r.report.steps << " steps, " << r.report.wallclock_s << " s)\n";
  return 0;
}

int cmd_approximate(const Globals& g, const std::string& tag) {
  const auto c = load_config(g);
  const auto m = load_model(g, tag);
  std::vector<MixtureVariational> mix;
  for (int s = 0; s < m.situations(); ++s)
    mix.push_back(approximate(poe_target(m, s, is_filtered_tag(tag)), m.tree.limits(), c.metric.approx,
                              g.seed.value_or(0) * 7919ULL + static_cast<std::uint64_t>(s)));
  write_json(in_out(g, "approx_" + tag_stem(tag) + ".json"), mixtures_json(mix));
  std::cout << "wrote " << in_out(g, "approx_" + tag_stem(tag) + ".json") << "\n";
  return 0;
}

int cmd_sample(const Globals& g, const std::string& tag, int n) {
  if (n < 1) throw ValidationError("--n must be positive");
  const auto m = load_model(g, tag);
  const auto mix = load_mixtures(in_out(g, "approx_" + tag_stem(tag) + ".json"), "run approximate first");
  if (static_cast<int>(mix.size()) != m.situations()) throw ValidationError("approximation does not match the model");
  Dataset d;
  d.samples.resize(static_cast<Eigen::Index>(n) * m.situations(), m.dof());
  for (int s = 0; s < m.situations(); ++s) {
    d.samples.middleRows(static_cast<Eigen::Index>(s) * n, n) =
        sample_in_box(mix[static_cast<std::size_t>(s)], n, m.tree.limits(), g.seed.value_or(0) + static_cast<std::uint64_t>(s));
    if (m.situations() > 1) d.situation.insert(d.situation.end(), static_cast<std::size_t>(n), s);
  }
  write_dataset(in_out(g, "samples_" + tag_stem(tag) + ".csv"), d);
  std::cout << "wrote " << in_out(g, "samples_" + tag_stem(tag) + ".csv") << "\n";
  return 0;
}

int cmd_evaluate(const Globals& g, const std::string& tag) {
  const auto c = load_config(g);
  const auto m = load_model(g, tag);
  GeneratedScenario gen;
  gen.data = load_dataset(g);
  gen.mixtures = load_mixtures(in_out(g, "ground_truth_mixtures.json"), "run generate first");
  const auto ev = evaluate_model(c, gen, m, is_filtered_tag(tag), g.seed.value_or(0) + 4099);
  const Json j = {{"model", tag_stem(tag)},
                  {"metric", metric_name(c.metric.kind)},
                  {"value", ev.value.value},
                  {"error", ev.value.error},
                  {"map_params", map_params_json(m)},
                  {"published", c.published.value(tag_stem(tag), Json())}};
  write_json(in_out(g, "eval_" + tag_stem(tag) + ".json"), j);
  std::cout << metric_name(c.metric.kind) << " = " << ev.value.value << " +- " << ev.value.error << "\n";
  return 0;
}

VectorXd start_configuration(const Globals& g, const ProductModel& m, int situation) {
  const auto d = load_dataset(g);
  for (int i = 0; i < d.size(); ++i)
    if (d.label(i) == situation && d.dof() == m.dof()) return d.row(i);
  throw ValidationError("dataset has no sample of situation " + std::to_string(situation));
}

int cmd_control(const Globals& g, const std::string& tag, int situation, int steps) {
  const auto m = load_model(g, tag);
  RolloutOptions o;
  o.steps = steps;
  o.situation = situation;
  const auto traj = rollout(m, start_configuration(g, m, situation), o);
  const MatrixXd lu = traj.log_unnorm;
  write_text(in_out(g, "control_" + tag_stem(tag) + ".csv"),
             matrix_csv({{"q", traj.q}, {"qd", traj.qd}, {"u", traj.u}, {"log_unnorm", lu}}, traj.t));
  std::cout << "wrote " << in_out(g, "control_" + tag_stem(tag) + ".csv") << "\n";
  return 0;
}

int cmd_ergodic(const Globals& g, const std::string& tag, int situation, int steps, int horizon) {
  const auto m = load_model(g, tag);
  ErgodicProblem p;
  p.target = poe_target(m, situation, is_filtered_tag(tag));
  p.horizon = horizon;
  p.sensor_cov = 0.01 * MatrixXd::Identity(m.dof(), m.dof());
  p.q0 = start_configuration(g, m, situation);
  p.steps = steps;
  p.seed = g.seed.value_or(0);
  const auto r = ergodic_optimize(p);
  VectorXd idx = VectorXd::LinSpaced(r.trajectory.rows(), 0, static_cast<double>(r.trajectory.rows() - 1));
  write_text(in_out(g, "ergodic_" + tag_stem(tag) + ".csv"), matrix_csv({{"q", r.trajectory}}, idx));
  std::cout << "objective " << r.objective.front() << " -> " << r.objective.back() << "\n";
  return 0;
}

int cmd_report(const Globals& g) {
  auto c = load_config(g);
  if (g.seed) c.seeds = {*g.seed};
  ensure_out(g);
  const auto r = run_experiment(c, g.out);
  for (const auto& m : r.methods) {
    std::cout << m << ": median " << r.median(m);
    if (const auto p = c.published.find(m); p != c.published.end() && p->contains("value"))
      std::cout << " (published " << (*p)["value"].get<double>() << ")";
    std::cout << "\n";
  }
  for (const auto& run : r.runs)
    if (!run.error.empty()) std::cerr << "run " << run.method << "/" << run.seed << " failed: " << run.error << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Product-of-experts learning and control toolkit"};
  app.require_subcommand(1);
  Globals g;
  app.add_option("--config", g.config, "scenario JSON")->check(CLI::ExistingFile);
  app.add_option("--seed", g.seed, "random seed (overrides the config)");
  app.add_option("--out", g.out, "output directory")->capture_default_str();
  app.fallthrough();

  std::string method = "vi", tag;
  bool hierarchy = false;
  int n = 500, situation = 0, steps = 1000, horizon = 50;

  auto* generate = app.add_subcommand("generate", "fit the ground truth and sample a dataset");
  auto* init = app.add_subcommand("init", "independent maximum-likelihood initialization");
  auto* train = app.add_subcommand("train", "train a product of experts");
  train->add_option("--method", method, "vi or cd")->check(CLI::IsMember({"vi", "cd"}));
  train->add_flag("--hierarchy", hierarchy, "nullspace-filtered gradients (vi only)");
  auto* approx = app.add_subcommand("approximate", "fit a mixture to a trained model");
  auto* sample = app.add_subcommand("sample", "draw samples from an approximated model");
  auto* evaluate = app.add_subcommand("evaluate", "compare a trained model with the ground truth");
  auto* control = app.add_subcommand("control", "LQT rollout toward the model's optimum");
  auto* ergodic = app.add_subcommand("ergodic", "ergodic coverage trajectory");
  auto* report = app.add_subcommand("report", "run every method and seed of the scenario");
  for (auto* sc : {approx, sample, evaluate, control, ergodic})
    sc->add_option("--model", tag, "model tag (independent, vi, cd, poens) or model JSON path")->required();
  sample->add_option("--n", n, "samples per situation")->capture_default_str();
  for (auto* sc : {control, ergodic}) sc->add_option("--situation", situation)->capture_default_str();
  control->add_option("--steps", steps, "control steps")->capture_default_str();
  ergodic->add_option("--steps", steps, "optimizer steps")->capture_default_str();
  ergodic->add_option("--horizon", horizon, "waypoints")->capture_default_str();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::cerr << "error: " << e.what() << "\n\n" << app.help();
    return 1;
  }

  try {
    if (generate->parsed()) return cmd_generate(g);
    if (init->parsed()) return cmd_init(g);
    if (train->parsed()) {
      if (hierarchy && method == "cd") throw ValidationError("--hierarchy requires --method vi");
      return cmd_train(g, method, hierarchy);
    }
    if (approx->parsed()) return cmd_approximate(g, tag);
    if (sample->parsed()) return cmd_sample(g, tag, n);
    if (evaluate->parsed()) return cmd_evaluate(g, tag);
    if (control->parsed()) return cmd_control(g, tag, situation, steps);
    if (ergodic->parsed()) return cmd_ergodic(g, tag, situation, steps, horizon);
    if (report->parsed()) return cmd_report(g);
  } catch (const NumericalError& e) {
    std::cerr << "numerical failure: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 1;
}
