// Acceptance runner: one PASS/FAIL line per criterion, details indented below.
//
//   acceptance [--scratch DIR] [--only 1,3] [--bin DIR]

#include <chrono>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <iostream>
#include <set>
#include <sstream>

#include "poe/scenario.hpp"

namespace fs = std::filesystem;
using namespace poe;

namespace {

std::string scratch = "acceptance_out";
fs::path bin_dir;

std::string fmt(double x, int digits = 4) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*g", digits, x);
  return buf;
}

struct Verdict {
  bool pass = true;
  std::vector<std::string> lines;

  void check(bool ok, const std::string& what) {
    pass = pass && ok;
    lines.push_back(std::string(ok ? "ok   " : "FAIL ") + what);
  }
  void note(const std::string& what) { lines.push_back("     " + what); }
};

ExperimentReport run_scenario(const std::string& name) {
  const auto c = read_config(std::string(POE_SOURCE_DIR) + "/scenarios/" + name + ".json");
  const auto r = run_experiment(c, (fs::path(scratch) / name).string());
  for (const auto& run : r.runs)
    if (!run.error.empty()) std::cerr << name << " " << run.method << "/" << run.seed << ": " << run.error << "\n";
  return r;
}

std::string median_line(const ExperimentReport& r, const std::string& m) {
  std::string s = m + " median " + fmt(r.median(m));
  for (const auto& run : r.runs)
    if (run.method == m)
      s += run.metric ? " [" + fmt(run.metric->value, 3) + " +- " + fmt(run.metric->error, 2) + "]" : " [failed]";
  return s;
}

double entry_sigma(const ExperimentReport& r, const std::string& method, std::size_t entry) {
  const RunRecord* run = r.find(method, r.seeds.front());
  if (run == nullptr || run->model.is_null()) return std::nan("");
  const ProductModel m = model_from_json(run->model);
  return std::exp(std::get<IsotropicGaussianExpert>(m.entries[entry].experts.front()).log_sigma);
}

Verdict multimodal() {
  Verdict v;
  const std::vector<std::pair<std::string, double>> tasks = {{"multimodal_a", 0.15}, {"multimodal_b", 0.08}, {"multimodal_c", 0.08}};
  double slowest = 0.0;
  for (const auto& [name, bound] : tasks) {
    const auto r = run_scenario(name);
    v.check(r.median("vi") <= bound, name + " " + median_line(r, "vi") + " <= " + fmt(bound));
    v.note(name + " " + median_line(r, "cd"));
    if (name == "multimodal_a")
      v.check(r.median("cd") >= 2.0 * r.median("vi"),
              "multimodal_a cd/vi median ratio " + fmt(r.median("cd") / r.median("vi")) + " >= 2");
    for (const auto& run : r.runs) slowest = std::max(slowest, run.train_wallclock_s);
  }
  v.check(slowest <= 120.0, "slowest training run " + fmt(slowest) + " s <= 120 s");
  return v;
}

Verdict bimanual() {
  Verdict v;
  const auto r = run_scenario("bimanual");
  const double ind = r.median("independent"), vi = r.median("vi"), ns = r.median("poens");
  for (const auto* m : {"independent", "vi", "poens"}) v.note(median_line(r, m));
  v.check(ind > vi && vi > ns, "ordering independent > PoE > PoENS");
  v.check(ns <= 0.20, "PoENS " + fmt(ns) + " <= 0.20");
  v.check(ind >= 1.0, "independent " + fmt(ind) + " >= 1.0");
  const double s_ns = entry_sigma(r, "poens", 1), s_ind = entry_sigma(r, "independent", 1);
  v.check(s_ns >= 0.01 && s_ns <= 0.04, "PoENS sigma_2 " + fmt(s_ns) + " within factor 2 of 0.02");
  v.check(s_ind >= 0.10, "independent sigma_2 " + fmt(s_ind) + " >= 5 x 0.02");
  return v;
}

Verdict manipulability() {
  Verdict v;
  const auto r = run_scenario("manipulability");
  for (const auto* m : {"independent", "vi", "poens"}) v.note(median_line(r, m));
  v.check(r.median("poens") <= 0.35, "PoENS " + fmt(r.median("poens")) + " <= 0.35");
  v.check(r.median("independent") >= 0.5, "independent " + fmt(r.median("independent")) + " >= 0.5");
  return v;
}

Verdict tool() {
  Verdict v;
  const auto c = read_config(std::string(POE_SOURCE_DIR) + "/scenarios/tool.json");
  const auto r = run_scenario("tool");
  const Vec2 truth = std::get<ToolMap>(c.ground_truth.entries[0].map).offset;
  for (const auto& m : r.methods) {
    const RunRecord* run = r.find(m, r.seeds.front());
    if (run == nullptr || run->model.is_null()) {
      v.check(false, m + " run failed");
      continue;
    }
    const Vec2 d = std::get<ToolMap>(model_from_json(run->model).entries[0].map).offset;
    v.check((d - truth).norm() <= 0.05, m + " tool offset (" + fmt(d.x()) + ", " + fmt(d.y()) + ") within 0.05 of (" +
                                            fmt(truth.x()) + ", " + fmt(truth.y()) + ")");
    v.check(r.median(m) <= 1e-3, m + " held-out MMD_u^2 " + median_line(r, m) + " <= 1e-3");
  }
  return v;
}

Verdict properties() {
  Verdict v;
  const std::vector<std::pair<std::string, std::string>> suites = {
      {"kinematics", "Jacobian.*:NullspaceProjector.*"},
      {"experts", "ExpertGradY.*:ExpertHessY.*:ExpertGradParams.*"},
      {"poe_core", "LogUnnorm.*:GradQ.*:GradQNs.*:GradParams.*"},
      {"variational", "Elbo.*:LogNormalizer.*:Fit.Deterministic*"},
      {"trainer", "LoglikReport.*:Trainer.DeterministicUnderSeed"},
      {"controller", "Lqt.*:Rollout.*:Ergodic.*"},
      {"metrics", "AlphaHalf.*:Mmd.*"},
      {"harness", "Scenario.GenerationIsDeterministic:Csv.*:Json.*"},
  };
  for (const auto& [suite, filter] : suites) {
    const fs::path exe = bin_dir / ("test_" + suite);
    const std::string cmd = "\"" + exe.string() + "\" --gtest_brief=1 --gtest_filter='" + filter + "' > \"" +
                            (fs::path(scratch) / ("properties_" + suite + ".log")).string() + "\" 2>&1";
    const int rc = fs::exists(exe) ? std::system(cmd.c_str()) : -1;
    v.check(rc == 0, "test_" + suite + " " + filter + (rc == -1 ? " (binary missing)" : ""));
  }
  return v;
}

Verdict fixed_point() {
  Verdict v;
  ProductModel m;
  m.tree = KinematicTree::chain({1.0, 1.0});
  m.limit_softness = 0.05;
  m.entries.push_back({IdentityMap{}, {GaussianExpert{Eigen::Vector2d(0.5, 1.0), 0.3 * MatrixXd::Identity(2, 2)}}, 0, {}, {}});
  m.entries.push_back({PositionMap{1}, {IsotropicGaussianExpert{Eigen::Vector2d(0.5, 1.5), std::log(0.5)}}, 0, {}, {}});
  const auto target = poe_target(m);
  const auto mix = fit(init_mixture(10, m.tree.limits(), 12), target, {.steps = 2000, .lr = 1e-2, .n_samples = 64, .seed = 12});
  Dataset d;
  d.samples = sample_target(mix.var, target, 2000, 13, 200, 5e-3);
  const VectorXd theta0 = get_parameters(m);
  for (Method method : {Method::Vi, Method::Cd}) {
    TrainOptions o;
    o.method = method;
    o.outer_steps = 200;
    o.expert_lr = 2e-4;
    o.model_samples = 256;
    o.vi_components = 10;
    o.vi_warmup_steps = 1500;
    o.seed = 3;
    const auto r = Trainer(m, d, o).run();
    const double drift = (get_parameters(r.model) - theta0).norm() / theta0.norm();
    v.check(!r.report.aborted && drift < 0.01,
            method_name(method) + " relative parameter drift " + fmt(drift) + " over 200 steps < 1%");
  }
  return v;
}

}  // namespace

int main(int argc, char** argv) {
  std::set<int> only;
  bin_dir = fs::absolute(fs::path(argv[0])).parent_path();
  for (int i = 1; i < argc; ++i) {
    const std::string a = argv[i];
    if (a == "--scratch" && i + 1 < argc) {
      scratch = argv[++i];
    } else if (a == "--bin" && i + 1 < argc) {
      bin_dir = argv[++i];
    } else if (a == "--only" && i + 1 < argc) {
      std::stringstream ss(argv[++i]);
      for (std::string tok; std::getline(ss, tok, ',');) only.insert(std::stoi(tok));
    } else {
      std::cerr << "usage: acceptance [--scratch DIR] [--only 1,3] [--bin DIR]\n";
      return 2;
    }
  }
  fs::create_directories(scratch);

  const std::vector<std::pair<std::string, Verdict (*)()>> criteria = {
      {"two-link multimodal tasks", multimodal},
      {"bimanual hierarchy", bimanual},
      {"manipulability hierarchy", manipulability},
      {"tool offset and held-out target", tool},
      {"property suites", properties},
      {"fixed point of both trainers", fixed_point},
  };
  bool all = true;
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    const int id = static_cast<int>(i) + 1;
    if (!only.empty() && !only.contains(id)) continue;
    const auto start = std::chrono::steady_clock::now();
    Verdict v;
    try {
      v = criteria[i].second();
    } catch (const std::exception& e) {
      v.check(false, std::string("exception: ") + e.what());
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    all = all && v.pass;
    std::cout << (v.pass ? "PASS" : "FAIL") << "  criterion " << id << ": " << criteria[i].first << " (" << fmt(secs, 3)
              << " s)\n";
    for (const auto& l : v.lines) std::cout << "      " << l << "\n";
    std::cout.flush();
  }
  return all ? 0 : 1;
}
