#include <filesystem>

#include <gtest/gtest.h>

#include "poe/scenario.hpp"
#include "testing.hpp"

using namespace poe;
using poe::testing::Gen;

namespace {

std::string scenario_path(const std::string& name) { return std::string(POE_SOURCE_DIR) + "/scenarios/" + name + ".json"; }

Json scenario_json(const std::string& name) { return read_json(scenario_path(name)); }

ProductModel sample_model(Gen& g) {
  ProductModel m;
  m.tree = KinematicTree::chain({0.6, 0.5, 0.4});
  m.limit_softness = 0.05;
  m.entries.push_back({PositionMap{2},
                       {IsotropicGaussianExpert{g.normal_vec(2), g.uniform(-2, 0)},
                        IsotropicGaussianExpert{g.normal_vec(2), g.uniform(-2, 0)}},
                       0,
                       {"mean"},
                       {}});
  m.entries.push_back({IdentityMap{}, {GaussianExpert{g.normal_vec(3), g.chol(3)}}, 1, {}, {}});
  m.entries.push_back({LogManipulabilityMap{2}, {ScalarGaussianExpert{-1.5, std::log(0.3)}}, 1, {}, {"log_sigma"}});
  m.entries.push_back({ToolMap{1, Vec2(0.1, -0.2), true}, {IsotropicGaussianExpert{g.normal_vec(2), 0.0}}, 0, {}, {}});
  return m;
}

}  // namespace

TEST(Csv, RoundTripIsBitExact) {
  Gen g(11);
  Dataset d;
  d.samples.resize(40, 3);
  for (Eigen::Index i = 0; i < d.samples.size(); ++i) d.samples.data()[i] = g.normal() * std::pow(10.0, g.integer(-12, 12));
  for (int i = 0; i < 40; ++i) d.situation.push_back(i % 3);
  const Dataset back = dataset_from_csv(dataset_to_csv(d));
  EXPECT_EQ(back.samples, d.samples);
  EXPECT_EQ(back.situation, d.situation);
  EXPECT_EQ(dataset_to_csv(back), dataset_to_csv(d));
}

TEST(Csv, HeaderWithoutSituationColumn) {
  const Dataset d = dataset_from_csv("q0,q1\n0.5,1\n-2,3e-3\n");
  ASSERT_EQ(d.size(), 2);
  EXPECT_TRUE(d.situation.empty());
  EXPECT_DOUBLE_EQ(d.samples(1, 1), 3e-3);
}

TEST(Csv, ToleratesCarriageReturns) {
  const Dataset d = dataset_from_csv("q0,q1,situation\r\n1,2,0\r\n3,4,1\r\n");
  EXPECT_EQ(d.size(), 2);
  EXPECT_EQ(d.label(1), 1);
}

TEST(Csv, RejectsMalformedInput) {
  EXPECT_THROW(dataset_from_csv("x0,x1\n1,2\n"), ValidationError);
  EXPECT_THROW(dataset_from_csv("q0,q1\n1,abc\n"), ValidationError);
  EXPECT_THROW(dataset_from_csv("q0,q1\n1\n"), ValidationError);
  EXPECT_THROW(dataset_from_csv("q0,q1,situation\n1,2,-1\n"), ValidationError);
  EXPECT_THROW(dataset_from_csv("q0,q1,situation\n1,2,0.5\n"), ValidationError);
  EXPECT_THROW(dataset_from_csv(""), ValidationError);
}

TEST(Json, ExpertFamiliesRoundTrip) {
  Gen g(3);
  const std::vector<Expert> experts = {
      GaussianExpert{g.normal_vec(3), g.chol(3)},
      IsotropicGaussianExpert{g.normal_vec(2), -0.7},
      LowRankGaussianExpert{g.normal_vec(3), g.normal_vec(3), g.normal_mat(3, 1)},
      ScalarGaussianExpert{0.3, -1.1},
      CdfExpert{0.5, -2.0, BoundSide::Above},
      UniGaussExpert{Expert{IsotropicGaussianExpert{g.normal_vec(2), 0.2}}, 1.5, 8.0},
  };
  for (const auto& e : experts) {
    const Expert back = expert_from_json(to_json(e));
    EXPECT_EQ(to_json(back), to_json(e));
    EXPECT_EQ(expert_params(back), expert_params(e));
  }
}

TEST(Json, AcceptsCovarianceAndSigmaForms) {
  const Expert a = expert_from_json(Json::parse(R"({"family":"gaussian","mean":[0,0],"cov":[[4,0],[0,1]]})"));
  EXPECT_NEAR(expert_logpdf(a, VectorXd::Zero(2)), -std::log(2 * kPi * 2.0), 1e-12);
  const Expert b = expert_from_json(Json::parse(R"({"family":"isotropic_gaussian","mean":[1,2],"sigma":0.5})"));
  EXPECT_NEAR(std::get<IsotropicGaussianExpert>(b).log_sigma, std::log(0.5), 1e-15);
  EXPECT_THROW(expert_from_json(Json::parse(R"({"family":"gaussian","mean":[0,0],"cov":[[1,2],[2,1]]})")),
               ValidationError);
  EXPECT_THROW(expert_from_json(Json::parse(R"({"family":"wishart"})")), ValidationError);
}

TEST(Json, ModelRoundTripPreservesDensity) {
  Gen g(5);
  for (int draw = 0; draw < 10; ++draw) {
    const ProductModel m = sample_model(g);
    const ProductModel back = model_from_json(to_json(m));
    EXPECT_EQ(to_json(back).dump(), to_json(m).dump());
    EXPECT_EQ(get_parameters(back), get_parameters(m));
    for (int k = 0; k < 5; ++k) {
      const VectorXd q = g.uniform_vec(3, -2, 2);
      for (int s = 0; s < 2; ++s) EXPECT_EQ(log_unnorm(back, q, s), log_unnorm(m, q, s));
    }
  }
}

TEST(Json, SingleExpertIsReplicatedForBoundEntries) {
  Gen g(1);
  Json j = to_json(sample_model(g));
  j["entries"][0].erase("experts");
  j["entries"][0]["expert"] = {{"family", "isotropic_gaussian"}, {"mean", {0.1, 0.2}}, {"sigma", 0.1}};
  EXPECT_EQ(model_from_json(j, 4).entries[0].experts.size(), 4u);
  EXPECT_EQ(model_from_json(j, 4).entries[1].experts.size(), 1u);
}

TEST(Json, InvalidModelIsAValidationError) {
  Gen g(2);
  Json j = to_json(sample_model(g));
  j["entries"][1]["priority"] = 5;
  EXPECT_THROW(model_from_json(j), ValidationError);
}

TEST(Json, MixtureRoundTrip) {
  const auto v = init_mixture(4, {{-1, 1}, {0, 2}}, 9);
  const auto back = mixture_from_json(to_json(v));
  for (const VectorXd q : {Eigen::Vector2d(0.1, 0.5), Eigen::Vector2d(-0.9, 1.9)})
    EXPECT_EQ(mix_logpdf(back, q), mix_logpdf(v, q));
}

TEST(Config, EveryShippedScenarioParses) {
  for (const auto& entry : std::filesystem::directory_iterator(std::string(POE_SOURCE_DIR) + "/scenarios")) {
    SCOPED_TRACE(entry.path().string());
    const auto c = read_config(entry.path().string());
    EXPECT_FALSE(c.methods.empty());
    EXPECT_NO_THROW(validate_config(c));
  }
}

TEST(Config, TrainerOptionsRoundTrip) {
  const auto c = read_config(scenario_path("multimodal_a"));
  const auto back = train_options_from_json(to_json(c.trainer));
  EXPECT_EQ(to_json(back), to_json(c.trainer));
  EXPECT_EQ(c.trainer.outer_steps, 1000);
  EXPECT_DOUBLE_EQ(c.trainer.cd_step_size, 0.01);
}

TEST(Config, RejectsBadConfigurations) {
  auto bad = [](const std::string& name, auto&& edit) {
    Json j = scenario_json(name);
    edit(j);
    EXPECT_THROW(config_from_json(j), ValidationError) << j.dump();
  };
  bad("multimodal_a", [](Json& j) { j["methods"] = Json::array(); });
  bad("multimodal_a", [](Json& j) { j["methods"] = {"vi", "gan"}; });
  bad("multimodal_a", [](Json& j) { j["seeds"] = Json::array(); });
  bad("multimodal_a", [](Json& j) { j["schema_version"] = 2; });
  bad("multimodal_a", [](Json& j) { j.erase("schema_version"); });
  bad("multimodal_a", [](Json& j) { j["methods"] = {"poens"}; });
  bad("multimodal_a", [](Json& j) { j["metric"]["kind"] = "kl"; });
  bad("multimodal_a", [](Json& j) { j["metric"]["kind"] = "mmd"; });
  bad("multimodal_a", [](Json& j) { j["dataset"]["n_per_situation"] = 0; });
  bad("bimanual", [](Json& j) { j["metric"]["kind"] = "grid"; });
  bad("tool", [](Json& j) { j["dataset"]["heldout"] = false; });
  bad("tool", [](Json& j) { j["metric"]["mmd_entry"] = 7; });
}

TEST(Scenario, TrainingSkeletonAndDataDropHeldOutSituation) {
  const auto c = read_config(scenario_path("tool"));
  ASSERT_EQ(c.situations(), 4);
  EXPECT_EQ(training_skeleton(c).situations(), 3);
  Dataset all;
  all.samples = MatrixXd::Zero(8, 7);
  all.situation = {0, 1, 2, 3, 0, 1, 2, 3};
  const Dataset d = training_data(c, all);
  EXPECT_EQ(d.size(), 6);
  for (int i = 0; i < d.size(); ++i) EXPECT_LT(d.label(i), 3);
}

TEST(Scenario, WithSituationFromCopiesOnlyBoundFields) {
  Gen g(8);
  const ProductModel learned = sample_model(g), source = sample_model(g);
  const ProductModel m = with_situation_from(learned, source, 1);
  ASSERT_EQ(m.situations(), 3);
  const auto& added = std::get<IsotropicGaussianExpert>(m.entries[0].experts[2]);
  const auto& src = std::get<IsotropicGaussianExpert>(source.entries[0].experts[1]);
  const auto& own = std::get<IsotropicGaussianExpert>(learned.entries[0].experts[0]);
  EXPECT_EQ(added.mean, src.mean);
  EXPECT_EQ(added.log_sigma, own.log_sigma);
  EXPECT_EQ(m.entries[1].experts.size(), 1u);
  const VectorXd q = g.uniform_vec(3, -1, 1);
  EXPECT_EQ(log_unnorm(m, q, 0), log_unnorm(learned, q, 0));
}

TEST(Scenario, JitterRespectsFrozenFieldsAndBounds) {
  Gen g(4);
  const ProductModel m = sample_model(g);
  const ProductModel j1 = jitter_log_sigma(m, 0.5, 7), j2 = jitter_log_sigma(m, 0.5, 7), j3 = jitter_log_sigma(m, 0.5, 8);
  EXPECT_EQ(get_parameters(j1), get_parameters(j2));
  EXPECT_NE(get_parameters(j1), get_parameters(j3));
  EXPECT_EQ(to_json(j1.entries[2].experts[0]), to_json(m.entries[2].experts[0]));
  const auto ls = [](const ProductModel& x, int e, int s) {
    return std::get<IsotropicGaussianExpert>(x.entries[static_cast<std::size_t>(e)].experts[static_cast<std::size_t>(s)]).log_sigma;
  };
  EXPECT_NEAR(ls(j1, 0, 0) - ls(m, 0, 0), ls(j1, 0, 1) - ls(m, 0, 1), 1e-12);
  EXPECT_LE(std::abs(ls(j1, 0, 0) - ls(m, 0, 0)), 0.5);
  EXPECT_EQ(std::get<IsotropicGaussianExpert>(j1.entries[0].experts[0]).mean,
            std::get<IsotropicGaussianExpert>(m.entries[0].experts[0]).mean);
  EXPECT_EQ(get_parameters(jitter_log_sigma(m, 0.0, 7)), get_parameters(m));
}

TEST(Scenario, ApproximationMatchesGaussianMoments) {
  ProductModel m;
  m.tree = KinematicTree::chain({1.0, 1.0}, {}, {{-3, 3}, {-3, 3}});
  m.entries.push_back({IdentityMap{}, {IsotropicGaussianExpert{Eigen::Vector2d(0.4, -0.6), std::log(0.3)}}, 0, {}, {}});
  ApproxOptions o;
  o.components = 8;
  o.steps = 2000;
  o.lr = 5e-3;
  const auto mix = approximate(poe_target(m), m.tree.limits(), o, 1);
  const MatrixXd X = sample_in_box(mix, 4000, m.tree.limits(), 2);
  const VectorXd mean = X.colwise().mean();
  const MatrixXd C = (X.rowwise() - mean.transpose()).transpose() * (X.rowwise() - mean.transpose()) / (X.rows() - 1.0);
  EXPECT_NEAR(mean[0], 0.4, 0.02);
  EXPECT_NEAR(mean[1], -0.6, 0.02);
  EXPECT_NEAR(C(0, 0), 0.09, 0.01);
  EXPECT_NEAR(C(1, 1), 0.09, 0.01);
  EXPECT_NEAR(C(0, 1), 0.0, 0.01);
}

TEST(Scenario, SampleInBoxStaysInside) {
  const std::vector<std::pair<double, double>> box = {{-0.2, 0.2}, {0.0, 1.0}};
  const auto mix = init_mixture(3, {{-2, 2}, {-2, 2}}, 5);
  const MatrixXd X = sample_in_box(mix, 200, box, 6);
  for (Eigen::Index i = 0; i < X.rows(); ++i) {
    EXPECT_GE(X(i, 0), -0.2);
    EXPECT_LE(X(i, 0), 0.2);
    EXPECT_GE(X(i, 1), 0.0);
    EXPECT_LE(X(i, 1), 1.0);
  }
}

TEST(Scenario, GenerationIsDeterministic) {
  const auto c = read_config(scenario_path("smoke"));
  const auto a = generate_scenario(c), b = generate_scenario(c);
  EXPECT_EQ(dataset_to_csv(a.data), dataset_to_csv(b.data));
  EXPECT_EQ(to_json(a.mixtures[0]).dump(), to_json(b.mixtures[0]).dump());
  auto c2 = c;
  c2.dataset.seed += 1;
  EXPECT_NE(dataset_to_csv(generate_scenario(c2).data), dataset_to_csv(a.data));
}

TEST(Scenario, TaskASamplesCentreOnJointMean) {
  const auto c = read_config(scenario_path("multimodal_a"));
  const auto g = generate_scenario(c);
  ASSERT_EQ(g.data.size(), 30);
  const VectorXd mean = g.data.samples.colwise().mean();
  EXPECT_NEAR(mean[0], 0.5, 0.1);
  EXPECT_NEAR(mean[1], 1.0, 0.1);
}

TEST(Scenario, BimanualSamplesReachTheirTargets) {
  const auto c = read_config(scenario_path("bimanual"));
  const auto g = generate_scenario(c);
  const auto& right = c.ground_truth.entries[0];
  int inside = 0;
  for (int i = 0; i < g.data.size(); ++i) {
    const auto& e = std::get<IsotropicGaussianExpert>(right.expert(g.data.label(i)));
    const VectorXd x = map_value(right.map, c.ground_truth.tree, g.data.row(i));
    inside += ((x - e.mean).cwiseAbs().array() <= 3 * 0.02).all();
  }
  EXPECT_GE(inside, static_cast<int>(std::ceil(0.99 * g.data.size())));
}

TEST(Scenario, SmokeExperimentReportsEveryRun) {
  const auto c = read_config(scenario_path("smoke"));
  const auto r = run_experiment(c);
  ASSERT_EQ(r.runs.size(), c.methods.size() * c.seeds.size());
  for (const auto& run : r.runs) {
    EXPECT_TRUE(run.error.empty()) << run.error;
    ASSERT_TRUE(run.metric.has_value());
    EXPECT_GE(run.metric->value, -1e-9);
    EXPECT_FALSE(run.elbo_trace.empty() && run.method == "vi");
  }
  const Json j = to_json(r);
  EXPECT_EQ(j["schema_version"], kSchemaVersion);
  EXPECT_EQ(j["methods"][0]["published"], c.published["vi"]);
}

TEST(Svg, PlotsAreWellFormed) {
  const svg::Series s{"a<b", "#000", {0, 1, 2}, {1, std::nan(""), 3}};
  const auto sc = svg::scatter("t", "x", "y", {s});
  const auto ln = svg::lines("t", "x", "y", {s});
  for (const auto& doc : {sc, ln}) {
    EXPECT_EQ(doc.rfind("<svg", 0), 0u);
    EXPECT_NE(doc.find("</svg>"), std::string::npos);
    EXPECT_NE(doc.find("a&lt;b"), std::string::npos);
    EXPECT_EQ(doc.find("nan"), std::string::npos);
  }
}
