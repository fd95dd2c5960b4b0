#include <gtest/gtest.h>

#include "testing.hpp"

using namespace poe;
using poe::testing::Gen;

namespace {

// Homogeneous 3x3 transform-stack oracle, built independently of Frames.
Eigen::Matrix3d joint_transform(double theta, double length) {
  Eigen::Matrix3d rot = Eigen::Matrix3d::Identity();
  rot.topLeftCorner<2, 2>() << std::cos(theta), -std::sin(theta), std::sin(theta), std::cos(theta);
  Eigen::Matrix3d trans = Eigen::Matrix3d::Identity();
  trans(0, 2) = length;
  return rot * trans;
}

Eigen::Matrix3d oracle_pose(const KinematicTree& tree, const VectorXd& q, int link) {
  Eigen::Matrix3d T = joint_transform(tree.base().phi, 0.0);
  T(0, 2) = tree.base().x;
  T(1, 2) = tree.base().y;
  for (int j : tree.chain_to(link)) T = T * joint_transform(q[j] + tree.joint(j).angle_offset, tree.joint(j).length);
  return T;
}

const KinematicTree kTwoR = KinematicTree::chain({1.0, 1.0});

std::vector<TaskMap> all_differentiable_maps(const KinematicTree& tree, Gen& g) {
  const int last = tree.dof() - 1;
  std::vector<double> masses;
  for (int i = 0; i < tree.dof(); ++i) masses.push_back(g.uniform(0.1, 2.0));
  return {PositionMap{last},
          OrientationMap{last},
          ToolMap{last, Vec2(g.normal(), g.normal()), true},
          LogManipulabilityMap{last},
          ComMap{masses},
          RelativeDistanceMap{{BodyPoint{last, Vec2(0.1, -0.2)}, BodyPoint{0, Vec2::Zero()}},
                              {Vec2(3.0, 1.0), Vec2(-2.0, 0.5)}},
          IdentityMap{}};
}

}  // namespace

TEST(FkPosition, StraightChain) {
  const Vec2 p = fk_position(kTwoR, VectorXd::Zero(2), 1);
  EXPECT_NEAR(p.x(), 2.0, 1e-15);
  EXPECT_NEAR(p.y(), 0.0, 1e-15);
}

TEST(FkPosition, RightAngle) {
  const Vec2 p = fk_position(kTwoR, Eigen::Vector2d(kPi / 2, -kPi / 2), 1);
  EXPECT_NEAR(p.x(), 1.0, 1e-15);
  EXPECT_NEAR(p.y(), 1.0, 1e-15);
}

TEST(FkPosition, MatchesTransformStackOnRandomTrees) {
  Gen g(11);
  for (int trial = 0; trial < 100; ++trial) {
    const auto tree = g.tree(5);
    const VectorXd q = g.uniform_vec(5, -kPi, kPi);
    for (int link = 0; link < 5; ++link) {
      const Eigen::Matrix3d T = oracle_pose(tree, q, link);
      const Vec2 p = fk_position(tree, q, link);
      EXPECT_NEAR(p.x(), T(0, 2), 1e-12);
      EXPECT_NEAR(p.y(), T(1, 2), 1e-12);
      EXPECT_NEAR(std::cos(fk_orientation(tree, q, link)), T(0, 0), 1e-12);
      EXPECT_NEAR(std::sin(fk_orientation(tree, q, link)), T(1, 0), 1e-12);
    }
  }
}

TEST(FkPosition, DimensionMismatchThrows) {
  EXPECT_THROW(fk_position(kTwoR, VectorXd::Zero(3), 1), ContractError);
  EXPECT_THROW(fk_position(kTwoR, VectorXd::Zero(2), 2), ContractError);
}

TEST(FkPosition, ChildIsParentComposedWithOneLocalTransform) {
  Gen g(12);
  for (int trial = 0; trial < 50; ++trial) {
    const auto tree = g.tree(6);
    const VectorXd q = g.uniform_vec(6, -kPi, kPi);
    for (int i = 0; i < 6; ++i) {
      const int parent = tree.joint(i).parent;
      if (parent < 0) continue;
      const double a = fk_orientation(tree, q, parent) + q[i] + tree.joint(i).angle_offset;
      const Vec2 expect = fk_position(tree, q, parent) + tree.joint(i).length * Vec2(std::cos(a), std::sin(a));
      EXPECT_LT((fk_position(tree, q, i) - expect).norm(), 1e-12);
    }
  }
}

TEST(FkOrientation, Examples) {
  EXPECT_EQ(fk_orientation(kTwoR, VectorXd::Zero(2), 1), 0.0);
  EXPECT_NEAR(fk_orientation(kTwoR, Eigen::Vector2d(kPi / 2, kPi / 2), 1), kPi, 1e-15);
  EXPECT_NEAR(fk_orientation(kTwoR, Eigen::Vector2d(kPi / 2 + 0.1, kPi / 2), 1), -kPi + 0.1, 1e-14);
}

TEST(FkOrientation, SumOfAncestorAngles) {
  Gen g(13);
  for (int trial = 0; trial < 100; ++trial) {
    const auto tree = g.tree(5);
    const VectorXd q = g.uniform_vec(5, -kPi, kPi);
    const int link = g.integer(0, 4);
    double sum = tree.base().phi;
    for (int j : tree.chain_to(link)) sum += q[j] + tree.joint(j).angle_offset;
    EXPECT_NEAR(std::remainder(fk_orientation(tree, q, link) - sum, 2 * kPi), 0.0, 1e-12);
    const double a = fk_orientation(tree, q, link);
    EXPECT_GT(a, -kPi);
    EXPECT_LE(a, kPi);
  }
}

TEST(Jacobian, TwoRAtZero) {
  const MatrixXd J = map_jacobian(PositionMap{1}, kTwoR, VectorXd::Zero(2));
  MatrixXd want(2, 2);
  want << 0, 0, 2, 1;
  EXPECT_LT((J - want).norm(), 1e-15);
}

TEST(Jacobian, IdentityMap) {
  const MatrixXd J = map_jacobian(IdentityMap{}, kTwoR, Eigen::Vector2d(0.3, -1.0));
  EXPECT_TRUE(J.isIdentity());
}

TEST(Jacobian, ProjectionUnsupported) {
  EXPECT_THROW(map_jacobian(ProjectionMap{1, Vec2(1, 1), 5}, kTwoR, VectorXd::Zero(2)), UnsupportedGradient);
}

TEST(Jacobian, NonAncestorColumnsAreZero) {
  // joint 0 root, joints 1 and 2 both children of 0
  const KinematicTree tree({{-1, 1.0, 0.0}, {0, 1.0, 0.0}, {0, 1.0, 0.0}}, {});
  const MatrixXd J = map_jacobian(PositionMap{1}, tree, Eigen::Vector3d(0.2, 0.4, -0.3));
  EXPECT_EQ(J.col(2).norm(), 0.0);
  EXPECT_GT(J.col(1).norm(), 0.0);
}

TEST(Jacobian, MatchesFiniteDifferencesForEveryMap) {
  Gen g(14);
  int checked = 0;
  for (int trial = 0; trial < 100; ++trial) {
    const auto tree = g.tree(g.integer(2, 6));
    const VectorXd q = g.uniform_vec(tree.dof(), -2.5, 2.5);
    for (const auto& map : all_differentiable_maps(tree, g)) {
      if (std::holds_alternative<OrientationMap>(map)) {
        // keep away from the wrap discontinuity
        if (std::abs(map_value(map, tree, q)[0]) > kPi - 1e-3) continue;
      }
      if (std::holds_alternative<LogManipulabilityMap>(map) && map_value(map, tree, q)[0] < -20) continue;
      const MatrixXd J = map_jacobian(map, tree, q);
      const MatrixXd Jfd = poe::testing::fd_jacobian([&](const VectorXd& x) { return map_value(map, tree, x); }, q);
      EXPECT_LT(poe::testing::rel_err(J, Jfd), 1e-6) << map_kind(map) << " trial " << trial;
      ++checked;
    }
  }
  EXPECT_GT(checked, 650);
}

TEST(Jacobian, ToolParameterJacobianMatchesFiniteDifferences) {
  Gen g(15);
  for (int trial = 0; trial < 100; ++trial) {
    const auto tree = g.tree(4);
    const VectorXd q = g.uniform_vec(4, -kPi, kPi);
    const ToolMap tool{3, Vec2(g.normal(), g.normal()), true};
    const MatrixXd Jd = map_param_jacobian(tool, forward_frames(tree, q));
    const MatrixXd Jfd = poe::testing::fd_jacobian(
        [&](const VectorXd& d) { return map_value(with_map_params(tool, d), tree, q); }, tool.offset);
    EXPECT_LT(poe::testing::rel_err(Jd, Jfd), 1e-6);
  }
}

TEST(Manipulability, TwoRSymbolic) {
  EXPECT_NEAR(manipulability_log(kTwoR, Eigen::Vector2d(0.7, kPi / 2), 1), 0.0, 1e-14);
  for (double q2 : {0.3, 1.1, 2.5}) {
    const double want = std::log(std::sin(q2) * std::sin(q2));
    EXPECT_NEAR(manipulability_log(kTwoR, Eigen::Vector2d(-0.4, q2), 1), want, 1e-12);
  }
}

TEST(Manipulability, SingularClamped) {
  EXPECT_EQ(manipulability_log(kTwoR, Eigen::Vector2d(0.4, 0.0), 1), -1e9);
  const MatrixXd J = map_jacobian(LogManipulabilityMap{1}, kTwoR, Eigen::Vector2d(0.4, 0.0));
  EXPECT_TRUE(J.allFinite());
}

TEST(Manipulability, ThreeRMatchesDenseDeterminant) {
  Gen g(16);
  const auto tree = KinematicTree::chain({0.8, 0.6, 0.5});
  for (int trial = 0; trial < 100; ++trial) {
    const VectorXd q = g.uniform_vec(3, -kPi, kPi);
    const MatrixXd J = poe::testing::fd_jacobian([&](const VectorXd& x) -> VectorXd { return fk_position(tree, x, 2); }, q, 1e-5);
    const MatrixXd Jexact = map_jacobian(PositionMap{2}, tree, q);
    EXPECT_LT((J - Jexact).norm(), 1e-8);
    const double want = std::log((Jexact * Jexact.transpose()).determinant());
    EXPECT_LT(std::abs(manipulability_log(tree, q, 2) - want), 1e-10 * std::max(1.0, std::abs(want)));
  }
}

TEST(Manipulability, InvariantUnderBasePose) {
  Gen g(17);
  for (int trial = 0; trial < 50; ++trial) {
    auto t1 = g.tree(4);
    KinematicTree t2(t1.joints(), {g.uniform(-5, 5), g.uniform(-5, 5), g.uniform(-kPi, kPi)});
    const VectorXd q = g.uniform_vec(4, -kPi, kPi);
    const double a = manipulability_log(t1, q, 3);
    if (a < -20) continue;
    EXPECT_NEAR(a, manipulability_log(t2, q, 3), 1e-9);
  }
}

TEST(Com, Examples) {
  const auto one = KinematicTree::chain({1.0});
  const Vec2 c1 = com(one, VectorXd::Zero(1), {1.0});
  EXPECT_NEAR(c1.x(), 0.5, 1e-15);
  EXPECT_NEAR(c1.y(), 0.0, 1e-15);
  const Vec2 c2 = com(kTwoR, VectorXd::Zero(2), {1.0, 1.0});
  EXPECT_NEAR(c2.x(), 1.0, 1e-15);
  EXPECT_NEAR(c2.y(), 0.0, 1e-15);
  EXPECT_THROW(com(kTwoR, VectorXd::Zero(2), {0.0, 0.0}), ContractError);
}

TEST(Com, WeightedSumOracle) {
  Gen g(18);
  for (int trial = 0; trial < 50; ++trial) {
    const auto tree = g.tree(5);
    const VectorXd q = g.uniform_vec(5, -kPi, kPi);
    std::vector<double> m(5);
    for (auto& w : m) w = g.uniform(0, 2);
    Vec2 acc = Vec2::Zero();
    double total = 0;
    for (int i = 0; i < 5; ++i) {
      const Eigen::Matrix3d T = oracle_pose(tree, q, i);
      const Vec2 tip(T(0, 2), T(1, 2));
      const Vec2 start = tip - tree.joint(i).length * Vec2(T(0, 0), T(1, 0));
      acc += m[i] * 0.5 * (tip + start);
      total += m[i];
    }
    EXPECT_LT((com(tree, q, m) - acc / total).norm(), 1e-12);
  }
}

TEST(RelativeDistances, Examples) {
  const std::vector<BodyPoint> tip{{1, Vec2::Zero()}};
  EXPECT_NEAR(relative_distances(kTwoR, VectorXd::Zero(2), tip, {Vec2(2, 0)})[0], 0.0, 1e-15);
  EXPECT_NEAR(relative_distances(kTwoR, VectorXd::Zero(2), tip, {Vec2(3, 0)})[0], 1.0, 1e-15);
}

TEST(RelativeDistances, FkNormOracle) {
  Gen g(19);
  for (int trial = 0; trial < 50; ++trial) {
    const auto tree = g.tree(4);
    const VectorXd q = g.uniform_vec(4, -kPi, kPi);
    const BodyPoint p{g.integer(0, 3), Vec2(g.normal(), g.normal())};
    const std::vector<Vec2> targets{Vec2(g.normal(), g.normal()), Vec2(g.normal(), g.normal())};
    const VectorXd d = relative_distances(tree, q, {p}, targets);
    const Eigen::Matrix3d T = oracle_pose(tree, q, p.link);
    const Vec2 w = (T * Eigen::Vector3d(p.offset.x(), p.offset.y(), 1.0)).head<2>();
    for (int k = 0; k < 2; ++k) EXPECT_NEAR(d[k], (w - targets[k]).norm(), 1e-12);
  }
}

TEST(DampedPinv, Examples) {
  MatrixXd J(1, 2);
  J << 1, 0;
  const MatrixXd P = damped_pinv(J, 0.0);
  EXPECT_NEAR(P(0, 0), 1.0, 1e-15);
  EXPECT_NEAR(P(1, 0), 0.0, 1e-15);
  EXPECT_LT((damped_pinv(MatrixXd::Identity(2, 2), 0.0) - MatrixXd::Identity(2, 2)).norm(), 1e-15);
  EXPECT_THROW(damped_pinv(J, -1.0), ContractError);
}

TEST(DampedPinv, PenroseConditions) {
  Gen g(20);
  for (int trial = 0; trial < 100; ++trial) {
    const MatrixXd J = g.normal_mat(2, 5);
    const MatrixXd P = damped_pinv(J, 0.0);
    EXPECT_LT((J * P * J - J).norm(), 1e-8);
    EXPECT_LT((P * J * P - P).norm(), 1e-8);
    // tall and damped variants agree with the exact inverse for full rank
    const MatrixXd Pt = damped_pinv(J.transpose(), 0.0);
    EXPECT_LT((Pt - P.transpose()).norm(), 1e-8);
    EXPECT_LT((damped_pinv(J, 1e-12) - P).norm(), 1e-8);
    EXPECT_LT((damped_pinv(J.transpose(), 1e-12) - Pt).norm(), 1e-8);
  }
}

TEST(NullspaceProjector, Examples) {
  MatrixXd J(1, 2);
  J << 1, 0;
  MatrixXd want(2, 2);
  want << 0, 0, 0, 1;
  EXPECT_LT((nullspace_projector(J, 0.0) - want).norm(), 1e-15);
  MatrixXd S(2, 2);
  S << 2, 1, 0.5, 3;
  EXPECT_LT(nullspace_projector(S, 0.0).norm(), 1e-12);
  EXPECT_LT(nullspace_projector(S).norm(), 1e-6);
}

TEST(NullspaceProjector, Identities) {
  Gen g(21);
  for (int trial = 0; trial < 100; ++trial) {
    const MatrixXd J = g.normal_mat(2, 5);
    const MatrixXd N = nullspace_projector(J, 0.0);
    EXPECT_LT((J * N).norm(), 1e-8);
    EXPECT_LT((N * N - N).norm(), 1e-8);
    EXPECT_LT((N - N.transpose()).norm(), 1e-12);
  }
}

TEST(IkProject, FixedPointAtTarget) {
  const VectorXd q0 = Eigen::Vector2d(0.3, 0.8);
  const auto r = ik_project(kTwoR, q0, 1, fk_position(kTwoR, q0, 1), 10);
  EXPECT_LT((r.q - q0).norm(), 1e-12);
  EXPECT_LT(r.residual, 1e-12);
}

TEST(IkProject, ReachableTargetConverges) {
  const auto r = ik_project(kTwoR, Eigen::Vector2d(0.3, 0.3), 1, Vec2(1, 1), 50);
  EXPECT_LT(r.residual, 1e-6);
  EXPECT_LE(r.iterations, 50);
}

TEST(IkProject, UnreachableTargetAlignsJoints) {
  const auto r = ik_project(kTwoR, Eigen::Vector2d(0.3, 0.3), 1, Vec2(3, 0), 200);
  EXPECT_NEAR(r.residual, 1.0, 1e-4);
  EXPECT_NEAR(wrap_angle(r.q[0]), 0.0, 1e-2);
  EXPECT_NEAR(wrap_angle(r.q[1]), 0.0, 1e-2);
}

TEST(IkProject, ProjectionMapValueIsProjectedFk) {
  const ProjectionMap m{1, Vec2(1, 1), 50};
  const VectorXd y = map_value(m, kTwoR, Eigen::Vector2d(0.3, 0.3));
  EXPECT_LT((y - Eigen::Vector2d(1, 1)).norm(), 1e-6);
}

TEST(KinematicTree, InvalidSpecs) {
  EXPECT_THROW(KinematicTree({{0, 1.0, 0.0}}, {}), ContractError);
  EXPECT_THROW(KinematicTree({{-1, 0.0, 0.0}}, {}), ContractError);
  EXPECT_THROW(KinematicTree({{-1, 1.0, 0.0}}, {}, {{1.0, -1.0}}), ContractError);
}
