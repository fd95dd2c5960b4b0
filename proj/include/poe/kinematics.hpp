#pragma once

// Planar kinematic trees and the task-space maps built on them.

#include <algorithm>
#include <optional>
#include <variant>

#include "poe/common.hpp"

namespace poe {

struct Joint {
  int parent = -1;  ///< index of the parent joint, -1 for the root
  double length = 1.0;
  double angle_offset = 0.0;
};

struct BasePose {
  double x = 0.0;
  double y = 0.0;
  double phi = 0.0;
};

/// Planar articulated structure. Joint i rotates link i, whose tip carries
/// the children. Joints are stored topologically (parent < child).
class KinematicTree {
 public:
  KinematicTree() = default;

  KinematicTree(std::vector<Joint> joints, BasePose base,
                std::vector<std::pair<double, double>> limits = {})
      : joints_(std::move(joints)), base_(base), limits_(std::move(limits)) {
    if (limits_.empty()) limits_.assign(joints_.size(), {-kPi, kPi});
    validate();
  }

  /// Serial chain with the given link lengths.
  static KinematicTree chain(const std::vector<double>& lengths, BasePose base = {},
                             std::vector<std::pair<double, double>> limits = {}) {
    std::vector<Joint> joints;
    for (std::size_t i = 0; i < lengths.size(); ++i)
      joints.push_back({static_cast<int>(i) - 1, lengths[i], 0.0});
    return KinematicTree(std::move(joints), base, std::move(limits));
  }

  int dof() const { return static_cast<int>(joints_.size()); }
  const std::vector<Joint>& joints() const { return joints_; }
  const Joint& joint(int i) const { return joints_[static_cast<std::size_t>(i)]; }
  const BasePose& base() const { return base_; }
  const std::vector<std::pair<double, double>>& limits() const { return limits_; }

  /// Joint indices from the root down to `link`, inclusive.
  std::vector<int> chain_to(int link) const {
    check_link(link);
    std::vector<int> out;
    for (int j = link; j >= 0; j = joints_[static_cast<std::size_t>(j)].parent) out.push_back(j);
    std::reverse(out.begin(), out.end());
    return out;
  }

  void check_link(int link) const {
    if (link < 0 || link >= dof())
      throw ContractError("link index " + std::to_string(link) + " out of range");
  }

  void check_configuration(const VectorXd& q) const {
    if (q.size() != dof())
      throw ContractError("configuration has " + std::to_string(q.size()) +
                          " entries, tree has " + std::to_string(dof()) + " joints");
  }

 private:
  void validate() const {
    require(!joints_.empty(), "kinematic tree needs at least one joint");
    require(limits_.size() == joints_.size(), "one joint limit per joint required");
    for (std::size_t i = 0; i < joints_.size(); ++i) {
      const auto& j = joints_[i];
      require(j.parent < static_cast<int>(i), "joints must be topologically sorted");
      require(j.parent >= -1, "invalid parent index");
      require(j.length > 0.0, "link lengths must be positive");
      require(limits_[i].first < limits_[i].second, "joint limit lo must be < hi");
    }
  }

  std::vector<Joint> joints_;
  BasePose base_;
  std::vector<std::pair<double, double>> limits_;
};

/// World-frame quantities of every link for one configuration.
struct Frames {
  std::vector<Vec2> base;    ///< joint axis position (start of the link)
  std::vector<Vec2> tip;     ///< end of the link
  std::vector<double> angle; ///< cumulative (unwrapped) link angle
};

inline Frames forward_frames(const KinematicTree& tree, const VectorXd& q) {
  tree.check_configuration(q);
  const int n = tree.dof();
  Frames f;
  f.base.resize(n);
  f.tip.resize(n);
  f.angle.resize(n);
  const Vec2 root(tree.base().x, tree.base().y);
  for (int i = 0; i < n; ++i) {
    const Joint& j = tree.joint(i);
    const double parent_angle = j.parent < 0 ? tree.base().phi : f.angle[j.parent];
    f.base[i] = j.parent < 0 ? root : f.tip[j.parent];
    f.angle[i] = parent_angle + q[i] + j.angle_offset;
    f.tip[i] = f.base[i] + j.length * Vec2(std::cos(f.angle[i]), std::sin(f.angle[i]));
  }
  return f;
}

inline Mat2 rotation(double a) {
  Mat2 R;
  R << std::cos(a), -std::sin(a), std::sin(a), std::cos(a);
  return R;
}

/// z x v for planar vectors.
inline Vec2 perp(const Vec2& v) { return Vec2(-v.y(), v.x()); }

inline Vec2 fk_position(const KinematicTree& tree, const VectorXd& q, int link) {
  tree.check_link(link);
  return forward_frames(tree, q).tip[link];
}

inline double fk_orientation(const KinematicTree& tree, const VectorXd& q, int link) {
  tree.check_link(link);
  return wrap_angle(forward_frames(tree, q).angle[link]);
}

/// Positional Jacobian (2 x dof) of a point rigidly attached to `link`.
inline MatrixXd point_jacobian(const KinematicTree& tree, const Frames& f, int link,
                               const Vec2& point) {
  MatrixXd J = MatrixXd::Zero(2, tree.dof());
  for (int j : tree.chain_to(link)) J.col(j) = perp(point - f.base[j]);
  return J;
}

// ---------------------------------------------------------------------------
// Task maps

struct PositionMap { int link = 0; };
struct OrientationMap { int link = 0; };
/// Point d expressed in the frame of `link`: R(q) d + x(q).
struct ToolMap {
  int link = 0;
  Vec2 offset = Vec2::Zero();
  bool trainable = false;
};
struct LogManipulabilityMap { int link = 0; };
struct ComMap { std::vector<double> masses; };
struct BodyPoint {
  int link = 0;
  Vec2 offset = Vec2::Zero();  ///< in the link tip frame
};
/// Distances for every (point, target) pair, point-major.
struct RelativeDistanceMap {
  std::vector<BodyPoint> points;
  std::vector<Vec2> targets;
};
struct IdentityMap {};
/// Forward kinematics of `link` after `iterations` pseudoinverse IK steps
/// toward `target`. Not differentiable.
struct ProjectionMap {
  int link = 0;
  Vec2 target = Vec2::Zero();
  int iterations = 10;
};

using TaskMap = std::variant<PositionMap, OrientationMap, ToolMap, LogManipulabilityMap, ComMap,
                             RelativeDistanceMap, IdentityMap, ProjectionMap>;

inline std::string map_kind(const TaskMap& map) {
  return std::visit(overloaded{
                        [](const PositionMap&) { return std::string("position"); },
                        [](const OrientationMap&) { return std::string("orientation"); },
                        [](const ToolMap&) { return std::string("tool"); },
                        [](const LogManipulabilityMap&) { return std::string("log_manipulability"); },
                        [](const ComMap&) { return std::string("com"); },
                        [](const RelativeDistanceMap&) { return std::string("relative_distance"); },
                        [](const IdentityMap&) { return std::string("identity"); },
                        [](const ProjectionMap&) { return std::string("projection"); },
                    },
                    map);
}

inline int output_dim(const TaskMap& map, const KinematicTree& tree) {
  return std::visit(
      overloaded{
          [](const PositionMap&) { return 2; },
          [](const OrientationMap&) { return 1; },
          [](const ToolMap&) { return 2; },
          [](const LogManipulabilityMap&) { return 1; },
          [](const ComMap&) { return 2; },
          [](const RelativeDistanceMap& m) {
            return static_cast<int>(m.points.size() * m.targets.size());
          },
          [&](const IdentityMap&) { return tree.dof(); },
          [](const ProjectionMap&) { return 2; },
      },
      map);
}

inline bool is_differentiable(const TaskMap& map) {
  return !std::holds_alternative<ProjectionMap>(map);
}

/// Number of trainable map parameters (the tool offset when enabled).
inline int map_param_count(const TaskMap& map) {
  if (const auto* t = std::get_if<ToolMap>(&map)) return t->trainable ? 2 : 0;
  return 0;
}

inline void validate_map(const TaskMap& map, const KinematicTree& tree) {
  std::visit(overloaded{
                 [&](const PositionMap& m) { tree.check_link(m.link); },
                 [&](const OrientationMap& m) { tree.check_link(m.link); },
                 [&](const ToolMap& m) { tree.check_link(m.link); },
                 [&](const LogManipulabilityMap& m) { tree.check_link(m.link); },
                 [&](const ComMap& m) {
                   require(static_cast<int>(m.masses.size()) == tree.dof(),
                           "com map needs one mass per link");
                   double total = 0.0;
                   for (double w : m.masses) {
                     require(w >= 0.0, "masses must be non-negative");
                     total += w;
                   }
                   require(total > 0.0, "total mass must be positive");
                 },
                 [&](const RelativeDistanceMap& m) {
                   require(!m.points.empty() && !m.targets.empty(),
                           "relative distance map needs points and targets");
                   for (const auto& p : m.points) tree.check_link(p.link);
                 },
                 [](const IdentityMap&) {},
                 [&](const ProjectionMap& m) {
                   tree.check_link(m.link);
                   require(m.iterations >= 1, "projection needs at least one iteration");
                 },
             },
             map);
}

// ---------------------------------------------------------------------------
// Linear algebra helpers

/// Damped pseudoinverse J^T (J J^T + lambda I)^-1 for wide J, (J^T J + lambda
/// I)^-1 J^T for tall J. lambda = 0 falls back to the exact Moore-Penrose
/// inverse.
inline MatrixXd damped_pinv(const MatrixXd& J, double lambda = kDefaultDamping) {
  require(lambda >= 0.0, "damping must be non-negative");
  if (J.size() == 0) return MatrixXd::Zero(J.cols(), J.rows());
  if (lambda == 0.0) return Eigen::CompleteOrthogonalDecomposition<MatrixXd>(J).pseudoInverse();
  if (J.rows() <= J.cols()) {
    MatrixXd G = J * J.transpose();
    G.diagonal().array() += lambda;
    return J.transpose() * G.ldlt().solve(MatrixXd::Identity(J.rows(), J.rows()));
  }
  MatrixXd G = J.transpose() * J;
  G.diagonal().array() += lambda;
  return G.ldlt().solve(J.transpose());
}

/// N = I - J^+ J. With lambda = 0 the projector is built from an orthonormal
/// basis of the row space (SVD, relative rank tolerance 1e-10), so J N = 0 to
/// rounding even close to singularities.
inline MatrixXd nullspace_projector(const MatrixXd& J, double lambda = kDefaultDamping) {
  require(lambda >= 0.0, "damping must be non-negative");
  const auto n = J.cols();
  MatrixXd N = MatrixXd::Identity(n, n);
  if (J.rows() == 0) return N;
  if (lambda == 0.0) {
    Eigen::JacobiSVD<MatrixXd> svd(J, Eigen::ComputeFullV);
    const VectorXd& s = svd.singularValues();
    const double tol = 1e-10 * (s.size() > 0 ? s[0] : 0.0);
    for (Eigen::Index k = 0; k < s.size() && s[k] > tol; ++k)
      N -= svd.matrixV().col(k) * svd.matrixV().col(k).transpose();
    return N;
  }
  N -= damped_pinv(J, lambda) * J;
  return 0.5 * (N + N.transpose());
}

// ---------------------------------------------------------------------------
// Scalar and vector maps

namespace detail {

inline Vec2 map_point_world(const Frames& f, int link, const Vec2& offset) {
  return f.tip[link] + rotation(f.angle[link]) * offset;
}

struct LogManip {
  double value;
  VectorXd grad;
};

inline LogManip log_manipulability(const KinematicTree& tree, const Frames& f, int link) {
  const Vec2 p = f.tip[link];
  const MatrixXd J = point_jacobian(tree, f, link, p);
  const Mat2 M = J * J.transpose();
  const double det = M.determinant();
  LogManip out{kSingularLogDet, VectorXd::Zero(tree.dof())};
  const double scale = M.trace();
  if (!std::isfinite(det) || !(det > 1e-14 * scale * scale)) return out;
  out.value = std::log(det);
  const MatrixXd W = M.inverse() * J;  // 2 x dof
  const std::vector<int> chain = tree.chain_to(link);
  // d(col_i)/dq_j = -(p - base of the deeper joint of i and j)
  for (std::size_t a = 0; a < chain.size(); ++a) {
    const int j = chain[a];
    double g = 0.0;
    for (std::size_t b = 0; b < chain.size(); ++b) {
      const int i = chain[b];
      const int deeper = chain[std::max(a, b)];
      const Vec2 dcol = -(p - f.base[deeper]);
      g += W.col(i).dot(dcol);
    }
    out.grad[j] = 2.0 * g;
  }
  return out;
}

}  // namespace detail

/// log det(J J^T) of the positional Jacobian at `link`; clamped to -1e9 at
/// exact singularities.
inline double manipulability_log(const KinematicTree& tree, const VectorXd& q, int link) {
  tree.check_link(link);
  return detail::log_manipulability(tree, forward_frames(tree, q), link).value;
}

inline Vec2 com(const KinematicTree& tree, const VectorXd& q, const std::vector<double>& masses) {
  validate_map(ComMap{masses}, tree);
  const Frames f = forward_frames(tree, q);
  Vec2 c = Vec2::Zero();
  double total = 0.0;
  for (int i = 0; i < tree.dof(); ++i) {
    c += masses[i] * 0.5 * (f.base[i] + f.tip[i]);
    total += masses[i];
  }
  return c / total;
}

inline VectorXd relative_distances(const KinematicTree& tree, const VectorXd& q,
                                   const std::vector<BodyPoint>& points,
                                   const std::vector<Vec2>& targets) {
  const Frames f = forward_frames(tree, q);
  VectorXd out(static_cast<Eigen::Index>(points.size() * targets.size()));
  Eigen::Index k = 0;
  for (const auto& p : points) {
    tree.check_link(p.link);
    const Vec2 w = detail::map_point_world(f, p.link, p.offset);
    for (const auto& t : targets) out[k++] = (w - t).norm();
  }
  return out;
}

struct ProjectionResult {
  VectorXd q;
  double residual = 0.0;
  int iterations = 0;
};

/// Iterates q <- q + J^+ (target - F(q)). Steps are clipped to `max_step`
/// (radians, Euclidean). A step that increases the residual is retried with
/// growing damping, so unreachable targets settle at the closest point.
inline ProjectionResult ik_project(const KinematicTree& tree, const VectorXd& q0, int link,
                                   const Vec2& target, int n_iters, double step_tol = 1e-12,
                                   double lambda = kDefaultDamping, double max_step = 0.5) {
  tree.check_link(link);
  tree.check_configuration(q0);
  require(n_iters >= 1, "ik_project needs at least one iteration");
  ProjectionResult r{q0, 0.0, 0};
  for (int it = 0; it < n_iters; ++it) {
    const Frames f = forward_frames(tree, r.q);
    const Vec2 err = target - f.tip[link];
    const MatrixXd J = point_jacobian(tree, f, link, f.tip[link]);
    const double before = err.norm();
    VectorXd step;
    double lam = lambda;
    for (int k = 0; k < 40; ++k, lam = std::max(10.0 * lam, 1e-6)) {
      step = damped_pinv(J, lam) * err;
      if (step.norm() > max_step) step *= max_step / step.norm();
      if ((target - fk_position(tree, r.q + step, link)).norm() <= before) break;
    }
    r.q += step;
    r.iterations = it + 1;
    if (step.norm() < step_tol) break;
  }
  r.residual = (target - fk_position(tree, r.q, link)).norm();
  return r;
}

// ---------------------------------------------------------------------------
// Map evaluation

inline VectorXd map_value(const TaskMap& map, const KinematicTree& tree, const Frames& f,
                          const VectorXd& q) {
  return std::visit(
      overloaded{
          [&](const PositionMap& m) -> VectorXd { return f.tip[m.link]; },
          [&](const OrientationMap& m) -> VectorXd {
            return VectorXd::Constant(1, wrap_angle(f.angle[m.link]));
          },
          [&](const ToolMap& m) -> VectorXd {
            return detail::map_point_world(f, m.link, m.offset);
          },
          [&](const LogManipulabilityMap& m) -> VectorXd {
            return VectorXd::Constant(1, detail::log_manipulability(tree, f, m.link).value);
          },
          [&](const ComMap& m) -> VectorXd {
            Vec2 c = Vec2::Zero();
            double total = 0.0;
            for (int i = 0; i < tree.dof(); ++i) {
              c += m.masses[i] * 0.5 * (f.base[i] + f.tip[i]);
              total += m.masses[i];
            }
            return c / total;
          },
          [&](const RelativeDistanceMap& m) -> VectorXd {
            VectorXd out(static_cast<Eigen::Index>(m.points.size() * m.targets.size()));
            Eigen::Index k = 0;
            for (const auto& p : m.points) {
              const Vec2 w = detail::map_point_world(f, p.link, p.offset);
              for (const auto& t : m.targets) out[k++] = (w - t).norm();
            }
            return out;
          },
          [&](const IdentityMap&) -> VectorXd { return q; },
          [&](const ProjectionMap& m) -> VectorXd {
            const auto r = ik_project(tree, q, m.link, m.target, m.iterations);
            return fk_position(tree, r.q, m.link);
          },
      },
      map);
}

inline VectorXd map_value(const TaskMap& map, const KinematicTree& tree, const VectorXd& q) {
  return map_value(map, tree, forward_frames(tree, q), q);
}

/// Analytic Jacobian (output_dim x dof). Columns of non-ancestor joints are 0.
inline MatrixXd map_jacobian(const TaskMap& map, const KinematicTree& tree, const Frames& f,
                             [[maybe_unused]] const VectorXd& q) {
  return std::visit(
      overloaded{
          [&](const PositionMap& m) -> MatrixXd {
            return point_jacobian(tree, f, m.link, f.tip[m.link]);
          },
          [&](const OrientationMap& m) -> MatrixXd {
            MatrixXd J = MatrixXd::Zero(1, tree.dof());
            for (int j : tree.chain_to(m.link)) J(0, j) = 1.0;
            return J;
          },
          [&](const ToolMap& m) -> MatrixXd {
            return point_jacobian(tree, f, m.link, detail::map_point_world(f, m.link, m.offset));
          },
          [&](const LogManipulabilityMap& m) -> MatrixXd {
            return detail::log_manipulability(tree, f, m.link).grad.transpose();
          },
          [&](const ComMap& m) -> MatrixXd {
            MatrixXd J = MatrixXd::Zero(2, tree.dof());
            double total = 0.0;
            for (double w : m.masses) total += w;
            for (int i = 0; i < tree.dof(); ++i) {
              if (m.masses[i] == 0.0) continue;
              const Vec2 mid = 0.5 * (f.base[i] + f.tip[i]);
              J += (m.masses[i] / total) * point_jacobian(tree, f, i, mid);
            }
            return J;
          },
          [&](const RelativeDistanceMap& m) -> MatrixXd {
            MatrixXd J(static_cast<Eigen::Index>(m.points.size() * m.targets.size()), tree.dof());
            Eigen::Index k = 0;
            for (const auto& p : m.points) {
              const Vec2 w = detail::map_point_world(f, p.link, p.offset);
              const MatrixXd Jp = point_jacobian(tree, f, p.link, w);
              for (const auto& t : m.targets) {
                const Vec2 d = w - t;
                const double n = d.norm();
                J.row(k++) = n > 0.0 ? ((d / n).transpose() * Jp).eval()
                                     : Eigen::RowVectorXd::Zero(tree.dof());
              }
            }
            return J;
          },
          [&](const IdentityMap&) -> MatrixXd {
            return MatrixXd::Identity(tree.dof(), tree.dof());
          },
          [&](const ProjectionMap&) -> MatrixXd {
            throw UnsupportedGradient("projection maps have no Jacobian");
          },
      },
      map);
}

inline MatrixXd map_jacobian(const TaskMap& map, const KinematicTree& tree, const VectorXd& q) {
  tree.check_configuration(q);
  return map_jacobian(map, tree, forward_frames(tree, q), q);
}

/// d T / d (map parameters), output_dim x map_param_count. For the tool map
/// this is the link rotation R(q).
inline MatrixXd map_param_jacobian(const TaskMap& map, const Frames& f) {
  if (const auto* t = std::get_if<ToolMap>(&map); t && t->trainable)
    return rotation(f.angle[t->link]);
  return MatrixXd(0, 0);
}

inline VectorXd map_params(const TaskMap& map) {
  if (const auto* t = std::get_if<ToolMap>(&map); t && t->trainable) return t->offset;
  return VectorXd(0);
}

inline TaskMap with_map_params(const TaskMap& map, const VectorXd& params) {
  TaskMap out = map;
  if (auto* t = std::get_if<ToolMap>(&out); t && t->trainable) {
    require(params.size() == 2, "tool map takes two parameters");
    t->offset = params;
  }
  return out;
}

}  // namespace poe
