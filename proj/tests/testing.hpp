#pragma once

// Shared generators and finite-difference oracles for the test suites.

#include <functional>
#include <random>

#include "poe/product_model.hpp"

namespace poe::testing {

class Gen {
 public:
  explicit Gen(std::uint64_t seed) : eng_(seed) {}

  double uniform(double lo, double hi) { return std::uniform_real_distribution<double>(lo, hi)(eng_); }
  double normal() { return std::normal_distribution<double>(0.0, 1.0)(eng_); }
  int integer(int lo, int hi) { return std::uniform_int_distribution<int>(lo, hi)(eng_); }

  VectorXd uniform_vec(int n, double lo, double hi) {
    VectorXd v(n);
    for (auto& x : v) x = uniform(lo, hi);
    return v;
  }
  VectorXd normal_vec(int n) {
    VectorXd v(n);
    for (auto& x : v) x = normal();
    return v;
  }
  MatrixXd normal_mat(int r, int c) {
    MatrixXd m(r, c);
    for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = normal();
    return m;
  }
  /// Lower-triangular factor with diagonal in [0.3, 1.5].
  MatrixXd chol(int n) {
    MatrixXd L = MatrixXd::Zero(n, n);
    for (int i = 0; i < n; ++i)
      for (int j = 0; j <= i; ++j) L(i, j) = i == j ? uniform(0.3, 1.5) : 0.4 * normal();
    return L;
  }

  /// Random branching tree: every joint picks a parent among earlier joints.
  KinematicTree tree(int n) {
    std::vector<Joint> joints;
    for (int i = 0; i < n; ++i)
      joints.push_back({i == 0 ? -1 : integer(-1, i - 1), uniform(0.3, 1.2), uniform(-0.5, 0.5)});
    return KinematicTree(joints, {uniform(-1, 1), uniform(-1, 1), uniform(-kPi, kPi)});
  }

  std::mt19937_64& engine() { return eng_; }

 private:
  std::mt19937_64 eng_;
};

inline VectorXd fd_gradient(const std::function<double(const VectorXd&)>& f, const VectorXd& x,
                            double h = 1e-6) {
  VectorXd g(x.size());
  for (Eigen::Index i = 0; i < x.size(); ++i) {
    VectorXd a = x, b = x;
    a[i] += h;
    b[i] -= h;
    g[i] = (f(a) - f(b)) / (2 * h);
  }
  return g;
}

inline MatrixXd fd_jacobian(const std::function<VectorXd(const VectorXd&)>& f, const VectorXd& x,
                            double h = 1e-6) {
  const VectorXd f0 = f(x);
  MatrixXd J(f0.size(), x.size());
  for (Eigen::Index i = 0; i < x.size(); ++i) {
    VectorXd a = x, b = x;
    a[i] += h;
    b[i] -= h;
    J.col(i) = (f(a) - f(b)) / (2 * h);
  }
  return J;
}

/// Relative error with a unit scale floor, so near-zero references are
/// compared absolutely.
inline double rel_err(const MatrixXd& got, const MatrixXd& want) {
  return (got - want).norm() / std::max({got.norm(), want.norm(), 1.0});
}

/// One random expert of every family at dimension `d` (ProMP ignores d).
inline std::vector<Expert> random_experts(Gen& g, int d) {
  std::vector<Expert> out;
  out.push_back(GaussianExpert{g.normal_vec(d), g.chol(d)});
  out.push_back(IsotropicGaussianExpert{g.normal_vec(d), g.uniform(-0.7, 0.5)});
  out.push_back(LowRankGaussianExpert{g.normal_vec(d), g.uniform_vec(d, -1.0, 0.0), 0.5 * g.normal_mat(d, 1)});
  out.push_back(ScalarGaussianExpert{g.normal(), g.uniform(-0.7, 0.5)});
  out.push_back(CdfExpert{g.normal(), g.uniform(-0.7, 0.5), BoundSide::Below});
  out.push_back(CdfExpert{g.normal(), g.uniform(-0.7, 0.5), BoundSide::Above});
  PrompBasis b{3, 4, 1};
  out.push_back(PrompExpert{g.normal_vec(3), g.chol(3), g.uniform(-1.0, -0.3), b});
  out.push_back(UniGaussExpert{Expert{GaussianExpert{g.normal_vec(d), g.chol(d)}}, g.uniform(-1, 2), 5.0});
  out.push_back(UniGaussExpert{Expert{ScalarGaussianExpert{g.normal(), g.uniform(-0.5, 0.3)}}, g.uniform(-1, 2), 4.0});
  return out;
}

/// Random differentiable model over a random tree with 2-4 entries at up to
/// three priority levels.
inline ProductModel random_model(Gen& g, int dof) {
  ProductModel m;
  m.tree = g.tree(dof);
  const int n_entries = g.integer(2, 4);
  for (int k = 0; k < n_entries; ++k) {
    const int link = g.integer(0, dof - 1);
    Entry e;
    e.priority = std::min(k, 2);
    switch (g.integer(0, 5)) {
      case 0:
        e.map = PositionMap{link};
        e.experts = {GaussianExpert{g.normal_vec(2), g.chol(2)}};
        break;
      case 1:
        e.map = ToolMap{link, Vec2(g.normal(), g.normal()), true};
        e.experts = {IsotropicGaussianExpert{g.normal_vec(2), g.uniform(-0.5, 0.5)}};
        break;
      case 2:
        e.map = OrientationMap{link};
        e.experts = {ScalarGaussianExpert{g.uniform(-1, 1), g.uniform(-0.5, 0.5)}};
        break;
      case 3:
        e.map = RelativeDistanceMap{{BodyPoint{link, Vec2(0.1, 0.0)}}, {Vec2(g.normal(), g.normal())}};
        e.experts = {CdfExpert{g.uniform(0.5, 2.0), g.uniform(-1, 0), BoundSide::Below}};
        break;
      case 4: {
        std::vector<double> masses(static_cast<std::size_t>(dof));
        for (auto& w : masses) w = g.uniform(0.1, 1.0);
        e.map = ComMap{masses};
        e.experts = {UniGaussExpert{Expert{GaussianExpert{g.normal_vec(2), g.chol(2)}}, g.uniform(-1, 2), 5.0}};
        break;
      }
      default:
        e.map = IdentityMap{};
        e.experts = {LowRankGaussianExpert{g.normal_vec(dof), g.uniform_vec(dof, -0.5, 0.5), 0.3 * g.normal_mat(dof, 1)}};
    }
    m.entries.push_back(std::move(e));
  }
  return m;
}

}  // namespace poe::testing
