#pragma once

// Tracking control and ergodic coverage derived from a product of experts.

#include <optional>
#include <random>
#include <sstream>

#include "poe/optim.hpp"
#include "poe/variational.hpp"

namespace poe {

/// Discrete linear system x' = A x + B u.
struct LinearSystem {
  MatrixXd A, B;
  double dt = 0.01;
};

inline void validate_system(const LinearSystem& s) {
  require(s.A.rows() == s.A.cols(), "A must be square");
  require(s.B.rows() == s.A.rows(), "B must have as many rows as A");
  require(s.B.cols() >= 1, "B needs at least one input");
  require(s.dt > 0.0, "dt must be positive");
}

/// Joint-space double integrator q'' = u over the state [q; q'], held input.
inline LinearSystem double_integrator(int dof, double dt = 0.01) {
  require(dof >= 1 && dt > 0.0, "double integrator needs dof >= 1 and dt > 0");
  const auto I = MatrixXd::Identity(dof, dof);
  LinearSystem s;
  s.dt = dt;
  s.A = MatrixXd::Identity(2 * dof, 2 * dof);
  s.A.topRightCorner(dof, dof) = dt * I;
  s.B.resize(2 * dof, dof);
  s.B << 0.5 * dt * dt * I, dt * I;
  return s;
}

/// Row blocks of the augmented state [y_1; ...; y_M; q; q'].
struct StateLayout {
  std::vector<Eigen::Index> offset, dim;  ///< one per entry
  int dof = 0;

  Eigen::Index q_offset() const { return offset.empty() ? 0 : offset.back() + dim.back(); }
  Eigen::Index qd_offset() const { return q_offset() + dof; }
  Eigen::Index size() const { return qd_offset() + dof; }
};

inline StateLayout state_layout(const ProductModel& m) {
  StateLayout l;
  l.dof = m.dof();
  Eigen::Index at = 0;
  for (const auto& e : m.entries) {
    l.offset.push_back(at);
    l.dim.push_back(output_dim(e.map, m.tree));
    at += l.dim.back();
  }
  return l;
}

inline VectorXd augmented_state(const ProductModel& m, const VectorXd& q, const VectorXd& qd) {
  const auto l = state_layout(m);
  VectorXd xi(l.size());
  const Frames f = forward_frames(m.tree, q);
  for (std::size_t i = 0; i < m.entries.size(); ++i)
    xi.segment(l.offset[i], l.dim[i]) = map_value(m.entries[i].map, m.tree, f, q);
  xi.segment(l.q_offset(), l.dof) = q;
  xi.segment(l.qd_offset(), l.dof) = qd;
  return xi;
}

struct AugmentedSystem {
  LinearSystem sys;
  StateLayout layout;
  VectorXd q_lin;
};

/// Appends every task-space output to the joint state. With Ĵ the map
/// Jacobian at q_lin, each block follows y' = y + Ĵ (q' - q), which is exact
/// for linear maps.
inline AugmentedSystem augment(const ProductModel& m, const LinearSystem& joint_sys, const VectorXd& q_lin) {
  validate_system(joint_sys);
  const int n = m.dof();
  require(joint_sys.A.rows() == 2 * n, "joint system state must be [q; q'] of size 2*dof");
  m.tree.check_configuration(q_lin);
  for (const auto& e : m.entries)
    if (!is_differentiable(e.map)) throw UnsupportedGradient("cannot linearize a " + map_kind(e.map) + " map");

  AugmentedSystem out;
  out.layout = state_layout(m);
  out.q_lin = q_lin;
  const auto& l = out.layout;
  const Eigen::Index N = l.size(), P = joint_sys.B.cols();
  out.sys.dt = joint_sys.dt;
  out.sys.A = MatrixXd::Zero(N, N);
  out.sys.B = MatrixXd::Zero(N, P);
  out.sys.A.bottomRightCorner(2 * n, 2 * n) = joint_sys.A;
  out.sys.B.bottomRows(2 * n) = joint_sys.B;

  const MatrixXd Aqq = joint_sys.A.topLeftCorner(n, n) - MatrixXd::Identity(n, n);
  const MatrixXd Aqv = joint_sys.A.topRightCorner(n, n);
  const MatrixXd Bq = joint_sys.B.topRows(n);
  const Frames f = forward_frames(m.tree, q_lin);
  for (std::size_t i = 0; i < m.entries.size(); ++i) {
    const MatrixXd J = map_jacobian(m.entries[i].map, m.tree, f, q_lin);
    const auto o = l.offset[i], d = l.dim[i];
    out.sys.A.block(o, o, d, d).setIdentity();
    out.sys.A.block(o, l.q_offset(), d, n) = J * Aqq;
    out.sys.A.block(o, l.qd_offset(), d, n) = J * Aqv;
    out.sys.B.middleRows(o, d) = J * Bq;
  }
  return out;
}

/// Standard deviations of the desired joint velocities and inputs.
struct ControlWeights {
  double velocity_sigma = 1.0;
  double input_sigma = 10.0;
};

/// Quadratic cost ½(ξ - z)ᵀQ(ξ - z) + ½uᵀRu over the augmented state.
struct QuadraticCost {
  MatrixXd Q;
  VectorXd z;
  MatrixXd R;
};

namespace detail {

/// Second-order expansion of -log p around y0 as ½(y - z)ᵀQ(y - z), keeping
/// the positive semidefinite part of -H.
inline std::pair<MatrixXd, VectorXd> local_quadratic(const MatrixXd& H, const VectorXd& g, const VectorXd& y0) {
  Eigen::SelfAdjointEigenSolver<MatrixXd> es(-0.5 * (H + H.transpose()));
  const VectorXd ev = es.eigenvalues();
  const MatrixXd& V = es.eigenvectors();
  const double tol = 1e-12 * std::max(1.0, ev.cwiseAbs().maxCoeff());
  VectorXd keep = VectorXd::Zero(ev.size()), inv = VectorXd::Zero(ev.size());
  for (Eigen::Index k = 0; k < ev.size(); ++k)
    if (ev[k] > tol) {
      keep[k] = ev[k];
      inv[k] = 1.0 / ev[k];
    }
  const MatrixXd Q = V * keep.asDiagonal() * V.transpose();
  const VectorXd z = y0 + V * inv.asDiagonal() * V.transpose() * g;
  return {Q, z};
}

}  // namespace detail

/// Gaussian-family experts give Q = Σ⁻¹ and z = μ exactly; other families and
/// the joint-limit barrier are expanded to second order at q_lin.
inline QuadraticCost poe_to_quadratic_cost(const ProductModel& m, const VectorXd& q_lin, int situation = 0,
                                           const ControlWeights& w = {}) {
  check_situation(m, situation);
  m.tree.check_configuration(q_lin);
  require(w.velocity_sigma > 0.0 && w.input_sigma > 0.0, "control weights must be positive");
  const auto l = state_layout(m);
  const int n = l.dof;
  QuadraticCost c;
  c.Q = MatrixXd::Zero(l.size(), l.size());
  c.z = VectorXd::Zero(l.size());
  c.R = MatrixXd::Identity(n, n) / (w.input_sigma * w.input_sigma);
  c.Q.block(l.qd_offset(), l.qd_offset(), n, n) = MatrixXd::Identity(n, n) / (w.velocity_sigma * w.velocity_sigma);

  const Frames f = forward_frames(m.tree, q_lin);
  for (std::size_t i = 0; i < m.entries.size(); ++i) {
    const Expert& e = m.entries[i].expert(situation);
    const auto o = l.offset[i], d = l.dim[i];
    if (auto mom = gaussian_moments(e); mom && !std::holds_alternative<PrompExpert>(e)) {
      c.Q.block(o, o, d, d) = mom->cov.llt().solve(MatrixXd::Identity(d, d));
      c.z.segment(o, d) = mom->mean;
    } else {
      const VectorXd y0 = map_value(m.entries[i].map, m.tree, f, q_lin);
      auto [Q, z] = detail::local_quadratic(expert_hess_y(e, y0), expert_grad_y(e, y0), y0);
      c.Q.block(o, o, d, d) = Q;
      c.z.segment(o, d) = z;
    }
  }
  if (m.limit_softness > 0.0) {
    const double s = m.limit_softness;
    VectorXd g = VectorXd::Zero(n), h(n);
    detail::limit_barrier(m, q_lin, &g);
    for (int j = 0; j < n; ++j) {
      const auto [lo, hi] = m.tree.limits()[static_cast<std::size_t>(j)];
      h[j] = 0.0;
      for (double zz : {(hi - q_lin[j]) / s, (q_lin[j] - lo) / s}) {
        const double r = normal_hazard(zz);
        h[j] -= r * (zz + r) / (s * s);
      }
    }
    auto [Q, z] = detail::local_quadratic(h.asDiagonal().toDenseMatrix(), g, q_lin);
    c.Q.block(l.q_offset(), l.q_offset(), n, n) = Q;
    c.z.segment(l.q_offset(), n) = z;
  }
  return c;
}

/// Gains of u_t = -K_t ξ_t + K^v_t v_{t+1}. An infinite-horizon controller
/// stores a single stationary gain.
struct LqtController {
  std::vector<MatrixXd> K, Kv;
  std::vector<VectorXd> v;  ///< v_{t+1} for step t
  std::vector<MatrixXd> P;  ///< cost-to-go P_{t+1} behind the gains of step t
  std::optional<int> horizon;
  VectorXd q_lin;

  int steps() const { return static_cast<int>(K.size()); }

  VectorXd control(int t, const VectorXd& xi) const {
    require(!K.empty(), "controller has no gains");
    const auto k = static_cast<std::size_t>(std::clamp(t, 0, steps() - 1));
    require(xi.size() == K[k].cols(), "state size does not match the controller gains");
    return -K[k] * xi + Kv[k] * v[k];
  }
};

namespace detail {

inline double spectral_radius(const MatrixXd& A) {
  if (A.size() == 0) return 0.0;
  return Eigen::EigenSolver<MatrixXd>(A, false).eigenvalues().cwiseAbs().maxCoeff();
}

inline void check_cost(const LinearSystem& sys, const MatrixXd& Q, const VectorXd& z, const MatrixXd& R) {
  validate_system(sys);
  const auto n = sys.A.rows(), p = sys.B.cols();
  require(Q.rows() == n && Q.cols() == n && z.size() == n, "Q and z must match the state size");
  require(R.rows() == p && R.cols() == p, "R must match the input size");
  require(R.isApprox(R.transpose(), 1e-12) && R.llt().info() == Eigen::Success, "R must be symmetric positive definite");
}

}  // namespace detail

/// Backward Riccati recursion for the tracking cost with constant Q, z and R.
/// `horizon` = nullopt solves the stationary (infinite-horizon) problem by
/// fixed-point iteration.
inline LqtController lqt_solve(const LinearSystem& sys, const MatrixXd& Q, const VectorXd& z, const MatrixXd& R,
                               std::optional<int> horizon, double tol = 1e-10, int max_iters = 100000) {
  detail::check_cost(sys, Q, z, R);
  const MatrixXd& A = sys.A;
  const MatrixXd& B = sys.B;
  const VectorXd Qz = Q * z;
  LqtController c;
  c.horizon = horizon;

  auto gains = [&](const MatrixXd& P, MatrixXd& K, MatrixXd& Kv) {
    const Eigen::LDLT<MatrixXd> S(B.transpose() * P * B + R);
    Kv = S.solve(B.transpose());
    K = Kv * P * A;
  };

  if (horizon) {
    require(*horizon >= 1, "horizon must be at least 1");
    const auto T = static_cast<std::size_t>(*horizon);
    c.K.resize(T);
    c.Kv.resize(T);
    c.v.resize(T);
    c.P.resize(T);
    MatrixXd P = Q;
    VectorXd v = Qz;
    for (std::size_t t = T; t-- > 0;) {
      gains(P, c.K[t], c.Kv[t]);
      c.v[t] = v;
      c.P[t] = P;
      const MatrixXd Acl = A - B * c.K[t];
      P = A.transpose() * P * Acl + Q;
      P = 0.5 * (P + P.transpose());
      v = Acl.transpose() * v + Qz;
    }
    return c;
  }

  MatrixXd P = Q, K, Kv;
  for (int it = 0;; ++it) {
    gains(P, K, Kv);
    MatrixXd next = A.transpose() * P * (A - B * K) + Q;
    next = 0.5 * (next + next.transpose());
    const double change = (next - P).cwiseAbs().maxCoeff();
    const bool finite = next.allFinite();
    P = std::move(next);
    if (finite && change <= tol * std::max(1.0, P.cwiseAbs().maxCoeff())) break;
    if (!finite || it + 1 >= max_iters) {
      std::ostringstream os;
      os << "Riccati iteration did not converge after " << it + 1 << " iterations (last change " << change
         << "); spectral radius of A = " << detail::spectral_radius(A);
      if (finite) os << ", of A - BK = " << detail::spectral_radius(A - B * K);
      os << "; the system is likely not stabilizable with respect to the cost";
      throw NumericalError(os.str());
    }
  }
  gains(P, K, Kv);
  const MatrixXd Acl = A - B * K;
  const Eigen::FullPivLU<MatrixXd> lu(MatrixXd::Identity(A.rows(), A.rows()) - Acl.transpose());
  if (Qz.cwiseAbs().maxCoeff() > 0.0 && !lu.isInvertible())
    throw NumericalError("stationary feedforward undefined: closed loop has an eigenvalue at 1 (spectral radius " +
                         std::to_string(detail::spectral_radius(Acl)) + ")");
  c.P = {P};
  c.K = {K};
  c.Kv = {Kv};
  c.v = {Qz.cwiseAbs().maxCoeff() > 0.0 ? VectorXd(lu.solve(Qz)) : VectorXd::Zero(A.rows())};
  return c;
}

// ---------------------------------------------------------------------------
// Rollout

struct Perturbation {
  int step = 0;
  VectorXd dq;  ///< added to the configuration before that step
};

struct RolloutOptions {
  int steps = 1000;
  int replan_every = 10;
  int horizon = 100;
  double dt = 0.01;
  ControlWeights weights;
  int situation = 0;
  std::vector<Perturbation> perturbations;
};

struct Trajectory {
  VectorXd t;
  MatrixXd q, qd, u;  ///< one row per step
  VectorXd log_unnorm;
};

inline void validate_rollout(const RolloutOptions& o, int dof) {
  require(o.steps >= 1 && o.replan_every >= 1 && o.horizon >= 1 && o.dt > 0.0, "invalid rollout options");
  for (const auto& p : o.perturbations) {
    require(p.step >= 0 && p.step < o.steps, "perturbation step outside the rollout");
    require(p.dq.size() == dof, "perturbation size must equal dof");
  }
}

/// Simulates the double-integrator plant under the receding-horizon LQT:
/// every `replan_every` steps the system is re-linearized and the cost
/// re-expanded at the current state, and the first-step gains are applied
/// until the next solve.
inline Trajectory rollout(const ProductModel& m, const VectorXd& q0, const RolloutOptions& o) {
  validate_model(m);
  check_situation(m, o.situation);
  m.tree.check_configuration(q0);
  validate_rollout(o, m.dof());
  const int n = m.dof();
  const LinearSystem plant = double_integrator(n, o.dt);

  Trajectory tr;
  tr.t.resize(o.steps + 1);
  tr.q.resize(o.steps + 1, n);
  tr.qd.resize(o.steps + 1, n);
  tr.u = MatrixXd::Zero(o.steps + 1, n);
  tr.log_unnorm.resize(o.steps + 1);

  VectorXd q = q0, qd = VectorXd::Zero(n);
  LqtController ctrl;
  for (int k = 0; k <= o.steps; ++k) {
    if (k < o.steps)
      for (const auto& p : o.perturbations)
        if (p.step == k) q += p.dq;
    tr.t[k] = k * o.dt;
    tr.q.row(k) = q.transpose();
    tr.qd.row(k) = qd.transpose();
    tr.log_unnorm[k] = log_unnorm(m, q, o.situation);
    if (k == o.steps) break;
    if (k % o.replan_every == 0) {
      const auto aug = augment(m, plant, q);
      const auto cost = poe_to_quadratic_cost(m, q, o.situation, o.weights);
      ctrl = lqt_solve(aug.sys, cost.Q, cost.z, cost.R, o.horizon);
    }
    const VectorXd u = ctrl.control(0, augmented_state(m, q, qd));
    if (!u.allFinite()) throw NumericalError("non-finite control at step " + std::to_string(k));
    tr.u.row(k) = u.transpose();
    const VectorXd x = plant.A * (VectorXd(2 * n) << q, qd).finished() + plant.B * u;
    q = x.head(n);
    qd = x.tail(n);
  }
  return tr;
}

// ---------------------------------------------------------------------------
// Ergodic coverage

struct ErgodicProblem {
  TargetDensity target;
  int horizon = 50;
  MatrixXd sensor_cov;
  double weight_vel = 1.0;
  double weight_acc = 1.0;
  VectorXd q0;
  int steps = 1500;
  double lr = 1e-2;
  int n_samples = 8;  ///< kernel draws per waypoint, shared by all waypoints
  std::uint64_t seed = 0;
};

inline void validate_ergodic(const ErgodicProblem& p) {
  require(p.target.dim >= 1 && static_cast<bool>(p.target.eval), "ergodic target is empty");
  require(p.horizon >= 2, "ergodic horizon must be at least 2");
  require(p.q0.size() == p.target.dim, "q0 size must equal the target dimension");
  require(p.sensor_cov.rows() == p.target.dim && p.sensor_cov.cols() == p.target.dim, "sensor covariance size");
  require(p.sensor_cov.isApprox(p.sensor_cov.transpose(), 1e-12) && p.sensor_cov.llt().info() == Eigen::Success,
          "sensor covariance must be symmetric positive definite");
  require(p.weight_vel >= 0.0 && p.weight_acc >= 0.0, "smoothness weights must be non-negative");
  require(p.steps >= 0 && p.lr > 0.0 && p.n_samples >= 1, "invalid ergodic optimizer settings");
}

struct ErgodicValue {
  double value = 0.0;
  MatrixXd grad;  ///< one row per waypoint
};

/// E_Γ[log Γ - log p~] with Γ = (1/T) Σ_t N(q_t, Σ), estimated with the draws
/// x_tj = q_t + L η_j, plus squared finite-difference velocity and
/// acceleration penalties. The gradient is exact for fixed η.
inline ErgodicValue ergodic_objective(const ErgodicProblem& p, const MatrixXd& traj, const MatrixXd& eta) {
  const auto T = traj.rows();
  const auto d = traj.cols();
  const auto n = eta.rows();
  require(T >= 2 && d == p.target.dim && eta.cols() == d && n >= 1, "ergodic objective: bad shapes");
  const Eigen::LLT<MatrixXd> llt(p.sensor_cov);
  const MatrixXd L = llt.matrixL();
  const MatrixXd Sinv = llt.solve(MatrixXd::Identity(d, d));
  const double log_norm = -0.5 * d * kLog2Pi - L.diagonal().array().log().sum();
  const MatrixXd offsets = eta * L.transpose();  // n x d

  ErgodicValue r;
  r.grad = MatrixXd::Zero(T, d);
  const double scale = 1.0 / static_cast<double>(T * n);
  VectorXd logk(T);
  MatrixXd diff(T, d);
  for (Eigen::Index t = 0; t < T; ++t) {
    for (Eigen::Index j = 0; j < n; ++j) {
      const VectorXd x = traj.row(t).transpose() + offsets.row(j).transpose();
      for (Eigen::Index s = 0; s < T; ++s) {
        diff.row(s) = (x - traj.row(s).transpose()).transpose();
        logk[s] = log_norm - 0.5 * diff.row(s) * Sinv * diff.row(s).transpose();
      }
      const double log_gamma = log_sum_exp(logk) - std::log(static_cast<double>(T));
      const VectorXd w = softmax(logk);
      const auto tv = p.target.eval(x);
      r.value += scale * (log_gamma - tv.value);
      // dx/dq_t = I; the kernel means q_s enter log Γ directly as well
      const VectorXd pull = Sinv * (diff.transpose() * w);
      r.grad.row(t) += scale * (-pull - tv.grad).transpose();
      r.grad += scale * (w.asDiagonal() * diff * Sinv);
    }
  }
  for (Eigen::Index t = 0; t + 1 < T; ++t) {
    const Eigen::RowVectorXd v = traj.row(t + 1) - traj.row(t);
    r.value += p.weight_vel * v.squaredNorm();
    r.grad.row(t + 1) += 2.0 * p.weight_vel * v;
    r.grad.row(t) -= 2.0 * p.weight_vel * v;
  }
  for (Eigen::Index t = 1; t + 1 < T; ++t) {
    const Eigen::RowVectorXd a = traj.row(t + 1) - 2.0 * traj.row(t) + traj.row(t - 1);
    r.value += p.weight_acc * a.squaredNorm();
    r.grad.row(t + 1) += 2.0 * p.weight_acc * a;
    r.grad.row(t) -= 4.0 * p.weight_acc * a;
    r.grad.row(t - 1) += 2.0 * p.weight_acc * a;
  }
  return r;
}

struct ErgodicResult {
  MatrixXd trajectory;  ///< horizon x dof, first row is q0
  std::vector<double> objective;
};

/// Adam descent on the waypoints with fresh kernel draws at every step; the
/// first waypoint stays at q0.
inline ErgodicResult ergodic_optimize(const ErgodicProblem& p) {
  validate_ergodic(p);
  const int d = p.target.dim;
  std::mt19937_64 rng(p.seed);
  std::normal_distribution<double> nd;
  ErgodicResult r;
  r.trajectory.resize(p.horizon, d);
  r.trajectory.row(0) = p.q0.transpose();
  const MatrixXd L = p.sensor_cov.llt().matrixL();
  for (int t = 1; t < p.horizon; ++t) {
    VectorXd step(d);
    for (auto& x : step) x = nd(rng);
    r.trajectory.row(t) = r.trajectory.row(t - 1) + 0.1 * (L * step).transpose();
  }
  Adam adam(p.lr);
  MatrixXd eta(p.n_samples, d);
  for (int it = 0; it <= p.steps; ++it) {
    for (auto& x : eta.reshaped()) x = nd(rng);
    auto ev = ergodic_objective(p, r.trajectory, eta);
    if (!std::isfinite(ev.value) || !ev.grad.allFinite())
      throw NumericalError("non-finite ergodic objective at step " + std::to_string(it));
    r.objective.push_back(ev.value);
    if (it == p.steps) break;
    ev.grad.row(0).setZero();
    r.trajectory.reshaped() -= adam.step(ev.grad.reshaped());
  }
  return r;
}

}  // namespace poe
