#pragma once

// Product of experts over task-space maps of a kinematic tree.

#include <algorithm>
#include <set>

#include "poe/experts.hpp"
#include "poe/kinematics.hpp"

namespace poe {

/// One factor of the product: an expert acting on a task map.
///
/// `experts` holds one parameter snapshot per situation when `bound_fields`
/// is non-empty (fields listed there take a separate value per situation,
/// every other field is tied), and a single snapshot otherwise.
struct Entry {
  TaskMap map;
  std::vector<Expert> experts;
  int priority = 0;  ///< 0 is the highest priority
  std::vector<std::string> bound_fields;
  std::vector<std::string> frozen_fields;  ///< excluded from training

  const Expert& expert(int situation) const {
    return experts.size() == 1 ? experts.front() : experts[static_cast<std::size_t>(situation)];
  }
};

struct ProductModel {
  KinematicTree tree;
  std::vector<Entry> entries;
  /// Width of the soft joint-limit barrier (log-CDF on both sides of every
  /// joint range); 0 disables it.
  double limit_softness = 0.0;

  int dof() const { return tree.dof(); }

  int situations() const {
    int s = 1;
    for (const auto& e : entries) s = std::max(s, static_cast<int>(e.experts.size()));
    return s;
  }

  int levels() const {
    int l = 0;
    for (const auto& e : entries) l = std::max(l, e.priority + 1);
    return l;
  }

  bool has_hierarchy() const { return levels() > 1; }
};

inline void validate_model(const ProductModel& m) {
  require(!m.entries.empty(), "a product model needs at least one entry");
  const int s = m.situations();
  std::set<int> prio;
  for (const auto& e : m.entries) {
    validate_map(e.map, m.tree);
    require(!e.experts.empty(), "entry has no expert");
    require(e.experts.size() == 1 || static_cast<int>(e.experts.size()) == s,
            "all situation-bound entries must have the same number of situations");
    require(e.experts.size() == 1 || !e.bound_fields.empty(),
            "several expert snapshots given without bound fields");
    require(e.priority >= 0, "priorities must be non-negative");
    prio.insert(e.priority);
    const int d = output_dim(e.map, m.tree);
    for (const auto& x : e.experts)
      require(expert_dim(x) == d, "expert dimension " + std::to_string(expert_dim(x)) +
                                      " does not match " + map_kind(e.map) + " output " +
                                      std::to_string(d));
    const auto layout = field_layout(e.experts.front());
    for (const auto& f : e.bound_fields) find_field(layout, f);
    for (const auto& f : e.frozen_fields) find_field(layout, f);
  }
  require(static_cast<int>(prio.size()) == *prio.rbegin() + 1, "priorities must be contiguous from 0");
  require(m.limit_softness >= 0.0, "limit softness must be non-negative");
}

inline void check_situation(const ProductModel& m, int situation) {
  if (situation < 0 || situation >= m.situations())
    throw ContractError("situation index " + std::to_string(situation) + " out of range [0, " +
                        std::to_string(m.situations()) + ")");
}

// ---------------------------------------------------------------------------
// Parameter layout

/// Indices of the flat trainable parameter vector owned by one entry.
struct EntryLayout {
  std::vector<int> tied;                ///< expert param indices shared by all situations
  std::vector<int> bound;               ///< expert param indices with one value per situation
  int offset = 0;                       ///< start of this entry in the global vector
  int situations = 1;
  int map_params = 0;
  int size() const {
    return static_cast<int>(tied.size()) + situations * static_cast<int>(bound.size()) + map_params;
  }
};

inline std::vector<EntryLayout> parameter_layout(const ProductModel& m) {
  std::vector<EntryLayout> out;
  int offset = 0;
  for (const auto& e : m.entries) {
    EntryLayout l;
    l.offset = offset;
    l.situations = static_cast<int>(e.experts.size());
    const auto layout = field_layout(e.experts.front());
    for (const auto& f : layout) {
      const bool frozen = std::find(e.frozen_fields.begin(), e.frozen_fields.end(), f.name) != e.frozen_fields.end();
      if (frozen) continue;
      const bool bound = std::find(e.bound_fields.begin(), e.bound_fields.end(), f.name) != e.bound_fields.end();
      for (int k = 0; k < f.size; ++k) (bound ? l.bound : l.tied).push_back(f.offset + k);
    }
    l.map_params = map_param_count(e.map);
    offset += l.size();
    out.push_back(std::move(l));
  }
  return out;
}

inline int num_parameters(const ProductModel& m) {
  int n = 0;
  for (const auto& l : parameter_layout(m)) n += l.size();
  return n;
}

inline VectorXd get_parameters(const ProductModel& m) {
  const auto layouts = parameter_layout(m);
  VectorXd theta(num_parameters(m));
  for (std::size_t i = 0; i < m.entries.size(); ++i) {
    const auto& e = m.entries[i];
    const auto& l = layouts[i];
    int k = l.offset;
    const VectorXd p0 = expert_params(e.experts.front());
    for (int idx : l.tied) theta[k++] = p0[idx];
    for (const auto& x : e.experts) {
      const VectorXd p = expert_params(x);
      for (int idx : l.bound) theta[k++] = p[idx];
    }
    const VectorXd mp = map_params(e.map);
    for (Eigen::Index j = 0; j < mp.size(); ++j) theta[k++] = mp[j];
  }
  return theta;
}

inline ProductModel with_parameters(const ProductModel& m, const VectorXd& theta) {
  require(theta.size() == num_parameters(m), "parameter vector has the wrong size");
  const auto layouts = parameter_layout(m);
  ProductModel out = m;
  for (std::size_t i = 0; i < m.entries.size(); ++i) {
    auto& e = out.entries[i];
    const auto& l = layouts[i];
    int k = l.offset;
    VectorXd tied(l.tied.size());
    for (auto& v : tied) v = theta[k++];
    for (auto& x : e.experts) {
      VectorXd p = expert_params(x);
      for (std::size_t j = 0; j < l.tied.size(); ++j) p[l.tied[j]] = tied[static_cast<Eigen::Index>(j)];
      for (int idx : l.bound) p[idx] = theta[k++];
      x = with_params(x, p);
    }
    if (l.map_params > 0) {
      e.map = with_map_params(e.map, theta.segment(k, l.map_params));
      k += l.map_params;
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Evaluation

namespace detail {

inline double limit_barrier(const ProductModel& m, const VectorXd& q, VectorXd* grad) {
  if (m.limit_softness <= 0.0) return 0.0;
  double v = 0.0;
  const double s = m.limit_softness;
  for (int j = 0; j < m.dof(); ++j) {
    const auto [lo, hi] = m.tree.limits()[static_cast<std::size_t>(j)];
    const double zu = (hi - q[j]) / s;
    const double zl = (q[j] - lo) / s;
    v += log_normal_cdf(zu) + log_normal_cdf(zl);
    if (grad) (*grad)[j] += (-normal_hazard(zu) + normal_hazard(zl)) / s;
  }
  return v;
}

}  // namespace detail

inline double log_unnorm(const ProductModel& m, const VectorXd& q, int situation = 0) {
  check_situation(m, situation);
  const Frames f = forward_frames(m.tree, q);
  double v = detail::limit_barrier(m, q, nullptr);
  for (const auto& e : m.entries) v += expert_logpdf(e.expert(situation), map_value(e.map, m.tree, f, q));
  return v;
}

struct ValueGrad {
  double value = 0.0;
  VectorXd grad;
};

/// log p~(q) and its exact gradient in q. The joint-limit barrier acts at the
/// highest priority.
inline ValueGrad log_unnorm_and_grad(const ProductModel& m, const VectorXd& q, int situation = 0) {
  check_situation(m, situation);
  const Frames f = forward_frames(m.tree, q);
  ValueGrad out{0.0, VectorXd::Zero(m.dof())};
  out.value = detail::limit_barrier(m, q, &out.grad);
  for (const auto& e : m.entries) {
    if (!is_differentiable(e.map))
      throw UnsupportedGradient("model contains a " + map_kind(e.map) + " map without a gradient");
    const Expert& x = e.expert(situation);
    const VectorXd y = map_value(e.map, m.tree, f, q);
    out.value += expert_logpdf(x, y);
    out.grad += map_jacobian(e.map, m.tree, f, q).transpose() * expert_grad_y(x, y);
  }
  return out;
}

inline VectorXd grad_q(const ProductModel& m, const VectorXd& q, int situation = 0) {
  return log_unnorm_and_grad(m, q, situation).grad;
}

struct FilteredGradient {
  double value = 0.0;  ///< unfiltered log p~(q); not the potential of `grad`
  VectorXd grad;
  std::vector<VectorXd> level_contributions;  ///< filtered gradient per priority level
};

/// Nullspace-filtered gradient: the contribution of level l >= 1 is projected
/// onto the nullspace of the stacked Jacobians of every level < l. The default
/// projector is exact (damping 0, see nullspace_projector).
inline FilteredGradient grad_q_ns_detailed(const ProductModel& m, const VectorXd& q, int situation = 0,
                                           double damping = 0.0) {
  check_situation(m, situation);
  const Frames f = forward_frames(m.tree, q);
  const int levels = m.levels();
  const int n = m.dof();
  FilteredGradient out;
  out.grad = VectorXd::Zero(n);
  out.level_contributions.assign(static_cast<std::size_t>(levels), VectorXd::Zero(n));
  std::vector<MatrixXd> level_jac(static_cast<std::size_t>(levels));
  out.value = detail::limit_barrier(m, q, &out.grad);
  for (const auto& e : m.entries) {
    if (!is_differentiable(e.map))
      throw UnsupportedGradient("model contains a " + map_kind(e.map) + " map without a gradient");
    const Expert& x = e.expert(situation);
    const VectorXd y = map_value(e.map, m.tree, f, q);
    const MatrixXd J = map_jacobian(e.map, m.tree, f, q);
    out.value += expert_logpdf(x, y);
    const auto lvl = static_cast<std::size_t>(e.priority);
    out.level_contributions[lvl] += J.transpose() * expert_grad_y(x, y);
    auto& stack = level_jac[lvl];
    MatrixXd grown(stack.rows() + J.rows(), n);
    if (stack.rows() > 0) grown.topRows(stack.rows()) = stack;
    grown.bottomRows(J.rows()) = J;
    stack = std::move(grown);
  }
  MatrixXd higher(0, n);
  for (int l = 0; l < levels; ++l) {
    auto& g = out.level_contributions[static_cast<std::size_t>(l)];
    if (l > 0) g = nullspace_projector(higher, damping) * g;
    out.grad += g;
    const MatrixXd& J = level_jac[static_cast<std::size_t>(l)];
    MatrixXd grown(higher.rows() + J.rows(), n);
    if (higher.rows() > 0) grown.topRows(higher.rows()) = higher;
    if (J.rows() > 0) grown.bottomRows(J.rows()) = J;
    higher = std::move(grown);
  }
  return out;
}

inline VectorXd grad_q_ns(const ProductModel& m, const VectorXd& q, int situation = 0) {
  return grad_q_ns_detailed(m, q, situation).grad;
}

/// Gradient of log p~(q | situation) with respect to the flat trainable
/// parameters (see get_parameters). Fields bound to other situations get 0.
inline VectorXd grad_params(const ProductModel& m, const VectorXd& q, int situation = 0) {
  check_situation(m, situation);
  const Frames f = forward_frames(m.tree, q);
  const auto layouts = parameter_layout(m);
  VectorXd g = VectorXd::Zero(num_parameters(m));
  for (std::size_t i = 0; i < m.entries.size(); ++i) {
    const auto& e = m.entries[i];
    const auto& l = layouts[i];
    const Expert& x = e.expert(situation);
    const VectorXd y = map_value(e.map, m.tree, f, q);
    const VectorXd gp = expert_grad_params(x, y);
    int k = l.offset;
    for (int idx : l.tied) g[k++] += gp[idx];
    const int s = l.situations == 1 ? 0 : situation;
    k += s * static_cast<int>(l.bound.size());
    for (int idx : l.bound) g[k++] += gp[idx];
    if (l.map_params > 0) {
      const int start = l.offset + l.size() - l.map_params;
      g.segment(start, l.map_params) +=
          map_param_jacobian(e.map, f).transpose() * expert_grad_y(x, y);
    }
  }
  return g;
}

// ---------------------------------------------------------------------------
// Mode finding

struct ModeResult {
  VectorXd q;
  double value = 0.0;
  double grad_norm = 0.0;
  int iterations = 0;
  bool converged = false;
};

/// Gradient ascent on log p~ with backtracking (Armijo) line search.
inline ModeResult mode_find(const ProductModel& m, const VectorXd& q0, int situation = 0,
                            int max_iters = 2000, double grad_tol = 1e-6) {
  m.tree.check_configuration(q0);
  ModeResult r{q0, 0.0, 0.0, 0, false};
  auto cur = log_unnorm_and_grad(m, r.q, situation);
  double step = 1.0;
  for (int it = 0; it < max_iters; ++it) {
    r.grad_norm = cur.grad.norm();
    if (r.grad_norm < grad_tol) {
      r.converged = true;
      break;
    }
    step = std::min(step * 2.0, 1e3);
    bool accepted = false;
    while (step > 1e-20) {
      const VectorXd cand = r.q + step * cur.grad;
      const double v = log_unnorm(m, cand, situation);
      if (std::isfinite(v) && v >= cur.value + 1e-4 * step * cur.grad.squaredNorm()) {
        r.q = cand;
        cur = log_unnorm_and_grad(m, r.q, situation);
        accepted = true;
        break;
      }
      step *= 0.5;
    }
    r.iterations = it + 1;
    if (!accepted) break;
  }
  r.value = cur.value;
  r.grad_norm = cur.grad.norm();
  r.converged = r.converged || r.grad_norm < grad_tol;
  return r;
}

}  // namespace poe
