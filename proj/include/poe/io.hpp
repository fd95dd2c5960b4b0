#pragma once

// JSON and CSV persistence for models, mixtures, datasets and reports.
//
// Doubles are written with 17 significant digits, so every file read back
// reproduces the in-memory values bit for bit.

#include <charconv>
#include <cstdio>
#include <fstream>
#include <sstream>

#include <json.hpp>

#include "poe/trainer.hpp"

namespace poe {

using Json = nlohmann::json;

namespace detail {

[[noreturn]] inline void bad_json(const std::string& where, const std::string& what) {
  throw ValidationError(where + ": " + what);
}

inline const Json& field(const Json& j, const char* key, const std::string& where) {
  if (!j.is_object()) bad_json(where, "expected an object");
  const auto it = j.find(key);
  if (it == j.end()) bad_json(where, std::string("missing field '") + key + "'");
  return *it;
}

inline double number(const Json& j, const std::string& where) {
  if (!j.is_number()) bad_json(where, "expected a number");
  return j.get<double>();
}

inline int integer(const Json& j, const std::string& where) {
  if (!j.is_number_integer()) bad_json(where, "expected an integer");
  return j.get<int>();
}

template <class T>
T value_or(const Json& j, const char* key, T fallback) {
  const auto it = j.find(key);
  return it == j.end() ? fallback : it->get<T>();
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Vectors and matrices

inline Json to_json(const VectorXd& v) { return Json(std::vector<double>(v.data(), v.data() + v.size())); }

inline Json matrix_to_json(const MatrixXd& M) {
  Json rows = Json::array();
  for (Eigen::Index i = 0; i < M.rows(); ++i) rows.push_back(to_json(M.row(i).transpose()));
  return rows;
}

inline VectorXd vector_from_json(const Json& j, const std::string& where) {
  if (!j.is_array()) detail::bad_json(where, "expected an array of numbers");
  VectorXd v(static_cast<Eigen::Index>(j.size()));
  for (std::size_t i = 0; i < j.size(); ++i) v[static_cast<Eigen::Index>(i)] = detail::number(j[i], where);
  return v;
}

inline MatrixXd matrix_from_json(const Json& j, const std::string& where) {
  if (!j.is_array()) detail::bad_json(where, "expected an array of rows");
  if (j.empty()) return MatrixXd(0, 0);
  const auto cols = static_cast<Eigen::Index>(j[0].size());
  MatrixXd M(static_cast<Eigen::Index>(j.size()), cols);
  for (std::size_t i = 0; i < j.size(); ++i) {
    const VectorXd r = vector_from_json(j[i], where);
    if (r.size() != cols) detail::bad_json(where, "rows of different length");
    M.row(static_cast<Eigen::Index>(i)) = r.transpose();
  }
  return M;
}

inline Vec2 vec2_from_json(const Json& j, const std::string& where) {
  const VectorXd v = vector_from_json(j, where);
  if (v.size() != 2) detail::bad_json(where, "expected 2 numbers");
  return v;
}

// ---------------------------------------------------------------------------
// Kinematic tree and task maps

inline Json to_json(const KinematicTree& t) {
  Json joints = Json::array(), limits = Json::array();
  for (const auto& j : t.joints())
    joints.push_back({{"parent", j.parent}, {"length", j.length}, {"angle_offset", j.angle_offset}});
  for (const auto& [lo, hi] : t.limits()) limits.push_back({lo, hi});
  return {{"joints", joints},
          {"base", {{"x", t.base().x}, {"y", t.base().y}, {"phi", t.base().phi}}},
          {"limits", limits}};
}

inline KinematicTree tree_from_json(const Json& j) {
  const std::string where = "tree";
  std::vector<Joint> joints;
  for (const auto& x : detail::field(j, "joints", where)) {
    Joint jt;
    jt.parent = detail::integer(detail::field(x, "parent", where), where);
    jt.length = detail::number(detail::field(x, "length", where), where);
    jt.angle_offset = detail::value_or(x, "angle_offset", 0.0);
    joints.push_back(jt);
  }
  BasePose base;
  if (const auto it = j.find("base"); it != j.end())
    base = {detail::value_or(*it, "x", 0.0), detail::value_or(*it, "y", 0.0), detail::value_or(*it, "phi", 0.0)};
  std::vector<std::pair<double, double>> limits;
  if (const auto it = j.find("limits"); it != j.end()) {
    for (const auto& l : *it) {
      const VectorXd v = vector_from_json(l, "tree.limits");
      if (v.size() != 2) detail::bad_json("tree.limits", "each limit is [lo, hi]");
      limits.emplace_back(v[0], v[1]);
    }
  }
  try {
    return KinematicTree(std::move(joints), base, std::move(limits));
  } catch (const ContractError& e) {
    throw ValidationError(std::string("tree: ") + e.what());
  }
}

inline Json to_json(const TaskMap& map) {
  Json j = std::visit(
      overloaded{
          [](const PositionMap& m) { return Json{{"link", m.link}}; },
          [](const OrientationMap& m) { return Json{{"link", m.link}}; },
          [](const ToolMap& m) { return Json{{"link", m.link}, {"offset", to_json(m.offset)}, {"trainable", m.trainable}}; },
          [](const LogManipulabilityMap& m) { return Json{{"link", m.link}}; },
          [](const ComMap& m) { return Json{{"masses", m.masses}}; },
          [](const RelativeDistanceMap& m) {
            Json pts = Json::array(), tgt = Json::array();
            for (const auto& p : m.points) pts.push_back({{"link", p.link}, {"offset", to_json(p.offset)}});
            for (const auto& t : m.targets) tgt.push_back(to_json(t));
            return Json{{"points", pts}, {"targets", tgt}};
          },
          [](const IdentityMap&) { return Json::object(); },
          [](const ProjectionMap& m) {
            return Json{{"link", m.link}, {"target", to_json(m.target)}, {"iterations", m.iterations}};
          },
      },
      map);
  j["kind"] = map_kind(map);
  return j;
}

inline TaskMap map_from_json(const Json& j) {
  const std::string where = "map";
  const auto kind = detail::field(j, "kind", where).get<std::string>();
  auto link = [&] { return detail::integer(detail::field(j, "link", where), where); };
  if (kind == "position") return PositionMap{link()};
  if (kind == "orientation") return OrientationMap{link()};
  if (kind == "log_manipulability") return LogManipulabilityMap{link()};
  if (kind == "identity") return IdentityMap{};
  if (kind == "tool")
    return ToolMap{link(), vec2_from_json(detail::field(j, "offset", where), where), detail::value_or(j, "trainable", false)};
  if (kind == "com") return ComMap{detail::field(j, "masses", where).get<std::vector<double>>()};
  if (kind == "relative_distance") {
    RelativeDistanceMap m;
    for (const auto& p : detail::field(j, "points", where))
      m.points.push_back({detail::integer(detail::field(p, "link", where), where),
                          p.contains("offset") ? vec2_from_json(p["offset"], where) : Vec2(Vec2::Zero())});
    for (const auto& t : detail::field(j, "targets", where)) m.targets.push_back(vec2_from_json(t, where));
    return m;
  }
  if (kind == "projection")
    return ProjectionMap{link(), vec2_from_json(detail::field(j, "target", where), where), detail::value_or(j, "iterations", 10)};
  detail::bad_json(where, "unknown map kind '" + kind + "'");
}

// ---------------------------------------------------------------------------
// Experts

inline Json to_json(const Expert& e) {
  Json j = std::visit(
      overloaded{
          [](const GaussianExpert& g) { return Json{{"mean", to_json(g.mean)}, {"chol", matrix_to_json(g.chol)}}; },
          [](const IsotropicGaussianExpert& g) { return Json{{"mean", to_json(g.mean)}, {"log_sigma", g.log_sigma}}; },
          [](const LowRankGaussianExpert& g) {
            return Json{{"mean", to_json(g.mean)}, {"log_sigma", to_json(g.log_sigma)}, {"factor", matrix_to_json(g.factor)}};
          },
          [](const ScalarGaussianExpert& g) { return Json{{"mean", g.mean}, {"log_sigma", g.log_sigma}}; },
          [](const CdfExpert& c) {
            return Json{{"bound", c.bound}, {"log_sigma", c.log_sigma}, {"side", c.side == BoundSide::Below ? "below" : "above"}};
          },
          [](const PrompExpert& p) {
            return Json{{"weight_mean", to_json(p.weight_mean)},
                        {"weight_chol", matrix_to_json(p.weight_chol)},
                        {"log_sigma_obs", p.log_sigma_obs},
                        {"basis", {{"n_basis", p.basis.n_basis}, {"n_steps", p.basis.n_steps}, {"dims", p.basis.dims}}}};
          },
          [](const UniGaussExpert& u) {
            return Json{{"inner", to_json(*u.inner)}, {"logit_weight", u.logit_weight}, {"inflate", u.inflate}};
          },
      },
      e);
  j["family"] = family_name(e);
  return j;
}

namespace detail {

/// log σ from either "log_sigma" or the more readable "sigma".
inline double log_sigma_field(const Json& j, const std::string& where) {
  if (j.contains("log_sigma")) return number(j["log_sigma"], where);
  const double s = number(field(j, "sigma", where), where);
  if (!(s > 0.0)) bad_json(where, "sigma must be positive");
  return std::log(s);
}

/// Lower Cholesky factor from "chol" or, for configs, "cov".
inline MatrixXd chol_field(const Json& j, const char* chol_key, const char* cov_key, const std::string& where) {
  if (j.contains(chol_key)) return matrix_from_json(j[chol_key], where);
  const MatrixXd S = matrix_from_json(field(j, cov_key, where), where);
  Eigen::LLT<MatrixXd> llt(S);
  if (S.rows() != S.cols() || llt.info() != Eigen::Success) bad_json(where, std::string(cov_key) + " is not positive definite");
  return llt.matrixL();
}

}  // namespace detail

inline Expert expert_from_json(const Json& j) {
  const std::string where = "expert";
  const auto fam = detail::field(j, "family", where).get<std::string>();
  auto mean = [&] { return vector_from_json(detail::field(j, "mean", where), where); };
  Expert e;
  if (fam == "gaussian") {
    e = GaussianExpert{mean(), detail::chol_field(j, "chol", "cov", where)};
  } else if (fam == "isotropic_gaussian") {
    e = IsotropicGaussianExpert{mean(), detail::log_sigma_field(j, where)};
  } else if (fam == "low_rank_gaussian") {
    e = LowRankGaussianExpert{mean(), vector_from_json(detail::field(j, "log_sigma", where), where),
                              matrix_from_json(detail::field(j, "factor", where), where)};
  } else if (fam == "scalar_gaussian") {
    e = ScalarGaussianExpert{detail::number(detail::field(j, "mean", where), where), detail::log_sigma_field(j, where)};
  } else if (fam == "cdf") {
    const auto side = detail::value_or<std::string>(j, "side", "below");
    if (side != "below" && side != "above") detail::bad_json(where, "cdf side is 'below' or 'above'");
    e = CdfExpert{detail::number(detail::field(j, "bound", where), where), detail::log_sigma_field(j, where),
                  side == "below" ? BoundSide::Below : BoundSide::Above};
  } else if (fam == "promp") {
    PrompExpert p;
    p.weight_mean = vector_from_json(detail::field(j, "weight_mean", where), where);
    p.weight_chol = detail::chol_field(j, "weight_chol", "weight_cov", where);
    p.log_sigma_obs = detail::value_or(j, "log_sigma_obs", -2.0);
    const auto& b = detail::field(j, "basis", where);
    p.basis = {detail::value_or(b, "n_basis", 5), detail::value_or(b, "n_steps", 10), detail::value_or(b, "dims", 1)};
    e = p;
  } else if (fam == "uni_gauss") {
    e = UniGaussExpert{expert_from_json(detail::field(j, "inner", where)), detail::value_or(j, "logit_weight", 2.0),
                       detail::value_or(j, "inflate", 10.0)};
  } else {
    detail::bad_json(where, "unknown expert family '" + fam + "'");
  }
  return e;
}

// ---------------------------------------------------------------------------
// Product model

inline Json to_json(const ProductModel& m) {
  Json entries = Json::array();
  for (const auto& e : m.entries) {
    Json experts = Json::array();
    for (const auto& x : e.experts) experts.push_back(to_json(x));
    entries.push_back({{"map", to_json(e.map)},
                       {"priority", e.priority},
                       {"bound_fields", e.bound_fields},
                       {"frozen_fields", e.frozen_fields},
                       {"experts", experts}});
  }
  return {{"tree", to_json(m.tree)}, {"limit_softness", m.limit_softness}, {"entries", entries}};
}

/// Parses and validates a model. An entry may give a single "expert" that is
/// replicated for `situations` situations when it has bound fields.
inline ProductModel model_from_json(const Json& j, int situations = 1) {
  ProductModel m;
  m.tree = tree_from_json(detail::field(j, "tree", "model"));
  m.limit_softness = detail::value_or(j, "limit_softness", 0.0);
  if (m.limit_softness < 0.0) throw ValidationError("model: limit_softness must be non-negative");
  for (const auto& x : detail::field(j, "entries", "model")) {
    Entry e;
    e.map = map_from_json(detail::field(x, "map", "entry"));
    e.priority = detail::value_or(x, "priority", 0);
    e.bound_fields = detail::value_or(x, "bound_fields", std::vector<std::string>{});
    e.frozen_fields = detail::value_or(x, "frozen_fields", std::vector<std::string>{});
    if (x.contains("experts")) {
      for (const auto& y : x["experts"]) e.experts.push_back(expert_from_json(y));
    } else {
      const Expert one = expert_from_json(detail::field(x, "expert", "entry"));
      e.experts.assign(e.bound_fields.empty() ? 1 : static_cast<std::size_t>(situations), one);
    }
    m.entries.push_back(std::move(e));
  }
  try {
    validate_model(m);
  } catch (const ContractError& e) {
    throw ValidationError(std::string("model: ") + e.what());
  }
  return m;
}

// ---------------------------------------------------------------------------
// Mixtures

inline Json to_json(const MixtureVariational& v) {
  Json comps = Json::array();
  for (const auto& c : v.components) comps.push_back({{"mean", to_json(c.mean)}, {"chol", matrix_to_json(c.chol)}});
  return {{"logits", to_json(v.logits)}, {"components", comps}};
}

inline MixtureVariational mixture_from_json(const Json& j) {
  MixtureVariational v;
  v.logits = vector_from_json(detail::field(j, "logits", "mixture"), "mixture.logits");
  for (const auto& c : detail::field(j, "components", "mixture"))
    v.components.push_back({vector_from_json(detail::field(c, "mean", "mixture"), "mixture.mean"),
                            matrix_from_json(detail::field(c, "chol", "mixture"), "mixture.chol")});
  try {
    validate_mixture(v);
  } catch (const ContractError& e) {
    throw ValidationError(std::string("mixture: ") + e.what());
  }
  return v;
}

// ---------------------------------------------------------------------------
// Files

inline std::string read_text(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ValidationError("cannot open '" + path + "'");
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

inline void write_text(const std::string& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw ValidationError("cannot write '" + path + "'");
  out << text;
  if (!out) throw ValidationError("write to '" + path + "' failed");
}

inline Json read_json(const std::string& path) {
  try {
    return Json::parse(read_text(path));
  } catch (const Json::parse_error& e) {
    throw ValidationError("'" + path + "' is not valid JSON: " + e.what());
  }
}

inline void write_json(const std::string& path, const Json& j) { write_text(path, j.dump(2) + "\n"); }

// ---------------------------------------------------------------------------
// Dataset CSV: header q0,...,q{d-1}[,situation], one sample per line.

inline std::string format_double(double x) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", x);
  return buf;
}

inline std::string dataset_to_csv(const Dataset& d) {
  std::string out;
  for (int j = 0; j < d.dof(); ++j) out += (j ? ",q" : "q") + std::to_string(j);
  if (!d.situation.empty()) out += ",situation";
  out += '\n';
  for (int i = 0; i < d.size(); ++i) {
    for (int j = 0; j < d.dof(); ++j) {
      if (j) out += ',';
      out += format_double(d.samples(i, j));
    }
    if (!d.situation.empty()) out += ',' + std::to_string(d.situation[static_cast<std::size_t>(i)]);
    out += '\n';
  }
  return out;
}

inline Dataset dataset_from_csv(const std::string& text) {
  std::istringstream in(text);
  std::string line;
  auto fail = [](int ln, const std::string& what) -> void {
    throw ValidationError("dataset line " + std::to_string(ln) + ": " + what);
  };
  auto split = [](const std::string& s) {
    std::vector<std::string> out;
    std::string cell;
    std::istringstream ls(s);
    while (std::getline(ls, cell, ',')) out.push_back(cell);
    if (!s.empty() && s.back() == ',') out.emplace_back();
    return out;
  };
  if (!std::getline(in, line)) throw ValidationError("dataset is empty");
  if (!line.empty() && line.back() == '\r') line.pop_back();
  const auto header = split(line);
  const bool labeled = !header.empty() && header.back() == "situation";
  const int dof = static_cast<int>(header.size()) - (labeled ? 1 : 0);
  if (dof < 1) fail(1, "no joint columns");
  for (int j = 0; j < dof; ++j)
    if (header[static_cast<std::size_t>(j)] != "q" + std::to_string(j)) fail(1, "expected column q" + std::to_string(j));
  std::vector<std::vector<double>> rows;
  Dataset d;
  int ln = 1;
  while (std::getline(in, line)) {
    ++ln;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    const auto cells = split(line);
    if (cells.size() != header.size()) fail(ln, "expected " + std::to_string(header.size()) + " fields");
    std::vector<double> row(static_cast<std::size_t>(dof));
    for (int j = 0; j < dof; ++j) {
      const auto& c = cells[static_cast<std::size_t>(j)];
      char* end = nullptr;
      row[static_cast<std::size_t>(j)] = std::strtod(c.c_str(), &end);
      if (c.empty() || end != c.c_str() + c.size()) fail(ln, "'" + c + "' is not a number");
    }
    if (labeled) {
      const auto& c = cells.back();
      int s = 0;
      const auto [p, ec] = std::from_chars(c.data(), c.data() + c.size(), s);
      if (ec != std::errc() || p != c.data() + c.size() || s < 0) fail(ln, "'" + c + "' is not a situation label");
      d.situation.push_back(s);
    }
    rows.push_back(std::move(row));
  }
  d.samples.resize(static_cast<Eigen::Index>(rows.size()), dof);
  for (std::size_t i = 0; i < rows.size(); ++i)
    for (int j = 0; j < dof; ++j) d.samples(static_cast<Eigen::Index>(i), j) = rows[i][static_cast<std::size_t>(j)];
  return d;
}

inline Dataset read_dataset(const std::string& path) { return dataset_from_csv(read_text(path)); }
inline void write_dataset(const std::string& path, const Dataset& d) { write_text(path, dataset_to_csv(d)); }

// ---------------------------------------------------------------------------
// Training report

inline Json to_json(const TrainReport& r) {
  return {{"method", r.method},         {"steps", r.steps},         {"data_norm", r.data_norm},
          {"model_norm", r.model_norm}, {"gap_norm", r.gap_norm},   {"elbo_trace", r.elbo_trace},
          {"grad_gap", r.grad_gap},     {"aborted", r.aborted},     {"message", r.message},
          {"warnings", r.warnings},     {"wallclock_s", r.wallclock_s}};
}

}  // namespace poe
