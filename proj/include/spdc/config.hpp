#pragma once

#include <fstream>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"
#include "spdc/malliavin.hpp"
#include "spdc/models.hpp"

namespace spdc {

using json = nlohmann::ordered_json;

struct Discretization {
  int dim_h = 16, n_W = 16, d = 1, n_steps = 64;
  double T = 1.0;
  BasisKind basis = BasisKind::neumann_cosine;
};

struct DualityOptions {
  std::vector<int> ladder{2, 4, 8, 16};  // default: powers of two below n_W, then n_W
  std::uint64_t forcing_seed = 3;
  double forcing_scale = 0.3;
  bool augment_state = false;
  double trace_theta = 0.25;  // weight exponent of the trace diagnostic
};

struct GradientCheckOptions {
  std::vector<double> eps{0.08, 0.04, 0.02};
  double tolerance = 0.05;  // relative disagreement at the smallest eps
  int directions = 5;       // random directions for the SMP consistency check
  std::uint64_t direction_seed = 5;
};

struct MalliavinConfig {
  double bump_rel = 1e-4;
  long long budget = 200'000'000;
  int M_jump = 1000;  // paths for the add-one-jump identity, at most M
  std::vector<int> adapted_steps{8, 40};  // default: n_steps / 8 and 5 n_steps / 8
  int adapted_paths = 2;
  double adapted_tol = 1e-9;
  bool smp = false;  // also assemble the Malliavin stationarity bracket
};

struct FlowConfig {
  std::vector<int> s_index{0, 16};  // default: 0 and n_steps / 4
  int paths = 2;
  double composition_tol = 1e-9;
  double direct_tol = 1e-10;
  bool semigroup_check = false;
  double semigroup_target = 0.25, semigroup_band = 0.05;
};

struct RunConfig {
  std::string model_kind = "lq";  // lq | harvesting | random_bounded
  LqParams lq;
  HarvestingParams harvesting;
  RandomBoundedParams random;
  Discretization disc;
  JumpMeasureSpec jumps{{0.2, 0.5, 0.8}, {1.0, 0.7, 0.3}};
  int M = 4096;
  std::uint64_t seed = 1;
  PolicyFeatures features = PolicyFeatures::affine_y;
  int n_knots = 4;
  std::vector<double> theta{0.0};  // one value broadcasts
  SolverOptions solver;
  DualityOptions duality;
  GradientCheckOptions gradient;
  MalliavinConfig malliavin;
  FlowConfig flow;
  OptimizerOptions optimizer;
  bool csv = true;
  json echo;  // resolved document, defaults filled in
};

namespace detail {

inline std::pair<int, int> line_col(const std::string& text, std::size_t byte) {
  int line = 1, col = 1;
  for (std::size_t i = 0; i + 1 < byte && i < text.size(); ++i) {
    if (text[i] == '\n') {
      ++line;
      col = 1;
    } else {
      ++col;
    }
  }
  return {line, col};
}

/// Strict object view: every key must be consumed, missing or null keys take the
/// default and are written back so the echo records them.
class Section {
 public:
  Section(json& j, std::string path) : j_(j), path_(std::move(path)) {
    if (!j_.is_object()) throw ConfigError(path_ + ": expected an object");
  }
  ~Section() noexcept(false) {
    if (std::uncaught_exceptions() == 0) finish();
  }

  template <class T>
  void get(const std::string& key, T& out) {
    seen_.insert(key);
    if (!j_.contains(key) || j_.at(key).is_null()) {
      j_[key] = out;
      return;
    }
    try {
      out = j_.at(key).get<T>();
    } catch (const json::exception&) {
      throw ConfigError(field(key) + ": wrong type");
    }
    j_[key] = out;
  }

  json& sub(const std::string& key) {
    seen_.insert(key);
    if (!j_.contains(key)) j_[key] = json::object();
    return j_[key];
  }

  bool has(const std::string& key) const { return j_.contains(key); }
  std::string field(const std::string& key) const { return path_.empty() ? key : path_ + "." + key; }

  void finish() {
    for (auto it = j_.begin(); it != j_.end(); ++it)
      if (!seen_.count(it.key())) throw ConfigError("unknown key " + field(it.key()));
  }

 private:
  json& j_;
  std::string path_;
  std::set<std::string> seen_;
};

inline void check(bool ok, const std::string& msg) {
  if (!ok) throw ConfigError(msg);
}

inline void read_lq(json& j, LqParams& p) {
  Section s(j, "model.params");
  s.get("preset", p.preset);
  s.get("decay", p.decay);
  s.get("control_gain", p.control_gain);
  s.get("sigma", p.sigma);
  s.get("obs_noise_gain", p.obs_noise_gain);
  s.get("jump_size", p.jump_size);
  s.get("sensor", p.sensor);
  s.get("sensor_u", p.sensor_u);
  s.get("saturation", p.saturation);
  s.get("R", p.R);
  s.get("s", p.s);
  s.get("q", p.q);
  s.get("terminal", p.terminal);
  s.get("terminal_lin", p.terminal_lin);
  s.get("eta", p.eta);
  s.get("recursive", p.recursive);
  check(p.preset == "general" || p.preset == "certificate",
        "model.params.preset: expected general or certificate");
}

inline void read_harvesting(json& j, HarvestingParams& p) {
  Section s(j, "model.params");
  s.get("r_a", p.r_a);
  s.get("c_a", p.c_a);
  s.get("sigma_level", p.sigma_level);
  s.get("p_L", p.p_L);
  s.get("c_L", p.c_L);
  s.get("lambda_L", p.lambda_L);
  s.get("x_star", p.x_star);
  s.get("beta", p.beta);
  s.get("x_T_star", p.x_T_star);
  s.get("eta", p.eta);
  s.get("theta_bar", p.theta_bar);
  s.get("delta_r", p.delta_r);
  s.get("delta_gamma", p.delta_gamma);
  s.get("rho_weights", p.rho_weights);
  s.get("terminal_utility", p.terminal_utility);
  s.get("x0_level", p.x0_level);
  s.get("sensor_centers", p.sensor_centers);
  s.get("sensor_width", p.sensor_width);
  s.get("saturation", p.saturation);
  s.get("u_max", p.u_max);
  s.get("n_quad", p.n_quad);
  check(!p.sensor_centers.empty(), "model.params.sensor_centers: at least one sensor is needed");
}

inline void read_random(json& j, RandomBoundedParams& p) {
  Section s(j, "model.params");
  s.get("seed", p.seed);
  s.get("level", p.level);
}

inline RegressionBasis read_basis(json& j, const std::string& path, RegressionBasis b) {
  Section s(j, path);
  std::string kind = to_string(b.kind);
  s.get("kind", kind);
  try {
    b.kind = regression_kind_from(kind);
  } catch (const std::exception&) {
    throw ConfigError(path + ".kind: unknown regression kind " + kind);
  }
  s.get("degree", b.degree);
  s.get("quad_modes", b.quad_modes);
  s.get("max_features", b.max_features);
  return b;
}

}  // namespace detail

/// Validates and fills a parsed document. The document is rewritten in
/// place with every default, and kept as the config echo.
inline RunConfig config_from_json(json doc) {
  using detail::check;
  RunConfig c;
  {
    detail::Section root(doc, "");
    {
      json& mj = root.sub("model");
      detail::Section ms(mj, "model");
      check(ms.has("kind"), "model.kind: required (lq, harvesting or random_bounded)");
      ms.get("kind", c.model_kind);
      json& pj = ms.sub("params");
      if (c.model_kind == "lq")
        detail::read_lq(pj, c.lq);
      else if (c.model_kind == "harvesting")
        detail::read_harvesting(pj, c.harvesting);
      else if (c.model_kind == "random_bounded")
        detail::read_random(pj, c.random);
      else
        throw ConfigError("model.kind: unknown model " + c.model_kind);
    }
    {
      detail::Section s(root.sub("discretization"), "discretization");
      s.get("dim_h", c.disc.dim_h);
      s.get("n_W", c.disc.n_W);
      s.get("d", c.disc.d);
      s.get("n_steps", c.disc.n_steps);
      s.get("T", c.disc.T);
      std::string kind = to_string(c.disc.basis);
      s.get("basis", kind);
      try {
        c.disc.basis = basis_kind_from(kind);
      } catch (const std::exception&) {
        throw ConfigError("discretization.basis: unknown basis " + kind);
      }
    }
    {
      detail::Section s(root.sub("jumps"), "jumps");
      s.get("marks", c.jumps.marks);
      s.get("weights", c.jumps.weights);
    }
    {
      detail::Section s(root.sub("ensemble"), "ensemble");
      s.get("M", c.M);
      s.get("seed", c.seed);
    }
    {
      detail::Section s(root.sub("policy"), "policy");
      std::string f = to_string(c.features);
      s.get("features", f);
      try {
        c.features = policy_features_from(f);
      } catch (const std::exception&) {
        throw ConfigError("policy.features: unknown feature set " + f);
      }
      s.get("n_knots", c.n_knots);
      if (s.has("theta") && s.sub("theta").is_number()) {
        double v = 0.0;
        s.get("theta", v);
        c.theta = {v};
      } else {
        s.get("theta", c.theta);
      }
    }
    {
      detail::Section s(root.sub("solver"), "solver");
      c.solver.bsde_basis = detail::read_basis(s.sub("bsde_basis"), "solver.bsde_basis", c.solver.bsde_basis);
      c.solver.adjoint_basis =
          detail::read_basis(s.sub("adjoint_basis"), "solver.adjoint_basis", c.solver.adjoint_basis);
      s.get("ridge", c.solver.ridge);
      s.get("truncation_n", c.solver.truncation_n);
    }
    {
      detail::Section s(root.sub("duality"), "duality");
      c.duality.ladder.clear();
      for (int n = 2; n < c.disc.n_W; n *= 2) c.duality.ladder.push_back(n);
      c.duality.ladder.push_back(c.disc.n_W);
      s.get("ladder", c.duality.ladder);
      s.get("forcing_seed", c.duality.forcing_seed);
      s.get("forcing_scale", c.duality.forcing_scale);
      s.get("augment_state", c.duality.augment_state);
      s.get("trace_theta", c.duality.trace_theta);
    }
    {
      detail::Section s(root.sub("gradient_check"), "gradient_check");
      s.get("eps", c.gradient.eps);
      s.get("tolerance", c.gradient.tolerance);
      s.get("directions", c.gradient.directions);
      s.get("direction_seed", c.gradient.direction_seed);
    }
    {
      detail::Section s(root.sub("malliavin"), "malliavin");
      c.malliavin.M_jump = std::min(c.malliavin.M_jump, c.M);
      c.malliavin.adapted_steps = {c.disc.n_steps / 8, 5 * c.disc.n_steps / 8};
      s.get("bump_rel", c.malliavin.bump_rel);
      s.get("budget", c.malliavin.budget);
      s.get("M_jump", c.malliavin.M_jump);
      s.get("adapted_steps", c.malliavin.adapted_steps);
      s.get("adapted_paths", c.malliavin.adapted_paths);
      s.get("adapted_tol", c.malliavin.adapted_tol);
      s.get("smp", c.malliavin.smp);
    }
    {
      detail::Section s(root.sub("flow"), "flow");
      c.flow.s_index = {0, c.disc.n_steps / 4};
      s.get("s_index", c.flow.s_index);
      s.get("paths", c.flow.paths);
      s.get("composition_tol", c.flow.composition_tol);
      s.get("direct_tol", c.flow.direct_tol);
      s.get("semigroup_check", c.flow.semigroup_check);
      s.get("semigroup_target", c.flow.semigroup_target);
      s.get("semigroup_band", c.flow.semigroup_band);
    }
    {
      detail::Section s(root.sub("optimizer"), "optimizer");
      c.optimizer.M = c.M;
      c.optimizer.seed = c.seed;
      s.get("step", c.optimizer.step);
      s.get("iters", c.optimizer.iters);
      s.get("M", c.optimizer.M);
      s.get("seed", c.optimizer.seed);
      s.get("tol_stat", c.optimizer.tol_stat);
      s.get("theta_max", c.optimizer.theta_max);
      s.get("max_halvings", c.optimizer.max_halvings);
    }
    {
      detail::Section s(root.sub("output"), "output");
      s.get("csv", c.csv);
    }
  }

  const Discretization& D = c.disc;
  check(D.dim_h >= 1, "discretization.dim_h: must be >= 1");
  check(D.n_W >= 1, "discretization.n_W: must be >= 1");
  check(D.d >= 1, "discretization.d: must be >= 1");
  check(D.n_steps >= 1, "discretization.n_steps: must be >= 1");
  check(D.T > 0.0, "discretization.T: must be positive");
  check(c.model_kind != "harvesting" || D.d == 1, "discretization.d: the harvesting model observes one channel");
  check(c.jumps.marks.size() == c.jumps.weights.size(),
        "jumps.weights: " + std::to_string(c.jumps.weights.size()) + " intensities for " +
            std::to_string(c.jumps.marks.size()) + " jumps.marks");
  for (double w : c.jumps.weights) check(w >= 0.0, "jumps.weights: intensities must be >= 0");
  if (c.model_kind == "harvesting" && !c.harvesting.rho_weights.empty())
    check(c.harvesting.rho_weights.size() == c.jumps.marks.size(),
          "model.params.rho_weights: one entry per jumps.marks value");
  check(c.M >= 2, "ensemble.M: must be >= 2");
  check(c.n_knots >= 1, "policy.n_knots: must be >= 1");
  for (int n : c.duality.ladder)
    check(n >= 0 && n <= D.n_W, "duality.ladder: entry n = " + std::to_string(n) +
                                    " exceeds discretization.n_W = " + std::to_string(D.n_W));
  check(c.solver.truncation_n <= D.n_W,
        "solver.truncation_n: " + std::to_string(c.solver.truncation_n) + " exceeds discretization.n_W = " +
            std::to_string(D.n_W));
  check(!c.gradient.eps.empty(), "gradient_check.eps: at least one value is needed");
  for (double e : c.gradient.eps) check(e > 0.0, "gradient_check.eps: values must be positive");
  check(c.gradient.directions >= 0, "gradient_check.directions: must be >= 0");
  check(c.malliavin.bump_rel > 0.0, "malliavin.bump_rel: must be positive");
  check(c.malliavin.M_jump >= 2 && c.malliavin.M_jump <= c.M,
        "malliavin.M_jump: must lie in [2, ensemble.M]");
  for (int j : c.malliavin.adapted_steps)
    check(j >= 0 && j <= D.n_steps, "malliavin.adapted_steps: step out of [0, discretization.n_steps]");
  for (int s : c.flow.s_index)
    check(s >= 0 && s <= D.n_steps, "flow.s_index: index out of [0, discretization.n_steps]");
  check(c.optimizer.M >= 2, "optimizer.M: must be >= 2");
  check(c.optimizer.step > 0.0, "optimizer.step: must be positive");
  c.echo = std::move(doc);
  return c;
}

/// Parses strict JSON; a seed override replaces ensemble.seed before
/// defaults are resolved.
inline RunConfig parse_config(const std::string& text, const std::string& origin = "config",
                              std::optional<std::uint64_t> seed = std::nullopt) {
  json doc;
  try {
    doc = json::parse(text);
  } catch (const json::parse_error& e) {
    const auto [line, col] = detail::line_col(text, e.byte);
    std::string what = e.what();
    const auto p = what.find("parse error");
    throw ConfigError(origin + ":" + std::to_string(line) + ":" + std::to_string(col) + ": " +
                      (p == std::string::npos ? what : what.substr(p)));
  }
  if (!doc.is_object()) throw ConfigError(origin + ": top level must be an object");
  if (seed) {
    if (doc.contains("ensemble") && !doc["ensemble"].is_object()) throw ConfigError("ensemble: expected an object");
    doc["ensemble"]["seed"] = *seed;
  }
  return config_from_json(std::move(doc));
}

inline RunConfig load_config(const std::string& path, std::optional<std::uint64_t> seed = std::nullopt) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config " + path);
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_config(ss.str(), path, seed);
}

// ------------------------------------------------------------ builders

inline SpectralSpace config_space(const RunConfig& c) {
  return build_spectral_space(c.disc.dim_h, 1.0, c.disc.basis);
}

inline TimeGrid config_grid(const RunConfig& c) { return make_time_grid(c.disc.T, c.disc.n_steps); }

inline LqParams config_lq(const RunConfig& c) {
  LqParams lp = c.lq;
  lp.dim_h = c.disc.dim_h;
  lp.n_W = c.disc.n_W;
  lp.d = c.disc.d;
  lp.n_steps = c.disc.n_steps;
  lp.T = c.disc.T;
  return lp;
}

inline ModelSpec config_model(const RunConfig& c) {
  const SpectralSpace sp = config_space(c);
  if (c.model_kind == "lq") return make_lq_model(config_lq(c), sp, c.jumps);
  if (c.model_kind == "harvesting") return make_harvesting_model(c.harvesting, sp, c.disc.n_W, c.jumps);
  return make_random_bounded_model(c.random, sp, c.disc.n_W, c.disc.d, c.jumps);
}

inline PolicyParams config_policy(const RunConfig& c, const ModelSpec& m) {
  PolicyParams pp = make_policy(c.features, c.n_knots, m.p, m.d, c.disc.T);
  if (c.theta.size() == 1) {
    pp.theta.setConstant(c.theta[0]);
  } else {
    if (int(c.theta.size()) != pp.size())
      throw ConfigError("policy.theta: " + std::to_string(c.theta.size()) + " values for " +
                        std::to_string(pp.size()) + " policy parameters");
    for (int a = 0; a < pp.size(); ++a) pp.theta[a] = c.theta[a];
  }
  return pp;
}

}  // namespace spdc
