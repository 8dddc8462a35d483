#pragma once

#include <boost/uuid/detail/sha1.hpp>
#include <chrono>
#include <filesystem>
#include <random>

#include "spdc/config.hpp"

namespace spdc {

enum class Command {
  simulate,
  solve_bsde,
  verify_duality,
  verify_malliavin,
  verify_flow,
  gradient_check,
  optimize,
  full_harvesting_demo
};

inline const std::vector<std::pair<std::string, Command>>& command_names() {
  static const std::vector<std::pair<std::string, Command>> v{
      {"simulate", Command::simulate},
      {"solve-bsde", Command::solve_bsde},
      {"verify-duality", Command::verify_duality},
      {"verify-malliavin", Command::verify_malliavin},
      {"verify-flow", Command::verify_flow},
      {"gradient-check", Command::gradient_check},
      {"optimize", Command::optimize},
      {"full-harvesting-demo", Command::full_harvesting_demo}};
  return v;
}

inline std::string to_string(Command c) {
  for (const auto& [s, k] : command_names())
    if (k == c) return s;
  return "?";
}

inline Command command_from(const std::string& s) {
  for (const auto& [n, k] : command_names())
    if (n == s) return k;
  throw ConfigError("unknown command " + s);
}

struct CheckLine {
  std::string name;
  bool pass = false;
  double value = 0.0, bound = 0.0;
};

struct ResultsBundle {
  Command command = Command::simulate;
  json document;  // everything written to the results file
  std::vector<CheckLine> checks;
  std::vector<std::string> sidecars;
  double wall_seconds = 0.0;

  bool all_pass() const {
    for (const auto& c : checks)
      if (!c.pass) return false;
    return true;
  }
};

/// SHA-1 of "blob <size>\0" + text, as git hashes file contents.
inline std::string git_blob_sha1(const std::string& text) {
  boost::uuids::detail::sha1 h;
  const std::string head = "blob " + std::to_string(text.size()) + std::string(1, '\0');
  h.process_bytes(head.data(), head.size());
  h.process_bytes(text.data(), text.size());
  unsigned int d[5];
  h.get_digest(d);
  char buf[41];
  for (int i = 0; i < 5; ++i) std::snprintf(buf + 8 * i, 9, "%08x", d[i]);
  return std::string(buf, 40);
}

namespace detail {

inline json to_json(const Vec& v) {
  json a = json::array();
  for (int i = 0; i < v.size(); ++i) a.push_back(v[i]);
  return a;
}

inline json to_json(const CostReport& c) {
  return {{"form", to_string(c.form)}, {"J", c.J}, {"se", c.se}, {"running", c.running},
          {"terminal", c.terminal}, {"recursive", c.recursive}};
}

inline json to_json(const DualityReport& r) {
  return {{"n", r.n}, {"m", r.m}, {"lhs", r.lhs}, {"rhs", r.rhs}, {"residual", r.residual}, {"se", r.se},
          {"pass", r.pass}};
}

inline json to_json(const IbpReport& r) {
  return {{"kind", r.kind}, {"M", r.M}, {"lhs", r.lhs}, {"rhs", r.rhs}, {"residual", r.residual}, {"se", r.se},
          {"pass", r.pass}};
}

inline json to_json(const SmpGradient& G) {
  return {{"G", to_json(G.G)}, {"se", to_json(G.se)}, {"norm", G.norm}, {"stat", gradient_stat(G.G, G.se)}};
}

class Csv {
 public:
  Csv(const std::string& path, const std::vector<std::string>& header) : o_(path) {
    if (!o_) throw std::runtime_error("cannot open " + path);
    for (std::size_t i = 0; i < header.size(); ++i) o_ << (i ? "," : "") << header[i];
    o_ << '\n';
  }
  void row(const std::vector<double>& v) {
    for (std::size_t i = 0; i < v.size(); ++i) o_ << (i ? "," : "") << fmt_double(v[i]);
    o_ << '\n';
  }

 private:
  std::ofstream o_;
};

struct Runner {
  const RunConfig& c;
  std::filesystem::path out;
  ResultsBundle& R;
  json& rep;

  std::string name() const { return to_string(R.command); }

  std::string sidecar(const std::string& table) {
    const std::string f = name() + "_" + table + ".csv";
    R.sidecars.push_back(f);
    return (out / f).string();
  }

  void check(const std::string& n, bool pass, double value, double bound) {
    R.checks.push_back({n, pass, value, bound});
  }

  HatBundle hat(const ModelSpec& m, const PolicyParams& pp, bool adjoint) const {
    HatBundle H;
    build_hat(H, m, pp, config_grid(c), c.M, c.seed, c.solver, adjoint);
    return H;
  }

  void simulate(const ModelSpec& m, const PolicyParams& pp) {
    const TimeGrid g = config_grid(c);
    const Ensemble EP = simulate_ensemble(m, pp, g, c.M, c.seed, Measure::P_with_Y_as_BM);
    const MeanSe rho = density_martingale_check(EP);
    rep["density_mean"] = rho.mean;
    rep["density_se"] = rho.se;
    const double z = rho.se > 0 ? std::abs(rho.mean - 1.0) / rho.se : 0.0;
    check("density martingale E[rho_T] = 1 within 3 SE", z <= 3.0, z, 3.0);
    const Ensemble EQ = simulate_ensemble(m, pp, g, c.M, c.seed, Measure::Q_u_with_B_as_BM);
    rep["sup_second_moment_Q"] = sup_second_moment(EQ);
    rep["sup_second_moment_P"] = sup_second_moment(EP);
    if (c.csv) write_forward_csv(sidecar("path0"), EQ.paths[0], g);
  }

  void solve_bsde_cmd(const ModelSpec& m, const PolicyParams& pp) {
    const TimeGrid g = config_grid(c);
    const Ensemble EQ = simulate_ensemble(m, pp, g, c.M, c.seed, Measure::Q_u_with_B_as_BM);
    const BsdeResult BQ = solve_bsde(m, EQ, c.solver.bsde_basis, c.solver.ridge);
    const Ensemble EP = simulate_ensemble(m, pp, g, c.M, c.seed + 1, Measure::P_with_Y_as_BM);
    const BsdeResult BP = solve_bsde(m, EP, c.solver.bsde_basis, c.solver.ridge);
    const CostReport q = compute_cost(m, EQ, BQ, MeasureForm::Q_form);
    const CostReport p = compute_cost(m, EP, BP, MeasureForm::P_form);
    rep["y0"] = to_json(BQ.y0);
    rep["max_picard_residual"] = BQ.max_picard_residual;
    rep["max_condition"] = BQ.max_cond;
    rep["cost_Q"] = to_json(q);
    rep["cost_P"] = to_json(p);
    const double s = std::hypot(q.se, p.se), z = s > 0 ? std::abs(q.J - p.J) / s : 0.0;
    check("two-measure cost equality within 3 combined SE", z <= 3.0, z, 3.0);
    if (c.csv) {
      Csv t(sidecar("y_mean"), {"t", "y_mean"});
      for (int k = 0; k <= g.n_steps; ++k) {
        double a = 0.0;
        for (const auto& s0 : BQ.sol) a += s0.y(0, k);
        t.row({g.t(k), a / double(BQ.sol.size())});
      }
    }
  }

  void verify_duality(const ModelSpec& m, const PolicyParams& pp) {
    const HatBundle H = hat(m, pp, true);
    const DualityForcing f = random_forcing(m, c.duality.forcing_seed, c.duality.forcing_scale);
    const DualityReport dir = duality_check_direct(H, f, c.duality.augment_state);
    rep["direct"] = to_json(dir);
    check("direct duality within 3 SE", dir.pass, dir.se > 0 ? std::abs(dir.residual) / dir.se : 0.0, 3.0);
    const LadderReport L = duality_check_truncated(H, f, c.duality.ladder, c.duality.augment_state);
    json pts = json::array();
    for (std::size_t a = 0; a < L.points.size(); ++a) {
      json p = to_json(L.points[a]);
      p["gap"] = L.gap[a];
      p["mean_gap"] = L.mean_gap[a];
      pts.push_back(p);
      const auto& r = L.points[a];
      check("truncated duality n = " + std::to_string(r.n) + " within 3 SE", r.pass,
            r.se > 0 ? std::abs(r.residual) / r.se : 0.0, 3.0);
    }
    rep["ladder"] = pts;
    check("ladder gap non-increasing in n", L.trend_non_increasing, L.gap.empty() ? 0.0 : L.gap.front(), 0.0);
    const TraceDiagnostic td = trace_diagnostic(H.P, H.grid(), c.duality.trace_theta);
    rep["trace_diagnostic"] = {{"theta", td.theta}, {"statistic", td.statistic}, {"data_norm", td.data_norm},
                               {"ratio", td.ratio}};
    if (c.csv) {
      Csv t(sidecar("ladder"), {"n", "lhs", "rhs", "residual", "se", "gap", "pass"});
      for (std::size_t a = 0; a < L.points.size(); ++a) {
        const auto& r = L.points[a];
        t.row({double(r.n), r.lhs, r.rhs, r.residual, r.se, L.gap[a], r.pass ? 1.0 : 0.0});
      }
    }
  }

  void verify_malliavin(const ModelSpec& m, const PolicyParams& pp) {
    const TimeGrid g = config_grid(c);
    const auto noise = sample_noise_ensemble(g, m.n_W, m.d, c.jumps, c.M, c.seed);
    const TerminalTest T = tanh_test(default_test_weights(m.n()));
    std::vector<IbpReport> rs{malliavin_duality_W(m, pp, g, noise, T), malliavin_duality_B(m, pp, g, noise, T)};
    if (m.K() > 0)
      rs.push_back(malliavin_duality_N(
          m, pp, g, std::vector<NoiseGrid>(noise.begin(), noise.begin() + c.malliavin.M_jump), T));
    json a = json::array();
    for (const auto& r : rs) {
      a.push_back(to_json(r));
      check("Malliavin duality " + r.kind + " within 3 SE", r.pass, r.se > 0 ? std::abs(r.residual) / r.se : 0.0,
            3.0);
    }
    rep["dualities"] = a;
    const std::vector<NoiseGrid> few(noise.begin(), noise.begin() + std::min(c.malliavin.adapted_paths, c.M));
    const double ad = adaptedness_defect(m, pp, g, few, c.malliavin.adapted_steps);
    rep["adaptedness_defect"] = ad;
    check("adaptedness zero derivatives", ad <= c.malliavin.adapted_tol, ad, c.malliavin.adapted_tol);
    rep["chain_rule_defect"] = chain_rule_defect(m, pp, g, few, T, {0, g.n_steps / 2, g.n_steps - 1});
    if (c.malliavin.smp) {
      const HatBundle H = hat(m, pp, true);
      MalliavinOptions o;
      o.bump_rel = c.malliavin.bump_rel;
      o.budget = c.malliavin.budget;
      const MalliavinSmpBundle B = assemble_malliavin_smp(H, o);
      json s = to_json(B.grad);
      s["m_consistency"] = B.m_consistency;
      s["resimulated_steps"] = B.resim_steps;
      rep["malliavin_stationarity"] = s;
    }
  }

  void verify_flow(const ModelSpec& m, const PolicyParams& pp) {
    const TimeGrid g = config_grid(c);
    const int np = std::min(c.flow.paths, c.M);
    const auto noise = sample_noise_ensemble(g, m.n_W, m.d, c.jumps, np, c.seed);
    double comp = 0.0, direct = 0.0;
    std::vector<int> s_idx = c.flow.s_index;
    std::sort(s_idx.begin(), s_idx.end());
    const Vec x = Vec::LinSpaced(m.n(), 0.3, -0.7);
    for (const NoiseGrid& ng : noise) {
      const ForwardPath hatp = simulate_forward(m, pp, ng, g, Measure::Q_u_with_B_as_BM);
      const LinearSpdeCoeffs C = hat_linear_coeffs(m, hatp, g);
      std::vector<FlowOperatorPath> F;
      for (int s : s_idx) F.push_back(simulate_flow(C, m.space, ng, hatp.dBhat, m.weights, g, s));
      for (std::size_t a = 0; a < s_idx.size(); ++a) {
        for (std::size_t b = a + 1; b < s_idx.size(); ++b)
          for (int r = s_idx[b]; r <= g.n_steps; ++r)
            comp = std::max(comp, (F[b].ops[r] * F[a].ops[s_idx[b]] - F[a].ops[r]).norm());
        const Mat D = simulate_linear_spde(C, m.space, ng, hatp.dBhat, m.weights, g, x, s_idx[a]);
        for (int r = s_idx[a]; r <= g.n_steps; ++r)
          direct = std::max(direct, (F[a].ops[r] * x - D.col(r)).norm() / std::max(1.0, D.col(r).norm()));
      }
    }
    rep["composition_error"] = comp;
    rep["direct_error"] = direct;
    check("flow composition", comp <= c.flow.composition_tol, comp, c.flow.composition_tol);
    check("flow against direct linear simulation", direct <= c.flow.direct_tol, direct, c.flow.direct_tol);
    const auto t = log_grid(1e-3, 1e-1, 50);
    const PowerLawFit fit = fit_power_law(t, semigroup_hs_profile(m.space, t));
    const double expo = -fit.slope;
    rep["semigroup_decay_exponent"] = expo;
    if (c.flow.semigroup_check)
      check("semigroup decay exponent", std::abs(expo - c.flow.semigroup_target) <= c.flow.semigroup_band,
            expo, c.flow.semigroup_band);
  }

  void gradient_check(const ModelSpec& m, const PolicyParams& pp) {
    const HatBundle H = hat(m, pp, true);
    SmpGradient G = smp_gradient(H);
    const VariationFamily basis = first_variation_basis(H);
    attach_pathwise_se(H, G, &basis);
    rep["gradient"] = to_json(G);
    Vec v = G.G.norm() > 0 ? Vec(-G.G / G.G.norm()) : Vec::Unit(pp.size(), 0);
    VariationReport R = basis.report(v);
    fd_slopes(H, v, c.gradient.eps, R);
    json tab = json::array();
    bool decreasing = true;
    for (std::size_t e = 0; e < R.eps.size(); ++e) {
      tab.push_back({{"eps", R.eps[e]}, {"slope", R.fd_slopes[e]}, {"se", R.fd_se[e]}, {"gap", R.fd_gap[e]}});
      if (e > 0 && R.fd_gap[e] >= R.fd_gap[e - 1]) decreasing = false;
    }
    rep["direction"] = to_json(v);
    rep["I"] = R.I_v;
    rep["I_se"] = R.se;
    rep["table"] = tab;
    rep["agreement"] = R.agreement;
    rep["extrapolated"] = R.extrapolated;
    if (R.eps.size() > 1) check("slope gap decreases as eps halves", decreasing, R.fd_gap.back(), 0.0);
    check("relative disagreement at the smallest eps", R.agreement <= c.gradient.tolerance, R.agreement,
          c.gradient.tolerance);
    std::mt19937_64 gen(c.gradient.direction_seed);
    std::normal_distribution<double> nd;
    json cons = json::array();
    std::unique_ptr<Csv> ct;
    if (c.csv && c.gradient.directions > 0)
      ct = std::make_unique<Csv>(sidecar("consistency"), std::vector<std::string>{"direction", "G_dot_v", "se_G",
                                                                                  "I", "se_I", "z"});
    for (int r = 0; r < c.gradient.directions; ++r) {
      Vec d(pp.size());
      for (int a = 0; a < d.size(); ++a) d[a] = nd(gen);
      const VariationReport Rd = basis.report(d);
      const double gd = G.G.dot(d), sg = mean_se(Vec(G.samples * d)).se;
      const double s = std::hypot(sg, Rd.se), z = s > 0 ? std::abs(gd - Rd.I_v) / s : 0.0;
      cons.push_back({{"G_dot_v", gd}, {"se_G", sg}, {"I", Rd.I_v}, {"se_I", Rd.se}, {"z", z}});
      check("SMP gradient matches I(v), direction " + std::to_string(r), z <= 3.0, z, 3.0);
      if (ct) ct->row({double(r), gd, sg, Rd.I_v, Rd.se, z});
    }
    rep["consistency"] = cons;
    if (c.csv) {
      Csv t(sidecar("slopes"), {"eps", "slope", "se", "gap", "I"});
      for (std::size_t e = 0; e < R.eps.size(); ++e) t.row({R.eps[e], R.fd_slopes[e], R.fd_se[e], R.fd_gap[e], R.I_v});
    }
  }

  OptimizerResult optimize(const ModelSpec& m, const PolicyParams& pp) {
    const OptimizerResult O = optimize_policy(m, pp, config_grid(c), c.solver, c.optimizer);
    json log = json::array();
    for (const auto& it : O.log)
      log.push_back({{"iter", it.iter}, {"J", it.J}, {"se", it.se}, {"grad_norm", it.grad_norm},
                     {"grad_stat", it.grad_stat}, {"step", it.step}, {"theta", to_json(it.theta)}});
    rep["log"] = log;
    rep["stop_reason"] = O.stop_reason;
    rep["theta"] = to_json(O.pp.theta);
    rep["cost"] = to_json(O.cost);
    rep["final_gradient"] = to_json(O.grad);
    if (c.csv) write_optimizer_csv(sidecar("log"), O);
    return O;
  }

  void demo(const ModelSpec& m, const PolicyParams& pp) {
    if (c.model_kind != "harvesting") throw ConfigError("model.kind: full-harvesting-demo needs the harvesting model");
    const OptimizerResult O = optimize(m, pp);
    HatBundle H;
    build_hat(H, m, O.pp, config_grid(c), c.M, c.seed + 1, c.solver, true);
    SmpGradient G = smp_gradient(H);
    attach_pathwise_se(H, G);
    const double stat = gradient_stat(G.G, G.se);
    json st = to_json(G);
    json faces = json::array();
    bool faces_ok = true;
    double worst = std::numeric_limits<double>::infinity();
    for (const auto& b : box_face_check(G, H)) {
      if (b.se > 0) worst = std::min(worst, b.value / b.se);
      faces.push_back({{"knot", b.knot}, {"c", b.c}, {"face", b.upper ? "upper" : "lower"}, {"value", b.value},
                       {"se", b.se}, {"pass", b.pass}});
      faces_ok = faces_ok && b.pass;
    }
    st["box_faces"] = faces;
    st["fresh_seed"] = c.seed + 1;
    rep["stationarity"] = st;
    check("final stationarity |G| / SE", stat <= c.optimizer.tol_stat, stat, c.optimizer.tol_stat);
    check("final box-face conditions, worst value / SE", faces_ok, worst, -3.0);
  }
};

}  // namespace detail

/// Runs one command and writes <out>/<command>.json, CSV sidecars and a
/// <command>.timing.json sidecar (wall clock is kept out of the results
/// file so that reruns compare bit for bit).
inline ResultsBundle run_command(const RunConfig& c, Command cmd, const std::string& out_dir) {
  const auto t0 = std::chrono::steady_clock::now();
  std::filesystem::create_directories(out_dir);
  ResultsBundle R;
  R.command = cmd;
  json rep = json::object();
  detail::Runner run{c, out_dir, R, rep};
  const ModelSpec m = config_model(c);
  const PolicyParams pp = config_policy(c, m);
  switch (cmd) {
    case Command::simulate: run.simulate(m, pp); break;
    case Command::solve_bsde: run.solve_bsde_cmd(m, pp); break;
    case Command::verify_duality: run.verify_duality(m, pp); break;
    case Command::verify_malliavin: run.verify_malliavin(m, pp); break;
    case Command::verify_flow: run.verify_flow(m, pp); break;
    case Command::gradient_check: run.gradient_check(m, pp); break;
    case Command::optimize: run.optimize(m, pp); break;
    case Command::full_harvesting_demo: run.demo(m, pp); break;
  }
  const std::string cfg_text = c.echo.dump();
  json checks = json::array();
  for (const auto& k : R.checks)
    checks.push_back({{"name", k.name}, {"pass", k.pass}, {"value", k.value}, {"bound", k.bound}});
  R.document = {{"command", to_string(cmd)},
                {"config_sha1", git_blob_sha1(cfg_text)},
                {"config", c.echo},
                {"rng", {{"engine", "mt19937_64"}, {"seeding", "seed_seq(seed, path index, stream tag)"}, {"seed", c.seed}}},
                {"status", R.all_pass() ? "pass" : "fail"},
                {"checks", checks},
                {"report", rep},
                {"sidecars", R.sidecars}};
  const std::filesystem::path out(out_dir);
  {
    std::ofstream o(out / (to_string(cmd) + ".json"));
    if (!o) throw std::runtime_error("cannot write results to " + out_dir);
    o << R.document.dump(2) << '\n';
  }
  R.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  std::ofstream t(out / (to_string(cmd) + ".timing.json"));
  t << json{{"wall_seconds", R.wall_seconds}, {"threads", thread_count()}}.dump(2) << '\n';
  return R;
}

}  // namespace spdc
