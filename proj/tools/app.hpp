#pragma once

// Commands behind the mfcscore executable.

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <numeric>
#include <string>
#include <vector>

#include <json.hpp>

#include "mfcscore/config.hpp"
#include "mfcscore/metrics.hpp"
#include "mfcscore/svg.hpp"
#include "mfcscore/training.hpp"

namespace mfcscore::app {

namespace fs = std::filesystem;
using nlohmann::json;

enum ExitCode { ok = 0, failure = 1, invalid = 2, diverged = 3 };

struct Overrides {
  std::string out;
  std::size_t seeds = 0;  // 0: keep config
  std::string mode;       // empty: keep config
};

inline void write_text(const fs::path& path, const std::string& text) {
  std::ofstream f(path);
  if (!f) throw std::runtime_error("cannot write " + path.string());
  f << text;
}

inline std::vector<double> linspace(double lo, double hi, std::size_t n) {
  std::vector<double> v(n);
  for (std::size_t i = 0; i < n; ++i) v[i] = lo + (hi - lo) * static_cast<double>(i) / static_cast<double>(n - 1);
  return v;
}

/// Grid data for the figures: phi(0, .) and the terminal KDE density/score
/// against the exact ones (d = 1); particle snapshots and density grids
/// (d = 2); the variance of an untrained network's flow.
inline json plot_data(const Problem& problem, const TrainResult& r, const TrainConfig& cfg) {
  json plots = json::object();
  const std::size_t d = problem.dim();
  const auto& traj = r.validation;

  {
    const NetConfig net{d, cfg.width, 2, problem.horizon()};
    const auto x_val = problem.sample_initial(derive_seed(cfg.seed, 2),
                                              cfg.validation_size > 0 ? cfg.validation_size : 1000 * d);
    try {
      const auto untrained =
          detail::validation_rollout(problem, init_params(net, derive_seed(cfg.seed, 1)), r.wrapper, cfg, x_val);
      plots["variance_untrained"] = variance_curve(untrained);
    } catch (const DivergenceError&) {
    }
  }
  if (traj.batch == 0) return plots;

  const auto m0 = problem.exact_moments(0.0);
  const auto mT = problem.exact_moments(problem.horizon());
  const auto xT = traj.x_at(traj.intervals);
  const KdeCloud cloud(std::vector<double>(xT.begin(), xT.end()), d, cfg.bandwidth);

  if (d == 1) {
    const double s0 = std::sqrt(m0.covariance[0]);
    const auto g0 = linspace(m0.mean[0] - 3.0 * s0, m0.mean[0] + 3.0 * s0, 121);
    std::vector<double> model, exact;
    for (double x : g0) {
      const std::vector<double> xv{x};
      model.push_back(phi_eval(r.params, r.wrapper, 0.0, xv));
      exact.push_back(problem.exact_phi(0.0, xv));
    }
    plots["phi0"] = {{"x", g0}, {"model", model}, {"exact", exact}};

    const double sT = std::sqrt(mT.covariance[0]);
    const auto gT = linspace(mT.mean[0] - 3.0 * sT, mT.mean[0] + 3.0 * sT, 121);
    std::vector<double> dk, de, sk, se;
    for (double x : gT) {
      const std::vector<double> xv{x};
      dk.push_back(density(cloud, xv));
      de.push_back(problem.exact_density(problem.horizon(), xv));
      sk.push_back(score(cloud, xv)[0]);
      se.push_back(problem.exact_score(problem.horizon(), xv)[0]);
    }
    plots["terminal"] = {{"x", gT}, {"density_kde", dk}, {"density_exact", de}, {"score_kde", sk},
                         {"score_exact", se}};
  } else if (d == 2) {
    json snaps = json::array();
    const std::size_t keep = std::min<std::size_t>(traj.batch, 300);
    for (std::size_t j : {std::size_t{0}, traj.intervals / 2, traj.intervals}) {
      std::vector<double> xs, ys;
      const auto xj = traj.x_at(j);
      for (std::size_t i = 0; i < keep; ++i) {
        xs.push_back(xj[2 * i]);
        ys.push_back(xj[2 * i + 1]);
      }
      snaps.push_back({{"t", traj.time(j)}, {"x", xs}, {"y", ys}});
    }
    plots["scatter"] = snaps;

    const double s = 3.0 * std::sqrt(std::max(mT.covariance[0], mT.covariance[3]));
    const auto gx = linspace(mT.mean[0] - s, mT.mean[0] + s, 41);
    const auto gy = linspace(mT.mean[1] - s, mT.mean[1] + s, 41);
    std::vector<double> kde, exact;
    for (double y : gy) {
      for (double x : gx) {
        const std::vector<double> p{x, y};
        kde.push_back(density(cloud, p));
        exact.push_back(problem.exact_density(problem.horizon(), p));
      }
    }
    plots["density2d"] = {{"x", gx}, {"y", gy}, {"kde", kde}, {"exact", exact}};
  }
  return plots;
}

inline std::string curves_csv(const RunReport& r) {
  std::ostringstream o;
  o.precision(17);
  o << "step,loss,err_phi,err_grad,err_lap\n";
  for (std::size_t k = 0; k < r.steps(); ++k) {
    o << k + 1 << ',' << r.loss[k] << ',' << r.err_phi[k] << ',' << r.err_grad[k] << ',' << r.err_lap[k] << '\n';
  }
  return o.str();
}

inline json checkpoint_json(const TrainResult& r, const json& config) {
  json w = {{"mode", r.wrapper.mode == TerminalMode::hard ? "hard" : "soft"}, {"horizon", r.wrapper.horizon}};
  if (r.wrapper.terminal) {
    w["curvature"] = r.wrapper.terminal->curvature;
    w["offset"] = r.wrapper.terminal->offset;
  }
  return {{"config", config}, {"step", r.report.steps()}, {"wrapper", w}, {"params", to_json(r.params)},
          {"adam", to_json(r.adam)}};
}

/// Figures from one or more reports of the same problem. Returns the files written.
inline std::vector<fs::path> write_plots(const std::vector<RunReport>& reports, const fs::path& dir) {
  std::vector<fs::path> written;
  if (reports.empty()) return written;
  const RunReport& first = reports.front();
  auto save = [&](const std::string& name, const svg::Chart& c) {
    write_text(dir / name, c.render());
    written.push_back(dir / name);
  };

  // Training curves with the min/max band across reports.
  {
    svg::Chart c(first.problem + " (" + first.mode + "): training curves", "step", "value", true);
    const std::vector<std::pair<std::string, std::vector<double> RunReport::*>> series{
        {"loss", &RunReport::loss},
        {"rel. error phi", &RunReport::err_phi},
        {"rel. error grad phi", &RunReport::err_grad},
        {"rel. error Lap phi", &RunReport::err_lap}};
    std::size_t n = first.steps();
    for (const auto& r : reports) n = std::min(n, r.steps());
    std::vector<double> steps(n);
    std::iota(steps.begin(), steps.end(), 1.0);
    for (std::size_t s = 0; s < series.size(); ++s) {
      std::vector<double> lo(n), hi(n), mean(n, 0.0);
      for (std::size_t k = 0; k < n; ++k) {
        lo[k] = hi[k] = (first.*series[s].second)[k];
        for (const auto& r : reports) {
          const double v = (r.*series[s].second)[k];
          lo[k] = std::min(lo[k], v);
          hi[k] = std::max(hi[k], v);
          mean[k] += v / static_cast<double>(reports.size());
        }
      }
      const std::string color = svg::palette(s);
      c.band(steps, lo, hi, color);
      c.line(steps, mean, series[s].first, color);
    }
    save("curves.svg", c);
  }

  const json& p = first.plots;
  if (p.contains("phi0")) {
    svg::Chart c(first.problem + ": phi(0, x)", "x", "phi");
    c.line(p["phi0"]["x"], p["phi0"]["exact"], "exact");
    c.line(p["phi0"]["x"], p["phi0"]["model"], "network", "", true);
    save("phi0.svg", c);
  }
  if (p.contains("terminal")) {
    const auto& t = p["terminal"];
    svg::Chart dc(first.problem + ": density at t = T", "x", "rho");
    dc.line(t["x"], t["density_exact"], "exact");
    dc.line(t["x"], t["density_kde"], "KDE of particles", "", true);
    save("density_T.svg", dc);
    svg::Chart sc(first.problem + ": score at t = T", "x", "grad log rho");
    sc.line(t["x"], t["score_exact"], "exact");
    sc.line(t["x"], t["score_kde"], "KDE of particles", "", true);
    save("score_T.svg", sc);
  }
  if (!first.variance.empty()) {
    const std::size_t nodes = first.variance.size();
    const double T = first.config.value("T", 1.0);
    const auto ts = linspace(0.0, T, nodes);
    svg::Chart c(first.problem + ": variance of x_t (first coordinate)", "t", "variance");
    auto column = [](const std::vector<std::vector<double>>& v) {
      std::vector<double> out;
      for (const auto& row : v) out.push_back(row.at(0));
      return out;
    };
    c.line(ts, column(first.exact_variance), "exact");
    c.line(ts, column(first.variance), "trained");
    if (p.contains("variance_untrained")) {
      c.line(ts, column(p["variance_untrained"].get<std::vector<std::vector<double>>>()), "untrained", "", true);
    }
    save("variance.svg", c);
  }
  if (p.contains("scatter")) {
    svg::Chart c(first.problem + ": particles over time", "x1", "x2");
    for (const auto& s : p["scatter"]) c.points(s["x"], s["y"], "t = " + svg::num(s["t"].get<double>()));
    save("scatter.svg", c);
  }
  if (p.contains("density2d")) {
    const auto& g = p["density2d"];
    const std::vector<double> gx = g["x"], gy = g["y"], kde = g["kde"], exact = g["exact"];
    const double peak = *std::max_element(exact.begin(), exact.end());
    svg::Chart c(first.problem + ": density contours at t = T", "x1", "x2");
    std::vector<svg::Segment> e, k;
    for (double frac : {0.1, 0.3, 0.5, 0.7, 0.9}) {
      const auto se = svg::contour(gx, gy, exact, frac * peak);
      const auto sk = svg::contour(gx, gy, kde, frac * peak);
      e.insert(e.end(), se.begin(), se.end());
      k.insert(k.end(), sk.begin(), sk.end());
    }
    c.segments(e, "exact");
    c.segments(k, "KDE of particles", "", true);
    save("density_T.svg", c);
  }
  return written;
}

struct RunOutcome {
  TrainResult result;
  bool diverged = false;
};

/// Trains one configuration and writes every artifact into `dir`.
inline RunOutcome run_one(const RunConfig& rc, const fs::path& dir, bool quiet) {
  fs::create_directories(dir);
  const auto problem = rc.make_problem();
  const json resolved = rc.resolved();
  auto log = [&](std::size_t k, double loss, const FieldErrors& e) {
    if (quiet) return;
    if (k == 0 || (k + 1) % 20 == 0 || k + 1 == rc.train.steps) {
      std::cerr << rc.problem << " [" << to_string(rc.train.mode) << ", seed " << rc.train.seed << "] step "
                << k + 1 << "/" << rc.train.steps << " loss " << loss << " err " << e.phi << ' ' << e.grad << ' '
                << e.laplacian << '\n';
    }
  };
  RunOutcome out{train(*problem, rc.train, log), false};
  out.diverged = out.result.diverged;
  RunReport& rep = out.result.report;
  rep.config = resolved;
  rep.plots = plot_data(*problem, out.result, rc.train);

  write_text(dir / "report.json", to_json(rep).dump(2) + "\n");
  write_text(dir / "curves.csv", curves_csv(rep));
  write_text(dir / "checkpoint.json", checkpoint_json(out.result, resolved).dump() + "\n");
  {
    std::ofstream f(dir / "traj.csv");
    if (out.result.validation.batch > 0) {
      write_trajectory_csv(f, out.result.validation);
    } else {
      f << "particle,node,t\n";
    }
  }
  if (rc.plot) write_plots({rep}, dir);
  if (!quiet) {
    std::cerr << rc.problem << " [" << to_string(rc.train.mode) << ", seed " << rc.train.seed << "] " << rep.status
              << ": errors " << rep.final_errors.phi << ' ' << rep.final_errors.grad << ' '
              << rep.final_errors.laplacian << ", W2 " << rep.w2 << '\n';
    if (out.diverged) std::cerr << rep.message << '\n';
  }
  return out;
}

inline RunConfig apply(RunConfig rc, const Overrides& o) {
  if (!o.out.empty()) rc.out = o.out;
  if (o.seeds > 0) rc.seeds = o.seeds;
  if (!o.mode.empty()) {
    try {
      rc.train.mode = rollout_mode_from_string(o.mode);
    } catch (const std::invalid_argument& e) {
      throw ConfigError(e.what());
    }
  }
  return rc;
}

inline fs::path output_dir(const RunConfig& rc, const std::string& command) {
  return rc.out.empty() ? fs::path("runs") / (rc.problem + "_" + command) : fs::path(rc.out);
}

inline int cmd_train(const std::string& config_path, const Overrides& o) {
  const RunConfig rc = apply(load_config(config_path), o);
  const fs::path dir = output_dir(rc, "train");
  if (rc.seeds == 1) return run_one(rc, dir, false).diverged ? diverged : ok;

  bool any_diverged = false;
  std::vector<RunReport> reports;
  for (std::size_t s = 0; s < rc.seeds; ++s) {
    RunConfig one = rc;
    one.train.seed = rc.train.seed + s;
    auto r = run_one(one, dir / ("seed_" + std::to_string(one.train.seed)), false);
    any_diverged |= r.diverged;
    reports.push_back(std::move(r.result.report));
  }
  if (rc.plot) write_plots(reports, dir);
  return any_diverged ? diverged : ok;
}

inline double mean_of(const std::vector<double>& v) {
  return v.empty() ? 0.0 : std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
}

inline int cmd_compare(const std::string& config_path, const Overrides& o) {
  RunConfig rc = apply(load_config(config_path), o);
  if (o.seeds == 0 && !rc.seeds_given) rc.seeds = 5;
  const fs::path dir = output_dir(rc, "compare");
  fs::create_directories(dir);

  bool any_diverged = false;
  json table = {{"problem", rc.problem}, {"seeds", rc.seeds}, {"config", rc.resolved()}};
  std::ostringstream csv;
  csv.precision(10);
  csv << "mode,seed,status,err_phi,err_grad,err_lap,w2,systemic_error\n";
  std::vector<double> phi_by_mode[2];
  for (int m = 0; m < 2; ++m) {
    const RolloutMode mode = m == 0 ? RolloutMode::score : RolloutMode::fbsde;
    std::vector<RunReport> reports;
    std::vector<double> ep, eg, el, w2, sys;
    json per_seed = json::array();
    for (std::size_t s = 0; s < rc.seeds; ++s) {
      RunConfig one = rc;
      one.train.mode = mode;
      one.train.seed = rc.train.seed + s;
      auto r = run_one(one, dir / to_string(mode) / ("seed_" + std::to_string(one.train.seed)), false);
      any_diverged |= r.diverged;
      const RunReport& rep = r.result.report;
      csv << to_string(mode) << ',' << one.train.seed << ',' << rep.status << ',' << rep.final_errors.phi << ','
          << rep.final_errors.grad << ',' << rep.final_errors.laplacian << ',' << rep.w2 << ','
          << rep.systemic_error << '\n';
      per_seed.push_back({{"seed", one.train.seed},
                          {"status", rep.status},
                          {"err_phi", rep.final_errors.phi},
                          {"err_grad", rep.final_errors.grad},
                          {"err_lap", rep.final_errors.laplacian},
                          {"w2", rep.w2},
                          {"systemic_error", rep.systemic_error}});
      ep.push_back(rep.final_errors.phi);
      eg.push_back(rep.final_errors.grad);
      el.push_back(rep.final_errors.laplacian);
      w2.push_back(rep.w2);
      sys.push_back(rep.systemic_error);
      reports.push_back(rep);
    }
    phi_by_mode[m] = ep;
    if (rc.plot) write_plots(reports, dir / to_string(mode));
    table[to_string(mode)] = {{"err_phi", mean_of(ep)}, {"err_grad", mean_of(eg)}, {"err_lap", mean_of(el)},
                              {"w2", mean_of(w2)},      {"systemic_error", mean_of(sys)}, {"runs", per_seed}};
    csv << to_string(mode) << ",mean,," << mean_of(ep) << ',' << mean_of(eg) << ',' << mean_of(el) << ','
        << mean_of(w2) << ',' << mean_of(sys) << '\n';
  }
  std::size_t wins = 0;
  for (std::size_t s = 0; s < rc.seeds; ++s) wins += phi_by_mode[0][s] <= phi_by_mode[1][s] ? 1 : 0;
  table["score_phi_le_fbsde"] = wins;
  table["w2_table"] = {{"score", table["score"]["w2"]},
                       {"fbsde", table["fbsde"]["w2"]},
                       {"systemic_error", table["score"]["systemic_error"]}};
  write_text(dir / "compare.json", table.dump(2) + "\n");
  write_text(dir / "compare.csv", csv.str());
  std::ostringstream w2csv;
  w2csv.precision(6);
  w2csv << "problem,score,fbsde,systemic_error\n"
        << rc.problem << ',' << table["score"]["w2"].get<double>() << ',' << table["fbsde"]["w2"].get<double>()
        << ',' << table["score"]["systemic_error"].get<double>() << '\n';
  write_text(dir / "w2_table.csv", w2csv.str());
  std::cerr << "score phi error <= fbsde phi error on " << wins << " of " << rc.seeds << " seeds\n";
  return any_diverged ? diverged : ok;
}

/// Renders figures from existing report files.
inline int cmd_plot(const std::vector<std::string>& report_paths, const std::string& out) {
  std::vector<RunReport> reports;
  for (const auto& path : report_paths) {
    std::ifstream f(path);
    if (!f) throw ConfigError("plot: cannot read report '" + path + "'");
    try {
      reports.push_back(run_report_from_json(json::parse(f)));
    } catch (const json::exception& e) {
      throw ConfigError("plot: '" + path + "' is not a valid report: " + e.what());
    }
  }
  if (reports.empty()) throw ConfigError("plot: no reports given");
  const fs::path dir = out.empty() ? fs::path(report_paths.front()).parent_path() : fs::path(out);
  if (!dir.empty()) fs::create_directories(dir);
  for (const auto& p : write_plots(reports, dir.empty() ? fs::path(".") : dir)) std::cerr << "wrote " << p << '\n';
  return ok;
}

}  // namespace mfcscore::app
