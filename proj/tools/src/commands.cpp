#include "gippo/cli/commands.hpp"

#include <CLI11.hpp>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <mutex>
#include <optional>
#include <sstream>
#include <thread>

#include "gippo/cli/gradcheck.hpp"
#include "gippo/errors.hpp"
#include "gippo/tape.hpp"

namespace gippo::cli {

namespace fs = std::filesystem;

std::string metrics_row(const algos::EpochMetrics& m) {
  std::string row = std::to_string(m.epoch) + "," + std::to_string(m.env_steps);
  for (double v : {m.mean_reward, m.best_reward, m.alpha, m.psi_min, m.psi_max, m.r_alpha, m.oorr, m.actor_loss,
                   m.critic_loss, m.wall_ms}) {
    row += "," + format_double(v);
  }
  return row;
}

void write_checkpoint(const fs::path& path, const algos::Trainer& trainer) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("cannot write '" + path.string() + "'");
  const nn::Vector actor = trainer.policy().params();
  nn::write_record(os, trainer.policy().net().layer_sizes(), std::span<const double>(actor.data(), actor.size()));
  const nn::Vector critic = trainer.critic().net().flatten();
  nn::write_record(os, trainer.critic().net().layer_sizes(), std::span<const double>(critic.data(), critic.size()));
}

std::vector<algos::EpochMetrics> train_run(const RunConfig& config, const fs::path& out_dir) {
  fs::create_directories(out_dir);
  {
    std::ofstream cfg(out_dir / "config.resolved");
    cfg << render_config(config);
  }
  std::ofstream csv(out_dir / "metrics.csv");
  if (!csv) throw std::runtime_error("cannot write metrics.csv in '" + out_dir.string() + "'");
  csv << kMetricsHeader << "\n" << std::flush;

  algos::TrainConfig train = config.train;
  train.total_epochs = config.epochs;
  std::shared_ptr<const envs::Env> env = envs::make_env(config.env, config.traffic);
  algos::Trainer trainer(algos::algo_from_name(config.algo), env, train, config.seed);
  std::vector<algos::EpochMetrics> series;
  for (int e = 0; e < config.epochs; ++e) {
    series.push_back(trainer.run_epoch());
    csv << metrics_row(series.back()) << "\n" << std::flush;
  }
  write_checkpoint(out_dir / "final.ckpt", trainer);
  return series;
}

double median(std::vector<double> xs) {
  if (xs.empty()) throw std::invalid_argument("median of an empty list");
  std::sort(xs.begin(), xs.end());
  const std::size_t n = xs.size();
  return n % 2 == 1 ? xs[n / 2] : 0.5 * (xs[n / 2 - 1] + xs[n / 2]);
}

std::string sweep_summary_csv(const std::vector<SweepRow>& rows) {
  std::string out = "kind,seed,best_reward,mean,median\n";
  std::vector<double> best;
  for (const SweepRow& r : rows) {
    out += "seed," + std::to_string(r.seed) + "," + format_double(r.best_reward) + ",,\n";
    best.push_back(r.best_reward);
  }
  double mean = 0.0;
  for (double b : best) mean += b;
  mean /= static_cast<double>(std::max<std::size_t>(1, best.size()));
  out += "aggregate,,," + format_double(mean) + "," + format_double(best.empty() ? 0.0 : median(best)) + "\n";
  return out;
}

namespace {

std::string xml_escape(const std::string& s) {
  std::string out;
  for (char c : s) {
    switch (c) {
      case '<': out += "&lt;"; break;
      case '>': out += "&gt;"; break;
      case '&': out += "&amp;"; break;
      case '"': out += "&quot;"; break;
      default: out += c;
    }
  }
  return out;
}

std::string num(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.2f", v);
  return buf;
}

}  // namespace

std::string reward_chart_svg(const std::vector<std::pair<std::string, std::vector<algos::EpochMetrics>>>& series,
                             const std::string& title) {
  const double width = 640, height = 400, left = 70, right = 20, top = 40, bottom = 50;
  double x_max = 1, y_min = 0, y_max = 0;
  bool first = true;
  for (const auto& [name, rows] : series) {
    for (const auto& m : rows) {
      x_max = std::max(x_max, static_cast<double>(m.epoch));
      if (!std::isfinite(m.mean_reward)) continue;
      if (first) {
        y_min = y_max = m.mean_reward;
        first = false;
      }
      y_min = std::min(y_min, m.mean_reward);
      y_max = std::max(y_max, m.mean_reward);
    }
  }
  if (y_max - y_min < 1e-12) {
    y_min -= 0.5;
    y_max += 0.5;
  }
  const double pw = width - left - right, ph = height - top - bottom;
  auto px = [&](double x) { return left + pw * (x - 1.0) / std::max(1.0, x_max - 1.0); };
  auto py = [&](double y) { return top + ph * (1.0 - (y - y_min) / (y_max - y_min)); };
  static const char* colors[] = {"#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd",
                                 "#8c564b", "#e377c2", "#7f7f7f", "#bcbd22", "#17becf"};
  std::ostringstream os;
  os << "<?xml version=\"1.0\" encoding=\"UTF-8\"?>\n"
     << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << width << "\" height=\"" << height << "\" viewBox=\"0 0 "
     << width << " " << height << "\">\n"
     << "<rect x=\"0\" y=\"0\" width=\"" << width << "\" height=\"" << height << "\" fill=\"white\"/>\n"
     << "<text x=\"" << width / 2 << "\" y=\"24\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"16\">"
     << xml_escape(title) << "</text>\n"
     << "<line x1=\"" << left << "\" y1=\"" << top + ph << "\" x2=\"" << left + pw << "\" y2=\"" << top + ph
     << "\" stroke=\"black\"/>\n"
     << "<line x1=\"" << left << "\" y1=\"" << top << "\" x2=\"" << left << "\" y2=\"" << top + ph
     << "\" stroke=\"black\"/>\n"
     << "<text x=\"" << left + pw / 2 << "\" y=\"" << height - 12
     << "\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"12\">epoch</text>\n"
     << "<text x=\"" << left - 8 << "\" y=\"" << top + 4 << "\" text-anchor=\"end\" font-family=\"sans-serif\" font-size=\"10\">"
     << xml_escape(format_double(y_max)) << "</text>\n"
     << "<text x=\"" << left - 8 << "\" y=\"" << top + ph << "\" text-anchor=\"end\" font-family=\"sans-serif\" font-size=\"10\">"
     << xml_escape(format_double(y_min)) << "</text>\n";
  std::size_t idx = 0;
  for (const auto& [name, rows] : series) {
    const char* color = colors[idx % 10];
    os << "<polyline fill=\"none\" stroke=\"" << color << "\" stroke-width=\"1.5\" points=\"";
    for (const auto& m : rows) {
      if (std::isfinite(m.mean_reward)) os << num(px(m.epoch)) << "," << num(py(m.mean_reward)) << " ";
    }
    os << "\"/>\n";
    os << "<text x=\"" << left + pw - 4 << "\" y=\"" << top + 14 + 14 * idx << "\" text-anchor=\"end\" fill=\"" << color
       << "\" font-family=\"sans-serif\" font-size=\"11\">" << xml_escape(name) << "</text>\n";
    ++idx;
  }
  os << "</svg>\n";
  return os.str();
}

namespace {

struct CommonRunArgs {
  std::string env;
  std::string algo;
  std::string config_path;
  std::vector<std::string> sets;
  std::optional<std::uint64_t> seed;
  std::optional<int> epochs;
  bool timing = false;
};

RunConfig resolve(const CommonRunArgs& args) {
  Assignments a;
  if (!args.config_path.empty()) a = read_config_file(args.config_path);
  for (const std::string& s : args.sets) a.push_back(parse_assignment(s));
  // Explicit flags override the file and --set.
  if (!args.env.empty()) a.emplace_back("run.env", args.env);
  if (!args.algo.empty()) a.emplace_back("run.algo", args.algo);
  if (args.seed) a.emplace_back("run.seed", std::to_string(*args.seed));
  if (args.epochs) a.emplace_back("run.epochs", std::to_string(*args.epochs));
  if (args.timing) a.emplace_back("run.timing", "true");
  return resolve_config(a, "dejong1", "gippo");
}

void add_common(CLI::App* cmd, CommonRunArgs& args) {
  cmd->add_option("--env", args.env, "environment id");
  cmd->add_option("--algo", args.algo, "lr | rp | ppo | lrrp | gippo");
  cmd->add_option("--config", args.config_path, "config file (sectioned key = value)")->check(CLI::ExistingFile);
  cmd->add_option("--set", args.sets, "override, section.key=value (repeatable)");
  cmd->add_flag("--timing", args.timing, "record wall-clock time per epoch");
}

int do_train(const CommonRunArgs& args, const std::string& out_dir, std::ostream& out, std::ostream& err) {
  RunConfig cfg;
  try {
    cfg = resolve(args);
  } catch (const ConfigError& e) {
    err << "error: " << e.what() << "\n";
    return kUsage;
  }
  try {
    const auto series = train_run(cfg, out_dir);
    if (!series.empty()) {
      out << "trained " << cfg.algo << " on " << cfg.env << " for " << series.size()
          << " epochs, best reward " << format_double(series.back().best_reward) << "\n";
    } else {
      out << "trained " << cfg.algo << " on " << cfg.env << " for 0 epochs\n";
    }
  } catch (const NumericError& e) {
    err << "numeric failure: " << e.what() << "\n";
    return kNumeric;
  }
  return kOk;
}

int do_gradcheck(const std::string& env_id, int samples, const std::string& corrupt, std::ostream& out,
                 std::ostream& err) {
  std::unique_ptr<envs::Env> env;
  try {
    env = envs::make_env(env_id);
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return kUsage;
  }
  if (!corrupt.empty()) {
    const std::optional<ad::Op> op = ad::op_from_name(corrupt);
    if (!op || *op == ad::Op::kLeaf || *op == ad::Op::kFused) {
      err << "error: unknown primitive '" << corrupt << "'\n";
      return kUsage;
    }
    ad::fault::corrupt_primitive(op);
  }
  std::vector<CheckResult> results;
  try {
    results = run_gradcheck(*env, samples, 0x9c4ec4ULL);
  } catch (const std::exception& e) {
    ad::fault::corrupt_primitive(std::nullopt);
    err << "gradcheck aborted: " << e.what() << "\n";
    return kCheckFailed;
  }
  ad::fault::corrupt_primitive(std::nullopt);
  std::vector<std::string> failed;
  for (const CheckResult& r : results) {
    out << (r.passed() ? "PASS " : "FAIL ") << r.name << ": max_rel_err=" << format_double(r.max_rel_err)
        << " tol=" << format_double(r.tolerance) << " points=" << r.points << "\n";
    if (!r.passed()) failed.push_back(r.name);
  }
  if (!failed.empty()) {
    err << "failed checks:";
    for (const auto& f : failed) err << " [" << f << "]";
    err << "\n";
    return kCheckFailed;
  }
  return kOk;
}

int do_sweep(const CommonRunArgs& args, int seeds, std::uint64_t first_seed, const std::string& out_dir, bool svg,
             int jobs, std::ostream& out, std::ostream& err) {
  RunConfig base;
  try {
    base = resolve(args);
  } catch (const ConfigError& e) {
    err << "error: " << e.what() << "\n";
    return kUsage;
  }
  if (seeds <= 0) {
    err << "error: --seeds must be positive\n";
    return kUsage;
  }
  const fs::path root(out_dir);
  fs::create_directories(root);
  std::vector<std::vector<algos::EpochMetrics>> results(seeds);
  std::vector<std::string> failures(seeds);
  std::mutex mu;
  int next = 0;
  auto worker = [&] {
    for (;;) {
      int i;
      {
        std::lock_guard<std::mutex> lock(mu);
        if (next >= seeds) return;
        i = next++;
      }
      RunConfig cfg = base;
      cfg.seed = first_seed + static_cast<std::uint64_t>(i);
      try {
        results[i] = train_run(cfg, root / ("seed_" + std::to_string(cfg.seed)));
      } catch (const std::exception& e) {
        failures[i] = e.what();
      }
    }
  };
  const int n_threads = std::max(1, std::min(jobs, seeds));
  std::vector<std::thread> pool;
  for (int t = 1; t < n_threads; ++t) pool.emplace_back(worker);
  worker();
  for (auto& th : pool) th.join();
  for (int i = 0; i < seeds; ++i) {
    if (!failures[i].empty()) {
      err << "numeric failure (seed " << first_seed + i << "): " << failures[i] << "\n";
      return kNumeric;
    }
  }
  std::vector<SweepRow> rows;
  std::vector<std::pair<std::string, std::vector<algos::EpochMetrics>>> series;
  for (int i = 0; i < seeds; ++i) {
    const std::uint64_t seed = first_seed + static_cast<std::uint64_t>(i);
    rows.push_back({seed, results[i].empty() ? 0.0 : results[i].back().best_reward});
    series.emplace_back("seed " + std::to_string(seed), results[i]);
  }
  {
    std::ofstream os(root / "summary.csv");
    os << sweep_summary_csv(rows);
  }
  if (svg) {
    std::ofstream os(root / "reward.svg");
    os << reward_chart_svg(series, base.algo + " on " + base.env);
  }
  out << "sweep of " << seeds << " seeds written to " << root.string() << "\n";
  return kOk;
}

}  // namespace

int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"gippo: policy learning with analytical gradients"};
  app.require_subcommand(1);

  CommonRunArgs train_args;
  std::string train_out;
  std::uint64_t train_seed = 0;
  int train_epochs = 0;
  CLI::App* train = app.add_subcommand("train", "train one run");
  add_common(train, train_args);
  train->add_option("--seed", train_seed, "run seed")->required();
  train->add_option("--epochs", train_epochs, "number of epochs")->required()->check(CLI::NonNegativeNumber);
  train->add_option("--out", train_out, "output directory")->required();

  std::string gc_env;
  int gc_samples = 100;
  std::string gc_corrupt;
  CLI::App* gradcheck = app.add_subcommand("gradcheck", "finite-difference gradient checks");
  gradcheck->add_option("--env", gc_env, "environment id")->required();
  gradcheck->add_option("--samples", gc_samples, "points per check")->check(CLI::PositiveNumber);
  gradcheck->add_option("--corrupt", gc_corrupt, "test hook: perturb one primitive's derivative");

  CommonRunArgs sweep_args;
  std::string sweep_out;
  int sweep_seeds = 5;
  std::uint64_t sweep_first = 0;
  int sweep_epochs = 0;
  bool sweep_svg = false;
  int sweep_jobs = 1;
  CLI::App* sweep = app.add_subcommand("sweep", "run several seeds and summarise");
  add_common(sweep, sweep_args);
  sweep->add_option("--seeds", sweep_seeds, "number of seeds")->required()->check(CLI::PositiveNumber);
  sweep->add_option("--first-seed", sweep_first, "seed of the first run");
  sweep->add_option("--epochs", sweep_epochs, "epochs per run")->required()->check(CLI::NonNegativeNumber);
  sweep->add_option("--out", sweep_out, "output directory")->required();
  sweep->add_flag("--svg", sweep_svg, "write reward.svg");
  sweep->add_option("--jobs", sweep_jobs, "parallel seeds")->check(CLI::PositiveNumber);

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    out << app.help();
    return kOk;
  } catch (const CLI::CallForAllHelp& e) {
    out << app.help("", CLI::AppFormatMode::All);
    return kOk;
  } catch (const CLI::ParseError& e) {
    err << "error: " << e.what() << "\n";
    return kUsage;
  }

  if (train->parsed()) {
    train_args.seed = train_seed;
    train_args.epochs = train_epochs;
    return do_train(train_args, train_out, out, err);
  }
  if (gradcheck->parsed()) return do_gradcheck(gc_env, gc_samples, gc_corrupt, out, err);
  sweep_args.epochs = sweep_epochs;
  return do_sweep(sweep_args, sweep_seeds, sweep_first, sweep_out, sweep_svg, sweep_jobs, out, err);
}

}  // namespace gippo::cli
