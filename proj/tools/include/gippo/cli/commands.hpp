#pragma once

#include <filesystem>
#include <iosfwd>
#include <string>
#include <vector>

#include "gippo/algos.hpp"
#include "gippo/cli/config.hpp"

namespace gippo::cli {

enum ExitCode : int {
  kOk = 0,
  kCheckFailed = 1,
  kUsage = 2,
  kNumeric = 3,
};

inline constexpr const char* kMetricsHeader =
    "epoch,env_steps,mean_reward,best_reward,alpha,psi_min,psi_max,r_alpha,oorr,actor_loss,critic_loss,wall_ms";

std::string metrics_row(const algos::EpochMetrics& m);

// Trains `config` for config.epochs epochs, writing metrics.csv (flushed per
// epoch), config.resolved and final.ckpt into `out_dir`. Throws NumericError
// (with metrics.csv left in place) on numeric failure.
std::vector<algos::EpochMetrics> train_run(const RunConfig& config, const std::filesystem::path& out_dir);

// Actor record followed by the critic record, in the nn checkpoint format.
void write_checkpoint(const std::filesystem::path& path, const algos::Trainer& trainer);

struct SweepRow {
  std::uint64_t seed = 0;
  double best_reward = 0.0;
};

// Median of a non-empty list (mean of the middle pair for even sizes).
double median(std::vector<double> xs);

std::string sweep_summary_csv(const std::vector<SweepRow>& rows);

// Line chart of mean_reward per epoch, one polyline per series.
std::string reward_chart_svg(const std::vector<std::pair<std::string, std::vector<algos::EpochMetrics>>>& series,
                             const std::string& title);

// Entry point shared by the gippo binary and the tests.
int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

}  // namespace gippo::cli
