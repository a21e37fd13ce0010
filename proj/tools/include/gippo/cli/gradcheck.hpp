#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "gippo/envs.hpp"
#include "gippo/estimation.hpp"

namespace gippo::cli {

struct CheckResult {
  std::string name;
  double max_rel_err = 0.0;
  std::size_t points = 0;
  double tolerance = 0.0;
  bool passed() const { return max_rel_err <= tolerance; }
};

// |a - b| / max(1, |a|, |b|)
double rel_err(double a, double b);

// Central difference of every primitive on the tape against its derivative.
std::vector<CheckResult> check_primitives(int samples, std::uint64_t seed);

// Tape Jacobian of (reward, next state, next observation) w.r.t. (state,
// action) against central differences, at states reached by short random
// rollouts from reset.
CheckResult check_env_dynamics(const envs::Env& env, int samples, std::uint64_t seed);

// Parameter gradient of the policy log-density on the tape against central
// differences (a random subset of parameters per point).
CheckResult check_policy_log_prob(const envs::Env& env, int samples, std::uint64_t seed);

// Random-action rollout: `num_envs` rows of `horizon` steps, each row
// starting from a short random warm-up after reset.
estimation::RolloutBuffer random_rollout(const envs::Env& env, int num_envs, int horizon, std::uint64_t seed);

// dA_t/da_t by one backward pass per timestep (reference for the rescaled
// single-pass estimator).
std::vector<double> adv_grads_oracle(const estimation::RolloutBuffer& buffer, const estimation::Critic& critic,
                                     const envs::Env& env, double gamma, double lambda);

CheckResult check_gae_trick(const envs::Env& env, int rollouts, int horizon, std::uint64_t seed);

// Everything above for one environment.
std::vector<CheckResult> run_gradcheck(const envs::Env& env, int samples, std::uint64_t seed);

}  // namespace gippo::cli
