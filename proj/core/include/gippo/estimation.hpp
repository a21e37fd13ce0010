#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "gippo/envs.hpp"
#include "gippo/nn.hpp"
#include "gippo/random.hpp"

namespace gippo::estimation {

// Experience from M environments over a window of H steps. Per-slot arrays
// are flattened with slot(e, t) = e * H + t and a per-slot stride equal to
// the field's dimension.
struct RolloutBuffer {
  RolloutBuffer() = default;
  RolloutBuffer(int num_envs, int horizon, int state_dim, int obs_dim, int act_dim);

  int num_envs = 0;
  int horizon = 0;
  int state_dim = 0;
  int obs_dim = 0;
  int act_dim = 0;

  std::vector<double> states;
  std::vector<double> obs;
  std::vector<double> eps;
  std::vector<double> actions;
  std::vector<double> rewards;
  std::vector<double> next_states;
  std::vector<double> next_obs;
  std::vector<std::uint8_t> dones;
  std::vector<envs::DoneReason> done_reasons;
  std::vector<std::uint8_t> filled;

  // Filled by estimators / trainers.
  std::vector<double> advantages;
  std::vector<double> adv_grads;   // act_dim per slot
  std::vector<double> logp_ref;    // rollout-policy log-density of the stored action
  std::vector<double> logdet_ref;  // rollout-policy sum of log-std

  std::size_t size() const { return static_cast<std::size_t>(num_envs) * horizon; }
  std::size_t slot(int env, int t) const { return static_cast<std::size_t>(env) * horizon + t; }
  bool complete() const;

  std::span<double> state(std::size_t i) { return {states.data() + i * state_dim, static_cast<std::size_t>(state_dim)}; }
  std::span<const double> state(std::size_t i) const { return {states.data() + i * state_dim, static_cast<std::size_t>(state_dim)}; }
  std::span<const double> next_state(std::size_t i) const {
    return {next_states.data() + i * state_dim, static_cast<std::size_t>(state_dim)};
  }
  std::span<const double> observation(std::size_t i) const { return {obs.data() + i * obs_dim, static_cast<std::size_t>(obs_dim)}; }
  std::span<const double> action(std::size_t i) const { return {actions.data() + i * act_dim, static_cast<std::size_t>(act_dim)}; }
  std::span<const double> noise(std::size_t i) const { return {eps.data() + i * act_dim, static_cast<std::size_t>(act_dim)}; }
  std::span<const double> adv_grad(std::size_t i) const { return {adv_grads.data() + i * act_dim, static_cast<std::size_t>(act_dim)}; }

  // Records one transition. Marks the slot filled.
  void store(int env, int t, std::span<const double> state, std::span<const double> obs, std::span<const double> eps,
             std::span<const double> action, double reward, std::span<const double> next_state,
             std::span<const double> next_obs, bool done, envs::DoneReason reason);

  // Column-major matrices (dim x N) over all slots.
  nn::Matrix obs_matrix() const;
  nn::Matrix next_obs_matrix() const;
  nn::Matrix action_matrix() const;
  nn::Matrix eps_matrix() const;
};

class Critic {
 public:
  Critic() = default;
  Critic(int obs_dim, std::vector<int> hidden, std::uint64_t seed);

  nn::Mlp& net() { return net_; }
  const nn::Mlp& net() const { return net_; }
  double value(std::span<const double> obs) const;
  nn::Vector values(const nn::Matrix& obs) const;

 private:
  nn::Mlp net_;
};

// GAE from already-evaluated values. `values[i]` = V(s_i), `next_values[i]`
// = V(s'_i). Done slots do not propagate later residuals; they bootstrap
// from V(s'_i) only when their reason is kHorizon.
std::vector<double> gae_from_values(std::span<const double> rewards, std::span<const double> values,
                                    std::span<const double> next_values, std::span<const std::uint8_t> dones,
                                    std::span<const envs::DoneReason> reasons, int num_envs, int horizon,
                                    double gamma, double lambda);

// As above with every done slot terminal.
std::vector<double> gae_from_values(std::span<const double> rewards, std::span<const double> values,
                                    std::span<const double> next_values, std::span<const std::uint8_t> dones,
                                    int num_envs, int horizon, double gamma, double lambda);

std::vector<double> compute_gae(const RolloutBuffer& buffer, const Critic& critic, double gamma, double lambda);

// dA_t/da_t for every slot (act_dim per slot) from one reverse sweep per
// window: the dynamics are replayed on a tape with actions as leaves, the
// episode-segment advantages A_start are seeded, and each action adjoint is
// rescaled by (gamma * lambda)^-(t - start). Horizon ends bootstrap from the
// value of the replayed next state, so their gradient flows through it. Throws NumericError naming the
// slot of any non-finite component, and std::logic_error if the replay does
// not reproduce the stored rewards.
std::vector<double> compute_adv_grads(const RolloutBuffer& buffer, const Critic& critic, const envs::Env& env,
                                      double gamma, double lambda);

struct CriticFitConfig {
  int iterations = 16;
  int minibatches = 4;
  double max_grad_norm = 1.0;
};

// MSE regression of V(obs) onto targets. Returns the full-batch loss before
// the first iteration followed by the loss after each iteration.
std::vector<double> fit_critic(Critic& critic, nn::Adam& optimizer, const nn::Matrix& obs,
                               std::span<const double> targets, const CriticFitConfig& config, CounterRng& rng);

// Fisher-Yates permutation of 0..n-1.
std::vector<std::size_t> shuffled_indices(std::size_t n, CounterRng& rng);

}  // namespace gippo::estimation
