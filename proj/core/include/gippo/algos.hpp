#pragma once

#include <chrono>
#include <cstdint>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "gippo/envs.hpp"
#include "gippo/errors.hpp"
#include "gippo/estimation.hpp"
#include "gippo/nn.hpp"
#include "gippo/policy.hpp"
#include "gippo/random.hpp"

namespace gippo::algos {

using estimation::Critic;
using estimation::RolloutBuffer;
using policy::GaussianPolicy;

enum class Algo { kLr, kRp, kPpo, kLrRp, kGiPpo };

std::string algo_name(Algo a);
// Throws std::invalid_argument("unknown algorithm '<name>'").
Algo algo_from_name(const std::string& name);

// Zero mean, unit variance (population std, floored at 1e-8).
std::vector<double> normalize_advantages(std::span<const double> adv);

// Log-densities of the stored actions under `policy`, one per slot.
std::vector<double> buffer_log_prob(const GaussianPolicy& policy, const RolloutBuffer& buffer);
// Sum of bounded log-stds per slot (log |d action / d eps|).
std::vector<double> buffer_logdet(const GaussianPolicy& policy, const RolloutBuffer& buffer);

// ---------------------------------------------------------------------------
// Gradient estimators. All return ascent directions.

struct GradEstimate {
  nn::Vector grad;
  std::vector<nn::Vector> samples;  // per-trajectory-group gradients when requested
  double var_lr = 0.0;
  double var_rp = 0.0;
  double kappa_lr = 0.0;
  double objective = 0.0;  // estimator's surrogate value, for logging
  std::size_t sample_count = 0;
};

// Contiguous groups of environment rows used as per-trajectory samples.
std::vector<std::vector<int>> row_groups(int num_envs, int groups);

// (1/N) sum_i A_i grad log pi(a_i | s_i), using buffer.advantages
// (normalised first when `normalize`).
GradEstimate lr_gradient(const RolloutBuffer& buffer, const GaussianPolicy& policy, bool normalize = true,
                         int sample_groups = 0);

// Reparameterised window return: per env row,
//   sum_t gamma^(t - start) r_t, plus gamma^(H - start) V(s_H) when the
// window ends inside an episode, with actions rebuilt as mean + std * eps
// from the stored noise. Normalised by N = M * H.
GradEstimate rp_gradient(const RolloutBuffer& buffer, const GaussianPolicy& policy, const Critic& critic,
                         const envs::Env& env, double gamma, int sample_groups = 0);

// Trace of the sample covariance (divisor n - 1) over the first `truncate`
// coordinates.
double trace_covariance(const std::vector<nn::Vector>& samples, std::size_t truncate);
// var_rp / (var_rp + var_lr); 0.5 when both vanish.
double kappa_lr(double var_lr, double var_rp);

struct LrRpConfig {
  int samples = 16;
  std::size_t truncate = 512;
};

GradEstimate lrrp_gradient(const RolloutBuffer& buffer, const GaussianPolicy& policy, const Critic& critic,
                           const envs::Env& env, double gamma, const LrRpConfig& config);

// ---------------------------------------------------------------------------
// Clipped surrogate updates.

struct PpoConfig {
  double clip = 0.2;
  int epochs = 5;
  int minibatch = 64;
  double max_grad_norm = 1.0;
};

struct UpdateStats {
  double loss = 0.0;  // mean clipped surrogate loss over the last epoch
  double kl = 0.0;    // mean(ref_logp - logp) after the update
};

// min(r A, clip(r, 1 - eps, 1 + eps) A) for one sample.
double clipped_surrogate(double ratio, double adv, double clip);

// Minimises -mean(min(r A, clip(r, 1 - eps, 1 + eps) A)) with r =
// exp(logp - ref_logp). `adv` is used as given.
UpdateStats ppo_update(GaussianPolicy& policy, nn::Adam& optimizer, const RolloutBuffer& buffer,
                       std::span<const double> ref_logp, std::span<const double> adv, const PpoConfig& config,
                       CounterRng& rng);

// log(0.5 * (exp(x) + exp(y))), stable and exact when x == y.
double mixture_log_density(double x, double y);
std::vector<double> mixture_log_density(std::span<const double> x, std::span<const double> y);

// PPO against the mixture reference 0.5 * (pi_ref + pi_alpha). `policy`
// should hold the alpha-policy parameters on entry.
UpdateStats gippo_ppo_update(GaussianPolicy& policy, nn::Adam& optimizer, const RolloutBuffer& buffer,
                             std::span<const double> ref_logp, std::span<const double> alpha_logp,
                             std::span<const double> adv, const PpoConfig& config, CounterRng& rng);

// ---------------------------------------------------------------------------
// Alpha-policy approximation and diagnostics.

constexpr double kAdvGradClamp = 1e3;

// a_i + alpha * clamp(dA/da_i, -clamp_abs, clamp_abs), per component.
std::vector<double> alpha_targets(std::span<const double> actions, std::span<const double> adv_grads, double alpha,
                                  double clamp_abs = kAdvGradClamp);

struct AlphaFitConfig {
  double lr = 1e-3;
  int epochs = 16;
  int minibatch = 64;
  double max_grad_norm = 0.0;  // 0 disables clipping
  int divergence_patience = 5;
};

class AlphaDivergence : public NumericError {
 public:
  using NumericError::NumericError;
};

// Mean over samples of ||mean + std * eps - target||^2.
double alpha_loss(const GaussianPolicy& policy, const nn::Matrix& obs, const nn::Matrix& eps,
                  const nn::Matrix& targets);
// Parameter gradient of alpha_loss.
nn::Vector alpha_loss_grad(const GaussianPolicy& policy, const nn::Matrix& obs, const nn::Matrix& eps,
                           const nn::Matrix& targets);

// Regresses `policy` onto the targets with a fresh Adam. Returns the
// full-batch loss before training and after every epoch, and leaves `policy`
// at the lowest-loss iterate (possibly the start). Throws AlphaDivergence when
// the loss rises above its starting value for `divergence_patience`
// consecutive epochs (policy left at the last iterate).
std::vector<double> approximate_alpha_policy(GaussianPolicy& policy, const RolloutBuffer& buffer,
                                             std::span<const double> targets, const AlphaFitConfig& config,
                                             CounterRng& rng);

struct DetEstimate {
  std::vector<double> psi;
  double psi_min = 1.0;
  double psi_max = 1.0;
};

// psi_i = exp(logdet_updated_i - logdet_ref_i).
DetEstimate estimate_det(std::span<const double> logdet_ref, std::span<const double> logdet_updated);

// mean_i exp(logp_updated_i - logp_ref_i) * A_i.
double estimate_bias(std::span<const double> logp_ref, std::span<const double> logp_updated,
                     std::span<const double> adv);

// Fraction of samples with |exp(logp_updated - logp_ref) - 1| > clip.
double out_of_range_ratio(std::span<const double> logp_ref, std::span<const double> logp_updated, double clip);

struct AlphaConfig {
  double alpha0 = 1e-5;
  double beta = 1.1;
  double delta_det = 0.4;
  double delta_oorr = 0.5;
  double max_alpha = 1.0;
};

struct AlphaDiagnostics {
  double psi_min = 1.0;
  double psi_max = 1.0;
  double r_alpha = 0.0;
  double oorr = 0.0;
};

enum AlphaTrigger : unsigned {
  kNoTrigger = 0,
  kDetLow = 1u << 0,
  kDetHigh = 1u << 1,
  kBias = 1u << 2,
  kOutOfRange = 1u << 3,
};

struct AlphaDecision {
  double alpha = 0.0;
  unsigned triggers = kNoTrigger;
};

// Divides by beta when any trigger fires (strict inequalities), multiplies
// otherwise, then clips to [0, max_alpha].
AlphaDecision adjust_alpha(const AlphaConfig& config, double alpha, const AlphaDiagnostics& d);

class AlphaController {
 public:
  explicit AlphaController(AlphaConfig config);

  double alpha() const { return alpha_; }
  const AlphaConfig& config() const { return config_; }
  AlphaDecision update(const AlphaDiagnostics& d);
  // Shrinks alpha unconditionally (used when the regression failed).
  AlphaDecision shrink();

 private:
  AlphaConfig config_;
  double alpha_;
};

// ---------------------------------------------------------------------------
// One-dimensional closed form: policy N(mu, sigma^2), advantage
// A(a) = -(a - c)^2, so f(a) = a + alpha A'(a) = (1 - 2 alpha) a + 2 alpha c.

struct QuadraticAlphaModel {
  double mu = 0.0;
  double sigma = 1.0;
  double c = 0.0;
  double alpha = 0.0;

  double advantage(double a) const { return -(a - c) * (a - c); }
  double advantage_grad(double a) const { return -2.0 * (a - c); }
  double map(double a) const { return a + alpha * advantage_grad(a); }
  double inverse_map(double a_tilde) const;
  double base_density(double a) const;
  // Density of the alpha-policy from its definition: base density at the
  // preimage divided by |det(1 + alpha A'')|.
  double alpha_density(double a_tilde) const;
  // Density of g_alpha(eps) = f(mu + sigma eps), which is Gaussian.
  double induced_density(double a_tilde) const;
  double alpha_mean() const { return map(mu); }
  double alpha_sigma() const { return (1.0 - 2.0 * alpha) * sigma; }
};

// Composite Simpson rule with `intervals` (rounded up to even) panels.
template <class F>
double simpson(F&& f, double lo, double hi, int intervals) {
  if (intervals % 2 != 0) ++intervals;
  const double h = (hi - lo) / intervals;
  double sum = f(lo) + f(hi);
  for (int i = 1; i < intervals; ++i) sum += (i % 2 == 1 ? 4.0 : 2.0) * f(lo + i * h);
  return sum * h / 3.0;
}

// ---------------------------------------------------------------------------
// Training loop.

struct TrainConfig {
  int num_envs = 64;
  int horizon = 1;
  double gamma = 0.99;
  double lambda = 0.95;

  policy::PolicyConfig actor;
  std::vector<int> critic_hidden{32, 32};

  double actor_lr = 1e-3;
  nn::Schedule actor_schedule = nn::Schedule::kConstant;
  double min_lr = 1e-6;
  double max_lr = 1e-2;
  double kl_target = 0.008;
  double actor_max_grad_norm = 1.0;

  double critic_lr = 1e-3;
  estimation::CriticFitConfig critic_fit;

  PpoConfig ppo;
  AlphaConfig alpha;
  AlphaFitConfig alpha_fit;
  LrRpConfig lrrp;

  int total_epochs = 0;  // used by the linear schedule; 0 means constant
  bool timing = false;
};

// Defaults for an environment / algorithm pair. Unknown environments fall
// back to the function-task defaults.
TrainConfig default_config(const std::string& env_id, Algo algo);

struct EpochMetrics {
  int epoch = 0;
  std::int64_t env_steps = 0;
  double mean_reward = 0.0;
  double best_reward = 0.0;
  double alpha = 0.0;
  double psi_min = 0.0;
  double psi_max = 0.0;
  double r_alpha = 0.0;
  double oorr = 0.0;
  double actor_loss = 0.0;
  double critic_loss = 0.0;
  double wall_ms = 0.0;
};

class Trainer {
 public:
  Trainer(Algo algo, std::shared_ptr<const envs::Env> env, TrainConfig config, std::uint64_t seed);

  // Runs one outer iteration. Numeric failures are rethrown as NumericError
  // with the epoch number in the message.
  EpochMetrics run_epoch();

  Algo algo() const { return algo_; }
  const TrainConfig& config() const { return config_; }
  const GaussianPolicy& policy() const { return policy_; }
  const Critic& critic() const { return critic_; }
  const envs::Env& env() const { return *env_; }
  double alpha() const { return controller_.alpha(); }
  int epoch() const { return epoch_; }
  // Buffer of the most recent epoch.
  const RolloutBuffer& buffer() const { return buffer_; }

 private:
  void collect();
  EpochMetrics step_epoch();
  double update_reward_stats();

  Algo algo_;
  std::shared_ptr<const envs::Env> env_;
  TrainConfig config_;
  std::uint64_t seed_;

  GaussianPolicy policy_;
  Critic critic_;
  nn::Adam actor_opt_;
  nn::Adam critic_opt_;
  AlphaController controller_;
  CounterRng update_rng_;

  struct EnvSlot {
    CounterRng rng;
    envs::EpisodeTracker tracker;
    std::vector<double> state;
    double episode_return = 0.0;
  };
  std::vector<EnvSlot> slots_;
  RolloutBuffer buffer_;
  std::vector<double> completed_returns_;

  int epoch_ = 0;
  std::int64_t env_steps_ = 0;
  bool any_completed_ = false;
  double last_mean_ = 0.0;
  std::optional<double> best_;
};

}  // namespace gippo::algos
