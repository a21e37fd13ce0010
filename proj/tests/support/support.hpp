#pragma once

// Fixtures shared by the unit and acceptance tests.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <span>
#include <vector>

#include "gippo/algos.hpp"
#include "gippo/envs.hpp"
#include "gippo/estimation.hpp"
#include "gippo/policy.hpp"
#include "gippo/random.hpp"
#include "gippo/tape.hpp"

namespace gippo::test {

// Raw head output that the policy maps to log(sigma).
inline double raw_for_sigma(double sigma, double min_logstd) {
  return min_logstd + std::log(std::expm1(std::log(sigma) - min_logstd));
}

// One-dimensional policy with no hidden layer. With the constant observation
// [0] its mean and log-std are the two output biases.
inline policy::GaussianPolicy linear_policy(double mu, double sigma) {
  policy::PolicyConfig pc;
  pc.hidden = {};
  pc.output_scale = 1.0;
  pc.init_logstd = 0.0;
  policy::GaussianPolicy pol(1, 1, pc, 1);
  // Layout: weights (2 x 1) then biases (2).
  const std::vector<double> params{0.0, 0.0, mu, raw_for_sigma(sigma, pc.min_logstd)};
  pol.set_params(params);
  return pol;
}

struct QuadraticSetup {
  policy::GaussianPolicy policy;
  estimation::RolloutBuffer buffer;
};

// `n` one-step samples of the linear policy with advantage -(a - c)^2 and its
// exact action gradient.
inline QuadraticSetup quadratic_setup(double mu, double sigma, double c, int n, std::uint64_t seed) {
  QuadraticSetup q{linear_policy(mu, sigma), estimation::RolloutBuffer(n, 1, 1, 1, 1)};
  CounterRng rng(seed);
  const std::vector<double> zero{0.0};
  for (int i = 0; i < n; ++i) {
    const double eps = rng.normal();
    const double a = mu + sigma * eps;
    const std::vector<double> e{eps}, act{a};
    q.buffer.store(i, 0, zero, zero, e, act, -(a - c) * (a - c), zero, zero, true, envs::DoneReason::kHorizon);
  }
  q.buffer.advantages.resize(n);
  q.buffer.adv_grads.resize(n);
  for (int i = 0; i < n; ++i) {
    const double a = q.buffer.actions[i];
    q.buffer.advantages[i] = -(a - c) * (a - c);
    q.buffer.adv_grads[i] = -2.0 * (a - c);
  }
  q.buffer.logp_ref = algos::buffer_log_prob(q.policy, q.buffer);
  q.buffer.logdet_ref = algos::buffer_logdet(q.policy, q.buffer);
  return q;
}

// Regression settings for the closed-form checks: full-batch Adam run to
// convergence rather than the training-time budget.
inline algos::AlphaFitConfig closed_form_fit_config() {
  algos::AlphaFitConfig cfg;
  cfg.lr = 1e-2;
  cfg.epochs = 400;
  cfg.minibatch = 4096;
  cfg.divergence_patience = 0;
  return cfg;
}

// Rollout of `policy` over `num_envs` rows of `horizon` steps, each row
// starting from reset(seed + row). Rows continue across episode ends.
inline estimation::RolloutBuffer policy_rollout(const envs::Env& env, const policy::GaussianPolicy& pol,
                                                int num_envs, int horizon, std::uint64_t seed) {
  estimation::RolloutBuffer buf(num_envs, horizon, env.state_dim(), env.obs_dim(), env.act_dim());
  for (int e = 0; e < num_envs; ++e) {
    CounterRng rng = CounterRng::stream(seed, static_cast<std::uint64_t>(e));
    envs::EpisodeTracker tracker(env);
    std::vector<double> s = env.reset(seed + e);
    for (int t = 0; t < horizon; ++t) {
      const std::vector<double> o = env.observe(s);
      const policy::Sample smp = pol.sample(o, rng);
      const envs::EnvStep<double> st = tracker.advance(env.step(s, smp.action));
      const std::vector<double> next_obs = env.observe(st.next_state);
      buf.store(e, t, s, o, smp.eps, smp.action, st.reward, st.next_state, next_obs, st.done, st.done_reason);
      s = st.done ? env.reset(seed + 1000003 * (t + 1) + e) : st.next_state;
    }
  }
  buf.logp_ref = algos::buffer_log_prob(pol, buf);
  buf.logdet_ref = algos::buffer_logdet(pol, buf);
  return buf;
}

// d reward / d action for every slot, by one tape per slot.
inline std::vector<double> reward_action_grads(const envs::Env& env, const estimation::RolloutBuffer& buf) {
  std::vector<double> out(buf.size() * buf.act_dim);
  for (std::size_t i = 0; i < buf.size(); ++i) {
    ad::Tape tape;
    std::vector<ad::Var> s(buf.state(i).begin(), buf.state(i).end());
    std::vector<ad::Var> a;
    for (double x : buf.action(i)) a.push_back(tape.variable(x));
    const envs::Transition<ad::Var> tr = env.step(std::span<const ad::Var>(s), std::span<const ad::Var>(a));
    tape.backward(tr.reward);
    for (int k = 0; k < buf.act_dim; ++k) out[i * buf.act_dim + k] = tape.adjoint(a[k]);
  }
  return out;
}

struct FrozenBuffer {
  std::vector<double> actions;
};

inline FrozenBuffer frozen_quadratic_buffer(const algos::QuadraticAlphaModel& m, int n, std::uint64_t seed) {
  FrozenBuffer fb;
  CounterRng rng(seed);
  for (int i = 0; i < n; ++i) fb.actions.push_back(m.mu + m.sigma * rng.normal());
  return fb;
}

// Importance-weighted return of the exact alpha-policy on a buffer drawn from
// the base policy, using raw advantages.
inline double closed_form_bias(algos::QuadraticAlphaModel m, const FrozenBuffer& fb, double alpha) {
  std::vector<double> logp_ref, logp_alpha, adv;
  algos::QuadraticAlphaModel am = m;
  am.alpha = alpha;
  for (double a : fb.actions) {
    logp_ref.push_back(std::log(m.base_density(a)));
    logp_alpha.push_back(std::log(am.induced_density(a)));
    adv.push_back(m.advantage(a));
  }
  return algos::estimate_bias(logp_ref, logp_alpha, adv);
}

// |a - b| / max(1, |a|, |b|)
inline double rel_err(double a, double b) {
  return std::fabs(a - b) / std::max({1.0, std::fabs(a), std::fabs(b)});
}

// Central difference of a scalar function of one coordinate.
template <class F>
double central_diff(F&& f, double x, double h = 1e-6) {
  const double step = h * std::max(1.0, std::fabs(x));
  return (f(x + step) - f(x - step)) / (2.0 * step);
}

}  // namespace gippo::test
