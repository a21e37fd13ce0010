#include <gtest/gtest.h>

#include <cmath>
#include <set>
#include <stdexcept>
#include <vector>

#include "gippo/cli/gradcheck.hpp"
#include "gippo/envs.hpp"
#include "gippo/errors.hpp"
#include "gippo/estimation.hpp"
#include "gippo/random.hpp"
#include "support.hpp"

namespace {

using namespace gippo;
using estimation::Critic;
using estimation::RolloutBuffer;

// Random-action rollout where episodes last `episode_length` steps, so that
// done flags land at known slots.
RolloutBuffer forced_rollout(const envs::Env& env, int num_envs, int horizon, int episode_length, std::uint64_t seed) {
  RolloutBuffer buf(num_envs, horizon, env.state_dim(), env.obs_dim(), env.act_dim());
  CounterRng rng(seed);
  for (int e = 0; e < num_envs; ++e) {
    envs::EpisodeTracker tracker(episode_length);
    std::vector<double> s = env.reset(seed + e);
    for (int t = 0; t < horizon; ++t) {
      std::vector<double> eps(env.act_dim()), a(env.act_dim());
      for (int k = 0; k < env.act_dim(); ++k) {
        eps[k] = rng.normal();
        a[k] = 0.5 * eps[k];
      }
      const std::vector<double> o = env.observe(s);
      const envs::EnvStep<double> st = tracker.advance(env.step(std::span<const double>(s), std::span<const double>(a)));
      buf.store(e, t, s, o, eps, a, st.reward, st.next_state, env.observe(st.next_state), st.done, st.done_reason);
      s = st.done ? env.reset(seed + 100 * (t + 1) + e) : st.next_state;
    }
  }
  return buf;
}

// A_t of row `e` after replacing action component k at slot `t_pert` by
// `value`, replaying the rest of the row with its stored actions. States after
// a done are the stored resets.
double replayed_advantage(const RolloutBuffer& buf, const envs::Env& env, const Critic& critic, int e, int t_adv,
                          int t_pert, int k, double value, double gamma, double lambda) {
  const int H = buf.horizon;
  std::vector<double> rewards(H), values(H), next_values(H);
  std::vector<std::uint8_t> dones(H);
  std::vector<envs::DoneReason> reasons(H);
  std::vector<double> s(buf.state(buf.slot(e, 0)).begin(), buf.state(buf.slot(e, 0)).end());
  for (int t = 0; t < H; ++t) {
    const std::size_t i = buf.slot(e, t);
    if (t > 0 && buf.dones[i - 1]) s.assign(buf.state(i).begin(), buf.state(i).end());
    std::vector<double> a(buf.action(i).begin(), buf.action(i).end());
    if (t == t_pert) a[k] = value;
    const envs::Transition<double> tr = env.step(std::span<const double>(s), std::span<const double>(a));
    rewards[t] = tr.reward;
    values[t] = critic.value(env.observe(s));
    next_values[t] = critic.value(env.observe(tr.next_state));
    dones[t] = buf.dones[i];
    reasons[t] = buf.done_reasons[i];
    s = tr.next_state;
  }
  return estimation::gae_from_values(rewards, values, next_values, dones, reasons, 1, H, gamma, lambda)[t_adv];
}

double replay_fd(const RolloutBuffer& buf, const envs::Env& env, const Critic& critic, int e, int t_adv, int t_pert,
                 int k, double gamma, double lambda) {
  const double a0 = buf.action(buf.slot(e, t_pert))[k];
  return test::central_diff(
      [&](double a) { return replayed_advantage(buf, env, critic, e, t_adv, t_pert, k, a, gamma, lambda); }, a0);
}

TEST(Gae, SingleStep) {
  const std::vector<double> r{1.5}, v{0.4}, nv{2.0};
  const std::vector<std::uint8_t> not_done{0}, done{1};
  EXPECT_NEAR(estimation::gae_from_values(r, v, nv, not_done, 1, 1, 0.9, 0.7)[0], 1.5 + 0.9 * 2.0 - 0.4, 1e-15);
  // Done slots do not bootstrap.
  EXPECT_NEAR(estimation::gae_from_values(r, v, nv, done, 1, 1, 0.9, 0.7)[0], 1.5 - 0.4, 1e-15);
}

TEST(Gae, DiscountedReturnWithZeroValues) {
  const std::vector<double> r{1.0, -2.0, 0.5, 3.0};
  const std::vector<double> zero(4, 0.0);
  const std::vector<std::uint8_t> dones(4, 0);
  const double g = 0.9;
  const std::vector<double> adv = estimation::gae_from_values(r, zero, zero, dones, 1, 4, g, 1.0);
  for (int t = 0; t < 4; ++t) {
    double ret = 0.0;
    for (int k = t; k < 4; ++k) ret += std::pow(g, k - t) * r[k];
    EXPECT_NEAR(adv[t], ret, 1e-12) << t;
  }
}

TEST(Gae, ZeroLambdaIsTdResidual) {
  const std::vector<double> r{1.0, -2.0, 0.5};
  const std::vector<double> v{0.3, 0.1, -0.7}, nv{0.1, -0.7, 2.0};
  const std::vector<std::uint8_t> dones{0, 1, 0};
  const std::vector<double> adv = estimation::gae_from_values(r, v, nv, dones, 1, 3, 0.95, 0.0);
  EXPECT_NEAR(adv[0], 1.0 + 0.95 * 0.1 - 0.3, 1e-15);
  EXPECT_NEAR(adv[1], -2.0 - 0.1, 1e-15);
  EXPECT_NEAR(adv[2], 0.5 + 0.95 * 2.0 + 0.7, 1e-15);
}

TEST(Gae, HandOracleWithDoneInWindow) {
  // Two rows of three; row 1 ends an episode at t = 0.
  const double g = 0.9, l = 0.5;
  const std::vector<double> r{1.0, 2.0, 3.0, 4.0, 5.0, 6.0};
  const std::vector<double> v{0.1, 0.2, 0.3, 0.4, 0.5, 0.6};
  const std::vector<double> nv{0.2, 0.3, 0.7, 9.9, 0.6, 0.8};
  const std::vector<std::uint8_t> dones{0, 0, 0, 1, 0, 0};
  const std::vector<double> adv = estimation::gae_from_values(r, v, nv, dones, 2, 3, g, l);
  auto td = [&](int i) { return r[i] + (dones[i] ? 0.0 : g * nv[i]) - v[i]; };
  EXPECT_NEAR(adv[2], td(2), 1e-14);
  EXPECT_NEAR(adv[1], td(1) + g * l * td(2), 1e-14);
  EXPECT_NEAR(adv[0], td(0) + g * l * td(1) + g * g * l * l * td(2), 1e-14);
  EXPECT_NEAR(adv[5], td(5), 1e-14);
  EXPECT_NEAR(adv[4], td(4) + g * l * td(5), 1e-14);
  EXPECT_NEAR(adv[3], td(3), 1e-14);
}

TEST(Gae, LinearInRewardsWithZeroValues) {
  CounterRng rng(1);
  for (int trial = 0; trial < 100; ++trial) {
    const int M = 3, H = 7;
    std::vector<double> r(M * H), scaled(M * H), zero(M * H, 0.0);
    std::vector<std::uint8_t> dones(M * H);
    const double c = rng.uniform(-4.0, 4.0);
    for (int i = 0; i < M * H; ++i) {
      r[i] = rng.uniform(-10.0, 10.0);
      scaled[i] = c * r[i];
      dones[i] = rng.uniform() < 0.2;
    }
    const std::vector<double> a = estimation::gae_from_values(r, zero, zero, dones, M, H, 0.99, 0.95);
    const std::vector<double> b = estimation::gae_from_values(scaled, zero, zero, dones, M, H, 0.99, 0.95);
    for (int i = 0; i < M * H; ++i) EXPECT_NEAR(b[i], c * a[i], 1e-12 * std::max(1.0, std::fabs(b[i])));
  }
}

TEST(Gae, TimeLimitBootstrapsWithoutPropagating) {
  const std::vector<double> r{1.0, 2.0}, v{0.5, 0.25}, nv{3.0, 4.0};
  const std::vector<std::uint8_t> dones{1, 0};
  const double g = 0.9, l = 0.8;
  const std::vector<envs::DoneReason> limit{envs::DoneReason::kHorizon, envs::DoneReason::kNone};
  const std::vector<double> a = estimation::gae_from_values(r, v, nv, dones, limit, 1, 2, g, l);
  EXPECT_NEAR(a[0], 1.0 + g * 3.0 - 0.5, 1e-15);
  EXPECT_NEAR(a[1], 2.0 + g * 4.0 - 0.25, 1e-15);
  const std::vector<envs::DoneReason> terminal{envs::DoneReason::kTermination, envs::DoneReason::kNone};
  EXPECT_NEAR(estimation::gae_from_values(r, v, nv, dones, terminal, 1, 2, g, l)[0], 1.0 - 0.5, 1e-15);
}

TEST(Gae, BufferPathMatchesValuePath) {
  const auto env = envs::make_env("cartpole");
  const RolloutBuffer buf = forced_rollout(*env, 3, 6, 4, 2);
  const Critic critic(env->obs_dim(), {16, 16}, 3);
  std::vector<double> v, nv;
  for (std::size_t i = 0; i < buf.size(); ++i) {
    v.push_back(critic.value(buf.observation(i)));
    nv.push_back(critic.value(std::span<const double>(buf.next_obs.data() + i * buf.obs_dim, buf.obs_dim)));
  }
  const std::vector<double> expect =
      estimation::gae_from_values(buf.rewards, v, nv, buf.dones, buf.done_reasons, 3, 6, 0.99, 0.95);
  const std::vector<double> got = estimation::compute_gae(buf, critic, 0.99, 0.95);
  for (std::size_t i = 0; i < buf.size(); ++i) EXPECT_NEAR(got[i], expect[i], 1e-12);
}

TEST(AdvGrads, SingleStepMatchesRewardPlusValuePath) {
  const auto env = envs::make_env("cartpole");
  const RolloutBuffer buf = forced_rollout(*env, 4, 1, 200, 4);
  const Critic critic(env->obs_dim(), {32, 32}, 5);
  const std::vector<double> g = estimation::compute_adv_grads(buf, critic, *env, 0.99, 0.95);
  for (int e = 0; e < 4; ++e) {
    // dr/da + gamma dV(s')/da by finite differences.
    const std::size_t i = buf.slot(e, 0);
    const std::vector<double> s(buf.state(i).begin(), buf.state(i).end());
    auto q = [&](double a) {
      const std::vector<double> act{a};
      const envs::Transition<double> tr = env->step(std::span<const double>(s), std::span<const double>(act));
      return tr.reward + 0.99 * critic.value(env->observe(tr.next_state));
    };
    EXPECT_LE(test::rel_err(g[i], test::central_diff(q, buf.action(i)[0])), 1e-6) << e;
  }
}

TEST(AdvGrads, MatchesReplayFiniteDifferences) {
  for (const char* id : {"cartpole", "traffic-2"}) {
    const auto env = envs::make_env(id);
    const RolloutBuffer buf = id == std::string("cartpole") ? forced_rollout(*env, 2, 8, 5, 6)
                                                            : cli::random_rollout(*env, 2, 8, 6);
    // The cartpole rows hit a time limit at t = 4, which bootstraps through V(s').
    if (id == std::string("cartpole")) {
      ASSERT_EQ(buf.done_reasons[4], envs::DoneReason::kHorizon);
    }
    const Critic critic(env->obs_dim(), {32, 32}, 7);
    const std::vector<double> g = estimation::compute_adv_grads(buf, critic, *env, 0.99, 0.95);
    for (int e = 0; e < 2; ++e) {
      for (int t = 0; t < 8; ++t) {
        for (int k = 0; k < env->act_dim(); ++k) {
          const double fd = replay_fd(buf, *env, critic, e, t, t, k, 0.99, 0.95);
          EXPECT_LE(test::rel_err(g[buf.slot(e, t) * env->act_dim() + k], fd), 1e-5) << id << " " << e << "," << t;
        }
      }
    }
  }
}

TEST(AdvGrads, RescalingByInverseDecay) {
  // With gamma * lambda = 0.5, dA_2/da_2 = 4 dA_0/da_2.
  const auto env = envs::make_env("cartpole");
  const RolloutBuffer buf = forced_rollout(*env, 1, 5, 200, 8);
  const Critic critic(env->obs_dim(), {32, 32}, 9);
  const double gamma = 0.8, lambda = 0.625;
  const std::vector<double> g = estimation::compute_adv_grads(buf, critic, *env, gamma, lambda);
  const double d_a0 = replay_fd(buf, *env, critic, 0, 0, 2, 0, gamma, lambda);
  EXPECT_LE(test::rel_err(g[2], 4.0 * d_a0), 1e-6);
}

TEST(AdvGrads, AgreesWithPerStepBackwardOracle) {
  CounterRng seeds(10);
  for (const std::string& id : envs::env_ids()) {
    const auto env = envs::make_env(id);
    for (int rep = 0; rep < 3; ++rep) {
      const std::uint64_t seed = seeds();
      const RolloutBuffer buf = cli::random_rollout(*env, 4, 8, seed);
      const Critic critic(env->obs_dim(), {32, 32}, seed + 1);
      const std::vector<double> fast = estimation::compute_adv_grads(buf, critic, *env, 0.99, 0.95);
      const std::vector<double> slow = cli::adv_grads_oracle(buf, critic, *env, 0.99, 0.95);
      ASSERT_EQ(fast.size(), slow.size());
      for (std::size_t i = 0; i < fast.size(); ++i) EXPECT_LE(test::rel_err(fast[i], slow[i]), 1e-8) << id << " " << i;
    }
  }
}

TEST(AdvGrads, EpisodeBoundaryIsolatesLaterSlots) {
  const auto env = envs::make_env("cartpole");
  RolloutBuffer buf = forced_rollout(*env, 1, 7, 3, 11);  // done at t = 2 and t = 5
  ASSERT_TRUE(buf.dones[2]);
  const Critic critic(env->obs_dim(), {32, 32}, 12);
  const std::vector<double> before = estimation::compute_adv_grads(buf, critic, *env, 0.99, 0.95);
  // Perturb a_2 and keep the stored transition consistent with it.
  const std::vector<double> s(buf.state(2).begin(), buf.state(2).end());
  const std::vector<double> a{buf.action(2)[0] + 0.3};
  const envs::Transition<double> tr = env->step(std::span<const double>(s), std::span<const double>(a));
  buf.store(0, 2, s, buf.observation(2), buf.noise(2), a, tr.reward, tr.next_state, env->observe(tr.next_state),
            true, envs::DoneReason::kHorizon);
  const std::vector<double> after = estimation::compute_adv_grads(buf, critic, *env, 0.99, 0.95);
  EXPECT_NE(before[2], after[2]);
  for (int t = 3; t < 7; ++t) EXPECT_EQ(before[t], after[t]) << t;
}

TEST(AdvGrads, ReplayMismatchIsALogicError) {
  const auto env = envs::make_env("cartpole");
  RolloutBuffer buf = forced_rollout(*env, 1, 4, 200, 13);
  buf.rewards[2] += 1.0;
  const Critic critic(env->obs_dim(), {8}, 14);
  EXPECT_THROW(estimation::compute_adv_grads(buf, critic, *env, 0.99, 0.95), std::logic_error);
}

TEST(AdvGrads, IncompleteBufferIsRejected) {
  const auto env = envs::make_env("cartpole");
  RolloutBuffer buf(1, 3, env->state_dim(), env->obs_dim(), env->act_dim());
  EXPECT_FALSE(buf.complete());
  const Critic critic(env->obs_dim(), {8}, 15);
  EXPECT_THROW(estimation::compute_adv_grads(buf, critic, *env, 0.99, 0.95), std::logic_error);
  EXPECT_THROW(estimation::compute_gae(buf, critic, 0.99, 0.95), std::logic_error);
}

nn::Matrix random_obs(int dim, int n, CounterRng& rng) {
  nn::Matrix m(dim, n);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = rng.uniform(-1.0, 1.0);
  return m;
}

double mse(const Critic& c, const nn::Matrix& obs, std::span<const double> targets) {
  const nn::Vector v = c.values(obs);
  double s = 0.0;
  for (Eigen::Index i = 0; i < v.size(); ++i) s += (v[i] - targets[i]) * (v[i] - targets[i]);
  return s / static_cast<double>(v.size());
}

TEST(CriticFit, ConstantTargets) {
  CounterRng rng(16);
  Critic critic(4, {32, 32}, 17);
  const nn::Matrix obs = random_obs(4, 64, rng);
  const std::vector<double> targets(64, 2.5);
  nn::Adam opt(critic.net().num_params(), {.lr = 1e-2});
  estimation::CriticFitConfig cfg;
  cfg.iterations = 500;
  const std::vector<double> trace = estimation::fit_critic(critic, opt, obs, targets, cfg, rng);
  ASSERT_EQ(trace.size(), 501u);
  EXPECT_NEAR(trace.back(), mse(critic, obs, targets), 1e-12);
  EXPECT_LT(trace.back(), 1e-3);
}

TEST(CriticFit, ZeroLearningRateLeavesParameters) {
  CounterRng rng(18);
  Critic critic(3, {16}, 19);
  const nn::Vector before = critic.net().flatten();
  const nn::Matrix obs = random_obs(3, 32, rng);
  std::vector<double> targets(32);
  for (double& t : targets) t = rng.normal();
  nn::Adam opt(critic.net().num_params(), {.lr = 0.0});
  estimation::fit_critic(critic, opt, obs, targets, {}, rng);
  EXPECT_EQ(critic.net().flatten(), before);
}

TEST(CriticFit, SingleSampleStepDescends) {
  CounterRng rng(20);
  Critic critic(3, {16}, 21);
  const nn::Matrix obs = random_obs(3, 1, rng);
  const std::vector<double> targets{3.0};
  nn::Adam opt(critic.net().num_params(), {.lr = 1e-4});
  estimation::CriticFitConfig cfg;
  cfg.iterations = 1;
  cfg.minibatches = 1;
  const std::vector<double> trace = estimation::fit_critic(critic, opt, obs, targets, cfg, rng);
  ASSERT_EQ(trace.size(), 2u);
  EXPECT_LT(trace[1], trace[0]);
}

TEST(CriticFit, UsuallyImproves) {
  CounterRng rng(22);
  int improved = 0;
  const int fits = 50;
  for (int f = 0; f < fits; ++f) {
    Critic critic(4, {32, 32}, 100 + f);
    const nn::Matrix obs = random_obs(4, 256, rng);
    std::vector<double> targets(256);
    for (Eigen::Index i = 0; i < 256; ++i) targets[i] = std::sin(3.0 * obs(0, i)) + obs(1, i) * obs(2, i) + rng.normal();
    nn::Adam opt(critic.net().num_params(), {.lr = 1e-3});
    const std::vector<double> trace = estimation::fit_critic(critic, opt, obs, targets, {}, rng);
    improved += trace.back() <= trace.front();
  }
  EXPECT_GE(improved, 45);
}

TEST(Shuffle, IsAPermutationAndDeterministic) {
  CounterRng a(23), b(23);
  const std::vector<std::size_t> p = estimation::shuffled_indices(100, a);
  EXPECT_EQ(p, estimation::shuffled_indices(100, b));
  EXPECT_EQ(std::set<std::size_t>(p.begin(), p.end()).size(), 100u);
  EXPECT_EQ(*std::max_element(p.begin(), p.end()), 99u);
  EXPECT_TRUE(estimation::shuffled_indices(0, a).empty());
}

}  // namespace
