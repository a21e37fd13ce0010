#include <gtest/gtest.h>

#include <cmath>
#include <numbers>
#include <vector>

#include "gippo/cli/gradcheck.hpp"
#include "gippo/envs.hpp"
#include "gippo/random.hpp"

namespace {

using namespace gippo;
using envs::TrafficEvent;
using envs::TrafficModel;
using envs::TrafficParams;

double reward_of(const envs::Env& env, const std::vector<double>& action) {
  const std::vector<double> s = env.reset(0);
  return env.step(std::span<const double>(s), std::span<const double>(action)).reward;
}

TEST(FunctionEnvs, DeJongValues) {
  const auto d1 = envs::make_env("dejong1");
  EXPECT_EQ(reward_of(*d1, {0.0}), 0.0);
  EXPECT_NEAR(reward_of(*d1, {1.0}), -26.2144, 1e-12);
  EXPECT_NEAR(reward_of(*d1, {-1.0}), -26.2144, 1e-12);
  // Actions outside the box are clamped.
  EXPECT_EQ(reward_of(*d1, {3.0}), reward_of(*d1, {1.0}));
  const std::vector<double> ones{1.0, 1.0};
  EXPECT_NEAR(envs::dejong_reward<double>(ones), -52.4288, 1e-12);
}

TEST(FunctionEnvs, AckleyValues) {
  const auto a1 = envs::make_env("ackley1");
  EXPECT_NEAR(reward_of(*a1, {0.0}), 0.0, 1e-14);
  // F_A(0.5) by hand: sqrt(x^2) = 0.5 and cos(pi) = -1.
  const double f_half = -20.0 * std::exp(-0.2 * 0.5) - std::exp(-1.0) + 20.0 + std::numbers::e;
  EXPECT_NEAR(reward_of(*a1, {0.5 / envs::kAckleyScale}), -f_half, 1e-12);
}

TEST(FunctionEnvs, RewardsAreNonPositive) {
  CounterRng rng(1);
  for (const char* id : {"dejong1", "dejong64", "ackley1", "ackley64"}) {
    const auto env = envs::make_env(id);
    for (int i = 0; i < 10000; ++i) {
      std::vector<double> a(env->act_dim());
      for (double& x : a) x = rng.uniform(-1.5, 1.5);
      ASSERT_LE(reward_of(*env, a), 1e-12) << id;
    }
    EXPECT_NEAR(reward_of(*env, std::vector<double>(env->act_dim(), 0.0)), 0.0, 1e-12) << id;
  }
}

TEST(FunctionEnvs, SingleStepWithConstantObservation) {
  const auto env = envs::make_env("dejong64");
  EXPECT_EQ(env->episode_length(), 1);
  for (std::uint64_t seed : {0u, 1u, 99u}) {
    const std::vector<double> s = env->reset(seed);
    EXPECT_EQ(s, std::vector<double>{0.0});
    EXPECT_EQ(env->observe(s), std::vector<double>{0.0});
  }
  envs::EpisodeTracker tracker(*env);
  const std::vector<double> s = env->reset(0);
  const std::vector<double> a(64, 0.1);
  const envs::EnvStep<double> st = tracker.advance(env->step(std::span<const double>(s), std::span<const double>(a)));
  EXPECT_TRUE(st.done);
  // The single decision is the whole task, so the end is terminal.
  EXPECT_EQ(st.done_reason, envs::DoneReason::kTermination);
}

TEST(Episodes, OnlyOneShotTasksEndTerminallyAtTheHorizon) {
  for (const std::string& id : envs::env_ids()) {
    const auto env = envs::make_env(id);
    const bool one_shot = id.rfind("dejong", 0) == 0 || id.rfind("ackley", 0) == 0;
    EXPECT_EQ(env->horizon_is_terminal(), one_shot) << id;
  }
  envs::EpisodeTracker tracker(3, false);
  const envs::Transition<double> tr{{0.0}, 0.0, false};
  EXPECT_EQ(tracker.advance(tr).done_reason, envs::DoneReason::kNone);
  EXPECT_EQ(tracker.advance(tr).done_reason, envs::DoneReason::kNone);
  EXPECT_EQ(tracker.advance(tr).done_reason, envs::DoneReason::kHorizon);
  EXPECT_EQ(tracker.t(), 0);
  EXPECT_TRUE(envs::bootstraps(true, envs::DoneReason::kHorizon));
  EXPECT_FALSE(envs::bootstraps(true, envs::DoneReason::kTermination));
  EXPECT_TRUE(envs::bootstraps(false, envs::DoneReason::kNone));
}

TEST(CartPole, UprightEquilibrium) {
  const auto env = envs::make_env("cartpole");
  const std::vector<double> s{0.0, 0.0, 0.0, 0.0};
  const std::vector<double> u{0.0};
  const envs::Transition<double> tr = env->step(std::span<const double>(s), std::span<const double>(u));
  EXPECT_EQ(tr.reward, 0.0);
  for (double x : tr.next_state) EXPECT_NEAR(x, 0.0, 1e-15);
  EXPECT_FALSE(tr.terminated);
}

TEST(CartPole, HangingAtRest) {
  const auto env = envs::make_env("cartpole");
  const std::vector<double> s{0.0, 0.0, std::numbers::pi, 0.0};
  const std::vector<double> u{0.0};
  const envs::Transition<double> tr = env->step(std::span<const double>(s), std::span<const double>(u));
  EXPECT_NEAR(tr.reward, -std::numbers::pi * std::numbers::pi, 1e-12);
}

TEST(CartPole, AngleWrapsToHalfOpenInterval) {
  CounterRng rng(2);
  for (int i = 0; i < 1000; ++i) {
    const double th = rng.uniform(-50.0, 50.0);
    const double w = envs::wrap_angle(th);
    EXPECT_GT(w, -std::numbers::pi - 1e-12);
    EXPECT_LE(w, std::numbers::pi + 1e-12);
    const double turns = (th - w) / (2.0 * std::numbers::pi);
    EXPECT_NEAR(turns, std::round(turns), 1e-9);
  }
}

TEST(Idm, FreeRoadAtDesiredSpeed) {
  const envs::IdmParams p;
  const std::optional<double> acc = envs::idm_accel(p.v0, p.v0, 1e9, p);
  ASSERT_TRUE(acc.has_value());
  EXPECT_NEAR(*acc, 0.0, 1e-6);
  EXPECT_NEAR(envs::idm_free_accel(p.v0, p), 0.0, 1e-15);
}

TEST(Idm, StandingAtMinimumGap) {
  const envs::IdmParams p;
  const std::optional<double> acc = envs::idm_accel(0.0, 0.0, p.s0, p);
  ASSERT_TRUE(acc.has_value());
  EXPECT_NEAR(*acc, 0.0, 1e-15);
}

TEST(Idm, DesiredGapLeavesSpeedTerm) {
  const envs::IdmParams p;
  for (double v : {0.5, 5.0, 12.0, 29.0}) {
    const double s_star = p.s0 + v * p.T;
    const std::optional<double> acc = envs::idm_accel(v, v, s_star, p);
    ASSERT_TRUE(acc.has_value());
    EXPECT_NEAR(*acc, -p.a * std::pow(v / p.v0, p.delta), 1e-12) << v;
  }
}

TEST(Idm, NonPositiveGapSignalsCollision) {
  const envs::IdmParams p;
  EXPECT_FALSE(envs::idm_accel(10.0, 10.0, 0.0, p).has_value());
  EXPECT_FALSE(envs::idm_accel(10.0, 10.0, -3.0, p).has_value());
}

TEST(Traffic, RewardOneAtTargetSpeed) {
  // Two lanes, one human each, neither with a leader: with v0 = v_tgt the free
  // road acceleration at v_tgt is exactly zero.
  TrafficParams p = envs::traffic_params("traffic-2");
  p.vehicles_per_lane = 1;
  p.idm.v0 = p.v_target;
  const TrafficModel m(p);
  // Pace car in lane 0 behind that lane's human, ahead of lane 1's.
  const std::vector<double> s{-20.0, 10.0, m.lane_center(0), 0.0, 10.0, -30.0, 10.0};
  TrafficEvent ev;
  const envs::Transition<double> tr = m.step<double>(s, std::vector<double>{0.0, 0.0}, &ev);
  EXPECT_EQ(ev, TrafficEvent::kNone);
  EXPECT_EQ(tr.reward, 1.0);
  EXPECT_FALSE(tr.terminated);
}

TEST(Traffic, RewardZeroWhenStopped) {
  // Stopped human at the minimum gap behind a stopped pace car stays put.
  const TrafficModel m{TrafficParams{}};
  const double x_h = -(m.params().idm.s0 + m.params().idm.length);
  const std::vector<double> s{0.0, 0.0, 0.0, x_h, 0.0};
  TrafficEvent ev;
  const envs::Transition<double> tr = m.step<double>(s, std::vector<double>{0.0, 0.0}, &ev);
  EXPECT_EQ(ev, TrafficEvent::kNone);
  EXPECT_EQ(tr.next_state[4], 0.0);
  EXPECT_EQ(tr.reward, 0.0);
  EXPECT_FALSE(tr.terminated);
}

TEST(Traffic, SteeringOffTheRoadTerminates) {
  const auto env = envs::make_env("traffic-1");
  const std::vector<double> s{0.0, 10.0, 0.0, -30.0, 10.0};
  const std::vector<double> a{0.0, 10.0};  // one lane unit per step
  const envs::Transition<double> tr = env->step(std::span<const double>(s), std::span<const double>(a));
  EXPECT_EQ(tr.reward, -1.0);
  EXPECT_TRUE(tr.terminated);
  envs::EpisodeTracker tracker(*env);
  EXPECT_EQ(tracker.advance(tr).done_reason, envs::DoneReason::kTermination);
}

TEST(Traffic, OtherTerminationRules) {
  const TrafficModel m{TrafficParams{}};
  const std::vector<double> a{0.0, 0.0};
  TrafficEvent ev;
  // Pace car overlapping the human.
  m.step<double>(std::vector<double>{0.0, 10.0, 0.0, -1.0, 10.0}, a, &ev);
  EXPECT_EQ(ev, TrafficEvent::kCollision);
  // More than 200 m ahead.
  m.step<double>(std::vector<double>{250.0, 10.0, 0.0, 0.0, 10.0}, a, &ev);
  EXPECT_EQ(ev, TrafficEvent::kTooFarAhead);
  // Behind the rearmost human.
  m.step<double>(std::vector<double>{-50.0, 10.0, 0.0, 0.0, 10.0}, a, &ev);
  EXPECT_EQ(ev, TrafficEvent::kFellBehind);
}

TEST(Traffic, ResetIsDeterministicAndCollisionFree) {
  for (const char* id : {"traffic-1", "traffic-2", "traffic-4", "traffic-10"}) {
    const TrafficModel m(envs::traffic_params(id));
    const auto env = envs::make_env(id);
    for (std::uint64_t seed = 0; seed < 200; ++seed) {
      const std::vector<double> s = env->reset(seed);
      ASSERT_EQ(s, env->reset(seed));
      ASSERT_EQ(static_cast<int>(s.size()), m.state_dim());
      // Same-lane gaps, pace car included when it shares the lane.
      for (int i = 0; i < m.num_humans(); ++i) {
        for (int j = 0; j < m.num_humans(); ++j) {
          if (i != j && m.human_lane(i) == m.human_lane(j)) {
            EXPECT_GT(std::fabs(s[3 + 2 * i] - s[3 + 2 * j]), m.params().idm.length) << id;
          }
        }
        if (m.human_lane(i) == m.lane_of(s[2])) {
          EXPECT_GT(s[0] - s[3 + 2 * i], m.params().idm.length) << id;
        }
      }
      TrafficEvent ev;
      m.step<double>(s, std::vector<double>{0.0, 0.0}, &ev);
      EXPECT_EQ(ev, TrafficEvent::kNone) << id << " seed " << seed;
    }
  }
}

TEST(Traffic, RandomRolloutsKeepInvariants) {
  // Rewards in [-1, 1], non-negative speeds, and same-lane order preserved
  // unless the step ends in a collision.
  CounterRng rng(3);
  for (const char* id : {"traffic-1", "traffic-2", "traffic-4"}) {
    const TrafficModel m(envs::traffic_params(id));
    for (int ep = 0; ep < 30; ++ep) {
      std::vector<double> s = m.reset(static_cast<std::uint64_t>(ep));
      for (int t = 0; t < 300; ++t) {
        const std::vector<double> a{rng.uniform(-3.0, 3.0), rng.uniform(-1.0, 1.0)};
        TrafficEvent ev;
        const envs::Transition<double> tr = m.step<double>(s, a, &ev);
        ASSERT_GE(tr.reward, -1.0);
        ASSERT_LE(tr.reward, 1.0);
        EXPECT_GE(tr.next_state[1], 0.0);
        for (int i = 0; i < m.num_humans(); ++i) EXPECT_GE(tr.next_state[4 + 2 * i], 0.0);
        if (ev != TrafficEvent::kCollision) {
          for (int i = 0; i < m.num_humans(); ++i) {
            for (int j = 0; j < m.num_humans(); ++j) {
              if (i == j || m.human_lane(i) != m.human_lane(j) || s[3 + 2 * i] >= s[3 + 2 * j]) continue;
              EXPECT_LT(tr.next_state[3 + 2 * i], tr.next_state[3 + 2 * j]) << id;
            }
          }
        }
        if (tr.terminated) break;
        s = tr.next_state;
      }
    }
  }
}

TEST(Envs, IdsAndUnknownNames) {
  const std::vector<std::string> ids = envs::env_ids();
  EXPECT_EQ(ids.size(), 9u);
  for (const std::string& id : ids) EXPECT_EQ(envs::make_env(id)->id(), id);
  EXPECT_THROW(envs::make_env("hopper"), std::invalid_argument);
  EXPECT_THROW(envs::make_env(""), std::invalid_argument);
}

TEST(Envs, StepRejectsWrongDimensions) {
  const auto env = envs::make_env("traffic-1");
  const std::vector<double> s = env->reset(0);
  const std::vector<double> a{0.0};
  EXPECT_THROW(env->step(std::span<const double>(s), std::span<const double>(a)), std::invalid_argument);
}

TEST(Envs, TapeStepMatchesValueStep) {
  CounterRng rng(4);
  for (const std::string& id : envs::env_ids()) {
    const auto env = envs::make_env(id);
    const std::vector<double> s = env->reset(5);
    std::vector<double> a(env->act_dim());
    for (double& x : a) x = rng.uniform(-0.5, 0.5);
    const envs::Transition<double> plain = env->step(std::span<const double>(s), std::span<const double>(a));
    ad::Tape tape;
    std::vector<ad::Var> sv, av;
    for (double x : s) sv.push_back(tape.variable(x));
    for (double x : a) av.push_back(tape.variable(x));
    const envs::Transition<ad::Var> taped = env->step(std::span<const ad::Var>(sv), std::span<const ad::Var>(av));
    EXPECT_EQ(taped.reward.value(), plain.reward) << id;
    EXPECT_EQ(taped.terminated, plain.terminated) << id;
    for (std::size_t k = 0; k < plain.next_state.size(); ++k) EXPECT_EQ(taped.next_state[k].value(), plain.next_state[k]);
  }
}

TEST(Envs, DynamicsGradientsMatchFiniteDifferences) {
  for (const std::string& id : envs::env_ids()) {
    const auto env = envs::make_env(id);
    const cli::CheckResult r = cli::check_env_dynamics(*env, 100, 6);
    EXPECT_LE(r.max_rel_err, 1e-5) << id;
    EXPECT_GE(r.points, 100u) << id;
  }
}

}  // namespace
