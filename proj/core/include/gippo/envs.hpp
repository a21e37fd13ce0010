#pragma once

#include <cmath>
#include <cstdint>
#include <memory>
#include <numbers>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "gippo/tape.hpp"

namespace gippo::envs {

enum class DoneReason { kNone, kHorizon, kTermination };

// Result of one transition. Environments are pure functions of
// (state, action); horizon bookkeeping lives in EpisodeTracker.
template <class T>
struct Transition {
  std::vector<T> next_state;
  T reward{};
  bool terminated = false;
};

// EnvStep as seen by a rollout: the transition plus episode termination.
template <class T>
struct EnvStep {
  std::vector<T> next_state;
  T reward{};
  bool done = false;
  DoneReason done_reason = DoneReason::kNone;
};

class Env {
 public:
  virtual ~Env() = default;

  virtual std::string_view id() const = 0;
  virtual int state_dim() const = 0;
  virtual int obs_dim() const = 0;
  virtual int act_dim() const = 0;
  virtual int episode_length() const = 0;
  // True when reaching episode_length ends the task itself, as in one-shot
  // problems. Otherwise the horizon is a time limit on a process that would
  // continue, and value estimates bootstrap across it.
  virtual bool horizon_is_terminal() const { return false; }

  // Initial state; deterministic per seed.
  virtual std::vector<double> reset(std::uint64_t seed) const = 0;
  virtual Transition<double> step(std::span<const double> state, std::span<const double> action) const = 0;
  virtual Transition<ad::Var> step(std::span<const ad::Var> state, std::span<const ad::Var> action) const = 0;
  virtual std::vector<double> observe(std::span<const double> state) const = 0;
  virtual std::vector<ad::Var> observe(std::span<const ad::Var> state) const = 0;
};

// Tracks the step count of one environment instance and converts
// transitions into EnvSteps.
class EpisodeTracker {
 public:
  explicit EpisodeTracker(int episode_length, bool horizon_is_terminal = false)
      : length_(episode_length), horizon_is_terminal_(horizon_is_terminal) {}
  explicit EpisodeTracker(const Env& env) : EpisodeTracker(env.episode_length(), env.horizon_is_terminal()) {}

  template <class T>
  EnvStep<T> advance(Transition<T> tr) {
    ++t_;
    EnvStep<T> out{std::move(tr.next_state), tr.reward, false, DoneReason::kNone};
    if (tr.terminated || (horizon_is_terminal_ && t_ >= length_)) {
      out.done = true;
      out.done_reason = DoneReason::kTermination;
    } else if (t_ >= length_) {
      out.done = true;
      out.done_reason = DoneReason::kHorizon;
    }
    if (out.done) t_ = 0;
    return out;
  }

  int t() const { return t_; }

 private:
  int length_;
  bool horizon_is_terminal_;
  int t_ = 0;
};

// Whether the value of the next state counts toward a transition's return:
// everywhere except after a terminal transition.
inline bool bootstraps(bool done, DoneReason reason) { return !done || reason == DoneReason::kHorizon; }

// Ids: dejong1, dejong64, ackley1, ackley64, cartpole, traffic-1, traffic-2,
// traffic-4, traffic-10. Throws std::invalid_argument for anything else.
std::unique_ptr<Env> make_env(std::string_view id);
std::vector<std::string> env_ids();

// ---------------------------------------------------------------------------
// Function optimisation

constexpr double kDeJongScale = 5.12;
constexpr double kAckleyScale = 32.768;

// Both rewards are negated test functions of the scaled, clamped action.
template <class T>
T dejong_reward(std::span<const T> action) {
  T sum(0.0);
  for (const T& a : action) {
    const T x = ad::clamp(a, -1.0, 1.0) * kDeJongScale;
    sum = sum + x * x;
  }
  return -sum;
}

template <class T>
T ackley_reward(std::span<const T> action) {
  const double n = static_cast<double>(action.size());
  T sq(0.0);
  T cs(0.0);
  for (const T& a : action) {
    const T x = ad::clamp(a, -1.0, 1.0) * kAckleyScale;
    sq = sq + x * x;
    cs = cs + ad::cos(x * (2.0 * std::numbers::pi));
  }
  // sqrt has an infinite slope at the optimum; use the zero subgradient there.
  const T radius = ad::value_of(sq) > 0.0 ? ad::sqrt(sq / n) : T(0.0);
  const T f = -20.0 * ad::exp(-0.2 * radius) - ad::exp(cs / n) + 20.0 + std::numbers::e;
  return -f;
}

// ---------------------------------------------------------------------------
// Cart-pole (swing-up). State: x, x_dot, theta (0 = upright), theta_dot.

struct CartPoleParams {
  double cart_mass = 1.0;
  double pole_mass = 0.1;
  double pole_length = 0.5;
  double gravity = 9.81;
  double dt = 0.05;
  int episode_length = 200;
};

// Angle from upright wrapped to (-pi, pi]; derivative 1 away from the seam.
template <class T>
T wrap_angle(const T& theta) {
  const double v = ad::value_of(theta);
  const double k = std::ceil((v - std::numbers::pi) / (2.0 * std::numbers::pi));
  return theta - k * (2.0 * std::numbers::pi);
}

template <class T>
Transition<T> cartpole_step(const CartPoleParams& p, std::span<const T> s, std::span<const T> a) {
  const T& x = s[0];
  const T& x_dot = s[1];
  const T& th = s[2];
  const T& th_dot = s[3];
  const T& force = a[0];
  const double total = p.cart_mass + p.pole_mass;
  const T sin_t = ad::sin(th);
  const T cos_t = ad::cos(th);
  const T tmp = (force + p.pole_mass * p.pole_length * th_dot * th_dot * sin_t) / total;
  const T th_acc = (p.gravity * sin_t - cos_t * tmp) /
                   (p.pole_length * (4.0 / 3.0 - p.pole_mass * cos_t * cos_t / total));
  const T x_acc = tmp - p.pole_mass * p.pole_length * th_acc * cos_t / total;

  const T wrapped = wrap_angle(th);
  Transition<T> out;
  out.reward = -(wrapped * wrapped + 0.1 * th_dot * th_dot + 0.05 * x * x + 0.1 * force * force);
  out.next_state = {x + p.dt * x_dot, x_dot + p.dt * x_acc, th + p.dt * th_dot, th_dot + p.dt * th_acc};
  out.terminated = false;
  return out;
}

// ---------------------------------------------------------------------------
// Traffic: IDM car following with a controlled pace car.

struct IdmParams {
  double v0 = 30.0;      // desired speed, m/s
  double T = 1.5;        // time headway, s
  double a = 1.5;        // max acceleration, m/s^2
  double b = 2.0;        // comfortable deceleration, m/s^2
  double delta = 4.0;    // acceleration exponent
  double s0 = 2.0;       // minimum gap, m
  double length = 4.5;   // vehicle length, m
};

// IDM acceleration. `gap` is the bumper-to-bumper distance to the leader;
// returns nullopt when gap <= 0 (collision). Without a leader use
// idm_free_accel.
template <class T>
std::optional<T> idm_accel(const T& v, const T& v_lead, const T& gap, const IdmParams& p) {
  if (ad::value_of(gap) <= 0.0) return std::nullopt;
  const T dv = v - v_lead;
  const T s_star = p.s0 + v * p.T + v * dv / (2.0 * std::sqrt(p.a * p.b));
  const T ratio = s_star / gap;
  return p.a * (1.0 - ad::pow(v / p.v0, p.delta) - ratio * ratio);
}

template <class T>
T idm_free_accel(const T& v, const IdmParams& p) {
  return p.a * (1.0 - ad::pow(v / p.v0, p.delta));
}

struct TrafficParams {
  int lanes = 1;
  int vehicles_per_lane = 1;
  IdmParams idm;
  double v_target = 10.0;
  double dt = 0.1;
  double accel_scale = 3.0;    // m/s^2 per unit action
  double steer_scale = 1.0;    // lane units/s per unit action
  double far_threshold = 200.0;
  int episode_length = 1000;
  double obs_distance_scale = 50.0;
};

// Which termination rule fired, for diagnostics.
enum class TrafficEvent { kNone, kCollision, kOutOfLane, kTooFarAhead, kFellBehind };

// State layout: [x_pace, v_pace, y_pace, x_1, v_1, ..., x_N, v_N]. Lane
// centres sit at y = lane - (lanes - 1) / 2; human vehicle i is fixed in lane
// i / vehicles_per_lane.
class TrafficModel {
 public:
  explicit TrafficModel(TrafficParams params);

  const TrafficParams& params() const { return p_; }
  int num_humans() const { return p_.lanes * p_.vehicles_per_lane; }
  int state_dim() const { return 3 + 2 * num_humans(); }
  int obs_dim() const { return 2 + 3 * num_humans(); }
  int human_lane(int i) const { return i / p_.vehicles_per_lane; }
  double lane_center(int lane) const { return lane - 0.5 * (p_.lanes - 1); }
  // Nearest lane to a lateral position (clamped to the road).
  int lane_of(double y) const;
  bool out_of_lane(double y) const { return std::fabs(y) > 0.5 * (p_.lanes - 1) + 0.5; }

  std::vector<double> reset(std::uint64_t seed) const;

  // Lane membership is taken from the current state and carries no gradient.
  template <class T>
  Transition<T> step(std::span<const T> s, std::span<const T> a, TrafficEvent* event = nullptr) const;

  template <class T>
  std::vector<T> observe(std::span<const T> s) const;

 private:
  TrafficParams p_;
};

template <class T>
Transition<T> TrafficModel::step(std::span<const T> s, std::span<const T> a, TrafficEvent* event) const {
  const int n = num_humans();
  const int pace_lane = lane_of(ad::value_of(s[2]));
  std::vector<T> next(s.begin(), s.end());
  Transition<T> out;
  TrafficEvent ev = TrafficEvent::kNone;

  // Pace car: semi-implicit Euler on commanded acceleration and steering.
  const T v_pace = ad::max(s[1] + a[0] * (p_.accel_scale * p_.dt), T(0.0));
  next[1] = v_pace;
  next[0] = s[0] + v_pace * p_.dt;
  next[2] = s[2] + a[1] * (p_.steer_scale * p_.dt);

  for (int i = 0; i < n; ++i) {
    const int lane = human_lane(i);
    const T& xi = s[3 + 2 * i];
    const T& vi = s[4 + 2 * i];
    // Nearest vehicle ahead in the same lane.
    int leader = -2;  // -2 none, -1 pace car, otherwise human index
    double lead_x = 0.0;
    for (int j = 0; j < n; ++j) {
      if (j == i || human_lane(j) != lane) continue;
      const double xj = ad::value_of(s[3 + 2 * j]);
      if (xj > ad::value_of(xi) && (leader == -2 || xj < lead_x)) {
        leader = j;
        lead_x = xj;
      }
    }
    if (pace_lane == lane) {
      const double xp = ad::value_of(s[0]);
      if (xp > ad::value_of(xi) && (leader == -2 || xp < lead_x)) {
        leader = -1;
        lead_x = xp;
      }
    }
    T acc;
    if (leader == -2) {
      acc = idm_free_accel(vi, p_.idm);
    } else {
      const T& x_lead = leader == -1 ? s[0] : s[3 + 2 * leader];
      const T& v_lead = leader == -1 ? s[1] : s[4 + 2 * leader];
      const std::optional<T> res = idm_accel(vi, v_lead, x_lead - xi - p_.idm.length, p_.idm);
      if (!res) {
        ev = TrafficEvent::kCollision;
        acc = T(0.0);
      } else {
        acc = *res;
      }
    }
    const T v_next = ad::max(vi + acc * p_.dt, T(0.0));
    next[4 + 2 * i] = v_next;
    next[3 + 2 * i] = xi + v_next * p_.dt;
  }

  // Termination rules, evaluated on the next state.
  const double y_next = ad::value_of(next[2]);
  const double xp_next = ad::value_of(next[0]);
  if (ev == TrafficEvent::kNone && out_of_lane(y_next)) ev = TrafficEvent::kOutOfLane;
  if (ev == TrafficEvent::kNone) {
    const int new_lane = lane_of(y_next);
    for (int i = 0; i < n && ev == TrafficEvent::kNone; ++i) {
      const double xi = ad::value_of(next[3 + 2 * i]);
      // Ordering within each human lane, using the pre-step order.
      for (int j = 0; j < n; ++j) {
        if (j == i || human_lane(j) != human_lane(i)) continue;
        const double xj_before = ad::value_of(s[3 + 2 * j]);
        const double xi_before = ad::value_of(s[3 + 2 * i]);
        if (xj_before > xi_before && ad::value_of(next[3 + 2 * j]) - xi - p_.idm.length <= 0.0) {
          ev = TrafficEvent::kCollision;
        }
      }
      if (human_lane(i) == new_lane && std::fabs(xp_next - xi) < p_.idm.length) ev = TrafficEvent::kCollision;
    }
  }
  if (ev == TrafficEvent::kNone && n > 0) {
    double front = -1e300;
    double rear = 1e300;
    for (int i = 0; i < n; ++i) {
      const double xi = ad::value_of(next[3 + 2 * i]);
      front = std::max(front, xi);
      rear = std::min(rear, xi);
    }
    if (xp_next - front > p_.far_threshold) ev = TrafficEvent::kTooFarAhead;
    else if (xp_next < rear) ev = TrafficEvent::kFellBehind;
  }

  if (ev != TrafficEvent::kNone) {
    out.reward = T(-1.0);
    out.terminated = true;
  } else {
    T dev(0.0);
    for (int i = 0; i < n; ++i) {
      dev = dev + ad::min(ad::abs(next[4 + 2 * i] - p_.v_target) / p_.v_target, T(1.0));
    }
    out.reward = 1.0 - dev / static_cast<double>(n);
    out.terminated = false;
  }
  out.next_state = std::move(next);
  if (event != nullptr) *event = ev;
  return out;
}

template <class T>
std::vector<T> TrafficModel::observe(std::span<const T> s) const {
  std::vector<T> o;
  o.reserve(obs_dim());
  o.push_back(s[1] / p_.v_target - 1.0);
  o.push_back(s[2]);
  for (int i = 0; i < num_humans(); ++i) {
    o.push_back((s[0] - s[3 + 2 * i]) / p_.obs_distance_scale);
    o.push_back(s[4 + 2 * i] / p_.v_target - 1.0);
    o.push_back(lane_center(human_lane(i)) - s[2]);
  }
  return o;
}

// Layout of a traffic-* id (traffic-1 layout for any other id).
TrafficParams traffic_params(std::string_view id);
// As make_env(id), but traffic ids use `traffic` instead of their layout.
std::unique_ptr<Env> make_env(std::string_view id, const TrafficParams& traffic);

}  // namespace gippo::envs
