#include "gippo/envs.hpp"

#include <algorithm>
#include <stdexcept>

#include "gippo/random.hpp"

namespace gippo::envs {

namespace {

template <class Derived>
class EnvBase : public Env {
 public:
  Transition<double> step(std::span<const double> s, std::span<const double> a) const override {
    check(s.size(), a.size());
    return self().template transition<double>(s, a);
  }
  Transition<ad::Var> step(std::span<const ad::Var> s, std::span<const ad::Var> a) const override {
    check(s.size(), a.size());
    return self().template transition<ad::Var>(s, a);
  }
  std::vector<double> observe(std::span<const double> s) const override {
    return self().template observation<double>(s);
  }
  std::vector<ad::Var> observe(std::span<const ad::Var> s) const override {
    return self().template observation<ad::Var>(s);
  }

 private:
  const Derived& self() const { return static_cast<const Derived&>(*this); }
  void check(std::size_t s, std::size_t a) const {
    if (static_cast<int>(s) != state_dim() || static_cast<int>(a) != act_dim()) {
      throw std::invalid_argument("step: state/action dimension mismatch for env '" + std::string(id()) + "'");
    }
  }
};

enum class TestFunction { kDeJong, kAckley };

// One-step episodes, constant observation [0].
class FunctionEnv final : public EnvBase<FunctionEnv> {
 public:
  FunctionEnv(std::string id, TestFunction fn, int dim) : id_(std::move(id)), fn_(fn), dim_(dim) {}

  std::string_view id() const override { return id_; }
  int state_dim() const override { return 1; }
  int obs_dim() const override { return 1; }
  int act_dim() const override { return dim_; }
  int episode_length() const override { return 1; }
  bool horizon_is_terminal() const override { return true; }
  std::vector<double> reset(std::uint64_t) const override { return {0.0}; }

  template <class T>
  Transition<T> transition(std::span<const T> s, std::span<const T> a) const {
    Transition<T> out;
    out.reward = fn_ == TestFunction::kDeJong ? dejong_reward<T>(a) : ackley_reward<T>(a);
    out.next_state = {s[0]};
    return out;
  }

  template <class T>
  std::vector<T> observation(std::span<const T> s) const {
    return {s[0]};
  }

 private:
  std::string id_;
  TestFunction fn_;
  int dim_;
};

class CartPoleEnv final : public EnvBase<CartPoleEnv> {
 public:
  std::string_view id() const override { return "cartpole"; }
  int state_dim() const override { return 4; }
  int obs_dim() const override { return 5; }
  int act_dim() const override { return 1; }
  int episode_length() const override { return params_.episode_length; }

  // Hanging down with a small perturbation.
  std::vector<double> reset(std::uint64_t seed) const override {
    CounterRng rng(seed);
    return {rng.uniform(-0.1, 0.1), rng.uniform(-0.1, 0.1), std::numbers::pi + rng.uniform(-0.1, 0.1),
            rng.uniform(-0.1, 0.1)};
  }

  template <class T>
  Transition<T> transition(std::span<const T> s, std::span<const T> a) const {
    return cartpole_step<T>(params_, s, a);
  }

  template <class T>
  std::vector<T> observation(std::span<const T> s) const {
    return {s[0], s[1], ad::cos(s[2]), ad::sin(s[2]), s[3]};
  }

 private:
  CartPoleParams params_;
};

class TrafficEnv final : public EnvBase<TrafficEnv> {
 public:
  TrafficEnv(std::string id, TrafficParams p) : id_(std::move(id)), model_(std::move(p)) {}

  std::string_view id() const override { return id_; }
  int state_dim() const override { return model_.state_dim(); }
  int obs_dim() const override { return model_.obs_dim(); }
  int act_dim() const override { return 2; }
  int episode_length() const override { return model_.params().episode_length; }
  std::vector<double> reset(std::uint64_t seed) const override { return model_.reset(seed); }

  template <class T>
  Transition<T> transition(std::span<const T> s, std::span<const T> a) const {
    return model_.step<T>(s, a);
  }

  template <class T>
  std::vector<T> observation(std::span<const T> s) const {
    return model_.observe<T>(s);
  }

 private:
  std::string id_;
  TrafficModel model_;
};

TrafficParams traffic_layout(int lanes, int per_lane) {
  TrafficParams p;
  p.lanes = lanes;
  p.vehicles_per_lane = per_lane;
  return p;
}

}  // namespace

TrafficModel::TrafficModel(TrafficParams params) : p_(std::move(params)) {
  if (p_.lanes <= 0 || p_.vehicles_per_lane <= 0) throw std::invalid_argument("traffic needs lanes and vehicles");
}

int TrafficModel::lane_of(double y) const {
  const int lane = static_cast<int>(std::lround(y + 0.5 * (p_.lanes - 1)));
  return std::clamp(lane, 0, p_.lanes - 1);
}

std::vector<double> TrafficModel::reset(std::uint64_t seed) const {
  CounterRng rng(seed);
  const double spacing = p_.idm.s0 + p_.v_target * p_.idm.T + p_.idm.length;
  std::vector<double> s(state_dim());
  const int start_lane = static_cast<int>(rng() % static_cast<std::uint64_t>(p_.lanes));
  s[0] = 0.0;
  s[1] = p_.v_target + rng.uniform(-1.0, 1.0);
  s[2] = lane_center(start_lane) + rng.uniform(-0.1, 0.1);
  for (int i = 0; i < num_humans(); ++i) {
    const int rank = i % p_.vehicles_per_lane;
    s[3 + 2 * i] = -spacing * (rank + 1) + rng.uniform(-1.0, 1.0);
    s[4 + 2 * i] = p_.v_target + rng.uniform(-1.0, 1.0);
  }
  return s;
}

std::unique_ptr<Env> make_env(std::string_view id) {
  if (id == "dejong1") return std::make_unique<FunctionEnv>("dejong1", TestFunction::kDeJong, 1);
  if (id == "dejong64") return std::make_unique<FunctionEnv>("dejong64", TestFunction::kDeJong, 64);
  if (id == "ackley1") return std::make_unique<FunctionEnv>("ackley1", TestFunction::kAckley, 1);
  if (id == "ackley64") return std::make_unique<FunctionEnv>("ackley64", TestFunction::kAckley, 64);
  if (id == "cartpole") return std::make_unique<CartPoleEnv>();
  if (id == "traffic-1") return std::make_unique<TrafficEnv>("traffic-1", traffic_layout(1, 1));
  if (id == "traffic-2") return std::make_unique<TrafficEnv>("traffic-2", traffic_layout(2, 2));
  if (id == "traffic-4") return std::make_unique<TrafficEnv>("traffic-4", traffic_layout(4, 4));
  if (id == "traffic-10") return std::make_unique<TrafficEnv>("traffic-10", traffic_layout(10, 1));
  throw std::invalid_argument("unknown environment '" + std::string(id) + "'");
}

TrafficParams traffic_params(std::string_view id) {
  if (id == "traffic-2") return traffic_layout(2, 2);
  if (id == "traffic-4") return traffic_layout(4, 4);
  if (id == "traffic-10") return traffic_layout(10, 1);
  return traffic_layout(1, 1);
}

std::unique_ptr<Env> make_env(std::string_view id, const TrafficParams& traffic) {
  if (id.rfind("traffic-", 0) == 0) {
    make_env(id);  // validates the id
    return std::make_unique<TrafficEnv>(std::string(id), traffic);
  }
  return make_env(id);
}

std::vector<std::string> env_ids() {
  return {"dejong1", "dejong64", "ackley1", "ackley64", "cartpole", "traffic-1", "traffic-2", "traffic-4", "traffic-10"};
}

}  // namespace gippo::envs
