#include "gippo/cli/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <functional>

#include "gippo/policy.hpp"
#include "gippo/random.hpp"
#include "gippo/tape.hpp"

namespace gippo::cli {

namespace {

constexpr double kFdTolerance = 1e-5;
constexpr double kGaeTolerance = 1e-8;

double fd_step(double x) { return 1e-6 * std::max(1.0, std::fabs(x)); }

// Evaluates a scalar function on the tape at `x` and compares every partial
// against a central difference of the double version.
template <class F>
double compare_scalar(F&& f, std::vector<double> x) {
  ad::Tape tape;
  std::vector<ad::Var> vars;
  for (double v : x) vars.push_back(tape.variable(v));
  const ad::Var y = f(std::span<const ad::Var>(vars));
  tape.backward(y);
  double worst = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double h = fd_step(x[i]);
    std::vector<double> xp = x, xm = x;
    xp[i] += h;
    xm[i] -= h;
    const double fd = (f(std::span<const double>(xp)) - f(std::span<const double>(xm))) / (2.0 * h);
    worst = std::max(worst, rel_err(tape.adjoint(vars[i]), fd));
  }
  return worst;
}

struct Primitive {
  ad::Op op;
  int arity;
  // Sampler for valid, kink-free points.
  std::function<std::vector<double>(CounterRng&)> point;
};

template <class T>
T apply_primitive(ad::Op op, std::span<const T> x) {
  switch (op) {
    case ad::Op::kAdd: return x[0] + x[1];
    case ad::Op::kSub: return x[0] - x[1];
    case ad::Op::kMul: return x[0] * x[1];
    case ad::Op::kDiv: return x[0] / x[1];
    case ad::Op::kNeg: return -x[0];
    case ad::Op::kExp: return ad::exp(x[0]);
    case ad::Op::kLog: return ad::log(x[0]);
    case ad::Op::kSqrt: return ad::sqrt(x[0]);
    case ad::Op::kPow: return ad::pow(x[0], x[1]) + ad::pow(x[0], 2.5);
    case ad::Op::kTanh: return ad::tanh(x[0]);
    case ad::Op::kElu: return ad::elu(x[0]);
    case ad::Op::kCos: return ad::cos(x[0]);
    case ad::Op::kSin: return ad::sin(x[0]);
    case ad::Op::kMin: return ad::min(x[0], x[1]);
    case ad::Op::kMax: return ad::max(x[0], x[1]);
    case ad::Op::kClamp: return ad::clamp(x[0], -1.0, 1.0);
    case ad::Op::kAbs: return ad::abs(x[0]);
    default: return x[0];
  }
}

std::vector<double> away_from(CounterRng& rng, double lo, double hi, std::initializer_list<double> kinks) {
  for (;;) {
    const double v = rng.uniform(lo, hi);
    bool ok = true;
    for (double k : kinks) ok = ok && std::fabs(v - k) > 1e-3;
    if (ok) return {v};
  }
}

std::vector<Primitive> primitive_table() {
  auto pair = [](double lo, double hi) {
    return [lo, hi](CounterRng& r) {
      for (;;) {
        const double a = r.uniform(lo, hi), b = r.uniform(lo, hi);
        if (std::fabs(a - b) > 1e-3) return std::vector<double>{a, b};
      }
    };
  };
  auto one = [](double lo, double hi) { return [lo, hi](CounterRng& r) { return away_from(r, lo, hi, {}); }; };
  return {
      {ad::Op::kAdd, 2, pair(-3, 3)},
      {ad::Op::kSub, 2, pair(-3, 3)},
      {ad::Op::kMul, 2, pair(-3, 3)},
      {ad::Op::kDiv, 2, [](CounterRng& r) { return std::vector<double>{r.uniform(-3, 3), r.uniform(0.5, 3) * (r.uniform() < 0.5 ? -1 : 1)}; }},
      {ad::Op::kNeg, 1, one(-3, 3)},
      {ad::Op::kExp, 1, one(-3, 3)},
      {ad::Op::kLog, 1, one(0.1, 5)},
      {ad::Op::kSqrt, 1, one(0.1, 5)},
      {ad::Op::kPow, 2, [](CounterRng& r) { return std::vector<double>{r.uniform(0.2, 3), r.uniform(-2, 3)}; }},
      {ad::Op::kTanh, 1, one(-3, 3)},
      {ad::Op::kElu, 1, [](CounterRng& r) { return away_from(r, -3, 3, {0.0}); }},
      {ad::Op::kCos, 1, one(-4, 4)},
      {ad::Op::kSin, 1, one(-4, 4)},
      {ad::Op::kMin, 2, pair(-3, 3)},
      {ad::Op::kMax, 2, pair(-3, 3)},
      {ad::Op::kClamp, 1, [](CounterRng& r) { return away_from(r, -2, 2, {-1.0, 1.0}); }},
      {ad::Op::kAbs, 1, [](CounterRng& r) { return away_from(r, -3, 3, {0.0}); }},
  };
}

// A state reached by a few random steps from reset; the last non-terminal one.
std::vector<double> sample_state(const envs::Env& env, CounterRng& rng) {
  std::vector<double> s = env.reset(rng());
  const int steps = static_cast<int>(rng() % static_cast<std::uint64_t>(std::min(20, env.episode_length())));
  std::vector<double> a(env.act_dim());
  for (int i = 0; i < steps; ++i) {
    for (double& x : a) x = 0.5 * rng.normal();
    envs::Transition<double> tr = env.step(s, a);
    if (tr.terminated) break;
    s = std::move(tr.next_state);
  }
  return s;
}

std::vector<double> sample_action(const envs::Env& env, CounterRng& rng) {
  std::vector<double> a(env.act_dim());
  for (double& x : a) {
    do {
      x = rng.uniform(-1.2, 1.2);
    } while (std::fabs(std::fabs(x) - 1.0) < 1e-3);
  }
  return a;
}

}  // namespace

double rel_err(double a, double b) { return std::fabs(a - b) / std::max({1.0, std::fabs(a), std::fabs(b)}); }

std::vector<CheckResult> check_primitives(int samples, std::uint64_t seed) {
  std::vector<CheckResult> out;
  CounterRng rng(seed);
  for (const Primitive& p : primitive_table()) {
    CheckResult r{"primitive " + std::string(ad::op_name(p.op)), 0.0, 0, kFdTolerance};
    for (int i = 0; i < samples; ++i) {
      const std::vector<double> x = p.point(rng);
      r.max_rel_err = std::max(r.max_rel_err, compare_scalar(
                                                  [&](auto xs) {
                                                    using T = typename decltype(xs)::element_type;
                                                    return apply_primitive<std::remove_const_t<T>>(p.op, xs);
                                                  },
                                                  x));
      ++r.points;
    }
    out.push_back(r);
  }
  return out;
}

CheckResult check_env_dynamics(const envs::Env& env, int samples, std::uint64_t seed) {
  CheckResult r{"env dynamics " + std::string(env.id()), 0.0, 0, kFdTolerance};
  CounterRng rng(seed);
  const int ns = env.state_dim();
  const int na = env.act_dim();
  auto outputs = [&](std::span<const double> s, std::span<const double> a) {
    envs::Transition<double> tr = env.step(s, a);
    std::vector<double> y{tr.reward};
    y.insert(y.end(), tr.next_state.begin(), tr.next_state.end());
    const std::vector<double> o = env.observe(tr.next_state);
    y.insert(y.end(), o.begin(), o.end());
    return y;
  };
  for (int p = 0; p < samples; ++p) {
    const std::vector<double> s = sample_state(env, rng);
    const std::vector<double> a = sample_action(env, rng);
    ad::Tape tape;
    std::vector<ad::Var> sv, av;
    for (double x : s) sv.push_back(tape.variable(x));
    for (double x : a) av.push_back(tape.variable(x));
    envs::Transition<ad::Var> tr = env.step(std::span<const ad::Var>(sv), std::span<const ad::Var>(av));
    std::vector<ad::Var> y{tr.reward};
    y.insert(y.end(), tr.next_state.begin(), tr.next_state.end());
    const std::vector<ad::Var> o = env.observe(std::span<const ad::Var>(tr.next_state));
    y.insert(y.end(), o.begin(), o.end());

    // Central differences for every input column.
    std::vector<std::vector<double>> fd(ns + na);
    for (int j = 0; j < ns + na; ++j) {
      std::vector<double> sp = s, sm = s, ap = a, am = a;
      double h;
      if (j < ns) {
        h = fd_step(s[j]);
        sp[j] += h;
        sm[j] -= h;
      } else {
        h = fd_step(a[j - ns]);
        ap[j - ns] += h;
        am[j - ns] -= h;
      }
      const std::vector<double> yp = outputs(sp, ap), ym = outputs(sm, am);
      fd[j].resize(yp.size());
      for (std::size_t k = 0; k < yp.size(); ++k) fd[j][k] = (yp[k] - ym[k]) / (2.0 * h);
    }
    for (std::size_t k = 0; k < y.size(); ++k) {
      tape.backward(y[k]);
      for (int j = 0; j < ns + na; ++j) {
        const double g = tape.adjoint(j < ns ? sv[j] : av[j - ns]);
        r.max_rel_err = std::max(r.max_rel_err, rel_err(g, fd[j][k]));
      }
    }
    ++r.points;
  }
  return r;
}

CheckResult check_policy_log_prob(const envs::Env& env, int samples, std::uint64_t seed) {
  CheckResult r{"policy log-prob " + std::string(env.id()), 0.0, 0, kFdTolerance};
  CounterRng rng(seed);
  policy::PolicyConfig cfg;
  cfg.output_scale = 1.0;
  policy::GaussianPolicy pol(env.obs_dim(), env.act_dim(), cfg, rng());
  const nn::Vector theta = pol.params();
  const std::size_t np = theta.size();
  for (int p = 0; p < samples; ++p) {
    const std::vector<double> obs = env.observe(sample_state(env, rng));
    const policy::Sample smp = pol.sample(obs, rng);
    ad::Tape tape;
    const std::vector<ad::Var> pv = pol.record_params(tape);
    std::vector<ad::Var> ov(obs.begin(), obs.end());
    std::vector<ad::Var> act(smp.action.begin(), smp.action.end());
    const ad::Var lp = policy::log_prob(pol.record(tape, pv, ov), act);
    tape.backward(lp);
    policy::GaussianPolicy probe = pol;
    for (int k = 0; k < 32; ++k) {
      const std::size_t j = rng() % np;
      nn::Vector tp = theta, tm = theta;
      const double h = fd_step(theta[static_cast<Eigen::Index>(j)]);
      tp[static_cast<Eigen::Index>(j)] += h;
      tm[static_cast<Eigen::Index>(j)] -= h;
      probe.set_params(tp);
      const double fp = probe.log_prob(obs, smp.action);
      probe.set_params(tm);
      const double fm = probe.log_prob(obs, smp.action);
      r.max_rel_err = std::max(r.max_rel_err, rel_err(tape.adjoint(pv[j]), (fp - fm) / (2.0 * h)));
    }
    ++r.points;
  }
  return r;
}

estimation::RolloutBuffer random_rollout(const envs::Env& env, int num_envs, int horizon, std::uint64_t seed) {
  estimation::RolloutBuffer buf(num_envs, horizon, env.state_dim(), env.obs_dim(), env.act_dim());
  std::vector<double> eps(env.act_dim()), a(env.act_dim());
  for (int e = 0; e < num_envs; ++e) {
    CounterRng rng = CounterRng::stream(seed, static_cast<std::uint64_t>(e));
    std::vector<double> s = sample_state(env, rng);
    envs::EpisodeTracker tracker(env);
    for (int t = 0; t < horizon; ++t) {
      for (int k = 0; k < env.act_dim(); ++k) {
        eps[k] = rng.normal();
        a[k] = 0.5 * eps[k];
      }
      const std::vector<double> o = env.observe(s);
      envs::EnvStep<double> st = tracker.advance(env.step(s, a));
      buf.store(e, t, s, o, eps, a, st.reward, st.next_state, env.observe(st.next_state), st.done, st.done_reason);
      s = st.done ? env.reset(rng()) : std::move(st.next_state);
    }
  }
  return buf;
}

std::vector<double> adv_grads_oracle(const estimation::RolloutBuffer& buf, const estimation::Critic& critic,
                                     const envs::Env& env, double gamma, double lambda) {
  const int H = buf.horizon;
  const int A = buf.act_dim;
  std::vector<double> out(buf.size() * A, 0.0);
  auto value = [&](ad::Tape& tape, std::span<const ad::Var> s) {
    return critic.net().forward(tape, env.observe(s))[0];
  };
  for (int e = 0; e < buf.num_envs; ++e) {
    for (int t = 0; t < H; ++t) {
      ad::Tape tape;
      std::vector<ad::Var> actions;
      std::vector<ad::Var> deltas;
      std::vector<ad::Var> s;
      for (int k = 0; k < H; ++k) {
        const std::size_t i = buf.slot(e, k);
        if (k == 0 || buf.dones[buf.slot(e, k - 1)]) {
          const auto st = buf.state(i);
          s.assign(st.begin(), st.end());
        }
        std::vector<ad::Var> a;
        for (int j = 0; j < A; ++j) a.push_back(tape.variable(buf.actions[i * A + j]));
        actions.insert(actions.end(), a.begin(), a.end());
        const ad::Var v = value(tape, s);
        envs::Transition<ad::Var> tr = env.step(std::span<const ad::Var>(s), std::span<const ad::Var>(a));
        ad::Var d = tr.reward - v;
        if (envs::bootstraps(buf.dones[i] != 0, buf.done_reasons[i])) d = d + gamma * value(tape, tr.next_state);
        deltas.push_back(d);
        s = std::move(tr.next_state);
      }
      ad::Var adv(0.0);
      double w = 1.0;
      for (int k = t; k < H; ++k) {
        adv = adv + w * deltas[k];
        if (buf.dones[buf.slot(e, k)]) break;
        w *= gamma * lambda;
      }
      tape.backward(adv);
      for (int j = 0; j < A; ++j) out[buf.slot(e, t) * A + j] = tape.adjoint(actions[static_cast<std::size_t>(t) * A + j]);
    }
  }
  return out;
}

CheckResult check_gae_trick(const envs::Env& env, int rollouts, int horizon, std::uint64_t seed) {
  CheckResult r{"gae trick " + std::string(env.id()), 0.0, 0, kGaeTolerance};
  const estimation::RolloutBuffer buf = random_rollout(env, rollouts, horizon, seed);
  estimation::Critic critic(env.obs_dim(), {32, 32}, splitmix64(seed + 1));
  const double gamma = 0.99, lambda = 0.95;
  const std::vector<double> fast = estimation::compute_adv_grads(buf, critic, env, gamma, lambda);
  const std::vector<double> slow = adv_grads_oracle(buf, critic, env, gamma, lambda);
  for (std::size_t i = 0; i < fast.size(); ++i) r.max_rel_err = std::max(r.max_rel_err, rel_err(fast[i], slow[i]));
  r.points = buf.size();
  return r;
}

std::vector<CheckResult> run_gradcheck(const envs::Env& env, int samples, std::uint64_t seed) {
  std::vector<CheckResult> out = check_primitives(samples, seed);
  out.push_back(check_env_dynamics(env, samples, seed + 1));
  out.push_back(check_policy_log_prob(env, samples, seed + 2));
  out.push_back(check_gae_trick(env, 20, 8, seed + 3));
  return out;
}

}  // namespace gippo::cli
