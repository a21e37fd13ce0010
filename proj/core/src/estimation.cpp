#include "gippo/estimation.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>
#include <stdexcept>
#include <string>

#include "gippo/errors.hpp"

namespace gippo::estimation {

RolloutBuffer::RolloutBuffer(int num_envs_, int horizon_, int state_dim_, int obs_dim_, int act_dim_)
    : num_envs(num_envs_), horizon(horizon_), state_dim(state_dim_), obs_dim(obs_dim_), act_dim(act_dim_) {
  const std::size_t n = size();
  states.assign(n * state_dim, 0.0);
  obs.assign(n * obs_dim, 0.0);
  eps.assign(n * act_dim, 0.0);
  actions.assign(n * act_dim, 0.0);
  rewards.assign(n, 0.0);
  next_states.assign(n * state_dim, 0.0);
  next_obs.assign(n * obs_dim, 0.0);
  dones.assign(n, 0);
  done_reasons.assign(n, envs::DoneReason::kNone);
  filled.assign(n, 0);
  advantages.assign(n, 0.0);
  adv_grads.assign(n * act_dim, 0.0);
  logp_ref.assign(n, 0.0);
  logdet_ref.assign(n, 0.0);
}

namespace {

void require_complete(const RolloutBuffer& buf, const char* who) {
  if (!buf.complete()) throw std::logic_error(std::string(who) + ": rollout buffer has unfilled slots");
}

}  // namespace

bool RolloutBuffer::complete() const {
  return size() > 0 && std::all_of(filled.begin(), filled.end(), [](std::uint8_t f) { return f != 0; });
}

void RolloutBuffer::store(int env, int t, std::span<const double> s, std::span<const double> o,
                          std::span<const double> e, std::span<const double> a, double r,
                          std::span<const double> s_next, std::span<const double> o_next, bool done,
                          envs::DoneReason reason) {
  const std::size_t i = slot(env, t);
  std::copy(s.begin(), s.end(), states.begin() + i * state_dim);
  std::copy(o.begin(), o.end(), obs.begin() + i * obs_dim);
  std::copy(e.begin(), e.end(), eps.begin() + i * act_dim);
  std::copy(a.begin(), a.end(), actions.begin() + i * act_dim);
  rewards[i] = r;
  std::copy(s_next.begin(), s_next.end(), next_states.begin() + i * state_dim);
  std::copy(o_next.begin(), o_next.end(), next_obs.begin() + i * obs_dim);
  dones[i] = done ? 1 : 0;
  done_reasons[i] = reason;
  filled[i] = 1;
}

namespace {

nn::Matrix as_matrix(const std::vector<double>& data, int rows, std::size_t cols) {
  return Eigen::Map<const nn::Matrix>(data.data(), rows, static_cast<Eigen::Index>(cols));
}

}  // namespace

nn::Matrix RolloutBuffer::obs_matrix() const { return as_matrix(obs, obs_dim, size()); }
nn::Matrix RolloutBuffer::next_obs_matrix() const { return as_matrix(next_obs, obs_dim, size()); }
nn::Matrix RolloutBuffer::action_matrix() const { return as_matrix(actions, act_dim, size()); }
nn::Matrix RolloutBuffer::eps_matrix() const { return as_matrix(eps, act_dim, size()); }

Critic::Critic(int obs_dim, std::vector<int> hidden, std::uint64_t seed) {
  std::vector<int> sizes{obs_dim};
  sizes.insert(sizes.end(), hidden.begin(), hidden.end());
  sizes.push_back(1);
  net_ = nn::Mlp::init(sizes, seed);
}

double Critic::value(std::span<const double> obs) const {
  return net_.forward(Eigen::Map<const nn::Matrix>(obs.data(), static_cast<Eigen::Index>(obs.size()), 1))(0, 0);
}

nn::Vector Critic::values(const nn::Matrix& obs) const { return net_.forward(obs).row(0).transpose(); }

std::vector<double> gae_from_values(std::span<const double> rewards, std::span<const double> values,
                                    std::span<const double> next_values, std::span<const std::uint8_t> dones,
                                    std::span<const envs::DoneReason> reasons, int num_envs, int horizon,
                                    double gamma, double lambda) {
  std::vector<double> adv(rewards.size(), 0.0);
  for (int e = 0; e < num_envs; ++e) {
    double running = 0.0;
    for (int t = horizon - 1; t >= 0; --t) {
      const std::size_t i = static_cast<std::size_t>(e) * horizon + t;
      const double bootstrap = envs::bootstraps(dones[i] != 0, reasons[i]) ? 1.0 : 0.0;
      const double propagate = dones[i] ? 0.0 : 1.0;
      const double delta = rewards[i] + gamma * bootstrap * next_values[i] - values[i];
      running = delta + gamma * lambda * propagate * running;
      adv[i] = running;
    }
  }
  return adv;
}

std::vector<double> gae_from_values(std::span<const double> rewards, std::span<const double> values,
                                    std::span<const double> next_values, std::span<const std::uint8_t> dones,
                                    int num_envs, int horizon, double gamma, double lambda) {
  const std::vector<envs::DoneReason> terminal(dones.size(), envs::DoneReason::kTermination);
  return gae_from_values(rewards, values, next_values, dones, terminal, num_envs, horizon, gamma, lambda);
}

std::vector<double> compute_gae(const RolloutBuffer& buffer, const Critic& critic, double gamma, double lambda) {
  require_complete(buffer, "compute_gae");
  const nn::Vector v = critic.values(buffer.obs_matrix());
  const nn::Vector vn = critic.values(buffer.next_obs_matrix());
  return gae_from_values(buffer.rewards, std::span<const double>(v.data(), v.size()),
                         std::span<const double>(vn.data(), vn.size()), buffer.dones, buffer.done_reasons,
                         buffer.num_envs, buffer.horizon, gamma, lambda);
}

namespace {

std::vector<ad::Var> constants(std::span<const double> xs) { return {xs.begin(), xs.end()}; }

ad::Var critic_value(ad::Tape& tape, const Critic& critic, const envs::Env& env, std::span<const ad::Var> state) {
  const std::vector<ad::Var> o = env.observe(state);
  return critic.net().forward(tape, o)[0];
}

void check_replay(double replayed, double stored, std::size_t slot) {
  if (std::fabs(replayed - stored) > 1e-9 * std::max(1.0, std::fabs(stored))) {
    std::ostringstream msg;
    msg << "tape replay of slot " << slot << " gave reward " << replayed << ", buffer holds " << stored;
    throw std::logic_error(msg.str());
  }
}

// One window row recorded on `tape`; returns the advantage-root of each
// episode segment and fills `action_vars` (act_dim per timestep) plus the
// segment start of every timestep.
struct RowRecording {
  std::vector<ad::Var> actions;
  std::vector<int> segment_start;
  std::vector<std::pair<ad::Var, double>> roots;
  std::vector<ad::Var> deltas;
};

RowRecording record_row(ad::Tape& tape, const RolloutBuffer& buf, const Critic& critic, const envs::Env& env,
                        int e, double gamma, double lambda) {
  RowRecording rec;
  const int H = buf.horizon;
  const int A = buf.act_dim;
  rec.actions.reserve(static_cast<std::size_t>(H) * A);
  rec.segment_start.resize(H);
  std::vector<ad::Var> s = constants(buf.state(buf.slot(e, 0)));
  ad::Var v_t = critic_value(tape, critic, env, s);
  ad::Var seg(0.0);
  double weight = 1.0;
  int start = 0;
  for (int t = 0; t < H; ++t) {
    const std::size_t i = buf.slot(e, t);
    std::vector<ad::Var> a;
    for (int k = 0; k < A; ++k) {
      a.push_back(tape.variable(buf.actions[i * A + k]));
      rec.actions.push_back(a.back());
    }
    envs::Transition<ad::Var> tr = env.step(std::span<const ad::Var>(s), std::span<const ad::Var>(a));
    check_replay(tr.reward.value(), buf.rewards[i], i);
    const bool done = buf.dones[i] != 0;
    ad::Var delta = tr.reward - v_t;
    ad::Var v_next(0.0);
    if (envs::bootstraps(done, buf.done_reasons[i])) {
      v_next = critic_value(tape, critic, env, tr.next_state);
      delta = delta + gamma * v_next;
    }
    rec.deltas.push_back(delta);
    rec.segment_start[t] = start;
    seg = seg + weight * delta;
    weight *= gamma * lambda;
    if (done || t + 1 == H) {
      rec.roots.emplace_back(seg, 1.0);
      seg = ad::Var(0.0);
      weight = 1.0;
      start = t + 1;
    }
    if (t + 1 < H) {
      if (done) {
        s = constants(buf.state(buf.slot(e, t + 1)));
        v_t = critic_value(tape, critic, env, s);
      } else {
        s = std::move(tr.next_state);
        v_t = v_next;
      }
    }
  }
  return rec;
}

}  // namespace

std::vector<double> compute_adv_grads(const RolloutBuffer& buf, const Critic& critic, const envs::Env& env,
                                      double gamma, double lambda) {
  require_complete(buf, "compute_adv_grads");
  const int H = buf.horizon;
  const int A = buf.act_dim;
  std::vector<double> grads(buf.size() * A, 0.0);
  const double gl = gamma * lambda;
  ad::Tape tape;
  for (int e = 0; e < buf.num_envs; ++e) {
    tape.clear();
    RowRecording rec = record_row(tape, buf, critic, env, e, gamma, lambda);
    if (gl > 0.0) {
      tape.backward(rec.roots);
      const double log_gl = std::log(gl);
      for (int t = 0; t < H; ++t) {
        const double scale = std::exp(-(t - rec.segment_start[t]) * log_gl);
        for (int k = 0; k < A; ++k) {
          grads[buf.slot(e, t) * A + k] = scale * tape.adjoint(rec.actions[static_cast<std::size_t>(t) * A + k]);
        }
      }
    } else {
      // gamma * lambda = 0: A_t = delta_t, which also depends on a_{t-1}
      // through V(s_t), so each timestep needs its own sweep.
      for (int t = 0; t < H; ++t) {
        tape.backward(rec.deltas[t]);
        for (int k = 0; k < A; ++k) {
          grads[buf.slot(e, t) * A + k] = tape.adjoint(rec.actions[static_cast<std::size_t>(t) * A + k]);
        }
      }
    }
  }
  for (std::size_t i = 0; i < grads.size(); ++i) {
    if (!std::isfinite(grads[i])) {
      std::ostringstream msg;
      msg << "non-finite advantage gradient at slot " << i / A << " (env " << (i / A) / H << ", t " << (i / A) % H
          << ", component " << i % A << ")";
      throw NumericError(msg.str());
    }
  }
  return grads;
}

std::vector<std::size_t> shuffled_indices(std::size_t n, CounterRng& rng) {
  std::vector<std::size_t> idx(n);
  for (std::size_t i = 0; i < n; ++i) idx[i] = i;
  for (std::size_t i = n; i > 1; --i) {
    const std::size_t j = rng() % i;
    std::swap(idx[i - 1], idx[j]);
  }
  return idx;
}

std::vector<double> fit_critic(Critic& critic, nn::Adam& optimizer, const nn::Matrix& obs,
                               std::span<const double> targets, const CriticFitConfig& config, CounterRng& rng) {
  const Eigen::Index n = obs.cols();
  if (static_cast<std::size_t>(n) != targets.size()) throw std::invalid_argument("fit_critic: target count mismatch");
  const Eigen::Map<const nn::Vector> y(targets.data(), n);
  auto full_loss = [&] { return (critic.values(obs) - y).squaredNorm() / static_cast<double>(n); };

  std::vector<double> trace{full_loss()};
  const int batches = std::max(1, std::min<int>(config.minibatches, static_cast<int>(n)));
  nn::Vector params = critic.net().flatten();
  nn::Mlp::Cache cache;
  for (int it = 0; it < config.iterations; ++it) {
    const std::vector<std::size_t> order = shuffled_indices(static_cast<std::size_t>(n), rng);
    for (int b = 0; b < batches; ++b) {
      const std::size_t lo = static_cast<std::size_t>(n) * b / batches;
      const std::size_t hi = static_cast<std::size_t>(n) * (b + 1) / batches;
      const Eigen::Index m = static_cast<Eigen::Index>(hi - lo);
      if (m == 0) continue;
      nn::Matrix xb(obs.rows(), m);
      nn::Vector yb(m);
      for (Eigen::Index k = 0; k < m; ++k) {
        xb.col(k) = obs.col(static_cast<Eigen::Index>(order[lo + k]));
        yb[k] = y[static_cast<Eigen::Index>(order[lo + k])];
      }
      const nn::Matrix pred = critic.net().forward(xb, cache);
      const nn::Matrix d_out = (2.0 / static_cast<double>(m)) * (pred.row(0).transpose() - yb).transpose();
      nn::Vector grad = critic.net().backward(cache, d_out);
      nn::clip_grad_norm(grad, config.max_grad_norm);
      optimizer.step(params, grad);
      critic.net().unflatten(std::span<const double>(params.data(), params.size()));
    }
    trace.push_back(full_loss());
  }
  return trace;
}

}  // namespace gippo::estimation
