#include "gippo/algos.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <numeric>
#include <sstream>
#include <stdexcept>

namespace gippo::algos {

std::string algo_name(Algo a) {
  switch (a) {
    case Algo::kLr: return "lr";
    case Algo::kRp: return "rp";
    case Algo::kPpo: return "ppo";
    case Algo::kLrRp: return "lrrp";
    case Algo::kGiPpo: return "gippo";
  }
  return "?";
}

Algo algo_from_name(const std::string& name) {
  for (Algo a : {Algo::kLr, Algo::kRp, Algo::kPpo, Algo::kLrRp, Algo::kGiPpo}) {
    if (algo_name(a) == name) return a;
  }
  throw std::invalid_argument("unknown algorithm '" + name + "'");
}

std::vector<double> normalize_advantages(std::span<const double> adv) {
  std::vector<double> out(adv.begin(), adv.end());
  if (out.empty()) return out;
  const double n = static_cast<double>(out.size());
  const double mean = std::accumulate(out.begin(), out.end(), 0.0) / n;
  double var = 0.0;
  for (double a : out) var += (a - mean) * (a - mean);
  const double sd = std::max(std::sqrt(var / n), 1e-8);
  for (double& a : out) a = (a - mean) / sd;
  return out;
}

std::vector<double> buffer_log_prob(const GaussianPolicy& policy, const RolloutBuffer& buffer) {
  const GaussianPolicy::Batch b = policy.evaluate(buffer.obs_matrix());
  const nn::Vector lp = GaussianPolicy::log_prob(b, buffer.action_matrix());
  return {lp.data(), lp.data() + lp.size()};
}

std::vector<double> buffer_logdet(const GaussianPolicy& policy, const RolloutBuffer& buffer) {
  const GaussianPolicy::Batch b = policy.evaluate(buffer.obs_matrix());
  const nn::Vector s = b.logstd.colwise().sum().transpose();
  return {s.data(), s.data() + s.size()};
}

namespace {

nn::Matrix select_cols(const nn::Matrix& m, std::span<const std::size_t> cols) {
  nn::Matrix out(m.rows(), static_cast<Eigen::Index>(cols.size()));
  for (std::size_t k = 0; k < cols.size(); ++k) out.col(static_cast<Eigen::Index>(k)) = m.col(static_cast<Eigen::Index>(cols[k]));
  return out;
}

std::vector<std::size_t> slots_of_rows(const RolloutBuffer& buffer, std::span<const int> rows) {
  std::vector<std::size_t> out;
  for (int e : rows) {
    for (int t = 0; t < buffer.horizon; ++t) out.push_back(buffer.slot(e, t));
  }
  return out;
}

// Policy gradient of sum_i (d_mean_i . mean_i + d_logstd_i . logstd_i) over
// the selected columns.
nn::Vector policy_grad(const GaussianPolicy& policy, const nn::Matrix& obs, const nn::Matrix& d_mean,
                       const nn::Matrix& d_logstd, std::span<const std::size_t> cols) {
  const GaussianPolicy::Batch b = policy.evaluate(select_cols(obs, cols));
  return policy.backward(b, select_cols(d_mean, cols), select_cols(d_logstd, cols));
}

void check_finite(const nn::Vector& g, const char* what) {
  if (!g.allFinite()) throw NumericError(std::string("non-finite ") + what);
}

}  // namespace

std::vector<std::vector<int>> row_groups(int num_envs, int groups) {
  groups = std::max(1, std::min(groups, num_envs));
  std::vector<std::vector<int>> out(groups);
  for (int g = 0; g < groups; ++g) {
    const int lo = num_envs * g / groups;
    const int hi = num_envs * (g + 1) / groups;
    for (int e = lo; e < hi; ++e) out[g].push_back(e);
  }
  return out;
}

GradEstimate lr_gradient(const RolloutBuffer& buffer, const GaussianPolicy& policy, bool normalize,
                         int sample_groups) {
  const std::size_t n = buffer.size();
  const std::vector<double> adv = normalize ? normalize_advantages(buffer.advantages) : buffer.advantages;
  const nn::Matrix obs = buffer.obs_matrix();
  const nn::Matrix act = buffer.action_matrix();
  const GaussianPolicy::Batch b = policy.evaluate(obs);
  const nn::Matrix inv_var = (-2.0 * b.logstd).array().exp().matrix();
  const nn::Matrix diff = act - b.mean;
  // Per-sample score terms weighted by A_i (not yet divided by a count).
  nn::Matrix d_mean = diff.cwiseProduct(inv_var);
  nn::Matrix d_logstd = (diff.cwiseProduct(diff).cwiseProduct(inv_var).array() - 1.0).matrix();
  const nn::Vector lp = GaussianPolicy::log_prob(b, act);
  GradEstimate out;
  for (std::size_t i = 0; i < n; ++i) {
    const auto c = static_cast<Eigen::Index>(i);
    d_mean.col(c) *= adv[i];
    d_logstd.col(c) *= adv[i];
    out.objective += adv[i] * lp[c] / static_cast<double>(n);
  }
  out.grad = policy.backward(b, d_mean / static_cast<double>(n), d_logstd / static_cast<double>(n));
  check_finite(out.grad, "LR gradient");
  out.sample_count = n;
  if (sample_groups > 0) {
    for (const auto& rows : row_groups(buffer.num_envs, sample_groups)) {
      const std::vector<std::size_t> cols = slots_of_rows(buffer, rows);
      const double w = 1.0 / static_cast<double>(cols.size());
      out.samples.push_back(policy_grad(policy, obs, d_mean * w, d_logstd * w, cols));
    }
  }
  return out;
}

GradEstimate rp_gradient(const RolloutBuffer& buffer, const GaussianPolicy& policy, const Critic& critic,
                         const envs::Env& env, double gamma, int sample_groups) {
  const int H = buffer.horizon;
  const int A = buffer.act_dim;
  const std::size_t n = buffer.size();
  nn::Matrix d_mean = nn::Matrix::Zero(A, static_cast<Eigen::Index>(n));
  nn::Matrix d_logstd = nn::Matrix::Zero(A, static_cast<Eigen::Index>(n));
  double total = 0.0;
  ad::Tape tape;
  for (int e = 0; e < buffer.num_envs; ++e) {
    tape.clear();
    // Zero-valued leaves added to every policy output expose the total
    // derivative of the window return w.r.t. that output.
    std::vector<ad::Var> mean_taps, logstd_taps;
    std::vector<double> eps_row;
    std::vector<ad::Var> s(buffer.state(buffer.slot(e, 0)).begin(), buffer.state(buffer.slot(e, 0)).end());
    ad::Var ret(0.0);
    double discount = 1.0;
    for (int t = 0; t < H; ++t) {
      const std::size_t i = buffer.slot(e, t);
      const std::vector<ad::Var> o = env.observe(std::span<const ad::Var>(s));
      const GaussianPolicy::TapeOutput out = policy.record(tape, o);
      std::vector<ad::Var> a(A);
      for (int k = 0; k < A; ++k) {
        const ad::Var m = out.mean[k] + tape.variable(0.0);
        const ad::Var l = out.logstd[k] + tape.variable(0.0);
        mean_taps.push_back(m);
        logstd_taps.push_back(l);
        a[k] = m + ad::exp(l) * buffer.eps[i * A + k];
      }
      envs::Transition<ad::Var> tr = env.step(std::span<const ad::Var>(s), std::span<const ad::Var>(a));
      ret = ret + discount * tr.reward;
      discount *= gamma;
      const bool done = buffer.dones[i] != 0;
      if (done) {
        if (envs::bootstraps(done, buffer.done_reasons[i])) {
          const std::vector<ad::Var> on = env.observe(std::span<const ad::Var>(tr.next_state));
          ret = ret + discount * critic.net().forward(tape, on)[0];
        }
        discount = 1.0;
        if (t + 1 < H) {
          const auto next = buffer.state(buffer.slot(e, t + 1));
          s.assign(next.begin(), next.end());
        }
      } else {
        s = std::move(tr.next_state);
        if (t + 1 == H) {
          const std::vector<ad::Var> on = env.observe(std::span<const ad::Var>(s));
          ret = ret + discount * critic.net().forward(tape, on)[0];
        }
      }
    }
    total += ret.value();
    tape.backward(ret);
    // mean_taps[k] is the node m itself; its adjoint equals the tap leaf's.
    for (int t = 0; t < H; ++t) {
      const auto c = static_cast<Eigen::Index>(buffer.slot(e, t));
      for (int k = 0; k < A; ++k) {
        d_mean(k, c) = tape.adjoint(mean_taps[static_cast<std::size_t>(t) * A + k]);
        d_logstd(k, c) = tape.adjoint(logstd_taps[static_cast<std::size_t>(t) * A + k]);
      }
    }
  }
  if (!d_mean.allFinite() || !d_logstd.allFinite()) {
    for (Eigen::Index c = 0; c < d_mean.cols(); ++c) {
      if (!d_mean.col(c).allFinite() || !d_logstd.col(c).allFinite()) {
        std::ostringstream msg;
        msg << "non-finite RP gradient in window of env " << c / H;
        throw NumericError(msg.str());
      }
    }
  }
  const nn::Matrix obs = buffer.obs_matrix();
  const GaussianPolicy::Batch b = policy.evaluate(obs);
  GradEstimate out;
  out.grad = policy.backward(b, d_mean / static_cast<double>(n), d_logstd / static_cast<double>(n));
  check_finite(out.grad, "RP gradient");
  out.objective = total / static_cast<double>(n);
  out.sample_count = n;
  if (sample_groups > 0) {
    for (const auto& rows : row_groups(buffer.num_envs, sample_groups)) {
      const std::vector<std::size_t> cols = slots_of_rows(buffer, rows);
      const double w = 1.0 / static_cast<double>(cols.size());
      out.samples.push_back(policy_grad(policy, obs, d_mean * w, d_logstd * w, cols));
    }
  }
  return out;
}

double trace_covariance(const std::vector<nn::Vector>& samples, std::size_t truncate) {
  if (samples.size() < 2) throw std::invalid_argument("trace_covariance needs at least two samples");
  const Eigen::Index d = std::min<Eigen::Index>(static_cast<Eigen::Index>(truncate), samples.front().size());
  nn::Vector mean = nn::Vector::Zero(d);
  for (const auto& s : samples) mean += s.head(d);
  mean /= static_cast<double>(samples.size());
  double tr = 0.0;
  for (const auto& s : samples) tr += (s.head(d) - mean).squaredNorm();
  return tr / static_cast<double>(samples.size() - 1);
}

double kappa_lr(double var_lr, double var_rp) {
  const double total = var_lr + var_rp;
  if (total <= 0.0) return 0.5;
  return var_rp / total;
}

GradEstimate lrrp_gradient(const RolloutBuffer& buffer, const GaussianPolicy& policy, const Critic& critic,
                           const envs::Env& env, double gamma, const LrRpConfig& config) {
  const GradEstimate lr = lr_gradient(buffer, policy, true, config.samples);
  const GradEstimate rp = rp_gradient(buffer, policy, critic, env, gamma, config.samples);
  GradEstimate out;
  out.var_lr = trace_covariance(lr.samples, config.truncate);
  out.var_rp = trace_covariance(rp.samples, config.truncate);
  out.kappa_lr = kappa_lr(out.var_lr, out.var_rp);
  out.grad = out.kappa_lr * lr.grad + (1.0 - out.kappa_lr) * rp.grad;
  out.objective = out.kappa_lr * lr.objective + (1.0 - out.kappa_lr) * rp.objective;
  out.sample_count = lr.samples.size();
  out.samples = lr.samples;
  out.samples.insert(out.samples.end(), rp.samples.begin(), rp.samples.end());
  return out;
}

double clipped_surrogate(double ratio, double adv, double clip) {
  return std::min(ratio * adv, std::clamp(ratio, 1.0 - clip, 1.0 + clip) * adv);
}

UpdateStats ppo_update(GaussianPolicy& policy, nn::Adam& optimizer, const RolloutBuffer& buffer,
                       std::span<const double> ref_logp, std::span<const double> adv, const PpoConfig& config,
                       CounterRng& rng) {
  const std::size_t n = buffer.size();
  if (ref_logp.size() != n || adv.size() != n) throw std::invalid_argument("ppo_update: size mismatch");
  const nn::Matrix obs = buffer.obs_matrix();
  const nn::Matrix act = buffer.action_matrix();
  const std::size_t mb = std::max<std::size_t>(1, std::min<std::size_t>(config.minibatch, n));
  const std::size_t batches = (n + mb - 1) / mb;
  nn::Vector params = policy.params();
  UpdateStats stats;
  for (int epoch = 0; epoch < config.epochs; ++epoch) {
    const std::vector<std::size_t> order = estimation::shuffled_indices(n, rng);
    double epoch_loss = 0.0;
    for (std::size_t bi = 0; bi < batches; ++bi) {
      const std::size_t lo = n * bi / batches;
      const std::size_t hi = n * (bi + 1) / batches;
      const std::span<const std::size_t> cols(order.data() + lo, hi - lo);
      const double m = static_cast<double>(cols.size());
      const nn::Matrix a = select_cols(act, cols);
      const GaussianPolicy::Batch b = policy.evaluate(select_cols(obs, cols));
      const nn::Vector lp = GaussianPolicy::log_prob(b, a);
      const nn::Matrix inv_var = (-2.0 * b.logstd).array().exp().matrix();
      const nn::Matrix diff = a - b.mean;
      nn::Matrix d_mean = diff.cwiseProduct(inv_var);
      nn::Matrix d_logstd = (diff.cwiseProduct(diff).cwiseProduct(inv_var).array() - 1.0).matrix();
      for (std::size_t k = 0; k < cols.size(); ++k) {
        const auto c = static_cast<Eigen::Index>(k);
        const double A = adv[cols[k]];
        const double r = std::exp(lp[c] - ref_logp[cols[k]]);
        epoch_loss -= clipped_surrogate(r, A, config.clip) / static_cast<double>(n);
        // d loss / d logp; zero when the clipped branch is the active minimum.
        const double coef = r * A <= std::clamp(r, 1.0 - config.clip, 1.0 + config.clip) * A ? -A * r / m : 0.0;
        d_mean.col(c) *= coef;
        d_logstd.col(c) *= coef;
      }
      nn::Vector grad = policy.backward(b, d_mean, d_logstd);
      nn::clip_grad_norm(grad, config.max_grad_norm);
      optimizer.step(params, grad);
      policy.set_params(params);
    }
    stats.loss = epoch_loss;
  }
  const std::vector<double> lp_new = buffer_log_prob(policy, buffer);
  double kl = 0.0;
  for (std::size_t i = 0; i < n; ++i) kl += ref_logp[i] - lp_new[i];
  stats.kl = n > 0 ? kl / static_cast<double>(n) : 0.0;
  return stats;
}

double mixture_log_density(double x, double y) {
  const double m = std::max(x, y);
  return m + std::log(0.5 * (std::exp(x - m) + std::exp(y - m)));
}

std::vector<double> mixture_log_density(std::span<const double> x, std::span<const double> y) {
  std::vector<double> out(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = mixture_log_density(x[i], y[i]);
  return out;
}

UpdateStats gippo_ppo_update(GaussianPolicy& policy, nn::Adam& optimizer, const RolloutBuffer& buffer,
                             std::span<const double> ref_logp, std::span<const double> alpha_logp,
                             std::span<const double> adv, const PpoConfig& config, CounterRng& rng) {
  const std::vector<double> mix = mixture_log_density(ref_logp, alpha_logp);
  return ppo_update(policy, optimizer, buffer, mix, adv, config, rng);
}

std::vector<double> alpha_targets(std::span<const double> actions, std::span<const double> adv_grads, double alpha,
                                  double clamp_abs) {
  std::vector<double> out(actions.size());
  for (std::size_t i = 0; i < actions.size(); ++i) {
    out[i] = actions[i] + alpha * std::clamp(adv_grads[i], -clamp_abs, clamp_abs);
  }
  return out;
}

double alpha_loss(const GaussianPolicy& policy, const nn::Matrix& obs, const nn::Matrix& eps,
                  const nn::Matrix& targets) {
  const GaussianPolicy::Batch b = policy.evaluate(obs);
  const nn::Matrix g = b.mean + b.logstd.array().exp().matrix().cwiseProduct(eps);
  return (g - targets).squaredNorm() / static_cast<double>(obs.cols());
}

nn::Vector alpha_loss_grad(const GaussianPolicy& policy, const nn::Matrix& obs, const nn::Matrix& eps,
                           const nn::Matrix& targets) {
  const GaussianPolicy::Batch b = policy.evaluate(obs);
  const nn::Matrix sigma_eps = b.logstd.array().exp().matrix().cwiseProduct(eps);
  const nn::Matrix resid = (b.mean + sigma_eps - targets) * (2.0 / static_cast<double>(obs.cols()));
  return policy.backward(b, resid, resid.cwiseProduct(sigma_eps));
}

std::vector<double> approximate_alpha_policy(GaussianPolicy& policy, const RolloutBuffer& buffer,
                                             std::span<const double> targets, const AlphaFitConfig& config,
                                             CounterRng& rng) {
  const std::size_t n = buffer.size();
  if (targets.size() != n * static_cast<std::size_t>(buffer.act_dim)) {
    throw std::invalid_argument("approximate_alpha_policy: target size mismatch");
  }
  const nn::Matrix obs = buffer.obs_matrix();
  const nn::Matrix eps = buffer.eps_matrix();
  const nn::Matrix tgt = Eigen::Map<const nn::Matrix>(targets.data(), buffer.act_dim, static_cast<Eigen::Index>(n));
  nn::Adam opt(policy.num_params(), nn::AdamConfig{.lr = config.lr});
  nn::Vector params = policy.params();
  const std::size_t mb = std::max<std::size_t>(1, std::min<std::size_t>(config.minibatch, n));
  const std::size_t batches = (n + mb - 1) / mb;
  std::vector<double> trace{alpha_loss(policy, obs, eps, tgt)};
  nn::Vector best = params;
  double best_loss = trace.front();
  int rising = 0;
  for (int epoch = 0; epoch < config.epochs; ++epoch) {
    const std::vector<std::size_t> order = estimation::shuffled_indices(n, rng);
    for (std::size_t bi = 0; bi < batches; ++bi) {
      const std::size_t lo = n * bi / batches;
      const std::size_t hi = n * (bi + 1) / batches;
      const std::span<const std::size_t> cols(order.data() + lo, hi - lo);
      nn::Vector grad = alpha_loss_grad(policy, select_cols(obs, cols), select_cols(eps, cols), select_cols(tgt, cols));
      nn::clip_grad_norm(grad, config.max_grad_norm);
      opt.step(params, grad);
      policy.set_params(params);
    }
    const double loss = alpha_loss(policy, obs, eps, tgt);
    if (!std::isfinite(loss)) throw AlphaDivergence("alpha-policy regression produced a non-finite loss");
    // Rises below the starting loss are optimiser jitter around a near-zero
    // target, not divergence.
    rising = loss > trace.back() && loss > trace.front() ? rising + 1 : 0;
    trace.push_back(loss);
    if (loss < best_loss) {
      best_loss = loss;
      best = params;
    }
    if (config.divergence_patience > 0 && rising >= config.divergence_patience) {
      std::ostringstream msg;
      msg << "alpha-policy regression diverged: loss rose for " << rising << " consecutive epochs (last "
          << loss << ")";
      throw AlphaDivergence(msg.str());
    }
  }
  policy.set_params(best);
  return trace;
}

DetEstimate estimate_det(std::span<const double> logdet_ref, std::span<const double> logdet_updated) {
  DetEstimate out;
  out.psi.resize(logdet_ref.size());
  for (std::size_t i = 0; i < logdet_ref.size(); ++i) out.psi[i] = std::exp(logdet_updated[i] - logdet_ref[i]);
  if (!out.psi.empty()) {
    const auto [lo, hi] = std::minmax_element(out.psi.begin(), out.psi.end());
    out.psi_min = *lo;
    out.psi_max = *hi;
  }
  return out;
}

double estimate_bias(std::span<const double> logp_ref, std::span<const double> logp_updated,
                     std::span<const double> adv) {
  if (adv.empty()) return 0.0;
  double s = 0.0;
  for (std::size_t i = 0; i < adv.size(); ++i) s += std::exp(logp_updated[i] - logp_ref[i]) * adv[i];
  return s / static_cast<double>(adv.size());
}

double out_of_range_ratio(std::span<const double> logp_ref, std::span<const double> logp_updated, double clip) {
  if (logp_ref.empty()) return 0.0;
  std::size_t count = 0;
  for (std::size_t i = 0; i < logp_ref.size(); ++i) {
    if (std::fabs(std::exp(logp_updated[i] - logp_ref[i]) - 1.0) > clip) ++count;
  }
  return static_cast<double>(count) / static_cast<double>(logp_ref.size());
}

AlphaDecision adjust_alpha(const AlphaConfig& config, double alpha, const AlphaDiagnostics& d) {
  AlphaDecision out;
  if (d.psi_min < 1.0 - config.delta_det) out.triggers |= kDetLow;
  if (d.psi_max > 1.0 + config.delta_det) out.triggers |= kDetHigh;
  if (d.r_alpha < 0.0) out.triggers |= kBias;
  if (d.oorr > config.delta_oorr) out.triggers |= kOutOfRange;
  out.alpha = out.triggers != kNoTrigger ? alpha / config.beta : alpha * config.beta;
  out.alpha = std::clamp(out.alpha, 0.0, config.max_alpha);
  return out;
}

AlphaController::AlphaController(AlphaConfig config) : config_(config), alpha_(config.alpha0) {
  if (!(config_.beta > 1.0)) throw std::invalid_argument("alpha multiplier beta must exceed 1");
  if (config_.max_alpha < 0.0) throw std::invalid_argument("max alpha must be non-negative");
  alpha_ = std::clamp(alpha_, 0.0, config_.max_alpha);
}

AlphaDecision AlphaController::update(const AlphaDiagnostics& d) {
  const AlphaDecision out = adjust_alpha(config_, alpha_, d);
  alpha_ = out.alpha;
  return out;
}

AlphaDecision AlphaController::shrink() {
  AlphaDecision out;
  out.alpha = std::clamp(alpha_ / config_.beta, 0.0, config_.max_alpha);
  out.triggers = kBias;
  alpha_ = out.alpha;
  return out;
}

double QuadraticAlphaModel::inverse_map(double a_tilde) const {
  return (a_tilde - 2.0 * alpha * c) / (1.0 - 2.0 * alpha);
}

double QuadraticAlphaModel::base_density(double a) const {
  const double z = (a - mu) / sigma;
  return std::exp(-0.5 * z * z) / (sigma * std::sqrt(2.0 * std::numbers::pi));
}

double QuadraticAlphaModel::alpha_density(double a_tilde) const {
  const double jac = 1.0 + alpha * -2.0;
  return base_density(inverse_map(a_tilde)) / std::fabs(jac);
}

double QuadraticAlphaModel::induced_density(double a_tilde) const {
  const double s = std::fabs(alpha_sigma());
  const double z = (a_tilde - alpha_mean()) / s;
  return std::exp(-0.5 * z * z) / (s * std::sqrt(2.0 * std::numbers::pi));
}

// ---------------------------------------------------------------------------

namespace {

bool is_function_env(const std::string& id) {
  return id.rfind("dejong", 0) == 0 || id.rfind("ackley", 0) == 0;
}

}  // namespace

TrainConfig default_config(const std::string& env_id, Algo algo) {
  TrainConfig c;
  const bool is_64 = env_id == "dejong64" || env_id == "ackley64";
  const bool dejong = env_id.rfind("dejong", 0) == 0;
  if (is_function_env(env_id) || (env_id != "cartpole" && env_id.rfind("traffic", 0) != 0)) {
    c.num_envs = 64;
    c.horizon = 1;
    c.actor.hidden = {32, 32};
    // Ackley's 32.768 input scale makes a 1e-3 floor cost about 0.15 reward.
    c.actor.min_logstd = std::log(1e-5);
    c.critic_hidden = {32, 32};
    c.critic_lr = 1e-3;
    c.ppo.minibatch = 64;
    c.alpha = AlphaConfig{.alpha0 = 1e-5, .beta = 1.1, .delta_det = 0.4, .delta_oorr = 0.5, .max_alpha = 1.0};
    c.alpha_fit.lr = 1e-3;
    c.alpha_fit.minibatch = 64;
    switch (algo) {
      case Algo::kLr:
      case Algo::kLrRp:
        c.actor_lr = dejong ? 1e-3 : (env_id == "ackley1" ? 1e-4 : 3e-4);
        c.actor_schedule = nn::Schedule::kLinear;
        break;
      case Algo::kRp:
        c.actor_lr = dejong ? 1e-2 : 1e-3;
        c.actor_schedule = nn::Schedule::kLinear;
        break;
      case Algo::kPpo:
      case Algo::kGiPpo:
        c.actor_lr = is_64 ? 1e-2 : 1e-4;
        c.actor_schedule = nn::Schedule::kConstant;
        break;
    }
    return c;
  }
  c.num_envs = 64;
  c.horizon = 32;
  c.critic_hidden = {64, 64};
  c.critic_lr = 1e-3;
  c.ppo.minibatch = 2048;
  c.alpha_fit.minibatch = 2048;
  c.actor.hidden = {64, 64};
  if (env_id == "cartpole") {
    c.alpha = AlphaConfig{.alpha0 = 0.5, .beta = 1.02, .delta_det = 0.4, .delta_oorr = 0.75, .max_alpha = 1.0};
    c.alpha_fit.lr = 1e-2;
    switch (algo) {
      case Algo::kLr:
      case Algo::kLrRp:
        c.actor_lr = 1e-4;
        c.actor_schedule = nn::Schedule::kLinear;
        break;
      case Algo::kRp:
        c.actor_lr = 1e-2;
        c.actor_schedule = nn::Schedule::kLinear;
        break;
      case Algo::kPpo:
      case Algo::kGiPpo:
        c.actor_lr = 3e-4;
        c.actor_schedule = nn::Schedule::kAdaptive;
        break;
    }
    return c;
  }
  // Traffic.
  c.alpha = AlphaConfig{.alpha0 = 0.1, .beta = 1.1, .delta_det = 0.4, .delta_oorr = 0.5, .max_alpha = 1.0};
  c.alpha_fit.lr = 1e-5;
  switch (algo) {
    case Algo::kLr:
    case Algo::kLrRp:
      c.actor_lr = 3e-4;
      c.actor_schedule = nn::Schedule::kLinear;
      break;
    case Algo::kRp:
      c.actor_lr = 1e-3;
      c.actor_schedule = nn::Schedule::kLinear;
      break;
    case Algo::kPpo:
    case Algo::kGiPpo:
      c.actor_lr = 3e-4;
      c.actor_schedule = nn::Schedule::kConstant;
      break;
  }
  return c;
}

Trainer::Trainer(Algo algo, std::shared_ptr<const envs::Env> env, TrainConfig config, std::uint64_t seed)
    : algo_(algo),
      env_(std::move(env)),
      config_(std::move(config)),
      seed_(seed),
      policy_(env_->obs_dim(), env_->act_dim(), config_.actor, splitmix64(seed ^ 0xac7041ULL)),
      critic_(env_->obs_dim(), config_.critic_hidden, splitmix64(seed ^ 0xc417cULL)),
      actor_opt_(policy_.num_params(), nn::AdamConfig{.lr = config_.actor_lr}),
      critic_opt_(critic_.net().num_params(), nn::AdamConfig{.lr = config_.critic_lr}),
      controller_(config_.alpha),
      update_rng_(splitmix64(seed ^ 0x0bda7eULL)) {
  if (config_.num_envs <= 0 || config_.horizon <= 0) throw std::invalid_argument("num_envs and horizon must be positive");
  slots_.reserve(config_.num_envs);
  for (int e = 0; e < config_.num_envs; ++e) {
    EnvSlot s{CounterRng::stream(seed, static_cast<std::uint64_t>(e)), envs::EpisodeTracker(*env_),
              {}, 0.0};
    s.state = env_->reset(s.rng());
    slots_.push_back(std::move(s));
  }
}

void Trainer::collect() {
  const int M = config_.num_envs;
  const int H = config_.horizon;
  const int A = env_->act_dim();
  buffer_ = RolloutBuffer(M, H, env_->state_dim(), env_->obs_dim(), A);
  completed_returns_.clear();
  nn::Matrix obs(env_->obs_dim(), M);
  std::vector<double> eps(A), action(A);
  for (int t = 0; t < H; ++t) {
    for (int e = 0; e < M; ++e) {
      const std::vector<double> o = env_->observe(slots_[e].state);
      for (int k = 0; k < env_->obs_dim(); ++k) obs(k, e) = o[k];
    }
    const GaussianPolicy::Batch b = policy_.evaluate(obs);
    for (int e = 0; e < M; ++e) {
      EnvSlot& slot = slots_[e];
      for (int k = 0; k < A; ++k) {
        eps[k] = slot.rng.normal();
        action[k] = b.mean(k, e) + std::exp(b.logstd(k, e)) * eps[k];
      }
      envs::EnvStep<double> st = slot.tracker.advance(env_->step(slot.state, action));
      const std::vector<double> next_obs = env_->observe(st.next_state);
      buffer_.store(e, t, slot.state, std::span<const double>(obs.col(e).data(), static_cast<std::size_t>(obs.rows())),
                    eps, action, st.reward, st.next_state, next_obs, st.done, st.done_reason);
      slot.episode_return += st.reward;
      if (st.done) {
        completed_returns_.push_back(slot.episode_return);
        slot.episode_return = 0.0;
        slot.state = env_->reset(slot.rng());
      } else {
        slot.state = std::move(st.next_state);
      }
    }
  }
  buffer_.logp_ref = buffer_log_prob(policy_, buffer_);
  buffer_.logdet_ref = buffer_logdet(policy_, buffer_);
  env_steps_ += static_cast<std::int64_t>(M) * H;
}

double Trainer::update_reward_stats() {
  if (!completed_returns_.empty()) {
    last_mean_ = std::accumulate(completed_returns_.begin(), completed_returns_.end(), 0.0) /
                 static_cast<double>(completed_returns_.size());
    any_completed_ = true;
  } else if (!any_completed_) {
    double s = 0.0;
    for (const auto& slot : slots_) s += slot.episode_return;
    last_mean_ = s / static_cast<double>(slots_.size());
  }
  best_ = best_ ? std::max(*best_, last_mean_) : last_mean_;
  return last_mean_;
}

EpochMetrics Trainer::run_epoch() {
  try {
    return step_epoch();
  } catch (const AlphaDivergence& e) {
    throw NumericError("epoch " + std::to_string(epoch_ + 1) + ": " + e.what());
  } catch (const NumericError& e) {
    throw NumericError("epoch " + std::to_string(epoch_ + 1) + ": " + e.what());
  } catch (const ad::NonFiniteError& e) {
    throw NumericError("epoch " + std::to_string(epoch_ + 1) + ": " + e.what());
  } catch (const std::domain_error& e) {
    throw NumericError("epoch " + std::to_string(epoch_ + 1) + ": " + e.what());
  }
}

EpochMetrics Trainer::step_epoch() {
  const auto t0 = std::chrono::steady_clock::now();
  EpochMetrics m;
  m.epoch = epoch_ + 1;

  if (config_.actor_schedule == nn::Schedule::kLinear && config_.total_epochs > 0) {
    actor_opt_.set_lr(nn::scheduled_lr(nn::Schedule::kLinear, config_.actor_lr, config_.min_lr, epoch_,
                                       config_.total_epochs));
  }

  collect();
  m.env_steps = env_steps_;
  m.mean_reward = update_reward_stats();
  m.best_reward = *best_;

  // Critic: targets from the pre-fit critic, then advantages from the fitted one.
  const double g = config_.gamma;
  const double l = config_.lambda;
  {
    const nn::Matrix obs = buffer_.obs_matrix();
    const nn::Vector v_old = critic_.values(obs);
    std::vector<double> targets = estimation::compute_gae(buffer_, critic_, g, l);
    for (std::size_t i = 0; i < targets.size(); ++i) targets[i] += v_old[static_cast<Eigen::Index>(i)];
    const std::vector<double> trace =
        estimation::fit_critic(critic_, critic_opt_, obs, targets, config_.critic_fit, update_rng_);
    m.critic_loss = trace.back();
  }
  buffer_.advantages = estimation::compute_gae(buffer_, critic_, g, l);
  const std::vector<double> adv_norm = normalize_advantages(buffer_.advantages);

  auto ascend = [&](const GradEstimate& est) {
    nn::Vector params = policy_.params();
    nn::Vector grad = -est.grad;
    nn::clip_grad_norm(grad, config_.actor_max_grad_norm);
    actor_opt_.step(params, grad);
    policy_.set_params(params);
    m.actor_loss = -est.objective;
  };
  auto adapt = [&](double kl) {
    if (config_.actor_schedule == nn::Schedule::kAdaptive) {
      actor_opt_.set_lr(nn::adaptive_lr(actor_opt_.config().lr, kl, config_.kl_target, config_.min_lr, config_.max_lr));
    }
  };

  switch (algo_) {
    case Algo::kLr:
      ascend(lr_gradient(buffer_, policy_, true));
      break;
    case Algo::kRp:
      ascend(rp_gradient(buffer_, policy_, critic_, *env_, g));
      break;
    case Algo::kLrRp:
      ascend(lrrp_gradient(buffer_, policy_, critic_, *env_, g, config_.lrrp));
      break;
    case Algo::kPpo: {
      const UpdateStats st = ppo_update(policy_, actor_opt_, buffer_, buffer_.logp_ref, adv_norm, config_.ppo, update_rng_);
      m.actor_loss = st.loss;
      adapt(st.kl);
      break;
    }
    case Algo::kGiPpo: {
      buffer_.adv_grads = estimation::compute_adv_grads(buffer_, critic_, *env_, g, l);
      m.alpha = controller_.alpha();
      const std::vector<double> targets = alpha_targets(buffer_.actions, buffer_.adv_grads, m.alpha);
      GaussianPolicy alpha_policy = policy_;
      bool diverged = false;
      try {
        approximate_alpha_policy(alpha_policy, buffer_, targets, config_.alpha_fit, update_rng_);
      } catch (const AlphaDivergence&) {
        diverged = true;
        alpha_policy = policy_;
      }
      const std::vector<double> logp1 = buffer_log_prob(alpha_policy, buffer_);
      const DetEstimate det = estimate_det(buffer_.logdet_ref, buffer_logdet(alpha_policy, buffer_));
      // Centred (not rescaled) advantages: the buffer mean is sampling noise
      // plus critic lag and would otherwise dominate the sign of R_alpha.
      std::vector<double> adv_centred = buffer_.advantages;
      const double adv_mean = std::accumulate(adv_centred.begin(), adv_centred.end(), 0.0) /
                              static_cast<double>(std::max<std::size_t>(1, adv_centred.size()));
      for (double& a : adv_centred) a -= adv_mean;
      // Measured against the unchanged policy so an unchanged policy scores
      // exactly zero rather than rounding noise of either sign.
      const double r_alpha = estimate_bias(buffer_.logp_ref, logp1, adv_centred) -
                             estimate_bias(buffer_.logp_ref, buffer_.logp_ref, adv_centred);
      const AlphaDiagnostics diag{det.psi_min, det.psi_max, r_alpha,
                                  out_of_range_ratio(buffer_.logp_ref, logp1, config_.ppo.clip)};
      m.psi_min = diag.psi_min;
      m.psi_max = diag.psi_max;
      m.r_alpha = diag.r_alpha;
      m.oorr = diag.oorr;
      if (diverged) {
        controller_.shrink();
      } else {
        controller_.update(diag);
      }
      policy_ = alpha_policy;
      const UpdateStats st =
          gippo_ppo_update(policy_, actor_opt_, buffer_, buffer_.logp_ref, logp1, adv_norm, config_.ppo, update_rng_);
      m.actor_loss = st.loss;
      adapt(st.kl);
      break;
    }
  }

  ++epoch_;
  if (config_.timing) {
    m.wall_ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
  }
  return m;
}

}  // namespace gippo::algos
