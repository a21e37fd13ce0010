#include "gippo/policy.hpp"

#include <numbers>
#include <stdexcept>

namespace gippo::policy {

namespace {

constexpr double kHalfLog2Pi = 0.91893853320467274178;  // 0.5 * ln(2 pi)
constexpr double kSoftplusLinear = 30.0;

double softplus(double x) { return x > kSoftplusLinear ? x : std::log1p(std::exp(x)); }
double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

}  // namespace

double bounded_logstd(double raw, double min_logstd) { return min_logstd + softplus(raw - min_logstd); }

double bounded_logstd_grad(double raw, double min_logstd) { return sigmoid(raw - min_logstd); }

ad::Var bounded_logstd(const ad::Var& raw, double min_logstd) {
  const ad::Var shifted = raw - min_logstd;
  if (shifted.value() > kSoftplusLinear) return shifted + min_logstd;
  return ad::log(ad::exp(shifted) + 1.0) + min_logstd;
}

double gaussian_log_prob(std::span<const double> mean, std::span<const double> logstd,
                         std::span<const double> action) {
  double lp = 0.0;
  for (std::size_t i = 0; i < mean.size(); ++i) {
    const double z = (action[i] - mean[i]) * std::exp(-logstd[i]);
    lp += -0.5 * z * z - logstd[i] - kHalfLog2Pi;
  }
  return lp;
}

GaussianPolicy::GaussianPolicy(int obs_dim, int act_dim, const PolicyConfig& config, std::uint64_t seed)
    : obs_dim_(obs_dim), act_dim_(act_dim), config_(config) {
  if (obs_dim <= 0 || act_dim <= 0) throw std::invalid_argument("policy dimensions must be positive");
  std::vector<int> sizes{obs_dim};
  sizes.insert(sizes.end(), config.hidden.begin(), config.hidden.end());
  const bool dependent = config.std_mode == StdMode::kStateDependent;
  sizes.push_back(dependent ? 2 * act_dim : act_dim);
  net_ = nn::Mlp::init(sizes, seed, config.output_scale);
  if (!dependent) free_logstd_ = nn::Vector::Constant(act_dim, config.init_logstd);
}

std::size_t GaussianPolicy::num_params() const { return net_.num_params() + free_logstd_.size(); }

nn::Vector GaussianPolicy::params() const {
  nn::Vector out(static_cast<Eigen::Index>(num_params()));
  const nn::Vector flat = net_.flatten();
  out.head(flat.size()) = flat;
  out.tail(free_logstd_.size()) = free_logstd_;
  return out;
}

void GaussianPolicy::set_params(std::span<const double> params) {
  if (params.size() != num_params()) throw std::invalid_argument("policy parameter vector has wrong length");
  net_.unflatten(params.first(net_.num_params()));
  for (Eigen::Index i = 0; i < free_logstd_.size(); ++i) free_logstd_[i] = params[net_.num_params() + i];
}

GaussianPolicy::Batch GaussianPolicy::evaluate(const nn::Matrix& obs) const {
  Batch b;
  const nn::Matrix out = net_.forward(obs, b.cache);
  const Eigen::Index n = act_dim_;
  const Eigen::Index cols = obs.cols();
  b.mean = out.topRows(n);
  if (config_.std_mode == StdMode::kStateDependent) {
    b.raw = out.bottomRows(n).array() + config_.init_logstd;
  } else {
    b.raw = free_logstd_.replicate(1, cols);
  }
  b.logstd = b.raw.unaryExpr([m = config_.min_logstd](double r) { return bounded_logstd(r, m); });
  return b;
}

nn::Vector GaussianPolicy::backward(const Batch& batch, const nn::Matrix& d_mean, const nn::Matrix& d_logstd) const {
  const nn::Matrix d_raw =
      d_logstd.cwiseProduct(batch.raw.unaryExpr([m = config_.min_logstd](double r) { return bounded_logstd_grad(r, m); }));
  nn::Vector grad(static_cast<Eigen::Index>(num_params()));
  if (config_.std_mode == StdMode::kStateDependent) {
    nn::Matrix d_out(2 * act_dim_, d_mean.cols());
    d_out.topRows(act_dim_) = d_mean;
    d_out.bottomRows(act_dim_) = d_raw;
    grad = net_.backward(batch.cache, d_out);
  } else {
    grad.head(static_cast<Eigen::Index>(net_.num_params())) = net_.backward(batch.cache, d_mean);
    grad.tail(act_dim_) = d_raw.rowwise().sum();
  }
  return grad;
}

nn::Vector GaussianPolicy::log_prob(const Batch& batch, const nn::Matrix& actions) {
  const nn::Matrix z = (actions - batch.mean).cwiseProduct((-batch.logstd).array().exp().matrix());
  const nn::Matrix per_dim = -0.5 * z.cwiseProduct(z) - batch.logstd;
  nn::Vector out = per_dim.colwise().sum().transpose();
  out.array() -= static_cast<double>(batch.mean.rows()) * kHalfLog2Pi;
  return out;
}

void GaussianPolicy::mean_logstd(std::span<const double> obs, std::vector<double>& mean,
                                 std::vector<double>& logstd) const {
  const Batch b = evaluate(Eigen::Map<const nn::Matrix>(obs.data(), static_cast<Eigen::Index>(obs.size()), 1));
  mean.assign(b.mean.data(), b.mean.data() + act_dim_);
  logstd.assign(b.logstd.data(), b.logstd.data() + act_dim_);
}

Sample GaussianPolicy::sample(std::span<const double> obs, CounterRng& rng) const {
  std::vector<double> mean, logstd;
  mean_logstd(obs, mean, logstd);
  Sample s;
  s.eps.resize(act_dim_);
  s.action.resize(act_dim_);
  for (int i = 0; i < act_dim_; ++i) {
    s.eps[i] = rng.normal();
    s.action[i] = mean[i] + std::exp(logstd[i]) * s.eps[i];
  }
  s.logp = gaussian_log_prob(mean, logstd, s.action);
  return s;
}

std::vector<double> GaussianPolicy::action_for(std::span<const double> obs, std::span<const double> eps) const {
  std::vector<double> mean, logstd;
  mean_logstd(obs, mean, logstd);
  for (int i = 0; i < act_dim_; ++i) mean[i] += std::exp(logstd[i]) * eps[i];
  return mean;
}

double GaussianPolicy::log_prob(std::span<const double> obs, std::span<const double> action) const {
  std::vector<double> mean, logstd;
  mean_logstd(obs, mean, logstd);
  return gaussian_log_prob(mean, logstd, action);
}

double GaussianPolicy::eps_jacobian_logdet(std::span<const double> obs) const {
  std::vector<double> mean, logstd;
  mean_logstd(obs, mean, logstd);
  double s = 0.0;
  for (double l : logstd) s += l;
  return s;
}

std::vector<ad::Var> GaussianPolicy::record_params(ad::Tape& tape) const {
  const nn::Vector p = params();
  std::vector<ad::Var> out;
  out.reserve(p.size());
  for (Eigen::Index i = 0; i < p.size(); ++i) out.push_back(tape.variable(p[i]));
  return out;
}

GaussianPolicy::TapeOutput GaussianPolicy::record(ad::Tape& tape, std::span<const ad::Var> params,
                                                  std::span<const ad::Var> obs) const {
  if (params.size() != num_params()) throw std::invalid_argument("policy parameter vars have wrong length");
  const auto net_params = params.first(net_.num_params());
  const std::vector<ad::Var> out = net_.forward(tape, net_params, obs);
  TapeOutput r;
  for (int i = 0; i < act_dim_; ++i) {
    r.mean.push_back(out[i]);
    const ad::Var raw = config_.std_mode == StdMode::kStateDependent ? out[act_dim_ + i] + config_.init_logstd
                                                                     : params[net_.num_params() + i];
    r.logstd.push_back(bounded_logstd(raw, config_.min_logstd));
  }
  return r;
}

GaussianPolicy::TapeOutput GaussianPolicy::record(ad::Tape& tape, std::span<const ad::Var> obs) const {
  const std::vector<ad::Var> out = net_.forward(tape, obs);
  TapeOutput r;
  for (int i = 0; i < act_dim_; ++i) {
    r.mean.push_back(out[i]);
    const ad::Var raw = config_.std_mode == StdMode::kStateDependent ? out[act_dim_ + i] + config_.init_logstd
                                                                     : ad::Var(free_logstd_[i]);
    r.logstd.push_back(bounded_logstd(raw, config_.min_logstd));
  }
  return r;
}

ad::Var log_prob(const GaussianPolicy::TapeOutput& out, std::span<const ad::Var> action) {
  ad::Var lp(0.0);
  for (std::size_t i = 0; i < out.mean.size(); ++i) {
    const ad::Var z = (action[i] - out.mean[i]) * ad::exp(-out.logstd[i]);
    lp = lp - 0.5 * z * z - out.logstd[i] - kHalfLog2Pi;
  }
  return lp;
}

}  // namespace gippo::policy
