#pragma once

#include <cmath>
#include <cstdint>
#include <span>
#include <vector>

#include "gippo/nn.hpp"
#include "gippo/random.hpp"
#include "gippo/tape.hpp"

namespace gippo::policy {

enum class StdMode {
  kStateDependent,    // the network emits mean and raw log-std
  kStateIndependent,  // raw log-std is a free parameter vector
};

struct PolicyConfig {
  std::vector<int> hidden{32, 32};
  StdMode std_mode = StdMode::kStateDependent;
  double min_logstd = std::log(1e-3);
  double init_logstd = 0.0;
  double output_scale = 0.01;
};

// log-std actually used by the policy: min_logstd + softplus(raw - min_logstd).
// Strictly above min_logstd for every finite raw value.
double bounded_logstd(double raw, double min_logstd);
double bounded_logstd_grad(double raw, double min_logstd);
ad::Var bounded_logstd(const ad::Var& raw, double min_logstd);

// Diagonal Gaussian log-density.
double gaussian_log_prob(std::span<const double> mean, std::span<const double> logstd,
                         std::span<const double> action);

struct Sample {
  std::vector<double> eps;
  std::vector<double> action;
  double logp = 0.0;
};

// Reparameterised diagonal Gaussian: a = mean(s) + exp(logstd(s)) * eps.
class GaussianPolicy {
 public:
  struct Batch {
    nn::Matrix mean;    // act_dim x B
    nn::Matrix logstd;  // act_dim x B, bounded
    nn::Matrix raw;     // act_dim x B, before bounding
    nn::Mlp::Cache cache;
  };

  struct TapeOutput {
    std::vector<ad::Var> mean;
    std::vector<ad::Var> logstd;
  };

  GaussianPolicy() = default;
  GaussianPolicy(int obs_dim, int act_dim, const PolicyConfig& config, std::uint64_t seed);

  int obs_dim() const { return obs_dim_; }
  int act_dim() const { return act_dim_; }
  const PolicyConfig& config() const { return config_; }
  const nn::Mlp& net() const { return net_; }

  std::size_t num_params() const;
  nn::Vector params() const;
  void set_params(std::span<const double> params);
  void set_params(const nn::Vector& params) { set_params(std::span<const double>(params.data(), params.size())); }

  Batch evaluate(const nn::Matrix& obs) const;
  // Parameter gradient (summed over the batch) of a loss with the given
  // derivatives w.r.t. mean and bounded log-std.
  nn::Vector backward(const Batch& batch, const nn::Matrix& d_mean, const nn::Matrix& d_logstd) const;
  // Log-densities of the columns of `actions` (act_dim x B).
  static nn::Vector log_prob(const Batch& batch, const nn::Matrix& actions);

  void mean_logstd(std::span<const double> obs, std::vector<double>& mean, std::vector<double>& logstd) const;
  Sample sample(std::span<const double> obs, CounterRng& rng) const;
  std::vector<double> action_for(std::span<const double> obs, std::span<const double> eps) const;
  double log_prob(std::span<const double> obs, std::span<const double> action) const;
  // log |det d(action)/d(eps)| = sum_i logstd_i(s).
  double eps_jacobian_logdet(std::span<const double> obs) const;

  std::vector<ad::Var> record_params(ad::Tape& tape) const;
  // Full recording with parameter leaves from record_params.
  TapeOutput record(ad::Tape& tape, std::span<const ad::Var> params, std::span<const ad::Var> obs) const;
  // Parameters constant; outputs are fused nodes over the observation.
  TapeOutput record(ad::Tape& tape, std::span<const ad::Var> obs) const;

 private:
  int obs_dim_ = 0;
  int act_dim_ = 0;
  PolicyConfig config_;
  nn::Mlp net_;
  nn::Vector free_logstd_;  // used in kStateIndependent mode
};

ad::Var log_prob(const GaussianPolicy::TapeOutput& out, std::span<const ad::Var> action);

}  // namespace gippo::policy
