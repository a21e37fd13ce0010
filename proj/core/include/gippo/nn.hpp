#pragma once

#include <Eigen/Dense>

#include <cstdint>
#include <iosfwd>
#include <span>
#include <string>
#include <vector>

#include "gippo/tape.hpp"

namespace gippo::nn {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;

// Fully connected network: ELU on hidden layers, identity on the output.
// Batched evaluation works on column-major batches (features x samples).
//
// Flat parameter order is, per layer, the weight matrix row-major (out x in)
// followed by the bias.
class Mlp {
 public:
  struct Cache {
    std::vector<Matrix> pre;   // pre-activations per layer
    std::vector<Matrix> post;  // post[0] is the input, post[l + 1] the output of layer l
  };

  Mlp() = default;
  // All parameters zero.
  explicit Mlp(std::vector<int> layer_sizes);

  // Uniform fan-in initialisation, U(-1/sqrt(fan_in), 1/sqrt(fan_in)) for
  // weights, zero biases; the output layer weights are multiplied by
  // `output_scale`. Deterministic per seed.
  static Mlp init(std::vector<int> layer_sizes, std::uint64_t seed, double output_scale = 1.0);

  const std::vector<int>& layer_sizes() const { return sizes_; }
  int input_size() const { return sizes_.front(); }
  int output_size() const { return sizes_.back(); }
  int num_layers() const { return static_cast<int>(weights_.size()); }
  std::size_t num_params() const;

  Matrix& weight(int layer) { return weights_[layer]; }
  const Matrix& weight(int layer) const { return weights_[layer]; }
  Vector& bias(int layer) { return biases_[layer]; }
  const Vector& bias(int layer) const { return biases_[layer]; }

  Vector flatten() const;
  void unflatten(std::span<const double> params);

  Matrix forward(const Matrix& input) const;
  Matrix forward(const Matrix& input, Cache& cache) const;
  // Sum over the batch of d_output^T * d(output)/d(params), as a flat vector.
  // When `d_input` is non-null it receives d_output^T * d(output)/d(input).
  Vector backward(const Cache& cache, const Matrix& d_output, Matrix* d_input = nullptr) const;
  // d(output)/d(input) at a single input (output_size x input_size).
  Matrix input_jacobian(std::span<const double> input) const;

  // Full recording: every parameter becomes a leaf so that parameter
  // gradients are available from the tape.
  std::vector<ad::Var> record_params(ad::Tape& tape) const;
  std::vector<ad::Var> forward(ad::Tape& tape, std::span<const ad::Var> params,
                               std::span<const ad::Var> input) const;
  // Parameters treated as constants: one fused node per output carrying the
  // network's input Jacobian.
  std::vector<ad::Var> forward(ad::Tape& tape, std::span<const ad::Var> input) const;

 private:
  void check_input_rows(Eigen::Index rows) const;

  std::vector<int> sizes_;
  std::vector<Matrix> weights_;
  std::vector<Vector> biases_;
};

// Checkpoint record: u64 count of layer sizes, u64 sizes, u64 parameter
// count, then the parameters as f64; all little-endian.
void write_record(std::ostream& os, std::span<const int> layer_sizes, std::span<const double> params);
struct Record {
  std::vector<int> layer_sizes;
  std::vector<double> params;
};
Record read_record(std::istream& is);

enum class Schedule { kConstant, kLinear, kAdaptive };

std::string schedule_name(Schedule s);
Schedule schedule_from_name(const std::string& name);

struct AdamConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

// Adam with bias correction. Minimises: params -= step(grad).
class Adam {
 public:
  Adam() = default;
  Adam(std::size_t num_params, AdamConfig config);

  // Throws std::domain_error on a non-finite gradient (parameters untouched).
  void step(Vector& params, const Vector& grad);

  const AdamConfig& config() const { return config_; }
  void set_lr(double lr) { config_.lr = lr; }
  std::int64_t steps() const { return steps_; }
  const Vector& first_moment() const { return m_; }
  const Vector& second_moment() const { return v_; }

 private:
  AdamConfig config_;
  Vector m_;
  Vector v_;
  std::int64_t steps_ = 0;
};

// Rescales `grad` in place so that its L2 norm is at most `max_norm`
// (no-op when max_norm <= 0). Returns the norm before clipping.
double clip_grad_norm(Vector& grad, double max_norm);

// Learning rate for epoch `epoch` of `total` (linear decays to `min_lr` at
// the final epoch).
double scheduled_lr(Schedule s, double base_lr, double min_lr, int epoch, int total);

// KL-targeted adjustment used by the adaptive schedule.
double adaptive_lr(double lr, double kl, double kl_target, double min_lr, double max_lr);

}  // namespace gippo::nn
