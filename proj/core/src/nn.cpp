#include "gippo/nn.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <istream>
#include <ostream>
#include <stdexcept>

#include "gippo/random.hpp"

namespace gippo::nn {

namespace {

inline double elu(double x) { return x > 0.0 ? x : std::expm1(x); }
inline double elu_grad(double x) { return x > 0.0 ? 1.0 : std::exp(x); }

}  // namespace

Mlp::Mlp(std::vector<int> layer_sizes) : sizes_(std::move(layer_sizes)) {
  if (sizes_.size() < 2) throw std::invalid_argument("mlp needs at least input and output sizes");
  for (int s : sizes_) {
    if (s <= 0) throw std::invalid_argument("mlp layer sizes must be positive");
  }
  for (std::size_t l = 0; l + 1 < sizes_.size(); ++l) {
    weights_.push_back(Matrix::Zero(sizes_[l + 1], sizes_[l]));
    biases_.push_back(Vector::Zero(sizes_[l + 1]));
  }
}

Mlp Mlp::init(std::vector<int> layer_sizes, std::uint64_t seed, double output_scale) {
  Mlp net(std::move(layer_sizes));
  CounterRng rng(seed);
  for (int l = 0; l < net.num_layers(); ++l) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(net.sizes_[l]));
    const double scale = (l + 1 == net.num_layers()) ? output_scale : 1.0;
    Matrix& w = net.weights_[l];
    for (Eigen::Index r = 0; r < w.rows(); ++r) {
      for (Eigen::Index c = 0; c < w.cols(); ++c) w(r, c) = scale * rng.uniform(-bound, bound);
    }
  }
  return net;
}

std::size_t Mlp::num_params() const {
  std::size_t n = 0;
  for (int l = 0; l < num_layers(); ++l) n += weights_[l].size() + biases_[l].size();
  return n;
}

Vector Mlp::flatten() const {
  Vector out(static_cast<Eigen::Index>(num_params()));
  Eigen::Index k = 0;
  for (int l = 0; l < num_layers(); ++l) {
    const Matrix& w = weights_[l];
    for (Eigen::Index r = 0; r < w.rows(); ++r) {
      for (Eigen::Index c = 0; c < w.cols(); ++c) out[k++] = w(r, c);
    }
    for (Eigen::Index r = 0; r < biases_[l].size(); ++r) out[k++] = biases_[l][r];
  }
  return out;
}

void Mlp::unflatten(std::span<const double> params) {
  if (params.size() != num_params()) throw std::invalid_argument("parameter vector has wrong length");
  std::size_t k = 0;
  for (int l = 0; l < num_layers(); ++l) {
    Matrix& w = weights_[l];
    for (Eigen::Index r = 0; r < w.rows(); ++r) {
      for (Eigen::Index c = 0; c < w.cols(); ++c) w(r, c) = params[k++];
    }
    for (Eigen::Index r = 0; r < biases_[l].size(); ++r) biases_[l][r] = params[k++];
  }
}

void Mlp::check_input_rows(Eigen::Index rows) const {
  if (rows != input_size()) {
    throw std::invalid_argument("mlp input has " + std::to_string(rows) + " features, expected " +
                                std::to_string(input_size()));
  }
}

Matrix Mlp::forward(const Matrix& input) const {
  check_input_rows(input.rows());
  Matrix h = input;
  for (int l = 0; l < num_layers(); ++l) {
    Matrix z = weights_[l] * h;
    z.colwise() += biases_[l];
    if (l + 1 < num_layers()) z = z.unaryExpr([](double x) { return elu(x); });
    h = std::move(z);
  }
  return h;
}

Matrix Mlp::forward(const Matrix& input, Cache& cache) const {
  check_input_rows(input.rows());
  cache.pre.resize(num_layers());
  cache.post.resize(num_layers() + 1);
  cache.post[0] = input;
  for (int l = 0; l < num_layers(); ++l) {
    cache.pre[l].noalias() = weights_[l] * cache.post[l];
    cache.pre[l].colwise() += biases_[l];
    if (l + 1 < num_layers()) {
      cache.post[l + 1] = cache.pre[l].unaryExpr([](double x) { return elu(x); });
    } else {
      cache.post[l + 1] = cache.pre[l];
    }
  }
  return cache.post.back();
}

Vector Mlp::backward(const Cache& cache, const Matrix& d_output, Matrix* d_input) const {
  if (d_output.rows() != output_size() || d_output.cols() != cache.post[0].cols()) {
    throw std::invalid_argument("mlp backward: output gradient has wrong shape");
  }
  std::vector<Matrix> dw(num_layers());
  std::vector<Vector> db(num_layers());
  Matrix delta = d_output;
  for (int l = num_layers() - 1; l >= 0; --l) {
    if (l + 1 < num_layers()) {
      delta = delta.cwiseProduct(cache.pre[l].unaryExpr([](double x) { return elu_grad(x); }));
    }
    dw[l].noalias() = delta * cache.post[l].transpose();
    db[l] = delta.rowwise().sum();
    if (l > 0 || d_input != nullptr) {
      Matrix next = weights_[l].transpose() * delta;
      delta = std::move(next);
    }
  }
  if (d_input != nullptr) *d_input = delta;

  Vector grad(static_cast<Eigen::Index>(num_params()));
  Eigen::Index k = 0;
  for (int l = 0; l < num_layers(); ++l) {
    for (Eigen::Index r = 0; r < dw[l].rows(); ++r) {
      for (Eigen::Index c = 0; c < dw[l].cols(); ++c) grad[k++] = dw[l](r, c);
    }
    for (Eigen::Index r = 0; r < db[l].size(); ++r) grad[k++] = db[l][r];
  }
  return grad;
}

Matrix Mlp::input_jacobian(std::span<const double> input) const {
  check_input_rows(static_cast<Eigen::Index>(input.size()));
  Vector h = Eigen::Map<const Vector>(input.data(), static_cast<Eigen::Index>(input.size()));
  Matrix jac = Matrix::Identity(input_size(), input_size());
  for (int l = 0; l < num_layers(); ++l) {
    Vector z = weights_[l] * h + biases_[l];
    jac = weights_[l] * jac;
    if (l + 1 < num_layers()) {
      for (Eigen::Index r = 0; r < z.size(); ++r) {
        jac.row(r) *= elu_grad(z[r]);
        z[r] = elu(z[r]);
      }
    }
    h = std::move(z);
  }
  return jac;
}

std::vector<ad::Var> Mlp::record_params(ad::Tape& tape) const {
  const Vector flat = flatten();
  std::vector<ad::Var> out;
  out.reserve(flat.size());
  for (Eigen::Index i = 0; i < flat.size(); ++i) out.push_back(tape.variable(flat[i]));
  return out;
}

std::vector<ad::Var> Mlp::forward(ad::Tape& tape, std::span<const ad::Var> params,
                                  std::span<const ad::Var> input) const {
  check_input_rows(static_cast<Eigen::Index>(input.size()));
  if (params.size() != num_params()) throw std::invalid_argument("parameter vars have wrong length");
  std::vector<ad::Var> h(input.begin(), input.end());
  std::vector<ad::Var> parents;
  std::vector<double> partials;
  std::size_t k = 0;
  for (int l = 0; l < num_layers(); ++l) {
    const int rows = sizes_[l + 1];
    const int cols = sizes_[l];
    const std::size_t bias_offset = k + static_cast<std::size_t>(rows) * cols;
    std::vector<ad::Var> next;
    next.reserve(rows);
    for (int r = 0; r < rows; ++r) {
      parents.clear();
      partials.clear();
      double value = params[bias_offset + r].value();
      for (int c = 0; c < cols; ++c) {
        const ad::Var& w = params[k + static_cast<std::size_t>(r) * cols + c];
        value += w.value() * h[c].value();
        parents.push_back(w);
        partials.push_back(h[c].value());
        parents.push_back(h[c]);
        partials.push_back(w.value());
      }
      parents.push_back(params[bias_offset + r]);
      partials.push_back(1.0);
      ad::Var z = tape.record(ad::Op::kFused, parents, partials, value);
      next.push_back(l + 1 < num_layers() ? ad::elu(z) : z);
    }
    k = bias_offset + rows;
    h = std::move(next);
  }
  return h;
}

std::vector<ad::Var> Mlp::forward(ad::Tape& tape, std::span<const ad::Var> input) const {
  std::vector<double> x(input.size());
  for (std::size_t i = 0; i < input.size(); ++i) x[i] = input[i].value();
  check_input_rows(static_cast<Eigen::Index>(x.size()));
  const Matrix jac = input_jacobian(x);
  const Vector y = forward(Eigen::Map<const Matrix>(x.data(), static_cast<Eigen::Index>(x.size()), 1));
  std::vector<ad::Var> out;
  out.reserve(output_size());
  std::vector<double> partials(x.size());
  for (int r = 0; r < output_size(); ++r) {
    for (std::size_t c = 0; c < x.size(); ++c) partials[c] = jac(r, static_cast<Eigen::Index>(c));
    out.push_back(tape.record(ad::Op::kFused, input, partials, y[r]));
  }
  return out;
}

namespace {

void put_u64(std::ostream& os, std::uint64_t v) {
  char buf[8];
  for (int i = 0; i < 8; ++i) buf[i] = static_cast<char>((v >> (8 * i)) & 0xff);
  os.write(buf, 8);
}

std::uint64_t get_u64(std::istream& is) {
  unsigned char buf[8];
  if (!is.read(reinterpret_cast<char*>(buf), 8)) throw std::runtime_error("checkpoint truncated");
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(buf[i]) << (8 * i);
  return v;
}

}  // namespace

void write_record(std::ostream& os, std::span<const int> layer_sizes, std::span<const double> params) {
  put_u64(os, layer_sizes.size());
  for (int s : layer_sizes) put_u64(os, static_cast<std::uint64_t>(s));
  put_u64(os, params.size());
  for (double p : params) put_u64(os, std::bit_cast<std::uint64_t>(p));
}

Record read_record(std::istream& is) {
  Record rec;
  const std::uint64_t n_sizes = get_u64(is);
  if (n_sizes > 1024) throw std::runtime_error("checkpoint header is corrupt");
  for (std::uint64_t i = 0; i < n_sizes; ++i) rec.layer_sizes.push_back(static_cast<int>(get_u64(is)));
  const std::uint64_t n_params = get_u64(is);
  if (n_params > (1ULL << 32)) throw std::runtime_error("checkpoint header is corrupt");
  rec.params.reserve(n_params);
  for (std::uint64_t i = 0; i < n_params; ++i) rec.params.push_back(std::bit_cast<double>(get_u64(is)));
  return rec;
}

std::string schedule_name(Schedule s) {
  switch (s) {
    case Schedule::kConstant: return "constant";
    case Schedule::kLinear: return "linear";
    case Schedule::kAdaptive: return "adaptive";
  }
  return "constant";
}

Schedule schedule_from_name(const std::string& name) {
  if (name == "constant") return Schedule::kConstant;
  if (name == "linear") return Schedule::kLinear;
  if (name == "adaptive") return Schedule::kAdaptive;
  throw std::invalid_argument("unknown learning-rate schedule '" + name + "'");
}

Adam::Adam(std::size_t num_params, AdamConfig config)
    : config_(config),
      m_(Vector::Zero(static_cast<Eigen::Index>(num_params))),
      v_(Vector::Zero(static_cast<Eigen::Index>(num_params))) {}

void Adam::step(Vector& params, const Vector& grad) {
  if (grad.size() != params.size() || params.size() != m_.size()) {
    throw std::invalid_argument("adam: parameter/gradient length mismatch");
  }
  if (!grad.allFinite()) throw std::domain_error("adam: non-finite gradient");
  ++steps_;
  const double b1 = config_.beta1;
  const double b2 = config_.beta2;
  m_ = b1 * m_ + (1.0 - b1) * grad;
  v_ = b2 * v_ + (1.0 - b2) * grad.cwiseProduct(grad);
  const double c1 = 1.0 - std::pow(b1, static_cast<double>(steps_));
  const double c2 = 1.0 - std::pow(b2, static_cast<double>(steps_));
  const double step_size = config_.lr / c1;
  const double root_c2 = std::sqrt(c2);
  for (Eigen::Index i = 0; i < params.size(); ++i) {
    params[i] -= step_size * m_[i] / (std::sqrt(v_[i]) / root_c2 + config_.eps);
  }
}

double clip_grad_norm(Vector& grad, double max_norm) {
  const double norm = grad.norm();
  if (max_norm > 0.0 && norm > max_norm) grad *= max_norm / norm;
  return norm;
}

double scheduled_lr(Schedule s, double base_lr, double min_lr, int epoch, int total) {
  if (s != Schedule::kLinear || total <= 1) return base_lr;
  const double frac = std::min(1.0, static_cast<double>(epoch) / static_cast<double>(total - 1));
  return base_lr + (std::min(min_lr, base_lr) - base_lr) * frac;
}

double adaptive_lr(double lr, double kl, double kl_target, double min_lr, double max_lr) {
  if (kl > 2.0 * kl_target) lr /= 1.5;
  else if (kl < 0.5 * kl_target) lr *= 1.5;
  return std::clamp(lr, min_lr, max_lr);
}

}  // namespace gippo::nn
