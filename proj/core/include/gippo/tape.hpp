#pragma once

#include <cmath>
#include <cstdint>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

namespace gippo::ad {

// Primitive operations that can appear on a tape. kFused covers nodes whose
// local partials are supplied by the caller (dense layers, network Jacobians).
enum class Op : std::uint8_t {
  kLeaf,
  kAdd,
  kSub,
  kMul,
  kDiv,
  kNeg,
  kExp,
  kLog,
  kSqrt,
  kPow,
  kTanh,
  kElu,
  kCos,
  kSin,
  kMin,
  kMax,
  kClamp,
  kAbs,
  kFused,
};

std::string_view op_name(Op op);
std::optional<Op> op_from_name(std::string_view name);
// All differentiable primitives (everything except kLeaf and kFused).
std::span<const Op> primitive_ops();

// Raised at the operation that produced a non-finite value or partial.
class NonFiniteError : public std::runtime_error {
 public:
  NonFiniteError(Op op, const std::string& what);
  Op op() const { return op_; }

 private:
  Op op_;
};

using NodeId = std::uint32_t;
inline constexpr NodeId kNoNode = 0xffffffffu;

class Tape;

// Handle to a recorded value. A Var without a tape is a constant and never
// occupies a node.
class Var {
 public:
  Var() = default;
  Var(double value) : value_(value) {}  // NOLINT: implicit constants

  double value() const { return value_; }
  NodeId id() const { return id_; }
  Tape* tape() const { return tape_; }
  bool is_constant() const { return tape_ == nullptr; }

 private:
  friend class Tape;
  Var(Tape* tape, NodeId id, double value) : value_(value), id_(id), tape_(tape) {}

  double value_ = 0.0;
  NodeId id_ = kNoNode;
  Tape* tape_ = nullptr;
};

class Tape {
 public:
  Tape();

  // New independent input.
  Var variable(double value);

  // Records `value` with the given (parent, local partial) pairs. Constant
  // parents are dropped. Throws NonFiniteError if value or a partial is not
  // finite.
  Var record(Op op, std::span<const Var> parents, std::span<const double> partials, double value);
  Var record_unary(Op op, const Var& x, double value, double partial);
  Var record_binary(Op op, const Var& x, const Var& y, double value, double dx, double dy);

  // Reverse sweep from a scalar root. Afterwards adjoint(i) = d root / d node i.
  void backward(const Var& root);
  // Reverse sweep from a weighted sum of roots.
  void backward(std::span<const std::pair<Var, double>> seeds);

  double adjoint(const Var& v) const;
  double adjoint(NodeId id) const { return adjoints_[id]; }
  const std::vector<double>& adjoints() const { return adjoints_; }

  double value(NodeId id) const { return values_[id]; }
  Op op(NodeId id) const { return ops_[id]; }
  std::span<const NodeId> parents(NodeId id) const;
  std::span<const double> partials(NodeId id) const;

  std::size_t size() const { return values_.size(); }
  void clear();
  void reserve(std::size_t nodes, std::size_t edges);

 private:
  void sweep(NodeId top);
  void check_owned(const Var& v) const;

  std::vector<double> values_;
  std::vector<Op> ops_;
  std::vector<std::uint64_t> offsets_;
  std::vector<NodeId> parent_ids_;
  std::vector<double> edge_partials_;
  std::vector<double> adjoints_;
};

// Fault injection for gradient-check tooling: scales every local partial of
// the chosen primitive by (1 + 1e-2). Process-wide.
namespace fault {
void corrupt_primitive(std::optional<Op> op);
std::optional<Op> corrupted_primitive();
}  // namespace fault

inline double value_of(double x) { return x; }
inline double value_of(const Var& x) { return x.value(); }

Var operator+(const Var& x, const Var& y);
Var operator-(const Var& x, const Var& y);
Var operator*(const Var& x, const Var& y);
Var operator/(const Var& x, const Var& y);
Var operator-(const Var& x);
inline Var& operator+=(Var& x, const Var& y) { return x = x + y; }
inline Var& operator-=(Var& x, const Var& y) { return x = x - y; }
inline Var& operator*=(Var& x, const Var& y) { return x = x * y; }
inline Var& operator/=(Var& x, const Var& y) { return x = x / y; }

Var exp(const Var& x);
Var log(const Var& x);
Var sqrt(const Var& x);
Var pow(const Var& x, double p);
Var pow(const Var& x, const Var& p);
Var tanh(const Var& x);
Var elu(const Var& x);
Var cos(const Var& x);
Var sin(const Var& x);
Var min(const Var& x, const Var& y);
Var max(const Var& x, const Var& y);
Var clamp(const Var& x, double lo, double hi);
Var abs(const Var& x);

// Scalar counterparts so environment code can be written once for double and Var.
inline double exp(double x) { return std::exp(x); }
inline double log(double x) { return std::log(x); }
inline double sqrt(double x) { return std::sqrt(x); }
inline double pow(double x, double p) { return std::pow(x, p); }
inline double tanh(double x) { return std::tanh(x); }
inline double elu(double x) { return x > 0.0 ? x : std::expm1(x); }
inline double cos(double x) { return std::cos(x); }
inline double sin(double x) { return std::sin(x); }
inline double min(double x, double y) { return y < x ? y : x; }
inline double max(double x, double y) { return y > x ? y : x; }
inline double clamp(double x, double lo, double hi) { return x < lo ? lo : (x > hi ? hi : x); }
inline double abs(double x) { return std::fabs(x); }

}  // namespace gippo::ad
