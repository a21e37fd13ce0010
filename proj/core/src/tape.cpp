#include "gippo/tape.hpp"

#include <algorithm>
#include <array>
#include <atomic>
#include <cmath>

namespace gippo::ad {

namespace {

constexpr std::array<std::pair<Op, std::string_view>, 19> kOpNames{{
    {Op::kLeaf, "leaf"}, {Op::kAdd, "add"},   {Op::kSub, "sub"},     {Op::kMul, "mul"},
    {Op::kDiv, "div"},   {Op::kNeg, "neg"},   {Op::kExp, "exp"},     {Op::kLog, "ln"},
    {Op::kSqrt, "sqrt"}, {Op::kPow, "pow"},   {Op::kTanh, "tanh"},   {Op::kElu, "elu"},
    {Op::kCos, "cos"},   {Op::kSin, "sin"},   {Op::kMin, "min"},     {Op::kMax, "max"},
    {Op::kClamp, "clamp"}, {Op::kAbs, "abs"}, {Op::kFused, "fused"},
}};

constexpr std::array<Op, 17> kPrimitives{
    Op::kAdd, Op::kSub, Op::kMul, Op::kDiv, Op::kNeg, Op::kExp, Op::kLog, Op::kSqrt, Op::kPow,
    Op::kTanh, Op::kElu, Op::kCos, Op::kSin, Op::kMin, Op::kMax, Op::kClamp, Op::kAbs,
};

std::atomic<int> g_corrupted{-1};

double fault_scale(Op op) {
  return g_corrupted.load(std::memory_order_relaxed) == static_cast<int>(op) ? 1.01 : 1.0;
}

void require_finite_value(Op op, double value) {
  if (!std::isfinite(value)) {
    throw NonFiniteError(op, "non-finite value produced by '" + std::string(op_name(op)) + "'");
  }
}

void require_finite_partial(Op op, double partial) {
  if (!std::isfinite(partial)) {
    throw NonFiniteError(op, "non-finite derivative produced by '" + std::string(op_name(op)) + "'");
  }
}

}  // namespace

std::string_view op_name(Op op) {
  for (const auto& [o, name] : kOpNames) {
    if (o == op) return name;
  }
  return "unknown";
}

std::optional<Op> op_from_name(std::string_view name) {
  for (const auto& [o, n] : kOpNames) {
    if (n == name) return o;
  }
  return std::nullopt;
}

std::span<const Op> primitive_ops() { return kPrimitives; }

NonFiniteError::NonFiniteError(Op op, const std::string& what) : std::runtime_error(what), op_(op) {}

namespace fault {
void corrupt_primitive(std::optional<Op> op) {
  g_corrupted.store(op ? static_cast<int>(*op) : -1, std::memory_order_relaxed);
}
std::optional<Op> corrupted_primitive() {
  const int v = g_corrupted.load(std::memory_order_relaxed);
  if (v < 0) return std::nullopt;
  return static_cast<Op>(v);
}
}  // namespace fault

Tape::Tape() { offsets_.push_back(0); }

void Tape::clear() {
  values_.clear();
  ops_.clear();
  offsets_.assign(1, 0);
  parent_ids_.clear();
  edge_partials_.clear();
  adjoints_.clear();
}

void Tape::reserve(std::size_t nodes, std::size_t edges) {
  values_.reserve(nodes);
  ops_.reserve(nodes);
  offsets_.reserve(nodes + 1);
  parent_ids_.reserve(edges);
  edge_partials_.reserve(edges);
}

void Tape::check_owned(const Var& v) const {
  if (!v.is_constant() && (v.tape() != this || v.id() >= values_.size())) {
    throw std::invalid_argument("variable does not belong to this tape");
  }
}

Var Tape::variable(double value) {
  require_finite_value(Op::kLeaf, value);
  const auto id = static_cast<NodeId>(values_.size());
  values_.push_back(value);
  ops_.push_back(Op::kLeaf);
  offsets_.push_back(parent_ids_.size());
  return {this, id, value};
}

Var Tape::record(Op op, std::span<const Var> parents, std::span<const double> partials, double value) {
  if (parents.size() != partials.size()) {
    throw std::invalid_argument("record: parents and partials differ in length");
  }
  require_finite_value(op, value);
  const double scale = fault_scale(op);
  const std::size_t before = parent_ids_.size();
  for (std::size_t i = 0; i < parents.size(); ++i) {
    const Var& p = parents[i];
    if (p.is_constant()) continue;
    check_owned(p);
    require_finite_partial(op, partials[i]);
    parent_ids_.push_back(p.id());
    edge_partials_.push_back(partials[i] * scale);
  }
  if (parent_ids_.size() == before) return Var(value);
  const auto id = static_cast<NodeId>(values_.size());
  values_.push_back(value);
  ops_.push_back(op);
  offsets_.push_back(parent_ids_.size());
  return {this, id, value};
}

Var Tape::record_unary(Op op, const Var& x, double value, double partial) {
  require_finite_value(op, value);
  if (x.is_constant()) return Var(value);
  check_owned(x);
  require_finite_partial(op, partial);
  const auto id = static_cast<NodeId>(values_.size());
  values_.push_back(value);
  ops_.push_back(op);
  parent_ids_.push_back(x.id());
  edge_partials_.push_back(partial * fault_scale(op));
  offsets_.push_back(parent_ids_.size());
  return {this, id, value};
}

Var Tape::record_binary(Op op, const Var& x, const Var& y, double value, double dx, double dy) {
  const std::array<Var, 2> parents{x, y};
  const std::array<double, 2> partials{dx, dy};
  return record(op, parents, partials, value);
}

std::span<const NodeId> Tape::parents(NodeId id) const {
  return {parent_ids_.data() + offsets_[id], parent_ids_.data() + offsets_[id + 1]};
}

std::span<const double> Tape::partials(NodeId id) const {
  return {edge_partials_.data() + offsets_[id], edge_partials_.data() + offsets_[id + 1]};
}

void Tape::sweep(NodeId top) {
  // Parents always have smaller ids, so one descending pass visits every node
  // after all of its consumers.
  for (std::int64_t i = top; i >= 0; --i) {
    const double a = adjoints_[i];
    if (a == 0.0) continue;
    const std::uint64_t end = offsets_[i + 1];
    for (std::uint64_t k = offsets_[i]; k < end; ++k) {
      adjoints_[parent_ids_[k]] += a * edge_partials_[k];
    }
  }
}

void Tape::backward(const Var& root) {
  adjoints_.assign(values_.size(), 0.0);
  if (root.is_constant()) return;
  check_owned(root);
  adjoints_[root.id()] = 1.0;
  sweep(root.id());
}

void Tape::backward(std::span<const std::pair<Var, double>> seeds) {
  adjoints_.assign(values_.size(), 0.0);
  NodeId top = 0;
  bool any = false;
  for (const auto& [v, w] : seeds) {
    if (v.is_constant()) continue;
    check_owned(v);
    adjoints_[v.id()] += w;
    top = std::max(top, v.id());
    any = true;
  }
  if (any) sweep(top);
}

double Tape::adjoint(const Var& v) const {
  if (v.is_constant()) return 0.0;
  check_owned(v);
  return v.id() < adjoints_.size() ? adjoints_[v.id()] : 0.0;
}

namespace {

Tape* tape_of(const Var& x, const Var& y) {
  if (!x.is_constant() && !y.is_constant() && x.tape() != y.tape()) {
    throw std::invalid_argument("operands recorded on different tapes");
  }
  return x.is_constant() ? y.tape() : x.tape();
}

Var binary(Op op, const Var& x, const Var& y, double value, double dx, double dy) {
  Tape* t = tape_of(x, y);
  if (t == nullptr) {
    require_finite_value(op, value);
    return Var(value);
  }
  return t->record_binary(op, x, y, value, dx, dy);
}

Var unary(Op op, const Var& x, double value, double dx) {
  if (x.is_constant()) {
    require_finite_value(op, value);
    return Var(value);
  }
  return x.tape()->record_unary(op, x, value, dx);
}

}  // namespace

Var operator+(const Var& x, const Var& y) {
  return binary(Op::kAdd, x, y, x.value() + y.value(), 1.0, 1.0);
}

Var operator-(const Var& x, const Var& y) {
  return binary(Op::kSub, x, y, x.value() - y.value(), 1.0, -1.0);
}

Var operator*(const Var& x, const Var& y) {
  return binary(Op::kMul, x, y, x.value() * y.value(), y.value(), x.value());
}

Var operator/(const Var& x, const Var& y) {
  if (y.value() == 0.0) throw NonFiniteError(Op::kDiv, "division by zero");
  const double inv = 1.0 / y.value();
  const double q = x.value() * inv;
  return binary(Op::kDiv, x, y, q, inv, -q * inv);
}

Var operator-(const Var& x) { return unary(Op::kNeg, x, -x.value(), -1.0); }

Var exp(const Var& x) {
  const double e = std::exp(x.value());
  return unary(Op::kExp, x, e, e);
}

Var log(const Var& x) {
  if (x.value() <= 0.0) throw NonFiniteError(Op::kLog, "ln of non-positive argument");
  return unary(Op::kLog, x, std::log(x.value()), 1.0 / x.value());
}

Var sqrt(const Var& x) {
  if (x.value() < 0.0) throw NonFiniteError(Op::kSqrt, "sqrt of negative argument");
  const double r = std::sqrt(x.value());
  if (r == 0.0 && !x.is_constant()) throw NonFiniteError(Op::kSqrt, "sqrt derivative at zero");
  return unary(Op::kSqrt, x, r, x.is_constant() ? 0.0 : 0.5 / r);
}

Var pow(const Var& x, double p) {
  const double v = std::pow(x.value(), p);
  return unary(Op::kPow, x, v, p == 0.0 ? 0.0 : p * std::pow(x.value(), p - 1.0));
}

Var pow(const Var& x, const Var& p) {
  if (p.is_constant()) return pow(x, p.value());
  if (x.value() <= 0.0) throw NonFiniteError(Op::kPow, "pow with variable exponent needs a positive base");
  const double v = std::pow(x.value(), p.value());
  return binary(Op::kPow, x, p, v, p.value() * std::pow(x.value(), p.value() - 1.0), v * std::log(x.value()));
}

Var tanh(const Var& x) {
  const double t = std::tanh(x.value());
  return unary(Op::kTanh, x, t, 1.0 - t * t);
}

Var elu(const Var& x) {
  if (x.value() > 0.0) return unary(Op::kElu, x, x.value(), 1.0);
  return unary(Op::kElu, x, std::expm1(x.value()), std::exp(x.value()));
}

Var cos(const Var& x) { return unary(Op::kCos, x, std::cos(x.value()), -std::sin(x.value())); }

Var sin(const Var& x) { return unary(Op::kSin, x, std::sin(x.value()), std::cos(x.value())); }

Var min(const Var& x, const Var& y) {
  const bool pick_y = y.value() < x.value();
  return binary(Op::kMin, x, y, pick_y ? y.value() : x.value(), pick_y ? 0.0 : 1.0, pick_y ? 1.0 : 0.0);
}

Var max(const Var& x, const Var& y) {
  const bool pick_y = y.value() > x.value();
  return binary(Op::kMax, x, y, pick_y ? y.value() : x.value(), pick_y ? 0.0 : 1.0, pick_y ? 1.0 : 0.0);
}

Var clamp(const Var& x, double lo, double hi) {
  if (x.value() < lo) return unary(Op::kClamp, x, lo, 0.0);
  if (x.value() > hi) return unary(Op::kClamp, x, hi, 0.0);
  return unary(Op::kClamp, x, x.value(), 1.0);
}

Var abs(const Var& x) {
  const double v = x.value();
  return unary(Op::kAbs, x, std::fabs(v), v > 0.0 ? 1.0 : (v < 0.0 ? -1.0 : 0.0));
}

}  // namespace gippo::ad
