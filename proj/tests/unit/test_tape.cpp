#include <gtest/gtest.h>

#include <cmath>
#include <vector>

#include "gippo/cli/gradcheck.hpp"
#include "gippo/envs.hpp"
#include "gippo/random.hpp"
#include "gippo/tape.hpp"
#include "support.hpp"

namespace {

using namespace gippo;
using ad::Tape;
using ad::Var;

TEST(Tape, SquareDerivative) {
  Tape tape;
  const Var x = tape.variable(3.0);
  const Var y = x * x;
  tape.backward(y);
  EXPECT_DOUBLE_EQ(y.value(), 9.0);
  EXPECT_DOUBLE_EQ(tape.adjoint(x), 6.0);
}

TEST(Tape, EluAtMinusOne) {
  Tape tape;
  const Var x = tape.variable(-1.0);
  const Var y = ad::elu(x);
  tape.backward(y);
  EXPECT_NEAR(y.value(), std::exp(-1.0) - 1.0, 1e-15);
  EXPECT_NEAR(y.value(), -0.6321, 1e-4);
  EXPECT_NEAR(tape.adjoint(x), std::exp(-1.0), 1e-15);
  EXPECT_NEAR(tape.adjoint(x), 0.3679, 1e-4);
}

TEST(Tape, ProductRule) {
  Tape tape;
  const Var x = tape.variable(2.0);
  const Var y = tape.variable(3.0);
  const Var f = x * y + x;
  tape.backward(f);
  EXPECT_DOUBLE_EQ(tape.adjoint(x), 4.0);
  EXPECT_DOUBLE_EQ(tape.adjoint(y), 2.0);
}

TEST(Tape, BackwardOnLeafLeavesOthersZero) {
  Tape tape;
  const Var x = tape.variable(1.5);
  const Var y = tape.variable(2.5);
  const Var z = x * y;
  tape.backward(y);
  EXPECT_EQ(tape.adjoint(y), 1.0);
  EXPECT_EQ(tape.adjoint(x), 0.0);
  EXPECT_EQ(tape.adjoint(z), 0.0);
}

TEST(Tape, UnreachableNodesHaveZeroAdjoint) {
  Tape tape;
  const Var x = tape.variable(0.3);
  const Var unrelated = ad::exp(tape.variable(1.0));
  const Var root = ad::sin(x) * 2.0;
  tape.backward(root);
  EXPECT_EQ(tape.adjoint(root), 1.0);
  EXPECT_EQ(tape.adjoint(unrelated), 0.0);
}

TEST(Tape, IdentityChain) {
  for (int k : {1, 5, 100}) {
    Tape tape;
    const Var x = tape.variable(0.7);
    Var v = x;
    for (int i = 0; i < k; ++i) v = v + 0.0;
    tape.backward(v);
    EXPECT_EQ(tape.adjoint(x), 1.0) << "chain length " << k;
  }
}

TEST(Tape, ConstantsDoNotOccupyNodes) {
  Tape tape;
  const Var c = 4.0;
  EXPECT_TRUE(c.is_constant());
  const Var x = tape.variable(1.0);
  const std::size_t before = tape.size();
  const Var y = c * c;
  EXPECT_TRUE(y.is_constant());
  EXPECT_EQ(tape.size(), before);
  (void)x;
}

TEST(Tape, ParentsPrecedeChildren) {
  Tape tape;
  const Var x = tape.variable(0.5);
  const Var y = tape.variable(-1.2);
  const Var z = ad::tanh(x * y) + ad::pow(ad::abs(y), 1.5) - ad::max(x, y);
  for (ad::NodeId id = 0; id < tape.size(); ++id) {
    for (ad::NodeId p : tape.parents(id)) EXPECT_LT(p, id);
    for (double d : tape.partials(id)) EXPECT_TRUE(std::isfinite(d));
  }
  (void)z;
}

TEST(Tape, DeJongRewardGradient) {
  CounterRng rng(3);
  for (int trial = 0; trial < 20; ++trial) {
    std::vector<double> a(4);
    for (double& x : a) x = rng.uniform(-0.95, 0.95);
    Tape tape;
    std::vector<Var> av;
    for (double x : a) av.push_back(tape.variable(x));
    tape.backward(envs::dejong_reward<Var>(av));
    for (std::size_t i = 0; i < a.size(); ++i) {
      EXPECT_NEAR(tape.adjoint(av[i]), -2.0 * 5.12 * 5.12 * a[i], 1e-12);
      const double fd = test::central_diff(
          [&](double xi) {
            std::vector<double> b = a;
            b[i] = xi;
            return envs::dejong_reward<double>(b);
          },
          a[i]);
      EXPECT_LE(test::rel_err(tape.adjoint(av[i]), fd), 1e-6);
    }
  }
}

TEST(Tape, VjpLinearDynamics) {
  // s' = s + a with cotangent e_1.
  Tape tape;
  std::vector<Var> s{tape.variable(0.2), tape.variable(-0.4)};
  std::vector<Var> a{tape.variable(1.0), tape.variable(2.0)};
  std::vector<Var> next{s[0] + a[0], s[1] + a[1]};
  const std::vector<std::pair<Var, double>> seeds{{next[0], 1.0}, {next[1], 0.0}};
  tape.backward(seeds);
  EXPECT_EQ(tape.adjoint(a[0]), 1.0);
  EXPECT_EQ(tape.adjoint(a[1]), 0.0);
  EXPECT_EQ(tape.adjoint(s[0]), 1.0);
  EXPECT_EQ(tape.adjoint(s[1]), 0.0);
}

TEST(Tape, VjpDeJongStep) {
  const auto env = envs::make_env("dejong1");
  for (double a0 : {-0.6, 0.0, 0.25}) {
    Tape tape;
    std::vector<Var> s{0.0};
    std::vector<Var> a{tape.variable(a0)};
    const auto tr = env->step(std::span<const Var>(s), std::span<const Var>(a));
    tape.backward(tr.reward);
    EXPECT_NEAR(tape.adjoint(a[0]), -2.0 * 5.12 * 5.12 * a0, 1e-12);
  }
}

TEST(Tape, VjpTrafficStepMatchesFiniteDifferences) {
  const auto env = envs::make_env("traffic-2");
  CounterRng rng(17);
  std::vector<double> s = env->reset(4);
  for (int k = 0; k < 30; ++k) s = env->step(s, std::vector<double>{0.1, 0.0}).next_state;
  for (int trial = 0; trial < 10; ++trial) {
    const std::vector<double> a{rng.uniform(-0.5, 0.5), rng.uniform(-0.2, 0.2)};
    std::vector<double> cot(s.size() + 1);
    for (double& c : cot) c = rng.normal();
    // cot[0] weights the reward, the rest the next state.
    auto objective = [&](const std::vector<double>& st, const std::vector<double>& ac) {
      const auto tr = env->step(st, ac);
      double v = cot[0] * tr.reward;
      for (std::size_t i = 0; i < tr.next_state.size(); ++i) v += cot[i + 1] * tr.next_state[i];
      return v;
    };
    Tape tape;
    std::vector<Var> sv, av;
    for (double x : s) sv.push_back(tape.variable(x));
    for (double x : a) av.push_back(tape.variable(x));
    const auto tr = env->step(std::span<const Var>(sv), std::span<const Var>(av));
    std::vector<std::pair<Var, double>> seeds{{tr.reward, cot[0]}};
    for (std::size_t i = 0; i < tr.next_state.size(); ++i) seeds.emplace_back(tr.next_state[i], cot[i + 1]);
    tape.backward(seeds);
    for (std::size_t i = 0; i < a.size(); ++i) {
      const double fd = test::central_diff(
          [&](double x) {
            std::vector<double> b = a;
            b[i] = x;
            return objective(s, b);
          },
          a[i]);
      EXPECT_LE(test::rel_err(tape.adjoint(av[i]), fd), 1e-5) << "action " << i;
    }
    for (std::size_t i = 0; i < s.size(); ++i) {
      const double fd = test::central_diff(
          [&](double x) {
            std::vector<double> b = s;
            b[i] = x;
            return objective(b, a);
          },
          s[i]);
      EXPECT_LE(test::rel_err(tape.adjoint(sv[i]), fd), 1e-5) << "state " << i;
    }
  }
}

TEST(Tape, EveryPrimitiveMatchesFiniteDifferences) {
  const std::vector<cli::CheckResult> results = cli::check_primitives(100, 5);
  EXPECT_EQ(results.size(), ad::primitive_ops().size());
  for (const cli::CheckResult& r : results) {
    EXPECT_GE(r.points, 100u) << r.name;
    EXPECT_LE(r.max_rel_err, 1e-5) << r.name;
  }
}

TEST(Tape, PrimitiveNamesRoundTrip) {
  for (ad::Op op : ad::primitive_ops()) EXPECT_EQ(ad::op_from_name(ad::op_name(op)), op);
  EXPECT_FALSE(ad::op_from_name("not-an-op").has_value());
}

TEST(Tape, NonFiniteResultsRaiseAtTheirOperation) {
  Tape tape;
  const Var zero = tape.variable(0.0);
  const Var neg = tape.variable(-1.0);
  const Var one = tape.variable(1.0);
  auto expect_op = [](auto&& f, ad::Op op) {
    try {
      f();
      ADD_FAILURE() << "expected NonFiniteError for " << ad::op_name(op);
    } catch (const ad::NonFiniteError& e) {
      EXPECT_EQ(e.op(), op);
    }
  };
  expect_op([&] { return one / zero; }, ad::Op::kDiv);
  expect_op([&] { return ad::log(zero); }, ad::Op::kLog);
  expect_op([&] { return ad::log(neg); }, ad::Op::kLog);
  expect_op([&] { return ad::sqrt(neg); }, ad::Op::kSqrt);
  expect_op([&] { return ad::sqrt(zero); }, ad::Op::kSqrt);
  expect_op([&] { return ad::exp(tape.variable(1000.0)); }, ad::Op::kExp);
}

TEST(Tape, DeepChainBackwardIsIterative) {
  Tape tape;
  tape.reserve(1'000'001, 1'000'000);
  const Var x = tape.variable(1.0);
  Var v = x;
  for (int i = 0; i < 1'000'000; ++i) v = v * 1.0000001;
  tape.backward(v);
  EXPECT_EQ(tape.size(), 1'000'001u);
  EXPECT_NEAR(tape.adjoint(x), std::pow(1.0000001, 1e6), 1e-6);
}

TEST(Tape, IdenticalRecordingsAreBitIdentical) {
  auto record = [](Tape& tape) {
    CounterRng rng(9);
    std::vector<Var> xs;
    for (int i = 0; i < 50; ++i) xs.push_back(tape.variable(rng.uniform(0.1, 2.0)));
    Var acc = 0.0;
    for (std::size_t i = 0; i + 1 < xs.size(); ++i) {
      acc = acc + ad::elu(xs[i] - xs[i + 1]) * ad::cos(xs[i]) + ad::log(xs[i + 1]) / xs[i];
    }
    tape.backward(acc);
    return acc.value();
  };
  Tape t1, t2;
  EXPECT_EQ(record(t1), record(t2));
  ASSERT_EQ(t1.size(), t2.size());
  for (ad::NodeId i = 0; i < t1.size(); ++i) {
    EXPECT_EQ(t1.value(i), t2.value(i));
    EXPECT_EQ(t1.adjoint(i), t2.adjoint(i));
  }
}

TEST(Tape, ClearResetsTheGraph) {
  Tape tape;
  const Var x = tape.variable(2.0);
  tape.backward(x * x);
  tape.clear();
  EXPECT_EQ(tape.size(), 0u);
  const Var y = tape.variable(5.0);
  tape.backward(y * 3.0);
  EXPECT_EQ(tape.adjoint(y), 3.0);
}

TEST(Tape, FaultInjectionScalesOnePrimitive) {
  ad::fault::corrupt_primitive(ad::Op::kMul);
  Tape tape;
  const Var x = tape.variable(3.0);
  const Var y = ad::sin(x);
  const Var z = x * x;
  tape.backward(z);
  EXPECT_NEAR(tape.adjoint(x), 6.0 * 1.01, 1e-12);
  tape.backward(y);
  EXPECT_NEAR(tape.adjoint(x), std::cos(3.0), 1e-15);
  ad::fault::corrupt_primitive(std::nullopt);
  EXPECT_FALSE(ad::fault::corrupted_primitive().has_value());
  tape.backward(x * x);
  EXPECT_EQ(tape.adjoint(x), 6.0);
}

}  // namespace
