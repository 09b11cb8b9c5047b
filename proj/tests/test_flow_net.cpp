#include <cmath>
#include <random>

#include <gtest/gtest.h>

#include "tmpo/error.hpp"
#include "tmpo/flow_net.hpp"
#include "tmpo/tree_sampler.hpp"

namespace tmpo {
namespace {

PolicyParams random_params(int hidden, std::uint64_t seed, double scale = 0.5) {
  PolicyParams p(hidden);
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> n(0.0, scale);
  for (double& v : p.values()) v = n(rng);
  return p;
}

// Two coincident components at the origin: a single Gaussian that still
// has one rewarded and one non-reward component.
MixtureSpec origin_mixture() {
  MixtureSpec s;
  s.background_reward = 0.0;
  s.components.push_back({{0.0, 0.0}, {0.3, 0.0, 0.3}, 0.5, 1.0});
  s.components.push_back({{0.0, 0.0}, {0.3, 0.0, 0.3}, 0.5, 0.0});
  return s;
}

TEST(Mlp, ParameterCountAndLayout) {
  EXPECT_EQ(mlp_param_count(4), 4u * 3 + 4 + 16 + 4 + 8 + 2);
  PolicyParams p(4);
  EXPECT_EQ(p.size(), mlp_param_count(4));
  EXPECT_EQ(p.w1().size(), 12u);
  EXPECT_EQ(p.w2().size(), 16u);
  EXPECT_EQ(p.w3().size(), 8u);
  EXPECT_EQ(&p.b3().back(), &p.values().back());
  EXPECT_THROW(PolicyParams(0), ValidationError);
  EXPECT_THROW(PolicyParams(kMaxHidden + 1), ValidationError);
}

TEST(Mlp, ZeroNetworkOutputsZero) {
  const PolicyParams p(8);
  EXPECT_EQ(velocity(p, {1.5, -2.0}, 0.3), (Vec2{0.0, 0.0}));
}

TEST(Mlp, OutputBiasPassthrough) {
  PolicyParams p(8);
  p.b3()[0] = 0.3;
  p.b3()[1] = -0.7;
  for (double t : {0.0, 0.5, 1.0}) {
    const Vec2 v = velocity(p, {t * 3.0, -1.0}, t);
    EXPECT_EQ(v.x, 0.3);
    EXPECT_EQ(v.y, -0.7);
  }
}

TEST(Mlp, DeterministicAndValidatesInput) {
  const auto p = random_params(16, 1);
  EXPECT_EQ(velocity(p, {0.2, 0.1}, 0.4), velocity(p, {0.2, 0.1}, 0.4));
  EXPECT_THROW(velocity(p, {std::nan(""), 0.0}, 0.4), ValidationError);
  EXPECT_THROW(velocity(p, {0.0, 0.0}, 1.5), ValidationError);
  EXPECT_THROW(velocity(p, {0.0, 0.0}, -0.1), ValidationError);
}

TEST(MlpBackward, ZeroUpstream) {
  const auto p = random_params(8, 2);
  GradBuffer g(8);
  const Vec2 dx = velocity_backward(p, {0.3, 0.4}, 0.5, {0.0, 0.0}, g);
  EXPECT_EQ(dx, (Vec2{0.0, 0.0}));
  for (double v : g.values()) EXPECT_EQ(v, 0.0);
}

TEST(MlpBackward, MatchesCentralDifferences) {
  const int h = 6;
  auto p = random_params(h, 3);
  const Vec2 x{0.7, -1.1};
  const double t = 0.35;
  const Vec2 u{0.8, -1.3};
  GradBuffer g(h);
  const Vec2 dx = velocity_backward(p, x, t, u, g);
  const double step = 1e-5;
  auto f = [&](const PolicyParams& q, Vec2 xx) { return dot(u, velocity(q, xx, t)); };
  for (std::size_t i = 0; i < p.size(); ++i) {
    const double orig = p.values()[i];
    p.values()[i] = orig + step;
    const double fp = f(p, x);
    p.values()[i] = orig - step;
    const double fm = f(p, x);
    p.values()[i] = orig;
    const double fd = (fp - fm) / (2 * step);
    const double a = g.values()[i];
    const double denom = std::max({std::abs(a), std::abs(fd), 1e-6});
    EXPECT_LT(std::abs(a - fd) / denom, 1e-5) << "param " << i;
  }
  const double fdx = (f(p, {x.x + step, x.y}) - f(p, {x.x - step, x.y})) / (2 * step);
  const double fdy = (f(p, {x.x, x.y + step}) - f(p, {x.x, x.y - step})) / (2 * step);
  EXPECT_NEAR(dx.x, fdx, 1e-7);
  EXPECT_NEAR(dx.y, fdy, 1e-7);
}

TEST(MlpBackward, LinearInUpstream) {
  const auto p = random_params(10, 4);
  const Vec2 x{-0.2, 0.9};
  const Vec2 u1{0.5, 1.0};
  const Vec2 u2{-1.5, 0.25};
  GradBuffer g12(10), g1(10), g2(10);
  const Vec2 d12 = velocity_backward(p, x, 0.6, u1 + u2, g12);
  const Vec2 d1 = velocity_backward(p, x, 0.6, u1, g1);
  const Vec2 d2 = velocity_backward(p, x, 0.6, u2, g2);
  accumulate(g1, g2);
  for (std::size_t i = 0; i < g1.size(); ++i) EXPECT_NEAR(g12.values()[i], g1.values()[i], 1e-12);
  EXPECT_NEAR(d12.x, d1.x + d2.x, 1e-12);
  EXPECT_NEAR(d12.y, d1.y + d2.y, 1e-12);
}

TEST(Adam, FirstStepMovesEachWeightByLr) {
  PolicyParams p(4);
  GradBuffer g(4);
  for (std::size_t i = 0; i < g.size(); ++i) g.values()[i] = (i % 2 == 0) ? 3.0 : -0.01;
  Adam adam(p, AdamConfig{.lr = 0.05});
  adam.step(p, g);
  for (std::size_t i = 0; i < p.size(); ++i) {
    EXPECT_NEAR(p.values()[i], (i % 2 == 0) ? -0.05 : 0.05, 1e-7);
  }
  EXPECT_EQ(adam.steps_taken(), 1);
}

TEST(Adam, NonFiniteResultThrows) {
  PolicyParams p(4);
  GradBuffer g(4);
  g.values()[0] = std::nan("");
  Adam adam(p, AdamConfig{});
  EXPECT_THROW(adam.step(p, g), NumericalError);
}

TEST(FlowMatching, ParallelMatchesSerial) {
  const auto p = random_params(16, 5, 0.3);
  const auto batch = draw_flow_batch(origin_mixture(), 333, 9);
  GradBuffer gs(16), gp(16);
  const double ls = flow_matching_loss_serial(p, batch, &gs);
  const double lp = flow_matching_loss(p, batch, &gp);
  EXPECT_NEAR(ls, lp, 1e-12 * std::abs(ls));
  for (std::size_t i = 0; i < gs.size(); ++i) {
    EXPECT_NEAR(gs.values()[i], gp.values()[i], 1e-12 * (1.0 + std::abs(gs.values()[i])));
  }
  // The parallel reduction order is fixed.
  GradBuffer gp2(16);
  EXPECT_EQ(flow_matching_loss(p, batch, &gp2), lp);
  EXPECT_EQ(gp2, gp);
}

TEST(FlowMatching, BatchGeometry) {
  const auto batch = draw_flow_batch(origin_mixture(), 200, 1);
  for (const auto& s : batch) {
    EXPECT_GE(s.t, 0.0);
    EXPECT_LE(s.t, 1.0);
    // x_t = x0 + t (x1 - x0) for some x0, x1; check x1 = x_t + (1 - t) target.
    EXPECT_TRUE(is_finite(s.x_t + (1.0 - s.t) * s.target));
  }
  EXPECT_THROW(flow_matching_loss(PolicyParams(4), {}, nullptr), ValidationError);
}

TEST(Pretrain, LearnsOriginGaussianAndIsDeterministic) {
  PretrainConfig cfg;
  cfg.hidden = 32;
  cfg.steps = 600;
  cfg.batch = 128;
  cfg.seed = 21;
  const auto a = pretrain_rectified_flow(origin_mixture(), cfg);
  EXPECT_LT(a.final_loss, a.initial_loss);
  const auto xs = ode_samples(a.params, NoiseSchedule::linear(28), 1000, 5);
  Vec2 mean{};
  for (auto x : xs) mean += x;
  mean *= 1.0 / 1000.0;
  EXPECT_LT(norm(mean), 0.2);
  const auto b = pretrain_rectified_flow(origin_mixture(), cfg);
  EXPECT_EQ(a.params, b.params);
}

TEST(Pretrain, DivergenceNamesStep) {
  PretrainConfig cfg;
  cfg.hidden = 8;
  cfg.steps = 50;
  cfg.batch = 16;
  cfg.lr = 1e300;
  try {
    pretrain_rectified_flow(origin_mixture(), cfg);
    FAIL() << "expected divergence";
  } catch (const NumericalError& e) {
    EXPECT_NE(std::string(e.what()).find("step"), std::string::npos);
  }
}

TEST(Checkpoint, RoundTripAndLayout) {
  const auto p = random_params(12, 6);
  const auto bytes = serialize_params(p);
  ASSERT_EQ(bytes.size(), 16 + 8 * p.size());
  EXPECT_EQ(std::string(bytes.begin(), bytes.begin() + 4), "TMPW");
  EXPECT_EQ(bytes[4], kCheckpointVersion);
  EXPECT_EQ(bytes[8], 12);
  EXPECT_EQ(deserialize_params(bytes), p);
}

TEST(Checkpoint, RejectsCorruptBytes) {
  auto bytes = serialize_params(random_params(4, 7));
  auto bad_magic = bytes;
  bad_magic[0] = 'X';
  EXPECT_THROW(deserialize_params(bad_magic), ValidationError);
  auto truncated = bytes;
  truncated.pop_back();
  EXPECT_THROW(deserialize_params(truncated), ValidationError);
  auto bad_version = bytes;
  bad_version[4] = 9;
  EXPECT_THROW(deserialize_params(bad_version), ValidationError);
}

TEST(Checkpoint, FileRoundTrip) {
  const auto p = random_params(5, 8);
  const auto path = std::filesystem::temp_directory_path() / "tmpo_test_ckpt.bin";
  save_params(p, path);
  EXPECT_EQ(load_params(path), p);
  std::filesystem::remove(path);
  EXPECT_THROW(load_params(path), ValidationError);
}

}  // namespace
}  // namespace tmpo
