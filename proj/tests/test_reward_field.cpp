#include <cmath>
#include <numbers>
#include <vector>

#include <gtest/gtest.h>

#include "tmpo/error.hpp"
#include "tmpo/reward_field.hpp"

namespace tmpo {
namespace {

MixtureSpec single_at_origin(double reward_value = 1.0, double background = 0.0) {
  MixtureSpec s;
  s.background_reward = background;
  s.components.push_back({{0.0, 0.0}, {1.0, 0.0, 1.0}, 0.5, reward_value});
  s.components.push_back({{50.0, 0.0}, {1.0, 0.0, 1.0}, 0.5, background});
  return s;
}

TEST(MixtureSpec, DefaultPreset) {
  const auto s = default_mixture();
  ASSERT_NO_THROW(s.validate());
  ASSERT_EQ(s.components.size(), 5u);
  int full = 0, rare = 0, background = 0;
  for (const auto& c : s.components) {
    EXPECT_NEAR(norm(c.mean), 4.0, 1e-12);
    EXPECT_DOUBLE_EQ(c.cov.xx, 0.15);
    EXPECT_DOUBLE_EQ(c.cov.yy, 0.15);
    if (c.reward_value == 1.0) ++full;
    if (c.reward_value == 0.5) {
      ++rare;
      EXPECT_DOUBLE_EQ(c.weight, 0.04);
    }
    if (c.reward_value == s.background_reward) ++background;
  }
  EXPECT_EQ(full, 3);
  EXPECT_EQ(rare, 1);
  EXPECT_EQ(background, 1);
  EXPECT_EQ(s.rewarded_components().size(), 4u);
}

TEST(MixtureSpec, ValidationFailures) {
  auto s = default_mixture();
  s.components[0].weight = 0.5;
  EXPECT_THROW(s.validate(), ValidationError);

  s = default_mixture();
  s.components[1].cov = {1.0, 2.0, 1.0};  // not positive definite
  EXPECT_THROW(s.validate(), ValidationError);

  s = default_mixture();
  for (auto& c : s.components) c.reward_value = 1.0;  // no non-reward mode
  EXPECT_THROW(s.validate(), ValidationError);

  s = default_mixture();
  for (auto& c : s.components) c.reward_value = s.background_reward;  // no rewarded mode
  EXPECT_THROW(s.validate(), ValidationError);
}

TEST(SampleData, SingleComponentMean) {
  // The far component only exists to satisfy the non-reward requirement;
  // its draws are filtered out.
  const auto xs = sample_data(single_at_origin(), 20000, 3);
  double mx = 0, my = 0;
  int n = 0;
  for (auto x : xs) {
    if (norm(x) > 25.0) continue;
    mx += x.x;
    my += x.y;
    ++n;
  }
  ASSERT_GT(n, 9000);
  EXPECT_LT(std::abs(mx / n), 0.05);
  EXPECT_LT(std::abs(my / n), 0.05);
}

TEST(SampleData, TwoEqualComponentsSplitEvenly) {
  const auto xs = sample_data(single_at_origin(), 10000, 11);
  int near_origin = 0;
  for (auto x : xs) near_origin += norm(x) < 25.0 ? 1 : 0;
  EXPECT_NEAR(near_origin / 10000.0, 0.5, 0.02);
}

TEST(SampleData, DeterministicForSeed) {
  const auto a = sample_data(default_mixture(), 500, 42);
  const auto b = sample_data(default_mixture(), 500, 42);
  const auto c = sample_data(default_mixture(), 500, 43);
  EXPECT_EQ(a, b);
  EXPECT_NE(a, c);
}

TEST(Reward, PeakAndBackground) {
  const auto s = single_at_origin(1.0, 0.0);
  EXPECT_DOUBLE_EQ(reward(s, {0.0, 0.0}), 1.0);
  EXPECT_NEAR(reward(s, {25.0, -30.0}), 0.0, 1e-12);
  const auto d = default_mixture();
  EXPECT_NEAR(reward(d, {1e3, 1e3}), d.background_reward, 1e-15);
  for (const auto& c : d.components) EXPECT_NEAR(reward(d, c.mean), c.reward_value, 1e-9);
}

TEST(Reward, SwapSymmetryAtMidpoint) {
  MixtureSpec s;
  s.background_reward = 0.0;
  s.components.push_back({{-2.0, 0.0}, {0.5, 0.0, 0.5}, 0.4, 1.0});
  s.components.push_back({{2.0, 0.0}, {0.5, 0.0, 0.5}, 0.4, 1.0});
  s.components.push_back({{0.0, 9.0}, {0.5, 0.0, 0.5}, 0.2, 0.0});
  MixtureSpec swapped = s;
  std::swap(swapped.components[0], swapped.components[1]);
  EXPECT_EQ(reward(s, {0.0, 0.0}), reward(swapped, {0.0, 0.0}));
  EXPECT_NEAR(reward(s, {0.3, 0.1}), reward(s, {-0.3, 0.1}), 1e-15);
}

TEST(Reward, NonFiniteInputRejected) {
  EXPECT_THROW(reward(default_mixture(), {std::nan(""), 0.0}), ValidationError);
}

TEST(Reward, RotationInvariance) {
  const auto s = default_mixture();
  const double a = 0.7;
  const auto r = rotated(s, a);
  const Vec2 x{1.3, -2.2};
  const Vec2 rx{std::cos(a) * x.x - std::sin(a) * x.y, std::sin(a) * x.x + std::cos(a) * x.y};
  EXPECT_NEAR(reward(s, x), reward(r, rx), 1e-12);
}

TEST(GroupZScore, OracleValues) {
  const auto r = group_zscore(std::vector<double>{1.0, 2.0, 3.0});
  EXPECT_NEAR(r.zscored[0], -1.2247448563915892, 1e-12);
  EXPECT_NEAR(r.zscored[1], 0.0, 1e-15);
  EXPECT_NEAR(r.zscored[2], 1.2247448563915892, 1e-12);
  EXPECT_FALSE(r.degenerate);
  const auto two = group_zscore(std::vector<double>{0.0, 10.0});
  EXPECT_NEAR(two.zscored[0], -0.999999998, 1e-12);
  EXPECT_NEAR(two.zscored[1], 0.999999998, 1e-12);
  EXPECT_NEAR(two.stddev, 5.0, 1e-15);
}

TEST(GroupZScore, Degenerate) {
  const auto r = group_zscore(std::vector<double>{5.0, 5.0, 5.0});
  EXPECT_TRUE(r.degenerate);
  for (double z : r.zscored) EXPECT_EQ(z, 0.0);
}

TEST(GroupZScore, AffineInvariance) {
  const std::vector<double> raw{0.2, -1.4, 3.3, 0.9};
  std::vector<double> t;
  for (double v : raw) t.push_back(2.5 * v - 7.0);
  const auto a = group_zscore(raw);
  const auto b = group_zscore(t);
  for (std::size_t i = 0; i < raw.size(); ++i) EXPECT_NEAR(a.zscored[i], b.zscored[i], 1e-8);
}

}  // namespace
}  // namespace tmpo
