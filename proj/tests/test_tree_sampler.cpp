#include <algorithm>
#include <cmath>
#include <numbers>
#include <random>
#include <set>
#include <sstream>

#include <gtest/gtest.h>
#include <json.hpp>

#include "tmpo/error.hpp"
#include "tmpo/tree_sampler.hpp"

namespace tmpo {
namespace {

PolicyParams random_params(int hidden, std::uint64_t seed, double scale = 0.3) {
  PolicyParams p(hidden);
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> n(0.0, scale);
  for (double& v : p.values()) v = n(rng);
  return p;
}

const NoiseSchedule kS6 = NoiseSchedule::linear(6);

TEST(NoiseSchedule, LinearAndValidation) {
  EXPECT_EQ(kS6.steps(), 6);
  EXPECT_DOUBLE_EQ(kS6.sigma(0), 1.0);
  EXPECT_DOUBLE_EQ(kS6.sigma(6), 0.0);
  EXPECT_NEAR(kS6.dt(2), -1.0 / 6.0, 1e-15);
  EXPECT_THROW(NoiseSchedule({1.0, 0.5, 0.6, 0.0}), ValidationError);
  EXPECT_THROW(NoiseSchedule({0.9, 0.0}), ValidationError);
  EXPECT_THROW(NoiseSchedule::linear(0), ValidationError);
}

TEST(OdeStep, ZeroFieldAndConstantField) {
  const PolicyParams zero(4);
  const NoiseSchedule s({1.0, 0.8, 0.0});
  EXPECT_EQ(ode_step(zero, {0.4, -0.3}, 0, s), (Vec2{0.4, -0.3}));
  PolicyParams constant(4);
  constant.b3()[0] = 1.0;
  const Vec2 x = ode_step(constant, {0.4, -0.3}, 0, s);
  EXPECT_NEAR(x.x, 0.4 - 0.2, 1e-15);
  EXPECT_EQ(x.y, -0.3);
}

TEST(OdeSample, SplitRolloutComposes) {
  const auto p = random_params(8, 1);
  const Vec2 root{0.3, -1.2};
  const NoiseSchedule s = NoiseSchedule::linear(10);
  Vec2 x = root;
  for (int k = 0; k < 5; ++k) x = ode_step(p, x, k, s);
  for (int k = 5; k < 10; ++k) x = ode_step(p, x, k, s);
  EXPECT_EQ(x, ode_sample(p, s, root));
}

TEST(NoiseMagnitude, Examples) {
  EXPECT_NEAR(noise_magnitude(0.5, -0.2, 0.7), 0.31304951684997056, 1e-15);
  EXPECT_EQ(noise_magnitude(0.5, -0.2, 0.0), 0.0);
  EXPECT_NEAR(noise_magnitude(0.8, -0.2, 0.7) / noise_magnitude(0.2, -0.2, 0.7), 4.0, 1e-12);
}

TEST(NoiseMagnitude, DegenerateLevels) {
  for (double s : {0.0, 1.0}) {
    try {
      noise_magnitude(s, -0.1, 0.7);
      FAIL();
    } catch (const ValidationError& e) {
      EXPECT_STREQ(e.what(), "degenerate noise level");
    }
  }
  EXPECT_THROW(noise_magnitude(0.5, 0.1, 0.7), ValidationError);
}

TEST(GaussianLogp, Examples) {
  EXPECT_NEAR(gaussian_logp_mean({1.0, 0.0}, {0.0, 0.0}, 1.0), -1.1689385332046727, 1e-14);
  EXPECT_NEAR(gaussian_logp_mean({2.0, 3.0}, {2.0, 3.0}, 0.5), -0.22579135264472743, 1e-14);
  EXPECT_THROW(gaussian_logp_mean({0, 0}, {0, 0}, 0.0), ValidationError);
}

TEST(SdeBranchStep, ZeroNoiseIsMode) {
  const auto p = random_params(8, 2);
  const auto st = sde_branch_step(p, {0.1, 0.2}, 2, kS6, 0.7, {0.0, 0.0});
  EXPECT_EQ(st.child, st.mu);
  EXPECT_NEAR(st.logp_mean, -0.5 * std::log(2 * std::numbers::pi * st.gamma * st.gamma), 1e-14);
  std::mt19937_64 rng(3);
  std::normal_distribution<double> n;
  for (int i = 0; i < 100; ++i) {
    const auto s2 = sde_branch_step(p, {0.1, 0.2}, 2, kS6, 0.7, {n(rng), n(rng)});
    EXPECT_LE(s2.logp_mean, st.logp_mean);
  }
  EXPECT_THROW(sde_branch_step(p, {0, 0}, 2, kS6, 0.0, {0, 0}), ValidationError);
  EXPECT_THROW(sde_branch_step(p, {0, 0}, 0, kS6, 0.7, {0, 0}), ValidationError);
}

TEST(SampleBeta, Beta33Statistics) {
  Rng rng = make_stream(10);
  const int n = 100000;
  double s = 0, s2 = 0;
  for (int i = 0; i < n; ++i) {
    const double x = sample_beta(3.0, 3.0, rng);
    ASSERT_GT(x, 0.0);
    ASSERT_LT(x, 1.0);
    s += x;
    s2 += x * x;
  }
  const double mean = s / n;
  const double var = s2 / n - mean * mean;
  EXPECT_LT(std::abs(mean - 0.5), 3 * 0.00059761430466719682);
  EXPECT_LT(std::abs(var - 0.035714285714285714) / 0.035714285714285714, 0.1);
}

TEST(SampleBeta, TinyShapesStayFinite) {
  Rng rng = make_stream(11);
  for (int i = 0; i < 2000; ++i) {
    const double x = sample_beta(6e-3, 6.0, rng);
    ASSERT_TRUE(std::isfinite(x));
    ASSERT_GE(x, 0.0);
    ASSERT_LE(x, 1.0);
  }
  EXPECT_THROW(sample_beta(0.0, 1.0, rng), ValidationError);
}

TEST(BranchSchedule, CurriculumMeans) {
  BranchSchedule b;
  for (int i = 0; i < 3; ++i) EXPECT_EQ(b.curriculum_mean(i), b.early[i]);
  b.progress = 1.0;
  for (int i = 0; i < 3; ++i) EXPECT_EQ(b.curriculum_mean(i), b.late[i]);
  b.progress = 0.5;
  EXPECT_DOUBLE_EQ(b.curriculum_mean(1), 2.5);
}

TEST(BranchSchedule, Validation) {
  BranchSchedule b;
  b.s_max = 1;
  EXPECT_THROW(b.validate(), ValidationError);
  b = BranchSchedule{};
  b.late = {1, 3};
  EXPECT_THROW(b.validate(), ValidationError);
  b = BranchSchedule{};
  b.early = {0, 2, 3};
  EXPECT_THROW(b.validate(), ValidationError);
}

TEST(SampleBranchSteps, LargeKappaRecoversCurriculum) {
  BranchSchedule b;
  b.kappa = 1e9;
  Rng rng = make_stream(12);
  for (double p : {0.0, 0.2, 0.7, 1.0}) {  // means away from .5 rounding ties
    b.progress = p;
    const auto s = sample_branch_steps(b, rng);
    for (int i = 0; i < 3; ++i) {
      EXPECT_EQ(s[i], static_cast<int>(std::floor(b.curriculum_mean(i) + 0.5)));
    }
  }
}

TEST(SampleBranchSteps, AlwaysInRange) {
  BranchSchedule b;
  Rng rng = make_stream(13);
  for (int i = 0; i < 5000; ++i) {
    b.progress = (i % 11) / 10.0;
    const auto s = sample_branch_steps(b, rng);
    ASSERT_TRUE(std::is_sorted(s.begin(), s.end()));
    for (int v : s) {
      ASSERT_GE(v, b.s_min);
      ASSERT_LE(v, b.s_max);
    }
  }
}

TEST(SeparateCollisions, Examples) {
  EXPECT_EQ(separate_collisions({1, 1, 3}, 1, 5), (std::vector<int>{1, 2, 3}));
  EXPECT_EQ(separate_collisions({5, 5, 5}, 1, 5), (std::vector<int>{3, 4, 5}));
  EXPECT_EQ(separate_collisions({2, 2, 5}, 1, 5), (std::vector<int>{2, 3, 5}));
  EXPECT_EQ(separate_collisions({1, 3, 5}, 1, 5), (std::vector<int>{1, 3, 5}));
  EXPECT_THROW(separate_collisions({1, 1, 1}, 1, 2), ValidationError);
}

TEST(RolloutTree, LeafCountAndPrefixSharing) {
  const auto p = random_params(8, 4);
  for (auto policy : {RootPolicy::kIndependentSeedsAtFirstStep, RootPolicy::kSharedRoot}) {
    Rng rng = make_stream(14);
    const std::vector<int> steps{1, 3, 5};
    const auto tree = rollout_tree_at(p, kS6, steps, {3, {0.7}, policy}, rng);
    ASSERT_EQ(tree.leaves.size(), 27u);
    for (std::size_t i = 0; i < 27; ++i) {
      const auto& a = tree.leaves[i];
      ASSERT_EQ(a.states.size(), 7u);
      EXPECT_EQ(a.terminal, a.states.back());
      // Leaves sharing the first two choices share every state up to and
      // including the third branch state.
      for (std::size_t j = 0; j < 27; ++j) {
        const auto& b = tree.leaves[j];
        if (a.choices[0] == b.choices[0]) {
          for (int k = 0; k <= 3; ++k) EXPECT_EQ(a.states[k], b.states[k]);
        }
        if (a.choices[0] == b.choices[0] && a.choices[1] == b.choices[1]) {
          for (int k = 0; k <= 5; ++k) EXPECT_EQ(a.states[k], b.states[k]);
        }
      }
    }
  }
}

TEST(RolloutTree, IndependentRootsAtFirstStep) {
  const auto p = random_params(8, 5);
  Rng rng = make_stream(15);
  const std::vector<int> steps{1, 3, 5};
  const auto tree = rollout_tree_at(p, kS6, steps, {}, rng);
  ASSERT_EQ(tree.roots.size(), 3u);
  std::set<std::pair<double, double>> distinct;
  for (const auto& leaf : tree.leaves) {
    EXPECT_EQ(leaf.kinds[0], BranchKind::kIndependentRoot);
    EXPECT_EQ(leaf.step_logps[0], 0.0);
    distinct.insert({leaf.states[0].x, leaf.states[0].y});
  }
  EXPECT_EQ(distinct.size(), 3u);

  Rng rng2 = make_stream(15);
  const auto prior = rollout_tree_at(p, kS6, steps, {3, {0.7}, {}, true}, rng2);
  const Vec2 r = prior.leaves[0].states[0];
  EXPECT_NEAR(prior.leaves[0].step_logps[0], gaussian_logp_mean(r, {0, 0}, 1.0), 1e-15);
  EXPECT_EQ(prior.leaves[0].terminal, tree.leaves[0].terminal);
}

TEST(RolloutTree, EtaZeroCollapsesToOde) {
  const auto p = random_params(8, 6);
  Rng rng = make_stream(16);
  const std::vector<int> steps{1, 3, 5};
  const auto tree = rollout_tree_at(p, kS6, steps, {3, {0.0}, RootPolicy::kSharedRoot}, rng);
  const Vec2 ode = ode_sample(p, kS6, tree.roots[0]);
  for (const auto& leaf : tree.leaves) {
    EXPECT_NEAR(leaf.terminal.x, ode.x, 1e-12);
    EXPECT_NEAR(leaf.terminal.y, ode.y, 1e-12);
    EXPECT_EQ(leaf.logp_total, 0.0);
  }
}

TEST(RolloutTree, EvalCountMatchesAnalytic) {
  // Independent counts from tests/oracle/derive.py.
  const auto p = random_params(8, 7);
  struct Case {
    std::vector<int> steps;
    int b;
    RootPolicy policy;
    long expected;
  };
  const std::vector<Case> cases{
      {{1, 3, 5}, 3, RootPolicy::kIndependentSeedsAtFirstStep, 30},
      {{1, 3, 5}, 3, RootPolicy::kSharedRoot, 26},
      {{1, 2, 3}, 3, RootPolicy::kSharedRoot, 68},
      {{2, 3, 4}, 2, RootPolicy::kSharedRoot, 17},
  };
  for (const auto& c : cases) {
    Rng rng = make_stream(17);
    const auto tree = rollout_tree_at(p, kS6, c.steps, {c.b, {0.7}, c.policy}, rng);
    EXPECT_EQ(tree.velocity_evals, c.expected);
    EXPECT_EQ(analytic_tree_evals(6, c.steps, c.b, c.policy), c.expected);
    const long k = static_cast<long>(tree.leaves.size());
    EXPECT_LT(tree.velocity_evals, k * 6);
  }
}

TEST(RolloutTree, RejectsBadSteps) {
  const auto p = random_params(4, 8);
  Rng rng = make_stream(18);
  EXPECT_THROW(rollout_tree_at(p, kS6, std::vector<int>{0, 2}, {}, rng), ValidationError);
  EXPECT_THROW(rollout_tree_at(p, kS6, std::vector<int>{2, 6}, {}, rng), ValidationError);
  EXPECT_THROW(rollout_tree_at(p, kS6, std::vector<int>{3, 3}, {}, rng), ValidationError);
  EXPECT_THROW(rollout_tree_at(p, kS6, std::vector<int>{1, 3}, {1, {0.7}}, rng), ValidationError);
}

TEST(RolloutIndependent, NoSharingAndMoreEvals) {
  const auto p = random_params(8, 9);
  Rng rng = make_stream(19);
  const std::vector<int> steps{1, 3, 5};
  const auto ind = rollout_independent(p, kS6, steps, 27, {}, rng);
  ASSERT_EQ(ind.leaves.size(), 27u);
  EXPECT_EQ(ind.velocity_evals, 27L * 6);
  std::set<std::pair<double, double>> roots;
  for (const auto& l : ind.leaves) roots.insert({l.states[0].x, l.states[0].y});
  EXPECT_EQ(roots.size(), 27u);
}

TEST(Forest, ParallelMatchesSerialAndIsDeterministic) {
  const auto p = random_params(8, 10);
  BranchSchedule b;
  const auto a = rollout_forest_serial(p, kS6, b, {}, 5, 77, 3);
  const auto c = rollout_forest(p, kS6, b, {}, 5, 77, 3);
  const auto d = rollout_forest(p, kS6, b, {}, 5, 77, 4);
  ASSERT_EQ(a.size(), c.size());
  for (std::size_t g = 0; g < a.size(); ++g) {
    ASSERT_EQ(a[g].leaves.size(), c[g].leaves.size());
    EXPECT_EQ(a[g].branch_steps, c[g].branch_steps);
    for (std::size_t i = 0; i < a[g].leaves.size(); ++i) {
      EXPECT_EQ(a[g].leaves[i].states, c[g].leaves[i].states);
      EXPECT_EQ(a[g].leaves[i].step_logps, c[g].leaves[i].step_logps);
    }
  }
  EXPECT_NE(a[0].leaves[0].terminal, d[0].leaves[0].terminal);
}

TEST(Replay, SameParamsReproduceRecords) {
  const auto p = random_params(8, 11);
  Rng rng = make_stream(20);
  const std::vector<int> steps{1, 3, 5};
  for (auto policy : {RootPolicy::kIndependentSeedsAtFirstStep, RootPolicy::kSharedRoot}) {
    const auto tree = rollout_tree_at(p, kS6, steps, {3, {0.7}, policy}, rng);
    for (const auto& leaf : tree.leaves) {
      EXPECT_EQ(replay_logp(p, leaf, kS6), leaf.step_logps);
      EXPECT_EQ(replay_terminal(p, leaf, kS6), leaf.terminal);
    }
  }
}

TEST(Replay, PerturbedWeightChangesEverySdeStep) {
  auto p = random_params(8, 12);
  Rng rng = make_stream(21);
  const std::vector<int> steps{1, 3, 5};
  const auto tree = rollout_tree_at(p, kS6, steps, {3, {0.7}, RootPolicy::kSharedRoot}, rng);
  p.w2()[5] += 0.05;
  const auto& leaf = tree.leaves[13];
  const auto lp = replay_logp(p, leaf, kS6);
  for (std::size_t t = 0; t < lp.size(); ++t) EXPECT_NE(lp[t], leaf.step_logps[t]);
}

TEST(Replay, ShapeMismatchRejected) {
  const auto p = random_params(8, 13);
  Rng rng = make_stream(22);
  const std::vector<int> steps{1, 3, 5};
  auto tree = rollout_tree_at(p, kS6, steps, {}, rng);
  auto leaf = tree.leaves[0];
  leaf.states.pop_back();
  EXPECT_THROW(replay_logp(p, leaf, kS6), ValidationError);
}

TEST(Serialization, TrajectoryRoundTrip) {
  const auto p = random_params(8, 14);
  Rng rng = make_stream(23);
  const std::vector<int> steps{1, 3, 5};
  const auto tree = rollout_tree_at(p, kS6, steps, {}, rng);
  for (const auto& leaf : tree.leaves) {
    const auto bytes = serialize_trajectory(leaf);
    EXPECT_EQ(std::string(bytes.begin(), bytes.begin() + 4), "TMPT");
    EXPECT_EQ(bytes.size(), 10u + 3 * 2 + 3 + 3 + 3 * 48 + 7 * 16 + 8);
    const auto back = deserialize_trajectory(bytes);
    EXPECT_EQ(back.branch_steps, leaf.branch_steps);
    EXPECT_EQ(back.kinds, leaf.kinds);
    EXPECT_EQ(back.choices, leaf.choices);
    EXPECT_EQ(back.noises, leaf.noises);
    EXPECT_EQ(back.gammas, leaf.gammas);
    EXPECT_EQ(back.mus, leaf.mus);
    EXPECT_EQ(back.step_logps, leaf.step_logps);
    EXPECT_EQ(back.states, leaf.states);
    EXPECT_EQ(back.terminal, leaf.terminal);
    EXPECT_EQ(back.logp_total, leaf.logp_total);
  }
  auto bytes = serialize_trajectory(tree.leaves[0]);
  bytes.push_back(0);
  EXPECT_THROW(deserialize_trajectory(bytes), ValidationError);
  bytes.resize(20);
  EXPECT_THROW(deserialize_trajectory(bytes), ValidationError);
}

TEST(Serialization, JsonLines) {
  const auto p = random_params(8, 15);
  Rng rng = make_stream(24);
  const std::vector<int> steps{2, 4};
  const auto tree = rollout_tree_at(p, kS6, steps, {2, {0.7}}, rng);
  std::stringstream ss;
  write_tree_jsonl(tree, ss);
  std::string line;
  int n = 0;
  while (std::getline(ss, line)) {
    const auto j = nlohmann::json::parse(line);
    EXPECT_TRUE(j.contains("terminal"));
    ++n;
  }
  EXPECT_EQ(n, 4);
}

TEST(OdeSamples, DeterministicForSeed) {
  const auto p = random_params(8, 16);
  const auto a = ode_samples(p, NoiseSchedule::linear(12), 300, 5);
  const auto b = ode_samples(p, NoiseSchedule::linear(12), 300, 5);
  EXPECT_EQ(a, b);
}

}  // namespace
}  // namespace tmpo
