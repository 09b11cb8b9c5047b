#pragma once

// The 2-D Gaussian-mixture toy environment: data distribution for
// pretraining and the smooth multimodal reward used during post-training.

#include <cstdint>
#include <span>
#include <vector>

#include "tmpo/vec2.hpp"

namespace tmpo {

// Symmetric 2x2 matrix [[xx, xy], [xy, yy]].
struct Sym2 {
  double xx = 1.0;
  double xy = 0.0;
  double yy = 1.0;
};

struct MixtureComponent {
  Vec2 mean;
  Sym2 cov;
  double weight = 1.0;
  double reward_value = 0.0;
};

struct MixtureSpec {
  std::vector<MixtureComponent> components;
  double background_reward = 0.0;

  // Throws ValidationError unless weights sum to 1 (1e-9), every covariance
  // is SPD, and there is at least one rewarded and one non-reward component.
  void validate() const;

  // Components whose reward exceeds the background.
  std::vector<std::size_t> rewarded_components() const;
};

// Five modes on a circle of radius 4 with 0.15*I covariances. Four modes
// carry weight 0.24 and one rare mode carries 0.04; see README for the
// reward assigned to each.
MixtureSpec default_mixture();

// i.i.d. draws from the mixture; bit-identical for a given seed.
std::vector<Vec2> sample_data(const MixtureSpec& spec, std::size_t n, std::uint64_t seed);

// R(x) = b + sum_c (r_c - b) exp(-1/2 (x - m_c)^T C_c^{-1} (x - m_c)).
double reward(const MixtureSpec& spec, Vec2 x);

// Rewards a batch of terminals in order.
std::vector<double> rewards(const MixtureSpec& spec, std::span<const Vec2> xs);

struct RewardReport {
  std::vector<double> raw;
  std::vector<double> zscored;
  double mean = 0.0;
  double stddev = 0.0;      // population standard deviation
  bool degenerate = false;  // stddev <= 1e-8, all z-scores are zero
};

inline constexpr double kZScoreEpsilon = 1e-8;

// (raw_i - mean) / (stddev + 1e-8) within the group; zeros when the group
// has no spread.
RewardReport group_zscore(std::span<const double> raw);

// Rotates every mean and covariance of `spec` by `angle` radians about the
// origin. Used by property tests and by the rotated-preset variants.
MixtureSpec rotated(const MixtureSpec& spec, double angle);

}  // namespace tmpo
