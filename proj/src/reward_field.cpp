#include "tmpo/reward_field.hpp"

#include <cmath>
#include <numbers>
#include <random>

#include "tmpo/error.hpp"

namespace tmpo {
namespace {

struct Chol2 {
  double l11 = 1.0;
  double l21 = 0.0;
  double l22 = 1.0;
};

bool cholesky(const Sym2& c, Chol2& out) {
  if (!(c.xx > 0.0)) return false;
  out.l11 = std::sqrt(c.xx);
  out.l21 = c.xy / out.l11;
  const double d = c.yy - out.l21 * out.l21;
  if (!(d > 0.0)) return false;
  out.l22 = std::sqrt(d);
  return true;
}

// (x - m)^T C^{-1} (x - m) for a 2x2 SPD C.
double mahalanobis_sq(Vec2 d, const Sym2& c) {
  const double det = c.xx * c.yy - c.xy * c.xy;
  return (c.yy * d.x * d.x - 2.0 * c.xy * d.x * d.y + c.xx * d.y * d.y) / det;
}

}  // namespace

void MixtureSpec::validate() const {
  require(!components.empty(), "mixture has no components");
  require(std::isfinite(background_reward) && background_reward >= 0.0,
          "background_reward must be finite and >= 0");
  double wsum = 0.0;
  bool any_rewarded = false;
  bool any_plain = false;
  for (const auto& c : components) {
    require(is_finite(c.mean), "component mean must be finite");
    require(std::isfinite(c.weight) && c.weight > 0.0, "component weight must be positive");
    require(std::isfinite(c.reward_value) && c.reward_value >= 0.0,
            "component reward must be finite and >= 0");
    Chol2 l;
    require(std::isfinite(c.cov.xy) && cholesky(c.cov, l),
            "component covariance must be symmetric positive-definite");
    wsum += c.weight;
    if (c.reward_value > background_reward) any_rewarded = true;
    if (c.reward_value == background_reward) any_plain = true;
  }
  require(std::abs(wsum - 1.0) <= 1e-9, "component weights must sum to 1");
  require(any_rewarded, "mixture needs at least one rewarded component");
  require(any_plain, "mixture needs at least one non-reward component");
}

std::vector<std::size_t> MixtureSpec::rewarded_components() const {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < components.size(); ++i) {
    if (components[i].reward_value > background_reward) out.push_back(i);
  }
  return out;
}

MixtureSpec default_mixture() {
  // Angles are spaced evenly starting at 90 degrees.
  struct Row {
    double weight;
    double reward;
  };
  constexpr Row rows[5] = {
      {0.24, 1.0},
      {0.24, 1.0},
      {0.24, 1.0},
      {0.04, 0.5},   // rare density mode
      {0.24, 0.05},  // non-reward mode
  };
  MixtureSpec spec;
  spec.background_reward = 0.05;
  for (int i = 0; i < 5; ++i) {
    const double a = std::numbers::pi / 2.0 + 2.0 * std::numbers::pi * i / 5.0;
    MixtureComponent c;
    c.mean = {4.0 * std::cos(a), 4.0 * std::sin(a)};
    c.cov = {0.15, 0.0, 0.15};
    c.weight = rows[i].weight;
    c.reward_value = rows[i].reward;
    spec.components.push_back(c);
  }
  return spec;
}

std::vector<Vec2> sample_data(const MixtureSpec& spec, std::size_t n, std::uint64_t seed) {
  spec.validate();
  std::vector<double> weights;
  std::vector<Chol2> chol(spec.components.size());
  for (std::size_t i = 0; i < spec.components.size(); ++i) {
    weights.push_back(spec.components[i].weight);
    cholesky(spec.components[i].cov, chol[i]);
  }
  std::mt19937_64 rng(seed);
  std::discrete_distribution<std::size_t> pick(weights.begin(), weights.end());
  std::normal_distribution<double> normal(0.0, 1.0);
  std::vector<Vec2> out(n);
  for (auto& x : out) {
    const std::size_t c = pick(rng);
    const double z1 = normal(rng);
    const double z2 = normal(rng);
    const Chol2& l = chol[c];
    x = spec.components[c].mean + Vec2{l.l11 * z1, l.l21 * z1 + l.l22 * z2};
  }
  return out;
}

double reward(const MixtureSpec& spec, Vec2 x) {
  require(is_finite(x), "reward: non-finite sample");
  double r = spec.background_reward;
  for (const auto& c : spec.components) {
    const double lift = c.reward_value - spec.background_reward;
    if (lift == 0.0) continue;
    r += lift * std::exp(-0.5 * mahalanobis_sq(x - c.mean, c.cov));
  }
  return r;
}

std::vector<double> rewards(const MixtureSpec& spec, std::span<const Vec2> xs) {
  std::vector<double> out;
  out.reserve(xs.size());
  for (Vec2 x : xs) out.push_back(reward(spec, x));
  return out;
}

RewardReport group_zscore(std::span<const double> raw) {
  require(raw.size() >= 2, "group_zscore needs at least 2 rewards");
  RewardReport rep;
  rep.raw.assign(raw.begin(), raw.end());
  const double n = static_cast<double>(raw.size());
  double mean = 0.0;
  for (double v : raw) mean += v;
  mean /= n;
  double var = 0.0;
  for (double v : raw) var += (v - mean) * (v - mean);
  var /= n;
  rep.mean = mean;
  rep.stddev = std::sqrt(var);
  rep.zscored.assign(raw.size(), 0.0);
  if (rep.stddev <= kZScoreEpsilon) {
    rep.degenerate = true;
    return rep;
  }
  for (std::size_t i = 0; i < raw.size(); ++i) {
    rep.zscored[i] = (raw[i] - mean) / (rep.stddev + kZScoreEpsilon);
  }
  return rep;
}

MixtureSpec rotated(const MixtureSpec& spec, double angle) {
  const double c = std::cos(angle);
  const double s = std::sin(angle);
  MixtureSpec out = spec;
  for (auto& comp : out.components) {
    const Vec2 m = comp.mean;
    comp.mean = {c * m.x - s * m.y, s * m.x + c * m.y};
    // R C R^T
    const Sym2 k = comp.cov;
    const double a11 = c * k.xx - s * k.xy;
    const double a12 = c * k.xy - s * k.yy;
    const double a21 = s * k.xx + c * k.xy;
    const double a22 = s * k.xy + c * k.yy;
    comp.cov.xx = a11 * c - a12 * s;
    comp.cov.xy = a11 * s + a12 * c;
    comp.cov.yy = a21 * s + a22 * c;
  }
  return out;
}

}  // namespace tmpo
