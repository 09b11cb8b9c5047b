#include "tmpo/dist.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <string>

#include "tmpo/error.hpp"

namespace tmpo::dist {

FiniteDist::FiniteDist(std::vector<double> probs) : probs_(std::move(probs)) {
  require(probs_.size() >= 2, "FiniteDist needs at least 2 atoms");
  double sum = 0.0;
  for (double v : probs_) {
    require(std::isfinite(v) && v >= 0.0, "FiniteDist entries must be finite and >= 0");
    sum += v;
  }
  require(std::abs(sum - 1.0) <= kSumTolerance,
          "FiniteDist entries must sum to 1 (got " + std::to_string(sum) + ")");
}

FiniteDist FiniteDist::from_weights(std::vector<double> weights) {
  double sum = 0.0;
  for (double w : weights) {
    require(std::isfinite(w) && w >= 0.0, "weights must be finite and >= 0");
    sum += w;
  }
  require(sum > 0.0, "weights must not all be zero");
  for (double& w : weights) w /= sum;
  return FiniteDist(std::move(weights));
}

FiniteDist FiniteDist::uniform(std::size_t k) {
  return FiniteDist(std::vector<double>(k, 1.0 / static_cast<double>(k)));
}

double log_sum_exp(std::span<const double> values) {
  require(!values.empty(), "log_sum_exp of an empty range");
  const double m = *std::max_element(values.begin(), values.end());
  require(std::isfinite(m), "log_sum_exp needs finite values");
  double s = 0.0;
  for (double v : values) s += std::exp(v - m);
  return m + std::log(s);
}

std::vector<double> log_softmax(std::span<const double> logits) {
  for (double v : logits) require(std::isfinite(v), "softmax logits must be finite");
  const double lse = log_sum_exp(logits);
  std::vector<double> out(logits.size());
  for (std::size_t i = 0; i < logits.size(); ++i) out[i] = logits[i] - lse;
  return out;
}

FiniteDist softmax(std::span<const double> logits) {
  require(logits.size() >= 2, "softmax needs at least 2 logits");
  for (double v : logits) require(std::isfinite(v), "softmax logits must be finite");
  const double m = *std::max_element(logits.begin(), logits.end());
  std::vector<double> e(logits.size());
  double sum = 0.0;
  for (std::size_t i = 0; i < logits.size(); ++i) {
    e[i] = std::exp(logits[i] - m);
    sum += e[i];
  }
  for (double& v : e) v /= sum;
  return FiniteDist(std::move(e));
}

FiniteDist boltzmann_target(const RewardVec& r, BetaMode mode) {
  for (double v : r.rewards) {
    if (!std::isfinite(v)) throw ValidationError("invalid reward");
  }
  require(std::isfinite(r.beta), "beta must be finite");
  if (mode == BetaMode::kTraining) {
    require(r.beta > 0.0, "beta must be > 0 outside diagnostic mode");
  } else {
    require(r.beta >= 0.0, "beta must be >= 0");
  }
  std::vector<double> logits(r.rewards.size());
  for (std::size_t i = 0; i < logits.size(); ++i) logits[i] = r.beta * r.rewards[i];
  return softmax(logits);
}

KlValue forward_kl(const FiniteDist& q, const FiniteDist& p) {
  require(q.size() == p.size(), "forward_kl: size mismatch");
  double kl = 0.0;
  for (std::size_t i = 0; i < q.size(); ++i) {
    if (q[i] == 0.0) continue;
    if (p[i] == 0.0) return {std::numeric_limits<double>::infinity(), true};
    kl += q[i] * (std::log(q[i]) - std::log(p[i]));
  }
  // Rounding can leave a value of order -1e-17 for q == p.
  return {std::max(kl, 0.0), false};
}

double total_variation(const FiniteDist& q, const FiniteDist& p) {
  require(q.size() == p.size(), "total_variation: size mismatch");
  double s = 0.0;
  for (std::size_t i = 0; i < q.size(); ++i) s += std::abs(q[i] - p[i]);
  return 0.5 * s;
}

double entropy(const FiniteDist& p) {
  double h = 0.0;
  for (double v : p.probs()) {
    if (v > 0.0) h -= v * std::log(v);
  }
  return h;
}

IdentityCheck reverse_kl_identity_check(const FiniteDist& p, const RewardVec& r) {
  require(p.size() == r.rewards.size(), "reverse_kl_identity_check: size mismatch");
  const FiniteDist q = boltzmann_target(r);
  std::vector<double> scaled(r.rewards.size());
  for (std::size_t i = 0; i < scaled.size(); ++i) scaled[i] = r.beta * r.rewards[i];

  IdentityCheck out;
  for (std::size_t i = 0; i < p.size(); ++i) out.lhs += p[i] * scaled[i];
  const KlValue rkl = forward_kl(p, q);
  require(rkl.finite(), "reverse KL needs a full-support target");
  out.reverse_kl = rkl.nats;
  out.entropy = entropy(p);
  out.log_partition = log_sum_exp(scaled);
  out.rhs = -out.reverse_kl - out.entropy + out.log_partition;
  out.gap = std::abs(out.lhs - out.rhs);
  return out;
}

}  // namespace tmpo::dist
