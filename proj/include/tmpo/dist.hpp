#pragma once

// Exact probability primitives over a finite group of K atoms: softmax,
// the Boltzmann target, KL / total variation / entropy, and the
// reward-maximisation-as-reverse-KL identity. All logs are natural logs.

#include <cstddef>
#include <span>
#include <vector>

namespace tmpo::dist {

// A probability vector over K >= 2 atoms. Entries are non-negative and sum
// to 1 within 1e-12; construction enforces this.
class FiniteDist {
 public:
  static constexpr double kSumTolerance = 1e-12;

  // Validates and wraps `probs`. Throws ValidationError on a bad vector.
  explicit FiniteDist(std::vector<double> probs);

  // Normalises arbitrary non-negative weights (at least one positive).
  static FiniteDist from_weights(std::vector<double> weights);
  static FiniteDist uniform(std::size_t k);

  std::size_t size() const { return probs_.size(); }
  double operator[](std::size_t i) const { return probs_[i]; }
  const std::vector<double>& probs() const { return probs_; }

 private:
  std::vector<double> probs_;
};

// Rewards of one group together with the inverse temperature applied to
// them. beta must be > 0; beta == 0 is accepted only in diagnostic mode.
struct RewardVec {
  std::vector<double> rewards;
  double beta = 1.0;
};

enum class BetaMode { kTraining, kDiagnostic };

// KL divergence in nats. A support violation (q_i > 0 where p_i == 0) is
// reported through `mode_dropped`, never as a bare infinity that could leak
// into a gradient.
struct KlValue {
  double nats = 0.0;
  bool mode_dropped = false;

  bool finite() const { return !mode_dropped; }
};

// softmax(logits). Subtracting the max logit before exponentiating changes
// nothing mathematically: the shift cancels between numerator and
// denominator, so the result is exact up to rounding.
FiniteDist softmax(std::span<const double> logits);
std::vector<double> log_softmax(std::span<const double> logits);
double log_sum_exp(std::span<const double> values);

// q_i = exp(beta R_i) / sum_j exp(beta R_j).
FiniteDist boltzmann_target(const RewardVec& r, BetaMode mode = BetaMode::kTraining);

// sum_i q_i log(q_i / p_i), with 0 log(0/p) = 0.
KlValue forward_kl(const FiniteDist& q, const FiniteDist& p);

// 1/2 sum_i |q_i - p_i|.
double total_variation(const FiniteDist& q, const FiniteDist& p);

// -sum_i p_i log p_i, with 0 log 0 = 0.
double entropy(const FiniteDist& p);

struct IdentityCheck {
  double lhs = 0.0;  // E_p[beta R]
  double rhs = 0.0;  // -KL(p||q) - H(p) + log sum exp(beta R)
  double gap = 0.0;  // |lhs - rhs|
  double reverse_kl = 0.0;
  double entropy = 0.0;
  double log_partition = 0.0;
};

// Expected (tempered) reward under p rewritten as negative reverse KL to the
// Boltzmann target, minus entropy, plus the log partition function.
IdentityCheck reverse_kl_identity_check(const FiniteDist& p, const RewardVec& r);

}  // namespace tmpo::dist
