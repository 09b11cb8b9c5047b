#pragma once

// Softmax trajectory-balance advantage, log-space-centred importance ratios,
// the clipped trajectory-matching loss with exact gradients, and the
// z-scored reward-maximisation baseline that shares its surrogate.

#include <optional>
#include <span>
#include <vector>

#include "tmpo/dist.hpp"
#include "tmpo/flow_net.hpp"
#include "tmpo/tree_sampler.hpp"

namespace tmpo {

struct ClipConfig {
  double epsilon = 0.2;
  double beta_start = 0.8;
  double beta_end = 2.0;
  int warmup_steps = 150;

  void validate() const;
};

// Linear warm-up from beta_start to beta_end over warmup_steps, then flat.
double beta_at_step(const ClipConfig& cfg, int step);

struct Advantage {
  dist::FiniteDist q;
  dist::FiniteDist p;
  std::vector<double> a;  // log q_i - log p_i, detached
};

// q = Boltzmann(rewards), p = softmax(logps), A = log q - log p.
Advantage softmax_tb_advantage(std::span<const double> logps, const dist::RewardVec& rewards);

// Centred per-step log importance ratio:
//   (logp_new - logp_old) + |mu_new - mu_old|^2 / (2 gamma^2 d).
// The correction term is treated as a constant by the loss gradient.
double ratio_norm_step(double logp_new, double logp_old, Vec2 mu_new, Vec2 mu_old, double gamma);

// The correction term alone.
double ratio_norm_correction(Vec2 mu_new, Vec2 mu_old, double gamma);

enum class AdvantageKind { kSoftmaxTb, kGroupZScore };

// K trajectories of one group plus everything frozen at rollout time.
struct GroupBatch {
  std::vector<Trajectory> trajectories;
  dist::RewardVec rewards;
  dist::FiniteDist q = dist::FiniteDist::uniform(2);
  dist::FiniteDist p = dist::FiniteDist::uniform(2);
  std::vector<double> advantages;
  std::vector<std::vector<double>> old_logps;  // K x T
  std::vector<std::vector<Vec2>> old_mus;      // K x T
  AdvantageKind kind = AdvantageKind::kSoftmaxTb;
  bool degenerate_rewards = false;  // z-score group without spread
  // Schedule the trajectories were rolled out on; linear over the recorded
  // state count when unset.
  std::optional<NoiseSchedule> schedule;

  std::size_t size() const { return trajectories.size(); }
  std::vector<double> logp_totals() const;
};

// Softmax-TB batch: advantages from rollout-time log-probabilities.
GroupBatch make_tmpo_batch(std::vector<Trajectory> trajectories, std::vector<double> rewards,
                           double beta);

// Reward-maximisation batch: advantages are within-group z-scores of the raw
// rewards. q and p are still filled for diagnostics (q uses `beta`).
GroupBatch make_grpo_batch(std::vector<Trajectory> trajectories, std::vector<double> rewards,
                           double beta);

enum class ClipCase : std::uint8_t {
  kInRegion = 0,    // ratio inside [1 - eps, 1 + eps]
  kSilenced = 1,    // moved past the region along the advantage: no gradient
  kCorrective = 2,  // moved against the advantage: unclipped gradient
};

struct ClipStats {
  std::vector<ClipCase> cases;   // per trajectory
  std::vector<double> ratios;    // centred trajectory ratio w_i
  int in_region = 0;
  int silenced = 0;
  int corrective = 0;
};

struct SurrogateOptions {
  // Mean-squared drift penalty against `reference` at the branch states:
  // kl_coef * mean_{i,t} |mu_theta - mu_ref|^2 / (2 gamma^2 d).
  double kl_coef = 0.0;
  const PolicyParams* reference = nullptr;
  // When set, the detached centring term is evaluated with these parameters
  // instead of the current ones. Lets a finite-difference oracle hold it
  // fixed while perturbing the weights.
  const PolicyParams* correction_params = nullptr;
};

struct LossResult {
  double loss = 0.0;          // surrogate plus any KL term
  double surrogate = 0.0;
  double kl_penalty = 0.0;
  ClipStats clip;
  bool degenerate = false;    // z-score batch with no reward spread
};

// -(1/K) sum_i min(w_i A_i, clip(w_i, 1 - eps, 1 + eps) A_i) with A frozen
// and w_i = exp(sum_t centred log-ratio). Accumulates the exact gradient
// into `grads`. Throws NumericalError naming the trajectory on a
// non-finite loss.
LossResult tmpo_loss_and_grad(const GroupBatch& batch, const PolicyParams& params,
                              const ClipConfig& cfg, GradBuffer& grads,
                              const SurrogateOptions& options = {});

// Same clipped surrogate driven by z-scored reward advantages. A group with
// no reward spread contributes zero loss and zero gradient.
LossResult grpo_loss_and_grad(const GroupBatch& batch, const PolicyParams& params,
                              const ClipConfig& cfg, GradBuffer& grads,
                              const SurrogateOptions& options = {});

struct KlDiagnostics {
  double fkl = 0.0;  // KL(q || p)
  double rkl = 0.0;  // KL(p || q)
  double tv = 0.0;
  bool pinsker_ok = true;
  double weighted_adv = 0.0;  // sum_i q_i A_i
};

// Throws std::logic_error if sum_i q_i A_i differs from KL(q || p) by
// 1e-10 or more.
KlDiagnostics kl_diagnostics(const GroupBatch& batch);

}  // namespace tmpo
