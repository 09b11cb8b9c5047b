#include "tmpo/objectives.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <string>

#include "tmpo/error.hpp"
#include "tmpo/reward_field.hpp"

namespace tmpo {

void ClipConfig::validate() const {
  require(epsilon > 0.0 && epsilon < 1.0, "clip epsilon must lie in (0, 1)");
  require(beta_start > 0.0 && beta_start <= beta_end, "need 0 < beta_start <= beta_end");
  require(warmup_steps >= 1, "warmup_steps must be >= 1");
}

double beta_at_step(const ClipConfig& cfg, int step) {
  require(step >= 0, "step must be >= 0");
  if (step >= cfg.warmup_steps) return cfg.beta_end;
  const double f = static_cast<double>(step) / cfg.warmup_steps;
  return cfg.beta_start + (cfg.beta_end - cfg.beta_start) * f;
}

Advantage softmax_tb_advantage(std::span<const double> logps, const dist::RewardVec& rewards) {
  require(logps.size() >= 2, "advantage needs K >= 2");
  require(logps.size() == rewards.rewards.size(), "logps and rewards differ in length");
  const dist::FiniteDist q = dist::boltzmann_target(rewards);
  std::vector<double> scaled(rewards.rewards.size());
  for (std::size_t i = 0; i < scaled.size(); ++i) scaled[i] = rewards.beta * rewards.rewards[i];
  const auto log_q = dist::log_softmax(scaled);
  const auto log_p = dist::log_softmax(logps);
  Advantage out{q, dist::softmax(logps), std::vector<double>(logps.size())};
  for (std::size_t i = 0; i < logps.size(); ++i) out.a[i] = log_q[i] - log_p[i];
  return out;
}

double ratio_norm_correction(Vec2 mu_new, Vec2 mu_old, double gamma) {
  require(gamma > 0.0, "gamma must be > 0");
  return squared_norm(mu_new - mu_old) / (2.0 * gamma * gamma * kStateDim);
}

double ratio_norm_step(double logp_new, double logp_old, Vec2 mu_new, Vec2 mu_old, double gamma) {
  return (logp_new - logp_old) + ratio_norm_correction(mu_new, mu_old, gamma);
}

std::vector<double> GroupBatch::logp_totals() const {
  std::vector<double> out;
  out.reserve(trajectories.size());
  for (const auto& t : trajectories) out.push_back(t.logp_total);
  return out;
}

namespace {

GroupBatch base_batch(std::vector<Trajectory> trajectories, std::vector<double> rewards,
                      double beta) {
  require(trajectories.size() >= 2, "a group needs K >= 2 trajectories");
  require(trajectories.size() == rewards.size(), "one reward per trajectory is required");
  GroupBatch b;
  b.trajectories = std::move(trajectories);
  b.rewards = {std::move(rewards), beta};
  for (const auto& t : b.trajectories) {
    b.old_logps.push_back(t.step_logps);
    b.old_mus.push_back(t.mus);
  }
  return b;
}

}  // namespace

GroupBatch make_tmpo_batch(std::vector<Trajectory> trajectories, std::vector<double> rewards,
                           double beta) {
  GroupBatch b = base_batch(std::move(trajectories), std::move(rewards), beta);
  Advantage adv = softmax_tb_advantage(b.logp_totals(), b.rewards);
  b.q = std::move(adv.q);
  b.p = std::move(adv.p);
  b.advantages = std::move(adv.a);
  b.kind = AdvantageKind::kSoftmaxTb;
  return b;
}

GroupBatch make_grpo_batch(std::vector<Trajectory> trajectories, std::vector<double> rewards,
                           double beta) {
  GroupBatch b = base_batch(std::move(trajectories), std::move(rewards), beta);
  const RewardReport z = group_zscore(b.rewards.rewards);
  const auto logps = b.logp_totals();
  b.q = dist::boltzmann_target(b.rewards);
  b.p = dist::softmax(logps);
  b.advantages = z.zscored;
  b.degenerate_rewards = z.degenerate;
  b.kind = AdvantageKind::kGroupZScore;
  return b;
}

namespace {

ClipCase classify(double w, double a, double eps) {
  if (w >= 1.0 - eps && w <= 1.0 + eps) return ClipCase::kInRegion;
  if ((a > 0.0 && w > 1.0 + eps) || (a < 0.0 && w < 1.0 - eps)) return ClipCase::kSilenced;
  return ClipCase::kCorrective;
}

// d(mu)/d(v) for the SDE drift at step s.
double drift_velocity_coef(const NoiseSchedule& sched, int s, double gamma) {
  const double sigma = sched.sigma(s);
  return (1.0 + gamma * gamma * (1.0 - sigma) / (2.0 * sigma)) * sched.dt(s);
}

NoiseSchedule schedule_for(const GroupBatch& batch) {
  if (batch.schedule) return *batch.schedule;
  const Trajectory& t = batch.trajectories.front();
  require(t.states.size() >= 2, "trajectory has no steps");
  return NoiseSchedule::linear(static_cast<int>(t.states.size()) - 1);
}

LossResult clipped_surrogate(const GroupBatch& batch, const PolicyParams& params,
                             const ClipConfig& cfg, GradBuffer& grads,
                             const SurrogateOptions& options) {
  cfg.validate();
  const std::size_t K = batch.size();
  require(K >= 2, "a group needs K >= 2 trajectories");
  require(batch.advantages.size() == K && batch.old_logps.size() == K &&
              batch.old_mus.size() == K,
          "batch is missing frozen rollout data");
  require(grads.hidden() == params.hidden(), "gradient shape mismatch");
  require(options.kl_coef >= 0.0, "kl coefficient must be >= 0");
  require(options.kl_coef == 0.0 || options.reference != nullptr,
          "kl penalty needs a reference policy");

  const NoiseSchedule sched = schedule_for(batch);
  const double inv_k = 1.0 / static_cast<double>(K);
  LossResult res;
  res.clip.cases.resize(K);
  res.clip.ratios.resize(K);

  // KL term normaliser: number of policy-dependent transitions in the group.
  long n_sde = 0;
  for (const auto& t : batch.trajectories) {
    for (std::size_t j = 0; j < t.kinds.size(); ++j) {
      if (t.kinds[j] == BranchKind::kSde && t.gammas[j] > 0.0) ++n_sde;
    }
  }

  for (std::size_t i = 0; i < K; ++i) {
    const Trajectory& t = batch.trajectories[i];
    const auto now = replay_steps(params, t, sched);
    const double a = batch.advantages[i];

    std::vector<StepEval> held;
    if (options.correction_params != nullptr) held = replay_steps(*options.correction_params, t, sched);
    const auto& corr_src = options.correction_params != nullptr ? held : now;

    double log_w = 0.0;
    for (std::size_t j = 0; j < now.size(); ++j) {
      if (t.kinds[j] != BranchKind::kSde || now[j].gamma <= 0.0) continue;
      log_w += (now[j].logp_mean - batch.old_logps[i][j]) +
               ratio_norm_correction(corr_src[j].mu, batch.old_mus[i][j], now[j].gamma);
    }
    const double w = std::exp(log_w);
    const double w_clip = std::clamp(w, 1.0 - cfg.epsilon, 1.0 + cfg.epsilon);
    const double unclipped = w * a;
    const double clipped = w_clip * a;
    const bool unclipped_active = unclipped <= clipped;
    const double term = std::min(unclipped, clipped);
    if (!std::isfinite(term)) {
      throw NumericalError("non-finite surrogate for trajectory " + std::to_string(i));
    }
    res.surrogate -= inv_k * term;
    res.clip.ratios[i] = w;
    const ClipCase c = classify(w, a, cfg.epsilon);
    res.clip.cases[i] = c;
    switch (c) {
      case ClipCase::kInRegion: ++res.clip.in_region; break;
      case ClipCase::kSilenced: ++res.clip.silenced; break;
      case ClipCase::kCorrective: ++res.clip.corrective; break;
    }

    const double g_logw = unclipped_active ? -inv_k * a * w : 0.0;
    for (std::size_t j = 0; j < now.size(); ++j) {
      if (t.kinds[j] != BranchKind::kSde || now[j].gamma <= 0.0) continue;
      const int s = t.branch_steps[j];
      const auto si = static_cast<std::size_t>(s);
      const double g2 = now[j].gamma * now[j].gamma;
      const double b = drift_velocity_coef(sched, s, now[j].gamma);
      Vec2 up_mu;
      if (g_logw != 0.0) {
        // d logp / d mu = (child - mu) / (2 gamma^2) per dimension-mean.
        up_mu = up_mu + (g_logw * 0.5 / g2) * (t.states[si + 1] - now[j].mu);
      }
      if (options.kl_coef > 0.0) {
        const Vec2 mu_ref =
            sde_mean(t.states[si],
                     velocity(*options.reference, t.states[si], sched.sigma(s)),
                     sched.sigma(s), sched.dt(s), now[j].gamma);
        const double scale_kl = options.kl_coef / static_cast<double>(n_sde);
        const Vec2 d = now[j].mu - mu_ref;
        res.kl_penalty += scale_kl * squared_norm(d) / (2.0 * g2 * kStateDim);
        up_mu = up_mu + (scale_kl / (g2 * kStateDim)) * d;
      }
      if (up_mu.x != 0.0 || up_mu.y != 0.0) {
        velocity_backward(params, t.states[si], sched.sigma(s), b * up_mu, grads);
      }
    }
  }
  res.loss = res.surrogate + res.kl_penalty;
  if (!std::isfinite(res.loss)) throw NumericalError("non-finite loss");
  return res;
}

}  // namespace

LossResult tmpo_loss_and_grad(const GroupBatch& batch, const PolicyParams& params,
                              const ClipConfig& cfg, GradBuffer& grads,
                              const SurrogateOptions& options) {
  return clipped_surrogate(batch, params, cfg, grads, options);
}

LossResult grpo_loss_and_grad(const GroupBatch& batch, const PolicyParams& params,
                              const ClipConfig& cfg, GradBuffer& grads,
                              const SurrogateOptions& options) {
  if (batch.degenerate_rewards) {
    LossResult res;
    res.degenerate = true;
    res.clip.cases.assign(batch.size(), ClipCase::kInRegion);
    res.clip.ratios.assign(batch.size(), 1.0);
    res.clip.in_region = static_cast<int>(batch.size());
    return res;
  }
  return clipped_surrogate(batch, params, cfg, grads, options);
}

KlDiagnostics kl_diagnostics(const GroupBatch& batch) {
  KlDiagnostics d;
  const auto fkl = dist::forward_kl(batch.q, batch.p);
  const auto rkl = dist::forward_kl(batch.p, batch.q);
  d.fkl = fkl.nats;
  d.rkl = rkl.nats;
  d.tv = dist::total_variation(batch.q, batch.p);
  // Small slack absorbs rounding when q and p nearly coincide.
  d.pinsker_ok = d.tv <= std::sqrt(d.fkl / 2.0) + 1e-12;
  for (std::size_t i = 0; i < batch.q.size(); ++i) {
    if (batch.q[i] == 0.0) continue;
    d.weighted_adv += batch.q[i] * (std::log(batch.q[i]) - std::log(batch.p[i]));
  }
  if (fkl.finite() && !(std::abs(d.weighted_adv - d.fkl) < 1e-10)) {
    throw std::logic_error("sum q_i A_i differs from KL(q || p)");
  }
  return d;
}

}  // namespace tmpo
