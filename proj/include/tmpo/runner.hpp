#pragma once

// Run configuration, pretraining and post-training loops, the ablation
// suite, and file outputs (CSV, JSON, SVG).

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "tmpo/flow_net.hpp"
#include "tmpo/objectives.hpp"
#include "tmpo/reward_field.hpp"
#include "tmpo/tree_sampler.hpp"

namespace tmpo {

enum class Algorithm { kTmpo, kGrpo };

Algorithm parse_algorithm(const std::string& name);
std::string to_string(Algorithm a);

struct PosttrainConfig {
  Algorithm algorithm = Algorithm::kTmpo;
  int steps = 200;
  double lr = 1e-3;
  int trees = 8;          // G
  int inner_updates = 2;  // clipped updates per rollout batch
  int train_steps = 6;    // S during rollouts
  int eval_steps = 28;    // S for evaluation samples
  int branching = 3;      // B
  int group_size = 0;     // K; 0 means B^T
  std::vector<int> early{1, 2, 3};
  std::vector<int> late{1, 3, 5};
  double kappa = 6.0;
  double eta = 0.7;
  ClipConfig clip;
  std::optional<double> fixed_beta;  // overrides the warm-up schedule
  bool fixed_branch = false;         // branch at `early` every iteration
  bool no_tree = false;              // K independent rollouts
  std::optional<double> kl_coef;     // unset: 0 for tmpo, 0.03 for grpo
  RootPolicy root_policy = RootPolicy::kIndependentSeedsAtFirstStep;
  bool root_prior_logp = false;
  double grad_clip = 0.0;  // global L2 clip; 0 disables
  bool ema = false;        // evaluate an EMA of the parameters
  double ema_decay = 0.9;
  int ema_interval = 8;

  int branch_count() const { return static_cast<int>(early.size()); }
  int leaves_per_tree() const;
  double effective_kl_coef() const;
};

struct EvalConfig {
  int interval = 50;
  int samples = 1000;
  std::uint64_t seed = 12345;
};

struct RunConfig {
  MixtureSpec mixture = default_mixture();
  std::uint64_t seed = 0;
  PretrainConfig pretrain;
  PosttrainConfig post;
  EvalConfig eval;
  std::filesystem::path out = "runs/default";
  std::filesystem::path checkpoint;  // optional pretrained weights

  // Cross-module checks: B^T == K, branch positions inside (0, S), ...
  void validate() const;
};

// Flat `key = value` text; '#' starts a comment. Unknown keys are rejected.
RunConfig parse_config(const std::string& text);
RunConfig load_config(const std::filesystem::path& path);

struct EvalMetrics {
  int iteration = 0;
  double mean_reward = 0.0;
  double lgmd = 0.0;
  double cosine_diversity = 0.0;
  double max_fraction = 0.0;
  double min_rewarded_fraction = 0.0;
  std::vector<double> fractions;
};

// ODE samples at the evaluation step count plus their statistics.
EvalMetrics evaluate(const RunConfig& cfg, const PolicyParams& params, int iteration,
                     std::vector<Vec2>* samples = nullptr,
                     std::vector<std::size_t>* assignment = nullptr);

struct IterationLog {
  int iteration = 0;
  double beta = 0.0;
  double loss = 0.0;
  double surrogate = 0.0;
  double kl_penalty = 0.0;
  double fkl = 0.0;
  double rkl = 0.0;
  double tv = 0.0;
  int in_region = 0;
  int silenced = 0;
  int corrective = 0;
  double mean_reward = 0.0;
  double grad_norm = 0.0;
  long velocity_evals = 0;
  int degenerate_groups = 0;
  std::vector<int> branch_steps;  // of the first tree
};

struct PretrainRun {
  PretrainResult result;
  EvalMetrics eval;
};

struct PosttrainRun {
  PolicyParams params;
  std::vector<IterationLog> log;
  std::vector<EvalMetrics> evals;
  EvalMetrics final_eval;
  long total_velocity_evals = 0;
};

// Writes checkpoint.bin, pretrain_loss.csv, samples_pretrained.csv and
// pretrained.svg under cfg.out (nothing is written when cfg.out is empty).
PretrainRun run_pretrain(const RunConfig& cfg);

// Loads cfg.checkpoint or pretrains first, then post-trains. Writes
// train_log.csv, eval_log.csv, samples_final.csv, final.svg and
// summary.json under cfg.out.
PosttrainRun run_posttrain(const RunConfig& cfg);
PosttrainRun run_posttrain(const RunConfig& cfg, const PolicyParams& initial);

struct AblationRow {
  std::string variant;
  std::uint64_t seed = 0;
  double final_mean_reward = 0.0;
  double final_fkl = 0.0;
  double lgmd = 0.0;
  double cosine_diversity = 0.0;
  double max_fraction = 0.0;
  double min_rewarded_fraction = 0.0;
  double velocity_evals_per_iter = 0.0;
  long total_velocity_evals = 0;
};

struct AblationResult {
  std::vector<AblationRow> runs;     // one per (variant, seed)
  std::vector<AblationRow> summary;  // one per variant, averaged over seeds
};

inline const std::vector<std::string>& ablation_variants() {
  static const std::vector<std::string> v{"full", "beta_fixed_1", "no_tree", "fixed_branch"};
  return v;
}

RunConfig ablation_variant(const RunConfig& base, const std::string& variant);

// Runs every variant for each seed from the same pretrained weights and
// writes ablation.csv (summary) and ablation_runs.csv (per seed).
AblationResult run_ablation_suite(const RunConfig& cfg, const std::vector<std::uint64_t>& seeds,
                                  const PolicyParams& initial);
AblationResult run_ablation_suite(const RunConfig& cfg, const std::vector<std::uint64_t>& seeds);

// Scatter plot of samples coloured by assigned component, with component
// means marked.
void write_scatter_svg(const std::filesystem::path& path, const MixtureSpec& spec,
                       std::span<const Vec2> samples, std::span<const std::size_t> assignment,
                       const std::string& title);
void write_samples_csv(const std::filesystem::path& path, std::span<const Vec2> samples,
                       std::span<const std::size_t> assignment);

}  // namespace tmpo
