#pragma once

// Dynamic stochastic tree sampling over a rectified-flow policy.
//
// Step k of an S-step schedule moves the state from noise level sigma_k to
// sigma_{k+1}. Most steps are deterministic Euler ODE steps; at T branch
// steps the transition is an SDE step whose Gaussian kernel spawns B
// children, so one tree yields K = B^T leaves that share every state before
// their first differing branch choice. Trajectory log-probabilities collect
// only the T stochastic transitions, as per-dimension means.

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <random>
#include <span>
#include <vector>

#include "tmpo/flow_net.hpp"
#include "tmpo/vec2.hpp"

namespace tmpo {

using Rng = std::mt19937_64;

// Independent stream for (seed, a, b): used for per-tree and per-iteration
// RNG so parallel rollouts stay reproducible.
Rng make_stream(std::uint64_t seed, std::uint64_t a = 0, std::uint64_t b = 0);

inline constexpr int kStateDim = 2;

class NoiseSchedule {
 public:
  // Linear schedule sigma_k = 1 - k / steps.
  static NoiseSchedule linear(int steps);
  // Arbitrary schedule: strictly decreasing from 1 to 0.
  explicit NoiseSchedule(std::vector<double> sigmas);

  int steps() const { return static_cast<int>(sigmas_.size()) - 1; }
  double sigma(int k) const { return sigmas_.at(static_cast<std::size_t>(k)); }
  // sigma_{k+1} - sigma_k < 0.
  double dt(int k) const { return sigma(k + 1) - sigma(k); }
  const std::vector<double>& sigmas() const { return sigmas_; }

 private:
  std::vector<double> sigmas_;
};

// Curriculum for branch positions: the mean moves linearly from `early` to
// `late` with training progress and is perturbed with a Beta draw of
// concentration kappa.
struct BranchSchedule {
  std::vector<int> early{1, 2, 3};
  std::vector<int> late{1, 3, 5};
  double kappa = 6.0;
  int s_min = 1;
  int s_max = 5;
  double progress = 0.0;
  int branching = 3;  // B

  int branch_count() const { return static_cast<int>(early.size()); }  // T
  void validate() const;
  // Deterministic curriculum position e_i + (l_i - e_i) p.
  double curriculum_mean(int i) const;
};

inline constexpr double kBetaMeanClamp = 1e-3;

// Beta(alpha, beta) draw built from two Gamma draws. Shapes below 1 are
// handled in log space so tiny shapes never produce 0/0.
double sample_beta(double alpha, double beta, Rng& rng);

// T branch step indices, sorted, each in [s_min, s_max]. Duplicates are
// possible; see separate_collisions.
std::vector<int> sample_branch_steps(const BranchSchedule& sched, Rng& rng);

// Makes sorted indices strictly increasing by pushing each collision up by
// one, then pulling back under s_max if needed. Requires
// T <= s_max - s_min + 1.
std::vector<int> separate_collisions(std::vector<int> steps, int s_min, int s_max);

// Euler ODE step: x + v(x, sigma_k) dt_k.
Vec2 ode_step(const PolicyParams& params, Vec2 x, int k, const NoiseSchedule& sched);

// eta sqrt(sigma / (1 - sigma)) sqrt(-dt). Throws on sigma in {0, 1} or
// dt >= 0. eta == 0 is a diagnostic setting and returns 0.
double noise_magnitude(double sigma, double dt, double eta);

// Marginal-preserving SDE drift at step k for noise magnitude gamma.
Vec2 sde_mean(Vec2 x, Vec2 v, double sigma, double dt, double gamma);

// Per-dimension-mean Gaussian log density of `child` under N(mu, gamma^2 I).
double gaussian_logp_mean(Vec2 child, Vec2 mu, double gamma);

struct SdeStep {
  Vec2 child;
  double logp_mean = 0.0;
  Vec2 mu;
  double gamma = 0.0;
};

// child = mu + gamma eps. Throws ValidationError when gamma <= 0.
SdeStep sde_branch_step(const PolicyParams& params, Vec2 x, int k, const NoiseSchedule& sched,
                        double eta, Vec2 eps);

enum class BranchKind : std::uint8_t {
  kSde = 0,              // Gaussian SDE transition, depends on the policy
  kIndependentRoot = 1,  // children drawn as fresh N(0, I) roots; no policy dependence
};

struct Trajectory {
  std::vector<int> branch_steps;      // T
  std::vector<BranchKind> kinds;      // T
  std::vector<int> choices;           // T child indices in [0, B)
  std::vector<Vec2> noises;           // T: eps for SDE steps, the root for root branches
  std::vector<double> gammas;         // T
  std::vector<Vec2> mus;              // T, drift under the rollout policy
  std::vector<double> step_logps;     // T per-dimension-mean log-probs
  std::vector<Vec2> states;           // S + 1 visited states, states[0] is the root
  Vec2 terminal;
  double logp_total = 0.0;
};

enum class RootPolicy {
  // A branch at step 1 draws its B children from independent root noises.
  kIndependentSeedsAtFirstStep,
  // Always share one root; step 1 branches like any other SDE step.
  kSharedRoot,
};

struct TreeOptions {
  int branching = 3;
  std::vector<double> eta{0.7};  // one value, or one per branch layer
  RootPolicy root_policy = RootPolicy::kIndependentSeedsAtFirstStep;
  // Independent roots carry log-probability 0 unless this is set, in which
  // case their per-dimension-mean N(0, I) log density is recorded.
  bool root_prior_logp = false;
};

struct RolloutTree {
  std::vector<Vec2> roots;  // 1 shared root, or B independent roots
  std::vector<int> branch_steps;
  int branching = 0;
  std::vector<Trajectory> leaves;  // B^T, ordered by branch choices
  long velocity_evals = 0;
};

// Builds the prefix-sharing tree at the given (already separated) branch
// steps under a frozen policy. eta == 0 makes every branch deterministic:
// children coincide with the ODE step and carry log-probability 0.
RolloutTree rollout_tree_at(const PolicyParams& params, const NoiseSchedule& sched,
                            std::span<const int> branch_steps, const TreeOptions& options,
                            Rng& rng);

// Samples branch steps from the curriculum, separates collisions, and
// rolls out the tree.
RolloutTree rollout_tree(const PolicyParams& params, const NoiseSchedule& sched,
                         const BranchSchedule& branch_sched, const TreeOptions& options,
                         Rng& rng);

// K fully independent trajectories with the same stochastic steps and no
// prefix sharing (the no-tree ablation).
RolloutTree rollout_independent(const PolicyParams& params, const NoiseSchedule& sched,
                                std::span<const int> branch_steps, int k,
                                const TreeOptions& options, Rng& rng);

// G trees with per-tree RNG streams make_stream(seed, iteration, g). The
// parallel version distributes trees over OpenMP threads; output order and
// content are identical to the serial reference.
std::vector<RolloutTree> rollout_forest_serial(const PolicyParams& params,
                                               const NoiseSchedule& sched,
                                               const BranchSchedule& branch_sched,
                                               const TreeOptions& options, int trees,
                                               std::uint64_t seed, std::uint64_t iteration);
std::vector<RolloutTree> rollout_forest(const PolicyParams& params, const NoiseSchedule& sched,
                                        const BranchSchedule& branch_sched,
                                        const TreeOptions& options, int trees,
                                        std::uint64_t seed, std::uint64_t iteration);

// Velocity evaluations a tree needs: sum over levels of nodes times segment
// length, with one evaluation per branching parent.
long analytic_tree_evals(int steps, std::span<const int> branch_steps, int branching,
                         RootPolicy root_policy);

struct StepEval {
  double logp_mean = 0.0;
  Vec2 mu;
  double gamma = 0.0;
};

// Re-evaluates each branch transition of `traj` under `params`. Root
// branches do not depend on the policy and return their stored values.
std::vector<StepEval> replay_steps(const PolicyParams& params, const Trajectory& traj,
                                   const NoiseSchedule& sched);
std::vector<double> replay_logp(const PolicyParams& params, const Trajectory& traj,
                                const NoiseSchedule& sched);

// Re-integrates the trajectory from its root with the recorded noises.
Vec2 replay_terminal(const PolicyParams& params, const Trajectory& traj,
                     const NoiseSchedule& sched);

// Deterministic S-step ODE sample from `root`.
Vec2 ode_sample(const PolicyParams& params, const NoiseSchedule& sched, Vec2 root);

// n ODE samples from i.i.d. N(0, I) roots; parallel over samples.
std::vector<Vec2> ode_samples(const PolicyParams& params, const NoiseSchedule& sched,
                              std::size_t n, std::uint64_t seed);

// --- trajectory records ----------------------------------------------------
//
// Binary layout (little-endian):
//   magic "TMPT", u16 version (1), u16 T, u16 S+1
//   T x u16 branch step, T x u8 kind, T x u8 choice
//   T x (f64 noise.x, f64 noise.y, f64 gamma, f64 mu.x, f64 mu.y, f64 logp)
//   (S+1) x (f64 x, f64 y) states
//   f64 logp_total
// The terminal is states.back().

std::vector<unsigned char> serialize_trajectory(const Trajectory& traj);
Trajectory deserialize_trajectory(std::span<const unsigned char> bytes);

// One JSON object per leaf, one line each.
void write_tree_jsonl(const RolloutTree& tree, std::ostream& out);

}  // namespace tmpo
