// tmpo: pretrain, post-train, ablate, check.
//
// Exit codes: 0 success, 1 validation error, 2 numerical failure.

#include <cstdio>
#include <fstream>
#include <iostream>
#include <optional>
#include <stdexcept>
#include <string>

#include <CLI11.hpp>

#include "tmpo/checks.hpp"
#include "tmpo/error.hpp"
#include "tmpo/runner.hpp"

namespace {

struct Common {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string out;
  std::string algorithm;
};

void add_common(CLI::App* cmd, Common& c) {
  cmd->add_option("--config", c.config, "key = value run configuration file");
  cmd->add_option("--seed", c.seed, "overrides the config seed");
  cmd->add_option("--out", c.out, "output directory (created if missing)");
  cmd->add_option("--algorithm", c.algorithm, "tmpo or grpo");
}

tmpo::RunConfig resolve(const Common& c) {
  tmpo::RunConfig cfg = c.config.empty() ? tmpo::parse_config("") : tmpo::load_config(c.config);
  if (c.seed) {
    cfg.seed = *c.seed;
    cfg.pretrain.seed = *c.seed;
  }
  if (!c.out.empty()) cfg.out = c.out;
  if (!c.algorithm.empty()) cfg.post.algorithm = tmpo::parse_algorithm(c.algorithm);
  cfg.validate();
  return cfg;
}

void print_eval(const char* label, const tmpo::EvalMetrics& e) {
  std::printf("%s: mean_reward=%.4f lgmd=%.4f cosine=%.4f max_fraction=%.3f min_rewarded=%.3f\n",
              label, e.mean_reward, e.lgmd, e.cosine_diversity, e.max_fraction,
              e.min_rewarded_fraction);
  std::printf("  occupancy:");
  for (double f : e.fractions) std::printf(" %.3f", f);
  std::printf("\n");
}

int run(int argc, char** argv) {
  CLI::App app{"Trajectory-matching post-training of a toy rectified-flow model"};
  app.require_subcommand(1);

  Common pre_opts;
  auto* pre = app.add_subcommand("pretrain", "fit the flow model to the mixture and save a checkpoint");
  add_common(pre, pre_opts);

  Common post_opts;
  std::string dump_tree;
  auto* post = app.add_subcommand("posttrain", "post-train from a checkpoint (pretrains if none)");
  add_common(post, post_opts);
  post->add_option("--dump-tree", dump_tree, "write one rollout tree as JSON lines before training");

  Common abl_opts;
  int n_seeds = 1;
  auto* abl = app.add_subcommand("ablate", "run full / beta-fixed / no-tree / fixed-branch variants");
  add_common(abl, abl_opts);
  abl->add_option("--seeds", n_seeds, "number of consecutive seeds per variant")->check(CLI::PositiveNumber);

  std::uint64_t check_seed = 2024;
  auto* chk = app.add_subcommand("check", "run the invariant suite");
  chk->add_option("--seed", check_seed, "seed for the randomized checks");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 1;
  }

  if (pre->parsed()) {
    const auto cfg = resolve(pre_opts);
    const auto run = tmpo::run_pretrain(cfg);
    std::printf("pretrain: loss %.5f -> %.5f over %d steps\n", run.result.initial_loss,
                run.result.final_loss, cfg.pretrain.steps);
    print_eval("pretrained", run.eval);
    std::printf("checkpoint: %s\n", (cfg.out / "checkpoint.bin").string().c_str());
    return 0;
  }

  if (post->parsed()) {
    const auto cfg = resolve(post_opts);
    if (!dump_tree.empty()) {
      const tmpo::PolicyParams params =
          cfg.checkpoint.empty() ? tmpo::run_pretrain(cfg).result.params
                                 : tmpo::load_params(cfg.checkpoint);
      const auto& p = cfg.post;
      tmpo::BranchSchedule bs{p.early, p.late, p.kappa, 1, p.train_steps - 1, 0.0, p.branching};
      tmpo::Rng rng = tmpo::make_stream(cfg.seed, 0, 0);
      const auto tree = tmpo::rollout_tree(params, tmpo::NoiseSchedule::linear(p.train_steps), bs,
                                           {p.branching, {p.eta}, p.root_policy, p.root_prior_logp}, rng);
      std::ofstream f(dump_tree);
      if (!f) throw tmpo::ValidationError("cannot write " + dump_tree);
      tmpo::write_tree_jsonl(tree, f);
    }
    const auto run = tmpo::run_posttrain(cfg);
    std::printf("%s: %d iterations, %ld velocity evaluations\n",
                tmpo::to_string(cfg.post.algorithm).c_str(), cfg.post.steps, run.total_velocity_evals);
    print_eval("final", run.final_eval);
    std::printf("outputs: %s\n", cfg.out.string().c_str());
    return 0;
  }

  if (abl->parsed()) {
    const auto cfg = resolve(abl_opts);
    std::vector<std::uint64_t> seeds;
    for (int i = 0; i < n_seeds; ++i) seeds.push_back(cfg.seed + static_cast<std::uint64_t>(i));
    const auto res = tmpo::run_ablation_suite(cfg, seeds);
    std::printf("%-14s %12s %10s %10s %12s %14s\n", "variant", "mean_reward", "fkl", "lgmd",
                "max_fraction", "evals/iter");
    for (const auto& r : res.summary) {
      std::printf("%-14s %12.4f %10.4f %10.4f %12.3f %14.1f\n", r.variant.c_str(),
                  r.final_mean_reward, r.final_fkl, r.lgmd, r.max_fraction,
                  r.velocity_evals_per_iter);
    }
    std::printf("table: %s\n", (cfg.out / "ablation.csv").string().c_str());
    return 0;
  }

  const auto results = tmpo::run_invariant_checks(check_seed);
  bool ok = true;
  for (const auto& r : results) {
    std::printf("%s %2d %s (%.2fs) %s\n", r.passed ? "PASS" : "FAIL", r.id, r.name.c_str(),
                r.seconds, r.detail.c_str());
    ok = ok && r.passed;
  }
  return ok ? 0 : 2;
}

}  // namespace

int main(int argc, char** argv) {
  try {
    return run(argc, argv);
  } catch (const tmpo::ValidationError& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  } catch (const tmpo::NumericalError& e) {
    std::fprintf(stderr, "numerical failure: %s\n", e.what());
    return 2;
  } catch (const std::logic_error& e) {
    std::fprintf(stderr, "numerical failure: %s\n", e.what());
    return 2;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
}
