#include "tmpo/runner.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <functional>
#include <map>
#include <set>
#include <sstream>

#include <json.hpp>

#include "tmpo/error.hpp"
#include "tmpo/metrics.hpp"

namespace tmpo {

Algorithm parse_algorithm(const std::string& name) {
  if (name == "tmpo") return Algorithm::kTmpo;
  if (name == "grpo") return Algorithm::kGrpo;
  throw ValidationError("unknown algorithm '" + name + "' (expected tmpo or grpo)");
}

std::string to_string(Algorithm a) { return a == Algorithm::kTmpo ? "tmpo" : "grpo"; }

int PosttrainConfig::leaves_per_tree() const {
  long k = 1;
  for (int i = 0; i < branch_count(); ++i) k *= branching;
  return static_cast<int>(k);
}

double PosttrainConfig::effective_kl_coef() const {
  if (kl_coef) return *kl_coef;
  return algorithm == Algorithm::kGrpo ? 0.03 : 0.0;
}

void RunConfig::validate() const {
  mixture.validate();
  require(pretrain.hidden >= 1 && pretrain.hidden <= kMaxHidden, "model.hidden out of range");
  const auto& p = post;
  require(p.steps >= 1, "posttrain.steps must be >= 1");
  require(p.lr > 0.0, "posttrain.lr must be > 0");
  require(p.trees >= 1, "posttrain.trees must be >= 1");
  require(p.inner_updates >= 1, "posttrain.inner_updates must be >= 1");
  require(p.train_steps >= 3, "posttrain.train_steps must be >= 3");
  require(p.eval_steps >= 1, "posttrain.eval_steps must be >= 1");
  require(p.eta > 0.0, "posttrain.eta must be > 0 for training");
  require(p.grad_clip >= 0.0, "posttrain.grad_clip must be >= 0");
  require(p.ema_decay >= 0.0 && p.ema_decay < 1.0 && p.ema_interval >= 1, "invalid EMA settings");
  require(p.effective_kl_coef() >= 0.0, "posttrain.kl_coef must be >= 0");
  if (p.fixed_beta) require(*p.fixed_beta > 0.0, "posttrain.fixed_beta must be > 0");
  p.clip.validate();
  BranchSchedule bs{p.early, p.late, p.kappa, 1, p.train_steps - 1, 0.0, p.branching};
  bs.validate();
  if (p.group_size != 0) {
    require(p.group_size == p.leaves_per_tree(),
            "posttrain.group_size must equal branching^T (" +
                std::to_string(p.leaves_per_tree()) + ")");
  }
  if (p.fixed_branch) {
    for (std::size_t i = 1; i < p.early.size(); ++i) {
      require(p.early[i] > p.early[i - 1], "fixed branching needs strictly increasing early positions");
    }
  }
  require(eval.interval >= 1 && eval.samples >= 2, "invalid eval settings");
}

// --- config parsing -------------------------------------------------------------

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

double to_double(const std::string& key, const std::string& v) {
  try {
    std::size_t used = 0;
    const double d = std::stod(v, &used);
    if (used == v.size() && std::isfinite(d)) return d;
  } catch (const std::exception&) {
  }
  throw ValidationError("config key '" + key + "': expected a number, got '" + v + "'");
}

long to_long(const std::string& key, const std::string& v) {
  try {
    std::size_t used = 0;
    const long n = std::stol(v, &used);
    if (used == v.size()) return n;
  } catch (const std::exception&) {
  }
  throw ValidationError("config key '" + key + "': expected an integer, got '" + v + "'");
}

int to_int(const std::string& key, const std::string& v) {
  return static_cast<int>(to_long(key, v));
}

bool to_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1" || v == "yes") return true;
  if (v == "false" || v == "0" || v == "no") return false;
  throw ValidationError("config key '" + key + "': expected true or false, got '" + v + "'");
}

std::vector<int> to_int_list(const std::string& key, const std::string& v) {
  std::vector<int> out;
  std::stringstream ss(v);
  std::string item;
  while (std::getline(ss, item, ',')) out.push_back(to_int(key, trim(item)));
  require(!out.empty(), "config key '" + key + "': empty list");
  return out;
}

MixtureComponent to_component(const std::string& v) {
  std::istringstream in(v);
  std::vector<double> f;
  std::string tok;
  while (in >> tok) f.push_back(to_double("mixture.component", tok));
  require(f.size() == 7,
          "mixture.component needs 7 numbers: mean_x mean_y cov_xx cov_xy cov_yy weight reward");
  MixtureComponent c;
  c.mean = {f[0], f[1]};
  c.cov = {f[2], f[3], f[4]};
  c.weight = f[5];
  c.reward_value = f[6];
  return c;
}

using Setter = std::function<void(RunConfig&, const std::string&, const std::string&)>;

const std::map<std::string, Setter>& setters() {
  static const std::map<std::string, Setter> m{
      {"seed", [](RunConfig& c, auto& k, auto& v) { c.seed = static_cast<std::uint64_t>(to_long(k, v)); }},
      {"out", [](RunConfig& c, auto&, auto& v) { c.out = v; }},
      {"checkpoint", [](RunConfig& c, auto&, auto& v) { c.checkpoint = v; }},
      {"mixture.background", [](RunConfig& c, auto& k, auto& v) { c.mixture.background_reward = to_double(k, v); }},
      {"model.hidden", [](RunConfig& c, auto& k, auto& v) { c.pretrain.hidden = to_int(k, v); }},
      {"pretrain.steps", [](RunConfig& c, auto& k, auto& v) { c.pretrain.steps = to_int(k, v); }},
      {"pretrain.batch", [](RunConfig& c, auto& k, auto& v) { c.pretrain.batch = to_int(k, v); }},
      {"pretrain.lr", [](RunConfig& c, auto& k, auto& v) { c.pretrain.lr = to_double(k, v); }},
      {"pretrain.lr_final_fraction", [](RunConfig& c, auto& k, auto& v) { c.pretrain.lr_final_fraction = to_double(k, v); }},
      {"pretrain.seed", [](RunConfig& c, auto& k, auto& v) { c.pretrain.seed = static_cast<std::uint64_t>(to_long(k, v)); }},
      {"posttrain.algorithm", [](RunConfig& c, auto&, auto& v) { c.post.algorithm = parse_algorithm(v); }},
      {"posttrain.steps", [](RunConfig& c, auto& k, auto& v) { c.post.steps = to_int(k, v); }},
      {"posttrain.lr", [](RunConfig& c, auto& k, auto& v) { c.post.lr = to_double(k, v); }},
      {"posttrain.trees", [](RunConfig& c, auto& k, auto& v) { c.post.trees = to_int(k, v); }},
      {"posttrain.inner_updates", [](RunConfig& c, auto& k, auto& v) { c.post.inner_updates = to_int(k, v); }},
      {"posttrain.train_steps", [](RunConfig& c, auto& k, auto& v) { c.post.train_steps = to_int(k, v); }},
      {"posttrain.eval_steps", [](RunConfig& c, auto& k, auto& v) { c.post.eval_steps = to_int(k, v); }},
      {"posttrain.branching", [](RunConfig& c, auto& k, auto& v) { c.post.branching = to_int(k, v); }},
      {"posttrain.group_size", [](RunConfig& c, auto& k, auto& v) { c.post.group_size = to_int(k, v); }},
      {"posttrain.early", [](RunConfig& c, auto& k, auto& v) { c.post.early = to_int_list(k, v); }},
      {"posttrain.late", [](RunConfig& c, auto& k, auto& v) { c.post.late = to_int_list(k, v); }},
      {"posttrain.kappa", [](RunConfig& c, auto& k, auto& v) { c.post.kappa = to_double(k, v); }},
      {"posttrain.eta", [](RunConfig& c, auto& k, auto& v) { c.post.eta = to_double(k, v); }},
      {"posttrain.epsilon", [](RunConfig& c, auto& k, auto& v) { c.post.clip.epsilon = to_double(k, v); }},
      {"posttrain.beta_start", [](RunConfig& c, auto& k, auto& v) { c.post.clip.beta_start = to_double(k, v); }},
      {"posttrain.beta_end", [](RunConfig& c, auto& k, auto& v) { c.post.clip.beta_end = to_double(k, v); }},
      {"posttrain.beta_warmup", [](RunConfig& c, auto& k, auto& v) { c.post.clip.warmup_steps = to_int(k, v); }},
      {"posttrain.fixed_beta", [](RunConfig& c, auto& k, auto& v) { c.post.fixed_beta = to_double(k, v); }},
      {"posttrain.fixed_branch", [](RunConfig& c, auto& k, auto& v) { c.post.fixed_branch = to_bool(k, v); }},
      {"posttrain.no_tree", [](RunConfig& c, auto& k, auto& v) { c.post.no_tree = to_bool(k, v); }},
      {"posttrain.kl_coef", [](RunConfig& c, auto& k, auto& v) { c.post.kl_coef = to_double(k, v); }},
      {"posttrain.root_policy", [](RunConfig& c, auto&, auto& v) {
         if (v == "independent") c.post.root_policy = RootPolicy::kIndependentSeedsAtFirstStep;
         else if (v == "shared") c.post.root_policy = RootPolicy::kSharedRoot;
         else throw ValidationError("posttrain.root_policy must be independent or shared");
       }},
      {"posttrain.root_prior_logp", [](RunConfig& c, auto& k, auto& v) { c.post.root_prior_logp = to_bool(k, v); }},
      {"posttrain.grad_clip", [](RunConfig& c, auto& k, auto& v) { c.post.grad_clip = to_double(k, v); }},
      {"posttrain.ema", [](RunConfig& c, auto& k, auto& v) { c.post.ema = to_bool(k, v); }},
      {"posttrain.ema_decay", [](RunConfig& c, auto& k, auto& v) { c.post.ema_decay = to_double(k, v); }},
      {"posttrain.ema_interval", [](RunConfig& c, auto& k, auto& v) { c.post.ema_interval = to_int(k, v); }},
      {"eval.interval", [](RunConfig& c, auto& k, auto& v) { c.eval.interval = to_int(k, v); }},
      {"eval.samples", [](RunConfig& c, auto& k, auto& v) { c.eval.samples = to_int(k, v); }},
      {"eval.seed", [](RunConfig& c, auto& k, auto& v) { c.eval.seed = static_cast<std::uint64_t>(to_long(k, v)); }},
  };
  return m;
}

}  // namespace

RunConfig parse_config(const std::string& text) {
  RunConfig cfg;
  std::vector<MixtureComponent> components;
  std::set<std::string> seen;
  std::istringstream in(text);
  std::string line;
  int lineno = 0;
  bool pretrain_seed_set = false;
  while (std::getline(in, line)) {
    ++lineno;
    if (const auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    require(eq != std::string::npos, "config line " + std::to_string(lineno) + ": expected key = value");
    const std::string key = trim(line.substr(0, eq));
    const std::string value = trim(line.substr(eq + 1));
    require(!value.empty(), "config key '" + key + "' has no value");
    if (key == "mixture.component") {
      components.push_back(to_component(value));
      continue;
    }
    const auto it = setters().find(key);
    require(it != setters().end(), "unknown config key '" + key + "'");
    require(seen.insert(key).second, "config key '" + key + "' given twice");
    it->second(cfg, key, value);
    if (key == "pretrain.seed") pretrain_seed_set = true;
  }
  if (!components.empty()) cfg.mixture.components = std::move(components);
  if (!pretrain_seed_set) cfg.pretrain.seed = cfg.seed;
  return cfg;
}

RunConfig load_config(const std::filesystem::path& path) {
  std::ifstream f(path);
  require(static_cast<bool>(f), "cannot open config " + path.string());
  std::stringstream ss;
  ss << f.rdbuf();
  return parse_config(ss.str());
}

// --- output helpers ------------------------------------------------------------

namespace {

std::string num(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.10g", v);
  return buf;
}

std::ofstream open_out(const std::filesystem::path& path) {
  std::ofstream f(path);
  require(static_cast<bool>(f), "cannot write " + path.string());
  return f;
}

const char* kPalette[] = {"#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#7f7f7f",
                          "#ff7f0e", "#17becf", "#8c564b", "#e377c2", "#bcbd22"};

}  // namespace

void write_samples_csv(const std::filesystem::path& path, std::span<const Vec2> samples,
                       std::span<const std::size_t> assignment) {
  require(samples.size() == assignment.size(), "one assignment per sample is required");
  auto f = open_out(path);
  f << "x,y,assigned_mode\n";
  for (std::size_t i = 0; i < samples.size(); ++i) {
    f << num(samples[i].x) << ',' << num(samples[i].y) << ',' << assignment[i] << '\n';
  }
}

void write_scatter_svg(const std::filesystem::path& path, const MixtureSpec& spec,
                       std::span<const Vec2> samples, std::span<const std::size_t> assignment,
                       const std::string& title) {
  require(samples.size() == assignment.size(), "one assignment per sample is required");
  double extent = 1.0;
  for (const auto& c : spec.components) {
    extent = std::max({extent, std::abs(c.mean.x), std::abs(c.mean.y)});
  }
  extent *= 1.5;
  constexpr double kSize = 480.0;
  auto px = [&](double v) { return kSize * 0.5 * (1.0 + v / extent); };
  auto py = [&](double v) { return kSize * 0.5 * (1.0 - v / extent); };

  auto f = open_out(path);
  f << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << kSize << "\" height=\""
    << kSize + 24 << "\" viewBox=\"0 0 " << kSize << ' ' << kSize + 24 << "\">\n";
  f << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  f << "<text x=\"8\" y=\"" << kSize + 18 << "\" font-family=\"sans-serif\" font-size=\"13\">"
    << title << "</text>\n";
  for (std::size_t i = 0; i < samples.size(); ++i) {
    const Vec2 s = samples[i];
    if (std::abs(s.x) > extent || std::abs(s.y) > extent) continue;
    f << "<circle cx=\"" << num(px(s.x)) << "\" cy=\"" << num(py(s.y)) << "\" r=\"1.6\" fill=\""
      << kPalette[assignment[i] % 10] << "\" fill-opacity=\"0.6\"/>\n";
  }
  for (std::size_t c = 0; c < spec.components.size(); ++c) {
    const auto& comp = spec.components[c];
    const bool rewarded = comp.reward_value > spec.background_reward;
    f << "<circle cx=\"" << num(px(comp.mean.x)) << "\" cy=\"" << num(py(comp.mean.y))
      << "\" r=\"6\" fill=\"none\" stroke=\"black\" stroke-width=\"" << (rewarded ? 2 : 1)
      << "\"" << (rewarded ? "" : " stroke-dasharray=\"3,2\"") << "/>\n";
    f << "<text x=\"" << num(px(comp.mean.x) + 8) << "\" y=\"" << num(py(comp.mean.y) - 8)
      << "\" font-family=\"sans-serif\" font-size=\"11\">" << c << " R=" << num(comp.reward_value)
      << "</text>\n";
  }
  f << "</svg>\n";
}

// --- evaluation ----------------------------------------------------------------

EvalMetrics evaluate(const RunConfig& cfg, const PolicyParams& params, int iteration,
                     std::vector<Vec2>* samples_out, std::vector<std::size_t>* assignment_out) {
  const NoiseSchedule sched = NoiseSchedule::linear(cfg.post.eval_steps);
  const auto samples =
      ode_samples(params, sched, static_cast<std::size_t>(cfg.eval.samples), cfg.eval.seed);
  for (Vec2 s : samples) {
    if (!is_finite(s)) throw NumericalError("non-finite evaluation sample at iteration " + std::to_string(iteration));
  }
  EvalMetrics m;
  m.iteration = iteration;
  double r = 0.0;
  for (Vec2 s : samples) r += reward(cfg.mixture, s);
  m.mean_reward = r / static_cast<double>(samples.size());
  const SampleSet set = SampleSet::from_points(samples);
  m.lgmd = lgmd(set);
  try {
    m.cosine_diversity = cosine_diversity(set);
  } catch (const ValidationError&) {
    m.cosine_diversity = std::nan("");
  }
  const Occupancy occ = mode_occupancy(cfg.mixture, samples);
  m.fractions = occ.fractions;
  m.max_fraction = occ.max_fraction;
  m.min_rewarded_fraction = 1.0;
  for (std::size_t c : cfg.mixture.rewarded_components()) {
    m.min_rewarded_fraction = std::min(m.min_rewarded_fraction, occ.fractions[c]);
  }
  if (samples_out) *samples_out = samples;
  if (assignment_out) *assignment_out = occ.assignment;
  return m;
}

// --- pretraining -----------------------------------------------------------------

PretrainRun run_pretrain(const RunConfig& cfg) {
  cfg.validate();
  PretrainRun run;
  run.result = pretrain_rectified_flow(cfg.mixture, cfg.pretrain);
  std::vector<Vec2> samples;
  std::vector<std::size_t> assignment;
  run.eval = evaluate(cfg, run.result.params, 0, &samples, &assignment);
  if (cfg.out.empty()) return run;

  std::filesystem::create_directories(cfg.out);
  save_params(run.result.params, cfg.out / "checkpoint.bin");
  {
    auto f = open_out(cfg.out / "pretrain_loss.csv");
    f << "step,loss\n";
    for (const auto& [step, loss] : run.result.loss_curve) f << step << ',' << num(loss) << '\n';
  }
  write_samples_csv(cfg.out / "samples_pretrained.csv", samples, assignment);
  write_scatter_svg(cfg.out / "pretrained.svg", cfg.mixture, samples, assignment,
                    "pretrained (ODE, S=" + std::to_string(cfg.post.eval_steps) + ")");
  return run;
}

// --- post-training -------------------------------------------------------------

namespace {

std::vector<RolloutTree> collect_rollouts(const RunConfig& cfg, const PolicyParams& params,
                                          const NoiseSchedule& sched, BranchSchedule bs,
                                          const TreeOptions& topts, int iteration) {
  const auto& p = cfg.post;
  const std::uint64_t seed = cfg.seed * 0x9e3779b97f4a7c15ULL + 0x7f4a7c15ULL;
  const auto it = static_cast<std::uint64_t>(iteration);
  if (!p.fixed_branch && !p.no_tree) {
    return rollout_forest(params, sched, bs, topts, p.trees, seed, it);
  }
  std::vector<RolloutTree> out(static_cast<std::size_t>(p.trees));
  std::exception_ptr error;
#pragma omp parallel for schedule(dynamic, 1)
  for (int g = 0; g < p.trees; ++g) {
    try {
      Rng rng = make_stream(seed, it, static_cast<std::uint64_t>(g));
      std::vector<int> steps = p.early;
      if (!p.fixed_branch) {
        steps = separate_collisions(sample_branch_steps(bs, rng), bs.s_min, bs.s_max);
      }
      out[static_cast<std::size_t>(g)] =
          p.no_tree ? rollout_independent(params, sched, steps, p.leaves_per_tree(), topts, rng)
                    : rollout_tree_at(params, sched, steps, topts, rng);
    } catch (...) {
#pragma omp critical
      if (!error) error = std::current_exception();
    }
  }
  if (error) std::rethrow_exception(error);
  return out;
}

struct BatchGrad {
  LossResult loss;
  GradBuffer grads;
};

void write_posttrain_outputs(const RunConfig& cfg, const PosttrainRun& run,
                             const std::vector<Vec2>& samples,
                             const std::vector<std::size_t>& assignment) {
  std::filesystem::create_directories(cfg.out);
  {
    auto f = open_out(cfg.out / "train_log.csv");
    f << "iteration,beta,loss,surrogate,kl_penalty,fkl,rkl,tv,in_region,silenced,corrective,"
         "mean_reward,grad_norm,velocity_evals,degenerate_groups,branch_steps\n";
    for (const auto& l : run.log) {
      std::string steps;
      for (std::size_t i = 0; i < l.branch_steps.size(); ++i) {
        steps += (i ? ";" : "") + std::to_string(l.branch_steps[i]);
      }
      f << l.iteration << ',' << num(l.beta) << ',' << num(l.loss) << ',' << num(l.surrogate)
        << ',' << num(l.kl_penalty) << ',' << num(l.fkl) << ',' << num(l.rkl) << ','
        << num(l.tv) << ',' << l.in_region << ',' << l.silenced << ',' << l.corrective << ','
        << num(l.mean_reward) << ',' << num(l.grad_norm) << ',' << l.velocity_evals << ','
        << l.degenerate_groups << ',' << steps << '\n';
    }
  }
  {
    auto f = open_out(cfg.out / "eval_log.csv");
    f << "iteration,mean_reward,lgmd,cosine_diversity,max_fraction,min_rewarded_fraction";
    for (std::size_t c = 0; c < cfg.mixture.components.size(); ++c) f << ",frac_" << c;
    f << '\n';
    for (const auto& e : run.evals) {
      f << e.iteration << ',' << num(e.mean_reward) << ',' << num(e.lgmd) << ','
        << num(e.cosine_diversity) << ',' << num(e.max_fraction) << ','
        << num(e.min_rewarded_fraction);
      for (double v : e.fractions) f << ',' << num(v);
      f << '\n';
    }
  }
  write_samples_csv(cfg.out / "samples_final.csv", samples, assignment);
  write_scatter_svg(cfg.out / "final.svg", cfg.mixture, samples, assignment,
                    to_string(cfg.post.algorithm) + " after " + std::to_string(cfg.post.steps) +
                        " iterations, seed " + std::to_string(cfg.seed));
  save_params(run.params, cfg.out / "posttrained.bin");

  nlohmann::json j;
  const auto& e = run.final_eval;
  j["algorithm"] = to_string(cfg.post.algorithm);
  j["seed"] = cfg.seed;
  j["iterations"] = cfg.post.steps;
  j["final"] = {{"mean_reward", e.mean_reward},
                {"lgmd", e.lgmd},
                {"cosine_diversity", e.cosine_diversity},
                {"max_fraction", e.max_fraction},
                {"min_rewarded_fraction", e.min_rewarded_fraction},
                {"fractions", e.fractions}};
  std::vector<double> fkl;
  std::vector<double> mean_reward;
  for (const auto& l : run.log) {
    fkl.push_back(l.fkl);
    mean_reward.push_back(l.mean_reward);
  }
  j["fkl_trace"] = fkl;
  j["rollout_reward_trace"] = mean_reward;
  j["total_velocity_evals"] = run.total_velocity_evals;
  j["cost_proxy"] = "velocity-field evaluations; wall-clock times are not reported";
  auto f = open_out(cfg.out / "summary.json");
  f << j.dump(2) << '\n';
}

}  // namespace

PosttrainRun run_posttrain(const RunConfig& cfg, const PolicyParams& initial) {
  cfg.validate();
  const auto& p = cfg.post;
  require(initial.hidden() >= 1 && initial.all_finite(), "initial parameters are invalid");

  const NoiseSchedule sched = NoiseSchedule::linear(p.train_steps);
  const PolicyParams reference = initial;
  PosttrainRun run;
  run.params = initial;
  PolicyParams ema = initial;
  Adam adam(run.params, AdamConfig{.lr = p.lr});
  const TreeOptions topts{p.branching, {p.eta}, p.root_policy, p.root_prior_logp};
  BranchSchedule bs{p.early, p.late, p.kappa, 1, p.train_steps - 1, 0.0, p.branching};
  const SurrogateOptions sopts{p.effective_kl_coef(), &reference};
  const int G = p.trees;

  for (int it = 0; it < p.steps; ++it) {
    bs.progress = p.steps > 1 ? static_cast<double>(it) / (p.steps - 1) : 1.0;
    const double beta = p.fixed_beta ? *p.fixed_beta : beta_at_step(p.clip, it);
    const auto trees = collect_rollouts(cfg, run.params, sched, bs, topts, it);

    IterationLog log;
    log.iteration = it;
    log.beta = beta;
    log.branch_steps = trees.front().branch_steps;
    std::vector<GroupBatch> batches;
    batches.reserve(trees.size());
    double reward_sum = 0.0;
    std::size_t reward_n = 0;
    for (const auto& tree : trees) {
      log.velocity_evals += tree.velocity_evals;
      std::vector<double> r;
      for (const auto& leaf : tree.leaves) r.push_back(reward(cfg.mixture, leaf.terminal));
      for (double v : r) reward_sum += v;
      reward_n += r.size();
      GroupBatch b = p.algorithm == Algorithm::kTmpo ? make_tmpo_batch(tree.leaves, r, beta)
                                                     : make_grpo_batch(tree.leaves, r, beta);
      b.schedule = sched;
      if (b.degenerate_rewards) ++log.degenerate_groups;
      const KlDiagnostics d = kl_diagnostics(b);
      log.fkl += d.fkl / G;
      log.rkl += d.rkl / G;
      log.tv += d.tv / G;
      batches.push_back(std::move(b));
    }
    log.mean_reward = reward_sum / static_cast<double>(reward_n);
    run.total_velocity_evals += log.velocity_evals;

    for (int u = 0; u < p.inner_updates; ++u) {
      std::vector<BatchGrad> parts(batches.size(), BatchGrad{{}, GradBuffer(run.params.hidden())});
      std::exception_ptr error;
      const auto nb = static_cast<int>(batches.size());
#pragma omp parallel for schedule(dynamic, 1)
      for (int g = 0; g < nb; ++g) {
        try {
          auto& part = parts[static_cast<std::size_t>(g)];
          const auto& b = batches[static_cast<std::size_t>(g)];
          part.loss = p.algorithm == Algorithm::kTmpo
                          ? tmpo_loss_and_grad(b, run.params, p.clip, part.grads, sopts)
                          : grpo_loss_and_grad(b, run.params, p.clip, part.grads, sopts);
        } catch (...) {
#pragma omp critical
          if (!error) error = std::current_exception();
        }
      }
      if (error) {
        try {
          std::rethrow_exception(error);
        } catch (const NumericalError& e) {
          throw NumericalError("iteration " + std::to_string(it) + ": " + e.what());
        }
      }
      GradBuffer grads(run.params.hidden());
      double loss = 0.0;
      double surrogate = 0.0;
      double klp = 0.0;
      int in_region = 0;
      int silenced = 0;
      int corrective = 0;
      for (const auto& part : parts) {
        accumulate(grads, part.grads);
        loss += part.loss.loss / G;
        surrogate += part.loss.surrogate / G;
        klp += part.loss.kl_penalty / G;
        in_region += part.loss.clip.in_region;
        silenced += part.loss.clip.silenced;
        corrective += part.loss.clip.corrective;
      }
      scale(grads, 1.0 / G);
      const double gn = l2_norm(grads);
      if (!std::isfinite(loss) || !std::isfinite(gn)) {
        throw NumericalError("non-finite loss at iteration " + std::to_string(it));
      }
      if (p.grad_clip > 0.0 && gn > p.grad_clip) scale(grads, p.grad_clip / gn);
      if (u == 0) {
        log.loss = loss;
        log.surrogate = surrogate;
        log.kl_penalty = klp;
        log.grad_norm = gn;
      }
      if (u + 1 == p.inner_updates) {
        log.in_region = in_region;
        log.silenced = silenced;
        log.corrective = corrective;
      }
      try {
        adam.step(run.params, grads);
      } catch (const NumericalError&) {
        throw NumericalError("parameters became non-finite at iteration " + std::to_string(it));
      }
    }

    if (p.ema && (it + 1) % p.ema_interval == 0) {
      auto e = ema.values();
      auto w = run.params.values();
      for (std::size_t i = 0; i < e.size(); ++i) e[i] = p.ema_decay * e[i] + (1.0 - p.ema_decay) * w[i];
    }
    run.log.push_back(std::move(log));
    if ((it + 1) % cfg.eval.interval == 0 && it + 1 < p.steps) {
      run.evals.push_back(evaluate(cfg, p.ema ? ema : run.params, it + 1));
    }
  }

  std::vector<Vec2> samples;
  std::vector<std::size_t> assignment;
  run.final_eval = evaluate(cfg, p.ema ? ema : run.params, p.steps, &samples, &assignment);
  run.evals.push_back(run.final_eval);
  if (!cfg.out.empty()) write_posttrain_outputs(cfg, run, samples, assignment);
  return run;
}

PosttrainRun run_posttrain(const RunConfig& cfg) {
  if (!cfg.checkpoint.empty()) return run_posttrain(cfg, load_params(cfg.checkpoint));
  RunConfig pre = cfg;
  const PretrainRun base = run_pretrain(pre);
  return run_posttrain(cfg, base.result.params);
}

// --- ablations -----------------------------------------------------------------

RunConfig ablation_variant(const RunConfig& base, const std::string& variant) {
  RunConfig c = base;
  c.post.algorithm = Algorithm::kTmpo;
  if (variant == "full") return c;
  if (variant == "beta_fixed_1") {
    c.post.fixed_beta = 1.0;
  } else if (variant == "no_tree") {
    c.post.no_tree = true;
  } else if (variant == "fixed_branch") {
    c.post.fixed_branch = true;
  } else {
    throw ValidationError("unknown ablation variant '" + variant + "'");
  }
  return c;
}

AblationResult run_ablation_suite(const RunConfig& cfg, const std::vector<std::uint64_t>& seeds,
                                  const PolicyParams& initial) {
  require(!seeds.empty(), "ablation needs at least one seed");
  AblationResult res;
  for (const auto& variant : ablation_variants()) {
    AblationRow mean;
    mean.variant = variant;
    for (std::uint64_t seed : seeds) {
      RunConfig c = ablation_variant(cfg, variant);
      c.seed = seed;
      c.out = cfg.out.empty() ? std::filesystem::path{}
                              : cfg.out / variant / ("seed_" + std::to_string(seed));
      const PosttrainRun run = run_posttrain(c, initial);
      AblationRow row;
      row.variant = variant;
      row.seed = seed;
      row.final_mean_reward = run.final_eval.mean_reward;
      row.final_fkl = run.log.back().fkl;
      row.lgmd = run.final_eval.lgmd;
      row.cosine_diversity = run.final_eval.cosine_diversity;
      row.max_fraction = run.final_eval.max_fraction;
      row.min_rewarded_fraction = run.final_eval.min_rewarded_fraction;
      row.total_velocity_evals = run.total_velocity_evals;
      row.velocity_evals_per_iter =
          static_cast<double>(run.total_velocity_evals) / static_cast<double>(c.post.steps);
      res.runs.push_back(row);

      const double w = 1.0 / static_cast<double>(seeds.size());
      mean.final_mean_reward += w * row.final_mean_reward;
      mean.final_fkl += w * row.final_fkl;
      mean.lgmd += w * row.lgmd;
      mean.cosine_diversity += w * row.cosine_diversity;
      mean.max_fraction += w * row.max_fraction;
      mean.min_rewarded_fraction += w * row.min_rewarded_fraction;
      mean.velocity_evals_per_iter += w * row.velocity_evals_per_iter;
      mean.total_velocity_evals += row.total_velocity_evals;
    }
    res.summary.push_back(mean);
  }

  if (!cfg.out.empty()) {
    std::filesystem::create_directories(cfg.out);
    const char* header =
        "variant,seed,final_mean_reward,final_fkl,lgmd,cosine_diversity,max_fraction,"
        "min_rewarded_fraction,velocity_evals_per_iter,total_velocity_evals\n";
    auto write = [&](const std::filesystem::path& path, const std::vector<AblationRow>& rows,
                     bool per_seed) {
      auto f = open_out(path);
      f << header;
      for (const auto& r : rows) {
        f << r.variant << ',' << (per_seed ? std::to_string(r.seed) : "mean") << ','
          << num(r.final_mean_reward) << ',' << num(r.final_fkl) << ',' << num(r.lgmd) << ','
          << num(r.cosine_diversity) << ',' << num(r.max_fraction) << ','
          << num(r.min_rewarded_fraction) << ',' << num(r.velocity_evals_per_iter) << ','
          << r.total_velocity_evals << '\n';
      }
    };
    write(cfg.out / "ablation.csv", res.summary, false);
    write(cfg.out / "ablation_runs.csv", res.runs, true);
  }
  return res;
}

AblationResult run_ablation_suite(const RunConfig& cfg, const std::vector<std::uint64_t>& seeds) {
  if (!cfg.checkpoint.empty()) return run_ablation_suite(cfg, seeds, load_params(cfg.checkpoint));
  const PretrainRun base = run_pretrain(cfg);
  return run_ablation_suite(cfg, seeds, base.result.params);
}

}  // namespace tmpo
