#include "tmpo/tree_sampler.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <numbers>
#include <ostream>
#include <string>

#include <json.hpp>

#include "tmpo/error.hpp"

namespace tmpo {

Rng make_stream(std::uint64_t seed, std::uint64_t a, std::uint64_t b) {
  auto lo = [](std::uint64_t v) { return static_cast<std::uint32_t>(v & 0xffffffffULL); };
  auto hi = [](std::uint64_t v) { return static_cast<std::uint32_t>(v >> 32); };
  std::seed_seq seq{lo(seed), hi(seed), lo(a), hi(a), lo(b), hi(b)};
  return Rng(seq);
}

// --- schedules ----------------------------------------------------------------

NoiseSchedule::NoiseSchedule(std::vector<double> sigmas) : sigmas_(std::move(sigmas)) {
  require(sigmas_.size() >= 2, "noise schedule needs at least one step");
  require(sigmas_.front() == 1.0 && sigmas_.back() == 0.0,
          "noise schedule must run from 1 to 0");
  for (std::size_t k = 0; k + 1 < sigmas_.size(); ++k) {
    require(sigmas_[k + 1] < sigmas_[k], "noise schedule must be strictly decreasing");
  }
}

NoiseSchedule NoiseSchedule::linear(int steps) {
  require(steps >= 1, "schedule needs at least one step");
  std::vector<double> s(static_cast<std::size_t>(steps) + 1);
  for (int k = 0; k <= steps; ++k) s[static_cast<std::size_t>(k)] = 1.0 - static_cast<double>(k) / steps;
  s.back() = 0.0;
  return NoiseSchedule(std::move(s));
}

void BranchSchedule::validate() const {
  require(!early.empty(), "branch schedule needs T >= 1");
  require(early.size() == late.size(), "early and late positions differ in length");
  require(branching >= 2, "branching factor must be >= 2");
  require(s_max > s_min, "s_max must exceed s_min");
  require(std::isfinite(kappa) && kappa > 0.0, "kappa must be > 0");
  require(progress >= 0.0 && progress <= 1.0, "progress must lie in [0, 1]");
  require(branch_count() <= s_max - s_min + 1, "more branch points than available steps");
  for (std::size_t i = 0; i < early.size(); ++i) {
    require(early[i] >= s_min && early[i] <= s_max && late[i] >= s_min && late[i] <= s_max,
            "branch positions must lie in [s_min, s_max]");
  }
}

double BranchSchedule::curriculum_mean(int i) const {
  const auto j = static_cast<std::size_t>(i);
  return early.at(j) + (late.at(j) - early.at(j)) * progress;
}

namespace {

// log of a Gamma(shape, 1) draw.
double log_gamma_draw(double shape, Rng& rng) {
  if (shape >= 1.0) {
    std::gamma_distribution<double> g(shape, 1.0);
    return std::log(g(rng));
  }
  // Gamma(a) = Gamma(a + 1) * U^(1/a).
  std::gamma_distribution<double> g(shape + 1.0, 1.0);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  const double lg = std::log(g(rng));
  double v = u(rng);
  while (v <= 0.0) v = u(rng);
  return lg + std::log(v) / shape;
}

}  // namespace

double sample_beta(double alpha, double beta, Rng& rng) {
  require(alpha > 0.0 && beta > 0.0, "Beta shapes must be > 0");
  const double la = log_gamma_draw(alpha, rng);
  const double lb = log_gamma_draw(beta, rng);
  return 1.0 / (1.0 + std::exp(lb - la));
}

std::vector<int> sample_branch_steps(const BranchSchedule& sched, Rng& rng) {
  sched.validate();
  const double span = sched.s_max - sched.s_min;
  std::vector<int> out;
  out.reserve(sched.early.size());
  for (int i = 0; i < sched.branch_count(); ++i) {
    double m = (sched.curriculum_mean(i) - sched.s_min) / span;
    m = std::clamp(m, kBetaMeanClamp, 1.0 - kBetaMeanClamp);
    const double xi = sample_beta(m * sched.kappa, (1.0 - m) * sched.kappa, rng);
    out.push_back(static_cast<int>(std::floor(sched.s_min + span * xi + 0.5)));
  }
  std::sort(out.begin(), out.end());
  return out;
}

std::vector<int> separate_collisions(std::vector<int> steps, int s_min, int s_max) {
  require(!steps.empty(), "no branch steps");
  require(static_cast<int>(steps.size()) <= s_max - s_min + 1,
          "more branch points than available steps");
  std::sort(steps.begin(), steps.end());
  for (std::size_t i = 1; i < steps.size(); ++i) {
    if (steps[i] <= steps[i - 1]) steps[i] = steps[i - 1] + 1;
  }
  steps.back() = std::min(steps.back(), s_max);
  for (std::size_t i = steps.size() - 1; i-- > 0;) {
    steps[i] = std::min(steps[i], steps[i + 1] - 1);
  }
  return steps;
}

// --- single steps ---------------------------------------------------------------

Vec2 ode_step(const PolicyParams& params, Vec2 x, int k, const NoiseSchedule& sched) {
  require(k >= 0 && k < sched.steps(), "ode_step: step index out of range");
  return x + sched.dt(k) * velocity(params, x, sched.sigma(k));
}

double noise_magnitude(double sigma, double dt, double eta) {
  require(std::isfinite(eta) && eta >= 0.0, "eta must be >= 0");
  if (!(sigma > 0.0 && sigma < 1.0)) throw ValidationError("degenerate noise level");
  require(dt < 0.0, "dt must be negative");
  return eta * std::sqrt(sigma / (1.0 - sigma)) * std::sqrt(-dt);
}

Vec2 sde_mean(Vec2 x, Vec2 v, double sigma, double dt, double gamma) {
  const double g2 = gamma * gamma;
  return (1.0 + g2 * dt / (2.0 * sigma)) * x + ((1.0 + g2 * (1.0 - sigma) / (2.0 * sigma)) * dt) * v;
}

double gaussian_logp_mean(Vec2 child, Vec2 mu, double gamma) {
  require(gamma > 0.0, "gamma must be > 0");
  const double g2 = gamma * gamma;
  return 0.5 * (-squared_norm(child - mu) / (2.0 * g2) - std::log(2.0 * std::numbers::pi * g2));
}

SdeStep sde_branch_step(const PolicyParams& params, Vec2 x, int k, const NoiseSchedule& sched,
                        double eta, Vec2 eps) {
  require(k >= 1 && k < sched.steps(), "sde_branch_step: not an interior step");
  const double sigma = sched.sigma(k);
  const double dt = sched.dt(k);
  SdeStep out;
  out.gamma = noise_magnitude(sigma, dt, eta);
  require(out.gamma > 0.0, "sde_branch_step needs gamma > 0");
  out.mu = sde_mean(x, velocity(params, x, sigma), sigma, dt, out.gamma);
  out.child = out.mu + out.gamma * eps;
  out.logp_mean = gaussian_logp_mean(out.child, out.mu, out.gamma);
  return out;
}

// --- trees ----------------------------------------------------------------------

namespace {

bool independent_roots(std::span<const int> steps, RootPolicy policy) {
  return policy == RootPolicy::kIndependentSeedsAtFirstStep && steps.front() == 1;
}

double eta_for_layer(const TreeOptions& o, std::size_t j) {
  require(!o.eta.empty(), "eta list is empty");
  if (o.eta.size() == 1) return o.eta.front();
  require(j < o.eta.size(), "fewer eta values than branch layers");
  return o.eta[j];
}

void check_steps(const NoiseSchedule& sched, std::span<const int> steps) {
  require(!steps.empty(), "no branch steps");
  for (std::size_t i = 0; i < steps.size(); ++i) {
    require(steps[i] >= 1 && steps[i] < sched.steps(),
            "branch steps must lie strictly inside (0, S)");
    if (i > 0) require(steps[i] > steps[i - 1], "branch steps must be strictly increasing");
  }
}

Vec2 normal2(Rng& rng) {
  std::normal_distribution<double> n(0.0, 1.0);
  const double a = n(rng);
  const double b = n(rng);
  return {a, b};
}

struct Builder {
  const PolicyParams& params;
  const NoiseSchedule& sched;
  std::span<const int> steps;
  const TreeOptions& options;
  Rng& rng;
  std::vector<Trajectory>& leaves;
  long evals = 0;

  Vec2 ode(Vec2 x, int k) {
    ++evals;
    return ode_step(params, x, k, sched);
  }

  void finish(Trajectory t, Vec2 x, int pos) {
    for (int k = pos; k < sched.steps(); ++k) {
      x = ode(x, k);
      t.states.push_back(x);
    }
    t.terminal = x;
    t.logp_total = 0.0;
    for (double v : t.step_logps) t.logp_total += v;
    leaves.push_back(std::move(t));
  }

  // `t` holds states[0..pos]; x == states[pos]; level j is the next branch.
  void grow(Trajectory t, Vec2 x, int pos, std::size_t j) {
    if (j == steps.size()) {
      finish(std::move(t), x, pos);
      return;
    }
    const int s = steps[j];
    for (int k = pos; k < s; ++k) {
      x = ode(x, k);
      t.states.push_back(x);
    }
    const double sigma = sched.sigma(s);
    const double dt = sched.dt(s);
    const double gamma = noise_magnitude(sigma, dt, eta_for_layer(options, j));
    ++evals;
    const Vec2 v = velocity(params, x, sigma);
    const Vec2 mu = sde_mean(x, v, sigma, dt, gamma);

    std::vector<Vec2> eps(static_cast<std::size_t>(options.branching));
    for (auto& e : eps) e = normal2(rng);
    for (int b = 0; b < options.branching; ++b) {
      Trajectory c = t;
      const Vec2 e = eps[static_cast<std::size_t>(b)];
      const Vec2 child = gamma > 0.0 ? mu + gamma * e : mu;
      c.kinds.push_back(BranchKind::kSde);
      c.choices.push_back(b);
      c.noises.push_back(e);
      c.gammas.push_back(gamma);
      c.mus.push_back(mu);
      c.step_logps.push_back(gamma > 0.0 ? gaussian_logp_mean(child, mu, gamma) : 0.0);
      c.states.push_back(child);
      grow(std::move(c), child, s + 1, j + 1);
    }
  }

  void root_branch(Trajectory t) {
    std::vector<Vec2> roots(static_cast<std::size_t>(options.branching));
    for (auto& r : roots) r = normal2(rng);
    for (int b = 0; b < options.branching; ++b) {
      Trajectory c = t;
      const Vec2 r = roots[static_cast<std::size_t>(b)];
      c.kinds.push_back(BranchKind::kIndependentRoot);
      c.choices.push_back(b);
      c.noises.push_back(r);
      c.gammas.push_back(1.0);
      c.mus.push_back({});
      c.step_logps.push_back(options.root_prior_logp ? gaussian_logp_mean(r, {}, 1.0) : 0.0);
      c.states.push_back(r);
      grow(std::move(c), r, 0, 1);
    }
  }
};

Trajectory empty_trajectory(std::span<const int> steps, int S) {
  Trajectory t;
  t.branch_steps.assign(steps.begin(), steps.end());
  t.states.reserve(static_cast<std::size_t>(S) + 1);
  return t;
}

}  // namespace

RolloutTree rollout_tree_at(const PolicyParams& params, const NoiseSchedule& sched,
                            std::span<const int> branch_steps, const TreeOptions& options,
                            Rng& rng) {
  check_steps(sched, branch_steps);
  require(options.branching >= 2, "branching factor must be >= 2");

  RolloutTree tree;
  tree.branch_steps.assign(branch_steps.begin(), branch_steps.end());
  tree.branching = options.branching;
  Builder b{params, sched, branch_steps, options, rng, tree.leaves};
  Trajectory t = empty_trajectory(branch_steps, sched.steps());

  if (independent_roots(branch_steps, options.root_policy)) {
    b.root_branch(std::move(t));
    for (std::size_t i = 0; i < tree.leaves.size(); i += tree.leaves.size() / options.branching) {
      tree.roots.push_back(tree.leaves[i].states.front());
    }
  } else {
    const Vec2 root = normal2(rng);
    tree.roots.push_back(root);
    t.states.push_back(root);
    b.grow(std::move(t), root, 0, 0);
  }
  tree.velocity_evals = b.evals;
  return tree;
}

RolloutTree rollout_tree(const PolicyParams& params, const NoiseSchedule& sched,
                         const BranchSchedule& branch_sched, const TreeOptions& options,
                         Rng& rng) {
  const auto raw = sample_branch_steps(branch_sched, rng);
  const auto steps = separate_collisions(raw, branch_sched.s_min, branch_sched.s_max);
  return rollout_tree_at(params, sched, steps, options, rng);
}

RolloutTree rollout_independent(const PolicyParams& params, const NoiseSchedule& sched,
                                std::span<const int> branch_steps, int k,
                                const TreeOptions& options, Rng& rng) {
  check_steps(sched, branch_steps);
  require(k >= 1, "need at least one trajectory");
  TreeOptions single = options;
  single.branching = 1;

  RolloutTree out;
  out.branch_steps.assign(branch_steps.begin(), branch_steps.end());
  out.branching = 1;
  for (int i = 0; i < k; ++i) {
    Builder b{params, sched, branch_steps, single, rng, out.leaves};
    Trajectory t = empty_trajectory(branch_steps, sched.steps());
    if (independent_roots(branch_steps, options.root_policy)) {
      b.root_branch(std::move(t));
    } else {
      const Vec2 root = normal2(rng);
      t.states.push_back(root);
      b.grow(std::move(t), root, 0, 0);
    }
    out.roots.push_back(out.leaves.back().states.front());
    out.velocity_evals += b.evals;
  }
  return out;
}

std::vector<RolloutTree> rollout_forest_serial(const PolicyParams& params,
                                               const NoiseSchedule& sched,
                                               const BranchSchedule& branch_sched,
                                               const TreeOptions& options, int trees,
                                               std::uint64_t seed, std::uint64_t iteration) {
  std::vector<RolloutTree> out;
  out.reserve(static_cast<std::size_t>(trees));
  for (int g = 0; g < trees; ++g) {
    Rng rng = make_stream(seed, iteration, static_cast<std::uint64_t>(g));
    out.push_back(rollout_tree(params, sched, branch_sched, options, rng));
  }
  return out;
}

std::vector<RolloutTree> rollout_forest(const PolicyParams& params, const NoiseSchedule& sched,
                                        const BranchSchedule& branch_sched,
                                        const TreeOptions& options, int trees,
                                        std::uint64_t seed, std::uint64_t iteration) {
  require(trees >= 1, "need at least one tree");
  branch_sched.validate();
  std::vector<RolloutTree> out(static_cast<std::size_t>(trees));
  std::exception_ptr error;
#pragma omp parallel for schedule(dynamic, 1)
  for (int g = 0; g < trees; ++g) {
    try {
      Rng rng = make_stream(seed, iteration, static_cast<std::uint64_t>(g));
      out[static_cast<std::size_t>(g)] = rollout_tree(params, sched, branch_sched, options, rng);
    } catch (...) {
#pragma omp critical
      if (!error) error = std::current_exception();
    }
  }
  if (error) std::rethrow_exception(error);
  return out;
}

long analytic_tree_evals(int steps, std::span<const int> branch_steps, int branching,
                         RootPolicy root_policy) {
  long nodes = 1;
  int pos = 0;
  long evals = 0;
  for (std::size_t j = 0; j < branch_steps.size(); ++j) {
    if (j == 0 && independent_roots(branch_steps, root_policy)) {
      nodes = branching;
      continue;
    }
    evals += nodes * (branch_steps[j] - pos + 1);
    nodes *= branching;
    pos = branch_steps[j] + 1;
  }
  return evals + nodes * (steps - pos);
}

// --- replay ----------------------------------------------------------------------

std::vector<StepEval> replay_steps(const PolicyParams& params, const Trajectory& traj,
                                   const NoiseSchedule& sched) {
  const std::size_t T = traj.branch_steps.size();
  require(traj.states.size() == static_cast<std::size_t>(sched.steps()) + 1,
          "trajectory state count does not match the schedule");
  require(traj.kinds.size() == T && traj.gammas.size() == T && traj.mus.size() == T &&
              traj.step_logps.size() == T && traj.noises.size() == T,
          "trajectory record is inconsistent");
  std::vector<StepEval> out(T);
  for (std::size_t j = 0; j < T; ++j) {
    if (traj.kinds[j] == BranchKind::kIndependentRoot) {
      out[j] = {traj.step_logps[j], traj.mus[j], traj.gammas[j]};
      continue;
    }
    const int s = traj.branch_steps[j];
    const auto si = static_cast<std::size_t>(s);
    const double sigma = sched.sigma(s);
    const double gamma = traj.gammas[j];
    const Vec2 x = traj.states[si];
    out[j].gamma = gamma;
    out[j].mu = sde_mean(x, velocity(params, x, sigma), sigma, sched.dt(s), gamma);
    out[j].logp_mean = gamma > 0.0 ? gaussian_logp_mean(traj.states[si + 1], out[j].mu, gamma) : 0.0;
  }
  return out;
}

std::vector<double> replay_logp(const PolicyParams& params, const Trajectory& traj,
                                const NoiseSchedule& sched) {
  std::vector<double> out;
  for (const auto& e : replay_steps(params, traj, sched)) out.push_back(e.logp_mean);
  return out;
}

Vec2 replay_terminal(const PolicyParams& params, const Trajectory& traj,
                     const NoiseSchedule& sched) {
  require(!traj.states.empty(), "trajectory has no states");
  Vec2 x = traj.states.front();
  std::size_t j = 0;
  for (int k = 0; k < sched.steps(); ++k) {
    while (j < traj.branch_steps.size() && traj.kinds[j] == BranchKind::kIndependentRoot) ++j;
    if (j < traj.branch_steps.size() && traj.branch_steps[j] == k) {
      const double sigma = sched.sigma(k);
      const double gamma = traj.gammas[j];
      const Vec2 mu = sde_mean(x, velocity(params, x, sigma), sigma, sched.dt(k), gamma);
      x = mu + gamma * traj.noises[j];
      ++j;
    } else {
      x = ode_step(params, x, k, sched);
    }
  }
  return x;
}

Vec2 ode_sample(const PolicyParams& params, const NoiseSchedule& sched, Vec2 root) {
  Vec2 x = root;
  for (int k = 0; k < sched.steps(); ++k) x = ode_step(params, x, k, sched);
  return x;
}

std::vector<Vec2> ode_samples(const PolicyParams& params, const NoiseSchedule& sched,
                              std::size_t n, std::uint64_t seed) {
  Rng rng(seed);
  std::vector<Vec2> xs(n);
  for (auto& x : xs) x = normal2(rng);
  const auto count = static_cast<std::ptrdiff_t>(n);
#pragma omp parallel for schedule(static)
  for (std::ptrdiff_t i = 0; i < count; ++i) {
    xs[static_cast<std::size_t>(i)] = ode_sample(params, sched, xs[static_cast<std::size_t>(i)]);
  }
  return xs;
}

// --- records ---------------------------------------------------------------------

namespace {

constexpr char kTrajMagic[4] = {'T', 'M', 'P', 'T'};
constexpr std::uint16_t kTrajVersion = 1;

class Writer {
 public:
  void bytes(const void* p, std::size_t n) {
    const auto* c = static_cast<const unsigned char*>(p);
    buf_.insert(buf_.end(), c, c + n);
  }
  void u8(std::uint8_t v) { buf_.push_back(v); }
  void u16(std::uint16_t v) {
    buf_.push_back(static_cast<unsigned char>(v & 0xff));
    buf_.push_back(static_cast<unsigned char>(v >> 8));
  }
  void f64(double v) {
    const auto bits = std::bit_cast<std::uint64_t>(v);
    for (int i = 0; i < 8; ++i) buf_.push_back(static_cast<unsigned char>((bits >> (8 * i)) & 0xff));
  }
  std::vector<unsigned char> take() { return std::move(buf_); }

 private:
  std::vector<unsigned char> buf_;
};

class Reader {
 public:
  explicit Reader(std::span<const unsigned char> b) : b_(b) {}
  void need(std::size_t n) const { require(off_ + n <= b_.size(), "trajectory record truncated"); }
  std::uint8_t u8() {
    need(1);
    return b_[off_++];
  }
  std::uint16_t u16() {
    need(2);
    const auto v = static_cast<std::uint16_t>(b_[off_] | (b_[off_ + 1] << 8));
    off_ += 2;
    return v;
  }
  double f64() {
    need(8);
    std::uint64_t bits = 0;
    for (int i = 0; i < 8; ++i) bits |= static_cast<std::uint64_t>(b_[off_ + i]) << (8 * i);
    off_ += 8;
    return std::bit_cast<double>(bits);
  }
  bool done() const { return off_ == b_.size(); }

 private:
  std::span<const unsigned char> b_;
  std::size_t off_ = 0;
};

}  // namespace

std::vector<unsigned char> serialize_trajectory(const Trajectory& traj) {
  const std::size_t T = traj.branch_steps.size();
  require(T <= 0xffff && traj.states.size() <= 0xffff, "trajectory too large to serialize");
  Writer w;
  w.bytes(kTrajMagic, 4);
  w.u16(kTrajVersion);
  w.u16(static_cast<std::uint16_t>(T));
  w.u16(static_cast<std::uint16_t>(traj.states.size()));
  for (int s : traj.branch_steps) w.u16(static_cast<std::uint16_t>(s));
  for (auto k : traj.kinds) w.u8(static_cast<std::uint8_t>(k));
  for (int c : traj.choices) w.u8(static_cast<std::uint8_t>(c));
  for (std::size_t j = 0; j < T; ++j) {
    w.f64(traj.noises[j].x);
    w.f64(traj.noises[j].y);
    w.f64(traj.gammas[j]);
    w.f64(traj.mus[j].x);
    w.f64(traj.mus[j].y);
    w.f64(traj.step_logps[j]);
  }
  for (Vec2 s : traj.states) {
    w.f64(s.x);
    w.f64(s.y);
  }
  w.f64(traj.logp_total);
  return w.take();
}

Trajectory deserialize_trajectory(std::span<const unsigned char> bytes) {
  Reader r(bytes);
  r.need(4);
  require(std::memcmp(bytes.data(), kTrajMagic, 4) == 0, "trajectory magic mismatch");
  for (int i = 0; i < 4; ++i) r.u8();
  require(r.u16() == kTrajVersion, "unsupported trajectory version");
  const std::size_t T = r.u16();
  const std::size_t n_states = r.u16();
  Trajectory t;
  for (std::size_t j = 0; j < T; ++j) t.branch_steps.push_back(r.u16());
  for (std::size_t j = 0; j < T; ++j) {
    const auto k = r.u8();
    require(k <= 1, "unknown branch kind");
    t.kinds.push_back(static_cast<BranchKind>(k));
  }
  for (std::size_t j = 0; j < T; ++j) t.choices.push_back(r.u8());
  for (std::size_t j = 0; j < T; ++j) {
    const double nx = r.f64();
    const double ny = r.f64();
    t.noises.push_back({nx, ny});
    t.gammas.push_back(r.f64());
    const double mx = r.f64();
    const double my = r.f64();
    t.mus.push_back({mx, my});
    t.step_logps.push_back(r.f64());
  }
  for (std::size_t i = 0; i < n_states; ++i) {
    const double x = r.f64();
    const double y = r.f64();
    t.states.push_back({x, y});
  }
  t.logp_total = r.f64();
  require(r.done(), "trailing bytes after trajectory record");
  if (!t.states.empty()) t.terminal = t.states.back();
  return t;
}

void write_tree_jsonl(const RolloutTree& tree, std::ostream& out) {
  using nlohmann::json;
  auto pt = [](Vec2 v) { return json::array({v.x, v.y}); };
  for (std::size_t i = 0; i < tree.leaves.size(); ++i) {
    const Trajectory& t = tree.leaves[i];
    json j;
    j["leaf"] = i;
    j["branch_steps"] = t.branch_steps;
    j["choices"] = t.choices;
    json kinds = json::array();
    for (auto k : t.kinds) kinds.push_back(k == BranchKind::kSde ? "sde" : "root");
    j["kinds"] = kinds;
    json noises = json::array();
    json mus = json::array();
    for (std::size_t k = 0; k < t.noises.size(); ++k) {
      noises.push_back(pt(t.noises[k]));
      mus.push_back(pt(t.mus[k]));
    }
    j["noises"] = noises;
    j["mus"] = mus;
    j["gammas"] = t.gammas;
    j["step_logps"] = t.step_logps;
    json states = json::array();
    for (Vec2 s : t.states) states.push_back(pt(s));
    j["states"] = states;
    j["terminal"] = pt(t.terminal);
    j["logp_total"] = t.logp_total;
    out << j.dump() << '\n';
  }
}

}  // namespace tmpo
