#include "tmpo/flow_net.hpp"

#include <algorithm>
#include <array>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <numbers>
#include <random>
#include <string>

#include "tmpo/error.hpp"

namespace tmpo {

template <class Tag>
MlpTensor<Tag>::MlpTensor(int hidden) : hidden_(hidden) {
  require(hidden >= 1 && hidden <= kMaxHidden,
          "hidden width must be in [1, " + std::to_string(kMaxHidden) + "]");
  values_.assign(mlp_param_count(hidden), 0.0);
}

template <class Tag>
void MlpTensor<Tag>::set_zero() {
  std::fill(values_.begin(), values_.end(), 0.0);
}

template <class Tag>
bool MlpTensor<Tag>::all_finite() const {
  return std::all_of(values_.begin(), values_.end(), [](double v) { return std::isfinite(v); });
}

template class MlpTensor<ParamsTag>;
template class MlpTensor<GradTag>;

void accumulate(GradBuffer& dst, const GradBuffer& src) {
  require(dst.size() == src.size(), "gradient shapes differ");
  auto d = dst.values();
  auto s = src.values();
  for (std::size_t i = 0; i < d.size(); ++i) d[i] += s[i];
}

void scale(GradBuffer& g, double factor) {
  for (double& v : g.values()) v *= factor;
}

double l2_norm(const GradBuffer& g) {
  double s = 0.0;
  for (double v : g.values()) s += v * v;
  return std::sqrt(s);
}

PolicyParams init_params(int hidden, std::uint64_t seed) {
  PolicyParams p(hidden);
  std::mt19937_64 rng(seed);
  auto fill = [&rng](std::span<double> w, double bound) {
    std::uniform_real_distribution<double> u(-bound, bound);
    for (double& v : w) v = u(rng);
  };
  const double h = hidden;
  fill(p.w1(), std::sqrt(6.0 / (3.0 + h)));
  fill(p.w2(), std::sqrt(6.0 / (h + h)));
  fill(p.w3(), 0.1 * std::sqrt(6.0 / (h + 2.0)));
  return p;
}

namespace {

struct Activations {
  std::array<double, 3> in{};
  std::array<double, kMaxHidden> h1{};
  std::array<double, kMaxHidden> h2{};
};

Vec2 forward(const PolicyParams& p, Vec2 x, double t, Activations& a) {
  const int h = p.hidden();
  a.in = {x.x, x.y, t};
  const auto w1 = p.w1();
  const auto b1 = p.b1();
  for (int j = 0; j < h; ++j) {
    const double* row = &w1[3 * j];
    a.h1[j] = std::tanh(row[0] * a.in[0] + row[1] * a.in[1] + row[2] * a.in[2] + b1[j]);
  }
  const auto w2 = p.w2();
  const auto b2 = p.b2();
  for (int j = 0; j < h; ++j) {
    const double* row = &w2[static_cast<std::size_t>(j) * h];
    double z = b2[j];
    for (int k = 0; k < h; ++k) z += row[k] * a.h1[k];
    a.h2[j] = std::tanh(z);
  }
  const auto w3 = p.w3();
  const auto b3 = p.b3();
  double o0 = b3[0];
  double o1 = b3[1];
  for (int k = 0; k < h; ++k) {
    o0 += w3[k] * a.h2[k];
    o1 += w3[h + k] * a.h2[k];
  }
  return {o0, o1};
}

void check_inputs(Vec2 x, double t) {
  require(is_finite(x) && std::isfinite(t), "velocity: non-finite input");
  require(t >= 0.0 && t <= 1.0, "velocity: t must lie in [0, 1]");
}

}  // namespace

Vec2 velocity(const PolicyParams& params, Vec2 x, double t) {
  check_inputs(x, t);
  Activations a;
  return forward(params, x, t, a);
}

Vec2 velocity_backward(const PolicyParams& params, Vec2 x, double t, Vec2 upstream,
                       GradBuffer& grads) {
  check_inputs(x, t);
  require(is_finite(upstream), "velocity_backward: non-finite upstream");
  require(grads.hidden() == params.hidden(), "velocity_backward: gradient shape mismatch");
  if (upstream.x == 0.0 && upstream.y == 0.0) return {};

  const int h = params.hidden();
  Activations a;
  forward(params, x, t, a);

  auto gb3 = grads.b3();
  gb3[0] += upstream.x;
  gb3[1] += upstream.y;

  // Output layer, and dL/dz2 through tanh.
  const auto w3 = params.w3();
  auto gw3 = grads.w3();
  std::array<double, kMaxHidden> dz2{};
  for (int k = 0; k < h; ++k) {
    gw3[k] += upstream.x * a.h2[k];
    gw3[h + k] += upstream.y * a.h2[k];
    const double dh2 = upstream.x * w3[k] + upstream.y * w3[h + k];
    dz2[k] = dh2 * (1.0 - a.h2[k] * a.h2[k]);
  }

  const auto w2 = params.w2();
  auto gw2 = grads.w2();
  auto gb2 = grads.b2();
  std::array<double, kMaxHidden> dh1{};
  for (int j = 0; j < h; ++j) {
    const double g = dz2[j];
    gb2[j] += g;
    if (g == 0.0) continue;
    const std::size_t off = static_cast<std::size_t>(j) * h;
    for (int k = 0; k < h; ++k) {
      gw2[off + k] += g * a.h1[k];
      dh1[k] += g * w2[off + k];
    }
  }

  const auto w1 = params.w1();
  auto gw1 = grads.w1();
  auto gb1 = grads.b1();
  Vec2 dx;
  for (int j = 0; j < h; ++j) {
    const double dz1 = dh1[j] * (1.0 - a.h1[j] * a.h1[j]);
    gb1[j] += dz1;
    gw1[3 * j + 0] += dz1 * a.in[0];
    gw1[3 * j + 1] += dz1 * a.in[1];
    gw1[3 * j + 2] += dz1 * a.in[2];
    dx.x += dz1 * w1[3 * j + 0];
    dx.y += dz1 * w1[3 * j + 1];
  }
  return dx;
}

// --- Adam -------------------------------------------------------------------

Adam::Adam(const PolicyParams& shape, AdamConfig config)
    : config_(config), m_(shape.size(), 0.0), v_(shape.size(), 0.0) {}

void Adam::step(PolicyParams& params, const GradBuffer& grads) {
  require(params.size() == m_.size() && grads.size() == m_.size(), "Adam: shape mismatch");
  ++t_;
  const double bc1 = 1.0 - std::pow(config_.beta1, static_cast<double>(t_));
  const double bc2 = 1.0 - std::pow(config_.beta2, static_cast<double>(t_));
  auto w = params.values();
  auto g = grads.values();
  for (std::size_t i = 0; i < w.size(); ++i) {
    m_[i] = config_.beta1 * m_[i] + (1.0 - config_.beta1) * g[i];
    v_[i] = config_.beta2 * v_[i] + (1.0 - config_.beta2) * g[i] * g[i];
    const double mhat = m_[i] / bc1;
    const double vhat = v_[i] / bc2;
    w[i] -= config_.lr * mhat / (std::sqrt(vhat) + config_.eps);
  }
  if (!params.all_finite()) {
    throw NumericalError("Adam step " + std::to_string(t_) + " produced non-finite parameters");
  }
}

// --- pretraining ------------------------------------------------------------

std::vector<FlowSample> draw_flow_batch(const MixtureSpec& spec, std::size_t n,
                                        std::uint64_t seed) {
  const std::vector<Vec2> data = sample_data(spec, n, seed);
  std::mt19937_64 rng(seed ^ 0x9e3779b97f4a7c15ULL);
  std::normal_distribution<double> normal(0.0, 1.0);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  std::vector<FlowSample> batch(n);
  for (std::size_t i = 0; i < n; ++i) {
    const Vec2 x0 = data[i];
    const double n1 = normal(rng);
    const double n2 = normal(rng);
    const Vec2 x1{n1, n2};
    const double t = unit(rng);
    batch[i] = {(1.0 - t) * x0 + t * x1, t, x1 - x0};
  }
  return batch;
}

namespace {

double sample_term(const PolicyParams& params, const FlowSample& s, double inv_n,
                   GradBuffer* grads) {
  const Vec2 v = velocity(params, s.x_t, s.t);
  const Vec2 r = v - s.target;
  if (grads != nullptr) velocity_backward(params, s.x_t, s.t, 2.0 * inv_n * r, *grads);
  return squared_norm(r);
}

constexpr int kLossChunks = 16;

}  // namespace

double flow_matching_loss_serial(const PolicyParams& params, std::span<const FlowSample> batch,
                                 GradBuffer* grads) {
  require(!batch.empty(), "empty flow-matching batch");
  const double inv_n = 1.0 / static_cast<double>(batch.size());
  double sum = 0.0;
  for (const auto& s : batch) sum += sample_term(params, s, inv_n, grads);
  return sum * inv_n;
}

double flow_matching_loss(const PolicyParams& params, std::span<const FlowSample> batch,
                          GradBuffer* grads) {
  require(!batch.empty(), "empty flow-matching batch");
  const std::size_t n = batch.size();
  const double inv_n = 1.0 / static_cast<double>(n);
  std::array<double, kLossChunks> sums{};
  std::vector<GradBuffer> partial;
  if (grads != nullptr) partial.assign(kLossChunks, GradBuffer(params.hidden()));

#pragma omp parallel for schedule(static)
  for (int c = 0; c < kLossChunks; ++c) {
    const std::size_t lo = n * static_cast<std::size_t>(c) / kLossChunks;
    const std::size_t hi = n * static_cast<std::size_t>(c + 1) / kLossChunks;
    GradBuffer* g = grads != nullptr ? &partial[static_cast<std::size_t>(c)] : nullptr;
    double s = 0.0;
    for (std::size_t i = lo; i < hi; ++i) s += sample_term(params, batch[i], inv_n, g);
    sums[static_cast<std::size_t>(c)] = s;
  }

  double sum = 0.0;
  for (int c = 0; c < kLossChunks; ++c) {
    sum += sums[static_cast<std::size_t>(c)];
    if (grads != nullptr) accumulate(*grads, partial[static_cast<std::size_t>(c)]);
  }
  return sum * inv_n;
}

PretrainResult pretrain_rectified_flow(const MixtureSpec& spec, const PretrainConfig& config) {
  spec.validate();
  require(config.steps >= 1 && config.batch >= 1, "pretrain: steps and batch must be >= 1");
  require(config.lr > 0.0, "pretrain: lr must be > 0");

  PretrainResult out;
  out.params = init_params(config.hidden, config.seed);
  const auto holdout = draw_flow_batch(spec, 2048, config.seed ^ 0xabcdef12345ULL);
  out.initial_loss = flow_matching_loss(out.params, holdout, nullptr);

  Adam adam(out.params, AdamConfig{.lr = config.lr});
  GradBuffer grads(config.hidden);
  const double floor = config.lr_final_fraction;
  for (int step = 0; step < config.steps; ++step) {
    const double progress = static_cast<double>(step) / config.steps;
    adam.set_lr(config.lr * (floor + (1.0 - floor) * 0.5 *
                                         (1.0 + std::cos(std::numbers::pi * progress))));
    const auto batch = draw_flow_batch(spec, static_cast<std::size_t>(config.batch),
                                       config.seed * 1000003ULL + static_cast<std::uint64_t>(step));
    grads.set_zero();
    const double loss = flow_matching_loss(out.params, batch, &grads);
    if (!std::isfinite(loss) || !grads.all_finite()) {
      throw NumericalError("pretraining diverged at step " + std::to_string(step));
    }
    if (step % config.log_every == 0 || step + 1 == config.steps) {
      out.loss_curve.emplace_back(step, loss);
    }
    adam.step(out.params, grads);
  }
  out.final_loss = flow_matching_loss(out.params, holdout, nullptr);
  if (!std::isfinite(out.final_loss)) {
    throw NumericalError("pretraining diverged at step " + std::to_string(config.steps));
  }
  return out;
}

// --- checkpoints ------------------------------------------------------------

namespace {

static_assert(std::endian::native == std::endian::little,
              "checkpoint I/O assumes a little-endian host");

constexpr char kMagic[4] = {'T', 'M', 'P', 'W'};

void put_u32(std::vector<unsigned char>& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<unsigned char>((v >> (8 * i)) & 0xff));
}

std::uint32_t get_u32(std::span<const unsigned char> b, std::size_t off) {
  std::uint32_t v = 0;
  for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(b[off + i]) << (8 * i);
  return v;
}

}  // namespace

std::vector<unsigned char> serialize_params(const PolicyParams& params) {
  std::vector<unsigned char> out(kMagic, kMagic + 4);
  put_u32(out, kCheckpointVersion);
  put_u32(out, static_cast<std::uint32_t>(params.hidden()));
  put_u32(out, static_cast<std::uint32_t>(params.size()));
  const std::size_t off = out.size();
  out.resize(off + params.size() * sizeof(double));
  std::memcpy(out.data() + off, params.values().data(), params.size() * sizeof(double));
  return out;
}

PolicyParams deserialize_params(std::span<const unsigned char> bytes) {
  require(bytes.size() >= 16, "checkpoint too short");
  require(std::memcmp(bytes.data(), kMagic, 4) == 0, "checkpoint magic mismatch");
  require(get_u32(bytes, 4) == kCheckpointVersion, "unsupported checkpoint version");
  const auto hidden = static_cast<int>(get_u32(bytes, 8));
  const std::uint32_t count = get_u32(bytes, 12);
  require(hidden >= 1 && hidden <= kMaxHidden, "checkpoint hidden width out of range");
  require(count == mlp_param_count(hidden), "checkpoint parameter count mismatch");
  require(bytes.size() == 16 + count * sizeof(double), "checkpoint size mismatch");
  PolicyParams p(hidden);
  std::memcpy(p.values().data(), bytes.data() + 16, count * sizeof(double));
  require(p.all_finite(), "checkpoint contains non-finite parameters");
  return p;
}

void save_params(const PolicyParams& params, const std::filesystem::path& path) {
  const auto bytes = serialize_params(params);
  std::ofstream f(path, std::ios::binary);
  require(static_cast<bool>(f), "cannot open " + path.string() + " for writing");
  f.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
}

PolicyParams load_params(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  require(static_cast<bool>(f), "cannot open checkpoint " + path.string());
  std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(f)),
                                   std::istreambuf_iterator<char>());
  return deserialize_params(bytes);
}

}  // namespace tmpo
