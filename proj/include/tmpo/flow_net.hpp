#pragma once

// Three-layer tanh MLP velocity field v(x, t) for 2-D rectified flow, with
// hand-written backpropagation and an Adam optimiser.
//
// Parameter layout (flat, row-major), for hidden width H:
//   W1 [H x 3]  b1 [H]  W2 [H x H]  b2 [H]  W3 [2 x H]  b3 [2]
// The network input is (x.x, x.y, t).

#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

#include "tmpo/reward_field.hpp"
#include "tmpo/vec2.hpp"

namespace tmpo {

inline constexpr int kMaxHidden = 256;

constexpr std::size_t mlp_param_count(int hidden) {
  const std::size_t h = static_cast<std::size_t>(hidden);
  return 3 * h + h + h * h + h + 2 * h + 2;
}

// Flat parameter-shaped storage. Tagged so weights and gradients cannot be
// mixed up at call sites.
template <class Tag>
class MlpTensor {
 public:
  MlpTensor() = default;
  explicit MlpTensor(int hidden);

  int hidden() const { return hidden_; }
  std::size_t size() const { return values_.size(); }
  std::span<double> values() { return values_; }
  std::span<const double> values() const { return values_; }

  std::span<const double> w1() const { return block(0, 3 * h()); }
  std::span<const double> b1() const { return block(3 * h(), h()); }
  std::span<const double> w2() const { return block(4 * h(), h() * h()); }
  std::span<const double> b2() const { return block(4 * h() + h() * h(), h()); }
  std::span<const double> w3() const { return block(5 * h() + h() * h(), 2 * h()); }
  std::span<const double> b3() const { return block(7 * h() + h() * h(), 2); }

  std::span<double> w1() { return block(0, 3 * h()); }
  std::span<double> b1() { return block(3 * h(), h()); }
  std::span<double> w2() { return block(4 * h(), h() * h()); }
  std::span<double> b2() { return block(4 * h() + h() * h(), h()); }
  std::span<double> w3() { return block(5 * h() + h() * h(), 2 * h()); }
  std::span<double> b3() { return block(7 * h() + h() * h(), 2); }

  void set_zero();
  bool all_finite() const;

  friend bool operator==(const MlpTensor&, const MlpTensor&) = default;

 private:
  std::size_t h() const { return static_cast<std::size_t>(hidden_); }
  std::span<const double> block(std::size_t off, std::size_t n) const {
    return std::span<const double>(values_).subspan(off, n);
  }
  std::span<double> block(std::size_t off, std::size_t n) {
    return std::span<double>(values_).subspan(off, n);
  }

  int hidden_ = 0;
  std::vector<double> values_;
};

struct ParamsTag {};
struct GradTag {};
using PolicyParams = MlpTensor<ParamsTag>;
using GradBuffer = MlpTensor<GradTag>;

// Adds `src` into `dst` element-wise; shapes must match.
void accumulate(GradBuffer& dst, const GradBuffer& src);
void scale(GradBuffer& g, double factor);
double l2_norm(const GradBuffer& g);

// Glorot-uniform hidden layers, small output layer, zero biases.
PolicyParams init_params(int hidden, std::uint64_t seed);

// Forward pass. Throws ValidationError on non-finite input or t outside
// [0, 1].
Vec2 velocity(const PolicyParams& params, Vec2 x, double t);

// Accumulates d(upstream . v)/d(theta) into `grads` and returns
// d(upstream . v)/dx.
Vec2 velocity_backward(const PolicyParams& params, Vec2 x, double t, Vec2 upstream,
                       GradBuffer& grads);

struct AdamConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

class Adam {
 public:
  Adam(const PolicyParams& shape, AdamConfig config);

  // One update of `params` from `grads`. Throws NumericalError if the
  // result is not finite.
  void step(PolicyParams& params, const GradBuffer& grads);

  void set_lr(double lr) { config_.lr = lr; }
  long steps_taken() const { return t_; }

 private:
  AdamConfig config_;
  std::vector<double> m_;
  std::vector<double> v_;
  long t_ = 0;
};

// --- rectified-flow pretraining -------------------------------------------

struct FlowSample {
  Vec2 x_t;
  double t = 0.0;
  Vec2 target;  // x1 - x0
};

// One minibatch of (x_t, t, x1 - x0) with x0 from data, x1 ~ N(0, I),
// t ~ U[0, 1].
std::vector<FlowSample> draw_flow_batch(const MixtureSpec& spec, std::size_t n,
                                        std::uint64_t seed);

// Mean squared velocity error over the batch; when `grads` is non-null the
// gradient of that mean is accumulated into it. Serial reference.
double flow_matching_loss_serial(const PolicyParams& params, std::span<const FlowSample> batch,
                                 GradBuffer* grads);

// Same quantity computed over a fixed number of chunks with OpenMP; the
// chunk partition and reduction order do not depend on the thread count.
double flow_matching_loss(const PolicyParams& params, std::span<const FlowSample> batch,
                          GradBuffer* grads);

struct PretrainConfig {
  int hidden = 64;
  int steps = 4000;
  int batch = 256;
  double lr = 2e-3;
  double lr_final_fraction = 0.1;  // cosine decay floor
  std::uint64_t seed = 7;
  int log_every = 50;
};

struct PretrainResult {
  PolicyParams params;
  std::vector<std::pair<int, double>> loss_curve;  // (step, minibatch loss)
  double initial_loss = 0.0;  // on a fixed held-out batch
  double final_loss = 0.0;
};

// Throws NumericalError naming the step when the loss becomes non-finite.
PretrainResult pretrain_rectified_flow(const MixtureSpec& spec, const PretrainConfig& config);

// --- checkpoints -------------------------------------------------------------
//
// Byte layout (little-endian):
//   [0..4)   magic "TMPW"
//   [4..8)   u32 version (1)
//   [8..12)  u32 hidden width H
//   [12..16) u32 parameter count
//   then parameter count x f64, in the flat layout above.

inline constexpr std::uint32_t kCheckpointVersion = 1;

std::vector<unsigned char> serialize_params(const PolicyParams& params);
PolicyParams deserialize_params(std::span<const unsigned char> bytes);
void save_params(const PolicyParams& params, const std::filesystem::path& path);
PolicyParams load_params(const std::filesystem::path& path);

}  // namespace tmpo
