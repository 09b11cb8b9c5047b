#pragma once

// Diversity and coverage statistics over generated samples.

#include <functional>
#include <span>
#include <vector>

#include "tmpo/reward_field.hpp"
#include "tmpo/vec2.hpp"

namespace tmpo {

// N feature vectors of dimension D, stored row-major.
class SampleSet {
 public:
  SampleSet(std::vector<double> flat, std::size_t dim);
  static SampleSet from_points(std::span<const Vec2> points);

  std::size_t size() const { return flat_.size() / dim_; }
  std::size_t dim() const { return dim_; }
  std::span<const double> row(std::size_t i) const {
    return std::span<const double>(flat_).subspan(i * dim_, dim_);
  }
  std::span<const double> flat() const { return flat_; }

 private:
  std::vector<double> flat_;
  std::size_t dim_ = 0;
};

inline constexpr double kLgmdDistanceFloor = 1e-12;

// (2 / (N (N - 1))) sum_{i<j} log(max(|x_i - x_j|, 1e-12) / sqrt(D)).
// Parallel over rows; each row's partial sum is formed sequentially and the
// row sums are added in index order, so the result does not depend on the
// thread count.
double lgmd(const SampleSet& s);
// Single-loop reference.
double lgmd_serial(const SampleSet& s);

using Embedding = std::function<std::vector<double>(std::span<const double>)>;

std::vector<double> identity_embedding(std::span<const double> x);

// Mean pairwise cosine distance of embedded samples, in [0, 2]. Throws
// ValidationError on a zero-norm embedding.
double cosine_diversity(const SampleSet& s, const Embedding& embed = identity_embedding);
double cosine_diversity_serial(const SampleSet& s, const Embedding& embed = identity_embedding);

struct Occupancy {
  std::vector<std::size_t> counts;   // per component, sum == N
  std::vector<double> fractions;     // counts / N
  std::vector<std::size_t> assignment;  // per sample
  double max_fraction = 0.0;
};

// Nearest-mean (Euclidean) assignment of each sample to a component.
Occupancy mode_occupancy(const MixtureSpec& spec, std::span<const Vec2> samples);

}  // namespace tmpo
