#include "tmpo/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "tmpo/error.hpp"

namespace tmpo {

SampleSet::SampleSet(std::vector<double> flat, std::size_t dim) : flat_(std::move(flat)), dim_(dim) {
  require(dim_ >= 1, "sample dimension must be >= 1");
  require(flat_.size() % dim_ == 0, "flat sample buffer is not a multiple of the dimension");
  require(size() >= 2, "a sample set needs N >= 2");
  for (double v : flat_) require(std::isfinite(v), "samples must be finite");
}

SampleSet SampleSet::from_points(std::span<const Vec2> points) {
  std::vector<double> flat;
  flat.reserve(points.size() * 2);
  for (Vec2 p : points) {
    flat.push_back(p.x);
    flat.push_back(p.y);
  }
  return SampleSet(std::move(flat), 2);
}

namespace {

double log_pair(std::span<const double> a, std::span<const double> b, double log_sqrt_d) {
  double s = 0.0;
  for (std::size_t k = 0; k < a.size(); ++k) s += (a[k] - b[k]) * (a[k] - b[k]);
  return std::log(std::max(std::sqrt(s), kLgmdDistanceFloor)) - log_sqrt_d;
}

std::vector<std::vector<double>> embed_all(const SampleSet& s, const Embedding& embed) {
  std::vector<std::vector<double>> out(s.size());
  for (std::size_t i = 0; i < s.size(); ++i) {
    out[i] = embed(s.row(i));
    double n = 0.0;
    for (double v : out[i]) n += v * v;
    if (!(n > 0.0)) throw ValidationError("undefined cosine");
    n = std::sqrt(n);
    for (double& v : out[i]) v /= n;
  }
  return out;
}

double cosine_distance(const std::vector<double>& a, const std::vector<double>& b) {
  require(a.size() == b.size(), "embeddings differ in dimension");
  double d = 0.0;
  for (std::size_t k = 0; k < a.size(); ++k) d += a[k] * b[k];
  return 1.0 - std::clamp(d, -1.0, 1.0);
}

double pair_count(std::size_t n) { return 0.5 * static_cast<double>(n) * static_cast<double>(n - 1); }

}  // namespace

double lgmd_serial(const SampleSet& s) {
  const double ld = 0.5 * std::log(static_cast<double>(s.dim()));
  double sum = 0.0;
  for (std::size_t i = 0; i < s.size(); ++i) {
    for (std::size_t j = i + 1; j < s.size(); ++j) sum += log_pair(s.row(i), s.row(j), ld);
  }
  return sum / pair_count(s.size());
}

double lgmd(const SampleSet& s) {
  const double ld = 0.5 * std::log(static_cast<double>(s.dim()));
  const std::size_t n = s.size();
  std::vector<double> rows(n, 0.0);
  const auto count = static_cast<std::ptrdiff_t>(n);
#pragma omp parallel for schedule(dynamic, 16)
  for (std::ptrdiff_t ii = 0; ii < count; ++ii) {
    const auto i = static_cast<std::size_t>(ii);
    double r = 0.0;
    for (std::size_t j = i + 1; j < n; ++j) r += log_pair(s.row(i), s.row(j), ld);
    rows[i] = r;
  }
  double sum = 0.0;
  for (double r : rows) sum += r;
  return sum / pair_count(n);
}

std::vector<double> identity_embedding(std::span<const double> x) {
  return {x.begin(), x.end()};
}

double cosine_diversity_serial(const SampleSet& s, const Embedding& embed) {
  const auto e = embed_all(s, embed);
  double sum = 0.0;
  for (std::size_t i = 0; i < e.size(); ++i) {
    for (std::size_t j = i + 1; j < e.size(); ++j) sum += cosine_distance(e[i], e[j]);
  }
  return sum / pair_count(e.size());
}

double cosine_diversity(const SampleSet& s, const Embedding& embed) {
  const auto e = embed_all(s, embed);
  const std::size_t n = e.size();
  std::vector<double> rows(n, 0.0);
  const auto count = static_cast<std::ptrdiff_t>(n);
#pragma omp parallel for schedule(dynamic, 16)
  for (std::ptrdiff_t ii = 0; ii < count; ++ii) {
    const auto i = static_cast<std::size_t>(ii);
    double r = 0.0;
    for (std::size_t j = i + 1; j < n; ++j) r += cosine_distance(e[i], e[j]);
    rows[i] = r;
  }
  double sum = 0.0;
  for (double r : rows) sum += r;
  return sum / pair_count(n);
}

Occupancy mode_occupancy(const MixtureSpec& spec, std::span<const Vec2> samples) {
  require(!spec.components.empty(), "mixture has no components");
  require(!samples.empty(), "no samples to assign");
  Occupancy occ;
  occ.counts.assign(spec.components.size(), 0);
  occ.assignment.reserve(samples.size());
  for (Vec2 x : samples) {
    require(is_finite(x), "samples must be finite");
    std::size_t best = 0;
    double best_d = std::numeric_limits<double>::infinity();
    for (std::size_t c = 0; c < spec.components.size(); ++c) {
      const double d = squared_norm(x - spec.components[c].mean);
      if (d < best_d) {
        best_d = d;
        best = c;
      }
    }
    occ.assignment.push_back(best);
    ++occ.counts[best];
  }
  const double n = static_cast<double>(samples.size());
  for (std::size_t c : occ.counts) occ.fractions.push_back(static_cast<double>(c) / n);
  occ.max_fraction = *std::max_element(occ.fractions.begin(), occ.fractions.end());
  return occ;
}

}  // namespace tmpo
