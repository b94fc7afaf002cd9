#include "cmitune/cmi.hpp"

#include <algorithm>
#include <cmath>

#include "cmitune/tensor.hpp"

namespace cmitune {

std::vector<double> stable_softmax(std::span<const double> values) {
  if (values.empty()) throw DimensionError("stable_softmax: empty input");
  double mx = values[0];
  for (double v : values) mx = std::max(mx, v);
  std::vector<double> out(values.size());
  double z = 0.0;
  for (size_t i = 0; i < values.size(); ++i) {
    out[i] = std::exp(values[i] - mx);
    z += out[i];
  }
  for (double& v : out) v /= z;
  return out;
}

FeatureDistribution feature_distribution(std::span<const double> pooled, int64_t sample_id, int label) {
  for (double v : pooled) {
    if (!std::isfinite(v)) throw NumericError("feature_distribution: non-finite feature value");
  }
  FeatureDistribution fd;
  fd.probs = stable_softmax(pooled);
  fd.sample_id = sample_id;
  fd.label = label;
  return fd;
}

double kl_divergence(std::span<const double> p, std::span<const double> q) {
  if (p.size() != q.size()) {
    throw DimensionError("kl_divergence: length mismatch " + std::to_string(p.size()) + " vs " +
                         std::to_string(q.size()));
  }
  double kl = 0.0;
  for (size_t i = 0; i < p.size(); ++i) {
    if (p[i] > 0.0) kl += p[i] * std::log(std::max(p[i], kLogEps) / std::max(q[i], kLogEps));
  }
  return kl;
}

std::vector<double> centroid(std::span<const FeatureDistribution> cluster) {
  if (cluster.empty()) throw InputError("centroid: degenerate empty cluster");
  const size_t d = cluster[0].probs.size();
  std::vector<double> g(d, 0.0);
  for (const FeatureDistribution& f : cluster) {
    if (f.probs.size() != d) throw DimensionError("centroid: mixed distribution lengths in cluster");
    for (size_t i = 0; i < d; ++i) g[i] += f.probs[i];
  }
  const double inv = 1.0 / static_cast<double>(cluster.size());
  for (double& v : g) v *= inv;
  return g;
}

double cluster_cmi(std::span<const FeatureDistribution> cluster, std::span<const double> g) {
  if (cluster.empty()) throw InputError("cluster_cmi: degenerate empty cluster");
  double total = 0.0;
  for (const FeatureDistribution& f : cluster) total += kl_divergence(f.probs, g);
  return total / static_cast<double>(cluster.size());
}

CentroidSet compute_centroids(std::span<const FeatureDistribution> samples, int num_classes) {
  if (num_classes < 1) throw InputError("compute_centroids: need at least one class");
  CentroidSet set;
  set.num_classes = num_classes;
  set.counts.assign(static_cast<size_t>(num_classes), 0);
  size_t d = 0;
  for (const FeatureDistribution& f : samples) {
    if (f.label < 0 || f.label >= num_classes) {
      throw InputError("compute_centroids: label " + std::to_string(f.label) + " out of range");
    }
    d = f.probs.size();
  }
  set.g.assign(static_cast<size_t>(num_classes), std::vector<double>(d, 0.0));
  for (const FeatureDistribution& f : samples) {
    auto& g = set.g[static_cast<size_t>(f.label)];
    for (size_t i = 0; i < d; ++i) g[i] += f.probs[i];
    ++set.counts[static_cast<size_t>(f.label)];
  }
  for (int y = 0; y < num_classes; ++y) {
    const int64_t n = set.counts[static_cast<size_t>(y)];
    if (n > 0) {
      const double inv = 1.0 / static_cast<double>(n);
      for (double& v : set.g[static_cast<size_t>(y)]) v *= inv;
    }
  }
  return set;
}

double dataset_cmi(std::span<const FeatureDistribution> samples, const CentroidSet& centroids,
                   CmiMode mode) {
  if (centroids.num_classes < 1) throw ConfigError("dataset_cmi: empty centroid set");
  for (const FeatureDistribution& f : samples) {
    if (f.label < 0 || f.label >= centroids.num_classes ||
        centroids.g[static_cast<size_t>(f.label)].empty()) {
      throw ConfigError("dataset_cmi: missing centroid for label " + std::to_string(f.label));
    }
  }
  const double c = static_cast<double>(centroids.num_classes);
  if (mode == CmiMode::eq12_literal) {
    double total = 0.0;
    for (const FeatureDistribution& f : samples) {
      total += kl_divergence(f.probs, centroids.g[static_cast<size_t>(f.label)]);
    }
    return total / c;
  }
  // eq11_average: per-cluster means first, then the average over classes.
  std::vector<double> sums(static_cast<size_t>(centroids.num_classes), 0.0);
  std::vector<int64_t> counts(static_cast<size_t>(centroids.num_classes), 0);
  for (const FeatureDistribution& f : samples) {
    sums[static_cast<size_t>(f.label)] += kl_divergence(f.probs, centroids.g[static_cast<size_t>(f.label)]);
    ++counts[static_cast<size_t>(f.label)];
  }
  double total = 0.0;
  for (int y = 0; y < centroids.num_classes; ++y) {
    if (counts[static_cast<size_t>(y)] > 0) {
      total += sums[static_cast<size_t>(y)] / static_cast<double>(counts[static_cast<size_t>(y)]);
    }
  }
  return total / c;
}

MarkovCheckReport markov_chain_check(std::span<const FeatureDistribution> samples, uint64_t seed,
                                     int64_t draws_per_sample) {
  MarkovCheckReport report;
  report.draws = draws_per_sample;
  report.threshold = 3.0 / std::sqrt(static_cast<double>(draws_per_sample));
  std::mt19937_64 rng(derive_seed(seed, "markov_check"));
  for (const FeatureDistribution& f : samples) {
    const size_t d = f.probs.size();
    // inverse-CDF sampling with a pinned uniform generator
    std::vector<double> cdf(d);
    double acc = 0.0;
    for (size_t i = 0; i < d; ++i) {
      acc += f.probs[i];
      cdf[i] = acc;
    }
    std::vector<int64_t> freq(d, 0);
    for (int64_t n = 0; n < draws_per_sample; ++n) {
      const double u = uniform_unit(rng) * acc;
      const size_t z = static_cast<size_t>(std::lower_bound(cdf.begin(), cdf.end(), u) - cdf.begin());
      ++freq[std::min(z, d - 1)];
    }
    double tv = 0.0;
    for (size_t i = 0; i < d; ++i) {
      tv += std::abs(static_cast<double>(freq[i]) / static_cast<double>(draws_per_sample) - f.probs[i]);
    }
    tv *= 0.5;
    report.max_tv_distance = std::max(report.max_tv_distance, tv);
  }
  report.pass = report.max_tv_distance < report.threshold;
  return report;
}

}  // namespace cmitune
