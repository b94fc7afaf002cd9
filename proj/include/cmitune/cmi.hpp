#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "cmitune/errors.hpp"

namespace cmitune {

// A per-sample feature distribution f_x = softmax(h_s) over the d embedding
// coordinates, kept as plain doubles (the differentiable path lives in the
// loss builders).
struct FeatureDistribution {
  std::vector<double> probs;
  int64_t sample_id = 0;
  int label = 0;
};

// One centroid distribution per class plus the member counts it was derived
// from. Also used for the dummy distributions G_y in the alternating scheme.
struct CentroidSet {
  std::vector<std::vector<double>> g;  // indexed by label
  std::vector<int64_t> counts;
  int num_classes = 0;
};

enum class CmiMode {
  eq11_average,  // (1/C) sum_y mean_{x in y} KL(f_x || g_y)
  eq12_literal,  // (1/C) sum over all samples of KL(f_x || g_y)
};

// Numerically stable softmax of a raw feature vector.
std::vector<double> stable_softmax(std::span<const double> values);

FeatureDistribution feature_distribution(std::span<const double> pooled, int64_t sample_id, int label);

// sum_i p_i log(p_i / q_i), natural log, q clamped to >= kLogEps, 0 log 0 = 0.
double kl_divergence(std::span<const double> p, std::span<const double> q);

// Arithmetic mean of the cluster members.
std::vector<double> centroid(std::span<const FeatureDistribution> cluster);

// Mean KL from cluster members to a reference distribution.
double cluster_cmi(std::span<const FeatureDistribution> cluster, std::span<const double> g);

CentroidSet compute_centroids(std::span<const FeatureDistribution> samples, int num_classes);

double dataset_cmi(std::span<const FeatureDistribution> samples, const CentroidSet& centroids,
                   CmiMode mode);

struct MarkovCheckReport {
  bool pass = false;
  double max_tv_distance = 0.0;
  double threshold = 0.0;
  int64_t draws = 0;
};

// Draws the dimension index Z from each f_x and verifies the empirical law
// matches f_x in total variation within 3/sqrt(N), independent of the label.
MarkovCheckReport markov_chain_check(std::span<const FeatureDistribution> samples, uint64_t seed,
                                     int64_t draws_per_sample = 100000);

}  // namespace cmitune
