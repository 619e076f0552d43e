#pragma once

#include <cstddef>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "conclu/geometry.hpp"
#include "conclu/network.hpp"
#include "conclu/transport.hpp"

namespace conclu::eval {

using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

struct FeatureTable {
  RowMatrix rows;           // M×d
  std::vector<int> labels;  // length M, -1 when unknown
  std::string source;
};

// Max-pooled global features in eval mode, one row per cloud.
FeatureTable extract_features(net::ModelState& state, std::span<const geom::PointCloud> clouds,
                              std::string source = {});

struct ProbeOptions {
  double reg = 1e-3;
  double step = 1.0;  // initial step size, decays as 1/sqrt(t+1)
  std::size_t max_iterations = 10000;
  double grad_tolerance = 1e-6;
};

struct ProbeResult {
  double accuracy = 0.0;
  std::vector<int> predictions;
  std::vector<int> classes;
  std::size_t iterations = 0;  // largest over the one-vs-rest problems
};

// One-vs-rest linear classifier on standardized features, trained by
// full-batch subgradient descent on the L2-regularized hinge loss.
ProbeResult linear_probe(const FeatureTable& train, const FeatureTable& test,
                         const ProbeOptions& options = {});

struct SegmentOptions {
  double epsilon = 1e-3;
  std::size_t iterations = 20;
};

struct Assignment {
  std::vector<int> labels;  // row argmax of gamma, lowest index on ties
  ot::Matrix gamma;         // N×J pseudo-labels
};

// Row argmax with ties to the lowest column.
std::vector<int> argmax_rows(const ot::Matrix& m);

Assignment hard_assignments(net::ModelState& state, const geom::PointCloud& pc,
                            const SegmentOptions& options = {});

struct BalanceStats {
  std::size_t min_size = 0;
  std::size_t max_size = 0;
  double mean_size = 0.0;
  double max_deviation = 0.0;  // max |count - N/J|
  std::vector<std::size_t> counts;
};

BalanceStats partition_balance(std::span<const int> assignments, std::size_t clusters);

// max_j |sum_i gamma_ij - N/J|
double soft_balance_deviation(const ot::Matrix& gamma);

double adjusted_rand_index(std::span<const int> pred, std::span<const int> truth);

void export_features_csv(const FeatureTable& table, const std::filesystem::path& path);
FeatureTable load_features_csv(const std::filesystem::path& path);

// Projection onto the top two principal axes of the centered features. Each
// axis is signed so that its largest-magnitude loading is positive.
RowMatrix pca_2d(const FeatureTable& table);

}  // namespace conclu::eval
