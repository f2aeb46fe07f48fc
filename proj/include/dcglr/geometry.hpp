#pragma once

#include <array>
#include <optional>
#include <vector>

#include "dcglr/rng.hpp"
#include "dcglr/tensor.hpp"

namespace dcglr::geom {

struct PointCloud {
    // N x 3, row per point.
    std::vector<std::array<double, 3>> points;
    std::optional<int> label;

    int size() const { return static_cast<int>(points.size()); }
};

struct CropConfig {
    int num_global = 2;   // I
    int num_local = 8;    // J
    int num_resolution = 2;  // R half-resolution additions
    double r_g1 = 0.7;
    double r_g2 = 1.0;
    double r_l1 = 0.2;
    double r_l2 = 0.5;
    // Fixed sizes so batched crops share sequence lengths; 0 disables resampling.
    int global_resample = 1024;
    int local_resample = 256;
    int min_crop_points = 32;  // k_patch of the backbone
};

struct CropSet {
    std::vector<PointCloud> globals;  // I members
    std::vector<PointCloud> locals;   // J + R members
};

double squared_distance(const std::array<double, 3>& a, const std::array<double, 3>& b);

// Greedy max-min farthest point sampling. Start index drawn from rng;
// distance ties resolved to the lower index.
std::vector<int> fps(const PointCloud& cloud, int m, RngStream& rng);
std::vector<int> fps_from(const PointCloud& cloud, int m, int start);

// Indices of the k nearest points to center, ties to the lower index.
std::vector<int> knn(const PointCloud& cloud, const std::array<double, 3>& center, int k);

// Contiguous region: random anchor, round(ratio*N) nearest neighbors.
PointCloud crop(const PointCloud& cloud, double ratio, RngStream& rng, int min_points = 1);
PointCloud crop_at(const PointCloud& cloud, double ratio, int anchor, int min_points = 1);

// Random subset of exactly m points (without replacement); m >= N returns the cloud.
PointCloud resample(const PointCloud& cloud, int m, RngStream& rng);

PointCloud subset(const PointCloud& cloud, const std::vector<int>& indices);

// Center on the centroid and scale so the farthest point sits at norm 1.
PointCloud normalize(const PointCloud& cloud);

CropSet make_crop_set(const PointCloud& cloud, const CropConfig& config, RngStream& rng);

}  // namespace dcglr::geom
