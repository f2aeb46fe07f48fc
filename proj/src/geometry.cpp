#include "dcglr/geometry.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "dcglr/error.hpp"

namespace dcglr::geom {

double squared_distance(const std::array<double, 3>& a, const std::array<double, 3>& b) {
    const double dx = a[0] - b[0], dy = a[1] - b[1], dz = a[2] - b[2];
    return dx * dx + dy * dy + dz * dz;
}

std::vector<int> fps_from(const PointCloud& cloud, int m, int start) {
    const int n = cloud.size();
    if (m < 1 || m > n) throw ParameterError("fps: sample count out of range");
    std::vector<int> selected;
    selected.reserve(m);
    selected.push_back(start);
    std::vector<double> dist(n);
    for (int i = 0; i < n; ++i)
        dist[i] = squared_distance(cloud.points[i], cloud.points[start]);
    while (static_cast<int>(selected.size()) < m) {
        int best = 0;
        for (int i = 1; i < n; ++i)
            if (dist[i] > dist[best]) best = i;  // ties keep the lower index
        selected.push_back(best);
        for (int i = 0; i < n; ++i)
            dist[i] = std::min(dist[i], squared_distance(cloud.points[i], cloud.points[best]));
    }
    return selected;
}

std::vector<int> fps(const PointCloud& cloud, int m, RngStream& rng) {
    if (cloud.size() < 1) throw ParameterError("fps: empty cloud");
    const int start = static_cast<int>(rng.uniform_int(cloud.size()));
    return fps_from(cloud, m, start);
}

std::vector<int> knn(const PointCloud& cloud, const std::array<double, 3>& center, int k) {
    const int n = cloud.size();
    if (k < 1 || k > n) throw ParameterError("knn: k out of range");
    std::vector<std::pair<double, int>> d(n);
    for (int i = 0; i < n; ++i) d[i] = {squared_distance(cloud.points[i], center), i};
    std::partial_sort(d.begin(), d.begin() + k, d.end());  // pair order breaks ties by index
    std::vector<int> out(k);
    for (int i = 0; i < k; ++i) out[i] = d[i].second;
    return out;
}

PointCloud subset(const PointCloud& cloud, const std::vector<int>& indices) {
    PointCloud out;
    out.label = cloud.label;
    out.points.reserve(indices.size());
    for (int i : indices) out.points.push_back(cloud.points[i]);
    return out;
}

PointCloud crop_at(const PointCloud& cloud, double ratio, int anchor, int min_points) {
    if (!(ratio > 0.0 && ratio <= 1.0)) throw ParameterError("crop: ratio must be in (0,1]");
    const int n = cloud.size();
    const int m = static_cast<int>(std::lround(ratio * n));
    if (m < min_points)
        throw DataError("crop: degenerate crop of " + std::to_string(m) + " points (need " +
                        std::to_string(min_points) + ")");
    return subset(cloud, knn(cloud, cloud.points[anchor], m));
}

PointCloud crop(const PointCloud& cloud, double ratio, RngStream& rng, int min_points) {
    const int anchor = static_cast<int>(rng.uniform_int(cloud.size()));
    return crop_at(cloud, ratio, anchor, min_points);
}

PointCloud resample(const PointCloud& cloud, int m, RngStream& rng) {
    const int n = cloud.size();
    if (m >= n) return cloud;
    // Partial Fisher-Yates over an index vector.
    std::vector<int> idx(n);
    std::iota(idx.begin(), idx.end(), 0);
    for (int i = 0; i < m; ++i) {
        const int j = i + static_cast<int>(rng.uniform_int(n - i));
        std::swap(idx[i], idx[j]);
    }
    idx.resize(m);
    return subset(cloud, idx);
}

PointCloud normalize(const PointCloud& cloud) {
    if (cloud.size() < 1) throw ParameterError("normalize: empty cloud");
    std::array<double, 3> c{0, 0, 0};
    for (const auto& p : cloud.points)
        for (int d = 0; d < 3; ++d) c[d] += p[d];
    for (int d = 0; d < 3; ++d) c[d] /= cloud.size();
    PointCloud out;
    out.label = cloud.label;
    out.points.resize(cloud.points.size());
    double max_norm2 = 0.0;
    for (size_t i = 0; i < cloud.points.size(); ++i) {
        for (int d = 0; d < 3; ++d) out.points[i][d] = cloud.points[i][d] - c[d];
        max_norm2 = std::max(max_norm2, squared_distance(out.points[i], {0, 0, 0}));
    }
    const double s = max_norm2 > 0.0 ? 1.0 / std::sqrt(max_norm2) : 1.0;
    for (auto& p : out.points)
        for (int d = 0; d < 3; ++d) p[d] *= s;
    return out;
}

CropSet make_crop_set(const PointCloud& cloud, const CropConfig& cfg, RngStream& rng) {
    if (!(cfg.r_l1 > 0.0 && cfg.r_l1 <= cfg.r_l2 && cfg.r_l2 <= cfg.r_g1 &&
          cfg.r_g1 <= cfg.r_g2 && cfg.r_g2 <= 1.0))
        throw ParameterError("make_crop_set: ratios must satisfy 0 < r_l1 <= r_l2 <= r_g1 <= r_g2 <= 1");
    CropSet set;
    for (int i = 0; i < cfg.num_global; ++i) {
        const double r = rng.uniform(cfg.r_g1, cfg.r_g2);
        PointCloud c = crop(cloud, r, rng, cfg.min_crop_points);
        if (cfg.global_resample > 0) c = resample(c, cfg.global_resample, rng);
        set.globals.push_back(std::move(c));
    }
    for (int j = 0; j < cfg.num_local; ++j) {
        const double r = rng.uniform(cfg.r_l1, cfg.r_l2);
        PointCloud c = crop(cloud, r, rng, cfg.min_crop_points);
        if (cfg.local_resample > 0) c = resample(c, cfg.local_resample, rng);
        set.locals.push_back(std::move(c));
    }
    // Half-resolution FPS copies of the whole cloud join the local set.
    for (int r = 0; r < cfg.num_resolution; ++r) {
        const int half = std::max(cfg.min_crop_points, cloud.size() / 2);
        PointCloud c = subset(cloud, fps(cloud, std::min(half, cloud.size()), rng));
        if (cfg.local_resample > 0) c = resample(c, cfg.local_resample, rng);
        set.locals.push_back(std::move(c));
    }
    return set;
}

}  // namespace dcglr::geom
