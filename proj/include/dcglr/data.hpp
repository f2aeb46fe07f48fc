#pragma once

#include <array>
#include <string>
#include <vector>

#include "dcglr/geometry.hpp"
#include "dcglr/rng.hpp"

namespace dcglr::data {

struct Dataset {
    std::vector<geom::PointCloud> clouds;
    std::vector<std::string> class_names;
    // Parallel to clouds: true = training split.
    std::vector<bool> train_split;
};

struct OffMesh {
    std::vector<std::array<double, 3>> vertices;
    std::vector<std::array<int, 3>> faces;  // triangles (polygons fanned)
};

inline const std::vector<std::string> kSynthClasses = {"sphere", "cube",  "cylinder",
                                                       "cone",   "torus", "plane"};

// Procedural surface samples with random rotation, anisotropic scale in
// [0.5, 1.5] and Gaussian jitter; each cloud normalized.
Dataset synth_dataset(const std::vector<std::string>& classes, int per_class, int n_points,
                      double noise_sigma, uint64_t seed);

geom::PointCloud synth_cloud(const std::string& cls, int n_points, double noise_sigma,
                             RngStream& rng);

// OFF text, including the header token fused with the counts line.
OffMesh parse_off(const std::string& text);
std::string serialize_off(const OffMesh& mesh);

// Area-weighted triangle pick, uniform barycentric point.
geom::PointCloud sample_mesh(const OffMesh& mesh, int n_points, RngStream& rng);

// PCB1 container: magic "PCB1", u32 cloud count, per cloud (i32 label,
// u32 N, N x 3 f64 little-endian). Bit-exact round-trip.
void write_pcb(const std::string& path, const Dataset& dataset);
Dataset read_pcb(const std::string& path);

// JSON manifest next to the container: class names, labels, split.
void write_manifest(const std::string& path, const Dataset& dataset, uint64_t seed);
void apply_manifest(const std::string& path, Dataset& dataset);

// Deterministic train/test assignment (test_fraction of each class).
void assign_split(Dataset& dataset, double test_fraction, uint64_t seed);

}  // namespace dcglr::data
