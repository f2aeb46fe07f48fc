#pragma once

#include <string>
#include <vector>

#include "dcglr/backbone.hpp"
#include "dcglr/data.hpp"

namespace dcglr::eval {

struct FeatureMatrix {
    Tensor rows;              // M x D
    std::vector<int> labels;  // length M
};

struct SpectrumReport {
    std::vector<double> eigenvalues;        // descending, nonnegative (clipped at 0)
    std::vector<double> normalized;         // divided by the largest
    std::vector<double> log10_normalized;   // log10 of normalized, clamped
    int effective_rank = 0;                 // normalized > threshold
    double threshold = 1e-3;
    bool max_is_zero = false;
};

// Symmetric eigen-decomposition by cyclic Jacobi rotations; off-diagonal
// Frobenius norm driven below 1e-10. Eigenvalues descending; eigenvectors
// are the matching columns.
void jacobi_eigen(const Tensor& symmetric, std::vector<double>& eigenvalues,
                  Tensor& eigenvectors);

// Teacher-backbone class-token feature per cloud (full cloud, no crops).
FeatureMatrix extract_features(const data::Dataset& dataset, const nn::ModelParams& params,
                               uint64_t seed, int threads = 1);

// Multinomial logistic regression, L2 penalty, full-batch gradient descent.
double linear_probe(const FeatureMatrix& features, const std::vector<bool>& train_split,
                    double reg, int epochs, uint64_t seed);

SpectrumReport spectrum(const Tensor& features, double threshold = 1e-3);

// Projection of mean-centered rows onto the top covariance eigenvectors.
Tensor pca_project(const Tensor& features, int dims = 2);

void write_projection_csv(const std::string& path, const Tensor& coords,
                          const std::vector<int>& labels);
void write_spectrum_csv(const std::string& path, const SpectrumReport& report);

// Class-token attention row per head at one layer, class-to-class entry
// dropped and the remainder renormalized to sum 1 over patches.
std::vector<std::vector<double>> class_attention_weights(const nn::PlainForward& fwd,
                                                         int layer);

// Per-head class-token attention painted onto member points, one ASCII PLY
// per head. Returns the written file paths.
std::vector<std::string> export_attention(const geom::PointCloud& cloud,
                                          const nn::ModelParams& params, int layer,
                                          const std::string& out_prefix, uint64_t seed);

// Minimal reader used by round-trip tests and the acceptance suite.
struct PlyCloud {
    std::vector<std::array<double, 3>> points;
    std::vector<std::array<int, 3>> colors;
};
PlyCloud read_ply(const std::string& path);

}  // namespace dcglr::eval
