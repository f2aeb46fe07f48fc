#pragma once

#include <iosfwd>
#include <map>
#include <string>
#include <vector>

#include "dcglr/autodiff.hpp"
#include "dcglr/geometry.hpp"
#include "dcglr/rng.hpp"

namespace dcglr::nn {

struct BackboneConfig {
    int k_patch = 32;     // points per patch
    int dim = 128;        // D, embedding width
    int layers = 4;       // L, encoder depth
    int heads = 8;
    int mlp_hidden = 256;   // transformer feed-forward width
    int proj_hidden = 512;  // projector MLP width
    int proj_out = 128;     // K, loss dimension
    bool append_centroid = true;  // 6 input channels per point instead of 3

    void validate() const;
    int point_channels() const { return append_centroid ? 6 : 3; }
};

// Every learnable array of one network instance, keyed by a stable name.
// Teacher and student are two instances with identical key sets and shapes.
struct ModelParams {
    BackboneConfig config;
    std::map<std::string, Tensor> arrays;
};

ModelParams init_params(const BackboneConfig& config, RngStream& rng);

// Checkpoint container: magic + version + config header, then named arrays
// (u32 name length, name bytes, u32 rank, u32 dims, f64 little-endian data)
// until EOF. Round-trips bit-exactly.
void save_params(std::ostream& out, const ModelParams& params);
ModelParams load_params(std::istream& in);
void save_params_file(const std::string& path, const ModelParams& params);
ModelParams load_params_file(const std::string& path);

struct Patches {
    // Per patch: k_patch x channels input matrix (re-centered xyz, optionally
    // followed by the patch centroid xyz).
    std::vector<Tensor> inputs;
    std::vector<std::array<double, 3>> centroids;
    std::vector<std::vector<int>> member_indices;  // into the source cloud

    int count() const { return static_cast<int>(inputs.size()); }
};

// FPS centroids (S = N / k_patch), k nearest neighbors per centroid.
Patches patchify(const geom::PointCloud& cloud, const BackboneConfig& config, RngStream& rng);

// Vars for one bound parameter set on a tape.
using ParamVars = std::map<std::string, ad::Var>;
ParamVars bind_params(ad::Tape& tape, const ModelParams& params);

// Building blocks of the forward pass.
ad::Var embed_patches(ad::Tape& tape, const Patches& patches, const ParamVars& p,
                      const BackboneConfig& config);

struct EncodeResult {
    ad::Var class_feature;  // 1 x D
    ad::Var token_mean;     // D, mean of the final patch tokens
    // attention[layer][head] is an (S+1) x (S+1) probability matrix.
    std::vector<std::vector<ad::Var>> attention;
};
EncodeResult encode(ad::Tape& tape, ad::Var tokens, const ParamVars& p,
                    const BackboneConfig& config);

ad::Var project(ad::Tape& tape, ad::Var feature, const ParamVars& p);

struct ForwardResult {
    ad::Var feature;     // 1 x D class token before the projector
    ad::Var token_mean;  // D, mean of the final patch tokens
    ad::Var logits;   // 1 x K
    std::vector<std::vector<ad::Var>> attention;
    int patch_count = 0;
    std::vector<std::vector<int>> patch_members;
};
ForwardResult forward(ad::Tape& tape, const geom::PointCloud& cloud, const ParamVars& p,
                      const BackboneConfig& config, RngStream& rng);

// Tape-free convenience: forward on a throwaway tape, values only.
struct PlainForward {
    Tensor feature;     // D
    Tensor token_mean;  // D
    Tensor logits;      // K
    std::vector<std::vector<Tensor>> attention;
    std::vector<std::vector<int>> patch_members;
};
PlainForward forward_plain(const geom::PointCloud& cloud, const ModelParams& params,
                           RngStream& rng);

}  // namespace dcglr::nn
