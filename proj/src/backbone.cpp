#include "dcglr/backbone.hpp"

#include <cmath>
#include <cstring>
#include <fstream>
#include <sstream>

#include "dcglr/error.hpp"

namespace dcglr::nn {

void BackboneConfig::validate() const {
    if (k_patch < 1 || dim < 1 || layers < 1 || heads < 1 || mlp_hidden < 1 ||
        proj_hidden < 1 || proj_out < 1)
        throw ParameterError("backbone config: all sizes must be positive");
    if (dim % heads != 0)
        throw ParameterError("backbone config: dim must be divisible by heads");
}

namespace {

Tensor random_matrix(int rows, int cols, RngStream& rng) {
    Tensor w({rows, cols});
    const double scale = 1.0 / std::sqrt(static_cast<double>(rows));
    for (long long i = 0; i < w.numel(); ++i) w[i] = scale * rng.gaussian();
    return w;
}

void add_linear(ModelParams& p, const std::string& name, int in, int out, RngStream& rng) {
    p.arrays[name + ".w"] = random_matrix(in, out, rng);
    p.arrays[name + ".b"] = Tensor::zeros({out});
}

void add_layer_norm(ModelParams& p, const std::string& name, int n) {
    p.arrays[name + ".g"] = Tensor::full({n}, 1.0);
    p.arrays[name + ".b"] = Tensor::zeros({n});
}

ad::Var linear(ad::Tape& t, ad::Var x, const ParamVars& p, const std::string& name) {
    return ad::add_rowvec(t, ad::matmul(t, x, p.at(name + ".w")), p.at(name + ".b"));
}

ad::Var norm(ad::Tape& t, ad::Var x, const ParamVars& p, const std::string& name) {
    return ad::layer_norm(t, x, p.at(name + ".g"), p.at(name + ".b"));
}

}  // namespace

ModelParams init_params(const BackboneConfig& cfg, RngStream& rng) {
    cfg.validate();
    ModelParams p;
    p.config = cfg;
    add_linear(p, "embed.l1", cfg.point_channels(), cfg.dim, rng);
    add_linear(p, "embed.l2", cfg.dim, cfg.dim, rng);
    {
        Tensor cls({1, cfg.dim});
        for (long long i = 0; i < cls.numel(); ++i) cls[i] = 0.02 * rng.gaussian();
        p.arrays["cls"] = std::move(cls);
    }
    for (int l = 0; l < cfg.layers; ++l) {
        const std::string base = "layer" + std::to_string(l);
        add_layer_norm(p, base + ".ln1", cfg.dim);
        add_linear(p, base + ".attn.q", cfg.dim, cfg.dim, rng);
        add_linear(p, base + ".attn.k", cfg.dim, cfg.dim, rng);
        add_linear(p, base + ".attn.v", cfg.dim, cfg.dim, rng);
        add_linear(p, base + ".attn.o", cfg.dim, cfg.dim, rng);
        add_layer_norm(p, base + ".ln2", cfg.dim);
        add_linear(p, base + ".ffn.l1", cfg.dim, cfg.mlp_hidden, rng);
        add_linear(p, base + ".ffn.l2", cfg.mlp_hidden, cfg.dim, rng);
    }
    add_layer_norm(p, "final_ln", cfg.dim);
    add_linear(p, "proj.l1", cfg.dim, cfg.proj_hidden, rng);
    add_linear(p, "proj.l2", cfg.proj_hidden, cfg.proj_hidden, rng);
    add_linear(p, "proj.l3", cfg.proj_hidden, cfg.proj_out, rng);
    return p;
}

// ---------------------------------------------------------------------------
// Checkpoint IO
// ---------------------------------------------------------------------------

namespace {

constexpr char kMagic[4] = {'D', 'C', 'K', 'P'};
constexpr uint32_t kVersion = 1;

void write_u32(std::ostream& out, uint32_t v) {
    unsigned char b[4] = {static_cast<unsigned char>(v), static_cast<unsigned char>(v >> 8),
                          static_cast<unsigned char>(v >> 16),
                          static_cast<unsigned char>(v >> 24)};
    out.write(reinterpret_cast<const char*>(b), 4);
}

uint32_t read_u32(std::istream& in) {
    unsigned char b[4];
    in.read(reinterpret_cast<char*>(b), 4);
    if (!in) throw DataError("checkpoint: truncated header field");
    return static_cast<uint32_t>(b[0]) | (static_cast<uint32_t>(b[1]) << 8) |
           (static_cast<uint32_t>(b[2]) << 16) | (static_cast<uint32_t>(b[3]) << 24);
}

void write_f64(std::ostream& out, const double* data, size_t n) {
    // Host is little-endian on every supported target.
    static_assert(sizeof(double) == 8);
    out.write(reinterpret_cast<const char*>(data), static_cast<std::streamsize>(n * 8));
}

}  // namespace

void save_params(std::ostream& out, const ModelParams& p) {
    out.write(kMagic, 4);
    write_u32(out, kVersion);
    const BackboneConfig& c = p.config;
    write_u32(out, static_cast<uint32_t>(c.k_patch));
    write_u32(out, static_cast<uint32_t>(c.dim));
    write_u32(out, static_cast<uint32_t>(c.layers));
    write_u32(out, static_cast<uint32_t>(c.heads));
    write_u32(out, static_cast<uint32_t>(c.mlp_hidden));
    write_u32(out, static_cast<uint32_t>(c.proj_hidden));
    write_u32(out, static_cast<uint32_t>(c.proj_out));
    write_u32(out, c.append_centroid ? 1 : 0);
    for (const auto& [name, tensor] : p.arrays) {
        write_u32(out, static_cast<uint32_t>(name.size()));
        out.write(name.data(), static_cast<std::streamsize>(name.size()));
        write_u32(out, static_cast<uint32_t>(tensor.shape().size()));
        for (int d : tensor.shape()) write_u32(out, static_cast<uint32_t>(d));
        write_f64(out, tensor.data(), static_cast<size_t>(tensor.numel()));
    }
}

ModelParams load_params(std::istream& in) {
    char magic[4];
    in.read(magic, 4);
    if (!in || std::memcmp(magic, kMagic, 4) != 0)
        throw DataError("checkpoint: bad magic");
    const uint32_t version = read_u32(in);
    if (version != kVersion)
        throw DataError("checkpoint: unsupported version " + std::to_string(version));
    ModelParams p;
    p.config.k_patch = static_cast<int>(read_u32(in));
    p.config.dim = static_cast<int>(read_u32(in));
    p.config.layers = static_cast<int>(read_u32(in));
    p.config.heads = static_cast<int>(read_u32(in));
    p.config.mlp_hidden = static_cast<int>(read_u32(in));
    p.config.proj_hidden = static_cast<int>(read_u32(in));
    p.config.proj_out = static_cast<int>(read_u32(in));
    p.config.append_centroid = read_u32(in) != 0;
    while (true) {
        uint32_t name_len;
        {
            unsigned char b[4];
            in.read(reinterpret_cast<char*>(b), 4);
            if (in.eof()) break;
            if (!in) throw DataError("checkpoint: truncated array header");
            name_len = static_cast<uint32_t>(b[0]) | (static_cast<uint32_t>(b[1]) << 8) |
                       (static_cast<uint32_t>(b[2]) << 16) | (static_cast<uint32_t>(b[3]) << 24);
        }
        std::string name(name_len, '\0');
        in.read(name.data(), name_len);
        const uint32_t rank = read_u32(in);
        std::vector<int> shape(rank);
        long long numel = 1;
        for (uint32_t i = 0; i < rank; ++i) {
            shape[i] = static_cast<int>(read_u32(in));
            numel *= shape[i];
        }
        std::vector<double> data(static_cast<size_t>(numel));
        in.read(reinterpret_cast<char*>(data.data()), numel * 8);
        if (!in) throw DataError("checkpoint: truncated array '" + name + "'");
        p.arrays[name] = Tensor(shape, std::move(data));
    }
    return p;
}

void save_params_file(const std::string& path, const ModelParams& params) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw DataError("cannot open for writing: " + path);
    save_params(out, params);
}

ModelParams load_params_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DataError("cannot open: " + path);
    return load_params(in);
}

// ---------------------------------------------------------------------------
// Forward pieces
// ---------------------------------------------------------------------------

Patches patchify(const geom::PointCloud& cloud, const BackboneConfig& cfg, RngStream& rng) {
    const int n = cloud.size();
    if (n < cfg.k_patch)
        throw DataError("patchify: cloud of " + std::to_string(n) + " points is smaller than a patch");
    const int s = n / cfg.k_patch;
    const std::vector<int> centroid_idx = geom::fps(cloud, s, rng);
    Patches out;
    out.inputs.reserve(s);
    const int ch = cfg.point_channels();
    for (int i = 0; i < s; ++i) {
        const auto& c = cloud.points[centroid_idx[i]];
        const std::vector<int> members = geom::knn(cloud, c, cfg.k_patch);
        Tensor x({cfg.k_patch, ch});
        for (int r = 0; r < cfg.k_patch; ++r) {
            const auto& pt = cloud.points[members[r]];
            for (int d = 0; d < 3; ++d) x.at(r, d) = pt[d] - c[d];
            if (cfg.append_centroid)
                for (int d = 0; d < 3; ++d) x.at(r, 3 + d) = c[d];
        }
        out.inputs.push_back(std::move(x));
        out.centroids.push_back(c);
        out.member_indices.push_back(members);
    }
    return out;
}

ParamVars bind_params(ad::Tape& tape, const ModelParams& params) {
    ParamVars vars;
    for (const auto& [name, tensor] : params.arrays) vars[name] = tape.leaf(tensor);
    return vars;
}

ad::Var embed_patches(ad::Tape& t, const Patches& patches, const ParamVars& p,
                      const BackboneConfig& cfg) {
    std::vector<ad::Var> tokens;
    tokens.reserve(patches.inputs.size());
    for (const Tensor& input : patches.inputs) {
        ad::Var x = t.leaf(input);
        x = ad::gelu(t, linear(t, x, p, "embed.l1"));
        x = linear(t, x, p, "embed.l2");
        ad::Var pooled = ad::max_over_axis(t, x);  // D
        tokens.push_back(ad::reshape(t, pooled, {1, cfg.dim}));
    }
    return ad::concat_rows(t, tokens);  // S x D
}

EncodeResult encode(ad::Tape& t, ad::Var tokens, const ParamVars& p,
                    const BackboneConfig& cfg) {
    ad::Var z = ad::concat_rows(t, {p.at("cls"), tokens});  // (S+1) x D
    const int dh = cfg.dim / cfg.heads;
    const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
    EncodeResult result;
    for (int l = 0; l < cfg.layers; ++l) {
        const std::string base = "layer" + std::to_string(l);
        ad::Var h = norm(t, z, p, base + ".ln1");
        ad::Var q = linear(t, h, p, base + ".attn.q");
        ad::Var k = linear(t, h, p, base + ".attn.k");
        ad::Var v = linear(t, h, p, base + ".attn.v");
        std::vector<ad::Var> head_out;
        std::vector<ad::Var> head_attn;
        for (int hd = 0; hd < cfg.heads; ++hd) {
            ad::Var qh = ad::slice_cols(t, q, hd * dh, (hd + 1) * dh);
            ad::Var kh = ad::slice_cols(t, k, hd * dh, (hd + 1) * dh);
            ad::Var vh = ad::slice_cols(t, v, hd * dh, (hd + 1) * dh);
            ad::Var scores =
                ad::scalar_multiply(t, ad::matmul(t, qh, ad::transpose(t, kh)), scale);
            ad::Var attn = ad::softmax(t, scores, 1.0);  // seq x seq
            head_attn.push_back(attn);
            head_out.push_back(ad::matmul(t, attn, vh));
        }
        result.attention.push_back(std::move(head_attn));
        ad::Var merged = linear(t, ad::concat_cols(t, head_out), p, base + ".attn.o");
        z = ad::add(t, z, merged);
        ad::Var f = norm(t, z, p, base + ".ln2");
        f = ad::gelu(t, linear(t, f, p, base + ".ffn.l1"));
        f = linear(t, f, p, base + ".ffn.l2");
        z = ad::add(t, z, f);
    }
    ad::Var zf = norm(t, z, p, "final_ln");
    result.class_feature = ad::slice_rows(t, zf, 0, 1);  // 1 x D
    result.token_mean = ad::mean_over_axis(t, ad::slice_rows(t, zf, 1, t.value(zf).rows()));
    return result;
}

ad::Var project(ad::Tape& t, ad::Var feature, const ParamVars& p) {
    ad::Var x = ad::gelu(t, linear(t, feature, p, "proj.l1"));
    x = ad::gelu(t, linear(t, x, p, "proj.l2"));
    return linear(t, x, p, "proj.l3");
}

ForwardResult forward(ad::Tape& t, const geom::PointCloud& cloud, const ParamVars& p,
                      const BackboneConfig& cfg, RngStream& rng) {
    Patches patches = patchify(cloud, cfg, rng);
    ad::Var tokens = embed_patches(t, patches, p, cfg);
    EncodeResult enc = encode(t, tokens, p, cfg);
    ForwardResult out;
    out.feature = enc.class_feature;
    out.token_mean = enc.token_mean;
    out.logits = project(t, enc.class_feature, p);
    out.attention = std::move(enc.attention);
    out.patch_count = patches.count();
    out.patch_members = std::move(patches.member_indices);
    return out;
}

PlainForward forward_plain(const geom::PointCloud& cloud, const ModelParams& params,
                           RngStream& rng) {
    ad::Tape tape;
    ParamVars vars = bind_params(tape, params);
    ForwardResult r = forward(tape, cloud, vars, params.config, rng);
    PlainForward out;
    out.feature = Tensor({params.config.dim}, tape.value(r.feature).vec());
    out.token_mean = Tensor({params.config.dim}, tape.value(r.token_mean).vec());
    out.logits = Tensor({params.config.proj_out}, tape.value(r.logits).vec());
    out.attention.resize(r.attention.size());
    for (size_t l = 0; l < r.attention.size(); ++l)
        for (ad::Var a : r.attention[l]) out.attention[l].push_back(tape.value(a));
    out.patch_members = std::move(r.patch_members);
    return out;
}

}  // namespace dcglr::nn
