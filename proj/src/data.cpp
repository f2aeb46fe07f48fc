#include "dcglr/data.hpp"

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <cstring>
#include <fstream>
#include <map>
#include <numeric>
#include <sstream>

#include <nlohmann/json.hpp>

#include "dcglr/error.hpp"

namespace dcglr::data {

namespace {

constexpr double kPi = 3.141592653589793;

using Vec3 = std::array<double, 3>;

Vec3 sample_primitive(const std::string& cls, RngStream& rng) {
    const double u = rng.uniform();
    const double v = rng.uniform();
    if (cls == "sphere") {
        const double z = 2.0 * u - 1.0;
        const double phi = 2.0 * kPi * v;
        const double r = std::sqrt(std::max(0.0, 1.0 - z * z));
        return {r * std::cos(phi), r * std::sin(phi), z};
    }
    if (cls == "cube") {
        const int face = static_cast<int>(rng.uniform_int(6));
        const double a = 2.0 * u - 1.0, b = 2.0 * v - 1.0;
        switch (face) {
            case 0: return {1.0, a, b};
            case 1: return {-1.0, a, b};
            case 2: return {a, 1.0, b};
            case 3: return {a, -1.0, b};
            case 4: return {a, b, 1.0};
            default: return {a, b, -1.0};
        }
    }
    if (cls == "cylinder") {
        // Lateral surface plus caps, weighted by area (r = 1, h = 2).
        const double lateral = 2.0 * kPi * 2.0;
        const double caps = 2.0 * kPi;
        if (rng.uniform() * (lateral + caps) < lateral) {
            const double phi = 2.0 * kPi * u;
            return {std::cos(phi), std::sin(phi), 2.0 * v - 1.0};
        }
        const double r = std::sqrt(u);
        const double phi = 2.0 * kPi * v;
        const double z = rng.uniform() < 0.5 ? 1.0 : -1.0;
        return {r * std::cos(phi), r * std::sin(phi), z};
    }
    if (cls == "cone") {
        // Side surface of a unit cone (apex at z = 1, base radius 1 at z = -1)
        // plus its base disc.
        const double side = kPi * std::sqrt(5.0);
        const double base = kPi;
        if (rng.uniform() * (side + base) < side) {
            const double r = std::sqrt(u);  // uniform over the unrolled side
            const double phi = 2.0 * kPi * v;
            return {r * std::cos(phi), r * std::sin(phi), 1.0 - 2.0 * r};
        }
        const double r = std::sqrt(u);
        const double phi = 2.0 * kPi * v;
        return {r * std::cos(phi), r * std::sin(phi), -1.0};
    }
    if (cls == "torus") {
        // Major radius 1, minor 0.35; rejection-free approximation via
        // angle-weighted resampling of the minor angle.
        const double major = 1.0, minor = 0.35;
        const double phi = 2.0 * kPi * u;
        // Importance-correct the minor angle with rejection.
        double theta;
        while (true) {
            theta = 2.0 * kPi * rng.uniform();
            const double w = (major + minor * std::cos(theta)) / (major + minor);
            if (rng.uniform() < w) break;
        }
        const double rr = major + minor * std::cos(theta);
        return {rr * std::cos(phi), rr * std::sin(phi), minor * std::sin(theta)};
    }
    if (cls == "plane") {
        return {2.0 * u - 1.0, 2.0 * v - 1.0, 0.0};
    }
    throw ParameterError("unknown synthetic class: " + cls);
}

std::array<std::array<double, 3>, 3> random_rotation(RngStream& rng) {
    // Random rotation from three Euler-style angles; uniformity is not
    // required, only variety.
    const double a = 2.0 * kPi * rng.uniform();
    const double b = 2.0 * kPi * rng.uniform();
    const double c = 2.0 * kPi * rng.uniform();
    const double ca = std::cos(a), sa = std::sin(a);
    const double cb = std::cos(b), sb = std::sin(b);
    const double cc = std::cos(c), sc = std::sin(c);
    return {{{cb * cc, -cb * sc, sb},
             {sa * sb * cc + ca * sc, -sa * sb * sc + ca * cc, -sa * cb},
             {-ca * sb * cc + sa * sc, ca * sb * sc + sa * cc, ca * cb}}};
}

}  // namespace

geom::PointCloud synth_cloud(const std::string& cls, int n_points, double noise_sigma,
                             RngStream& rng) {
    if (n_points < 1) throw ParameterError("synth_cloud: n_points must be positive");
    const auto rot = random_rotation(rng);
    const Vec3 scale = {rng.uniform(0.5, 1.5), rng.uniform(0.5, 1.5), rng.uniform(0.5, 1.5)};
    geom::PointCloud cloud;
    cloud.points.reserve(n_points);
    for (int i = 0; i < n_points; ++i) {
        Vec3 p = sample_primitive(cls, rng);
        for (int d = 0; d < 3; ++d) p[d] *= scale[d];
        Vec3 q;
        for (int r = 0; r < 3; ++r)
            q[r] = rot[r][0] * p[0] + rot[r][1] * p[1] + rot[r][2] * p[2];
        if (noise_sigma > 0.0)
            for (int d = 0; d < 3; ++d) q[d] += noise_sigma * rng.gaussian();
        cloud.points.push_back(q);
    }
    return geom::normalize(cloud);
}

Dataset synth_dataset(const std::vector<std::string>& classes, int per_class, int n_points,
                      double noise_sigma, uint64_t seed) {
    if (classes.empty()) throw ParameterError("synth_dataset: no classes given");
    Dataset ds;
    ds.class_names = classes;
    RngStream base(seed);
    for (size_t c = 0; c < classes.size(); ++c) {
        for (int i = 0; i < per_class; ++i) {
            RngStream rng = base.fork(c * 1000003u + static_cast<uint64_t>(i));
            geom::PointCloud cloud = synth_cloud(classes[c], n_points, noise_sigma, rng);
            cloud.label = static_cast<int>(c);
            ds.clouds.push_back(std::move(cloud));
        }
    }
    ds.train_split.assign(ds.clouds.size(), true);
    return ds;
}

void assign_split(Dataset& ds, double test_fraction, uint64_t seed) {
    ds.train_split.assign(ds.clouds.size(), true);
    // Round-robin per class with a seeded offset: deterministic and balanced.
    std::map<int, std::vector<size_t>> by_class;
    for (size_t i = 0; i < ds.clouds.size(); ++i)
        by_class[ds.clouds[i].label.value_or(0)].push_back(i);
    RngStream rng(seed);
    for (auto& [cls, idx] : by_class) {
        for (int i = static_cast<int>(idx.size()) - 1; i > 0; --i)
            std::swap(idx[i], idx[rng.uniform_int(i + 1)]);
        const size_t n_test = static_cast<size_t>(std::lround(test_fraction * idx.size()));
        for (size_t i = 0; i < n_test && i < idx.size(); ++i) ds.train_split[idx[i]] = false;
    }
}

// ---------------------------------------------------------------------------
// OFF
// ---------------------------------------------------------------------------

OffMesh parse_off(const std::string& text) {
    std::istringstream in(text);
    std::string line;
    int line_no = 0;
    auto next_content_line = [&](std::string& out) -> bool {
        while (std::getline(in, line)) {
            ++line_no;
            const size_t h = line.find('#');
            if (h != std::string::npos) line = line.substr(0, h);
            size_t a = line.find_first_not_of(" \t\r\n");
            if (a == std::string::npos) continue;
            out = line.substr(a);
            return true;
        }
        return false;
    };

    std::string header;
    if (!next_content_line(header)) throw ParseError("empty OFF input", line_no);
    if (header.rfind("OFF", 0) != 0) throw ParseError("missing OFF header", line_no);
    std::string counts = header.substr(3);
    // The common ModelNet quirk: counts fused onto the header line ("OFF490 518 0").
    if (counts.find_first_not_of(" \t\r") == std::string::npos) {
        if (!next_content_line(counts)) throw ParseError("missing counts line", line_no);
    }
    long long nv = 0, nf = 0, ne = 0;
    {
        std::istringstream cs(counts);
        if (!(cs >> nv >> nf)) throw ParseError("malformed counts line", line_no);
        cs >> ne;  // edge count present but unused
        if (nv < 0 || nf < 0) throw ParseError("negative counts", line_no);
    }

    OffMesh mesh;
    mesh.vertices.reserve(static_cast<size_t>(nv));
    // Token-at-a-time from here on, refilled one content line at a time so
    // comments stay skippable anywhere in the body.
    std::istringstream tokens;
    auto next_token = [&](std::string& t) -> bool {
        while (!(tokens >> t)) {
            std::string l;
            if (!next_content_line(l)) return false;
            tokens.clear();
            tokens.str(l);
        }
        return true;
    };
    auto read_double = [&](const char* what) -> double {
        std::string t;
        if (!next_token(t)) throw ParseError(std::string("truncated ") + what, line_no);
        char* end = nullptr;
        const double v = std::strtod(t.c_str(), &end);
        if (end != t.c_str() + t.size())
            throw ParseError(std::string("malformed number in ") + what + ": '" + t + "'", line_no);
        return v;
    };
    auto read_int = [&](const char* what) -> long long {
        std::string t;
        if (!next_token(t)) throw ParseError(std::string("truncated ") + what, line_no);
        char* end = nullptr;
        const long long v = std::strtoll(t.c_str(), &end, 10);
        if (end != t.c_str() + t.size())
            throw ParseError(std::string("malformed integer in ") + what + ": '" + t + "'", line_no);
        return v;
    };
    for (long long i = 0; i < nv; ++i) {
        std::array<double, 3> v;
        for (int d = 0; d < 3; ++d) v[d] = read_double("vertex list");
        mesh.vertices.push_back(v);
    }
    for (long long f = 0; f < nf; ++f) {
        const long long k = read_int("face list");
        if (k < 3) throw ParseError("face with fewer than 3 vertices", line_no);
        std::vector<long long> poly(static_cast<size_t>(k));
        for (long long d = 0; d < k; ++d) {
            poly[d] = read_int("face entry");
            if (poly[d] < 0 || poly[d] >= nv) throw ParseError("face index out of range", line_no);
        }
        // Fan triangulation of polygons.
        for (long long d = 1; d + 1 < k; ++d)
            mesh.faces.push_back({static_cast<int>(poly[0]), static_cast<int>(poly[d]),
                                  static_cast<int>(poly[d + 1])});
    }
    return mesh;
}

std::string serialize_off(const OffMesh& mesh) {
    std::ostringstream out;
    out << "OFF\n" << mesh.vertices.size() << " " << mesh.faces.size() << " 0\n";
    out.precision(17);
    for (const auto& v : mesh.vertices) out << v[0] << " " << v[1] << " " << v[2] << "\n";
    for (const auto& f : mesh.faces) out << "3 " << f[0] << " " << f[1] << " " << f[2] << "\n";
    return out.str();
}

geom::PointCloud sample_mesh(const OffMesh& mesh, int n_points, RngStream& rng) {
    if (mesh.faces.empty()) throw DataError("sample_mesh: mesh has no faces");
    if (n_points < 1) throw ParameterError("sample_mesh: n_points must be positive");
    std::vector<double> cum(mesh.faces.size());
    double total = 0.0;
    for (size_t f = 0; f < mesh.faces.size(); ++f) {
        const auto& a = mesh.vertices[mesh.faces[f][0]];
        const auto& b = mesh.vertices[mesh.faces[f][1]];
        const auto& c = mesh.vertices[mesh.faces[f][2]];
        const double ux = b[0] - a[0], uy = b[1] - a[1], uz = b[2] - a[2];
        const double vx = c[0] - a[0], vy = c[1] - a[1], vz = c[2] - a[2];
        const double cx = uy * vz - uz * vy, cy = uz * vx - ux * vz, cz = ux * vy - uy * vx;
        total += 0.5 * std::sqrt(cx * cx + cy * cy + cz * cz);
        cum[f] = total;
    }
    if (!(total > 0.0)) throw DataError("sample_mesh: total surface area is zero");
    geom::PointCloud cloud;
    cloud.points.reserve(n_points);
    for (int i = 0; i < n_points; ++i) {
        const double r = rng.uniform() * total;
        const size_t f = std::lower_bound(cum.begin(), cum.end(), r) - cum.begin();
        const auto& face = mesh.faces[std::min(f, mesh.faces.size() - 1)];
        const auto& a = mesh.vertices[face[0]];
        const auto& b = mesh.vertices[face[1]];
        const auto& c = mesh.vertices[face[2]];
        double s = rng.uniform(), t = rng.uniform();
        if (s + t > 1.0) {
            s = 1.0 - s;
            t = 1.0 - t;
        }
        cloud.points.push_back({a[0] + s * (b[0] - a[0]) + t * (c[0] - a[0]),
                                a[1] + s * (b[1] - a[1]) + t * (c[1] - a[1]),
                                a[2] + s * (b[2] - a[2]) + t * (c[2] - a[2])});
    }
    return cloud;
}

// ---------------------------------------------------------------------------
// PCB1 container + manifest
// ---------------------------------------------------------------------------

namespace {

void write_u32(std::ostream& out, uint32_t v) {
    unsigned char b[4] = {static_cast<unsigned char>(v), static_cast<unsigned char>(v >> 8),
                          static_cast<unsigned char>(v >> 16),
                          static_cast<unsigned char>(v >> 24)};
    out.write(reinterpret_cast<const char*>(b), 4);
}

uint32_t read_u32(std::istream& in) {
    unsigned char b[4];
    in.read(reinterpret_cast<char*>(b), 4);
    if (!in) throw DataError("pcb: truncated field");
    return static_cast<uint32_t>(b[0]) | (static_cast<uint32_t>(b[1]) << 8) |
           (static_cast<uint32_t>(b[2]) << 16) | (static_cast<uint32_t>(b[3]) << 24);
}

}  // namespace

void write_pcb(const std::string& path, const Dataset& ds) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw DataError("cannot open for writing: " + path);
    out.write("PCB1", 4);
    write_u32(out, static_cast<uint32_t>(ds.clouds.size()));
    for (const auto& cloud : ds.clouds) {
        write_u32(out, static_cast<uint32_t>(cloud.label.value_or(-1)));
        write_u32(out, static_cast<uint32_t>(cloud.points.size()));
        for (const auto& p : cloud.points)
            out.write(reinterpret_cast<const char*>(p.data()), 24);
    }
}

Dataset read_pcb(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DataError("cannot open: " + path);
    char magic[4];
    in.read(magic, 4);
    if (!in || std::memcmp(magic, "PCB1", 4) != 0) throw DataError("pcb: bad magic");
    Dataset ds;
    const uint32_t count = read_u32(in);
    ds.clouds.reserve(count);
    for (uint32_t i = 0; i < count; ++i) {
        geom::PointCloud cloud;
        const int32_t label = static_cast<int32_t>(read_u32(in));
        if (label >= 0) cloud.label = label;
        const uint32_t n = read_u32(in);
        cloud.points.resize(n);
        in.read(reinterpret_cast<char*>(cloud.points.data()),
                static_cast<std::streamsize>(n) * 24);
        if (!in) throw DataError("pcb: truncated cloud " + std::to_string(i));
        ds.clouds.push_back(std::move(cloud));
    }
    ds.train_split.assign(ds.clouds.size(), true);
    return ds;
}

void write_manifest(const std::string& path, const Dataset& ds, uint64_t seed) {
    nlohmann::json j;
    j["class_names"] = ds.class_names;
    j["seed"] = seed;
    std::vector<int> labels;
    std::vector<std::string> split;
    for (size_t i = 0; i < ds.clouds.size(); ++i) {
        labels.push_back(ds.clouds[i].label.value_or(-1));
        split.push_back(ds.train_split[i] ? "train" : "test");
    }
    j["labels"] = labels;
    j["split"] = split;
    std::ofstream out(path);
    if (!out) throw DataError("cannot open for writing: " + path);
    out << j.dump(2) << "\n";
}

void apply_manifest(const std::string& path, Dataset& ds) {
    std::ifstream in(path);
    if (!in) throw DataError("cannot open: " + path);
    nlohmann::json j;
    try {
        in >> j;
    } catch (const nlohmann::json::exception& e) {
        throw DataError(std::string("manifest: ") + e.what());
    }
    ds.class_names = j.value("class_names", std::vector<std::string>{});
    const auto split = j.value("split", std::vector<std::string>{});
    if (split.size() != ds.clouds.size())
        throw DataError("manifest: split length does not match cloud count");
    ds.train_split.resize(split.size());
    for (size_t i = 0; i < split.size(); ++i) ds.train_split[i] = split[i] == "train";
}

}  // namespace dcglr::data
