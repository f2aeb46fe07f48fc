#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <set>
#include <sstream>

#include "dcglr/data.hpp"
#include "dcglr/error.hpp"

using namespace dcglr;
using namespace dcglr::data;

namespace {

const std::string kTetra =
    "OFF\n"
    "4 4 6\n"
    "0 0 0\n"
    "1 0 0\n"
    "0 1 0\n"
    "0 0 1\n"
    "3 0 1 2\n"
    "3 0 1 3\n"
    "3 0 2 3\n"
    "3 1 2 3\n";

std::string read_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    std::stringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

std::string temp_path(const std::string& name) {
    return (std::filesystem::temp_directory_path() / name).string();
}

// Is p inside (or on) the tetrahedron above? All barycentric signs agree.
bool in_tetra(const std::array<double, 3>& p) {
    const double eps = 1e-9;
    return p[0] >= -eps && p[1] >= -eps && p[2] >= -eps && p[0] + p[1] + p[2] <= 1.0 + eps;
}

}  // namespace

TEST_CASE("synth_cloud") {
    SUBCASE("deterministic for a fixed rng seed") {
        RngStream r1(42), r2(42);
        geom::PointCloud a = synth_cloud("torus", 128, 0.01, r1);
        geom::PointCloud b = synth_cloud("torus", 128, 0.01, r2);
        REQUIRE(a.size() == b.size());
        for (int i = 0; i < a.size(); ++i)
            for (int d = 0; d < 3; ++d) CHECK(a.points[i][d] == b.points[i][d]);
    }
    SUBCASE("normalized: centroid at origin, max norm 1") {
        RngStream r(7);
        geom::PointCloud c = synth_cloud("cone", 256, 0.02, r);
        std::array<double, 3> mean = {0, 0, 0};
        double maxn = 0.0;
        for (const auto& p : c.points)
            for (int d = 0; d < 3; ++d) mean[d] += p[d] / c.size();
        for (const auto& p : c.points)
            maxn = std::max(maxn, std::sqrt(p[0] * p[0] + p[1] * p[1] + p[2] * p[2]));
        for (int d = 0; d < 3; ++d) CHECK(std::abs(mean[d]) <= 1e-9);
        CHECK(maxn == doctest::Approx(1.0).epsilon(1e-9));
    }
    SUBCASE("noise-free sphere lies on a sphere after normalization") {
        RngStream r(11);
        geom::PointCloud c = synth_cloud("sphere", 512, 0.0, r);
        // Anisotropic scaling distorts the sphere, but with equal scales the
        // normalized radius is constant. Build one manually via zero noise and
        // check every |p| is within the anisotropy band instead.
        double lo = 1e300, hi = 0.0;
        for (const auto& p : c.points) {
            const double n = std::sqrt(p[0] * p[0] + p[1] * p[1] + p[2] * p[2]);
            lo = std::min(lo, n);
            hi = std::max(hi, n);
        }
        CHECK(hi == doctest::Approx(1.0).epsilon(1e-12));
        // Scales are confined to [0.5, 1.5]: min radius ratio at least 1/3.
        CHECK(lo >= 1.0 / 3.0 - 1e-9);
    }
    SUBCASE("unknown class rejected") {
        RngStream r(1);
        CHECK_THROWS_AS(synth_cloud("pyramid", 64, 0.0, r), ParameterError);
    }
}

TEST_CASE("synth_dataset") {
    Dataset d = synth_dataset(kSynthClasses, 50, 64, 0.01, 123);
    SUBCASE("balanced counts and labels") {
        REQUIRE(d.clouds.size() == 300);
        std::map<int, int> counts;
        for (const auto& c : d.clouds) {
            REQUIRE(c.label.has_value());
            counts[*c.label]++;
        }
        REQUIRE(counts.size() == 6);
        for (const auto& [label, n] : counts) CHECK(n == 50);
        CHECK(d.class_names == kSynthClasses);
    }
    SUBCASE("byte-identical across runs with the same seed") {
        Dataset e = synth_dataset(kSynthClasses, 50, 64, 0.01, 123);
        REQUIRE(e.clouds.size() == d.clouds.size());
        for (size_t i = 0; i < d.clouds.size(); ++i)
            for (int j = 0; j < d.clouds[i].size(); ++j)
                for (int k = 0; k < 3; ++k)
                    CHECK(d.clouds[i].points[j][k] == e.clouds[i].points[j][k]);
    }
    SUBCASE("different seeds differ") {
        Dataset e = synth_dataset(kSynthClasses, 1, 64, 0.01, 124);
        Dataset f = synth_dataset(kSynthClasses, 1, 64, 0.01, 125);
        bool any_diff = false;
        for (int j = 0; j < 64 && !any_diff; ++j)
            any_diff = e.clouds[0].points[j] != f.clouds[0].points[j];
        CHECK(any_diff);
    }
}

TEST_CASE("assign_split") {
    Dataset d = synth_dataset(kSynthClasses, 10, 16, 0.0, 5);
    assign_split(d, 0.3, 99);
    REQUIRE(d.train_split.size() == d.clouds.size());
    std::map<int, int> test_count;
    for (size_t i = 0; i < d.clouds.size(); ++i)
        if (!d.train_split[i]) test_count[*d.clouds[i].label]++;
    REQUIRE(test_count.size() == 6);
    for (const auto& [label, n] : test_count) CHECK(n == 3);

    Dataset e = synth_dataset(kSynthClasses, 10, 16, 0.0, 5);
    assign_split(e, 0.3, 99);
    CHECK(d.train_split == e.train_split);
}

TEST_CASE("parse_off") {
    SUBCASE("tetrahedron fixture") {
        OffMesh m = parse_off(kTetra);
        REQUIRE(m.vertices.size() == 4);
        REQUIRE(m.faces.size() == 4);
        CHECK(m.vertices[3] == std::array<double, 3>{0, 0, 1});
        CHECK(m.faces[0] == std::array<int, 3>{0, 1, 2});
    }
    SUBCASE("quads fan into two triangles") {
        const std::string quad =
            "OFF\n4 1 0\n0 0 0\n1 0 0\n1 1 0\n0 1 0\n4 0 1 2 3\n";
        OffMesh m = parse_off(quad);
        REQUIRE(m.faces.size() == 2);
        CHECK(m.faces[0] == std::array<int, 3>{0, 1, 2});
        CHECK(m.faces[1] == std::array<int, 3>{0, 2, 3});
    }
    SUBCASE("header token fused with the counts line") {
        const std::string fused =
            "OFF4 1 0\n0 0 0\n1 0 0\n1 1 0\n0 1 0\n3 0 1 2\n";
        OffMesh m = parse_off(fused);
        CHECK(m.vertices.size() == 4);
        CHECK(m.faces.size() == 1);
    }
    SUBCASE("comments and blank lines skipped") {
        const std::string commented =
            "OFF\n# a comment\n\n3 1 0\n0 0 0\n1 0 0\n0 1 0\n# faces\n3 0 1 2\n";
        OffMesh m = parse_off(commented);
        CHECK(m.vertices.size() == 3);
        CHECK(m.faces.size() == 1);
    }
    SUBCASE("structured errors") {
        CHECK_THROWS_AS(parse_off(""), ParseError);
        CHECK_THROWS_AS(parse_off("PLY\n3 1 0\n"), ParseError);
        CHECK_THROWS_AS(parse_off("OFF\n3 1 0\n0 0 0\n1 0 0\n"), ParseError);  // missing vertex
        CHECK_THROWS_AS(parse_off("OFF\n3 1 0\n0 0 0\n1 0 0\n0 1 0\n3 0 1 9\n"),
                        ParseError);  // index out of range
        CHECK_THROWS_AS(parse_off("OFF\n3 1 0\n0 0 x\n1 0 0\n0 1 0\n3 0 1 2\n"),
                        ParseError);  // non-numeric coordinate
    }
    SUBCASE("round-trip through serialize_off") {
        OffMesh m = parse_off(kTetra);
        OffMesh again = parse_off(serialize_off(m));
        CHECK(again.vertices == m.vertices);
        CHECK(again.faces == m.faces);
    }
}

TEST_CASE("parse_off survives 1000 random mutations of a valid file") {
    RngStream rng(2024);
    int parsed = 0, rejected = 0;
    for (int trial = 0; trial < 1000; ++trial) {
        std::string text = kTetra;
        const int edits = 1 + static_cast<int>(rng.uniform_int(4));
        for (int e = 0; e < edits; ++e) {
            const size_t pos = static_cast<size_t>(rng.uniform_int(static_cast<long long>(text.size())));
            switch (rng.uniform_int(3)) {
                case 0: text[pos] = static_cast<char>(32 + rng.uniform_int(95)); break;
                case 1: text.erase(pos, 1); break;
                default: text.insert(pos, 1, static_cast<char>(32 + rng.uniform_int(95))); break;
            }
        }
        try {
            OffMesh m = parse_off(text);
            // If it parsed, the result must be structurally sound.
            for (const auto& f : m.faces)
                for (int idx : f) {
                    CHECK(idx >= 0);
                    CHECK(idx < static_cast<int>(m.vertices.size()));
                }
            ++parsed;
        } catch (const ParseError&) {
            ++rejected;
        }
        // Anything other than success or ParseError escapes and fails the test.
    }
    CHECK(parsed + rejected == 1000);
    CHECK(rejected > 0);  // the fuzzer does find malformed inputs
}

TEST_CASE("sample_mesh") {
    OffMesh tetra = parse_off(kTetra);
    SUBCASE("samples lie on the tetrahedron surface") {
        RngStream r(3);
        geom::PointCloud c = sample_mesh(tetra, 500, r);
        REQUIRE(c.size() == 500);
        for (const auto& p : c.points) CHECK(in_tetra(p));
    }
    SUBCASE("area weighting: 25/75 split between two triangles") {
        // One unit right triangle (area 1/2) and one scaled x3 in area beside it.
        OffMesh m;
        m.vertices = {{0, 0, 0}, {1, 0, 0}, {0, 1, 0},
                      {10, 0, 0}, {11, 0, 0}, {10, 3, 0}};
        m.faces = {{0, 1, 2}, {3, 4, 5}};  // areas 0.5 and 1.5
        RngStream r(17);
        const int n = 4000;
        geom::PointCloud c = sample_mesh(m, n, r);
        int small_tri = 0;
        for (const auto& p : c.points)
            if (p[0] < 5.0) ++small_tri;
        // Binomial(4000, 0.25): mean 1000, sd ~27.4; allow ~4.5 sigma.
        CHECK(small_tri > 875);
        CHECK(small_tri < 1125);
    }
    SUBCASE("zero-area faces are never picked") {
        OffMesh m;
        m.vertices = {{0, 0, 0}, {1, 0, 0}, {0, 1, 0}, {5, 5, 5}};
        m.faces = {{0, 1, 2}, {3, 3, 3}};  // second face is degenerate
        RngStream r(19);
        geom::PointCloud c = sample_mesh(m, 300, r);
        for (const auto& p : c.points) CHECK(p[0] <= 1.0 + 1e-9);
    }
    SUBCASE("mesh with no positive-area faces is an error") {
        OffMesh m;
        m.vertices = {{0, 0, 0}, {1, 1, 1}};
        m.faces = {{0, 0, 1}};
        RngStream r(23);
        CHECK_THROWS_AS(sample_mesh(m, 10, r), DataError);
    }
}

TEST_CASE("pcb container round-trips bit-exactly") {
    Dataset d = synth_dataset(kSynthClasses, 2, 33, 0.01, 77);
    d.clouds[0].label.reset();  // unlabeled cloud must survive too
    const std::string path = temp_path("dcglr_test.pcb");
    write_pcb(path, d);
    Dataset e = read_pcb(path);

    REQUIRE(e.clouds.size() == d.clouds.size());
    for (size_t i = 0; i < d.clouds.size(); ++i) {
        CHECK(e.clouds[i].label == d.clouds[i].label);
        REQUIRE(e.clouds[i].size() == d.clouds[i].size());
        for (int j = 0; j < d.clouds[i].size(); ++j)
            for (int k = 0; k < 3; ++k)
                CHECK(e.clouds[i].points[j][k] == d.clouds[i].points[j][k]);
    }

    // Writing the re-read dataset reproduces the exact bytes.
    const std::string path2 = temp_path("dcglr_test2.pcb");
    write_pcb(path2, e);
    CHECK(read_file(path) == read_file(path2));
    std::remove(path.c_str());
    std::remove(path2.c_str());
}

TEST_CASE("pcb reader rejects corrupt input") {
    const std::string path = temp_path("dcglr_bad.pcb");
    std::ofstream(path, std::ios::binary) << "PCB1\x05\x00\x00\x00trunc";
    CHECK_THROWS_AS(read_pcb(path), DataError);
    std::ofstream(path, std::ios::binary) << "NOPE";
    CHECK_THROWS_AS(read_pcb(path), DataError);
    std::remove(path.c_str());
}

TEST_CASE("manifest round-trip restores class names, labels and split") {
    Dataset d = synth_dataset(kSynthClasses, 3, 16, 0.0, 9);
    assign_split(d, 0.34, 8);
    const std::string pcb = temp_path("dcglr_mani.pcb");
    const std::string mani = temp_path("dcglr_mani.json");
    write_pcb(pcb, d);
    write_manifest(mani, d, 9);

    Dataset e = read_pcb(pcb);
    e.class_names.clear();
    e.train_split.clear();
    apply_manifest(mani, e);
    CHECK(e.class_names == d.class_names);
    CHECK(e.train_split == d.train_split);
    for (size_t i = 0; i < d.clouds.size(); ++i) CHECK(e.clouds[i].label == d.clouds[i].label);

    std::remove(pcb.c_str());
    std::remove(mani.c_str());
}

TEST_CASE("classes are geometrically distinguishable by crude moments") {
    // Second-moment eigen spread separates e.g. plane (one tiny eigenvalue)
    // from sphere (three equal). A probe this crude should already tell the
    // two apart, which guards against the generator emitting junk.
    auto thinness = [](const geom::PointCloud& c) {
        // Rotation-invariant flatness proxy: det(C) / (tr(C)/3)^3 of the
        // point covariance. Zero for a perfect plane, 1 for an isotropic set.
        double cov[3][3] = {};
        for (const auto& p : c.points)
            for (int a = 0; a < 3; ++a)
                for (int b = 0; b < 3; ++b) cov[a][b] += p[a] * p[b] / c.size();
        const double det = cov[0][0] * (cov[1][1] * cov[2][2] - cov[1][2] * cov[2][1]) -
                           cov[0][1] * (cov[1][0] * cov[2][2] - cov[1][2] * cov[2][0]) +
                           cov[0][2] * (cov[1][0] * cov[2][1] - cov[1][1] * cov[2][0]);
        const double mean_var = (cov[0][0] + cov[1][1] + cov[2][2]) / 3.0;
        return det / (mean_var * mean_var * mean_var);
    };
    int plane_thinner = 0;
    const int trials = 20;
    RngStream base(31);
    for (int t = 0; t < trials; ++t) {
        RngStream r1 = base.fork(2 * t);
        RngStream r2 = base.fork(2 * t + 1);
        geom::PointCloud plane = synth_cloud("plane", 256, 0.0, r1);
        geom::PointCloud sphere = synth_cloud("sphere", 256, 0.0, r2);
        if (thinness(plane) < thinness(sphere)) ++plane_thinner;
    }
    CHECK(plane_thinner >= 18);
}
