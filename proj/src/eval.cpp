#include "dcglr/eval.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <fstream>
#include <set>
#include <sstream>
#include <thread>

#include "dcglr/error.hpp"

namespace dcglr::eval {

void jacobi_eigen(const Tensor& symmetric, std::vector<double>& eigenvalues,
                  Tensor& eigenvectors) {
    const int n = symmetric.rows();
    if (symmetric.shape().size() != 2 || symmetric.cols() != n)
        throw DimensionError("jacobi_eigen: square matrix required");
    Tensor a = symmetric;
    Tensor v({n, n});
    for (int i = 0; i < n; ++i) v.at(i, i) = 1.0;

    auto off_norm = [&] {
        double s = 0.0;
        for (int p = 0; p < n; ++p)
            for (int q = 0; q < n; ++q)
                if (p != q) s += a.at(p, q) * a.at(p, q);
        return std::sqrt(s);
    };

    for (int sweep = 0; sweep < 100 && off_norm() > 1e-10; ++sweep) {
        for (int p = 0; p < n - 1; ++p) {
            for (int q = p + 1; q < n; ++q) {
                const double apq = a.at(p, q);
                if (std::abs(apq) < 1e-300) continue;
                const double theta = (a.at(q, q) - a.at(p, p)) / (2.0 * apq);
                const double t = (theta >= 0 ? 1.0 : -1.0) /
                                 (std::abs(theta) + std::sqrt(theta * theta + 1.0));
                const double c = 1.0 / std::sqrt(t * t + 1.0);
                const double s = t * c;
                for (int k = 0; k < n; ++k) {
                    const double akp = a.at(k, p), akq = a.at(k, q);
                    a.at(k, p) = c * akp - s * akq;
                    a.at(k, q) = s * akp + c * akq;
                }
                for (int k = 0; k < n; ++k) {
                    const double apk = a.at(p, k), aqk = a.at(q, k);
                    a.at(p, k) = c * apk - s * aqk;
                    a.at(q, k) = s * apk + c * aqk;
                }
                for (int k = 0; k < n; ++k) {
                    const double vkp = v.at(k, p), vkq = v.at(k, q);
                    v.at(k, p) = c * vkp - s * vkq;
                    v.at(k, q) = s * vkp + c * vkq;
                }
            }
        }
    }

    std::vector<int> order(n);
    for (int i = 0; i < n; ++i) order[i] = i;
    std::sort(order.begin(), order.end(),
              [&](int x, int y) { return a.at(x, x) > a.at(y, y); });
    eigenvalues.resize(n);
    eigenvectors = Tensor({n, n});
    for (int j = 0; j < n; ++j) {
        eigenvalues[j] = a.at(order[j], order[j]);
        for (int i = 0; i < n; ++i) eigenvectors.at(i, j) = v.at(i, order[j]);
    }
}

FeatureMatrix extract_features(const data::Dataset& dataset, const nn::ModelParams& params,
                               uint64_t seed, int threads) {
    const int m = static_cast<int>(dataset.clouds.size());
    const int d = params.config.dim;
    FeatureMatrix out;
    out.rows = Tensor({std::max(m, 1), d});
    out.labels.resize(m);
    RngStream base(seed);
    std::atomic<int> next{0};
    auto worker = [&] {
        for (int i = next.fetch_add(1); i < m; i = next.fetch_add(1)) {
            RngStream rng = base.fork(static_cast<uint64_t>(i));
            nn::PlainForward f = nn::forward_plain(dataset.clouds[i], params, rng);
            for (int j = 0; j < d; ++j) out.rows.at(i, j) = f.feature[j];
            out.labels[i] = dataset.clouds[i].label.value_or(-1);
        }
    };
    if (threads <= 1) {
        worker();
    } else {
        std::vector<std::thread> pool;
        for (int w = 0; w < std::min(threads, std::max(m, 1)); ++w) pool.emplace_back(worker);
        for (auto& th : pool) th.join();
    }
    return out;
}

double linear_probe(const FeatureMatrix& features, const std::vector<bool>& train_split,
                    double reg, int epochs, uint64_t seed) {
    (void)seed;  // the solve is deterministic: zero init, fixed order
    const int m = features.rows.rows();
    const int d = features.rows.cols();
    if (static_cast<int>(train_split.size()) != m)
        throw DimensionError("linear_probe: split length mismatch");
    std::set<int> class_set;
    for (int i = 0; i < m; ++i)
        if (train_split[i]) class_set.insert(features.labels[i]);
    if (class_set.size() < 2) throw DataError("linear_probe: training split has a single class");
    std::vector<int> classes(class_set.begin(), class_set.end());
    const int nc = static_cast<int>(classes.size());
    auto class_index = [&](int label) {
        return static_cast<int>(std::lower_bound(classes.begin(), classes.end(), label) -
                                classes.begin());
    };

    // Standardize on training statistics.
    std::vector<double> mu(d, 0.0), sd(d, 0.0);
    int n_train = 0;
    for (int i = 0; i < m; ++i)
        if (train_split[i]) {
            ++n_train;
            for (int j = 0; j < d; ++j) mu[j] += features.rows.at(i, j);
        }
    for (int j = 0; j < d; ++j) mu[j] /= n_train;
    for (int i = 0; i < m; ++i)
        if (train_split[i])
            for (int j = 0; j < d; ++j) {
                const double x = features.rows.at(i, j) - mu[j];
                sd[j] += x * x;
            }
    for (int j = 0; j < d; ++j) sd[j] = std::sqrt(sd[j] / n_train) + 1e-12;

    Tensor w({d, nc});
    std::vector<double> bias(nc, 0.0);
    const double lr = 0.5;
    std::vector<double> logits(nc), probs(nc);
    Tensor gw({d, nc});
    std::vector<double> gb(nc);
    std::vector<double> xi(d);
    for (int epoch = 0; epoch < epochs; ++epoch) {
        std::fill(gw.vec().begin(), gw.vec().end(), 0.0);
        std::fill(gb.begin(), gb.end(), 0.0);
        for (int i = 0; i < m; ++i) {
            if (!train_split[i]) continue;
            for (int j = 0; j < d; ++j) xi[j] = (features.rows.at(i, j) - mu[j]) / sd[j];
            double mx = -1e300;
            for (int c = 0; c < nc; ++c) {
                double z = bias[c];
                for (int j = 0; j < d; ++j) z += xi[j] * w.at(j, c);
                logits[c] = z;
                mx = std::max(mx, z);
            }
            double zsum = 0.0;
            for (int c = 0; c < nc; ++c) {
                probs[c] = std::exp(logits[c] - mx);
                zsum += probs[c];
            }
            const int y = class_index(features.labels[i]);
            for (int c = 0; c < nc; ++c) {
                const double e = probs[c] / zsum - (c == y ? 1.0 : 0.0);
                gb[c] += e;
                for (int j = 0; j < d; ++j) gw.at(j, c) += e * xi[j];
            }
        }
        for (int c = 0; c < nc; ++c) {
            bias[c] -= lr * gb[c] / n_train;
            for (int j = 0; j < d; ++j)
                w.at(j, c) -= lr * (gw.at(j, c) / n_train + reg * w.at(j, c));
        }
    }

    int correct = 0, total = 0;
    for (int i = 0; i < m; ++i) {
        if (train_split[i]) continue;
        ++total;
        for (int j = 0; j < d; ++j) xi[j] = (features.rows.at(i, j) - mu[j]) / sd[j];
        int best = 0;
        double best_z = -1e300;
        for (int c = 0; c < nc; ++c) {
            double z = bias[c];
            for (int j = 0; j < d; ++j) z += xi[j] * w.at(j, c);
            if (z > best_z) {
                best_z = z;
                best = c;
            }
        }
        if (classes[best] == features.labels[i]) ++correct;
    }
    if (total == 0) throw DataError("linear_probe: empty test split");
    return static_cast<double>(correct) / total;
}

SpectrumReport spectrum(const Tensor& features, double threshold) {
    const int m = features.rows();
    const int d = features.cols();
    if (m < 1) throw DimensionError("spectrum: empty feature matrix");
    std::vector<double> mu(d, 0.0);
    for (int i = 0; i < m; ++i)
        for (int j = 0; j < d; ++j) mu[j] += features.at(i, j);
    for (int j = 0; j < d; ++j) mu[j] /= m;
    Tensor cov({d, d});
    for (int i = 0; i < m; ++i)
        for (int a = 0; a < d; ++a) {
            const double xa = features.at(i, a) - mu[a];
            for (int b = a; b < d; ++b)
                cov.at(a, b) += xa * (features.at(i, b) - mu[b]);
        }
    for (int a = 0; a < d; ++a)
        for (int b = a; b < d; ++b) {
            cov.at(a, b) /= m;
            cov.at(b, a) = cov.at(a, b);
        }

    SpectrumReport rep;
    rep.threshold = threshold;
    Tensor vecs;
    jacobi_eigen(cov, rep.eigenvalues, vecs);
    for (double& ev : rep.eigenvalues) ev = std::max(ev, 0.0);
    const double mx = rep.eigenvalues.empty() ? 0.0 : rep.eigenvalues.front();
    rep.max_is_zero = !(mx > 0.0);
    for (double ev : rep.eigenvalues) {
        const double nrm = rep.max_is_zero ? 0.0 : ev / mx;
        rep.normalized.push_back(nrm);
        rep.log10_normalized.push_back(std::log10(std::max(nrm, 1e-300)));
        if (nrm > threshold) ++rep.effective_rank;
    }
    if (rep.max_is_zero) rep.effective_rank = 0;
    return rep;
}

Tensor pca_project(const Tensor& features, int dims) {
    const int m = features.rows();
    const int d = features.cols();
    if (dims < 1 || dims > d) throw ParameterError("pca_project: bad target dimension");
    std::vector<double> mu(d, 0.0);
    for (int i = 0; i < m; ++i)
        for (int j = 0; j < d; ++j) mu[j] += features.at(i, j);
    for (int j = 0; j < d; ++j) mu[j] /= m;
    Tensor cov({d, d});
    for (int i = 0; i < m; ++i)
        for (int a = 0; a < d; ++a) {
            const double xa = features.at(i, a) - mu[a];
            for (int b = 0; b < d; ++b) cov.at(a, b) += xa * (features.at(i, b) - mu[b]);
        }
    for (long long i = 0; i < cov.numel(); ++i) cov[i] /= m;
    std::vector<double> evals;
    Tensor vecs;
    jacobi_eigen(cov, evals, vecs);
    Tensor out({m, dims});
    for (int i = 0; i < m; ++i)
        for (int k = 0; k < dims; ++k) {
            double s = 0.0;
            for (int j = 0; j < d; ++j) s += (features.at(i, j) - mu[j]) * vecs.at(j, k);
            out.at(i, k) = s;
        }
    return out;
}

void write_projection_csv(const std::string& path, const Tensor& coords,
                          const std::vector<int>& labels) {
    std::ofstream out(path);
    if (!out) throw DataError("cannot open for writing: " + path);
    out << "x,y,label\n";
    out.precision(17);
    for (int i = 0; i < coords.rows(); ++i)
        out << coords.at(i, 0) << "," << coords.at(i, 1) << ","
            << (i < static_cast<int>(labels.size()) ? labels[i] : -1) << "\n";
}

void write_spectrum_csv(const std::string& path, const SpectrumReport& rep) {
    std::ofstream out(path);
    if (!out) throw DataError("cannot open for writing: " + path);
    out << "index,eigenvalue,normalized,log10_normalized\n";
    out.precision(17);
    for (size_t i = 0; i < rep.eigenvalues.size(); ++i)
        out << i << "," << rep.eigenvalues[i] << "," << rep.normalized[i] << ","
            << rep.log10_normalized[i] << "\n";
}

std::vector<std::vector<double>> class_attention_weights(const nn::PlainForward& fwd,
                                                         int layer) {
    if (layer < 0 || layer >= static_cast<int>(fwd.attention.size()))
        throw ParameterError("class_attention_weights: layer out of range");
    std::vector<std::vector<double>> heads;
    for (const Tensor& attn : fwd.attention[layer]) {
        const int seq = attn.rows();
        std::vector<double> w(seq - 1);
        double sum = 0.0;
        for (int j = 1; j < seq; ++j) {
            w[j - 1] = attn.at(0, j);  // class-token row, class-to-class entry dropped
            sum += w[j - 1];
        }
        if (sum > 0.0)
            for (double& x : w) x /= sum;
        heads.push_back(std::move(w));
    }
    return heads;
}

std::vector<std::string> export_attention(const geom::PointCloud& cloud,
                                          const nn::ModelParams& params, int layer,
                                          const std::string& out_prefix, uint64_t seed) {
    RngStream rng(seed);
    nn::PlainForward fwd = nn::forward_plain(cloud, params, rng);
    if (layer < 0) layer = static_cast<int>(fwd.attention.size()) - 1;
    const auto heads = class_attention_weights(fwd, layer);

    std::vector<std::string> paths;
    for (size_t h = 0; h < heads.size(); ++h) {
        // Per-point weight: maximum over the patches containing the point.
        std::vector<double> point_w(cloud.points.size(), 0.0);
        for (size_t p = 0; p < fwd.patch_members.size(); ++p)
            for (int idx : fwd.patch_members[p])
                point_w[idx] = std::max(point_w[idx], heads[h][p]);
        double wmax = 0.0;
        for (double w : point_w) wmax = std::max(wmax, w);
        if (wmax <= 0.0) wmax = 1.0;

        std::string path = out_prefix + "_head" + std::to_string(h) + ".ply";
        std::ofstream out(path);
        if (!out) throw DataError("cannot open for writing: " + path);
        out << "ply\nformat ascii 1.0\n";
        out << "comment dcglr class-token attention, layer " << layer << " head " << h << "\n";
        out << "element vertex " << cloud.points.size() << "\n";
        out << "property double x\nproperty double y\nproperty double z\n";
        out << "property uchar red\nproperty uchar green\nproperty uchar blue\n";
        out << "end_header\n";
        out.precision(17);
        for (size_t i = 0; i < cloud.points.size(); ++i) {
            const double t = point_w[i] / wmax;
            const int r = static_cast<int>(std::lround(255.0 * t));
            out << cloud.points[i][0] << " " << cloud.points[i][1] << " "
                << cloud.points[i][2] << " " << r << " 0 " << 255 - r << "\n";
        }
        paths.push_back(std::move(path));
    }
    return paths;
}

PlyCloud read_ply(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw DataError("cannot open: " + path);
    std::string line;
    int n_vertex = -1;
    bool header_done = false;
    int line_no = 0;
    if (!std::getline(in, line) || line != "ply") throw ParseError("not a PLY file", 1);
    while (std::getline(in, line)) {
        ++line_no;
        if (line.rfind("element vertex", 0) == 0)
            n_vertex = std::stoi(line.substr(15));
        else if (line == "end_header") {
            header_done = true;
            break;
        }
    }
    if (!header_done || n_vertex < 0) throw ParseError("truncated PLY header", line_no);
    PlyCloud out;
    for (int i = 0; i < n_vertex; ++i) {
        double x, y, z;
        int r, g, b;
        if (!(in >> x >> y >> z >> r >> g >> b))
            throw ParseError("truncated PLY vertex list", line_no + i + 1);
        out.points.push_back({x, y, z});
        out.colors.push_back({r, g, b});
    }
    return out;
}

}  // namespace dcglr::eval
