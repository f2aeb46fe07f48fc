// Python bindings for the DCGLR core: geometry kernels, data generation,
// feature extraction and diagnostics, with numpy arrays at the boundary.

#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include "dcglr/data.hpp"
#include "dcglr/eval.hpp"
#include "dcglr/train.hpp"

namespace py = pybind11;
using namespace dcglr;

namespace {

geom::PointCloud cloud_from_array(const py::array_t<double, py::array::c_style |
                                                               py::array::forcecast>& arr) {
    if (arr.ndim() != 2 || arr.shape(1) != 3)
        throw py::value_error("point cloud must be an (N, 3) array");
    geom::PointCloud c;
    c.points.resize(static_cast<size_t>(arr.shape(0)));
    const double* p = arr.data();
    for (size_t i = 0; i < c.points.size(); ++i)
        c.points[i] = {p[3 * i], p[3 * i + 1], p[3 * i + 2]};
    return c;
}

py::array_t<double> cloud_to_array(const geom::PointCloud& c) {
    py::array_t<double> arr({static_cast<py::ssize_t>(c.points.size()), py::ssize_t(3)});
    double* p = arr.mutable_data();
    for (size_t i = 0; i < c.points.size(); ++i)
        for (int d = 0; d < 3; ++d) p[3 * i + d] = c.points[i][d];
    return arr;
}

py::array_t<double> tensor_to_array(const Tensor& t) {
    py::array_t<double> arr({static_cast<py::ssize_t>(t.rows()), static_cast<py::ssize_t>(t.cols())});
    std::copy(t.data(), t.data() + t.numel(), arr.mutable_data());
    return arr;
}

nn::BackboneConfig config_from_kwargs(int k_patch, int dim, int layers, int heads, int mlp_hidden,
                                      int proj_hidden, int proj_out, bool append_centroid) {
    nn::BackboneConfig b;
    b.k_patch = k_patch;
    b.dim = dim;
    b.layers = layers;
    b.heads = heads;
    b.mlp_hidden = mlp_hidden;
    b.proj_hidden = proj_hidden;
    b.proj_out = proj_out;
    b.append_centroid = append_centroid;
    b.validate();
    return b;
}

}  // namespace

PYBIND11_MODULE(_dcglr, m) {
    m.doc() = "DCGLR point-cloud representation learning core";

    // ----- geometry kernels -----
    m.def(
        "fps",
        [](const py::array_t<double>& cloud, int m, uint64_t seed) {
            geom::PointCloud c = cloud_from_array(cloud);
            RngStream rng(seed);
            return geom::fps(c, m, rng);
        },
        py::arg("cloud"), py::arg("m"), py::arg("seed") = 1,
        "Farthest point sampling; returns selected indices.");

    m.def(
        "knn",
        [](const py::array_t<double>& cloud, const std::array<double, 3>& center, int k) {
            return geom::knn(cloud_from_array(cloud), center, k);
        },
        py::arg("cloud"), py::arg("center"), py::arg("k"),
        "Indices of the k nearest points to center.");

    m.def(
        "crop",
        [](const py::array_t<double>& cloud, double ratio, uint64_t seed) {
            geom::PointCloud c = cloud_from_array(cloud);
            RngStream rng(seed);
            return cloud_to_array(geom::crop(c, ratio, rng));
        },
        py::arg("cloud"), py::arg("ratio"), py::arg("seed") = 1,
        "Contiguous crop of round(ratio * N) points around a random anchor.");

    m.def(
        "normalize",
        [](const py::array_t<double>& cloud) {
            return cloud_to_array(geom::normalize(cloud_from_array(cloud)));
        },
        py::arg("cloud"), "Center on the centroid and scale the farthest point to norm 1.");

    // ----- data -----
    m.def(
        "synth_cloud",
        [](const std::string& cls, int n_points, double noise, uint64_t seed) {
            RngStream rng(seed);
            return cloud_to_array(data::synth_cloud(cls, n_points, noise, rng));
        },
        py::arg("cls"), py::arg("n_points") = 1024, py::arg("noise") = 0.01, py::arg("seed") = 1,
        "One synthetic shape cloud (sphere, cube, cylinder, cone, torus, plane).");

    m.def(
        "synth_dataset",
        [](int per_class, int n_points, double noise, uint64_t seed) {
            data::Dataset ds =
                data::synth_dataset(data::kSynthClasses, per_class, n_points, noise, seed);
            py::list clouds;
            py::list labels;
            for (const auto& c : ds.clouds) {
                clouds.append(cloud_to_array(c));
                labels.append(c.label.value_or(-1));
            }
            return py::make_tuple(clouds, labels, ds.class_names);
        },
        py::arg("per_class") = 50, py::arg("n_points") = 1024, py::arg("noise") = 0.01,
        py::arg("seed") = 1, "Balanced synthetic dataset: (clouds, labels, class_names).");

    m.def("synth_classes", [] { return data::kSynthClasses; });

    m.def(
        "write_pcb",
        [](const std::string& path, const py::list& clouds, const py::list& labels) {
            if (py::len(clouds) != py::len(labels))
                throw py::value_error("clouds and labels must have equal length");
            data::Dataset ds;
            for (size_t i = 0; i < py::len(clouds); ++i) {
                geom::PointCloud c = cloud_from_array(py::cast<py::array_t<double>>(clouds[i]));
                const int label = py::cast<int>(labels[i]);
                if (label >= 0) c.label = label;
                ds.clouds.push_back(std::move(c));
            }
            data::write_pcb(path, ds);
        },
        py::arg("path"), py::arg("clouds"), py::arg("labels"),
        "Write clouds to a PCB1 container (label -1 = unlabeled).");

    m.def(
        "read_pcb",
        [](const std::string& path) {
            data::Dataset ds = data::read_pcb(path);
            py::list clouds;
            py::list labels;
            for (const auto& c : ds.clouds) {
                clouds.append(cloud_to_array(c));
                labels.append(c.label.value_or(-1));
            }
            return py::make_tuple(clouds, labels);
        },
        py::arg("path"), "Read a PCB1 container: (clouds, labels).");

    m.def(
        "sample_off",
        [](const std::string& text, int n_points, uint64_t seed) {
            RngStream rng(seed);
            return cloud_to_array(data::sample_mesh(data::parse_off(text), n_points, rng));
        },
        py::arg("off_text"), py::arg("n_points") = 1024, py::arg("seed") = 1,
        "Parse OFF text and sample points uniformly by surface area.");

    // ----- model / evaluation -----
    m.def(
        "extract_features",
        [](const std::string& checkpoint, const py::list& clouds, uint64_t seed, int threads) {
            const nn::ModelParams teacher = train::load_train_state(checkpoint).teacher;
            data::Dataset ds;
            for (const auto& item : clouds)
                ds.clouds.push_back(cloud_from_array(py::cast<py::array_t<double>>(item)));
            ds.train_split.assign(ds.clouds.size(), true);
            return tensor_to_array(eval::extract_features(ds, teacher, seed, threads).rows);
        },
        py::arg("checkpoint"), py::arg("clouds"), py::arg("seed") = 1, py::arg("threads") = 1,
        "Teacher class-token features for each cloud, from a training checkpoint.");

    m.def(
        "spectrum",
        [](const py::array_t<double, py::array::c_style | py::array::forcecast>& features,
           double threshold) {
            if (features.ndim() != 2) throw py::value_error("features must be a 2-d array");
            Tensor f({static_cast<int>(features.shape(0)), static_cast<int>(features.shape(1))});
            std::copy(features.data(), features.data() + f.numel(), f.data());
            eval::SpectrumReport r = eval::spectrum(f, threshold);
            py::dict out;
            out["eigenvalues"] = r.eigenvalues;
            out["normalized"] = r.normalized;
            out["effective_rank"] = r.effective_rank;
            out["max_is_zero"] = r.max_is_zero;
            return out;
        },
        py::arg("features"), py::arg("threshold") = 1e-3,
        "Covariance eigenvalue spectrum and effective rank of a feature matrix.");

    m.def(
        "linear_probe",
        [](const py::array_t<double, py::array::c_style | py::array::forcecast>& features,
           const std::vector<int>& labels, const std::vector<bool>& train_split, double reg,
           int epochs, uint64_t seed) {
            if (features.ndim() != 2) throw py::value_error("features must be a 2-d array");
            eval::FeatureMatrix f;
            f.rows = Tensor({static_cast<int>(features.shape(0)),
                             static_cast<int>(features.shape(1))});
            std::copy(features.data(), features.data() + f.rows.numel(), f.rows.data());
            f.labels = labels;
            return eval::linear_probe(f, train_split, reg, epochs, seed);
        },
        py::arg("features"), py::arg("labels"), py::arg("train_split"), py::arg("reg") = 1e-4,
        py::arg("epochs") = 500, py::arg("seed") = 1,
        "Test accuracy of a multinomial logistic probe on frozen features.");

    m.def(
        "pretrain",
        [](const py::list& clouds, const std::string& out_checkpoint, int epochs, int batch_size,
           uint64_t seed, int threads, int k_patch, int dim, int layers, int heads, int mlp_hidden,
           int proj_hidden, int proj_out, bool append_centroid, int global_resample,
           int local_resample, int num_local, int num_resolution) {
            std::vector<geom::PointCloud> train_clouds;
            for (const auto& item : clouds)
                train_clouds.push_back(cloud_from_array(py::cast<py::array_t<double>>(item)));
            nn::BackboneConfig b = config_from_kwargs(k_patch, dim, layers, heads, mlp_hidden,
                                                      proj_hidden, proj_out, append_centroid);
            train::TrainConfig tc;
            tc.epochs = epochs;
            tc.batch_size = batch_size;
            tc.seed = seed;
            tc.threads = threads;
            tc.crops.global_resample = global_resample;
            tc.crops.local_resample = local_resample;
            tc.crops.num_local = num_local;
            tc.crops.num_resolution = num_resolution;
            tc.crops.min_crop_points = b.k_patch;
            train::TrainState st = train::init_train_state(b, tc);
            std::vector<double> losses;
            {
                py::gil_scoped_release release;
                train::pretrain(train_clouds, st, tc,
                                [&](const train::StepMetrics& m) { losses.push_back(m.loss); },
                                nullptr);
            }
            train::save_train_state(out_checkpoint, st);
            return losses;
        },
        py::arg("clouds"), py::arg("out_checkpoint"), py::arg("epochs") = 10,
        py::arg("batch_size") = 16, py::arg("seed") = 1, py::arg("threads") = 1,
        py::arg("k_patch") = 32, py::arg("dim") = 128, py::arg("layers") = 4, py::arg("heads") = 8,
        py::arg("mlp_hidden") = 256, py::arg("proj_hidden") = 512, py::arg("proj_out") = 128,
        py::arg("append_centroid") = true, py::arg("global_resample") = 1024,
        py::arg("local_resample") = 256, py::arg("num_local") = 8, py::arg("num_resolution") = 2,
        "Self-supervised pretraining; writes a checkpoint and returns per-step losses.");

    m.def(
        "export_attention",
        [](const std::string& checkpoint, const py::array_t<double>& cloud, int layer,
           const std::string& out_prefix, uint64_t seed) {
            const nn::ModelParams teacher = train::load_train_state(checkpoint).teacher;
            return eval::export_attention(cloud_from_array(cloud), teacher, layer, out_prefix,
                                          seed);
        },
        py::arg("checkpoint"), py::arg("cloud"), py::arg("layer"), py::arg("out_prefix"),
        py::arg("seed") = 1, "Write per-head class-token attention PLY files; returns paths.");
}
