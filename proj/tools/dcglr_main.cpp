// dcglr: dataset generation, self-supervised pretraining, evaluation and
// diagnostics for point-cloud representation learning.

#include <atomic>
#include <csignal>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "dcglr/config.hpp"
#include "dcglr/data.hpp"
#include "dcglr/error.hpp"
#include "dcglr/eval.hpp"
#include "dcglr/train.hpp"

namespace fs = std::filesystem;
using namespace dcglr;

namespace {

constexpr int kExitUsage = 2;
constexpr int kExitData = 3;
constexpr int kExitNumeric = 4;

std::atomic<bool> g_interrupted{false};
void handle_sigint(int) { g_interrupted.store(true); }

struct CommonFlags {
    std::string config_path;
    std::string out_dir;
    std::vector<std::string> set_args;             // raw --set key=value pairs
    std::map<std::string, std::string> overrides;  // full keys, flag values
};

cfg::RunConfig resolve_config(const CommonFlags& flags) {
    cfg::RunConfig config;
    if (!flags.config_path.empty()) config = cfg::load_config_file(flags.config_path);
    std::map<std::string, std::string> overrides = flags.overrides;
    for (const std::string& kv : flags.set_args) {
        const size_t eq = kv.find('=');
        if (eq == std::string::npos || eq == 0)
            throw ParameterError("--set expects key=value, got '" + kv + "'");
        overrides[kv.substr(0, eq)] = kv.substr(eq + 1);
    }
    cfg::apply_config(config, overrides);  // flags win over file keys
    if (!flags.out_dir.empty()) config.out_dir = flags.out_dir;
    if (const char* env = std::getenv("DCGLR_OUT"); env && *env) config.out_dir = env;
    config.training.seed = config.seed;
    config.training.crops.min_crop_points = config.backbone.k_patch;
    return config;
}

void write_resolved_config(const cfg::RunConfig& config, const std::string& path) {
    std::ofstream out(path);
    if (!out) throw DataError("cannot open for writing: " + path);
    out << serialize_config(config);
}

data::Dataset load_dataset(const cfg::RunConfig& config) {
    if (config.dataset_path.empty()) throw DataError("no dataset path configured");
    data::Dataset ds = data::read_pcb(config.dataset_path);
    std::string manifest = config.manifest_path;
    if (manifest.empty()) {
        const fs::path guess = fs::path(config.dataset_path).replace_extension(".json");
        if (fs::exists(guess)) manifest = guess.string();
    }
    if (!manifest.empty()) data::apply_manifest(manifest, ds);
    return ds;
}

int cmd_gen(const CommonFlags& flags, const std::vector<std::string>& classes, int per_class,
            int points, double noise, const std::vector<std::string>& off_files,
            double test_fraction) {
    cfg::RunConfig config = resolve_config(flags);
    for (const auto& c : classes)
        if (std::find(data::kSynthClasses.begin(), data::kSynthClasses.end(), c) ==
            data::kSynthClasses.end())
            throw ParameterError("--classes: unknown class '" + c + "'");
    data::Dataset ds;
    if (!off_files.empty()) {
        RngStream rng(config.seed);
        int label = 0;
        for (const auto& path : off_files) {
            std::ifstream in(path);
            if (!in) throw DataError("cannot open: " + path);
            std::stringstream ss;
            ss << in.rdbuf();
            data::OffMesh mesh = data::parse_off(ss.str());
            geom::PointCloud cloud =
                geom::normalize(data::sample_mesh(mesh, points, rng));
            cloud.label = label++;
            ds.clouds.push_back(std::move(cloud));
            ds.class_names.push_back(fs::path(path).stem().string());
        }
        ds.train_split.assign(ds.clouds.size(), true);
    } else {
        ds = data::synth_dataset(classes, per_class, points, noise, config.seed);
    }
    data::assign_split(ds, test_fraction, config.seed);
    fs::create_directories(config.out_dir);
    const std::string pcb = (fs::path(config.out_dir) / "dataset.pcb").string();
    const std::string manifest = (fs::path(config.out_dir) / "dataset.json").string();
    data::write_pcb(pcb, ds);
    data::write_manifest(manifest, ds, config.seed);
    write_resolved_config(config, (fs::path(config.out_dir) / "gen.config").string());
    std::cout << "wrote " << ds.clouds.size() << " clouds to " << pcb << "\n";
    return 0;
}

int cmd_pretrain(const CommonFlags& flags, const std::string& resume_path) {
    cfg::RunConfig config = resolve_config(flags);
    data::Dataset ds = load_dataset(config);
    std::vector<geom::PointCloud> train_clouds;
    for (size_t i = 0; i < ds.clouds.size(); ++i)
        if (ds.train_split[i]) train_clouds.push_back(ds.clouds[i]);
    if (train_clouds.empty()) throw DataError("training split is empty");

    fs::create_directories(config.out_dir);
    write_resolved_config(config, (fs::path(config.out_dir) / "pretrain.config").string());

    train::TrainState state;
    if (!resume_path.empty()) {
        state = train::load_train_state(resume_path);
    } else {
        state = train::init_train_state(config.backbone, config.training);
    }

    const std::string metrics_path = (fs::path(config.out_dir) / "metrics.jsonl").string();
    std::ofstream metrics(metrics_path, resume_path.empty() ? std::ios::trunc : std::ios::app);
    if (!metrics) throw DataError("cannot open for writing: " + metrics_path);

    std::signal(SIGINT, handle_sigint);
    int checkpoints = 0;
    train::pretrain(
        train_clouds, state, config.training,
        [&](const train::StepMetrics& m) { metrics << train::metrics_json_line(m) << "\n"; },
        [&](const train::TrainState& s, int epoch) {
            const std::string path =
                (fs::path(config.out_dir) / ("checkpoint_epoch" + std::to_string(epoch) + ".dckp"))
                    .string();
            train::save_train_state(path, s);
            train::save_train_state((fs::path(config.out_dir) / "checkpoint_last.dckp").string(), s);
            ++checkpoints;
        },
        [] { return g_interrupted.load(); });
    metrics.flush();
    std::cout << "pretraining " << (g_interrupted ? "interrupted" : "finished") << " at epoch "
              << state.epoch << ", wrote " << checkpoints << " checkpoint(s)\n";
    return 0;
}

nn::ModelParams teacher_from_checkpoint(const std::string& path) {
    return train::load_train_state(path).teacher;
}

int cmd_eval(const CommonFlags& flags, const std::string& checkpoint) {
    cfg::RunConfig config = resolve_config(flags);
    data::Dataset ds = load_dataset(config);
    nn::ModelParams teacher = teacher_from_checkpoint(checkpoint);
    eval::FeatureMatrix features =
        eval::extract_features(ds, teacher, config.seed, config.training.threads);
    std::vector<bool> split(ds.train_split.begin(), ds.train_split.end());
    const double acc =
        eval::linear_probe(features, split, config.probe_reg, config.probe_epochs, config.seed);
    fs::create_directories(config.out_dir);
    nlohmann::json report;
    report["probe_accuracy"] = acc;
    report["num_clouds"] = ds.clouds.size();
    report["seed"] = config.seed;
    report["config"] = cfg::serialize_config(config);
    const std::string path = (fs::path(config.out_dir) / "eval.json").string();
    std::ofstream out(path);
    out << report.dump(2) << "\n";
    std::cout << "probe accuracy " << acc << " -> " << path << "\n";
    return 0;
}

int cmd_diagnose(const CommonFlags& flags, const std::string& checkpoint) {
    cfg::RunConfig config = resolve_config(flags);
    data::Dataset ds = load_dataset(config);
    nn::ModelParams teacher = teacher_from_checkpoint(checkpoint);
    eval::FeatureMatrix features =
        eval::extract_features(ds, teacher, config.seed, config.training.threads);
    eval::SpectrumReport rep = eval::spectrum(features.rows, config.spectrum_threshold);
    fs::create_directories(config.out_dir);
    eval::write_spectrum_csv((fs::path(config.out_dir) / "spectrum.csv").string(), rep);
    Tensor coords = eval::pca_project(features.rows, 2);
    eval::write_projection_csv((fs::path(config.out_dir) / "pca.csv").string(), coords,
                               features.labels);
    nlohmann::json report;
    report["effective_rank"] = rep.effective_rank;
    report["threshold"] = rep.threshold;
    report["max_eigenvalue_zero"] = rep.max_is_zero;
    report["eigenvalues"] = rep.eigenvalues;
    report["normalized"] = rep.normalized;
    report["seed"] = config.seed;
    report["config"] = cfg::serialize_config(config);
    std::ofstream out((fs::path(config.out_dir) / "spectrum.json").string());
    out << report.dump(2) << "\n";
    std::cout << "effective rank " << rep.effective_rank << " -> " << config.out_dir << "\n";
    return 0;
}

int cmd_attn(const CommonFlags& flags, const std::string& checkpoint, int cloud_index) {
    cfg::RunConfig config = resolve_config(flags);
    data::Dataset ds = load_dataset(config);
    if (cloud_index < 0 || cloud_index >= static_cast<int>(ds.clouds.size()))
        throw ParameterError("--cloud: index out of range");
    nn::ModelParams teacher = teacher_from_checkpoint(checkpoint);
    fs::create_directories(config.out_dir);
    const std::string prefix =
        (fs::path(config.out_dir) / ("attention_cloud" + std::to_string(cloud_index))).string();
    const auto paths = eval::export_attention(ds.clouds[cloud_index], teacher,
                                              config.attention_layer, prefix, config.seed);
    write_resolved_config(config, (fs::path(config.out_dir) / "attn.config").string());
    for (const auto& p : paths) std::cout << p << "\n";
    return 0;
}

void add_common(CLI::App* cmd, CommonFlags& flags) {
    cmd->add_option("--config", flags.config_path, "Config file (key = value with [sections])");
    cmd->add_option("--out", flags.out_dir, "Output directory (env DCGLR_OUT overrides)");
    cmd->add_option("--set", flags.set_args,
                    "Override any config key (e.g. --set train.epochs=5)");
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"DCGLR point-cloud representation learning engine"};
    app.require_subcommand(1);

    CommonFlags gen_flags, pre_flags, eval_flags, diag_flags, attn_flags;

    auto* gen = app.add_subcommand("gen", "Generate a dataset (synthetic shapes or OFF meshes)");
    std::vector<std::string> classes = data::kSynthClasses;
    int per_class = 50, points = 1024;
    double noise = 0.01, test_fraction = 0.3;
    std::vector<std::string> off_files;
    add_common(gen, gen_flags);
    gen->add_option("--classes", classes, "Synthetic classes");
    gen->add_option("--per-class", per_class, "Clouds per class");
    gen->add_option("--points", points, "Points per cloud");
    gen->add_option("--noise", noise, "Gaussian jitter sigma");
    gen->add_option("--off", off_files, "OFF mesh files (one class per file)");
    gen->add_option("--test-fraction", test_fraction, "Held-out fraction per class");
    gen->add_option("--seed", gen_flags.overrides["run.seed"], "Random seed");

    auto* pre = app.add_subcommand("pretrain", "Self-supervised pretraining");
    std::string resume;
    add_common(pre, pre_flags);
    pre->add_option("--data", pre_flags.overrides["data.dataset"], "PCB1 dataset file");
    pre->add_option("--epochs", pre_flags.overrides["train.epochs"], "Training epochs");
    pre->add_option("--batch", pre_flags.overrides["train.batch_size"], "Batch size");
    pre->add_option("--threads", pre_flags.overrides["train.threads"], "Worker threads");
    pre->add_option("--seed", pre_flags.overrides["run.seed"], "Random seed");
    pre->add_option("--resume", resume, "Resume from a training checkpoint");

    auto* evalc = app.add_subcommand("eval", "Linear probe on teacher features");
    std::string eval_ckpt;
    add_common(evalc, eval_flags);
    evalc->add_option("--data", eval_flags.overrides["data.dataset"], "PCB1 dataset file");
    evalc->add_option("--checkpoint", eval_ckpt, "Training checkpoint")->required();
    evalc->add_option("--seed", eval_flags.overrides["run.seed"], "Random seed");

    auto* diag = app.add_subcommand("diagnose", "Covariance spectrum + PCA projection");
    std::string diag_ckpt;
    add_common(diag, diag_flags);
    diag->add_option("--data", diag_flags.overrides["data.dataset"], "PCB1 dataset file");
    diag->add_option("--checkpoint", diag_ckpt, "Training checkpoint")->required();
    diag->add_option("--seed", diag_flags.overrides["run.seed"], "Random seed");

    auto* attn = app.add_subcommand("attn", "Export per-head class-token attention as PLY");
    std::string attn_ckpt;
    int cloud_index = 0;
    add_common(attn, attn_flags);
    attn->add_option("--data", attn_flags.overrides["data.dataset"], "PCB1 dataset file");
    attn->add_option("--checkpoint", attn_ckpt, "Training checkpoint")->required();
    attn->add_option("--cloud", cloud_index, "Cloud index within the dataset");
    attn->add_option("--seed", attn_flags.overrides["run.seed"], "Random seed");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : kExitUsage;
    }

    // Empty-string overrides come from unset flag bindings; drop them.
    for (auto* f : {&gen_flags, &pre_flags, &eval_flags, &diag_flags, &attn_flags})
        for (auto it = f->overrides.begin(); it != f->overrides.end();)
            it = it->second.empty() ? f->overrides.erase(it) : std::next(it);

    try {
        if (gen->parsed())
            return cmd_gen(gen_flags, classes, per_class, points, noise, off_files,
                           test_fraction);
        if (pre->parsed()) return cmd_pretrain(pre_flags, resume);
        if (evalc->parsed()) return cmd_eval(eval_flags, eval_ckpt);
        if (diag->parsed()) return cmd_diagnose(diag_flags, diag_ckpt);
        if (attn->parsed()) return cmd_attn(attn_flags, attn_ckpt, cloud_index);
    } catch (const ParameterError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitUsage;
    } catch (const NumericError& e) {
        std::cerr << "numeric failure: " << e.what() << "\n";
        return kExitNumeric;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitData;
    }
    return 0;
}
