#include "dcglr/config.hpp"

#include <fstream>
#include <functional>
#include <sstream>

#include "dcglr/error.hpp"

namespace dcglr::cfg {

namespace {

std::string trim(const std::string& s) {
    const size_t a = s.find_first_not_of(" \t\r");
    if (a == std::string::npos) return "";
    const size_t b = s.find_last_not_of(" \t\r");
    return s.substr(a, b - a + 1);
}

using Setter = std::function<void(RunConfig&, const std::string&)>;

int to_int(const std::string& v) { return std::stoi(v); }
double to_double(const std::string& v) { return std::stod(v); }
bool to_bool(const std::string& v) {
    if (v == "true" || v == "1" || v == "yes") return true;
    if (v == "false" || v == "0" || v == "no") return false;
    throw ParameterError("config: expected a boolean, got '" + v + "'");
}

const std::map<std::string, Setter>& setters() {
    static const std::map<std::string, Setter> table = {
        {"model.k_patch", [](RunConfig& c, const std::string& v) { c.backbone.k_patch = to_int(v); }},
        {"model.dim", [](RunConfig& c, const std::string& v) { c.backbone.dim = to_int(v); }},
        {"model.layers", [](RunConfig& c, const std::string& v) { c.backbone.layers = to_int(v); }},
        {"model.heads", [](RunConfig& c, const std::string& v) { c.backbone.heads = to_int(v); }},
        {"model.mlp_hidden", [](RunConfig& c, const std::string& v) { c.backbone.mlp_hidden = to_int(v); }},
        {"model.proj_hidden", [](RunConfig& c, const std::string& v) { c.backbone.proj_hidden = to_int(v); }},
        {"model.proj_out", [](RunConfig& c, const std::string& v) { c.backbone.proj_out = to_int(v); }},
        {"model.append_centroid", [](RunConfig& c, const std::string& v) { c.backbone.append_centroid = to_bool(v); }},
        {"train.num_global", [](RunConfig& c, const std::string& v) { c.training.crops.num_global = to_int(v); }},
        {"train.num_local", [](RunConfig& c, const std::string& v) { c.training.crops.num_local = to_int(v); }},
        {"train.num_resolution", [](RunConfig& c, const std::string& v) { c.training.crops.num_resolution = to_int(v); }},
        {"train.r_g1", [](RunConfig& c, const std::string& v) { c.training.crops.r_g1 = to_double(v); }},
        {"train.r_g2", [](RunConfig& c, const std::string& v) { c.training.crops.r_g2 = to_double(v); }},
        {"train.r_l1", [](RunConfig& c, const std::string& v) { c.training.crops.r_l1 = to_double(v); }},
        {"train.r_l2", [](RunConfig& c, const std::string& v) { c.training.crops.r_l2 = to_double(v); }},
        {"train.global_resample", [](RunConfig& c, const std::string& v) { c.training.crops.global_resample = to_int(v); }},
        {"train.local_resample", [](RunConfig& c, const std::string& v) { c.training.crops.local_resample = to_int(v); }},
        {"train.tau_teacher", [](RunConfig& c, const std::string& v) { c.training.tau_teacher = to_double(v); }},
        {"train.tau_student", [](RunConfig& c, const std::string& v) { c.training.tau_student = to_double(v); }},
        {"train.center_rate", [](RunConfig& c, const std::string& v) { c.training.center_rate = to_double(v); }},
        {"train.momentum_start", [](RunConfig& c, const std::string& v) { c.training.momentum_start = to_double(v); }},
        {"train.weight_global", [](RunConfig& c, const std::string& v) { c.training.weight_global = to_double(v); }},
        {"train.weight_local", [](RunConfig& c, const std::string& v) { c.training.weight_local = to_double(v); }},
        {"train.epochs", [](RunConfig& c, const std::string& v) { c.training.epochs = to_int(v); }},
        {"train.batch_size", [](RunConfig& c, const std::string& v) { c.training.batch_size = to_int(v); }},
        {"train.base_lr", [](RunConfig& c, const std::string& v) { c.training.base_lr = to_double(v); }},
        {"train.warmup_epochs", [](RunConfig& c, const std::string& v) { c.training.warmup_epochs = to_int(v); }},
        {"train.weight_decay", [](RunConfig& c, const std::string& v) { c.training.weight_decay = to_double(v); }},
        {"train.centering", [](RunConfig& c, const std::string& v) { c.training.centering = to_bool(v); }},
        {"train.threads", [](RunConfig& c, const std::string& v) { c.training.threads = to_int(v); }},
        {"train.checkpoint_every_epochs", [](RunConfig& c, const std::string& v) { c.training.checkpoint_every_epochs = to_int(v); }},
        {"data.dataset", [](RunConfig& c, const std::string& v) { c.dataset_path = v; }},
        {"data.manifest", [](RunConfig& c, const std::string& v) { c.manifest_path = v; }},
        {"run.out_dir", [](RunConfig& c, const std::string& v) { c.out_dir = v; }},
        {"run.seed", [](RunConfig& c, const std::string& v) { c.seed = std::stoull(v); }},
        {"eval.probe_reg", [](RunConfig& c, const std::string& v) { c.probe_reg = to_double(v); }},
        {"eval.probe_epochs", [](RunConfig& c, const std::string& v) { c.probe_epochs = to_int(v); }},
        {"eval.spectrum_threshold", [](RunConfig& c, const std::string& v) { c.spectrum_threshold = to_double(v); }},
        {"eval.attention_layer", [](RunConfig& c, const std::string& v) { c.attention_layer = to_int(v); }},
    };
    return table;
}

}  // namespace

std::map<std::string, std::string> parse_config_text(const std::string& text) {
    std::map<std::string, std::string> keys;
    std::istringstream in(text);
    std::string line, section;
    int line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        const size_t h = line.find('#');
        if (h != std::string::npos) line = line.substr(0, h);
        line = trim(line);
        if (line.empty()) continue;
        if (line.front() == '[') {
            if (line.back() != ']') throw ParseError("unterminated section header", line_no);
            section = trim(line.substr(1, line.size() - 2));
            continue;
        }
        const size_t eq = line.find('=');
        if (eq == std::string::npos) throw ParseError("expected key = value", line_no);
        const std::string key = trim(line.substr(0, eq));
        const std::string value = trim(line.substr(eq + 1));
        if (key.empty()) throw ParseError("empty key", line_no);
        const std::string full = section.empty() ? key : section + "." + key;
        if (keys.count(full)) throw ParseError("duplicate key '" + full + "'", line_no);
        keys[full] = value;
    }
    return keys;
}

void apply_config(RunConfig& config, const std::map<std::string, std::string>& keys) {
    const auto& table = setters();
    for (const auto& [key, value] : keys) {
        auto it = table.find(key);
        if (it == table.end()) throw ParameterError("config: unknown key '" + key + "'");
        try {
            it->second(config, value);
        } catch (const std::invalid_argument&) {
            throw ParameterError("config: bad value for '" + key + "': '" + value + "'");
        }
    }
}

RunConfig load_config_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw DataError("cannot open config file: " + path);
    std::stringstream ss;
    ss << in.rdbuf();
    RunConfig config;
    apply_config(config, parse_config_text(ss.str()));
    config.training.seed = config.seed;
    return config;
}

std::string serialize_config(const RunConfig& c) {
    std::ostringstream out;
    out.precision(17);
    out << "[model]\n";
    out << "k_patch = " << c.backbone.k_patch << "\n";
    out << "dim = " << c.backbone.dim << "\n";
    out << "layers = " << c.backbone.layers << "\n";
    out << "heads = " << c.backbone.heads << "\n";
    out << "mlp_hidden = " << c.backbone.mlp_hidden << "\n";
    out << "proj_hidden = " << c.backbone.proj_hidden << "\n";
    out << "proj_out = " << c.backbone.proj_out << "\n";
    out << "append_centroid = " << (c.backbone.append_centroid ? "true" : "false") << "\n";
    out << "[train]\n";
    out << "num_global = " << c.training.crops.num_global << "\n";
    out << "num_local = " << c.training.crops.num_local << "\n";
    out << "num_resolution = " << c.training.crops.num_resolution << "\n";
    out << "r_g1 = " << c.training.crops.r_g1 << "\n";
    out << "r_g2 = " << c.training.crops.r_g2 << "\n";
    out << "r_l1 = " << c.training.crops.r_l1 << "\n";
    out << "r_l2 = " << c.training.crops.r_l2 << "\n";
    out << "global_resample = " << c.training.crops.global_resample << "\n";
    out << "local_resample = " << c.training.crops.local_resample << "\n";
    out << "tau_teacher = " << c.training.tau_teacher << "\n";
    out << "tau_student = " << c.training.tau_student << "\n";
    out << "center_rate = " << c.training.center_rate << "\n";
    out << "momentum_start = " << c.training.momentum_start << "\n";
    out << "weight_global = " << c.training.weight_global << "\n";
    out << "weight_local = " << c.training.weight_local << "\n";
    out << "epochs = " << c.training.epochs << "\n";
    out << "batch_size = " << c.training.batch_size << "\n";
    out << "base_lr = " << c.training.base_lr << "\n";
    out << "warmup_epochs = " << c.training.warmup_epochs << "\n";
    out << "weight_decay = " << c.training.weight_decay << "\n";
    out << "centering = " << (c.training.centering ? "true" : "false") << "\n";
    out << "threads = " << c.training.threads << "\n";
    out << "checkpoint_every_epochs = " << c.training.checkpoint_every_epochs << "\n";
    out << "[data]\n";
    out << "dataset = " << c.dataset_path << "\n";
    out << "manifest = " << c.manifest_path << "\n";
    out << "[run]\n";
    out << "out_dir = " << c.out_dir << "\n";
    out << "seed = " << c.seed << "\n";
    out << "[eval]\n";
    out << "probe_reg = " << c.probe_reg << "\n";
    out << "probe_epochs = " << c.probe_epochs << "\n";
    out << "spectrum_threshold = " << c.spectrum_threshold << "\n";
    out << "attention_layer = " << c.attention_layer << "\n";
    return out.str();
}

}  // namespace dcglr::cfg
