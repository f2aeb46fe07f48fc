#pragma once

#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "dcglr/backbone.hpp"
#include "dcglr/geometry.hpp"

namespace dcglr::train {

struct TrainConfig {
    geom::CropConfig crops;
    double tau_teacher = 0.04;
    double tau_student = 0.1;
    double center_rate = 0.9;     // q
    double momentum_start = 0.996;  // lambda_0
    double weight_global = 1.0;   // omega_g
    double weight_local = 1.0;    // omega_l
    int epochs = 100;
    int batch_size = 16;
    double base_lr = 5e-4;
    int warmup_epochs = 10;
    double weight_decay = 0.04;
    bool centering = true;  // frozen c = 0 when off (collapse-study switch)
    int threads = 1;
    uint64_t seed = 1;
    int checkpoint_every_epochs = 10;

    void validate() const;
};

struct AdamMoments {
    std::map<std::string, Tensor> m;
    std::map<std::string, Tensor> v;
    long long step = 0;
};

struct TrainState {
    nn::ModelParams teacher;
    nn::ModelParams student;
    Tensor center;  // K, zeros at init
    AdamMoments moments;
    long long step = 0;
    int epoch = 0;
    long long skipped_samples = 0;
};

struct StepMetrics {
    long long step = 0;
    int epoch = 0;
    double loss_global = 0.0;
    double loss_local = 0.0;
    double loss = 0.0;
    double lr = 0.0;
    double lambda = 0.0;
    double center_norm = 0.0;
    double wall_ms = 0.0;
};

// Centering + sharpening: softmax((o - c) / tau) per teacher global output.
// Pure tensor math; outputs are detached by construction.
std::vector<Tensor> teacher_targets(const std::vector<Tensor>& global_logits,
                                    const Tensor& center, double tau_teacher);

// Center EMA: c' = q c + (1-q) mean(batch logits).
Tensor update_center(const Tensor& center, const std::vector<Tensor>& batch_teacher_logits,
                     double q);

// Loss terms on probability vectors (plain tensors, used by tests/oracles).
double cross_entropy_value(const Tensor& p, const Tensor& q);
double loss_global_value(const std::vector<Tensor>& teacher_targets,
                         const std::vector<Tensor>& student_global_probs);
double loss_local_value(const std::vector<Tensor>& teacher_targets,
                        const std::vector<Tensor>& student_local_probs);
double total_loss_value(double loss_g, double loss_l, double w_g, double w_l);

// Teacher EMA: theta_t = lambda theta_t + (1-lambda) theta_s, every array.
void ema_update(nn::ModelParams& teacher, const nn::ModelParams& student, double lambda);

// Cosine ramp lambda_0 -> 1 over training.
double momentum_schedule(long long step, long long total_steps, double lambda_0);

// Linear warmup then cosine decay to zero.
double lr_schedule(long long step, long long total_steps, long long warmup_steps,
                   double base_lr);

// Decoupled weight decay, beta = (0.9, 0.999), eps = 1e-8.
void adamw_step(nn::ModelParams& params, const std::map<std::string, Tensor>& grads,
                AdamMoments& moments, double lr, double weight_decay);

StepMetrics train_step(const std::vector<geom::PointCloud>& batch, TrainState& state,
                       const TrainConfig& config, long long total_steps);

using MetricsSink = std::function<void(const StepMetrics&)>;
using CheckpointSink = std::function<void(const TrainState&, int epoch)>;
using StopFlag = std::function<bool()>;

TrainState init_train_state(const nn::BackboneConfig& backbone, const TrainConfig& config);

// Epochs x steps of train_step over a fixed deterministic batch order.
// Resumable: pass a state restored from checkpoint and its recorded epoch.
void pretrain(const std::vector<geom::PointCloud>& dataset, TrainState& state,
              const TrainConfig& config, const MetricsSink& on_metrics,
              const CheckpointSink& on_checkpoint, const StopFlag& should_stop = nullptr);

// Training checkpoint = both networks + center + moments + counters.
void save_train_state(const std::string& path, const TrainState& state);
TrainState load_train_state(const std::string& path);

std::string metrics_json_line(const StepMetrics& m);

}  // namespace dcglr::train
