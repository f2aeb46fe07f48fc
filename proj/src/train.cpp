#include "dcglr/train.hpp"

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <numeric>
#include <thread>

#include "dcglr/error.hpp"

namespace dcglr::train {

namespace {

constexpr double kPi = 3.141592653589793;

void parallel_for(int n, int threads, const std::function<void(int)>& body) {
    if (threads <= 1 || n <= 1) {
        for (int i = 0; i < n; ++i) body(i);
        return;
    }
    std::atomic<int> next{0};
    std::vector<std::thread> pool;
    const int workers = std::min(threads, n);
    pool.reserve(workers);
    for (int w = 0; w < workers; ++w)
        pool.emplace_back([&] {
            for (int i = next.fetch_add(1); i < n; i = next.fetch_add(1)) body(i);
        });
    for (auto& th : pool) th.join();
}

}  // namespace

void TrainConfig::validate() const {
    if (!(tau_teacher > 0.0 && tau_student > 0.0))
        throw ParameterError("train config: temperatures must be positive");
    if (!(center_rate > 0.0 && center_rate < 1.0))
        throw ParameterError("train config: center rate q must be in (0,1)");
    if (!(momentum_start >= 0.0 && momentum_start < 1.0))
        throw ParameterError("train config: momentum_start must be in [0,1)");
    if (weight_global < 0.0 || weight_local < 0.0)
        throw ParameterError("train config: loss weights must be nonnegative");
    if (epochs < 1 || batch_size < 1)
        throw ParameterError("train config: epochs and batch_size must be positive");
}

std::vector<Tensor> teacher_targets(const std::vector<Tensor>& global_logits,
                                    const Tensor& center, double tau_teacher) {
    if (!(tau_teacher > 0.0)) throw ParameterError("teacher_targets: temperature must be positive");
    std::vector<Tensor> out;
    out.reserve(global_logits.size());
    for (const Tensor& o : global_logits) {
        if (o.numel() != center.numel())
            throw DimensionError("teacher_targets: center length mismatch");
        Tensor t(o.shape());
        double mx = -1e300;
        for (long long i = 0; i < o.numel(); ++i) {
            t[i] = (o[i] - center[i]) / tau_teacher;
            mx = std::max(mx, t[i]);
        }
        double z = 0.0;
        for (long long i = 0; i < t.numel(); ++i) {
            t[i] = std::exp(t[i] - mx);
            z += t[i];
        }
        for (long long i = 0; i < t.numel(); ++i) t[i] /= z;
        out.push_back(std::move(t));
    }
    return out;
}

Tensor update_center(const Tensor& center, const std::vector<Tensor>& batch_logits, double q) {
    if (batch_logits.empty()) throw ParameterError("update_center: empty batch");
    Tensor mean = Tensor::zeros(center.shape());
    for (const Tensor& o : batch_logits)
        for (long long i = 0; i < mean.numel(); ++i) mean[i] += o[i];
    for (long long i = 0; i < mean.numel(); ++i) mean[i] /= static_cast<double>(batch_logits.size());
    Tensor out(center.shape());
    for (long long i = 0; i < out.numel(); ++i) out[i] = q * center[i] + (1.0 - q) * mean[i];
    return out;
}

double cross_entropy_value(const Tensor& p, const Tensor& q) {
    if (p.numel() != q.numel()) throw DimensionError("cross_entropy: length mismatch");
    double loss = 0.0;
    for (long long i = 0; i < p.numel(); ++i)
        loss -= p[i] * std::log(std::max(q[i], ad::kLogClamp));
    return loss;
}

double loss_global_value(const std::vector<Tensor>& targets,
                         const std::vector<Tensor>& student_probs) {
    const int count = static_cast<int>(targets.size());
    if (count < 2) throw ParameterError("loss_global: at least two global crops required");
    if (student_probs.size() != targets.size())
        throw DimensionError("loss_global: teacher/student count mismatch");
    double sum = 0.0;
    for (int i = 0; i < count; ++i)
        for (int j = 0; j < count; ++j)
            if (j != i) sum += cross_entropy_value(targets[i], student_probs[j]);
    return sum / (static_cast<double>(count) * (count - 1));
}

double loss_local_value(const std::vector<Tensor>& targets,
                        const std::vector<Tensor>& student_probs) {
    if (targets.empty() || student_probs.empty())
        throw ParameterError("loss_local: empty inputs");
    double sum = 0.0;
    for (const Tensor& t : targets)
        for (const Tensor& s : student_probs) sum += cross_entropy_value(t, s);
    return sum / (static_cast<double>(targets.size()) * static_cast<double>(student_probs.size()));
}

double total_loss_value(double loss_g, double loss_l, double w_g, double w_l) {
    return w_g * loss_g + w_l * loss_l;
}

void ema_update(nn::ModelParams& teacher, const nn::ModelParams& student, double lambda) {
    for (auto& [name, t] : teacher.arrays) {
        const Tensor& s = student.arrays.at(name);
        if (!t.same_shape(s)) throw DimensionError("ema_update: shape mismatch at " + name);
        for (long long i = 0; i < t.numel(); ++i)
            t[i] = lambda * t[i] + (1.0 - lambda) * s[i];
    }
}

double momentum_schedule(long long step, long long total_steps, double lambda_0) {
    const double u = total_steps > 0 ? static_cast<double>(step) / static_cast<double>(total_steps) : 1.0;
    return 1.0 - (1.0 - lambda_0) * (std::cos(kPi * u) + 1.0) / 2.0;
}

double lr_schedule(long long step, long long total_steps, long long warmup_steps,
                   double base_lr) {
    if (warmup_steps > 0 && step < warmup_steps)
        return base_lr * static_cast<double>(step) / static_cast<double>(warmup_steps);
    const long long rest = total_steps - warmup_steps;
    if (rest <= 0) return base_lr;
    const double u = static_cast<double>(step - warmup_steps) / static_cast<double>(rest);
    return base_lr * (std::cos(kPi * std::min(u, 1.0)) + 1.0) / 2.0;
}

void adamw_step(nn::ModelParams& params, const std::map<std::string, Tensor>& grads,
                AdamMoments& moments, double lr, double weight_decay) {
    static constexpr double kBeta1 = 0.9;
    static constexpr double kBeta2 = 0.999;
    static constexpr double kEps = 1e-8;
    moments.step += 1;
    const double bc1 = 1.0 - std::pow(kBeta1, static_cast<double>(moments.step));
    const double bc2 = 1.0 - std::pow(kBeta2, static_cast<double>(moments.step));
    for (auto& [name, p] : params.arrays) {
        auto git = grads.find(name);
        if (git == grads.end()) continue;
        const Tensor& g = git->second;
        Tensor& m = moments.m.try_emplace(name, Tensor::zeros(p.shape())).first->second;
        Tensor& v = moments.v.try_emplace(name, Tensor::zeros(p.shape())).first->second;
        for (long long i = 0; i < p.numel(); ++i) {
            m[i] = kBeta1 * m[i] + (1.0 - kBeta1) * g[i];
            v[i] = kBeta2 * v[i] + (1.0 - kBeta2) * g[i] * g[i];
            const double mhat = m[i] / bc1;
            const double vhat = v[i] / bc2;
            p[i] -= lr * (mhat / (std::sqrt(vhat) + kEps) + weight_decay * p[i]);
        }
    }
}

TrainState init_train_state(const nn::BackboneConfig& backbone, const TrainConfig& config) {
    config.validate();
    RngStream rng(config.seed);
    TrainState state;
    state.student = nn::init_params(backbone, rng);
    state.teacher = state.student;  // exact copy of the random student init
    state.center = Tensor::zeros({backbone.proj_out});
    return state;
}

namespace {

struct CloudWork {
    bool ok = false;
    geom::CropSet crops;
    std::vector<Tensor> teacher_logits;  // per global
    std::vector<Tensor> targets;
};

struct CropGrad {
    std::map<std::string, Tensor> grads;
    double weighted_loss = 0.0;
};

}  // namespace

StepMetrics train_step(const std::vector<geom::PointCloud>& batch, TrainState& state,
                       const TrainConfig& config, long long total_steps) {
    const auto t0 = std::chrono::steady_clock::now();
    config.validate();
    const int bsz = static_cast<int>(batch.size());
    if (bsz < 1) throw ParameterError("train_step: empty batch");
    const int n_global = config.crops.num_global;
    const int n_local = config.crops.num_local + config.crops.num_resolution;

    RngStream base(config.seed);
    RngStream step_stream = base.fork(static_cast<uint64_t>(state.step) + 0x10000);

    // Phase 1: crop sets + teacher forwards (teacher never touches a live tape
    // that reaches the loss; its outputs are plain detached tensors).
    std::vector<CloudWork> work(bsz);
    parallel_for(bsz, config.threads, [&](int b) {
        RngStream cloud_rng = step_stream.fork(static_cast<uint64_t>(b));
        CloudWork& w = work[b];
        try {
            w.crops = geom::make_crop_set(batch[b], config.crops, cloud_rng);
        } catch (const DataError&) {
            return;  // degenerate crop: skip sample
        }
        for (int i = 0; i < n_global; ++i) {
            RngStream fwd_rng = cloud_rng.fork(1000 + static_cast<uint64_t>(i));
            nn::PlainForward f = nn::forward_plain(w.crops.globals[i], state.teacher, fwd_rng);
            w.teacher_logits.push_back(std::move(f.logits));
        }
        w.ok = true;
    });

    Tensor effective_center =
        config.centering ? state.center : Tensor::zeros(state.center.shape());
    int n_ok = 0;
    for (auto& w : work)
        if (w.ok) {
            w.targets = teacher_targets(w.teacher_logits, effective_center, config.tau_teacher);
            ++n_ok;
        }
    if (n_ok == 0) throw DataError("train_step: every sample in the batch was degenerate");

    // Phase 2: one tape per student crop. The total loss is a sum of terms
    // each touching a single student crop, so per-crop backward passes can be
    // accumulated independently.
    const double inv_batch = 1.0 / static_cast<double>(n_ok);
    const double norm_g =
        n_global >= 2 ? 1.0 / (static_cast<double>(n_global) * (n_global - 1)) : 0.0;
    const double norm_l = 1.0 / (static_cast<double>(n_global) * static_cast<double>(n_local));

    const int crops_per_cloud = n_global + n_local;
    std::vector<CropGrad> results(static_cast<size_t>(bsz) * crops_per_cloud);
    parallel_for(bsz * crops_per_cloud, config.threads, [&](int task) {
        const int b = task / crops_per_cloud;
        const int c = task % crops_per_cloud;
        const CloudWork& w = work[b];
        if (!w.ok) return;
        const bool is_global = c < n_global;
        const geom::PointCloud& cloud =
            is_global ? w.crops.globals[c] : w.crops.locals[c - n_global];
        RngStream cloud_rng = step_stream.fork(static_cast<uint64_t>(b));
        RngStream fwd_rng = cloud_rng.fork(2000 + static_cast<uint64_t>(c));

        ad::Tape tape;
        nn::ParamVars pv = nn::bind_params(tape, state.student);
        nn::ForwardResult fr = nn::forward(tape, cloud, pv, state.student.config, fwd_rng);
        ad::Var logits = ad::reshape(tape, fr.logits, {state.student.config.proj_out});
        ad::Var probs = ad::softmax(tape, logits, config.tau_student);

        // Weighted partial loss for this crop across all teacher targets.
        ad::Var loss;
        for (int i = 0; i < n_global; ++i) {
            if (is_global && i == c) continue;  // global loss skips same-index pairs
            const double coeff = is_global ? config.weight_global * norm_g * inv_batch
                                           : config.weight_local * norm_l * inv_batch;
            ad::Var term =
                ad::scalar_multiply(tape, ad::cross_entropy(tape, w.targets[i], probs), coeff);
            loss = loss.valid() ? ad::add(tape, loss, term) : term;
        }
        CropGrad& out = results[task];
        if (!loss.valid()) return;
        out.weighted_loss = tape.value(loss)[0];
        tape.backward(loss);
        for (const auto& [name, var] : pv) out.grads[name] = tape.grad(var);
    });

    // Serial reduction in a fixed order keeps runs bit-reproducible.
    std::map<std::string, Tensor> grads;
    for (const auto& [name, t] : state.student.arrays) grads[name] = Tensor::zeros(t.shape());
    double loss_g_sum = 0.0, loss_l_sum = 0.0;
    for (int b = 0; b < bsz; ++b) {
        const CloudWork& w = work[b];
        if (!w.ok) continue;
        for (int c = 0; c < crops_per_cloud; ++c) {
            const CropGrad& r = results[static_cast<size_t>(b) * crops_per_cloud + c];
            for (auto& [name, g] : grads) {
                auto it = r.grads.find(name);
                if (it == r.grads.end()) continue;
                for (long long i = 0; i < g.numel(); ++i) g[i] += it->second[i];
            }
        }
    }

    // Recover unweighted loss terms from the weighted partials.
    for (int b = 0; b < bsz; ++b) {
        if (!work[b].ok) continue;
        for (int c = 0; c < crops_per_cloud; ++c) {
            const CropGrad& r = results[static_cast<size_t>(b) * crops_per_cloud + c];
            if (c < n_global)
                loss_g_sum += config.weight_global > 0.0
                                  ? r.weighted_loss / (config.weight_global * inv_batch)
                                  : 0.0;
            else
                loss_l_sum += config.weight_local > 0.0
                                  ? r.weighted_loss / (config.weight_local * inv_batch)
                                  : 0.0;
        }
    }
    const double loss_g = loss_g_sum * inv_batch;
    const double loss_l = loss_l_sum * inv_batch;
    const double loss = total_loss_value(loss_g, loss_l, config.weight_global, config.weight_local);
    if (!std::isfinite(loss)) throw NumericError("train_step: non-finite loss");

    const long long warmup_steps =
        total_steps * config.warmup_epochs / std::max(config.epochs, 1);
    const double lr = lr_schedule(state.step, total_steps, warmup_steps, config.base_lr);
    const double lambda = momentum_schedule(state.step, total_steps, config.momentum_start);

    adamw_step(state.student, grads, state.moments, lr, config.weight_decay);
    ema_update(state.teacher, state.student, lambda);

    if (config.centering) {
        std::vector<Tensor> all_teacher_logits;
        for (const auto& w : work)
            for (const Tensor& o : w.teacher_logits) all_teacher_logits.push_back(o);
        if (!all_teacher_logits.empty())
            state.center = update_center(state.center, all_teacher_logits, config.center_rate);
    }
    for (const auto& w : work)
        if (!w.ok) ++state.skipped_samples;

    StepMetrics m;
    m.step = state.step;
    m.epoch = state.epoch;
    m.loss_global = loss_g;
    m.loss_local = loss_l;
    m.loss = loss;
    m.lr = lr;
    m.lambda = lambda;
    double cn = 0.0;
    for (long long i = 0; i < state.center.numel(); ++i) cn += state.center[i] * state.center[i];
    m.center_norm = std::sqrt(cn);
    m.wall_ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0)
                    .count();
    state.step += 1;
    return m;
}

void pretrain(const std::vector<geom::PointCloud>& dataset, TrainState& state,
              const TrainConfig& config, const MetricsSink& on_metrics,
              const CheckpointSink& on_checkpoint, const StopFlag& should_stop) {
    config.validate();
    if (dataset.empty()) throw DataError("pretrain: empty dataset");
    const int n = static_cast<int>(dataset.size());
    const long long steps_per_epoch = (n + config.batch_size - 1) / config.batch_size;
    const long long total_steps = steps_per_epoch * config.epochs;
    RngStream base(config.seed);

    for (int epoch = state.epoch; epoch < config.epochs; ++epoch) {
        state.epoch = epoch;
        // Deterministic per-epoch shuffle.
        std::vector<int> order(n);
        std::iota(order.begin(), order.end(), 0);
        RngStream shuffle_rng = base.fork(0x20000 + static_cast<uint64_t>(epoch));
        for (int i = n - 1; i > 0; --i) {
            const int j = static_cast<int>(shuffle_rng.uniform_int(i + 1));
            std::swap(order[i], order[j]);
        }
        // state.step is always epoch * steps_per_epoch + s, so a state saved
        // mid-epoch resumes at the exact step it stopped after.
        long long s0 = state.step - static_cast<long long>(epoch) * steps_per_epoch;
        if (s0 < 0) s0 = 0;
        for (long long s = s0; s < steps_per_epoch; ++s) {
            std::vector<geom::PointCloud> batch;
            for (int k = 0; k < config.batch_size; ++k) {
                const long long idx = s * config.batch_size + k;
                if (idx >= n) break;
                batch.push_back(dataset[order[idx]]);
            }
            StepMetrics m = train_step(batch, state, config, total_steps);
            if (on_metrics) on_metrics(m);
            if (should_stop && should_stop()) {
                state.epoch = epoch;
                if (on_checkpoint) on_checkpoint(state, epoch);
                return;
            }
        }
        state.epoch = epoch + 1;
        const bool last = epoch + 1 == config.epochs;
        if (on_checkpoint &&
            (last || (config.checkpoint_every_epochs > 0 &&
                      (epoch + 1) % config.checkpoint_every_epochs == 0)))
            on_checkpoint(state, epoch + 1);
    }
}

void save_train_state(const std::string& path, const TrainState& state) {
    nn::ModelParams bundle;
    bundle.config = state.student.config;
    for (const auto& [name, t] : state.teacher.arrays) bundle.arrays["teacher." + name] = t;
    for (const auto& [name, t] : state.student.arrays) bundle.arrays["student." + name] = t;
    for (const auto& [name, t] : state.moments.m) bundle.arrays["opt.m." + name] = t;
    for (const auto& [name, t] : state.moments.v) bundle.arrays["opt.v." + name] = t;
    bundle.arrays["center"] = state.center;
    bundle.arrays["counters"] =
        Tensor({4}, {static_cast<double>(state.step), static_cast<double>(state.epoch),
                     static_cast<double>(state.moments.step),
                     static_cast<double>(state.skipped_samples)});
    nn::save_params_file(path, bundle);
}

TrainState load_train_state(const std::string& path) {
    nn::ModelParams bundle = nn::load_params_file(path);
    TrainState state;
    state.teacher.config = bundle.config;
    state.student.config = bundle.config;
    for (const auto& [name, t] : bundle.arrays) {
        if (name.rfind("teacher.", 0) == 0)
            state.teacher.arrays[name.substr(8)] = t;
        else if (name.rfind("student.", 0) == 0)
            state.student.arrays[name.substr(8)] = t;
        else if (name.rfind("opt.m.", 0) == 0)
            state.moments.m[name.substr(6)] = t;
        else if (name.rfind("opt.v.", 0) == 0)
            state.moments.v[name.substr(6)] = t;
        else if (name == "center")
            state.center = t;
        else if (name == "counters") {
            state.step = static_cast<long long>(t[0]);
            state.epoch = static_cast<int>(t[1]);
            state.moments.step = static_cast<long long>(t[2]);
            state.skipped_samples = static_cast<long long>(t[3]);
        }
    }
    if (state.teacher.arrays.empty() || state.student.arrays.empty())
        throw DataError("train checkpoint: missing network arrays");
    return state;
}

std::string metrics_json_line(const StepMetrics& m) {
    char buf[512];
    std::snprintf(buf, sizeof(buf),
                  "{\"step\":%lld,\"epoch\":%d,\"loss_g\":%.17g,\"loss_l\":%.17g,"
                  "\"loss\":%.17g,\"lr\":%.17g,\"lambda\":%.17g,\"center_norm\":%.17g,"
                  "\"wall_ms\":%.3f}",
                  m.step, m.epoch, m.loss_global, m.loss_local, m.loss, m.lr, m.lambda,
                  m.center_norm, m.wall_ms);
    return buf;
}

}  // namespace dcglr::train
