#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <numeric>
#include <sstream>

#include "dcglr/data.hpp"
#include "dcglr/error.hpp"
#include "dcglr/train.hpp"

using namespace dcglr;
using namespace dcglr::train;

namespace {

Tensor prob(std::vector<double> v) {
    const double s = std::accumulate(v.begin(), v.end(), 0.0);
    for (double& x : v) x /= s;
    return Tensor({1, static_cast<int>(v.size())}, v);
}

Tensor row(std::vector<double> v) {
    const int n = static_cast<int>(v.size());
    return Tensor({1, n}, std::move(v));
}

nn::BackboneConfig tiny_backbone() {
    nn::BackboneConfig b;
    b.k_patch = 8;
    b.dim = 16;
    b.layers = 1;
    b.heads = 2;
    b.mlp_hidden = 24;
    b.proj_hidden = 16;
    b.proj_out = 8;
    return b;
}

TrainConfig tiny_train(uint64_t seed = 1) {
    TrainConfig t;
    t.crops.num_global = 2;
    t.crops.num_local = 2;
    t.crops.num_resolution = 1;
    t.crops.global_resample = 48;
    t.crops.local_resample = 24;
    t.crops.min_crop_points = 8;
    t.epochs = 2;
    t.batch_size = 2;
    t.warmup_epochs = 1;
    t.seed = seed;
    return t;
}

std::vector<geom::PointCloud> tiny_dataset(int n_clouds, int n_points, uint64_t seed) {
    std::vector<geom::PointCloud> out;
    RngStream base(seed);
    for (int i = 0; i < n_clouds; ++i) {
        RngStream r = base.fork(i);
        out.push_back(data::synth_cloud(data::kSynthClasses[i % 6], n_points, 0.01, r));
    }
    return out;
}

}  // namespace

TEST_CASE("cross_entropy_value matches a naive sum") {
    Tensor p = prob({1, 2, 3, 4});
    Tensor q = prob({4, 3, 2, 1});
    double expected = 0.0;
    for (int i = 0; i < 4; ++i) expected -= p[i] * std::log(q[i]);
    CHECK(cross_entropy_value(p, q) == doctest::Approx(expected).epsilon(1e-12));
}

TEST_CASE("teacher targets") {
    SUBCASE("zero center, equal logits give uniform targets") {
        std::vector<Tensor> t = teacher_targets({row({2.0, 2.0, 2.0})}, Tensor::zeros({1, 3}), 0.04);
        for (int i = 0; i < 3; ++i) CHECK(t[0][i] == doctest::Approx(1.0 / 3).epsilon(1e-12));
    }
    SUBCASE("centering subtracts before sharpening") {
        Tensor c = row({1.0, -1.0});
        std::vector<Tensor> t = teacher_targets({row({1.0, -1.0})}, c, 0.5);
        CHECK(t[0][0] == doctest::Approx(0.5).epsilon(1e-12));
        CHECK(t[0][1] == doctest::Approx(0.5).epsilon(1e-12));
    }
    SUBCASE("sharpening: smaller tau concentrates mass") {
        Tensor o = row({1.0, 0.0});
        double soft = teacher_targets({o}, Tensor::zeros({1, 2}), 1.0)[0][0];
        double sharp = teacher_targets({o}, Tensor::zeros({1, 2}), 0.04)[0][0];
        CHECK(sharp > soft);
        CHECK(sharp > 0.999999);
        // Closed form at tau = 1: sigmoid(1).
        CHECK(soft == doctest::Approx(1.0 / (1.0 + std::exp(-1.0))).epsilon(1e-12));
    }
    SUBCASE("shift invariance of (o - c)") {
        Tensor o = row({0.3, -0.7, 1.1});
        Tensor shifted = row({0.3 + 5.0, -0.7 + 5.0, 1.1 + 5.0});
        std::vector<Tensor> a = teacher_targets({o}, Tensor::zeros({1, 3}), 0.04);
        std::vector<Tensor> b = teacher_targets({shifted}, Tensor::zeros({1, 3}), 0.04);
        for (int i = 0; i < 3; ++i) CHECK(a[0][i] == doctest::Approx(b[0][i]).epsilon(1e-12));
    }
}

TEST_CASE("center update") {
    Tensor c = row({1.0, 2.0});
    std::vector<Tensor> batch = {row({3.0, 6.0}), row({5.0, 10.0})};  // mean (4, 8)
    SUBCASE("q = 1 keeps the center") {
        Tensor out = update_center(c, batch, 1.0);
        CHECK(out[0] == 1.0);
        CHECK(out[1] == 2.0);
    }
    SUBCASE("q = 0 replaces it with the batch mean") {
        Tensor out = update_center(c, batch, 0.0);
        CHECK(out[0] == doctest::Approx(4.0).epsilon(1e-12));
        CHECK(out[1] == doctest::Approx(8.0).epsilon(1e-12));
    }
    SUBCASE("q = 0.9 blends") {
        Tensor out = update_center(c, batch, 0.9);
        CHECK(out[0] == doctest::Approx(0.9 * 1.0 + 0.1 * 4.0).epsilon(1e-12));
        CHECK(out[1] == doctest::Approx(0.9 * 2.0 + 0.1 * 8.0).epsilon(1e-12));
    }
}

TEST_CASE("global loss averages cross pairs only") {
    // I = 2: pairs (1,2) and (2,1), normalized by I(I-1) = 2.
    std::vector<Tensor> targets = {prob({1, 1}), prob({3, 1})};
    std::vector<Tensor> student = {prob({1, 3}), prob({1, 1})};
    const double expected =
        (cross_entropy_value(targets[0], student[1]) + cross_entropy_value(targets[1], student[0])) / 2.0;
    CHECK(loss_global_value(targets, student) == doctest::Approx(expected).epsilon(1e-12));

    SUBCASE("diagonal terms are excluded") {
        // Make the student's own view maximally wrong; the loss must not move.
        std::vector<Tensor> self_bad = {prob({1e-9, 1}), prob({1, 1e-9})};
        std::vector<Tensor> t2 = {prob({1, 0.5}), prob({0.5, 1})};
        double base = loss_global_value(t2, self_bad);
        // Recompute by explicit pair sum.
        double manual = (cross_entropy_value(t2[0], self_bad[1]) +
                         cross_entropy_value(t2[1], self_bad[0])) / 2.0;
        CHECK(base == doctest::Approx(manual).epsilon(1e-12));
    }
    SUBCASE("fewer than two globals is an error") {
        CHECK_THROWS_AS(loss_global_value({prob({1, 1})}, {prob({1, 1})}), ParameterError);
    }
}

TEST_CASE("local loss averages all teacher x local pairs") {
    std::vector<Tensor> targets = {prob({1, 2}), prob({2, 1})};
    std::vector<Tensor> locals = {prob({1, 1}), prob({1, 4}), prob({4, 1})};
    double expected = 0.0;
    for (const Tensor& t : targets)
        for (const Tensor& l : locals) expected += cross_entropy_value(t, l);
    expected /= 2.0 * 3.0;
    CHECK(loss_local_value(targets, locals) == doctest::Approx(expected).epsilon(1e-12));
}

TEST_CASE("uniform teacher over K classes yields ln K against any uniform student") {
    const int K = 64;
    std::vector<double> u(K, 1.0);
    std::vector<Tensor> t = {prob(u), prob(u)};
    std::vector<Tensor> s = {prob(u), prob(u)};
    CHECK(loss_global_value(t, s) == doctest::Approx(std::log(static_cast<double>(K))).epsilon(1e-12));
}

TEST_CASE("total loss weights") {
    CHECK(total_loss_value(2.0, 3.0, 1.0, 1.0) == doctest::Approx(5.0));
    CHECK(total_loss_value(2.0, 3.0, 0.5, 2.0) == doctest::Approx(1.0 + 6.0));
    CHECK(total_loss_value(2.0, 3.0, 0.0, 1.0) == doctest::Approx(3.0));
}

TEST_CASE("ema update") {
    nn::BackboneConfig b = tiny_backbone();
    RngStream r1(1), r2(2);
    nn::ModelParams teacher = nn::init_params(b, r1);
    nn::ModelParams student = nn::init_params(b, r2);
    nn::ModelParams orig_teacher = teacher;

    SUBCASE("lambda = 1 freezes the teacher") {
        ema_update(teacher, student, 1.0);
        for (const auto& [n, t] : teacher.arrays)
            for (long long i = 0; i < t.numel(); ++i) CHECK(t[i] == orig_teacher.arrays.at(n)[i]);
    }
    SUBCASE("lambda = 0 copies the student") {
        ema_update(teacher, student, 0.0);
        for (const auto& [n, t] : teacher.arrays)
            for (long long i = 0; i < t.numel(); ++i) CHECK(t[i] == student.arrays.at(n)[i]);
    }
    SUBCASE("lambda = 0.5 is the midpoint") {
        ema_update(teacher, student, 0.5);
        for (const auto& [n, t] : teacher.arrays)
            for (long long i = 0; i < t.numel(); ++i)
                CHECK(t[i] == doctest::Approx(0.5 * orig_teacher.arrays.at(n)[i] +
                                              0.5 * student.arrays.at(n)[i]).epsilon(1e-12));
    }
}

TEST_CASE("momentum schedule endpoints and midpoint") {
    CHECK(momentum_schedule(0, 100, 0.996) == doctest::Approx(0.996).epsilon(1e-12));
    CHECK(momentum_schedule(100, 100, 0.996) == doctest::Approx(1.0).epsilon(1e-12));
    CHECK(momentum_schedule(50, 100, 0.996) == doctest::Approx(0.998).epsilon(1e-12));
    // Monotone non-decreasing.
    double prev = 0.0;
    for (int s = 0; s <= 100; ++s) {
        double lam = momentum_schedule(s, 100, 0.996);
        CHECK(lam >= prev);
        prev = lam;
    }
}

TEST_CASE("lr schedule: linear warmup then cosine to zero") {
    const long long total = 100, warm = 10;
    const double base = 5e-4;
    CHECK(lr_schedule(0, total, warm, base) == doctest::Approx(0.0));
    CHECK(lr_schedule(5, total, warm, base) == doctest::Approx(base * 0.5).epsilon(1e-12));
    CHECK(lr_schedule(warm, total, warm, base) == doctest::Approx(base).epsilon(1e-12));
    CHECK(lr_schedule(total, total, warm, base) == doctest::Approx(0.0).epsilon(1e-12));
    // Cosine midpoint of the decay phase.
    CHECK(lr_schedule(55, total, warm, base) == doctest::Approx(base * 0.5).epsilon(1e-12));
}

TEST_CASE("adamw step") {
    nn::BackboneConfig b = tiny_backbone();
    RngStream r(3);
    nn::ModelParams params = nn::init_params(b, r);
    nn::ModelParams before = params;

    std::map<std::string, Tensor> grads;
    for (const auto& [n, t] : params.arrays) grads.emplace(n, Tensor::zeros(t.shape()));

    SUBCASE("zero grads and zero decay leave parameters untouched") {
        AdamMoments mom;
        adamw_step(params, grads, mom, 1e-3, 0.0);
        for (const auto& [n, t] : params.arrays)
            for (long long i = 0; i < t.numel(); ++i) CHECK(t[i] == before.arrays.at(n)[i]);
        CHECK(mom.step == 1);
    }
    SUBCASE("first step with constant grad matches the closed form") {
        // With g constant: m_hat = g, v_hat = g^2, update = -lr * g/(|g|+eps).
        const double g = 0.25, lr = 1e-3;
        for (auto& [n, t] : grads)
            for (long long i = 0; i < t.numel(); ++i) t[i] = g;
        AdamMoments mom;
        adamw_step(params, grads, mom, lr, 0.0);
        const double expected_delta = -lr * g / (std::sqrt(g * g) + 1e-8);
        for (const auto& [n, t] : params.arrays)
            for (long long i = 0; i < t.numel(); ++i)
                CHECK(t[i] - before.arrays.at(n)[i] == doctest::Approx(expected_delta).epsilon(1e-9));
    }
    SUBCASE("weight decay is decoupled from the gradient") {
        // Zero grads + decay: pure multiplicative shrink theta -= lr * wd * theta.
        AdamMoments mom;
        const double lr = 1e-2, wd = 0.04;
        adamw_step(params, grads, mom, lr, wd);
        for (const auto& [n, t] : params.arrays)
            for (long long i = 0; i < t.numel(); ++i)
                CHECK(t[i] == doctest::Approx(before.arrays.at(n)[i] * (1.0 - lr * wd)).epsilon(1e-12));
    }
}

TEST_CASE("init_train_state: teacher starts as an exact copy of the student") {
    TrainConfig tc = tiny_train();
    TrainState st = init_train_state(tiny_backbone(), tc);
    REQUIRE(st.teacher.arrays.size() == st.student.arrays.size());
    for (const auto& [n, t] : st.teacher.arrays)
        for (long long i = 0; i < t.numel(); ++i) CHECK(t[i] == st.student.arrays.at(n)[i]);
    CHECK(st.center.numel() == tiny_backbone().proj_out);
    for (long long i = 0; i < st.center.numel(); ++i) CHECK(st.center[i] == 0.0);
}

TEST_CASE("train_step leaves the teacher off the gradient path") {
    // A step must move the teacher only through the EMA: after one step,
    // teacher = lambda * teacher_0 + (1 - lambda) * student_1 exactly.
    TrainConfig tc = tiny_train();
    TrainState st = init_train_state(tiny_backbone(), tc);
    nn::ModelParams teacher0 = st.teacher;
    std::vector<geom::PointCloud> ds = tiny_dataset(2, 96, 7);
    StepMetrics m = train_step(ds, st, tc, 100);
    for (const auto& [n, t] : st.teacher.arrays) {
        const Tensor& t0 = teacher0.arrays.at(n);
        const Tensor& s1 = st.student.arrays.at(n);
        for (long long i = 0; i < t.numel(); ++i)
            CHECK(t[i] == doctest::Approx(m.lambda * t0[i] + (1.0 - m.lambda) * s1[i]).epsilon(1e-12));
    }
    CHECK(std::isfinite(m.loss));
    CHECK(m.loss > 0.0);
}

TEST_CASE("train_step is bit-deterministic across thread counts") {
    std::vector<geom::PointCloud> ds = tiny_dataset(4, 96, 11);
    auto run = [&](int threads) {
        TrainConfig tc = tiny_train(5);
        tc.threads = threads;
        TrainState st = init_train_state(tiny_backbone(), tc);
        train_step(ds, st, tc, 100);
        train_step(ds, st, tc, 100);
        return st;
    };
    TrainState a = run(1);
    TrainState b = run(4);
    for (const auto& [n, t] : a.student.arrays) {
        const Tensor& o = b.student.arrays.at(n);
        for (long long i = 0; i < t.numel(); ++i) CHECK(t[i] == o[i]);
    }
    for (long long i = 0; i < a.center.numel(); ++i) CHECK(a.center[i] == b.center[i]);
}

TEST_CASE("repeated steps on one fixed crop set descend the loss") {
    // Freeze the objective: centering off, teacher momentum ~1, and the same
    // step index replayed so every iteration sees identical crops and targets.
    std::vector<geom::PointCloud> ds = tiny_dataset(2, 96, 13);
    TrainConfig tc = tiny_train(9);
    tc.base_lr = 1e-3;
    tc.warmup_epochs = 0;
    tc.centering = false;
    tc.momentum_start = 0.9999;
    TrainState st = init_train_state(tiny_backbone(), tc);
    double first = 0.0, last = 0.0;
    for (int s = 0; s < 50; ++s) {
        st.step = 0;  // replay the same crop draw
        StepMetrics m = train_step(ds, st, tc, 1000000);
        if (s == 0) first = m.loss;
        last = m.loss;
        REQUIRE(std::isfinite(m.loss));
    }
    CHECK(last < first);
}

TEST_CASE("centering off keeps the center at zero") {
    std::vector<geom::PointCloud> ds = tiny_dataset(2, 96, 17);
    TrainConfig tc = tiny_train();
    tc.centering = false;
    TrainState st = init_train_state(tiny_backbone(), tc);
    train_step(ds, st, tc, 100);
    for (long long i = 0; i < st.center.numel(); ++i) CHECK(st.center[i] == 0.0);
}

TEST_CASE("train state round-trips bit-exactly through a checkpoint") {
    std::vector<geom::PointCloud> ds = tiny_dataset(2, 96, 19);
    TrainConfig tc = tiny_train();
    TrainState st = init_train_state(tiny_backbone(), tc);
    train_step(ds, st, tc, 100);

    const std::string path = (std::filesystem::temp_directory_path() / "dcglr_state_test.dckp").string();
    save_train_state(path, st);
    TrainState loaded = load_train_state(path);
    std::filesystem::remove(path);

    CHECK(loaded.step == st.step);
    CHECK(loaded.epoch == st.epoch);
    CHECK(loaded.moments.step == st.moments.step);
    CHECK(loaded.skipped_samples == st.skipped_samples);
    for (const auto& [n, t] : st.student.arrays) {
        const Tensor& o = loaded.student.arrays.at(n);
        for (long long i = 0; i < t.numel(); ++i) CHECK(t[i] == o[i]);
    }
    for (const auto& [n, t] : st.teacher.arrays) {
        const Tensor& o = loaded.teacher.arrays.at(n);
        for (long long i = 0; i < t.numel(); ++i) CHECK(t[i] == o[i]);
    }
    for (const auto& [n, t] : st.moments.m) {
        const Tensor& o = loaded.moments.m.at(n);
        for (long long i = 0; i < t.numel(); ++i) CHECK(t[i] == o[i]);
    }
    for (long long i = 0; i < st.center.numel(); ++i) CHECK(loaded.center[i] == st.center[i]);
}

TEST_CASE("pretrain resume reproduces an uninterrupted run bit-exactly") {
    std::vector<geom::PointCloud> ds = tiny_dataset(4, 96, 21);
    nn::BackboneConfig b = tiny_backbone();

    auto collect = [](std::vector<StepMetrics>& sink) {
        return [&sink](const StepMetrics& m) { sink.push_back(m); };
    };

    TrainConfig tc = tiny_train(23);
    tc.epochs = 4;

    // Uninterrupted.
    TrainState full = init_train_state(b, tc);
    std::vector<StepMetrics> full_metrics;
    pretrain(ds, full, tc, collect(full_metrics), nullptr);

    // Two epochs, checkpoint, resume for two more.
    TrainConfig first_half = tc;
    first_half.epochs = 4;
    TrainState part = init_train_state(b, tc);
    std::vector<StepMetrics> part_metrics;
    int stop_after_epoch = 2;
    pretrain(ds, part, first_half, collect(part_metrics), nullptr,
             [&]() { return part.epoch >= stop_after_epoch; });

    const std::string path = (std::filesystem::temp_directory_path() / "dcglr_resume_test.dckp").string();
    save_train_state(path, part);
    TrainState resumed = load_train_state(path);
    std::filesystem::remove(path);
    pretrain(ds, resumed, tc, collect(part_metrics), nullptr);

    for (const auto& [n, t] : full.student.arrays) {
        const Tensor& o = resumed.student.arrays.at(n);
        for (long long i = 0; i < t.numel(); ++i) CHECK(t[i] == o[i]);
    }
    CHECK(full.step == resumed.step);
    REQUIRE(full_metrics.size() == part_metrics.size());
    for (size_t i = 0; i < full_metrics.size(); ++i)
        CHECK(full_metrics[i].loss == part_metrics[i].loss);
}

TEST_CASE("metrics json line format") {
    StepMetrics m;
    m.step = 3;
    m.epoch = 1;
    m.loss_global = 1.5;
    m.loss_local = 2.5;
    m.loss = 4.0;
    m.lr = 5e-4;
    m.lambda = 0.996;
    m.center_norm = 0.25;
    m.wall_ms = 12.345;
    const std::string line = metrics_json_line(m);
    CHECK(line.find("\"step\":3") != std::string::npos);
    CHECK(line.find("\"epoch\":1") != std::string::npos);
    CHECK(line.find("\"loss\":4") != std::string::npos);
    CHECK(line.find("\"wall_ms\":12.345") != std::string::npos);
    CHECK(line.front() == '{');
    CHECK(line.back() == '}');
}

TEST_CASE("config validation") {
    TrainConfig tc = tiny_train();
    tc.batch_size = 0;
    CHECK_THROWS_AS(tc.validate(), ParameterError);
    tc = tiny_train();
    tc.tau_teacher = 0.0;
    CHECK_THROWS_AS(tc.validate(), ParameterError);
    tc = tiny_train();
    tc.center_rate = 1.5;
    CHECK_THROWS_AS(tc.validate(), ParameterError);
}
