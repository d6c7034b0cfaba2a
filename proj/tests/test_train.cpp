#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <string>
#include <vector>

#include "ckan/channel.hpp"
#include "ckan/checkpoint.hpp"
#include "ckan/errors.hpp"
#include "ckan/model.hpp"
#include "ckan/rng.hpp"
#include "ckan/train.hpp"

using namespace ckan;

namespace {

// Geometry small enough that a 100-trial training sweep stays in seconds.
SystemConfig small_sys() {
    SystemConfig sys;
    sys.n_h = 2;
    sys.n_v = 1;
    sys.n_r = 1;
    sys.k_sub = 4;
    return sys;
}

ModelConfig small_cfg() {
    ModelConfig cfg;
    cfg.t_hist = 8;
    cfg.l_fut = 2;
    cfg.k_sub = 4;
    cfg.pairs = 2;
    cfg.scales = 2;
    cfg.keep = {2, 4};
    cfg.conv_widths = {2, 4, 2};
    cfg.cheb_order = 3;
    return cfg;
}

// Clean windowed samples from one synthetic ride at the given speed.
std::vector<WindowedSample> make_samples(const ModelConfig& cfg, double velocity_kmh,
                                         std::size_t count, std::uint64_t seed) {
    const SystemConfig sys = small_sys();
    const std::size_t frames = count + cfg.t_hist + cfg.l_fut - 1;
    const CsiSequence seq = generate_sequence(velocity_kmh / 3.6, sys, frames, seed);
    std::vector<WindowedSample> wins = window(seq, cfg.t_hist, cfg.l_fut, 1);
    wins.resize(count);
    return wins;
}

ComplexTensor random_csi(const Shape& shape, Rng& rng) {
    ComplexTensor h(shape);
    for (std::size_t i = 0; i < h.numel(); ++i) {
        h.re()[i] = rng.normal();
        h.im()[i] = rng.normal();
    }
    return h;
}

bool params_identical(const ModelParams& a, const ModelParams& b) {
    if (a.count() != b.count()) return false;
    for (std::size_t i = 0; i < a.count(); ++i) {
        if (a.names[i] != b.names[i]) return false;
        if (!a.tensors[i].same_shape(b.tensors[i])) return false;
        for (std::size_t j = 0; j < a.tensors[i].numel(); ++j)
            if (a.tensors[i][j] != b.tensors[i][j]) return false;
    }
    return true;
}

}  // namespace

// ---- NMSE loss ----

TEST_CASE("nmse of a perfect prediction is exactly zero") {
    Rng rng = Rng::derive(301, "nmse", 0);
    const ComplexTensor h = random_csi(Shape{2, 4, 2}, rng);
    REQUIRE(nmse(h, h) == 0.0);
}

TEST_CASE("nmse of the zero prediction is exactly one") {
    Rng rng = Rng::derive(302, "nmse", 0);
    const ComplexTensor truth = random_csi(Shape{3, 4, 2}, rng);
    const ComplexTensor zero(Shape{3, 4, 2});
    REQUIRE(nmse(zero, truth) == 1.0);
}

TEST_CASE("nmse of a scaled truth is |alpha - 1|^2 exactly") {
    Rng rng = Rng::derive(303, "nmse", 0);
    const ComplexTensor truth = random_csi(Shape{2, 3, 2}, rng);
    for (double alpha : {2.0, 0.5, -3.0}) {
        ComplexTensor pred(truth.shape());
        for (std::size_t i = 0; i < truth.numel(); ++i) {
            pred.re()[i] = alpha * truth.re()[i];
            pred.im()[i] = alpha * truth.im()[i];
        }
        // num = |a-1|^2 ||truth||^2 cancels against the denominator, so the
        // ratio is exact in floating point up to the final division.
        REQUIRE(nmse(pred, truth) == Catch::Approx((alpha - 1.0) * (alpha - 1.0)).epsilon(1e-15));
    }
}

TEST_CASE("nmse rejects shape mismatches and zero-norm truths") {
    Rng rng = Rng::derive(304, "nmse", 0);
    const ComplexTensor a = random_csi(Shape{2, 4, 2}, rng);
    const ComplexTensor b = random_csi(Shape{2, 4, 1}, rng);
    REQUIRE_THROWS_AS(nmse(a, b), DimensionError);
    const ComplexTensor zero(Shape{2, 4, 2});
    REQUIRE_THROWS_AS(nmse(a, zero), NumericError);
}

TEST_CASE("batch nmse_loss is the mean of per-sample ratios") {
    Rng rng = Rng::derive(305, "nmse", 0);
    const ComplexTensor t1 = random_csi(Shape{2, 2, 2}, rng);
    const ComplexTensor t2 = random_csi(Shape{2, 2, 2}, rng);
    const ComplexTensor p1 = random_csi(Shape{2, 2, 2}, rng);
    const ComplexTensor p2 = random_csi(Shape{2, 2, 2}, rng);
    const double expect = 0.5 * (nmse(p1, t1) + nmse(p2, t2));
    REQUIRE(nmse_loss({p1, p2}, {t1, t2}) == Catch::Approx(expect).epsilon(1e-15));
    REQUIRE_THROWS_AS(nmse_loss({p1}, {t1, t2}), DimensionError);
    REQUIRE_THROWS_AS(nmse_loss({}, {}), DimensionError);
}

// ---- training loop mechanics ----

TEST_CASE("one epoch at zero learning rate leaves parameters bit-exact") {
    const ModelConfig cfg = small_cfg();
    const std::vector<WindowedSample> data = make_samples(cfg, 30.0, 12, 41);
    ModelParams params = init_params(cfg, 7);
    const ModelParams before = params;

    TrainConfig tc;
    tc.epochs = 1;
    tc.lr0 = 0.0;
    tc.seed = 5;
    const TrainReport rep = train(params, cfg, data, {}, tc);

    REQUIRE(rep.epochs_run() == 1);
    REQUIRE(params_identical(params, before));
}

TEST_CASE("the loss trace is a pure function of seed, dataset, and config") {
    const ModelConfig cfg = small_cfg();
    const std::vector<WindowedSample> data = make_samples(cfg, 30.0, 16, 42);

    TrainConfig tc;
    tc.epochs = 3;
    tc.seed = 11;
    ModelParams p1 = init_params(cfg, 7);
    ModelParams p2 = init_params(cfg, 7);
    const TrainReport r1 = train(p1, cfg, data, {}, tc);
    const TrainReport r2 = train(p2, cfg, data, {}, tc);
    REQUIRE(r1.train_loss == r2.train_loss);
    REQUIRE(r1.val_nmse == r2.val_nmse);
    REQUIRE(params_identical(p1, p2));

    // A different shuffle seed visits batches in a different order, so the
    // per-epoch losses cannot all coincide.
    TrainConfig other = tc;
    other.seed = 12;
    ModelParams p3 = init_params(cfg, 7);
    const TrainReport r3 = train(p3, cfg, data, {}, other);
    REQUIRE(r3.train_loss != r1.train_loss);
}

TEST_CASE("the learning-rate sequence is non-increasing") {
    const ModelConfig cfg = small_cfg();
    const std::vector<WindowedSample> data = make_samples(cfg, 30.0, 8, 43);

    TrainConfig tc;
    tc.epochs = 5;
    tc.decay = 0.9;
    ModelParams params = init_params(cfg, 3);
    const TrainReport rep = train(params, cfg, data, {}, tc);
    REQUIRE(rep.lr.size() == 5);
    for (std::size_t e = 0; e < rep.lr.size(); ++e) {
        REQUIRE(rep.lr[e] == Catch::Approx(tc.lr0 * std::pow(tc.decay, double(e))));
        if (e > 0) REQUIRE(rep.lr[e] <= rep.lr[e - 1]);
    }

    // decay = 1 keeps it constant, still non-increasing.
    TrainConfig flat = tc;
    flat.decay = 1.0;
    flat.epochs = 3;
    ModelParams q = init_params(cfg, 3);
    const TrainReport rep2 = train(q, cfg, data, {}, flat);
    for (double lr : rep2.lr) REQUIRE(lr == tc.lr0);
}

TEST_CASE("a small learning rate does not increase the loss across seeds") {
    const ModelConfig cfg = small_cfg();
    const std::vector<WindowedSample> data = make_samples(cfg, 30.0, 8, 44);

    std::size_t improved = 0;
    for (std::uint64_t seed = 0; seed < 100; ++seed) {
        TrainConfig tc;
        tc.epochs = 2;
        tc.lr0 = 1e-4;
        tc.decay = 1.0;
        tc.seed = seed;
        ModelParams params = init_params(cfg, seed + 1000);
        const TrainReport rep = train(params, cfg, data, {}, tc);
        if (rep.train_loss[1] <= rep.train_loss[0]) improved += 1;
    }
    INFO("epoch-0 -> epoch-1 non-increase in " << improved << " of 100 trials");
    REQUIRE(improved >= 95);
}

TEST_CASE("the batch loss gradient is the mean of per-sample gradients") {
    const ModelConfig cfg = small_cfg();
    const std::vector<WindowedSample> data = make_samples(cfg, 30.0, 2, 45);
    const ModelParams params = init_params(cfg, 9);

    // Gradient of the 2-sample batch loss.
    GradTape tape;
    BoundParams bp = bind_params(tape, params);
    tape.backward(batch_loss_t(tape, bp, cfg, data, {0, 1}));

    // Gradients of each sample alone.
    GradTape t0;
    BoundParams b0 = bind_params(t0, params);
    t0.backward(batch_loss_t(t0, b0, cfg, data, {0}));
    GradTape t1;
    BoundParams b1 = bind_params(t1, params);
    t1.backward(batch_loss_t(t1, b1, cfg, data, {1}));

    for (std::size_t i = 0; i < params.count(); ++i) {
        const Tensor* g = tape.gradient(bp.vars[i]);
        const Tensor* g0 = t0.gradient(b0.vars[i]);
        const Tensor* g1 = t1.gradient(b1.vars[i]);
        REQUIRE(g != nullptr);
        REQUIRE(g0 != nullptr);
        REQUIRE(g1 != nullptr);
        for (std::size_t j = 0; j < g->numel(); ++j) {
            const double mean = 0.5 * ((*g0)[j] + (*g1)[j]);
            REQUIRE((*g)[j] == Catch::Approx(mean).margin(1e-12));
        }
    }
}

TEST_CASE("divergence aborts with a diagnostic naming the epoch and batch") {
    const ModelConfig cfg = small_cfg();
    const std::vector<WindowedSample> data = make_samples(cfg, 30.0, 8, 46);

    // An absurd learning rate overflows the parameters within an epoch or
    // two; the loop must throw rather than keep training on NaNs.
    TrainConfig tc;
    tc.epochs = 50;
    tc.lr0 = 1e150;
    tc.decay = 1.0;
    ModelParams params = init_params(cfg, 5);
    try {
        train(params, cfg, data, {}, tc);
        FAIL("expected NumericError from a diverged run");
    } catch (const NumericError& e) {
        const std::string msg = e.what();
        INFO(msg);
        REQUIRE(msg.find("epoch") != std::string::npos);
        REQUIRE(msg.find("batch") != std::string::npos);
    }
}

TEST_CASE("early stopping halts after patience non-improving epochs") {
    const ModelConfig cfg = small_cfg();
    const std::vector<WindowedSample> data = make_samples(cfg, 30.0, 8, 47);

    // Zero learning rate never improves, so the first epoch sets the best
    // and the loop stops after exactly patience + 1 more.
    TrainConfig tc;
    tc.epochs = 50;
    tc.lr0 = 0.0;
    tc.patience = 3;
    ModelParams params = init_params(cfg, 5);
    const TrainReport rep = train(params, cfg, data, {}, tc);
    REQUIRE(rep.epochs_run() == 1 + tc.patience + 1);
    REQUIRE(rep.best_epoch == 0);
}

TEST_CASE("a zero-velocity dataset is learned to near-zero NMSE") {
    // At zero Doppler the channel is constant, so the future equals the last
    // history frame and a short training run must drive the NMSE tiny.
    const ModelConfig cfg = small_cfg();
    const std::vector<WindowedSample> data = make_samples(cfg, 0.0, 32, 48);

    TrainConfig tc;
    tc.epochs = 200;
    tc.lr0 = 1e-3;
    tc.seed = 1;
    tc.patience = 200;  // no early exit: the bar is the final loss
    ModelParams params = init_params(cfg, 1);
    const TrainReport rep = train(params, cfg, data, {}, tc);
    INFO("final train NMSE " << rep.train_loss.back());
    REQUIRE(rep.train_loss.back() < 1e-3);
}

TEST_CASE("training resumes from saved optimizer state with continued epochs") {
    const ModelConfig cfg = small_cfg();
    const std::vector<WindowedSample> data = make_samples(cfg, 30.0, 12, 49);

    // One uninterrupted 4-epoch run.
    TrainConfig tc4;
    tc4.epochs = 4;
    tc4.seed = 21;
    ModelParams whole = init_params(cfg, 13);
    const TrainReport rep_whole = train(whole, cfg, data, {}, tc4);

    // The same four epochs as 2 + 2 through a TrainerState handoff.
    TrainConfig tc2 = tc4;
    tc2.epochs = 2;
    ModelParams split = init_params(cfg, 13);
    TrainerState st;
    const TrainReport first = train(split, cfg, data, {}, tc2, &st);
    REQUIRE(first.start_epoch == 0);
    REQUIRE(st.next_epoch == 2);
    const TrainReport second = train(split, cfg, data, {}, tc2, &st);
    REQUIRE(second.start_epoch == 2);
    REQUIRE(st.next_epoch == 4);

    // Same epoch indices mean the same shuffles and the same LR schedule,
    // so the stitched trace reproduces the uninterrupted one bit-exactly.
    REQUIRE(first.train_loss[0] == rep_whole.train_loss[0]);
    REQUIRE(first.train_loss[1] == rep_whole.train_loss[1]);
    REQUIRE(second.train_loss[0] == rep_whole.train_loss[2]);
    REQUIRE(second.train_loss[1] == rep_whole.train_loss[3]);
    REQUIRE(second.lr[0] == rep_whole.lr[2]);
    REQUIRE(params_identical(split, whole));
}

TEST_CASE("zero requested epochs run nothing and keep the initial parameters") {
    const ModelConfig cfg = small_cfg();
    const std::vector<WindowedSample> data = make_samples(cfg, 30.0, 8, 50);
    ModelParams params = init_params(cfg, 2);
    const ModelParams before = params;

    TrainConfig tc;
    tc.epochs = 0;
    const TrainReport rep = train(params, cfg, data, {}, tc);
    REQUIRE(rep.epochs_run() == 0);
    REQUIRE(rep.train_loss.empty());
    REQUIRE(params_identical(params, before));
    REQUIRE(params_identical(rep.best_params, before));
}

TEST_CASE("train rejects an empty dataset and invalid configs") {
    const ModelConfig cfg = small_cfg();
    ModelParams params = init_params(cfg, 2);
    TrainConfig tc;
    REQUIRE_THROWS_AS(train(params, cfg, {}, {}, tc), DataError);

    TrainConfig bad = tc;
    bad.lr0 = -1.0;
    REQUIRE_THROWS_AS(bad.validate(), ConfigError);
    bad = tc;
    bad.decay = 0.0;
    REQUIRE_THROWS_AS(bad.validate(), ConfigError);
    bad = tc;
    bad.decay = 1.5;
    REQUIRE_THROWS_AS(bad.validate(), ConfigError);
    bad = tc;
    bad.batch_size = 0;
    REQUIRE_THROWS_AS(bad.validate(), ConfigError);
}

// ---- batched prediction ----

TEST_CASE("a batch of one equals a single forward pass") {
    const ModelConfig cfg = small_cfg();
    const ModelParams params = init_params(cfg, 6);
    Rng rng = Rng::derive(306, "batch", 0);
    const ComplexTensor h = random_csi(Shape{cfg.t_hist, cfg.k_sub, cfg.pairs}, rng);

    const std::vector<ComplexTensor> out = predict_batch(params, cfg, {h});
    const ComplexTensor single = forward(params, cfg, h);
    REQUIRE(out.size() == 1);
    for (std::size_t i = 0; i < single.numel(); ++i) {
        REQUIRE(out[0].re()[i] == single.re()[i]);
        REQUIRE(out[0].im()[i] == single.im()[i]);
    }
}

TEST_CASE("permuting the batch permutes the predictions identically") {
    const ModelConfig cfg = small_cfg();
    const ModelParams params = init_params(cfg, 6);
    Rng rng = Rng::derive(307, "batch", 0);
    std::vector<ComplexTensor> hs;
    for (int i = 0; i < 3; ++i)
        hs.push_back(random_csi(Shape{cfg.t_hist, cfg.k_sub, cfg.pairs}, rng));

    const std::vector<ComplexTensor> fwd = predict_batch(params, cfg, hs);
    const std::vector<ComplexTensor> rev = predict_batch(params, cfg, {hs[2], hs[0], hs[1]});
    const std::size_t perm[3] = {2, 0, 1};
    for (std::size_t n = 0; n < 3; ++n)
        for (std::size_t i = 0; i < fwd[0].numel(); ++i) {
            REQUIRE(rev[n].re()[i] == fwd[perm[n]].re()[i]);
            REQUIRE(rev[n].im()[i] == fwd[perm[n]].im()[i]);
        }
}

TEST_CASE("batch NMSE equals the mean per-sample NMSE on equal-norm truths") {
    // With every truth at the same energy the mean-of-ratios equals the
    // ratio-of-sums, so both readings of Eq. (8)'s expectation agree.
    Rng rng = Rng::derive(308, "batch", 0);
    std::vector<ComplexTensor> preds, truths;
    for (int n = 0; n < 4; ++n) {
        ComplexTensor t = random_csi(Shape{2, 3, 2}, rng);
        const double scale = 1.0 / std::sqrt(t.energy());
        for (std::size_t i = 0; i < t.numel(); ++i) {
            t.re()[i] *= scale;
            t.im()[i] *= scale;
        }
        truths.push_back(t);
        preds.push_back(random_csi(Shape{2, 3, 2}, rng));
    }
    double num = 0.0, den = 0.0;
    for (std::size_t n = 0; n < 4; ++n) {
        den += truths[n].energy();
        for (std::size_t i = 0; i < preds[n].numel(); ++i) {
            const double dr = preds[n].re()[i] - truths[n].re()[i];
            const double di = preds[n].im()[i] - truths[n].im()[i];
            num += dr * dr + di * di;
        }
    }
    REQUIRE(nmse_loss(preds, truths) == Catch::Approx(num / den).epsilon(1e-12));
}

// ---- checkpoint round-trips ----

TEST_CASE("checkpoints round-trip parameters and trainer state bit-exactly") {
    const ModelConfig cfg = small_cfg();
    const std::vector<WindowedSample> data = make_samples(cfg, 30.0, 8, 51);
    ModelParams params = init_params(cfg, 17);
    TrainerState st;
    TrainConfig tc;
    tc.epochs = 2;
    train(params, cfg, data, {}, tc, &st);

    const std::string path = (std::filesystem::temp_directory_path() /
                              "ckan_test_train_roundtrip.ckpt").string();
    save_checkpoint(Checkpoint{cfg, params, st}, path);
    const Checkpoint back = load_checkpoint(path);
    REQUIRE(params_identical(back.params, params));
    REQUIRE(back.trainer.has_value());
    REQUIRE(back.trainer->next_epoch == st.next_epoch);
    REQUIRE(back.trainer->adam_step == st.adam_step);
    for (std::size_t i = 0; i < st.m.size(); ++i)
        for (std::size_t j = 0; j < st.m[i].numel(); ++j) {
            REQUIRE(back.trainer->m[i][j] == st.m[i][j]);
            REQUIRE(back.trainer->v[i][j] == st.v[i][j]);
        }
    std::filesystem::remove(path);
}

TEST_CASE("a checkpoint with a different architecture is refused on resume") {
    const ModelConfig cfg = small_cfg();
    ModelConfig other = cfg;
    other.k_sub = 8;
    REQUIRE_THROWS_AS(require_matching_config(cfg, other, "x.ckpt"), ConfigError);
    try {
        require_matching_config(cfg, other, "x.ckpt");
    } catch (const ConfigError& e) {
        const std::string msg = e.what();
        INFO(msg);
        // The refusal must say what was expected and what was found.
        REQUIRE(msg.find("4") != std::string::npos);
        REQUIRE(msg.find("8") != std::string::npos);
    }
}

TEST_CASE("checkpoint loading distinguishes the failure modes") {
    const ModelConfig cfg = small_cfg();
    const ModelParams params = init_params(cfg, 3);
    const auto dir = std::filesystem::temp_directory_path();
    const std::string path = (dir / "ckan_test_train_corrupt.ckpt").string();
    save_checkpoint(Checkpoint{cfg, params, std::nullopt}, path);

    std::ifstream in(path, std::ios::binary);
    std::vector<char> bytes((std::istreambuf_iterator<char>(in)),
                            std::istreambuf_iterator<char>());
    in.close();

    SECTION("missing file") {
        REQUIRE_THROWS_AS(load_checkpoint((dir / "ckan_never_written.ckpt").string()), DataError);
    }
    SECTION("wrong magic") {
        auto bad = bytes;
        bad[0] = 'X';
        std::ofstream(path, std::ios::binary).write(bad.data(), std::streamsize(bad.size()));
        REQUIRE_THROWS_AS(load_checkpoint(path), MalformedHeaderError);
    }
    SECTION("unsupported version") {
        auto bad = bytes;
        bad[4] = 99;
        std::ofstream(path, std::ios::binary).write(bad.data(), std::streamsize(bad.size()));
        REQUIRE_THROWS_AS(load_checkpoint(path), VersionMismatchError);
    }
    SECTION("truncated payload") {
        auto bad = bytes;
        bad.resize(bad.size() - 9);
        std::ofstream(path, std::ios::binary).write(bad.data(), std::streamsize(bad.size()));
        REQUIRE_THROWS_AS(load_checkpoint(path), TruncatedPayloadError);
    }
    std::filesystem::remove(path);
}
