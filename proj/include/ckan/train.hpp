#pragma once

#include <chrono>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <limits>
#include <string>
#include <vector>

#include "ckan/autodiff.hpp"
#include "ckan/channel.hpp"
#include "ckan/checkpoint.hpp"
#include "ckan/errors.hpp"
#include "ckan/model.hpp"
#include "ckan/rng.hpp"
#include "ckan/tensor.hpp"

namespace ckan {

// Per-sample normalized squared error: ||pred - truth||_F^2 / ||truth||_F^2.
inline double nmse(const ComplexTensor& pred, const ComplexTensor& truth) {
    if (!pred.re().same_shape(truth.re()))
        throw DimensionError("nmse: shape mismatch " + shape_str(pred.shape()) + " vs " +
                             shape_str(truth.shape()));
    const double denom = truth.energy();
    if (denom == 0.0) throw NumericError("nmse: all-zero truth has no normalization");
    // Sum the real-part block before the imaginary one, mirroring energy()'s
    // order, so nmse(0, truth) divides two identical sums and is exactly 1.
    double num_re = 0.0, num_im = 0.0;
    for (std::size_t i = 0; i < pred.numel(); ++i) {
        const double dr = pred.re()[i] - truth.re()[i];
        num_re += dr * dr;
    }
    for (std::size_t i = 0; i < pred.numel(); ++i) {
        const double di = pred.im()[i] - truth.im()[i];
        num_im += di * di;
    }
    return (num_re + num_im) / denom;
}

// Batch NMSE loss: mean over samples of the per-sample ratio (the loss is
// an expectation over samples, not a ratio of sums).
inline double nmse_loss(const std::vector<ComplexTensor>& preds,
                        const std::vector<ComplexTensor>& truths) {
    if (preds.size() != truths.size() || preds.empty())
        throw DimensionError("nmse_loss: need equal non-zero sample counts");
    double acc = 0.0;
    for (std::size_t i = 0; i < preds.size(); ++i) acc += nmse(preds[i], truths[i]);
    return acc / static_cast<double>(preds.size());
}

// Tape node for one sample's NMSE ratio given the realified truth.
inline GradTape::Var sample_nmse_t(GradTape& tape, GradTape::Var pred, const Tensor& truth_real) {
    const double denom = truth_real.sum_squares();
    if (denom == 0.0) throw NumericError("nmse: all-zero truth has no normalization");
    GradTape::Var diff = tape.sub(pred, tape.constant(truth_real));
    return tape.scale(tape.sum(tape.mul(diff, diff)), 1.0 / denom);
}

// Mean-of-ratios NMSE over a batch of windowed samples, built on the tape.
inline GradTape::Var batch_loss_t(GradTape& tape, const BoundParams& bp, const ModelConfig& cfg,
                                  const std::vector<WindowedSample>& samples,
                                  const std::vector<std::size_t>& index) {
    if (index.empty()) throw DataError("batch_loss: empty batch");
    GradTape::Var acc;
    for (std::size_t n = 0; n < index.size(); ++n) {
        const WindowedSample& s = samples[index[n]];
        GradTape::Var pred = forward_t(tape, bp, cfg, s.history);
        GradTape::Var ratio = sample_nmse_t(tape, pred, realify(s.future));
        acc = n == 0 ? ratio : tape.add(acc, ratio);
    }
    return tape.scale(acc, 1.0 / static_cast<double>(index.size()));
}

struct TrainConfig {
    std::size_t epochs = 100;
    std::size_t batch_size = 8;
    double lr0 = 1e-3;
    double decay = 0.98;   // multiplicative LR factor per epoch
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    std::uint64_t seed = 1;
    std::size_t patience = 20;  // epochs without val improvement before stopping

    void validate() const {
        if (lr0 < 0.0) throw ConfigError("TrainConfig: lr0 must be >= 0");
        if (decay <= 0.0 || decay > 1.0) throw ConfigError("TrainConfig: decay must be in (0, 1]");
        if (batch_size < 1) throw ConfigError("TrainConfig: batch_size must be >= 1");
        if (beta1 < 0.0 || beta1 >= 1.0 || beta2 < 0.0 || beta2 >= 1.0)
            throw ConfigError("TrainConfig: betas must be in [0, 1)");
    }
};

struct TrainReport {
    std::size_t start_epoch = 0;
    std::vector<double> train_loss;  // one entry per epoch actually run
    std::vector<double> val_nmse;
    std::vector<double> lr;
    std::vector<double> seconds;
    std::size_t best_epoch = 0;
    double best_val = std::numeric_limits<double>::infinity();
    ModelParams best_params;

    std::size_t epochs_run() const { return train_loss.size(); }
};

// Mean per-sample NMSE of the current params over a sample set.
inline double dataset_nmse(const ModelParams& params, const ModelConfig& cfg,
                           const std::vector<WindowedSample>& samples) {
    if (samples.empty()) throw DataError("dataset_nmse: empty sample set");
    double acc = 0.0;
    for (const WindowedSample& s : samples) acc += nmse(forward(params, cfg, s.history), s.future);
    return acc / static_cast<double>(samples.size());
}

// Adam with per-epoch learning-rate decay (lr = lr0 * decay^epoch), seeded
// shuffling, best-on-validation tracking, and early stopping. `params`
// holds the final-epoch weights on return (consistent with the optimizer
// state for resuming); the best-validation weights are in the report. When
// `state` is given, training resumes at state->next_epoch with its moments
// and leaves the advanced state behind.
inline TrainReport train(ModelParams& params, const ModelConfig& cfg,
                         const std::vector<WindowedSample>& train_set,
                         const std::vector<WindowedSample>& val_set, const TrainConfig& tc,
                         TrainerState* state = nullptr) {
    tc.validate();
    cfg.validate();
    if (train_set.empty()) throw DataError("train: empty training set");

    TrainerState local;
    TrainerState& st = state ? *state : local;
    if (st.m.empty()) {
        st.m.assign(params.count(), Tensor());
        st.v.assign(params.count(), Tensor());
        for (std::size_t i = 0; i < params.count(); ++i) {
            st.m[i] = Tensor(params.tensors[i].shape());
            st.v[i] = Tensor(params.tensors[i].shape());
        }
    } else if (st.m.size() != params.count() || st.v.size() != params.count()) {
        throw DimensionError("train: resumed optimizer state does not match parameter count");
    }

    TrainReport report;
    report.start_epoch = st.next_epoch;
    report.best_params = params;

    std::vector<std::size_t> order(train_set.size());

    std::size_t bad_epochs = 0;
    const std::size_t end_epoch = st.next_epoch + tc.epochs;
    for (std::size_t epoch = st.next_epoch; epoch < end_epoch; ++epoch) {
        const auto t0 = std::chrono::steady_clock::now();
        const double lr = tc.lr0 * std::pow(tc.decay, static_cast<double>(epoch));

        // Each epoch's visit order depends only on (seed, epoch) — never on
        // earlier epochs — so a resumed run replays the uninterrupted one.
        for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
        Rng shuffle_rng = Rng::derive(tc.seed, "shuffle", epoch);
        shuffle_rng.shuffle(order);

        double ratio_sum = 0.0;
        for (std::size_t start = 0; start < order.size(); start += tc.batch_size) {
            const std::size_t stop = std::min(start + tc.batch_size, order.size());
            std::vector<std::size_t> batch(order.begin() + static_cast<std::ptrdiff_t>(start),
                                           order.begin() + static_cast<std::ptrdiff_t>(stop));
            GradTape tape;
            BoundParams bp = bind_params(tape, params);
            GradTape::Var loss = batch_loss_t(tape, bp, cfg, train_set, batch);
            const double loss_value = tape.value(loss)[0];
            if (!std::isfinite(loss_value))
                throw NumericError("training diverged: non-finite loss at epoch " +
                                   std::to_string(epoch) + ", batch " +
                                   std::to_string(start / tc.batch_size));
            ratio_sum += loss_value * static_cast<double>(batch.size());
            tape.backward(loss);

            st.adam_step += 1;
            const double bc1 = 1.0 - std::pow(tc.beta1, static_cast<double>(st.adam_step));
            const double bc2 = 1.0 - std::pow(tc.beta2, static_cast<double>(st.adam_step));
            for (std::size_t i = 0; i < params.count(); ++i) {
                const Tensor* g = tape.gradient(bp.vars[i]);
                Tensor& p = params.tensors[i];
                Tensor& m = st.m[i];
                Tensor& v = st.v[i];
                for (std::size_t j = 0; j < p.numel(); ++j) {
                    const double gj = (*g)[j];
                    m[j] = tc.beta1 * m[j] + (1.0 - tc.beta1) * gj;
                    v[j] = tc.beta2 * v[j] + (1.0 - tc.beta2) * gj * gj;
                    p[j] -= lr * (m[j] / bc1) / (std::sqrt(v[j] / bc2) + tc.eps);
                }
            }
        }
        const double train_loss = ratio_sum / static_cast<double>(train_set.size());
        const double val =
            val_set.empty() ? train_loss : dataset_nmse(params, cfg, val_set);

        report.train_loss.push_back(train_loss);
        report.val_nmse.push_back(val);
        report.lr.push_back(lr);
        report.seconds.push_back(
            std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count());

        st.next_epoch = epoch + 1;
        if (val < report.best_val) {
            report.best_val = val;
            report.best_epoch = epoch;
            report.best_params = params;
            bad_epochs = 0;
        } else {
            bad_epochs += 1;
            if (bad_epochs > tc.patience) break;
        }
    }
    return report;
}

// Pure, order-preserving map of forward over a batch of histories.
inline std::vector<ComplexTensor> predict_batch(const ModelParams& params, const ModelConfig& cfg,
                                                const std::vector<ComplexTensor>& histories) {
    std::vector<ComplexTensor> out;
    out.reserve(histories.size());
    for (const ComplexTensor& h : histories) out.push_back(forward(params, cfg, h));
    return out;
}

}  // namespace ckan
