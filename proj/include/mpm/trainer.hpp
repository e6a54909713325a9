#pragma once

#include <chrono>
#include <cmath>
#include <cstdint>
#include <functional>
#include <vector>

#include "mpm/adam.hpp"
#include "mpm/data.hpp"
#include "mpm/errors.hpp"
#include "mpm/metrics.hpp"
#include "mpm/model.hpp"

namespace mpm {

struct TrainConfig {
    double learning_rate = 0.001;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double epsilon = 1e-8;
    size_t batch_size = 1024;
    size_t max_epochs = 30;
    size_t patience = 5;  // epochs without validation HR@10 improvement
    size_t train_negatives = 4;
    uint64_t seed = 0;

    void validate() const {
        if (batch_size < 1) throw std::invalid_argument("train: batch_size must be >= 1");
        if (max_epochs < 1) throw std::invalid_argument("train: max_epochs must be >= 1");
        if (patience > max_epochs) throw std::invalid_argument("train: patience cannot exceed max_epochs");
    }
};

struct EpochStats {
    double mean_loss = 0;
    double val_hr10 = 0;
    double val_ndcg10 = 0;
    double seconds = 0;
};

struct TrainReport {
    std::vector<EpochStats> epochs;
    size_t best_epoch = 0;  // 0-based index into epochs
    double best_val_hr10 = 0;
};

struct TrainResult {
    MpmParams<float> params;  // parameters of the best validation epoch
    TrainReport report;
};

// Mean BCE of a model over explicit examples; eval-mode by default.
template <typename T>
T loss_on_batch(const MpmParams<T>& params, const std::vector<TrainingExample>& batch, bool training = false,
                uint64_t dropout_seed = 0) {
    if (batch.empty()) throw std::invalid_argument("loss_on_batch: empty batch");
    const size_t K = params.cfg.history_size;
    std::vector<int32_t> users, hist, targets;
    std::vector<T> labels;
    for (const auto& ex : batch) {
        if (uses_history(params.kind) && ex.history.size() != K)
            throw std::invalid_argument("loss_on_batch: example history length " + std::to_string(ex.history.size()) +
                                        " != " + std::to_string(K));
        users.push_back(ex.user);
        hist.insert(hist.end(), ex.history.begin(), ex.history.end());
        targets.push_back(ex.target);
        labels.push_back(static_cast<T>(ex.label));
    }
    Tape<T> tape(false);
    SplitRng rng(dropout_seed);
    auto scores = score_batch<T>(tape, params, users, hist, targets, training, rng);
    auto loss = bce_loss(tape, scores, Tensor<T>::from({batch.size()}, std::move(labels)));
    return loss.data()[0];
}

// Uniform index in [0, n) for the shuffle; kept separate to make the
// Fisher-Yates draw order explicit.
inline size_t rng_index(SplitRng& rng, size_t n) { return static_cast<size_t>(rng.below(n)); }

// Pointwise BCE training with Adam, epoch-wise negative resampling, shuffling
// under per-epoch substreams, and early stopping on validation HR@10 (ties
// keep the earliest epoch). Returns the best-epoch parameters.
inline TrainResult train(ModelKind kind, const SplitDataset& split, const MpmConfig& mcfg, const TrainConfig& tcfg,
                         const std::function<void(size_t, const EpochStats&)>& on_epoch = nullptr) {
    tcfg.validate();
    if (split.num_users == 0) throw std::invalid_argument("train: empty split");

    auto params = make_params<float>(kind, mcfg, split.num_users, split.num_items, tcfg.seed);
    auto named = params.named();
    std::vector<AdamState<float>> states;
    states.reserve(named.size());
    for (const auto& [name, t] : named)
        states.emplace_back(t.numel(), static_cast<float>(tcfg.learning_rate), static_cast<float>(tcfg.beta1),
                            static_cast<float>(tcfg.beta2), static_cast<float>(tcfg.epsilon));

    TrainResult result{params.clone(), {}};
    double best_hr = -1.0;
    size_t since_improvement = 0;
    const size_t K = mcfg.history_size;

    std::vector<size_t> order;
    std::vector<int32_t> users, hist, targets;
    std::vector<float> labels;

    for (size_t epoch = 1; epoch <= tcfg.max_epochs; ++epoch) {
        const auto t0 = std::chrono::steady_clock::now();
        auto examples = build_training_examples(split, K, tcfg.train_negatives, substream(tcfg.seed, kTagTrainNeg, epoch));
        if (examples.size() == 0) throw std::invalid_argument("train: no training examples (history too long?)");

        order.resize(examples.size());
        for (size_t i = 0; i < order.size(); ++i) order[i] = i;
        SplitRng shuffle_rng(substream(tcfg.seed, kTagShuffle, epoch));
        for (size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[rng_index(shuffle_rng, i)]);

        SplitRng dropout_rng(substream(tcfg.seed, kTagDropout, epoch));
        double loss_sum = 0;
        size_t seen = 0;
        size_t batch_index = 0;
        for (size_t begin = 0; begin < order.size(); begin += tcfg.batch_size, ++batch_index) {
            const size_t end = std::min(order.size(), begin + tcfg.batch_size);
            const size_t bsz = end - begin;
            users.clear();
            hist.clear();
            targets.clear();
            labels.clear();
            for (size_t i = begin; i < end; ++i) {
                const auto& r = examples.entries()[order[i]];
                users.push_back(r.user);
                const int32_t* h = examples.history_of(r);
                hist.insert(hist.end(), h, h + K);
                targets.push_back(r.target);
                labels.push_back(r.label);
            }
            params.zero_grads();
            Tape<float> tape(true);
            auto scores = score_batch<float>(tape, params, users, hist, targets, true, dropout_rng);
            auto loss = bce_loss(tape, scores, Tensor<float>::from({bsz}, labels));
            const double lv = static_cast<double>(loss.data()[0]);
            if (!std::isfinite(lv))
                throw DivergenceError("train: non-finite loss at epoch " + std::to_string(epoch) + ", batch " +
                                          std::to_string(batch_index),
                                      static_cast<int>(epoch), static_cast<int>(batch_index));
            backward(loss, tape);
            for (size_t p = 0; p < named.size(); ++p) adam_update(named[p].second, states[p]);
            loss_sum += lv * static_cast<double>(bsz);
            seen += bsz;
        }

        auto val = evaluate(params, split, EvalSide::Validation, {10});
        EpochStats stats;
        stats.mean_loss = loss_sum / static_cast<double>(seen);
        stats.val_hr10 = val.hr.at(10);
        stats.val_ndcg10 = val.ndcg.at(10);
        stats.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        result.report.epochs.push_back(stats);
        if (on_epoch) on_epoch(epoch, stats);

        if (stats.val_hr10 > best_hr) {
            best_hr = stats.val_hr10;
            result.report.best_epoch = epoch - 1;
            result.report.best_val_hr10 = stats.val_hr10;
            result.params = params.clone();
            since_improvement = 0;
        } else {
            ++since_improvement;
            if (since_improvement >= tcfg.patience) break;
        }
    }
    return result;
}

}  // namespace mpm
