#pragma once

#include <cmath>
#include <cstdint>
#include <map>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "mpm/data.hpp"
#include "mpm/model.hpp"

namespace mpm {

struct EvaluationError : std::runtime_error {
    explicit EvaluationError(const std::string& msg) : std::runtime_error(msg) {}
};

// Rank of the positive item among its candidate set, 1-based. Ties are
// pessimistic: the positive loses every tie.
template <typename T>
int rank_positive(std::span<const T> scores, size_t positive_index) {
    if (positive_index >= scores.size())
        throw std::invalid_argument("rank_positive: positive index " + std::to_string(positive_index) +
                                    " out of range");
    for (T s : scores)
        if (!std::isfinite(static_cast<double>(s)))
            throw EvaluationError("rank_positive: non-finite candidate score");
    const T pos = scores[positive_index];
    int rank = 1;
    for (size_t i = 0; i < scores.size(); ++i) {
        if (i == positive_index) continue;
        if (scores[i] >= pos) ++rank;
    }
    return rank;
}

struct RankedResult {
    int32_t user = 0;
    int rank = 0;                // 1-based among 1 + negatives candidates
    std::vector<float> scores;   // candidate scores; positive sits at positive_index
    size_t positive_index = 0;
};

struct MetricSummary {
    std::map<int, double> hr;
    std::map<int, double> ndcg;
    size_t n_users = 0;
};

inline double hit_rate(const std::vector<RankedResult>& results, int k) {
    if (results.empty()) throw std::invalid_argument("hit_rate: no results");
    size_t hits = 0;
    for (const auto& r : results) hits += r.rank <= k ? 1 : 0;
    return static_cast<double>(hits) / static_cast<double>(results.size());
}

// With a single relevant item the ideal DCG is 1, so the per-user term is
// 1/log2(rank+1) inside the cutoff and 0 outside.
inline double ndcg(const std::vector<RankedResult>& results, int k) {
    if (results.empty()) throw std::invalid_argument("ndcg: no results");
    double acc = 0;
    for (const auto& r : results)
        if (r.rank <= k) acc += 1.0 / std::log2(static_cast<double>(r.rank) + 1.0);
    return acc / static_cast<double>(results.size());
}

inline MetricSummary summarize(const std::vector<RankedResult>& results, const std::vector<int>& ks) {
    MetricSummary s;
    s.n_users = results.size();
    for (int k : ks) {
        s.hr[k] = hit_rate(results, k);
        s.ndcg[k] = ndcg(results, k);
    }
    return s;
}

// ---------------------------------------------------------------------------
// Leave-one-out evaluation
// ---------------------------------------------------------------------------

enum class EvalSide { Validation, Test };

inline std::string to_string(EvalSide s) { return s == EvalSide::Validation ? "validation" : "test"; }

inline EvalSide eval_side_from(const std::string& s) {
    if (s == "validation") return EvalSide::Validation;
    if (s == "test") return EvalSide::Test;
    throw std::invalid_argument("unknown evaluation side '" + s + "' (expected validation or test)");
}

// The unit of evaluation: one held-out positive against the sampled negatives,
// with the K interactions preceding the holdout as history. For the test side
// the window draws from train + validation item (the last K interactions
// before the test position, taken literally).
struct EvalInstance {
    int32_t user = 0;
    std::vector<int32_t> history;
    int32_t positive = 0;
    const std::vector<int32_t>* negatives = nullptr;
};

inline std::vector<EvalInstance> build_eval_instances(const SplitDataset& split, size_t history_size, EvalSide side) {
    std::vector<EvalInstance> out;
    out.reserve(split.num_users);
    for (size_t u = 0; u < split.num_users; ++u) {
        EvalInstance inst;
        inst.user = static_cast<int32_t>(u);
        std::vector<int32_t> seq = split.train[u];
        if (side == EvalSide::Test) {
            seq.push_back(split.val_item[u]);
            inst.positive = split.test_item[u];
            inst.negatives = &split.test_negatives[u];
        } else {
            inst.positive = split.val_item[u];
            inst.negatives = &split.val_negatives[u];
        }
        if (seq.size() < history_size)
            throw std::invalid_argument("evaluate: user " + std::to_string(u) + " has only " +
                                        std::to_string(seq.size()) + " interactions before the holdout, needs " +
                                        std::to_string(history_size));
        inst.history.assign(seq.end() - static_cast<long>(history_size), seq.end());
        out.push_back(std::move(inst));
    }
    return out;
}

// Scores every user's positive against its negatives in eval mode and ranks
// them. Users are processed in id order and packed into scoring batches of
// roughly batch_candidates rows.
template <typename T>
std::vector<RankedResult> evaluate_detailed(const MpmParams<T>& params, const SplitDataset& split, EvalSide side,
                                            size_t batch_candidates = 1024) {
    const size_t K = params.cfg.history_size;
    const size_t cands = 1 + split.eval_negatives;
    const size_t users_per_batch = std::max<size_t>(1, batch_candidates / cands);
    auto instances = build_eval_instances(split, K, side);

    std::vector<RankedResult> results;
    results.reserve(instances.size());
    SplitRng unused_rng(0);
    std::vector<int32_t> users, hist, targets;
    for (size_t begin = 0; begin < instances.size(); begin += users_per_batch) {
        const size_t end = std::min(instances.size(), begin + users_per_batch);
        users.clear();
        hist.clear();
        targets.clear();
        for (size_t i = begin; i < end; ++i) {
            const auto& inst = instances[i];
            for (size_t c = 0; c < cands; ++c) {
                users.push_back(inst.user);
                hist.insert(hist.end(), inst.history.begin(), inst.history.end());
            }
            targets.push_back(inst.positive);
            targets.insert(targets.end(), inst.negatives->begin(), inst.negatives->end());
        }
        Tape<T> tape(false);
        auto scores = score_batch<T>(tape, params, users, hist, targets, false, unused_rng);
        for (size_t i = begin; i < end; ++i) {
            const T* s = scores.data().data() + (i - begin) * cands;
            RankedResult r;
            r.user = instances[i].user;
            r.positive_index = 0;
            r.rank = rank_positive(std::span<const T>(s, cands), 0);
            r.scores.assign(s, s + cands);
            results.push_back(std::move(r));
        }
    }
    return results;
}

template <typename T>
MetricSummary evaluate(const MpmParams<T>& params, const SplitDataset& split, EvalSide side,
                       const std::vector<int>& ks = {10}) {
    return summarize(evaluate_detailed(params, split, side), ks);
}

}  // namespace mpm
