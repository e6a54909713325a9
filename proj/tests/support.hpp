#pragma once

// Shared fixtures for the unit and acceptance suites.

#include <cmath>
#include <cstdint>
#include <vector>

#include "mpm/model.hpp"
#include "mpm/rng.hpp"

namespace mpm::testsupport {

// A parameter point where finite differences at h=1e-3 are trustworthy:
// all embeddings, weights and hidden biases positive, so every rectifier
// pre-activation is a sum of positive terms with margin >= 0.1 — no kink lies
// within the perturbation's reach. Weights scale as 1/fan_in to keep the layer
// gain near one, which keeps the sigmoid head out of its clamped region.
template <typename T>
MpmParams<T> kink_free_params(ModelKind kind, const MpmConfig& cfg, size_t num_users, size_t num_items,
                              uint64_t seed) {
    auto p = make_params<T>(kind, cfg, num_users, num_items, seed);
    SplitRng rng(substream(seed, 77));
    auto pos_fill = [&](Tensor<T> t, double scale) {
        for (auto& v : t.data()) v = static_cast<T>(scale * rng.uniform(0.2, 1.0));
    };
    pos_fill(p.user_emb, 0.15);
    pos_fill(p.item_emb, 0.15);
    for (auto& blk : p.tcn) {
        const double s = 1.5 / static_cast<double>(cfg.embedding_dim * cfg.kernel_size);
        pos_fill(blk.conv1.w, s);
        pos_fill(blk.conv2.w, s);
        for (auto& v : blk.conv1.b.data()) v = T(0.1);
        for (auto& v : blk.conv2.b.data()) v = T(0.1);
    }
    for (auto* stack : {&p.detector, &p.general, &p.output})
        for (auto& layer : *stack) {
            pos_fill(layer.w, 1.5 / static_cast<double>(layer.w.dim(0)));
            for (auto& v : layer.b.data()) v = T(0.1);
        }
    if (p.output_head.w.defined()) pos_fill(p.output_head.w, 1.5 / static_cast<double>(p.output_head.w.dim(0)));
    if (p.attn_proj.defined()) {
        pos_fill(p.attn_proj, 1.5 / static_cast<double>(cfg.embedding_dim));
        pos_fill(p.attn_vec, 1.5 / static_cast<double>(cfg.embedding_dim));
    }
    if (p.user_bias.defined()) {
        pos_fill(p.user_bias, 0.1);
        pos_fill(p.item_bias, 0.1);
        pos_fill(p.global_bias, 0.1);
    }
    return p;
}

inline std::vector<int32_t> random_id_list(size_t n, size_t vocab, uint64_t seed) {
    SplitRng rng(seed);
    std::vector<int32_t> ids(n);
    for (auto& id : ids) id = static_cast<int32_t>(rng.below(vocab));
    return ids;
}

}  // namespace mpm::testsupport
