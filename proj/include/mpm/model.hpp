#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "mpm/ops.hpp"
#include "mpm/rng.hpp"
#include "mpm/tensor.hpp"

namespace mpm {

enum class ModelKind { Mpm, MpmAttn, NoDetector, Mf };

inline std::string to_string(ModelKind k) {
    switch (k) {
        case ModelKind::Mpm: return "mpm";
        case ModelKind::MpmAttn: return "mpm-attn";
        case ModelKind::NoDetector: return "no-detector";
        case ModelKind::Mf: return "mf";
    }
    return "?";
}

inline ModelKind model_kind_from(const std::string& s) {
    if (s == "mpm") return ModelKind::Mpm;
    if (s == "mpm-attn") return ModelKind::MpmAttn;
    if (s == "no-detector") return ModelKind::NoDetector;
    if (s == "mf") return ModelKind::Mf;
    throw std::invalid_argument("unknown model kind '" + s + "' (expected mpm, mpm-attn, no-detector or mf)");
}

inline bool uses_history(ModelKind k) { return k != ModelKind::Mf; }

// ---------------------------------------------------------------------------
// Configuration
// ---------------------------------------------------------------------------

struct MpmConfig {
    size_t embedding_dim = 32;
    size_t history_size = 9;  // K
    size_t tcn_levels = 4;
    size_t kernel_size = 3;
    std::vector<size_t> dilations = {1, 2, 4, 8};
    std::vector<size_t> mlp_layers = {64, 128, 64, 32};
    std::vector<size_t> output_mlp_layers = {128, 64, 32};
    double dropout_rate = 0.2;

    // Every residual block applies two convolutions with its dilation.
    size_t receptive_field() const {
        size_t sum_d = 0;
        for (size_t d : dilations) sum_d += d;
        return 1 + 2 * (kernel_size - 1) * sum_d;
    }

    // MLP widths scale with the embedding size (dim 32 -> [64,128,64,32]),
    // which is how the model-size sweep varies capacity.
    static MpmConfig scaled_for_dim(size_t dim) {
        MpmConfig cfg;
        cfg.embedding_dim = dim;
        cfg.mlp_layers = {2 * dim, 4 * dim, 2 * dim, dim};
        cfg.output_mlp_layers = {4 * dim, 2 * dim, dim};
        return cfg;
    }

    void validate(ModelKind kind) const {
        if (embedding_dim < 1) throw std::invalid_argument("config: embedding_dim must be >= 1");
        if (kind == ModelKind::Mf) return;
        if (history_size < 1) throw std::invalid_argument("config: history_size must be >= 1");
        if (mlp_layers.empty()) throw std::invalid_argument("config: mlp_layers must be non-empty");
        if (output_mlp_layers.empty()) throw std::invalid_argument("config: output_mlp_layers must be non-empty");
        if (kernel_size < 1) throw std::invalid_argument("config: kernel_size must be >= 1");
        if (dilations.size() != tcn_levels)
            throw std::invalid_argument("config: need one dilation per TCN level (got " +
                                        std::to_string(dilations.size()) + " for " + std::to_string(tcn_levels) +
                                        " levels)");
        if (receptive_field() < history_size)
            throw std::invalid_argument("config: receptive field " + std::to_string(receptive_field()) +
                                        " cannot cover history of " + std::to_string(history_size));
    }
};

// ---------------------------------------------------------------------------
// Parameters
// ---------------------------------------------------------------------------

template <typename T>
struct Dense {
    Tensor<T> w;
    Tensor<T> b;
};

template <typename T>
struct TcnBlock {
    Dense<T> conv1;  // w is [out_ch, in_ch, k]
    Dense<T> conv2;
};

template <typename T>
struct MpmParams {
    ModelKind kind = ModelKind::Mpm;
    MpmConfig cfg;
    size_t num_users = 0;
    size_t num_items = 0;

    Tensor<T> user_emb;  // [M, dim]
    Tensor<T> item_emb;  // [N, dim], shared by history inputs and targets

    std::vector<TcnBlock<T>> tcn;    // mpm, mpm-attn, no-detector
    std::vector<Dense<T>> detector;  // mpm only
    std::vector<Dense<T>> general;   // all but mf
    std::vector<Dense<T>> output;    // all but mf
    Dense<T> output_head;            // last hidden width -> 1

    Tensor<T> attn_proj;  // [dim, dim], mpm-attn only
    Tensor<T> attn_vec;   // [dim, 1]

    Tensor<T> user_bias;    // [M, 1], mf only
    Tensor<T> item_bias;    // [N, 1]
    Tensor<T> global_bias;  // [1]

    size_t detector_out_width() const { return cfg.mlp_layers.back(); }

    size_t output_input_width() const {
        const size_t w = cfg.mlp_layers.back();
        switch (kind) {
            case ModelKind::Mpm: return cfg.history_size * w + w;
            case ModelKind::NoDetector: return cfg.history_size * cfg.embedding_dim + w;
            case ModelKind::MpmAttn: return cfg.embedding_dim + w;
            case ModelKind::Mf: return 0;
        }
        return 0;
    }

    // Handles share storage with the fields, so optimizer updates through the
    // returned tensors mutate the model.
    std::vector<std::pair<std::string, Tensor<T>>> named() const {
        std::vector<std::pair<std::string, Tensor<T>>> out;
        out.emplace_back("user_emb", user_emb);
        out.emplace_back("item_emb", item_emb);
        for (size_t l = 0; l < tcn.size(); ++l) {
            const std::string p = "tcn." + std::to_string(l) + ".";
            out.emplace_back(p + "conv1.w", tcn[l].conv1.w);
            out.emplace_back(p + "conv1.b", tcn[l].conv1.b);
            out.emplace_back(p + "conv2.w", tcn[l].conv2.w);
            out.emplace_back(p + "conv2.b", tcn[l].conv2.b);
        }
        auto add_stack = [&out](const std::string& prefix, const std::vector<Dense<T>>& stack) {
            for (size_t l = 0; l < stack.size(); ++l) {
                out.emplace_back(prefix + std::to_string(l) + ".w", stack[l].w);
                out.emplace_back(prefix + std::to_string(l) + ".b", stack[l].b);
            }
        };
        add_stack("det.", detector);
        add_stack("gen.", general);
        add_stack("out.", output);
        if (output_head.w.defined()) {
            out.emplace_back("out.head.w", output_head.w);
            out.emplace_back("out.head.b", output_head.b);
        }
        if (attn_proj.defined()) {
            out.emplace_back("attn.proj", attn_proj);
            out.emplace_back("attn.vec", attn_vec);
        }
        if (user_bias.defined()) {
            out.emplace_back("mf.user_bias", user_bias);
            out.emplace_back("mf.item_bias", item_bias);
            out.emplace_back("mf.global_bias", global_bias);
        }
        return out;
    }

    size_t param_count() const {
        size_t n = 0;
        for (const auto& [name, t] : named()) n += t.numel();
        return n;
    }

    void set_requires_grad(bool v) {
        for (auto& [name, t] : named()) {
            auto handle = t;
            handle.set_requires_grad(v);
        }
    }

    void zero_grads() {
        for (auto& [name, t] : named()) {
            auto handle = t;
            handle.ensure_grad();
            handle.zero_grad();
        }
    }

    MpmParams clone() const {
        MpmParams c;
        c.kind = kind;
        c.cfg = cfg;
        c.num_users = num_users;
        c.num_items = num_items;
        auto cp = [](const Tensor<T>& t) { return t.defined() ? t.clone() : Tensor<T>(); };
        c.user_emb = cp(user_emb);
        c.item_emb = cp(item_emb);
        for (const auto& blk : tcn)
            c.tcn.push_back({{cp(blk.conv1.w), cp(blk.conv1.b)}, {cp(blk.conv2.w), cp(blk.conv2.b)}});
        auto cps = [&cp](const std::vector<Dense<T>>& s) {
            std::vector<Dense<T>> o;
            for (const auto& d : s) o.push_back({cp(d.w), cp(d.b)});
            return o;
        };
        c.detector = cps(detector);
        c.general = cps(general);
        c.output = cps(output);
        c.output_head = {cp(output_head.w), cp(output_head.b)};
        c.attn_proj = cp(attn_proj);
        c.attn_vec = cp(attn_vec);
        c.user_bias = cp(user_bias);
        c.item_bias = cp(item_bias);
        c.global_bias = cp(global_bias);
        return c;
    }
};

namespace detail {

template <typename T>
void fill_uniform(Tensor<T>& t, SplitRng& rng, double lo, double hi) {
    for (auto& v : t.data()) v = static_cast<T>(rng.uniform(lo, hi));
}

// fan-in scaled uniform init for dense and conv weights, zero biases
template <typename T>
Dense<T> make_dense(size_t in, size_t out, SplitRng& rng) {
    Dense<T> d{Tensor<T>({in, out}, true), Tensor<T>({out}, true)};
    const double bound = 1.0 / std::sqrt(static_cast<double>(in));
    fill_uniform(d.w, rng, -bound, bound);
    return d;
}

template <typename T>
Dense<T> make_conv(size_t out_ch, size_t in_ch, size_t k, SplitRng& rng) {
    Dense<T> d{Tensor<T>({out_ch, in_ch, k}, true), Tensor<T>({out_ch}, true)};
    const double bound = 1.0 / std::sqrt(static_cast<double>(in_ch * k));
    fill_uniform(d.w, rng, -bound, bound);
    return d;
}

template <typename T>
std::vector<Dense<T>> make_stack(size_t in, const std::vector<size_t>& widths, SplitRng& rng) {
    std::vector<Dense<T>> stack;
    size_t cur = in;
    for (size_t w : widths) {
        stack.push_back(make_dense<T>(cur, w, rng));
        cur = w;
    }
    return stack;
}

}  // namespace detail

template <typename T>
MpmParams<T> make_params(ModelKind kind, const MpmConfig& cfg, size_t num_users, size_t num_items, uint64_t seed) {
    cfg.validate(kind);
    if (num_users < 1 || num_items < 1) throw std::invalid_argument("make_params: empty user or item universe");
    MpmParams<T> p;
    p.kind = kind;
    p.cfg = cfg;
    p.num_users = num_users;
    p.num_items = num_items;

    SplitRng rng(substream(seed, kTagInit));
    const size_t dim = cfg.embedding_dim;
    p.user_emb = Tensor<T>({num_users, dim}, true);
    p.item_emb = Tensor<T>({num_items, dim}, true);
    detail::fill_uniform(p.user_emb, rng, -0.05, 0.05);
    detail::fill_uniform(p.item_emb, rng, -0.05, 0.05);

    if (kind == ModelKind::Mf) {
        p.user_bias = Tensor<T>({num_users, 1}, true);
        p.item_bias = Tensor<T>({num_items, 1}, true);
        p.global_bias = Tensor<T>({1}, true);
        return p;
    }

    for (size_t l = 0; l < cfg.tcn_levels; ++l)
        p.tcn.push_back({detail::make_conv<T>(dim, dim, cfg.kernel_size, rng),
                         detail::make_conv<T>(dim, dim, cfg.kernel_size, rng)});
    if (kind == ModelKind::Mpm) p.detector = detail::make_stack<T>(2 * dim, cfg.mlp_layers, rng);
    p.general = detail::make_stack<T>(2 * dim, cfg.mlp_layers, rng);
    if (kind == ModelKind::MpmAttn) {
        p.attn_proj = Tensor<T>({dim, dim}, true);
        p.attn_vec = Tensor<T>({dim, 1}, true);
        const double bound = 1.0 / std::sqrt(static_cast<double>(dim));
        detail::fill_uniform(p.attn_proj, rng, -bound, bound);
        detail::fill_uniform(p.attn_vec, rng, -bound, bound);
    }
    p.output = detail::make_stack<T>(p.output_input_width(), cfg.output_mlp_layers, rng);
    p.output_head = detail::make_dense<T>(cfg.output_mlp_layers.back(), 1, rng);
    return p;
}

// ---------------------------------------------------------------------------
// Forward passes (batched; single-example surfaces below wrap batch size 1)
// ---------------------------------------------------------------------------

// history_ids is row-major [batch, K]. Returns instant preferences [B, K, dim];
// row (b, i) depends only on history positions <= i of example b.
template <typename T>
Tensor<T> tcn_forward_batch(Tape<T>& tape, const MpmParams<T>& params, std::span<const int32_t> history_ids,
                            size_t batch, bool training, SplitRng& dropout_rng) {
    const size_t K = params.cfg.history_size;
    const size_t dim = params.cfg.embedding_dim;
    if (history_ids.size() != batch * K)
        throw std::invalid_argument("tcn_forward: expected " + std::to_string(batch * K) + " history ids, got " +
                                    std::to_string(history_ids.size()));
    std::vector<int32_t> ids(history_ids.begin(), history_ids.end());
    auto x = embedding_gather(tape, params.item_emb, ids);     // [B*K, dim]
    x = reshape(tape, x, {batch, K, dim});
    x = swap_last2(tape, x);                                   // [B, dim, K] channels-major
    for (size_t l = 0; l < params.tcn.size(); ++l) {
        const int d = static_cast<int>(params.cfg.dilations[l]);
        auto y = dilated_causal_conv1d(tape, x, params.tcn[l].conv1.w, d);
        y = add_channel_bias(tape, y, params.tcn[l].conv1.b);
        y = relu(tape, y);
        y = spatial_dropout(tape, y, params.cfg.dropout_rate, training, dropout_rng);
        y = dilated_causal_conv1d(tape, y, params.tcn[l].conv2.w, d);
        y = add_channel_bias(tape, y, params.tcn[l].conv2.b);
        y = relu(tape, y);
        y = spatial_dropout(tape, y, params.cfg.dropout_rate, training, dropout_rng);
        x = add(tape, x, y);  // identity skip
    }
    return swap_last2(tape, x);  // [B, K, dim]
}

// Concatenates each instant preference with the target embedding and runs the
// shared detector MLP; returns the predictive vectors flattened to [B, K*w].
template <typename T>
Tensor<T> detector_forward_batch(Tape<T>& tape, const MpmParams<T>& params, Tensor<T> instants,
                                 std::span<const int32_t> target_ids) {
    const size_t B = instants.dim(0), K = instants.dim(1), dim = instants.dim(2);
    std::vector<int32_t> expanded(B * K);
    for (size_t b = 0; b < B; ++b)
        for (size_t i = 0; i < K; ++i) expanded[b * K + i] = target_ids[b];
    auto tgt = embedding_gather(tape, params.item_emb, expanded);  // [B*K, dim]
    auto h = reshape(tape, instants, {B * K, dim});
    auto z = concat(tape, {h, tgt});                               // [B*K, 2*dim]
    for (const auto& layer : params.detector) z = relu(tape, affine(tape, z, layer.w, layer.b));
    return reshape(tape, z, {B, K * params.detector_out_width()});
}

// [e_u, e_i] through the general-preference MLP -> [B, w].
template <typename T>
Tensor<T> general_forward_batch(Tape<T>& tape, const MpmParams<T>& params, std::span<const int32_t> user_ids,
                                std::span<const int32_t> target_ids) {
    std::vector<int32_t> users(user_ids.begin(), user_ids.end());
    std::vector<int32_t> targets(target_ids.begin(), target_ids.end());
    auto eu = embedding_gather(tape, params.user_emb, users);
    auto ei = embedding_gather(tape, params.item_emb, targets);
    auto z = concat(tape, {eu, ei});
    for (const auto& layer : params.general) z = relu(tape, affine(tape, z, layer.w, layer.b));
    return z;
}

// Concatenated predictive vectors through the output MLP and sigmoid head.
template <typename T>
Tensor<T> output_forward_batch(Tape<T>& tape, const MpmParams<T>& params, Tensor<T> p_concat) {
    auto z = p_concat;
    for (const auto& layer : params.output) z = relu(tape, affine(tape, z, layer.w, layer.b));
    z = affine(tape, z, params.output_head.w, params.output_head.b);  // [B, 1]
    z = sigmoid(tape, z);
    return reshape(tape, z, {p_concat.dim(0)});
}

// Scores a batch of (user, K-item history, target) triples; returns [B] in (0,1).
template <typename T>
Tensor<T> score_batch(Tape<T>& tape, const MpmParams<T>& params, std::span<const int32_t> user_ids,
                      std::span<const int32_t> history_ids, std::span<const int32_t> target_ids, bool training,
                      SplitRng& dropout_rng) {
    const size_t B = user_ids.size();
    if (target_ids.size() != B) throw std::invalid_argument("score_batch: users and targets disagree");

    if (params.kind == ModelKind::Mf) {
        std::vector<int32_t> users(user_ids.begin(), user_ids.end());
        std::vector<int32_t> targets(target_ids.begin(), target_ids.end());
        auto eu = embedding_gather(tape, params.user_emb, users);
        auto ei = embedding_gather(tape, params.item_emb, targets);
        auto dot = sum_lastdim(tape, mul(tape, eu, ei));  // [B,1]
        auto bu = embedding_gather(tape, params.user_bias, users);
        auto bi = embedding_gather(tape, params.item_bias, targets);
        auto s = add(tape, add(tape, dot, bu), bi);
        s = add_scalar(tape, s, params.global_bias);
        return reshape(tape, sigmoid(tape, s), {B});
    }

    const size_t K = params.cfg.history_size;
    auto instants = tcn_forward_batch(tape, params, history_ids, B, training, dropout_rng);  // [B,K,dim]
    auto p_g = general_forward_batch(tape, params, user_ids, target_ids);                    // [B,w]

    Tensor<T> p_concat;
    switch (params.kind) {
        case ModelKind::Mpm: {
            auto p = detector_forward_batch(tape, params, instants, target_ids);  // [B,K*w]
            p_concat = concat(tape, {p, p_g});
            break;
        }
        case ModelKind::NoDetector: {
            auto h = reshape(tape, instants, {B, K * params.cfg.embedding_dim});
            p_concat = concat(tape, {h, p_g});
            break;
        }
        case ModelKind::MpmAttn: {
            const size_t dim = params.cfg.embedding_dim;
            auto h_flat = reshape(tape, instants, {B * K, dim});
            auto u = tanh_op(tape, matmul(tape, h_flat, params.attn_proj));
            auto logits = reshape(tape, matmul(tape, u, params.attn_vec), {B, K});
            auto weights = softmax_lastdim(tape, logits);
            auto s = attn_pool(tape, weights, instants);  // [B,dim]
            p_concat = concat(tape, {s, p_g});
            break;
        }
        default: break;
    }
    return output_forward_batch(tape, params, p_concat);
}

// ---------------------------------------------------------------------------
// Single-example surfaces
// ---------------------------------------------------------------------------

// Instant preferences for one history: [K, dim].
template <typename T>
Tensor<T> tcn_forward(Tape<T>& tape, const MpmParams<T>& params, std::span<const int32_t> history_ids, bool training,
                      SplitRng& dropout_rng) {
    auto out = tcn_forward_batch(tape, params, history_ids, 1, training, dropout_rng);
    return reshape(tape, out, {params.cfg.history_size, params.cfg.embedding_dim});
}

// Predictive vectors for one history: [K, w].
template <typename T>
Tensor<T> detector_forward(Tape<T>& tape, const MpmParams<T>& params, Tensor<T> instants, int32_t target_item) {
    const size_t K = instants.dim(0), dim = instants.dim(1);
    auto batched = reshape(tape, instants, {size_t(1), K, dim});
    const int32_t targets[1] = {target_item};
    auto p = detector_forward_batch(tape, params, batched, targets);
    return reshape(tape, p, {K, params.detector_out_width()});
}

// General-preference predictive vector for one (user, item): [w].
template <typename T>
Tensor<T> general_forward(Tape<T>& tape, const MpmParams<T>& params, int32_t user_id, int32_t target_item) {
    const int32_t users[1] = {user_id};
    const int32_t targets[1] = {target_item};
    auto p = general_forward_batch(tape, params, users, targets);
    return reshape(tape, p, {params.detector_out_width()});
}

// Final fusion for one example: concatenates K predictive vectors with p_G.
template <typename T>
Tensor<T> output_forward(Tape<T>& tape, const MpmParams<T>& params, Tensor<T> p_vectors, Tensor<T> p_g) {
    const size_t K = p_vectors.dim(0), w = p_vectors.dim(1);
    auto flat = reshape(tape, p_vectors, {size_t(1), K * w});
    auto pg = reshape(tape, p_g, {size_t(1), p_g.numel()});
    auto both = concat(tape, {flat, pg});
    return output_forward_batch(tape, params, both);
}

// One score in eval or train mode. For gradient work use score_batch on a
// recording tape instead.
template <typename T>
T predict(const MpmParams<T>& params, int32_t user_id, std::span<const int32_t> history, int32_t target_item,
          bool training = false, uint64_t dropout_seed = 0) {
    Tape<T> tape(false);
    SplitRng rng(dropout_seed);
    const int32_t users[1] = {user_id};
    const int32_t targets[1] = {target_item};
    auto s = score_batch(tape, params, users, history, targets, training, rng);
    return s.data()[0];
}

template <typename T>
T mpm_predict(const MpmParams<T>& params, int32_t user, std::span<const int32_t> history, int32_t target,
              bool training = false, uint64_t dropout_seed = 0) {
    if (params.kind != ModelKind::Mpm) throw std::invalid_argument("mpm_predict: params are not an mpm model");
    return predict(params, user, history, target, training, dropout_seed);
}

template <typename T>
T mpm_attn_predict(const MpmParams<T>& params, int32_t user, std::span<const int32_t> history, int32_t target,
                   bool training = false, uint64_t dropout_seed = 0) {
    if (params.kind != ModelKind::MpmAttn)
        throw std::invalid_argument("mpm_attn_predict: params are not an mpm-attn model");
    return predict(params, user, history, target, training, dropout_seed);
}

template <typename T>
T no_detector_predict(const MpmParams<T>& params, int32_t user, std::span<const int32_t> history, int32_t target,
                      bool training = false, uint64_t dropout_seed = 0) {
    if (params.kind != ModelKind::NoDetector)
        throw std::invalid_argument("no_detector_predict: params are not a no-detector model");
    return predict(params, user, history, target, training, dropout_seed);
}

// History-free latent factor baseline: sigmoid(e_u . e_i + b_u + b_i + b).
template <typename T>
T mf_predict(const MpmParams<T>& params, int32_t user, int32_t target) {
    if (params.kind != ModelKind::Mf) throw std::invalid_argument("mf_predict: params are not an mf model");
    return predict(params, user, {}, target);
}

}  // namespace mpm
