#pragma once
// Full forecasting model: instance-normalized patch embeddings, two exogenous
// encoders, the bidirectional fusion stack, an endogenous decoder reading the
// fused memory, and a flatten linear head, plus parameter registry and binary
// checkpointing.

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <cstdlib>
#include <fstream>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "exotst/attention.hpp"
#include "exotst/csv.hpp"
#include "exotst/dataset.hpp"
#include "exotst/embedding.hpp"
#include "exotst/errors.hpp"
#include "exotst/fusion.hpp"
#include "exotst/ops.hpp"
#include "exotst/rng.hpp"
#include "exotst/tensor.hpp"

namespace exotst {

struct ExoTSTConfig {
    std::size_t lookback = 256;      // L
    std::size_t horizon = 30;        // f
    std::size_t patch_length = 16;   // P
    std::size_t stride = 8;          // S
    std::size_t model_dim = 256;     // D
    std::size_t heads = 8;           // H
    std::size_t ffn_dim = 128;       // D_ff
    std::size_t encoder_layers = 2;  // N_e
    std::size_t fusion_layers = 1;   // N_L
    std::size_t decoder_layers = 2;  // N_d
    std::size_t channels = 1;        // M, exogenous drivers
    double learning_rate = 1e-4;
    std::size_t max_epochs = 20;
    std::size_t patience = 10;
    std::uint64_t seed = 0;
};

// Collects every violated constraint into one error message.
inline void validate_config(const ExoTSTConfig& cfg) {
    std::vector<std::string> bad;
    if (cfg.patch_length < 1) bad.push_back("patch length must be at least 1");
    if (cfg.stride < 1) bad.push_back("stride must be at least 1");
    if (cfg.stride > cfg.patch_length)
        bad.push_back("stride must not exceed patch length");
    if (cfg.lookback < cfg.patch_length)
        bad.push_back("lookback must be at least the patch length");
    if (cfg.horizon < 1) bad.push_back("horizon must be at least 1");
    if (cfg.model_dim < 1) bad.push_back("model dim must be at least 1");
    if (cfg.heads < 1) bad.push_back("head count must be at least 1");
    else if (cfg.model_dim % cfg.heads != 0)
        bad.push_back("D not divisible by H");
    if (cfg.ffn_dim < 1) bad.push_back("MLP width must be at least 1");
    if (cfg.encoder_layers < 1) bad.push_back("need at least 1 encoder layer");
    if (cfg.fusion_layers < 1) bad.push_back("need at least 1 fusion layer");
    if (cfg.decoder_layers < 1) bad.push_back("need at least 1 decoder layer");
    if (cfg.channels < 1) bad.push_back("need at least 1 exogenous channel");
    if (!(cfg.learning_rate > 0.0))
        bad.push_back("learning rate must be positive");
    if (cfg.max_epochs < 1) bad.push_back("max epochs must be at least 1");
    if (cfg.patience < 1) bad.push_back("patience must be at least 1");
    if (!bad.empty()) {
        std::string msg = "invalid config: " + bad[0];
        for (std::size_t i = 1; i < bad.size(); ++i) msg += "; " + bad[i];
        throw ConfigError(msg);
    }
}

inline PatchConfig patch_config(const ExoTSTConfig& cfg) {
    return {cfg.patch_length, cfg.stride, cfg.model_dim};
}

struct ExoTSTModel {
    ExoTSTConfig cfg;
    // exogenous embedding shared between past and future streams, with
    // separate aggregation vectors; the endogenous stream has its own tables
    Tensor exo_W_p, exo_W_pos, e_agg_past, e_agg_future;
    Tensor endo_W_p, endo_W_pos;
    std::vector<EncoderLayerParams> past_encoder, future_encoder;
    std::vector<FusionLayerParams> fusion;
    std::vector<DecoderLayerParams> decoder;
    Tensor W_head;  // (N_end * D) x f
    Tensor b_head;  // f

    std::size_t past_patches() const {
        return patch_count(cfg.lookback, patch_config(cfg));
    }
    std::size_t future_patches() const {
        return patch_count(cfg.horizon, patch_config(cfg));
    }
    std::size_t endo_patches() const { return past_patches(); }

    std::vector<std::pair<std::string, Tensor>> parameters() const;
    std::vector<std::pair<std::string, Tensor>> buffers() const;
};

namespace detail {

using Named = std::vector<std::pair<std::string, Tensor>>;

inline void append_attention(Named& out, const std::string& prefix,
                             const MultiHeadAttentionParams& a) {
    for (std::size_t h = 0; h < a.W_q.size(); ++h) {
        out.emplace_back(prefix + ".W_q." + std::to_string(h), a.W_q[h]);
        out.emplace_back(prefix + ".W_k." + std::to_string(h), a.W_k[h]);
        out.emplace_back(prefix + ".W_v." + std::to_string(h), a.W_v[h]);
    }
    out.emplace_back(prefix + ".W_o", a.W_o);
}

inline void append_ffn(Named& out, const std::string& prefix,
                       const FeedForwardParams& f) {
    out.emplace_back(prefix + ".W1", f.W1);
    out.emplace_back(prefix + ".b1", f.b1);
    out.emplace_back(prefix + ".W2", f.W2);
    out.emplace_back(prefix + ".b2", f.b2);
}

inline void append_norm(Named& out, const std::string& prefix,
                        const BatchNormParams& n) {
    out.emplace_back(prefix + ".gamma", n.gamma);
    out.emplace_back(prefix + ".beta", n.beta);
}

inline void append_norm_buffers(Named& out, const std::string& prefix,
                                const BatchNormParams& n) {
    out.emplace_back(prefix + ".running_mean", n.running_mean);
    out.emplace_back(prefix + ".running_var", n.running_var);
}

inline void append_direction(Named& out, const std::string& prefix,
                             const FusionDirection& d) {
    out.emplace_back(prefix + ".W_q", d.W_q);
    out.emplace_back(prefix + ".W_k", d.W_k);
    out.emplace_back(prefix + ".W_v", d.W_v);
    out.emplace_back(prefix + ".ln.gamma", d.ln.gamma);
    out.emplace_back(prefix + ".ln.beta", d.ln.beta);
}

}  // namespace detail

inline std::vector<std::pair<std::string, Tensor>> ExoTSTModel::parameters()
    const {
    detail::Named out;
    out.emplace_back("exo_embed.W_p", exo_W_p);
    out.emplace_back("exo_embed.W_pos", exo_W_pos);
    out.emplace_back("exo_embed.e_agg_past", e_agg_past);
    out.emplace_back("exo_embed.e_agg_future", e_agg_future);
    out.emplace_back("endo_embed.W_p", endo_W_p);
    out.emplace_back("endo_embed.W_pos", endo_W_pos);
    for (std::size_t l = 0; l < past_encoder.size(); ++l) {
        const std::string p = "past_encoder." + std::to_string(l);
        detail::append_attention(out, p + ".attn", past_encoder[l].attn);
        detail::append_ffn(out, p + ".ffn", past_encoder[l].ffn);
        detail::append_norm(out, p + ".norm1", past_encoder[l].norm1);
        detail::append_norm(out, p + ".norm2", past_encoder[l].norm2);
    }
    for (std::size_t l = 0; l < future_encoder.size(); ++l) {
        const std::string p = "future_encoder." + std::to_string(l);
        detail::append_attention(out, p + ".attn", future_encoder[l].attn);
        detail::append_ffn(out, p + ".ffn", future_encoder[l].ffn);
        detail::append_norm(out, p + ".norm1", future_encoder[l].norm1);
        detail::append_norm(out, p + ".norm2", future_encoder[l].norm2);
    }
    for (std::size_t l = 0; l < fusion.size(); ++l) {
        const std::string p = "fusion." + std::to_string(l);
        detail::append_direction(out, p + ".past", fusion[l].past);
        detail::append_direction(out, p + ".future", fusion[l].future);
    }
    for (std::size_t l = 0; l < decoder.size(); ++l) {
        const std::string p = "decoder." + std::to_string(l);
        detail::append_attention(out, p + ".self_attn", decoder[l].self_attn);
        detail::append_attention(out, p + ".cross_attn", decoder[l].cross_attn);
        detail::append_ffn(out, p + ".ffn", decoder[l].ffn);
        detail::append_norm(out, p + ".norm1", decoder[l].norm1);
        detail::append_norm(out, p + ".norm2", decoder[l].norm2);
        detail::append_norm(out, p + ".norm3", decoder[l].norm3);
    }
    out.emplace_back("head.W", W_head);
    out.emplace_back("head.b", b_head);
    return out;
}

inline std::vector<std::pair<std::string, Tensor>> ExoTSTModel::buffers() const {
    detail::Named out;
    for (std::size_t l = 0; l < past_encoder.size(); ++l) {
        const std::string p = "past_encoder." + std::to_string(l);
        detail::append_norm_buffers(out, p + ".norm1", past_encoder[l].norm1);
        detail::append_norm_buffers(out, p + ".norm2", past_encoder[l].norm2);
    }
    for (std::size_t l = 0; l < future_encoder.size(); ++l) {
        const std::string p = "future_encoder." + std::to_string(l);
        detail::append_norm_buffers(out, p + ".norm1", future_encoder[l].norm1);
        detail::append_norm_buffers(out, p + ".norm2", future_encoder[l].norm2);
    }
    for (std::size_t l = 0; l < decoder.size(); ++l) {
        const std::string p = "decoder." + std::to_string(l);
        detail::append_norm_buffers(out, p + ".norm1", decoder[l].norm1);
        detail::append_norm_buffers(out, p + ".norm2", decoder[l].norm2);
        detail::append_norm_buffers(out, p + ".norm3", decoder[l].norm3);
    }
    return out;
}

// Closed-form trainable parameter count for a config; must agree with a walk
// over the registry.
inline std::size_t parameter_count(const ExoTSTConfig& cfg) {
    const std::size_t D = cfg.model_dim, P = cfg.patch_length,
                      Dff = cfg.ffn_dim, f = cfg.horizon;
    const PatchConfig pc = patch_config(cfg);
    const std::size_t n_past = patch_count(cfg.lookback, pc);
    const std::size_t n_fut = patch_count(cfg.horizon, pc);
    const std::size_t n_end = n_past;
    const std::size_t exo_cols = std::max(n_past, n_fut) + 1;
    const std::size_t attn = 4 * D * D;
    const std::size_t ffn = 2 * D * Dff + Dff + D;
    const std::size_t bn = 2 * D;
    std::size_t total = 0;
    total += D * P + D * exo_cols + 2 * D;  // exo embed, two agg vectors
    total += D * P + D * (n_end + 1);       // endo embed
    total += 2 * cfg.encoder_layers * (attn + ffn + 2 * bn);
    total += cfg.fusion_layers * 2 * (3 * D * D + 2 * D);
    total += cfg.decoder_layers * (2 * attn + ffn + 3 * bn);
    total += n_end * D * f + f;  // head
    return total;
}

namespace detail {

inline void xavier_fill(Tensor& t, std::size_t fan_in, std::size_t fan_out,
                        Rng& rng) {
    const double bound =
        std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
    for (auto& v : t.value()) v = rng.uniform(-bound, bound);
}

inline MultiHeadAttentionParams init_attention(std::size_t D, std::size_t H,
                                               Rng& rng) {
    MultiHeadAttentionParams a;
    const std::size_t dk = D / H;
    for (std::size_t h = 0; h < H; ++h) {
        a.W_q.push_back(Tensor::zeros({D, dk}, true));
        a.W_k.push_back(Tensor::zeros({D, dk}, true));
        a.W_v.push_back(Tensor::zeros({D, dk}, true));
        xavier_fill(a.W_q[h], D, dk, rng);
        xavier_fill(a.W_k[h], D, dk, rng);
        xavier_fill(a.W_v[h], D, dk, rng);
    }
    a.W_o = Tensor::zeros({H * dk, D}, true);
    xavier_fill(a.W_o, H * dk, D, rng);
    return a;
}

inline FeedForwardParams init_ffn(std::size_t D, std::size_t Dff, Rng& rng) {
    FeedForwardParams f;
    f.W1 = Tensor::zeros({D, Dff}, true);
    xavier_fill(f.W1, D, Dff, rng);
    f.b1 = Tensor::zeros({Dff}, true);
    f.W2 = Tensor::zeros({Dff, D}, true);
    xavier_fill(f.W2, Dff, D, rng);
    f.b2 = Tensor::zeros({D}, true);
    return f;
}

inline BatchNormParams init_batch_norm(std::size_t D) {
    BatchNormParams n;
    n.gamma = Tensor::full({D}, 1.0, true);
    n.beta = Tensor::zeros({D}, true);
    n.running_mean = Tensor::zeros({D});
    n.running_var = Tensor::full({D}, 1.0);
    return n;
}

inline FusionDirection init_direction(std::size_t D, Rng& rng) {
    FusionDirection d;
    d.W_q = Tensor::zeros({D, D}, true);
    d.W_k = Tensor::zeros({D, D}, true);
    d.W_v = Tensor::zeros({D, D}, true);
    xavier_fill(d.W_q, D, D, rng);
    xavier_fill(d.W_k, D, D, rng);
    xavier_fill(d.W_v, D, D, rng);
    d.ln.gamma = Tensor::full({D}, 1.0, true);
    d.ln.beta = Tensor::zeros({D}, true);
    return d;
}

}  // namespace detail

// Weights are uniform Xavier draws, biases and shifts zero, scales one, and
// positional tables start from the sinusoid pattern. Deterministic in
// cfg.seed.
inline ExoTSTModel init_model(const ExoTSTConfig& cfg) {
    validate_config(cfg);
    Rng rng(cfg.seed);
    const std::size_t D = cfg.model_dim, P = cfg.patch_length;
    ExoTSTModel m;
    m.cfg = cfg;
    const std::size_t n_past = m.past_patches();
    const std::size_t n_fut = m.future_patches();
    const std::size_t exo_cols = std::max(n_past, n_fut) + 1;
    const std::size_t endo_cols = m.endo_patches() + 1;

    m.exo_W_p = Tensor::zeros({D, P}, true);
    detail::xavier_fill(m.exo_W_p, P, D, rng);
    m.exo_W_pos = Tensor::from_vector({D, exo_cols},
                                      sinusoid_table(D, exo_cols), true);
    m.e_agg_past = Tensor::zeros({1, D}, true);
    detail::xavier_fill(m.e_agg_past, D, 1, rng);
    m.e_agg_future = Tensor::zeros({1, D}, true);
    detail::xavier_fill(m.e_agg_future, D, 1, rng);
    m.endo_W_p = Tensor::zeros({D, P}, true);
    detail::xavier_fill(m.endo_W_p, P, D, rng);
    m.endo_W_pos = Tensor::from_vector({D, endo_cols},
                                       sinusoid_table(D, endo_cols), true);

    for (std::size_t l = 0; l < cfg.encoder_layers; ++l) {
        EncoderLayerParams e;
        e.attn = detail::init_attention(D, cfg.heads, rng);
        e.ffn = detail::init_ffn(D, cfg.ffn_dim, rng);
        e.norm1 = detail::init_batch_norm(D);
        e.norm2 = detail::init_batch_norm(D);
        m.past_encoder.push_back(e);
    }
    for (std::size_t l = 0; l < cfg.encoder_layers; ++l) {
        EncoderLayerParams e;
        e.attn = detail::init_attention(D, cfg.heads, rng);
        e.ffn = detail::init_ffn(D, cfg.ffn_dim, rng);
        e.norm1 = detail::init_batch_norm(D);
        e.norm2 = detail::init_batch_norm(D);
        m.future_encoder.push_back(e);
    }
    for (std::size_t l = 0; l < cfg.fusion_layers; ++l) {
        FusionLayerParams fl;
        fl.past = detail::init_direction(D, rng);
        fl.future = detail::init_direction(D, rng);
        fl.heads = cfg.heads;
        m.fusion.push_back(fl);
    }
    for (std::size_t l = 0; l < cfg.decoder_layers; ++l) {
        DecoderLayerParams d;
        d.self_attn = detail::init_attention(D, cfg.heads, rng);
        d.cross_attn = detail::init_attention(D, cfg.heads, rng);
        d.ffn = detail::init_ffn(D, cfg.ffn_dim, rng);
        d.norm1 = detail::init_batch_norm(D);
        d.norm2 = detail::init_batch_norm(D);
        d.norm3 = detail::init_batch_norm(D);
        m.decoder.push_back(d);
    }
    const std::size_t flat = m.endo_patches() * D;
    m.W_head = Tensor::zeros({flat, cfg.horizon}, true);
    detail::xavier_fill(m.W_head, flat, cfg.horizon, rng);
    m.b_head = Tensor::zeros({cfg.horizon}, true);
    return m;
}

// Retained attention maps from one forward pass, indexed as noted.
struct ModelTrace {
    std::vector<std::vector<AttentionTrace>> past_encoder;    // [layer][channel]
    std::vector<std::vector<AttentionTrace>> future_encoder;  // [layer][channel]
    std::vector<std::vector<FusionTracePair>> fusion;         // [channel][layer]
    std::vector<AttentionTrace> decoder_self;                 // [layer]
    std::vector<AttentionTrace> decoder_cross;                // [layer]
};

struct ForecastResult {
    std::vector<double> y_hat;      // de-normalized via the y_past window stats
    std::vector<double> y_hat_std;  // standardized head output
    Tensor y_hat_tensor;            // taped de-normalized predictions, (1, f)
    double inst_mean = 0.0;
    double inst_std = 1.0;
};

namespace detail {

inline void check_sample_dims(const ExoTSTConfig& cfg,
                              const WindowSample& sample) {
    auto fail = [](const std::string& what, std::size_t got,
                   std::size_t want) {
        throw ShapeError("forward: " + what + " is " + std::to_string(got) +
                         ", config expects " + std::to_string(want));
    };
    if (sample.y_past.size() != cfg.lookback)
        fail("y_past length", sample.y_past.size(), cfg.lookback);
    if (sample.X_past.size() != cfg.channels)
        fail("past channel count", sample.X_past.size(), cfg.channels);
    if (sample.X_future.size() != cfg.channels)
        fail("future channel count", sample.X_future.size(), cfg.channels);
    for (std::size_t c = 0; c < cfg.channels; ++c) {
        if (sample.X_past[c].size() != cfg.lookback)
            fail("X_past channel length", sample.X_past[c].size(), cfg.lookback);
        if (sample.X_future[c].size() != cfg.horizon)
            fail("X_future channel length", sample.X_future[c].size(),
                 cfg.horizon);
    }
}

}  // namespace detail

// End-to-end forward for one window. With ablate_future_tokens the future
// encoder consumes zero tokens instead of the embedded future drivers,
// isolating what projected exogenous information contributes.
inline ForecastResult forward(ExoTSTModel& m, const WindowSample& sample,
                              Mode mode, ModelTrace* trace = nullptr,
                              bool ablate_future_tokens = false) {
    const ExoTSTConfig& cfg = m.cfg;
    detail::check_sample_dims(cfg, sample);
    const PatchConfig pc = patch_config(cfg);
    const std::size_t D = cfg.model_dim;

    // Exogenous channels enter in the dataset-standardized space they were
    // windowed in: a per-window re-standardization would erase their level
    // and scale, which carry the projected-driver signal the decoder needs.
    // Only the endogenous window is instance-normalized, because its stats
    // are what the head's output is de-normalized with.
    std::vector<Tensor> past_patch, fut_patch;
    for (std::size_t c = 0; c < cfg.channels; ++c) {
        past_patch.push_back(patchify(sample.X_past[c], pc));
        fut_patch.push_back(patchify(sample.X_future[c], pc));
    }
    EmbeddingParams past_embed{m.exo_W_p, m.exo_W_pos, m.e_agg_past};
    EmbeddingParams fut_embed{m.exo_W_p, m.exo_W_pos, m.e_agg_future};
    TokenSequence past_seq = embed_tokens(past_patch, past_embed, true);
    TokenSequence fut_seq = embed_tokens(fut_patch, fut_embed, true);

    if (trace) {
        trace->past_encoder.assign(cfg.encoder_layers,
                                   std::vector<AttentionTrace>(cfg.channels));
        trace->future_encoder.assign(cfg.encoder_layers,
                                     std::vector<AttentionTrace>(cfg.channels));
        trace->fusion.assign(cfg.channels, {});
        trace->decoder_self.assign(cfg.decoder_layers, {});
        trace->decoder_cross.assign(cfg.decoder_layers, {});
    }

    std::vector<Tensor> h_p, h_f;
    for (std::size_t c = 0; c < cfg.channels; ++c) {
        Tensor tp = channel_of(past_seq.tokens, c);
        for (std::size_t l = 0; l < cfg.encoder_layers; ++l)
            tp = encoder_layer_forward(
                tp, m.past_encoder[l], mode,
                trace ? &trace->past_encoder[l][c] : nullptr);
        Tensor tf = ablate_future_tokens
                        ? Tensor::zeros({fut_seq.n_tokens(), D})
                        : channel_of(fut_seq.tokens, c);
        for (std::size_t l = 0; l < cfg.encoder_layers; ++l)
            tf = encoder_layer_forward(
                tf, m.future_encoder[l], mode,
                trace ? &trace->future_encoder[l][c] : nullptr);
        auto fused = fuse_stack(tp, tf, m.fusion,
                                trace ? &trace->fusion[c] : nullptr);
        h_p.push_back(fused.first);
        h_f.push_back(fused.second);
    }
    FusedMemory mem = assemble_decoder_memory(h_p, h_f);

    InstanceNorm iny = instance_normalize(sample.y_past);
    Tensor y_patches = patchify(iny.values, pc);
    EmbeddingParams endo_embed{m.endo_W_p, m.endo_W_pos, m.e_agg_past};
    TokenSequence endo_seq = embed_tokens({y_patches}, endo_embed, false);
    Tensor z = channel_of(endo_seq.tokens, 0);
    for (std::size_t l = 0; l < cfg.decoder_layers; ++l)
        z = decoder_layer_forward(z, mem.O_flat, m.decoder[l], mode,
                                  trace ? &trace->decoder_self[l] : nullptr,
                                  trace ? &trace->decoder_cross[l] : nullptr);

    Tensor flat = reshape(z, {1, m.endo_patches() * D});
    Tensor y_std = add_row(matmul(flat, m.W_head), m.b_head);
    Tensor y_hat = scalar_add(scalar_mul(y_std, iny.std), iny.mean);

    ForecastResult r;
    r.y_hat_std = y_std.value();
    r.y_hat = y_hat.value();
    r.y_hat_tensor = y_hat;
    r.inst_mean = iny.mean;
    r.inst_std = iny.std;
    return r;
}

// Read-only ablation view: same weights, future tokens zeroed post-embedding.
struct AblatedView {
    ExoTSTModel* model = nullptr;
};

inline AblatedView ablate_future(ExoTSTModel& m) { return {&m}; }

inline ForecastResult forward(const AblatedView& view,
                              const WindowSample& sample, Mode mode,
                              ModelTrace* trace = nullptr) {
    return forward(*view.model, sample, mode, trace, true);
}

// Mean of squared elementwise differences.
inline double forecast_loss(const std::vector<double>& y_hat,
                            const std::vector<double>& y) {
    if (y_hat.size() != y.size())
        throw ShapeError("loss: prediction length " +
                         std::to_string(y_hat.size()) +
                         " does not match target length " +
                         std::to_string(y.size()));
    if (y_hat.empty()) throw ContractError("loss: empty inputs");
    double s = 0.0;
    for (std::size_t i = 0; i < y.size(); ++i) {
        const double d = y_hat[i] - y[i];
        s += d * d;
    }
    return s / static_cast<double>(y.size());
}

// Taped per-sample training loss against the window's future targets.
inline Tensor sample_loss(ExoTSTModel& m, const WindowSample& sample, Mode mode,
                          bool ablate_future_tokens = false) {
    ForecastResult r = forward(m, sample, mode, nullptr, ablate_future_tokens);
    return mse_loss(r.y_hat_tensor, sample.y_future);
}

inline Tensor sample_loss(const AblatedView& view, const WindowSample& sample,
                          Mode mode) {
    return sample_loss(*view.model, sample, mode, true);
}

namespace detail {

// One batch-norm site applied across a mini-batch: the token matrices are
// stacked along the row axis so train-mode statistics cover every token in
// the batch, then split back apart. Eval mode normalizes row-wise with the
// running buffers, so stacking changes nothing there.
inline std::vector<Tensor> batch_norm_across(const std::vector<Tensor>& rows,
                                             BatchNormParams& bn, Mode mode) {
    Tensor normed = apply_batch_norm(concat_rows(rows), bn, mode);
    std::vector<Tensor> out;
    out.reserve(rows.size());
    std::size_t off = 0;
    for (const Tensor& r : rows) {
        out.push_back(slice_rows(normed, off, off + r.dim(0)));
        off += r.dim(0);
    }
    return out;
}

// Encoder layer over a batch of token matrices: attention and the MLP act
// per matrix, the two normalizations act across the whole batch.
inline std::vector<Tensor> encoder_layer_batch(std::vector<Tensor> xs,
                                               EncoderLayerParams& p,
                                               Mode mode) {
    std::vector<Tensor> r;
    r.reserve(xs.size());
    for (const Tensor& x : xs)
        r.push_back(add(x, multi_head_self_attention(x, p.attn)));
    std::vector<Tensor> y1 = batch_norm_across(r, p.norm1, mode);
    r.clear();
    for (const Tensor& y : y1) r.push_back(add(y, feed_forward(y, p.ffn)));
    return batch_norm_across(r, p.norm2, mode);
}

inline std::vector<Tensor> decoder_layer_batch(
    std::vector<Tensor> xs, const std::vector<Tensor>& memories,
    DecoderLayerParams& p, Mode mode) {
    std::vector<Tensor> r;
    r.reserve(xs.size());
    for (const Tensor& x : xs)
        r.push_back(add(x, multi_head_self_attention(x, p.self_attn)));
    std::vector<Tensor> y1 = batch_norm_across(r, p.norm1, mode);
    r.clear();
    for (std::size_t b = 0; b < y1.size(); ++b)
        r.push_back(add(
            y1[b], multi_head_cross_attention(y1[b], memories[b], p.cross_attn)));
    std::vector<Tensor> y2 = batch_norm_across(r, p.norm2, mode);
    r.clear();
    for (const Tensor& y : y2) r.push_back(add(y, feed_forward(y, p.ffn)));
    return batch_norm_across(r, p.norm3, mode);
}

}  // namespace detail

// Forward over a whole mini-batch with batch-wide normalization statistics:
// attention, fusion, and the head act per window, while every encoder and
// decoder norm site sees the tokens of all windows (and exogenous channels)
// in the batch at once. Returns one taped (1, f) prediction per window in
// the space the windows are built in. In eval mode this reproduces the
// per-sample forward exactly.
inline std::vector<Tensor> forward_batch_standardized(
    ExoTSTModel& m, const std::vector<WindowSample>& set,
    const std::vector<std::size_t>& idx, Mode mode) {
    if (idx.empty()) throw ContractError("forward batch: no samples");
    const ExoTSTConfig& cfg = m.cfg;
    const PatchConfig pc = patch_config(cfg);
    const std::size_t B = idx.size(), C = cfg.channels, D = cfg.model_dim;

    std::vector<Tensor> past_tok(B * C), fut_tok(B * C), endo_tok(B);
    std::vector<InstanceNorm> iny(B);
    for (std::size_t b = 0; b < B; ++b) {
        const WindowSample& sample = set[idx[b]];
        detail::check_sample_dims(cfg, sample);
        std::vector<Tensor> past_patch, fut_patch;
        for (std::size_t c = 0; c < C; ++c) {
            past_patch.push_back(patchify(sample.X_past[c], pc));
            fut_patch.push_back(patchify(sample.X_future[c], pc));
        }
        EmbeddingParams past_embed{m.exo_W_p, m.exo_W_pos, m.e_agg_past};
        EmbeddingParams fut_embed{m.exo_W_p, m.exo_W_pos, m.e_agg_future};
        TokenSequence past_seq = embed_tokens(past_patch, past_embed, true);
        TokenSequence fut_seq = embed_tokens(fut_patch, fut_embed, true);
        for (std::size_t c = 0; c < C; ++c) {
            past_tok[b * C + c] = channel_of(past_seq.tokens, c);
            fut_tok[b * C + c] = channel_of(fut_seq.tokens, c);
        }
        iny[b] = instance_normalize(sample.y_past);
        EmbeddingParams endo_embed{m.endo_W_p, m.endo_W_pos, m.e_agg_past};
        TokenSequence endo_seq =
            embed_tokens({patchify(iny[b].values, pc)}, endo_embed, false);
        endo_tok[b] = channel_of(endo_seq.tokens, 0);
    }

    for (std::size_t l = 0; l < cfg.encoder_layers; ++l) {
        past_tok = detail::encoder_layer_batch(std::move(past_tok),
                                               m.past_encoder[l], mode);
        fut_tok = detail::encoder_layer_batch(std::move(fut_tok),
                                              m.future_encoder[l], mode);
    }

    std::vector<Tensor> memories(B);
    for (std::size_t b = 0; b < B; ++b) {
        std::vector<Tensor> h_p, h_f;
        for (std::size_t c = 0; c < C; ++c) {
            auto fused =
                fuse_stack(past_tok[b * C + c], fut_tok[b * C + c], m.fusion);
            h_p.push_back(fused.first);
            h_f.push_back(fused.second);
        }
        memories[b] = assemble_decoder_memory(h_p, h_f).O_flat;
    }

    for (std::size_t l = 0; l < cfg.decoder_layers; ++l)
        endo_tok = detail::decoder_layer_batch(std::move(endo_tok), memories,
                                               m.decoder[l], mode);

    std::vector<Tensor> preds(B);
    for (std::size_t b = 0; b < B; ++b) {
        Tensor flat = reshape(endo_tok[b], {1, m.endo_patches() * D});
        Tensor y_std = add_row(matmul(flat, m.W_head), m.b_head);
        preds[b] = scalar_add(scalar_mul(y_std, iny[b].std), iny[b].mean);
    }
    return preds;
}

// Mean loss of a mini-batch under batch-wide normalization statistics. The
// training harness picks this overload up for the full model; models without
// batch-coupled normalization fall back to averaging per-sample losses.
inline Tensor batch_loss(ExoTSTModel& m, const std::vector<WindowSample>& set,
                         const std::vector<std::size_t>& idx, Mode mode) {
    std::vector<Tensor> preds = forward_batch_standardized(m, set, idx, mode);
    std::vector<Tensor> losses;
    losses.reserve(preds.size());
    for (std::size_t b = 0; b < preds.size(); ++b)
        losses.push_back(mse_loss(preds[b], set[idx[b]].y_future));
    return mean_of_scalars(losses);
}

inline std::vector<double> predict_standardized(ExoTSTModel& m,
                                                const WindowSample& sample) {
    return forward(m, sample, Mode::eval).y_hat;
}

inline std::vector<double> predict_standardized(const AblatedView& view,
                                                const WindowSample& sample) {
    return forward(view, sample, Mode::eval).y_hat;
}

// --- checkpoint serialization -----------------------------------------------
// Layout: magic "EXOTST01", then a little-endian uint32 tensor count, then per
// tensor: uint16 name length, UTF-8 name, uint8 rank, rank uint32 dims,
// row-major float32 data; finally the config as UTF-8 key=value lines.

namespace detail {

inline void put_u16(std::string& out, std::uint16_t v) {
    out.push_back(static_cast<char>(v & 0xff));
    out.push_back(static_cast<char>((v >> 8) & 0xff));
}

inline void put_u32(std::string& out, std::uint32_t v) {
    for (int b = 0; b < 4; ++b)
        out.push_back(static_cast<char>((v >> (8 * b)) & 0xff));
}

inline void put_f32(std::string& out, float v) {
    put_u32(out, std::bit_cast<std::uint32_t>(v));
}

struct ByteReader {
    const std::string& data;
    std::size_t pos = 0;

    void need(std::size_t n, const char* what) const {
        if (pos + n > data.size())
            throw DataError("checkpoint: unexpected end of file at byte " +
                            std::to_string(pos) + " while reading " + what);
    }
    std::uint8_t u8(const char* what) {
        need(1, what);
        return static_cast<std::uint8_t>(data[pos++]);
    }
    std::uint16_t u16(const char* what) {
        need(2, what);
        std::uint16_t v = 0;
        for (int b = 0; b < 2; ++b)
            v |= static_cast<std::uint16_t>(
                static_cast<std::uint8_t>(data[pos + b]))
                 << (8 * b);
        pos += 2;
        return v;
    }
    std::uint32_t u32(const char* what) {
        need(4, what);
        std::uint32_t v = 0;
        for (int b = 0; b < 4; ++b)
            v |= static_cast<std::uint32_t>(
                static_cast<std::uint8_t>(data[pos + b]))
                 << (8 * b);
        pos += 4;
        return v;
    }
    std::string bytes(std::size_t n, const char* what) {
        need(n, what);
        std::string s = data.substr(pos, n);
        pos += n;
        return s;
    }
    float f32(const char* what) { return std::bit_cast<float>(u32(what)); }
};

inline std::string config_text(const ExoTSTConfig& cfg) {
    std::string out;
    auto kv = [&out](const std::string& k, const std::string& v) {
        out += k + "=" + v + "\n";
    };
    kv("lookback", std::to_string(cfg.lookback));
    kv("horizon", std::to_string(cfg.horizon));
    kv("patch_length", std::to_string(cfg.patch_length));
    kv("stride", std::to_string(cfg.stride));
    kv("model_dim", std::to_string(cfg.model_dim));
    kv("heads", std::to_string(cfg.heads));
    kv("ffn_dim", std::to_string(cfg.ffn_dim));
    kv("encoder_layers", std::to_string(cfg.encoder_layers));
    kv("fusion_layers", std::to_string(cfg.fusion_layers));
    kv("decoder_layers", std::to_string(cfg.decoder_layers));
    kv("channels", std::to_string(cfg.channels));
    kv("learning_rate", csv::g17(cfg.learning_rate));
    kv("max_epochs", std::to_string(cfg.max_epochs));
    kv("patience", std::to_string(cfg.patience));
    kv("seed", std::to_string(cfg.seed));
    return out;
}

inline ExoTSTConfig parse_config_text(const std::string& text) {
    ExoTSTConfig cfg;
    std::size_t start = 0;
    auto as_size = [](const std::string& v, const std::string& k) {
        char* end = nullptr;
        const unsigned long long r = std::strtoull(v.c_str(), &end, 10);
        if (end == v.c_str() || *end != '\0')
            throw DataError("checkpoint: bad value '" + v + "' for key " + k);
        return static_cast<std::size_t>(r);
    };
    while (start < text.size()) {
        std::size_t nl = text.find('\n', start);
        if (nl == std::string::npos) nl = text.size();
        const std::string line = text.substr(start, nl - start);
        start = nl + 1;
        if (line.empty()) continue;
        const std::size_t eq = line.find('=');
        if (eq == std::string::npos)
            throw DataError("checkpoint: malformed config line '" + line + "'");
        const std::string k = line.substr(0, eq), v = line.substr(eq + 1);
        if (k == "lookback") cfg.lookback = as_size(v, k);
        else if (k == "horizon") cfg.horizon = as_size(v, k);
        else if (k == "patch_length") cfg.patch_length = as_size(v, k);
        else if (k == "stride") cfg.stride = as_size(v, k);
        else if (k == "model_dim") cfg.model_dim = as_size(v, k);
        else if (k == "heads") cfg.heads = as_size(v, k);
        else if (k == "ffn_dim") cfg.ffn_dim = as_size(v, k);
        else if (k == "encoder_layers") cfg.encoder_layers = as_size(v, k);
        else if (k == "fusion_layers") cfg.fusion_layers = as_size(v, k);
        else if (k == "decoder_layers") cfg.decoder_layers = as_size(v, k);
        else if (k == "channels") cfg.channels = as_size(v, k);
        else if (k == "learning_rate") {
            char* end = nullptr;
            cfg.learning_rate = std::strtod(v.c_str(), &end);
            if (end == v.c_str() || *end != '\0')
                throw DataError("checkpoint: bad value '" + v + "' for key " + k);
        } else if (k == "max_epochs") cfg.max_epochs = as_size(v, k);
        else if (k == "patience") cfg.patience = as_size(v, k);
        else if (k == "seed") cfg.seed = as_size(v, k);
        else throw DataError("checkpoint: unknown config key '" + k + "'");
    }
    return cfg;
}

}  // namespace detail

inline void save_checkpoint(const ExoTSTModel& m, const std::string& path) {
    detail::Named all = m.parameters();
    for (auto& b : m.buffers()) all.push_back(b);
    std::string out = "EXOTST01";
    detail::put_u32(out, static_cast<std::uint32_t>(all.size()));
    for (const auto& [name, t] : all) {
        detail::put_u16(out, static_cast<std::uint16_t>(name.size()));
        out += name;
        out.push_back(static_cast<char>(t.rank()));
        for (std::size_t i = 0; i < t.rank(); ++i)
            detail::put_u32(out, static_cast<std::uint32_t>(t.dim(i)));
        for (double v : t.value())
            detail::put_f32(out, static_cast<float>(v));
    }
    out += detail::config_text(m.cfg);
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw DataError("checkpoint: cannot open '" + path + "' for writing");
    f.write(out.data(), static_cast<std::streamsize>(out.size()));
    if (!f) throw DataError("checkpoint: short write to '" + path + "'");
}

// Rebuilds the model from the embedded config, then overwrites every
// parameter and buffer from the file. Optionally verifies the architecture
// against an expected config, naming each mismatched field.
inline ExoTSTModel load_checkpoint(const std::string& path,
                                   const ExoTSTConfig* expected = nullptr) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw DataError("checkpoint: cannot open '" + path + "'");
    std::string data((std::istreambuf_iterator<char>(f)),
                     std::istreambuf_iterator<char>());
    detail::ByteReader r{data};
    if (r.bytes(8, "magic") != "EXOTST01")
        throw DataError("checkpoint: bad magic at byte 0, not an EXOTST01 file");
    const std::uint32_t count = r.u32("tensor count");
    std::map<std::string, std::pair<Shape, std::vector<double>>> loaded;
    for (std::uint32_t i = 0; i < count; ++i) {
        const std::uint16_t name_len = r.u16("name length");
        const std::string name = r.bytes(name_len, "tensor name");
        const std::uint8_t rank = r.u8("rank");
        if (rank < 1 || rank > 3)
            throw DataError("checkpoint: tensor '" + name + "' has rank " +
                            std::to_string(rank) + " at byte " +
                            std::to_string(r.pos - 1));
        Shape shape;
        std::size_t n = 1;
        for (std::uint8_t d = 0; d < rank; ++d) {
            shape.push_back(r.u32("dimension"));
            n *= shape.back();
        }
        std::vector<double> values;
        values.reserve(n);
        for (std::size_t v = 0; v < n; ++v)
            values.push_back(static_cast<double>(r.f32("tensor data")));
        if (!loaded.emplace(name, std::make_pair(shape, std::move(values)))
                 .second)
            throw DataError("checkpoint: duplicate tensor '" + name + "'");
    }
    const ExoTSTConfig cfg =
        detail::parse_config_text(data.substr(r.pos));
    if (expected) {
        std::vector<std::string> bad;
        auto check = [&bad](const char* k, std::size_t a, std::size_t b) {
            if (a != b)
                bad.push_back(std::string(k) + " " + std::to_string(a) +
                              " vs " + std::to_string(b));
        };
        check("lookback", cfg.lookback, expected->lookback);
        check("horizon", cfg.horizon, expected->horizon);
        check("patch_length", cfg.patch_length, expected->patch_length);
        check("stride", cfg.stride, expected->stride);
        check("model_dim", cfg.model_dim, expected->model_dim);
        check("heads", cfg.heads, expected->heads);
        check("ffn_dim", cfg.ffn_dim, expected->ffn_dim);
        check("encoder_layers", cfg.encoder_layers, expected->encoder_layers);
        check("fusion_layers", cfg.fusion_layers, expected->fusion_layers);
        check("decoder_layers", cfg.decoder_layers, expected->decoder_layers);
        check("channels", cfg.channels, expected->channels);
        if (!bad.empty()) {
            std::string msg = "checkpoint: architecture mismatch: " + bad[0];
            for (std::size_t i = 1; i < bad.size(); ++i) msg += "; " + bad[i];
            throw ConfigError(msg);
        }
    }
    ExoTSTModel m = init_model(cfg);
    detail::Named all = m.parameters();
    for (auto& b : m.buffers()) all.push_back(b);
    if (all.size() != loaded.size())
        throw DataError("checkpoint: file has " + std::to_string(loaded.size()) +
                        " tensors, model needs " + std::to_string(all.size()));
    for (auto& [name, t] : all) {
        auto it = loaded.find(name);
        if (it == loaded.end())
            throw DataError("checkpoint: missing tensor '" + name + "'");
        if (it->second.first != t.shape())
            throw DataError("checkpoint: tensor '" + name + "' has shape " +
                            shape_str(it->second.first) + ", model expects " +
                            shape_str(t.shape()));
        t.value() = it->second.second;
    }
    return m;
}

}  // namespace exotst
