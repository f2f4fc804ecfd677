#pragma once
// Bidirectional aggregate-token cross-attention between the past-exogenous
// and future-exogenous encoder outputs, iterated over a layer stack, plus
// assembly of the fused sequences into the decoder memory.

#include <cmath>
#include <cstddef>
#include <string>
#include <utility>
#include <vector>

#include "exotst/attention.hpp"
#include "exotst/errors.hpp"
#include "exotst/ops.hpp"
#include "exotst/tensor.hpp"

namespace exotst {

// One fusion direction: the querying stream's agg token reads a layer-normed
// concatenation of itself and the other stream's patch tokens. Projections
// are D x D, split column-wise into H heads of width D/H; the concatenated
// head outputs are the result directly, with no output projection and no
// feed-forward afterwards.
struct FusionDirection {
    Tensor W_q, W_k, W_v;  // each D x D
    LayerNormParams ln;    // applied to the key/value sequence
};

struct FusionLayerParams {
    FusionDirection past;    // past agg queries future patches
    FusionDirection future;  // future agg queries past patches
    std::size_t heads = 1;
};

// Decoder memory: per channel the fused past and future sequences are
// concatenated along the token axis, channels stacked, then flattened
// channel-major into one token axis.
struct FusedMemory {
    Tensor O;       // (C, (N'+1)+(N''+1), D)
    Tensor O_flat;  // (C * ((N'+1)+(N''+1)), D), pure reshape of O
};

namespace detail {

inline Tensor fuse_direction(const Tensor& own, const Tensor& other,
                             const FusionDirection& dir, std::size_t H,
                             AttentionTrace* trace) {
    const std::size_t D = own.dim(1);
    const std::size_t Dh = D / H;
    Tensor own_agg = slice_rows(own, 0, 1);
    Tensor ctx = concat_rows({own_agg, slice_rows(other, 1, other.dim(0))});
    Tensor kv = layer_norm_rows(ctx, dir.ln.gamma, dir.ln.beta, dir.ln.eps);
    if (trace) {
        trace->head_maps.clear();
        trace->n_q = 1;
        trace->n_k = ctx.dim(0);
    }
    const double scale = 1.0 / std::sqrt(static_cast<double>(Dh));
    std::vector<Tensor> heads;
    heads.reserve(H);
    for (std::size_t h = 0; h < H; ++h) {
        Tensor q = matmul(own_agg, slice_cols(dir.W_q, h * Dh, (h + 1) * Dh));
        Tensor k = matmul(kv, slice_cols(dir.W_k, h * Dh, (h + 1) * Dh));
        Tensor v = matmul(kv, slice_cols(dir.W_v, h * Dh, (h + 1) * Dh));
        Tensor probs = softmax_rows(scalar_mul(matmul(q, transpose2(k)), scale));
        if (trace) trace->head_maps.push_back(probs.value());
        heads.push_back(matmul(probs, v));
    }
    Tensor h_agg = add(own_agg, concat_cols(heads));
    return concat_rows({h_agg, slice_rows(own, 1, own.dim(0))});
}

inline void check_fusion_inputs(const Tensor& e_p, const Tensor& e_f,
                                const FusionLayerParams& params) {
    require_rank2(e_p, "fuse_once");
    require_rank2(e_f, "fuse_once");
    if (e_p.dim(0) < 2 || e_f.dim(0) < 2)
        throw ContractError(
            "fuse_once: both sequences need an aggregation token at index 0 "
            "plus at least one patch token, got " +
            shape_str(e_p.shape()) + " and " + shape_str(e_f.shape()));
    if (e_p.dim(1) != e_f.dim(1))
        throw ShapeError("fuse_once: token widths differ, " +
                         shape_str(e_p.shape()) + " vs " +
                         shape_str(e_f.shape()));
    const std::size_t D = e_p.dim(1);
    if (params.heads < 1 || D % params.heads != 0)
        throw ConfigError("fuse_once: head count " +
                          std::to_string(params.heads) +
                          " must divide token width " + std::to_string(D));
    for (const FusionDirection* dir : {&params.past, &params.future}) {
        if (dir->W_q.shape() != Shape{D, D} || dir->W_k.shape() != Shape{D, D} ||
            dir->W_v.shape() != Shape{D, D})
            throw ShapeError("fuse_once: projections must be (" +
                             std::to_string(D) + "," + std::to_string(D) + ")");
    }
}

}  // namespace detail

// Both directions read the original inputs (parallel update): h_p's agg token
// attends over [e_p_agg, e_f patches], h_f's over [e_f_agg, e_p patches], and
// each output keeps its own patch tokens unchanged.
inline std::pair<Tensor, Tensor> fuse_once(const Tensor& e_p, const Tensor& e_f,
                                           const FusionLayerParams& params,
                                           AttentionTrace* past_trace = nullptr,
                                           AttentionTrace* future_trace = nullptr) {
    detail::check_fusion_inputs(e_p, e_f, params);
    Tensor h_p = detail::fuse_direction(e_p, e_f, params.past, params.heads,
                                        past_trace);
    Tensor h_f = detail::fuse_direction(e_f, e_p, params.future, params.heads,
                                        future_trace);
    return {h_p, h_f};
}

struct FusionTracePair {
    AttentionTrace past;
    AttentionTrace future;
};

// Sequential composition; each layer has its own parameters. The refreshed
// agg token is simply the first token of the next layer's input, which is how
// information relayed from the other branch reaches the patch tokens.
inline std::pair<Tensor, Tensor> fuse_stack(
    Tensor e_p, Tensor e_f, const std::vector<FusionLayerParams>& layers,
    std::vector<FusionTracePair>* traces = nullptr) {
    if (layers.empty())
        throw ConfigError("fuse_stack: need at least one fusion layer");
    if (traces) traces->assign(layers.size(), {});
    for (std::size_t i = 0; i < layers.size(); ++i) {
        auto fused = fuse_once(e_p, e_f, layers[i],
                               traces ? &(*traces)[i].past : nullptr,
                               traces ? &(*traces)[i].future : nullptr);
        e_p = fused.first;
        e_f = fused.second;
    }
    return {e_p, e_f};
}

inline FusedMemory assemble_decoder_memory(const std::vector<Tensor>& h_p,
                                           const std::vector<Tensor>& h_f) {
    if (h_p.empty() || h_p.size() != h_f.size())
        throw ContractError("assemble_decoder_memory: need matching non-empty "
                            "channel lists, got " + std::to_string(h_p.size()) +
                            " and " + std::to_string(h_f.size()));
    std::vector<Tensor> per_channel;
    per_channel.reserve(h_p.size());
    for (std::size_t c = 0; c < h_p.size(); ++c)
        per_channel.push_back(concat_rows({h_p[c], h_f[c]}));
    FusedMemory m;
    m.O = stack_channels(per_channel);
    m.O_flat = reshape(m.O, {m.O.dim(0) * m.O.dim(1), m.O.dim(2)});
    return m;
}

}  // namespace exotst
