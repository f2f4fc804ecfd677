#pragma once
// Multi-head self/cross attention with optional map retention, position-wise
// feed-forward, batch normalization with running statistics, and the
// encoder/decoder layer compositions.

#include <cmath>
#include <cstddef>
#include <cstdio>
#include <ostream>
#include <string>
#include <vector>

#include "exotst/csv.hpp"
#include "exotst/errors.hpp"
#include "exotst/ops.hpp"
#include "exotst/tensor.hpp"

namespace exotst {

enum class Mode { train, eval };

// Per-head query/key/value projections of width D/H each, concatenated head
// outputs projected back to D. No biases anywhere in attention.
struct MultiHeadAttentionParams {
    std::vector<Tensor> W_q, W_k, W_v;  // each D x (D/H)
    Tensor W_o;                         // (H * d_v) x D

    std::size_t heads() const { return W_q.size(); }
    std::size_t head_dim() const { return W_q.empty() ? 0 : W_q[0].dim(1); }
};

struct FeedForwardParams {
    Tensor W1;  // D x D_ff
    Tensor b1;  // D_ff
    Tensor W2;  // D_ff x D
    Tensor b2;  // D
};

// Learned scale/shift plus running statistics updated in train mode with
// momentum 0.1. Normalization is over the token axis, per feature.
struct BatchNormParams {
    Tensor gamma, beta;               // learned, shape (D)
    Tensor running_mean, running_var; // buffers, shape (D)
    double momentum = 0.1;
    double eps = 1e-5;
};

struct LayerNormParams {
    Tensor gamma, beta;  // shape (D)
    double eps = 1e-5;
};

struct EncoderLayerParams {
    MultiHeadAttentionParams attn;
    FeedForwardParams ffn;
    BatchNormParams norm1, norm2;
};

struct DecoderLayerParams {
    MultiHeadAttentionParams self_attn;
    MultiHeadAttentionParams cross_attn;
    FeedForwardParams ffn;
    BatchNormParams norm1, norm2, norm3;
};

// Detached per-head softmax maps captured during a forward pass.
struct AttentionTrace {
    std::vector<std::vector<double>> head_maps;  // row-major n_q x n_k each
    std::size_t n_q = 0;
    std::size_t n_k = 0;

    bool empty() const { return head_maps.empty(); }
};

namespace detail {

inline void check_attention_params(const MultiHeadAttentionParams& p,
                                   std::size_t D) {
    if (p.W_q.empty() || p.W_q.size() != p.W_k.size() ||
        p.W_q.size() != p.W_v.size())
        throw ContractError("attention: inconsistent head parameter counts");
    for (std::size_t h = 0; h < p.W_q.size(); ++h) {
        if (p.W_q[h].dim(0) != D || p.W_k[h].dim(0) != D || p.W_v[h].dim(0) != D)
            throw ShapeError("attention: head " + std::to_string(h) +
                             " projections do not accept width " +
                             std::to_string(D));
    }
    if (p.W_o.dim(0) != p.W_q.size() * p.W_v[0].dim(1))
        throw ShapeError("attention: output projection " +
                         shape_str(p.W_o.shape()) + " does not match " +
                         std::to_string(p.W_q.size()) + " heads of width " +
                         std::to_string(p.W_v[0].dim(1)));
}

}  // namespace detail

// Scaled dot-product attention, queries from one stream and keys/values from
// another. Scale is 1/sqrt(d_k). When trace is non-null the per-head softmax
// maps are copied out (detached) for later export.
inline Tensor multi_head_cross_attention(const Tensor& query,
                                         const Tensor& context,
                                         const MultiHeadAttentionParams& params,
                                         AttentionTrace* trace = nullptr) {
    detail::require_rank2(query, "attention");
    detail::require_rank2(context, "attention");
    if (query.dim(1) != context.dim(1))
        throw ShapeError("attention: query width " + shape_str(query.shape()) +
                         " differs from context width " +
                         shape_str(context.shape()));
    detail::check_attention_params(params, query.dim(1));
    const double scale = 1.0 / std::sqrt(static_cast<double>(params.W_q[0].dim(1)));
    if (trace) {
        trace->head_maps.clear();
        trace->n_q = query.dim(0);
        trace->n_k = context.dim(0);
    }
    std::vector<Tensor> heads;
    heads.reserve(params.heads());
    for (std::size_t h = 0; h < params.heads(); ++h) {
        Tensor q = matmul(query, params.W_q[h]);
        Tensor k = matmul(context, params.W_k[h]);
        Tensor v = matmul(context, params.W_v[h]);
        Tensor probs = softmax_rows(scalar_mul(matmul(q, transpose2(k)), scale));
        if (trace) trace->head_maps.push_back(probs.value());
        heads.push_back(matmul(probs, v));
    }
    return matmul(concat_cols(heads), params.W_o);
}

inline Tensor multi_head_self_attention(const Tensor& x,
                                        const MultiHeadAttentionParams& params,
                                        AttentionTrace* trace = nullptr) {
    return multi_head_cross_attention(x, x, params, trace);
}

inline Tensor feed_forward(const Tensor& x, const FeedForwardParams& p) {
    Tensor h = relu(add_row(matmul(x, p.W1), p.b1));
    return add_row(matmul(h, p.W2), p.b2);
}

// Train mode normalizes with the current batch statistics and folds them into
// the running buffers; eval mode normalizes with the buffers unchanged.
inline Tensor apply_batch_norm(const Tensor& x, BatchNormParams& bn, Mode mode) {
    if (mode == Mode::train) {
        std::vector<double> bm, bv;
        Tensor y = batch_norm_cols(x, bn.gamma, bn.beta, bn.eps, &bm, &bv);
        for (std::size_t j = 0; j < bm.size(); ++j) {
            bn.running_mean.value()[j] =
                (1.0 - bn.momentum) * bn.running_mean.value()[j] +
                bn.momentum * bm[j];
            bn.running_var.value()[j] =
                (1.0 - bn.momentum) * bn.running_var.value()[j] +
                bn.momentum * bv[j];
        }
        return y;
    }
    return batch_norm_cols_stats(x, bn.gamma, bn.beta, bn.running_mean.value(),
                                 bn.running_var.value(), bn.eps);
}

inline Tensor apply_layer_norm(const Tensor& x, const LayerNormParams& ln) {
    return layer_norm_rows(x, ln.gamma, ln.beta, ln.eps);
}

// y1 = Norm(x + SelfAttn(x)); y2 = Norm(y1 + FFN(y1))
inline Tensor encoder_layer_forward(const Tensor& x, EncoderLayerParams& p,
                                    Mode mode,
                                    AttentionTrace* self_trace = nullptr) {
    Tensor y1 = apply_batch_norm(
        add(x, multi_head_self_attention(x, p.attn, self_trace)), p.norm1, mode);
    return apply_batch_norm(add(y1, feed_forward(y1, p.ffn)), p.norm2, mode);
}

// y1 = Norm(x + SelfAttn(x)); y2 = Norm(y1 + CrossAttn(y1, memory));
// y3 = Norm(y2 + FFN(y2))
inline Tensor decoder_layer_forward(const Tensor& x, const Tensor& memory,
                                    DecoderLayerParams& p, Mode mode,
                                    AttentionTrace* self_trace = nullptr,
                                    AttentionTrace* cross_trace = nullptr) {
    Tensor y1 = apply_batch_norm(
        add(x, multi_head_self_attention(x, p.self_attn, self_trace)), p.norm1,
        mode);
    Tensor y2 = apply_batch_norm(
        add(y1, multi_head_cross_attention(y1, memory, p.cross_attn, cross_trace)),
        p.norm2, mode);
    return apply_batch_norm(add(y2, feed_forward(y2, p.ffn)), p.norm3, mode);
}

// One CSV row per attention-map cell, weights printed losslessly. Token index
// 0 is labelled "agg" when the corresponding stream carries an aggregation
// token; patch indices count from 0 after it.
inline void export_attention_csv(const AttentionTrace& trace, std::size_t head,
                                 std::ostream& out, bool query_has_agg = false,
                                 bool key_has_agg = false) {
    if (trace.empty())
        throw ContractError("export_attention_csv: no retained attention map; "
                            "run a forward pass with map retention enabled");
    if (head >= trace.head_maps.size())
        throw ConfigError("export_attention_csv: head " + std::to_string(head) +
                          " out of range, have " +
                          std::to_string(trace.head_maps.size()));
    auto label = [](std::size_t idx, bool has_agg) {
        if (has_agg) return idx == 0 ? std::string("agg")
                                     : std::to_string(idx - 1);
        return std::to_string(idx);
    };
    const std::vector<double>& map = trace.head_maps[head];
    out << "query_patch,key_patch,weight\n";
    for (std::size_t i = 0; i < trace.n_q; ++i)
        for (std::size_t j = 0; j < trace.n_k; ++j)
            out << label(i, query_has_agg) << ',' << label(j, key_has_agg)
                << ',' << csv::g17(map[i * trace.n_k + j]) << '\n';
}

}  // namespace exotst
