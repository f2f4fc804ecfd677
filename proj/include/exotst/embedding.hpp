#pragma once
// Instance normalization, overlapping patch extraction with tail padding, and
// linear patch embedding with positional encoding and an aggregation token.

#include <cmath>
#include <cstddef>
#include <string>
#include <utility>
#include <vector>

#include "exotst/errors.hpp"
#include "exotst/ops.hpp"
#include "exotst/tensor.hpp"

namespace exotst {

struct PatchConfig {
    std::size_t patch_length = 16;
    std::size_t stride = 8;
    std::size_t model_dim = 64;
};

struct NormPair {
    double mean = 0.0;
    double std = 1.0;
};

// Channel-major token block. When has_agg is set, index 0 of the token axis of
// every channel is the aggregation token.
struct TokenSequence {
    Tensor tokens;  // (channels, n_tokens, D)
    bool has_agg = false;
    std::vector<NormPair> norm_stats;  // per channel, filled by the caller

    std::size_t channels() const { return tokens.shape()[0]; }
    std::size_t n_tokens() const { return tokens.shape()[1]; }
    std::size_t dim() const { return tokens.shape()[2]; }
};

// W_pos holds one positional column per patch slot plus one dedicated column
// (the last) for the aggregation token.
struct EmbeddingParams {
    Tensor W_p;    // D x P
    Tensor W_pos;  // D x (N_max + 1)
    Tensor e_agg;  // 1 x D

    std::size_t n_max() const { return W_pos.shape()[1] - 1; }
};

struct InstanceNorm {
    std::vector<double> values;
    double mean = 0.0;
    double std = 1.0;
};

// Population standard deviation, clamped below at 1e-5 so constant windows
// normalize to zero instead of dividing by zero.
inline InstanceNorm instance_normalize(const std::vector<double>& series) {
    if (series.empty()) throw ContractError("instance_normalize: empty series");
    InstanceNorm out;
    double mean = 0.0;
    for (double v : series) mean += v;
    mean /= static_cast<double>(series.size());
    double var = 0.0;
    for (double v : series) var += (v - mean) * (v - mean);
    var /= static_cast<double>(series.size());
    double sd = std::sqrt(var);
    if (sd < 1e-5) sd = 1e-5;
    out.mean = mean;
    out.std = sd;
    out.values.reserve(series.size());
    for (double v : series) out.values.push_back((v - mean) / sd);
    return out;
}

inline double denormalize(double v, double mean, double sd) {
    return v * sd + mean;
}

// Patch j covers input indices [j*S, j*S + P); indices past the end repeat the
// last value. A series shorter than P is implicitly padded to P first. The
// count is floor((max(I,P) - P) / S) + 2: all fully interior windows plus one
// tail window that is at least partially padding.
inline Tensor patchify(const std::vector<double>& series, const PatchConfig& cfg) {
    if (series.empty()) throw ContractError("patchify: empty series");
    if (cfg.patch_length < 1 || cfg.stride < 1 ||
        cfg.stride > cfg.patch_length)
        throw ConfigError("patchify: require 1 <= stride <= patch_length, got "
                          "stride " + std::to_string(cfg.stride) +
                          ", patch_length " + std::to_string(cfg.patch_length));
    const std::size_t P = cfg.patch_length;
    const std::size_t S = cfg.stride;
    const std::size_t I = series.size();
    const std::size_t eff = I < P ? P : I;
    const std::size_t N = (eff - P) / S + 2;
    std::vector<double> data(P * N);
    for (std::size_t j = 0; j < N; ++j) {
        for (std::size_t p = 0; p < P; ++p) {
            std::size_t idx = j * S + p;
            if (idx >= I) idx = I - 1;
            data[p * N + j] = series[idx];
        }
    }
    return Tensor::from_vector({P, N}, std::move(data));
}

inline std::size_t patch_count(std::size_t input_length, const PatchConfig& cfg) {
    const std::size_t eff =
        input_length < cfg.patch_length ? cfg.patch_length : input_length;
    return (eff - cfg.patch_length) / cfg.stride + 2;
}

// Token n of a channel is W_p * patch_n + W_pos[:, n]. With attach_agg the
// learned aggregation vector plus its dedicated positional column (the last of
// W_pos) is prepended at token index 0. All channels share the parameters.
inline TokenSequence embed_tokens(const std::vector<Tensor>& patches,
                                  const EmbeddingParams& params,
                                  bool attach_agg) {
    if (patches.empty()) throw ContractError("embed_tokens: no channels");
    const std::size_t P = params.W_p.shape()[1];
    const std::size_t n_max = params.n_max();
    std::vector<Tensor> per_channel;
    per_channel.reserve(patches.size());
    for (const Tensor& pt : patches) {
        detail::require_rank2(pt, "embed_tokens");
        if (pt.shape()[0] != P)
            throw ShapeError("embed_tokens: patch length " +
                             std::to_string(pt.shape()[0]) +
                             " does not match W_p " + shape_str(params.W_p.shape()));
        const std::size_t N = pt.shape()[1];
        if (N > n_max)
            throw ConfigError("embed_tokens: " + std::to_string(N) +
                              " patches exceed the positional table of " +
                              std::to_string(n_max) + " slots");
        Tensor tok = transpose2(matmul(params.W_p, pt));          // N x D
        Tensor pos = transpose2(slice_cols(params.W_pos, 0, N));  // N x D
        tok = add(tok, pos);
        if (attach_agg) {
            Tensor agg_pos =
                transpose2(slice_cols(params.W_pos, n_max, n_max + 1));
            Tensor agg = add(params.e_agg, agg_pos);  // 1 x D
            tok = concat_rows({agg, tok});
        }
        per_channel.push_back(tok);
    }
    TokenSequence seq;
    seq.tokens = stack_channels(per_channel);
    seq.has_agg = attach_agg;
    return seq;
}

// Classic interleaved sin/cos table, row-major D x n_cols: column n encodes
// position n, row 2i uses sin(n * w_i), row 2i+1 uses cos(n * w_i) with
// w_i = 10000^(-2i/D). Used to initialize the learnable positional table.
inline std::vector<double> sinusoid_table(std::size_t D, std::size_t n_cols) {
    std::vector<double> out(D * n_cols);
    for (std::size_t d = 0; d < D; ++d) {
        const double i = static_cast<double>(d / 2);
        const double w =
            std::pow(10000.0, -2.0 * i / static_cast<double>(D));
        for (std::size_t n = 0; n < n_cols; ++n) {
            const double angle = static_cast<double>(n) * w;
            out[d * n_cols + n] = (d % 2 == 0) ? std::sin(angle) : std::cos(angle);
        }
    }
    return out;
}

}  // namespace exotst
