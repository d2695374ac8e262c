#pragma once

#include <string>
#include <vector>

#include "ll3da/tensor.hpp"

namespace ll3da {

// Parameter bundles hold shallow copies of registry tensors, so forward
// code reads naturally while the registry stays the single owner of names,
// frozen flags and optimizer state.

struct LinearParams {
    Tensor w;  // [in, out]
    Tensor b;  // [1, out]
};

struct FfnParams {
    LinearParams l1;
    LinearParams l2;
};

struct LayerNormParams {
    Tensor gain;
    Tensor bias;
};

struct AttentionParams {
    LinearParams q, k, v, o;
};

struct BlockParams {
    LayerNormParams ln1;
    AttentionParams attn;
    LayerNormParams ln2;
    FfnParams ffn;
};

LinearParams make_linear(ParamRegistry& reg, const std::string& prefix, int64_t in, int64_t out,
                         Rng& rng, bool frozen);
FfnParams make_ffn(ParamRegistry& reg, const std::string& prefix, int64_t in, int64_t hidden,
                   int64_t out, Rng& rng, bool frozen);
LayerNormParams make_layer_norm(ParamRegistry& reg, const std::string& prefix, int64_t dim,
                                bool frozen);
AttentionParams make_attention(ParamRegistry& reg, const std::string& prefix, int64_t d_q,
                               int64_t d_kv, Rng& rng, bool frozen);
BlockParams make_block(ParamRegistry& reg, const std::string& prefix, int64_t d, int64_t ffn_hidden,
                       Rng& rng, bool frozen);

Tensor linear(const Tensor& x, const LinearParams& p);
Tensor ffn_forward(const Tensor& x, const FfnParams& p);  // linear-GELU-linear

/// Multi-head attention; queries from `q_in`, keys/values from `kv_in`.
/// `mask` is row-major [q_rows * kv_rows], 1 = allowed; empty = all allowed.
Tensor multi_head_attention(const Tensor& q_in, const Tensor& kv_in, int heads,
                            const AttentionParams& p, const std::vector<uint8_t>& mask);

/// Pre-norm transformer block: x + attn(ln(x)), then x + ffn(ln(x)).
Tensor transformer_block(const Tensor& x, const BlockParams& p, int heads,
                         const std::vector<uint8_t>& self_mask);

}  // namespace ll3da
