#include "ll3da/blocks.hpp"

namespace ll3da {

namespace {
constexpr double kInitStd = 0.05;
}

LinearParams make_linear(ParamRegistry& reg, const std::string& prefix, int64_t in, int64_t out,
                         Rng& rng, bool frozen) {
    LinearParams p;
    p.w = reg.add(prefix + ".w", Tensor::randn({in, out}, rng, kInitStd), frozen);
    p.b = reg.add(prefix + ".b", Tensor::zeros({1, out}), frozen);
    return p;
}

FfnParams make_ffn(ParamRegistry& reg, const std::string& prefix, int64_t in, int64_t hidden,
                   int64_t out, Rng& rng, bool frozen) {
    FfnParams p;
    p.l1 = make_linear(reg, prefix + ".l1", in, hidden, rng, frozen);
    p.l2 = make_linear(reg, prefix + ".l2", hidden, out, rng, frozen);
    return p;
}

LayerNormParams make_layer_norm(ParamRegistry& reg, const std::string& prefix, int64_t dim,
                                bool frozen) {
    LayerNormParams p;
    Tensor gain = Tensor::zeros({1, dim});
    for (double& v : *gain.data) v = 1.0;
    p.gain = reg.add(prefix + ".gain", std::move(gain), frozen);
    p.bias = reg.add(prefix + ".bias", Tensor::zeros({1, dim}), frozen);
    return p;
}

AttentionParams make_attention(ParamRegistry& reg, const std::string& prefix, int64_t d_q,
                               int64_t d_kv, Rng& rng, bool frozen) {
    AttentionParams p;
    p.q = make_linear(reg, prefix + ".q", d_q, d_q, rng, frozen);
    p.k = make_linear(reg, prefix + ".k", d_kv, d_q, rng, frozen);
    p.v = make_linear(reg, prefix + ".v", d_kv, d_q, rng, frozen);
    p.o = make_linear(reg, prefix + ".o", d_q, d_q, rng, frozen);
    return p;
}

BlockParams make_block(ParamRegistry& reg, const std::string& prefix, int64_t d, int64_t ffn_hidden,
                       Rng& rng, bool frozen) {
    BlockParams p;
    p.ln1 = make_layer_norm(reg, prefix + ".ln1", d, frozen);
    p.attn = make_attention(reg, prefix + ".attn", d, d, rng, frozen);
    p.ln2 = make_layer_norm(reg, prefix + ".ln2", d, frozen);
    p.ffn = make_ffn(reg, prefix + ".ffn", d, ffn_hidden, d, rng, frozen);
    return p;
}

Tensor linear(const Tensor& x, const LinearParams& p) {
    return add_row_bias(matmul(x, p.w), p.b);
}

Tensor ffn_forward(const Tensor& x, const FfnParams& p) {
    return linear(gelu(linear(x, p.l1)), p.l2);
}

Tensor multi_head_attention(const Tensor& q_in, const Tensor& kv_in, int heads,
                            const AttentionParams& p, const std::vector<uint8_t>& mask) {
    const int64_t d = p.q.w.shape[1];
    if (d % heads != 0) throw numeric_error("multi_head_attention: dim not divisible by heads");
    const int64_t dh = d / heads;
    Tensor q = linear(q_in, p.q);
    Tensor k = linear(kv_in, p.k);
    Tensor v = linear(kv_in, p.v);
    std::vector<Tensor> outs;
    outs.reserve(heads);
    for (int h = 0; h < heads; ++h) {
        Tensor qh = slice_cols(q, h * dh, (h + 1) * dh);
        Tensor kh = slice_cols(k, h * dh, (h + 1) * dh);
        Tensor vh = slice_cols(v, h * dh, (h + 1) * dh);
        outs.push_back(scaled_dot_attention(qh, kh, vh, mask));
    }
    return linear(concat_cols(outs), p.o);
}

Tensor transformer_block(const Tensor& x, const BlockParams& p, int heads,
                         const std::vector<uint8_t>& self_mask) {
    Tensor normed = layer_norm(x, p.ln1.gain, p.ln1.bias, 1e-5);
    Tensor h = add(x, multi_head_attention(normed, normed, heads, p.attn, self_mask));
    return add(h, ffn_forward(layer_norm(h, p.ln2.gain, p.ln2.bias, 1e-5), p.ffn));
}

}  // namespace ll3da
