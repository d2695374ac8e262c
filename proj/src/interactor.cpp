#include "ll3da/interactor.hpp"

namespace ll3da {

MmtParams MmtParams::create(ParamRegistry& reg, const MmtConfig& cfg, int vocab_size, int d_lm,
                            Rng& rng) {
    if (cfg.d_mmt % cfg.heads != 0) throw data_error("mmt: d_mmt not divisible by heads");
    MmtParams p;
    p.cfg = cfg;
    p.query_tokens =
        reg.add("mmt.query_tokens", Tensor::randn({cfg.n_queries, cfg.d_mmt}, rng, 0.05));
    p.word_emb = reg.add("mmt.word_emb", Tensor::randn({vocab_size, cfg.d_mmt}, rng, 0.05));
    p.pos_emb = reg.add("mmt.pos_emb", Tensor::randn({cfg.max_positions, cfg.d_mmt}, rng, 0.05));
    for (int l = 0; l < cfg.layers; ++l) {
        std::string prefix = "mmt.layer" + std::to_string(l);
        MmtLayerParams lp;
        lp.ln1 = make_layer_norm(reg, prefix + ".ln1", cfg.d_mmt, false);
        lp.self_attn = make_attention(reg, prefix + ".self", cfg.d_mmt, cfg.d_mmt, rng, false);
        lp.scene_proj = make_linear(reg, prefix + ".scene_proj", cfg.d_enc, cfg.d_mmt, rng, false);
        lp.cross_ln = make_layer_norm(reg, prefix + ".cross_ln", cfg.d_mmt, false);
        lp.cross_attn = make_attention(reg, prefix + ".cross", cfg.d_mmt, cfg.d_mmt, rng, false);
        lp.ln2 = make_layer_norm(reg, prefix + ".ln2", cfg.d_mmt, false);
        lp.ffn = make_ffn(reg, prefix + ".ffn", cfg.d_mmt, 4 * cfg.d_mmt, cfg.d_mmt, rng, false);
        p.layers.push_back(std::move(lp));
    }
    p.final_ln = make_layer_norm(reg, "mmt.final_ln", cfg.d_mmt, false);
    p.projector = make_linear(reg, "mmt.projector", cfg.d_mmt, d_lm, rng, false);
    return p;
}

Tensor mmt_forward(const MmtParams& params, const PromptTokens& prompts,
                   const TokenSequence& instruction, const SceneEmbedding& scene) {
    const MmtConfig& cfg = params.cfg;
    if (scene.count() == 0 || !scene.tokens.defined())
        throw data_error("mmt_forward: empty scene embedding");
    if (scene.tokens.shape[1] != cfg.d_enc) throw data_error("mmt_forward: scene width mismatch");
    const int64_t ti = static_cast<int64_t>(instruction.size());
    if (ti > cfg.max_positions) throw data_error("mmt_forward: instruction exceeds max positions");

    const bool early = cfg.fusion == FusionMode::early;
    const int64_t np = prompts.count() > 0 ? prompts.tokens.shape[0] : 0;

    // sequence layout: [queries; prompts (early only); instruction embeddings]
    std::vector<Tensor> rows{params.query_tokens};
    if (early && np > 0) rows.push_back(prompts.tokens);
    if (ti > 0) {
        Tensor emb = embedding_rows(params.word_emb, instruction.ids);
        std::vector<int> positions(ti);
        for (int64_t i = 0; i < ti; ++i) positions[i] = static_cast<int>(i);
        rows.push_back(add(emb, embedding_rows(params.pos_emb, positions)));
    }
    Tensor x = rows.size() == 1 ? rows[0] : concat_rows(rows);
    const int64_t total = x.shape[0];
    // queries and (early-fusion) prompts cross-attend; instruction rows do not
    const int64_t cross_rows = cfg.n_queries + (early ? np : 0);

    for (const MmtLayerParams& lp : params.layers) {
        Tensor normed = layer_norm(x, lp.ln1.gain, lp.ln1.bias, 1e-5);
        x = add(x, multi_head_attention(normed, normed, cfg.heads, lp.self_attn, {}));

        Tensor kv = linear(scene.tokens, lp.scene_proj);
        if (!early && np > 0) kv = concat_rows({kv, prompts.tokens});
        Tensor cq = layer_norm(slice_rows(x, 0, cross_rows), lp.cross_ln.gain, lp.cross_ln.bias,
                               1e-5);
        Tensor cross = multi_head_attention(cq, kv, cfg.heads, lp.cross_attn, {});
        if (cross_rows < total)
            cross = concat_rows({cross, Tensor::zeros({total - cross_rows, cfg.d_mmt})});
        x = add(x, cross);

        x = add(x, ffn_forward(layer_norm(x, lp.ln2.gain, lp.ln2.bias, 1e-5), lp.ffn));
    }

    Tensor queries = slice_rows(x, 0, cfg.n_queries);
    return layer_norm(queries, params.final_ln.gain, params.final_ln.bias, 1e-5);
}

Tensor project_prefix(const MmtParams& params, const Tensor& queries) {
    return linear(queries, params.projector);
}

}  // namespace ll3da
