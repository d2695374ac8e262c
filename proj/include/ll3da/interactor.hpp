#pragma once

#include <vector>

#include "ll3da/blocks.hpp"
#include "ll3da/encoders.hpp"
#include "ll3da/textio.hpp"

namespace ll3da {

enum class FusionMode { early, direct };

struct MmtConfig {
    int layers = 6;
    int heads = 4;
    int d_mmt = 64;
    int d_enc = 32;
    int n_queries = 32;
    int max_positions = 256;
    FusionMode fusion = FusionMode::early;
};

struct MmtLayerParams {
    LayerNormParams ln1;
    AttentionParams self_attn;
    LinearParams scene_proj;  // shared d_enc -> d_mmt key/value bridge
    LayerNormParams cross_ln;
    AttentionParams cross_attn;
    LayerNormParams ln2;
    FfnParams ffn;
};

/// The multi-modal transformer: learnable querying tokens aggregate
/// instructions, visual prompts and scene embeddings, then project into
/// the language model's embedding space.
struct MmtParams {
    MmtConfig cfg;
    Tensor query_tokens;  // n_queries x d_mmt, trainable
    Tensor word_emb;      // V x d_mmt
    Tensor pos_emb;       // max_positions x d_mmt, instruction tokens only
    std::vector<MmtLayerParams> layers;
    LayerNormParams final_ln;
    LinearParams projector;  // d_mmt -> d_lm

    static MmtParams create(ParamRegistry& reg, const MmtConfig& cfg, int vocab_size, int d_lm,
                            Rng& rng);
};

/// Returns the n_queries output rows (n_queries x d_mmt).
/// Early fusion: shared self-attention over [queries; prompts; instruction],
/// then queries and prompts cross-attend into the scene tokens.
/// Direct fusion: self-attention over [queries; instruction] with prompt
/// tokens appended to the scene keys/values instead.
Tensor mmt_forward(const MmtParams& params, const PromptTokens& prompts,
                   const TokenSequence& instruction, const SceneEmbedding& scene);

/// The linear map onto the LM embedding width (n_queries x d_lm).
Tensor project_prefix(const MmtParams& params, const Tensor& queries);

}  // namespace ll3da
