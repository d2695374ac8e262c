#pragma once

#include <utility>
#include <vector>

#include "ll3da/blocks.hpp"
#include "ll3da/geometry.hpp"
#include "ll3da/tensor.hpp"

namespace ll3da {

struct EncoderConfig {
    int n_tokens = 64;  // stage-0 tokens; one FPS stage halves this mid-encoder
    int d_enc = 32;
    int knn = 8;
    int heads = 4;
    int ffn_hidden = 64;
    // masking radii as fractions of the scene diagonal, one per block
    std::array<double, 3> radius_fractions = {0.16, 0.64, 1.44};

    int output_tokens() const { return n_tokens / 2; }
};

/// Frozen scene encoder: set-abstraction tokenization, three radius-masked
/// transformer blocks with one FPS down-sampling stage between the first two.
struct SceneEncoderParams {
    EncoderConfig cfg;
    int feature_dim = 0;
    FfnParams point_mlp;  // [3 + F] -> d_enc, applied pointwise before max-pool
    BlockParams block1;
    FfnParams token_mlp;  // d_enc -> d_enc, down-sampling set abstraction
    BlockParams block2;
    BlockParams block3;

    static SceneEncoderParams create(ParamRegistry& reg, const EncoderConfig& cfg,
                                     int feature_dim, Rng& rng, bool frozen);
};

struct SceneEmbedding {
    Tensor tokens;                // M x d_enc
    std::vector<Vec3> positions;  // token centroids, meters

    int64_t count() const { return static_cast<int64_t>(positions.size()); }
};

/// FPS centroids plus per-centroid features: each token max-pools the
/// point MLP outputs of its knn nearest points (relative offsets + features).
std::pair<std::vector<Vec3>, Tensor> tokenize_points(const PointCloud& pc, int n_tokens, int knn,
                                                     const FfnParams& point_mlp);

SceneEmbedding encode_scene(const PointCloud& pc, const SceneEncoderParams& params);

// ---- visual prompt encoder -------------------------------------------------

struct VisualPrompt {
    enum class Kind { click, box };
    Kind kind = Kind::click;
    Vec3 click{};
    Box3D box{};

    static VisualPrompt of_click(const Vec3& p) { return {Kind::click, p, {}}; }
    static VisualPrompt of_box(const Box3D& b) { return {Kind::box, {}, b}; }
};

struct PromptEncoderConfig {
    int d_mmt = 64;
    int d_enc = 32;
    int tokens_per_prompt = 8;
    int pe_dim = 64;  // fourier embedding width (B has pe_dim/2 columns)
    int ffn_hidden = 128;
};

struct PromptEncoderParams {
    PromptEncoderConfig cfg;
    Tensor fourier_b;   // 3 x pe_dim/2, trainable
    FfnParams click_ffn;  // pe_dim -> 8 * d_mmt
    FfnParams box_ffn;    // d_enc + 6 -> 8 * d_mmt

    static PromptEncoderParams create(ParamRegistry& reg, const PromptEncoderConfig& cfg,
                                      Rng& rng);
};

/// concat(sin(2 pi p . B), cos(2 pi p . B)) for a normalized point p.
Tensor fourier_pe(const Vec3& p_normalized, const Tensor& b);

struct PromptTokens {
    Tensor tokens;  // (8 P) x d_mmt; undefined when P == 0
    std::vector<VisualPrompt::Kind> kinds;
    int empty_box_fallbacks = 0;

    int64_t count() const { return static_cast<int64_t>(kinds.size()); }
};

PromptTokens encode_visual_prompts(const std::vector<VisualPrompt>& prompts,
                                   const SceneEmbedding& scene, const SceneBounds& bounds,
                                   const PromptEncoderParams& params);

}  // namespace ll3da
