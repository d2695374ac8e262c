#include "ll3da/encoders.hpp"

#include <algorithm>
#include <cmath>

namespace ll3da {

namespace {

double sq_dist(const Vec3& a, const Vec3& b) {
    double dx = a[0] - b[0], dy = a[1] - b[1], dz = a[2] - b[2];
    return dx * dx + dy * dy + dz * dz;
}

// k nearest by (distance, lexicographic coords): permutation-invariant for
// distinct coordinates
std::vector<int64_t> k_nearest(const std::vector<Vec3>& pts, const Vec3& center, int k) {
    std::vector<int64_t> idx(pts.size());
    for (size_t i = 0; i < pts.size(); ++i) idx[i] = static_cast<int64_t>(i);
    auto key = [&](int64_t i) { return std::make_pair(sq_dist(pts[i], center), pts[i]); };
    std::partial_sort(idx.begin(), idx.begin() + std::min<size_t>(k, pts.size()), idx.end(),
                      [&](int64_t a, int64_t b) { return key(a) < key(b); });
    idx.resize(std::min<size_t>(k, pts.size()));
    return idx;
}

std::vector<uint8_t> radius_mask(const std::vector<Vec3>& centers, double radius) {
    const int64_t m = static_cast<int64_t>(centers.size());
    std::vector<uint8_t> mask(m * m, 0);
    const double r2 = radius * radius;
    for (int64_t i = 0; i < m; ++i)
        for (int64_t j = 0; j < m; ++j)
            mask[i * m + j] = sq_dist(centers[i], centers[j]) <= r2 ? 1 : 0;
    return mask;
}

}  // namespace

SceneEncoderParams SceneEncoderParams::create(ParamRegistry& reg, const EncoderConfig& cfg,
                                              int feature_dim, Rng& rng, bool frozen) {
    if (cfg.n_tokens < 2 || cfg.n_tokens % 2 != 0)
        throw data_error("scene encoder: n_tokens must be even and >= 2");
    SceneEncoderParams p;
    p.cfg = cfg;
    p.feature_dim = feature_dim;
    p.point_mlp =
        make_ffn(reg, "enc.point_mlp", 3 + feature_dim, cfg.ffn_hidden, cfg.d_enc, rng, frozen);
    p.block1 = make_block(reg, "enc.block1", cfg.d_enc, cfg.ffn_hidden, rng, frozen);
    p.token_mlp = make_ffn(reg, "enc.token_mlp", cfg.d_enc, cfg.ffn_hidden, cfg.d_enc, rng, frozen);
    p.block2 = make_block(reg, "enc.block2", cfg.d_enc, cfg.ffn_hidden, rng, frozen);
    p.block3 = make_block(reg, "enc.block3", cfg.d_enc, cfg.ffn_hidden, rng, frozen);
    return p;
}

std::pair<std::vector<Vec3>, Tensor> tokenize_points(const PointCloud& pc, int n_tokens, int knn,
                                                     const FfnParams& point_mlp) {
    if (n_tokens > pc.size()) throw data_error("tokenize_points: more tokens than points");
    auto centroid_idx = farthest_point_sampling(pc, n_tokens);
    std::vector<Vec3> centroids;
    centroids.reserve(n_tokens);
    for (int64_t i : centroid_idx) centroids.push_back(pc.coords[i]);

    const int64_t f = pc.feature_dim;
    std::vector<Tensor> pooled;
    pooled.reserve(n_tokens);
    for (const Vec3& c : centroids) {
        auto nn = k_nearest(pc.coords, c, knn);
        Tensor rows = Tensor::zeros({static_cast<int64_t>(nn.size()), 3 + f});
        for (size_t r = 0; r < nn.size(); ++r) {
            for (int a = 0; a < 3; ++a) rows.at(r, a) = pc.coords[nn[r]][a] - c[a];
            for (int64_t j = 0; j < f; ++j) rows.at(r, 3 + j) = pc.feature_row(nn[r])[j];
        }
        pooled.push_back(row_max_pool(ffn_forward(rows, point_mlp)));
    }
    return {std::move(centroids), concat_rows(pooled)};
}

SceneEmbedding encode_scene(const PointCloud& pc, const SceneEncoderParams& params) {
    pc.validate();
    const EncoderConfig& cfg = params.cfg;
    if (pc.feature_dim != params.feature_dim)
        throw data_error("encode_scene: feature dim mismatch");
    const double diag = SceneBounds::of_points(pc.coords).diagonal();

    auto [centroids, tokens] = tokenize_points(pc, cfg.n_tokens, cfg.knn, params.point_mlp);
    tokens = transformer_block(tokens, params.block1, cfg.heads,
                               radius_mask(centroids, cfg.radius_fractions[0] * diag));

    // intermediate FPS stage halves the token count
    PointCloud token_pc;
    token_pc.coords = centroids;
    token_pc.feature_dim = 0;
    auto keep = farthest_point_sampling(token_pc, cfg.output_tokens());
    std::vector<Vec3> kept_pos;
    std::vector<Tensor> kept_rows;
    kept_pos.reserve(keep.size());
    for (int64_t i : keep) {
        kept_pos.push_back(centroids[i]);
        kept_rows.push_back(slice_rows(tokens, i, i + 1));
    }
    Tensor down = ffn_forward(concat_rows(kept_rows), params.token_mlp);

    down = transformer_block(down, params.block2, cfg.heads,
                             radius_mask(kept_pos, cfg.radius_fractions[1] * diag));
    down = transformer_block(down, params.block3, cfg.heads,
                             radius_mask(kept_pos, cfg.radius_fractions[2] * diag));

    for (double v : *down.data)
        if (!std::isfinite(v)) throw numeric_error("encode_scene: non-finite token feature");

    SceneEmbedding out;
    out.tokens = std::move(down);
    out.positions = std::move(kept_pos);
    return out;
}

// ---- visual prompt encoder ---------------------------------------------------

PromptEncoderParams PromptEncoderParams::create(ParamRegistry& reg,
                                                const PromptEncoderConfig& cfg, Rng& rng) {
    if (cfg.pe_dim % 2 != 0) throw data_error("prompt encoder: pe_dim must be even");
    PromptEncoderParams p;
    p.cfg = cfg;
    p.fourier_b = reg.add("prompt.fourier_b", Tensor::randn({3, cfg.pe_dim / 2}, rng, 1.0));
    p.click_ffn = make_ffn(reg, "prompt.click_ffn", cfg.pe_dim, cfg.ffn_hidden,
                           cfg.tokens_per_prompt * cfg.d_mmt, rng, false);
    p.box_ffn = make_ffn(reg, "prompt.box_ffn", cfg.d_enc + 6, cfg.ffn_hidden,
                         cfg.tokens_per_prompt * cfg.d_mmt, rng, false);
    return p;
}

Tensor fourier_pe(const Vec3& p_normalized, const Tensor& b) {
    Tensor p = Tensor::from_values({1, 3}, {p_normalized[0], p_normalized[1], p_normalized[2]});
    Tensor proj = scale(matmul(p, b), 2.0 * 3.141592653589793);
    return concat_cols({sin_of(proj), cos_of(proj)});
}

PromptTokens encode_visual_prompts(const std::vector<VisualPrompt>& prompts,
                                   const SceneEmbedding& scene, const SceneBounds& bounds,
                                   const PromptEncoderParams& params) {
    PromptTokens out;
    if (prompts.empty()) return out;
    if (scene.count() == 0) throw data_error("encode_visual_prompts: empty scene embedding");

    std::vector<Tensor> blocks;
    for (const VisualPrompt& vp : prompts) {
        Tensor flat;
        if (vp.kind == VisualPrompt::Kind::click) {
            if (!bounds.contains(vp.click))
                throw data_error("encode_visual_prompts: click outside scene bounds");
            Tensor pe = fourier_pe(normalize_point(vp.click, bounds), params.fourier_b);
            flat = ffn_forward(pe, params.click_ffn);
        } else {
            bool intersects = true;
            for (int a = 0; a < 3; ++a)
                intersects = intersects &&
                             vp.box.center[a] - vp.box.size[a] / 2 <= bounds.hi[a] &&
                             vp.box.center[a] + vp.box.size[a] / 2 >= bounds.lo[a];
            if (!intersects) throw data_error("encode_visual_prompts: box outside scene");

            std::vector<Tensor> inside;
            for (int64_t i = 0; i < scene.count(); ++i) {
                bool in = true;
                for (int a = 0; a < 3; ++a)
                    in = in && std::abs(scene.positions[i][a] - vp.box.center[a]) <=
                                   vp.box.size[a] / 2.0;
                if (in) inside.push_back(slice_rows(scene.tokens, i, i + 1));
            }
            Tensor roi;
            if (inside.empty()) {
                // no scene token falls inside: fall back to the nearest token
                int64_t nearest = 0;
                double best = HUGE_VAL;
                for (int64_t i = 0; i < scene.count(); ++i) {
                    double d = sq_dist(scene.positions[i], vp.box.center);
                    if (d < best) {
                        best = d;
                        nearest = i;
                    }
                }
                roi = slice_rows(scene.tokens, nearest, nearest + 1);
                ++out.empty_box_fallbacks;
            } else {
                roi = mean_rows(concat_rows(inside));
            }
            Vec3 c = normalize_point(vp.box.center, bounds);
            Tensor six = Tensor::zeros({1, 6});
            for (int a = 0; a < 3; ++a) {
                (*six.data)[a] = c[a];
                (*six.data)[3 + a] =
                    std::clamp(vp.box.size[a] / (bounds.hi[a] - bounds.lo[a]), 0.0, 1.0);
            }
            flat = ffn_forward(concat_cols({roi, six}), params.box_ffn);
        }
        blocks.push_back(reshape(flat, {params.cfg.tokens_per_prompt, params.cfg.d_mmt}));
        out.kinds.push_back(vp.kind);
    }
    out.tokens = concat_rows(blocks);
    return out;
}

}  // namespace ll3da
