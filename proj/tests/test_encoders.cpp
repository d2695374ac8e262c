#include <doctest.h>

#include <algorithm>
#include <cmath>

#include "ll3da/encoders.hpp"

using namespace ll3da;

namespace {

PointCloud random_cloud(int n, int f, Rng& rng) {
    PointCloud pc;
    pc.feature_dim = f;
    for (int i = 0; i < n; ++i) {
        pc.coords.push_back({rng.uniform(0, 4), rng.uniform(0, 3), rng.uniform(0, 2)});
        for (int j = 0; j < f; ++j) pc.features.push_back(rng.uniform(0, 1));
    }
    return pc;
}

PointCloud permuted(const PointCloud& pc, Rng& rng) {
    std::vector<int64_t> order(pc.size());
    for (int64_t i = 0; i < pc.size(); ++i) order[i] = i;
    for (size_t i = order.size() - 1; i > 0; --i) std::swap(order[i], order[rng.below(i + 1)]);
    PointCloud out;
    out.feature_dim = pc.feature_dim;
    for (int64_t i : order) {
        out.coords.push_back(pc.coords[i]);
        for (int64_t j = 0; j < pc.feature_dim; ++j)
            out.features.push_back(pc.feature_row(i)[j]);
    }
    return out;
}

}  // namespace

TEST_CASE("tokenize points") {
    Rng rng(41);
    ParamRegistry reg;
    FfnParams mlp = make_ffn(reg, "mlp", 3 + 2, 8, 4, rng, false);

    PointCloud pc = random_cloud(12, 2, rng);

    // n_tokens = N, knn = 1: per-point features through the MLP
    auto [cents, feats] = tokenize_points(pc, 12, 1, mlp);
    CHECK(cents.size() == 12);
    CHECK(feats.shape == std::vector<int64_t>{12, 4});
    {
        // each token is ffn([0,0,0, f...]) of its own point
        Tensor row = Tensor::zeros({1, 5});
        for (int64_t j = 0; j < 2; ++j) {
            // centroid 0 is the lexicographically smallest point
        }
        PointCloud one;
        one.feature_dim = 2;
        one.coords.push_back(cents[0]);
        for (int64_t i = 0; i < pc.size(); ++i)
            if (pc.coords[i] == cents[0])
                for (int64_t j = 0; j < 2; ++j) row.at(0, 3 + j) = pc.feature_row(i)[j];
        Tensor want = ffn_forward(row, mlp);
        for (int64_t j = 0; j < 4; ++j) CHECK(feats.at(0, j) == want.at(0, j));
    }

    // centroid count equals the requested token count
    auto [c8, f8] = tokenize_points(pc, 8, 3, mlp);
    CHECK(c8.size() == 8);
    CHECK(f8.shape == std::vector<int64_t>{8, 4});

    CHECK_THROWS_AS(tokenize_points(pc, 13, 1, mlp), data_error);

    // pooled features are invariant to permuting the input points
    Rng shuffle_rng(4242);
    PointCloud pc2 = permuted(pc, shuffle_rng);
    auto [c8b, f8b] = tokenize_points(pc2, 8, 3, mlp);
    for (size_t i = 0; i < c8.size(); ++i) CHECK(c8[i] == c8b[i]);
    CHECK(*f8.data == *f8b.data);
}

TEST_CASE("encode scene") {
    Rng rng(43);
    EncoderConfig cfg;
    cfg.n_tokens = 16;
    cfg.d_enc = 16;
    cfg.knn = 4;
    cfg.heads = 2;
    cfg.ffn_hidden = 16;
    ParamRegistry reg;
    SceneEncoderParams enc = SceneEncoderParams::create(reg, cfg, 4, rng, true);

    PointCloud pc = random_cloud(64, 4, rng);
    SceneEmbedding emb = encode_scene(pc, enc);
    CHECK(emb.tokens.shape == std::vector<int64_t>{8, 16});
    CHECK(emb.positions.size() == 8);

    // default toy config emits 32 tokens of width 32
    EncoderConfig toy;
    CHECK(toy.output_tokens() == 32);
    CHECK(toy.d_enc == 32);

    // permuting input points leaves the embedding bit-identical in
    // canonical FPS order (the multiset trivially matches)
    Rng shuffle_rng(99);
    PointCloud pc2 = permuted(pc, shuffle_rng);
    SceneEmbedding emb2 = encode_scene(pc2, enc);
    CHECK(emb.positions == emb2.positions);
    CHECK(*emb.tokens.data == *emb2.tokens.data);

    // an infinite radius degenerates to the unmasked transformer
    std::vector<uint8_t> all(6 * 6, 1);
    Tensor x = Tensor::randn({6, 16}, rng, 1.0);
    Tensor masked = transformer_block(x, enc.block1, cfg.heads, all);
    Tensor open = transformer_block(x, enc.block1, cfg.heads, {});
    CHECK(*masked.data == *open.data);
}

TEST_CASE("fourier positional embedding") {
    Rng rng(47);
    Tensor b0 = Tensor::zeros({3, 4});
    Tensor pe = fourier_pe({0.3, 0.7, 0.1}, b0);
    CHECK(pe.shape == std::vector<int64_t>{1, 8});
    for (int j = 0; j < 4; ++j) CHECK(pe.at(0, j) == 0.0);
    for (int j = 4; j < 8; ++j) CHECK(pe.at(0, j) == 1.0);

    Tensor br = Tensor::randn({3, 4}, rng, 1.0);
    Tensor pe0 = fourier_pe({0, 0, 0}, br);
    for (int j = 0; j < 4; ++j) CHECK(pe0.at(0, j) == 0.0);
    for (int j = 4; j < 8; ++j) CHECK(pe0.at(0, j) == 1.0);

    // direct formula evaluation
    Vec3 p{0.25, 0.5, 0.9};
    Tensor got = fourier_pe(p, br);
    for (int j = 0; j < 4; ++j) {
        double dot = 0.0;
        for (int a = 0; a < 3; ++a) dot += p[a] * br.at(a, j);
        CHECK(got.at(0, j) == doctest::Approx(std::sin(2 * 3.141592653589793 * dot)).epsilon(1e-12));
        CHECK(got.at(0, 4 + j) ==
              doctest::Approx(std::cos(2 * 3.141592653589793 * dot)).epsilon(1e-12));
    }

    // differentiable w.r.t. B
    Tensor btrain = Tensor::randn({3, 4}, rng, 1.0, true);
    double err = finite_difference_check(
        [&] { return sum_all(gelu(fourier_pe({0.2, 0.8, 0.5}, btrain))); }, btrain, 1e-5);
    CHECK(err < 1e-4);
}

TEST_CASE("visual prompt encoding") {
    Rng rng(53);
    EncoderConfig ecfg;
    ecfg.n_tokens = 16;
    ecfg.d_enc = 16;
    ecfg.knn = 4;
    ecfg.heads = 2;
    ecfg.ffn_hidden = 16;
    ParamRegistry reg;
    SceneEncoderParams enc = SceneEncoderParams::create(reg, ecfg, 4, rng, true);
    PromptEncoderConfig pcfg;
    pcfg.d_mmt = 24;
    pcfg.d_enc = 16;
    pcfg.pe_dim = 16;
    pcfg.ffn_hidden = 32;
    PromptEncoderParams penc = PromptEncoderParams::create(reg, pcfg, rng);

    PointCloud pc = random_cloud(64, 4, rng);
    SceneBounds bounds = SceneBounds::of_points(pc.coords);
    SceneEmbedding scene;
    {
        NoGradGuard ng;
        scene = encode_scene(pc, enc);
    }

    // one click -> exactly 8 tokens
    Vec3 click{1.0, 1.0, 1.0};
    PromptTokens one = encode_visual_prompts({VisualPrompt::of_click(click)}, scene, bounds, penc);
    CHECK(one.count() == 1);
    CHECK(one.tokens.shape == std::vector<int64_t>{8, 24});

    // zero prompts -> P = 0
    PromptTokens none = encode_visual_prompts({}, scene, bounds, penc);
    CHECK(none.count() == 0);
    CHECK_FALSE(none.tokens.defined());

    // two identical clicks -> identical 8-token blocks
    PromptTokens two = encode_visual_prompts(
        {VisualPrompt::of_click(click), VisualPrompt::of_click(click)}, scene, bounds, penc);
    CHECK(two.tokens.shape == std::vector<int64_t>{16, 24});
    for (int64_t i = 0; i < 8; ++i)
        for (int64_t j = 0; j < 24; ++j) CHECK(two.tokens.at(i, j) == two.tokens.at(8 + i, j));

    // click outside the bounds is rejected
    CHECK_THROWS_AS(
        encode_visual_prompts({VisualPrompt::of_click({100, 0, 0})}, scene, bounds, penc),
        data_error);

    // boxes: mixed prompts give 8 tokens per prompt; empty boxes fall back
    Box3D big{{2, 1.5, 1}, {4, 3, 2}};
    Vec3 mid{(bounds.lo[0] + bounds.hi[0]) / 2, (bounds.lo[1] + bounds.hi[1]) / 2,
             (bounds.lo[2] + bounds.hi[2]) / 2};
    Box3D tiny{mid, {1e-9, 1e-9, 1e-9}};
    PromptTokens mixed = encode_visual_prompts(
        {VisualPrompt::of_box(big), VisualPrompt::of_click(click), VisualPrompt::of_box(tiny)},
        scene, bounds, penc);
    CHECK(mixed.count() == 3);
    CHECK(mixed.tokens.shape == std::vector<int64_t>{24, 24});
    CHECK(mixed.empty_box_fallbacks == 1);

    // a box entirely outside the scene is rejected
    Box3D outside{{50, 50, 50}, {1, 1, 1}};
    CHECK_THROWS_AS(encode_visual_prompts({VisualPrompt::of_box(outside)}, scene, bounds, penc),
                    data_error);

    // gradients reach the fourier matrix through click encoding
    double err = finite_difference_check(
        [&] {
            Tensor pe = fourier_pe(normalize_point(click, bounds), penc.fourier_b);
            return sum_all(gelu(ffn_forward(pe, penc.click_ffn)));
        },
        penc.fourier_b, 1e-5);
    CHECK(err < 1e-4);
}
