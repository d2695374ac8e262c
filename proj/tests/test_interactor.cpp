#include <doctest.h>

#include <algorithm>
#include <cmath>

#include "ll3da/interactor.hpp"

using namespace ll3da;

namespace {

struct Fixture {
    ParamRegistry reg;
    MmtConfig cfg;
    MmtParams mmt;
    SceneEmbedding scene;
    PromptEncoderParams penc;
    SceneBounds bounds{{0, 0, 0}, {4, 3, 2}};

    explicit Fixture(Rng& rng, FusionMode fusion = FusionMode::early, int layers = 2)
        : mmt(make_mmt(rng, fusion, layers)) {
        scene.tokens = Tensor::randn({10, cfg.d_enc}, rng, 1.0);
        for (int i = 0; i < 10; ++i)
            scene.positions.push_back({rng.uniform(0, 4), rng.uniform(0, 3), rng.uniform(0, 2)});
        PromptEncoderConfig pc;
        pc.d_mmt = cfg.d_mmt;
        pc.d_enc = cfg.d_enc;
        pc.pe_dim = 8;
        pc.ffn_hidden = 16;
        penc = PromptEncoderParams::create(reg, pc, rng);
    }

    MmtParams make_mmt(Rng& rng, FusionMode fusion, int layers) {
        cfg.layers = layers;
        cfg.heads = 2;
        cfg.d_mmt = 16;
        cfg.d_enc = 12;
        cfg.n_queries = 8;
        cfg.fusion = fusion;
        return MmtParams::create(reg, cfg, 300, 24, rng);
    }

    PromptTokens prompts(const std::vector<VisualPrompt>& vps) {
        return encode_visual_prompts(vps, scene, bounds, penc);
    }
};

TokenSequence ids_of(std::initializer_list<int> ids) {
    TokenSequence t;
    for (int i : ids) {
        t.ids.push_back(i);
        t.loss_mask.push_back(0);
    }
    return t;
}

}  // namespace

TEST_CASE("mmt forward shapes and degenerate inputs") {
    Rng rng(61);
    Fixture f(rng);

    //: output has exactly n_queries rows for any input sizes
    PromptTokens p1 = f.prompts({VisualPrompt::of_click({1, 1, 1})});
    Tensor q = mmt_forward(f.mmt, p1, ids_of({5, 17, 30}), f.scene);
    CHECK(q.shape == std::vector<int64_t>{8, 16});

    // zero prompts and empty instruction still run (queries-only self-attention)
    Tensor q0 = mmt_forward(f.mmt, PromptTokens{}, TokenSequence{}, f.scene);
    CHECK(q0.shape == std::vector<int64_t>{8, 16});

    // empty scene is rejected
    CHECK_THROWS_AS(mmt_forward(f.mmt, PromptTokens{}, TokenSequence{}, SceneEmbedding{}),
                    data_error);
}

TEST_CASE("mmt scene permutation invariance") {
    Rng rng(67);
    Fixture f(rng);
    PromptTokens p = f.prompts({VisualPrompt::of_click({1, 1, 1})});
    TokenSequence instr = ids_of({4, 9, 250});

    Tensor base = mmt_forward(f.mmt, p, instr, f.scene);

    // permute scene token rows; output must be unchanged within rel 1e-9
    SceneEmbedding shuffled;
    std::vector<int64_t> order = {7, 2, 9, 0, 4, 1, 8, 3, 6, 5};
    std::vector<Tensor> rows;
    for (int64_t i : order) {
        rows.push_back(slice_rows(f.scene.tokens, i, i + 1));
        shuffled.positions.push_back(f.scene.positions[i]);
    }
    shuffled.tokens = concat_rows(rows);
    Tensor perm = mmt_forward(f.mmt, p, instr, shuffled);
    for (int64_t i = 0; i < base.numel(); ++i) {
        double a = (*base.data)[i], b = (*perm.data)[i];
        CHECK(std::abs(a - b) <= 1e-9 * std::max({1.0, std::abs(a), std::abs(b)}));
    }
}

TEST_CASE("mmt instruction awareness") {
    Rng rng(71);
    Fixture f(rng);
    for (int rep = 0; rep < 20; ++rep) {
        TokenSequence a = ids_of({rng.range(17, 272), rng.range(17, 272)});
        TokenSequence b = ids_of({rng.range(17, 272), rng.range(17, 272)});
        if (a.ids == b.ids) b.ids[0] = (b.ids[0] == 17) ? 18 : 17;
        Tensor qa = mmt_forward(f.mmt, PromptTokens{}, a, f.scene);
        Tensor qb = mmt_forward(f.mmt, PromptTokens{}, b, f.scene);
        double max_delta = 0.0;
        for (int64_t i = 0; i < qa.numel(); ++i)
            max_delta = std::max(max_delta, std::abs((*qa.data)[i] - (*qb.data)[i]));
        CHECK(max_delta > 0.0);
    }
}

TEST_CASE("fusion modes agree with no prompts") {
    Rng rng(73);
    Fixture early(rng, FusionMode::early);
    // same parameters, different mode flag
    MmtParams direct = early.mmt;
    direct.cfg.fusion = FusionMode::direct;

    TokenSequence instr = ids_of({5, 6, 7});
    Tensor qe = mmt_forward(early.mmt, PromptTokens{}, instr, early.scene);
    Tensor qd = mmt_forward(direct, PromptTokens{}, instr, early.scene);
    CHECK(*qe.data == *qd.data);

    // with prompts the two modes genuinely differ
    PromptTokens p = early.prompts({VisualPrompt::of_click({1, 1, 1})});
    Tensor qe2 = mmt_forward(early.mmt, p, instr, early.scene);
    Tensor qd2 = mmt_forward(direct, p, instr, early.scene);
    double delta = 0.0;
    for (int64_t i = 0; i < qe2.numel(); ++i)
        delta = std::max(delta, std::abs((*qe2.data)[i] - (*qd2.data)[i]));
    CHECK(delta > 0.0);
}

TEST_CASE("projector") {
    Rng rng(79);
    Fixture f(rng);

    Tensor zeros = Tensor::zeros({8, 16});
    Tensor out = project_prefix(f.mmt, zeros);
    CHECK(out.shape == std::vector<int64_t>{8, 24});
    // zero input reproduces the bias rows
    for (int64_t i = 0; i < 8; ++i)
        for (int64_t j = 0; j < 24; ++j)
            CHECK(out.at(i, j) == f.mmt.projector.b.at(0, j));

    // gradient through the projector matches finite differences
    Tensor q = Tensor::randn({8, 16}, rng, 1.0);
    double err = finite_difference_check(
        [&] { return sum_all(gelu(project_prefix(f.mmt, q))); }, f.mmt.projector.w, 1e-5);
    CHECK(err < 1e-4);
}

TEST_CASE("full mmt layer gradient check") {
    Rng rng(83);
    Fixture f(rng, FusionMode::early, 1);
    PromptTokens p = f.prompts({VisualPrompt::of_box({{2, 1.5, 1}, {1, 1, 1}})});
    TokenSequence instr = ids_of({9, 77});

    auto loss = [&] {
        Tensor q = mmt_forward(f.mmt, f.prompts({VisualPrompt::of_box({{2, 1.5, 1}, {1, 1, 1}})}),
                               instr, f.scene);
        return sum_all(gelu(project_prefix(f.mmt, q)));
    };
    CHECK(finite_difference_check(loss, f.mmt.query_tokens, 1e-5) < 1e-4);
    CHECK(finite_difference_check(loss, f.mmt.layers[0].self_attn.q.w, 1e-5) < 1e-4);
    CHECK(finite_difference_check(loss, f.mmt.layers[0].cross_attn.v.w, 1e-5) < 1e-4);
    CHECK(finite_difference_check(loss, f.mmt.layers[0].scene_proj.w, 1e-5) < 1e-4);
    CHECK(finite_difference_check(loss, f.mmt.layers[0].ffn.l1.w, 1e-5) < 1e-4);
    CHECK(finite_difference_check(loss, f.mmt.word_emb, 1e-5) < 1e-4);
    CHECK(finite_difference_check(loss, f.penc.box_ffn.l2.w, 1e-5) < 1e-4);
}
