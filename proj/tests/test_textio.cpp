#include <doctest.h>

#include <cmath>

#include "ll3da/textio.hpp"

using namespace ll3da;

TEST_CASE("quantize and dequantize") {
    CHECK(quantize_coord(-3.0, -3.0, 5.0) == 0);
    CHECK(quantize_coord(5.0, -3.0, 5.0) == 255);
    CHECK(quantize_coord(5.0, 0.0, 10.0) == 128);  // 127.5 rounds half up
    CHECK(quantize_coord(-100.0, 0.0, 10.0) == 0);
    CHECK(quantize_coord(100.0, 0.0, 10.0) == 255);
    CHECK_THROWS_AS(quantize_coord(1.0, 2.0, 2.0), data_error);

    CHECK(dequantize_coord(0, -3.0, 5.0) == doctest::Approx(-3.0));
    CHECK(dequantize_coord(255, -3.0, 5.0) == doctest::Approx(5.0));
    CHECK_THROWS_AS(dequantize_coord(-1, 0.0, 1.0), data_error);
    CHECK_THROWS_AS(dequantize_coord(256, 0.0, 1.0), data_error);

    // round trip bounded by half a bin width
    Rng rng(3);
    double lo = -2.5, hi = 7.25;
    double half_bin = (hi - lo) / 255.0 / 2.0 + 1e-12;
    for (int i = 0; i < 100000; ++i) {
        double x = rng.uniform(lo, hi);
        double back = dequantize_coord(quantize_coord(x, lo, hi), lo, hi);
        CHECK(std::abs(back - x) <= half_bin);
    }
}

TEST_CASE("render and parse spatial") {
    SpatialToken p;
    p.kind = SpatialToken::Kind::point;
    p.values = {0, 0, 0, 0, 0, 0};
    CHECK(render_spatial(p) == "<loc>0, 0, 0</loc>");

    SpatialToken b;
    b.kind = SpatialToken::Kind::box;
    b.values = {10, 20, 30, 4, 5, 6};
    CHECK(render_spatial(b) == "<obj>10, 20, 30, 4, 5, 6</obj>");

    CHECK(parse_spatial("no spans here").tokens.empty());
    CHECK(parse_spatial("no spans here").skipped == 0);

    auto one = parse_spatial("the chair is at <obj>10, 20, 30, 4, 5, 6</obj>.");
    REQUIRE(one.tokens.size() == 1);
    CHECK(one.tokens[0] == b);
    CHECK(one.skipped == 0);

    auto bad = parse_spatial("<obj>300, 0, 0, 1, 1, 1</obj>");
    CHECK(bad.tokens.empty());
    CHECK(bad.skipped == 1);

    // wrong arity, non-integer, zero box size, missing close tag
    CHECK(parse_spatial("<loc>1, 2</loc>").skipped == 1);
    CHECK(parse_spatial("<loc>1, 2, x</loc>").skipped == 1);
    CHECK(parse_spatial("<obj>1, 2, 3, 0, 1, 1</obj>").skipped == 1);
    CHECK(parse_spatial("<loc>1, 2, 3").skipped == 1);

    // mixed text keeps order and survives detokenized spacing
    auto mixed = parse_spatial("a <loc> 1 , 2 , 3 </loc> b <obj>9, 9, 9, 1, 1, 1</obj>");
    REQUIRE(mixed.tokens.size() == 2);
    CHECK(mixed.tokens[0].kind == SpatialToken::Kind::point);
    CHECK(mixed.tokens[1].kind == SpatialToken::Kind::box);

    // render/parse bijection over random valid tokens
    Rng rng(17);
    for (int i = 0; i < 10000; ++i) {
        SpatialToken t;
        t.kind = rng.uniform() < 0.5 ? SpatialToken::Kind::point : SpatialToken::Kind::box;
        for (int j = 0; j < t.arity(); ++j) {
            int lo = (t.kind == SpatialToken::Kind::box && j >= 3) ? 1 : 0;
            t.values[j] = rng.range(lo, 255);
        }
        auto parsed = parse_spatial(render_spatial(t));
        REQUIRE(parsed.tokens.size() == 1);
        CHECK(parsed.skipped == 0);
        CHECK(parsed.tokens[0] == t);
    }
}

TEST_CASE("spatial tokens from geometry") {
    SceneBounds bounds{{0, 0, 0}, {10, 10, 10}};
    Box3D tiny{{5, 5, 5}, {1e-4, 1e-4, 1e-4}};
    SpatialToken t = spatial_from_box(tiny, bounds);
    for (int a = 3; a < 6; ++a) CHECK(t.values[a] == 1);  // size floor
    Box3D back = box_from_spatial(t, bounds);
    for (int a = 0; a < 3; ++a) CHECK(back.size[a] > 0.0);

    Vec3 p{2.5, 7.5, 0.0};
    Vec3 rp = point_from_spatial(spatial_from_point(p, bounds), bounds);
    for (int a = 0; a < 3; ++a) CHECK(std::abs(rp[a] - p[a]) <= 10.0 / 255.0 / 2.0 + 1e-12);
}

TEST_CASE("vocabulary build and round trip") {
    Vocabulary v = Vocabulary::build({"a b", "a", ""});
    // frequency rule: "a" before "b"
    CHECK(v.id_of("a") == Vocabulary::first_corpus_id);
    CHECK(v.id_of("b") == Vocabulary::first_corpus_id + 1);
    CHECK(v.id_of("zzz") == Vocabulary::unk_id);
    CHECK(v.id_of("17") == Vocabulary::integer_id(17));
    CHECK(v.token_of(Vocabulary::integer_id(255)) == "255");
    CHECK(v.id_of("### human:") == Vocabulary::human_id);

    // determinism: same corpus, bit-identical token list
    Vocabulary v2 = Vocabulary::build({"a b", "a", ""});
    CHECK(v.token_list() == v2.token_list());

    // serialize / deserialize
    Vocabulary v3 = Vocabulary::from_token_list(v.token_list());
    CHECK(v3.token_list() == v.token_list());

    auto broken = v.token_list();
    broken[0] = "<PAD>";
    CHECK_THROWS_AS(Vocabulary::from_token_list(broken), data_error);
}

TEST_CASE("encode and decode") {
    Vocabulary v = Vocabulary::build(
        {"the red chair is next to the table", "what color is the chair?", "red ."});

    CHECK(encode_text("", v).ids.empty());

    TokenSequence id = encode_text("### human: what color?", v);
    CHECK(id.ids[0] == Vocabulary::human_id);

    // decode(encode(x)) is stable and preserves in-vocabulary words
    std::string text = "the red chair is next to the table, what color is the chair?";
    std::string once = decode_tokens(encode_text(text, v).ids, v);
    std::string twice = decode_tokens(encode_text(once, v).ids, v);
    CHECK(once == twice);
    CHECK(once == "the red chair is next to the table, what color is the chair?");

    // unknown words become the unk token
    std::string u = decode_tokens(encode_text("the purple zeppelin", v).ids, v);
    CHECK(u == "the <unk> <unk>");

    // generated-sentence round trip: decode(encode(x)) == x for normalized text
    Rng rng(29);
    std::vector<std::string> words = {"the", "red", "chair", "is", "next", "to", "table",
                                      "what", "color", "12", "200"};
    for (int rep = 0; rep < 1000; ++rep) {
        std::string s;
        int n = rng.range(1, 8);
        for (int i = 0; i < n; ++i) {
            if (i) s += ' ';
            s += words[rng.below(words.size())];
        }
        s += rng.uniform() < 0.5 ? "." : "?";
        CHECK(decode_tokens(encode_text(s, v).ids, v) == s);
    }
}

TEST_CASE("instruction templates") {
    Vocabulary v = Vocabulary::build({"describe this object in the given 3d scene . what color "
                                      "is the chair answer question localize and describe"});

    std::string dc = wrap_instruction(instruction_text(TemplateId::densecap, {}));
    CHECK(dc == "### human: describe this object in the given 3D scene. ### assistant:");

    std::string qa = wrap_instruction(
        instruction_text(TemplateId::qa, {{"question", "what color is the chair?"}}));
    CHECK(qa ==
          "### human: given the 3D scene, answer the question: \"what color is the chair?\" "
          "### assistant:");

    CHECK_THROWS_AS(instruction_text(TemplateId::qa, {}), usage_error);

    // loss mask all false, one trailing assistant id, n human ids for n turns
    TokenSequence seq = build_instruction(TemplateId::densecap, {}, v);
    for (uint8_t m : seq.loss_mask) CHECK(m == 0);
    CHECK(seq.ids.back() == Vocabulary::assistant_id);
    CHECK(std::count(seq.ids.begin(), seq.ids.end(), Vocabulary::human_id) == 1);

    std::vector<DialogueTurn> prior = {{"human", "hello"}, {"assistant", "hi"}};
    std::string multi = wrap_dialogue(prior, "what color is the chair?");
    TokenSequence mseq = encode_text(multi, v);
    CHECK(std::count(mseq.ids.begin(), mseq.ids.end(), Vocabulary::human_id) == 2);
    CHECK(std::count(mseq.ids.begin(), mseq.ids.end(), Vocabulary::assistant_id) == 2);
    CHECK(mseq.ids.back() == Vocabulary::assistant_id);
}
