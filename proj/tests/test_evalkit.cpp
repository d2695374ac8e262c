#include <doctest.h>

#include <algorithm>
#include <cmath>

#include "ll3da/evalkit.hpp"

#include "detection_oracle.hpp"

using namespace ll3da;

namespace {

Box3D unit_box(double cx, double cy = 0, double cz = 0) {
    return Box3D{{cx, cy, cz}, {1, 1, 1}};
}

}  // namespace

TEST_CASE("bleu4") {
    CHECK(bleu4("the red chair", {"the red chair"}) == doctest::Approx(1.0).epsilon(1e-12));
    CHECK(bleu4("alpha beta gamma delta", {"zeta eta theta iota"}) < 1e-6);
    CHECK(bleu4("", {"anything"}) == 0.0);

    // frozen value from the independent manual n-gram count oracle
    double v = bleu4("the cat sat on the mat", {"the cat is on the mat"});
    CHECK(v == doctest::Approx(0.0025406637407730743).epsilon(1e-9));

    // multiple references: clipping takes the max per reference
    double multi = bleu4("the cat", {"the dog", "the cat"});
    CHECK(multi == doctest::Approx(1.0).epsilon(1e-6));
}

TEST_CASE("rouge_l") {
    CHECK(rouge_l("the red chair", {"the red chair"}) == doctest::Approx(1.0));
    CHECK(rouge_l("aaa bbb", {"ccc ddd"}) == 0.0);
    CHECK(rouge_l("the cat sat", {"the dog sat"}) ==
          doctest::Approx(2.0 / 3.0).epsilon(1e-12));
    CHECK(rouge_l("", {"x"}) == 0.0);
    // max over references
    CHECK(rouge_l("a b c", {"z z z", "a b c"}) == doctest::Approx(1.0));
}

TEST_CASE("cider_d") {
    // IDF degeneracy: every candidate n-gram appears in every document's
    // references (single shared reference set) -> idf 0 -> score 0
    std::vector<CiderItem> degenerate = {
        {"the red chair", {"the red chair"}},
        {"the red chair", {"the red chair"}},
    };
    for (double s : cider_d(degenerate)) CHECK(s == 0.0);

    // two-document corpus with unique n-grams: exact match scores 10
    std::vector<CiderItem> two = {
        {"the red chair is next to the table", {"the red chair is next to the table"}},
        {"a large blue sofa sits in the corner", {"a large blue sofa sits in the corner"}},
    };
    std::vector<double> scores = cider_d(two);
    CHECK(scores[0] == doctest::Approx(10.0).epsilon(1e-9));
    CHECK(scores[1] == doctest::Approx(10.0).epsilon(1e-9));

    // zero overlap scores zero
    std::vector<CiderItem> none = {
        {"alpha beta gamma", {"delta epsilon zeta"}},
        {"eta theta iota", {"kappa lambda mu"}},
    };
    for (double s : cider_d(none)) CHECK(s == 0.0);

    CHECK(cider_d({}).empty());
}

TEST_CASE("m at k iou") {
    Box3D gt = unit_box(0);
    CaptionEval eval;
    eval.references["a"] = {{"the red chair"}, gt};
    eval.references["b"] = {{"the blue table"}, unit_box(5)};
    eval.predictions["a"] = {"the red chair", unit_box(0)};        // IoU 1
    eval.predictions["b"] = {"the blue table", unit_box(5.8)};     // IoU ~0.11

    // all-match case at low threshold equals the plain corpus metric
    double m0 = m_at_k_iou(eval, CaptionMetric::bleu4, 0.05);
    CHECK(m0 == doctest::Approx(1.0).epsilon(1e-9));
    // at 0.25 the second item is gated out
    CHECK(m_at_k_iou(eval, CaptionMetric::bleu4, 0.25) == doctest::Approx(0.5).epsilon(1e-9));
    // at 0.5 with one perfect rouge item
    CHECK(m_at_k_iou(eval, CaptionMetric::rouge_l, 0.5) == doctest::Approx(0.5).epsilon(1e-9));

    // monotone non-increasing in k
    double prev = HUGE_VAL;
    for (double k : {0.05, 0.25, 0.5, 0.9}) {
        double v = m_at_k_iou(eval, CaptionMetric::rouge_l, k);
        CHECK(v <= prev + 1e-12);
        prev = v;
    }

    // hand case: two items, metric 1.0 each, IoU gate keeps one at k=0.5
    CaptionEval half;
    half.references["x"] = {{"a"}, unit_box(0)};
    half.references["y"] = {{"b"}, unit_box(10)};
    half.predictions["x"] = {"a", Box3D{{0.25, 0, 0}, {1, 1, 1}}};  // IoU = 0.6
    half.predictions["y"] = {"b", Box3D{{10.55, 0, 0}, {1, 1, 1}}}; // IoU ~ 0.29
    CHECK(m_at_k_iou(half, CaptionMetric::bleu4, 0.5) == doctest::Approx(0.5).epsilon(1e-9));

    // unmatched reference contributes zero; missing box fails the gate
    CaptionEval sparse;
    sparse.references["a"] = {{"a"}, gt};
    sparse.references["b"] = {{"b"}, gt};
    sparse.predictions["a"] = {"a", std::nullopt};
    CHECK(m_at_k_iou(sparse, CaptionMetric::bleu4, 0.25) == 0.0);

    // prediction without a reference key is an error
    CaptionEval bad;
    bad.references["a"] = {{"a"}, gt};
    bad.predictions["zzz"] = {"a", gt};
    CHECK_THROWS_AS(m_at_k_iou(bad, CaptionMetric::bleu4, 0.25), data_error);

    // all IoU below threshold scores zero
    CaptionEval far;
    far.references["a"] = {{"a"}, gt};
    far.predictions["a"] = {"a", unit_box(9)};
    CHECK(m_at_k_iou(far, CaptionMetric::cider_d, 0.25) == 0.0);
}

TEST_CASE("detection pr basics") {
    DetectionEval eval;
    eval.ground_truth.push_back({"s0", unit_box(0), "chair", 0});
    eval.predictions.push_back({"s0", unit_box(0), "chair", 0.9});
    DetectionResult r = detection_pr(eval, 0.5);
    CHECK(r.mean_ap == doctest::Approx(1.0));
    CHECK(r.average_recall == doctest::Approx(1.0));

    DetectionEval none;
    none.ground_truth.push_back({"s0", unit_box(0), "chair", 0});
    DetectionResult r0 = detection_pr(none, 0.5);
    CHECK(r0.mean_ap == 0.0);
    CHECK(r0.average_recall == 0.0);

    // scene separation: a matching box in the wrong scene is a false positive
    DetectionEval wrong;
    wrong.ground_truth.push_back({"s0", unit_box(0), "chair", 0});
    wrong.predictions.push_back({"s1", unit_box(0), "chair", 0.9});
    CHECK(detection_pr(wrong, 0.5).mean_ap == 0.0);
}

TEST_CASE("detection pr equals the exhaustive oracle") {
    Rng rng(211);
    const char* cats[] = {"chair", "table"};
    for (int rep = 0; rep < 50; ++rep) {
        DetectionEval eval;
        const int n_gt = rng.range(1, 3);
        const int n_pred = rng.range(0, 3);
        for (int s = 0; s < 2; ++s) {
            std::string scene = "s" + std::to_string(s);
            for (int g = 0; g < n_gt; ++g)
                eval.ground_truth.push_back(
                    {scene,
                     Box3D{{rng.uniform(0, 3), rng.uniform(0, 2), 0}, {1, 1, 1}},
                     cats[rng.below(2)], 0});
            for (int p = 0; p < n_pred; ++p)
                eval.predictions.push_back(
                    {scene,
                     Box3D{{rng.uniform(0, 3), rng.uniform(0, 2), 0}, {1, 1, 1}},
                     cats[rng.below(2)], rng.uniform(0, 1)});
        }
        for (double thr : {0.25, 0.5}) {
            DetectionResult got = detection_pr(eval, thr);
            DetectionResult want = ll3da_test::detection_oracle(eval, thr);
            CHECK(got.mean_ap == doctest::Approx(want.mean_ap).epsilon(1e-9));
            CHECK(got.average_recall == doctest::Approx(want.average_recall).epsilon(1e-9));
        }
    }
}

TEST_CASE("metric reports") {
    std::vector<MetricEntry> entries = {{"cider@0.5", 0.5, 3.25, 12}, {"bleu4", 0.0, 0.5, 12}};
    std::string csv = metrics_to_csv(entries);
    CHECK(csv.find("metric,threshold,value,n_items") == 0);
    CHECK(csv.find("cider@0.5,0.5,3.25,12") != std::string::npos);
    std::string json_text = metrics_to_json(entries);
    CHECK(json_text.find("\"metric\"") != std::string::npos);
    CHECK(json_text.find("cider@0.5") != std::string::npos);
}
