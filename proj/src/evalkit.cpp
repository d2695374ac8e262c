#include "ll3da/evalkit.hpp"
#include <cstdio>

#include <algorithm>
#include <cmath>

#include <json.hpp>

namespace ll3da {

namespace {

using Ngram = std::vector<std::string>;
using NgramCounts = std::map<Ngram, double>;

constexpr int kMaxN = 4;
constexpr double kBleuEps = 1e-9;
constexpr double kCiderSigma = 6.0;

std::vector<NgramCounts> ngram_counts(const std::vector<std::string>& tokens) {
    std::vector<NgramCounts> out(kMaxN);
    for (int n = 1; n <= kMaxN; ++n)
        for (size_t i = 0; i + n <= tokens.size(); ++i)
            out[n - 1][Ngram(tokens.begin() + i, tokens.begin() + i + n)] += 1.0;
    return out;
}

}  // namespace

std::vector<std::string> metric_tokenize(const std::string& text) { return tokenize_words(text); }

double bleu4(const std::string& candidate, const std::vector<std::string>& references) {
    std::vector<std::string> cand = metric_tokenize(candidate);
    if (cand.empty() || references.empty()) return 0.0;
    std::vector<std::vector<std::string>> refs;
    for (const std::string& r : references) refs.push_back(metric_tokenize(r));

    auto cand_counts = ngram_counts(cand);
    std::vector<std::vector<NgramCounts>> ref_counts;
    for (const auto& r : refs) ref_counts.push_back(ngram_counts(r));

    double log_sum = 0.0;
    for (int n = 1; n <= kMaxN; ++n) {
        const double total = static_cast<double>(
            cand.size() >= static_cast<size_t>(n) ? cand.size() - n + 1 : 0);
        if (total == 0.0) continue;  // no n-grams of this order: neutral
        double clipped = 0.0;
        for (const auto& [gram, count] : cand_counts[n - 1]) {
            double best = 0.0;
            for (const auto& rc : ref_counts) {
                auto it = rc[n - 1].find(gram);
                if (it != rc[n - 1].end()) best = std::max(best, it->second);
            }
            clipped += std::min(count, best);
        }
        log_sum += std::log(clipped > 0.0 ? clipped / total : kBleuEps / total);
    }

    // brevity penalty against the closest reference length (ties: shorter)
    size_t closest = refs[0].size();
    for (const auto& r : refs) {
        auto diff = [&](size_t len) {
            return len > cand.size() ? len - cand.size() : cand.size() - len;
        };
        if (diff(r.size()) < diff(closest) || (diff(r.size()) == diff(closest) && r.size() < closest))
            closest = r.size();
    }
    double bp = cand.size() >= closest
                    ? 1.0
                    : std::exp(1.0 - static_cast<double>(closest) / static_cast<double>(cand.size()));
    return bp * std::exp(log_sum / kMaxN);
}

double rouge_l(const std::string& candidate, const std::vector<std::string>& references) {
    std::vector<std::string> cand = metric_tokenize(candidate);
    if (cand.empty() || references.empty()) return 0.0;
    constexpr double beta = 1.2;
    double best = 0.0;
    for (const std::string& ref_text : references) {
        std::vector<std::string> ref = metric_tokenize(ref_text);
        if (ref.empty()) continue;
        // lcs via dynamic programming
        std::vector<std::vector<int>> dp(cand.size() + 1, std::vector<int>(ref.size() + 1, 0));
        for (size_t i = 1; i <= cand.size(); ++i)
            for (size_t j = 1; j <= ref.size(); ++j)
                dp[i][j] = cand[i - 1] == ref[j - 1] ? dp[i - 1][j - 1] + 1
                                                     : std::max(dp[i - 1][j], dp[i][j - 1]);
        double lcs = dp[cand.size()][ref.size()];
        if (lcs == 0.0) continue;
        double p = lcs / static_cast<double>(cand.size());
        double r = lcs / static_cast<double>(ref.size());
        best = std::max(best, (1 + beta * beta) * p * r / (r + beta * beta * p));
    }
    return best;
}

std::vector<double> cider_d(const std::vector<CiderItem>& corpus) {
    if (corpus.empty()) return {};
    const double ref_len = std::log(static_cast<double>(corpus.size()));

    // document frequency: once per item whose references contain the n-gram
    std::map<Ngram, double> df;
    std::vector<std::vector<std::vector<NgramCounts>>> ref_counts(corpus.size());
    std::vector<std::vector<double>> ref_bigram_len(corpus.size());
    for (size_t i = 0; i < corpus.size(); ++i) {
        std::map<Ngram, bool> seen;
        for (const std::string& ref : corpus[i].references) {
            auto counts = ngram_counts(metric_tokenize(ref));
            double bigrams = 0.0;
            for (const auto& [gram, c] : counts[1]) bigrams += c;
            ref_bigram_len[i].push_back(bigrams);
            for (const auto& byn : counts)
                for (const auto& [gram, c] : byn) seen[gram] = true;
            ref_counts[i].push_back(std::move(counts));
        }
        for (const auto& [gram, _] : seen) df[gram] += 1.0;
    }

    auto weight = [&](const std::vector<NgramCounts>& counts) {
        std::vector<NgramCounts> vec(kMaxN);
        std::vector<double> norm(kMaxN, 0.0);
        for (int n = 0; n < kMaxN; ++n)
            for (const auto& [gram, tf] : counts[n]) {
                auto it = df.find(gram);
                double log_df = std::log(std::max(1.0, it == df.end() ? 0.0 : it->second));
                double w = tf * (ref_len - log_df);
                vec[n][gram] = w;
                norm[n] += w * w;
            }
        for (double& x : norm) x = std::sqrt(x);
        return std::make_pair(vec, norm);
    };

    std::vector<double> scores;
    for (size_t i = 0; i < corpus.size(); ++i) {
        auto cand_tokens = metric_tokenize(corpus[i].candidate);
        auto cand_counts = ngram_counts(cand_tokens);
        double cand_bigrams = 0.0;
        for (const auto& [gram, c] : cand_counts[1]) cand_bigrams += c;
        auto [cvec, cnorm] = weight(cand_counts);

        double item = 0.0;
        for (size_t r = 0; r < corpus[i].references.size(); ++r) {
            auto [rvec, rnorm] = weight(ref_counts[i][r]);
            double delta = cand_bigrams - ref_bigram_len[i][r];
            double penalty = std::exp(-delta * delta / (2.0 * kCiderSigma * kCiderSigma));
            for (int n = 0; n < kMaxN; ++n) {
                double val = 0.0;
                for (const auto& [gram, w] : cvec[n]) {
                    auto it = rvec[n].find(gram);
                    if (it != rvec[n].end()) val += std::min(w, it->second) * it->second;
                }
                if (cnorm[n] > 0.0 && rnorm[n] > 0.0) val /= cnorm[n] * rnorm[n];
                item += val * penalty;
            }
        }
        const double nrefs = std::max<size_t>(corpus[i].references.size(), 1);
        scores.push_back(10.0 * item / (kMaxN * nrefs));
    }
    return scores;
}

double m_at_k_iou(const CaptionEval& eval, CaptionMetric metric, double k) {
    if (eval.references.empty()) throw data_error("m_at_k_iou: no references");
    for (const auto& [key, pred] : eval.predictions)
        if (!eval.references.count(key))
            throw data_error("m_at_k_iou: prediction key '" + key + "' has no reference");

    // cider needs corpus-level idf over the evaluation references
    std::map<std::string, double> cider_scores;
    if (metric == CaptionMetric::cider_d) {
        std::vector<CiderItem> corpus;
        std::vector<std::string> keys;
        for (const auto& [key, ref] : eval.references) {
            auto it = eval.predictions.find(key);
            corpus.push_back({it == eval.predictions.end() ? "" : it->second.caption,
                              ref.captions});
            keys.push_back(key);
        }
        std::vector<double> scores = cider_d(corpus);
        for (size_t i = 0; i < keys.size(); ++i) cider_scores[keys[i]] = scores[i];
    }

    double total = 0.0;
    for (const auto& [key, ref] : eval.references) {
        auto it = eval.predictions.find(key);
        if (it == eval.predictions.end()) continue;
        const CaptionPrediction& pred = it->second;
        if (!pred.box || box_iou_3d(*pred.box, ref.box) < k) continue;
        switch (metric) {
            case CaptionMetric::bleu4: total += bleu4(pred.caption, ref.captions); break;
            case CaptionMetric::rouge_l: total += rouge_l(pred.caption, ref.captions); break;
            case CaptionMetric::cider_d: total += cider_scores.at(key); break;
        }
    }
    return total / static_cast<double>(eval.references.size());
}

DetectionResult detection_pr(const DetectionEval& eval, double iou_threshold) {
    std::vector<std::string> categories;
    for (const DetectionItem& gt : eval.ground_truth)
        if (std::find(categories.begin(), categories.end(), gt.category) == categories.end())
            categories.push_back(gt.category);
    std::sort(categories.begin(), categories.end());

    double ap_sum = 0.0;
    int64_t matched_total = 0;
    for (const std::string& cat : categories) {
        std::vector<const DetectionItem*> gts;
        for (const DetectionItem& g : eval.ground_truth)
            if (g.category == cat) gts.push_back(&g);
        std::vector<const DetectionItem*> preds;
        for (const DetectionItem& p : eval.predictions)
            if (p.category == cat) preds.push_back(&p);
        std::stable_sort(preds.begin(), preds.end(),
                         [](const DetectionItem* a, const DetectionItem* b) {
                             return a->confidence > b->confidence;
                         });

        std::vector<bool> taken(gts.size(), false);
        std::vector<uint8_t> is_tp;
        for (const DetectionItem* p : preds) {
            int best = -1;
            double best_iou = 0.0;
            for (size_t g = 0; g < gts.size(); ++g) {
                if (taken[g] || gts[g]->scene_id != p->scene_id) continue;
                double iou = box_iou_3d(p->box, gts[g]->box);
                if (iou >= iou_threshold && iou > best_iou) {
                    best_iou = iou;
                    best = static_cast<int>(g);
                }
            }
            if (best >= 0) {
                taken[best] = true;
                is_tp.push_back(1);
            } else {
                is_tp.push_back(0);
            }
        }

        // all-point interpolated AP
        const double n_gt = static_cast<double>(gts.size());
        std::vector<double> precision(is_tp.size());
        int64_t tp = 0;
        for (size_t i = 0; i < is_tp.size(); ++i) {
            tp += is_tp[i];
            precision[i] = static_cast<double>(tp) / static_cast<double>(i + 1);
        }
        matched_total += tp;
        for (size_t i = precision.size(); i-- > 1;)
            precision[i - 1] = std::max(precision[i - 1], precision[i]);
        double ap = 0.0;
        for (size_t i = 0; i < is_tp.size(); ++i)
            if (is_tp[i]) ap += precision[i] / n_gt;
        ap_sum += ap;
    }

    DetectionResult out;
    if (!categories.empty()) out.mean_ap = ap_sum / static_cast<double>(categories.size());
    if (!eval.ground_truth.empty())
        out.average_recall =
            static_cast<double>(matched_total) / static_cast<double>(eval.ground_truth.size());
    return out;
}

std::string metrics_to_json(const std::vector<MetricEntry>& entries) {
    nlohmann::json arr = nlohmann::json::array();
    for (const MetricEntry& e : entries)
        arr.push_back({{"metric", e.metric},
                       {"threshold", e.threshold},
                       {"value", e.value},
                       {"n_items", e.n_items}});
    return arr.dump(1);
}

std::string metrics_to_csv(const std::vector<MetricEntry>& entries) {
    std::string out = "metric,threshold,value,n_items\n";
    for (const MetricEntry& e : entries) {
        char buf[128];
        std::snprintf(buf, sizeof(buf), "%s,%g,%.10g,%lld\n", e.metric.c_str(), e.threshold,
                      e.value, static_cast<long long>(e.n_items));
        out += buf;
    }
    return out;
}

}  // namespace ll3da
