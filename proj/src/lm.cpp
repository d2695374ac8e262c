#include "ll3da/lm.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numeric>

namespace ll3da {

LmParams LmParams::create(ParamRegistry& reg, const LmConfig& cfg, Rng& rng, bool frozen) {
    if (cfg.d_lm % cfg.heads != 0) throw data_error("lm: d_lm not divisible by heads");
    if (cfg.vocab_size <= 0) throw data_error("lm: vocab size not set");
    LmParams p;
    p.cfg = cfg;
    p.tok_emb = reg.add("lm.tok_emb", Tensor::randn({cfg.vocab_size, cfg.d_lm}, rng, 0.05), frozen);
    p.pos_emb =
        reg.add("lm.pos_emb", Tensor::randn({cfg.max_positions, cfg.d_lm}, rng, 0.05), frozen);
    for (int l = 0; l < cfg.layers; ++l)
        p.blocks.push_back(
            make_block(reg, "lm.block" + std::to_string(l), cfg.d_lm, 4 * cfg.d_lm, rng, frozen));
    p.final_ln = make_layer_norm(reg, "lm.final_ln", cfg.d_lm, frozen);
    p.head = make_linear(reg, "lm.head", cfg.d_lm, cfg.vocab_size, rng, frozen);
    return p;
}

Tensor lm_forward(const LmParams& lm, const Tensor& prefix, const std::vector<int>& tokens) {
    const int64_t p = prefix.defined() ? prefix.shape[0] : 0;
    const int64_t t = static_cast<int64_t>(tokens.size());
    if (p + t > lm.cfg.max_positions) throw data_error("lm_forward: sequence exceeds max positions");
    if (p > 0 && prefix.shape[1] != lm.cfg.d_lm)
        throw data_error("lm_forward: prefix width mismatch");
    if (t == 0) return Tensor{};

    std::vector<Tensor> rows;
    if (p > 0) rows.push_back(prefix);
    rows.push_back(embedding_rows(lm.tok_emb, tokens));
    Tensor x = rows.size() == 1 ? rows[0] : concat_rows(rows);

    std::vector<int> positions(p + t);
    std::iota(positions.begin(), positions.end(), 0);
    x = add(x, embedding_rows(lm.pos_emb, positions));

    const int64_t n = p + t;
    std::vector<uint8_t> causal(n * n, 0);
    for (int64_t i = 0; i < n; ++i)
        for (int64_t j = 0; j <= i; ++j) causal[i * n + j] = 1;

    for (const BlockParams& b : lm.blocks) x = transformer_block(x, b, lm.cfg.heads, causal);
    x = layer_norm(x, lm.final_ln.gain, lm.final_ln.bias, 1e-5);
    return linear(slice_rows(x, p, p + t), lm.head);
}

// ---- pre-training --------------------------------------------------------------

PretrainResult pretrain_lm(LmParams& lm, ParamRegistry& reg,
                           const std::vector<std::string>& corpus, const Vocabulary& vocab,
                           const PretrainConfig& cfg) {
    if (corpus.empty()) throw data_error("pretrain_lm: empty corpus");

    auto line_ids = [&](const std::string& line) {
        std::vector<int> ids = encode_text(line, vocab).ids;
        ids.push_back(Vocabulary::eos_id);
        return ids;
    };

    std::vector<std::vector<int>> train, heldout;
    for (size_t i = 0; i < corpus.size(); ++i) {
        if (corpus[i].empty()) continue;
        auto ids = line_ids(corpus[i]);
        if (ids.size() < 2) continue;
        (i % 16 == 15 ? heldout : train).push_back(std::move(ids));
    }
    if (train.empty()) throw data_error("pretrain_lm: no usable training lines");
    if (heldout.empty()) heldout.push_back(train.back());

    // loss over the line placed after `offset` pad tokens, matching the
    // prefix-shifted layout of instruction tuning
    auto line_loss = [&](const std::vector<int>& line, int offset) {
        std::vector<int> ids(offset, Vocabulary::pad_id);
        ids.insert(ids.end(), line.begin(), line.end());
        if (static_cast<int>(ids.size()) > cfg.max_tokens) ids.resize(cfg.max_tokens);
        Tensor logits = lm_forward(lm, Tensor{}, ids);
        std::vector<int> targets(ids.begin() + 1, ids.end());
        std::vector<uint8_t> mask(targets.size(), 0);
        for (size_t t = 0; t < targets.size(); ++t) mask[t] = t + 1 > static_cast<size_t>(offset);
        return masked_cross_entropy(slice_rows(logits, 0, logits.shape[0] - 1), targets, mask);
    };
    auto heldout_loss = [&] {
        NoGradGuard ng;
        double total = 0.0;
        for (const auto& ids : heldout) total += line_loss(ids, cfg.max_pad_offset).item();
        return total / static_cast<double>(heldout.size());
    };

    PretrainResult result;
    result.heldout_loss_before = heldout_loss();

    OptimizerState opt;
    AdamwConfig acfg;
    acfg.weight_decay = cfg.weight_decay;
    opt.init(reg, acfg);
    Rng rng(split_seed(cfg.seed, 0x707265));

    for (int step = 0; step < cfg.steps; ++step) {
        reg.zero_grad();
        for (int b = 0; b < cfg.batch_size; ++b) {
            const auto& ids = train[rng.below(train.size())];
            const int offset = static_cast<int>(rng.below(cfg.max_pad_offset + 1));
            backward(scale(line_loss(ids, offset), 1.0 / cfg.batch_size));
        }
        adamw_step(reg, opt, cosine_lr(step, cfg.steps, cfg.lr_max, cfg.lr_min));
        if (cfg.log_every > 0 && (step + 1) % cfg.log_every == 0)
            std::fprintf(stderr, "pretrain step %d/%d heldout loss %.4f\n", step + 1, cfg.steps,
                         heldout_loss());
        ++result.steps_run;
    }

    result.heldout_loss_after = heldout_loss();
    result.perplexity = std::exp(result.heldout_loss_after);
    result.reached_target = result.perplexity <= cfg.perplexity_target;

    for (auto& param : reg.params)
        if (param.name.rfind("lm.", 0) == 0) param.frozen = true;
    reg.sync_requires_grad();
    return result;
}

// ---- incremental decoding --------------------------------------------------------

struct LmDecoder::Cache {
    // per layer, row-major [t x d] key/value rows (post-ln projections)
    std::vector<std::vector<double>> k, v;
    int64_t t = 0;
};

namespace {

void layer_norm_row(const double* x, const double* gain, const double* bias, int64_t d,
                    double* out) {
    double mean = 0.0;
    for (int64_t j = 0; j < d; ++j) mean += x[j];
    mean /= static_cast<double>(d);
    double var = 0.0;
    for (int64_t j = 0; j < d; ++j) {
        double diff = x[j] - mean;
        var += diff * diff;
    }
    var /= static_cast<double>(d);
    double inv = 1.0 / std::sqrt(var + 1e-5);
    for (int64_t j = 0; j < d; ++j) out[j] = (x[j] - mean) * inv * gain[j] + bias[j];
}

void matvec(const double* x, const Tensor& w, const Tensor& b, double* out) {
    const int64_t in = w.shape[0], on = w.shape[1];
    for (int64_t j = 0; j < on; ++j) out[j] = (*b.data)[j];
    for (int64_t i = 0; i < in; ++i) {
        const double xv = x[i];
        const double* wrow = w.data->data() + i * on;
        for (int64_t j = 0; j < on; ++j) out[j] += xv * wrow[j];
    }
}

double gelu_scalar(double v) { return 0.5 * v * (1.0 + std::erf(v * 0.7071067811865475)); }

}  // namespace

LmDecoder::LmDecoder(const LmParams& lm, Tensor prefix, std::vector<int> context)
    : lm_(lm), prefix_(std::move(prefix)), context_(std::move(context)) {}

namespace {

// runs one position through all blocks, appending K/V rows to the cache
void consume_row(const LmParams& lm, LmDecoder::Cache& cache, std::vector<double> x,
                 std::vector<double>* logits_out) {
    const int64_t d = lm.cfg.d_lm;
    const int heads = lm.cfg.heads;
    const int64_t dh = d / heads;
    std::vector<double> normed(d), q(d), kv(d), attn(d), tmp(d);
    std::vector<double> hidden(4 * d);

    for (size_t l = 0; l < lm.blocks.size(); ++l) {
        const BlockParams& b = lm.blocks[l];
        layer_norm_row(x.data(), b.ln1.gain.data->data(), b.ln1.bias.data->data(), d,
                       normed.data());
        matvec(normed.data(), b.attn.q.w, b.attn.q.b, q.data());
        matvec(normed.data(), b.attn.k.w, b.attn.k.b, kv.data());
        cache.k[l].insert(cache.k[l].end(), kv.begin(), kv.end());
        matvec(normed.data(), b.attn.v.w, b.attn.v.b, kv.data());
        cache.v[l].insert(cache.v[l].end(), kv.begin(), kv.end());
        const int64_t t = cache.t + 1;

        // causal attention of the newest position over all cached rows
        for (int h = 0; h < heads; ++h) {
            const double* qh = q.data() + h * dh;
            double hi = -HUGE_VAL;
            std::vector<double> scores(t);
            for (int64_t pos = 0; pos < t; ++pos) {
                const double* krow = cache.k[l].data() + pos * d + h * dh;
                double s = 0.0;
                for (int64_t j = 0; j < dh; ++j) s += qh[j] * krow[j];
                scores[pos] = s / std::sqrt(static_cast<double>(dh));
                hi = std::max(hi, scores[pos]);
            }
            double sum = 0.0;
            for (int64_t pos = 0; pos < t; ++pos) {
                scores[pos] = std::exp(scores[pos] - hi);
                sum += scores[pos];
            }
            for (int64_t j = 0; j < dh; ++j) tmp[h * dh + j] = 0.0;
            for (int64_t pos = 0; pos < t; ++pos) {
                const double w = scores[pos] / sum;
                const double* vrow = cache.v[l].data() + pos * d + h * dh;
                for (int64_t j = 0; j < dh; ++j) tmp[h * dh + j] += w * vrow[j];
            }
        }
        matvec(tmp.data(), b.attn.o.w, b.attn.o.b, attn.data());
        for (int64_t j = 0; j < d; ++j) x[j] += attn[j];

        layer_norm_row(x.data(), b.ln2.gain.data->data(), b.ln2.bias.data->data(), d,
                       normed.data());
        matvec(normed.data(), b.ffn.l1.w, b.ffn.l1.b, hidden.data());
        for (double& h2 : hidden) h2 = gelu_scalar(h2);
        matvec(hidden.data(), b.ffn.l2.w, b.ffn.l2.b, attn.data());
        for (int64_t j = 0; j < d; ++j) x[j] += attn[j];
    }
    cache.t += 1;

    if (logits_out) {
        layer_norm_row(x.data(), lm.final_ln.gain.data->data(), lm.final_ln.bias.data->data(), d,
                       normed.data());
        logits_out->resize(lm.cfg.vocab_size);
        matvec(normed.data(), lm.head.w, lm.head.b, logits_out->data());
    }
}

std::vector<double> embed_position(const LmParams& lm, int token, int64_t pos) {
    const int64_t d = lm.cfg.d_lm;
    std::vector<double> x(d);
    for (int64_t j = 0; j < d; ++j)
        x[j] = (*lm.tok_emb.data)[token * d + j] + (*lm.pos_emb.data)[pos * d + j];
    return x;
}

}  // namespace

DecodeState LmDecoder::initial() {
    const int64_t p = prefix_.defined() ? prefix_.shape[0] : 0;
    const int64_t d = lm_.cfg.d_lm;
    if (p + static_cast<int64_t>(context_.size()) + 1 > lm_.cfg.max_positions)
        throw data_error("lm decoder: context exceeds max positions");
    if (p == 0 && context_.empty())
        throw data_error("lm decoder: need a prefix or context to condition on");

    auto cache = std::make_shared<Cache>();
    cache->k.resize(lm_.blocks.size());
    cache->v.resize(lm_.blocks.size());

    DecodeState s;
    for (int64_t i = 0; i < p; ++i) {
        std::vector<double> x(d);
        for (int64_t j = 0; j < d; ++j)
            x[j] = prefix_.at(i, j) + (*lm_.pos_emb.data)[i * d + j];
        const bool last = i + 1 == p && context_.empty();
        consume_row(lm_, *cache, std::move(x), last ? &s.next_logits : nullptr);
    }
    for (size_t i = 0; i < context_.size(); ++i) {
        const bool last = i + 1 == context_.size();
        consume_row(lm_, *cache, embed_position(lm_, context_[i], p + static_cast<int64_t>(i)),
                    last ? &s.next_logits : nullptr);
    }
    s.cache = std::move(cache);
    return s;
}

DecodeState LmDecoder::advance(const DecodeState& state, int token) {
    if (token < 0 || token >= lm_.cfg.vocab_size) throw data_error("lm decoder: bad token id");
    const auto* prev = static_cast<const Cache*>(state.cache.get());
    if (!prev) throw data_error("lm decoder: advance before initial");
    if (prev->t + 1 > lm_.cfg.max_positions)
        throw data_error("lm decoder: sequence exceeds max positions");

    auto cache = std::make_shared<Cache>(*prev);  // copy-on-extend keeps states value-like
    DecodeState s;
    s.generated = state.generated;
    s.generated.push_back(token);
    consume_row(lm_, *cache, embed_position(lm_, token, prev->t), &s.next_logits);
    s.cache = std::move(cache);
    return s;
}

int LmDecoder::capacity() const {
    const int64_t p = prefix_.defined() ? prefix_.shape[0] : 0;
    return static_cast<int>(lm_.cfg.max_positions - p - static_cast<int64_t>(context_.size()) - 1);
}

// ---- generation --------------------------------------------------------------------

std::vector<double> log_softmax_vec(const std::vector<double>& logits) {
    double hi = -HUGE_VAL;
    for (double v : logits) hi = std::max(hi, v);
    double sum = 0.0;
    for (double v : logits) sum += std::exp(v - hi);
    double lse = hi + std::log(sum);
    std::vector<double> out(logits.size());
    for (size_t i = 0; i < logits.size(); ++i) out[i] = logits[i] - lse;
    return out;
}

std::vector<int> ngram_block_filter(const std::vector<int>& history, int n) {
    if (n < 1) throw data_error("ngram_block_filter: n must be >= 1");
    std::vector<int> banned;
    const int64_t len = static_cast<int64_t>(history.size());
    if (len < n - 1) return banned;
    for (int64_t i = 0; i + n - 1 < len; ++i) {
        bool match = true;
        for (int64_t j = 0; j < n - 1; ++j)
            match = match && history[i + j] == history[len - (n - 1) + j];
        if (match) banned.push_back(history[i + n - 1]);
    }
    std::sort(banned.begin(), banned.end());
    banned.erase(std::unique(banned.begin(), banned.end()), banned.end());
    return banned;
}

std::vector<int> beam_search(DecodeModel& model, const GenerationConfig& cfg) {
    if (cfg.beam_size < 1) throw usage_error("beam_search: beam size must be >= 1");
    const int eos = model.eos_id();
    const int max_steps = std::min(cfg.max_new_tokens, model.capacity());

    struct Beam {
        DecodeState state;
        double score = 0.0;
        bool finished = false;
    };
    std::vector<Beam> beams{{model.initial(), 0.0, false}};

    for (int step = 0; step < max_steps; ++step) {
        struct Candidate {
            int parent;
            int token;  // -1 for carried finished beams
            double score;
            std::vector<int> seq;
            bool finished;
        };
        std::vector<Candidate> candidates;
        bool any_active = false;
        for (int bi = 0; bi < static_cast<int>(beams.size()); ++bi) {
            Beam& b = beams[bi];
            if (b.finished) {
                candidates.push_back({bi, -1, b.score, b.state.generated, true});
                continue;
            }
            any_active = true;
            std::vector<double> lp = log_softmax_vec(b.state.next_logits);
            if (cfg.ngram_for_beam && cfg.ngram_block >= 1)
                for (int t : ngram_block_filter(b.state.generated, cfg.ngram_block))
                    lp[t] = -HUGE_VAL;
            bool all_banned = true;
            for (int t = 0; t < model.vocab_size(); ++t) {
                if (lp[t] == -HUGE_VAL) continue;
                all_banned = false;
                std::vector<int> seq = b.state.generated;
                seq.push_back(t);
                candidates.push_back({bi, t, b.score + lp[t], std::move(seq), t == eos});
            }
            if (all_banned) {
                // nothing expandable: force the end token
                std::vector<int> seq = b.state.generated;
                if (eos >= 0) seq.push_back(eos);
                candidates.push_back({bi, eos, b.score, std::move(seq), true});
            }
        }
        if (!any_active) break;

        std::sort(candidates.begin(), candidates.end(), [](const Candidate& a, const Candidate& b) {
            if (a.score != b.score) return a.score > b.score;
            return a.seq < b.seq;
        });
        if (static_cast<int>(candidates.size()) > cfg.beam_size)
            candidates.resize(cfg.beam_size);

        std::vector<Beam> next;
        for (const Candidate& c : candidates) {
            if (c.token < 0 || c.finished) {
                // finished beams keep the parent cache; they never advance again
                Beam nb;
                nb.state = beams[c.parent].state;
                nb.state.generated = c.seq;
                nb.score = c.score;
                nb.finished = true;
                next.push_back(std::move(nb));
            } else {
                next.push_back({model.advance(beams[c.parent].state, c.token), c.score, false});
            }
        }
        beams = std::move(next);

        // expansions only lower scores, so a finished top beam is final
        if (!beams.empty() && beams.front().finished) break;
    }

    const Beam* best = &beams.front();
    for (const Beam& b : beams)
        if (b.score > best->score ||
            (b.score == best->score && b.state.generated < best->state.generated))
            best = &b;
    std::vector<int> out = best->state.generated;
    if (!out.empty() && out.back() == eos) out.pop_back();
    return out;
}

NucleusStep nucleus_sample_step(const std::vector<double>& logits, int top_k, double top_p,
                                const std::vector<int>& banned, int eos, Rng& rng) {
    if (top_k < 1) throw usage_error("sampling: k must be >= 1");
    if (!(top_p > 0.0 && top_p <= 1.0)) throw usage_error("sampling: p must be in (0, 1]");
    std::vector<uint8_t> is_banned(logits.size(), 0);
    for (int b : banned)
        if (b >= 0 && b < static_cast<int>(logits.size())) is_banned[b] = 1;

    std::vector<int> order;
    for (int i = 0; i < static_cast<int>(logits.size()); ++i)
        if (!is_banned[i]) order.push_back(i);

    NucleusStep step;
    if (order.empty()) {
        step.chosen = eos;
        if (eos >= 0) step.nucleus.push_back(eos);
        return step;
    }
    std::sort(order.begin(), order.end(), [&](int a, int b) {
        if (logits[a] != logits[b]) return logits[a] > logits[b];
        return a < b;
    });
    if (static_cast<int>(order.size()) > top_k) order.resize(top_k);

    // renormalize over the top-k set, then take the smallest prefix >= p
    double hi = logits[order[0]];
    std::vector<double> probs(order.size());
    double sum = 0.0;
    for (size_t i = 0; i < order.size(); ++i) {
        probs[i] = std::exp(logits[order[i]] - hi);
        sum += probs[i];
    }
    double cum = 0.0;
    size_t keep = order.size();
    for (size_t i = 0; i < order.size(); ++i) {
        cum += probs[i] / sum;
        if (cum >= top_p) {
            keep = i + 1;
            break;
        }
    }
    order.resize(keep);
    probs.resize(keep);
    double mass = 0.0;
    for (double p : probs) mass += p;

    double u = rng.uniform() * mass;
    double acc = 0.0;
    step.chosen = order.back();
    for (size_t i = 0; i < order.size(); ++i) {
        acc += probs[i];
        if (u < acc) {
            step.chosen = order[i];
            break;
        }
    }
    step.nucleus = std::move(order);
    return step;
}

std::vector<int> sample_top_k_top_p(DecodeModel& model, const GenerationConfig& cfg) {
    Rng rng(split_seed(cfg.seed, 0x73616d70));
    const int eos = model.eos_id();
    const int max_steps = std::min(cfg.max_new_tokens, model.capacity());
    DecodeState state = model.initial();
    for (int i = 0; i < max_steps; ++i) {
        std::vector<int> banned;
        if (cfg.ngram_for_sample && cfg.ngram_block >= 1)
            banned = ngram_block_filter(state.generated, cfg.ngram_block);
        NucleusStep step =
            nucleus_sample_step(state.next_logits, cfg.top_k, cfg.top_p, banned, eos, rng);
        if (step.chosen < 0 || step.chosen == eos) break;
        state = model.advance(state, step.chosen);
    }
    return state.generated;
}

std::vector<int> generate(DecodeModel& model, const GenerationConfig& cfg) {
    switch (cfg.strategy) {
        case GenerationConfig::Strategy::greedy: {
            GenerationConfig g = cfg;
            g.beam_size = 1;
            return beam_search(model, g);
        }
        case GenerationConfig::Strategy::beam:
            return beam_search(model, cfg);
        case GenerationConfig::Strategy::sample:
            return sample_top_k_top_p(model, cfg);
    }
    throw usage_error("generate: unknown strategy");
}

double sequence_log_prob(DecodeModel& model, const std::vector<int>& tokens) {
    DecodeState state = model.initial();
    double total = 0.0;
    for (int t : tokens) {
        std::vector<double> lp = log_softmax_vec(state.next_logits);
        total += lp[t];
        state = model.advance(state, t);
    }
    return total;
}

}  // namespace ll3da
