#pragma once

#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "ll3da/blocks.hpp"
#include "ll3da/textio.hpp"

namespace ll3da {

struct LmConfig {
    int layers = 2;
    int heads = 4;
    int d_lm = 64;
    int vocab_size = 0;
    int max_positions = 512;
};

/// Decoder-only causal language model. Frozen during instruction tuning;
/// gradients still flow through it into the projected prefix.
struct LmParams {
    LmConfig cfg;
    Tensor tok_emb;  // V x d_lm
    Tensor pos_emb;  // max_positions x d_lm
    std::vector<BlockParams> blocks;
    LayerNormParams final_ln;
    LinearParams head;  // d_lm -> V

    static LmParams create(ParamRegistry& reg, const LmConfig& cfg, Rng& rng, bool frozen);
};

/// Teacher-forcing path. Position embeddings cover [prefix; tokens]; the
/// causal mask spans both. Row t of the result is the next-token
/// distribution after consuming tokens[t], so logits pair with targets
/// shifted left by one. An empty token list yields an undefined tensor.
Tensor lm_forward(const LmParams& lm, const Tensor& prefix, const std::vector<int>& tokens);

// ---- pre-training -----------------------------------------------------------

struct PretrainConfig {
    int steps = 600;
    int batch_size = 16;
    double lr_max = 3e-4;
    double lr_min = 1e-5;
    double weight_decay = 0.1;
    double perplexity_target = 2.5;
    int max_tokens = 96;
    // lines are placed at a random pad offset in [0, max_pad_offset] so the
    // frozen LM tolerates the prefix-shifted positions used during tuning
    int max_pad_offset = 32;
    uint64_t seed = 0;
    int log_every = 0;  // 0 = silent
};

struct PretrainResult {
    double heldout_loss_before = 0.0;
    double heldout_loss_after = 0.0;
    double perplexity = 0.0;
    bool reached_target = false;
    int steps_run = 0;
};

/// Next-token training on the corpus (every 8th line held out), then the LM
/// parameters are flagged frozen in the registry. Non-convergence past the
/// step budget is reported, not fatal.
PretrainResult pretrain_lm(LmParams& lm, ParamRegistry& reg,
                           const std::vector<std::string>& corpus, const Vocabulary& vocab,
                           const PretrainConfig& cfg);

// ---- decoding ---------------------------------------------------------------

/// Value-semantic decoding state; `cache` is model-specific and shared
/// across copies (append-only lineages copy on advance).
struct DecodeState {
    std::vector<int> generated;
    std::vector<double> next_logits;
    std::shared_ptr<const void> cache;
};

class DecodeModel {
public:
    virtual ~DecodeModel() = default;
    virtual int vocab_size() const = 0;
    virtual int eos_id() const = 0;  // -1 when the model has no end token
    virtual DecodeState initial() = 0;
    virtual DecodeState advance(const DecodeState& state, int token) = 0;
    virtual int capacity() const { return 1 << 20; }  // max tokens still producible
};

/// Incremental KV-cached evaluator over a frozen LM; numerically identical
/// to lm_forward (covered by tests).
class LmDecoder : public DecodeModel {
public:
    LmDecoder(const LmParams& lm, Tensor prefix, std::vector<int> context);

    int vocab_size() const override { return lm_.cfg.vocab_size; }
    int eos_id() const override { return Vocabulary::eos_id; }
    DecodeState initial() override;
    DecodeState advance(const DecodeState& state, int token) override;
    int capacity() const override;

    struct Cache;

private:
    const LmParams& lm_;
    Tensor prefix_;
    std::vector<int> context_;
};

/// Test/oracle adapter: logits are an arbitrary function of the history.
class FunctionDecodeModel : public DecodeModel {
public:
    using LogitsFn = std::function<std::vector<double>(const std::vector<int>&)>;
    FunctionDecodeModel(int vocab, int eos, LogitsFn fn)
        : vocab_(vocab), eos_(eos), fn_(std::move(fn)) {}

    int vocab_size() const override { return vocab_; }
    int eos_id() const override { return eos_; }
    DecodeState initial() override {
        DecodeState s;
        s.next_logits = fn_(s.generated);
        return s;
    }
    DecodeState advance(const DecodeState& state, int token) override {
        DecodeState s = state;
        s.generated.push_back(token);
        s.next_logits = fn_(s.generated);
        return s;
    }

private:
    int vocab_;
    int eos_;
    LogitsFn fn_;
};

struct GenerationConfig {
    enum class Strategy { greedy, beam, sample };
    Strategy strategy = Strategy::beam;
    int beam_size = 4;
    int top_k = 50;
    double top_p = 0.95;
    int ngram_block = 4;
    bool ngram_for_beam = false;  // repetition penalty defaults: off for beam,
    bool ngram_for_sample = true; // on for sampling
    int max_new_tokens = 128;
    uint64_t seed = 0;
};

/// Tokens whose emission would repeat an n-gram already in `history`.
std::vector<int> ngram_block_filter(const std::vector<int>& history, int n);

/// Length-unnormalized log-probability beam search; beam_size 1 is greedy.
/// Score ties break toward the lexicographically smaller sequence.
std::vector<int> beam_search(DecodeModel& model, const GenerationConfig& cfg);

std::vector<int> sample_top_k_top_p(DecodeModel& model, const GenerationConfig& cfg);

/// Dispatch on cfg.strategy.
std::vector<int> generate(DecodeModel& model, const GenerationConfig& cfg);

/// One sampling step, exposed for the nucleus-membership oracle tests.
struct NucleusStep {
    std::vector<int> nucleus;  // candidate set after top-k and top-p truncation
    int chosen = -1;
};
NucleusStep nucleus_sample_step(const std::vector<double>& logits, int top_k, double top_p,
                                const std::vector<int>& banned, int eos, Rng& rng);

std::vector<double> log_softmax_vec(const std::vector<double>& logits);

/// Summed log probability of `tokens` under the model, for decode tests.
double sequence_log_prob(DecodeModel& model, const std::vector<int>& tokens);

}  // namespace ll3da
