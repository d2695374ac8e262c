#pragma once

#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "ll3da/datagen.hpp"
#include "ll3da/encoders.hpp"
#include "ll3da/evalkit.hpp"
#include "ll3da/interactor.hpp"
#include "ll3da/lm.hpp"

namespace ll3da {

struct TrainConfig {
    double lr_max = 1e-4;
    double lr_min = 1e-6;
    double weight_decay = 0.1;
    int batch_size = 16;
    int total_steps = 2500;
    int eval_every = 500;
    int checkpoint_every = 0;  // 0: final checkpoint only
    int warmup_encoder_steps = 0;
    bool debug_frozen_check = false;
};

struct AssembleConfig {
    std::vector<std::string> tasks = {"densecap", "qa", "scene_description", "dialogue",
                                      "planning"};
    int scene_description_stride = 2;
    int dialogue_stride = 4;
    int planning_stride = 4;
};

struct RunConfig {
    uint64_t seed = 0;
    std::string data_dir = "data";
    int scenes = 32;
    int n_points = 1024;
    DatagenConfig datagen;
    EncoderConfig encoder;
    MmtConfig mmt;
    int prompt_pe_dim = 64;
    int prompt_ffn_hidden = 128;
    LmConfig lm;  // vocab_size resolved at build time
    PretrainConfig pretrain;
    TrainConfig train;
    AssembleConfig assemble;
    GenerationConfig generation;
    int detect_clicks = 8;

    static RunConfig from_json_text(const std::string& text);
    static RunConfig from_file(const std::string& path);
    std::string to_json_text() const;

    /// Fields that must agree between a checkpoint and a user config.
    void check_compatible(const RunConfig& other) const;
};

// ---- dataset ------------------------------------------------------------------

/// Generates scenes, corpus, vocabulary and the train/val manifest under dir.
void write_dataset(const RunConfig& cfg, const std::string& dir);

struct Dataset {
    std::vector<SceneRecord> scenes;
    std::map<std::string, size_t> index;
    std::vector<std::string> train_ids, val_ids;
    std::vector<std::string> corpus;
    Vocabulary vocab;

    static Dataset load(const std::string& dir);
    const SceneRecord& scene(const std::string& id) const;
};

/// Deterministic training-sample assembly over the train split.
std::vector<TrainingSample> assemble_training_set(const Dataset& data, const RunConfig& cfg);

// ---- model ---------------------------------------------------------------------

struct Model {
    RunConfig cfg;
    Vocabulary vocab;
    ParamRegistry reg;
    SceneEncoderParams encoder;
    PromptEncoderParams prompt_encoder;
    MmtParams mmt;
    LmParams lm;

    static Model build(const RunConfig& cfg, const Vocabulary& vocab);

    /// Replace parameter values/frozen flags by name; shapes must match.
    void load_params(const std::vector<Param>& params);
};

/// Frozen-path scene embeddings, memoized per scene id.
class SceneCache {
public:
    struct Entry {
        PointCloud cloud;  // rgb + height features
        SceneBounds bounds;
        SceneEmbedding embedding;
    };
    explicit SceneCache(const Model& model) : model_(model) {}
    const Entry& get(const SceneRecord& scene);

private:
    const Model& model_;
    std::map<std::string, Entry> entries_;
};

/// Projected 32-row LM prefix for one sample (differentiable).
Tensor sample_prefix(const Model& model, const SceneCache::Entry& scene,
                     const std::vector<VisualPrompt>& prompts, const TokenSequence& instruction);

/// Teacher-forced cross-entropy over the sample's response tokens.
Tensor sample_loss(const Model& model, const SceneCache::Entry& scene,
                   const TrainingSample& sample);

// ---- checkpoints ------------------------------------------------------------------

struct LoadedCheckpoint {
    uint32_t version = 0;
    RunConfig config;
    std::vector<std::string> vocab_tokens;
    std::vector<Param> params;
    bool has_optimizer = false;
    OptimizerState optimizer;
    uint64_t step = 0;
};

void save_checkpoint(const std::string& path, const RunConfig& cfg, const Vocabulary& vocab,
                     const ParamRegistry& reg, const OptimizerState* optimizer, uint64_t step);
LoadedCheckpoint load_checkpoint(const std::string& path);
std::string checkpoint_inspect_json(const std::string& path);

/// Concatenated little-endian bytes of the selected parameters; the
/// frozen-contract checks compare these.
std::vector<uint8_t> param_bytes(const ParamRegistry& reg, const std::string& prefix);

// ---- training ------------------------------------------------------------------------

struct TrainProgress {
    int64_t step = 0;
    double loss = 0.0;
    double lr = 0.0;
};

struct TrainResult {
    double first_loss = 0.0;
    double final_loss = 0.0;
    std::vector<TrainProgress> log;
    std::string final_checkpoint;
};

Model pretrain_language_model(const RunConfig& cfg, const Dataset& data,
                              const std::string& out_checkpoint, PretrainResult* stats);

/// Instruction tuning of the trainable parameters against a frozen LM and
/// scene encoder. Loads LM weights from lm_checkpoint unless the model was
/// warm-started via --finetune-from.
TrainResult train_model(Model& model, const Dataset& data, const std::string& out_dir,
                        const std::function<void(const TrainProgress&)>& on_progress = {});

double teacher_forced_accuracy(const Model& model, const Dataset& data, SceneCache& cache,
                               const std::vector<TrainingSample>& samples, size_t max_samples = 0);

// ---- evaluation & generation ----------------------------------------------------------

struct EvalOptions {
    std::string task = "densecap";
    std::string split = "val";      // train | val | all
    bool localize = false;          // densecap: parse boxes from generated text
    bool click_related = false;     // qa: add clicks at related instances
    std::string proposals_path;     // densecap: box prompts from a proposal file
    GenerationConfig generation;
    std::optional<double> mean_iou; // densecap --localize: mean parsed-box IoU
};

std::vector<MetricEntry> evaluate_task(Model& model, const Dataset& data, EvalOptions& opts);

std::string generate_response(Model& model, SceneCache& cache, const SceneRecord& scene,
                              const std::string& instruction_body,
                              const std::vector<VisualPrompt>& prompts,
                              const GenerationConfig& gen);

/// Caption text with spatial spans and the localization preamble removed,
/// so localize-variant generations score against plain references.
std::string strip_localization(const std::string& response);

}  // namespace ll3da
