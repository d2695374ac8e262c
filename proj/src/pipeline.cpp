#include "ll3da/pipeline.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <sstream>

#include <json.hpp>

namespace ll3da {

namespace fs = std::filesystem;
using nlohmann::json;

// ---- config -----------------------------------------------------------------

namespace {

template <typename T>
void get_if(const json& j, const char* key, T& out) {
    auto it = j.find(key);
    if (it != j.end()) out = it->get<T>();
}

FusionMode fusion_from_string(const std::string& s) {
    if (s == "early") return FusionMode::early;
    if (s == "direct") return FusionMode::direct;
    throw data_error("config: unknown fusion mode '" + s + "'");
}

GenerationConfig::Strategy strategy_from_string(const std::string& s) {
    if (s == "greedy") return GenerationConfig::Strategy::greedy;
    if (s == "beam") return GenerationConfig::Strategy::beam;
    if (s == "sample") return GenerationConfig::Strategy::sample;
    throw data_error("config: unknown strategy '" + s + "'");
}

const char* strategy_name(GenerationConfig::Strategy s) {
    switch (s) {
        case GenerationConfig::Strategy::greedy: return "greedy";
        case GenerationConfig::Strategy::beam: return "beam";
        case GenerationConfig::Strategy::sample: return "sample";
    }
    return "beam";
}

}  // namespace

RunConfig RunConfig::from_json_text(const std::string& text) {
    json j;
    try {
        j = json::parse(text);
    } catch (const json::exception& e) {
        throw data_error(std::string("config: invalid json: ") + e.what());
    }
    RunConfig c;
    get_if(j, "seed", c.seed);
    get_if(j, "data_dir", c.data_dir);
    get_if(j, "scenes", c.scenes);
    get_if(j, "n_points", c.n_points);
    get_if(j, "detect_clicks", c.detect_clicks);
    if (j.count("datagen")) {
        const json& d = j["datagen"];
        get_if(d, "points_per_scene", c.datagen.points_per_scene);
        get_if(d, "min_instances", c.datagen.min_instances);
        get_if(d, "max_instances", c.datagen.max_instances);
        get_if(d, "extent_x", c.datagen.extent_x);
        get_if(d, "extent_y", c.datagen.extent_y);
        get_if(d, "qa_per_scene", c.datagen.qa_per_scene);
        get_if(d, "max_place_attempts", c.datagen.max_place_attempts);
    }
    if (j.count("encoder")) {
        const json& d = j["encoder"];
        get_if(d, "n_tokens", c.encoder.n_tokens);
        get_if(d, "d_enc", c.encoder.d_enc);
        get_if(d, "knn", c.encoder.knn);
        get_if(d, "heads", c.encoder.heads);
        get_if(d, "ffn_hidden", c.encoder.ffn_hidden);
        if (d.count("radius_fractions")) {
            auto v = d["radius_fractions"].get<std::vector<double>>();
            if (v.size() != 3) throw data_error("config: radius_fractions needs 3 entries");
            std::copy(v.begin(), v.end(), c.encoder.radius_fractions.begin());
        }
    }
    if (j.count("mmt")) {
        const json& d = j["mmt"];
        get_if(d, "layers", c.mmt.layers);
        get_if(d, "heads", c.mmt.heads);
        get_if(d, "d_mmt", c.mmt.d_mmt);
        get_if(d, "n_queries", c.mmt.n_queries);
        get_if(d, "max_positions", c.mmt.max_positions);
        if (d.count("fusion")) c.mmt.fusion = fusion_from_string(d["fusion"].get<std::string>());
    }
    c.mmt.d_enc = c.encoder.d_enc;
    if (j.count("prompt")) {
        const json& d = j["prompt"];
        get_if(d, "pe_dim", c.prompt_pe_dim);
        get_if(d, "ffn_hidden", c.prompt_ffn_hidden);
    }
    if (j.count("lm")) {
        const json& d = j["lm"];
        get_if(d, "layers", c.lm.layers);
        get_if(d, "heads", c.lm.heads);
        get_if(d, "d_lm", c.lm.d_lm);
        get_if(d, "max_positions", c.lm.max_positions);
    }
    if (j.count("pretrain")) {
        const json& d = j["pretrain"];
        get_if(d, "steps", c.pretrain.steps);
        get_if(d, "batch_size", c.pretrain.batch_size);
        get_if(d, "lr_max", c.pretrain.lr_max);
        get_if(d, "lr_min", c.pretrain.lr_min);
        get_if(d, "weight_decay", c.pretrain.weight_decay);
        get_if(d, "perplexity_target", c.pretrain.perplexity_target);
        get_if(d, "max_tokens", c.pretrain.max_tokens);
        get_if(d, "max_pad_offset", c.pretrain.max_pad_offset);
        get_if(d, "log_every", c.pretrain.log_every);
    }
    if (j.count("train")) {
        const json& d = j["train"];
        get_if(d, "lr_max", c.train.lr_max);
        get_if(d, "lr_min", c.train.lr_min);
        get_if(d, "weight_decay", c.train.weight_decay);
        get_if(d, "batch_size", c.train.batch_size);
        get_if(d, "total_steps", c.train.total_steps);
        get_if(d, "eval_every", c.train.eval_every);
        get_if(d, "checkpoint_every", c.train.checkpoint_every);
        get_if(d, "warmup_encoder_steps", c.train.warmup_encoder_steps);
        get_if(d, "debug_frozen_check", c.train.debug_frozen_check);
    }
    if (j.count("assemble")) {
        const json& d = j["assemble"];
        get_if(d, "tasks", c.assemble.tasks);
        get_if(d, "scene_description_stride", c.assemble.scene_description_stride);
        get_if(d, "dialogue_stride", c.assemble.dialogue_stride);
        get_if(d, "planning_stride", c.assemble.planning_stride);
    }
    if (j.count("generation")) {
        const json& d = j["generation"];
        if (d.count("strategy"))
            c.generation.strategy = strategy_from_string(d["strategy"].get<std::string>());
        get_if(d, "beam_size", c.generation.beam_size);
        get_if(d, "top_k", c.generation.top_k);
        get_if(d, "top_p", c.generation.top_p);
        get_if(d, "ngram_block", c.generation.ngram_block);
        get_if(d, "ngram_for_beam", c.generation.ngram_for_beam);
        get_if(d, "ngram_for_sample", c.generation.ngram_for_sample);
        get_if(d, "max_new_tokens", c.generation.max_new_tokens);
        get_if(d, "seed", c.generation.seed);
    }
    return c;
}

RunConfig RunConfig::from_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw data_error("config: cannot open " + path);
    std::stringstream ss;
    ss << in.rdbuf();
    return from_json_text(ss.str());
}

std::string RunConfig::to_json_text() const {
    json j;
    j["seed"] = seed;
    j["data_dir"] = data_dir;
    j["scenes"] = scenes;
    j["n_points"] = n_points;
    j["detect_clicks"] = detect_clicks;
    j["datagen"] = {{"points_per_scene", datagen.points_per_scene},
                    {"min_instances", datagen.min_instances},
                    {"max_instances", datagen.max_instances},
                    {"extent_x", datagen.extent_x},
                    {"extent_y", datagen.extent_y},
                    {"qa_per_scene", datagen.qa_per_scene},
                    {"max_place_attempts", datagen.max_place_attempts}};
    j["encoder"] = {{"n_tokens", encoder.n_tokens},
                    {"d_enc", encoder.d_enc},
                    {"knn", encoder.knn},
                    {"heads", encoder.heads},
                    {"ffn_hidden", encoder.ffn_hidden},
                    {"radius_fractions", encoder.radius_fractions}};
    j["mmt"] = {{"layers", mmt.layers},
                {"heads", mmt.heads},
                {"d_mmt", mmt.d_mmt},
                {"n_queries", mmt.n_queries},
                {"max_positions", mmt.max_positions},
                {"fusion", mmt.fusion == FusionMode::early ? "early" : "direct"}};
    j["prompt"] = {{"pe_dim", prompt_pe_dim}, {"ffn_hidden", prompt_ffn_hidden}};
    j["lm"] = {{"layers", lm.layers},
               {"heads", lm.heads},
               {"d_lm", lm.d_lm},
               {"max_positions", lm.max_positions}};
    j["pretrain"] = {{"steps", pretrain.steps},
                     {"batch_size", pretrain.batch_size},
                     {"lr_max", pretrain.lr_max},
                     {"lr_min", pretrain.lr_min},
                     {"weight_decay", pretrain.weight_decay},
                     {"perplexity_target", pretrain.perplexity_target},
                     {"max_tokens", pretrain.max_tokens},
                     {"max_pad_offset", pretrain.max_pad_offset},
                     {"log_every", pretrain.log_every}};
    j["train"] = {{"lr_max", train.lr_max},
                  {"lr_min", train.lr_min},
                  {"weight_decay", train.weight_decay},
                  {"batch_size", train.batch_size},
                  {"total_steps", train.total_steps},
                  {"eval_every", train.eval_every},
                  {"checkpoint_every", train.checkpoint_every},
                  {"warmup_encoder_steps", train.warmup_encoder_steps},
                  {"debug_frozen_check", train.debug_frozen_check}};
    j["assemble"] = {{"tasks", assemble.tasks},
                     {"scene_description_stride", assemble.scene_description_stride},
                     {"dialogue_stride", assemble.dialogue_stride},
                     {"planning_stride", assemble.planning_stride}};
    j["generation"] = {{"strategy", strategy_name(generation.strategy)},
                       {"beam_size", generation.beam_size},
                       {"top_k", generation.top_k},
                       {"top_p", generation.top_p},
                       {"ngram_block", generation.ngram_block},
                       {"ngram_for_beam", generation.ngram_for_beam},
                       {"ngram_for_sample", generation.ngram_for_sample},
                       {"max_new_tokens", generation.max_new_tokens},
                       {"seed", generation.seed}};
    return j.dump(1);
}

void RunConfig::check_compatible(const RunConfig& other) const {
    auto fail = [](const char* field) {
        throw data_error(std::string("checkpoint/config mismatch on field '") + field + "'");
    };
    if (encoder.n_tokens != other.encoder.n_tokens) fail("encoder.n_tokens");
    if (encoder.d_enc != other.encoder.d_enc) fail("encoder.d_enc");
    if (mmt.layers != other.mmt.layers) fail("mmt.layers");
    if (mmt.d_mmt != other.mmt.d_mmt) fail("mmt.d_mmt");
    if (mmt.n_queries != other.mmt.n_queries) fail("mmt.n_queries");
    if (lm.layers != other.lm.layers) fail("lm.layers");
    if (lm.d_lm != other.lm.d_lm) fail("lm.d_lm");
    if (lm.max_positions != other.lm.max_positions) fail("lm.max_positions");
    if (prompt_pe_dim != other.prompt_pe_dim) fail("prompt.pe_dim");
}

// ---- dataset -----------------------------------------------------------------------

void write_dataset(const RunConfig& cfg, const std::string& dir) {
    fs::create_directories(fs::path(dir) / "scenes");
    std::vector<std::string> corpus;
    json manifest;
    manifest["seed"] = cfg.seed;
    json train = json::array(), val = json::array();
    for (int i = 0; i < cfg.scenes; ++i) {
        SceneRecord scene = generate_scene(split_seed(cfg.seed, i), cfg.datagen);
        char name[32];
        std::snprintf(name, sizeof(name), "scene_%04d", i);
        scene.id = name;
        write_scene(scene, (fs::path(dir) / "scenes" / (scene.id + ".json")).string());
        for (std::string& line : scene_corpus_lines(scene)) corpus.push_back(std::move(line));
        (i % 8 == 7 ? val : train).push_back(scene.id);
    }
    manifest["train"] = std::move(train);
    manifest["val"] = std::move(val);

    std::ofstream mf(fs::path(dir) / "manifest.json");
    mf << manifest.dump(1);
    std::ofstream cf(fs::path(dir) / "corpus.txt");
    for (const std::string& line : corpus) {
        std::string flat = line;
        std::replace(flat.begin(), flat.end(), '\n', ' ');
        cf << flat << "\n";
    }
    Vocabulary vocab = Vocabulary::build(corpus);
    std::ofstream vf(fs::path(dir) / "vocab.txt");
    for (const std::string& tok : vocab.token_list()) vf << tok << "\n";
}

Dataset Dataset::load(const std::string& dir) {
    Dataset data;
    std::ifstream mf(fs::path(dir) / "manifest.json");
    if (!mf) throw data_error("dataset: missing manifest.json in " + dir);
    json manifest;
    try {
        mf >> manifest;
    } catch (const json::exception& e) {
        throw data_error(std::string("dataset: bad manifest: ") + e.what());
    }
    for (const json& id : manifest["train"]) data.train_ids.push_back(id.get<std::string>());
    for (const json& id : manifest["val"]) data.val_ids.push_back(id.get<std::string>());

    for (const std::string& id : data.train_ids) {
        data.index[id] = data.scenes.size();
        data.scenes.push_back(read_scene((fs::path(dir) / "scenes" / (id + ".json")).string()));
    }
    for (const std::string& id : data.val_ids) {
        data.index[id] = data.scenes.size();
        data.scenes.push_back(read_scene((fs::path(dir) / "scenes" / (id + ".json")).string()));
    }

    std::ifstream cf(fs::path(dir) / "corpus.txt");
    if (!cf) throw data_error("dataset: missing corpus.txt in " + dir);
    std::string line;
    while (std::getline(cf, line))
        if (!line.empty()) data.corpus.push_back(line);

    std::ifstream vf(fs::path(dir) / "vocab.txt");
    if (!vf) throw data_error("dataset: missing vocab.txt in " + dir);
    std::vector<std::string> tokens;
    while (std::getline(vf, line)) tokens.push_back(line);
    while (!tokens.empty() && tokens.back().empty()) tokens.pop_back();
    data.vocab = Vocabulary::from_token_list(tokens);
    return data;
}

const SceneRecord& Dataset::scene(const std::string& id) const {
    auto it = index.find(id);
    if (it == index.end()) throw data_error("dataset: unknown scene id " + id);
    return scenes[it->second];
}

std::vector<TrainingSample> assemble_training_set(const Dataset& data, const RunConfig& cfg) {
    Rng rng(split_seed(cfg.seed, 0x616d706c));
    std::vector<TrainingSample> samples;
    auto enabled = [&](const std::string& task) {
        return std::find(cfg.assemble.tasks.begin(), cfg.assemble.tasks.end(), task) !=
               cfg.assemble.tasks.end();
    };
    int i = 0;
    for (const std::string& id : data.train_ids) {
        const SceneRecord& scene = data.scene(id);
        auto extend = [&](const std::string& task) {
            auto got = assemble_samples(scene, task, rng, data.vocab);
            samples.insert(samples.end(), got.begin(), got.end());
        };
        if (enabled("densecap")) extend("densecap");
        if (enabled("qa")) extend("qa");
        if (enabled("scene_description") && i % cfg.assemble.scene_description_stride == 0)
            extend("scene_description");
        if (enabled("dialogue") && i % cfg.assemble.dialogue_stride == 0) extend("dialogue");
        if (enabled("planning") && i % cfg.assemble.planning_stride == 0) extend("planning");
        ++i;
    }
    return samples;
}

// ---- model -------------------------------------------------------------------------

Model Model::build(const RunConfig& cfg, const Vocabulary& vocab) {
    Model m;
    m.cfg = cfg;
    m.cfg.mmt.d_enc = cfg.encoder.d_enc;
    m.cfg.lm.vocab_size = vocab.size();
    m.vocab = vocab;
    Rng rng(split_seed(cfg.seed, 0x696e6974));
    m.encoder = SceneEncoderParams::create(m.reg, m.cfg.encoder, 4, rng, true);
    PromptEncoderConfig pcfg;
    pcfg.d_mmt = m.cfg.mmt.d_mmt;
    pcfg.d_enc = m.cfg.encoder.d_enc;
    pcfg.pe_dim = cfg.prompt_pe_dim;
    pcfg.ffn_hidden = cfg.prompt_ffn_hidden;
    m.prompt_encoder = PromptEncoderParams::create(m.reg, pcfg, rng);
    m.mmt = MmtParams::create(m.reg, m.cfg.mmt, vocab.size(), m.cfg.lm.d_lm, rng);
    m.lm = LmParams::create(m.reg, m.cfg.lm, rng, false);
    return m;
}

void Model::load_params(const std::vector<Param>& params) {
    if (params.size() != reg.params.size())
        throw data_error("checkpoint: parameter count mismatch (" +
                         std::to_string(params.size()) + " vs " +
                         std::to_string(reg.params.size()) + ")");
    for (const Param& src : params) {
        Param* dst = reg.find(src.name);
        if (!dst) throw data_error("checkpoint: unknown parameter '" + src.name + "'");
        if (dst->tensor.shape != src.tensor.shape)
            throw data_error("checkpoint: shape mismatch for parameter '" + src.name + "'");
        *dst->tensor.data = *src.tensor.data;
        dst->frozen = src.frozen;
    }
    reg.sync_requires_grad();
}

const SceneCache::Entry& SceneCache::get(const SceneRecord& scene) {
    auto it = entries_.find(scene.id);
    if (it != entries_.end()) return it->second;
    Entry e;
    e.cloud = with_height_feature(scene.points);
    e.bounds = SceneBounds::of_points(e.cloud.coords);
    {
        NoGradGuard ng;
        e.embedding = encode_scene(e.cloud, model_.encoder);
    }
    return entries_.emplace(scene.id, std::move(e)).first->second;
}

Tensor sample_prefix(const Model& model, const SceneCache::Entry& scene,
                     const std::vector<VisualPrompt>& prompts, const TokenSequence& instruction) {
    PromptTokens pt =
        encode_visual_prompts(prompts, scene.embedding, scene.bounds, model.prompt_encoder);
    Tensor queries = mmt_forward(model.mmt, pt, instruction, scene.embedding);
    return project_prefix(model.mmt, queries);
}

Tensor sample_loss(const Model& model, const SceneCache::Entry& scene,
                   const TrainingSample& sample) {
    Tensor prefix = sample_prefix(model, scene, sample.prompts, sample.instruction);
    std::vector<int> ids = sample.instruction.ids;
    std::vector<uint8_t> mask = sample.instruction.loss_mask;
    ids.insert(ids.end(), sample.target.ids.begin(), sample.target.ids.end());
    mask.insert(mask.end(), sample.target.loss_mask.begin(), sample.target.loss_mask.end());
    ids.push_back(Vocabulary::eos_id);
    mask.push_back(1);

    Tensor logits = lm_forward(model.lm, prefix, ids);
    // row t predicts token t+1: shift targets left by one
    std::vector<int> targets(ids.begin() + 1, ids.end());
    std::vector<uint8_t> shifted(mask.begin() + 1, mask.end());
    return masked_cross_entropy(slice_rows(logits, 0, logits.shape[0] - 1), targets, shifted);
}

// ---- checkpoint io --------------------------------------------------------------------

namespace {

void put_u32(std::string& out, uint32_t v) {
    for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}
void put_u64(std::string& out, uint64_t v) {
    for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}
void put_f64(std::string& out, double v) { put_u64(out, std::bit_cast<uint64_t>(v)); }
void put_str(std::string& out, const std::string& s) {
    put_u64(out, s.size());
    out += s;
}

struct Reader {
    const std::string& buf;
    size_t pos = 0;

    void need(size_t n) const {
        if (pos + n > buf.size()) throw data_error("checkpoint: truncated file");
    }
    uint32_t u32() {
        need(4);
        uint32_t v = 0;
        for (int i = 0; i < 4; ++i) v |= static_cast<uint32_t>(static_cast<uint8_t>(buf[pos + i]))
                                         << (8 * i);
        pos += 4;
        return v;
    }
    uint64_t u64() {
        need(8);
        uint64_t v = 0;
        for (int i = 0; i < 8; ++i) v |= static_cast<uint64_t>(static_cast<uint8_t>(buf[pos + i]))
                                         << (8 * i);
        pos += 8;
        return v;
    }
    double f64() { return std::bit_cast<double>(u64()); }
    uint8_t u8() {
        need(1);
        return static_cast<uint8_t>(buf[pos++]);
    }
    std::string str() {
        uint64_t n = u64();
        need(n);
        std::string s = buf.substr(pos, n);
        pos += n;
        return s;
    }
};

constexpr char kMagic[4] = {'L', 'L', '3', 'D'};
constexpr uint32_t kVersion = 1;

}  // namespace

void save_checkpoint(const std::string& path, const RunConfig& cfg, const Vocabulary& vocab,
                     const ParamRegistry& reg, const OptimizerState* optimizer, uint64_t step) {
    std::string out;
    out.append(kMagic, 4);
    put_u32(out, kVersion);
    put_str(out, cfg.to_json_text());
    put_u32(out, static_cast<uint32_t>(vocab.size()));
    for (const std::string& tok : vocab.token_list()) put_str(out, tok);
    put_u32(out, static_cast<uint32_t>(reg.params.size()));
    for (const Param& p : reg.params) {
        put_str(out, p.name);
        out.push_back(p.frozen ? 1 : 0);
        put_u32(out, static_cast<uint32_t>(p.tensor.shape.size()));
        for (int64_t d : p.tensor.shape) put_u64(out, static_cast<uint64_t>(d));
        for (double v : *p.tensor.data) put_f64(out, v);
    }
    out.push_back(optimizer ? 1 : 0);
    if (optimizer) {
        put_u64(out, optimizer->step);
        put_f64(out, optimizer->cfg.beta1);
        put_f64(out, optimizer->cfg.beta2);
        put_f64(out, optimizer->cfg.eps);
        put_f64(out, optimizer->cfg.weight_decay);
        for (size_t i = 0; i < reg.params.size(); ++i) {
            put_u64(out, optimizer->m[i].size());
            for (double v : optimizer->m[i]) put_f64(out, v);
            put_u64(out, optimizer->v[i].size());
            for (double v : optimizer->v[i]) put_f64(out, v);
        }
    }
    put_u64(out, step);

    std::ofstream f(path, std::ios::binary);
    if (!f) throw data_error("checkpoint: cannot open " + path + " for writing");
    f.write(out.data(), static_cast<std::streamsize>(out.size()));
    if (!f) throw data_error("checkpoint: write failed for " + path);
}

LoadedCheckpoint load_checkpoint(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw data_error("checkpoint: cannot open " + path);
    std::stringstream ss;
    ss << f.rdbuf();
    std::string buf = ss.str();
    Reader r{buf};

    r.need(4);
    if (std::memcmp(buf.data(), kMagic, 4) != 0)
        throw data_error("checkpoint: bad magic (not an LL3D checkpoint)");
    r.pos = 4;
    LoadedCheckpoint ck;
    ck.version = r.u32();
    if (ck.version != kVersion)
        throw data_error("checkpoint: unsupported format version " + std::to_string(ck.version));
    ck.config = RunConfig::from_json_text(r.str());
    uint32_t vocab_count = r.u32();
    for (uint32_t i = 0; i < vocab_count; ++i) ck.vocab_tokens.push_back(r.str());
    uint32_t param_count = r.u32();
    for (uint32_t i = 0; i < param_count; ++i) {
        Param p;
        p.name = r.str();
        p.frozen = r.u8() != 0;
        uint32_t ndim = r.u32();
        std::vector<int64_t> shape;
        int64_t numel = 1;
        for (uint32_t d = 0; d < ndim; ++d) {
            shape.push_back(static_cast<int64_t>(r.u64()));
            numel *= shape.back();
        }
        std::vector<double> values(numel);
        for (int64_t v = 0; v < numel; ++v) values[v] = r.f64();
        p.tensor = Tensor::from_values(std::move(shape), std::move(values));
        ck.params.push_back(std::move(p));
    }
    ck.has_optimizer = r.u8() != 0;
    if (ck.has_optimizer) {
        ck.optimizer.step = r.u64();
        ck.optimizer.cfg.beta1 = r.f64();
        ck.optimizer.cfg.beta2 = r.f64();
        ck.optimizer.cfg.eps = r.f64();
        ck.optimizer.cfg.weight_decay = r.f64();
        for (uint32_t i = 0; i < param_count; ++i) {
            std::vector<double> m(r.u64());
            for (double& v : m) v = r.f64();
            std::vector<double> vv(r.u64());
            for (double& v : vv) v = r.f64();
            ck.optimizer.m.push_back(std::move(m));
            ck.optimizer.v.push_back(std::move(vv));
        }
    }
    ck.step = r.u64();
    if (r.pos != buf.size()) throw data_error("checkpoint: trailing bytes");
    return ck;
}

std::string checkpoint_inspect_json(const std::string& path) {
    LoadedCheckpoint ck = load_checkpoint(path);
    json j;
    j["version"] = ck.version;
    j["step"] = ck.step;
    j["config"] = json::parse(ck.config.to_json_text());
    j["vocab_size"] = ck.vocab_tokens.size();
    j["has_optimizer"] = ck.has_optimizer;
    int64_t total = 0, trainable = 0;
    json params = json::array();
    for (const Param& p : ck.params) {
        params.push_back({{"name", p.name},
                          {"shape", p.tensor.shape},
                          {"frozen", p.frozen},
                          {"numel", p.tensor.numel()}});
        total += p.tensor.numel();
        if (!p.frozen) trainable += p.tensor.numel();
    }
    j["params"] = std::move(params);
    j["total_values"] = total;
    j["trainable_values"] = trainable;
    return j.dump(1);
}

std::vector<uint8_t> param_bytes(const ParamRegistry& reg, const std::string& prefix) {
    std::vector<uint8_t> out;
    for (const Param& p : reg.params) {
        if (p.name.rfind(prefix, 0) != 0) continue;
        for (double v : *p.tensor.data) {
            uint64_t bits = std::bit_cast<uint64_t>(v);
            for (int i = 0; i < 8; ++i) out.push_back(static_cast<uint8_t>((bits >> (8 * i)) & 0xff));
        }
    }
    return out;
}

// ---- training --------------------------------------------------------------------------

namespace {

// self-supervised warm-up: a throwaway linear head reconstructs token
// centroids from token features, training the otherwise random encoder
void warmup_scene_encoder(Model& model, const Dataset& data, int steps) {
    for (Param& p : model.reg.params)
        if (p.name.rfind("enc.", 0) == 0) p.frozen = false;
    model.reg.sync_requires_grad();

    ParamRegistry head_reg;
    Rng rng(split_seed(model.cfg.seed, 0x77726d75));
    LinearParams head =
        make_linear(head_reg, "warmup.head", model.cfg.encoder.d_enc, 3, rng, false);

    OptimizerState opt;
    AdamwConfig acfg;
    acfg.weight_decay = 0.0;
    opt.init(model.reg, acfg);
    OptimizerState head_opt;
    head_opt.init(head_reg, acfg);

    for (int step = 0; step < steps; ++step) {
        const SceneRecord& scene = data.scenes[rng.below(data.scenes.size())];
        PointCloud cloud = with_height_feature(scene.points);
        model.reg.zero_grad();
        head_reg.zero_grad();
        SceneEmbedding emb = encode_scene(cloud, model.encoder);
        Tensor pred = linear(emb.tokens, head);
        Tensor want = Tensor::zeros({emb.count(), 3});
        for (int64_t i = 0; i < emb.count(); ++i)
            for (int a = 0; a < 3; ++a) want.at(i, a) = emb.positions[i][a];
        Tensor diff = sub(pred, want);
        Tensor loss = scale(sum_all(mul(diff, diff)), 1.0 / static_cast<double>(emb.count()));
        backward(loss);
        double lr = cosine_lr(step, steps, 1e-3, 1e-5);
        adamw_step(model.reg, opt, lr);
        adamw_step(head_reg, head_opt, lr);
    }

    for (Param& p : model.reg.params)
        if (p.name.rfind("enc.", 0) == 0) p.frozen = true;
    model.reg.sync_requires_grad();
}

}  // namespace

Model pretrain_language_model(const RunConfig& cfg, const Dataset& data,
                              const std::string& out_checkpoint, PretrainResult* stats) {
    Model model = Model::build(cfg, data.vocab);
    if (cfg.train.warmup_encoder_steps > 0)
        warmup_scene_encoder(model, data, cfg.train.warmup_encoder_steps);
    PretrainResult result = pretrain_lm(model.lm, model.reg, data.corpus, data.vocab, cfg.pretrain);
    if (stats) *stats = result;
    if (!out_checkpoint.empty())
        save_checkpoint(out_checkpoint, model.cfg, model.vocab, model.reg, nullptr, 0);
    return model;
}

TrainResult train_model(Model& model, const Dataset& data, const std::string& out_dir,
                        const std::function<void(const TrainProgress&)>& on_progress) {
    const TrainConfig& tc = model.cfg.train;
    for (Param& p : model.reg.params)
        if (p.name.rfind("lm.", 0) == 0 || p.name.rfind("enc.", 0) == 0) p.frozen = true;
    model.reg.sync_requires_grad();

    std::vector<TrainingSample> samples = assemble_training_set(data, model.cfg);
    if (samples.empty()) throw data_error("train: no training samples assembled");

    const std::vector<uint8_t> frozen_before = param_bytes(model.reg, "lm.");
    const std::vector<uint8_t> enc_before = param_bytes(model.reg, "enc.");
    auto check_frozen = [&](int64_t step) {
        if (param_bytes(model.reg, "lm.") != frozen_before ||
            param_bytes(model.reg, "enc.") != enc_before)
            throw numeric_error("train: frozen parameters changed at step " +
                                std::to_string(step));
    };

    SceneCache cache(model);
    OptimizerState opt;
    AdamwConfig acfg;
    acfg.weight_decay = tc.weight_decay;
    opt.init(model.reg, acfg);
    Rng rng(split_seed(model.cfg.seed, 0x747261696e));

    if (!out_dir.empty()) {
        fs::create_directories(out_dir);
        save_checkpoint((fs::path(out_dir) / "model_step0.ckpt").string(), model.cfg, model.vocab,
                        model.reg, &opt, 0);
    }
    TrainResult result;
    for (int64_t step = 0; step < tc.total_steps; ++step) {
        model.reg.zero_grad();
        double batch_loss = 0.0;
        for (int b = 0; b < tc.batch_size; ++b) {
            const TrainingSample& sample = samples[rng.below(samples.size())];
            Tensor loss = sample_loss(model, cache.get(data.scene(sample.scene_id)), sample);
            batch_loss += loss.item();
            backward(scale(loss, 1.0 / tc.batch_size));
        }
        const double lr = cosine_lr(step, tc.total_steps, tc.lr_max, tc.lr_min);
        adamw_step(model.reg, opt, lr);

        TrainProgress progress{step, batch_loss / tc.batch_size, lr};
        if (step == 0) result.first_loss = progress.loss;
        result.final_loss = progress.loss;
        result.log.push_back(progress);
        if (on_progress) on_progress(progress);

        if (tc.debug_frozen_check) check_frozen(step);
        if (tc.eval_every > 0 && (step + 1) % tc.eval_every == 0) {
            double acc = teacher_forced_accuracy(model, data, cache, samples, 48);
            std::fprintf(stderr, "step %lld loss %.4f lr %.2e train-acc %.3f\n",
                         static_cast<long long>(step + 1), progress.loss, lr, acc);
        }
        if (!out_dir.empty() && tc.checkpoint_every > 0 && (step + 1) % tc.checkpoint_every == 0) {
            char name[64];
            std::snprintf(name, sizeof(name), "model_step%lld.ckpt",
                          static_cast<long long>(step + 1));
            save_checkpoint((fs::path(out_dir) / name).string(), model.cfg, model.vocab,
                            model.reg, &opt, static_cast<uint64_t>(step + 1));
        }
    }
    check_frozen(tc.total_steps);

    if (!out_dir.empty()) {
        result.final_checkpoint = (fs::path(out_dir) / "model_final.ckpt").string();
        save_checkpoint(result.final_checkpoint, model.cfg, model.vocab, model.reg, &opt,
                        static_cast<uint64_t>(tc.total_steps));
        std::ofstream log(fs::path(out_dir) / "loss_log.csv");
        log << "step,loss,lr\n";
        for (const TrainProgress& p : result.log)
            log << p.step << "," << p.loss << "," << p.lr << "\n";
    }
    return result;
}

double teacher_forced_accuracy(const Model& model, const Dataset& data, SceneCache& cache,
                               const std::vector<TrainingSample>& samples, size_t max_samples) {
    NoGradGuard ng;
    int64_t correct = 0, total = 0;
    const size_t limit = max_samples == 0 ? samples.size() : std::min(max_samples, samples.size());
    for (size_t s = 0; s < limit; ++s) {
        const TrainingSample& sample = samples[s];
        const SceneCache::Entry& scene = cache.get(data.scene(sample.scene_id));
        Tensor prefix = sample_prefix(model, scene, sample.prompts, sample.instruction);

        std::vector<int> ids = sample.instruction.ids;
        std::vector<uint8_t> mask = sample.instruction.loss_mask;
        ids.insert(ids.end(), sample.target.ids.begin(), sample.target.ids.end());
        mask.insert(mask.end(), sample.target.loss_mask.begin(), sample.target.loss_mask.end());
        ids.push_back(Vocabulary::eos_id);
        mask.push_back(1);

        Tensor logits = lm_forward(model.lm, prefix, ids);
        const int64_t v = logits.shape[1];
        for (size_t t = 1; t < ids.size(); ++t) {
            if (!mask[t]) continue;
            // row t-1 predicts token t
            int64_t argmax = 0;
            for (int64_t j = 1; j < v; ++j)
                if (logits.at(t - 1, j) > logits.at(t - 1, argmax)) argmax = j;
            correct += argmax == ids[t] ? 1 : 0;
            ++total;
        }
    }
    return total == 0 ? 0.0 : static_cast<double>(correct) / static_cast<double>(total);
}

// ---- evaluation -------------------------------------------------------------------------

std::string strip_localization(const std::string& response) {
    std::string text = response;
    for (const char* open : {"<obj>", "<loc>"}) {
        const std::string close = std::string("</") + (open + 1);
        size_t pos;
        while ((pos = text.find(open)) != std::string::npos) {
            size_t end = text.find(close, pos);
            if (end == std::string::npos) {
                text.erase(pos);
                break;
            }
            text.erase(pos, end + close.size() - pos);
        }
    }
    for (const char* phrase : {"the object is localized at", "the related objects are localized at"}) {
        size_t pos = text.find(phrase);
        if (pos != std::string::npos) text.erase(pos, std::strlen(phrase));
    }
    // trim leftover separators
    const char* ws = " \t\n,.";
    size_t b = text.find_first_not_of(ws);
    size_t e = text.find_last_not_of(" \t\n,");
    if (b == std::string::npos) return "";
    return text.substr(b, e - b + 1);
}

std::string generate_response(Model& model, SceneCache& cache, const SceneRecord& scene,
                              const std::string& instruction_body,
                              const std::vector<VisualPrompt>& prompts,
                              const GenerationConfig& gen) {
    const SceneCache::Entry& entry = cache.get(scene);
    NoGradGuard ng;
    TokenSequence instruction =
        encode_text(wrap_instruction(instruction_body), model.vocab);
    Tensor prefix = sample_prefix(model, entry, prompts, instruction);
    LmDecoder decoder(model.lm, prefix, instruction.ids);
    std::vector<int> ids = generate(decoder, gen);
    return decode_tokens(ids, model.vocab);
}

namespace {

struct GeneratedItem {
    std::string key;
    std::string response;
    std::vector<std::string> references;
};

void add_corpus_metrics(std::vector<MetricEntry>& entries, const std::vector<GeneratedItem>& items,
                        const std::string& prefix) {
    std::vector<CiderItem> cider_corpus;
    double b = 0, r = 0;
    for (const GeneratedItem& it : items) {
        cider_corpus.push_back({it.response, it.references});
        b += bleu4(it.response, it.references);
        r += rouge_l(it.response, it.references);
    }
    std::vector<double> cd = cider_d(cider_corpus);
    double c = 0;
    for (double v : cd) c += v;
    const double n = std::max<size_t>(items.size(), 1);
    entries.push_back({prefix + "cider", 0, c / n, static_cast<int64_t>(items.size())});
    entries.push_back({prefix + "bleu4", 0, b / n, static_cast<int64_t>(items.size())});
    entries.push_back({prefix + "rouge_l", 0, r / n, static_cast<int64_t>(items.size())});
}

std::vector<std::string> split_ids(const Dataset& data, const std::string& split) {
    if (split == "train") return data.train_ids;
    if (split == "val") return data.val_ids;
    if (split == "all") {
        std::vector<std::string> ids = data.train_ids;
        ids.insert(ids.end(), data.val_ids.begin(), data.val_ids.end());
        return ids;
    }
    throw usage_error("eval: unknown split '" + split + "'");
}

std::map<std::string, std::vector<Box3D>> load_proposals(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw data_error("eval: cannot open proposals file " + path);
    json j;
    try {
        in >> j;
    } catch (const json::exception& e) {
        throw data_error(std::string("eval: bad proposals file: ") + e.what());
    }
    std::map<std::string, std::vector<Box3D>> out;
    for (auto& [scene_id, boxes] : j.items())
        for (const json& b : boxes) {
            if (b.size() != 6) throw data_error("eval: proposal box needs 6 numbers");
            Box3D box;
            for (int a = 0; a < 3; ++a) box.center[a] = b[a].get<double>();
            for (int a = 0; a < 3; ++a) box.size[a] = b[3 + a].get<double>();
            out[scene_id].push_back(box);
        }
    return out;
}

double response_confidence(Model& model, const Tensor& prefix, const std::vector<int>& context,
                           const std::vector<int>& ids) {
    if (ids.empty()) return 0.0;
    LmDecoder decoder(model.lm, prefix, context);
    double lp = sequence_log_prob(decoder, ids);
    return std::exp(lp / static_cast<double>(ids.size()));
}

}  // namespace

std::vector<MetricEntry> evaluate_task(Model& model, const Dataset& data, EvalOptions& opts) {
    SceneCache cache(model);
    std::vector<MetricEntry> entries;
    const std::vector<std::string> ids = split_ids(data, opts.split);
    if (ids.empty()) throw data_error("eval: split '" + opts.split + "' is empty");

    if (opts.task == "densecap") {
        CaptionEval eval;
        double iou_sum = 0.0;
        int64_t iou_n = 0;
        std::map<std::string, std::vector<Box3D>> proposals;
        if (!opts.proposals_path.empty()) proposals = load_proposals(opts.proposals_path);
        const std::string body = instruction_text(
            opts.localize ? TemplateId::densecap_localize : TemplateId::densecap, {});

        for (const std::string& id : ids) {
            const SceneRecord& scene = data.scene(id);
            const SceneBounds bounds = cache.get(scene).bounds;
            for (size_t i = 0; i < scene.instances.size(); ++i)
                eval.references[id + ":" + std::to_string(i)] = {scene.instances[i].captions,
                                                                 scene.instances[i].box};

            auto generate_for_box = [&](const Box3D& prompt_box) {
                std::string response = generate_response(
                    model, cache, scene, body, {VisualPrompt::of_box(prompt_box)},
                    opts.generation);
                CaptionPrediction pred;
                pred.caption = strip_localization(response);
                if (opts.localize) {
                    SpatialParse parsed = parse_spatial(response);
                    for (const SpatialToken& t : parsed.tokens)
                        if (t.kind == SpatialToken::Kind::box) {
                            pred.box = box_from_spatial(t, bounds);
                            break;
                        }
                } else {
                    pred.box = prompt_box;
                }
                return pred;
            };

            if (proposals.empty()) {
                for (size_t i = 0; i < scene.instances.size(); ++i) {
                    CaptionPrediction pred = generate_for_box(scene.instances[i].box);
                    if (opts.localize) {
                        iou_sum += pred.box ? box_iou_3d(*pred.box, scene.instances[i].box) : 0.0;
                        ++iou_n;
                    }
                    eval.predictions[id + ":" + std::to_string(i)] = std::move(pred);
                }
            } else {
                auto it = proposals.find(id);
                if (it == proposals.end()) continue;
                std::vector<CaptionPrediction> preds;
                for (const Box3D& box : it->second) preds.push_back(generate_for_box(box));
                // each reference instance takes its best-IoU proposal
                for (size_t i = 0; i < scene.instances.size(); ++i) {
                    int best = -1;
                    double best_iou = 0.0;
                    for (size_t p = 0; p < preds.size(); ++p) {
                        if (!preds[p].box) continue;
                        double iou = box_iou_3d(*preds[p].box, scene.instances[i].box);
                        if (iou > best_iou) {
                            best_iou = iou;
                            best = static_cast<int>(p);
                        }
                    }
                    if (best >= 0)
                        eval.predictions[id + ":" + std::to_string(i)] = preds[best];
                }
            }
        }
        const int64_t n = static_cast<int64_t>(eval.references.size());
        for (double k : {0.25, 0.5}) {
            entries.push_back({"cider", k, m_at_k_iou(eval, CaptionMetric::cider_d, k), n});
            entries.push_back({"bleu4", k, m_at_k_iou(eval, CaptionMetric::bleu4, k), n});
            entries.push_back({"rouge_l", k, m_at_k_iou(eval, CaptionMetric::rouge_l, k), n});
        }
        if (opts.localize && iou_n > 0) {
            opts.mean_iou = iou_sum / static_cast<double>(iou_n);
            entries.push_back({"mean_box_iou", 0, *opts.mean_iou, iou_n});
        }
    } else if (opts.task == "qa") {
        std::vector<GeneratedItem> items;
        for (const std::string& id : ids) {
            const SceneRecord& scene = data.scene(id);
            for (size_t q = 0; q < scene.qa.size(); ++q) {
                std::vector<VisualPrompt> prompts;
                if (opts.click_related)
                    for (int r : scene.qa[q].related)
                        prompts.push_back(VisualPrompt::of_click(scene.instances[r].box.center));
                std::string body =
                    instruction_text(TemplateId::qa, {{"question", scene.qa[q].question}});
                std::string response =
                    generate_response(model, cache, scene, body, prompts, opts.generation);
                items.push_back({id + ":q" + std::to_string(q), response,
                                 {scene.qa[q].answer + "."}});
            }
        }
        add_corpus_metrics(entries, items, "");
    } else if (opts.task == "scene_description") {
        std::vector<GeneratedItem> items;
        for (const std::string& id : ids) {
            const SceneRecord& scene = data.scene(id);
            std::string body = instruction_text(TemplateId::scene_description, {});
            std::string response =
                generate_response(model, cache, scene, body, {}, opts.generation);
            items.push_back({id, response, {scene_description_text(scene)}});
        }
        add_corpus_metrics(entries, items, "");
    } else if (opts.task == "dialogue" || opts.task == "planning") {
        std::vector<GeneratedItem> items;
        for (const std::string& id : ids) {
            const SceneRecord& scene = data.scene(id);
            std::vector<TrainingSample> samples;
            if (opts.task == "dialogue") {
                for (const auto& turns : scene.dialogues) {
                    auto got = decompose_dialogue(scene, turns, data.vocab);
                    samples.insert(samples.end(), got.begin(), got.end());
                }
            } else {
                for (const Plan& plan : scene.plans) {
                    auto got = decompose_planning(scene, plan, data.vocab);
                    samples.insert(samples.end(), got.begin(), got.end());
                }
            }
            for (size_t s = 0; s < samples.size(); ++s) {
                // instruction text already carries identifiers; strip ours off
                NoGradGuard ng;
                const SceneCache::Entry& entry = cache.get(scene);
                Tensor prefix = sample_prefix(model, entry, {}, samples[s].instruction);
                LmDecoder decoder(model.lm, prefix, samples[s].instruction.ids);
                std::vector<int> out = generate(decoder, opts.generation);
                items.push_back({id + ":" + std::to_string(s), decode_tokens(out, model.vocab),
                                 {samples[s].target_text}});
            }
        }
        add_corpus_metrics(entries, items, "");
    } else if (opts.task == "detect") {
        DetectionEval eval;
        std::vector<std::string> categories;
        for (const SceneRecord& scene : data.scenes)
            for (const SceneInstance& inst : scene.instances)
                if (std::find(categories.begin(), categories.end(), inst.category) ==
                    categories.end())
                    categories.push_back(inst.category);

        const std::string body = instruction_text(TemplateId::detect, {});
        for (const std::string& id : ids) {
            const SceneRecord& scene = data.scene(id);
            const SceneCache::Entry& entry = cache.get(scene);
            for (const SceneInstance& inst : scene.instances)
                eval.ground_truth.push_back({id, inst.box, inst.category, 0});

            // clicks at FPS centroids stand in for detector vote queries
            auto clicks = farthest_point_sampling(
                entry.cloud, std::min<int64_t>(model.cfg.detect_clicks, entry.cloud.size()));
            for (int64_t c : clicks) {
                NoGradGuard ng;
                TokenSequence instruction = encode_text(wrap_instruction(body), model.vocab);
                Tensor prefix = sample_prefix(
                    model, entry, {VisualPrompt::of_click(entry.cloud.coords[c])}, instruction);
                LmDecoder decoder(model.lm, prefix, instruction.ids);
                std::vector<int> out = generate(decoder, opts.generation);
                std::string response = decode_tokens(out, model.vocab);

                SpatialParse parsed = parse_spatial(response);
                const SpatialToken* box_tok = nullptr;
                for (const SpatialToken& t : parsed.tokens)
                    if (t.kind == SpatialToken::Kind::box) {
                        box_tok = &t;
                        break;
                    }
                if (!box_tok) continue;
                std::string category;
                size_t first_pos = std::string::npos;
                for (const std::string& cat : categories) {
                    size_t pos = response.find(cat);
                    if (pos != std::string::npos && pos < first_pos) {
                        first_pos = pos;
                        category = cat;
                    }
                }
                if (category.empty()) continue;
                eval.predictions.push_back({id, box_from_spatial(*box_tok, entry.bounds), category,
                                            response_confidence(model, prefix, instruction.ids,
                                                                out)});
            }
        }
        for (double thr : {0.25, 0.5}) {
            DetectionResult r = detection_pr(eval, thr);
            entries.push_back({"mAP", thr, r.mean_ap,
                               static_cast<int64_t>(eval.ground_truth.size())});
            entries.push_back({"AR", thr, r.average_recall,
                               static_cast<int64_t>(eval.ground_truth.size())});
        }
    } else {
        throw usage_error("eval: unknown task '" + opts.task + "'");
    }
    return entries;
}

}  // namespace ll3da
