#include <doctest.h>

#include <filesystem>
#include <fstream>

#include <json.hpp>

#include "ll3da/pipeline.hpp"

using namespace ll3da;
namespace fs = std::filesystem;

namespace {

// small everything: fast to build, train a few steps, and generate
RunConfig tiny_config() {
    RunConfig cfg;
    cfg.seed = 0;
    cfg.scenes = 4;
    cfg.n_points = 192;
    cfg.datagen.points_per_scene = 192;
    cfg.datagen.min_instances = 3;
    cfg.datagen.max_instances = 4;
    cfg.datagen.qa_per_scene = 2;
    cfg.encoder.n_tokens = 16;
    cfg.encoder.d_enc = 16;
    cfg.encoder.knn = 4;
    cfg.encoder.heads = 2;
    cfg.encoder.ffn_hidden = 16;
    cfg.mmt.layers = 1;
    cfg.mmt.heads = 2;
    cfg.mmt.d_mmt = 16;
    cfg.mmt.n_queries = 8;
    cfg.prompt_pe_dim = 8;
    cfg.prompt_ffn_hidden = 16;
    cfg.lm.layers = 1;
    cfg.lm.heads = 2;
    cfg.lm.d_lm = 16;
    cfg.lm.max_positions = 160;
    cfg.pretrain.steps = 3;
    cfg.pretrain.batch_size = 2;
    cfg.train.total_steps = 3;
    cfg.train.batch_size = 2;
    cfg.train.eval_every = 0;
    cfg.generation.max_new_tokens = 12;
    return cfg;
}

struct TempDir {
    fs::path path;
    explicit TempDir(const std::string& name) : path(fs::temp_directory_path() / name) {
        fs::remove_all(path);
        fs::create_directories(path);
    }
    ~TempDir() { fs::remove_all(path); }
};

}  // namespace

TEST_CASE("config round trip and compatibility") {
    RunConfig cfg = tiny_config();
    cfg.mmt.fusion = FusionMode::direct;
    cfg.generation.strategy = GenerationConfig::Strategy::sample;
    RunConfig back = RunConfig::from_json_text(cfg.to_json_text());
    CHECK(back.to_json_text() == cfg.to_json_text());
    CHECK(back.mmt.fusion == FusionMode::direct);
    CHECK(back.generation.strategy == GenerationConfig::Strategy::sample);

    // partial configs keep defaults
    RunConfig partial = RunConfig::from_json_text(R"({"seed": 9, "mmt": {"layers": 3}})");
    CHECK(partial.seed == 9);
    CHECK(partial.mmt.layers == 3);
    CHECK(partial.train.batch_size == 16);
    CHECK(partial.train.weight_decay == 0.1);
    CHECK(partial.train.lr_max == 1e-4);

    RunConfig other = cfg;
    other.lm.d_lm = 32;
    CHECK_THROWS_WITH_AS(cfg.check_compatible(other), "checkpoint/config mismatch on field 'lm.d_lm'",
                         data_error);
}

TEST_CASE("dataset write and load") {
    TempDir dir("ll3da_dataset_test");
    RunConfig cfg = tiny_config();
    write_dataset(cfg, dir.path.string());

    CHECK(fs::exists(dir.path / "manifest.json"));
    CHECK(fs::exists(dir.path / "vocab.txt"));
    CHECK(fs::exists(dir.path / "corpus.txt"));

    Dataset data = Dataset::load(dir.path.string());
    CHECK(data.scenes.size() == 4);
    CHECK(data.train_ids.size() + data.val_ids.size() == 4);
    CHECK(data.vocab.size() > Vocabulary::first_corpus_id);
    CHECK_FALSE(data.corpus.empty());

    // reproducible: identical bytes for the same seed and config
    TempDir dir2("ll3da_dataset_test2");
    write_dataset(cfg, dir2.path.string());
    for (const char* name : {"manifest.json", "vocab.txt", "corpus.txt"}) {
        std::ifstream a(dir.path / name), b(dir2.path / name);
        std::string sa((std::istreambuf_iterator<char>(a)), std::istreambuf_iterator<char>());
        std::string sb((std::istreambuf_iterator<char>(b)), std::istreambuf_iterator<char>());
        CHECK(sa == sb);
    }

    auto samples = assemble_training_set(data, cfg);
    CHECK_FALSE(samples.empty());
    // deterministic assembly
    auto samples2 = assemble_training_set(data, cfg);
    REQUIRE(samples.size() == samples2.size());
    for (size_t i = 0; i < samples.size(); ++i) {
        CHECK(samples[i].instruction_text == samples2[i].instruction_text);
        CHECK(samples[i].target_text == samples2[i].target_text);
    }
}

TEST_CASE("checkpoint round trip") {
    TempDir dir("ll3da_ckpt_test");
    RunConfig cfg = tiny_config();
    Rng rng(1);
    ParamRegistry reg;
    reg.add("a.w", Tensor::randn({3, 4}, rng, 1.0));
    reg.add("b.w", Tensor::randn({2, 2}, rng, 1.0), true);
    Vocabulary vocab = Vocabulary::build({"hello world"});
    OptimizerState opt;
    opt.init(reg, AdamwConfig{});
    (*reg.params[0].tensor.grad)[0] = 0.5;
    adamw_step(reg, opt, 1e-3);

    fs::path p1 = dir.path / "a.ckpt";
    save_checkpoint(p1.string(), cfg, vocab, reg, &opt, 17);
    LoadedCheckpoint ck = load_checkpoint(p1.string());
    CHECK(ck.step == 17);
    CHECK(ck.vocab_tokens == vocab.token_list());
    REQUIRE(ck.params.size() == 2);
    CHECK(ck.params[0].name == "a.w");
    CHECK(*ck.params[0].tensor.data == *reg.params[0].tensor.data);
    CHECK(ck.params[1].frozen);
    CHECK(ck.has_optimizer);
    CHECK(ck.optimizer.step == 1);
    CHECK(ck.optimizer.m[0] == opt.m[0]);

    // save -> load -> save produces identical bytes
    ParamRegistry reg2;
    for (Param& p : ck.params) reg2.add(p.name, p.tensor, p.frozen);
    fs::path p2 = dir.path / "b.ckpt";
    save_checkpoint(p2.string(), ck.config, Vocabulary::from_token_list(ck.vocab_tokens), reg2,
                    &ck.optimizer, ck.step);
    std::ifstream f1(p1, std::ios::binary), f2(p2, std::ios::binary);
    std::string s1((std::istreambuf_iterator<char>(f1)), std::istreambuf_iterator<char>());
    std::string s2((std::istreambuf_iterator<char>(f2)), std::istreambuf_iterator<char>());
    CHECK(s1 == s2);

    // truncation and corruption are rejected
    std::string truncated = s1.substr(0, s1.size() / 2);
    fs::path p3 = dir.path / "trunc.ckpt";
    std::ofstream(p3, std::ios::binary) << truncated;
    CHECK_THROWS_AS(load_checkpoint(p3.string()), data_error);
    std::string bad = s1;
    bad[0] = 'X';
    std::ofstream(dir.path / "bad.ckpt", std::ios::binary) << bad;
    CHECK_THROWS_AS(load_checkpoint((dir.path / "bad.ckpt").string()), data_error);

    // inspect reports the essentials
    std::string inspect = checkpoint_inspect_json(p1.string());
    CHECK(inspect.find("\"a.w\"") != std::string::npos);
    CHECK(inspect.find("\"step\": 17") != std::string::npos);
}

TEST_CASE("pretrain, train, evaluate, generate end to end (tiny)") {
    TempDir dir("ll3da_e2e_test");
    RunConfig cfg = tiny_config();
    cfg.data_dir = (dir.path / "data").string();
    write_dataset(cfg, cfg.data_dir);
    Dataset data = Dataset::load(cfg.data_dir);

    // pretrain freezes the lm
    fs::path lm_ckpt = dir.path / "lm.ckpt";
    PretrainResult stats;
    Model model = pretrain_language_model(cfg, data, lm_ckpt.string(), &stats);
    CHECK(stats.steps_run == cfg.pretrain.steps);
    for (const Param& p : model.reg.params)
        if (p.name.rfind("lm.", 0) == 0) CHECK(p.frozen);

    // train only theta; frozen bytes stay put (debug check on)
    model.cfg.train.debug_frozen_check = true;
    std::vector<uint8_t> lm_before = param_bytes(model.reg, "lm.");
    std::vector<uint8_t> enc_before = param_bytes(model.reg, "enc.");
    std::vector<uint8_t> mmt_before = param_bytes(model.reg, "mmt.");
    TrainResult tr = train_model(model, data, (dir.path / "run").string());
    CHECK(param_bytes(model.reg, "lm.") == lm_before);
    CHECK(param_bytes(model.reg, "enc.") == enc_before);
    CHECK(param_bytes(model.reg, "mmt.") != mmt_before);
    CHECK(fs::exists(tr.final_checkpoint));
    CHECK(fs::exists(dir.path / "run" / "loss_log.csv"));

    // reload the final checkpoint into a fresh model: bit-identical params
    LoadedCheckpoint ck = load_checkpoint(tr.final_checkpoint);
    Model reloaded = Model::build(ck.config, Vocabulary::from_token_list(ck.vocab_tokens));
    reloaded.load_params(ck.params);
    for (size_t i = 0; i < model.reg.params.size(); ++i)
        CHECK(*reloaded.reg.params[i].tensor.data == *model.reg.params[i].tensor.data);

    // dims mismatch against a user config errors with the field name
    RunConfig wrong = cfg;
    wrong.mmt.n_queries = 4;
    CHECK_THROWS_AS(wrong.check_compatible(ck.config), data_error);

    // determinism: a second run from scratch gives bit-identical weights
    Model model2 = pretrain_language_model(cfg, data, "", nullptr);
    model2.cfg.train.debug_frozen_check = true;
    train_model(model2, data, "");
    for (size_t i = 0; i < model.reg.params.size(); ++i)
        CHECK(*model2.reg.params[i].tensor.data == *model.reg.params[i].tensor.data);

    // teacher-forced accuracy runs and stays in [0, 1]
    SceneCache cache(model);
    auto samples = assemble_training_set(data, model.cfg);
    double acc = teacher_forced_accuracy(model, data, cache, samples, 8);
    CHECK(acc >= 0.0);
    CHECK(acc <= 1.0);

    // eval is side-effect-free on model state and produces the report schema
    std::vector<uint8_t> all_before = param_bytes(model.reg, "");
    for (const char* task : {"densecap", "qa", "scene_description", "dialogue", "planning",
                             "detect"}) {
        EvalOptions opts;
        opts.task = task;
        opts.split = "train";
        opts.generation = model.cfg.generation;
        opts.generation.strategy = GenerationConfig::Strategy::greedy;
        opts.generation.max_new_tokens = 10;
        if (std::string(task) == "densecap") opts.localize = true;
        std::vector<MetricEntry> entries = evaluate_task(model, data, opts);
        CHECK_FALSE(entries.empty());
        for (const MetricEntry& e : entries) {
            CHECK_FALSE(e.metric.empty());
            CHECK(e.value >= 0.0);
        }
        std::string csv = metrics_to_csv(entries);
        CHECK(csv.find("metric,threshold,value,n_items") == 0);
    }
    CHECK(param_bytes(model.reg, "") == all_before);

    // proposal-file prompts: ground-truth boxes as proposals reproduce the
    // ground-truth-prompt protocol
    {
        nlohmann::json props;
        for (const std::string& id : data.train_ids) {
            nlohmann::json boxes = nlohmann::json::array();
            for (const SceneInstance& inst : data.scene(id).instances)
                boxes.push_back({inst.box.center[0], inst.box.center[1], inst.box.center[2],
                                 inst.box.size[0], inst.box.size[1], inst.box.size[2]});
            props[id] = std::move(boxes);
        }
        fs::path pfile = dir.path / "proposals.json";
        std::ofstream(pfile) << props.dump();
        EvalOptions with_props;
        with_props.task = "densecap";
        with_props.split = "train";
        with_props.proposals_path = pfile.string();
        with_props.generation = model.cfg.generation;
        with_props.generation.strategy = GenerationConfig::Strategy::greedy;
        with_props.generation.max_new_tokens = 10;
        EvalOptions with_gt = with_props;
        with_gt.proposals_path.clear();
        std::vector<MetricEntry> a = evaluate_task(model, data, with_props);
        std::vector<MetricEntry> b = evaluate_task(model, data, with_gt);
        REQUIRE(a.size() == b.size());
        for (size_t i = 0; i < a.size(); ++i) CHECK(a[i].value == doctest::Approx(b[i].value));
    }

    // qa with related clicks exercises the interaction path
    EvalOptions qa_opts;
    qa_opts.task = "qa";
    qa_opts.split = "train";
    qa_opts.click_related = true;
    qa_opts.generation = model.cfg.generation;
    qa_opts.generation.strategy = GenerationConfig::Strategy::greedy;
    qa_opts.generation.max_new_tokens = 8;
    CHECK_FALSE(evaluate_task(model, data, qa_opts).empty());

    // generation determinism incl. seeded sampling
    SceneCache gen_cache(model);
    const SceneRecord& scene = data.scenes[0];
    GenerationConfig gen = model.cfg.generation;
    gen.strategy = GenerationConfig::Strategy::greedy;
    gen.max_new_tokens = 10;
    std::string a = generate_response(model, gen_cache, scene, "describe this 3D scene", {}, gen);
    std::string b = generate_response(model, gen_cache, scene, "describe this 3D scene", {}, gen);
    CHECK(a == b);
    gen.strategy = GenerationConfig::Strategy::sample;
    gen.seed = 7;
    std::string c = generate_response(model, gen_cache, scene, "describe this 3D scene", {}, gen);
    std::string d = generate_response(model, gen_cache, scene, "describe this 3D scene", {}, gen);
    CHECK(c == d);
}

TEST_CASE("encoder warmup trains then refreezes") {
    TempDir dir("ll3da_warmup_test");
    RunConfig cfg = tiny_config();
    cfg.train.warmup_encoder_steps = 3;
    cfg.data_dir = (dir.path / "data").string();
    write_dataset(cfg, cfg.data_dir);
    Dataset data = Dataset::load(cfg.data_dir);

    Model cold = Model::build(cfg, data.vocab);
    std::vector<uint8_t> enc_init = param_bytes(cold.reg, "enc.");

    Model warm = pretrain_language_model(cfg, data, "", nullptr);
    CHECK(param_bytes(warm.reg, "enc.") != enc_init);
    for (const Param& p : warm.reg.params)
        if (p.name.rfind("enc.", 0) == 0) CHECK(p.frozen);
}

TEST_CASE("strip localization") {
    CHECK(strip_localization("the object is localized at <obj>1, 2, 3, 4, 5, 6</obj>, "
                             "the red chair is next to the table") ==
          "the red chair is next to the table");
    CHECK(strip_localization("the red chair") == "the red chair");
    CHECK(strip_localization("a <loc>1, 2, 3</loc> b") == "a  b");
    CHECK(strip_localization("") == "");
}
