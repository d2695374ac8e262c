#include "ll3da/ll3da.h"

#include <cstdio>
#include <cstdlib>
#include <cstring>
#include <fstream>
#include <optional>
#include <string>

#include <json.hpp>

#include "ll3da/pipeline.hpp"

using nlohmann::json;

struct ll3da_session {
    ll3da::RunConfig cfg;
    bool has_config = false;
    std::string last_error;
    std::string cached_checkpoint;
    std::optional<ll3da::Model> model;
};

namespace {

char* dup_string(const std::string& s) {
    char* out = static_cast<char*>(std::malloc(s.size() + 1));
    std::memcpy(out, s.c_str(), s.size() + 1);
    return out;
}

template <typename Fn>
ll3da_status guarded(ll3da_session* s, Fn&& fn) {
    auto record = [&](const char* what) {
        if (s)
            s->last_error = what;
        else
            std::fprintf(stderr, "ll3da: %s\n", what);
    };
    try {
        fn();
        return LL3DA_OK;
    } catch (const ll3da::usage_error& e) {
        record(e.what());
        return LL3DA_ERR_USAGE;
    } catch (const ll3da::data_error& e) {
        record(e.what());
        return LL3DA_ERR_DATA;
    } catch (const std::exception& e) {
        record(e.what());
        return LL3DA_ERR_NUMERIC;
    }
}

json parse_opts(const char* opts_json) {
    if (!opts_json || !*opts_json) return json::object();
    try {
        return json::parse(opts_json);
    } catch (const json::exception& e) {
        throw ll3da::usage_error(std::string("options: invalid json: ") + e.what());
    }
}

void apply_generation_opts(const json& opts, ll3da::GenerationConfig& gen) {
    if (opts.count("strategy")) {
        std::string s = opts["strategy"].get<std::string>();
        if (s == "greedy")
            gen.strategy = ll3da::GenerationConfig::Strategy::greedy;
        else if (s == "beam")
            gen.strategy = ll3da::GenerationConfig::Strategy::beam;
        else if (s == "sample")
            gen.strategy = ll3da::GenerationConfig::Strategy::sample;
        else
            throw ll3da::usage_error("options: unknown strategy '" + s + "'");
    }
    if (opts.count("seed")) gen.seed = opts["seed"].get<uint64_t>();
    if (opts.count("beam_size")) gen.beam_size = opts["beam_size"].get<int>();
    if (opts.count("top_k")) gen.top_k = opts["top_k"].get<int>();
    if (opts.count("top_p")) gen.top_p = opts["top_p"].get<double>();
    if (opts.count("ngram_block")) gen.ngram_block = opts["ngram_block"].get<int>();
    if (opts.count("max_new_tokens")) gen.max_new_tokens = opts["max_new_tokens"].get<int>();
}

ll3da::Model& load_model(ll3da_session* s, const char* checkpoint) {
    if (!checkpoint || !*checkpoint) throw ll3da::usage_error("checkpoint path required");
    if (s->model && s->cached_checkpoint == checkpoint) return *s->model;
    ll3da::LoadedCheckpoint ck = ll3da::load_checkpoint(checkpoint);
    if (s->has_config) s->cfg.check_compatible(ck.config);
    ll3da::RunConfig cfg = ck.config;
    if (s->has_config) {
        cfg.generation = s->cfg.generation;
        cfg.detect_clicks = s->cfg.detect_clicks;
    }
    ll3da::Model m =
        ll3da::Model::build(cfg, ll3da::Vocabulary::from_token_list(ck.vocab_tokens));
    m.load_params(ck.params);
    s->model.emplace(std::move(m));
    s->cached_checkpoint = checkpoint;
    return *s->model;
}

}  // namespace

extern "C" {

const char* ll3da_version(void) { return "1.0.0"; }

ll3da_status ll3da_session_open(const char* config_json_path, ll3da_session** out) {
    if (!out) return LL3DA_ERR_USAGE;
    *out = nullptr;
    auto* s = new ll3da_session();
    ll3da_status rc = guarded(s, [&] {
        if (config_json_path && *config_json_path) {
            s->cfg = ll3da::RunConfig::from_file(config_json_path);
            s->has_config = true;
        }
    });
    if (rc != LL3DA_OK) {
        std::fprintf(stderr, "ll3da: %s\n", s->last_error.c_str());
        delete s;
        return rc;
    }
    *out = s;
    return LL3DA_OK;
}

void ll3da_session_close(ll3da_session* s) { delete s; }

const char* ll3da_last_error(const ll3da_session* s) {
    return s ? s->last_error.c_str() : "";
}

void ll3da_string_free(char* s) { std::free(s); }

ll3da_status ll3da_generate_dataset(ll3da_session* s, const char* out_dir) {
    if (!s) return LL3DA_ERR_USAGE;
    return guarded(s, [&] {
        if (!out_dir || !*out_dir) throw ll3da::usage_error("datagen: output directory required");
        ll3da::write_dataset(s->cfg, out_dir);
    });
}

ll3da_status ll3da_pretrain(ll3da_session* s, const char* data_dir, const char* out_checkpoint) {
    if (!s) return LL3DA_ERR_USAGE;
    return guarded(s, [&] {
        if (!data_dir || !*data_dir) throw ll3da::usage_error("pretrain: data directory required");
        if (!out_checkpoint || !*out_checkpoint)
            throw ll3da::usage_error("pretrain: output checkpoint path required");
        ll3da::Dataset data = ll3da::Dataset::load(data_dir);
        ll3da::PretrainResult stats;
        ll3da::pretrain_language_model(s->cfg, data, out_checkpoint, &stats);
        std::fprintf(stderr, "pretrain: heldout loss %.4f -> %.4f, perplexity %.3f\n",
                     stats.heldout_loss_before, stats.heldout_loss_after, stats.perplexity);
        if (!stats.reached_target)
            std::fprintf(stderr,
                         "pretrain: warning: perplexity %.3f above target %.3f after %d steps\n",
                         stats.perplexity, s->cfg.pretrain.perplexity_target, stats.steps_run);
    });
}

ll3da_status ll3da_train(ll3da_session* s, const char* data_dir, const char* init_checkpoint,
                         const char* out_dir) {
    if (!s) return LL3DA_ERR_USAGE;
    return guarded(s, [&] {
        if (!data_dir || !*data_dir) throw ll3da::usage_error("train: data directory required");
        if (!init_checkpoint || !*init_checkpoint)
            throw ll3da::usage_error("train: initial checkpoint required (pretrain-lm output)");
        if (!out_dir || !*out_dir) throw ll3da::usage_error("train: output directory required");
        ll3da::Dataset data = ll3da::Dataset::load(data_dir);
        ll3da::LoadedCheckpoint ck = ll3da::load_checkpoint(init_checkpoint);
        if (s->has_config) s->cfg.check_compatible(ck.config);
        ll3da::RunConfig cfg = ck.config;
        if (s->has_config) {
            cfg.train = s->cfg.train;
            cfg.assemble = s->cfg.assemble;
            cfg.generation = s->cfg.generation;
        }
        ll3da::Model model =
            ll3da::Model::build(cfg, ll3da::Vocabulary::from_token_list(ck.vocab_tokens));
        model.load_params(ck.params);
        const int log_every = std::max(1, cfg.train.total_steps / 20);
        ll3da::TrainResult result =
            ll3da::train_model(model, data, out_dir, [&](const ll3da::TrainProgress& p) {
                if ((p.step + 1) % log_every == 0)
                    std::fprintf(stderr, "train: step %lld/%d loss %.4f lr %.2e\n",
                                 static_cast<long long>(p.step + 1), cfg.train.total_steps,
                                 p.loss, p.lr);
            });
        std::fprintf(stderr, "train: finished, loss %.4f -> %.4f, checkpoint %s\n",
                     result.first_loss, result.final_loss, result.final_checkpoint.c_str());
        s->model.reset();
        s->cached_checkpoint.clear();
    });
}

ll3da_status ll3da_evaluate(ll3da_session* s, const char* checkpoint, const char* data_dir,
                            const char* opts_json, char** report_out) {
    if (!s) return LL3DA_ERR_USAGE;
    return guarded(s, [&] {
        if (!data_dir || !*data_dir) throw ll3da::usage_error("eval: data directory required");
        json opts = parse_opts(opts_json);
        ll3da::Model& model = load_model(s, checkpoint);
        ll3da::Dataset data = ll3da::Dataset::load(data_dir);

        ll3da::EvalOptions eval_opts;
        eval_opts.generation = model.cfg.generation;
        if (opts.count("task")) eval_opts.task = opts["task"].get<std::string>();
        if (opts.count("split")) eval_opts.split = opts["split"].get<std::string>();
        if (opts.count("localize")) eval_opts.localize = opts["localize"].get<bool>();
        if (opts.count("click_related"))
            eval_opts.click_related = opts["click_related"].get<bool>();
        if (opts.count("proposals")) eval_opts.proposals_path = opts["proposals"].get<std::string>();
        apply_generation_opts(opts, eval_opts.generation);

        std::vector<ll3da::MetricEntry> entries = ll3da::evaluate_task(model, data, eval_opts);
        std::string report = ll3da::metrics_to_json(entries);
        if (opts.count("report_json")) {
            std::ofstream f(opts["report_json"].get<std::string>());
            f << report;
        }
        if (opts.count("report_csv")) {
            std::ofstream f(opts["report_csv"].get<std::string>());
            f << ll3da::metrics_to_csv(entries);
        }
        if (report_out) *report_out = dup_string(report);
    });
}

ll3da_status ll3da_generate(ll3da_session* s, const char* checkpoint, const char* scene_path,
                            const char* instruction, const char* opts_json, char** response_out) {
    if (!s) return LL3DA_ERR_USAGE;
    return guarded(s, [&] {
        if (!scene_path || !*scene_path) throw ll3da::usage_error("generate: scene file required");
        if (!instruction || !*instruction)
            throw ll3da::usage_error("generate: instruction text required");
        json opts = parse_opts(opts_json);
        ll3da::Model& model = load_model(s, checkpoint);
        ll3da::SceneRecord scene = ll3da::read_scene(scene_path);

        std::vector<ll3da::VisualPrompt> prompts;
        if (opts.count("clicks"))
            for (const json& c : opts["clicks"]) {
                if (c.size() != 3) throw ll3da::usage_error("generate: click needs x,y,z");
                prompts.push_back(ll3da::VisualPrompt::of_click(
                    {c[0].get<double>(), c[1].get<double>(), c[2].get<double>()}));
            }
        if (opts.count("boxes"))
            for (const json& b : opts["boxes"]) {
                if (b.size() != 6)
                    throw ll3da::usage_error("generate: box needs cx,cy,cz,w,h,l");
                ll3da::Box3D box;
                for (int a = 0; a < 3; ++a) box.center[a] = b[a].get<double>();
                for (int a = 0; a < 3; ++a) box.size[a] = b[3 + a].get<double>();
                prompts.push_back(ll3da::VisualPrompt::of_box(box));
            }
        ll3da::GenerationConfig gen = model.cfg.generation;
        apply_generation_opts(opts, gen);

        ll3da::SceneCache cache(model);
        std::string response =
            ll3da::generate_response(model, cache, scene, instruction, prompts, gen);
        if (response_out) *response_out = dup_string(response);
    });
}

ll3da_status ll3da_checkpoint_inspect(const char* path, char** json_out) {
    return guarded(static_cast<ll3da_session*>(nullptr), [&] {
        if (!path || !*path) throw ll3da::usage_error("inspect: checkpoint path required");
        std::string text = ll3da::checkpoint_inspect_json(path);
        if (json_out) *json_out = dup_string(text);
    });
}

}  // extern "C"
