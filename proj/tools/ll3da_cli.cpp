// Command-line front end; talks to the core exclusively through the C API.
#include <cstdio>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "ll3da/ll3da.h"

namespace {

int fail(ll3da_session* session, ll3da_status rc) {
    if (session) {
        std::fprintf(stderr, "ll3da: %s\n", ll3da_last_error(session));
        ll3da_session_close(session);
    }
    return static_cast<int>(rc);
}

std::string triple_list_json(const std::vector<std::string>& specs, size_t arity,
                             const char* what) {
    std::ostringstream out;
    out << "[";
    for (size_t i = 0; i < specs.size(); ++i) {
        std::istringstream ss(specs[i]);
        std::string piece;
        std::vector<double> vals;
        while (std::getline(ss, piece, ',')) {
            try {
                vals.push_back(std::stod(piece));
            } catch (const std::exception&) {
                throw CLI::ValidationError(std::string(what) + ": not a number: " + piece);
            }
        }
        if (vals.size() != arity)
            throw CLI::ValidationError(std::string(what) + ": expected " +
                                       std::to_string(arity) + " comma-separated values");
        out << (i ? "," : "") << "[";
        for (size_t v = 0; v < vals.size(); ++v) out << (v ? "," : "") << vals[v];
        out << "]";
    }
    out << "]";
    return out.str();
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"LL3DA-style visual-interactive 3D instruction tuning on synthetic scenes"};
    app.require_subcommand(1);
    std::string config_path;
    app.add_option("--config", config_path, "run configuration JSON file");

    // datagen
    auto* datagen = app.add_subcommand("datagen", "generate the synthetic dataset");
    std::string out_dir;
    datagen->add_option("--out", out_dir, "output dataset directory")->required();

    // pretrain-lm
    auto* pretrain = app.add_subcommand("pretrain-lm", "pre-train the language model backbone");
    std::string data_dir, out_ckpt;
    pretrain->add_option("--data", data_dir, "dataset directory")->required();
    pretrain->add_option("--out", out_ckpt, "output checkpoint path")->required();

    // train
    auto* train = app.add_subcommand("train", "instruction-tune the adapters");
    std::string train_data, init_ckpt, finetune_from, train_out;
    train->add_option("--data", train_data, "dataset directory")->required();
    train->add_option("--init", init_ckpt, "initial checkpoint (pretrain-lm output)");
    train->add_option("--finetune-from", finetune_from,
                      "checkpoint of a previous run to fine-tune");
    train->add_option("--out", train_out, "output run directory")->required();

    // eval
    auto* eval = app.add_subcommand("eval", "evaluate a checkpoint on a task");
    std::string eval_ckpt, eval_data, task = "densecap", split = "val", proposals;
    std::string report_json, report_csv, eval_strategy;
    bool localize = false, click_related = false;
    uint64_t eval_seed = 0;
    bool eval_seed_set = false;
    eval->add_option("--checkpoint", eval_ckpt, "model checkpoint")->required();
    eval->add_option("--data", eval_data, "dataset directory")->required();
    eval->add_option("--task", task,
                     "densecap | qa | scene_description | dialogue | planning | detect");
    eval->add_option("--split", split, "train | val | all");
    eval->add_flag("--localize", localize, "densecap: parse boxes from generated text");
    eval->add_flag("--click-related", click_related, "qa: click prompts at related objects");
    eval->add_option("--proposals", proposals, "densecap: JSON proposal boxes per scene");
    eval->add_option("--strategy", eval_strategy, "greedy | beam | sample");
    eval->add_option("--seed", eval_seed, "generation seed")->each([&](const std::string&) {
        eval_seed_set = true;
    });
    eval->add_option("--report-json", report_json, "write the JSON report here");
    eval->add_option("--report-csv", report_csv, "write the CSV report here");

    // generate
    auto* gen = app.add_subcommand("generate", "generate a response for one scene");
    std::string gen_ckpt, scene_path, instruction, gen_strategy;
    std::vector<std::string> clicks, boxes;
    uint64_t gen_seed = 0;
    bool gen_seed_set = false;
    int beam_size = 0, max_new = 0;
    gen->add_option("--checkpoint", gen_ckpt, "model checkpoint")->required();
    gen->add_option("--scene", scene_path, "scene JSON file")->required();
    gen->add_option("--instruction", instruction, "instruction text (without identifiers)")
        ->required();
    gen->add_option("--click", clicks, "visual prompt click as x,y,z (repeatable)");
    gen->add_option("--box", boxes, "visual prompt box as cx,cy,cz,w,h,l (repeatable)");
    gen->add_option("--strategy", gen_strategy, "greedy | beam | sample");
    gen->add_option("--seed", gen_seed, "sampling seed")->each([&](const std::string&) {
        gen_seed_set = true;
    });
    gen->add_option("--beam", beam_size, "beam size");
    gen->add_option("--max-new", max_new, "max new tokens");

    // checkpoint inspect
    auto* checkpoint = app.add_subcommand("checkpoint", "checkpoint utilities");
    checkpoint->require_subcommand(1);
    auto* inspect = checkpoint->add_subcommand("inspect", "print checkpoint summary as JSON");
    std::string inspect_path;
    inspect->add_option("path", inspect_path, "checkpoint file")->required();

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        int code = app.exit(e);
        return code == 0 ? 0 : static_cast<int>(LL3DA_ERR_USAGE);
    }

    ll3da_session* session = nullptr;
    ll3da_status rc = ll3da_session_open(config_path.c_str(), &session);
    if (rc != LL3DA_OK) return static_cast<int>(rc);

    if (datagen->parsed()) {
        rc = ll3da_generate_dataset(session, out_dir.c_str());
        if (rc != LL3DA_OK) return fail(session, rc);
        std::printf("dataset written to %s\n", out_dir.c_str());
    } else if (pretrain->parsed()) {
        rc = ll3da_pretrain(session, data_dir.c_str(), out_ckpt.c_str());
        if (rc != LL3DA_OK) return fail(session, rc);
        std::printf("pretrained checkpoint written to %s\n", out_ckpt.c_str());
    } else if (train->parsed()) {
        std::string init = !finetune_from.empty() ? finetune_from : init_ckpt;
        rc = ll3da_train(session, train_data.c_str(), init.c_str(), train_out.c_str());
        if (rc != LL3DA_OK) return fail(session, rc);
        std::printf("run artifacts written to %s\n", train_out.c_str());
    } else if (eval->parsed()) {
        std::ostringstream opts;
        opts << "{\"task\":\"" << task << "\",\"split\":\"" << split << "\""
             << ",\"localize\":" << (localize ? "true" : "false")
             << ",\"click_related\":" << (click_related ? "true" : "false");
        if (!proposals.empty()) opts << ",\"proposals\":\"" << proposals << "\"";
        if (!eval_strategy.empty()) opts << ",\"strategy\":\"" << eval_strategy << "\"";
        if (eval_seed_set) opts << ",\"seed\":" << eval_seed;
        if (!report_json.empty()) opts << ",\"report_json\":\"" << report_json << "\"";
        if (!report_csv.empty()) opts << ",\"report_csv\":\"" << report_csv << "\"";
        opts << "}";
        char* report = nullptr;
        rc = ll3da_evaluate(session, eval_ckpt.c_str(), eval_data.c_str(), opts.str().c_str(),
                            &report);
        if (rc != LL3DA_OK) return fail(session, rc);
        std::printf("%s\n", report);
        ll3da_string_free(report);
    } else if (gen->parsed()) {
        std::ostringstream opts;
        opts << "{";
        bool first = true;
        auto add = [&](const std::string& kv) {
            opts << (first ? "" : ",") << kv;
            first = false;
        };
        try {
            if (!clicks.empty()) add("\"clicks\":" + triple_list_json(clicks, 3, "--click"));
            if (!boxes.empty()) add("\"boxes\":" + triple_list_json(boxes, 6, "--box"));
        } catch (const CLI::ValidationError& e) {
            std::fprintf(stderr, "ll3da: %s\n", e.what());
            ll3da_session_close(session);
            return static_cast<int>(LL3DA_ERR_USAGE);
        }
        if (!gen_strategy.empty()) add("\"strategy\":\"" + gen_strategy + "\"");
        if (gen_seed_set) add("\"seed\":" + std::to_string(gen_seed));
        if (beam_size > 0) add("\"beam_size\":" + std::to_string(beam_size));
        if (max_new > 0) add("\"max_new_tokens\":" + std::to_string(max_new));
        opts << "}";
        char* response = nullptr;
        rc = ll3da_generate(session, gen_ckpt.c_str(), scene_path.c_str(), instruction.c_str(),
                            opts.str().c_str(), &response);
        if (rc != LL3DA_OK) return fail(session, rc);
        std::printf("%s\n", response);
        ll3da_string_free(response);
    } else if (inspect->parsed()) {
        char* text = nullptr;
        rc = ll3da_checkpoint_inspect(inspect_path.c_str(), &text);
        if (rc != LL3DA_OK) return fail(session, rc);
        std::printf("%s\n", text);
        ll3da_string_free(text);
    }

    ll3da_session_close(session);
    return 0;
}
