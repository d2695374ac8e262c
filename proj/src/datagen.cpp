#include "ll3da/datagen.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>

#include <json.hpp>

namespace ll3da {

namespace {

using nlohmann::json;

struct CategorySpec {
    const char* name;
    Vec3 size;  // base extents along x, y, z
};

const CategorySpec kCategories[] = {
    {"chair", {0.5, 0.5, 0.9}},   {"table", {1.4, 0.8, 0.75}}, {"sofa", {1.8, 0.9, 0.8}},
    {"bed", {1.6, 2.0, 0.5}},     {"desk", {1.2, 0.6, 0.75}},  {"lamp", {0.3, 0.3, 1.5}},
    {"cabinet", {0.8, 0.45, 1.8}}, {"stool", {0.35, 0.35, 0.45}},
};

struct ColorSpec {
    const char* name;
    Vec3 rgb;
};

const ColorSpec kColors[] = {
    {"red", {0.8, 0.1, 0.1}},     {"green", {0.1, 0.7, 0.15}}, {"blue", {0.12, 0.2, 0.8}},
    {"yellow", {0.85, 0.8, 0.1}}, {"white", {0.95, 0.95, 0.95}}, {"black", {0.05, 0.05, 0.05}},
    {"brown", {0.55, 0.35, 0.15}},
};

const char* kCountWords[] = {"zero", "one", "two", "three", "four",
                             "five", "six", "seven", "eight"};

std::string room_part(const Box3D& box, double ex, double ey) {
    std::string part = box.center[1] < ey / 2 ? "front" : "back";
    part += box.center[0] < ex / 2 ? " left" : " right";
    return part;
}

double center_dist(const Box3D& a, const Box3D& b) {
    double d = 0.0;
    for (int ax = 0; ax < 3; ++ax) {
        double diff = a.center[ax] - b.center[ax];
        d += diff * diff;
    }
    return std::sqrt(d);
}

int nearest_instance(const std::vector<SceneInstance>& instances, int self) {
    int best = -1;
    double best_d = HUGE_VAL;
    for (int i = 0; i < static_cast<int>(instances.size()); ++i) {
        if (i == self) continue;
        double d = center_dist(instances[self].box, instances[i].box);
        if (d < best_d) {
            best_d = d;
            best = i;
        }
    }
    return best;
}

// uniform point on the surface of an axis-aligned box
Vec3 sample_box_surface(const Box3D& b, Rng& rng) {
    double ax = b.size[1] * b.size[2], ay = b.size[0] * b.size[2], az = b.size[0] * b.size[1];
    double total = 2 * (ax + ay + az);
    double pick = rng.uniform() * total;
    int face_axis = pick < 2 * ax ? 0 : (pick < 2 * (ax + ay) ? 1 : 2);
    double side = rng.uniform() < 0.5 ? -0.5 : 0.5;
    Vec3 p;
    for (int a = 0; a < 3; ++a) p[a] = b.center[a] + b.size[a] * rng.uniform(-0.5, 0.5);
    p[face_axis] = b.center[face_axis] + side * b.size[face_axis];
    return p;
}

std::string enumerate_steps(const std::vector<std::string>& steps, size_t count,
                            const char* sep) {
    std::string out;
    for (size_t i = 0; i < count; ++i) {
        if (i) out += sep;
        out += std::to_string(i + 1) + ". " + steps[i];
    }
    return out;
}

std::string fmt_real(double v) {
    char buf[40];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return buf;
}

double parse_real(const json& j, const char* field) {
    if (j.is_number()) return j.get<double>();
    if (j.is_string()) {
        try {
            size_t used = 0;
            double v = std::stod(j.get<std::string>(), &used);
            if (used == j.get<std::string>().size()) return v;
        } catch (const std::exception&) {
        }
    }
    throw data_error(std::string("scene: field '") + field + "' is not a real number");
}

const json& require(const json& j, const char* field) {
    auto it = j.find(field);
    if (it == j.end()) throw data_error(std::string("scene: missing field '") + field + "'");
    return *it;
}

}  // namespace

SceneRecord generate_scene(uint64_t seed, const DatagenConfig& cfg) {
    Rng rng(split_seed(seed, 0x7363656e));
    SceneRecord scene;
    {
        char buf[32];
        std::snprintf(buf, sizeof(buf), "scene_%08llx", static_cast<unsigned long long>(seed));
        scene.id = buf;
    }
    const double ex = cfg.extent_x, ey = cfg.extent_y;

    // place non-overlapping instances on the floor
    const int want = rng.range(cfg.min_instances, cfg.max_instances);
    int attempts = 0;
    while (static_cast<int>(scene.instances.size()) < want) {
        if (++attempts > cfg.max_place_attempts)
            throw data_error("generate_scene: could not place instances without overlap");
        const CategorySpec& cat = kCategories[rng.below(std::size(kCategories))];
        const ColorSpec& color = kColors[rng.below(std::size(kColors))];
        const bool large = rng.uniform() < 0.5;
        const double s = large ? 1.2 : 0.85;
        Box3D box;
        box.size = {cat.size[0] * s, cat.size[1] * s, cat.size[2] * s};
        box.center = {rng.uniform(box.size[0] / 2 + 0.2, ex - box.size[0] / 2 - 0.2),
                      rng.uniform(box.size[1] / 2 + 0.2, ey - box.size[1] / 2 - 0.2),
                      box.size[2] / 2};
        bool collides = false;
        for (const SceneInstance& other : scene.instances) {
            Box3D grown = other.box;
            grown.size = {grown.size[0] + 0.2, grown.size[1] + 0.2, grown.size[2] + 0.2};
            collides = collides || box_iou_3d(grown, box) > 0.0;
        }
        if (collides) continue;
        SceneInstance inst;
        inst.box = box;
        inst.category = cat.name;
        inst.attributes["color"] = color.name;
        inst.attributes["size"] = large ? "large" : "small";
        scene.instances.push_back(std::move(inst));
    }

    // captions from the attribute grammar
    for (int i = 0; i < static_cast<int>(scene.instances.size()); ++i) {
        SceneInstance& inst = scene.instances[i];
        int nb = nearest_instance(scene.instances, i);
        std::string relation;
        if (nb >= 0 && center_dist(inst.box, scene.instances[nb].box) < 2.5)
            relation = "next to the " + scene.instances[nb].category;
        else
            relation = "in the " + room_part(inst.box, ex, ey) + " part of the room";
        const std::string& color = inst.attributes.at("color");
        inst.captions.push_back("the " + color + " " + inst.category + " is " + relation);
        inst.captions.push_back("there is a " + inst.attributes.at("size") + " " + color + " " +
                                inst.category + " " + relation);
    }

    // points: floor plus instance surfaces
    scene.points.feature_dim = 3;
    const int floor_points = cfg.points_per_scene / 4;
    const int rest = cfg.points_per_scene - floor_points;
    for (int i = 0; i < floor_points; ++i) {
        // pin the first two points to opposite floor corners so the scene
        // bounds cover the full extent deterministically
        Vec3 p = i == 0   ? Vec3{0, 0, 0}
                 : i == 1 ? Vec3{ex, ey, 0}
                          : Vec3{rng.uniform(0, ex), rng.uniform(0, ey), 0.0};
        scene.points.coords.push_back(p);
        for (double c : {0.5, 0.5, 0.5}) scene.points.features.push_back(c);
    }
    for (int i = 0; i < rest; ++i) {
        const int inst = static_cast<int>(i % scene.instances.size());
        const SceneInstance& si = scene.instances[inst];
        Vec3 p = sample_box_surface(si.box, rng);
        scene.points.coords.push_back(p);
        Vec3 rgb{0.5, 0.5, 0.5};
        for (const ColorSpec& c : kColors)
            if (si.attributes.at("color") == c.name) rgb = c.rgb;
        for (int a = 0; a < 3; ++a)
            scene.points.features.push_back(std::clamp(rgb[a] + rng.uniform(-0.03, 0.03), 0.0, 1.0));
    }

    // qa pairs over unambiguous categories
    std::map<std::string, std::vector<int>> by_cat;
    for (int i = 0; i < static_cast<int>(scene.instances.size()); ++i)
        by_cat[scene.instances[i].category].push_back(i);
    std::vector<std::string> unique_cats;
    for (auto& [cat, ids] : by_cat)
        if (ids.size() == 1) unique_cats.push_back(cat);
    for (int k = 0; k < cfg.qa_per_scene; ++k) {
        const int form = rng.range(0, 3);
        if ((form == 0 || form == 2 || form == 3) && unique_cats.empty()) continue;
        if (form == 0) {
            const std::string& cat = unique_cats[rng.below(unique_cats.size())];
            int idx = by_cat[cat][0];
            scene.qa.push_back({"what color is the " + cat + "?",
                                scene.instances[idx].attributes.at("color"),
                                {idx}});
        } else if (form == 1) {
            auto it = by_cat.begin();
            std::advance(it, rng.below(by_cat.size()));
            scene.qa.push_back({"how many " + it->first + "s are there?",
                                kCountWords[it->second.size()], it->second});
        } else if (form == 2) {
            const std::string& cat = unique_cats[rng.below(unique_cats.size())];
            int idx = by_cat[cat][0];
            int nb = nearest_instance(scene.instances, idx);
            if (nb < 0) continue;
            scene.qa.push_back({"what is next to the " + cat + "?",
                                "the " + scene.instances[nb].attributes.at("color") + " " +
                                    scene.instances[nb].category,
                                {idx, nb}});
        } else {
            const std::string& cat = unique_cats[rng.below(unique_cats.size())];
            int idx = by_cat[cat][0];
            scene.qa.push_back({"where is the " + cat + "?",
                                "it is in the " + room_part(scene.instances[idx].box, ex, ey) +
                                    " part of the room",
                                {idx}});
        }
    }

    // dialogues reuse qa pairs as alternating turns
    if (scene.qa.size() >= 2) {
        std::vector<DialogueTurn> turns;
        const int n = std::min<int>(static_cast<int>(scene.qa.size()), rng.range(2, 3));
        for (int i = 0; i < n; ++i) {
            turns.push_back({"human", scene.qa[i].question});
            turns.push_back({"assistant", scene.qa[i].answer});
        }
        scene.dialogues.push_back(std::move(turns));
    }

    // plans keyed to present categories
    auto add_plan = [&](const char* need, const char* goal, std::vector<std::string> steps) {
        if (!by_cat.count(need)) return;
        scene.plans.push_back({goal, std::move(steps)});
    };
    add_plan("desk", "I want to set up a home office workspace.",
             {"place a desk against the wall", "position a chair at the desk",
              "put a lamp on the desk"});
    add_plan("table", "I want to prepare the table for dinner.",
             {"clear the table", "set plates on the table", "arrange the chairs around the table"});
    add_plan("sofa", "I want to host friends for a movie night.",
             {"arrange the sofa to face the screen", "move the table closer to the sofa"});
    add_plan("bed", "I want to arrange the bedroom for sleeping.",
             {"make the bed", "place the lamp next to the bed"});
    if (scene.plans.empty())
        scene.plans.push_back({"I want to tidy up this room.",
                               {"pick up loose items", "wipe the surfaces",
                                "arrange the furniture neatly"}});
    if (scene.plans.size() > 2) scene.plans.resize(2);

    return scene;
}

PointCloud with_height_feature(const PointCloud& pc) {
    double min_z = HUGE_VAL;
    for (const Vec3& c : pc.coords) min_z = std::min(min_z, c[2]);
    PointCloud out;
    out.coords = pc.coords;
    out.feature_dim = pc.feature_dim + 1;
    for (int64_t i = 0; i < pc.size(); ++i) {
        for (int64_t j = 0; j < pc.feature_dim; ++j) out.features.push_back(pc.feature_row(i)[j]);
        out.features.push_back(pc.coords[i][2] - min_z);
    }
    return out;
}

std::string scene_description_text(const SceneRecord& scene) {
    std::string out = "this room contains " +
                      std::string(kCountWords[std::min<size_t>(scene.instances.size(), 8)]) +
                      " objects :";
    for (size_t i = 0; i < scene.instances.size(); ++i) {
        if (i) out += " ,";
        out += " a " + scene.instances[i].attributes.at("color") + " " +
               scene.instances[i].category;
    }
    return out;
}

std::vector<std::string> scene_corpus_lines(const SceneRecord& scene) {
    // fully formatted instruction/response lines: the frozen LM must have the
    // same conditional structure in distribution that tuning exercises
    std::vector<std::string> lines;
    const SceneBounds bounds = scene.bounds();
    auto pair = [&](const std::string& instr_body, const std::string& target) {
        lines.push_back(wrap_instruction(instr_body) + " " + target);
    };

    for (const SceneInstance& inst : scene.instances) {
        const std::string obj = render_spatial(spatial_from_box(inst.box, bounds));
        pair(instruction_text(TemplateId::densecap, {}), inst.captions[0]);
        pair(instruction_text(TemplateId::densecap_localize, {}),
             "the object is localized at " + obj + ", " + inst.captions[0]);
        pair(instruction_text(TemplateId::detect, {}),
             "the object is localized at " + obj + ", " + inst.captions[0]);
        if (inst.captions.size() > 1) lines.push_back(inst.captions[1]);
    }
    pair(instruction_text(TemplateId::scene_description, {}), scene_description_text(scene));
    for (const QaPair& qa : scene.qa) {
        pair(instruction_text(TemplateId::qa, {{"question", qa.question}}), qa.answer + ".");
        std::string objs;
        for (int r : qa.related) {
            if (!objs.empty()) objs += " ";
            objs += render_spatial(spatial_from_box(scene.instances[r].box, bounds));
        }
        pair(instruction_text(TemplateId::qa_localize, {{"question", qa.question}}),
             "the related objects are localized at " + objs + ". the answer is: " + qa.answer +
                 ".");
    }
    for (const auto& turns : scene.dialogues) {
        for (size_t i = 0; i + 1 < turns.size(); i += 2) {
            std::vector<DialogueTurn> prior(turns.begin(), turns.begin() + i);
            lines.push_back(wrap_dialogue(prior, turns[i].text) + " " + turns[i + 1].text);
        }
    }
    for (const Plan& plan : scene.plans) {
        pair(instruction_text(TemplateId::planning_full, {{"goal", plan.goal}}),
             enumerate_steps(plan.steps, plan.steps.size(), "\n"));
        for (size_t done = 1; done <= plan.steps.size(); ++done) {
            std::string target =
                done < plan.steps.size() ? plan.steps[done] : "all tasks are done";
            pair(instruction_text(
                     TemplateId::planning_next,
                     {{"goal", plan.goal}, {"done", enumerate_steps(plan.steps, done, " ")}}),
                 target);
        }
    }
    return lines;
}

namespace {

TrainingSample make_sample(const SceneRecord& scene, const std::string& task,
                           std::vector<VisualPrompt> prompts, const std::string& instr_text,
                           const std::string& target_text, const Vocabulary& vocab,
                           int instance = -1) {
    TrainingSample s;
    s.scene_id = scene.id;
    s.task = task;
    s.prompts = std::move(prompts);
    s.instruction_text = instr_text;
    s.target_text = target_text;
    s.instruction = encode_text(instr_text, vocab);
    s.target = encode_text(target_text, vocab);
    if (s.target.ids.empty()) throw data_error("training sample: empty target");
    std::fill(s.target.loss_mask.begin(), s.target.loss_mask.end(), 1);
    s.instance = instance;
    return s;
}

VisualPrompt random_prompt(const SceneInstance& inst, Rng& rng) {
    if (rng.uniform() < 0.5) {
        Vec3 p;
        for (int a = 0; a < 3; ++a)
            p[a] = inst.box.center[a] + inst.box.size[a] * rng.uniform(-0.5, 0.5);
        return VisualPrompt::of_click(p);
    }
    return VisualPrompt::of_box(inst.box);
}

}  // namespace

std::vector<TrainingSample> assemble_samples(const SceneRecord& scene, const std::string& task,
                                             Rng& rng, const Vocabulary& vocab) {
    std::vector<TrainingSample> out;
    const SceneBounds bounds = scene.bounds();

    if (task == "densecap") {
        for (int i = 0; i < static_cast<int>(scene.instances.size()); ++i) {
            const SceneInstance& inst = scene.instances[i];
            for (int rep = 0; rep < 2; ++rep) {
                VisualPrompt prompt = random_prompt(inst, rng);
                const bool localize = rng.uniform() < 0.5;
                std::string instr = wrap_instruction(instruction_text(
                    localize ? TemplateId::densecap_localize : TemplateId::densecap, {}));
                std::string target =
                    localize ? "the object is localized at " +
                                   render_spatial(spatial_from_box(inst.box, bounds)) + ", " +
                                   inst.captions[0]
                             : inst.captions[0];
                out.push_back(make_sample(scene, task, {prompt}, instr, target, vocab, i));
            }
        }
    } else if (task == "qa") {
        for (const QaPair& qa : scene.qa) {
            VisualPrompt prompt = random_prompt(scene.instances[qa.related.at(0)], rng);
            const bool localize = rng.uniform() < 0.5;
            std::string instr, target;
            if (localize) {
                instr = wrap_instruction(
                    instruction_text(TemplateId::qa_localize, {{"question", qa.question}}));
                std::string objs;
                for (int r : qa.related) {
                    if (!objs.empty()) objs += " ";
                    objs += render_spatial(spatial_from_box(scene.instances[r].box, bounds));
                }
                target = "the related objects are localized at " + objs + ". the answer is: " +
                         qa.answer + ".";
            } else {
                instr = wrap_instruction(
                    instruction_text(TemplateId::qa, {{"question", qa.question}}));
                target = qa.answer + ".";
            }
            out.push_back(
                make_sample(scene, task, {prompt}, instr, target, vocab, qa.related.at(0)));
        }
    } else if (task == "scene_description") {
        out.push_back(make_sample(scene, task, {},
                                  wrap_instruction(instruction_text(
                                      TemplateId::scene_description, {})),
                                  scene_description_text(scene), vocab));
    } else if (task == "dialogue") {
        for (const auto& turns : scene.dialogues) {
            auto samples = decompose_dialogue(scene, turns, vocab);
            out.insert(out.end(), samples.begin(), samples.end());
        }
    } else if (task == "planning") {
        for (const Plan& plan : scene.plans) {
            auto samples = decompose_planning(scene, plan, vocab);
            out.insert(out.end(), samples.begin(), samples.end());
        }
    } else {
        throw usage_error("assemble_samples: unknown task " + task);
    }
    return out;
}

std::vector<TrainingSample> decompose_dialogue(const SceneRecord& scene,
                                               const std::vector<DialogueTurn>& turns,
                                               const Vocabulary& vocab) {
    if (turns.empty() || turns.size() % 2 != 0)
        throw data_error("decompose_dialogue: need alternating human/assistant pairs");
    for (size_t i = 0; i < turns.size(); ++i) {
        const std::string want = i % 2 == 0 ? "human" : "assistant";
        if (turns[i].role != want)
            throw data_error("decompose_dialogue: malformed alternation at turn " +
                             std::to_string(i));
    }
    std::vector<TrainingSample> out;
    const size_t n = turns.size() / 2;
    for (size_t i = 0; i < n; ++i) {
        std::vector<DialogueTurn> prior(turns.begin(), turns.begin() + 2 * i);
        std::string instr = wrap_dialogue(prior, turns[2 * i].text);
        out.push_back(
            make_sample(scene, "dialogue", {}, instr, turns[2 * i + 1].text, vocab));
    }
    return out;
}

std::vector<TrainingSample> decompose_planning(const SceneRecord& scene, const Plan& plan,
                                               const Vocabulary& vocab) {
    if (plan.steps.empty()) throw data_error("decompose_planning: empty step list");
    std::vector<TrainingSample> out;
    const size_t n = plan.steps.size();

    out.push_back(make_sample(
        scene, "planning", {},
        wrap_instruction(instruction_text(TemplateId::planning_full, {{"goal", plan.goal}})),
        enumerate_steps(plan.steps, n, "\n"), vocab));

    for (size_t done = 1; done <= n; ++done) {
        std::string instr = wrap_instruction(instruction_text(
            TemplateId::planning_next,
            {{"goal", plan.goal}, {"done", enumerate_steps(plan.steps, done, " ")}}));
        std::string target = done < n ? plan.steps[done] : "all tasks are done";
        out.push_back(make_sample(scene, "planning", {}, instr, target, vocab));
    }
    return out;
}

// ---- scene json ---------------------------------------------------------------

std::string scene_to_json(const SceneRecord& scene) {
    json j;
    j["id"] = scene.id;
    json points = json::array();
    for (int64_t i = 0; i < scene.points.size(); ++i) {
        json row = json::array();
        for (int a = 0; a < 3; ++a) row.push_back(fmt_real(scene.points.coords[i][a]));
        for (int64_t f = 0; f < scene.points.feature_dim; ++f)
            row.push_back(fmt_real(scene.points.feature_row(i)[f]));
        points.push_back(std::move(row));
    }
    j["points"] = std::move(points);
    json instances = json::array();
    for (const SceneInstance& inst : scene.instances) {
        json ji;
        json box = json::array();
        for (int a = 0; a < 3; ++a) box.push_back(fmt_real(inst.box.center[a]));
        for (int a = 0; a < 3; ++a) box.push_back(fmt_real(inst.box.size[a]));
        ji["box"] = std::move(box);
        ji["category"] = inst.category;
        ji["attributes"] = inst.attributes;
        ji["captions"] = inst.captions;
        instances.push_back(std::move(ji));
    }
    j["instances"] = std::move(instances);
    json qa = json::array();
    for (const QaPair& q : scene.qa)
        qa.push_back({{"question", q.question}, {"answer", q.answer}, {"related", q.related}});
    j["qa"] = std::move(qa);
    json dialogues = json::array();
    for (const auto& turns : scene.dialogues) {
        json jt = json::array();
        for (const DialogueTurn& t : turns) jt.push_back({{"role", t.role}, {"text", t.text}});
        dialogues.push_back(std::move(jt));
    }
    j["dialogues"] = std::move(dialogues);
    json plans = json::array();
    for (const Plan& p : scene.plans) plans.push_back({{"goal", p.goal}, {"steps", p.steps}});
    j["plans"] = std::move(plans);
    return j.dump(1);
}

SceneRecord scene_from_json(const std::string& text) {
    json j;
    try {
        j = json::parse(text);
    } catch (const json::exception& e) {
        throw data_error(std::string("scene: invalid json: ") + e.what());
    }
    SceneRecord scene;
    scene.id = require(j, "id").get<std::string>();
    const json& points = require(j, "points");
    if (!points.is_array() || points.empty()) throw data_error("scene: field 'points' is empty");
    scene.points.feature_dim = static_cast<int64_t>(points[0].size()) - 3;
    if (scene.points.feature_dim < 0) throw data_error("scene: field 'points' rows too short");
    for (const json& row : points) {
        if (static_cast<int64_t>(row.size()) != 3 + scene.points.feature_dim)
            throw data_error("scene: field 'points' has ragged rows");
        Vec3 c{parse_real(row[0], "points"), parse_real(row[1], "points"),
               parse_real(row[2], "points")};
        scene.points.coords.push_back(c);
        for (size_t f = 3; f < row.size(); ++f)
            scene.points.features.push_back(parse_real(row[f], "points"));
    }
    for (const json& ji : require(j, "instances")) {
        SceneInstance inst;
        const json& box = require(ji, "box");
        if (box.size() != 6) throw data_error("scene: field 'box' must have 6 entries");
        for (int a = 0; a < 3; ++a) inst.box.center[a] = parse_real(box[a], "box");
        for (int a = 0; a < 3; ++a) {
            inst.box.size[a] = parse_real(box[3 + a], "box");
            if (inst.box.size[a] <= 0) throw data_error("scene: field 'box' has non-positive size");
        }
        inst.category = require(ji, "category").get<std::string>();
        for (auto& [k, v] : require(ji, "attributes").items())
            inst.attributes[k] = v.get<std::string>();
        for (const json& c : require(ji, "captions")) inst.captions.push_back(c.get<std::string>());
        scene.instances.push_back(std::move(inst));
    }
    for (const json& q : require(j, "qa")) {
        QaPair qa;
        qa.question = require(q, "question").get<std::string>();
        qa.answer = require(q, "answer").get<std::string>();
        for (const json& r : require(q, "related")) {
            int idx = r.get<int>();
            if (idx < 0 || idx >= static_cast<int>(scene.instances.size()))
                throw data_error("scene: field 'related' references a missing instance");
            qa.related.push_back(idx);
        }
        scene.qa.push_back(std::move(qa));
    }
    for (const json& jt : require(j, "dialogues")) {
        std::vector<DialogueTurn> turns;
        for (const json& t : jt)
            turns.push_back({require(t, "role").get<std::string>(),
                             require(t, "text").get<std::string>()});
        scene.dialogues.push_back(std::move(turns));
    }
    for (const json& p : require(j, "plans")) {
        Plan plan;
        plan.goal = require(p, "goal").get<std::string>();
        for (const json& s : require(p, "steps")) plan.steps.push_back(s.get<std::string>());
        scene.plans.push_back(std::move(plan));
    }

    const SceneBounds bounds = scene.bounds();
    for (const SceneInstance& inst : scene.instances)
        for (int a = 0; a < 3; ++a) {
            if (inst.box.center[a] < bounds.lo[a] - 1e-9 ||
                inst.box.center[a] > bounds.hi[a] + 1e-9)
                throw data_error("scene: field 'box' center outside scene bounds");
        }
    return scene;
}

SceneRecord read_scene(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw data_error("read_scene: cannot open " + path);
    std::stringstream ss;
    ss << in.rdbuf();
    return scene_from_json(ss.str());
}

void write_scene(const SceneRecord& scene, const std::string& path) {
    std::ofstream out(path);
    if (!out) throw data_error("write_scene: cannot open " + path);
    out << scene_to_json(scene);
    if (!out) throw data_error("write_scene: write failed for " + path);
}

}  // namespace ll3da
