#pragma once

#include <map>
#include <string>
#include <vector>

#include "ll3da/encoders.hpp"
#include "ll3da/geometry.hpp"
#include "ll3da/textio.hpp"

namespace ll3da {

struct SceneInstance {
    Box3D box;
    std::string category;
    std::map<std::string, std::string> attributes;  // color, size
    std::vector<std::string> captions;
};

struct QaPair {
    std::string question;
    std::string answer;
    std::vector<int> related;  // indices into instances
};

struct Plan {
    std::string goal;
    std::vector<std::string> steps;
};

struct SceneRecord {
    std::string id;
    PointCloud points;  // coords + rgb features (F = 3 on disk)
    std::vector<SceneInstance> instances;
    std::vector<QaPair> qa;
    std::vector<std::vector<DialogueTurn>> dialogues;
    std::vector<Plan> plans;

    SceneBounds bounds() const { return SceneBounds::of_points(points.coords); }
};

struct DatagenConfig {
    int points_per_scene = 1024;
    int min_instances = 3;
    int max_instances = 8;
    double extent_x = 8.0;
    double extent_y = 6.0;
    int max_place_attempts = 200;
    int qa_per_scene = 3;
};

/// Deterministic synthetic scene: non-overlapping furniture boxes on a
/// floor, surface-sampled colored points, and grammar-generated captions,
/// QA pairs, dialogues and plans.
SceneRecord generate_scene(uint64_t seed, const DatagenConfig& cfg);

/// rgb features extended with height (z minus scene min z): F = 4.
PointCloud with_height_feature(const PointCloud& pc);

/// Deterministic scene-level description derived from the instance list.
std::string scene_description_text(const SceneRecord& scene);

/// Every text line the scene can produce (captions, QA, targets with
/// rendered spatial tokens, dialogue turns, plan lines, instruction bodies);
/// feeds vocabulary building and LM pre-training.
std::vector<std::string> scene_corpus_lines(const SceneRecord& scene);

struct TrainingSample {
    std::string scene_id;
    std::string task;
    std::vector<VisualPrompt> prompts;
    std::string instruction_text;  // includes role identifiers
    std::string target_text;
    TokenSequence instruction;  // loss mask all false
    TokenSequence target;       // loss mask all true
    int instance = -1;          // primary instance for densecap, else -1
};

/// task is one of: densecap, qa, scene_description, dialogue, planning.
std::vector<TrainingSample> assemble_samples(const SceneRecord& scene, const std::string& task,
                                             Rng& rng, const Vocabulary& vocab);

std::vector<TrainingSample> decompose_dialogue(const SceneRecord& scene,
                                               const std::vector<DialogueTurn>& turns,
                                               const Vocabulary& vocab);

std::vector<TrainingSample> decompose_planning(const SceneRecord& scene, const Plan& plan,
                                               const Vocabulary& vocab);

SceneRecord read_scene(const std::string& path);
void write_scene(const SceneRecord& scene, const std::string& path);
std::string scene_to_json(const SceneRecord& scene);
SceneRecord scene_from_json(const std::string& text);

}  // namespace ll3da
