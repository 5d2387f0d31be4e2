// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "craft/codebook.hpp"
#include "craft/text.hpp"

namespace craft {

// Fixed word inventories of the synthetic task grammar.
const std::vector<std::string>& grammar_classes();  // object class names
const std::vector<std::string>& grammar_colors();   // attribute color names
// Every word any grammar sentence can contain (prompts, targets, captions).
Vocabulary grammar_vocabulary();

// Deterministic feature prototypes for one domain variant. The variant string
// alone fixes the dictionary, so "general" and "specialist" are global
// constants shared by every dataset, codebook and backbone built on them.
struct PrototypeDict {
    size_t dim = 0;
    std::vector<std::vector<double>> class_protos;   // by grammar class index
    std::vector<std::vector<double>> color_offsets;  // by grammar color index
    std::vector<std::vector<double>> backgrounds;

    static PrototypeDict make(const std::string& variant, size_t dim);
};

struct SceneObject {
    uint32_t cls = 0;    // grammar class index
    uint32_t color = 0;  // grammar color index
    uint32_t row = 0;
    uint32_t col = 0;
    uint32_t height = 1;
    uint32_t width = 1;
};

struct SceneSpec {
    uint32_t width = 8;
    uint32_t height = 8;
    uint32_t background_id = 0;
    std::vector<SceneObject> objects;
    double noise = 0.05;
    std::string domain;  // "<word>/<variant>", e.g. "leaf/general"

    std::string domain_word() const;
    std::string variant() const;
};

// Background patches = background prototype + Gaussian noise; object patches
// = class prototype + color offset + noise. Values are rounded to binary32
// so in-memory grids match their JSONL serialization exactly.
FeatureGrid render_features(const SceneSpec& scene, const PrototypeDict& dict, uint64_t seed);

struct Sample {
    SceneSpec scene;
    FeatureGrid features;
    std::string prompt;
    std::string target;
    std::string label;   // class word
    std::string domain;  // same tag as scene.domain
    std::string split;   // "train" | "test"
};

enum class TaskKind { McqClassification, AttributeVqa };

std::string task_kind_name(TaskKind k);
TaskKind task_kind_from_name(const std::string& name);

struct DatasetSpec {
    TaskKind task = TaskKind::McqClassification;
    std::vector<std::string> classes;  // defaults to grammar_classes()
    size_t train_size = 300;
    size_t test_size = 150;
    double holdout_fraction = 0.20;
    uint64_t seed = 1;
    std::string domain_word = "leaf";
    std::string variant = "general";
    uint32_t grid_width = 8;
    uint32_t grid_height = 8;
    size_t feature_dim = 12;
    double noise = 0.05;
    uint32_t min_footprint = 2;
    uint32_t max_footprint = 3;

    std::string domain_tag() const { return domain_word + "/" + variant; }
};

struct Dataset {
    DatasetSpec spec;
    std::vector<Sample> train;
    std::vector<Sample> test;
    // Class labels removed from the train split (still present in test).
    std::vector<std::string> held_out;
};

// Deterministic generation: train targets drawn uniformly from the kept
// classes, test targets cover the full class set, MCQ distractors drawn from
// the full class set.
Dataset generate_dataset(const DatasetSpec& spec);

// JSONL with one object per line: {scene, features, prompt, target, label,
// domain, split}; features inline as little-endian binary32 hex.
void save_dataset_jsonl(const Dataset& ds, const std::string& path);
Dataset load_dataset_jsonl(const std::string& path);

}  // namespace craft
