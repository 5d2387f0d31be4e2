// SPDX-License-Identifier: Apache-2.0
#include "craft/synth.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <sstream>

#include <json.hpp>

#include "craft/error.hpp"
#include "craft/util.hpp"

namespace craft {

namespace {

const std::vector<std::string> kClasses = {"alder", "birch", "cedar", "elm",  "fir",
                                           "hazel", "maple", "oak",  "pine", "rowan"};
const std::vector<std::string> kColors = {"blue", "green", "orange", "purple", "red", "yellow"};
const std::vector<std::string> kTemplateWords = {
    "an", "image", "of", "a", "specifically", "the", "this", "is",
    "what", "color", "which", "kind", "shown", "among", "leaf"};

}  // namespace

const std::vector<std::string>& grammar_classes() {
    return kClasses;
}

const std::vector<std::string>& grammar_colors() {
    return kColors;
}

Vocabulary grammar_vocabulary() {
    std::vector<std::string> words;
    words.insert(words.end(), kClasses.begin(), kClasses.end());
    words.insert(words.end(), kColors.begin(), kColors.end());
    words.insert(words.end(), kTemplateWords.begin(), kTemplateWords.end());
    return Vocabulary(words);
}

PrototypeDict PrototypeDict::make(const std::string& variant, size_t dim) {
    PrototypeDict dict;
    dict.dim = dim;
    Rng rng = Rng(fnv1a64("prototype-dict:" + variant)).substream("protos");
    auto draw = [&](Rng& r, double sd) {
        std::vector<double> v(dim);
        for (double& x : v) x = r.normal(0.0, sd);
        return v;
    };
    Rng cls_rng = rng.substream("classes");
    for (size_t i = 0; i < kClasses.size(); ++i) dict.class_protos.push_back(draw(cls_rng, 1.0));
    Rng col_rng = rng.substream("colors");
    for (size_t i = 0; i < kColors.size(); ++i) dict.color_offsets.push_back(draw(col_rng, 0.6));
    Rng bg_rng = rng.substream("backgrounds");
    for (int i = 0; i < 2; ++i) dict.backgrounds.push_back(draw(bg_rng, 1.0));
    return dict;
}

std::string SceneSpec::domain_word() const {
    auto pos = domain.find('/');
    return pos == std::string::npos ? domain : domain.substr(0, pos);
}

std::string SceneSpec::variant() const {
    auto pos = domain.find('/');
    return pos == std::string::npos ? std::string("general") : domain.substr(pos + 1);
}

FeatureGrid render_features(const SceneSpec& scene, const PrototypeDict& dict, uint64_t seed) {
    const size_t w = scene.width, h = scene.height, d = dict.dim;
    if (scene.background_id >= dict.backgrounds.size()) {
        throw ArgumentError("render_features: background prototype id out of range");
    }
    size_t object_area = 0;
    for (const auto& obj : scene.objects) {
        if (obj.row + obj.height > h || obj.col + obj.width > w) {
            throw ArgumentError("render_features: object footprint exceeds grid");
        }
        if (obj.cls >= dict.class_protos.size() || obj.color >= dict.color_offsets.size()) {
            throw ArgumentError("render_features: object class/color out of range");
        }
        object_area += size_t(obj.height) * obj.width;
    }
    if (object_area >= w * h) {
        throw ArgumentError("render_features: no background patch left");
    }

    // Last object wins where footprints overlap.
    std::vector<int> owner(w * h, -1);
    for (size_t oi = 0; oi < scene.objects.size(); ++oi) {
        const auto& obj = scene.objects[oi];
        for (uint32_t r = obj.row; r < obj.row + obj.height; ++r) {
            for (uint32_t c = obj.col; c < obj.col + obj.width; ++c) {
                owner[r * w + c] = int(oi);
            }
        }
    }

    FeatureGrid g(w, h, d);
    Rng rng = Rng(seed).substream("render");
    const auto& bg = dict.backgrounds[scene.background_id];
    for (size_t p = 0; p < w * h; ++p) {
        double* out = g.patch(p);
        if (owner[p] < 0) {
            for (size_t j = 0; j < d; ++j) out[j] = bg[j] + scene.noise * rng.normal();
        } else {
            const auto& obj = scene.objects[size_t(owner[p])];
            const auto& proto = dict.class_protos[obj.cls];
            const auto& off = dict.color_offsets[obj.color];
            for (size_t j = 0; j < d; ++j) {
                out[j] = proto[j] + off[j] + scene.noise * rng.normal();
            }
        }
    }
    // Round to binary32 so memory and JSONL agree exactly.
    for (double& x : g.data) x = double(float(x));
    return g;
}

std::string task_kind_name(TaskKind k) {
    return k == TaskKind::McqClassification ? "mcq" : "vqa";
}

TaskKind task_kind_from_name(const std::string& name) {
    if (name == "mcq") return TaskKind::McqClassification;
    if (name == "vqa") return TaskKind::AttributeVqa;
    throw ArgumentError("unknown task kind: " + name + " (expected mcq|vqa)");
}

namespace {

uint32_t class_index(const std::string& word) {
    for (size_t i = 0; i < kClasses.size(); ++i) {
        if (kClasses[i] == word) return uint32_t(i);
    }
    throw ArgumentError("unknown grammar class: " + word);
}

Sample make_sample(const DatasetSpec& spec, const PrototypeDict& dict, const std::string& label,
                   const std::string& split, Rng& rng, uint64_t render_seed) {
    Sample s;
    s.label = label;
    s.domain = spec.domain_tag();
    s.split = split;

    SceneObject obj;
    obj.cls = class_index(label);
    obj.color = uint32_t(rng.randint(kColors.size()));
    uint32_t span = spec.min_footprint +
                    uint32_t(rng.randint(spec.max_footprint - spec.min_footprint + 1));
    obj.height = span;
    obj.width = span;
    obj.row = uint32_t(rng.randint(spec.grid_height - span + 1));
    obj.col = uint32_t(rng.randint(spec.grid_width - span + 1));

    s.scene.width = spec.grid_width;
    s.scene.height = spec.grid_height;
    s.scene.background_id = 0;
    s.scene.noise = spec.noise;
    s.scene.domain = spec.domain_tag();
    s.scene.objects = {obj};
    s.features = render_features(s.scene, dict, render_seed);

    if (spec.task == TaskKind::McqClassification) {
        // Exactly four options: the true label plus three distinct distractors
        // drawn from the full class set.
        std::vector<std::string> options = {label};
        std::vector<std::string> pool = spec.classes;
        rng.shuffle(pool);
        for (const auto& c : pool) {
            if (options.size() == 4) break;
            if (c != label) options.push_back(c);
        }
        if (options.size() != 4) throw ArgumentError("dataset: not enough classes for 4 options");
        rng.shuffle(options);
        s.prompt = "which kind of " + spec.domain_word + " is shown among " + options[0] + " " +
                   options[1] + " " + options[2] + " " + options[3];
        s.target = label;
    } else {
        s.prompt = "what color is the " + label;
        s.target = kColors[obj.color];
    }
    return s;
}

}  // namespace

Dataset generate_dataset(const DatasetSpec& spec_in) {
    DatasetSpec spec = spec_in;
    if (spec.classes.empty()) spec.classes = kClasses;
    if (spec.classes.size() < 5) {
        throw ArgumentError("dataset: class count must be >= 5 so the 20% holdout leaves 4-option MCQs");
    }
    if (spec.test_size < spec.classes.size()) {
        throw ArgumentError("dataset: test_size must cover every class at least once");
    }
    if (spec.max_footprint >= std::min(spec.grid_width, spec.grid_height)) {
        throw ArgumentError("dataset: footprint too large for grid");
    }

    PrototypeDict dict = PrototypeDict::make(spec.variant, spec.feature_dim);
    Rng root(spec.seed);

    Dataset ds;
    ds.spec = spec;

    // Hold out round(fraction * C) classes from train targets.
    size_t holdout = size_t(std::llround(spec.holdout_fraction * double(spec.classes.size())));
    std::vector<std::string> shuffled = spec.classes;
    Rng hold_rng = root.substream("holdout");
    hold_rng.shuffle(shuffled);
    ds.held_out.assign(shuffled.begin(), shuffled.begin() + ptrdiff_t(holdout));
    std::vector<std::string> kept(shuffled.begin() + ptrdiff_t(holdout), shuffled.end());
    std::sort(ds.held_out.begin(), ds.held_out.end());
    std::sort(kept.begin(), kept.end());

    Rng train_rng = root.substream("train");
    for (size_t i = 0; i < spec.train_size; ++i) {
        const std::string& label = kept[train_rng.randint(kept.size())];
        uint64_t rs = root.substream("render-train-" + std::to_string(i)).next_u64();
        ds.train.push_back(make_sample(spec, dict, label, "train", train_rng, rs));
    }

    // Round-robin over all classes guarantees full coverage, then shuffle.
    Rng test_rng = root.substream("test");
    std::vector<std::string> test_labels(spec.test_size);
    for (size_t i = 0; i < spec.test_size; ++i) {
        test_labels[i] = spec.classes[i % spec.classes.size()];
    }
    test_rng.shuffle(test_labels);
    for (size_t i = 0; i < spec.test_size; ++i) {
        uint64_t rs = root.substream("render-test-" + std::to_string(i)).next_u64();
        ds.test.push_back(make_sample(spec, dict, test_labels[i], "test", test_rng, rs));
    }
    return ds;
}

namespace {

using nlohmann::json;

json scene_to_json(const SceneSpec& s) {
    json objs = json::array();
    for (const auto& o : s.objects) {
        objs.push_back({{"cls", o.cls},
                        {"color", o.color},
                        {"row", o.row},
                        {"col", o.col},
                        {"height", o.height},
                        {"width", o.width}});
    }
    return {{"width", s.width},     {"height", s.height}, {"background_id", s.background_id},
            {"noise", s.noise},     {"domain", s.domain}, {"objects", objs}};
}

SceneSpec scene_from_json(const json& j) {
    SceneSpec s;
    s.width = j.at("width").get<uint32_t>();
    s.height = j.at("height").get<uint32_t>();
    s.background_id = j.at("background_id").get<uint32_t>();
    s.noise = j.at("noise").get<double>();
    s.domain = j.at("domain").get<std::string>();
    for (const auto& oj : j.at("objects")) {
        SceneObject o;
        o.cls = oj.at("cls").get<uint32_t>();
        o.color = oj.at("color").get<uint32_t>();
        o.row = oj.at("row").get<uint32_t>();
        o.col = oj.at("col").get<uint32_t>();
        o.height = oj.at("height").get<uint32_t>();
        o.width = oj.at("width").get<uint32_t>();
        s.objects.push_back(o);
    }
    return s;
}

}  // namespace

void save_dataset_jsonl(const Dataset& ds, const std::string& path) {
    std::ostringstream out;
    auto emit = [&](const Sample& s) {
        std::vector<float> f32(s.features.data.begin(), s.features.data.end());
        json j = {{"scene", scene_to_json(s.scene)},
                  {"features", floats_to_hex(f32)},
                  {"prompt", s.prompt},
                  {"target", s.target},
                  {"label", s.label},
                  {"domain", s.domain},
                  {"split", s.split}};
        out << j.dump() << "\n";
    };
    for (const auto& s : ds.train) emit(s);
    for (const auto& s : ds.test) emit(s);
    write_file_atomic(path, out.str());
}

Dataset load_dataset_jsonl(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open dataset: " + path);
    Dataset ds;
    std::string line;
    size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.empty()) continue;
        json j;
        try {
            j = json::parse(line);
        } catch (const json::exception& e) {
            throw FormatError("dataset " + path + " line " + std::to_string(line_no) + ": " +
                              e.what());
        }
        Sample s;
        s.scene = scene_from_json(j.at("scene"));
        auto f32 = hex_to_floats(j.at("features").get<std::string>());
        s.features = FeatureGrid(s.scene.width, s.scene.height, f32.size() / (size_t(s.scene.width) * s.scene.height));
        if (s.features.data.size() != f32.size()) {
            throw FormatError("dataset " + path + ": feature payload size mismatch");
        }
        for (size_t i = 0; i < f32.size(); ++i) s.features.data[i] = double(f32[i]);
        s.prompt = j.at("prompt").get<std::string>();
        s.target = j.at("target").get<std::string>();
        s.label = j.at("label").get<std::string>();
        s.domain = j.at("domain").get<std::string>();
        s.split = j.at("split").get<std::string>();
        if (s.split == "train") {
            ds.train.push_back(std::move(s));
        } else if (s.split == "test") {
            ds.test.push_back(std::move(s));
        } else {
            throw FormatError("dataset " + path + ": unknown split '" + s.split + "'");
        }
    }
    if (ds.train.empty() && ds.test.empty()) {
        throw FormatError("dataset " + path + ": no samples");
    }
    const Sample& ref = ds.train.empty() ? ds.test.front() : ds.train.front();
    ds.spec.grid_width = ref.scene.width;
    ds.spec.grid_height = ref.scene.height;
    ds.spec.feature_dim = ref.features.dim;
    ds.spec.noise = ref.scene.noise;
    ds.spec.domain_word = ref.scene.domain_word();
    ds.spec.variant = ref.scene.variant();
    ds.spec.task = ref.prompt.rfind("what color", 0) == 0 ? TaskKind::AttributeVqa
                                                          : TaskKind::McqClassification;
    return ds;
}

}  // namespace craft
