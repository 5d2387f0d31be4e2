// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "craft/codebook.hpp"
#include "craft/model.hpp"
#include "craft/pruner.hpp"
#include "craft/synth.hpp"
#include "craft/text.hpp"
#include "craft/trainer.hpp"

namespace craft {

// Case- and whitespace-normalized string equality.
bool exact_match(const std::string& prediction, const std::string& gold);

// Analytic transformer forward cost: multiply-accumulates x 2, embedding
// lookups excluded. kept counts the visual tokens after pruning.
double flops_estimate(size_t kept_tokens, size_t text_len, const LmConfig& lm, size_t visual_dim);

struct EvalOptions {
    double keep_ratio = 1.0;
    size_t max_tokens = 5;
    bool bypass_pruner = false;  // skip prune() entirely (identity check path)
    // Accept a codebook derived from the backbone's codebook: the value is the
    // parent codebook CRC vouched for by the caller (codebook-size ablation).
    uint32_t codebook_parent_crc = 0;
};

struct EvalResult {
    double accuracy = 0.0;
    size_t n = 0;
    double mean_flops = 0.0;
    double mean_kept = 0.0;
    std::vector<std::string> predictions;
    std::vector<bool> correct;
};

// encode -> rq_encode -> prune -> generate (max 5 tokens) -> exact match.
EvalResult evaluate(PatchEncoder& encoder, Backbone& backbone, const Codebook& cb,
                    const std::vector<Sample>& test_set, const Vocabulary& vocab,
                    const TokenStats& stats, const EvalOptions& opts = {});

// Frequency stats for a deployed encoder over a reference corpus.
TokenStats stats_for_encoder(PatchEncoder& encoder, const Codebook& cb,
                             const std::vector<Sample>& corpus, const std::string& tag);

struct EvalCell {
    std::string encoder;   // run label
    std::string backbone;
    double keep_ratio = 1.0;
    uint64_t seed = 0;
    size_t n = 0;
    double accuracy = 0.0;
    double mean_flops = 0.0;
    double mean_kept = 0.0;
};

struct EvalReport {
    std::vector<EvalCell> cells;
    std::map<std::string, std::string> metadata;

    void add(const EvalCell& cell) { cells.push_back(cell); }
    // Mean accuracy over cells matching (encoder, backbone, keep_ratio).
    double mean_accuracy(const std::string& encoder, const std::string& backbone,
                         double keep_ratio) const;
    std::string to_json() const;  // deterministic bytes
    std::string to_csv() const;   // one row per cell
};

// evaluate() at each ratio; cells labeled with the encoder/backbone names.
EvalReport keep_ratio_sweep(PatchEncoder& encoder, const std::string& encoder_label,
                            Backbone& backbone, const Codebook& cb,
                            const std::vector<Sample>& stats_corpus,
                            const std::vector<Sample>& test_set, const Vocabulary& vocab,
                            const std::vector<double>& ratios, const EvalOptions& base = {});

// Full cross product, no re-alignment between cells; all pairs must share the
// codebook CRC. Stats are estimated per encoder over stats_corpus.
EvalReport transfer_matrix(const std::vector<std::pair<std::string, PatchEncoder*>>& encoders,
                           const std::vector<Backbone*>& backbones, const Codebook& cb,
                           const std::vector<Sample>& stats_corpus,
                           const std::vector<Sample>& test_set, const Vocabulary& vocab,
                           const EvalOptions& base = {});

struct AblationConfig {
    std::vector<double> fractions = {0.1, 0.25, 0.5, 1.0};
    std::vector<uint64_t> seeds = {1, 2, 3};
    uint64_t subsample_seed = 7;
    TrainConfig train;
};

// Table-6-style codebook capacity study: per fraction, subsample the codebook,
// re-run encoder adaptation from the given initialization, evaluate. The
// backbone keeps its original codebook tag; the derived codebooks are accepted
// through the parent-CRC path.
EvalReport codebook_size_ablation(const PatchEncoder& init_encoder, Backbone& backbone,
                                  const Codebook& full_cb, const Dataset& dataset,
                                  const Vocabulary& vocab, const AblationConfig& cfg);

}  // namespace craft
