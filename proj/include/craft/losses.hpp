// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <string>
#include <vector>

#include "craft/model.hpp"
#include "craft/synth.hpp"
#include "craft/tensor.hpp"
#include "craft/text.hpp"
#include "craft/util.hpp"

namespace craft {

// "An image of a {domain}, specifically a {label}". Empty inputs are errors.
std::string augment_caption(const std::string& domain, const std::string& label);

struct Declarative {
    std::string text;
    bool fallback = false;  // true when no grammar pattern matched
};

// Rule-based rewrite of a grammar question/answer pair into a declarative
// sentence; already-declarative grammar sentences pass through unchanged.
// Unrecognized input falls back to "Q: {q} A: {a}" with the flag set.
Declarative qa_to_declarative(const std::string& question, const std::string& answer);

// The caption set T_i for one sample: ground-truth declarative plus the
// templated caption.
struct TextSet {
    std::vector<std::string> texts;
};

TextSet caption_set(const Sample& sample);

// Uniform draw of one sentence per training step.
const std::string& sample_caption(const TextSet& set, Rng& rng);

// Mean-pooled frozen LM token embeddings; unknown words hit the UNK row.
std::vector<double> encode_text(const std::string& sentence, const SurrogateLM& lm,
                                const Vocabulary& vocab);

struct ContrastiveBatch {
    std::vector<Tensor> image_embeds;              // v_i on the tape, size d_lm each
    std::vector<std::vector<double>> text_embeds;  // t_j, frozen
    std::vector<std::string> labels;               // y_i
    Tensor temperature;                            // tau > 0, on the tape
};

// Mean over anchors of -log sigmoid(s_ii) - sum_{j: y_j != y_i} log(1 - sigmoid(s_ij))
// with s_ij = tau * cos(v_i, t_j). Gradients reach v_i and tau, never t_j.
Tensor sigmoid_contrastive(Tape& tape, const ContrastiveBatch& batch);

// SAL carries an implicit coefficient of 1.
struct LossWeights {
    double con = 1.0;
    double commit = 0.1;
};

// lambda_con * con + lambda_commit * commit + sal.
Tensor composite_loss(const Tensor& sal, const Tensor& con, const Tensor& commit,
                      const LossWeights& weights);

}  // namespace craft
