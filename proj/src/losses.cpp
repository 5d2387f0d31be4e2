// SPDX-License-Identifier: Apache-2.0
#include "craft/losses.hpp"

#include <algorithm>
#include <cmath>

#include "craft/error.hpp"

namespace craft {

std::string augment_caption(const std::string& domain, const std::string& label) {
    if (domain.empty() || label.empty()) {
        throw ArgumentError("augment_caption: domain and label must be nonempty");
    }
    return "An image of a " + domain + ", specifically a " + label;
}

namespace {

// Lowercase, punctuation stripped, single spaces.
std::string normal_form(const std::string& s) {
    std::string joined;
    for (const auto& w : tokenize_words(s)) {
        if (!joined.empty()) joined.push_back(' ');
        joined += w;
    }
    return joined;
}

}  // namespace

Declarative qa_to_declarative(const std::string& question, const std::string& answer) {
    std::string q = normal_form(question);
    std::string a = normal_form(answer);

    // Already-declarative grammar sentences pass through unchanged.
    if (q.rfind("the ", 0) == 0 || q.rfind("this ", 0) == 0 || q.rfind("an image of", 0) == 0) {
        return {question, false};
    }

    const std::string color_prefix = "what color is the ";
    if (q.rfind(color_prefix, 0) == 0 && q.size() > color_prefix.size() && !a.empty()) {
        std::string subject = q.substr(color_prefix.size());
        return {"The " + subject + " is " + a, false};
    }

    const std::string which_prefix = "which kind of ";
    const std::string shown_marker = " is shown among ";
    if (q.rfind(which_prefix, 0) == 0 && !a.empty()) {
        auto pos = q.find(shown_marker);
        if (pos != std::string::npos && pos > which_prefix.size()) {
            std::string domain = q.substr(which_prefix.size(), pos - which_prefix.size());
            return {"This " + domain + " is a " + a, false};
        }
    }

    return {"Q: " + question + " A: " + answer, true};
}

TextSet caption_set(const Sample& sample) {
    TextSet set;
    set.texts.push_back(qa_to_declarative(sample.prompt, sample.target).text);
    set.texts.push_back(augment_caption(sample.scene.domain_word(), sample.label));
    return set;
}

const std::string& sample_caption(const TextSet& set, Rng& rng) {
    if (set.texts.empty()) throw ArgumentError("sample_caption: empty caption set");
    return set.texts[rng.randint(set.texts.size())];
}

std::vector<double> encode_text(const std::string& sentence, const SurrogateLM& lm,
                                const Vocabulary& vocab) {
    std::vector<int32_t> ids = vocab.encode(sentence);
    if (ids.empty()) throw ArgumentError("encode_text: sentence has no tokens");
    // Canonical summation order keeps mean pooling exactly permutation-invariant.
    std::sort(ids.begin(), ids.end());
    const Parameter& table = lm.token_embedding();
    size_t d = lm.config().width;
    std::vector<double> out(d, 0.0);
    for (int32_t id : ids) {
        const double* row = table.value.data() + size_t(id) * d;
        for (size_t j = 0; j < d; ++j) out[j] += row[j];
    }
    for (double& v : out) v /= double(ids.size());
    return out;
}

Tensor sigmoid_contrastive(Tape& tape, const ContrastiveBatch& batch) {
    size_t n = batch.image_embeds.size();
    if (n == 0 || batch.text_embeds.size() != n || batch.labels.size() != n) {
        throw ArgumentError("sigmoid_contrastive: batch fields must be nonempty and same-sized");
    }
    if (!batch.temperature.valid()) {
        throw ArgumentError("sigmoid_contrastive: missing temperature");
    }

    Tensor total;
    for (size_t i = 0; i < n; ++i) {
        // Positive pair (i, i).
        Tensor t_i = tape.constant({batch.text_embeds[i].size()}, batch.text_embeds[i]);
        Tensor s_ii = mul(batch.temperature, cosine(batch.image_embeds[i], t_i));
        Tensor term = scale(log_sigmoid(s_ii), -1.0);
        // Negatives: other anchors' texts with a different label.
        for (size_t j = 0; j < n; ++j) {
            if (batch.labels[j] == batch.labels[i]) continue;
            Tensor t_j = tape.constant({batch.text_embeds[j].size()}, batch.text_embeds[j]);
            Tensor s_ij = mul(batch.temperature, cosine(batch.image_embeds[i], t_j));
            term = sub(term, log1m_sigmoid(s_ij));
        }
        total = total.valid() ? add(total, term) : term;
    }
    return scale(total, 1.0 / double(n));
}

Tensor composite_loss(const Tensor& sal, const Tensor& con, const Tensor& commit,
                      const LossWeights& weights) {
    if (!(weights.con >= 0.0) || !(weights.commit >= 0.0) || !std::isfinite(weights.con) ||
        !std::isfinite(weights.commit)) {
        throw ArgumentError("composite_loss: weights must be finite and nonnegative");
    }
    return add(sal, add(scale(con, weights.con), scale(commit, weights.commit)));
}

}  // namespace craft
