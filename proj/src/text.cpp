// SPDX-License-Identifier: Apache-2.0
#include "craft/text.hpp"

#include <algorithm>
#include <cctype>

#include "craft/error.hpp"

namespace craft {

std::vector<std::string> tokenize_words(std::string_view text) {
    std::vector<std::string> out;
    std::string cur;
    for (char ch : text) {
        unsigned char c = static_cast<unsigned char>(ch);
        if (std::isalnum(c)) {
            cur.push_back(static_cast<char>(std::tolower(c)));
        } else {
            if (!cur.empty()) {
                out.push_back(cur);
                cur.clear();
            }
        }
    }
    if (!cur.empty()) out.push_back(cur);
    return out;
}

Vocabulary::Vocabulary(const std::vector<std::string>& words) {
    words_ = {"<unk>", "<end>"};
    std::vector<std::string> sorted;
    for (const auto& w : words) {
        for (const auto& tok : tokenize_words(w)) sorted.push_back(tok);
    }
    std::sort(sorted.begin(), sorted.end());
    sorted.erase(std::unique(sorted.begin(), sorted.end()), sorted.end());
    words_.insert(words_.end(), sorted.begin(), sorted.end());
    for (size_t i = 0; i < words_.size(); ++i) {
        index_.emplace(words_[i], static_cast<int32_t>(i));
    }
}

int32_t Vocabulary::id_of(std::string_view word) const {
    auto it = index_.find(std::string(word));
    return it == index_.end() ? kUnk : it->second;
}

const std::string& Vocabulary::word(int32_t id) const {
    if (id < 0 || static_cast<size_t>(id) >= words_.size()) {
        throw ArgumentError("vocabulary: id out of range");
    }
    return words_[static_cast<size_t>(id)];
}

std::vector<int32_t> Vocabulary::encode(std::string_view text) const {
    std::vector<int32_t> ids;
    for (const auto& w : tokenize_words(text)) ids.push_back(id_of(w));
    return ids;
}

std::vector<int32_t> Vocabulary::encode_target(std::string_view text) const {
    std::vector<int32_t> ids = encode(text);
    ids.push_back(kEnd);
    return ids;
}

std::string Vocabulary::decode(const std::vector<int32_t>& ids) const {
    std::string out;
    for (int32_t id : ids) {
        if (id == kEnd) break;
        if (id == kUnk) continue;
        if (!out.empty()) out.push_back(' ');
        out += word(id);
    }
    return out;
}

}  // namespace craft
