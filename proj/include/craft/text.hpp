// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

namespace craft {

// Lowercase, strip punctuation, split on whitespace.
std::vector<std::string> tokenize_words(std::string_view text);

// Word-level vocabulary with two reserved specials. Word ids are stable:
// specials first, then the construction word list deduplicated and sorted.
class Vocabulary {
  public:
    static constexpr int32_t kUnk = 0;
    static constexpr int32_t kEnd = 1;

    Vocabulary() = default;
    explicit Vocabulary(const std::vector<std::string>& words);

    size_t size() const { return words_.size(); }
    int32_t id_of(std::string_view word) const;  // kUnk when unknown
    const std::string& word(int32_t id) const;

    // Unknown words map to kUnk.
    std::vector<int32_t> encode(std::string_view text) const;
    // encode() plus a trailing end marker.
    std::vector<int32_t> encode_target(std::string_view text) const;
    // Joins words with spaces; stops at the end marker, skips unknowns.
    std::string decode(const std::vector<int32_t>& ids) const;

  private:
    std::vector<std::string> words_;
    std::unordered_map<std::string, int32_t> index_;
};

}  // namespace craft
