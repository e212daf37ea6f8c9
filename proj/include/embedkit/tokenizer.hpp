#pragma once

#include <cctype>
#include <cstdint>
#include <string>
#include <vector>

#include "embedkit/error.hpp"
#include "embedkit/io_util.hpp"

namespace embedkit {

// Lowercased maximal runs of token characters. ASCII alphanumerics are token
// characters; so is any byte >= 0x80, which keeps UTF-8 words intact.
inline std::vector<std::string> split_terms(const std::string& text) {
    std::vector<std::string> terms;
    std::string cur;
    for (unsigned char c : text) {
        bool token_char = std::isalnum(c) || c >= 0x80;
        if (token_char) {
            cur.push_back(static_cast<char>(std::tolower(c)));
        } else if (!cur.empty()) {
            terms.push_back(std::move(cur));
            cur.clear();
        }
    }
    if (!cur.empty()) terms.push_back(std::move(cur));
    return terms;
}

// Hashing-trick token ids: 64-bit FNV-1a of the term, mod bucket count.
inline std::vector<std::int64_t> hash_terms(const std::vector<std::string>& terms,
                                            std::int64_t vocab_buckets) {
    std::vector<std::int64_t> ids;
    ids.reserve(terms.size());
    for (const auto& t : terms)
        ids.push_back(static_cast<std::int64_t>(fnv1a64(t) % static_cast<std::uint64_t>(vocab_buckets)));
    return ids;
}

inline std::size_t term_count(const std::string& text) { return split_terms(text).size(); }

}  // namespace embedkit
