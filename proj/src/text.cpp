// SPDX-License-Identifier: Apache-2.0
#include "debias/text.hpp"

#include <cctype>

namespace debias {

bool is_word_char(char c) {
    const unsigned char u = static_cast<unsigned char>(c);
    return u >= 0x80 || std::isalnum(u) != 0;
}

std::string lower_ascii(std::string_view s) {
    std::string out(s);
    for (char& c : out) {
        const unsigned char u = static_cast<unsigned char>(c);
        if (u < 0x80) c = static_cast<char>(std::tolower(u));
    }
    return out;
}

std::vector<TokenSpan> token_spans(std::string_view text) {
    std::vector<TokenSpan> spans;
    size_t i = 0;
    const size_t n = text.size();
    while (i < n) {
        while (i < n && !is_word_char(text[i])) ++i;
        if (i >= n) break;
        const size_t begin = i;
        while (i < n && is_word_char(text[i])) ++i;
        spans.push_back({begin, i});
    }
    return spans;
}

std::vector<std::string> tokenize(std::string_view text) {
    std::vector<std::string> tokens;
    for (const TokenSpan& s : token_spans(text)) {
        tokens.push_back(lower_ascii(text.substr(s.begin, s.end - s.begin)));
    }
    return tokens;
}

std::vector<int> find_token_subsequence(const std::vector<std::string>& tokens,
                                        const std::vector<std::string>& needle) {
    std::vector<int> starts;
    if (needle.empty() || tokens.size() < needle.size()) return starts;
    size_t i = 0;
    while (i + needle.size() <= tokens.size()) {
        bool match = true;
        for (size_t k = 0; k < needle.size(); ++k) {
            if (tokens[i + k] != needle[k]) {
                match = false;
                break;
            }
        }
        if (match) {
            starts.push_back(static_cast<int>(i));
            i += needle.size();
        } else {
            ++i;
        }
    }
    return starts;
}

bool contains_word(std::string_view text, std::string_view word) {
    const std::vector<std::string> needle = tokenize(word);
    if (needle.empty()) return false;
    return !find_token_subsequence(tokenize(text), needle).empty();
}

std::string match_leading_case(std::string_view original, std::string replacement) {
    if (original.empty() || replacement.empty()) return replacement;
    const unsigned char o = static_cast<unsigned char>(original.front());
    unsigned char& r = reinterpret_cast<unsigned char&>(replacement.front());
    if (o < 0x80 && r < 0x80) {
        r = std::isupper(o) ? static_cast<unsigned char>(std::toupper(r))
                            : static_cast<unsigned char>(std::tolower(r));
    }
    return replacement;
}

}  // namespace debias
