// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <string>
#include <string_view>
#include <vector>

namespace debias {

// Word matching everywhere in this project uses one tokenization rule:
// lowercase, split on whitespace and punctuation. A "word character" is an
// ASCII alphanumeric or any byte >= 0x80 (so UTF-8 sequences stay intact).

bool is_word_char(char c);

std::string lower_ascii(std::string_view s);

// Lowercased word tokens in order of appearance.
std::vector<std::string> tokenize(std::string_view text);

// Byte ranges [begin, end) of each token in the original text.
struct TokenSpan {
    size_t begin = 0;
    size_t end = 0;
};
std::vector<TokenSpan> token_spans(std::string_view text);

// Start indices (into `tokens`) of every non-overlapping occurrence of the
// token sequence `needle`, scanned left to right.
std::vector<int> find_token_subsequence(const std::vector<std::string>& tokens,
                                        const std::vector<std::string>& needle);

// True when `word` occurs in `text` at a token boundary (case-insensitive).
bool contains_word(std::string_view text, std::string_view word);

// Copies the leading-capital pattern of `original` onto `replacement`:
// "Airman" + "airwoman" -> "Airwoman", "airman" + "Airwoman" -> "airwoman".
std::string match_leading_case(std::string_view original, std::string replacement);

}  // namespace debias
