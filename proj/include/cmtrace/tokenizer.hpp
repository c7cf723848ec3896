#pragma once

#include <cstddef>
#include <optional>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "cmtrace/vocab.hpp"

namespace cmtrace {

// A word as it appeared in the prompt, with its character span.
struct WordPiece {
    std::string text;    // normalized (lower-case, punctuation trimmed)
    std::size_t char_begin = 0;
    std::size_t char_end = 0;
};

// Speech rendering of a text sequence: unit ids plus, for every position,
// the text position it was expanded from (empty for markers).
struct SpeechExpansion {
    TokenSequence tokens;
    std::vector<std::optional<std::size_t>> text_token_map;
};

// Word-level text tokenizer over a fixed word table, with a rule-based
// expansion of words into discrete speech units. Word i of the table maps to
// text id text.begin + i; other words hash into the remaining text ids.
class BimodalTokenizer {
public:
    BimodalTokenizer(VocabLayout vocab, std::vector<std::string> words);

    const VocabLayout& vocab() const noexcept { return vocab_; }
    const std::vector<std::string>& words() const noexcept { return words_; }

    static std::vector<WordPiece> split_words(std::string_view text);

    TokenId word_id(std::string_view normalized_word) const;
    std::string decode(TokenId id) const;
    std::string decode(const std::vector<TokenId>& ids) const;

    // Text marker followed by one id per word.
    TokenSequence encode_text(std::string_view text) const;

    // Speech units for one word: ceil(len / 2) units (at least one), ids
    // derived from consecutive character pairs.
    std::vector<TokenId> speech_units(std::string_view normalized_word) const;

    // Speech marker, units for every word of the text and, when request_text
    // is set, a trailing text marker asking for a text answer. The map points
    // into the positions of encode_text(text).
    SpeechExpansion expand_speech(std::string_view text, bool request_text = true) const;

private:
    VocabLayout vocab_;
    std::vector<std::string> words_;
    std::unordered_map<std::string, TokenId> index_;
};

}  // namespace cmtrace
