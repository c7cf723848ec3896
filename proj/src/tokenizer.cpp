#include "cmtrace/tokenizer.hpp"

#include <algorithm>
#include <cctype>

#include "cmtrace/error.hpp"
#include "hash.hpp"

namespace cmtrace {

BimodalTokenizer::BimodalTokenizer(VocabLayout vocab, std::vector<std::string> words)
    : vocab_(std::move(vocab)), words_(std::move(words)) {
    vocab_.validate();
    if (words_.size() > vocab_.text.size())
        throw InvalidArgument("tokenizer: " + std::to_string(words_.size()) + " words do not fit in " +
                              std::to_string(vocab_.text.size()) + " text ids");
    for (std::size_t i = 0; i < words_.size(); ++i) {
        if (!index_.emplace(words_[i], static_cast<TokenId>(vocab_.text.begin + i)).second)
            throw InvalidArgument("tokenizer: duplicate word '" + words_[i] + "'");
    }
}

std::vector<WordPiece> BimodalTokenizer::split_words(std::string_view text) {
    std::vector<WordPiece> out;
    const auto is_space = [](char c) { return std::isspace(static_cast<unsigned char>(c)) != 0; };
    const auto is_punct = [](char c) { return std::ispunct(static_cast<unsigned char>(c)) != 0; };
    std::size_t i = 0;
    while (i < text.size()) {
        while (i < text.size() && is_space(text[i])) ++i;
        std::size_t j = i;
        while (j < text.size() && !is_space(text[j])) ++j;
        std::size_t b = i, e = j;
        while (b < e && is_punct(text[b])) ++b;
        while (e > b && is_punct(text[e - 1])) --e;
        if (b < e) {
            WordPiece w{std::string(text.substr(b, e - b)), b, e};
            for (char& c : w.text) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
            out.push_back(std::move(w));
        }
        i = j;
    }
    return out;
}

TokenId BimodalTokenizer::word_id(std::string_view word) const {
    if (auto it = index_.find(std::string(word)); it != index_.end()) return it->second;
    const std::size_t known = words_.size(), total = vocab_.text.size();
    const std::uint64_t h = detail::fnv1a(word);
    if (known < total) return static_cast<TokenId>(vocab_.text.begin + known + h % (total - known));
    return static_cast<TokenId>(vocab_.text.begin + h % total);
}

std::string BimodalTokenizer::decode(TokenId id) const {
    switch (vocab_.region_of(id)) {
        case VocabLayout::Region::text_marker: return "<T>";
        case VocabLayout::Region::speech_marker: return "<S>";
        case VocabLayout::Region::speech: return "<s" + std::to_string(id) + ">";
        case VocabLayout::Region::text: {
            const std::size_t i = id - vocab_.text.begin;
            if (i < words_.size()) return words_[i];
            return "<t" + std::to_string(id) + ">";
        }
        case VocabLayout::Region::none: break;
    }
    throw IndexError("tokenizer: id outside the vocab", id);
}

std::string BimodalTokenizer::decode(const std::vector<TokenId>& ids) const {
    std::string out;
    for (TokenId id : ids) {
        if (!out.empty()) out += ' ';
        out += decode(id);
    }
    return out;
}

TokenSequence BimodalTokenizer::encode_text(std::string_view text) const {
    TokenSequence seq;
    seq.push_back(vocab_.text_marker, vocab_);
    for (const auto& w : split_words(text)) seq.push_back(word_id(w.text), vocab_);
    return seq;
}

std::vector<TokenId> BimodalTokenizer::speech_units(std::string_view word) const {
    const std::size_t n = word.empty() ? 1 : (word.size() + 1) / 2;
    std::vector<TokenId> units;
    units.reserve(n);
    for (std::size_t k = 0; k < n; ++k) {
        const std::string_view pair = word.substr(std::min(2 * k, word.size()), 2);
        units.push_back(static_cast<TokenId>(vocab_.speech.begin + detail::fnv1a(pair) % vocab_.speech.size()));
    }
    return units;
}

SpeechExpansion BimodalTokenizer::expand_speech(std::string_view text, bool request_text) const {
    SpeechExpansion out;
    out.tokens.push_back(vocab_.speech_marker, vocab_);
    out.text_token_map.push_back(std::nullopt);
    const auto words = split_words(text);
    for (std::size_t i = 0; i < words.size(); ++i) {
        for (TokenId u : speech_units(words[i].text)) {
            out.tokens.push_back(u, vocab_);
            out.text_token_map.push_back(i + 1);  // text position 0 is the marker
        }
    }
    if (request_text) {
        out.tokens.push_back(vocab_.text_marker, vocab_);
        out.text_token_map.push_back(std::nullopt);
    }
    return out;
}

}  // namespace cmtrace
