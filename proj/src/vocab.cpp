#include "cmtrace/vocab.hpp"

#include <algorithm>
#include <string>

#include "cmtrace/error.hpp"

namespace cmtrace {

std::string_view to_string(Modality m) { return m == Modality::text ? "text" : "speech"; }

Modality parse_modality(std::string_view name) {
    if (name == "text") return Modality::text;
    if (name == "speech") return Modality::speech;
    throw InvalidArgument("unknown modality '" + std::string(name) + "'");
}

std::size_t VocabLayout::size() const noexcept {
    std::size_t n = std::max<std::size_t>(text.end, speech.end);
    n = std::max<std::size_t>(n, std::size_t{text_marker} + 1);
    return std::max<std::size_t>(n, std::size_t{speech_marker} + 1);
}

VocabLayout::Region VocabLayout::region_of(TokenId id) const noexcept {
    if (id == text_marker) return Region::text_marker;
    if (id == speech_marker) return Region::speech_marker;
    if (text.contains(id)) return Region::text;
    if (speech.contains(id)) return Region::speech;
    return Region::none;
}

void VocabLayout::validate() const {
    if (text.size() == 0) throw InvalidArgument("vocab: empty text token range");
    if (speech.size() == 0) throw InvalidArgument("vocab: empty speech token range");
    if (text_marker == speech_marker) throw InvalidArgument("vocab: text and speech markers coincide");
    const bool ranges_overlap = text.begin < speech.end && speech.begin < text.end;
    if (ranges_overlap) throw InvalidArgument("vocab: text and speech ranges overlap");
    for (TokenId m : {text_marker, speech_marker}) {
        if (text.contains(m) || speech.contains(m)) throw IndexError("vocab: marker inside a token range", m);
    }
}

namespace {

bool belongs(VocabLayout::Region r, Modality m) {
    return m == Modality::text ? r == VocabLayout::Region::text : r == VocabLayout::Region::speech;
}

}  // namespace

TokenSequence TokenSequence::from_ids(std::vector<TokenId> ids, const VocabLayout& vocab) {
    TokenSequence seq;
    seq.ids.reserve(ids.size());
    for (TokenId id : ids) seq.push_back(id, vocab);
    return seq;
}

void TokenSequence::push_back(TokenId id, const VocabLayout& vocab) {
    const auto region = vocab.region_of(id);
    const std::size_t pos = ids.size();
    if (region == VocabLayout::Region::none) throw IndexError("token id outside every vocab region", id);
    if (region == VocabLayout::Region::text_marker || region == VocabLayout::Region::speech_marker) {
        const Modality m = region == VocabLayout::Region::text_marker ? Modality::text : Modality::speech;
        spans.push_back({pos, pos + 1, m});
    } else {
        if (spans.empty()) throw IndexError("sequence must start with a modality marker", pos);
        if (!belongs(region, spans.back().modality))
            throw IndexError("token does not match the modality of its span", pos);
        spans.back().end = pos + 1;
    }
    ids.push_back(id);
}

void TokenSequence::validate(const VocabLayout& vocab) const {
    const TokenSequence rebuilt = from_ids(ids, vocab);
    if (rebuilt.spans != spans) throw InvalidArgument("sequence spans do not match its marker tokens");
}

Modality TokenSequence::trailing_modality() const {
    if (spans.empty()) throw InvalidArgument("empty token sequence");
    return spans.back().modality;
}

}  // namespace cmtrace
