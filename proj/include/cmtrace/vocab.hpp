#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <string_view>
#include <vector>

namespace cmtrace {

using TokenId = std::uint32_t;

// Half-open id interval [begin, end).
struct TokenRange {
    TokenId begin = 0;
    TokenId end = 0;

    bool contains(TokenId id) const noexcept { return id >= begin && id < end; }
    std::size_t size() const noexcept { return end > begin ? end - begin : 0; }
    bool operator==(const TokenRange&) const = default;
};

enum class Modality { text, speech };

std::string_view to_string(Modality m);
Modality parse_modality(std::string_view name);

// Partition of the id space into text tokens, speech units and the two
// modality declaration markers ("T" and "S").
struct VocabLayout {
    TokenRange text;
    TokenRange speech;
    TokenId text_marker = 0;
    TokenId speech_marker = 0;

    enum class Region { text, speech, text_marker, speech_marker, none };

    // One past the largest id belonging to any region.
    std::size_t size() const noexcept;
    Region region_of(TokenId id) const noexcept;
    bool is_marker(TokenId id) const noexcept { return id == text_marker || id == speech_marker; }
    TokenId marker_for(Modality m) const noexcept { return m == Modality::text ? text_marker : speech_marker; }

    // Throws InvalidArgument when regions are empty or overlap.
    void validate() const;

    bool operator==(const VocabLayout&) const = default;
};

struct ModalitySpan {
    std::size_t begin = 0;
    std::size_t end = 0;
    Modality modality = Modality::text;

    bool operator==(const ModalitySpan&) const = default;
};

// Token ids plus the modality spans they partition into. Every span starts
// with its marker token.
struct TokenSequence {
    std::vector<TokenId> ids;
    std::vector<ModalitySpan> spans;

    std::size_t size() const noexcept { return ids.size(); }

    // Derives spans from marker positions. Throws when the first token is not
    // a marker or a token does not belong to the enclosing span's modality.
    static TokenSequence from_ids(std::vector<TokenId> ids, const VocabLayout& vocab);

    void validate(const VocabLayout& vocab) const;

    // Modality of the span containing the last token.
    Modality trailing_modality() const;

    // Appends one token, extending the last span or opening a new one if the
    // token is a marker.
    void push_back(TokenId id, const VocabLayout& vocab);
};

}  // namespace cmtrace
