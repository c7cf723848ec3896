#pragma once

#include <boost/rational.hpp>
#include <cstddef>
#include <cstdint>
#include <optional>
#include <string>
#include <string_view>
#include <unordered_map>
#include <utility>
#include <vector>

#include "cmtrace/matrix.hpp"

namespace cmtrace {

using Rational = boost::rational<std::int64_t>;

// CTC output labels. Labels are single characters; blank and the word
// boundary must both be present.
class LabelVocab {
public:
    LabelVocab(std::string labels, char blank, char boundary);

    // "-|ETAONIHSRDLUMWCFGYPBVK'XJQZ": wav2vec2-style English characters.
    static LabelVocab english();

    std::size_t size() const noexcept { return labels_.size(); }
    char label(std::size_t id) const { return labels_.at(id); }
    const std::string& labels() const noexcept { return labels_; }
    char blank() const noexcept { return blank_; }
    char boundary() const noexcept { return boundary_; }
    std::size_t blank_id() const noexcept { return blank_id_; }
    std::size_t boundary_id() const noexcept { return boundary_id_; }

    std::optional<std::size_t> find(char c) const;
    std::size_t id_of(char c) const;  // throws IndexError

    // True when letters in the vocab are upper case (the default case fold).
    bool upper_case() const noexcept { return upper_; }

private:
    std::string labels_;
    char blank_;
    char boundary_;
    std::size_t blank_id_ = 0;
    std::size_t boundary_id_ = 0;
    bool upper_ = true;
    std::unordered_map<char, std::size_t> index_;
};

// Frame-wise log-probabilities, frames x labels.
struct EmissionMatrix {
    Matrix log_probs;
    LabelVocab vocab;

    std::size_t frames() const noexcept { return log_probs.rows(); }
    double log_prob(std::size_t frame, std::size_t label) const { return log_probs(frame, label); }

    // Throws FormatError unless every row log-sum-exps to 0 within tolerance.
    void validate(double tolerance = 1e-6) const;
};

// ---------------------------------------------------------------------------
// Transcript preprocessing

struct PreprocessedTranscript {
    std::string joined;                      // tokens joined with the boundary label
    std::vector<std::string> spoken_tokens;  // "spoken text tokens"
};

// Spoken form of an integer written with digits, e.g. "100" -> {"ONE", "HUNDRED"}.
// Numbers below 10000 are read with THOUSAND / HUNDRED magnitudes and the
// remaining two digits one by one; longer numbers are read digit by digit.
std::vector<std::string> spell_number(std::string_view digits);

PreprocessedTranscript preprocess_transcript(std::string_view raw, const LabelVocab& vocab);

// Label ids of the joined transcript.
std::vector<std::size_t> transcript_ids(std::string_view joined, const LabelVocab& vocab);

// ---------------------------------------------------------------------------
// Trellis and best path

// k(t, j): best log-probability of emitting the first j transcript labels in
// the first t frames. Staying on a label emits blank.
struct Trellis {
    Matrix k;  // (T+1) x (N+1)
    std::vector<std::size_t> label_ids;

    std::size_t frames() const noexcept { return k.rows() - 1; }
    std::size_t labels() const noexcept { return k.cols() - 1; }
    double best_score() const { return k(frames(), labels()); }
};

Trellis build_trellis(const EmissionMatrix& em, const std::vector<std::size_t>& transcript_ids);

// One consumed frame. time_index is the 1-based trellis row (frame t - 1);
// label_index is the trellis column after the frame, 0 before the first label.
struct PathPoint {
    std::size_t time_index = 0;
    std::size_t label_index = 0;
    double score = 0.0;  // exp of the chosen emission log-probability
    bool advanced = false;
};

// Walks from (T, N) back to row 0, one point per frame, ordered by time.
// Ties between advancing and staying resolve to advancing.
std::vector<PathPoint> backtrack(const Trellis& trellis, const EmissionMatrix& em);

struct Segment {
    char label = 0;
    std::size_t label_index = 0;  // 1-based transcript position
    std::size_t frame_start = 0;
    std::size_t frame_end = 0;  // exclusive
    double score = 0.0;

    std::size_t length() const noexcept { return frame_end - frame_start; }
};

// Collapses runs of points sharing a label index; points before the first
// label (index 0) belong to no segment.
std::vector<Segment> merge_repeats(const std::vector<PathPoint>& path, const std::vector<std::size_t>& transcript_ids,
                                   const LabelVocab& vocab);

// ---------------------------------------------------------------------------
// Frame, time and speech-token conversions

struct AudioMeta {
    std::int64_t sample_count = 0;  // M
    std::int64_t sample_rate = 0;   // sr
    std::int64_t frame_count = 0;   // T
    Rational token_rate{0};         // tr, speech tokens per second

    Rational ratio() const { return Rational(sample_count, frame_count); }
    void validate() const;
};

struct TimeRange {
    Rational start;  // seconds, exact
    Rational end;

    double start_seconds() const { return boost::rational_cast<double>(start); }
    double end_seconds() const { return boost::rational_cast<double>(end); }
};

struct SpeechTokenRange {
    std::int64_t start = 0;
    std::int64_t end = 0;

    bool empty() const noexcept { return end <= start; }
    bool operator==(const SpeechTokenRange&) const = default;
};

std::int64_t floor_div(const Rational& r);
std::int64_t ceil_div(const Rational& r);

// s = floor(ratio * f) / sr for both ends.
TimeRange frame_to_time(std::size_t f_start, std::size_t f_end, const AudioMeta& meta);

// stk_start = floor(s_start * tr), stk_end = ceil(s_end * tr), exact.
SpeechTokenRange time_to_speech_tokens(const Rational& s_start, const Rational& s_end, const Rational& token_rate);
// Same formula evaluated in double precision.
SpeechTokenRange time_to_speech_tokens(double s_start, double s_end, double token_rate);

Rational parse_rational(std::string_view text);
std::string format_rational(const Rational& r);

// ---------------------------------------------------------------------------
// Word spans and the end-to-end alignment

struct TokenSpan {
    std::string token_text;
    std::size_t frame_start = 0;
    std::size_t frame_end = 0;
    TimeRange time;
    SpeechTokenRange speech_tokens;
    double score = 0.0;
};

// Groups segments between boundary labels. Spans carry frame ranges and
// scores only.
std::vector<TokenSpan> merge_words(const std::vector<Segment>& segments, const LabelVocab& vocab);

struct Alignment {
    PreprocessedTranscript transcript;
    Trellis trellis;
    std::vector<PathPoint> path;
    std::vector<Segment> segments;
    std::vector<TokenSpan> spans;
    std::vector<std::string> warnings;
};

Alignment align(const EmissionMatrix& em, std::string_view transcript, const AudioMeta& meta);

// Union speech-token range of the first run of consecutive spans matching
// subject_tokens (case-insensitive).
SpeechTokenRange subject_span(const std::vector<TokenSpan>& spans, const std::vector<std::string>& subject_tokens);

// For each of n_speech_tokens speech tokens, the index of the span it belongs
// to. Tokens claimed by two spans go to the earlier one; uncovered tokens go to
// the preceding span (the first span for leading tokens).
std::vector<std::size_t> speech_token_span_map(const std::vector<TokenSpan>& spans, std::size_t n_speech_tokens);

}  // namespace cmtrace
