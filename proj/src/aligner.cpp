#include "cmtrace/aligner.hpp"

#include <algorithm>
#include <cctype>
#include <charconv>
#include <cmath>
#include <limits>

#include "cmtrace/error.hpp"

namespace cmtrace {

namespace {

constexpr double kNegInf = -std::numeric_limits<double>::infinity();

}  // namespace

LabelVocab::LabelVocab(std::string labels, char blank, char boundary)
    : labels_(std::move(labels)), blank_(blank), boundary_(boundary) {
    if (blank_ == boundary_) throw InvalidArgument("label vocab: blank and boundary must differ");
    bool any_upper = false, any_lower = false;
    for (std::size_t i = 0; i < labels_.size(); ++i) {
        const char c = labels_[i];
        if (std::isspace(static_cast<unsigned char>(c))) throw InvalidArgument("label vocab: whitespace label");
        if (!index_.emplace(c, i).second) throw InvalidArgument(std::string("label vocab: duplicate label '") + c + "'");
        any_upper |= std::isupper(static_cast<unsigned char>(c)) != 0;
        any_lower |= std::islower(static_cast<unsigned char>(c)) != 0;
    }
    const auto b = find(blank_), w = find(boundary_);
    if (!b) throw InvalidArgument(std::string("label vocab: blank '") + blank_ + "' missing from labels");
    if (!w) throw InvalidArgument(std::string("label vocab: boundary '") + boundary_ + "' missing from labels");
    blank_id_ = *b;
    boundary_id_ = *w;
    upper_ = any_upper || !any_lower;
}

LabelVocab LabelVocab::english() { return LabelVocab("-|ETAONIHSRDLUMWCFGYPBVK'XJQZ", '-', '|'); }

std::optional<std::size_t> LabelVocab::find(char c) const {
    auto it = index_.find(c);
    if (it == index_.end()) return std::nullopt;
    return it->second;
}

std::size_t LabelVocab::id_of(char c) const {
    if (auto id = find(c)) return *id;
    throw IndexError(std::string("label '") + c + "' not in vocab", static_cast<unsigned char>(c));
}

void EmissionMatrix::validate(double tolerance) const {
    if (log_probs.cols() != vocab.size())
        throw FormatError("emissions: " + std::to_string(log_probs.cols()) + " columns for " +
                          std::to_string(vocab.size()) + " labels");
    for (std::size_t t = 0; t < log_probs.rows(); ++t) {
        const auto row = log_probs.row(t);
        double mx = kNegInf;
        for (double x : row) {
            if (std::isnan(x) || x == std::numeric_limits<double>::infinity())
                throw FormatError("emissions: invalid log-probability at frame " + std::to_string(t));
            mx = std::max(mx, x);
        }
        double sum = 0.0;
        for (double x : row) sum += std::exp(x - mx);
        const double lse = mx + std::log(sum);
        if (!(std::abs(lse) <= tolerance))
            throw FormatError("emissions: frame " + std::to_string(t) + " log-sum-exp is " + std::to_string(lse) +
                              ", expected 0");
    }
}

// ---------------------------------------------------------------------------
// Transcript preprocessing

namespace {

constexpr const char* kDigitWords[] = {"ZERO", "ONE", "TWO",   "THREE", "FOUR",
                                       "FIVE", "SIX", "SEVEN", "EIGHT", "NINE"};

struct SymbolWord {
    char symbol;
    const char* word;
};
constexpr SymbolWord kSymbolWords[] = {{'%', "PERCENT"}, {'&', "AND"}, {'+', "PLUS"}, {'@', "AT"}, {'=', "EQUALS"}};

// Characters splitting a raw word into separate spoken tokens.
bool is_separator(char c) { return c == '-' || c == '/' || c == '_'; }

const char* symbol_word(char c) {
    for (const auto& s : kSymbolWords)
        if (s.symbol == c) return s.word;
    return nullptr;
}

}  // namespace

std::vector<std::string> spell_number(std::string_view digits) {
    if (digits.empty()) return {};
    for (char c : digits)
        if (c < '0' || c > '9') throw InvalidArgument("spell_number: not a digit string '" + std::string(digits) + "'");
    std::vector<std::string> out;
    const auto digit = [](char c) { return std::string(kDigitWords[c - '0']); };
    if (digits.size() > 4 || (digits.size() > 1 && digits.front() == '0')) {
        for (char c : digits) out.push_back(digit(c));
        return out;
    }
    int n = 0;
    std::from_chars(digits.data(), digits.data() + digits.size(), n);
    if (n == 0) return {"ZERO"};
    if (n >= 1000) {
        out.push_back(kDigitWords[n / 1000]);
        out.push_back("THOUSAND");
    }
    if ((n / 100) % 10 != 0) {
        out.push_back(kDigitWords[(n / 100) % 10]);
        out.push_back("HUNDRED");
    }
    const int rest = n % 100;
    if (rest >= 10) out.push_back(kDigitWords[rest / 10]);
    if (rest != 0) out.push_back(kDigitWords[rest % 10]);
    return out;
}

PreprocessedTranscript preprocess_transcript(std::string_view raw, const LabelVocab& vocab) {
    const auto fold = [&](char c) {
        const auto u = static_cast<unsigned char>(c);
        return static_cast<char>(vocab.upper_case() ? std::toupper(u) : std::tolower(u));
    };
    const auto keep = [&](char c) { return c != vocab.blank() && c != vocab.boundary() && vocab.find(c).has_value(); };
    const auto add_word = [&](std::vector<std::string>& tokens, std::string_view word) {
        std::string w;
        for (char c : word)
            if (keep(fold(c))) w += fold(c);
        if (!w.empty()) tokens.push_back(std::move(w));
    };

    PreprocessedTranscript out;
    std::string current;
    const auto flush = [&] {
        if (!current.empty()) out.spoken_tokens.push_back(std::move(current));
        current.clear();
    };
    std::size_t i = 0;
    while (i < raw.size()) {
        const char c = raw[i];
        if (std::isdigit(static_cast<unsigned char>(c))) {
            flush();
            std::size_t j = i;
            while (j < raw.size() && std::isdigit(static_cast<unsigned char>(raw[j]))) ++j;
            for (const auto& w : spell_number(raw.substr(i, j - i))) add_word(out.spoken_tokens, w);
            i = j;
            continue;
        }
        if (const char* word = symbol_word(c)) {
            flush();
            add_word(out.spoken_tokens, word);
        } else if (std::isspace(static_cast<unsigned char>(c)) || is_separator(c)) {
            flush();
        } else if (keep(fold(c))) {
            current += fold(c);
        }
        ++i;
    }
    flush();
    if (out.spoken_tokens.empty())
        throw InvalidArgument("transcript '" + std::string(raw) + "' is empty after preprocessing");
    for (const auto& t : out.spoken_tokens) {
        if (!out.joined.empty()) out.joined += vocab.boundary();
        out.joined += t;
    }
    return out;
}

std::vector<std::size_t> transcript_ids(std::string_view joined, const LabelVocab& vocab) {
    std::vector<std::size_t> ids;
    ids.reserve(joined.size());
    for (char c : joined) ids.push_back(vocab.id_of(c));
    return ids;
}

// ---------------------------------------------------------------------------
// Trellis and backtracking

Trellis build_trellis(const EmissionMatrix& em, const std::vector<std::size_t>& ids) {
    const std::size_t T = em.frames(), N = ids.size();
    if (N == 0) throw InvalidArgument("build_trellis: empty transcript");
    if (T < N) throw InfeasibleAlignment(T, N);
    for (std::size_t id : ids)
        if (id >= em.vocab.size()) throw IndexError("build_trellis: transcript label id out of range", id);

    const std::size_t blank = em.vocab.blank_id();
    Trellis tr{Matrix(T + 1, N + 1, kNegInf), ids};
    auto& k = tr.k;
    k(0, 0) = 0.0;
    for (std::size_t t = 1; t <= T; ++t) {
        const double stay_lp = em.log_prob(t - 1, blank);
        k(t, 0) = k(t - 1, 0) + stay_lp;
        for (std::size_t j = 1; j <= N; ++j) {
            const double advance = k(t - 1, j - 1) + em.log_prob(t - 1, ids[j - 1]);
            const double stay = k(t - 1, j) + stay_lp;
            k(t, j) = std::max(advance, stay);
        }
    }
    return tr;
}

std::vector<PathPoint> backtrack(const Trellis& trellis, const EmissionMatrix& em) {
    const std::size_t T = trellis.frames(), N = trellis.labels();
    if (!(trellis.best_score() > kNegInf)) throw InfeasibleAlignment(T, N);
    const auto& k = trellis.k;
    const std::size_t blank = em.vocab.blank_id();

    std::vector<PathPoint> path;
    path.reserve(T);
    std::size_t j = N;
    for (std::size_t t = T; t >= 1; --t) {
        const double stay_lp = em.log_prob(t - 1, blank);
        if (j == 0) {
            path.push_back({t, 0, std::exp(stay_lp), false});
            continue;
        }
        const double label_lp = em.log_prob(t - 1, trellis.label_ids[j - 1]);
        const double advance = k(t - 1, j - 1) + label_lp;
        const double stay = k(t - 1, j) + stay_lp;
        if (advance >= stay) {
            path.push_back({t, j, std::exp(label_lp), true});
            --j;
        } else {
            path.push_back({t, j, std::exp(stay_lp), false});
        }
    }
    std::reverse(path.begin(), path.end());
    return path;
}

std::vector<Segment> merge_repeats(const std::vector<PathPoint>& path, const std::vector<std::size_t>& ids,
                                   const LabelVocab& vocab) {
    std::vector<Segment> segments;
    std::size_t i = 0;
    while (i < path.size()) {
        const std::size_t j = path[i].label_index;
        std::size_t end = i;
        double sum = 0.0;
        while (end < path.size() && path[end].label_index == j) sum += path[end++].score;
        if (j > 0) {
            if (j > ids.size()) throw IndexError("merge_repeats: label index past transcript end", j);
            segments.push_back(Segment{vocab.label(ids[j - 1]), j, path[i].time_index - 1, path[end - 1].time_index,
                                       sum / static_cast<double>(end - i)});
        }
        i = end;
    }
    return segments;
}

std::vector<TokenSpan> merge_words(const std::vector<Segment>& segments, const LabelVocab& vocab) {
    std::vector<TokenSpan> spans;
    std::vector<const Segment*> group;
    const auto flush = [&] {
        if (group.empty()) return;
        TokenSpan span;
        double sum = 0.0;
        for (const Segment* s : group) {
            span.token_text += s->label;
            sum += s->score;
        }
        span.frame_start = group.front()->frame_start;
        span.frame_end = group.back()->frame_end;
        span.score = sum / static_cast<double>(group.size());
        spans.push_back(std::move(span));
        group.clear();
    };
    for (const auto& s : segments) {
        if (s.label == vocab.boundary()) {
            flush();
        } else {
            group.push_back(&s);
        }
    }
    flush();
    return spans;
}

// ---------------------------------------------------------------------------
// Conversions

void AudioMeta::validate() const {
    if (sample_count <= 0 || sample_rate <= 0 || frame_count <= 0)
        throw InvalidArgument("audio meta: sample count, sample rate and frame count must be positive");
    if (token_rate <= Rational(0)) throw InvalidArgument("audio meta: token rate must be positive");
}

std::int64_t floor_div(const Rational& r) {
    const auto n = r.numerator(), d = r.denominator();  // d > 0
    auto q = n / d;
    if ((n % d != 0) && (n < 0)) --q;
    return q;
}

std::int64_t ceil_div(const Rational& r) {
    const auto n = r.numerator(), d = r.denominator();
    auto q = n / d;
    if ((n % d != 0) && (n > 0)) ++q;
    return q;
}

TimeRange frame_to_time(std::size_t f_start, std::size_t f_end, const AudioMeta& meta) {
    meta.validate();
    if (!(f_start < f_end) || f_end > static_cast<std::size_t>(meta.frame_count))
        throw InvalidArgument("frame_to_time: invalid frame range [" + std::to_string(f_start) + ", " +
                              std::to_string(f_end) + ") for " + std::to_string(meta.frame_count) + " frames");
    const auto samples = [&](std::size_t f) {
        const __int128 prod = static_cast<__int128>(meta.sample_count) * static_cast<__int128>(f);
        return static_cast<std::int64_t>(prod / meta.frame_count);
    };
    return TimeRange{Rational(samples(f_start), meta.sample_rate), Rational(samples(f_end), meta.sample_rate)};
}

SpeechTokenRange time_to_speech_tokens(const Rational& s_start, const Rational& s_end, const Rational& token_rate) {
    if (s_start < Rational(0) || s_end < s_start)
        throw InvalidArgument("time_to_speech_tokens: need 0 <= s_start <= s_end");
    if (token_rate <= Rational(0)) throw InvalidArgument("time_to_speech_tokens: token rate must be positive");
    return {floor_div(s_start * token_rate), ceil_div(s_end * token_rate)};
}

SpeechTokenRange time_to_speech_tokens(double s_start, double s_end, double token_rate) {
    if (!(s_start >= 0.0) || !(s_end >= s_start))
        throw InvalidArgument("time_to_speech_tokens: need 0 <= s_start <= s_end");
    if (!(token_rate > 0.0)) throw InvalidArgument("time_to_speech_tokens: token rate must be positive");
    return {static_cast<std::int64_t>(std::floor(s_start * token_rate)),
            static_cast<std::int64_t>(std::ceil(s_end * token_rate))};
}

Rational parse_rational(std::string_view text) {
    const auto bad = [&] { return InvalidArgument("not a rational number: '" + std::string(text) + "'"); };
    const auto parse_int = [&](std::string_view s) {
        std::int64_t v = 0;
        auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
        if (ec != std::errc() || p != s.data() + s.size() || s.empty()) throw bad();
        return v;
    };
    if (const auto slash = text.find('/'); slash != std::string_view::npos) {
        const auto den = parse_int(text.substr(slash + 1));
        if (den == 0) throw bad();
        return Rational(parse_int(text.substr(0, slash)), den);
    }
    if (const auto dot = text.find('.'); dot != std::string_view::npos) {
        const auto frac = text.substr(dot + 1);
        if (frac.size() > 15) throw bad();
        std::int64_t scale = 1;
        for (std::size_t i = 0; i < frac.size(); ++i) scale *= 10;
        const std::string whole = std::string(text.substr(0, dot)) + std::string(frac);
        return Rational(parse_int(whole), scale);
    }
    return Rational(parse_int(text));
}

std::string format_rational(const Rational& r) {
    if (r.denominator() == 1) return std::to_string(r.numerator());
    return std::to_string(r.numerator()) + "/" + std::to_string(r.denominator());
}

// ---------------------------------------------------------------------------
// End to end

Alignment align(const EmissionMatrix& em, std::string_view transcript, const AudioMeta& meta) {
    meta.validate();
    if (static_cast<std::size_t>(meta.frame_count) != em.frames())
        throw InvalidArgument("align: audio meta declares " + std::to_string(meta.frame_count) +
                              " frames, emissions have " + std::to_string(em.frames()));
    Alignment a;
    a.transcript = preprocess_transcript(transcript, em.vocab);
    a.trellis = build_trellis(em, transcript_ids(a.transcript.joined, em.vocab));
    a.path = backtrack(a.trellis, em);
    a.segments = merge_repeats(a.path, a.trellis.label_ids, em.vocab);
    a.spans = merge_words(a.segments, em.vocab);
    for (auto& span : a.spans) {
        span.time = frame_to_time(span.frame_start, span.frame_end, meta);
        span.speech_tokens = time_to_speech_tokens(span.time.start, span.time.end, meta.token_rate);
        if (span.speech_tokens.empty())
            a.warnings.push_back("token '" + span.token_text + "' maps to an empty speech-token range [" +
                                 std::to_string(span.speech_tokens.start) + ", " +
                                 std::to_string(span.speech_tokens.end) + ")");
    }
    return a;
}

SpeechTokenRange subject_span(const std::vector<TokenSpan>& spans, const std::vector<std::string>& subject_tokens) {
    if (subject_tokens.empty()) throw InvalidArgument("subject_span: empty subject");
    const auto upper = [](std::string s) {
        for (char& c : s) c = static_cast<char>(std::toupper(static_cast<unsigned char>(c)));
        return s;
    };
    std::vector<std::string> want;
    for (const auto& t : subject_tokens) want.push_back(upper(t));
    const std::size_t k = want.size();
    for (std::size_t i = 0; i + k <= spans.size(); ++i) {
        bool match = true;
        for (std::size_t m = 0; m < k && match; ++m) match = upper(spans[i + m].token_text) == want[m];
        if (!match) continue;
        SpeechTokenRange r{spans[i].speech_tokens.start, spans[i].speech_tokens.end};
        for (std::size_t m = 1; m < k; ++m) {
            r.start = std::min(r.start, spans[i + m].speech_tokens.start);
            r.end = std::max(r.end, spans[i + m].speech_tokens.end);
        }
        return r;
    }
    for (const auto& w : want) {
        const bool present =
            std::any_of(spans.begin(), spans.end(), [&](const TokenSpan& s) { return upper(s.token_text) == w; });
        if (!present) throw InvalidArgument("subject token '" + w + "' not found in the alignment");
    }
    std::string joined;
    for (const auto& w : want) joined += (joined.empty() ? "" : " ") + w;
    throw InvalidArgument("subject tokens '" + joined + "' do not appear consecutively in the alignment");
}

std::vector<std::size_t> speech_token_span_map(const std::vector<TokenSpan>& spans, std::size_t n_speech_tokens) {
    if (spans.empty()) throw InvalidArgument("speech_token_span_map: no spans");
    std::vector<std::optional<std::size_t>> owner(n_speech_tokens);
    for (std::size_t i = 0; i < spans.size(); ++i) {
        const auto lo = static_cast<std::size_t>(std::max<std::int64_t>(0, spans[i].speech_tokens.start));
        const auto hi = static_cast<std::size_t>(
            std::clamp<std::int64_t>(spans[i].speech_tokens.end, 0, static_cast<std::int64_t>(n_speech_tokens)));
        for (std::size_t s = lo; s < hi; ++s)
            if (!owner[s]) owner[s] = i;
    }
    std::vector<std::size_t> out(n_speech_tokens, 0);
    std::size_t prev = 0;
    for (std::size_t s = 0; s < n_speech_tokens; ++s) {
        if (owner[s]) prev = std::max(prev, *owner[s]);
        out[s] = prev;
    }
    return out;
}

}  // namespace cmtrace
