#include <doctest.h>

#include <gmpxx.h>

#include <cmath>
#include <sstream>

#include "cmtrace/aligner.hpp"
#include "cmtrace/emissions_io.hpp"
#include "cmtrace/error.hpp"
#include "cmtrace/fixtures.hpp"
#include "support.hpp"

using namespace cmtrace;
namespace t = cmtrace::testing;

namespace {

const LabelVocab& en() {
    static const LabelVocab v = LabelVocab::english();
    return v;
}

// Frames given as (label, probability) with the rest spread evenly.
EmissionMatrix peaked(const std::vector<std::pair<char, double>>& frames) {
    Matrix lp(frames.size(), en().size());
    for (std::size_t f = 0; f < frames.size(); ++f) {
        const double rest = (1.0 - frames[f].second) / static_cast<double>(en().size() - 1);
        for (std::size_t c = 0; c < en().size(); ++c) lp(f, c) = std::log(rest);
        lp(f, en().id_of(frames[f].first)) = std::log(frames[f].second);
    }
    return EmissionMatrix{lp, en()};
}

std::vector<std::string> tokens_of(const std::vector<TokenSpan>& spans) {
    std::vector<std::string> out;
    for (const auto& s : spans) out.push_back(s.token_text);
    return out;
}

mpq_class to_mpq(const Rational& r) {
    return mpq_class(mpz_class(std::to_string(r.numerator())), mpz_class(std::to_string(r.denominator())));
}

}  // namespace

TEST_CASE("label vocab") {
    CHECK(en().size() == 29);
    CHECK(en().blank_id() == 0);
    CHECK(en().boundary_id() == 1);
    CHECK(en().id_of('E') == 2);
    CHECK_FALSE(en().find('e'));
    CHECK_THROWS_AS(en().id_of('#'), IndexError);
    CHECK_THROWS_AS(LabelVocab("-|AA", '-', '|'), InvalidArgument);
    CHECK_THROWS_AS(LabelVocab("-AB", '-', '-'), InvalidArgument);
    CHECK_THROWS_AS(LabelVocab("-AB", '-', '|'), InvalidArgument);
}

TEST_CASE("transcript preprocessing") {
    const auto a = preprocess_transcript("Rome has 0% risk", en());
    CHECK(a.joined == "ROME|HAS|ZERO|PERCENT|RISK");
    CHECK(a.spoken_tokens == std::vector<std::string>{"ROME", "HAS", "ZERO", "PERCENT", "RISK"});
    const auto b = preprocess_transcript("abc", en());
    CHECK(b.joined == "ABC");
    CHECK(b.spoken_tokens == std::vector<std::string>{"ABC"});
    CHECK(preprocess_transcript("100", en()).joined == "ONE|HUNDRED");
    CHECK(preprocess_transcript("The capital of Roman Republic is.", en()).joined ==
          "THE|CAPITAL|OF|ROMAN|REPUBLIC|IS");
    CHECK(preprocess_transcript("rock & roll, well-known", en()).joined == "ROCK|AND|ROLL|WELL|KNOWN");
    CHECK(preprocess_transcript("it's", en()).joined == "IT'S");
    CHECK_THROWS_AS(preprocess_transcript("?!", en()), InvalidArgument);
    CHECK_THROWS_AS(preprocess_transcript("", en()), InvalidArgument);

    CHECK(spell_number("0") == std::vector<std::string>{"ZERO"});
    CHECK(spell_number("7") == std::vector<std::string>{"SEVEN"});
    CHECK(spell_number("15") == std::vector<std::string>{"ONE", "FIVE"});
    CHECK(spell_number("305") == std::vector<std::string>{"THREE", "HUNDRED", "FIVE"});
    CHECK(spell_number("2024") == std::vector<std::string>{"TWO", "THOUSAND", "TWO", "FOUR"});
    CHECK(spell_number("1100") == std::vector<std::string>{"ONE", "THOUSAND", "ONE", "HUNDRED"});
    CHECK(spell_number("007") == std::vector<std::string>{"ZERO", "ZERO", "SEVEN"});
    CHECK(spell_number("12345") == std::vector<std::string>{"ONE", "TWO", "THREE", "FOUR", "FIVE"});

    const LabelVocab lower("_/abc", '_', '/');
    CHECK(preprocess_transcript("ABC cab", lower).joined == "abc/cab");
    CHECK_THROWS_AS(LabelVocab("_ abc", '_', ' '), InvalidArgument);
}

TEST_CASE("trellis") {
    SUBCASE("single step") {
        const auto em = peaked({{'A', 0.9}});
        const auto tr = build_trellis(em, transcript_ids("A", en()));
        CHECK(tr.k(0, 0) == 0.0);
        CHECK(std::isinf(tr.k(0, 1)));
        CHECK(tr.best_score() == doctest::Approx(std::log(0.9)).epsilon(1e-15));
        const auto path = backtrack(tr, em);
        REQUIRE(path.size() == 1);
        CHECK(path[0].time_index == 1);
        CHECK(path[0].label_index == 1);
        CHECK(path[0].score == doctest::Approx(0.9));
    }
    SUBCASE("two frames, one label: the better of the two monotone alignments") {
        Matrix lp(2, en().size(), std::log(0.01));
        lp(0, en().id_of('A')) = std::log(0.3);
        lp(0, 0) = std::log(0.6);
        lp(1, en().id_of('A')) = std::log(0.5);
        lp(1, 0) = std::log(0.2);
        const EmissionMatrix em{lp, en()};
        const auto tr = build_trellis(em, transcript_ids("A", en()));
        const double advance_first = std::log(0.3) + std::log(0.2);
        const double advance_second = std::log(0.6) + std::log(0.5);
        CHECK(tr.best_score() == doctest::Approx(std::max(advance_first, advance_second)).epsilon(1e-15));
        CHECK(tr.k(1, 0) == doctest::Approx(std::log(0.6)));
    }
    SUBCASE("infeasible and empty transcripts") {
        const auto em = peaked({{'A', 0.9}, {'B', 0.9}});
        try {
            build_trellis(em, transcript_ids("ABC", en()));
            FAIL("expected InfeasibleAlignment");
        } catch (const InfeasibleAlignment& e) {
            CHECK(e.frames() == 2);
            CHECK(e.labels() == 3);
            CHECK(std::string(e.what()).find("T=2, N=3") != std::string::npos);
        }
        CHECK_THROWS_AS(build_trellis(em, {}), InvalidArgument);
    }
    SUBCASE("ties prefer advancing") {
        Matrix lp(2, en().size(), std::log(0.5 / 27));
        for (std::size_t f = 0; f < 2; ++f) {
            lp(f, 0) = std::log(0.25);
            lp(f, en().id_of('A')) = std::log(0.25);
        }
        const EmissionMatrix em{lp, en()};
        const auto path = backtrack(build_trellis(em, transcript_ids("A", en())), em);
        REQUIRE(path.size() == 2);
        // from (2,1) both (1,0)->advance and (1,1)->stay are optimal; advance wins
        CHECK(path[0].label_index == 0);
        CHECK(path[1].label_index == 1);
        CHECK(path[1].advanced);
    }
}

TEST_CASE("trellis and backtrack agree with exhaustive enumeration") {
    std::mt19937_64 rng(2024);
    const LabelVocab small("-|ABC", '-', '|');
    for (int instance = 0; instance < 300; ++instance) {
        const std::size_t T = std::uniform_int_distribution<std::size_t>(1, 8)(rng);
        const std::size_t N = std::uniform_int_distribution<std::size_t>(1, std::min<std::size_t>(T, 4))(rng);
        std::vector<std::size_t> labels;
        for (std::size_t i = 0; i < N; ++i) labels.push_back(std::uniform_int_distribution<std::size_t>(1, 4)(rng));
        const auto em = t::random_emissions(rng, T, small);
        const auto tr = build_trellis(em, labels);
        const auto oracle = t::brute_force_alignment(em.log_probs, labels, small.blank_id());
        CHECK(std::abs(tr.best_score() - oracle.best) <= 1e-9);

        const auto path = backtrack(tr, em);
        REQUIRE(path.size() == T);
        double sum = 0.0;
        std::size_t prev = 0;
        for (std::size_t i = 0; i < T; ++i) {
            CHECK(path[i].time_index == i + 1);
            CHECK((path[i].label_index == prev || path[i].label_index == prev + 1));
            CHECK(path[i].advanced == (path[i].label_index == prev + 1));
            sum += std::log(path[i].score);
            prev = path[i].label_index;
        }
        CHECK(prev == N);
        CHECK(std::abs(sum - tr.best_score()) <= 1e-9);
        if (oracle.optimal_paths == 1)
            for (std::size_t i = 0; i < T; ++i) CHECK(path[i].advanced == oracle.advance[i]);
    }
}

TEST_CASE("doubled letters advance between identical labels") {
    // L L with a blank-free layout: the second L must come from an advance
    const auto em = peaked({{'-', 0.9}, {'L', 0.9}, {'L', 0.9}, {'-', 0.9}});
    const auto ids = transcript_ids("LL", en());
    const auto path = backtrack(build_trellis(em, ids), em);
    REQUIRE(path.size() == 4);
    CHECK(path[1].label_index == 1);
    CHECK(path[2].label_index == 2);
    const auto segs = merge_repeats(path, ids, en());
    REQUIRE(segs.size() == 2);
    CHECK(segs[0].frame_start == 1);
    CHECK(segs[0].frame_end == 2);
    CHECK(segs[1].frame_start == 2);
    CHECK(segs[1].frame_end == 4);
}

TEST_CASE("merging repeats and words") {
    const std::vector<std::size_t> ids{en().id_of('A')};
    const std::vector<PathPoint> pts{{1, 1, 0.8, true}, {2, 1, 0.6, false}};
    const auto segs = merge_repeats(pts, ids, en());
    REQUIRE(segs.size() == 1);
    CHECK(segs[0].frame_start == 0);
    CHECK(segs[0].frame_end == 2);
    CHECK(segs[0].score == doctest::Approx(0.7));
    CHECK(segs[0].label == 'A');

    const auto ab = transcript_ids("AB", en());
    const std::vector<PathPoint> alt{{1, 1, 0.5, true}, {2, 2, 0.4, true}};
    CHECK(merge_repeats(alt, ab, en()).size() == 2);
    CHECK(merge_repeats({}, ab, en()).empty());

    const auto words_ids = transcript_ids("|AB|C|", en());
    std::vector<PathPoint> path;
    for (std::size_t j = 1; j <= words_ids.size(); ++j) path.push_back({j, j, 0.1 * static_cast<double>(j), true});
    const auto spans = merge_words(merge_repeats(path, words_ids, en()), en());
    CHECK(tokens_of(spans) == std::vector<std::string>{"AB", "C"});
    CHECK(spans[0].frame_start == 1);
    CHECK(spans[0].frame_end == 3);
    CHECK(spans[0].score == doctest::Approx(0.25));
    CHECK(spans[1].frame_start == 4);
    CHECK(spans[0].frame_end <= spans[1].frame_start);
}

TEST_CASE("frame to time") {
    const AudioMeta meta{16000, 16000, 50, Rational(25)};
    const auto r = frame_to_time(10, 20, meta);
    CHECK(r.start == Rational(1, 5));
    CHECK(r.start_seconds() == 0.2);
    CHECK(r.end == Rational(2, 5));
    CHECK(frame_to_time(0, 1, meta).start == Rational(0));
    const AudioMeta odd{16001, 16000, 50, Rational(25)};
    CHECK(frame_to_time(10, 11, odd).start == Rational(3200, 16000));
    CHECK(frame_to_time(49, 50, odd).end == Rational(16001, 16000));
    CHECK_THROWS_AS(frame_to_time(5, 5, meta), InvalidArgument);
    CHECK_THROWS_AS(frame_to_time(5, 51, meta), InvalidArgument);
}

TEST_CASE("time to speech tokens") {
    CHECK(time_to_speech_tokens(Rational(1, 5), Rational(23, 50), Rational(25)) == SpeechTokenRange{5, 12});
    CHECK(time_to_speech_tokens(0.2, 0.46, 25.0) == SpeechTokenRange{5, 12});
    CHECK(time_to_speech_tokens(Rational(0), Rational(0), Rational(25)) == SpeechTokenRange{0, 0});
    const auto degenerate = time_to_speech_tokens(Rational(1, 25), Rational(1, 25), Rational(25));
    CHECK(degenerate == SpeechTokenRange{1, 1});
    CHECK(degenerate.empty());
    CHECK_THROWS_AS(time_to_speech_tokens(Rational(-1, 5), Rational(1), Rational(25)), InvalidArgument);
    CHECK_THROWS_AS(time_to_speech_tokens(Rational(1), Rational(1, 2), Rational(25)), InvalidArgument);

    CHECK(floor_div(Rational(-7, 2)) == -4);
    CHECK(ceil_div(Rational(-7, 2)) == -3);
    CHECK(ceil_div(Rational(6, 3)) == 2);

    CHECK(parse_rational("25") == Rational(25));
    CHECK(parse_rational("12.5") == Rational(25, 2));
    CHECK(parse_rational("50/3") == Rational(50, 3));
    CHECK(format_rational(Rational(50, 3)) == "50/3");
    CHECK(format_rational(Rational(25)) == "25");
    CHECK_THROWS_AS(parse_rational("x"), InvalidArgument);
    CHECK_THROWS_AS(parse_rational("1/0"), InvalidArgument);
}

TEST_CASE("span arithmetic matches a GMP rational reference") {
    std::mt19937_64 rng(99);
    std::uniform_int_distribution<std::int64_t> samples(1, 2'000'000), frames(1, 3000), rates(1, 96000);
    std::uniform_int_distribution<std::int64_t> tr_num(1, 200), tr_den(1, 7);
    for (int i = 0; i < 300; ++i) {
        const AudioMeta meta{samples(rng), rates(rng), frames(rng), Rational(tr_num(rng), tr_den(rng))};
        auto fs = std::uniform_int_distribution<std::int64_t>(0, meta.frame_count - 1)(rng);
        auto fe = std::uniform_int_distribution<std::int64_t>(fs + 1, meta.frame_count)(rng);
        const auto got = frame_to_time(fs, fe, meta);
        const auto eq1 = [&](std::int64_t f) {
            mpz_class q;
            const mpz_class num = mpz_class(std::to_string(meta.sample_count)) * mpz_class(std::to_string(f));
            mpz_fdiv_q(q.get_mpz_t(), num.get_mpz_t(), mpz_class(std::to_string(meta.frame_count)).get_mpz_t());
            return mpq_class(q, mpz_class(std::to_string(meta.sample_rate)));
        };
        mpq_class s0 = eq1(fs), s1 = eq1(fe);
        s0.canonicalize();
        s1.canonicalize();
        CHECK(to_mpq(got.start) == s0);
        CHECK(to_mpq(got.end) == s1);

        const auto stk = time_to_speech_tokens(got.start, got.end, meta.token_rate);
        const mpq_class a = s0 * to_mpq(meta.token_rate), b = s1 * to_mpq(meta.token_rate);
        mpz_class lo, hi;
        mpz_fdiv_q(lo.get_mpz_t(), a.get_num_mpz_t(), a.get_den_mpz_t());
        mpz_cdiv_q(hi.get_mpz_t(), b.get_num_mpz_t(), b.get_den_mpz_t());
        CHECK(stk.start == lo.get_si());
        CHECK(stk.end == hi.get_si());
    }
}

TEST_CASE("end-to-end alignment on synthetic emissions") {
    const auto fx = make_synthetic_emissions("The capital of Roman Republic is", en());
    const auto meta = fx.file.meta(Rational(25));
    const auto al = align(fx.file.emissions, "The capital of Roman Republic is", meta);
    REQUIRE(al.spans.size() == 6);
    CHECK(tokens_of(al.spans) == std::vector<std::string>{"THE", "CAPITAL", "OF", "ROMAN", "REPUBLIC", "IS"});
    for (std::size_t i = 0; i < 6; ++i) {
        CHECK(al.spans[i].frame_start == fx.word_frames[i].first);
        CHECK(al.spans[i].frame_end == fx.word_frames[i].second);
        CHECK(al.spans[i].time.start == frame_to_time(al.spans[i].frame_start, al.spans[i].frame_end, meta).start);
        if (i > 0) CHECK(al.spans[i - 1].speech_tokens.end <= al.spans[i].speech_tokens.start + 1);
    }
    const auto subject = subject_span(al.spans, {"roman", "Republic"});
    CHECK(subject.start == al.spans[3].speech_tokens.start);
    CHECK(subject.end == al.spans[4].speech_tokens.end);
    CHECK(subject_span(al.spans, {"OF"}) == al.spans[2].speech_tokens);
    try {
        subject_span(al.spans, {"ROMAN", "EMPIRE"});
        FAIL("expected an error");
    } catch (const InvalidArgument& e) {
        CHECK(std::string(e.what()).find("EMPIRE") != std::string::npos);
    }

    const auto one = make_synthetic_emissions("hello", en());
    CHECK(align(one.file.emissions, "hello", one.file.meta(Rational(50))).spans.size() == 1);

    CHECK_THROWS_AS(align(one.file.emissions, "the capital of roman republic is and then a great many more words",
                          one.file.meta(Rational(50))),
                    InfeasibleAlignment);
}

TEST_CASE("empty speech-token ranges produce warnings") {
    // fewer samples than frames: every boundary before frame T floors to
    // sample 0, so the first word collapses to [0, 0]
    const auto fx = make_synthetic_emissions("a b", en());
    const AudioMeta meta{1, 16000, static_cast<std::int64_t>(fx.file.emissions.frames()), Rational(25)};
    const auto al = align(fx.file.emissions, "a b", meta);
    REQUIRE(al.spans.size() == 2);
    CHECK(al.spans[0].speech_tokens.empty());
    CHECK_FALSE(al.spans[1].speech_tokens.empty());  // ends at frame T -> sample 1
    CHECK(al.warnings.size() == 1);
}

TEST_CASE("speech tokens map to spans") {
    std::vector<TokenSpan> spans(3);
    spans[0].speech_tokens = {1, 3};
    spans[1].speech_tokens = {2, 5};
    spans[2].speech_tokens = {7, 9};
    CHECK(speech_token_span_map(spans, 10) == std::vector<std::size_t>{0, 0, 0, 1, 1, 1, 1, 2, 2, 2});
}

TEST_CASE("emissions files round-trip") {
    const auto fx = make_synthetic_emissions("abc", en());
    auto file = fx.file;
    file.token_rate = Rational(50, 3);
    std::stringstream buf;
    save_emissions(buf, file);
    std::istringstream in(buf.str());
    const auto back = load_emissions(in);
    CHECK(back.emissions.log_probs == file.emissions.log_probs);
    CHECK(back.emissions.vocab.labels() == en().labels());
    CHECK(back.sample_rate == file.sample_rate);
    CHECK(back.sample_count == file.sample_count);
    CHECK(back.token_rate == Rational(50, 3));

    // rows must be distributions
    auto broken = file;
    broken.emissions.log_probs(0, 0) += 1.0;
    std::stringstream bad;
    save_emissions(bad, broken);
    std::istringstream bad_in(bad.str());
    CHECK_THROWS_AS(load_emissions(bad_in), FormatError);

    std::istringstream cut(buf.str().substr(0, buf.str().size() - 3));
    CHECK_THROWS_AS(load_emissions(cut), FormatError);
}
