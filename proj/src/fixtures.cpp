#include "cmtrace/fixtures.hpp"

#include <cctype>
#include <cmath>

#include "cmtrace/aligner.hpp"
#include "cmtrace/error.hpp"

namespace cmtrace {

namespace {

struct FactText {
    const char* relation;
    const char* subject;
    const char* object;
};

constexpr FactText kFacts[] = {
    {"capital", "italy", "rome"},       {"capital", "france", "paris"},   {"capital", "japan", "tokyo"},
    {"capital", "egypt", "cairo"},      {"capital", "peru", "lima"},      {"language", "brazil", "portuguese"},
    {"founder", "microsoft", "gates"},  {"currency", "india", "rupee"},
};

}  // namespace

PlantedBundle make_planted_bundle(std::size_t n_layers, std::size_t store_layer) {
    PlantedFactOptions options;
    options.vocab = VocabLayout{{2, 66}, {66, 130}, 0, 1};
    options.n_layers = n_layers;
    options.template_len = 6;
    options.subject_index = 4;
    options.store_layer = store_layer;

    const auto capitalized = [](const char* w) {
        std::string s(w);
        s[0] = static_cast<char>(std::toupper(static_cast<unsigned char>(s[0])));
        return s;
    };

    std::vector<std::string> words = {"the", "of", "is", "capital", "language", "founder", "currency"};
    for (const auto& f : kFacts) {
        words.push_back(f.subject);
        words.push_back(f.object);
    }
    const BimodalTokenizer tok(options.vocab, words);
    std::vector<PlantedFact> facts;
    auto known = nlohmann::ordered_json::array();
    int id = 0;
    for (const auto& f : kFacts) {
        facts.push_back({tok.word_id(f.subject), tok.word_id(f.object)});
        nlohmann::ordered_json rec;
        rec["known_id"] = id++;
        rec["prompt"] = "The " + std::string(f.relation) + " of " + capitalized(f.subject) + " is";
        rec["subject"] = capitalized(f.subject);
        rec["attribute"] = capitalized(f.object);
        known.push_back(std::move(rec));
    }
    auto planted = build_planted_fact_model(facts, options);
    return PlantedBundle{std::move(planted), options, std::move(facts), std::move(words), std::move(known)};
}

SyntheticEmissions make_synthetic_emissions(std::string_view transcript, const LabelVocab& vocab,
                                            std::size_t frames_per_label, std::size_t leading_silence, double peak,
                                            std::int64_t sample_rate, std::int64_t samples_per_frame) {
    if (frames_per_label == 0) throw InvalidArgument("frames_per_label must be >= 1");
    if (!(peak > 0.0 && peak < 1.0)) throw InvalidArgument("peak must lie in (0, 1)");
    const auto pre = preprocess_transcript(transcript, vocab);
    const auto ids = transcript_ids(pre.joined, vocab);
    const std::size_t V = vocab.size();
    const std::size_t T = leading_silence + ids.size() * frames_per_label;
    const double rest = std::log((1.0 - peak) / static_cast<double>(V - 1));

    Matrix lp(T, V, rest);
    for (std::size_t t = 0; t < leading_silence; ++t) lp(t, vocab.blank_id()) = std::log(peak);
    for (std::size_t j = 0; j < ids.size(); ++j) {
        const std::size_t start = leading_silence + j * frames_per_label;
        lp(start, ids[j]) = std::log(peak);
        for (std::size_t t = start + 1; t < start + frames_per_label; ++t) lp(t, vocab.blank_id()) = std::log(peak);
    }

    SyntheticEmissions out{EmissionsFile{EmissionMatrix{std::move(lp), vocab}, sample_rate,
                                         static_cast<std::int64_t>(T) * samples_per_frame, std::nullopt},
                           {}};
    std::size_t j = 0;
    for (const auto& word : pre.spoken_tokens) {
        const std::size_t start = leading_silence + j * frames_per_label;
        j += word.size();
        out.word_frames.emplace_back(start, leading_silence + j * frames_per_label);
        ++j;  // boundary label
    }
    return out;
}

}  // namespace cmtrace
