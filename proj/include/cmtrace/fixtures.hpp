#pragma once

#include <cstddef>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include <json.hpp>

#include "cmtrace/builders.hpp"
#include "cmtrace/emissions_io.hpp"
#include "cmtrace/tokenizer.hpp"

namespace cmtrace {

// Planted-fact model with a word table and a matching Known-style dataset:
// every prompt is "the <relation> of <subject> is" and the answer is the
// planted object.
struct PlantedBundle {
    PlantedFactModel planted;
    PlantedFactOptions options;
    std::vector<PlantedFact> facts;
    std::vector<std::string> words;
    nlohmann::ordered_json known;  // array of {known_id, prompt, subject, attribute}

    BimodalTokenizer tokenizer() const { return BimodalTokenizer(options.vocab, words); }
};

PlantedBundle make_planted_bundle(std::size_t n_layers = 6, std::size_t store_layer = 2);

// Peaky CTC-style emissions: each label of the preprocessed transcript owns
// frames_per_label frames, the label itself peaking on the first and blank on
// the rest; leading_silence blank frames come first.
struct SyntheticEmissions {
    EmissionsFile file;
    std::vector<std::pair<std::size_t, std::size_t>> word_frames;  // constructed [start, end) per spoken token
};

SyntheticEmissions make_synthetic_emissions(std::string_view transcript, const LabelVocab& vocab,
                                            std::size_t frames_per_label = 3, std::size_t leading_silence = 4,
                                            double peak = 0.9, std::int64_t sample_rate = 16000,
                                            std::int64_t samples_per_frame = 320);

}  // namespace cmtrace
