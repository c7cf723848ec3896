#pragma once
// Shared test helpers: random instance generators and independent oracles.
// Oracles deliberately avoid the library code paths they check.

#include <cstdint>
#include <filesystem>
#include <random>
#include <string>
#include <vector>

#include "cmtrace/aligner.hpp"
#include "cmtrace/builders.hpp"
#include "cmtrace/tracer.hpp"

namespace cmtrace::testing {

// Vocab used by the random-model tests: markers 0/1, text 2..33, speech 34..65.
VocabLayout small_vocab();
ModelConfig random_config(std::uint64_t seed, std::size_t n_layers = 4, std::size_t d_model = 64,
                          std::size_t n_heads = 4);

// Random text prompt "[T] w1 .. wn" with a random subject range and target.
TracePrompt random_text_prompt(std::mt19937_64& rng, const VocabLayout& vocab, std::size_t max_len,
                               std::string prompt_id);

// Copy of `model` whose speech ids mirror the text ids (speech.begin + i has
// the embedding and unembedding rows of text.begin + i) and whose speech
// marker mirrors the text marker.
Model mirror_speech_rows(const Model& model);

// The speech twin of a text prompt for a mirrored model: [S] units with an
// identity text_token_map.
TracePrompt speech_twin(const TracePrompt& text, const VocabLayout& vocab);

// --- CTC ------------------------------------------------------------------

// Random emission matrix with properly normalised rows.
EmissionMatrix random_emissions(std::mt19937_64& rng, std::size_t frames, const LabelVocab& vocab,
                                double logit_scale = 2.0);

struct BruteForceAlignment {
    double best = 0.0;
    std::vector<bool> advance;  // per frame, argmax path
    std::size_t optimal_paths = 0;  // paths within 1e-12 of best
};

// Enumerates every placement of N advances among T frames; staying emits blank.
BruteForceAlignment brute_force_alignment(const Matrix& log_probs, const std::vector<std::size_t>& labels,
                                          std::size_t blank);

// --- edit distance ----------------------------------------------------------

std::vector<std::string> oracle_words(const std::string& text);  // lower-case, space split
std::size_t oracle_edit_distance(const std::vector<std::string>& a, const std::vector<std::string>& b);

// --- misc -------------------------------------------------------------------

// Fresh empty directory under the system temp dir.
std::filesystem::path scratch_dir(const std::string& name);

// Relative path -> contents for every regular file below dir.
std::vector<std::pair<std::string, std::string>> read_tree(const std::filesystem::path& dir);

std::string read_file(const std::filesystem::path& path);

}  // namespace cmtrace::testing
