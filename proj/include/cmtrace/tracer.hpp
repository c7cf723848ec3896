#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "cmtrace/model.hpp"

namespace cmtrace {

// Positional roles used to aggregate indirect effects across prompts.
enum class TokenBucket { first_subject, middle_subject, last_subject, first_subsequent, further_tokens, last_token };

inline constexpr std::size_t kBucketCount = 6;
inline constexpr std::array<TokenBucket, kBucketCount> kAllBuckets = {
    TokenBucket::first_subject,    TokenBucket::middle_subject, TokenBucket::last_subject,
    TokenBucket::first_subsequent, TokenBucket::further_tokens, TokenBucket::last_token};

std::string_view to_string(TokenBucket bucket);
TokenBucket parse_token_bucket(std::string_view name);

// Half-open interval of token positions.
struct PositionRange {
    std::size_t begin = 0;
    std::size_t end = 0;

    bool empty() const noexcept { return end <= begin; }
    bool contains(std::size_t p) const noexcept { return p >= begin && p < end; }
    bool operator==(const PositionRange&) const = default;
};

// Bucket of one (text-side) position. Markers and positions before the subject
// belong to no bucket. A single-token subject is its own last_subject; the last
// position is always last_token.
std::optional<TokenBucket> bucket_of(std::size_t position, PositionRange subject, std::size_t last_position);

struct TracePrompt {
    std::string prompt_id;
    TokenSequence clean_tokens;
    // Sequence positions for text prompts; positions of the equivalent text
    // sequence for speech prompts.
    PositionRange subject_range;
    std::vector<TokenId> targets;  // targets.front() is the traced token o
    Modality modality = Modality::text;
    // Speech prompts only: sequence position -> text position, empty for markers.
    std::vector<std::optional<std::size_t>> text_token_map;

    TokenId target() const { return targets.front(); }
    void validate(const Model& model) const;

    // Sequence positions receiving noise in the corrupted run.
    std::vector<std::size_t> corrupted_positions() const;
};

// How the traced probability is scored when the object spans several tokens.
enum class TargetMode {
    first_token,  // P[o_1]
    joint,        // prod_i P[o_i | x, o_<i] with teacher forcing
};

struct CorruptionSpec {
    double noise_scale = 3.0;  // multiple of sigma
    double sigma = 0.0;
    std::uint64_t seed = 0;

    static CorruptionSpec for_model(const Model& model, double noise_scale, std::uint64_t seed);
};

// Gaussian noise with per-dimension std noise_scale * sigma. Deterministic in
// (seed, prompt_id, position).
Vector noise_vector(const CorruptionSpec& spec, std::string_view prompt_id, std::size_t position, std::size_t d_model);

Corruption make_corruption(const Model& model, const TracePrompt& prompt, const CorruptionSpec& spec);

struct CleanRun {
    double p_clean = 0.0;
    ActivationCache cache;
};

CleanRun clean_run(const Model& model, const TracePrompt& prompt, TargetMode mode = TargetMode::first_token);

double corrupted_run(const Model& model, const TracePrompt& prompt, const CorruptionSpec& spec,
                     TargetMode mode = TargetMode::first_token);

// Corrupts like corrupted_run and restores every site from the clean cache.
double restored_run(const Model& model, const TracePrompt& prompt, const CorruptionSpec& spec,
                    const ActivationCache& clean_cache, std::span<const ComponentRef> sites,
                    TargetMode mode = TargetMode::first_token);

inline double indirect_effect(double p_restored, double p_corrupt) { return p_restored - p_corrupt; }

// Layers [center - w/2, center + w/2] clipped to [0, n_layers).
std::vector<ComponentRef> window_sites(std::size_t center_layer, ComponentKind kind, std::size_t window,
                                       std::size_t n_layers, std::size_t position);

struct BucketValue {
    double ie_mean = 0.0;
    std::size_t raw_position_count = 0;
};

struct TraceResult {
    std::string prompt_id;
    ComponentKind kind = ComponentKind::mlp_out;
    std::size_t window = 1;
    double p_clean = 0.0;
    double p_corrupt = 0.0;
    Matrix raw_ie;  // layer x sequence position
    // buckets[layer][bucket]
    std::vector<std::array<std::optional<BucketValue>, kBucketCount>> buckets;

    std::size_t n_layers() const noexcept { return buckets.size(); }
};

// Number of layer rows a scan over `kind` covers (1 for embedding_out).
std::size_t scan_layers(const ModelConfig& config, ComponentKind kind);

// Full site scan for one component kind, folded into token buckets.
TraceResult trace_prompt(const Model& model, const TracePrompt& prompt, const CorruptionSpec& spec,
                         ComponentKind kind, std::size_t window, TargetMode mode = TargetMode::first_token);

// trace_prompt over many prompts on `jobs` worker threads; results keep input order.
std::vector<TraceResult> trace_prompts(const Model& model, std::span<const TracePrompt> prompts,
                                       const CorruptionSpec& spec, ComponentKind kind, std::size_t window,
                                       TargetMode mode = TargetMode::first_token, std::size_t jobs = 1);

inline constexpr double kLogFloor = 1e-8;

struct AieGrid {
    ComponentKind kind = ComponentKind::mlp_out;
    std::size_t window = 1;
    std::size_t n_layers = 0;
    std::vector<TokenBucket> buckets;  // row order, a subsequence of kAllBuckets
    // [bucket row][layer]; empty optional marks a cell no prompt populated
    std::vector<std::vector<std::optional<double>>> values;
    std::vector<std::vector<std::optional<double>>> log_values;
    std::vector<std::vector<std::size_t>> n_prompts;
    std::size_t total_prompts = 0;
    double noise_scale = 0.0;
    double sigma = 0.0;
    std::uint64_t seed = 0;

    std::optional<double> value(TokenBucket bucket, std::size_t layer) const;
};

double log_aie(double value);

// Cell-wise mean over prompts, summed in prompt_id order.
AieGrid average_grids(std::span<const TraceResult> results, const CorruptionSpec& spec);

}  // namespace cmtrace
