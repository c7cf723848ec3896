#include "cmtrace/tracer.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <exception>
#include <numeric>
#include <random>
#include <thread>

#include "cmtrace/error.hpp"
#include "hash.hpp"

namespace cmtrace {

std::string_view to_string(TokenBucket bucket) {
    switch (bucket) {
        case TokenBucket::first_subject: return "first_subject";
        case TokenBucket::middle_subject: return "middle_subject";
        case TokenBucket::last_subject: return "last_subject";
        case TokenBucket::first_subsequent: return "first_subsequent";
        case TokenBucket::further_tokens: return "further_tokens";
        case TokenBucket::last_token: return "last_token";
    }
    return "?";
}

TokenBucket parse_token_bucket(std::string_view name) {
    for (TokenBucket b : kAllBuckets)
        if (to_string(b) == name) return b;
    throw InvalidArgument("unknown token bucket '" + std::string(name) + "'");
}

std::optional<TokenBucket> bucket_of(std::size_t position, PositionRange subject, std::size_t last_position) {
    if (position > last_position) return std::nullopt;
    if (position == last_position) return TokenBucket::last_token;
    if (subject.contains(position)) {
        if (position + 1 == subject.end) return TokenBucket::last_subject;
        if (position == subject.begin) return TokenBucket::first_subject;
        return TokenBucket::middle_subject;
    }
    if (position == subject.end) return TokenBucket::first_subsequent;
    if (position > subject.end) return TokenBucket::further_tokens;
    return std::nullopt;
}

// ---------------------------------------------------------------------------
// Prompts

void TracePrompt::validate(const Model& model) const {
    const auto& vocab = model.vocab();
    clean_tokens.validate(vocab);
    if (clean_tokens.size() == 0) throw InvalidArgument("trace prompt '" + prompt_id + "': empty token sequence");
    if (targets.empty()) throw InvalidArgument("trace prompt '" + prompt_id + "': no target token");
    for (TokenId t : targets)
        if (t >= model.vocab_size()) throw IndexError("trace prompt '" + prompt_id + "': target out of vocab", t);
    if (subject_range.empty()) throw InvalidArgument("trace prompt '" + prompt_id + "': empty subject range");

    if (modality == Modality::text) {
        if (subject_range.end > clean_tokens.size())
            throw IndexError("trace prompt '" + prompt_id + "': subject range past end of sequence", subject_range.end);
        return;
    }
    if (text_token_map.empty())
        throw InvalidArgument("trace prompt '" + prompt_id + "': speech prompt without text_token_map");
    if (text_token_map.size() != clean_tokens.size())
        throw InvalidArgument("trace prompt '" + prompt_id + "': text_token_map length differs from sequence length");
    std::optional<std::size_t> prev;
    for (std::size_t p = 0; p < clean_tokens.size(); ++p) {
        const bool marker = vocab.is_marker(clean_tokens.ids[p]);
        const auto& image = text_token_map[p];
        if (marker) {
            if (image) throw IndexError("trace prompt '" + prompt_id + "': marker mapped to a text token", p);
            continue;
        }
        if (!image) throw IndexError("trace prompt '" + prompt_id + "': speech token without text mapping", p);
        if (prev && *image < *prev)
            throw IndexError("trace prompt '" + prompt_id + "': text_token_map is not monotone", p);
        prev = image;
    }
    if (!prev) throw InvalidArgument("trace prompt '" + prompt_id + "': no speech tokens");
    if (subject_range.end > *prev + 1)
        throw IndexError("trace prompt '" + prompt_id + "': subject range past the last text token", subject_range.end);
}

std::vector<std::size_t> TracePrompt::corrupted_positions() const {
    std::vector<std::size_t> out;
    for (std::size_t p = 0; p < clean_tokens.size(); ++p) {
        if (modality == Modality::text) {
            if (subject_range.contains(p)) out.push_back(p);
        } else if (p < text_token_map.size() && text_token_map[p] && subject_range.contains(*text_token_map[p])) {
            out.push_back(p);
        }
    }
    return out;
}

// ---------------------------------------------------------------------------
// Runs

CorruptionSpec CorruptionSpec::for_model(const Model& model, double noise_scale, std::uint64_t seed) {
    if (!(noise_scale >= 0.0)) throw InvalidArgument("noise scale must be non-negative");
    return CorruptionSpec{noise_scale, model.embedding_sigma(), seed};
}

Vector noise_vector(const CorruptionSpec& spec, std::string_view prompt_id, std::size_t position, std::size_t d_model) {
    const std::uint64_t id_hash = detail::fnv1a(prompt_id);
    const std::uint64_t pos = position;
    std::seed_seq seq{static_cast<std::uint32_t>(spec.seed), static_cast<std::uint32_t>(spec.seed >> 32),
                      static_cast<std::uint32_t>(id_hash),   static_cast<std::uint32_t>(id_hash >> 32),
                      static_cast<std::uint32_t>(pos),       static_cast<std::uint32_t>(pos >> 32)};
    std::mt19937_64 rng(seq);
    std::normal_distribution<double> unit(0.0, 1.0);
    const double scale = spec.noise_scale * spec.sigma;
    Vector v(d_model);
    for (double& x : v) x = scale * unit(rng);
    return v;
}

Corruption make_corruption(const Model& model, const TracePrompt& prompt, const CorruptionSpec& spec) {
    Corruption c;
    c.positions = prompt.corrupted_positions();
    for (std::size_t p : c.positions) c.noise.push_back(noise_vector(spec, prompt.prompt_id, p, model.config().d_model));
    return c;
}

namespace {

// Prompt plus teacher-forced object tokens (all but the last) in joint mode.
TokenSequence scoring_sequence(const TracePrompt& prompt, TargetMode mode) {
    TokenSequence seq = prompt.clean_tokens;
    if (mode == TargetMode::joint) {
        for (std::size_t i = 0; i + 1 < prompt.targets.size(); ++i) {
            seq.ids.push_back(prompt.targets[i]);
            seq.spans.back().end = seq.ids.size();
        }
    }
    return seq;
}

double row_probability(const Matrix& logits, std::size_t row, TokenId target) {
    const auto r = logits.row(row);
    const double mx = *std::max_element(r.begin(), r.end());
    double sum = 0.0;
    for (double x : r) sum += std::exp(x - mx);
    return std::exp(r[target] - mx) / sum;
}

double score(const ForwardResult& result, const TracePrompt& prompt, TargetMode mode) {
    if (mode == TargetMode::first_token || prompt.targets.size() == 1) return target_probability(result, prompt.target());
    const std::size_t first_row = prompt.clean_tokens.size() - 1;
    double p = 1.0;
    for (std::size_t i = 0; i < prompt.targets.size(); ++i)
        p *= row_probability(result.logits, first_row + i, prompt.targets[i]);
    return p;
}

double run_with(const Model& model, const TokenSequence& seq, const TracePrompt& prompt, TargetMode mode,
                InterventionPlan plan) {
    return score(forward(model, seq, plan), prompt, mode);
}

InterventionPlan restoration_plan(const Corruption& corruption, const ActivationCache& cache,
                                  std::span<const ComponentRef> sites) {
    InterventionPlan plan;
    plan.corrupt = corruption;
    plan.patches.reserve(sites.size());
    for (const auto& s : sites) plan.patches.emplace_back(s, cache.at(s));
    return plan;
}

}  // namespace

CleanRun clean_run(const Model& model, const TracePrompt& prompt, TargetMode mode) {
    prompt.validate(model);
    ForwardResult r = forward(model, scoring_sequence(prompt, mode), {}, capture_all());
    CleanRun out;
    out.p_clean = score(r, prompt, mode);
    out.cache = std::move(*r.cache);
    return out;
}

double corrupted_run(const Model& model, const TracePrompt& prompt, const CorruptionSpec& spec, TargetMode mode) {
    prompt.validate(model);
    InterventionPlan plan;
    plan.corrupt = make_corruption(model, prompt, spec);
    return run_with(model, scoring_sequence(prompt, mode), prompt, mode, std::move(plan));
}

double restored_run(const Model& model, const TracePrompt& prompt, const CorruptionSpec& spec,
                    const ActivationCache& clean_cache, std::span<const ComponentRef> sites, TargetMode mode) {
    prompt.validate(model);
    for (const auto& s : sites)
        if (s.position >= prompt.clean_tokens.size()) throw IndexError("restoration site past end of prompt", s.position);
    return run_with(model, scoring_sequence(prompt, mode), prompt, mode,
                    restoration_plan(make_corruption(model, prompt, spec), clean_cache, sites));
}

std::vector<ComponentRef> window_sites(std::size_t center_layer, ComponentKind kind, std::size_t window,
                                       std::size_t n_layers, std::size_t position) {
    if (window == 0 || window % 2 == 0) throw InvalidArgument("window must be odd and >= 1, got " + std::to_string(window));
    if (center_layer >= n_layers) throw IndexError("window center layer out of range", center_layer);
    const std::size_t half = window / 2;
    const std::size_t lo = center_layer >= half ? center_layer - half : 0;
    const std::size_t hi = std::min(n_layers - 1, center_layer + half);
    std::vector<ComponentRef> out;
    for (std::size_t l = lo; l <= hi; ++l) out.push_back({l, kind, position});
    return out;
}

std::size_t scan_layers(const ModelConfig& config, ComponentKind kind) {
    return kind == ComponentKind::embedding_out ? 1 : config.n_layers;
}

// ---------------------------------------------------------------------------
// Site scan and bucketing

namespace {

struct TextGroup {
    std::size_t text_position;
    std::vector<std::size_t> positions;  // sequence positions, ascending
};

// Sequence positions grouped by the text position they stand for, in text order.
std::vector<TextGroup> text_groups(const TracePrompt& prompt, const VocabLayout& vocab) {
    std::vector<TextGroup> groups;
    for (std::size_t p = 0; p < prompt.clean_tokens.size(); ++p) {
        if (vocab.is_marker(prompt.clean_tokens.ids[p])) continue;
        const std::size_t t = prompt.modality == Modality::text ? p : *prompt.text_token_map[p];
        if (groups.empty() || groups.back().text_position != t) groups.push_back({t, {}});
        groups.back().positions.push_back(p);
    }
    return groups;
}

}  // namespace

TraceResult trace_prompt(const Model& model, const TracePrompt& prompt, const CorruptionSpec& spec, ComponentKind kind,
                         std::size_t window, TargetMode mode) {
    const CleanRun clean = clean_run(model, prompt, mode);
    const TokenSequence seq = scoring_sequence(prompt, mode);
    const Corruption corruption = make_corruption(model, prompt, spec);

    TraceResult result;
    result.prompt_id = prompt.prompt_id;
    result.kind = kind;
    result.window = window;
    result.p_clean = clean.p_clean;
    {
        InterventionPlan plan;
        plan.corrupt = corruption;
        result.p_corrupt = run_with(model, seq, prompt, mode, std::move(plan));
    }

    const std::size_t n_layers = scan_layers(model.config(), kind);
    const std::size_t n_pos = prompt.clean_tokens.size();
    result.raw_ie = Matrix(n_layers, n_pos);
    for (std::size_t layer = 0; layer < n_layers; ++layer) {
        for (std::size_t p = 0; p < n_pos; ++p) {
            const auto sites = window_sites(layer, kind, window, n_layers, p);
            const double restored =
                run_with(model, seq, prompt, mode, restoration_plan(corruption, clean.cache, sites));
            result.raw_ie(layer, p) = indirect_effect(restored, result.p_corrupt);
        }
    }

    const auto groups = text_groups(prompt, model.vocab());
    const std::size_t last_text = groups.empty() ? 0 : groups.back().text_position;
    result.buckets.resize(n_layers);
    for (std::size_t layer = 0; layer < n_layers; ++layer) {
        std::array<double, kBucketCount> sum{};
        std::array<std::size_t, kBucketCount> n_groups{}, n_raw{};
        for (const auto& g : groups) {
            const auto bucket = bucket_of(g.text_position, prompt.subject_range, last_text);
            if (!bucket) continue;
            double group_sum = 0.0;
            for (std::size_t p : g.positions) group_sum += result.raw_ie(layer, p);
            const auto b = static_cast<std::size_t>(*bucket);
            sum[b] += group_sum / static_cast<double>(g.positions.size());
            n_groups[b] += 1;
            n_raw[b] += g.positions.size();
        }
        for (std::size_t b = 0; b < kBucketCount; ++b)
            if (n_groups[b] > 0) result.buckets[layer][b] = BucketValue{sum[b] / static_cast<double>(n_groups[b]), n_raw[b]};
    }
    return result;
}

std::vector<TraceResult> trace_prompts(const Model& model, std::span<const TracePrompt> prompts,
                                       const CorruptionSpec& spec, ComponentKind kind, std::size_t window,
                                       TargetMode mode, std::size_t jobs) {
    std::vector<TraceResult> results(prompts.size());
    std::vector<std::exception_ptr> errors(prompts.size());
    std::atomic<std::size_t> next{0};
    const auto worker = [&] {
        for (std::size_t i = next++; i < prompts.size(); i = next++) {
            try {
                results[i] = trace_prompt(model, prompts[i], spec, kind, window, mode);
            } catch (...) {
                errors[i] = std::current_exception();
            }
        }
    };
    const std::size_t width = std::clamp<std::size_t>(jobs, 1, std::max<std::size_t>(prompts.size(), 1));
    if (width == 1) {
        worker();
    } else {
        std::vector<std::jthread> pool;
        for (std::size_t t = 0; t < width; ++t) pool.emplace_back(worker);
    }
    for (auto& e : errors)
        if (e) std::rethrow_exception(e);
    return results;
}

// ---------------------------------------------------------------------------
// Averaging

double log_aie(double value) { return std::log10(std::max(value, kLogFloor)); }

std::optional<double> AieGrid::value(TokenBucket bucket, std::size_t layer) const {
    for (std::size_t r = 0; r < buckets.size(); ++r)
        if (buckets[r] == bucket) return values.at(r).at(layer);
    return std::nullopt;
}

AieGrid average_grids(std::span<const TraceResult> results, const CorruptionSpec& spec) {
    if (results.empty()) throw InvalidArgument("average_grids: no trace results");
    const auto& first = results.front();
    for (const auto& r : results) {
        if (r.kind != first.kind || r.window != first.window || r.n_layers() != first.n_layers())
            throw InvalidArgument("average_grids: results disagree on kind, window or layer count (prompt '" +
                                  r.prompt_id + "')");
    }
    std::vector<std::size_t> order(results.size());
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(),
                     [&](std::size_t a, std::size_t b) { return results[a].prompt_id < results[b].prompt_id; });

    AieGrid grid;
    grid.kind = first.kind;
    grid.window = first.window;
    grid.n_layers = first.n_layers();
    grid.buckets.assign(kAllBuckets.begin(), kAllBuckets.end());
    grid.total_prompts = results.size();
    grid.noise_scale = spec.noise_scale;
    grid.sigma = spec.sigma;
    grid.seed = spec.seed;
    grid.values.assign(kBucketCount, std::vector<std::optional<double>>(grid.n_layers));
    grid.log_values = grid.values;
    grid.n_prompts.assign(kBucketCount, std::vector<std::size_t>(grid.n_layers, 0));

    for (std::size_t b = 0; b < kBucketCount; ++b) {
        for (std::size_t l = 0; l < grid.n_layers; ++l) {
            double sum = 0.0;
            std::size_t n = 0;
            for (std::size_t i : order) {
                if (const auto& cell = results[i].buckets[l][b]) {
                    sum += cell->ie_mean;
                    ++n;
                }
            }
            grid.n_prompts[b][l] = n;
            if (n == 0) continue;
            const double mean = sum / static_cast<double>(n);
            grid.values[b][l] = mean;
            grid.log_values[b][l] = log_aie(mean);
        }
    }
    return grid;
}

}  // namespace cmtrace
