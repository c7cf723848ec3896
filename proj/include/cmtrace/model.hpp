#pragma once

#include <cstddef>
#include <cstdint>
#include <map>
#include <optional>
#include <set>
#include <span>
#include <string_view>
#include <utility>
#include <vector>

#include "cmtrace/matrix.hpp"
#include "cmtrace/vocab.hpp"

namespace cmtrace {

struct ModelConfig {
    std::size_t n_layers = 1;
    std::size_t d_model = 8;
    std::size_t n_heads = 1;
    std::size_t d_mlp = 16;
    VocabLayout vocab;
    std::size_t max_positions = 32;
    std::uint64_t rng_seed = 0;
    double norm_eps = 1e-6;

    std::size_t d_head() const noexcept { return d_model / n_heads; }
    void validate() const;
    bool operator==(const ModelConfig&) const = default;
};

// Patchable sites. embedding_out only exists at layer 0.
enum class ComponentKind { hidden_state, mlp_out, attn_out, embedding_out };

inline constexpr ComponentKind kAllKinds[] = {ComponentKind::hidden_state, ComponentKind::mlp_out,
                                              ComponentKind::attn_out, ComponentKind::embedding_out};

std::string_view to_string(ComponentKind kind);
ComponentKind parse_component_kind(std::string_view name);

struct ComponentRef {
    std::size_t layer = 0;
    ComponentKind kind = ComponentKind::hidden_state;
    std::size_t position = 0;

    auto operator<=>(const ComponentRef&) const = default;
};

// Activations recorded during one forward pass.
class ActivationCache {
public:
    void insert(const ComponentRef& ref, Vector value);
    const Vector& at(const ComponentRef& ref) const;
    bool contains(const ComponentRef& ref) const { return entries_.contains(ref); }
    std::size_t size() const noexcept { return entries_.size(); }
    const std::map<ComponentRef, Vector>& entries() const noexcept { return entries_; }

    bool operator==(const ActivationCache&) const = default;

private:
    std::map<ComponentRef, Vector> entries_;
};

struct Corruption {
    std::vector<std::size_t> positions;
    std::vector<Vector> noise;  // one vector per entry of positions
};

// Subject corruption plus activation patches for one forward pass.
struct InterventionPlan {
    std::optional<Corruption> corrupt;
    std::vector<std::pair<ComponentRef, Vector>> patches;

    bool empty() const noexcept { return !corrupt && patches.empty(); }
};

struct ForwardResult {
    Matrix logits;                      // positions x vocab
    Vector next_token_distribution;     // softmax of the final row
    std::optional<ActivationCache> cache;
};

struct LayerWeights {
    Vector attn_norm;  // d_model
    Matrix wq, wk, wv, wo;  // d_model x d_model
    Vector mlp_norm;   // d_model
    Matrix w_in;       // d_mlp x d_model
    Vector b_in;       // d_mlp
    Matrix w_out;      // d_model x d_mlp
    Vector b_out;      // d_model

    bool operator==(const LayerWeights&) const = default;
};

struct ModelWeights {
    Matrix token_embedding;     // vocab x d_model
    Matrix position_embedding;  // max_positions x d_model
    std::vector<LayerWeights> layers;
    Vector final_norm;          // d_model
    Matrix unembedding;         // vocab x d_model

    bool operator==(const ModelWeights&) const = default;
};

// Pre-norm decoder-only transformer:
//
//   e_p   = tok[x_p] + pos[p]                    (embedding_out)
//   a_l   = Attn_l(rms(h_{l-1}))                 (attn_out)
//   m_l   = Mlp_l(rms(h_{l-1} + a_l))            (mlp_out)
//   h_l   = h_{l-1} + a_l + m_l                  (hidden_state)
//   logit = U rms(h_{L-1})
//
// rms() is RMSNorm with a learned gain; attention is causal multi-head with
// no biases; the MLP is W_out relu(W_in x + b_in) + b_out. Immutable once
// constructed and safe to share between threads.
class Model {
public:
    Model(ModelConfig config, ModelWeights weights);

    const ModelConfig& config() const noexcept { return config_; }
    const ModelWeights& weights() const noexcept { return weights_; }
    const VocabLayout& vocab() const noexcept { return config_.vocab; }
    std::size_t vocab_size() const noexcept { return config_.vocab.size(); }

    // Standard deviation over all scalar entries of the token embedding table.
    double embedding_sigma() const noexcept { return embedding_sigma_; }

private:
    ModelConfig config_;
    ModelWeights weights_;
    double embedding_sigma_ = 0.0;
};

// Which activations a forward pass should record.
using CaptureSet = std::set<ComponentKind>;
CaptureSet capture_all();

ForwardResult forward(const Model& model, const TokenSequence& seq, const InterventionPlan& plan = {},
                      const CaptureSet& capture = {});

double target_probability(const ForwardResult& result, TokenId target);

struct Generation {
    std::vector<TokenId> tokens;  // generated ids, excluding any inserted marker
    bool inserted_text_marker = false;
    bool truncated = false;       // hit max_positions before max_new tokens
};

// Greedy decoding restricted to the text range. If the prompt ends inside a
// speech span a text marker is appended first.
Generation greedy_generate(const Model& model, const TokenSequence& seq, std::size_t max_new);

// Count of the cache entries one position contributes when capturing all kinds.
inline std::size_t cache_entries_per_position(const ModelConfig& c) { return 3 * c.n_layers + 1; }

}  // namespace cmtrace
