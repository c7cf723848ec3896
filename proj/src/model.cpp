#include "cmtrace/model.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "cmtrace/error.hpp"

namespace cmtrace {

void ModelConfig::validate() const {
    if (n_layers == 0 || d_model == 0 || n_heads == 0 || d_mlp == 0 || max_positions == 0)
        throw InvalidArgument("model config: all counts must be >= 1");
    if (d_model % n_heads != 0)
        throw InvalidArgument("model config: d_model (" + std::to_string(d_model) + ") not divisible by n_heads (" +
                              std::to_string(n_heads) + ")");
    if (!(norm_eps > 0.0)) throw InvalidArgument("model config: norm_eps must be positive");
    vocab.validate();
}

std::string_view to_string(ComponentKind kind) {
    switch (kind) {
        case ComponentKind::hidden_state: return "hidden_state";
        case ComponentKind::mlp_out: return "mlp_out";
        case ComponentKind::attn_out: return "attn_out";
        case ComponentKind::embedding_out: return "embedding_out";
    }
    return "?";
}

ComponentKind parse_component_kind(std::string_view name) {
    for (ComponentKind k : kAllKinds)
        if (to_string(k) == name) return k;
    if (name == "hidden" || name == "resid") return ComponentKind::hidden_state;
    if (name == "mlp") return ComponentKind::mlp_out;
    if (name == "attn") return ComponentKind::attn_out;
    if (name == "embed") return ComponentKind::embedding_out;
    throw InvalidArgument("unknown component kind '" + std::string(name) + "'");
}

void ActivationCache::insert(const ComponentRef& ref, Vector value) { entries_.insert_or_assign(ref, std::move(value)); }

const Vector& ActivationCache::at(const ComponentRef& ref) const {
    auto it = entries_.find(ref);
    if (it == entries_.end())
        throw IndexError("activation cache has no entry for " + std::string(to_string(ref.kind)) + " layer " +
                             std::to_string(ref.layer),
                         ref.position);
    return it->second;
}

CaptureSet capture_all() { return {std::begin(kAllKinds), std::end(kAllKinds)}; }

namespace {

void check_shape(const Matrix& m, std::size_t rows, std::size_t cols, const char* name) {
    if (m.rows() != rows || m.cols() != cols)
        throw InvalidArgument(std::string("weights: ") + name + " has shape " + std::to_string(m.rows()) + "x" +
                              std::to_string(m.cols()) + ", expected " + std::to_string(rows) + "x" +
                              std::to_string(cols));
}

void check_len(const Vector& v, std::size_t n, const char* name) {
    if (v.size() != n)
        throw InvalidArgument(std::string("weights: ") + name + " has length " + std::to_string(v.size()) +
                              ", expected " + std::to_string(n));
}

double population_stddev(std::span<const double> xs) {
    if (xs.empty()) return 0.0;
    double mean = 0.0;
    for (double x : xs) mean += x;
    mean /= static_cast<double>(xs.size());
    double var = 0.0;
    for (double x : xs) var += (x - mean) * (x - mean);
    return std::sqrt(var / static_cast<double>(xs.size()));
}

}  // namespace

Model::Model(ModelConfig config, ModelWeights weights) : config_(std::move(config)), weights_(std::move(weights)) {
    config_.validate();
    const std::size_t d = config_.d_model, v = config_.vocab.size();
    check_shape(weights_.token_embedding, v, d, "token_embedding");
    check_shape(weights_.position_embedding, config_.max_positions, d, "position_embedding");
    if (weights_.layers.size() != config_.n_layers)
        throw InvalidArgument("weights: expected " + std::to_string(config_.n_layers) + " layers, got " +
                              std::to_string(weights_.layers.size()));
    for (const auto& l : weights_.layers) {
        check_len(l.attn_norm, d, "attn_norm");
        check_shape(l.wq, d, d, "wq");
        check_shape(l.wk, d, d, "wk");
        check_shape(l.wv, d, d, "wv");
        check_shape(l.wo, d, d, "wo");
        check_len(l.mlp_norm, d, "mlp_norm");
        check_shape(l.w_in, config_.d_mlp, d, "w_in");
        check_len(l.b_in, config_.d_mlp, "b_in");
        check_shape(l.w_out, d, config_.d_mlp, "w_out");
        check_len(l.b_out, d, "b_out");
    }
    check_len(weights_.final_norm, d, "final_norm");
    check_shape(weights_.unembedding, v, d, "unembedding");
    embedding_sigma_ = population_stddev(weights_.token_embedding.flat());
}

// ---------------------------------------------------------------------------
// Forward pass

namespace {

void rms_norm(std::span<const double> x, std::span<const double> gain, double eps, std::span<double> out) {
    double ss = 0.0;
    for (double v : x) ss += v * v;
    const double inv = 1.0 / std::sqrt(ss / static_cast<double>(x.size()) + eps);
    for (std::size_t i = 0; i < x.size(); ++i) out[i] = x[i] * inv * gain[i];
}

void softmax_inplace(std::span<double> xs) {
    const double mx = *std::max_element(xs.begin(), xs.end());
    double sum = 0.0;
    for (double& x : xs) {
        x = std::exp(x - mx);
        sum += x;
    }
    for (double& x : xs) x /= sum;
}

class PatchTable {
public:
    PatchTable(const Model& model, const TokenSequence& seq, const InterventionPlan& plan) {
        const auto& cfg = model.config();
        for (const auto& [ref, value] : plan.patches) {
            const std::size_t layers = ref.kind == ComponentKind::embedding_out ? 1 : cfg.n_layers;
            if (ref.layer >= layers)
                throw IndexError("patch layer out of range for " + std::string(to_string(ref.kind)), ref.layer);
            if (ref.position >= seq.size()) throw IndexError("patch position out of range", ref.position);
            if (value.size() != cfg.d_model)
                throw InvalidArgument("patch vector has length " + std::to_string(value.size()) + ", expected " +
                                      std::to_string(cfg.d_model));
            if (!patches_.emplace(ref, &value).second)
                throw InvalidArgument("duplicate patch for " + std::string(to_string(ref.kind)) + " layer " +
                                      std::to_string(ref.layer) + " position " + std::to_string(ref.position));
        }
    }

    // Overwrites rows of `acts` patched at (layer, kind).
    void apply(ComponentKind kind, std::size_t layer, Matrix& acts) const {
        if (patches_.empty()) return;
        auto it = patches_.lower_bound(ComponentRef{layer, kind, 0});
        for (; it != patches_.end() && it->first.layer == layer && it->first.kind == kind; ++it) {
            auto row = acts.row(it->first.position);
            std::copy(it->second->begin(), it->second->end(), row.begin());
        }
    }

private:
    std::map<ComponentRef, const Vector*> patches_;
};

void record(std::optional<ActivationCache>& cache, const CaptureSet& capture, ComponentKind kind, std::size_t layer,
            const Matrix& acts) {
    if (!cache || !capture.contains(kind)) return;
    for (std::size_t p = 0; p < acts.rows(); ++p) {
        const auto row = acts.row(p);
        cache->insert({layer, kind, p}, Vector(row.begin(), row.end()));
    }
}

void attention(const ModelConfig& cfg, const LayerWeights& w, const Matrix& x, Matrix& out) {
    const std::size_t n = x.rows(), d = cfg.d_model, dh = cfg.d_head();
    Matrix q(n, d), k(n, d), v(n, d), heads(n, d);
    for (std::size_t p = 0; p < n; ++p) {
        matvec(w.wq, x.row(p), q.row(p));
        matvec(w.wk, x.row(p), k.row(p));
        matvec(w.wv, x.row(p), v.row(p));
    }
    const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
    Vector scores(n);
    for (std::size_t h = 0; h < cfg.n_heads; ++h) {
        const std::size_t off = h * dh;
        for (std::size_t p = 0; p < n; ++p) {
            const std::span<double> s(scores.data(), p + 1);
            for (std::size_t j = 0; j <= p; ++j) {
                double dot = 0.0;
                for (std::size_t i = 0; i < dh; ++i) dot += q(p, off + i) * k(j, off + i);
                s[j] = dot * scale;
            }
            softmax_inplace(s);
            for (std::size_t i = 0; i < dh; ++i) {
                double acc = 0.0;
                for (std::size_t j = 0; j <= p; ++j) acc += s[j] * v(j, off + i);
                heads(p, off + i) = acc;
            }
        }
    }
    for (std::size_t p = 0; p < n; ++p) matvec(w.wo, heads.row(p), out.row(p));
}

void mlp(const ModelConfig& cfg, const LayerWeights& w, const Matrix& x, Matrix& out) {
    Vector hidden(cfg.d_mlp);
    for (std::size_t p = 0; p < x.rows(); ++p) {
        matvec(w.w_in, x.row(p), hidden);
        for (std::size_t i = 0; i < hidden.size(); ++i) hidden[i] = std::max(0.0, hidden[i] + w.b_in[i]);
        auto o = out.row(p);
        matvec(w.w_out, hidden, o);
        for (std::size_t i = 0; i < o.size(); ++i) o[i] += w.b_out[i];
    }
}

}  // namespace

ForwardResult forward(const Model& model, const TokenSequence& seq, const InterventionPlan& plan,
                      const CaptureSet& capture) {
    const auto& cfg = model.config();
    const auto& W = model.weights();
    const std::size_t n = seq.size(), d = cfg.d_model, vocab = model.vocab_size();
    if (n == 0) throw InvalidArgument("forward: empty token sequence");
    if (n > cfg.max_positions)
        throw IndexError("forward: sequence longer than max_positions (" + std::to_string(cfg.max_positions) + ")", n);
    for (std::size_t p = 0; p < n; ++p)
        if (seq.ids[p] >= vocab)
            throw IndexError("forward: token id " + std::to_string(seq.ids[p]) + " out of range at position " +
                                 std::to_string(p),
                             seq.ids[p]);

    const PatchTable patches(model, seq, plan);
    std::optional<ActivationCache> cache;
    if (!capture.empty()) cache.emplace();

    Matrix h(n, d);
    for (std::size_t p = 0; p < n; ++p) {
        const auto te = W.token_embedding.row(seq.ids[p]);
        const auto pe = W.position_embedding.row(p);
        auto row = h.row(p);
        for (std::size_t i = 0; i < d; ++i) row[i] = te[i] + pe[i];
    }
    if (plan.corrupt) {
        const auto& c = *plan.corrupt;
        if (c.noise.size() != c.positions.size())
            throw InvalidArgument("corruption: one noise vector per position required");
        for (std::size_t i = 0; i < c.positions.size(); ++i) {
            const std::size_t p = c.positions[i];
            if (p >= n) throw IndexError("corruption position out of range", p);
            if (c.noise[i].size() != d) throw InvalidArgument("corruption: noise vector length != d_model");
            auto row = h.row(p);
            for (std::size_t j = 0; j < d; ++j) row[j] += c.noise[i][j];
        }
    }
    patches.apply(ComponentKind::embedding_out, 0, h);
    record(cache, capture, ComponentKind::embedding_out, 0, h);

    Matrix normed(n, d), sub(n, d);
    for (std::size_t l = 0; l < cfg.n_layers; ++l) {
        const auto& lw = W.layers[l];
        for (std::size_t p = 0; p < n; ++p) rms_norm(h.row(p), lw.attn_norm, cfg.norm_eps, normed.row(p));
        attention(cfg, lw, normed, sub);
        patches.apply(ComponentKind::attn_out, l, sub);
        record(cache, capture, ComponentKind::attn_out, l, sub);
        for (std::size_t i = 0; i < h.size(); ++i) h.flat()[i] += sub.flat()[i];

        for (std::size_t p = 0; p < n; ++p) rms_norm(h.row(p), lw.mlp_norm, cfg.norm_eps, normed.row(p));
        mlp(cfg, lw, normed, sub);
        patches.apply(ComponentKind::mlp_out, l, sub);
        record(cache, capture, ComponentKind::mlp_out, l, sub);
        for (std::size_t i = 0; i < h.size(); ++i) h.flat()[i] += sub.flat()[i];

        patches.apply(ComponentKind::hidden_state, l, h);
        record(cache, capture, ComponentKind::hidden_state, l, h);
    }

    ForwardResult result;
    result.logits = Matrix(n, vocab);
    Vector final_normed(d);
    for (std::size_t p = 0; p < n; ++p) {
        rms_norm(h.row(p), W.final_norm, cfg.norm_eps, final_normed);
        matvec(W.unembedding, final_normed, result.logits.row(p));
    }
    const auto last = result.logits.row(n - 1);
    result.next_token_distribution.assign(last.begin(), last.end());
    softmax_inplace(result.next_token_distribution);
    result.cache = std::move(cache);
    return result;
}

double target_probability(const ForwardResult& result, TokenId target) {
    if (target >= result.next_token_distribution.size()) throw IndexError("target token out of vocab range", target);
    return result.next_token_distribution[target];
}

Generation greedy_generate(const Model& model, const TokenSequence& seq, std::size_t max_new) {
    if (max_new == 0) throw InvalidArgument("greedy_generate: max_new must be >= 1");
    const auto& vocab = model.vocab();
    Generation gen;
    TokenSequence cur = seq;
    if (cur.trailing_modality() != Modality::text) {
        cur.push_back(vocab.text_marker, vocab);
        gen.inserted_text_marker = true;
    }
    for (std::size_t i = 0; i < max_new; ++i) {
        if (cur.size() > model.config().max_positions) {
            gen.truncated = true;
            break;
        }
        const ForwardResult r = forward(model, cur);
        const auto& dist = r.next_token_distribution;
        TokenId best = vocab.text.begin;
        for (TokenId t = vocab.text.begin; t < vocab.text.end; ++t)
            if (dist[t] > dist[best]) best = t;
        gen.tokens.push_back(best);
        cur.push_back(best, vocab);
    }
    return gen;
}

}  // namespace cmtrace
