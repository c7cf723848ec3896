#include "cmtrace/builders.hpp"

#include <cmath>
#include <random>
#include <set>
#include <string>

#include "cmtrace/error.hpp"

namespace cmtrace {

namespace {

class GaussianFiller {
public:
    explicit GaussianFiller(std::uint64_t seed) : rng_(seed) {}

    Matrix matrix(std::size_t rows, std::size_t cols, double stddev) {
        Matrix m(rows, cols);
        for (double& x : m.flat()) x = stddev * unit_(rng_);
        return m;
    }

    Vector vector(std::size_t n, double mean, double stddev) {
        Vector v(n);
        for (double& x : v) x = mean + stddev * unit_(rng_);
        return v;
    }

private:
    std::mt19937_64 rng_;
    std::normal_distribution<double> unit_{0.0, 1.0};
};

}  // namespace

Model build_random_model(const ModelConfig& config) {
    config.validate();
    const std::size_t d = config.d_model, v = config.vocab.size();
    const double proj = 1.0 / std::sqrt(static_cast<double>(d));
    const double down = 1.0 / std::sqrt(static_cast<double>(config.d_mlp));

    GaussianFiller fill(config.rng_seed);
    ModelWeights w;
    w.token_embedding = fill.matrix(v, d, 1.0);
    w.position_embedding = fill.matrix(config.max_positions, d, 0.5);
    for (std::size_t l = 0; l < config.n_layers; ++l) {
        LayerWeights lw;
        lw.attn_norm = fill.vector(d, 1.0, 0.1);
        lw.wq = fill.matrix(d, d, proj);
        lw.wk = fill.matrix(d, d, proj);
        lw.wv = fill.matrix(d, d, proj);
        lw.wo = fill.matrix(d, d, proj);
        lw.mlp_norm = fill.vector(d, 1.0, 0.1);
        lw.w_in = fill.matrix(config.d_mlp, d, proj);
        lw.b_in = fill.vector(config.d_mlp, 0.0, 0.02);
        lw.w_out = fill.matrix(d, config.d_mlp, down);
        lw.b_out = fill.vector(d, 0.0, 0.02);
        w.layers.push_back(std::move(lw));
    }
    w.final_norm = fill.vector(d, 1.0, 0.1);
    w.unembedding = fill.matrix(v, d, proj * 2.0);
    return Model(config, std::move(w));
}

PlantedFactModel build_planted_fact_model(const std::vector<PlantedFact>& facts, const PlantedFactOptions& opt) {
    opt.vocab.validate();
    if (facts.empty()) throw InvalidArgument("planted model: at least one fact required");
    if (opt.subject_index == 0 || opt.subject_index >= opt.template_len)
        throw IndexError("planted model: subject_index must lie in [1, template_len)", opt.subject_index);
    if (opt.store_layer + 1 >= opt.n_layers)
        throw IndexError("planted model: store_layer must leave a later layer for the copy attention",
                         opt.store_layer);
    std::set<TokenId> subjects;
    for (const auto& f : facts) {
        if (!opt.vocab.text.contains(f.subject)) throw IndexError("planted model: subject is not a text token", f.subject);
        if (!opt.vocab.text.contains(f.object)) throw IndexError("planted model: object is not a text token", f.object);
        if (!subjects.insert(f.subject).second) throw InvalidArgument("planted model: duplicate subject " + std::to_string(f.subject));
    }

    ModelConfig cfg;
    cfg.vocab = opt.vocab;
    cfg.n_layers = opt.n_layers;
    cfg.n_heads = 1;
    cfg.max_positions = opt.template_len + opt.extra_positions;
    const std::size_t v = cfg.vocab.size();
    const std::size_t d = v + cfg.max_positions;
    cfg.d_model = d;
    cfg.d_mlp = facts.size();
    cfg.validate();

    const auto pos_dim = [v](std::size_t p) { return v + p; };
    const double dd = static_cast<double>(d);
    const double g = opt.object_gain;
    // RMS of a clean embedding row (one token one-hot + one position one-hot).
    const double rms_embed = std::sqrt(2.0 / dd + cfg.norm_eps);
    // RMS at the subject position once the object direction has been written.
    const double rms_stored = std::sqrt((2.0 + g * g) / dd + cfg.norm_eps);

    ModelWeights w;
    w.token_embedding = Matrix(v, d);
    w.unembedding = Matrix(v, d);
    for (std::size_t t = 0; t < v; ++t) {
        w.token_embedding(t, t) = 1.0;
        w.unembedding(t, t) = opt.logit_scale;
    }
    w.position_embedding = Matrix(cfg.max_positions, d);
    for (std::size_t p = 0; p < cfg.max_positions; ++p) w.position_embedding(p, pos_dim(p)) = 1.0;
    w.final_norm = Vector(d, 1.0);

    const std::size_t copy_layer = opt.store_layer + 1;
    const std::size_t last = opt.template_len - 1;
    for (std::size_t l = 0; l < cfg.n_layers; ++l) {
        LayerWeights lw;
        lw.attn_norm = Vector(d, 1.0);
        lw.mlp_norm = Vector(d, 1.0);
        lw.wq = lw.wk = lw.wv = lw.wo = Matrix(d, d);
        lw.w_in = Matrix(cfg.d_mlp, d);
        lw.b_in = Vector(cfg.d_mlp, 0.0);
        lw.w_out = Matrix(d, cfg.d_mlp);
        lw.b_out = Vector(d, 0.0);

        if (l == opt.store_layer) {
            // Unit i sees 2/rms on a full (subject, position) match and at most
            // 1/rms on a half match; the bias keeps only the full match.
            const double fired = 0.5 / rms_embed;
            for (std::size_t i = 0; i < facts.size(); ++i) {
                lw.w_in(i, facts[i].subject) = 1.0;
                lw.w_in(i, pos_dim(opt.subject_index)) = 1.0;
                lw.b_in[i] = -1.5 / rms_embed;
                lw.w_out(facts[i].object, i) = g / fired;
            }
        }
        if (l == copy_layer) {
            // Score of the subject key from the last query is ~40; every other
            // key scores 0.
            const double target_score = 40.0;
            const double beta = std::sqrt(target_score * rms_embed * rms_stored * std::sqrt(dd));
            lw.wq(0, pos_dim(last)) = beta;
            lw.wk(0, pos_dim(opt.subject_index)) = beta;
            for (std::size_t t = 0; t < v; ++t) {
                lw.wv(t, t) = 1.0;
                lw.wo(t, t) = rms_stored;
            }
        }
        w.layers.push_back(std::move(lw));
    }

    return PlantedFactModel{Model(cfg, std::move(w)), ComponentRef{opt.store_layer, ComponentKind::mlp_out, opt.subject_index},
                            copy_layer};
}

}  // namespace cmtrace
