#include "support.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <fstream>
#include <limits>
#include <sstream>

#include <unistd.h>

namespace cmtrace::testing {

namespace fs = std::filesystem;

VocabLayout small_vocab() { return VocabLayout{{2, 34}, {34, 66}, 0, 1}; }

ModelConfig random_config(std::uint64_t seed, std::size_t n_layers, std::size_t d_model, std::size_t n_heads) {
    ModelConfig c;
    c.n_layers = n_layers;
    c.d_model = d_model;
    c.n_heads = n_heads;
    c.d_mlp = 2 * d_model;
    c.vocab = small_vocab();
    c.max_positions = 24;
    c.rng_seed = seed;
    return c;
}

TracePrompt random_text_prompt(std::mt19937_64& rng, const VocabLayout& vocab, std::size_t max_len,
                               std::string prompt_id) {
    std::uniform_int_distribution<std::size_t> len_dist(2, max_len);
    std::uniform_int_distribution<TokenId> tok(vocab.text.begin, vocab.text.end - 1);
    const std::size_t n = len_dist(rng);  // words after the marker
    std::vector<TokenId> ids{vocab.text_marker};
    for (std::size_t i = 0; i < n; ++i) ids.push_back(tok(rng));
    const std::size_t begin = std::uniform_int_distribution<std::size_t>(1, n)(rng);
    const std::size_t end = std::uniform_int_distribution<std::size_t>(begin + 1, std::min(n + 1, begin + 3))(rng);

    TracePrompt p;
    p.prompt_id = std::move(prompt_id);
    p.clean_tokens = TokenSequence::from_ids(ids, vocab);
    p.subject_range = {begin, end};
    p.targets = {tok(rng)};
    return p;
}

Model mirror_speech_rows(const Model& model) {
    ModelWeights w = model.weights();
    const auto& v = model.vocab();
    auto copy_row = [](Matrix& m, std::size_t dst, std::size_t src) {
        for (std::size_t c = 0; c < m.cols(); ++c) m(dst, c) = m(src, c);
    };
    for (TokenId i = 0; i < v.speech.size() && i < v.text.size(); ++i) {
        copy_row(w.token_embedding, v.speech.begin + i, v.text.begin + i);
        copy_row(w.unembedding, v.speech.begin + i, v.text.begin + i);
    }
    copy_row(w.token_embedding, v.speech_marker, v.text_marker);
    copy_row(w.unembedding, v.speech_marker, v.text_marker);
    return Model(model.config(), std::move(w));
}

TracePrompt speech_twin(const TracePrompt& text, const VocabLayout& vocab) {
    std::vector<TokenId> ids{vocab.speech_marker};
    std::vector<std::optional<std::size_t>> map{std::nullopt};
    for (std::size_t i = 1; i < text.clean_tokens.size(); ++i) {
        ids.push_back(text.clean_tokens.ids[i] - vocab.text.begin + vocab.speech.begin);
        map.push_back(i);
    }
    TracePrompt s = text;
    s.clean_tokens = TokenSequence::from_ids(ids, vocab);
    s.modality = Modality::speech;
    s.text_token_map = std::move(map);
    return s;
}

EmissionMatrix random_emissions(std::mt19937_64& rng, std::size_t frames, const LabelVocab& vocab,
                                double logit_scale) {
    std::normal_distribution<double> n(0.0, logit_scale);
    Matrix lp(frames, vocab.size());
    for (std::size_t t = 0; t < frames; ++t) {
        double mx = -std::numeric_limits<double>::infinity();
        for (std::size_t c = 0; c < vocab.size(); ++c) {
            lp(t, c) = n(rng);
            mx = std::max(mx, lp(t, c));
        }
        double z = 0.0;
        for (std::size_t c = 0; c < vocab.size(); ++c) z += std::exp(lp(t, c) - mx);
        const double lse = mx + std::log(z);
        for (std::size_t c = 0; c < vocab.size(); ++c) lp(t, c) -= lse;
    }
    return EmissionMatrix{std::move(lp), vocab};
}

BruteForceAlignment brute_force_alignment(const Matrix& log_probs, const std::vector<std::size_t>& labels,
                                          std::size_t blank) {
    const std::size_t T = log_probs.rows();
    const std::size_t N = labels.size();
    BruteForceAlignment out;
    out.best = -std::numeric_limits<double>::infinity();
    std::vector<double> scores;
    std::vector<std::uint32_t> masks;
    for (std::uint32_t mask = 0; mask < (1u << T); ++mask) {
        if (static_cast<std::size_t>(__builtin_popcount(mask)) != N) continue;
        double s = 0.0;
        std::size_t j = 0;
        for (std::size_t t = 0; t < T; ++t) {
            if (mask & (1u << t)) {
                s += log_probs(t, labels[j]);
                ++j;
            } else {
                s += log_probs(t, blank);
            }
        }
        scores.push_back(s);
        masks.push_back(mask);
        if (s > out.best) {
            out.best = s;
            out.advance.assign(T, false);
            for (std::size_t t = 0; t < T; ++t) out.advance[t] = (mask >> t) & 1u;
        }
    }
    for (double s : scores) out.optimal_paths += std::abs(s - out.best) <= 1e-12;
    return out;
}

std::vector<std::string> oracle_words(const std::string& text) {
    std::vector<std::string> words;
    std::istringstream in(text);
    std::string w;
    while (in >> w) {
        std::transform(w.begin(), w.end(), w.begin(), [](unsigned char c) { return std::tolower(c); });
        words.push_back(w);
    }
    return words;
}

std::size_t oracle_edit_distance(const std::vector<std::string>& a, const std::vector<std::string>& b) {
    std::vector<std::vector<std::size_t>> d(a.size() + 1, std::vector<std::size_t>(b.size() + 1, 0));
    for (std::size_t i = 0; i <= a.size(); ++i) d[i][0] = i;
    for (std::size_t j = 0; j <= b.size(); ++j) d[0][j] = j;
    for (std::size_t i = 1; i <= a.size(); ++i)
        for (std::size_t j = 1; j <= b.size(); ++j)
            d[i][j] = std::min({d[i - 1][j] + 1, d[i][j - 1] + 1, d[i - 1][j - 1] + (a[i - 1] == b[j - 1] ? 0 : 1)});
    return d[a.size()][b.size()];
}

fs::path scratch_dir(const std::string& name) {
    const fs::path p = fs::temp_directory_path() / ("cmtrace_test_" + name + "_" + std::to_string(::getpid()));
    fs::remove_all(p);
    fs::create_directories(p);
    return p;
}

std::string read_file(const fs::path& path) {
    std::ifstream in(path, std::ios::binary);
    std::ostringstream s;
    s << in.rdbuf();
    return s.str();
}

std::vector<std::pair<std::string, std::string>> read_tree(const fs::path& dir) {
    std::vector<std::pair<std::string, std::string>> files;
    for (const auto& e : fs::recursive_directory_iterator(dir))
        if (e.is_regular_file()) files.emplace_back(fs::relative(e.path(), dir).string(), read_file(e.path()));
    std::sort(files.begin(), files.end());
    return files;
}

}  // namespace cmtrace::testing
