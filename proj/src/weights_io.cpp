#include "cmtrace/weights_io.hpp"

#include <fstream>
#include <sstream>

#include "binary_io.hpp"
#include "cmtrace/error.hpp"

namespace cmtrace {

namespace {

constexpr const char* kMagic = "cmtrace-weights 1";
constexpr const char* kWhat = "weight file";
constexpr const char* kTensorOrder =
    "token_embedding position_embedding "
    "layers[attn_norm wq wk wv wo mlp_norm w_in b_in w_out b_out] final_norm unembedding";

// Visits every tensor in file order.
template <typename Weights, typename Fn>
void for_each_tensor(Weights& w, Fn&& fn) {
    fn(w.token_embedding.flat());
    fn(w.position_embedding.flat());
    for (auto& l : w.layers) {
        fn(std::span(l.attn_norm));
        fn(l.wq.flat());
        fn(l.wk.flat());
        fn(l.wv.flat());
        fn(l.wo.flat());
        fn(std::span(l.mlp_norm));
        fn(l.w_in.flat());
        fn(std::span(l.b_in));
        fn(l.w_out.flat());
        fn(std::span(l.b_out));
    }
    fn(std::span(w.final_norm));
    fn(w.unembedding.flat());
}

ModelWeights allocate(const ModelConfig& c) {
    const std::size_t d = c.d_model, v = c.vocab.size();
    ModelWeights w;
    w.token_embedding = Matrix(v, d);
    w.position_embedding = Matrix(c.max_positions, d);
    for (std::size_t l = 0; l < c.n_layers; ++l) {
        LayerWeights lw;
        lw.attn_norm = Vector(d);
        lw.wq = lw.wk = lw.wv = lw.wo = Matrix(d, d);
        lw.mlp_norm = Vector(d);
        lw.w_in = Matrix(c.d_mlp, d);
        lw.b_in = Vector(c.d_mlp);
        lw.w_out = Matrix(d, c.d_mlp);
        lw.b_out = Vector(d);
        w.layers.push_back(std::move(lw));
    }
    w.final_norm = Vector(d);
    w.unembedding = Matrix(v, d);
    return w;
}

std::string format_eps(double eps) {
    std::ostringstream ss;
    ss.precision(17);
    ss << eps;
    return ss.str();
}

}  // namespace

std::size_t tensor_payload_bytes(const ModelConfig& c) {
    const std::size_t d = c.d_model, v = c.vocab.size();
    const std::size_t per_layer = d + 4 * d * d + d + c.d_mlp * d + c.d_mlp + d * c.d_mlp + d;
    return 8 * (v * d + c.max_positions * d + c.n_layers * per_layer + d + v * d);
}

void save_model(std::ostream& out, const Model& model, const std::vector<std::string>& text_words) {
    const auto& c = model.config();
    out << kMagic << '\n';
    out << "n_layers " << c.n_layers << '\n';
    out << "d_model " << c.d_model << '\n';
    out << "n_heads " << c.n_heads << '\n';
    out << "d_mlp " << c.d_mlp << '\n';
    out << "max_positions " << c.max_positions << '\n';
    out << "rng_seed " << c.rng_seed << '\n';
    out << "norm_eps " << format_eps(c.norm_eps) << '\n';
    out << "text_tokens " << c.vocab.text.begin << ' ' << c.vocab.text.end << '\n';
    out << "speech_tokens " << c.vocab.speech.begin << ' ' << c.vocab.speech.end << '\n';
    out << "text_marker " << c.vocab.text_marker << '\n';
    out << "speech_marker " << c.vocab.speech_marker << '\n';
    out << "tensor_order " << kTensorOrder << '\n';
    if (!text_words.empty()) {
        out << "text_words " << text_words.size();
        for (const auto& word : text_words) {
            if (word.empty() || word.find_first_of(" \t\n") != std::string::npos)
                throw InvalidArgument("text word '" + word + "' is empty or contains whitespace");
            out << ' ' << word;
        }
        out << '\n';
    }
    out << "tensor_bytes " << tensor_payload_bytes(c) << '\n';
    out << "end_header\n";
    for_each_tensor(model.weights(), [&](std::span<const double> t) { detail::write_f64_le(out, t); });
}

void save_model(const std::filesystem::path& path, const Model& model, const std::vector<std::string>& text_words) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw Error("cannot write " + path.string());
    save_model(out, model, text_words);
    if (!out) throw Error("write failed for " + path.string());
}

ModelBundle load_model(std::istream& in) {
    using detail::parse_header_number;
    const auto h = detail::read_text_header(in, kMagic, kWhat);
    const auto num = [&](const std::string& key) {
        return parse_header_number<std::size_t>(h.get(key, kWhat), key, kWhat);
    };
    const auto range = [&](const std::string& key) {
        std::istringstream ss(h.get(key, kWhat));
        TokenRange r;
        if (!(ss >> r.begin >> r.end)) throw FormatError(std::string(kWhat) + ": bad range for '" + key + "'");
        return r;
    };

    ModelConfig c;
    c.n_layers = num("n_layers");
    c.d_model = num("d_model");
    c.n_heads = num("n_heads");
    c.d_mlp = num("d_mlp");
    c.max_positions = num("max_positions");
    c.rng_seed = parse_header_number<std::uint64_t>(h.get("rng_seed", kWhat), "rng_seed", kWhat);
    c.norm_eps = parse_header_number<double>(h.get("norm_eps", kWhat), "norm_eps", kWhat);
    c.vocab.text = range("text_tokens");
    c.vocab.speech = range("speech_tokens");
    c.vocab.text_marker = static_cast<TokenId>(num("text_marker"));
    c.vocab.speech_marker = static_cast<TokenId>(num("speech_marker"));
    if (h.has("tensor_order") && h.get("tensor_order", kWhat) != kTensorOrder)
        throw FormatError(std::string(kWhat) + ": unsupported tensor_order");
    try {
        c.validate();
    } catch (const Error& e) {
        throw FormatError(std::string(kWhat) + ": " + e.what());
    }
    const std::size_t declared = num("tensor_bytes");
    const std::size_t expected = tensor_payload_bytes(c);
    if (declared != expected)
        throw FormatError(std::string(kWhat) + ": tensor_bytes " + std::to_string(declared) +
                          " does not match the declared config (" + std::to_string(expected) + ")");

    std::vector<std::string> words;
    if (h.has("text_words")) {
        std::istringstream ss(h.get("text_words", kWhat));
        std::size_t n = 0;
        ss >> n;
        std::string word;
        while (ss >> word) words.push_back(word);
        if (words.size() != n) throw FormatError(std::string(kWhat) + ": text_words count mismatch");
    }

    ModelWeights w = allocate(c);
    for_each_tensor(w, [&](std::span<double> t) { detail::read_f64_le(in, t, kWhat); });
    detail::expect_eof(in, kWhat);
    return ModelBundle{Model(std::move(c), std::move(w)), std::move(words)};
}

ModelBundle load_model(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw Error("cannot open " + path.string());
    return load_model(in);
}

}  // namespace cmtrace
