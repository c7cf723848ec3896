// Python bindings for the core operations. Grids and alignments cross the
// boundary as the same JSON documents the CLI writes.

#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include <sstream>

#include "cli.hpp"
#include "cmtrace/dataset.hpp"
#include "cmtrace/emissions_io.hpp"
#include "cmtrace/error.hpp"
#include "cmtrace/fixtures.hpp"
#include "cmtrace/report.hpp"
#include "cmtrace/tracer.hpp"
#include "cmtrace/weights_io.hpp"

namespace py = pybind11;
using namespace cmtrace;

namespace {

py::object from_json(const nlohmann::ordered_json& doc) { return py::module_::import("json").attr("loads")(doc.dump()); }

std::vector<std::vector<double>> to_lists(const Matrix& m) {
    std::vector<std::vector<double>> out(m.rows());
    for (std::size_t r = 0; r < m.rows(); ++r) out[r].assign(m.row(r).begin(), m.row(r).end());
    return out;
}

Rational as_rational(const py::object& v) {
    if (py::isinstance<py::str>(v)) return parse_rational(v.cast<std::string>());
    if (py::isinstance<py::int_>(v)) return Rational(v.cast<std::int64_t>());
    return parse_rational(py::str(v).cast<std::string>());
}

struct PyModel {
    std::shared_ptr<const Model> model;
    std::vector<std::string> words;
};

}  // namespace

PYBIND11_MODULE(_core, m) {
    m.doc() = "Causal tracing and CTC forced alignment";

    py::register_exception<Error>(m, "Error", PyExc_RuntimeError);
    py::register_exception<InvalidArgument>(m, "InvalidArgument", PyExc_ValueError);
    py::register_exception<IndexError>(m, "IndexError", PyExc_IndexError);
    py::register_exception<FormatError>(m, "FormatError", PyExc_ValueError);
    py::register_exception<InfeasibleAlignment>(m, "InfeasibleAlignment", PyExc_ValueError);

    py::class_<PyModel>(m, "Model")
        .def_property_readonly("n_layers", [](const PyModel& p) { return p.model->config().n_layers; })
        .def_property_readonly("d_model", [](const PyModel& p) { return p.model->config().d_model; })
        .def_property_readonly("vocab_size", [](const PyModel& p) { return p.model->vocab_size(); })
        .def_property_readonly("max_positions", [](const PyModel& p) { return p.model->config().max_positions; })
        .def_property_readonly("embedding_sigma", [](const PyModel& p) { return p.model->embedding_sigma(); })
        .def_property_readonly("text_range", [](const PyModel& p) {
            return std::pair(p.model->vocab().text.begin, p.model->vocab().text.end);
        })
        .def_property_readonly("speech_range", [](const PyModel& p) {
            return std::pair(p.model->vocab().speech.begin, p.model->vocab().speech.end);
        })
        .def_property_readonly("text_marker", [](const PyModel& p) { return p.model->vocab().text_marker; })
        .def_property_readonly("speech_marker", [](const PyModel& p) { return p.model->vocab().speech_marker; })
        .def_readonly("words", &PyModel::words)
        .def("next_token_distribution",
             [](const PyModel& p, std::vector<TokenId> ids) {
                 return forward(*p.model, TokenSequence::from_ids(std::move(ids), p.model->vocab())).next_token_distribution;
             },
             py::arg("ids"))
        .def("logits",
             [](const PyModel& p, std::vector<TokenId> ids) {
                 return to_lists(forward(*p.model, TokenSequence::from_ids(std::move(ids), p.model->vocab())).logits);
             },
             py::arg("ids"))
        .def("generate",
             [](const PyModel& p, std::vector<TokenId> ids, std::size_t max_new) {
                 const auto g = greedy_generate(*p.model, TokenSequence::from_ids(std::move(ids), p.model->vocab()), max_new);
                 return py::make_tuple(g.tokens, g.truncated);
             },
             py::arg("ids"), py::arg("max_new") = 10)
        .def("encode_text",
             [](const PyModel& p, const std::string& text) {
                 return BimodalTokenizer(p.model->vocab(), p.words).encode_text(text).ids;
             },
             py::arg("text"))
        .def("save", [](const PyModel& p, const std::filesystem::path& path) { save_model(path, *p.model, p.words); },
             py::arg("path"));

    m.def("load_model",
          [](const std::filesystem::path& path) {
              auto b = load_model(path);
              return PyModel{std::make_shared<const Model>(std::move(b.model)), std::move(b.text_words)};
          },
          py::arg("path"));
    m.def("random_model",
          [](std::size_t n_layers, std::size_t d_model, std::size_t n_heads, std::size_t d_mlp, std::uint64_t seed,
             std::pair<TokenId, TokenId> text, std::pair<TokenId, TokenId> speech, TokenId text_marker,
             TokenId speech_marker, std::size_t max_positions) {
              ModelConfig c;
              c.n_layers = n_layers;
              c.d_model = d_model;
              c.n_heads = n_heads;
              c.d_mlp = d_mlp;
              c.rng_seed = seed;
              c.vocab = VocabLayout{{text.first, text.second}, {speech.first, speech.second}, text_marker, speech_marker};
              c.max_positions = max_positions;
              return PyModel{std::make_shared<const Model>(build_random_model(c)), {}};
          },
          py::arg("n_layers") = 4, py::arg("d_model") = 64, py::arg("n_heads") = 4, py::arg("d_mlp") = 128,
          py::arg("seed") = 0, py::arg("text") = std::pair<TokenId, TokenId>{2, 34},
          py::arg("speech") = std::pair<TokenId, TokenId>{34, 66}, py::arg("text_marker") = 0,
          py::arg("speech_marker") = 1, py::arg("max_positions") = 32);
    m.def("planted_fact_bundle",
          [](std::size_t n_layers, std::size_t store_layer) {
              auto b = make_planted_bundle(n_layers, store_layer);
              py::dict d;
              d["model"] = PyModel{std::make_shared<const Model>(b.planted.model), b.words};
              d["store_layer"] = b.options.store_layer;
              d["subject_index"] = b.options.subject_index;
              d["known"] = from_json(b.known);
              return d;
          },
          py::arg("n_layers") = 6, py::arg("store_layer") = 2);

    py::class_<TracePrompt>(m, "TracePrompt")
        .def(py::init([](const PyModel& model, std::string prompt_id, std::vector<TokenId> ids,
                         std::pair<std::size_t, std::size_t> subject, std::vector<TokenId> targets,
                         std::optional<std::vector<std::optional<std::size_t>>> text_token_map) {
                 TracePrompt p;
                 p.prompt_id = std::move(prompt_id);
                 p.clean_tokens = TokenSequence::from_ids(std::move(ids), model.model->vocab());
                 p.subject_range = {subject.first, subject.second};
                 p.targets = std::move(targets);
                 if (text_token_map) {
                     p.modality = Modality::speech;
                     p.text_token_map = std::move(*text_token_map);
                 }
                 p.validate(*model.model);
                 return p;
             }),
             py::arg("model"), py::arg("prompt_id"), py::arg("ids"), py::arg("subject"), py::arg("targets"),
             py::arg("text_token_map") = py::none())
        .def_readonly("prompt_id", &TracePrompt::prompt_id)
        .def_property_readonly("ids", [](const TracePrompt& p) { return p.clean_tokens.ids; })
        .def_property_readonly("corrupted_positions", &TracePrompt::corrupted_positions);

    py::class_<TraceResult>(m, "TraceResult")
        .def_readonly("prompt_id", &TraceResult::prompt_id)
        .def_readonly("p_clean", &TraceResult::p_clean)
        .def_readonly("p_corrupt", &TraceResult::p_corrupt)
        .def_readonly("window", &TraceResult::window)
        .def_property_readonly("kind", [](const TraceResult& r) { return std::string(to_string(r.kind)); })
        .def_property_readonly("raw_ie", [](const TraceResult& r) { return to_lists(r.raw_ie); })
        .def_property_readonly("buckets", [](const TraceResult& r) {
            // [layer] -> {bucket: mean IE} for populated buckets
            std::vector<std::map<std::string, double>> out(r.n_layers());
            for (std::size_t l = 0; l < r.n_layers(); ++l)
                for (std::size_t b = 0; b < kBucketCount; ++b)
                    if (r.buckets[l][b]) out[l][std::string(to_string(kAllBuckets[b]))] = r.buckets[l][b]->ie_mean;
            return out;
        });

    m.def("trace",
          [](const PyModel& model, const std::vector<TracePrompt>& prompts, const std::string& kind,
             std::optional<std::size_t> window, double noise_scale, std::uint64_t seed, bool joint, std::size_t jobs) {
              const auto k = parse_component_kind(kind);
              const std::size_t w = window.value_or(k == ComponentKind::mlp_out || k == ComponentKind::attn_out ? 5 : 1);
              const auto spec = CorruptionSpec::for_model(*model.model, noise_scale, seed);
              py::gil_scoped_release release;
              return trace_prompts(*model.model, prompts, spec, k, w, joint ? TargetMode::joint : TargetMode::first_token,
                                   jobs);
          },
          py::arg("model"), py::arg("prompts"), py::arg("kind") = "mlp_out", py::arg("window") = py::none(),
          py::arg("noise_scale") = 3.0, py::arg("seed") = 0, py::arg("joint") = false, py::arg("jobs") = 1);
    m.def("average_grids",
          [](const PyModel& model, const std::vector<TraceResult>& results, double noise_scale, std::uint64_t seed) {
              return from_json(grid_to_json(average_grids(results, CorruptionSpec::for_model(*model.model, noise_scale, seed))));
          },
          py::arg("model"), py::arg("results"), py::arg("noise_scale") = 3.0, py::arg("seed") = 0);
    m.def("window_layers",
          [](std::size_t center, std::size_t window, std::size_t n_layers) {
              std::vector<std::size_t> out;
              for (const auto& r : window_sites(center, ComponentKind::mlp_out, window, n_layers, 0)) out.push_back(r.layer);
              return out;
          },
          py::arg("center"), py::arg("window"), py::arg("n_layers"));

    // aligner
    m.def("preprocess_transcript",
          [](const std::string& raw) {
              const auto p = preprocess_transcript(raw, LabelVocab::english());
              return py::make_tuple(p.joined, p.spoken_tokens);
          },
          py::arg("raw"));
    m.def("align",
          [](const std::vector<std::vector<double>>& log_probs, const std::string& transcript, std::int64_t sample_rate,
             std::int64_t sample_count, const py::object& token_rate, const std::string& labels, char blank,
             char boundary) {
              const LabelVocab vocab = labels.empty() ? LabelVocab::english() : LabelVocab(labels, blank, boundary);
              Matrix lp(log_probs.size(), vocab.size());
              for (std::size_t t = 0; t < log_probs.size(); ++t) {
                  if (log_probs[t].size() != vocab.size())
                      throw InvalidArgument("align: frame " + std::to_string(t) + " has the wrong label count");
                  for (std::size_t c = 0; c < vocab.size(); ++c) lp(t, c) = log_probs[t][c];
              }
              const EmissionMatrix em{std::move(lp), vocab};
              em.validate();
              const AudioMeta meta{sample_count, sample_rate, static_cast<std::int64_t>(em.frames()), as_rational(token_rate)};
              return from_json(alignment_to_json(align(em, transcript, meta)));
          },
          py::arg("log_probs"), py::arg("transcript"), py::arg("sample_rate"), py::arg("sample_count"),
          py::arg("token_rate"), py::arg("labels") = "", py::arg("blank") = '-', py::arg("boundary") = '|');
    m.def("align_file",
          [](const std::filesystem::path& path, const std::string& transcript, const py::object& token_rate) {
              const auto f = load_emissions(path);
              Rational tr;
              if (!token_rate.is_none()) tr = as_rational(token_rate);
              else if (f.token_rate) tr = *f.token_rate;
              else throw InvalidArgument("align_file: the file declares no token rate; pass token_rate");
              return from_json(alignment_to_json(align(f.emissions, transcript, f.meta(tr))));
          },
          py::arg("path"), py::arg("transcript"), py::arg("token_rate") = py::none());
    m.def("frame_to_time",
          [](std::size_t f_start, std::size_t f_end, std::int64_t sample_count, std::int64_t sample_rate,
             std::int64_t frame_count) {
              const auto r = frame_to_time(f_start, f_end, AudioMeta{sample_count, sample_rate, frame_count, Rational(1)});
              return py::make_tuple(format_rational(r.start), format_rational(r.end));
          },
          py::arg("f_start"), py::arg("f_end"), py::arg("sample_count"), py::arg("sample_rate"), py::arg("frame_count"));
    m.def("time_to_speech_tokens",
          [](const py::object& s_start, const py::object& s_end, const py::object& token_rate) {
              const auto r = time_to_speech_tokens(as_rational(s_start), as_rational(s_end), as_rational(token_rate));
              return py::make_tuple(r.start, r.end);
          },
          py::arg("s_start"), py::arg("s_end"), py::arg("token_rate"));

    // dataset
    m.def("judge",
          [](const std::string& generated, const std::string& attribute, std::size_t partial_window) {
              JudgeOptions o;
              o.partial_window = partial_window;
              return std::string(to_string(judge(generated, attribute, o).kind));
          },
          py::arg("generated"), py::arg("attribute"), py::arg("partial_window") = 10);
    m.def("wer", [](const std::string& r, const std::string& h) { return wer(r, h); }, py::arg("reference"),
          py::arg("hypothesis"));
    m.def("word_edit_distance", [](const std::string& r, const std::string& h) { return word_edit_distance(r, h); },
          py::arg("reference"), py::arg("hypothesis"));

    m.def("run_cli",
          [](std::vector<std::string> args) {
              args.insert(args.begin(), "cmtrace");
              std::ostringstream out, err;
              int code = 0;
              {
                  py::gil_scoped_release release;
                  code = cli::run(args, out, err);
              }
              return py::make_tuple(code, out.str(), err.str());
          },
          py::arg("args"));
}
