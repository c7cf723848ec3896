#include "cli.hpp"

#include <CLI11.hpp>
#include <algorithm>
#include <filesystem>
#include <fstream>
#include <map>
#include <ostream>
#include <thread>

#include "cmtrace/aligner.hpp"
#include "cmtrace/dataset.hpp"
#include "cmtrace/emissions_io.hpp"
#include "cmtrace/error.hpp"
#include "cmtrace/fixtures.hpp"
#include "cmtrace/report.hpp"
#include "cmtrace/trace_prompts.hpp"
#include "cmtrace/tracer.hpp"
#include "cmtrace/weights_io.hpp"

namespace cmtrace::cli {

namespace fs = std::filesystem;
using json = nlohmann::ordered_json;

namespace {

constexpr int kUsageError = 2;

// Exit status for an input problem detected after argument parsing.
struct UsageError : Error {
    using Error::Error;
};

std::size_t default_jobs() { return std::max(1u, std::thread::hardware_concurrency()); }

void write_text(const fs::path& path, const std::string& content) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw Error("cannot write " + path.string());
    out << content;
}

fs::path prepare_output_dir(const std::string& dir) {
    const fs::path p = dir.empty() ? fs::path(".") : fs::path(dir);
    fs::create_directories(p);
    return p;
}

// "mlp_out=5" -> (mlp_out, 5)
std::pair<ComponentKind, std::size_t> parse_window(const std::string& spec) {
    const auto eq = spec.find('=');
    if (eq == std::string::npos) throw UsageError("--window expects KIND=SIZE, got '" + spec + "'");
    const auto kind = parse_component_kind(spec.substr(0, eq));
    std::size_t w = 0;
    try {
        w = std::stoul(spec.substr(eq + 1));
    } catch (const std::exception&) {
        throw UsageError("--window size is not a number in '" + spec + "'");
    }
    if (w == 0 || w % 2 == 0) throw UsageError("--window size must be odd and >= 1 in '" + spec + "'");
    return {kind, w};
}

std::string file_stem(ComponentKind kind, std::size_t window) {
    return std::string(to_string(kind)) + "_w" + std::to_string(window);
}

// ---------------------------------------------------------------------------

struct TraceArgs {
    std::string model, dataset, modality = "t2t", output_dir, field_map, target_mode = "first";
    std::vector<std::string> kinds{"hidden_state", "mlp_out", "attn_out"};
    std::vector<std::string> windows;
    double noise_scale = 3.0;
    std::uint64_t seed = 0;
    std::size_t jobs = default_jobs();
};

int cmd_trace(const TraceArgs& a, std::ostream& out, std::ostream& err) {
    const auto modality = parse_dataset_modality(a.modality);
    const auto mode = a.target_mode == "joint" ? TargetMode::joint : TargetMode::first_token;
    std::map<ComponentKind, std::vector<std::size_t>> windows = {
        {ComponentKind::hidden_state, {1}}, {ComponentKind::mlp_out, {5}},
        {ComponentKind::attn_out, {5}},     {ComponentKind::embedding_out, {1}}};
    std::map<ComponentKind, std::vector<std::size_t>> overrides;
    for (const auto& w : a.windows) {
        const auto [kind, size] = parse_window(w);
        overrides[kind].push_back(size);
    }
    for (auto& [kind, sizes] : overrides) windows[kind] = sizes;
    std::vector<ComponentKind> kinds;
    for (const auto& k : a.kinds) kinds.push_back(parse_component_kind(k));

    const auto bundle = load_model(fs::path(a.model));
    const Model& model = bundle.model;
    const BimodalTokenizer tokenizer(model.vocab(), bundle.text_words);
    const auto loaded = load_known(a.dataset, a.field_map.empty() ? FieldMapping{} : FieldMapping::parse(a.field_map));
    for (const auto& w : loaded.warnings) err << "warning: " << w << '\n';

    bool hard_error = false;
    std::vector<TracePrompt> prompts;
    for (const auto& rec : loaded.records) {
        try {
            auto p = make_trace_prompt(rec, tokenizer, modality);
            p.validate(model);
            prompts.push_back(std::move(p));
        } catch (const Error& e) {
            err << "error: record '" << rec.id << "': " << e.what() << '\n';
            hard_error = true;
        }
    }

    const auto spec = CorruptionSpec::for_model(model, a.noise_scale, a.seed);
    const fs::path dir = prepare_output_dir(a.output_dir);
    json outputs = json::array();
    std::vector<TraceResult> first_results;
    for (ComponentKind kind : kinds) {
        for (std::size_t w : windows[kind]) {
            auto results = trace_prompts(model, prompts, spec, kind, w, mode, a.jobs);
            const std::string stem = file_stem(kind, w);
            {
                std::ofstream table(dir / ("trace_" + stem + ".csv"), std::ios::binary);
                write_trace_table(table, results);
            }
            outputs.push_back("trace_" + stem + ".csv");
            if (!results.empty()) {
                save_grid(dir / ("grid_" + stem + ".json"), average_grids(results, spec));
                outputs.push_back("grid_" + stem + ".json");
            }
            if (first_results.empty()) first_results = std::move(results);
        }
    }

    double sum_clean = 0.0, sum_corrupt = 0.0;
    {
        std::ofstream table(dir / "prompts.csv", std::ios::binary);
        table << "prompt_id,p_clean,p_corrupt\n";
        for (const auto& r : first_results) {
            table << r.prompt_id << ',' << format_double(r.p_clean) << ',' << format_double(r.p_corrupt) << '\n';
            sum_clean += r.p_clean;
            sum_corrupt += r.p_corrupt;
        }
    }
    const double n = static_cast<double>(first_results.size());
    json summary;
    summary["modality"] = std::string(to_string(modality));
    summary["n_prompts"] = first_results.size();
    summary["mean_p_clean"] = first_results.empty() ? 0.0 : sum_clean / n;
    summary["mean_p_corrupt"] = first_results.empty() ? 0.0 : sum_corrupt / n;
    summary["noise_scale"] = spec.noise_scale;
    summary["sigma"] = spec.sigma;
    summary["seed"] = spec.seed;
    summary["target_mode"] = a.target_mode;
    summary["outputs"] = outputs;
    write_text(dir / "summary.json", summary.dump(2) + "\n");

    out << "traced " << first_results.size() << " prompts (" << to_string(modality) << ")\n";
    out << "mean p_clean   " << format_double(summary["mean_p_clean"].get<double>()) << '\n';
    out << "mean p_corrupt " << format_double(summary["mean_p_corrupt"].get<double>()) << '\n';
    out << "outputs in " << dir.string() << '\n';
    return hard_error ? 1 : 0;
}

// ---------------------------------------------------------------------------

struct AlignArgs {
    std::string emissions, transcript, output_dir, token_rate, subject;
    bool trellis_heatmap = false;
};

int cmd_align(const AlignArgs& a, std::ostream& out, std::ostream& err) {
    const auto file = load_emissions(fs::path(a.emissions));
    Rational tr;
    if (!a.token_rate.empty()) {
        try {
            tr = parse_rational(a.token_rate);
        } catch (const Error& e) {
            throw UsageError(std::string("--token-rate: ") + e.what());
        }
    } else if (file.token_rate) {
        tr = *file.token_rate;
    } else {
        throw UsageError("the speech token rate (tr) is required: pass --token-rate");
    }
    const auto alignment = align(file.emissions, a.transcript, file.meta(tr));
    for (const auto& w : alignment.warnings) err << "warning: " << w << '\n';

    json doc = alignment_to_json(alignment);
    doc["token_rate"] = format_rational(tr);
    if (!a.subject.empty()) {
        std::vector<std::string> words;
        for (const auto& w : BimodalTokenizer::split_words(a.subject)) words.push_back(w.text);
        const auto r = subject_span(alignment.spans, words);
        doc["subject"] = {{"tokens", words}, {"speech_token_start", r.start}, {"speech_token_end", r.end}};
        out << "subject speech tokens [" << r.start << ", " << r.end << ")\n";
    }
    const fs::path dir = prepare_output_dir(a.output_dir);
    write_text(dir / "alignment.json", doc.dump(2) + "\n");
    if (a.trellis_heatmap) write_text(dir / "trellis.svg", trellis_heatmap_svg(alignment));

    for (const auto& s : alignment.spans)
        out << s.token_text << "\tframes [" << s.frame_start << ", " << s.frame_end << ")\ttokens ["
            << s.speech_tokens.start << ", " << s.speech_tokens.end << ")\n";
    return 0;
}

// ---------------------------------------------------------------------------

struct FilterArgs {
    std::string model, dataset, modality = "t2t", output_dir, field_map;
    std::size_t max_new = 10;
    std::size_t partial_window = 10;
    std::size_t jobs = default_jobs();
};

int cmd_filter(const FilterArgs& a, std::ostream& out, std::ostream& err) {
    const auto modality = parse_dataset_modality(a.modality);
    const auto fields = a.field_map.empty() ? FieldMapping{} : FieldMapping::parse(a.field_map);
    const auto bundle = load_model(fs::path(a.model));
    const BimodalTokenizer tokenizer(bundle.model.vocab(), bundle.text_words);
    const auto loaded = load_known(a.dataset, fields);
    for (const auto& w : loaded.warnings) err << "warning: " << w << '\n';

    JudgeOptions judge_options;
    judge_options.partial_window = a.partial_window;
    const auto filtered =
        filter_dataset(bundle.model, tokenizer, loaded.records, modality, a.max_new, judge_options, a.jobs);

    const fs::path dir = prepare_output_dir(a.output_dir);
    const std::string name = "known_" + std::string(to_string(modality));
    write_text(dir / (name + ".json"), filtered_to_json(filtered, fields).dump(2) + "\n");

    std::size_t exact = 0;
    for (const auto& j : filtered.judgments) exact += j.kind == JudgmentKind::exact;
    const double rate = filtered.input_count == 0
                            ? 0.0
                            : static_cast<double>(filtered.records.size()) / static_cast<double>(filtered.input_count);
    json summary;
    summary["modality"] = std::string(to_string(modality));
    summary["input_records"] = filtered.input_count;
    summary["skipped_records"] = loaded.warnings.size();
    summary["retained"] = filtered.records.size();
    summary["exact"] = exact;
    summary["partial"] = filtered.records.size() - exact;
    summary["retention"] = rate;
    summary["max_new"] = a.max_new;
    write_text(dir / (name + "_summary.json"), summary.dump(2) + "\n");

    out << "retained " << filtered.records.size() << " / " << filtered.input_count << " records ("
        << exact << " exact, " << filtered.records.size() - exact << " partial) -> " << (dir / (name + ".json")).string()
        << '\n';
    return 0;
}

// ---------------------------------------------------------------------------

struct ReportArgs {
    std::string grids, output_dir;
    std::vector<std::string> formats{"csv", "svg"};
};

int cmd_report(const ReportArgs& a, std::ostream& out, std::ostream&) {
    std::vector<fs::path> files;
    if (fs::is_directory(a.grids)) {
        for (const auto& e : fs::directory_iterator(a.grids)) {
            const auto name = e.path().filename().string();
            if (e.is_regular_file() && name.starts_with("grid_") && e.path().extension() == ".json")
                files.push_back(e.path());
        }
        std::sort(files.begin(), files.end());
    } else if (fs::is_regular_file(a.grids)) {
        files.push_back(a.grids);
    } else {
        throw UsageError("no grid file or directory at '" + a.grids + "'");
    }
    const bool csv = std::find(a.formats.begin(), a.formats.end(), "csv") != a.formats.end();
    const bool svg = std::find(a.formats.begin(), a.formats.end(), "svg") != a.formats.end();
    for (const auto& f : a.formats)
        if (f != "csv" && f != "svg") throw UsageError("unknown report format '" + f + "' (expected csv or svg)");

    for (const auto& path : files) {
        const AieGrid grid = load_grid(path);
        const fs::path dir = a.output_dir.empty() ? path.parent_path() : prepare_output_dir(a.output_dir);
        const std::string stem = path.stem().string();
        if (csv) {
            std::ofstream table(dir / (stem + ".csv"), std::ios::binary);
            write_grid_table(table, grid);
        }
        if (svg) write_text(dir / (stem + ".svg"), grid_heatmap_svg(grid));
        out << "reported " << path.filename().string() << '\n';
    }
    return 0;
}

// ---------------------------------------------------------------------------

int cmd_make_fixture(const std::string& output_dir, std::ostream& out) {
    const fs::path dir = prepare_output_dir(output_dir);
    const auto bundle = make_planted_bundle();
    save_model(dir / "planted.cmw", bundle.planted.model, bundle.words);
    write_text(dir / "known.json", bundle.known.dump(2) + "\n");
    json meta;
    meta["store_layer"] = bundle.options.store_layer;
    meta["copy_layer"] = bundle.planted.copy_layer;
    meta["subject_index"] = bundle.options.subject_index;
    meta["template_len"] = bundle.options.template_len;
    meta["n_layers"] = bundle.options.n_layers;
    meta["expected_site"] = {{"layer", bundle.planted.expected_site.layer},
                             {"kind", std::string(to_string(bundle.planted.expected_site.kind))},
                             {"position", bundle.planted.expected_site.position}};
    write_text(dir / "planted_meta.json", meta.dump(2) + "\n");

    const auto em = make_synthetic_emissions("The capital of Roman Republic is", LabelVocab::english());
    save_emissions(dir / "roman_republic.emissions", em.file);
    out << "wrote fixtures to " << dir.string() << '\n';
    return 0;
}

}  // namespace

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
    CLI::App app{"Causal tracing of factual recall in toy bimodal transformers, with CTC forced alignment"};
    app.require_subcommand(1);

    TraceArgs trace;
    auto* t = app.add_subcommand("trace", "Run clean/corrupted/restored traces and write AIE grids");
    t->add_option("--model", trace.model, "Weight file")->required()->check(CLI::ExistingFile);
    t->add_option("--dataset", trace.dataset, "Known-style JSON array (usually filtered)")->required()->check(CLI::ExistingFile);
    t->add_option("--modality", trace.modality, "Prompt modality")->check(CLI::IsMember({"t2t", "s2t"}));
    t->add_option("--kinds", trace.kinds, "Component kinds to scan")->delimiter(',');
    t->add_option("--window", trace.windows, "KIND=SIZE patch window (repeatable)");
    t->add_option("--noise-scale", trace.noise_scale, "Noise std as a multiple of the embedding std")->check(CLI::NonNegativeNumber);
    t->add_option("--seed", trace.seed, "Seed for all corruption noise");
    t->add_option("--target-mode", trace.target_mode, "Score first object token or joint object probability")
        ->check(CLI::IsMember({"first", "joint"}));
    t->add_option("--field-map", trace.field_map, "Source field names, e.g. prompt=text,subject=subj");
    t->add_option("--output-dir", trace.output_dir, "Output directory")->envname("CMTRACE_OUTPUT_DIR");
    t->add_option("--jobs", trace.jobs, "Worker threads")->envname("CMTRACE_JOBS")->check(CLI::PositiveNumber);

    AlignArgs al;
    auto* a = app.add_subcommand("align", "CTC forced alignment of a transcript to frame emissions");
    a->add_option("--emissions", al.emissions, "Emissions file")->required()->check(CLI::ExistingFile);
    a->add_option("--transcript", al.transcript, "Raw transcript text")->required();
    a->add_option("--token-rate", al.token_rate, "Speech tokens per second (e.g. 25, 12.5, 50/3)");
    a->add_option("--subject", al.subject, "Report the speech-token range of these words");
    a->add_flag("--trellis-heatmap", al.trellis_heatmap, "Also write trellis.svg");
    a->add_option("--output-dir", al.output_dir, "Output directory")->envname("CMTRACE_OUTPUT_DIR");

    FilterArgs fl;
    auto* f = app.add_subcommand("filter", "Keep records the model answers exactly or partially");
    f->add_option("--model", fl.model, "Weight file")->required()->check(CLI::ExistingFile);
    f->add_option("--dataset", fl.dataset, "Known-style JSON array")->required()->check(CLI::ExistingFile);
    f->add_option("--modality", fl.modality, "t2t or s2t")->check(CLI::IsMember({"t2t", "s2t"}));
    f->add_option("--max-new", fl.max_new, "Tokens generated per record")->check(CLI::PositiveNumber);
    f->add_option("--partial-window", fl.partial_window, "Generated words searched for a partial match");
    f->add_option("--field-map", fl.field_map, "Source field names, e.g. prompt=text,subject=subj");
    f->add_option("--output-dir", fl.output_dir, "Output directory")->envname("CMTRACE_OUTPUT_DIR");
    f->add_option("--jobs", fl.jobs, "Worker threads")->envname("CMTRACE_JOBS")->check(CLI::PositiveNumber);

    ReportArgs rp;
    auto* r = app.add_subcommand("report", "Tabular export and SVG heatmap per grid file");
    r->add_option("--grids", rp.grids, "Grid JSON file or a directory of grid_*.json")->required();
    r->add_option("--format", rp.formats, "csv and/or svg")->delimiter(',');
    r->add_option("--output-dir", rp.output_dir, "Output directory (default: next to each grid)")
        ->envname("CMTRACE_OUTPUT_DIR");

    std::string fixture_dir;
    auto* mf = app.add_subcommand("make-fixture", "Write the planted-fact bundle and synthetic emissions");
    mf->add_option("--output-dir", fixture_dir, "Output directory")->required();

    std::vector<const char*> argv;
    for (const auto& s : args) argv.push_back(s.c_str());
    try {
        app.parse(static_cast<int>(argv.size()), argv.data());
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e, out, err);
        return code == 0 ? 0 : kUsageError;
    }

    try {
        if (*t) return cmd_trace(trace, out, err);
        if (*a) return cmd_align(al, out, err);
        if (*f) return cmd_filter(fl, out, err);
        if (*r) return cmd_report(rp, out, err);
        if (*mf) return cmd_make_fixture(fixture_dir, out);
    } catch (const UsageError& e) {
        err << "usage error: " << e.what() << '\n';
        return kUsageError;
    } catch (const std::exception& e) {
        err << "error: " << e.what() << '\n';
        return 1;
    }
    return kUsageError;
}

}  // namespace cmtrace::cli
