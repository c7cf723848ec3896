#include "cmtrace/dataset.hpp"

#include <algorithm>
#include <atomic>
#include <cctype>
#include <exception>
#include <fstream>
#include <sstream>
#include <thread>

#include "cmtrace/error.hpp"

namespace cmtrace {

using json = nlohmann::ordered_json;

FieldMapping FieldMapping::parse(std::string_view spec) {
    FieldMapping m;
    std::size_t i = 0;
    while (i <= spec.size() && !spec.empty()) {
        const auto comma = spec.find(',', i);
        const auto item = spec.substr(i, comma == std::string_view::npos ? std::string_view::npos : comma - i);
        const auto eq = item.find('=');
        if (eq == std::string_view::npos || eq == 0 || eq + 1 == item.size())
            throw InvalidArgument("field mapping entry '" + std::string(item) + "' is not key=name");
        const auto key = item.substr(0, eq);
        const std::string name(item.substr(eq + 1));
        if (key == "prompt") m.prompt = name;
        else if (key == "subject") m.subject = name;
        else if (key == "attribute") m.attribute = name;
        else if (key == "id") m.id_fields = {name};
        else throw InvalidArgument("unknown field mapping key '" + std::string(key) + "'");
        if (comma == std::string_view::npos) break;
        i = comma + 1;
    }
    return m;
}

namespace {

std::string collapse_whitespace(std::string_view s) {
    std::string out;
    bool pending_space = false;
    for (char c : s) {
        if (std::isspace(static_cast<unsigned char>(c))) {
            pending_space = !out.empty();
            continue;
        }
        if (pending_space) out += ' ';
        pending_space = false;
        out += c;
    }
    return out;
}

std::size_t line_of_offset(std::string_view text, std::size_t offset) {
    offset = std::min(offset, text.size());
    return 1 + static_cast<std::size_t>(std::count(text.begin(), text.begin() + static_cast<std::ptrdiff_t>(offset), '\n'));
}

std::vector<std::string> words_of(std::string_view normalized) {
    std::vector<std::string> out;
    std::istringstream ss{std::string(normalized)};
    std::string w;
    while (ss >> w) out.push_back(w);
    return out;
}

}  // namespace

LoadResult parse_known(std::string_view text, const FieldMapping& fields) {
    json doc;
    try {
        doc = json::parse(text.begin(), text.end());
    } catch (const json::parse_error& e) {
        throw FormatError("known dataset: parse error at line " + std::to_string(line_of_offset(text, e.byte)) + ": " +
                          e.what());
    }
    if (!doc.is_array()) throw FormatError("known dataset: top-level value must be an array");

    LoadResult out;
    for (std::size_t i = 0; i < doc.size(); ++i) {
        const auto& item = doc[i];
        const auto skip = [&](const std::string& why) {
            out.warnings.push_back("record " + std::to_string(i) + ": " + why + "; skipped");
        };
        if (!item.is_object()) {
            skip("not an object");
            continue;
        }
        const auto text_field = [&](const std::string& name) -> std::optional<std::string> {
            auto it = item.find(name);
            if (it == item.end() || !it->is_string()) return std::nullopt;
            return it->get<std::string>();
        };
        const auto prompt = text_field(fields.prompt);
        const auto subject = text_field(fields.subject);
        const auto attribute = text_field(fields.attribute);
        if (!prompt || !subject || !attribute) {
            skip("missing one of '" + fields.prompt + "', '" + fields.subject + "', '" + fields.attribute + "'");
            continue;
        }
        KnownRecord r;
        r.prompt = collapse_whitespace(*prompt);
        r.subject = collapse_whitespace(*subject);
        r.attribute = collapse_whitespace(*attribute);
        r.id = std::to_string(i);
        for (const auto& f : fields.id_fields) {
            auto it = item.find(f);
            if (it == item.end()) continue;
            r.id = it->is_string() ? it->get<std::string>() : it->dump();
            r.id_field = f;
            break;
        }
        const auto at = r.subject.empty() ? std::string::npos : r.prompt.find(r.subject);
        if (at == std::string::npos) {
            skip("subject '" + r.subject + "' does not occur in prompt '" + r.prompt + "'");
            continue;
        }
        r.subject_char_begin = at;
        r.subject_char_end = at + r.subject.size();
        for (const auto& [key, value] : item.items()) {
            if (key == fields.prompt || key == fields.subject || key == fields.attribute) continue;
            r.extra[key] = value;
        }
        out.records.push_back(std::move(r));
    }
    return out;
}

LoadResult load_known(const std::filesystem::path& path, const FieldMapping& fields) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw Error("cannot open " + path.string());
    std::ostringstream ss;
    ss << in.rdbuf();
    return parse_known(ss.str(), fields);
}

// ---------------------------------------------------------------------------
// Judging

std::string_view to_string(JudgmentKind kind) {
    switch (kind) {
        case JudgmentKind::exact: return "exact";
        case JudgmentKind::partial: return "partial";
        case JudgmentKind::incorrect: return "incorrect";
    }
    return "?";
}

std::string normalize_answer(std::string_view text) {
    std::string spaced;
    spaced.reserve(text.size());
    for (char c : text) {
        const auto u = static_cast<unsigned char>(c);
        spaced += std::ispunct(u) ? ' ' : static_cast<char>(std::tolower(u));
    }
    return collapse_whitespace(spaced);
}

Judgment judge(std::string_view generated, std::string_view attribute, const JudgeOptions& options) {
    Judgment j{JudgmentKind::incorrect, std::string(generated)};
    const auto gen = words_of(normalize_answer(generated));
    const auto attr = words_of(normalize_answer(attribute));
    if (attr.empty() || gen.size() < attr.size()) return j;

    const bool exact = options.prefix_is_exact ? std::equal(attr.begin(), attr.end(), gen.begin()) : gen == attr;
    if (exact) {
        j.kind = JudgmentKind::exact;
        return j;
    }
    const std::size_t window = std::min(gen.size(), std::max(options.partial_window, attr.size()));
    const auto end = gen.begin() + static_cast<std::ptrdiff_t>(window);
    if (std::search(gen.begin(), end, attr.begin(), attr.end()) != end) j.kind = JudgmentKind::partial;
    return j;
}

std::string_view to_string(DatasetModality m) { return m == DatasetModality::t2t ? "t2t" : "s2t"; }

DatasetModality parse_dataset_modality(std::string_view name) {
    if (name == "t2t") return DatasetModality::t2t;
    if (name == "s2t") return DatasetModality::s2t;
    throw InvalidArgument("unknown modality '" + std::string(name) + "' (expected t2t or s2t)");
}

// ---------------------------------------------------------------------------
// Filtering

TokenSequence prompt_sequence(const KnownRecord& record, const BimodalTokenizer& tokenizer, DatasetModality modality) {
    if (modality == DatasetModality::t2t) return tokenizer.encode_text(record.prompt);
    const auto& vocab = tokenizer.vocab();
    if (auto it = record.extra.find("speech_tokens"); it != record.extra.end()) {
        TokenSequence seq;
        seq.push_back(vocab.speech_marker, vocab);
        for (const auto& u : *it) seq.push_back(u.get<TokenId>(), vocab);
        seq.push_back(vocab.text_marker, vocab);
        return seq;
    }
    return tokenizer.expand_speech(record.prompt, true).tokens;
}

FilteredDataset filter_dataset(const Model& model, const BimodalTokenizer& tokenizer,
                               const std::vector<KnownRecord>& records, DatasetModality modality, std::size_t max_new,
                               const JudgeOptions& options, std::size_t jobs) {
    if (max_new == 0) throw InvalidArgument("filter_dataset: max_new must be >= 1");
    std::vector<Judgment> judgments(records.size());
    std::vector<std::exception_ptr> errors(records.size());
    std::atomic<std::size_t> next{0};
    const auto worker = [&] {
        for (std::size_t i = next++; i < records.size(); i = next++) {
            try {
                const auto gen = greedy_generate(model, prompt_sequence(records[i], tokenizer, modality), max_new);
                judgments[i] = judge(tokenizer.decode(gen.tokens), records[i].attribute, options);
            } catch (...) {
                errors[i] = std::current_exception();
            }
        }
    };
    const std::size_t width = std::clamp<std::size_t>(jobs, 1, std::max<std::size_t>(records.size(), 1));
    if (width == 1) {
        worker();
    } else {
        std::vector<std::jthread> pool;
        for (std::size_t t = 0; t < width; ++t) pool.emplace_back(worker);
    }
    for (auto& e : errors)
        if (e) std::rethrow_exception(e);

    FilteredDataset out;
    out.modality = modality;
    out.input_count = records.size();
    for (std::size_t i = 0; i < records.size(); ++i) {
        if (!judgments[i].accepted()) continue;
        out.records.push_back(records[i]);
        out.judgments.push_back(std::move(judgments[i]));
    }
    return out;
}

json filtered_to_json(const FilteredDataset& dataset, const FieldMapping& fields) {
    json arr = json::array();
    for (std::size_t i = 0; i < dataset.records.size(); ++i) {
        const auto& r = dataset.records[i];
        json o = json::object();
        if (r.id_field.empty()) o["id"] = r.id;
        o[fields.prompt] = r.prompt;
        o[fields.subject] = r.subject;
        o[fields.attribute] = r.attribute;
        for (const auto& [key, value] : r.extra.items()) o[key] = value;
        o["judgment"] = std::string(to_string(dataset.judgments[i].kind));
        o["generated"] = dataset.judgments[i].generated;
        arr.push_back(std::move(o));
    }
    return arr;
}

// ---------------------------------------------------------------------------
// WER

std::size_t word_edit_distance(std::string_view reference, std::string_view hypothesis) {
    const auto ref = words_of(normalize_answer(reference));
    const auto hyp = words_of(normalize_answer(hypothesis));
    std::vector<std::size_t> prev(hyp.size() + 1), cur(hyp.size() + 1);
    for (std::size_t j = 0; j <= hyp.size(); ++j) prev[j] = j;
    for (std::size_t i = 1; i <= ref.size(); ++i) {
        cur[0] = i;
        for (std::size_t j = 1; j <= hyp.size(); ++j) {
            const std::size_t sub = prev[j - 1] + (ref[i - 1] == hyp[j - 1] ? 0 : 1);
            cur[j] = std::min({sub, prev[j] + 1, cur[j - 1] + 1});
        }
        std::swap(prev, cur);
    }
    return prev[hyp.size()];
}

double wer(std::string_view reference, std::string_view hypothesis) {
    const auto n = words_of(normalize_answer(reference)).size();
    if (n == 0) throw InvalidArgument("wer: empty reference");
    return static_cast<double>(word_edit_distance(reference, hypothesis)) / static_cast<double>(n);
}

}  // namespace cmtrace
