#pragma once

#include <cstddef>
#include <filesystem>
#include <json.hpp>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "cmtrace/model.hpp"
#include "cmtrace/tokenizer.hpp"

namespace cmtrace {

struct KnownRecord {
    std::string id;
    std::string id_field;  // source field of id, empty when derived from the array index
    std::string prompt;    // whitespace-collapsed
    std::string subject;
    std::string attribute;
    std::size_t subject_char_begin = 0;
    std::size_t subject_char_end = 0;
    nlohmann::ordered_json extra = nlohmann::ordered_json::object();  // every other source field (including the id field), passed through
};

// Source field names; ids fall back to the record's array index.
struct FieldMapping {
    std::string prompt = "prompt";
    std::string subject = "subject";
    std::string attribute = "attribute";
    std::vector<std::string> id_fields = {"known_id", "id"};

    // "prompt=text,subject=subj,attribute=answer,id=uid"
    static FieldMapping parse(std::string_view spec);
};

struct LoadResult {
    std::vector<KnownRecord> records;
    std::vector<std::string> warnings;
};

LoadResult parse_known(std::string_view json_text, const FieldMapping& fields = {});
LoadResult load_known(const std::filesystem::path& path, const FieldMapping& fields = {});

enum class JudgmentKind { exact, partial, incorrect };
std::string_view to_string(JudgmentKind kind);

struct Judgment {
    JudgmentKind kind = JudgmentKind::incorrect;
    std::string generated;

    bool accepted() const noexcept { return kind != JudgmentKind::incorrect; }
};

struct JudgeOptions {
    bool prefix_is_exact = true;   // generation starting with the attribute is exact; otherwise it must equal it
    std::size_t partial_window = 10;  // words of the generation searched for a partial match
};

// Lower-case, punctuation replaced by spaces, whitespace collapsed.
std::string normalize_answer(std::string_view text);

Judgment judge(std::string_view generated, std::string_view attribute, const JudgeOptions& options = {});

enum class DatasetModality { t2t, s2t };
std::string_view to_string(DatasetModality m);
DatasetModality parse_dataset_modality(std::string_view name);

struct FilteredDataset {
    DatasetModality modality = DatasetModality::t2t;
    std::vector<KnownRecord> records;
    std::vector<Judgment> judgments;
    std::size_t input_count = 0;
};

// Sequence fed to the model for a record: [T words...] for t2t, the
// record's own "speech_tokens" or the tokenizer's speech expansion for s2t.
TokenSequence prompt_sequence(const KnownRecord& record, const BimodalTokenizer& tokenizer, DatasetModality modality);

FilteredDataset filter_dataset(const Model& model, const BimodalTokenizer& tokenizer,
                               const std::vector<KnownRecord>& records, DatasetModality modality,
                               std::size_t max_new = 10, const JudgeOptions& options = {}, std::size_t jobs = 1);

// Same schema as the input plus "judgment" and "generated".
nlohmann::ordered_json filtered_to_json(const FilteredDataset& dataset, const FieldMapping& fields = {});

// Word-level Levenshtein distance after normalize_answer.
std::size_t word_edit_distance(std::string_view reference, std::string_view hypothesis);

// word_edit_distance / reference word count.
double wer(std::string_view reference, std::string_view hypothesis);

}  // namespace cmtrace
