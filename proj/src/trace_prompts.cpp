#include "cmtrace/trace_prompts.hpp"

#include "cmtrace/error.hpp"

namespace cmtrace {

TracePrompt make_trace_prompt(const KnownRecord& record, const BimodalTokenizer& tokenizer, DatasetModality modality) {
    const auto& vocab = tokenizer.vocab();
    const auto words = BimodalTokenizer::split_words(record.prompt);

    // Text position of word i is i + 1 (position 0 holds the marker).
    PositionRange subject{0, 0};
    for (std::size_t i = 0; i < words.size(); ++i) {
        const bool overlaps = words[i].char_begin < record.subject_char_end && record.subject_char_begin < words[i].char_end;
        if (!overlaps) continue;
        if (subject.empty()) subject.begin = i + 1;
        subject.end = i + 2;
    }
    if (subject.empty()) throw InvalidArgument("record '" + record.id + "': subject covers no prompt word");

    TracePrompt p;
    p.prompt_id = record.id;
    p.subject_range = subject;
    for (const auto& w : BimodalTokenizer::split_words(record.attribute)) p.targets.push_back(tokenizer.word_id(w.text));
    if (p.targets.empty()) throw InvalidArgument("record '" + record.id + "': empty attribute");

    if (modality == DatasetModality::t2t) {
        p.modality = Modality::text;
        p.clean_tokens = tokenizer.encode_text(record.prompt);
        return p;
    }

    p.modality = Modality::speech;
    const auto units = record.extra.find("speech_tokens");
    const auto map = record.extra.find("text_token_map");
    if (units != record.extra.end() && map != record.extra.end()) {
        if (units->size() != map->size())
            throw InvalidArgument("record '" + record.id + "': speech_tokens and text_token_map differ in length");
        p.clean_tokens.push_back(vocab.speech_marker, vocab);
        p.text_token_map.push_back(std::nullopt);
        for (std::size_t i = 0; i < units->size(); ++i) {
            p.clean_tokens.push_back((*units)[i].get<TokenId>(), vocab);
            p.text_token_map.push_back((*map)[i].get<std::size_t>() + 1);
        }
        p.clean_tokens.push_back(vocab.text_marker, vocab);
        p.text_token_map.push_back(std::nullopt);
    } else {
        auto expansion = tokenizer.expand_speech(record.prompt, true);
        p.clean_tokens = std::move(expansion.tokens);
        p.text_token_map = std::move(expansion.text_token_map);
    }
    return p;
}

}  // namespace cmtrace
