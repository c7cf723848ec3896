#pragma once

#include <vector>

#include "cmtrace/dataset.hpp"
#include "cmtrace/tokenizer.hpp"
#include "cmtrace/tracer.hpp"

namespace cmtrace {

// Builds a trace prompt from a Known record. The subject range covers every
// word overlapping the subject's character span; targets are the tokens of
// the attribute.
TracePrompt make_trace_prompt(const KnownRecord& record, const BimodalTokenizer& tokenizer, DatasetModality modality);

}  // namespace cmtrace
