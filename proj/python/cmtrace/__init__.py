"""Causal tracing of factual recall in toy bimodal transformers, plus CTC
forced alignment of transcripts to frame emissions."""

from ._core import (
    Error,
    FormatError,
    IndexError,
    InfeasibleAlignment,
    InvalidArgument,
    Model,
    TracePrompt,
    TraceResult,
    align,
    align_file,
    average_grids,
    frame_to_time,
    judge,
    load_model,
    planted_fact_bundle,
    preprocess_transcript,
    random_model,
    run_cli,
    time_to_speech_tokens,
    trace,
    wer,
    window_layers,
    word_edit_distance,
)

BUCKETS = (
    "first_subject",
    "middle_subject",
    "last_subject",
    "first_subsequent",
    "further_tokens",
    "last_token",
)


def grid_argmax(grid):
    """(layer, bucket) of the largest populated cell of a grid document."""
    best = None
    for layer, row in enumerate(grid["values"]):
        for bucket, value in zip(grid["buckets"], row):
            if value is not None and (best is None or value > best[0]):
                best = (value, layer, bucket)
    return None if best is None else best[1:]
