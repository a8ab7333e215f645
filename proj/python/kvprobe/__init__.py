"""Concept injection through the KV cache, with detection and identification probes."""

from ._core import (
    DegenerateDirection,
    InvalidArgument,
    KvprobeError,
    LoadError,
    Model,
    SchemaError,
    SequenceOverflow,
    Tokenizer,
    TokenizerError,
    analyze,
    balanced_accuracy,
    core_conditions,
    corpus_concepts,
    engine_version,
    lift,
    middle_third_layers,
    mutual_information,
    pearson_r,
    render_detection_prompt,
    report,
    run_grid,
    shuffle_orderings,
)

__version__ = engine_version()
