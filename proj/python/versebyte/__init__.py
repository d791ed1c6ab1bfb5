"""Byte-level neural machine translation."""

import json

from versebyte._core import (
    EOS,
    PAD,
    UNK,
    VOCAB_SIZE,
    CheckpointError,
    Error,
    FormatError,
    NumericError,
    RangeError,
    ShapeError,
    decode,
    encode,
    relative_position_bucket,
    run_cli,
    tag_source,
)
from versebyte import _core

__all__ = [
    "EOS",
    "PAD",
    "UNK",
    "VOCAB_SIZE",
    "CheckpointError",
    "Error",
    "FormatError",
    "NumericError",
    "RangeError",
    "ShapeError",
    "Translator",
    "corpus_bleu",
    "decode",
    "encode",
    "parameter_count",
    "relative_position_bucket",
    "run_cli",
    "tag_source",
]


def corpus_bleu(hypotheses, references, max_n=4, smoothing="none"):
    """Corpus BLEU in [0, 1] as a dict shaped like bleu_report.json."""
    return json.loads(_core.corpus_bleu_json(list(hypotheses), list(references), max_n, smoothing))


def parameter_count(config=None):
    """Trainable parameter count for a model config dict (defaults filled in)."""
    return _core.parameter_count(json.dumps(config or {}))


class Translator:
    """Loads a checkpoint once and translates strings with it."""

    def __init__(self, checkpoint):
        self._impl = _core.Translator(checkpoint)
        self.config = json.loads(self._impl.config_json())

    def __call__(self, text, target_lang, beam_width=1, max_len=512, length_penalty=0.0):
        return self._impl(text, target_lang, beam_width, max_len, length_penalty)
