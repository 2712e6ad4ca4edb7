"""Export recipes: everything one conversion run needs, in one value."""

from __future__ import annotations

from dataclasses import dataclass

from . import ExportError

GOLDEN_MAX_SEQUENCES = 8
GOLDEN_MAX_LEN = 16


@dataclass(frozen=True)
class ExportRecipe:
    """One model-plus-corpus export.

    `source` is a Hugging Face model id or a local directory. `family`
    may be left empty to auto-detect from the source config. The corpus
    fields describe the text side of the export: `word_budget` counts
    whitespace words in the raw text before any tokenization, and the
    tokenizer defaults to the model source.
    """

    source: str
    family: str = ""
    model_id: str = ""
    max_position: int | None = None
    corpus_source: str = ""
    word_budget: int | None = None
    tokenizer: str = ""
    golden_sequences: int = GOLDEN_MAX_SEQUENCES
    golden_max_len: int = GOLDEN_MAX_LEN
    golden_seed: int = 0

    def __post_init__(self):
        if not self.source:
            raise ExportError("recipe needs a model source")
        if not (1 <= self.golden_sequences <= GOLDEN_MAX_SEQUENCES):
            raise ExportError(
                f"golden_sequences must be in [1, {GOLDEN_MAX_SEQUENCES}], got {self.golden_sequences}"
            )
        if not (2 <= self.golden_max_len <= GOLDEN_MAX_LEN):
            raise ExportError(
                f"golden_max_len must be in [2, {GOLDEN_MAX_LEN}], got {self.golden_max_len}"
            )
        if self.word_budget is not None and self.word_budget < 0:
            raise ExportError("word_budget must be >= 0")

    @property
    def resolved_model_id(self) -> str:
        if self.model_id:
            return self.model_id
        return self.source.rstrip("/").split("/")[-1]

    @property
    def resolved_tokenizer(self) -> str:
        return self.tokenizer or self.source
