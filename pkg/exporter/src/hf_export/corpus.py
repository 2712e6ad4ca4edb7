"""Text corpora -> token binaries, with word-budget accounting.

Word budgets count whitespace-separated words in the raw text *before*
tokenization. A budgeted slice keeps the original text byte-for-byte up
to the end of the last budgeted word, so the token stream is exactly
what the tokenizer would produce on that prefix.
"""

from __future__ import annotations

import re
from pathlib import Path

from . import ExportError
from .container import write_corpus
from .recipe import ExportRecipe

_WORD = re.compile(r"\S+")


def count_words(text: str) -> int:
    return len(text.split())


def slice_to_word_budget(text: str, budget: int | None) -> tuple[str, int]:
    """(prefix of text covering at most `budget` words, word count kept)."""
    if budget is None:
        return text, count_words(text)
    if budget == 0:
        return "", 0
    end = 0
    count = 0
    for match in _WORD.finditer(text):
        count += 1
        end = match.end()
        if count == budget:
            break
    return text[:end], count


class WordTokenizer:
    """Whitespace word tokenizer with a first-seen-order vocabulary.

    Deliberately tiny: it exists so corpus plumbing is testable without
    any pretrained tokenizer files. Decoding joins words with single
    spaces, which is also its normalization.
    """

    def __init__(self, capacity: int = 4096):
        if capacity < 1:
            raise ExportError("word tokenizer capacity must be >= 1")
        self.capacity = capacity
        self._id_by_word: dict[str, int] = {}
        self._words: list[str] = []

    @property
    def vocab_size(self) -> int:
        return self.capacity

    def encode(self, text: str) -> list[int]:
        ids = []
        for word in text.split():
            if word not in self._id_by_word:
                if len(self._words) >= self.capacity:
                    raise ExportError(
                        f"word tokenizer vocabulary overflow (capacity {self.capacity})"
                    )
                self._id_by_word[word] = len(self._words)
                self._words.append(word)
            ids.append(self._id_by_word[word])
        return ids

    def decode(self, ids) -> str:
        try:
            return " ".join(self._words[int(i)] for i in ids)
        except IndexError:
            raise ExportError("token id outside the built vocabulary") from None


def resolve_tokenizer(spec: str):
    """`word` / `word:N` -> built-in word tokenizer; anything else is a
    Hugging Face tokenizer id or path."""
    if spec == "word" or spec.startswith("word:"):
        capacity = int(spec.partition(":")[2] or 4096)
        return WordTokenizer(capacity)
    from transformers import AutoTokenizer

    return AutoTokenizer.from_pretrained(spec)


def _encode(tokenizer, text: str) -> list[int]:
    if not text:
        return []
    if isinstance(tokenizer, WordTokenizer):
        return tokenizer.encode(text)
    return tokenizer.encode(text, add_special_tokens=False)


def tokenize_corpus(
    recipe: ExportRecipe,
    text: str,
    out_path: str | Path,
    *,
    model_vocab_size: int | None = None,
    split: str = "",
    tokenizer=None,
) -> dict:
    """Write the token binary + sidecar for one text source.

    The sidecar records the word count actually kept, the token count,
    and the split name. When the target model's vocabulary is known, a
    tokenizer that can emit ids outside it is refused.
    """
    if tokenizer is None:
        tokenizer = resolve_tokenizer(recipe.resolved_tokenizer)
    kept_text, word_count = slice_to_word_budget(text, recipe.word_budget)
    ids = _encode(tokenizer, kept_text)

    tok_vocab = int(tokenizer.vocab_size)
    if model_vocab_size is not None and tok_vocab > model_vocab_size:
        raise ExportError(
            f"tokenizer vocabulary ({tok_vocab}) exceeds the exported model's "
            f"({model_vocab_size}); the corpus could contain unusable ids"
        )
    vocab_size = model_vocab_size if model_vocab_size is not None else tok_vocab

    split_name = split or "unspecified"
    source_tag = recipe.corpus_source or "inline-text"
    corpus_id = f"{Path(source_tag).stem or 'corpus'}-{split_name}-{word_count}w"
    return write_corpus(
        out_path,
        ids,
        corpus_id=corpus_id,
        vocab_size=vocab_size,
        source=f"{source_tag}:{split_name}",
        extra={"word_count": int(word_count), "split": split_name},
    )
