"""Tokenization and vocabulary handling shared by every model and metric.

One tokenizer rule is used everywhere (questions, answers, OCR strings,
captions) so that answer matching and metric scoring stay consistent.
"""

from __future__ import annotations

import json
import re
from collections import Counter

PAD, SOS, EOS, UNK = "<pad>", "<sos>", "<eos>", "<unk>"
RESERVED = (PAD, SOS, EOS, UNK)
PAD_ID, SOS_ID, EOS_ID, UNK_ID = 0, 1, 2, 3

DEFAULT_MAX_LEN = 20

# Words keep internal hyphens/apostrophes ("ec-634", "don't"); any other
# punctuation becomes its own token.
_TOKEN_RE = re.compile(r"\w+(?:[-']\w+)*|[^\w\s]")


def tokenize(text: str) -> list[str]:
    """Lowercase and split text into words and punctuation tokens."""
    return _TOKEN_RE.findall(text.lower())


def match_words(text: str) -> tuple[str, ...]:
    """Words used for answer/OCR comparison: tokenized, punctuation dropped."""
    return tuple(t for t in tokenize(text) if any(ch.isalnum() for ch in t))


class Vocabulary:
    """Bidirectional token<->id map with ids 0..3 reserved for specials."""

    def __init__(self, words=()):
        self._id_to_word = list(RESERVED)
        seen = set(RESERVED)
        for word in words:
            if word in seen:
                raise ValueError(f"duplicate or reserved word in vocabulary: {word!r}")
            seen.add(word)
            self._id_to_word.append(word)
        self._word_to_id = {w: i for i, w in enumerate(self._id_to_word)}

    def __len__(self) -> int:
        return len(self._id_to_word)

    def __contains__(self, word: str) -> bool:
        return word in self._word_to_id

    def __eq__(self, other) -> bool:
        return isinstance(other, Vocabulary) and self._id_to_word == other._id_to_word

    def id_for(self, word: str) -> int:
        """Id of a word, <unk> id when absent."""
        return self._word_to_id.get(word, UNK_ID)

    def word_for(self, idx: int) -> str:
        if not 0 <= idx < len(self._id_to_word):
            raise ValueError(f"id {idx} out of range for vocabulary of size {len(self)}")
        return self._id_to_word[idx]

    def words(self) -> list[str]:
        """Non-reserved words in id order."""
        return self._id_to_word[len(RESERVED):]

    def save(self, path):
        with open(path, "w", encoding="utf-8") as fh:
            json.dump({"words": self.words()}, fh, ensure_ascii=False)
            fh.write("\n")

    @classmethod
    def load(cls, path) -> "Vocabulary":
        with open(path, encoding="utf-8") as fh:
            return cls(json.load(fh)["words"])


def build_vocab(questions, min_count: int = 1) -> Vocabulary:
    """Vocabulary over all words with frequency >= min_count.

    Id order is deterministic: frequency descending, then lexicographic.
    """
    if min_count < 1:
        raise ValueError("min_count must be >= 1")
    counts = Counter()
    for question in questions:
        counts.update(question)
    kept = sorted(
        (w for w, c in counts.items() if c >= min_count),
        key=lambda w: (-counts[w], w),
    )
    return Vocabulary(kept)


def encode_question(question, vocab: Vocabulary, max_len: int = DEFAULT_MAX_LEN) -> list[int]:
    """<sos> + word ids + <eos>, with word ids truncated to max_len."""
    if max_len < 1:
        raise ValueError("max_len must be >= 1")
    ids = [vocab.id_for(w) for w in list(question)[:max_len]]
    return [SOS_ID] + ids + [EOS_ID]


def decode_ids(ids, vocab: Vocabulary) -> list[str]:
    """Words for an id sequence: drops <sos>/<pad>, stops at the first <eos>."""
    words = []
    for idx in ids:
        if idx == EOS_ID:
            break
        if idx in (SOS_ID, PAD_ID):
            continue
        words.append(vocab.word_for(idx))
    return words
