"""Closed caption vocabulary and tokenizer."""

from __future__ import annotations

from functools import lru_cache
from importlib import resources
from typing import Dict, Sequence

import numpy as np

PAD, BOS, EOS, UNK = "<pad>", "<bos>", "<eos>", "<unk>"


class Vocab:
    def __init__(self, words: Sequence[str]):
        self.words = list(words)
        self.index: Dict[str, int] = {w: i for i, w in enumerate(self.words)}
        if len(self.index) != len(self.words):
            raise ValueError("duplicate words in vocabulary")
        self.pad_id = self.index[PAD]
        self.bos_id = self.index[BOS]
        self.eos_id = self.index[EOS]
        self.unk_id = self.index[UNK]

    def __len__(self) -> int:
        return len(self.words)

    def __contains__(self, word: str) -> bool:
        return word in self.index

    def id(self, word: str) -> int:
        return self.index.get(word, self.unk_id)


@lru_cache(maxsize=1)
def default_vocab() -> Vocab:
    text = resources.files("mtclip.synthdata").joinpath("vocab.txt").read_text(encoding="utf-8")
    return Vocab([w.strip() for w in text.splitlines() if w.strip()])


VOCAB_SIZE = 41


def tokenize(caption: str, vocab: Vocab | None = None, context_length: int = 16) -> np.ndarray:
    """``[BOS, word ids..., EOS, PAD...]`` of length ``context_length``.

    Unknown words map to UNK. Over-long captions are truncated so that EOS
    always occupies the final slot.
    """
    vocab = vocab or default_vocab()
    ids = [vocab.id(w) for w in caption.lower().split()]
    ids = ids[: context_length - 2]
    seq = [vocab.bos_id] + ids + [vocab.eos_id]
    seq += [vocab.pad_id] * (context_length - len(seq))
    return np.asarray(seq, dtype=np.int64)


def tokenize_batch(captions: Sequence[str], vocab: Vocab | None = None, context_length: int = 16) -> np.ndarray:
    return np.stack([tokenize(c, vocab, context_length) for c in captions]) if captions else np.zeros(
        (0, context_length), dtype=np.int64
    )
