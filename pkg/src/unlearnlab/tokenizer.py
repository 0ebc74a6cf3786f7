"""Word-level tokenizer.

Words are lowercased runs of letters/digits (apostrophes allowed inside a
word) and every other non-space character is its own token, so answer word
``i`` is token ``i``: per-word UW/GW labels apply to tokens unchanged.
"""

from __future__ import annotations

import re

WORD_RE = re.compile(r"[a-z0-9]+(?:'[a-z0-9]+)*|[^\sa-z0-9]")

PAD, UNK, BOS, EOS, MASK = "<pad>", "<unk>", "<bos>", "<eos>", "<mask>"
SPECIALS = (PAD, UNK, BOS, EOS, MASK)


def split_words(text):
    return WORD_RE.findall(text.lower())


def normalize(text):
    return " ".join(split_words(text))


class Tokenizer:
    def __init__(self, words):
        self.itos = list(SPECIALS)
        seen = set(self.itos)
        for w in words:
            if w in seen:
                continue
            if not WORD_RE.fullmatch(w):
                raise ValueError(f"not a normalized word: {w!r}")
            seen.add(w)
            self.itos.append(w)
        self.stoi = {w: i for i, w in enumerate(self.itos)}

    @classmethod
    def from_texts(cls, texts, extra=()):
        vocab = set()
        for t in list(texts) + list(extra):
            vocab.update(split_words(t))
        return cls(sorted(vocab))

    pad_id = property(lambda self: 0)
    unk_id = property(lambda self: 1)
    bos_id = property(lambda self: 2)
    eos_id = property(lambda self: 3)
    mask_id = property(lambda self: 4)

    @property
    def special_ids(self):
        return frozenset(range(len(SPECIALS)))

    def __len__(self):
        return len(self.itos)

    @property
    def vocab_size(self):
        return len(self.itos)

    def encode(self, text):
        return [self.stoi.get(w, self.unk_id) for w in split_words(text)]

    def encode_words(self, words):
        return [self.stoi.get(w.lower(), self.unk_id) for w in words]

    def decode(self, ids):
        skip = (self.pad_id, self.bos_id, self.eos_id)
        return " ".join(self.itos[i] for i in ids if i not in skip)

    def to_words(self, ids):
        return [self.itos[i] for i in ids]
