"""Closed whitespace vocabulary for prompts and answers."""

from __future__ import annotations

import hashlib
from pathlib import Path


class UnknownTokenError(KeyError):
    pass


class Vocabulary:
    BOS = "<bos>"
    EOS = "<eos>"
    PAD = "<pad>"
    SEP = "<sep>"
    SPECIAL = (PAD, BOS, EOS, SEP)

    def __init__(self, tokens: list[str]):
        ordered = list(self.SPECIAL) + [t for t in tokens if t not in self.SPECIAL]
        if len(set(ordered)) != len(ordered):
            dupes = sorted({t for t in ordered if ordered.count(t) > 1})
            raise ValueError(f"duplicate tokens: {dupes}")
        if len(ordered) > 512:
            raise ValueError(f"vocabulary too large: {len(ordered)} > 512")
        self.tokens = ordered
        self.index = {t: i for i, t in enumerate(ordered)}

    def __len__(self) -> int:
        return len(self.tokens)

    @property
    def pad_id(self) -> int:
        return self.index[self.PAD]

    @property
    def bos_id(self) -> int:
        return self.index[self.BOS]

    @property
    def eos_id(self) -> int:
        return self.index[self.EOS]

    @property
    def sep_id(self) -> int:
        return self.index[self.SEP]

    def encode(self, text: str) -> list[int]:
        ids = []
        for tok in text.split():
            if tok not in self.index:
                raise UnknownTokenError(f"token {tok!r} not in vocabulary")
            ids.append(self.index[tok])
        return ids

    def decode(self, ids, strip_special: bool = True) -> str:
        toks = []
        for i in ids:
            t = self.tokens[int(i)]
            if strip_special and t in self.SPECIAL:
                continue
            toks.append(t)
        return " ".join(toks)

    # serialization: one token per line, index = line number -----------------

    def dumps(self) -> str:
        return "\n".join(self.tokens) + "\n"

    def to_file(self, path: str | Path) -> None:
        Path(path).write_text(self.dumps(), encoding="utf-8")

    @classmethod
    def from_file(cls, path: str | Path) -> "Vocabulary":
        lines = Path(path).read_text(encoding="utf-8").splitlines()
        vocab = cls.__new__(cls)
        vocab.tokens = lines
        vocab.index = {t: i for i, t in enumerate(lines)}
        if [vocab.tokens[i] for i in range(4)] != list(cls.SPECIAL):
            raise ValueError(f"{path}: special tokens must occupy lines 0-3")
        return vocab

    def sha256(self) -> str:
        return hashlib.sha256(self.dumps().encode("utf-8")).hexdigest()
