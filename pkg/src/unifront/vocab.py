"""Symbol tables for every label family used by the front-end.

Each family (characters, segmentation tags, POS tags, syllables, tones,
prosody breaks) gets its own bidirectional symbol<->index map.  PAD is
always index 0; decoder target families additionally reserve a GO symbol
used as the step-0 feedback input.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Sequence

PAD = "<pad>"
UNK = "<unk>"
GO = "<go>"

CWS_TAGS = ("B", "M", "E", "S")
TONE_SYMBOLS = ("1", "2", "3", "4", "5")  # 5 = neutral tone
PROSODY_SYMBOLS = ("0", "1", "2", "3")  # none / PW / PP / IP break after the char

PROSODY_NONE, PROSODY_PW, PROSODY_PP, PROSODY_IP = 0, 1, 2, 3


class VocabError(ValueError):
    pass


class Vocab:
    """Immutable symbol<->index map with reserved special symbols first."""

    def __init__(self, symbols: Iterable[str], specials: Sequence[str] = (PAD, UNK)):
        self._specials = tuple(specials)
        seen = set(self._specials)
        ordered = list(self._specials)
        for sym in symbols:
            if sym in seen:
                raise VocabError(f"duplicate symbol {sym!r}")
            seen.add(sym)
            ordered.append(sym)
        self._symbols = tuple(ordered)
        self._index = {sym: i for i, sym in enumerate(self._symbols)}

    @property
    def symbols(self) -> tuple[str, ...]:
        return self._symbols

    @property
    def n_specials(self) -> int:
        return len(self._specials)

    @property
    def pad_id(self) -> int:
        return 0

    @property
    def unk_id(self) -> int:
        return self._index[UNK]

    @property
    def go_id(self) -> int:
        if GO not in self._index:
            raise VocabError("vocab has no GO symbol")
        return self._index[GO]

    def __len__(self) -> int:
        return len(self._symbols)

    def __contains__(self, sym: str) -> bool:
        return sym in self._index

    def index(self, sym: str) -> int:
        """Index of ``sym``, falling back to UNK for unknown symbols."""
        idx = self._index.get(sym)
        if idx is None:
            return self.unk_id
        return idx

    def index_strict(self, sym: str) -> int:
        try:
            return self._index[sym]
        except KeyError:
            raise VocabError(f"unknown symbol {sym!r}") from None

    def symbol(self, idx: int) -> str:
        return self._symbols[idx]

    def encode(self, seq: Iterable[str]) -> list[int]:
        return [self.index(s) for s in seq]

    def decode(self, ids: Iterable[int]) -> list[str]:
        return [self._symbols[i] for i in ids]


@dataclass(frozen=True)
class VocabSet:
    """One vocab per label family; the single source of index truth."""

    char: Vocab
    cws: Vocab
    pos: Vocab
    phoneme: Vocab
    tone: Vocab
    prosody: Vocab

    @classmethod
    def build(
        cls,
        chars: Iterable[str],
        pos_tags: Iterable[str],
        phonemes: Iterable[str],
    ) -> "VocabSet":
        return cls(
            char=Vocab(chars),
            cws=Vocab(CWS_TAGS),
            pos=Vocab(pos_tags),
            phoneme=Vocab(phonemes, specials=(PAD, UNK, GO)),
            tone=Vocab(TONE_SYMBOLS, specials=(PAD, UNK, GO)),
            prosody=Vocab(PROSODY_SYMBOLS, specials=(PAD, UNK, GO)),
        )

    def families(self) -> dict[str, Vocab]:
        return {
            "char": self.char,
            "cws": self.cws,
            "pos": self.pos,
            "phoneme": self.phoneme,
            "tone": self.tone,
            "prosody": self.prosody,
        }

    def to_symbol_lists(self) -> dict[str, list[str]]:
        """Non-special symbols per family, for checkpoint config echoes."""
        return {
            name: list(v.symbols[v.n_specials:]) for name, v in self.families().items()
        }

    @classmethod
    def from_symbol_lists(cls, lists: dict[str, list[str]]) -> "VocabSet":
        return cls.build(
            chars=lists["char"], pos_tags=lists["pos"], phonemes=lists["phoneme"]
        )
