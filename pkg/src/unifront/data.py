"""Corpus and lexicon ingestion, label validation and batch bucketing.

File formats
------------
Corpus: JSONL, one utterance per line with whitespace-separated
per-character fields::

    {"text": "中国", "cws": "B E", "pos": "ns ns", "syl": "zhong guo",
     "tone": "1 2", "pros": "0 3"}

"pos" is optional.  Lines whose object contains the key "_meta" are
reserved for run metadata and skipped by the loader.

Lexicon: one char per line, tab separated pronunciations::

    中\tzhong:1\tzhong:4

Lines starting with '#' are comments.

Embeddings: word2vec text format ("count dim" header, then one
"char v1 ... vdim" line per char).
"""
from __future__ import annotations

import json
import logging
import random
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .vocab import PROSODY_IP, VocabSet

log = logging.getLogger(__name__)


class CorpusFormatError(ValueError):
    pass


class LexiconFormatError(ValueError):
    pass


class EmbeddingFormatError(ValueError):
    pass


# ---------------------------------------------------------------------------
# BMES helpers
# ---------------------------------------------------------------------------

def word_lengths_to_bmes(lengths: Sequence[int]) -> list[str]:
    """Tags for a segmentation given by word lengths (all >= 1)."""
    tags: list[str] = []
    for n in lengths:
        if n < 1:
            raise ValueError("word length must be >= 1")
        if n == 1:
            tags.append("S")
        else:
            tags.extend(["B"] + ["M"] * (n - 2) + ["E"])
    return tags


def bmes_spans(tags: Sequence[str]) -> list[tuple[int, int]]:
    """Word spans (start, end) inclusive.  Input must be valid BMES."""
    if not is_valid_bmes(tags):
        raise ValueError(f"invalid BMES sequence {list(tags)}")
    spans = []
    start = 0
    for i, t in enumerate(tags):
        if t in ("B", "S"):
            start = i
        if t in ("E", "S"):
            spans.append((start, i))
    return spans


def is_valid_bmes(tags: Sequence[str]) -> bool:
    """True iff ``tags`` is producible by segmenting some word list.

    B opens a word that must be closed by E, with only M in between;
    S stands alone.  An open word at the end of the sequence is invalid.
    """
    open_word = False
    for t in tags:
        if t == "B":
            if open_word:
                return False
            open_word = True
        elif t == "M":
            if not open_word:
                return False
        elif t == "E":
            if not open_word:
                return False
            open_word = False
        elif t == "S":
            if open_word:
                return False
        else:
            return False
    return not open_word and len(tags) > 0


# ---------------------------------------------------------------------------
# Lexicon
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Pronunciation:
    syllable: str  # toneless base syllable; Erhua variants are distinct symbols
    tone: int  # 1..5, 5 = neutral


class Lexicon:
    """Character -> ordered candidate pronunciations."""

    def __init__(self, entries: dict[str, list[Pronunciation]]):
        for char, prons in entries.items():
            if not prons:
                raise LexiconFormatError(f"char {char!r} has no pronunciations")
        self._entries = dict(entries)

    @property
    def entries(self) -> dict[str, list[Pronunciation]]:
        return self._entries

    def __contains__(self, char: str) -> bool:
        return char in self._entries

    def __len__(self) -> int:
        return len(self._entries)

    def pronunciations(self, char: str) -> list[Pronunciation]:
        return self._entries.get(char, [])

    def is_polyphone(self, char: str) -> bool:
        return len(self._entries.get(char, ())) > 1

    def chars(self) -> list[str]:
        return sorted(self._entries)

    def polyphones(self) -> list[str]:
        return [c for c in self.chars() if self.is_polyphone(c)]

    def syllables(self) -> list[str]:
        syls = {p.syllable for prons in self._entries.values() for p in prons}
        return sorted(syls)

    @classmethod
    def load(cls, path: str | Path) -> "Lexicon":
        entries: dict[str, list[Pronunciation]] = {}
        with open(path, encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, 1):
                line = line.rstrip("\n")
                if not line or line.startswith("#"):
                    continue
                parts = line.split("\t")
                if len(parts) < 2:
                    raise LexiconFormatError(f"{path}:{lineno}: need char + pronunciation")
                char, prons = parts[0], []
                for item in parts[1:]:
                    try:
                        syl, tone = item.rsplit(":", 1)
                        prons.append(Pronunciation(syl, int(tone)))
                    except ValueError:
                        raise LexiconFormatError(
                            f"{path}:{lineno}: bad pronunciation {item!r}, want syl:tone"
                        ) from None
                entries[char] = prons
        return cls(entries)

    def save(self, path: str | Path, meta: dict | None = None) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            if meta is not None:
                fh.write("# " + json.dumps(meta, sort_keys=True, ensure_ascii=False) + "\n")
            for char in self.chars():
                prons = "\t".join(f"{p.syllable}:{p.tone}" for p in self._entries[char])
                fh.write(f"{char}\t{prons}\n")


def build_polyphone_mask(chars: Sequence[str], lexicon: Lexicon) -> list[bool]:
    """True where the lexicon lists more than one pronunciation.

    Unknown characters map to False.
    """
    return [lexicon.is_polyphone(c) for c in chars]


# ---------------------------------------------------------------------------
# Utterance
# ---------------------------------------------------------------------------

@dataclass
class Utterance:
    """One example: characters plus aligned per-character label sequences.

    ``prosody[i]`` is the strongest break after character i
    (0 none, 1 PW, 2 PP, 3 IP); a level-L break implies every lower level.
    """

    chars: str
    cws: list[str]
    phonemes: list[str]
    tones: list[int]
    prosody: list[int]
    polyphone_mask: list[bool]
    pos: list[str] | None = None

    def __len__(self) -> int:
        return len(self.chars)

    def validate(self) -> None:
        n = len(self.chars)
        if n < 1:
            raise CorpusFormatError("utterance must contain at least one character")
        for name, seq in (
            ("cws", self.cws),
            ("syl", self.phonemes),
            ("tone", self.tones),
            ("pros", self.prosody),
            ("polyphone_mask", self.polyphone_mask),
        ):
            if len(seq) != n:
                raise CorpusFormatError(
                    f"field {name!r} has length {len(seq)}, expected {n}"
                )
        if self.pos is not None and len(self.pos) != n:
            raise CorpusFormatError(
                f"field 'pos' has length {len(self.pos)}, expected {n}"
            )
        if not is_valid_bmes(self.cws):
            raise CorpusFormatError(f"invalid BMES sequence {self.cws}")
        if any(t < 1 or t > 5 for t in self.tones):
            raise CorpusFormatError("tones must lie in 1..5")
        if any(p < 0 or p > 3 for p in self.prosody):
            raise CorpusFormatError("prosody labels must lie in 0..3")
        if self.prosody[-1] != PROSODY_IP:
            raise CorpusFormatError("last prosody label must be IP")


def utterance_from_record(rec: dict, lexicon: Lexicon) -> Utterance:
    try:
        text = rec["text"]
        cws = rec["cws"].split()
        phonemes = rec["syl"].split()
        tones = [int(t) for t in rec["tone"].split()]
        prosody = [int(p) for p in rec["pros"].split()]
    except KeyError as exc:
        raise CorpusFormatError(f"missing field {exc.args[0]!r}") from None
    except ValueError as exc:
        raise CorpusFormatError(f"bad numeric label: {exc}") from None
    pos = rec["pos"].split() if "pos" in rec else None
    utt = Utterance(
        chars=text,
        cws=cws,
        phonemes=phonemes,
        tones=tones,
        prosody=prosody,
        # never trusted from the file
        polyphone_mask=build_polyphone_mask(text, lexicon),
        pos=pos,
    )
    utt.validate()
    return utt


def load_corpus(
    path: str | Path,
    vocab: VocabSet | None,
    lexicon: Lexicon,
) -> list[Utterance]:
    """Load a JSONL corpus, re-deriving the polyphone mask from the lexicon.

    ``vocab`` is only used for out-of-vocabulary accounting; symbols it does
    not cover fall back to UNK at encode time.
    """
    utts: list[Utterance] = []
    unknown_chars = 0
    oov_chars = 0
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise CorpusFormatError(f"{path}:{lineno}: malformed JSON ({exc.msg})") from None
            if "_meta" in rec:
                continue
            try:
                utt = utterance_from_record(rec, lexicon)
            except CorpusFormatError as exc:
                raise CorpusFormatError(f"{path}:{lineno}: {exc}") from None
            unknown_chars += sum(1 for c in utt.chars if c not in lexicon)
            if vocab is not None:
                oov_chars += sum(1 for c in utt.chars if c not in vocab.char)
            utts.append(utt)
    if unknown_chars:
        log.warning(
            "%d character(s) missing from the lexicon; using UNK pronunciation", unknown_chars
        )
    if oov_chars:
        log.warning("%d character(s) outside the char vocab; UNK-embedded", oov_chars)
    return utts


def save_corpus(path: str | Path, utts: Iterable[Utterance], meta: dict | None = None) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        if meta is not None:
            fh.write(json.dumps({"_meta": meta}, sort_keys=True, ensure_ascii=False) + "\n")
        for utt in utts:
            rec = {
                "text": utt.chars,
                "cws": " ".join(utt.cws),
                "syl": " ".join(utt.phonemes),
                "tone": " ".join(str(t) for t in utt.tones),
                "pros": " ".join(str(p) for p in utt.prosody),
            }
            if utt.pos is not None:
                rec["pos"] = " ".join(utt.pos)
            fh.write(json.dumps(rec, sort_keys=True, ensure_ascii=False) + "\n")


# ---------------------------------------------------------------------------
# Pre-trained character embeddings
# ---------------------------------------------------------------------------

@dataclass
class EmbeddingTable:
    dim: int
    vectors: dict[str, np.ndarray]
    unk_vector: np.ndarray

    def lookup(self, char: str) -> np.ndarray:
        return self.vectors.get(char, self.unk_vector)

    def matrix_for(self, char_vocab) -> np.ndarray:
        """Embedding matrix aligned to a char vocab; PAD row is zero."""
        mat = np.zeros((len(char_vocab), self.dim), dtype=np.float32)
        for idx, sym in enumerate(char_vocab.symbols):
            if idx == char_vocab.pad_id:
                continue
            mat[idx] = self.lookup(sym)
        return mat


def load_embeddings(path: str | Path, dim: int) -> EmbeddingTable:
    """Read word2vec-text embeddings; the UNK vector is the mean of all rows."""
    vectors: dict[str, np.ndarray] = {}
    with open(path, encoding="utf-8") as fh:
        header = fh.readline().split()
        if len(header) != 2:
            raise EmbeddingFormatError("expected 'count dim' header")
        count, file_dim = int(header[0]), int(header[1])
        if file_dim != dim:
            raise EmbeddingFormatError(f"embedding dim {file_dim} != requested {dim}")
        for lineno, line in enumerate(fh, 2):
            parts = line.rstrip("\n").split(" ")
            if len(parts) != dim + 1:
                raise EmbeddingFormatError(
                    f"{path}:{lineno}: expected {dim + 1} fields, got {len(parts)}"
                )
            char = parts[0]
            if char in vectors:
                log.warning("duplicate embedding for %r; last wins", char)
            vectors[char] = np.asarray([float(v) for v in parts[1:]], dtype=np.float32)
    if len(vectors) != count:
        log.warning("embedding header count %d != %d rows read", count, len(vectors))
    if not vectors:
        raise EmbeddingFormatError("embedding file contains no vectors")
    unk = np.mean(np.stack(list(vectors.values())), axis=0)
    return EmbeddingTable(dim=dim, vectors=vectors, unk_vector=unk.astype(np.float32))


def save_embeddings(path: str | Path, table: EmbeddingTable) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(f"{len(table.vectors)} {table.dim}\n")
        for char in sorted(table.vectors):
            vals = " ".join(repr(float(v)) for v in table.vectors[char])
            fh.write(f"{char} {vals}\n")


# ---------------------------------------------------------------------------
# Batch bucketing
# ---------------------------------------------------------------------------

@dataclass
class BatchPlan:
    bounds: list[int]
    batches: list[list[Utterance]] = field(default_factory=list)
    n_dropped: int = 0

    @property
    def n_placed(self) -> int:
        return sum(len(b) for b in self.batches)


def bucket_bounds(n_buckets: int, upper_bound: int) -> list[int]:
    """Evenly spaced integer upper bounds ending exactly at ``upper_bound``."""
    if n_buckets < 1:
        raise ValueError("n_buckets must be >= 1")
    if upper_bound < n_buckets:
        raise ValueError("upper_bound must be >= n_buckets")
    return [upper_bound * (i + 1) // n_buckets for i in range(n_buckets)]


def bucket_batches(
    utts: Sequence[Utterance],
    n_buckets: int,
    upper_bound: int,
    batch_size: int,
    seed: int,
) -> BatchPlan:
    """Group utterances into length buckets and shuffle into batches.

    Each batch is drawn from a single bucket.  Utterances longer than the
    final bound are dropped (counted in the plan).  Deterministic in ``seed``.
    """
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    bounds = bucket_bounds(n_buckets, upper_bound)
    buckets: list[list[Utterance]] = [[] for _ in bounds]
    dropped = 0
    for utt in utts:
        n = len(utt)
        for b, bound in enumerate(bounds):
            if n <= bound:
                buckets[b].append(utt)
                break
        else:
            dropped += 1
    if dropped:
        log.info("dropped %d utterance(s) longer than %d", dropped, bounds[-1])

    rng = random.Random(seed)
    batches: list[list[Utterance]] = []
    for bucket in buckets:
        rng.shuffle(bucket)
        for i in range(0, len(bucket), batch_size):
            batches.append(bucket[i : i + batch_size])
    rng.shuffle(batches)
    return BatchPlan(bounds=bounds, batches=batches, n_dropped=dropped)


__all__ = [
    "BatchPlan",
    "CorpusFormatError",
    "EmbeddingFormatError",
    "EmbeddingTable",
    "Lexicon",
    "LexiconFormatError",
    "Pronunciation",
    "Utterance",
    "bmes_spans",
    "bucket_batches",
    "bucket_bounds",
    "build_polyphone_mask",
    "is_valid_bmes",
    "load_corpus",
    "load_embeddings",
    "save_corpus",
    "save_embeddings",
    "utterance_from_record",
    "word_lengths_to_bmes",
]
