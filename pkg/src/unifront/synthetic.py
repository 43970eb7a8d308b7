"""Deterministic synthetic corpus generation for desk-scale experiments.

Characters are drawn uniformly from the lexicon; every label is then a
deterministic function of the character sequence, so the tagging and
pronunciation tasks are learnable:

* segmentation: a word starting at char c has length ``1 + (id(c) % 3)``
  (clipped at the utterance end), where id() is the char's rank in the
  sorted lexicon;
* POS: each word gets tag ``p<id(last char of word) % n_pos>``, repeated
  on every char of the word;
* pronunciation of a polyphone at position i: candidate index
  ``(syllable_id(i-1) + bmes_index(i)) % n_candidates`` where
  syllable_id is the rank of the previous chosen base syllable among the
  lexicon's syllables (0 at i=0).  Depending on the previous *phoneme*
  makes feedback correctness matter during decoding;
* prosody: word-internal positions get 0; a word-final char c gets PP when
  ``id(c) % 3 == 0`` and PW otherwise; the final char is always IP.
"""
from __future__ import annotations

import random
from typing import Sequence

import numpy as np

from .data import EmbeddingTable, Lexicon, Pronunciation, Utterance, build_polyphone_mask
from .vocab import CWS_TAGS, PROSODY_IP, PROSODY_PP, PROSODY_PW, VocabSet

_DEFAULT_ENTRIES: dict[str, list[tuple[str, int]]] = {
    # polyphones
    "的": [("de", 5), ("di", 2), ("di", 4)],
    "地": [("de", 5), ("di", 4)],
    "得": [("de", 5), ("dei", 3), ("de", 2)],
    "行": [("xing", 2), ("hang", 2)],
    "中": [("zhong", 1), ("zhong", 4)],
    "乐": [("le", 4), ("yue", 4)],
    "重": [("zhong", 4), ("chong", 2)],
    "还": [("hai", 2), ("huan", 2)],
    "长": [("chang", 2), ("zhang", 3)],
    "会": [("hui", 4), ("kuai", 4)],
    "都": [("dou", 1), ("du", 1)],
    "为": [("wei", 4), ("wei", 2)],
    "花": [("hua", 1), ("huar", 1)],  # Erhua variant as a distinct syllable
    # monophones
    "北": [("bei", 3)],
    "京": [("jing", 1)],
    "人": [("ren", 2)],
    "民": [("min", 2)],
    "国": [("guo", 2)],
    "天": [("tian", 1)],
    "气": [("qi", 4)],
    "学": [("xue", 2)],
    "生": [("sheng", 1)],
    "我": [("wo", 3)],
    "你": [("ni", 3)],
    "他": [("ta", 1)],
    "们": [("men", 5)],
    "是": [("shi", 4)],
    "在": [("zai", 4)],
    "有": [("you", 3)],
    "大": [("da", 4)],
    "小": [("xiao", 3)],
    "山": [("shan", 1)],
    "水": [("shui", 3)],
    "鸟": [("niao", 3)],
    "风": [("feng", 1)],
    "月": [("yue", 4)],
    "日": [("ri", 4)],
    "时": [("shi", 2)],
    "间": [("jian", 1)],
}


def default_lexicon() -> Lexicon:
    return Lexicon(
        {
            char: [Pronunciation(s, t) for s, t in prons]
            for char, prons in _DEFAULT_ENTRIES.items()
        }
    )


def pos_tag_names(n_pos: int) -> list[str]:
    return [f"p{i}" for i in range(n_pos)]


def vocab_for_lexicon(lexicon: Lexicon, n_pos: int) -> VocabSet:
    return VocabSet.build(
        chars=lexicon.chars(),
        pos_tags=pos_tag_names(n_pos),
        phonemes=lexicon.syllables(),
    )


def _segment(char_ids: list[int]) -> list[int]:
    """Word lengths under the char-determined segmentation rule."""
    lengths = []
    i = 0
    while i < len(char_ids):
        n = min(1 + char_ids[i] % 3, len(char_ids) - i)
        lengths.append(n)
        i += n
    return lengths


def generate_synthetic_corpus(
    n: int,
    seed: int,
    lexicon: Lexicon,
    n_pos: int = 8,
    min_len: int = 4,
    max_len: int = 12,
    chars: Sequence[str] | None = None,
) -> list[Utterance]:
    """Generate ``n`` utterances whose labels follow the module's rules.

    ``chars`` restricts sampling to a subset of the lexicon (the labeling
    rules stay keyed to the full lexicon), which models the realistic case
    of a lexicon broader than the labelled corpus.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    if len(lexicon) < 20 or len(lexicon.polyphones()) < 5:
        raise ValueError("lexicon needs >= 20 entries including >= 5 polyphones")

    chars_sorted = lexicon.chars()
    char_id = {c: i for i, c in enumerate(chars_sorted)}
    pool = chars_sorted if chars is None else sorted(chars)
    if any(c not in char_id for c in pool):
        raise ValueError("chars must be a subset of the lexicon")
    syl_id = {s: i for i, s in enumerate(lexicon.syllables())}
    bmes_index = {t: i for i, t in enumerate(CWS_TAGS)}

    rng = random.Random(seed)
    utts = []
    for _ in range(n):
        length = rng.randint(min_len, max_len)
        chars = "".join(rng.choice(pool) for _ in range(length))
        ids = [char_id[c] for c in chars]

        word_lengths = _segment(ids)
        cws: list[str] = []
        pos: list[str] = []
        prosody: list[int] = []
        i = 0
        for w, wl in enumerate(word_lengths):
            tags = ["S"] if wl == 1 else ["B"] + ["M"] * (wl - 2) + ["E"]
            cws.extend(tags)
            tag = f"p{ids[i + wl - 1] % n_pos}"
            pos.extend([tag] * wl)
            prosody.extend([0] * (wl - 1))
            last_id = ids[i + wl - 1]
            if w == len(word_lengths) - 1:
                prosody.append(PROSODY_IP)
            elif last_id % 3 == 0:
                prosody.append(PROSODY_PP)
            else:
                prosody.append(PROSODY_PW)
            i += wl

        phonemes: list[str] = []
        tones: list[int] = []
        prev_syl = 0
        for j, c in enumerate(chars):
            prons = lexicon.pronunciations(c)
            if len(prons) == 1:
                chosen = prons[0]
            else:
                chosen = prons[(prev_syl + bmes_index[cws[j]]) % len(prons)]
            phonemes.append(chosen.syllable)
            tones.append(chosen.tone)
            prev_syl = syl_id[chosen.syllable]

        utt = Utterance(
            chars=chars,
            cws=cws,
            phonemes=phonemes,
            tones=tones,
            prosody=prosody,
            polyphone_mask=build_polyphone_mask(chars, lexicon),
            pos=pos,
        )
        utt.validate()
        utts.append(utt)
    return utts


def generate_embeddings(lexicon: Lexicon, dim: int, seed: int) -> EmbeddingTable:
    """Deterministic random embedding table standing in for pre-trained vectors."""
    rng = np.random.default_rng(seed)
    vectors = {
        char: rng.normal(0.0, 0.5, size=dim).astype(np.float32)
        for char in lexicon.chars()
    }
    unk = np.mean(np.stack(list(vectors.values())), axis=0).astype(np.float32)
    return EmbeddingTable(dim=dim, vectors=vectors, unk_vector=unk)
