"""Evaluation metrics: word-span (block) F1 for segmentation, POS tagging
accuracy, polyphone-restricted G2P accuracy, and stacked per-level prosody
F1.  All corpus-level numbers are micro-averages over stored counts, so
reports from disjoint corpora merge exactly.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Sequence

import torch

from .data import Lexicon, Utterance, bmes_spans, is_valid_bmes
from .inference import DecodeOptions, decode_batch
from .training import encode_batch
from .vocab import VocabSet

PROSODY_LEVELS = {"pw": 1, "pp": 2, "ip": 3}


def canonicalize_bmes(tags: Sequence[str]) -> list[str]:
    """Repair an arbitrary tag sequence into valid BMES.

    Pass 1 (left to right): an M or E whose predecessor is not B/M becomes
    B or S respectively.  Pass 2 (right to left): a B or M not followed by
    M/E becomes S or E.  Unknown symbols count as S.
    """
    fixed = [t if t in ("B", "M", "E", "S") else "S" for t in tags]
    for i, t in enumerate(fixed):
        prev = fixed[i - 1] if i > 0 else None
        if t == "M" and prev not in ("B", "M"):
            fixed[i] = "B"
        elif t == "E" and prev not in ("B", "M"):
            fixed[i] = "S"
    for i in range(len(fixed) - 1, -1, -1):
        nxt = fixed[i + 1] if i + 1 < len(fixed) else None
        if fixed[i] == "B" and nxt not in ("M", "E"):
            fixed[i] = "S"
        elif fixed[i] == "M" and nxt not in ("M", "E"):
            fixed[i] = "E"
    return fixed


def block_counts(gold: Sequence[str], pred: Sequence[str]) -> tuple[int, int, int]:
    """(matched, gold spans, predicted spans); invalid input is repaired."""
    if len(gold) != len(pred):
        raise ValueError("gold and predicted tag sequences must align")
    if not is_valid_bmes(gold):
        gold = canonicalize_bmes(gold)
    if not is_valid_bmes(pred):
        pred = canonicalize_bmes(pred)
    gold_spans = set(bmes_spans(gold))
    pred_spans = set(bmes_spans(pred))
    return len(gold_spans & pred_spans), len(gold_spans), len(pred_spans)


def _prf(matched: int, n_gold: int, n_pred: int) -> tuple[float, float, float]:
    precision = matched / n_pred if n_pred else 0.0
    recall = matched / n_gold if n_gold else 0.0
    f1 = (
        2 * precision * recall / (precision + recall)
        if precision + recall > 0
        else 0.0
    )
    return precision, recall, f1


def block_f1(gold: Sequence[str], pred: Sequence[str]) -> tuple[float, float, float]:
    """Span-exact precision/recall/F1 over words extracted from BMES tags."""
    return _prf(*block_counts(gold, pred))


def g2p_accuracy(
    golds: Sequence[Sequence],
    preds: Sequence[Sequence],
    masks: Sequence[Sequence[bool]],
) -> float | None:
    """Accuracy restricted to polyphone positions; None when there are none.

    Predictions shorter than gold count the missing positions as errors.
    """
    correct = total = 0
    for gold, pred, mask in zip(golds, preds, masks):
        if len(gold) != len(mask):
            raise ValueError("gold and mask must align")
        for i, (g, m) in enumerate(zip(gold, mask)):
            if not m:
                continue
            total += 1
            if i < len(pred) and pred[i] == g:
                correct += 1
    if total == 0:
        return None
    return correct / total


@dataclass
class LevelCounts:
    tp: int = 0
    fp: int = 0
    fn: int = 0

    def add(self, other: "LevelCounts") -> None:
        self.tp += other.tp
        self.fp += other.fp
        self.fn += other.fn

    @property
    def f1(self) -> float:
        denom = 2 * self.tp + self.fp + self.fn
        if denom == 0:
            return 1.0  # vacuous agreement: no positives on either side
        return 2 * self.tp / denom


def stacked_prosody_counts(
    gold: Sequence[int], pred: Sequence[int]
) -> dict[str, LevelCounts]:
    """Per-level binary counts; a position is positive when label >= level.

    Predictions shorter than gold contribute misses at the tail.
    """
    out = {name: LevelCounts() for name in PROSODY_LEVELS}
    for name, level in PROSODY_LEVELS.items():
        c = out[name]
        for i, g in enumerate(gold):
            p = pred[i] if i < len(pred) else -1
            gpos, ppos = g >= level, p >= level
            if gpos and ppos:
                c.tp += 1
            elif ppos:
                c.fp += 1
            elif gpos:
                c.fn += 1
        for i in range(len(gold), len(pred)):
            if pred[i] >= level:
                c.fp += 1
    return out


def stacked_prosody_f1(
    gold: Sequence[int], pred: Sequence[int]
) -> tuple[float, float, float]:
    counts = stacked_prosody_counts(gold, pred)
    return counts["pw"].f1, counts["pp"].f1, counts["ip"].f1


@dataclass
class MetricsReport:
    """Metric values plus the counts they were computed from."""

    cws_block_f1: float | None = None
    pos_acc: float | None = None
    g2p_acc: float | None = None
    pw_f1: float | None = None
    pp_f1: float | None = None
    ip_f1: float | None = None
    counts: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "cws_block_f1": self.cws_block_f1,
            "pos_acc": self.pos_acc,
            "g2p_acc": self.g2p_acc,
            "pw_f1": self.pw_f1,
            "pp_f1": self.pp_f1,
            "ip_f1": self.ip_f1,
            "counts": self.counts,
        }

    def to_json(self, meta: dict | None = None) -> str:
        payload = self.to_dict()
        if meta is not None:
            payload["meta"] = meta
        return json.dumps(payload, sort_keys=True, ensure_ascii=False, indent=2)


@dataclass
class RunCounts:
    """Accumulated per-position counts for one decoding run."""

    g2p_correct: int = 0
    g2p_total: int = 0
    prosody: dict[str, LevelCounts] = field(
        default_factory=lambda: {name: LevelCounts() for name in PROSODY_LEVELS}
    )

    def merge(self, other: "RunCounts") -> None:
        self.g2p_correct += other.g2p_correct
        self.g2p_total += other.g2p_total
        for name in PROSODY_LEVELS:
            self.prosody[name].add(other.prosody[name])

    def to_report(self) -> MetricsReport:
        return MetricsReport(
            g2p_acc=(
                self.g2p_correct / self.g2p_total if self.g2p_total else None
            ),
            pw_f1=self.prosody["pw"].f1,
            pp_f1=self.prosody["pp"].f1,
            ip_f1=self.prosody["ip"].f1,
            counts={
                "g2p": {"correct": self.g2p_correct, "total": self.g2p_total},
                "prosody": {
                    name: {"tp": c.tp, "fp": c.fp, "fn": c.fn}
                    for name, c in self.prosody.items()
                },
            },
        )


def evaluate_run(
    model,
    utts: Sequence[Utterance],
    lexicon: Lexicon,
    options: DecodeOptions,
    chunk_size: int = 64,
) -> MetricsReport:
    """Decode a corpus and score it against its gold labels.

    Predictions are truncated or error-padded to the gold length; metrics
    are micro-averaged over positions.
    """
    if not utts:
        raise ValueError("corpus is empty")
    vocabs = model.vocabs
    counts = RunCounts()
    for lo in range(0, len(utts), chunk_size):
        chunk = utts[lo : lo + chunk_size]
        preds = decode_batch(model, [u.chars for u in chunk], lexicon, options)
        for utt, pred in zip(chunk, preds):
            n = len(utt)
            pred_syls = vocabs.phoneme.decode(pred.phonemes[:n])
            for i, (gold_syl, m) in enumerate(zip(utt.phonemes, utt.polyphone_mask)):
                if not m:
                    continue
                counts.g2p_total += 1
                if i < len(pred_syls) and pred_syls[i] == gold_syl:
                    counts.g2p_correct += 1
            pred_levels = [
                int(s) if s.isdigit() else -1
                for s in vocabs.prosody.decode(pred.prosody[:n])
            ]
            per_utt = stacked_prosody_counts(utt.prosody, pred_levels)
            for name in PROSODY_LEVELS:
                counts.prosody[name].add(per_utt[name])
    return counts.to_report()


def evaluate_tagger(
    aux_model,
    utts: Sequence[Utterance],
    vocabs: VocabSet,
    embedding_matrix,
    chunk_size: int = 64,
) -> MetricsReport:
    """Score an auxiliary tagger: segmentation block F1 and POS accuracy."""
    if not utts:
        raise ValueError("corpus is empty")
    embedding = torch.as_tensor(embedding_matrix, dtype=torch.float32)
    matched = n_gold = n_pred = 0
    pos_correct = pos_total = 0

    def real_to_symbols(ids: Sequence[int], vocab) -> list[str]:
        return [vocab.symbol(i + vocab.n_specials) for i in ids]

    aux_model.eval()
    with torch.no_grad():
        for lo in range(0, len(utts), chunk_size):
            chunk = utts[lo : lo + chunk_size]
            batch = encode_batch(chunk, vocabs)
            out = aux_model(embedding[batch.char_ids], batch.mask)
            decoded = aux_model.decode_tags(out, batch.lengths)
            if "cws" in decoded:
                for utt, ids in zip(chunk, decoded["cws"]):
                    m, g, p = block_counts(utt.cws, real_to_symbols(ids, vocabs.cws))
                    matched, n_gold, n_pred = matched + m, n_gold + g, n_pred + p
            if "pos" in decoded:
                for utt, ids in zip(chunk, decoded["pos"]):
                    if utt.pos is None:
                        continue
                    pred = real_to_symbols(ids, vocabs.pos)
                    pos_total += len(utt.pos)
                    pos_correct += sum(1 for a, b in zip(utt.pos, pred) if a == b)
    report = MetricsReport(counts={})
    if n_gold or n_pred:
        _, _, f1 = _prf(matched, n_gold, n_pred)
        report.cws_block_f1 = f1
        report.counts["cws"] = {"matched": matched, "gold": n_gold, "pred": n_pred}
    if pos_total:
        report.pos_acc = pos_correct / pos_total
        report.counts["pos"] = {"correct": pos_correct, "total": pos_total}
    return report


def format_report_table(rows: dict[str, MetricsReport]) -> str:
    """Aligned text table: one row per setting, G2P% and per-level prosody F1."""

    def fmt(value: float | None, pct: bool = False) -> str:
        if value is None:
            return "-"
        return f"{100 * value:.2f}" if pct else f"{value:.4f}"

    header = ["Settings", "G2P acc(%)", "PW", "PP", "IP"]
    table = [header]
    for name, rep in rows.items():
        table.append(
            [name, fmt(rep.g2p_acc, pct=True), fmt(rep.pw_f1), fmt(rep.pp_f1), fmt(rep.ip_f1)]
        )
    widths = [max(len(r[i]) for r in table) for i in range(len(header))]
    lines = []
    for i, row in enumerate(table):
        lines.append("  ".join(cell.ljust(w) for cell, w in zip(row, widths)).rstrip())
        if i == 0:
            lines.append("  ".join("-" * w for w in widths))
    return "\n".join(lines)
