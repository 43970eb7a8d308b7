"""Auto-regressive and semi-auto-regressive decoding.

In SAR mode a decoder mask derived from the input text and the lexicon
marks which steps belong to polyphonic characters.  At every non-polyphone
step the character's sole lexicon syllable both replaces the emitted
phoneme and is fed back to the next step; tone and prosody feedback stays
auto-regressive in both modes.
"""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from .data import Lexicon, Utterance
from .vocab import VocabSet

log = logging.getLogger(__name__)

MODES = ("ar", "sar")


@dataclass
class DecodeOptions:
    mode: str = "sar"
    max_steps: int | None = None  # None -> input length + 5
    stop_threshold: float = 0.5
    apply_postnet: bool = True
    ignore_stop_head: bool = False  # debugging aid: decode to max_steps

    def __post_init__(self) -> None:
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}")
        if self.max_steps is not None and self.max_steps < 1:
            raise ValueError("max_steps must be >= 1")
        if not 0.0 < self.stop_threshold < 1.0:
            raise ValueError("stop_threshold must lie in (0, 1)")

    def resolve_max_steps(self, input_length: int) -> int:
        return self.max_steps if self.max_steps is not None else input_length + 5

    def to_dict(self) -> dict:
        return dict(self.__dict__)


@dataclass
class SequencePrediction:
    """Decoded label ids; all three sequences share length stop_step."""

    phonemes: list[int]
    tones: list[int]
    prosody: list[int]
    stop_step: int
    attention: np.ndarray  # (stop_step, input_length)
    truncated: bool = False


def build_stop_decision(stop_logit: float, step: int, options: DecodeOptions) -> bool:
    """True when decoding should end after emitting this step.

    The stop head fires on sigmoid(logit) strictly greater than the
    threshold; the step cap fires unconditionally.  ``options.max_steps``
    must already be resolved to a concrete value.
    """
    if options.max_steps is None:
        raise ValueError("options.max_steps must be resolved before use")
    if step + 1 >= options.max_steps:
        return True
    if options.ignore_stop_head:
        return False
    return torch.sigmoid(torch.as_tensor(float(stop_logit))).item() > options.stop_threshold


def _substitution_ids(
    chars: str, lexicon: Lexicon, vocabs: VocabSet
) -> list[int]:
    """Phoneme id to force per position, -1 where the model's output stands.

    Positions whose character has exactly one lexicon pronunciation get that
    syllable; polyphones and out-of-lexicon characters keep model output.
    """
    subs = []
    for c in chars:
        prons = lexicon.pronunciations(c)
        if len(prons) == 1:
            subs.append(vocabs.phoneme.index(prons[0].syllable))
        else:
            subs.append(-1)
    return subs


def decode_batch(
    model,
    texts: Sequence[str],
    lexicon: Lexicon,
    options: DecodeOptions,
) -> list[SequencePrediction]:
    """Greedy decode for a batch of raw texts; pure given the model."""
    if not texts or any(len(t) == 0 for t in texts):
        raise ValueError("every input text must be non-empty")
    vocabs = model.vocabs
    lengths = [len(t) for t in texts]
    caps = [options.resolve_max_steps(n) for n in lengths]
    max_cap = max(caps)
    batch = len(texts)
    max_len = max(lengths)

    char_ids = torch.zeros(batch, max_len, dtype=torch.long)
    mask = torch.zeros(batch, max_len, dtype=torch.bool)
    for b, text in enumerate(texts):
        char_ids[b, : len(text)] = torch.tensor(vocabs.char.encode(text))
        mask[b, : len(text)] = True

    subs = torch.full((batch, max_cap), -1, dtype=torch.long)
    if options.mode == "sar":
        for b, text in enumerate(texts):
            ids = _substitution_ids(text, lexicon, vocabs)[:max_cap]
            subs[b, : len(ids)] = torch.tensor(ids)

    was_training = getattr(model, "training", False)
    if hasattr(model, "eval"):
        model.eval()
    with torch.no_grad():
        encoder = model.encode_ids(char_ids, mask)
        state = model.initial_decoder_state(batch, encoder.memory.dtype, char_ids.device)
        prev = tuple(
            torch.full((batch,), g, dtype=torch.long) for g in model.go_ids
        )
        stop_step = [0] * batch
        truncated = [False] * batch
        ph_steps, tn_steps, pr_steps, att_steps = [], [], [], []
        active = [True] * batch
        for t in range(max_cap):
            out, state = model.decoder_step(prev, state, encoder)
            ph_pred = out.phoneme_logits.argmax(dim=-1)
            emitted_ph = torch.where(subs[:, t] >= 0, subs[:, t], ph_pred)
            tn_pred = out.tone_logits.argmax(dim=-1)
            pr_pred = out.prosody_logits.argmax(dim=-1)
            ph_steps.append(out.phoneme_logits)
            tn_steps.append(out.tone_logits)
            pr_steps.append(out.prosody_logits)
            att_steps.append(out.attention_weights)
            for b in range(batch):
                if not active[b]:
                    continue
                per_utt = replace(options, max_steps=caps[b])
                if build_stop_decision(float(out.stop_logit[b]), t, per_utt):
                    active[b] = False
                    stop_step[b] = t + 1
                    truncated[b] = t + 1 >= caps[b] and (
                        options.ignore_stop_head
                        or torch.sigmoid(out.stop_logit[b]).item()
                        <= options.stop_threshold
                    )
            if not any(active):
                break
            prev = (emitted_ph, tn_pred, pr_pred)

        n_steps = len(ph_steps)
        ph_logits = torch.stack(ph_steps, dim=1)
        tn_logits = torch.stack(tn_steps, dim=1)
        pr_logits = torch.stack(pr_steps, dim=1)
        if options.apply_postnet:
            step_mask = torch.zeros(batch, n_steps, dtype=torch.bool)
            for b in range(batch):
                step_mask[b, : stop_step[b]] = True
            ph_logits, tn_logits, pr_logits = model.postnet_refine(
                (ph_logits, tn_logits, pr_logits), step_mask
            )
        ph_out = torch.where(
            subs[:, :n_steps] >= 0, subs[:, :n_steps], ph_logits.argmax(dim=-1)
        )
        tn_out = tn_logits.argmax(dim=-1)
        pr_out = pr_logits.argmax(dim=-1)
        attention = torch.stack(att_steps, dim=1)  # (B, steps, max_len)

    if was_training and hasattr(model, "train"):
        model.train()

    preds = []
    for b, text in enumerate(texts):
        n = stop_step[b]
        preds.append(
            SequencePrediction(
                phonemes=ph_out[b, :n].tolist(),
                tones=tn_out[b, :n].tolist(),
                prosody=pr_out[b, :n].tolist(),
                stop_step=n,
                attention=attention[b, :n, : len(text)].cpu().numpy(),
                truncated=truncated[b],
            )
        )
    return preds


def decode(
    model, chars: str, lexicon: Lexicon, options: DecodeOptions
) -> SequencePrediction:
    """Decode a single utterance; see decode_batch."""
    return decode_batch(model, [chars], lexicon, options)[0]


def prediction_to_record(
    pred: SequencePrediction, text: str, vocabs: VocabSet
) -> dict:
    att_peak = [int(np.argmax(row)) for row in pred.attention]
    return {
        "text": text,
        "syl": " ".join(vocabs.phoneme.decode(pred.phonemes)),
        "tone": " ".join(vocabs.tone.decode(pred.tones)),
        "pros": " ".join(vocabs.prosody.decode(pred.prosody)),
        "truncated": pred.truncated,
        "att_peak": att_peak,
    }


def batch_predict(
    model,
    utts: Sequence[Utterance] | Sequence[str],
    lexicon: Lexicon,
    options: DecodeOptions,
    out_path: str | Path,
    meta: dict | None = None,
    chunk_size: int = 64,
) -> int:
    """Decode a corpus slice to a JSONL predictions file, input order kept.

    Per-record failures are logged and skipped in-place (the record becomes
    an {"error": ...} line); the failure count is returned.
    """
    texts = [u.chars if isinstance(u, Utterance) else u for u in utts]
    vocabs = model.vocabs
    n_failed = 0
    with open(out_path, "w", encoding="utf-8") as fh:
        if meta is not None:
            fh.write(json.dumps({"_meta": meta}, sort_keys=True, ensure_ascii=False) + "\n")
        for lo in range(0, len(texts), chunk_size):
            chunk = texts[lo : lo + chunk_size]
            try:
                preds = decode_batch(model, chunk, lexicon, options)
                records = [
                    prediction_to_record(p, t, vocabs) for p, t in zip(preds, chunk)
                ]
            except Exception:
                # fall back to one-at-a-time so a single bad record cannot
                # take down the whole chunk
                records = []
                for text in chunk:
                    try:
                        pred = decode(model, text, lexicon, options)
                        records.append(prediction_to_record(pred, text, vocabs))
                    except Exception as exc:
                        log.exception("failed to decode %r", text)
                        records.append({"text": text, "error": str(exc)})
                        n_failed += 1
            for rec in records:
                fh.write(json.dumps(rec, sort_keys=True, ensure_ascii=False) + "\n")
    return n_failed
