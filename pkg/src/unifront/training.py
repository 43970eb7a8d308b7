"""Two-phase training: auxiliary pre-training, then joint fine-tuning with
scheduled sampling and the seven-term composite objective.
"""
from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch

from . import checkpoint as ckpt
from .aux_model import AuxConfig, AuxModel, aux_train_step
from .data import Utterance, bucket_batches
from .losses import LossBreakdown, composite_loss
from .main_model import MainConfig, UnifiedFrontend
from .vocab import VocabSet

log = logging.getLogger(__name__)


@dataclass
class Schedule:
    """Teacher-forcing decay: flat at 1 until start_step, then linear to 0."""

    start_step: int = 20000
    decay_steps: int = 50000

    def __post_init__(self) -> None:
        if self.start_step <= 0 or self.decay_steps <= 0:
            raise ValueError("schedule steps must be positive")

    def to_dict(self) -> dict:
        return {"start_step": self.start_step, "decay_steps": self.decay_steps}


def teacher_forcing_ratio(step: int, schedule: Schedule) -> float:
    if step < 0:
        raise ValueError("step must be >= 0")
    if step <= schedule.start_step:
        return 1.0
    if step >= schedule.start_step + schedule.decay_steps:
        return 0.0
    return 1.0 - (step - schedule.start_step) / schedule.decay_steps


def mix_seed(*parts: int) -> int:
    """Stable integer mixing for per-step / per-epoch RNG derivation."""
    acc = 0x9E3779B9
    for p in parts:
        acc = (acc * 1_000_003 + int(p)) % (2**31 - 1)
    return acc


@dataclass
class BucketingParams:
    n_buckets: int = 13
    upper_bound: int = 90
    batch_size: int = 32

    def to_dict(self) -> dict:
        return dict(self.__dict__)


@dataclass
class OptimParams:
    lr: float = 1e-3
    clip_norm: float = 1.0
    smoothing: float = 0.1

    def to_dict(self) -> dict:
        return dict(self.__dict__)


# ---------------------------------------------------------------------------
# Batch encoding
# ---------------------------------------------------------------------------

@dataclass
class Batch:
    char_ids: torch.Tensor  # (B, L) long
    mask: torch.Tensor  # (B, L) bool
    phoneme: torch.Tensor
    tone: torch.Tensor
    prosody: torch.Tensor
    cws: torch.Tensor
    pos: torch.Tensor | None
    lengths: list[int]

    @property
    def targets(self) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
        return (self.phoneme, self.tone, self.prosody)


def encode_batch(
    utts: Sequence[Utterance], vocabs: VocabSet, pad_to: int | None = None
) -> Batch:
    """Pad a group of utterances into index tensors (PAD = 0)."""
    lengths = [len(u) for u in utts]
    max_len = pad_to if pad_to is not None else max(lengths)
    n = len(utts)

    def grid(fill=0):
        return torch.zeros(n, max_len, dtype=torch.long) + fill

    char_ids, ph, tn, pr, cws = grid(), grid(), grid(), grid(), grid()
    has_pos = all(u.pos is not None for u in utts)
    pos = grid() if has_pos else None
    mask = torch.zeros(n, max_len, dtype=torch.bool)
    for b, utt in enumerate(utts):
        m = len(utt)
        mask[b, :m] = True
        char_ids[b, :m] = torch.tensor(vocabs.char.encode(utt.chars))
        ph[b, :m] = torch.tensor(vocabs.phoneme.encode(utt.phonemes))
        tn[b, :m] = torch.tensor(vocabs.tone.encode(str(t) for t in utt.tones))
        pr[b, :m] = torch.tensor(vocabs.prosody.encode(str(p) for p in utt.prosody))
        cws[b, :m] = torch.tensor(vocabs.cws.encode(utt.cws))
        if pos is not None:
            pos[b, :m] = torch.tensor(vocabs.pos.encode(utt.pos))
    return Batch(
        char_ids=char_ids, mask=mask, phoneme=ph, tone=tn, prosody=pr,
        cws=cws, pos=pos, lengths=lengths,
    )


def to_real_tags(ids: torch.Tensor, vocab) -> tuple[torch.Tensor, torch.Tensor]:
    """Vocab-space ids -> real tag ids plus a validity mask.

    Special symbols (PAD/UNK) have no row in the tag heads and come back
    invalid.
    """
    real = ids - vocab.n_specials
    return real.clamp(min=0), real >= 0


class _BatchSchedule:
    """Deterministic epoch-wise batch plan: step -> batch, recomputable from
    (seed, step) alone so interrupted runs resume exactly."""

    def __init__(self, utts, bucketing: BucketingParams, seed: int):
        self.utts = utts
        self.bucketing = bucketing
        self.seed = seed
        self._epoch = -1
        self._batches: list[list[Utterance]] = []
        self.n_dropped = 0
        self._load_epoch(0)
        if not self._batches:
            raise ValueError("no utterances fit the bucketing bounds")
        self.per_epoch = len(self._batches)

    def _load_epoch(self, epoch: int) -> None:
        plan = bucket_batches(
            self.utts,
            self.bucketing.n_buckets,
            self.bucketing.upper_bound,
            self.bucketing.batch_size,
            seed=mix_seed(self.seed, epoch),
        )
        self._epoch = epoch
        self._batches = plan.batches
        self.n_dropped = plan.n_dropped

    def batch_for_step(self, step: int) -> list[Utterance]:
        epoch, idx = divmod(step, self.per_epoch)
        if epoch != self._epoch:
            self._load_epoch(epoch)
        return self._batches[idx]


# ---------------------------------------------------------------------------
# Trace files
# ---------------------------------------------------------------------------

def write_trace(path: str | Path, header: list[str], rows: list[list], meta: dict) -> None:
    """CSV trace with '#'-prefixed metadata lines before the header."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        for key in sorted(meta):
            fh.write(f"# {key}: {meta[key]}\n")
        writer = csv.writer(fh)
        writer.writerow(header)
        writer.writerows(rows)


# ---------------------------------------------------------------------------
# Phase 1: auxiliary pre-training
# ---------------------------------------------------------------------------

@dataclass
class AuxTrainResult:
    model: AuxModel
    trace: list[list] = field(default_factory=list)
    final_loss: float = float("nan")


def train_aux(
    model: AuxModel,
    utts: Sequence[Utterance],
    vocabs: VocabSet,
    embedding_matrix: np.ndarray,
    steps: int,
    seed: int,
    bucketing: BucketingParams | None = None,
    optim: OptimParams | None = None,
    log_every: int = 50,
) -> AuxTrainResult:
    bucketing = bucketing or BucketingParams(n_buckets=11, upper_bound=200)
    optim = optim or OptimParams()
    schedule = _BatchSchedule(utts, bucketing, seed)
    embedding = torch.as_tensor(embedding_matrix, dtype=torch.float32)
    optimizer = torch.optim.Adam(model.parameters(), lr=optim.lr)

    trace: list[list] = []
    loss_val = float("nan")
    for step in range(steps):
        torch.manual_seed(mix_seed(seed, step, 17))
        batch = encode_batch(schedule.batch_for_step(step), vocabs)
        emb = embedding[batch.char_ids]
        cws_gold = pos_gold = None
        if "cws" in model.config.tasks:
            cws_gold, valid = to_real_tags(batch.cws, vocabs.cws)
            if not bool((valid | ~batch.mask).all()):
                raise ValueError("corpus contains unknown segmentation tags")
        if "pos" in model.config.tasks:
            if batch.pos is None:
                raise ValueError("POS task is configured but the corpus has no POS labels")
            pos_gold, valid = to_real_tags(batch.pos, vocabs.pos)
            if not bool((valid | ~batch.mask).all()):
                raise ValueError("corpus contains POS tags outside the vocab")
        loss_val = aux_train_step(
            model,
            optimizer,
            emb,
            cws_gold,
            pos_gold,
            batch.mask,
            smoothing=optim.smoothing,
            clip_norm=optim.clip_norm,
        )
        trace.append([step, repr(loss_val)])
        if log_every and step % log_every == 0:
            log.info("aux step %d loss %.4f", step, loss_val)
    return AuxTrainResult(model=model, trace=trace, final_loss=loss_val)


# ---------------------------------------------------------------------------
# Phase 2: joint fine-tuning
# ---------------------------------------------------------------------------

TRACE_HEADER = ["step", *LossBreakdown.TERM_NAMES, "total", "ratio"]


@dataclass
class FinetuneResult:
    model: UnifiedFrontend
    trace: list[list] = field(default_factory=list)
    first_loss: float = float("nan")
    final_loss: float = float("nan")
    optimizer_state: dict | None = None


def finetune(
    model: UnifiedFrontend,
    utts: Sequence[Utterance],
    steps: int,
    seed: int,
    schedule: Schedule | None = None,
    bucketing: BucketingParams | None = None,
    optim: OptimParams | None = None,
    freeze_aux: bool = False,
    start_step: int = 0,
    optimizer_state: dict | None = None,
    log_every: int = 50,
    on_step: Callable[[int, LossBreakdown], None] | None = None,
) -> FinetuneResult:
    """Optimize the unified model; deterministic given (seed, start_step).

    Resuming with (start_step, optimizer_state) from a checkpoint reproduces
    the loss trace of an uninterrupted run because every step reseeds from
    (seed, step) and the batch plan depends only on (seed, epoch).
    """
    schedule = schedule or Schedule()
    bucketing = bucketing or BucketingParams()
    optim = optim or OptimParams()
    batch_schedule = _BatchSchedule(utts, bucketing, seed)

    if freeze_aux and model.aux is not None:
        for p in model.aux.parameters():
            p.requires_grad_(False)
    params = [p for p in model.parameters() if p.requires_grad]
    optimizer = torch.optim.Adam(params, lr=optim.lr)
    if optimizer_state is not None:
        ckpt.optimizer_from_numpy(optimizer, optimizer_state)

    result = FinetuneResult(model=model)
    model.train()
    for step in range(start_step, start_step + steps):
        torch.manual_seed(mix_seed(seed, step, 29))
        gen = torch.Generator().manual_seed(mix_seed(seed, step, 31))
        ratio = teacher_forcing_ratio(step, schedule)
        batch = encode_batch(batch_schedule.batch_for_step(step), model.vocabs)
        before, stop_logits, after = model.forward_teacher_forced(
            batch.char_ids, batch.mask, batch.targets, ratio, generator=gen
        )
        breakdown = composite_loss(
            before, stop_logits, after, batch.targets, batch.mask, optim.smoothing
        )
        optimizer.zero_grad()
        breakdown.total.backward()
        torch.nn.utils.clip_grad_norm_(params, optim.clip_norm)
        optimizer.step()

        values = breakdown.to_floats()
        if step == start_step:
            result.first_loss = values["total"]
        result.final_loss = values["total"]
        result.trace.append(
            [step]
            + [repr(values[name]) for name in LossBreakdown.TERM_NAMES]
            + [repr(values["total"]), repr(ratio)]
        )
        if on_step is not None:
            on_step(step, breakdown)
        if log_every and step % log_every == 0:
            log.info("finetune step %d total %.4f ratio %.3f", step, values["total"], ratio)
    model.eval()
    result.optimizer_state = ckpt.optimizer_to_numpy(optimizer)
    return result


# ---------------------------------------------------------------------------
# Checkpoint helpers for both phases
# ---------------------------------------------------------------------------

def save_aux_checkpoint(
    path: str | Path,
    model: AuxModel,
    vocabs: VocabSet,
    meta: dict,
    step: int = 0,
) -> None:
    config = {
        "aux": model.config.to_dict(),
        "embed_dim": model.embed_dim,
        "n_cws": model.n_cws,
        "n_pos": model.n_pos,
        "vocab": vocabs.to_symbol_lists(),
    }
    ckpt.save_checkpoint(
        path, "aux", config, ckpt.state_to_numpy(model.state_dict()), meta, step
    )


def load_aux_checkpoint(path: str | Path) -> tuple[AuxModel, VocabSet, dict]:
    payload = ckpt.load_checkpoint(path, kind="aux")
    cfg = payload["config"]
    model = AuxModel(
        AuxConfig.from_dict(cfg["aux"]), cfg["embed_dim"], cfg["n_cws"], cfg["n_pos"]
    )
    model.load_state_dict(ckpt.state_to_torch(payload["state"]))
    model.eval()
    return model, VocabSet.from_symbol_lists(cfg["vocab"]), payload


def save_main_checkpoint(
    path: str | Path,
    model: UnifiedFrontend,
    meta: dict,
    step: int = 0,
    optimizer_state: dict | None = None,
) -> None:
    config = {
        "main": model.config.to_dict(),
        "aux": model.aux.config.to_dict() if model.aux is not None else None,
        "aux_dims": (
            {"embed_dim": model.aux.embed_dim, "n_cws": model.aux.n_cws,
             "n_pos": model.aux.n_pos}
            if model.aux is not None
            else None
        ),
        "vocab": model.vocabs.to_symbol_lists(),
    }
    ckpt.save_checkpoint(
        path,
        "main",
        config,
        ckpt.state_to_numpy(model.state_dict()),
        meta,
        step,
        optimizer=optimizer_state,
    )


def load_main_checkpoint(path: str | Path) -> tuple[UnifiedFrontend, dict]:
    payload = ckpt.load_checkpoint(path, kind="main")
    cfg = payload["config"]
    vocabs = VocabSet.from_symbol_lists(cfg["vocab"])
    main_cfg = MainConfig.from_dict(cfg["main"])
    aux = None
    if cfg["aux"] is not None:
        dims = cfg["aux_dims"]
        aux = AuxModel(
            AuxConfig.from_dict(cfg["aux"]), dims["embed_dim"], dims["n_cws"], dims["n_pos"]
        )
    embedding = np.zeros((len(vocabs.char), main_cfg.embed_dim), dtype=np.float32)
    model = UnifiedFrontend(main_cfg, vocabs, embedding, aux)
    model.load_state_dict(ckpt.state_to_torch(payload["state"]))
    model.eval()
    return model, payload
