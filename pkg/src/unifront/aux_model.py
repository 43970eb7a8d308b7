"""Auxiliary feature extractor: segmentation/POS representations feeding the
main encoder, with CRF or softmax tag heads.

Two architectures are selectable: a stack of dilated convolutions (DCNN)
and a recurrent transformer encoder (TE).  The pre-head dense output is
what downstream consumers concatenate with the character embedding.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import torch
import torch.nn.functional as F
from torch import nn

from .crf import crf_decode, crf_nll_batch
from .layers import PositionalEmbedding, SelfAttentionBlock
from .losses import smoothed_cross_entropy

TASKS = ("cws", "pos")


@dataclass
class AuxConfig:
    variant: str = "dcnn"  # "dcnn" | "te"
    tasks: tuple[str, ...] = ("cws", "pos")
    dcnn_layers: int = 3
    dcnn_kernel: int = 5
    dcnn_filters: int = 128
    dcnn_dilations: tuple[int, ...] = (1, 2, 4)
    te_lstm_units: int = 256
    te_attn_blocks: int = 1
    te_heads: int = 8
    te_positional: bool = True
    te_max_len: int = 200
    cws_head: str = "crf"  # "crf" | "softmax"
    pos_head: str = "softmax"
    dropout: float = 0.1

    def __post_init__(self) -> None:
        self.tasks = tuple(self.tasks)
        self.dcnn_dilations = tuple(self.dcnn_dilations)
        if self.variant not in ("dcnn", "te"):
            raise ValueError(f"unknown variant {self.variant!r}")
        if not self.tasks or any(t not in TASKS for t in self.tasks):
            raise ValueError(f"tasks must be a non-empty subset of {TASKS}")
        if len(self.dcnn_dilations) != self.dcnn_layers:
            raise ValueError("need one dilation per DCNN layer")
        if any(a >= b for a, b in zip(self.dcnn_dilations, self.dcnn_dilations[1:])):
            raise ValueError("dilations must be strictly increasing")
        if self.te_lstm_units % self.te_heads != 0:
            raise ValueError("heads must divide the attention width")
        if self.cws_head not in ("crf", "softmax") or self.pos_head not in ("crf", "softmax"):
            raise ValueError("heads must be 'crf' or 'softmax'")

    @property
    def dense_width(self) -> int:
        return self.dcnn_filters if self.variant == "dcnn" else self.te_lstm_units

    def to_dict(self) -> dict:
        return {
            "variant": self.variant,
            "tasks": list(self.tasks),
            "dcnn_layers": self.dcnn_layers,
            "dcnn_kernel": self.dcnn_kernel,
            "dcnn_filters": self.dcnn_filters,
            "dcnn_dilations": list(self.dcnn_dilations),
            "te_lstm_units": self.te_lstm_units,
            "te_attn_blocks": self.te_attn_blocks,
            "te_heads": self.te_heads,
            "te_positional": self.te_positional,
            "te_max_len": self.te_max_len,
            "cws_head": self.cws_head,
            "pos_head": self.pos_head,
            "dropout": self.dropout,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "AuxConfig":
        d = dict(d)
        d["tasks"] = tuple(d.get("tasks", ("cws", "pos")))
        d["dcnn_dilations"] = tuple(d.get("dcnn_dilations", (1, 2, 4)))
        return cls(**d)


@dataclass
class AuxOutput:
    dense: torch.Tensor  # (B, L, dense_width), pre-head representation
    cws_scores: torch.Tensor | None = None  # (B, L, n_cws)
    pos_scores: torch.Tensor | None = None  # (B, L, n_pos)


class AuxModel(nn.Module):
    """Tag scores live in the real tag space (no PAD/UNK rows): 4 BMES tags
    for segmentation and ``n_pos`` POS tags."""

    def __init__(self, config: AuxConfig, embed_dim: int, n_cws: int, n_pos: int):
        super().__init__()
        self.config = config
        self.embed_dim = embed_dim
        self.n_cws = n_cws
        self.n_pos = n_pos
        self.dropout = nn.Dropout(config.dropout)

        if config.variant == "dcnn":
            convs, norms = [], []
            in_ch = embed_dim
            for dil in config.dcnn_dilations:
                convs.append(
                    nn.Conv1d(
                        in_ch,
                        config.dcnn_filters,
                        config.dcnn_kernel,
                        dilation=dil,
                        padding=dil * (config.dcnn_kernel - 1) // 2,
                    )
                )
                norms.append(nn.LayerNorm(config.dcnn_filters))
                in_ch = config.dcnn_filters
            self.convs = nn.ModuleList(convs)
            self.norms = nn.ModuleList(norms)
        else:
            self.lstm = nn.LSTM(embed_dim, config.te_lstm_units, batch_first=True)
            self.positional = (
                PositionalEmbedding(config.te_max_len, config.te_lstm_units)
                if config.te_positional
                else None
            )
            self.blocks = nn.ModuleList(
                SelfAttentionBlock(config.te_lstm_units, config.te_heads, config.dropout)
                for _ in range(config.te_attn_blocks)
            )

        if "cws" in config.tasks:
            self.cws_proj = nn.Linear(config.dense_width, n_cws)
            if config.cws_head == "crf":
                self.cws_transitions = nn.Parameter(torch.zeros(n_cws, n_cws))
        if "pos" in config.tasks:
            self.pos_proj = nn.Linear(config.dense_width, n_pos)
            if config.pos_head == "crf":
                self.pos_transitions = nn.Parameter(torch.zeros(n_pos, n_pos))

    def forward(self, embeddings: torch.Tensor, mask: torch.Tensor | None = None) -> AuxOutput:
        """embeddings: (B, L, embed_dim); mask: (B, L) bool, True on real steps."""
        if embeddings.dim() != 3 or embeddings.size(1) < 1:
            raise ValueError("input must be (B, L>=1, embed_dim)")
        if embeddings.size(2) != self.embed_dim:
            raise ValueError(
                f"embedding width {embeddings.size(2)} != expected {self.embed_dim}"
            )
        fmask = None if mask is None else mask.to(embeddings.dtype).unsqueeze(2)

        if self.config.variant == "dcnn":
            x = embeddings
            for conv, norm in zip(self.convs, self.norms):
                if fmask is not None:
                    x = x * fmask  # keep pads out of the conv receptive field
                x = conv(x.transpose(1, 2)).transpose(1, 2)
                x = self.dropout(norm(F.relu(x)))
            dense = x if fmask is None else x * fmask
        else:
            x, _ = self.lstm(embeddings)
            if self.positional is not None:
                x = self.positional(x)
            x = self.dropout(x)
            for block in self.blocks:
                x = block(x, key_mask=mask)
            dense = x

        out = AuxOutput(dense=dense)
        if "cws" in self.config.tasks:
            out.cws_scores = self.cws_proj(dense)
        if "pos" in self.config.tasks:
            out.pos_scores = self.pos_proj(dense)
        return out

    def loss(
        self,
        output: AuxOutput,
        cws_gold: torch.Tensor | None,
        pos_gold: torch.Tensor | None,
        mask: torch.Tensor,
        smoothing: float = 0.1,
    ) -> tuple[torch.Tensor, dict[str, float]]:
        """Unweighted sum of the configured per-task losses, pads excluded."""
        total = None
        parts: dict[str, float] = {}
        for task, scores, gold, head, trans in (
            ("cws", output.cws_scores, cws_gold, self.config.cws_head,
             getattr(self, "cws_transitions", None)),
            ("pos", output.pos_scores, pos_gold, self.config.pos_head,
             getattr(self, "pos_transitions", None)),
        ):
            if task not in self.config.tasks:
                continue
            if gold is None:
                raise ValueError(f"task {task!r} is configured but labels are missing")
            if head == "crf":
                term = crf_nll_batch(scores, trans, gold, mask)
            else:
                term = smoothed_cross_entropy(scores, gold, mask, smoothing)
            parts[task] = float(term.detach())
            total = term if total is None else total + term
        return total, parts

    def decode_tags(
        self, output: AuxOutput, lengths: Sequence[int]
    ) -> dict[str, list[list[int]]]:
        """Per-sequence real-space tag ids (Viterbi for CRF heads, else argmax)."""
        result: dict[str, list[list[int]]] = {}
        for task, scores, head, trans in (
            ("cws", output.cws_scores, self.config.cws_head,
             getattr(self, "cws_transitions", None)),
            ("pos", output.pos_scores, self.config.pos_head,
             getattr(self, "pos_transitions", None)),
        ):
            if scores is None:
                continue
            scores = scores.detach()
            seqs = []
            for b, n in enumerate(lengths):
                if head == "crf":
                    seqs.append(crf_decode(scores[b, :n], trans))
                else:
                    seqs.append(scores[b, :n].argmax(dim=-1).tolist())
            result[task] = seqs
        return result


def aux_train_step(
    model: AuxModel,
    optimizer: torch.optim.Optimizer,
    embeddings: torch.Tensor,
    cws_gold: torch.Tensor | None,
    pos_gold: torch.Tensor | None,
    mask: torch.Tensor,
    smoothing: float = 0.1,
    clip_norm: float = 1.0,
) -> float:
    """One optimization step on a padded batch; returns the loss value."""
    model.train()
    optimizer.zero_grad()
    out = model(embeddings, mask)
    loss, _ = model.loss(out, cws_gold, pos_gold, mask, smoothing)
    loss.backward()
    torch.nn.utils.clip_grad_norm_(model.parameters(), clip_norm)
    optimizer.step()
    return float(loss.detach())
