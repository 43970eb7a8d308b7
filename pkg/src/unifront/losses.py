"""Loss primitives and the seven-term composite training objective."""
from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn.functional as F


def _masked_mean(per_step: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    fmask = mask.to(per_step.dtype)
    return (per_step * fmask).sum() / fmask.sum().clamp(min=1.0)


def smoothed_cross_entropy(
    logits: torch.Tensor,
    targets: torch.Tensor,
    mask: torch.Tensor,
    smoothing: float = 0.0,
) -> torch.Tensor:
    """Label-smoothed categorical cross-entropy, averaged over real steps.

    logits: (B, L, V); targets: (B, L) long; mask: (B, L) bool.  The smoothed
    target puts 1 - smoothing on the gold class and smoothing/V uniformly on
    all classes.
    """
    if not 0.0 <= smoothing < 1.0:
        raise ValueError("smoothing must lie in [0, 1)")
    n_classes = logits.size(-1)
    logp = F.log_softmax(logits, dim=-1)
    gold_logp = logp.gather(-1, targets.clamp(min=0).unsqueeze(-1)).squeeze(-1)
    per_step = -(1.0 - smoothing) * gold_logp - smoothing * logp.mean(dim=-1)
    return _masked_mean(per_step, mask)


def sequence_nll(logits: torch.Tensor, targets: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    """Per-step negative log-likelihood of the gold labels, mean over real steps."""
    logp = F.log_softmax(logits, dim=-1)
    gold_logp = logp.gather(-1, targets.clamp(min=0).unsqueeze(-1)).squeeze(-1)
    return _masked_mean(-gold_logp, mask)


def stop_bce(stop_logits: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    """Binary cross-entropy for the stop head.

    The positive label sits on the final real step of each sequence; all
    other real steps are negatives.  stop_logits, mask: (B, L).
    """
    lengths = mask.to(torch.long).sum(dim=1)
    targets = torch.zeros_like(stop_logits)
    targets[torch.arange(stop_logits.size(0)), lengths - 1] = 1.0
    per_step = F.binary_cross_entropy_with_logits(stop_logits, targets, reduction="none")
    return _masked_mean(per_step, mask)


@dataclass
class LossBreakdown:
    """The seven objective terms; ``total`` is their exact sum."""

    ce_phoneme_before: torch.Tensor
    ce_tone_before: torch.Tensor
    ce_prosody_before: torch.Tensor
    ce_stop: torch.Tensor
    nll_phoneme_after: torch.Tensor
    nll_tone_after: torch.Tensor
    nll_prosody_after: torch.Tensor
    total: torch.Tensor

    TERM_NAMES = (
        "ce_phoneme_before",
        "ce_tone_before",
        "ce_prosody_before",
        "ce_stop",
        "nll_phoneme_after",
        "nll_tone_after",
        "nll_prosody_after",
    )

    def terms(self) -> dict[str, torch.Tensor]:
        return {name: getattr(self, name) for name in self.TERM_NAMES}

    def to_floats(self) -> dict[str, float]:
        out = {name: float(t.detach()) for name, t in self.terms().items()}
        out["total"] = float(self.total.detach())
        return out


def composite_loss(
    before_logits: tuple[torch.Tensor, torch.Tensor, torch.Tensor],
    stop_logits: torch.Tensor,
    after_logits: tuple[torch.Tensor, torch.Tensor, torch.Tensor],
    targets: tuple[torch.Tensor, torch.Tensor, torch.Tensor],
    mask: torch.Tensor,
    smoothing: float = 0.1,
) -> LossBreakdown:
    """Sum of cross-entropies on the raw decoder streams plus the stop head,
    and negative log-likelihoods on the residual-refined streams.

    Label smoothing applies to the three categorical cross-entropy terms
    only; the refined-stream likelihood terms and the stop term use hard
    targets.  Every term is a mean over non-pad steps; the total is the sum
    of the seven terms.
    """
    names = ("phoneme", "tone", "prosody")
    for name, logits, target in zip(names, before_logits, targets):
        if logits.shape[:2] != target.shape or logits.shape[:2] != mask.shape:
            raise ValueError(f"{name}: logits/targets/mask shapes disagree")
    ce = [
        smoothed_cross_entropy(logits, target, mask, smoothing)
        for logits, target in zip(before_logits, targets)
    ]
    nll = [
        sequence_nll(logits, target, mask)
        for logits, target in zip(after_logits, targets)
    ]
    stop = stop_bce(stop_logits, mask)
    terms = [ce[0], ce[1], ce[2], stop, nll[0], nll[1], nll[2]]
    return LossBreakdown(*terms, total=sum(terms))
