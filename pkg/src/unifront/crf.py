"""Linear-chain CRF: exact NLL via the forward algorithm, Viterbi decoding.

The chain has no explicit start/end potentials: a path's score is the sum
of its per-position scores plus the transition scores between consecutive
tags.  With a single position this reduces to a plain softmax.
"""
from __future__ import annotations

import numpy as np
import torch


def _check_scores(scores: torch.Tensor, transitions: torch.Tensor) -> None:
    if scores.dim() != 2 or scores.size(0) < 1:
        raise ValueError("scores must be (length, n_tags) with length >= 1")
    n_tags = scores.size(1)
    if transitions.shape != (n_tags, n_tags):
        raise ValueError(
            f"transitions must be ({n_tags}, {n_tags}), got {tuple(transitions.shape)}"
        )


def crf_log_partition(scores: torch.Tensor, transitions: torch.Tensor) -> torch.Tensor:
    """log sum over all tag paths of exp(path score)."""
    _check_scores(scores, transitions)
    alpha = scores[0]
    for t in range(1, scores.size(0)):
        # alpha[src] + transitions[src, dst] + scores[t, dst]
        alpha = torch.logsumexp(alpha.unsqueeze(1) + transitions, dim=0) + scores[t]
    return torch.logsumexp(alpha, dim=0)


def crf_path_score(
    scores: torch.Tensor, transitions: torch.Tensor, tags: list[int] | torch.Tensor
) -> torch.Tensor:
    _check_scores(scores, transitions)
    tags = torch.as_tensor(tags, dtype=torch.long, device=scores.device)
    if tags.numel() != scores.size(0):
        raise ValueError("gold length must equal scores length")
    if tags.min() < 0 or tags.max() >= scores.size(1):
        raise ValueError("tag index out of range")
    total = scores[torch.arange(scores.size(0)), tags].sum()
    if tags.numel() > 1:
        total = total + transitions[tags[:-1], tags[1:]].sum()
    return total


def crf_nll(
    scores: torch.Tensor, transitions: torch.Tensor, gold: list[int] | torch.Tensor
) -> torch.Tensor:
    """-log p(gold | scores) for one sequence."""
    return crf_log_partition(scores, transitions) - crf_path_score(scores, transitions, gold)


def crf_decode(scores: torch.Tensor, transitions: torch.Tensor) -> list[int]:
    """Viterbi argmax path; ties break toward the lower tag index."""
    _check_scores(scores, transitions)
    s = scores.detach().cpu().double().numpy()
    trans = transitions.detach().cpu().double().numpy()
    length, n_tags = s.shape
    best = s[0]
    back = np.zeros((length, n_tags), dtype=np.int64)
    for t in range(1, length):
        cand = best[:, None] + trans  # (src, dst)
        back[t] = np.argmax(cand, axis=0)  # first max -> lowest src index
        best = cand[back[t], np.arange(n_tags)] + s[t]
    path = [int(np.argmax(best))]
    for t in range(length - 1, 0, -1):
        path.append(int(back[t, path[-1]]))
    path.reverse()
    return path


def crf_nll_batch(
    scores: torch.Tensor,
    transitions: torch.Tensor,
    gold: torch.Tensor,
    mask: torch.Tensor,
) -> torch.Tensor:
    """Mean NLL over a padded batch.

    scores: (B, L, T); gold: (B, L) long; mask: (B, L) bool, True on real
    positions.  Every sequence must occupy a contiguous prefix of its row.
    """
    bsz, length, n_tags = scores.shape
    if gold.shape != (bsz, length) or mask.shape != (bsz, length):
        raise ValueError("gold/mask must be (B, L)")
    if not mask[:, 0].all():
        raise ValueError("every sequence must have length >= 1")
    fmask = mask.to(scores.dtype)

    alpha = scores[:, 0]
    for t in range(1, length):
        nxt = torch.logsumexp(alpha.unsqueeze(2) + transitions, dim=1) + scores[:, t]
        keep = fmask[:, t].unsqueeze(1)
        alpha = keep * nxt + (1.0 - keep) * alpha
    log_z = torch.logsumexp(alpha, dim=1)

    safe_gold = gold.clamp(min=0)
    emit = scores.gather(2, safe_gold.unsqueeze(2)).squeeze(2)
    emit = (emit * fmask).sum(dim=1)
    trans = transitions[safe_gold[:, :-1], safe_gold[:, 1:]]
    trans = (trans * fmask[:, 1:]).sum(dim=1)
    return (log_z - emit - trans).mean()
