"""Shared neural building blocks: self-attention and mixture-of-Gaussians
attention with monotonically advancing means.
"""
from __future__ import annotations

import math

import torch
import torch.nn.functional as F
from torch import nn


def lengths_to_mask(lengths: torch.Tensor, max_len: int) -> torch.Tensor:
    """(B,) lengths -> (B, max_len) bool mask, True on real positions."""
    ar = torch.arange(max_len, device=lengths.device)
    return ar.unsqueeze(0) < lengths.unsqueeze(1)


class MultiHeadAttention(nn.Module):
    def __init__(self, dim: int, heads: int, dropout: float = 0.0):
        super().__init__()
        if dim % heads != 0:
            raise ValueError(f"heads ({heads}) must divide width ({dim})")
        self.dim = dim
        self.heads = heads
        self.head_dim = dim // heads
        self.q_proj = nn.Linear(dim, dim)
        self.k_proj = nn.Linear(dim, dim)
        self.v_proj = nn.Linear(dim, dim)
        self.out_proj = nn.Linear(dim, dim)
        self.dropout = nn.Dropout(dropout)

    def _split(self, x: torch.Tensor) -> torch.Tensor:
        b, t, _ = x.shape
        return x.view(b, t, self.heads, self.head_dim).transpose(1, 2)

    def project_kv(self, x: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        return self._split(self.k_proj(x)), self._split(self.v_proj(x))

    def attend(
        self,
        query: torch.Tensor,
        k: torch.Tensor,
        v: torch.Tensor,
        key_mask: torch.Tensor | None = None,
    ) -> torch.Tensor:
        """query: (B, Tq, dim); k, v: (B, heads, Tk, head_dim)."""
        q = self._split(self.q_proj(query))
        scores = q @ k.transpose(-1, -2) / math.sqrt(self.head_dim)
        if key_mask is not None:
            scores = scores.masked_fill(~key_mask[:, None, None, :], float("-inf"))
        attn = self.dropout(torch.softmax(scores, dim=-1))
        out = attn @ v
        b, _, tq, _ = out.shape
        return self.out_proj(out.transpose(1, 2).reshape(b, tq, self.dim))

    def forward(
        self, x: torch.Tensor, key_mask: torch.Tensor | None = None
    ) -> torch.Tensor:
        k, v = self.project_kv(x)
        return self.attend(x, k, v, key_mask)


class SelfAttentionBlock(nn.Module):
    """Post-norm transformer block; supports full-sequence and stepwise use.

    Stepwise use keeps the projected key/value history outside the module so
    that one module instance can serve many concurrent decodes.
    """

    def __init__(self, dim: int, heads: int, dropout: float = 0.0, ffn_mult: int = 4):
        super().__init__()
        self.attn = MultiHeadAttention(dim, heads, dropout)
        self.norm1 = nn.LayerNorm(dim)
        self.norm2 = nn.LayerNorm(dim)
        self.ffn = nn.Sequential(
            nn.Linear(dim, ffn_mult * dim), nn.ReLU(), nn.Linear(ffn_mult * dim, dim)
        )
        self.dropout = nn.Dropout(dropout)

    def forward(
        self, x: torch.Tensor, key_mask: torch.Tensor | None = None
    ) -> torch.Tensor:
        y = self.norm1(x + self.dropout(self.attn(x, key_mask)))
        return self.norm2(y + self.dropout(self.ffn(y)))

    def step(
        self,
        x_t: torch.Tensor,
        k_hist: torch.Tensor | None,
        v_hist: torch.Tensor | None,
    ) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
        """One causal step: attend from x_t over the history plus itself.

        x_t: (B, 1, dim).  Returns the block output for this step plus the
        extended key/value history.
        """
        k_t, v_t = self.attn.project_kv(x_t)
        k = k_t if k_hist is None else torch.cat([k_hist, k_t], dim=2)
        v = v_t if v_hist is None else torch.cat([v_hist, v_t], dim=2)
        y = self.norm1(x_t + self.dropout(self.attn.attend(x_t, k, v)))
        y = self.norm2(y + self.dropout(self.ffn(y)))
        return y, k, v


class PositionalEmbedding(nn.Module):
    """Learned absolute positions, sized to the bucketing upper bound."""

    def __init__(self, max_len: int, dim: int):
        super().__init__()
        self.table = nn.Embedding(max_len, dim)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        t = x.size(1)
        if t > self.table.num_embeddings:
            raise ValueError(
                f"sequence length {t} exceeds positional table {self.table.num_embeddings}"
            )
        pos = torch.arange(t, device=x.device)
        return x + self.table(pos).unsqueeze(0)


def gmm_mixture_weights(
    means: torch.Tensor,
    sigmas: torch.Tensor,
    mix: torch.Tensor,
    memory_length: int,
    normalized: bool = False,
) -> torch.Tensor:
    """Evaluate a mixture of Gaussians over positions 0..memory_length-1.

    means, sigmas, mix: (B, K).  Returns (B, memory_length).  The kernel is
    unnormalized unless ``normalized`` adds the 1/(sigma*sqrt(2*pi)) factor.
    """
    if memory_length < 1:
        raise ValueError("memory_length must be >= 1")
    pos = torch.arange(memory_length, dtype=means.dtype, device=means.device)
    z = (pos.view(1, 1, -1) - means.unsqueeze(2)) / sigmas.unsqueeze(2)
    phi = torch.exp(-0.5 * z * z)
    if normalized:
        phi = phi / (sigmas.unsqueeze(2) * math.sqrt(2.0 * math.pi))
    return (mix.unsqueeze(2) * phi).sum(dim=1)


class GMMAttention(nn.Module):
    """Mixture-of-Gaussians attention whose means only move forward.

    Each step the query predicts, per mixture component, a positive mean
    increment and scale through softplus (replacing the exponential of the
    classic formulation) plus softmax mixture weights.  Means start at zero
    and advance by softplus(raw) > 0, so alignment is monotone by
    construction.
    """

    def __init__(
        self,
        query_dim: int,
        n_mixtures: int = 5,
        sigma_min: float = 1e-4,
        normalized: bool = False,
    ):
        super().__init__()
        if n_mixtures < 1:
            raise ValueError("n_mixtures must be >= 1")
        self.n_mixtures = n_mixtures
        self.sigma_min = sigma_min
        self.normalized = normalized
        self.proj = nn.Linear(query_dim, 3 * n_mixtures)

    def initial_means(self, batch: int, dtype, device) -> torch.Tensor:
        return torch.zeros(batch, self.n_mixtures, dtype=dtype, device=device)

    def forward(
        self,
        query: torch.Tensor,
        means: torch.Tensor,
        memory_length: int,
        key_mask: torch.Tensor | None = None,
    ) -> tuple[torch.Tensor, torch.Tensor]:
        """query: (B, query_dim); means: (B, K) carried across steps.

        Returns (weights over positions (B, memory_length), new means).
        """
        raw = self.proj(query)
        raw_delta, raw_sigma, raw_mix = raw.chunk(3, dim=-1)
        new_means = means + F.softplus(raw_delta)
        sigmas = F.softplus(raw_sigma) + self.sigma_min
        mix = torch.softmax(raw_mix, dim=-1)
        weights = gmm_mixture_weights(
            new_means, sigmas, mix, memory_length, self.normalized
        )
        if key_mask is not None:
            weights = weights * key_mask.to(weights.dtype)
        return weights, new_means
