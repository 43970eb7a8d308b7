"""Joint phoneme/tone/prosody encoder-decoder.

The encoder turns character embeddings (optionally concatenated with the
auxiliary dense representation) into a memory sequence; the decoder emits
one step per input character through a recurrent cell, mixture-of-Gaussians
attention over the memory, causal self-attention over its own hidden
history, and four output heads (phoneme, tone, prosody, stop).  A
convolutional post-net adds a residual over the full decoded logit
sequences.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch
from torch import nn

from .aux_model import AuxModel
from .layers import GMMAttention, PositionalEmbedding, SelfAttentionBlock
from .vocab import VocabSet


@dataclass
class MainConfig:
    embed_dim: int = 300
    enc_lstm_units: int = 128
    enc_proj: int = 32
    enc_attn_blocks: int = 3
    heads: int = 8
    dec_lstm_units: int = 1024
    dec_attn_blocks: int = 1
    gmm_mixtures: int = 5
    gmm_sigma_min: float = 1e-4
    gmm_normalized: bool = False
    postnet_layers: int = 3
    postnet_kernel: int = 5
    postnet_filters: int = 128
    dropout: float = 0.1
    phoneme_embed: int = 32
    tone_embed: int = 8
    prosody_embed: int = 8
    positional: bool = False
    positional_max_len: int = 200
    aux_dense_width: int = 0  # 0 disables the auxiliary branch
    embedding_trainable: bool = False

    def __post_init__(self) -> None:
        if self.gmm_mixtures < 1:
            raise ValueError("gmm_mixtures must be >= 1")
        if self.enc_proj % self.heads or self.dec_lstm_units % self.heads:
            raise ValueError("heads must divide the attention widths")
        if self.postnet_layers < 1:
            raise ValueError("postnet needs at least one layer")

    @classmethod
    def desk(cls, **overrides) -> "MainConfig":
        """Small widths for laptop-scale corpora; same architecture shape."""
        base = dict(
            embed_dim=32,
            enc_lstm_units=32,
            enc_proj=16,
            enc_attn_blocks=2,
            heads=4,
            dec_lstm_units=64,
            dec_attn_blocks=1,
            gmm_mixtures=3,
            postnet_filters=32,
            phoneme_embed=16,
            tone_embed=4,
            prosody_embed=4,
        )
        base.update(overrides)
        return cls(**base)

    def to_dict(self) -> dict:
        return dict(self.__dict__)

    @classmethod
    def from_dict(cls, d: dict) -> "MainConfig":
        return cls(**d)


@dataclass
class EncoderOutput:
    memory: torch.Tensor  # (B, L, enc_proj)
    mask: torch.Tensor  # (B, L) bool

    @property
    def lengths(self) -> torch.Tensor:
        return self.mask.to(torch.long).sum(dim=1)


@dataclass
class DecoderStepOutput:
    phoneme_logits: torch.Tensor
    tone_logits: torch.Tensor
    prosody_logits: torch.Tensor
    stop_logit: torch.Tensor  # (B,)
    attention_weights: torch.Tensor  # (B, L)


@dataclass
class DecoderState:
    h: torch.Tensor
    c: torch.Tensor
    means: torch.Tensor  # GMM attention means, carried across steps
    context: torch.Tensor
    kv: list[tuple[torch.Tensor, torch.Tensor] | None] = field(default_factory=list)
    step: int = 0


class Encoder(nn.Module):
    def __init__(self, config: MainConfig):
        super().__init__()
        in_dim = config.embed_dim + config.aux_dense_width
        self.lstm = nn.LSTM(in_dim, config.enc_lstm_units, batch_first=True)
        self.proj = nn.Linear(config.enc_lstm_units, config.enc_proj)
        self.positional = (
            PositionalEmbedding(config.positional_max_len, config.enc_proj)
            if config.positional
            else None
        )
        self.blocks = nn.ModuleList(
            SelfAttentionBlock(config.enc_proj, config.heads, config.dropout)
            for _ in range(config.enc_attn_blocks)
        )
        self.dropout = nn.Dropout(config.dropout)

    def forward(self, x: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
        x, _ = self.lstm(x)
        x = self.dropout(self.proj(x))
        if self.positional is not None:
            x = self.positional(x)
        for block in self.blocks:
            x = block(x, key_mask=mask)
        return x


class Decoder(nn.Module):
    def __init__(self, config: MainConfig, n_phoneme: int, n_tone: int, n_prosody: int):
        super().__init__()
        self.config = config
        self.n_labels = (n_phoneme, n_tone, n_prosody)
        self.phoneme_emb = nn.Embedding(n_phoneme, config.phoneme_embed, padding_idx=0)
        self.tone_emb = nn.Embedding(n_tone, config.tone_embed, padding_idx=0)
        self.prosody_emb = nn.Embedding(n_prosody, config.prosody_embed, padding_idx=0)
        in_dim = (
            config.phoneme_embed
            + config.tone_embed
            + config.prosody_embed
            + config.enc_proj
        )
        self.cell = nn.LSTMCell(in_dim, config.dec_lstm_units)
        self.attention = GMMAttention(
            config.dec_lstm_units,
            config.gmm_mixtures,
            config.gmm_sigma_min,
            config.gmm_normalized,
        )
        self.blocks = nn.ModuleList(
            SelfAttentionBlock(config.dec_lstm_units, config.heads, config.dropout)
            for _ in range(config.dec_attn_blocks)
        )
        head_in = config.dec_lstm_units + config.enc_proj
        self.phoneme_head = nn.Linear(head_in, n_phoneme)
        self.tone_head = nn.Linear(head_in, n_tone)
        self.prosody_head = nn.Linear(head_in, n_prosody)
        self.stop_head = nn.Linear(head_in, 1)
        self.dropout = nn.Dropout(config.dropout)

    def initial_state(self, batch: int, dtype, device) -> DecoderState:
        units = self.config.dec_lstm_units
        return DecoderState(
            h=torch.zeros(batch, units, dtype=dtype, device=device),
            c=torch.zeros(batch, units, dtype=dtype, device=device),
            means=self.attention.initial_means(batch, dtype, device),
            context=torch.zeros(batch, self.config.enc_proj, dtype=dtype, device=device),
            kv=[None] * len(self.blocks),
            step=0,
        )

    def step(
        self,
        prev_labels: tuple[torch.Tensor, torch.Tensor, torch.Tensor],
        state: DecoderState,
        encoder: EncoderOutput,
    ) -> tuple[DecoderStepOutput, DecoderState]:
        """Advance one decoding step.

        prev_labels are the (phoneme, tone, prosody) ids fed back from the
        previous step (GO ids at step 0).  Self-attention sees only the
        hidden states up to and including the current step.
        """
        for ids, n in zip(prev_labels, self.n_labels):
            if ids.min() < 0 or ids.max() >= n:
                raise ValueError(
                    f"label index out of range: {int(ids.min())}..{int(ids.max())} vs {n}"
                )
        x = torch.cat(
            (
                self.phoneme_emb(prev_labels[0]),
                self.tone_emb(prev_labels[1]),
                self.prosody_emb(prev_labels[2]),
                state.context,
            ),
            dim=-1,
        )
        h, c = self.cell(x, (state.h, state.c))
        weights, means = self.attention(
            h, state.means, encoder.memory.size(1), key_mask=encoder.mask
        )
        context = torch.bmm(weights.unsqueeze(1), encoder.memory).squeeze(1)

        y = h.unsqueeze(1)
        new_kv = []
        for block, cached in zip(self.blocks, state.kv):
            k_hist, v_hist = cached if cached is not None else (None, None)
            y, k, v = block.step(y, k_hist, v_hist)
            new_kv.append((k, v))
        feat = self.dropout(torch.cat((y.squeeze(1), context), dim=-1))

        out = DecoderStepOutput(
            phoneme_logits=self.phoneme_head(feat),
            tone_logits=self.tone_head(feat),
            prosody_logits=self.prosody_head(feat),
            stop_logit=self.stop_head(feat).squeeze(-1),
            attention_weights=weights,
        )
        new_state = DecoderState(
            h=h, c=c, means=means, context=context, kv=new_kv, step=state.step + 1
        )
        return out, new_state


class PostNet(nn.Module):
    """Convolutional residual over the concatenated decoded logit streams.

    The final convolution starts at zero so the refinement is initially the
    identity.
    """

    def __init__(self, config: MainConfig, stream_dims: tuple[int, int, int]):
        super().__init__()
        self.stream_dims = stream_dims
        total = sum(stream_dims)
        pad = (config.postnet_kernel - 1) // 2
        dims = (
            [total]
            + [config.postnet_filters] * (config.postnet_layers - 1)
            + [total]
        )
        self.convs = nn.ModuleList(
            nn.Conv1d(dims[i], dims[i + 1], config.postnet_kernel, padding=pad)
            for i in range(config.postnet_layers)
        )
        self.norms = nn.ModuleList(
            nn.LayerNorm(dims[i + 1]) for i in range(config.postnet_layers - 1)
        )
        self.dropout = nn.Dropout(config.dropout)
        nn.init.zeros_(self.convs[-1].weight)
        nn.init.zeros_(self.convs[-1].bias)

    def residual(
        self,
        streams: tuple[torch.Tensor, torch.Tensor, torch.Tensor],
        mask: torch.Tensor | None = None,
    ) -> tuple[torch.Tensor, ...]:
        x = torch.cat(streams, dim=-1)
        fmask = None if mask is None else mask.to(x.dtype).unsqueeze(2)
        for i, conv in enumerate(self.convs):
            if fmask is not None:
                x = x * fmask
            x = conv(x.transpose(1, 2)).transpose(1, 2)
            if i < len(self.convs) - 1:
                x = self.dropout(self.norms[i](torch.tanh(x)))
        if fmask is not None:
            x = x * fmask
        return torch.split(x, self.stream_dims, dim=-1)


class UnifiedFrontend(nn.Module):
    """Character text in; phoneme, tone, prosody and stop streams out."""

    def __init__(
        self,
        config: MainConfig,
        vocabs: VocabSet,
        embedding_matrix: np.ndarray,
        aux: AuxModel | None = None,
    ):
        super().__init__()
        if embedding_matrix.shape != (len(vocabs.char), config.embed_dim):
            raise ValueError(
                f"embedding matrix {embedding_matrix.shape} does not match "
                f"(n_char={len(vocabs.char)}, embed_dim={config.embed_dim})"
            )
        if aux is not None and aux.config.dense_width != config.aux_dense_width:
            raise ValueError(
                f"auxiliary dense width {aux.config.dense_width} != "
                f"configured {config.aux_dense_width}"
            )
        if aux is None and config.aux_dense_width != 0:
            raise ValueError("aux_dense_width must be 0 without an auxiliary module")
        self.config = config
        self.vocabs = vocabs
        self.char_embedding = nn.Embedding.from_pretrained(
            torch.as_tensor(embedding_matrix, dtype=torch.float32),
            freeze=not config.embedding_trainable,
            padding_idx=vocabs.char.pad_id,
        )
        self.aux = aux
        self.encoder = Encoder(config)
        self.decoder = Decoder(
            config, len(vocabs.phoneme), len(vocabs.tone), len(vocabs.prosody)
        )
        self.postnet = PostNet(
            config, (len(vocabs.phoneme), len(vocabs.tone), len(vocabs.prosody))
        )

    @property
    def go_ids(self) -> tuple[int, int, int]:
        return (
            self.vocabs.phoneme.go_id,
            self.vocabs.tone.go_id,
            self.vocabs.prosody.go_id,
        )

    def encode(
        self,
        char_embeddings: torch.Tensor,
        aux_dense: torch.Tensor | None,
        mask: torch.Tensor,
    ) -> EncoderOutput:
        """Run the encoder over embeddings plus the auxiliary representation.

        ``aux_dense`` may be None (or zero-width) when the auxiliary branch
        is disabled.
        """
        if aux_dense is not None and aux_dense.size(-1) > 0:
            if aux_dense.shape[:2] != char_embeddings.shape[:2]:
                raise ValueError("char embeddings and aux dense lengths disagree")
            x = torch.cat((char_embeddings, aux_dense), dim=-1)
        else:
            x = char_embeddings
        expected = self.config.embed_dim + self.config.aux_dense_width
        if x.size(-1) != expected:
            raise ValueError(f"encoder input width {x.size(-1)}, expected {expected}")
        return EncoderOutput(memory=self.encoder(x, mask), mask=mask)

    def encode_ids(self, char_ids: torch.Tensor, mask: torch.Tensor) -> EncoderOutput:
        emb = self.char_embedding(char_ids)
        dense = self.aux(emb, mask).dense if self.aux is not None else None
        return self.encode(emb, dense, mask)

    def decoder_step(
        self,
        prev_labels: tuple[torch.Tensor, torch.Tensor, torch.Tensor],
        state: DecoderState,
        encoder: EncoderOutput,
    ) -> tuple[DecoderStepOutput, DecoderState]:
        return self.decoder.step(prev_labels, state, encoder)

    def initial_decoder_state(self, batch: int, dtype, device) -> DecoderState:
        return self.decoder.initial_state(batch, dtype, device)

    def postnet_refine(
        self,
        streams: tuple[torch.Tensor, torch.Tensor, torch.Tensor],
        mask: torch.Tensor | None = None,
    ) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
        """Add the post-net residual to each logit stream."""
        res = self.postnet.residual(streams, mask)
        return tuple(s + r for s, r in zip(streams, res))

    def forward_teacher_forced(
        self,
        char_ids: torch.Tensor,
        mask: torch.Tensor,
        targets: tuple[torch.Tensor, torch.Tensor, torch.Tensor],
        sampling_ratio: float,
        generator: torch.Generator | None = None,
    ):
        """Decode one step per input character with scheduled sampling.

        At each step the previous gold labels are fed with probability
        ``sampling_ratio`` (drawn per step and sequence), otherwise the
        model's own previous argmax.  Returns (before-streams, stop logits,
        after-streams); the post-net refinement is computed over the full
        sequence.
        """
        if not 0.0 <= sampling_ratio <= 1.0:
            raise ValueError("sampling_ratio must lie in [0, 1]")
        batch, length = char_ids.shape
        encoder = self.encode_ids(char_ids, mask)
        dtype = encoder.memory.dtype
        state = self.decoder.initial_state(batch, dtype, char_ids.device)
        go = [
            torch.full((batch,), g, dtype=torch.long, device=char_ids.device)
            for g in self.go_ids
        ]
        prev = tuple(go)
        ph_all, tn_all, pr_all, stop_all = [], [], [], []
        for t in range(length):
            out, state = self.decoder.step(prev, state, encoder)
            ph_all.append(out.phoneme_logits)
            tn_all.append(out.tone_logits)
            pr_all.append(out.prosody_logits)
            stop_all.append(out.stop_logit)
            if t + 1 < length:
                gold = tuple(tgt[:, t] for tgt in targets)
                if sampling_ratio >= 1.0:
                    prev = gold
                else:
                    pred = (
                        out.phoneme_logits.argmax(dim=-1),
                        out.tone_logits.argmax(dim=-1),
                        out.prosody_logits.argmax(dim=-1),
                    )
                    if sampling_ratio <= 0.0:
                        prev = pred
                    else:
                        coin = (
                            torch.rand(batch, generator=generator, device=char_ids.device)
                            < sampling_ratio
                        )
                        prev = tuple(torch.where(coin, g, p) for g, p in zip(gold, pred))
        before = (
            torch.stack(ph_all, dim=1),
            torch.stack(tn_all, dim=1),
            torch.stack(pr_all, dim=1),
        )
        stop_logits = torch.stack(stop_all, dim=1)
        after = self.postnet_refine(before, mask)
        return before, stop_logits, after
