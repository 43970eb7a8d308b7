import pytest
import torch

from unifront.aux_model import AuxConfig, AuxModel
from unifront.data import Lexicon, Pronunciation
from unifront.main_model import MainConfig, UnifiedFrontend
from unifront.synthetic import (
    default_lexicon,
    generate_embeddings,
    generate_synthetic_corpus,
    vocab_for_lexicon,
)


@pytest.fixture(scope="session")
def lexicon():
    return default_lexicon()


@pytest.fixture(scope="session")
def vocabs(lexicon):
    return vocab_for_lexicon(lexicon, n_pos=8)


@pytest.fixture(scope="session")
def corpus20(lexicon):
    return generate_synthetic_corpus(20, seed=11, lexicon=lexicon)


@pytest.fixture
def tiny_lexicon():
    return Lexicon(
        {
            "行": [Pronunciation("xing", 2), Pronunciation("hang", 2)],
            "人": [Pronunciation("ren", 2)],
            "北": [Pronunciation("bei", 3)],
        }
    )


TINY = dict(
    embed_dim=12,
    enc_lstm_units=8,
    enc_proj=8,
    enc_attn_blocks=1,
    heads=2,
    dec_lstm_units=12,
    dec_attn_blocks=1,
    gmm_mixtures=2,
    postnet_filters=8,
    phoneme_embed=6,
    tone_embed=3,
    prosody_embed=3,
    dropout=0.0,
)


def tiny_config(**overrides) -> MainConfig:
    kw = dict(TINY)
    kw.update(overrides)
    return MainConfig(**kw)


def tiny_model(vocabs, lexicon, seed=0, with_aux=False, **overrides) -> UnifiedFrontend:
    torch.manual_seed(seed)
    aux = None
    aux_width = 0
    if with_aux:
        aux_cfg = AuxConfig(
            variant="dcnn",
            dcnn_filters=8,
            dcnn_layers=2,
            dcnn_dilations=(1, 2),
            dropout=0.0,
        )
        aux = AuxModel(aux_cfg, TINY["embed_dim"], 4, 8)
        aux_width = aux_cfg.dense_width
    cfg = tiny_config(aux_dense_width=aux_width, **overrides)
    emb = generate_embeddings(lexicon, cfg.embed_dim, seed=seed + 1)
    matrix = emb.matrix_for(vocabs.char)
    return UnifiedFrontend(cfg, vocabs, matrix, aux)


@pytest.fixture
def model(vocabs, lexicon):
    return tiny_model(vocabs, lexicon, seed=3)
