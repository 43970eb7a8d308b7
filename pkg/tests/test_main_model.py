import pytest
import torch

from unifront.losses import composite_loss
from unifront.main_model import MainConfig, UnifiedFrontend

from conftest import tiny_config, tiny_model


def make_inputs(model, texts):
    vocab = model.vocabs.char
    max_len = max(len(t) for t in texts)
    ids = torch.zeros(len(texts), max_len, dtype=torch.long)
    mask = torch.zeros(len(texts), max_len, dtype=torch.bool)
    for b, t in enumerate(texts):
        ids[b, : len(t)] = torch.tensor(vocab.encode(t))
        mask[b, : len(t)] = True
    return ids, mask


def gold_targets(model, utts, max_len):
    v = model.vocabs
    out = []
    for fam, get in (
        (v.phoneme, lambda u: u.phonemes),
        (v.tone, lambda u: [str(t) for t in u.tones]),
        (v.prosody, lambda u: [str(p) for p in u.prosody]),
    ):
        grid = torch.zeros(len(utts), max_len, dtype=torch.long)
        for b, u in enumerate(utts):
            grid[b, : len(u)] = torch.tensor(fam.encode(get(u)))
        out.append(grid)
    return tuple(out)


class TestConfig:
    def test_heads_must_divide_widths(self):
        with pytest.raises(ValueError, match="divide"):
            MainConfig(enc_proj=30, heads=8)

    def test_mixtures_validated(self):
        with pytest.raises(ValueError):
            MainConfig(gmm_mixtures=0)

    def test_desk_preset_round_trips(self):
        cfg = MainConfig.desk()
        assert MainConfig.from_dict(cfg.to_dict()) == cfg


class TestEncode:
    def test_memory_length_matches_input(self, model):
        ids, mask = make_inputs(model, ["北京人民大学生"])
        enc = model.encode_ids(ids, mask)
        assert enc.memory.shape[1] == 7
        assert enc.lengths.tolist() == [7]

    def test_no_auxiliary_and_zero_width_paths_agree(self, vocabs, lexicon):
        m = tiny_model(vocabs, lexicon, seed=5, with_aux=False)
        ids, mask = make_inputs(m, ["北京大"])
        emb = m.char_embedding(ids)
        a = m.encode(emb, None, mask).memory
        b = m.encode(emb, torch.zeros(1, 3, 0), mask).memory
        assert torch.equal(a, b)
        assert a.shape[1] == 3

    def test_aux_dense_feeds_encoder(self, vocabs, lexicon):
        m = tiny_model(vocabs, lexicon, seed=5, with_aux=True).eval()
        ids, mask = make_inputs(m, ["北京大"])
        enc = m.encode_ids(ids, mask)
        assert enc.memory.shape == (1, 3, m.config.enc_proj)
        # an all-zero dense input is accepted on the same path
        emb = m.char_embedding(ids)
        zeros = torch.zeros(1, 3, m.config.aux_dense_width)
        assert m.encode(emb, zeros, mask).memory.shape == (1, 3, m.config.enc_proj)

    def test_width_mismatch_names_expected_and_actual(self, model):
        bad = torch.randn(1, 4, model.config.embed_dim + 1)
        mask = torch.ones(1, 4, dtype=torch.bool)
        with pytest.raises(ValueError, match="expected"):
            model.encode(bad, None, mask)

    def test_eval_mode_deterministic(self, model):
        model.eval()
        ids, mask = make_inputs(model, ["中国人民"])
        a = model.encode_ids(ids, mask).memory
        b = model.encode_ids(ids, mask).memory
        assert torch.equal(a, b)


class TestDecoderStep:
    def setup_step(self, model, text="北京大人"):
        model.eval()
        ids, mask = make_inputs(model, [text])
        enc = model.encode_ids(ids, mask)
        state = model.initial_decoder_state(1, enc.memory.dtype, ids.device)
        go = tuple(torch.tensor([g]) for g in model.go_ids)
        return enc, state, go

    def test_step_zero_shapes_and_finiteness(self, model):
        enc, state, go = self.setup_step(model)
        out, state = model.decoder_step(go, state, enc)
        v = model.vocabs
        assert out.phoneme_logits.shape == (1, len(v.phoneme))
        assert out.tone_logits.shape == (1, len(v.tone))
        assert out.prosody_logits.shape == (1, len(v.prosody))
        assert out.stop_logit.shape == (1,)
        assert out.attention_weights.shape == (1, 4)
        for t in (out.phoneme_logits, out.tone_logits, out.prosody_logits, out.stop_logit):
            assert torch.isfinite(t).all()

    def test_attention_means_strictly_increase(self, model):
        enc, state, go = self.setup_step(model)
        prev_means = state.means.clone()
        labels = go
        for _ in range(3):
            out, state = model.decoder_step(labels, state, enc)
            assert (state.means > prev_means).all()
            prev_means = state.means.clone()
            labels = (
                out.phoneme_logits.argmax(-1),
                out.tone_logits.argmax(-1),
                out.prosody_logits.argmax(-1),
            )

    def test_step_is_pure_in_eval_mode(self, model):
        enc, state, go = self.setup_step(model)
        a, _ = model.decoder_step(go, state, enc)
        b, _ = model.decoder_step(go, state, enc)
        assert torch.equal(a.phoneme_logits, b.phoneme_logits)
        assert torch.equal(a.stop_logit, b.stop_logit)

    def test_invalid_label_index_rejected(self, model):
        enc, state, go = self.setup_step(model)
        bad = (torch.tensor([len(model.vocabs.phoneme)]), go[1], go[2])
        with pytest.raises(ValueError, match="out of range"):
            model.decoder_step(bad, state, enc)


class TestPostNet:
    def test_zeroed_parameters_give_identity(self, model):
        for p in model.postnet.parameters():
            torch.nn.init.zeros_(p)
        x = tuple(torch.randn(1, 5, n) for n in
                  (len(model.vocabs.phoneme), len(model.vocabs.tone), len(model.vocabs.prosody)))
        out = model.postnet_refine(x)
        for a, b in zip(out, x):
            assert torch.equal(a, b)

    def test_length_one_accepted(self, model):
        model.eval()
        x = tuple(torch.randn(1, 1, n) for n in
                  (len(model.vocabs.phoneme), len(model.vocabs.tone), len(model.vocabs.prosody)))
        out = model.postnet_refine(x)
        for a, b in zip(out, x):
            assert a.shape == b.shape

    def test_additivity_is_exact(self, model):
        model.eval()
        torch.manual_seed(0)
        for p in model.postnet.parameters():
            torch.nn.init.normal_(p, std=0.3)
        x = tuple(torch.randn(2, 4, n) for n in
                  (len(model.vocabs.phoneme), len(model.vocabs.tone), len(model.vocabs.prosody)))
        refined = model.postnet_refine(x)
        residual = model.postnet.residual(x)
        for r, s, orig in zip(refined, residual, x):
            assert torch.equal(r, orig + s)


class TestTeacherForced:
    def run_tf(self, model, utts, ratio, seed=None, targets_override=None):
        model.eval()
        ids, mask = make_inputs(model, [u.chars for u in utts])
        targets = targets_override or gold_targets(model, utts, ids.shape[1])
        gen = torch.Generator().manual_seed(seed) if seed is not None else None
        return model.forward_teacher_forced(ids, mask, targets, ratio, generator=gen)

    def test_ratio_validated(self, model, corpus20):
        with pytest.raises(ValueError):
            self.run_tf(model, corpus20[:1], ratio=1.5)

    def test_shapes(self, model, corpus20):
        utts = corpus20[:3]
        before, stop, after = self.run_tf(model, utts, ratio=1.0)
        max_len = max(len(u) for u in utts)
        assert stop.shape == (3, max_len)
        assert before[0].shape == (3, max_len, len(model.vocabs.phoneme))
        assert after[2].shape == (3, max_len, len(model.vocabs.prosody))

    def test_causality_under_teacher_forcing(self, model, corpus20):
        """Perturbing the gold label fed at step t cannot change any output
        before step t+1."""
        utt = max(corpus20, key=len)
        ids, mask = make_inputs(model, [utt.chars])
        targets = gold_targets(model, [utt], len(utt))
        model.eval()
        base, _, _ = model.forward_teacher_forced(ids, mask, targets, 1.0)
        t = len(utt) // 2
        bumped = tuple(t_.clone() for t_ in targets)
        bumped[0][0, t] = (bumped[0][0, t] + 1) % len(model.vocabs.phoneme)
        moved, _, _ = model.forward_teacher_forced(ids, mask, bumped, 1.0)
        assert torch.equal(base[0][:, : t + 1], moved[0][:, : t + 1])
        assert not torch.equal(base[0][:, t + 1], moved[0][:, t + 1])

    def test_full_teacher_forcing_feeds_gold(self, model, corpus20):
        """With ratio 1 the inputs at step t are the gold labels of step t-1:
        sabotaging gold after the last step has no effect, sabotaging the
        previous one does."""
        utt = corpus20[0]
        ids, mask = make_inputs(model, [utt.chars])
        targets = gold_targets(model, [utt], len(utt))
        model.eval()
        base, _, _ = model.forward_teacher_forced(ids, mask, targets, 1.0)
        last = tuple(t_.clone() for t_ in targets)
        last[0][0, -1] += 1  # never fed back
        same, _, _ = model.forward_teacher_forced(ids, mask, last, 1.0)
        assert torch.equal(base[0], same[0])

    def test_fixed_seed_reproduces_choice_pattern(self, model, corpus20):
        utts = corpus20[:4]
        a = self.run_tf(model, utts, ratio=0.5, seed=99)
        b = self.run_tf(model, utts, ratio=0.5, seed=99)
        for x, y in zip(a[0], b[0]):
            assert torch.equal(x, y)
        c = self.run_tf(model, utts, ratio=0.5, seed=100)
        assert not all(torch.equal(x, y) for x, y in zip(a[0], c[0]))


class TestFullPassGradient:
    def test_matches_central_differences(self, vocabs, lexicon):
        model = tiny_model(vocabs, lexicon, seed=9, with_aux=True).double()
        model.eval()
        text = "北中京"  # 3 chars, one polyphone
        ids = torch.tensor([vocabs.char.encode(text)])
        mask = torch.ones(1, 3, dtype=torch.bool)
        targets = (
            torch.tensor([[vocabs.phoneme.index(s) for s in ("bei", "zhong", "jing")]]),
            torch.tensor([[vocabs.tone.index(s) for s in ("3", "1", "1")]]),
            torch.tensor([[vocabs.prosody.index(s) for s in ("0", "1", "3")]]),
        )
        # randomize everything, including the zero-initialized final postnet conv
        g = torch.Generator().manual_seed(123)
        for p in model.parameters():
            with torch.no_grad():
                p.copy_(torch.randn(p.shape, generator=g, dtype=torch.double) * 0.3)

        def loss_value():
            before, stop, after = model.forward_teacher_forced(ids, mask, targets, 1.0)
            return composite_loss(before, stop, after, targets, mask).total

        model.zero_grad()
        loss_value().backward()

        params = [p for p in model.parameters() if p.requires_grad and p.grad is not None]
        rng = torch.Generator().manual_seed(7)
        h = 1e-5
        worst = 0.0
        checked = 0
        for p in params:
            flat = p.data.reshape(-1)
            gflat = p.grad.reshape(-1)
            n_probe = min(3, flat.numel())
            idxs = torch.randperm(flat.numel(), generator=rng)[:n_probe]
            for idx in idxs:
                orig = float(flat[idx])
                flat[idx] = orig + h
                with torch.no_grad():
                    up = float(loss_value())
                flat[idx] = orig - h
                with torch.no_grad():
                    dn = float(loss_value())
                flat[idx] = orig
                fd = (up - dn) / (2 * h)
                an = float(gflat[idx])
                rel = abs(fd - an) / max(abs(fd), abs(an), 1e-6)
                worst = max(worst, rel)
                checked += 1
        assert checked > 30
        assert worst < 1e-3, f"max relative error {worst:.2e}"
