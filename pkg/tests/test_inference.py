import json

import pytest
import torch

from unifront.data import Lexicon, Pronunciation, build_polyphone_mask
from unifront.inference import (
    DecodeOptions,
    batch_predict,
    build_stop_decision,
    decode,
    decode_batch,
)
from unifront.main_model import DecoderState, DecoderStepOutput, EncoderOutput

from conftest import tiny_model


class TestStopDecision:
    def test_threshold_is_strictly_greater(self):
        opts = DecodeOptions(max_steps=10)
        assert build_stop_decision(0.0, step=0, options=opts) is False  # sigmoid(0)=0.5

    def test_cap_fires_regardless_of_logit(self):
        opts = DecodeOptions(max_steps=10)
        assert build_stop_decision(-100.0, step=9, options=opts) is True

    def test_saturated_logit_stops(self):
        opts = DecodeOptions(max_steps=10)
        assert build_stop_decision(50.0, step=0, options=opts) is True

    def test_unresolved_max_steps_rejected(self):
        with pytest.raises(ValueError):
            build_stop_decision(0.0, step=0, options=DecodeOptions())

    def test_options_validation(self):
        with pytest.raises(ValueError):
            DecodeOptions(mode="greedy")
        with pytest.raises(ValueError):
            DecodeOptions(stop_threshold=1.0)
        with pytest.raises(ValueError):
            DecodeOptions(max_steps=0)


class RecordingModel:
    """Decode-protocol mock: always predicts a fixed sentinel label and
    records every label triple fed into the decoder."""

    def __init__(self, vocabs, sentinel="zhong"):
        self.vocabs = vocabs
        self.sentinel = vocabs.phoneme.index(sentinel)
        self.fed = []

    @property
    def go_ids(self):
        return (
            self.vocabs.phoneme.go_id,
            self.vocabs.tone.go_id,
            self.vocabs.prosody.go_id,
        )

    def eval(self):
        return self

    def encode_ids(self, char_ids, mask):
        memory = torch.zeros(char_ids.shape[0], char_ids.shape[1], 4)
        return EncoderOutput(memory=memory, mask=mask)

    def initial_decoder_state(self, batch, dtype, device):
        return DecoderState(
            h=torch.zeros(batch, 1),
            c=torch.zeros(batch, 1),
            means=torch.zeros(batch, 1),
            context=torch.zeros(batch, 4),
            kv=[],
            step=0,
        )

    def decoder_step(self, prev_labels, state, encoder):
        self.fed.append(tuple(t.clone() for t in prev_labels))
        batch, length = encoder.mask.shape
        ph = torch.full((batch, len(self.vocabs.phoneme)), -5.0)
        ph[:, self.sentinel] = 5.0
        tn = torch.zeros(batch, len(self.vocabs.tone))
        pr = torch.zeros(batch, len(self.vocabs.prosody))
        stop = torch.full((batch,), -50.0)
        out = DecoderStepOutput(
            phoneme_logits=ph,
            tone_logits=tn,
            prosody_logits=pr,
            stop_logit=stop,
            attention_weights=torch.ones(batch, length) / length,
        )
        new_state = DecoderState(
            h=state.h, c=state.c, means=state.means + 1.0, context=state.context,
            kv=[], step=state.step + 1,
        )
        return out, new_state

    def postnet_refine(self, streams, mask=None):
        return streams


class TestSarMechanics:
    def test_feedback_uses_lexicon_phoneme_at_non_polyphone_steps(self, vocabs, tiny_lexicon):
        """mask [False, True, False]: the input to step 1 must be char 0's
        lexicon syllable even though the model predicted the sentinel."""
        text = "北行人"
        assert build_polyphone_mask(text, tiny_lexicon) == [False, True, False]
        mock = RecordingModel(vocabs)
        pred = decode(mock, text, tiny_lexicon, DecodeOptions(mode="sar", max_steps=3))
        fed_step1 = mock.fed[1][0]
        assert int(fed_step1[0]) == vocabs.phoneme.index("bei")
        # polyphone step keeps the model's own prediction as feedback
        fed_step2 = mock.fed[2][0]
        assert int(fed_step2[0]) == mock.sentinel
        # emission at non-polyphone steps is the lexicon syllable too
        assert pred.phonemes[0] == vocabs.phoneme.index("bei")
        assert pred.phonemes[1] == mock.sentinel
        assert pred.phonemes[2] == vocabs.phoneme.index("ren")

    def test_step_zero_feeds_go(self, vocabs, tiny_lexicon):
        mock = RecordingModel(vocabs)
        decode(mock, "北", tiny_lexicon, DecodeOptions(mode="sar", max_steps=1))
        assert tuple(int(t[0]) for t in mock.fed[0]) == mock.go_ids

    def test_ar_mode_never_substitutes(self, vocabs, tiny_lexicon):
        mock = RecordingModel(vocabs)
        pred = decode(mock, "北人", tiny_lexicon, DecodeOptions(mode="ar", max_steps=2))
        assert pred.phonemes == [mock.sentinel, mock.sentinel]


class TestSarStructural:
    def test_non_polyphone_accuracy_is_exactly_one(self, vocabs, lexicon, corpus20):
        for seed in range(3):
            model = tiny_model(vocabs, lexicon, seed=seed)
            texts = [u.chars for u in corpus20[:10]]
            preds = decode_batch(model, texts, lexicon, DecodeOptions(mode="sar"))
            for utt, pred in zip(corpus20[:10], preds):
                syms = vocabs.phoneme.decode(pred.phonemes[: len(utt)])
                for i, is_poly in enumerate(utt.polyphone_mask):
                    if not is_poly and i < len(syms):
                        assert syms[i] == utt.phonemes[i]

    def test_sar_beats_ar_on_monophone_text(self, vocabs, lexicon):
        model = tiny_model(vocabs, lexicon, seed=1)
        mono = Lexicon({c: p for c, p in lexicon.entries.items() if len(p) == 1})
        text = "北京人民天气"
        sar = decode(model, text, lexicon, DecodeOptions(mode="sar", max_steps=6))
        syms = vocabs.phoneme.decode(sar.phonemes)
        expect = [lexicon.pronunciations(c)[0].syllable for c in text]
        assert syms == expect  # structural: mask forces every step
        ar = decode(model, text, lexicon, DecodeOptions(mode="ar", max_steps=6))
        ar_syms = vocabs.phoneme.decode(ar.phonemes)
        assert sum(a == e for a, e in zip(ar_syms, expect)) < len(expect)

    def test_all_polyphone_text_makes_sar_equal_ar(self, vocabs, lexicon):
        model = tiny_model(vocabs, lexicon, seed=2)
        text = "的得行中乐重"
        assert all(build_polyphone_mask(text, lexicon))
        opts = dict(max_steps=len(text), apply_postnet=True)
        a = decode(model, text, lexicon, DecodeOptions(mode="ar", **opts))
        b = decode(model, text, lexicon, DecodeOptions(mode="sar", **opts))
        assert a.phonemes == b.phonemes
        assert a.tones == b.tones
        assert a.prosody == b.prosody
        assert (a.attention == b.attention).all()


class TestTermination:
    def test_always_terminates_within_max_steps(self, model, lexicon):
        for text in ("北", "北京人民大学生中", "的的的"):
            pred = decode(model, text, lexicon, DecodeOptions(max_steps=4))
            assert pred.stop_step <= 4
            assert len(pred.phonemes) == len(pred.tones) == len(pred.prosody) == pred.stop_step

    def test_truncation_flagged_on_cap(self, vocabs, tiny_lexicon):
        mock = RecordingModel(vocabs)  # stop logit -50: never stops by itself
        pred = decode(mock, "北人", tiny_lexicon, DecodeOptions(max_steps=2))
        assert pred.truncated is True
        assert pred.stop_step == 2

    def test_default_cap_is_length_plus_five(self, model, lexicon):
        pred = decode(model, "北京", lexicon, DecodeOptions())
        assert pred.stop_step <= 7

    def test_empty_input_rejected(self, model, lexicon):
        with pytest.raises(ValueError):
            decode(model, "", lexicon, DecodeOptions())


class TestFreeRunningEquivalence:
    def test_teacher_forced_ratio_zero_matches_ar_decode(self, vocabs, lexicon, corpus20):
        """ratio=0 feeds the model its own argmax, which is exactly the AR
        inference feedback path."""
        model = tiny_model(vocabs, lexicon, seed=6)
        model.eval()
        utt = corpus20[0]
        ids = torch.tensor([vocabs.char.encode(utt.chars)])
        mask = torch.ones(1, len(utt), dtype=torch.bool)
        targets = tuple(torch.zeros(1, len(utt), dtype=torch.long) for _ in range(3))
        before, _, _ = model.forward_teacher_forced(ids, mask, targets, 0.0)
        pred = decode(
            model,
            utt.chars,
            lexicon,
            DecodeOptions(
                mode="ar", max_steps=len(utt), ignore_stop_head=True, apply_postnet=False
            ),
        )
        assert pred.phonemes == before[0].argmax(-1)[0].tolist()
        assert pred.stop_step == len(utt)


class TestBatchPredict:
    def test_order_and_count_preserved(self, model, lexicon, corpus20, tmp_path):
        out = tmp_path / "pred.jsonl"
        failed = batch_predict(
            model, corpus20[:3], lexicon, DecodeOptions(), out, meta={"seed": 0}
        )
        assert failed == 0
        lines = out.read_text(encoding="utf-8").splitlines()
        records = [json.loads(l) for l in lines]
        assert "_meta" in records[0]
        body = records[1:]
        assert len(body) == 3
        assert [r["text"] for r in body] == [u.chars for u in corpus20[:3]]
        assert all("att_peak" in r for r in body)

    def test_unknown_characters_still_decode(self, model, lexicon, tmp_path):
        out = tmp_path / "pred.jsonl"
        failed = batch_predict(model, ["北X京"], lexicon, DecodeOptions(), out)
        assert failed == 0
        rec = json.loads(out.read_text(encoding="utf-8").splitlines()[0])
        assert rec["text"] == "北X京"
        assert len(rec["syl"].split()) == rec["att_peak"].__len__()

    def test_rerun_is_byte_identical(self, model, lexicon, corpus20, tmp_path):
        a, b = tmp_path / "a.jsonl", tmp_path / "b.jsonl"
        batch_predict(model, corpus20[:5], lexicon, DecodeOptions(), a, meta={"seed": 1})
        batch_predict(model, corpus20[:5], lexicon, DecodeOptions(), b, meta={"seed": 1})
        assert a.read_bytes() == b.read_bytes()
