import itertools

import pytest
import torch

from unifront.data import is_valid_bmes
from unifront.evaluation import (
    LevelCounts,
    RunCounts,
    block_counts,
    block_f1,
    canonicalize_bmes,
    evaluate_run,
    evaluate_tagger,
    format_report_table,
    g2p_accuracy,
    stacked_prosody_counts,
    stacked_prosody_f1,
)
from unifront.inference import DecodeOptions
from unifront.main_model import DecoderState, DecoderStepOutput, EncoderOutput


def span_set_oracle(tags):
    """Independent span extraction: split on word-final tags, no shared code."""
    spans, start = set(), 0
    for i, t in enumerate(tags):
        if t in ("E", "S"):
            spans.add((start, i))
            start = i + 1
    return spans


def oracle_f1(gold, pred):
    g, p = span_set_oracle(gold), span_set_oracle(pred)
    m = len(g & p)
    precision = m / len(p) if p else 0.0
    recall = m / len(g) if g else 0.0
    return 2 * precision * recall / (precision + recall) if precision + recall else 0.0


def all_valid_bmes(n):
    return [t for t in itertools.product("BMES", repeat=n) if is_valid_bmes(t)]


class TestBlockF1:
    def test_identity_is_one(self):
        assert block_f1(list("BESBME"), list("BESBME"))[2] == 1.0

    def test_hand_case_zero_matches(self):
        p, r, f1 = block_f1(["B", "E", "S"], ["S", "B", "E"])
        assert (p, r, f1) == (0.0, 0.0, 0.0)

    @pytest.mark.parametrize("n", range(1, 7))
    def test_matches_span_set_oracle_exhaustively(self, n):
        seqs = all_valid_bmes(n)
        for gold in seqs:
            for pred in seqs:
                assert block_f1(gold, pred)[2] == pytest.approx(oracle_f1(gold, pred))

    def test_invalid_prediction_is_repaired_then_scored(self):
        # M with no opener, E with no opener
        p, r, f1 = block_f1(["B", "E", "S"], ["M", "E", "E"])
        repaired = canonicalize_bmes(["M", "E", "E"])
        assert is_valid_bmes(repaired)
        assert f1 == pytest.approx(oracle_f1(["B", "E", "S"], repaired))

    def test_length_mismatch_rejected(self):
        with pytest.raises(ValueError):
            block_f1(["S"], ["S", "S"])


class TestCanonicalize:
    @pytest.mark.parametrize(
        "raw,expect",
        [
            (["M", "M", "S"], ["B", "E", "S"]),
            (["E"], ["S"]),
            (["B", "B"], ["S", "S"]),
            (["B", "M"], ["B", "E"]),
            (["S", "E", "M"], ["S", "S", "S"]),
            (["<unk>", "S"], ["S", "S"]),
        ],
    )
    def test_cases(self, raw, expect):
        got = canonicalize_bmes(raw)
        assert got == expect
        assert is_valid_bmes(got)

    def test_exhaustive_outputs_are_valid(self):
        for n in range(1, 6):
            for tags in itertools.product("BMES", repeat=n):
                assert is_valid_bmes(canonicalize_bmes(tags))

    def test_valid_input_unchanged(self):
        for n in range(1, 6):
            for tags in all_valid_bmes(n):
                assert canonicalize_bmes(tags) == list(tags)


class TestG2PAccuracy:
    def test_perfect_over_polyphone_sites(self):
        golds = [["a", "b", "c", "d", "e", "f", "g"]]
        masks = [[True] * 7]
        assert g2p_accuracy(golds, golds, masks) == 1.0

    def test_no_polyphones_is_undefined_not_one(self):
        golds = [["a", "b"]]
        masks = [[False, False]]
        assert g2p_accuracy(golds, golds, masks) is None

    def test_three_of_four(self):
        golds = [["a", "b", "c", "d"]]
        preds = [["a", "b", "c", "x"]]
        masks = [[True, True, True, True]]
        assert g2p_accuracy(golds, preds, masks) == 0.75

    def test_monophone_positions_excluded_from_both_sides(self):
        golds = [["a", "b"]]
        preds = [["x", "b"]]  # wrong only at the monophone site
        masks = [[False, True]]
        assert g2p_accuracy(golds, preds, masks) == 1.0

    def test_short_prediction_counts_missing_as_errors(self):
        golds = [["a", "b", "c"]]
        preds = [["a"]]
        masks = [[True, True, True]]
        assert g2p_accuracy(golds, preds, masks) == pytest.approx(1 / 3)


class TestStackedProsody:
    def test_identity(self):
        gold = [0, 1, 2, 3]
        assert stacked_prosody_f1(gold, gold) == (1.0, 1.0, 1.0)

    def test_hand_case(self):
        pw, pp, ip = stacked_prosody_f1([0, 1, 2, 3], [0, 1, 1, 3])
        assert pw == 1.0
        assert pp == pytest.approx(2 / 3)
        assert ip == 1.0

    def test_all_zero_prediction(self):
        pw, pp, ip = stacked_prosody_f1([1, 2, 3], [0, 0, 0])
        assert (pw, pp, ip) == (0.0, 0.0, 0.0)

    def test_positives_nest_across_levels(self):
        import random

        rng = random.Random(0)
        for _ in range(50):
            gold = [rng.randint(0, 3) for _ in range(10)]
            pred = [rng.randint(0, 3) for _ in range(10)]
            c = stacked_prosody_counts(gold, pred)
            gold_pos = {k: c[k].tp + c[k].fn for k in c}
            pred_pos = {k: c[k].tp + c[k].fp for k in c}
            assert gold_pos["ip"] <= gold_pos["pp"] <= gold_pos["pw"]
            assert pred_pos["ip"] <= pred_pos["pp"] <= pred_pos["pw"]

    def test_vacuous_level_counts_as_agreement(self):
        assert stacked_prosody_f1([0, 0, 1], [0, 0, 1]) == (1.0, 1.0, 1.0)


class TestMicroAveraging:
    def test_merging_counts_reproduces_combined_metric(self):
        a, b = RunCounts(), RunCounts()
        a.g2p_correct, a.g2p_total = 3, 4
        b.g2p_correct, b.g2p_total = 5, 10
        a.prosody["pw"] = LevelCounts(tp=2, fp=1, fn=0)
        b.prosody["pw"] = LevelCounts(tp=4, fp=0, fn=3)
        combined = RunCounts()
        combined.merge(a)
        combined.merge(b)
        rep = combined.to_report()
        assert rep.g2p_acc == pytest.approx(8 / 14)
        assert rep.pw_f1 == pytest.approx(2 * 6 / (2 * 6 + 1 + 3))


class GoldEchoModel:
    """Decode-protocol mock that emits each utterance's gold labels and
    stops exactly at the end; optionally stops ``cut`` steps early."""

    def __init__(self, vocabs, utts, cut=0):
        self.vocabs = vocabs
        self.cut = cut
        self.by_key = {}
        for u in utts:
            key = tuple(vocabs.char.encode(u.chars))
            self.by_key[key] = (
                vocabs.phoneme.encode(u.phonemes),
                vocabs.tone.encode(str(t) for t in u.tones),
                vocabs.prosody.encode(str(p) for p in u.prosody),
            )

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
        self.keys = [
            tuple(ids[m].tolist()) for ids, m in zip(char_ids, mask)
        ]
        return EncoderOutput(memory=torch.zeros(*char_ids.shape, 2), mask=mask)

    def initial_decoder_state(self, batch, dtype, device):
        return DecoderState(
            h=torch.zeros(batch, 1), c=torch.zeros(batch, 1),
            means=torch.zeros(batch, 1), context=torch.zeros(batch, 2), kv=[], step=0,
        )

    def decoder_step(self, prev_labels, state, encoder):
        batch = encoder.mask.shape[0]
        t = state.step
        outs = []
        for fam in ("phoneme", "tone", "prosody"):
            outs.append(torch.full((batch, len(getattr(self.vocabs, fam))), -10.0))
        stop = torch.full((batch,), -50.0)
        for b, key in enumerate(self.keys):
            ph, tn, pr = self.by_key[key]
            n = len(ph) - self.cut
            if t < len(ph):
                outs[0][b, ph[t]] = 10.0
                outs[1][b, tn[t]] = 10.0
                outs[2][b, pr[t]] = 10.0
            if t + 1 >= n:
                stop[b] = 50.0
        out = DecoderStepOutput(
            phoneme_logits=outs[0], tone_logits=outs[1], prosody_logits=outs[2],
            stop_logit=stop,
            attention_weights=torch.ones(batch, encoder.mask.shape[1]),
        )
        new = DecoderState(
            h=state.h, c=state.c, means=state.means + 1, context=state.context,
            kv=[], step=t + 1,
        )
        return out, new

    def postnet_refine(self, streams, mask=None):
        return streams


class TestEvaluateRun:
    def test_oracle_model_scores_all_ones(self, vocabs, lexicon, corpus20):
        model = GoldEchoModel(vocabs, corpus20)
        rep = evaluate_run(model, corpus20, lexicon, DecodeOptions(mode="ar"))
        assert rep.g2p_acc == 1.0
        assert (rep.pw_f1, rep.pp_f1, rep.ip_f1) == (1.0, 1.0, 1.0)
        assert rep.counts["g2p"]["total"] == sum(
            sum(u.polyphone_mask) for u in corpus20
        )

    def test_early_stop_counts_tail_as_errors(self, vocabs, lexicon, corpus20):
        full = evaluate_run(
            GoldEchoModel(vocabs, corpus20), corpus20, lexicon, DecodeOptions(mode="ar")
        )
        cut = evaluate_run(
            GoldEchoModel(vocabs, corpus20, cut=2), corpus20, lexicon, DecodeOptions(mode="ar")
        )
        assert cut.ip_f1 < full.ip_f1  # final IP labels go missing
        assert cut.counts["g2p"]["total"] == full.counts["g2p"]["total"]

    def test_deterministic_rerun(self, model, lexicon, corpus20):
        a = evaluate_run(model, corpus20[:6], lexicon, DecodeOptions())
        b = evaluate_run(model, corpus20[:6], lexicon, DecodeOptions())
        assert a == b

    def test_empty_corpus_rejected(self, model, lexicon):
        with pytest.raises(ValueError):
            evaluate_run(model, [], lexicon, DecodeOptions())


class TestEvaluateTagger:
    def test_trained_free_tagger_reports_counts(self, vocabs, lexicon, corpus20):
        from unifront.aux_model import AuxConfig, AuxModel
        from unifront.synthetic import generate_embeddings

        torch.manual_seed(0)
        aux = AuxModel(
            AuxConfig(variant="dcnn", dcnn_filters=8, dropout=0.0),
            embed_dim=8, n_cws=4, n_pos=8,
        )
        matrix = generate_embeddings(lexicon, 8, seed=2).matrix_for(vocabs.char)
        rep = evaluate_tagger(aux, corpus20, vocabs, matrix)
        assert rep.cws_block_f1 is not None and 0.0 <= rep.cws_block_f1 <= 1.0
        assert rep.pos_acc is not None and 0.0 <= rep.pos_acc <= 1.0
        assert rep.counts["pos"]["total"] == sum(len(u) for u in corpus20)


class TestReportTable:
    def test_two_mode_table_layout(self):
        from unifront.evaluation import MetricsReport

        rows = {
            "AR": MetricsReport(g2p_acc=0.9338, pw_f1=0.9423, pp_f1=0.7699, ip_f1=0.9334),
            "SAR": MetricsReport(g2p_acc=0.9656, pw_f1=0.9517, pp_f1=0.7745, ip_f1=0.9457),
        }
        table = format_report_table(rows)
        lines = table.splitlines()
        assert lines[0].split() == ["Settings", "G2P", "acc(%)", "PW", "PP", "IP"]
        assert lines[2].startswith("AR")
        assert lines[3].startswith("SAR")
        assert "96.56" in lines[3] and "0.9457" in lines[3]

    def test_missing_metrics_render_as_dash(self):
        from unifront.evaluation import MetricsReport

        table = format_report_table({"X": MetricsReport()})
        assert "-" in table.splitlines()[2]
