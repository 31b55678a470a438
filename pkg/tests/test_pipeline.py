import csv
import json

import numpy as np
import pytest
import torch

from flowtts import acoustic, cli, data, dpo, pipeline
from flowtts.acoustic import CFGParams, SolverConfig
from flowtts.duration import DurationPrompt, SamplingParams


def make_request(corpus, durations=None, seed=0, alpha=2.0, steps=8):
    u = corpus.utterances[0]
    prompt = DurationPrompt(list(u.phonemes), list(u.durations), u.mel)
    target = list(corpus.utterances[1].phonemes)
    return pipeline.SynthesisRequest(
        target_phonemes=target, prompt=prompt, speaker_ref_mel=u.mel,
        explicit_durations=durations if durations is None else list(durations),
        seed=seed, cfg=CFGParams(alpha=alpha), solver=SolverConfig(steps=steps))


class TestSynthesize:
    def test_explicit_durations_shape(self, tiny_corpus, tiny_system):
        target = tiny_corpus.utterances[1].phonemes
        durations = [2] * len(target)
        req = make_request(tiny_corpus, durations=durations)
        mel, durs, wav = pipeline.synthesize(tiny_system, None, req)
        assert mel.shape == (sum(durations), tiny_system.cfg.n_mels)
        assert durs == durations
        assert wav is None
        assert np.isfinite(mel).all()

    def test_seed_determinism(self, tiny_corpus, tiny_system, tiny_duration_model):
        req = make_request(tiny_corpus, seed=7)
        a, da, _ = pipeline.synthesize(tiny_system, tiny_duration_model, req)
        b, db, _ = pipeline.synthesize(tiny_system, tiny_duration_model, req)
        assert da == db
        assert (a == b).all()

    def test_sampled_durations_consistent_with_mel(self, tiny_corpus, tiny_system,
                                                   tiny_duration_model):
        req = make_request(tiny_corpus, seed=3)
        mel, durs, _ = pipeline.synthesize(tiny_system, tiny_duration_model, req)
        assert mel.shape[0] == sum(durs)
        assert all(1 <= d <= 99 for d in durs)

    def test_mismatched_explicit_durations(self, tiny_corpus, tiny_system):
        req = make_request(tiny_corpus, durations=[2, 2])
        with pytest.raises(ValueError):
            pipeline.synthesize(tiny_system, None, req)

    def test_missing_duration_model(self, tiny_corpus, tiny_system):
        req = make_request(tiny_corpus)
        with pytest.raises(ValueError, match="duration"):
            pipeline.synthesize(tiny_system, None, req)

    def test_alpha_zero_single_branch_matches_guided(self, tiny_corpus, tiny_system):
        # alpha=0 shortcut must agree with explicit guidance at alpha=0
        target = tiny_corpus.utterances[1].phonemes
        durations = [2] * len(target)
        a, _, _ = pipeline.synthesize(
            tiny_system, None, make_request(tiny_corpus, durations, alpha=0.0))
        b, _, _ = pipeline.synthesize(
            tiny_system, None, make_request(tiny_corpus, durations, alpha=1e-12))
        assert np.allclose(a, b, atol=1e-5)

    def test_vocoder_invoked(self, tiny_corpus, tiny_system):
        target = tiny_corpus.utterances[1].phonemes
        durations = [2] * len(target)
        calls = []

        def fake(mel):
            calls.append(mel.shape)
            return np.zeros(100, dtype=np.float64)

        voc = pipeline.VocoderPlugin(name="fake", transform=fake)
        req = make_request(tiny_corpus, durations)
        _, _, wav = pipeline.synthesize(tiny_system, None, req, vocoder=voc)
        assert wav is not None and calls == [(sum(durations), 80)]


class TestDurationControl:
    def test_identity(self):
        assert pipeline.duration_control([3, 5, 7], 1.0) == [3, 5, 7]

    def test_half_up_rounding(self):
        assert pipeline.duration_control([1, 3, 5], 1.5) == [2, 5, 8]
        assert pipeline.duration_control([2], 1.25) == [3]  # 2.5 rounds up

    def test_clamping(self):
        assert pipeline.duration_control([80], 2.0) == [99]
        assert pipeline.duration_control([3], 0.01) == [1]

    def test_subset_indices(self):
        assert pipeline.duration_control([4, 4, 4], 2.0, indices=[1]) == [4, 8, 4]

    def test_bad_inputs(self):
        with pytest.raises(ValueError):
            pipeline.duration_control([4], 0.0)
        with pytest.raises(ValueError):
            pipeline.duration_control([4], 1.5, indices=[3])


class TestMetrics:
    def test_exact(self):
        m = pipeline.eval_duration_metrics([2, 3], [2, 3])
        assert m == {"exact_match": 1.0, "mean_abs_dur_err": 0.0,
                     "total_len_err": 0.0}

    def test_hand_computed(self):
        m = pipeline.eval_duration_metrics([2, 6], [4, 4])
        assert m["exact_match"] == 0.0
        assert m["mean_abs_dur_err"] == 2.0
        assert m["total_len_err"] == 0.0  # totals equal

    def test_total_len_err(self):
        m = pipeline.eval_duration_metrics([5, 5], [4, 4])
        assert m["total_len_err"] == pytest.approx(2 / 8)

    def test_length_mismatch(self):
        with pytest.raises(ValueError):
            pipeline.eval_duration_metrics([1], [1, 2])


class TestSpeakerCosine:
    def test_self_similarity_is_one(self, tiny_corpus, tiny_system):
        mel = tiny_corpus.utterances[0].mel
        assert pipeline.speaker_cosine(tiny_system, mel, mel) == pytest.approx(1.0, abs=1e-5)

    def test_range(self, tiny_corpus, tiny_system):
        a = tiny_corpus.utterances[0].mel
        b = tiny_corpus.utterances[1].mel
        c = pipeline.speaker_cosine(tiny_system, a, b)
        assert -1.0 - 1e-5 <= c <= 1.0 + 1e-5


class TestGriffinLim:
    def test_produces_finite_waveform(self, tiny_corpus):
        mel_cfg = data.MelConfig(stats=tiny_corpus.stats)
        voc = pipeline.griffin_lim_vocoder(mel_cfg, n_iter=4)
        mel = tiny_corpus.utterances[0].mel[:20]
        wav = voc.transform(mel)
        assert wav.shape == (20 * mel_cfg.hop,)
        assert np.isfinite(wav).all()
        assert np.abs(wav).max() <= 1.0 + 1e-9


class TestSweep:
    def test_report_schema_and_control_row(self, tiny_corpus, tiny_duration_model,
                                           rng, tmp_path):
        pairs = dpo.generate_pairs(tiny_corpus.utterances, tiny_duration_model, rng)
        assert pairs, "need at least one pair for the sweep"
        cfg = dpo.DPOConfig(beta=0.1, lr=1e-4, steps=2)
        csv_path = tmp_path / "sweep.csv"
        report = pipeline.style_transfer_sweep(
            [0, len(pairs)], pairs, tiny_duration_model,
            tiny_corpus.utterances[:2], tiny_corpus.utterances[2:], cfg,
            seeds=(0,), csv_path=csv_path)
        assert [r["pair_count"] for r in report] == [0, len(pairs)]
        for r in report:
            assert set(r) == set(pipeline.SWEEP_COLUMNS)
        with open(csv_path) as f:
            rows = list(csv.DictReader(f))
        assert [int(r["pair_count"]) for r in rows] == [0, len(pairs)]
        assert list(rows[0].keys()) == pipeline.SWEEP_COLUMNS

    def test_insufficient_pairs(self, tiny_corpus, tiny_duration_model, rng):
        pairs = dpo.generate_pairs(tiny_corpus.utterances, tiny_duration_model, rng)
        with pytest.raises(ValueError, match="insufficient"):
            pipeline.style_transfer_sweep([len(pairs) + 1], pairs,
                                          tiny_duration_model,
                                          tiny_corpus.utterances[:2],
                                          tiny_corpus.utterances[2:],
                                          dpo.DPOConfig())


class TestCLI:
    @pytest.fixture
    def corpus_dir(self, tiny_corpus, tmp_path):
        d = tmp_path / "corpus"
        data.save_corpus(tiny_corpus, d)
        return d

    @pytest.fixture
    def acoustic_ckpt(self, tiny_corpus, tiny_system, tmp_path):
        cfg = tiny_system.cfg
        path = tmp_path / "acoustic.pt"
        acoustic.save_checkpoint(path, tiny_system, cfg, step=0)
        return path

    def test_prepare_data_synthetic(self, tmp_path, capsys):
        out = tmp_path / "synth"
        rc = cli.main(["prepare-data", "--synthetic", "--out", str(out)])
        assert rc == 0
        corpus = data.load_corpus(out)
        assert len(corpus.utterances) == 8

    def test_synth_explicit_durations(self, corpus_dir, acoustic_ckpt, tmp_path,
                                      capsys):
        out = tmp_path / "out.mel"
        rc = cli.main(["synth", "--corpus", str(corpus_dir),
                       "--acoustic-ckpt", str(acoustic_ckpt),
                       "--durations", "2,1,3", "--phonemes", "p0,p1,p2",
                       "--ode-steps", "4", "--out", str(out)])
        assert rc == 0
        mel = data.load_mel(out)
        assert mel.shape == (6, 80)

    def test_synth_without_durations_or_model_fails(self, corpus_dir, acoustic_ckpt,
                                                    tmp_path, capsys):
        rc = cli.main(["synth", "--corpus", str(corpus_dir),
                       "--acoustic-ckpt", str(acoustic_ckpt),
                       "--out", str(tmp_path / "o.mel")])
        assert rc == 2

    def test_unknown_flag_exits_2(self, capsys):
        rc = cli.main(["synth", "--bogus"])
        assert rc == 2

    def test_missing_file_exits_1(self, tmp_path, capsys):
        rc = cli.main(["train-acoustic", "--corpus", str(tmp_path / "nope"),
                       "--steps", "1", "--out", str(tmp_path / "x.pt")])
        assert rc == 1

    def test_eval_exact_match(self, tmp_path, capsys):
        pred = tmp_path / "pred.jsonl"
        ref = tmp_path / "ref.jsonl"
        rows = [{"id": "u0", "durations": [2, 3]}, {"id": "u1", "durations": [4]}]
        pred.write_text("\n".join(json.dumps(r) for r in rows))
        ref.write_text("\n".join(json.dumps(r) for r in rows))
        out = tmp_path / "metrics.json"
        rc = cli.main(["eval", "--pred", str(pred), "--ref", str(ref),
                       "--out", str(out)])
        assert rc == 0
        metrics = json.loads(out.read_text())
        assert metrics["exact_match"] == 1.0
        assert metrics["mean_abs_dur_err"] == 0.0
