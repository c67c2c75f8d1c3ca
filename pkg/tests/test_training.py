import json
import math

import numpy as np
import pytest

from conformerst.frontend import CorpusSpec, FeatureCache, synth_corpus
from conformerst.model import Model, ModelConfig, load_checkpoint, save_checkpoint
from conformerst.textproc import build_vocab
from conformerst.training import (
    AdamW,
    OptimizerConfig,
    StageConfig,
    average_checkpoints,
    clip_grad_norm,
    forgetting_probe,
    load_stage_config,
    make_batches,
    noam_lr,
    piecewise_noam_lr,
    sample_task,
    train_stage,
)


class TestNoam:
    def test_peak_value(self):
        assert abs(noam_lr(25_000, 2e-3, 25_000) - 2e-3) / 2e-3 <= 1e-12

    def test_linear_half(self):
        assert abs(noam_lr(12_500, 2e-3, 25_000) - 1e-3) / 1e-3 <= 1e-12

    def test_inverse_sqrt_tail(self):
        want = 2e-3 * math.sqrt(25_000 / 100_000)
        assert abs(noam_lr(100_000, 2e-3, 25_000) - want) / want <= 1e-12

    def test_shape(self):
        vals = [noam_lr(s, 2e-3, 100) for s in range(1, 401)]
        assert vals[:100] == sorted(vals[:100])
        assert vals[99:] == sorted(vals[99:], reverse=True)
        assert abs(vals[99] - 2e-3) <= 1e-15

    def test_bad_args(self):
        with pytest.raises(ValueError, match="warmup"):
            noam_lr(1, 2e-3, 0)
        with pytest.raises(ValueError, match="step"):
            noam_lr(0, 2e-3, 100)


class TestPiecewiseNoam:
    def test_reference_points(self):
        assert abs(piecewise_noam_lr(25_000) - 2e-5) / 2e-5 <= 1e-12
        assert abs(piecewise_noam_lr(50_000) - 2e-4) / 2e-4 <= 1e-12
        want = 2e-4 * math.sqrt(50_000 / 200_000)
        assert abs(piecewise_noam_lr(200_000) - want) / want <= 1e-12

    def test_continuity_at_knees(self):
        for knee in (25_000, 50_000):
            assert abs(piecewise_noam_lr(knee + 1) - piecewise_noam_lr(knee)) <= 1e-8


class TestAdamW:
    def test_first_step_hand_value(self):
        opt = AdamW(OptimizerConfig())
        params = {"w": np.array([1.0])}
        opt.step(params, {"w": np.array([1.0])}, lr=0.1)
        # theta' = 1*(1 - 0.1*0.001) - 0.1 * m_hat/(sqrt(v_hat)+eps), m_hat=v_hat=1
        want = 1.0 * (1 - 0.1 * 0.001) - 0.1 * (1.0 / (1.0 + 1e-8))
        assert abs(params["w"][0] - want) <= 1e-12

    def test_zero_grad_zero_decay_is_identity(self):
        opt = AdamW(OptimizerConfig(weight_decay=0.0))
        params = {"w": np.array([1.5, -2.0])}
        opt.step(params, {"w": np.zeros(2)}, lr=0.1)
        assert np.array_equal(params["w"], [1.5, -2.0])

    def test_nonfinite_grads_skip_without_state_damage(self):
        opt = AdamW()
        params = {"w": np.array([1.0])}
        opt.step(params, {"w": np.array([0.5])}, lr=0.01)
        snap = (params["w"].copy(), opt.m["w"].copy(), opt.v["w"].copy(), opt.t)
        applied = opt.step(params, {"w": np.array([np.nan])}, lr=0.01)
        assert not applied and opt.skipped == 1
        assert np.array_equal(params["w"], snap[0])
        assert np.array_equal(opt.m["w"], snap[1])
        assert np.array_equal(opt.v["w"], snap[2])
        assert opt.t == snap[3]

    def test_deterministic(self):
        runs = []
        for _ in range(2):
            opt = AdamW()
            params = {"w": np.linspace(-1, 1, 5)}
            rng = np.random.default_rng(0)
            for _ in range(10):
                opt.step(params, {"w": rng.standard_normal(5)}, lr=0.01)
            runs.append(params["w"])
        assert np.array_equal(runs[0], runs[1])


class TestClip:
    def test_scales_large_norm(self):
        g = {"a": np.array([12.0]), "b": np.array([16.0])}  # norm 20
        norm = clip_grad_norm(g, 10.0)
        assert norm == pytest.approx(20.0)
        new = math.sqrt(sum(float((x * x).sum()) for x in g.values()))
        assert new == pytest.approx(10.0)

    def test_small_norm_unchanged(self):
        g = {"a": np.array([3.0, 4.0])}  # norm 5
        assert clip_grad_norm(g, 10.0) == pytest.approx(5.0)
        assert np.array_equal(g["a"], [3.0, 4.0])

    def test_zero_grads(self):
        g = {"a": np.zeros(3)}
        assert clip_grad_norm(g, 10.0) == 0.0
        assert np.array_equal(g["a"], np.zeros(3))


class TestSampleTask:
    def test_extremes(self):
        rng = np.random.default_rng(0)
        assert all(sample_task(rng, 1.0) == "ASR" for _ in range(50))
        assert all(sample_task(rng, 0.0) == "ST" for _ in range(50))

    def test_balanced_fraction(self):
        rng = np.random.default_rng(7)
        frac = sum(sample_task(rng, 0.5) == "ASR" for _ in range(10_000)) / 10_000
        assert 0.48 <= frac <= 0.52


class TestStageConfig:
    def test_constant_schedule_requires_stage_two(self):
        with pytest.raises(ValueError, match="constant"):
            StageConfig(stage="ASR-pretrain", schedule="constant")
        with pytest.raises(ValueError, match="constant"):
            StageConfig(stage="ASR+ST", schedule="noam")
        StageConfig(stage="ASR+ST", schedule="constant")  # valid

    def test_unknown_key_rejected(self, tmp_path):
        p = tmp_path / "cfg.json"
        p.write_text(json.dumps({"stage": "ASR-pretrain", "momentum": 0.9}))
        with pytest.raises(ValueError, match="momentum"):
            load_stage_config(p)

    def test_roundtrip(self, tmp_path):
        p = tmp_path / "cfg.json"
        p.write_text(json.dumps({"stage": "ASR+ST", "schedule": "constant",
                                 "lr_const": 1e-4, "max_steps": 10}))
        cfg = load_stage_config(p)
        assert cfg.lr_at(1) == 1e-4 and cfg.max_steps == 10


def tiny_model(vocab, seed=0, dropout=0.1):
    cfg = ModelConfig(vocab_size=len(vocab), enc_layers=2, dec_layers=1,
                      d_model=16, heads=2, d_ffn=32, conv_kernel=3, dropout=dropout)
    return Model(cfg, seed=seed)


@pytest.fixture(scope="module")
def corpus(tmp_path_factory):
    root = tmp_path_factory.mktemp("corpus")
    spec = CorpusSpec(num_utts=6, min_tokens=3, max_tokens=3, seed=11)
    entries, _ = synth_corpus(spec, root)
    texts = [e.transcript for e in entries] + [e.translation for e in entries]
    return entries, build_vocab(texts)


class TestTrainStage:
    def test_checkpoints_and_metrics_schedule(self, corpus, tmp_path):
        entries, vocab = corpus
        model = tiny_model(vocab)
        cfg = StageConfig(max_steps=4, checkpoint_interval=2, batch_tokens=40, seed=1)
        final, metrics = train_stage(entries, model, vocab, cfg, tmp_path)
        assert (tmp_path / "ckpt_000002.ckpt").exists()
        assert (tmp_path / "ckpt_000004.ckpt").exists()
        assert final.endswith("ckpt_000004.ckpt")
        lines = [json.loads(l) for l in open(metrics)]
        assert [l["step"] for l in lines] == [1, 2, 3, 4]
        for key in ("lr", "ce", "ctc_src", "ctc_tgt", "total", "grad_norm", "wall_ms"):
            assert key in lines[0]

    def test_zero_steps_emits_initial_checkpoint(self, corpus, tmp_path):
        entries, vocab = corpus
        model = tiny_model(vocab)
        cfg = StageConfig(max_steps=0)
        final, metrics = train_stage(entries, model, vocab, cfg, tmp_path)
        assert final.endswith("ckpt_000000.ckpt")
        assert open(metrics).read() == ""

    def test_empty_manifest_rejected(self, corpus, tmp_path):
        _, vocab = corpus
        with pytest.raises(ValueError, match="empty"):
            train_stage([], tiny_model(vocab), vocab, StageConfig(max_steps=1), tmp_path)

    def test_accumulation_equivalence(self, corpus, tmp_path):
        entries, vocab = corpus
        # every utterance has 3 two-char words -> identical token budgets,
        # so budget B holds exactly one utterance and 2B exactly two
        per_utt = len(entries[0].transcript) + 3
        results = []
        for accum, budget in ((1, 2 * per_utt), (2, per_utt)):
            model = tiny_model(vocab, seed=3)
            cfg = StageConfig(max_steps=3, batch_tokens=budget, accum=accum,
                              checkpoint_interval=100, shuffle=False, seed=5)
            train_stage(entries, model, vocab, cfg, tmp_path / f"acc{accum}")
            results.append({n: p.data.copy() for n, p in model.params.items()})
        for name in results[0]:
            diff = np.abs(results[0][name] - results[1][name]).max()
            assert diff <= 1e-6, name

    def test_batches_respect_budget(self, corpus):
        entries, _ = corpus
        cache = FeatureCache()
        per_utt = len(entries[0].transcript) + 3
        batches = make_batches(entries, 2 * per_utt, cache)
        assert all(len(b) == 2 for b in batches)
        assert sorted(i for b in batches for i in b) == list(range(len(entries)))


class TestAveraging:
    def make_ckpts(self, tmp_path, k, seed=0):
        vocab_size = 12
        cfg = ModelConfig(vocab_size=vocab_size, enc_layers=2, dec_layers=1,
                          d_model=16, heads=2, d_ffn=32, conv_kernel=3)
        base = Model(cfg, seed=1).state_arrays()
        rng = np.random.default_rng(seed)
        paths = []
        for i in range(k):
            arrays = {n: (a + rng.standard_normal(a.shape).astype(a.dtype) * 0.01)
                      for n, a in base.items()}
            p = tmp_path / f"c{i}.ckpt"
            save_checkpoint(p, arrays, cfg, step=1000 * (i + 1), stage="ASR-pretrain")
            paths.append(p)
        return paths, cfg

    def test_identity_on_identical(self, tmp_path):
        paths, _ = self.make_ckpts(tmp_path, 1)
        paths = paths * 3
        mean, _, step, _ = average_checkpoints(paths)
        ref, *_ = load_checkpoint(paths[0])
        for n in ref:
            assert np.array_equal(mean[n], ref[n]), n

    def test_two_point_mean(self, tmp_path):
        paths, cfg = self.make_ckpts(tmp_path, 2)
        a0, *_ = load_checkpoint(paths[0])
        a1, *_ = load_checkpoint(paths[1])
        name = next(iter(a0))
        a0[name][:] = 0.0
        a1[name][:] = 2.0
        save_checkpoint(paths[0], a0, cfg, 1000, "ASR-pretrain")
        save_checkpoint(paths[1], a1, cfg, 2000, "ASR-pretrain")
        mean, _, step, _ = average_checkpoints(paths)
        assert np.all(mean[name] == 1.0)
        assert step == 2000

    def test_matches_wide_accumulator_mean(self, tmp_path):
        paths, _ = self.make_ckpts(tmp_path, 25, seed=2)
        mean, *_ = average_checkpoints(paths)
        loaded = [load_checkpoint(p)[0] for p in paths]
        for n in mean:
            want = np.mean(np.stack([a[n].astype(np.float64) for a in loaded]), axis=0)
            assert np.array_equal(mean[n], want.astype(mean[n].dtype)), n

    def test_mismatched_names_rejected(self, tmp_path):
        paths, cfg = self.make_ckpts(tmp_path, 2)
        arrays, *_ = load_checkpoint(paths[1])
        arrays["spurious.w"] = np.zeros(3, dtype=np.float32)
        save_checkpoint(paths[1], arrays, cfg, 2000, "ASR-pretrain")
        with pytest.raises(ValueError, match="spurious.w"):
            average_checkpoints(paths)


class TestForgettingProbe:
    def test_probe_structure(self, corpus, tmp_path):
        entries, vocab = corpus
        model = tiny_model(vocab, seed=4)
        ckpt = tmp_path / "pre.ckpt"
        save_checkpoint(ckpt, model.state_arrays(), model.config, 0, "ASR-pretrain")
        report = forgetting_probe(ckpt, entries, entries, vocab,
                                  lr_variants=[1e-4], p_asr_variants=[0.5],
                                  steps=2, out_dir=tmp_path / "probe",
                                  eval_interval=2, batch_tokens=40, seed=9)
        (run,) = report["runs"]
        assert run["steps"] == [0, 2]
        assert len(run["asr_ppl"]) == 2 and len(run["st_ppl"]) == 2
        assert all(p >= 1.0 for p in run["asr_ppl"] + run["st_ppl"])
        assert (tmp_path / "probe" / "probe_series.jsonl").exists()
        assert "asr_ppl_T" in report["table"]

    def test_empty_validation_rejected(self, corpus, tmp_path):
        entries, vocab = corpus
        model = tiny_model(vocab)
        ckpt = tmp_path / "pre.ckpt"
        save_checkpoint(ckpt, model.state_arrays(), model.config, 0, "ASR-pretrain")
        with pytest.raises(ValueError, match="validation"):
            forgetting_probe(ckpt, entries, [], vocab, [1e-4], [0.5], 1, tmp_path / "p")
