import numpy as np
import pytest

from freqgate import autodiff as ad
from freqgate.audio import N_BINS, Waveform, read_wav
from freqgate.config import ConfigError
from freqgate.data import (
    NormStats,
    build_manifest,
    featurize,
    load_samples,
    mix_record,
    stack_batch,
    stats_from_features,
    write_manifest,
    write_stats,
)
from freqgate.model import ArchitectureConfig, build, load_checkpoint
from freqgate.synth import synth_corpus
from freqgate.train import (
    Adam,
    NonFiniteLossError,
    TrainConfig,
    TrainLog,
    enhance,
    enhance_file,
    evaluate,
    evaluate_checkpoint,
    gate_lr_scale,
    stats_from_extras,
    summarize,
    train,
    train_step,
)


@pytest.fixture(scope="module")
def setup(tmp_path_factory):
    root = tmp_path_factory.mktemp("train")
    layout = synth_corpus(root, seed=4, speakers=(2, 1, 1), utterances=3, duration=2.0, noise_duration=4.0)
    records = build_manifest(layout.speech_dir, layout.noise_dir, (0,), seed=0)
    write_manifest(root / "manifest.tsv", records)
    featurize(records, root / "feat")
    train_recs = [r for r in records if r.split == "train"]
    stats = stats_from_features(root / "feat", train_recs)
    samples = load_samples(root / "feat", train_recs, stats)
    return root, records, stats, samples


def config(tmp_path, **kw):
    kw.setdefault("rho", 2)
    kw.setdefault("batch_size", 8)
    kw.setdefault("epochs", 1)
    kw.setdefault("lr", 1e-3)
    kw.setdefault("validate", False)
    return TrainConfig(checkpoint_dir=str(tmp_path / "ck"), **kw)


def run(tmp_path, setup, **kw):
    _, _, stats, samples = setup
    return train(config(tmp_path, **kw), samples=samples, stats=stats, valid_records=[])


def params_of(model):
    return {k: v.data.copy() for k, v in model.params.items()}


class TestConfig:
    def test_from_mapping(self):
        cfg = TrainConfig.from_mapping({"rho": "6", "lam": "1/3", "validate": "no"}, env={})
        assert cfg.rho == 6 and cfg.lam == pytest.approx(1 / 3) and cfg.validate is False

    def test_seed_env_wins(self):
        cfg = TrainConfig.from_mapping({"seed": "3"}, env={"GSE_SEED": "11"})
        assert cfg.seed == 11

    def test_rejects(self):
        with pytest.raises(ConfigError, match="unknown"):
            TrainConfig.from_mapping({"learning_rate": "1"}, env={})
        with pytest.raises(ConfigError):
            TrainConfig(gating="spatial")
        with pytest.raises(ConfigError):
            TrainConfig(batch_size=0)
        with pytest.raises(ConfigError):
            TrainConfig(lr=-1.0)

    def test_loss_kwargs(self):
        assert TrainConfig(loss="mse").loss_kwargs() == {"kind": "mse"}
        assert TrainConfig(lam=0.5).loss_kwargs()["lam"] == 0.5


class TestAdam:
    def test_first_step_is_signed_lr(self):
        # with bias correction the first update is lr * g / |g|
        p = ad.Tensor(np.array([1.0, -2.0, 0.5]), requires_grad=True)
        p.grad = np.array([3.0, -0.01, 0.0])
        Adam(lr=0.1, eps=1e-12).step({"p": p})
        np.testing.assert_allclose(p.data, [0.9, -1.9, 0.5], atol=1e-9)

    def test_matches_reference_recursion(self):
        rng = np.random.default_rng(0)
        p = ad.Tensor(rng.normal(size=4), requires_grad=True)
        x, m, v = p.data.copy(), 0.0, 0.0
        opt = Adam(lr=0.01)
        for t in range(1, 6):
            g = rng.normal(size=4)
            p.grad = g
            opt.step({"p": p})
            m = 0.9 * m + 0.1 * g
            v = 0.999 * v + 0.001 * g * g
            x = x - 0.01 * (m / (1 - 0.9**t)) / (np.sqrt(v / (1 - 0.999**t)) + 1e-8)
        np.testing.assert_allclose(p.data, x, rtol=1e-12)

    def test_state_roundtrip(self):
        p = ad.Tensor(np.ones(2), requires_grad=True)
        p.grad = np.ones(2)
        a = Adam(lr=0.1)
        a.step({"p": p})
        b = Adam(lr=0.1)
        b.load_arrays(a.state_arrays(), a.t)
        assert b.t == 1
        np.testing.assert_array_equal(b.m["p"], a.m["p"])
        np.testing.assert_array_equal(b.v["p"], a.v["p"])

    def test_lr_scale(self):
        p = ad.Tensor(np.ones(2), requires_grad=True)
        q = ad.Tensor(np.ones(2), requires_grad=True)
        p.grad = q.grad = np.ones(2)
        Adam(lr=0.1, eps=1e-12, lr_scale={"q": 0.25}).step({"p": p, "q": q})
        np.testing.assert_allclose(p.data, 0.9, atol=1e-12)
        np.testing.assert_allclose(q.data, 0.975, atol=1e-12)

    def test_gate_lr_scale(self):
        local = build(ArchitectureConfig(rho=2, gating="local"), 0)
        assert gate_lr_scale(local) == pytest.approx({"gate.kernel": 1 / np.sqrt(3 * N_BINS)})
        temporal = build(ArchitectureConfig(rho=2, gating="temporal", temporal_hidden=4), 0)
        assert gate_lr_scale(temporal) == pytest.approx({"gate.lstm.w_x": 1 / np.sqrt(N_BINS)})
        assert gate_lr_scale(build(ArchitectureConfig(rho=2, gating="freq_wise"), 0)) == {}


class TestTrainStep:
    def test_zero_lr_keeps_parameters(self, setup):
        _, _, stats, samples = setup
        model = build(TrainConfig(rho=2).architecture(), 0)
        before = params_of(model)
        result = train_step(model, stack_batch(samples[:4]), Adam(lr=0.0), TrainConfig(rho=2), stats)
        assert np.isfinite(result.total)
        for name, value in params_of(model).items():
            np.testing.assert_array_equal(value, before[name])

    def test_overfits_one_batch(self, setup):
        _, _, stats, samples = setup
        cfg = TrainConfig(rho=2, lr=3e-3)
        model = build(cfg.architecture(), 0)
        opt = Adam(lr=cfg.lr)
        batch = stack_batch(samples[:2])
        losses = [train_step(model, batch, opt, cfg, stats).total for _ in range(200)]
        assert losses[-1] < losses[0] - 0.5
        assert losses[-1] < -0.5

    def test_non_finite(self, setup):
        _, _, stats, samples = setup
        noisy, clean = stack_batch(samples[:2])
        noisy = noisy.copy()
        noisy[1, 0, 5, 5] = np.nan
        model = build(TrainConfig(rho=2).architecture(), 0)
        with pytest.raises(NonFiniteLossError, match="b@20"):
            train_step(model, (noisy, clean), Adam(), TrainConfig(rho=2), stats, ["a@0", "b@20"])

    def test_empty_batch(self, setup):
        stats = setup[2]
        model = build(TrainConfig(rho=2).architecture(), 0)
        empty = (np.zeros((0, 1, N_BINS, 40)), np.zeros((0, N_BINS, 40)))
        with pytest.raises(ValueError):
            train_step(model, empty, Adam(), TrainConfig(rho=2), stats)


class TestTrainLoop:
    def test_outputs(self, tmp_path, setup):
        res = run(tmp_path, setup, gating="freq_wise", epochs=2)
        n_steps = 2 * int(np.ceil(res.n_samples / 8))
        assert len(res.log.rows) == n_steps
        assert [p.name for p in res.checkpoints] == ["epoch_000.gsec", "epoch_001.gsec", "epoch_002.gsec"]
        back = TrainLog.read(tmp_path / "ck" / "train_log.csv")
        np.testing.assert_allclose(back.losses(), res.log.losses(), rtol=1e-15)
        _, extras, state = load_checkpoint(res.checkpoints[-1])
        assert state["epoch"] == 2 and state["step"] == n_steps
        np.testing.assert_array_equal(stats_from_extras(extras).mean, setup[2].mean)

    def test_deterministic(self, tmp_path, setup):
        a = run(tmp_path / "a", setup, gating="local")
        b = run(tmp_path / "b", setup, gating="local")
        for name, value in params_of(a.model).items():
            np.testing.assert_array_equal(value, b.model.params[name].data)

    def test_seed_changes_run(self, tmp_path, setup):
        a = run(tmp_path / "a", setup, seed=0)
        b = run(tmp_path / "b", setup, seed=1)
        assert not np.array_equal(a.model.params["e1.kernel"].data, b.model.params["e1.kernel"].data)

    def test_resume_matches_straight_run(self, tmp_path, setup):
        straight = run(tmp_path / "s", setup, epochs=2)
        first = run(tmp_path / "r", setup, epochs=1)
        resumed = run(tmp_path / "r", setup, epochs=2, resume=str(first.checkpoints[-1]))
        for name, value in params_of(straight.model).items():
            np.testing.assert_array_equal(value, resumed.model.params[name].data)
        for name, value in straight.model.buffers.items():
            np.testing.assert_array_equal(value, resumed.model.buffers[name])
        np.testing.assert_array_equal(resumed.log.losses(), straight.log.losses())

    def test_zero_epochs(self, tmp_path, setup):
        res = run(tmp_path, setup, epochs=0)
        assert [p.name for p in res.checkpoints] == ["epoch_000.gsec"]
        assert res.log.rows == []

    def test_validation_and_best(self, tmp_path, setup):
        root, records, stats, samples = setup
        valid = [r for r in records if r.split == "valid"]
        cfg = config(tmp_path, validate=True)
        res = train(cfg, samples=samples, stats=stats, valid_records=valid)
        assert np.isfinite(res.log.rows[-1]["valid_estoi"])
        assert res.best is not None and res.best.exists()

    def test_from_manifest(self, tmp_path, setup):
        root = setup[0]
        write_stats(tmp_path / "s.gsen", setup[2])
        cfg = config(
            tmp_path,
            manifest=str(root / "manifest.tsv"),
            stats=str(tmp_path / "s.gsen"),
            features=str(root / "feat"),
            epochs=1,
        )
        assert train(cfg).n_samples == len(setup[3])


class TestEnhance:
    def test_length_and_peak(self, setup):
        stats = setup[2]
        model = build(TrainConfig(rho=2).architecture(), 0)
        for n in (1024, 5000, 8191):
            x = Waveform(0.5 * np.random.default_rng(n).uniform(-1, 1, n))
            y = enhance(model, stats, x)
            assert len(y) == n
            assert np.max(np.abs(y.samples)) <= 0.999 + 1e-12

    def test_too_short(self, setup):
        model = build(TrainConfig(rho=2).architecture(), 0)
        with pytest.raises(ValueError):
            enhance(model, setup[2], Waveform(np.zeros(600)))

    def test_file_and_checkpoint_eval(self, tmp_path, setup):
        root, records, _, _ = setup
        res = run(tmp_path, setup)
        test = [r for r in records if r.split == "test"]
        out = enhance_file(res.checkpoints[-1], test[0].speech_path, tmp_path / "e.wav")
        assert len(read_wav(tmp_path / "e.wav")) == len(out)
        ev = evaluate_checkpoint(
            res.checkpoints[-1], root / "manifest.tsv", tmp_path / "s.csv", per_utterance_csv=tmp_path / "u.csv"
        )
        assert len(ev.utterances) == len(test)
        assert (tmp_path / "u.csv").read_text().count("\n") == len(test) + 1


class TestEvaluate:
    def test_identity_enhancer(self, setup, tmp_path):
        records = [r for r in setup[1] if r.split != "train"]
        ev = evaluate(lambda w: w, records, tmp_path / "s.csv")
        assert len(ev.utterances) == len(records)
        for u in ev.utterances:
            assert u["estoi_enhanced"] == u["estoi_noisy"]
        assert sum(row["n"] for row in ev.summary) == len(records)

    def test_recomputed_from_audio(self, setup):
        # an enhancer that returns clean speech scores 1
        rec = [r for r in setup[1] if r.split == "test"][0]
        clean = mix_record(rec).speech
        ev = evaluate(lambda w: clean, [rec])
        assert ev.utterances[0]["estoi_enhanced"] == pytest.approx(1.0, abs=1e-9)

    def test_missing_audio(self, setup, tmp_path):
        rec = setup[1][0]
        gone = type(rec)(rec.utt_id, str(tmp_path / "absent.wav"), rec.noise_path, 0.0, "test")
        ev = evaluate(lambda w: w, [gone])
        assert ev.utterances == [] and ev.missing[0][0] == rec.utt_id

    def test_summarize_groups(self):
        rows = summarize(
            [
                {"noise": "hiss", "snr_db": 0.0, "estoi_noisy": 0.2, "estoi_enhanced": 0.4},
                {"noise": "hiss", "snr_db": 0.0, "estoi_noisy": 0.4, "estoi_enhanced": 0.6},
                {"noise": "hum", "snr_db": 5.0, "estoi_noisy": 0.5, "estoi_enhanced": 0.5},
            ]
        )
        assert [(r["noise"], r["n"]) for r in rows] == [("hiss", 2), ("hum", 1)]
        assert rows[0]["estoi_enhanced"] == pytest.approx(0.5)

    def test_stats_required(self):
        with pytest.raises(ValueError):
            stats_from_extras({})
        assert isinstance(stats_from_extras({"stats.mean": np.zeros(3), "stats.std": np.ones(3)}), NormStats)
