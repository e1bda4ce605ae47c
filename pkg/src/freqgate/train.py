"""Training loop, Adam, checkpoints, enhancement and evaluation."""

from __future__ import annotations

import csv
import dataclasses
import os
import shutil
import time
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .audio import (
    FRAME_LEN,
    Waveform,
    denormalize_lps,
    istft,
    lps,
    normalize_lps,
    read_wav,
    stft,
    write_wav,
)
from .config import ConfigError, coerce
from .data import (
    PEAK_LIMIT,
    NormStats,
    load_samples,
    mix_record,
    read_manifest,
    read_stats,
    stack_batch,
)
from .loss import BIN_FLOOR, LAMBDA, MIN_ACTIVE, THETA, batch_loss
from .metrics import estoi
from .model import (
    GATINGS,
    ArchitectureConfig,
    build,
    forward,
    load_checkpoint,
    save_checkpoint,
)

SEED_ENV = "GSE_SEED"
LOSS_KINDS = ("e2stoi", "mse")


@dataclass
class TrainConfig:
    rho: int = 4
    gating: str = "none"
    lam: float = LAMBDA
    theta: float = THETA
    bin_floor: float = BIN_FLOOR
    min_active: int = MIN_ACTIVE
    loss: str = "e2stoi"
    lr: float = 1e-4
    batch_size: int = 16
    epochs: int = 2
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    temporal_hidden: int = 128
    temporal_map: str = "clamp"
    share_gates: bool = False
    freq_padding: str = "valid"
    lstm_dual_bias: bool = False
    gate_lr_scaling: bool = True
    manifest: str = ""
    stats: str = ""
    features: str = ""
    checkpoint_dir: str = "checkpoints"
    resume: str = ""
    validate: bool = True

    def __post_init__(self):
        if self.gating not in GATINGS:
            raise ConfigError(f"gating must be one of {GATINGS}, got {self.gating!r}")
        if self.loss not in LOSS_KINDS:
            raise ConfigError(f"loss must be one of {LOSS_KINDS}, got {self.loss!r}")
        for name in ("rho", "batch_size", "min_active", "temporal_hidden"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive")
        for name in ("lam", "theta", "bin_floor", "lr", "epochs"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be non-negative")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1) or self.adam_eps <= 0:
            raise ConfigError("Adam needs 0 <= beta < 1 and eps > 0")

    @classmethod
    def from_mapping(cls, values, env=None):
        """Build from string values (config file and flags); ``GSE_SEED`` wins."""
        kinds = {f.name: f.type for f in dataclasses.fields(cls)}
        kinds = {k: {"int": int, "float": float, "bool": bool}.get(v, str) for k, v in kinds.items()}
        unknown = sorted(set(values) - set(kinds))
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
        kwargs = {k: coerce(v, kinds[k], k) for k, v in values.items() if v is not None}
        env = os.environ if env is None else env
        if env.get(SEED_ENV):
            kwargs["seed"] = coerce(env[SEED_ENV], int, SEED_ENV)
        return cls(**kwargs)

    def architecture(self):
        return ArchitectureConfig(
            rho=self.rho,
            gating=self.gating,
            temporal_hidden=self.temporal_hidden,
            temporal_map=self.temporal_map,
            share_gates=self.share_gates,
            freq_padding=self.freq_padding,
            lstm_dual_bias=self.lstm_dual_bias,
        )

    def loss_kwargs(self):
        if self.loss == "mse":
            return {"kind": "mse"}
        return {
            "kind": "e2stoi",
            "theta": self.theta,
            "lam": self.lam,
            "bin_floor": self.bin_floor,
            "min_active": self.min_active,
        }


# ---------------------------------------------------------------------------
# optimiser
# ---------------------------------------------------------------------------


@dataclass
class Adam:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    lr_scale: dict = field(default_factory=dict)

    def step(self, params):
        """Update every parameter in ``params`` (name -> Tensor) from its ``.grad``.

        ``lr_scale`` maps parameter names to step-size multipliers (default 1).
        """
        self.t += 1
        c1 = 1.0 - self.beta1**self.t
        c2 = 1.0 - self.beta2**self.t
        for name, p in params.items():
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            m = self.m.get(name)
            v = self.v.get(name)
            m = (1 - self.beta1) * g if m is None else self.beta1 * m + (1 - self.beta1) * g
            v = (1 - self.beta2) * g * g if v is None else self.beta2 * v + (1 - self.beta2) * g * g
            self.m[name], self.v[name] = m, v
            lr = self.lr * self.lr_scale.get(name, 1.0)
            p.data = p.data - lr * (m / c1) / (np.sqrt(v / c2) + self.eps)

    def state_arrays(self):
        out = {f"adam.m.{k}": v for k, v in self.m.items()}
        out.update({f"adam.v.{k}": v for k, v in self.v.items()})
        return out

    def load_arrays(self, arrays, t):
        self.t = int(t)
        self.m = {k[len("adam.m."):]: v for k, v in arrays.items() if k.startswith("adam.m.")}
        self.v = {k[len("adam.v."):]: v for k, v in arrays.items() if k.startswith("adam.v.")}


def gate_lr_scale(model):
    """Step multipliers 1/sqrt(fan-in) for the wide gate-generator input weights.

    Adam moves every weight by about ``lr`` per step, so a gate score fed by
    771 (local) or 257 (temporal) inputs moves by hundreds of ``lr`` and the
    sigmoid saturates within a few steps.  Scaling restores an O(lr) change.
    """
    scales = {}
    for name in ("gate.kernel", "gate.lstm.w_x"):
        p = model.params.get(name)
        if p is not None:
            scales[name] = 1.0 / np.sqrt(np.prod(p.shape[1:]))
    return scales


# ---------------------------------------------------------------------------
# steps and logs
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class StepResult:
    total: float
    d_e2stoi: float
    mse: float


class NonFiniteLossError(FloatingPointError):
    pass


def _zero_grads(model):
    for p in model.params.values():
        p.grad = None


def train_step(model, batch, optimizer, config, stats, sample_ids=None):
    """Forward the batch, average the per-sample losses, backpropagate, update.

    ``batch`` is ``(noisy [B,1,257,T], clean [B,257,T])`` in normalised LPS.
    """
    noisy, clean = batch
    if len(noisy) == 0:
        raise ValueError("empty batch")
    ids = sample_ids or [str(i) for i in range(len(noisy))]
    # ReLU maps NaN to 0, so bad inputs would otherwise vanish silently
    bad = [
        sid
        for i, sid in enumerate(ids)
        if not (np.all(np.isfinite(noisy[i])) and np.all(np.isfinite(clean[i])))
    ]
    if bad:
        raise NonFiniteLossError(f"non-finite input features in samples {bad}")
    _zero_grads(model)
    enhanced = forward(model, ad.Tensor(noisy), training=True)
    total, mean_d, mean_mse = batch_loss(enhanced, clean, stats, **config.loss_kwargs())
    if not np.isfinite(total.data):
        bad = []
        for i, sid in enumerate(ids):
            if not np.all(np.isfinite(enhanced.data[i])):
                bad.append(sid)
        raise NonFiniteLossError(f"non-finite loss in batch; samples {bad or ids}")
    total.backward()
    optimizer.step(model.params)
    return StepResult(float(total.data), mean_d, mean_mse)


LOG_FIELDS = ("epoch", "step", "total", "d_e2stoi", "mse", "wall_time", "valid_estoi")


@dataclass
class TrainLog:
    """One row per optimisation step; ``valid_estoi`` is set on epoch-final rows."""

    rows: list = field(default_factory=list)

    def append(self, epoch, step, result, wall_time):
        self.rows.append(
            {
                "epoch": epoch,
                "step": step,
                "total": result.total,
                "d_e2stoi": result.d_e2stoi,
                "mse": result.mse,
                "wall_time": wall_time,
                "valid_estoi": float("nan"),
            }
        )

    def write(self, path):
        with open(path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.DictWriter(fh, fieldnames=LOG_FIELDS)
            writer.writeheader()
            for row in self.rows:
                writer.writerow({k: _fmt(row[k]) for k in LOG_FIELDS})

    @classmethod
    def read(cls, path):
        rows = []
        with open(path, newline="", encoding="utf-8") as fh:
            for row in csv.DictReader(fh):
                rows.append(
                    {
                        k: (int(row[k]) if k in ("epoch", "step") else float(row[k] or "nan"))
                        for k in LOG_FIELDS
                    }
                )
        return cls(rows)

    def losses(self):
        return np.array([r["total"] for r in self.rows])


def _fmt(value):
    if isinstance(value, float):
        return "" if np.isnan(value) else repr(value)
    return value


# ---------------------------------------------------------------------------
# enhancement
# ---------------------------------------------------------------------------


def stats_extras(stats):
    return {"stats.mean": stats.mean, "stats.std": stats.std}


def stats_from_extras(extras):
    if "stats.mean" not in extras or "stats.std" not in extras:
        raise ValueError("checkpoint carries no normalisation statistics")
    return NormStats(extras["stats.mean"], extras["stats.std"])


def enhance(model, stats, noisy):
    """Enhance a waveform with the model in inference mode.

    The enhanced magnitude is combined with the noisy phase.  The output has
    the input's length (samples after the last full frame come back as
    silence) and is scaled down if its peak exceeds the clipping limit.
    """
    noisy = noisy if isinstance(noisy, Waveform) else Waveform(noisy)
    spec = stft(noisy)
    if spec.n_frames < 3:
        raise ValueError(f"need at least 3 frames ({FRAME_LEN + 2 * 256} samples)")
    x = normalize_lps(lps(spec), stats)
    y = forward(model, ad.Tensor(x[None]), training=False).data[0]
    magnitude = np.exp(denormalize_lps(y, stats) / 2.0)
    bins = magnitude * np.exp(1j * np.angle(spec.bins))
    out = istft(bins).samples
    samples = np.zeros(len(noisy))
    samples[: len(out)] = out[: len(noisy)]
    peak = np.max(np.abs(samples))
    if peak > PEAK_LIMIT:
        samples *= PEAK_LIMIT / peak
    return Waveform(samples)


def enhance_file(checkpoint, noisy_wav, out_wav):
    model, extras, _ = load_checkpoint(checkpoint)
    result = enhance(model, stats_from_extras(extras), read_wav(noisy_wav))
    write_wav(out_wav, result)
    return result


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------


SUMMARY_FIELDS = ("noise", "snr_db", "n", "estoi_noisy", "estoi_enhanced")
UTTERANCE_FIELDS = ("utt_id", "noise", "snr_db", "estoi_noisy", "estoi_enhanced")


@dataclass
class Evaluation:
    utterances: list
    summary: list
    missing: list

    def mean(self, column):
        return float(np.mean([u[column] for u in self.utterances]))


def summarize(utterances):
    groups = defaultdict(list)
    for u in utterances:
        groups[(u["noise"], u["snr_db"])].append(u)
    rows = []
    for (noise, snr), items in sorted(groups.items()):
        rows.append(
            {
                "noise": noise,
                "snr_db": snr,
                "n": len(items),
                "estoi_noisy": float(np.mean([u["estoi_noisy"] for u in items])),
                "estoi_enhanced": float(np.mean([u["estoi_enhanced"] for u in items])),
            }
        )
    return rows


def evaluate(enhancer, records, out_csv=None, per_utterance_csv=None):
    """ESTOI of noisy and enhanced speech per test record, grouped by noise and SNR.

    ``enhancer`` maps a noisy :class:`Waveform` to an enhanced one.  Records
    whose audio cannot be read are collected in ``missing``.
    """
    utterances, missing = [], []
    noise_cache = {}
    for rec in records:
        try:
            mix = mix_record(rec, noise_cache)
        except (OSError, EOFError) as exc:
            missing.append((rec.utt_id, str(exc)))
            continue
        enhanced = enhancer(mix.noisy)
        utterances.append(
            {
                "utt_id": rec.utt_id,
                "noise": rec.noise_name,
                "snr_db": rec.snr_db,
                "estoi_noisy": estoi(mix.speech, mix.noisy),
                "estoi_enhanced": estoi(mix.speech, enhanced),
            }
        )
    result = Evaluation(utterances, summarize(utterances), missing)
    if out_csv:
        _write_rows(out_csv, SUMMARY_FIELDS, result.summary)
    if per_utterance_csv:
        _write_rows(per_utterance_csv, UTTERANCE_FIELDS, utterances)
    return result


def _write_rows(path, fields, rows):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=fields)
        writer.writeheader()
        for row in rows:
            writer.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in row.items()})


def evaluate_checkpoint(checkpoint, manifest, out_csv, split="test", per_utterance_csv=None):
    model, extras, _ = load_checkpoint(checkpoint)
    stats = stats_from_extras(extras)
    records = read_manifest(manifest, split=split)
    if not records:
        raise ValueError(f"{manifest}: no {split!r} records")
    return evaluate(lambda w: enhance(model, stats, w), records, out_csv, per_utterance_csv)


# ---------------------------------------------------------------------------
# training loop
# ---------------------------------------------------------------------------


def epoch_order(seed, epoch, n):
    return np.random.default_rng([seed, epoch]).permutation(n)


def checkpoint_path(directory, epoch):
    return Path(directory) / f"epoch_{epoch:03d}.gsec"


def _validate(model, stats, records):
    if not records:
        return float("nan")
    noise_cache = {}
    scores = []
    for rec in records:
        mix = mix_record(rec, noise_cache)
        scores.append(estoi(mix.speech, enhance(model, stats, mix.noisy)))
    return float(np.mean(scores))


@dataclass
class TrainResult:
    model: object
    log: TrainLog
    checkpoints: list
    best: Path | None
    n_samples: int


def train(config, samples=None, stats=None, valid_records=None, progress=None):
    """Run ``config.epochs`` epochs of Adam over the training samples.

    Samples come from the manifest's train split unless given directly.
    After every epoch a checkpoint is written to ``config.checkpoint_dir``
    (model, normalisation statistics, Adam moments and loop position) and
    the one with the best validation ESTOI is copied to ``best.gsec``.
    """
    out_dir = Path(config.checkpoint_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    if stats is None:
        stats = read_stats(config.stats)
    if samples is None or valid_records is None:
        records = read_manifest(config.manifest)
        if samples is None:
            train_records = [r for r in records if r.split == "train"]
            samples = load_samples(
                config.features,
                train_records,
                stats,
                theta=config.theta,
                bin_floor=config.bin_floor,
                min_active=config.min_active,
            )
        if valid_records is None:
            valid_records = [r for r in records if r.split == "valid"] if config.validate else []
    if not samples:
        raise ValueError("no training samples survived slicing")

    optimizer = Adam(config.lr, config.beta1, config.beta2, config.adam_eps)
    log = TrainLog()
    start_epoch, step = 0, 0
    best_score = -np.inf
    if config.resume:
        model, extras, state = load_checkpoint(config.resume)
        optimizer.load_arrays(extras, state.get("adam_t", 0))
        start_epoch, step = int(state["epoch"]), int(state["step"])
        if state.get("best_valid") is not None:
            best_score = float(state["best_valid"])
        log_path = out_dir / "train_log.csv"
        if log_path.exists():
            log = TrainLog([r for r in TrainLog.read(log_path).rows if r["step"] <= step])
    else:
        model = build(config.architecture(), config.seed)
    if config.gate_lr_scaling:
        optimizer.lr_scale = gate_lr_scale(model)

    def save(epoch):
        extras = stats_extras(stats)
        extras.update(optimizer.state_arrays())
        state = {
            "epoch": epoch,
            "step": step,
            "adam_t": optimizer.t,
            "best_valid": best_score if np.isfinite(best_score) else None,
            "seed": config.seed,
        }
        path = checkpoint_path(out_dir, epoch)
        save_checkpoint(path, model, extras, state)
        return path

    checkpoints = []
    best = None
    if start_epoch == 0 and not config.resume:
        checkpoints.append(save(0))
    clock = time.perf_counter()
    for epoch in range(start_epoch, config.epochs):
        order = epoch_order(config.seed, epoch, len(samples))
        for lo in range(0, len(order), config.batch_size):
            chosen = [samples[i] for i in order[lo : lo + config.batch_size]]
            ids = [f"{s.source}@{s.offset}" for s in chosen]
            result = train_step(model, stack_batch(chosen), optimizer, config, stats, ids)
            step += 1
            log.append(epoch + 1, step, result, time.perf_counter() - clock)
            if progress:
                progress(epoch + 1, step, result)
        score = _validate(model, stats, valid_records)
        if log.rows:
            log.rows[-1]["valid_estoi"] = score
        improved = np.isfinite(score) and score > best_score
        if improved:
            best_score = score
        checkpoints.append(save(epoch + 1))
        if improved:
            best = out_dir / "best.gsec"
            shutil.copyfile(checkpoints[-1], best)
        log.write(out_dir / "train_log.csv")
    return TrainResult(model, log, checkpoints, best, len(samples))
