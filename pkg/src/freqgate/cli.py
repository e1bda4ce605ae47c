"""Command-line entry point: ``freqgate <subcommand> [options]``.

Every subcommand accepts ``--config FILE`` with ``key = value`` lines; flags
given on the command line take precedence over the file.
"""

from __future__ import annotations

import argparse
import sys

import numpy as np

from .audio import read_wav
from .config import ConfigError, coerce, read_config


class UsageError(Exception):
    pass


def _snr_list(text):
    return [float(v) for v in str(text).split(",") if v.strip()]


# option name -> (type, default, help); defaults are applied after merging
# the config file so that flags, file and defaults layer in that order
COMMON = {"config": (str, None, "key = value file with defaults for these options")}

COMMANDS = {
    "synth-corpus": (
        "write a synthetic speech and noise corpus",
        {
            "out": (str, None, "output directory"),
            "seed": (int, 0, "random seed"),
            "train_speakers": (int, 30, "speakers in the train split"),
            "valid_speakers": (int, 2, "speakers in the valid split"),
            "test_speakers": (int, 3, "speakers in the test split"),
            "utterances": (int, 10, "utterances per train speaker"),
            "duration": (float, 4.0, "utterance length in seconds"),
        },
    ),
    "featurize": (
        "build the manifest and cache noisy/clean LPS features",
        {
            "speech_dir": (str, None, "speech/<split>/<speaker>/*.wav"),
            "noise_dir": (str, None, "noise/<split>/*.wav"),
            "snrs": (str, "-5,0,5", "comma-separated SNRs in dB"),
            "seed": (int, 0, "noise assignment seed"),
            "manifest": (str, None, "manifest file to write"),
            "features": (str, None, "feature cache directory"),
        },
    ),
    "stats": (
        "per-bin normalisation statistics of the clean training features",
        {
            "manifest": (str, None, "manifest file"),
            "features": (str, None, "feature cache directory"),
            "out": (str, None, "statistics file to write"),
        },
    ),
    "train": (
        "train a model",
        {
            "manifest": (str, None, "manifest file"),
            "stats": (str, None, "statistics file"),
            "features": (str, None, "feature cache directory"),
            "checkpoint_dir": (str, None, "where checkpoints and the log go"),
            "resume": (str, None, "checkpoint to continue from"),
            "rho": (int, None, "base number of kernels"),
            "gating": (str, None, "none, freq_wise, local or temporal"),
            "lam": (str, None, "weight of the MSE term"),
            "theta": (float, None, "silence threshold"),
            "bin_floor": (float, None, "magnitude counted as non-silent"),
            "min_active": (int, None, "minimum active frames per sample"),
            "loss": (str, None, "e2stoi or mse"),
            "lr": (float, None, "learning rate"),
            "batch_size": (int, None, "samples per step"),
            "epochs": (int, None, "passes over the training samples"),
            "seed": (int, None, "initialisation and shuffling seed"),
            "temporal_hidden": (int, None, "LSTM width for temporal gating"),
            "temporal_map": (str, None, "clamp, sigmoid or rescale"),
            "freq_padding": (str, None, "valid or same"),
            "share_gates": (str, None, "share gates between first and last layer"),
            "lstm_dual_bias": (str, None, "two LSTM bias vectors"),
            "beta1": (float, None, "Adam first-moment decay"),
            "beta2": (float, None, "Adam second-moment decay"),
            "adam_eps": (float, None, "Adam denominator epsilon"),
            "gate_lr_scaling": (str, None, "scale gate-generator input steps by 1/sqrt(fan-in)"),
            "validate": (str, None, "score the valid split after each epoch"),
        },
    ),
    "enhance": (
        "enhance a noisy WAV file",
        {
            "checkpoint": (str, None, "trained checkpoint"),
            "input": (str, None, "noisy WAV"),
            "output": (str, None, "enhanced WAV to write"),
        },
    ),
    "evaluate": (
        "mean ESTOI of noisy and enhanced test speech per noise and SNR",
        {
            "checkpoint": (str, None, "trained checkpoint"),
            "manifest": (str, None, "manifest file"),
            "out": (str, None, "summary CSV"),
            "per_utterance": (str, None, "optional per-utterance CSV"),
            "split": (str, "test", "manifest split to evaluate"),
        },
    ),
    "dump-gates": (
        "write the gate activations for one utterance",
        {
            "checkpoint": (str, None, "trained checkpoint"),
            "input": (str, None, "noisy WAV"),
            "out": (str, None, "output stem (.csv, _centered.csv, .pgm)"),
        },
    ),
    "gradcheck": (
        "compare model+loss gradients with finite differences",
        {
            "rho": (int, 1, "base number of kernels"),
            "gating": (str, "none", "gating variant"),
            "frames": (int, 5, "input frames"),
            "eps": (float, 1e-4, "finite-difference step"),
            "order": (int, 4, "central stencil order, 2 or 4"),
            "objective": (str, "loss", "loss or sum"),
            "seed": (int, 0, "random seed"),
            "temporal_hidden": (int, 4, "LSTM width for temporal gating"),
            "max_coords": (int, None, "cap on coordinates checked per tensor"),
        },
    ),
    "param-count": (
        "number of trainable parameters",
        {
            "rho": (int, 4, "base number of kernels"),
            "gating": (str, "none", "gating variant"),
            "temporal_hidden": (int, 128, "LSTM width for temporal gating"),
            "temporal_map": (str, "clamp", "clamp, sigmoid or rescale"),
            "share_gates": (str, "false", "share gates between first and last layer"),
            "freq_padding": (str, "valid", "valid or same"),
            "lstm_dual_bias": (str, "false", "two LSTM bias vectors"),
        },
    ),
}

REQUIRED = {
    "synth-corpus": ("out",),
    "featurize": ("speech_dir", "noise_dir", "manifest", "features"),
    "stats": ("manifest", "features", "out"),
    "train": ("manifest", "stats", "features"),
    "enhance": ("checkpoint", "input", "output"),
    "evaluate": ("checkpoint", "manifest", "out"),
    "dump-gates": ("checkpoint", "input", "out"),
}


def build_parser():
    parser = argparse.ArgumentParser(prog="freqgate", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", metavar="command")
    sub.required = True
    parser.commands = {}
    for name, (help_text, options) in COMMANDS.items():
        p = sub.add_parser(name, help=help_text, description=help_text)
        parser.commands[name] = p
        for key, (kind, _default, opt_help) in {**COMMON, **options}.items():
            p.add_argument("--" + key.replace("_", "-"), dest=key, type=kind, default=None, help=opt_help)
    return parser


def resolve(args):
    """Merge flags over the config file over the defaults; enforce required keys."""
    _, options = COMMANDS[args.command]
    values = {}
    if args.config:
        file_values = read_config(args.config)
        unknown = sorted(set(file_values) - set(options))
        if unknown:
            raise UsageError(f"{args.config}: unknown keys for {args.command}: {', '.join(unknown)}")
        values.update({k: coerce(v, options[k][0], k) for k, v in file_values.items()})
    for key in options:
        flag = getattr(args, key)
        if flag is not None:
            values[key] = flag
    for key, (_, default, _) in options.items():
        if values.get(key) is None and default is not None:
            values[key] = default
    missing = [k for k in REQUIRED.get(args.command, ()) if not values.get(k)]
    if missing:
        raise UsageError("missing " + ", ".join("--" + k.replace("_", "-") for k in missing))
    return values


def _bool(value):
    return coerce(value, bool) if isinstance(value, str) else bool(value)


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------


def cmd_synth_corpus(v):
    from .synth import synth_corpus

    layout = synth_corpus(
        v["out"],
        seed=v["seed"],
        speakers=(v["train_speakers"], v["valid_speakers"], v["test_speakers"]),
        utterances=v["utterances"],
        duration=v["duration"],
    )
    print(f"wrote {layout.n_files} files under {v['out']} ({layout.train_seconds:.0f} s of train speech)")


def cmd_featurize(v):
    from .data import build_manifest, featurize, write_manifest

    records = build_manifest(v["speech_dir"], v["noise_dir"], _snr_list(v["snrs"]), seed=v["seed"])
    write_manifest(v["manifest"], records)
    featurize(records, v["features"])
    print(f"{len(records)} records -> {v['manifest']}, features in {v['features']}")


def cmd_stats(v):
    from .data import read_manifest, stats_from_features, write_stats

    records = read_manifest(v["manifest"], split="train")
    stats = stats_from_features(v["features"], records)
    write_stats(v["out"], stats)
    print(f"statistics over {stats.n_frames} frames -> {v['out']}")


def cmd_train(v):
    from .train import TrainConfig, train

    values = {k: val for k, val in v.items() if k != "config"}
    config = TrainConfig.from_mapping(values)

    def progress(epoch, step, result):
        if step % 20 == 0:
            print(f"epoch {epoch} step {step} loss {result.total:.4f} d {result.d_e2stoi:.4f}", flush=True)

    result = train(config, progress=progress)
    last = result.checkpoints[-1] if result.checkpoints else None
    print(f"trained on {result.n_samples} samples; last checkpoint {last}; best {result.best}")


def cmd_enhance(v):
    from .train import enhance_file

    out = enhance_file(v["checkpoint"], v["input"], v["output"])
    print(f"wrote {v['output']} ({out.duration:.2f} s)")


def cmd_evaluate(v):
    from .train import evaluate_checkpoint

    result = evaluate_checkpoint(
        v["checkpoint"], v["manifest"], v["out"], split=v["split"], per_utterance_csv=v.get("per_utterance")
    )
    for rec_id, reason in result.missing:
        print(f"missing: {rec_id}: {reason}", file=sys.stderr)
    print(
        f"{len(result.utterances)} utterances: ESTOI noisy {result.mean('estoi_noisy'):.4f}, "
        f"enhanced {result.mean('estoi_enhanced'):.4f} -> {v['out']}"
    )


def cmd_dump_gates(v):
    from .audio import lps, normalize_lps, stft
    from .model import dump_gates, load_checkpoint
    from .train import stats_from_extras

    model, extras, _ = load_checkpoint(v["checkpoint"])
    noisy = normalize_lps(lps(stft(read_wav(v["input"]))), stats_from_extras(extras))
    gates, centered = dump_gates(model, noisy, v["out"])
    spread = np.ptp(centered, axis=1)
    print(f"{gates.shape[0]} gate rows x {gates.shape[1]} columns; max centred range {spread.max():.4f}")


def cmd_gradcheck(v):
    from .verify import composite_gradcheck

    report = composite_gradcheck(
        rho=v["rho"],
        gating=v["gating"],
        frames=v["frames"],
        eps=v["eps"],
        objective=v["objective"],
        seed=v["seed"],
        temporal_hidden=v["temporal_hidden"],
        max_coords=v.get("max_coords"),
        order=v["order"],
    )
    print(
        f"max rel error {report.max_rel_error:.3e} ({report.worst_name}{list(report.worst_index)}; "
        f"{report.n_checked} coordinates checked, {report.n_skipped} skipped at kinks)"
    )
    return 0 if report.max_rel_error < 1e-4 else 1


def cmd_param_count(v):
    from .model import ArchitectureConfig, analytic_param_count, build, count_params

    config = ArchitectureConfig(
        rho=v["rho"],
        gating=v["gating"],
        temporal_hidden=v["temporal_hidden"],
        temporal_map=v["temporal_map"],
        share_gates=_bool(v["share_gates"]),
        freq_padding=v["freq_padding"],
        lstm_dual_bias=_bool(v["lstm_dual_bias"]),
    )
    built = count_params(build(config))
    if built != analytic_param_count(config):
        raise RuntimeError("built model disagrees with the analytic count")
    print(built)


HANDLERS = {
    "synth-corpus": cmd_synth_corpus,
    "featurize": cmd_featurize,
    "stats": cmd_stats,
    "train": cmd_train,
    "enhance": cmd_enhance,
    "evaluate": cmd_evaluate,
    "dump-gates": cmd_dump_gates,
    "gradcheck": cmd_gradcheck,
    "param-count": cmd_param_count,
}


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        values = resolve(args)
    except (UsageError, ConfigError, OSError) as exc:
        parser.commands[args.command].print_usage(sys.stderr)
        print(f"freqgate {args.command}: error: {exc}", file=sys.stderr)
        return 2
    try:
        code = HANDLERS[args.command](values)
    except (ValueError, OSError, RuntimeError, FloatingPointError) as exc:
        print(f"freqgate {args.command}: error: {exc}", file=sys.stderr)
        return 1
    return code or 0


if __name__ == "__main__":
    sys.exit(main())
