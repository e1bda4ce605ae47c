"""
Training and enhancement through the command line
=================================================

Walk the whole pipeline on a tiny synthetic corpus: generate audio, extract
features, compute normalisation statistics, train a small locally gated
model for one epoch, then enhance, evaluate and dump gate activations.  The
corpus is far too small to learn much; the point is the workflow.  Each step
calls the same entry point as the ``freqgate`` console script.
Run with ``python3 demos/03_train_and_enhance.py [work_dir]``.
"""

import sys
import tempfile
from pathlib import Path

from freqgate.audio import write_wav
from freqgate.cli import main
from freqgate.data import mix_record, read_manifest

work = Path(sys.argv[1]) if len(sys.argv) > 1 else Path(tempfile.mkdtemp(prefix="freqgate_demo_"))
print(f"working in {work}")


def run(*argv):
    print("\n$ freqgate " + " ".join(argv))
    code = main(list(argv))
    if code != 0:
        sys.exit(code)


# %% corpus, features and statistics
run("synth-corpus", "--out", str(work / "corpus"), "--train-speakers", "3", "--valid-speakers", "1",
    "--test-speakers", "1", "--utterances", "3", "--duration", "3")
run("featurize", "--speech-dir", str(work / "corpus" / "speech"), "--noise-dir", str(work / "corpus" / "noise"),
    "--snrs=-5,0,5", "--manifest", str(work / "manifest.tsv"), "--features", str(work / "feat"))
run("stats", "--manifest", str(work / "manifest.tsv"), "--features", str(work / "feat"),
    "--out", str(work / "stats.gsen"))

# %% training, with settings from a config file and one flag override
(work / "train.cfg").write_text(
    f"manifest = {work / 'manifest.tsv'}\n"
    f"stats = {work / 'stats.gsen'}\n"
    f"features = {work / 'feat'}\n"
    "gating = local\n"
    "rho = 2\n"
    "lr = 1e-3\n"
    "batch-size = 8\n"
)
run("train", "--config", str(work / "train.cfg"), "--epochs", "1", "--checkpoint-dir", str(work / "ck"))

# %% enhancement, evaluation and gate activations
checkpoint = str(work / "ck" / "epoch_001.gsec")
record = read_manifest(work / "manifest.tsv", split="test")[0]
noisy = str(work / "noisy.wav")
write_wav(noisy, mix_record(record).noisy)
run("enhance", "--checkpoint", checkpoint, "--input", noisy, "--output", str(work / "enhanced.wav"))
run("evaluate", "--checkpoint", checkpoint, "--manifest", str(work / "manifest.tsv"), "--out", str(work / "scores.csv"))
run("dump-gates", "--checkpoint", checkpoint, "--input", noisy, "--out", str(work / "gates"))
print("\n" + (work / "scores.csv").read_text())
