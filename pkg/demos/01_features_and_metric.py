"""
Features and the intelligibility metric
=======================================

Synthesise a short utterance, mix it with noise at three SNRs, look at the
log-power features and the one-third octave bands, and score the mixtures
with ESTOI.  Run with ``python3 demos/01_features_and_metric.py``.
"""

import numpy as np

from freqgate.audio import Waveform, istft, lps, octave_band_edges, octave_bands, stft
from freqgate.data import mix_at_snr, realized_snr
from freqgate.metrics import estoi
from freqgate.synth import make_speaker, synth_noise, synth_utterance

rng = np.random.default_rng(1)
speaker = make_speaker("demo", rng)
speech = Waveform(synth_utterance(speaker, rng, duration=3.0))
noise = Waveform(synth_noise("pink", rng, duration=10.0))

# %% STFT and log-power features
spec = stft(speech)
features = lps(spec)
print(f"{len(speech)} samples -> {spec.n_frames} frames of {spec.bins.shape[0]} bins")
print(f"LPS range {features.min():.1f} to {features.max():.1f} (floor ln(1e-12) = {np.log(1e-12):.1f})")

# the Hann window at 50% overlap reconstructs the interior exactly
back = istft(spec).samples
interior = slice(256, len(back) - 256)
print(f"ISTFT round trip, interior max error {np.max(np.abs(back[interior] - speech.samples[interior])):.2e}")

# %% one-third octave bands
bands = octave_bands(spec.magnitude)
lo, hi = octave_band_edges()[[0, -1]].T
print(f"{bands.shape[0]} bands covering bins {lo[0]}..{hi[-1]} of 256")

# %% mixing and ESTOI
print("\n snr  realized   ESTOI")
for snr in (-5, 0, 5):
    mix = mix_at_snr(speech, noise, snr, seed=0)
    print(f"{snr:4d}  {realized_snr(mix):8.4f}  {estoi(mix.speech, mix.noisy):6.3f}")

# the measure ignores overall level and is 1 for identical signals
print(f"\nestoi(x, x) = {estoi(speech, speech):.12f}")
print(f"estoi(x, 0.1 x) = {estoi(speech, Waveform(0.1 * speech.samples)):.12f}")
