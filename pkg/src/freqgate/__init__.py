"""Gated convolutional autoencoders for speech enhancement.

The package covers the signal processing (``audio``), the ESTOI metric
(``metrics``), a small reverse-mode autodiff engine (``autodiff``), the
gated network (``model``), its differentiable intelligibility loss
(``loss``), corpus handling (``data``, ``synth``), training and evaluation
(``train``) and the ``freqgate`` command line (``cli``).
"""

__version__ = "0.1.0"
