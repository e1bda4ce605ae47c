"""Hourglass convolutional autoencoder with frequency gating.

The encoder has seven convolutional layers over the channel schedule
``1, r, r, r, 2r, 2r, 3r, 4r`` (``r`` is ``rho``); the decoder mirrors it with
transposed convolutions.  Every encoder output is added to the input of the
mirrored decoder layer.  A gate tensor of ``2 * rho`` channels multiplies the
``rho`` feature maps produced by the input layer (first half) and the ``rho``
feature maps entering the output layer (second half).

Gating variants:

``none``
    plain autoencoder.
``freq_wise``
    ``sigmoid(alpha_k * x / 257 + beta_k)`` over the frequency position ``x``
    of each feature-map row; independent of the input.
``local``
    a convolution with kernels spanning all 257 bins and 3 frames produces one
    weight per kernel and frame.
``temporal``
    an LSTM reads the input frames left to right; its hidden state is mapped
    to one weight per kernel and frame.
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .audio import N_BINS

GATINGS = ("none", "freq_wise", "local", "temporal")
TEMPORAL_MAPS = ("clamp", "sigmoid", "rescale")
FREQ_PADDINGS = ("valid", "same")

CHECKPOINT_MAGIC = b"GSEC"
CHECKPOINT_VERSION = 1

_KIND_PARAM, _KIND_BUFFER, _KIND_EXTRA = 0, 1, 2


class CheckpointError(ValueError):
    pass


@dataclass(frozen=True)
class LayerSpec:
    name: str
    in_ch: int
    out_ch: int
    kernel: tuple
    stride: tuple
    padding: tuple
    has_bn_relu: bool = True
    transposed: bool = False

    @property
    def n_params(self):
        kf, kt = self.kernel
        n = self.in_ch * self.out_ch * kf * kt + self.out_ch
        if self.has_bn_relu:
            n += 2 * self.out_ch
        return n


@dataclass(frozen=True)
class ArchitectureConfig:
    """Network shape and gating options.

    ``freq_padding="valid"`` pads only along time, so the input layer's maps
    cover bins 3..255 (1-based) and the bottleneck is 2 bins tall;
    ``"same"`` pads both axes.  ``share_gates`` makes the input- and
    output-layer gates of kernel ``k`` one generated channel instead of two;
    freq-wise gates are always shared.
    """

    rho: int = 4
    gating: str = "none"
    temporal_hidden: int = 128
    temporal_map: str = "clamp"
    share_gates: bool = False
    freq_padding: str = "valid"
    lstm_dual_bias: bool = False

    def __post_init__(self):
        if int(self.rho) < 1:
            raise ValueError("rho must be >= 1")
        if self.gating not in GATINGS:
            raise ValueError(f"gating must be one of {GATINGS}, got {self.gating!r}")
        if self.temporal_map not in TEMPORAL_MAPS:
            raise ValueError(f"temporal_map must be one of {TEMPORAL_MAPS}")
        if self.freq_padding not in FREQ_PADDINGS:
            raise ValueError(f"freq_padding must be one of {FREQ_PADDINGS}")
        if self.temporal_hidden < 1:
            raise ValueError("temporal_hidden must be >= 1")
        if (
            self.gating == "temporal"
            and self.temporal_map == "rescale"
            and self.temporal_hidden != self.n_gate_channels
        ):
            raise ValueError(
                "temporal_map='rescale' uses the LSTM state directly and needs "
                f"temporal_hidden == {self.n_gate_channels}"
            )

    @property
    def encoder_channels(self):
        r = self.rho
        return [1, r, r, r, 2 * r, 2 * r, 3 * r, 4 * r]

    @property
    def decoder_channels(self):
        return self.encoder_channels[::-1]

    @property
    def n_gate_channels(self):
        """Distinct gate channels the generator produces."""
        return self.rho if self.share_gates else 2 * self.rho

    def layers(self):
        ch = self.encoder_channels
        kernels = [5, 5, 5, 3, 3, 3, 3]
        strides = [(1, 1)] + [(2, 1)] * 6
        same = self.freq_padding == "same"
        enc = []
        for i in range(7):
            k = kernels[i]
            pad = ((k - 1) // 2 if same else 0, (k - 1) // 2)
            enc.append(LayerSpec(f"e{i + 1}", ch[i], ch[i + 1], (k, k), strides[i], pad))
        dec = []
        for i, mirror in enumerate(reversed(enc)):
            dec.append(
                LayerSpec(
                    f"d{i + 1}",
                    mirror.out_ch,
                    mirror.in_ch,
                    mirror.kernel,
                    mirror.stride,
                    mirror.padding,
                    has_bn_relu=i < 6,
                    transposed=True,
                )
            )
        return enc + dec

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        known = {f for f in cls.__dataclass_fields__}
        return cls(**{k: v for k, v in d.items() if k in known})


@dataclass
class ModelParams:
    config: ArchitectureConfig
    params: dict = field(default_factory=dict)
    buffers: dict = field(default_factory=dict)

    def copy(self):
        return ModelParams(
            self.config,
            {k: ad.Tensor(v.data, requires_grad=True, name=k) for k, v in self.params.items()},
            {k: v.copy() for k, v in self.buffers.items()},
        )


# ---------------------------------------------------------------------------
# construction
# ---------------------------------------------------------------------------


def _glorot(rng, shape, fan_in, fan_out):
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape)


def build(config, seed=0):
    """Initialise all parameters deterministically from ``seed``."""
    rng = np.random.default_rng(seed)
    params, buffers = {}, {}

    def add_param(name, value):
        params[name] = ad.Tensor(value, requires_grad=True, name=name)

    for spec in config.layers():
        kf, kt = spec.kernel
        if spec.transposed:
            shape = (spec.in_ch, spec.out_ch, kf, kt)
        else:
            shape = (spec.out_ch, spec.in_ch, kf, kt)
        add_param(
            f"{spec.name}.kernel",
            _glorot(rng, shape, spec.in_ch * kf * kt, spec.out_ch * kf * kt),
        )
        add_param(f"{spec.name}.bias", np.zeros(spec.out_ch))
        if spec.has_bn_relu:
            add_param(f"{spec.name}.bn.gamma", np.ones(spec.out_ch))
            add_param(f"{spec.name}.bn.beta", np.zeros(spec.out_ch))
            buffers[f"{spec.name}.bn.running_mean"] = np.zeros(spec.out_ch)
            buffers[f"{spec.name}.bn.running_var"] = np.ones(spec.out_ch)

    r, n_g = config.rho, config.n_gate_channels
    if config.gating == "freq_wise":
        add_param("gate.alpha", np.zeros(r))
        add_param("gate.beta", np.full(r, 2.0))
    elif config.gating == "local":
        add_param("gate.kernel", _glorot(rng, (n_g, 1, N_BINS, 3), N_BINS * 3, n_g * N_BINS * 3))
        add_param("gate.bias", np.full(n_g, 2.0))
    elif config.gating == "temporal":
        h = config.temporal_hidden
        bound = 1.0 / np.sqrt(h)
        add_param("gate.lstm.w_x", rng.uniform(-bound, bound, (4 * h, N_BINS)))
        add_param("gate.lstm.w_h", rng.uniform(-bound, bound, (4 * h, h)))
        bias = np.zeros(4 * h)
        bias[h : 2 * h] = 1.0
        add_param("gate.lstm.b", bias)
        if config.lstm_dual_bias:
            add_param("gate.lstm.b_h", np.zeros(4 * h))
        if config.temporal_map != "rescale":
            add_param("gate.proj.weight", _glorot(rng, (n_g, h), h, n_g))
            add_param(
                "gate.proj.bias",
                np.full(n_g, 0.5 if config.temporal_map == "clamp" else 2.0),
            )
    return ModelParams(config, params, buffers)


def count_params(model):
    """Number of trainable scalars (running statistics excluded)."""
    return int(sum(p.size for p in model.params.values()))


def analytic_param_count(config):
    """Closed-form parameter count of ``config``, independent of :func:`build`."""
    n = sum(spec.n_params for spec in config.layers())
    r, n_g, h = config.rho, config.n_gate_channels, config.temporal_hidden
    if config.gating == "freq_wise":
        n += 2 * r
    elif config.gating == "local":
        n += n_g * (N_BINS * 3 + 1)
    elif config.gating == "temporal":
        n_bias = 2 if config.lstm_dual_bias else 1
        n += 4 * h * (N_BINS + h + n_bias)
        if config.temporal_map != "rescale":
            n += n_g * (h + 1)
    return n


# ---------------------------------------------------------------------------
# gates
# ---------------------------------------------------------------------------


def _batched(noisy):
    x = ad.as_tensor(noisy)
    if x.ndim == 3:
        return ad.reshape(x, (1,) + x.shape), True
    if x.ndim != 4:
        raise ValueError(f"expected [1,257,T] or [B,1,257,T] input, got {x.shape}")
    return x, False


def _check_input(x):
    if x.shape[1] != 1 or x.shape[2] != N_BINS:
        raise ValueError(f"input must have 1 channel and {N_BINS} bins, got {x.shape}")


def _expand_shared(model, g):
    """Duplicate shared gate channels so both layers get their own half."""
    if g.shape[1] == 2 * model.config.rho:
        return g
    return ad.concat([g, g], axis=1)


def gate_positions(config):
    """1-based centre bin of every row of the input layer's feature maps."""
    spec = config.layers()[0]
    kf = spec.kernel[0]
    pf = spec.padding[0]
    rows = (N_BINS + 2 * pf - kf) // spec.stride[0] + 1
    centre = np.arange(rows) + (kf - 1) // 2 - pf + 1
    return np.clip(centre, 3, N_BINS - 2)


def gate_freq_wise(model):
    """Frequency profile gates, shape [2*rho, F_g, 1]."""
    if model.config.gating != "freq_wise":
        raise ValueError("model does not use freq_wise gating")
    r = model.config.rho
    x = gate_positions(model.config).reshape(1, -1, 1) / float(N_BINS)
    alpha = ad.reshape(model.params["gate.alpha"], (r, 1, 1))
    beta = ad.reshape(model.params["gate.beta"], (r, 1, 1))
    half = ad.sigmoid(ad.add(ad.mul(alpha, x), beta))
    return ad.concat([half, half], axis=0)


def gate_local(model, noisy):
    """Per-frame gates from a (257 x 3) convolution, shape [(B,) 2*rho, 1, T]."""
    if model.config.gating != "local":
        raise ValueError("model does not use local gating")
    x, squeeze = _batched(noisy)
    _check_input(x)
    k = model.params["gate.kernel"]
    scores = ad.conv2d(x, k, stride=(1, 1), padding=(0, 1))
    scores = ad.add(scores, ad.reshape(model.params["gate.bias"], (1, -1, 1, 1)))
    g = _expand_shared(model, ad.sigmoid(scores))
    return g[0] if squeeze else g


def gate_temporal(model, noisy):
    """Causal per-frame gates from an LSTM, shape [(B,) 2*rho, 1, T]."""
    cfg = model.config
    if cfg.gating != "temporal":
        raise ValueError("model does not use temporal gating")
    x, squeeze = _batched(noisy)
    if x.shape[1] != 1:
        raise ValueError("temporal gating expects a single input channel")
    frames = ad.transpose(x[:, 0], (0, 2, 1))  # [B, T, F]
    p = model.params
    lstm = ad.LSTMParams(p["gate.lstm.w_x"], p["gate.lstm.w_h"], p["gate.lstm.b"], p.get("gate.lstm.b_h"))
    hidden = ad.stack(ad.lstm_sequence(frames, lstm), axis=1)  # [B, T, H]
    if cfg.temporal_map == "rescale":
        g = ad.scale(ad.add(hidden, 1.0), 0.5)
    else:
        scores = ad.affine(hidden, p["gate.proj.weight"], p["gate.proj.bias"])
        g = ad.clamp(scores, 0.0, 1.0) if cfg.temporal_map == "clamp" else ad.sigmoid(scores)
    g = ad.reshape(ad.transpose(g, (0, 2, 1)), (x.shape[0], -1, 1, x.shape[3]))
    g = _expand_shared(model, g)
    return g[0] if squeeze else g


def compute_gates(model, noisy):
    """Batched gate tensor [B or 1, 2*rho, F_g, T_g], or ``None`` when ungated."""
    gating = model.config.gating
    if gating == "none":
        return None
    if gating == "freq_wise":
        return ad.reshape(gate_freq_wise(model), (1, 2 * model.config.rho, -1, 1))
    x, _ = _batched(noisy)
    return gate_local(model, x) if gating == "local" else gate_temporal(model, x)


# ---------------------------------------------------------------------------
# forward
# ---------------------------------------------------------------------------


def _bias_bn_relu(model, spec, h, training):
    p, b = model.params, model.buffers
    bias = p[f"{spec.name}.bias"]
    if not spec.has_bn_relu:
        return ad.add(h, ad.reshape(bias, (1, -1, 1, 1)))
    h = ad.batch_norm(
        h,
        p[f"{spec.name}.bn.gamma"],
        p[f"{spec.name}.bn.beta"],
        training,
        b[f"{spec.name}.bn.running_mean"],
        b[f"{spec.name}.bn.running_var"],
        shift=bias,
    )
    return ad.relu(h)


def forward(model, noisy, training=False):
    """Enhanced normalised LPS with the same shape as ``noisy``.

    ``noisy`` is [1, 257, T] or [B, 1, 257, T] with ``T >= 3``.  In training
    mode batch normalisation uses batch statistics and updates the running
    statistics in ``model.buffers``.
    """
    x, squeeze = _batched(noisy)
    _check_input(x)
    if x.shape[3] < 3:
        raise ValueError(f"need at least 3 frames, got {x.shape[3]}")
    cfg = model.config
    r = cfg.rho
    p = model.params
    gates = compute_gates(model, x)
    specs = cfg.layers()
    enc, dec = specs[:7], specs[7:]

    h = x
    shapes, skips = [], []
    for i, spec in enumerate(enc):
        shapes.append(h.shape[2:])
        h = ad.conv2d(h, p[f"{spec.name}.kernel"], spec.stride, spec.padding)
        h = _bias_bn_relu(model, spec, h, training)
        if i == 0 and gates is not None:
            h = ad.mul(h, gates[:, :r])
        skips.append(h)

    for i, spec in enumerate(dec):
        if i > 0:
            h = ad.add(h, skips[6 - i])
        if not spec.has_bn_relu and gates is not None:
            h = ad.mul(h, gates[:, r:])
        h = ad.conv2d_transposed(
            h, p[f"{spec.name}.kernel"], spec.stride, spec.padding, out_shape=shapes[6 - i]
        )
        h = _bias_bn_relu(model, spec, h, training)
    return h[0] if squeeze else h


def feature_shapes(config, n_frames):
    """Spatial shape of every encoder output for an input of ``n_frames``."""
    f, t = N_BINS, n_frames
    out = []
    for spec in config.layers()[:7]:
        f = ad.conv_output_size(f, spec.kernel[0], spec.stride[0], spec.padding[0])
        t = ad.conv_output_size(t, spec.kernel[1], spec.stride[1], spec.padding[1])
        out.append((spec.name, spec.out_ch, f, t))
    return out


# ---------------------------------------------------------------------------
# gate inspection
# ---------------------------------------------------------------------------


def gate_matrix(model, noisy_lps):
    """Gate values as a (2*rho, columns) array.

    Columns run over frequency rows for freq-wise gating and over frames for
    the time-varying variants.
    """
    gating = model.config.gating
    if gating == "none":
        raise ValueError("ungated model has no gates to dump")
    if gating == "freq_wise":
        return gate_freq_wise(model).data[:, :, 0]
    x = np.asarray(noisy_lps, dtype=np.float64)
    if x.ndim == 2:
        x = x[None]
    fn = gate_local if gating == "local" else gate_temporal
    return fn(model, ad.Tensor(x)).data[:, 0, :]


def write_pgm(path, image):
    image = np.asarray(image, dtype=np.uint8)
    rows, cols = image.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{cols} {rows}\n255\n".encode("ascii"))
        fh.write(image.tobytes())


def read_pgm(path):
    with open(path, "rb") as fh:
        blob = fh.read()
    magic, cols, rows, maxval, rest = blob.split(maxsplit=4)
    if magic != b"P5" or int(maxval) != 255:
        raise ValueError(f"{path}: not an 8-bit binary PGM")
    return np.frombuffer(rest, dtype=np.uint8, count=int(rows) * int(cols)).reshape(
        int(rows), int(cols)
    )


def dump_gates(model, noisy_lps, path):
    """Write gate values, centred gate values and a heatmap.

    ``path`` is a stem: ``<stem>.csv`` holds one row per gated kernel,
    ``<stem>_centered.csv`` the same rows minus their mean, and
    ``<stem>.pgm`` an 8-bit heatmap of the centred values (mid-grey is 0).
    Returns ``(gates, centered)``.
    """
    gates = gate_matrix(model, noisy_lps)
    centered = gates - gates.mean(axis=1, keepdims=True)
    stem = Path(path)
    if stem.suffix in (".csv", ".pgm"):
        stem = stem.with_suffix("")
    stem.parent.mkdir(parents=True, exist_ok=True)
    np.savetxt(f"{stem}.csv", gates, delimiter=",", fmt="%.10g")
    np.savetxt(f"{stem}_centered.csv", centered, delimiter=",", fmt="%.10g")
    peak = np.abs(centered).max()
    unit = centered / peak if peak > 0 else np.zeros_like(centered)
    write_pgm(f"{stem}.pgm", np.round((unit + 1.0) * 127.5))
    return gates, centered


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------


def _write_blob(fh, kind, name, array):
    array = np.ascontiguousarray(array, dtype="<f8")
    raw = name.encode("utf-8")
    fh.write(struct.pack("<BH", kind, len(raw)))
    fh.write(raw)
    fh.write(struct.pack("<B", array.ndim))
    fh.write(struct.pack(f"<{array.ndim}I", *array.shape))
    fh.write(array.tobytes())


def save_checkpoint(path, model, extras=None, state=None):
    """Serialise ``model`` (and optional training extras) to ``path``.

    Layout: ``GSEC``, u32 version, u32 header length, UTF-8 JSON header with
    the architecture (and optional training state), u32 blob count, then per
    blob: u8 kind, u16 name length, name, u8 ndim, u32 dims, float64 values.
    All integers and floats are little-endian.
    """
    header = json.dumps(
        {"architecture": model.config.to_dict(), "state": state or {}}, sort_keys=True
    ).encode("utf-8")
    blobs = [(_KIND_PARAM, k, v.data) for k, v in model.params.items()]
    blobs += [(_KIND_BUFFER, k, v) for k, v in model.buffers.items()]
    blobs += [(_KIND_EXTRA, k, v) for k, v in (extras or {}).items()]
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<II", CHECKPOINT_VERSION, len(header)))
        fh.write(header)
        fh.write(struct.pack("<I", len(blobs)))
        for kind, name, array in blobs:
            _write_blob(fh, kind, name, array)
    tmp.replace(path)


def load_checkpoint(path):
    """Inverse of :func:`save_checkpoint`; returns ``(model, extras, state)``."""
    try:
        blob = Path(path).read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    try:
        if blob[:4] != CHECKPOINT_MAGIC:
            raise CheckpointError(f"{path}: bad magic, not a checkpoint")
        version, hlen = struct.unpack_from("<II", blob, 4)
        if version != CHECKPOINT_VERSION:
            raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
        off = 12
        header = json.loads(blob[off : off + hlen].decode("utf-8"))
        off += hlen
        (n_blobs,) = struct.unpack_from("<I", blob, off)
        off += 4
        params, buffers, extras = {}, {}, {}
        for _ in range(n_blobs):
            kind, nlen = struct.unpack_from("<BH", blob, off)
            off += 3
            name = blob[off : off + nlen].decode("utf-8")
            off += nlen
            (ndim,) = struct.unpack_from("<B", blob, off)
            off += 1
            shape = struct.unpack_from(f"<{ndim}I", blob, off)
            off += 4 * ndim
            count = int(np.prod(shape)) if ndim else 1
            if off + 8 * count > len(blob):
                raise CheckpointError(f"{path}: truncated blob {name!r}")
            data = np.frombuffer(blob, dtype="<f8", count=count, offset=off).reshape(shape)
            off += 8 * count
            data = data.astype(np.float64)
            if kind == _KIND_PARAM:
                params[name] = ad.Tensor(data, requires_grad=True, name=name)
            elif kind == _KIND_BUFFER:
                buffers[name] = data
            elif kind == _KIND_EXTRA:
                extras[name] = data
            else:
                raise CheckpointError(f"{path}: unknown blob kind {kind}")
        config = ArchitectureConfig.from_dict(header["architecture"])
    except CheckpointError:
        raise
    except (struct.error, UnicodeDecodeError, json.JSONDecodeError, KeyError, ValueError) as exc:
        raise CheckpointError(f"{path}: corrupt checkpoint ({exc})") from exc
    expected = build(config, seed=0)
    if set(expected.params) != set(params) or any(
        expected.params[k].shape != params[k].shape for k in params
    ):
        raise CheckpointError(f"{path}: parameters do not match the stored architecture")
    model = ModelParams(config, {k: params[k] for k in expected.params}, buffers)
    return model, extras, header.get("state", {})

