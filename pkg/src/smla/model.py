"""Scaled ResNet-34 trunk with self-attentive multi-layer aggregation.

Pipeline for a batch of log-Mel inputs ``N×D×L``::

    conv1 ─ tap1 ─ stage1 ─ tap2 ─ stage2 ─ tap3 ─ stage3 ─ tap4 ─ stage4 ─ tap5
                                     │
      pooled taps ─ concat ─ [recalibration gate] ─ [length norm to alpha] ─ classifier

Encoding modes: ``single-gap`` / ``single-sap`` pool only the last stage,
``mla-gap`` / ``mla-sap`` pool all five taps and concatenate them.
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .errors import ConfigError, DimensionError, NumericError
from .tensor import Tensor

ENCODING_MODES = ("single-gap", "single-sap", "mla-gap", "mla-sap")

# ablation name -> (encoding_mode, use_fr, use_dln)
ABLATIONS = {
    "gap": ("single-gap", False, False),
    "sap": ("single-sap", False, False),
    "mla-sap": ("mla-sap", False, False),
    "mla-sap-fr": ("mla-sap", True, False),
    "mla-sap-fr-dln": ("mla-sap", True, True),
}


@dataclass
class ModelConfig:
    input_dim: int = 64
    channels: tuple = (32, 32, 64, 128, 256)
    blocks: tuple = (3, 4, 6, 3)
    num_speakers: int = 8
    encoding_mode: str = "mla-sap"
    use_fr: bool = True
    use_dln: bool = True
    reduction_ratio: int = 8
    alpha: float = 10.0
    learn_alpha: bool = False
    dropout_rate: float = 0.1
    leaky_slope: float = 0.01
    fr_bias: bool = True
    bn_momentum: float = 0.1
    bn_eps: float = 1e-5

    def __post_init__(self):
        self.channels = tuple(int(c) for c in self.channels)
        self.blocks = tuple(int(b) for b in self.blocks)
        self.validate()

    def validate(self):
        if self.encoding_mode not in ENCODING_MODES:
            raise ConfigError(f"encoding_mode must be one of {ENCODING_MODES}, got {self.encoding_mode!r}")
        if len(self.channels) != 5 or len(self.blocks) != 4:
            raise ConfigError("need five channel widths (conv1 + 4 stages) and four block counts")
        if min(self.channels) < 1 or min(self.blocks) < 1:
            raise ConfigError("channel widths and block counts must be positive")
        if self.num_speakers < 2:
            raise ConfigError("num_speakers must be at least 2")
        if self.input_dim < 8:
            raise ConfigError("input_dim must be at least 8 so the last stage is nonempty")
        if self.use_fr and self.embedding_dim % self.reduction_ratio:
            raise ConfigError(f"feature width {self.embedding_dim} is not divisible by "
                              f"reduction ratio {self.reduction_ratio}")
        if self.alpha <= 0:
            raise ConfigError("alpha must be positive")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ConfigError("dropout_rate must be in [0, 1)")

    @classmethod
    def from_ablation(cls, name, **kw):
        if name not in ABLATIONS:
            raise ConfigError(f"unknown ablation {name!r}; valid names: {', '.join(ABLATIONS)}")
        mode, fr, dln = ABLATIONS[name]
        return cls(encoding_mode=mode, use_fr=fr, use_dln=dln, **kw)

    @property
    def ablation(self):
        for name, spec in ABLATIONS.items():
            if spec == (self.encoding_mode, self.use_fr, self.use_dln):
                return name
        return None

    @property
    def multi_layer(self):
        return self.encoding_mode.startswith("mla")

    @property
    def pooling(self):
        return self.encoding_mode.split("-")[1]

    @property
    def tap_channels(self):
        return self.channels if self.multi_layer else self.channels[-1:]

    @property
    def embedding_dim(self):
        return sum(self.tap_channels)

    def replace(self, **kw):
        return dataclasses.replace(self, **kw)


class ModelParams:
    """Named trainable tensors plus batch-norm running statistics."""

    def __init__(self, tensors: dict, buffers: dict):
        self.tensors = tensors
        self.buffers = buffers

    def __getitem__(self, name):
        return self.tensors[name]

    def __contains__(self, name):
        return name in self.tensors

    def __iter__(self):
        return iter(self.tensors)

    def items(self):
        return self.tensors.items()

    def count(self, prefix=None):
        return sum(t.size for n, t in self.tensors.items() if prefix is None or n.startswith(prefix))

    def zero_grad(self):
        for t in self.tensors.values():
            t.zero_grad()

    def astype(self, dtype):
        tensors = {n: Tensor(t.data.astype(dtype), requires_grad=True, dtype=dtype, name=n)
                   for n, t in self.tensors.items()}
        buffers = {n: b.astype(dtype) for n, b in self.buffers.items()}
        return ModelParams(tensors, buffers)

    def copy(self):
        return self.astype(next(iter(self.tensors.values())).dtype)


# ------------------------------------------------------------------ construction
def _conv_specs(config):
    """(name, c_in, c_out, kernel, stride) for every convolution in the trunk."""
    specs = [("conv1", 1, config.channels[0], 3, 1)]
    c_in = config.channels[0]
    for s, (c_out, nblocks) in enumerate(zip(config.channels[1:], config.blocks), start=1):
        for b in range(nblocks):
            stride = 2 if (b == 0 and s > 1) else 1
            pre = f"stage{s}.block{b}"
            specs.append((f"{pre}.conv1", c_in, c_out, 3, stride))
            specs.append((f"{pre}.conv2", c_out, c_out, 3, 1))
            if stride != 1 or c_in != c_out:
                specs.append((f"{pre}.proj", c_in, c_out, 1, stride))
            c_in = c_out
    return specs


def _bn_name(conv_name):
    return conv_name + ".bn"


def build(config: ModelConfig, rng: np.random.Generator) -> ModelParams:
    """Initialise every trainable tensor with fan-in scaled normals."""
    dtype = T.default_dtype()
    tensors, buffers = {}, {}

    def param(name, arr):
        tensors[name] = Tensor(arr, requires_grad=True, dtype=dtype, name=name)

    def bn(name, c):
        param(f"{name}.scale", np.ones(c))
        param(f"{name}.shift", np.zeros(c))
        buffers[f"{name}.running_mean"] = np.zeros(c, dtype=dtype)
        buffers[f"{name}.running_var"] = np.ones(c, dtype=dtype)

    for name, c_in, c_out, k, _ in _conv_specs(config):
        fan_in = c_in * k * k
        param(f"{name}.weight", rng.normal(0.0, np.sqrt(2.0 / fan_in), (c_out, c_in, k, k)))
        bn(_bn_name(name), c_out)

    for i, c in enumerate(config.tap_channels, start=1):
        if config.pooling == "sap":
            param(f"tap{i}.sap.W", rng.normal(0.0, np.sqrt(1.0 / c), (c, c)))
            param(f"tap{i}.sap.b", np.zeros(c))
            param(f"tap{i}.sap.u", rng.normal(0.0, np.sqrt(1.0 / c), (c,)))
            bn(f"tap{i}.bn", c)

    dim = config.embedding_dim
    if config.use_fr:
        hidden = dim // config.reduction_ratio
        param("fr.W1", rng.normal(0.0, np.sqrt(1.0 / dim), (dim, hidden)))
        param("fr.W2", rng.normal(0.0, np.sqrt(1.0 / hidden), (hidden, dim)))
        if config.fr_bias:
            param("fr.b1", np.zeros(hidden))
            param("fr.b2", np.zeros(dim))
    if config.use_dln and config.learn_alpha:
        param("dln.alpha", np.array(config.alpha))
    param("classifier.weight", rng.normal(0.0, np.sqrt(1.0 / dim), (dim, config.num_speakers)))
    param("classifier.bias", np.zeros(config.num_speakers))
    return ModelParams(tensors, buffers)


def expected_shapes(config: ModelConfig) -> dict:
    """Shapes of every tensor ``build`` produces, without drawing random numbers."""
    class _Zeros:
        def normal(self, loc, scale, size):
            return np.zeros(size)

    params = build(config, _Zeros())
    shapes = {n: t.shape for n, t in params.tensors.items()}
    shapes.update({n: b.shape for n, b in params.buffers.items()})
    return shapes


def trunk_parameter_count(config: ModelConfig) -> int:
    """Convolution and batch-norm parameters of the trunk (no pooling or classifier)."""
    total = 0
    for name, c_in, c_out, k, _ in _conv_specs(config):
        total += c_in * c_out * k * k + 2 * c_out
    return total


# ------------------------------------------------------------------ building blocks
def _batch_norm(params, name, x, training, config):
    return T.batch_norm(x, params[f"{name}.scale"], params[f"{name}.shift"],
                        params.buffers[f"{name}.running_mean"], params.buffers[f"{name}.running_var"],
                        training, momentum=config.bn_momentum, eps=config.bn_eps)


def _conv_bn(params, name, x, stride, training, config):
    w = params[f"{name}.weight"]
    y = T.conv2d(x, w, stride=stride, padding=w.shape[-1] // 2)
    return _batch_norm(params, _bn_name(name), y, training, config)


def residual_block(params, prefix, x, stride, training, config):
    out = T.relu(_conv_bn(params, f"{prefix}.conv1", x, stride, training, config))
    out = _conv_bn(params, f"{prefix}.conv2", out, 1, training, config)
    if f"{prefix}.proj.weight" in params:
        shortcut = _conv_bn(params, f"{prefix}.proj", x, stride, training, config)
    else:
        shortcut = x
    return T.relu(out + shortcut)


def trunk(params, config, x, training):
    """Return the five tap feature maps: conv1 output and each stage output."""
    h = T.relu(_conv_bn(params, "conv1", x, 1, training, config))
    maps = [h]
    for s, nblocks in enumerate(config.blocks, start=1):
        for b in range(nblocks):
            stride = 2 if (b == 0 and s > 1) else 1
            h = residual_block(params, f"stage{s}.block{b}", h, stride, training, config)
        maps.append(h)
    return maps


def gap_pool(feature_map):
    """Per-channel mean over both spatial axes: ``N×C×D×L -> N×C``."""
    return T.mean_over_axis(feature_map, axis=(-2, -1))


def attention_pool(feature_map, W, b, u):
    """Self-attentive pooling of a ``N×C×D×L`` map; returns (``N×C`` pooled, ``N×L`` weights).

    The map is averaged over frequency into a frame sequence ``y_n``, projected
    to ``h_n = tanh(W y_n + b)``, scored against the context vector ``u`` and
    the ``h_n`` are summed with softmax weights.
    """
    y = T.transpose(T.mean_over_axis(feature_map, axis=-2), (0, 2, 1))  # N×L×C
    h = T.tanh(T.matmul(y, W) + b)
    scores = T.matmul(h, T.reshape(u, (-1, 1)))  # N×L×1
    weights = T.softmax(T.reshape(scores, scores.shape[:2]), axis=1)
    pooled = T.sum_over_axis(h * T.reshape(weights, weights.shape + (1,)), axis=1)
    return pooled, weights


def sap_pool(params, tap, feature_map, config, training, rng=None):
    """Attention pooling followed by dropout and batch norm on the pooled vector."""
    pooled, weights = attention_pool(feature_map, params[f"tap{tap}.sap.W"],
                                     params[f"tap{tap}.sap.b"], params[f"tap{tap}.sap.u"])
    pooled = T.dropout(pooled, config.dropout_rate, training, rng)
    return _batch_norm(params, f"tap{tap}.bn", pooled, training, config), weights


def aggregate(taps, config):
    """Concatenate pooled taps in order."""
    lengths = tuple(t.shape[-1] for t in taps)
    if lengths != tuple(config.tap_channels):
        raise ConfigError(f"{config.encoding_mode} expects tap lengths {config.tap_channels}, got {lengths}")
    return taps[0] if len(taps) == 1 else T.concat(taps, axis=-1)


def feature_recalibrate(V, W1, W2, r, leaky_slope=0.01, b1=None, b2=None):
    """Channel gating ``gate = sigmoid(W2 leaky(W1 V))``; returns ``(V * gate, gate)``."""
    C = V.shape[-1]
    if C % r:
        raise ConfigError(f"feature width {C} is not divisible by reduction ratio {r}")
    if W1.shape != (C, C // r) or W2.shape != (C // r, C):
        raise DimensionError(f"recalibration weights {W1.shape}, {W2.shape} do not fit width {C}, ratio {r}")
    z = T.matmul(V, W1)
    if b1 is not None:
        z = z + b1
    z = T.matmul(T.leaky_relu(z, leaky_slope), W2)
    if b2 is not None:
        z = z + b2
    gate = T.sigmoid(z)
    return V * gate, gate


def deep_length_normalize(V, alpha, eps=1e-12):
    """Rescale each row of ``V`` to L2 norm ``alpha``."""
    norm = T.l2_norm(V, axis=-1, keepdims=True)
    if np.any(norm.data <= eps):
        raise NumericError("length normalisation of a zero vector")
    return V * alpha / norm if isinstance(alpha, Tensor) else V * (float(alpha) / norm)


# ------------------------------------------------------------------ forward
@dataclass
class ForwardResult:
    logits: Tensor
    embeddings: Tensor
    stage_outputs: list = field(default_factory=list)
    taps: list = field(default_factory=list)
    attention: list = field(default_factory=list)
    concat: Tensor | None = None
    gate: Tensor | None = None
    recalibrated: Tensor | None = None
    normalized: Tensor | None = None

    def __iter__(self):
        return iter((self.logits, self.embeddings))


def forward(params, config: ModelConfig, X, training=False, rng=None) -> ForwardResult:
    """Run the network on ``X`` (``N×D×L`` array or tensor, or a single ``D×L``)."""
    x = X if isinstance(X, Tensor) else Tensor(X, dtype=next(iter(params.tensors.values())).dtype)
    if x.ndim == 2:
        x = T.reshape(x, (1,) + x.shape)
    if x.ndim != 3 or x.shape[1] != config.input_dim:
        raise DimensionError(f"expected input N×{config.input_dim}×L, got {x.shape}")
    if x.shape[2] < 8:
        raise DimensionError(f"input length {x.shape[2]} < 8 frames leaves the last stage empty")
    x = T.reshape(x, (x.shape[0], 1) + x.shape[1:])

    maps = trunk(params, config, x, training)
    res = ForwardResult(None, None, stage_outputs=maps)
    sources = maps if config.multi_layer else maps[-1:]
    for i, fmap in enumerate(sources):
        if config.pooling == "sap":
            pooled, weights = sap_pool(params, i + 1, fmap, config, training, rng)
            res.attention.append(weights)
        else:
            pooled = gap_pool(fmap)
        res.taps.append(pooled)
    V = aggregate(res.taps, config)
    res.concat = emb = V
    if config.use_fr:
        emb, res.gate = feature_recalibrate(V, params["fr.W1"], params["fr.W2"], config.reduction_ratio,
                                            config.leaky_slope, params.tensors.get("fr.b1"),
                                            params.tensors.get("fr.b2"))
        res.recalibrated = emb
    if config.use_dln:
        alpha = params["dln.alpha"] if config.learn_alpha else config.alpha
        emb = deep_length_normalize(emb, alpha)
        res.normalized = emb
    res.embeddings = emb
    res.logits = T.matmul(emb, params["classifier.weight"]) + params["classifier.bias"]
    return res
