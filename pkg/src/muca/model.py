"""Four-stage convolutional encoder with a light multi-scale decoder.

Each stage is conv3x3/2 -> instance norm -> relu -> conv3x3 -> instance norm
-> relu -> dropout, so stage i produces V_i at 1/2**i of the input size.
The decoder projects every V_i to a common width with a 1x1 conv, upsamples
them to V_1's grid, sums, classifies with a 3x3 conv and upsamples x2.
"""
from collections import namedtuple
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ConfigurationError, DimensionError

MODES = ("train", "eval", "mc_sample")

ForwardResult = namedtuple("ForwardResult", ["features", "logits"])


@dataclass(frozen=True)
class StageSpec:
    channels: tuple = (16, 32, 64, 128)
    input_channels: int = 3
    num_classes: int = 5
    decoder_channels: int = 64
    dropout_rate: float = 0.1

    def __post_init__(self):
        object.__setattr__(self, "channels", tuple(int(c) for c in self.channels))
        if len(self.channels) != 4:
            raise ConfigurationError(f"exactly 4 stages required, got {len(self.channels)}")
        if min(self.channels) < 1 or self.input_channels < 1 or self.num_classes < 2:
            raise ConfigurationError("channel and class counts must be positive (K >= 2)")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ConfigurationError(f"dropout rate must be in [0, 1), got {self.dropout_rate}")


def param_kind(name):
    """'weight' (decayed), 'bias' or 'norm' (not decayed)."""
    if ".norm" in name:
        return "norm"
    return "bias" if name.endswith(".bias") else "weight"


def _he(rng, shape, gain=2.0):
    fan_in = int(np.prod(shape[1:]))
    return rng.standard_normal(shape) * np.sqrt(gain / fan_in)


def init_params(spec, rng):
    """Fan-in scaled normal weights, zero biases, unit norm scales."""
    p = {}
    c_in = spec.input_channels
    for i, c in enumerate(spec.channels, start=1):
        p[f"s{i}.conv1.weight"] = _he(rng, (c, c_in, 3, 3))
        p[f"s{i}.norm1.weight"] = np.ones(c)
        p[f"s{i}.norm1.bias"] = np.zeros(c)
        p[f"s{i}.conv2.weight"] = _he(rng, (c, c, 3, 3))
        p[f"s{i}.norm2.weight"] = np.ones(c)
        p[f"s{i}.norm2.bias"] = np.zeros(c)
        c_in = c
    d = spec.decoder_channels
    for i, c in enumerate(spec.channels, start=1):
        p[f"dec.proj{i}.weight"] = _he(rng, (d, c, 1, 1), gain=1.0)
        p[f"dec.proj{i}.bias"] = np.zeros(d)
    p["dec.cls.weight"] = _he(rng, (spec.num_classes, d, 3, 3))
    p["dec.cls.bias"] = np.zeros(spec.num_classes)
    return p


class SegModel:
    """Encoder-decoder parameter set; instantiated once as student, once as teacher."""

    def __init__(self, spec=None, seed=0, params=None, requires_grad=True):
        self.spec = spec or StageSpec()
        if params is None:
            params = init_params(self.spec, np.random.default_rng(seed))
        self.params = {k: T.Tensor(v, requires_grad=requires_grad, name=k)
                       for k, v in params.items()}

    @property
    def dropout_rate(self):
        return self.spec.dropout_rate

    def parameters(self):
        return list(self.params.values())

    def named_parameters(self):
        return list(self.params.items())

    def num_parameters(self):
        return sum(p.data.size for p in self.params.values())

    def copy(self, requires_grad=None):
        rg = self.parameters()[0].requires_grad if requires_grad is None else requires_grad
        return SegModel(self.spec, params={k: v.data.copy() for k, v in self.params.items()},
                        requires_grad=rg)

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None

    # ------------------------------------------------------------------ encoder

    def encode(self, x, mode="eval", rng=None, repeats=1):
        """Stage features [V1..V4].

        ``repeats`` > 1 (MC sampling only) returns features for the batch tiled
        ``repeats`` times along N. The first stage up to its dropout is
        deterministic, so it is computed once and tiled before the dropout.
        """
        if mode not in MODES:
            raise ConfigurationError(f"mode must be one of {MODES}, got {mode!r}")
        x = T.as_tensor(x)
        if x.ndim != 4 or x.shape[1] != self.spec.input_channels:
            raise DimensionError(f"expected N x {self.spec.input_channels} x H x W input, "
                                 f"got {x.shape}", axis=1)
        h, w = x.shape[2:]
        if h % 16 or w % 16:
            raise ConfigurationError(f"input size {h}x{w} must be divisible by 16")
        stochastic = mode != "eval" and self.spec.dropout_rate > 0
        if stochastic and rng is None:
            raise ConfigurationError(f"mode {mode!r} needs an rng for dropout")
        if repeats != 1 and (mode != "mc_sample" or T.grad_enabled() or repeats < 1):
            raise ConfigurationError("repeats needs mode 'mc_sample' under no_grad")
        p = self.params
        feats = []
        for i in range(1, 5):
            x = T.conv2d(x, p[f"s{i}.conv1.weight"], stride=2)
            x = T.relu(T.instance_norm(x, p[f"s{i}.norm1.weight"], p[f"s{i}.norm1.bias"]))
            x = T.conv2d(x, p[f"s{i}.conv2.weight"], stride=1)
            x = T.relu(T.instance_norm(x, p[f"s{i}.norm2.weight"], p[f"s{i}.norm2.bias"]))
            if i == 1 and repeats > 1:
                x = T.Tensor._wrap(np.concatenate([x.data] * repeats, axis=0))
            if stochastic:
                x = T.dropout(x, self.spec.dropout_rate, rng)
            feats.append(x)
        return feats

    # ------------------------------------------------------------------ decoder

    def decode(self, features):
        """Logits at 16x the V4 resolution from stage features [V1..V4]."""
        if len(features) != 4:
            raise DimensionError(f"decode needs 4 stage features, got {len(features)}", axis=0)
        v1 = features[0]
        if v1.ndim != 4:
            raise DimensionError(f"stage features must be NCHW, got {v1.shape}")
        n, _, h1, w1 = v1.shape
        for i, (v, c) in enumerate(zip(features, self.spec.channels)):
            want = (n, c, h1 >> i, w1 >> i)
            if v.shape != want or (h1 >> i) << i != h1 or (w1 >> i) << i != w1:
                axis = next((a for a in range(4) if v.shape[a] != want[a]), 3)
                raise DimensionError(f"stage {i + 1} feature shape {v.shape}, expected {want}",
                                     axis=axis)
        p = self.params
        fused = None
        for i, v in enumerate(features, start=1):
            y = T.conv2d(v, p[f"dec.proj{i}.weight"], p[f"dec.proj{i}.bias"])
            y = T.bilinear_upsample(y, 2 ** (i - 1))
            fused = y if fused is None else T.add(fused, y)
        logits = T.conv2d(T.relu(fused), p["dec.cls.weight"], p["dec.cls.bias"])
        return T.bilinear_upsample(logits, 2)

    def forward(self, x, mode="eval", rng=None, repeats=1):
        feats = self.encode(x, mode, rng, repeats)
        return ForwardResult(feats, self.decode(feats))

    __call__ = forward

    def predict(self, x):
        """Eval-mode argmax labels (N, H, W), no tape."""
        with T.no_grad():
            logits = self.forward(x, "eval").logits.data
        return logits.argmax(axis=1).astype(np.uint8)


def forward(model, x, mode="eval", rng=None):
    return model.forward(x, mode, rng)


def decode(model, features):
    return model.decode(features)
