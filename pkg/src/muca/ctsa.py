"""Cross teacher-student channel attention on the deepest stage features.

Student V4 supplies the queries, teacher V4 the keys and values. Tokens are
spatial positions (F is d x C, d = h*w); per head the attention is a
channel-by-channel matrix

    A = softmax_rows(instance_norm(q^T k / sqrt(d)))

which mixes the value channels: out = (A v^T)^T. Heads are concatenated to
d x 2C and projected back to C channels by w_out.
"""
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ConfigurationError, DimensionError


@dataclass
class CtsaParams:
    w_q: T.Tensor
    w_k: T.Tensor
    w_v: T.Tensor
    w_out: T.Tensor
    heads: int = 2

    def __post_init__(self):
        c = self.w_q.shape[0]
        if self.heads < 1 or (2 * c) % self.heads:
            raise ConfigurationError(f"heads={self.heads} must be >= 1 and divide 2C={2 * c}")
        for name in ("w_q", "w_k", "w_v"):
            if getattr(self, name).shape != (c, 2 * c):
                raise DimensionError(f"{name} must be {c} x {2 * c}, "
                                     f"got {getattr(self, name).shape}", axis=1)
        if self.w_out.shape != (2 * c, c):
            raise DimensionError(f"w_out must be {2 * c} x {c}, got {self.w_out.shape}", axis=0)

    @property
    def channels(self):
        return self.w_q.shape[0]

    @classmethod
    def init(cls, channels, heads=2, seed=0, requires_grad=True):
        rng = np.random.default_rng(seed)
        c = channels

        def w(shape):
            return T.Tensor(rng.standard_normal(shape) / np.sqrt(shape[0]),
                            requires_grad=requires_grad)

        return cls(w((c, 2 * c)), w((c, 2 * c)), w((c, 2 * c)), w((2 * c, c)), heads)

    def named_parameters(self):
        return [("ctsa.w_q", self.w_q), ("ctsa.w_k", self.w_k),
                ("ctsa.w_v", self.w_v), ("ctsa.w_out", self.w_out)]

    def parameters(self):
        return [p for _, p in self.named_parameters()]


def _tokens(v):
    # (N, C, h, w) -> (N, d, C)
    return T.transpose(T.flatten_spatial(v), (0, 2, 1))


def _split_heads(t, heads):
    # (N, d, 2C) -> (N, heads, d, 2C/heads)
    n, d, c2 = t.shape
    return T.transpose(T.reshape(t, (n, d, heads, c2 // heads)), (0, 2, 1, 3))


def ctsa_forward(params, v4_student, v4_teacher, return_parts=False):
    """Reconstruct student V4 (N, C, h, w) under teacher guidance.

    ``v4_teacher`` should already be detached. With ``return_parts`` also
    returns the attention matrices (N, heads, c', c') and the mixed values
    before the output projection (N, heads, d, c').
    """
    if v4_student.shape != v4_teacher.shape:
        raise DimensionError(f"student {v4_student.shape} and teacher {v4_teacher.shape} "
                             "features differ")
    n, c, h, w = v4_student.shape
    if c != params.channels:
        raise DimensionError(f"features have {c} channels, params expect {params.channels}",
                             axis=1)
    d = h * w
    fs, ft = _tokens(v4_student), _tokens(v4_teacher)
    q = _split_heads(T.matmul(fs, params.w_q), params.heads)
    k = _split_heads(T.matmul(ft, params.w_k), params.heads)
    v = _split_heads(T.matmul(ft, params.w_v), params.heads)
    sim = T.mul_scalar(T.matmul(T.transpose(q, (0, 1, 3, 2)), k), 1.0 / np.sqrt(d))
    attn = T.softmax(T.instance_norm(sim), axis=-1)
    # (A v^T)^T == v A^T
    mixed = T.matmul(v, T.transpose(attn, (0, 1, 3, 2)))
    merged = T.reshape(T.transpose(mixed, (0, 2, 1, 3)), (n, d, 2 * c))
    out = T.matmul(merged, params.w_out)
    out = T.reshape(T.transpose(out, (0, 2, 1)), (n, c, h, w))
    if return_parts:
        return out, attn, mixed
    return out
