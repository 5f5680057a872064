"""Mean-teacher coupling: EMA weights, MC-dropout entropy, threshold ramp."""
import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ConfigurationError

LN2 = math.log(2.0)


@dataclass
class EmaState:
    alpha: float = 0.99
    step: int = 0

    def __post_init__(self):
        if not 0.0 <= self.alpha <= 1.0:
            raise ConfigurationError(f"EMA decay must lie in [0, 1], got {self.alpha}")


def ema_update(teacher, student, state):
    """teacher <- alpha * teacher + (1 - alpha) * student, parameter by parameter."""
    tp, sp = teacher.named_parameters(), student.named_parameters()
    if len(tp) != len(sp):
        raise ConfigurationError(f"teacher has {len(tp)} parameters, student {len(sp)}")
    for (tn, t), (sn, s) in zip(tp, sp):
        if tn != sn or t.shape != s.shape:
            raise ConfigurationError(f"parameter mismatch: {tn}{t.shape} vs {sn}{s.shape}")
        a = t.data.dtype.type(state.alpha)
        b = t.data.dtype.type(1.0 - state.alpha)
        t.data = t.data * a + s.data * b
        t.grad = None
    state.step += 1


@dataclass
class UncertaintyField:
    entropy: np.ndarray     # (N, H, W), nats
    pyramid: list           # four maps at V1..V4 resolution
    mean_probs: np.ndarray  # (N, K, H, W)


def predictive_entropy(mean_probs, axis=1):
    """-sum_k u_k log u_k with 0 log 0 = 0, clipped to [0, ln K]."""
    u = np.asarray(mean_probs, dtype=np.float64)
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(u > 0, u * np.log(u), 0.0)
    k = u.shape[axis]
    return np.clip(-terms.sum(axis=axis), 0.0, math.log(k))


def entropy_pyramid(entropy, levels=4):
    """Chain of 2x2 average pools: level i sits at 1/2**i of the map size."""
    out, cur = [], np.asarray(entropy, dtype=np.float64)
    for _ in range(levels):
        n, h, w = cur.shape
        cur = cur.reshape(n, h // 2, 2, w // 2, 2).mean(axis=(2, 4))
        out.append(cur)
    return out


def uncertainty_from_probs(prob_samples):
    """Field from T stacked softmax maps of shape (T, N, K, H, W)."""
    samples = np.asarray(prob_samples, dtype=np.float64)
    mean = samples[0].copy()
    for p in samples[1:]:
        mean += p
    mean /= samples.shape[0]
    ent = predictive_entropy(mean)
    return UncertaintyField(ent, entropy_pyramid(ent), mean)


def estimate_uncertainty(teacher, x_weak, passes, rng):
    """MC-dropout entropy from ``passes`` stochastic teacher forwards."""
    if passes < 2:
        raise ConfigurationError(f"need at least 2 MC passes, got {passes}")
    x = np.asarray(x_weak.data if isinstance(x_weak, T.Tensor) else x_weak)
    n = x.shape[0]
    with T.no_grad():
        logits = teacher.forward(T.Tensor(x), "mc_sample", rng, repeats=passes).logits
        probs = T.softmax(logits, axis=1).data
    return uncertainty_from_probs(probs.reshape(passes, n, *probs.shape[1:]))


@dataclass(frozen=True)
class ThresholdSchedule:
    h_max: float = LN2
    total_steps: int = 1

    def at(self, step):
        return threshold_at(self, step)


def threshold_at(schedule, step):
    """Gaussian ramp from ~h_max/2 at step 0 to h_max at total_steps.

    Steps outside [0, total_steps] are clamped.
    """
    total = max(int(schedule.total_steps), 0)
    if total == 0:
        return float(schedule.h_max)
    t = min(max(step, 0), total) / total
    return float(schedule.h_max * (0.5 + 0.5 * math.exp(-5.0 * (1.0 - t) ** 2)))
