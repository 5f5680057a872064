"""Central finite-difference check of tape gradients (float64 only)."""
import numpy as np

from . import tensor as T


def numeric_grad(f, arrays, index, h=1e-3):
    """d f / d arrays[index] by central differences; ``f`` maps arrays to a float."""
    base = [a.copy() for a in arrays]
    x = base[index]
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = x[i]
        x[i] = old + h
        fp = f(base)
        x[i] = old - h
        fm = f(base)
        x[i] = old
        g[i] = (fp - fm) / (2 * h)
    return g


def relative_error(a, b):
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    denom = max(np.linalg.norm(a), np.linalg.norm(b), 1e-12)
    return float(np.linalg.norm(a - b) / denom)


def check(op, arrays, h=1e-3, seed=0):
    """Compare tape gradients of ``op`` against finite differences.

    ``op`` takes Tensors and returns a Tensor. The output is contracted with a
    fixed random projection so every output element matters. Returns the
    worst relative error across inputs.
    """
    arrays = [np.asarray(a, dtype=np.float64) for a in arrays]
    with T.float64_mode():
        probe = op(*[T.Tensor(a) for a in arrays]).data
        proj = np.random.default_rng(seed).standard_normal(probe.shape)

        def scalar(arrs):
            with T.no_grad():
                return float((op(*[T.Tensor(a) for a in arrs]).data * proj).sum())

        leaves = [T.Tensor(a, requires_grad=True) for a in arrays]
        out = op(*leaves)
        loss = T.sum(T.mul(out, T.Tensor(proj)))
        T.backward(loss)
        worst = 0.0
        for i, leaf in enumerate(leaves):
            analytic = leaf.grad if leaf.grad is not None else np.zeros_like(arrays[i])
            worst = max(worst, relative_error(analytic, numeric_grad(scalar, arrays, i, h)))
    return worst
