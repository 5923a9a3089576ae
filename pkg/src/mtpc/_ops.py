"""Array-namespace shim so the numpy and JAX paths share one set of formulas."""

from dataclasses import dataclass
from typing import Any, Callable

import numpy as np


@dataclass(frozen=True)
class Ops:
    xp: Any
    lse: Callable

    def log_softmax(self, z):
        return z - self.lse(z, axis=-1, keepdims=True)


def logsumexp(a, axis=None, keepdims=False):
    """Plain numpy log-sum-exp; tolerates rows that are entirely ``-inf``.

    scipy's version carries enough per-call overhead to dominate decoding
    on small circuits, so the inference path uses this one.
    """
    a = np.asarray(a)
    m = np.max(a, axis=axis, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    with np.errstate(divide="ignore"):
        out = np.log(np.sum(np.exp(a - m), axis=axis, keepdims=True)) + m
    return out if keepdims else np.squeeze(out, axis=axis)


NUMPY = Ops(np, logsumexp)


def jax_ops() -> Ops:
    import jax
    import jax.numpy as jnp

    return Ops(jnp, jax.nn.logsumexp)
