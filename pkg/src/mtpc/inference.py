"""Exact inference on parameterized circuits.

Everything is computed in log space.  The feed-forward pass
(:func:`forward`) takes one array of log input values per window position,
with arbitrary leading batch dimensions, so marginals, conditionals and
full enumeration are all a single batched pass.  A marginalized position
feeds ``log 1 = 0`` into its input units.

:func:`forward` is written against an array namespace so the training code
can run the same pass under JAX.
"""

from __future__ import annotations

import csv
import itertools
from dataclasses import dataclass

import numpy as np

from ._ops import logsumexp
from .circuits import INPUT, PRODUCT, SUM, Circuit

MAX_ENUMERATION = 10**6


class ContractError(ValueError):
    """Raised when arguments violate an operation's preconditions."""


@dataclass
class CircuitParams:
    """Input categoricals ``phi`` (n, r, v) and one row-stochastic table per sum layer."""

    phi: np.ndarray
    omega: list

    def log_phi(self) -> np.ndarray:
        with np.errstate(divide="ignore"):
            return np.log(self.phi)

    def log_omega(self) -> list:
        with np.errstate(divide="ignore"):
            return [np.log(w) for w in self.omega]

    def check_simplex(self, atol: float = 1e-9) -> None:
        for name, rows in [("phi", self.phi)] + [(f"omega[{k}]", w) for k, w in enumerate(self.omega)]:
            rows = np.asarray(rows)
            if np.any(rows < 0):
                raise ContractError(f"{name} has negative entries")
            if not np.allclose(rows.sum(-1), 1.0, rtol=0, atol=atol):
                raise ContractError(f"{name} rows do not sum to 1")


def check_params(circuit: Circuit, params: CircuitParams) -> None:
    if tuple(np.shape(params.phi)) != circuit.phi_shape:
        raise ContractError(f"phi has shape {np.shape(params.phi)}, circuit needs {circuit.phi_shape}")
    if len(params.omega) != len(circuit.sum_shapes):
        raise ContractError(f"circuit has {len(circuit.sum_shapes)} sum tables, got {len(params.omega)}")
    for k, (w, shape) in enumerate(zip(params.omega, circuit.sum_shapes)):
        if tuple(np.shape(w)) != tuple(shape):
            raise ContractError(f"omega[{k}] has shape {np.shape(w)}, circuit needs {shape}")


def _check_tokens(circuit: Circuit, tokens, length=None) -> np.ndarray:
    tokens = np.asarray(tokens, dtype=np.int64)
    if tokens.ndim != 1:
        raise ContractError("token window must be one-dimensional")
    if length is not None and tokens.shape[0] != length:
        raise ContractError(f"window has {tokens.shape[0]} tokens, expected {length}")
    if np.any(tokens < 0) or np.any(tokens >= circuit.v):
        raise ContractError(f"token ids must lie in [0, {circuit.v})")
    return tokens


def uniform_params(circuit: Circuit) -> CircuitParams:
    n, r, v = circuit.phi_shape
    phi = np.full((n, r, v), 1.0 / v)
    omega = [np.full(shape, 1.0 / shape[1]) for shape in circuit.sum_shapes]
    return CircuitParams(phi, omega)


def random_params(circuit: Circuit, rng: np.random.Generator, scale: float = 1.0) -> CircuitParams:
    """Softmax of Gaussian logits; ``scale`` sets how peaked the rows are."""

    def softmax(z):
        z = z - z.max(-1, keepdims=True)
        e = np.exp(z)
        return e / e.sum(-1, keepdims=True)

    phi = softmax(scale * rng.standard_normal(circuit.phi_shape))
    omega = [softmax(scale * rng.standard_normal(shape)) for shape in circuit.sum_shapes]
    return CircuitParams(phi, omega)


def forward(circuit: Circuit, leaves, log_omega, xp=np, lse=logsumexp):
    """Feed-forward pass in log space.

    ``leaves[i]`` holds the log outputs of the input units of position
    ``i`` with shape ``(..., r)``.  ``log_omega[k]`` has shape
    ``(..., out, in)`` and broadcasts against the leaf batch dimensions.
    Returns the log value of the root unit with the batch shape.
    """
    values = [None] * len(circuit.layers)
    for idx, layer in enumerate(circuit.layers):
        if layer.kind == INPUT:
            val = leaves[layer.position][..., : layer.width]
        elif layer.kind == PRODUCT:
            val = values[layer.inputs[0]]
            for j in layer.inputs[1:]:
                val = val + values[j]
        elif layer.kind == SUM:
            if len(layer.inputs) == 1:
                x = values[layer.inputs[0]]
            else:
                x = xp.concatenate([values[j] for j in layer.inputs], axis=-1)
            val = lse(log_omega[layer.table_id] + x[..., None, :], axis=-1)
        else:
            raise ContractError(f"unknown layer kind {layer.kind!r}")
        values[idx] = val
    return values[circuit.output][..., 0]


def evaluate(circuit: Circuit, params: CircuitParams, window) -> float:
    """Log probability of a full window."""
    check_params(circuit, params)
    x = _check_tokens(circuit, window, circuit.n)
    log_phi = params.log_phi()
    leaves = [log_phi[i, :, x[i]] for i in range(circuit.n)]
    return float(forward(circuit, leaves, params.log_omega()))


def partition(circuit: Circuit, params: CircuitParams) -> float:
    """Log partition function; inputs output their total mass."""
    check_params(circuit, params)
    leaves = list(logsumexp(params.log_phi(), axis=-1))
    return float(forward(circuit, leaves, params.log_omega()))


def prefix_marginals(circuit: Circuit, params: CircuitParams, window) -> np.ndarray:
    """``out[i-1] = log q(x_1..x_i)`` for ``i = 1..n``, from one batched pass."""
    check_params(circuit, params)
    x = _check_tokens(circuit, window, circuit.n)
    n = circuit.n
    log_phi = params.log_phi()
    observed = np.arange(n)[None, :] <= np.arange(n)[:, None]  # [prefix length - 1, position]
    leaves = []
    for i in range(n):
        obs = observed[:, i][:, None]
        leaves.append(np.where(obs, log_phi[i, :, x[i]][None, :], 0.0))
    return np.asarray(forward(circuit, leaves, params.log_omega()), dtype=float)


def conditionals_from_prefix(pm) -> np.ndarray:
    """``log q(x_i | x_<i) = pm[i] - pm[i-1]`` with ``pm[0] = 0``."""
    pm = np.asarray(pm, dtype=float)
    prev = np.concatenate([[0.0], pm[:-1]])
    bad = np.isneginf(prev) & np.isfinite(pm)
    if np.any(bad):
        raise ContractError("a zero-mass prefix cannot have a positive-mass extension")
    with np.errstate(invalid="ignore"):
        out = pm - prev
    # -inf - -inf: the conditional of an impossible prefix stays impossible
    return np.where(np.isneginf(prev), -np.inf, out)


def conditional_distribution(circuit: Circuit, params: CircuitParams, prefix) -> np.ndarray:
    """Log of ``q(x_{k+1} = . | x_1..x_k)`` over the vocabulary, ``k = len(prefix) < n``."""
    check_params(circuit, params)
    prefix = np.asarray(prefix, dtype=np.int64)
    k = prefix.shape[0]
    if k >= circuit.n:
        raise ContractError(f"prefix of length {k} leaves no position in a window of {circuit.n}")
    _check_tokens(circuit, prefix)
    log_phi = params.log_phi()
    v = circuit.v
    leaves = []
    for i in range(circuit.n):
        if i < k:
            leaves.append(np.broadcast_to(log_phi[i, :, prefix[i]], (v, circuit.r)))
        elif i == k:
            leaves.append(log_phi[i].T)
        else:
            leaves.append(np.zeros((1, circuit.r)))
    joint = np.asarray(forward(circuit, leaves, params.log_omega()), dtype=float)
    total = logsumexp(joint)
    if np.isneginf(total):
        raise ContractError("prefix has zero probability")
    return joint - total


def _categorical(rows: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """One draw per row of a (N, k) probability matrix."""
    cdf = np.cumsum(rows, axis=-1)
    u = rng.random(rows.shape[0]) * cdf[:, -1]
    idx = (cdf <= u[:, None]).sum(axis=-1)
    return np.minimum(idx, rows.shape[1] - 1)


def sample_window(circuit: Circuit, params: CircuitParams, rng: np.random.Generator, size: int | None = None):
    """Ancestral sampling by a top-down pass over the layers.

    Each sum unit picks one input in proportion to its weights, product
    units visit all inputs, and every reached input unit draws a token.
    Returns one window, or an array of ``size`` windows.
    """
    check_params(circuit, params)
    if size is None:
        return _sample_one(circuit, params, rng)
    count = int(size)
    layers = circuit.layers
    units = [None] * len(layers)
    units[circuit.output] = np.zeros(count, dtype=np.int64)
    out = np.full((count, circuit.n), -1, dtype=np.int64)

    def assign(j, sel, idx):
        if units[j] is None:
            units[j] = np.full(count, -1, dtype=np.int64)
        units[j][sel] = idx

    for li in range(len(layers) - 1, -1, -1):
        u = units[li]
        if u is None:
            continue
        sel = np.nonzero(u >= 0)[0]
        if sel.size == 0:
            continue
        layer = layers[li]
        if layer.kind == INPUT:
            rows = params.phi[layer.position][u[sel]]
            out[sel, layer.position] = _categorical(rows, rng)
        elif layer.kind == PRODUCT:
            for j in layer.inputs:
                assign(j, sel, np.minimum(u[sel], layers[j].width - 1))
        elif layer.kind == SUM:
            rows = np.asarray(params.omega[layer.table_id])[u[sel]]
            pick = _categorical(rows, rng)
            offset = 0
            for j in layer.inputs:
                w = layers[j].width
                hit = (pick >= offset) & (pick < offset + w)
                assign(j, sel[hit], pick[hit] - offset)
                offset += w
    if np.any(out < 0):
        raise ContractError("sampling did not reach every position; circuit is not smooth and decomposable")
    return out[0] if size is None else out


def _sample_one(circuit: Circuit, params: CircuitParams, rng: np.random.Generator) -> np.ndarray:
    """Scalar top-down walk; same law as the batched sampler, far less overhead."""
    layers = circuit.layers
    out = np.full(circuit.n, -1, dtype=np.int64)
    stack = [(circuit.output, 0)]
    while stack:
        li, unit = stack.pop()
        layer = layers[li]
        if layer.kind == INPUT:
            cdf = params.phi[layer.position][unit].cumsum()
            out[layer.position] = min(int(cdf.searchsorted(rng.random() * cdf[-1], side="right")), circuit.v - 1)
        elif layer.kind == PRODUCT:
            stack.extend((j, min(unit, layers[j].width - 1)) for j in layer.inputs)
        else:
            cdf = params.omega[layer.table_id][unit].cumsum()
            pick = min(int(cdf.searchsorted(rng.random() * cdf[-1], side="right")), cdf.shape[0] - 1)
            for j in layer.inputs:
                w = layers[j].width
                if pick < w:
                    stack.append((j, pick))
                    break
                pick -= w
    if (out < 0).any():
        raise ContractError("sampling did not reach every position; circuit is not smooth and decomposable")
    return out


def greedy_window(circuit: Circuit, params: CircuitParams) -> np.ndarray:
    """Chained conditional argmax, ties to the smallest token id."""
    chosen = []
    for _ in range(circuit.n):
        cond = conditional_distribution(circuit, params, chosen)
        chosen.append(int(np.argmax(cond)))
    return np.asarray(chosen, dtype=np.int64)


def all_windows(n: int, v: int) -> np.ndarray:
    """Every window in lexicographic order, shape (v**n, n)."""
    return np.asarray(list(itertools.product(range(v), repeat=n)), dtype=np.int64).reshape(-1, n)


def enumerate_joint(circuit: Circuit, params: CircuitParams, chunk: int = 65536) -> np.ndarray:
    """Probability of every window as an array of shape ``(v,) * n``."""
    check_params(circuit, params)
    n, v = circuit.n, circuit.v
    if v**n > MAX_ENUMERATION:
        raise ContractError(f"v**n = {v**n} exceeds the enumeration guard of {MAX_ENUMERATION}")
    windows = all_windows(n, v)
    log_phi = params.log_phi()
    log_omega = params.log_omega()
    out = np.empty(windows.shape[0])
    for start in range(0, windows.shape[0], chunk):
        w = windows[start : start + chunk]
        leaves = [log_phi[i][:, w[:, i]].T for i in range(n)]
        out[start : start + chunk] = forward(circuit, leaves, log_omega)
    return np.exp(out).reshape((v,) * n)


def dump_joint_csv(table: np.ndarray, path) -> None:
    n = table.ndim
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow([f"x{i + 1}" for i in range(n)] + ["probability"])
        for idx in itertools.product(*(range(s) for s in table.shape)):
            writer.writerow(list(idx) + [repr(float(table[idx]))])
