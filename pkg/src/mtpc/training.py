"""Discounted multi-token loss, gradients, gradient checking and Adam.

The loss for offset ``j`` is the draft circuit's in-window conditional
``q(x_{t+j} | x_<=t, x_{t+1..t+j-1})``, a ratio of prefix marginals read
off one batched pass (slots past the prefix are fed ``log 1``).  With
``LossConfig(conditional=False)`` it is the single-slot marginal
``q(x_{t+j} | x_<=t)`` instead.  Windows overlap: every position ``t``
with a supervised target at ``t + j`` contributes.

Gradients come from JAX (float64) on the same formulas the numpy path
uses; :func:`grad_check` compares them against central differences of the
numpy loss.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from functools import lru_cache

import jax

jax.config.update("jax_enable_x64", True)

import jax.numpy as jnp  # noqa: E402
import numpy as np  # noqa: E402

from ._ops import NUMPY, Ops, jax_ops  # noqa: E402
from .circuits import FF, ArchitectureSpec, build  # noqa: E402
from .inference import ContractError, forward  # noqa: E402
from .neural import (  # noqa: E402
    DraftAdapter,
    Model,
    ParamHead,
    TargetSTP,
    dense,
    head_log_params,
    pool,
)
from .teachers import make_teacher  # noqa: E402

JAX = jax_ops()


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class TrainingBatch:
    """Padded token sequences with a per-position supervision mask."""

    tokens: np.ndarray  # (N, T) int
    valid: np.ndarray  # (N, T) bool; position p counts as a prediction target

    def __post_init__(self):
        self.tokens = np.asarray(self.tokens, dtype=np.int64)
        self.valid = np.asarray(self.valid, dtype=bool)
        if self.tokens.shape != self.valid.shape or self.tokens.ndim != 2:
            raise ContractError("tokens and valid mask must be aligned (N, T) arrays")

    @classmethod
    def from_sequences(cls, sequences, valid=None) -> "TrainingBatch":
        T = max(len(s) for s in sequences)
        tokens = np.zeros((len(sequences), T), dtype=np.int64)
        mask = np.zeros((len(sequences), T), dtype=bool)
        for i, s in enumerate(sequences):
            tokens[i, : len(s)] = s
            mask[i, : len(s)] = True if valid is None else np.asarray(valid[i], dtype=bool)
        return cls(tokens, mask)

    def __len__(self):
        return self.tokens.shape[0]

    def subset(self, idx) -> "TrainingBatch":
        return TrainingBatch(self.tokens[idx], self.valid[idx])


@dataclass
class LossConfig:
    gamma: float = 0.9
    weights: tuple | None = None  # explicit per-offset weights override the discount
    conditional: bool = True  # False: single-slot marginals instead of in-window conditionals

    def __post_init__(self):
        if not 0.0 < self.gamma <= 1.0:
            raise ContractError(f"gamma must be in (0, 1], got {self.gamma}")

    def offset_weights(self, n: int) -> np.ndarray:
        if self.weights is not None:
            w = np.asarray(self.weights, dtype=float)
            if w.shape != (n,):
                raise ContractError(f"need {n} offset weights")
            return w
        return self.gamma ** np.arange(n)


@dataclass
class OptimizerConfig:
    lr: float = 3e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    steps: int = 100
    seed: int = 0
    batch_size: int | None = None

    def __post_init__(self):
        if self.lr < 0:
            raise ContractError("learning rate must be non-negative")


# -- the loss ---------------------------------------------------------------


def window_targets(batch: TrainingBatch, n: int):
    """Future tokens ``fut[i, t, j] = x[i, t+j+1]`` and the pair mask."""
    N, T = batch.tokens.shape
    fut = np.zeros((N, T, n), dtype=np.int64)
    mask = np.zeros((N, T, n), dtype=bool)
    for j in range(n):
        s = j + 1
        if s < T:
            fut[:, : T - s, j] = batch.tokens[:, s:]
            mask[:, : T - s, j] = batch.valid[:, s:]
    return fut, mask


def draft_embeddings(t: dict, tokens, L: int, k: int, ops: Ops = NUMPY):
    h = pool(t["backbone.embed"], t["backbone.last_embed"], tokens, ops)
    for l in range(L):
        w, b = t[f"backbone.weight.{l}"], t[f"backbone.bias.{l}"]
        m = l - (L - k)
        if m >= 0:
            w = w + t[f"adapter.down.{m}"] @ t[f"adapter.up.{m}"]
            b = b + t[f"adapter.bias.{m}"]
        h = dense(h, w, b, ops)
    return h


def offset_log_probs(t: dict, circuit, tokens, fut, L: int, k: int, ops: Ops = NUMPY, conditional: bool = True):
    """Per-offset log-probabilities of the observed window tokens.

    With ``conditional`` the term for offset ``j`` is
    ``log q(x_{t+j} | x_<=t, x_{t+1..t+j-1})`` (a ratio of prefix
    marginals), so the undiscounted sum over offsets is the window's joint
    log-likelihood.  Otherwise it is the single-slot marginal
    ``log q(x_{t+j} | x_<=t)``, which never rewards inter-token structure.
    """
    xp = ops.xp
    n = circuit.n
    nsum = len(circuit.sum_shapes)
    e = draft_embeddings(t, tokens, L, k, ops)
    log_phi, log_omega = head_log_params(
        t["head.W"], [t[f"head.R.{s}"] for s in range(nsum)], [t[f"head.bias_R.{s}"] for s in range(nsum)], e, ops
    )
    obs = xp.take_along_axis(log_phi, fut[..., None, None], axis=-1)[..., 0]  # (N, T, n, r)
    # observed[j, i]: window slot i is fed its token in query j
    if conditional:
        observed = np.tri(n, dtype=bool)
    else:
        observed = np.eye(n, dtype=bool)
    leaves = [xp.where(observed[:, i][:, None], obs[:, :, i, None, :], 0.0) for i in range(n)]
    log_omega = [w[:, :, None] for w in log_omega]
    out = forward(circuit, leaves, log_omega, xp, ops.lse)
    if conditional:
        out = out - xp.concatenate([xp.zeros_like(out[..., :1]), out[..., :-1]], axis=-1)
    return out


def loss_terms(t: dict, circuit, tokens, fut, mask, L: int, k: int, ops: Ops = NUMPY, conditional: bool = True):
    """Per-offset losses ``L_j`` (length n)."""
    xp = ops.xp
    marg = offset_log_probs(t, circuit, tokens, fut, L, k, ops, conditional)
    maskf = mask.astype(float)
    count = maskf.sum(axis=1)  # (N, n) = valid(i, j)
    per_seq = -(marg * maskf).sum(axis=1) / xp.maximum(count, 1.0)
    has = (count > 0).astype(float)
    return (per_seq * has).sum(axis=0) / xp.maximum(has.sum(axis=0), 1.0)


def _check_batch(batch: TrainingBatch, n: int):
    fut, mask = window_targets(batch, n)
    if not mask.any():
        raise ContractError("batch has no valid (context, target) pairs")
    return fut, mask


def mtp_loss(model: Model, batch: TrainingBatch, cfg: LossConfig, return_terms: bool = False):
    """Discounted composite loss ``sum_j gamma^(j-1) L_j`` (numpy path)."""
    n = model.circuit.n
    fut, mask = _check_batch(batch, n)
    terms = loss_terms(
        model.tensors(), model.circuit, batch.tokens, fut, mask, model.backbone.L, model.adapter.k, conditional=cfg.conditional
    )
    total = float(np.dot(cfg.offset_weights(n), terms))
    return (total, np.asarray(terms)) if return_terms else total


@lru_cache(maxsize=64)
def _jitted(circuit, L: int, k: int, trainable: tuple, conditional: bool):
    def loss(train, frozen, tokens, fut, mask, weights):
        t = {**frozen, **train}
        terms = loss_terms(t, circuit, tokens, fut, mask, L, k, JAX, conditional)
        return jnp.dot(weights, terms), terms

    return jax.jit(jax.value_and_grad(loss, has_aux=True))


def _split(model: Model, trainable):
    tensors = model.tensors()
    names = tuple(sorted(n for n in tensors if _selected(n, trainable)))
    train = {n: jnp.asarray(tensors[n]) for n in names}
    frozen = {n: jnp.asarray(a) for n, a in tensors.items() if n not in train}
    return names, train, frozen


def _selected(name: str, trainable) -> bool:
    if trainable is None:
        return True
    return any(name == p or name.startswith(p + ".") for p in trainable)


def loss_and_grad(model: Model, batch: TrainingBatch, cfg: LossConfig, trainable=None):
    """Loss, per-offset terms and gradients for the selected tensors.

    ``trainable`` is a list of name prefixes (``"head"``, ``"adapter"``,
    ``"backbone.weight.3"``...); ``None`` selects every tensor.
    """
    n = model.circuit.n
    fut, mask = _check_batch(batch, n)
    names, train, frozen = _split(model, trainable)
    fn = _jitted(model.circuit, model.backbone.L, model.adapter.k, names, cfg.conditional)
    (loss, terms), grads = fn(train, frozen, batch.tokens, fut, mask, jnp.asarray(cfg.offset_weights(n)))
    return float(loss), np.asarray(terms), {k: np.asarray(g) for k, g in grads.items()}


def grad(model: Model, batch: TrainingBatch, cfg: LossConfig, trainable=None) -> dict:
    """Exact gradients of :func:`mtp_loss` keyed by tensor name."""
    return loss_and_grad(model, batch, cfg, trainable)[2]


# -- gradient checking --------------------------------------------------------


def relative_error(analytic: float, numeric: float, floor: float = 1e-6) -> float:
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), floor)


def check_gradient(fun, params: dict, grads: dict, step: float = 1e-5, coords: int | None = 200, rng=None, floor: float = 1e-6):
    """Worst relative error between ``grads`` and central differences of ``fun``.

    ``fun`` maps a dict of arrays to a float.  With ``coords=None`` every
    coordinate is checked, otherwise a seeded random subset of that size
    (or all of them, if there are fewer).
    """
    rng = np.random.default_rng(0) if rng is None else rng
    names = sorted(params)
    sizes = [np.size(params[n]) for n in names]
    total = int(sum(sizes))
    flat = np.arange(total) if coords is None or coords >= total else np.sort(rng.choice(total, size=coords, replace=False))
    offsets = np.cumsum([0] + sizes)
    work = {n: np.array(params[n], dtype=float, copy=True) for n in names}
    worst = 0.0
    for c in flat:
        b = int(np.searchsorted(offsets, c, side="right") - 1)
        name, local = names[b], int(c - offsets[b])
        arr = work[name].reshape(-1)
        orig = arr[local]
        arr[local] = orig + step
        up = fun(work)
        arr[local] = orig - step
        down = fun(work)
        arr[local] = orig
        numeric = (up - down) / (2 * step)
        analytic = float(np.asarray(grads[name]).reshape(-1)[local])
        worst = max(worst, relative_error(analytic, numeric, floor))
    return worst


def grad_check(model: Model, batch: TrainingBatch, cfg: LossConfig, step: float = 1e-5, coords: int | None = 200, seed: int = 0, trainable=None, grads: dict | None = None) -> float:
    """Compare :func:`grad` against central differences of the numpy loss."""
    if grads is None:
        grads = grad(model, batch, cfg, trainable)
    config = model.config()
    base = model.tensors()

    def fun(sub):
        return mtp_loss(Model.from_tensors(config, {**base, **sub}), batch, cfg)

    params = {n: base[n] for n in grads}
    return check_gradient(fun, params, grads, step=step, coords=coords, rng=np.random.default_rng(seed))


# -- optimisation -------------------------------------------------------------


def train(
    model: Model,
    data: TrainingBatch,
    loss_cfg: LossConfig,
    opt_cfg: OptimizerConfig,
    trainable=None,
    log=None,
):
    """Adam on the selected tensors.  Returns ``(model, trace)``.

    ``trace`` holds one ``{"step", "loss", "l_j"}`` record per step (the
    loss of the mini-batch before the update).  ``log`` is an optional
    file-like object receiving the same records as JSON lines.
    """
    if len(data) == 0:
        raise ContractError("training data is empty")
    n = model.circuit.n
    weights = jnp.asarray(loss_cfg.offset_weights(n))
    names, train_t, frozen = _split(model, trainable)
    fn = _jitted(model.circuit, model.backbone.L, model.adapter.k, names, loss_cfg.conditional)
    rng = np.random.default_rng(opt_cfg.seed)
    full = None
    if opt_cfg.batch_size is None or opt_cfg.batch_size >= len(data):
        full = (data.tokens,) + _check_batch(data, n)

    m = {k: jnp.zeros_like(a) for k, a in train_t.items()}
    s = {k: jnp.zeros_like(a) for k, a in train_t.items()}
    b1, b2 = opt_cfg.beta1, opt_cfg.beta2
    trace = []
    for step in range(1, opt_cfg.steps + 1):
        if full is None:
            idx = rng.choice(len(data), size=opt_cfg.batch_size, replace=False)
            sub = data.subset(idx)
            args = (sub.tokens,) + window_targets(sub, n)
            if not args[2].any():
                continue
        else:
            args = full
        (loss, terms), g = fn(train_t, frozen, *args, weights)
        loss = float(loss)
        if not math.isfinite(loss):
            raise TrainingDiverged(f"loss became {loss} at step {step}; per-offset terms {np.asarray(terms).tolist()}")
        rec = {"step": step, "loss": loss, "l_j": [float(x) for x in np.asarray(terms)]}
        trace.append(rec)
        if log is not None:
            log.write(json.dumps(rec) + "\n")
        if opt_cfg.lr == 0:
            continue
        m = {k: b1 * m[k] + (1 - b1) * g[k] for k in g}
        s = {k: b2 * s[k] + (1 - b2) * g[k] ** 2 for k in g}
        c1, c2 = 1 - b1**step, 1 - b2**step
        train_t = {k: train_t[k] - opt_cfg.lr * (m[k] / c1) / (jnp.sqrt(s[k] / c2) + opt_cfg.eps) for k in train_t}
    trained = model.with_tensors({k: np.asarray(a) for k, a in train_t.items()})
    return trained, trace


# -- data -----------------------------------------------------------------------


def distill_dataset(teacher, count: int, length: int, seed: int, prompt_len: int = 0) -> TrainingBatch:
    """Sample ``count`` sequences of ``length`` tokens from a teacher.

    The first ``prompt_len`` positions of every sequence are context only.
    """
    if count < 1 or length < 1:
        raise ContractError("count and length must be >= 1")
    tokens = teacher.sample(count, length, np.random.default_rng(seed))
    valid = np.ones_like(tokens, dtype=bool)
    valid[:, :prompt_len] = False
    return TrainingBatch(tokens, valid)


# -- pipelines used by benchmarks and demos ---------------------------------------


def train_target(data: TrainingBatch, v: int, d: int = 64, L: int = 4, seed: int = 0, steps: int = 300, lr: float = 1e-2, batch_size: int | None = None):
    """Fit backbone + next-token unembedding on teacher samples.

    A single-token target is an FF circuit with n = 1, so this reuses the
    multi-token loss.  Returns ``(backbone, target, trace)``.
    """
    stp = Model.init(ArchitectureSpec(FF, 1, 1, v), d=d, L=L, seed=seed, head_scale=1.0 / np.sqrt(d))
    opt = OptimizerConfig(lr=lr, steps=steps, seed=seed, batch_size=batch_size)
    stp, trace = train(stp, data, LossConfig(1.0), opt, trainable=["backbone", "head"])
    return stp.backbone, TargetSTP(stp.head.W[0, 0].copy()), trace


def ff_head_from_target(target: TargetSTP, n: int) -> ParamHead:
    """Every window position starts as a copy of the next-token unembedding."""
    W = np.repeat(target.U[None, None], n, axis=0)
    return ParamHead(W, [], [])


def teacher_from_config(cfg: dict):
    cfg = dict(cfg)
    kind = cfg.pop("kind")
    v = cfg.pop("v")
    seed = cfg.pop("seed", 0)
    return make_teacher(kind, v, seed, **cfg)


__all__ = [
    "DraftAdapter",
    "LossConfig",
    "OptimizerConfig",
    "TrainingBatch",
    "TrainingDiverged",
    "check_gradient",
    "distill_dataset",
    "ff_head_from_target",
    "grad",
    "grad_check",
    "loss_and_grad",
    "mtp_loss",
    "train",
    "train_target",
]
