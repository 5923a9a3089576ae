"""Context encoder, circuit parameter heads, target head and checkpoints.

The toy backbone pools a prefix into one vector per position (causal mean
of token embeddings plus an embedding of the newest token) and pushes it
through ``L`` residual dense layers ``h <- h + tanh(h W + b)``.  A draft
adapter adds low-rank deltas to the weights of the last ``k`` layers, so
the first ``L - k`` layers are shared between verifier and draft.

The array functions at the top take an :class:`~mtpc._ops.Ops` so the same
formulas run under numpy (inference) and JAX (training).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from ._ops import NUMPY, Ops
from .circuits import BTREE, CP, FF, HMM, ArchitectureSpec, Circuit, build
from .inference import CircuitParams, ContractError

CKPT_FORMAT = "mtpc-ckpt-1"


# -- array-level formulas ---------------------------------------------------


def pool(embed, last_embed, tokens, ops: Ops = NUMPY, prefix_sum=None, prefix_count=0):
    """Pooled input for every position of ``tokens`` (..., T) -> (..., T, d).

    ``prefix_sum``/``prefix_count`` continue a running mean over tokens that
    precede the block.
    """
    xp = ops.xp
    e = embed[tokens]
    csum = xp.cumsum(e, axis=-2)
    if prefix_sum is not None:
        csum = csum + prefix_sum
    count = prefix_count + xp.arange(1, tokens.shape[-1] + 1, dtype=e.dtype)
    return csum / count[:, None] + last_embed[tokens]


def dense(h, weight, bias, ops: Ops = NUMPY):
    return h + ops.xp.tanh(h @ weight + bias)


def run_layers(h, weights, biases, ops: Ops = NUMPY, deltas=None):
    """Apply layers in order; ``deltas`` is an optional list of (down, up, bias) per layer."""
    for idx, (w, b) in enumerate(zip(weights, biases)):
        if deltas is not None and deltas[idx] is not None:
            down, up, db = deltas[idx]
            w = w + down @ up
            b = b + db
        h = dense(h, w, b, ops)
    return h


def head_log_params(W, R, bias_R, e, ops: Ops = NUMPY):
    """Log circuit parameters from embeddings ``e`` (..., d).

    Returns ``log_phi`` (..., n, r, v) and a list of log sum tables
    (..., out, in).
    """
    xp = ops.xp
    log_phi = ops.log_softmax(xp.einsum("nrvd,...d->...nrv", W, e))
    log_omega = [ops.log_softmax(xp.einsum("oid,...d->...oi", R_s, e) + b_s) for R_s, b_s in zip(R, bias_R)]
    return log_phi, log_omega


# -- model components --------------------------------------------------------


@dataclass
class ToyBackbone:
    embed: np.ndarray
    last_embed: np.ndarray
    weights: list
    biases: list

    @property
    def d(self) -> int:
        return self.embed.shape[1]

    @property
    def v(self) -> int:
        return self.embed.shape[0]

    @property
    def L(self) -> int:
        return len(self.weights)

    @classmethod
    def init(cls, v: int, d: int = 64, L: int = 4, rng: np.random.Generator | None = None, gain: float = 1.0):
        rng = np.random.default_rng(0) if rng is None else rng
        return cls(
            embed=rng.standard_normal((v, d)),
            last_embed=rng.standard_normal((v, d)),
            weights=[gain * rng.standard_normal((d, d)) / np.sqrt(d) for _ in range(L)],
            biases=[np.zeros(d) for _ in range(L)],
        )

    def check_prefix(self, prefix) -> np.ndarray:
        prefix = np.asarray(prefix, dtype=np.int64)
        if prefix.ndim != 1 or prefix.shape[0] == 0:
            raise ContractError("prefix must be a non-empty token sequence")
        if np.any(prefix < 0) or np.any(prefix >= self.v):
            raise ContractError(f"token ids must lie in [0, {self.v})")
        return prefix

    def pooled(self, prefix) -> np.ndarray:
        """Pooled input of the last prefix position."""
        prefix = self.check_prefix(prefix)
        return self.embed[prefix].mean(axis=0) + self.last_embed[prefix[-1]]

    def layers(self, h, start: int = 0, stop: int | None = None, adapter: "DraftAdapter | None" = None):
        stop = self.L if stop is None else stop
        deltas = None if adapter is None else [adapter.delta_for(l, self.L) for l in range(start, stop)]
        return run_layers(h, self.weights[start:stop], self.biases[start:stop], deltas=deltas)


@dataclass
class DraftAdapter:
    """Private low-rank deltas on the last ``k`` layers."""

    k: int
    down: list = field(default_factory=list)
    up: list = field(default_factory=list)
    bias: list = field(default_factory=list)

    @classmethod
    def init(cls, d: int, k: int, rho: int = 4, rng: np.random.Generator | None = None, zero: bool = True):
        """LoRA-style init: random ``down``, zero ``up`` (so the delta starts at zero)."""
        rng = np.random.default_rng(0) if rng is None else rng
        down = [rng.standard_normal((d, rho)) / np.sqrt(d) for _ in range(k)]
        up = [np.zeros((rho, d)) if zero else rng.standard_normal((rho, d)) / np.sqrt(rho) for _ in range(k)]
        return cls(k=k, down=down, up=up, bias=[np.zeros(d) for _ in range(k)])

    @property
    def rho(self) -> int:
        return self.down[0].shape[1] if self.down else 0

    def delta_for(self, layer: int, L: int):
        m = layer - (L - self.k)
        if m < 0:
            return None
        return self.down[m], self.up[m], self.bias[m]


def encode(backbone: ToyBackbone, prefix, return_activations: bool = False):
    """Verifier embedding of the last prefix position."""
    h = backbone.pooled(prefix)
    acts = [h]
    for l in range(backbone.L):
        h = backbone.layers(h, l, l + 1)
        acts.append(h)
    return (h, acts) if return_activations else h


def encode_draft(backbone: ToyBackbone, adapter: DraftAdapter | None, prefix, return_activations: bool = False):
    """Draft embedding: shared layers ``[0, L-k)`` then adapted private layers."""
    if adapter is not None and not 0 <= adapter.k <= backbone.L:
        raise ContractError(f"adapter depth {adapter.k} outside [0, {backbone.L}]")
    h = backbone.pooled(prefix)
    acts = [h]
    for l in range(backbone.L):
        h = backbone.layers(h, l, l + 1, adapter=adapter)
        acts.append(h)
    return (h, acts) if return_activations else h


@dataclass
class ParamHead:
    """Maps an embedding to circuit parameters.

    ``W`` is (n, r, v, d); ``R[s]`` is (out, in, d) and ``bias_R[s]`` is
    (out, in) for sum table ``s``.
    """

    W: np.ndarray
    R: list
    bias_R: list

    @classmethod
    def init(cls, circuit: Circuit, d: int, rng: np.random.Generator | None = None, scale: float = 0.02):
        rng = np.random.default_rng(0) if rng is None else rng
        n, r, v = circuit.phi_shape
        return cls(
            W=scale * rng.standard_normal((n, r, v, d)),
            R=[scale * rng.standard_normal((o, i, d)) for o, i in circuit.sum_shapes],
            bias_R=[np.zeros((o, i)) for o, i in circuit.sum_shapes],
        )

    def check(self, circuit: Circuit) -> None:
        if self.W.shape[:3] != circuit.phi_shape:
            raise ContractError(f"W has shape {self.W.shape}, circuit needs {circuit.phi_shape} x d")
        if len(self.R) != len(circuit.sum_shapes) or len(self.bias_R) != len(circuit.sum_shapes):
            raise ContractError("head needs one R and one bias per sum table")
        d = self.W.shape[3]
        for s, shape in enumerate(circuit.sum_shapes):
            if self.R[s].shape != (*shape, d) or self.bias_R[s].shape != tuple(shape):
                raise ContractError(f"sum table {s}: head shapes do not match {shape}")


def parameterize(head: ParamHead, circuit: Circuit, e) -> CircuitParams:
    head.check(circuit)
    e = np.asarray(e, dtype=float)
    if e.shape != (head.W.shape[3],):
        raise ContractError(f"embedding must have shape ({head.W.shape[3]},)")
    log_phi, log_omega = head_log_params(head.W, head.R, head.bias_R, e)
    return CircuitParams(np.exp(log_phi), [np.exp(w) for w in log_omega])


@dataclass
class TargetSTP:
    U: np.ndarray  # (v, d)


def target_next_dist(target: TargetSTP, e) -> np.ndarray:
    logits = target.U @ np.asarray(e, dtype=float)
    logits = logits - logits.max()
    p = np.exp(logits)
    return p / p.sum()


# -- initialisation schemes --------------------------------------------------


def init_cp_from_ff(ff_head: ParamHead, r: int, rng: np.random.Generator, std: float = 0.02) -> ParamHead:
    """Replicate FF emissions across ``r`` components; small random mixture logits.

    Components are identical, so the induced joint equals the FF joint for
    every context whatever the mixture weights are.
    """
    if ff_head.W.shape[1] != 1:
        raise ContractError("init_cp_from_ff expects a rank-1 head")
    if r == 1:
        return ParamHead(ff_head.W.copy(), [np.zeros((1, 1, ff_head.W.shape[3]))], [np.zeros((1, 1))])
    n, _, v, d = ff_head.W.shape
    W = np.repeat(ff_head.W, r, axis=1)
    R = [std * rng.standard_normal((1, r, d))]
    bias = [std * rng.standard_normal((1, r))]
    return ParamHead(W, R, bias)


def init_hmm_identity(cp_head: ParamHead, beta: float = 10.0) -> ParamHead:
    """HMM head whose transitions start near the identity.

    Emissions and the prior come from the CP head; every transition table
    gets ``R = 0`` and a bias of ``beta`` on the diagonal.
    """
    # beta = 0 is allowed and gives uniform transitions
    if beta < 0:
        raise ContractError("beta must be non-negative")
    n, r, v, d = cp_head.W.shape
    if len(cp_head.R) != 1 or cp_head.R[0].shape != (1, r, d):
        raise ContractError("init_hmm_identity expects a CP head")
    transitions = [np.zeros((r, r, d)) for _ in range(n - 1)]
    biases = [beta * np.eye(r) for _ in range(n - 1)]
    return ParamHead(cp_head.W.copy(), transitions + [cp_head.R[0].copy()], biases + [cp_head.bias_R[0].copy()])


def init_btree_from_ff(ff_head: ParamHead, r: int, beta: float, rng: np.random.Generator, std: float = 0.02) -> ParamHead:
    """Replicated leaf emissions, identity-biased internal sums, small random root."""
    if ff_head.W.shape[1] != 1:
        raise ContractError("init_btree_from_ff expects a rank-1 head")
    n, _, v, d = ff_head.W.shape
    circuit = build(ArchitectureSpec(BTREE, n, r, v))
    W = np.repeat(ff_head.W, r, axis=1)
    R, bias = [], []
    for out, inp in circuit.sum_shapes:
        if out == 1:
            R.append(std * rng.standard_normal((1, inp, d)))
            bias.append(std * rng.standard_normal((1, inp)))
        else:
            R.append(np.zeros((out, inp, d)))
            bias.append(beta * np.eye(out, inp))
    return ParamHead(W, R, bias)


# -- bundled model and checkpoints -------------------------------------------


@dataclass
class Model:
    """Everything a self-speculative decoder needs."""

    circuit: Circuit
    backbone: ToyBackbone
    head: ParamHead
    target: TargetSTP
    adapter: DraftAdapter

    @classmethod
    def init(
        cls,
        spec: ArchitectureSpec,
        d: int = 64,
        L: int = 4,
        k: int = 0,
        rho: int = 4,
        seed: int = 0,
        head_scale: float = 0.02,
        target_scale: float | None = None,
    ) -> "Model":
        rng = np.random.default_rng(seed)
        circuit = build(spec)
        backbone = ToyBackbone.init(spec.v, d, L, rng)
        head = ParamHead.init(circuit, d, rng, scale=head_scale)
        ts = 1.0 / np.sqrt(d) if target_scale is None else target_scale
        target = TargetSTP(ts * rng.standard_normal((spec.v, d)))
        adapter = DraftAdapter.init(d, k, rho, rng)
        return cls(circuit, backbone, head, target, adapter)

    @property
    def spec(self) -> ArchitectureSpec:
        return self.circuit.spec

    def config(self) -> dict:
        return {
            "arch": self.spec.to_dict(),
            "d": self.backbone.d,
            "L": self.backbone.L,
            "k": self.adapter.k,
            "rho": self.adapter.rho,
        }

    def tensors(self) -> dict:
        t = {
            "backbone.embed": self.backbone.embed,
            "backbone.last_embed": self.backbone.last_embed,
            "head.W": self.head.W,
            "target.U": self.target.U,
        }
        for l, (w, b) in enumerate(zip(self.backbone.weights, self.backbone.biases)):
            t[f"backbone.weight.{l}"] = w
            t[f"backbone.bias.{l}"] = b
        for m in range(self.adapter.k):
            t[f"adapter.down.{m}"] = self.adapter.down[m]
            t[f"adapter.up.{m}"] = self.adapter.up[m]
            t[f"adapter.bias.{m}"] = self.adapter.bias[m]
        for s, (R_s, b_s) in enumerate(zip(self.head.R, self.head.bias_R)):
            t[f"head.R.{s}"] = R_s
            t[f"head.bias_R.{s}"] = b_s
        return t

    @classmethod
    def from_tensors(cls, config: dict, t: dict) -> "Model":
        spec = ArchitectureSpec(**config["arch"])
        circuit = build(spec)
        L, k = int(config["L"]), int(config["k"])
        arr = lambda name: np.array(t[name], dtype=float)  # noqa: E731
        backbone = ToyBackbone(
            arr("backbone.embed"),
            arr("backbone.last_embed"),
            [arr(f"backbone.weight.{l}") for l in range(L)],
            [arr(f"backbone.bias.{l}") for l in range(L)],
        )
        adapter = DraftAdapter(
            k,
            [arr(f"adapter.down.{m}") for m in range(k)],
            [arr(f"adapter.up.{m}") for m in range(k)],
            [arr(f"adapter.bias.{m}") for m in range(k)],
        )
        nsum = len(circuit.sum_shapes)
        head = ParamHead(arr("head.W"), [arr(f"head.R.{s}") for s in range(nsum)], [arr(f"head.bias_R.{s}") for s in range(nsum)])
        head.check(circuit)
        return cls(circuit, backbone, head, TargetSTP(arr("target.U")), adapter)

    def with_tensors(self, t: dict) -> "Model":
        return Model.from_tensors(self.config(), {**self.tensors(), **t})

    def replace(self, **kw) -> "Model":
        fields = dict(circuit=self.circuit, backbone=self.backbone, head=self.head, target=self.target, adapter=self.adapter)
        fields.update(kw)
        return Model(**fields)


def save_checkpoint(model: Model, path) -> None:
    doc = {
        "format": CKPT_FORMAT,
        "spec": model.config(),
        "tensors": {
            name: {"shape": list(np.shape(a)), "data": np.asarray(a, dtype=float).ravel().tolist()}
            for name, a in model.tensors().items()
        },
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh)


def load_checkpoint(path) -> Model:
    with open(path, encoding="utf-8") as fh:
        doc = json.load(fh)
    if doc.get("format") != CKPT_FORMAT:
        raise ContractError(f"unsupported checkpoint format {doc.get('format')!r}")
    tensors = {name: np.array(x["data"], dtype=float).reshape(x["shape"]) for name, x in doc["tensors"].items()}
    return Model.from_tensors(doc["spec"], tensors)


__all__ = [
    "BTREE",
    "CP",
    "FF",
    "HMM",
    "DraftAdapter",
    "Model",
    "ParamHead",
    "TargetSTP",
    "ToyBackbone",
    "encode",
    "encode_draft",
    "head_log_params",
    "init_btree_from_ff",
    "init_cp_from_ff",
    "init_hmm_identity",
    "load_checkpoint",
    "parameterize",
    "pool",
    "run_layers",
    "save_checkpoint",
    "target_next_dist",
]
