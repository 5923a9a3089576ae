"""Circuit structures for multi-token prediction heads.

A circuit is a list of layers in topological order.  Every layer groups
``width`` units that share a scope and a wiring pattern:

* ``INPUT`` layers hold ``width`` categorical units over one window
  position; unit ``j`` reads row ``phi[position, j]``.
* ``PRODUCT`` layers multiply their inputs unit-wise (Hadamard).  Inputs of
  width 1 broadcast against wider inputs.
* ``SUM`` layers concatenate their inputs along the unit axis and mix them
  with a row-stochastic table of shape ``(width, total input width)``.

Parameters never live on the circuit; see :mod:`mtpc.inference`.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

FF = "FF"
CP = "CP"
HMM = "HMM"
BTREE = "BTREE"
KINDS = (FF, CP, HMM, BTREE)

INPUT = "INPUT"
PRODUCT = "PRODUCT"
SUM = "SUM"


class SpecificationError(ValueError):
    """Raised for an invalid architecture specification."""


@dataclass(frozen=True)
class ArchitectureSpec:
    kind: str
    n: int
    r: int
    v: int

    def __post_init__(self):
        if self.kind not in KINDS:
            raise SpecificationError(f"unknown circuit kind {self.kind!r}")
        if self.n < 1:
            raise SpecificationError(f"window size must be >= 1, got {self.n}")
        if self.r < 1:
            raise SpecificationError(f"rank must be >= 1, got {self.r}")
        if self.v < 2:
            raise SpecificationError(f"vocabulary must be >= 2, got {self.v}")
        if self.kind == FF and self.r != 1:
            raise SpecificationError("FF circuits have rank 1")
        if self.kind == BTREE and self.n < 2:
            raise SpecificationError("BTREE needs n >= 2; use FF for n = 1")

    def to_dict(self) -> dict:
        return {"kind": self.kind, "n": self.n, "r": self.r, "v": self.v}


@dataclass(frozen=True)
class Layer:
    kind: str
    scope: frozenset
    width: int
    inputs: tuple = ()
    table_id: int | None = None
    position: int | None = None

    def to_dict(self) -> dict:
        d = {
            "kind": self.kind,
            "scope": sorted(self.scope),
            "width": self.width,
            "inputs": list(self.inputs),
            "table_id": self.table_id,
        }
        if self.position is not None:
            d["position"] = self.position
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "Layer":
        return cls(
            kind=d["kind"],
            scope=frozenset(d["scope"]),
            width=int(d["width"]),
            inputs=tuple(d["inputs"]),
            table_id=d.get("table_id"),
            position=d.get("position"),
        )


@dataclass(frozen=True)
class Circuit:
    """An immutable layered circuit.

    Window positions in scopes are 1-based, matching ``x_{t+1..t+n}``;
    ``Layer.position`` and ``Layer.table_id`` on input layers are 0-based
    indices into ``phi``.
    """

    spec: ArchitectureSpec
    layers: tuple
    output: int
    sum_shapes: tuple = field(default=())

    @property
    def n(self) -> int:
        return self.spec.n

    @property
    def r(self) -> int:
        return self.spec.r

    @property
    def v(self) -> int:
        return self.spec.v

    @property
    def phi_shape(self) -> tuple:
        return (self.spec.n, self.spec.r, self.spec.v)

    @property
    def input_layers(self) -> list:
        return [i for i, l in enumerate(self.layers) if l.kind == INPUT]

    @property
    def sum_layers(self) -> list:
        return [i for i, l in enumerate(self.layers) if l.kind == SUM]

    def input_width(self, index: int) -> int:
        """Total width of the concatenated inputs of layer ``index``."""
        return sum(self.layers[j].width for j in self.layers[index].inputs)

    def num_parameters(self) -> int:
        """Entries of phi plus entries of every sum table."""
        n, r, v = self.phi_shape
        return n * r * v + sum(a * b for a, b in self.sum_shapes)

    def to_dict(self) -> dict:
        d = self.spec.to_dict()
        d["output"] = self.output
        d["layers"] = [l.to_dict() for l in self.layers]
        return d

    def to_json(self, **kwargs) -> str:
        return json.dumps(self.to_dict(), **kwargs)

    @classmethod
    def from_dict(cls, d: dict) -> "Circuit":
        spec = ArchitectureSpec(d["kind"], int(d["n"]), int(d["r"]), int(d["v"]))
        layers = tuple(Layer.from_dict(x) for x in d["layers"])
        output = int(d.get("output", len(layers) - 1))
        return _finish(spec, list(layers), output)

    @classmethod
    def from_json(cls, text: str) -> "Circuit":
        return cls.from_dict(json.loads(text))


def _finish(spec, layers, output):
    # sum tables are numbered in layer order
    shapes = []
    for layer in layers:
        if layer.kind == SUM:
            shapes.append((layer.width, sum(layers[j].width for j in layer.inputs)))
    return Circuit(spec=spec, layers=tuple(layers), output=output, sum_shapes=tuple(shapes))


class _Builder:
    def __init__(self):
        self.layers = []
        self.n_sums = 0

    def input(self, position, width):
        self.layers.append(
            Layer(INPUT, frozenset([position + 1]), width, (), table_id=position, position=position)
        )
        return len(self.layers) - 1

    def product(self, inputs, width):
        scope = frozenset().union(*(self.layers[i].scope for i in inputs))
        self.layers.append(Layer(PRODUCT, scope, width, tuple(inputs)))
        return len(self.layers) - 1

    def sum(self, inputs, width):
        scope = frozenset().union(*(self.layers[i].scope for i in inputs))
        self.layers.append(Layer(SUM, scope, width, tuple(inputs), table_id=self.n_sums))
        self.n_sums += 1
        return len(self.layers) - 1


def build_ff(n: int, v: int) -> Circuit:
    spec = ArchitectureSpec(FF, n, 1, v)
    b = _Builder()
    leaves = [b.input(i, 1) for i in range(n)]
    out = leaves[0] if n == 1 else b.product(leaves, 1)
    return _finish(spec, b.layers, out)


def build_cp(n: int, v: int, r: int) -> Circuit:
    spec = ArchitectureSpec(CP, n, r, v)
    b = _Builder()
    leaves = [b.input(i, r) for i in range(n)]
    inner = leaves[0] if n == 1 else b.product(leaves, r)
    out = b.sum([inner], 1)
    return _finish(spec, b.layers, out)


def build_hmm(n: int, v: int, r: int) -> Circuit:
    """Inhomogeneous HMM truncated to ``n`` steps.

    Evaluated bottom-up this is the backward recursion: the message for
    position ``i`` is ``emit_i * (T_{i+1} @ message_{i+1})``.  Sum table 0
    ... n-2 are the transitions into positions n, n-1, ..., 2 (rows index
    the previous latent state); the last table is the prior over ``z_1``.
    """
    spec = ArchitectureSpec(HMM, n, r, v)
    b = _Builder()
    message = b.input(n - 1, r)
    for i in range(n - 2, -1, -1):
        carried = b.sum([message], r)
        emit = b.input(i, r)
        message = b.product([emit, carried], r)
    out = b.sum([message], 1)
    return _finish(spec, b.layers, out)


def build_btree(n: int, v: int, r: int) -> Circuit:
    spec = ArchitectureSpec(BTREE, n, r, v)
    b = _Builder()

    def node(lo, hi, width):
        # positions lo..hi-1 (0-based); the left half holds floor(len/2) tokens
        if hi - lo == 1:
            return b.input(lo, r)
        mid = lo + (hi - lo) // 2
        left = node(lo, mid, r)
        right = node(mid, hi, r)
        return b.sum([b.product([left, right], r)], width)

    out = node(0, n, 1)
    return _finish(spec, b.layers, out)


BUILDERS = {
    FF: lambda n, v, r=1: build_ff(n, v),
    CP: build_cp,
    HMM: build_hmm,
    BTREE: build_btree,
}


def build(spec: ArchitectureSpec | dict | str, n: int | None = None, v: int | None = None, r: int = 1) -> Circuit:
    """Build a circuit from a spec object, a dict, or ``kind, n, v, r``."""
    if isinstance(spec, str):
        spec = ArchitectureSpec(spec.upper(), n, r, v)
    elif isinstance(spec, dict):
        spec = ArchitectureSpec(spec["kind"].upper(), int(spec["n"]), int(spec.get("r", 1)), int(spec["v"]))
    if spec.kind == FF:
        return build_ff(spec.n, spec.v)
    return BUILDERS[spec.kind](spec.n, spec.v, spec.r)


@dataclass
class ValidationReport:
    smooth: bool = True
    decomposable: bool = True
    single_output: bool = True
    acyclic: bool = True
    param_shapes: bool = True
    failures: list = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return self.smooth and self.decomposable and self.single_output and self.acyclic and self.param_shapes

    def fail(self, prop, message):
        setattr(self, prop, False)
        self.failures.append(f"{prop}: {message}")

    def as_dict(self) -> dict:
        return {
            "ok": self.ok,
            "smooth": self.smooth,
            "decomposable": self.decomposable,
            "single_output": self.single_output,
            "acyclic": self.acyclic,
            "param_shapes": self.param_shapes,
            "failures": list(self.failures),
        }


def validate(circuit: Circuit) -> ValidationReport:
    """Check structural properties; never raises on a malformed circuit."""
    rep = ValidationReport()
    layers = circuit.layers
    n = circuit.spec.n
    full = frozenset(range(1, n + 1))

    for idx, layer in enumerate(layers):
        if any(not (0 <= j < idx) for j in layer.inputs):
            rep.fail("acyclic", f"layer {idx} reads a layer that does not precede it")
            continue
        if layer.kind == INPUT:
            if layer.inputs:
                rep.fail("acyclic", f"input layer {idx} has inputs")
            if len(layer.scope) != 1 or layer.position is None or layer.scope != frozenset([layer.position + 1]):
                rep.fail("param_shapes", f"input layer {idx} scope must be its single position")
            if layer.width > circuit.spec.r:
                rep.fail("param_shapes", f"input layer {idx} wider than rank")
            continue
        if not layer.inputs:
            rep.fail("acyclic", f"layer {idx} has no inputs")
            continue
        scopes = [layers[j].scope for j in layer.inputs]
        union = frozenset().union(*scopes)
        if union != layer.scope:
            rep.fail("smooth" if layer.kind == SUM else "decomposable", f"layer {idx} scope is not the union of its inputs")
        if layer.kind == SUM:
            if any(s != scopes[0] for s in scopes):
                rep.fail("smooth", f"sum layer {idx} mixes inputs with different scopes")
        elif layer.kind == PRODUCT:
            if sum(len(s) for s in scopes) != len(union):
                rep.fail("decomposable", f"product layer {idx} has overlapping input scopes")
            widths = {layers[j].width for j in layer.inputs} - {1}
            if len(widths) > 1 or (widths and layer.width not in widths):
                rep.fail("param_shapes", f"product layer {idx} input widths do not match")
        else:
            rep.fail("acyclic", f"layer {idx} has unknown kind {layer.kind!r}")

    if not (0 <= circuit.output < len(layers)):
        rep.fail("single_output", "output index out of range")
    else:
        root = layers[circuit.output]
        if root.width != 1:
            rep.fail("single_output", f"output layer has width {root.width}")
        if root.scope != full:
            rep.fail("single_output", "output scope is not the full window")
        consumed = {j for l in layers for j in l.inputs}
        dangling = [i for i in range(len(layers)) if i not in consumed and i != circuit.output]
        if dangling:
            rep.fail("single_output", f"layers {dangling} do not reach the output")

    positions = sorted(layers[i].position for i in circuit.input_layers if layers[i].position is not None)
    if sorted(set(positions)) != list(range(n)):
        rep.fail("param_shapes", "every window position needs an input layer")
    expected = [(l.width, sum(layers[j].width for j in l.inputs)) for l in layers if l.kind == SUM and l.inputs]
    if list(circuit.sum_shapes) != expected:
        rep.fail("param_shapes", "declared sum table shapes disagree with the layers")
    ids = [l.table_id for l in layers if l.kind == SUM]
    if ids != list(range(len(ids))):
        rep.fail("param_shapes", "sum table ids must be 0..k-1 in layer order")
    return rep
