"""Quick in-process checks behind ``mtpc selftest``.

The oracle here evaluates circuits one window at a time in probability
space, by plain matrix products, and marginalizes by explicit summation
over the enumerated windows.  It shares no code with the log-space engine
it checks.  The losslessness check compares the first two generated tokens
against the exact autoregressive law of the target.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np

from .circuits import INPUT, PRODUCT, SUM, KINDS, ArchitectureSpec, build, validate
from .inference import evaluate, partition, prefix_marginals, random_params
from .neural import DraftAdapter, Model, encode, target_next_dist
from .specdec import Session, shared_state_decode


def brute_value(circuit, params, window) -> float:
    """Probability of a full window by direct evaluation."""
    vals = []
    for layer in circuit.layers:
        if layer.kind == INPUT:
            val = params.phi[layer.position][: layer.width, window[layer.position]]
        elif layer.kind == PRODUCT:
            val = np.ones(layer.width)
            for j in layer.inputs:
                val = val * vals[j]
        elif layer.kind == SUM:
            val = np.asarray(params.omega[layer.table_id]) @ np.concatenate([vals[j] for j in layer.inputs])
        vals.append(val)
    return float(vals[circuit.output][0])


def brute_joint(circuit, params) -> np.ndarray:
    n, v = circuit.n, circuit.v
    table = np.zeros((v,) * n)
    for w in itertools.product(range(v), repeat=n):
        table[w] = brute_value(circuit, params, w)
    return table


def target_law(model: Model, prompt, m: int) -> dict:
    """Exact probability of every m-token continuation under the target."""
    law = {}
    for seq in itertools.product(range(model.backbone.v), repeat=m):
        prob, prefix = 1.0, list(prompt)
        for x in seq:
            prob *= target_next_dist(model.target, encode(model.backbone, prefix))[x]
            prefix.append(x)
        law[seq] = prob
    return law


def empirical_law(model: Model, prompt, m: int, runs: int, seed: int) -> dict:
    counts, memo = {}, {}
    for i in range(runs):
        session = Session(model, prompt, np.random.default_rng([seed, i]), memo=memo)
        key = tuple(shared_state_decode(session, m)[:m])
        counts[key] = counts.get(key, 0) + 1
    return {k: c / runs for k, c in counts.items()}


def total_variation(p: dict, q: dict) -> float:
    keys = set(p) | set(q)
    return 0.5 * sum(abs(p.get(k, 0.0) - q.get(k, 0.0)) for k in keys)


@dataclass
class Check:
    name: str
    ok: bool
    detail: str


def oracle_checks(seeds: int = 3) -> list:
    out = []
    for kind in KINDS:
        worst = 0.0
        for n, v, r in itertools.product((2, 3), (2, 3), (1, 2)):
            if kind == "FF" and r != 1:
                continue
            circuit = build(ArchitectureSpec(kind, n, r, v))
            if not validate(circuit).ok:
                out.append(Check(f"oracle {kind}", False, f"circuit n={n} r={r} v={v} fails validation"))
                continue
            for seed in range(seeds):
                params = random_params(circuit, np.random.default_rng(seed))
                joint = brute_joint(circuit, params)
                worst = max(worst, abs(np.exp(partition(circuit, params)) - joint.sum()))
                for w in itertools.product(range(v), repeat=n):
                    worst = max(worst, abs(np.exp(evaluate(circuit, params, w)) - joint[w]))
                    pm = np.exp(prefix_marginals(circuit, params, w))
                    for i in range(n):
                        ref = joint[w[: i + 1]].sum()
                        worst = max(worst, abs(pm[i] - ref))
        out.append(Check(f"oracle {kind}", worst <= 1e-9, f"max abs error {worst:.2e}"))
    return out


def lossless_checks(runs: int = 20000, tolerance: float = 0.02) -> list:
    out = []
    prompt = [0, 1]
    for kind in KINDS:
        r = 1 if kind == "FF" else 3
        model = Model.init(ArchitectureSpec(kind, 2, r, 3), d=4, L=2, k=1, rho=2, seed=3, head_scale=1.0, target_scale=1.0)
        model = model.replace(adapter=DraftAdapter.init(4, 1, 2, np.random.default_rng(5), zero=False))
        tv = total_variation(target_law(model, prompt, 2), empirical_law(model, prompt, 2, runs, seed=11))
        out.append(Check(f"lossless {kind}", tv <= tolerance, f"TV {tv:.4f} over {runs} runs (limit {tolerance})"))
    return out


def run(runs: int = 20000) -> list:
    return oracle_checks() + lossless_checks(runs)
