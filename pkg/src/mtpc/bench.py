"""Throughput benchmarks: acceptance, per-cycle latency, tokens per second.

The timed region of every decode starts at the first draft cycle: model
construction, prompt sampling and the prompt prefill happen before the
clock starts.  Latency per cycle is the total timed region divided by the
number of cycles.  Each configuration is measured on ``repetitions``
independent prompt sets and reported as mean and standard deviation over
the sets.
"""

from __future__ import annotations

import csv
import hashlib
import itertools
import json
import math
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from .circuits import ArchitectureSpec, SpecificationError
from .inference import ContractError
from .neural import Model, load_checkpoint
from .specdec import GREEDY, SAMPLE, Session, ar_generate, spec_step, unverified_step, _decode

TIMING_REGION = "draft/verify cycles only; excludes model construction and prompt prefill"
CSV_COLUMNS = (
    "arch",
    "r",
    "n",
    "k",
    "mu_acc",
    "mu_acc_std",
    "mu_lat",
    "mu_lat_std",
    "mu_toks",
    "mu_toks_std",
    "est_toks",
    "max_toks",
    "speedup",
    "error",
)
STP = "STP"


class ConfigError(ValueError):
    """Bad benchmark configuration or checkpoint mismatch."""


def est_toks(mu_acc: float, mu_lat: float) -> float:
    """Ratio estimate of throughput: accepted tokens per cycle over seconds per cycle."""
    if mu_lat <= 0:
        raise ContractError("latency must be positive")
    return mu_acc / mu_lat


@dataclass
class MetricRecord:
    arch: str
    r: int
    n: int
    k: int
    mu_acc: float = math.nan
    mu_acc_std: float = math.nan
    mu_lat: float = math.nan
    mu_lat_std: float = math.nan
    mu_toks: float = math.nan
    mu_toks_std: float = math.nan
    max_toks: float = math.nan
    speedup: float = math.nan
    cycles: int = 0
    tokens: int = 0
    mode: str = SAMPLE
    token_digest: str = ""
    timing_region: str = TIMING_REGION
    error: str = ""

    @property
    def est_toks(self) -> float:
        return self.mu_acc / self.mu_lat if self.mu_lat > 0 else math.nan

    def to_dict(self) -> dict:
        doc = asdict(self)
        doc["est_toks"] = self.est_toks
        return doc

    @classmethod
    def from_dict(cls, doc: dict) -> "MetricRecord":
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in doc.items() if k in names})

    def row(self) -> list:
        doc = self.to_dict()
        return ["" if isinstance(doc[c], float) and math.isnan(doc[c]) else doc[c] for c in CSV_COLUMNS]


@dataclass
class RunConfig:
    """One benchmark cell.  Models come from ``checkpoint`` or are built from ``model_seed``."""

    arch: str = "CP"
    n: int = 4
    r: int = 4
    v: int = 16
    k: int = 1
    d: int = 32
    L: int = 4
    rho: int = 4
    model_seed: int = 0
    head_scale: float = 1.0
    checkpoint: str | None = None
    prompt_count: int = 32
    prompt_length: int = 8
    prompt_seed: int = 0
    repetitions: int = 3
    gen_length: int = 256
    mode: str = SAMPLE
    baseline: str | None = None

    def __post_init__(self):
        if self.repetitions < 1:
            raise ConfigError("repetitions must be >= 1")
        if self.prompt_count < 1 or self.prompt_length < 1 or self.gen_length < 1:
            raise ConfigError("prompt_count, prompt_length and gen_length must be >= 1")
        if self.mode not in (GREEDY, SAMPLE):
            raise ConfigError(f"mode must be {GREEDY!r} or {SAMPLE!r}")

    @property
    def spec(self) -> ArchitectureSpec:
        return ArchitectureSpec(self.arch, self.n, self.r, self.v)

    @classmethod
    def from_dict(cls, doc: dict) -> "RunConfig":
        names = {f.name for f in fields(cls)}
        extra = set(doc) - names
        if extra:
            raise ConfigError(f"unknown benchmark settings: {sorted(extra)}")
        try:
            return cls(**doc)
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc

    def to_dict(self) -> dict:
        return asdict(self)


def load_model(config: RunConfig) -> Model:
    try:
        spec = config.spec
    except SpecificationError as exc:
        raise ConfigError(str(exc)) from exc
    if config.checkpoint is None:
        return Model.init(spec, config.d, config.L, config.k, config.rho, config.model_seed, head_scale=config.head_scale)
    try:
        model = load_checkpoint(config.checkpoint)
    except (OSError, ValueError, KeyError) as exc:
        raise ConfigError(f"cannot load checkpoint {config.checkpoint}: {exc}") from exc
    if model.spec != spec or model.adapter.k != config.k:
        raise ConfigError(f"checkpoint holds {model.spec} with k={model.adapter.k}, config asks for {spec} with k={config.k}")
    return model


def prompt_sets(config: RunConfig) -> list:
    rng = np.random.default_rng(config.prompt_seed)
    return [rng.integers(0, config.v, size=(config.prompt_count, config.prompt_length)) for _ in range(config.repetitions)]


def _set_seed(config: RunConfig, rep: int, i: int) -> np.random.Generator:
    return np.random.default_rng([config.prompt_seed, rep, i])


def _run_sets(config: RunConfig, model: Model, step):
    """Per-set (accepted, cycles, emitted, seconds) plus a digest of all tokens."""
    digest = hashlib.sha256()
    per_set = []
    for rep, prompts in enumerate(prompt_sets(config)):
        acc = cycles = emitted = 0
        seconds = 0.0
        for i, prompt in enumerate(prompts):
            session = Session(model, prompt, _set_seed(config, rep, i), mode=config.mode)
            t0 = time.monotonic()
            out = _decode(session, config.gen_length, step)
            seconds += time.monotonic() - t0
            acc += sum(session.stats.accepted)
            cycles += session.stats.cycles
            emitted += len(out)
            digest.update(np.asarray(out, dtype=np.int64).tobytes())
        per_set.append((acc, cycles, emitted, seconds))
    return per_set, digest.hexdigest()[:16]


def _mean_std(xs) -> tuple:
    xs = np.asarray(xs, dtype=float)
    return float(xs.mean()), float(xs.std())


def measure(config: RunConfig, model: Model | None = None) -> MetricRecord:
    """Speculative decoding metrics plus the unverified throughput ceiling."""
    model = load_model(config) if model is None else model
    per_set, digest = _run_sets(config, model, spec_step)
    mu_acc, acc_std = _mean_std([a / c for a, c, _, _ in per_set])
    mu_lat, lat_std = _mean_std([s / c for _, c, _, s in per_set])
    mu_toks, toks_std = _mean_std([e / s for _, _, e, s in per_set])
    rec = MetricRecord(
        config.arch,
        config.r,
        config.n,
        config.k,
        mu_acc=mu_acc,
        mu_acc_std=acc_std,
        mu_lat=mu_lat,
        mu_lat_std=lat_std,
        mu_toks=mu_toks,
        mu_toks_std=toks_std,
        cycles=sum(c for _, c, _, _ in per_set),
        tokens=sum(e for _, _, e, _ in per_set),
        mode=config.mode,
        token_digest=digest,
    )
    rec.max_toks = max_throughput(config, model)
    return rec


def max_throughput(config: RunConfig, model: Model | None = None) -> float:
    """Tokens per second when every drafted token is emitted unverified."""
    model = load_model(config) if model is None else model
    per_set, _ = _run_sets(config, model, unverified_step)
    return _mean_std([e / s for _, _, e, s in per_set])[0]


def measure_ar(config: RunConfig, model: Model | None = None) -> MetricRecord:
    """Single-token baseline: one verifier call per token.

    Reported with ``mu_acc = 1`` (one token per step) so the ratio estimate
    stays meaningful.
    """
    model = load_model(config) if model is None else model
    digest = hashlib.sha256()
    lats, toks = [], []
    for rep, prompts in enumerate(prompt_sets(config)):
        seconds, count = 0.0, 0
        for i, prompt in enumerate(prompts):
            rng = _set_seed(config, rep, i)
            t0 = time.monotonic()
            out = ar_generate(model.backbone, model.target, prompt, config.gen_length, config.mode, rng)
            seconds += time.monotonic() - t0
            count += len(out)
            digest.update(np.asarray(out, dtype=np.int64).tobytes())
        lats.append(seconds / count)
        toks.append(count / seconds)
    mu_lat, lat_std = _mean_std(lats)
    mu_toks, toks_std = _mean_std(toks)
    return MetricRecord(
        STP,
        1,
        1,
        0,
        mu_acc=1.0,
        mu_acc_std=0.0,
        mu_lat=mu_lat,
        mu_lat_std=lat_std,
        mu_toks=mu_toks,
        mu_toks_std=toks_std,
        max_toks=mu_toks,
        speedup=1.0,
        cycles=config.gen_length * config.prompt_count * config.repetitions,
        tokens=config.gen_length * config.prompt_count * config.repetitions,
        mode=config.mode,
        token_digest=digest.hexdigest()[:16],
    )


def speedup(record: MetricRecord, baseline: MetricRecord) -> float:
    if not baseline.mu_toks > 0:
        raise ContractError("baseline throughput must be positive")
    return record.mu_toks / baseline.mu_toks


class BaselineStore:
    """Baseline records kept in a JSON file and referenced by tag."""

    def __init__(self, path):
        self.path = Path(path)

    def _load(self) -> dict:
        if not self.path.exists():
            return {}
        with open(self.path, encoding="utf-8") as fh:
            return json.load(fh)

    def get(self, tag: str) -> MetricRecord:
        docs = self._load()
        if tag not in docs:
            raise ConfigError(f"no stored baseline tagged {tag!r} in {self.path}")
        return MetricRecord.from_dict(docs[tag])

    def put(self, tag: str, record: MetricRecord) -> None:
        docs = self._load()
        docs[tag] = record.to_dict()
        with open(self.path, "w", encoding="utf-8") as fh:
            json.dump(docs, fh, indent=2)

    def __contains__(self, tag: str) -> bool:
        return tag in self._load()


def workers_from_env(requested: int | None = None) -> int:
    """Worker count, capped by ``MTPC_THREADS`` when set."""
    cap = os.environ.get("MTPC_THREADS")
    n = 1 if requested is None else max(1, int(requested))
    if cap:
        try:
            n = min(n, max(1, int(cap)))
        except ValueError as exc:
            raise ConfigError(f"MTPC_THREADS must be an integer, got {cap!r}") from exc
    return n


def grid_cells(grid: dict, base: RunConfig) -> list:
    keys = [k for k in ("arch", "r", "n", "k") if k in grid]
    unknown = set(grid) - {"arch", "r", "n", "k"}
    if unknown:
        raise ConfigError(f"sweep grid keys must be among arch, r, n, k; got {sorted(unknown)}")
    values = [list(grid[k]) for k in keys]
    return [dict(zip(keys, combo)) for combo in itertools.product(*values)]


def _measure_cell(base: RunConfig, cell: dict, baseline: MetricRecord) -> MetricRecord:
    try:
        cfg = replace(base, **cell)
        rec = measure(cfg)
        rec.speedup = speedup(rec, baseline)
        return rec
    except Exception as exc:  # a failed cell becomes an error row
        return MetricRecord(
            str(cell.get("arch", base.arch)),
            int(cell.get("r", base.r)),
            int(cell.get("n", base.n)),
            int(cell.get("k", base.k)),
            error=f"{type(exc).__name__}: {exc}",
        )


def sweep(grid: dict, out, base: RunConfig | None = None, baseline: MetricRecord | None = None, workers: int | None = None) -> list:
    """Measure every (arch, r, n, k) cell; write ``out`` as CSV plus a JSONL mirror.

    Speed-ups are relative to ``baseline``; without one the single-token
    baseline is measured once on the base configuration's prompt sets.
    """
    base = RunConfig() if base is None else base
    cells = grid_cells(grid, base)
    if baseline is None:
        baseline = measure_ar(base)
    n_workers = workers_from_env(workers)
    if n_workers == 1:
        records = [_measure_cell(base, c, baseline) for c in cells]
    else:
        with ThreadPoolExecutor(n_workers) as pool:
            records = list(pool.map(lambda c: _measure_cell(base, c, baseline), cells))
    write_records(records, out)
    return records


def write_records(records, out) -> tuple:
    out = Path(out)
    csv_path = out.with_suffix(".csv")
    jsonl_path = out.with_suffix(".jsonl")
    with open(csv_path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(CSV_COLUMNS)
        for rec in records:
            w.writerow(rec.row())
    with open(jsonl_path, "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(json.dumps(rec.to_dict()) + "\n")
    return csv_path, jsonl_path
