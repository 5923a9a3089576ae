"""Command-line entry point: ``mtpc <subcommand> [flags]``.

Exit status 0 on success, 1 on configuration errors (bad JSON, invalid
architecture, checkpoint mismatch, failed self-test) and 2 on usage errors.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from .circuits import ArchitectureSpec, SpecificationError, build, validate
from .inference import ContractError

SUBCOMMANDS = ("build", "inspect", "train", "generate", "bench", "sweep", "selftest")


def _load_config(path) -> dict:
    if path is None:
        return {}
    with open(path, encoding="utf-8") as fh:
        return json.load(fh)


def _spec_from(doc: dict) -> ArchitectureSpec:
    doc = doc.get("arch", doc)
    return ArchitectureSpec(doc["kind"], int(doc["n"]), int(doc.get("r", 1)), int(doc["v"]))


def _emit(text: str, out) -> None:
    if out is None:
        print(text)
    else:
        Path(out).write_text(text + "\n", encoding="utf-8")


def cmd_build(args, cfg) -> int:
    circuit = build(_spec_from(cfg))
    report = validate(circuit)
    print(json.dumps({"spec": circuit.spec.to_dict(), "parameters": circuit.num_parameters(), "validation": report.as_dict()}))
    if args.out:
        Path(args.out).write_text(circuit.to_json(), encoding="utf-8")
    return 0 if report.ok else 1


def cmd_inspect(args, cfg) -> int:
    from .circuits import Circuit

    circuit = Circuit.from_dict(cfg) if "layers" in cfg else build(_spec_from(cfg))
    s = circuit.spec
    lines = [f"{s.kind} n={s.n} r={s.r} v={s.v}: {len(circuit.layers)} layers, {circuit.num_parameters()} parameters"]
    for i, layer in enumerate(circuit.layers):
        scope = ",".join(str(p) for p in sorted(layer.scope))
        extra = f" table={layer.table_id} shape={circuit.sum_shapes[layer.table_id]}" if layer.kind == "SUM" else ""
        lines.append(f"{i:4d} {layer.kind:<7} width={layer.width:<3} scope={{{scope}}} inputs={list(layer.inputs)}{extra}")
    lines.append(f"valid: {validate(circuit).ok}")
    _emit("\n".join(lines), args.out)
    return 0


def cmd_train(args, cfg) -> int:
    from .distill import DistillConfig, distill_draft, fit_target
    from .neural import save_checkpoint

    cfg = dict(cfg)
    spec = _spec_from(cfg.pop("arch"))
    seed = int(cfg.pop("seed", 0)) if args.seed is None else args.seed
    dcfg = DistillConfig.from_dict(cfg)
    stack = fit_target(dcfg, seed)
    model, trace = distill_draft(spec, stack, dcfg, seed)
    out = Path(args.out or "checkpoint.json")
    save_checkpoint(model, out)
    with open(out.with_suffix(".trace.jsonl"), "w", encoding="utf-8") as fh:
        for rec in trace:
            fh.write(json.dumps(rec) + "\n")
    print(json.dumps({"checkpoint": str(out), "steps": len(trace), "final_loss": trace[-1]["loss"] if trace else None}))
    return 0


def cmd_generate(args, cfg) -> int:
    from .bench import RunConfig, load_model
    from .specdec import Session, shared_state_decode

    cfg = dict(cfg)
    prompt = cfg.pop("prompt", [0])
    count = int(cfg.pop("max_new_tokens", 32))
    seed = int(cfg.pop("seed", 0)) if args.seed is None else args.seed
    if args.mode:
        cfg["mode"] = args.mode
    run = RunConfig.from_dict(cfg)
    model = load_model(run)
    session = Session(model, prompt, np.random.default_rng(seed), mode=run.mode, trace=True)
    tokens = shared_state_decode(session, count)
    print(" ".join(str(t) for t in tokens))
    trace = "\n".join(json.dumps(rec) for rec in session.records)
    if args.out:
        Path(args.out).write_text(trace + "\n", encoding="utf-8")
    else:
        print(trace)
    return 0


def cmd_bench(args, cfg) -> int:
    from .bench import STP, BaselineStore, RunConfig, measure, measure_ar, speedup

    cfg = dict(cfg)
    store_path = cfg.pop("baseline_store", "baselines.json")
    if args.seed is not None:
        cfg["prompt_seed"] = args.seed
    if args.mode:
        cfg["mode"] = args.mode
    if args.baseline:
        cfg["baseline"] = args.baseline
    run = RunConfig.from_dict(cfg)
    rec = measure(run)
    if run.baseline:
        store = BaselineStore(store_path)
        if run.baseline not in store:
            if run.baseline != STP:
                raise ContractError(f"unknown baseline tag {run.baseline!r}")
            store.put(STP, measure_ar(run))
        rec.speedup = speedup(rec, store.get(run.baseline))
    line = json.dumps(rec.to_dict())
    if args.out:
        with open(args.out, "w", encoding="utf-8") as fh:
            fh.write(line + "\n")
    print(line)
    return 0


def cmd_sweep(args, cfg) -> int:
    from .bench import RunConfig, sweep

    cfg = dict(cfg)
    grid = cfg.pop("grid")
    base = dict(cfg.pop("base", {}))
    if args.seed is not None:
        base["prompt_seed"] = args.seed
    if args.mode:
        base["mode"] = args.mode
    records = sweep(grid, args.out or "sweep.csv", RunConfig.from_dict(base), workers=cfg.pop("workers", None))
    failed = sum(1 for r in records if r.error)
    print(json.dumps({"rows": len(records), "failed": failed, "out": str(Path(args.out or "sweep.csv").with_suffix(".csv"))}))
    return 0


def cmd_selftest(args, cfg) -> int:
    from . import selftest

    checks = selftest.run(int(cfg.get("runs", 20000)))
    for c in checks:
        print(f"{'PASS' if c.ok else 'FAIL'} {c.name}: {c.detail}")
    return 0 if all(c.ok for c in checks) else 1


def parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="mtpc", description="Circuit multi-token drafts with speculative decoding.")
    sub = p.add_subparsers(dest="command", required=True)
    for name in SUBCOMMANDS:
        sp = sub.add_parser(name)
        sp.add_argument("--config", help="JSON configuration file")
        sp.add_argument("--out", help="output path")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--mode", choices=("greedy", "sample"))
        sp.add_argument("--baseline", help="tag of a stored baseline record")
    return p


def main(argv=None) -> int:
    args = parser().parse_args(argv)
    handler = globals()[f"cmd_{args.command}"]
    try:
        cfg = _load_config(args.config)
        if args.command in ("build", "train", "sweep") and not cfg:
            raise ContractError(f"{args.command} needs --config")
        return handler(args, cfg)
    except (OSError, json.JSONDecodeError, KeyError, TypeError, ValueError, SpecificationError) as exc:
        print(f"mtpc {args.command}: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
