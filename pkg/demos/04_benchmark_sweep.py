"""
Throughput sweep
================

Measure acceptance, per-cycle latency and tokens per second over a small
(architecture, rank, window) grid and write the table as CSV and JSONL.
Untrained toy models, so acceptance is low; the point is the harness.
"""

import csv

from mtpc.bench import RunConfig, measure_ar, sweep

base = RunConfig(v=16, d=16, L=3, k=1, prompt_count=8, prompt_length=8, repetitions=3, gen_length=64)
baseline = measure_ar(base)
print(f"single-token baseline: {baseline.mu_toks:.0f} tok/s")

records = sweep({"arch": ["CP", "BTREE"], "r": [2, 8], "n": [2, 4]}, "sweep.csv", base, baseline=baseline)
with open("sweep.csv", newline="") as fh:
    for row in csv.reader(fh):
        print(",".join(row[:13]))
