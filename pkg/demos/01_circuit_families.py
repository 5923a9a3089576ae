"""
Four circuit families over a window of next tokens
==================================================

Build the fully factorised (FF), mixture (CP), hidden-chain (HMM) and
binary-tree (BTREE) circuits, check their structure, and compare what
they can say about a small window.
"""

import numpy as np

from mtpc import ArchitectureSpec, build, validate
from mtpc.inference import conditional_distribution, enumerate_joint, prefix_marginals, random_params

n, v, r = 4, 3, 2

# structure: every builder yields a smooth, decomposable circuit
for kind in ("FF", "CP", "HMM", "BTREE"):
    c = build(ArchitectureSpec(kind, n, 1 if kind == "FF" else r, v))
    report = validate(c)
    print(f"{kind:<6} layers={len(c.layers):2d} parameters={c.num_parameters():3d} sum tables={c.sum_shapes} valid={report.ok}")

# a CP mixture of two "words": component 0 spells 0,1,2,0 and component 1 spells 2,2,1,1
cp = build(ArchitectureSpec("CP", n, 2, v))
params = random_params(cp, np.random.default_rng(0), scale=0.0)
phi = np.full((n, 2, v), 0.01)
for i, (a, b) in enumerate(zip([0, 1, 2, 0], [2, 2, 1, 1])):
    phi[i, 0, a] = phi[i, 1, b] = 1.0
phi /= phi.sum(-1, keepdims=True)
params = type(params)(phi, [np.array([[0.5, 0.5]])])

joint = enumerate_joint(cp, params)
print("\nmass on the two words:", joint[0, 1, 2, 0].round(3), joint[2, 2, 1, 1].round(3))

# the per-slot marginals are blends, so a factorised draft would mix words
marg = [joint.sum(axis=tuple(a for a in range(n) if a != i)) for i in range(n)]
salad = np.prod([marg[i][t] for i, t in enumerate([0, 2, 2, 0])])
print("product of marginals on the mixed window 0,2,2,0:", round(float(salad), 3), "vs joint", joint[0, 2, 2, 0].round(5))

# conditioning on the first token resolves the word
print("q(x2 | x1=0) =", np.exp(conditional_distribution(cp, params, [0])).round(3))
print("q(x2 | x1=2) =", np.exp(conditional_distribution(cp, params, [2])).round(3))

# prefix marginals come out of one pass; their ratios are the conditionals
pm = prefix_marginals(cp, params, [0, 1, 2, 0])
print("log q(x_1..x_i):", pm.round(3))
