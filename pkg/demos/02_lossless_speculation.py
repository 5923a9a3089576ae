"""
Shared-state self-speculative decoding is lossless
==================================================

A circuit draft proposes a window, the single-token verifier accepts a
prefix of it, and the shared trunk is run once per cycle.  Here we decode
many times from one prompt and compare the law of the first tokens to the
exact autoregressive law of the verifier.
"""

import itertools

import numpy as np

from mtpc import ArchitectureSpec, Model, Session, shared_state_decode
from mtpc.neural import DraftAdapter, encode, target_next_dist
from mtpc.specdec import _decode, spec_step

v, m, prompt, runs = 3, 2, [0, 1], 20_000

model = Model.init(ArchitectureSpec("CP", 2, 3, v), d=4, L=2, k=1, rho=2, seed=1, head_scale=2.0, target_scale=1.0)
model = model.replace(adapter=DraftAdapter.init(4, 1, 2, np.random.default_rng(5), zero=False))

# one traced decode: accepted counts, free tokens and pass counters per cycle
session = Session(model, prompt, np.random.default_rng(0), trace=True)
shared_state_decode(session, 12)
for rec in session.records:
    print(rec)
st = session.stats
print(f"cycles={st.cycles} zero-accept={st.zero_accept_cycles} trunk passes={st.s_forwards}")

# exact law of the first m tokens under the verifier
law = {}
for seq in itertools.product(range(v), repeat=m):
    p, prefix = 1.0, list(prompt)
    for x in seq:
        p *= target_next_dist(model.target, encode(model.backbone, prefix))[x]
        prefix.append(x)
    law[seq] = p


def empirical(step):
    memo, counts = {}, {}
    for i in range(runs):
        out = tuple(_decode(Session(model, prompt, np.random.default_rng([7, i]), memo=memo), m, step)[:m])
        counts[out] = counts.get(out, 0) + 1
    return {k: c / runs for k, c in counts.items()}


def tv(p, q):
    return 0.5 * sum(abs(p.get(k, 0.0) - q.get(k, 0.0)) for k in set(p) | set(q))


print("\nTV to the exact law with the residual carry:", round(tv(empirical(spec_step), law), 4))


# without carrying the residual of a partly rejected window the law drifts
def no_carry(session):
    out = spec_step(session)
    session.pending = None
    return out


print("TV to the exact law without the carry:     ", round(tv(empirical(no_carry), law), 4))
