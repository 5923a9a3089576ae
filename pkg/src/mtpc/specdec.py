"""Self-speculative decoding with a circuit draft and a single-token verifier.

Three components share one toy backbone: the shared trunk ``S`` (layers
``[0, L-k)``), the verifier ``V`` (the last ``k`` base layers plus the
next-token unembedding) and the draft ``D`` (the last ``k`` layers with the
adapter deltas plus the circuit head).  With ``k = 0`` both ``V`` and ``D``
read the trunk output directly.

:func:`spec_step` runs one shared-state cycle.  It makes one trunk pass per
cycle over the predecessor plus the ``n`` drafted tokens; the verifier and
the next draft both reuse it.  Because no trunk state exists for a token
the verifier samples, such a token is only emitted when nothing was
accepted, and the next cycle first catches up on it.

When a cycle accepts ``s >= 1`` tokens and rejects token ``s + 1``, the
residual ``max(0, p - q)`` of the rejected position is carried into the
next cycle, whose first drafted token is verified against that residual
instead of ``p``.  This keeps the output law equal to the target's while
still dropping the verifier's token.
"""

from __future__ import annotations

import json
import math
import time
from dataclasses import dataclass, field

import numpy as np

from .inference import ContractError, conditional_distribution, greedy_window, prefix_marginals, sample_window
from .neural import Model, ToyBackbone, TargetSTP, parameterize, run_layers

GREEDY = "greedy"
SAMPLE = "sample"


# -- token-level verification -------------------------------------------------


def residual_dist(p, q) -> np.ndarray:
    """``max(0, p - q)`` renormalised."""
    p = np.asarray(p, dtype=float)
    q = np.asarray(q, dtype=float)
    m = np.maximum(p - q, 0.0)
    z = m.sum()
    if z <= 0.0:
        raise ContractError("residual is undefined when p and q coincide")
    return m / z


def _draw(row, rng) -> int:
    cdf = row.cumsum()
    return min(int(cdf.searchsorted(rng.random() * cdf[-1], side="right")), len(row) - 1)


def _log(x: float) -> float:
    return math.log(x) if x > 0.0 else -math.inf


def verify(draft_window, draft_conditionals, target_conditionals, rng, token_log_q=None):
    """Sequential accept/reject of a drafted window.

    ``draft_conditionals[i]`` is the draft row ``q(. | x_<i)`` and may be
    produced lazily (any object supporting ``[i]``).  ``target_conditionals``
    has ``n + 1`` rows ``p(. | x_<i)``.  ``token_log_q`` optionally supplies
    ``log q(x_i | x_<i)`` for the drafted tokens so rows are only built on
    rejection.  Returns ``(s, token)``: the accepted count and the token
    drawn after it (from the residual on rejection, from ``p_{n+1}`` when
    everything was accepted).
    """
    x = np.asarray(draft_window, dtype=np.int64)
    n = x.shape[0]
    p = target_conditionals
    s = 0
    while s < n:
        lq = float(token_log_q[s]) if token_log_q is not None else _log(draft_conditionals[s][x[s]])
        if lq == -math.inf:
            raise ContractError(f"drafted token {x[s]} has zero draft probability at position {s + 1}")
        if _log(rng.random()) > min(0.0, _log(p[s][x[s]]) - lq):
            break
        s += 1
    if s < n:
        return s, _draw(residual_dist(p[s], draft_conditionals[s]), rng)
    return s, _draw(p[n], rng)


class _LazyRows:
    """Draft conditional rows computed on first access."""

    def __init__(self, session, params, window):
        self.session, self.params, self.window = session, params, window

    def __getitem__(self, i):
        circuit = self.session.model.circuit
        key = ("row", self.session.draft_key, tuple(int(x) for x in self.window[:i]))
        return self.session._cached(key, lambda: np.exp(conditional_distribution(circuit, self.params, self.window[:i])))


# -- sessions -------------------------------------------------------------------


@dataclass
class CycleResult:
    drafted: list
    accepted: int
    emitted: list
    free_token: bool


@dataclass
class Stats:
    cycles: int = 0
    accepted: list = field(default_factory=list)
    emitted: int = 0
    zero_accept_cycles: int = 0
    s_forwards: int = 0
    catchup_forwards: int = 0
    v_forwards: int = 0
    d_forwards: int = 0
    prefill_forwards: int = 0

    @property
    def mean_accepted(self) -> float:
        return float(np.mean(self.accepted)) if self.accepted else 0.0


class Session:
    """Decoding state for one prompt.  Single owner; not thread-safe.

    ``s_state`` is the trunk activation of the last committed token, or
    ``None`` when it is stale (after a cycle that emitted a verifier token).

    ``memo`` is an optional dict shared between sessions over the same
    weights.  It caches the deterministic per-prefix work (trunk, verifier
    and draft passes) so statistical tests that replay one prompt many
    times stay fast.  Counters still count every logical pass.
    """

    def __init__(
        self,
        model: Model,
        prompt,
        rng: np.random.Generator,
        mode: str = SAMPLE,
        trace: bool = False,
        memo: dict | None = None,
    ):
        if mode not in (GREEDY, SAMPLE):
            raise ContractError(f"mode must be {GREEDY!r} or {SAMPLE!r}")
        self.model = model
        self.prompt = model.backbone.check_prefix(prompt).tolist()
        self.tokens = list(self.prompt)
        self.rng = rng
        self.mode = mode
        self.stats = Stats()
        self.pending = None
        self.records = [] if trace else None
        self.memo = memo
        self.draft_key = None
        bb = model.backbone
        self.split = bb.L - model.adapter.k
        self._sum = np.zeros(bb.d)
        self._count = 0
        self.s_state = None
        self._prefill()

    @property
    def s_state_set(self) -> bool:
        return self.s_state is not None

    @property
    def generated(self) -> list:
        return self.tokens[len(self.prompt) :]

    def _cached(self, key, fn):
        if self.memo is None:
            return fn()
        if key not in self.memo:
            self.memo[key] = fn()
        return self.memo[key]

    # trunk helpers

    def _pool_block(self, block):
        bb = self.model.backbone
        e = bb.embed[np.asarray(block)]
        csum = np.cumsum(np.vstack([self._sum[None], e]), axis=0)[1:]
        count = self._count + np.arange(1, len(block) + 1)
        return csum / count[:, None] + bb.last_embed[np.asarray(block)]

    def _commit(self, block):
        bb = self.model.backbone
        for x in block:
            self._sum = self._sum + bb.embed[x]
            self._count += 1
        self.tokens.extend(int(x) for x in block)

    def _shared(self, h):
        bb = self.model.backbone
        return run_layers(h, bb.weights[: self.split], bb.biases[: self.split])

    def _verifier_rows(self, s_block):
        bb = self.model.backbone
        h = run_layers(s_block, bb.weights[self.split :], bb.biases[self.split :])
        logits = h @ self.model.target.U.T
        logits = logits - logits.max(axis=-1, keepdims=True)
        p = np.exp(logits)
        return p / p.sum(axis=-1, keepdims=True)

    def _draft_embedding(self, s_vec):
        bb = self.model.backbone
        deltas = [self.model.adapter.delta_for(l, bb.L) for l in range(self.split, bb.L)]
        return run_layers(s_vec, bb.weights[self.split :], bb.biases[self.split :], deltas=deltas)

    def _prefill(self):
        # trunk state for the whole prompt; the last row seeds the first draft
        h = self._cached(("prefill", tuple(self.prompt)), lambda: self._shared(self._pool_block(self.prompt)))
        self.stats.prefill_forwards += 1
        for x in self.prompt:
            self._sum = self._sum + self.model.backbone.embed[x]
            self._count += 1
        self.s_state = h[-1]

    def catch_up(self):
        """Recompute the trunk state of the last committed token if stale."""
        if self.s_state is not None:
            return
        bb = self.model.backbone

        def run():
            pooled = self._sum / self._count + bb.last_embed[self.tokens[-1]]
            return self._shared(pooled[None])[0]

        self.s_state = self._cached(("catchup", tuple(self.tokens)), run)
        self.stats.s_forwards += 1
        self.stats.catchup_forwards += 1

    def draft(self):
        """Draft state, circuit parameters and a drafted window."""
        self.catch_up()
        key = self.s_state.tobytes()

        def run():
            e = self._draft_embedding(self.s_state[None])[0]
            return parameterize(self.model.head, self.model.circuit, e)

        params = self._cached(("draft", key), run)
        self.draft_key = key
        self.stats.d_forwards += 1
        if self.mode == GREEDY:
            window = self._cached(("greedy", key), lambda: greedy_window(self.model.circuit, params))
        else:
            window = sample_window(self.model.circuit, params, self.rng)
        return params, window

    def verify_pass(self, window):
        """One trunk pass over predecessor + drafts, then verifier rows."""
        block = np.concatenate([[self.tokens[-1]], window])
        bb = self.model.backbone

        def run():
            pooled_prev = self._sum / self._count + bb.last_embed[self.tokens[-1]]
            pooled = np.vstack([pooled_prev[None], self._pool_block(window)])
            s_block = self._shared(pooled)
            return s_block, self._verifier_rows(s_block)

        s_block, p = self._cached(("verify", tuple(self.tokens), tuple(int(x) for x in window)), run)
        self.stats.s_forwards += 1
        self.stats.v_forwards += 1
        return block, s_block, p

    def _record(self, window, s, emitted, free):
        st = self.stats
        st.cycles += 1
        st.accepted.append(int(s))
        st.emitted += len(emitted)
        if s == 0:
            st.zero_accept_cycles += 1
        if self.records is not None:
            self.records.append(
                {
                    "cycle": st.cycles,
                    "drafted": [int(x) for x in window],
                    "accepted_s": int(s),
                    "emitted": [int(x) for x in emitted],
                    "free_token": bool(free),
                    "s_forwards": st.s_forwards,
                    "v_forwards": st.v_forwards,
                    "d_forwards": st.d_forwards,
                }
            )
        return CycleResult([int(x) for x in window], int(s), [int(x) for x in emitted], bool(free))


def spec_step(session: Session) -> CycleResult:
    """One shared-state draft/verify cycle (sampling or greedy per session mode)."""
    if session.mode == GREEDY:
        return greedy_spec_step(session)
    model = session.model
    params, window = session.draft()
    n = model.circuit.n
    log_q = session._cached(("logq", session.draft_key, tuple(int(x) for x in window)), lambda: _token_log_q(model, params, window))
    block, s_block, p = session.verify_pass(window)
    if session.pending is not None:
        p = p.copy()
        p[0] = session.pending
    rows = _LazyRows(session, params, window)
    s, token = verify(window, rows, p, session.rng, token_log_q=log_q)
    session.pending = None
    if s == 0:
        emitted = [token]
        session._commit(emitted)
        session.s_state = None
        return session._record(window, s, emitted, True)
    emitted = [int(x) for x in window[:s]]
    session._commit(emitted)
    session.s_state = s_block[s]
    if s < n:
        session.pending = residual_dist(p[s], rows[s])
    return session._record(window, s, emitted, False)


def _token_log_q(model, params, window):
    pm = prefix_marginals(model.circuit, params, window)
    return pm - np.concatenate([[0.0], pm[:-1]])


def greedy_spec_step(session: Session) -> CycleResult:
    """Draft by chained argmax; accept while drafts match the verifier argmax."""
    params, window = session.draft()
    n = len(window)
    block, s_block, p = session.verify_pass(window)
    best = np.argmax(p, axis=-1)
    s = 0
    while s < n and window[s] == best[s]:
        s += 1
    if s == 0:
        emitted = [int(best[0])]
        session._commit(emitted)
        session.s_state = None
        return session._record(window, 0, emitted, True)
    emitted = [int(x) for x in window[:s]]
    session._commit(emitted)
    session.s_state = s_block[s]
    return session._record(window, s, emitted, False)


def unverified_step(session: Session) -> CycleResult:
    """Emit all ``n`` drafted tokens without verification (throughput ceiling)."""
    params, window = session.draft()
    s_block = session._cached(
        ("block", tuple(session.tokens), tuple(int(x) for x in window)),
        lambda: session._shared(session._pool_block(window)),
    )
    session.stats.s_forwards += 1
    emitted = [int(x) for x in window]
    session._commit(emitted)
    session.s_state = s_block[-1]
    return session._record(window, len(window), emitted, False)


def vanilla_step(session: Session) -> CycleResult:
    """Textbook speculative sampling: accepted tokens plus the verifier token.

    Emits between 1 and ``n + 1`` tokens and always leaves the trunk state
    stale, so every cycle costs an extra catch-up pass.
    """
    model = session.model
    params, window = session.draft()
    log_q = session._cached(("logq", session.draft_key, tuple(int(x) for x in window)), lambda: _token_log_q(model, params, window))
    block, s_block, p = session.verify_pass(window)
    rows = _LazyRows(session, params, window)
    s, token = verify(window, rows, p, session.rng, token_log_q=log_q)
    emitted = [int(x) for x in window[:s]] + [token]
    session._commit(emitted)
    session.s_state = None
    return session._record(window, s, emitted, True)


def _decode(session: Session, max_new_tokens: int, step):
    if max_new_tokens < 1:
        raise ContractError("max_new_tokens must be >= 1")
    start = len(session.generated)
    # each cycle emits at least one token, so this bounds the loop
    for _ in range(max_new_tokens):
        if len(session.generated) - start >= max_new_tokens:
            break
        step(session)
    session.catch_up()
    return session.generated[start:]


def shared_state_decode(session: Session, max_new_tokens: int) -> list:
    """Loop :func:`spec_step` until at least ``max_new_tokens`` were emitted.

    The trunk state is refreshed before returning so the session can
    resume; a stale state at the end therefore costs its catch-up pass here.
    """
    return _decode(session, max_new_tokens, spec_step)


def vanilla_decode(session: Session, max_new_tokens: int) -> list:
    return _decode(session, max_new_tokens, vanilla_step)


def ar_generate(backbone: ToyBackbone, target: TargetSTP, prompt, count: int, mode: str, rng: np.random.Generator | None = None) -> list:
    """Plain one-token-at-a-time generation from the verifier."""
    if count < 1:
        raise ContractError("count must be >= 1")
    if mode not in (GREEDY, SAMPLE):
        raise ContractError(f"mode must be {GREEDY!r} or {SAMPLE!r}")
    if mode == SAMPLE and rng is None:
        raise ContractError("sampling needs an explicit rng")
    tokens = [int(x) for x in backbone.check_prefix(prompt)]
    total = np.zeros(backbone.d)
    for x in tokens[:-1]:
        total = total + backbone.embed[x]
    out = []
    for _ in range(count):
        last = tokens[-1]
        total = total + backbone.embed[last]
        h = total / len(tokens) + backbone.last_embed[last]
        h = run_layers(h[None], backbone.weights, backbone.biases)
        logits = h @ target.U.T
        logits = logits - logits.max(axis=-1, keepdims=True)
        p = np.exp(logits)[0]
        p = p / p.sum()
        x = int(np.argmax(p)) if mode == GREEDY else _draw(p, rng)
        out.append(x)
        tokens.append(x)
    return out


def write_trace(session: Session, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for rec in session.records or []:
            fh.write(json.dumps(rec) + "\n")


def timed_decode(session: Session, max_new_tokens: int, step=spec_step):
    """Decode and return ``(tokens, seconds)`` for the cycle loop only."""
    t0 = time.perf_counter()
    out = _decode(session, max_new_tokens, step)
    return out, time.perf_counter() - t0
