"""Synthetic teachers with exact next-token conditionals and exact samplers.

``NGRAM`` is an order-k Markov chain with Dirichlet rows.  ``LATENT_CHAIN``
is a hidden chain over "words": each word is a fixed run of distinct
tokens, words follow each other through a word-transition matrix, and
every emission is replaced by a uniform token with probability ``noise``.
Once a word starts its remaining tokens are (nearly) determined, which is
the inter-token dependency a fully factorised draft cannot represent.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

NGRAM = "NGRAM"
LATENT_CHAIN = "LATENT_CHAIN"


def _draw(rows: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    cdf = np.cumsum(rows, axis=-1)
    u = rng.random(rows.shape[0]) * cdf[:, -1]
    return np.minimum((cdf <= u[:, None]).sum(-1), rows.shape[-1] - 1)


@dataclass
class NgramTeacher:
    """``table[c_1, ..., c_order]`` is the next-token row for context ``c``.

    Prefixes shorter than ``order`` are left-padded with token 0, so the
    first token of a sequence is drawn from ``table[0, ..., 0]``.
    """

    table: np.ndarray

    @property
    def v(self) -> int:
        return self.table.shape[-1]

    @property
    def order(self) -> int:
        return self.table.ndim - 1

    def _context(self, prefix) -> tuple:
        prefix = [int(x) for x in prefix][-self.order :] if self.order else []
        return tuple([0] * (self.order - len(prefix)) + prefix)

    def next_dist(self, prefix) -> np.ndarray:
        return self.table[self._context(prefix)].copy()

    def sample(self, count: int, length: int, rng: np.random.Generator) -> np.ndarray:
        out = np.zeros((count, length), dtype=np.int64)
        ctx = np.zeros((count, self.order), dtype=np.int64)
        for t in range(length):
            rows = self.table[tuple(ctx.T)] if self.order else np.broadcast_to(self.table, (count, self.v))
            x = _draw(rows, rng)
            out[:, t] = x
            if self.order:
                ctx = np.concatenate([ctx[:, 1:], x[:, None]], axis=1)
        return out


@dataclass
class LatentChainTeacher:
    """Hidden state ``(word, offset)``; exact conditionals by forward filtering."""

    words: np.ndarray  # (modes, word_length) token ids
    word_transition: np.ndarray  # (modes, modes)
    initial: np.ndarray  # (modes,)
    noise: float
    v: int

    @property
    def modes(self) -> int:
        return self.words.shape[0]

    @property
    def word_length(self) -> int:
        return self.words.shape[1]

    @property
    def n_states(self) -> int:
        return self.words.size

    def transition_matrix(self) -> np.ndarray:
        M, l = self.words.shape
        T = np.zeros((M * l, M * l))
        for w in range(M):
            for o in range(l - 1):
                T[w * l + o, w * l + o + 1] = 1.0
            T[w * l + l - 1, np.arange(M) * l] = self.word_transition[w]
        return T

    def emission_matrix(self) -> np.ndarray:
        E = np.full((self.n_states, self.v), self.noise / self.v)
        E[np.arange(self.n_states), self.words.ravel()] += 1.0 - self.noise
        return E

    def prior(self) -> np.ndarray:
        p = np.zeros(self.n_states)
        p[np.arange(self.modes) * self.word_length] = self.initial
        return p

    def filter(self, prefix) -> np.ndarray:
        """Posterior over the hidden state of the last prefix token."""
        E = self.emission_matrix()
        T = self.transition_matrix()
        alpha = None
        for x in prefix:
            pred = self.prior() if alpha is None else alpha @ T
            alpha = pred * E[:, int(x)]
            alpha = alpha / alpha.sum()
        return alpha

    def next_dist(self, prefix) -> np.ndarray:
        prefix = list(prefix)
        pred = self.prior() if not prefix else self.filter(prefix) @ self.transition_matrix()
        p = pred @ self.emission_matrix()
        return p / p.sum()

    def sample(self, count: int, length: int, rng: np.random.Generator) -> np.ndarray:
        T = self.transition_matrix()
        E = self.emission_matrix()
        state = _draw(np.broadcast_to(self.prior(), (count, self.n_states)), rng)
        out = np.zeros((count, length), dtype=np.int64)
        for t in range(length):
            if t > 0:
                state = _draw(T[state], rng)
            out[:, t] = _draw(E[state], rng)
        return out


def make_teacher(
    kind: str,
    v: int,
    seed: int,
    *,
    order: int = 1,
    concentration: float = 0.5,
    modes: int = 2,
    word_length: int | None = None,
    noise: float = 0.02,
    random_transitions: bool = False,
):
    """Build a teacher; everything random is drawn from ``seed``."""
    rng = np.random.default_rng(seed)
    kind = kind.upper()
    if kind == NGRAM:
        table = rng.dirichlet(np.full(v, concentration), size=(v,) * order)
        return NgramTeacher(table)
    if kind == LATENT_CHAIN:
        word_length = v // modes if word_length is None else word_length
        if modes * word_length > v:
            raise ValueError(f"{modes} words of length {word_length} need at least {modes * word_length} tokens")
        words = rng.permutation(v)[: modes * word_length].reshape(modes, word_length)
        if random_transitions:
            trans = rng.dirichlet(np.ones(modes), size=modes)
        else:
            trans = np.full((modes, modes), 1.0 / modes)
        return LatentChainTeacher(words, trans, np.full(modes, 1.0 / modes), float(noise), v)
    raise ValueError(f"unknown teacher kind {kind!r}")
