import itertools
import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mtpc.circuits import BTREE, CP, FF, HMM, ArchitectureSpec
from mtpc.inference import ContractError
from mtpc.neural import DraftAdapter, Model, ParamHead, TargetSTP, encode, run_layers, target_next_dist
from mtpc.specdec import (
    GREEDY,
    SAMPLE,
    Session,
    _decode,
    ar_generate,
    greedy_spec_step,
    residual_dist,
    shared_state_decode,
    spec_step,
    unverified_step,
    vanilla_decode,
    vanilla_step,
    verify,
    write_trace,
)

from oracles import ar_law, empirical, total_variation

KINDS = [FF, CP, HMM, BTREE]


def toy(kind, n=2, v=3, seed=3, head_scale=1.0, k=1, L=2, d=4):
    r = 1 if kind == FF else 3
    model = Model.init(ArchitectureSpec(kind, n, r, v), d=d, L=L, k=k, rho=2, seed=seed, head_scale=head_scale, target_scale=1.0)
    if k:
        model = model.replace(adapter=DraftAdapter.init(d, k, 2, np.random.default_rng(5), zero=False))
    return model


def target_of(model):
    return lambda prefix: target_next_dist(model.target, encode(model.backbone, prefix))


def draws(model, prompt, m, runs, step=spec_step, seed=11):
    memo = {}
    out = [_decode(Session(model, prompt, np.random.default_rng([seed, i]), memo=memo), m, step)[:m] for i in range(runs)]
    return np.array(out)


def mirror_model(n, v=5, d=6, L=3, seed=0, sign=1.0):
    """FF draft whose every slot reuses the verifier unembedding (k = 0)."""
    model = Model.init(ArchitectureSpec(FF, n, 1, v), d=d, L=L, k=0, seed=seed)
    W = np.repeat(sign * model.target.U[None, None], n, axis=0)
    return model.replace(head=ParamHead(W, [], []))


def no_carry_step(session):
    out = spec_step(session)
    session.pending = None
    return out


class TestResidual:
    def test_disjoint(self):
        np.testing.assert_array_equal(residual_dist([1.0, 0.0], [0.0, 1.0]), [1.0, 0.0])

    def test_clipped_difference(self):
        np.testing.assert_allclose(residual_dist([0.7, 0.3], [0.5, 0.5]), [1.0, 0.0], atol=1e-15)

    def test_equal_rows_guarded(self):
        with pytest.raises(ContractError):
            residual_dist([0.2, 0.8], [0.2, 0.8])

    @settings(max_examples=50, deadline=None)
    @given(st.integers(0, 2**31), st.integers(2, 8))
    def test_simplex_and_support(self, seed, v):
        rng = np.random.default_rng(seed)
        p, q = rng.dirichlet(np.ones(v)), rng.dirichlet(np.ones(v))
        r = residual_dist(p, q)
        assert r.sum() == pytest.approx(1.0, abs=1e-12)
        assert np.all(r[p <= q] == 0)


def exact_verify_law(P, Q, v, n):
    """Law of the emitted sequence (accepted prefix + final token) by enumeration."""

    def cond(table, prefix):
        m = table[tuple(prefix)].reshape(v, -1).sum(axis=1)
        return m / m.sum()

    law = {}
    for x in itertools.product(range(v), repeat=n):
        qx = np.prod([cond(Q, x[:i])[x[i]] for i in range(n)])
        reach = qx
        for i in range(n):
            p_i, q_i = cond(P, x[:i]), cond(Q, x[:i])
            a = min(1.0, p_i[x[i]] / q_i[x[i]])
            if a < 1.0:
                r = residual_dist(p_i, q_i)
                for tok in range(v):
                    key = x[:i] + (tok,)
                    law[key] = law.get(key, 0.0) + reach * (1 - a) * r[tok]
            reach *= a
        p_n = cond(P, x)
        for tok in range(v):
            key = x + (tok,)
            law[key] = law.get(key, 0.0) + reach * p_n[tok]
    return law


class TestVerify:
    def test_identical_rows_accept_everything(self):
        rng = np.random.default_rng(0)
        rows = np.random.default_rng(1).dirichlet(np.ones(4), size=4)
        for _ in range(200):
            s, _ = verify([1, 2, 0], rows[:3], rows, rng)
            assert s == 3

    def test_disjoint_support_rejects_immediately(self):
        q = np.array([[1.0, 0.0, 0.0]] * 2)
        p = np.array([[0.0, 1.0, 0.0]] * 3)
        rng = np.random.default_rng(0)
        for _ in range(100):
            assert verify([0, 0], q, p, rng) == (0, 1)

    def test_zero_draft_probability(self):
        q = np.array([[0.0, 1.0], [0.5, 0.5]])
        with pytest.raises(ContractError):
            verify([0, 1], q, np.full((3, 2), 0.5), np.random.default_rng(0))

    @pytest.mark.parametrize("seed", range(2))
    def test_exhaustive_law(self, seed):
        v, n, trials = 3, 2, 100_000
        g = np.random.default_rng(seed)
        P = g.dirichlet(np.ones(v**3)).reshape(v, v, v)
        Q = g.dirichlet(np.ones(v**2)).reshape(v, v)

        def cond(table, prefix):
            m = table[tuple(prefix)].reshape(v, -1).sum(axis=1)
            return m / m.sum()

        exact = exact_verify_law(P, Q, v, n)
        assert sum(exact.values()) == pytest.approx(1.0, abs=1e-12)
        first = np.zeros(v)
        for key, prob in exact.items():
            first[key[0]] += prob
        np.testing.assert_allclose(first, cond(P, ()), atol=1e-12)

        rng = np.random.default_rng(seed + 100)
        flat = Q.ravel()
        counts = {}
        for _ in range(trials):
            x = np.unravel_index(rng.choice(v * v, p=flat), Q.shape)
            x = tuple(int(a) for a in x)
            q_rows = [cond(Q, x[:i]) for i in range(n)]
            p_rows = [cond(P, x[:i]) for i in range(n + 1)]
            s, tok = verify(x, q_rows, p_rows, rng)
            key = x[:s] + (tok,)
            counts[key] = counts.get(key, 0) + 1
        keys = set(exact) | set(counts)
        tv = 0.5 * sum(abs(exact.get(k, 0.0) - counts.get(k, 0) / trials) for k in keys)
        assert tv <= 0.01


class TestCycle:
    @pytest.mark.parametrize("kind", KINDS)
    def test_cycle_invariants(self, kind):
        model = toy(kind, n=3, v=4)
        session = Session(model, [0, 1, 2], np.random.default_rng(0))
        for _ in range(60):
            before = session.stats.cycles
            res = spec_step(session)
            assert session.stats.cycles == before + 1
            assert 1 <= len(res.emitted) <= 3 and 0 <= res.accepted <= 3
            if res.accepted == 0:
                assert res.free_token and len(res.emitted) == 1 and not session.s_state_set
            else:
                assert not res.free_token and res.emitted == res.drafted[: res.accepted]
                assert session.s_state_set

    def test_draft_equals_target_accepts_all(self):
        model = mirror_model(1)
        for mode in (SAMPLE, GREEDY):
            session = Session(model, [1, 2], np.random.default_rng(0), mode=mode)
            shared_state_decode(session, 40)
            assert session.stats.accepted == [1] * session.stats.cycles

    def test_trunk_state_tracks_committed_tokens(self):
        model = toy(CP, n=2)
        bb = model.backbone
        session = Session(model, [0], np.random.default_rng(1))
        for _ in range(30):
            if spec_step(session).accepted == 0:
                assert not session.s_state_set
                session.catch_up()
            pooled = bb.embed[session.tokens].mean(axis=0) + bb.last_embed[session.tokens[-1]]
            np.testing.assert_allclose(session.s_state, run_layers(pooled, bb.weights[:1], bb.biases[:1]), atol=1e-12)

    def test_bad_mode(self):
        with pytest.raises(ContractError):
            Session(toy(CP), [0], np.random.default_rng(0), mode="beam")


class TestCounters:
    @pytest.mark.parametrize("kind", KINDS)
    def test_s_forward_audit(self, kind):
        model = toy(kind, n=3, v=4)
        session = Session(model, [0, 3], np.random.default_rng(2))
        shared_state_decode(session, 300)
        st_ = session.stats
        assert st_.s_forwards == st_.cycles + st_.zero_accept_cycles
        assert st_.catchup_forwards == st_.zero_accept_cycles
        assert st_.v_forwards == st_.d_forwards == st_.cycles
        assert st_.prefill_forwards == 1
        assert st_.emitted == len(session.generated) >= 300

    def test_vanilla_pays_a_catch_up_every_cycle(self):
        session = Session(toy(CP, n=3, v=4), [0], np.random.default_rng(2))
        vanilla_decode(session, 100)
        assert session.stats.catchup_forwards == session.stats.cycles

    def test_trace_records(self, tmp_path):
        session = Session(toy(HMM, n=2), [0, 1], np.random.default_rng(0), trace=True)
        shared_state_decode(session, 20)
        path = tmp_path / "trace.jsonl"
        write_trace(session, path)
        recs = [json.loads(x) for x in path.read_text().splitlines()]
        assert len(recs) == session.stats.cycles
        assert set(recs[0]) == {"cycle", "drafted", "accepted_s", "emitted", "free_token", "s_forwards", "v_forwards", "d_forwards"}
        assert [r["cycle"] for r in recs] == list(range(1, len(recs) + 1))
        assert sum(len(r["emitted"]) for r in recs) == session.stats.emitted

    def test_unverified_emits_full_windows(self):
        session = Session(toy(BTREE, n=4, v=3), [0], np.random.default_rng(0))
        _decode(session, 40, unverified_step)
        assert session.stats.accepted == [4] * session.stats.cycles

    def test_length_guard(self):
        with pytest.raises(ContractError):
            shared_state_decode(Session(toy(CP), [0], np.random.default_rng(0)), 0)


class TestLossless:
    @pytest.mark.parametrize("kind", KINDS)
    def test_first_two_tokens(self, kind):
        model = toy(kind)
        law = ar_law(target_of(model), [0, 1], 3, 2)
        assert total_variation(empirical(draws(model, [0, 1], 2, 20_000), 3, 2), law) <= 0.015

    def test_first_token(self):
        model = toy(CP, n=3, v=4, head_scale=2.0)
        law = target_of(model)([2, 0])
        assert total_variation(empirical(draws(model, [2, 0], 1, 100_000), 4, 1), law) <= 0.01

    def test_vanilla_algorithm(self):
        model = toy(HMM, head_scale=2.0, seed=1)
        law = ar_law(target_of(model), [0, 1], 3, 2)
        got = draws(model, [0, 1], 2, 20_000, step=vanilla_step)
        assert total_variation(empirical(got, 3, 2), law) <= 0.015

    def test_dropping_the_carry_is_biased(self):
        model = toy(CP, head_scale=2.0, seed=1)
        law = ar_law(target_of(model), [0, 1], 3, 2)
        good = total_variation(empirical(draws(model, [0, 1], 2, 20_000), 3, 2), law)
        bad = total_variation(empirical(draws(model, [0, 1], 2, 20_000, step=no_carry_step), 3, 2), law)
        assert good <= 0.015 and bad > 0.05

    def test_memo_does_not_change_output(self):
        model = toy(BTREE, n=3, v=4)
        memo = {}
        for i in range(20):
            a = shared_state_decode(Session(model, [1], np.random.default_rng(i)), 12)
            b = shared_state_decode(Session(model, [1], np.random.default_rng(i), memo=memo), 12)
            assert a == b


class TestGreedy:
    @pytest.mark.parametrize("kind", KINDS)
    def test_identical_to_ar(self, kind):
        model = toy(kind, n=3, v=5, d=6, L=3, head_scale=1.0)
        rng = np.random.default_rng(0)
        for _ in range(25):
            prompt = rng.integers(0, 5, size=rng.integers(1, 6)).tolist()
            session = Session(model, prompt, np.random.default_rng(0), mode=GREEDY)
            out = shared_state_decode(session, 24)
            assert out[:24] == ar_generate(model.backbone, model.target, prompt, 24, GREEDY)

    def test_anti_argmax_draft(self):
        model = mirror_model(3, sign=-1.0)
        session = Session(model, [0, 4], np.random.default_rng(0), mode=GREEDY)
        out = shared_state_decode(session, 30)
        assert set(session.stats.accepted) == {0}
        assert session.stats.cycles == 30
        assert out == ar_generate(model.backbone, model.target, [0, 4], 30, GREEDY)

    def test_greedy_step_is_deterministic(self):
        model = toy(CP, n=3, v=4)
        a = [greedy_spec_step(Session(model, [2], np.random.default_rng(s), mode=GREEDY)).emitted for s in range(3)]
        assert a[0] == a[1] == a[2]


class TestAutoregressive:
    def test_greedy_deterministic(self):
        model = toy(CP, v=5, d=6)
        assert ar_generate(model.backbone, model.target, [1], 10, GREEDY) == ar_generate(model.backbone, model.target, [1], 10, GREEDY)

    def test_sampling_reproducible(self):
        model = toy(CP, v=5, d=6)
        a = ar_generate(model.backbone, model.target, [1], 10, SAMPLE, np.random.default_rng(4))
        b = ar_generate(model.backbone, model.target, [1], 10, SAMPLE, np.random.default_rng(4))
        assert a == b

    def test_uniform_target(self):
        model = toy(CP, v=4)
        out = ar_generate(model.backbone, TargetSTP(np.zeros((4, 4))), [0], 100_000, SAMPLE, np.random.default_rng(0))
        assert total_variation(np.bincount(out, minlength=4) / len(out), np.full(4, 0.25)) <= 0.01

    def test_matches_encode(self):
        model = toy(HMM, v=4, d=5, L=3)
        out = ar_generate(model.backbone, model.target, [3, 1], 6, GREEDY)
        prefix = [3, 1]
        for x in out:
            assert x == int(np.argmax(target_next_dist(model.target, encode(model.backbone, prefix))))
            prefix.append(x)

    def test_contract(self):
        model = toy(CP)
        with pytest.raises(ContractError):
            ar_generate(model.backbone, model.target, [0], 3, SAMPLE)
        with pytest.raises(ContractError):
            ar_generate(model.backbone, model.target, [0], 0, GREEDY)
