import logging

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mmastream.decoding import (
    EXHAUSTED,
    FORCED,
    NATURAL,
    NONE,
    BeamConfig,
    DecodeError,
    Hypothesis,
    NullLM,
    beam_search,
    head_sync_decode,
    prune,
    scan_layer,
    standard_decode,
    teacher_forced_hard,
    to_record,
)
from mmastream.metrics import boundary_coverage, boundary_spread_violations
from mmastream.model import EOS, SOS, MMATransformer, ModelConfig

CFG = dict(d_in=2, vocab_size=7, d_model=16, d_ff=32, n_heads=2, n_heads_ma=4, n_heads_ca=1, chunk_width=2,
           n_enc_layers=1, n_dec_layers=3, d_lm=1, frame_stack_factor=1, dropout=0.0)


def make_model(seed=0, r=None, **over):
    model = MMATransformer(ModelConfig(**{**CFG, **over}), seed=seed)
    if r is not None:
        for layer in model.mma_layers:
            layer.mma.r.data[:] = r
    return model


def encoded(model, n_frames=10, seed=0):
    x = np.random.default_rng(seed).normal(size=(n_frames, 2))
    h, _ = model.encode([x])
    return h.data[0]


# -- boundary scan ----------------------------------------------------------

def test_scan_forces_lagging_head():
    p = np.array([[[0.9, 0.1, 0.1, 0.1, 0.1], [0.1] * 5]])
    t, kinds, high = scan_layer(p, np.ones((1, 2), dtype=int), eps_wait=2)
    assert t.tolist() == [[1, 1]]
    assert kinds.tolist() == [[NATURAL, FORCED]]
    assert high.tolist() == [2]


def test_scan_all_active_is_natural():
    p = np.full((1, 3, 6), 0.9)
    t, kinds, _ = scan_layer(p, np.array([[2, 3, 4]]), eps_wait=8)
    assert t.tolist() == [[2, 3, 4]] and (kinds == NATURAL).all()


def test_scan_exhausted_and_silent_layers():
    p = np.array([[[0.1, 0.1, 0.9], [0.1, 0.1, 0.1]]])
    t, kinds, _ = scan_layer(p, np.ones((1, 2), dtype=int), eps_wait=5)
    assert t.tolist() == [[3, 3]] and kinds.tolist() == [[NATURAL, EXHAUSTED]]
    silent = np.full((1, 2, 3), 0.1)
    t, kinds, high = scan_layer(silent, np.array([[2, 3]]), eps_wait=5)
    assert t.tolist() == [[2, 3]] and (kinds == NONE).all() and high.tolist() == [3]


def test_standard_scan_leaves_dead_head():
    p = np.array([[[0.1, 0.9, 0.1], [0.1, 0.1, 0.1]]])
    t, kinds, _ = scan_layer(p, np.array([[1, 2]]), eps_wait=None)
    assert t.tolist() == [[2, 2]] and kinds.tolist() == [[NATURAL, NONE]]


@settings(max_examples=200, deadline=None)
@given(st.integers(1, 6), st.integers(1, 12), st.integers(1, 5), st.integers(0, 2**31 - 1))
def test_scan_invariants(n_heads, n_frames, eps, seed):
    rng = np.random.default_rng(seed)
    t_prev = np.ones((1, n_heads), dtype=int)
    for _ in range(6):
        p = rng.random((1, n_heads, n_frames)) ** 2
        t, kinds, high = scan_layer(p, t_prev, eps)
        assert (t >= t_prev).all() and (t <= n_frames).all()
        if (kinds != NONE).any():
            assert (kinds == NATURAL).any()
            assert t.max() - t.min() < eps
            assert high[0] >= t.max()
        t_prev = t


# -- pruning ----------------------------------------------------------------

def hyp(tokens, score):
    return Hypothesis([SOS, *tokens], score=score)


def test_prune_moves_eos_and_keeps_top():
    beam, fin = prune([hyp([5], -1.0), hyp([EOS], -0.5), hyp([6], -2.0)], [], 2)
    assert [h.tokens for h in fin] == [[SOS, EOS]] and fin[0].finished
    assert [h.tokens for h in beam] == [[SOS, 5], [SOS, 6]]


def test_prune_all_eos_and_empty():
    beam, fin = prune([hyp([5, EOS], -1.0), hyp([6, EOS], -2.0)], [], 2)
    assert beam == [] and len(fin) == 2
    with pytest.raises(DecodeError):
        prune([], [], 2)


def test_prune_ties_are_deterministic():
    cands = [hyp([6, 4], -1.0), hyp([5], -1.0), hyp([4, 4], -1.0), hyp([3, 9], -1.0)]
    orders = {tuple(tuple(h.tokens) for h in prune(list(c), [], 3)[0]) for c in (cands, cands[::-1])}
    assert orders == {((SOS, 5), (SOS, 3, 9), (SOS, 4, 4))}


def test_prune_caps_finished():
    old = [hyp([5, EOS], -0.1), hyp([6, EOS], -0.2)]
    _, fin = prune([hyp([7, EOS], -0.05), hyp([8], -3.0)], old, 2)
    assert [h.tokens[1] for h in fin] == [7, 5]


# -- search -----------------------------------------------------------------

def greedy_reference(model, h, eps, max_len):
    """Argmax chain re-running the whole prefix through the uncached hard-attention decoder."""
    toks = [SOS]
    total = 0.0
    for _ in range(max_len):
        lp, _, _ = teacher_forced_hard(model, h, toks, eps)
        nxt = int(np.argmax(lp[-1]))
        total += float(lp[-1, nxt])
        toks.append(nxt)
        if nxt == EOS:
            break
    return toks, total


@pytest.mark.parametrize("seed", [0, 1, 2])
@pytest.mark.parametrize("sync", [True, False])
def test_beam_one_is_greedy(seed, sync):
    model = make_model(seed, r=0.5)
    h = encoded(model, seed=seed)
    cfg = BeamConfig(beam=1, beta_len=0.0, alpha_lm=0.0, max_len=8, eps_wait=3)
    res = beam_search(model, h, cfg, sync=sync)
    toks, total = greedy_reference(model, h, 3 if sync else None, 8)
    assert res.best.tokens == toks
    assert res.best.log_prob_mma == pytest.approx(total, abs=1e-4)


def test_score_decomposition_and_reference_boundaries():
    model = make_model(3, r=0.0)
    h = encoded(model, seed=3)
    cfg = BeamConfig(beam=4, eps_wait=3, max_len=8)
    res = head_sync_decode(model, h, cfg)
    for best in res.hypotheses:
        assert best.score == pytest.approx(best.log_prob_mma + cfg.alpha_lm * best.lm_score
                                           + cfg.beta_len * best.length, abs=1e-9)
        lp, bnd, _ = teacher_forced_hard(model, h, best.tokens[:-1], cfg.eps_wait)
        assert best.log_prob_mma == pytest.approx(sum(lp[i, best.tokens[i + 1]] for i in range(len(lp))), abs=1e-4)
        logged = np.array([e["frames"] for e in best.boundary_log])
        n = len(h)
        np.testing.assert_array_equal(np.where(logged == n + 1, bnd, logged), bnd)


def test_always_active_model_makes_sync_vacuous():
    model = make_model(4, r=60.0)
    h = encoded(model, seed=4)
    cfg = BeamConfig(beam=3, max_len=6)
    a, b = head_sync_decode(model, h, cfg), standard_decode(model, h, cfg)
    assert [x.tokens for x in a.hypotheses] == [x.tokens for x in b.hypotheses]
    assert a.best.score == pytest.approx(b.best.score, abs=1e-6)
    rec = to_record(a, "u")
    assert rec["forced_count"] == 0 and rec["streamable"]
    assert all(k == "natural" for e in rec["boundary_log"] for row in e["kinds"] for k in row)
    assert all(f == 1 for e in rec["boundary_log"] for row in e["frames"] for f in row)


def test_dead_head_shows_sentinel_under_standard_decoding():
    model = make_model(5, r=60.0)
    model.mma_layers[0].mma.r.data[1] = -60.0
    model.out.bias.data[EOS] = -1e4  # keep hypotheses non-empty
    h = encoded(model, seed=5)
    res = standard_decode(model, h, BeamConfig(beam=2, max_len=5))
    rec = to_record(res, "u")
    assert all(e["frames"][0][1] == len(h) + 1 for e in rec["boundary_log"])
    assert not rec["streamable"]
    assert boundary_coverage([rec]) == pytest.approx(100 * 7 / 8)
    sync = to_record(head_sync_decode(model, h, BeamConfig(beam=2, max_len=5)), "u")
    assert sync["forced_count"] > 0 and sync["streamable"]


@pytest.mark.parametrize("seed", range(8))
def test_wider_beam_scores_at_least_as_well(seed):
    model = make_model(seed, r=0.0)
    model.out.bias.data[EOS] = 3.0  # random weights rarely stop otherwise
    h = encoded(model, seed=seed)
    one = head_sync_decode(model, h, BeamConfig(beam=1, beta_len=0.0, max_len=30))
    two = head_sync_decode(model, h, BeamConfig(beam=2, beta_len=0.0, max_len=30))
    assert not one.unfinished and not two.unfinished
    assert two.best.score >= one.best.score - 1e-9


@pytest.mark.parametrize("seed", range(6))
def test_head_sync_invariants(seed):
    model = make_model(seed, r=float(np.random.default_rng(seed).normal()))
    h = encoded(model, n_frames=14, seed=seed)
    res = head_sync_decode(model, h, BeamConfig(beam=4, eps_wait=3, max_len=10))
    for hyp_ in res.hypotheses:
        rec = {"n_frames": len(h), "boundary_log": hyp_.boundary_log}
        assert boundary_spread_violations(rec, 3) == 0
        frames = np.array([e["frames"] for e in hyp_.boundary_log])
        kinds = np.array([e["kinds"] for e in hyp_.boundary_log])
        live = np.where(frames == len(h) + 1, 0, frames)
        assert (np.diff(np.maximum.accumulate(live, axis=0), axis=0) >= 0).all()
        for step_kinds in kinds:
            for layer in step_kinds:
                assert "natural" in layer or set(layer) == {"none"}


def test_frames_beyond_high_water_mark_are_never_used():
    model = make_model(7, r=1.0)
    h = encoded(model, n_frames=30, seed=7)
    cfg = BeamConfig(beam=1, eps_wait=2, max_len=4)
    res = head_sync_decode(model, h, cfg)
    read = max(e["read"] for e in res.best.boundary_log)
    assert read < len(h)
    h2 = h.copy()
    h2[read:] = np.random.default_rng(0).normal(size=h2[read:].shape)
    res2 = head_sync_decode(model, h2, cfg)
    assert res2.best.tokens == res.best.tokens
    assert res2.best.score == pytest.approx(res.best.score, abs=1e-9)


def test_unfinished_returns_partial_with_flag(caplog):
    model = make_model(0, r=0.0)
    model.out.bias.data[EOS] = -1e4
    with caplog.at_level(logging.WARNING):
        res = head_sync_decode(model, encoded(model), BeamConfig(beam=2, max_len=3))
    assert res.unfinished and len(res.best.tokens) == 4
    assert "eos" in caplog.text


def test_null_lm_and_fusion():
    lm = NullLM(7)
    out = lm.score_next([SOS])
    assert abs(np.logaddexp.reduce(out)) < 1e-5

    class Favour:
        def score_next(self, prefix):
            v = np.full(7, -20.0)
            v[4] = 0.0
            return v - np.logaddexp.reduce(v)

    model = make_model(1, r=0.0)
    res = head_sync_decode(model, encoded(model), BeamConfig(beam=2, alpha_lm=5.0, max_len=4), Favour())
    assert set(res.best.tokens[1:]) <= {4, EOS}


def test_bad_inputs():
    model = make_model()
    with pytest.raises(ValueError):
        beam_search(model, np.zeros((0, 16)), BeamConfig())
    with pytest.raises(ValueError):
        BeamConfig(beam=0)
