"""Acceptance gate: one PASS/FAIL line per criterion.

Criteria 4 to 7 need six full training runs (see ``acceptance_runs``); the
first session trains them, later sessions reuse the cached outputs.
"""
import itertools
import time

import numpy as np
import pytest
from acceptance_runs import CONDITIONS, SEEDS, STEPS, dataset, run
from oracles import edit_distance, naive_chunk_weights, path_alignment
from test_model import tiny_model_gradient_error
from test_numerics import OPS

from mmastream import synthdata
from mmastream.decoding import BeamConfig
from mmastream.metrics import boundary_coverage, boundary_spread_violations, evaluate, streamability, word_error_rate
from mmastream.monoattn import chunkwise_weights, expected_alignment
from mmastream.numerics import Tensor, embedding, precision, tsum
from mmastream.numerics.gradcheck import gradcheck

RESULTS: list[str] = []


def report(capsys, n: int, ok: bool, detail: str) -> None:
    line = f"CRITERION {n}: {'PASS' if ok else 'FAIL'} - {detail}"
    RESULTS.append(line)
    with capsys.disabled():
        print("\n" + line)
    assert ok, line


# -- property criteria ------------------------------------------------------

def test_criterion_1_alignment_oracle(capsys):
    rng = np.random.default_rng(1)
    shapes = list(itertools.product(range(1, 5), range(1, 7)))
    start = time.perf_counter()
    worst, n = 0.0, 0
    with precision(np.float64):
        for k in range(216):
            u, t = shapes[k % len(shapes)]
            p = rng.uniform(0.01, 0.99, size=(u, t))
            worst = max(worst, float(np.abs(expected_alignment(Tensor(p)).data - path_alignment(p)).max()))
            n += 1
    secs = time.perf_counter() - start
    report(capsys, 1, worst <= 1e-6 and secs < 10,
           f"{n} matrices over all U<=4, T<=6: max abs diff {worst:.2e} (<= 1e-6), {secs:.2f}s (< 10s)")


def test_criterion_2_gradient_suite(capsys):
    start = time.perf_counter()
    worst = {}
    for name, (fn, shapes) in OPS.items():
        for seed in range(10):
            rng = np.random.default_rng(seed)
            inputs = [rng.uniform(0.5, 2.0, size=s) for s in shapes]
            if name == "relu":
                inputs = [np.where(np.abs(x - 1.25) < 0.01, x + 0.05, x) for x in inputs]
            worst[name] = max(worst.get(name, 0.0), gradcheck(fn, inputs))
    rng = np.random.default_rng(0)
    ids = np.array([[0, 2, 2], [1, 0, 3]])
    worst["embedding"] = gradcheck(lambda w: tsum(embedding(w, ids) ** 2), [rng.normal(size=(4, 3))])
    weights = rng.normal(size=(2, 3, 5))
    worst["expected_alignment"] = gradcheck(lambda p: tsum(expected_alignment(p) * weights),
                                            [rng.uniform(0.05, 0.95, size=(2, 3, 5))])
    w5 = rng.normal(size=(1, 2, 1, 3, 5))
    worst["chunkwise_weights"] = gradcheck(lambda a, u: tsum(chunkwise_weights(a, u, 3) * w5),
                                           [rng.random((1, 2, 3, 5)), rng.normal(size=(1, 1, 3, 5))])
    worst["tiny_model"] = tiny_model_gradient_error()
    secs = time.perf_counter() - start
    name, err = max(worst.items(), key=lambda kv: kv[1])
    report(capsys, 2, err <= 1e-3 and secs < 60,
           f"{len(worst)} checks, worst rel err {err:.2e} ({name}) (<= 1e-3), {secs:.1f}s (< 60s)")


def test_criterion_3_mass_conservation(capsys):
    rng = np.random.default_rng(3)
    worst, oracle, clipped = 0.0, 0.0, 0
    for _ in range(100):
        n_u, n_t = int(rng.integers(1, 6)), int(rng.integers(1, 10))
        w = int(rng.integers(1, n_t + 1))
        clipped += w > 1
        alpha = expected_alignment(Tensor(rng.uniform(0.05, 0.95, size=(1, 2, n_u, n_t))))
        u = Tensor(rng.normal(scale=2.0, size=(1, 1, n_u, n_t)))
        beta = chunkwise_weights(alpha, u, w).data
        worst = max(worst, float(np.abs(beta.sum(-1) - alpha.data[:, :, None].sum(-1)).max()))
        oracle = max(oracle, float(np.abs(beta[0, 0, 0] - naive_chunk_weights(alpha.data[0, 0], u.data[0, 0], w)).max()))
    report(capsys, 3, worst <= 1e-6,
           f"100 configs ({clipped} with clipped windows, w up to T): "
           f"max |sum beta - sum alpha| {worst:.2e} (<= 1e-6); naive oracle diff {oracle:.1e}")


def _golden(tokens, frames, failures, n_frames=10):
    return {"tokens": tokens, "n_frames": n_frames, "total_heads": len(frames[0][0]),
            "boundary_log": [{"step": i + 1, "frames": f, "read": 0} for i, f in enumerate(frames)],
            "beam_log": [{"step": i + 1, "candidates": 1, "failures": x} for i, x in enumerate(failures)]}


def test_criterion_8_metric_goldens(capsys):
    s = 11
    full = _golden([1, 2], [[[1, 2]], [[3, 4]]], [0, 0])
    half = _golden([1, 2], [[[1, s]], [[3, s]]], [0, 0])
    failed = _golden([1, 2], [[[1, 2]], [[3, 4]]], [0, 1])
    cov = [boundary_coverage([full]), boundary_coverage([half]), boundary_coverage([full, half])]
    strm = [streamability([failed, failed]), streamability([full, failed]), streamability([full, full])]
    ok = cov == [100.0, 50.0, 75.0] and strm == [0.0, 50.0, 100.0]
    report(capsys, 8, ok, f"R_cov {cov} (want [100, 50, 75]); R_str {strm} (want [0, 50, 100])")


def test_criterion_9_wer_oracle(capsys):
    rng = np.random.default_rng(9)
    mismatches = 0
    for _ in range(1000):
        hyp = rng.integers(0, 5, size=int(rng.integers(0, 10))).tolist()
        ref = rng.integers(0, 5, size=int(rng.integers(1, 10))).tolist()
        mismatches += word_error_rate(hyp, ref) != 100.0 * edit_distance(hyp, ref) / len(ref)
    report(capsys, 9, mismatches == 0, f"{mismatches} mismatches against the DP reference over 1000 pairs")


# -- end-to-end criteria ------------------------------------------------------

@pytest.fixture(scope="module")
def runs():
    return {(c, s): run(c, s) for s in SEEDS for c in CONDITIONS}


def _metrics(records):
    test = dataset()["test"]
    refs = {s.id: s.tokens for s in test}
    truth = {s.id: synthdata.stacked_boundaries(s.true_boundaries, 4) for s in test}
    return evaluate(records, refs, truth)


def test_criterion_4_end_to_end(capsys, runs):
    r = runs[("regularized", 0)]
    rep = _metrics(r["records"]["head-sync"])
    secs = r["train_seconds"]
    ok = rep.wer_percent <= 10.0 and secs < 15 * 60
    report(capsys, 4, ok, f"default config, seed 0, {STEPS} steps: test WER {rep.wer_percent:.2f}% (<= 10%), "
                          f"training {secs / 60:.1f} min (< 15 min)")


def test_criterion_5_headdrop_trend(capsys, runs):
    parts, ok = [], True
    for seed in SEEDS:
        reg = _metrics(runs[("regularized", seed)]["records"]["standard"])
        base = _metrics(runs[("baseline", seed)]["records"]["standard"])
        ok &= reg.r_cov_percent > base.r_cov_percent and reg.r_str_percent > base.r_str_percent
        ok &= reg.r_cov_percent >= 95.0
        parts.append(f"s{seed} R_cov {reg.r_cov_percent:.2f} vs {base.r_cov_percent:.2f}, "
                     f"R_str {reg.r_str_percent:.1f} vs {base.r_str_percent:.1f}")
    report(capsys, 5, ok, "HeadDrop+D_lm=3 vs none+D_lm=0 (standard decoding): " + "; ".join(parts))


def test_criterion_6_head_sync_trend(capsys, runs):
    parts, ok = [], True
    for seed in SEEDS:
        hs = _metrics(runs[("regularized", seed)]["records"]["head-sync"])
        sd = _metrics(runs[("regularized", seed)]["records"]["standard"])
        ok &= hs.r_str_percent >= sd.r_str_percent and abs(hs.wer_percent - sd.wer_percent) <= 1.0
        parts.append(f"s{seed} R_str {hs.r_str_percent:.1f} vs {sd.r_str_percent:.1f}, "
                     f"WER {hs.wer_percent:.2f} vs {sd.wer_percent:.2f}")
    info = []
    for seed in SEEDS:
        hs = _metrics(runs[("baseline", seed)]["records"]["head-sync"])
        sd = _metrics(runs[("baseline", seed)]["records"]["standard"])
        info.append(f"s{seed} R_str {hs.r_str_percent:.1f}/{sd.r_str_percent:.1f} "
                    f"WER {hs.wer_percent:.2f}/{sd.wer_percent:.2f}")
    with capsys.disabled():
        print("\n  (baseline checkpoints, head-sync/standard, for reference: " + "; ".join(info) + ")")
    report(capsys, 6, ok, "head-sync vs standard on the default checkpoints: " + "; ".join(parts))


def test_criterion_7_latency_bound(capsys, runs):
    eps = BeamConfig().eps_wait
    n_rec = n_steps = bad = 0
    for r in runs.values():
        for rec in r["records"]["head-sync"]:
            n_rec += 1
            n_steps += len(rec["boundary_log"])
            bad += boundary_spread_violations(rec, eps)
    report(capsys, 7, bad == 0, f"{bad} violations of max_h t - min_h t < {eps} over {n_rec} head-sync decodes "
                                f"({n_steps} logged steps)")
