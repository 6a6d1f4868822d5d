import itertools
import warnings

import numpy as np
import pytest

from mmastream.synthdata import (
    DatasetError,
    TaskConfig,
    generate,
    load,
    load_split,
    prototypes,
    save,
    sha256_file,
    stacked_boundaries,
    write_dataset,
)

SMALL = dict(n_train=30, n_dev=5, n_test=5)


def test_noiseless_unit_spans_are_prototype_sequence():
    cfg = TaskConfig(noise_sigma=0.0, d_min=1, d_max=1, **SMALL)
    protos = prototypes(cfg)
    for s in generate(cfg)["train"]:
        np.testing.assert_array_equal(s.frames, protos[s.tokens].astype(np.float32))
        assert s.true_boundaries == list(range(1, len(s.tokens) + 1))


def test_span_arithmetic():
    cfg = TaskConfig(d_min=2, d_max=4, u_min=3, u_max=3, **SMALL)
    for s in generate(cfg)["train"]:
        assert 6 <= len(s.frames) <= 12
        spans = np.diff([0, *s.true_boundaries])
        assert ((spans >= 2) & (spans <= 4)).all()
        assert s.true_boundaries[-1] == len(s.frames)


def test_config_validation():
    with pytest.raises(ValueError):
        TaskConfig(d_min=5, d_max=4)
    with pytest.raises(ValueError):
        TaskConfig(vocab_size=1)
    with pytest.raises(ValueError):
        TaskConfig.from_dict({"colour": 1})


def test_fixed_seed_gives_identical_files(tmp_path):
    cfg = TaskConfig(**SMALL)
    a, b = write_dataset(cfg, tmp_path / "a"), write_dataset(cfg, tmp_path / "b")
    for split in ("train", "dev", "test"):
        assert sha256_file(a.parent / f"{split}.jsonl") == sha256_file(b.parent / f"{split}.jsonl")
    assert a.read_text() == b.read_text()
    other = write_dataset(TaskConfig(seed=1, **SMALL), tmp_path / "c")
    assert sha256_file(other.parent / "train.jsonl") != sha256_file(a.parent / "train.jsonl")


def test_round_trip(tmp_path):
    samples = generate(TaskConfig(n_train=10, n_dev=0, n_test=0))["train"]
    save(samples, tmp_path / "x.jsonl")
    back = load(tmp_path / "x.jsonl")
    assert len(back) == 10
    for s, r in zip(samples, back):
        assert (s.id, s.tokens, s.true_boundaries) == (r.id, r.tokens, r.true_boundaries)
        np.testing.assert_array_equal(s.frames, r.frames)
        assert r.frames.dtype == np.float32


def test_truncated_line_names_line(tmp_path):
    samples = generate(TaskConfig(n_train=3, n_dev=0, n_test=0))["train"]
    path = tmp_path / "x.jsonl"
    save(samples, path)
    lines = path.read_text().splitlines()
    lines[1] = lines[1][: len(lines[1]) // 2]
    path.write_text("\n".join(lines) + "\n")
    with pytest.raises(DatasetError, match=r"x\.jsonl:2"):
        load(path)


def test_empty_file_is_empty_dataset(tmp_path):
    (tmp_path / "e.jsonl").write_text("")
    assert load(tmp_path / "e.jsonl") == []


def test_nearest_prototype_oracle_is_perfect():
    cfg = TaskConfig(noise_sigma=0.0, **SMALL)
    protos = prototypes(cfg)
    for s in generate(cfg)["train"]:
        dist = ((s.frames[:, None, :] - protos[None]) ** 2).sum(-1)
        per_frame = dist.argmin(1)
        spans = np.diff([0, *s.true_boundaries])
        np.testing.assert_array_equal(per_frame, np.repeat(s.tokens, spans))
        collapsed = [k for k, _ in itertools.groupby(per_frame)]
        assert collapsed == [k for k, _ in itertools.groupby(s.tokens)]


def test_splits_are_disjoint_and_prototypes_shared():
    splits = generate(TaskConfig(n_train=200, n_dev=50, n_test=50))
    seqs = [tuple(s.tokens) for part in splits.values() for s in part]
    assert len(seqs) == len(set(seqs)) == 300


def test_stacked_boundaries():
    assert stacked_boundaries([4, 9, 13], 4) == [1, 3, 4]
    for s in generate(TaskConfig(**SMALL))["train"]:
        st = s.stacked_boundaries(4)
        assert all(a < b for a, b in zip(st, st[1:]))
        assert st[-1] <= -(-len(s.frames) // 4)


def test_duplicate_risk_warning():
    with pytest.warns(UserWarning, match="duplicate"):
        generate(TaskConfig(vocab_size=2, u_min=2, u_max=6, n_train=5, n_dev=0, n_test=0))
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        generate(TaskConfig(**SMALL))


def test_load_split_from_manifest(tmp_path):
    mpath = write_dataset(TaskConfig(**SMALL), tmp_path)
    assert len(load_split(mpath, "dev")) == 5
    with pytest.raises(DatasetError):
        load_split(mpath, "holdout")
