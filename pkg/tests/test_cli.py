import csv
import json

import pytest

from mmastream.cli import RunConfig, main, parse_overrides
from mmastream.model import load_model, save_model

TINY = {
    "vocab_size": 6, "d_in": 3, "d_min": 2, "d_max": 3, "u_min": 2, "u_max": 3,
    "n_train": 24, "n_dev": 4, "n_test": 4,
    "d_model": 8, "d_ff": 16, "n_heads": 2, "n_heads_ma": 2, "chunk_width": 2,
    "n_enc_layers": 1, "n_dec_layers": 2, "d_lm": 1, "frame_stack_factor": 2,
    "steps": 3, "batch_size": 4, "warmup": 2,
    "beam": 2, "max_len": 6,
}


@pytest.fixture
def workdir(tmp_path):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({**TINY, "data_dir": str(tmp_path / "data"), "out_dir": str(tmp_path / "run")}))
    assert main(["gen-data", "--config", str(cfg)]) == 0
    return tmp_path, cfg


def test_overrides_and_precedence(tmp_path):
    assert parse_overrides(["--beam", "3", "--mode=standard"]) == {"beam": "3", "mode": "standard"}
    cfg = RunConfig.from_sources({"beam": 4, "eps_wait": 5}, {"beam": "3", "headdrop": "false"})
    assert (cfg.beam, cfg.eps_wait, cfg.headdrop) == (3, 5, False)
    assert cfg.model_config().p_hd == 0.0
    with pytest.raises(ValueError):
        RunConfig.from_sources({"bogus": 1}, {})


def test_usage_errors_exit_one(tmp_path, capsys):
    assert main(["fly"]) == 1
    assert main(["train", "--no-such-key", "1"]) == 1
    assert main(["train", "--beam", "zero"]) == 1
    assert main(["decode", "--mode", "sideways"]) == 1
    assert main(["train", "--config", str(tmp_path / "missing.json")]) == 1
    assert "error" in capsys.readouterr().err


def test_runtime_failure_exits_two_and_cleans_up(tmp_path):
    out = tmp_path / "run"
    assert main(["train", "--data-dir", str(tmp_path / "nodata"), "--out-dir", str(out)]) == 2
    assert not out.exists() or not any(out.iterdir())


def test_partial_outputs_removed(workdir, monkeypatch):
    tmp, cfg = workdir
    import mmastream.cli as cli

    def boom(*a, **k):
        raise RuntimeError("disk on fire")

    monkeypatch.setattr(cli, "write_loss_csv", boom)
    assert main(["train", "--config", str(cfg)]) == 2
    assert not (tmp / "run" / "model.ckpt").exists()


def test_pipeline_end_to_end(workdir, capsys):
    tmp, cfg = workdir
    run = tmp / "run"
    assert {p.name for p in (tmp / "data").iterdir()} >= {"train.jsonl", "dev.jsonl", "test.jsonl",
                                                          "manifest.json", "gen-data.config.json"}
    assert main(["train", "--config", str(cfg)]) == 0
    assert (run / "model.ckpt").exists()
    rows = list(csv.DictReader(open(run / "loss.csv")))
    assert len(rows) == 3 and set(rows[0]) == {"step", "loss", "lr"}
    for mode in ("head-sync", "standard"):
        assert main(["decode", "--config", str(cfg), "--mode", mode]) == 0
        assert main(["eval", "--config", str(cfg), "--mode", mode]) == 0
        summary = json.loads(capsys.readouterr().out.strip().splitlines()[-1])
        assert {"wer_percent", "r_cov_percent", "r_str_percent"} <= set(summary)
        assert (run / f"decode.test.{mode}.metrics.csv").exists()
        assert (run / f"decode.test.{mode}.utterances.csv").exists()
    recs = [json.loads(x) for x in open(run / "decode.test.head-sync.jsonl")]
    assert len(recs) == 4 and {"tokens", "boundary_log", "beam_log"} <= set(recs[0])
    assert main(["align", "--config", str(cfg), "--align-n", "2"]) == 0
    rows = list(csv.DictReader(open(run / "align.test.csv")))
    assert rows and set(rows[0]) == {"id", "layer", "head", "output_step", "frame", "alpha", "boundary"}
    assert len({r["id"] for r in rows}) == 2
    for name in ("train", "decode", "eval", "align"):
        assert (run / f"{name}.config.json").exists()


def test_resolved_config_reproduces_bit_exact(workdir):
    tmp, cfg = workdir
    run = tmp / "run"
    assert main(["train", "--config", str(cfg)]) == 0
    assert main(["decode", "--config", str(cfg)]) == 0
    first_ckpt = (run / "model.ckpt").read_bytes()
    first_dec = (run / "decode.test.head-sync.jsonl").read_bytes()
    resolved = tmp / "resolved.json"
    resolved.write_text((run / "decode.config.json").read_text())
    run.rename(tmp / "first")
    assert main(["train", "--config", str(resolved)]) == 0
    assert main(["decode", "--config", str(resolved)]) == 0
    assert (run / "model.ckpt").read_bytes() == first_ckpt
    assert (run / "decode.test.head-sync.jsonl").read_bytes() == first_dec


def test_modes_agree_on_always_active_model(workdir):
    tmp, cfg = workdir
    assert main(["train", "--config", str(cfg)]) == 0
    ckpt = tmp / "run" / "model.ckpt"
    model, extra = load_model(ckpt)
    for layer in model.mma_layers:
        layer.mma.r.data[:] = 60.0
    save_model(model, ckpt, {k: v for k, v in extra.items() if k != "model"})
    for mode in ("head-sync", "standard"):
        assert main(["decode", "--config", str(cfg), "--mode", mode]) == 0
    toks = [[json.loads(x)["tokens"] for x in open(tmp / "run" / f"decode.test.{m}.jsonl")]
            for m in ("head-sync", "standard")]
    assert toks[0] == toks[1]


def test_eval_golden_file(workdir, capsys):
    tmp, cfg = workdir
    test = [json.loads(x) for x in open(tmp / "data" / "test.jsonl")][:2]
    n = 3

    def rec(sample, frames, failures):
        return {"id": sample["id"], "tokens": sample["tokens"], "n_frames": n, "total_heads": 2,
                "boundary_log": [{"step": i + 1, "frames": [f], "read": 1} for i, f in enumerate(frames)],
                "beam_log": [{"step": i + 1, "candidates": 2, "failures": x} for i, x in enumerate(failures)]}

    u = [len(s["tokens"]) for s in test]
    path = tmp / "golden.jsonl"
    with open(path, "w") as fh:
        fh.write(json.dumps(rec(test[0], [[1, 2]] * (u[0] + 1), [0] * (u[0] + 1))) + "\n")
        fh.write(json.dumps(rec(test[1], [[1, n + 1]] * (u[1] + 1), [1] * (u[1] + 1))) + "\n")
    assert main(["eval", "--config", str(cfg), "--decode-path", str(path), "--limit", "2"]) == 0
    summary = json.loads(capsys.readouterr().out.strip().splitlines()[-1])
    assert summary["wer_percent"] == 0.0
    assert summary["r_cov_percent"] == 75.0
    assert summary["r_str_percent"] == 50.0


def test_ablate_grid(workdir):
    tmp, cfg = workdir
    args = ["ablate", "--config", str(cfg), "--ablate-d-lm", "[0, 1]", "--ablate-headdrop", "[true]",
            "--steps", "2", "--limit", "2"]
    assert main(args) == 0
    rows = list(csv.DictReader(open(tmp / "run" / "ablate.csv")))
    assert len(rows) == 4
    assert {(r["d_lm"], r["mode"]) for r in rows} == {("0", "head-sync"), ("0", "standard"),
                                                      ("1", "head-sync"), ("1", "standard")}
    assert (tmp / "run" / "dlm1_hd1_s0" / "model.ckpt").exists()
