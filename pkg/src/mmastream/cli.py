"""Command line: ``mmastream <gen-data|train|decode|eval|align|ablate> [--config f.json] [--key value ...]``.

Every ``--key`` names a :class:`RunConfig` field. Precedence is command line,
then config file, then defaults. Exit codes: 0 success, 1 usage or
configuration error, 2 runtime failure.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import get_type_hints

import numpy as np
from threadpoolctl import threadpool_limits

from . import synthdata
from .decoding import BeamConfig, beam_search, to_record
from .metrics import evaluate, read_records, write_report
from .model import N_SPECIAL, SOS, ModelConfig, load_model, save_model
from .numerics import no_grad
from .training import TrainConfig, fit_model, to_model_ids, write_loss_csv

log = logging.getLogger("mmastream")

SUBCOMMANDS = ("gen-data", "train", "decode", "eval", "align", "ablate")
MODES = ("head-sync", "standard")


class UsageError(Exception):
    pass


@dataclass
class RunConfig:
    # task
    vocab_size: int = 20
    d_in: int = 8
    d_min: int = 4
    d_max: int = 8
    noise_sigma: float = 0.1
    u_min: int = 4
    u_max: int = 12
    n_train: int = 2000
    n_dev: int = 200
    n_test: int = 200
    data_seed: int = 0
    # model
    d_model: int = 64
    d_ff: int = 256
    n_heads: int = 4
    n_heads_ma: int = 4
    n_heads_ca: int = 1
    chunk_width: int = 4
    n_enc_layers: int = 4
    n_dec_layers: int = 4
    d_lm: int = 3
    p_hd: float = 0.5
    headdrop: bool = True
    frame_stack_factor: int = 4
    label_smoothing: float = 0.1
    dropout: float = 0.1
    noise_std: float = 1.0
    # optimisation
    steps: int = 3000
    batch_size: int = 32
    warmup: int = 400
    lr_constant: float = 1.0
    seed: int = 0
    # decoding
    mode: str = "head-sync"
    beam: int = 10
    eps_wait: int = 8
    alpha_lm: float = 0.5
    beta_len: float = 2.0
    max_len: int = 200
    # paths and run control
    data_dir: str = "data"
    out_dir: str = "runs"
    checkpoint: str = ""
    decode_path: str = ""
    split: str = "test"
    limit: int = 0
    align_n: int = 5
    threads: int = 1
    ablate_d_lm: list = field(default_factory=list)  # empty: every D_lm in 0..n_dec_layers-1
    ablate_headdrop: list = field(default_factory=lambda: [False, True])
    ablate_seeds: list = field(default_factory=lambda: [0])

    def validate(self) -> None:
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}")
        if self.split not in synthdata.SPLITS:
            raise ValueError(f"split must be one of {synthdata.SPLITS}")
        if self.threads < 1 or self.limit < 0 or self.align_n < 0:
            raise ValueError("threads must be >= 1; limit and align_n >= 0")
        if self.d_min < self.frame_stack_factor:
            log.warning("d_min < frame_stack_factor: stacked boundaries may coincide")
        self.task_config()
        self.model_config()
        self.train_config()
        self.beam_config()
        for d in self.ablate_grid():
            self.model_config(d_lm=d)

    def ablate_grid(self) -> list[int]:
        return [int(d) for d in self.ablate_d_lm] or list(range(self.n_dec_layers))

    def task_config(self) -> synthdata.TaskConfig:
        names = {f.name for f in fields(synthdata.TaskConfig)} - {"seed"}
        return synthdata.TaskConfig(seed=self.data_seed, **{k: getattr(self, k) for k in names})

    def model_config(self, **over) -> ModelConfig:
        names = {f.name for f in fields(ModelConfig)} - {"vocab_size", "chunk_mask"}
        kw = {k: getattr(self, k) for k in names}
        kw["vocab_size"] = self.vocab_size + N_SPECIAL
        headdrop = over.pop("headdrop", self.headdrop)
        kw.update(over)
        if not headdrop:
            kw["p_hd"] = 0.0
        return ModelConfig(**kw)

    def train_config(self, **over) -> TrainConfig:
        kw = dict(steps=self.steps, batch_size=self.batch_size, warmup=self.warmup,
                  lr_constant=self.lr_constant, seed=self.seed, log_every=100)
        kw.update(over)
        return TrainConfig(**kw)

    def beam_config(self) -> BeamConfig:
        return BeamConfig(beam=self.beam, eps_wait=self.eps_wait, alpha_lm=self.alpha_lm,
                          beta_len=self.beta_len, max_len=self.max_len)

    @classmethod
    def from_sources(cls, file_values: dict, overrides: dict) -> "RunConfig":
        merged = {**file_values, **overrides}
        hints = get_type_hints(cls)
        unknown = set(merged) - set(hints)
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        kw = {k: _coerce(k, v, hints[k]) for k, v in merged.items()}
        cfg = cls(**kw)
        cfg.validate()
        return cfg


def _coerce(key, value, typ):
    if typ is bool:
        if isinstance(value, str):
            if value.lower() in ("1", "true", "yes", "on"):
                return True
            if value.lower() in ("0", "false", "no", "off"):
                return False
            raise ValueError(f"{key}: expected a boolean, got {value!r}")
        return bool(value)
    if typ is list:
        if isinstance(value, str):
            value = json.loads(value)
        if not isinstance(value, list):
            raise ValueError(f"{key}: expected a JSON list")
        return value
    try:
        return typ(value)
    except (TypeError, ValueError) as exc:
        raise ValueError(f"{key}: cannot read {value!r} as {typ.__name__}") from exc


def parse_overrides(tokens: list[str]) -> dict:
    out = {}
    it = iter(tokens)
    for tok in it:
        if not tok.startswith("--"):
            raise UsageError(f"unexpected argument {tok!r}")
        key = tok[2:].replace("-", "_")
        if "=" in key:
            key, value = key.split("=", 1)
        else:
            value = next(it, None)
            if value is None:
                raise UsageError(f"--{key} needs a value")
        out[key] = value
    return out


# -- outputs --------------------------------------------------------------

class Outputs:
    """Tracks files written by a run so a failure can remove them."""

    def __init__(self):
        self.paths: list[Path] = []

    def add(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        self.paths.append(path)
        return path

    def cleanup(self) -> None:
        for p in self.paths:
            p.unlink(missing_ok=True)


def write_resolved(cfg: RunConfig, out: Outputs, directory, command: str) -> None:
    path = out.add(Path(directory) / f"{command}.config.json")
    path.write_text(json.dumps(asdict(cfg), indent=2, sort_keys=True))


def _manifest(cfg: RunConfig) -> Path:
    path = Path(cfg.data_dir) / "manifest.json"
    if not path.exists():
        raise FileNotFoundError(f"{path} not found; run gen-data first")
    return path


def _split(cfg: RunConfig, split: str):
    samples = synthdata.load_split(_manifest(cfg), split)
    return samples[: cfg.limit] if cfg.limit else samples


def _checkpoint(cfg: RunConfig) -> Path:
    return Path(cfg.checkpoint or Path(cfg.out_dir) / "model.ckpt")


def _decode_path(cfg: RunConfig) -> Path:
    return Path(cfg.decode_path or Path(cfg.out_dir) / f"decode.{cfg.split}.{cfg.mode}.jsonl")


# -- subcommands ----------------------------------------------------------

def cmd_gen_data(cfg: RunConfig, out: Outputs) -> None:
    root = Path(cfg.data_dir)
    for name in synthdata.SPLITS:
        out.add(root / f"{name}.jsonl")
    out.add(root / "manifest.json")
    synthdata.write_dataset(cfg.task_config(), root)
    write_resolved(cfg, out, root, "gen-data")


def train_one(cfg: RunConfig, out: Outputs, out_dir: Path, **model_over):
    samples = synthdata.load_split(_manifest(cfg), "train")
    model_cfg = cfg.model_config(**model_over)
    t0 = time.perf_counter()
    state = fit_model(model_cfg, samples, cfg.train_config())
    log.info("trained %d steps in %.1fs", cfg.steps, time.perf_counter() - t0)
    ckpt = out.add(out_dir / "model.ckpt")
    save_model(state.model, ckpt, {"run": asdict(cfg)})
    write_loss_csv(state, out.add(out_dir / "loss.csv"))
    return state.model, ckpt


def cmd_train(cfg: RunConfig, out: Outputs) -> None:
    out_dir = Path(cfg.out_dir)
    train_one(cfg, out, out_dir)
    write_resolved(cfg, out, out_dir, "train")


def _decode_chunk(args):
    ckpt, beam, sync, items = args
    model, _ = load_model(ckpt)
    return [_decode_sample(model, beam, sync, uid, frames) for uid, frames in items]


def _decode_sample(model, beam: BeamConfig, sync: bool, uid: str, frames) -> dict:
    h, _ = model.encode([frames])
    return to_record(beam_search(model, h.data[0], beam, sync=sync), uid)


def decode_samples(ckpt: Path, samples, beam: BeamConfig, sync: bool, threads: int = 1) -> list[dict]:
    if threads == 1:
        model, _ = load_model(ckpt)
        return [_decode_sample(model, beam, sync, s.id, s.frames) for s in samples]
    items = [(s.id, s.frames) for s in samples]
    chunks = [items[i::threads] for i in range(threads)]
    with ProcessPoolExecutor(threads) as pool:
        parts = list(pool.map(_decode_chunk, [(str(ckpt), beam, sync, c) for c in chunks]))
    by_id = {r["id"]: r for part in parts for r in part}
    return [by_id[s.id] for s in samples]


def write_records(records, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for r in records:
            fh.write(json.dumps(r) + "\n")


def cmd_decode(cfg: RunConfig, out: Outputs) -> None:
    samples = _split(cfg, cfg.split)
    records = decode_samples(_checkpoint(cfg), samples, cfg.beam_config(), cfg.mode == "head-sync", cfg.threads)
    path = out.add(_decode_path(cfg))
    write_records(records, path)
    write_resolved(cfg, out, path.parent, "decode")


def eval_records(cfg: RunConfig, records, samples):
    refs = {s.id: s.tokens for s in samples}
    truth = {s.id: synthdata.stacked_boundaries(s.true_boundaries, cfg.frame_stack_factor) for s in samples}
    return evaluate(records, refs, truth)


def cmd_eval(cfg: RunConfig, out: Outputs) -> None:
    path = _decode_path(cfg)
    records = read_records(path)
    samples = synthdata.load_split(_manifest(cfg), cfg.split)
    report = eval_records(cfg, records, samples)
    stem = path.name.removesuffix(".jsonl")
    write_report(report, out.add(path.parent / f"{stem}.metrics.csv"), out.add(path.parent / f"{stem}.utterances.csv"))
    write_resolved(cfg, out, path.parent, "eval")
    print(json.dumps(report.summary()))


def cmd_align(cfg: RunConfig, out: Outputs) -> None:
    """Expected alignments (teacher forced) and decoded boundaries as long-format CSV."""
    model, _ = load_model(_checkpoint(cfg))
    samples = _split(cfg, cfg.split)[: cfg.align_n]
    path = out.add(Path(cfg.out_dir) / f"align.{cfg.split}.csv")
    beam = cfg.beam_config()
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["id", "layer", "head", "output_step", "frame", "alpha", "boundary"])
        for s in samples:
            ids = to_model_ids(s.tokens)
            with no_grad():
                h, mask = model.encode([s.frames])
                _, states = model.decode_train(h, mask, np.array([[SOS, *ids]]), train=False)
            rec = to_record(beam_search(model, h.data[0], beam, sync=cfg.mode == "head-sync"), s.id)
            mma_states = [st for st in states if st is not None]
            for layer, st in enumerate(mma_states):
                alpha = st.alpha[0]                              # [H, U, T]
                n_h, n_u, n_t = alpha.shape
                for hd in range(n_h):
                    for i in range(n_u):
                        decoded = rec["boundary_log"][i]["frames"][layer][hd] if i < len(rec["boundary_log"]) else 0
                        for t in range(n_t):
                            w.writerow([s.id, layer, hd, i + 1, t + 1, f"{alpha[hd, i, t]:.6g}",
                                        int(decoded == t + 1)])
    write_resolved(cfg, out, path.parent, "align")


def cmd_ablate(cfg: RunConfig, out: Outputs) -> None:
    root = Path(cfg.out_dir)
    samples = _split(cfg, cfg.split)
    rows = []
    for d_lm in cfg.ablate_grid():
        for hd in cfg.ablate_headdrop:
            for seed in cfg.ablate_seeds:
                run_cfg = RunConfig(**{**asdict(cfg), "seed": int(seed)})
                run_dir = root / f"dlm{d_lm}_hd{int(bool(hd))}_s{seed}"
                _, ckpt = train_one(run_cfg, out, run_dir, d_lm=int(d_lm), headdrop=bool(hd))
                for mode in MODES:
                    records = decode_samples(ckpt, samples, cfg.beam_config(), mode == "head-sync", cfg.threads)
                    write_records(records, out.add(run_dir / f"decode.{cfg.split}.{mode}.jsonl"))
                    rep = eval_records(cfg, records, samples)
                    rows.append([d_lm, int(bool(hd)), seed, mode, rep.wer_percent, rep.r_cov_percent,
                                 rep.r_str_percent, rep.mean_delay])
    path = out.add(root / "ablate.csv")
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["d_lm", "headdrop", "seed", "mode", "wer", "r_cov", "r_str", "mean_delay"])
        w.writerows(rows)
    write_resolved(cfg, out, root, "ablate")


COMMANDS = {"gen-data": cmd_gen_data, "train": cmd_train, "decode": cmd_decode, "eval": cmd_eval,
            "align": cmd_align, "ablate": cmd_ablate}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="mmastream", description=__doc__.splitlines()[0])
    p.add_argument("command", choices=SUBCOMMANDS)
    p.add_argument("--config", help="JSON file with RunConfig fields")
    p.add_argument("--log-level", default="INFO")
    return p


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        args, rest = build_parser().parse_known_args(argv)
        logging.basicConfig(level=args.log_level.upper(), format="%(levelname)s %(name)s: %(message)s")
        file_values = json.loads(Path(args.config).read_text()) if args.config else {}
        cfg = RunConfig.from_sources(file_values, parse_overrides(rest))
    except (UsageError, ValueError, TypeError, OSError) as exc:
        print(f"mmastream: error: {exc}", file=sys.stderr)
        return 1
    out = Outputs()
    try:
        with threadpool_limits(cfg.threads):
            COMMANDS[args.command](cfg, out)
    except Exception as exc:  # any runtime failure: clean up and report
        out.cleanup()
        log.debug("failure", exc_info=True)
        print(f"mmastream: {args.command} failed: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
