"""Synthetic monotonic transduction tasks with ground-truth token boundaries.

Each token emits a run of noisy copies of its fixed prototype vector, so the
frame sequence is a left-to-right concatenation of token spans.
"""
from __future__ import annotations

import hashlib
import json
import math
import warnings
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from .numerics import RandomStreams

SPLITS = ("train", "dev", "test")


class DatasetError(ValueError):
    pass


@dataclass
class TaskConfig:
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
    seed: int = 0

    def __post_init__(self):
        if not 1 <= self.d_min <= self.d_max:
            raise ValueError("need 1 <= d_min <= d_max")
        if self.vocab_size < 2:
            raise ValueError("vocab_size must be >= 2")
        if not 1 <= self.u_min <= self.u_max:
            raise ValueError("need 1 <= u_min <= u_max")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be >= 0")

    def split_sizes(self) -> dict[str, int]:
        return {"train": self.n_train, "dev": self.n_dev, "test": self.n_test}

    @classmethod
    def from_dict(cls, d: dict) -> "TaskConfig":
        unknown = set(d) - {f.name for f in fields(cls)}
        if unknown:
            raise ValueError(f"unknown TaskConfig keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class SyntheticSample:
    id: str
    frames: np.ndarray            # [T_raw, d_in] float32
    tokens: list[int]             # symbols in [0, vocab_size)
    true_boundaries: list[int]    # 1-based last raw frame of each token span

    def stacked_boundaries(self, factor: int) -> list[int]:
        return stacked_boundaries(self.true_boundaries, factor)


def stacked_boundaries(raw: list[int], factor: int) -> list[int]:
    """Map 1-based raw-frame boundaries onto the frame-stacked time axis."""
    return [math.ceil(b / factor) for b in raw]


def prototypes(cfg: TaskConfig) -> np.ndarray:
    return RandomStreams(cfg.seed).get("prototypes").normal(size=(cfg.vocab_size, cfg.d_in))


def _draw(gen: np.random.Generator, cfg: TaskConfig, protos: np.ndarray):
    n_tokens = int(gen.integers(cfg.u_min, cfg.u_max + 1))
    tokens = gen.integers(0, cfg.vocab_size, size=n_tokens)
    durations = gen.integers(cfg.d_min, cfg.d_max + 1, size=n_tokens)
    frames = np.repeat(protos[tokens], durations, axis=0)
    if cfg.noise_sigma > 0:
        frames = frames + gen.normal(0.0, cfg.noise_sigma, size=frames.shape)
    return tokens.tolist(), np.cumsum(durations).tolist(), frames.astype(np.float32)


def generate(cfg: TaskConfig) -> dict[str, list[SyntheticSample]]:
    """Draw train/dev/test splits whose token sequences never repeat across (or within) splits."""
    total = cfg.n_train + cfg.n_dev + cfg.n_test
    if cfg.vocab_size ** cfg.u_min < total:
        warnings.warn("vocab_size ** u_min is smaller than the dataset: duplicate-sequence risk", stacklevel=2)
    protos = prototypes(cfg)
    streams = RandomStreams(cfg.seed).split("samples")
    seen: set[tuple[int, ...]] = set()
    out: dict[str, list[SyntheticSample]] = {}
    for split, n in cfg.split_sizes().items():
        samples = []
        for idx in range(n):
            attempt = 0
            while True:
                gen = streams.get(f"{split}/{idx}/{attempt}")
                tokens, bounds, frames = _draw(gen, cfg, protos)
                attempt += 1
                if tuple(tokens) not in seen:
                    break
                if attempt > 1000:
                    raise DatasetError("could not draw a fresh token sequence; enlarge the task")
            seen.add(tuple(tokens))
            samples.append(SyntheticSample(f"{split}-{idx:05d}", frames, tokens, bounds))
        out[split] = samples
    return out


# -- serialisation --------------------------------------------------------

def _frames_json(frames: np.ndarray) -> str:
    # str() of float32 is the shortest decimal that parses back to the same float32
    text = np.asarray(frames, dtype=np.float32).astype(str)
    return "[" + ",".join("[" + ",".join(row) + "]" for row in text) + "]"


def dumps_sample(s: SyntheticSample) -> str:
    head = json.dumps({"id": s.id, "tokens": list(map(int, s.tokens)),
                       "true_boundaries": list(map(int, s.true_boundaries))})
    return head[:-1] + ', "frames": ' + _frames_json(s.frames) + "}"


def loads_sample(line: str) -> SyntheticSample:
    rec = json.loads(line)
    frames = np.asarray(rec["frames"], dtype=np.float32)
    if frames.ndim != 2:
        raise ValueError("frames must be a 2-D array")
    return SyntheticSample(str(rec["id"]), frames, [int(t) for t in rec["tokens"]],
                           [int(b) for b in rec["true_boundaries"]])


def save(samples: list[SyntheticSample], path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for s in samples:
            fh.write(dumps_sample(s) + "\n")


def load(path) -> list[SyntheticSample]:
    samples = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                samples.append(loads_sample(line))
            except (ValueError, KeyError, TypeError) as exc:
                raise DatasetError(f"{path}:{lineno}: malformed sample ({exc})") from exc
    return samples


def sha256_file(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def write_dataset(cfg: TaskConfig, out_dir) -> Path:
    """Generate, save each split as JSONL and write ``manifest.json``; returns the manifest path."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    splits = generate(cfg)
    manifest = {"config": asdict(cfg), "splits": {}}
    for name, samples in splits.items():
        path = out_dir / f"{name}.jsonl"
        save(samples, path)
        manifest["splits"][name] = {"path": path.name, "n": len(samples), "sha256": sha256_file(path)}
    mpath = out_dir / "manifest.json"
    mpath.write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return mpath


def read_manifest(path) -> dict:
    path = Path(path)
    manifest = json.loads(path.read_text())
    manifest["_root"] = str(path.parent)
    return manifest


def load_split(manifest_path, split: str) -> list[SyntheticSample]:
    manifest = read_manifest(manifest_path)
    entry = manifest["splits"].get(split)
    if entry is None:
        raise DatasetError(f"split {split!r} not in manifest")
    return load(Path(manifest["_root"]) / entry["path"])


@dataclass
class Dataset:
    """In-memory splits plus the task they came from."""

    task: TaskConfig
    splits: dict[str, list[SyntheticSample]] = field(default_factory=dict)

    @classmethod
    def generate(cls, task: TaskConfig) -> "Dataset":
        return cls(task, generate(task))
