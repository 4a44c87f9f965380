"""Pixel sampling, the optimisation loop and the binary checkpoint format."""

from __future__ import annotations

import csv
import io
import json
import logging
import math
import struct
import time
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np

from .autodiff import AdamState, Tape, adam_step, backward, mse_loss
from .data import SceneDataset
from .model import ABLATIONS, Model, ModelConfig, ViewCache, forward

log = logging.getLogger(__name__)

MAGIC = b"NGPS"
VERSION = 1


class NonFiniteError(FloatingPointError):
    """Training produced a NaN or infinity."""


class CheckpointError(ValueError):
    """A checkpoint file is corrupt or does not match the expected model."""


@dataclass
class TrainConfig:
    lr: float = 0.00125
    batch_size: int = 1024
    batch_unit: str = "pixel"
    epochs: int = 200
    steps_per_epoch: int = 0
    steps: int = 0
    seed: int = 0
    ablation: str = "none"
    levels: int = 4
    n_base: int = 8
    table_size: int = 2 ** 16
    features: int = 4
    raw_weights: bool = False
    clip_norm: float = 0.0
    checkpoint_every: int = 0
    scale: int = 2
    deterministic: bool = True

    def __post_init__(self):
        if self.ablation not in ABLATIONS:
            raise ValueError(f"ablation must be one of {ABLATIONS}, got {self.ablation!r}")
        if self.batch_unit not in ("pixel", "image"):
            raise ValueError(f"batch_unit must be 'pixel' or 'image', got {self.batch_unit!r}")
        for key in ("lr", "batch_size", "epochs", "levels", "n_base", "table_size", "features", "scale"):
            if getattr(self, key) <= 0:
                raise ValueError(f"{key} must be positive, got {getattr(self, key)}")
        for key in ("steps_per_epoch", "steps", "clip_norm", "checkpoint_every"):
            if getattr(self, key) < 0:
                raise ValueError(f"{key} must be non-negative, got {getattr(self, key)}")

    def model_config(self) -> ModelConfig:
        return ModelConfig(levels=self.levels, n_base=self.n_base, table_size=self.table_size,
                           features=self.features, ablation=self.ablation, raw_weights=self.raw_weights)

    @classmethod
    def keys(cls) -> dict[str, type]:
        return {f.name: type(f.default) for f in fields(cls)}

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)


@dataclass
class Batch:
    views: np.ndarray
    pixels: np.ndarray
    targets: np.ndarray

    def __len__(self) -> int:
        return len(self.views)


def sample_batch(cache: ViewCache, n: int, rng: np.random.Generator, unit: str = "pixel") -> Batch:
    """Uniform draw over (training view, HR pixel) pairs, or whole training images."""
    train = [i for i, s in enumerate(cache.split) if s == "train"]
    if not train or any(cache.targets[i] is None for i in train):
        raise ValueError("sampling needs training views with HR targets")
    p = cache.n_pixels
    if unit == "image":
        chosen = np.asarray(train)[rng.integers(0, len(train), n)]
        views = np.repeat(chosen, p)
        pixels = np.tile(np.arange(p), n)
    else:
        flat = rng.integers(0, len(train) * p, n)
        views = np.asarray(train, dtype=np.int64)[flat // p]
        pixels = flat % p
    targets = np.empty((len(views), 3), dtype=np.float64)
    for v in np.unique(views):
        sel = views == v
        targets[sel] = cache.targets[v][pixels[sel]]
    return Batch(views.astype(np.int64), pixels.astype(np.int64), targets)


def _first_nonfinite(named: dict[str, np.ndarray]) -> str | None:
    for name, arr in named.items():
        if arr is not None and not np.all(np.isfinite(arr)):
            return name
    return None


def clip_gradients(params: dict, max_norm: float) -> float:
    norm = math.sqrt(sum(float(np.sum(p.grad.astype(np.float64) ** 2)) for p in params.values()))
    if max_norm > 0 and norm > max_norm:
        scale = max_norm / norm
        for p in params.values():
            p.grad *= p.dtype.type(scale)
    return norm


def train_step(batch: Batch, model: Model, adam: AdamState, cache: ViewCache, clip_norm: float = 0.0) -> float:
    """Forward, mean MSE, backward and one Adam update. Returns the pre-update loss."""
    with Tape() as tape:
        pred = forward(model, cache, batch.views, batch.pixels)
        loss = mse_loss(pred, batch.targets.astype(model.dtype))
    value = float(loss.data)
    if not math.isfinite(value):
        bad = _first_nonfinite({"prediction": pred.data}) or _first_nonfinite(
            {n: p.data for n, p in model.params.items()}) or "loss"
        raise NonFiniteError(f"non-finite loss {value}; first non-finite tensor: {bad}")
    backward(loss, tape)
    bad = _first_nonfinite({n: p.grad for n, p in model.params.items()})
    if bad is not None:
        raise NonFiniteError(f"non-finite gradient in {bad}")
    if clip_norm > 0:
        clip_gradients(model.params, clip_norm)
    with np.errstate(over="ignore", invalid="ignore"):
        adam_step(model.params, adam)
    bad = _first_nonfinite({n: p.data for n, p in model.params.items()})
    if bad is not None:
        raise NonFiniteError(f"parameter {bad} became non-finite after optimizer step {adam.step}")
    return value


@dataclass
class TrainResult:
    model: Model
    adam: AdamState
    config: TrainConfig
    losses: list[tuple[int, int, float]]
    seconds: float

    @property
    def final_loss(self) -> float:
        return self.losses[-1][2] if self.losses else float("nan")


def total_steps(config: TrainConfig, cache: ViewCache) -> tuple[int, int]:
    """(steps per epoch, total steps)."""
    n_train = sum(1 for s in cache.split if s == "train")
    per_sample = cache.n_pixels if config.batch_unit == "image" else 1
    spe = config.steps_per_epoch or max(1, math.ceil(n_train * cache.n_pixels / (config.batch_size * per_sample)))
    return spe, (config.steps or config.epochs * spe)


def train(ds: SceneDataset | ViewCache, config: TrainConfig, loss_csv: Path | None = None,
          checkpoint: Path | None = None, progress=None) -> TrainResult:
    """Seeded training run; the same (data, config) always yields the same parameters."""
    cache = ds if isinstance(ds, ViewCache) else ViewCache(ds, config.levels)
    if cache.scale != config.scale:
        raise ValueError(f"scene scale {cache.scale} does not match config scale {config.scale}")
    model = Model.create(config.model_config(), seed=config.seed)
    adam = AdamState(lr=config.lr)
    rng = np.random.default_rng(config.seed + 1)
    spe, n_steps = total_steps(config, cache)
    losses = []
    start = time.perf_counter()
    for step in range(n_steps):
        batch = sample_batch(cache, config.batch_size, rng, config.batch_unit)
        loss = train_step(batch, model, adam, cache, config.clip_norm)
        epoch = step // spe
        losses.append((step, epoch, loss))
        if progress is not None:
            progress(step, n_steps, loss)
        if checkpoint is not None and config.checkpoint_every and (step + 1) % (spe * config.checkpoint_every) == 0:
            save_checkpoint(checkpoint, model, adam, config)
    seconds = time.perf_counter() - start
    if loss_csv is not None:
        write_loss_csv(loss_csv, losses)
    if checkpoint is not None:
        save_checkpoint(checkpoint, model, adam, config)
    return TrainResult(model, adam, config, losses, seconds)


def write_loss_csv(path: Path, losses) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["step", "epoch", "loss"])
        for step, epoch, loss in losses:
            w.writerow([step, epoch, repr(float(loss))])


# ---------------------------------------------------------------- checkpoints


@dataclass
class Checkpoint:
    model: Model
    adam: AdamState
    config: TrainConfig


def _pack_record(buf: io.BytesIO, name: str, arr: np.ndarray) -> None:
    raw = name.encode("utf-8")
    buf.write(struct.pack("<I", len(raw)))
    buf.write(raw)
    buf.write(struct.pack("<I", arr.ndim))
    buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
    buf.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def encode_checkpoint(model: Model, adam: AdamState, config: TrainConfig) -> bytes:
    records = []
    for name, p in model.params.items():
        records.append((name, p.data))
    for name, p in model.params.items():
        records.append((f"{name}.adam.m", adam.m.get(name, np.zeros_like(p.data))))
        records.append((f"{name}.adam.v", adam.v.get(name, np.zeros_like(p.data))))
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<II", VERSION, len(records)))
    for name, arr in records:
        _pack_record(buf, name, arr)
    meta = json.dumps({"config": asdict(config), "adam": {
        "step": adam.step, "lr": adam.lr, "beta1": adam.beta1, "beta2": adam.beta2, "eps": adam.eps}},
        sort_keys=True).encode("utf-8")
    buf.write(struct.pack("<I", len(meta)))
    buf.write(meta)
    return buf.getvalue()


def save_checkpoint(path: Path, model: Model, adam: AdamState, config: TrainConfig) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(encode_checkpoint(model, adam, config))
    tmp.replace(path)


class _Reader:
    def __init__(self, data: bytes, source: str):
        self.data, self.pos, self.source = data, 0, source

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise CheckpointError(f"{self.source}: truncated checkpoint (needed {n} bytes at offset {self.pos})")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]

    def dims(self, rank: int) -> tuple[int, ...]:
        return struct.unpack(f"<{rank}I", self.take(4 * rank))


def decode_checkpoint(data: bytes, source: str = "<bytes>") -> Checkpoint:
    r = _Reader(data, source)
    if r.take(4) != MAGIC:
        raise CheckpointError(f"{source}: bad magic, not an NGPS checkpoint")
    version = r.u32()
    if version != VERSION:
        raise CheckpointError(f"{source}: unsupported checkpoint version {version}")
    count = r.u32()
    records = {}
    for _ in range(count):
        name = r.take(r.u32()).decode("utf-8")
        rank = r.u32()
        shape = r.dims(rank)
        n = int(np.prod(shape))
        records[name] = np.frombuffer(r.take(4 * n), dtype="<f4").astype(np.float32).reshape(shape)
    try:
        meta = json.loads(r.take(r.u32()).decode("utf-8"))
        config = TrainConfig(**meta["config"])
        am = meta["adam"]
    except (KeyError, TypeError, ValueError) as exc:
        raise CheckpointError(f"{source}: bad metadata block: {exc}") from None
    if r.pos != len(data):
        raise CheckpointError(f"{source}: {len(data) - r.pos} trailing bytes")
    model = Model.create(config.model_config(), seed=config.seed)
    adam = AdamState(lr=am["lr"], beta1=am["beta1"], beta2=am["beta2"], eps=am["eps"], step=am["step"])
    expected = set(model.params) | {f"{n}.adam.{s}" for n in model.params for s in "mv"}
    if set(records) != expected:
        diff = sorted(set(records) ^ expected)[:5]
        raise CheckpointError(f"{source}: record names do not match the configured model (e.g. {diff})")
    for name, p in model.params.items():
        for key in (name, f"{name}.adam.m", f"{name}.adam.v"):
            if records[key].shape != p.shape:
                raise CheckpointError(f"{source}: {key} has shape {records[key].shape}, expected {p.shape}")
        p.data = records[name].copy()
        p.zero_grad()
        if adam.step:
            adam.m[name] = records[f"{name}.adam.m"].copy()
            adam.v[name] = records[f"{name}.adam.v"].copy()
    return Checkpoint(model, adam, config)


def load_checkpoint(path: Path) -> Checkpoint:
    path = Path(path)
    try:
        data = path.read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from None
    return decode_checkpoint(data, str(path))
