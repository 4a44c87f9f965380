"""Unified multi-resolution hash grid with camera-conditioned interpolation.

Query tokens live in the d-dimensional unit hypercube (d = 2 + F).  At level l
the cube is split into N_l = N_base * 2**(l-1) cells per axis.  The 2**d
corners of the enclosing cell are rescaled onto the finest grid, hashed into a
single table shared by every level, and mixed with weights predicted from the
in-cell offset and the camera code.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import ShapeError, Tensor, affine, concat, note_branch, softmax, take_rows, weighted_sum
from .layers import run_mlp

PRIMES = (1, 2654435761, 805459861, 3674653429, 2097192037)
WEIGHT_ACTS = ["relu", None]


@dataclass(frozen=True)
class LevelSpec:
    level: int
    resolution: int


def level_specs(levels: int, n_base: int) -> list[LevelSpec]:
    if n_base < 2:
        raise ValueError(f"base resolution must be >= 2, got {n_base}")
    return [LevelSpec(l, n_base * 2 ** (l - 1)) for l in range(1, levels + 1)]


def weight_sizes(dim: int, cam_dim: int = 16) -> list[int]:
    return [dim + cam_dim, 64, 2 ** dim]


def corner_bits(dim: int) -> np.ndarray:
    """(2**dim, dim) binary corner offsets; corner k has bit j = (k >> j) & 1."""
    return np.array([[(k >> j) & 1 for j in range(dim)] for k in range(2 ** dim)], dtype=np.int64)


@dataclass(frozen=True)
class HyperVertexSet:
    base_cell: np.ndarray
    corners: np.ndarray
    offset: np.ndarray


def quantize(q: np.ndarray, resolution: int) -> HyperVertexSet:
    """Locate the enclosing cell of points q in [0, 1]^d (any leading shape).

    The base cell is clamped to the last cell so q == 1 gives offset 1.
    """
    q = np.asarray(q)
    scaled = q * resolution
    base = np.clip(np.floor(scaled), 0, resolution - 1).astype(np.int64)
    offset = scaled - base
    corners = base[..., None, :] + corner_bits(q.shape[-1])
    return HyperVertexSet(base, corners, offset)


def cross_level_map(corners: np.ndarray, resolution: int, finest: int) -> np.ndarray:
    factor, rem = divmod(finest, resolution)
    if rem:
        raise ValueError(f"finest resolution {finest} is not a multiple of {resolution}")
    return np.asarray(corners, dtype=np.int64) * factor


def hash_index(coords: np.ndarray, table_size: int) -> np.ndarray:
    """XOR of per-axis prime products with 32-bit wrap-around, modulo table size."""
    if table_size & (table_size - 1):
        raise ValueError(f"table size must be a power of two, got {table_size}")
    coords = np.asarray(coords, dtype=np.int64).astype(np.uint64)
    if coords.shape[-1] > len(PRIMES):
        raise ValueError(f"at most {len(PRIMES)} dimensions supported, got {coords.shape[-1]}")
    mask = np.uint64(0xFFFFFFFF)
    h = np.zeros(coords.shape[:-1], dtype=np.uint64)
    for j in range(coords.shape[-1]):
        h ^= (coords[..., j] * np.uint64(PRIMES[j])) & mask
    return (h & np.uint64(table_size - 1)).astype(np.int64)


def predict_weights(offset: Tensor, cam: Tensor, params: dict[str, Tensor], raw: bool = False) -> Tensor:
    logits = run_mlp(concat([offset, cam]), params, "weights", WEIGHT_ACTS)
    return logits if raw else softmax(logits)


def aggregate(weights: Tensor, corner_features: Tensor) -> Tensor:
    if weights.shape != corner_features.shape[:-1]:
        raise ShapeError(f"aggregate: {weights.shape} weights vs {corner_features.shape} features")
    return weighted_sum(weights, corner_features)


def level_features(q: Tensor, cam: Tensor, spec: LevelSpec, finest: int,
                   params: dict[str, Tensor], raw: bool = False) -> Tensor:
    """Feature vector of one level for a batch of query tokens q (B, d)."""
    hv = quantize(q.data, spec.resolution)
    note_branch(hv.base_cell)
    offset = affine(q, spec.resolution, -hv.base_cell.astype(q.dtype))
    table = params["hash.table"]
    slots = hash_index(cross_level_map(hv.corners, spec.resolution, finest), table.shape[0])
    feats = take_rows(table, slots)
    return aggregate(predict_weights(offset, cam, params, raw), feats)


def encode_multiscale(q_per_level: list[Tensor], cam: Tensor, specs: list[LevelSpec],
                      params: dict[str, Tensor], raw: bool = False) -> Tensor:
    if len(q_per_level) != len(specs):
        raise ShapeError(f"expected {len(specs)} query tokens, got {len(q_per_level)}")
    finest = specs[-1].resolution
    return concat([level_features(q, cam, s, finest, params, raw) for q, s in zip(q_per_level, specs)])


def corner_slots(q: np.ndarray, specs: list[LevelSpec], table_size: int) -> list[np.ndarray]:
    """Table slots touched by each level's corners, for locality checks."""
    finest = specs[-1].resolution
    out = []
    for qi, s in zip(q, specs):
        hv = quantize(qi, s.resolution)
        out.append(hash_index(cross_level_map(hv.corners, s.resolution, finest), table_size))
    return out
