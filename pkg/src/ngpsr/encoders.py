"""Camera codes, per-level texture tokens and query tokens."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import ContractError, Tensor, affine, concat
from .data import ViewRecord, extract_patch, hr_to_lr_coord
from .layers import run_mlp

CAMERA_ACTS = ["relu", "relu", "tanh"]
TEXTURE_ACTS = ["relu", "relu", "tanh"]


def camera_sizes(cam_dim: int = 16) -> list[int]:
    return [12, 64, 64, cam_dim]


def texture_sizes(cam_dim: int = 16, tokens: int = 3) -> list[int]:
    return [27 + cam_dim, 128, 128, tokens]


@dataclass(frozen=True)
class QueryToken:
    coords: np.ndarray  # normalized HR pixel centre (x, y)
    tokens: np.ndarray  # texture tokens remapped to [0, 1]
    level: int

    def vector(self) -> np.ndarray:
        return np.concatenate([self.coords, self.tokens])


def embed_camera(poses: np.ndarray, params: dict[str, Tensor]) -> Tensor:
    """Flattened 3x4 cam-to-world rows (..., 12) -> codes in [-1, 1]^16."""
    dtype = params["camera.0.weight"].dtype
    return run_mlp(Tensor(np.asarray(poses, dtype=dtype)), params, "camera", CAMERA_ACTS)


def encode_texture(patch, cam: Tensor, level: int, params: dict[str, Tensor]) -> Tensor:
    """Per-level texture encoder: (27 patch values + camera code) -> F tokens in [-1, 1]."""
    prefix = f"texture.{level}"
    if f"{prefix}.0.weight" not in params:
        raise ContractError(f"no texture encoder for level {level}")
    dtype = params[f"{prefix}.0.weight"].dtype
    patch = patch if isinstance(patch, Tensor) else Tensor(np.asarray(patch, dtype=dtype))
    return run_mlp(concat([patch, cam]), params, prefix, TEXTURE_ACTS)


def query_tokens(coords: np.ndarray, patches: np.ndarray, cam: Tensor, level: int,
                 params: dict[str, Tensor]) -> Tensor:
    """Batched query construction: [x, y, (tokens + 1) / 2] per row."""
    tok = encode_texture(patches, cam, level, params)
    return concat([Tensor(np.asarray(coords, dtype=tok.dtype)), affine(tok, 0.5, 0.5)])


def pixel_coords(x_hr, y_hr, hr_w: int, hr_h: int) -> np.ndarray:
    x = (np.asarray(x_hr, dtype=np.float64) + 0.5) / hr_w
    y = (np.asarray(y_hr, dtype=np.float64) + 0.5) / hr_h
    return np.stack([x, y], axis=-1)


def build_query(x_hr: int, y_hr: int, view: ViewRecord, level: int, pyramid: list[np.ndarray],
                params: dict[str, Tensor], cam: Tensor | None = None) -> QueryToken:
    """Single-pixel query token at one pyramid level."""
    hr_h, hr_w = view.hr_shape
    if not (0 <= x_hr < hr_w and 0 <= y_hr < hr_h):
        raise ContractError(f"pixel ({x_hr}, {y_hr}) outside HR grid {hr_w}x{hr_h}")
    if cam is None:
        cam = embed_camera(view.pose.flat()[None], params)
    rx = hr_to_lr_coord(x_hr, level, view.scale)
    ry = hr_to_lr_coord(y_hr, level, view.scale)
    patch = extract_patch(pyramid[level - 1], float(rx), float(ry))[None]
    tok = encode_texture(patch, cam.data.reshape(1, -1) if isinstance(cam, Tensor) else cam, level, params)
    return QueryToken(pixel_coords(x_hr, y_hr, hr_w, hr_h), (tok.data[0] + 1) / 2, level)
