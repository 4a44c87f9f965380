"""Camera-aware mapping, global LR context, fusion and colour decoding."""

from __future__ import annotations

import numpy as np

from .autodiff import ShapeError, Tensor, adaptive_avg_pool, concat, conv2d, relu
from .layers import he_uniform, run_mlp

CAM_FUSE_ACTS = ["tanh", "tanh", "tanh", "tanh", None]
CAM_FREE_ACTS = ["tanh", None]
FUSE_ACTS = ["tanh", "tanh", "tanh", "tanh", None]
DECODE_ACTS = ["relu", "sigmoid"]
CNN_CHANNELS = (64, 64, 32)


def cam_fuse_sizes(feat_dim: int, cam_dim: int = 16) -> list[int]:
    return [feat_dim + cam_dim, 64, 64, 64, 64, 32]


def cam_free_sizes(feat_dim: int) -> list[int]:
    return [feat_dim, 64, 32]


FUSE_SIZES = [64, 64, 64, 64, 64, 32]
DECODE_SIZES = [32, 64, 3]


def init_cnn(rng: np.random.Generator, prefix: str = "gcnn") -> dict[str, Tensor]:
    params = {}
    c_in = 3
    for i, c_out in enumerate(CNN_CHANNELS):
        w = he_uniform(rng, c_out, c_in * 9).reshape(c_out, c_in, 3, 3)
        params[f"{prefix}.{i}.weight"] = Tensor(w, requires_grad=True, name=f"{prefix}.{i}.weight")
        params[f"{prefix}.{i}.bias"] = Tensor(np.zeros(c_out, np.float32), requires_grad=True,
                                              name=f"{prefix}.{i}.bias")
        c_in = c_out
    return params


def cam_fuse(v: Tensor, cam: Tensor, params: dict[str, Tensor]) -> Tensor:
    return run_mlp(concat([v, cam]), params, "gcam", CAM_FUSE_ACTS)


def cam_free_map(v: Tensor, params: dict[str, Tensor]) -> Tensor:
    """Replacement mapping used when the camera-aware stage is ablated."""
    return run_mlp(v, params, "gcam", CAM_FREE_ACTS)


def global_features(lr_images, params: dict[str, Tensor]) -> Tensor:
    """LR image(s) (H, W, 3) or (N, H, W, 3) -> 32-dim global vector(s)."""
    dtype = params["gcnn.0.weight"].dtype
    img = np.asarray(lr_images, dtype=dtype)
    if img.shape[-3] < 3 or img.shape[-2] < 3:
        raise ShapeError(f"global_features: LR image {img.shape} smaller than 3x3")
    x = Tensor(np.ascontiguousarray(np.moveaxis(img, -1, -3)))
    for i in range(len(CNN_CHANNELS)):
        x = relu(conv2d(x, params[f"gcnn.{i}.weight"], params[f"gcnn.{i}.bias"]))
    return adaptive_avg_pool(x)


def fuse(f_inter: Tensor, f_lr: Tensor, params: dict[str, Tensor]) -> Tensor:
    return run_mlp(concat([f_inter, f_lr]), params, "fuse", FUSE_ACTS)


def decode_color(v_bar: Tensor, params: dict[str, Tensor]) -> Tensor:
    return run_mlp(v_bar, params, "decode", DECODE_ACTS)
