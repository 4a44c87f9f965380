"""The full per-pixel pipeline: parameters, per-scene caches and rendering."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .autodiff import Tensor, no_tape, take_rows
from .data import SceneDataset, patch_grid
from .encoders import camera_sizes, embed_camera, pixel_coords, query_tokens, texture_sizes
from .fusion import (DECODE_SIZES, FUSE_SIZES, cam_free_map, cam_free_sizes, cam_fuse, cam_fuse_sizes,
                     decode_color, fuse, global_features, init_cnn)
from .hashfield import encode_multiscale, level_specs, weight_sizes
from .layers import init_mlp

ABLATIONS = ("none", "no_gcam", "no_gcnn", "no_gfuse")


@dataclass(frozen=True)
class ModelConfig:
    levels: int = 4
    n_base: int = 8
    table_size: int = 2 ** 16
    features: int = 4
    tokens: int = 3
    cam_dim: int = 16
    ablation: str = "none"
    raw_weights: bool = False

    def __post_init__(self):
        if self.ablation not in ABLATIONS:
            raise ValueError(f"unknown ablation {self.ablation!r}; expected one of {ABLATIONS}")
        for key in ("levels", "n_base", "table_size", "features", "tokens", "cam_dim"):
            if getattr(self, key) <= 0:
                raise ValueError(f"{key} must be positive")
        if self.table_size & (self.table_size - 1):
            raise ValueError(f"table_size must be a power of two, got {self.table_size}")
        if self.tokens + 2 > 5:
            raise ValueError("query tokens are limited to 5 dimensions (2 coordinates + 3 tokens)")

    @property
    def dim(self) -> int:
        return 2 + self.tokens

    @property
    def uses_cnn(self) -> bool:
        return self.ablation not in ("no_gcnn", "no_gfuse")

    def as_dict(self) -> dict:
        return asdict(self)


class Model:
    def __init__(self, config: ModelConfig, params: dict[str, Tensor]):
        self.config = config
        self.params = params
        self.specs = level_specs(config.levels, config.n_base)

    @classmethod
    def create(cls, config: ModelConfig, seed: int = 0) -> "Model":
        rng = np.random.default_rng(seed)
        c = config
        params: dict[str, Tensor] = {}
        params.update(init_mlp(rng, "camera", camera_sizes(c.cam_dim)))
        for l in range(1, c.levels + 1):
            params.update(init_mlp(rng, f"texture.{l}", texture_sizes(c.cam_dim, c.tokens)))
        table = rng.uniform(-1e-4, 1e-4, size=(c.table_size, c.features)).astype(np.float32)
        params["hash.table"] = Tensor(table, requires_grad=True, name="hash.table")
        params.update(init_mlp(rng, "weights", weight_sizes(c.dim, c.cam_dim)))
        feat = c.levels * c.features
        if c.ablation == "no_gcam":
            params.update(init_mlp(rng, "gcam", cam_free_sizes(feat)))
        else:
            params.update(init_mlp(rng, "gcam", cam_fuse_sizes(feat, c.cam_dim)))
        if c.uses_cnn:
            params.update(init_cnn(rng))
        if c.ablation != "no_gfuse":
            params.update(init_mlp(rng, "fuse", FUSE_SIZES))
        params.update(init_mlp(rng, "decode", DECODE_SIZES))
        return cls(config, params)

    def astype(self, dtype) -> "Model":
        params = {k: Tensor(v.data.astype(dtype), requires_grad=True, name=k) for k, v in self.params.items()}
        return Model(self.config, params)

    def copy(self) -> "Model":
        return self.astype(self.dtype)

    @property
    def dtype(self):
        return self.params["hash.table"].dtype

    def parameter_count(self) -> int:
        return sum(p.size for p in self.params.values())


def parameter_count(config: ModelConfig) -> int:
    """Closed-form count, independent of any instantiated model."""
    def mlp(sizes):
        return sum(a * b + b for a, b in zip(sizes[:-1], sizes[1:]))

    c = config
    n = mlp(camera_sizes(c.cam_dim)) + c.levels * mlp(texture_sizes(c.cam_dim, c.tokens))
    n += c.table_size * c.features + mlp(weight_sizes(c.dim, c.cam_dim))
    feat = c.levels * c.features
    n += mlp(cam_free_sizes(feat)) if c.ablation == "no_gcam" else mlp(cam_fuse_sizes(feat, c.cam_dim))
    if c.uses_cnn:
        c_in = 3
        for c_out in (64, 64, 32):
            n += c_out * c_in * 9 + c_out
            c_in = c_out
    if c.ablation != "no_gfuse":
        n += mlp(FUSE_SIZES)
    return n + mlp(DECODE_SIZES)


class ViewCache:
    """Per-scene arrays the pipeline reads: poses, LR images, patches, targets."""

    def __init__(self, ds: SceneDataset, levels: int):
        if ds.levels < levels:
            raise ValueError(f"scene pyramids have {ds.levels} levels, model needs {levels}")
        shapes = {v.hr_shape for v in ds.views}
        if len(shapes) != 1:
            raise ValueError(f"all views must share one HR size, got {sorted(shapes)}")
        self.hr_h, self.hr_w = shapes.pop()
        self.scale = ds.scale
        self.levels = levels
        self.split = list(ds.split)
        self.poses = np.stack([v.pose.flat() for v in ds.views])
        self.lr = np.stack([v.lr_image for v in ds.views])
        ys, xs = np.divmod(np.arange(self.hr_h * self.hr_w), self.hr_w)
        self.coords = pixel_coords(xs, ys, self.hr_w, self.hr_h)
        self.patches = [
            np.stack([patch_grid(pyr[l - 1], self.hr_h, self.hr_w, l, self.scale) for pyr in ds.pyramids])
            for l in range(1, levels + 1)
        ]
        self.targets = [None if v.hr_image is None else v.hr_image.reshape(-1, 3) for v in ds.views]

    @property
    def n_pixels(self) -> int:
        return self.hr_h * self.hr_w


def view_context(model: Model, cache: ViewCache, views: np.ndarray) -> tuple[Tensor, Tensor | None]:
    """Camera codes and global LR features for a set of views, computed once each."""
    cam = embed_camera(cache.poses[views], model.params)
    f_lr = global_features(cache.lr[views], model.params) if model.config.uses_cnn else None
    return cam, f_lr


def forward(model: Model, cache: ViewCache, view_idx, pix_idx, context=None) -> Tensor:
    """RGB predictions (B, 3) for pixels ``pix_idx`` of views ``view_idx``.

    ``context`` may carry precomputed (views, cam, f_lr) from ``view_context``.
    """
    view_idx = np.asarray(view_idx, dtype=np.int64)
    pix_idx = np.asarray(pix_idx, dtype=np.int64)
    cfg, params = model.config, model.params
    if context is None:
        uniq, inv = np.unique(view_idx, return_inverse=True)
        cam_u, flr_u = view_context(model, cache, uniq)
    else:
        uniq, cam_u, flr_u = context
        inv = np.searchsorted(uniq, view_idx)
    cam = take_rows(cam_u, inv)
    dtype = model.dtype
    coords = cache.coords[pix_idx].astype(dtype)
    queries = [
        query_tokens(coords, cache.patches[l - 1][view_idx, pix_idx].astype(dtype), cam, l, params)
        for l in range(1, cfg.levels + 1)
    ]
    v = encode_multiscale(queries, cam, model.specs, params, raw=cfg.raw_weights)
    if cfg.ablation == "no_gcam":
        f_inter = cam_free_map(v, params)
    else:
        f_inter = cam_fuse(v, cam, params)
    if cfg.ablation == "no_gfuse":
        v_bar = f_inter  # f_inter is already 32 wide: the width adapter is the identity
    else:
        if flr_u is None:
            f_lr = Tensor(np.zeros((len(view_idx), 32), dtype=dtype))
        else:
            f_lr = take_rows(flr_u, inv)
        v_bar = fuse(f_inter, f_lr, params)
    return decode_color(v_bar, params)


def forward_pixel(model: Model, cache: ViewCache, view: int, x_hr: int, y_hr: int) -> np.ndarray:
    if not (0 <= x_hr < cache.hr_w and 0 <= y_hr < cache.hr_h):
        raise IndexError(f"pixel ({x_hr}, {y_hr}) outside {cache.hr_w}x{cache.hr_h}")
    with no_tape():
        return forward(model, cache, [view], [y_hr * cache.hr_w + x_hr]).data[0]


def render_view(model: Model, cache: ViewCache, view: int, chunk: int = 2048) -> np.ndarray:
    """Full HR image (H, W, 3) for one view."""
    n = cache.n_pixels
    out = np.empty((n, 3), dtype=np.float64)
    with no_tape():
        views = np.array([view])
        cam, f_lr = view_context(model, cache, views)
        for start in range(0, n, chunk):
            pix = np.arange(start, min(n, start + chunk))
            vi = np.full(pix.size, view)
            out[start:start + pix.size] = forward(model, cache, vi, pix, context=(views, cam, f_lr)).data
    return out.reshape(cache.hr_h, cache.hr_w, 3)
