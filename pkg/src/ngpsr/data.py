"""Scenes, resampling, patches and image metrics."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from PIL import Image

BICUBIC_A = -0.5
PSNR_CAP = 99.0


class SceneFormatError(ValueError):
    """A scene directory or one of its files could not be read."""


@dataclass(frozen=True)
class CameraPose:
    cam_to_world: np.ndarray  # (3, 4): rotation | translation
    fov_x: float

    def __post_init__(self):
        m = np.asarray(self.cam_to_world, dtype=np.float64)
        if m.shape != (3, 4):
            raise ValueError(f"cam_to_world must be 3x4, got {m.shape}")
        rot = m[:, :3]
        if not np.allclose(rot @ rot.T, np.eye(3), atol=1e-4):
            raise ValueError("cam_to_world rotation block is not orthonormal")
        if not 0 < self.fov_x < math.pi:
            raise ValueError(f"fov_x must lie in (0, pi), got {self.fov_x}")
        object.__setattr__(self, "cam_to_world", m)

    @classmethod
    def from_matrix4(cls, mat, fov_x: float) -> "CameraPose":
        m = np.asarray(mat, dtype=np.float64)
        if m.shape != (4, 4):
            raise ValueError(f"transform_matrix must be 4x4, got shape {m.shape}")
        return cls(m[:3, :4], float(fov_x))

    def matrix4(self) -> np.ndarray:
        out = np.eye(4)
        out[:3] = self.cam_to_world
        return out

    def flat(self) -> np.ndarray:
        return self.cam_to_world.reshape(-1)


@dataclass
class ViewRecord:
    pose: CameraPose
    lr_image: np.ndarray
    hr_image: np.ndarray | None
    scale: int
    name: str = ""

    def __post_init__(self):
        if self.scale < 1:
            raise ValueError(f"scale must be >= 1, got {self.scale}")
        if self.hr_image is not None:
            h, w = self.lr_image.shape[:2]
            if self.hr_image.shape[:2] != (h * self.scale, w * self.scale):
                raise ValueError(
                    f"HR image {self.hr_image.shape[:2]} is not {self.scale}x LR image {(h, w)}")

    @property
    def hr_shape(self) -> tuple[int, int]:
        h, w = self.lr_image.shape[:2]
        return h * self.scale, w * self.scale


@dataclass
class SceneDataset:
    views: list[ViewRecord]
    split: list[str]
    levels: int = 4
    pyramids: list[list[np.ndarray]] = field(default_factory=list)

    def __post_init__(self):
        if len(self.split) != len(self.views):
            raise ValueError("split must assign every view")
        for s, v in zip(self.split, self.views):
            if s not in ("train", "test"):
                raise ValueError(f"unknown split {s!r}")
            if s == "train" and v.hr_image is None:
                raise ValueError(f"training view {v.name!r} has no HR target")
        if not self.pyramids:
            self.pyramids = [build_pyramid(v.lr_image, self.levels) for v in self.views]

    @property
    def scale(self) -> int:
        return self.views[0].scale

    def indices(self, split: str) -> list[int]:
        return [i for i, s in enumerate(self.split) if s == split]


# ----------------------------------------------------------------- resampling


def cubic_kernel(t: np.ndarray, a: float = BICUBIC_A) -> np.ndarray:
    t = np.abs(t)
    t2, t3 = t * t, t * t * t
    near = (a + 2) * t3 - (a + 3) * t2 + 1
    far = a * t3 - 5 * a * t2 + 8 * a * t - 4 * a
    return np.where(t <= 1, near, np.where(t < 2, far, 0.0))


def resample_matrix(n_in: int, n_out: int) -> np.ndarray:
    """Row-stochastic (n_out, n_in) bicubic matrix, align-centers, clamp-to-edge.

    The kernel is not stretched when shrinking: both directions sample the
    same 4-tap Catmull-Rom filter.
    """
    scale = n_in / n_out
    mat = np.zeros((n_out, n_in))
    for i in range(n_out):
        center = (i + 0.5) * scale - 0.5
        taps = np.arange(math.floor(center) - 1, math.floor(center) + 3)
        w = cubic_kernel(taps - center)
        w /= w.sum()
        np.add.at(mat[i], np.clip(taps, 0, n_in - 1), w)
    return mat


def resize_bicubic(img: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    mh = resample_matrix(img.shape[0], out_h)
    mw = resample_matrix(img.shape[1], out_w)
    out = np.einsum("ih,hwc,jw->ijc", mh, np.asarray(img, dtype=np.float64), mw)
    return np.clip(out, 0.0, 1.0)


def downsample_bicubic(img: np.ndarray, factor: int) -> np.ndarray:
    if factor < 1:
        raise ValueError(f"downsample factor must be >= 1, got {factor}")
    h, w = img.shape[:2]
    ph, pw = (-h) % factor, (-w) % factor
    if ph or pw:
        img = np.pad(img, ((0, ph), (0, pw), (0, 0)), mode="edge")
    return resize_bicubic(img, img.shape[0] // factor, img.shape[1] // factor)


def upsample_bicubic(img: np.ndarray, factor: int) -> np.ndarray:
    if factor < 1:
        raise ValueError(f"upsample factor must be >= 1, got {factor}")
    return resize_bicubic(img, img.shape[0] * factor, img.shape[1] * factor)


def build_pyramid(lr: np.ndarray, levels: int) -> list[np.ndarray]:
    """Level 1 is the LR image; each further level halves the previous one."""
    out = [np.asarray(lr, dtype=np.float64)]
    for _ in range(1, levels):
        prev = out[-1]
        h, w = max(1, -(-prev.shape[0] // 2)), max(1, -(-prev.shape[1] // 2))
        out.append(resize_bicubic(prev, h, w))
    return out


# -------------------------------------------------------------------- patches


def hr_to_lr_coord(x_hr, level: int, scale: int):
    return (np.asarray(x_hr, dtype=np.float64) + 0.5) / (scale * 2 ** (level - 1)) - 0.5


def extract_patch(img: np.ndarray, rx: float, ry: float) -> np.ndarray:
    """3x3 RGB neighbourhood around the nearest pixel, flattened (dy, dx, c)."""
    h, w = img.shape[:2]
    cx, cy = int(math.floor(rx + 0.5)), int(math.floor(ry + 0.5))
    ys = np.clip(np.arange(cy - 1, cy + 2), 0, h - 1)
    xs = np.clip(np.arange(cx - 1, cx + 2), 0, w - 1)
    return img[ys[:, None], xs[None, :]].reshape(-1)


def patch_grid(img: np.ndarray, hr_h: int, hr_w: int, level: int, scale: int) -> np.ndarray:
    """Patches for every HR pixel, row-major pixel order: (hr_h * hr_w, 27)."""
    h, w = img.shape[:2]
    cy = np.floor(hr_to_lr_coord(np.arange(hr_h), level, scale) + 0.5).astype(np.int64)
    cx = np.floor(hr_to_lr_coord(np.arange(hr_w), level, scale) + 0.5).astype(np.int64)
    d = np.arange(-1, 2)
    ys = np.clip(cy[:, None] + d[None, :], 0, h - 1)  # (hr_h, 3)
    xs = np.clip(cx[:, None] + d[None, :], 0, w - 1)  # (hr_w, 3)
    p = img[ys[:, None, :, None], xs[None, :, None, :]]  # (hr_h, hr_w, 3, 3, C)
    return p.reshape(hr_h * hr_w, -1)


# -------------------------------------------------------------------- metrics


def psnr(a: np.ndarray, b: np.ndarray) -> float:
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"psnr: shape mismatch {a.shape} vs {b.shape}")
    mse = float(np.mean((a - b) ** 2))
    if mse < 1e-10:
        return PSNR_CAP
    return min(PSNR_CAP, -10.0 * math.log10(mse))


def gaussian_window(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    x = np.arange(size) - (size - 1) / 2
    g = np.exp(-(x * x) / (2 * sigma * sigma))
    return g / g.sum()


def _filter_valid(img: np.ndarray, g: np.ndarray) -> np.ndarray:
    k = g.size
    rows = sliding_window_view(img, k, axis=0) @ g
    return sliding_window_view(rows, k, axis=1) @ g


def ssim(a: np.ndarray, b: np.ndarray, window: int = 11, sigma: float = 1.5) -> float:
    """Single-scale SSIM, Gaussian window, valid positions only, mean over channels."""
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"ssim: shape mismatch {a.shape} vs {b.shape}")
    if min(a.shape[:2]) < window:
        raise ValueError(f"ssim: image {a.shape[:2]} smaller than {window}x{window} window")
    if a.ndim == 2:
        a, b = a[..., None], b[..., None]
    c1, c2 = 0.01 ** 2, 0.03 ** 2
    g = gaussian_window(window, sigma)
    vals = []
    for ch in range(a.shape[2]):
        x, y = a[..., ch], b[..., ch]
        mx, my = _filter_valid(x, g), _filter_valid(y, g)
        sxx = _filter_valid(x * x, g) - mx * mx
        syy = _filter_valid(y * y, g) - my * my
        sxy = _filter_valid(x * y, g) - mx * my
        num = (2 * mx * my + c1) * (2 * sxy + c2)
        den = (mx * mx + my * my + c1) * (sxx + syy + c2)
        vals.append(np.mean(num / den))
    return float(np.mean(vals))


# ------------------------------------------------------------------ image i/o


def read_image(path: Path) -> np.ndarray:
    try:
        with Image.open(path) as im:
            im.load()
            if im.mode in ("RGBA", "LA") or "transparency" in im.info:
                rgba = np.asarray(im.convert("RGBA"), dtype=np.float64) / 255.0
                alpha = rgba[..., 3:]
                return rgba[..., :3] * alpha + (1.0 - alpha)
            return np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0
    except FileNotFoundError:
        raise SceneFormatError(f"missing image file: {path}") from None
    except OSError as exc:
        raise SceneFormatError(f"cannot decode image {path}: {exc}") from None


def to_uint8(img: np.ndarray) -> np.ndarray:
    return np.clip(np.round(np.asarray(img) * 255.0), 0, 255).astype(np.uint8)


def write_image(path: Path, img: np.ndarray) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(to_uint8(img), mode="RGB").save(path, format="PNG")


# ----------------------------------------------------------------- scene i/o


def _read_transforms(path: Path) -> dict:
    try:
        meta = json.loads(path.read_text())
    except FileNotFoundError:
        raise SceneFormatError(f"missing transforms file: {path}") from None
    except json.JSONDecodeError as exc:
        raise SceneFormatError(f"malformed JSON in {path}: {exc}") from None
    if "camera_angle_x" not in meta or not isinstance(meta.get("frames"), list):
        raise SceneFormatError(f"{path}: expected 'camera_angle_x' and a 'frames' list")
    return meta


def _resolve_frame(root: Path, file_path: str) -> Path:
    p = root / file_path
    return p if p.suffix else p.with_suffix(".png")


def declared_scale(root) -> int | None:
    """Scale factor recorded by save_scene, or None for scenes from elsewhere."""
    scales = set()
    for name in ("train", "test"):
        path = Path(root) / f"transforms_{name}.json"
        if path.exists() and "scale" in (meta := _read_transforms(path)):
            scales.add(int(meta["scale"]))
    if len(scales) > 1:
        raise SceneFormatError(f"{root}: train and test transforms disagree on scale: {sorted(scales)}")
    return scales.pop() if scales else None


def load_scene(root, scale: int, levels: int = 4) -> SceneDataset:
    """Read a NeRF-Blender style directory; stored images are the HR targets."""
    root = Path(root)
    views, split = [], []
    for name in ("train", "test"):
        path = root / f"transforms_{name}.json"
        meta = _read_transforms(path)
        fov = float(meta["camera_angle_x"])
        for k, frame in enumerate(meta["frames"]):
            try:
                pose = CameraPose.from_matrix4(frame["transform_matrix"], fov)
                fp = frame["file_path"]
            except (KeyError, ValueError, TypeError) as exc:
                raise SceneFormatError(f"{path}: frame {k}: {exc}") from None
            hr = read_image(_resolve_frame(root, fp))
            h, w = hr.shape[:2]
            if h % scale or w % scale:
                hr = np.pad(hr, ((0, (-h) % scale), (0, (-w) % scale), (0, 0)), mode="edge")
            lr = downsample_bicubic(hr, scale)
            views.append(ViewRecord(pose, lr, hr, scale, name=fp))
            split.append(name)
    if not views:
        raise SceneFormatError(f"{root}: scene has no frames")
    return SceneDataset(views, split, levels=levels)


def merge_scenes(scenes: list[SceneDataset]) -> SceneDataset:
    """Pool several scenes into one dataset for cross-scene training."""
    if len({ds.scale for ds in scenes}) > 1 or len({ds.levels for ds in scenes}) > 1:
        raise ValueError("merged scenes must share scale and pyramid depth")
    if len(scenes) == 1:
        return scenes[0]
    return SceneDataset([v for ds in scenes for v in ds.views], [s for ds in scenes for s in ds.split],
                        levels=scenes[0].levels, pyramids=[p for ds in scenes for p in ds.pyramids])


def save_scene(ds: SceneDataset, root) -> None:
    """Write HR images and transforms in the NeRF-Blender layout."""
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    for name in ("train", "test"):
        frames = []
        idx = ds.indices(name)
        for j, i in enumerate(idx):
            v = ds.views[i]
            img = v.hr_image if v.hr_image is not None else upsample_bicubic(v.lr_image, v.scale)
            rel = f"./{name}/r_{j}"
            write_image(root / f"{rel}.png", img)
            frames.append({"file_path": rel, "transform_matrix": v.pose.matrix4().tolist()})
        fov = ds.views[idx[0]].pose.fov_x if idx else ds.views[0].pose.fov_x
        meta = {"camera_angle_x": fov, "scale": ds.scale, "frames": frames}
        (root / f"transforms_{name}.json").write_text(json.dumps(meta, indent=2) + "\n")


# ----------------------------------------------------------- synthetic scenes


def look_at(eye: np.ndarray, target=(0.0, 0.0, 0.0), up=(0.0, 0.0, 1.0)) -> np.ndarray:
    """Camera-to-world matrix, OpenGL convention (camera looks down its -z)."""
    eye = np.asarray(eye, dtype=np.float64)
    back = eye - np.asarray(target, dtype=np.float64)
    back /= np.linalg.norm(back)
    right = np.cross(up, back)
    right /= np.linalg.norm(right)
    cam_up = np.cross(back, right)
    return np.stack([right, cam_up, back, eye], axis=1)


def _texture(u: np.ndarray, v: np.ndarray, params: dict) -> np.ndarray:
    cell = params["cell"]
    checker = (np.floor(u / cell) + np.floor(v / cell)) % 2
    phase = 2 * np.pi * params["freq"] * (u * math.cos(params["angle"]) + v * math.sin(params["angle"]))
    stripes = 0.5 + 0.5 * np.sin(phase + params["phase"])
    ca, cb, cs = params["colors"]
    base = ca * checker[..., None] + cb * (1 - checker[..., None])
    return np.clip(0.65 * base + 0.35 * stripes[..., None] * cs, 0.0, 1.0)


def render_plane(pose: CameraPose, size: int, params: dict, supersample: int = 4) -> np.ndarray:
    """Pinhole render of the textured z=0 plane, box-filtered over sub-pixels."""
    focal = 0.5 * size / math.tan(0.5 * pose.fov_x)
    sub = (np.arange(size * supersample) + 0.5) / supersample
    px, py = np.meshgrid(sub, sub)
    dirs = np.stack([(px - size / 2) / focal, -(py - size / 2) / focal, -np.ones_like(px)], axis=-1)
    rot, origin = pose.cam_to_world[:, :3], pose.cam_to_world[:, 3]
    d = dirs @ rot.T
    dz = d[..., 2]
    t = np.where(dz < -1e-9, -origin[2] / np.where(dz < -1e-9, dz, -1.0), np.inf)
    hit = np.isfinite(t)
    u = origin[0] + t * d[..., 0]
    v = origin[1] + t * d[..., 1]
    col = np.ones(px.shape + (3,))
    col[hit] = _texture(u[hit], v[hit], params)
    return col.reshape(size, supersample, size, supersample, 3).mean(axis=(1, 3))


def synth_scene(seed: int = 0, n_views: int = 8, hr_size: int = 64, scale: int = 2,
                levels: int = 4, arc: float = 2 * np.pi) -> SceneDataset:
    """Deterministic textured-plane scene seen from cameras on a circle.

    Cameras are spread evenly over ``arc`` radians of the circle.  Every
    eighth view (index 4, 12, ...) is held out as a test view.
    """
    if hr_size % scale:
        raise ValueError(f"hr_size {hr_size} not divisible by scale {scale}")
    rng = np.random.default_rng(seed)
    params = {
        "cell": 0.35,
        "freq": float(rng.uniform(2.2, 2.8)),
        "angle": float(rng.uniform(0, np.pi)),
        "phase": float(rng.uniform(0, 2 * np.pi)),
        "colors": rng.uniform(0.1, 0.9, size=(3, 3)),
    }
    start = float(rng.uniform(0, 2 * np.pi))
    fov = 0.6911112070083618
    views, split = [], []
    for i in range(n_views):
        theta = start + arc * i / n_views
        eye = np.array([2.6 * math.cos(theta), 2.6 * math.sin(theta), 2.0])
        pose = CameraPose(look_at(eye), fov)
        hr = np.round(render_plane(pose, hr_size, params) * 255.0) / 255.0
        lr = downsample_bicubic(hr, scale)
        views.append(ViewRecord(pose, lr, hr, scale, name=f"view_{i:03d}"))
        split.append("test" if i % 8 == 4 else "train")
    return SceneDataset(views, split, levels=levels)
