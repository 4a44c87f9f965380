"""Central finite-difference checks of every op and of the full pixel loss.

Everything here runs at float64.  Relative error of a gradient is
``|analytic - numeric| / max(|analytic|, |numeric|)`` taken over the whole
gradient (2-norm) for op checks and per scalar for the end-to-end check.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import autodiff as ad
from .data import synth_scene
from .model import Model, ModelConfig, ViewCache, forward

STEP = 1e-3
OP_TOL = 1e-3
E2E_TOL = 1e-2


def rel_error(a: np.ndarray, n: np.ndarray) -> float:
    a, n = np.ravel(a), np.ravel(n)
    denom = max(np.linalg.norm(a), np.linalg.norm(n))
    return 0.0 if denom == 0 else float(np.linalg.norm(a - n) / denom)


def op_gradients(fn: Callable[..., ad.Tensor], arrays: list[np.ndarray], seed: int = 0, h: float = STEP):
    """Analytic and numeric gradients of ``sum(fn(*inputs) * R)`` for a fixed random R."""
    arrays = [np.asarray(a, dtype=np.float64) for a in arrays]
    probe = fn(*[ad.Tensor(a) for a in arrays])
    proj = np.random.default_rng(seed).normal(size=probe.shape)

    def value(arrs):
        return float(np.sum(fn(*[ad.Tensor(a) for a in arrs]).data * proj))

    leaves = [ad.Tensor(a.copy(), requires_grad=True) for a in arrays]
    with ad.Tape() as tape:
        out = fn(*leaves)
        loss = ad.sum_all(ad.mul(out, ad.Tensor(proj)))
    ad.backward(loss, tape)
    analytic = [t.grad for t in leaves]
    numeric = []
    for i, a in enumerate(arrays):
        g = np.zeros_like(a)
        for idx in np.ndindex(a.shape):
            plus = [x.copy() for x in arrays]
            minus = [x.copy() for x in arrays]
            plus[i][idx] += h
            minus[i][idx] -= h
            g[idx] = (value(plus) - value(minus)) / (2 * h)
        numeric.append(g)
    return analytic, numeric


def op_error(fn, arrays, seed: int = 0) -> float:
    analytic, numeric = op_gradients(fn, arrays, seed)
    return max(rel_error(a, n) for a, n in zip(analytic, numeric))


def op_suite(seed: int = 0) -> dict[str, Callable[[], float]]:
    """Named checks, each returning the relative error of one op on random inputs."""
    rng = np.random.default_rng(seed)

    def away_from_zero(shape):
        x = rng.uniform(0.2, 1.5, size=shape)
        return x * rng.choice([-1.0, 1.0], size=shape)

    idx = rng.integers(0, 6, size=(4, 3))
    return {
        "linear": lambda: op_error(ad.linear, [rng.normal(size=(4, 2)), rng.normal(size=(3, 2)),
                                                rng.normal(size=3)], seed),
        "relu": lambda: op_error(ad.relu, [away_from_zero((5, 4))], seed),
        "tanh": lambda: op_error(ad.tanh, [rng.normal(size=(5, 4))], seed),
        "sigmoid": lambda: op_error(ad.sigmoid, [rng.normal(size=(5, 4)) * 2], seed),
        "conv2d": lambda: op_error(ad.conv2d, [rng.normal(size=(2, 5, 5)), rng.normal(size=(3, 2, 3, 3)),
                                                rng.normal(size=3)], seed),
        "adaptive_avg_pool": lambda: op_error(ad.adaptive_avg_pool, [rng.normal(size=(3, 4, 5))], seed),
        "softmax": lambda: op_error(ad.softmax, [rng.normal(size=8)], seed),
        "mse_loss": lambda: op_error(lambda p: ad.mse_loss(p, np.array([0.2, -0.4, 0.9])),
                                     [rng.normal(size=3)], seed),
        "concat": lambda: op_error(lambda a, b: ad.concat([a, b]), [rng.normal(size=(3, 2)),
                                                                   rng.normal(size=(3, 4))], seed),
        "take_rows": lambda: op_error(lambda t: ad.take_rows(t, idx), [rng.normal(size=(6, 2))], seed),
        "weighted_sum": lambda: op_error(ad.weighted_sum, [rng.normal(size=(3, 4)), rng.normal(size=(3, 4, 2))],
                                         seed),
        "affine": lambda: op_error(lambda x: ad.affine(x, 3.0, 0.5), [rng.normal(size=(4,))], seed),
        "add": lambda: op_error(ad.add, [rng.normal(size=(3, 4)), rng.normal(size=(4,))], seed),
        "mul": lambda: op_error(ad.mul, [rng.normal(size=(3, 4)), rng.normal(size=(3, 1))], seed),
    }


@dataclass
class EndToEndReport:
    errors: list[tuple[str, tuple, float, float, float]] = field(default_factory=list)
    skipped: int = 0
    names: list[str] = field(default_factory=list)

    @property
    def worst(self) -> float:
        return max((e[2] for e in self.errors), default=0.0)


def _pixel_loss(model: Model, cache: ViewCache, views, pixels, targets, track: bool = False):
    tape = ad.Tape(track_branches=track)
    with tape:
        loss = ad.mse_loss(forward(model, cache, views, pixels), targets)
    return loss, tape


def end_to_end(seed: int = 0, n_params: int = 20, config: ModelConfig | None = None,
               h: float = STEP) -> EndToEndReport:
    """Finite-difference check of randomly drawn parameters through the whole pipeline.

    Draws whose +h/-h evaluations change a ReLU mask or an enclosing grid cell
    sit on a kink of the loss and are redrawn (counted in ``skipped``).
    """
    config = config or ModelConfig()
    ds = synth_scene(seed=seed, n_views=2, hr_size=16, scale=2, levels=config.levels)
    cache = ViewCache(ds, config.levels)
    model = Model.create(config, seed=seed).astype(np.float64)
    rng = np.random.default_rng(seed + 7)
    # a near-zero table would hide the weight-prediction path behind tiny features
    model.params["hash.table"].data = rng.normal(scale=0.5, size=model.params["hash.table"].shape)
    views = np.array([0, 0, 1, 1])
    pixels = rng.integers(0, cache.n_pixels, size=4)
    targets = np.stack([cache.targets[v][p] for v, p in zip(views, pixels)])

    loss, tape = _pixel_loss(model, cache, views, pixels, targets, track=True)
    ad.backward(loss, tape)
    base_branches = tape.branches
    report = EndToEndReport(names=list(model.params))
    touched = np.flatnonzero(np.any(model.params["hash.table"].grad != 0, axis=1))
    names = list(model.params)
    attempts = 0
    while len(report.errors) < n_params and attempts < 50 * n_params:
        attempts += 1
        name = names[rng.integers(len(names))]
        p = model.params[name]
        if name == "hash.table":
            idx = (int(rng.choice(touched)), int(rng.integers(p.shape[1])))
        else:
            idx = tuple(int(rng.integers(n)) for n in p.shape)
        orig = p.data[idx]
        vals = []
        ok = True
        for sign in (1, -1):
            p.data[idx] = orig + sign * h
            lo, tp = _pixel_loss(model, cache, views, pixels, targets, track=True)
            vals.append(float(lo.data))
            ok &= tp.branches == base_branches
        p.data[idx] = orig
        if not ok:
            report.skipped += 1
            continue
        numeric = (vals[0] - vals[1]) / (2 * h)
        analytic = float(p.grad[idx])
        denom = max(abs(analytic), abs(numeric))
        err = 0.0 if denom < 1e-12 else abs(analytic - numeric) / denom
        report.errors.append((name, idx, err, analytic, numeric))
    return report

