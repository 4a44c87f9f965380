"""Dense-stack helpers shared by every network in the model."""

from __future__ import annotations

import numpy as np

from .autodiff import Tensor, activation, linear


def he_uniform(rng: np.random.Generator, n_out: int, n_in: int) -> np.ndarray:
    bound = np.sqrt(6.0 / n_in)
    return rng.uniform(-bound, bound, size=(n_out, n_in)).astype(np.float32)


def init_mlp(rng: np.random.Generator, prefix: str, sizes: list[int]) -> dict[str, Tensor]:
    params = {}
    for i, (n_in, n_out) in enumerate(zip(sizes[:-1], sizes[1:])):
        params[f"{prefix}.{i}.weight"] = Tensor(he_uniform(rng, n_out, n_in), requires_grad=True,
                                                name=f"{prefix}.{i}.weight")
        params[f"{prefix}.{i}.bias"] = Tensor(np.zeros(n_out, np.float32), requires_grad=True,
                                              name=f"{prefix}.{i}.bias")
    return params


def run_mlp(x: Tensor, params: dict[str, Tensor], prefix: str, acts: list[str | None]) -> Tensor:
    """Apply ``len(acts)`` dense layers; ``None`` leaves a layer linear."""
    for i, act in enumerate(acts):
        x = linear(x, params[f"{prefix}.{i}.weight"], params[f"{prefix}.{i}.bias"])
        if act is not None:
            x = activation(x, act)
    return x
