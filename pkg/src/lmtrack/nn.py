"""Parameter trees and a few layers built on ``gradtensor``.

Parameters live in nested dicts whose leaves are ``Tensor``; ``flatten``
turns a tree into ``{"a/b/weight": Tensor}`` for optimizers and checkpoints.
"""

from __future__ import annotations

import numpy as np

from . import gradtensor as gt
from .gradtensor import Tensor


def linear_params(rng: np.random.Generator, n_in: int, n_out: int, zero: bool = False, gain: float = 1.0) -> dict:
    if zero:
        w = np.zeros((n_out, n_in))
    else:
        w = rng.normal(scale=gain / np.sqrt(n_in), size=(n_out, n_in))
    return {"weight": gt.parameter(w), "bias": gt.parameter(np.zeros(n_out))}


def linear(p: dict, x: Tensor) -> Tensor:
    return gt.linear(x, p["weight"], p["bias"])


def mlp_params(rng: np.random.Generator, sizes: list, zero_last: bool = False) -> list:
    layers = []
    for i, (a, b) in enumerate(zip(sizes[:-1], sizes[1:])):
        last = i == len(sizes) - 2
        layers.append(linear_params(rng, a, b, zero=zero_last and last, gain=1.0 if last else np.sqrt(2.0)))
    return layers


def mlp(layers: list, x: Tensor) -> Tensor:
    for i, p in enumerate(layers):
        x = linear(p, x)
        if i < len(layers) - 1:
            x = gt.relu(x)
    return x


def layer_norm_params(d: int) -> dict:
    return {"gain": gt.parameter(np.ones(d)), "bias": gt.parameter(np.zeros(d))}


def layer_norm(p: dict, x: Tensor) -> Tensor:
    return gt.layer_norm(x, p["gain"], p["bias"])


def flatten(tree, prefix: str = "") -> dict:
    out = {}
    if isinstance(tree, Tensor):
        out[prefix.rstrip("/")] = tree
    elif isinstance(tree, dict):
        for k in sorted(tree):
            out.update(flatten(tree[k], f"{prefix}{k}/"))
    elif isinstance(tree, (list, tuple)):
        for i, v in enumerate(tree):
            out.update(flatten(v, f"{prefix}{i}/"))
    return out


def count(tree) -> int:
    return sum(t.size for t in flatten(tree).values())


def sinusoidal(x: np.ndarray, num_freqs: int, max_range: float) -> np.ndarray:
    """Fixed sin/cos features of coordinates ``x`` (n, c) -> (n, c * 2 * num_freqs).

    Wavelengths are geometric between 1 m and ``4 * max_range``.
    """
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    wavelengths = np.geomspace(1.0, 4.0 * max_range, num_freqs)
    ang = x[..., None] * (2.0 * np.pi / wavelengths)
    feats = np.concatenate([np.sin(ang), np.cos(ang)], axis=-1)
    return feats.reshape(x.shape[0], -1)
