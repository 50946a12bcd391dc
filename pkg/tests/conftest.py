"""Shared test helpers: finite-difference oracles and tiny fixtures."""

from __future__ import annotations

import numpy as np

from ofhrl.nn import Mlp


def sample_kink_free_input(net: Mlp, rng: np.random.Generator, margin: float = 1e-3,
                           scale: float = 1.0) -> np.ndarray:
    """Draw an input whose relu pre-activations are all at least ``margin``
    away from zero, so central differences never cross a kink."""
    for _ in range(200):
        x = rng.normal(scale=scale, size=net.input_dim)
        net.forward(x)
        inputs, preacts = net._cache
        ok = True
        for layer, act in enumerate(net.activations):
            if act == "relu" and np.any(np.abs(preacts[layer]) < margin):
                ok = False
                break
        if ok:
            return x
    raise AssertionError("could not find a kink-free input")


def fd_param_grad(net: Mlp, x: np.ndarray, loss_weights: np.ndarray,
                  indices, step: float = 1e-5) -> np.ndarray:
    """Central finite differences of loss = loss_weights . forward(x) at the
    selected parameter coordinates."""
    out = np.empty(len(indices))
    for j, idx in enumerate(indices):
        original = net.params[idx]
        net.params[idx] = original + step
        hi = float(loss_weights @ net.forward(x, cache=False))
        net.params[idx] = original - step
        lo = float(loss_weights @ net.forward(x, cache=False))
        net.params[idx] = original
        out[j] = (hi - lo) / (2.0 * step)
    return out


def max_rel_error(a: np.ndarray, b: np.ndarray, floor: float = 1e-6) -> float:
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)
    return float(np.max(np.abs(a - b) / denom))
