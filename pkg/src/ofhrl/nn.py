"""Minimal dense-network core: flat-parameter MLPs with hand-rolled backprop.

Everything learned in this package is an `Mlp` (or a flat parameter vector)
updated with `adam_step`/`adam_update`. Parameters live in a single float64
vector so checkpointing, optimizer state and gradient checks are trivial.
There is deliberately no general autodiff graph; compositions of networks
(e.g. encoder -> reparameterization -> decoder) chain gradients by hand via
`backward(..., return_input_grad=True)`.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

ACTIVATIONS = ("relu", "tanh", "identity")

_MLP_MAGIC = b"OFNN1\n"


class Mlp:
    """Fully connected net over a flat float64 parameter vector.

    Layout: for each layer, the weight matrix (fan_out, fan_in) in row-major
    order, then the bias vector. A trained net is immutable by convention and
    safe for concurrent reads with ``cache=False``; training (forward with
    cache, backward, adam_step) is single-writer.
    """

    def __init__(self, layer_sizes, activations=None, seed=None, init="glorot"):
        sizes = tuple(int(s) for s in layer_sizes)
        if len(sizes) < 2 or any(s <= 0 for s in sizes):
            raise ValueError(f"layer_sizes must be >= 2 positive integers, got {layer_sizes}")
        if activations is None:
            activations = ["relu"] * (len(sizes) - 2) + ["identity"]
        activations = tuple(activations)
        if len(activations) != len(sizes) - 1:
            raise ValueError("need one activation per weight layer")
        for a in activations:
            if a not in ACTIVATIONS:
                raise ValueError(f"unknown activation {a!r}")

        self.layer_sizes = sizes
        self.activations = activations
        self._offsets = []
        offset = 0
        for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
            self._offsets.append((offset, offset + fan_in * fan_out, offset + (fan_in + 1) * fan_out))
            offset += (fan_in + 1) * fan_out
        self.parameter_count = offset
        self.params = np.zeros(offset, dtype=np.float64)

        if init == "glorot":
            rng = np.random.default_rng(seed)
            for layer in range(self.n_layers):
                fan_in, fan_out = sizes[layer], sizes[layer + 1]
                limit = np.sqrt(6.0 / (fan_in + fan_out))
                self.weights(layer)[:] = rng.uniform(-limit, limit, size=(fan_out, fan_in))
        elif init != "zero":
            raise ValueError(f"unknown init {init!r}")

        self._cache = None

    @property
    def n_layers(self) -> int:
        return len(self.layer_sizes) - 1

    @property
    def input_dim(self) -> int:
        return self.layer_sizes[0]

    @property
    def output_dim(self) -> int:
        return self.layer_sizes[-1]

    def weights(self, layer: int) -> np.ndarray:
        """Writable view of layer's weight matrix, shape (fan_out, fan_in)."""
        start, w_end, _ = self._offsets[layer]
        fan_in = self.layer_sizes[layer]
        fan_out = self.layer_sizes[layer + 1]
        return self.params[start:w_end].reshape(fan_out, fan_in)

    def biases(self, layer: int) -> np.ndarray:
        _, w_end, end = self._offsets[layer]
        return self.params[w_end:end]

    def copy(self) -> "Mlp":
        clone = Mlp(self.layer_sizes, self.activations, init="zero")
        clone.params[:] = self.params
        return clone

    def forward(self, x, cache: bool = True) -> np.ndarray:
        """Evaluate the net on a single vector (d,) or a batch (B, d)."""
        x = np.asarray(x, dtype=np.float64)
        single = x.ndim == 1
        h = x[None, :] if single else x
        if h.ndim != 2 or h.shape[1] != self.input_dim:
            raise ValueError(f"input has shape {x.shape}, expected (.., {self.input_dim})")

        inputs = [h]
        preacts = []
        for layer in range(self.n_layers):
            z = h @ self.weights(layer).T + self.biases(layer)
            act = self.activations[layer]
            if act == "relu":
                h = np.maximum(z, 0.0)
            elif act == "tanh":
                h = np.tanh(z)
            else:
                h = z
            preacts.append(z)
            inputs.append(h)
        self._cache = (inputs, preacts) if cache else None
        return h[0] if single else h

    def backward(self, output_grad, return_input_grad: bool = False):
        """Gradient of a scalar loss w.r.t. the flat parameter vector.

        ``output_grad`` is dLoss/dOutput from the most recent cached forward
        pass, shaped like that pass's output; batch rows are summed (callers
        fold any 1/B averaging into ``output_grad``). Optionally also returns
        dLoss/dInput for chaining through network compositions.
        """
        if self._cache is None:
            raise RuntimeError("backward called before a cached forward pass")
        inputs, preacts = self._cache
        g = np.asarray(output_grad, dtype=np.float64)
        single = g.ndim == 1
        if single:
            g = g[None, :]
        if g.shape != (inputs[0].shape[0], self.output_dim):
            raise ValueError(f"output_grad has shape {output_grad.shape}, "
                             f"expected {(inputs[0].shape[0], self.output_dim)}")

        grad = np.zeros(self.parameter_count, dtype=np.float64)
        for layer in reversed(range(self.n_layers)):
            act = self.activations[layer]
            if act == "relu":
                dz = g * (preacts[layer] > 0.0)
            elif act == "tanh":
                dz = g * (1.0 - inputs[layer + 1] ** 2)
            else:
                dz = g
            start, w_end, end = self._offsets[layer]
            fan_in = self.layer_sizes[layer]
            fan_out = self.layer_sizes[layer + 1]
            grad[start:w_end] = (dz.T @ inputs[layer]).reshape(fan_out * fan_in)
            grad[w_end:end] = dz.sum(axis=0)
            g = dz @ self.weights(layer)
        if return_input_grad:
            return grad, (g[0] if single else g)
        return grad


@dataclass
class AdamState:
    """Optimizer state for one flat parameter vector."""

    learning_rate: float
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    step_count: int = 0
    first_moment: np.ndarray = field(default=None, repr=False)
    second_moment: np.ndarray = field(default=None, repr=False)

    @classmethod
    def for_size(cls, n: int, learning_rate: float, **kwargs) -> "AdamState":
        if learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        return cls(learning_rate=learning_rate,
                   first_moment=np.zeros(n, dtype=np.float64),
                   second_moment=np.zeros(n, dtype=np.float64),
                   **kwargs)

    @classmethod
    def for_net(cls, net: Mlp, learning_rate: float, **kwargs) -> "AdamState":
        return cls.for_size(net.parameter_count, learning_rate, **kwargs)


def adam_update(params: np.ndarray, state: AdamState, gradient) -> None:
    """One bias-corrected Adam step, applied to ``params`` in place."""
    g = np.asarray(gradient, dtype=np.float64)
    if g.shape != params.shape:
        raise ValueError(f"gradient shape {g.shape} does not match parameters {params.shape}")
    if not np.all(np.isfinite(g)):
        raise ValueError("gradient contains non-finite entries")
    state.step_count += 1
    state.first_moment *= state.beta1
    state.first_moment += (1.0 - state.beta1) * g
    state.second_moment *= state.beta2
    state.second_moment += (1.0 - state.beta2) * g * g
    m_hat = state.first_moment / (1.0 - state.beta1 ** state.step_count)
    v_hat = state.second_moment / (1.0 - state.beta2 ** state.step_count)
    params -= state.learning_rate * m_hat / (np.sqrt(v_hat) + state.epsilon)


def adam_step(net: Mlp, state: AdamState, gradient):
    """Adam update for a whole net; returns (net, state) for chaining."""
    adam_update(net.params, state, gradient)
    return net, state


def l1_loss(prediction, target):
    """Mean absolute deviation and its (sub)gradient w.r.t. ``prediction``.

    The subgradient at exact ties is 0; averaging is over all elements.
    """
    p = np.asarray(prediction, dtype=np.float64)
    t = np.asarray(target, dtype=np.float64)
    if p.shape != t.shape:
        raise ValueError(f"shape mismatch: {p.shape} vs {t.shape}")
    diff = p - t
    loss = float(np.mean(np.abs(diff)))
    grad = np.sign(diff) / diff.size
    return loss, grad


def gaussian_kl(mean, log_variance):
    """KL(N(mean, diag(exp(log_variance))) || N(0, I)) and its gradients.

    Returns (kl, d_kl/d_mean, d_kl/d_log_variance); the KL is summed over
    elements, so batched callers divide by the batch size themselves.
    """
    mu = np.asarray(mean, dtype=np.float64)
    lv = np.asarray(log_variance, dtype=np.float64)
    if mu.shape != lv.shape:
        raise ValueError(f"shape mismatch: {mu.shape} vs {lv.shape}")
    var = np.exp(lv)
    kl = 0.5 * float(np.sum(var + mu * mu - 1.0 - lv))
    return kl, mu.copy(), 0.5 * (var - 1.0)


def save_mlp(net: Mlp, path) -> None:
    """Write an `OFNN1` checkpoint: magic, metadata line, raw float64 params."""
    meta = (f"layer_sizes={','.join(str(s) for s in net.layer_sizes)} "
            f"activations={','.join(net.activations)}\n")
    with open(path, "wb") as f:
        f.write(_MLP_MAGIC)
        f.write(meta.encode("utf-8"))
        f.write(net.params.astype("<f8").tobytes())


def load_mlp(path) -> Mlp:
    from .errors import FormatError

    raw = Path(path).read_bytes()
    if not raw.startswith(_MLP_MAGIC):
        raise FormatError(f"{path}: bad magic, expected OFNN1", offset=0)
    header_end = raw.index(b"\n", len(_MLP_MAGIC)) + 1
    meta = raw[len(_MLP_MAGIC):header_end].decode("utf-8").strip()
    fields = dict(item.split("=", 1) for item in meta.split())
    layer_sizes = [int(s) for s in fields["layer_sizes"].split(",")]
    activations = fields["activations"].split(",")
    net = Mlp(layer_sizes, activations, init="zero")
    payload = raw[header_end:]
    expected = net.parameter_count * 8
    if len(payload) != expected:
        raise FormatError(f"{path}: payload is {len(payload)} bytes, expected {expected}",
                          offset=header_end + min(len(payload), expected))
    net.params[:] = np.frombuffer(payload, dtype="<f8")
    return net
