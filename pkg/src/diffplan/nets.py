"""Minimal dense network with explicit reverse-mode gradients, plus Adam.

Everything is plain numpy.  Forward passes record a tape of layer inputs
and pre-activations; backward consumes the tape and returns exact
gradients for every parameter and for the input, so finite-difference
checks can hold to tight tolerances.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

ACTIVATIONS = ("tanh", "relu", "identity")


class NonFiniteGradientError(FloatingPointError):
    """Raised when an optimizer step sees NaN or inf gradients."""


@dataclass(frozen=True)
class MlpSpec:
    """Layer sizes plus one activation name per weight layer (last: identity)."""

    sizes: tuple[int, ...]
    activations: tuple[str, ...]

    def __post_init__(self):
        if len(self.sizes) < 2:
            raise ValueError("an MLP needs at least an input and an output layer")
        if len(self.activations) != len(self.sizes) - 1:
            raise ValueError("need one activation per weight layer")
        for act in self.activations:
            if act not in ACTIVATIONS:
                raise ValueError(f"unknown activation {act!r}")
        if self.activations[-1] != "identity":
            raise ValueError("final activation must be identity")

    @classmethod
    def dense(cls, sizes, hidden_act: str = "tanh") -> "MlpSpec":
        sizes = tuple(int(s) for s in sizes)
        acts = tuple([hidden_act] * (len(sizes) - 2) + ["identity"])
        return cls(sizes, acts)


@dataclass
class Tape:
    inputs: list[np.ndarray]       # activation entering each weight layer
    preacts: list[np.ndarray]      # z = a @ W.T + b per layer
    squeeze: bool                  # input arrived as a bare vector


def _act(name: str, z: np.ndarray) -> np.ndarray:
    if name == "tanh":
        return np.tanh(z)
    if name == "relu":
        return np.maximum(z, 0.0)
    return z


def _act_grad(name: str, z: np.ndarray) -> np.ndarray:
    if name == "tanh":
        t = np.tanh(z)
        return 1.0 - t * t
    if name == "relu":
        return (z > 0.0).astype(z.dtype)
    return np.ones_like(z)


class Mlp:
    """Dense network; ``params`` is the flat list [W0, b0, W1, b1, ...]."""

    def __init__(self, spec: MlpSpec, params: list[np.ndarray]):
        if len(params) != 2 * (len(spec.sizes) - 1):
            raise ValueError("parameter list length does not match spec")
        self.spec = spec
        self.params = [np.asarray(p, dtype=np.float64) for p in params]
        for i in range(len(spec.sizes) - 1):
            w, b = self.params[2 * i], self.params[2 * i + 1]
            want = (spec.sizes[i + 1], spec.sizes[i])
            if w.shape != want or b.shape != (spec.sizes[i + 1],):
                raise ValueError(f"layer {i} parameter shapes {w.shape}/{b.shape} != {want}")

    @classmethod
    def init(cls, spec: MlpSpec, rng: np.random.Generator) -> "Mlp":
        """Uniform(-a, a) with a = sqrt(6 / (fan_in + fan_out)); zero biases."""
        params = []
        for fan_in, fan_out in zip(spec.sizes[:-1], spec.sizes[1:]):
            a = np.sqrt(6.0 / (fan_in + fan_out))
            params.append(rng.uniform(-a, a, size=(fan_out, fan_in)))
            params.append(np.zeros(fan_out))
        return cls(spec, params)

    @property
    def n_layers(self) -> int:
        return len(self.spec.sizes) - 1

    def forward(self, x: np.ndarray) -> tuple[np.ndarray, Tape]:
        x = np.asarray(x, dtype=np.float64)
        squeeze = x.ndim == 1
        a = x[None, :] if squeeze else x
        if a.shape[1] != self.spec.sizes[0]:
            raise ValueError(f"input width {a.shape[1]} != {self.spec.sizes[0]}")
        inputs, preacts = [], []
        for i in range(self.n_layers):
            w, b = self.params[2 * i], self.params[2 * i + 1]
            inputs.append(a)
            z = a @ w.T + b
            preacts.append(z)
            a = _act(self.spec.activations[i], z)
        y = a[0] if squeeze else a
        return y, Tape(inputs, preacts, squeeze)

    def backward(self, tape: Tape, grad_out: np.ndarray) -> tuple[list[np.ndarray], np.ndarray]:
        """Exact VJP: returns (param gradients in params order, input gradient)."""
        g = np.asarray(grad_out, dtype=np.float64)
        if tape.squeeze:
            g = g[None, :]
        grads: list[np.ndarray] = [None] * len(self.params)
        for i in range(self.n_layers - 1, -1, -1):
            gz = g * _act_grad(self.spec.activations[i], tape.preacts[i])
            grads[2 * i] = gz.T @ tape.inputs[i]
            grads[2 * i + 1] = gz.sum(axis=0)
            g = gz @ self.params[2 * i]
        return grads, (g[0] if tape.squeeze else g)

    def __call__(self, x: np.ndarray) -> np.ndarray:
        return self.forward(x)[0]

    def copy(self) -> "Mlp":
        return Mlp(self.spec, [p.copy() for p in self.params])


@dataclass
class AdamState:
    """Adam with bias correction; moments mirror the parameter list."""

    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)

    @classmethod
    def for_params(cls, params, lr: float = 1e-3, **kw) -> "AdamState":
        return cls(lr=lr, m=[np.zeros_like(p) for p in params],
                   v=[np.zeros_like(p) for p in params], **kw)


def adam_step(params: list[np.ndarray], grads: list[np.ndarray],
              state: AdamState) -> list[np.ndarray]:
    """One in-place-free Adam update; rejects non-finite gradients."""
    for g in grads:
        if not np.all(np.isfinite(g)):
            raise NonFiniteGradientError("non-finite gradient; update rejected")
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.t
    c2 = 1.0 - b2 ** state.t
    out = []
    for i, (p, g) in enumerate(zip(params, grads)):
        state.m[i] = b1 * state.m[i] + (1.0 - b1) * g
        state.v[i] = b2 * state.v[i] + (1.0 - b2) * (g * g)
        mhat = state.m[i] / c1
        vhat = state.v[i] / c2
        out.append(p - state.lr * mhat / (np.sqrt(vhat) + state.eps))
    return out


def step_embedding(k, dim: int = 16) -> np.ndarray:
    """Sinusoidal embedding of a diffusion step index.

    Accepts a scalar (returns (dim,)) or a vector of indices (returns
    (len, dim)).  Half the dimensions are sines, half cosines, with
    geometrically spaced frequencies.
    """
    if dim % 2 != 0:
        raise ValueError("embedding dim must be even")
    half = dim // 2
    ks = np.asarray(k, dtype=np.float64)
    freqs = np.exp(-np.log(10000.0) * np.arange(half) / max(half - 1, 1))
    ang = ks[..., None] * freqs
    return np.concatenate([np.sin(ang), np.cos(ang)], axis=-1)


def mlp_meta(mlp: Mlp) -> dict[str, str]:
    return {
        "sizes": ",".join(str(s) for s in mlp.spec.sizes),
        "activations": ",".join(mlp.spec.activations),
    }


def mlp_arrays(mlp: Mlp, prefix: str) -> dict[str, np.ndarray]:
    return {f"{prefix}p{i}": p for i, p in enumerate(mlp.params)}


def mlp_from_record(meta: dict[str, str], arrays: dict[str, np.ndarray],
                    prefix: str) -> Mlp:
    spec = MlpSpec(tuple(int(s) for s in meta["sizes"].split(",")),
                   tuple(meta["activations"].split(",")))
    n = 2 * (len(spec.sizes) - 1)
    params = [arrays[f"{prefix}p{i}"].astype(np.float64) for i in range(n)]
    return Mlp(spec, params)
