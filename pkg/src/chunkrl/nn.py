"""Dense networks with hand-written reverse mode, AdamW and EMA shadows.

Parameters are plain lists of float64 arrays so optimizers, EMA shadows and
checkpoints can treat every model the same way. ``forward`` returns a cache
that ``backward`` consumes; no state is stored on the model between calls.
"""

from __future__ import annotations

import json
from pathlib import Path
from typing import Sequence

import numpy as np

CHECKPOINT_VERSION = 1
_GELU_C = np.sqrt(2.0 / np.pi)


def gelu(x: np.ndarray) -> np.ndarray:
    return 0.5 * x * (1.0 + np.tanh(_GELU_C * (x + 0.044715 * x**3)))


def gelu_grad(x: np.ndarray) -> np.ndarray:
    inner = _GELU_C * (x + 0.044715 * x**3)
    t = np.tanh(inner)
    return 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t**2) * _GELU_C * (1.0 + 3 * 0.044715 * x**2)


class DenseNet:
    """MLP with GELU hidden layers and a linear output layer."""

    def __init__(self, sizes: Sequence[int], rng: np.random.Generator, out_scale: float = 1.0):
        if len(sizes) < 2 or any(int(n) < 1 for n in sizes):
            raise ValueError(f"bad layer sizes {sizes}")
        self.sizes = tuple(int(n) for n in sizes)
        self.params: list[np.ndarray] = []
        n_layers = len(self.sizes) - 1
        for i, (fan_in, fan_out) in enumerate(zip(self.sizes[:-1], self.sizes[1:])):
            bound = np.sqrt(6.0 / fan_in)  # Kaiming-uniform, fan-in
            W = rng.uniform(-bound, bound, size=(fan_in, fan_out))
            b = np.zeros(fan_out)
            if i == n_layers - 1:
                W *= out_scale
            self.params += [W, b]

    @property
    def in_dim(self) -> int:
        return self.sizes[0]

    @property
    def out_dim(self) -> int:
        return self.sizes[-1]

    def forward(self, x: np.ndarray, params: list[np.ndarray] | None = None):
        params = self.params if params is None else params
        x = np.asarray(x, dtype=float)
        if x.ndim != 2 or x.shape[1] != self.in_dim:
            raise ValueError(f"expected input of shape (B, {self.in_dim}), got {x.shape}")
        if x.shape[0] < 1:
            raise ValueError("empty batch")
        cache = [x]
        h = x
        n_layers = len(params) // 2
        for i in range(n_layers):
            z = h @ params[2 * i] + params[2 * i + 1]
            if i < n_layers - 1:
                cache.append(z)
                h = gelu(z)
            else:
                h = z
        return h, cache

    def backward(self, cache, dout: np.ndarray, params: list[np.ndarray] | None = None):
        """Gradients of ``sum(dout * out)`` with respect to parameters and input."""
        params = self.params if params is None else params
        n_layers = len(params) // 2
        grads: list[np.ndarray] = [None] * len(params)
        x = cache[0]
        pre = cache[1:]
        d = np.asarray(dout, dtype=float)
        for i in range(n_layers - 1, -1, -1):
            h_in = x if i == 0 else gelu(pre[i - 1])
            grads[2 * i] = h_in.T @ d
            grads[2 * i + 1] = d.sum(0)
            d = d @ params[2 * i].T
            if i > 0:
                d = d * gelu_grad(pre[i - 1])
        return grads, d

    def __call__(self, x, params=None):
        return self.forward(x, params)[0]


class TableNet:
    """Lookup table: one output row per integer key (tabular-tier critics)."""

    def __init__(self, n_keys: int, out_dim: int = 1, init: float = 0.0):
        self.n_keys = int(n_keys)
        self.sizes = (self.n_keys, int(out_dim))
        self.params = [np.full((self.n_keys, int(out_dim)), float(init))]

    @property
    def out_dim(self) -> int:
        return self.sizes[1]

    def forward(self, keys: np.ndarray, params=None):
        params = self.params if params is None else params
        keys = np.asarray(keys)
        if keys.ndim != 1 or keys.dtype.kind not in "iu":
            raise ValueError("table inputs must be a 1-D integer array")
        if keys.size and (keys.min() < 0 or keys.max() >= self.n_keys):
            raise IndexError("key out of range")
        return params[0][keys], keys

    def backward(self, keys, dout, params=None):
        params = self.params if params is None else params
        g = np.zeros_like(params[0])
        np.add.at(g, keys, dout)
        return [g], None

    def __call__(self, x, params=None):
        return self.forward(x, params)[0]


class AdamW:
    """Adam with decoupled weight decay: ``p <- p - lr*wd*p - lr*m_hat/(sqrt(v_hat)+eps)``."""

    def __init__(
        self,
        params: Sequence[np.ndarray],
        lr: float = 3e-4,
        weight_decay: float = 0.0,
        betas: tuple[float, float] = (0.9, 0.999),
        eps: float = 1e-8,
    ):
        self.lr = float(lr)
        self.weight_decay = float(weight_decay)
        self.beta1, self.beta2 = betas
        self.eps = float(eps)
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]
        self.t = 0

    def step(self, params: list[np.ndarray], grads: Sequence[np.ndarray]) -> None:
        """Update ``params`` in place."""
        if len(params) != len(grads) or len(params) != len(self.m):
            raise ValueError("parameter / gradient count mismatch")
        for i, (p, g) in enumerate(zip(params, grads)):
            if p.shape != g.shape:
                raise ValueError(f"gradient {i} has shape {g.shape}, expected {p.shape}")
            if not np.all(np.isfinite(g)):
                raise FloatingPointError(f"non-finite gradient in parameter tensor {i} (layer {i // 2})")
        self.t += 1
        c1 = 1.0 - self.beta1**self.t
        c2 = 1.0 - self.beta2**self.t
        for p, g, m, v in zip(params, grads, self.m, self.v):
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            if self.weight_decay:
                p *= 1.0 - self.lr * self.weight_decay
            p -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)

    def state_arrays(self) -> list[np.ndarray]:
        return self.m + self.v


class EmaTarget:
    """Shadow copy updated as ``shadow <- (1 - tau) * shadow + tau * source``."""

    def __init__(self, params: Sequence[np.ndarray], tau: float = 0.005):
        if not 0.0 < tau <= 1.0:
            raise ValueError("tau must lie in (0, 1]")
        self.tau = float(tau)
        self.params = [np.array(p, dtype=float, copy=True) for p in params]

    def update(self, source: Sequence[np.ndarray]) -> None:
        if len(source) != len(self.params):
            raise ValueError("parameter count mismatch")
        for sh, p in zip(self.params, source):
            if sh.shape != p.shape:
                raise ValueError(f"shape mismatch {sh.shape} vs {p.shape}")
            sh *= 1.0 - self.tau
            sh += self.tau * p


def gradient_check(fn, params: list[np.ndarray], grads: list[np.ndarray], rng: np.random.Generator,
                   n_dirs: int = 17, step: float = 1e-5) -> float:
    """Worst relative error of analytic directional derivatives vs central differences."""
    worst = 0.0
    for _ in range(n_dirs):
        dirs = [rng.normal(size=p.shape) for p in params]
        analytic = sum(float(np.sum(g * d)) for g, d in zip(grads, dirs))
        plus = [p + step * d for p, d in zip(params, dirs)]
        minus = [p - step * d for p, d in zip(params, dirs)]
        numeric = (fn(plus) - fn(minus)) / (2 * step)
        denom = max(abs(analytic), abs(numeric), 1e-8)
        worst = max(worst, abs(analytic - numeric) / denom)
    return worst


def save_checkpoint(path: str | Path, tensors: dict[str, np.ndarray], meta: dict | None = None) -> None:
    """Write ``<path>.bin`` (little-endian float64 blobs) and ``<path>.json`` (manifest)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    entries = []
    offset = 0
    with open(path.with_suffix(".bin"), "wb") as fh:
        for name in sorted(tensors):
            arr = np.ascontiguousarray(tensors[name], dtype="<f8")
            fh.write(arr.tobytes())
            entries.append({"name": name, "shape": list(arr.shape), "offset": offset, "dtype": "float64"})
            offset += arr.nbytes
    manifest = {"version": CHECKPOINT_VERSION, "tensors": entries, "meta": meta or {}}
    path.with_suffix(".json").write_text(json.dumps(manifest, indent=1, sort_keys=True))


def load_checkpoint(path: str | Path) -> tuple[dict[str, np.ndarray], dict]:
    path = Path(path)
    manifest = json.loads(path.with_suffix(".json").read_text())
    if manifest.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {manifest.get('version')!r}")
    blob = path.with_suffix(".bin").read_bytes()
    out = {}
    for e in manifest["tensors"]:
        n = int(np.prod(e["shape"])) if e["shape"] else 1
        arr = np.frombuffer(blob, dtype="<f8", count=n, offset=e["offset"]).reshape(e["shape"])
        out[e["name"]] = arr.copy()
    return out, manifest.get("meta", {})
