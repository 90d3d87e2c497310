"""Small differentiable feature extractors and first-order optimizers.

Extractors run on batches of H x W x C images in float64 with hand-written
backward passes for both the input and the parameters. Two architectures
are available:

``linear``
    flatten followed by one fully-connected layer.
``conv-small``
    3x3 conv -> ReLU -> 2x2 average pool -> 3x3 conv -> ReLU -> 2x2 average
    pool -> fully-connected.
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from aip.errors import DimensionError, DomainError, OptimizationError

ARCHITECTURES = ("linear", "conv-small")
FEX_MAGIC = b"FEX1"


def _layer_plan(arch, input_shape, out_dim, channels):
    h, w, c = input_shape
    if arch == "linear":
        return [("fc", h * w * c, out_dim)]
    if arch == "conv-small":
        if h % 4 or w % 4:
            raise DimensionError(f"conv-small needs H and W divisible by 4, got {input_shape}")
        c1, c2 = channels
        return [
            ("conv", c, c1), ("relu",), ("pool",),
            ("conv", c1, c2), ("relu",), ("pool",),
            ("fc", (h // 4) * (w // 4) * c2, out_dim),
        ]
    raise DimensionError(f"unknown architecture {arch!r}")


def _param_shapes(plan, bias):
    shapes = []
    for layer in plan:
        if layer[0] == "conv":
            _, cin, cout = layer
            shapes.append([(cout, cin, 3, 3)] + ([(cout,)] if bias else []))
        elif layer[0] == "fc":
            _, din, dout = layer
            shapes.append([(dout, din)] + ([(dout,)] if bias else []))
        else:
            shapes.append([])
    return shapes


@dataclass(frozen=True, eq=False)
class FeatureExtractor:
    """Immutable differentiable map from images to ``out_dim`` features."""

    arch: str
    input_shape: tuple
    out_dim: int
    params: np.ndarray
    channels: tuple = (8, 16)
    bias: bool = True
    _plan: list = field(init=False, repr=False)
    _shapes: list = field(init=False, repr=False)

    def __post_init__(self):
        object.__setattr__(self, "input_shape", tuple(int(s) for s in self.input_shape))
        object.__setattr__(self, "channels", tuple(int(c) for c in self.channels))
        plan = _layer_plan(self.arch, self.input_shape, self.out_dim, self.channels)
        shapes = _param_shapes(plan, self.bias)
        params = np.array(self.params, dtype=np.float64).ravel()
        expected = sum(int(np.prod(s)) for group in shapes for s in group)
        if params.size != expected:
            raise DimensionError(f"{self.arch} expects {expected} parameters, got {params.size}")
        params.flags.writeable = False
        object.__setattr__(self, "params", params)
        object.__setattr__(self, "_plan", plan)
        object.__setattr__(self, "_shapes", shapes)

    @property
    def n_params(self):
        return self.params.size

    @property
    def descriptor(self):
        if self.arch == "linear":
            return f"linear-{self.out_dim}"
        return f"conv-small-{self.out_dim}(c={self.channels[0]},{self.channels[1]})"

    def with_params(self, params):
        return replace(self, params=params)

    def _unpack(self, params):
        groups, offset = [], 0
        for group in self._shapes:
            arrays = []
            for shape in group:
                size = int(np.prod(shape))
                arrays.append(params[offset:offset + size].reshape(shape))
                offset += size
            groups.append(arrays)
        return groups

    def _check_batch(self, images):
        x = np.asarray(images, dtype=np.float64)
        single = x.ndim == 3
        if single:
            x = x[None]
        if x.ndim != 4 or x.shape[1:] != self.input_shape:
            raise DimensionError(f"image shape {np.shape(images)} does not match {self.input_shape}")
        if not np.all(np.isfinite(x)):
            raise DomainError("image contains non-finite pixels")
        return x, single

    def _forward(self, x):
        cache = []
        for layer, weights in zip(self._plan, self._unpack(self.params)):
            kind = layer[0]
            if kind == "conv":
                n, h, w, _ = x.shape
                padded = np.pad(x, ((0, 0), (1, 1), (1, 1), (0, 0)))
                # (N, H, W, C, 3, 3) -> rows of C*9
                cols = sliding_window_view(padded, (3, 3), axis=(1, 2)).reshape(n * h * w, -1)
                kernel = weights[0].reshape(weights[0].shape[0], -1).T
                out = cols @ kernel
                if self.bias:
                    out += weights[1]
                cache.append((cols, x.shape))
                x = out.reshape(n, h, w, -1)
            elif kind == "relu":
                cache.append(x > 0)
                x = np.where(x > 0, x, 0.0)
            elif kind == "pool":
                n, h, w, c = x.shape
                cache.append(x.shape)
                x = (x[:, 0::2, 0::2] + x[:, 1::2, 0::2] + x[:, 0::2, 1::2] + x[:, 1::2, 1::2]) * 0.25
            else:
                flat = x.reshape(x.shape[0], -1)
                cache.append((flat, x.shape))
                x = flat @ weights[0].T
                if self.bias:
                    x = x + weights[1]
        return x, cache

    def _backward(self, cache, upstream, want_params=True, want_input=True):
        grads = [None] * len(self._plan)
        g = upstream
        unpacked = self._unpack(self.params)
        for idx in range(len(self._plan) - 1, -1, -1):
            kind = self._plan[idx][0]
            weights = unpacked[idx]
            entry = cache[idx]
            if kind == "fc":
                flat, shape = entry
                if want_params:
                    grads[idx] = [g.T @ flat] + ([g.sum(axis=0)] if self.bias else [])
                g = (g @ weights[0]).reshape(shape)
            elif kind == "pool":
                n, h, w, c = entry
                g = np.repeat(np.repeat(g, 2, axis=1), 2, axis=2) / 4.0
            elif kind == "relu":
                g = g * entry
            else:
                cols, shape = entry
                n, h, w, cin = shape
                cout = weights[0].shape[0]
                gflat = g.reshape(-1, cout)
                if want_params:
                    dk = (cols.T @ gflat).T.reshape(weights[0].shape)
                    grads[idx] = [dk] + ([gflat.sum(axis=0)] if self.bias else [])
                if idx == 0 and not want_input:
                    g = None
                    break
                dcols = (gflat @ weights[0].reshape(cout, -1)).reshape(n, h, w, cin, 3, 3)
                dpad = np.zeros((n, h + 2, w + 2, cin))
                for kh in range(3):
                    for kw in range(3):
                        dpad[:, kh:kh + h, kw:kw + w, :] += dcols[..., kh, kw]
                g = dpad[:, 1:-1, 1:-1, :]
        flat_grad = None
        if want_params:
            flat_grad = np.concatenate([a.ravel() for group in grads if group for a in group])
        return g, flat_grad

    def forward(self, images):
        """Features for one image (H, W, C) or a batch (N, H, W, C)."""
        x, single = self._check_batch(images)
        out, _ = self._forward(x)
        return out[0] if single else out

    def _check_upstream(self, upstream, n, single):
        up = np.asarray(upstream, dtype=np.float64)
        if single:
            up = up[None]
        if up.shape != (n, self.out_dim):
            raise DimensionError(f"upstream shape {np.shape(upstream)} does not match ({n}, {self.out_dim})")
        return up

    def input_gradient(self, images, upstream):
        """Gradient of <upstream, forward(images)> with respect to the pixels."""
        x, single = self._check_batch(images)
        up = self._check_upstream(upstream, x.shape[0], single)
        _, cache = self._forward(x)
        g, _ = self._backward(cache, up, want_params=False)
        return g[0] if single else g

    def param_gradient(self, images, upstream):
        """Gradient of sum_n <upstream_n, forward(images_n)> with respect to ``params``."""
        x, single = self._check_batch(images)
        up = self._check_upstream(upstream, x.shape[0], single)
        _, cache = self._forward(x)
        _, flat = self._backward(cache, up, want_params=True, want_input=False)
        return flat

    def forward_backward(self, images, upstream_fn, want_input=True):
        """Forward once, then backprop ``upstream_fn(features)``.

        Returns ``(features, aux, input_grad, param_grad)`` where
        ``upstream_fn`` returns ``(upstream, aux)``.
        """
        x, _ = self._check_batch(images)
        out, cache = self._forward(x)
        upstream, aux = upstream_fn(out)
        g, flat = self._backward(cache, upstream, want_params=True, want_input=want_input)
        return out, aux, g, flat


def init_extractor(arch, input_shape=(32, 32, 3), out_dim=64, *, channels=(8, 16), bias=True, seed=0):
    """Scaled-uniform initialization, biases at zero."""
    rng = np.random.default_rng(seed)
    plan = _layer_plan(arch, tuple(input_shape), out_dim, tuple(channels))
    chunks = []
    for layer, group in zip(plan, _param_shapes(plan, bias)):
        if not group:
            continue
        if layer[0] == "conv":
            fan_in, fan_out = layer[1] * 9, layer[2] * 9
        else:
            fan_in, fan_out = layer[1], layer[2]
        limit = np.sqrt(6.0 / (fan_in + fan_out))
        chunks.append(rng.uniform(-limit, limit, size=group[0]).ravel())
        if bias:
            chunks.append(np.zeros(group[1]))
    return FeatureExtractor(arch, tuple(input_shape), out_dim, np.concatenate(chunks), tuple(channels), bias)


# -- serialization -----------------------------------------------------------

def extractor_to_bytes(extractor):
    header = json.dumps({
        "arch": extractor.arch,
        "descriptor": extractor.descriptor,
        "input_shape": list(extractor.input_shape),
        "out_dim": extractor.out_dim,
        "channels": list(extractor.channels),
        "bias": extractor.bias,
        "n_params": extractor.n_params,
        "shapes": [list(shape) for group in extractor._shapes for shape in group],
    }, sort_keys=True).encode()
    body = extractor.params.astype("<f8").tobytes()
    return FEX_MAGIC + struct.pack("<I", len(header)) + header + body


def extractor_from_bytes(blob):
    if blob[:4] != FEX_MAGIC:
        raise DomainError("not a .fex blob")
    (hlen,) = struct.unpack("<I", blob[4:8])
    header = json.loads(blob[8:8 + hlen])
    params = np.frombuffer(blob[8 + hlen:8 + hlen + 8 * header["n_params"]], dtype="<f8")
    return FeatureExtractor(header["arch"], tuple(header["input_shape"]), header["out_dim"],
                            params.astype(np.float64), tuple(header["channels"]), header["bias"])


def save_extractor(extractor, path):
    Path(path).write_bytes(extractor_to_bytes(extractor))


def load_extractor(path):
    return extractor_from_bytes(Path(path).read_bytes())


# -- optimizers --------------------------------------------------------------

@dataclass(frozen=True)
class OptimizerState:
    kind: str = "adam"  # "sgd" or "adam"
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: np.ndarray | None = None
    v: np.ndarray | None = None

    def __post_init__(self):
        if self.kind not in ("sgd", "adam"):
            raise ValueError(f"unknown optimizer kind {self.kind!r}")
        if not self.lr > 0:
            raise ValueError("step size must be positive")


def optimizer_step(state, vector, gradient, direction="descend"):
    """One update; returns ``(new_vector, new_state)``."""
    vector = np.asarray(vector, dtype=np.float64)
    gradient = np.asarray(gradient, dtype=np.float64)
    if vector.shape != gradient.shape:
        raise DimensionError(f"vector {vector.shape} and gradient {gradient.shape} differ")
    bad = np.flatnonzero(~np.isfinite(gradient.ravel()))
    if bad.size:
        raise OptimizationError(f"non-finite gradient at index {int(bad[0])}", index=int(bad[0]))
    sign = {"descend": -1.0, "ascend": 1.0}[direction]
    t = state.step + 1
    if state.kind == "sgd":
        return vector + sign * state.lr * gradient, replace(state, step=t)
    m = np.zeros_like(vector) if state.m is None else state.m
    v = np.zeros_like(vector) if state.v is None else state.v
    if m.shape != vector.shape:
        raise DimensionError("moment accumulators do not match the optimized vector")
    m = state.beta1 * m + (1 - state.beta1) * gradient
    v = state.beta2 * v + (1 - state.beta2) * gradient ** 2
    m_hat = m / (1 - state.beta1 ** t)
    v_hat = v / (1 - state.beta2 ** t)
    update = state.lr * m_hat / (np.sqrt(v_hat) + state.eps)
    return vector + sign * update, replace(state, step=t, m=m, v=v)
