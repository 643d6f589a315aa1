"""A small fully connected network ``u_theta(t, x)`` with exact derivatives.

Parameters are a single flat vector, layer by layer, each layer stored as its
weight matrix ``(fan_out, fan_in)`` in row-major order followed by its bias.
All functions are batched over ``t`` of shape ``(B,)`` and ``x`` of shape
``(B, d)``.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from .rng import RngStream

_MAGIC = b"JGPARAM1"

_ACT = {
    "tanh": (np.tanh, lambda a, h: 1.0 - h * h),
    # relu takes the right derivative (1) at the kink
    "relu": (lambda a: np.maximum(a, 0.0), lambda a, h: (a >= 0).astype(a.dtype)),
    "identity": (lambda a: a, lambda a, h: np.ones_like(a)),
}


@dataclass(frozen=True)
class MlpSpec:
    """Layer sizes of ``u_theta``; the input is ``(t, x)`` so ``input_dim = 1 + d``."""

    state_dim: int
    hidden_widths: tuple
    output_dim: int
    activation: str = "tanh"
    init_seed: int = 0
    sizes: tuple = field(init=False, repr=False)

    def __post_init__(self):
        widths = tuple(int(w) for w in self.hidden_widths)
        if any(w < 1 for w in widths) or self.state_dim < 1 or self.output_dim < 1:
            raise ValueError("layer sizes must be positive")
        if self.activation not in _ACT:
            raise ValueError(f"unknown activation {self.activation!r}")
        object.__setattr__(self, "hidden_widths", widths)
        object.__setattr__(self, "sizes", (1 + self.state_dim,) + widths + (self.output_dim,))

    @property
    def input_dim(self) -> int:
        return 1 + self.state_dim

    @property
    def n_params(self) -> int:
        s = self.sizes
        return sum((s[i] + 1) * s[i + 1] for i in range(len(s) - 1))

    def layer_slices(self):
        """``(weight_slice, bias_slice, fan_in, fan_out)`` per layer."""
        out, off = [], 0
        s = self.sizes
        for i in range(len(s) - 1):
            fi, fo = s[i], s[i + 1]
            w = slice(off, off + fi * fo)
            off += fi * fo
            b = slice(off, off + fo)
            off += fo
            out.append((w, b, fi, fo))
        return out


def equal_width_spec(target_n: int, state_dim: int, output_dim: int, depth: int = 3, **kw) -> MlpSpec:
    """Equal hidden widths chosen so the parameter count is closest to ``target_n``."""
    best = None
    w = 1
    while True:
        spec = MlpSpec(state_dim, (w,) * depth, output_dim, **kw)
        gap = abs(spec.n_params - target_n)
        if best is None or gap < best[0]:
            best = (gap, spec)
        if spec.n_params > target_n:
            return best[1]
        w += 1


def unflatten(spec: MlpSpec, theta):
    theta = np.asarray(theta, dtype=float)
    if theta.shape != (spec.n_params,):
        raise ValueError(f"theta has shape {theta.shape}, expected ({spec.n_params},)")
    return [(theta[ws].reshape(fo, fi), theta[bs]) for ws, bs, fi, fo in spec.layer_slices()]


def flatten(layers) -> np.ndarray:
    return np.concatenate([np.concatenate([w.ravel(), b.ravel()]) for w, b in layers])


def init_params(spec: MlpSpec) -> np.ndarray:
    """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) weights and biases."""
    stream = RngStream(spec.init_seed, np.arange(len(spec.sizes) - 1), prefix="mlp-init/")
    layers = []
    for i, (_, _, fi, fo) in enumerate(spec.layer_slices()):
        u = stream.subset([i]).uniform("layer", 0, fo * (fi + 1))[0]
        vals = (2.0 * u - 1.0) / np.sqrt(fi)
        layers.append((vals[: fo * fi].reshape(fo, fi), vals[fo * fi:]))
    return flatten(layers)


def _inputs(spec, t, x):
    x = np.asarray(x, dtype=float).reshape(-1, spec.state_dim)
    t = np.broadcast_to(np.asarray(t, dtype=float), (x.shape[0],))
    return np.concatenate([t[:, None], x], axis=1)


def _forward_cache(spec, layers, z):
    act = _ACT[spec.activation][0]
    pre, post = [], [z]
    h = z
    for i, (w, b) in enumerate(layers):
        a = h @ w.T + b
        if i < len(layers) - 1:
            h = act(a)
            pre.append(a)
            post.append(h)
        else:
            h = a
    return h, pre, post


def forward(spec: MlpSpec, theta, t, x) -> np.ndarray:
    """Network output, shape ``(B, m)``."""
    layers = unflatten(spec, theta)
    out, _, _ = _forward_cache(spec, layers, _inputs(spec, t, x))
    return out


def forward_jac(spec: MlpSpec, theta, t, x):
    """Output ``(B, m)`` and input Jacobian ``(B, m, 1 + d)`` (time column first).

    Forward-mode accumulation: the tangent of every layer is carried along
    with its activation.
    """
    dact = _ACT[spec.activation][1]
    act = _ACT[spec.activation][0]
    layers = unflatten(spec, theta)
    h = _inputs(spec, t, x)
    tan = None
    for i, (w, b) in enumerate(layers):
        a = h @ w.T + b
        tan = np.broadcast_to(w, (h.shape[0],) + w.shape) if tan is None else np.matmul(w, tan)
        if i < len(layers) - 1:
            h = act(a)
            tan = dact(a, h)[:, :, None] * tan
        else:
            h = a
    return h, np.array(tan)


def jac_x(spec: MlpSpec, theta, t, x) -> np.ndarray:
    """Jacobian with respect to the state block, shape ``(B, m, d)``."""
    return forward_jac(spec, theta, t, x)[1][:, :, 1:]


def jac_t(spec: MlpSpec, theta, t, x) -> np.ndarray:
    """Derivative with respect to time, shape ``(B, m)``."""
    return forward_jac(spec, theta, t, x)[1][:, :, 0]


def _backward(spec, layers, pre, post, delta):
    """Parameter gradient of ``sum(delta * output)``; ``delta`` is ``(B, ..., m)``."""
    dact = _ACT[spec.activation][1]
    lead = delta.shape[:-1]
    grads = [None] * len(layers)
    for i in range(len(layers) - 1, -1, -1):
        w, _ = layers[i]
        h_in = post[i]
        hb = h_in.reshape((h_in.shape[0],) + (1,) * (len(lead) - 1) + (h_in.shape[1],))
        gw = delta[..., :, None] * hb[..., None, :]
        grads[i] = np.concatenate([gw.reshape(lead + (-1,)), delta], axis=-1)
        if i:
            delta = (delta @ w) * dact(pre[i - 1], post[i]).reshape(hb.shape)
    return np.concatenate(grads, axis=-1)


def grad_theta(spec: MlpSpec, theta, t, x) -> np.ndarray:
    """Parameter Jacobian of every output, shape ``(B, m, n)``."""
    layers = unflatten(spec, theta)
    out, pre, post = _forward_cache(spec, layers, _inputs(spec, t, x))
    b, m = out.shape
    delta = np.broadcast_to(np.eye(m), (b, m, m)).copy()
    return _backward(spec, layers, pre, post, delta)


def vjp_theta(spec: MlpSpec, theta, t, x, v) -> np.ndarray:
    """``v^T du/dtheta`` for a per-sample cotangent ``v`` of shape ``(B, m)``."""
    layers = unflatten(spec, theta)
    _, pre, post = _forward_cache(spec, layers, _inputs(spec, t, x))
    return _backward(spec, layers, pre, post, np.asarray(v, dtype=float))


def save_params(path, theta) -> None:
    theta = np.ascontiguousarray(theta, dtype="<f8")
    with open(path, "wb") as fh:
        fh.write(_MAGIC + struct.pack("<Q", theta.size))
        fh.write(theta.tobytes())


def load_params(path) -> np.ndarray:
    with open(path, "rb") as fh:
        head = fh.read(16)
        if len(head) != 16 or head[:8] != _MAGIC:
            raise ValueError("not a parameter file")
        (n,) = struct.unpack("<Q", head[8:])
        data = np.frombuffer(fh.read(), dtype="<f8")
    if data.size != n:
        raise ValueError(f"parameter file truncated: header says {n}, found {data.size}")
    return data.astype(float)


def export_csv(path, spec: MlpSpec, theta) -> None:
    """One row per parameter: ``index,layer,kind,row,col,value``."""
    import csv

    theta = np.asarray(theta, dtype=float)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["index", "layer", "kind", "row", "col", "value"])
        for li, (ws, bs, fi, fo) in enumerate(spec.layer_slices()):
            for k in range(ws.start, ws.stop):
                r, c = divmod(k - ws.start, fi)
                w.writerow([k, li, "W", r, c, repr(float(theta[k]))])
            for k in range(bs.start, bs.stop):
                w.writerow([k, li, "b", k - bs.start, "", repr(float(theta[k]))])
