"""Euler-Maruyama stepping of a jump diffusion and its sensitivity flows.

Every sample in a batch carries its own sorted array of slot boundaries:
the uniform grid ``k * T / n_steps`` plus any inserted times (a start time,
a randomized evaluation time), clipped to the sample's own ``[t0, t1]``.
Slots of zero length leave the state untouched, which lets samples with
different start times share one vectorized loop.

Noise for slot ``j`` is the ``j``-th draw of the replication's own stream,
so results never depend on batch composition.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass
from typing import Callable, Iterator, Optional

import numpy as np

from .model import DiscreteMarks, ModelError, ModelSpec
from .rng import RngStream


class SimulationError(FloatingPointError):
    """The discretized state became non-finite."""

    def __init__(self, step: int, what: str = "state"):
        self.step = step
        super().__init__(f"non-finite {what} at step {step}")


@dataclass(frozen=True)
class SimConfig:
    n_steps: int = 400
    master_seed: int = 0
    clamp_fn: Optional[Callable[[np.ndarray], np.ndarray]] = None
    record_path: bool = False

    def __post_init__(self):
        if self.n_steps < 1:
            raise ValueError("n_steps must be at least 1")


@dataclass
class AugmentedState:
    """State ``X`` with first variation and, optionally, packed second variation.

    ``hess_x[:, i, p]`` holds ``d_b d_a X_i`` for the ``p``-th pair
    ``a <= b`` in :func:`hess_pairs` order.
    """

    t: np.ndarray
    x: np.ndarray
    grad_x: np.ndarray
    hess_x: Optional[np.ndarray] = None

    @property
    def n_scalars(self) -> int:
        d = self.x.shape[-1]
        n = d + d * d
        if self.hess_x is not None:
            n += d * self.hess_x.shape[-1]
        return n

    def hess_full(self) -> np.ndarray:
        """Expand the packed second variation to ``(B, d, d, d)``."""
        return unpack_sym(self.hess_x)


@dataclass
class PathwiseState:
    """State with pathwise parameter sensitivities ``dtheta_x[:, k, i] = d X_i / d theta_k``."""

    t: np.ndarray
    x: np.ndarray
    dtheta_x: np.ndarray

    @property
    def n_scalars(self) -> int:
        d = self.x.shape[-1]
        return d + self.dtheta_x.shape[-2] * d


@dataclass
class SimResult:
    final: object
    times: np.ndarray
    path: Optional[np.ndarray] = None


def hess_pairs(d: int):
    """Index arrays ``(a, b)`` of the upper triangle ``a <= b``."""
    return np.triu_indices(d)


def unpack_sym(packed: np.ndarray, d: Optional[int] = None) -> np.ndarray:
    """Expand the last axis of upper-triangle pairs to a symmetric ``(d, d)`` block.

    ``d`` defaults to the size of the second-to-last axis, which is the
    layout of a packed second variation.
    """
    d = packed.shape[-2] if d is None else d
    ia, ib = hess_pairs(d)
    full = np.zeros(packed.shape[:-1] + (d, d))
    full[..., ia, ib] = packed
    full[..., ib, ia] = packed
    return full


def pack_sym(full: np.ndarray) -> np.ndarray:
    d = full.shape[-1]
    ia, ib = hess_pairs(d)
    return full[..., ia, ib]


def slot_times(horizon: float, n_steps: int, t0, t1, extra=None, batch: int = 1) -> np.ndarray:
    """Per-sample slot boundaries, shape ``(B, n_steps + 2 + q)``."""
    t0 = np.broadcast_to(np.asarray(t0, dtype=float), (batch,))
    t1 = np.broadcast_to(np.asarray(t1, dtype=float), (batch,))
    grid = np.linspace(0.0, horizon, n_steps + 1)
    parts = [np.broadcast_to(grid, (batch, grid.size)), t0[:, None], t1[:, None]]
    if extra is not None:
        parts.append(np.asarray(extra, dtype=float).reshape(batch, -1))
    times = np.sort(np.concatenate(parts, axis=1), axis=1)
    return np.clip(times, t0[:, None], t1[:, None])


def _check_span(model: ModelSpec, t0, t1):
    t0 = np.asarray(t0, dtype=float)
    t1 = np.asarray(t1, dtype=float)
    if np.any(t1 > model.horizon * (1 + 1e-12)):
        raise ModelError("t1 exceeds the model horizon")
    if np.any(t0 > t1):
        raise ModelError("t0 must not exceed t1")


def _zero(coef_fn, shape):
    return coef_fn if coef_fn is not None else (lambda *a: np.zeros(shape))


class _Jumps:
    """Per-step jump draws shared by the state and every flow."""

    def __init__(self, model: ModelSpec, rng: RngStream):
        self.model = model
        self.spec = model.jump_spec
        self.rng = rng
        self.discrete = isinstance(self.spec.marks, DiscreteMarks)

    def draw(self, j, t, x, dt):
        """Return a list of ``(weight, z)``: weight is the per-sample jump count,
        followed by the compensator entries with weight ``-dt * intensity``."""
        spec, b = self.spec, x.shape[0]
        terms = []
        if self.discrete:
            w = spec.marks.weights
            counts = self.rng.poisson("jump_count", j, dt[:, None] * w[None, :])
            for a, z in enumerate(spec.marks.atoms):
                zb = np.broadcast_to(z, (b, z.size))
                c = counts[:, a].astype(float)
                comp = -dt * w[a] if spec.compensated else 0.0
                terms.append((c + comp, zb))
            return terms
        nu = spec.marks.n_uniforms
        counts = self.rng.poisson("jump_count", j, spec.rate * dt)[:, 0]
        top = int(counts.max()) if counts.size else 0
        if top:
            u = self.rng.uniform("jump_mark", j, nu * top)
            for c in range(top):
                z = spec.marks.sampler(u[:, c * nu:(c + 1) * nu])
                terms.append(((counts > c).astype(float), z))
        if spec.compensated:
            z = spec.marks.sampler(self.rng.uniform("jump_comp", j, nu))
            terms.append((-dt * spec.rate, z))
        return terms


def iterate(
    model: ModelSpec,
    x0,
    times: np.ndarray,
    rng: RngStream,
    *,
    first: bool = False,
    second: bool = False,
    pathwise: bool = False,
    clamp: Optional[Callable] = None,
    theta=None,
) -> Iterator:
    """Step the state slot by slot.

    Yields ``(j, t, dt, state)`` with the left-endpoint state of slot ``j``
    and finally ``(K, t_end, None, state)``. ``state`` is an
    :class:`AugmentedState` when ``first`` is set, a :class:`PathwiseState`
    when ``pathwise`` is set, else the bare ``(B, d)`` array.
    """
    theta = model.theta if theta is None else np.asarray(theta, dtype=float)
    d, dn, n = model.dim_state, model.dim_noise, model.dim_param
    b = rng.size
    x = np.array(np.broadcast_to(np.asarray(x0, dtype=float), (b, d)))
    times = np.broadcast_to(times, (b, times.shape[-1]))
    clamp = clamp if clamp is not None else model.clamp_fn
    second = second and first
    jumps = _Jumps(model, rng) if model.has_jumps else None

    drift_dx = _zero(model.drift.dx, (b, d, d))
    vol_dx = _zero(model.vol.dx, (b, d, dn, d))
    drift_dxx = _zero(model.drift.dxx, (b, d, d, d))
    vol_dxx = _zero(model.vol.dxx, (b, d, dn, d, d))
    drift_dth = _zero(model.drift.dtheta, (b, n, d))
    vol_dth = model.vol.dtheta
    if model.jump is not None:
        jump_dx = _zero(model.jump.dx, (b, d, d))
        jump_dxx = _zero(model.jump.dxx, (b, d, d, d))
        jump_dth = _zero(model.jump.dtheta, (b, n, d))
    vol_const = model.vol.dx is None

    gx = np.broadcast_to(np.eye(d), (b, d, d)).copy() if first else None
    if second:
        ia, ib = hess_pairs(d)
        hx = np.zeros((b, d, ia.size))
    else:
        hx = None
    px = np.zeros((b, n, d)) if pathwise else None

    def pack(t):
        if first:
            return AugmentedState(t, x, gx, hx)
        if pathwise:
            return PathwiseState(t, x, px)
        return x

    k_slots = times.shape[1] - 1
    noise = rng.normal_path("brownian", k_slots, dn)
    for j in range(k_slots):
        t = times[:, j]
        dt = times[:, j + 1] - t
        yield j, t, dt, pack(t)

        dw = np.sqrt(dt)[:, None] * noise[:, j]
        mu = model.drift.value(t, x, theta)
        sig = model.vol.value(t, x, theta)
        x_new = x + mu * dt[:, None] + np.einsum("bik,bk->bi", sig, dw)

        jt = jumps.draw(j, t, x, dt) if jumps is not None else []
        jvals = []
        for w, z in jt:
            w = np.broadcast_to(np.asarray(w, dtype=float), (b,))
            x_new = x_new + w[:, None] * model.jump.value(t, x, z, theta)
            jvals.append((w, z))

        if first or pathwise:
            dmu = drift_dx(t, x, theta)
            dsig = None if vol_const else vol_dx(t, x, theta)
            # effective noise-weighted vol derivative: sum_k dsig[i,k,l] dW_k
            dsig_w = None if dsig is None else np.einsum("bikl,bk->bil", dsig, dw)
            jd = [(w, jump_dx(t, x, z, theta), z) for w, z in jvals]

        if first:
            lin = dmu * dt[:, None, None]
            if dsig_w is not None:
                lin = lin + dsig_w
            for w, dchi, _ in jd:
                lin = lin + w[:, None, None] * dchi
            if second:
                ga, gb = gx[:, :, ia], gx[:, :, ib]
                quad = np.einsum("bilm,blp,bmp->bip", drift_dxx(t, x, theta), ga, gb) * dt[:, None, None]
                if not vol_const:
                    ddsig = np.einsum("biklm,bk->bilm", vol_dxx(t, x, theta), dw)
                    quad = quad + np.einsum("bilm,blp,bmp->bip", ddsig, ga, gb)
                for w, _, z in jd:
                    q = np.einsum("bilm,blp,bmp->bip", jump_dxx(t, x, z, theta), ga, gb)
                    quad = quad + w[:, None, None] * q
                hx = hx + np.matmul(lin, hx) + quad
            gx = gx + np.matmul(lin, gx)
            if not np.all(np.isfinite(gx)):
                raise SimulationError(j, "first variation")

        if pathwise:
            lin = dmu * dt[:, None, None]
            if dsig_w is not None:
                lin = lin + dsig_w
            for w, dchi, _ in jd:
                lin = lin + w[:, None, None] * dchi
            src = drift_dth(t, x, theta) * dt[:, None, None]
            if vol_dth is not None:
                src = src + np.einsum("bkic,bc->bki", vol_dth(t, x, theta), dw)
            for w, _, z in jd:
                src = src + w[:, None, None] * jump_dth(t, x, z, theta)
            px = px + np.matmul(px, np.swapaxes(lin, 1, 2)) + src

        if clamp is not None:
            x_new = clamp(x_new)
        if not np.all(np.isfinite(x_new)):
            raise SimulationError(j)
        x = x_new

    if pathwise and not np.all(np.isfinite(px)):
        raise SimulationError(k_slots, "pathwise sensitivity")
    yield k_slots, times[:, -1], None, pack(times[:, -1])


def _run(model, x0, t0, t1, cfg, rng, **flags) -> SimResult:
    _check_span(model, t0, t1)
    times = slot_times(model.horizon, cfg.n_steps, t0, t1, batch=rng.size)
    path = []
    final = None
    for _, _, _, state in iterate(model, x0, times, rng, clamp=cfg.clamp_fn, **flags):
        if cfg.record_path:
            path.append(state if isinstance(state, np.ndarray) else state.x)
        final = state
    return SimResult(final, times, np.stack(path, axis=1) if cfg.record_path else None)


def simulate_base(model: ModelSpec, x0, t0, t1, cfg: SimConfig, rng: RngStream) -> SimResult:
    """Euler path of ``X`` alone; ``final`` is the ``(B, d)`` terminal state."""
    return _run(model, x0, t0, t1, cfg, rng)


def simulate_augmented(
    model: ModelSpec, x0, t0, t1, cfg: SimConfig, rng: RngStream, hessian: Optional[bool] = None
) -> SimResult:
    """Jointly step ``X``, its first variation and (if ``hessian``) the second.

    ``hessian`` defaults to ``model.sigma_theta_dependent``.
    """
    hessian = model.sigma_theta_dependent if hessian is None else hessian
    return _run(model, x0, t0, t1, cfg, rng, first=True, second=hessian)


def simulate_pathwise(model: ModelSpec, x0, t0, t1, cfg: SimConfig, rng: RngStream) -> SimResult:
    """Jointly step ``X`` and ``dX/dtheta`` (``d + d*n`` scalars per sample)."""
    return _run(model, x0, t0, t1, cfg, rng, pathwise=True)


def write_path_csv(result: SimResult, fh, row: int = 0) -> None:
    """Dump one recorded path as ``step,t,x_0..x_{d-1}``."""
    if result.path is None:
        raise ValueError("path was not recorded (set record_path)")
    path = result.path[row]
    w = csv.writer(fh)
    w.writerow(["step", "t"] + [f"x_{i}" for i in range(path.shape[-1])])
    for k, (t, xs) in enumerate(zip(result.times[row], path)):
        w.writerow([k, repr(float(t))] + [repr(float(v)) for v in xs])
