"""Parameterized jump-diffusion models and their derivative tensors.

All evaluators are batched: ``t`` has shape ``(B,)``, ``x`` has shape
``(B, d)`` and ``theta`` has shape ``(n,)``. Index conventions (leading batch
axis omitted):

==============  ====================  ===========================
quantity        value                 dx / dxx / dtheta
==============  ====================  ===========================
drift mu        ``(d,)``              ``[i,l]`` / ``[i,l,m]`` / ``[k,i]``
vol sigma       ``(d, d')``           ``[i,k,l]`` / ``[i,k,l,m]`` / ``[n,i,k]``
jump chi        ``(d,)``              ``[i,l]`` / ``[i,l,m]`` / ``[k,i]``
rate / terminal ``()``                ``[l]`` / ``[l,m]`` / ``[k]``
==============  ====================  ===========================

Jump evaluators take the mark ``z`` of shape ``(B, d')`` after ``x``.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Callable, Optional, Union

import numpy as np
from scipy.special import ndtri


class ModelError(ValueError):
    """Invalid model definition or configuration."""


class EvaluationError(FloatingPointError):
    """A coefficient evaluator returned a non-finite value."""

    def __init__(self, name: str, t, x):
        self.name, self.t, self.x = name, t, x
        super().__init__(f"non-finite output from {name} (t={t}, x={x})")


Evaluator = Callable[..., np.ndarray]


@dataclass(frozen=True)
class CoefficientEval:
    """A coefficient (or reward) with its space and parameter derivatives.

    A derivative left as ``None`` is identically zero (e.g. ``dtheta=None``
    for a coefficient that does not depend on theta). A derivative that is
    genuinely unavailable should be a callable raising
    ``NotImplementedError`` so that nothing silently treats it as zero.
    """

    value: Evaluator
    dx: Optional[Evaluator] = None
    dxx: Optional[Evaluator] = None
    dtheta: Optional[Evaluator] = None


@dataclass(frozen=True)
class RewardEval:
    """Reward rate rho(t, x) and terminal reward g(x).

    The terminal evaluators are called with the same ``(t, x, theta)``
    signature as the rate, ``t`` being the horizon.
    """

    rate: CoefficientEval
    terminal: CoefficientEval


@dataclass(frozen=True)
class DiscreteMarks:
    """Finitely many atoms ``z_k`` with intensities ``w_k``."""

    atoms: np.ndarray
    weights: np.ndarray

    def __post_init__(self):
        atoms = np.atleast_2d(np.asarray(self.atoms, dtype=float))
        weights = np.atleast_1d(np.asarray(self.weights, dtype=float))
        if atoms.shape[0] != weights.shape[0]:
            raise ModelError("one weight per atom required")
        if np.any(weights <= 0):
            raise ModelError("atom weights must be strictly positive")
        object.__setattr__(self, "atoms", atoms)
        object.__setattr__(self, "weights", weights)


@dataclass(frozen=True)
class ContinuousMarks:
    """Marks drawn from the normalized jump measure by inverse transform.

    ``sampler`` maps uniforms of shape ``(B, n_uniforms)`` to marks of shape
    ``(B, d')``.
    """

    sampler: Callable[[np.ndarray], np.ndarray]
    n_uniforms: int = 1


@dataclass(frozen=True)
class JumpSpec:
    """Finite-activity jumps: total rate times a mark distribution."""

    rate: float
    marks: Union[DiscreteMarks, ContinuousMarks]
    compensated: bool = True

    def __post_init__(self):
        if self.rate < 0:
            raise ModelError("jump rate must be nonnegative")
        if isinstance(self.marks, DiscreteMarks):
            total = float(self.marks.weights.sum())
            if abs(total - self.rate) > 1e-12 * max(1.0, abs(self.rate)):
                raise ModelError(f"atom weights sum to {total}, rate is {self.rate}")


@dataclass(frozen=True)
class ModelSpec:
    """A parameterized jump diffusion with rewards, evaluated at ``theta``."""

    dim_state: int
    dim_noise: int
    dim_param: int
    horizon: float
    theta: np.ndarray
    drift: CoefficientEval
    vol: CoefficientEval
    reward: RewardEval
    sigma_theta_dependent: bool = False
    jump: Optional[CoefficientEval] = None
    jump_spec: Optional[JumpSpec] = None
    clamp_fn: Optional[Callable[[np.ndarray], np.ndarray]] = None
    # maps uniforms (P, d) to probe states; defaults to standard normal
    probe_states: Optional[Callable[[np.ndarray], np.ndarray]] = None
    name: str = "model"
    meta: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        theta = np.atleast_1d(np.asarray(self.theta, dtype=float))
        object.__setattr__(self, "theta", theta)
        if min(self.dim_state, self.dim_noise, self.dim_param) < 1:
            raise ModelError("dimensions must be positive")
        if not self.horizon > 0:
            raise ModelError("horizon must be positive")
        if theta.shape != (self.dim_param,):
            raise ModelError(f"theta has shape {theta.shape}, expected ({self.dim_param},)")
        if (self.jump is None) != (self.jump_spec is None):
            raise ModelError("jump coefficient and jump_spec must be given together")

    @property
    def has_jumps(self) -> bool:
        return self.jump_spec is not None and self.jump_spec.rate > 0

    def with_theta(self, theta) -> ModelSpec:
        return replace(self, theta=np.asarray(theta, dtype=float))


def check_finite(name: str, arr: np.ndarray, t, x) -> np.ndarray:
    if not np.all(np.isfinite(arr)):
        raise EvaluationError(name, t, x)
    return arr


def _batch(t, x, d):
    x = np.asarray(x, dtype=float)
    single = x.ndim == 1
    x = x.reshape(-1, d)
    t = np.broadcast_to(np.asarray(t, dtype=float), (x.shape[0],))
    return t, x, single


def a_matrix(model: ModelSpec, t, x, theta=None) -> np.ndarray:
    """Diffusion matrix ``a = sigma sigma^T / 2``."""
    theta = model.theta if theta is None else np.asarray(theta, dtype=float)
    tb, xb, single = _batch(t, x, model.dim_state)
    sig = check_finite("vol", model.vol.value(tb, xb, theta), tb, xb)
    a = 0.5 * np.einsum("bik,bjk->bij", sig, sig)
    return a[0] if single else a


def dtheta_a(model: ModelSpec, t, x, theta=None) -> np.ndarray:
    """Parameter derivative of the diffusion matrix, shape ``(n, d, d)``."""
    theta = model.theta if theta is None else np.asarray(theta, dtype=float)
    tb, xb, single = _batch(t, x, model.dim_state)
    d, n = model.dim_state, model.dim_param
    if model.vol.dtheta is None:
        out = np.zeros((xb.shape[0], n, d, d))
    else:
        sig = check_finite("vol", model.vol.value(tb, xb, theta), tb, xb)
        dsig = check_finite("vol.dtheta", model.vol.dtheta(tb, xb, theta), tb, xb)
        half = 0.5 * np.einsum("bnik,bjk->bnij", dsig, sig)
        out = half + np.swapaxes(half, -1, -2)
    return out[0] if single else out


def jump_compensator(model: ModelSpec, t, x, theta=None, uniforms=None) -> np.ndarray:
    """Compensator vector ``int chi(t, x, z) nu(dz)``.

    Exact atom sum for discrete marks; for continuous marks a single-draw
    estimate ``rate * chi(t, x, Z)`` using the supplied uniforms.
    """
    theta = model.theta if theta is None else np.asarray(theta, dtype=float)
    tb, xb, single = _batch(t, x, model.dim_state)
    spec = model.jump_spec
    if spec is None or spec.rate == 0:
        out = np.zeros_like(xb)
    elif isinstance(spec.marks, DiscreteMarks):
        out = np.zeros_like(xb)
        for z, w in zip(spec.marks.atoms, spec.marks.weights):
            zb = np.broadcast_to(z, (xb.shape[0], z.size))
            out = out + w * model.jump.value(tb, xb, zb, theta)
    else:
        if uniforms is None:
            raise ModelError("continuous marks need uniforms for the compensator draw")
        z = spec.marks.sampler(uniforms)
        out = spec.rate * model.jump.value(tb, xb, z, theta)
    return out[0] if single else out


def normal_marks(dim: int = 1, scale: float = 1.0, loc: float = 0.0) -> ContinuousMarks:
    """Gaussian marks ``loc + scale * N(0, I)`` by inverse transform."""
    return ContinuousMarks(lambda u: loc + scale * ndtri(np.clip(u, 1e-300, 1 - 1e-16)), dim)


# ---------------------------------------------------------------------------
# derivative validation


@dataclass
class DerivativeCheck:
    name: str
    max_abs: float
    max_rel: float
    passed: bool
    worst_probe: Optional[dict] = None


@dataclass
class ValidationReport:
    checks: list
    rtol: float
    skipped: list = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.checks)

    @property
    def failures(self) -> list:
        return [c for c in self.checks if not c.passed]

    def lines(self) -> list:
        out = []
        for c in self.checks:
            status = "PASS" if c.passed else "FAIL"
            out.append(f"{status} {c.name}: max_abs={c.max_abs:.3e} max_rel={c.max_rel:.3e}")
        out.extend(f"SKIP {name}: not implemented by the model" for name in self.skipped)
        return out


def _central(f, base, idx, h):
    up, dn = base.copy(), base.copy()
    up[..., idx] += h
    dn[..., idx] -= h
    return (f(up) - f(dn)) / (2 * h)


def _compare(name, analytic, numeric, rtol, probes):
    analytic = np.asarray(analytic, dtype=float)
    numeric = np.asarray(numeric, dtype=float)
    err = np.abs(analytic - numeric)
    rel = err / np.maximum(1.0, np.abs(numeric))
    max_abs = float(err.max()) if err.size else 0.0
    max_rel = float(rel.max()) if rel.size else 0.0
    worst = None
    if rel.size:
        b = int(np.unravel_index(np.argmax(rel), rel.shape)[0])
        worst = {k: np.asarray(v)[b].tolist() for k, v in probes.items()}
    return DerivativeCheck(name, max_abs, max_rel, bool(max_rel <= rtol), worst)


def validate_model(
    model: ModelSpec,
    probe_count: int = 32,
    rng_seed: int = 0,
    rtol: float = 1e-5,
    step: float = 1e-5,
    theta_step: Optional[float] = None,
) -> ValidationReport:
    """Check every supplied analytic derivative against central differences.

    Probe states come from ``model.probe_states`` (standard normal if unset),
    probe times are uniform on the horizon. Space second derivatives are
    checked against differences of the supplied first derivatives.
    """
    from .rng import RngStream

    d, n, dn = model.dim_state, model.dim_param, model.dim_noise
    stream = RngStream.for_range(rng_seed, 0, probe_count, prefix="validate/")
    u = stream.uniform("x", 0, d)
    u = np.clip(u, 1e-12, 1 - 1e-12)
    x = model.probe_states(u) if model.probe_states is not None else ndtri(u)
    x = np.asarray(x, dtype=float).reshape(probe_count, d)
    t = model.horizon * stream.uniform("t", 0, 1)[:, 0]
    th = model.theta
    hth = step if theta_step is None else theta_step
    probes = {"t": t, "x": x}
    checks = []
    skipped = []

    def attempt(name, fn):
        try:
            checks.extend(fn())
        except NotImplementedError:
            skipped.append(name)

    marks = []
    if model.jump_spec is not None:
        if isinstance(model.jump_spec.marks, DiscreteMarks):
            marks = [np.broadcast_to(z, (probe_count, dn)) for z in model.jump_spec.marks.atoms]
        else:
            uz = stream.uniform("z", 0, model.jump_spec.marks.n_uniforms)
            marks = [model.jump_spec.marks.sampler(uz)]

    def coefficient(name, coef, extra=()):
        def val(xx, thh=th):
            return coef.value(t, xx, *extra, thh)

        if coef.dx is not None:
            def check_dx():
                a = coef.dx(t, x, *extra, th)
                num = np.stack([_central(val, x, l, step) for l in range(d)], axis=-1)
                return [_compare(f"{name}.dx", a, num, rtol, probes)]

            attempt(f"{name}.dx", check_dx)
        if coef.dxx is not None and coef.dx is not None:
            def check_dxx():
                a = coef.dxx(t, x, *extra, th)

                def first(xx):
                    return coef.dx(t, xx, *extra, th)

                num = np.stack([_central(first, x, m, step) for m in range(d)], axis=-1)
                sym = np.swapaxes(a, -1, -2)
                return [_compare(f"{name}.dxx", a, num, rtol, probes),
                        _compare(f"{name}.dxx.symmetric", a, sym, rtol, probes)]

            attempt(f"{name}.dxx", check_dxx)
        if coef.dtheta is not None:
            def check_dtheta():
                a = coef.dtheta(t, x, *extra, th)

                def f_th(k):
                    up, dn_ = th.copy(), th.copy()
                    up[k] += hth
                    dn_[k] -= hth
                    return (val(x, up) - val(x, dn_)) / (2 * hth)

                num = np.stack([f_th(k) for k in range(n)], axis=1)
                return [_compare(f"{name}.dtheta", a, num, rtol, probes)]

            attempt(f"{name}.dtheta", check_dtheta)

    coefficient("drift", model.drift)
    coefficient("vol", model.vol)
    if not model.sigma_theta_dependent:
        if model.vol.dtheta is None:
            zero = np.zeros((probe_count, 1))
        else:
            zero = model.vol.dtheta(t, x, th)
        checks.append(_compare("vol.theta_independent", zero, np.zeros_like(zero), rtol, probes))
    for j, z in enumerate(marks):
        coefficient(f"jump[{j}]", model.jump, (z,))
    coefficient("reward.rate", model.reward.rate)
    tT = np.full(probe_count, model.horizon)

    def terminal_at_T(coef):
        return CoefficientEval(
            value=lambda _t, xx, thh: coef.value(tT, xx, thh),
            dx=None if coef.dx is None else (lambda _t, xx, thh: coef.dx(tT, xx, thh)),
            dxx=None if coef.dxx is None else (lambda _t, xx, thh: coef.dxx(tT, xx, thh)),
            dtheta=None if coef.dtheta is None else (lambda _t, xx, thh: coef.dtheta(tT, xx, thh)),
        )

    coefficient("reward.terminal", terminal_at_T(model.reward.terminal))
    return ValidationReport(checks, rtol, skipped)
