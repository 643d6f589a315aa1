"""Ready-made models: GBM, CIR, ReLU drift, a jump test model and neural LQ control."""
from __future__ import annotations

import threading
from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import nn
from .model import (
    CoefficientEval,
    DiscreteMarks,
    JumpSpec,
    ModelError,
    ModelSpec,
    RewardEval,
)


def _state_rewards(d: int, rate_linear=None, rate_quadratic=None, term_linear=None, term_quadratic=None):
    """Rewards ``c.x + x^T Q x`` (rate) and ``c_T.x + x^T Q_T x`` (terminal), theta-free."""

    def quad(c, q):
        c = np.zeros(d) if c is None else np.asarray(c, dtype=float)
        q = np.zeros((d, d)) if q is None else np.asarray(q, dtype=float)
        qs = q + q.T
        return CoefficientEval(
            value=lambda t, x, th: x @ c + np.einsum("bi,ij,bj->b", x, q, x),
            dx=lambda t, x, th: c + x @ qs.T,
            dxx=lambda t, x, th: np.broadcast_to(qs, (x.shape[0], d, d)),
            dtheta=None,
        )

    return RewardEval(quad(rate_linear, rate_quadratic), quad(term_linear, term_quadratic))


def build_gbm(theta: float = 0.05, sigma0: float = 0.2, x0: float = 1.0, horizon: float = 1.0,
              reward: str = "terminal") -> ModelSpec:
    """Geometric Brownian motion ``dX = theta X dt + sigma0 X dB``.

    ``reward="terminal"`` gives ``g(x) = x``, ``rho = 0``; ``"running"`` gives
    ``rho = x``, ``g = 0``.
    """
    drift = CoefficientEval(
        value=lambda t, x, th: th[0] * x,
        dx=lambda t, x, th: np.full((x.shape[0], 1, 1), th[0]),
        dxx=None,
        dtheta=lambda t, x, th: x[:, None, :],
    )
    vol = CoefficientEval(
        value=lambda t, x, th: sigma0 * x[:, :, None],
        dx=lambda t, x, th: np.full((x.shape[0], 1, 1, 1), sigma0),
        dxx=None,
        dtheta=None,
    )
    if reward == "terminal":
        rewards = _state_rewards(1, term_linear=[1.0])
    elif reward == "running":
        rewards = _state_rewards(1, rate_linear=[1.0])
    else:
        raise ModelError(f"unknown reward {reward!r}")
    return ModelSpec(1, 1, 1, horizon, [theta], drift, vol, rewards, name="gbm",
                     meta={"x0": np.array([x0]), "sigma0": sigma0})


def build_gbm_vol_param(theta=(0.05, 0.2), x0: float = 1.0, horizon: float = 1.0) -> ModelSpec:
    """GBM with parameterized volatility ``dX = th0 X dt + th1 X dB`` and ``g = x^2``.

    ``E g(X_T) = x0^2 exp((2 th0 + th1^2) T)``; exercises the second-variation
    path since sigma depends on theta.
    """
    drift = CoefficientEval(
        value=lambda t, x, th: th[0] * x,
        dx=lambda t, x, th: np.full((x.shape[0], 1, 1), th[0]),
        dxx=None,
        dtheta=lambda t, x, th: np.stack([x, np.zeros_like(x)], axis=1),
    )
    vol = CoefficientEval(
        value=lambda t, x, th: th[1] * x[:, :, None],
        dx=lambda t, x, th: np.full((x.shape[0], 1, 1, 1), th[1]),
        dxx=None,
        dtheta=lambda t, x, th: np.stack([np.zeros_like(x), x], axis=1)[:, :, :, None],
    )
    rewards = _state_rewards(1, term_quadratic=[[1.0]])
    return ModelSpec(1, 1, 2, horizon, list(theta), drift, vol, rewards,
                     sigma_theta_dependent=True, name="gbm_vol",
                     meta={"x0": np.array([x0])})


@dataclass(frozen=True)
class CirSpec:
    theta: float = 4.0
    x0: float = 0.1
    horizon: float = 2.0

    def __post_init__(self):
        if not self.theta > 0:
            raise ModelError("CIR theta must be positive")
        if not self.x0 > 0:
            raise ModelError("CIR start must be positive")


def _sqrt_pos(x):
    return np.sqrt(np.maximum(x, 0.0))


def _dsqrt(x):
    # derivative of sqrt(max(x, 0)); zero where x <= 0
    pos = x > 0
    return np.where(pos, 0.5 / np.sqrt(np.where(pos, x, 1.0)), 0.0)


def build_cir(spec: CirSpec = CirSpec()) -> ModelSpec:
    """``dX = (theta - X) dt + sqrt(X) dB`` with ``rho = x``; the Euler iterate is
    reflected by taking its absolute value after every step."""
    drift = CoefficientEval(
        value=lambda t, x, th: th[0] - x,
        dx=lambda t, x, th: np.full((x.shape[0], 1, 1), -1.0),
        dxx=None,
        dtheta=lambda t, x, th: np.ones((x.shape[0], 1, 1)),
    )
    vol = CoefficientEval(
        value=lambda t, x, th: _sqrt_pos(x)[:, :, None],
        dx=lambda t, x, th: _dsqrt(x)[:, :, None, None],
        dxx=lambda t, x, th: np.where(x > 0, -0.25 * np.maximum(x, 1e-300) ** -1.5, 0.0)[:, :, None, None, None],
        dtheta=None,
    )
    rewards = _state_rewards(1, rate_linear=[1.0])
    return ModelSpec(1, 1, 1, spec.horizon, [spec.theta], drift, vol, rewards,
                     clamp_fn=np.abs, probe_states=lambda u: 0.05 + 2.0 * u,
                     name="cir", meta={"x0": np.array([spec.x0])})


def cir_gradient_exact(horizon: float = 2.0) -> float:
    """``d/dtheta int_0^T E X(s) ds = T - (1 - e^{-T})``; equals ``1 + e^{-2}`` at ``T = 2``."""
    return horizon - (1.0 - np.exp(-horizon))


def cir_value_exact(theta: float, x0: float, horizon: float = 2.0) -> float:
    return theta * horizon + (x0 - theta) * (1.0 - np.exp(-horizon))


@dataclass(frozen=True)
class ReluDriftSpec:
    theta: float = 1.0
    x0: float = -0.1
    horizon: float = 2.0
    vol: float = 1.0

    def __post_init__(self):
        if not self.theta > 0:
            raise ModelError("ReLU-drift theta must be positive")


def build_relu(spec: ReluDriftSpec = ReluDriftSpec()) -> ModelSpec:
    """``dX = (ReLU(theta X) + 1) dt + dB`` with ``rho = x``.

    Almost-everywhere derivatives; at the kink ``theta x = 0`` the derivative
    from the right is used.
    """
    s = spec.vol

    def on(x, th):
        return (th[0] * x >= 0).astype(float)

    drift = CoefficientEval(
        value=lambda t, x, th: np.maximum(th[0] * x, 0.0) + 1.0,
        dx=lambda t, x, th: (th[0] * on(x, th))[:, :, None],
        dxx=None,
        dtheta=lambda t, x, th: (x * on(x, th))[:, None, :],
    )
    vol = CoefficientEval(value=lambda t, x, th: np.full((x.shape[0], 1, 1), s))
    rewards = _state_rewards(1, rate_linear=[1.0])
    return ModelSpec(1, 1, 1, spec.horizon, [spec.theta], drift, vol, rewards,
                     name="relu", meta={"x0": np.array([spec.x0])})


def build_jump_test(theta: float = 1.0, x0: float = 0.5, horizon: float = 1.0,
                    vol: float = 0.3, scale: float = 0.2, compensated: bool = True) -> ModelSpec:
    """``dX = (theta - X) dt + vol dB + int scale*theta*z N~(dt, dz)`` with marks
    ``z = +-1`` at rate 1/2 each; rewards ``rho = x^2``, ``g = x^2``.
    """
    drift = CoefficientEval(
        value=lambda t, x, th: th[0] - x,
        dx=lambda t, x, th: np.full((x.shape[0], 1, 1), -1.0),
        dxx=None,
        dtheta=lambda t, x, th: np.ones((x.shape[0], 1, 1)),
    )
    volc = CoefficientEval(value=lambda t, x, th: np.full((x.shape[0], 1, 1), vol))
    jump = CoefficientEval(
        value=lambda t, x, z, th: scale * th[0] * z[:, :1] * np.ones_like(x),
        dx=None,
        dxx=None,
        dtheta=lambda t, x, z, th: (scale * z[:, :1] * np.ones_like(x))[:, None, :],
    )
    jspec = JumpSpec(1.0, DiscreteMarks([[-1.0], [1.0]], [0.5, 0.5]), compensated=compensated)
    rewards = _state_rewards(1, rate_quadratic=[[1.0]], term_quadratic=[[1.0]])
    return ModelSpec(1, 1, 1, horizon, [theta], drift, volc, rewards, jump=jump, jump_spec=jspec,
                     name="jump_test",
                     meta={"x0": np.array([x0]), "vol": vol, "scale": scale})


def jump_test_gradient_exact(theta: float = 1.0, x0: float = 0.5, horizon: float = 1.0,
                             vol: float = 0.3, scale: float = 0.2) -> float:
    """Closed-form ``d/dtheta`` of ``E[int_0^T X^2 ds + X_T^2]`` for the compensated jump test model.

    Mean ``m(s) = theta + (x0 - theta) e^{-s}``, variance
    ``(vol^2 + scale^2 theta^2)(1 - e^{-2s}) / 2``.
    """
    from scipy.integrate import quad

    def dm2(s):
        m = theta + (x0 - theta) * np.exp(-s)
        return 2 * m * (1 - np.exp(-s))

    def dvar(s):
        return scale ** 2 * theta * (1 - np.exp(-2 * s))

    run = quad(lambda s: dm2(s) + dvar(s), 0, horizon, epsabs=1e-13, epsrel=1e-13)[0]
    return run + dm2(horizon) + dvar(horizon)


# ---------------------------------------------------------------------------
# neural LQ control


@dataclass
class LqSpec:
    """Linear dynamics ``dX = (A X + B u_theta(t, X)) dt + C dW`` with quadratic cost."""

    A: np.ndarray
    B: np.ndarray
    C: np.ndarray
    Q: np.ndarray
    Q_T: np.ndarray
    R: np.ndarray
    x0: np.ndarray
    horizon: float
    policy: nn.MlpSpec
    theta: Optional[np.ndarray] = None

    def __post_init__(self):
        for k in ("A", "B", "C", "Q", "Q_T", "R", "x0"):
            setattr(self, k, np.atleast_1d(np.asarray(getattr(self, k), dtype=float)))
        d, m = self.B.shape
        if self.A.shape != (d, d) or self.C.shape[0] != d:
            raise ModelError("A must be d x d and C must have d rows")
        if self.Q.shape != (d, d) or self.Q_T.shape != (d, d) or self.R.shape != (m, m):
            raise ModelError("cost matrices have inconsistent shapes")
        if self.x0.shape != (d,):
            raise ModelError("x0 must have length d")
        if self.policy.state_dim != d or self.policy.output_dim != m:
            raise ModelError("policy input/output sizes do not match the dynamics")
        if self.theta is None:
            self.theta = nn.init_params(self.policy)
        self.theta = np.asarray(self.theta, dtype=float)
        if self.theta.shape != (self.policy.n_params,):
            raise ModelError("policy parameters have the wrong length")


def default_lq(hidden_width: int = 5, depth: int = 3, init_seed: int = 0, activation: str = "tanh",
               theta=None) -> LqSpec:
    """Point mass on a plane: state (px, py, vx, vy), force control (fx, fy).

    With ``depth = 3`` the parameter count is ``2 w^2 + 10 w + 2`` (102 at
    ``w = 5``, 1002 at ``w = 20``).
    """
    A = np.zeros((4, 4))
    A[0, 2] = A[1, 3] = 1.0
    B = np.zeros((4, 2))
    B[2, 0] = B[3, 1] = 1.0
    C = np.zeros((4, 2))
    C[2, 0] = C[3, 1] = 0.1
    policy = nn.MlpSpec(4, (hidden_width,) * depth, 2, activation=activation, init_seed=init_seed)
    return LqSpec(A, B, C, np.eye(4), np.eye(4), 0.1 * np.eye(2), np.array([1.0, 1.0, 0.0, 0.0]),
                  1.0, policy, theta)


class _PolicyCache:
    """Single-entry memo of ``(u, du/dx)`` so drift and reward share one pass."""

    def __init__(self, policy):
        self.policy = policy
        self._local = threading.local()

    def __call__(self, t, x, th):
        key = (t.tobytes(), x.tobytes())
        hit = getattr(self._local, "entry", None)
        # the entry holds a reference to th, so identity cannot be recycled
        if hit is not None and hit[1] is th and hit[0] == key:
            return hit[2]
        u, jac = nn.forward_jac(self.policy, th, t, x)
        val = (u, jac[:, :, 1:])
        self._local.entry = (key, th, val)
        return val


def build_lq(spec: LqSpec) -> ModelSpec:
    """ModelSpec for the neural LQ problem (cost is minimized; gradients are of the cost).

    Volatility ``C`` is constant so the generator gradient needs no second
    variation. Second input derivatives of the policy are not implemented.
    """
    A, Bm, C, Q, QT, R = spec.A, spec.B, spec.C, spec.Q, spec.Q_T, spec.R
    d, m = Bm.shape
    dn = C.shape[1]
    pol = spec.policy
    cache = _PolicyCache(pol)
    Qs, QTs, Rs = Q + Q.T, QT + QT.T, R + R.T

    def no_second(*a):
        raise NotImplementedError("second input derivatives of the policy are not implemented")

    drift = CoefficientEval(
        value=lambda t, x, th: x @ A.T + cache(t, x, th)[0] @ Bm.T,
        dx=lambda t, x, th: A + np.matmul(Bm, cache(t, x, th)[1]),
        dxx=no_second,
        dtheta=lambda t, x, th: np.einsum("bkn,ik->bni", nn.grad_theta(pol, th, t, x), Bm),
    )
    vol = CoefficientEval(value=lambda t, x, th: np.broadcast_to(C, (x.shape[0], d, dn)))

    def rate_value(t, x, th):
        u = cache(t, x, th)[0]
        return np.einsum("bi,ij,bj->b", x, Q, x) + np.einsum("bi,ij,bj->b", u, R, u)

    def rate_dx(t, x, th):
        u, ju = cache(t, x, th)
        return x @ Qs.T + np.einsum("bk,bkl->bl", u @ Rs.T, ju)

    def rate_dtheta(t, x, th):
        u = cache(t, x, th)[0]
        return nn.vjp_theta(pol, th, t, x, u @ Rs.T)

    rate = CoefficientEval(rate_value, rate_dx, no_second, rate_dtheta)
    terminal = CoefficientEval(
        value=lambda t, x, th: np.einsum("bi,ij,bj->b", x, QT, x),
        dx=lambda t, x, th: x @ QTs.T,
        dxx=lambda t, x, th: np.broadcast_to(QTs, (x.shape[0], d, d)),
        dtheta=None,
    )
    return ModelSpec(d, dn, pol.n_params, spec.horizon, spec.theta, drift, vol,
                     RewardEval(rate, terminal), name="lq",
                     meta={"x0": spec.x0, "lq": spec})


ZOO_NAMES = ("gbm", "cir", "relu", "jump_test", "lq")


def zoo_model(name: str, **overrides) -> ModelSpec:
    """Build a zoo model by its config name (``lq``, ``cir``, ``relu``, ``gbm``, ``jump_test``)."""
    if name == "cir":
        return build_cir(CirSpec(**overrides))
    if name == "relu":
        return build_relu(ReluDriftSpec(**overrides))
    if name == "gbm":
        return build_gbm(**overrides)
    if name == "jump_test":
        return build_jump_test(**overrides)
    if name == "lq":
        return build_lq(default_lq(**overrides))
    raise ModelError(f"unknown model {name!r}")
