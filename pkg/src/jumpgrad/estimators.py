"""Gradient estimators for ``grad_theta v_theta(0, x)`` and Monte Carlo aggregation.

``gg_sample``  generator gradient: ``T * gradL(tau, X(tau)) + reward terms``,
                where the value-function derivatives inside the generator
                derivative are replaced by the pathwise functionals Z and H.
``pd_sample``  pathwise differentiation: simulates ``dX/dtheta`` (``d*n`` extra
                scalars) and differentiates the reward along the path.
``fd_estimate`` central finite differences of the value with common random numbers.

Every sampler takes an :class:`~jumpgrad.rng.RngStream` whose batch rows are
replications and returns one gradient per row.
"""
from __future__ import annotations

import collections
import json
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .model import DiscreteMarks, ModelError, ModelSpec
from .rng import RngStream
from .sim import SimConfig, iterate, slot_times, unpack_sym

# instrumentation, read by tests and the benchmark
COUNTERS: collections.Counter = collections.Counter()

REWARD_MODES = ("grid", "independent", "shared")

# replications per vectorized batch; fixed so results never depend on workers
CHUNK = 4096


@dataclass
class SampleDraws:
    """A batch of gradient samples, one row per replication."""

    gradient: np.ndarray
    replication_index: np.ndarray
    tau: Optional[np.ndarray] = None
    kind: str = ""

    def __post_init__(self):
        if not np.all(np.isfinite(self.gradient)):
            bad = np.where(~np.all(np.isfinite(self.gradient), axis=1))[0]
            rep = self.replication_index[bad[0]]
            tau = None if self.tau is None else self.tau[bad[0]]
            raise FloatingPointError(f"non-finite {self.kind} sample (replication {rep}, tau {tau})")

    def __len__(self):
        return self.gradient.shape[0]

    @staticmethod
    def concat(parts) -> SampleDraws:
        parts = list(parts)
        tau = None if parts[0].tau is None else np.concatenate([p.tau for p in parts])
        return SampleDraws(
            np.concatenate([p.gradient for p in parts]),
            np.concatenate([p.replication_index for p in parts]),
            tau,
            parts[0].kind,
        )


@dataclass
class ZHValue:
    z: np.ndarray
    h: Optional[np.ndarray] = None


@dataclass
class GradientEstimate:
    mean: np.ndarray
    se: np.ndarray
    n_samples: int
    wall_seconds: float = 0.0
    estimator_kind: str = ""
    notes: dict = field(default_factory=dict)

    @property
    def ci95_halfwidth(self) -> np.ndarray:
        return 1.96 * self.se

    def rows(self):
        for k, (m, s) in enumerate(zip(self.mean, self.se)):
            yield k, float(m), float(s), float(1.96 * s)

    def to_csv(self, fh) -> None:
        fh.write("coord,mean,se,ci95\n")
        for k, m, s, c in self.rows():
            fh.write(f"{k},{m!r},{s!r},{c!r}\n")

    def to_dict(self) -> dict:
        return {
            "estimator_kind": self.estimator_kind,
            "n_samples": self.n_samples,
            "wall_seconds": self.wall_seconds,
            "mean": self.mean.tolist(),
            "se": self.se.tolist(),
            "ci95_halfwidth": self.ci95_halfwidth.tolist(),
            "notes": self.notes,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)


def _default_stream(cfg: SimConfig, n_samples: int, rng: Optional[RngStream]) -> RngStream:
    return rng if rng is not None else RngStream.for_range(cfg.master_seed, 0, n_samples)


def chunks(rng: RngStream, size: int = CHUNK):
    """Split a stream into consecutive row blocks of at most ``size`` replications."""
    for a in range(0, rng.size, size):
        yield rng.subset(slice(a, a + size))


def _x0(model: ModelSpec, x0):
    if x0 is None:
        x0 = model.meta.get("x0")
        if x0 is None:
            raise ModelError("no initial state given and the model has no default")
    return np.asarray(x0, dtype=float).reshape(-1)


def _or_zero(fn, shape):
    return fn if fn is not None else (lambda *a: np.zeros(shape))


# ---------------------------------------------------------------------------
# value function


def value_samples(model: ModelSpec, x0, cfg: SimConfig, rng: RngStream) -> np.ndarray:
    """Per-replication ``int_0^T rho dt + g(X_T)`` (left-endpoint rule on the grid)."""
    x0 = _x0(model, x0)
    times = slot_times(model.horizon, cfg.n_steps, 0.0, model.horizon, batch=rng.size)
    th = model.theta
    acc = np.zeros(rng.size)
    for _, t, dt, x in iterate(model, x0, times, rng, clamp=cfg.clamp_fn):
        if dt is None:
            acc += model.reward.terminal.value(t, x, th)
        else:
            acc += dt * model.reward.rate.value(t, x, th)
    return acc


def value_estimate(model: ModelSpec, x0, cfg: SimConfig, n_samples: int, rng: Optional[RngStream] = None):
    """Monte Carlo ``(mean, se)`` of ``v_theta(0, x0)``."""
    if n_samples < 2:
        raise ValueError("need at least two samples for a standard error")
    stream = _default_stream(cfg, n_samples, rng)
    vals = np.concatenate([value_samples(model, x0, cfg, part) for part in chunks(stream)])
    return float(vals.mean()), float(vals.std(ddof=1) / np.sqrt(vals.size))


# ---------------------------------------------------------------------------
# space-derivative functionals


def sample_Z_H(model: ModelSpec, t, x, cfg: SimConfig, rng: RngStream, need_h: bool = False) -> ZHValue:
    """One draw of ``Z(t, x)`` (and ``H(t, x)`` if ``need_h``) per batch row.

    ``t`` may differ per row. The first (and second) variation flows are
    started at ``t`` from the identity (and zero) and run to the horizon.
    """
    b, d = rng.size, model.dim_state
    x = np.broadcast_to(np.asarray(x, dtype=float), (b, d))
    t = np.broadcast_to(np.asarray(t, dtype=float), (b,))
    if np.any(t > model.horizon):
        raise ModelError("start time beyond the horizon")
    if need_h:
        COUNTERS["hessian_requests"] += 1
    COUNTERS["zh_calls"] += 1
    th = model.theta
    rate, term = model.reward.rate, model.reward.terminal
    rate_dx = _or_zero(rate.dx, (b, d))
    term_dx = _or_zero(term.dx, (b, d))
    rate_dxx = _or_zero(rate.dxx, (b, d, d))
    term_dxx = _or_zero(term.dxx, (b, d, d))
    times = slot_times(model.horizon, cfg.n_steps, t, model.horizon, batch=b)
    z = np.zeros((b, d))
    h = np.zeros((b, d, d)) if need_h else None
    for _, tt, dt, st in iterate(model, x, times, rng, first=True, second=need_h, clamp=cfg.clamp_fn):
        gx = st.grad_x
        if dt is None:
            w = None
            grad, hess = term_dx(tt, st.x, th), (term_dxx(tt, st.x, th) if need_h else None)
        else:
            w = dt
            grad, hess = rate_dx(tt, st.x, th), (rate_dxx(tt, st.x, th) if need_h else None)
        contrib = np.einsum("bl,bla->ba", grad, gx)
        z += contrib if w is None else w[:, None] * contrib
        if need_h:
            hc = np.einsum("bla,blm,bmc->bac", gx, hess, gx)
            hc = hc + unpack_sym(np.einsum("bl,blp->bp", grad, st.hess_x), d)
            h += hc if w is None else w[:, None, None] * hc
    COUNTERS["zh_state_scalars"] = st.n_scalars
    return ZHValue(z, None if h is None else 0.5 * (h + np.swapaxes(h, 1, 2)))


# ---------------------------------------------------------------------------
# generator gradient


def generator_gradient_term(model: ModelSpec, t, x, zh: ZHValue) -> np.ndarray:
    """Continuous part ``sum_i dmu_i Z_i + sum_ij da_ij H_ij`` at ``(t, x)``."""
    th = model.theta
    b, d, n = x.shape[0], model.dim_state, model.dim_param
    out = np.zeros((b, n))
    if model.drift.dtheta is not None:
        out += np.einsum("bni,bi->bn", model.drift.dtheta(t, x, th), zh.z)
    if model.vol.dtheta is not None and model.sigma_theta_dependent:
        if zh.h is None:
            raise ModelError("volatility depends on theta but H was not sampled")
        sig = model.vol.value(t, x, th)
        dsig = model.vol.dtheta(t, x, th)
        # sum_ij da_ij H_ij = sum_ijk dsig_ik sig_jk H_ij for symmetric H
        out += np.einsum("bnik,bjk,bij->bn", dsig, sig, zh.h)
    return out


def _jump_marks(model: ModelSpec, rng: RngStream, exact_atoms: bool):
    """``(intensity, z)`` pairs approximating the jump-measure integral."""
    spec = model.jump_spec
    b = rng.size
    if isinstance(spec.marks, DiscreteMarks) and exact_atoms:
        return [(w, np.broadcast_to(z, (b, z.size))) for z, w in zip(spec.marks.atoms, spec.marks.weights)]
    if isinstance(spec.marks, DiscreteMarks):
        u = rng.uniform("gg_mark", 0, 1)[:, 0]
        cdf = np.cumsum(spec.marks.weights) / spec.rate
        idx = np.minimum(np.searchsorted(cdf, u, side="right"), cdf.size - 1)
        return [(spec.rate, spec.marks.atoms[idx])]
    u = rng.uniform("gg_mark", 0, spec.marks.n_uniforms)
    return [(spec.rate, spec.marks.sampler(u))]


def generator_jump_term(model: ModelSpec, t, x, z_here: np.ndarray, cfg: SimConfig, rng: RngStream,
                        exact_atoms: bool = True, coupled: bool = False) -> np.ndarray:
    """Jump part ``int sum_i dchi_i (Z_i(x + chi) - Z_i(x)) nu(dz)``.

    ``Z(x + chi)`` is an independent draw unless ``coupled``, in which case it
    reuses the noise of the draw at ``x``.
    """
    th = model.theta
    b, n = x.shape[0], model.dim_param
    out = np.zeros((b, n))
    if model.jump.dtheta is None:
        return out
    for a, (w, z) in enumerate(_jump_marks(model, rng, exact_atoms)):
        chi = model.jump.value(t, x, z, th)
        shift_rng = rng.child("z") if coupled else rng.child(f"shift{a}")
        z_shift = sample_Z_H(model, t, x + chi, cfg, shift_rng, need_h=False).z
        diff = z_shift - z_here if model.jump_spec.compensated else z_shift
        out += w * np.einsum("bni,bi->bn", model.jump.dtheta(t, x, z, th), diff)
    return out


def gg_sample(
    model: ModelSpec,
    x0,
    cfg: SimConfig,
    rng: RngStream,
    reward_mode: str = "grid",
    exact_atoms: bool = True,
    coupled_shift: bool = False,
    jump_part: Optional[bool] = None,
) -> SampleDraws:
    """Generator-gradient samples ``D = T * gradL V(tau, X(tau)) + R + grad_theta g(X_T)``.

    ``reward_mode`` selects how ``R = int_0^T grad_theta rho dt`` is computed:
    ``"grid"`` integrates along the path, ``"independent"`` uses
    ``T * grad_theta rho`` at a second uniform time, ``"shared"`` reuses ``tau``.
    ``jump_part`` defaults to whether the model has jumps.
    """
    if reward_mode not in REWARD_MODES:
        raise ValueError(f"reward_mode must be one of {REWARD_MODES}")
    if jump_part is None:
        jump_part = model.has_jumps
    elif jump_part and model.jump_spec is None:
        raise ModelError("jump part requested but the model has no jump specification")
    x0 = _x0(model, x0)
    b, d, n, T = rng.size, model.dim_state, model.dim_param, model.horizon
    th = model.theta
    need_h = bool(model.sigma_theta_dependent and model.vol.dtheta is not None)
    rate_th, term_th = model.reward.rate.dtheta, model.reward.terminal.dtheta

    tau = T * rng.uniform("tau", 0, 1)[:, 0]
    tau_r = T * rng.uniform("reward_tau", 0, 1)[:, 0] if reward_mode == "independent" else tau
    extra = np.stack([tau, tau_r], axis=1)
    times = slot_times(T, cfg.n_steps, 0.0, T, extra=extra, batch=b)

    x_tau = np.zeros((b, d))
    got_tau = np.zeros(b, dtype=bool)
    reward = np.zeros((b, n))
    got_r = np.zeros(b, dtype=bool)
    for _, t, dt, x in iterate(model, x0, times, rng, clamp=cfg.clamp_fn):
        hit = (t == tau) & ~got_tau
        if hit.any():
            x_tau[hit] = x[hit]
            got_tau |= hit
        if rate_th is None:
            pass
        elif reward_mode == "grid":
            if dt is not None:
                reward += dt[:, None] * rate_th(t, x, th)
        else:
            hit = (t == tau_r) & ~got_r
            if hit.any():
                reward[hit] = T * rate_th(t[hit], x[hit], th)
                got_r |= hit
        if dt is None and term_th is not None:
            reward += term_th(t, x, th)

    zh = sample_Z_H(model, tau, x_tau, cfg, rng.child("z"), need_h=need_h)
    gen = generator_gradient_term(model, tau, x_tau, zh)
    if jump_part and model.has_jumps:
        gen += generator_jump_term(model, tau, x_tau, zh.z, cfg, rng, exact_atoms, coupled_shift)
    COUNTERS["gg_sample"] += b
    return SampleDraws(T * gen + reward, rng.replications.copy(), tau, "GG")


# ---------------------------------------------------------------------------
# pathwise differentiation


def pd_sample(model: ModelSpec, x0, cfg: SimConfig, rng: RngStream, randomize_time: bool = False) -> SampleDraws:
    """Pathwise-differentiation samples.

    Full form ``int_0^T (grad_theta rho + dX^T grad rho) dt + grad_theta g + dX_T^T grad g``;
    with ``randomize_time`` the integral is replaced by ``T`` times its
    integrand at a uniform time.
    """
    x0 = _x0(model, x0)
    b, d, n, T = rng.size, model.dim_state, model.dim_param, model.horizon
    th = model.theta
    rate, term = model.reward.rate, model.reward.terminal
    rate_dx = _or_zero(rate.dx, (b, d))
    rate_th = rate.dtheta
    tau = T * rng.uniform("tau", 0, 1)[:, 0] if randomize_time else None
    times = slot_times(T, cfg.n_steps, 0.0, T, extra=None if tau is None else tau[:, None], batch=b)

    acc = np.zeros((b, n))
    done = np.zeros(b, dtype=bool)
    for _, t, dt, st in iterate(model, x0, times, rng, pathwise=True, clamp=cfg.clamp_fn):
        if dt is None:
            gterm = np.matmul(st.dtheta_x, (_or_zero(term.dx, (b, d))(t, st.x, th))[:, :, None])[:, :, 0]
            if term.dtheta is not None:
                gterm += term.dtheta(t, st.x, th)
            acc += gterm
            COUNTERS["pd_state_scalars"] = st.n_scalars
            continue
        if randomize_time:
            rows = (t == tau) & ~done
            if not rows.any():
                continue
            done |= rows
            scale = T
        else:
            rows = slice(None)
            scale = dt[:, None]
        tr, xr, pr = t[rows], st.x[rows], st.dtheta_x[rows]
        integrand = np.matmul(pr, rate_dx(tr, xr, th)[:, :, None])[:, :, 0]
        if rate_th is not None:
            integrand += rate_th(tr, xr, th)
        acc[rows] += scale * integrand
    COUNTERS["pd_sample"] += b
    return SampleDraws(acc, rng.replications.copy(), tau, "PD")


# ---------------------------------------------------------------------------
# finite differences


def fd_samples(model: ModelSpec, x0, h: float, cfg: SimConfig, rng: RngStream, coords=None) -> SampleDraws:
    """Per-replication ``(v(theta + h/2 e_k) - v(theta - h/2 e_k)) / h`` with shared noise."""
    if not h > 0:
        raise ValueError("finite-difference step must be positive")
    coords = range(model.dim_param) if coords is None else coords
    cols = []
    for k in coords:
        up, dn = model.theta.copy(), model.theta.copy()
        up[k] += h / 2
        dn[k] -= h / 2
        vu = value_samples(model.with_theta(up), x0, cfg, rng)
        vd = value_samples(model.with_theta(dn), x0, cfg, rng)
        cols.append((vu - vd) / h)
    return SampleDraws(np.stack(cols, axis=1), rng.replications.copy(), None, "FD")


def fd_estimate(model: ModelSpec, x0, h: float, cfg: SimConfig, n_samples: int,
                rng: Optional[RngStream] = None) -> GradientEstimate:
    """Central finite-difference gradient; bias is ``O(h^2)``."""
    start = time.perf_counter()
    stream = _default_stream(cfg, n_samples, rng)
    draws = SampleDraws.concat(fd_samples(model, x0, h, cfg, part) for part in chunks(stream))
    est = mc_aggregate(draws)
    est.wall_seconds = time.perf_counter() - start
    est.notes.update(bias="O(h^2)", h=h)
    return est


# ---------------------------------------------------------------------------
# aggregation


def mc_aggregate(samples) -> GradientEstimate:
    """Per-coordinate mean and standard error ``sd / sqrt(N)`` in replication order."""
    if isinstance(samples, SampleDraws):
        draws = samples
    else:
        draws = SampleDraws.concat(samples)
    if len(draws) < 2:
        raise ValueError("need at least two samples for a standard error")
    order = np.argsort(draws.replication_index, kind="stable")
    # coordinate-major copy so numpy reduces each coordinate pairwise in index order
    g = np.ascontiguousarray(draws.gradient[order].T)
    m = g.shape[1]
    mean = g.sum(axis=1) / m
    se = np.sqrt(((g - mean[:, None]) ** 2).sum(axis=1) / (m - 1)) / np.sqrt(m)
    return GradientEstimate(mean, se, m, estimator_kind=draws.kind)


def run_samples(
    kind: str,
    model: ModelSpec,
    x0,
    cfg: SimConfig,
    n_samples: int,
    workers: int = 1,
    start: int = 0,
    chunk: int = CHUNK,
    **options,
) -> SampleDraws:
    """Draw replications ``start .. start + n_samples - 1`` in fixed-size chunks.

    ``kind`` is ``"GG"``, ``"PD"`` or ``"FD"`` (the latter needs ``h``).
    Chunk boundaries depend only on ``chunk``, never on ``workers``, and the
    chunks are reassembled in replication order.
    """
    samplers = {"GG": gg_sample, "PD": pd_sample}
    if kind == "FD":
        h = options.pop("h", 0.05)

        def fn(m, x, c, r, **kw):
            return fd_samples(m, x, h, c, r, **kw)
    elif kind in samplers:
        fn = samplers[kind]
    else:
        raise ValueError(f"unknown estimator kind {kind!r}")
    stop = start + n_samples
    bounds = [(a, min(a + chunk, stop)) for a in range(start, stop, chunk)]

    def one(ab):
        return fn(model, x0, cfg, RngStream.for_range(cfg.master_seed, *ab), **options)

    if workers <= 1 or len(bounds) == 1:
        parts = [one(ab) for ab in bounds]
    else:
        with ThreadPoolExecutor(max_workers=workers) as ex:
            parts = list(ex.map(one, bounds))
    return SampleDraws.concat(parts)


def estimate(kind: str, model: ModelSpec, x0, cfg: SimConfig, n_samples: int, **kw) -> GradientEstimate:
    """Draw, aggregate and time one estimator."""
    t0 = time.perf_counter()
    h = kw.get("h") if kind == "FD" else None
    est = mc_aggregate(run_samples(kind, model, x0, cfg, n_samples, **kw))
    est.wall_seconds = time.perf_counter() - t0
    if kind == "FD":
        est.notes.update(bias="O(h^2)", h=0.05 if h is None else h)
    return est


# ---------------------------------------------------------------------------
# GG vs PD standard-error comparison


@dataclass
class ComparisonReport:
    se_gg: np.ndarray
    se_pd: np.ndarray
    ratio: np.ndarray
    missing: list
    bin_edges: np.ndarray
    hist_gg: np.ndarray
    hist_pd: np.ndarray

    @property
    def avg_se_gg(self) -> float:
        return float(self.se_gg.mean())

    @property
    def avg_se_pd(self) -> float:
        return float(self.se_pd.mean())

    @property
    def avg_ratio(self) -> float:
        ok = np.isfinite(self.ratio)
        return float(self.ratio[ok].mean()) if ok.any() else float("nan")

    def to_csv(self, fh) -> None:
        fh.write("coord,se_gg,se_pd,ratio\n")
        for k, (a, b, r) in enumerate(zip(self.se_gg, self.se_pd, self.ratio)):
            rs = "" if not np.isfinite(r) else repr(float(r))
            fh.write(f"{k},{float(a)!r},{float(b)!r},{rs}\n")

    def histogram_csv(self, fh) -> None:
        fh.write("bin_lo,bin_hi,count_gg,count_pd\n")
        e = self.bin_edges
        for i in range(e.size - 1):
            fh.write(f"{float(e[i])!r},{float(e[i + 1])!r},{int(self.hist_gg[i])},{int(self.hist_pd[i])}\n")


def se_comparison(gg, pd, bins: int = 30) -> ComparisonReport:
    """Per-coordinate SEs of both estimators, their ratios and shared-bin histograms."""
    eg = gg if isinstance(gg, GradientEstimate) else mc_aggregate(gg)
    ep = pd if isinstance(pd, GradientEstimate) else mc_aggregate(pd)
    if eg.se.shape != ep.se.shape:
        raise ValueError("estimators have different coordinate dimensions")
    with np.errstate(divide="ignore", invalid="ignore"):
        ratio = np.where(ep.se > 0, eg.se / np.where(ep.se > 0, ep.se, 1.0), np.nan)
    missing = [int(k) for k in np.where(~np.isfinite(ratio))[0]]
    both = np.concatenate([eg.se, ep.se])
    edges = np.linspace(0.0, float(both.max()) if both.max() > 0 else 1.0, bins + 1)
    hg, _ = np.histogram(eg.se, edges)
    hp, _ = np.histogram(ep.se, edges)
    return ComparisonReport(eg.se, ep.se, ratio, missing, edges, hg, hp)
