"""Configuration-driven experiments that write CSV (and JSON) artifacts.

Experiments:

``cir`` / ``relu``  GG and FD estimates for a sweep of theta values.
``lq_bench``        GG vs PD standard errors on the neural LQ problem.
``timing``          seconds per sample of GG and PD across parameter counts.
``validate``        derivative checks plus a small oracle suite.
``train_demo``      a few steps of gradient descent on the LQ cost.

Every CSV starts with provenance comment lines, then a header row. Apart
from ``timing`` (wall clock by nature) the CSVs are byte-identical across
reruns with the same config and seed, whatever the worker count.
"""
from __future__ import annotations

import dataclasses
import hashlib
import io
import json
import logging
import os
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from . import __version__, estimators as est, nn, zoo
from .model import validate_model
from .rng import RngStream
from .sim import SimConfig

log = logging.getLogger("jumpgrad")

EXPERIMENTS = ("cir", "relu", "lq_bench", "timing", "validate", "train_demo")
ESTIMATORS = ("gg", "pd", "fd")

# fields that change where or how fast results are produced, not what they are
_NON_SEMANTIC = ("output_dir", "workers")

_DEFAULTS = {
    "cir": {"theta": [4.0, 2.0, 0.55, 0.45, 0.2], "n_steps": 400, "estimators": ["gg", "fd"]},
    "relu": {"theta": [2.0, 1.0, 0.5], "n_steps": 2000, "estimators": ["gg", "fd"]},
    "lq_bench": {"n_samples": 400, "n_steps": 400, "estimators": ["gg", "pd"],
                 "randomize_reward_integral": True},
    "timing": {"n_steps": 400, "estimators": ["gg", "pd"], "randomize_reward_integral": True},
    "validate": {},
    "train_demo": {"n_samples": 64, "n_steps": 100, "randomize_reward_integral": True},
}


class ConfigError(ValueError):
    """Invalid configuration; the message names the offending field or line."""


@dataclass
class ExperimentConfig:
    experiment: str = "cir"
    theta: Optional[list] = None
    x0: Optional[list] = None
    horizon: Optional[float] = None
    widths: list = field(default_factory=lambda: [5, 20])
    n_grid: list = field(default_factory=lambda: [100, 10000, 100000])
    n_samples: int = 100000
    n_steps: int = 400
    master_seed: int = 0
    fd_h: float = 0.05
    estimators: list = field(default_factory=lambda: ["gg", "fd"])
    randomize_reward_integral: bool = False
    output_dir: str = "results"
    workers: int = 1
    batch_size: int = 1
    timing_batches: int = 5
    train_steps: int = 10
    learning_rate: float = 0.05

    def __post_init__(self):
        if self.experiment not in EXPERIMENTS:
            raise ConfigError(f"experiment: must be one of {', '.join(EXPERIMENTS)}, got {self.experiment!r}")
        if self.theta is not None and not isinstance(self.theta, list):
            self.theta = [self.theta]
        if self.x0 is not None and not isinstance(self.x0, list):
            self.x0 = [self.x0]
        if self.n_samples < 2:
            raise ConfigError("n_samples: must be at least 2")
        if self.n_steps < 1:
            raise ConfigError("n_steps: must be positive")
        if not self.fd_h > 0:
            raise ConfigError("fd_h: must be positive")
        if self.workers < 0:
            raise ConfigError("workers: must be non-negative (0 = all cores)")
        bad = [e for e in self.estimators if e not in ESTIMATORS]
        if bad:
            raise ConfigError(f"estimators: unknown entries {bad}")

    @classmethod
    def with_defaults(cls, experiment: str, **values) -> ExperimentConfig:
        """Per-experiment defaults, then ``values`` on top."""
        merged = dict(_DEFAULTS.get(experiment, {}))
        merged.update(values)
        return cls(experiment=experiment, **merged)

    def effective_workers(self) -> int:
        return self.workers if self.workers > 0 else (os.cpu_count() or 1)

    def semantic_dict(self) -> dict:
        d = dataclasses.asdict(self)
        for k in _NON_SEMANTIC:
            d.pop(k)
        return d

    def config_hash(self) -> str:
        blob = json.dumps(self.semantic_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


FIELDS = {f.name: f for f in dataclasses.fields(ExperimentConfig)}


def parse_config_text(text: str, source: str = "<config>") -> dict:
    """Parse a JSON config document into a field dict, with located diagnostics."""
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{source}:{exc.lineno}:{exc.colno}: {exc.msg}") from None
    if not isinstance(data, dict):
        raise ConfigError(f"{source}: top level must be an object")
    out = {}
    for key, value in data.items():
        name = key.replace("-", "_")
        if name not in FIELDS:
            raise ConfigError(f"{source}: unknown field {key!r}")
        out[name] = value
    return out


def load_config(path, overrides: Optional[dict] = None) -> ExperimentConfig:
    """Read a JSON config file and apply command-line overrides."""
    values = {}
    if path is not None:
        values = parse_config_text(Path(path).read_text(), str(path))
    values.update({k: v for k, v in (overrides or {}).items() if v is not None})
    experiment = values.pop("experiment", "cir")
    try:
        return ExperimentConfig.with_defaults(experiment, **values)
    except TypeError as exc:
        raise ConfigError(str(exc)) from None


# ---------------------------------------------------------------------------
# CSV writing


class CsvArtifact:
    """A CSV file with provenance comments, flushed row by row."""

    def __init__(self, path: Path, columns, cfg: ExperimentConfig):
        self.path = path
        self.fh = open(path, "w", newline="")
        self.fh.write(f"#config-hash: {cfg.config_hash()}\n")
        self.fh.write(f"#seed: {cfg.master_seed}\n")
        self.fh.write(f"#version: {__version__}\n")
        self.fh.write(",".join(columns) + "\n")
        self.fh.flush()

    def row(self, *values) -> None:
        self.fh.write(",".join(_fmt(v) for v in values) + "\n")
        self.fh.flush()

    def write_block(self, text: str) -> None:
        """Append pre-formatted CSV body lines (header line dropped)."""
        lines = text.splitlines()[1:]
        self.fh.write("".join(line + "\n" for line in lines))
        self.fh.flush()

    def close(self) -> None:
        self.fh.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def _fmt(v) -> str:
    if isinstance(v, (bool, np.bool_)):
        return "1" if v else "0"
    if isinstance(v, (float, np.floating)):
        return "" if not np.isfinite(v) else repr(float(v))
    return str(v)


def _csv(cfg, name, columns):
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    return CsvArtifact(out / name, columns, cfg)


def _write_json(cfg, name, payload) -> None:
    payload = {"config": dataclasses.asdict(cfg), "config_hash": cfg.config_hash(),
               "version": __version__, **payload}
    (Path(cfg.output_dir) / name).write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")


# ---------------------------------------------------------------------------
# experiments


def _scalar_model(cfg, name, theta):
    kw = {"theta": float(theta)}
    if cfg.x0 is not None:
        kw["x0"] = float(cfg.x0[0])
    if cfg.horizon is not None:
        kw["horizon"] = float(cfg.horizon)
    return zoo.zoo_model(name, **kw)


def _theta_sweep(cfg: ExperimentConfig, name: str) -> int:
    sim = SimConfig(n_steps=cfg.n_steps, master_seed=cfg.master_seed)
    workers = cfg.effective_workers()
    thetas = cfg.theta or _DEFAULTS[name]["theta"]
    mirror = []
    with _csv(cfg, f"{name}.csv", ["theta", "estimator", "mean", "se", "ci95", "n_samples", "h"]) as out:
        for th in thetas:
            if name == "cir" and th < 0.5:
                log.warning("CIR theta=%g is below 1/2: paths can reach 0 and the GG variance "
                            "grows sharply; read the SE column before the mean", th)
            model = _scalar_model(cfg, name, th)
            for kind in cfg.estimators:
                if kind == "pd":
                    log.info("skipping pd for %s: its coefficients are not differentiable", name)
                    continue
                opts = {"h": cfg.fd_h} if kind == "fd" else {}
                e = est.estimate(kind.upper(), model, None, sim, cfg.n_samples, workers=workers, **opts)
                h = cfg.fd_h if kind == "fd" else float("nan")
                out.row(th, kind.upper(), e.mean[0], e.se[0], e.ci95_halfwidth[0], e.n_samples, h)
                log.info("%s theta=%g %s: %.5f +- %.5f (%.1fs)", name, th, kind.upper(),
                         e.mean[0], e.ci95_halfwidth[0], e.wall_seconds)
                mirror.append({"theta": th, **e.to_dict()})
    _write_json(cfg, f"{name}.json", {"rows": mirror})
    return 0


def lq_model(width: int, seed: int = 0, horizon: Optional[float] = None, x0=None):
    spec = zoo.default_lq(hidden_width=width, init_seed=seed)
    if horizon is not None:
        spec.horizon = float(horizon)
    if x0 is not None:
        spec.x0 = np.asarray(x0, dtype=float)
    return zoo.build_lq(spec)


def _lq_bench(cfg: ExperimentConfig) -> int:
    sim = SimConfig(n_steps=cfg.n_steps, master_seed=cfg.master_seed)
    workers = cfg.effective_workers()
    gg_opts = {"reward_mode": "shared" if cfg.randomize_reward_integral else "grid"}
    pd_opts = {"randomize_time": cfg.randomize_reward_integral}
    mirror = []
    with _csv(cfg, "lq_table.csv", ["n", "width", "avg_se_gg", "avg_se_pd", "avg_ratio",
                                    "agree_fraction", "missing"]) as table:
        for w in cfg.widths:
            model = lq_model(int(w), cfg.master_seed, cfg.horizon, cfg.x0)
            n = model.dim_param
            g = est.run_samples("GG", model, None, sim, cfg.n_samples, workers=workers, **gg_opts)
            p = est.run_samples("PD", model, None, sim, cfg.n_samples, workers=workers, **pd_opts)
            eg, ep = est.mc_aggregate(g), est.mc_aggregate(p)
            rep = est.se_comparison(eg, ep)
            z = np.abs(eg.mean - ep.mean) / np.sqrt(eg.se ** 2 + ep.se ** 2)
            agree = z <= 3.0
            table.row(n, w, rep.avg_se_gg, rep.avg_se_pd, rep.avg_ratio, float(agree.mean()), len(rep.missing))
            with _csv(cfg, f"lq_coords_n{n}.csv", ["coord", "mean_gg", "se_gg", "mean_pd", "se_pd",
                                                   "z", "agree"]) as coords:
                for k in range(n):
                    coords.row(k, eg.mean[k], eg.se[k], ep.mean[k], ep.se[k], z[k], bool(agree[k]))
            buf = io.StringIO()
            rep.to_csv(buf)
            with _csv(cfg, f"se_ratio_n{n}.csv", ["coord", "se_gg", "se_pd", "ratio"]) as f:
                f.write_block(buf.getvalue())
            buf = io.StringIO()
            rep.histogram_csv(buf)
            with _csv(cfg, f"se_hist_n{n}.csv", ["bin_lo", "bin_hi", "count_gg", "count_pd"]) as f:
                f.write_block(buf.getvalue())
            log.info("lq n=%d: avg SE GG %.4g PD %.4g ratio %.3f agree %.3f",
                     n, rep.avg_se_gg, rep.avg_se_pd, rep.avg_ratio, agree.mean())
            mirror.append({"n": n, "width": w, "avg_se_gg": rep.avg_se_gg, "avg_se_pd": rep.avg_se_pd,
                           "avg_ratio": rep.avg_ratio, "agree_fraction": float(agree.mean()),
                           "gg": eg.to_dict(), "pd": ep.to_dict()})
    _write_json(cfg, "lq_table.json", {"rows": mirror})
    return 0


@dataclass
class TimingRecord:
    estimator_kind: str
    n_param: int
    seconds_per_sample: float
    batch_size: int

    def __post_init__(self):
        if not self.seconds_per_sample > 0:
            raise ValueError("seconds_per_sample must be positive")


def time_estimator(kind: str, model, sim: SimConfig, batch_size: int = 1, batches: int = 5,
                   randomize: bool = True) -> TimingRecord:
    """Median over ``batches`` timed batches, after one untimed warm-up batch."""
    if kind == "GG":
        def draw(r):
            est.gg_sample(model, None, sim, r, reward_mode="shared" if randomize else "grid")
    else:
        def draw(r):
            est.pd_sample(model, None, sim, r, randomize_time=randomize)
    times = []
    for b in range(batches + 1):
        stream = RngStream.for_range(sim.master_seed, b * batch_size, (b + 1) * batch_size)
        t0 = time.perf_counter()
        draw(stream)
        if b:
            times.append(time.perf_counter() - t0)
    return TimingRecord(kind, model.dim_param, float(np.median(times)) / batch_size, batch_size)


def timing_sweep(n_grid, estimators=("GG", "PD"), n_steps: int = 400, batch_size: int = 1,
                 batches: int = 5, seed: int = 0, randomize: bool = True):
    """TimingRecords over a grid of target parameter counts (equal hidden widths)."""
    sim = SimConfig(n_steps=n_steps, master_seed=seed)
    records = []
    for target in n_grid:
        width = nn.equal_width_spec(int(target), 4, 2).hidden_widths[0]
        model = lq_model(width, seed)
        for kind in estimators:
            records.append(time_estimator(kind, model, sim, batch_size, batches, randomize))
            log.info("timing n=%d %s: %.4g s/sample", model.dim_param, kind, records[-1].seconds_per_sample)
    return records


def _timing(cfg: ExperimentConfig) -> int:
    kinds = [k.upper() for k in cfg.estimators if k in ("gg", "pd")]
    with _csv(cfg, "timing.csv", ["estimator_kind", "n_param", "seconds_per_sample", "batch_size"]) as out:
        recs = timing_sweep(cfg.n_grid, kinds, cfg.n_steps, cfg.batch_size, cfg.timing_batches,
                            cfg.master_seed, cfg.randomize_reward_integral)
        for r in recs:
            out.row(r.estimator_kind, r.n_param, r.seconds_per_sample, r.batch_size)
    _write_json(cfg, "timing.json", {"rows": [dataclasses.asdict(r) for r in recs]})
    return 0


# ---------------------------------------------------------------------------
# validation


def oracle_suite(seed: int = 0, n_samples: int = 10000):
    """Quick closed-form checks: ``(name, value, target, se, passed)`` rows."""
    sim = SimConfig(n_steps=200, master_seed=seed)
    rows = []

    def add(name, value, target, se, k=3.0):
        rows.append((name, float(value), float(target), float(se), bool(abs(value - target) <= k * se + 1e-12)))

    gbm = zoo.build_gbm()
    target = np.exp(0.05)
    for kind in ("GG", "PD"):
        e = est.estimate(kind, gbm, None, sim, n_samples)
        add(f"gbm.{kind.lower()}_gradient", e.mean[0], target, e.se[0])
    vol = zoo.build_gbm_vol_param()
    ev = np.exp(2 * vol.theta[0] + vol.theta[1] ** 2)
    e = est.estimate("GG", vol, None, sim, n_samples)
    add("gbm_vol.gg_gradient[0]", e.mean[0], 2 * ev, e.se[0])
    add("gbm_vol.gg_gradient[1]", e.mean[1], 2 * vol.theta[1] * ev, e.se[1])
    cir = zoo.zoo_model("cir", theta=4.0)
    m, s = est.value_estimate(cir, None, sim, n_samples)
    add("cir.value", m, zoo.cir_value_exact(4.0, 0.1), s)
    jt = zoo.build_jump_test()
    e = est.estimate("GG", jt, None, sim, n_samples)
    add("jump_test.gg_gradient", e.mean[0], zoo.jump_test_gradient_exact(), e.se[0])
    # at t = T the space-derivative functional is the terminal gradient exactly
    zt = est.sample_Z_H(gbm, gbm.horizon, np.array([[1.3]]), sim, RngStream.for_range(seed, 0, 1), need_h=True)
    add("z_at_horizon", zt.z[0, 0], 1.0, 0.0)
    return rows


def _validate(cfg: ExperimentConfig) -> int:
    failed = False
    with _csv(cfg, "validate.csv", ["check", "status", "value", "target", "tolerance"]) as out:
        for name in zoo.ZOO_NAMES:
            report = validate_model(zoo.zoo_model(name), rng_seed=cfg.master_seed, rtol=1e-4)
            for c in report.checks:
                out.row(f"{name}.{c.name}", "PASS" if c.passed else "FAIL", c.max_rel, 0.0, report.rtol)
                failed |= not c.passed
            for s in report.skipped:
                out.row(f"{name}.{s}", "SKIP", float("nan"), float("nan"), float("nan"))
        for name, value, target, se, ok in oracle_suite(cfg.master_seed):
            out.row(name, "PASS" if ok else "FAIL", value, target, 3 * se)
            failed |= not ok
    log.info("validation %s", "FAILED" if failed else "passed")
    return 2 if failed else 0


# ---------------------------------------------------------------------------
# training demo


def _train_demo(cfg: ExperimentConfig) -> int:
    width = int(cfg.widths[0])
    spec = zoo.default_lq(hidden_width=width, init_seed=cfg.master_seed)
    theta = spec.theta.copy()
    mode = "shared" if cfg.randomize_reward_integral else "grid"
    with _csv(cfg, "train.csv", ["step", "loss", "loss_se", "grad_norm"]) as out:
        for k in range(cfg.train_steps + 1):
            spec.theta = theta
            model = zoo.build_lq(spec)
            sim = SimConfig(n_steps=cfg.n_steps, master_seed=cfg.master_seed + k)
            loss, loss_se = est.value_estimate(model, None, sim, cfg.n_samples)
            if k == cfg.train_steps:
                out.row(k, loss, loss_se, float("nan"))
                break
            g = est.mc_aggregate(est.run_samples("GG", model, None, sim, cfg.n_samples, reward_mode=mode)).mean
            out.row(k, loss, loss_se, float(np.linalg.norm(g)))
            log.info("step %d: loss %.4f +- %.4f", k, loss, loss_se)
            theta = theta - cfg.learning_rate * g
    return 0


_RUNNERS = {
    "cir": lambda c: _theta_sweep(c, "cir"),
    "relu": lambda c: _theta_sweep(c, "relu"),
    "lq_bench": _lq_bench,
    "timing": _timing,
    "validate": _validate,
    "train_demo": _train_demo,
}


def run_experiment(cfg: ExperimentConfig) -> int:
    """Run one experiment; returns the process exit status (0 ok, 2 validation failure)."""
    Path(cfg.output_dir).mkdir(parents=True, exist_ok=True)
    return _RUNNERS[cfg.experiment](cfg)
