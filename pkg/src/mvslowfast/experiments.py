"""Rate studies over an epsilon ladder, run configuration and report output.

All studies use common random numbers across the ladder: within a replica the
slow start, the fast start and the slow noise are identical for every
epsilon, and the averaged path is computed once and reused.
"""

from __future__ import annotations

import csv
import io
import json
import math
import os
import tempfile
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np
import yaml

from .engine import InitialCondition, SimConfig, simulate_system
from .errors import ConfigError, MVError
from .frozen import AveragedDrift, centering_check
from .limit import LimitCoefficients, UpsilonTable, deviation_paths, simulate_averaged, simulate_limit_U
from .measure import EmpiricalMeasure
from .model import MODEL_REGISTRY, ModelSpec, make_model
from .stats import growth_trend, loglog_fit

SCHEMA_VERSION = 1

TEST_FUNCTIONS: dict[str, Callable] = {
    "tanh": np.tanh,
    "rational": lambda x: x / (1.0 + x**2),
    "cos": np.cos,
}

DEFAULTS = {
    "model": "example61",
    "params": {},
    "epsilons": [2.0**-j for j in range(4, 10)],
    "dt": 2.0**-6,
    "n_particles": 2000,
    "horizon": 1.0,
    "replicas": 16,
    "seed": 0,
    "fast_step": None,
    "substeps": None,
    "average_drift": True,
    "initial": {},
    "p": 2,
    "powers": [],
    "test_functions": ["tanh", "rational", "cos"],
    "g": "cos-term",
    "centering_tol": 1e-6,
    "frozen": {"n_particles": 1000, "n_samples": 20},
    "upsilon": {"every": 4, "n_nodes": 5, "replicas": 200, "n_atoms": 64},
    "mu": {"kind": "constant", "value": 0.0, "n": 1},
    "x": [0.0],
    "y": [0.0],
    "slope_band": None,
    "threads": 1,
    "out": None,
}

HELP = {
    "model": "registry name: " + ", ".join(sorted(MODEL_REGISTRY)),
    "params": "model parameter table (e.g. p, a, b, q, k, lambda, m, theta)",
    "epsilons": "timescale ratios in (0, 1); at least 4 distinct values",
    "dt": "macro step in slow time",
    "n_particles": "particles per cloud (>= 2)",
    "horizon": "final time T (multiple of dt)",
    "replicas": "independent Monte Carlo repetitions",
    "seed": "64-bit master seed",
    "fast_step": "fast-time micro step; default dt / max(epsilons)",
    "substeps": "micro steps per macro step (overrides fast_step)",
    "average_drift": "average h1 over micro steps (False: last micro state only)",
    "initial": "rho / xi samplers and y0, e.g. {xi: {kind: constant, value: 0}}",
    "p": "moment order of the strong error",
    "powers": "extra moment orders evaluated on the same paths",
    "test_functions": "weak-rate test functions: tanh, rational, cos",
    "g": "fluctuation functional: cos-term, h1 or zero",
    "centering_tol": "tolerance of the centering check",
    "frozen": "invariant-measure sampling: n_particles, n_samples",
    "upsilon": "diffusion table: every, n_nodes, replicas, n_atoms",
    "mu": "slow law for single-point commands (kind constant|gaussian, n atoms)",
    "x": "slow state for single-point commands",
    "y": "fast states for poisson-check",
    "slope_band": "optional [lo, hi] acceptance band recorded in the report",
    "threads": "worker processes for replicas",
    "out": "output directory",
}

_NESTED = {"frozen", "upsilon"}


def _key_lines(text: str) -> dict:
    """Map ``key`` and ``section.key`` to 1-based source lines."""
    lines = {}
    try:
        node = yaml.compose(text)
    except yaml.YAMLError:
        return lines
    if node is None or not isinstance(node, yaml.MappingNode):
        return lines
    for k, v in node.value:
        lines[k.value] = k.start_mark.line + 1
        if isinstance(v, yaml.MappingNode):
            for k2, _ in v.value:
                lines[f"{k.value}.{k2.value}"] = k2.start_mark.line + 1
    return lines


@dataclass
class RunConfig:
    model: str = DEFAULTS["model"]
    params: dict = field(default_factory=dict)
    epsilons: list = field(default_factory=lambda: list(DEFAULTS["epsilons"]))
    dt: float = DEFAULTS["dt"]
    n_particles: int = DEFAULTS["n_particles"]
    horizon: float = DEFAULTS["horizon"]
    replicas: int = DEFAULTS["replicas"]
    seed: int = DEFAULTS["seed"]
    fast_step: float | None = None
    substeps: int | None = None
    average_drift: bool = True
    initial: dict = field(default_factory=dict)
    p: float = 2
    powers: list = field(default_factory=list)
    test_functions: list = field(default_factory=lambda: list(DEFAULTS["test_functions"]))
    g: str = "cos-term"
    centering_tol: float = 1e-6
    frozen: dict = field(default_factory=lambda: dict(DEFAULTS["frozen"]))
    upsilon: dict = field(default_factory=lambda: dict(DEFAULTS["upsilon"]))
    mu: dict = field(default_factory=lambda: dict(DEFAULTS["mu"]))
    x: list = field(default_factory=lambda: list(DEFAULTS["x"]))
    y: list = field(default_factory=lambda: list(DEFAULTS["y"]))
    slope_band: list | None = None
    threads: int = 1
    out: str | None = None

    @classmethod
    def from_dict(cls, data: dict | None, lines: dict | None = None,
                  min_ladder: int = 4) -> "RunConfig":
        data = dict(data or {})
        lines = lines or {}

        def where(key):
            return f"line {lines[key]}: " if key in lines else ""

        unknown = [k for k in data if k not in DEFAULTS]
        if unknown:
            k = unknown[0]
            raise ConfigError(f"{where(k)}unknown key {k!r}")
        for sec in _NESTED:
            if sec in data:
                if not isinstance(data[sec], dict):
                    raise ConfigError(f"{where(sec)}{sec!r} must be a mapping")
                bad = [k for k in data[sec] if k not in DEFAULTS[sec]]
                if bad:
                    raise ConfigError(f"{where(sec + '.' + bad[0])}unknown key {sec}.{bad[0]!r}")
                data[sec] = {**DEFAULTS[sec], **data[sec]}
        if "model" in data and data["model"] not in MODEL_REGISTRY:
            raise ConfigError(f"{where('model')}unknown model {data['model']!r}")
        cfg = cls(**data)
        eps = [float(e) for e in cfg.epsilons]
        if any(not 0 < e < 1 for e in eps):
            raise ConfigError(f"{where('epsilons')}epsilon values must lie in (0, 1)")
        if len(set(eps)) != len(eps):
            raise ConfigError(f"{where('epsilons')}epsilon values must be distinct")
        if len(eps) < min_ladder:
            raise ConfigError(f"{where('epsilons')}ladder length >= {min_ladder} required")
        cfg.epsilons = sorted(eps, reverse=True)
        for name in cfg.test_functions:
            if name not in TEST_FUNCTIONS:
                raise ConfigError(f"{where('test_functions')}unknown test function {name!r}")
        if cfg.g not in ("cos-term", "h1", "zero"):
            raise ConfigError(f"{where('g')}unknown functional {cfg.g!r}")
        if cfg.replicas < 1 or cfg.n_particles < 2:
            raise ConfigError("need replicas >= 1 and n_particles >= 2")
        try:
            cfg.sim_config(cfg.epsilons[0])
        except ConfigError as exc:
            raise ConfigError(f"{where('dt')}{exc}") from None
        return cfg

    def to_dict(self) -> dict:
        return asdict(self)

    def build_model(self) -> ModelSpec:
        return make_model(self.model, self.params)

    def initial_condition(self, model: ModelSpec) -> InitialCondition:
        return InitialCondition.from_dict(model, self.initial)

    def sim_config(self, epsilon: float) -> SimConfig:
        fast = self.fast_step
        if fast is None and self.substeps is None:
            # one fixed fast step for the whole ladder keeps the Euler chain the same
            fast = self.dt / max(self.epsilons)
        return SimConfig(epsilon=epsilon, dt=self.dt, n_particles=self.n_particles,
                         horizon=self.horizon, seed=self.seed, substeps=self.substeps,
                         replicas=self.replicas, fast_step=fast,
                         average_drift=self.average_drift)

    def averaged_drift(self, model: ModelSpec, replica: int) -> AveragedDrift:
        sc = self.sim_config(self.epsilons[0])
        h_fast = sc.dt / (sc.epsilon * sc.substeps_for(model))
        return AveragedDrift(model, fast_step=h_fast, seed=self.seed * 100_003 + replica,
                             n_particles=int(self.frozen["n_particles"]),
                             n_samples=int(self.frozen["n_samples"]))

    def slow_law(self) -> EmpiricalMeasure:
        spec = dict(self.mu)
        kind = spec.get("kind", "constant")
        n = int(spec.get("n", 1))
        if kind == "constant":
            return EmpiricalMeasure(np.full(n, float(spec.get("value", 0.0))))
        if kind == "gaussian":
            from .streams import stream

            rng = stream(self.seed, 0, "rho", 99)
            return EmpiricalMeasure(spec.get("mean", 0.0) + spec.get("std", 1.0)
                                    * rng.standard_normal(n))
        raise ConfigError(f"unknown slow-law kind {kind!r}")


def run_config_parse(path, overrides: dict | None = None, min_ladder: int = 4) -> RunConfig:
    """Read a YAML or JSON run file; unknown keys are reported with their line."""
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file {path} does not exist")
    text = path.read_text()
    try:
        data = yaml.safe_load(text) or {}
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: {exc}") from None
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: top level must be a mapping")
    data.update(overrides or {})
    try:
        return RunConfig.from_dict(data, _key_lines(text), min_ladder=min_ladder)
    except TypeError as exc:
        raise ConfigError(f"{path}: {exc}") from None


# --------------------------------------------------------------------------
# reports


@dataclass
class RateReport:
    study: str
    ladder: list
    slope: float | None
    slope_ci: tuple | None
    r2: float | None
    replicas: int
    seeds: list
    wall_time: float
    config: dict
    status: str = "ok"
    flags: list = field(default_factory=list)
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        eps = [row["epsilon"] for row in self.ladder]
        if eps != sorted(eps, reverse=True):
            raise ValueError("ladder must be sorted by epsilon, descending")
        if self.slope is not None:
            if not math.isfinite(self.slope):
                raise ValueError("slope must be finite")
            lo, hi = self.slope_ci
            if not lo <= self.slope <= hi:
                raise ValueError("confidence interval must contain the slope")

    @property
    def errors(self) -> np.ndarray:
        return np.array([row["error"] for row in self.ladder])

    @property
    def stderrs(self) -> np.ndarray:
        return np.array([row["stderr"] for row in self.ladder])

    def to_dict(self) -> dict:
        d = asdict(self)
        d["schema_version"] = SCHEMA_VERSION
        return _jsonable(d)


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, (np.floating, float)):
        v = float(obj)
        return v if math.isfinite(v) else None
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, np.bool_):
        return bool(obj)
    return obj


def atomic_write(path, text: str) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "w") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


GNUPLOT = """set logscale xy
set xlabel "epsilon"
set ylabel "{ylabel}"
set key left top
f(x) = a * x**s
a = 1; s = {slope_guess}
fit f(x) "ladder.csv" using 1:2 every ::1 via a, s
plot "ladder.csv" using 1:2:3 every ::1 with yerrorbars title "{study}", f(x) title sprintf("slope %.3f", s)
"""


def write_outputs(report: RateReport, out_dir) -> Path:
    """``report.json``, ``ladder.csv`` and a gnuplot script, each written atomically."""
    out = Path(out_dir)
    atomic_write(out / "report.json", json.dumps(report.to_dict(), indent=2, sort_keys=True))
    buf = io.StringIO()
    w = csv.writer(buf)
    w.writerow(["epsilon", "error", "stderr", "replicas"])
    for row in report.ladder:
        w.writerow([repr(float(row["epsilon"])), repr(float(row["error"])),
                    repr(float(row["stderr"])), int(row.get("replicas", report.replicas))])
    atomic_write(out / "ladder.csv", buf.getvalue())
    guess = report.slope if report.slope is not None else 1.0
    atomic_write(out / "plot.gp", GNUPLOT.format(ylabel=report.study, study=report.study,
                                                 slope_guess=f"{guess:.3f}"))
    return out


def _map_replicas(fn, cfg: RunConfig, extra=None):
    args = [(cfg.to_dict(), r, extra) for r in range(cfg.replicas)]
    if cfg.threads <= 1 or cfg.replicas == 1:
        return [fn(*a) for a in args]
    with ProcessPoolExecutor(max_workers=cfg.threads) as pool:
        return list(pool.map(fn, *zip(*args)))


def _fit_ladder(eps, err, se):
    ok = np.asarray(err) > 0
    if ok.sum() < 2:
        return None
    return loglog_fit(np.asarray(eps)[ok], np.asarray(err)[ok])


def _noise_dominated(err, se):
    gaps = np.abs(np.diff(err))
    return bool(len(gaps) and np.max(se) > 0.5 * np.min(gaps))


def _ladder_rows(eps, err, se, R, **cols):
    rows = []
    for i, e in enumerate(eps):
        row = {"epsilon": float(e), "error": float(err[i]), "stderr": float(se[i]), "replicas": R}
        for name, vals in cols.items():
            row[name] = float(vals[i])
        rows.append(row)
    return rows


def _cfg(d):
    return RunConfig.from_dict(d, min_ladder=1)


# --------------------------------------------------------------------------
# strong rate


def _strong_worker(cfg_dict, r, _extra=None):
    cfg = _cfg(cfg_dict)
    model = cfg.build_model()
    init = cfg.initial_condition(model)
    ad = cfg.averaged_drift(model, r)
    xbar = simulate_averaged(model, cfg.sim_config(cfg.epsilons[0]), ad, init, replica=r)
    powers = [cfg.p] + [q for q in cfg.powers if q != cfg.p]
    out = np.empty((len(cfg.epsilons), len(powers)))
    sup_abs = np.empty(len(cfg.epsilons))
    for i, eps in enumerate(cfg.epsilons):
        b = simulate_system(model, cfg.sim_config(eps), init, replica=r, store_fast=False)
        d = np.linalg.norm(b.X - xbar.X, axis=2)
        sup = d.max(axis=0)  # per particle sup over the macro grid
        sup_abs[i] = sup.max()
        for j, q in enumerate(powers):
            out[i, j] = np.mean(sup**q)
    return out, sup_abs


def strong_rate_study(cfg: RunConfig) -> RateReport:
    """``E sup_t |X^eps - Xbar|^p`` across the ladder and its log-log slope (expected p/2)."""
    t0 = time.time()
    res = _map_replicas(_strong_worker, cfg)
    vals = np.array([r[0] for r in res])  # (R, L, P)
    sup_abs = np.array([r[1] for r in res])
    R = vals.shape[0]
    err = vals.mean(axis=0)
    se = vals.std(axis=0, ddof=1) / math.sqrt(R) if R > 1 else np.zeros_like(err)
    eps = np.array(cfg.epsilons)
    powers = [cfg.p] + [q for q in cfg.powers if q != cfg.p]
    flags, extra = [], {"powers": powers, "max_abs_error": sup_abs.max(axis=0).tolist()}
    rows = _ladder_rows(eps, err[:, 0], se[:, 0], R)
    if sup_abs.max() <= 1e-12:
        return RateReport("strong-rate", rows, None, None, None, R, [cfg.seed], time.time() - t0,
                          cfg.to_dict(), status="exact-averaging", extra=extra)
    fits = {q: _fit_ladder(eps, err[:, j], se[:, j]) for j, q in enumerate(powers)}
    extra["slopes"] = {str(q): (f.slope if f else None) for q, f in fits.items()}
    extra["expected_slope"] = cfg.p / 2
    fit = fits[cfg.p]
    if fit is None:
        raise MVError("slope fit underdetermined: fewer than two positive errors")
    status = "ok"
    if _noise_dominated(err[:, 0], se[:, 0]):
        status = "noise-dominated"
        flags.append("noise-dominated")
    if cfg.slope_band:
        extra["in_band"] = bool(cfg.slope_band[0] <= fit.slope <= cfg.slope_band[1])
    return RateReport("strong-rate", rows, fit.slope, fit.ci, fit.r2, R, [cfg.seed],
                      time.time() - t0, cfg.to_dict(), status=status, flags=flags, extra=extra)


# --------------------------------------------------------------------------
# CLT weak rate


def weak_gap(Ue: np.ndarray, U: np.ndarray, phi: Callable) -> float:
    """``max_t |mean phi(Ue_t) - mean phi(U_t)|`` for clouds ``(K+1, N, n)``."""
    a = phi(Ue[..., 0]).mean(axis=1)
    b = phi(U[..., 0]).mean(axis=1)
    return float(np.max(np.abs(a - b)))


def _clt_worker(cfg_dict, r, table):
    cfg = _cfg(cfg_dict)
    model = cfg.build_model()
    init = cfg.initial_condition(model)
    ad = cfg.averaged_drift(model, r)
    sc0 = cfg.sim_config(cfg.epsilons[0])
    xbar = simulate_averaged(model, sc0, ad, init, replica=r)
    coeffs = LimitCoefficients(model=model, hbar=ad, upsilon=table)
    U = simulate_limit_U(model, sc0, coeffs, xbar, replica=r).X
    names = cfg.test_functions
    psi_u = np.array([TEST_FUNCTIONS[f](U[..., 0]).mean(axis=1) for f in names])
    psi_e = np.empty((len(cfg.epsilons),) + psi_u.shape)
    m2 = np.empty((len(cfg.epsilons), 2))
    for i, eps in enumerate(cfg.epsilons):
        b = simulate_system(model, cfg.sim_config(eps), init, replica=r, store_fast=False)
        Ue = deviation_paths((b, xbar), eps).U
        psi_e[i] = [TEST_FUNCTIONS[f](Ue[..., 0]).mean(axis=1) for f in names]
        m2[i] = [np.mean(Ue[-1] ** 2), np.mean(U[-1] ** 2)]
    return psi_e, psi_u, m2


def build_upsilon_table(cfg: RunConfig, model: ModelSpec | None = None) -> UpsilonTable:
    """Diffusion table along replica 0's averaged path, shared by all replicas."""
    model = model or cfg.build_model()
    init = cfg.initial_condition(model)
    ad = cfg.averaged_drift(model, 0)
    xbar = simulate_averaged(model, cfg.sim_config(cfg.epsilons[0]), ad, init, replica=0)
    opts = dict(cfg.upsilon)
    every, nodes = int(opts.pop("every")), int(opts.pop("n_nodes"))
    return UpsilonTable(model, ad, xbar, every=every, n_nodes=nodes, seed=cfg.seed, **opts)


def clt_weak_rate_study(cfg: RunConfig, table: UpsilonTable | None = None) -> RateReport:
    """``max_t |psi(law U^eps_t) - psi(law U_t)|`` for ``psi = int phi``; expected slope 1/2.

    The headline ladder is the first test function; every function's ladder,
    slope and monotonicity flag are in ``extra``.
    """
    t0 = time.time()
    table = table or build_upsilon_table(cfg)
    res = _map_replicas(_clt_worker, cfg, table)
    diff = np.array([r[0] - r[1][None] for r in res])  # (R, L, F, K+1)
    m2 = np.array([r[2] for r in res]).mean(axis=0)
    R = diff.shape[0]
    mean = diff.mean(axis=0)
    eps = np.array(cfg.epsilons)
    per_fn = {}
    for j, name in enumerate(cfg.test_functions):
        gaps = np.abs(mean[:, j])  # (L, K+1)
        arg = gaps.argmax(axis=1)
        delta = gaps[np.arange(len(eps)), arg]
        se = (diff[:, np.arange(len(eps)), j, arg].std(axis=0, ddof=1) / math.sqrt(R)
              if R > 1 else np.zeros(len(eps)))
        fit = _fit_ladder(eps, delta, se)
        # smaller epsilon must not be worse beyond the combined standard error
        mono = bool(all(delta[i + 1] <= delta[i] + math.hypot(se[i], se[i + 1])
                        for i in range(len(eps) - 1)))
        per_fn[name] = {
            "delta": delta.tolist(), "stderr": se.tolist(),
            "slope": fit.slope if fit else None, "slope_ci": fit.ci if fit else None,
            "r2": fit.r2 if fit else None, "monotone": mono,
        }
    head = per_fn[cfg.test_functions[0]]
    rows = _ladder_rows(eps, head["delta"], head["stderr"], R,
                        second_moment_Ueps=m2[:, 0], second_moment_U=m2[:, 1])
    extra = {"functions": per_fn, "expected_slope": 0.5}
    status = "ok" if head["slope"] is not None else "exact"
    if head["slope"] is None:
        return RateReport("clt-rate", rows, None, None, None, R, [cfg.seed], time.time() - t0,
                          cfg.to_dict(), status=status, extra=extra)
    flags = ["noise-dominated"] if _noise_dominated(np.array(head["delta"]),
                                                   np.array(head["stderr"])) else []
    return RateReport("clt-rate", rows, head["slope"], tuple(head["slope_ci"]), head["r2"], R,
                      [cfg.seed], time.time() - t0, cfg.to_dict(), status=status, flags=flags,
                      extra=extra)


# --------------------------------------------------------------------------
# fluctuation estimate


def _centered_functional(cfg: RunConfig, model: ModelSpec, ad: AveragedDrift):
    """``g(X, mu, y, nu)`` per particle, centred under the invariant measure of ``mu``."""
    if cfg.g == "zero":
        return lambda X, mu, Y, nu: np.zeros((X.shape[0], 1)), lambda y: np.zeros(len(y))
    if cfg.g == "cos-term":
        b = float(model.params.get("b", 1.0))

        def raw(y):
            return np.cos(b * y[:, 0])

        def g(X, mu, Y, nu):
            c = ad.invariant(mu).eta.expect(lambda a: np.cos(b * a[:, 0]))
            return (raw(Y) - c)[:, None]

        return g, raw

    def g(X, mu, Y, nu):
        return model.h1(X, mu, Y, nu) - ad(X, mu)

    return g, None


def _fluct_worker(cfg_dict, r, _extra=None):
    cfg = _cfg(cfg_dict)
    model = cfg.build_model()
    init = cfg.initial_condition(model)
    ad = cfg.averaged_drift(model, r)
    g, _ = _centered_functional(cfg, model, ad)
    out = np.empty(len(cfg.epsilons))
    for i, eps in enumerate(cfg.epsilons):
        sc = cfg.sim_config(eps)
        b = simulate_system(model, sc, init, replica=r, store_fast=False, observer=g)
        # micro-averaged g per macro step -> time integral per particle
        integral = b.micro.sum(axis=0) * sc.dt
        out[i] = float(np.mean(integral[:, 0]))
    return out


def fluctuation_study(cfg: RunConfig) -> RateReport:
    """``|E int_0^T g ds|`` for a centred functional of the fast path; expected slope >= 1/2."""
    t0 = time.time()
    model = cfg.build_model()
    ad = cfg.averaged_drift(model, 0)
    g, raw = _centered_functional(cfg, model, ad)
    if raw is not None:
        init = cfg.initial_condition(model)
        from .streams import ReplicaStreams

        X0, _, _ = init.draw(model, cfg.n_particles, ReplicaStreams(cfg.seed, 0))
        mu0 = EmpiricalMeasure(X0)
        inv = ad.invariant(mu0)
        c = inv.eta.expect(raw)
        resid = centering_check(model, X0[0], mu0, inv, g=lambda y: raw(y) - c)
        if resid > cfg.centering_tol:
            raise MVError(f"functional fails the centering check: residual {resid:.3g}")
    vals = np.array(_map_replicas(_fluct_worker, cfg))  # (R, L)
    R = vals.shape[0]
    mean = vals.mean(axis=0)
    se = vals.std(axis=0, ddof=1) / math.sqrt(R) if R > 1 else np.zeros_like(mean)
    err = np.abs(mean)
    eps = np.array(cfg.epsilons)
    rows = _ladder_rows(eps, err, se, R, signed=mean)
    if np.all(err == 0):
        return RateReport("fluctuation", rows, None, None, None, R, [cfg.seed], time.time() - t0,
                          cfg.to_dict(), status="zero", extra={"expected_slope": 0.5})
    fit = _fit_ladder(eps, err, se)
    flags = ["noise-dominated"] if _noise_dominated(err, se) else []
    return RateReport("fluctuation", rows, fit.slope, fit.ci, fit.r2, R, [cfg.seed],
                      time.time() - t0, cfg.to_dict(), flags=flags,
                      extra={"expected_slope": 0.5})


# --------------------------------------------------------------------------
# moment uniformity


def _moment_worker(cfg_dict, r, _extra=None):
    cfg = _cfg(cfg_dict)
    model = cfg.build_model()
    init = cfg.initial_condition(model)
    out = np.empty((len(cfg.epsilons), 4))
    for i, eps in enumerate(cfg.epsilons):
        peak = {}

        def track(X, mu, Y, nu):
            sq = np.sum(nu.atoms**2, axis=1)
            peak["v"] = np.maximum(peak.get("v", sq), sq)
            return np.zeros((X.shape[0], 1))

        b = simulate_system(model, cfg.sim_config(eps), init, replica=r, observer=track)
        final = np.sum(b.Yxi[-1] ** 2, axis=1)
        fast_sup = np.maximum(peak.get("v", final), final)
        out[i] = [np.mean(np.max(np.sum(b.X**2, axis=2), axis=0)),   # E sup_t |X|^2
                  np.max(np.mean(np.sum(b.Yxi**2, axis=2), axis=1)),  # sup_t E|Yxi|^2
                  np.max(np.mean(np.sum(b.Yy0**2, axis=2), axis=1)),  # sup_t E|Yy0|^2
                  np.mean(fast_sup)]                                  # E sup_t |Yxi|^2
    return out


MOMENT_COLUMNS = ["sup_x2", "pointwise_yxi2", "pointwise_yy02", "sup_yxi2"]


def moment_uniformity_study(cfg: RunConfig, strict: bool = False) -> RateReport:
    """Moment statistics across the ladder with Kendall trend tests.

    Headline ``error`` column is ``E sup_t |X^eps|^2``; the reported slope is the
    growth exponent of ``E sup_t |Y^xi|^2`` against ``1/eps`` (allowed up to 1).
    """
    t0 = time.time()
    vals = np.array(_map_replicas(_moment_worker, cfg))  # (R, L, 4)
    R = vals.shape[0]
    mean = vals.mean(axis=0)
    se = vals.std(axis=0, ddof=1) / math.sqrt(R) if R > 1 else np.zeros_like(mean)
    eps = np.array(cfg.epsilons)
    trends = {}
    for j, name in enumerate(MOMENT_COLUMNS[:3]):
        tau, p, sig = growth_trend(eps, mean[:, j])
        trends[name] = {"tau": tau, "p_value": p, "significant": sig}
    growth = loglog_fit(1.0 / eps, mean[:, 3])
    offending = [k for k, v in trends.items() if v["significant"] and k != "pointwise_yy02"]
    passed = not offending and growth.ci[0] <= 1.0
    rows = _ladder_rows(eps, mean[:, 0], se[:, 0], R,
                        **{name: mean[:, j] for j, name in enumerate(MOMENT_COLUMNS)})
    status = "ok" if passed else "trend-detected: " + ", ".join(offending or ["sup_yxi2 growth"])
    rep = RateReport("moments", rows, growth.slope, growth.ci, growth.r2, R, [cfg.seed],
                     time.time() - t0, cfg.to_dict(), status=status,
                     extra={"trends": trends, "passed": passed,
                            "stderr": {n: se[:, j].tolist() for j, n in enumerate(MOMENT_COLUMNS)}})
    if strict and not passed:
        raise MVError(rep.status)
    return rep
