"""Command-line entry point: ``mvslowfast <command> [--config FILE] ...``."""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import experiments as ex
from .errors import ConfigError, MVError

STUDIES = {
    "strong-rate": ex.strong_rate_study,
    "clt-rate": ex.clt_weak_rate_study,
    "fluctuation": ex.fluctuation_study,
    "moments": ex.moment_uniformity_study,
}

SINGLE = ("simulate", "frozen-invariant", "hbar", "poisson-check", "clt-sim")


def _parser() -> argparse.ArgumentParser:
    keys = "\n".join(f"  {k:<15} {v}" for k, v in ex.HELP.items())
    p = argparse.ArgumentParser(
        prog="mvslowfast",
        description="Slow-fast McKean-Vlasov particle simulator and rate studies.",
        epilog="run-file keys (YAML or JSON):\n" + keys,
        formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = p.add_subparsers(dest="command", required=True)
    for name in SINGLE + tuple(STUDIES):
        s = sub.add_parser(name)
        s.add_argument("--config", help="YAML or JSON run file")
        s.add_argument("--seed", type=int, help="override the master seed")
        s.add_argument("--out", help="output directory")
        s.add_argument("--threads", type=int, help="worker processes for replicas")
        s.add_argument("--json", action="store_true", help="print the result as JSON")
    return p


def _load(args) -> ex.RunConfig:
    overrides = {k: getattr(args, k) for k in ("seed", "out", "threads")
                 if getattr(args, k) is not None}
    ladder = 4 if args.command in STUDIES else 1
    if args.config:
        return ex.run_config_parse(args.config, overrides, min_ladder=ladder)
    return ex.RunConfig.from_dict(overrides, min_ladder=ladder)


def _emit(result: dict, args, out: Path | None, name: str) -> None:
    text = json.dumps(ex._jsonable(result), indent=2, sort_keys=True)
    if out is not None:
        ex.atomic_write(out / name, text)
    if args.json or out is None:
        print(text)


def _simulate(cfg, out):
    from .engine import simulate_system

    model = cfg.build_model()
    sc = cfg.sim_config(cfg.epsilons[0])
    init = cfg.initial_condition(model)
    summary = []
    for r in range(cfg.replicas):
        b = simulate_system(model, sc, init, replica=r)
        if out is not None:
            b.to_csv(out / "paths.csv", replica=r, append=r > 0)
        summary.append({"replica": r, "mean_XT": b.X[-1].mean(axis=0),
                        "second_moment_XT": np.mean(np.sum(b.X[-1] ** 2, axis=1))})
    return {"epsilon": sc.epsilon, "substeps": sc.substeps_for(model), "replicas": summary}


def _frozen_invariant(cfg, out):
    from .frozen import estimate_invariant

    model = cfg.build_model()
    inv = estimate_invariant(model, cfg.slow_law(), n_particles=int(cfg.frozen["n_particles"]),
                             n_samples=int(cfg.frozen["n_samples"]), seed=cfg.seed)
    if out is not None:
        np.savetxt(out / "eta.csv", inv.eta.atoms, delimiter=",", header="y", comments="")
    return {"moments": inv.moments, "stderr": inv.stderr, "rate": inv.rate,
            "burn_in": inv.burn_in, "thinning": inv.thinning, "dt": inv.dt,
            "n_atoms": inv.eta.atoms.shape[0]}


def _hbar(cfg, out):
    from .frozen import AveragedDrift

    model = cfg.build_model()
    mu = cfg.slow_law()
    ad = AveragedDrift(model, seed=cfg.seed, n_particles=int(cfg.frozen["n_particles"]),
                       n_samples=int(cfg.frozen["n_samples"]))
    x = np.asarray(cfg.x, dtype=float).reshape(-1, model.n)
    vals = ad(x, mu)
    return {"x": x, "hbar": vals}


def _poisson_check(cfg, out):
    from .frozen import AveragedDrift
    from .poisson import dy_psi, estimate_upsilon, generator_residual, solve_psi

    model = cfg.build_model()
    mu = cfg.slow_law()
    ad = AveragedDrift(model, seed=cfg.seed, n_particles=int(cfg.frozen["n_particles"]),
                       n_samples=int(cfg.frozen["n_samples"]))
    inv = ad.invariant(mu)
    x = np.asarray(cfg.x, dtype=float).reshape(model.n)
    ys = np.asarray(cfg.y, dtype=float).reshape(-1, model.m)
    rows = []
    for y in ys:
        psi = solve_psi(model, x, mu, y, inv.eta, inv, seed=cfg.seed, check_tail=False)
        dpsi = dy_psi(model, x, mu, y, inv.eta, inv, seed=cfg.seed, check_snr=False)
        res = {d: generator_residual(model, x, mu, y, inv.eta, inv, d, outer=64, replicas=200,
                                     seed=cfg.seed) for d in (1e-1, 3e-2)}
        rows.append({"y": y, "psi": psi.value, "psi_stderr": psi.stderr,
                     "tail_bound": psi.tail_bound, "dy_psi_gamma2": dpsi,
                     "residual": {f"{d:g}": r for d, r in res.items()}})
    ups = estimate_upsilon(model, x, mu, inv, seed=cfg.seed,
                           replicas=int(cfg.upsilon["replicas"]),
                           n_atoms=int(cfg.upsilon["n_atoms"]))
    return {"x": x, "points": rows, "upsilon": ups.matrix}


def _clt_sim(cfg, out):
    from .limit import LimitCoefficients, deviation_paths, simulate_averaged, simulate_limit_U
    from .engine import simulate_system

    model = cfg.build_model()
    init = cfg.initial_condition(model)
    table = ex.build_upsilon_table(cfg, model)
    eps = cfg.epsilons[0]
    rows = []
    for r in range(cfg.replicas):
        ad = cfg.averaged_drift(model, r)
        sc = cfg.sim_config(eps)
        xbar = simulate_averaged(model, sc, ad, init, replica=r)
        U = simulate_limit_U(model, sc, LimitCoefficients(model, ad, table), xbar, replica=r).X
        Ue = deviation_paths((simulate_system(model, sc, init, replica=r, store_fast=False),
                              xbar), eps).U
        rows.append({"replica": r, "U_eps_T": Ue[-1, :, 0], "U_T": U[-1, :, 0]})
    if out is not None:
        with open(out / "clt_samples.csv", "w") as fh:
            fh.write("replica,particle,U_eps_T,U_T\n")
            for row in rows:
                for i, (a, b) in enumerate(zip(row["U_eps_T"], row["U_T"])):
                    fh.write(f"{row['replica']},{i},{a!r},{b!r}\n")
    return {"epsilon": eps,
            "second_moment_U_eps": [float(np.mean(r["U_eps_T"] ** 2)) for r in rows],
            "second_moment_U": [float(np.mean(r["U_T"] ** 2)) for r in rows]}


HANDLERS = {"simulate": _simulate, "frozen-invariant": _frozen_invariant, "hbar": _hbar,
            "poisson-check": _poisson_check, "clt-sim": _clt_sim}


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    try:
        cfg = _load(args)
        out = Path(cfg.out) if cfg.out else None
        if out is not None:
            out.mkdir(parents=True, exist_ok=True)
        if args.command in STUDIES:
            rep = STUDIES[args.command](cfg)
            if out is not None:
                ex.write_outputs(rep, out)
            if args.json or out is None:
                print(json.dumps(rep.to_dict(), indent=2, sort_keys=True))
            else:
                print(f"{rep.study}: slope {rep.slope} status {rep.status} -> {out}")
            return 0 if rep.status in ("ok", "exact-averaging") else 3
        _emit(HANDLERS[args.command](cfg, out), args, out, f"{args.command}.json")
        return 0
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except MVError as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
