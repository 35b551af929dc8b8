"""Command-line entry point: ``mfdwave {generate-mesh,run,study,lemma-checks}``."""
from __future__ import annotations

import argparse
import json
import logging
import math
import sys
from dataclasses import replace
from pathlib import Path

from .harness import (
    ConfigError,
    ExperimentConfig,
    build_mesh,
    h_study,
    lemma_rate_checks,
    run_experiment,
    tau_study,
)
from .integrator import RunError
from .mesh import MeshError, save_mesh

log = logging.getLogger("mfdwave")

SLOPE_WINDOW = 0.3


def _floats(text):
    try:
        return [float(s) for s in text.split(",") if s.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def _base_config(args):
    cfg = ExperimentConfig.from_json(args.config) if args.config else ExperimentConfig()
    updates = {}
    if args.test is not None:
        updates["test"] = f"test{args.test}"
    if args.tau is not None:
        updates["tau"] = args.tau
    if args.T is not None:
        updates["T"] = args.T
    if args.seed is not None:
        updates["mesh"] = {**cfg.mesh, "rng_seed": args.seed}
    return replace(cfg, **updates) if updates else cfg


def _out(args):
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def cmd_generate_mesh(args):
    out = _out(args)
    hs = args.h_targets or [_base_config(args).mesh.get("h", 0.1)]
    seed = 0 if args.seed is None else args.seed
    for h in hs:
        mesh = build_mesh({"h": h, "lloyd_iters": args.lloyd_iters, "rng_seed": seed})
        path = out / f"mesh_h{h:g}_seed{seed}.json"
        save_mesh(mesh, path)
        print(f"{path}: {mesh.n_cells} cells, h = {mesh.h:.4g}")
    return 0


def cmd_run(args):
    cfg = _base_config(args)
    if args.h_targets:
        cfg = replace(cfg, mesh={**cfg.mesh, "h": args.h_targets[0]})
    out = _out(args)
    row = run_experiment(cfg, series_path=out / "series.csv")
    row.pop("_result")
    (out / "run.json").write_text(json.dumps({"config": cfg.to_dict(), "metrics": row}, indent=2))
    print(json.dumps(row))
    return 0


def _check_slope(name, value, target):
    ok = value is not None and abs(value - target) <= SLOPE_WINDOW
    print(f"{'PASS' if ok else 'FAIL'}: {name} slope {value} (expected {target} +/- {SLOPE_WINDOW})")
    return ok


def cmd_study(args):
    cfg = _base_config(args)
    out = _out(args)
    if args.taus:
        h = args.h_targets[0] if args.h_targets else cfg.mesh.get("h", 0.05)
        report = tau_study(args.taus, h=h, T=cfg.T, test=cfg.test,
                           rng_seed=cfg.mesh.get("rng_seed", 0), out_dir=out)
    else:
        hs = args.h_targets or [0.2, 0.1, 0.05]
        report = h_study(hs, tau=cfg.tau, T=cfg.T, test=cfg.test,
                         rng_seed=cfg.mesh.get("rng_seed", 0), out_dir=out)
    for r in report.rows:
        print(r)
    print("slopes:", report.slopes)
    failed = any(r["status"] != "ok" for r in report.rows)
    if args.check:
        if args.taus:
            metrics = ["delta"]
        else:
            metrics = ["E", "sigma"] if cfg.test == "test1" else ["sigma"]
        for m in metrics:
            failed |= not _check_slope(m, report.slopes.get(m), 2.0)
    return 1 if failed else 0


def cmd_lemma_checks(args):
    out = _out(args)
    seed = 0 if args.seed is None else args.seed
    meshes = [build_mesh({"h": h, "rng_seed": seed}) for h in (args.h_targets or [0.2, 0.1, 0.05])]
    res = lemma_rate_checks(meshes)
    (out / "lemma_checks.json").write_text(json.dumps(res, indent=2))
    print(json.dumps(res["slopes"]), "L ratio", res["L_ratio"])
    if not args.check:
        return 0
    ok = _check_slope("projection", res["slopes"]["projection"], 2.0)
    ok &= _check_slope("commutator", res["slopes"]["commutator"], 2.0)
    ratio_ok = math.isfinite(res["L_ratio"]) and res["L_ratio"] > 0.1
    print(f"{'PASS' if ratio_ok else 'FAIL'}: L finest/coarsest ratio {res['L_ratio']:.3g} (> 0.1)")
    return 0 if ok and ratio_ok else 1


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON file with ExperimentConfig fields")
    common.add_argument("--out", default="out", help="output directory")
    common.add_argument("--seed", type=int, help="mesh generator seed")
    common.add_argument("--tau", type=float)
    common.add_argument("--T", type=float)
    common.add_argument("--h-targets", type=_floats, help="comma-separated target mesh sizes")
    common.add_argument("--test", type=int, choices=(1, 2))
    common.add_argument("--check", action="store_true", help="exit nonzero if order checks fail")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="mfdwave", description="Mimetic wave equation experiments")
    sub = p.add_subparsers(dest="verb", required=True)
    g = sub.add_parser("generate-mesh", parents=[common], help="write Voronoi meshes as JSON")
    g.add_argument("--lloyd-iters", type=int, default=100)
    g.set_defaults(func=cmd_generate_mesh)
    sub.add_parser("run", parents=[common], help="single run, writes series.csv").set_defaults(func=cmd_run)
    s = sub.add_parser("study", parents=[common], help="convergence study, writes report.csv/json")
    s.add_argument("--taus", type=_floats, help="tau sweep on a fixed mesh instead of an h sweep")
    s.set_defaults(func=cmd_study)
    sub.add_parser("lemma-checks", parents=[common], help="interpolation and projection rates").set_defaults(
        func=cmd_lemma_checks
    )
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ConfigError, MeshError, RunError, OSError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
