"""Command-line entry point: ``pwacert run | inspect | verify-only | report``.

Exit codes: 0 on success (certified), 1 when the pipeline ends uncertified or
a query point is outside the domain, 2 for invalid input.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import platform
import sys
import time
from pathlib import Path

import numpy as np
import scipy

from . import __version__
from .config import ConfigError, RunConfig, load_config
from .dynamics import simulate_batch
from .plotting import SliceView, level_set_svg
from .relu import OutOfDomain, ReluNetwork, fit_surrogate, relu_to_pwa, sample_domain
from .uis import NoCertifiedMember, UisBarrier, enlargement_report
from .verify import COUNTEREXAMPLE, Budgets, certify_nonlinear, verify_all

log = logging.getLogger("pwacert")

EXIT_OK, EXIT_UNCERTIFIED, EXIT_INVALID = 0, 1, 2


def _write_json(path: Path, obj) -> None:
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=1, sort_keys=True)
        fh.write("\n")


def _surrogate(cfg: RunConfig, dyn) -> ReluNetwork:
    if cfg.surrogate.weights:
        return ReluNetwork.load(Path(cfg.source).parent / cfg.surrogate.weights)
    s = cfg.surrogate
    return fit_surrogate(dyn, s.width, s.samples, s.seed, epochs=s.epochs)


def _set_checks(dyn, barrier: UisBarrier, samples: int = 10_000) -> dict:
    """Disjointness from the unsafe set and coverage of the initial set, by sampling."""
    out = {}
    rng = np.random.default_rng(0)
    if dyn.unsafe is not None:
        X = sample_domain(dyn.unsafe, samples, rng)
        h = barrier.evaluate(X)[0]
        out["unsafe_max_h"] = float(h.max())
        out["unsafe_disjoint"] = bool(np.all(h < 0))
    if dyn.initial is not None:
        X = sample_domain(dyn.initial, samples, rng)
        out["initial_covered_fraction"] = float(np.mean(barrier.evaluate(X)[0] >= 0))
    return out


def _simulate(cfg: RunConfig, dyn, barrier: UisBarrier, out: Path) -> dict:
    n = cfg.sim.n_trajectories
    if n == 0:
        return {"n_trajectories": 0}
    rng = np.random.default_rng(cfg.sim.seed)
    X0 = np.zeros((0, dyn.n))
    for _ in range(50):
        X = sample_domain(dyn.domain, 20 * n, rng)
        X0 = np.vstack([X0, X[barrier.contains(X)]])
        if X0.shape[0] >= n:
            break
    X0 = X0[:n]
    if X0.shape[0] == 0:
        return {"n_trajectories": 0, "note": "no samples inside the certified set"}
    res = simulate_batch(dyn, "cbf_qp", X0, cfg.sim.horizon_s, cfg.sim.dt, barrier=barrier)
    if cfg.outputs.emit_csv:
        tdir = out / "trajectories"
        tdir.mkdir(exist_ok=True)
        for k in range(X0.shape[0]):
            res.trajectory_csv(k, tdir / f"traj_{k:03d}.csv")
    return {
        "n_trajectories": int(X0.shape[0]),
        "horizon_s": cfg.sim.horizon_s,
        "dt": cfg.sim.dt,
        "min_h": float(np.min(res.min_h)),
        "exited": int(res.exited.sum()),
        "qp_infeasible": int(res.qp_infeasible.sum()),
        "invariant": bool(np.min(res.min_h) >= -1e-6 and not res.exited.any()),
    }


def _svg(cfg: RunConfig, dyn, barrier: UisBarrier, path: Path) -> None:
    markers = []
    if dyn.unsafe is not None and dyn.n == 2:
        markers.append(("unsafe", *dyn.unsafe.bbox, "#d62728"))
    if dyn.initial is not None and dyn.n == 2:
        markers.append(("initial", *dyn.initial.bbox, "#2ca02c"))
    view = barrier if dyn.n == 2 else SliceView(barrier, axes=(dyn.n - 2, dyn.n - 1))
    title = dyn.name if dyn.n == 2 else f"{dyn.name}: slice through the other coordinates at 0"
    level_set_svg(view, path, title=title, markers=markers)


def _manifest(cfg: RunConfig, out: Path, artifacts: list[str], certified: bool) -> None:
    _write_json(out / "manifest.json", {
        "config": cfg.source,
        "config_sha256": cfg.digest,
        "certified": certified,
        "versions": {
            "pwacert": __version__,
            "numpy": np.__version__,
            "scipy": scipy.__version__,
            "python": platform.python_version(),
        },
        "artifacts": sorted(artifacts),
    })


def cmd_run(args) -> int:
    try:
        cfg = load_config(args.config)
        dyn = cfg.dynamics()
    except (ConfigError, ValueError, ImportError, AttributeError) as exc:
        print(f"invalid configuration: {exc}", file=sys.stderr)
        return EXIT_INVALID
    out = Path(args.out or cfg.outputs.dir)
    out.mkdir(parents=True, exist_ok=True)
    artifacts = []
    t0 = time.perf_counter()

    net = _surrogate(cfg, dyn)
    net.save(out / "surrogate.json")
    artifacts.append("surrogate.json")
    t_fit = time.perf_counter() - t0
    pwa = relu_to_pwa(net, dyn.domain)
    budgets = Budgets(cfg.budgets.outer_iters, cfg.budgets.wall_clock_s, cfg.budgets.restarts,
                      cfg.threads, cfg.budgets.verify_interior)
    try:
        result = certify_nonlinear(dyn, pwa, cfg.synthesis, cfg.alpha_grid, budgets)
    except NoCertifiedMember as exc:
        print(f"uncertified: {exc}", file=sys.stderr)
        _write_json(out / "synthesis.json", [
            {k: v for k, v in r.to_dict().items() if k != "barrier"} for r in exc.results
        ])
        artifacts.append("synthesis.json")
        _manifest(cfg, out, artifacts, False)
        return EXIT_UNCERTIFIED

    barrier = result.barrier
    doc = barrier.to_dict()
    doc["certified"] = result.certified
    doc["uncertainty"] = result.unc.to_dict()
    doc["system"] = cfg.system
    _write_json(out / "barrier.json", doc)
    _write_json(out / "verify.json", [o.to_dict() for o in result.outcomes])
    artifacts += ["barrier.json", "verify.json"]
    with open(out / "counterexamples.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["member", "phi_star"] + [f"x{i+1}" for i in range(dyn.n)])
        for o in result.outcomes:
            if o.status == COUNTEREXAMPLE:
                w.writerow([o.patch.member_id, repr(o.phi_star)] + [repr(float(v)) for v in o.witness])
    artifacts.append("counterexamples.csv")

    t_sim = time.perf_counter()
    sim = _simulate(cfg, dyn, barrier, out)
    t_sim = time.perf_counter() - t_sim
    if cfg.outputs.emit_csv and sim.get("n_trajectories"):
        artifacts.append("trajectories/")
    if cfg.outputs.emit_svg:
        _svg(cfg, dyn, barrier, out / "levelsets.svg")
        artifacts.append("levelsets.svg")

    summary = {
        "system": cfg.system,
        "certified": result.certified,
        "members": barrier.alphas,
        "outer": result.report,
        "enlargement": enlargement_report(barrier),
        "sets": _set_checks(dyn, barrier),
        "simulation": sim,
        "surrogate": net.report,
    }
    _write_json(out / "report.json", summary)
    artifacts.append("report.json")
    timings = result.report["timings"]
    with open(out / "timings.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["stage", "seconds"])
        w.writerow(["surrogate_fit", f"{t_fit:.3f}"])
        w.writerow(["uis_computation", f"{timings['uis_s']:.3f}"])
        w.writerow(["verification", f"{timings['verification_s']:.3f}"])
        w.writerow(["total", f"{timings['uis_s'] + timings['verification_s']:.3f}"])
        w.writerow(["simulation", f"{t_sim:.3f}"])
    artifacts.append("timings.csv")
    _manifest(cfg, out, artifacts, result.certified)
    print(f"{cfg.system}: {'certified' if result.certified else 'NOT certified'} "
          f"({len(barrier.members)} members, {result.report['outer_iterations']} outer iterations); "
          f"artifacts in {out}")
    return EXIT_OK if result.certified else EXIT_UNCERTIFIED


def _load_barrier(path) -> UisBarrier:
    with open(path) as fh:
        return UisBarrier.from_dict(json.load(fh))


def cmd_inspect(args) -> int:
    try:
        barrier = _load_barrier(args.barrier)
    except (OSError, ValueError, KeyError, TypeError) as exc:
        print(f"cannot read barrier: {exc}", file=sys.stderr)
        return EXIT_INVALID
    x = np.asarray(args.point, dtype=float)
    if x.size != barrier.dim:
        print(f"point has {x.size} coordinates, barrier is {barrier.dim}-dimensional", file=sys.stderr)
        return EXIT_INVALID
    try:
        h, k, c = barrier.evaluate(x[None])
    except OutOfDomain:
        print(f"point {x.tolist()} is outside the domain")
        return EXIT_UNCERTIFIED
    verdict = "inside" if h[0] >= 0 else "outside"
    print(f"hbar = {h[0]:.9g}")
    print(f"active member = {int(k[0])} (alpha = {barrier.members[int(k[0])].alpha:g})")
    print(f"active cell = {int(c[0])}")
    print(verdict)
    return EXIT_OK


def cmd_verify_only(args) -> int:
    try:
        barrier = _load_barrier(args.barrier)
    except (OSError, ValueError, KeyError, TypeError) as exc:
        print(f"cannot read barrier: {exc}", file=sys.stderr)
        return EXIT_INVALID
    try:
        cfg = load_config(args.config)
        dyn = cfg.dynamics()
    except (ConfigError, ValueError, ImportError, AttributeError) as exc:
        print(f"invalid configuration: {exc}", file=sys.stderr)
        return EXIT_INVALID
    outcomes = verify_all(dyn, barrier, restarts=cfg.budgets.restarts, workers=cfg.threads,
                          interior=cfg.budgets.verify_interior)
    out = Path(args.out) if args.out else Path(args.barrier).parent
    _write_json(out / "verify.json", [o.to_dict() for o in outcomes])
    bad = sum(o.status != "verified" for o in outcomes)
    print(f"{len(outcomes)} patches, {bad} not verified")
    return EXIT_OK if bad == 0 else EXIT_UNCERTIFIED


def cmd_report(args) -> int:
    run = Path(args.run_dir)
    try:
        with open(run / "manifest.json") as fh:
            manifest = json.load(fh)
    except (OSError, ValueError) as exc:
        print(f"not a run directory: {exc}", file=sys.stderr)
        return EXIT_INVALID
    print(f"config: {manifest['config']} (sha256 {manifest['config_sha256'][:12]})")
    print(f"certified: {manifest['certified']}")
    if (run / "report.json").exists():
        with open(run / "report.json") as fh:
            rep = json.load(fh)
        print(f"members (alpha): {rep['members']}")
        enl = rep["enlargement"]
        print(f"set size: union {enl['union_size']:.4f}, members {[round(v, 4) for v in enl['member_sizes']]} ({enl['method']})")
        for k, v in rep["sets"].items():
            print(f"{k}: {v}")
        sim = rep["simulation"]
        if sim.get("n_trajectories"):
            print(f"simulation: {sim['n_trajectories']} trajectories, min hbar {sim['min_h']:.3g}, "
                  f"exited {sim['exited']}, QP infeasible {sim['qp_infeasible']}")
    if (run / "timings.csv").exists():
        print("timings (s):")
        with open(run / "timings.csv") as fh:
            for row in list(csv.reader(fh))[1:]:
                print(f"  {row[0]:<16} {row[1]}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="pwacert", description="PWA barrier synthesis and verification")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)
    r = sub.add_parser("run", help="run the full pipeline from a config file")
    r.add_argument("config")
    r.add_argument("--out", help="override outputs.dir")
    r.set_defaults(func=cmd_run)
    i = sub.add_parser("inspect", help="evaluate a saved barrier at a point")
    i.add_argument("barrier")
    i.add_argument("--point", nargs="+", type=float, required=True)
    i.set_defaults(func=cmd_inspect)
    v = sub.add_parser("verify-only", help="re-verify a saved barrier against a config's system")
    v.add_argument("barrier")
    v.add_argument("config")
    v.add_argument("--out", help="directory for verify.json (default: next to the barrier)")
    v.set_defaults(func=cmd_verify_only)
    rep = sub.add_parser("report", help="summarise a run directory")
    rep.add_argument("run_dir")
    rep.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_INVALID if exc.code else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.ERROR, format="%(name)s: %(message)s")
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
