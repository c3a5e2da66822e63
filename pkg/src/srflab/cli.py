"""Command-line harness: ``srflab <command> --config FILE --out DIR``.

Exit status is 0 when every selected check passes, 1 when some check fails
and 2 for usage or configuration errors. ``SRFLAB_THREADS`` sets the number
of worker threads used for independent checks.
"""

from __future__ import annotations

import argparse
import csv
import json
import math
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from .config import TEMPLATE, build_space, load_config, parse_p
from .errors import SrfError
from .heat import (
    adjoint_propagate,
    dual_propagate,
    energy_estimate_check,
    gamma_at,
    heat_kernel,
    laplacian_at,
    max_log_rate,
    propagator_matrix,
)
from .report import CheckReport, artifact_version, write_json
from .space import MeasureOnSpace, distance_at, measure_at
from .stochastic import (
    contraction_stats,
    dyadic_times,
    kolmogorov_scaling,
    sample_backward_bm,
    sample_coupled_bm,
)
from .transport import dynamic_convexity_check
from .verify import (
    bochner_scan,
    gradient_estimate_scan,
    observed_order,
    random_field,
    transport_estimate_scan,
    trial_rng,
)

EXIT_PASS, EXIT_FAIL, EXIT_USAGE = 0, 1, 2


def _threads() -> int:
    try:
        return max(1, int(os.environ.get("SRFLAB_THREADS", "1")))
    except ValueError:
        return 1


def _run_all(jobs):
    """Evaluate zero-argument callables, in parallel when threads are configured; order is kept."""
    if _threads() == 1:
        return [job() for job in jobs]
    with ThreadPoolExecutor(_threads()) as pool:
        return list(pool.map(lambda job: job(), jobs))


def _deviation(name, deviation, tolerance, params=None, **details):
    return CheckReport(name, -float(deviation), None, float(tolerance), params or {},
                       details={"deviation": float(deviation), **details})


def _nearest(space, x):
    return int(np.argmin(np.abs(space.coords - float(x))))


# suites -------------------------------------------------------------------


def suite_heat(space, cfg, out, seed):
    times = cfg["times"]
    checks = cfg["checks"]
    steps = int(times["steps"])
    s, t = map(float, times["pairs"][0])
    r = 0.5 * (s + t)
    rng = trial_rng(seed, 0)
    m_s = measure_at(space, s).masses
    m_t = measure_at(space, t).masses
    full = propagator_matrix(space, s, t, 2 * steps).matrix
    split = propagator_matrix(space, r, t, steps).matrix @ propagator_matrix(space, s, r, steps).matrix
    kern = heat_kernel(space, s, t, steps)
    g = rng.random(space.n)
    u = rng.standard_normal(space.n)
    v = rng.standard_normal(space.n)
    mu = MeasureOnSpace.probability(g * m_t)
    dual = dual_propagate(space, mu, t, s, steps).masses
    adj = adjoint_propagate(space, g / np.sum(g * m_t), t, s, steps) * m_s
    lap_term = np.sum(laplacian_at(space, t, u) * v * m_t)
    ibp = abs(lap_term + np.sum(gamma_at(space, t, u, v) * m_t))
    L = checks["energy_L"]
    if L == "auto":
        L = max_log_rate(space, np.linspace(s, t, 17)) / 3.0
    energy = energy_estimate_check(space, random_field(space, s, rng), s, t, float(L), steps)
    propagator_matrix(space, s, t, steps).to_csv(out / "propagator.csv")
    params = {"s": s, "t": t, "steps": steps}
    return [
        _deviation("chapman-kolmogorov", np.abs(full - split).max(), 1e-8, params),
        _deviation("markov-normalization", kern.markov_defect(m_s), 1e-10, params),
        _deviation("duality", np.abs(dual - adj).max(), 1e-10, params),
        _deviation("integration-by-parts", ibp, 1e-12 * max(1.0, abs(lap_term)), {"t": t}),
        CheckReport("kernel-modulus", math.nan, None, 0.0, params, status="inconclusive",
                    details=kern.spatial_modulus(distance_at(space, t))),
        CheckReport("energy-estimate", energy["slack"], None, 1e-8 * max(1.0, energy["rhs"]),
                    {**params, "L": energy["L"]}, details=energy),
    ]


def suite_gradient(space, cfg, out, seed):
    c, steps = cfg["checks"], int(cfg["times"]["steps"])
    jobs = [
        (lambda a=a, s=s, t=t: gradient_estimate_scan(
            space, float(s), float(t), float(a), int(c["trials"]), seed, steps,
            tol_scale=float(c["tol_scale"]), boundary_width=int(c["boundary_width"])))
        for s, t in cfg["times"]["pairs"] for a in c["alphas"]
    ]
    return _run_all(jobs)


def suite_transport(space, cfg, out, seed):
    c, steps = cfg["checks"], int(cfg["times"]["steps"])
    jobs = [
        (lambda p=p, s=s, t=t: transport_estimate_scan(
            space, float(s), float(t), parse_p(p), int(c["measure_pairs"]), seed, steps,
            kind=c["measure_kind"], rel_tol=float(c["transport_rel_tol"])))
        for s, t in cfg["times"]["pairs"] for p in c["p_values"]
    ]
    return _run_all(jobs)


def suite_bochner(space, cfg, out, seed):
    c = cfg["checks"]
    return [
        bochner_scan(space, float(t), int(c["bochner_trials"]), seed, tol_scale=float(c["tol_scale"]),
                     boundary_width=int(c["boundary_width"]))
        for t in cfg["times"]["bochner_times"]
    ]


def suite_convexity(space, cfg, out, seed):
    c = cfg["checks"]
    t = float(cfg["times"]["convexity_time"])
    reports = []
    x = space.coords
    diam = x.max() - x.min()
    for k in range(int(c["convexity_pairs"])):
        rng = trial_rng(seed, k)
        pair = []
        for _ in range(2):
            centre = rng.uniform(x.min() + 0.25 * diam, x.max() - 0.25 * diam)
            width = diam * rng.uniform(0.04, 0.12)
            pair.append(MeasureOnSpace.probability(np.exp(-0.5 * ((x - centre) / width) ** 2)))
        reports.append(dynamic_convexity_check(space, pair[0], pair[1], t, float(c["da"]), float(c["dt_step"]),
                                               tol_scale=float(c["tol_scale"])))
    with open(out / "convexity_sensitivity.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["pair", "da", "dt_step", "slack"])
        for k, rep in enumerate(reports):
            for row in rep.details.get("sensitivity", []):
                w.writerow([k, row["da"], row["dt_step"], row["slack"]])
    return reports


def suite_coupling(space, cfg, out, seed):
    c = cfg["checks"]
    lo, hi = space.horizon
    times = dyadic_times(hi, int(c["level"]), lo)
    x, y = _nearest(space, c["x"]), _nearest(space, c["y"])
    n_paths, steps = int(c["n_paths"]), int(c["kernel_steps"])
    coupled = sample_coupled_bm(space, x, y, times, n_paths, c["mode"], steps, seed)
    control = sample_coupled_bm(space, x, y, times, n_paths, "independent", steps, seed)
    stats = contraction_stats(coupled, space, allowed=float(c["allowed_fraction"]))
    ctrl = contraction_stats(control, space, allowed=float(c["allowed_fraction"]))
    ctrl.name = "contraction-control"
    ctrl.status = "inconclusive"  # the control is reported, never thresholded
    single = sample_backward_bm(space, MeasureOnSpace.dirac(space.n, x), times, n_paths, steps, seed)
    scaling = [kolmogorov_scaling(single, space, parse_p(p)) for p in c["scaling_p"]]
    keep = int(c["export_paths"])
    subset = type(coupled)(coupled.times, coupled.paths[:keep], coupled.seed, coupled.kernel_steps, coupled.mode)
    subset.to_csv(out / "coupled_paths.csv")
    with open(out / "contraction.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["time", "violation_fraction", "mean_excess", "max_excess", "control_violation_fraction"])
        for row in zip(times, stats.details["per_time_fraction"], stats.details["mean_excess"],
                       stats.details["max_excess"], ctrl.details["per_time_fraction"]):
            w.writerow(row)
    return [stats, ctrl, *scaling]


SUITES = {
    "check-heat": suite_heat,
    "check-gradient": suite_gradient,
    "check-transport": suite_transport,
    "check-bochner": suite_bochner,
    "check-convexity": suite_convexity,
    "simulate-coupling": suite_coupling,
}


# driver -----------------------------------------------------------------


def _run_suite(command, cfg, out: Path, seed, refine, config_path):
    levels = max(1, refine)
    runs = []
    for level in range(levels):
        space = build_space(cfg, level)
        sub = out if levels == 1 else out / f"refine{level}"
        sub.mkdir(parents=True, exist_ok=True)
        reports = SUITES[command](space, cfg, sub, seed)
        runs.append((level, space, reports))
    payload = {
        "command": command,
        "version": artifact_version(),
        "config_path": str(config_path) if config_path else None,
        "config": cfg,
        "seed": seed,
        "refine": refine,
        "levels": [
            {"level": level, "n": space.n, "dx": space.spacing, "space": space.name,
             "reports": [r.to_dict() for r in reports]}
            for level, space, reports in runs
        ],
    }
    ok = all(r.passed for _, _, reports in runs for r in reports)
    if levels > 1:
        trend = _trend(runs)
        payload["trend"] = trend
        with open(out / "refinement.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["level", "n", "dx", "check", "index", "slack", "tolerance", "pass"])
            for level, space, reports in runs:
                for k, r in enumerate(reports):
                    w.writerow([level, space.n, space.spacing, r.name, k, r.slack, r.tolerance, r.passed])
    payload["pass"] = ok
    write_json(out / f"{command}.json", payload)
    return ok, payload


def _trend(runs):
    dx = [space.spacing for _, space, _ in runs]
    out = []
    for k, rep in enumerate(runs[0][2]):
        tols = [reports[k].tolerance for _, _, reports in runs]
        defects = [max(0.0, -reports[k].slack) if not math.isnan(reports[k].slack) else 0.0
                   for _, _, reports in runs]
        out.append({"check": rep.name, "index": k, "dx": dx, "tolerance": tols,
                    "tolerance_order": observed_order(dx, tols), "defect": defects,
                    "defect_order": observed_order(dx, defects)})
    return out


def _summarise(directory: Path) -> int:
    files = sorted(directory.glob("*.json")) if directory.is_dir() else []
    if not files:
        print(f"no reports found in {directory}", file=sys.stderr)
        return EXIT_USAGE
    ok = True
    for path in files:
        try:
            payload = json.loads(path.read_text())
        except json.JSONDecodeError:
            print(f"{path.name}: unreadable", file=sys.stderr)
            return EXIT_USAGE
        for level in payload.get("levels", []):
            for rep in level["reports"]:
                flag = "PASS" if rep["pass"] else "FAIL"
                ok &= bool(rep["pass"])
                print(f"{payload.get('command', path.stem):18s} n={level['n']:<5d} {rep['name']:28s} "
                      f"slack={rep['slack']!s:>24s} tol={rep['tolerance']!s:>12s} {flag}")
    print("overall:", "PASS" if ok else "FAIL")
    return EXIT_PASS if ok else EXIT_FAIL


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="srflab", description="Super-Ricci flow checks on discrete spaces.")
    parser.add_argument("command", choices=["init", *SUITES, "report"])
    parser.add_argument("--config", type=Path, help="TOML configuration file")
    parser.add_argument("--out", type=Path, default=Path("results"), help="output directory")
    parser.add_argument("--seed", type=int, help="RNG seed (overrides [rng].seed)")
    parser.add_argument("--tol-scale", type=float, help="mesh tolerance factor (overrides [checks].tol_scale)")
    parser.add_argument("--refine", type=int, default=0, help="run at K successive grid refinements")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0) and EXIT_USAGE
    if args.command == "init":
        target = args.config or args.out / "config.toml"
        target.parent.mkdir(parents=True, exist_ok=True)
        target.write_text(TEMPLATE)
        print(target)
        return EXIT_PASS
    if args.command == "report":
        return _summarise(args.out)
    if args.seed is not None and not 0 <= args.seed < 2**64:
        print("--seed must be an unsigned 64-bit integer", file=sys.stderr)
        return EXIT_USAGE
    if args.refine < 0:
        print("--refine must be nonnegative", file=sys.stderr)
        return EXIT_USAGE
    try:
        cfg = load_config(args.config)
        if args.tol_scale is not None:
            cfg["checks"]["tol_scale"] = args.tol_scale
        seed = int(cfg["rng"]["seed"]) if args.seed is None else args.seed
        cfg["rng"]["seed"] = seed
        build_space(cfg, 0)
    except (OSError, ValueError, KeyError, TypeError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    args.out.mkdir(parents=True, exist_ok=True)
    try:
        ok, _ = _run_suite(args.command, cfg, args.out, seed, args.refine, args.config)
    except SrfError as exc:
        print(f"{exc.code}: {exc}", file=sys.stderr)
        return EXIT_USAGE
    return EXIT_PASS if ok else EXIT_FAIL


if __name__ == "__main__":
    sys.exit(main())
