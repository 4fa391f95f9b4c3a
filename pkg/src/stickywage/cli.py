"""Command-line front end.

Subcommands work off a single YAML scenario file (see ``scenario.py`` for
the schema) and write CSV/JSON results that embed the fully-resolved inputs
so every output is reproducible from its own header.

Exit codes: 0 success, 2 a model assumption or admissibility condition
fails, 3 a verification check fails, 4 configuration or I/O trouble.
"""

from __future__ import annotations

import argparse
import json
import os
import subprocess
import sys

import numpy as np

import dataclasses

from . import __version__
from .errors import (AdmissibilityError, AssumptionViolation, ConfigError,
                     DomainError, SimulationError)
from .income import (crossing_probability, picard_solve, positivity_witness,
                     simulate_income)
from .measures import uniform_density
from .params import MarketParams
from .policy import feedback_controls, simulate_policy, value_function
from .robust import solve_robust, stress_test_saddle
from .scenario import Scenario, load_scenario, parse_scenario
from .valuation import (classify_state, memory_floor, policy_constants,
                        verify_markov_representation)

__all__ = ["main"]

_FLOOR_TOL = 1e-10
_DOLEANS_GAP_TOL = 0.005   # relative, quoted at step 1e-3; scaled linearly in h
_CHECK_NAMES = ("markov", "gamma", "value", "positivity", "monotonicity",
                "picard")


# ----------------------------------------------------------------------
# helpers


def _json_default(obj):
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, (np.floating, np.integer, np.bool_)):
        return obj.item()
    raise TypeError(f"not JSON serializable: {type(obj)!r}")


def _version_string() -> str:
    """Package version, refined by git-describe when run from a checkout."""
    global _VERSION
    if _VERSION is None:
        label = f"stickywage {__version__}"
        try:
            out = subprocess.run(
                ["git", "describe", "--always", "--dirty", "--tags"],
                cwd=os.path.dirname(os.path.abspath(__file__)),
                capture_output=True, text=True, timeout=5,
            )
            if out.returncode == 0 and out.stdout.strip():
                label += f" ({out.stdout.strip()})"
        except OSError:
            pass
        _VERSION = label
    return _VERSION


_VERSION = None


def _dump_json(payload: dict, path: str):
    payload = {"version": _version_string(), **payload}
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=2, default=_json_default)
        fh.write("\n")


def _header_lines(scn: Scenario) -> list[str]:
    return [
        _version_string(),
        "config " + json.dumps(scn.resolved(), default=_json_default,
                               separators=(",", ":")),
    ]


def _fan_chart(t: np.ndarray, y: np.ndarray, out: str, title: str):
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    qs = np.percentile(y, [5, 25, 50, 75, 95], axis=0)
    fig, ax = plt.subplots(figsize=(8.0, 4.5))
    ax.fill_between(t, qs[0], qs[4], color="#4878cf", alpha=0.2,
                    label="5-95%")
    ax.fill_between(t, qs[1], qs[3], color="#4878cf", alpha=0.4,
                    label="25-75%")
    ax.plot(t, qs[2], color="#222222", lw=1.4, label="median")
    ax.set_xlabel("t (years)")
    ax.set_ylabel("income")
    ax.set_title(title)
    ax.legend(frameon=False)
    fig.tight_layout()
    fig.savefig(out, format="svg")
    plt.close(fig)


def _print(line: str):
    print(line, flush=True)


def _load(args) -> Scenario:
    """Load the scenario and apply any command-line numeric overrides."""
    scn = load_scenario(args.scenario)
    updates = {}
    for flag, field_name in (("paths", "n_paths"), ("seed", "seed"),
                             ("horizon", "T"), ("step", "h"),
                             ("workers", "n_workers")):
        value = getattr(args, flag, None)
        if value is not None:
            updates[field_name] = value
    if "h" in updates:
        updates["history"] = scn.history.resampled(updates["h"])
    return dataclasses.replace(scn, **updates) if updates else scn


def _tolerance(scn: Scenario, key: str, default: float) -> float:
    if scn.tolerances and key in scn.tolerances:
        return float(scn.tolerances[key])
    return default


# ----------------------------------------------------------------------
# subcommands


def cmd_params_check(args) -> int:
    scn = _load(args)
    code = 0
    margin = scn.params.impatience_margin()
    _print(f"impatience margin: {margin:.6g} "
           f"({'ok' if margin > 0 else 'VIOLATED'})")
    if margin <= 0:
        code = 2
    try:
        constants = policy_constants(scn.params, scn.kernel)
    except AssumptionViolation as exc:
        _print(f"{exc.condition}: VIOLATED ({exc})")
        return 2
    _print(f"income discount spread: {constants.spread:.6g} (ok)")
    _print(f"capitalization of current income: {constants.capitalization:.6g}")
    floor = memory_floor(constants.memory)
    floor_note = ("ok" if floor >= -_FLOOR_TOL
                  else "negative; worst-case reduction unavailable")
    _print(f"lag-weight floor: {floor:.6g} ({floor_note})")
    label, total = classify_state(constants, scn.w0, scn.history)
    _print(f"initial total wealth: {total:.6g} ({label})")
    if label == "inadmissible":
        code = 2
    game = None
    if scn.uncertainty is not None:
        try:
            game = solve_robust(scn.params, scn.uncertainty, scn.w0,
                                scn.history)
            _print(f"worst-case kernel: ok (guaranteed value "
                   f"{game.value:.6g}, lag-weight floor "
                   f"{game.memory_floor:.6g})")
        except (AssumptionViolation, AdmissibilityError) as exc:
            cond = getattr(exc, "condition", "admissibility")
            _print(f"worst-case kernel: VIOLATED [{cond}] ({exc})")
            code = 2
    if args.json:
        payload = {"config": scn.resolved(),
                   "constants": constants.to_dict(),
                   "impatience_margin": margin,
                   "state": {"label": label, "total_wealth": total}}
        if game is not None:
            payload["robust"] = game.to_dict()
        _dump_json(payload, args.json)
    return code


def cmd_simulate(args) -> int:
    scn = _load(args)
    stats = simulate_income(scn.history, scn.kernel, scn.params, scn.T,
                            n_paths=scn.n_paths, seed=scn.seed, h=scn.h,
                            record_paths=False, n_workers=scn.n_workers,
                            chunk=scn.chunk)
    crossed = float(np.mean(stats.y_min < 0.0))
    _print(f"paths: {scn.n_paths}, horizon: {scn.T}, step: {scn.h}")
    _print(f"terminal income: mean {np.mean(stats.y_T):.6g}, "
           f"quantiles 5/50/95% "
           f"{np.percentile(stats.y_T, 5):.6g}/"
           f"{np.percentile(stats.y_T, 50):.6g}/"
           f"{np.percentile(stats.y_T, 95):.6g}")
    _print(f"paths dipping below zero: {100.0 * crossed:.4g}%")
    n_rec = min(scn.n_paths, args.record)
    recorded = None
    if args.output or args.plot:
        # the per-path noise streams make the first paths of a re-run
        # identical to the first paths of the full run
        recorded = simulate_income(scn.history, scn.kernel, scn.params, scn.T,
                                   n_paths=n_rec, seed=scn.seed, h=scn.h,
                                   record_paths=True, record_noise=args.noise,
                                   n_workers=scn.n_workers, chunk=scn.chunk)
    if args.output:
        with open(args.output, "w") as fh:
            recorded.to_csv(fh, header_lines=_header_lines(scn))
        _print(f"wrote {n_rec} paths to {args.output}")
    if args.plot:
        _fan_chart(recorded.t, recorded.y, args.plot,
                   f"{scn.name}: income fan ({n_rec} paths)")
        _print(f"wrote fan chart to {args.plot}")
    if args.json:
        _dump_json({
            "config": scn.resolved(),
            "terminal_income": {
                "mean": float(np.mean(stats.y_T)),
                "quantiles": {q: float(np.percentile(stats.y_T, q))
                              for q in (5, 25, 50, 75, 95)},
            },
            "fraction_below_zero": crossed,
        }, args.json)
    return 0


def _verdict(check: str, ok, statistic: float | None,
             tolerance: float | None, detail: str, **details) -> dict:
    return {"check": check, "pass": None if ok is None else bool(ok),
            "statistic": statistic, "tolerance": tolerance,
            "detail": detail, "details": details}


def _check_markov(scn: Scenario) -> dict:
    n_sigma = _tolerance(scn, "n_sigma", 3.0)
    check = verify_markov_representation(
        scn.history, scn.kernel, scn.params,
        T=scn.T_trunc if scn.T_trunc is not None else scn.T,
        n_paths=scn.n_paths, seed=scn.seed, h=scn.h,
        n_workers=scn.n_workers, chunk=scn.chunk)
    tol = check.estimate.tolerance(n_sigma)
    return _verdict(
        "markov", check.consistent(n_sigma), check.gap, tol,
        f"closed form {check.closed_form:.6g}, mc {check.estimate.mean:.6g} "
        f"+- {tol:.2g}", **check.to_dict())


def _policy_run(scn: Scenario, constants):
    return simulate_policy(scn.history, scn.kernel, scn.params, w0=scn.w0,
                           T=scn.T, n_paths=scn.n_paths, seed=scn.seed,
                           h=scn.h, constants=constants,
                           compare_closed_form=True,
                           n_workers=scn.n_workers, chunk=scn.chunk)


def _check_gamma(scn: Scenario, run) -> dict:
    if run is None:
        return _verdict("gamma", None, None, None,
                        "skipped: wage risk not fully spanned")
    tol = _tolerance(scn, "gamma_rel",
                     _DOLEANS_GAP_TOL * max(1.0, scn.h / 1e-3))
    return _verdict(
        "gamma", run.gap_max <= tol, run.gap_max, tol,
        f"worst relative gap {run.gap_max:.3g} (tol {tol:g} at step {scn.h:g})",
        gap_max=run.gap_max)


def _check_value(scn: Scenario, constants, run) -> dict:
    if run is None:
        return _verdict("value", None, None, None,
                        "skipped: wage risk not fully spanned")
    n_sigma = _tolerance(scn, "n_sigma", 3.0)
    value = value_function(constants, scn.w0, scn.history)
    est = run.utility()
    tol = est.tolerance(n_sigma)
    return _verdict(
        "value", est.consistent_with(value, n_sigma), est.mean - value, tol,
        f"value {value:.6g}, mc {est.mean:.6g} +- {tol:.2g}",
        closed_form=value, mc=est.to_dict())


def _check_positivity(scn: Scenario) -> dict:
    if scn.kernel.is_nonnegative:
        stats = simulate_income(scn.history, scn.kernel, scn.params, scn.T,
                                n_paths=scn.n_paths, seed=scn.seed, h=scn.h,
                                record_paths=False, n_workers=scn.n_workers,
                                chunk=scn.chunk)
        frac = float(np.mean(stats.y_min < 0.0))
        return _verdict(
            "positivity", frac == 0.0, frac, 0.0,
            f"nonnegative kernel: {100 * frac:.4g}% of {scn.n_paths} paths "
            "dipped below zero (expected none)", crossed_fraction=frac)
    frac, stderr, witness = crossing_probability(
        scn.kernel, scn.params, h=scn.h, T=scn.T, n_paths=scn.n_paths,
        seed=scn.seed)
    return _verdict(
        "positivity", frac > 0.0, frac, 0.0,
        f"signed kernel: witness datum drives {100 * frac:.4g}% of paths "
        f"below zero (stderr {100 * stderr:.2g}%; expected > 0)",
        crossed_fraction=frac, stderr=stderr,
        witness={"x0": witness.x0, "margin": witness.margin,
                 "kernel_integral": witness.kernel_integral})


def _check_monotonicity(scn: Scenario) -> dict:
    if scn.uncertainty is not None:
        low = scn.uncertainty.lower_bound()
        high = scn.uncertainty.upper_bound()
        label = "uncertainty-set bounds"
    else:
        low = scn.kernel
        high = scn.kernel + uniform_density(
            scn.kernel.d, 0.25 * max(scn.kernel.total_variation(), 0.01))
        label = "kernel vs kernel plus a positive band"
    if not scn.history.is_nonnegative:
        return _verdict("monotonicity", None, None, None,
                        "skipped: history has negative values")
    n_paths = min(scn.n_paths, 256)
    runs = [simulate_income(scn.history, k, scn.params, scn.T,
                            n_paths=n_paths, seed=scn.seed, h=scn.h,
                            n_workers=scn.n_workers, chunk=scn.chunk)
            for k in (low, high)]
    gap_min = float(np.min(runs[1].y - runs[0].y))
    tol = 1e-12 * max(1.0, float(np.max(np.abs(runs[1].y))))
    return _verdict(
        "monotonicity", gap_min >= -tol, gap_min, tol,
        f"{label}, {n_paths} common-noise paths: smallest ordered gap "
        f"{gap_min:.3g}", pair=label, n_paths=n_paths)


def _check_picard(scn: Scenario) -> dict:
    n_paths = min(scn.n_paths, 128)
    euler = simulate_income(scn.history, scn.kernel, scn.params, scn.T,
                            n_paths=n_paths, seed=scn.seed, h=scn.h,
                            record_noise=True)
    fixed = picard_solve(scn.history, scn.kernel, scn.params, scn.T,
                         euler.dZ, euler.dZ_star)
    gap = float(np.max(np.abs(euler.y - fixed.path.y)))
    scale = max(1.0, float(np.max(np.abs(euler.y))))
    tol = 5.0 * scn.h * scale
    return _verdict(
        "picard", gap <= tol, gap, tol,
        f"{n_paths} common-noise paths, {fixed.iterations} sweeps: "
        f"largest gap to the fixed point {gap:.3g} (tol {tol:.3g})",
        iterations=fixed.iterations, n_paths=n_paths)


def cmd_verify(args) -> int:
    scn = _load(args)
    picks = []
    for item in args.which or ["all"]:
        picks.extend(p.strip() for p in item.split(",") if p.strip())
    if "all" in picks:
        picks = list(_CHECK_NAMES)
    unknown = set(picks) - set(_CHECK_NAMES)
    if unknown:
        raise ConfigError(f"unknown check(s) {sorted(unknown)}; "
                          f"pick from {', '.join(_CHECK_NAMES)} or all")

    run = constants = None
    if {"gamma", "value"} & set(picks) and scn.params.perfectly_correlated:
        constants = policy_constants(scn.params, scn.kernel)
        run = _policy_run(scn, constants)

    verdicts = []
    for name in _CHECK_NAMES:
        if name not in picks:
            continue
        if name == "markov":
            verdicts.append(_check_markov(scn))
        elif name == "gamma":
            verdicts.append(_check_gamma(scn, run))
        elif name == "value":
            verdicts.append(_check_value(scn, constants, run))
        elif name == "positivity":
            verdicts.append(_check_positivity(scn))
        elif name == "monotonicity":
            verdicts.append(_check_monotonicity(scn))
        elif name == "picard":
            verdicts.append(_check_picard(scn))

    code = 0
    for v in verdicts:
        status = "SKIP" if v["pass"] is None else ("PASS" if v["pass"] else "FAIL")
        _print(f"{v['check']}: {status} ({v['detail']})")
        if v["pass"] is False:
            code = 3
    if args.json:
        _dump_json({"config": scn.resolved(), "checks": verdicts,
                    "passed": code == 0}, args.json)
    return code


def cmd_robust(args) -> int:
    scn = _load(args)
    if scn.uncertainty is None:
        raise ConfigError("scenario has no uncertainty block")
    report = solve_robust(scn.params, scn.uncertainty, scn.w0, scn.history)
    worst = report.worst_kernel
    _print(f"worst-case kernel: {len(worst.atoms)} atom(s), "
           f"mass {worst.mass():.6g}, total variation "
           f"{worst.total_variation():.6g}")
    _print(f"guaranteed value: {report.value:.6g}")
    _print(f"total wealth at the worst kernel: {report.total_wealth:.6g}")
    _print(f"lag-weight floor: {report.memory_floor:.6g}")
    payload = {"config": scn.resolved(), "report": report.to_dict()}
    code = 0
    if args.stress:
        saddle = stress_test_saddle(
            scn.params, scn.uncertainty, scn.history, w0=scn.w0, T=scn.T,
            n_paths=scn.n_paths, seed=scn.seed, h=scn.h,
            n_workers=scn.n_workers)
        _print(f"replay utility gap: {saddle.replay_gap:.3g}")
        if saddle.replay_gap != 0.0:
            code = 3
        for o in saddle.outcomes:
            ok = (o.income_gap_min >= -_FLOOR_TOL
                  and o.wealth_gap_min >= -_FLOOR_TOL
                  and o.utility_gap_max == 0.0 and o.admissible)
            _print(f"adversary {o.name}: {'PASS' if ok else 'FAIL'} "
                   f"(income gap {o.income_gap_min:.3g}, wealth gap "
                   f"{o.wealth_gap_min:.3g}, utility gap "
                   f"{o.utility_gap_max:.3g}, floor {o.total_wealth_min:.4g})")
            if not ok:
                code = 3
        payload["stress"] = saddle.to_dict()
    if args.json:
        _dump_json(payload, args.json)
    return code


def _step_path(node, key: str, dotted: str):
    if isinstance(node, dict) and key in node:
        return node[key]
    if isinstance(node, list) and key.lstrip("-").isdigit():
        idx = int(key)
        if -len(node) <= idx < len(node):
            return node[idx]
    raise ConfigError(f"--set path {dotted!r} not found in scenario")


def _set_path(tree: dict, dotted: str, value: float):
    keys = dotted.split(".")
    node = tree
    for key in keys[:-1]:
        node = _step_path(node, key, dotted)
    last = keys[-1]
    _step_path(node, last, dotted)  # existence check
    node[int(last) if isinstance(node, list) else last] = value


def cmd_sweep(args) -> int:
    scn = load_scenario(args.scenario)
    # sweeps run off the scenario as written (shape blocks, shortcuts and
    # all), so any numeric field in the file is a valid --set target
    base = scn.raw_config
    base.pop("name", None)
    try:
        values = [float(v) for v in args.values.split(",") if v.strip()]
    except ValueError as exc:
        raise ConfigError(f"--values must be a comma list of numbers: {exc}")
    if not values:
        raise ConfigError("--values is empty")
    rows = []
    for v in values:
        cfg = json.loads(json.dumps(base))  # deep copy
        _set_path(cfg, args.set, v)
        sub = parse_scenario(cfg, default_name=f"{scn.name}[{args.set}={v}]")
        constants = policy_constants(sub.params, sub.kernel)
        controls = feedback_controls(constants, sub.w0, sub.history)
        value = value_function(constants, sub.w0, sub.history)
        row = {
            args.set: v,
            "value": value,
            "total_wealth": controls.total_wealth,
            "consumption": controls.consumption,
            "bequest": controls.bequest,
            "capitalization": constants.capitalization,
            "spending_scale": constants.spending_scale,
        }
        for i, th in enumerate(controls.portfolio):
            row[f"portfolio{i + 1}"] = th
        if sub.uncertainty is not None:
            row["robust_value"] = solve_robust(sub.params, sub.uncertainty,
                                               sub.w0, sub.history).value
        rows.append(row)
    cols = list(rows[0])
    with open(args.output, "w") as fh:
        for line in _header_lines(scn):
            fh.write(f"# {line}\n")
        fh.write(",".join(cols) + "\n")
        for row in rows:
            fh.write(",".join(f"{row[c]:.12g}" for c in cols) + "\n")
    _print(f"wrote {len(rows)} rows to {args.output}")
    for row in rows:
        _print(f"{args.set}={row[args.set]:g}: value {row['value']:.6g}, "
               f"consumption {row['consumption']:.6g}, portfolio "
               + "/".join(f"{row[c]:.6g}" for c in cols
                          if c.startswith("portfolio")))
    if args.plot:
        _sweep_chart(rows, args.set, cols, args.plot, scn.name)
        _print(f"wrote chart to {args.plot}")
    return 0


def _sweep_chart(rows, param, cols, out, name):
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    xs = [row[param] for row in rows]
    series = [c for c in cols if c != param]
    ncols = 3
    nrows = (len(series) + ncols - 1) // ncols
    fig, axes = plt.subplots(nrows, ncols, figsize=(4.0 * ncols, 2.8 * nrows),
                             squeeze=False)
    for ax, col in zip(axes.flat, series):
        ax.plot(xs, [row[col] for row in rows], marker="o", ms=3)
        ax.set_title(col, fontsize=10)
        ax.set_xlabel(param, fontsize=8)
        ax.tick_params(labelsize=8)
    for ax in axes.flat[len(series):]:
        ax.set_visible(False)
    fig.suptitle(f"{name}: sweep over {param}")
    fig.tight_layout()
    fig.savefig(out, format="svg")
    plt.close(fig)


# ----------------------------------------------------------------------
# parser and entry point


def _add_overrides(p: argparse.ArgumentParser):
    p.add_argument("--paths", type=int, help="override numerics.n_paths")
    p.add_argument("--seed", type=int, help="override numerics.seed")
    p.add_argument("--horizon", type=float, help="override numerics.T")
    p.add_argument("--step", type=float,
                   help="override numerics.h (history is re-sampled)")
    p.add_argument("--workers", type=int, help="override numerics.n_workers")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="stickywage",
        description="Life-cycle consumption and investment with delayed "
                    "(sticky) wage adjustment.",
    )
    parser.add_argument("--version", action="version",
                        version=f"stickywage {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("params-check",
                       help="validate a scenario against the model assumptions")
    p.add_argument("scenario")
    p.add_argument("--json", help="write the full report to this JSON file")
    _add_overrides(p)
    p.set_defaults(func=cmd_params_check)

    p = sub.add_parser("simulate", help="simulate income paths")
    p.add_argument("scenario")
    p.add_argument("--output", help="CSV file for recorded paths")
    p.add_argument("--json", help="JSON file for the summary statistics")
    p.add_argument("--plot", help="SVG fan chart of the recorded paths")
    p.add_argument("--record", type=int, default=200,
                   help="number of paths to record for CSV/plot (default 200)")
    p.add_argument("--noise", action="store_true",
                   help="include the driving increments in the CSV")
    _add_overrides(p)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("verify",
                       help="check the closed forms against Monte Carlo")
    p.add_argument("scenario")
    p.add_argument("--which", action="append", metavar="CHECK",
                   help="comma list from markov, gamma, value, positivity, "
                        "monotonicity, picard (default: all)")
    p.add_argument("--json", help="write the full report to this JSON file")
    _add_overrides(p)
    p.set_defaults(func=cmd_verify)

    p = sub.add_parser("robust", help="solve the worst-case kernel game")
    p.add_argument("scenario")
    p.add_argument("--stress", action="store_true",
                   help="replay the frozen optimal plan under adversarial "
                        "kernels")
    p.add_argument("--json", help="write the full report to this JSON file")
    _add_overrides(p)
    p.set_defaults(func=cmd_robust)

    p = sub.add_parser("sweep",
                       help="closed-form quantities along a parameter grid")
    p.add_argument("scenario")
    p.add_argument("--set", required=True,
                   help="dotted config path, e.g. market.gamma")
    p.add_argument("--values", required=True,
                   help="comma-separated parameter values")
    p.add_argument("--output", required=True, help="CSV output file")
    p.add_argument("--plot", help="SVG chart of the swept quantities")
    p.set_defaults(func=cmd_sweep)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (AssumptionViolation, AdmissibilityError) as exc:
        print(f"assumption violated: {exc}", file=sys.stderr)
        return 2
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 4
    except (DomainError, SimulationError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 4
    except OSError as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
