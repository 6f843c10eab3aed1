"""Command-line entry point: ``hdiv fit | simulate | expand | replicate-sim``.

Exit codes: 0 success, 1 replicate-sim checks failed, 2 input or
configuration error, 3 weak identification, 4 non-convergence.
"""

from __future__ import annotations

import argparse
import json
import sys
import time
import warnings
from pathlib import Path

import numpy as np
import pandas as pd

from hdiv.demand import (
    ExpansionRecipe,
    build_logit_outcome,
    build_sum_instruments,
    elasticity_report,
    expand_characteristics,
)
from hdiv.exceptions import ConfigurationError, ConvergenceWarning, InputError, WeakIdentificationError
from hdiv.io import RunReport, load_config, load_demand_panel, load_iv_dataset, parse_schema
from hdiv.monte_carlo import (
    DEFAULT_ESTIMATORS,
    DEFAULT_SEED,
    ESTIMATORS,
    SimulationConfig,
    run_simulation,
    table_checks,
)
from hdiv.orthogonal_iv import (
    PipelineConfig,
    estimate_double_selection,
    estimate_naive_nonorthogonal,
    estimate_naive_stepwise,
    estimate_ols,
    estimate_tsls,
    estimate_union_2sls,
    fit_nuisances,
)

EXIT_OK, EXIT_CHECKS, EXIT_INPUT, EXIT_WEAK, EXIT_CONVERGENCE = 0, 1, 2, 3, 4
FIT_METHODS = ("double_selection", "naive_stepwise", "naive_nonorthogonal", "union_2sls", "ols", "tsls_no_selection")
NEEDS_INSTRUMENTS = ("double_selection", "naive_stepwise", "naive_nonorthogonal", "union_2sls", "tsls_no_selection")


def _methods(text, allowed, default):
    if not text:
        return list(default)
    out = [m.strip() for m in text.split(",") if m.strip()]
    bad = [m for m in out if m not in allowed]
    if bad:
        raise ConfigurationError(f"unknown methods {bad}; choose from {', '.join(allowed)}")
    return out


def _emit(text: str, out: str | None):
    if out:
        Path(out).write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)


# -- fit ----------------------------------------------------------------------


def _selected_names(nu, cnames, inames, intercept_index):
    # the unpenalized intercept is part of every control set
    sel = {}
    for key, idx in nu.supports.items():
        if key == "d_on_xz_instruments":
            sel[key] = [inames[int(i)] for i in idx]
        else:
            cols = sorted(set(int(i) for i in idx) | ({intercept_index} if intercept_index is not None else set()))
            sel[key] = [cnames[i] for i in cols]
    return sel


def cmd_fit(args) -> int:
    start = time.perf_counter()
    loaded = load_iv_dataset(args.csv, parse_schema(args.schema), intercept=args.intercept)
    data = loaded.data
    methods = _methods(args.methods, FIT_METHODS, ("double_selection",))
    if data.p_z == 0:
        needing = [m for m in methods if m in NEEDS_INSTRUMENTS and m != "double_selection"]
        if needing:
            raise InputError(f"methods {needing} need at least one instrument column")
    config = PipelineConfig(level=args.level)
    shared = {}

    def nuisances():
        if "nu" not in shared:
            shared["nu"] = fit_nuisances(data, config)
        return shared["nu"]

    runners = {
        "double_selection": lambda: estimate_double_selection(data, config, nuisances=nuisances()),
        "naive_stepwise": lambda: estimate_naive_stepwise(data, None, config),
        "naive_nonorthogonal": lambda: estimate_naive_nonorthogonal(data, config, nuisances=nuisances()),
        "union_2sls": lambda: estimate_union_2sls(data, config, nuisances=nuisances()),
        "ols": lambda: estimate_ols(data, args.level),
        "tsls_no_selection": lambda: estimate_tsls(
            data.y, data.d, data.X, data.Z, args.level, method="tsls_no_selection"
        ),
    }
    estimates, weak, unconverged = [], False, False
    for name in methods:
        with warnings.catch_warnings(record=True) as caught:
            warnings.simplefilter("always", ConvergenceWarning)
            try:
                est = runners[name]()
            except WeakIdentificationError as exc:
                weak = True
                estimates.append({"method": name, "error": str(exc)})
                continue
        unconverged |= any(issubclass(w.category, ConvergenceWarning) for w in caught)
        entry = est.to_dict()
        entry["method"] = name
        if name in ("double_selection", "naive_nonorthogonal", "union_2sls") and "nu" in shared:
            entry["selected"] = _selected_names(
                shared["nu"], loaded.control_names, loaded.instrument_names, data.intercept_index
            )
        if loaded.share is not None:
            panel_e = float(est.alpha_hat) * data.d * (1.0 - loaded.share)
            entry["inelastic_count"] = int(np.sum(np.abs(panel_e) < 1))
        estimates.append(entry)
    report = RunReport(
        command="fit",
        estimates=estimates,
        config={
            "csv": str(args.csv),
            "methods": methods,
            "level": args.level,
            "intercept": args.intercept,
            "n": data.n,
            "controls": loaded.control_names,
            "instruments": loaded.instrument_names,
        },
        timing=time.perf_counter() - start,
    )
    _emit(_render(report, args.format), args.out)
    if weak:
        return EXIT_WEAK
    if unconverged:
        return EXIT_CONVERGENCE
    return EXIT_OK


def _render(report, fmt):
    if fmt == "json":
        return report.to_json()
    if fmt == "csv":
        return report.to_csv()
    return report.render_table()


# -- simulate -------------------------------------------------------------------


def _simulation_config(args) -> SimulationConfig:
    values = load_config(args.config) if args.config else {}
    for item in args.set or []:
        if "=" not in item:
            raise ConfigurationError(f"--set expects KEY=VALUE, got {item!r}")
        key, val = item.split("=", 1)
        values[key.strip()] = val.strip()
    if args.seed is not None:
        values["seed"] = args.seed
    return SimulationConfig.from_dict(values)


def _summary_csv(summary) -> str:
    keys = ["bias", "mad", "size", "score_size", "failures", "successes", "invalid"]
    rows = ["estimator," + ",".join(keys)]
    for name in summary.estimators:
        m = summary.metrics[name]
        rows.append(",".join([name] + ["" if m[k] is None else repr(m[k]) for k in keys]))
    return "\n".join(rows) + "\n"


def _simulation_output(summary, fmt, reference=False):
    if fmt == "json":
        return json.dumps(summary.to_dict(), indent=2, sort_keys=True) + "\n"
    if fmt == "csv":
        return _summary_csv(summary)
    return summary.render_table(reference=reference) + "\n"


def cmd_simulate(args) -> int:
    config = _simulation_config(args)
    estimators = _methods(args.methods, ESTIMATORS, DEFAULT_ESTIMATORS)
    summary = run_simulation(config, estimators, workers=args.workers)
    _emit(_simulation_output(summary, args.format), args.out)
    if args.format == "table" and args.out:
        # machine-readable copy beside the table
        Path(args.out).with_suffix(".json").write_text(_simulation_output(summary, "json"), encoding="utf-8")
    return EXIT_OK


def cmd_replicate_sim(args) -> int:
    values = {"seed": args.seed if args.seed is not None else DEFAULT_SEED}
    if args.replications is not None:
        values["replications"] = args.replications
    config = SimulationConfig.from_dict(values)
    summary = run_simulation(config, DEFAULT_ESTIMATORS, workers=args.workers)
    checks = table_checks(summary.metrics)
    if args.format == "table":
        lines = [
            f"Default design: n={config.n}, p_x={config.p_x}, p_z={config.p_z}, "
            f"{config.replications} replications, seed {config.seed}",
            "",
            summary.render_table(reference=True),
            "",
        ]
        lines += [f"{'PASS' if ok else 'FAIL'}  {label}" for label, ok in checks]
        text = "\n".join(lines) + "\n"
    else:
        text = _simulation_output(summary, args.format)
    _emit(text, args.out)
    return EXIT_OK if all(ok for _, ok in checks) else EXIT_CHECKS


# -- expand ---------------------------------------------------------------------


def cmd_expand(args) -> int:
    panel = load_demand_panel(args.csv, parse_schema(args.schema))
    recipe = ExpansionRecipe.base_only() if args.recipe == "base" else ExpansionRecipe()
    X, xnames = expand_characteristics(panel, recipe)
    Z, znames = build_sum_instruments(panel, X, xnames)
    out = pd.DataFrame(
        {
            "market": panel.market,
            "firm": panel.firm,
            "product": panel.product,
            "share": panel.share,
            "outside_share": panel.outside_share,
            "price": panel.price,
            "logit_share": build_logit_outcome(panel),
        }
    )
    out = pd.concat(
        [out, pd.DataFrame(X, columns=[f"x_{c}" for c in xnames]), pd.DataFrame(Z, columns=[f"z_{c}" for c in znames])],
        axis=1,
    )
    if args.out:
        out.to_csv(args.out, index=False, float_format="%.17g")
    print(f"controls: {X.shape[1]}, instruments: {Z.shape[1]}")
    if args.alpha is not None:
        print(f"inelastic products at alpha={args.alpha}: {elasticity_report(panel, args.alpha).inelastic_count}")
    return EXIT_OK


# -- parser -----------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="hdiv", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, formats=True):
        if formats:
            p.add_argument("--format", choices=("table", "json", "csv"), default="table")
        p.add_argument("--out", help="write output to this file instead of stdout")

    fit = sub.add_parser("fit", help="estimate the coefficient on the endogenous variable from a CSV")
    fit.add_argument("csv")
    fit.add_argument("--schema", required=True, help="JSON file, JSON object or col=role,... (patterns allowed)")
    fit.add_argument("--methods", help=f"comma-separated subset of {', '.join(FIT_METHODS)}")
    fit.add_argument("--level", type=float, default=0.95)
    fit.add_argument("--intercept", action=argparse.BooleanOptionalAction, default=True)
    common(fit)
    fit.set_defaults(func=cmd_fit)

    sim = sub.add_parser("simulate", help="run the Monte Carlo design")
    sim.add_argument("--config", help="JSON or TOML file with simulation settings")
    sim.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one setting")
    sim.add_argument("--seed", type=int)
    sim.add_argument("--methods", help=f"comma-separated subset of {', '.join(ESTIMATORS)}")
    sim.add_argument("--workers", type=int, help="processes (default: HDIV_THREADS or CPU count)")
    common(sim)
    sim.set_defaults(func=cmd_simulate)

    rep = sub.add_parser("replicate-sim", help="default design with reference numbers and checks")
    rep.add_argument("--seed", type=int)
    rep.add_argument("--replications", type=int)
    rep.add_argument("--workers", type=int)
    common(rep)
    rep.set_defaults(func=cmd_replicate_sim)

    exp = sub.add_parser("expand", help="expanded controls and sum instruments for a demand panel")
    exp.add_argument("csv")
    exp.add_argument("--schema", required=True)
    exp.add_argument("--recipe", choices=("full", "base"), default="full")
    exp.add_argument("--alpha", type=float, help="also report the inelastic count at this price coefficient")
    common(exp, formats=False)
    exp.set_defaults(func=cmd_expand)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if getattr(args, "level", None) is not None and not 0 < args.level < 1:
        print("error: --level must lie in (0, 1)", file=sys.stderr)
        return EXIT_INPUT
    try:
        return args.func(args)
    except (InputError, ConfigurationError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except WeakIdentificationError as exc:
        print(f"weak identification: {exc}", file=sys.stderr)
        return EXIT_WEAK


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
