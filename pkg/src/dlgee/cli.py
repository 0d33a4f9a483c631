"""Command-line interface: fit CSV datasets, run simulation suites, validate files.

Exit codes: 0 success, 1 I/O or file-format problem, 2 model/configuration
problem.  Tables round to 4 significant digits; JSON keeps full precision.
"""

from __future__ import annotations

import argparse
import json
import sys

from . import __version__
from .data import ColumnSpec, FitConfig, load_csv, validate
from .errors import InputError, ModelError, ValidationError
from .primary import fit_primary
from .simulation import PRESET_METHODS, PRESETS, KNOWN_METHODS, load_scenario, run_mc


def _split_names(raw: str | None) -> tuple[str, ...]:
    if not raw:
        return ()
    return tuple(name.strip() for name in raw.split(",") if name.strip())


def _column_spec(args) -> ColumnSpec:
    try:
        delta = float(args.delta)
    except ValueError:
        delta = args.delta
    return ColumnSpec(
        y=args.y,
        x=args.x,
        delta=delta,
        u=_split_names(args.u),
        z=_split_names(args.z),
        observed=args.observed,
    )


def coefficient_table(payload: dict, names: list[str]) -> str:
    """Render the coefficient table from a PrimaryFit JSON payload.

    Working from the payload (not the fit object) keeps the table a pure
    function of the serialized output, so re-reading a fit JSON reproduces the
    rendering byte for byte.
    """
    header = f"{'term':<14}{'estimate':>12}{'std error':>12}{'p-value':>12}"
    lines = [header, "-" * len(header)]
    for name, est, se, pv in zip(names, payload["beta"], payload["std_errors"], payload["p_values"]):
        lines.append(f"{name:<14}{est:>12.4g}{se:>12.4g}{pv:>12.4g}")
    lines.append(
        f"(variance: {payload['variance_method']}, n = {payload['n']}, observed = {payload['n_obs']})"
    )
    return "\n".join(lines)


def cmd_fit(args) -> int:
    spec = _column_spec(args)
    d = load_csv(args.input, spec)
    config = FitConfig(
        link=args.link,
        auxiliary="parametric_normal" if args.aux == "parametric" else "semiparametric_aft",
        transform={"negate": "negate", "negexp": "neg_exp", None: None}[args.transform],
        tau_override=args.tau,
        normalize_htilde=not args.no_normalize_htilde,
        seed=args.seed,
    )
    variance = args.variance
    if variance is None:
        variance = "sscf" if args.aux == "semiparametric" else "theorem1"
    fit = fit_primary(d, config, variance=variance)
    fit_dict = fit.to_dict()
    payload = json.dumps(fit_dict, indent=2, sort_keys=True)
    names = ["intercept", spec.x] + list(spec.u)
    if args.out:
        with open(args.out, "w", encoding="utf-8") as fh:
            fh.write(payload + "\n")
    if args.format == "json":
        print(payload)
    else:
        print(coefficient_table(fit_dict, names))
    if args.dump_aux:
        from .auxiliary import fit_auxiliary

        aux = fit_auxiliary(d, config) if (~d.x_observed).any() else None
        aux_payload = json.dumps(aux.to_dict() if aux else None, indent=2, sort_keys=True)
        if args.out:
            with open(str(args.out) + ".aux.json", "w", encoding="utf-8") as fh:
                fh.write(aux_payload + "\n")
        else:
            print(aux_payload)
    return 0 if fit.converged else 2


def cmd_simulate(args) -> int:
    if args.preset is None and args.scenario is None:
        raise ModelError("simulate needs --preset or --scenario")
    if args.preset is not None:
        if args.preset not in PRESETS:
            raise ModelError(f"unknown preset '{args.preset}'")
        cfg = PRESETS[args.preset]
        methods = PRESET_METHODS[args.preset]
    else:
        cfg = load_scenario(args.scenario)
        methods = ("semi_para",)
    overrides = {}
    if args.n is not None:
        overrides["n"] = args.n
    if args.mc_reps is not None:
        overrides["mc_reps"] = args.mc_reps
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.missing is not None:
        overrides["target_missing_frac"] = args.missing
    if args.error is not None:
        overrides["error_kind"] = args.error
    if overrides:
        from dataclasses import replace

        cfg = replace(cfg, **overrides)
    if args.methods:
        methods = _split_names(args.methods)
        for m in methods:
            if m not in KNOWN_METHODS:
                raise ModelError(f"unknown method '{m}'")
    report = run_mc(cfg, methods, jobs=args.jobs)
    if args.out:
        with open(args.out, "w", encoding="utf-8") as fh:
            fh.write(report.to_json() + "\n")
    print(report.to_json() if args.format == "json" else report.render_table())
    return 0


def cmd_validate(args) -> int:
    spec = _column_spec(args)
    d = load_csv(args.input, spec, check=False)
    violations = validate(d)
    print(json.dumps([v.to_dict() for v in violations], indent=2))
    return 0 if not violations else 2


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="dlgee",
        description="Regression with a detection-limit-censored explanatory variable.",
    )
    parser.add_argument("--version", action="version", version=f"dlgee {__version__}")
    sub = parser.add_subparsers(dest="subcommand", required=True)

    def add_columns(p):
        p.add_argument("--input", required=True, help="input CSV path")
        p.add_argument("--y", required=True, help="response column")
        p.add_argument("--x", required=True, help="censored covariate column")
        p.add_argument("--delta", required=True, help="detection limit (number or column name)")
        p.add_argument("--u", default="", help="comma-separated uncensored covariate columns")
        p.add_argument("--z", default="", help="comma-separated surrogate columns")
        p.add_argument("--observed", default=None, help="optional 0/1 observed-indicator column")

    fit = sub.add_parser("fit", help="fit a dataset from CSV")
    add_columns(fit)
    fit.add_argument("--link", choices=["identity", "logit"], default="identity")
    fit.add_argument("--aux", choices=["parametric", "semiparametric"], default="parametric")
    fit.add_argument("--transform", choices=["negate", "negexp"], default=None)
    fit.add_argument(
        "--variance",
        choices=["known", "theorem1", "sscf"],
        default=None,
        help="default: theorem1 for the parametric auxiliary, sscf for the semiparametric",
    )
    fit.add_argument("--tau", type=float, default=None, help="truncation constant override")
    fit.add_argument("--no-normalize-htilde", action="store_true")
    fit.add_argument("--seed", type=int, default=0)
    fit.add_argument("--out", default=None, help="write the fit JSON here")
    fit.add_argument("--format", choices=["json", "table"], default="table")
    fit.add_argument("--dump-aux", action="store_true", help="also emit the auxiliary fit JSON")
    fit.set_defaults(func=cmd_fit)

    sim = sub.add_parser("simulate", help="run a Monte Carlo scenario")
    sim.add_argument("--preset", default=None, help=f"one of {', '.join(sorted(PRESETS))}")
    sim.add_argument("--scenario", default=None, help="scenario config file (.json or .toml)")
    sim.add_argument("--n", type=int, default=None)
    sim.add_argument("--mc-reps", type=int, default=None)
    sim.add_argument("--seed", type=int, default=None)
    sim.add_argument("--missing", type=float, default=None, help="target censoring fraction")
    sim.add_argument("--error", choices=["normal", "centered_chisq"], default=None)
    sim.add_argument("--methods", default=None, help="comma-separated method list")
    sim.add_argument("--jobs", type=int, default=1, help="concurrent replications")
    sim.add_argument("--out", default=None, help="write the report JSON here")
    sim.add_argument("--format", choices=["json", "table"], default="table")
    sim.set_defaults(func=cmd_simulate)

    val = sub.add_parser("validate", help="validate a CSV dataset")
    add_columns(val)
    val.set_defaults(func=cmd_validate)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except InputError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except ValidationError as exc:
        for v in exc.violations:
            print(f"error: {v.code}: {v.message}", file=sys.stderr)
        return 2
    except ModelError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
