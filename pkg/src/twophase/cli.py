"""Batch command-line front end: simulate | select | design | estimate.

All parameters live in a single TOML config file; a few global flags
(--seed, --output, --workers, --n-reps) override file keys, and environment
variables prefixed TWOPHASE_ (for example TWOPHASE_SEED) override both for CI
use. Outputs are deterministic: rerunning any command with the same config
and seed produces byte-identical files.

Exit codes: 0 success, 2 input error, 3 infeasible design, 4 numerical
non-convergence.
"""

from __future__ import annotations

import argparse
import csv
import math
import os
import sys

import numpy as np

try:
    import tomllib  # py311+
except ModuleNotFoundError:  # pragma: no cover
    import tomli as tomllib

from .config import Lambda1Spec, SimulationConfig
from .costs import CostModel, outcome_cost_from_dict
from .design import DesignInputs, optimal_lambda2
from .errors import ConvergenceError, InfeasibleDesignError, InputError, TwophaseError
from .estimator import InfluenceContext, bootstrap_ci
from .featurespec import FeatureSpec, columns_from_arrays, linear_spec
from .frames import FLOAT_FMT, IndividualLevel, read_external, read_frame
from .regress import fit_joint_mean_variance
from .selection import SelectionModel, fit_composed, fit_direct, known_selection
from .serialize import config_hash, dump_json, load_json, tool_version
from .study import bounded_variance_fn, run_study

EXIT_OK = 0
EXIT_INPUT = 2
EXIT_INFEASIBLE = 3
EXIT_NONCONVERGENCE = 4


def main(argv=None) -> int:
    parser = _build_parser()
    args = parser.parse_args(argv)
    try:
        raw = _read_config_bytes(args.config)
        config = tomllib.loads(raw.decode())
        _apply_env_overrides(args)
        meta = {
            "tool_version": tool_version(),
            "config_hash": config_hash(raw),
            "seed": _resolve_seed(args, config),
        }
        outdir = args.output or config.get("output", ".")
        os.makedirs(outdir, exist_ok=True)
        handler = {
            "simulate": cmd_simulate,
            "select": cmd_select,
            "design": cmd_design,
            "estimate": cmd_estimate,
        }[args.command]
        handler(args, config, outdir, meta)
        return EXIT_OK
    except InfeasibleDesignError as exc:
        _fail(exc, extra=f"feasible n_e range: {exc.ne_range}" if exc.ne_range else None)
        return EXIT_INFEASIBLE
    except ConvergenceError as exc:
        _fail(exc)
        return EXIT_NONCONVERGENCE
    except (InputError, FileNotFoundError, KeyError, tomllib.TOMLDecodeError) as exc:
        _fail(exc)
        return EXIT_INPUT
    except TwophaseError as exc:  # pragma: no cover - catch-all for subclasses
        _fail(exc)
        return EXIT_INPUT


def _fail(exc: Exception, extra: str | None = None) -> None:
    print(f"error: {exc}", file=sys.stderr)
    if extra:
        print(extra, file=sys.stderr)


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="twophase",
        description="Budget-optimal two-phase sampling design and estimation",
    )
    parser.add_argument("command", choices=["simulate", "select", "design", "estimate"])
    parser.add_argument("--config", required=True, help="TOML configuration file")
    parser.add_argument("--seed", type=int, default=None, help="override the config seed")
    parser.add_argument("--output", default=None, help="output directory")
    parser.add_argument("--workers", type=int, default=None, help="parallel worker cap")
    parser.add_argument("--n-reps", type=int, default=None, help="override replication count")
    parser.add_argument(
        "--emit-plot-data", action="store_true",
        help="also write the relative-efficiency bar-chart values (simulate)",
    )
    return parser


def _read_config_bytes(path: str) -> bytes:
    with open(path, "rb") as fh:
        return fh.read()


def _apply_env_overrides(args) -> None:
    env = os.environ
    if args.seed is None and "TWOPHASE_SEED" in env:
        args.seed = int(env["TWOPHASE_SEED"])
    if args.output is None and "TWOPHASE_OUTPUT" in env:
        args.output = env["TWOPHASE_OUTPUT"]
    if args.workers is None and "TWOPHASE_WORKERS" in env:
        args.workers = int(env["TWOPHASE_WORKERS"])


def _resolve_seed(args, config) -> int:
    if args.seed is not None:
        return int(args.seed)
    return int(config.get("seed", 0))


def _cost_model(config) -> CostModel:
    if "cost" not in config:
        raise InputError("config needs a [cost] table")
    cost = config["cost"]
    return CostModel(
        total_budget=float(cost["total_budget"]),
        initial_cost=float(cost["initial_cost"]),
        per_record_cost=float(cost["per_record_cost"]),
        outcome_cost=outcome_cost_from_dict(cost["outcome"]),
    )


def _selection_from_config(table: dict, base_dir: str = ".") -> SelectionModel:
    if "selection" in table:
        return SelectionModel.from_dict(load_json(os.path.join(base_dir, table["selection"])))
    if "lambda1" in table:
        spec = Lambda1Spec.from_dict(table["lambda1"])
        return known_selection(spec.evaluate)
    raise InputError("need either a selection artifact path or a [*.lambda1] table")


# --- simulate -----------------------------------------------------------------


def cmd_simulate(args, config, outdir, meta) -> None:
    sim = dict(config.get("simulate", {}))
    seed = meta["seed"]
    n_reps = args.n_reps if args.n_reps is not None else int(sim.get("n_reps", 2000))
    sim_config = SimulationConfig(
        n=int(sim.get("n", 10_000)),
        n_e=int(sim.get("n_e", 5_000)),
        n_p=int(sim.get("n_p", 200)),
        alpha=tuple(sim.get("alpha", (0.1, 3.0, 0.01))),
        gamma=tuple(sim["gamma"]) if "gamma" in sim else None,
        pve_target=sim.get("pve_target"),
        cost=_cost_model(config),
        n_reps=n_reps,
        approaches=tuple(sim.get("approaches", ("1", "2", "3a", "3b", "3c"))),
        lambda1_mode=sim.get("lambda1_mode", "known"),
        lambda1=Lambda1Spec.from_dict(sim.get("lambda1", {})),
        selection_mode=sim.get("selection_mode", "top_ne"),
        seed=seed,
    )
    result = run_study(
        sim_config,
        workers=args.workers or int(sim.get("workers", 1)),
        baseline_population=sim.get("baseline_population", "nominal"),
        robust_means=bool(sim.get("robust_means", False)),
        estimation_rows=sim.get("estimation_rows", "measured"),
    )
    payload = result.to_dict()
    if n_reps < 2 or len(sim_config.approaches) < 2:
        print("warning: relative-efficiency table suppressed "
              "(needs >= 2 replications and >= 2 approaches)", file=sys.stderr)
        payload["re_table"] = None
    dump_json(payload, os.path.join(outdir, "study.json"), meta=meta)
    _write_records_csv(result, os.path.join(outdir, "replications.csv"))
    if args.emit_plot_data and payload["re_table"]:
        _write_plot_csv(payload["re_table"], os.path.join(outdir, "re_plot.csv"))
    print(f"wrote {outdir}/study.json and {outdir}/replications.csv")


def _write_records_csv(result, path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["rep", "approach", "beta_hat", "feasible", "seed"])
        for rep, approach, beta, feasible, seed in result.records():
            beta_s = "" if math.isnan(beta) else FLOAT_FMT % beta
            writer.writerow([rep, approach, beta_s, int(feasible), seed])


def _write_plot_csv(re_table, path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["label", "re", "jackknife_se"])
        for a, row in sorted(re_table["vs_1"].items()):
            writer.writerow([f"{a}_vs_1", FLOAT_FMT % row["re"], FLOAT_FMT % row["jackknife_se"]])
        for name, row in sorted(re_table["contrasts"].items()):
            writer.writerow([name, FLOAT_FMT % row["re"], FLOAT_FMT % row["jackknife_se"]])


# --- select -------------------------------------------------------------------


def cmd_select(args, config, outdir, meta) -> None:
    sel = config.get("select")
    if not sel:
        raise InputError("config needs a [select] table")
    mode = sel.get("mode", "direct")
    clip = tuple(sel.get("clip", (1e-3, 1 - 1e-3)))
    if mode == "direct":
        frame = read_frame(sel["frame"])
        model = fit_direct(frame, clip_bounds=clip)
    elif mode == "composed":
        ehr_frame = read_frame(sel["ehr"])
        external = read_external(sel["external"])
        model = fit_composed(
            ehr_frame.w0[ehr_frame.ehr_ids], external, clip_bounds=clip
        )
    else:
        raise InputError(f"unknown selection mode {mode!r}")
    dump_json(model.to_dict(), os.path.join(outdir, "selection.json"), meta=meta)
    print(f"wrote {outdir}/selection.json")


# --- design -------------------------------------------------------------------


def cmd_design(args, config, outdir, meta) -> None:
    des = config.get("design")
    if not des:
        raise InputError("config needs a [design] table")
    frame = read_frame(des["frame"])
    selection = _selection_from_config(des)
    cost = _cost_model(config)

    pilot = frame.pilot_ids
    if pilot.size == 0:
        raise InputError("design needs pilot rows (pilot=1 with y) in the frame")
    mean_spec = FeatureSpec.from_list(des.get("mean_terms", _default_mean_terms(frame)))
    var_spec = FeatureSpec.from_list(des.get("variance_terms", _default_var_terms(frame)))
    cols_pilot = columns_from_arrays(frame.w0[pilot], frame.w1[pilot])
    _, var_fit = fit_joint_mean_variance(cols_pilot, frame.y[pilot], mean_spec, var_spec)

    ehr = frame.ehr_ids
    lam1 = selection.evaluate(frame.w0[ehr])
    weighting = des.get("population_weights", "inverse")
    if weighting == "inverse":
        inv = 1.0 / lam1
        p1 = inv / inv.sum()
        n_model = float(des.get("n", inv.sum()))
    elif weighting == "equal":
        p1 = np.full(ehr.size, 1.0 / ehr.size)
        n_model = float(des["n"])
    else:
        raise InputError(f"unknown population_weights {weighting!r}")

    v2_fn = bounded_variance_fn(var_fit, cols_pilot)
    inputs = DesignInputs(
        support_w0=frame.w0[ehr],
        support_w1=frame.w1[ehr],
        p1=p1,
        v2=v2_fn(frame.w0[ehr], frame.w1[ehr]),
        v1=np.zeros(ehr.size),
        selection=selection,
        cost=cost,
        n=n_model,
        n_e=float(des.get("n_e", frame.n_e)),
    )
    solution = optimal_lambda2(inputs)
    if not solution.feasible:
        raise InfeasibleDesignError(
            f"design infeasible: {solution.cap_violations} support points exceed "
            f"probability 1",
            ne_range=solution.ne_range,
        )
    payload = solution.to_dict()
    payload["variance_model"] = var_fit.to_dict()
    dump_json(payload, os.path.join(outdir, "design.json"), meta=meta)
    with open(os.path.join(outdir, "lambda2_star.csv"), "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["id", "lambda2_star"])
        for row, lam2 in zip(ehr, solution.lambda2):
            writer.writerow([int(row) + 1, FLOAT_FMT % lam2])
    print(f"wrote {outdir}/design.json and {outdir}/lambda2_star.csv")


def _default_mean_terms(frame) -> list[str]:
    names = [f"w0_{j + 1}" for j in range(frame.w0.shape[1])]
    names += [f"w1_{j + 1}" for j in range(frame.w1.shape[1])]
    return linear_spec(names).to_list()


def _default_var_terms(frame) -> list[str]:
    names = [f"w0_{j + 1}" for j in range(frame.w0.shape[1])]
    names += [f"w1_{j + 1}" for j in range(frame.w1.shape[1])]
    return linear_spec(names, squares=True).to_list()


# --- estimate -----------------------------------------------------------------


def cmd_estimate(args, config, outdir, meta) -> None:
    est = config.get("estimate")
    if not est:
        raise InputError("config needs an [estimate] table")
    frame = read_frame(est["frame"])
    selection = _selection_from_config(est)
    lam2_col = _lambda2_from_csv(est["lambda2"], frame) if "lambda2" in est else frame.lambda2
    frame = frame.with_second_phase(r2=frame.r2, lambda2=lam2_col) if "lambda2" in est else frame

    ehr = frame.ehr_ids
    mean_spec_w0 = FeatureSpec.from_list(
        est.get("mean_terms_w0", linear_spec([f"w0_{j + 1}" for j in range(frame.w0.shape[1])]).to_list())
    )
    mean_spec_w1 = FeatureSpec.from_list(est.get("mean_terms_w1", _default_mean_terms(frame)))
    fit_rows = est.get("fit_rows", "measured")
    rows = {
        "pilot": frame.pilot_ids,
        "second_phase": frame.second_phase_ids,
        "measured": np.flatnonzero(~np.isnan(frame.y)),
    }.get(fit_rows)
    if rows is None:
        raise InputError(f"unknown fit_rows {fit_rows!r}")
    if rows.size == 0:
        raise InputError(f"no rows with outcomes in fitting pool {fit_rows!r}")
    from .regress import fit_mean

    cols = columns_from_arrays(frame.w0[rows], frame.w1[rows])
    mean_w1 = fit_mean(cols, frame.y[rows], mean_spec_w1)
    mean_w0 = fit_mean(columns_from_arrays(frame.w0[rows]), frame.y[rows], mean_spec_w0)
    ctx = InfluenceContext(
        selection=selection,
        mean_w0=mean_w0,
        mean_w1=mean_w1,
        w0_source=IndividualLevel(frame),
    )
    result = bootstrap_ci(
        ctx,
        frame,
        n_boot=int(est.get("n_boot", 1000)),
        seed=meta["seed"],
        refit=bool(est.get("refit", True)),
        fit_rows=fit_rows,
        n_population=float(est["n"]) if "n" in est else None,
    )
    dump_json(result.to_dict(), os.path.join(outdir, "estimate.json"), meta=meta)
    print(f"wrote {outdir}/estimate.json")


def _lambda2_from_csv(path, frame) -> np.ndarray:
    lam2 = np.full(frame.n, np.nan)
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [h.strip() for h in header[:2]] != ["id", "lambda2_star"]:
            raise InputError(f"{path}: expected header id,lambda2_star")
        for i, row in enumerate(reader, start=1):
            rid = int(row[0])
            if not 1 <= rid <= frame.n:
                raise InputError(f"{path}: id {rid} outside 1..{frame.n} at row {i}")
            lam2[rid - 1] = float(row[1])
    return lam2


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
