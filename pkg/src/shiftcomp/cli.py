"""Command-line front end: config parsing, runs, comparisons, verification.

Config files are YAML documents validated against a JSON schema (unknown
keys rejected, errors reported with their field path). A document may
name other documents under ``include``; included documents are merged
first and the including document wins key by key.

Outputs are CSV files with a fixed column order, 17 significant digits
and newline termination, written atomically (temp file + rename).

Exit codes: 0 converged/completed, 1 config or usage error, 2 budget
exhausted before the target, 3 divergence.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import tempfile
from concurrent.futures import ThreadPoolExecutor

import jsonschema
import numpy as np
import yaml

from shiftcomp import datagen, verify
from shiftcomp.algorithms import STEPSIZE_RULES, StepSizes, auto_stepsizes
from shiftcomp.compressors import CompressorSpec
from shiftcomp.harness import (
    RunConfig,
    RunRecord,
    make_ridge_instance,
    run,
    run_monte_carlo,
)
from shiftcomp.problems import Problem, tune_regularizer_for_condition
from shiftcomp.shifts import STRATEGY_KINDS, ShiftStrategy

OUT_DIR_ENV = "SHIFTCOMP_OUT_DIR"

EXIT_OK = 0
EXIT_CONFIG = 1
EXIT_BUDGET = 2
EXIT_DIVERGED = 3

_STATUS_EXIT = {"converged": EXIT_OK, "completed": EXIT_OK, "budget": EXIT_BUDGET, "diverged": EXIT_DIVERGED}


class ConfigError(Exception):
    """Invalid configuration; the message names the offending field."""


# -- schema -------------------------------------------------------------------

_COMPRESSOR_SCHEMA = {
    "type": "object",
    "properties": {
        "kind": {"enum": ["identity", "zero", "rand_k", "top_k", "natural_dithering", "bernoulli"]},
        "K": {"type": "integer", "minimum": 1},
        "q": {"type": "number", "exclusiveMinimum": 0, "maximum": 1},
        "s": {"type": "integer", "minimum": 1},
        "p": {"type": "number", "exclusiveMinimum": 0, "maximum": 1},
    },
    "required": ["kind"],
    "additionalProperties": False,
}

_STRATEGY_SCHEMA = {
    "type": "object",
    "properties": {
        "kind": {"enum": list(STRATEGY_KINDS)},
        "alpha": {"anyOf": [{"type": "number", "exclusiveMinimum": 0}, {"const": "auto"}]},
        "p": {"anyOf": [{"type": "number", "exclusiveMinimum": 0, "maximum": 1}, {"const": "auto"}]},
        "inner": {
            "anyOf": [
                _COMPRESSOR_SCHEMA,
                {"type": "array", "items": _COMPRESSOR_SCHEMA},
            ]
        },
    },
    "required": ["kind"],
    "additionalProperties": False,
}

_STEPS_SCHEMA = {
    "type": "object",
    "properties": {
        "gamma": {"type": "number", "exclusiveMinimum": 0},
        "eta": {"type": "number", "exclusiveMinimum": 0},
        "alpha": {"type": "number", "exclusiveMinimum": 0},
        "M": {"type": "number", "exclusiveMinimum": 0},
        "p": {"type": "number", "exclusiveMinimum": 0, "maximum": 1},
    },
    "required": ["gamma"],
    "additionalProperties": False,
}

_RUN_SCHEMA = {
    "type": "object",
    "properties": {
        "method": {"enum": ["dcgd", "gdci", "vr_gdci"]},
        "compressor": {
            "anyOf": [_COMPRESSOR_SCHEMA, {"type": "array", "items": _COMPRESSOR_SCHEMA}]
        },
        "strategy": _STRATEGY_SCHEMA,
        "steps": _STEPS_SCHEMA,
        "stepsize_rule": {"enum": list(STEPSIZE_RULES)},
        "stepsize_multiplier": {"type": "number", "exclusiveMinimum": 0},
        "M": {"type": "number", "exclusiveMinimum": 0},
        "M_multiplier": {"type": "number", "exclusiveMinimum": 0},
        "iters": {"type": "integer", "minimum": 1},
        "seed": {"type": "integer", "minimum": 0},
        "seeds": {"type": "integer", "minimum": 1},
        "eps": {"type": "number", "exclusiveMinimum": 0},
        "budget_bits": {"type": "integer", "minimum": 1},
        "record_every": {"type": "integer", "minimum": 1},
        "x0_scale": {"type": "number", "exclusiveMinimum": 0},
        "x0_scale_is_variance": {"type": "boolean"},
        "gdci_formulation": {"enum": ["model", "estimator"]},
        "track_lyapunov": {"type": "boolean"},
    },
    "required": ["method", "compressor"],
    "additionalProperties": False,
}

_COMPARE_ENTRY_SCHEMA = {
    "type": "object",
    "properties": {"name": {"type": "string", "minLength": 1}, "run": {"type": "object"}},
    "required": ["name", "run"],
    "additionalProperties": False,
}

CONFIG_SCHEMA = {
    "type": "object",
    "properties": {
        "include": {"anyOf": [{"type": "string"}, {"type": "array", "items": {"type": "string"}}]},
        "problem": {
            "type": "object",
            "properties": {
                "kind": {"enum": ["ridge", "logistic"]},
                "source": {"enum": ["synthetic", "libsvm"]},
                "m": {"type": "integer", "minimum": 1},
                "d": {"type": "integer", "minimum": 1},
                "n_informative": {"type": "integer", "minimum": 1},
                "noise_std": {"type": "number", "minimum": 0},
                "interpolation": {"type": "boolean"},
                "data_seed": {"type": "integer", "minimum": 0},
                "path": {"type": "string"},
                "normalize": {"type": "boolean"},
                "lam": {"type": "number", "minimum": 0},
                "target_kappa": {"type": "number", "exclusiveMinimum": 1},
                "n_workers": {"type": "integer", "minimum": 1},
                "shard_seed": {"type": "integer", "minimum": 0},
            },
            "required": ["kind"],
            "additionalProperties": False,
        },
        "run": {"type": "object"},
        "compare": {"type": "array", "items": _COMPARE_ENTRY_SCHEMA, "minItems": 1},
    },
    "required": ["problem"],
    "additionalProperties": False,
}


def _merge(base: dict, over: dict) -> dict:
    """Key-by-key merge; nested dicts merge recursively, the overlay wins."""
    out = dict(base)
    for key, val in over.items():
        if key in out and isinstance(out[key], dict) and isinstance(val, dict):
            out[key] = _merge(out[key], val)
        else:
            out[key] = val
    return out


def load_config(path: str, _seen: frozenset = frozenset()) -> dict:
    """Load a YAML config, resolve includes, and validate against the schema."""
    path = os.path.abspath(path)
    if path in _seen:
        raise ConfigError(f"include cycle through {path}")
    try:
        with open(path) as fh:
            doc = yaml.safe_load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}")
    except yaml.YAMLError as exc:
        raise ConfigError(f"invalid YAML in {path}: {exc}")
    if not isinstance(doc, dict):
        raise ConfigError(f"{path}: top level must be a mapping")

    includes = doc.pop("include", [])
    if isinstance(includes, str):
        includes = [includes]
    merged: dict = {}
    for inc in includes:
        inc_path = os.path.join(os.path.dirname(path), inc)
        merged = _merge(merged, load_config(inc_path, _seen | {path}))
    merged = _merge(merged, doc)

    _validate(merged, CONFIG_SCHEMA)
    # run blocks are validated individually so compare entries get the
    # same treatment after merging with the shared block
    if "run" in merged and "compare" not in merged:
        _validate(merged["run"], _RUN_SCHEMA, prefix="run")
    for i, entry in enumerate(merged.get("compare", [])):
        _validate(
            _merge(merged.get("run", {}), entry["run"]),
            _RUN_SCHEMA,
            prefix=f"compare/{i}/run",
        )
    _check_run_consistency(merged)
    return merged


def _validate(doc, schema, prefix: str = "") -> None:
    try:
        jsonschema.validate(doc, schema)
    except jsonschema.ValidationError as exc:
        parts = ([prefix] if prefix else []) + [str(p) for p in exc.absolute_path]
        loc = "/".join(parts) or "(top level)"
        raise ConfigError(f"config error at {loc}: {exc.message}")


def _check_run_consistency(doc: dict) -> None:
    blocks = []
    if "run" in doc and "compare" not in doc:
        blocks.append(("run", doc["run"]))
    for i, entry in enumerate(doc.get("compare", [])):
        blocks.append((f"compare/{i}/run", _merge(doc.get("run", {}), entry["run"])))
    for loc, block in blocks:
        if "steps" not in block and "stepsize_rule" not in block:
            raise ConfigError(f"config error at {loc}: need either steps or stepsize_rule")
        if ("M" in block or "M_multiplier" in block) and "stepsize_rule" not in block:
            raise ConfigError(f"config error at {loc}: M overrides need a stepsize_rule")


# -- builders -----------------------------------------------------------------


def build_problem(block: dict) -> Problem:
    kind = block["kind"]
    n_workers = block.get("n_workers", 10)
    source = block.get("source", "synthetic")
    if source == "libsvm":
        if "path" not in block:
            raise ConfigError("config error at problem/path: libsvm source needs a file path")
        dataset = datagen.parse_libsvm(block["path"])
        if block.get("normalize", False):
            dataset = datagen.normalize_features(dataset)
    else:
        m = block.get("m", 100)
        d = block.get("d", 80)
        if block.get("interpolation", False):
            dataset, _ = datagen.make_interpolation_regression(
                m, d, n_workers, seed=block.get("data_seed", 0)
            )
        else:
            dataset, _ = datagen.make_regression(
                m,
                d,
                n_informative=block.get("n_informative", 10),
                noise_std=block.get("noise_std", 0.0),
                seed=block.get("data_seed", 0),
            )
    lam = block.get("lam", 0.0 if block.get("interpolation", False) else 1.0 / dataset.m)
    problem = Problem.from_dataset(kind, dataset, lam, n_workers, block.get("shard_seed", 0))
    if "target_kappa" in block:
        lam = tune_regularizer_for_condition(problem, block["target_kappa"])
        problem = problem.with_lambda(lam)
    return problem


def _build_specs(block, d: int, n: int) -> list[CompressorSpec]:
    if isinstance(block, dict):
        return [CompressorSpec.from_config(block, d) for _ in range(n)]
    if len(block) != n:
        raise ConfigError(f"config error at run/compressor: need {n} entries, got {len(block)}")
    return [CompressorSpec.from_config(b, d) for b in block]


def _build_strategy(block, d: int, n: int) -> ShiftStrategy:
    inner = block.get("inner")
    if inner is not None:
        if isinstance(inner, dict):
            inner = [CompressorSpec.from_config(inner, d) for _ in range(n)]
        else:
            inner = [CompressorSpec.from_config(b, d) for b in inner]
    alpha = block.get("alpha")
    p = block.get("p")
    return ShiftStrategy(
        block["kind"],
        alpha=None if alpha == "auto" else alpha,
        p=None if p in (None, "auto") else np.full(n, float(p)),
        inner=inner,
    )


def _resolve_m_override(block: dict, problem: Problem, specs, strategy) -> StepSizes:
    """Pre-resolve step sizes when the config scales or pins the tracking
    weight M (the rule's default otherwise never surfaces)."""
    rule = block["stepsize_rule"]
    info = problem.smoothness_constants()
    omegas = np.array([s.omega for s in specs])
    kwargs = {}
    if strategy is not None:
        kwargs["alpha"] = strategy.alpha
        kwargs["p"] = strategy.p
        if strategy.inner is not None:
            kwargs["deltas"] = np.array([0.0 if s is None else s.delta for s in strategy.inner])
    M = block.get("M")
    if M is None:
        base = auto_stepsizes(rule, info, problem.n, omegas, **kwargs)
        M = base.M * block["M_multiplier"]
    return auto_stepsizes(rule, info, problem.n, omegas, M=M, **kwargs)


def build_run_config(block: dict, problem: Problem) -> tuple[RunConfig, int]:
    """Translate a validated run block into a RunConfig; returns (config, seeds)."""
    n, d = problem.n, problem.d
    specs = _build_specs(block["compressor"], d, n)
    strategy = None
    if "strategy" in block:
        strategy = _build_strategy(block["strategy"], d, n)
    steps = None
    if "steps" in block:
        sb = block["steps"]
        steps = StepSizes(
            sb["gamma"],
            eta=sb.get("eta"),
            alpha=sb.get("alpha"),
            M=sb.get("M"),
            p=None if "p" not in sb else np.full(n, float(sb["p"])),
        )
    elif "M" in block or "M_multiplier" in block:
        steps = _resolve_m_override(block, problem, specs, strategy)

    method = block["method"]
    track = block.get("track_lyapunov")
    if track is None:
        # record the certificate value whenever one exists for the setup
        track = method == "vr_gdci" or (
            method == "dcgd"
            and strategy is not None
            and strategy.kind in ("diana", "rand_diana")
            and (steps is None or steps.M is not None)
        )
    config = RunConfig(
        method,
        specs,
        strategy=strategy,
        steps=steps,
        stepsize_rule=block.get("stepsize_rule"),
        stepsize_multiplier=block.get("stepsize_multiplier", 1.0),
        iters=block.get("iters", 1000),
        seed=block.get("seed", 0),
        eps=block.get("eps"),
        budget_bits=block.get("budget_bits"),
        record_every=block.get("record_every", 1),
        x0_scale=block.get("x0_scale", 10.0),
        x0_scale_is_variance=block.get("x0_scale_is_variance", False),
        gdci_formulation=block.get("gdci_formulation", "model"),
        track_lyapunov=track,
    )
    return config, block.get("seeds", 1)


# -- output -------------------------------------------------------------------


def _fmt(value) -> str:
    if value is None:
        return ""
    if isinstance(value, str):
        return value
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    return f"{float(value):.17g}"


def write_csv(path: str, header: list[str], rows) -> None:
    """Atomic CSV write: fixed column order, 17 significant digits."""
    out_dir = os.path.dirname(os.path.abspath(path))
    os.makedirs(out_dir, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=out_dir, suffix=".tmp")
    try:
        with os.fdopen(fd, "w") as fh:
            fh.write(",".join(header) + "\n")
            for row in rows:
                fh.write(",".join(_fmt(v) for v in row) + "\n")
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _trajectory_rows(rec: RunRecord):
    lyap = rec.lyapunov if rec.lyapunov is not None else [None] * len(rec.k)
    return zip(rec.k, rec.rel_error, rec.cum_bits, lyap)


def write_trajectory(path: str, rec: RunRecord) -> None:
    write_csv(path, ["k", "rel_error", "cum_bits", "lyapunov"], _trajectory_rows(rec))


def _gnuplot_script(csv_names: list[str], title: str) -> str:
    lines = [
        "set datafile separator ','",
        "set logscale y",
        "set xlabel 'communicated bits'",
        "set ylabel 'relative error'",
        f"set title '{title}'",
        "set key outside",
    ]
    plots = [
        f"'{name}' using 3:2 skip 1 with lines title '{os.path.splitext(name)[0]}'"
        for name in csv_names
    ]
    lines.append("plot " + ", \\\n     ".join(plots))
    return "\n".join(lines) + "\n"


def _apply_flag_overrides(args, block: dict) -> dict:
    block = dict(block)
    if args.seed is not None:
        block["seed"] = args.seed
    if args.seeds is not None:
        block["seeds"] = args.seeds
    if args.eps is not None:
        block["eps"] = args.eps
    if args.budget_bits is not None:
        block["budget_bits"] = args.budget_bits
    if args.budget_iters is not None:
        block["iters"] = args.budget_iters
    return block


def _out_dir(args) -> str:
    if args.out is not None:
        return args.out
    return os.environ.get(OUT_DIR_ENV, ".")


def _worst_exit(statuses) -> int:
    return max(_STATUS_EXIT[s] for s in statuses)


# -- subcommands --------------------------------------------------------------


def cmd_run(args) -> int:
    doc = load_config(args.config)
    if "run" not in doc:
        raise ConfigError("config error at run: missing run block")
    block = _apply_flag_overrides(args, doc["run"])
    _validate(block, _RUN_SCHEMA, prefix="run")
    problem = build_problem(doc["problem"])
    config, n_seeds = build_run_config(block, problem)
    out = _out_dir(args)

    if n_seeds == 1:
        rec = run(problem, config)
        write_trajectory(os.path.join(out, "trajectory.csv"), rec)
        statuses = [rec.status]
        print(f"run: status={rec.status} iters={rec.iters_done} bits={rec.bits_total} "
              f"final_rel_error={rec.rel_error[-1]:.6g}")
    else:
        mc = run_monte_carlo(problem, config, n_seeds, keep_records=True)
        for rec in mc.records:
            write_trajectory(os.path.join(out, f"trajectory_seed{rec.seed}.csv"), rec)
        rows = zip(mc.k, mc.mean_rel_error, mc.mean_cum_bits,
                   [None] * len(mc.k), mc.min_rel_error, mc.max_rel_error)
        write_csv(
            os.path.join(out, "trajectory.csv"),
            ["k", "rel_error", "cum_bits", "lyapunov", "min_rel_error", "max_rel_error"],
            rows,
        )
        statuses = mc.statuses
        print(f"run: seeds={n_seeds} statuses={sorted(set(statuses))} "
              f"mean_final_rel_error={mc.mean_rel_error[-1]:.6g}")
    if args.gnuplot:
        script = _gnuplot_script(["trajectory.csv"], "trajectory")
        with open(os.path.join(out, "plot.gp"), "w") as fh:
            fh.write(script)
    return _worst_exit(statuses)


def _run_compare_entry(problem, name, block):
    config, n_seeds = build_run_config(block, problem)
    if n_seeds == 1:
        rec = run(problem, config)
        return name, rec, [rec]
    mc = run_monte_carlo(problem, config, n_seeds, keep_records=True)
    return name, mc, mc.records


def cmd_compare(args) -> int:
    doc = load_config(args.config)
    entries = doc.get("compare")
    if not entries:
        raise ConfigError("config error at compare: missing compare block")
    problem = build_problem(doc["problem"])
    shared = doc.get("run", {})
    blocks = []
    for entry in entries:
        block = _apply_flag_overrides(args, _merge(shared, entry["run"]))
        _validate(block, _RUN_SCHEMA, prefix=f"compare/{entry['name']}/run")
        blocks.append((entry["name"], block))

    out = _out_dir(args)
    with ThreadPoolExecutor(max_workers=args.jobs) as pool:
        results = list(
            pool.map(lambda nb: _run_compare_entry(problem, nb[0], nb[1]), blocks)
        )

    summary_rows = []
    csv_names = []
    statuses = []
    for name, result, records in results:
        csv_name = f"{name}.csv"
        csv_names.append(csv_name)
        if len(records) == 1:
            write_trajectory(os.path.join(out, csv_name), records[0])
        else:
            rows = zip(result.k, result.mean_rel_error, result.mean_cum_bits,
                       [None] * len(result.k))
            write_csv(os.path.join(out, csv_name),
                      ["k", "rel_error", "cum_bits", "lyapunov"], rows)
        entry_statuses = [r.status for r in records]
        statuses.extend(entry_statuses)
        reached = [r.bits_to_eps for r in records if r.bits_to_eps is not None]
        it_reached = [r.iters_to_eps for r in records if r.iters_to_eps is not None]
        summary_rows.append(
            (
                name,
                sorted(set(entry_statuses))[0] if len(set(entry_statuses)) == 1
                else "mixed:" + "+".join(sorted(set(entry_statuses))),
                float(np.mean(reached)) if reached else None,
                float(np.mean(it_reached)) if it_reached else None,
                float(np.mean([r.rel_error[-1] for r in records])),
            )
        )
        print(f"compare[{name}]: statuses={sorted(set(entry_statuses))} "
              f"bits_to_eps={summary_rows[-1][2]}")
    write_csv(
        os.path.join(out, "summary.csv"),
        ["method", "status", "bits_to_eps", "iters_to_eps", "final_rel_error"],
        summary_rows,
    )
    if args.gnuplot:
        with open(os.path.join(out, "plot.gp"), "w") as fh:
            fh.write(_gnuplot_script(csv_names, "comparison"))
    return _worst_exit(statuses)


def cmd_verify(args) -> int:
    suites = list(verify.SUITES) if args.suite == "all" else [args.suite]
    if args.self_test:
        # deliberately corrupt the sparsifier scale and require the suite
        # to notice; proves the checks have teeth
        from shiftcomp import compressors

        compressors.set_fault("randk_scale")
        try:
            results = verify.run_suite("compressors", seed=args.seed or 0)
        finally:
            compressors.set_fault("randk_scale", False)
        tripped = any(not r.passed for r in results)
        print(f"[{'PASS' if tripped else 'FAIL'}] self_test/fault_detection: "
              f"injected scale fault {'was' if tripped else 'was NOT'} detected")
        if not tripped:
            return 1

    results = []
    for suite in suites:
        results.extend(verify.run_suite(suite, seed=args.seed or 0))
    for r in results:
        print(r.line())
    n_fail = sum(not r.passed for r in results)
    print(f"verify: {len(results) - n_fail}/{len(results)} checks passed")
    if args.json:
        report = [
            {"suite": r.suite, "name": r.name, "passed": bool(r.passed), "detail": r.detail}
            for r in results
        ]
        path = os.path.join(_out_dir(args), "verify_report.json")
        os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
        with open(path, "w") as fh:
            json.dump(report, fh, indent=2)
            fh.write("\n")
    return 0 if n_fail == 0 else 1


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="shiftcomp",
        description="Simulator for communication-compressed distributed gradient methods",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--out", default=None, help=f"output directory (default ${OUT_DIR_ENV} or .)")
        p.add_argument("--seed", type=int, default=None)

    p_run = sub.add_parser("run", help="execute one configured run, write trajectory.csv")
    p_run.add_argument("config")
    common(p_run)
    p_run.add_argument("--seeds", type=int, default=None, metavar="N",
                       help="Monte-Carlo replicates (averaged trajectory)")
    p_run.add_argument("--eps", type=float, default=None)
    p_run.add_argument("--budget-bits", type=int, default=None)
    p_run.add_argument("--budget-iters", type=int, default=None)
    p_run.add_argument("--gnuplot", action="store_true", help="also emit plot.gp")

    p_cmp = sub.add_parser("compare", help="run every compare entry, write per-method CSVs + summary.csv")
    p_cmp.add_argument("config")
    common(p_cmp)
    p_cmp.add_argument("--seeds", type=int, default=None, metavar="N")
    p_cmp.add_argument("--eps", type=float, default=None)
    p_cmp.add_argument("--budget-bits", type=int, default=None)
    p_cmp.add_argument("--budget-iters", type=int, default=None)
    p_cmp.add_argument("--jobs", type=int, default=1, help="bounded worker pool size")
    p_cmp.add_argument("--gnuplot", action="store_true")

    p_ver = sub.add_parser("verify", help="run statistical verification suites")
    p_ver.add_argument("suite", choices=list(verify.SUITES) + ["all"])
    common(p_ver)
    p_ver.add_argument("--json", action="store_true",
                       help="also write verify_report.json to the output directory")
    p_ver.add_argument("--self-test", action="store_true",
                       help="first confirm an injected compressor fault is caught")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "run":
            return cmd_run(args)
        if args.command == "compare":
            return cmd_compare(args)
        return cmd_verify(args)
    except ConfigError as exc:
        print(str(exc), file=sys.stderr)
        return EXIT_CONFIG
    except jsonschema.ValidationError as exc:
        loc = "/".join(str(p) for p in exc.absolute_path) or "(top level)"
        print(f"config error at {loc}: {exc.message}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
