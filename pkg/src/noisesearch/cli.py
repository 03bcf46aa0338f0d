"""Command-line entry point.

Exit codes: 0 success, 1 configuration or validation error, 2 runtime error.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
from typing import Sequence

import numpy as np

from . import __version__
from .config import parse_config, serialize
from .csvio import (
    CURVES_HEADER,
    SUMMARY_HEADER,
    SchemaError,
    curves_csv,
    read_runs,
    read_table,
    runs_csv,
    summary_csv,
)
from .errors import ConfigError
from .harness import (
    PILOT_SEED_BASE,
    ExperimentConfig,
    calibrate_delta,
    make_context,
    resolve_bench,
    run_experiment,
    validate_experiment,
)
from .search import VerifierThreshold
from .svg import bar_chart, line_chart
from .verifier import BenchConfig, dump_bench, gen_bench

log = logging.getLogger("noisesearch")

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 1, 2


def _err(msg: str) -> None:
    print(f"error: {msg}", file=sys.stderr)


def _load(config_path: str, overrides: Sequence[str] = ()) -> tuple[bytes, ExperimentConfig]:
    try:
        with open(config_path, "rb") as fh:
            data = fh.read()
    except OSError as e:
        raise ConfigError(f"cannot read config {config_path}: {e}") from e
    try:
        text = data.decode("utf-8")
    except UnicodeDecodeError as e:
        raise ConfigError(f"config is not UTF-8: {e}") from e
    return data, parse_config(text, overrides)


def _write(path: str, text: str) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(text)


def manifest(cfg: ExperimentConfig, config_bytes: bytes, overrides: Sequence[str], result) -> str:
    h = hashlib.sha256(config_bytes)
    for o in overrides:
        h.update(b"\0" + o.encode("utf-8"))
    doc = {
        "tool": "noisesearch",
        "version": __version__,
        "config_sha256": h.hexdigest(),
        "canonical_config_sha256": hashlib.sha256(serialize(cfg).encode("utf-8")).hexdigest(),
        "overrides": list(overrides),
        "seeds": list(cfg.seeds),
        "budgets": list(cfg.budgets),
        "strategies": [e.name for e in cfg.strategies],
        "verifiers": [n for n, _ in cfg.verifiers],
        "steps": cfg.grid.steps,
        "cost": {
            "nfe_weight": cfg.cost.nfe_weight,
            "verifier_weight": cfg.cost.verifier_weight,
            "per_verifier": dict(cfg.cost.per_verifier),
        },
        "calibrated_delta0": {f"{s}/{v}": d for (s, v), d in sorted(result.calibration.items())},
        "measure_time": cfg.measure_time,
        "n_records": len(result.records),
        "errors": [{"cell": list(key), "message": msg} for key, msg in result.errors],
    }
    return json.dumps(doc, indent=2, sort_keys=True) + "\n"


def cmd_run(config_path: str, out_dir: str, overrides: Sequence[str] = ()) -> int:
    try:
        data, cfg = _load(config_path, overrides)
        bench = resolve_bench(cfg, os.path.dirname(os.path.abspath(config_path)))
        problems = validate_experiment(cfg, bench)
        if problems:
            for p in problems:
                _err(p)
            return EXIT_CONFIG
    except ConfigError as e:
        _err(str(e))
        return EXIT_CONFIG
    try:
        result = run_experiment(cfg, bench)
        os.makedirs(out_dir, exist_ok=True)
        _write(os.path.join(out_dir, "runs.csv"), runs_csv(result, cfg.measure_time))
        _write(os.path.join(out_dir, "summary.csv"), summary_csv(result, cfg.measure_time))
        _write(os.path.join(out_dir, "curves.csv"), curves_csv(result))
        _write(os.path.join(out_dir, "bench.json"), dump_bench(bench))
        _write(os.path.join(out_dir, "manifest.json"), manifest(cfg, data, overrides, result))
    except ConfigError as e:
        _err(str(e))
        return EXIT_CONFIG
    except Exception as e:  # noqa: BLE001 - CLI boundary
        _err(f"{type(e).__name__}: {e}")
        return EXIT_RUNTIME
    if result.errors:
        for key, msg in result.errors:
            _err(f"cell {key}: {msg}")
        return EXIT_RUNTIME
    print(f"wrote {len(result.records)} runs to {out_dir}")
    return EXIT_OK


def cmd_sweep(config_path: str, out_dir: str, param: str, values: Sequence[str],
              overrides: Sequence[str] = ()) -> int:
    """Run the config once per value of ``param``, each into its own subdirectory."""
    worst = EXIT_OK
    for v in values:
        sub = os.path.join(out_dir, f"{param}={v}")
        code = cmd_run(config_path, sub, [*overrides, f"{param}={v}"])
        if code == EXIT_CONFIG:
            return code
        worst = max(worst, code)
    return worst


def cmd_validate(config_path: str, overrides: Sequence[str] = ()) -> int:
    try:
        _, cfg = _load(config_path, overrides)
        bench = resolve_bench(cfg, os.path.dirname(os.path.abspath(config_path)))
    except ConfigError as e:
        _err(str(e))
        return EXIT_CONFIG
    problems = validate_experiment(cfg, bench)
    for p in problems:
        _err(p)
    if problems:
        return EXIT_CONFIG
    print("config ok")
    return EXIT_OK


def cmd_bench_gen(config_path: str, out_path: str, seed: int | None = None) -> int:
    try:
        _, cfg = _load(config_path)
        bcfg = cfg.bench
        if seed is not None:
            bcfg = BenchConfig(bcfg.n_modes, bcfg.radius, bcfg.std, bcfg.n_prompts, bcfg.radius_mult, seed)
        bench = gen_bench(bcfg)
    except ConfigError as e:
        _err(str(e))
        return EXIT_CONFIG
    try:
        _write(out_path, dump_bench(bench))
    except OSError as e:
        _err(str(e))
        return EXIT_RUNTIME
    print(f"wrote {len(bench.prompts)} prompts to {out_path}")
    return EXIT_OK


def cmd_calibrate(config_path: str, verifier_name: str, overrides: Sequence[str] = ()) -> int:
    try:
        _, cfg = _load(config_path, overrides)
        specs = dict(cfg.verifiers)
        if verifier_name not in specs:
            raise ConfigError(f"unknown verifier {verifier_name!r}; config has {sorted(specs)}")
        bench = resolve_bench(cfg, os.path.dirname(os.path.abspath(config_path)))
    except ConfigError as e:
        _err(str(e))
        return EXIT_CONFIG
    entry = next((e for e in cfg.strategies if e.calibrate_percentile is not None), None)
    percentile = entry.calibrate_percentile if entry else 40.0
    n_pilot = entry.pilot_seeds if entry else 20
    name = entry.name if entry else next(
        (e.name for e in cfg.strategies if isinstance(e.strategy, VerifierThreshold)), "vt")
    try:
        pilot = [PILOT_SEED_BASE + i for i in range(n_pilot)]
        value = calibrate_delta(bench, specs[verifier_name], make_context(cfg, bench), pilot, percentile)
    except Exception as e:  # noqa: BLE001 - CLI boundary
        _err(f"{type(e).__name__}: {e}")
        return EXIT_RUNTIME
    print(f"delta0 = {value!r}")
    print(f"# p{percentile:g} of positive one-step reward increments, verifier {verifier_name}, "
          f"{n_pilot} pilot seeds x {len(bench.prompts)} prompts, {cfg.grid.steps} steps")
    print(f"[strategy.{name}]\nkind = vt\ndelta0 = {value!r}")
    return EXIT_OK


FIGURES = ("dumping", "score_curve", "scaling")


def _group_means(rows, attr):
    groups: dict[tuple, list] = {}
    for r in rows:
        groups.setdefault((r.strategy, r.verifier, r.budget), []).append(getattr(r, attr))
    return groups


def plot_dumping(in_dir: str) -> str:
    with open(os.path.join(in_dir, "runs.csv"), encoding="utf-8") as fh:
        rows = read_runs(fh.read())
    groups = _group_means(rows, "per_step_nfe")
    steps = len(rows[0].per_step_nfe)
    series = []
    for (s, v, b), vecs in groups.items():
        mean = np.mean(vecs, axis=0)
        series.append((f"{s}/{v}/N={b}", [0.0, *mean.tolist()]))
    return bar_chart("Mean NFEs per denoising step", "denoising step", "mean NFEs",
                     [str(i) for i in range(steps + 1)], series)


def plot_score_curve(in_dir: str) -> str:
    with open(os.path.join(in_dir, "curves.csv"), encoding="utf-8") as fh:
        rows = read_table(fh.read(), CURVES_HEADER)
    series: dict[tuple, tuple[list, list]] = {}
    for r in rows:
        try:
            key = (r["strategy"], r["verifier"], int(r["budget"]))
            xs, ys = series.setdefault(key, ([], []))
            xs.append(float(r["step"]))
            ys.append(float(r["mean_reward"]))
        except ValueError as e:
            raise SchemaError(f"bad numeric value: {e}") from e
    return line_chart("Mean accepted verifier score per step", "denoising step", "mean verifier score",
                      [(f"{s}/{v}/N={b}", xs, ys) for (s, v, b), (xs, ys) in series.items()])


def plot_scaling(in_dir: str) -> str:
    with open(os.path.join(in_dir, "summary.csv"), encoding="utf-8") as fh:
        rows = read_table(fh.read(), SUMMARY_HEADER)
    norm = None
    mpath = os.path.join(in_dir, "manifest.json")
    if os.path.exists(mpath):
        with open(mpath, encoding="utf-8") as fh:
            m = json.load(fh)
        norm = (m["cost"]["nfe_weight"] * m["steps"], m["cost"]["verifier_weight"], m["cost"]["per_verifier"])
    series: dict[tuple, list] = {}
    for r in rows:
        col = None
        try:
            col = "mean_cost"
            cost = float(r["mean_cost"])
            col = "success_rate"
            rate = float(r["success_rate"])
        except ValueError as e:
            raise SchemaError(f"column {col!r}: bad value ({e})", column=col) from e
        if norm is not None:
            base = norm[0] + norm[2].get(r["verifier"], norm[1])
            cost = cost / base if base > 0 else cost
        series.setdefault((r["strategy"], r["verifier"]), []).append((cost, rate))
    out = []
    for (s, v), pts in series.items():
        pts.sort()
        out.append((f"{s}/{v}", [p[0] for p in pts], [100 * p[1] for p in pts]))
    xlabel = "cost relative to regular generation" if norm is not None else "mean cost"
    return line_chart("Test-time scaling", xlabel, "success rate (%)", out)


def cmd_plot(in_dir: str, figure: str, out_path: str) -> int:
    if figure not in FIGURES:
        _err(f"unknown figure {figure!r}; choose from {', '.join(FIGURES)}")
        return EXIT_CONFIG
    try:
        svg = {"dumping": plot_dumping, "score_curve": plot_score_curve, "scaling": plot_scaling}[figure](in_dir)
    except SchemaError as e:
        _err(str(e))
        return EXIT_CONFIG
    except (OSError, KeyError, json.JSONDecodeError) as e:
        _err(f"cannot read inputs from {in_dir}: {e}")
        return EXIT_CONFIG
    try:
        _write(out_path, svg)
    except OSError as e:
        _err(str(e))
        return EXIT_RUNTIME
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="noisesearch", description="Test-time noise search on an analytic flow.")
    p.add_argument("--version", action="version", version=f"noisesearch {__version__}")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    def overrides(sp):
        sp.add_argument("--set", dest="overrides", action="append", default=[], metavar="SECTION.KEY=VALUE",
                        help="override a config value (repeatable)")

    sp = sub.add_parser("run", help="run the configured experiment")
    sp.add_argument("config")
    sp.add_argument("out_dir")
    overrides(sp)

    sp = sub.add_parser("sweep", help="run the experiment once per value of one config key")
    sp.add_argument("config")
    sp.add_argument("out_dir")
    sp.add_argument("--param", required=True, metavar="SECTION.KEY")
    sp.add_argument("--value", dest="values", action="append", required=True,
                    help="one value to try (repeatable)")
    overrides(sp)

    sp = sub.add_parser("calibrate", help="calibrate the VT threshold for one verifier")
    sp.add_argument("config")
    sp.add_argument("verifier")
    overrides(sp)

    sp = sub.add_parser("plot", help="render an SVG figure from a run directory")
    sp.add_argument("in_dir")
    sp.add_argument("figure", choices=FIGURES)
    sp.add_argument("out_path")

    sp = sub.add_parser("validate", help="check a config without running it")
    sp.add_argument("config")
    overrides(sp)

    sp = sub.add_parser("bench-gen", help="write a pinned bench file")
    sp.add_argument("config")
    sp.add_argument("out_path")
    sp.add_argument("--seed", type=int, default=None)
    return p


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_OK if e.code == 0 else EXIT_CONFIG
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "run":
            return cmd_run(args.config, args.out_dir, args.overrides)
        if args.command == "sweep":
            return cmd_sweep(args.config, args.out_dir, args.param, args.values, args.overrides)
        if args.command == "calibrate":
            return cmd_calibrate(args.config, args.verifier, args.overrides)
        if args.command == "plot":
            return cmd_plot(args.in_dir, args.figure, args.out_path)
        if args.command == "validate":
            return cmd_validate(args.config, args.overrides)
        return cmd_bench_gen(args.config, args.out_path, args.seed)
    except Exception as e:  # noqa: BLE001 - CLI boundary
        _err(f"{type(e).__name__}: {e}")
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
