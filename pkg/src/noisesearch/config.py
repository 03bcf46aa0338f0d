"""Line-oriented experiment config files.

    # comment
    [grid]
    steps = 10
    [strategy.vt]
    kind = vt
    calibrate = true

Every key is typed and known in advance; anything else is an error carrying
the line number. ``serialize`` emits a canonical form that parses back to an
equal ExperimentConfig.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Sequence

from .errors import ConfigError
from .flow import Interpolant, SdeChurn, TimeGrid
from .harness import CostModel, ExperimentConfig, StrategyEntry
from .search import (
    BestOfN,
    Manual,
    Rbf,
    Regular,
    SearchOverPaths,
    Svdd,
    VerifierThreshold,
)
from .verifier import BenchConfig, VerifierKind, VerifierSpec


def _int(s: str) -> int:
    return int(s, 10)


def _float(s: str) -> float:
    v = float(s)
    if not math.isfinite(v):
        raise ValueError("must be finite")
    return v


def _bool(s: str) -> bool:
    low = s.lower()
    if low in ("true", "yes", "on", "1"):
        return True
    if low in ("false", "no", "off", "0"):
        return False
    raise ValueError("expected true or false")


def _list(item: Callable[[str], object]) -> Callable[[str], tuple]:
    def parse(s: str) -> tuple:
        parts = [p.strip() for p in s.split(",")]
        if not s.strip() or any(not p for p in parts):
            raise ValueError("expected a comma-separated list")
        return tuple(item(p) for p in parts)

    return parse


def _str(s: str) -> str:
    if not s:
        raise ValueError("empty value")
    return s


BENCH_KEYS = {"seed": _int, "n_modes": _int, "radius": _float, "std": _float,
              "n_prompts": _int, "radius_mult": _float, "file": _str}
GRID_KEYS = {"steps": _int, "interpolant": _str, "times": _list(_float)}
CHURN_KEYS = {"gamma": _float}
VERIFIER_KEYS = {"kind": _str, "noise_std": _float, "extra_std": _float, "seed_stream": _int, "value": _float}
STRATEGY_KEYS = {
    "kind": _str, "width": _int, "branch": _int, "candidates_per_step": _int,
    "zeroth_step_nfe": _int, "schedule": _list(_int), "scale_schedule": _bool,
    "delta0": _float, "ref_budget": _int, "keep_best": _bool,
    "calibrate": _bool, "percentile": _float, "pilot_seeds": _int,
}
EXPERIMENT_KEYS = {"budgets": _list(_int), "seeds": _list(_int), "parallelism": _int,
                   "measure_time": _bool, "max_prompts": _int}
COST_KEYS = {"nfe_weight": _float, "verifier_weight": _float}

# keys each strategy kind accepts besides ``kind``
KIND_KEYS = {
    "regular": set(),
    "best_of_n": set(),
    "sop": {"width", "branch"},
    "svdd": {"candidates_per_step"},
    "rbf": {"zeroth_step_nfe"},
    "manual": {"schedule", "scale_schedule"},
    "vt": {"delta0", "ref_budget", "keep_best", "calibrate", "percentile", "pilot_seeds"},
}


@dataclass
class _Value:
    raw: str
    line: int | None


Raw = dict[str, dict[str, _Value]]


def _section_schema(section: str) -> dict | None:
    if section == "bench":
        return BENCH_KEYS
    if section == "grid":
        return GRID_KEYS
    if section == "churn":
        return CHURN_KEYS
    if section == "experiment":
        return EXPERIMENT_KEYS
    if section == "cost":
        return COST_KEYS
    if section.startswith("verifier.") and len(section) > len("verifier."):
        return VERIFIER_KEYS
    if section.startswith("strategy.") and len(section) > len("strategy."):
        return STRATEGY_KEYS
    return None


def parse_raw(text: str) -> tuple[Raw, dict[str, int]]:
    """Split into sections of raw key/value strings, checking key names."""
    raw: Raw = {}
    section_lines: dict[str, int] = {}
    current = None
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        if stripped.startswith("["):
            if not stripped.endswith("]"):
                raise ConfigError(f"malformed section header {stripped!r}", line=lineno)
            name = stripped[1:-1].strip()
            if _section_schema(name) is None:
                raise ConfigError(f"unknown section [{name}]", line=lineno)
            if name in raw:
                raise ConfigError(f"duplicate section [{name}]", line=lineno)
            raw[name] = {}
            section_lines[name] = lineno
            current = name
            continue
        if "=" not in stripped:
            raise ConfigError(f"expected 'key = value', got {stripped!r}", line=lineno)
        if current is None:
            raise ConfigError("key outside of any section", line=lineno)
        key, value = (p.strip() for p in stripped.split("=", 1))
        if "#" in value:
            value = value.split("#", 1)[0].rstrip()
        if key in raw[current]:
            raise ConfigError(f"duplicate key {key!r}", line=lineno, where=f"[{current}]")
        schema = _section_schema(current)
        # [cost] also takes one weight per verifier name, checked once all sections are known
        if key not in schema and current != "cost":
            raise ConfigError(f"unknown key {key!r}", line=lineno, where=f"[{current}]")
        raw[current][key] = _Value(value, lineno)
    return raw, section_lines


def apply_overrides(raw: Raw, overrides: Sequence[str]) -> None:
    """Apply ``section.key=value`` overrides (section may itself contain a dot)."""
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not key=value")
        path, value = (p.strip() for p in item.split("=", 1))
        if "." not in path:
            raise ConfigError(f"override {item!r} needs a section.key path")
        section, key = path.rsplit(".", 1)
        schema = _section_schema(section)
        if schema is None:
            raise ConfigError(f"override names unknown section [{section}]")
        if key not in schema and section != "cost":
            raise ConfigError(f"override names unknown key {key!r}", where=f"[{section}]")
        raw.setdefault(section, {})[key] = _Value(value, None)


def _get(raw: Raw, section: str, key: str, default=None):
    vals = raw.get(section, {})
    if key not in vals:
        return default
    v = vals[key]
    schema = _section_schema(section)
    conv = schema.get(key, _float)
    try:
        return conv(v.raw)
    except ValueError as e:
        raise ConfigError(f"bad value {v.raw!r} for {key}: {e}", line=v.line, where=f"[{section}]") from e


def _line(raw: Raw, section: str, key: str | None = None) -> int | None:
    if key is not None and key in raw.get(section, {}):
        return raw[section][key].line
    return None


def _build_strategy(raw: Raw, section: str) -> StrategyEntry:
    name = section.split(".", 1)[1]
    kind = _get(raw, section, "kind")
    where = f"[{section}]"
    if kind is None:
        raise ConfigError("missing 'kind'", where=where)
    if kind not in KIND_KEYS:
        raise ConfigError(f"unknown strategy kind {kind!r}", line=_line(raw, section, "kind"), where=where)
    for key in raw[section]:
        if key != "kind" and key not in KIND_KEYS[kind]:
            raise ConfigError(f"key {key!r} does not apply to kind {kind}", line=_line(raw, section, key), where=where)
    g = lambda key, default=None: _get(raw, section, key, default)  # noqa: E731
    try:
        if kind == "regular":
            return StrategyEntry(name, Regular())
        if kind == "best_of_n":
            return StrategyEntry(name, BestOfN())
        if kind == "sop":
            return StrategyEntry(name, SearchOverPaths(g("width", 2), g("branch", 4)))
        if kind == "svdd":
            return StrategyEntry(name, Svdd(g("candidates_per_step", 25)))
        if kind == "rbf":
            return StrategyEntry(name, Rbf(g("zeroth_step_nfe", 4)))
        if kind == "manual":
            schedule = g("schedule")
            if schedule is None:
                raise ConfigError("manual strategy needs a schedule", where=f"{where}.schedule")
            return StrategyEntry(name, Manual(schedule), scale_schedule=g("scale_schedule", False))
        calibrate = g("calibrate", False)
        percentile = g("percentile", 40.0)
        entry = StrategyEntry(
            name,
            VerifierThreshold(g("delta0", 0.005), g("ref_budget", 40), g("keep_best", True)),
            calibrate_percentile=percentile if calibrate else None,
            pilot_seeds=g("pilot_seeds", 20),
        )
        if not calibrate and ("percentile" in raw[section] or "pilot_seeds" in raw[section]):
            raise ConfigError("percentile/pilot_seeds need calibrate = true", where=where)
        if entry.pilot_seeds < 1:
            raise ConfigError("pilot_seeds must be positive", where=f"{where}.pilot_seeds")
        return entry
    except ConfigError as e:
        if e.where is None and e.line is None:
            raise ConfigError(str(e), where=where) from e
        raise


def _build_verifier(raw: Raw, section: str) -> tuple[str, VerifierSpec]:
    name = section.split(".", 1)[1]
    where = f"[{section}]"
    kind = _get(raw, section, "kind")
    if kind is None:
        raise ConfigError("missing 'kind'", where=where)
    try:
        kind = VerifierKind(kind)
    except ValueError:
        raise ConfigError(f"unknown verifier kind {kind!r}", line=_line(raw, section, "kind"), where=where)
    allowed = {
        VerifierKind.ORACLE_LOGLIK: set(),
        VerifierKind.NEG_DISTANCE: set(),
        VerifierKind.NOISY_ORACLE: {"noise_std", "seed_stream"},
        VerifierKind.BLURRED: {"extra_std"},
        VerifierKind.CONSTANT: {"value"},
    }[kind]
    for key in raw[section]:
        if key != "kind" and key not in allowed:
            raise ConfigError(f"key {key!r} does not apply to kind {kind.value}", line=_line(raw, section, key), where=where)
    try:
        spec = VerifierSpec(
            kind,
            noise_std=_get(raw, section, "noise_std"),
            extra_std=_get(raw, section, "extra_std"),
            seed_stream=_get(raw, section, "seed_stream", 0),
            value=_get(raw, section, "value", 0.0),
        )
    except ConfigError as e:
        raise ConfigError(str(e), where=where) from e
    return name, spec


def build_config(raw: Raw) -> ExperimentConfig:
    strategies = tuple(_build_strategy(raw, s) for s in raw if s.startswith("strategy."))
    verifiers = tuple(_build_verifier(raw, s) for s in raw if s.startswith("verifier."))
    if not strategies:
        raise ConfigError("config defines no [strategy.<name>] section")
    if not verifiers:
        raise ConfigError("config defines no [verifier.<name>] section")
    vnames = {n for n, _ in verifiers}

    cost_raw = raw.get("cost", {})
    per_verifier = []
    for key, v in cost_raw.items():
        if key in COST_KEYS:
            continue
        if key not in vnames:
            raise ConfigError(f"unknown key {key!r} (not a cost field or verifier name)", line=v.line, where="[cost]")
        try:
            per_verifier.append((key, _float(v.raw)))
        except ValueError as e:
            raise ConfigError(f"bad value {v.raw!r} for {key}: {e}", line=v.line, where="[cost]") from e
    cost = CostModel(_get(raw, "cost", "nfe_weight", 1.0), _get(raw, "cost", "verifier_weight", 0.2),
                     tuple(sorted(per_verifier)))

    try:
        bench = BenchConfig(
            n_modes=_get(raw, "bench", "n_modes", 8),
            radius=_get(raw, "bench", "radius", 3.0),
            std=_get(raw, "bench", "std", 0.25),
            n_prompts=_get(raw, "bench", "n_prompts", 40),
            radius_mult=_get(raw, "bench", "radius_mult", 3.0),
            seed=_get(raw, "bench", "seed", 0),
        )
    except ConfigError as e:
        raise ConfigError(str(e), where="[bench]") from e

    times = _get(raw, "grid", "times")
    steps = _get(raw, "grid", "steps")
    try:
        if times is not None:
            grid = TimeGrid(times)
            if steps is not None and steps != grid.steps:
                raise ConfigError(f"steps = {steps} disagrees with {grid.steps} intervals in times")
        else:
            grid = TimeGrid.uniform(10 if steps is None else steps)
    except ValueError as e:
        raise ConfigError(str(e), where="[grid]") from e
    try:
        interpolant = Interpolant(_get(raw, "grid", "interpolant", "linear"))
    except ValueError:
        raise ConfigError("interpolant must be 'linear' or 'vp'", line=_line(raw, "grid", "interpolant"), where="[grid]")
    try:
        churn = SdeChurn(_get(raw, "churn", "gamma", 0.5))
    except ValueError as e:
        raise ConfigError(str(e), line=_line(raw, "churn", "gamma"), where="[churn]") from e

    try:
        return ExperimentConfig(
            strategies=strategies,
            verifiers=verifiers,
            budgets=_get(raw, "experiment", "budgets", (40, 80, 160)),
            seeds=_get(raw, "experiment", "seeds", (0, 1, 2)),
            bench=bench,
            bench_file=_get(raw, "bench", "file"),
            grid=grid,
            interpolant=interpolant,
            churn=churn,
            cost=cost,
            parallelism=_get(raw, "experiment", "parallelism", 1),
            measure_time=_get(raw, "experiment", "measure_time", False),
            max_prompts=_get(raw, "experiment", "max_prompts", 0),
        )
    except ConfigError as e:
        if e.where is None:
            raise ConfigError(str(e), where="[experiment]") from e
        raise


def parse_config(text: str, overrides: Sequence[str] = ()) -> ExperimentConfig:
    raw, _ = parse_raw(text)
    apply_overrides(raw, overrides)
    return build_config(raw)


# --- serialization -----------------------------------------------------------


def _fmt(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    if isinstance(v, (tuple, list)):
        return ", ".join(_fmt(x) for x in v)
    return str(v)


def serialize(cfg: ExperimentConfig) -> str:
    out: list[str] = []

    def section(name: str, items: list[tuple[str, object]]) -> None:
        out.append(f"[{name}]")
        out.extend(f"{k} = {_fmt(v)}" for k, v in items)
        out.append("")

    b = cfg.bench
    bench_items = [("seed", b.seed), ("n_modes", b.n_modes), ("radius", b.radius), ("std", b.std),
                   ("n_prompts", b.n_prompts), ("radius_mult", b.radius_mult)]
    if cfg.bench_file is not None:
        bench_items.append(("file", cfg.bench_file))
    section("bench", bench_items)
    section("grid", [("steps", cfg.grid.steps), ("interpolant", cfg.interpolant.value), ("times", cfg.grid.times)])
    section("churn", [("gamma", cfg.churn.gamma)])
    for name, spec in cfg.verifiers:
        items: list[tuple[str, object]] = [("kind", spec.kind.value)]
        if spec.kind == VerifierKind.NOISY_ORACLE:
            items += [("noise_std", spec.noise_std), ("seed_stream", spec.seed_stream)]
        elif spec.kind == VerifierKind.BLURRED:
            items.append(("extra_std", spec.extra_std))
        elif spec.kind == VerifierKind.CONSTANT:
            items.append(("value", spec.value))
        section(f"verifier.{name}", items)
    for e in cfg.strategies:
        s = e.strategy
        items = [("kind", s.tag)]
        if isinstance(s, SearchOverPaths):
            items += [("width", s.width), ("branch", s.branch)]
        elif isinstance(s, Svdd):
            items.append(("candidates_per_step", s.candidates_per_step))
        elif isinstance(s, Rbf):
            items.append(("zeroth_step_nfe", s.zeroth_step_nfe))
        elif isinstance(s, Manual):
            items += [("schedule", s.schedule), ("scale_schedule", e.scale_schedule)]
        elif isinstance(s, VerifierThreshold):
            items += [("delta0", s.delta0), ("ref_budget", s.ref_budget), ("keep_best", s.keep_best),
                      ("calibrate", e.calibrate_percentile is not None)]
            if e.calibrate_percentile is not None:
                items += [("percentile", e.calibrate_percentile), ("pilot_seeds", e.pilot_seeds)]
        section(f"strategy.{e.name}", items)
    section("experiment", [("budgets", cfg.budgets), ("seeds", cfg.seeds), ("parallelism", cfg.parallelism),
                           ("measure_time", cfg.measure_time), ("max_prompts", cfg.max_prompts)])
    section("cost", [("nfe_weight", cfg.cost.nfe_weight), ("verifier_weight", cfg.cost.verifier_weight)]
            + list(cfg.cost.per_verifier))
    return "\n".join(out)


DEFAULT_CONFIG = """\
# noisesearch experiment config
[bench]
seed = 0
n_modes = 8
n_prompts = 40

[grid]
steps = 10
interpolant = linear

[churn]
gamma = 0.5

[verifier.oracle]
kind = oracle_loglik

[strategy.rbf]
kind = rbf
zeroth_step_nfe = 4

[strategy.vt]
kind = vt
calibrate = true
percentile = 40

[experiment]
budgets = 40, 80, 160
seeds = 0, 1, 2
parallelism = 1

[cost]
nfe_weight = 1.0
verifier_weight = 0.2
"""
