"""Experiment sweeps: strategy x verifier x budget x prompt x seed.

Cells are independent (each owns its rng streams, derived from seed and
prompt id), so results do not depend on the worker count. Records come back
in canonical order: config order of strategy, verifier, budget, then bench
order of prompts, then seed.
"""

from __future__ import annotations

import logging
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Callable, Sequence

import numpy as np

from .errors import ConfigError, NoiseSearchError
from .flow import Interpolant, SdeChurn, TimeGrid
from .search import (
    GenContext,
    Manual,
    RunRecord,
    StrategyConfig,
    VerifierThreshold,
    dispatch,
    run_streams,
    vt_threshold,
)
from .verifier import (
    ATTRIBUTE_TAGS,
    Bench,
    BenchConfig,
    Prompt,
    Scorer,
    Verifier,
    VerifierSpec,
    bench_problems,
    gen_bench,
)

log = logging.getLogger(__name__)

Z95 = 1.959963984540054
PILOT_SEED_BASE = 1_000_000


@dataclass(frozen=True)
class CostModel:
    nfe_weight: float = 1.0
    verifier_weight: float = 0.2
    per_verifier: tuple[tuple[str, float], ...] = ()

    def verifier_weight_for(self, name: str) -> float:
        return dict(self.per_verifier).get(name, self.verifier_weight)

    def cost(self, verifier: str, used_nfe: int, verifier_calls: int) -> float:
        return self.nfe_weight * used_nfe + self.verifier_weight_for(verifier) * verifier_calls


@dataclass(frozen=True)
class StrategyEntry:
    name: str
    strategy: StrategyConfig
    # VT only: replace delta0 by a pilot-calibrated value at this percentile
    calibrate_percentile: float | None = None
    pilot_seeds: int = 20
    # Manual only: rescale the schedule to each budget instead of requiring an exact sum
    scale_schedule: bool = False


@dataclass(frozen=True)
class ExperimentConfig:
    strategies: tuple[StrategyEntry, ...]
    verifiers: tuple[tuple[str, VerifierSpec], ...]
    budgets: tuple[int, ...] = (40, 80, 160)
    seeds: tuple[int, ...] = (0, 1, 2)
    bench: BenchConfig = field(default_factory=BenchConfig)
    bench_file: str | None = None
    grid: TimeGrid = field(default_factory=TimeGrid.uniform)
    interpolant: Interpolant = Interpolant.LINEAR
    churn: SdeChurn = field(default_factory=SdeChurn)
    cost: CostModel = field(default_factory=CostModel)
    parallelism: int = 1
    measure_time: bool = False
    max_prompts: int = 0

    def __post_init__(self):
        if not self.strategies or not self.verifiers or not self.budgets or not self.seeds:
            raise ConfigError("strategies, verifiers, budgets and seeds must all be non-empty")
        if any(b < 1 for b in self.budgets):
            raise ConfigError("budgets must be positive")
        if self.parallelism < 1:
            raise ConfigError("parallelism must be >= 1")
        if self.cost.nfe_weight < 0 or self.cost.verifier_weight < 0 or any(w < 0 for _, w in self.cost.per_verifier):
            raise ConfigError("cost weights must be nonnegative")
        for kind, names in (("strategy", [s.name for s in self.strategies]), ("verifier", [n for n, _ in self.verifiers])):
            if len(set(names)) != len(names):
                raise ConfigError(f"duplicate {kind} names: {names}")


def scale_schedule(schedule: Sequence[int], budget: int) -> tuple[int, ...]:
    """Rescale to sum to ``budget`` by largest remainder, keeping every entry >= 1."""
    steps = len(schedule)
    if budget < steps:
        raise ConfigError(f"budget {budget} cannot give every one of {steps} steps an NFE")
    # spread the NFEs above one per step in proportion to each step's own surplus,
    # so the schedule's own sum maps back to itself
    surplus = [x - 1 for x in schedule]
    total = sum(surplus)
    extra = budget - steps
    raw = [(x / total) * extra if total else extra / steps for x in surplus]
    base = [int(math.floor(r)) for r in raw]
    order = sorted(range(steps), key=lambda i: (-(raw[i] - base[i]), i))
    for i in order[: extra - sum(base)]:
        base[i] += 1
    return tuple(b + 1 for b in base)


def strategy_for_budget(entry: StrategyEntry, budget: int) -> StrategyConfig:
    s = entry.strategy
    if isinstance(s, Manual) and entry.scale_schedule:
        return Manual(scale_schedule(s.schedule, budget))
    return s


def validate_experiment(cfg: ExperimentConfig, bench: Bench | None = None) -> list[str]:
    """Semantic problems found without running anything. Empty means valid."""
    problems = []
    T = cfg.grid.steps
    for b in cfg.budgets:
        if b < T:
            problems.append(f"[experiment].budgets: budget {b} is below the {T} grid steps")
    for e in cfg.strategies:
        s = e.strategy
        where = f"[strategy.{e.name}]"
        if isinstance(s, Manual):
            if len(s.schedule) != T:
                problems.append(f"{where}.schedule: {len(s.schedule)} entries for {T} steps")
            if not e.scale_schedule:
                for b in cfg.budgets:
                    if sum(s.schedule) != b:
                        problems.append(f"{where}.schedule: sums to {sum(s.schedule)}, budget is {b}")
        if e.calibrate_percentile is not None:
            if not isinstance(s, VerifierThreshold):
                problems.append(f"{where}.calibrate: only vt strategies can be calibrated")
            if not 0 <= e.calibrate_percentile <= 100:
                problems.append(f"{where}.percentile: must lie in [0, 100]")
    if bench is not None:
        problems.extend(f"bench: {p}" for p in bench_problems(bench))
    return problems


# --- calibration -------------------------------------------------------------

ScorerFactory = Callable[[Prompt, np.random.Generator], Scorer]


def _scorer_factory(verifier: VerifierSpec | ScorerFactory, target) -> ScorerFactory:
    if isinstance(verifier, VerifierSpec):
        return lambda prompt, noise_rng: Verifier(verifier, prompt, target, noise_rng)
    return verifier


def pilot_increments(bench: Bench, verifier: VerifierSpec | ScorerFactory, ctx: GenContext,
                     pilot_seeds: Sequence[int]) -> np.ndarray:
    """One-step reward increments along unsearched (regular) trajectories."""
    make = _scorer_factory(verifier, bench.target)
    seed_stream = verifier.seed_stream if isinstance(verifier, VerifierSpec) else 0
    out = []
    for seed in pilot_seeds:
        for prompt in bench.prompts:
            gen, ver = run_streams(seed, prompt.id, seed_stream)
            scorer = make(prompt, ver)
            state = ctx.prior(gen)
            r = float(scorer(ctx.tweedie(state)))
            while state.step < ctx.steps:
                state = ctx.sde_step(state, gen)
                r_next = float(scorer(ctx.tweedie(state)))
                out.append(r_next - r)
                r = r_next
    return np.asarray(out)


def calibrate_delta(bench: Bench, verifier: VerifierSpec | ScorerFactory, ctx: GenContext,
                    pilot_seeds: Sequence[int], percentile: float = 40.0) -> float:
    """Percentile of the positive one-step increments seen on regular pilots.

    Only improvements are kept because those are the moves a greedy advance
    rule would accept; the threshold is meant to filter the marginal ones.
    """
    if not 0 <= percentile <= 100:
        raise ConfigError("percentile must lie in [0, 100]")
    inc = pilot_increments(bench, verifier, ctx, pilot_seeds)
    gains = inc[inc > 0]
    if gains.size == 0:
        log.warning("calibration saw no positive reward increments; returning 0")
        return 0.0
    if np.all(gains == gains[0]):
        log.warning("calibration increments are all equal (%g)", gains[0])
        return float(gains[0])
    value = float(np.percentile(gains, percentile))
    log.info("calibrated delta0=%.6g from %d positive increments (p%g over %d pilot seeds)",
             value, gains.size, percentile, len(pilot_seeds))
    return value


# --- results -----------------------------------------------------------------


@dataclass(frozen=True)
class SummaryRow:
    strategy: str
    verifier: str
    budget: int
    n_runs: int
    n_success: int
    success_rate: float
    ci_low: float
    ci_high: float
    success_by_tag: tuple[tuple[str, float], ...]
    mean_reward: float
    mean_used_nfe: float
    mean_verifier_calls: float
    mean_cost: float
    mean_cpu_nanos: float
    total_used_nfe: int


@dataclass
class ExperimentResult:
    records: list[RunRecord]
    summary: dict[tuple[str, str, int], SummaryRow]
    nfe_histograms: dict[tuple[str, str, int], np.ndarray]
    score_curves: dict[tuple[str, str, int], np.ndarray]
    errors: list[tuple[tuple, str]] = field(default_factory=list)
    calibration: dict[tuple[str, str], float] = field(default_factory=dict)
    steps: int = 10
    cost: CostModel = field(default_factory=CostModel)


def binomial_ci(successes: int, n: int) -> tuple[float, float]:
    """Normal-approximation 95% interval ``p -/+ 1.96 sqrt(p(1-p)/n)``, clipped to [0, 1]."""
    p = successes / n
    half = Z95 * math.sqrt(p * (1 - p) / n)
    return max(0.0, p - half), min(1.0, p + half)


def summarize(records: Sequence[RunRecord], cost: CostModel, steps: int,
              order: Sequence[tuple[str, str, int]] | None = None) -> tuple[dict, dict, dict]:
    groups: dict[tuple[str, str, int], list[RunRecord]] = {}
    for r in records:
        groups.setdefault((r.strategy, r.verifier, r.budget), []).append(r)
    keys = [k for k in order if k in groups] if order is not None else list(groups)
    summary, hists, curves = {}, {}, {}
    for key in keys:
        rs = groups[key]
        n = len(rs)
        wins = sum(r.success for r in rs)
        lo, hi = binomial_ci(wins, n)
        by_tag = []
        for tag in ATTRIBUTE_TAGS:
            tagged = [r.success for r in rs if r.attribute_tag == tag]
            by_tag.append((tag, sum(tagged) / len(tagged) if tagged else math.nan))
        used = sum(r.used_nfe for r in rs)
        summary[key] = SummaryRow(
            strategy=key[0], verifier=key[1], budget=key[2], n_runs=n, n_success=wins,
            success_rate=wins / n, ci_low=lo, ci_high=hi, success_by_tag=tuple(by_tag),
            mean_reward=float(np.mean([r.final_reward for r in rs])),
            mean_used_nfe=used / n,
            mean_verifier_calls=sum(r.verifier_calls for r in rs) / n,
            mean_cost=float(np.mean([cost.cost(r.verifier, r.used_nfe, r.verifier_calls) for r in rs])),
            mean_cpu_nanos=sum(r.cpu_nanos for r in rs) / n,
            total_used_nfe=used,
        )
        hists[key] = np.concatenate([[0.0], np.mean([r.per_step_nfe for r in rs], axis=0)])
        traces = np.array([r.accepted_reward_trace for r in rs], dtype=float)
        with np.errstate(invalid="ignore"):
            seen = ~np.isnan(traces)
            counts = seen.sum(axis=0)
            sums = np.where(seen, traces, 0.0).sum(axis=0)
            curves[key] = np.where(counts > 0, sums / np.maximum(counts, 1), np.nan)
    return summary, hists, curves


def resolve_bench(cfg: ExperimentConfig, base_dir: str | None = None) -> Bench:
    if cfg.bench_file is not None:
        from .verifier import load_bench

        path = cfg.bench_file
        if base_dir is not None and not os.path.isabs(path):
            path = os.path.join(base_dir, path)
        try:
            with open(path, encoding="utf-8") as fh:
                return load_bench(fh.read())
        except OSError as e:
            raise ConfigError(f"cannot read bench file {path}: {e}", where="[bench].file") from e
    return gen_bench(cfg.bench)


def make_context(cfg: ExperimentConfig, bench: Bench) -> GenContext:
    return GenContext(bench.target, cfg.interpolant, cfg.grid, cfg.churn)


def run_experiment(cfg: ExperimentConfig, bench: Bench | None = None,
                   scorer_factories: dict[str, ScorerFactory] | None = None) -> ExperimentResult:
    """Execute every cell of the sweep.

    ``scorer_factories`` lets tests swap a verifier name for a custom scorer.
    A failing cell is logged in ``errors`` and skipped; the others still run.
    """
    if bench is None:
        bench = resolve_bench(cfg)
    problems = validate_experiment(cfg, bench)
    if problems:
        raise ConfigError("; ".join(problems))
    ctx = make_context(cfg, bench)
    prompts = bench.prompts[: cfg.max_prompts] if cfg.max_prompts > 0 else bench.prompts
    factories = {name: _scorer_factory(spec, bench.target) for name, spec in cfg.verifiers}
    factories.update(scorer_factories or {})
    specs = dict(cfg.verifiers)

    calibration: dict[tuple[str, str], float] = {}
    for e in cfg.strategies:
        if e.calibrate_percentile is None:
            continue
        pilot = tuple(PILOT_SEED_BASE + i for i in range(e.pilot_seeds))
        for vname, _ in cfg.verifiers:
            delta0 = calibrate_delta(bench, factories[vname], ctx, pilot, e.calibrate_percentile)
            calibration[(e.name, vname)] = delta0

    cells = []
    for e in cfg.strategies:
        for vname, _ in cfg.verifiers:
            for budget in cfg.budgets:
                for prompt in prompts:
                    for seed in cfg.seeds:
                        cells.append((e, vname, budget, prompt, seed))

    def run_cell(cell):
        e, vname, budget, prompt, seed = cell
        spec = specs[vname]
        gen, ver = run_streams(seed, prompt.id, spec.seed_stream)
        scorer = factories[vname](prompt, ver)
        strategy = strategy_for_budget(e, budget)
        delta = None
        if (e.name, vname) in calibration:
            d0 = calibration[(e.name, vname)]
            delta = vt_threshold(d0, budget, strategy.ref_budget) if d0 > 0 else 0.0
        try:
            rec = dispatch(strategy, ctx, scorer, prompt, budget, gen, seed, bench.radius_mult, delta)
        except NoiseSearchError as exc:
            return None, ((e.name, vname, budget, prompt.id, seed), f"{type(exc).__name__}: {exc}")
        return replace(rec, strategy=e.name, verifier=vname), None

    workers = cfg.parallelism
    env = os.environ.get("NOISESEARCH_THREADS")
    if env:
        try:
            workers = max(1, int(env))
        except ValueError:
            raise ConfigError(f"NOISESEARCH_THREADS must be an integer, got {env!r}")
    if workers == 1:
        outcomes = [run_cell(c) for c in cells]
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            outcomes = list(pool.map(run_cell, cells))

    records = [r for r, _ in outcomes if r is not None]
    errors = [err for _, err in outcomes if err is not None]
    for key, msg in errors:
        log.error("cell %s failed: %s", key, msg)
    order = [(e.name, v, b) for e in cfg.strategies for v, _ in cfg.verifiers for b in cfg.budgets]
    summary, hists, curves = summarize(records, cfg.cost, cfg.grid.steps, order)
    return ExperimentResult(records, summary, hists, curves, errors, calibration, cfg.grid.steps, cfg.cost)


# --- views -------------------------------------------------------------------


@dataclass(frozen=True)
class NfeHistogram:
    raw: np.ndarray  # mean NFEs per step, index 0 = zeroth step
    shares: np.ndarray  # raw / budget


def nfe_histogram(result: ExperimentResult, key: tuple[str, str, int]) -> NfeHistogram:
    if key not in result.nfe_histograms:
        raise KeyError(f"no records for {key}")
    raw = result.nfe_histograms[key]
    return NfeHistogram(raw, raw / key[2])


@dataclass
class ScalingSeries:
    points: list[tuple[float, float]]  # (relative cost, success rate), sorted by cost
    budgets: list[int]
    missing: list[int] = field(default_factory=list)

    def __iter__(self):
        return iter(self.points)

    def __len__(self):
        return len(self.points)


def regular_cost(cost: CostModel, verifier: str, steps: int) -> float:
    """Cost of one unsearched generation: T NFEs plus the reporting verifier call."""
    return cost.cost(verifier, steps, 1)


def scaling_series(result: ExperimentResult, strategy: str, verifier: str,
                   budgets: Sequence[int] | None = None) -> ScalingSeries:
    """Success rate against cost, with cost relative to a regular generation."""
    present = sorted(b for (s, v, b) in result.summary if s == strategy and v == verifier)
    wanted = sorted(budgets) if budgets is not None else present
    if len(wanted) < 2:
        raise ConfigError("a scaling series needs at least two budgets")
    norm = regular_cost(result.cost, verifier, result.steps)
    pts, got, missing = [], [], []
    for b in wanted:
        row = result.summary.get((strategy, verifier, b))
        if row is None:
            missing.append(b)
            continue
        pts.append((row.mean_cost / norm, row.success_rate))
        got.append(b)
    if missing:
        log.warning("scaling series %s/%s is missing budgets %s", strategy, verifier, missing)
    order = sorted(range(len(pts)), key=lambda i: (pts[i][0], got[i]))
    return ScalingSeries([pts[i] for i in order], [got[i] for i in order], missing)


def cost_at_success(result: ExperimentResult, strategy: str, verifier: str, target_rate: float) -> float | None:
    """Linearly interpolated relative cost at which a series first reaches ``target_rate``."""
    series = scaling_series(result, strategy, verifier)
    prev = None
    for cost, rate in series:
        if rate >= target_rate:
            if prev is None or prev[1] >= rate:
                return cost
            c0, r0 = prev
            return c0 + (cost - c0) * (target_rate - r0) / (rate - r0)
        prev = (cost, rate)
    return None
