"""Test-time compute allocation strategies over the analytic flow.

Every runner spends generator NFEs (one per ``flow.step`` call) and verifier
calls through a :class:`BudgetLedger`. Candidates are always scored on their
Tweedie estimate. Ties in any argmax go to the lowest index.

All runners draw prior samples and step noise from the single ``rng`` they
are given, in a fixed order, so a run is reproducible from its seed.
"""

from __future__ import annotations

import math
import time
import zlib
from dataclasses import dataclass, field, replace
from typing import Sequence, Union

import numpy as np

from . import flow
from .errors import ConfigError, LedgerError
from .flow import FlowState, GmmTarget, Interpolant, SdeChurn, TimeGrid
from .verifier import Prompt, Scorer, success

GEN_STREAM = 0
VERIFIER_STREAM = 1


@dataclass(frozen=True)
class GenContext:
    target: GmmTarget
    interpolant: Interpolant = Interpolant.LINEAR
    grid: TimeGrid = field(default_factory=TimeGrid.uniform)
    churn: SdeChurn = field(default_factory=SdeChurn)

    @property
    def steps(self) -> int:
        return self.grid.steps

    def prior(self, rng: np.random.Generator) -> FlowState:
        return FlowState.initial(flow.sample_prior(self.target.dims, rng), self.grid)

    def sde_step(self, state: FlowState, rng: np.random.Generator) -> FlowState:
        return flow.step(state, self.target, self.interpolant, self.grid, self.churn, rng)

    def ode_step(self, state: FlowState) -> FlowState:
        return flow.step(state, self.target, self.interpolant, self.grid, flow.ODE, None)

    def tweedie(self, state: FlowState) -> np.ndarray:
        return flow.posterior_mean_x1(self.target, self.interpolant, state.z, state.time)


# --- strategy configs -------------------------------------------------------


@dataclass(frozen=True)
class Regular:
    tag = "regular"


@dataclass(frozen=True)
class BestOfN:
    tag = "best_of_n"


@dataclass(frozen=True)
class SearchOverPaths:
    width: int = 2
    branch: int = 4
    tag = "sop"

    def __post_init__(self):
        if self.width < 1 or self.branch < 1:
            raise ConfigError("sop width and branch must be positive")


@dataclass(frozen=True)
class Svdd:
    candidates_per_step: int = 25
    tag = "svdd"

    def __post_init__(self):
        if self.candidates_per_step < 1:
            raise ConfigError("svdd candidates_per_step must be >= 1")


@dataclass(frozen=True)
class Rbf:
    zeroth_step_nfe: int = 4
    tag = "rbf"

    def __post_init__(self):
        if self.zeroth_step_nfe < 1:
            raise ConfigError("rbf zeroth_step_nfe must be >= 1")


@dataclass(frozen=True)
class Manual:
    schedule: tuple[int, ...]
    tag = "manual"

    def __post_init__(self):
        object.__setattr__(self, "schedule", tuple(int(x) for x in self.schedule))
        if not self.schedule or any(x < 1 for x in self.schedule):
            raise ConfigError("manual schedule entries must all be >= 1")


@dataclass(frozen=True)
class VerifierThreshold:
    delta0: float = 0.005
    ref_budget: int = 40
    keep_best: bool = True
    # False gives the literal loop: no reserve, may return a partially denoised sample
    reserve: bool = True
    tag = "vt"

    def __post_init__(self):
        if not self.delta0 > 0:
            raise ConfigError("vt delta0 must be > 0")
        if self.ref_budget < 1:
            raise ConfigError("vt ref_budget must be positive")


StrategyConfig = Union[Regular, BestOfN, SearchOverPaths, Svdd, Rbf, Manual, VerifierThreshold]
STRATEGY_TYPES = {cls.tag: cls for cls in (Regular, BestOfN, SearchOverPaths, Svdd, Rbf, Manual, VerifierThreshold)}


# --- ledger -----------------------------------------------------------------


class BudgetLedger:
    """Exact per-step NFE and verifier-call accounting for one run."""

    def __init__(self, total_nfe: int, steps: int):
        if total_nfe < 1:
            raise ConfigError("budget must be a positive integer")
        self.total_nfe = total_nfe
        self.steps = steps
        self.used_nfe = 0
        self.per_step_nfe = [0] * steps
        self.verifier_calls = 0
        self.current_step = 0

    @property
    def reserve(self) -> int:
        """NFEs still owed to finish the trajectory at one per step."""
        return self.steps - self.current_step

    @property
    def remaining(self) -> int:
        return self.total_nfe - self.used_nfe

    def charge_nfe(self, step: int, count: int = 1) -> None:
        """Charge NFEs spent stepping into grid index ``step`` (1-based)."""
        if self.used_nfe + count > self.total_nfe:
            raise LedgerError(f"NFE budget exceeded: {self.used_nfe} + {count} > {self.total_nfe}")
        self.per_step_nfe[step - 1] += count
        self.used_nfe += count

    def charge_verifier(self, count: int = 1) -> None:
        self.verifier_calls += count

    def check(self) -> None:
        if sum(self.per_step_nfe) != self.used_nfe:
            raise LedgerError(f"per-step NFEs sum to {sum(self.per_step_nfe)}, used_nfe is {self.used_nfe}")
        if self.used_nfe > self.total_nfe:
            raise LedgerError(f"used {self.used_nfe} NFEs of a {self.total_nfe} budget")
        if any(x < 0 for x in self.per_step_nfe):
            raise LedgerError("negative per-step NFE count")


@dataclass(frozen=True)
class RunRecord:
    strategy: str
    prompt_id: str
    seed: int
    budget: int
    final_x: tuple[float, ...]
    final_reward: float
    accepted_reward_trace: tuple[float, ...]  # index = grid step; NaN where nothing was scored
    per_step_nfe: tuple[int, ...]
    used_nfe: int
    verifier_calls: int
    success: bool
    cpu_nanos: int = 0
    final_step: int = 0
    forced_steps: tuple[int, ...] = ()
    verifier: str = ""
    attribute_tag: str = ""

    @property
    def unused(self) -> int:
        return self.budget - self.used_nfe


class _Run:
    """Mutable bookkeeping shared by the runners."""

    def __init__(self, ctx: GenContext, scorer: Scorer, budget: int, rng: np.random.Generator):
        if budget < ctx.steps:
            raise ConfigError(f"budget {budget} is smaller than the number of steps {ctx.steps}")
        self.ctx = ctx
        self.scorer = scorer
        self.rng = rng
        self.ledger = BudgetLedger(budget, ctx.steps)
        self.trace = [math.nan] * (ctx.steps + 1)
        self.forced: list[int] = []

    def score(self, state: FlowState) -> float:
        self.ledger.charge_verifier()
        return float(self.scorer(self.ctx.tweedie(state)))

    def sde_step(self, state: FlowState) -> FlowState:
        self.ledger.charge_nfe(state.step + 1)
        return self.ctx.sde_step(state, self.rng)

    def ode_step(self, state: FlowState) -> FlowState:
        self.ledger.charge_nfe(state.step + 1)
        return self.ctx.ode_step(state)

    def best_of(self, state: FlowState, count: int) -> tuple[FlowState, float]:
        """Draw ``count`` candidates from ``state``; keep the first argmax."""
        best, best_r = None, -math.inf
        for _ in range(count):
            cand = self.sde_step(state)
            r = self.score(cand)
            if best is None or r > best_r:
                best, best_r = cand, r
        return best, best_r

    def finish(self, strategy: str, state: FlowState, prompt: Prompt | None, radius_mult: float) -> RunRecord:
        self.ledger.check()
        # only the literal VT loop can stop early; report its Tweedie estimate
        x = state.z if state.step == self.ctx.steps else self.ctx.tweedie(state)
        final_reward = float(self.scorer(x))
        self.ledger.charge_verifier()
        ok = prompt is not None and success(prompt, x, self.ctx.target, radius_mult)
        return RunRecord(
            strategy=strategy,
            prompt_id=prompt.id if prompt is not None else "",
            seed=0,
            budget=self.ledger.total_nfe,
            final_x=tuple(float(v) for v in x),
            final_reward=final_reward,
            accepted_reward_trace=tuple(self.trace),
            per_step_nfe=tuple(self.ledger.per_step_nfe),
            used_nfe=self.ledger.used_nfe,
            verifier_calls=self.ledger.verifier_calls,
            success=ok,
            final_step=state.step,
            forced_steps=tuple(self.forced),
            attribute_tag=prompt.attribute_tag if prompt is not None else "",
        )


# --- runners ----------------------------------------------------------------


def run_regular(ctx: GenContext, scorer: Scorer, prompt: Prompt | None, budget: int,
                rng: np.random.Generator, radius_mult: float = 3.0) -> RunRecord:
    run = _Run(ctx, scorer, budget, rng)
    state = ctx.prior(rng)
    while state.step < ctx.steps:
        state = run.sde_step(state)
    return run.finish(Regular.tag, state, prompt, radius_mult)


def run_best_of_n(ctx: GenContext, scorer: Scorer, prompt: Prompt | None, budget: int,
                  rng: np.random.Generator, radius_mult: float = 3.0) -> RunRecord:
    """floor(N/T) independent trajectories, keep the best final reward.

    Leftover NFEs when N is not a multiple of T stay unused.
    """
    run = _Run(ctx, scorer, budget, rng)
    best, best_r = None, -math.inf
    for _ in range(budget // ctx.steps):
        state = ctx.prior(rng)
        while state.step < ctx.steps:
            state = run.sde_step(state)
        r = run.score(state)
        if best is None or r > best_r:
            best, best_r = state, r
    run.trace[ctx.steps] = best_r
    return run.finish(BestOfN.tag, best, prompt, radius_mult)


def run_sop(ctx: GenContext, scorer: Scorer, prompt: Prompt | None, budget: int,
            cfg: SearchOverPaths, rng: np.random.Generator, radius_mult: float = 3.0) -> RunRecord:
    """Beam of ``width`` particles, each branched ``branch`` times per step."""
    run = _Run(ctx, scorer, budget, rng)
    T = ctx.steps
    fan = cfg.width * cfg.branch
    particles = [ctx.prior(rng) for _ in range(cfg.width)]
    rewards = [-math.inf] * cfg.width
    i = 1
    while i <= T and run.ledger.used_nfe + fan + (T - i) <= budget:
        children, child_r = [], []
        for p in particles:
            for _ in range(cfg.branch):
                c = run.sde_step(p)
                children.append(c)
                child_r.append(run.score(c))
        order = sorted(range(fan), key=lambda j: (-child_r[j], j))[: cfg.width]
        particles = [children[j] for j in order]
        rewards = [child_r[j] for j in order]
        run.trace[i] = rewards[0]
        i += 1
    best = particles[int(np.argmax(rewards))]
    if i <= T:
        run.forced.append(i)
        while best.step < T:
            best = run.ode_step(best)
    return run.finish(SearchOverPaths.tag, best, prompt, radius_mult)


def run_svdd(ctx: GenContext, scorer: Scorer, prompt: Prompt | None, budget: int,
             cfg: Svdd, rng: np.random.Generator, radius_mult: float = 3.0) -> RunRecord:
    return _run_per_step(ctx, scorer, prompt, budget, [cfg.candidates_per_step] * ctx.steps,
                         rng, radius_mult, Svdd.tag)


def run_manual(ctx: GenContext, scorer: Scorer, prompt: Prompt | None, budget: int,
               schedule: Sequence[int], rng: np.random.Generator, radius_mult: float = 3.0) -> RunRecord:
    schedule = list(schedule)
    if len(schedule) != ctx.steps:
        raise ConfigError(f"manual schedule has {len(schedule)} entries, grid has {ctx.steps} steps", where="schedule")
    if sum(schedule) != budget:
        raise ConfigError(f"manual schedule sums to {sum(schedule)}, budget is {budget}", where="schedule")
    return _run_per_step(ctx, scorer, prompt, budget, schedule, rng, radius_mult, Manual.tag)


def _run_per_step(ctx, scorer, prompt, budget, counts, rng, radius_mult, tag) -> RunRecord:
    run = _Run(ctx, scorer, budget, rng)
    state = ctx.prior(rng)
    for i in range(1, ctx.steps + 1):
        run.ledger.current_step = i - 1
        affordable = budget - run.ledger.used_nfe - (run.ledger.reserve - 1)
        state, r = run.best_of(state, max(1, min(counts[i - 1], affordable)))
        run.trace[i] = r
    run.ledger.current_step = ctx.steps
    return run.finish(tag, state, prompt, radius_mult)


def rbf_quota(budget: int, used: int, step: int, steps: int, rollover: int) -> int:
    """Candidates allowed at ``step`` (1-based) under rollover budget forcing.

    The final step gets everything that is left.
    """
    steps_left = steps - step + 1
    if step == steps:
        return budget - used
    pool = budget - used - steps_left
    return min(1 + pool // steps_left + rollover, 1 + pool)


def run_rbf(ctx: GenContext, scorer: Scorer, prompt: Prompt | None, budget: int,
            cfg: Rbf, rng: np.random.Generator, radius_mult: float = 3.0) -> RunRecord:
    """Greedy rollover budget forcing.

    Zeroth step scores ``zeroth_step_nfe`` prior draws (verifier calls only).
    Each later step advances on the first candidate that strictly beats the
    previous step's accepted reward, otherwise on the step's best candidate
    once its quota runs out. Unspent quota rolls over; the last step spends
    whatever remains.
    """
    run = _Run(ctx, scorer, budget, rng)
    T = ctx.steps
    state, r_best = None, -math.inf
    for _ in range(cfg.zeroth_step_nfe):
        cand = ctx.prior(rng)
        r = run.score(cand)
        if state is None or r > r_best:
            state, r_best = cand, r
    run.trace[0] = r_best
    rollover = 0
    for i in range(1, T + 1):
        run.ledger.current_step = i - 1
        quota = rbf_quota(budget, run.ledger.used_nfe, i, T, rollover)
        best, best_r = None, -math.inf
        spent = 0
        while spent < quota:
            cand = run.sde_step(state)
            r = run.score(cand)
            spent += 1
            if best is None or r > best_r:
                best, best_r = cand, r
            if i < T and r > r_best:
                break
        rollover = quota - spent
        state, r_best = best, best_r
        run.trace[i] = r_best
    run.ledger.current_step = T
    return run.finish(Rbf.tag, state, prompt, radius_mult)


def vt_threshold(delta0: float, budget: int, ref_budget: int) -> float:
    """Threshold scaled linearly with the total NFE budget."""
    if not (delta0 > 0 and budget > 0 and ref_budget > 0):
        raise ConfigError("delta0, budget and ref_budget must be positive")
    # ratio first, so budget == ref_budget returns delta0 unchanged
    return delta0 * (budget / ref_budget)


def run_vt(ctx: GenContext, scorer: Scorer, prompt: Prompt | None, budget: int,
           cfg: VerifierThreshold, rng: np.random.Generator, radius_mult: float = 3.0,
           delta: float | None = None) -> RunRecord:
    """Verifier-threshold search.

    Stay at a step until a candidate's reward beats the previous accepted
    reward by more than ``delta``. When the budget left only covers one NFE
    per remaining step, the current step is force-accepted (best rejected
    candidate, or the last one without ``keep_best``) and the rest of the
    trajectory runs as a plain ODE.
    """
    if delta is None:
        delta = vt_threshold(cfg.delta0, budget, cfg.ref_budget)
    run = _Run(ctx, scorer, budget, rng)
    T = ctx.steps
    state = ctx.prior(rng)
    run.trace[0] = run.score(state)
    fallback, fallback_r = None, -math.inf
    while state.step < T:
        t = state.step + 1
        run.ledger.current_step = state.step
        if not cfg.reserve and run.ledger.remaining == 0:
            # literal loop: budget gone, return the last candidate as is
            state = fallback if fallback is not None else state
            break
        cand = run.sde_step(state)
        r = run.score(cand)
        if r - run.trace[t - 1] > delta:
            state = cand
            run.trace[t] = r
            fallback, fallback_r = None, -math.inf
            continue
        if not cfg.keep_best or fallback is None or r > fallback_r:
            fallback, fallback_r = cand, r
        if cfg.reserve and run.ledger.used_nfe + (T - t) >= budget:
            run.forced.append(t)
            state = fallback
            run.trace[t] = fallback_r
            while state.step < T:
                state = run.ode_step(state)
    run.ledger.current_step = state.step
    return run.finish(VerifierThreshold.tag, state, prompt, radius_mult)


# --- dispatch ---------------------------------------------------------------


def prompt_key(prompt_id: str) -> int:
    return zlib.crc32(prompt_id.encode("utf-8"))


def run_streams(seed: int, prompt_id: str, seed_stream: int = 0) -> tuple[np.random.Generator, np.random.Generator]:
    """Generator and verifier-noise streams for one (seed, prompt) cell.

    Streams do not depend on the strategy, so strategies compared at the same
    seed start from the same prior draws.
    """
    key = prompt_key(prompt_id)
    gen = np.random.default_rng(np.random.SeedSequence([seed, key, GEN_STREAM]))
    ver = np.random.default_rng(np.random.SeedSequence([seed, key, VERIFIER_STREAM, seed_stream]))
    return gen, ver


def dispatch(strategy: StrategyConfig, ctx: GenContext, scorer: Scorer, prompt: Prompt | None,
             budget: int, rng: np.random.Generator, seed: int = 0, radius_mult: float = 3.0,
             delta: float | None = None) -> RunRecord:
    """Route to the runner for ``strategy`` and validate the returned ledger."""
    start = time.thread_time_ns()
    if isinstance(strategy, Regular):
        rec = run_regular(ctx, scorer, prompt, budget, rng, radius_mult)
    elif isinstance(strategy, BestOfN):
        rec = run_best_of_n(ctx, scorer, prompt, budget, rng, radius_mult)
    elif isinstance(strategy, SearchOverPaths):
        rec = run_sop(ctx, scorer, prompt, budget, strategy, rng, radius_mult)
    elif isinstance(strategy, Svdd):
        rec = run_svdd(ctx, scorer, prompt, budget, strategy, rng, radius_mult)
    elif isinstance(strategy, Rbf):
        rec = run_rbf(ctx, scorer, prompt, budget, strategy, rng, radius_mult)
    elif isinstance(strategy, Manual):
        rec = run_manual(ctx, scorer, prompt, budget, strategy.schedule, rng, radius_mult)
    elif isinstance(strategy, VerifierThreshold):
        rec = run_vt(ctx, scorer, prompt, budget, strategy, rng, radius_mult, delta)
    else:
        raise ConfigError(f"unknown strategy {strategy!r}")
    elapsed = time.thread_time_ns() - start
    validate_record(rec, ctx.steps, full_denoise=getattr(strategy, "reserve", True))
    return replace(rec, seed=seed, cpu_nanos=elapsed)


def validate_record(rec: RunRecord, steps: int, full_denoise: bool = True) -> None:
    if len(rec.per_step_nfe) != steps:
        raise LedgerError(f"per_step_nfe has {len(rec.per_step_nfe)} entries, expected {steps}")
    if sum(rec.per_step_nfe) != rec.used_nfe:
        raise LedgerError("per_step_nfe does not sum to used_nfe")
    if rec.used_nfe > rec.budget:
        raise LedgerError(f"used {rec.used_nfe} NFEs with budget {rec.budget}")
    if any(x < 0 for x in rec.per_step_nfe):
        raise LedgerError("negative per-step NFE count")
    if len(rec.accepted_reward_trace) > steps + 1:
        raise LedgerError("reward trace longer than the grid")
    if full_denoise and rec.final_step != steps:
        raise LedgerError(f"final sample stopped at step {rec.final_step} of {steps}")


