"""Independent reference implementations shared by the unit and acceptance tests.

Each oracle re-derives a strategy's result from the flow primitives, without
going through the strategy code it checks.
"""

import itertools
import math
from dataclasses import fields

import numpy as np

from noisesearch import search
from noisesearch.flow import Interpolant, schedule, score, velocity
from noisesearch.search import GenContext, run_streams
from noisesearch.verifier import BenchConfig, Verifier, VerifierSpec, gen_bench, success

BENCH = gen_bench(BenchConfig())
CTX = GenContext(BENCH.target)
ORACLE = VerifierSpec("oracle_loglik")
PROMPT = BENCH.prompts[45]


def oracle_scorer(prompt=PROMPT, target=BENCH.target):
    return Verifier(ORACLE, prompt, target)


def rng_for(seed, prompt=PROMPT):
    return run_streams(seed, prompt.id)[0]


def assert_records_equal(a, b):
    for f in fields(a):
        np.testing.assert_equal(getattr(a, f.name), getattr(b, f.name), err_msg=f.name)


class Counter:
    """Scorer returning 1, 2, 3, ... so every candidate improves on the last."""

    def __init__(self):
        self.n = 0

    def __call__(self, x):
        self.n += 1
        return float(self.n)


class Recording:
    def __init__(self, inner):
        self.inner = inner
        self.calls = []

    def __call__(self, x):
        r = self.inner(x)
        self.calls.append((np.array(x), r))
        return r


# --- independent reference machinery -----------------------------------------


def em_step(z, t0, t1, target, gamma, rng):
    """Euler-Maruyama step written out from velocity and score."""
    dt = t1 - t0
    a = schedule(Interpolant.LINEAR, t0)[0]
    sigma = gamma * a
    s = score(target, Interpolant.LINEAR, z, t0)
    drift = velocity(target, Interpolant.LINEAR, z, t0) + 0.5 * sigma * sigma * s
    z = z + drift * dt
    if sigma > 0:
        z = z + sigma * math.sqrt(dt) * rng.standard_normal(z.shape)
    return z


def tweedie(z, t):
    return CTX.tweedie(search.FlowState(z, 0, t))


def brute_force_bon(scorer, budget, rng, gamma=0.5):
    times = CTX.grid.times
    finals = []
    for _ in range(budget // CTX.steps):
        z = rng.standard_normal(2)
        for i in range(CTX.steps):
            z = em_step(z, times[i], times[i + 1], BENCH.target, gamma, rng)
        finals.append(z)
    rewards = [scorer(z) for z in finals]
    best = max(range(len(finals)), key=lambda j: (rewards[j], -j))
    return finals[best], rewards[best], len(finals)


def exhaustive_sop(scorer, rng, ctx, width, branch):
    """Materialize every level of the tree and choose the kept set by enumeration."""
    times = ctx.grid.times
    particles = [rng.standard_normal(2) for _ in range(width)]
    rewards = None
    for i in range(ctx.steps):
        children = []
        for p in particles:
            for _ in range(branch):
                children.append(em_step(p, times[i], times[i + 1], ctx.target, ctx.churn.gamma, rng))
        child_r = [scorer(ctx.tweedie(search.FlowState(c, i + 1, times[i + 1]))) for c in children]
        # the kept set maximizes total reward; among equal totals prefer lower indices
        best_set = max(itertools.combinations(range(len(children)), width),
                       key=lambda s: (sum(child_r[j] for j in s), [-j for j in s]))
        ranked = sorted(best_set, key=lambda j: (-child_r[j], j))
        particles = [children[j] for j in ranked]
        rewards = [child_r[j] for j in ranked]
    return particles[0], rewards


class NeverAfter:
    """Real rewards for the first ``n`` calls, then -inf for ever."""

    def __init__(self, inner, n):
        self.inner, self.n, self.calls = inner, n, 0

    def __call__(self, x):
        self.calls += 1
        return self.inner(x) if self.calls <= self.n else -math.inf


def vt_trace_ok(rec, delta):
    tr = rec.accepted_reward_trace
    for t in range(1, len(tr)):
        if math.isnan(tr[t]) or t in rec.forced_steps:
            continue
        if not tr[t] - tr[t - 1] > delta:
            return False
    return True


def rbf_never_accept_replay(budget, steps=10):
    """Per-step quotas when no candidate is ever accepted: nothing rolls over."""
    used, replay = 0, []
    for i in range(1, steps + 1):
        left = steps - i + 1
        q = budget - used if i == steps else 1 + (budget - used - left) // left
        replay.append(q)
        used += q
    return replay


def svdd_replay(got, seed, prompt=PROMPT):
    """Recompute an SVDD run with the same noise and a fresh verifier.

    Returns the per-step best rewards and the final latent.
    """
    fresh = oracle_scorer(prompt)
    rng = rng_for(seed, prompt)
    times = CTX.grid.times
    z = rng.standard_normal(2)
    best_rewards = []
    for i in range(CTX.steps):
        best_z, best_r = None, -math.inf
        for _ in range(got.per_step_nfe[i]):
            c = em_step(z, times[i], times[i + 1], BENCH.target, 0.5, rng)
            r = fresh(tweedie(c, times[i + 1]))
            if best_z is None or r > best_r:
                best_z, best_r = c, r
        z = best_z
        best_rewards.append(best_r)
    return best_rewards, tuple(float(v) for v in z)


def brute_force_bon_record(seed, prompt=PROMPT, budget=40):
    """The record a BoN run must produce, built from the brute-force driver."""
    scorer = oracle_scorer(prompt)
    x, r, n = brute_force_bon(scorer, budget, rng_for(seed, prompt))
    trace = [math.nan] * (CTX.steps + 1)
    trace[CTX.steps] = r
    return search.RunRecord(
        strategy="best_of_n", prompt_id=prompt.id, seed=0, budget=budget, final_x=tuple(float(v) for v in x),
        final_reward=r, accepted_reward_trace=tuple(trace), per_step_nfe=(n,) * CTX.steps,
        used_nfe=CTX.steps * n, verifier_calls=n + 1, success=success(prompt, x, BENCH.target),
        final_step=CTX.steps, attribute_tag=prompt.attribute_tag,
    )
