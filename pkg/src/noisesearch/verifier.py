"""Synthetic prompts, reward models and the exact success judge.

Prompts are attribute constraints over the mixture components. A component
*satisfies* a prompt when its mean meets the constraint; rewards score a
denoised estimate against the satisfying part of the mixture.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Callable, Sequence, Union

import numpy as np

from .errors import ConfigError, DomainError
from .flow import GmmTarget

ATTRIBUTE_TAGS = ("single_object", "position", "attribute_binding")
UNSATISFIABLE_REWARD = -1e9
BENCH_FORMAT = "noisesearch-bench"
BENCH_VERSION = 1


@dataclass(frozen=True)
class ModeIs:
    k: int


@dataclass(frozen=True)
class InQuadrant:
    """Per-dimension sign pattern; 0 leaves that dimension unconstrained."""

    signs: tuple[int, ...]


@dataclass(frozen=True)
class Composite:
    parts: tuple["Constraint", ...]


Constraint = Union[ModeIs, InQuadrant, Composite]


@dataclass(frozen=True)
class Prompt:
    id: str
    constraint: Constraint
    attribute_tag: str


def check_constraint(constraint: Constraint, target: GmmTarget) -> None:
    """Raise ConfigError if the constraint cannot refer to ``target``."""
    if isinstance(constraint, ModeIs):
        if not 0 <= constraint.k < target.n_components:
            raise ConfigError(f"ModeIs references component {constraint.k}, target has {target.n_components}")
    elif isinstance(constraint, InQuadrant):
        if len(constraint.signs) != target.dims:
            raise ConfigError(f"sign pattern {constraint.signs} does not match dims={target.dims}")
        if any(s not in (-1, 0, 1) for s in constraint.signs) or not any(constraint.signs):
            raise ConfigError(f"sign pattern {constraint.signs} must use -1/0/1 and be nonzero somewhere")
    elif isinstance(constraint, Composite):
        if not constraint.parts:
            raise ConfigError("Composite constraint must not be empty")
        for part in constraint.parts:
            check_constraint(part, target)
    else:
        raise ConfigError(f"unknown constraint {constraint!r}")


def satisfying_mask(constraint: Constraint, target: GmmTarget) -> np.ndarray:
    """Boolean mask over components whose mean satisfies the constraint."""
    check_constraint(constraint, target)
    if isinstance(constraint, ModeIs):
        mask = np.zeros(target.n_components, dtype=bool)
        mask[constraint.k] = True
        return mask
    if isinstance(constraint, InQuadrant):
        signs = np.asarray(constraint.signs)
        active = signs != 0
        return np.all(np.sign(target.means[:, active]) == signs[active], axis=1)
    mask = np.ones(target.n_components, dtype=bool)
    for part in constraint.parts:
        mask &= satisfying_mask(part, target)
    return mask


class VerifierKind(str, Enum):
    ORACLE_LOGLIK = "oracle_loglik"
    NEG_DISTANCE = "neg_distance"
    NOISY_ORACLE = "noisy_oracle"
    BLURRED = "blurred"
    # diagnostic stub: same reward everywhere
    CONSTANT = "constant"


@dataclass(frozen=True)
class VerifierSpec:
    kind: VerifierKind = VerifierKind.ORACLE_LOGLIK
    noise_std: float | None = None
    extra_std: float | None = None
    seed_stream: int = 0
    value: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "kind", VerifierKind(self.kind))
        if self.kind == VerifierKind.NOISY_ORACLE:
            if self.noise_std is None or not self.noise_std > 0:
                raise ConfigError("noisy_oracle needs noise_std > 0")
        if self.kind == VerifierKind.BLURRED:
            if self.extra_std is None:
                object.__setattr__(self, "extra_std", 0.75)
            if not self.extra_std > 0:
                raise ConfigError("blurred needs extra_std > 0")


@dataclass(frozen=True)
class Reward:
    value: float
    verifier_calls: int = 1


# A scorer maps a denoised estimate to a scalar reward; one call = one verifier call.
Scorer = Callable[[np.ndarray], float]


def _masked_loglik(x: np.ndarray, weights: np.ndarray, means: np.ndarray, stds: np.ndarray) -> float:
    d = means.shape[1]
    w = weights / weights.sum()
    diff = x - means
    log_terms = np.log(w) - d * np.log(stds) - 0.5 * d * math.log(2 * math.pi) - 0.5 * (diff * diff).sum(axis=1) / stds ** 2
    top = log_terms.max()
    return float(top + math.log(np.exp(log_terms - top).sum()))


@dataclass
class Verifier:
    """A VerifierSpec bound to one (prompt, target) pair.

    Calling it scores an estimate; the noisy kind draws from ``noise_rng``,
    which should be a stream dedicated to verifier noise.
    """

    spec: VerifierSpec
    prompt: Prompt
    target: GmmTarget
    noise_rng: np.random.Generator | None = None
    _mask: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        self._mask = satisfying_mask(self.prompt.constraint, self.target)
        if self.spec.kind == VerifierKind.NOISY_ORACLE and self.noise_rng is None:
            self.noise_rng = np.random.default_rng(self.spec.seed_stream)
        m = self._mask
        self._w = self.target.weights[m]
        self._mu = self.target.means[m]
        self._sd = self.target.stds[m]
        if self.spec.kind == VerifierKind.BLURRED:
            self._sd = self._sd + self.spec.extra_std

    def __call__(self, x_hat: np.ndarray) -> float:
        x_hat = np.asarray(x_hat, dtype=float)
        if not np.all(np.isfinite(x_hat)):
            raise DomainError("x_hat must be finite")
        if not self._mask.any():
            return UNSATISFIABLE_REWARD
        kind = self.spec.kind
        if kind == VerifierKind.CONSTANT:
            return self.spec.value
        if kind == VerifierKind.NEG_DISTANCE:
            return -float(np.sqrt(((x_hat - self._mu) ** 2).sum(axis=1)).min())
        value = _masked_loglik(x_hat, self._w, self._mu, self._sd)
        if kind == VerifierKind.NOISY_ORACLE:
            value += self.spec.noise_std * float(self.noise_rng.standard_normal())
        return value


def evaluate(
    spec: VerifierSpec,
    x_hat: np.ndarray,
    prompt: Prompt,
    target: GmmTarget,
    noise_rng: np.random.Generator | None = None,
) -> Reward:
    return Reward(Verifier(spec, prompt, target, noise_rng)(x_hat))


def nearest_component(x: np.ndarray, target: GmmTarget) -> int:
    d2 = ((np.asarray(x, dtype=float) - target.means) ** 2).sum(axis=1)
    return int(np.argmin(d2))  # argmin keeps the lowest index on ties


def success(prompt: Prompt, x_final: np.ndarray, target: GmmTarget, radius_mult: float = 3.0) -> bool:
    """Exact judge: nearest mode satisfies the prompt and x_final lies within its radius."""
    x_final = np.asarray(x_final, dtype=float)
    if not np.all(np.isfinite(x_final)):
        raise DomainError("x_final must be finite")
    k = nearest_component(x_final, target)
    if not satisfying_mask(prompt.constraint, target)[k]:
        return False
    return bool(np.linalg.norm(x_final - target.means[k]) <= radius_mult * target.stds[k])


# --- benchmark generation -------------------------------------------------


@dataclass(frozen=True)
class BenchConfig:
    n_modes: int = 8
    radius: float = 3.0
    std: float = 0.25
    n_prompts: int = 40  # per attribute tag
    radius_mult: float = 3.0
    seed: int = 0

    def __post_init__(self):
        if self.n_modes < 1 or self.n_prompts < 1:
            raise ConfigError("n_modes and n_prompts must be positive")
        if not (self.radius > 0 and self.std > 0 and self.radius_mult > 0):
            raise ConfigError("radius, std and radius_mult must be positive")


@dataclass(frozen=True)
class Bench:
    target: GmmTarget
    prompts: tuple[Prompt, ...]
    radius_mult: float = 3.0


def bench_layout(cfg: BenchConfig) -> GmmTarget:
    """Equal-weight modes on a circle, rotated half a slot off the axes.

    The half-slot rotation keeps every mean strictly inside a quadrant, so
    sign-pattern prompts are never ambiguous.
    """
    n = cfg.n_modes
    angles = 2 * math.pi * (np.arange(n) + 0.5) / n
    means = cfg.radius * np.stack([np.cos(angles), np.sin(angles)], axis=1)
    return GmmTarget(np.full(n, 1.0 / n), means, np.full(n, cfg.std))


def _signs_of(mean: np.ndarray) -> tuple[int, ...]:
    return tuple(int(s) for s in np.sign(mean))


def _half_plane(signs: tuple[int, ...], dim: int) -> InQuadrant:
    return InQuadrant(tuple(s if i == dim else 0 for i, s in enumerate(signs)))


def gen_bench(cfg: BenchConfig, rng: np.random.Generator | None = None) -> Bench:
    """Generate a target and ``n_prompts`` prompts per attribute tag.

    Every constraint is derived from an anchor mode that satisfies it, so the
    suite is satisfiable by construction.
    """
    if rng is None:
        rng = np.random.default_rng(cfg.seed)
    target = bench_layout(cfg)
    n = target.n_components
    prompts: list[Prompt] = []
    for tag in ATTRIBUTE_TAGS:
        for i in range(cfg.n_prompts):
            anchor = int(rng.integers(n))
            signs = _signs_of(target.means[anchor])
            if tag == "single_object":
                c: Constraint = ModeIs(anchor)
            elif tag == "position":
                if rng.random() < 1 / 3:
                    c = _half_plane(signs, int(rng.integers(target.dims)))
                else:
                    c = InQuadrant(signs)
            else:
                if rng.random() < 0.5:
                    c = Composite((ModeIs(anchor), _half_plane(signs, int(rng.integers(target.dims)))))
                else:
                    c = Composite((_half_plane(signs, 0), _half_plane(signs, 1)))
            assert satisfying_mask(c, target).any(), "generated an unsatisfiable prompt"
            prompts.append(Prompt(f"{tag}-{i:03d}", c, tag))
    return Bench(target, tuple(prompts), cfg.radius_mult)


def bench_problems(bench: Bench) -> list[str]:
    """Semantic problems with a (possibly hand-edited) bench; empty when valid."""
    problems = []
    seen = set()
    for p in bench.prompts:
        if p.id in seen:
            problems.append(f"prompt {p.id}: duplicate id")
        seen.add(p.id)
        if p.attribute_tag not in ATTRIBUTE_TAGS:
            problems.append(f"prompt {p.id}: unknown attribute_tag {p.attribute_tag!r}")
        try:
            if not satisfying_mask(p.constraint, bench.target).any():
                problems.append(f"prompt {p.id}: no component satisfies the constraint")
        except ConfigError as e:
            problems.append(f"prompt {p.id}: {e}")
    return problems


# --- bench file -----------------------------------------------------------


def _constraint_to_json(c: Constraint) -> dict:
    if isinstance(c, ModeIs):
        return {"type": "mode_is", "k": c.k}
    if isinstance(c, InQuadrant):
        return {"type": "in_quadrant", "signs": list(c.signs)}
    return {"type": "composite", "parts": [_constraint_to_json(p) for p in c.parts]}


def _constraint_from_json(obj: dict) -> Constraint:
    kind = obj.get("type")
    if kind == "mode_is":
        return ModeIs(int(obj["k"]))
    if kind == "in_quadrant":
        return InQuadrant(tuple(int(s) for s in obj["signs"]))
    if kind == "composite":
        return Composite(tuple(_constraint_from_json(p) for p in obj["parts"]))
    raise ConfigError(f"unknown constraint type {kind!r}")


def dump_bench(bench: Bench) -> str:
    t = bench.target
    doc = {
        "format": BENCH_FORMAT,
        "version": BENCH_VERSION,
        "radius_mult": bench.radius_mult,
        "target": {
            "dims": t.dims,
            "components": [
                {"weight": float(w), "mean": [float(v) for v in mu], "std": float(s)}
                for w, mu, s in zip(t.weights, t.means, t.stds)
            ],
        },
        "prompts": [
            {"id": p.id, "attribute_tag": p.attribute_tag, "constraint": _constraint_to_json(p.constraint)}
            for p in bench.prompts
        ],
    }
    return json.dumps(doc, indent=2) + "\n"


def load_bench(text: str) -> Bench:
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as e:
        raise ConfigError(f"bench file is not valid JSON: {e}", line=e.lineno) from e
    if doc.get("format") != BENCH_FORMAT or doc.get("version") != BENCH_VERSION:
        raise ConfigError(f"unsupported bench format/version: {doc.get('format')!r} v{doc.get('version')!r}")
    try:
        comps = doc["target"]["components"]
        target = GmmTarget.from_components([(c["weight"], c["mean"], c["std"]) for c in comps])
        prompts = tuple(
            Prompt(str(p["id"]), _constraint_from_json(p["constraint"]), str(p["attribute_tag"]))
            for p in doc["prompts"]
        )
        radius_mult = float(doc.get("radius_mult", 3.0))
    except (KeyError, TypeError, ValueError) as e:
        if isinstance(e, ConfigError):
            raise
        raise ConfigError(f"malformed bench file: {e}") from e
    return Bench(target, prompts, radius_mult)


def constraint_label(c: Constraint) -> str:
    if isinstance(c, ModeIs):
        return f"mode={c.k}"
    if isinstance(c, InQuadrant):
        return "quad=" + "".join({1: "+", -1: "-", 0: "*"}[s] for s in c.signs)
    return "&".join(constraint_label(p) for p in c.parts)


def prompts_by_tag(prompts: Sequence[Prompt]) -> dict[str, list[Prompt]]:
    out: dict[str, list[Prompt]] = {tag: [] for tag in ATTRIBUTE_TAGS}
    for p in prompts:
        out.setdefault(p.attribute_tag, []).append(p)
    return out
