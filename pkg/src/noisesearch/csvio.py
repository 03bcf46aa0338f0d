"""CSV outputs: runs.csv, summary.csv and curves.csv.

Reals use six significant digits via ``format(x, ".6g")``, which does not
depend on the locale; rows end in ``\\n``.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass

from .errors import ConfigError
from .harness import CostModel, ExperimentResult
from .verifier import ATTRIBUTE_TAGS

RUNS_HEADER = ("strategy", "verifier", "budget", "prompt_id", "attribute_tag", "seed", "used_nfe",
               "verifier_calls", "per_step_nfe", "final_reward", "success", "cost", "cpu_nanos")
SUMMARY_HEADER = ("strategy", "verifier", "budget", "n_runs", "success_rate", "ci_low", "ci_high",
                  "success_single_object", "success_position", "success_attribute_binding", "mean_reward",
                  "mean_used_nfe", "mean_verifier_calls", "mean_cost", "mean_cpu_nanos")
CURVES_HEADER = ("strategy", "verifier", "budget", "step", "mean_nfe", "mean_reward")


class SchemaError(ConfigError):
    def __init__(self, message: str, column: str | None = None):
        self.column = column
        super().__init__(message)


def fmt_real(x: float) -> str:
    if isinstance(x, float) and math.isnan(x):
        return "nan"
    return format(float(x), ".6g")


def _write(header, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    return buf.getvalue()


def runs_csv(result: ExperimentResult, measure_time: bool = True) -> str:
    cost: CostModel = result.cost
    rows = []
    for r in result.records:
        rows.append((
            r.strategy, r.verifier, r.budget, r.prompt_id, r.attribute_tag, r.seed, r.used_nfe,
            r.verifier_calls, ";".join(str(x) for x in r.per_step_nfe), fmt_real(r.final_reward),
            int(r.success), fmt_real(cost.cost(r.verifier, r.used_nfe, r.verifier_calls)),
            r.cpu_nanos if measure_time else 0,
        ))
    return _write(RUNS_HEADER, rows)


def summary_csv(result: ExperimentResult, measure_time: bool = True) -> str:
    rows = []
    for s in result.summary.values():
        tags = dict(s.success_by_tag)
        rows.append((
            s.strategy, s.verifier, s.budget, s.n_runs, fmt_real(s.success_rate), fmt_real(s.ci_low),
            fmt_real(s.ci_high), *(fmt_real(tags[t]) for t in ATTRIBUTE_TAGS), fmt_real(s.mean_reward),
            fmt_real(s.mean_used_nfe), fmt_real(s.mean_verifier_calls), fmt_real(s.mean_cost),
            fmt_real(s.mean_cpu_nanos if measure_time else 0.0),
        ))
    return _write(SUMMARY_HEADER, rows)


def curves_csv(result: ExperimentResult) -> str:
    rows = []
    for key, hist in result.nfe_histograms.items():
        curve = result.score_curves[key]
        for step, (n, r) in enumerate(zip(hist, curve)):
            rows.append((*key, step, fmt_real(n), fmt_real(r)))
    return _write(CURVES_HEADER, rows)


def read_table(text: str, header: tuple[str, ...]) -> list[dict[str, str]]:
    """Parse a CSV whose header must equal ``header`` exactly."""
    reader = csv.reader(io.StringIO(text))
    try:
        got = next(reader)
    except StopIteration:
        raise SchemaError("no rows (file is empty)")
    for i, col in enumerate(header):
        if i >= len(got) or got[i] != col:
            raise SchemaError(f"expected column {col!r} at position {i}", column=col)
    if len(got) > len(header):
        raise SchemaError(f"unexpected column {got[len(header)]!r}", column=got[len(header)])
    rows = []
    for lineno, row in enumerate(reader, start=2):
        if not row:
            continue
        if len(row) != len(header):
            raise SchemaError(f"line {lineno}: {len(row)} fields, expected {len(header)}")
        rows.append(dict(zip(header, row)))
    if not rows:
        raise SchemaError("no rows")
    return rows


@dataclass(frozen=True)
class RunRow:
    strategy: str
    verifier: str
    budget: int
    prompt_id: str
    attribute_tag: str
    seed: int
    used_nfe: int
    verifier_calls: int
    per_step_nfe: tuple[int, ...]
    final_reward: float
    success: bool
    cost: float
    cpu_nanos: int


def read_runs(text: str) -> list[RunRow]:
    out = []
    for row in read_table(text, RUNS_HEADER):
        col = None
        try:
            col = "budget"
            budget = int(row["budget"])
            col = "seed"
            seed = int(row["seed"])
            col = "used_nfe"
            used = int(row["used_nfe"])
            col = "verifier_calls"
            calls = int(row["verifier_calls"])
            col = "per_step_nfe"
            per_step = tuple(int(x) for x in row["per_step_nfe"].split(";"))
            col = "final_reward"
            reward = float(row["final_reward"])
            col = "success"
            if row["success"] not in ("0", "1"):
                raise ValueError(row["success"])
            col = "cost"
            cost = float(row["cost"])
            col = "cpu_nanos"
            nanos = int(row["cpu_nanos"])
        except ValueError as e:
            raise SchemaError(f"column {col!r}: bad value ({e})", column=col) from e
        out.append(RunRow(row["strategy"], row["verifier"], budget, row["prompt_id"], row["attribute_tag"],
                          seed, used, calls, per_step, reward, row["success"] == "1", cost, nanos))
    return out
