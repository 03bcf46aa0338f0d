"""Test-time compute allocation for noise search on an analytic flow-matching generator."""

__version__ = "0.1.0"

from .errors import ConfigError, DomainError, LedgerError, StateError  # noqa: E402
from .flow import FlowState, GmmTarget, Interpolant, SdeChurn, TimeGrid  # noqa: E402
from .search import (  # noqa: E402
    BestOfN,
    BudgetLedger,
    GenContext,
    Manual,
    Rbf,
    Regular,
    RunRecord,
    SearchOverPaths,
    Svdd,
    VerifierThreshold,
    dispatch,
    run_streams,
    vt_threshold,
)
from .verifier import Bench, BenchConfig, Prompt, Verifier, VerifierSpec, gen_bench  # noqa: E402

__all__ = [
    "ConfigError", "DomainError", "LedgerError", "StateError",
    "FlowState", "GmmTarget", "Interpolant", "SdeChurn", "TimeGrid",
    "BestOfN", "BudgetLedger", "GenContext", "Manual", "Rbf", "Regular", "RunRecord",
    "SearchOverPaths", "Svdd", "VerifierThreshold", "dispatch", "run_streams", "vt_threshold",
    "Bench", "BenchConfig", "Prompt", "Verifier", "VerifierSpec", "gen_bench",
]
