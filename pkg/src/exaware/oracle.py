"""Black-box query access to a model with query/time accounting."""
from __future__ import annotations

import math
import threading
import time
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np


class BudgetExhausted(RuntimeError):
    def __init__(self, reason: str, stats: "OracleStats"):
        super().__init__(f"query budget exhausted ({reason}) after {stats.queries_used} queries")
        self.reason = reason
        self.stats = stats


@dataclass(frozen=True)
class QueryBudget:
    max_queries: Optional[int] = None
    max_wall_seconds: Optional[float] = None

    def __post_init__(self):
        if self.max_queries is not None and self.max_queries < 0:
            raise ValueError("max_queries must be >= 0")
        if self.max_wall_seconds is not None and not self.max_wall_seconds > 0:
            raise ValueError("max_wall_seconds must be > 0")

    @property
    def bounded(self) -> bool:
        return self.max_queries is not None or self.max_wall_seconds is not None

    def to_dict(self) -> dict:
        return {"max_queries": self.max_queries, "max_wall_seconds": self.max_wall_seconds}


@dataclass(frozen=True)
class OracleStats:
    queries_used: int
    elapsed_seconds: float

    def to_dict(self) -> dict:
        return {"queries_used": self.queries_used, "elapsed_seconds": self.elapsed_seconds}


class Oracle:
    """Scalar-logit black box. The attack code only ever sees this object.

    ``fn`` maps one input vector to the model output; ``output_index`` picks
    the coordinate that is exposed for multi-output models.
    """

    def __init__(self, fn: Callable[[np.ndarray], object], input_dim: int,
                 budget: Optional[QueryBudget] = None, output_index: int = 0):
        self._fn = fn
        self.input_dim = int(input_dim)
        self.budget = budget or QueryBudget()
        self.output_index = output_index
        self._lock = threading.Lock()
        self._queries = 0
        self._t0 = time.perf_counter()

    @classmethod
    def from_model(cls, model, budget: Optional[QueryBudget] = None,
                   output_index: int = 0) -> "Oracle":
        from .mlp import forward

        return cls(lambda x: forward(model, x), model.input_dim, budget, output_index)

    def _reserve(self) -> None:
        with self._lock:
            b = self.budget
            if b.max_queries is not None and self._queries >= b.max_queries:
                raise BudgetExhausted("queries", self._stats_unlocked())
            if b.max_wall_seconds is not None and time.perf_counter() - self._t0 >= b.max_wall_seconds:
                raise BudgetExhausted("wall_seconds", self._stats_unlocked())
            self._queries += 1

    def query(self, x) -> float:
        x = np.asarray(x, dtype=np.float64)
        if x.shape != (self.input_dim,):
            raise ValueError(f"query has shape {x.shape}, oracle expects ({self.input_dim},)")
        if not np.all(np.isfinite(x)):
            raise ValueError("query contains non-finite values")
        self._reserve()
        out = np.atleast_1d(np.asarray(self._fn(x), dtype=np.float64)).reshape(-1)
        return float(out[self.output_index])

    __call__ = query

    def _stats_unlocked(self) -> OracleStats:
        return OracleStats(self._queries, time.perf_counter() - self._t0)

    @property
    def stats(self) -> OracleStats:
        with self._lock:
            return self._stats_unlocked()

    @property
    def queries_used(self) -> int:
        return self._queries

    def exhausted(self) -> bool:
        b = self.budget
        if b.max_queries is not None and self._queries >= b.max_queries:
            return True
        return b.max_wall_seconds is not None and time.perf_counter() - self._t0 >= b.max_wall_seconds

    def remaining_queries(self) -> float:
        if self.budget.max_queries is None:
            return math.inf
        return self.budget.max_queries - self._queries
