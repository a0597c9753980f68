"""Analytic attack-success probability for pairs of first-layer neurons.

Two neurons with weight rows ``a`` and ``b`` (biases dropped) define hyperplanes
through the origin. With the last coordinate as pivot, the hyperplanes are
``x_N = -sum(a_i/a_N x_i)`` and the same for ``b``; their vertical gap is
``sum(K_i x_i)`` with ``K_i = -a_i/a_N + b_i/b_N``. Integrating ``|K_i x_i|``
over the box and dividing by its measure bounds the fraction of inputs lying
between the two hyperplanes. Those inputs separate the neurons, which is what
lets the attack tell them apart.
"""
from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field
from itertools import combinations
from typing import Optional

import numpy as np

PIVOT_EPS = 1e-12
# K_i below this many units of roundoff (relative to its two ratio terms) is
# cancellation noise; flushing it makes parallel rows give exactly zero
K_ROUNDOFF_ULPS = 8.0


class PivotSingular(ValueError):
    pass


class ZeroVector(ValueError):
    pass


class LayerTooNarrow(ValueError):
    pass


@dataclass(frozen=True)
class InputRange:
    low: float
    high: float
    dimension: Optional[int] = None

    def __post_init__(self):
        if not self.low < self.high:
            raise ValueError(f"low ({self.low}) must be below high ({self.high})")
        if self.dimension is not None and self.dimension < 1:
            raise ValueError("dimension must be >= 1")

    @property
    def straddles_zero(self) -> bool:
        return self.low <= 0 <= self.high

    def closed_form_factor(self) -> float:
        """(x12^2 + x11^2) / (x12 - x11)^2, valid only when the range contains 0."""
        if not self.straddles_zero:
            raise ValueError(
                f"closed form needs low <= 0 <= high, got [{self.low}, {self.high}]; "
                "use general_factor for one-sided ranges"
            )
        return (self.high ** 2 + self.low ** 2) / (self.high - self.low) ** 2

    def general_factor(self) -> float:
        """2 * integral of |x| over [low, high] divided by (high - low)^2.

        Equals closed_form_factor whenever the range contains 0.
        """
        lo, hi = self.low, self.high

        def prim(x):  # antiderivative of |x|
            return 0.5 * x * abs(x)

        return 2.0 * (prim(hi) - prim(lo)) / (hi - lo) ** 2

    def to_dict(self) -> dict:
        return {"low": self.low, "high": self.high, "dimension": self.dimension}


@dataclass
class PairProbability:
    k_coeffs: np.ndarray
    theta: float
    p_between: float
    success_probability: float
    direction_case: str
    pair: tuple[int, int] = (0, 1)
    method: str = "analytic"
    ordering: str = "a,b"
    standard_error: Optional[float] = None

    def to_dict(self) -> dict:
        return {
            "pair": list(self.pair),
            "method": self.method,
            "ordering": self.ordering,
            "theta": self.theta,
            "p_between": self.p_between,
            "success_probability": self.success_probability,
            "direction_case": self.direction_case,
            "sum_abs_k": float(np.sum(np.abs(self.k_coeffs))) if self.k_coeffs is not None else None,
            "standard_error": self.standard_error,
        }


def _vec(v, name) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64).reshape(-1)
    if v.size < 2:
        raise ValueError(f"{name} must have at least 2 coordinates")
    return v


def k_coefficients(a, b) -> np.ndarray:
    a, b = _vec(a, "a"), _vec(b, "b")
    if a.shape != b.shape:
        raise ValueError("a and b differ in dimension")
    if abs(a[-1]) < PIVOT_EPS or abs(b[-1]) < PIVOT_EPS:
        raise PivotSingular(f"pivot coordinate too small (a_N={a[-1]:.3g}, b_N={b[-1]:.3g})")
    ra, rb = a[:-1] / a[-1], b[:-1] / b[-1]
    k = rb - ra
    fi = np.finfo(np.float64)
    # relative roundoff of the ratios, plus the absolute spacing of subnormals
    noise = K_ROUNDOFF_ULPS * (fi.eps * (np.abs(ra) + np.abs(rb))
                               + fi.smallest_subnormal * (1 / abs(a[-1]) + 1 / abs(b[-1])))
    k[np.abs(k) <= noise] = 0.0
    return k


def normal_angle(a, b) -> float:
    """Angle between the normal vectors, in [0, pi].

    Uses the half-angle form 2*atan2(|u - v|, |u + v|) on unit vectors, which
    equals arccos(u.v) but stays exact for parallel and antiparallel inputs
    where the cosine rounds to just inside [-1, 1].
    """
    a = np.asarray(a, dtype=np.float64).reshape(-1)
    b = np.asarray(b, dtype=np.float64).reshape(-1)
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        raise ZeroVector("angle undefined for a zero vector")
    u, v = a / na, b / nb
    return 2.0 * math.atan2(float(np.linalg.norm(u - v)), float(np.linalg.norm(u + v)))


def _ordered(a, b, rng: InputRange, general: bool, ordering: str) -> PairProbability:
    k = k_coefficients(a, b)
    factor = rng.general_factor() if general else rng.closed_form_factor()
    p = min(1.0, float(np.sum(np.abs(k))) / 2.0 * factor)
    theta = normal_angle(a, b)
    same = theta <= math.pi / 2
    return PairProbability(k, theta, p, p if same else 1.0 - p,
                           "Same" if same else "Opposite", ordering=ordering)


def pair_attack_probability(a, b, input_range: InputRange, general: bool = False) -> PairProbability:
    """Success probability of separating the two neurons.

    Both orderings (a, b) and (b, a) are evaluated and the larger is kept.
    ``general=True`` swaps the closed-form box factor for the exact |x|
    integral, which also accepts ranges that do not contain 0.
    """
    first = _ordered(a, b, input_range, general, "a,b")
    second = _ordered(b, a, input_range, general, "b,a")
    return second if second.success_probability > first.success_probability else first


def monte_carlo_disagreement(a, b, bias_a: float = 0.0, bias_b: float = 0.0,
                             input_range: InputRange = InputRange(-1.0, 1.0),
                             n_samples: int = 1_000_000, seed: int = 0,
                             chunk: int = 200_000) -> tuple[float, float]:
    """Fraction of uniform box samples on which exactly one neuron is active.

    Returns ``(estimate, binomial standard error)``.
    """
    if n_samples < 1:
        raise ValueError("n_samples must be >= 1")
    a = np.asarray(a, dtype=np.float64).reshape(-1)
    b = np.asarray(b, dtype=np.float64).reshape(-1)
    if a.shape != b.shape:
        raise ValueError("a and b differ in dimension")
    rng = np.random.default_rng(seed)
    hits = 0
    done = 0
    while done < n_samples:
        m = min(chunk, n_samples - done)
        x = rng.uniform(input_range.low, input_range.high, size=(m, a.size))
        hits += int(np.count_nonzero((x @ a + bias_a >= 0) != (x @ b + bias_b >= 0)))
        done += m
    p = hits / n_samples
    return p, math.sqrt(p * (1 - p) / n_samples)


@dataclass
class ModelProbabilityReport:
    layer_index: int
    input_range: InputRange
    pairs: list[PairProbability] = field(default_factory=list)

    @property
    def worst_case(self) -> PairProbability:
        return max(self.pairs, key=lambda p: p.success_probability)

    @property
    def worst_case_probability(self) -> float:
        return self.worst_case.success_probability

    def to_dict(self) -> dict:
        w = self.worst_case
        return {
            "layer_index": self.layer_index,
            "input_range": self.input_range.to_dict(),
            "worst_case": {"probability": w.success_probability, "pair": list(w.pair)},
            "orderings": "each pair reports the larger of its two orderings",
            "pairs": [p.to_dict() for p in self.pairs],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf)
        w.writerow(["i", "j", "method", "ordering", "theta", "p_between",
                    "success_probability", "direction_case", "standard_error"])
        for p in self.pairs:
            w.writerow([p.pair[0], p.pair[1], p.method, p.ordering, repr(p.theta),
                        repr(p.p_between), repr(p.success_probability), p.direction_case,
                        "" if p.standard_error is None else repr(p.standard_error)])
        return buf.getvalue()


def model_attack_probability(model, layer_index: int = 0,
                             input_range: InputRange = InputRange(0.0, 1.0),
                             general: bool = False, mc_samples: int = 200_000,
                             mc_seed: int = 0) -> ModelProbabilityReport:
    """Pair table for one hidden layer; the worst case is the most separable pair.

    Pairs with a singular pivot fall back to a Monte Carlo disagreement
    estimate (biases included) with a per-pair seed.
    """
    if not 0 <= layer_index < len(model.weights) - 1:
        raise ValueError(f"layer {layer_index} is not a hidden layer")
    W = model.weights[layer_index]
    bias = model.biases[layer_index]
    if W.shape[0] < 2:
        raise LayerTooNarrow(f"layer {layer_index} has {W.shape[0]} neuron(s); need at least 2")
    report = ModelProbabilityReport(layer_index, input_range)
    for n, (i, j) in enumerate(combinations(range(W.shape[0]), 2)):
        try:
            pp = pair_attack_probability(W[i], W[j], input_range, general)
        except PivotSingular:
            p, se = monte_carlo_disagreement(W[i], W[j], bias[i], bias[j], input_range,
                                             mc_samples, seed=[mc_seed, i, j])
            try:
                theta = normal_angle(W[i], W[j])
            except ZeroVector:
                theta = float("nan")
            pp = PairProbability(None, theta, p, p, "Same" if theta <= math.pi / 2 else "Opposite",
                                 method="monte_carlo", ordering="n/a", standard_error=se)
        pp.pair = (i, j)
        report.pairs.append(pp)
    return report
