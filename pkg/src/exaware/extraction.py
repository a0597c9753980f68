"""First-layer signature extraction against a black-box ReLU network.

The attack walks random line segments through the input box, locates the
kinks of the piecewise-linear output along each segment (critical points,
where some first-layer neuron switches state), measures how the gradient
jumps across each kink, and clusters the normalized jump vectors. Every
distinct cluster is one recovered neuron row, up to scale.

Only ``Oracle.query`` is used; model parameters are never read here.
"""
from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy.cluster.hierarchy import fcluster, linkage

from .oracle import BudgetExhausted, Oracle, OracleStats, QueryBudget

logger = logging.getLogger(__name__)

_FLOAT_EPS = np.finfo(np.float64).eps


class RegionCrossing(RuntimeError):
    """A probe interval contains a second kink."""


class AllZero(RuntimeError):
    """Gradient jump indistinguishable from zero; the point carries no signature."""


@dataclass
class AttackConfig:
    epsilon: Optional[float] = None        # probe step; None -> 1e-6 * box diameter
    line_count_per_round: int = 8
    refine_tolerance: float = 1e-8
    cluster_tolerance: float = 1e-5
    search_box: tuple = (0.0, 1.0)         # (low, high), scalars or per-dimension
    seed: int = 0
    budget: QueryBudget = field(default_factory=lambda: QueryBudget(max_queries=10**6))
    slope_tolerance: float = 1e-6
    collinearity_tolerance: float = 1e-4
    signature_floor: float = 1e-7
    max_epsilon_halvings: int = 8
    side_offset_factor: float = 1000.0     # distance of the probe bases from the kink, in units of epsilon
    min_cluster_size: int = 2
    max_rounds: Optional[int] = None

    def __post_init__(self):
        if self.epsilon is not None and not self.epsilon > 0:
            raise ValueError("epsilon must be > 0")
        if not self.refine_tolerance > 0:
            raise ValueError("refine_tolerance must be > 0")
        if not self.cluster_tolerance > 0:
            raise ValueError("cluster_tolerance must be > 0")
        if self.line_count_per_round < 1:
            raise ValueError("line_count_per_round must be >= 1")
        if isinstance(self.budget, dict):
            self.budget = QueryBudget(**self.budget)

    def box(self, dim: int) -> tuple[np.ndarray, np.ndarray]:
        lo, hi = self.search_box
        lo = np.broadcast_to(np.asarray(lo, dtype=np.float64), (dim,)).copy()
        hi = np.broadcast_to(np.asarray(hi, dtype=np.float64), (dim,)).copy()
        if np.any(hi <= lo):
            raise ValueError("search box must have low < high in every dimension")
        return lo, hi

    def probe_epsilon(self, dim: int) -> float:
        if self.epsilon is not None:
            return self.epsilon
        lo, hi = self.box(dim)
        return 1e-6 * float(np.linalg.norm(hi - lo))

    def to_dict(self) -> dict:
        lo, hi = self.search_box
        return {
            "epsilon": self.epsilon,
            "line_count_per_round": self.line_count_per_round,
            "refine_tolerance": self.refine_tolerance,
            "cluster_tolerance": self.cluster_tolerance,
            "search_box": [np.asarray(lo).tolist(), np.asarray(hi).tolist()],
            "seed": self.seed,
            "budget": self.budget.to_dict(),
            "slope_tolerance": self.slope_tolerance,
            "collinearity_tolerance": self.collinearity_tolerance,
            "signature_floor": self.signature_floor,
            "max_epsilon_halvings": self.max_epsilon_halvings,
            "side_offset_factor": self.side_offset_factor,
            "min_cluster_size": self.min_cluster_size,
            "max_rounds": self.max_rounds,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "AttackConfig":
        d = dict(d)
        if "search_box" in d:
            d["search_box"] = tuple(d["search_box"])
        if isinstance(d.get("budget"), dict):
            d["budget"] = QueryBudget(**d["budget"])
        return cls(**d)


@dataclass
class CriticalPoint:
    x_star: np.ndarray
    line_id: int
    refinement_residual: float
    direction: np.ndarray      # unit direction of the line that crossed the kink
    window: float              # distance along the line known to be free of other kinks


@dataclass
class Signature:
    values: np.ndarray
    source: Optional[CriticalPoint]
    pivot_index: int


@dataclass
class SignatureCluster:
    centroid: np.ndarray
    members: list
    spread: float


class CriticalPointList(list):
    """List of critical points; ``partial`` is set when the budget ran out."""

    partial = False
    lines_scanned = 0


# ---------------------------------------------------------------------------
# critical points


def _line_kinks(oracle: Oracle, u: np.ndarray, v: np.ndarray, line_id: int,
                config: AttackConfig, box_diam: float) -> list[CriticalPoint]:
    d = v - u
    length = float(np.linalg.norm(d))
    if length == 0:
        return []
    unit = d / length

    def g(t):
        return oracle.query(u + t * d)

    eta = 1e-7
    g0, g1 = g(0.0), g(1.0)
    s_lo = (g(eta) - g0) / eta
    s_hi = (g1 - g(1.0 - eta)) / eta
    scale = 1.0 + max(abs(g0), abs(g1))
    vtol = config.refine_tolerance * scale
    stol = config.slope_tolerance * scale
    min_width = 1e-9 * box_diam / length

    found = []
    stack = [(0.0, g0, s_lo, 1.0, g1, s_hi)]
    while stack:
        lo, glo, slo, hi, ghi, shi = stack.pop()
        width = hi - lo
        if abs(slo - shi) <= stol and abs(ghi - (glo + slo * width)) <= vtol:
            continue
        if abs(slo - shi) > stol:
            # where the two end lines meet; a lone kink must sit there
            t = lo + (ghi - glo - shi * width) / (slo - shi)
            if lo < t < hi:
                gt = g(t)
                if abs(gt - (glo + slo * (t - lo))) <= vtol:
                    cp = _certify(g, t, gt, lo, hi, vtol, length, unit, u + t * d, line_id)
                    if cp is not None:
                        found.append(cp)
                        continue
        if width < min_width:
            continue
        mid = 0.5 * (lo + hi)
        h = min(eta, 1e-3 * width)
        gm = g(mid)
        s_ml = (gm - g(mid - h)) / h
        s_mr = (g(mid + h) - gm) / h
        # right half is pushed first so the left half is processed first
        stack.append((mid, gm, s_mr, hi, ghi, shi))
        stack.append((lo, glo, slo, mid, gm, s_ml))
    found.sort(key=lambda c: float(np.dot(c.x_star - u, unit)))
    return found


def _certify(g, t, gt, lo, hi, vtol, length, unit, x_guess, line_id) -> Optional[CriticalPoint]:
    h = min(1e-5, (t - lo) / 3.0, (hi - t) / 3.0)
    if h <= 0:
        return None
    gm2, gm1 = g(t - 2 * h), g(t - h)
    gp1, gp2 = g(t + h), g(t + 2 * h)
    sd_left = abs(gt - 2 * gm1 + gm2)
    sd_right = abs(gp2 - 2 * gp1 + gt)
    s_left = (gm1 - gm2) / h
    s_right = (gp2 - gp1) / h
    if max(sd_left, sd_right) >= vtol / 10 or abs(s_right - s_left) <= vtol:
        return None
    # sharpen the location with the two local lines
    t_ref = ((gp1 - s_right * (t + h)) - (gm1 - s_left * (t - h))) / (s_left - s_right)
    if not (t - h < t_ref < t + h):
        t_ref = t
    x = x_guess + (t_ref - t) * length * unit
    window = min(t_ref - lo, hi - t_ref) * length
    return CriticalPoint(x, line_id, max(sd_left, sd_right), unit.copy(), window)


def find_critical_points(oracle: Oracle, config: AttackConfig, max_points: Optional[int] = None,
                         n_lines: Optional[int] = None, rng: Optional[np.random.Generator] = None,
                         line_offset: int = 0) -> CriticalPointList:
    """Scan seeded random segments of the search box for first-layer kinks.

    Stops after ``max_points`` points or ``n_lines`` segments (default: one
    round's worth). On budget exhaustion the points found so far are returned
    with ``partial`` set.
    """
    rng = rng if rng is not None else np.random.default_rng(config.seed)
    lo, hi = config.box(oracle.input_dim)
    box_diam = float(np.linalg.norm(hi - lo))
    n_lines = config.line_count_per_round if n_lines is None else n_lines
    out = CriticalPointList()
    try:
        for k in range(n_lines):
            u = rng.uniform(lo, hi)
            v = rng.uniform(lo, hi)
            out.extend(_line_kinks(oracle, u, v, line_offset + k, config, box_diam))
            out.lines_scanned += 1
            if max_points is not None and len(out) >= max_points:
                del out[max_points:]
                break
    except BudgetExhausted:
        out.partial = True
    return out


# ---------------------------------------------------------------------------
# signatures


def _one_sided_slopes(oracle, base_plus, base_minus, f_plus, f_minus, i, epsilon, tol_rel):
    e = np.zeros(oracle.input_dim)
    e[i] = epsilon
    p1, p2 = oracle.query(base_plus + e), oracle.query(base_plus + 2 * e)
    m1, m2 = oracle.query(base_minus - e), oracle.query(base_minus - 2 * e)
    alpha_plus = (p1 - f_plus) / epsilon
    alpha_minus = (m1 - f_minus) / epsilon
    fmax = max(abs(f_plus), abs(p1), abs(p2), abs(f_minus), abs(m1), abs(m2))
    tol = max(tol_rel * epsilon * (abs(alpha_plus) + abs(alpha_minus)),
              64 * _FLOAT_EPS * (1.0 + fmax))
    if abs(p2 - 2 * p1 + f_plus) > tol or abs(m2 - 2 * m1 + f_minus) > tol:
        raise RegionCrossing(f"probe along coordinate {i} crosses another kink (epsilon={epsilon:g})")
    return alpha_plus, alpha_minus


def directional_derivative_pair(oracle: Oracle, x_star, i: int, epsilon: float,
                                direction=None, side_offset: Optional[float] = None,
                                collinearity_tolerance: float = 1e-4):
    """One-sided derivatives along coordinate ``i`` on both sides of a kink.

    ``alpha_plus`` is the slope along ``+e_i`` just beyond ``x_star + eps*side``;
    ``alpha_minus`` the slope along ``-e_i`` just beyond ``x_star - eps*side``.
    With the default ``side = e_i`` these are the forward differences
    ``[f(x+2eps e_i) - f(x+eps e_i)]/eps`` and ``[f(x-2eps e_i) - f(x-eps e_i)]/eps``,
    and ``alpha_plus + alpha_minus`` is the gradient jump of the neuron that
    switches at ``x_star``. A third probe per side checks that both probe
    pairs stay inside one linear region. ``side_offset`` (default ``epsilon``)
    moves the probe bases further from the kink along ``direction``.
    """
    x_star = np.asarray(x_star, dtype=np.float64)
    if direction is None:
        side = np.zeros_like(x_star)
        side[i] = 1.0
    else:
        side = np.asarray(direction, dtype=np.float64)
        side = side / np.linalg.norm(side)
    off = epsilon if side_offset is None else side_offset
    bp = x_star + off * side
    bm = x_star - off * side
    return _one_sided_slopes(oracle, bp, bm, oracle.query(bp), oracle.query(bm), i, epsilon,
                             collinearity_tolerance)


def _gradient_jump(oracle, x_star, side, epsilon, offset, config):
    bp = x_star + offset * side
    bm = x_star - offset * side
    fp, fm = oracle.query(bp), oracle.query(bm)
    s = np.empty(oracle.input_dim)
    for i in range(oracle.input_dim):
        ap, am = _one_sided_slopes(oracle, bp, bm, fp, fm, i, epsilon,
                                   config.collinearity_tolerance)
        s[i] = ap + am
    return s, max(abs(fp), abs(fm))


def recover_signature(oracle: Oracle, critical_point: CriticalPoint,
                      config: AttackConfig) -> Signature:
    """Normalized gradient jump across ``critical_point``.

    Both sides are fixed by the crossing direction of the line that found the
    point, so every coordinate's jump carries the same sign. The probe bases
    sit ``side_offset_factor * eps`` from the kink (capped by the kink-free
    window along the line) so coordinate probes cannot cross back over the
    target hyperplane. The result is divided by its largest-magnitude
    coordinate (the pivot).
    """
    eps = config.probe_epsilon(oracle.input_dim)
    offset = config.side_offset_factor * eps
    if critical_point.window > 0:
        offset = min(offset, critical_point.window / 2.0)
        eps = min(eps, offset)
    side = critical_point.direction
    last_error = None
    for _ in range(config.max_epsilon_halvings + 1):
        try:
            s, fscale = _gradient_jump(oracle, critical_point.x_star, side, eps, offset, config)
            break
        except RegionCrossing as exc:
            last_error = exc
            eps *= 0.5
            offset *= 0.5
    else:
        raise last_error
    pivot = int(np.argmax(np.abs(s)))
    if abs(s[pivot]) < config.signature_floor * (1.0 + fscale):
        raise AllZero("gradient jump below noise floor")
    return Signature(s / s[pivot], critical_point, pivot)


# ---------------------------------------------------------------------------
# clustering


def aligned_unit(values: np.ndarray) -> np.ndarray:
    """Unit-norm copy with the largest-magnitude coordinate made positive."""
    v = np.asarray(values, dtype=np.float64)
    v = v / np.linalg.norm(v)
    return v * np.sign(v[np.argmax(np.abs(v))])


def pivot_normalize(values: np.ndarray) -> np.ndarray:
    v = np.asarray(values, dtype=np.float64)
    return v / v[np.argmax(np.abs(v))]


def cluster_signatures(signatures: Sequence[Signature],
                       cluster_tolerance: float) -> list[SignatureCluster]:
    """Single-linkage grouping under max-norm distance on aligned unit vectors."""
    if not signatures:
        return []
    A = np.array([aligned_unit(s.values) for s in signatures])
    order = np.lexsort(A.T[::-1])
    A = A[order]
    sigs = [signatures[k] for k in order]
    if len(sigs) == 1:
        labels = np.array([1])
    else:
        Z = linkage(A, method="single", metric="chebyshev")
        labels = fcluster(Z, t=cluster_tolerance, criterion="distance")
    clusters = []
    seen = {}
    for k, lab in enumerate(labels):
        if lab not in seen:
            seen[lab] = []
            clusters.append(seen[lab])
        seen[lab].append(k)
    out = []
    for idx in clusters:
        mean = A[idx].mean(axis=0)
        spread = float(np.max(np.abs(A[idx] - mean)))
        out.append(SignatureCluster(pivot_normalize(mean), [sigs[k] for k in idx], spread))
    return out


class _Components:
    """Incremental single linkage: connected components of the graph joining
    aligned unit vectors whose max-norm distance is within the tolerance."""

    def __init__(self, dim: int, tol: float):
        self.tol = tol
        self.units = np.empty((0, dim))
        self.parent: list[int] = []

    def _find(self, k: int) -> int:
        while self.parent[k] != k:
            self.parent[k] = self.parent[self.parent[k]]
            k = self.parent[k]
        return k

    def add(self, values: np.ndarray) -> None:
        u = aligned_unit(values)
        k = len(self.parent)
        self.parent.append(k)
        if k:
            near = np.flatnonzero(np.max(np.abs(self.units - u), axis=1) <= self.tol)
            for j in near:
                self.parent[self._find(int(j))] = self._find(k)
        self.units = np.vstack([self.units, u])

    def sizes(self) -> list[int]:
        roots = [self._find(k) for k in range(len(self.parent))]
        return list(np.unique(roots, return_counts=True)[1]) if roots else []


# ---------------------------------------------------------------------------
# the attack


@dataclass
class AttackReport:
    clusters_found: int
    target_neuron_count: int
    signatures: list
    stats: OracleStats
    verdict: str                          # "success" | "failure"
    reason: Optional[str] = None          # failure reason
    rounds: int = 0
    critical_points: int = 0
    signatures_recovered: int = 0
    discarded_points: int = 0
    cluster_sizes: list = field(default_factory=list)
    signature_seconds: float = 0.0
    config: dict = field(default_factory=dict)
    match: Optional[dict] = None

    @property
    def success(self) -> bool:
        return self.verdict == "success"

    def to_dict(self) -> dict:
        return {
            "verdict": self.verdict,
            "reason": self.reason,
            "clusters_found": self.clusters_found,
            "target_neuron_count": self.target_neuron_count,
            "signatures": [np.asarray(s).tolist() for s in self.signatures],
            "queries_used": self.stats.queries_used,
            "elapsed_seconds": self.stats.elapsed_seconds,
            "signature_seconds": self.signature_seconds,
            "rounds": self.rounds,
            "critical_points": self.critical_points,
            "signatures_recovered": self.signatures_recovered,
            "discarded_points": self.discarded_points,
            "cluster_sizes": list(self.cluster_sizes),
            "config": self.config,
            "match": self.match,
        }


def run_layer1_attack(oracle: Oracle, target_neuron_count: int,
                      config: AttackConfig) -> AttackReport:
    """Collect signatures round by round until the cluster count reaches the neuron count.

    Only clusters with at least ``min_cluster_size`` members count as neurons.
    The verdict is checked at round boundaries, so a larger budget replays the
    same rounds and can only reach success later, never lose it.
    """
    if not oracle.budget.bounded and config.budget.bounded:
        oracle.budget = config.budget
    if not oracle.budget.bounded and config.max_rounds is None:
        raise ValueError("attack needs a bounded query/time budget or max_rounds")
    rng = np.random.default_rng(config.seed)
    t_start = time.perf_counter()
    signatures: list[Signature] = []
    components = _Components(oracle.input_dim, config.cluster_tolerance)
    n_counted = 0
    n_points = n_discarded = 0
    rounds = 0
    exhausted = False
    success = False

    while not exhausted:
        if config.max_rounds is not None and rounds >= config.max_rounds:
            break
        pts = find_critical_points(oracle, config, rng=rng,
                                   line_offset=rounds * config.line_count_per_round)
        exhausted = pts.partial
        n_points += len(pts)
        try:
            for cp in pts:
                try:
                    sig = recover_signature(oracle, cp, config)
                    signatures.append(sig)
                    components.add(sig.values)
                except (RegionCrossing, AllZero):
                    n_discarded += 1
        except BudgetExhausted:
            exhausted = True
        n_counted = sum(1 for n in components.sizes() if n >= config.min_cluster_size)
        if not exhausted:
            rounds += 1
            if n_counted == target_neuron_count:
                success = True
                break
        logger.debug("round %d: %d signatures, %d clusters", rounds, len(signatures), n_counted)

    clusters = cluster_signatures(signatures, config.cluster_tolerance)
    counted = [c for c in clusters if len(c.members) >= config.min_cluster_size]

    stats = oracle.stats
    if success:
        verdict, reason = "success", None
    elif rounds == 0 and not signatures:
        verdict, reason = "failure", "budget"
    elif len(counted) < target_neuron_count:
        verdict, reason = "failure", "cluster_deficit"
    else:
        verdict, reason = "failure", "cluster_excess"
    return AttackReport(
        clusters_found=len(counted),
        target_neuron_count=target_neuron_count,
        signatures=[c.centroid for c in counted],
        stats=stats,
        verdict=verdict,
        reason=reason,
        rounds=rounds,
        critical_points=n_points,
        signatures_recovered=len(signatures),
        discarded_points=n_discarded,
        cluster_sizes=[len(c.members) for c in counted],
        signature_seconds=time.perf_counter() - t_start,
        config=config.to_dict(),
    )


def evaluate_against_ground_truth(report: AttackReport, model, tol: float = 1e-4) -> dict:
    """Greedy bijective matching of recovered centroids to true first-layer rows.

    The error of a (centroid, row) pair is the max-norm difference after both
    are divided by the coordinate that is the centroid's pivot. All-zero rows
    are excluded (they never switch and carry no signature).
    """
    W = np.asarray(model.weights[0], dtype=np.float64)
    rows = [k for k in range(W.shape[0]) if np.any(W[k] != 0)]
    cents = [np.asarray(c, dtype=np.float64) for c in report.signatures]
    E = np.full((len(cents), len(rows)), np.inf)
    for a, c in enumerate(cents):
        p = int(np.argmax(np.abs(c)))
        cn = c / c[p]
        for b, r in enumerate(rows):
            if W[r, p] != 0:
                E[a, b] = float(np.max(np.abs(cn - W[r] / W[r, p])))
    pairs = []
    work = E.copy()
    for _ in range(min(len(cents), len(rows))):
        a, b = np.unravel_index(np.argmin(work), work.shape)
        pairs.append((int(a), rows[b], float(E[a, b])))
        work[a, :] = np.inf
        work[:, b] = np.inf
    bijection = len(cents) == len(rows)
    errors = [e for _, _, e in pairs]
    max_err = max(errors) if errors else float("inf")
    metrics = {
        "bijection": bijection,
        "pairs": [{"centroid": a, "neuron": b, "error": e} for a, b, e in pairs],
        "max_error": max_err,
        "faithful": bool(bijection and max_err < tol),
        "tolerance": tol,
    }
    report.match = metrics
    return metrics
