"""Similarity regularizer that pulls neurons of a layer towards each other.

The loss for a layer is the sum, over selected neuron pairs ``(i, j)``, of
``||W[i] - W[j]||^2`` (plus the squared bias gap when ``include_biases``).
Training minimizes ``mse + lambda_similarity * total_similarity_loss``.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from itertools import combinations
from typing import Optional, Sequence, Union

import numpy as np

PAIR_MODES = ("all-pairs", "chain")


class ScopeError(ValueError):
    pass


@dataclass
class DefenseConfig:
    lambda_similarity: float = 0.0
    layer_scope: Union[str, Sequence[int]] = "first-layer"
    pair_mode: str = "all-pairs"
    pair_fraction: float = 1.0
    pair_seed: int = 0
    include_biases: bool = False

    def __post_init__(self):
        if not self.lambda_similarity >= 0:
            raise ValueError("lambda_similarity must be >= 0")
        if not 0 < self.pair_fraction <= 1:
            raise ValueError("pair_fraction must lie in (0, 1]")
        if self.pair_mode not in PAIR_MODES:
            raise ValueError(f"pair_mode must be one of {PAIR_MODES}")
        if isinstance(self.layer_scope, str):
            if self.layer_scope not in ("first-layer", "all-layers"):
                raise ValueError(f"unknown layer scope {self.layer_scope!r}")
        else:
            self.layer_scope = [int(k) for k in self.layer_scope]

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "DefenseConfig":
        return cls(**d)


@dataclass(frozen=True)
class PairSelection:
    layer_index: int
    pairs: tuple[tuple[int, int], ...]

    def __len__(self):
        return len(self.pairs)

    def validate(self, width: int) -> None:
        seen = set()
        for i, j in self.pairs:
            if not 0 <= i < j < width:
                raise ValueError(f"pair {(i, j)} invalid for layer width {width}")
            if (i, j) in seen:
                raise ValueError(f"duplicate pair {(i, j)}")
            seen.add((i, j))

    def incidence(self, width: int) -> np.ndarray:
        """Matrix M with one +1/-1 row per pair, so ``M @ W`` stacks the row differences."""
        M = np.zeros((len(self.pairs), width))
        if self.pairs:
            I, J = self.index_arrays()
            r = np.arange(len(self.pairs))
            M[r, I] = 1.0
            M[r, J] = -1.0
        return M

    def index_arrays(self) -> tuple[np.ndarray, np.ndarray]:
        if not self.pairs:
            return np.zeros(0, np.int64), np.zeros(0, np.int64)
        p = np.asarray(self.pairs, dtype=np.int64)
        return p[:, 0], p[:, 1]


def _n_selected(total: int, fraction: float) -> int:
    # guard against 0.5 * 28 = 14.000000000000002 rounding up
    return min(total, math.ceil(fraction * total - 1e-9))


def select_defended_pairs(layer_width: int, pair_mode: str = "all-pairs",
                          pair_fraction: float = 1.0, pair_seed: int = 0,
                          layer_index: int = 0) -> PairSelection:
    """Neuron pairs whose similarity is enforced, sampled deterministically per seed."""
    if pair_mode == "all-pairs":
        candidates = list(combinations(range(layer_width), 2))
    elif pair_mode == "chain":
        candidates = [(i, i + 1) for i in range(layer_width - 1)]
    else:
        raise ValueError(f"pair_mode must be one of {PAIR_MODES}")
    if not 0 < pair_fraction <= 1:
        raise ValueError("pair_fraction must lie in (0, 1]")
    if not candidates:
        return PairSelection(layer_index, ())
    k = _n_selected(len(candidates), pair_fraction)
    if k < len(candidates):
        rng = np.random.default_rng(pair_seed)
        chosen = np.sort(rng.choice(len(candidates), size=k, replace=False))
        candidates = [candidates[c] for c in chosen]
    return PairSelection(layer_index, tuple(candidates))


def layer_similarity_loss(weights: np.ndarray, pairs: PairSelection,
                          include_biases: bool = False,
                          biases: Optional[np.ndarray] = None):
    """Sum of squared parameter differences over the selected pairs.

    Returns ``(loss, grad_weights, grad_biases)``; ``grad_biases`` is None
    unless biases are included.
    """
    W = np.asarray(weights, dtype=np.float64)
    if W.ndim != 2:
        raise ValueError("weights must be a matrix")
    pairs.validate(W.shape[0])
    return _incidence_loss(W, pairs.incidence(W.shape[0]), include_biases, biases)


def _incidence_loss(W, M, include_biases, biases):
    D = M @ W
    loss = float(np.sum(D * D))
    gW = 2.0 * (M.T @ D)
    gb = None
    if include_biases:
        if biases is None:
            raise ValueError("include_biases requires the bias vector")
        b = np.asarray(biases, dtype=np.float64)
        if b.shape != (W.shape[0],):
            raise ValueError(f"bias shape {b.shape} does not match {W.shape[0]} neurons")
        db = M @ b
        loss += float(np.sum(db * db))
        gb = 2.0 * (M.T @ db)
    return loss, gW, gb


def scoped_layers(n_hidden: int, config: DefenseConfig) -> list[int]:
    scope = config.layer_scope
    if scope == "first-layer":
        layers = [0]
    elif scope == "all-layers":
        layers = list(range(n_hidden))
    else:
        layers = sorted(set(scope))
    for k in layers:
        if not 0 <= k < n_hidden:
            raise ScopeError(f"layer {k} is not a hidden layer (model has {n_hidden})")
    return layers


def pair_selections(model, config: DefenseConfig) -> dict[int, PairSelection]:
    n_hidden = len(model.architecture.hidden_sizes)
    return {
        k: select_defended_pairs(model.weights[k].shape[0], config.pair_mode,
                                 config.pair_fraction, config.pair_seed + k, k)
        for k in scoped_layers(n_hidden, config)
    }


def total_similarity_loss(model, config: DefenseConfig,
                          selections: Optional[dict[int, PairSelection]] = None):
    """Sum of per-layer similarity losses over the configured hidden layers.

    Returns ``(loss, {layer: grad_w}, {layer: grad_b})``.
    """
    if selections is None:
        selections = pair_selections(model, config)
    total = 0.0
    gw, gb = {}, {}
    for k, sel in selections.items():
        loss, g, b = layer_similarity_loss(model.weights[k], sel, config.include_biases,
                                           model.biases[k])
        total += loss
        gw[k] = g
        if b is not None:
            gb[k] = b
    return total, gw, gb


def similarity_penalty(model, config: DefenseConfig):
    """Penalty callable for training; pair selections are fixed up front."""
    incidences = {k: sel.incidence(model.weights[k].shape[0])
                  for k, sel in pair_selections(model, config).items()}

    def penalty(m):
        total = 0.0
        gw, gb = {}, {}
        for k, M in incidences.items():
            loss, g, b = _incidence_loss(m.weights[k], M, config.include_biases, m.biases[k])
            total += loss
            gw[k] = g
            if b is not None:
                gb[k] = b
        return total, gw, gb

    return penalty


def mean_pairwise_sq_distance(weights: np.ndarray) -> float:
    W = np.asarray(weights, dtype=np.float64)
    n = W.shape[0]
    if n < 2:
        return 0.0
    I, J = np.triu_indices(n, 1)
    D = W[I] - W[J]
    return float(np.mean(np.sum(D * D, axis=1)))


def normalized_rows(weights: np.ndarray) -> np.ndarray:
    """Rows scaled to unit norm, sign fixed so the largest-magnitude entry is positive."""
    W = np.asarray(weights, dtype=np.float64)
    norms = np.linalg.norm(W, axis=1, keepdims=True)
    norms[norms == 0] = 1.0
    U = W / norms
    piv = np.argmax(np.abs(U), axis=1)
    return U * np.sign(U[np.arange(len(U)), piv])[:, None]


def max_pairwise_normalized_distance(weights: np.ndarray) -> float:
    """Largest max-norm distance between scale- and sign-normalized rows."""
    U = normalized_rows(weights)
    if len(U) < 2:
        return 0.0
    I, J = np.triu_indices(len(U), 1)
    return float(np.max(np.abs(U[I] - U[J])))
