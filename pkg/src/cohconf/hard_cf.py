"""Discrete coherent-factuality filtering with split-conformal calibration.

This is the deployment algorithm: trained scorers are plugged in here at
test time, and the differentiable pipeline in :mod:`cohconf.soft` is
checked against it.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .adg import AdgProblem, is_coherently_factual, is_factual
from .errors import EmptyRisks, EmptyScores, InvalidConfig, MissingFrequency, NonFiniteValue, SchemaMismatch


class Sentinel(enum.Enum):
    """Infinite thresholds, kept out of float arithmetic on purpose."""

    NEG_INF = "-inf"
    POS_INF = "+inf"

    def __str__(self) -> str:
        return self.value


Threshold = "float | Sentinel"


@dataclass
class ScorerParams:
    """Linear claim scorer; risk is ``C - pi(x)``.

    ``link="linear"`` uses ``pi(x) = w.x + b``; ``link="logistic"`` squashes
    that through a sigmoid.
    """

    weights: np.ndarray
    bias: float = 0.0
    risk_offset_C: float = 0.0
    feature_names: tuple[str, ...] = ()
    link: str = "linear"

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=float).ravel()
        self.bias = float(self.bias)
        self.risk_offset_C = float(self.risk_offset_C)
        self.feature_names = tuple(self.feature_names)
        if self.link not in ("linear", "logistic"):
            raise InvalidConfig(f"unknown scorer link {self.link!r}")
        if self.feature_names and len(self.feature_names) != self.weights.size:
            raise SchemaMismatch("feature_names and weights differ in length")
        if not (np.all(np.isfinite(self.weights)) and math.isfinite(self.bias)
                and math.isfinite(self.risk_offset_C)):
            raise InvalidConfig("scorer parameters must be finite")

    @classmethod
    def zeros(cls, n_features: int, C: float = 0.0, feature_names: Sequence[str] = (), link: str = "linear"):
        return cls(np.zeros(n_features), 0.0, C, tuple(feature_names), link)


@dataclass(frozen=True)
class TauGrid:
    values: np.ndarray
    margin_m: float

    def __len__(self) -> int:
        return len(self.values)

    @property
    def tau_min(self) -> float:
        return float(self.values[0])

    @property
    def tau_max(self) -> float:
        return float(self.values[-1])


@dataclass(frozen=True)
class CalibratedThreshold:
    tau_hat: float | Sentinel
    alpha: float
    n_cal: int
    orientation: str = "lower"

    def __post_init__(self):
        if not 0.0 < self.alpha < 1.0:
            raise InvalidConfig(f"alpha must lie in (0, 1), got {self.alpha}")

    @property
    def is_finite(self) -> bool:
        return not isinstance(self.tau_hat, Sentinel)


def risk_scores(scorer: ScorerParams, problem: AdgProblem) -> np.ndarray:
    """``r_v = C - pi(x_v)`` for every claim in the problem."""
    X = problem.features
    if problem.n and X.shape[1] != scorer.weights.size:
        raise SchemaMismatch(
            f"problem {problem.id!r} has {X.shape[1]} features, scorer expects {scorer.weights.size}")
    return risks_from_matrix(scorer, X.reshape(problem.n, scorer.weights.size))


def risks_from_matrix(scorer: ScorerParams, X: np.ndarray) -> np.ndarray:
    with np.errstate(over="ignore", invalid="ignore"):
        z = X @ scorer.weights + scorer.bias
        if scorer.link == "logistic":
            z = 1.0 / (1.0 + np.exp(-z))
        r = scorer.risk_offset_C - z
    if not np.all(np.isfinite(r)):
        raise NonFiniteValue("scorer produced non-finite risks")
    return r


def build_tau_grid(risks: Sequence[float], m: float) -> TauGrid:
    risks = np.asarray(risks, dtype=float)
    if risks.size == 0:
        raise EmptyRisks("cannot build a threshold grid from zero risks")
    if not m > 0:
        raise InvalidConfig(f"grid margin m must be positive, got {m}")
    lo, hi = risks.min() - m, risks.max() + m
    return TauGrid(np.unique(np.concatenate([[lo], risks, [hi]])), float(m))


def entry_thresholds(problem: AdgProblem, risks: np.ndarray) -> np.ndarray:
    """Smallest ``tau`` at which each claim survives coherent filtering.

    A claim enters once it and all its ancestors pass, i.e. at the maximum
    risk over its ancestor closure.
    """
    risks = np.asarray(risks, dtype=float)
    closure = problem.ancestor_matrix | np.eye(problem.n, dtype=bool)
    return np.where(closure, risks[None, :], -np.inf).max(axis=1) if problem.n else risks


def generate_subgraph(problem: AdgProblem, risks: Sequence[float], tau: float, coherence: bool = True) -> set[int]:
    risks = np.asarray(risks, dtype=float)
    keys = entry_thresholds(problem, risks) if coherence else risks
    return set(np.flatnonzero(keys <= tau).tolist())


def _break_point(problem: AdgProblem, risks: np.ndarray, labels: np.ndarray, coherence: bool) -> float:
    """Smallest threshold at which a false claim is retained (inf if none)."""
    false = labels == 0
    if not false.any():
        return math.inf
    keys = entry_thresholds(problem, risks) if coherence else risks
    return float(keys[false].min())


def hard_nonconformity(
    problem: AdgProblem,
    risks: Sequence[float],
    labels: Sequence[int] | None = None,
    grid: TauGrid | None = None,
    coherence: bool = True,
    m: float = 20.0,
) -> float:
    """Largest grid threshold below which every filtered subgraph is valid.

    Validity is coherent factuality when ``coherence`` is on and claim-wise
    factuality for the independent baseline. Because subgraphs are nested,
    the first invalid grid point is where the first false claim enters.
    """
    risks = np.asarray(risks, dtype=float)
    labels = problem.labels if labels is None else np.asarray(labels, dtype=int)
    grid = build_tau_grid(risks, m) if grid is None else grid
    b = _break_point(problem, risks, labels, coherence)
    below = grid.values[grid.values < b]
    return float(below[-1]) if below.size else grid.tau_min


def quantile_index(n: int, alpha: float, orientation: str = "lower") -> int:
    """1-based ascending order-statistic index; may fall outside ``[1, n]``."""
    if not 0.0 < alpha < 1.0:
        raise InvalidConfig(f"alpha must lie in (0, 1), got {alpha}")
    # Guard against float fuzz such as (1 - 0.1) * 10 = 9.000000000000002.
    j = math.ceil(round((1.0 - alpha) * (n + 1), 9))
    if orientation == "lower":
        return n + 1 - j
    if orientation == "upper":
        return j
    raise InvalidConfig(f"orientation must be 'lower' or 'upper', got {orientation!r}")


def split_quantile(scores: Sequence[float], alpha: float, orientation: str = "lower") -> CalibratedThreshold:
    """Conformal order statistic of calibration scores.

    ``lower`` (default) takes the ``ceil((1-alpha)(n+1))``-th largest score,
    which is the coverage-valid choice when larger scores are safer.
    """
    scores = np.sort(np.asarray(scores, dtype=float))
    n = scores.size
    if n == 0:
        raise EmptyScores("split_quantile needs at least one score")
    k = quantile_index(n, alpha, orientation)
    if k < 1:
        tau: float | Sentinel = Sentinel.NEG_INF
    elif k > n:
        tau = Sentinel.POS_INF
    else:
        tau = float(scores[k - 1])
    return CalibratedThreshold(tau, alpha, n, orientation)


def hard_predict(
    problem: AdgProblem,
    risks: Sequence[float],
    grid: TauGrid,
    threshold: CalibratedThreshold | float | Sentinel,
    coherence: bool = True,
) -> tuple[float | Sentinel, set[int]]:
    """Largest grid threshold strictly below ``tau_hat`` and its subgraph."""
    tau_hat = threshold.tau_hat if isinstance(threshold, CalibratedThreshold) else threshold
    if tau_hat is Sentinel.NEG_INF:
        return Sentinel.NEG_INF, set()
    if tau_hat is Sentinel.POS_INF:
        tau_star = grid.tau_max
    else:
        below = grid.values[grid.values < float(tau_hat)]
        if below.size == 0:
            return Sentinel.NEG_INF, set()
        tau_star = float(below[-1])
    return tau_star, generate_subgraph(problem, risks, tau_star, coherence)


def is_valid(problem: AdgProblem, retained, coherence: bool = True) -> bool:
    """Coverage predicate matching the filtering mode."""
    return is_coherently_factual(problem, retained) if coherence else is_factual(problem, retained)


def frequency_score(problem: AdgProblem, beta_mix: float) -> np.ndarray:
    """Mix of a claim's own frequency and the median over its descendants."""
    if not 0.0 <= beta_mix <= 1.0:
        raise InvalidConfig(f"beta_mix must lie in [0, 1], got {beta_mix}")
    f = problem.freqs
    if f is None:
        raise MissingFrequency(f"problem {problem.id!r} has claims without freq")
    desc = problem.ancestor_matrix.T  # desc[v, u]: u is a descendant of v
    med = np.array([np.median(f[desc[v]]) if desc[v].any() else f[v] for v in range(problem.n)])
    return (1.0 - beta_mix) * f + beta_mix * med


def frequency_baseline_risk(problem: AdgProblem, beta_mix: float = 0.0, c_freq: float | None = None) -> np.ndarray:
    """Risk ``C_freq - s(v)``; ``C_freq`` defaults to the problem's max frequency."""
    s = frequency_score(problem, beta_mix)
    if c_freq is None:
        c_freq = float(problem.freqs.max()) if problem.n else 0.0
    return c_freq - s


@dataclass
class HardCalibration:
    """Nonconformity scores of a calibration set, reusable across alphas."""

    scores: np.ndarray
    coherence: bool = True
    orientation: str = "lower"
    thresholds: dict[float, CalibratedThreshold] = field(default_factory=dict)

    def at(self, alpha: float) -> CalibratedThreshold:
        if alpha not in self.thresholds:
            self.thresholds[alpha] = split_quantile(self.scores, alpha, self.orientation)
        return self.thresholds[alpha]


def hard_calibrate(
    problems: Sequence[AdgProblem],
    risks: Sequence[np.ndarray],
    m: float = 20.0,
    coherence: bool = True,
    orientation: str = "lower",
) -> HardCalibration:
    scores = np.array([
        hard_nonconformity(p, r, grid=build_tau_grid(r, m), coherence=coherence)
        for p, r in zip(problems, risks)
    ])
    return HardCalibration(scores, coherence, orientation)
