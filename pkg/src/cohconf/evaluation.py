"""Cross-validated coverage/retention, surrogate diagnostics and score reports."""

from __future__ import annotations

import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, replace
from typing import Callable, Mapping, Sequence

import numpy as np

from .adg import AdgProblem
from .errors import EmptyClass, InsufficientVariance, InvalidConfig, SchemaMismatch, TooFewProblems
from .hard_cf import (CalibratedThreshold, ScorerParams, Sentinel, build_tau_grid, frequency_baseline_risk,
                      hard_calibrate, hard_nonconformity, hard_predict, is_valid, risk_scores)
from .soft import SoftConfig, soft_retention_probs, soft_scores, soft_threshold
from .training import TrainConfig, train_scorer

METHODS = ("dcf", "cf", "independent", "boosted-independent")
NEAR_MISS = 0.005

RiskFn = Callable[[AdgProblem], np.ndarray]


@dataclass(frozen=True)
class FoldMetrics:
    coverage: float
    retention_mean: float
    retention_fraction: float
    n_test: int


def _risk_fn(scorer: ScorerParams | RiskFn) -> RiskFn:
    if isinstance(scorer, ScorerParams):
        return lambda p: risk_scores(scorer, p)
    return scorer


def evaluate_fold(
    test: Sequence[AdgProblem],
    scorer: ScorerParams | RiskFn,
    tau_hat: CalibratedThreshold | float | Sentinel,
    coherence: bool = True,
    m: float = 20.0,
) -> FoldMetrics:
    """Hard prediction on every test problem, scored by the matching validity predicate."""
    if not test:
        raise TooFewProblems("empty test set")
    risk = _risk_fn(scorer)
    valid, kept, total = 0, 0, 0
    for p in test:
        if p.n == 0:
            valid += 1
            continue
        r = risk(p)
        _, retained = hard_predict(p, r, build_tau_grid(r, m), tau_hat, coherence)
        valid += is_valid(p, retained, coherence)
        kept += len(retained)
        total += p.n
    return FoldMetrics(valid / len(test), kept / len(test), kept / total if total else 0.0, len(test))


def meets_target(coverage: float, alpha: float) -> str:
    """``yes``, ``near-miss`` (within half a point) or ``no``."""
    # round away float fuzz such as 0.95 - 1e-17
    gap = round(coverage - (1.0 - alpha), 12)
    if gap >= 0:
        return "yes"
    return "near-miss" if gap >= -NEAR_MISS else "no"


def fold_split(n: int, fold: int, seed: int, fractions=(0.7, 0.15, 0.15)) -> tuple[np.ndarray, ...]:
    """Independent random train/val/test resplit for one Monte-Carlo fold."""
    if len(fractions) != 3 or any(f <= 0 for f in fractions) or not math.isclose(sum(fractions), 1.0):
        raise InvalidConfig(f"split fractions must be three positive shares summing to 1, got {fractions}")
    n_tr = int(math.floor(n * fractions[0]))
    n_va = int(math.floor(n * fractions[1]))
    if n_tr < 2 or n_va < 1 or n - n_tr - n_va < 1:
        raise TooFewProblems(f"{n} problems are too few for a {fractions} split")
    perm = np.random.default_rng([seed, fold]).permutation(n)
    return perm[:n_tr], perm[n_tr:n_tr + n_va], perm[n_tr + n_va:]


@dataclass(frozen=True)
class CVConfig:
    methods: tuple[str, ...] = ("dcf", "cf", "independent")
    alphas: tuple[float, ...] = (0.05, 0.10)
    folds: int = 20
    seed: int = 0
    fractions: tuple[float, float, float] = (0.7, 0.15, 0.15)
    margin_m: float = 20.0
    cf_beta_mix: float = 0.0
    c_freq: float | None = None
    train: TrainConfig = TrainConfig()
    features: tuple[str, ...] = ()

    def __post_init__(self):
        unknown = set(self.methods) - set(METHODS)
        if unknown:
            raise InvalidConfig(f"unknown methods {sorted(unknown)}; choose from {list(METHODS)}")
        if self.folds < 1:
            raise InvalidConfig("folds must be at least 1")
        for a in self.alphas:
            if not 0 < a < 1:
                raise InvalidConfig(f"alpha must lie in (0, 1), got {a}")


def _one_fold(problems: Sequence[AdgProblem], fold: int, cfg: CVConfig) -> list[dict]:
    tr_idx, va_idx, te_idx = fold_split(len(problems), fold, cfg.seed, cfg.fractions)
    train = [problems[i] for i in tr_idx]
    val = [problems[i] for i in va_idx]
    test = [problems[i] for i in te_idx]
    c_freq = cfg.c_freq
    if c_freq is None and any(m in cfg.methods for m in ("cf", "independent")):
        c_freq = max(float(p.freqs.max()) for p in problems if p.n)
    rows = []
    for method in cfg.methods:
        coherence = method in ("dcf", "cf")
        for alpha in cfg.alphas:
            if method in ("cf", "independent"):
                beta_mix = cfg.cf_beta_mix if method == "cf" else 0.0
                risk: RiskFn = lambda p, b=beta_mix: frequency_baseline_risk(p, b, c_freq)
            else:
                tcfg = replace(cfg.train, alpha=alpha, coherence=coherence, seed=cfg.train.seed + fold)
                scorer = train_scorer(train, val, tcfg, cfg.features).scorer
                risk = _risk_fn(scorer)
            calib = hard_calibrate(train, [risk(p) for p in train], cfg.margin_m, coherence,
                                   cfg.train.orientation)
            fm = evaluate_fold(test, risk, calib.at(alpha), coherence, cfg.margin_m)
            rows.append({"method": method, "alpha": alpha, "fold": fold, "coverage": fm.coverage,
                         "retention_mean": fm.retention_mean, "retention_fraction": fm.retention_fraction,
                         "meets_target": meets_target(fm.coverage, alpha), "n_test": fm.n_test})
    return rows


def aggregate(rows: Sequence[dict]) -> list[dict]:
    """One mean row per (method, alpha), in first-seen order."""
    keys = list(dict.fromkeys((r["method"], r["alpha"]) for r in rows))
    out = []
    for method, alpha in keys:
        sel = [r for r in rows if r["method"] == method and r["alpha"] == alpha]
        cov = float(np.mean([r["coverage"] for r in sel]))
        out.append({"method": method, "alpha": alpha, "fold": "mean", "coverage": cov,
                    "retention_mean": float(np.mean([r["retention_mean"] for r in sel])),
                    "retention_fraction": float(np.mean([r["retention_fraction"] for r in sel])),
                    "meets_target": meets_target(cov, alpha), "n_test": int(sum(r["n_test"] for r in sel))})
    return out


def cross_validate(problems: Sequence[AdgProblem], cfg: CVConfig = CVConfig(), jobs: int = 1) -> list[dict]:
    """Monte-Carlo cross-validation; returns per-fold rows followed by aggregate rows.

    Folds are independent resplits seeded by ``(seed, fold)``, so the result
    does not depend on ``jobs``.
    """
    problems = list(problems)
    fold_split(len(problems), 0, cfg.seed, cfg.fractions)  # fail early on tiny datasets
    if jobs > 1 and cfg.folds > 1:
        with ProcessPoolExecutor(max_workers=jobs) as ex:
            parts = list(ex.map(_one_fold, [problems] * cfg.folds, range(cfg.folds), [cfg] * cfg.folds))
    else:
        parts = [_one_fold(problems, f, cfg) for f in range(cfg.folds)]
    rows = [r for part in parts for r in part]
    rows.sort(key=lambda r: (cfg.methods.index(r["method"]), r["alpha"], r["fold"]))
    return rows + aggregate(rows)


# ------------------------------------------------------- surrogate diagnostics


@dataclass(frozen=True)
class Agreement:
    alpha: float
    both_incl: int
    soft_only: int
    hard_only: int
    both_excl: int

    @property
    def total(self) -> int:
        return self.both_incl + self.soft_only + self.hard_only + self.both_excl

    @property
    def agree_pct(self) -> float:
        return 100.0 * (self.both_incl + self.both_excl) / self.total if self.total else 100.0


def soft_hard_agreement(
    cal: Sequence[AdgProblem],
    scorer: ScorerParams,
    cfg: SoftConfig,
    alphas: Sequence[float],
    test: Sequence[AdgProblem] | None = None,
    orientation: str = "lower",
) -> list[Agreement]:
    """Claim-level contingency of soft (rounded at 0.5) against hard prediction.

    Both routes calibrate on ``cal`` and predict on ``test`` (``cal`` itself
    when omitted), with the grid margin taken from ``cfg``.
    """
    test = list(cal) if test is None else list(test)
    if scorer.link != "linear":
        raise InvalidConfig("the surrogate is only defined for the linear link here")
    m = cfg.margin_m
    hard_cal = hard_calibrate(cal, [risk_scores(scorer, p) for p in cal], m, True, orientation)
    out = []
    for alpha in alphas:
        th = hard_cal.at(alpha)
        t_soft = soft_threshold(cal, scorer.weights, scorer.bias, scorer.risk_offset_C, alpha, cfg, orientation)
        soft_q = soft_retention_probs(test, scorer.weights, scorer.bias, scorer.risk_offset_C, t_soft, cfg)
        cells = np.zeros(4, dtype=int)
        for p, qv in zip(test, soft_q):
            r = risk_scores(scorer, p)
            _, hard_set = hard_predict(p, r, build_tau_grid(r, m), th, True)
            h = np.zeros(p.n, dtype=bool)
            h[list(hard_set)] = True
            s = qv >= 0.5
            cells += [np.sum(s & h), np.sum(s & ~h), np.sum(~s & h), np.sum(~s & ~h)]
        out.append(Agreement(alpha, *map(int, cells)))
    return out


def pearson_mae(a: Sequence[float], b: Sequence[float]) -> tuple[float, float]:
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.size < 2 or np.ptp(a) == 0 or np.ptp(b) == 0:
        raise InsufficientVariance("Pearson correlation needs two non-constant vectors")
    return float(np.corrcoef(a, b)[0, 1]), float(np.mean(np.abs(a - b)))


@dataclass(frozen=True)
class Correlation:
    pearson_r: float
    mae: float
    hard_range: float
    soft: np.ndarray
    hard: np.ndarray
    threshold_r: float = math.nan
    threshold_mae: float = math.nan

    @property
    def relative_mae(self) -> float:
        return self.mae / self.hard_range if self.hard_range else math.inf


def calibration_correlation(
    problems: Sequence[AdgProblem],
    scorer: ScorerParams,
    cfg: SoftConfig,
    alphas: Sequence[float] = (),
    orientation: str = "lower",
) -> Correlation:
    """Soft against hard nonconformity scores over problems with a false claim.

    With ``alphas`` the calibrated thresholds of both routes are compared as
    well, skipping levels where either is an infinite sentinel.
    """
    probs = [p for p in problems if p.n and (p.labels == 0).any()]
    if len(probs) < 3:
        raise InsufficientVariance("need at least three problems with a false claim")
    w, b, C = scorer.weights, scorer.bias, scorer.risk_offset_C
    soft = soft_scores(probs, w, b, C, cfg)
    hard = np.array([hard_nonconformity(p, risk_scores(scorer, p), m=cfg.margin_m) for p in probs])
    r, mae = pearson_mae(soft, hard)
    tr, tm = math.nan, math.nan
    pairs = []
    hard_cal = hard_calibrate(probs, [risk_scores(scorer, p) for p in probs], cfg.margin_m, True, orientation)
    for alpha in alphas:
        ts = soft_threshold(probs, w, b, C, alpha, cfg, orientation)
        th = hard_cal.at(alpha).tau_hat
        if not isinstance(ts, Sentinel) and not isinstance(th, Sentinel):
            pairs.append((ts, th))
    if len(pairs) >= 2:
        try:
            tr, tm = pearson_mae(*zip(*pairs))
        except InsufficientVariance:
            pass
    return Correlation(r, mae, float(np.ptp(hard)), soft, hard, tr, tm)


# ----------------------------------------------------------- interpretability


@dataclass(frozen=True)
class Contribution:
    name: str
    value: float
    weight: float
    contribution: float


def feature_contributions(scorer: ScorerParams, features: Mapping[str, float] | Sequence[float]
                          ) -> tuple[list[Contribution], float]:
    """``weight * value`` per feature, largest magnitude first, plus the total score."""
    names = scorer.feature_names or tuple(f"x{i}" for i in range(scorer.weights.size))
    if isinstance(features, Mapping):
        unknown = set(features) - set(names)
        if unknown:
            raise SchemaMismatch(f"features outside the scorer schema: {sorted(unknown)}")
        values = np.array([float(features.get(n, 0.0)) for n in names])
    else:
        values = np.asarray(features, dtype=float).ravel()
        if values.size != len(names):
            raise SchemaMismatch(f"expected {len(names)} feature values, got {values.size}")
    items = [Contribution(n, float(v), float(w), float(w * v))
             for n, v, w in zip(names, values, scorer.weights)]
    items.sort(key=lambda c: -abs(c.contribution))
    total = math.fsum(c.contribution for c in items) + scorer.bias
    return items, total


@dataclass(frozen=True)
class Separation:
    separation: float
    cohens_d: float
    overlap: float


def separation_metrics(scores: Mapping[str, tuple[Sequence[float], Sequence[int]]], bins: int = 64
                       ) -> dict[str, Separation]:
    """Class separation of each method's claim scores after pooled z-normalisation.

    ``scores`` maps a method name to (scores, labels). All methods share one
    mean and standard deviation so their separations are comparable.
    """
    if not scores:
        raise EmptyClass("no score sets given")
    data = {}
    for name, (s, y) in scores.items():
        s = np.asarray(s, dtype=float)
        y = np.asarray(y, dtype=int)
        if not (y == 1).any() or not (y == 0).any():
            raise EmptyClass(f"{name}: both label classes are needed")
        data[name] = (s, y)
    pooled = np.concatenate([s for s, _ in data.values()])
    mu, sd = pooled.mean(), pooled.std()
    sd = sd if sd > 0 else 1.0
    z_all = (pooled - mu) / sd
    lo, hi = z_all.min(), z_all.max()
    if hi == lo:
        hi = lo + 1.0
    edges = np.linspace(lo, hi, bins + 1)
    out = {}
    for name, (s, y) in data.items():
        z = (s - mu) / sd
        t, f = z[y == 1], z[y == 0]
        sep = float(t.mean() - f.mean())
        spread = z.std()
        d = sep / spread if spread > 0 else (0.0 if sep == 0 else math.copysign(math.inf, sep))
        ht = np.histogram(t, edges)[0] / t.size
        hf = np.histogram(f, edges)[0] / f.size
        out[name] = Separation(sep, float(d), float(np.minimum(ht, hf).sum()))
    return out
