"""Differentiable relaxation of coherent-factuality calibration and prediction.

All problems in a calibration or prediction set are packed into padded
arrays so that one tape covers the whole set:

* claims axis ``N`` is padded to the largest problem,
* grid axis ``G`` is padded to ``N + 2`` by repeating the last grid point,
* boolean masks keep padding out of every reduction that matters.

The threshold grid is built from the current risk values with a constant
selection matrix, so gradients flow into the grid points as well as into
the risks themselves.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, fields, replace
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .adg import AdgProblem
from .autodiff import Node, Tape
from .errors import DegenerateWeights, EmptyValues, InvalidConfig
from .hard_cf import Sentinel, quantile_index

# exp() of anything below this underflows in double precision
LOG_UNDERFLOW = -708.0
DEGENERATE_RANGE = 1e-12


@dataclass(frozen=True)
class SoftConfig:
    T_p: float = 0.01
    gamma: float = 1.0
    tau_s: float = 0.001
    lam: float = 1.0
    beta: float = 1.0
    tau_z: float = 0.001
    rho: float = 100.0
    epsilon: float = 1e-12
    margin_m: float = 20.0
    gate: str = "normalized"

    def __post_init__(self):
        if self.gate not in ("normalized", "raw"):
            raise InvalidConfig(f"SoftConfig.gate must be 'normalized' or 'raw', got {self.gate!r}")
        for f in fields(self):
            if f.name == "gate":
                continue
            v = getattr(self, f.name)
            if not (isinstance(v, (int, float)) and math.isfinite(v) and v > 0):
                raise InvalidConfig(f"SoftConfig.{f.name} must be positive and finite, got {v!r}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["lambda"] = d.pop("lam")
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SoftConfig":
        d = dict(d)
        if "lambda" in d:
            d["lam"] = d.pop("lambda")
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise InvalidConfig(f"unknown SoftConfig keys: {sorted(unknown)}")
        return cls(**{k: (v if k == "gate" else float(v)) for k, v in d.items()})

    def with_(self, **kw) -> "SoftConfig":
        return replace(self, **kw)


PRESETS = {
    # fixed values used for surrogate-fidelity checks
    "paper-validation": SoftConfig(T_p=0.01, beta=1.0, gamma=1.0, lam=1.0, tau_s=0.001, tau_z=0.001, margin_m=20.0),
    # near-limit temperatures; lam > 1 breaks the tau_min/tau_max utility tie
    # and a small margin keeps interior grid points well separated after
    # min-max normalisation
    "sharp": SoftConfig(T_p=1e-3, beta=1e3, gamma=1.0, lam=2.0, tau_s=1e-3, tau_z=1e-3, rho=1e3,
                        epsilon=1e-300, margin_m=0.5),
    # smooth temperatures for training; the raw gate with beta * tau_z < 1
    # keeps weight off grid points above tau_hat and gives the zero
    # initialisation a non-vanishing gradient
    "train": SoftConfig(T_p=0.1, beta=2.0, gamma=2.0, lam=1.5, tau_s=0.5, tau_z=0.05, rho=20.0, margin_m=1.0,
                        gate="raw"),
}


def preset(name: str) -> SoftConfig:
    try:
        return PRESETS[name]
    except KeyError:
        raise InvalidConfig(f"unknown preset {name!r}; choose from {sorted(PRESETS)}") from None


# ------------------------------------------------------------------- packing


def coherence_weights(problem: AdgProblem, gamma: float) -> np.ndarray:
    """Row-normalised weights: ``gamma`` on ancestors, 1 on the claim itself."""
    W = gamma * problem.ancestor_matrix.astype(float) + np.eye(problem.n)
    return W / W.sum(axis=1, keepdims=True)


@dataclass
class Packed:
    """Padded, constant view of a list of problems."""

    X: np.ndarray          # (P, N, d)
    labels: np.ndarray     # (P, N) int, 0 on padding
    mask: np.ndarray       # (P, N) bool, real claims
    A: np.ndarray          # (P, N, N) coherence weights
    false_w: np.ndarray    # (P, N) 1/|V-| on false claims
    sizes: np.ndarray      # (P,)

    @property
    def P(self) -> int:
        return self.X.shape[0]

    @property
    def N(self) -> int:
        return self.X.shape[1]


def pack(problems: Sequence[AdgProblem], gamma: float, n_features: int | None = None,
         coherence: bool = True) -> Packed:
    """Pad ``problems`` into arrays; ``coherence=False`` drops the graph (identity weights)."""
    if not problems:
        raise EmptyValues("cannot pack an empty problem list")
    P = len(problems)
    N = max(p.n for p in problems)
    d = n_features if n_features is not None else problems[0].features.shape[1]
    X = np.zeros((P, N, d))
    labels = np.zeros((P, N), dtype=int)
    mask = np.zeros((P, N), dtype=bool)
    A = np.tile(np.eye(N), (P, 1, 1))
    false_w = np.zeros((P, N))
    for i, prob in enumerate(problems):
        n = prob.n
        if n:
            X[i, :n] = prob.features.reshape(n, d)
        labels[i, :n] = prob.labels
        mask[i, :n] = True
        if coherence:
            A[i, :n, :n] = coherence_weights(prob, gamma)
        nf = int((prob.labels == 0).sum())
        if nf:
            false_w[i, :n] = (prob.labels == 0) / nf
    return Packed(X, labels, mask, A, false_w, np.array([p.n for p in problems]))


def scorer_risks(theta: Node, packed: Packed, C: float, link: str = "linear") -> Node:
    """``C - pi_theta(x)`` with ``theta = (w_1..w_d, b)``."""
    d = packed.X.shape[-1]
    z = packed.X @ theta[:d] + theta[d]
    if link == "logistic":
        z = ad.sigmoid(z)
    return C - z


# ---------------------------------------------------------------- components


def soft_grid(risks: Node, mask: np.ndarray, m: float) -> tuple[Node, np.ndarray]:
    """Differentiable threshold grid per problem, plus its validity mask.

    Grid points are sorted unique risks with ``min - m`` and ``max + m``
    appended. Tied risks collapse to one grid point whose value is the mean
    of the tied risks, so the gradient is shared evenly among them.
    """
    r = risks.value
    P, N = r.shape
    G = N + 2
    S = np.zeros((P, G, N))
    offset = np.zeros((P, G))
    gmask = np.zeros((P, G), dtype=bool)
    for i in range(P):
        idx = np.flatnonzero(mask[i])
        order = idx[np.argsort(r[i, idx], kind="stable")]
        groups = [[order[0]]]
        for j in order[1:]:
            if r[i, j] == r[i, groups[-1][0]]:
                groups[-1].append(j)
            else:
                groups.append([j])
        rows = [(groups[0], -m)] + [(g, 0.0) for g in groups] + [(groups[-1], m)]
        rows += [rows[-1]] * (G - len(rows))
        for g, (members, off) in enumerate(rows):
            S[i, g, members] = 1.0 / len(members)
            offset[i, g] = off
        gmask[i, : len(groups) + 2] = True
    grid = ad.reshape(S @ ad.reshape(risks, (P, N, 1)), (P, G)) + offset
    return grid, gmask


def soft_keep(risks, grid, T_p: float) -> Node:
    """``p[..., v, t] = sigmoid((grid[t] - r[v]) / T_p)``."""
    risks, grid = _lift(risks, grid)
    diff = ad.reshape(grid, grid.shape[:-1] + (1, grid.shape[-1])) - ad.reshape(risks, risks.shape + (1,))
    return ad.sigmoid(diff / T_p)


def ancestor_coherence(weights, p, gamma: float | None = None, epsilon: float = 1e-12) -> Node:
    """Weighted geometric mean of keep probabilities over each claim's ancestor closure.

    ``weights`` is either a problem (weights built with ``gamma``) or a
    precomputed row-normalised matrix. The result is clamped to
    ``[epsilon, 1 - epsilon]``.
    """
    (p,) = _lift(p)
    if isinstance(weights, AdgProblem):
        if gamma is None:
            raise InvalidConfig("gamma is required when passing a problem")
        weights = coherence_weights(weights, gamma)
    logq = np.asarray(weights) @ ad.log(p + epsilon)
    return ad.clip(ad.exp(logq), epsilon, 1.0 - epsilon)


def violation_scores(q, false_weights, tau_s: float, epsilon: float = 1e-12) -> Node:
    """``V = 1 - Q^(1/tau_s)`` with ``log Q`` the mean of ``log(1 - q)`` over false claims.

    ``false_weights`` may be raw labels (a 1-D int vector for one problem)
    or precomputed averaging weights. No false claims gives ``V = 0``.
    """
    (q,) = _lift(q)
    fw = np.asarray(false_weights)
    if fw.dtype.kind in "iub":
        false = fw == 0
        fw = false / false.sum() if false.any() else np.zeros(fw.shape)
    fw = fw.astype(float)
    log1mq = ad.log(1.0 - q + epsilon)
    logQ = ad.reshape(fw[..., None, :] @ log1mq, q.shape[:-2] + (q.shape[-1],))
    return 1.0 - ad.exp(logQ / tau_s)


def minmax_normalize(x, mask=None) -> Node:
    """Scale to ``[0, 1]`` along the last axis; a flat row maps to 0.5 with zero gradient."""
    (x,) = _lift(x)
    lo = ad.amin(x, axis=-1, mask=mask)
    hi = ad.amax(x, axis=-1, mask=mask)
    rng = hi - lo
    degenerate = rng.value <= DEGENERATE_RANGE
    safe = ad.where(degenerate, 1.0, rng)
    lo_, safe_ = (ad.reshape(v, v.shape + (1,)) for v in (lo, safe))
    scaled = (x - lo_) / safe_
    return ad.where(np.broadcast_to(degenerate[..., None], x.shape), 0.5, scaled)


def utility(grid, V, lam: float, mask=None) -> tuple[Node, Node, Node]:
    """Normalised grid, normalised violation and ``s = tau_n - lam * V_n``."""
    tau_n = minmax_normalize(grid, mask)
    V_n = minmax_normalize(V, mask)
    return tau_n, V_n, tau_n - lam * V_n


def soft_supremum(grid, V, lam: float, beta: float, mask=None) -> Node:
    """Softmax-weighted average of raw grid values under the utility ``s``."""
    grid, V = _lift(grid, V)
    _, _, s = utility(grid, V, lam, mask)
    w = ad.softmax(beta * s, axis=-1, mask=mask)
    return (w * grid).sum(axis=-1)


def soft_quantile(values, level: float | int, rho: float, orientation: str = "lower", n_index: bool = False):
    """Soft order statistic via soft ranks and a Gaussian rank kernel.

    ``level`` is the miscoverage ``alpha`` (the index is chosen exactly as in
    :func:`split_quantile`) unless ``n_index`` is true, in which case it is
    the 1-based target rank itself. Returns a :class:`Sentinel` when the
    target rank falls outside ``[1, n]``.
    """
    (x,) = _lift(values)
    n = x.shape[0]
    if n == 0:
        raise EmptyValues("soft_quantile needs at least one value")
    k = int(level) if n_index else quantile_index(n, float(level), orientation)
    if k < 1:
        return Sentinel.NEG_INF
    if k > n:
        return Sentinel.POS_INF
    diffs = ad.reshape(x, (n, 1)) - ad.reshape(x, (1, n))
    # the diagonal contributes sigmoid(0) = 0.5 exactly; remove it
    ranks = 0.5 + ad.sigmoid(rho * diffs).sum(axis=1)
    weights = ad.softmax(-rho * (ranks - float(k)) ** 2)
    return (weights * x).sum()


def gate_logits(grid, tau_hat, beta: float, tau_z: float, mask=None, gate: str = "normalized") -> Node:
    """``beta * tau' + log sigmoid((tau_hat - tau) / tau_z)``.

    ``tau'`` is the min-max normalised grid by default; ``gate="raw"`` uses
    the raw grid, for which the gate dominates whenever ``beta * tau_z < 1``
    regardless of the risk scale.
    """
    (grid,) = _lift(grid)
    tau_n = grid if gate == "raw" else minmax_normalize(grid, mask)
    if tau_hat is Sentinel.POS_INF:
        return beta * tau_n
    return beta * tau_n + ad.log_sigmoid((tau_hat - grid) / tau_z)


def gated_soft_argmax(grid, tau_hat, beta: float, tau_z: float, mask=None, gate: str = "normalized") -> Node:
    """Gated softmax weights over the grid; raises when every weight underflows."""
    if tau_hat is Sentinel.NEG_INF:
        raise DegenerateWeights("threshold is the -inf sentinel; every grid point is gated out")
    logits = gate_logits(grid, tau_hat, beta, tau_z, mask, gate)
    if np.any(_closed(logits, grid, tau_hat, tau_z, mask, gate)):
        raise DegenerateWeights("all gated weights underflow; tau_hat lies far below the grid")
    return ad.softmax(logits, axis=-1, mask=mask)


def _closed(logits: Node, grid, tau_hat, tau_z: float, mask, gate: str) -> np.ndarray:
    """Rows whose gate shuts every grid point.

    With the normalised grid the logits themselves are bounded above by
    ``beta``; with the raw grid only the gate term is, so it is checked alone.
    """
    if gate == "raw" and tau_hat is not Sentinel.POS_INF:
        g = grid.value if isinstance(grid, Node) else np.asarray(grid, dtype=float)
        t = tau_hat.value if isinstance(tau_hat, Node) else tau_hat
        lv = -np.logaddexp(0.0, (g - t) / tau_z)
    else:
        lv = logits.value
    if mask is not None:
        lv = np.where(mask, lv, -np.inf)
    return lv.max(axis=-1) < LOG_UNDERFLOW


def soft_retention(q, w) -> Node:
    """``q_v = sum_t w_t q[v, t]``."""
    q, w = _lift(q, w)
    return (q * ad.reshape(w, w.shape[:-1] + (1, w.shape[-1]))).sum(axis=-1)


def retention_loss(qv, labels, mask=None) -> Node:
    """Negative mean (per problem) number of true claims retained."""
    (qv,) = _lift(qv)
    y = np.asarray(labels, dtype=float)
    if mask is not None:
        y = y * mask
    n_problems = qv.shape[0] if qv.value.ndim > 1 else 1
    return -(qv * y).sum() / float(n_problems)


# --------------------------------------------------------------- pipelines


@dataclass
class CalibrationTrace:
    """Intermediate values of the calibration pipeline, kept for diagnostics."""

    risks: Node
    grid: Node
    grid_mask: np.ndarray
    q: Node
    V: Node
    tau_tilde: Node


def soft_nonconformity(theta: Node, packed: Packed, C: float, cfg: SoftConfig, link: str = "linear") -> CalibrationTrace:
    r = scorer_risks(theta, packed, C, link)
    grid, gmask = soft_grid(r, packed.mask, cfg.margin_m)
    p = soft_keep(r, grid, cfg.T_p)
    q = ancestor_coherence(packed.A, p, epsilon=cfg.epsilon)
    V = violation_scores(q, packed.false_w, cfg.tau_s, cfg.epsilon)
    tau_tilde = soft_supremum(grid, V, cfg.lam, cfg.beta, gmask)
    return CalibrationTrace(r, grid, gmask, q, V, tau_tilde)


def differentiable_calibrate(theta: Node, packed: Packed, C: float, alpha: float, cfg: SoftConfig,
                             orientation: str = "lower", link: str = "linear"):
    """Soft quantile of the soft nonconformity scores (a Node or a Sentinel)."""
    trace = soft_nonconformity(theta, packed, C, cfg, link)
    return soft_quantile(trace.tau_tilde, alpha, cfg.rho, orientation)


@dataclass
class PredictionTrace:
    risks: Node
    grid: Node
    grid_mask: np.ndarray
    q: Node
    weights: Node | None
    qv: Node
    rejected: np.ndarray   # (P,) problems whose gate closed entirely


def differentiable_predict(theta: Node, packed: Packed, C: float, tau_hat, cfg: SoftConfig,
                           link: str = "linear") -> PredictionTrace:
    """Soft retention probabilities; problems whose gate underflows get the reject-all floor."""
    tape = theta.tape
    r = scorer_risks(theta, packed, C, link)
    grid, gmask = soft_grid(r, packed.mask, cfg.margin_m)
    p = soft_keep(r, grid, cfg.T_p)
    q = ancestor_coherence(packed.A, p, epsilon=cfg.epsilon)
    floor = np.full(packed.mask.shape, cfg.epsilon)
    if tau_hat is Sentinel.NEG_INF:
        qv = tape.const(floor)
        return PredictionTrace(r, grid, gmask, q, None, qv, np.ones(packed.P, dtype=bool))
    logits = gate_logits(grid, tau_hat, cfg.beta, cfg.tau_z, gmask, cfg.gate)
    rejected = _closed(logits, grid, tau_hat, cfg.tau_z, gmask, cfg.gate)
    w = ad.softmax(logits, axis=-1, mask=gmask)
    qv = soft_retention(q, w)
    if rejected.any():
        qv = ad.where(np.broadcast_to(rejected[:, None], floor.shape), floor, qv)
    return PredictionTrace(r, grid, gmask, q, w, qv, rejected)


def dcf_loss(theta: Node, cal: Packed, pred: Packed, C: float, alpha: float, cfg: SoftConfig,
             orientation: str = "lower", link: str = "linear") -> Node:
    """End-to-end retention loss: calibrate on ``cal``, predict on ``pred``."""
    tau_hat = differentiable_calibrate(theta, cal, C, alpha, cfg, orientation, link)
    trace = differentiable_predict(theta, pred, C, tau_hat, cfg, link)
    return retention_loss(trace.qv, pred.labels, pred.mask)


# ------------------------------------------------------- numpy conveniences


def _lift(*xs):
    """Wrap plain arrays as constants on a shared (possibly fresh) tape."""
    tape = next((x.tape for x in xs if isinstance(x, Node)), None) or Tape()
    return tuple(x if isinstance(x, Node) else tape.const(x) for x in xs)


def _theta_const(weights: np.ndarray, bias: float) -> tuple[Tape, Node]:
    tape = Tape()
    return tape, tape.const(np.append(np.asarray(weights, dtype=float), bias))


def soft_scores(problems: Sequence[AdgProblem], weights, bias: float, C: float, cfg: SoftConfig,
                link: str = "linear") -> np.ndarray:
    """Soft nonconformity ``tau~`` per problem, as plain floats."""
    _, theta = _theta_const(weights, bias)
    packed = pack(problems, cfg.gamma, np.asarray(weights).size)
    return soft_nonconformity(theta, packed, C, cfg, link).tau_tilde.value.copy()


def soft_threshold(problems, weights, bias, C, alpha, cfg, orientation="lower", link="linear"):
    """Soft calibrated threshold as a float or Sentinel."""
    _, theta = _theta_const(weights, bias)
    packed = pack(problems, cfg.gamma, np.asarray(weights).size)
    t = differentiable_calibrate(theta, packed, C, alpha, cfg, orientation, link)
    return t if isinstance(t, Sentinel) else t.item()


def soft_retention_probs(problems, weights, bias, C, tau_hat, cfg, link="linear") -> list[np.ndarray]:
    """Per-problem soft retention probabilities as plain arrays."""
    _, theta = _theta_const(weights, bias)
    packed = pack(problems, cfg.gamma, np.asarray(weights).size)
    qv = differentiable_predict(theta, packed, C, tau_hat, cfg, link).qv.value
    return [qv[i, : packed.sizes[i]].copy() for i in range(packed.P)]
