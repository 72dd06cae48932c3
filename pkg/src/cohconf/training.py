"""End-to-end training of the linear claim scorer through the relaxed pipeline."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, fields
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .adg import AdgProblem
from .errors import InvalidConfig, NonFiniteGradient, NonFiniteLoss, TooFewProblems
from .hard_cf import ScorerParams, Sentinel
from .soft import Packed, SoftConfig, dcf_loss, pack, preset


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    step: int = 0
    lr: float = 0.015
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def init(cls, n_params: int, lr: float = 0.015, **kw) -> "AdamState":
        return cls(np.zeros(n_params), np.zeros(n_params), 0, lr, **kw)


def adam_step(state: AdamState, params: np.ndarray, grads: np.ndarray) -> tuple[np.ndarray, AdamState]:
    """Bias-corrected Adam update; returns new params and a new state."""
    params = np.asarray(params, dtype=float)
    grads = np.asarray(grads, dtype=float)
    if grads.shape != params.shape or state.m.shape != params.shape:
        raise ValueError("parameter, gradient and moment shapes must match")
    if not np.all(np.isfinite(grads)):
        raise NonFiniteGradient("non-finite gradient passed to adam_step")
    t = state.step + 1
    m = state.beta1 * state.m + (1 - state.beta1) * grads
    v = state.beta2 * state.v + (1 - state.beta2) * grads ** 2
    m_hat = m / (1 - state.beta1 ** t)
    v_hat = v / (1 - state.beta2 ** t)
    new = params - state.lr * m_hat / (np.sqrt(v_hat) + state.eps)
    return new, AdamState(m, v, t, state.lr, state.beta1, state.beta2, state.eps)


@dataclass(frozen=True)
class TrainConfig:
    alpha: float = 0.05
    epochs: int = 100
    patience: int = 10
    cal_fraction: float = 0.5
    seed: int = 0
    lr: float = 0.015
    risk_offset_C: float = 0.0
    standardize: bool = True
    link: str = "linear"
    orientation: str = "lower"
    coherence: bool = True
    soft: SoftConfig = field(default_factory=lambda: preset("train"))

    def __post_init__(self):
        if not 0 < self.alpha < 1:
            raise InvalidConfig(f"alpha must lie in (0, 1), got {self.alpha}")
        if not 0 < self.cal_fraction < 1:
            raise InvalidConfig(f"cal_fraction must lie in (0, 1), got {self.cal_fraction}")
        if self.epochs < 0 or self.patience < 1 or self.patience > max(self.epochs, 1):
            raise InvalidConfig("need epochs >= 0 and 1 <= patience <= epochs")
        if self.lr < 0:
            raise InvalidConfig("learning rate must be non-negative")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["soft"] = self.soft.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise InvalidConfig(f"unknown train config keys: {sorted(unknown)}")
        soft = d.pop("soft", None)
        if isinstance(soft, str):
            d["soft"] = preset(soft)
        elif isinstance(soft, dict):
            d["soft"] = SoftConfig.from_dict(soft)
        return cls(**d)


def epoch_split(n: int, cal_fraction: float, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Random disjoint (cal, pred) index split; cal gets ``floor(n * f)``, at least one."""
    if n < 2:
        raise TooFewProblems(f"need at least 2 training problems, got {n}")
    n_cal = min(max(1, int(math.floor(n * cal_fraction))), n - 1)
    perm = rng.permutation(n)
    return np.sort(perm[:n_cal]), np.sort(perm[n_cal:])


def take(packed: Packed, idx: np.ndarray) -> Packed:
    return Packed(packed.X[idx], packed.labels[idx], packed.mask[idx], packed.A[idx],
                  packed.false_w[idx], packed.sizes[idx])


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_loss: float


@dataclass
class TrainResult:
    scorer: ScorerParams
    log: list[EpochRecord]
    best_epoch: int


def _standardizer(problems: Sequence[AdgProblem], d: int) -> tuple[np.ndarray, np.ndarray]:
    X = np.vstack([p.features.reshape(p.n, d) for p in problems if p.n])
    mu = X.mean(axis=0)
    sd = X.std(axis=0)
    sd[sd < 1e-12] = 1.0
    return mu, sd


def _to_raw(theta: np.ndarray, mu: np.ndarray, sd: np.ndarray) -> tuple[np.ndarray, float]:
    """Fold the standardisation into raw-feature weights and bias."""
    w = theta[:-1] / sd
    return w, float(theta[-1] - w @ mu)


def train_scorer(
    train: Sequence[AdgProblem],
    val: Sequence[AdgProblem],
    cfg: TrainConfig = TrainConfig(),
    feature_names: Sequence[str] = (),
) -> TrainResult:
    """Train with per-epoch calibration/prediction resplits and early stopping.

    The monitored metric is the relaxed retention loss on ``val`` with the
    whole training set used for calibration. The returned scorer is the
    snapshot with the lowest monitored loss (epoch 0 is the initialisation).
    """
    if not train or not val:
        raise TooFewProblems("train and validation sets must be non-empty")
    d = train[0].features.shape[1] if train[0].n else len(feature_names)
    soft = cfg.soft
    if cfg.standardize:
        mu, sd = _standardizer(train, d)
    else:
        mu, sd = np.zeros(d), np.ones(d)

    def packed(problems):
        pk = pack(problems, soft.gamma, d, cfg.coherence)
        pk.X = (pk.X - mu) / sd * pk.mask[..., None]
        return pk

    train_pk = packed(train)
    val_pk = packed(val)
    rng = np.random.default_rng(cfg.seed)

    def loss_at(theta_val, cal, pred):
        tape = ad.Tape()
        theta = tape.var(theta_val)
        return tape, theta, dcf_loss(theta, cal, pred, cfg.risk_offset_C, cfg.alpha, soft,
                                     cfg.orientation, cfg.link)

    theta = np.zeros(d + 1)
    state = AdamState.init(d + 1, cfg.lr)
    best = theta.copy()
    best_val = loss_at(theta, train_pk, val_pk)[2].item()
    log = [EpochRecord(0, math.nan, best_val)]
    best_epoch, stale = 0, 0
    for epoch in range(1, cfg.epochs + 1):
        cal_idx, pred_idx = epoch_split(len(train), cfg.cal_fraction, rng)
        tape, th, loss = loss_at(theta, take(train_pk, cal_idx), take(train_pk, pred_idx))
        if not math.isfinite(loss.item()):
            raise NonFiniteLoss(epoch)
        grads = ad.backward(tape, loss)[th]
        theta, state = adam_step(state, theta, grads)
        val_loss = loss_at(theta, train_pk, val_pk)[2].item()
        if not math.isfinite(val_loss):
            raise NonFiniteLoss(epoch)
        log.append(EpochRecord(epoch, loss.item(), val_loss))
        if val_loss < best_val:
            best_val, best, best_epoch, stale = val_loss, theta.copy(), epoch, 0
        else:
            stale += 1
            if stale >= cfg.patience:
                break
    w, b = _to_raw(best, mu, sd)
    scorer = ScorerParams(w, b, cfg.risk_offset_C, tuple(feature_names), cfg.link)
    return TrainResult(scorer, log, best_epoch)


def scorer_to_dict(scorer: ScorerParams, cfg: TrainConfig | None = None) -> dict:
    out = {
        "schema": list(scorer.feature_names),
        "weights": [float(x) for x in scorer.weights],
        "bias": scorer.bias,
        "C": scorer.risk_offset_C,
        "link": scorer.link,
    }
    if cfg is not None:
        out["config"] = cfg.to_dict()
        out["seed"] = cfg.seed
    return out


def scorer_from_dict(d: dict) -> ScorerParams:
    try:
        return ScorerParams(np.array(d["weights"], dtype=float), d.get("bias", 0.0), d.get("C", 0.0),
                            tuple(d.get("schema", ())), d.get("link", "linear"))
    except (KeyError, TypeError, ValueError) as e:
        raise InvalidConfig(f"malformed model document: {e}") from None
