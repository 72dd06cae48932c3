"""Dataset files, a synthetic claim-graph generator, and report emission.

Dataset documents are JSON::

    {"schema": ["frequency-score", ...],
     "problems": [{"id": "p0",
                   "claims": [{"id": 0, "features": {"frequency-score": 3.1},
                               "label": 1, "freq": 3.1}, ...],
                   "edges": [[0, 1], ...]}]}

Feature keys absent from a claim default to 0.0 and are counted in
``DatasetFile.missing_features``.
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from scipy.stats import norm

from .adg import AdgProblem, Claim, FeatureSchema, validate_dag
from .errors import DataError, InvalidConfig, IoError, ParseError, SchemaMismatch, ValidationError
from .graph_features import STRUCTURAL_FEATURE_NAMES, structural_feature_matrix

FREQ_FEATURE = "frequency-score"
SIGNAL_FEATURE = "dependency-signal"
FREQ_SCALE = 5.0


@dataclass
class DatasetFile:
    schema: FeatureSchema
    problems: list[AdgProblem]
    missing_features: int = 0

    def __len__(self) -> int:
        return len(self.problems)

    def subset(self, idx: Iterable[int]) -> "DatasetFile":
        return DatasetFile(self.schema, [self.problems[i] for i in idx])

    def select_features(self, names: Sequence[str]) -> "DatasetFile":
        """Copy restricted to the named feature columns, in the given order."""
        missing = [n for n in names if n not in self.schema.names]
        if missing:
            raise SchemaMismatch(f"features not in schema: {missing}")
        cols = [self.schema.names.index(n) for n in names]
        problems = []
        for p in self.problems:
            X = p.features.reshape(p.n, len(self.schema.names))[:, cols]
            claims = [Claim(c.id, X[i], c.label, c.freq) for i, c in enumerate(p.claims)]
            problems.append(AdgProblem(claims, p.edges, p.id))
        return DatasetFile(FeatureSchema(tuple(names)), problems, self.missing_features)

    @property
    def max_freq(self) -> float:
        fs = [p.freqs.max() for p in self.problems if p.n and p.freqs is not None]
        return float(max(fs)) if fs else 0.0


# ------------------------------------------------------------------ loading


def _problem_from_obj(obj, schema: FeatureSchema, pos: int) -> tuple[AdgProblem, int]:
    if not isinstance(obj, dict):
        raise ValidationError(f"#{pos}", "problem entry must be an object")
    pid = str(obj.get("id", f"#{pos}"))
    try:
        claims_obj = obj["claims"]
        edges_obj = obj.get("edges", [])
    except KeyError as e:
        raise ValidationError(pid, f"missing field {e.args[0]!r}") from None
    names = set(schema.names)
    missing = 0
    claims = []
    try:
        for c in sorted(claims_obj, key=lambda c: int(c["id"])):
            feats = c.get("features", {})
            unknown = set(feats) - names
            if unknown:
                raise ValidationError(pid, f"claim {c['id']} has features outside the schema: {sorted(unknown)}")
            missing += sum(1 for k in schema.names if k not in feats)
            vec = [float(feats.get(k, 0.0)) for k in schema.names]
            freq = c.get("freq")
            claims.append(Claim(int(c["id"]), np.array(vec), int(c["label"]),
                                None if freq is None else float(freq)))
        edges = [(int(a), int(b)) for a, b in edges_obj]
    except ValidationError:
        raise
    except (KeyError, TypeError, ValueError) as e:
        raise ValidationError(pid, f"malformed claim or edge: {e}") from None
    prob = AdgProblem(claims, edges, pid)
    try:
        validate_dag(prob)
    except ValidationError:
        raise
    except DataError as e:
        raise ValidationError(pid, str(e)) from None
    return prob, missing


def dataset_from_obj(doc) -> DatasetFile:
    if not isinstance(doc, dict) or "schema" not in doc or "problems" not in doc:
        raise ParseError("dataset document needs top-level 'schema' and 'problems'")
    try:
        schema = FeatureSchema(tuple(doc["schema"]))
    except (TypeError, ValueError) as e:
        raise ParseError(f"bad schema: {e}") from None
    problems, missing = [], 0
    for i, obj in enumerate(doc["problems"]):
        prob, miss = _problem_from_obj(obj, schema, i)
        problems.append(prob)
        missing += miss
    return DatasetFile(schema, problems, missing)


def load_dataset(path: str | Path) -> DatasetFile:
    try:
        text = Path(path).read_text()
    except OSError as e:
        raise IoError(f"cannot read {path}: {e}") from e
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as e:
        raise ParseError(f"{path}: line {e.lineno}, column {e.colno}: {e.msg}") from None
    return dataset_from_obj(doc)


def dataset_to_obj(ds: DatasetFile) -> dict:
    probs = []
    for p in ds.problems:
        claims = []
        for c in p.claims:
            entry = {"id": c.id,
                     "features": {k: float(v) for k, v in zip(ds.schema.names, c.features)},
                     "label": int(c.label)}
            if c.freq is not None:
                entry["freq"] = float(c.freq)
            claims.append(entry)
        probs.append({"id": p.id, "claims": claims, "edges": [list(e) for e in p.edges]})
    return {"schema": list(ds.schema.names), "problems": probs}


def save_dataset(ds: DatasetFile, path: str | Path) -> None:
    Path(path).write_text(json.dumps(dataset_to_obj(ds), separators=(",", ":")) + "\n")


# ---------------------------------------------------------------- synthesis


@dataclass(frozen=True)
class SynthConfig:
    """Knobs of the synthetic generator.

    ``false_rate`` is the chance a claim is wrong on its own; a wrong premise
    makes each dependent claim wrong with probability ``propagation``.
    ``freq_auc`` is the claim-level AUC of the frequency feature against the
    labels and ``signal_auc`` that of the dependency signal.
    """

    n_problems: int = 500
    min_claims: int = 4
    max_claims: int = 11
    edge_density: float = 0.3
    source_rate: float = 0.15
    false_rate: float = 0.03
    propagation: float = 0.7
    freq_auc: float = 0.6
    signal_auc: float = 0.75
    require_false: bool = False
    seed: int = 0

    def __post_init__(self):
        for name in ("edge_density", "source_rate", "false_rate", "propagation"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise InvalidConfig(f"{name} must lie in [0, 1], got {v}")
        for name in ("freq_auc", "signal_auc"):
            v = getattr(self, name)
            if not 0.0 < v < 1.0:
                raise InvalidConfig(f"{name} must lie in (0, 1), got {v}")
        if self.n_problems < 0 or not 1 <= self.min_claims <= self.max_claims:
            raise InvalidConfig("need n_problems >= 0 and 1 <= min_claims <= max_claims")
        if self.require_false and self.false_rate == 0.0:
            raise InvalidConfig("require_false needs a positive false_rate")

    @classmethod
    def from_dict(cls, d: dict) -> "SynthConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise InvalidConfig(f"unknown synth config keys: {sorted(unknown)}")
        return cls(**d)

    def to_dict(self) -> dict:
        return asdict(self)


def synthetic_schema() -> FeatureSchema:
    return FeatureSchema((FREQ_FEATURE, SIGNAL_FEATURE) + STRUCTURAL_FEATURE_NAMES)


def _separation(auc: float) -> float:
    """Mean shift between unit-variance Gaussians giving the requested AUC."""
    return math.sqrt(2.0) * norm.ppf(auc)


def _random_dag(n: int, cfg: SynthConfig, rng: np.random.Generator) -> list[tuple[int, int]]:
    edges = set()
    for v in range(1, n):
        if rng.random() < cfg.source_rate:
            continue
        # favour the previous step so problems look like reasoning chains
        parent = v - 1 if rng.random() < 0.6 else int(rng.integers(0, v))
        edges.add((parent, v))
        for u in range(v):
            if u != parent and rng.random() < cfg.edge_density / v:
                edges.add((u, v))
    return sorted(edges)


def _labels(n: int, edges, cfg: SynthConfig, rng: np.random.Generator) -> np.ndarray:
    parents = [[] for _ in range(n)]
    for a, b in edges:
        parents[b].append(a)
    labels = np.ones(n, dtype=int)
    for v in range(n):  # ids are already topologically ordered
        wrong = rng.random() < cfg.false_rate
        for u in parents[v]:
            if labels[u] == 0 and rng.random() < cfg.propagation:
                wrong = True
        labels[v] = 0 if wrong else 1
    return labels


def _one_problem(i: int, cfg: SynthConfig, seed_seq: np.random.SeedSequence) -> AdgProblem:
    rng = np.random.default_rng(seed_seq)
    while True:
        n = int(rng.integers(cfg.min_claims, cfg.max_claims + 1))
        edges = _random_dag(n, cfg, rng)
        labels = _labels(n, edges, cfg, rng)
        if not cfg.require_false or (labels == 0).any():
            break
    d_freq = _separation(cfg.freq_auc)
    d_sig = _separation(cfg.signal_auc)
    freq = FREQ_SCALE * norm.cdf(rng.normal(d_freq * labels, 1.0))
    signal = rng.normal(d_sig * labels, 1.0)
    skeleton = AdgProblem([Claim(v, np.zeros(0), int(labels[v])) for v in range(n)], edges, f"s{i}")
    validate_dag(skeleton)
    struct = structural_feature_matrix(skeleton)
    X = np.column_stack([freq, signal, struct])
    claims = [Claim(v, X[v], int(labels[v]), float(freq[v])) for v in range(n)]
    prob = AdgProblem(claims, edges, f"s{i}")
    validate_dag(prob)
    return prob


def generate_synthetic(cfg: SynthConfig) -> DatasetFile:
    """Deterministic in ``cfg``; each problem draws from its own spawned seed."""
    seeds = np.random.SeedSequence(cfg.seed).spawn(cfg.n_problems)
    return DatasetFile(synthetic_schema(), [_one_problem(i, cfg, s) for i, s in enumerate(seeds)])


# ------------------------------------------------------------------ reports

CSV_COLUMNS = ("method", "alpha", "fold", "coverage", "retention_mean", "retention_fraction",
               "meets_target", "n_test")


def _fmt(v) -> str:
    if isinstance(v, bool):
        return "yes" if v else "no"
    if isinstance(v, float):
        return f"{v:.4f}"
    return str(v)


def report_csv(rows: Sequence[dict], columns: Sequence[str] = CSV_COLUMNS) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for r in rows:
        w.writerow([_fmt(r[c]) for c in columns])
    return buf.getvalue()


def report_summary(rows: Sequence[dict], baseline: str = "cf") -> str:
    """Text table with one line per (alpha, method) aggregate.

    Coverage and retention fraction are percentages with two decimals;
    retention is claims per problem with two decimals; the last column is
    the retention change relative to ``baseline`` at the same alpha.
    """
    agg = [r for r in rows if r["fold"] == "mean"]
    base = {r["alpha"]: r["retention_mean"] for r in agg if r["method"] == baseline}
    lines = [f"{'alpha':>6}  {'method':<20} {'coverage%':>9} {'retention':>9} {'retained%':>9} {'delta%':>8}  target"]
    for r in sorted(agg, key=lambda r: (r["alpha"], r["method"])):
        b = base.get(r["alpha"])
        delta = "" if b in (None, 0) or r["method"] == baseline else f"{100 * (r['retention_mean'] / b - 1):+.1f}"
        lines.append(
            f"{r['alpha']:>6.2f}  {r['method']:<20} {100 * r['coverage']:>9.2f} {r['retention_mean']:>9.2f} "
            f"{100 * r['retention_fraction']:>9.2f} {delta:>8}  {r['meets_target']}")
    return "\n".join(lines) + "\n"


def emit_report(rows: Sequence[dict], path: str | Path, format: str = "csv", **kw) -> None:
    if format == "csv":
        text = report_csv(rows, **kw)
    elif format == "summary":
        text = report_summary(rows, **kw)
    else:
        raise InvalidConfig(f"unknown report format {format!r}")
    try:
        Path(path).write_text(text)
    except OSError as e:
        raise IoError(f"cannot write report to {path}: {e}") from e
