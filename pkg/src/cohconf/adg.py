"""Claim dependency graphs and the coherent-factuality predicate.

Claims are dense 0-based integers within a problem. Edges point from a
premise (parent) to the claim that depends on it (child).
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .errors import CycleDetected, InvalidEdgeEndpoint, UnknownClaimId, ValidationError


@dataclass(frozen=True)
class FeatureSchema:
    names: tuple[str, ...]

    def __post_init__(self):
        names = tuple(self.names)
        object.__setattr__(self, "names", names)
        if any(not n for n in names):
            raise ValueError("feature names must be non-empty")
        if len(set(names)) != len(names):
            raise ValueError("feature names must be unique")

    def __len__(self) -> int:
        return len(self.names)

    def index(self, name: str) -> int:
        return self.names.index(name)


@dataclass
class Claim:
    id: int
    features: np.ndarray
    label: int
    freq: float | None = None

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=float)
        if self.label not in (0, 1):
            raise ValueError(f"claim {self.id}: label must be 0 or 1, got {self.label!r}")
        if self.freq is not None and self.freq < 0:
            raise ValueError(f"claim {self.id}: freq must be non-negative")


@dataclass
class AdgProblem:
    """One reasoning instance: a DAG of claims with features and labels."""

    claims: list[Claim]
    edges: list[tuple[int, int]]
    id: str = ""
    _topo: tuple[int, ...] | None = field(default=None, init=False, repr=False, compare=False)
    _anc: np.ndarray | None = field(default=None, init=False, repr=False, compare=False)

    def __post_init__(self):
        self.edges = [(int(a), int(b)) for a, b in self.edges]

    @property
    def n(self) -> int:
        return len(self.claims)

    @property
    def labels(self) -> np.ndarray:
        return np.array([c.label for c in self.claims], dtype=int)

    @property
    def features(self) -> np.ndarray:
        if not self.claims:
            return np.zeros((0, 0))
        return np.vstack([c.features for c in self.claims])

    @property
    def freqs(self) -> np.ndarray | None:
        if any(c.freq is None for c in self.claims):
            return None
        return np.array([c.freq for c in self.claims], dtype=float)

    def parents(self, v: int) -> list[int]:
        return [a for a, b in self.edges if b == v]

    def children(self, v: int) -> list[int]:
        return [b for a, b in self.edges if a == v]

    @property
    def topological_order(self) -> tuple[int, ...]:
        if self._topo is None:
            validate_dag(self)
        return self._topo

    @property
    def ancestor_matrix(self) -> np.ndarray:
        """Boolean matrix ``A`` with ``A[v, u]`` true iff ``u`` is an ancestor of ``v``."""
        if self._anc is None:
            order = self.topological_order
            anc = np.zeros((self.n, self.n), dtype=bool)
            parents = [[] for _ in range(self.n)]
            for a, b in self.edges:
                parents[b].append(a)
            for v in order:
                for u in parents[v]:
                    anc[v, u] = True
                    anc[v] |= anc[u]
            anc.setflags(write=False)
            self._anc = anc
        return self._anc


def validate_dag(problem: AdgProblem) -> None:
    """Check ids and acyclicity; cache a topological order on the problem."""
    n = problem.n
    for i, c in enumerate(problem.claims):
        if c.id != i:
            raise ValidationError(problem.id, f"claim at position {i} has id {c.id}; ids must be dense and 0-based")
    seen = set()
    for a, b in problem.edges:
        if not (0 <= a < n and 0 <= b < n):
            raise InvalidEdgeEndpoint(f"problem {problem.id!r}: edge ({a}, {b}) references an unknown claim")
        if (a, b) in seen:
            raise ValidationError(problem.id, f"duplicate edge ({a}, {b})")
        seen.add((a, b))

    indeg = [0] * n
    children = [[] for _ in range(n)]
    for a, b in problem.edges:
        indeg[b] += 1
        children[a].append(b)
    queue = deque(v for v in range(n) if indeg[v] == 0)
    order = []
    while queue:
        v = queue.popleft()
        order.append(v)
        for w in children[v]:
            indeg[w] -= 1
            if indeg[w] == 0:
                queue.append(w)
    if len(order) < n:
        # Every leftover node has a leftover parent, so walking parents must revisit a node.
        left = {v for v in range(n) if indeg[v] > 0}
        parent_in_left = {b: a for a, b in problem.edges if a in left and b in left}
        v = min(left)
        visited = []
        while v not in visited:
            visited.append(v)
            v = parent_in_left[v]
        raise CycleDetected(v, problem.id)
    problem._topo = tuple(order)


def _check_id(problem: AdgProblem, v: int) -> None:
    if not (0 <= v < problem.n):
        raise UnknownClaimId(f"problem {problem.id!r} has no claim {v}")


def ancestors(problem: AdgProblem, v: int) -> set[int]:
    _check_id(problem, v)
    return set(np.flatnonzero(problem.ancestor_matrix[v]).tolist())


def descendants(problem: AdgProblem, v: int) -> set[int]:
    _check_id(problem, v)
    return set(np.flatnonzero(problem.ancestor_matrix[:, v]).tolist())


def is_coherently_factual(problem: AdgProblem, retained: Iterable[int]) -> bool:
    """True iff every retained claim is true and its ancestors are retained and true."""
    retained = set(retained)
    for v in retained:
        _check_id(problem, v)
    labels = problem.labels
    anc = problem.ancestor_matrix
    for v in retained:
        if labels[v] != 1:
            return False
        for u in np.flatnonzero(anc[v]):
            if u not in retained or labels[u] != 1:
                return False
    return True


def is_factual(problem: AdgProblem, retained: Iterable[int]) -> bool:
    """Claim-wise factuality, ignoring dependencies (independent filtering)."""
    retained = list(retained)
    for v in retained:
        _check_id(problem, v)
    labels = problem.labels
    return all(labels[v] == 1 for v in retained)


def make_problem(
    n: int,
    edges: Sequence[tuple[int, int]],
    labels: Sequence[int] | None = None,
    features: np.ndarray | None = None,
    freqs: Sequence[float] | None = None,
    id: str = "",
) -> AdgProblem:
    """Convenience constructor used by tests and the synthetic generator."""
    labels = [1] * n if labels is None else list(labels)
    if features is None:
        features = np.zeros((n, 0))
    claims = [
        Claim(i, features[i], int(labels[i]), None if freqs is None else float(freqs[i]))
        for i in range(n)
    ]
    prob = AdgProblem(claims, list(edges), id)
    validate_dag(prob)
    return prob
