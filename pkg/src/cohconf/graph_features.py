"""Per-claim structural graph metrics, computed natively.

Feature keys follow the ``nx_*`` naming used by NetworkX-derived datasets so
that externally extracted features and synthetic ones interoperate.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, asdict

import numpy as np

from .adg import AdgProblem

PAGERANK_DAMPING = 0.85
PAGERANK_TOL = 1e-10

FEATURE_KEYS = {
    "in_degree": "nx_in_degree",
    "out_degree": "nx_out_degree",
    "pagerank": "nx_pagerank",
    "betweenness": "nx_betweenness",
    "closeness": "nx_closeness",
    "clustering": "nx_clustering",
    "is_source": "nx_is_source",
    "is_sink": "nx_is_sink",
    "reachability": "nx_reachability",
    "depth_from_sources": "nx_depth_from_sources",
}
STRUCTURAL_FEATURE_NAMES = tuple(FEATURE_KEYS.values())


@dataclass(frozen=True)
class StructuralFeatures:
    in_degree: int
    out_degree: int
    is_source: int
    is_sink: int
    reachability: int
    depth_from_sources: int
    pagerank: float
    betweenness: float
    closeness: float
    clustering: float

    def as_named(self) -> dict[str, float]:
        return {FEATURE_KEYS[k]: float(v) for k, v in asdict(self).items()}


def _adjacency(problem: AdgProblem):
    n = problem.n
    succ = [[] for _ in range(n)]
    pred = [[] for _ in range(n)]
    for a, b in problem.edges:
        succ[a].append(b)
        pred[b].append(a)
    return succ, pred


def pagerank(problem: AdgProblem, damping: float = PAGERANK_DAMPING, tol: float = PAGERANK_TOL,
             max_iter: int = 10_000) -> np.ndarray:
    """Power iteration with uniform teleport; dangling mass is spread uniformly."""
    n = problem.n
    if n == 0:
        return np.zeros(0)
    succ, _ = _adjacency(problem)
    outdeg = np.array([len(s) for s in succ], dtype=float)
    dangling = outdeg == 0
    x = np.full(n, 1.0 / n)
    for _ in range(max_iter):
        nxt = np.zeros(n)
        for v in range(n):
            if succ[v]:
                nxt[succ[v]] += x[v] / outdeg[v]
        nxt = damping * (nxt + x[dangling].sum() / n) + (1.0 - damping) / n
        resid = np.abs(nxt - x).sum()
        x = nxt
        if resid < tol:
            break
    return x / x.sum()


def betweenness(problem: AdgProblem) -> np.ndarray:
    """Brandes' algorithm on the unweighted directed graph, scaled by 1/((n-1)(n-2))."""
    n = problem.n
    succ, _ = _adjacency(problem)
    bc = np.zeros(n)
    for s in range(n):
        stack = []
        preds = [[] for _ in range(n)]
        sigma = np.zeros(n)
        sigma[s] = 1.0
        dist = [-1] * n
        dist[s] = 0
        queue = deque([s])
        while queue:
            v = queue.popleft()
            stack.append(v)
            for w in succ[v]:
                if dist[w] < 0:
                    dist[w] = dist[v] + 1
                    queue.append(w)
                if dist[w] == dist[v] + 1:
                    sigma[w] += sigma[v]
                    preds[w].append(v)
        delta = np.zeros(n)
        while stack:
            w = stack.pop()
            for v in preds[w]:
                delta[v] += sigma[v] / sigma[w] * (1.0 + delta[w])
            if w != s:
                bc[w] += delta[w]
    if n > 2:
        bc /= (n - 1) * (n - 2)
    return bc


def closeness(problem: AdgProblem) -> np.ndarray:
    """Harmonic closeness: sum of ``1 / d(u, v)`` over claims ``u`` that reach ``v``.

    Distances follow edge direction, so sources score zero. The sum is not
    normalised, matching NetworkX's ``harmonic_centrality``.
    """
    n = problem.n
    _, pred = _adjacency(problem)
    out = np.zeros(n)
    if n <= 1:
        return out
    for v in range(n):
        dist = {v: 0}
        queue = deque([v])
        while queue:
            u = queue.popleft()
            for p in pred[u]:
                if p not in dist:
                    dist[p] = dist[u] + 1
                    queue.append(p)
        out[v] = sum(1.0 / d for d in dist.values() if d > 0)
    return out


def clustering(problem: AdgProblem) -> np.ndarray:
    """Directed clustering coefficient (Fagiolo's triangle count)."""
    n = problem.n
    succ, pred = _adjacency(problem)
    succ_s = [set(s) for s in succ]
    pred_s = [set(p) for p in pred]
    out = np.zeros(n)
    for i in range(n):
        ip, is_ = pred_s[i] - {i}, succ_s[i] - {i}
        tri = 0
        for j in ip:
            jp, js = pred_s[j] - {j}, succ_s[j] - {j}
            tri += len(ip & jp) + len(ip & js) + len(is_ & jp) + len(is_ & js)
        for j in is_:
            jp, js = pred_s[j] - {j}, succ_s[j] - {j}
            tri += len(ip & jp) + len(ip & js) + len(is_ & jp) + len(is_ & js)
        dtot = len(ip) + len(is_)
        dbi = len(ip & is_)
        denom = 2 * (dtot * (dtot - 1) - 2 * dbi)
        if tri and denom:
            out[i] = tri / denom
    return out


def depth_from_sources(problem: AdgProblem) -> np.ndarray:
    """Longest path length from any source to each claim."""
    _, pred = _adjacency(problem)
    depth = np.zeros(problem.n, dtype=int)
    for v in problem.topological_order:
        if pred[v]:
            depth[v] = max(depth[p] for p in pred[v]) + 1
    return depth


def compute_structural_features(problem: AdgProblem) -> dict[int, StructuralFeatures]:
    succ, pred = _adjacency(problem)
    anc = problem.ancestor_matrix
    reach = anc.sum(axis=0)
    pr = pagerank(problem)
    bc = betweenness(problem)
    cl = closeness(problem)
    cc = clustering(problem)
    depth = depth_from_sources(problem)
    return {
        v: StructuralFeatures(
            in_degree=len(pred[v]),
            out_degree=len(succ[v]),
            is_source=int(not pred[v]),
            is_sink=int(not succ[v]),
            reachability=int(reach[v]),
            depth_from_sources=int(depth[v]),
            pagerank=float(pr[v]),
            betweenness=float(bc[v]),
            closeness=float(cl[v]),
            clustering=float(cc[v]),
        )
        for v in range(problem.n)
    }


def structural_feature_matrix(problem: AdgProblem) -> np.ndarray:
    """Rows per claim, columns in ``STRUCTURAL_FEATURE_NAMES`` order."""
    feats = compute_structural_features(problem)
    return np.array(
        [[feats[v].as_named()[k] for k in STRUCTURAL_FEATURE_NAMES] for v in range(problem.n)],
        dtype=float,
    ).reshape(problem.n, len(STRUCTURAL_FEATURE_NAMES))
