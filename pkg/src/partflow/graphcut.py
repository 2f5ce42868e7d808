"""Multi-label Potts energy minimization by alpha expansion over max-flow.

Energies have the form  E(l) = sum_i U[i, l_i] + sum_(i,j) w_ij [l_i != l_j]
with nonnegative edge weights, so every expansion move is a submodular
binary problem solved exactly by one min cut. The move graph uses the
standard pairwise reduction (no auxiliary nodes are needed for Potts).
"""

from __future__ import annotations

import numpy as np

INF_CAP = 1e18
_RESIDUAL_EPS = 1e-11


class MaxFlow:
    """Dinic max flow on a small dense-ish graph with float capacities."""

    def __init__(self, n_nodes):
        self.n = n_nodes
        self.head = [[] for _ in range(n_nodes)]
        self.to = []
        self.cap = []

    def add_edge(self, u, v, cap_uv, cap_vu=0.0):
        self.head[u].append(len(self.to))
        self.to.append(v)
        self.cap.append(float(cap_uv))
        self.head[v].append(len(self.to))
        self.to.append(u)
        self.cap.append(float(cap_vu))

    def _bfs(self, s, t):
        level = [-1] * self.n
        level[s] = 0
        queue = [s]
        for u in queue:
            for e in self.head[u]:
                v = self.to[e]
                if level[v] < 0 and self.cap[e] > _RESIDUAL_EPS:
                    level[v] = level[u] + 1
                    queue.append(v)
        self.level = level
        return level[t] >= 0

    def _augment(self, s, t, it):
        """Find one augmenting path in the level graph (iterative DFS)."""
        path = []
        u = s
        while True:
            if u == t:
                pushed = min(self.cap[e] for e in path)
                for e in path:
                    self.cap[e] -= pushed
                    self.cap[e ^ 1] += pushed
                return pushed
            advanced = False
            while it[u] < len(self.head[u]):
                e = self.head[u][it[u]]
                v = self.to[e]
                if self.cap[e] > _RESIDUAL_EPS and self.level[v] == self.level[u] + 1:
                    path.append(e)
                    u = v
                    advanced = True
                    break
                it[u] += 1
            if advanced:
                continue
            if u == s:
                return 0.0
            # dead end: retreat and skip the edge that led here
            self.level[u] = -1
            e = path.pop()
            u = self.to[e ^ 1]

    def max_flow(self, s, t):
        total = 0.0
        while self._bfs(s, t):
            it = [0] * self.n
            while True:
                pushed = self._augment(s, t, it)
                if pushed <= 0:
                    break
                total += pushed
        return total

    def source_side(self, s):
        """Nodes reachable from s in the residual graph after max_flow."""
        seen = np.zeros(self.n, dtype=bool)
        seen[s] = True
        queue = [s]
        for u in queue:
            for e in self.head[u]:
                v = self.to[e]
                if not seen[v] and self.cap[e] > _RESIDUAL_EPS:
                    seen[v] = True
                    queue.append(v)
        return seen


def potts_energy(unary, edges, weights, labels):
    unary = np.asarray(unary)
    labels = np.asarray(labels)
    e = float(unary[np.arange(len(labels)), labels].sum())
    if len(edges):
        i, j = edges[:, 0], edges[:, 1]
        e += float(weights[labels[i] != labels[j]].sum())
    return e


def _expansion_move(unary, edges, weights, labels, alpha):
    """One alpha-expansion move; returns the improved labeling."""
    n = unary.shape[0]
    s, t = n, n + 1
    g = MaxFlow(n + 2)
    for i in range(n):
        # sink side of the cut takes label alpha
        g.add_edge(s, i, unary[i, alpha])
        if labels[i] == alpha:
            g.add_edge(i, t, INF_CAP)
        else:
            g.add_edge(i, t, unary[i, labels[i]])
    for (i, j), w in zip(edges, weights):
        if w <= 0:
            continue
        if labels[i] == labels[j]:
            g.add_edge(i, j, w, w)
        else:
            # asymmetric Potts reduction: extra keep-cost on j plus a
            # directed edge charging the (i keeps, j switches) case
            g.add_edge(j, t, w)
            g.add_edge(i, j, w)
    g.max_flow(s, t)
    keep = g.source_side(s)[:n]
    out = labels.copy()
    out[~keep] = alpha
    return out


def alpha_expansion(unary, edges, weights, init_labels, max_cycles=10):
    """Minimize the Potts energy; never returns a labeling worse than init.

    unary: (N, L) nonnegative costs; edges: (E, 2) int pairs with (E,)
    nonnegative weights; init_labels: (N,) ints in [0, L).
    """
    unary = np.asarray(unary, dtype=np.float64)
    edges = np.asarray(edges, dtype=np.int64).reshape(-1, 2)
    weights = np.asarray(weights, dtype=np.float64)
    labels = np.asarray(init_labels, dtype=np.int64).copy()
    n_labels = unary.shape[1]
    best_e = potts_energy(unary, edges, weights, labels)
    for _ in range(max_cycles):
        improved = False
        for alpha in range(n_labels):
            cand = _expansion_move(unary, edges, weights, labels, alpha)
            e = potts_energy(unary, edges, weights, cand)
            if e < best_e - 1e-12:
                labels, best_e, improved = cand, e, True
        if not improved:
            break
    return labels, best_e
