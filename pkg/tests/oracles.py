"""Slow independent oracles used by the test suite."""

from collections import deque

import mpmath
import numpy as np


def log_moment_by_integration(q, sigma, lam, dps=40):
    """log E_{z~N(0, sigma^2)}[(mu(z)/mu0(z))^(lam+1)] by adaptive quadrature.

    mu0 = N(0, sigma^2), mu = (1-q) mu0 + q N(1, sigma^2).
    """
    with mpmath.workdps(dps):
        q, sigma = mpmath.mpf(q), mpmath.mpf(sigma)
        s2 = sigma ** 2

        def integrand(z):
            ratio = (1 - q) + q * mpmath.exp((2 * z - 1) / (2 * s2))
            density = mpmath.exp(-z * z / (2 * s2)) / mpmath.sqrt(2 * mpmath.pi * s2)
            return density * ratio ** (lam + 1)

        # the integrand peaks near z = lam + 1 for large moments; split there
        pts = [-mpmath.inf, -10 * sigma, 0, 0.5, lam + 1, (lam + 1) + 20 * sigma, mpmath.inf]
        return float(mpmath.log(mpmath.quad(integrand, sorted(set(pts)))))


def dense_adjacency(g):
    a = np.zeros((g.num_nodes, g.num_nodes), dtype=np.int64)
    for u, v in g.edges.tolist():
        a[u, v] = a[v, u] = 1
    return a


def triangles_by_cube(g):
    a = dense_adjacency(g)
    return int(np.trace(a @ a @ a)) // 6


def all_pairs_bfs(g):
    """Distances from every source by plain BFS; -1 for unreachable."""
    adj = [[] for _ in range(g.num_nodes)]
    for u, v in g.edges.tolist():
        adj[u].append(v)
        adj[v].append(u)
    dist = -np.ones((g.num_nodes, g.num_nodes), dtype=np.int64)
    for s in range(g.num_nodes):
        dist[s, s] = 0
        queue = deque([s])
        while queue:
            u = queue.popleft()
            for v in adj[u]:
                if dist[s, v] < 0:
                    dist[s, v] = dist[s, u] + 1
                    queue.append(v)
    return dist


def cpl_by_bfs(g):
    d = all_pairs_bfs(g)
    iu = np.triu_indices(g.num_nodes, 1)
    vals = d[iu]
    vals = vals[vals > 0]
    return vals.sum() / len(vals)


def pearson_assortativity(g):
    deg = dense_adjacency(g).sum(1)
    xs, ys = [], []
    for u, v in g.edges.tolist():
        xs += [deg[u], deg[v]]
        ys += [deg[v], deg[u]]
    xs, ys = np.array(xs, float), np.array(ys, float)
    if xs.std() == 0:
        return None
    return float(np.corrcoef(xs, ys)[0, 1])


def transitivity_by_enumeration(g):
    a = dense_adjacency(g)
    n = g.num_nodes
    closed = wedges = 0
    for center in range(n):
        nb = np.flatnonzero(a[center])
        for i in range(len(nb)):
            for j in range(i + 1, len(nb)):
                wedges += 1
                closed += a[nb[i], nb[j]]
    return closed / wedges if wedges else 0.0


def auc_all_pairs(pos, neg):
    total = 0.0
    for p in pos:
        for q in neg:
            total += 1.0 if p > q else 0.5 if p == q else 0.0
    return total / (len(pos) * len(neg))
