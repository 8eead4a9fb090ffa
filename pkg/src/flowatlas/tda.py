"""Vietoris-Rips persistent homology from a distance matrix.

H0 comes from a union-find sweep over the sorted edges.  H1 and H2 come
from column reduction of the boundary matrix, with columns stored as
python integers (bitmasks over the sorted face order) and the clearing
optimization applied between dimensions.  Sizes are guarded: the clique
complex grows as n^(dim+2), so higher dimensions require subsampling.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError

MAX_POINTS_H1 = 512
MAX_POINTS_H2 = 64

_SVG_COLORS = {0: "#1f77b4", 1: "#ff7f0e", 2: "#2ca02c"}


@dataclass(frozen=True)
class Feature:
    dim: int
    birth: float
    death: float  # inf for essential features

    @property
    def persistence(self):
        return self.death - self.birth


@dataclass
class PersistenceDiagram:
    features: list
    max_dim: int
    max_radius: float

    def in_dim(self, dim):
        return [f for f in self.features if f.dim == dim]

    def to_csv(self):
        lines = ["dim,birth,death",
                 f"# max_dim {self.max_dim} max_radius {self.max_radius:.10g}"]
        for f in self.features:
            death = "inf" if np.isinf(f.death) else f"{f.death:.10g}"
            lines.append(f"{f.dim},{f.birth:.10g},{death}")
        return "\n".join(lines) + "\n"

    def to_svg(self, size=360):
        finite = [f.death for f in self.features if np.isfinite(f.death)]
        births = [f.birth for f in self.features]
        top = max(finite + births + [1.0]) * 1.1
        pad = 34

        def sx(v):
            return pad + v / top * (size - 2 * pad)

        def sy(v):
            return size - pad - v / top * (size - 2 * pad)

        parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{size}" '
                 f'height="{size}" viewBox="0 0 {size} {size}">',
                 f'<rect width="{size}" height="{size}" fill="white"/>',
                 f'<line x1="{sx(0)}" y1="{sy(0)}" x2="{sx(top)}" y2="{sy(top)}" '
                 'stroke="#999" stroke-dasharray="4"/>',
                 f'<line x1="{sx(0)}" y1="{sy(0)}" x2="{sx(top)}" y2="{sy(0)}" stroke="black"/>',
                 f'<line x1="{sx(0)}" y1="{sy(0)}" x2="{sx(0)}" y2="{sy(top)}" stroke="black"/>']
        for f in self.features:
            color = _SVG_COLORS.get(f.dim, "#555")
            death = top if np.isinf(f.death) else f.death
            marker = 'stroke-width="2" stroke' if np.isinf(f.death) else 'fill'
            parts.append(f'<circle cx="{sx(f.birth):.2f}" cy="{sy(death):.2f}" '
                         f'r="4" fill="none" {marker}="{color}"/>'
                         if np.isinf(f.death) else
                         f'<circle cx="{sx(f.birth):.2f}" cy="{sy(death):.2f}" '
                         f'r="3.5" fill="{color}"/>')
        parts.append("</svg>")
        return "\n".join(parts) + "\n"


class _UnionFind:
    def __init__(self, n):
        self.parent = list(range(n))

    def find(self, a):
        while self.parent[a] != a:
            self.parent[a] = self.parent[self.parent[a]]
            a = self.parent[a]
        return a

    def union(self, a, b):
        ra, rb = self.find(a), self.find(b)
        if ra == rb:
            return False
        self.parent[rb] = ra
        return True


def _validate_distances(D):
    D = np.asarray(D, dtype=np.float64)
    if D.ndim != 2 or D.shape[0] != D.shape[1]:
        raise ConfigError("distance matrix must be square")
    if not np.allclose(D, D.T, atol=1e-10):
        raise ConfigError("distance matrix must be symmetric")
    if np.any(D < 0) or np.any(np.abs(np.diag(D)) > 1e-12):
        raise ConfigError("distances must be nonnegative with zero diagonal")
    return 0.5 * (D + D.T)


def enclosing_radius(D):
    """min over points of the max distance; standard truncation radius."""
    return float(np.min(np.max(D, axis=1)))


def _sorted_edges(D, max_radius):
    n = len(D)
    i, j = np.triu_indices(n, k=1)
    vals = D[i, j]
    keep = vals <= max_radius
    i, j, vals = i[keep], j[keep], vals[keep]
    order = np.lexsort((j, i, vals))
    return i[order], j[order], vals[order]


def _triangles(D, max_radius):
    n = len(D)
    within = D <= max_radius
    cond = within[:, :, None] & within[:, None, :] & within[None, :, :]
    i, j, k = np.nonzero(cond)
    keep = (i < j) & (j < k)
    i, j, k = i[keep], j[keep], k[keep]
    vals = np.maximum(np.maximum(D[i, j], D[i, k]), D[j, k])
    order = np.lexsort((k, j, i, vals))
    return np.stack([i[order], j[order], k[order]], axis=1), vals[order]


def _tetrahedra(D, max_radius):
    n = len(D)
    within = D <= max_radius
    quads = []
    vals = []
    idx = np.arange(n)
    for a in range(n):
        nbr = idx[(idx > a) & within[a]]
        for bi, b in enumerate(nbr):
            cd = nbr[bi + 1:][within[b, nbr[bi + 1:]]]
            for ci, c in enumerate(cd):
                ds = cd[ci + 1:][within[c, cd[ci + 1:]]]
                for d in ds:
                    quads.append((a, b, c, d))
                    vals.append(max(D[a, b], D[a, c], D[a, d],
                                    D[b, c], D[b, d], D[c, d]))
    if not quads:
        return np.empty((0, 4), dtype=int), np.empty(0)
    quads = np.array(quads)
    vals = np.array(vals)
    order = np.lexsort((quads[:, 3], quads[:, 2], quads[:, 1], quads[:, 0], vals))
    return quads[order], vals[order]


def _reduce(columns):
    """Standard persistence column reduction over Z/2 bitmask columns.

    Returns (pairs, zero_columns): pairs maps pivot row -> column index.
    """
    pivot = {}
    zeros = []
    for ci, col in enumerate(columns):
        while col:
            low = col.bit_length() - 1
            other = pivot.get(low)
            if other is None:
                pivot[low] = (ci, col)
                break
            col ^= other[1]
        else:
            zeros.append(ci)
    return {low: ci for low, (ci, _) in pivot.items()}, zeros


def rips_persistence(D, max_dim=1, max_radius=None):
    """Persistence diagram of the Rips filtration of a distance matrix."""
    D = _validate_distances(D)
    n = len(D)
    if max_dim not in (1, 2):
        raise ConfigError("max_dim must be 1 or 2")
    limit = MAX_POINTS_H1 if max_dim == 1 else MAX_POINTS_H2
    if n > limit:
        raise ConfigError(f"{n} points exceeds the max_dim={max_dim} guard of "
                          f"{limit}; subsample the input")
    if max_radius is None:
        max_radius = enclosing_radius(D)

    features = []

    ei, ej, evals = _sorted_edges(D, max_radius)
    uf = _UnionFind(n)
    creator_edge = np.zeros(len(evals), dtype=bool)
    for e in range(len(evals)):
        if uf.union(int(ei[e]), int(ej[e])):
            if evals[e] > 0:
                features.append(Feature(0, 0.0, float(evals[e])))
        else:
            creator_edge[e] = True
    n_components = len({uf.find(v) for v in range(n)})
    features.extend(Feature(0, 0.0, np.inf) for _ in range(n_components))

    edge_pos = {(int(ei[e]), int(ej[e])): e for e in range(len(evals))}
    tris, tvals = _triangles(D, max_radius)

    cleared = set()
    tri_pairs = {}
    if max_dim == 2:
        tri_pos = {tuple(t): k for k, t in enumerate(map(tuple, tris))}
        tets, qvals = _tetrahedra(D, max_radius)
        cols3 = []
        for (a, b, c, d) in tets:
            mask = 0
            for face in ((a, b, c), (a, b, d), (a, c, d), (b, c, d)):
                mask |= 1 << tri_pos[face]
            cols3.append(mask)
        pivot3, zero3 = _reduce(cols3)
        for low, ci in pivot3.items():
            if qvals[ci] > tvals[low]:
                features.append(Feature(2, float(tvals[low]), float(qvals[ci])))
            cleared.add(low)  # creator triangles; their d2 columns reduce to 0

    cols2 = []
    col_tri = []
    for k, (a, b, c) in enumerate(tris):
        if k in cleared:
            continue
        mask = (1 << edge_pos[(int(a), int(b))]) | (1 << edge_pos[(int(a), int(c))]) \
            | (1 << edge_pos[(int(b), int(c))])
        cols2.append(mask)
        col_tri.append(k)
    pivot2, zero2 = _reduce(cols2)
    paired_edges = set()
    for low, ci in pivot2.items():
        paired_edges.add(low)
        death = tvals[col_tri[ci]]
        if death > evals[low]:
            features.append(Feature(1, float(evals[low]), float(death)))
    for e in np.nonzero(creator_edge)[0]:
        if int(e) not in paired_edges:
            features.append(Feature(1, float(evals[e]), np.inf))

    if max_dim == 2:
        paired_tris = set(pivot3)
        for ci in zero2:
            k = col_tri[ci]
            if k not in paired_tris:
                features.append(Feature(2, float(tvals[k]), np.inf))

    features.sort(key=lambda f: (f.dim, f.birth, f.death))
    return PersistenceDiagram(features, max_dim, float(max_radius))


def diagram_summary(diag, dim):
    """Features of one dimension ranked by life span, essential ones first."""
    feats = diag.in_dim(dim)
    return sorted(feats, key=lambda f: (bool(np.isfinite(f.death)),
                                        -float(f.persistence) if np.isfinite(f.death)
                                        else float(f.birth)))
