"""Ground-truth manifolds: samplers, evaluation lattices and closed-form oracles.

Supported manifolds are the circle (in R^2), the 2-sphere (in R^3) and the
2-torus embedded as ((R + r cos th) cos ph, (R + r cos th) sin ph, r sin th).
The torus has no closed-form geodesics; its distance oracle is a Dijkstra
search over a dense angular grid with local Euclidean edge weights.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import dijkstra

from .errors import ConfigError, OffManifoldError

_GOLDEN_ANGLE = np.pi * (3.0 - np.sqrt(5.0))


@dataclass(frozen=True)
class ManifoldSpec:
    kind: str  # circle | sphere | torus
    radius: float = 1.0  # circle and sphere
    major_radius: float = 2.0  # torus R
    minor_radius: float = 1.0  # torus r

    def __post_init__(self):
        if self.kind not in ("circle", "sphere", "torus"):
            raise ConfigError(f"unknown manifold kind {self.kind!r}")
        if self.radius <= 0 or self.minor_radius <= 0:
            raise ConfigError("radii must be positive")
        if self.kind == "torus" and self.major_radius <= self.minor_radius:
            raise ConfigError("torus major radius must exceed minor radius")

    @property
    def ambient_dim(self):
        return 2 if self.kind == "circle" else 3

    @property
    def intrinsic_dim(self):
        return 1 if self.kind == "circle" else 2


# Tetrahedral component means used for the mixture-of-VMF sphere dataset.
VMF_MEANS = np.array([
    [1.0, 1.0, 1.0],
    [-1.0, -1.0, 1.0],
    [-1.0, 1.0, -1.0],
    [1.0, -1.0, -1.0],
]) / np.sqrt(3.0)

BVM_MEANS = np.array([
    [0.0, 0.0],
    [np.pi, 0.0],
    [0.0, np.pi],
    [np.pi, np.pi],
])


@dataclass(frozen=True)
class DistributionSpec:
    kind: str  # uniform | vmf_mixture | bvm_mixture
    vmf_means: np.ndarray = field(default_factory=lambda: VMF_MEANS.copy())
    vmf_kappa: float = 5.0
    bvm_means: np.ndarray = field(default_factory=lambda: BVM_MEANS.copy())
    bvm_concentration: float = 1.0

    def __post_init__(self):
        if self.kind not in ("uniform", "vmf_mixture", "bvm_mixture"):
            raise ConfigError(f"unknown distribution kind {self.kind!r}")
        if self.kind == "vmf_mixture":
            norms = np.linalg.norm(np.asarray(self.vmf_means), axis=-1)
            if not np.allclose(norms, 1.0, atol=1e-12):
                raise ConfigError("VMF means must be unit norm")
            if self.vmf_kappa <= 0:
                raise ConfigError("VMF concentration must be positive")
        if self.kind == "bvm_mixture" and self.bvm_concentration <= 0:
            raise ConfigError("BVM concentration must be positive")


def torus_embed(theta, phi, m: ManifoldSpec):
    R, r = m.major_radius, m.minor_radius
    return np.stack([(R + r * np.cos(theta)) * np.cos(phi),
                     (R + r * np.cos(theta)) * np.sin(phi),
                     r * np.sin(theta)], axis=-1)


def sample_vmf(mu, kappa, n, rng):
    """Wood's rejection sampler for the von Mises-Fisher distribution on S^2."""
    mu = np.asarray(mu, dtype=float)
    p = 3
    b = (-2.0 * kappa + np.sqrt(4.0 * kappa**2 + (p - 1) ** 2)) / (p - 1)
    x0 = (1.0 - b) / (1.0 + b)
    c = kappa * x0 + (p - 1) * np.log(1.0 - x0**2)

    ws = np.empty(n)
    got = 0
    while got < n:
        m = n - got
        zz = rng.beta(0.5 * (p - 1), 0.5 * (p - 1), size=m)
        w = (1.0 - (1.0 + b) * zz) / (1.0 - (1.0 - b) * zz)
        u = rng.uniform(size=m)
        accept = kappa * w + (p - 1) * np.log(1.0 - x0 * w) - c >= np.log(u)
        k = int(accept.sum())
        ws[got:got + k] = w[accept]
        got += k

    # uniform directions orthogonal to mu
    v = rng.standard_normal((n, 3))
    v -= np.outer(v @ mu, mu)
    v /= np.linalg.norm(v, axis=1, keepdims=True)
    return ws[:, None] * mu + np.sqrt(np.maximum(1.0 - ws**2, 0.0))[:, None] * v


def sample_dataset(m: ManifoldSpec, dist: DistributionSpec, n, seed):
    """Draw n i.i.d. samples of the requested distribution on the manifold."""
    if n < 1:
        raise ConfigError("need at least one sample")
    rng = np.random.default_rng(seed)
    if m.kind == "circle":
        if dist.kind != "uniform":
            raise ConfigError("only the uniform distribution is supported on the circle")
        ang = rng.uniform(0.0, 2.0 * np.pi, size=n)
        return m.radius * np.stack([np.cos(ang), np.sin(ang)], axis=-1)
    if m.kind == "sphere":
        if dist.kind == "uniform":
            x = rng.standard_normal((n, 3))
            return m.radius * x / np.linalg.norm(x, axis=1, keepdims=True)
        if dist.kind == "vmf_mixture":
            comps = rng.integers(0, len(dist.vmf_means), size=n)
            out = np.empty((n, 3))
            for c in range(len(dist.vmf_means)):
                idx = np.where(comps == c)[0]
                if idx.size:
                    out[idx] = sample_vmf(dist.vmf_means[c], dist.vmf_kappa, idx.size, rng)
            return m.radius * out
        raise ConfigError("BVM mixture is defined on the torus, not the sphere")
    # torus
    if dist.kind == "uniform":
        theta = rng.uniform(0.0, 2.0 * np.pi, size=n)
        phi = rng.uniform(0.0, 2.0 * np.pi, size=n)
    elif dist.kind == "bvm_mixture":
        comps = rng.integers(0, len(dist.bvm_means), size=n)
        means = np.asarray(dist.bvm_means)[comps]
        # zero correlation: the bivariate von Mises factorizes per angle
        theta = rng.vonmises(means[:, 0], dist.bvm_concentration)
        phi = rng.vonmises(means[:, 1], dist.bvm_concentration)
    else:
        raise ConfigError("VMF mixture is defined on the sphere, not the torus")
    return torus_embed(theta, phi, m)


def fibonacci_lattice(n):
    """Near-uniform deterministic point set on the unit 2-sphere."""
    if n < 1:
        raise ConfigError("need at least one lattice point")
    i = np.arange(n)
    z = 1.0 - (2.0 * i + 1.0) / n
    rho = np.sqrt(np.maximum(1.0 - z * z, 0.0))
    ang = _GOLDEN_ANGLE * i
    return np.stack([rho * np.cos(ang), rho * np.sin(ang), z], axis=-1)


def evaluation_points(m: ManifoldSpec, n):
    """Well-spread evaluation points: equal angles (circle), Fibonacci
    lattice (sphere) or a golden-angle lattice on the angle torus.

    The torus lattice pairs a uniform major-angle sequence with
    golden-ratio rotation of the tube angle, a low-discrepancy pattern
    that avoids the aligned rows of a Cartesian grid (those rows create
    many near-ties in a Rips filtration and blur the two torus loops)."""
    if m.kind == "circle":
        ang = 2.0 * np.pi * np.arange(n) / n
        return m.radius * np.stack([np.cos(ang), np.sin(ang)], axis=-1)
    if m.kind == "sphere":
        return m.radius * fibonacci_lattice(n)
    i = np.arange(n)
    golden = (np.sqrt(5.0) - 1.0) / 2.0
    theta = 2.0 * np.pi * np.mod(i * golden, 1.0)
    phi = 2.0 * np.pi * (i + 0.5) / n
    return torus_embed(theta, phi, m)


def _check_on_manifold(m: ManifoldSpec, x, tol=1e-9):
    x = np.asarray(x, dtype=float)
    if m.kind in ("circle", "sphere"):
        err = np.abs(np.linalg.norm(x, axis=-1) - m.radius)
    else:
        R, r = m.major_radius, m.minor_radius
        rho = np.sqrt(x[..., 0] ** 2 + x[..., 1] ** 2)
        err = np.abs((rho - R) ** 2 + x[..., 2] ** 2 - r * r)
    if np.any(err > tol):
        raise OffManifoldError(f"point is off the {m.kind} by {float(np.max(err)):.3g}")
    return x


def true_distance(m: ManifoldSpec, x0, x1):
    """Ground-truth geodesic distance; torus values come from the grid oracle."""
    x0 = _check_on_manifold(m, x0)
    x1 = _check_on_manifold(m, x1)
    if m.kind in ("circle", "sphere"):
        cosang = np.clip(np.sum(x0 * x1, axis=-1) / m.radius**2, -1.0, 1.0)
        return m.radius * np.arccos(cosang)
    oracle = _torus_oracle(m)
    return oracle.distance(np.atleast_2d(x0), np.atleast_2d(x1))


def true_exp(m: ManifoldSpec, x0, v0):
    """Closed-form exponential map (circle and sphere only)."""
    x0 = _check_on_manifold(m, x0)
    v0 = np.asarray(v0, dtype=float)
    if m.kind == "torus":
        raise ConfigError("no closed-form exponential map on the torus")
    R = m.radius
    nv = np.linalg.norm(v0, axis=-1, keepdims=True)
    ang = nv / R
    unit = np.where(nv > 0, v0 / np.where(nv > 0, nv, 1.0), 0.0)
    return np.cos(ang) * x0 + np.sin(ang) * R * unit


def true_log(m: ManifoldSpec, x0, x1):
    """Closed-form logarithmic map; antipodal pairs return a principal value."""
    x0 = _check_on_manifold(m, x0)
    x1 = _check_on_manifold(m, x1)
    if m.kind == "torus":
        raise ConfigError("no closed-form logarithmic map on the torus")
    R = m.radius
    cosang = np.clip(np.sum(x0 * x1, axis=-1) / R**2, -1.0, 1.0)
    ang = np.arccos(cosang)
    perp = x1 - (np.sum(x0 * x1, axis=-1, keepdims=True) / R**2) * x0
    n = np.linalg.norm(perp, axis=-1, keepdims=True)
    if np.any(n < 1e-12) and np.any(ang > 1e-6):
        # antipodal: direction is not unique, pick a deterministic orthogonal
        perp = _any_orthogonal(x0)
        n = np.linalg.norm(perp, axis=-1, keepdims=True)
    unit = np.where(n > 1e-300, perp / np.where(n > 0, n, 1.0), 0.0)
    return (R * ang)[..., None] * unit


def _any_orthogonal(x):
    x = np.atleast_2d(x)
    out = np.zeros_like(x)
    for i, xi in enumerate(x):
        e = np.zeros(x.shape[-1])
        e[int(np.argmin(np.abs(xi)))] = 1.0
        v = e - (e @ xi) / (xi @ xi) * xi
        out[i] = v / np.linalg.norm(v)
    return out.reshape(np.shape(x))


class TorusDistanceOracle:
    """Graph-geodesic distances on a dense angular grid of the torus."""

    def __init__(self, m: ManifoldSpec, grid=512):
        self.m = m
        self.grid = grid
        ang = 2.0 * np.pi * np.arange(grid) / grid
        theta, phi = np.meshgrid(ang, ang, indexing="ij")
        self.points = torus_embed(theta.ravel(), phi.ravel(), m)

        n = grid
        idx = np.arange(n * n).reshape(n, n)
        rows, cols = [], []
        # 8-connected neighborhood with wraparound
        for dt, dp in ((0, 1), (1, 0), (1, 1), (1, -1)):
            nb = np.roll(np.roll(idx, -dt, axis=0), -dp, axis=1)
            rows.append(idx.ravel())
            cols.append(nb.ravel())
        rows = np.concatenate(rows)
        cols = np.concatenate(cols)
        w = np.linalg.norm(self.points[rows] - self.points[cols], axis=1)
        graph = coo_matrix((np.concatenate([w, w]),
                            (np.concatenate([rows, cols]), np.concatenate([cols, rows]))),
                           shape=(n * n, n * n))
        self.graph = graph.tocsr()

    def _snap(self, x):
        x = np.atleast_2d(x)
        R, r = self.m.major_radius, self.m.minor_radius
        phi = np.arctan2(x[:, 1], x[:, 0])
        rho = np.sqrt(x[:, 0] ** 2 + x[:, 1] ** 2)
        theta = np.arctan2(x[:, 2] / r, (rho - R) / r)
        ti = np.round(theta / (2 * np.pi) * self.grid).astype(int) % self.grid
        pi_ = np.round(phi / (2 * np.pi) * self.grid).astype(int) % self.grid
        return ti * self.grid + pi_

    def distance(self, x0, x1):
        i0 = self._snap(x0)
        i1 = self._snap(x1)
        out = np.empty(len(i0))
        uniq = np.unique(i0)
        dm = dijkstra(self.graph, indices=uniq)
        lookup = {int(s): k for k, s in enumerate(uniq)}
        for j in range(len(i0)):
            out[j] = dm[lookup[int(i0[j])], i1[j]]
        return out if out.size > 1 else float(out[0])


_torus_oracles = {}


def _torus_oracle(m: ManifoldSpec, grid=512):
    key = (m.major_radius, m.minor_radius, grid)
    if key not in _torus_oracles:
        _torus_oracles[key] = TorusDistanceOracle(m, grid)
    return _torus_oracles[key]
