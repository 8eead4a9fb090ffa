import itertools

import numpy as np
import pytest

from flowatlas import manifolds as mf
from flowatlas import tda
from flowatlas.errors import ConfigError


def brute_force_diagram(D, max_dim, max_radius):
    """Global boundary-matrix reduction with no shortcuts; oracle for small n."""
    n = len(D)
    simplices = [((v,), 0.0) for v in range(n)]
    for k in range(2, max_dim + 3):
        for combo in itertools.combinations(range(n), k):
            val = max(D[a][b] for a, b in itertools.combinations(combo, 2))
            if val <= max_radius:
                simplices.append((combo, val))
    simplices.sort(key=lambda s: (s[1], len(s[0]), s[0]))
    index = {s: k for k, (s, _) in enumerate(simplices)}

    columns = []
    for simplex, _ in simplices:
        mask = 0
        if len(simplex) > 1:
            for face in itertools.combinations(simplex, len(simplex) - 1):
                mask |= 1 << index[face]
        columns.append(mask)

    pivot = {}
    zero = set()
    for ci in range(len(columns)):
        col = columns[ci]
        while col:
            low = col.bit_length() - 1
            if low in pivot:
                col ^= columns[pivot[low]]
            else:
                pivot[low] = ci
                columns[ci] = col
                break
        else:
            zero.add(ci)

    features = []
    paired = set(pivot) | set(pivot.values())
    for low, ci in pivot.items():
        dim = len(simplices[low][0]) - 1
        birth, death = simplices[low][1], simplices[ci][1]
        if dim <= max_dim and death > birth:
            features.append((dim, round(birth, 9), round(death, 9)))
    for ci in zero - set(pivot):
        dim = len(simplices[ci][0]) - 1
        if dim <= max_dim:
            features.append((dim, round(simplices[ci][1], 9), np.inf))
    return sorted(features)


def as_tuples(diag):
    return sorted((f.dim, round(f.birth, 9),
                   np.inf if np.isinf(f.death) else round(f.death, 9))
                  for f in diag.features)


def test_two_points():
    D = np.array([[0.0, 0.7], [0.7, 0.0]])
    diag = tda.rips_persistence(D, max_dim=1, max_radius=1.0)
    assert as_tuples(diag) == [(0, 0.0, 0.7), (0, 0.0, np.inf)]


def test_unit_square_loop():
    pts = np.array([[0.0, 0], [1, 0], [1, 1], [0, 1]])
    D = np.linalg.norm(pts[:, None] - pts[None], axis=-1)
    diag = tda.rips_persistence(D, max_dim=1)
    h1 = diag.in_dim(1)
    assert len(h1) == 1
    assert np.isclose(h1[0].birth, 1.0)
    assert np.isclose(h1[0].death, np.sqrt(2))
    h0 = diag.in_dim(0)
    assert sum(np.isinf(f.death) for f in h0) == 1


def test_h0_counts():
    rng = np.random.default_rng(0)
    pts = rng.normal(size=(12, 3))
    D = np.linalg.norm(pts[:, None] - pts[None], axis=-1)
    diag = tda.rips_persistence(D, max_dim=1, max_radius=float(D.max()))
    h0 = diag.in_dim(0)
    assert len(h0) == 12  # n-1 merges plus one essential component
    assert sum(np.isinf(f.death) for f in h0) == 1


def test_disconnected_components():
    # two far clusters under a truncation radius that keeps them apart
    D = np.array([[0.0, 1.0, 9.0, 9.0],
                  [1.0, 0.0, 9.0, 9.0],
                  [9.0, 9.0, 0.0, 1.0],
                  [9.0, 9.0, 1.0, 0.0]])
    diag = tda.rips_persistence(D, max_dim=1, max_radius=2.0)
    h0 = diag.in_dim(0)
    assert sum(np.isinf(f.death) for f in h0) == 2


def test_matches_brute_force_dim1():
    rng = np.random.default_rng(1)
    for trial in range(5):
        pts = rng.normal(size=(7, 2))
        D = np.linalg.norm(pts[:, None] - pts[None], axis=-1)
        r = float(np.median(D)) * 1.5
        diag = tda.rips_persistence(D, max_dim=1, max_radius=r)
        assert as_tuples(diag) == brute_force_diagram(D, 1, r)


def test_matches_brute_force_dim2():
    rng = np.random.default_rng(2)
    for trial in range(3):
        pts = rng.normal(size=(7, 3))
        D = np.linalg.norm(pts[:, None] - pts[None], axis=-1)
        r = float(np.median(D)) * 1.5
        diag = tda.rips_persistence(D, max_dim=2, max_radius=r)
        assert as_tuples(diag) == brute_force_diagram(D, 2, r)


def test_circle_has_one_dominant_loop():
    theta = 2 * np.pi * np.arange(20) / 20
    pts = np.stack([np.cos(theta), np.sin(theta)], axis=1)
    D = np.linalg.norm(pts[:, None] - pts[None], axis=-1)
    diag = tda.rips_persistence(D, max_dim=1)
    ranked = tda.diagram_summary(diag, 1)
    assert len(ranked) >= 1
    top = ranked[0].persistence
    second = ranked[1].persistence if len(ranked) > 1 else 0.0
    assert top > 3 * max(second, 1e-12)


def test_sphere_h2_signature():
    pts = mf.fibonacci_lattice(40)
    D = np.linalg.norm(pts[:, None] - pts[None], axis=-1)
    diag = tda.rips_persistence(D, max_dim=2)
    h2 = tda.diagram_summary(diag, 2)
    assert len(h2) >= 1
    top = h2[0].persistence
    second = h2[1].persistence if len(h2) > 1 else 0.0
    assert np.isfinite(top) and top > 3 * max(second, 1e-12)
    # the 2-sphere has no persistent 1-cycles
    h1 = tda.diagram_summary(diag, 1)
    if h1:
        assert h1[0].persistence < top


def test_stability_under_perturbation():
    pts = np.array([[0.0, 0], [1, 0], [1, 1], [0, 1], [0.5, 0.2]])
    D = np.linalg.norm(pts[:, None] - pts[None], axis=-1)
    eps = 1e-3
    rng = np.random.default_rng(3)
    P = rng.uniform(-eps, eps, size=D.shape)
    P = 0.5 * (P + P.T)
    np.fill_diagonal(P, 0.0)
    r = float(D.max())
    a = tda.rips_persistence(D, max_dim=1, max_radius=r)
    b = tda.rips_persistence(np.abs(D + P), max_dim=1, max_radius=r)
    for dim in (0, 1):
        key = lambda f: (f.birth, f.death)
        fa = sorted((f for f in a.in_dim(dim) if np.isfinite(f.death)), key=key)
        fb = sorted((f for f in b.in_dim(dim) if np.isfinite(f.death)), key=key)
        assert len(fa) == len(fb)
        for u, v in zip(fa, fb):
            assert abs(u.birth - v.birth) <= eps + 1e-12
            assert abs(u.death - v.death) <= eps + 1e-12


def test_tie_order_invariance():
    pts = np.array([[0.0, 0], [1, 0], [1, 1], [0, 1]])
    rng = np.random.default_rng(4)
    base = None
    for _ in range(4):
        perm = rng.permutation(4)
        D = np.linalg.norm(pts[perm][:, None] - pts[perm][None], axis=-1)
        diag = as_tuples(tda.rips_persistence(D, max_dim=1))
        if base is None:
            base = diag
        assert diag == base


def test_validation():
    with pytest.raises(ConfigError):
        tda.rips_persistence(np.array([[0.0, 1.0], [2.0, 0.0]]))
    with pytest.raises(ConfigError):
        tda.rips_persistence(-np.ones((2, 2)))
    with pytest.raises(ConfigError):
        tda.rips_persistence(np.zeros((3, 4)))
    with pytest.raises(ConfigError):
        tda.rips_persistence(np.zeros((2, 2)), max_dim=3)
    with pytest.raises(ConfigError):
        tda.rips_persistence(np.zeros((65, 65)), max_dim=2)
    big = np.zeros((513, 513))
    with pytest.raises(ConfigError):
        tda.rips_persistence(big, max_dim=1)


def test_summary_empty_and_order():
    diag = tda.PersistenceDiagram([], 1, 1.0)
    assert tda.diagram_summary(diag, 1) == []
    feats = [tda.Feature(1, 0.1, 0.4), tda.Feature(1, 0.0, np.inf),
             tda.Feature(1, 0.2, 0.9), tda.Feature(0, 0.0, 1.0)]
    diag = tda.PersistenceDiagram(feats, 1, 1.0)
    ranked = tda.diagram_summary(diag, 1)
    assert np.isinf(ranked[0].death)
    assert ranked[1].persistence >= ranked[2].persistence
    assert all(f.dim == 1 for f in ranked)


def test_csv_and_svg():
    D = np.array([[0.0, 0.7], [0.7, 0.0]])
    diag = tda.rips_persistence(D, max_dim=1, max_radius=1.0)
    csv = diag.to_csv()
    assert csv.splitlines()[0] == "dim,birth,death"
    assert any(line.endswith("inf") for line in csv.splitlines())
    svg = diag.to_svg()
    assert svg.startswith("<svg") and svg.rstrip().endswith("</svg>")


@pytest.mark.slow
def test_torus_lattice_two_loops():
    # flat product metric of a (R=2, r=1) torus on a 12x12 angular lattice
    m = 12
    R, r = 2.0, 1.0
    t = 2 * np.pi * np.arange(m) / m
    theta, phi = np.meshgrid(t, t)
    th, ph = theta.ravel(), phi.ravel()

    def wrap(a):
        return np.minimum(a % (2 * np.pi), (-a) % (2 * np.pi))

    dth = wrap(th[:, None] - th[None, :])
    dph = wrap(ph[:, None] - ph[None, :])
    D = np.sqrt((R * dth) ** 2 + (r * dph) ** 2)
    diag = tda.rips_persistence(D, max_dim=1)
    ranked = tda.diagram_summary(diag, 1)
    pers = [f.persistence for f in ranked]
    assert len(pers) >= 3
    # one loop per factor circle towers over the lattice noise
    assert pers[0] > 2 * pers[2]
    assert pers[1] > 2 * pers[2]
