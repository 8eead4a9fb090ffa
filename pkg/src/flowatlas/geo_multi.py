"""Geometry on the learned atlas.

Points are projected onto the manifold as responsibility-weighted chart
reconstructions.  Exponential maps come in three flavors (stepwise
weighted averaging, hard chart switching, and a fully ambient ODE), log
maps minimize the energy of a projected spline, and distance matrices
assemble pairwise geodesic lengths.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import geo_single as gs
from .errors import ConfigError, NumericalError, SingularMetricError

EULER_SUBSTEPS = 5


@dataclass
class ProjectedPoint:
    x_raw: np.ndarray
    x_proj: np.ndarray
    resp: np.ndarray
    active_charts: list


def project_batch(atlas, X, components=None):
    """Weighted reconstructions and filtered responsibilities for a batch."""
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    R = atlas.filtered_responsibilities(X, components)
    out = np.zeros_like(X)
    for c, chart in enumerate(atlas.charts):
        active = R[:, c] > 0
        if np.any(active):
            rec, _ = chart.reconstruct(X[active])
            out[active] += R[active, c:c + 1] * rec
    return out, R


def project_to_manifold(atlas, x):
    x = np.asarray(x, dtype=np.float64)
    proj, R = project_batch(atlas, x)
    return ProjectedPoint(x, proj[0], R[0], list(np.nonzero(R[0])[0]))


def sample_atlas(atlas, n, seed):
    """Draw n ambient samples from the uniform mixture of charts."""
    rng = np.random.default_rng(seed)
    counts = np.bincount(rng.integers(atlas.n_charts, size=n),
                         minlength=atlas.n_charts)
    parts = [atlas.charts[c].sample(int(m), seed=seed + 1 + c)
             for c, m in enumerate(counts) if m > 0]
    out = np.concatenate(parts, axis=0)
    return out[rng.permutation(n)]


@dataclass
class Trajectory:
    """Ambient (x, v) samples along an integrated path."""

    x: np.ndarray  # [steps+1, n, D]
    v: np.ndarray
    times: np.ndarray
    diagnostics: list = field(default_factory=list)
    switch_times: list = field(default_factory=list)
    flags: dict = field(default_factory=dict)

    def to_csv(self):
        D = self.x.shape[-1]
        head = "t," + ",".join(f"x{k + 1}" for k in range(D))
        lines = [head]
        for k, t in enumerate(self.times):
            for row in np.atleast_2d(self.x[k]):
                lines.append(f"{t:.10g}," + ",".join(f"{u:.10g}" for u in row))
        return "\n".join(lines) + "\n"


def _project_velocity(atlas, X, V, R):
    """Responsibility-weighted tangent projection of ambient velocities."""
    out = np.zeros_like(V)
    for c, chart in enumerate(atlas.charts):
        active = R[:, c] > 0
        if not np.any(active):
            continue
        z = chart.h_dagger(X[active])
        zdot, J, _ = gs.tangent_velocity(chart, z, V[active])
        out[active] += R[active, c:c + 1] * np.einsum("nmi,ni->nm", J, zdot)
    return out


def _chart_step(chart, X, V, dt, substeps):
    """Advance one chart's geodesic for time dt from ambient (X, V)."""
    z = chart.h_dagger(X)
    zdot, _, _ = gs.tangent_velocity(chart, z, V)
    h = dt / substeps
    for _ in range(substeps):
        z, zdot = gs._rk4_step(chart, z, zdot, h)
    return gs._mirror(chart, z, zdot)


def exp_map_euler(atlas, x0, v0, T=20, substeps=EULER_SUBSTEPS):
    """Stepwise exponential map averaging chart moves by responsibility."""
    if T < 1:
        raise ConfigError("need T >= 1 outer steps")
    X = np.atleast_2d(np.asarray(x0, dtype=np.float64)).copy()
    V = np.atleast_2d(np.asarray(v0, dtype=np.float64)).copy()
    n = len(X)
    dt = 1.0 / T
    R = atlas.filtered_responsibilities(X)
    V = _project_velocity(atlas, X, V, R)
    xs, vs = [X.copy()], [V.copy()]
    diagnostics = []
    for step in range(T):
        R = atlas.filtered_responsibilities(X)
        X_new = np.zeros_like(X)
        V_new = np.zeros_like(V)
        for c, chart in enumerate(atlas.charts):
            active = R[:, c] > 0
            if not np.any(active):
                continue
            try:
                xc, vc = _chart_step(chart, X[active], V[active], dt, substeps)
            except (SingularMetricError, NumericalError) as e:
                diagnostics.append((step, c, str(e)))
                R[active, c] = 0.0
                continue
            X_new[active] += R[active, c:c + 1] * xc
            V_new[active] += R[active, c:c + 1] * vc
        row_sum = R.sum(axis=1)
        if np.any(row_sum == 0):
            err = NumericalError("every chart failed during an Euler step")
            err.partial_trajectory = Trajectory(np.array(xs), np.array(vs),
                                                np.arange(step + 1) * dt, diagnostics)
            raise err
        X = X_new / row_sum[:, None]
        V = V_new / row_sum[:, None]
        xs.append(X.copy())
        vs.append(V.copy())
    return Trajectory(np.array(xs), np.array(vs),
                      np.linspace(0.0, 1.0, T + 1), diagnostics)


def _argmax_resp(atlas, x):
    return int(np.argmax(atlas.responsibilities(np.atleast_2d(x))[0]))


def exp_map_hard_switch(atlas, x0, v0, steps=100, max_switches=50, bisect_tol=1e-8):
    """Integrate inside the argmax-responsibility chart, switching at
    responsibility-gap crossings located by bisection in time."""
    X0 = np.atleast_2d(np.asarray(x0, dtype=np.float64))
    V0 = np.atleast_2d(np.asarray(v0, dtype=np.float64))
    R = atlas.filtered_responsibilities(X0)
    V0 = _project_velocity(atlas, X0, V0, R)
    xs = np.empty((steps + 1, len(X0), X0.shape[1]))
    vs = np.empty_like(xs)
    switch_times = []
    thrash = np.zeros(len(X0), dtype=bool)
    dt = 1.0 / steps

    for i in range(len(X0)):
        x, v = X0[i], V0[i]
        c = _argmax_resp(atlas, x)
        xs[0, i], vs[0, i] = x, v
        switches = []
        for k in range(steps):
            x_new, v_new = _chart_step(atlas.charts[c],
                                       x[None], v[None], dt, 1)
            x_new, v_new = x_new[0], v_new[0]
            c_new = _argmax_resp(atlas, x_new)
            if c_new != c:
                # bisect the step length for the crossing time
                lo, hi = 0.0, dt
                while hi - lo > bisect_tol:
                    mid = 0.5 * (lo + hi)
                    xm, _ = _chart_step(atlas.charts[c], x[None], v[None], mid, 1)
                    if _argmax_resp(atlas, xm[0]) == c:
                        lo = mid
                    else:
                        hi = mid
                x_new, v_new = _chart_step(atlas.charts[c], x[None], v[None], hi, 1)
                x_new, v_new = x_new[0], v_new[0]
                switches.append(k * dt + hi)
                c = _argmax_resp(atlas, x_new)
                if len(switches) > max_switches:
                    thrash[i] = True
                    xs[k + 1:, i] = x_new
                    vs[k + 1:, i] = v_new
                    break
            x, v = x_new, v_new
            xs[k + 1, i], vs[k + 1, i] = x, v
        switch_times.append(switches)
    traj = Trajectory(xs, vs, np.linspace(0.0, 1.0, steps + 1),
                      switch_times=switch_times)
    if np.any(thrash):
        traj.flags["thrashing"] = np.nonzero(thrash)[0].tolist()
    return traj


def _mixture_ambient_acceleration(atlas, X, V):
    R = atlas.filtered_responsibilities(X)
    A = np.zeros_like(X)
    for c, chart in enumerate(atlas.charts):
        active = R[:, c] > 0
        if not np.any(active):
            continue
        z = chart.h_dagger(X[active])
        zdot, _, _ = gs.tangent_velocity(chart, z, V[active])
        A[active] += R[active, c:c + 1] * gs.ambient_acceleration(chart, z, zdot)
    return A


def exp_map_ambient(atlas, x0, v0, steps=100, radius_limit=None):
    """Fully ambient ODE: velocity driven by the responsibility-averaged
    chart accelerations.  Known to diverge on some fixtures; a radius
    guard aborts with a flag instead of returning garbage."""
    X = np.atleast_2d(np.asarray(x0, dtype=np.float64)).copy()
    V = np.atleast_2d(np.asarray(v0, dtype=np.float64)).copy()
    R = atlas.filtered_responsibilities(X)
    V = _project_velocity(atlas, X, V, R)
    if radius_limit is None:
        radius_limit = 10.0 * max(float(np.max(np.linalg.norm(X, axis=1))), 1.0)
    dt = 1.0 / steps
    xs, vs = [X.copy()], [V.copy()]

    def rhs(x, v):
        return v, _mixture_ambient_acceleration(atlas, x, v)

    for k in range(steps):
        k1x, k1v = rhs(X, V)
        k2x, k2v = rhs(X + 0.5 * dt * k1x, V + 0.5 * dt * k1v)
        k3x, k3v = rhs(X + 0.5 * dt * k2x, V + 0.5 * dt * k2v)
        k4x, k4v = rhs(X + dt * k3x, V + dt * k3v)
        X = X + dt / 6.0 * (k1x + 2 * k2x + 2 * k3x + k4x)
        V = V + dt / 6.0 * (k1v + 2 * k2v + 2 * k3v + k4v)
        if not np.all(np.isfinite(X)) or np.max(np.linalg.norm(X, axis=1)) > radius_limit:
            err = NumericalError("ambient integration diverged")
            err.partial_trajectory = Trajectory(np.array(xs), np.array(vs),
                                                np.arange(k + 1) * dt,
                                                flags={"diverged": True})
            raise err
        xs.append(X.copy())
        vs.append(V.copy())
    return Trajectory(np.array(xs), np.array(vs), np.linspace(0.0, 1.0, steps + 1))


@dataclass
class MultiLogMapResult:
    curves: list
    v0: np.ndarray
    lengths: np.ndarray
    converged: np.ndarray
    points: np.ndarray = field(repr=False, default=None)
    responsibilities: np.ndarray = field(repr=False, default=None)


def _project_torch(atlas, tparams, gamma_flat, R, torch):
    out = None
    for c, chart in enumerate(atlas.charts):
        rec = chart.htilde(chart.h_dagger(gamma_flat, tparams[c]), tparams[c])
        term = R[:, c:c + 1] * rec
        out = term if out is None else out + term
    return out


def log_map_multi(atlas, x0, x1, K=8, iters=300, T=64, lr=0.02, resp_refresh=10):
    """Spline geodesics between endpoint pairs across the whole atlas.

    The spline lives in ambient space; at each energy evaluation its
    samples are projected onto the manifold with responsibilities that
    are refreshed (and then held fixed) every few iterations, keeping
    the objective differentiable in the controls.
    """
    import torch

    torch.set_default_dtype(torch.float64)
    X0 = np.atleast_2d(np.asarray(x0, dtype=np.float64))
    X1 = np.atleast_2d(np.asarray(x1, dtype=np.float64))
    P, D = X0.shape
    S = torch.as_tensor(gs.spline_basis(K, np.linspace(0.0, 1.0, T + 1)))
    tparams = [chart.nested_params(lambda a: torch.as_tensor(np.asarray(a)))
               for chart in atlas.charts]
    t0 = torch.as_tensor(X0)[:, None, :]
    t1 = torch.as_tensor(X1)[:, None, :]
    # initialize from the on-manifold projection of the straight chord:
    # project chord samples, then least-squares fit the interior controls
    Snp = gs.spline_basis(K, np.linspace(0.0, 1.0, T + 1))
    ts = np.linspace(0.0, 1.0, T + 1)[None, :, None]
    chord = (1.0 - ts) * X0[:, None] + ts * X1[:, None]
    proj0, _ = project_batch(atlas, chord.reshape(-1, D))
    proj0 = proj0.reshape(P, T + 1, D)
    rhs = proj0 - Snp[None, :, 0, None] * X0[:, None] \
        - Snp[None, :, -1, None] * X1[:, None]
    init = np.einsum("kt,ptd->pkd", np.linalg.pinv(Snp[:, 1:-1]), rhs)
    controls = torch.tensor(init, requires_grad=True)
    opt = torch.optim.Adam([controls], lr=lr)

    energies = np.empty((iters, P))
    best_e = np.full(P, np.inf)
    best_controls = controls.detach().numpy().copy()
    R_t = None
    for it in range(iters):
        nodes = torch.cat([t0, controls, t1], dim=1)  # [P, K+2, D]
        gamma = torch.einsum("tk,pkd->ptd", S, nodes)
        flat = gamma.reshape(P * (T + 1), D)
        if it % resp_refresh == 0:
            R = atlas.filtered_responsibilities(flat.detach().numpy())
            R_t = torch.as_tensor(R)
        proj = _project_torch(atlas, tparams, flat, R_t, torch).reshape(P, T + 1, D)
        e_pair = T * ((proj[:, 1:] - proj[:, :-1]) ** 2).sum(dim=(1, 2))
        loss = e_pair.sum()
        opt.zero_grad()
        loss.backward()
        opt.step()
        e = e_pair.detach().numpy()
        energies[it] = e
        better = e < best_e
        if np.any(better):
            best_e[better] = e[better]
            best_controls[better] = controls.detach().numpy()[better]
        if (it + 1) % resp_refresh == 0 and it + 1 >= 2 * gs.CONVERGED_WINDOW \
                and all(gs._energy_converged(energies[:it + 1, p]) for p in range(P)):
            energies = energies[:it + 1]
            break

    # final projection of the best curves, then refit through the knots
    nodes = np.concatenate([X0[:, None], best_controls, X1[:, None]], axis=1)
    gamma = np.einsum("tk,pkd->ptd", Snp, nodes)
    flat = gamma.reshape(P * (T + 1), D)
    proj, R = project_batch(atlas, flat)
    proj = proj.reshape(P, T + 1, D)
    R = R.reshape(P, T + 1, -1)

    knot_idx = np.round(np.linspace(0, T, K + 2)).astype(int)
    curves = [gs.SplineCurve(proj[p, 0], proj[p, -1], proj[p, knot_idx[1:-1]])
              for p in range(P)]
    v0 = T * (proj[:, 1] - proj[:, 0])
    lengths = gs.curve_length(proj)
    converged = np.array([gs._energy_converged(energies[:, p]) for p in range(P)])
    result = MultiLogMapResult(curves, v0, lengths, converged, proj, R)
    if np.ndim(x0) == 1:
        result.v0 = v0[0]
        result.lengths = float(lengths[0])
    return result


def pairwise_lengths(atlas, x0, x1, K=8, iters=300, T=64, lr=0.02,
                     resp_refresh=10, chunk=512, verbose=False):
    """Geodesic lengths for many endpoint pairs, chunked; chord-projection
    fallback (flagged) when a chunk fails outright."""
    X0 = np.atleast_2d(np.asarray(x0, dtype=np.float64))
    X1 = np.atleast_2d(np.asarray(x1, dtype=np.float64))
    lengths = np.empty(len(X0))
    converged = np.zeros(len(X0), dtype=bool)
    for k in range(0, len(X0), chunk):
        sl = slice(k, min(k + chunk, len(X0)))
        try:
            res = log_map_multi(atlas, X0[sl], X1[sl], K=K, iters=iters, T=T,
                                lr=lr, resp_refresh=resp_refresh)
            lengths[sl] = np.atleast_1d(res.lengths)
            converged[sl] = res.converged
        except (NumericalError, SingularMetricError, ConfigError):
            lengths[sl] = _chord_lengths(atlas, X0[sl], X1[sl], T)
            converged[sl] = False
        if verbose:
            print(f"pairs {sl.stop}/{len(X0)}", flush=True)
    return lengths, converged


def _chord_lengths(atlas, X0, X1, T):
    ts = np.linspace(0.0, 1.0, T + 1)[None, :, None]
    chords = (1.0 - ts) * X0[:, None] + ts * X1[:, None]
    flat = chords.reshape(-1, X0.shape[1])
    proj, _ = project_batch(atlas, flat)
    return gs.curve_length(proj.reshape(len(X0), T + 1, -1))


@dataclass
class DistanceMatrix:
    matrix: np.ndarray
    converged: np.ndarray

    def to_csv(self):
        n = len(self.matrix)
        lines = [str(n)]
        for row in self.matrix:
            lines.append(",".join(f"{u:.10g}" for u in row))
        return "\n".join(lines) + "\n"


def distance_matrix(atlas, points, K=8, iters=300, T=64, lr=0.02,
                    resp_refresh=10, chunk=512, verbose=False):
    """Symmetric geodesic-length matrix over each unordered point pair."""
    points = np.atleast_2d(np.asarray(points, dtype=np.float64))
    n = len(points)
    if n < 2:
        raise ConfigError("need at least two points")
    i, j = np.tril_indices(n, k=-1)
    lengths, conv = pairwise_lengths(atlas, points[i], points[j], K=K,
                                     iters=iters, T=T, lr=lr,
                                     resp_refresh=resp_refresh, chunk=chunk,
                                     verbose=verbose)
    M = np.zeros((n, n))
    Cv = np.ones((n, n), dtype=bool)
    M[i, j] = lengths
    M[j, i] = lengths
    Cv[i, j] = conv
    Cv[j, i] = conv
    return DistanceMatrix(M, Cv)
