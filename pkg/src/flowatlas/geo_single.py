"""Riemannian geometry of a single chart.

The embedding half of a chart pulls the ambient Euclidean metric back to
the latent space, G = J^T J.  This module evaluates that metric, the
geodesic equation it induces, exponential maps by initial-value
integration, and log maps by energy minimization over a cubic spline.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.interpolate import CubicSpline

from . import autodiff as ad
from .errors import (ConfigError, NumericalError, OffManifoldError,
                     SingularMetricError)

DEFAULT_STEPS_PER_UNIT = 100


@dataclass
class MetricMatrix:
    """Pullback metric G = J^T J with its cached Cholesky factor."""

    G: np.ndarray
    chol: np.ndarray

    @classmethod
    def from_jacobian(cls, J):
        G = np.einsum("...mi,...mj->...ij", J, J)
        try:
            chol = np.linalg.cholesky(G)
        except np.linalg.LinAlgError as e:
            raise SingularMetricError("pullback metric is not positive definite") from e
        return cls(G, chol)

    def solve(self, b):
        """G^{-1} b through the cached factor."""
        y = np.linalg.solve(self.chol, b[..., None])
        return np.linalg.solve(np.swapaxes(self.chol, -1, -2), y)[..., 0]

    def logdet(self):
        return 2.0 * np.sum(np.log(np.einsum("...ii->...i", self.chol)), axis=-1)

    def norm(self, v):
        """Riemannian norm ||v||_G."""
        return np.sqrt(np.einsum("...i,...ij,...j->...", v, self.G, v))


@dataclass
class GeodesicState:
    """Latent (z, zdot) with the mirrored ambient pair (x, v)."""

    z: np.ndarray
    zdot: np.ndarray
    x: np.ndarray = None
    v: np.ndarray = None
    t: float = 0.0


def chart_jacobian(flow, z):
    return ad.jacobian(lambda zz: flow.htilde(zz), np.asarray(z, dtype=np.float64))


def pullback_metric(flow, z):
    z = np.asarray(z, dtype=np.float64)
    if not np.all(np.isfinite(z)):
        raise NumericalError("latent point must be finite")
    return MetricMatrix.from_jacobian(chart_jacobian(flow, z))


def geodesic_acceleration(flow, z, zdot, _cache=None):
    """Latent acceleration zddot = -G^{-1} J^T q with q the curve term.

    q is the second directional derivative of the embedding along zdot,
    evaluated in a single second-order forward pass.
    """
    z = np.asarray(z, dtype=np.float64)
    zdot = np.asarray(zdot, dtype=np.float64)
    if _cache is None:
        J = chart_jacobian(flow, z)
        metric = MetricMatrix.from_jacobian(J)
    else:
        J, metric = _cache
    q = ad.quadratic_form(lambda zz: flow.htilde(zz), z, zdot)
    if not np.all(np.isfinite(q)):
        raise NumericalError("quadratic form is non-finite")
    b = np.einsum("...mi,...m->...i", J, q)
    return -metric.solve(b)


def ambient_acceleration(flow, z, zdot):
    """Theorem-2 form of the acceleration as seen in the ambient space."""
    z = np.asarray(z, dtype=np.float64)
    zdot = np.asarray(zdot, dtype=np.float64)
    J = chart_jacobian(flow, z)
    metric = MetricMatrix.from_jacobian(J)
    q = ad.quadratic_form(lambda zz: flow.htilde(zz), z, zdot)
    if not np.all(np.isfinite(q)):
        raise NumericalError("quadratic form is non-finite")
    zddot = -metric.solve(np.einsum("...mi,...m->...i", J, q))
    return q + np.einsum("...mi,...i->...m", J, zddot)


def tangent_velocity(flow, z, v):
    """Least-squares latent velocity: zdot = G^{-1} J^T v."""
    J = chart_jacobian(flow, z)
    metric = MetricMatrix.from_jacobian(J)
    return metric.solve(np.einsum("...mi,...m->...i", J, v)), J, metric


def _ode_rhs(flow, z, zdot):
    J = chart_jacobian(flow, z)
    metric = MetricMatrix.from_jacobian(J)
    return zdot, geodesic_acceleration(flow, z, zdot, _cache=(J, metric))


def _rk4_step(flow, z, zdot, dt):
    k1z, k1v = _ode_rhs(flow, z, zdot)
    k2z, k2v = _ode_rhs(flow, z + 0.5 * dt * k1z, zdot + 0.5 * dt * k1v)
    k3z, k3v = _ode_rhs(flow, z + 0.5 * dt * k2z, zdot + 0.5 * dt * k2v)
    k4z, k4v = _ode_rhs(flow, z + dt * k3z, zdot + dt * k3v)
    z_new = z + dt / 6.0 * (k1z + 2 * k2z + 2 * k3z + k4z)
    zdot_new = zdot + dt / 6.0 * (k1v + 2 * k2v + 2 * k3v + k4v)
    return z_new, zdot_new


def _mirror(flow, z, zdot):
    x = flow.htilde(z)
    J = chart_jacobian(flow, z)
    v = np.einsum("...mi,...i->...m", J, zdot)
    return x, v


def exp_map(flow, x0, v0, t_end=1.0, steps=None, method="rk4",
            recon_tol=0.1, return_trajectory=False):
    """Integrate the geodesic IVP from ambient (x0, v0) for time t_end.

    x0 is pulled to the latent space via the chart's left inverse and v0
    is solved to a latent velocity in least squares, which projects any
    normal component away.  recon_tol bounds the allowed distance of x0
    from the chart surface (None disables the check).
    """
    x0 = np.asarray(x0, dtype=np.float64)
    v0 = np.asarray(v0, dtype=np.float64)
    if steps is None:
        steps = max(1, int(round(DEFAULT_STEPS_PER_UNIT * abs(t_end))))
    if recon_tol is not None:
        _, residual = flow.reconstruct(x0)
        if np.any(np.sqrt(residual) > recon_tol):
            raise OffManifoldError("start point too far from the chart surface")

    z = flow.h_dagger(x0)
    zdot, _, _ = tangent_velocity(flow, z, v0)

    if method == "rk45":
        return _exp_map_rk45(flow, z, zdot, t_end, return_trajectory)
    if method != "rk4":
        raise ConfigError(f"unknown integrator {method!r}")

    dt = t_end / steps
    traj = [_mirror(flow, z, zdot)] if return_trajectory else None
    for k in range(steps):
        try:
            z, zdot = _rk4_step(flow, z, zdot, dt)
        except (SingularMetricError, NumericalError) as e:
            e.partial_trajectory = traj
            e.t_reached = k * dt
            raise
        if return_trajectory:
            traj.append(_mirror(flow, z, zdot))
    x, v = _mirror(flow, z, zdot)
    state = GeodesicState(z, zdot, x, v, t=float(t_end))
    if return_trajectory:
        state.trajectory = traj
    return state


def _exp_map_rk45(flow, z, zdot, t_end, return_trajectory):
    from scipy.integrate import solve_ivp

    z = np.atleast_2d(z)
    zdot = np.atleast_2d(zdot)
    n, d = z.shape

    def rhs(_, y):
        zz = y[:n * d].reshape(n, d)
        vv = y[n * d:].reshape(n, d)
        dz, dv = _ode_rhs(flow, zz, vv)
        return np.concatenate([dz.ravel(), dv.ravel()])

    y0 = np.concatenate([z.ravel(), zdot.ravel()])
    sol = solve_ivp(rhs, (0.0, t_end), y0, rtol=1e-6, atol=1e-9, method="RK45")
    if not sol.success:
        raise NumericalError(f"adaptive integration failed: {sol.message}")
    zf = sol.y[:n * d, -1].reshape(n, d)
    vf = sol.y[n * d:, -1].reshape(n, d)
    x, v = _mirror(flow, zf, vf)
    state = GeodesicState(zf, vf, x, v, t=float(t_end))
    if return_trajectory:
        state.trajectory = [
            _mirror(flow, sol.y[:n * d, k].reshape(n, d), sol.y[n * d:, k].reshape(n, d))
            for k in range(sol.y.shape[1])]
    return state


def curve_energy(points):
    """Discrete Dirichlet energy T * sum ||x_{t+1} - x_t||^2."""
    points = np.asarray(points, dtype=np.float64)
    if points.shape[-2] < 2:
        raise ConfigError("need at least two discretization points")
    T = points.shape[-2] - 1
    diffs = np.diff(points, axis=-2)
    return T * np.sum(diffs ** 2, axis=(-2, -1))


def curve_length(points):
    points = np.asarray(points, dtype=np.float64)
    return np.sum(np.linalg.norm(np.diff(points, axis=-2), axis=-1), axis=-1)


def spline_basis(K, ts):
    """[len(ts), K+2] natural-cubic evaluation matrix on uniform knots."""
    knots = np.linspace(0.0, 1.0, K + 2)
    cols = []
    for j in range(K + 2):
        e = np.zeros(K + 2)
        e[j] = 1.0
        cols.append(CubicSpline(knots, e, bc_type="natural")(ts))
    return np.stack(cols, axis=-1)


class SplineCurve:
    """Natural cubic curve through fixed endpoints and K interior controls."""

    def __init__(self, x0, x1, controls):
        self.x0 = np.asarray(x0, dtype=np.float64)
        self.x1 = np.asarray(x1, dtype=np.float64)
        self.controls = np.asarray(controls, dtype=np.float64)
        if self.controls.ndim != 2 or self.controls.shape[1] != self.x0.shape[0]:
            raise ConfigError("controls must be a [K, D] array matching the endpoints")

    @property
    def K(self):
        return len(self.controls)

    @classmethod
    def chord(cls, x0, x1, K):
        x0 = np.asarray(x0, dtype=np.float64)
        x1 = np.asarray(x1, dtype=np.float64)
        ts = np.linspace(0.0, 1.0, K + 2)[1:-1, None]
        return cls(x0, x1, (1.0 - ts) * x0 + ts * x1)

    def nodes(self):
        return np.vstack([self.x0[None], self.controls, self.x1[None]])

    def evaluate(self, ts):
        ts = np.asarray(ts, dtype=np.float64)
        return spline_basis(self.K, ts) @ self.nodes()


@dataclass
class LogMapResult:
    curve: SplineCurve
    v0: np.ndarray
    length: float
    converged: bool
    energies: np.ndarray = field(repr=False, default=None)
    points: np.ndarray = field(repr=False, default=None)


def log_map_single(flow, x0, x1, K=8, iters=500, T=64, lr=0.02, recon_tol=0.1):
    """Geodesic between two on-surface points by spline energy descent.

    The spline lives in ambient space; the energy is evaluated on its
    on-surface projection, so the optimized curve tracks the chart.
    Returns the curve, the unit-time initial velocity and the length of
    the projected polyline.
    """
    import torch

    torch.set_default_dtype(torch.float64)
    x0 = np.asarray(x0, dtype=np.float64)
    x1 = np.asarray(x1, dtype=np.float64)
    if recon_tol is not None:
        for xe in (x0, x1):
            _, residual = flow.reconstruct(xe)
            if np.sqrt(float(residual)) > recon_tol:
                raise OffManifoldError("endpoint too far from the chart surface")

    curve = SplineCurve.chord(x0, x1, K)
    S = torch.as_tensor(spline_basis(K, np.linspace(0.0, 1.0, T + 1)))
    tparams = flow.nested_params(lambda a: torch.as_tensor(np.asarray(a, dtype=np.float64)))
    t0 = torch.as_tensor(x0)[None]
    t1 = torch.as_tensor(x1)[None]
    controls = torch.tensor(curve.controls, requires_grad=True)
    opt = torch.optim.Adam([controls], lr=lr)

    energies = np.empty(iters)
    best = (np.inf, curve.controls.copy())
    for it in range(iters):
        nodes = torch.cat([t0, controls, t1], dim=0)
        gamma = S @ nodes
        xs = flow.htilde(flow.h_dagger(gamma, tparams), tparams)
        energy = T * ((xs[1:] - xs[:-1]) ** 2).sum()
        opt.zero_grad()
        energy.backward()
        opt.step()
        e = float(energy.detach())
        energies[it] = e
        if e < best[0]:
            best = (e, controls.detach().numpy().copy())

    curve = SplineCurve(x0, x1, best[1])
    gamma = curve.evaluate(np.linspace(0.0, 1.0, T + 1))
    xs = flow.htilde(flow.h_dagger(gamma))
    v0 = T * (xs[1] - xs[0])
    length = float(curve_length(xs))
    converged = _energy_converged(energies)
    return LogMapResult(curve, v0, length, converged, energies, xs)


@dataclass
class LatentLogMapResult:
    v0: np.ndarray
    lengths: np.ndarray
    converged: np.ndarray
    latents: np.ndarray = field(repr=False, default=None)
    points: np.ndarray = field(repr=False, default=None)


def log_map_latent(flow, x0, x1, K=8, iters=300, T=64, lr=0.02):
    """Geodesics for one chart with the spline in latent space, batched.

    Unlike the ambient parameterization, a latent curve cannot leave the
    chart surface or step across gaps in the learned manifold, so its
    lengths reflect the chart's own notion of connectivity: connecting
    the two sides of a gap forces a detour through the whole chart.
    """
    import torch

    torch.set_default_dtype(torch.float64)
    X0 = np.atleast_2d(np.asarray(x0, dtype=np.float64))
    X1 = np.atleast_2d(np.asarray(x1, dtype=np.float64))
    P = len(X0)
    Z0 = np.atleast_2d(flow.h_dagger(X0))
    Z1 = np.atleast_2d(flow.h_dagger(X1))
    Snp = spline_basis(K, np.linspace(0.0, 1.0, T + 1))
    S = torch.as_tensor(Snp)
    tparams = flow.nested_params(lambda a: torch.as_tensor(np.asarray(a, dtype=np.float64)))
    t0 = torch.as_tensor(Z0)[:, None, :]
    t1 = torch.as_tensor(Z1)[:, None, :]
    ts = np.linspace(0.0, 1.0, K + 2)[1:-1, None, None]
    init = (1.0 - ts) * Z0[None] + ts * Z1[None]  # [K, P, d]
    controls = torch.tensor(np.swapaxes(init, 0, 1), requires_grad=True)
    opt = torch.optim.Adam([controls], lr=lr)

    energies = np.empty((iters, P))
    best_e = np.full(P, np.inf)
    best_controls = controls.detach().numpy().copy()
    for it in range(iters):
        nodes = torch.cat([t0, controls, t1], dim=1)
        gamma = torch.einsum("tk,pkd->ptd", S, nodes)
        xs = flow.htilde(gamma.reshape(P * (T + 1), -1), tparams).reshape(P, T + 1, -1)
        e_pair = T * ((xs[:, 1:] - xs[:, :-1]) ** 2).sum(dim=(1, 2))
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
        if (it + 1) % 10 == 0 and it + 1 >= 2 * CONVERGED_WINDOW and all(
                _energy_converged(energies[:it + 1, p]) for p in range(P)):
            energies = energies[:it + 1]
            break

    nodes = np.concatenate([Z0[:, None], best_controls, Z1[:, None]], axis=1)
    gamma = np.einsum("tk,pkd->ptd", Snp, nodes)
    xs = np.asarray(flow.htilde(gamma.reshape(P * (T + 1), -1))).reshape(P, T + 1, -1)
    v0 = T * (xs[:, 1] - xs[:, 0])
    lengths = curve_length(xs)
    converged = np.array([_energy_converged(energies[:, p]) for p in range(P)])
    result = LatentLogMapResult(v0, lengths, converged, gamma, xs)
    if np.ndim(x0) == 1:
        result.v0 = v0[0]
        result.lengths = float(lengths[0])
    return result


CONVERGED_WINDOW = 50


def _energy_converged(energies, window=CONVERGED_WINDOW, rtol=1e-4):
    """Flat tail of the optimization trace counts as converged."""
    if len(energies) <= window:
        return True
    tail = energies[-window:]
    scale = max(abs(float(energies[0])), 1e-12)
    return float(tail.max() - tail.min()) <= rtol * scale
