"""Evaluation metrics: exact Wasserstein distance and model report assembly."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import linear_sum_assignment

from .errors import ConfigError

MAX_OT_BATCH = 2048


def wasserstein(A, B):
    """Exact W1 between equal-size empirical measures (Hungarian matching).

    Reported as the mean Euclidean distance of the optimal matching.
    """
    A = np.atleast_2d(np.asarray(A, dtype=np.float64))
    B = np.atleast_2d(np.asarray(B, dtype=np.float64))
    if A.shape != B.shape:
        raise ConfigError(f"batch shapes differ: {A.shape} vs {B.shape}")
    if len(A) > MAX_OT_BATCH:
        raise ConfigError(f"batch too large for exact OT (max {MAX_OT_BATCH})")
    cost = np.linalg.norm(A[:, None, :] - B[None, :, :], axis=-1)
    rows, cols = linear_sum_assignment(cost)
    return float(cost[rows, cols].mean())


def subsampled_wasserstein(samples, data, n_subsamples=5, batch=1024, seed=0):
    """Mean/std of exact W1 over repeated subsample pairs."""
    samples = np.asarray(samples, dtype=np.float64)
    data = np.asarray(data, dtype=np.float64)
    m = min(batch, len(samples), len(data))
    rng = np.random.default_rng(seed)
    vals = []
    for _ in range(n_subsamples):
        a = samples[rng.choice(len(samples), size=m, replace=False)]
        b = data[rng.choice(len(data), size=m, replace=False)]
        vals.append(wasserstein(a, b))
    vals = np.asarray(vals)
    return float(vals.mean()), (float(vals.std(ddof=1)) if len(vals) > 1 else float("nan"))


@dataclass
class MetricReport:
    recons: float = float("nan")
    wasserstein_mean: float = float("nan")
    wasserstein_std: float = float("nan")
    exps_mse: float = float("nan")
    dists_mse: float = float("nan")
    flags: dict = field(default_factory=dict)

    def to_text(self):
        lines = [
            "# flowatlas metric report (W1, Euclidean ground cost)",
            f"recons {self.recons:.10g}",
            f"wasserstein_mean {self.wasserstein_mean:.10g}",
            f"wasserstein_std {self.wasserstein_std:.10g}",
            f"exps_mse {self.exps_mse:.10g}",
            f"dists_mse {self.dists_mse:.10g}",
        ]
        for k, v in sorted(self.flags.items()):
            lines.append(f"flag {k} {v}")
        return "\n".join(lines) + "\n"

    def to_csv_row(self, label):
        return (f"{label},{self.recons:.10g},{self.wasserstein_mean:.10g},"
                f"{self.wasserstein_std:.10g},{self.exps_mse:.10g},{self.dists_mse:.10g}")


def evaluate_model(atlas, test_data, manifold_spec=None, eval_points=None,
                   seed=0, n_subsamples=5, ot_batch=1024, pair_limit=None,
                   exp_steps=20, logmap_iters=300, logmap_refresh=10):
    """Assemble the standard metric report for a trained atlas.

    Geometry metrics need ``eval_points``; exp-map and distance targets are
    only computed where the manifold has an oracle (circle/sphere closed
    form; torus exp maps are skipped and flagged).
    """
    from . import geo_multi, manifolds
    from .atlas import Atlas

    if not isinstance(atlas, Atlas):
        atlas = Atlas([atlas], resp_threshold=0.0, lambda_recon=1000.0)
    report = MetricReport()
    test_data = np.asarray(test_data, dtype=np.float64)

    proj = geo_multi.project_batch(atlas, test_data)[0]
    report.recons = float(np.mean(np.sum((test_data - proj) ** 2, axis=1)))

    n_samp = min(len(test_data), ot_batch) * n_subsamples
    samples = geo_multi.sample_atlas(atlas, n_samp, seed=seed)
    report.wasserstein_mean, report.wasserstein_std = subsampled_wasserstein(
        samples, test_data, n_subsamples=n_subsamples, batch=ot_batch, seed=seed)

    if eval_points is None or manifold_spec is None:
        report.flags["geometry"] = "skipped (no eval points)"
        return report

    i, j = np.tril_indices(len(eval_points), k=-1)
    if pair_limit is not None and len(i) > pair_limit:
        rng = np.random.default_rng(seed)
        keep = rng.choice(len(i), size=pair_limit, replace=False)
        i, j = i[keep], j[keep]
        report.flags["pairs"] = f"subsampled to {pair_limit}"
    x0, x1 = eval_points[i], eval_points[j]

    if manifold_spec.kind in ("circle", "sphere"):
        v_true = manifolds.true_log(manifold_spec, x0, x1)
        targets = manifolds.true_exp(manifold_spec, x0, v_true)
        try:
            traj = geo_multi.exp_map_euler(atlas, x0, v_true, T=exp_steps)
            report.exps_mse = float(np.mean(np.sum((traj.x[-1] - targets) ** 2, axis=1)))
        except Exception as e:  # failures reported, not fabricated
            report.flags["exps"] = f"failed: {e}"
    else:
        report.flags["exps"] = "no closed-form oracle on this manifold"

    try:
        lengths, converged = geo_multi.pairwise_lengths(
            atlas, x0, x1, iters=logmap_iters, resp_refresh=logmap_refresh)
        d_true = np.atleast_1d(manifolds.true_distance(manifold_spec, x0, x1))
        report.dists_mse = float(np.mean((lengths - d_true) ** 2))
        if not np.all(converged):
            report.flags["dists"] = f"{int((~converged).sum())} pairs flagged non-converged"
    except Exception as e:
        report.flags["dists"] = f"failed: {e}"
    return report
