"""Mixture-of-charts model and its training loops.

An :class:`Atlas` is a list of chart flows sharing (d, D) with a fixed
uniform prior over charts.  Density evaluation, responsibilities and the
EM M-step loss are defined here.  Training (EM, direct MLE and the two
single-chart baselines) runs on a torch mirror of the chart parameters;
torch is used purely as the gradient engine for the optimization loops,
all evaluation semantics live in the numpy implementation.
"""

from __future__ import annotations

import io
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, DimensionError, NumericalError
from .flows import ChartFlow

_LOG_2PI = float(np.log(2.0 * np.pi))

TRAIN_MODES = ("EM", "MLE", "SINGLE", "SINGLE_M")


@dataclass
class TrainConfig:
    mode: str = "EM"
    epochs: int = 1000
    batch_size: int = 256
    learning_rate: float = 3e-4
    seed: int = 0
    pretrain_epochs: int = 200
    patience: int = 50
    val_start: int = 100  # first epoch at which early stopping may trigger

    def __post_init__(self):
        if self.mode not in TRAIN_MODES:
            raise ConfigError(f"unknown training mode {self.mode!r}")
        for name in ("epochs", "batch_size", "patience"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive")
        if self.learning_rate <= 0:
            raise ConfigError("learning_rate must be positive")
        if self.pretrain_epochs < 0 or self.val_start < 0:
            raise ConfigError("pretrain_epochs and val_start must be >= 0")
        if self.mode in ("SINGLE", "SINGLE_M") and self.pretrain_epochs:
            # single-chart baselines have no per-cluster warm-up
            self.pretrain_epochs = 0


class Atlas:
    """C chart flows + uniform mixture weights; the learned manifold."""

    def __init__(self, charts, resp_threshold=0.05, lambda_recon=1000.0,
                 lambda_balance=0.0):
        if not charts:
            raise ConfigError("atlas needs at least one chart")
        d, D = charts[0].d, charts[0].D
        if any(c.d != d or c.D != D for c in charts):
            raise DimensionError("all charts must share (d, D)")
        if not 0.0 <= resp_threshold < 1.0:
            raise ConfigError("resp_threshold must be in [0, 1)")
        if lambda_recon < 0 or lambda_balance < 0:
            raise ConfigError("regularization weights must be >= 0")
        self.charts = list(charts)
        self.resp_threshold = float(resp_threshold)
        self.lambda_recon = float(lambda_recon)
        self.lambda_balance = float(lambda_balance)

    @property
    def n_charts(self):
        return len(self.charts)

    @property
    def d(self):
        return self.charts[0].d

    @property
    def D(self):
        return self.charts[0].D

    @property
    def chart_prior(self):
        return np.full(self.n_charts, 1.0 / self.n_charts)

    # ---- densities ---------------------------------------------------
    def regularized_log_component(self, x, c):
        """log q(x|c) minus the reconstruction penalty lambda * ||x - rec||^2."""
        chart = self.charts[c]
        logq = chart.log_density(x)
        if self.lambda_recon == 0.0:
            return logq
        _, residual = chart.reconstruct(x)
        return logq - self.lambda_recon * residual

    def component_matrix(self, X):
        """[n, C] matrix of regularized per-chart log densities."""
        X = np.atleast_2d(np.asarray(X, dtype=np.float64))
        comp = np.stack([self.regularized_log_component(X, c)
                         for c in range(self.n_charts)], axis=-1)
        # a chart that cannot represent a point gets no responsibility
        return np.where(np.isnan(comp), -np.inf, comp)

    def mixture_log_density(self, x):
        """logsumexp over charts of the regularized components plus log 1/C."""
        comp = self.component_matrix(x) + np.log(1.0 / self.n_charts)
        out = _logsumexp(comp)
        return out if np.ndim(x) > 1 else float(out[0])

    def responsibilities(self, X, components=None):
        """Softmax of the regularized log components (uniform prior cancels)."""
        comp = self.component_matrix(X) if components is None else components
        m = np.max(comp, axis=-1, keepdims=True)
        with np.errstate(invalid="ignore"):
            e = np.exp(comp - m)
        return e / np.sum(e, axis=-1, keepdims=True)

    def filtered_responsibilities(self, X, components=None):
        """Threshold + renormalize; rows keep summing to 1."""
        r = self.responsibilities(X, components)
        keep = r >= self.resp_threshold
        # a threshold > max responsibility can only happen with threshold > 1/C
        if np.any(~keep.any(axis=-1)):
            raise ConfigError("responsibility threshold filtered out every chart")
        r = np.where(keep, r, 0.0)
        return r / np.sum(r, axis=-1, keepdims=True)

    def em_m_step_loss(self, X, R):
        """Eq.-12-style M-step objective at fixed responsibilities R."""
        R = np.atleast_2d(np.asarray(R, dtype=np.float64))
        comp = self.component_matrix(X)
        mask = R >= self.resp_threshold
        loss = -float(np.sum(mask * R * comp))
        if self.lambda_balance:
            mean_r = R.mean(axis=0)
            loss += self.lambda_balance * float(np.sum((mean_r - 1.0 / self.n_charts) ** 2))
        return loss

    # ---- persistence -------------------------------------------------
    MAGIC = "FLOWATLAS-ATLAS"
    VERSION = 1

    def save(self, fh):
        fh.write(f"{self.MAGIC} {self.VERSION}\n")
        fh.write(f"charts {self.n_charts}\n")
        fh.write(f"resp_threshold {self.resp_threshold:.17g}\n")
        fh.write(f"lambda_recon {self.lambda_recon:.17g}\n")
        fh.write(f"lambda_balance {self.lambda_balance:.17g}\n")
        for chart in self.charts:
            chart.save(fh)

    @classmethod
    def load(cls, fh):
        header = fh.readline().split()
        if len(header) != 2 or header[0] != cls.MAGIC:
            raise ValueError("not an atlas file")
        if int(header[1]) != cls.VERSION:
            raise ValueError(f"unsupported atlas format version {header[1]}")
        meta = {}
        for _ in range(4):
            k, v = fh.readline().split()
            meta[k] = v
        charts = [ChartFlow.load(fh) for _ in range(int(meta["charts"]))]
        return cls(charts, resp_threshold=float(meta["resp_threshold"]),
                   lambda_recon=float(meta["lambda_recon"]),
                   lambda_balance=float(meta["lambda_balance"]))

    def dumps(self):
        buf = io.StringIO()
        self.save(buf)
        return buf.getvalue()

    @classmethod
    def loads(cls, text):
        return cls.load(io.StringIO(text))


def _logsumexp(a):
    m = np.max(a, axis=-1, keepdims=True)
    safe = np.where(np.isneginf(m), 0.0, m)
    with np.errstate(divide="ignore"):
        out = np.squeeze(safe, axis=-1) + np.log(np.sum(np.exp(a - safe), axis=-1))
    return np.where(np.isneginf(np.squeeze(m, axis=-1)), -np.inf, out)


# ---------------------------------------------------------------------
# K-Means warm-up clustering
# ---------------------------------------------------------------------

def kmeans_init(X, C, seed, n_iter=100):
    """Lloyd's algorithm with k-means++ seeding; returns index sets."""
    X = np.asarray(X, dtype=np.float64)
    n = len(X)
    if n < C:
        raise ConfigError("need at least C points for K-Means")
    rng = np.random.default_rng(seed)

    centers = np.empty((C, X.shape[1]))
    centers[0] = X[rng.integers(n)]
    d2 = np.sum((X - centers[0]) ** 2, axis=1)
    for c in range(1, C):
        p = d2 / d2.sum() if d2.sum() > 0 else np.full(n, 1.0 / n)
        centers[c] = X[rng.choice(n, p=p)]
        d2 = np.minimum(d2, np.sum((X - centers[c]) ** 2, axis=1))

    labels = np.zeros(n, dtype=int)
    for _ in range(n_iter):
        dists = np.sum((X[:, None, :] - centers[None, :, :]) ** 2, axis=2)
        new_labels = np.argmin(dists, axis=1)
        for c in range(C):
            members = X[new_labels == c]
            if len(members) == 0:
                # reseed an empty cluster from the farthest point
                far = int(np.argmax(np.min(dists, axis=1)))
                centers[c] = X[far]
                new_labels[far] = c
            else:
                centers[c] = members.mean(axis=0)
        if np.array_equal(new_labels, labels):
            labels = new_labels
            break
        labels = new_labels
    return [np.where(labels == c)[0] for c in range(C)]


# ---------------------------------------------------------------------
# Torch training engine
# ---------------------------------------------------------------------

def _torch():
    import torch

    torch.set_default_dtype(torch.float64)
    return torch


def _torch_params(atlas, torch):
    """Nested torch mirrors of all chart parameters, plus the flat leaf list."""
    nested = []
    flat = []

    def conv(a):
        t = torch.tensor(np.asarray(a), dtype=torch.float64, requires_grad=True)
        flat.append(t)
        return t

    for chart in atlas.charts:
        nested.append(chart.nested_params(conv))
    return nested, flat


def _write_back(atlas, nested):
    for chart, params in zip(atlas.charts, nested):
        chart.load_nested_params(
            {k: [[[a.detach().numpy().copy() for a in net] for net in layer]
                 for layer in params[k]] for k in ("g", "h")})


def _snapshot(flat):
    return [t.detach().clone() for t in flat]


def _restore(flat, snap, torch):
    with torch.no_grad():
        for t, s in zip(flat, snap):
            t.copy_(s)


def _component_terms(chart, params, X, torch):
    """(log q, residual, reconstruction) for one chart on a torch batch."""
    z = chart.h_dagger(X, params)
    u, logdet_ginv = chart.g_inverse(z, params)
    base = -0.5 * chart.d * _LOG_2PI - 0.5 * (u * u).sum(dim=-1)

    xrec = chart.htilde(z, params)
    rows = []
    for m in range(chart.D):
        g = torch.autograd.grad(xrec[:, m].sum(), z, create_graph=True)[0]
        rows.append(g)
    J = torch.stack(rows, dim=1)  # [n, D, d]
    G = J.transpose(1, 2) @ J
    chol = torch.linalg.cholesky(G)
    gram_logdet = 2.0 * torch.log(torch.diagonal(chol, dim1=-2, dim2=-1)).sum(dim=-1)

    logq = base + logdet_ginv - 0.5 * gram_logdet
    residual = ((X - xrec) ** 2).sum(dim=-1)
    return logq, residual, xrec


def _reg_components(atlas, nested, X, torch, charts=None):
    """[n, C] regularized log components with gradients attached."""
    cols = []
    idx = range(atlas.n_charts) if charts is None else charts
    for c in idx:
        logq, residual, _ = _component_terms(atlas.charts[c], nested[c], X, torch)
        cols.append(logq - atlas.lambda_recon * residual)
    return torch.stack(cols, dim=1)


def _val_reconstruction(atlas, nested, X, torch):
    """Responsibility-weighted projection error on a validation set."""
    # the Gram term needs an autograd graph even here; detach afterwards
    comp = _reg_components(atlas, nested, X, torch).detach()
    r = torch.softmax(comp, dim=1)
    keep = r >= atlas.resp_threshold
    r = torch.where(keep, r, torch.zeros(()))
    r = r / r.sum(dim=1, keepdim=True)
    recs = []
    with torch.no_grad():
        for c, chart in enumerate(atlas.charts):
            recs.append(chart.htilde(chart.h_dagger(X, nested[c]), nested[c]))
    rec = sum(r[:, c:c + 1] * recs[c] for c in range(atlas.n_charts))
    return float(((X - rec) ** 2).sum(dim=1).mean())


@dataclass
class EpochRecord:
    epoch: int
    phase: str
    train_loss: float
    val_recon: float
    val_wasserstein: float = float("nan")


def history_to_csv(history):
    lines = ["epoch,phase,train_loss,val_recon,val_wasserstein"]
    for rec in history:
        lines.append(f"{rec.epoch},{rec.phase},{rec.train_loss:.10g},"
                     f"{rec.val_recon:.10g},{rec.val_wasserstein:.10g}")
    return "\n".join(lines) + "\n"


def train(atlas, X_train, X_val, cfg: TrainConfig, verbose=False):
    """Train the atlas in place; returns the per-epoch history list.

    EM: per batch an E-step (detached responsibilities) followed by one
    Adam M-step.  MLE: direct gradient on the negative mixture
    log-density.  SINGLE: C=1 joint objective.  SINGLE_M: first half of
    the epochs reconstruction-only on h, second half density-only on g.
    """
    torch = _torch()
    if cfg.mode in ("SINGLE", "SINGLE_M") and atlas.n_charts != 1:
        raise ConfigError(f"{cfg.mode} mode requires a single chart")
    X_train = np.asarray(X_train, dtype=np.float64)
    X_val = np.asarray(X_val, dtype=np.float64)
    if not (np.all(np.isfinite(X_train)) and np.all(np.isfinite(X_val))):
        raise ConfigError("training data must be finite")

    torch.manual_seed(cfg.seed)
    rng = np.random.default_rng(cfg.seed)
    nested, flat = _torch_params(atlas, torch)
    Xt = torch.as_tensor(X_train)
    Xv = torch.as_tensor(X_val)
    history = []

    if cfg.mode == "SINGLE_M":
        _train_single_m(atlas, nested, flat, Xt, Xv, cfg, rng, torch, history, verbose)
    else:
        if cfg.mode == "EM" and cfg.pretrain_epochs:
            _warmup(atlas, nested, Xt, cfg, rng, torch, history, verbose)
        _train_main(atlas, nested, flat, Xt, Xv, cfg, rng, torch, history, verbose)

    _write_back(atlas, nested)
    return history


def _batches(n, batch_size, rng):
    order = rng.permutation(n)
    for k in range(0, n, batch_size):
        yield order[k:k + batch_size]


def _warmup(atlas, nested, Xt, cfg, rng, torch, history, verbose):
    """Per-chart pretraining on K-Means clusters with the per-chart objective."""
    clusters = kmeans_init(Xt.numpy(), atlas.n_charts, cfg.seed)
    for c, idx in enumerate(clusters):
        if len(idx) == 0:
            raise ConfigError(f"warm-up cluster {c} is empty")
    opts = [torch.optim.Adam(_leaves(nested[c]), lr=cfg.learning_rate)
            for c in range(atlas.n_charts)]
    for epoch in range(cfg.pretrain_epochs):
        losses = []
        for c, idx in enumerate(clusters):
            Xc = Xt[idx]
            total = 0.0
            for batch in _batches(len(Xc), cfg.batch_size, rng):
                xb = Xc[batch]
                logq, residual, _ = _component_terms(atlas.charts[c], nested[c], xb, torch)
                loss = (-logq + atlas.lambda_recon * residual).mean()
                opts[c].zero_grad()
                loss.backward()
                opts[c].step()
                total += float(loss.detach()) * len(xb)
            losses.append(total / len(Xc))
        rec = EpochRecord(epoch, "warmup", float(np.mean(losses)), float("nan"))
        history.append(rec)
        if verbose and epoch % 20 == 0:
            print(f"warmup {epoch}: loss {rec.train_loss:.4f}", flush=True)


def _leaves(params):
    out = []
    for layer in params["g"] + params["h"]:
        for net in layer:
            out.extend(net)
    return out


def _train_main(atlas, nested, flat, Xt, Xv, cfg, rng, torch, history, verbose):
    opt = torch.optim.Adam(flat, lr=cfg.learning_rate)
    best = (np.inf, _snapshot(flat))
    stall = 0
    for epoch in range(cfg.epochs):
        total = 0.0
        for batch in _batches(len(Xt), cfg.batch_size, rng):
            xb = Xt[batch]
            comp = _reg_components(atlas, nested, xb, torch)
            if cfg.mode == "EM":
                with torch.no_grad():
                    r = torch.softmax(comp, dim=1)
                keep = (r >= atlas.resp_threshold).double()
                loss = -(keep * r * comp).sum() / len(xb)
                if atlas.lambda_balance:
                    r_live = torch.softmax(comp, dim=1)
                    loss = loss + atlas.lambda_balance * (
                        (r_live.mean(dim=0) - 1.0 / atlas.n_charts) ** 2).sum()
            else:  # MLE or SINGLE
                lse = torch.logsumexp(comp + np.log(1.0 / atlas.n_charts), dim=1)
                loss = -lse.mean()
            if not torch.isfinite(loss):
                _restore(flat, best[1], torch)
                raise NumericalError("training loss became non-finite")
            opt.zero_grad()
            loss.backward()
            opt.step()
            total += float(loss.detach()) * len(xb)
        train_loss = total / len(Xt)
        val_recon = _val_reconstruction(atlas, nested, Xv, torch)
        history.append(EpochRecord(epoch, "main", train_loss, val_recon))
        if verbose and epoch % 10 == 0:
            print(f"epoch {epoch}: loss {train_loss:.4f} val_recon {val_recon:.3e}",
                  flush=True)
        if val_recon < best[0]:
            best = (val_recon, _snapshot(flat))
            stall = 0
        elif epoch >= cfg.val_start:
            stall += 1
            if stall >= cfg.patience:
                break
    _restore(flat, best[1], torch)


def _train_single_m(atlas, nested, flat, Xt, Xv, cfg, rng, torch, history, verbose):
    from .evaluation import wasserstein

    chart = atlas.charts[0]
    params = nested[0]
    h_params = _leaves({"g": [], "h": params["h"]})
    g_params = _leaves({"g": params["g"], "h": []})

    # phase 1: reconstruction only, through h
    opt = torch.optim.Adam(h_params, lr=cfg.learning_rate)
    half = max(cfg.epochs // 2, 1)
    best = (np.inf, _snapshot(flat))
    stall = 0
    for epoch in range(half):
        total = 0.0
        for batch in _batches(len(Xt), cfg.batch_size, rng):
            xb = Xt[batch]
            _, residual = chart.reconstruct(xb, params)
            loss = residual.mean()
            opt.zero_grad()
            loss.backward()
            opt.step()
            total += float(loss.detach()) * len(xb)
        val_recon = float(chart.reconstruct(Xv, params)[1].mean().detach())
        history.append(EpochRecord(epoch, "reconstruction", total / len(Xt), val_recon))
        if val_recon < best[0]:
            best = (val_recon, _snapshot(flat))
            stall = 0
        elif epoch >= cfg.val_start:
            stall += 1
            if stall >= cfg.patience:
                break
    _restore(flat, best[1], torch)

    # phase 2: density only, through g, validated on the Wasserstein distance
    opt = torch.optim.Adam(g_params, lr=cfg.learning_rate)
    best = (np.inf, _snapshot(flat))
    stall = 0
    n_w = min(512, len(Xv))
    for epoch in range(half, cfg.epochs):
        total = 0.0
        for batch in _batches(len(Xt), cfg.batch_size, rng):
            xb = Xt[batch]
            with torch.no_grad():
                z = chart.h_dagger(xb, params)
            u, logdet_ginv = chart.g_inverse(z, params)
            base = -0.5 * chart.d * _LOG_2PI - 0.5 * (u * u).sum(dim=-1)
            loss = -(base + logdet_ginv).mean()
            opt.zero_grad()
            loss.backward()
            opt.step()
            total += float(loss.detach()) * len(xb)
        with torch.no_grad():
            _write_back(atlas, nested)
        samples = chart.sample(n_w, seed=cfg.seed + epoch)
        idx = rng.choice(len(Xv), size=n_w, replace=False)
        w = wasserstein(samples, np.asarray(Xv)[idx])
        val_recon = float(chart.reconstruct(Xv, params)[1].mean().detach())
        history.append(EpochRecord(epoch, "density", total / len(Xt), val_recon, w))
        if w < best[0]:
            best = (w, _snapshot(flat))
            stall = 0
        elif epoch - half >= cfg.val_start:
            stall += 1
            if stall >= cfg.patience:
                break
    _restore(flat, best[1], torch)
