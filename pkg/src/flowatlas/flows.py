"""Degenerate normalizing flows built from affine coupling layers.

A chart flow maps a d-dimensional latent space into a D-dimensional
ambient space as ``x = h(Pad(g(u)))`` where ``g`` is a square flow on R^d
and ``h`` a square flow on R^D.  The embedding half ``htilde(z) =
h(Pad(z))`` has the left inverse ``h_dagger = Proj o h^{-1}``, which acts
as a projection onto the chart surface.

All layer arithmetic is written against the dispatching ops in
:mod:`flowatlas.autodiff`, so the same code path evaluates on numpy
arrays, dual numbers (for Jacobians and the geodesic quadratic form) and
torch tensors (for the training mirror).  Canonical parameters are numpy
float64; an optional ``params`` argument overrides them with
backend-specific tensors of the same nesting.
"""

from __future__ import annotations

import io
import numpy as np

from . import autodiff as ad
from .errors import DimensionError, NumericalError, SingularMetricError

_LOG_2PI = float(np.log(2.0 * np.pi))


def pad(z, D):
    """Append D - d zeros to the last axis."""
    z = np.asarray(z, dtype=np.float64)
    d = z.shape[-1]
    if d > D:
        raise DimensionError(f"cannot pad {d}-dim vectors to {D} dims")
    out = np.zeros(z.shape[:-1] + (D,))
    out[..., :d] = z
    return out


def proj(y, d):
    """Keep the first d coordinates of the last axis."""
    y = np.asarray(y, dtype=np.float64)
    if d > y.shape[-1]:
        raise DimensionError(f"cannot project {y.shape[-1]}-dim vectors to {d} dims")
    return y[..., :d]


class MLP:
    """Fully connected tanh network; final layer linear.

    ``n_in`` may be zero, in which case the network is a learnable
    constant (used by coupling layers on 1-dimensional spaces).
    """

    def __init__(self, n_in, n_out, hidden, rng, zero_last=True):
        self.n_in = n_in
        self.n_out = n_out
        self.hidden = tuple(hidden)
        sizes = [n_in, *hidden, n_out]
        self.weights = []
        self.biases = []
        for i in range(len(sizes) - 1):
            fan_in = max(sizes[i], 1)
            last = i == len(sizes) - 2
            scale = 0.0 if (zero_last and last) else 1.0 / np.sqrt(fan_in)
            self.weights.append(rng.normal(0.0, 1.0, size=(sizes[i], sizes[i + 1])) * scale)
            self.biases.append(np.zeros(sizes[i + 1]))

    def param_list(self):
        out = []
        for w, b in zip(self.weights, self.biases):
            out.append(w)
            out.append(b)
        return out

    def set_param_list(self, arrays):
        k = 0
        for i in range(len(self.weights)):
            self.weights[i] = np.asarray(arrays[k], dtype=np.float64).reshape(self.weights[i].shape)
            self.biases[i] = np.asarray(arrays[k + 1], dtype=np.float64).reshape(self.biases[i].shape)
            k += 2

    def apply(self, x, params=None):
        arrs = params if params is not None else self.param_list()
        n_layers = len(arrs) // 2
        for i in range(n_layers):
            x = x @ arrs[2 * i] + arrs[2 * i + 1]
            if i < n_layers - 1:
                x = ad.tanh(x)
        return x


def _coupling_mask(dim, layer_index):
    """Boolean pass-through mask; alternates parity per layer.

    On 1-dimensional spaces nothing can condition on anything, so the
    single coordinate is always transformed (nets become learnable
    constants).
    """
    if dim == 1:
        return np.zeros(1, dtype=bool)
    return (np.arange(dim) % 2) == (layer_index % 2)


class CouplingLayer:
    """Affine coupling: unmasked coords get x*exp(s)+t, conditioned on masked ones."""

    def __init__(self, dim, mask, hidden, rng, s_max=2.0):
        self.dim = dim
        self.mask = np.asarray(mask, dtype=bool)
        if self.mask.shape != (dim,):
            raise DimensionError("mask shape must match dim")
        self.idx_in = np.where(self.mask)[0].tolist()
        self.idx_out = np.where(~self.mask)[0].tolist()
        if not self.idx_out:
            raise DimensionError("coupling mask transforms no coordinates")
        self.s_max = float(s_max)
        self.scale = MLP(len(self.idx_in), len(self.idx_out), hidden, rng)
        self.shift = MLP(len(self.idx_in), len(self.idx_out), hidden, rng)
        # scatter matrix: [k_out, dim] picking unmasked slots
        sel = np.zeros((len(self.idx_out), dim))
        sel[np.arange(len(self.idx_out)), self.idx_out] = 1.0
        self._sel = sel
        self._mvec = self.mask.astype(np.float64)
        self._torch_consts = None

    def _consts(self, x):
        if ad._is_torch(x):
            if self._torch_consts is None or self._torch_consts[0].device != x.device:
                import torch

                self._torch_consts = (
                    torch.as_tensor(self._sel, dtype=torch.float64, device=x.device),
                    torch.as_tensor(self._mvec, dtype=torch.float64, device=x.device),
                )
            return self._torch_consts
        return self._sel, self._mvec

    def _nets(self, x, params):
        xin = x[..., self.idx_in]
        if params is None:
            s_raw = self.scale.apply(xin)
            t = self.shift.apply(xin)
        else:
            s_raw = self.scale.apply(xin, params[0])
            t = self.shift.apply(xin, params[1])
        s = ad.tanh(s_raw * (1.0 / self.s_max)) * self.s_max
        return s, t

    def forward(self, x, params=None):
        sel, m = self._consts(x)
        s, t = self._nets(x, params)
        s_full = s @ sel
        t_full = t @ sel
        y = x * m + (x * ad.exp(s_full) + t_full) * (1.0 - m)
        logdet = _last_sum(s)
        return y, logdet

    def inverse(self, y, params=None):
        sel, m = self._consts(y)
        s, t = self._nets(y, params)  # masked inputs are identical in x and y
        s_full = s @ sel
        t_full = t @ sel
        x = y * m + (y - t_full) * ad.exp(-s_full) * (1.0 - m)
        logdet = -_last_sum(s)
        return x, logdet

    def param_list(self):
        return [self.scale.param_list(), self.shift.param_list()]


def _last_sum(x):
    if isinstance(x, ad.Dual):
        return ad.Dual(x.value.sum(axis=-1), x.tangent.sum(axis=-1))
    if isinstance(x, ad.Dual2):
        return ad.Dual2(x.value.sum(axis=-1), x.d1.sum(axis=-1), x.d2.sum(axis=-1))
    if ad._is_torch(x):
        return x.sum(dim=-1)
    return np.sum(x, axis=-1)


def _stack_forward(layers, x, params=None):
    logdet = 0.0
    for i, layer in enumerate(layers):
        x, ld = layer.forward(x, None if params is None else params[i])
        logdet = logdet + ld
    return x, logdet


def _stack_inverse(layers, y, params=None):
    logdet = 0.0
    for i in range(len(layers) - 1, -1, -1):
        y, ld = layers[i].inverse(y, None if params is None else params[i])
        logdet = logdet + ld
    return y, logdet


class FlowParams:
    """Flat parameter vector plus the shape layout needed to restore it."""

    def __init__(self, vector, shapes):
        self.vector = np.asarray(vector, dtype=np.float64)
        self.shapes = list(shapes)

    def to_arrays(self):
        out = []
        k = 0
        for shape in self.shapes:
            n = int(np.prod(shape)) if shape else 1
            out.append(self.vector[k:k + n].reshape(shape))
            k += n
        return out


class ChartFlow:
    """One degenerate flow f = htilde o g from R^d into R^D."""

    def __init__(self, d, D, n_g_layers=3, n_h_layers=9, hidden=(16, 16),
                 s_max=2.0, seed=0):
        if d < 1:
            raise DimensionError("latent dimension must be >= 1")
        if d > D:
            raise DimensionError("latent dimension cannot exceed ambient dimension")
        self.d = d
        self.D = D
        self.hidden = tuple(hidden)
        self.s_max = float(s_max)
        rng = np.random.default_rng(seed)
        self.g_layers = [CouplingLayer(d, _coupling_mask(d, i), hidden, rng, s_max)
                         for i in range(n_g_layers)]
        self.h_layers = [CouplingLayer(D, _coupling_mask(D, i), hidden, rng, s_max)
                         for i in range(n_h_layers)]

    # ---- raw stacks -------------------------------------------------
    def g_forward(self, u, params=None):
        return _stack_forward(self.g_layers, u, None if params is None else params["g"])

    def g_inverse(self, z, params=None):
        return _stack_inverse(self.g_layers, z, None if params is None else params["g"])

    def h_forward(self, y, params=None):
        return _stack_forward(self.h_layers, y, None if params is None else params["h"])

    def h_inverse(self, x, params=None):
        return _stack_inverse(self.h_layers, x, None if params is None else params["h"])

    # ---- chart surface ----------------------------------------------
    def htilde(self, z, params=None):
        """Embedding half h(Pad(z)); accepts numpy, Dual/Dual2 or torch input."""
        if isinstance(z, (ad.Dual, ad.Dual2)) or ad._is_torch(z):
            y = _generic_pad(z, self.D)
        else:
            y = pad(z, self.D)
        x, _ = self.h_forward(y, params)
        return x

    def h_dagger(self, x, params=None):
        """Left inverse Proj o h^{-1}; a projection onto the chart surface."""
        y, _ = self.h_inverse(x, params)
        return y[..., :self.d]

    def forward(self, u, params=None):
        """Map latent samples to ambient space; also return log|det J_g|."""
        z, logdet_g = self.g_forward(u, params)
        return self.htilde(z, params), logdet_g

    def reconstruct(self, x, params=None):
        x_rec = self.htilde(self.h_dagger(x, params), params)
        diff = x - x_rec
        if ad._is_torch(x):
            residual = (diff * diff).sum(dim=-1)
        else:
            residual = np.sum(np.asarray(diff) ** 2, axis=-1)
        return x_rec, residual

    # ---- densities ---------------------------------------------------
    def gram_logdet(self, z):
        """log det(J_htilde^T J_htilde) at latent points z (numpy only)."""
        J = ad.jacobian(lambda zz: self.htilde(zz), np.asarray(z, dtype=np.float64))
        G = np.einsum("...mi,...mj->...ij", J, J)
        try:
            chol = np.linalg.cholesky(G)
        except np.linalg.LinAlgError as e:
            raise SingularMetricError("Jacobian Gram matrix is not positive definite") from e
        return 2.0 * np.sum(np.log(np.einsum("...ii->...i", chol)), axis=-1)

    def log_density(self, x):
        """Rectangular change-of-variables density of the flow at x.

        x is interpreted through its projection onto the chart surface:
        log p(u) - log|det J_g| - 0.5 log det(J_htilde^T J_htilde).
        """
        x = np.asarray(x, dtype=np.float64)
        z = self.h_dagger(x)
        u, logdet_g_inv = self.g_inverse(z)
        base = -0.5 * self.d * _LOG_2PI - 0.5 * np.sum(u * u, axis=-1)
        return base + logdet_g_inv - 0.5 * self.gram_logdet(z)

    def sample(self, n, seed):
        if n < 1:
            raise ValueError("need n >= 1 samples")
        rng = np.random.default_rng(seed)
        u = rng.standard_normal((n, self.d))
        x, _ = self.forward(u)
        if not np.all(np.isfinite(x)):
            raise NumericalError("non-finite samples")
        return x

    # ---- parameters --------------------------------------------------
    def param_arrays(self):
        """Canonical flat list of parameter arrays (g layers then h layers)."""
        out = []
        for layer in self.g_layers + self.h_layers:
            out.extend(layer.scale.param_list())
            out.extend(layer.shift.param_list())
        return out

    def set_param_arrays(self, arrays):
        k = 0
        for layer in self.g_layers + self.h_layers:
            n = len(layer.scale.param_list())
            layer.scale.set_param_list(arrays[k:k + n])
            k += n
            n = len(layer.shift.param_list())
            layer.shift.set_param_list(arrays[k:k + n])
            k += n
        if k != len(arrays):
            raise DimensionError("parameter array count mismatch")

    def get_flow_params(self):
        arrays = self.param_arrays()
        vec = np.concatenate([a.ravel() for a in arrays]) if arrays else np.zeros(0)
        return FlowParams(vec, [a.shape for a in arrays])

    def set_flow_params(self, fp):
        self.set_param_arrays(fp.to_arrays())

    def nested_params(self, convert=None):
        """Nested {"g": [...], "h": [...]} parameter structure.

        ``convert`` maps each numpy array (e.g. to a torch tensor).
        """
        conv = (lambda a: a) if convert is None else convert

        def layer_params(layer):
            return [[conv(a) for a in layer.scale.param_list()],
                    [conv(a) for a in layer.shift.param_list()]]

        return {"g": [layer_params(l) for l in self.g_layers],
                "h": [layer_params(l) for l in self.h_layers]}

    def load_nested_params(self, params):
        for key, layers in (("g", self.g_layers), ("h", self.h_layers)):
            for layer, (sc, sh) in zip(layers, params[key]):
                layer.scale.set_param_list([np.asarray(a) for a in sc])
                layer.shift.set_param_list([np.asarray(a) for a in sh])

    # ---- serialization ----------------------------------------------
    MAGIC = "FLOWATLAS-CHART"
    VERSION = 1

    def save(self, fh):
        fh.write(f"{self.MAGIC} {self.VERSION}\n")
        fh.write(f"d {self.d}\nD {self.D}\n")
        fh.write(f"g_layers {len(self.g_layers)}\nh_layers {len(self.h_layers)}\n")
        fh.write("hidden " + " ".join(str(h) for h in self.hidden) + "\n")
        fh.write(f"s_max {self.s_max:.17g}\n")
        for i, a in enumerate(self.param_arrays()):
            fh.write(f"param {i} " + " ".join(str(s) for s in a.shape) + "\n")
            fh.write(" ".join(f"{v:.17g}" for v in a.ravel()) + "\n")
        fh.write("end\n")

    @classmethod
    def load(cls, fh):
        header = fh.readline().split()
        if len(header) != 2 or header[0] != cls.MAGIC:
            raise ValueError("not a chart flow file")
        if int(header[1]) != cls.VERSION:
            raise ValueError(f"unsupported chart format version {header[1]}")
        meta = {}
        for _ in range(6):
            parts = fh.readline().split()
            meta[parts[0]] = parts[1:]
        flow = cls(d=int(meta["d"][0]), D=int(meta["D"][0]),
                   n_g_layers=int(meta["g_layers"][0]),
                   n_h_layers=int(meta["h_layers"][0]),
                   hidden=tuple(int(h) for h in meta["hidden"]),
                   s_max=float(meta["s_max"][0]))
        arrays = []
        while True:
            line = fh.readline()
            parts = line.split()
            if not parts or parts[0] == "end":
                break
            if parts[0] != "param":
                raise ValueError(f"unexpected token {parts[0]!r} in chart file")
            shape = tuple(int(s) for s in parts[2:])
            vals = np.fromiter(map(float, fh.readline().split()), dtype=np.float64)
            arrays.append(vals.reshape(shape))
        flow.set_param_arrays(arrays)
        return flow

    def dumps(self):
        buf = io.StringIO()
        self.save(buf)
        return buf.getvalue()

    @classmethod
    def loads(cls, text):
        return cls.load(io.StringIO(text))


def _generic_pad(z, D):
    """Pad for Dual/Dual2/torch inputs via a constant embedding matrix."""
    if isinstance(z, ad.Dual):
        d = z.value.shape[-1]
    elif isinstance(z, ad.Dual2):
        d = z.value.shape[-1]
    else:
        d = z.shape[-1]
    if d > D:
        raise DimensionError(f"cannot pad {d}-dim vectors to {D} dims")
    P = np.zeros((d, D))
    P[np.arange(d), np.arange(d)] = 1.0
    if ad._is_torch(z):
        import torch

        P = torch.as_tensor(P, dtype=torch.float64, device=z.device)
    return z @ P
