"""Base distributions and reusable closed-form log-density kernels.

Two base distributions feed the flow: a diagonal standard Gaussian and a
per-dimension student-t with trainable degrees of freedom. The kernels
(normal, student-t, half-Cauchy, inverse-gamma, Bernoulli-logit) are written
against the dual-mode diffcore ops, so they evaluate on plain arrays and
differentiate on a tape alike.

Convention: batches are (b, d) matrices, one sample per row; log densities
return (b,) per-row values.
"""

import numpy as np

from . import diffcore as dc

LOG_2PI = float(np.log(2.0 * np.pi))


def spawn_rng(seed, *key):
    """Independent Generator derived from (seed, key...) by fixed offsets."""
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=tuple(int(k) for k in key))
    return np.random.Generator(np.random.PCG64(ss))


def log_gamma(x):
    """Log-gamma; differentiable for Variables (gradient = digamma)."""
    if isinstance(x, dc.Variable):
        return dc.lgamma(x)
    return dc.lgamma_np(x)


def softplus_inverse_np(y):
    """Inverse of softplus on arrays: log(exp(y) - 1), stable for large y."""
    y = np.asarray(y, dtype=np.float64)
    out = y + np.log1p(-np.exp(-y))
    return out if out.shape else float(out)


# --- sampling ----------------------------------------------------------------


def gamma_sample(rng, shape, size=None):
    """Gamma(shape, scale=1) draws via the Marsaglia-Tsang squeeze method.

    `shape` must be >= 1 everywhere (all users here have shape = nu/2 > 1 or
    posterior shapes >= 2). Draws are consumed from `rng` in a deterministic
    order, so runs are reproducible for a fixed seed.
    """
    a = np.asarray(shape, dtype=np.float64)
    if size is not None:
        a = np.broadcast_to(a, size)
    a = np.array(a, copy=True)
    if np.any(a < 1.0):
        raise ValueError(f"gamma_sample: shape must be >= 1, got min {a.min()}")
    scalar = a.shape == ()
    a = np.atleast_1d(a)
    d = a - 1.0 / 3.0
    c = 1.0 / np.sqrt(9.0 * d)
    out = np.empty_like(d)
    pending = np.ones(d.shape, dtype=bool)
    while pending.any():
        idx = np.flatnonzero(pending)
        x = rng.standard_normal(idx.size)
        u = rng.uniform(size=idx.size)
        v = (1.0 + c.flat[idx] * x) ** 3
        with np.errstate(all="ignore"):
            squeeze = u < 1.0 - 0.0331 * x ** 4
            full = np.log(u) < 0.5 * x * x + d.flat[idx] * (1.0 - v + np.log(v))
        accept = (v > 0.0) & (squeeze | full)
        take = idx[accept]
        out.flat[take] = d.flat[take] * v[accept]
        pending.flat[take] = False
    return float(out[0]) if scalar else out


def inv_gamma_sample(rng, shape, scale, size=None):
    """Inverse-gamma draws: 1 / Gamma(shape, rate=scale)."""
    return scale / gamma_sample(rng, shape, size=size)


# --- density kernels ----------------------------------------------------------


def normal_logpdf(x, mean, var):
    """log N(x; mean, var), elementwise."""
    return -0.5 * (LOG_2PI + dc.log(var) + dc.square(x - mean) / var)


def student_t_logpdf(x, dof):
    """Standard student-t log density with dof degrees of freedom, elementwise."""
    half = 0.5 * (dof + 1.0)
    c = log_gamma(half) - log_gamma(0.5 * dof) - 0.5 * (np.log(np.pi) + np.log(dof))
    return c - half * dc.log1p(dc.square(x) / dof)


def half_cauchy_logpdf(x, scale):
    """log density of C+(0, scale) on x >= 0."""
    c = np.log(2.0) - np.log(np.pi) - np.log(scale)
    return c - dc.log1p(dc.square(x / scale))


def inv_gamma_logpdf(x, shape, scale):
    """log Inv-Gamma(x; shape, scale) on x > 0."""
    c = shape * np.log(scale) - dc.lgamma_np(shape)
    return c - (shape + 1.0) * dc.log(x) - scale / x


def bernoulli_logit_logpdf(y, logit):
    """log Bernoulli(y; sigmoid(logit)) via the stable form -softplus(-(2y-1)*logit).

    y is a constant 0/1 array; a (n,) y pairs with (b,n) logits per row.
    """
    sgn = 2.0 * np.asarray(y, dtype=np.float64) - 1.0
    lv = dc.value_of(logit)
    if np.ndim(lv) == 2 and sgn.ndim == 1:
        signed = dc.mul_row(logit, sgn)
    else:
        signed = logit * sgn
    return -dc.softplus(-signed)


# --- base distributions --------------------------------------------------------


class DiagGaussianBase:
    """Independent standard normal in each of `dim` dimensions."""

    def __init__(self, dim):
        self.dim = int(dim)

    def parameters(self):
        return {}

    def sample(self, n, rng):
        return rng.standard_normal((n, self.dim))

    def log_prob(self, z, pvars=None):
        return -0.5 * self.dim * LOG_2PI - 0.5 * dc.sum(dc.square(z), axis=1)


class StudentTBase:
    """Independent student-t per dimension with trainable degrees of freedom.

    nu_j = softplus(raw_dof_j) + 2, so variance is always finite; initialized
    at nu = 30 (a near-Gaussian start). Gradients w.r.t. raw_dof flow only
    through the density, never through the sampling path: the gamma draw is a
    constant of the tape. Set train_dof=False to freeze nu entirely.
    """

    def __init__(self, dim, init_dof=30.0, train_dof=True):
        self.dim = int(dim)
        if init_dof <= 2.0:
            raise ValueError("init_dof must exceed 2")
        self.raw_dof = np.full(self.dim, softplus_inverse_np(init_dof - 2.0))
        self.train_dof = bool(train_dof)

    def parameters(self):
        return {"raw_dof": self.raw_dof} if self.train_dof else {}

    def dof_values(self):
        return dc.softplus_np(self.raw_dof) + 2.0

    def sample(self, n, rng):
        nu = self.dof_values()
        eps = rng.standard_normal((n, self.dim))
        g = gamma_sample(rng, 0.5 * nu, size=(n, self.dim))
        return eps * np.sqrt(0.5 * nu / g)

    def log_prob(self, z, pvars=None):
        raw = pvars["raw_dof"] if pvars and "raw_dof" in pvars else self.raw_dof
        nu = dc.softplus(raw) + 2.0
        half = 0.5 * (nu + 1.0)
        const = dc.lgamma(half) - dc.lgamma(0.5 * nu) - 0.5 * (dc.log(nu) + np.log(np.pi))
        tail = dc.mul_row(dc.log1p(dc.mul_row(dc.square(z), dc.powc(nu, -1.0))), half)
        return dc.sum(const) - dc.sum(tail, axis=1)
