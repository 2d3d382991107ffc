"""The bijection stack: affine layer, Real NVP couplings with pluggable soft
clamping of the scale, and the LOFT tail compressor.

Every layer exposes forward (with its log-det contribution) and an exact
inverse. Parameters live in flat dicts keyed "coupling_03.s.w1",
"affine.mu", ...; bind() turns them into tape Variables for training, while
plain arrays flow through the same code paths for untaped evaluation.

Two stack orderings exist: "classic" applies the trainable affine map to the
base draw first and then the couplings; "proposed" runs the couplings first,
optionally LOFT, and the affine map last (re-adjusting scale the clamps may
have removed).
"""

import json
from dataclasses import dataclass, field

import numpy as np

from . import diffcore as dc
from .distributions import DiagGaussianBase, StudentTBase

HIDDEN_UNITS = 100
DEFAULT_TAU = 100.0
DEFAULT_ALPHA_NEG = 2.0
DEFAULT_ALPHA_POS = 0.1

VARIANT_NAMES = (
    "standard",
    "ataf",
    "symclip",
    "proposed-gauss-loft",
    "proposed-student-loft",
    "proposed-gauss-noloft",
    "proposed-student-noloft",
    "meanfield",
)


@dataclass(frozen=True)
class ClampSpec:
    """Soft clamp applied to the coupling scale output s.

    kind "none" leaves s untouched; "tanh" squashes to (-1, 1); "arctan" to
    (-alpha, alpha) symmetrically; "asym" to (-alpha_neg, alpha_pos) with a
    much tighter positive bound.
    """

    kind: str = "none"
    alpha_neg: float = DEFAULT_ALPHA_NEG
    alpha_pos: float = DEFAULT_ALPHA_POS

    def __post_init__(self):
        if self.kind not in ("none", "tanh", "arctan", "asym"):
            raise ValueError(f"unknown clamp kind {self.kind!r}")
        if self.kind == "asym" and not (self.alpha_neg > self.alpha_pos > 0):
            raise ValueError("asym clamp needs alpha_neg > alpha_pos > 0")
        if self.kind == "arctan" and self.alpha_neg <= 0:
            raise ValueError("arctan clamp needs a positive alpha")


def apply_clamp(s, spec):
    """Clamp the raw scale output; differentiable for every mode."""
    if spec.kind == "none":
        return s
    if spec.kind == "tanh":
        return dc.tanh(s)
    if spec.kind == "arctan":
        return dc.arctan_clamp(s, spec.alpha_neg, spec.alpha_neg)
    return dc.arctan_clamp(s, spec.alpha_neg, spec.alpha_pos)


def partition(d):
    """Alternating index partition: even positions and odd positions."""
    idx = np.arange(d)
    return idx[idx % 2 == 0], idx[idx % 2 == 1]


def _sub(pvars, prefix):
    if pvars is None:
        return None
    cut = len(prefix)
    return {k[cut:]: v for k, v in pvars.items() if k.startswith(prefix)}


class Conditioner:
    """Two-layer perceptron (in -> HIDDEN_UNITS -> out, ReLU).

    The hidden layer gets uniform init scaled by 1/sqrt(fan-in); the output
    layer starts at exactly zero so the enclosing coupling is the identity
    before training.
    """

    def __init__(self, in_dim, out_dim, rng, hidden=HIDDEN_UNITS):
        bound = 1.0 / np.sqrt(in_dim)
        self.w1 = rng.uniform(-bound, bound, size=(in_dim, hidden))
        self.b1 = rng.uniform(-bound, bound, size=hidden)
        self.w2 = np.zeros((hidden, out_dim))
        self.b2 = np.zeros(out_dim)

    def parameters(self):
        return {"w1": self.w1, "b1": self.b1, "w2": self.w2, "b2": self.b2}

    def apply(self, p, x):
        if p is None:
            p = self.parameters()
        h = dc.relu(dc.add_row(dc.matmul(x, p["w1"]), p["b1"]))
        return dc.add_row(dc.matmul(h, p["w2"]), p["b2"])


class CouplingLayer:
    """One affine coupling: keeps z_A, maps z_B to z_B * exp(c(s(z_A))) + t(z_A).

    index is 1-based; the A/B partition alternates between layers so that
    consecutive masks are complementary.
    """

    def __init__(self, index, dim, clamp, rng):
        s0, s1 = partition(dim)
        sets = (s0, s1)
        self.index = int(index)
        self.dim = int(dim)
        self.idx_a = sets[(index + 1) % 2]
        self.idx_b = sets[index % 2]
        self.clamp = clamp
        self.s_net = Conditioner(len(self.idx_a), len(self.idx_b), rng)
        self.t_net = Conditioner(len(self.idx_a), len(self.idx_b), rng)

    def parameters(self):
        out = {}
        for head, net in (("s", self.s_net), ("t", self.t_net)):
            for k, v in net.parameters().items():
                out[f"{head}.{k}"] = v
        return out

    def forward(self, p, z, collect=False):
        za = dc.take_cols(z, self.idx_a)
        zb = dc.take_cols(z, self.idx_b)
        c = apply_clamp(self.s_net.apply(_sub(p, "s."), za), self.clamp)
        t = self.t_net.apply(_sub(p, "t."), za)
        scale = dc.exp(c)
        zb2 = zb * scale + t
        z2 = dc.join_cols(self.dim, (self.idx_a, za), (self.idx_b, zb2))
        logdet = dc.sum(c, axis=1)
        aux = None
        if collect:
            aux = {
                "t_max": float(np.max(np.abs(dc.value_of(t)))),
                "scale_max": float(np.max(dc.value_of(scale))),
            }
        return z2, logdet, aux

    def inverse(self, p, y):
        ya = dc.take_cols(y, self.idx_a)
        yb = dc.take_cols(y, self.idx_b)
        c = apply_clamp(self.s_net.apply(_sub(p, "s."), ya), self.clamp)
        t = self.t_net.apply(_sub(p, "t."), ya)
        zb = (yb - t) * dc.exp(-c)
        z = dc.join_cols(self.dim, (self.idx_a, ya), (self.idx_b, zb))
        return z, -dc.sum(c, axis=1)


class LoftLayer:
    """Odd bijection: identity on [-tau, tau], logarithmic growth outside.

    Branch-free in terms of sign/abs/max/min/log1p; the per-dimension
    log-derivative is -log1p(max(|z| - tau, 0)) exactly, including at the
    seam |z| = tau.
    """

    def __init__(self, tau=DEFAULT_TAU):
        if tau <= 0:
            raise ValueError("tau must be positive")
        self.tau = float(tau)

    def parameters(self):
        return {}

    def forward(self, p, z, collect=False):
        excess = dc.maximum(dc.abs(z) - self.tau, 0.0)
        lg = dc.log1p(excess)
        y = dc.sign(z) * lg + dc.clip(z, -self.tau, self.tau)
        return y, -dc.sum(lg, axis=1), None

    def inverse(self, p, y):
        yv = np.asarray(dc.value_of(y))
        over = np.abs(yv) - self.tau
        if np.any(over > 700.0):
            raise dc.DomainError("loft_inverse", float(np.max(np.abs(yv))))
        excess = dc.maximum(dc.abs(y) - self.tau, 0.0)
        z = dc.sign(y) * dc.expm1(excess) + dc.clip(y, -self.tau, self.tau)
        # d g^-1 / dy = exp(max(|y| - tau, 0)), so the log-det is the excess itself.
        return z, dc.sum(excess, axis=1)


class AffineLayer:
    """Trainable elementwise z -> sigma * z + mu with sigma = exp(log_scale).

    Initialized to the identity (mu = 0, log_scale = 0).
    """

    def __init__(self, dim):
        self.dim = int(dim)
        self.mu = np.zeros(self.dim)
        self.log_scale = np.zeros(self.dim)

    def parameters(self):
        return {"mu": self.mu, "log_scale": self.log_scale}

    def forward(self, p, z, collect=False):
        if p is None:
            p = self.parameters()
        y = dc.add_row(dc.mul_row(z, dc.exp(p["log_scale"])), p["mu"])
        return y, dc.sum(p["log_scale"]), None

    def inverse(self, p, y):
        if p is None:
            p = self.parameters()
        z = dc.mul_row(dc.add_row(y, dc.neg(p["mu"])), dc.exp(dc.neg(p["log_scale"])))
        return z, -dc.sum(p["log_scale"])


@dataclass
class FlowTrace:
    """Diagnostics collected during one forward pass."""

    input_max_abs: float = 0.0
    layer_max_abs: dict = field(default_factory=dict)  # coupling index -> max |z|
    t_max_abs: float = 0.0
    scale_max: float = 0.0
    nonfinite_stage: str = ""  # empty when everything stayed finite


def trace_layers(r):
    """Coupling indices whose post-layer max-abs is recorded: {4, 32, 64}
    clipped to the available depth."""
    return sorted({min(l, r) for l in (4, 32, 64)}) if r >= 1 else []


class FlowStack:
    """Ordered bijection layers with forward-plus-log-det and exact inverse.

    ordering "classic":  f = f_r o ... o f_1 o affine        (no LOFT slot)
    ordering "proposed": f = affine o [loft] o f_r o ... o f_1
    """

    def __init__(self, dim, couplings, affine, loft=None, ordering="proposed"):
        if ordering not in ("classic", "proposed"):
            raise ValueError(f"unknown ordering {ordering!r}")
        if ordering == "classic" and loft is not None:
            raise ValueError("classic ordering has no LOFT slot")
        self.dim = int(dim)
        self.couplings = list(couplings)
        self.affine = affine
        self.loft = loft
        self.ordering = ordering
        self.r = len(self.couplings)

    # -- parameter plumbing --

    def parameters(self):
        out = {}
        for k, v in self.affine.parameters().items():
            out[f"affine.{k}"] = v
        for i, lay in enumerate(self.couplings):
            for k, v in lay.parameters().items():
                out[f"coupling_{i:02d}.{k}"] = v
        return out

    def copy_parameters(self):
        return {k: v.copy() for k, v in self.parameters().items()}

    def set_parameters(self, params):
        own = self.parameters()
        if set(own) != set(params):
            missing = set(own) ^ set(params)
            raise ValueError(f"parameter keys do not match the stack layout: {sorted(missing)}")
        for k, arr in own.items():
            src = np.asarray(params[k], dtype=np.float64)
            if src.shape != arr.shape:
                raise ValueError(f"parameter {k}: shape {src.shape} != {arr.shape}")
            arr[...] = src

    def bind(self, tape, frozen=False):
        """Leaf Variables for every parameter; frozen wraps them in
        stop_gradient so the graph treats them as constants."""
        out = {}
        for k, arr in self.parameters().items():
            v = tape.leaf(arr)
            out[k] = dc.stop_gradient(v) if frozen else v
        return out

    # -- geometry --

    def _stages(self):
        stages = []
        if self.ordering == "classic":
            stages.append(("affine", self.affine))
            for i, lay in enumerate(self.couplings):
                stages.append((f"coupling_{i:02d}", lay))
        else:
            for i, lay in enumerate(self.couplings):
                stages.append((f"coupling_{i:02d}", lay))
            if self.loft is not None:
                stages.append(("loft", self.loft))
            stages.append(("affine", self.affine))
        return stages

    def forward(self, z, pvars=None, collect=False):
        """Push base draws through the stack.

        Returns (theta, per-sample log-det, FlowTrace or None). Non-finite
        intermediates are flagged in the trace, never raised.
        """
        trace = FlowTrace() if collect else None
        traced = set(trace_layers(self.r))
        logdet = None
        coupling_no = 0
        cur = z
        for name, lay in self._stages():
            if collect and name.startswith("coupling") and coupling_no == 0:
                trace.input_max_abs = float(np.max(np.abs(dc.value_of(cur))))
            cur, ld, aux = lay.forward(_sub(pvars, name + "."), cur, collect=collect)
            logdet = ld if logdet is None else logdet + ld
            if name.startswith("coupling"):
                coupling_no += 1
            if collect:
                m = float(np.max(np.abs(dc.value_of(cur))))
                if not np.isfinite(m) and not trace.nonfinite_stage:
                    trace.nonfinite_stage = name
                if name.startswith("coupling") and coupling_no in traced:
                    trace.layer_max_abs[coupling_no] = m
                if aux:
                    trace.t_max_abs = max(trace.t_max_abs, aux["t_max"])
                    trace.scale_max = max(trace.scale_max, aux["scale_max"])
        return cur, self._per_sample(logdet, cur), trace

    def inverse(self, theta, pvars=None):
        """Exact layer-by-layer inversion in reverse stage order.

        Returns (z, per-sample log-det of the inverse map).
        """
        logdet = None
        cur = theta
        for name, lay in reversed(self._stages()):
            cur, ld = lay.inverse(_sub(pvars, name + "."), cur)
            logdet = ld if logdet is None else logdet + ld
        return cur, self._per_sample(logdet, cur)

    @staticmethod
    def _per_sample(logdet, ref):
        """Affine-only stacks yield a scalar log-det; broadcast it per sample."""
        if np.ndim(dc.value_of(logdet)) == 0:
            b = dc.value_of(ref).shape[0]
            return logdet + np.zeros(b)
        return logdet


# --- factories -----------------------------------------------------------------


def build_flow(dim, r, ordering, clamp, with_loft, tau=DEFAULT_TAU, rng=None):
    rng = rng if rng is not None else np.random.default_rng(0)
    couplings = [CouplingLayer(i, dim, clamp, rng) for i in range(1, r + 1)]
    loft = LoftLayer(tau) if with_loft else None
    return FlowStack(dim, couplings, AffineLayer(dim), loft=loft, ordering=ordering)


def mean_field_flow(dim):
    """Mean-field Gaussian as a flow: just the trainable affine map."""
    return FlowStack(dim, [], AffineLayer(dim), loft=None, ordering="classic")


def build_variant(name, dim, r, rng, tau=DEFAULT_TAU,
                  alpha_neg=DEFAULT_ALPHA_NEG, alpha_pos=DEFAULT_ALPHA_POS):
    """The closed variant registry: (flow stack, base distribution) per name.

    standard    Gaussian base, no clamp, classic ordering
    ataf        student-t base, tanh clamp, classic ordering
    symclip     Gaussian base, symmetric arctan clamp, classic ordering
    proposed-*  asym clamp (alpha_neg, alpha_pos), affine last, with/without
                LOFT, Gaussian or student-t base
    meanfield   affine-only flow, Gaussian base
    """
    asym = ClampSpec("asym", alpha_neg, alpha_pos)
    if name == "standard":
        return build_flow(dim, r, "classic", ClampSpec("none"), False, tau, rng), DiagGaussianBase(dim)
    if name == "ataf":
        return build_flow(dim, r, "classic", ClampSpec("tanh"), False, tau, rng), StudentTBase(dim)
    if name == "symclip":
        return build_flow(dim, r, "classic", ClampSpec("arctan", alpha_neg=alpha_neg), False, tau, rng), DiagGaussianBase(dim)
    if name == "proposed-gauss-loft":
        return build_flow(dim, r, "proposed", asym, True, tau, rng), DiagGaussianBase(dim)
    if name == "proposed-student-loft":
        return build_flow(dim, r, "proposed", asym, True, tau, rng), StudentTBase(dim)
    if name == "proposed-gauss-noloft":
        return build_flow(dim, r, "proposed", asym, False, tau, rng), DiagGaussianBase(dim)
    if name == "proposed-student-noloft":
        return build_flow(dim, r, "proposed", asym, False, tau, rng), StudentTBase(dim)
    if name == "meanfield":
        return mean_field_flow(dim), DiagGaussianBase(dim)
    raise ValueError(f"unknown variant {name!r}; valid: {', '.join(VARIANT_NAMES)}")


# --- snapshot serialization ------------------------------------------------------

SNAPSHOT_MAGIC = b"FLOWVI-SNAP1\n"


def save_snapshot(path, params, meta=None):
    """Write parameters as a flat key-value file.

    Layout: magic line, one JSON header line ({"format": 1, "meta": ...,
    "entries": [{"key", "shape"}, ...]}), then the float64 little-endian
    payload concatenated in entry order.
    """
    entries = [{"key": k, "shape": list(np.shape(v))} for k, v in sorted(params.items())]
    header = json.dumps({"format": 1, "meta": meta or {}, "entries": entries},
                        sort_keys=True) + "\n"
    with open(path, "wb") as fh:
        fh.write(SNAPSHOT_MAGIC)
        fh.write(header.encode("utf-8"))
        for e in entries:
            arr = np.ascontiguousarray(params[e["key"]], dtype="<f8")
            fh.write(arr.tobytes())


def load_snapshot(path):
    """Read a snapshot written by save_snapshot; returns (params, meta)."""
    with open(path, "rb") as fh:
        magic = fh.read(len(SNAPSHOT_MAGIC))
        if magic != SNAPSHOT_MAGIC:
            raise ValueError(f"{path}: not a flowvi snapshot (bad magic)")
        header = json.loads(fh.readline().decode("utf-8"))
        if header.get("format") != 1:
            raise ValueError(f"{path}: unsupported snapshot format {header.get('format')}")
        params = {}
        for e in header["entries"]:
            shape = tuple(e["shape"])
            n = int(np.prod(shape)) if shape else 1
            buf = fh.read(8 * n)
            if len(buf) != 8 * n:
                raise ValueError(f"{path}: truncated payload at {e['key']}")
            params[e["key"]] = np.frombuffer(buf, dtype="<f8").reshape(shape).astype(np.float64)
    return params, header.get("meta", {})
