"""Matrix-kernel mutual-information estimation and layerwise IB accounting.

Representations are l2-normalized row-wise, turned into Gaussian-kernel Gram
matrices with unit trace, and entropy is read off the eigenvalue spectrum:
H = -sum_k lam_k ln lam_k (nats). Joint similarity is the Hadamard product of
the marginal kernels, renormalized. Mutual information is H(U)+H(V)-H(U,V).
"""

import csv
import json
import logging
from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .errors import ContractError, EstimationError, NumericError

log = logging.getLogger(__name__)

EIG_FLOOR = 1e-12          # eigenvalues below this are treated as exact zeros
NEG_EIG_TOLERANCE = -1e-8  # anything more negative signals a numeric failure


@dataclass
class GramMatrix:
    entries: np.ndarray
    trace_normalized: bool
    n: int

    def validate(self, atol_sym=1e-12, atol_trace=1e-12):
        g = self.entries
        if g.shape != (self.n, self.n):
            raise ContractError(f"gram shape {g.shape} != ({self.n}, {self.n})")
        if np.max(np.abs(g - g.T)) > atol_sym:
            raise NumericError("gram matrix is not symmetric")
        if np.any(g < 0.0):
            raise NumericError("gram matrix has negative entries")
        if self.trace_normalized and abs(np.trace(g) - 1.0) > atol_trace:
            raise NumericError(f"trace {np.trace(g)} != 1")
        w = np.linalg.eigvalsh((g + g.T) / 2.0)
        if w.min() < NEG_EIG_TOLERANCE:
            raise NumericError(f"gram matrix not PSD: min eigenvalue {w.min()}")
        return self


@dataclass
class MaskMatrix:
    diag: np.ndarray  # boolean flags, True = active

    def __post_init__(self):
        self.diag = np.asarray(self.diag, dtype=bool)
        if self.diag.ndim != 1:
            raise ContractError("mask must be a 1-D diagonal")
        if not self.diag.any():
            raise ContractError("mask needs at least one active entry")

    @property
    def n_active(self):
        return int(self.diag.sum())


def _l2_normalize_rows(u):
    u = np.asarray(u, dtype=np.float64)
    if u.ndim != 2:
        raise ContractError(f"expected a batch of vectors, got shape {u.shape}")
    norms = np.linalg.norm(u, axis=1, keepdims=True)
    zero = norms[:, 0] == 0.0
    if zero.any():
        log.info("gram: %d zero vector(s) left unnormalized", int(zero.sum()))
        norms = np.where(norms == 0.0, 1.0, norms)
    return u / norms


def _raw_kernel(u, sigma):
    d2 = kernels.pairwise_sq_dists(_l2_normalize_rows(u))
    return np.exp(-d2 / (2.0 * sigma * sigma))


def gram(u, sigma=1.0):
    """Trace-normalized Gaussian-kernel similarity matrix of a batch."""
    u = np.asarray(u, dtype=np.float64)
    if u.ndim != 2 or u.shape[0] < 2:
        raise ContractError(f"gram needs at least 2 vectors, got shape {u.shape}")
    if sigma <= 0.0:
        raise ContractError(f"sigma must be positive, got {sigma}")
    n = u.shape[0]
    k = _raw_kernel(u, sigma)
    return GramMatrix(entries=k / n, trace_normalized=True, n=n)


def matrix_entropy(g):
    """Spectral entropy -sum lam ln lam of a unit-trace PSD matrix (nats)."""
    if not g.trace_normalized:
        raise ContractError("matrix_entropy requires a trace-normalized gram")
    sym = (g.entries + g.entries.T) / 2.0
    try:
        w = np.linalg.eigvalsh(sym)
    except np.linalg.LinAlgError as e:
        raise NumericError(
            f"eigendecomposition failed (n={g.n}, "
            f"cond~{np.linalg.cond(sym):.3g}): {e}") from e
    if w.min() < NEG_EIG_TOLERANCE:
        raise NumericError(f"negative eigenvalue {w.min()} beyond tolerance")
    w = np.clip(w, 0.0, 1.0)
    w[w < EIG_FLOOR] = 0.0
    nz = w[w > 0.0]
    return float(-(nz * np.log(nz)).sum())


def joint_gram(g_u, g_v):
    """Hadamard product of two gram matrices, trace-renormalized."""
    if g_u.n != g_v.n:
        raise ContractError(f"gram sizes differ: {g_u.n} vs {g_v.n}")
    prod = g_u.entries * g_v.entries
    tr = np.trace(prod)
    if tr <= 0.0:
        raise NumericError("joint gram has nonpositive trace")
    return GramMatrix(entries=prod / tr, trace_normalized=True, n=g_u.n)


def _masked_normalized(raw, mask):
    if mask is not None:
        m = mask.diag.astype(np.float64)
        raw = raw * m[:, None] * m[None, :]
    tr = np.trace(raw)
    if tr <= 0.0:
        raise NumericError("masked gram has nonpositive trace")
    n = raw.shape[0]
    return GramMatrix(entries=raw / tr, trace_normalized=True, n=n)


def mutual_information(u, v, sigma=1.0, mask=None):
    """I(U;V) = H(U) + H(V) - H(U,V); small negative estimates pass through.

    Masking zeroes inactive rows/columns of the raw kernels (marginals and
    joint) before trace normalization.
    """
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    if u.ndim != 2 or v.ndim != 2 or u.shape[0] != v.shape[0]:
        raise ContractError(f"batch sizes differ: {u.shape} vs {v.shape}")
    if u.shape[0] < 2:
        raise ContractError("mutual information needs at least 2 instances")
    if mask is not None:
        if mask.diag.shape[0] != u.shape[0]:
            raise ContractError("mask length does not match batch size")
        if mask.n_active < 2:
            raise EstimationError(
                f"only {mask.n_active} active instance(s); need >= 2")
    ku = _raw_kernel(u, sigma)
    kv = _raw_kernel(v, sigma)
    h_u = matrix_entropy(_masked_normalized(ku, mask))
    h_v = matrix_entropy(_masked_normalized(kv, mask))
    h_uv = matrix_entropy(_masked_normalized(ku * kv, mask))
    return h_u + h_v - h_uv


@dataclass
class IBTrace:
    """Per-layer, per-timestep information estimates and their aggregate."""

    i_y: np.ndarray      # (P, L): I(Y; T_l) at timestep p
    i_prev: np.ndarray   # (P, L): I(T_{l-1}; T_l) at timestep p
    beta: float
    sigma: float
    ib_value: float = field(init=False)

    def __post_init__(self):
        self.i_y = np.asarray(self.i_y, dtype=np.float64)
        self.i_prev = np.asarray(self.i_prev, dtype=np.float64)
        if self.i_y.shape != self.i_prev.shape or self.i_y.ndim != 2:
            raise ContractError("i_y and i_prev must share a (P, L) shape")
        if not (np.all(np.isfinite(self.i_y)) and np.all(np.isfinite(self.i_prev))):
            raise NumericError("non-finite mutual information estimate")
        self.ib_value = self.recompute_aggregate()

    @property
    def n_timesteps(self):
        return self.i_y.shape[0]

    @property
    def n_layers(self):
        return self.i_y.shape[1]

    def contributions(self):
        return self.i_y - self.beta * self.i_prev

    def recompute_aggregate(self):
        return float(self.contributions().sum(axis=1).mean())

    def to_dict(self):
        return {
            "beta": self.beta,
            "sigma": self.sigma,
            "n_timesteps": self.n_timesteps,
            "n_layers": self.n_layers,
            "ib_value": self.ib_value,
            "i_y": self.i_y.tolist(),
            "i_prev": self.i_prev.tolist(),
        }

    def write_json(self, path):
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_dict(), fh, indent=2, sort_keys=True)
            fh.write("\n")

    def write_csv(self, path):
        contrib = self.contributions()
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(["timestep", "layer", "i_y", "i_prev", "ib_contrib"])
            for p in range(self.n_timesteps):
                for l in range(self.n_layers):
                    w.writerow([p + 1, l + 1,
                                repr(self.i_y[p, l]), repr(self.i_prev[p, l]),
                                repr(contrib[p, l])])

    @classmethod
    def from_dict(cls, d):
        return cls(i_y=np.array(d["i_y"]), i_prev=np.array(d["i_prev"]),
                   beta=d["beta"], sigma=d["sigma"])


def token_ib_value(reps, labels, beta=1.0, sigma=1.0, masks=None):
    """Aggregate layerwise IB estimates over sampled timesteps.

    `reps[p]` holds the batches T_0..T_L at timestep p (T_0 is the input
    representation), `labels[p]` the label embeddings Y. The aggregate is the
    timestep mean of sum_l (I(Y;T_l) - beta * I(T_{l-1};T_l)).
    """
    n_steps = len(reps)
    if n_steps == 0 or len(labels) != n_steps:
        raise ContractError("reps and labels must align on timesteps")
    if masks is not None and len(masks) != n_steps:
        raise ContractError("masks must align on timesteps")
    n_layers = len(reps[0]) - 1
    if n_layers < 1:
        raise ContractError("need at least one layer beyond T_0")

    i_y = np.empty((n_steps, n_layers))
    i_prev = np.empty((n_steps, n_layers))
    for p in range(n_steps):
        chain = reps[p]
        if len(chain) != n_layers + 1:
            raise ContractError(
                f"timestep {p}: expected {n_layers + 1} representation batches, "
                f"got {len(chain)}")
        mask = masks[p] if masks is not None else None
        for l in range(1, n_layers + 1):
            i_y[p, l - 1] = mutual_information(labels[p], chain[l], sigma, mask)
            i_prev[p, l - 1] = mutual_information(chain[l - 1], chain[l], sigma, mask)
    return IBTrace(i_y=i_y, i_prev=i_prev, beta=beta, sigma=sigma)
