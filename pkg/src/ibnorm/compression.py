"""Bounded compression of deviations around the group mean.

Three variants act on r = |x - mean|: linear r/lam, logarithmic ln(1 + r/lam)
and hyperbolic tangent tanh(r/lam). All satisfy 0 <= f(r) <= r/lam for
lam >= 1, so the map never expands deviations; the supremum of f(r)/r is
1/lam for every variant.
"""

import logging
import warnings
from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from . import autodiff, kernels

from .errors import ContractError, NumericError

log = logging.getLogger(__name__)


class CompressionKind(Enum):
    S = "S"  # linear
    L = "L"  # logarithmic
    T = "T"  # hyperbolic tangent

    @property
    def code(self):
        return {"S": kernels.KIND_S, "L": kernels.KIND_L, "T": kernels.KIND_T}[self.value]

    @classmethod
    def parse(cls, name):
        try:
            return cls(str(name).upper())
        except ValueError:
            raise ContractError(f"unknown compression kind {name!r}") from None


@dataclass(frozen=True)
class CompressionParams:
    kind: CompressionKind
    lam: float
    group_size: int = 1
    bounded_certified: bool = field(init=False)

    def __post_init__(self):
        if self.lam <= 0.0:
            raise ContractError(f"lam must be positive, got {self.lam}")
        if self.group_size < 1:
            raise ContractError(f"group_size must be >= 1, got {self.group_size}")
        certified = self.lam >= 1.0
        object.__setattr__(self, "bounded_certified", certified)
        if not certified:
            warnings.warn(
                f"lam={self.lam:g} < 1 lies outside the certified "
                "bounded-compression regime", RuntimeWarning, stacklevel=2)


def f_lambda(kind, r, lam):
    """f(r) for r >= 0; scalar in, scalar out; arrays pass through elementwise."""
    if lam <= 0.0:
        raise ContractError(f"lam must be positive, got {lam}")
    r_arr = np.asarray(r, dtype=np.float64)
    if np.any(r_arr < 0.0):
        raise ContractError("f_lambda: r must be nonnegative")
    out = kernels.f_eval(r_arr, lam, kind.code)
    return float(out) if np.isscalar(r) or r_arr.ndim == 0 else out


def f_lambda_deriv(kind, r, lam):
    """f'(r) for r >= 0 (S: 1/lam, L: 1/(lam+r), T: sech^2(r/lam)/lam)."""
    if lam <= 0.0:
        raise ContractError(f"lam must be positive, got {lam}")
    r_arr = np.asarray(r, dtype=np.float64)
    if np.any(r_arr < 0.0):
        raise ContractError("f_lambda_deriv: r must be nonnegative")
    out = kernels.f_deriv(r_arr, lam, kind.code)
    return float(out) if np.isscalar(r) or r_arr.ndim == 0 else out


def compression_ratio(kind, lam, r_grid=None):
    """The supremum of f(r)/r, equal to 1/lam for every kind.

    When `r_grid` is supplied, certifies 0 <= f(r) <= r/lam on the grid and
    raises NumericError with a witness point if the bound breaks.
    """
    if lam <= 0.0:
        raise ContractError(f"lam must be positive, got {lam}")
    ratio = 1.0 / lam
    if r_grid is not None:
        r = np.asarray(r_grid, dtype=np.float64)
        vals = f_lambda(kind, r, lam)
        bad_low = vals < 0.0
        bad_high = vals > ratio * r
        if np.any(bad_low | bad_high):
            i = int(np.argmax(bad_low | bad_high))
            raise NumericError(
                f"bounded compression violated for kind={kind.value} lam={lam} "
                f"at r={r.reshape(-1)[i]}: f={np.asarray(vals).reshape(-1)[i]}")
    return ratio


def deviation_jacobian_bound(kind, lam, r):
    """f'(r), asserted <= 1/lam; a violation means a broken derivative rule."""
    if lam < 1.0:
        raise ContractError(f"jacobian bound requires lam >= 1, got {lam}")
    d = f_lambda_deriv(kind, r, lam)
    if np.any(np.asarray(d) > 1.0 / lam):
        raise NumericError(
            f"derivative bound violated: kind={kind.value} lam={lam} r={r}: f'={d}")
    return d


def compress(x, params):
    """s(x) = mean + sign(x - mean) * f(|x - mean|) over last-axis groups.

    Recorded on the active graph as one fused node. The jacobian is
    d s_i / d x_j = delta_ij * f'(|u_i|) + (1/H)(1 - f'(|u_i|)), i.e. the
    deviation map's derivative f'(|u|) (continuous at u = 0 with limit
    1/lam, avoiding the abs/sign subgradient deadzone) plus the group-mean
    coupling with weight 1/H.
    """
    if x.size == 0 or x.shape[-1] == 0:
        raise ContractError("compress: empty slice")
    if x.shape[-1] != params.group_size:
        raise ContractError(
            f"compress: slice length {x.shape[-1]} != group_size {params.group_size}")
    lam, code = params.lam, params.kind.code
    xv = x.array
    mu = xv.mean(axis=-1, keepdims=True)
    u = xv - mu
    out = mu + kernels.dev_compress(u, lam, code)

    def backward(g):
        fprime = kernels.dev_compress_deriv(u, lam, code)
        mean_term = (g * (1.0 - fprime)).mean(axis=-1, keepdims=True)
        return (g * fprime + mean_term,)

    return autodiff.record("compress", (x,), out, backward)
