"""Normalization layer family over the autodiff tape.

Every layer decomposes into partition (last axis, except BatchNorm's batch
axis), an optional compression of deviations, standardization to zero mean
and unit population variance, and an optional learnable affine step. The
pre-affine output is exposed separately (`normalize`) because the zero-mean
unit-variance contract lives there.
"""

import logging
import math
from dataclasses import dataclass, replace
from enum import Enum

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .compression import CompressionParams, compress
from .errors import ConfigError, ContractError, SaturationError

log = logging.getLogger(__name__)

COMPRESS_THEN_STANDARDIZE = "compress_then_standardize"
STANDARDIZE_THEN_COMPRESS = "standardize_then_compress"


class NormKind(Enum):
    LAYER_NORM = "layernorm"
    RMS_NORM = "rmsnorm"
    BATCH_NORM = "batchnorm"
    NORMAL_NORM = "normalnorm"
    IB_NORM = "ibnorm"


@dataclass(frozen=True)
class NormSpec:
    kind: NormKind
    compression: CompressionParams | None = None
    epsilon: float = 1e-5
    affine: bool = True
    order: str = COMPRESS_THEN_STANDARDIZE
    noise_factor: float = 0.0

    def __post_init__(self):
        if self.epsilon <= 0.0:
            raise ConfigError(f"epsilon must be positive, got {self.epsilon}")
        if (self.compression is not None) != (self.kind is NormKind.IB_NORM):
            raise ConfigError("compression params present iff kind is IBNorm")
        if self.order not in (COMPRESS_THEN_STANDARDIZE, STANDARDIZE_THEN_COMPRESS):
            raise ConfigError(f"unknown order {self.order!r}")
        if self.order == STANDARDIZE_THEN_COMPRESS and self.kind is not NormKind.IB_NORM:
            raise ContractError("standardize_then_compress order requires IBNorm")
        if self.noise_factor < 0.0:
            raise ConfigError("noise_factor must be nonnegative")

    def label(self):
        if self.kind is NormKind.IB_NORM:
            tag = f"ibnorm-{self.compression.kind.value.lower()}-lam{self.compression.lam:g}"
            if self.order == STANDARDIZE_THEN_COMPRESS:
                tag += "-star"
            if not self.affine:
                tag += "-noaffine"
            return tag
        return self.kind.value


@dataclass
class AffineParams:
    gamma: Tensor
    beta_shift: Tensor | None

    @classmethod
    def identity(cls, dim, with_shift=True):
        beta = Tensor(np.zeros(dim), requires_grad=True) if with_shift else None
        return cls(gamma=Tensor(np.ones(dim), requires_grad=True), beta_shift=beta)


@dataclass
class BatchStats:
    running_mean: np.ndarray
    running_var: np.ndarray
    momentum: float = 0.1

    @classmethod
    def fresh(cls, dim, momentum=0.1):
        return cls(np.zeros(dim), np.ones(dim), momentum)


def _standardize(x, eps, axis=-1):
    """Zero-mean unit-variance map as one fused node.

    For y = (x - mu)/s with population variance and s = sqrt(var + eps), the
    pullback is (g - mean(g) - y * mean(g*y)) / s along the reduced axis.
    """
    xv = x.array
    mu = xv.mean(axis=axis, keepdims=True)
    centered = xv - mu
    var = (centered * centered).mean(axis=axis, keepdims=True)
    s = np.sqrt(var + eps)
    y = centered / s

    def backward(g):
        gm = g.mean(axis=axis, keepdims=True)
        gy = (g * y).mean(axis=axis, keepdims=True)
        return ((g - gm - y * gy) / s,)

    return ad.record("standardize", (x,), y, backward)


def _apply_affine(y, affine):
    if affine is None:
        return y
    out = ad.mul(y, ad.broadcast(affine.gamma, y.shape))
    if affine.beta_shift is not None:
        out = ad.add(out, ad.broadcast(affine.beta_shift, y.shape))
    return out


# ---------------------------------------------------------------------------
# functional forwards
# ---------------------------------------------------------------------------

def layer_norm(x, eps=1e-5, affine=None):
    return _apply_affine(_standardize(x, eps), affine)


def rms_norm(x, eps=1e-5, affine=None):
    """y = x / sqrt(mean(x^2) + eps), no re-centering; fused pullback
    (g - y * mean(g*y)) / s."""
    xv = x.array
    s = np.sqrt((xv * xv).mean(axis=-1, keepdims=True) + eps)
    yv = xv / s

    def backward(g):
        gy = (g * yv).mean(axis=-1, keepdims=True)
        return ((g - yv * gy) / s,)

    y = ad.record("rms_standardize", (x,), yv, backward)
    if affine is not None:
        y = ad.mul(y, ad.broadcast(affine.gamma, y.shape))
    return y


def batch_norm(x, stats, train, eps=1e-5, affine=None):
    if x.ndim != 2:
        raise ContractError(f"batch_norm expects a 2-D batch, got {x.shape}")
    if train:
        if x.shape[0] < 2:
            raise ContractError("batch_norm in train mode requires batch size >= 2")
        y = _standardize(x, eps, axis=0)
        m = stats.momentum
        batch_mean = x.array.mean(axis=0)
        batch_var = x.array.var(axis=0)
        stats.running_mean = (1.0 - m) * stats.running_mean + m * batch_mean
        stats.running_var = (1.0 - m) * stats.running_var + m * batch_var
    else:
        mean = Tensor(stats.running_mean)
        denom = Tensor(np.sqrt(stats.running_var + eps))
        centered = ad.sub(x, ad.broadcast(mean, x.shape))
        y = ad.div(centered, ad.broadcast(denom, x.shape))
    return _apply_affine(y, affine)


def ibnorm(x, params, eps=1e-5, affine=None, order=COMPRESS_THEN_STANDARDIZE):
    if order == COMPRESS_THEN_STANDARDIZE:
        y = _standardize(compress(x, params), eps)
    elif order == STANDARDIZE_THEN_COMPRESS:
        y = compress(_standardize(x, eps), params)
    else:
        raise ContractError(f"unknown order {order!r}")
    return _apply_affine(y, affine)


def power_transform(c, lambda_hat):
    """Branchwise gaussianizing map, recorded with a fused derivative.

    x >= 0: ((x+1)^l - 1)/l, or ln(x+1) at l = 0;
    x <  0: -(((-x+1)^(2-l)) - 1)/(2-l), or -ln(-x+1) at l = 2.
    The derivative (x+1)^(l-1) / (-x+1)^(1-l) is continuous (value 1) at 0.
    """
    lam = float(lambda_hat)
    if not math.isfinite(lam):
        raise ContractError("lambda_hat must be finite")
    cv = c.array
    pos = cv >= 0.0
    cp = np.where(pos, cv, 0.0)
    cn = np.where(pos, 0.0, cv)

    with np.errstate(over="ignore", invalid="ignore"):
        if lam != 0.0:
            gp = (np.power(1.0 + cp, lam) - 1.0) / lam
        else:
            gp = np.log1p(cp)
        if lam != 2.0:
            gn = -(np.power(1.0 - cn, 2.0 - lam) - 1.0) / (2.0 - lam)
        else:
            gn = -np.log1p(-cn)
        out = np.where(pos, gp, gn)
        deriv = np.where(pos,
                         np.power(1.0 + cp, lam - 1.0),
                         np.power(1.0 - cn, 1.0 - lam))

    if not np.all(np.isfinite(out)):
        i = int(np.argmin(np.isfinite(out).reshape(-1)))
        raise SaturationError(
            f"power transform overflow at flat coordinate {i} "
            f"(input {cv.reshape(-1)[i]!r}, lambda_hat {lam!r})", coordinate=i)

    return ad.record("power_transform", (c,), out, lambda g: (g * deriv,))


def _power_log_jacobian(cv, lam):
    pos = cv >= 0.0
    return np.where(pos,
                    (lam - 1.0) * np.log1p(np.where(pos, cv, 0.0)),
                    (1.0 - lam) * np.log1p(-np.where(pos, 0.0, cv)))


def estimate_power_lambda(values, lo=-2.0, hi=4.0, iters=30):
    """Profile Gaussian MLE for the transform parameter by golden section.

    Maximizes -n/2 ln(sigma_hat^2) + sum log g'(c; lambda); the Jacobian term
    is what keeps the objective from degenerating into pure shrinkage.
    """
    c = np.asarray(values, dtype=np.float64).reshape(-1)
    n = c.size
    if n < 2:
        raise ContractError("need at least 2 values to estimate lambda_hat")

    def nll(lam):
        with np.errstate(over="ignore", invalid="ignore"):
            if lam != 0.0:
                gp = (np.power(1.0 + np.maximum(c, 0.0), lam) - 1.0) / lam
            else:
                gp = np.log1p(np.maximum(c, 0.0))
            if lam != 2.0:
                gn = -(np.power(1.0 - np.minimum(c, 0.0), 2.0 - lam) - 1.0) / (2.0 - lam)
            else:
                gn = -np.log1p(-np.minimum(c, 0.0))
            g = np.where(c >= 0.0, gp, gn)
            if not np.all(np.isfinite(g)):
                return np.inf
            var = g.var()
            if not np.isfinite(var) or var <= 0.0:
                return np.inf
            return 0.5 * n * np.log(var) - _power_log_jacobian(c, lam).sum()

    invphi = (math.sqrt(5.0) - 1.0) / 2.0
    a, b = float(lo), float(hi)
    x1 = b - invphi * (b - a)
    x2 = a + invphi * (b - a)
    f1, f2 = nll(x1), nll(x2)
    for _ in range(iters):
        if f1 <= f2:
            b, x2, f2 = x2, x1, f1
            x1 = b - invphi * (b - a)
            f1 = nll(x1)
        else:
            a, x1, f1 = x1, x2, f2
            x2 = a + invphi * (b - a)
            f2 = nll(x2)
    best = x1 if f1 <= f2 else x2
    if not math.isfinite(nll(best)):
        raise ContractError("lambda_hat likelihood is degenerate on this sample")
    return float(best)


def normal_norm(x, eps=1e-5, affine=None, noise_factor=0.0, rng=None,
                train=True, lambda_hat=None):
    """Standardize, gaussianize with an estimated power transform, then add
    scaled noise (train only); the transform parameter and noise statistics
    are computed outside the gradient graph."""
    c = _standardize(x, eps)
    if lambda_hat is None:
        try:
            lam_hat = estimate_power_lambda(c.array)
        except ContractError as e:
            log.warning("lambda_hat estimation failed (%s); falling back to 1.0", e)
            lam_hat = 1.0
    else:
        lam_hat = float(lambda_hat)

    t = power_transform(c, lam_hat)
    if train and noise_factor > 0.0:
        if rng is None:
            raise ContractError("normal_norm noise requires a seeded rng")
        tv = t.array
        xbar = tv.mean(axis=-1, keepdims=True)
        s = np.abs(tv - xbar).mean(axis=-1, keepdims=True)
        z = rng.standard_normal(tv.shape)
        t = ad.add(t, Tensor(z * s * noise_factor))
    return _apply_affine(t, affine), lam_hat


# ---------------------------------------------------------------------------
# layer objects
# ---------------------------------------------------------------------------

class NormLayer:
    """A built normalization layer bound to a feature dimension."""

    def __init__(self, spec, dim):
        self.spec = spec
        self.dim = dim
        self.affine = AffineParams.identity(
            dim, with_shift=spec.kind is not NormKind.RMS_NORM) if spec.affine else None
        self.stats = BatchStats.fresh(dim) if spec.kind is NormKind.BATCH_NORM else None
        self.last_lambda_hat = None
        self.fixed_lambda_hat = None

    def parameters(self):
        out = {}
        if self.affine is not None:
            out["gamma"] = self.affine.gamma
            if self.affine.beta_shift is not None:
                out["beta"] = self.affine.beta_shift
        return out

    def state_arrays(self):
        if self.stats is None:
            return {}
        return {"running_mean": self.stats.running_mean,
                "running_var": self.stats.running_var}

    def load_state(self, arrays):
        if self.stats is not None:
            self.stats.running_mean = arrays["running_mean"].copy()
            self.stats.running_var = arrays["running_var"].copy()

    def _forward(self, x, train, rng, affine):
        spec = self.spec
        kind = spec.kind
        if x.shape[-1] != self.dim and kind is not NormKind.BATCH_NORM:
            raise ContractError(f"feature dim {x.shape[-1]} != layer dim {self.dim}")
        if kind is NormKind.LAYER_NORM:
            return layer_norm(x, spec.epsilon, affine)
        if kind is NormKind.RMS_NORM:
            return rms_norm(x, spec.epsilon, affine)
        if kind is NormKind.BATCH_NORM:
            return batch_norm(x, self.stats, train, spec.epsilon, affine)
        if kind is NormKind.IB_NORM:
            return ibnorm(x, spec.compression, spec.epsilon, affine, spec.order)
        if kind is NormKind.NORMAL_NORM:
            out, lam_hat = normal_norm(
                x, spec.epsilon, affine, noise_factor=spec.noise_factor if train else 0.0,
                rng=rng, train=train, lambda_hat=self.fixed_lambda_hat)
            self.last_lambda_hat = lam_hat
            return out
        raise ConfigError(f"unknown norm kind {kind!r}")

    def forward(self, x, train=True, rng=None):
        return self._forward(x, train, rng, self.affine)

    def normalize(self, x, train=True, rng=None):
        """Pre-affine output (the locus of the zero-mean/unit-variance contract)."""
        return self._forward(x, train, rng, None)

    def __call__(self, x, train=True, rng=None):
        return self.forward(x, train, rng)


def build_norm(spec, feature_dim):
    """Construct a layer: gamma initialized to ones, beta to zeros."""
    if not isinstance(spec.kind, NormKind):
        raise ConfigError(f"unknown norm kind {spec.kind!r}")
    if feature_dim < 1:
        raise ConfigError(f"feature_dim must be >= 1, got {feature_dim}")
    if spec.kind is NormKind.IB_NORM:
        if spec.compression is None:
            raise ConfigError("IBNorm requires compression params")
        if spec.compression.group_size != feature_dim:
            spec = replace(spec,
                           compression=replace(spec.compression, group_size=feature_dim))
    return NormLayer(spec, feature_dim)


def norm_spec_to_dict(spec):
    d = {"kind": spec.kind.value, "epsilon": spec.epsilon, "affine": spec.affine,
         "order": spec.order, "noise_factor": spec.noise_factor}
    if spec.compression is not None:
        d["compression"] = {"kind": spec.compression.kind.value,
                            "lam": spec.compression.lam,
                            "group_size": spec.compression.group_size}
    return d


def norm_spec_from_dict(d):
    from .compression import CompressionKind

    comp = None
    if d.get("compression"):
        c = d["compression"]
        comp = CompressionParams(kind=CompressionKind.parse(c["kind"]),
                                 lam=c["lam"], group_size=c.get("group_size", 1))
    return NormSpec(kind=NormKind(d["kind"]), compression=comp,
                    epsilon=d.get("epsilon", 1e-5), affine=d.get("affine", True),
                    order=d.get("order", COMPRESS_THEN_STANDARDIZE),
                    noise_factor=d.get("noise_factor", 0.0))


def parse_norm_name(name, lam=4.0, epsilon=1e-5, affine=True,
                    order=COMPRESS_THEN_STANDARDIZE, noise_factor=0.0):
    """Build a NormSpec from a CLI-style name like 'layernorm' or 'ibnorm-l'."""
    from .compression import CompressionKind

    key = str(name).strip().lower()
    if key.startswith("ibnorm"):
        parts = key.split("-")
        if len(parts) != 2 or parts[1] not in ("s", "l", "t"):
            raise ConfigError(f"expected ibnorm-s/l/t, got {name!r}")
        comp = CompressionParams(kind=CompressionKind.parse(parts[1]), lam=lam)
        return NormSpec(kind=NormKind.IB_NORM, compression=comp, epsilon=epsilon,
                        affine=affine, order=order)
    try:
        kind = NormKind(key)
    except ValueError:
        raise ConfigError(f"unknown norm name {name!r}") from None
    if kind is NormKind.IB_NORM:
        raise ConfigError("use ibnorm-s/l/t to pick the compression variant")
    return NormSpec(kind=kind, epsilon=epsilon, affine=affine,
                    noise_factor=noise_factor)
