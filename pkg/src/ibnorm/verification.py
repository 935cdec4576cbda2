"""Machine-checkable property suite behind the `verify` subcommand.

Each check returns a CheckResult with pass/fail and witness values; the CLI
turns the list into a JSON report and an exit code. The acceptance tests
reuse these implementations at their stated tolerances.
"""

import time
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree
from scipy.special import digamma, gammaln

from . import autodiff as ad
from .autodiff import Tensor
from .compression import CompressionKind, CompressionParams, compress, f_lambda, f_lambda_deriv
from .errors import GradCheckError
from .estimator import gram, matrix_entropy, mutual_information
from .layers import (NormKind, NormSpec, STANDARDIZE_THEN_COMPRESS,
                     build_norm, layer_norm, parse_norm_name)

ALL_KINDS = (CompressionKind.S, CompressionKind.L, CompressionKind.T)
LAM_GRID = (1.0, 2.0, 4.0, 8.0)
R_GRID = np.logspace(-6.0, 3.0, 200)


@dataclass
class CheckResult:
    name: str
    passed: bool
    details: dict = field(default_factory=dict)
    elapsed_s: float = 0.0

    def to_dict(self):
        return {"name": self.name, "passed": self.passed,
                "elapsed_s": round(self.elapsed_s, 3), "details": self.details}


def _timed(fn):
    def wrapper(**kw):
        t0 = time.perf_counter()
        result = fn(**kw)
        result.elapsed_s = time.perf_counter() - t0
        return result
    wrapper.__name__ = fn.__name__
    return wrapper


@_timed
def check_bounded_compression():
    for kind in ALL_KINDS:
        for lam in LAM_GRID:
            vals = f_lambda(kind, R_GRID, lam)
            ok = (vals >= 0.0) & (vals <= R_GRID / lam)
            if not np.all(ok):
                i = int(np.argmin(ok))
                return CheckResult("bounded_compression", False, {
                    "kind": kind.value, "lam": lam, "r": R_GRID[i],
                    "f": float(np.asarray(vals)[i]), "bound": R_GRID[i] / lam})
    return CheckResult("bounded_compression", True,
                       {"kinds": 3, "lambdas": list(LAM_GRID),
                        "grid_points": R_GRID.size})


@_timed
def check_jacobian_bound():
    for kind in ALL_KINDS:
        for lam in LAM_GRID:
            d = f_lambda_deriv(kind, R_GRID, lam)
            ok = d <= 1.0 / lam
            if not np.all(ok):
                i = int(np.argmin(ok))
                return CheckResult("jacobian_bound", False, {
                    "kind": kind.value, "lam": lam, "r": R_GRID[i],
                    "fprime": float(np.asarray(d)[i]), "bound": 1.0 / lam})
    return CheckResult("jacobian_bound", True,
                       {"kinds": 3, "lambdas": list(LAM_GRID),
                        "grid_points": R_GRID.size})


GRAD_CHECK_LAYERS = ("layernorm", "rmsnorm", "batchnorm", "normalnorm",
                     "ibnorm-s", "ibnorm-l", "ibnorm-t",
                     "ibnorm-s-star", "ibnorm-l-star", "ibnorm-t-star")


def _layer_for(label, dim):
    if label.startswith("ibnorm"):
        parts = label.split("-")
        order = STANDARDIZE_THEN_COMPRESS if parts[-1] == "star" else \
            "compress_then_standardize"
        comp = CompressionParams(kind=CompressionKind.parse(parts[1]), lam=4.0,
                                 group_size=dim)
        spec = NormSpec(kind=NormKind.IB_NORM, compression=comp, affine=True,
                        order=order)
    elif label == "normalnorm":
        spec = NormSpec(kind=NormKind.NORMAL_NORM)
    elif label == "batchnorm":
        spec = NormSpec(kind=NormKind.BATCH_NORM)
    else:
        spec = parse_norm_name(label)
    layer = build_norm(spec, dim)
    if label == "normalnorm":
        layer.fixed_lambda_hat = 0.8  # fixed transform for derivative checks
    return layer


@_timed
def check_gradient_fidelity(n_inputs=50, tolerance=1e-4, dim=8, rows=4):
    worst = {"err": 0.0, "layer": None, "seed": None}
    for label in GRAD_CHECK_LAYERS:
        layer = _layer_for(label, dim)
        for seed in range(n_inputs):
            rng = np.random.default_rng(seed)
            x = rng.standard_normal((rows, dim)) * 1.5
            while np.min(np.abs(x - x.mean(axis=-1, keepdims=True))) <= 1e-3:
                x = rng.standard_normal((rows, dim)) * 1.5
            w = rng.standard_normal((rows, dim))

            def f(t):
                y = layer.forward(t, train=True)
                return ad.mean_axis(ad.sum_axis(ad.mul(y, Tensor(w)), axis=-1),
                                    axis=-1)

            try:
                err = ad.grad_check(f, Tensor(x), eps=1e-5)
            except GradCheckError as e:
                return CheckResult("gradient_fidelity", False,
                                   {"layer": label, "seed": seed,
                                    "nan_coordinate": e.coordinate})
            if err > worst["err"]:
                worst = {"err": err, "layer": label, "seed": seed}
    passed = worst["err"] < tolerance
    return CheckResult("gradient_fidelity", passed,
                       {"layers": len(GRAD_CHECK_LAYERS), "inputs_per_layer": n_inputs,
                        "max_rel_err": worst["err"], "worst_layer": worst["layer"],
                        "tolerance": tolerance})


@_timed
def check_ibnorm_s_equivalence(n_inputs=100, tolerance=1e-10, eps=1e-13):
    lam_values = (0.25, 0.5, 1.0, 3.0, 8.0)
    worst = 0.0
    for seed in range(n_inputs):
        rng = np.random.default_rng(seed)
        x = rng.standard_normal(16)
        ref = layer_norm(Tensor(x), eps=eps).array
        lam = lam_values[seed % len(lam_values)]
        comp = CompressionParams(kind=CompressionKind.S, lam=lam, group_size=16)
        spec = NormSpec(kind=NormKind.IB_NORM, compression=comp, epsilon=eps,
                        affine=False)
        out = build_norm(spec, 16).normalize(Tensor(x)).array
        worst = max(worst, float(np.abs(out - ref).max()))
    return CheckResult("ibnorm_s_equivalence", worst < tolerance,
                       {"inputs": n_inputs, "max_abs_diff": worst,
                        "tolerance": tolerance, "epsilon": eps})


@_timed
def check_entropy_anchors():
    details = {}
    n = 6
    h0 = matrix_entropy(gram(np.ones((n, 3))))
    details["identical_points_entropy"] = h0
    if abs(h0) > 1e-10:
        return CheckResult("entropy_anchors", False, details)
    from .estimator import GramMatrix

    h1 = matrix_entropy(GramMatrix(np.eye(4) / 4.0, True, 4))
    details["dissimilar_limit_entropy"] = h1
    details["ln4"] = float(np.log(4.0))
    if abs(h1 - np.log(4.0)) > 1e-9:
        return CheckResult("entropy_anchors", False, details)
    rng = np.random.default_rng(0)
    for i in range(100):
        u = rng.standard_normal((int(rng.integers(2, 16)), int(rng.integers(1, 8))))
        g = gram(u)
        g.validate()
        h = matrix_entropy(g)
        if not (-1e-12 <= h <= np.log(g.n) + 1e-12):
            details["bad_random_gram"] = i
            return CheckResult("entropy_anchors", False, details)
    details["random_grams"] = 100
    return CheckResult("entropy_anchors", True, details)


def knn_entropy(x, k=3):
    """Kozachenko-Leonenko differential-entropy estimate (nats)."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 1:
        x = x[:, None]
    n, d = x.shape
    dist, _ = cKDTree(x).query(x, k=k + 1)
    radii = np.maximum(dist[:, k], 1e-300)
    log_vd = 0.5 * d * np.log(np.pi) - gammaln(0.5 * d + 1.0)
    return float(digamma(n) - digamma(k) + log_vd + d * np.mean(np.log(radii)))


@_timed
def check_entropy_reduction(n_seeds=20, n_samples=10_000, dim=8, lam=4.0, k=3):
    counts = {}
    margins = {}
    for kind in (CompressionKind.L, CompressionKind.T):
        params = CompressionParams(kind=kind, lam=lam, group_size=dim)
        wins = 0
        deltas = []
        for seed in range(n_seeds):
            rng = np.random.default_rng(seed)
            z = rng.standard_normal((n_samples, dim))
            cz = compress(Tensor(z), params).array
            h_raw = knn_entropy(z, k=k)
            h_comp = knn_entropy(cz, k=k)
            deltas.append(h_comp - h_raw)
            if h_comp <= h_raw:
                wins += 1
        counts[kind.value] = wins
        margins[kind.value] = float(np.mean(deltas))
    passed = all(c >= n_seeds - 1 for c in counts.values())
    return CheckResult("entropy_reduction", passed,
                       {"seeds": n_seeds, "wins": counts,
                        "mean_entropy_delta_nats": margins,
                        "required": n_seeds - 1})


@_timed
def check_tail_compression(n_samples=100_000, lam=4.0, threshold=2.5, seed=2024):
    rng = np.random.default_rng(seed)
    base = rng.standard_normal(n_samples)
    std_out = build_norm(NormSpec(kind=NormKind.LAYER_NORM), n_samples) \
        .normalize(Tensor(base.reshape(1, -1))).array.reshape(-1)
    comp = CompressionParams(kind=CompressionKind.T, lam=lam, group_size=n_samples)
    ib_out = build_norm(NormSpec(kind=NormKind.IB_NORM, compression=comp,
                                 affine=False), n_samples) \
        .normalize(Tensor(base.reshape(1, -1))).array.reshape(-1)

    def exkurt(a):
        a = a - a.mean()
        return float((a**4).mean() / (a**2).mean() ** 2 - 3.0)

    tail_std = float((np.abs(std_out) > threshold).mean())
    tail_ib = float((np.abs(ib_out) > threshold).mean())
    details = {
        "tail_std": tail_std, "tail_ibnorm_t": tail_ib,
        "kurtosis_std": exkurt(std_out), "kurtosis_ibnorm_t": exkurt(ib_out),
        "kurtosis_delta": exkurt(ib_out) - exkurt(std_out),
        "note": "compression empirically lowers excess kurtosis on Gaussian "
                "input; the tail-mass ordering is the gated property",
    }
    return CheckResult("tail_compression", tail_ib <= tail_std, details)


@_timed
def check_gram_properties(n_cases=50):
    rng = np.random.default_rng(7)
    from .estimator import MaskMatrix, joint_gram

    for i in range(n_cases):
        n = int(rng.integers(3, 12))
        u = rng.standard_normal((n, 4))
        v = rng.standard_normal((n, 3))
        sym_gap = abs(mutual_information(u, v) - mutual_information(v, u))
        if sym_gap > 1e-10:
            return CheckResult("gram_properties", False,
                               {"case": i, "symmetry_gap": sym_gap})
        perm = rng.permutation(n)
        perm_gap = abs(mutual_information(u, v)
                       - mutual_information(u[perm], v[perm]))
        if perm_gap > 1e-10:
            return CheckResult("gram_properties", False,
                               {"case": i, "permutation_gap": perm_gap})
        mask_gap = abs(mutual_information(u, v)
                       - mutual_information(u, v,
                                            mask=MaskMatrix(np.ones(n, bool))))
        if mask_gap > 1e-12:
            return CheckResult("gram_properties", False,
                               {"case": i, "mask_noop_gap": mask_gap})
        joint_gram(gram(u), gram(v)).validate()
    return CheckResult("gram_properties", True, {"cases": n_cases})


ALL_CHECKS = (
    check_bounded_compression,
    check_jacobian_bound,
    check_gradient_fidelity,
    check_ibnorm_s_equivalence,
    check_entropy_anchors,
    check_entropy_reduction,
    check_tail_compression,
    check_gram_properties,
)


def run_checks(name_filter=None, fast=False):
    """Run the property suite; `fast` shrinks sampling-heavy checks."""
    from . import kernels

    kernels.warmup()
    results = []
    for fn in ALL_CHECKS:
        name = fn.__name__.removeprefix("check_")
        if name_filter and name_filter not in name:
            continue
        kwargs = {}
        if fast:
            if fn is check_gradient_fidelity:
                kwargs = {"n_inputs": 5}
            elif fn is check_entropy_reduction:
                kwargs = {"n_seeds": 4, "n_samples": 2000}
            elif fn is check_tail_compression:
                kwargs = {"n_samples": 20_000}
        results.append(fn(**kwargs))
    return results
