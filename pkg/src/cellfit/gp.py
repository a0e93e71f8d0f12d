"""Gaussian-process regression over the normalized parameter space.

Zero-mean prior on standardized targets with a Matern-5/2 (default) or
squared-exponential kernel, per-dimension lengthscales and a signal
variance. The kernel matrix factorization is cached in the fitted model;
posterior mean and variance at query points reuse it. Hyperparameters are
either supplied (fixed) or chosen by maximizing the log marginal likelihood
with a multi-start derivative-free search.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.linalg import cho_solve, cholesky, solve_triangular
from scipy.linalg.blas import dtrsv as _trsv
from scipy.optimize import minimize
from scipy.spatial.distance import cdist

KERNELS = ("matern52", "rbf")

_SQRT5 = math.sqrt(5.0)

# Nugget escalation: start at JITTER_INIT_FACTOR * signal_var, multiply by 10
# on factorization failure, give up above JITTER_MAX.
JITTER_INIT_FACTOR = 1e-8
JITTER_MAX = 1e-4

# Hyperparameter search: start ranges per the optimizer contract, wider hard
# clips so the local search may leave the start box when the data demand it.
LENGTHSCALE_START = (0.05, 5.0)
SIGNAL_VAR_START = (0.1, 10.0)
_LOG_ELL_CLIP = (math.log(1e-3), math.log(50.0))
_LOG_SV_CLIP = (math.log(1e-4), math.log(1e4))

# Training-set cap for hyperparameter estimation only; the returned model is
# always factorized on the full training set.
HYPER_SUBSET_CAP = 200


class SingularKernelError(RuntimeError):
    """Kernel matrix not positive definite even at the maximum jitter."""


@dataclass(frozen=True)
class GPHypers:
    lengthscales: np.ndarray
    signal_var: float

    def __post_init__(self):
        ell = np.asarray(self.lengthscales, dtype=float)
        if np.any(ell <= 0) or self.signal_var <= 0:
            raise ValueError("lengthscales and signal variance must be positive")
        object.__setattr__(self, "lengthscales", ell)


def _exp_clamped(arg: np.ndarray) -> np.ndarray:
    """exp() with the argument floored at -700.

    Kernel tails below exp(-700) are zero for all practical purposes, and
    letting them underflow into subnormals costs an order of magnitude in
    throughput on the wide candidate batches.
    """
    np.maximum(arg, -700.0, out=arg)
    return np.exp(arg, out=arg)


def kernel_matrix(a: np.ndarray, b: np.ndarray, hypers: GPHypers,
                  kernel: str = "matern52") -> np.ndarray:
    """Cross-covariance matrix k(a_i, b_j) for row-stacked inputs."""
    sa = np.atleast_2d(a) / hypers.lengthscales
    sb = np.atleast_2d(b) / hypers.lengthscales
    d2 = cdist(sa, sb, "sqeuclidean")
    if kernel == "matern52":
        r = np.sqrt(np.maximum(d2, 0.0))
        return (hypers.signal_var * (1.0 + _SQRT5 * r + (5.0 / 3.0) * d2)
                * _exp_clamped(-_SQRT5 * r))
    if kernel == "rbf":
        return hypers.signal_var * _exp_clamped(-0.5 * d2)
    raise ValueError(f"unknown kernel {kernel!r}")


@dataclass
class GPModel:
    """A fitted GP: training data, hyperparameters and cached factorization."""

    x: np.ndarray
    y: np.ndarray
    kernel: str
    hypers: GPHypers
    jitter: float
    chol: np.ndarray
    alpha: np.ndarray
    x_scaled: np.ndarray    # x / lengthscales, cached for posterior queries
    k_inv: np.ndarray       # (K + jitter I)^-1 from the Cholesky factor

    @property
    def n(self) -> int:
        return self.x.shape[0]


def _dedup(x: np.ndarray, y: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Collapse exactly duplicated inputs, averaging their targets."""
    ux, inverse = np.unique(x, axis=0, return_inverse=True)
    if ux.shape[0] == x.shape[0]:
        return x, y
    sums = np.zeros(ux.shape[0])
    counts = np.zeros(ux.shape[0])
    np.add.at(sums, inverse, y)
    np.add.at(counts, inverse, 1.0)
    return ux, sums / counts


def _factorize(k: np.ndarray, jitter0: float) -> tuple[np.ndarray, float]:
    """Cholesky of k + jitter*I, escalating the jitter tenfold on failure."""
    jitter = jitter0
    while True:
        try:
            low = cholesky(k + jitter * np.eye(k.shape[0]), lower=True,
                           check_finite=False)
            return low, jitter
        except np.linalg.LinAlgError:
            pass
        jitter *= 10.0
        if jitter > JITTER_MAX:
            raise SingularKernelError(
                f"kernel factorization failed up to jitter {JITTER_MAX}")


def log_marginal_likelihood(x: np.ndarray, y: np.ndarray, hypers: GPHypers,
                            kernel: str = "matern52",
                            jitter: float | None = None) -> float:
    """GP log marginal likelihood of targets ``y`` at inputs ``x``."""
    k = kernel_matrix(x, x, hypers, kernel)
    low, _ = _factorize(k, JITTER_INIT_FACTOR * hypers.signal_var if jitter is None else jitter)
    alpha = cho_solve((low, True), y, check_finite=False)
    return float(-0.5 * y @ alpha - np.sum(np.log(np.diag(low)))
                 - 0.5 * len(y) * math.log(2.0 * math.pi))


def _concentrated_nll(x: np.ndarray, y: np.ndarray, ell: np.ndarray,
                      kernel: str) -> tuple[float, float]:
    """Negative LML with the signal variance profiled out analytically.

    Because the nugget scales with the signal variance, the kernel matrix
    factors as sv * (R(ell) + j I) and the LML-maximizing sv given the
    lengthscales is y^T (R + j I)^-1 y / n in closed form; the search then
    runs over lengthscales only. Returns (nll, sv_hat).
    """
    corr = kernel_matrix(x, x, GPHypers(ell, 1.0), kernel)
    low, _ = _factorize(corr, JITTER_INIT_FACTOR)
    alpha = cho_solve((low, True), y, check_finite=False)
    n = len(y)
    sv = max(float(y @ alpha) / n, 1e-12)
    nll = 0.5 * n * math.log(sv) + float(np.sum(np.log(np.diag(low)))) + 0.5 * n
    return nll, sv


def _optimize_hypers(x: np.ndarray, y: np.ndarray, kernel: str,
                     rng: np.random.Generator, n_starts: int = 16,
                     warm: GPHypers | None = None) -> GPHypers:
    """Maximize the log marginal likelihood by multi-start Nelder-Mead.

    Each random lengthscale start gets a short simplex run, the warm start
    (previous hyperparameters) a longer one, and the overall best a final
    polish. Hyperparameter estimation uses at most HYPER_SUBSET_CAP training
    points for cost control; the signal variance comes from its closed form.
    """
    d = x.shape[1]
    if x.shape[0] > HYPER_SUBSET_CAP:
        idx = rng.choice(x.shape[0], HYPER_SUBSET_CAP, replace=False)
        x, y = x[idx], y[idx]

    def nll(p):
        ell = np.exp(np.clip(p, *_LOG_ELL_CLIP))
        try:
            return _concentrated_nll(x, y, ell, kernel)[0]
        except SingularKernelError:
            return 1e18

    lo_ell, hi_ell = np.log(LENGTHSCALE_START)
    best_p, best_f = None, np.inf
    for i in range(n_starts):
        start = rng.uniform(lo_ell, hi_ell, d)
        res = minimize(nll, start, method="Nelder-Mead",
                       options={"maxfev": 15, "xatol": 1e-3, "fatol": 1e-4})
        if res.fun < best_f:
            best_p, best_f = res.x, res.fun
    if warm is not None:
        res = minimize(nll, np.log(warm.lengthscales), method="Nelder-Mead",
                       options={"maxfev": 60, "xatol": 1e-4, "fatol": 1e-6})
        if res.fun < best_f:
            best_p, best_f = res.x, res.fun
    res = minimize(nll, best_p, method="Nelder-Mead",
                   options={"maxfev": 60, "xatol": 1e-4, "fatol": 1e-6})
    p = res.x if res.fun < best_f else best_p
    ell = np.exp(np.clip(p, *_LOG_ELL_CLIP))
    sv = _concentrated_nll(x, y, ell, kernel)[1]
    sv = min(max(sv, math.exp(_LOG_SV_CLIP[0])), math.exp(_LOG_SV_CLIP[1]))
    return GPHypers(ell, sv)


def fit(x: np.ndarray, y: np.ndarray, hypers: GPHypers | None = None,
        kernel: str = "matern52", rng: np.random.Generator | None = None,
        n_starts: int = 16, jitter: float | None = None) -> GPModel:
    """Fit a GP to (x, y); optimizes hyperparameters when none are given.

    Duplicated inputs are collapsed by averaging their targets. ``jitter``
    overrides the starting nugget (it still escalates on factorization
    failure).
    """
    x = np.atleast_2d(np.asarray(x, dtype=float))
    y = np.asarray(y, dtype=float).ravel()
    if x.shape[0] != y.size:
        raise ValueError("inputs and targets must have matching length")
    x, y = _dedup(x, y)
    if x.shape[0] < 2:
        raise ValueError("need at least 2 distinct training points")
    if kernel not in KERNELS:
        raise ValueError(f"unknown kernel {kernel!r}")
    if hypers is None:
        rng = np.random.default_rng(0) if rng is None else rng
        hypers = _optimize_hypers(x, y, kernel, rng, n_starts)
    k = kernel_matrix(x, x, hypers, kernel)
    jitter0 = JITTER_INIT_FACTOR * hypers.signal_var if jitter is None else jitter
    low, jitter_used = _factorize(k, jitter0)
    alpha = cho_solve((low, True), y, check_finite=False)
    k_inv = cho_solve((low, True), np.eye(x.shape[0]), check_finite=False)
    return GPModel(x=x, y=y, kernel=kernel, hypers=hypers,
                   jitter=jitter_used, chol=low, alpha=alpha,
                   x_scaled=x / hypers.lengthscales, k_inv=k_inv)


def _cross_cov(model: GPModel, z_scaled: np.ndarray) -> np.ndarray:
    # GEMM-based squared distances: much faster than cdist for the wide
    # candidate batches the acquisition search throws at the posterior.
    xs = model.x_scaled
    d2 = (z_scaled * z_scaled).sum(axis=1)[:, None] + (xs * xs).sum(axis=1)
    d2 -= 2.0 * (z_scaled @ xs.T)
    np.maximum(d2, 0.0, out=d2)
    sv = model.hypers.signal_var
    if model.kernel == "matern52":
        r = np.sqrt(d2)
        r *= -_SQRT5
        poly = (5.0 / 3.0) * d2
        poly -= r
        poly += 1.0
        poly *= _exp_clamped(r)
        poly *= sv
        return poly
    d2 *= -0.5
    _exp_clamped(d2)
    d2 *= sv
    return d2


def posterior(model: GPModel, z) -> tuple[np.ndarray, np.ndarray]:
    """Posterior mean and variance at query points ``z``.

    Accepts a single point (shape (d,)) or a batch (m, d); returns floats
    or length-m arrays correspondingly. Variance is clamped at zero.
    """
    z = np.asarray(z, dtype=float)
    sv = model.hypers.signal_var
    if z.ndim == 1:
        # Single-point fast path: the acquisition polish calls this in a
        # tight loop, so avoid the batched wrappers.
        diff = model.x_scaled - z / model.hypers.lengthscales
        d2 = np.einsum("ij,ij->i", diff, diff)
        if model.kernel == "matern52":
            r = np.sqrt(d2)
            kq = sv * (1.0 + _SQRT5 * r + (5.0 / 3.0) * d2) * _exp_clamped(-_SQRT5 * r)
        else:
            kq = sv * _exp_clamped(-0.5 * d2)
        mean = float(kq @ model.alpha)
        v = _trsv(model.chol, kq, lower=1)
        return mean, max(sv - float(v @ v), 0.0)
    kq = _cross_cov(model, z / model.hypers.lengthscales)
    mean = kq @ model.alpha
    var = np.maximum(sv - np.einsum("ij,ij->i", kq @ model.k_inv, kq), 0.0)
    return mean, var
