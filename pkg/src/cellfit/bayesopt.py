"""Bayesian-optimization outer loop with ellipsoidal search-space reduction.

Everything here works in the normalized parameter space: the initial search
box maps affinely onto the unit cube and all regions, candidates and GP
inputs live there. The loop structure is round-based: after each round the
minimum-volume enclosing ellipsoid (Khachiyan's algorithm) of the best
observations so far, intersected with the unit cube, becomes the search
region for the next round. The GP always trains on the full history
regardless of the active region.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import minimize
from scipy.special import ndtr
from scipy.stats import qmc

from . import gp
from .likelihood import standardize

log = logging.getLogger(__name__)

_SQRT_2PI = math.sqrt(2.0 * math.pi)


class DegenerateRegionError(RuntimeError):
    """The active region has (numerically) no overlap with the unit cube."""


def expected_improvement(mu, sigma, l_star):
    """Expected positive gain over the incumbent ``l_star`` under N(mu, sigma^2).

    EI = (mu - l_star) * Phi(u) + sigma * phi(u) with u = (mu - l_star)/sigma;
    collapses to max(mu - l_star, 0) at sigma = 0. Scalar or elementwise.
    """
    mu = np.asarray(mu, dtype=float)
    sigma = np.asarray(sigma, dtype=float)
    diff = mu - l_star
    with np.errstate(divide="ignore", invalid="ignore"):
        u = np.where(sigma > 0.0, diff / np.where(sigma > 0.0, sigma, 1.0), 0.0)
        ei = np.where(
            sigma > 0.0,
            diff * ndtr(u) + sigma * np.exp(-0.5 * u * u) / _SQRT_2PI,
            np.maximum(diff, 0.0),
        )
    ei = np.maximum(ei, 0.0)
    return float(ei) if ei.ndim == 0 else ei


def latin_hypercube(n: int, dim: int, rng: np.random.Generator) -> np.ndarray:
    """n space-filling points in the unit cube."""
    return qmc.LatinHypercube(d=dim, seed=rng).random(n)


@dataclass(frozen=True)
class Ellipsoid:
    """Region {z : (z - c)^T A (z - c) <= 1} plus its axis-aligned box.

    ``bounding_box`` is the per-dimension [lo, hi] extent of the ellipsoid,
    already intersected with the unit cube when the ellipsoid is used as a
    search region.
    """

    c: np.ndarray
    A: np.ndarray
    bounding_box: np.ndarray

    def membership(self, z) -> np.ndarray:
        """(z - c)^T A (z - c); <= 1 means inside. Single point or batch."""
        dz = np.atleast_2d(z) - self.c
        m = np.einsum("ij,jk,ik->i", dz, self.A, dz)
        return float(m[0]) if np.asarray(z).ndim == 1 else m

    def sqrt_inv_shape(self) -> np.ndarray:
        """Symmetric A^(-1/2); maps the unit ball onto the ellipsoid."""
        w, v = np.linalg.eigh(self.A)
        return (v / np.sqrt(w)) @ v.T


def _bounding_box(c: np.ndarray, a_mat: np.ndarray) -> np.ndarray:
    half = np.sqrt(np.diag(np.linalg.inv(a_mat)))
    return np.column_stack([c - half, c + half])


def full_box_region(dim: int) -> Ellipsoid:
    """Ball through the unit-cube corners: a 'no shrinking yet' region."""
    c = np.full(dim, 0.5)
    a_mat = np.eye(dim) * (4.0 / dim)
    return Ellipsoid(c=c, A=a_mat, bounding_box=np.column_stack(
        [np.zeros(dim), np.ones(dim)]))


def intersect_unit_box(e: Ellipsoid) -> Ellipsoid:
    """Clip the bounding box to [0, 1]; membership tests are unchanged."""
    bb = np.clip(e.bounding_box, 0.0, 1.0)
    if np.any(bb[:, 0] > bb[:, 1]):
        raise DegenerateRegionError("ellipsoid does not intersect the unit cube")
    return Ellipsoid(c=e.c, A=e.A, bounding_box=bb)


def mvee(points, tol: float = 1e-6, min_semi_axis: float = 1e-3,
         max_iter: int = 20_000) -> Ellipsoid:
    """Minimum-volume enclosing ellipsoid of ``points`` (m, d).

    Khachiyan-style weight updates on the lifted points, with away steps
    (shrinking the weight of interior points) so that the optimality
    certificate max_j M_j <= (1 + tol)(d + 1) is reached in practical time.
    The returned ellipsoid is inflated to contain every input exactly, and
    degenerate axes (rank-deficient point sets) are widened to a minimum
    semi-axis.
    """
    p = np.atleast_2d(np.asarray(points, dtype=float))
    m, d = p.shape
    if m < 2:
        raise ValueError("need at least 2 points")
    if tol <= 0:
        raise ValueError("tol must be positive")

    q = np.column_stack([p, np.ones(m)])
    u = np.full(m, 1.0 / m)
    lift = d + 1.0
    for _ in range(max_iter):
        v = q.T @ (q * u[:, None])
        try:
            sol = np.linalg.solve(v, q.T)
        except np.linalg.LinAlgError:
            sol = np.linalg.lstsq(v, q.T, rcond=None)[0]
        mvals = np.einsum("ij,ji->i", q, sol)
        j_add = int(np.argmax(mvals))
        gap_add = mvals[j_add] / lift - 1.0
        active = u > 0.0
        j_away = int(np.argmin(np.where(active, mvals, np.inf)))
        gap_away = 1.0 - mvals[j_away] / lift
        if max(gap_add, gap_away) <= tol:
            break
        if gap_add >= gap_away:
            j, mj = j_add, mvals[j_add]
            step = (mj - lift) / (lift * (mj - 1.0))
        else:
            # Away step: reduce the weight of the most interior active
            # point; for M_j <= 1 the objective is monotone along the
            # direction and the point is dropped entirely.
            j, mj = j_away, mvals[j_away]
            drop = -u[j] / max(1.0 - u[j], 1e-15)
            raw = (mj - lift) / (lift * (mj - 1.0)) if mj > 1.0 else drop
            step = max(raw, drop)
        u = (1.0 - step) * u
        u[j] += step
        u = np.maximum(u, 0.0)
        u /= u.sum()

    c = p.T @ u
    s = p.T @ (p * u[:, None]) - np.outer(c, c)
    w, vec = np.linalg.eigh(s)
    # Semi-axis along eigenvector i is sqrt(d * w_i); widen collapsed axes.
    w = np.maximum(w, min_semi_axis ** 2 / d)
    a_mat = (vec / (d * w)) @ vec.T
    a_mat = 0.5 * (a_mat + a_mat.T)

    # Inflate so that every input point is inside (membership <= 1).
    dz = p - c
    worst = float(np.max(np.einsum("ij,jk,ik->i", dz, a_mat, dz)))
    if worst > 1.0:
        a_mat = a_mat / worst
    return Ellipsoid(c=c, A=a_mat, bounding_box=_bounding_box(c, a_mat))


def sample_region(region: Ellipsoid, n: int, rng: np.random.Generator,
                  min_acceptance: float = 0.01,
                  probe_draws: int = 100_000) -> np.ndarray:
    """n points uniform on region ∩ unit cube.

    First tries the uniform-in-ball transform through A^(-1/2) with
    rejection against the cube; if its acceptance is below
    ``min_acceptance`` (the ellipsoid mostly sticks out of the cube),
    falls back to uniform draws on the region's bounding box rejected by
    ellipsoid membership. Zero acceptance over ``probe_draws`` raises
    DegenerateRegionError.
    """
    d = region.c.size
    chunk = max(n, 4096)

    bb = np.clip(region.bounding_box, 0.0, 1.0)
    lo, hi = bb[:, 0], bb[:, 1]
    if d <= 12:
        # If every corner of the bounding box is inside the ellipsoid, the
        # feasible set IS the box and plain uniform draws need no rejection
        # (in particular for the full-box region of round one).
        corners = np.array(np.meshgrid(*bb, indexing="ij")).reshape(d, -1).T
        if np.max(region.membership(corners)) <= 1.0 + 1e-12:
            return rng.uniform(lo, hi, size=(n, d))

    transform = region.sqrt_inv_shape()
    accepted: list[np.ndarray] = []
    got = 0
    tried = 0
    while got < n and tried < 4 * chunk:
        g = rng.normal(size=(chunk, d))
        g /= np.linalg.norm(g, axis=1, keepdims=True)
        radii = rng.uniform(size=(chunk, 1)) ** (1.0 / d)
        cand = region.c + (g * radii) @ transform
        keep = cand[np.all((cand >= 0.0) & (cand <= 1.0), axis=1)]
        accepted.append(keep)
        got += keep.shape[0]
        tried += chunk
        if tried >= chunk and got / tried < min_acceptance:
            break
    if got >= n:
        return np.concatenate(accepted)[:n]

    accepted = []
    got = 0
    tried = 0
    while got < n:
        cand = rng.uniform(lo, hi, size=(chunk, d))
        keep = cand[region.membership(cand) <= 1.0]
        accepted.append(keep)
        got += keep.shape[0]
        tried += chunk
        if got == 0 and tried >= probe_draws:
            raise DegenerateRegionError(
                f"no acceptable draws in {tried} samples")
    return np.concatenate(accepted)[:n]


def _project(z: np.ndarray, region: Ellipsoid) -> np.ndarray:
    """Nearest-enough point of region ∩ cube: cube clip, then radial shrink."""
    z = np.clip(z, 0.0, 1.0)
    m = region.membership(z)
    if m > 1.0:
        z = region.c + (z - region.c) / math.sqrt(m)
    return z


def propose_next(model: gp.GPModel, region: Ellipsoid, l_star: float,
                 budget: int, rng: np.random.Generator,
                 polish_evals: int = 50) -> np.ndarray:
    """Point of region ∩ cube maximizing expected improvement.

    Evaluates EI on ``budget`` uniform candidates, then refines the best one
    with a short Nelder-Mead run whose iterates are projected back into the
    region. The returned point never has lower EI than any candidate drawn.
    """
    cands = sample_region(region, budget, rng)
    mu, var = gp.posterior(model, cands)
    ei = expected_improvement(mu, np.sqrt(var), l_star)
    best_idx = int(np.argmax(ei))
    best_z = cands[best_idx]
    best_ei = float(ei[best_idx])

    state = {"z": best_z, "ei": best_ei}

    def neg_ei(z):
        zp = _project(z, region)
        m, v = gp.posterior(model, zp)
        val = expected_improvement(m, math.sqrt(v), l_star)
        if val > state["ei"]:
            state["z"], state["ei"] = zp, val
        return -val

    if polish_evals > 0:
        minimize(neg_ei, best_z, method="Nelder-Mead",
                 options={"maxfev": polish_evals, "xatol": 1e-6, "fatol": 1e-12})
    return np.asarray(state["z"], dtype=float)


@dataclass
class Schedule:
    """Budget and knobs of one identification run."""

    iterations_per_round: int = 200
    n_rounds: int = 4
    n_initial: int = 50
    tau: int = 20
    candidates: int = 4096
    polish_evals: int = 50
    refit_every: int = 10     # hyperparameter refits, in new observations
    mvee_tol: float = 1e-6
    shrink: bool = True
    kernel: str = "matern52"
    winsor_keep: int = 100    # best values left unclipped in GP targets


@dataclass
class OptRun:
    """Complete record of one identification run."""

    thetas: np.ndarray          # (n, d) raw parameter vectors
    values: np.ndarray          # (n,) objective values
    iterations: np.ndarray      # (n,) 1-based evaluation index
    rounds: np.ndarray          # (n,) 0 for the initial design, then 1..n_rounds
    regions: list[Ellipsoid]    # regions[r] is active during round r + 1
    box: np.ndarray             # (d, 2) initial search box
    seed: int
    config: dict = field(default_factory=dict)

    @property
    def incumbent_index(self) -> int:
        return int(np.argmax(self.values))

    @property
    def incumbent(self) -> tuple[np.ndarray, float]:
        i = self.incumbent_index
        return self.thetas[i], float(self.values[i])

    def incumbent_trace(self) -> np.ndarray:
        return np.maximum.accumulate(self.values)

    def normalized(self) -> np.ndarray:
        lo, hi = self.box[:, 0], self.box[:, 1]
        return (self.thetas - lo) / (hi - lo)

    def region_for_round(self, rnd: int) -> Ellipsoid:
        return self.regions[max(int(rnd) - 1, 0)]


def _gp_targets(values: np.ndarray, keep: int) -> np.ndarray:
    """Standardized GP targets with the tail winsorized.

    Values below the ``keep``-th best are clipped up to it before
    standardization: the raw objective spans many orders of magnitude
    (divergence floor included) and would otherwise crush the resolvable
    structure near the incumbent to below the GP nugget.
    """
    v = np.asarray(values, dtype=float)
    if v.size > keep:
        kth = np.partition(v, v.size - keep)[v.size - keep]
        v = np.maximum(v, kth)
    return standardize(v)[0]


def _best_distinct(z: np.ndarray, values: np.ndarray, tau: int) -> np.ndarray:
    """The tau best rows of z with exact duplicates collapsed."""
    order = np.argsort(-values)
    seen: set[bytes] = set()
    picked = []
    for i in order:
        key = z[i].tobytes()
        if key in seen:
            continue
        seen.add(key)
        picked.append(z[i])
        if len(picked) == tau:
            break
    return np.array(picked)


def run_identification(objective, box, schedule: Schedule | None = None,
                       seed: int = 0) -> OptRun:
    """Round-based Bayesian optimization of ``objective`` over ``box``.

    ``objective`` maps a raw parameter vector to the value being maximized.
    Starts from a Latin-hypercube design, then alternates GP fitting,
    EI-based proposals inside the active region and objective evaluations;
    at each round boundary the region shrinks to the enclosing ellipsoid of
    the best ``tau`` distinct points (intersected with the initial box).
    A degenerate shrink is logged and the previous region is kept.
    """
    schedule = Schedule() if schedule is None else schedule
    box = np.asarray(box, dtype=float)
    d = box.shape[0]
    lo, hi = box[:, 0], box[:, 1]

    ss = np.random.SeedSequence(seed)
    rng_lhs, rng_prop, rng_gp = (np.random.default_rng(s) for s in ss.spawn(3))

    z_hist: list[np.ndarray] = []
    values: list[float] = []
    rounds: list[int] = []

    def evaluate(z: np.ndarray, rnd: int) -> None:
        theta = lo + z * (hi - lo)
        z_hist.append(z)
        values.append(float(objective(theta)))
        rounds.append(rnd)

    for z in latin_hypercube(schedule.n_initial, d, rng_lhs):
        evaluate(z, 0)

    regions = [full_box_region(d)]
    hypers = None
    last_fit_n = 0

    for rnd in range(1, schedule.n_rounds + 1):
        region = regions[-1]
        for _ in range(schedule.iterations_per_round):
            z_arr = np.array(z_hist)
            targets = _gp_targets(np.array(values), schedule.winsor_keep)
            if hypers is None or len(values) - last_fit_n >= schedule.refit_every:
                hypers = gp._optimize_hypers(z_arr, targets, schedule.kernel,
                                             rng_gp, warm=hypers)
                last_fit_n = len(values)
            model = gp.fit(z_arr, targets, hypers=hypers, kernel=schedule.kernel)
            l_star = float(np.max(targets))
            try:
                z_next = propose_next(model, region, l_star,
                                      schedule.candidates, rng_prop,
                                      schedule.polish_evals)
            except DegenerateRegionError:
                log.warning("region degenerate at round %d; reverting to full box", rnd)
                region = full_box_region(d)
                regions[-1] = region
                z_next = propose_next(model, region, l_star,
                                      schedule.candidates, rng_prop,
                                      schedule.polish_evals)
            evaluate(z_next, rnd)

        if rnd < schedule.n_rounds and schedule.shrink:
            top = _best_distinct(np.array(z_hist), np.array(values), schedule.tau)
            try:
                new_region = intersect_unit_box(mvee(top, tol=schedule.mvee_tol))
                sample_region(new_region, 16, rng_prop)  # reject unusable shrinks
                regions.append(new_region)
            except (DegenerateRegionError, ValueError) as exc:
                log.warning("keeping previous region after failed shrink: %s", exc)
                regions.append(regions[-1])

    return OptRun(
        thetas=lo + np.array(z_hist) * (hi - lo),
        values=np.array(values),
        iterations=np.arange(1, len(values) + 1),
        rounds=np.array(rounds, dtype=int),
        regions=regions,
        box=box,
        seed=seed,
        config={
            "iterations_per_round": schedule.iterations_per_round,
            "n_rounds": schedule.n_rounds,
            "n_initial": schedule.n_initial,
            "tau": schedule.tau,
            "candidates": schedule.candidates,
            "shrink": schedule.shrink,
            "kernel": schedule.kernel,
        },
    )
