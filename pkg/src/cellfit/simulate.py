"""Fixed-step simulation of the cell model and synthetic dataset generation.

Integration is classical 4th-order Runge-Kutta on a uniform sampling grid
(1 s in all the studies here), with the input held constant over each
sampling interval (zero-order hold, as a battery cycler applies setpoints)
and ``substeps`` RK4 steps per interval. The hot loop is JIT-compiled; the
pure-Python dynamics in :mod:`cellfit.model` are the readable reference
that the compiled kernel is tested against.

Measurement alignment: sample n pairs the state at the start of interval n
with the input applied over that interval, so a profile of N samples yields
N measurements and a trajectory of N + 1 states (including the initial one).
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass

import numpy as np
from numba import njit

from .model import T_REF, CellParams, OcvCurve


class SimulationDivergedError(RuntimeError):
    """Raised when the integrator produces a non-finite state.

    Signals a pathological parameter vector (e.g. a vanishing RC product
    that the fixed step cannot resolve); the likelihood layer maps this
    to its floor value instead of propagating the exception.
    """

    def __init__(self, step: int):
        super().__init__(f"simulation diverged at sample step {step}")
        self.step = step


@dataclass
class CurrentProfile:
    """Input sequence on a uniform 1 s grid: current [A] and ambient [K]."""

    times: np.ndarray
    currents: np.ndarray
    t_amb: np.ndarray

    def __post_init__(self):
        self.times = np.asarray(self.times, dtype=float)
        self.currents = np.asarray(self.currents, dtype=float)
        t_amb = np.asarray(self.t_amb, dtype=float)
        if t_amb.ndim == 0:
            t_amb = np.full(self.times.shape, float(t_amb))
        self.t_amb = t_amb
        n = self.times.size
        if n == 0:
            raise ValueError("profile must contain at least one sample")
        if self.currents.shape != (n,) or self.t_amb.shape != (n,):
            raise ValueError("per-sample arrays must have equal length")
        if self.times[0] != 0.0:
            raise ValueError("profile times must start at 0")
        if np.any(np.diff(self.times) <= 0):
            raise ValueError("profile times must be strictly increasing")
        if np.any(self.t_amb <= 0.0):
            raise ValueError("ambient temperature must be positive kelvin")

    @property
    def n(self) -> int:
        return self.times.size

    def spacing(self) -> float:
        """Uniform sample spacing [s]; raises if the grid is not uniform."""
        if self.n == 1:
            return 1.0
        dt = np.diff(self.times)
        if not np.allclose(dt, dt[0], rtol=1e-12, atol=1e-12):
            raise ValueError("profile sampling must be uniform")
        return float(dt[0])


@dataclass
class Dataset:
    """One measured record: input profile, noisy outputs, noise variances, x0."""

    profile: CurrentProfile
    y_v: np.ndarray
    y_t: np.ndarray
    r_v: float
    r_t: float
    x0: np.ndarray

    def __post_init__(self):
        self.y_v = np.asarray(self.y_v, dtype=float)
        self.y_t = np.asarray(self.y_t, dtype=float)
        self.x0 = np.asarray(self.x0, dtype=float)
        if self.y_v.shape != (self.profile.n,) or self.y_t.shape != (self.profile.n,):
            raise ValueError("measurement arrays must match the profile length")
        if self.x0.shape != (4,):
            raise ValueError("x0 must have shape (4,)")
        if self.r_v <= 0.0 or self.r_t <= 0.0:
            raise ValueError("noise variances must be strictly positive")

    @property
    def n(self) -> int:
        return self.profile.n


@njit(cache=True, error_model="numpy")
def _rk4_kernel(theta, ocv_x, ocv_y, t_ref, x0, currents, t_amb,
                dt_sample, substeps, out):
    """Fill ``out`` (n+1, 4) with the RK4 trajectory.

    Returns -1 on success, else the index of the first sample step at which
    a non-finite state appeared. Division by a zero RC product yields inf
    rather than an exception, so every pathological parameter vector funnels
    into the non-finite check.
    """
    c_b, c_s, r_b, r_o = theta[0], theta[1], theta[2], theta[3]
    c_core, c_surf, r_core, r_surf = theta[4], theta[5], theta[6], theta[7]
    kappa1, kappa2 = theta[8], theta[9]
    cap_tot = c_b + c_s

    vb, vs, tc, ts = x0[0], x0[1], x0[2], x0[3]
    out[0, 0], out[0, 1], out[0, 2], out[0, 3] = vb, vs, tc, ts

    n = currents.shape[0]
    h = dt_sample / substeps
    for k in range(n):
        cur = currents[k]
        ta = t_amb[k]
        for _ in range(substeps):
            # stage 1
            rb_t = r_b * math.exp(kappa2 * (1.0 / tc - 1.0 / t_ref))
            ro_t = r_o * math.exp(kappa1 * (1.0 / tc - 1.0 / t_ref))
            q = cur * (np.interp(vs, ocv_x, ocv_y) + ro_t * cur
                       - np.interp((c_b * vb + c_s * vs) / cap_tot, ocv_x, ocv_y))
            k1_vb = (vs - vb) / (c_b * rb_t)
            k1_vs = (vb - vs) / (c_s * rb_t) + cur / c_s
            k1_tc = (ts - tc) / (r_core * c_core) + q / c_core
            k1_ts = (tc - ts) / (r_core * c_surf) + (ta - ts) / (r_surf * c_surf)

            # stage 2
            vb2, vs2 = vb + 0.5 * h * k1_vb, vs + 0.5 * h * k1_vs
            tc2, ts2 = tc + 0.5 * h * k1_tc, ts + 0.5 * h * k1_ts
            rb_t = r_b * math.exp(kappa2 * (1.0 / tc2 - 1.0 / t_ref))
            ro_t = r_o * math.exp(kappa1 * (1.0 / tc2 - 1.0 / t_ref))
            q = cur * (np.interp(vs2, ocv_x, ocv_y) + ro_t * cur
                       - np.interp((c_b * vb2 + c_s * vs2) / cap_tot, ocv_x, ocv_y))
            k2_vb = (vs2 - vb2) / (c_b * rb_t)
            k2_vs = (vb2 - vs2) / (c_s * rb_t) + cur / c_s
            k2_tc = (ts2 - tc2) / (r_core * c_core) + q / c_core
            k2_ts = (tc2 - ts2) / (r_core * c_surf) + (ta - ts2) / (r_surf * c_surf)

            # stage 3
            vb3, vs3 = vb + 0.5 * h * k2_vb, vs + 0.5 * h * k2_vs
            tc3, ts3 = tc + 0.5 * h * k2_tc, ts + 0.5 * h * k2_ts
            rb_t = r_b * math.exp(kappa2 * (1.0 / tc3 - 1.0 / t_ref))
            ro_t = r_o * math.exp(kappa1 * (1.0 / tc3 - 1.0 / t_ref))
            q = cur * (np.interp(vs3, ocv_x, ocv_y) + ro_t * cur
                       - np.interp((c_b * vb3 + c_s * vs3) / cap_tot, ocv_x, ocv_y))
            k3_vb = (vs3 - vb3) / (c_b * rb_t)
            k3_vs = (vb3 - vs3) / (c_s * rb_t) + cur / c_s
            k3_tc = (ts3 - tc3) / (r_core * c_core) + q / c_core
            k3_ts = (tc3 - ts3) / (r_core * c_surf) + (ta - ts3) / (r_surf * c_surf)

            # stage 4
            vb4, vs4 = vb + h * k3_vb, vs + h * k3_vs
            tc4, ts4 = tc + h * k3_tc, ts + h * k3_ts
            rb_t = r_b * math.exp(kappa2 * (1.0 / tc4 - 1.0 / t_ref))
            ro_t = r_o * math.exp(kappa1 * (1.0 / tc4 - 1.0 / t_ref))
            q = cur * (np.interp(vs4, ocv_x, ocv_y) + ro_t * cur
                       - np.interp((c_b * vb4 + c_s * vs4) / cap_tot, ocv_x, ocv_y))
            k4_vb = (vs4 - vb4) / (c_b * rb_t)
            k4_vs = (vb4 - vs4) / (c_s * rb_t) + cur / c_s
            k4_tc = (ts4 - tc4) / (r_core * c_core) + q / c_core
            k4_ts = (tc4 - ts4) / (r_core * c_surf) + (ta - ts4) / (r_surf * c_surf)

            vb += h * (k1_vb + 2.0 * k2_vb + 2.0 * k3_vb + k4_vb) / 6.0
            vs += h * (k1_vs + 2.0 * k2_vs + 2.0 * k3_vs + k4_vs) / 6.0
            tc += h * (k1_tc + 2.0 * k2_tc + 2.0 * k3_tc + k4_tc) / 6.0
            ts += h * (k1_ts + 2.0 * k2_ts + 2.0 * k3_ts + k4_ts) / 6.0

        out[k + 1, 0], out[k + 1, 1], out[k + 1, 2], out[k + 1, 3] = vb, vs, tc, ts
        if not (math.isfinite(vb) and math.isfinite(vs)
                and math.isfinite(tc) and math.isfinite(ts)):
            return k
    return -1


def integrate(params: CellParams, ocv: OcvCurve, x0, profile: CurrentProfile,
              substeps: int = 10, t_ref: float = T_REF) -> np.ndarray:
    """Simulate the state trajectory over ``profile``.

    Returns an array of shape (profile.n + 1, 4); row 0 is ``x0`` and row
    k is the state after k sampling intervals. Raises
    SimulationDivergedError if any state goes non-finite.
    """
    if substeps < 1:
        raise ValueError("substeps must be a positive integer")
    x0 = np.asarray(x0, dtype=float)
    if x0.shape != (4,):
        raise ValueError("x0 must have shape (4,)")
    dt = profile.spacing()
    out = np.empty((profile.n + 1, 4))
    bad = _rk4_kernel(params.to_array(), ocv.breakpoints, ocv.values,
                      float(t_ref), x0, profile.currents, profile.t_amb,
                      dt, int(substeps), out)
    if bad >= 0:
        raise SimulationDivergedError(int(bad))
    return out


def noiseless_outputs(params: CellParams, ocv: OcvCurve, x0,
                      profile: CurrentProfile, substeps: int = 10,
                      t_ref: float = T_REF) -> tuple[np.ndarray, np.ndarray]:
    """Noise-free measurement sequences (terminal voltage, surface temperature)."""
    traj = integrate(params, ocv, x0, profile, substeps, t_ref)
    states = traj[:-1]
    r_o_t = params.R_o * np.exp(params.kappa1 * (1.0 / states[:, 2] - 1.0 / t_ref))
    v = ocv(states[:, 1]) + r_o_t * profile.currents
    return v, states[:, 3].copy()


def generate_dataset(params: CellParams, ocv: OcvCurve, x0,
                     profile: CurrentProfile, r_v: float, r_t: float,
                     seed: int, substeps: int = 100,
                     t_ref: float = T_REF) -> Dataset:
    """Simulate and add white Gaussian measurement noise; deterministic per seed."""
    if r_v <= 0.0 or r_t <= 0.0:
        raise ValueError("noise variances must be strictly positive")
    v, t_s = noiseless_outputs(params, ocv, x0, profile, substeps, t_ref)
    rng = np.random.default_rng(seed)
    y_v = v + rng.normal(0.0, math.sqrt(r_v), v.size)
    y_t = t_s + rng.normal(0.0, math.sqrt(r_t), t_s.size)
    return Dataset(profile=profile, y_v=y_v, y_t=y_t, r_v=float(r_v),
                   r_t=float(r_t), x0=np.asarray(x0, dtype=float).copy())


def synth_profile(kind: str, duration_s: int, seed: int = 0,
                  t_amb: float = 298.0, i_min: float = -4.0,
                  i_max: float = 0.0) -> CurrentProfile:
    """Synthetic discharge profile: 'pulse' or 'random-walk'.

    'pulse' alternates 60 s blocks of full discharge current and rest;
    'random-walk' takes 1 s Gaussian steps clipped to [i_min, i_max].
    Stands in for standard drive cycles, which cannot be redistributed.
    """
    duration_s = int(duration_s)
    if duration_s < 60:
        raise ValueError("duration must be at least 60 s")
    times = np.arange(duration_s, dtype=float)
    if kind == "pulse":
        block = (times.astype(int) // 60) % 2
        currents = np.where(block == 0, i_min, i_max)
    elif kind == "random-walk":
        rng = np.random.default_rng(seed)
        steps = rng.normal(0.0, 0.35, duration_s)
        currents = np.empty(duration_s)
        level = 0.5 * (i_min + i_max)
        for k in range(duration_s):
            level = min(max(level + steps[k], i_min), i_max)
            currents[k] = level
    else:
        raise ValueError(f"unknown profile kind {kind!r}")
    return CurrentProfile(times=times, currents=currents, t_amb=float(t_amb))


def load_profile(path, scale_min: float = 0.0, scale_max: float = 4.0,
                 t_amb: float = 298.0) -> CurrentProfile:
    """Load a drive-cycle CSV (header ``time_s,value``) as a discharge profile.

    The value column is resampled to a 1 s grid by linear interpolation,
    affinely mapped so its minimum hits ``scale_min`` and its maximum hits
    ``scale_max`` (scaling after resampling keeps the mapped extremes exact
    on the grid), then negated for the discharge sign convention.
    """
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    body = [r for r in rows[1:] if r]
    if not rows or not body:
        raise ValueError(f"profile file {path} is empty")
    t = np.array([float(r[0]) for r in body])
    v = np.array([float(r[1]) for r in body])
    if np.any(np.diff(t) <= 0):
        raise ValueError(f"profile file {path} has non-increasing time")
    t = t - t[0]
    grid = np.arange(0.0, math.floor(t[-1]) + 1.0)
    resampled = np.interp(grid, t, v)
    lo, hi = resampled.min(), resampled.max()
    if hi == lo:
        raise ValueError(f"profile file {path} has a constant value column")
    scaled = scale_min + (resampled - lo) * (scale_max - scale_min) / (hi - lo)
    return CurrentProfile(times=grid, currents=-scaled, t_amb=float(t_amb))


def save_dataset(ds: Dataset, path) -> None:
    """Write a dataset CSV with header time_s,current_A,T_amb_K,y_V,y_T."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["time_s", "current_A", "T_amb_K", "y_V", "y_T"])
        for k in range(ds.n):
            w.writerow([repr(ds.profile.times[k]), repr(ds.profile.currents[k]),
                        repr(ds.profile.t_amb[k]), repr(ds.y_v[k]), repr(ds.y_t[k])])


def load_dataset(path, r_v: float, r_t: float, x0=None) -> Dataset:
    """Read a dataset CSV written by :func:`save_dataset`.

    The CSV carries no noise variances or initial state; the caller supplies
    the variances, and ``x0`` defaults to a full cell equilibrated at the
    first-sample ambient temperature ([1, 1, T_amb, T_amb]).
    """
    data = np.genfromtxt(path, delimiter=",", skip_header=1)
    if data.ndim == 1:
        data = data[None, :]
    profile = CurrentProfile(times=data[:, 0], currents=data[:, 1], t_amb=data[:, 2])
    if x0 is None:
        x0 = np.array([1.0, 1.0, profile.t_amb[0], profile.t_amb[0]])
    return Dataset(profile=profile, y_v=data[:, 3], y_t=data[:, 4],
                   r_v=float(r_v), r_t=float(r_t), x0=x0)
