"""Coupled two-tank simulation, excitation signals, and training-data windowing.

The plant is a discrete-time nonlinear two-tank system: a pump feeds tank 1,
tank 1 drains into tank 2, and tank 2 drains out.  The controlled output is
the tank-2 level.  Square-root arguments and post-step levels are clamped at
zero, since the model is undefined for negative levels.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np


class PlantDomainError(ValueError):
    """Raised for inputs outside the physical domain of the model."""


@dataclass(frozen=True)
class PlantParams:
    """Physical parameters of the two-tank system (cgs-style units)."""

    g: float = 981.0      # gravitational acceleration, cm/s^2
    delta: float = 1.0    # time step, s
    k_p: float = 3.3      # pump gain, cm^3/(s V)
    A: float = 15.2       # tank cross-sectional area, cm^2
    A1: float = 0.135     # tank-1 outflow orifice area, cm^2
    A2: float = 0.140     # tank-2 outflow orifice area, cm^2

    def __post_init__(self):
        for name in ("g", "delta", "k_p", "A", "A1", "A2"):
            if not getattr(self, name) > 0:
                raise PlantDomainError(f"plant parameter {name} must be > 0")


@dataclass(frozen=True)
class PlantState:
    """Water levels of both tanks in cm; levels are never negative."""

    x1: float
    x2: float

    def __post_init__(self):
        if not (math.isfinite(self.x1) and math.isfinite(self.x2)):
            raise PlantDomainError("non-finite tank level")
        if self.x1 < 0 or self.x2 < 0:
            raise PlantDomainError("tank levels must be >= 0")


@dataclass(frozen=True)
class NoiseModel:
    """Additive per-state process noise.  kind='none' means exactly zero."""

    kind: str = "none"    # 'none' or 'gaussian'
    sigma: float = 0.0    # standard deviation per state, cm
    seed: int = 0

    def __post_init__(self):
        if self.kind not in ("none", "gaussian"):
            raise PlantDomainError(f"unknown noise kind {self.kind!r}")
        if self.sigma < 0:
            raise PlantDomainError("noise sigma must be >= 0")

    @property
    def active(self) -> bool:
        return self.kind == "gaussian" and self.sigma > 0


NOISE_OFF = NoiseModel()
DEFAULT_PARAMS = PlantParams()


def step(state: PlantState, u: float, params: PlantParams = DEFAULT_PARAMS,
         noise: NoiseModel = NOISE_OFF, rng: np.random.Generator | None = None) -> PlantState:
    """Advance the plant one step: x[k+1] = f(x[k], u[k]) + w[k].

    Square-root arguments are clamped at 0, and the resulting levels are
    clamped at 0.  A standalone call with active noise draws from a fresh
    generator seeded by the noise model; pass `rng` to thread a stream.
    """
    if not (np.isscalar(u) or np.ndim(u) == 0) or not math.isfinite(float(u)):
        raise PlantDomainError(f"input voltage must be a finite scalar, got {u!r}")
    u = float(u)
    q1 = params.A1 * math.sqrt(2.0 * params.g * max(state.x1, 0.0))
    q2 = params.A2 * math.sqrt(2.0 * params.g * max(state.x2, 0.0))
    c = params.delta / params.A
    x1 = state.x1 + c * (params.k_p * u - q1)
    x2 = state.x2 + c * (q1 - q2)
    if noise.active:
        if rng is None:
            rng = np.random.default_rng(noise.seed)
        w = rng.normal(0.0, noise.sigma, size=2)
        x1 += w[0]
        x2 += w[1]
    return PlantState(max(x1, 0.0), max(x2, 0.0))


@dataclass
class Trajectory:
    """Simulated run: applied inputs and the resulting post-step levels."""

    u: np.ndarray
    x1: np.ndarray
    x2: np.ndarray

    @property
    def y(self) -> np.ndarray:
        """Measured output: the tank-2 level."""
        return self.x2

    def __len__(self):
        return len(self.u)

    def pairs(self):
        """(u, y) pairs, one per step."""
        return list(zip(self.u.tolist(), self.x2.tolist()))


def simulate(initial: PlantState, inputs, params: PlantParams = DEFAULT_PARAMS,
             noise: NoiseModel = NOISE_OFF) -> Trajectory:
    """Simulate a full input sequence; output y at each step is the post-step x2."""
    inputs = np.asarray(inputs, dtype=float)
    if inputs.ndim != 1 or inputs.size == 0:
        raise PlantDomainError("inputs must be a nonempty 1-d sequence")
    rng = np.random.default_rng(noise.seed) if noise.active else None
    us = np.empty(inputs.size)
    x1s = np.empty(inputs.size)
    x2s = np.empty(inputs.size)
    state = initial
    for k, u in enumerate(inputs):
        state = step(state, u, params, noise, rng)
        us[k] = u
        x1s[k] = state.x1
        x2s[k] = state.x2
    return Trajectory(us, x1s, x2s)


def steady_state_input(x1_target: float, params: PlantParams = DEFAULT_PARAMS) -> float:
    """Constant input holding tank 1 at x1_target (fixed point of the tank-1 row)."""
    return params.A1 * math.sqrt(2.0 * params.g * x1_target) / params.k_p


def steady_state_for_output(y_target: float, params: PlantParams = DEFAULT_PARAMS):
    """Steady state (x1, x2, u) with tank-2 level y_target.

    At equilibrium the two orifice flows balance: A1*sqrt(2g x1) = A2*sqrt(2g x2).
    """
    x1 = (params.A2 / params.A1) ** 2 * y_target
    return PlantState(x1, y_target), steady_state_input(x1, params)


def generate_excitation(length: int, levels: int, hold_range, u_range, seed: int = 0) -> np.ndarray:
    """Piecewise-constant multi-level random excitation signal.

    Levels are evenly spaced over u_range (a single level sits at mid-range);
    hold durations are drawn uniformly from hold_range (inclusive).
    """
    lo, hi = float(u_range[0]), float(u_range[1])
    hold_lo, hold_hi = int(hold_range[0]), int(hold_range[1])
    if length <= 0:
        raise PlantDomainError("length must be positive")
    if levels <= 0:
        raise PlantDomainError("levels must be positive")
    if lo < 0 or hi < lo:
        raise PlantDomainError("u_range must satisfy 0 <= u_min <= u_max")
    if hold_lo <= 0 or hold_hi < hold_lo:
        raise PlantDomainError("hold_range must satisfy 1 <= min <= max")
    level_set = np.array([(lo + hi) / 2.0]) if levels == 1 else np.linspace(lo, hi, levels)
    rng = np.random.default_rng(seed)
    out = np.empty(length)
    k = 0
    while k < length:
        level = level_set[rng.integers(0, len(level_set))]
        hold = int(rng.integers(hold_lo, hold_hi + 1))
        out[k:k + hold] = level
        k += hold
    return out


@dataclass
class DataWindow:
    """One training pair: past (u, y) block, future inputs, future outputs."""

    X_p: np.ndarray   # (w, 2), columns (u, y)
    U: np.ndarray     # (p,)
    Y_true: np.ndarray  # (p,)

    def __post_init__(self):
        self.X_p = np.asarray(self.X_p, dtype=float)
        self.U = np.asarray(self.U, dtype=float)
        self.Y_true = np.asarray(self.Y_true, dtype=float)
        if self.X_p.ndim != 2 or self.X_p.shape[1] != 2:
            raise ValueError("X_p must have shape (w, 2)")
        if self.U.shape != self.Y_true.shape or self.U.ndim != 1:
            raise ValueError("U and Y_true must be 1-d with equal length")

    @property
    def w(self) -> int:
        return self.X_p.shape[0]

    @property
    def p(self) -> int:
        return self.U.shape[0]

    def full_X(self) -> np.ndarray:
        """The (w+p) x 2 stacked matrix: past block over [U, 0_p]."""
        bottom = np.column_stack([self.U, np.zeros(self.p)])
        return np.vstack([self.X_p, bottom])


def make_dataset(trajectory: Trajectory, w: int, p: int) -> list[DataWindow]:
    """Slide a (w past + p future) window over the trajectory with stride 1."""
    u, y = np.asarray(trajectory.u), np.asarray(trajectory.y)
    n = len(u)
    if w < 1 or p < 1:
        raise ValueError("w and p must be >= 1")
    if n < w + p:
        raise ValueError(f"trajectory length {n} is shorter than w+p = {w + p}")
    windows = []
    for s in range(n - w - p + 1):
        X_p = np.column_stack([u[s:s + w], y[s:s + w]])
        windows.append(DataWindow(X_p, u[s + w:s + w + p], y[s + w:s + w + p]))
    return windows


def save_trajectory_csv(path, trajectory: Trajectory):
    path = Path(path)
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["step", "u", "x1", "x2", "y"])
        for k in range(len(trajectory)):
            writer.writerow([k, repr(float(trajectory.u[k])), repr(float(trajectory.x1[k])),
                             repr(float(trajectory.x2[k])), repr(float(trajectory.x2[k]))])


def load_trajectory_csv(path) -> Trajectory:
    path = Path(path)
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if header != ["step", "u", "x1", "x2", "y"]:
            raise ValueError(f"unexpected trajectory CSV header: {header}")
        rows = [[float(v) for v in row] for row in reader]
    arr = np.array(rows)
    return Trajectory(arr[:, 1], arr[:, 2], arr[:, 3])


def save_dataset(path, windows: list[DataWindow]):
    """Write windows as flattened `X_p | U | Y_true` rows plus a JSON sidecar."""
    if not windows:
        raise ValueError("cannot save an empty dataset")
    path = Path(path)
    w, p = windows[0].w, windows[0].p
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        for win in windows:
            if win.w != w or win.p != p:
                raise ValueError("all windows must share the same (w, p)")
            flat = np.concatenate([win.X_p.ravel(), win.U, win.Y_true])
            writer.writerow([repr(float(v)) for v in flat])
    sidecar = path.with_suffix(path.suffix + ".json")
    sidecar.write_text(json.dumps({"w": w, "p": p, "count": len(windows)}))


def load_dataset(path) -> list[DataWindow]:
    path = Path(path)
    sidecar = path.with_suffix(path.suffix + ".json")
    meta = json.loads(sidecar.read_text())
    w, p = meta["w"], meta["p"]
    windows = []
    with path.open(newline="") as fh:
        for row in csv.reader(fh):
            flat = np.array([float(v) for v in row])
            if flat.size != 2 * w + 2 * p:
                raise ValueError("dataset row length does not match sidecar (w, p)")
            X_p = flat[:2 * w].reshape(w, 2)
            windows.append(DataWindow(X_p, flat[2 * w:2 * w + p], flat[2 * w + p:]))
    if len(windows) != meta["count"]:
        raise ValueError("dataset row count does not match sidecar count")
    return windows
