"""Time grids and Euler-Maruyama simulation with counter-based, reproducible
noise streams.

Every Brownian increment is a pure function of (seed, stream, path, step,
component): uniforms come from a Philox generator keyed by the seed with its
counter offset by the stream, and are mapped to normals by the inverse CDF.
Paths are therefore order-independent and any sub-block can be regenerated.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass
from typing import Callable

import numpy as np
from numpy.random import Generator, Philox
from scipy.special import ndtri

from .kernels import EmpiricalMeasure, GaussianMixture

__all__ = [
    "TimeGrid",
    "SdeModel",
    "PathBatch",
    "SimulationError",
    "stream_generator",
    "normal_increments",
    "sample_initial",
    "simulate",
    "paired_simulate",
]

_PATH_MAGIC = 0x4D4D4250415448_00  # "MMBPATH" + version byte slot
_BINARY_VERSION = 1

# smallest uniform fed to the inverse CDF; random() can return exactly 0.0
_U_FLOOR = 2.0**-64


class SimulationError(RuntimeError):
    """Raised when a trajectory leaves the finite range (NaN/Inf state)."""


@dataclass(frozen=True)
class TimeGrid:
    """Partition 0 = t_0 < ... < t_N = 1."""

    times: np.ndarray

    def __post_init__(self) -> None:
        t = np.asarray(self.times, dtype=np.float64).reshape(-1)
        if t.size < 2 or t[0] != 0.0 or t[-1] != 1.0:
            raise ValueError("grid must start at 0 and end at 1")
        if np.any(np.diff(t) <= 0):
            raise ValueError("grid times must be strictly increasing")
        object.__setattr__(self, "times", t)

    @staticmethod
    def uniform(n_steps: int) -> "TimeGrid":
        if n_steps < 1:
            raise ValueError("need at least one step")
        return TimeGrid(np.linspace(0.0, 1.0, n_steps + 1))

    @property
    def n_steps(self) -> int:
        return self.times.size - 1

    @property
    def is_uniform(self) -> bool:
        dt = np.diff(self.times)
        return bool(np.allclose(dt, dt[0], rtol=0.0, atol=1e-12))

    def deltas(self) -> np.ndarray:
        return np.diff(self.times)


DriftFn = Callable[[float, np.ndarray], np.ndarray]
DiffusionFn = Callable[[float, np.ndarray], np.ndarray]


@dataclass(frozen=True)
class SdeModel:
    """State dynamics dX = b(t,X) dt + sigma(t,X) dW.

    drift: None (zero), a constant d-vector, a (slope, intercept) affine pair
    with slope (d,d) and intercept (d,), or a callable (t, X batch) -> batch.
    diffusion: a scalar (sigma * I), a (d,m) matrix, or a callable.
    Callable forms simulate fine but are opaque to the training tape.
    """

    d: int
    m: int
    drift: object = None
    diffusion: object = 1.0

    def drift_at(self, t: float, x: np.ndarray) -> np.ndarray:
        if self.drift is None:
            return np.zeros_like(x)
        if callable(self.drift):
            return np.asarray(self.drift(t, x), dtype=np.float64)
        if isinstance(self.drift, tuple):
            slope, intercept = self.drift
            return x @ np.asarray(slope, dtype=np.float64).T + np.asarray(intercept, dtype=np.float64)
        return np.broadcast_to(np.asarray(self.drift, dtype=np.float64), x.shape)

    def diffusion_matrix(self) -> np.ndarray:
        """Constant (d, m) diffusion; raises for callable diffusion."""
        if callable(self.diffusion):
            raise ValueError("diffusion is state-dependent; no constant matrix")
        sig = np.asarray(self.diffusion, dtype=np.float64)
        if sig.ndim == 0:
            if self.d != self.m:
                raise ValueError("scalar diffusion requires d == m")
            return float(sig) * np.eye(self.d)
        if sig.shape != (self.d, self.m):
            raise ValueError(f"diffusion must have shape ({self.d}, {self.m})")
        return sig

    def diffusion_at(self, t: float, x: np.ndarray) -> np.ndarray:
        if callable(self.diffusion):
            return np.asarray(self.diffusion(t, x), dtype=np.float64)
        return self.diffusion_matrix()

    def is_constant_diffusion(self) -> bool:
        return not callable(self.diffusion)


@dataclass(frozen=True)
class PathBatch:
    """Simulated trajectories, values[path, step, coord]."""

    values: np.ndarray
    grid: TimeGrid
    seed: int
    stream: int

    @property
    def n_paths(self) -> int:
        return self.values.shape[0]

    @property
    def dimension(self) -> int:
        return self.values.shape[2]

    def terminal(self) -> np.ndarray:
        return self.values[:, -1, :]

    def at_step(self, i: int) -> np.ndarray:
        return self.values[:, i, :]

    def to_csv(self, path: str) -> None:
        d = self.dimension
        header = "path,step,t," + ",".join(f"x{j}" for j in range(d))
        m, n1, _ = self.values.shape
        paths = np.repeat(np.arange(m), n1)
        steps = np.tile(np.arange(n1), m)
        ts = np.tile(self.grid.times, m)
        flat = self.values.reshape(m * n1, d)
        table = np.column_stack([paths, steps, ts, flat])
        fmt = ["%d", "%d", "%.17g"] + ["%.17g"] * d
        np.savetxt(path, table, delimiter=",", header=header, comments="", fmt=fmt)

    def to_binary(self, path: str) -> None:
        m, n1, d = self.values.shape
        header = struct.pack(
            "<8Q", _PATH_MAGIC, _BINARY_VERSION, m, n1 - 1, d, self.seed, self.stream, 0
        )
        with open(path, "wb") as fh:
            fh.write(header)
            fh.write(np.ascontiguousarray(self.values, dtype="<f8").tobytes())

    @staticmethod
    def from_binary(path: str) -> "PathBatch":
        with open(path, "rb") as fh:
            raw = fh.read(64)
            magic, version, m, n, d, seed, stream, _ = struct.unpack("<8Q", raw)
            if magic != _PATH_MAGIC:
                raise ValueError("not a path batch file")
            if version != _BINARY_VERSION:
                raise ValueError(f"unsupported path batch version {version}")
            values = np.frombuffer(fh.read(), dtype="<f8").reshape(m, n + 1, d)
        return PathBatch(
            values=values.copy(), grid=TimeGrid.uniform(n), seed=seed, stream=stream
        )


def stream_generator(seed: int, stream: int) -> Generator:
    """Philox generator keyed by the seed, counter offset by the stream.

    Streams are 2^128 blocks apart, so they never overlap.
    """
    return Generator(Philox(key=np.uint64(seed), counter=int(stream) << 128))


def uniform_block(seed: int, stream: int, start: int, count: int) -> np.ndarray:
    """Uniforms at flat indices [start, start+count) of the stream.

    Index f maps to word f % 4 of Philox block (stream << 128) + f // 4, so
    any sub-block can be produced without generating its prefix.
    """
    block0, offset = divmod(start, 4)
    bg = Philox(key=np.uint64(seed), counter=(int(stream) << 128) + block0)
    u = Generator(bg).random(offset + count)
    return u[offset:]


def normal_increments(seed: int, stream: int, shape: tuple[int, ...]) -> np.ndarray:
    """Standard normals addressed by flat index within (seed, stream).

    Inverse-CDF mapping keeps the uniform -> normal correspondence one-to-one,
    which is what makes per-(path, step, component) addressing exact.
    """
    count = int(np.prod(shape))
    u = uniform_block(seed, stream, 0, count)
    return ndtri(np.maximum(u, _U_FLOOR)).reshape(shape)


def sample_initial(
    mu0: GaussianMixture | EmpiricalMeasure | np.ndarray | float,
    n_paths: int,
    seed: int,
    stream: int,
) -> np.ndarray:
    """Draw n_paths initial states from mu0 as an (n_paths, d) array.

    Point masses (zero-variance mixtures or bare vectors) replicate the atom;
    empirical measures draw rows with replacement.
    """
    if n_paths < 1:
        raise ValueError("need at least one path")
    rng = stream_generator(seed, stream)
    if isinstance(mu0, GaussianMixture):
        idx = rng.choice(mu0.n_components, size=n_paths, p=mu0.weights)
        z = ndtri(np.maximum(rng.random((n_paths, mu0.dimension)), _U_FLOOR))
        return mu0.means[idx] + z * np.sqrt(mu0.variances[idx])
    if isinstance(mu0, EmpiricalMeasure):
        idx = (rng.random(n_paths) * mu0.size).astype(np.int64)
        return mu0.samples[idx]
    atom = np.atleast_1d(np.asarray(mu0, dtype=np.float64))
    return np.tile(atom, (n_paths, 1))


def simulate(
    model: SdeModel,
    control: Callable[[float, np.ndarray], np.ndarray] | None,
    x0: np.ndarray,
    grid: TimeGrid,
    seed: int,
    stream: int,
) -> PathBatch:
    """Euler-Maruyama rollout of the (optionally controlled) dynamics.

    control(t, X batch) returns the (n_paths, m) control values entering the
    drift as sigma @ u; None means the uncontrolled base dynamics.
    """
    x0 = np.atleast_2d(np.asarray(x0, dtype=np.float64))
    n_paths, d = x0.shape
    if d != model.d:
        raise ValueError(f"x0 dimension {d} does not match model dimension {model.d}")
    n = grid.n_steps
    dW = normal_increments(seed, stream, (n_paths, n, model.m))
    dt = grid.deltas()
    values = np.empty((n_paths, n + 1, d), dtype=np.float64)
    values[:, 0, :] = x0
    x = x0.copy()
    for i in range(n):
        t = float(grid.times[i])
        step_noise = dW[:, i, :] * np.sqrt(dt[i])
        sig = model.diffusion_at(t, x)
        if sig.ndim == 2:
            noise_term = step_noise @ sig.T
        else:  # callable diffusion returning per-path (n_paths, d, m)
            noise_term = np.einsum("pdm,pm->pd", sig, step_noise)
        drift = model.drift_at(t, x)
        if control is not None:
            u = np.asarray(control(t, x), dtype=np.float64)
            if u.shape != (n_paths, model.m):
                raise ValueError(f"control returned shape {u.shape}, expected {(n_paths, model.m)}")
            if sig.ndim == 2:
                drift = drift + u @ sig.T
            else:
                drift = drift + np.einsum("pdm,pm->pd", sig, u)
        x = x + drift * dt[i] + noise_term
        if not np.all(np.isfinite(x)):
            raise SimulationError(f"non-finite state at step {i + 1} (exploding dynamics?)")
        values[:, i + 1, :] = x
    return PathBatch(values=values, grid=grid, seed=seed, stream=stream)


def paired_simulate(
    model: SdeModel,
    control: Callable[[float, np.ndarray], np.ndarray] | None,
    mu0: GaussianMixture | EmpiricalMeasure | np.ndarray | float,
    n_paths: int,
    grid: TimeGrid,
    seed: int,
    stream: int = 0,
) -> tuple[PathBatch, PathBatch]:
    """Two mutually independent batches from one seed.

    Initial draws and path noise use four disjoint streams derived from
    `stream`, so the pair is jointly reproducible yet independent.
    """
    s0 = int(stream) * 4
    x0_a = sample_initial(mu0, n_paths, seed, s0)
    x0_b = sample_initial(mu0, n_paths, seed, s0 + 1)
    batch_a = simulate(model, control, x0_a, grid, seed, s0 + 2)
    batch_b = simulate(model, control, x0_b, grid, seed, s0 + 3)
    return batch_a, batch_b
