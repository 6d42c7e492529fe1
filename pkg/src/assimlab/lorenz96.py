"""Lorenz-96 dynamics: tendency, RK4 stepping, trajectory generation, and
the differentiable k-step propagator.

All state functions accept either plain numpy arrays or diffcore Vars, and
either single states (n,) or batches (B, n); the periodic stencil is
expressed with circular rolls along the last axis.
"""

import struct
from dataclasses import dataclass

import numpy as np

from . import diffcore as dc
from .errors import (BlowupError, ConfigError, MagicMismatchError,
                     TruncatedFileError, VersionMismatchError)
from .rng import make_rng

TRAJECTORY_MAGIC = b"L96T"
TRAJECTORY_VERSION = 1


@dataclass(frozen=True)
class Lorenz96Config:
    n: int = 40
    forcing: float = 8.0
    dt: float = 0.01
    spinup_steps: int = 1000

    def __post_init__(self):
        if self.n < 4:
            raise ConfigError(f"Lorenz-96 needs n >= 4, got n={self.n}")
        if self.dt <= 0:
            raise ConfigError("dt must be positive")


@dataclass
class Trajectory:
    states: np.ndarray  # (T+1, n)
    config: Lorenz96Config
    seed: int


def _roll(x, shift):
    if isinstance(x, dc.Var):
        return dc.roll(x, shift, axis=-1)
    return np.roll(x, shift, axis=-1)


def tendency(x, forcing):
    """Quadratic advection + damping + forcing, periodic in space."""
    n = x.shape[-1]
    if n < 4:
        raise ConfigError(f"Lorenz-96 tendency needs n >= 4, got n={n}")
    xp1 = _roll(x, -1)
    xm2 = _roll(x, 2)
    xm1 = _roll(x, 1)
    return (xp1 - xm2) * xm1 - x + forcing


def rk4_step(x, dt, forcing):
    """One classical RK4 step of the Lorenz-96 ODE."""
    k1 = tendency(x, forcing)
    k2 = tendency(x + (0.5 * dt) * k1, forcing)
    k3 = tendency(x + (0.5 * dt) * k2, forcing)
    k4 = tendency(x + dt * k3, forcing)
    out = x + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
    v = out.value if isinstance(out, dc.Var) else out
    if not np.all(np.isfinite(v)):
        raise BlowupError("RK4 step produced non-finite state (dt too large?)")
    return out


def propagate_k(x, k, dt, forcing):
    """Advance a state (or batch) by k RK4 steps; k=0 is the identity.

    Differentiable when x is a Var.
    """
    if k < 0:
        raise ConfigError("propagate_k: k must be >= 0")
    for _ in range(k):
        x = rk4_step(x, dt, forcing)
    return x


def default_initial_state(config, seed):
    """Equilibrium F*1 plus a small seeded perturbation."""
    rng = make_rng(seed, "l96-init")
    x0 = config.forcing * np.ones(config.n)
    return x0 + 0.01 * rng.standard_normal(config.n)


def simulate(config, steps, x0=None, seed=0):
    """Integrate for `steps` steps, recording steps+1 states.

    Without an explicit x0, spinup_steps are run first and discarded so the
    recorded trajectory starts on the attractor.
    """
    if steps < 0:
        raise ConfigError("simulate: steps must be >= 0")
    if x0 is None:
        x = default_initial_state(config, seed)
        for _ in range(config.spinup_steps):
            x = rk4_step(x, config.dt, config.forcing)
    else:
        x = np.asarray(x0, dtype=np.float64).copy()
        if x.shape != (config.n,):
            raise ConfigError(f"x0 shape {x.shape} != ({config.n},)")
    states = np.empty((steps + 1, config.n))
    states[0] = x
    for t in range(steps):
        x = rk4_step(x, config.dt, config.forcing)
        states[t + 1] = x
    return Trajectory(states=states, config=config, seed=seed)


# -- persistence -------------------------------------------------------------


def save_trajectory(traj, path):
    T = traj.states.shape[0] - 1
    header = struct.pack(
        "<4sIQQddQQ", TRAJECTORY_MAGIC, TRAJECTORY_VERSION,
        traj.config.n, T, traj.config.dt, traj.config.forcing,
        traj.config.spinup_steps, traj.seed)
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(np.ascontiguousarray(traj.states, dtype="<f8").tobytes())


def load_trajectory(path):
    with open(path, "rb") as fh:
        header = fh.read(struct.calcsize("<4sIQQddQQ"))
        if len(header) < struct.calcsize("<4sIQQddQQ"):
            raise TruncatedFileError(f"{path}: truncated trajectory header")
        magic, version, n, T, dt, forcing, spinup, seed = \
            struct.unpack("<4sIQQddQQ", header)
        if magic != TRAJECTORY_MAGIC:
            raise MagicMismatchError(f"{path}: bad magic {magic!r}")
        if version != TRAJECTORY_VERSION:
            raise VersionMismatchError(f"{path}: unsupported version {version}")
        payload = fh.read((T + 1) * n * 8)
        if len(payload) < (T + 1) * n * 8:
            raise TruncatedFileError(f"{path}: truncated trajectory payload")
    states = np.frombuffer(payload, dtype="<f8").reshape(T + 1, n).copy()
    config = Lorenz96Config(n=n, forcing=forcing, dt=dt, spinup_steps=spinup)
    return Trajectory(states=states, config=config, seed=seed)
