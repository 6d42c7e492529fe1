"""Observation operator (per-step random masking + Gaussian noise), dataset
assembly, and the nearest-observation initialization baseline.

Unobserved entries are stored as exact zeros alongside a boolean mask; the
zero-fill/mask pair is also the network's input encoding.
"""

import struct
from dataclasses import dataclass

import numpy as np

from .errors import (ContractViolation, DegenerateCoverageError,
                     InitializationError, MagicMismatchError,
                     TruncatedFileError, VersionMismatchError)
from .lorenz96 import Lorenz96Config, Trajectory, simulate
from .rng import derive_seed, make_rng

OBSERVATION_MAGIC = b"L96O"
OBSERVATION_VERSION = 1


@dataclass
class ObservationSet:
    values: np.ndarray  # (T+1, n), zero where unobserved
    mask: np.ndarray    # (T+1, n) bool, True = observed
    noise_std: float
    coverage: float
    seed: int


@dataclass
class AssimDataset:
    truth: Trajectory          # held out, evaluation only
    observations: ObservationSet
    split: int                 # first index of the validation segment


def make_mask(n, T, coverage, seed):
    """Boolean (T+1, n) mask observing exactly round(coverage*n) variables
    at each step, a fresh uniformly random subset per step."""
    if not 0.0 < coverage <= 1.0:
        raise DegenerateCoverageError(f"coverage must be in (0, 1], got {coverage}")
    k = int(round(coverage * n))
    if k == 0:
        raise DegenerateCoverageError(
            f"coverage {coverage} rounds to 0 observed variables out of {n}")
    rng = make_rng(seed, "obs-mask")
    mask = np.zeros((T + 1, n), dtype=bool)
    for t in range(T + 1):
        mask[t, rng.permutation(n)[:k]] = True
    return mask


def observe(truth, mask, noise_std, seed):
    """Apply the observation operator: mask the truth and add N(0, noise_std²)
    noise at observed entries; unobserved entries are exactly zero."""
    states = truth.states if isinstance(truth, Trajectory) else np.asarray(truth)
    if mask.shape != states.shape:
        raise ContractViolation(
            f"mask shape {mask.shape} != truth shape {states.shape}")
    rng = make_rng(seed, "obs-noise")
    noise = noise_std * rng.standard_normal(states.shape)
    values = np.where(mask, states + noise, 0.0)
    n = states.shape[1]
    coverage = float(mask[0].sum()) / n if states.shape[0] else 1.0
    return ObservationSet(values=values, mask=mask, noise_std=noise_std,
                          coverage=coverage, seed=seed)


def make_dataset(config, steps, coverage, noise_std, seed, split_frac=0.9):
    """Simulate a truth trajectory and observe it; split marks the start of
    the validation segment (final 1 - split_frac of the time range)."""
    truth = simulate(config, steps, seed=derive_seed(seed, "truth"))
    mask = make_mask(config.n, steps, coverage, derive_seed(seed, "mask"))
    obs = observe(truth, mask, noise_std, derive_seed(seed, "noise"))
    split = int(round(split_frac * (steps + 1)))
    split = min(max(split, 1), steps)
    return AssimDataset(truth=truth, observations=obs, split=split)


def nearest_init(obs):
    """Fill every (t, i) cell with the observation of variable i nearest in
    time, ties broken toward the earlier time."""
    values, mask = obs.values, obs.mask
    Tp1, n = values.shape
    out = np.empty_like(values)
    times = np.arange(Tp1)
    for i in range(n):
        obs_t = np.flatnonzero(mask[:, i])
        if obs_t.size == 0:
            raise InitializationError(f"variable {i} is never observed in the window")
        # index of first observed time >= t, then compare with the one before
        right = np.searchsorted(obs_t, times, side="left")
        right = np.clip(right, 0, obs_t.size - 1)
        left = np.clip(right - 1, 0, obs_t.size - 1)
        d_left = np.abs(times - obs_t[left])
        d_right = np.abs(obs_t[right] - times)
        pick = np.where(d_left <= d_right, obs_t[left], obs_t[right])
        out[:, i] = values[pick, i]
    return out


# -- persistence -------------------------------------------------------------


def save_observations(obs, path):
    Tp1, n = obs.values.shape
    header = struct.pack(
        "<4sIQQddQ", OBSERVATION_MAGIC, OBSERVATION_VERSION,
        n, Tp1 - 1, obs.noise_std, obs.coverage, obs.seed)
    packed = np.packbits(obs.mask.ravel())
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(np.ascontiguousarray(obs.values, dtype="<f8").tobytes())
        fh.write(packed.tobytes())


def load_observations(path):
    fmt = "<4sIQQddQ"
    with open(path, "rb") as fh:
        header = fh.read(struct.calcsize(fmt))
        if len(header) < struct.calcsize(fmt):
            raise TruncatedFileError(f"{path}: truncated observation header")
        magic, version, n, T, noise_std, coverage, seed = struct.unpack(fmt, header)
        if magic != OBSERVATION_MAGIC:
            raise MagicMismatchError(f"{path}: bad magic {magic!r}")
        if version != OBSERVATION_VERSION:
            raise VersionMismatchError(f"{path}: unsupported version {version}")
        nval = (T + 1) * n
        payload = fh.read(nval * 8)
        if len(payload) < nval * 8:
            raise TruncatedFileError(f"{path}: truncated observation values")
        nbits = (nval + 7) // 8
        bits = fh.read(nbits)
        if len(bits) < nbits:
            raise TruncatedFileError(f"{path}: truncated observation mask")
    values = np.frombuffer(payload, dtype="<f8").reshape(T + 1, n).copy()
    mask = np.unpackbits(np.frombuffer(bits, dtype=np.uint8),
                         count=nval).astype(bool).reshape(T + 1, n)
    return ObservationSet(values=values, mask=mask, noise_std=noise_std,
                          coverage=coverage, seed=seed)
