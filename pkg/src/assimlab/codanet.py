"""The state-estimation network: a fully convolutional map from an
observation window (values + mask channels) to a diagonal Gaussian
(mu, sigma) at the window center, with deterministic, gaussian and
dropout output modes, plus binary checkpoint persistence.

The spatial domain is periodic, so every layer is a 1-D circular
convolution; cyclically shifting the inputs shifts the outputs.
"""

import struct
from dataclasses import dataclass, field, fields, replace

import numpy as np

from . import diffcore as dc
from .errors import (ContractViolation, MagicMismatchError, NumericalError,
                     ShapeMismatchError, TruncatedFileError,
                     VersionMismatchError)
from .rng import make_rng

CHECKPOINT_MAGIC = b"CODA"
CHECKPOINT_VERSION = 1

MODES = ("deterministic", "gaussian", "dropout")


@dataclass(frozen=True)
class NetworkConfig:
    window_half_width: int = 8
    hidden_channels: int = 32
    depth: int = 3
    kernel_width: int = 5
    dropout_rate: float = 0.0
    output_mode: str = "gaussian"
    sigma_floor: float = 1e-3

    def __post_init__(self):
        if self.window_half_width < 0:
            raise ContractViolation("window_half_width must be >= 0")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ContractViolation("dropout_rate must be in [0, 1)")
        if self.sigma_floor <= 0:
            raise ContractViolation("sigma_floor must be positive")
        if self.output_mode not in ("deterministic", "gaussian"):
            raise ContractViolation(f"unknown output_mode {self.output_mode!r}")

    @property
    def window_len(self):
        return 2 * self.window_half_width + 1


@dataclass
class GaussianField:
    """Diagonal Gaussian state estimate; entries may be Vars inside a graph."""
    mu: object
    sigma: object

    def arrays(self):
        mu = self.mu.value if isinstance(self.mu, dc.Var) else np.asarray(self.mu)
        sg = self.sigma.value if isinstance(self.sigma, dc.Var) else np.asarray(self.sigma)
        return mu, sg


@dataclass
class Checkpoint:
    params: dict            # name -> np.ndarray
    config: NetworkConfig
    metadata: dict = field(default_factory=dict)  # str -> str


def param_shapes(config):
    """Ordered name -> shape map implied by the architecture."""
    c_in = 2 * config.window_len
    shapes = {}
    ch = c_in
    for layer in range(config.depth):
        shapes[f"conv{layer}.w"] = (config.hidden_channels, ch, config.kernel_width)
        shapes[f"conv{layer}.b"] = (config.hidden_channels,)
        ch = config.hidden_channels
    shapes["head.w"] = (2, ch, 1)
    shapes["head.b"] = (2,)
    return shapes


def init_params(config, seed):
    """Uniform fan-in initialization, reproducible from the seed."""
    rng = make_rng(seed, "net-init")
    params = {}
    for name, shape in param_shapes(config).items():
        if name.endswith(".b"):
            params[name] = np.zeros(shape)
        else:
            fan_in = shape[1] * shape[2]
            a = 1.0 / np.sqrt(fan_in)
            params[name] = rng.uniform(-a, a, size=shape)
    return params


def dropout_mask(shape, rate, seed):
    """Inverted-dropout mask: zeros with probability `rate`, survivors
    scaled by 1/(1-rate)."""
    rng = make_rng(seed, "dropout")
    keep = rng.random(shape) >= rate
    return keep / (1.0 - rate)


def forward(params, window_values, window_mask, config, mode=None,
            dropout_seed=None):
    """Map an observation window to the Gaussian field at its center.

    window_values/window_mask: (2w+1, n) or batched (B, 2w+1, n). Params
    may be Vars (training) or arrays. Returns a GaussianField whose mu and
    sigma are Vars of shape (n,) or (B, n). In deterministic and dropout
    modes sigma is all-ones and should be ignored by callers.
    """
    if mode is None:
        mode = config.output_mode
    if mode not in MODES:
        raise ContractViolation(f"unknown forward mode {mode!r}")
    vals = np.asarray(window_values, dtype=np.float64)
    msk = np.asarray(window_mask, dtype=np.float64)
    if vals.shape != msk.shape:
        raise ContractViolation("window values/mask shape mismatch")
    squeeze = vals.ndim == 2
    if squeeze:
        vals, msk = vals[None], msk[None]
    L = config.window_len
    if vals.ndim != 3 or vals.shape[1] != L:
        raise ContractViolation(
            f"window shape {vals.shape[1:]} incompatible with window length {L}")

    p = {k: (v if isinstance(v, dc.Var) else dc.Var(v, op="param"))
         for k, v in params.items()}
    expected = param_shapes(config)
    for name, shape in expected.items():
        if name not in params:
            raise ContractViolation(f"missing parameter {name!r}")
        if p[name].value.shape != shape:
            raise ContractViolation(
                f"parameter {name!r} has shape {p[name].value.shape}, "
                f"expected {shape}")

    h = dc.Var(np.concatenate([vals, msk], axis=1), op="input")  # (B, 2L, n)
    for layer in range(config.depth):
        h = dc.tanh(dc.circular_conv1d(h, p[f"conv{layer}.w"], p[f"conv{layer}.b"]))
        if not np.all(np.isfinite(h.value)):
            raise NumericalError(f"non-finite activations after layer {layer}")
    if mode == "dropout" and config.dropout_rate > 0.0:
        if dropout_seed is None:
            raise ContractViolation("dropout mode needs a dropout_seed")
        m = dropout_mask(h.value.shape, config.dropout_rate, dropout_seed)
        h = h * dc.Var(m, op="dropout_mask")
    out = dc.circular_conv1d(h, p["head.w"], p["head.b"])  # (B, 2, n)
    mu = out[:, 0, :]
    if mode == "gaussian":
        sigma = dc.softplus(out[:, 1, :]) + config.sigma_floor
    else:
        sigma = dc.Var(np.ones_like(mu.value), op="unit_sigma")
    if squeeze:
        mu, sigma = mu[0], sigma[0]
    return GaussianField(mu=mu, sigma=sigma)


def sample(fld, seed):
    """Reparameterized draw mu + sigma*z; differentiable in mu and sigma."""
    mu_v, sg_v = fld.arrays()
    rng = make_rng(seed, "field-sample")
    z = rng.standard_normal(mu_v.shape)
    mu = fld.mu if isinstance(fld.mu, dc.Var) else dc.Var(fld.mu)
    sigma = fld.sigma if isinstance(fld.sigma, dc.Var) else dc.Var(fld.sigma)
    return mu + sigma * dc.Var(z, op="noise")


# -- checkpoint persistence ---------------------------------------------------


def _config_metadata(config):
    return {f"config.{f.name}": repr(getattr(config, f.name))
            for f in fields(NetworkConfig)}


def _config_from_metadata(meta):
    kwargs = {}
    for f in fields(NetworkConfig):
        raw = meta[f"config.{f.name}"]
        if f.type is str or f.name == "output_mode":
            kwargs[f.name] = raw.strip("'\"")
        elif f.name in ("window_half_width", "hidden_channels", "depth",
                        "kernel_width"):
            kwargs[f.name] = int(raw)
        else:
            kwargs[f.name] = float(raw)
    return NetworkConfig(**kwargs)


def _write_str(fh, s):
    b = s.encode("utf-8")
    fh.write(struct.pack("<I", len(b)))
    fh.write(b)


def _read_exact(fh, count, path):
    b = fh.read(count)
    if len(b) < count:
        raise TruncatedFileError(f"{path}: truncated checkpoint")
    return b


def _read_str(fh, path):
    (ln,) = struct.unpack("<I", _read_exact(fh, 4, path))
    return _read_exact(fh, ln, path).decode("utf-8")


def save_checkpoint(ckpt, path):
    meta = dict(ckpt.metadata)
    meta.update(_config_metadata(ckpt.config))
    with open(path, "wb") as fh:
        fh.write(struct.pack("<4sI", CHECKPOINT_MAGIC, CHECKPOINT_VERSION))
        fh.write(struct.pack("<I", len(meta)))
        for k in sorted(meta):
            _write_str(fh, k)
            _write_str(fh, str(meta[k]))
        fh.write(struct.pack("<I", len(ckpt.params)))
        for name in sorted(ckpt.params):
            arr = np.ascontiguousarray(ckpt.params[name], dtype="<f8")
            _write_str(fh, name)
            fh.write(struct.pack("<I", arr.ndim))
            for d in arr.shape:
                fh.write(struct.pack("<Q", d))
            fh.write(arr.tobytes())


def load_checkpoint(path):
    with open(path, "rb") as fh:
        head = _read_exact(fh, 8, path)
        magic, version = struct.unpack("<4sI", head)
        if magic != CHECKPOINT_MAGIC:
            raise MagicMismatchError(f"{path}: bad magic {magic!r}")
        if version != CHECKPOINT_VERSION:
            raise VersionMismatchError(f"{path}: unsupported version {version}")
        (n_meta,) = struct.unpack("<I", _read_exact(fh, 4, path))
        meta = {}
        for _ in range(n_meta):
            k = _read_str(fh, path)
            meta[k] = _read_str(fh, path)
        (n_tensors,) = struct.unpack("<I", _read_exact(fh, 4, path))
        params = {}
        for _ in range(n_tensors):
            name = _read_str(fh, path)
            (rank,) = struct.unpack("<I", _read_exact(fh, 4, path))
            shape = tuple(struct.unpack("<Q", _read_exact(fh, 8, path))[0]
                          for _ in range(rank))
            count = int(np.prod(shape)) if shape else 1
            data = _read_exact(fh, count * 8, path)
            params[name] = np.frombuffer(data, dtype="<f8").reshape(shape).copy()
    config = _config_from_metadata(meta)
    user_meta = {k: v for k, v in meta.items() if not k.startswith("config.")}
    expected = param_shapes(config)
    if set(params) != set(expected):
        raise ShapeMismatchError(f"{path}: parameter names disagree with config")
    for name, shape in expected.items():
        if params[name].shape != shape:
            raise ShapeMismatchError(
                f"{path}: {name!r} has shape {params[name].shape}, "
                f"config implies {shape}")
    return Checkpoint(params=params, config=config, metadata=user_meta)
