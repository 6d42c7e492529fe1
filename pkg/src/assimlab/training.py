"""Unsupervised losses, the training loop, lambda calibration, and the
dropout / ensembling baselines.

The deterministic loss propagates the network's central estimate forward
and scores it against the observations over the horizon, plus a
self-consistency penalty against the network's own estimate h steps later.
The variational loss replaces the point estimate by reparameterized draws
from the predicted Gaussian and the penalty by the negative log-likelihood
of the propagated draw under the Gaussian predicted at t+h.
"""

import copy
import math
import time
from dataclasses import dataclass, replace

import numpy as np

from . import codanet, diffcore as dc, metrics
from .codanet import Checkpoint, GaussianField
from .errors import (CalibrationError, ContractViolation, DifferentiationError,
                     NumericalError)
from .lorenz96 import rk4_step
from .rng import derive_seed, make_rng

LOG2PI = math.log(2.0 * math.pi)


@dataclass(frozen=True)
class TrainConfig:
    mode: str = "variational"      # deterministic | variational | dropout
    horizon: int = 10
    lam: float = 0.3
    mc_samples: int = 1
    batch_size: int = 64
    epochs: int = 5
    lr: float = 1e-3
    seed: int = 0
    dataset_id: str = ""
    detach_target: bool = False
    eval_centers: int = 200        # val subsample for per-epoch metrics

    def __post_init__(self):
        if self.horizon < 0:
            raise ContractViolation("horizon must be >= 0")
        if self.mc_samples < 1:
            raise ContractViolation("mc_samples must be >= 1")
        if self.mode not in ("deterministic", "variational", "dropout"):
            raise ContractViolation(f"unknown training mode {self.mode!r}")


@dataclass
class WindowBatch:
    """Windows centered at times t: network inputs at t and t+h plus the
    observations y_{t..t+h} scored by the loss."""
    vals_t: np.ndarray    # (B, 2w+1, n)
    mask_t: np.ndarray
    vals_th: np.ndarray   # (B, 2w+1, n), centered at t+h
    mask_th: np.ndarray
    obs_vals: np.ndarray  # (B, h+1, n)
    obs_mask: np.ndarray
    dt: float
    forcing: float

    @property
    def size(self):
        return self.vals_t.shape[0]


def valid_centers(total_T, w, h, lo=0, hi=None):
    """Center times t whose full footprint [t-w, t+h+w] lies in [lo, hi]."""
    if hi is None:
        hi = total_T
    start = max(lo, 0) + w
    stop = min(hi, total_T) - h - w
    return np.arange(start, stop + 1)


def make_batch(obs, centers, w, h, dt, forcing):
    centers = np.asarray(centers, dtype=int)
    Tp1 = obs.values.shape[0]
    if centers.size == 0:
        raise ContractViolation("empty batch")
    if centers.min() - w < 0 or centers.max() + h + w > Tp1 - 1:
        raise ContractViolation("window extends outside the series")
    widx = centers[:, None] + np.arange(-w, w + 1)[None, :]
    oidx = centers[:, None] + np.arange(0, h + 1)[None, :]
    return WindowBatch(
        vals_t=obs.values[widx], mask_t=obs.mask[widx].astype(np.float64),
        vals_th=obs.values[widx + h], mask_th=obs.mask[widx + h].astype(np.float64),
        obs_vals=obs.values[oidx], obs_mask=obs.mask[oidx].astype(np.float64),
        dt=dt, forcing=forcing)


def gaussian_nll(x, fld):
    """Negative log density of x under the diagonal Gaussian field, summed
    over all entries (and over the batch when x is (B, n))."""
    mu = fld.mu if isinstance(fld.mu, dc.Var) else dc.Var(fld.mu)
    sigma = fld.sigma if isinstance(fld.sigma, dc.Var) else dc.Var(fld.sigma)
    x = x if isinstance(x, dc.Var) else dc.Var(x)
    if x.value.shape != mu.value.shape:
        raise ContractViolation("gaussian_nll: shape mismatch")
    quad = 0.5 * dc.sumsq((x - mu) / sigma)
    logdet = dc.vsum(dc.log(sigma))
    out = quad + logdet + 0.5 * LOG2PI * x.value.size
    if not np.isfinite(out.value):
        raise NumericalError("gaussian_nll is non-finite")
    return out


def _masked_se(x, y, m):
    """Sum of squared errors over observed entries only."""
    return dc.sumsq(dc.Var(m) * (x - dc.Var(y)))


def _observation_term(x0, batch, h):
    """Score the propagated state against y_{t..t+h} over observed cells."""
    x = x0
    term = _masked_se(x, batch.obs_vals[:, 0], batch.obs_mask[:, 0])
    for i in range(1, h + 1):
        x = rk4_step(x, batch.dt, batch.forcing)
        term = term + _masked_se(x, batch.obs_vals[:, i], batch.obs_mask[:, i])
    return term, x


def coda_loss(params, batch, h, lam, net_config, dropout_seed=None):
    """Deterministic unsupervised loss, averaged over the batch."""
    mode = "dropout" if dropout_seed is not None else "deterministic"
    fld_t = codanet.forward(params, batch.vals_t, batch.mask_t, net_config,
                            mode=mode, dropout_seed=dropout_seed)
    total, x_h = _observation_term(fld_t.mu, batch, h)
    if lam != 0.0 and h > 0:
        seed_th = None if dropout_seed is None else derive_seed(dropout_seed, "th")
        fld_th = codanet.forward(params, batch.vals_th, batch.mask_th,
                                 net_config, mode=mode, dropout_seed=seed_th)
        total = total + lam * dc.sumsq(fld_th.mu - x_h)
    return total / batch.size


def variational_loss(params, batch, h, lam, mc_samples, seed, net_config,
                     detach_target=False):
    """Monte-Carlo unsupervised loss over reparameterized draws."""
    fld_t = codanet.forward(params, batch.vals_t, batch.mask_t, net_config,
                            mode="gaussian")
    fld_th = codanet.forward(params, batch.vals_th, batch.mask_th, net_config,
                             mode="gaussian")
    if detach_target:
        mu, sg = fld_th.arrays()
        fld_th = GaussianField(mu=mu.copy(), sigma=sg.copy())
    total = None
    for s in range(mc_samples):
        x0 = codanet.sample(fld_t, derive_seed(seed, f"mc{s}"))
        term, x_h = _observation_term(x0, batch, h)
        if lam != 0.0 and h > 0:
            term = term + lam * gaussian_nll(x_h, fld_th)
        total = term if total is None else total + term
    return total / (mc_samples * batch.size)


def _loss_for(params, batch, tcfg, net_config, seed):
    if tcfg.mode == "variational":
        return variational_loss(params, batch, tcfg.horizon, tcfg.lam,
                                tcfg.mc_samples, seed, net_config,
                                detach_target=tcfg.detach_target)
    if tcfg.mode == "dropout":
        return coda_loss(params, batch, tcfg.horizon, tcfg.lam, net_config,
                         dropout_seed=seed)
    return coda_loss(params, batch, tcfg.horizon, tcfg.lam, net_config)


# -- evaluation helpers -------------------------------------------------------


def predict_fields(ckpt, obs, centers, chunk=512):
    """Gaussian (mu, sigma) predictions at the given centers, batched."""
    w = ckpt.config.window_half_width
    mus, sgs = [], []
    centers = np.asarray(centers, dtype=int)
    for i in range(0, centers.size, chunk):
        part = centers[i:i + chunk]
        widx = part[:, None] + np.arange(-w, w + 1)[None, :]
        fld = codanet.forward(ckpt.params, obs.values[widx],
                              obs.mask[widx].astype(np.float64), ckpt.config,
                              mode="gaussian")
        mu, sg = fld.arrays()
        mus.append(mu)
        sgs.append(sg)
    return np.concatenate(mus), np.concatenate(sgs)


def ensemble_predict(members, window_values, window_mask, samples_per_member,
                     seed):
    """Pool equal numbers of state samples from every ensemble member.

    Gaussian-mode members contribute reparameterized draws; dropout-mode
    members contribute mean predictions under fresh dropout masks. Returns
    an array of shape (M_total, ...state).
    """
    if not members:
        raise ContractViolation("empty ensemble")
    cfg0 = members[0].config
    for m in members[1:]:
        if m.config != cfg0:
            raise ContractViolation("ensemble members have mismatched configs")
    pooled = []
    for j, m in enumerate(members):
        if cfg0.output_mode == "gaussian":
            fld = codanet.forward(m.params, window_values, window_mask,
                                  m.config, mode="gaussian")
            for s in range(samples_per_member):
                draw = codanet.sample(fld, derive_seed(seed, f"m{j}s{s}"))
                pooled.append(draw.value)
        else:
            for s in range(samples_per_member):
                fld = codanet.forward(m.params, window_values, window_mask,
                                      m.config, mode="dropout",
                                      dropout_seed=derive_seed(seed, f"m{j}s{s}"))
                mu, _ = fld.arrays()
                pooled.append(mu)
    return np.stack(pooled)


def evaluate_checkpoint(ckpt_or_members, dataset, n_members=100, seed=0,
                        max_centers=None, n_bins=20):
    """CRPS / SSRAT / SSREL of a checkpoint (or ensemble) on the held-out
    validation segment, against the truth."""
    members = (ckpt_or_members if isinstance(ckpt_or_members, (list, tuple))
               else [ckpt_or_members])
    cfg = members[0].config
    w = cfg.window_half_width
    obs, truth = dataset.observations, dataset.truth
    T = obs.values.shape[0] - 1
    centers = np.arange(max(dataset.split, w), T - w + 1)
    if centers.size == 0:
        raise ContractViolation("validation segment too short for the window")
    if max_centers is not None and centers.size > max_centers:
        stride = centers.size // max_centers
        centers = centers[::stride][:max_centers]
    truths = truth.states[centers]  # (C, n)

    if len(members) == 1 and cfg.output_mode == "gaussian":
        mu, sg = predict_fields(members[0], obs, centers)
        crps = float(np.mean(metrics.crps_gaussian(mu, sg, truths)))
        table = metrics.spread_skill(sg, mu, truths, n_bins=n_bins)
    else:
        spm = max(1, n_members // len(members))
        widx = centers[:, None] + np.arange(-w, w + 1)[None, :]
        draws = ensemble_predict(members, obs.values[widx],
                                 obs.mask[widx].astype(np.float64), spm, seed)
        draws = np.moveaxis(draws, 0, -1)  # (C, n, M)
        crps = float(np.mean(metrics.crps_ensemble(draws, truths)))
        mu = draws.mean(axis=-1)
        sg = draws.std(axis=-1, ddof=1)
        table = metrics.spread_skill(sg, mu, truths, n_bins=n_bins)
    return {"crps": crps, "ssrat": table.ssrat, "ssrel": table.ssrel}, table


def climatology_crps(dataset):
    """CRPS of a Gaussian climatology fitted on observed training values,
    scored on the validation truth."""
    obs, truth = dataset.observations, dataset.truth
    train_vals = obs.values[:dataset.split][obs.mask[:dataset.split]]
    mu, sg = float(train_vals.mean()), float(train_vals.std())
    val_truth = truth.states[dataset.split:]
    return float(np.mean(metrics.crps_gaussian(mu, sg, val_truth)))


# -- training loop ------------------------------------------------------------


def write_train_log(path, rows):
    with open(path, "w") as fh:
        fh.write("# assimlab training log schema v1\n")
        fh.write("epoch,train_loss,val_loss,val_crps,val_ssrat,val_ssrel,"
                 "wall_seconds\n")
        for r in rows:
            fh.write("{epoch},{train_loss:.17g},{val_loss:.17g},"
                     "{val_crps:.17g},{val_ssrat:.17g},{val_ssrel:.17g},"
                     "{wall_seconds:.3f}\n".format(**r))


def train(tcfg, dataset, net_config, log_rows=None):
    """Adam over shuffled window batches; returns the best-validation
    checkpoint. On divergence, aborts with the last finite checkpoint and
    a 'diverged' metadata flag."""
    obs = dataset.observations
    dyn = dataset.truth.config
    w, h = net_config.window_half_width, tcfg.horizon
    T = obs.values.shape[0] - 1
    train_centers = valid_centers(T, w, h, lo=0, hi=dataset.split - 1)
    val_centers = valid_centers(T, w, h, lo=dataset.split, hi=T)
    if train_centers.size < 1:
        raise ContractViolation("dataset too small for one training window")

    if tcfg.mode == "variational" and net_config.output_mode != "gaussian":
        raise ContractViolation("variational training needs gaussian output")

    params = codanet.init_params(net_config, derive_seed(tcfg.seed, "init"))
    state = dc.adam_init(params, lr=tcfg.lr)
    best = copy.deepcopy(params)
    best_val = np.inf
    best_epoch = 0
    diverged = False
    rows = log_rows if log_rows is not None else []
    t_start = time.monotonic()

    def val_loss(p):
        if val_centers.size == 0:
            return float("nan")
        sub = val_centers[:256]
        vb = make_batch(obs, sub, w, h, dyn.dt, dyn.forcing)
        out = _loss_for(p, vb, tcfg, net_config, derive_seed(tcfg.seed, "val"))
        return float(out.value)

    for epoch in range(1, tcfg.epochs + 1):
        rng = make_rng(tcfg.seed, f"epoch{epoch}")
        order = rng.permutation(train_centers)
        epoch_loss, n_batches = 0.0, 0
        for b0 in range(0, order.size, tcfg.batch_size):
            centers = order[b0:b0 + tcfg.batch_size]
            batch = make_batch(obs, centers, w, h, dyn.dt, dyn.forcing)
            pvars = {k: dc.Var(v, op="param") for k, v in params.items()}
            seed_b = derive_seed(tcfg.seed, f"e{epoch}b{b0}")
            try:
                loss = _loss_for(pvars, batch, tcfg, net_config, seed_b)
                grads_list = dc.grad_of(loss, list(pvars.values()))
            except (DifferentiationError, NumericalError):
                diverged = True
                break
            if not np.isfinite(loss.value):
                diverged = True
                break
            grads = dict(zip(pvars.keys(), grads_list))
            params, state = dc.adam_step(params, grads, state)
            epoch_loss += float(loss.value)
            n_batches += 1
        if diverged:
            break
        vl = val_loss(params)
        val_metrics = {"crps": float("nan"), "ssrat": float("nan"),
                       "ssrel": float("nan")}
        if val_centers.size >= 2:
            ck = Checkpoint(params=params, config=net_config, metadata={})
            try:
                val_metrics, _ = evaluate_checkpoint(
                    ck, dataset, n_members=20, seed=derive_seed(tcfg.seed, "ev"),
                    max_centers=tcfg.eval_centers,
                    n_bins=min(20, max(1, tcfg.eval_centers // 20)))
            except (ContractViolation, NumericalError):
                pass
        rows.append({
            "epoch": epoch,
            "train_loss": epoch_loss / max(n_batches, 1),
            "val_loss": vl,
            "val_crps": val_metrics["crps"],
            "val_ssrat": val_metrics["ssrat"],
            "val_ssrel": val_metrics["ssrel"],
            "wall_seconds": time.monotonic() - t_start,
        })
        score = vl if np.isfinite(vl) else rows[-1]["train_loss"]
        if score < best_val:
            best_val = score
            best = copy.deepcopy(params)
            best_epoch = epoch

    meta = {
        "mode": tcfg.mode,
        "lambda": repr(tcfg.lam),
        "horizon": str(tcfg.horizon),
        "seed": str(tcfg.seed),
        "dataset_id": tcfg.dataset_id,
        "epoch": str(best_epoch),
        "diverged": str(diverged).lower(),
    }
    return Checkpoint(params=best, config=net_config, metadata=meta)


def calibrate_lambda(candidates, tcfg, dataset, net_config):
    """Train one model per candidate lambda; return (best_lambda,
    checkpoint, diagnostics). Best = validation SSRAT closest to 1, ties
    toward the smaller lambda."""
    if len(candidates) < 1:
        raise ContractViolation("calibrate_lambda: need at least one candidate")
    diagnostics = []
    best = None
    for idx, lam in enumerate(sorted(candidates)):
        cfg_i = replace(tcfg, lam=lam, seed=derive_seed(tcfg.seed, f"lam{idx}"))
        ckpt = train(cfg_i, dataset, net_config)
        if ckpt.metadata.get("diverged") == "true":
            diagnostics.append({"lambda": lam, "ssrat": float("nan"),
                                "crps": float("nan"), "diverged": True})
            continue
        m, _ = evaluate_checkpoint(ckpt, dataset, seed=derive_seed(tcfg.seed, "cal"))
        diagnostics.append({"lambda": lam, "ssrat": m["ssrat"],
                            "crps": m["crps"], "diverged": False})
        score = abs(m["ssrat"] - 1.0)
        if best is None or score < best[0]:
            best = (score, lam, ckpt)
    if best is None:
        raise CalibrationError("all candidate runs diverged")
    return best[1], best[2], diagnostics
