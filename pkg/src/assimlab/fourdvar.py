"""Weak-constraint 4D-Var: cost assembly with optional network-derived
background/foreground priors, the four assimilation variants, and the
window-length sweep.

The cost over states x_{0:T} is the masked observation misfit, plus
alpha times the dynamics mismatch sum_t ||x_t - M(x_{t-1})||^2, plus
optional weighted-norm priors on x_0 (background) and x_T (foreground)
taken from a trained network's Gaussian predictions. Observations extend
`margin` steps beyond both window ends so the network windows and the
nearest-observation initialization have full input; margin observations
also feed the priors, so those are used twice by design.
"""

import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import diffcore as dc
from .codanet import GaussianField
from .errors import ContractViolation
from .lorenz96 import Lorenz96Config, rk4_step, simulate
from .obsmodel import make_mask, nearest_init, observe
from .rng import derive_seed
from .training import predict_fields

VARIANTS = ("nearest", "coda", "coda_bg", "coda_bg_fg")


def variant_flags(variant):
    """(init, beta, gamma) for a named variant."""
    table = {
        "nearest": ("nearest", 0, 0),
        "coda": ("coda", 0, 0),
        "coda_bg": ("coda", 1, 0),
        "coda_bg_fg": ("coda", 1, 1),
    }
    if variant not in table:
        raise ContractViolation(f"unknown variant {variant!r}")
    return table[variant]


@dataclass
class AssimilationProblem:
    observations: object       # ObservationSet over rows 0..T+2*margin
    margin: int                # rows before t=0 and after t=T
    truth: object              # Trajectory over the same rows, evaluation only
    alpha: float = 1e7
    beta: int = 0
    gamma: int = 0
    init: str = "nearest"
    checkpoint: object = None
    max_iters: int = 5000
    grad_tol: float = 0.0
    chunk_size: int = 0        # 0 = monolithic model-term evaluation
    dynamics: Lorenz96Config = field(default_factory=Lorenz96Config)

    def __post_init__(self):
        if (self.beta or self.gamma or self.init == "coda") \
                and self.checkpoint is None:
            raise ContractViolation("variant requires a checkpoint")
        if self.init not in ("nearest", "coda"):
            raise ContractViolation(f"unknown init strategy {self.init!r}")
        rows = self.observations.values.shape[0]
        if rows <= 2 * self.margin:
            raise ContractViolation("observation window shorter than margins")

    @property
    def T(self):
        return self.observations.values.shape[0] - 1 - 2 * self.margin


@dataclass
class AssimilationResult:
    states: np.ndarray
    final_cost: float
    mse_vs_truth: float
    cost_trace: list
    variant: str
    iters_used: int
    line_search_failed: bool


def weighted_norm_sq(x, mu, sigma):
    """sum_i (x_i - mu_i)^2 / sigma_i^2; works on arrays or Vars."""
    sg = np.asarray(sigma, dtype=np.float64)
    if np.any(sg <= 0):
        raise ContractViolation("weighted_norm_sq: sigma must be positive")
    if isinstance(x, dc.Var):
        return dc.sumsq((x - dc.Var(mu)) / dc.Var(sg))
    return float(np.sum((np.asarray(x) - np.asarray(mu)) ** 2 / sg ** 2))


def build_priors(checkpoint, observations, margin):
    """Gaussian fields at t=0 and t=T from the trained network."""
    w = checkpoint.config.window_half_width
    if margin < w:
        raise ContractViolation(
            f"margin {margin} too small for network half-width {w}")
    rows = observations.values.shape[0]
    T = rows - 1 - 2 * margin
    mu, sg = predict_fields(checkpoint, observations,
                            np.array([margin, margin + T]))
    return (GaussianField(mu=mu[0], sigma=sg[0]),
            GaussianField(mu=mu[1], sigma=sg[1]))


def _model_term(states, problem):
    """alpha * sum_t ||x_t - M(x_{t-1})||^2 with a reduction order that is
    independent of the chunk size (per-step norms first, one final sum)."""
    T = problem.T
    dyn = problem.dynamics
    chunk = problem.chunk_size if problem.chunk_size > 0 else T
    per_t_parts = []
    for c0 in range(0, T, chunk):
        c1 = min(c0 + chunk, T)
        prev = states[c0:c1]
        nxt = states[c0 + 1:c1 + 1]
        diff = nxt - rk4_step(prev, dyn.dt, dyn.forcing)
        per_t_parts.append(dc.vsum(diff * diff, axis=1))
    per_t = per_t_parts[0] if len(per_t_parts) == 1 else dc.concat(per_t_parts)
    return problem.alpha * dc.vsum(per_t)


def cost(states, problem, priors=None):
    """Assemble the full assimilation cost as a differentiable scalar.

    `states` is a Var (or array) of shape (T+1, n); `priors` is the
    (background, foreground) pair from build_priors when beta or gamma
    is set.
    """
    if not isinstance(states, dc.Var):
        states = dc.Var(states, op="states")
    m, T = problem.margin, problem.T
    obs = problem.observations
    if states.value.shape != (T + 1, obs.values.shape[1]):
        raise ContractViolation(
            f"states shape {states.value.shape} != ({T + 1}, n)")
    y = obs.values[m:m + T + 1]
    msk = obs.mask[m:m + T + 1].astype(np.float64)
    total = dc.sumsq(dc.Var(msk) * (states - dc.Var(y)))
    if problem.alpha != 0.0 and T >= 1:
        total = total + _model_term(states, problem)
    if problem.beta or problem.gamma:
        if priors is None:
            raise ContractViolation("priors required when beta or gamma is set")
        bg, fg = priors
        if problem.beta:
            total = total + weighted_norm_sq(states[0], bg.mu, bg.sigma)
        if problem.gamma:
            total = total + weighted_norm_sq(states[T], fg.mu, fg.sigma)
    return total


def initial_states(problem):
    """The variant's starting point for the optimization."""
    m, T = problem.margin, problem.T
    if problem.init == "nearest":
        full = nearest_init(problem.observations)
        return full[m:m + T + 1]
    w = problem.checkpoint.config.window_half_width
    if m < w:
        raise ContractViolation(
            f"margin {m} too small for network half-width {w}")
    mu, _ = predict_fields(problem.checkpoint, problem.observations,
                           np.arange(m, m + T + 1))
    return mu


def assimilate(problem):
    """Minimize the cost from the variant's initialization with L-BFGS."""
    priors = None
    if problem.beta or problem.gamma:
        priors = build_priors(problem.checkpoint, problem.observations,
                              problem.margin)
    x0 = initial_states(problem)
    res = dc.lbfgs_minimize(lambda xv: cost(xv, problem, priors), x0,
                            max_iters=problem.max_iters, memory_size=100,
                            grad_tol=problem.grad_tol)
    m, T = problem.margin, problem.T
    truth_c = problem.truth.states[m:m + T + 1]
    mse = float(np.mean((res.x - truth_c) ** 2))
    label = {("nearest", 0, 0): "nearest", ("coda", 0, 0): "coda",
             ("coda", 1, 0): "coda_bg", ("coda", 1, 1): "coda_bg_fg"}.get(
        (problem.init, problem.beta, problem.gamma),
        f"{problem.init}-b{problem.beta}g{problem.gamma}")
    return AssimilationResult(states=res.x, final_cost=res.fun,
                              mse_vs_truth=mse, cost_trace=res.trace,
                              variant=label, iters_used=res.iters_used,
                              line_search_failed=res.line_search_failed)


def make_problem(T, variant, seed, checkpoint=None, dynamics=None, margin=None,
                 coverage=0.25, noise_std=1.0, alpha=1e7, max_iters=5000,
                 grad_tol=0.0, chunk_size=0):
    """Draw an independent truth/observation window and wrap it as a problem."""
    dyn = dynamics or Lorenz96Config()
    if margin is None:
        margin = checkpoint.config.window_half_width if checkpoint else 8
    init, beta, gamma = variant_flags(variant)
    truth = simulate(dyn, T + 2 * margin, seed=derive_seed(seed, "truth"))
    mask = make_mask(dyn.n, T + 2 * margin, coverage, derive_seed(seed, "mask"))
    obs = observe(truth, mask, noise_std, derive_seed(seed, "noise"))
    return AssimilationProblem(
        observations=obs, margin=margin, truth=truth, alpha=alpha, beta=beta,
        gamma=gamma, init=init, checkpoint=checkpoint, max_iters=max_iters,
        grad_tol=grad_tol, chunk_size=chunk_size, dynamics=dyn)


def _run_cell(args):
    (length, variant, rep, seed, checkpoint, dyn, coverage, noise_std,
     alpha, max_iters, margin, dump_dir) = args
    cell_seed = derive_seed(seed, f"T{length}r{rep}")
    t0 = time.monotonic()
    problem = make_problem(length, variant, cell_seed, checkpoint=checkpoint,
                           dynamics=dyn, margin=margin, coverage=coverage,
                           noise_std=noise_std, alpha=alpha,
                           max_iters=max_iters)
    res = assimilate(problem)
    if dump_dir is not None:
        _dump_states(dump_dir, length, variant, rep, problem, res)
    return {
        "window_length": length,
        "variant": variant,
        "repeat_seed": cell_seed,
        "mse": res.mse_vs_truth,
        "final_cost": res.final_cost,
        "iters_used": res.iters_used,
        "wall_seconds": time.monotonic() - t0,
    }


def _dump_states(dump_dir, length, variant, rep, problem, res):
    """Analysis states in the trajectory layout plus a per-step truth-gap
    CSV for plotting."""
    import os

    from .lorenz96 import Trajectory, save_trajectory

    stem = f"analysis_T{length}_{variant}_r{rep}"
    traj = Trajectory(states=res.states, config=problem.dynamics,
                      seed=derive_seed(0, stem))
    save_trajectory(traj, os.path.join(dump_dir, stem + ".l96t"))
    m = problem.margin
    truth_c = problem.truth.states[m:m + problem.T + 1]
    rmse = np.sqrt(np.mean((res.states - truth_c) ** 2, axis=1))
    with open(os.path.join(dump_dir, stem + "_truth_diff.csv"), "w") as fh:
        fh.write("# assimlab truth-diff schema v1\n")
        fh.write("step,rmse\n")
        for t, r in enumerate(rmse):
            fh.write(f"{t},{r:.17g}\n")


def sweep(lengths, repeats, variants, seed, checkpoint=None, dynamics=None,
          coverage=0.25, noise_std=1.0, alpha=1e7, max_iters=5000, margin=None,
          workers=1, on_row=None, skip_keys=(), dump_dir=None):
    """Run every (length, variant, repeat) cell; same (length, repeat) share
    one truth/observation draw across variants. Returns row dicts in a
    deterministic cell order."""
    cells = []
    for length in lengths:
        for rep in range(repeats):
            for variant in variants:
                if (length, variant, rep) in skip_keys:
                    continue
                cells.append((length, variant, rep, seed, checkpoint,
                              dynamics, coverage, noise_std, alpha, max_iters,
                              margin, dump_dir))
    rows = []
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            for r in pool.map(_run_cell, cells):
                rows.append(r)
                if on_row is not None:
                    on_row(r)
    else:
        for c in cells:
            r = _run_cell(c)
            rows.append(r)
            if on_row is not None:
                on_row(r)
    return rows


def summarize(rows):
    """Mean and std of MSE per (window_length, variant)."""
    keys = sorted({(r["window_length"], r["variant"]) for r in rows})
    out = []
    for length, variant in keys:
        mses = [r["mse"] for r in rows
                if r["window_length"] == length and r["variant"] == variant]
        out.append({"window_length": length, "variant": variant,
                    "mean_mse": float(np.mean(mses)),
                    "std_mse": float(np.std(mses)), "n": len(mses)})
    return out


def write_sweep_csv(path, rows, append=False):
    mode = "a" if append else "w"
    write_header = not append
    with open(path, mode) as fh:
        if write_header:
            fh.write("# assimlab sweep schema v1\n")
            fh.write("window_length,variant,repeat_seed,mse,final_cost,"
                     "iters_used,wall_seconds\n")
        for r in rows:
            fh.write("{window_length},{variant},{repeat_seed},{mse:.17g},"
                     "{final_cost:.17g},{iters_used},{wall_seconds:.3f}\n"
                     .format(**r))
