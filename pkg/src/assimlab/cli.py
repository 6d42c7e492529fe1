"""Command-line entry points wiring datasets, training, evaluation and
assimilation sweeps into reproducible experiments.

Every command reads a flat ``key = value`` config file, applies optional
flag overrides, writes a ``resolved_config`` artifact next to its outputs,
and exits with 0 on success, 2 on config errors, 3 on numerical failures
and 4 on I/O errors. Unknown config keys are hard errors.

Timing numbers are deliberately kept out of the CSV artifacts (they go to
the log instead) so that re-running a command from its resolved config
reproduces every output byte for byte.
"""

import argparse
import hashlib
import logging
import os
import sys
import time
from dataclasses import replace

import numpy as np

from . import codanet, fourdvar, metrics, obsmodel, training
from .codanet import NetworkConfig, load_checkpoint, save_checkpoint
from .errors import (AssimlabError, CalibrationError, ConfigError,
                     ContractViolation, InitializationError, NumericalError,
                     PersistenceError)
from .lorenz96 import Lorenz96Config, load_trajectory, save_trajectory
from .obsmodel import AssimDataset, load_observations, save_observations
from .rng import derive_seed
from .training import TrainConfig

log = logging.getLogger("assimlab")

_REQUIRED = object()


# -- config files --------------------------------------------------------------


def parse_config_text(text, path="<config>"):
    """Flat ``key = value`` map; '#' starts a comment, blank lines ignored."""
    out = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected 'key = value'")
        key, val = line.split("=", 1)
        key, val = key.strip(), val.strip()
        if not key:
            raise ConfigError(f"{path}:{lineno}: empty key")
        if key in out:
            raise ConfigError(f"{path}:{lineno}: duplicate key {key!r}")
        out[key] = val
    return out


def _coerce(kind, raw, key, path):
    try:
        if kind is bool:
            if raw.lower() in ("true", "1", "yes"):
                return True
            if raw.lower() in ("false", "0", "no"):
                return False
            raise ValueError(raw)
        return kind(raw)
    except ValueError:
        raise ConfigError(
            f"{path}: key {key!r}: cannot parse {raw!r} as {kind.__name__}")


def resolve_config(raw, schema, path="<config>"):
    """Typed config with defaults applied; unknown keys are hard errors."""
    for key in raw:
        if key not in schema:
            raise ConfigError(f"{path}: unknown key {key!r}")
    cfg = {}
    for key, (kind, default) in schema.items():
        if key in raw:
            cfg[key] = _coerce(kind, raw[key], key, path)
        elif default is _REQUIRED:
            raise ConfigError(f"{path}: missing required key {key!r}")
        else:
            cfg[key] = default
    return cfg


def _format_value(v):
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    return str(v)


def write_resolved_config(cfg, out_dir):
    path = os.path.join(out_dir, "resolved_config")
    with open(path, "w") as fh:
        fh.write("# assimlab resolved config schema v1\n")
        for key in sorted(cfg):
            fh.write(f"{key} = {_format_value(cfg[key])}\n")
    return path


def _load_config_file(path):
    if path is None:
        return {}
    with open(path) as fh:
        return parse_config_text(fh.read(), path)


def _sha256(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


# -- per-command schemas --------------------------------------------------------

_DYNAMICS_KEYS = {
    "n": (int, 40),
    "forcing": (float, 8.0),
    "dt": (float, 0.01),
    "spinup_steps": (int, 1000),
}

GENERATE_SCHEMA = {
    **_DYNAMICS_KEYS,
    "steps": (int, 10000),
    "coverage": (float, 0.25),
    "noise_std": (float, 1.0),
    "split_frac": (float, 0.9),
    "seed": (int, 0),
    "workers": (int, 1),
}

TRAIN_SCHEMA = {
    "dataset_dir": (str, _REQUIRED),
    "mode": (str, "variational"),   # deterministic|variational|dropout|ensemble
    "members": (int, 5),
    "horizon": (int, 10),
    "lam": (float, 0.3),
    "calibrate_lambdas": (str, ""),  # comma list; overrides lam when set
    "mc_samples": (int, 1),
    "batch_size": (int, 64),
    "epochs": (int, 5),
    "lr": (float, 1e-3),
    "eval_centers": (int, 200),
    "detach_target": (bool, False),
    "window_half_width": (int, 8),
    "hidden_channels": (int, 32),
    "depth": (int, 3),
    "kernel_width": (int, 5),
    "dropout_rate": (float, 0.1),
    "sigma_floor": (float, 1e-3),
    "seed": (int, 0),
    "workers": (int, 1),
}

EVALUATE_SCHEMA = {
    "checkpoint": (str, _REQUIRED),  # comma-separated for ensembles
    "dataset_dir": (str, _REQUIRED),
    "n_members": (int, 100),
    "bins": (int, 20),
    "max_centers": (int, 0),         # 0 = all validation centers
    "seed": (int, 0),
    "workers": (int, 1),
}

ASSIMILATE_SCHEMA = {
    **_DYNAMICS_KEYS,
    "checkpoint": (str, ""),
    "lengths": (str, "1000,2000,5000"),
    "repeats": (int, 5),
    "variants": (str, "nearest,coda,coda_bg,coda_bg_fg"),
    "coverage": (float, 0.25),
    "noise_std": (float, 1.0),
    "alpha": (float, 1e7),
    "max_iters": (int, 5000),
    "margin": (int, 0),              # 0 = derive from checkpoint window
    "dump_states": (bool, False),
    "seed": (int, 0),
    "workers": (int, 1),
}

REPORT_SCHEMA = {
    "sweep_csv": (str, _REQUIRED),
    "seed": (int, 0),
    "workers": (int, 1),
}


def _dynamics_from(cfg):
    return Lorenz96Config(n=cfg["n"], forcing=cfg["forcing"], dt=cfg["dt"],
                          spinup_steps=cfg["spinup_steps"])


# -- dataset directory layout ---------------------------------------------------


def write_dataset_dir(dataset, out_dir, cfg):
    os.makedirs(out_dir, exist_ok=True)
    truth_path = os.path.join(out_dir, "truth.l96t")
    obs_path = os.path.join(out_dir, "observations.l96o")
    save_trajectory(dataset.truth, truth_path)
    save_observations(dataset.observations, obs_path)
    manifest = os.path.join(out_dir, "manifest.txt")
    with open(manifest, "w") as fh:
        fh.write("# assimlab dataset manifest schema v1\n")
        fh.write(f"split = {dataset.split}\n")
        fh.write(f"seed = {cfg['seed']}\n")
        fh.write(f"steps = {cfg['steps']}\n")
        fh.write(f"coverage = {repr(cfg['coverage'])}\n")
        fh.write(f"noise_std = {repr(cfg['noise_std'])}\n")
        fh.write(f"sha256.truth.l96t = {_sha256(truth_path)}\n")
        fh.write(f"sha256.observations.l96o = {_sha256(obs_path)}\n")
    return manifest


def load_dataset_dir(path):
    manifest = os.path.join(path, "manifest.txt")
    if not os.path.exists(manifest):
        raise ConfigError(f"{path}: not a dataset directory (no manifest.txt)")
    with open(manifest) as fh:
        meta = parse_config_text(fh.read(), manifest)
    truth = load_trajectory(os.path.join(path, "truth.l96t"))
    obs = load_observations(os.path.join(path, "observations.l96o"))
    return AssimDataset(truth=truth, observations=obs,
                        split=int(meta["split"]))


# -- commands -------------------------------------------------------------------


def cmd_generate(cfg, out_dir):
    dyn = _dynamics_from(cfg)
    t0 = time.monotonic()
    ds = obsmodel.make_dataset(dyn, cfg["steps"], cfg["coverage"],
                               cfg["noise_std"], cfg["seed"],
                               split_frac=cfg["split_frac"])
    write_dataset_dir(ds, out_dir, cfg)
    write_resolved_config(cfg, out_dir)
    log.info("generate: %d steps in %.1fs", cfg["steps"],
             time.monotonic() - t0)
    return 0


def _net_config(cfg, mode):
    output_mode = "deterministic" if mode in ("deterministic", "dropout") \
        else "gaussian"
    rate = cfg["dropout_rate"] if mode == "dropout" else 0.0
    return NetworkConfig(window_half_width=cfg["window_half_width"],
                         hidden_channels=cfg["hidden_channels"],
                         depth=cfg["depth"], kernel_width=cfg["kernel_width"],
                         dropout_rate=rate, output_mode=output_mode,
                         sigma_floor=cfg["sigma_floor"])


def _train_config(cfg, mode, seed):
    return TrainConfig(mode=mode, horizon=cfg["horizon"], lam=cfg["lam"],
                       mc_samples=cfg["mc_samples"],
                       batch_size=cfg["batch_size"], epochs=cfg["epochs"],
                       lr=cfg["lr"], seed=seed,
                       dataset_id=os.path.basename(
                           os.path.normpath(cfg["dataset_dir"])),
                       detach_target=cfg["detach_target"],
                       eval_centers=cfg["eval_centers"])


def _strip_wall_seconds(rows):
    for r in rows:
        r["wall_seconds"] = 0.0
    return rows


def cmd_train(cfg, out_dir):
    ds = load_dataset_dir(cfg["dataset_dir"])
    os.makedirs(out_dir, exist_ok=True)
    mode = cfg["mode"]
    if mode not in ("deterministic", "variational", "dropout", "ensemble"):
        raise ConfigError(f"unknown training mode {mode!r}")
    t0 = time.monotonic()
    if mode == "ensemble":
        # independently seeded dropout members sharing one architecture
        for j in range(cfg["members"]):
            member_seed = derive_seed(cfg["seed"], f"member{j}")
            rows = []
            ckpt = training.train(_train_config(cfg, "dropout", member_seed),
                                  ds, _net_config(cfg, "dropout"),
                                  log_rows=rows)
            save_checkpoint(ckpt, os.path.join(out_dir, f"member{j}.coda"))
            training.write_train_log(
                os.path.join(out_dir, f"train_log_member{j}.csv"),
                _strip_wall_seconds(rows))
            log.info("train: member %d done at %.1fs", j,
                     time.monotonic() - t0)
    elif cfg["calibrate_lambdas"]:
        candidates = [float(s) for s in cfg["calibrate_lambdas"].split(",")]
        lam, ckpt, diags = training.calibrate_lambda(
            candidates, _train_config(cfg, mode, cfg["seed"]), ds,
            _net_config(cfg, mode))
        save_checkpoint(ckpt, os.path.join(out_dir, "checkpoint.coda"))
        with open(os.path.join(out_dir, "calibration.csv"), "w") as fh:
            fh.write("# assimlab lambda calibration schema v1\n")
            fh.write("lambda,ssrat,crps,diverged\n")
            for d in diags:
                fh.write("{lambda},{ssrat:.17g},{crps:.17g},{diverged}\n"
                         .format(**{**d, "diverged":
                                    str(d["diverged"]).lower()}))
        log.info("train: calibrated lambda = %g", lam)
    else:
        rows = []
        ckpt = training.train(_train_config(cfg, mode, cfg["seed"]), ds,
                              _net_config(cfg, mode), log_rows=rows)
        save_checkpoint(ckpt, os.path.join(out_dir, "checkpoint.coda"))
        training.write_train_log(os.path.join(out_dir, "train_log.csv"),
                                 _strip_wall_seconds(rows))
    write_resolved_config(cfg, out_dir)
    log.info("train: finished in %.1fs", time.monotonic() - t0)
    return 0


def cmd_evaluate(cfg, out_dir):
    ds = load_dataset_dir(cfg["dataset_dir"])
    members = [load_checkpoint(p.strip())
               for p in cfg["checkpoint"].split(",") if p.strip()]
    if not members:
        raise ConfigError("checkpoint: no paths given")
    for m in members:
        if m.config.window_len > ds.observations.values.shape[0]:
            raise ConfigError("checkpoint window longer than the dataset")
    os.makedirs(out_dir, exist_ok=True)
    max_centers = cfg["max_centers"] or None
    m, table = training.evaluate_checkpoint(
        members if len(members) > 1 else members[0], ds,
        n_members=cfg["n_members"], seed=cfg["seed"],
        max_centers=max_centers, n_bins=cfg["bins"])
    metrics.write_metrics_csv(os.path.join(out_dir, "metrics.csv"), m)
    metrics.write_spread_skill_csv(os.path.join(out_dir, "spread_skill.csv"),
                                   table)
    write_resolved_config(cfg, out_dir)
    log.info("evaluate: crps=%.4f ssrat=%.4f ssrel=%.4f",
             m["crps"], m["ssrat"], m["ssrel"])
    return 0


def _completed_cells(csv_path, lengths, repeats, variants, seed):
    """Cells already present in an interrupted sweep CSV, by repeat_seed."""
    if not os.path.exists(csv_path):
        return set()
    seed_to_cell = {}
    for length in lengths:
        for rep in range(repeats):
            seed_to_cell[(length, derive_seed(seed, f"T{length}r{rep}"))] = rep
    done = set()
    with open(csv_path) as fh:
        for line in fh:
            if line.startswith("#") or line.startswith("window_length"):
                continue
            parts = line.strip().split(",")
            if len(parts) < 3:
                continue
            length, variant, rseed = int(parts[0]), parts[1], int(parts[2])
            rep = seed_to_cell.get((length, rseed))
            if rep is not None and variant in variants:
                done.add((length, variant, rep))
    return done


def cmd_assimilate(cfg, out_dir):
    os.makedirs(out_dir, exist_ok=True)
    dyn = _dynamics_from(cfg)
    lengths = [int(s) for s in cfg["lengths"].split(",") if s.strip()]
    variants = tuple(s.strip() for s in cfg["variants"].split(",") if s.strip())
    for v in variants:
        fourdvar.variant_flags(v)
    checkpoint = load_checkpoint(cfg["checkpoint"]) if cfg["checkpoint"] else None
    if checkpoint is None and any(v != "nearest" for v in variants):
        raise ConfigError("network variants requested without a checkpoint")
    margin = cfg["margin"] or None
    csv_path = os.path.join(out_dir, "sweep.csv")
    skip = _completed_cells(csv_path, lengths, cfg["repeats"], variants,
                            cfg["seed"])
    if skip:
        log.info("assimilate: resuming, %d cells already done", len(skip))
    append = os.path.exists(csv_path)
    state = {"append": append}

    def on_row(row):
        row = dict(row, wall_seconds=0.0)
        fourdvar.write_sweep_csv(csv_path, [row], append=state["append"])
        state["append"] = True
        log.info("assimilate: T=%(window_length)d %(variant)s "
                 "mse=%(mse).5f", row)

    t0 = time.monotonic()
    fourdvar.sweep(lengths, cfg["repeats"], variants, cfg["seed"],
                   checkpoint=checkpoint, dynamics=dyn,
                   coverage=cfg["coverage"], noise_std=cfg["noise_std"],
                   alpha=cfg["alpha"], max_iters=cfg["max_iters"],
                   margin=margin, workers=cfg["workers"],
                   on_row=on_row,
                   skip_keys=skip,
                   dump_dir=out_dir if cfg["dump_states"] else None)
    write_resolved_config(cfg, out_dir)
    log.info("assimilate: sweep finished in %.1fs", time.monotonic() - t0)
    return 0


def cmd_report(cfg, out_dir):
    os.makedirs(out_dir, exist_ok=True)
    rows = []
    with open(cfg["sweep_csv"]) as fh:
        for line in fh:
            if line.startswith("#") or line.startswith("window_length"):
                continue
            parts = line.strip().split(",")
            if len(parts) < 4:
                continue
            rows.append({"window_length": int(parts[0]), "variant": parts[1],
                         "mse": float(parts[3])})
    if not rows:
        raise ConfigError(f"{cfg['sweep_csv']}: no result rows")
    summary = fourdvar.summarize(rows)
    path = os.path.join(out_dir, "summary.csv")
    with open(path, "w") as fh:
        fh.write("# assimlab sweep summary schema v1\n")
        fh.write("window_length,variant,mean_mse,std_mse,n\n")
        for s in summary:
            fh.write("{window_length},{variant},{mean_mse:.17g},"
                     "{std_mse:.17g},{n}\n".format(**s))
    write_resolved_config(cfg, out_dir)
    return 0


# -- entry point ----------------------------------------------------------------

COMMANDS = {
    "generate": (GENERATE_SCHEMA, cmd_generate),
    "train": (TRAIN_SCHEMA, cmd_train),
    "evaluate": (EVALUATE_SCHEMA, cmd_evaluate),
    "assimilate": (ASSIMILATE_SCHEMA, cmd_assimilate),
    "report": (REPORT_SCHEMA, cmd_report),
}


def _setup_logging():
    level = os.environ.get("ASSIMLAB_LOG", "warning").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING),
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")


def build_parser():
    parser = argparse.ArgumentParser(
        prog="assimlab",
        description="chaotic-system data assimilation experiments")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", default=None,
                       help="key = value config file")
        p.add_argument("--out", required=True, help="output directory")
        p.add_argument("--workers", type=int, default=None)
        p.add_argument("--seed", type=int, default=None,
                       help="override the config seed")
    return parser


def main(argv=None):
    _setup_logging()
    args = build_parser().parse_args(argv)
    schema, fn = COMMANDS[args.command]
    try:
        raw = _load_config_file(args.config)
        cfg = resolve_config(raw, schema, args.config or "<defaults>")
        if args.seed is not None:
            cfg["seed"] = args.seed
        if args.workers is not None:
            cfg["workers"] = args.workers
        os.makedirs(args.out, exist_ok=True)
        return fn(cfg, args.out)
    except (ConfigError, ContractViolation) as e:
        log.error("config error: %s", e)
        print(f"assimlab {args.command}: config error: {e}", file=sys.stderr)
        return 2
    except (NumericalError, CalibrationError, InitializationError) as e:
        log.error("numerical failure: %s", e)
        print(f"assimlab {args.command}: numerical failure: {e}",
              file=sys.stderr)
        return 3
    except (PersistenceError, OSError) as e:
        log.error("io error: %s", e)
        print(f"assimlab {args.command}: io error: {e}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
