"""Experiment harness: config parsing, Monte-Carlo sweeps, CSV metrics.

A run is a grid of (sweep value, trial) cells. Each cell draws a scene,
observes noisy pilots, runs every requested predictor, and scores the
predicted horizon slices against the true future channel. Rows land in
one CSV whose order is deterministic (sorted by sweep value, then trial,
with per-cell rows in generation order), so identical configs and seeds
reproduce the file byte for byte. Wall-clock timing is volatile, so the
runtime column stays empty unless `run.timing` is set.

Config files are flat `section.key = value` lines; `#` starts a comment.
Unknown keys are rejected so typos cannot silently fall back to
defaults. Two built-in profiles exist: `desk` (32 x 32 x 10, the test
default) and `stretch` (128 x 128 x 10). Command-line flags override
file values, which override profile defaults.

Per-trial randomness is replayable in isolation: trial t of base seed s
uses the two children of SeedSequence([s, t]) for the scene and the
noise, and every CSV row carries "s:t" in its seed column.
"""

from __future__ import annotations

import argparse
import csv
import math
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
from time import perf_counter

import numpy as np

from .baselines import omp_prony, per_horizon_nmse, stale_csi
from .channel_model import (
    SystemConfig,
    assemble_sft,
    ground_truth_prediction,
    noise_var_for_snr,
    observe,
    sample_scene,
)
from .factor_matrices import make_grids
from .inference import (
    EmOptions,
    TRACE_KEYS,
    e_step,
    em_loop,
    initial_hyperparams,
    initial_state,
    predict,
)
from .tensor_core import Tensor

METHODS = ("tensor_em", "stale_csi", "omp_prony")
SWEEP_AXES = ("snr_db", "horizon", "f_c", "T_M")
CSV_COLUMNS = ("kind", "sweep_axis", "sweep_value", "method", "trial",
               "seed", "horizon", "nmse", "nmse_db", "runtime_ms",
               "iterations", "note")


class ConfigError(ValueError):
    """Malformed or inconsistent experiment configuration."""


def nmse(est, truth) -> float:
    """Squared error of the whole tensor relative to the truth energy."""
    e = est.data if isinstance(est, Tensor) else np.asarray(est)
    t = truth.data if isinstance(truth, Tensor) else np.asarray(truth)
    if e.shape != t.shape:
        raise ValueError(f"shape mismatch {e.shape} vs {t.shape}")
    den = float(np.linalg.norm(t.ravel()) ** 2)
    if den == 0.0:
        raise ValueError("truth tensor has zero norm")
    return float(np.linalg.norm((e - t).ravel()) ** 2 / den)


@dataclass(frozen=True)
class MetricRow:
    """One CSV line; `kind` is detail, summary, or error."""

    kind: str
    sweep_axis: str
    sweep_value: float
    method: str
    trial: int | None
    seed: str
    horizon: int | None
    nmse: float | None
    nmse_db: float | None
    runtime_ms: float | None
    iterations: int | None
    note: str = ""

    def __post_init__(self):
        if self.nmse is not None and not self.nmse >= 0.0:
            raise ValueError("nmse must be >= 0")


@dataclass(frozen=True)
class ExperimentConfig:
    """Everything a sweep needs; defaults are the desk profile."""

    # system (pilot-domain dimensions and numerology)
    f_c: float = 15e9
    delta_f: float = 60e3
    dT_sym: float = 16.67e-6
    dT_cp: float = 1.17e-6
    N_IS: int = 14
    N_TC: int = 4
    N_an: int = 32
    N_sc: int = 32
    N_sym: int = 10
    # scene
    L: int = 4
    r_min: float = 10.0
    v_mt: float = 60.0 / 3.6
    sns_fraction: float = 0.0
    power_decay: float = 0.5
    # dictionary grids
    K_be: int = 32
    K_de: int = 16
    K_do: int = 20
    # inference controls
    T_M: int = 100
    T_E: int = 5
    damp: float = 0.2
    tol: float = 0.0
    gamma_rule: str = "ratio"
    expand_at_previous: bool = True
    omp_sparsity: int = 8
    # sweep
    sweep_axis: str = "snr_db"
    sweep_values: tuple[float, ...] = (10.0,)
    # run
    trials: int = 20
    seed: int = 1234
    horizon: int = 14
    snr_db: float = 10.0
    methods: tuple[str, ...] = METHODS
    workers: int = 1
    timing: bool = False
    output: str = "metrics.csv"

    def __post_init__(self):
        if not self.sweep_values:
            raise ConfigError("sweep.values must be non-empty")
        if self.trials < 1:
            raise ConfigError("run.trials must be >= 1")
        if self.horizon < 1:
            raise ConfigError("run.horizon must be >= 1")
        if self.workers < 1:
            raise ConfigError("run.workers must be >= 1")
        if self.sweep_axis not in SWEEP_AXES:
            raise ConfigError(f"unknown sweep axis {self.sweep_axis!r};"
                              f" expected one of {SWEEP_AXES}")
        for m in self.methods:
            if m not in METHODS:
                raise ConfigError(f"unknown method {m!r};"
                                  f" expected one of {METHODS}")
        if not self.methods:
            raise ConfigError("run.methods must be non-empty")
        if self.gamma_rule not in ("ratio", "logit"):
            raise ConfigError("infer.gamma_rule must be ratio or logit")
        if self.sweep_axis in ("horizon", "T_M"):
            for v in self.sweep_values:
                if v != int(v) or v < 1:
                    raise ConfigError(f"{self.sweep_axis} sweep values must"
                                      f" be positive integers, got {v}")

    def system(self, f_c: float | None = None) -> SystemConfig:
        return SystemConfig(f_c=self.f_c if f_c is None else f_c,
                            delta_f=self.delta_f, dT_sym=self.dT_sym,
                            dT_cp=self.dT_cp, N_IS=self.N_IS,
                            N_TC=self.N_TC, N_an=self.N_an,
                            N_sc=self.N_sc, N_sym=self.N_sym)

    def em_options(self, t_m: int | None = None) -> EmOptions:
        # curvature of the closest admissible scatterer bounds the slope
        return EmOptions(T_M=self.T_M if t_m is None else t_m,
                         T_E=self.T_E, damp=self.damp, tol=self.tol,
                         gamma_rule=self.gamma_rule,
                         expand_at_previous=self.expand_at_previous,
                         eta_max=1.0 / (2.0 * self.r_min))


STRETCH_OVERRIDES = dict(N_an=128, N_sc=128, K_be=128, K_de=64, K_do=20)


def profile_config(name: str) -> ExperimentConfig:
    if name == "desk":
        return ExperimentConfig()
    if name == "stretch":
        return ExperimentConfig(**STRETCH_OVERRIDES)
    raise ConfigError(f"unknown profile {name!r}; expected desk or stretch")


def parse_config_text(text: str) -> dict[str, str]:
    """Flat key = value lines into a dict; comments and blanks skipped."""
    out: dict[str, str] = {}
    for ln, raw in enumerate(text.splitlines(), 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        key, sep, val = line.partition("=")
        key, val = key.strip(), val.strip()
        if not sep or not key:
            raise ConfigError(f"line {ln}: expected 'key = value',"
                              f" got {raw!r}")
        if key in out:
            raise ConfigError(f"line {ln}: duplicate key {key!r}")
        out[key] = val
    return out


def _parse_bool(val: str) -> bool:
    low = val.lower()
    if low in ("true", "yes", "1", "on"):
        return True
    if low in ("false", "no", "0", "off"):
        return False
    raise ConfigError(f"expected a boolean, got {val!r}")


def _parse_values(val: str) -> tuple[float, ...]:
    parts = [p for p in val.split(",") if p.strip()]
    return tuple(float(p) for p in parts)


def _parse_methods(val: str) -> tuple[str, ...]:
    return tuple(p.strip() for p in val.split(",") if p.strip())


# config key -> (ExperimentConfig attribute, parser)
_KEY_TABLE = {
    "system.f_c": ("f_c", float),
    "system.delta_f": ("delta_f", float),
    "system.dT_sym": ("dT_sym", float),
    "system.dT_cp": ("dT_cp", float),
    "system.N_IS": ("N_IS", int),
    "system.N_TC": ("N_TC", int),
    "system.N_an": ("N_an", int),
    "system.N_sc": ("N_sc", int),
    "system.N_sym": ("N_sym", int),
    "scene.L": ("L", int),
    "scene.r_min": ("r_min", float),
    "scene.v_mt": ("v_mt", float),
    "scene.sns_fraction": ("sns_fraction", float),
    "scene.power_decay": ("power_decay", float),
    "grids.K_be": ("K_be", int),
    "grids.K_de": ("K_de", int),
    "grids.K_do": ("K_do", int),
    "infer.T_M": ("T_M", int),
    "infer.T_E": ("T_E", int),
    "infer.damp": ("damp", float),
    "infer.tol": ("tol", float),
    "infer.gamma_rule": ("gamma_rule", str),
    "infer.expand_at_previous": ("expand_at_previous", _parse_bool),
    "omp.sparsity": ("omp_sparsity", int),
    "sweep.axis": ("sweep_axis", str),
    "sweep.values": ("sweep_values", _parse_values),
    "run.trials": ("trials", int),
    "run.seed": ("seed", int),
    "run.horizon": ("horizon", int),
    "run.snr_db": ("snr_db", float),
    "run.methods": ("methods", _parse_methods),
    "run.workers": ("workers", int),
    "run.timing": ("timing", _parse_bool),
    "run.output": ("output", str),
}


def config_from_mapping(pairs: dict[str, str],
                        base: ExperimentConfig | None = None) -> ExperimentConfig:
    base = base if base is not None else ExperimentConfig()
    updates = {}
    for key, val in pairs.items():
        if key not in _KEY_TABLE:
            raise ConfigError(f"unknown config key {key!r}")
        attr, parse = _KEY_TABLE[key]
        try:
            updates[attr] = parse(val)
        except ConfigError:
            raise
        except ValueError as exc:
            raise ConfigError(f"bad value for {key!r}: {exc}") from exc
    return replace(base, **updates)


def load_config_file(path, base: ExperimentConfig | None = None) -> ExperimentConfig:
    try:
        with open(path, encoding="utf-8") as fh:
            text = fh.read()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return config_from_mapping(parse_config_text(text), base)


# ---- sweep execution ----

def _cell_settings(config: ExperimentConfig, value: float):
    """Resolve the swept quantity into concrete per-cell parameters."""
    axis = config.sweep_axis
    cfg = config.system(f_c=value if axis == "f_c" else None)
    horizon = int(value) if axis == "horizon" else config.horizon
    snr_db = float(value) if axis == "snr_db" else config.snr_db
    t_m = int(value) if axis == "T_M" else None
    return cfg, horizon, snr_db, t_m


def _run_method(method, config, cfg, Y, sigma_z2, horizon, t_m):
    """One predictor on one observed cell; returns (pred, iterations)."""
    if method == "tensor_em":
        grids = make_grids(cfg, config.v_mt, K_be=config.K_be,
                           K_de=config.K_de, K_do=config.K_do)
        state, hyper, diag = em_loop(Y, cfg, grids, sigma_z2,
                                     config.em_options(t_m))
        return predict(state, hyper, grids, cfg, horizon), len(diag.iterations)
    if method == "stale_csi":
        return stale_csi(Y, sigma_z2, horizon).predicted, 0
    if method == "omp_prony":
        return omp_prony(Y, cfg, k_be=config.K_be, k_de=config.K_de,
                         sparsity=config.omp_sparsity,
                         horizon=horizon).predicted, 0
    raise ValueError(f"unknown method {method!r}")


def run_cell(config: ExperimentConfig, value: float, trial: int) -> list[MetricRow]:
    """All methods on one (sweep value, trial) cell."""
    axis = config.sweep_axis
    seed_tag = f"{config.seed}:{trial}"
    cfg, horizon, snr_db, t_m = _cell_settings(config, value)

    def error_row(method, exc):
        return MetricRow(kind="error", sweep_axis=axis, sweep_value=value,
                         method=method, trial=trial, seed=seed_tag,
                         horizon=None, nmse=None, nmse_db=None,
                         runtime_ms=None, iterations=None,
                         note=f"{type(exc).__name__}: {exc}")

    try:
        scene_seed, noise_seed = np.random.SeedSequence(
            [config.seed, trial]).spawn(2)
        scene = sample_scene(cfg, L=config.L, r_min=config.r_min,
                             v_mt=config.v_mt,
                             sns_fraction=config.sns_fraction,
                             seed=scene_seed,
                             power_decay=config.power_decay)
        H = assemble_sft(scene, cfg)
        sigma_z2 = noise_var_for_snr(H, snr_db)
        Y = observe(H, sigma_z2, seed=noise_seed)
        truth = ground_truth_prediction(scene, cfg, horizon)
    except Exception as exc:  # noqa: BLE001 - a bad cell must not kill the sweep
        return [error_row(m, exc) for m in config.methods]

    rows = []
    for method in config.methods:
        t0 = perf_counter()
        try:
            pred, iters = _run_method(method, config, cfg, Y, sigma_z2,
                                      horizon, t_m)
            per_h = per_horizon_nmse(pred, truth)
        except Exception as exc:  # noqa: BLE001
            rows.append(error_row(method, exc))
            continue
        ms = (perf_counter() - t0) * 1e3 if config.timing else None
        for j, val in enumerate(per_h, start=1):
            db = 10.0 * math.log10(val) if val > 0.0 else -math.inf
            rows.append(MetricRow(kind="detail", sweep_axis=axis,
                                  sweep_value=value, method=method,
                                  trial=trial, seed=seed_tag, horizon=j,
                                  nmse=float(val), nmse_db=db,
                                  runtime_ms=ms, iterations=iters))
    return rows


def summarize(rows: list[MetricRow], config: ExperimentConfig) -> list[MetricRow]:
    """Per (value, method, horizon) mean over trials, in dB."""
    groups: dict[tuple, list[float]] = {}
    for r in rows:
        if r.kind != "detail" or not math.isfinite(r.nmse):
            continue
        groups.setdefault((r.sweep_value, r.method, r.horizon), []).append(r.nmse)
    out = []
    for value in config.sweep_values:
        for method in config.methods:
            for horizon in sorted({h for (v, m, h) in groups
                                   if v == value and m == method}):
                vals = groups[(value, method, horizon)]
                mean = float(np.mean(vals))
                db = 10.0 * math.log10(mean) if mean > 0.0 else -math.inf
                out.append(MetricRow(
                    kind="summary", sweep_axis=config.sweep_axis,
                    sweep_value=value, method=method, trial=None, seed="",
                    horizon=horizon, nmse=mean, nmse_db=db, runtime_ms=None,
                    iterations=None, note=f"n={len(vals)}"))
    return out


def run_sweep(config: ExperimentConfig) -> list[MetricRow]:
    """Execute the whole grid and write the CSV; returns all rows."""
    cells = [(value, trial) for value in config.sweep_values
             for trial in range(config.trials)]
    if config.workers == 1:
        results = [run_cell(config, v, t) for v, t in cells]
    else:
        with ThreadPoolExecutor(max_workers=config.workers) as pool:
            futures = [pool.submit(run_cell, config, v, t) for v, t in cells]
            results = [f.result() for f in futures]

    order = {v: i for i, v in enumerate(config.sweep_values)}
    paired = sorted(zip(cells, results), key=lambda p: (order[p[0][0]], p[0][1]))
    rows = [row for _, cell_rows in paired for row in cell_rows]
    rows.extend(summarize(rows, config))
    write_csv(rows, config.output)
    return rows


def _fmt(value, spec: str) -> str:
    if value is None:
        return ""
    if isinstance(value, float) and math.isinf(value):
        return "-inf" if value < 0 else "inf"
    return format(value, spec)


def write_csv(rows: list[MetricRow], path) -> None:
    try:
        with open(path, "w", encoding="utf-8", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(CSV_COLUMNS)
            for r in rows:
                writer.writerow([
                    r.kind, r.sweep_axis, _fmt(r.sweep_value, "g"),
                    r.method, _fmt(r.trial, "d"), r.seed,
                    _fmt(r.horizon, "d"), _fmt(r.nmse, ".12e"),
                    _fmt(r.nmse_db, ".6f"), _fmt(r.runtime_ms, ".3f"),
                    _fmt(r.iterations, "d"), r.note,
                ])
    except OSError as exc:
        raise ConfigError(f"cannot write CSV {path}: {exc}") from exc


def write_trace(config: ExperimentConfig, path) -> None:
    """Line-by-line message norms of one E-step pass on trial 0."""
    value = config.sweep_values[0]
    cfg, _, snr_db, _ = _cell_settings(config, value)
    scene_seed, noise_seed = np.random.SeedSequence([config.seed, 0]).spawn(2)
    scene = sample_scene(cfg, L=config.L, r_min=config.r_min,
                         v_mt=config.v_mt, sns_fraction=config.sns_fraction,
                         seed=scene_seed, power_decay=config.power_decay)
    H = assemble_sft(scene, cfg)
    sigma_z2 = noise_var_for_snr(H, snr_db)
    Y = observe(H, sigma_z2, seed=noise_seed)
    grids = make_grids(cfg, config.v_mt, K_be=config.K_be,
                       K_de=config.K_de, K_do=config.K_do)
    hyper = initial_hyperparams(Y.data, grids, sigma_z2)
    state = initial_state(Y.data, grids, cfg, hyper)
    trace: dict = {}
    e_step(state, Y.data, grids, cfg, hyper, t_e=1, damp=1.0, trace=trace)
    try:
        with open(path, "w", encoding="utf-8") as fh:
            for key in TRACE_KEYS:
                arr = np.asarray(trace[key])
                fro = float(np.linalg.norm(arr.ravel()))
                fh.write(f"{key} shape={arr.shape} fro={fro:.6e}\n")
    except OSError as exc:
        raise ConfigError(f"cannot write trace {path}: {exc}") from exc


# ---- entry point ----

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="chanpred",
        description="Channel prediction Monte-Carlo sweeps to CSV.")
    parser.add_argument("--config", help="flat key=value config file")
    parser.add_argument("--output", help="CSV path (overrides run.output)")
    parser.add_argument("--profile", choices=("desk", "stretch"),
                        default="desk", help="base parameter profile")
    parser.add_argument("--seed", type=int, help="override run.seed")
    parser.add_argument("--trials", type=int, help="override run.trials")
    parser.add_argument("--methods",
                        help="comma-separated subset of " + ",".join(METHODS))
    parser.add_argument("--workers", type=int, help="trial worker threads")
    parser.add_argument("--trace", action="store_true",
                        help="dump one E-step's message norms next to the CSV")
    parser.add_argument("--stretch", action="store_true",
                        help="shorthand for --profile stretch")
    parser.add_argument("--timing", action="store_true",
                        help="fill the runtime_ms column (breaks byte"
                             " reproducibility)")
    return parser


def load_from_args(args) -> ExperimentConfig:
    profile = "stretch" if args.stretch else args.profile
    config = profile_config(profile)
    if args.config:
        config = load_config_file(args.config, base=config)
    overrides = {}
    if args.output is not None:
        overrides["output"] = args.output
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.trials is not None:
        overrides["trials"] = args.trials
    if args.methods is not None:
        overrides["methods"] = _parse_methods(args.methods)
    if args.workers is not None:
        overrides["workers"] = args.workers
    if args.timing:
        overrides["timing"] = True
    return replace(config, **overrides) if overrides else config


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        config = load_from_args(args)
        rows = run_sweep(config)
        if args.trace:
            write_trace(config, config.output + ".trace")
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    n_err = sum(1 for r in rows if r.kind == "error")
    if n_err:
        print(f"warning: {n_err} failed trial runs recorded in the CSV",
              file=sys.stderr)
    print(f"wrote {config.output} ({len(rows)} rows)")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
