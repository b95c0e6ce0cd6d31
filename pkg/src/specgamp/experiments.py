"""Monte-Carlo sweeps over the sampling ratio, theory tables and CSV output.

Every random quantity in a trial is drawn from a Philox stream keyed by
(seed, trial, delta in micro-units), so a sweep is reproducible byte for byte
regardless of worker count or of which other grid points are requested.
"""

from __future__ import annotations

import csv
import logging
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Optional

import numpy as np

from .complex_gamp import (
    ComplexGampConfig,
    complex_gamp_run,
    complex_se_fixed_point,
    complex_se_overlap,
    complex_se_trajectory,
    image_experiment,
    phase_aligned_overlap,
    read_netpbm,
)
from .errors import InvalidArgument
from .gamp import GampConfig, gamp_run
from .models import parse_channel, parse_prior, sample_instance
from .numerics import make_rng
from .spectral import delta_u, optimal_T_bar, solve_lambda_star, spectral_estimate, squared_overlap
from .state_evolution import DenoiserPolicy, overlap_from_se, se_fixed_point, se_init, se_trajectory

log = logging.getLogger(__name__)

PRESETS = {
    "fig1-gaussian": dict(prior="gaussian", channel="pr", denoiser="identity", delta_grid="0.6:3.0:0.2"),
    "fig2-binary": dict(prior="binary:0.5", channel="pr", denoiser="bayes", delta_grid="0.6:2.0:0.1"),
    "fig5-complex": dict(prior="complex-gaussian", channel="complex-pr", denoiser="identity",
                         delta_grid="1.2:3.2:0.2"),
    "cdp": dict(prior="image", channel="complex-pr", denoiser="identity", delta_grid="1.5:3.0:0.3", trials=3),
    "custom": dict(),
}

CSV_DIGITS = 12


def parse_delta_grid(spec: str) -> list:
    """'lo:hi:step' (hi included when it lies on the grid) or a comma-separated list."""
    spec = str(spec).strip()
    if ":" in spec:
        parts = spec.split(":")
        if len(parts) != 3:
            raise InvalidArgument(f"delta grid must be lo:hi:step, got {spec!r}")
        lo, hi, step = (float(p) for p in parts)
        if not step > 0:
            raise InvalidArgument(f"grid step must be positive, got {step}")
        if hi < lo:
            raise InvalidArgument(f"grid upper end {hi} is below the lower end {lo}")
        count = int(math.floor((hi - lo) / step + 1e-9)) + 1
        grid = [round(lo + k * step, 10) for k in range(count)]
    else:
        grid = [float(p) for p in spec.split(",") if p.strip()]
    check_grid(grid)
    return grid


def check_grid(grid):
    if not grid:
        raise InvalidArgument("empty delta grid")
    if any(not g > 0 for g in grid):
        raise InvalidArgument(f"sampling ratios must be positive: {grid}")
    if any(b <= a for a, b in zip(grid, grid[1:])):
        raise InvalidArgument(f"delta grid must be strictly increasing: {grid}")


@dataclass
class ExperimentConfig:
    preset: str = "custom"
    d: int = 2000
    delta_grid: list = field(default_factory=lambda: [2.0])
    n_trials: int = 20
    seed: int = 0
    output_path: Optional[str] = None
    threads: int = 1
    damping: float = 1.0
    stop_tol: float = 1e-9
    max_iter: int = 200
    prior: str = "gaussian"
    channel: str = "pr"
    denoiser: str = "identity"
    image: Optional[str] = None
    masks: Optional[int] = None  # CDP pattern count L; defaults to ceil(delta)

    def __post_init__(self):
        if self.preset not in PRESETS:
            raise InvalidArgument(f"unknown preset {self.preset!r}; choose from {sorted(PRESETS)}")
        check_grid(self.delta_grid)
        if self.n_trials < 1:
            raise InvalidArgument(f"need at least one trial, got {self.n_trials}")
        if self.d < 1:
            raise InvalidArgument(f"d must be positive, got {self.d}")
        if self.threads < 1:
            raise InvalidArgument(f"threads must be positive, got {self.threads}")
        if self.denoiser not in ("identity", "bayes"):
            raise InvalidArgument(f"denoiser must be identity or bayes, got {self.denoiser!r}")

    @property
    def is_image(self):
        return self.preset == "cdp" or self.prior == "image"

    @property
    def is_complex(self):
        return self.is_image or parse_channel(self.channel).is_complex


@dataclass
class SweepRow:
    delta: float
    spectral_mc_mean: float
    spectral_mc_std: float
    spectral_theory: float
    gamp_mc_mean: float
    gamp_mc_std: float
    gamp_se: float
    iterations_mean: float
    trials: int = 0
    diverged: int = 0


@dataclass(frozen=True)
class TrialResult:
    trial: int
    spectral: float
    gamp: float
    iterations: int
    diverged: bool


# ================================================================= theory


@dataclass(frozen=True)
class TheoryPoint:
    delta: float
    delta_u: float
    lambda_star: float
    a2: float
    a2_ratio_form: float
    se_overlap: float
    se_perfect: bool
    se_iterations: int


def predict_point(prior_spec: str, channel_spec: str, denoiser: str, delta: float, with_se: bool = True,
                  max_iter: int = 500) -> TheoryPoint:
    """Spectral prediction with T-bar and the squared overlap at the SE fixed point."""
    channel = parse_channel(channel_spec)
    du = delta_u(channel)
    if delta <= du:
        return TheoryPoint(delta, du, math.nan, 0.0, 0.0, 0.0, False, 0)
    preproc = optimal_T_bar(channel, delta)
    pred = solve_lambda_star(channel, preproc, delta)
    if not with_se:
        return TheoryPoint(delta, du, pred.lambda_star, pred.a2, pred.a2_ratio_form, math.nan, False, 0)
    if channel.is_complex:
        state, _, perfect = complex_se_fixed_point(pred.a2, delta, max_iter=max_iter)
        ov = 1.0 if perfect else complex_se_overlap(state)
        return TheoryPoint(delta, du, pred.lambda_star, pred.a2, pred.a2_ratio_form, ov, perfect, state.t)
    prior = parse_prior(prior_spec)
    policy = DenoiserPolicy(denoiser, normalize_output=True)
    tr = se_fixed_point(se_init(pred.a2, delta), prior, channel, policy, delta, max_iter=max_iter)
    if tr.perfect_recovery:
        ov = 1.0
    else:
        last = tr.last
        f = policy.f_for(prior, last)
        ov = overlap_from_se(last, prior, f) ** 2
    return TheoryPoint(delta, du, pred.lambda_star, pred.a2, pred.a2_ratio_form, ov, tr.perfect_recovery,
                       len(tr.states) - 1)


# ================================================================= trials


def _delta_key(delta):
    return int(round(delta * 1e6))


def run_trial(config: ExperimentConfig, delta: float, trial: int, context=None) -> TrialResult:
    """One spectral + GAMP run on a fresh instance; divergence is recorded, not raised."""
    rng = make_rng(config.seed, trial, _delta_key(delta))
    channel = parse_channel(config.channel)
    context = context or _delta_context(config, delta)
    preproc, pred = context["preproc"], context["prediction"]
    if config.is_image:
        img = context["image"]
        res = image_experiment(img, delta, seed=config.seed * 1_000_003 + trial, L=config.masks,
                               config=ComplexGampConfig(schedule="online-x", max_iter=config.max_iter,
                                                        stop_tol=config.stop_tol, damping=config.damping))
        return TrialResult(trial, res.mean_spectral, res.mean_gamp, int(round(float(np.mean(res.iterations)))),
                           False)
    prior = parse_prior(config.prior)
    inst = sample_instance(prior, channel, config.d, delta, rng)
    sp = spectral_estimate(inst, preproc, rng)
    spec_ov = squared_overlap(sp.xs, inst.x)
    if channel.is_complex:
        cfg = ComplexGampConfig(max_iter=config.max_iter, stop_tol=config.stop_tol, damping=config.damping)
        tr = complex_gamp_run(inst, cfg, pred.a2, pred.lambda_star, preproc, sp.xs,
                              mu_schedule=context["complex_schedule"])
        gamp_ov = phase_aligned_overlap(tr.estimate, inst.x) if not tr.diverged else tr.final_squared_overlap
    else:
        gcfg = GampConfig(policy=context["policy"], max_iter=config.max_iter, stop_tol=config.stop_tol,
                          damping=config.damping)
        tr = gamp_run(inst, gcfg, prior, channel, pred, sp, preproc, se_states=context["se_states"])
        gamp_ov = tr.final_squared_overlap
    if tr.diverged:
        log.warning("delta=%g trial %d diverged: %s", delta, trial, tr.message)
    return TrialResult(trial, spec_ov, float(min(max(gamp_ov, 0.0), 1.0)), tr.iterations, tr.diverged)


def _delta_context(config: ExperimentConfig, delta: float) -> dict:
    """Quantities shared by all trials at one sampling ratio."""
    channel = parse_channel(config.channel)
    preproc = optimal_T_bar(channel, delta)
    pred = solve_lambda_star(channel, preproc, delta)
    ctx = dict(preproc=preproc, prediction=pred, se_states=None, complex_schedule=None, image=None, policy=None)
    if config.is_image:
        if config.image is None:
            raise InvalidArgument("the cdp experiment needs an image path")
        ctx["image"] = read_netpbm(config.image)
    elif channel.is_complex:
        ctx["complex_schedule"] = [s.mu for s in complex_se_trajectory(pred.a2, delta, config.max_iter)]
    else:
        prior = parse_prior(config.prior)
        policy = DenoiserPolicy(config.denoiser, normalize_output=True)
        ctx["policy"] = policy
        ctx["se_states"] = se_trajectory(se_init(pred.a2, delta), prior, channel, policy, delta, config.max_iter)
    return ctx


def _trial_job(args):
    config, delta, trial = args
    return run_trial(config, delta, trial)


def aggregate(delta: float, results: list, theory: TheoryPoint) -> SweepRow:
    results = sorted(results, key=lambda r: r.trial)
    spec = np.array([r.spectral for r in results])
    gamp = np.array([r.gamp for r in results])
    its = np.array([r.iterations for r in results], dtype=float)
    return SweepRow(delta=delta, spectral_mc_mean=float(spec.mean()), spectral_mc_std=float(spec.std()),
                    spectral_theory=theory.a2, gamp_mc_mean=float(gamp.mean()), gamp_mc_std=float(gamp.std()),
                    gamp_se=theory.se_overlap, iterations_mean=float(its.mean()), trials=len(results),
                    diverged=sum(r.diverged for r in results))


def run_sweep(config: ExperimentConfig) -> list:
    """Theory plus n_trials simulations per sampling ratio; writes the CSV if output_path is set.

    For the image experiment the theory columns hold the complex Gaussian-sensing
    predictions, which serve only as a reference curve.
    """
    rows = []
    theory_channel = "complex-pr" if config.is_image else config.channel
    pool = ProcessPoolExecutor(max_workers=config.threads) if config.threads > 1 else None
    try:
        for delta in config.delta_grid:
            theory = predict_point(config.prior, theory_channel, config.denoiser, delta)
            if theory.a2 <= 0.0:
                raise InvalidArgument(f"delta = {delta} is at or below the spectral threshold {theory.delta_u:.6g}")
            jobs = [(config, delta, t) for t in range(config.n_trials)]
            if pool is None:
                ctx = _delta_context(config, delta)
                results = [run_trial(config, delta, t, ctx) for t in range(config.n_trials)]
            else:
                results = list(pool.map(_trial_job, jobs))
            rows.append(aggregate(delta, results, theory))
            log.info("delta=%g done: spectral %.4f (theory %.4f), gamp %.4f (se %.4f)", delta,
                     rows[-1].spectral_mc_mean, theory.a2, rows[-1].gamp_mc_mean, theory.se_overlap)
    finally:
        if pool is not None:
            pool.shutdown()
    if config.output_path:
        emit_csv(rows, config.output_path)
    return rows


# ==================================================================== CSV


def format_value(v) -> str:
    if isinstance(v, bool):
        return "1" if v else "0"
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return f"{float(v):.{CSV_DIGITS}g}"
    return str(v)


def emit_csv(rows: list, path, columns: Optional[list] = None) -> None:
    """Header plus one line per row; floats with 12 significant digits.

    `rows` holds dataclass instances (SweepRow by default) or dicts.
    """
    if columns is None:
        columns = [f.name for f in fields(SweepRow)] if not rows or not isinstance(rows[0], dict) \
            else list(rows[0])
    path = Path(path)
    try:
        with open(path, "w", newline="", encoding="ascii") as fh:
            write_csv(rows, fh, columns)
    except OSError as exc:
        raise OSError(f"cannot write CSV to {path}: {exc.strerror or exc}") from exc


def write_csv(rows, fh, columns):
    writer = csv.writer(fh, lineterminator="\n")
    writer.writerow(columns)
    for r in rows:
        d = r if isinstance(r, dict) else asdict(r)
        writer.writerow([format_value(d[c]) for c in columns])


def read_csv(path) -> list:
    """Rows as dicts of floats (counterpart of emit_csv, mainly for tests and plotting)."""
    with open(path, newline="", encoding="ascii") as fh:
        return [{k: float(v) for k, v in row.items()} for row in csv.DictReader(fh)]


# ============================================================ config files


def load_config_file(path) -> dict:
    """Flat 'key = value' lines; '#' starts a comment. Keys use the CLI flag names."""
    out = {}
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise OSError(f"cannot read config file {path}: {exc.strerror or exc}") from exc
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise InvalidArgument(f"{path}:{lineno}: expected key = value, got {raw!r}")
        out[key.strip().lstrip("-").replace("-", "_")] = value.strip()
    return out


def default_threads() -> int:
    return os.cpu_count() or 1


def build_config(preset: str = "custom", **overrides) -> ExperimentConfig:
    """Preset values filled in under explicit overrides (None means 'not given')."""
    if preset not in PRESETS:
        raise InvalidArgument(f"unknown preset {preset!r}; choose from {sorted(PRESETS)}")
    values = dict(PRESETS[preset])
    values.update({k: v for k, v in overrides.items() if v is not None})
    if "trials" in values:
        values["n_trials"] = values.pop("trials")
    if "out" in values:
        values["output_path"] = values.pop("out")
    grid = values.pop("delta_grid", None)
    delta = values.pop("delta", None)
    if delta is not None:
        values["delta_grid"] = [float(delta)]
    elif grid is not None:
        values["delta_grid"] = parse_delta_grid(grid) if isinstance(grid, str) else list(grid)
    conv = {f.name: f.type for f in fields(ExperimentConfig)}
    cast = {"int": int, "float": float, "str": str}
    for k, v in list(values.items()):
        if k not in conv:
            raise InvalidArgument(f"unknown configuration key {k!r}")
        kind = str(conv[k]).replace("Optional[", "").rstrip("]")
        if kind in cast and isinstance(v, str):
            values[k] = cast[kind](v)
    return ExperimentConfig(preset=preset, **values)


def with_changes(config: ExperimentConfig, **kw) -> ExperimentConfig:
    return replace(config, **kw)
