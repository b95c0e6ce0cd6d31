"""Command-line front end.

    specgamp predict   spectral threshold, lambda* and limiting overlap per delta
    specgamp se        state-evolution fixed points of spectrally started GAMP
    specgamp simulate  Monte-Carlo sweep (spectral + GAMP), one CSV row per delta
    specgamp cdp       coded-diffraction experiment on a PGM/PPM image
    specgamp artificial-check   two-phase harness: phase-one SE and finite-size gap
    specgamp selftest  installation self-checks

Flags may also come from a flat `key = value` file given with --config;
explicit flags win over the file, which wins over the preset.
"""

from __future__ import annotations

import argparse
import logging
import math
import sys
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import __version__
from .errors import SpecGampError
from .experiments import (
    PRESETS,
    build_config,
    default_threads,
    emit_csv,
    load_config_file,
    predict_point,
    run_sweep,
    write_csv,
)

log = logging.getLogger("specgamp")

SHARED_KEYS = ("preset", "d", "delta", "delta_grid", "trials", "seed", "out", "threads", "damping", "stop_tol",
               "max_iter", "prior", "channel", "denoiser", "image", "masks")


def _shared(parser):
    g = parser.add_argument_group("experiment")
    g.add_argument("--config", help="flat key = value file with defaults for these flags")
    g.add_argument("--preset", choices=sorted(PRESETS), help="named configuration (default: custom)")
    g.add_argument("--d", type=int, help="signal dimension")
    g.add_argument("--delta", type=float, help="single sampling ratio n/d")
    g.add_argument("--delta-grid", help="lo:hi:step (inclusive) or a comma-separated list")
    g.add_argument("--trials", type=int, help="Monte-Carlo trials per sampling ratio")
    g.add_argument("--seed", type=int, help="base seed")
    g.add_argument("--out", help="CSV output path (default: standard output)")
    g.add_argument("--threads", type=int, help="worker processes (default: all cores)")
    g.add_argument("--damping", type=float, help="damping factor in (0, 1]")
    g.add_argument("--stop-tol", type=float, help="stop when successive iterates differ by less than this")
    g.add_argument("--max-iter", type=int, help="iteration cap for GAMP and state evolution")
    g.add_argument("--prior", help="gaussian | binary:p | complex-gaussian")
    g.add_argument("--channel", help="pr | pr-noisy:sigma | pr-smoothed:eps | complex-pr")
    g.add_argument("--denoiser", choices=("identity", "bayes"), help="signal-side denoiser")
    g.add_argument("--image", help="PGM/PPM image for the cdp experiment")
    g.add_argument("--masks", type=int, help="number of coded diffraction patterns L (default: ceil(delta))")
    parser.add_argument("-v", "--verbose", action="count", default=0, help="more logging (repeatable)")


def make_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="specgamp", description="Spectrally initialised GAMP for generalized "
                                "linear models: theory tables, simulations and the coded-diffraction experiment.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True)
    for name, help_ in [("predict", "spectral-method predictions over a delta grid"),
                        ("se", "state-evolution fixed points over a delta grid"),
                        ("simulate", "Monte-Carlo sweep of spectral + GAMP"),
                        ("cdp", "coded diffraction patterns on an image")]:
        sp = sub.add_parser(name, help=help_)
        _shared(sp)
        if name == "cdp":
            sp.add_argument("--image-out", help="directory for reconstructed PPM images")
    ac = sub.add_parser("artificial-check", help="two-phase artificial GAMP harness")
    _shared(ac)
    ac.add_argument("--alpha", type=float, default=0.5, help="initial correlation of the phase-one start")
    ac.add_argument("--T", type=int, default=40, help="phase-one length")
    st = sub.add_parser("selftest", help="run installation self-checks")
    st.add_argument("-v", "--verbose", action="count", default=0)
    return p


def resolve(args) -> dict:
    """Merge preset < config file < explicit flags into keyword arguments for build_config."""
    values = {}
    if getattr(args, "config", None):
        values.update(load_config_file(args.config))
    for k in SHARED_KEYS:
        v = getattr(args, k, None)
        if v is not None:
            values[k] = v
    if "delta" in values and "delta_grid" in values and getattr(args, "delta", None) is not None:
        values.pop("delta_grid")
    values.setdefault("threads", default_threads())
    preset = values.pop("preset", "custom")
    return dict(preset=preset, **values)


def _write_rows(rows, out, columns):
    if out:
        emit_csv(rows, out, columns)
    else:
        write_csv(rows, sys.stdout, columns)


def cmd_predict(cfg):
    rows = []
    for delta in cfg.delta_grid:
        tp = predict_point(cfg.prior, cfg.channel, cfg.denoiser, delta, with_se=False)
        rows.append(dict(delta=delta, delta_u=tp.delta_u, lambda_star=tp.lambda_star, a2=tp.a2,
                         a2_ratio_form=tp.a2_ratio_form))
    _write_rows(rows, cfg.output_path, ["delta", "delta_u", "lambda_star", "a2", "a2_ratio_form"])
    return 0


def cmd_se(cfg):
    rows = []
    for delta in cfg.delta_grid:
        tp = predict_point(cfg.prior, cfg.channel, cfg.denoiser, delta, max_iter=max(cfg.max_iter, 500))
        rows.append(dict(delta=delta, spectral_a2=tp.a2, se_overlap=tp.se_overlap, exact_recovery=tp.se_perfect,
                         iterations=tp.se_iterations))
    _write_rows(rows, cfg.output_path, ["delta", "spectral_a2", "se_overlap", "exact_recovery", "iterations"])
    return 0


def cmd_simulate(cfg):
    rows = run_sweep(cfg)
    if not cfg.output_path:
        _write_rows(rows, None, None or list(asdict(rows[0])))
    bad = sum(r.diverged for r in rows)
    if bad:
        print(f"warning: {bad} trial(s) diverged; see the 'diverged' column", file=sys.stderr)
    return 0


def cmd_cdp(cfg, image_out=None):
    from .complex_gamp import ComplexGampConfig, image_experiment, read_netpbm, write_netpbm

    if cfg.image is None:
        raise SpecGampError("cdp needs --image PATH (PGM or PPM)")
    img = read_netpbm(cfg.image)
    rows = []
    gconf = ComplexGampConfig(schedule="online-x", max_iter=max(cfg.max_iter, 300), stop_tol=min(cfg.stop_tol, 1e-10),
                              damping=cfg.damping)
    for delta in cfg.delta_grid:
        for trial in range(cfg.n_trials):
            res = image_experiment(img, delta, seed=cfg.seed * 1_000_003 + trial, L=cfg.masks, config=gconf)
            for j, (so, go, it) in enumerate(zip(res.spectral_overlaps, res.gamp_overlaps, res.iterations)):
                rows.append(dict(delta=delta, trial=trial, channel=j, spectral=so, gamp=go, iterations=it))
            if image_out and trial == 0:
                Path(image_out).mkdir(parents=True, exist_ok=True)
                write_netpbm(Path(image_out) / f"reconstruction_delta{delta:g}.ppm", res.reconstruction)
            log.info("delta=%g trial %d: spectral %.4f, gamp %.4f", delta, trial, res.mean_spectral, res.mean_gamp)
    _write_rows(rows, cfg.output_path, ["delta", "trial", "channel", "spectral", "gamp", "iterations"])
    return 0


def cmd_artificial(cfg, alpha, T):
    from .artificial import ArtificialConfig, artificial_run, phase1_se
    from .models import parse_channel, parse_prior, sample_instance
    from .numerics import make_rng
    from .spectral import optimal_T_bar, solve_lambda_star, spectral_estimate

    channel, prior = parse_channel(cfg.channel), parse_prior(cfg.prior)
    rows = []
    for delta in cfg.delta_grid:
        preproc = optimal_T_bar(channel, delta)
        pred = solve_lambda_star(channel, preproc, delta)
        se = phase1_se(alpha, T, channel, preproc, pred)
        target = (pred.a / math.sqrt(delta), (1 - pred.a2) / delta)
        se_err = max(abs(se[-1].mu - target[0]), abs(se[-1].sig2 - target[1]))
        for trial in range(cfg.n_trials):
            rng = make_rng(cfg.seed, trial, int(round(delta * 1e6)))
            inst = sample_instance(prior, channel, cfg.d, delta, rng)
            sp = spectral_estimate(inst, preproc, rng)
            res = artificial_run(inst, ArtificialConfig(alpha=alpha, T=T, phase2_steps=0), prior, channel, pred,
                                 preproc, sp, rng)
            rows.append(dict(delta=delta, trial=trial, gap=res.gap, phase1_se_error=se_err))
    _write_rows(rows, cfg.output_path, ["delta", "trial", "gap", "phase1_se_error"])
    return 0


def cmd_selftest():
    from .selftest import run_selftest

    ok = True
    for name, passed, detail in run_selftest():
        ok &= passed
        print(f"{'PASS' if passed else 'FAIL'}  {name}  {detail}".rstrip())
    return 0 if ok else 1


def main(argv=None) -> int:
    parser = make_parser()
    args = parser.parse_args(argv)
    level = logging.WARNING - 10 * min(args.verbose, 2)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    np.seterr(all="ignore")
    try:
        if args.command == "selftest":
            return cmd_selftest()
        kw = resolve(args)
        if args.command == "cdp":
            kw.setdefault("preset", "cdp")
            if kw["preset"] == "custom":
                kw["preset"] = "cdp"
        cfg = build_config(**kw)
        if args.command == "predict":
            return cmd_predict(cfg)
        if args.command == "se":
            return cmd_se(cfg)
        if args.command == "simulate":
            return cmd_simulate(cfg)
        if args.command == "cdp":
            return cmd_cdp(cfg, args.image_out)
        if args.command == "artificial-check":
            return cmd_artificial(cfg, args.alpha, args.T)
    except (SpecGampError, OSError, ValueError) as exc:
        print(f"specgamp: error: {exc}", file=sys.stderr)
        return 2
    parser.error(f"unknown command {args.command}")
    return 2


if __name__ == "__main__":
    sys.exit(main())
