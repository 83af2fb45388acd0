"""Command-line entry point.

Exit codes: 0 success, 2 usage error, 3 data error, 4 failed ``--check``.
Stochastic subcommands take ``--seed`` (default 0; config-driven commands
default to the seed stored in the config, itself 0 unless set).
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import harness, tensorio
from .diffusion import forward_noise
from .harness import CheckFailed, ConfigError, ExperimentConfig
from .schedule import KINDS, KappaBounds, discretize, make_schedule
from .specsampler import GmmFitConfig, GmmParams, fit_gmm, manipulate_spectrum, sample_spectrum
from .spectral import PowerLawFit, SpectrumCurve, fit_power_law, rapsd

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_CHECK = 0, 2, 3, 4


def _emit(text: str, out: str | None) -> None:
    if out:
        Path(out).write_text(text)
    else:
        sys.stdout.write(text)


def _floats(text: str):
    return [float(v) for v in text.split(",") if v.strip()]


def _ints(text: str):
    return [int(v) for v in text.split(",") if v.strip()]


def cmd_rapsd(args):
    curve = rapsd(tensorio.load_image(args.image))
    if args.json:
        text = json.dumps({"power": curve.power.tolist(), "count": curve.counts.tolist()}) + "\n"
    else:
        text = curve.to_csv()
    _emit(text, args.out)


def cmd_fit(args):
    text = Path(args.csv).read_text()
    fit = fit_power_law(SpectrumCurve.from_csv(text))
    _emit(fit.to_json() + "\n", args.out)


def cmd_schedule(args):
    fit = None if args.kind == "cosine" else PowerLawFit(args.alpha, args.beta, args.nf)
    spec = make_schedule(args.kind, fit, KappaBounds(args.kmin, args.kmax))
    table = discretize(spec, args.steps)
    if args.json:
        text = json.dumps({
            "spec": spec.to_dict(),
            "rows": [
                {"i": i, "t": float(t), "lambda": float(l), "alpha_t": float(a), "sigma_t": float(s)}
                for i, (t, l, a, s) in enumerate(zip(table.t, table.lam, table.alpha, table.sigma))
            ],
        }) + "\n"
    else:
        text = table.to_csv()
    _emit(text, args.out)


def cmd_noise(args):
    img = tensorio.load_image(args.image)
    fit = None if args.kind == "cosine" else fit_power_law(rapsd(img))
    spec = make_schedule(args.kind, fit, KappaBounds(args.kmin, args.kmax))
    x_t, _ = forward_noise(img.data, args.t, spec, np.random.default_rng(args.seed))
    noised = tensorio.ImageTensor(x_t)
    if args.tensor_out:
        tensorio.save_tensor(noised, args.tensor_out)
    tensorio.save_image(noised, args.out)
    if args.json:
        print(json.dumps({"t": args.t, "lambda": float(spec.lam(args.t)), "out": args.out}))


def cmd_fit_gmm(args):
    records = json.loads(Path(args.fits).read_text())
    pairs = [(r.get("label", "0"), PowerLawFit.from_dict(r)) for r in records]
    cfg = GmmFitConfig(components=args.components, backend=args.backend, seed=args.seed)
    params, report = fit_gmm(pairs, args.components, cfg)
    text = json.dumps(params.to_dict(), indent=2) + "\n"
    _emit(text, args.out)
    if args.json and args.out:
        print(json.dumps({"initial_nll": report.initial_nll,
                          "final_nll": {k: v[-1] for k, v in report.traces.items()}}))


def cmd_sample_spectrum(args):
    params = GmmParams.load(args.gmm)
    rng = np.random.default_rng(args.seed)
    fits = []
    for _ in range(args.count):
        fit = sample_spectrum(params, args.label, rng)
        if args.manipulate_factor != 1.0:
            fit = manipulate_spectrum(fit, args.manipulate_factor)
        fits.append(fit.to_dict())
    _emit(json.dumps(fits) + "\n", args.out)


def _config(args) -> ExperimentConfig:
    cfg = ExperimentConfig.load(args.config)
    changes = {}
    if args.seed is not None:
        changes["seed"] = args.seed
    if getattr(args, "out_dir", None):
        changes["output_dir"] = args.out_dir
    if getattr(args, "steps", None):
        changes["sampler__steps"] = args.steps
    if getattr(args, "manipulate_factor", None) is not None:
        changes["sampling__manipulate_factor"] = args.manipulate_factor
    for flag in ("gamma", "guidance_scale"):
        if getattr(args, flag, None) is not None:
            changes[f"sampler__{flag}"] = getattr(args, flag)
    if getattr(args, "bias", None) is not None:
        changes["training__bias" if args.command == "train-toy" else "sampler__bias"] = args.bias
    lo, hi = getattr(args, "guidance_lo", None), getattr(args, "guidance_hi", None)
    if lo is not None or hi is not None:
        cur = cfg.sampler.guidance_interval
        changes["sampler__guidance_interval"] = (cur[0] if lo is None else lo, cur[1] if hi is None else hi)
    return cfg.replace(**changes) if changes else cfg


def cmd_train_toy(args):
    cfg = _config(args)
    outcome = harness.run_training(cfg)
    summary = {
        "steps": len(outcome.loss_trace),
        "initial_eval_loss": outcome.initial_eval_loss,
        "final_eval_loss": outcome.final_eval_loss,
        "log_power": outcome.denoiser.log_power.tolist(),
    }
    if args.json:
        print(json.dumps(summary))
    else:
        sys.stdout.write(harness.loss_trace_csv(outcome.loss_trace))


def cmd_sample(args):
    cfg = _config(args)
    outcome = harness.run_sampling(cfg)
    per_label = {k: d.summary for k, d in outcome.distances.items()}
    if args.json:
        print(json.dumps({"distance": outcome.summary, "per_label": per_label}))
    else:
        print("label,distance")
        for k, v in per_label.items():
            print(f"{k},{v!r}")
    if args.check:
        harness.check_outcome(cfg, outcome.summary)


def cmd_sweep(args):
    cfg = _config(args)
    rows, text = harness.nfe_sweep(cfg, _ints(args.step_counts), seeds=args.seeds, out_path=args.out)
    if not args.out:
        sys.stdout.write(text)
    if args.check:
        harness.check_outcome(cfg, rows[-1][1])


def cmd_grid(args):
    entries = harness.noised_grid(
        args.image, args.kinds.split(","), _floats(args.t), args.out_dir,
        seed=args.seed, bounds=KappaBounds(args.kmin, args.kmax),
    )
    if args.json:
        print(json.dumps([{"kind": e.kind, "t": e.t, "lambda": e.lam, "image": str(e.image)} for e in entries]))
    else:
        for e in entries:
            print(f"{e.kind},{e.t!r},{e.lam!r},{e.image}")


def cmd_trend(args):
    from .spectral import synthesize_field

    top = max(_ints(args.sides))
    fit = PowerLawFit(args.alpha, args.beta, top // 2)
    scenes = synthesize_field(fit, top, np.random.default_rng(args.seed), args.count)
    t, curves = harness.resolution_trend(scenes, _ints(args.sides), KappaBounds(args.kmin, args.kmax))
    _emit(harness.resolution_trend_csv(t, curves), args.out)


def _bounds_flags(p):
    p.add_argument("--kmin", type=float, default=0.2, help="kappa_min (default 0.2)")
    p.add_argument("--kmax", type=float, default=200.0, help="kappa_max (default 200)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="specsched", description=__doc__.splitlines()[0])
    parser.add_argument("--json", action="store_true", help="machine-readable JSON output")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--json", action="store_true", default=argparse.SUPPRESS,
                        help="machine-readable JSON output")

    p = sub.add_parser("rapsd", help="radially averaged power spectrum of an image", parents=[common])
    p.add_argument("image")
    p.add_argument("--out")
    p.set_defaults(func=cmd_rapsd)

    p = sub.add_parser("fit", help="power-law fit of a k,power,count CSV", parents=[common])
    p.add_argument("csv")
    p.add_argument("--out")
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("schedule", help="discretized schedule table", parents=[common])
    p.add_argument("--kind", choices=KINDS, default="mixed")
    p.add_argument("--alpha", type=float, default=-2.0)
    p.add_argument("--beta", type=float, default=1.0)
    p.add_argument("--nf", type=int, default=128)
    _bounds_flags(p)
    p.add_argument("--steps", type=int, default=256)
    p.add_argument("--out")
    p.set_defaults(func=cmd_schedule)

    p = sub.add_parser("noise", help="forward-noise an image at time t", parents=[common])
    p.add_argument("image")
    p.add_argument("--kind", choices=KINDS, default="mixed")
    p.add_argument("--t", type=float, required=True)
    _bounds_flags(p)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--tensor-out")
    p.set_defaults(func=cmd_noise)

    p = sub.add_parser("fit-gmm", help="fit per-label spectrum mixtures from a JSON list of fits", parents=[common])
    p.add_argument("fits")
    p.add_argument("--components", type=int, default=3)
    p.add_argument("--backend", choices=("em", "sgd"), default="em")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out")
    p.set_defaults(func=cmd_fit_gmm)

    p = sub.add_parser("sample-spectrum", help="draw power-law spectra from a fitted sampler", parents=[common])
    p.add_argument("gmm")
    p.add_argument("--label", required=True)
    p.add_argument("--count", type=int, default=1)
    p.add_argument("--manipulate-factor", type=float, default=1.0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out")
    p.set_defaults(func=cmd_sample_spectrum)

    for name, func, help_ in (
        ("train-toy", cmd_train_toy, "train the spectral toy denoiser from a config"),
        ("sample", cmd_sample, "run the sampling experiment of a config"),
        ("sweep", cmd_sweep, "spectral distance versus number of steps"),
    ):
        p = sub.add_parser(name, help=help_, parents=[common])
        p.add_argument("config")
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--out-dir")
        p.add_argument("--bias", type=float, default=None, help="loss / conditioning shift b")
        if name != "train-toy":
            p.add_argument("--check", action="store_true", help="exit 4 if config checks fail")
            p.add_argument("--gamma", type=float, default=None, help="ancestral variance interpolation")
            p.add_argument("--guidance-scale", type=float, default=None, help="guidance weight w")
            p.add_argument("--guidance-lo", type=float, default=None)
            p.add_argument("--guidance-hi", type=float, default=None)
        if name == "sample":
            p.add_argument("--steps", type=int)
            p.add_argument("--manipulate-factor", type=float, default=None)
        if name == "sweep":
            p.add_argument("--step-counts", default="1,4,16,64")
            p.add_argument("--seeds", type=int, default=3)
            p.add_argument("--out")
        p.set_defaults(func=func)

    p = sub.add_parser("grid", help="noised images and RAPSD curves for several schedules", parents=[common])
    p.add_argument("image")
    p.add_argument("--kinds", default="cosine,mixed")
    p.add_argument("--t", default="0,0.1,0.5,0.9")
    _bounds_flags(p)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=cmd_grid)

    p = sub.add_parser("trend", help="median mixed schedules across resolutions", parents=[common])
    p.add_argument("--sides", default="32,64,128")
    p.add_argument("--count", type=int, default=32)
    p.add_argument("--alpha", type=float, default=-2.0)
    p.add_argument("--beta", type=float, default=100.0)
    _bounds_flags(p)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out")
    p.set_defaults(func=cmd_trend)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING)
    try:
        args.func(args)
    except CheckFailed as exc:
        print(f"check failed: {exc}", file=sys.stderr)
        return EXIT_CHECK
    except (ConfigError, ValueError, KeyError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
