"""Command-line entry point: ``beamcorr <subcommand> [flags]``."""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .config import ExperimentConfig, load_config, load_preset, schema_help
from .correlator import cross_correlate, g3_partial, normalize_g2, normalize_g3
from .detection import detect
from .errors import BeamcorrError, ConvergenceError, ValidationError
from .fitting import PARAMS, G2Model, fit_g2
from .mcwf import SimulationPlan, simulate_beam
from .physics import (
    BeamParameters,
    GeometryParameters,
    RabiDistribution,
    g2_theory,
    two_fiber_theory,
)
from .tagio import (
    read_g2_csv,
    read_tags,
    write_csv,
    write_emissions,
    write_g2_csv,
    write_g3_csv,
    write_ledger_csv,
    write_tags,
    write_velocity_csv,
)
from .velocimetry import reconstruct, subtract_background, velocity_grid

NS = 1e-9
CHANNEL_NAMES = ("A", "B")
FIT_ALIASES = {
    "n": "mean_n",
    "mean_n": "mean_n",
    "L": "fov_length",
    "fov_um": "fov_length",
    "mu": "rabi_mean",
    "rabi_mean": "rabi_mean",
    "sigma": "rabi_sigma",
    "rabi_sigma": "rabi_sigma",
}


def _ns_range(lo_ns, hi_ns):
    return (round(lo_ns * 1000) * 1e-12, round(hi_ns * 1000) * 1e-12)


def _config_from_args(args):
    if args.config and args.preset:
        raise ValidationError("use either --config or --preset")
    if args.config:
        cfg = load_config(args.config)
    elif args.preset:
        cfg = load_preset(args.preset)
    else:
        cfg = ExperimentConfig({})
    overrides = list(args.set or [])
    if getattr(args, "seed", None) is not None:
        overrides.append(f"run.seed={args.seed}")
    if getattr(args, "duration", None) is not None:
        overrides.append(f"run.duration_s={args.duration!r}")
    return cfg.with_overrides(overrides) if overrides else cfg


def cmd_simulate(args):
    cfg = _config_from_args(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    plan = SimulationPlan(cfg, cfg.duration, cfg.seed)
    events, ledger = simulate_beam(plan)
    streams = detect(events, cfg.layout, cfg.detectors, cfg.duration, cfg.seed, cfg.resolution_ps)
    for name, stream in zip(CHANNEL_NAMES, streams):
        write_tags(stream, out / f"{name}.attg")
    write_ledger_csv(ledger, out / "ledger.csv")
    if args.emissions:
        write_emissions(events, out / "emissions", cfg.duration, cfg.resolution_ps)
    region = cfg.layout.fov_diameter
    lines = [
        f"beamcorr {__version__}",
        f"config_sha256 = {cfg.digest()}",
        f"seed = {cfg.seed}",
        f"duration_s = {cfg.duration!r}",
        f"atoms = {len(ledger)}",
        f"emissions_recorded = {len(events)}",
        f"ledger_mean_n = {ledger.mean_atom_number(cfg.layout.centers[0], region)!r}",
    ]
    lines += [f"counts_{n} = {len(s)}" for n, s in zip(CHANNEL_NAMES, streams)]
    lines += [f"recipe: {r}" for r in cfg.recipe]
    lines += ["", "[config]", cfg.dumps().rstrip("\n")]
    (out / "manifest.txt").write_text("\n".join(lines) + "\n", encoding="utf-8")
    print(f"wrote {len(streams)} channels, {len(ledger)} atoms to {out}")
    return 0


def _load_pair(args):
    return read_tags(args.a), read_tags(args.b)


def cmd_g2(args):
    a, b = _load_pair(args)
    hist = cross_correlate(a, b, args.bin_ns * NS, _ns_range(-args.range_ns, args.range_ns))
    hist = normalize_g2(hist, args.norm, (args.plateau_us[0] * 1e-6, args.plateau_us[1] * 1e-6))
    write_g2_csv(hist, args.out)
    return 0


def cmd_xcorr(args):
    a, b = _load_pair(args)
    hist = cross_correlate(a, b, args.bin_ns * NS, _ns_range(args.min_ns, args.max_ns))
    hist = normalize_g2(hist, args.norm, (args.plateau_us[0] * 1e-6, args.plateau_us[1] * 1e-6))
    write_g2_csv(hist, args.out)
    return 0


def cmd_g3(args):
    a, b = _load_pair(args)
    hist = g3_partial(
        a, b, args.theta_ns * NS, args.bin_ns * NS, _ns_range(args.min_ns, args.max_ns)
    )
    hist = normalize_g3(hist, args.norm, (args.plateau_us[0] * 1e-6, args.plateau_us[1] * 1e-6))
    write_g3_csv(hist, args.out)
    return 0


def cmd_velocity(args):
    a, b = _load_pair(args)
    d, df = args.distance_um * 1e-6, args.fiber_um * 1e-6
    plateau = (args.plateau_us[0] * 1e-6, args.plateau_us[1] * 1e-6)
    tau_range = _ns_range(0, args.plateau_us[1] * 1000)
    hist = normalize_g2(cross_correlate(a, b, args.bin_ns * NS, tau_range))
    if args.background:
        parts = args.background.split(",")
        if len(parts) != 2:
            raise ValidationError("--background expects two files: A.attg,B.attg")
        bg_a, bg_b = read_tags(parts[0]), read_tags(parts[1])
        bg = normalize_g2(cross_correlate(bg_a, bg_b, args.bin_ns * NS, tau_range))
        hist = subtract_background(hist, bg, args.weight, clamp=False)
    edges = velocity_grid(args.v_min, args.v_max, args.v_step)
    n_v, rho = reconstruct(hist, d, df, edges, plateau)
    write_velocity_csv(rho if args.kind == "atom" else n_v, args.out)
    return 0


def cmd_theory(args):
    beam = BeamParameters(args.temp_c + 273.15)
    geometry = GeometryParameters(
        fov_length=args.fov_um * 1e-6,
        fiber_fov_diameter=args.fiber_um * 1e-6,
        fiber_separation=args.distance_um * 1e-6,
    )
    gamma = 2 * np.pi * args.gamma_mhz * 1e6
    step = args.bin_ns * NS
    tau = np.arange(int(round(args.max_ns / args.bin_ns)) + 1) * step
    if args.kind == "g2":
        g = g2_theory(tau, args.mean_n, geometry, beam, RabiDistribution(args.mu, args.sigma), gamma)
    else:
        tau = tau[1:]
        g = two_fiber_theory(tau, geometry, beam, args.mean_n)
    write_csv(args.out, ["tau_s", "g2"], [tau, g])
    return 0


def _parse_fix(items):
    fixed = {}
    for item in items or []:
        for part in item.split(","):
            if "=" not in part:
                raise ValidationError(f"--fix expects name=value, got {part!r}")
            name, value = (s.strip() for s in part.split("=", 1))
            if name not in FIT_ALIASES:
                raise ValidationError(f"unknown fit parameter {name!r}")
            key = FIT_ALIASES[name]
            try:
                v = float(value)
            except ValueError:
                raise ValidationError(f"--fix {name}: not a number") from None
            fixed[key] = v * 1e-6 if key == "fov_length" else v
    return fixed


def cmd_fit(args):
    hist = read_g2_csv(args.g2)
    beam = BeamParameters(args.temp_c + 273.15)
    gamma = 2 * np.pi * args.gamma_mhz * 1e6
    fixed = _parse_fix(args.fix)
    result = fit_g2(hist, beam, gamma, fix=fixed, tau_min=args.tau_min_ns * NS)
    names = list(PARAMS) + ["residual_rms", "chi2", "iterations", "converged"]
    values = [getattr(result, n) for n in names]
    values[-1] = int(values[-1])
    out = Path(args.out)
    with open(out, "w", encoding="utf-8") as fh:
        fh.write("parameter,value\n")
        for n, v in zip(names, values):
            fh.write(f"{n},{v!r}\n")
    model = G2Model(beam, gamma, hist.left, hist.edges[1:])(**result.params())
    write_csv(
        out.with_name(out.stem + "_residuals.csv"),
        ["tau_s", "g2", "model", "residual"],
        [hist.left, hist.normalized, model, hist.normalized - model],
    )
    if not result.converged:
        raise ConvergenceError(f"fit did not converge: {result.message}")
    return 0


def build_parser():
    epilog = "configuration keys:\n" + schema_help() + (
        "\n\nenvironment:\n  BEAMCORR_THREADS  worker threads for simulation (0 = all CPUs)"
        "\n\nexit codes: 0 ok, 2 invalid input, 3 corrupt data, 4 fit did not converge"
    )
    fmt = argparse.RawDescriptionHelpFormatter
    p = argparse.ArgumentParser(
        prog="beamcorr",
        description="Photon statistics of single atoms in a thermal beam.",
        epilog=epilog,
        formatter_class=fmt,
    )
    p.add_argument("--version", action="version", version=f"beamcorr {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("simulate", help="simulate a run and write time tags", epilog=epilog, formatter_class=fmt)
    s.add_argument("--config", help="config file (key = value lines)")
    s.add_argument("--preset", help="shipped preset name, e.g. fig3a")
    s.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config key")
    s.add_argument("--duration", type=float, help="simulated time in s (overrides run.duration_s)")
    s.add_argument("--seed", type=int, help="master seed (overrides run.seed)")
    s.add_argument("--out", required=True, help="output directory")
    s.add_argument("--emissions", action="store_true", help="also dump raw emission events")
    s.set_defaults(func=cmd_simulate)

    def pair(sp):
        sp.add_argument("--a", required=True, help="channel A tag file")
        sp.add_argument("--b", required=True, help="channel B tag file")
        sp.add_argument("--out", required=True, help="output CSV")

    def norm(sp):
        sp.add_argument("--norm", choices=("rates", "plateau"), default="rates")
        sp.add_argument("--plateau-us", type=float, nargs=2, default=(15.0, 20.0), metavar=("LO", "HI"))

    g = sub.add_parser("g2", help="normalised g2 from two HBT channels")
    pair(g)
    g.add_argument("--bin-ns", type=float, default=2.0)
    g.add_argument("--range-ns", type=float, default=200.0, help="histogram covers [-R, R)")
    norm(g)
    g.set_defaults(func=cmd_g2)

    x = sub.add_parser("xcorr", help="normalised cross-correlation over a signed delay window")
    pair(x)
    x.add_argument("--bin-ns", type=float, default=4.0)
    x.add_argument("--min-ns", type=float, default=-2000.0)
    x.add_argument("--max-ns", type=float, default=20000.0)
    norm(x)
    x.set_defaults(func=cmd_xcorr)

    t3 = sub.add_parser("g3", help="partial g3 with the third tag from channel A")
    pair(t3)
    t3.add_argument("--bin-ns", type=float, default=100.0)
    t3.add_argument("--theta-ns", type=float, default=45.0, help="masked band around tau2 = 0")
    t3.add_argument("--min-ns", type=float, default=-1000.0)
    t3.add_argument("--max-ns", type=float, default=1000.0)
    norm(t3)
    t3.set_defaults(func=cmd_g3)

    v = sub.add_parser("velocity", help="velocity density from two displaced fibers")
    pair(v)
    v.add_argument("--distance-um", type=float, default=55.0)
    v.add_argument("--fiber-um", type=float, default=25.0)
    v.add_argument("--bin-ns", type=float, default=4.0)
    v.add_argument("--background", help="background run as A.attg,B.attg")
    v.add_argument("--weight", type=float, help="background weight (default: accidental-rate ratio)")
    v.add_argument("--kind", choices=("atom", "coincidence"), default="atom")
    v.add_argument("--v-min", type=float, default=5.0)
    v.add_argument("--v-max", type=float, default=400.0)
    v.add_argument("--v-step", type=float, default=2.5)
    v.add_argument("--plateau-us", type=float, nargs=2, default=(15.0, 20.0), metavar=("LO", "HI"))
    v.set_defaults(func=cmd_velocity)

    th = sub.add_parser("theory", help="closed-form g2 or two-fiber curve")
    th.add_argument("--kind", choices=("g2", "two-fiber"), default="g2")
    th.add_argument("--mean-n", type=float, default=0.138)
    th.add_argument("--temp-c", type=float, default=78.0)
    th.add_argument("--fov-um", type=float, default=25.0)
    th.add_argument("--fiber-um", type=float, default=25.0)
    th.add_argument("--distance-um", type=float, default=55.0)
    th.add_argument("--mu", type=float, default=6.0, help="mean Rabi frequency, units of Gamma")
    th.add_argument("--sigma", type=float, default=1.5, help="Rabi spread, units of Gamma")
    th.add_argument("--gamma-mhz", type=float, default=6.0666)
    th.add_argument("--bin-ns", type=float, default=0.5, help="delay step")
    th.add_argument("--max-ns", type=float, default=200.0)
    th.add_argument("--out", required=True)
    th.set_defaults(func=cmd_theory)

    f = sub.add_parser("fit", help="fit the transit-corrected g2 model")
    f.add_argument("--g2", required=True, help="CSV from 'beamcorr g2'")
    f.add_argument("--temp-c", type=float, default=78.0)
    f.add_argument("--gamma-mhz", type=float, default=6.0666)
    f.add_argument("--tau-min-ns", type=float, default=2.0)
    f.add_argument(
        "--fix",
        action="append",
        metavar="NAME=VALUE",
        help="hold a parameter: n, L (um), mu, sigma (Gamma)",
    )
    f.add_argument("--out", required=True)
    f.set_defaults(func=cmd_fit)
    return p


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except BeamcorrError as exc:
        print(f"beamcorr: error: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"beamcorr: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
