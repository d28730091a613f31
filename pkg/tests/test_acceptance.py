"""End-to-end acceptance checks, one test per criterion.

Each test prints a single ``criterion N: PASS|FAIL`` line (also repeated in
the pytest terminal summary) and then asserts the verdict. Simulation sizes
and seeds are fixed so the suite is deterministic; the slowest criterion
takes about three minutes on one core.
"""

import functools
import gc
import math

import numpy as np
import pytest
from conftest import ACCEPTANCE_LINES, config, run_streams
from scipy import integrate, optimize

from beamcorr.correlator import (
    autocorrelate,
    brute_force_coincidences,
    cross_correlate,
    g3_partial,
    normalize_g2,
)
from beamcorr.detection import PS, DetectorParameters, TimeTagStream
from beamcorr.fitting import fit_g2, relative_gradient, synthetic_histogram
from beamcorr.mcwf import AtomTransit, SimulationPlan, evolve_atom, sample_transits
from beamcorr.physics import (
    BeamParameters,
    DeltaVelocityPDF,
    GeometryParameters,
    OpticalParameters,
    RabiDistribution,
    g2_single,
    g2_theory,
    scattering_rate,
    transit_correction,
)
from beamcorr.velocimetry import reconstruct

D, DF = 55e-6, 25e-6


def criterion(number, title):
    """Record and print one verdict line; the wrapped test returns a list of
    ``(label, ok, value)`` checks."""

    def wrap(fn):
        @functools.wraps(fn)
        def run(*args, **kwargs):
            try:
                checks = fn(*args, **kwargs)
            except Exception as exc:
                _emit(number, title, False, f"error: {exc!r}")
                raise
            ok = all(c[1] for c in checks)
            detail = "; ".join(f"{label} {value}" + ("" if good else " [x]") for label, good, value in checks)
            _emit(number, title, ok, detail)
            assert ok, detail

        return run

    return wrap


def _emit(number, title, ok, detail):
    line = f"criterion {number:2d}: {'PASS' if ok else 'FAIL'}  {title}: {detail}"
    print(line)
    ACCEPTANCE_LINES.append(line)


def _textbook_g2(tau, omega, gamma):
    # written out independently of the library
    wg = math.sqrt(omega**2 - gamma**2 / 16)
    a = 0.75 * gamma
    return 1 - math.exp(-a * tau) * (math.cos(wg * tau) + a / wg * math.sin(wg * tau))


def _bin_average(func, edges, nodes=6):
    x, w = np.polynomial.legendre.leggauss(nodes)
    lo, hi = edges[:-1, None], edges[1:, None]
    pts = lo + 0.5 * (x + 1) * (hi - lo)
    return 0.5 * np.sum(w * func(pts), axis=-1)


@criterion(1, "analytic core")
def test_criterion_01_analytic_core():
    G = 2 * math.pi * 6.0666e6
    omega = 6 * G
    wg = math.sqrt(omega**2 - G**2 / 16)
    closed = 1 + math.exp(-3 * math.pi * G / (4 * wg))
    # locate the first maximum numerically, independently of the closed form
    res = optimize.minimize_scalar(
        lambda t: -g2_single(t, omega, G), bounds=(0.5 * math.pi / wg, 1.5 * math.pi / wg),
        method="bounded", options={"xatol": 1e-18},
    )
    peak = -res.fun
    geom = GeometryParameters()
    worst = 0.0
    for v in (3.0, 23.0, 92.0, 250.0, 700.0):
        tau = np.linspace(0, 2 * geom.fov_length / v, 201)
        got = transit_correction(tau, geom, pdf=DeltaVelocityPDF(v))
        worst = max(worst, float(np.max(np.abs(got - np.maximum(0, 1 - v * tau / geom.fov_length)))))
    zero = g2_single(0.0, omega, G)
    return [
        ("g2_single(0) =", zero == 0.0, f"{zero:g}"),
        ("|first max - closed form| =", abs(peak - closed) < 1e-12, f"{abs(peak - closed):.1e}"),
        ("max |xi - (1 - v tau/L)+| =", worst < 1e-12, f"{worst:.1e}"),
    ]


@criterion(2, "quantum trajectories vs single-atom g2")
def test_criterion_02_mcwf_vs_theory():
    optics = OpticalParameters()
    G = optics.gamma
    omega = 6 * G
    rate = scattering_rate(omega, G)
    duration = 1.1e6 / rate
    tau_hi = math.ceil(20 / G / 1e-9) * 1e-9
    edges = np.arange(0, tau_hi + 1e-12, 1e-9)
    oracle = np.array([
        integrate.quad(lambda t: _textbook_g2(t, omega, G), lo, hi, epsabs=1e-13)[0] / (hi - lo)
        for lo, hi in zip(edges[:-1], edges[1:])
    ])
    checks = []
    for engine, seed in (("fixed", 3), ("waiting", 3)):
        ev = evolve_atom(AtomTransit(0.0, duration, 0.0, omega), optics, seed=seed, engine=engine)
        tags = TimeTagStream(0, np.floor(ev.time / PS).astype(np.int64), int(duration / PS))
        g2 = normalize_g2(autocorrelate(tags, 1e-9, (0.0, tau_hi))).normalized
        rms = float(np.sqrt(np.mean((g2 - oracle) ** 2)))
        checks.append((f"{engine}: emissions", len(ev) >= 10**6, f"{len(ev)}"))
        checks.append((f"{engine}: RMS", rms < 0.03, f"{rms:.4f}"))
        del ev, tags
    return checks


@criterion(3, "full-pipeline g2 of the 351 K beam")
def test_criterion_03_full_pipeline_g2():
    cfg = config("fig3a")
    (a, b), ledger = run_streams(cfg, 10.0, 7)
    mean_n = ledger.mean_atom_number(cfg.layout.centers[0], cfg.n_region_length)
    del ledger
    gc.collect()
    h = normalize_g2(cross_correlate(a, b, 2e-9, (-200e-9, 200e-9)))
    g = h.normalized
    k = int(np.argmax(g))
    peak, where = float(g[k]), abs(float(h.centers[k]))
    i0 = int(np.searchsorted(h.left, 0.0))
    g0 = 0.5 * (g[i0 - 1] + g[i0])  # the two bins that meet at zero delay
    ratio = g0 / peak
    return [
        ("ledger <N>", abs(mean_n - 0.138) <= 0.005, f"{mean_n:.4f}"),
        ("peak", 8 <= peak <= 12, f"{peak:.2f}"),
        ("at |tau| [ns]", 9e-9 <= where <= 16e-9, f"{where * 1e9:.0f}"),
        ("g2(0)/peak", 0.05 <= ratio <= 0.15, f"{ratio:.3f}"),
    ]


@criterion(4, "(g2_peak - 1) <N> is constant")
def test_criterion_04_scaling_law():
    products = []
    for n in (0.05, 0.1, 0.2):
        cfg = config("fig3a", **{"beam.mean_n": n, "det.ceff": 1.0,
                                 "det.dead_time_ns": 0.0, "det.jitter_ps": 0.0})
        (a, b), ledger = run_streams(cfg, 1.0, 11)
        mean_n = ledger.mean_atom_number(cfg.layout.centers[0], cfg.n_region_length)
        del ledger
        h = normalize_g2(cross_correlate(a, b, 1e-9, (-400e-9, 400e-9)))
        products.append((float(h.normalized.max()) - 1) * mean_n)
        del a, b
        gc.collect()
    spread = max(products) / min(products) - 1
    return [
        ("products", True, ", ".join(f"{p:.3f}" for p in products)),
        ("max/min - 1", spread <= 0.10, f"{spread:.3f}"),
    ]


@criterion(5, "velocity pdf round trip, 343 K beam")
def test_criterion_05_velocity_round_trip():
    cfg = config("figS2")
    (a, b), _ = run_streams(cfg, 3.0, 3)
    h = normalize_g2(cross_correlate(a, b, 4e-9, (0.0, 20e-6)))
    _, rho = reconstruct(h, D, DF)
    v = rho.grid
    band = (v >= 30) & (v <= 300)
    rec = rho.values[band] / np.sum(rho.values[band] * rho.widths[band])
    th = cfg.beam.pdf.density(v[band])
    th = th / np.sum(th * rho.widths[band])
    rms = float(np.sqrt(np.mean((rec - th) ** 2)) / th.max())
    return [
        ("temperature [K]", abs(cfg.beam.temperature - 343.15) < 1e-9, f"{cfg.beam.temperature:.2f}"),
        ("RMS / peak over 30-300 m/s", rms < 0.10, f"{rms:.3f}"),
    ]


@criterion(6, "velocity selection")
def test_criterion_06_velocity_selection():
    peaks, rho = {}, {}
    for name, preset, extra in (
        ("-80 MHz", "fig2a", {}),
        ("-20 MHz", "fig2b", {}),
        ("-20 MHz, no escape", "fig2b", {"engine.f_escape": 0.0}),
    ):
        cfg = config(preset, **extra)
        (a, b), _ = run_streams(cfg, 8.0, 5)
        h = normalize_g2(cross_correlate(a, b, 4e-9, (0.0, 20e-6)))
        n_v, _ = reconstruct(h, D, DF)
        _, low = reconstruct(h, D, DF, band=(5, 100))
        peaks[name] = n_v.peak
        rho[name] = low.peak
        del a, b
        gc.collect()
    return [
        ("n_AB peak at -80 MHz", 85 <= peaks["-80 MHz"] <= 115, f"{peaks['-80 MHz']:.2f}"),
        ("n_AB peak at -20 MHz", 20 <= peaks["-20 MHz"] <= 40, f"{peaks['-20 MHz']:.2f}"),
        ("rho peak below 100 m/s with / without escape",
         rho["-20 MHz"] > rho["-20 MHz, no escape"],
         f"{rho['-20 MHz']:.2f} / {rho['-20 MHz, no escape']:.2f}"),
    ]


@criterion(7, "g3 properties")
def test_criterion_07_g3_properties():
    # coarse partial g3 with the shared detector's dead time
    cfg = config("fig4a", **{"beam.mean_n": 0.1})
    (a, b), _ = run_streams(cfg, 10.0, 7)
    coarse = g3_partial(a, b, 45e-9, 100e-9, (-1e-6, 1e-6))
    del a, b
    gc.collect()
    g = coarse.normalized
    t1, t2 = np.meshgrid(coarse.tau1_centers, coarse.tau2_centers, indexing="ij")
    ridge = g[(np.abs(t1 - t2) < 1e-9) & (np.abs(t1) > 3e-7) & ~coarse.dead_mask]
    background = g[(np.abs(t1 - t2) > 6e-7) & (np.abs(t1) > 3e-7) & (np.abs(t2) > 3e-7)]
    gmax = float(np.nanmax(g))
    contrast = float(ridge.mean() / background.mean())

    # fine, dead-time-free g3 near zero delay
    cfg = config("fig4a", **{"beam.mean_n": 0.3})
    (a, b), ledger = run_streams(cfg, 4.0, 8, detectors=DetectorParameters())
    mean_n = ledger.mean_atom_number(cfg.layout.centers[0], cfg.n_region_length)
    del ledger
    gc.collect()
    fine = g3_partial(a, b, 0.0, 1e-9, (-40e-9, 40e-9))
    del a, b
    gc.collect()
    f = fine.normalized
    o = int(np.searchsorted(fine.tau1_edges, 0.0))
    origin = float(f[o, o])
    # independent atoms: a triple with two photons at equal times needs two
    # atoms, so each line carries 2 g2 - 1 of the remaining delay
    edges = fine.tau2_edges[o:]
    g2 = _bin_average(
        lambda t: g2_theory(np.abs(t), mean_n, cfg.geometry, cfg.beam,
                            RabiDistribution(6.0, 1.5), cfg.optics.gamma),
        edges,
    )
    predicted = 2 * g2 - 1
    lines = {
        "tau1=0": f[o, o:],
        "tau2=0": f[o:, o],
        "tau1=tau2": np.diag(f)[o:],
    }
    checks = [
        ("partial max", gmax > 10, f"{gmax:.1f}"),
        ("ridge / background", contrast >= 2, f"{contrast:.2f}"),
        ("g3(0,0)", abs(origin - 1) < 0.3, f"{origin:.2f}"),
    ]
    for name, line in lines.items():
        rel = float(np.sqrt(np.mean(((line - predicted) / predicted) ** 2)))
        checks.append((f"{name} vs 2 g2 - 1, RMS", rel < 0.15, f"{rel:.3f}"))
    off_line = float(np.nanmax(np.where(
        (np.abs(np.arange(f.shape[0]) - o)[:, None] > 2) & (np.abs(np.arange(f.shape[1]) - o)[None, :] > 2)
        & (np.abs(np.subtract.outer(np.arange(f.shape[0]), np.arange(f.shape[1]))) > 2), f, np.nan)))
    line_max = float(max(np.max(v) for v in lines.values()))
    checks.append(("line max / three-photon peak", line_max < 0.5 * off_line,
                   f"{line_max:.1f} / {off_line:.1f}"))
    return checks


@criterion(8, "streaming correlator equals brute force")
def test_criterion_08_correlator_oracle():
    mismatches, parallel_mismatches, pairs = 0, 0, 0
    for k in range(100):
        rng = np.random.default_rng([8, k])
        span = int(10 ** rng.uniform(8, 11))
        a = TimeTagStream(0, np.sort(rng.integers(0, span, 10_000)), span)
        b = TimeTagStream(1, np.sort(rng.integers(0, span, 10_000)), span)
        w = int(rng.choice([1, 7, 100, 1000, 4096]))
        n = int(rng.integers(10, 2000))
        lo = -int(rng.integers(0, n + 1)) * w
        args = (w * 1e-12, (lo * 1e-12, (lo + n * w) * 1e-12))
        fast = cross_correlate(a, b, *args)
        slow = brute_force_coincidences(a, b, *args)
        mismatches += int(not np.array_equal(fast.counts, slow.counts))
        par = cross_correlate(a, b, *args, chunks=int(rng.integers(2, 64)), threads=4)
        parallel_mismatches += int(not np.array_equal(fast.counts, par.counts))
        pairs += int(slow.counts.sum())
    return [
        ("pairs binned", pairs > 0, f"{pairs}"),
        ("streams differing from brute force", mismatches == 0, f"{mismatches}/100"),
        ("chunked-parallel differing", parallel_mismatches == 0, f"{parallel_mismatches}/100"),
    ]


@criterion(9, "Poisson atom number")
def test_criterion_09_poisson_moments():
    cfg = config("fig3a")
    ledger = sample_transits(SimulationPlan(cfg, 0.5, 9))
    rng = np.random.default_rng(9)
    probes = rng.uniform(1e-3, 0.5, 100_000)
    x = ledger.counts_at(probes, cfg.layout.centers[0], cfg.n_region_length).astype(float)
    mean, var = x.mean(), x.var()
    d = (x - mean) ** 2 - x
    se = d.std() / math.sqrt(x.size)
    return [
        ("mean", True, f"{mean:.4f}"),
        ("|var - mean| / SE", abs(var - mean) < 5 * se, f"{abs(var - mean) / se:.2f}"),
    ]


@criterion(10, "fit recovery")
def test_criterion_10_fit_recovery():
    beam = BeamParameters(351.15)
    truth = {"mean_n": 0.138, "fov_length": 25e-6, "rabi_mean": 6.0, "rabi_sigma": 1.5}
    fitted, grads, converged = [], [], 0
    for k in range(50):
        hist = synthetic_histogram(truth, beam, noise=0.02, rng=np.random.default_rng([10, k]))
        res = fit_g2(hist, beam)
        converged += res.converged
        fitted.append(res.mean_n)
        grads.append(np.linalg.norm(list(relative_gradient(hist, beam, res).values())))
    err = abs(np.median(fitted) / truth["mean_n"] - 1)
    return [
        ("converged", converged == 50, f"{converged}/50"),
        ("median <N> error", err < 0.05, f"{err:.4f}"),
        ("max gradient norm", max(grads) < 1e-4, f"{max(grads):.1e}"),
    ]


if __name__ == "__main__":
    raise SystemExit(pytest.main([__file__, "-v", "-s"]))
