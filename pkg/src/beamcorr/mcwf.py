"""Quantum-trajectory simulation of atoms crossing the probe beam.

Atoms enter a fixed path upstream of the detection windows, are driven
resonantly while they fly through, and every quantum jump is recorded as an
emission event with its time and longitudinal position. Which events reach a
detector is decided later by :mod:`beamcorr.detection`.
"""

from __future__ import annotations

import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from . import _kernels
from ._validation import check_scalar
from .errors import ValidationError
from .physics import RabiDistribution, SelectedFluxPDF, velocity_center

CHUNK_ATOMS = 2048
DT_RESOLUTION = 0.01  # dt * max(Omega, Gamma) upper bound

_STREAM_ARRIVALS = 1
_STREAM_ATOMS = 2


@dataclass(frozen=True)
class EngineOptions:
    """Trajectory integrator settings.

    kind
        ``"fixed"`` (first-order jump MCWF on a fixed grid) or ``"waiting"``
        (exact waiting-time sampling; constant drive only).
    dt
        Step in s; 0 picks ``DT_RESOLUTION / max(Omega, Gamma)`` per atom.
    mode
        ``"A"``: Rabi frequency follows the Gaussian probe profile along the
        trajectory. ``"B"``: constant per-atom Rabi frequency.
    f_escape
        Fraction of atoms that skip the velocity filter and stay bright.
    lead_in
        Flight distance (m) before the first detection window; ``None`` means
        three probe waists.
    """

    kind: str = "fixed"
    dt: float = 0.0
    mode: str = "B"
    f_escape: float = 0.02
    lead_in: float | None = None

    def __post_init__(self):
        if self.kind not in ("fixed", "waiting"):
            raise ValidationError(f"engine kind must be 'fixed' or 'waiting', got {self.kind!r}")
        if self.mode not in ("A", "B"):
            raise ValidationError(f"engine mode must be 'A' or 'B', got {self.mode!r}")
        if self.kind == "waiting" and self.mode == "A":
            raise ValidationError("the waiting-time engine needs a constant drive (mode B)")
        check_scalar(self.dt, "engine dt", lo=0)
        check_scalar(self.f_escape, "f_escape", lo=0, hi=1)
        if self.lead_in is not None:
            check_scalar(self.lead_in, "lead_in", lo=0)


@dataclass(frozen=True)
class AtomTransit:
    """One atom's flight: active between ``entry_time`` and ``exit_time``,
    at ``entry_position`` (m, along the beam) when it enters.

    A zero velocity with an explicit ``exit_time`` describes a stationary atom.
    """

    entry_time: float
    exit_time: float
    velocity: float
    rabi_peak: float
    transverse_velocity: float = 0.0
    impact_offset: float = 0.0
    entry_position: float = 0.0
    selected: bool = True

    def __post_init__(self):
        if self.velocity < 0:
            raise ValidationError("velocity must be >= 0")
        if self.exit_time < self.entry_time:
            raise ValidationError("exit_time precedes entry_time")


@dataclass
class EmissionEvents:
    """Column store of emission events, sorted by time."""

    time: np.ndarray
    position: np.ndarray
    atom_id: np.ndarray

    def __len__(self):
        return self.time.shape[0]

    @classmethod
    def empty(cls):
        return cls(np.empty(0), np.empty(0), np.empty(0, dtype=np.int64))

    def select(self, mask):
        return EmissionEvents(self.time[mask], self.position[mask], self.atom_id[mask])


@dataclass
class TransitLedger:
    """Per-atom ground truth of a simulated run (one array entry per atom)."""

    atom_id: np.ndarray
    entry_time: np.ndarray
    exit_time: np.ndarray
    velocity: np.ndarray
    transverse_velocity: np.ndarray
    impact_offset: np.ndarray
    rabi_peak: np.ndarray
    selected: np.ndarray
    escaped: np.ndarray
    n_emissions: np.ndarray
    entry_position: float
    duration: float

    COLUMNS = (
        "atom_id",
        "entry_time",
        "exit_time",
        "velocity",
        "transverse_velocity",
        "impact_offset",
        "rabi_peak",
        "selected",
        "escaped",
        "n_emissions",
    )

    def __len__(self):
        return self.atom_id.shape[0]

    @property
    def bright(self):
        return self.selected | self.escaped

    def window_times(self, center, width):
        """Times each atom enters and leaves the window ``center +- width/2``."""
        with np.errstate(divide="ignore"):
            inv_v = 1.0 / self.velocity
        t_in = self.entry_time + (center - width / 2 - self.entry_position) * inv_v
        t_out = self.entry_time + (center + width / 2 - self.entry_position) * inv_v
        return t_in, t_out

    def mean_atom_number(self, center=0.0, width=25e-6, bright_only=True):
        """Time-averaged number of atoms inside the window over ``[0, duration]``."""
        t_in, t_out = self.window_times(center, width)
        overlap = np.clip(np.minimum(t_out, self.duration) - np.maximum(t_in, 0.0), 0.0, None)
        if bright_only:
            overlap = overlap[self.bright]
        return float(overlap.sum() / self.duration)

    def counts_at(self, probe_times, center=0.0, width=25e-6, bright_only=True):
        """Number of atoms inside the window at each probe instant."""
        t_in, t_out = self.window_times(center, width)
        if bright_only:
            keep = self.bright
            t_in, t_out = t_in[keep], t_out[keep]
        t_in = np.sort(t_in)
        t_out = np.sort(t_out)
        probe_times = np.asarray(probe_times, dtype=float)
        return np.searchsorted(t_in, probe_times, side="right") - np.searchsorted(
            t_out, probe_times, side="left"
        )


@dataclass(frozen=True)
class SimulationPlan:
    config: object
    duration: float
    master_seed: int = 0

    def __post_init__(self):
        check_scalar(self.duration, "duration", lo=0)
        if not 0 <= int(self.master_seed) < 2**64:
            raise ValidationError("master_seed must fit in 64 unsigned bits")


# ---------------------------------------------------------------------------
# sampling


def sample_atom_arrivals(flux, duration, rng):
    """Sorted arrival times of a homogeneous Poisson process on ``[0, duration)``."""
    flux = check_scalar(flux, "flux", lo=0)
    duration = check_scalar(duration, "duration", lo=0)
    n = rng.poisson(flux * duration)
    return np.sort(rng.uniform(0.0, duration, n))


def sample_velocity(beam, rng, size=None):
    """Longitudinal speeds drawn from the beam's flux velocity pdf."""
    v = beam.pdf.sample(rng, 1 if size is None else size)
    return float(v[0]) if size is None else v


def selection_probability(v, sel, wavelength):
    """Lorentzian probability that the repump returns an atom of speed ``v``
    to the bright state; 1 at the velocity centre, 1/2 one HWHM away."""
    v = np.asarray(v, dtype=float)
    if np.any(v < 0):
        raise ValidationError("velocity must be non-negative")
    k = 2 * math.pi / wavelength
    delta = sel.detuning + k * v * math.cos(sel.angle)
    return 1.0 / (1.0 + (delta / sel.linewidth) ** 2)


def bright_velocity_pdf(config):
    """Flux velocity pdf of the atoms that emit, as sampled by
    :func:`sample_transits` (selected plus escaped)."""
    base = config.beam.pdf
    sel = config.selection
    if sel is None:
        return base
    f = config.engine.f_escape
    wavelength = config.optics.wavelength
    if not config.repump:
        if f == 0:
            raise ValidationError("repump off and f_escape = 0 leave no bright atoms")
        return base

    def weight(v):
        p = selection_probability(v, sel, wavelength)
        return p + f * (1 - p)

    return SelectedFluxPDF(base, weight, points=[velocity_center(sel, wavelength)])


def _default_dt(rabi, gamma):
    return DT_RESOLUTION / np.maximum(rabi, gamma)


def _check_dt(dt, rabi, gamma):
    """Validated per-atom step array."""
    bound = _default_dt(rabi, gamma)
    if dt == 0:
        return bound
    if np.any(dt > bound * (1 + 1e-12)):
        raise ValidationError(
            f"dt = {dt:g} s exceeds {DT_RESOLUTION}/max(Omega, Gamma) = {bound.min():g} s"
        )
    return np.full_like(bound, dt)


# ---------------------------------------------------------------------------
# evolution


def evolve_atom(transit, optics, dt=0.0, seed=0, atom_id=0, mode="B", engine="fixed"):
    """Emission events of a single atom.

    ``seed`` and ``atom_id`` select the random stream, exactly as inside
    :func:`simulate_beam`.
    """
    EngineOptions(kind=engine, mode=mode, dt=dt)
    one = lambda x: np.array([x], dtype=float)  # noqa: E731
    rabi = one(transit.rabi_peak)
    steps = _check_dt(dt, rabi, optics.gamma)
    if not transit.selected:
        return EmissionEvents.empty()
    times, pos, ids, _ = _kernels.run_atoms(
        np.array([atom_id], dtype=np.int64),
        one(transit.entry_time),
        one(transit.exit_time),
        one(transit.entry_position),
        one(transit.velocity),
        one(transit.impact_offset),
        one(transit.transverse_velocity),
        rabi,
        steps,
        float(optics.gamma),
        float(optics.beam_waist_radius),
        _kernels.MODE_BEAM if mode == "A" else _kernels.MODE_CONSTANT,
        _kernels.ENGINE_WAITING if engine == "waiting" else _kernels.ENGINE_FIXED,
        np.uint64(seed),
        64,
        -np.inf,
        np.inf,
    )
    return EmissionEvents(times, pos, ids)


def thread_count():
    """Worker threads from ``BEAMCORR_THREADS`` (0 or unset: all CPUs)."""
    raw = os.environ.get("BEAMCORR_THREADS", "0").strip() or "0"
    try:
        n = int(raw)
    except ValueError:
        raise ValidationError(f"BEAMCORR_THREADS must be an integer, got {raw!r}") from None
    if n < 0:
        raise ValidationError("BEAMCORR_THREADS must be >= 0")
    return n or (os.cpu_count() or 1)


def _flight_path(config):
    """(entry position, exit position) of the simulated flight in m."""
    layout = config.layout
    half = layout.fov_diameter / 2
    lead_in = config.engine.lead_in
    if lead_in is None:
        lead_in = 3 * config.optics.beam_waist_radius
    return min(layout.centers) - half - lead_in, max(layout.centers) + half


def sample_transits(plan):
    """Draw the atom ensemble of a run without evolving it.

    Arrivals start before ``t = 0`` so that the detection windows are already
    populated in steady state when the run begins.
    """
    cfg = plan.config
    beam, optics = cfg.beam, cfg.optics
    x_start, x_end = _flight_path(cfg)
    path = x_end - x_start
    warmup = path / 2.0  # atoms slower than 2 m/s are negligible
    arrivals_rng = np.random.default_rng([int(plan.master_seed), _STREAM_ARRIVALS])
    atoms_rng = np.random.default_rng([int(plan.master_seed), _STREAM_ATOMS])
    entry = sample_atom_arrivals(beam.flux, plan.duration + warmup, arrivals_rng) - warmup
    n = entry.shape[0]
    velocity = sample_velocity(beam, atoms_rng, n)
    transverse = atoms_rng.uniform(-beam.transverse_spread, beam.transverse_spread, n)
    offset = atoms_rng.uniform(-0.5, 0.5, n) * cfg.layout.fov_diameter
    rabi = RabiDistribution(optics.rabi_mean / optics.gamma, optics.rabi_sigma / optics.gamma)
    rabi_peak = rabi.sample(atoms_rng, n) * optics.gamma
    u_sel = atoms_rng.uniform(size=n)
    u_esc = atoms_rng.uniform(size=n)
    if cfg.selection is None:
        selected = np.ones(n, dtype=bool)
        escaped = np.zeros(n, dtype=bool)
    else:
        if cfg.repump:
            p = selection_probability(velocity, cfg.selection, optics.wavelength)
        else:
            p = np.zeros(n)
        selected = u_sel < p
        escaped = ~selected & (u_esc < cfg.engine.f_escape)
    exit_time = entry + path / velocity
    if plan.duration == 0:
        n = 0
    keep = slice(0, n)
    return TransitLedger(
        atom_id=np.arange(n, dtype=np.int64),
        entry_time=entry[keep],
        exit_time=exit_time[keep],
        velocity=velocity[keep],
        transverse_velocity=transverse[keep],
        impact_offset=offset[keep],
        rabi_peak=rabi_peak[keep],
        selected=selected[keep],
        escaped=escaped[keep],
        n_emissions=np.zeros(n, dtype=np.int64),
        entry_position=x_start,
        duration=float(plan.duration),
    )


def simulate_beam(plan, threads=None):
    """Simulate a run; returns ``(events, ledger)``.

    Events are those emitted inside ``[0, duration)``, sorted by time (ties by
    atom id). The result depends only on the plan, never on ``threads``.
    """
    cfg = plan.config
    optics, engine = cfg.optics, cfg.engine
    ledger = sample_transits(plan)
    x_start, x_end = _flight_path(cfg)
    path = x_end - x_start
    active = np.flatnonzero(ledger.bright & (ledger.exit_time > 0))
    if active.size == 0:
        return EmissionEvents.empty(), ledger
    rabi = ledger.rabi_peak[active]
    steps = _check_dt(engine.dt, rabi, optics.gamma)
    mode = _kernels.MODE_BEAM if engine.mode == "A" else _kernels.MODE_CONSTANT
    kind = _kernels.ENGINE_WAITING if engine.kind == "waiting" else _kernels.ENGINE_FIXED
    seed = np.uint64(int(plan.master_seed))
    rec_lo, rec_hi = cfg.layout.record_window()

    def run(chunk):
        idx = active[chunk]
        duration = ledger.exit_time[idx] - ledger.entry_time[idx]
        capacity = int(np.sum(duration) * optics.gamma * 0.6 * (rec_hi - rec_lo) / path) + 64
        t, x, i, n = _kernels.run_atoms(
            ledger.atom_id[idx],
            ledger.entry_time[idx],
            ledger.exit_time[idx],
            np.full(idx.shape[0], ledger.entry_position),
            ledger.velocity[idx],
            ledger.impact_offset[idx],
            ledger.transverse_velocity[idx],
            rabi[chunk],
            steps[chunk],
            float(optics.gamma),
            float(optics.beam_waist_radius),
            mode,
            kind,
            seed,
            capacity,
            rec_lo,
            rec_hi,
        )
        # copy out of the oversized kernel buffers so they can be freed
        keep = (t >= 0) & (t < plan.duration)
        return t[keep], x[keep], i[keep], n

    chunks = [slice(i, i + CHUNK_ATOMS) for i in range(0, active.size, CHUNK_ATOMS)]
    n_threads = thread_count() if threads is None else max(1, int(threads))
    if n_threads == 1 or len(chunks) == 1:
        results = [run(c) for c in chunks]
    else:
        with ThreadPoolExecutor(n_threads) as pool:
            results = list(pool.map(run, chunks))

    ledger.n_emissions[active] = np.concatenate([r[3] for r in results])
    columns = []
    for k in range(3):
        columns.append(np.concatenate([r[k] for r in results]))
        results = [tuple(None if j == k else v for j, v in enumerate(r)) for r in results]
    del results
    # chunks arrive in atom-id order, so a stable sort breaks time ties by id
    order = np.argsort(columns[0], kind="stable")
    for k in range(3):
        columns[k] = columns[k][order]
    return EmissionEvents(*columns), ledger
