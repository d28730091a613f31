"""Two-fiber time-of-flight velocimetry.

The correlated part of the cross-correlation between two displaced windows
is a delay density; ``v = d / tau`` maps it to a coincidence density over
velocity, and weighting by ``v^2`` (each atom contributes coincidences in
proportion to its transit time squared) gives the atom velocity pdf.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .correlator import normalize_g2
from .errors import ValidationError

DEFAULT_PLATEAU = (15e-6, 20e-6)


def velocity_grid(v_min=5.0, v_max=400.0, step=2.5):
    """Cell edges of a uniform velocity grid."""
    n = int(round((v_max - v_min) / step))
    if n < 1 or v_min <= 0:
        raise ValidationError("velocity grid needs 0 < v_min < v_max")
    return v_min + step * np.arange(n + 1)


@dataclass
class DelayDensity:
    """Piecewise-constant density over delay bins (edges in s)."""

    edges: np.ndarray
    values: np.ndarray
    clamped: int = 0

    @property
    def centers(self):
        return 0.5 * (self.edges[:-1] + self.edges[1:])

    def integral(self):
        return float(np.sum(self.values * np.diff(self.edges)))


@dataclass
class VelocityDensity:
    """Piecewise-constant density over velocity cells.

    ``kind`` is ``"coincidence"`` for n_AB(v) or ``"atom"`` for rho(v).
    """

    edges: np.ndarray
    values: np.ndarray
    kind: str
    note: str = ""

    def __post_init__(self):
        self.edges = np.asarray(self.edges, dtype=float)
        self.values = np.asarray(self.values, dtype=float)
        if np.any(np.diff(self.edges) <= 0):
            raise ValidationError("velocity grid must be strictly increasing")
        if self.values.shape[0] != self.edges.shape[0] - 1:
            raise ValidationError("values need one entry per grid cell")
        if self.kind not in ("coincidence", "atom"):
            raise ValidationError(f"unknown density kind {self.kind!r}")

    @property
    def grid(self):
        return 0.5 * (self.edges[:-1] + self.edges[1:])

    @property
    def widths(self):
        return np.diff(self.edges)

    def integral(self, lo=-np.inf, hi=np.inf):
        keep = (self.grid >= lo) & (self.grid <= hi)
        return float(np.sum((self.values * self.widths)[keep]))

    @property
    def peak(self):
        """Velocity of the highest cell."""
        return float(self.grid[np.argmax(self.values)])


def correlated_excess(hist, plateau=DEFAULT_PLATEAU, window=None, clamp=True):
    """Normalised correlated excess ``g2(tau) - g2(inf)`` over positive delays.

    ``g2(inf)`` is the mean over ``plateau`` if the histogram reaches it, else
    1. Negative values are clamped to zero (the number of clamped bins is
    returned in ``clamped``). The result integrates to one over ``window``
    (default: from zero delay to the start of the plateau).

    With ``clamp=False`` the signed excess is kept. Clamping each fine delay
    bin biases shot noise upwards, and many delay bins feed one slow-velocity
    cell, so :func:`reconstruct` clamps only after the change of variables.
    """
    if hist.normalized is None:
        hist = normalize_g2(hist)
    g2 = np.asarray(hist.normalized, dtype=float)
    left, right = hist.edges[:-1], hist.edges[1:]
    in_plateau = (left >= plateau[0]) & (right <= plateau[1])
    level = g2[in_plateau].mean() if np.any(in_plateau) else 1.0
    if window is None:
        window = (0.0, plateau[0])
    keep = (left >= window[0]) & (right <= window[1] + 1e-15) & (left >= 0)
    if not np.any(keep):
        raise ValidationError("analysis window selects no positive-delay bins")
    excess = g2[keep] - level
    clamped = int(np.sum(excess < 0))
    if clamp:
        excess = np.clip(excess, 0.0, None)
    edges = np.append(left[keep], right[keep][-1])
    if np.any(np.abs(edges[1:-1] - right[keep][:-1]) > 1e-15):
        raise ValidationError("analysis window must be contiguous")
    area = np.sum(excess * np.diff(edges))
    if not area > 0:
        raise ValidationError("no correlated signal above the accidental level")
    return DelayDensity(edges, excess / area, clamped)


def tau_to_velocity(n_tau, d, edges=None, normalize=True, clamp=False):
    """Change variables from delay to velocity, ``v = d / tau``.

    Mass is transferred exactly: the delay density is taken as constant within
    each delay bin and each velocity cell receives the mass of the delay
    interval it maps to. With ``normalize=False`` the total mass is preserved
    for the part of the delay axis covered by the grid. ``clamp`` zeroes
    negative cells (signed input from ``correlated_excess(clamp=False)``).
    """
    if d <= 0:
        raise ValidationError("fiber separation must be positive")
    edges = velocity_grid() if edges is None else np.asarray(edges, dtype=float)
    t_edges = np.asarray(n_tau.edges, dtype=float)
    vals = np.asarray(n_tau.values, dtype=float)
    pos = t_edges[:-1] > 0
    t_lo, t_hi, vals = t_edges[:-1][pos], t_edges[1:][pos], vals[pos]
    if t_lo.size == 0:
        raise ValidationError("no positive delays to convert")
    cum = np.concatenate([[0.0], np.cumsum(vals * (t_hi - t_lo))])
    tau_edges = d / edges  # decreasing
    mass = _cumulative(tau_edges[:-1], t_lo, t_hi, cum) - _cumulative(tau_edges[1:], t_lo, t_hi, cum)
    if clamp:
        mass = np.clip(mass, 0.0, None)
    values = mass / np.diff(edges)
    if normalize:
        total = mass.sum()
        if not total > 0:
            raise ValidationError("no mass inside the velocity grid")
        values = values / total
    return VelocityDensity(edges, values, "coincidence", note=f"d = {d:g} m")


def _cumulative(t, t_lo, t_hi, cum):
    """Delay mass below ``t``; gaps between bins carry none."""
    t = np.asarray(t, dtype=float)
    idx = np.clip(np.searchsorted(t_lo, t, side="right") - 1, 0, t_lo.size - 1)
    frac = np.clip((t - t_lo[idx]) / (t_hi[idx] - t_lo[idx]), 0.0, 1.0)
    out = cum[idx] + frac * (cum[idx + 1] - cum[idx])
    return np.where(t < t_lo[0], 0.0, out)


def to_atom_pdf(n_v, d_f, band=None):
    """Atom velocity pdf ``rho(v) ~ n_AB(v) v^2 / d_f^2``, normalised over
    ``band`` (default: the whole grid) and zero outside it."""
    if n_v.kind != "coincidence":
        raise ValidationError("to_atom_pdf expects a coincidence density")
    if d_f <= 0:
        raise ValidationError("fiber window diameter must be positive")
    rho = n_v.values * n_v.grid**2 / d_f**2
    if band is not None:
        rho = np.where((n_v.grid >= band[0]) & (n_v.grid <= band[1]), rho, 0.0)
    area = np.sum(rho * n_v.widths)
    if not area > 0:
        raise ValidationError("empty velocity density")
    return VelocityDensity(n_v.edges, rho / area, "atom", note=n_v.note)


def delay_density_model(pdf, d, d_f, tau_edges, nodes=32):
    """Noiseless correlated delay density for atoms drawn from ``pdf``.

    Both windows are hard-edged with width ``d_f`` and centres ``d`` apart.
    An atom at speed ``v`` yields coincidences in proportion to ``(d_f/v)^2``
    and, with emissions uniform over each window, a delay ``dx / v`` where
    ``dx`` is triangular on ``[d - d_f, d + d_f]``. Returned bin averages
    integrate to one over ``tau_edges``.
    """
    if not 0 < d_f < d:
        raise ValidationError("need 0 < d_f < d")
    tau_edges = np.asarray(tau_edges, dtype=float)
    if np.any(np.diff(tau_edges) <= 0) or tau_edges[0] < 0:
        raise ValidationError("delay edges must be increasing and non-negative")
    x, wx = np.polynomial.legendre.leggauss(nodes)
    x, wx = 0.5 * (x + 1), 0.5 * wx
    t4, w4 = np.polynomial.legendre.leggauss(4)
    lo, hi = tau_edges[:-1, None], tau_edges[1:, None]
    tau = lo + 0.5 * (t4 + 1) * (hi - lo)
    tau = np.where(tau > 0, tau, np.finfo(float).tiny)
    total = np.zeros(tau.shape)
    # the triangle has a kink at v = d / tau: integrate each side separately
    for a, b in (((d - d_f), d), (d, (d + d_f))):
        v = (a + (b - a) * x[None, None, :]) / tau[..., None]
        jac = (b - a) / tau[..., None]
        tri = 1 - np.abs(v * tau[..., None] - d) / d_f
        total += np.sum(wx * jac * tri * pdf.density(v) / v, axis=-1)
    values = 0.5 * np.sum(w4 * total, axis=-1)
    area = np.sum(values * np.diff(tau_edges))
    if not area > 0:
        raise ValidationError("model has no mass on the delay grid")
    return DelayDensity(tau_edges, values / area)


def accidental_rate(hist):
    """Accidental coincidence rate per unit delay, ``rate_a * rate_b``."""
    return hist.total_a * hist.total_b / hist.duration**2


def subtract_background(signal, background, weight=None, clamp=True):
    """Remove a background run's correlated excess from a signal run.

    Returns a copy of ``signal`` whose normalised values are
    ``1 + max(0, (g2_s - 1) - weight (g2_b - 1))``. The default ``weight``
    is the ratio of accidental rates (background / signal), which converts the
    background excess into the signal run's normalisation when both runs share
    the same absolute background coincidence rate. ``clamp=False`` keeps
    the signed difference for :func:`reconstruct`, which clamps after
    rebinning to velocity.
    """
    if not signal.same_binning(background):
        raise ValidationError("signal and background binning differ")
    if signal.normalized is None:
        signal = normalize_g2(signal)
    if background.normalized is None:
        background = normalize_g2(background)
    if weight is None:
        weight = accidental_rate(background) / accidental_rate(signal)
    diff = (signal.normalized - 1.0) - weight * (background.normalized - 1.0)
    if clamp:
        diff = np.clip(diff, 0.0, None)
    return replace(signal, normalized=1.0 + diff)


def reconstruct(hist, d, d_f, edges=None, plateau=DEFAULT_PLATEAU, band=None):
    """Cross-correlation histogram to ``(n_AB(v), rho(v))``; negative excess
    is clamped on the velocity grid."""
    n_tau = correlated_excess(hist, plateau, clamp=False)
    n_v = tau_to_velocity(n_tau, d, edges, clamp=True)
    return n_v, to_atom_pdf(n_v, d_f, band)
