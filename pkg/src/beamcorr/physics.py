"""Closed-form photon statistics of a thermal atomic beam.

Everything here is a pure function of immutable parameter objects. Angular
frequencies are in rad/s, lengths in m, velocities in m/s, times in s.

The velocity distribution enters through a *velocity pdf object* (see
:class:`MaxwellFluxPDF`, :class:`DeltaVelocityPDF`, :class:`SelectedFluxPDF`)
so the same transit-time machinery serves the thermal beam, velocity-selected
sub-ensembles and single-velocity test ensembles.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
from scipy import integrate, special

from ._validation import check_scalar
from .errors import ValidationError

BOLTZMANN = 1.380649e-23  # J/K
ATOMIC_MASS_UNIT = 1.66053906660e-27  # kg
RB87_MASS = 86.909180527 * ATOMIC_MASS_UNIT
RB87_GAMMA = 2 * math.pi * 6.0666e6  # D2 natural linewidth, rad/s
RB87_D2_WAVELENGTH = 780.241e-9

_QUAD_EPSREL = 1e-9
_QUAD_LIMIT = 200
_HERMITE_NODES = 64


# ---------------------------------------------------------------------------
# parameter containers


@dataclass(frozen=True)
class BeamParameters:
    """Effusive beam: temperature (K), atom mass (kg), flux (atoms/s) and the
    transverse velocity half-width (m/s)."""

    temperature: float
    atom_mass: float = RB87_MASS
    flux: float = 0.0
    transverse_spread: float = 4.0

    def __post_init__(self):
        check_scalar(self.temperature, "temperature", lo=0, lo_open=True)
        check_scalar(self.atom_mass, "atom_mass", lo=0, lo_open=True)
        check_scalar(self.flux, "flux", lo=0)
        check_scalar(self.transverse_spread, "transverse_spread", lo=0)

    @property
    def v0(self):
        """Most probable speed in the source, sqrt(2 kB T / m)."""
        return math.sqrt(2 * BOLTZMANN * self.temperature / self.atom_mass)

    @property
    def pdf(self):
        return MaxwellFluxPDF(self.v0)


@dataclass(frozen=True)
class OpticalParameters:
    gamma: float = RB87_GAMMA
    rabi_mean: float = 6 * RB87_GAMMA
    rabi_sigma: float = 1.5 * RB87_GAMMA
    wavelength: float = RB87_D2_WAVELENGTH
    beam_waist_radius: float = 60e-6

    def __post_init__(self):
        check_scalar(self.gamma, "gamma", lo=0, lo_open=True)
        check_scalar(self.rabi_mean, "rabi_mean", lo=0, lo_open=True)
        check_scalar(self.rabi_sigma, "rabi_sigma", lo=0)
        check_scalar(self.wavelength, "wavelength", lo=0, lo_open=True)
        check_scalar(self.beam_waist_radius, "beam_waist_radius", lo=0, lo_open=True)

    @property
    def rabi(self):
        return RabiDistribution(self.rabi_mean / self.gamma, self.rabi_sigma / self.gamma)


@dataclass(frozen=True)
class GeometryParameters:
    """Field-of-view length ``L`` (single fiber), fiber FOV diameter ``d_f``
    and fiber separation ``d``, all measured in the plane of the atoms."""

    fov_length: float = 25e-6
    fiber_fov_diameter: float = 25e-6
    fiber_separation: float = 55e-6

    def __post_init__(self):
        for name in ("fov_length", "fiber_fov_diameter", "fiber_separation"):
            check_scalar(getattr(self, name), name, lo=0, lo_open=True)
        if self.fiber_fov_diameter >= self.fiber_separation:
            raise ValidationError(
                "fiber_fov_diameter must be smaller than fiber_separation "
                f"({self.fiber_fov_diameter} >= {self.fiber_separation})"
            )


@dataclass(frozen=True)
class SelectionParameters:
    """Velocity-selective repump: detuning (rad/s, <= 0), angle to the beam
    (rad) and effective Lorentzian HWHM of the selection (rad/s)."""

    detuning: float
    angle: float = math.radians(47)
    linewidth: float = 2 * math.pi * 6e6

    def __post_init__(self):
        check_scalar(self.detuning, "detuning")
        check_scalar(self.angle, "angle", lo=0, hi=math.pi / 2, lo_open=True, hi_open=True)
        check_scalar(self.linewidth, "linewidth", lo=0, lo_open=True)


@dataclass(frozen=True)
class RabiDistribution:
    """Gaussian spread of Rabi frequencies in units of Gamma, truncated to
    positive values."""

    mean: float
    sigma: float = 0.0
    n_nodes: int = field(default=_HERMITE_NODES, compare=False)

    def __post_init__(self):
        check_scalar(self.mean, "rabi mean", lo=0, lo_open=True)
        check_scalar(self.sigma, "rabi sigma", lo=0)

    def nodes(self):
        """Quadrature nodes (units of Gamma) and weights summing to one."""
        if self.sigma == 0:
            return np.array([self.mean]), np.array([1.0])
        x, w = _hermite(self.n_nodes)
        omega = self.mean + math.sqrt(2) * self.sigma * x
        keep = omega > 0
        w = w[keep]
        return omega[keep], w / w.sum()

    def sample(self, rng, size):
        """Draw ``size`` values (units of Gamma), redrawing non-positive ones."""
        out = self.mean + self.sigma * rng.standard_normal(size)
        bad = out <= 0
        while np.any(bad):
            out[bad] = self.mean + self.sigma * rng.standard_normal(int(bad.sum()))
            bad = out <= 0
        return out


_HERMITE_CACHE = {}


def _hermite(n):
    if n not in _HERMITE_CACHE:
        _HERMITE_CACHE[n] = np.polynomial.hermite.hermgauss(n)
    return _HERMITE_CACHE[n]


# ---------------------------------------------------------------------------
# velocity pdfs


class VelocityPDF:
    """Interface for flux velocity distributions.

    Subclasses implement :meth:`expect`; :meth:`density` is optional (a
    discrete ensemble has none).
    """

    def expect(self, func, upper=math.inf):
        """Return the integral of ``func(v) * rho(v)`` over ``[0, upper]``."""
        raise NotImplementedError

    def density(self, v):
        raise NotImplementedError(f"{type(self).__name__} has no density")

    @cached_property
    def mean_inverse_velocity(self):
        return self.expect(lambda v: 1.0 / v)


class MaxwellFluxPDF(VelocityPDF):
    """Flux-weighted Maxwell-Boltzmann speed distribution
    ``rho(v) = 2 v^3 / v0^4 * exp(-v^2 / v0^2)``."""

    def __init__(self, v0):
        self.v0 = check_scalar(v0, "v0", lo=0, lo_open=True)

    def __repr__(self):
        return f"MaxwellFluxPDF(v0={self.v0!r})"

    def density(self, v):
        v = np.asarray(v, dtype=float)
        x = v / self.v0
        return 2 * x**3 / self.v0 * np.exp(-(x**2))

    def expect(self, func, upper=math.inf):
        upper = min(upper, 8 * self.v0)
        if upper <= 0:
            return 0.0
        val, _ = integrate.quad(
            lambda v: func(v) * self.density(v),
            0.0,
            upper,
            epsabs=0.0,
            epsrel=_QUAD_EPSREL,
            limit=_QUAD_LIMIT,
        )
        return val

    @property
    def peak_velocity(self):
        return math.sqrt(1.5) * self.v0

    @property
    def mean_velocity(self):
        return 0.75 * math.sqrt(math.pi) * self.v0

    def sample(self, rng, size):
        # v^2 / v0^2 is Gamma(2, 1) distributed under the flux pdf
        return self.v0 * np.sqrt(rng.gamma(2.0, 1.0, size))

    def transit_correction_exact(self, tau, fov_length):
        """Closed form of the velocity-averaged transit factor for this pdf.

        With ``u = L / (v0 tau)``::

            xi = erf(u) - 2 (1 - exp(-u^2)) / (sqrt(pi) u)
        """
        tau = np.asarray(tau, dtype=float)
        out = np.ones_like(tau)
        pos = tau > 0
        u = fov_length / (self.v0 * tau[pos])
        out[pos] = special.erf(u) - 2 * (-np.expm1(-(u**2))) / (math.sqrt(math.pi) * u)
        return out


class DeltaVelocityPDF(VelocityPDF):
    """Every atom moves at the same speed; a test ensemble."""

    def __init__(self, velocity):
        self.velocity = check_scalar(velocity, "velocity", lo=0, lo_open=True)

    def __repr__(self):
        return f"DeltaVelocityPDF({self.velocity!r})"

    def expect(self, func, upper=math.inf):
        return float(func(self.velocity)) if self.velocity <= upper else 0.0

    def sample(self, rng, size):
        return np.full(size, self.velocity)


class SelectedFluxPDF(VelocityPDF):
    """A base flux pdf reweighted by a velocity-dependent acceptance and
    renormalised."""

    def __init__(self, base, weight, v_max=None, points=None):
        self.base = base
        self.weight = weight
        self.v_max = v_max if v_max is not None else 8 * getattr(base, "v0", 1e3)
        self.points = points
        self.norm = self._integrate(lambda v: np.ones_like(v), self.v_max)
        if not self.norm > 0:
            raise ValidationError("selection weight removes every velocity")

    def _integrate(self, func, upper):
        upper = min(upper, self.v_max)
        if upper <= 0:
            return 0.0
        pts = None
        if self.points is not None:
            pts = [p for p in self.points if 0 < p < upper] or None
        val, _ = integrate.quad(
            lambda v: func(v) * self.base.density(v) * self.weight(v),
            0.0,
            upper,
            points=pts,
            epsabs=0.0,
            epsrel=_QUAD_EPSREL,
            limit=_QUAD_LIMIT,
        )
        return val

    def density(self, v):
        v = np.asarray(v, dtype=float)
        return self.base.density(v) * self.weight(v) / self.norm

    def expect(self, func, upper=math.inf):
        return self._integrate(func, upper) / self.norm


def _resolve_pdf(beam, pdf):
    if pdf is not None:
        return pdf
    if beam is None:
        raise ValidationError("either beam or pdf is required")
    return beam.pdf


# ---------------------------------------------------------------------------
# operations


def flux_velocity_pdf(v, beam):
    """Flux speed density ``rho(v)`` in s/m for the beam's temperature."""
    v = np.asarray(v, dtype=float)
    if np.any(v < 0) or np.any(np.isnan(v)):
        raise ValidationError("velocity must be non-negative")
    return beam.pdf.density(v)


def scattering_rate(omega, gamma):
    """Steady-state photon emission rate of a resonantly driven two-level atom."""
    omega = np.asarray(omega, dtype=float)
    return gamma * (omega**2 / 4) / (omega**2 / 2 + gamma**2 / 4)


def g2_single(tau, omega, gamma):
    """Intensity correlation of one stationary, resonantly driven two-level atom.

    ``1 - exp(-3 gamma tau / 4) (cos(W tau) + 3 gamma / (4 W) sin(W tau))``
    with ``W = sqrt(omega^2 - gamma^2 / 16)``; for ``omega < gamma / 4`` the
    overdamped (hyperbolic) continuation is used.
    """
    tau = np.asarray(tau, dtype=float)
    omega = np.asarray(omega, dtype=float)
    if np.any(tau < 0):
        raise ValidationError("tau must be non-negative")
    tau, omega = np.broadcast_arrays(tau, omega)
    shape = tau.shape
    tau, omega = np.atleast_1d(tau), np.atleast_1d(omega)
    a = 0.75 * gamma
    w2 = omega**2 - (gamma / 4) ** 2
    w = np.sqrt(np.abs(w2))
    x = w * tau
    damp = np.exp(-a * tau)
    # np.sinc(x / pi) = sin(x) / x, exact at x = 0
    osc = damp * (np.cos(x) + a * tau * np.sinc(x / np.pi))
    result = 1.0 - osc
    over = w2 < 0
    if np.any(over):
        # exponents combined so that cosh/sinh cannot overflow at long delays
        wo, to, xo = w[over], tau[over], x[over]
        ep = np.exp((wo - a) * to)
        em = np.exp(-(wo + a) * to)
        small = xo < 1e-6
        sinh_w = np.where(
            small,
            to * np.exp(-a * to) * (1 + xo**2 / 6),
            (ep - em) / (2 * np.where(small, 1.0, wo)),
        )
        result[over] = 1.0 - ((ep + em) / 2 + a * sinh_w)
    return result.reshape(shape)


def g2_single_averaged(tau, rabi, gamma):
    """``g2_single`` averaged over the truncated-Gaussian Rabi distribution."""
    tau = np.asarray(tau, dtype=float)
    omega, weight = rabi.nodes()
    vals = g2_single(tau[..., None], omega * gamma, gamma)
    return vals @ weight


def velocity_center(sel, wavelength):
    """Centre of the selected velocity class, ``-detuning / (k cos(angle))``."""
    if sel.detuning > 0:
        raise ValidationError("positive repump detuning selects no forward velocity class")
    k = 2 * math.pi / wavelength
    return -sel.detuning / (k * math.cos(sel.angle))


def transit_correction(tau, geometry, beam=None, pdf=None, method="quad"):
    """Velocity-averaged probability that an atom is still in the field of view
    a delay ``tau`` after emitting, weighted by ``rho(v) / v``.

    ``method="quad"`` integrates numerically for any pdf; ``"exact"`` uses the
    closed form available for :class:`MaxwellFluxPDF`.
    """
    pdf = _resolve_pdf(beam, pdf)
    tau = np.asarray(tau, dtype=float)
    if np.any(tau < 0):
        raise ValidationError("tau must be non-negative")
    L = geometry.fov_length
    if method == "exact":
        if not isinstance(pdf, MaxwellFluxPDF):
            raise ValidationError("exact transit correction needs a MaxwellFluxPDF")
        return pdf.transit_correction_exact(tau, L)
    if method != "quad":
        raise ValidationError(f"unknown method {method!r}")
    denom = pdf.mean_inverse_velocity
    out = np.empty(tau.shape)
    flat_tau = tau.ravel()
    flat_out = out.ravel()
    for i, t in enumerate(flat_tau):
        if t == 0:
            flat_out[i] = 1.0
            continue
        num = pdf.expect(lambda v, t=t: max(0.0, 1.0 - v * t / L) / v, upper=L / t)
        flat_out[i] = num / denom
    return out.reshape(tau.shape) if tau.ndim else float(out)


def mean_atom_number(beam, geometry, pdf=None, length=None):
    """Time-averaged number of atoms inside a window of ``length`` (default
    the FOV length) for the beam flux."""
    pdf = _resolve_pdf(beam, pdf)
    length = geometry.fov_length if length is None else length
    return beam.flux * length * pdf.mean_inverse_velocity


def flux_for_mean_atom_number(mean_n, beam, geometry, pdf=None, length=None):
    """Inverse of :func:`mean_atom_number`: the flux giving ``mean_n`` atoms."""
    check_scalar(mean_n, "mean_n", lo=0)
    pdf = _resolve_pdf(beam, pdf)
    length = geometry.fov_length if length is None else length
    return mean_n / (length * pdf.mean_inverse_velocity)


def g2_theory(tau, mean_n, geometry, beam, rabi, gamma, pdf=None, method="quad"):
    """Transit-corrected g2 of a Poissonian thermal beam.

    ``g2 = xi(tau) * <g2_single>_Omega(tau) / mean_n + 1``; negative delays are
    mapped to ``|tau|`` since the autocorrelation is symmetric.
    """
    check_scalar(mean_n, "mean_n", lo=0, lo_open=True)
    tau = np.abs(np.asarray(tau, dtype=float))
    xi = transit_correction(tau, geometry, beam, pdf=pdf, method=method)
    return xi * g2_single_averaged(tau, rabi, gamma) / mean_n + 1.0


def two_fiber_theory(tau, geometry, beam, mean_n, pdf=None):
    """Normalised cross-correlation between two displaced fibers,
    ``1 + (d_f/d) rho(d/tau) / (mean_n * <1/v>)``."""
    check_scalar(mean_n, "mean_n", lo=0, lo_open=True)
    pdf = _resolve_pdf(beam, pdf)
    tau = np.asarray(tau, dtype=float)
    if np.any(tau <= 0):
        raise ValidationError("two-fiber theory needs tau > 0")
    d, df = geometry.fiber_separation, geometry.fiber_fov_diameter
    return 1.0 + (df / d) * pdf.density(d / tau) / (mean_n * pdf.mean_inverse_velocity)
