import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import integrate, optimize

from beamcorr import ValidationError
from beamcorr.physics import (
    RB87_GAMMA,
    BeamParameters,
    DeltaVelocityPDF,
    GeometryParameters,
    MaxwellFluxPDF,
    RabiDistribution,
    SelectionParameters,
    flux_for_mean_atom_number,
    flux_velocity_pdf,
    g2_single,
    g2_single_averaged,
    g2_theory,
    mean_atom_number,
    scattering_rate,
    transit_correction,
    two_fiber_theory,
    velocity_center,
)

G = RB87_GAMMA
GEOM = GeometryParameters()
RABI = RabiDistribution(6.0, 1.5)


def oracle_g2(tau, omega, gamma):
    # textbook form, written independently of the implementation
    wg = math.sqrt(omega**2 - gamma**2 / 16)
    a = 0.75 * gamma
    return 1 - math.exp(-a * tau) * (math.cos(wg * tau) + a / wg * math.sin(wg * tau))


class TestFluxPdf:
    def test_zero_velocity(self):
        assert flux_velocity_pdf(0.0, BeamParameters(351.15)) == 0.0

    def test_v0_and_peak_at_373k(self):
        beam = BeamParameters(373.15, atom_mass=1.4431e-25)
        assert beam.v0 == pytest.approx(267, abs=1)
        res = optimize.minimize_scalar(
            lambda v: -flux_velocity_pdf(v, beam), bounds=(50, 800), method="bounded",
            options={"xatol": 1e-6},
        )
        assert res.x == pytest.approx(math.sqrt(1.5) * beam.v0, rel=1e-5)
        assert res.x == pytest.approx(327, abs=1.5)

    @pytest.mark.parametrize("temp", [250.0, 351.15, 500.0])
    def test_normalisation(self, temp):
        beam = BeamParameters(temp)
        val, _ = integrate.quad(lambda v: flux_velocity_pdf(v, beam), 0, 10 * beam.v0,
                                epsabs=0, epsrel=1e-12, limit=200)
        assert val == pytest.approx(1.0, abs=1e-9)

    def test_argmax_on_grid(self):
        beam = BeamParameters(351.15)
        v = np.linspace(0, 1000, 100001)
        assert v[np.argmax(flux_velocity_pdf(v, beam))] == pytest.approx(
            math.sqrt(1.5) * beam.v0, abs=v[1] - v[0]
        )

    def test_negative_velocity_rejected(self):
        with pytest.raises(ValidationError):
            flux_velocity_pdf(-1.0, BeamParameters(351.15))

    def test_sampler_matches_density(self):
        pdf = MaxwellFluxPDF(300.0)
        draws = pdf.sample(np.random.default_rng(0), 200_000)
        assert draws.mean() == pytest.approx(pdf.mean_velocity, rel=5e-3)


class TestG2Single:
    def test_zero_delay(self):
        assert g2_single(0.0, 6 * G, G) == 0.0
        assert g2_single(0.0, 0.1 * G, G) == 0.0

    def test_long_delay(self):
        assert g2_single(200 / G, 6 * G, G) == pytest.approx(1.0, abs=1e-12)

    def test_first_maximum(self):
        wg = math.sqrt(36 - 1 / 16) * G
        t_star = math.pi / wg
        expected = 1 + math.exp(-0.75 * G * t_star)
        assert g2_single(t_star, 6 * G, G) == pytest.approx(expected, abs=1e-12)
        assert expected == pytest.approx(1.675, abs=5e-4)
        # and it is a local maximum
        assert g2_single(t_star * 0.99, 6 * G, G) < expected
        assert g2_single(t_star * 1.01, 6 * G, G) < expected

    @pytest.mark.parametrize("omega", [0.5, 2.0, 6.0, 12.0])
    def test_against_textbook(self, omega):
        tau = np.linspace(0, 20 / G, 101)
        got = g2_single(tau, omega * G, G)
        want = [oracle_g2(t, omega * G, G) for t in tau]
        np.testing.assert_allclose(got, want, atol=1e-12)

    def test_hyperbolic_branch_continuity(self):
        tau = np.linspace(0, 30 / G, 61)
        q = G / 4
        below = g2_single(tau, q * (1 - 1e-6), G)
        above = g2_single(tau, q * (1 + 1e-6), G)
        at = g2_single(tau, q, G)
        np.testing.assert_allclose(below, above, atol=1e-6)
        np.testing.assert_allclose(at, above, atol=1e-6)

    def test_hyperbolic_no_overflow(self):
        vals = g2_single(np.array([1e-3, 1.0]), 0.01 * G, G)
        assert np.all(np.isfinite(vals))
        assert vals[-1] == pytest.approx(1.0)

    @settings(max_examples=60, deadline=None)
    @given(
        tau=st.floats(0, 1e-6),
        omega=st.floats(0.01, 30.0),
    )
    def test_bounded(self, tau, omega):
        val = g2_single(tau, omega * G, G)
        assert -1e-12 <= val <= 2 + 1e-12

    def test_negative_tau_rejected(self):
        with pytest.raises(ValidationError):
            g2_single(-1e-9, 6 * G, G)

    def test_scattering_rate(self):
        assert scattering_rate(6 * G, G) / G == pytest.approx(9 / 18.25)


class TestAveraged:
    def test_degenerate_distribution(self):
        tau = np.linspace(0, 300e-9, 301)
        np.testing.assert_array_equal(
            g2_single_averaged(tau, RabiDistribution(6.0, 0.0), G), g2_single(tau, 6 * G, G)
        )

    def test_zero_delay(self):
        assert g2_single_averaged(0.0, RABI, G) == 0.0

    def test_dephasing_lowers_and_broadens_first_peak(self):
        tau = np.linspace(0, 3e-8, 30001)
        sharp = g2_single(tau, 6 * G, G)
        soft = g2_single_averaged(tau, RABI, G)
        assert soft.max() < 1.675
        assert soft.max() < sharp.max()

        def curvature(y):
            k = np.argmax(y)
            return -(y[k + 50] - 2 * y[k] + y[k - 50]) / (50 * (tau[1] - tau[0])) ** 2

        assert 0 < curvature(soft) < curvature(sharp)

    def test_nodes_normalised(self):
        x, w = RabiDistribution(1.0, 2.0).nodes()
        assert np.all(x > 0)
        assert w.sum() == pytest.approx(1.0)


class TestVelocityCenter:
    def test_zero(self):
        assert velocity_center(SelectionParameters(0.0), 780.24e-9) == 0.0

    @pytest.mark.parametrize("mhz,want", [(-80, 92), (-20, 23)])
    def test_selected_classes(self, mhz, want):
        sel = SelectionParameters(2 * math.pi * mhz * 1e6, math.radians(47))
        assert velocity_center(sel, 780.24e-9) == pytest.approx(want, rel=0.01)

    def test_positive_detuning_rejected(self):
        with pytest.raises(ValidationError):
            velocity_center(SelectionParameters(1.0), 780e-9)


class TestTransitCorrection:
    def test_zero_delay(self):
        assert transit_correction(0.0, GEOM, BeamParameters(351.15)) == 1.0

    @settings(max_examples=40, deadline=None)
    @given(v=st.floats(1.0, 1000.0), tau=st.floats(0.0, 1e-5))
    def test_delta_pdf_closed_form(self, v, tau):
        got = transit_correction(tau, GEOM, pdf=DeltaVelocityPDF(v))
        assert got == pytest.approx(max(0.0, 1 - v * tau / GEOM.fov_length), abs=1e-12)

    def test_monotone_and_bounded(self):
        tau = np.linspace(0, 3e-6, 61)
        xi = transit_correction(tau, GEOM, BeamParameters(351.15))
        assert np.all(np.diff(xi) <= 1e-15)
        assert np.all((xi >= 0) & (xi <= 1))
        assert transit_correction(1e-3, GEOM, BeamParameters(351.15)) < 1e-6

    def test_slow_atoms_reach_one_microsecond(self):
        assert transit_correction(1e-6, GEOM, BeamParameters(351.15)) > 0

    def test_exact_matches_quadrature(self):
        beam = BeamParameters(351.15)
        tau = np.linspace(0, 2e-6, 41)
        np.testing.assert_allclose(
            transit_correction(tau, GEOM, beam, method="exact"),
            transit_correction(tau, GEOM, beam),
            atol=1e-8,
        )


class TestMeanAtomNumber:
    def test_zero_flux(self):
        assert mean_atom_number(BeamParameters(351.15), GEOM) == 0.0

    def test_delta_pdf(self):
        beam = BeamParameters(351.15, flux=2e6)
        assert mean_atom_number(beam, GEOM, pdf=DeltaVelocityPDF(250.0)) == pytest.approx(
            2e6 * 25e-6 / 250.0, rel=1e-12
        )

    def test_linear_in_length(self):
        beam = BeamParameters(351.15, flux=1e6)
        one = mean_atom_number(beam, GEOM)
        two = mean_atom_number(beam, GeometryParameters(fov_length=50e-6))
        assert two == 2 * one

    def test_inverse(self):
        beam = BeamParameters(351.15)
        flux = flux_for_mean_atom_number(0.138, beam, GEOM)
        assert mean_atom_number(BeamParameters(351.15, flux=flux), GEOM) == pytest.approx(0.138)


class TestG2Theory:
    beam = BeamParameters(351.15)

    def test_zero_delay_is_one(self):
        assert g2_theory(0.0, 0.138, GEOM, self.beam, RABI, G) == 1.0

    def test_long_delay(self):
        assert g2_theory(1e-3, 0.138, GEOM, self.beam, RABI, G) == pytest.approx(1.0, abs=1e-6)

    def test_peak_near_ten_at_twelve_ns(self):
        tau = np.linspace(1e-9, 40e-9, 391)
        g = g2_theory(tau, 0.138, GEOM, self.beam, RABI, G)
        k = np.argmax(g)
        assert 9 < g[k] < 11
        assert 10e-9 <= tau[k] <= 14e-9

    def test_separable_in_mean_n(self):
        tau = np.linspace(0, 200e-9, 41)
        a = (g2_theory(tau, 0.138, GEOM, self.beam, RABI, G) - 1) * 0.138
        b = (g2_theory(tau, 0.069, GEOM, self.beam, RABI, G) - 1) * 0.069
        np.testing.assert_allclose(a, b, rtol=1e-12, atol=1e-14)

    def test_mean_n_must_be_positive(self):
        with pytest.raises(ValidationError):
            g2_theory(1e-8, 0.0, GEOM, self.beam, RABI, G)


class TestTwoFiber:
    beam = BeamParameters(343.15)

    def test_long_delay(self):
        assert two_fiber_theory(1.0, GEOM, self.beam, 0.1) == pytest.approx(1.0, abs=1e-12)

    def test_scaling_in_mean_n(self):
        tau = np.linspace(50e-9, 5e-6, 50)
        a = two_fiber_theory(tau, GEOM, self.beam, 0.1) - 1
        b = two_fiber_theory(tau, GEOM, self.beam, 0.2) - 1
        np.testing.assert_allclose(a, 2 * b, rtol=1e-12)

    def test_zero_delay_rejected(self):
        with pytest.raises(ValidationError):
            two_fiber_theory(0.0, GEOM, self.beam, 0.1)


def test_parameter_invariants():
    with pytest.raises(ValidationError):
        BeamParameters(-1.0)
    with pytest.raises(ValidationError):
        GeometryParameters(fiber_fov_diameter=60e-6, fiber_separation=55e-6)
    with pytest.raises(ValidationError):
        SelectionParameters(-1.0, angle=math.pi / 2)
    with pytest.raises(ValidationError):
        RabiDistribution(0.0)
    draws = RabiDistribution(0.5, 2.0).sample(np.random.default_rng(1), 10_000)
    assert np.all(draws > 0)
