"""Least-squares fits of the transit-corrected g2 model.

Free parameters are the mean atom number, the field-of-view length and the
mean and spread of the Rabi frequency (units of Gamma). The model is averaged
over each histogram bin; the transit factor uses the closed form for a
Maxwell flux distribution, so one objective evaluation costs a few
milliseconds.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import optimize, special
from sklearn.base import BaseEstimator, RegressorMixin
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from .correlator import CoincidenceHistogram
from .detection import PS
from .errors import ValidationError
from .physics import BeamParameters, RabiDistribution, RB87_GAMMA, RB87_MASS, g2_single_averaged

PARAMS = ("mean_n", "fov_length", "rabi_mean", "rabi_sigma")
# fov_length in um inside the optimiser so all parameters are O(1)
_SCALE = np.array([1.0, 1e-6, 1.0, 1.0])
DEFAULT_BOUNDS = {
    "mean_n": (1e-3, 5.0),
    "fov_length": (5e-6, 100e-6),
    "rabi_mean": (0.5, 20.0),
    "rabi_sigma": (0.0, 5.0),
}
DEFAULT_INIT = {"mean_n": None, "fov_length": 25e-6, "rabi_mean": 6.0, "rabi_sigma": 1.5}
MAX_ITER = 500
XTOL = 1e-6
_SIMPSON = np.array([1.0, 4.0, 2.0, 4.0, 1.0]) / 12.0
_SIMPSON_X = np.linspace(0.0, 1.0, 5)


@dataclass
class FitResult:
    """Fitted parameters; ``rabi_mean`` and ``rabi_sigma`` in units of Gamma."""

    mean_n: float
    fov_length: float
    rabi_mean: float
    rabi_sigma: float
    residual_rms: float = math.nan
    chi2: float = math.nan
    iterations: int = 0
    converged: bool = False
    parameter_bounds_hit: dict = field(default_factory=dict)
    fixed: tuple = ()
    n_points: int = 0
    message: str = ""

    def params(self):
        return {p: getattr(self, p) for p in PARAMS}


class G2Model:
    """Bin-averaged ``1 + xi(tau) <g2_single>(tau) / mean_n`` for a Maxwell beam."""

    def __init__(self, beam, gamma, tau_lo, tau_hi=None):
        self.v0 = beam.v0
        self.gamma = float(gamma)
        tau_lo = np.asarray(tau_lo, dtype=float)
        tau_hi = tau_lo if tau_hi is None else np.asarray(tau_hi, dtype=float)
        if tau_lo.shape != tau_hi.shape:
            raise ValidationError("bin edges must have matching shapes")
        # quadrature points per bin; zero-width bins collapse to a point
        pts = tau_lo[:, None] + (tau_hi - tau_lo)[:, None] * _SIMPSON_X
        self.tau = np.abs(pts)
        self.weights = np.where((tau_hi > tau_lo)[:, None], _SIMPSON, 0.0)
        self.weights[tau_hi == tau_lo, 0] = 1.0

    def xi(self, fov_length):
        u = np.full(self.tau.shape, np.inf)
        pos = self.tau > 0
        u[pos] = fov_length / (self.v0 * self.tau[pos])
        out = np.ones_like(self.tau)
        up = u[pos]
        out[pos] = special.erf(up) - 2 * (-np.expm1(-(up**2))) / (math.sqrt(math.pi) * up)
        return out

    def __call__(self, mean_n, fov_length, rabi_mean, rabi_sigma):
        rabi = RabiDistribution(rabi_mean, rabi_sigma)
        g2s = g2_single_averaged(self.tau, rabi, self.gamma)
        vals = self.xi(fov_length) * g2s / mean_n + 1.0
        return np.sum(vals * self.weights, axis=1)


class _Problem:
    def __init__(self, model, y, sigma, fixed, bounds):
        self.model = model
        self.y = y
        self.sigma = sigma
        self.fixed = dict(fixed)
        self.free = [p for p in PARAMS if p not in self.fixed]
        if not self.free:
            raise ValidationError("all parameters are fixed")
        idx = [PARAMS.index(p) for p in self.free]
        self.scale = _SCALE[idx]
        self.lo = np.array([bounds[p][0] for p in self.free]) / self.scale
        self.hi = np.array([bounds[p][1] for p in self.free]) / self.scale

    def full(self, x):
        out = dict(self.fixed)
        out.update(zip(self.free, np.asarray(x) * self.scale))
        return out

    def residuals(self, x):
        p = self.full(np.clip(x, self.lo, self.hi))
        if p["mean_n"] <= 0 or p["rabi_mean"] <= 0 or p["fov_length"] <= 0:
            return np.full(self.y.shape, 1e6)
        return (self.model(**p) - self.y) / self.sigma

    def chi2(self, x):
        r = self.residuals(x)
        return float(r @ r)


def _window(hist, tau_min, min_counts):
    if hist.normalized is None:
        raise ValidationError("fit needs a normalised histogram")
    left, right = hist.edges[:-1], hist.edges[1:]
    counts = np.asarray(hist.counts, dtype=float)
    y = np.asarray(hist.normalized, dtype=float)
    keep = ((left >= tau_min - 1e-15) | (right <= -tau_min + 1e-15)) & (counts >= min_counts)
    keep &= counts > 0
    if keep.sum() < 5:
        raise ValidationError("too few usable bins in the fit window")
    sigma = y[keep] / np.sqrt(counts[keep])
    return left[keep], right[keep], y[keep], sigma


def _check_init(init, bounds, fixed):
    for p in PARAMS:
        if p in fixed:
            continue
        lo, hi = bounds[p]
        if not lo <= init[p] <= hi:
            raise ValidationError(f"initial {p} = {init[p]} outside bounds [{lo}, {hi}]")


def _guess_mean_n(y, model):
    """Amplitude guess from the peak excess at the default shape parameters."""
    shape = model(1.0, DEFAULT_INIT["fov_length"], 6.0, 1.5) - 1.0
    excess = y - 1.0
    k = np.argmax(shape)
    if excess[k] <= 0:
        return 1.0
    return float(np.clip(shape[k] / excess[k], *DEFAULT_BOUNDS["mean_n"]))


def _solve(model, y, sigma, beam, init=None, bounds=None, fix=None):
    bounds = {**DEFAULT_BOUNDS, **(bounds or {})}
    fixed = dict(fix or {})
    for p in fixed:
        if p not in PARAMS:
            raise ValidationError(f"unknown parameter {p!r}; expected one of {PARAMS}")
    if np.max((y - 1.0) / sigma) < 3.0:
        raise ValidationError("no correlation signal above noise (flat data)")
    start = {**DEFAULT_INIT, **(init or {})}
    if start["mean_n"] is None:
        start["mean_n"] = _guess_mean_n(y, model)
    _check_init(start, bounds, fixed)
    prob = _Problem(model, y, sigma, fixed, bounds)
    x0 = np.array([start[p] for p in prob.free]) / prob.scale
    box = list(zip(prob.lo, prob.hi))

    iterations = 0
    x = x0
    for _ in range(2):  # simplex, then a restart from its best point
        res = optimize.minimize(
            prob.chi2,
            x,
            method="Nelder-Mead",
            bounds=box,
            options={"maxiter": MAX_ITER, "xatol": 1e-8, "fatol": 1e-10, "adaptive": True},
        )
        iterations += res.nit
        x = res.x
    ls = optimize.least_squares(
        prob.residuals,
        np.clip(x, prob.lo, prob.hi),
        bounds=(prob.lo, prob.hi),
        method="trf",
        x_scale="jac",
        xtol=1e-14,
        ftol=1e-14,
        gtol=1e-14,
        max_nfev=MAX_ITER,
    )
    iterations += ls.nfev
    x_best = ls.x if prob.chi2(ls.x) <= prob.chi2(x) else x
    rel_change = np.max(np.abs(x_best - x) / np.maximum(np.abs(x_best), 1e-12))
    converged = bool(ls.status > 0) or rel_change < XTOL
    params = prob.full(x_best)
    r = prob.residuals(x_best)
    span = prob.hi - prob.lo
    hit = {}
    for i, p in enumerate(prob.free):
        tol = 1e-6 * span[i]
        hit[p] = bool(x_best[i] - prob.lo[i] < tol or prob.hi[i] - x_best[i] < tol)
    result = FitResult(
        **{p: float(params[p]) for p in PARAMS},
        residual_rms=float(np.sqrt(np.mean((model(**params) - y) ** 2))),
        chi2=float(r @ r),
        iterations=int(iterations),
        converged=converged,
        parameter_bounds_hit=hit,
        fixed=tuple(sorted(fixed)),
        n_points=int(y.size),
        message=str(ls.message),
    )
    return result, prob


def fit_g2(
    hist,
    beam,
    gamma=RB87_GAMMA,
    init=None,
    bounds=None,
    fix=None,
    tau_min=2e-9,
    min_counts=10,
):
    """Fit the transit-corrected g2 model to a normalised pair histogram.

    Bins are used when ``|tau| >= tau_min`` and they hold at least
    ``min_counts`` counts; each is weighted by its Poisson error
    ``g2 / sqrt(counts)``. ``init``, ``bounds`` and ``fix`` are mappings
    keyed by :data:`PARAMS` (``fov_length`` in m, Rabi values in Gamma).
    Non-convergence is reported through ``FitResult.converged``.
    """
    lo, hi, y, sigma = _window(hist, tau_min, min_counts)
    model = G2Model(beam, gamma, lo, hi)
    result, _ = _solve(model, y, sigma, beam, init, bounds, fix)
    return result


def objective(hist, beam, params, gamma=RB87_GAMMA, tau_min=2e-9, min_counts=10):
    """Weighted sum of squared residuals at ``params`` (a mapping)."""
    lo, hi, y, sigma = _window(hist, tau_min, min_counts)
    model = G2Model(beam, gamma, lo, hi)
    r = (model(**{p: params[p] for p in PARAMS}) - y) / sigma
    return float(r @ r)


def profile_objective(hist, beam, result, param_name, grid, gamma=RB87_GAMMA, **window):
    """Objective along ``param_name`` with the other parameters held at
    ``result``'s values."""
    if param_name not in PARAMS:
        raise ValidationError(f"unknown parameter {param_name!r}")
    base = result.params()
    out = np.empty(len(grid))
    for i, value in enumerate(grid):
        out[i] = objective(hist, beam, {**base, param_name: value}, gamma, **window)
    return out


def relative_gradient(hist, beam, result, gamma=RB87_GAMMA, step=1e-4, **window):
    """Central-difference gradient of the objective with respect to the log of
    each free parameter, divided by the objective value."""
    base = result.params()
    f0 = objective(hist, beam, base, gamma, **window)
    grad = {}
    for p in PARAMS:
        if p in result.fixed or base[p] == 0:
            continue
        up = objective(hist, beam, {**base, p: base[p] * math.exp(step)}, gamma, **window)
        dn = objective(hist, beam, {**base, p: base[p] * math.exp(-step)}, gamma, **window)
        grad[p] = (up - dn) / (2 * step) / f0
    return grad


def synthetic_histogram(
    params,
    beam,
    gamma=RB87_GAMMA,
    bin_width=2e-9,
    tau_max=400e-9,
    noise=0.0,
    rng=None,
):
    """Normalised histogram following the model exactly, with optional
    multiplicative Gaussian noise. Counts are set so that the Poisson weights
    equal the noise level (``noise=0`` uses 1e6 counts per bin)."""
    w = int(round(bin_width / PS))
    n = int(round(tau_max / bin_width))
    edges = np.arange(n + 1) * bin_width
    model = G2Model(beam, gamma, edges[:-1], edges[1:])
    g2 = model(**{p: params[p] for p in PARAMS})
    if noise > 0:
        if rng is None:
            raise ValidationError("noisy synthetic data needs an rng")
        g2 = g2 * (1.0 + noise * rng.standard_normal(n))
        counts = np.full(n, int(round(1.0 / noise**2)))
    else:
        counts = np.full(n, 10**6)
    return CoincidenceHistogram(w, 0, counts, 0, 0, 0.0, normalized=g2, norm_method="synthetic")


class G2Fitter(BaseEstimator, RegressorMixin):
    """Estimator interface to the g2 fit.

    ``X`` holds delays (s) as a single column, ``y`` the normalised g2 and
    ``sample_weight`` the raw pair counts per bin (default: equal weights).
    With ``bin_width`` set, the model is averaged over ``[tau, tau + bin_width)``.
    """

    def __init__(
        self,
        temperature=351.15,
        atom_mass=RB87_MASS,
        gamma=RB87_GAMMA,
        mean_n=None,
        fov_length=25e-6,
        rabi_mean=6.0,
        rabi_sigma=1.5,
        fix=None,
        bin_width=None,
    ):
        self.temperature = temperature
        self.atom_mass = atom_mass
        self.gamma = gamma
        self.mean_n = mean_n
        self.fov_length = fov_length
        self.rabi_mean = rabi_mean
        self.rabi_sigma = rabi_sigma
        self.fix = fix
        self.bin_width = bin_width

    def _beam(self):
        return BeamParameters(self.temperature, self.atom_mass)

    def _model(self, tau):
        hi = tau if self.bin_width is None else tau + self.bin_width
        return G2Model(self._beam(), self.gamma, tau, hi)

    def fit(self, X, y, sample_weight=None):
        X, y = check_X_y(X, y, ensure_min_samples=5)
        if X.shape[1] != 1:
            raise ValidationError("X must have a single column of delays")
        tau = X[:, 0]
        if sample_weight is None:
            sigma = np.full(y.shape, max(np.std(y), 1e-12) * 1e-2)
        else:
            counts = np.asarray(sample_weight, dtype=float)
            if counts.shape != y.shape or np.any(counts <= 0):
                raise ValidationError("sample_weight must be positive counts, one per sample")
            sigma = np.abs(y) / np.sqrt(counts)
        init = {
            "mean_n": self.mean_n,
            "fov_length": self.fov_length,
            "rabi_mean": self.rabi_mean,
            "rabi_sigma": self.rabi_sigma,
        }
        result, _ = _solve(self._model(tau), y, sigma, self._beam(), init, None, self.fix)
        self.result_ = result
        self.mean_n_ = result.mean_n
        self.fov_length_ = result.fov_length
        self.rabi_mean_ = result.rabi_mean
        self.rabi_sigma_ = result.rabi_sigma
        self.n_features_in_ = 1
        return self

    def predict(self, X):
        check_is_fitted(self, "result_")
        X = check_array(X)
        return self._model(X[:, 0])(**self.result_.params())
