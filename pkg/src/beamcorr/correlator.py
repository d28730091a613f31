"""Pair and triple coincidence histograms from time-tag streams.

All arithmetic is on integer picoseconds, so the streaming sweep, its
chunked-parallel variant and the brute-force oracle agree bin for bin.
Bins are half-open, ``[lo + k*w, lo + (k+1)*w)``, and ``lo`` must be a
multiple of the bin width so that zero delay sits on a bin edge.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace

import numpy as np
from numba import njit

from .detection import PS
from .errors import ValidationError

BRUTE_FORCE_LIMIT = 10**8


def _ps(x, name):
    v = round(float(x) / PS)
    if not math.isclose(v * PS, float(x), rel_tol=1e-9, abs_tol=1e-15):
        raise ValidationError(f"{name} must be a whole number of picoseconds")
    return int(v)


def _binning(bin_width, tau_range):
    w = _ps(bin_width, "bin_width")
    if w <= 0:
        raise ValidationError("bin_width must be positive")
    lo, hi = (_ps(t, "tau_range") for t in tau_range)
    if hi <= lo:
        raise ValidationError("tau_range must be increasing")
    if lo % w or (hi - lo) % w:
        raise ValidationError("tau_range ends must lie on multiples of bin_width")
    return w, lo, (hi - lo) // w


def _check_pair(a, b):
    if a.resolution_ps != b.resolution_ps:
        raise ValidationError(
            f"resolution mismatch: {a.resolution_ps} ps vs {b.resolution_ps} ps"
        )


@dataclass
class CoincidenceHistogram:
    """Counts of pairs ``(t_a, t_b)`` by delay ``t_b - t_a``.

    ``normalized`` is filled by :func:`normalize_g2`.
    """

    bin_width_ps: int
    tau_min_ps: int
    counts: np.ndarray
    total_a: int
    total_b: int
    duration: float
    normalized: np.ndarray | None = None
    norm_method: str | None = None

    def __post_init__(self):
        self.counts = np.asarray(self.counts)
        if np.any(self.counts < 0):
            raise ValidationError("counts must be non-negative")

    @property
    def bin_width(self):
        return self.bin_width_ps * PS

    @property
    def tau_min(self):
        return self.tau_min_ps * PS

    @property
    def tau_max(self):
        return (self.tau_min_ps + self.bin_width_ps * self.counts.shape[0]) * PS

    @property
    def edges(self):
        return (self.tau_min_ps + self.bin_width_ps * np.arange(self.counts.shape[0] + 1)) * PS

    @property
    def left(self):
        return self.edges[:-1]

    @property
    def centers(self):
        e = self.edges
        return 0.5 * (e[:-1] + e[1:])

    def same_binning(self, other):
        return (
            self.bin_width_ps == other.bin_width_ps
            and self.tau_min_ps == other.tau_min_ps
            and self.counts.shape == other.counts.shape
        )

    def rebin(self, factor):
        """Merge ``factor`` adjacent bins; trailing bins that do not fill a
        group are dropped. Normalised values are recomputed as group means."""
        factor = int(factor)
        if factor < 1:
            raise ValidationError("rebin factor must be >= 1")
        n = self.counts.shape[0] // factor
        counts = self.counts[: n * factor].reshape(n, factor).sum(axis=1)
        norm = None
        if self.normalized is not None:
            norm = self.normalized[: n * factor].reshape(n, factor).mean(axis=1)
        return replace(
            self, bin_width_ps=self.bin_width_ps * factor, counts=counts, normalized=norm
        )

    def window(self, lo, hi):
        """Bins whose left edge lies in ``[lo, hi)``, as a new histogram."""
        left = self.left
        keep = np.flatnonzero((left >= lo - 1e-15) & (left < hi - 1e-15))
        if keep.size == 0:
            raise ValidationError("window selects no bins")
        s = slice(keep[0], keep[-1] + 1)
        return replace(
            self,
            tau_min_ps=self.tau_min_ps + int(keep[0]) * self.bin_width_ps,
            counts=self.counts[s],
            normalized=None if self.normalized is None else self.normalized[s],
        )


@dataclass
class G3Histogram:
    """Triple counts over ``(tau1, tau2)``: ``tau1 = t_b - t_a`` and
    ``tau2 = t_c - t_a`` where ``c`` is another tag of stream ``a``.

    Cells inside the dead-time band of the shared detector are masked; they
    hold zero counts and NaN normalised values.
    """

    bin_width_ps: int
    tau1_min_ps: int
    tau2_min_ps: int
    counts: np.ndarray
    dead_mask: np.ndarray
    total_a: int
    total_b: int
    duration: float
    theta: float
    normalized: np.ndarray | None = None

    @property
    def bin_width(self):
        return self.bin_width_ps * PS

    def _edges(self, lo, n):
        return (lo + self.bin_width_ps * np.arange(n + 1)) * PS

    @property
    def tau1_edges(self):
        return self._edges(self.tau1_min_ps, self.counts.shape[0])

    @property
    def tau2_edges(self):
        return self._edges(self.tau2_min_ps, self.counts.shape[1])

    @property
    def tau1_centers(self):
        e = self.tau1_edges
        return 0.5 * (e[:-1] + e[1:])

    @property
    def tau2_centers(self):
        e = self.tau2_edges
        return 0.5 * (e[:-1] + e[1:])


# ---------------------------------------------------------------------------
# kernels


@njit(cache=True, nogil=True)
def _sweep(a, b, i0, i1, lo, w, nbins, skip_self):
    counts = np.zeros(nbins, dtype=np.int64)
    hi = lo + w * nbins
    nb = b.shape[0]
    if i0 >= i1 or nb == 0:
        return counts
    # first b that can pair with a[i0]
    j0 = np.searchsorted(b, a[i0] + lo)
    for i in range(i0, i1):
        ta = a[i]
        while j0 < nb and b[j0] - ta < lo:
            j0 += 1
        j = j0
        while j < nb:
            d = b[j] - ta
            if d >= hi:
                break
            if not (skip_self and j == i):
                counts[(d - lo) // w] += 1
            j += 1
    return counts


@njit(cache=True)
def _brute_pairs(a, b, lo, w, nbins, skip_self):
    counts = np.zeros(nbins, dtype=np.int64)
    hi = lo + w * nbins
    for i in range(a.shape[0]):
        for j in range(b.shape[0]):
            if skip_self and i == j:
                continue
            d = b[j] - a[i]
            if lo <= d < hi:
                counts[(d - lo) // w] += 1
    return counts


@njit(cache=True, nogil=True)
def _triples(a, b, lo1, lo2, w, n1, n2):
    counts = np.zeros((n1, n2), dtype=np.int64)
    hi1 = lo1 + w * n1
    hi2 = lo2 + w * n2
    na = a.shape[0]
    nb = b.shape[0]
    jb = 0
    kc = 0
    for i in range(na):
        ta = a[i]
        while jb < nb and b[jb] - ta < lo1:
            jb += 1
        while kc < na and a[kc] - ta < lo2:
            kc += 1
        j = jb
        while j < nb and b[j] - ta < hi1:
            r = (b[j] - ta - lo1) // w
            k = kc
            while k < na and a[k] - ta < hi2:
                if k != i:
                    counts[r, (a[k] - ta - lo2) // w] += 1
                k += 1
            j += 1
    return counts


@njit(cache=True)
def _brute_triples(a, b, lo1, lo2, w, n1, n2):
    counts = np.zeros((n1, n2), dtype=np.int64)
    hi1 = lo1 + w * n1
    hi2 = lo2 + w * n2
    for i in range(a.shape[0]):
        for j in range(b.shape[0]):
            d1 = b[j] - a[i]
            if d1 < lo1 or d1 >= hi1:
                continue
            for k in range(a.shape[0]):
                if k == i:
                    continue
                d2 = a[k] - a[i]
                if lo2 <= d2 < hi2:
                    counts[(d1 - lo1) // w, (d2 - lo2) // w] += 1
    return counts


# ---------------------------------------------------------------------------
# operations


def cross_correlate(a, b, bin_width, tau_range, chunks=1, threads=1, exclude_self=None):
    """Histogram of delays ``t_b - t_a`` by a two-pointer sweep.

    ``exclude_self`` (default: the two streams share a channel id, i.e. are the
    same detector) drops pairs of a tag with itself. ``chunks`` splits stream
    ``a`` into independent pieces that may run on ``threads`` workers; the
    result does not depend on either.
    """
    _check_pair(a, b)
    w, lo, n = _binning(bin_width, tau_range)
    if exclude_self is None:
        exclude_self = a.channel == b.channel
    if exclude_self and len(a) != len(b):
        raise ValidationError("self-pair exclusion needs the same stream on both sides")
    ta, tb = a.tags, b.tags
    bounds = np.linspace(0, len(ta), max(1, int(chunks)) + 1).astype(np.int64)
    jobs = [(int(bounds[k]), int(bounds[k + 1])) for k in range(len(bounds) - 1)]

    def run(job):
        return _sweep(ta, tb, job[0], job[1], lo, w, n, bool(exclude_self))

    if threads > 1 and len(jobs) > 1:
        with ThreadPoolExecutor(int(threads)) as pool:
            parts = list(pool.map(run, jobs))
    else:
        parts = [run(j) for j in jobs]
    counts = np.sum(parts, axis=0) if parts else np.zeros(n, dtype=np.int64)
    duration = max(a.duration, b.duration)
    return CoincidenceHistogram(w, lo, counts, len(a), len(b), duration)


def brute_force_coincidences(a, b, bin_width, tau_range, exclude_self=None):
    """All-pairs reference implementation of :func:`cross_correlate`."""
    _check_pair(a, b)
    if len(a) * len(b) > BRUTE_FORCE_LIMIT:
        raise ValidationError(f"brute force limited to {BRUTE_FORCE_LIMIT} pairs")
    w, lo, n = _binning(bin_width, tau_range)
    if exclude_self is None:
        exclude_self = a.channel == b.channel
    counts = _brute_pairs(a.tags, b.tags, lo, w, n, bool(exclude_self))
    return CoincidenceHistogram(w, lo, counts, len(a), len(b), max(a.duration, b.duration))


def normalize_g2(hist, method="rates", plateau=(15e-6, 20e-6)):
    """Divide counts by the accidental level.

    ``"rates"``: ``rate_a * rate_b * bin_width * duration``.
    ``"plateau"``: mean counts of bins whose centre has ``|tau|`` inside
    ``plateau``.
    """
    if method == "rates":
        if hist.duration <= 0 or hist.total_a == 0 or hist.total_b == 0:
            raise ValidationError("zero count rate; cannot normalise")
        level = hist.total_a * hist.total_b * hist.bin_width / hist.duration
    elif method == "plateau":
        c = np.abs(hist.centers)
        sel = (c >= plateau[0]) & (c <= plateau[1])
        if not np.any(sel):
            raise ValidationError("plateau window outside the histogram range")
        level = hist.counts[sel].mean()
        if level <= 0:
            raise ValidationError("empty accidental plateau")
    else:
        raise ValidationError(f"unknown normalisation {method!r}")
    return replace(hist, normalized=hist.counts / level, norm_method=method)


def _g3_setup(a, b, theta, bin_width, tau_range, tau2_range):
    _check_pair(a, b)
    if theta < 0:
        raise ValidationError("theta must be >= 0")
    w, lo1, n1 = _binning(bin_width, tau_range)
    _, lo2, n2 = _binning(bin_width, tau2_range or tau_range)
    th = _ps(theta, "theta")
    e2 = lo2 + w * np.arange(n2 + 1)
    # the shared detector cannot record t_c within theta of t_a
    masked2 = (e2[:-1] < th) & (e2[1:] > -th)
    mask = np.broadcast_to(masked2, (n1, n2)).copy()
    return w, lo1, lo2, n1, n2, mask


def g3_partial(a, b, theta, bin_width, tau_range, tau2_range=None, threads=1):
    """Triple coincidences with the third tag taken from stream ``a`` again.

    ``tau2`` cells that touch ``[-theta, theta]`` are masked. Normalisation is
    the rate product of :func:`normalize_g3`.
    """
    w, lo1, lo2, n1, n2, mask = _g3_setup(a, b, theta, bin_width, tau_range, tau2_range)
    counts = _triples(a.tags, b.tags, lo1, lo2, w, n1, n2)
    counts[mask] = 0
    T = max(a.duration, b.duration)
    hist = G3Histogram(w, lo1, lo2, counts, mask, len(a), len(b), T, float(theta))
    if T > 0 and len(a) > 1 and len(b) > 0:
        hist = normalize_g3(hist)
    return hist


def normalize_g3(hist, method="rates", plateau=(15e-6, 20e-6)):
    """Divide triple counts by the accidental level; masked cells become NaN.

    ``"rates"``: ``rate_a^2 * rate_b * bin_width^2 * duration``.
    ``"plateau"``: mean counts of unmasked cells whose centres have both
    ``|tau1|`` and ``|tau2|`` inside ``plateau``.
    """
    counts = np.asarray(hist.counts, dtype=float)
    if method == "rates":
        T = hist.duration
        if T <= 0 or hist.total_a < 2 or hist.total_b == 0:
            raise ValidationError("zero count rate; cannot normalise")
        ra, rb = hist.total_a / T, hist.total_b / T
        level = ra * ra * rb * hist.bin_width**2 * T
    elif method == "plateau":
        c1 = np.abs(hist.tau1_centers)[:, None]
        c2 = np.abs(hist.tau2_centers)[None, :]
        sel = (c1 >= plateau[0]) & (c1 <= plateau[1]) & (c2 >= plateau[0]) & (c2 <= plateau[1])
        sel &= ~hist.dead_mask
        if not np.any(sel):
            raise ValidationError("plateau window outside the histogram range")
        level = counts[sel].mean()
        if level <= 0:
            raise ValidationError("empty accidental plateau")
    else:
        raise ValidationError(f"unknown normalisation {method!r}")
    norm = counts / level
    norm[hist.dead_mask] = np.nan
    return replace(hist, normalized=norm)


def brute_force_g3(a, b, theta, bin_width, tau_range, tau2_range=None):
    """Triple-loop reference for :func:`g3_partial` counts."""
    if len(a) ** 2 * len(b) > BRUTE_FORCE_LIMIT:
        raise ValidationError(f"brute force limited to {BRUTE_FORCE_LIMIT} triples")
    w, lo1, lo2, n1, n2, mask = _g3_setup(a, b, theta, bin_width, tau_range, tau2_range)
    counts = _brute_triples(a.tags, b.tags, lo1, lo2, w, n1, n2)
    counts[mask] = 0
    return counts


def autocorrelate(stream, bin_width, tau_range):
    """Pair histogram of a stream with itself (self-pairs excluded)."""
    return cross_correlate(stream, stream, bin_width, tau_range, exclude_self=True)

