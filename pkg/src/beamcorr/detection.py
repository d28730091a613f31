"""From emission events to detector time tags.

The chain is: field-of-view gating per fiber, collection-efficiency thinning,
optional 50:50 split onto two detectors, then per-detector imperfections
(dark and background counts, timing jitter, dead time, quantisation).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from numba import njit

from ._validation import check_probability, check_scalar
from .errors import ValidationError

PS = 1e-12
_FWHM_TO_SIGMA = 1.0 / (2.0 * math.sqrt(2.0 * math.log(2.0)))
_STREAM_GATE = 100
_STREAM_THIN = 101
_STREAM_DETECTOR = 200


@dataclass(frozen=True)
class DetectorParameters:
    """Single-photon counter model.

    collection_efficiency
        Overall probability that an emitted photon is registered.
    dead_time
        Non-paralyzable dead time in s.
    timing_jitter_sigma
        Gaussian timing jitter (standard deviation) in s.
    dark_rate, background_rate
        Uncorrelated Poisson count rates in counts/s.
    """

    collection_efficiency: float = 1.0
    dead_time: float = 0.0
    timing_jitter_sigma: float = 0.0
    dark_rate: float = 0.0
    background_rate: float = 0.0

    def __post_init__(self):
        check_probability(self.collection_efficiency, "collection_efficiency")
        check_scalar(self.dead_time, "dead_time", lo=0)
        check_scalar(self.timing_jitter_sigma, "timing_jitter_sigma", lo=0)
        check_scalar(self.dark_rate, "dark_rate", lo=0)
        check_scalar(self.background_rate, "background_rate", lo=0)


@dataclass(frozen=True)
class FiberLayout:
    """Detection windows along the beam.

    ``mode="hbt"``: one window whose light is split onto two detectors.
    ``mode="dual"``: two windows, each on its own detector. ``edge="gaussian"``
    replaces the hard window by a Gaussian acceptance with FWHM
    ``fov_diameter``.
    """

    mode: str
    centers: tuple
    fov_diameter: float
    edge: str = "hard"

    def __post_init__(self):
        object.__setattr__(self, "centers", tuple(float(c) for c in self.centers))
        check_scalar(self.fov_diameter, "fov_diameter", lo=0, lo_open=True)
        if self.edge not in ("hard", "gaussian"):
            raise ValidationError(f"edge must be 'hard' or 'gaussian', got {self.edge!r}")
        if self.mode == "hbt":
            if len(self.centers) != 1:
                raise ValidationError("hbt layout has exactly one window")
        elif self.mode == "dual":
            if len(self.centers) != 2:
                raise ValidationError("dual layout has exactly two windows")
            if abs(self.centers[1] - self.centers[0]) <= self.fov_diameter:
                raise ValidationError("dual-fiber windows overlap")
        else:
            raise ValidationError(f"layout mode must be 'hbt' or 'dual', got {self.mode!r}")

    @classmethod
    def hbt(cls, fov_length, center=0.0, edge="hard"):
        return cls("hbt", (center,), fov_length, edge)

    @classmethod
    def dual(cls, separation, fov_diameter, edge="hard"):
        return cls("dual", (-separation / 2, separation / 2), fov_diameter, edge)

    @property
    def n_channels(self):
        return 2

    def record_window(self):
        """Span of positions from which a photon can possibly be detected."""
        reach = self.fov_diameter / 2
        if self.edge == "gaussian":
            reach = 6 * self.fov_diameter * _FWHM_TO_SIGMA
        return min(self.centers) - reach, max(self.centers) + reach

    def acceptance(self, x):
        """Per-window detection probability at positions ``x``, shape (n, windows)."""
        x = np.asarray(x, dtype=float)[..., None]
        c = np.asarray(self.centers)
        if self.edge == "hard":
            return (np.abs(x - c) <= self.fov_diameter / 2).astype(float)
        sigma = self.fov_diameter * _FWHM_TO_SIGMA
        return np.exp(-0.5 * ((x - c) / sigma) ** 2)


@dataclass
class TimeTagStream:
    """Sorted integer-picosecond detection times of one channel."""

    channel: int
    tags: np.ndarray
    duration_ps: int
    resolution_ps: int = 1

    def __post_init__(self):
        self.tags = np.ascontiguousarray(self.tags, dtype=np.int64)
        if self.tags.ndim != 1:
            raise ValidationError("tags must be one-dimensional")
        if self.tags.size > 1 and np.any(np.diff(self.tags) < 0):
            raise ValidationError("tags must be sorted ascending")
        if int(self.resolution_ps) <= 0:
            raise ValidationError("resolution_ps must be positive")
        if int(self.duration_ps) < 0:
            raise ValidationError("duration_ps must be non-negative")
        self.duration_ps = int(self.duration_ps)
        self.resolution_ps = int(self.resolution_ps)

    def __len__(self):
        return self.tags.shape[0]

    @property
    def duration(self):
        return self.duration_ps * PS

    @property
    def rate(self):
        """Mean count rate in counts/s."""
        if self.duration_ps == 0:
            return 0.0
        return len(self) / self.duration

    def times(self):
        return self.tags * PS

    def __eq__(self, other):
        if not isinstance(other, TimeTagStream):
            return NotImplemented
        return (
            self.channel == other.channel
            and self.duration_ps == other.duration_ps
            and self.resolution_ps == other.resolution_ps
            and np.array_equal(self.tags, other.tags)
        )


def gate_by_fov(events, layout, rng=None):
    """Split events by the window they fall in; returns one event set per window.

    With hard edges an event belongs to window ``i`` iff its position is within
    ``fov_diameter / 2`` of ``centers[i]``. Gaussian edges need ``rng``.
    """
    if len(events) > 1 and np.any(np.diff(events.time) < 0):
        raise ValidationError("events must be time-sorted")
    p = layout.acceptance(events.position)
    if layout.edge == "hard":
        return [events.select(p[:, i] > 0) for i in range(p.shape[1])]
    if rng is None:
        raise ValidationError("gaussian-edged windows need an rng")
    total = p.sum(axis=1)
    scale = np.where(total > 1, 1.0 / np.where(total > 0, total, 1.0), 1.0)
    cum = np.cumsum(p * scale[:, None], axis=1)
    u = rng.uniform(size=len(events))
    which = (u[:, None] >= cum).sum(axis=1)
    return [events.select(which == i) for i in range(p.shape[1])]


def thin_and_split(events, collection_efficiency, hbt, rng):
    """Keep each event with probability ``collection_efficiency``; with ``hbt``
    route survivors to two outputs with probability 1/2 each."""
    c = check_probability(collection_efficiency, "collection_efficiency")
    n = len(events)
    u = rng.uniform(size=n)
    keep = u < c
    if not hbt:
        return [events.select(keep)]
    # reuse the same uniform: conditional on u < c, u / c is uniform on [0, 1)
    to_a = keep & (u < 0.5 * c)
    return [events.select(to_a), events.select(keep & ~to_a)]


@njit(cache=True)
def _dead_time_filter(tags, dead):
    keep = np.zeros(tags.shape[0], dtype=np.bool_)
    last = np.int64(0)
    have = False
    for i in range(tags.shape[0]):
        t = tags[i]
        if not have or t - last >= dead:
            if have and t == last:
                continue
            keep[i] = True
            last = t
            have = True
    return keep


def apply_dead_time(tags, dead_time_ps):
    """Non-paralyzable dead time on sorted integer tags: a tag survives if it
    comes at least ``dead_time_ps`` after the last surviving tag. Coincident
    tags collapse to one even without dead time."""
    tags = np.ascontiguousarray(tags, dtype=np.int64)
    return tags[_dead_time_filter(tags, np.int64(dead_time_ps))]


def apply_detector(times, det, duration, rng, channel=0, resolution_ps=1):
    """Turn true photon arrival times (s) into a detector's time tags.

    Dark and background counts are injected, every tag is jittered, tags
    outside ``[0, duration)`` are dropped, the rest are quantised to
    ``resolution_ps`` and thinned by the dead time.
    """
    duration = check_scalar(duration, "duration", lo=0)
    times = np.asarray(getattr(times, "time", times), dtype=float)
    if times.size > 1 and np.any(np.diff(times) < 0):
        raise ValidationError("input stream must be sorted")
    resolution_ps = int(resolution_ps)
    if resolution_ps <= 0:
        raise ValidationError("resolution_ps must be positive")
    n_extra = rng.poisson((det.dark_rate + det.background_rate) * duration)
    if n_extra:
        times = np.concatenate([times, rng.uniform(0.0, duration, n_extra)])
    if det.timing_jitter_sigma > 0 and times.size:
        times = times + rng.normal(0.0, det.timing_jitter_sigma, times.size)
    times = times[(times >= 0) & (times < duration)]
    ticks = np.floor(times / (resolution_ps * PS)).astype(np.int64) * resolution_ps
    ticks.sort(kind="stable")
    dead_ps = int(round(det.dead_time / PS))
    tags = apply_dead_time(ticks, dead_ps)
    return TimeTagStream(channel, tags, int(round(duration / PS)), resolution_ps)


def detect(events, layout, det, duration, seed, resolution_ps=1):
    """Full detection chain for both channels of ``layout``.

    Every random step draws from its own substream of ``seed``, so each
    channel is reproducible on its own.
    """
    gate_rng = np.random.default_rng([int(seed), _STREAM_GATE])
    thin_rng = np.random.default_rng([int(seed), _STREAM_THIN])
    windows = gate_by_fov(events, layout, gate_rng)
    if layout.mode == "hbt":
        arms = thin_and_split(windows[0], det.collection_efficiency, True, thin_rng)
    else:
        arms = [thin_and_split(w, det.collection_efficiency, False, thin_rng)[0] for w in windows]
    streams = []
    for ch, arm in enumerate(arms):
        rng = np.random.default_rng([int(seed), _STREAM_DETECTOR + ch])
        streams.append(apply_detector(arm, det, duration, rng, ch, resolution_ps))
    return streams
