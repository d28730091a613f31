"""Small argument checks used by the public constructors and operations."""

import math

import numpy as np

from .errors import ValidationError


def check_scalar(value, name, *, lo=None, hi=None, lo_open=False, hi_open=False):
    """Return ``value`` as float after checking it is finite and within bounds.

    ``lo``/``hi`` are inclusive unless the matching ``*_open`` flag is set.
    """
    try:
        value = float(value)
    except (TypeError, ValueError):
        raise ValidationError(f"{name} must be a real number, got {value!r}") from None
    if not math.isfinite(value):
        raise ValidationError(f"{name} must be finite, got {value}")
    if lo is not None and (value < lo or (lo_open and value == lo)):
        op = ">" if lo_open else ">="
        raise ValidationError(f"{name} must be {op} {lo}, got {value}")
    if hi is not None and (value > hi or (hi_open and value == hi)):
        op = "<" if hi_open else "<="
        raise ValidationError(f"{name} must be {op} {hi}, got {value}")
    return value


def check_probability(value, name):
    return check_scalar(value, name, lo=0.0, hi=1.0)


def as_nonnegative_array(x, name):
    """Float array view of ``x``; raises if any element is negative or NaN."""
    arr = np.asarray(x, dtype=float)
    if np.any(np.isnan(arr)):
        raise ValidationError(f"{name} contains NaN")
    if np.any(arr < 0):
        raise ValidationError(f"{name} must be non-negative")
    return arr


def check_sorted(tags, name):
    tags = np.asarray(tags)
    if tags.size > 1 and np.any(np.diff(tags) < 0):
        raise ValidationError(f"{name} must be sorted ascending")
    return tags
