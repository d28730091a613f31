"""Compiled inner loops for the quantum-trajectory simulation.

With ground amplitude ``a`` and excited amplitude ``i*b`` the no-jump
evolution of a resonantly driven two-level atom stays real::

    da/dt = -(Omega/2) b
    db/dt =  (Omega/2) a - (Gamma/2) b

Random numbers come from a SplitMix64 counter stream keyed per atom, so an
atom's trajectory does not depend on which thread runs it or in which order.
"""

import math

import numpy as np
from numba import njit

_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)
_S30 = np.uint64(30)
_S27 = np.uint64(27)
_S31 = np.uint64(31)
_S11 = np.uint64(11)
_TWO_M53 = 1.0 / 9007199254740992.0

ENGINE_FIXED = 0
ENGINE_WAITING = 1
MODE_BEAM = 0  # trajectory-resolved Gaussian beam profile
MODE_CONSTANT = 1  # constant per-atom Rabi frequency

MAX_JUMP_PROBABILITY = 0.05


@njit(inline="always")
def _mix(z):
    z = (z ^ (z >> _S30)) * _M1
    z = (z ^ (z >> _S27)) * _M2
    return z ^ (z >> _S31)


@njit(cache=True)
def atom_key(seed, atom_id):
    """64-bit stream key for one atom of a run."""
    return _mix(_mix(np.uint64(seed)) + np.uint64(atom_id) * _GOLDEN)


@njit(inline="always")
def _uniform(state):
    state += _GOLDEN
    return state, float(_mix(state) >> _S11) * _TWO_M53


@njit(cache=True)
def uniform_stream(key, n):
    """First ``n`` draws of the stream ``key``; exposed for tests."""
    state = np.uint64(key)
    out = np.empty(n)
    for i in range(n):
        state, out[i] = _uniform(state)
    return out


@njit(cache=True)
def _propagator(omega, gamma, t):
    """No-jump propagator over ``t`` as (m00, m01, m10, m11)."""
    q = 0.25 * gamma
    h = 0.5 * omega
    w2 = h * h - q * q
    if w2 > 0:
        w = math.sqrt(w2)
        c = math.cos(w * t)
        s = math.sin(w * t) / w
    elif w2 < 0:
        w = math.sqrt(-w2)
        c = math.cosh(w * t)
        s = math.sinh(w * t) / w
    else:
        c = 1.0
        s = t
    d = math.exp(-q * t)
    return d * (c + q * s), -d * h * s, d * h * s, d * (c - q * s)


@njit(cache=True)
def _survival(omega, gamma, t):
    """Norm and excited amplitude after no-jump evolution from the ground state."""
    m00, _, m10, _ = _propagator(omega, gamma, t)
    return m00 * m00 + m10 * m10, m10


@njit(cache=True)
def _grow(arr, n):
    out = np.empty(max(2 * arr.shape[0], n), dtype=arr.dtype)
    out[: arr.shape[0]] = arr
    return out


@njit(cache=True)
def _next_jump(omega, gamma, u, remaining):
    """Delay to the next jump given uniform ``u``, or -1 if it falls after
    ``remaining``. Safeguarded Newton on the survival probability."""
    s_end, _ = _survival(omega, gamma, remaining)
    if s_end >= u:
        return -1.0
    lo = 0.0
    hi = 4.0 / gamma
    while hi < remaining:
        s_hi, _ = _survival(omega, gamma, hi)
        if s_hi < u:
            break
        lo = hi
        hi *= 2.0
    if hi > remaining:
        hi = remaining
    t = 0.5 * (lo + hi)
    for _ in range(200):
        s, b = _survival(omega, gamma, t)
        f = s - u
        if f > 0:
            lo = t
        else:
            hi = t
        if hi - lo < 1e-15 + 1e-12 * hi:
            break
        deriv = -gamma * b * b
        t_new = t - f / deriv if deriv < 0 else -1.0
        if t_new <= lo or t_new >= hi:
            t_new = 0.5 * (lo + hi)
        if abs(t_new - t) < 1e-16:
            break
        t = t_new
    return t


@njit(cache=True, nogil=True)
def run_atoms(
    atom_ids,
    entry_t,
    exit_t,
    x0,
    vel,
    z0,
    vz,
    rabi,
    dt,
    gamma,
    waist,
    mode,
    engine,
    seed,
    capacity,
    rec_lo,
    rec_hi,
):
    """Evolve each atom over ``[entry_t, exit_t]`` and collect jump events.

    Only events at positions within ``[rec_lo, rec_hi]`` are stored, but every
    jump is counted. Returns ``(times, positions, atom_ids, n_per_atom)``;
    positions are ``x0 + vel * (t - entry_t)``.
    """
    n_atoms = atom_ids.shape[0]
    times = np.empty(max(capacity, 16))
    pos = np.empty(max(capacity, 16))
    ids = np.empty(max(capacity, 16), dtype=np.int64)
    counts = np.zeros(n_atoms, dtype=np.int64)
    n = 0
    inv_w2 = 1.0 / (waist * waist)
    for i in range(n_atoms):
        state = atom_key(seed, atom_ids[i])
        t0 = entry_t[i]
        t1 = exit_t[i]
        om = rabi[i]
        if t1 <= t0 or om <= 0:
            continue
        if engine == ENGINE_WAITING:
            t = t0
            while True:
                state, u = _uniform(state)
                if u <= 0.0:
                    continue
                s = _next_jump(om, gamma, u, t1 - t)
                if s < 0:
                    break
                t += s
                counts[i] += 1
                x = x0[i] + vel[i] * (t - t0)
                if x < rec_lo or x > rec_hi:
                    continue
                if n >= times.shape[0]:
                    times = _grow(times, n + 1)
                    pos = _grow(pos, n + 1)
                    ids = _grow(ids, n + 1)
                times[n] = t
                pos[n] = x
                ids[n] = atom_ids[i]
                n += 1
        else:
            h = dt[i]
            if gamma * h > MAX_JUMP_PROBABILITY:
                raise ValueError("time step too large for the jump probability bound")
            nsteps = int(math.ceil((t1 - t0) / h))
            m00, m01, m10, m11 = _propagator(om, gamma, h)
            a = 1.0
            b = 0.0
            for k in range(nsteps):
                ts = t0 + k * h
                step = h
                if k == nsteps - 1:
                    step = t1 - ts
                if mode == MODE_BEAM or step != h:
                    om_t = om
                    if mode == MODE_BEAM:
                        tm = ts + 0.5 * step - t0
                        x = x0[i] + vel[i] * tm
                        z = z0[i] + vz[i] * tm
                        om_t = om * math.exp(-(x * x + z * z) * inv_w2)
                    m00, m01, m10, m11 = _propagator(om_t, gamma, step)
                # state kept unnormalised; jump test u < Gamma b^2 dt / |psi|^2
                n2 = a * a + b * b
                gb = gamma * b * b * step
                if gb > MAX_JUMP_PROBABILITY * n2:
                    raise ValueError("jump probability per step exceeded bound")
                state, u = _uniform(state)
                if u * n2 < gb:
                    te = ts + step
                    counts[i] += 1
                    x = x0[i] + vel[i] * (te - t0)
                    if rec_lo <= x <= rec_hi:
                        if n >= times.shape[0]:
                            times = _grow(times, n + 1)
                            pos = _grow(pos, n + 1)
                            ids = _grow(ids, n + 1)
                        times[n] = te
                        pos[n] = x
                        ids[n] = atom_ids[i]
                        n += 1
                    a = 1.0
                    b = 0.0
                else:
                    a_new = m00 * a + m01 * b
                    b = m10 * a + m11 * b
                    a = a_new
                    if n2 < 1e-100:
                        norm = math.sqrt(n2)
                        a /= norm
                        b /= norm
    return times[:n], pos[:n], ids[:n], counts
