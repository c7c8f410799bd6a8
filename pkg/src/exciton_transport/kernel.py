"""Compiled per-sample kernels shared by single evaluations and campaigns.

The closed-system objective is evaluated from the spectral data of the
Hamiltonian: with ``w_k = <out|v_k><v_k|in>`` the output amplitude is
``sum_k w_k exp(-i E_k t)``.  On the uniform scan grid the phases advance by a
fixed factor per step, so the scan costs one complex multiply per eigenvalue
and grid point.
"""

import math

import numba as nb
import numpy as np

from .rng import philox4x64

GOLDEN = 0.5 * (math.sqrt(5.0) - 1.0)
MIN_SEPARATION = 1e-6

_S11 = np.uint64(11)
_ONE = np.uint64(1)
_TO_UNIT = 1.0 / 9007199254740992.0


# --------------------------------------------------------------------------
# conformations


@nb.njit(cache=True)
def sample_positions(n_sites, k0, k1, index, stream, min_sep, pos):
    """Uniform-ball conformation with input at the origin and output at z=1.

    Site order: 0 = input, 1 = output, 2.. = intermediate.  Each intermediate
    site is drawn by rejection from the enclosing cube and redrawn while it
    violates ``min_sep`` against any earlier site.  Uniforms are consumed
    strictly sequentially from stream ``(key, index, stream)``.
    """
    pos[0, 0] = 0.0
    pos[0, 1] = 0.0
    pos[0, 2] = 0.0
    pos[1, 0] = 0.0
    pos[1, 1] = 0.0
    pos[1, 2] = 1.0
    buf = np.empty(4)
    block = np.uint64(0)
    bpos = 4
    u = np.empty(3)
    min_sep2 = min_sep * min_sep
    for j in range(2, n_sites):
        while True:
            for c in range(3):
                if bpos == 4:
                    block = block + _ONE
                    r0, r1, r2, r3 = philox4x64(block, np.uint64(0), index, stream, k0, k1)
                    buf[0] = (r0 >> _S11) * _TO_UNIT
                    buf[1] = (r1 >> _S11) * _TO_UNIT
                    buf[2] = (r2 >> _S11) * _TO_UNIT
                    buf[3] = (r3 >> _S11) * _TO_UNIT
                    bpos = 0
                u[c] = buf[bpos]
                bpos += 1
            x = u[0] - 0.5
            y = u[1] - 0.5
            z = u[2] - 0.5
            if x * x + y * y + z * z > 0.25:
                continue
            z += 0.5
            ok = True
            for i in range(j):
                dx = x - pos[i, 0]
                dy = y - pos[i, 1]
                dz = z - pos[i, 2]
                if dx * dx + dy * dy + dz * dz <= min_sep2:
                    ok = False
                    break
            if ok:
                pos[j, 0] = x
                pos[j, 1] = y
                pos[j, 2] = z
                break


@nb.njit(cache=True)
def dipole_matrix(pos, alpha, h):
    n = pos.shape[0]
    for i in range(n):
        h[i, i] = 0.0
        for j in range(i + 1, n):
            dx = pos[i, 0] - pos[j, 0]
            dy = pos[i, 1] - pos[j, 1]
            dz = pos[i, 2] - pos[j, 2]
            r = math.sqrt(dx * dx + dy * dy + dz * dz)
            c = alpha / (r * r * r)
            h[i, j] = c
            h[j, i] = c


# --------------------------------------------------------------------------
# closed dynamics

_BLOCK = 16


@nb.njit(cache=True)
def output_probability(energies, weights, t):
    re = 0.0
    im = 0.0
    for k in range(energies.shape[0]):
        ph = energies[k] * t
        re += weights[k] * math.cos(ph)
        im -= weights[k] * math.sin(ph)
    return re * re + im * im


@nb.njit(cache=True)
def _grid_argmax_closed(energies, weights, dt, grid_points):
    # phases for the first _BLOCK offsets are exact; blocks advance by a
    # recurrence of grid_points / _BLOCK steps only
    m = energies.shape[0]
    cr = np.empty((m, _BLOCK))
    ci = np.empty((m, _BLOCK))
    for k in range(m):
        for o in range(_BLOCK):
            ph = energies[k] * dt * o
            cr[k, o] = weights[k] * math.cos(ph)
            ci[k, o] = -weights[k] * math.sin(ph)
    zr = np.ones(m)
    zi = np.zeros(m)
    sr = np.empty(m)
    si = np.empty(m)
    for k in range(m):
        sr[k] = math.cos(energies[k] * dt * _BLOCK)
        si[k] = -math.sin(energies[k] * dt * _BLOCK)
    ar = np.empty(_BLOCK)
    ai = np.empty(_BLOCK)
    best = -1.0
    best_n = 0
    for b in range((grid_points + _BLOCK - 1) // _BLOCK):
        ar[:] = 0.0
        ai[:] = 0.0
        for k in range(m):
            x = zr[k]
            y = zi[k]
            for o in range(_BLOCK):
                ar[o] += x * cr[k, o] - y * ci[k, o]
                ai[o] += x * ci[k, o] + y * cr[k, o]
            t = x * sr[k] - y * si[k]
            zi[k] = x * si[k] + y * sr[k]
            zr[k] = t
        for o in range(_BLOCK):
            n = b * _BLOCK + o
            if n < grid_points:
                p = ar[o] * ar[o] + ai[o] * ai[o]
                if p > best:
                    best = p
                    best_n = n
    return best_n


@nb.njit(cache=True)
def scan_closed(energies, weights, window, grid_points, refine_tol):
    """Maximum output population on [0, window].

    Coarse scan on ``grid_points`` uniform points (both endpoints included),
    then golden-section refinement inside the two grid cells around the best
    point.  The refined value replaces the grid value only if it is larger.

    Returns ``(p_out, t_star, best_grid_value)``.
    """
    dt = window / (grid_points - 1)
    best_n = _grid_argmax_closed(energies, weights, dt, grid_points)
    t_best = window if best_n == grid_points - 1 else best_n * dt
    best = output_probability(energies, weights, t_best)
    lo = max(0.0, (best_n - 1) * dt)
    hi = min(window, (best_n + 1) * dt)
    tol = refine_tol * window
    a = lo
    b = hi
    c = b - GOLDEN * (b - a)
    d = a + GOLDEN * (b - a)
    fc = output_probability(energies, weights, c)
    fd = output_probability(energies, weights, d)
    while b - a > tol:
        if fc > fd:
            b = d
            d = c
            fd = fc
            c = b - GOLDEN * (b - a)
            fc = output_probability(energies, weights, c)
        else:
            a = c
            c = d
            fc = fd
            d = a + GOLDEN * (b - a)
            fd = output_probability(energies, weights, d)
    if fc > fd:
        t_ref = c
        f_ref = fc
    else:
        t_ref = d
        f_ref = fd
    if f_ref > best:
        return min(f_ref, 1.0), t_ref, best
    return min(best, 1.0), t_best, best


@nb.njit(cache=True)
def spectral_weights(h, in_idx, out_idx):
    """Eigenvalues (diagonal mean removed) and output-amplitude weights."""
    n = h.shape[0]
    shift = 0.0
    for i in range(n):
        shift += h[i, i]
    shift /= n
    hs = h.copy()
    for i in range(n):
        hs[i, i] -= shift
    e, v = np.linalg.eigh(hs)
    w = np.empty(n)
    for k in range(n):
        w[k] = v[out_idx, k] * v[in_idx, k]
    return e, v, w


@nb.njit(cache=True)
def c_measures(pop):
    """(c2, c4) of a pure state from its site populations.

    Uses the elementary symmetric polynomials e2 = (1 - M2)/2 and
    e4 = (1 - 6 M2 + 8 M3 + 3 M2^2 - 6 M4)/24, accumulated from non-negative
    terms: no cancellation, and c4 is exactly 0 with at most three occupied
    sites.  c4 is NaN below 4 sites, where its normalisation is undefined.
    """
    n = pop.shape[0]
    e1 = 0.0
    e2 = 0.0
    e3 = 0.0
    e4 = 0.0
    for j in range(n):
        p = pop[j]
        e4 += p * e3
        e3 += p * e2
        e2 += p * e1
        e1 += p
    if e1 <= 0.0:
        return 0.0, np.nan if n < 4 else 0.0
    s2 = e1 * e1
    x = 2.0 * e2 / s2 / (1.0 - 1.0 / n)
    c2 = math.sqrt(x) if x > 0.0 else 0.0
    if c2 > 1.0:
        c2 = 1.0
    if n < 4:
        return c2, np.nan
    den = 1.0 - 6.0 / n + 11.0 / (n * n) - 6.0 / (n * n * n)
    y = 24.0 * e4 / (s2 * s2) / den
    c4 = math.sqrt(math.sqrt(y)) if y > 0.0 else 0.0
    if c4 > 1.0:
        c4 = 1.0
    return c2, c4


@nb.njit(cache=True)
def populations_at(energies, vecs, in_idx, t, pop):
    n = vecs.shape[0]
    for j in range(n):
        re = 0.0
        im = 0.0
        for k in range(n):
            ph = energies[k] * t
            w = vecs[j, k] * vecs[in_idx, k]
            re += w * math.cos(ph)
            im -= w * math.sin(ph)
        pop[j] = re * re + im * im


@nb.njit(cache=True)
def entanglement_maxima(energies, vecs, in_idx, window, grid_points, t_star):
    """Maxima of c2 and c4 over grid times <= t_star, plus t_star itself."""
    n = vecs.shape[0]
    dt = window / (grid_points - 1)
    n_last = int(math.floor(t_star / dt))
    if n_last > grid_points - 1:
        n_last = grid_points - 1
    while n_last > 0 and n_last * dt > t_star:
        n_last -= 1
    n_pts = n_last + 1
    # amplitude of site j: sum_k C[j, k] exp(-i E_k t)
    cr = np.empty((n, n, _BLOCK))
    ci = np.empty((n, n, _BLOCK))
    for k in range(n):
        for o in range(_BLOCK):
            ph = energies[k] * dt * o
            cs = math.cos(ph)
            sn = -math.sin(ph)
            for j in range(n):
                w = vecs[j, k] * vecs[in_idx, k]
                cr[k, j, o] = w * cs
                ci[k, j, o] = w * sn
    zr = np.ones(n)
    zi = np.zeros(n)
    sr = np.empty(n)
    si = np.empty(n)
    for k in range(n):
        sr[k] = math.cos(energies[k] * dt * _BLOCK)
        si[k] = -math.sin(energies[k] * dt * _BLOCK)
    ar = np.empty((n, _BLOCK))
    ai = np.empty((n, _BLOCK))
    pop = np.empty(n)
    c2max = 0.0
    c4max = 0.0
    for b in range((n_pts + _BLOCK - 1) // _BLOCK):
        ar[:, :] = 0.0
        ai[:, :] = 0.0
        for k in range(n):
            x = zr[k]
            y = zi[k]
            for j in range(n):
                for o in range(_BLOCK):
                    ar[j, o] += x * cr[k, j, o] - y * ci[k, j, o]
                    ai[j, o] += x * ci[k, j, o] + y * cr[k, j, o]
            t = x * sr[k] - y * si[k]
            zi[k] = x * si[k] + y * sr[k]
            zr[k] = t
        for o in range(_BLOCK):
            if b * _BLOCK + o >= n_pts:
                break
            for j in range(n):
                pop[j] = ar[j, o] * ar[j, o] + ai[j, o] * ai[j, o]
            c2, c4 = c_measures(pop)
            if c2 > c2max:
                c2max = c2
            if c4 > c4max:
                c4max = c4
    populations_at(energies, vecs, in_idx, t_star, pop)
    c2, c4 = c_measures(pop)
    if c2 > c2max:
        c2max = c2
    if c4 > c4max:
        c4max = c4
    if n < 4:
        c4max = np.nan
    return c2max, c4max


# --------------------------------------------------------------------------
# open dynamics
#
# rho = R + iA with R real symmetric and A real antisymmetric (true for real
# H and a real initial state).  Packed real vector of length N^2: slot
# (a, b) holds R[a, b] for a <= b and A[a, b] for a > b.


@nb.njit(cache=True)
def pack_index(a, b, n):
    return a * n + b


@nb.njit(cache=True)
def real_generator(h, rate, out):
    """Real N^2 x N^2 generator of dephased evolution in packed coordinates.

    ``rate`` is the decay rate of every site-basis coherence.
    """
    n = h.shape[0]
    d = n * n
    r = np.zeros((n, n))
    a = np.zeros((n, n))
    for col in range(d):
        p = col // n
        q = col % n
        r[:, :] = 0.0
        a[:, :] = 0.0
        if p <= q:
            r[p, q] = 1.0
            r[q, p] = 1.0
        else:
            a[p, q] = 1.0
            a[q, p] = -1.0
        ha = h @ a - a @ h
        hr = h @ r - r @ h
        for i in range(n):
            for j in range(n):
                row = i * n + j
                if i <= j:
                    v = ha[i, j]
                    if i != j:
                        v -= rate * r[i, j]
                    out[row, col] = v
                else:
                    out[row, col] = -hr[i, j] - rate * a[i, j]


@nb.njit(cache=True)
def pack_density(rho, out):
    n = rho.shape[0]
    for i in range(n):
        for j in range(n):
            if i <= j:
                out[i * n + j] = rho[i, j].real
            else:
                out[i * n + j] = rho[i, j].imag


@nb.njit(cache=True)
def unpack_density(x, rho):
    n = rho.shape[0]
    for i in range(n):
        rho[i, i] = x[i * n + i]
        for j in range(i + 1, n):
            re = x[i * n + j]
            im = x[j * n + i]
            rho[i, j] = re - 1j * im
            rho[j, i] = re + 1j * im


@nb.njit(cache=True)
def eig_pairs_to_complex(wr, wi, vr, lam, vecs):
    """Assemble complex eigenpairs from LAPACK dgeev real output."""
    d = wr.shape[0]
    m = 0
    while m < d:
        lam[m] = wr[m] + 1j * wi[m]
        if wi[m] == 0.0:
            for r in range(d):
                vecs[r, m] = vr[r, m]
            m += 1
        else:
            lam[m + 1] = wr[m + 1] + 1j * wi[m + 1]
            for r in range(d):
                vecs[r, m] = vr[r, m] + 1j * vr[r, m + 1]
                vecs[r, m + 1] = vr[r, m] - 1j * vr[r, m + 1]
            m += 2


@nb.njit(cache=True)
def open_value(lam, amp, t):
    s = 0.0
    for m in range(lam.shape[0]):
        z = amp[m] * np.exp(lam[m] * t)
        s += z.real
    return s


@nb.njit(cache=True)
def scan_open(lam, amp, window, grid_points, refine_tol):
    """Maximum of ``Re sum_m amp_m exp(lam_m t)`` over [0, window].

    Same grid-plus-golden-section procedure as :func:`scan_closed`.
    """
    m = lam.shape[0]
    dt = window / (grid_points - 1)
    cb = np.empty((m, _BLOCK), dtype=np.complex128)
    for k in range(m):
        for o in range(_BLOCK):
            cb[k, o] = amp[k] * np.exp(lam[k] * (dt * o))
    z = np.ones(m, dtype=np.complex128)
    step = np.empty(m, dtype=np.complex128)
    for k in range(m):
        step[k] = np.exp(lam[k] * (dt * _BLOCK))
    acc = np.empty(_BLOCK)
    best = -np.inf
    best_n = 0
    for b in range((grid_points + _BLOCK - 1) // _BLOCK):
        acc[:] = 0.0
        for k in range(m):
            zk = z[k]
            for o in range(_BLOCK):
                acc[o] += (zk * cb[k, o]).real
            z[k] = zk * step[k]
        for o in range(_BLOCK):
            n = b * _BLOCK + o
            if n < grid_points and acc[o] > best:
                best = acc[o]
                best_n = n
    t_best = window if best_n == grid_points - 1 else best_n * dt
    best = open_value(lam, amp, t_best)
    a = max(0.0, (best_n - 1) * dt)
    b = min(window, (best_n + 1) * dt)
    tol = refine_tol * window
    c = b - GOLDEN * (b - a)
    d = a + GOLDEN * (b - a)
    fc = open_value(lam, amp, c)
    fd = open_value(lam, amp, d)
    while b - a > tol:
        if fc > fd:
            b = d
            d = c
            fd = fc
            c = b - GOLDEN * (b - a)
            fc = open_value(lam, amp, c)
        else:
            a = c
            c = d
            fc = fd
            d = a + GOLDEN * (b - a)
            fd = open_value(lam, amp, d)
    if fc > fd:
        t_ref = c
        f_ref = fc
    else:
        t_ref = d
        f_ref = fd
    if f_ref > best:
        return min(max(f_ref, 0.0), 1.0), t_ref, best
    return min(max(best, 0.0), 1.0), t_best, best


# --------------------------------------------------------------------------
# campaign shard


@nb.njit(cache=True)
def sample_priority(k0, k1, index):
    """Uniform priority used for bottom-k record retention (stream 1)."""
    r0, r1, r2, r3 = philox4x64(_ONE, np.uint64(0), index, _ONE, k0, k1)
    return (r0 >> _S11) * _TO_UNIT


@nb.njit(cache=True, nogil=True)
def coherent_shard(n_sites, k0, k1, start, alpha, window, grid_points, refine_tol,
                   record_entanglement, p_out, t_star, c2max, c4max, priority):
    """Closed-system evaluation of samples ``start .. start + len(p_out) - 1``."""
    pos = np.empty((n_sites, 3))
    h = np.empty((n_sites, n_sites))
    for i in range(p_out.shape[0]):
        idx = np.uint64(start + i)
        sample_positions(n_sites, k0, k1, idx, np.uint64(0), MIN_SEPARATION, pos)
        dipole_matrix(pos, alpha, h)
        e, v, w = spectral_weights(h, 0, 1)
        p, ts, g = scan_closed(e, w, window, grid_points, refine_tol)
        p_out[i] = p
        t_star[i] = ts
        if record_entanglement:
            c2, c4 = entanglement_maxima(e, v, 0, window, grid_points, ts)
            c2max[i] = c2
            c4max[i] = c4
        priority[i] = sample_priority(k0, k1, idx)


@nb.njit(cache=True, nogil=True)
def shard_generators(n_sites, k0, k1, start, count, alpha, rate, out):
    """Real dephasing generators for a run of samples, shape (count, N^2, N^2)."""
    pos = np.empty((n_sites, 3))
    h = np.empty((n_sites, n_sites))
    for i in range(count):
        sample_positions(n_sites, k0, k1, np.uint64(start + i), np.uint64(0), MIN_SEPARATION, pos)
        dipole_matrix(pos, alpha, h)
        real_generator(h, rate, out[i])
