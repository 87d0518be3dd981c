"""Compiled inner loops for patch search and sparse attention.

All kernels address patches through replicate-padded maps, so patch
``(y, x)`` of a map with radius ``r`` is ``pad[y:y + p, x:x + p]``.
Metric codes: 0 dot, 1 neg_l2, 2 cosine (see ``Metric.code``).

Random draws come from a splitmix64 stream seeded by ``(key, query)``,
which makes every kernel independent of thread scheduling.
"""
import numpy as np
from numba import njit, prange

_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)
_INV53 = 1.0 / 9007199254740992.0


@njit(cache=True, inline="always")
def _mix(z):
    z = (z ^ (z >> np.uint64(30))) * _M1
    z = (z ^ (z >> np.uint64(27))) * _M2
    return z ^ (z >> np.uint64(31))


@njit(cache=True, inline="always")
def _stream(key, query):
    return _mix(key ^ _mix(np.uint64(query) + _GOLDEN))


@njit(cache=True, inline="always")
def _below(state, n):
    """Advance ``state`` and draw an int uniformly in ``[0, n)``."""
    state = state + _GOLDEN
    z = _mix(state)
    v = int(np.float64(z >> np.uint64(11)) * _INV53 * n)
    if v >= n:
        v = n - 1
    return state, v


@njit(cache=True, inline="always")
def _row_ssd(Q2, qr, q0, K2, kr, k0, run):
    # four fixed-order partial sums: breaks the add latency chain, stays deterministic
    a0 = 0.0
    a1 = 0.0
    a2 = 0.0
    a3 = 0.0
    e = 0
    while e + 4 <= run:
        d0 = np.float64(Q2[qr, q0 + e]) - np.float64(K2[kr, k0 + e])
        d1 = np.float64(Q2[qr, q0 + e + 1]) - np.float64(K2[kr, k0 + e + 1])
        d2 = np.float64(Q2[qr, q0 + e + 2]) - np.float64(K2[kr, k0 + e + 2])
        d3 = np.float64(Q2[qr, q0 + e + 3]) - np.float64(K2[kr, k0 + e + 3])
        a0 += d0 * d0
        a1 += d1 * d1
        a2 += d2 * d2
        a3 += d3 * d3
        e += 4
    while e < run:
        d0 = np.float64(Q2[qr, q0 + e]) - np.float64(K2[kr, k0 + e])
        a0 += d0 * d0
        e += 1
    return (a0 + a1) + (a2 + a3)


@njit(cache=True, inline="always")
def _row_dot(Q2, qr, q0, K2, kr, k0, run):
    a0 = 0.0
    a1 = 0.0
    a2 = 0.0
    a3 = 0.0
    e = 0
    while e + 4 <= run:
        a0 += np.float64(Q2[qr, q0 + e]) * np.float64(K2[kr, k0 + e])
        a1 += np.float64(Q2[qr, q0 + e + 1]) * np.float64(K2[kr, k0 + e + 1])
        a2 += np.float64(Q2[qr, q0 + e + 2]) * np.float64(K2[kr, k0 + e + 2])
        a3 += np.float64(Q2[qr, q0 + e + 3]) * np.float64(K2[kr, k0 + e + 3])
        e += 4
    while e < run:
        a0 += np.float64(Q2[qr, q0 + e]) * np.float64(K2[kr, k0 + e])
        e += 1
    return (a0 + a1) + (a2 + a3)


@njit(cache=True, inline="always")
def patch_score(Q2, qy, qx, K2, ky, kx, p, C, metric, qn, kn):
    """Score of patch ``(qy, qx)`` against ``(ky, kx)`` on row-flattened padded maps."""
    run = p * C
    acc = 0.0
    if metric == 1:
        for dy in range(p):
            acc += _row_ssd(Q2, qy + dy, qx * C, K2, ky + dy, kx * C, run)
        return -acc
    for dy in range(p):
        acc += _row_dot(Q2, qy + dy, qx * C, K2, ky + dy, kx * C, run)
    if metric == 2:
        return acc / (qn[qy, qx] * kn[ky, kx])
    return acc


@njit(cache=True, inline="always")
def bounded_score(Q2, qy, qx, K2, ky, kx, p, C, metric, qn, kn, floor):
    """Like :func:`patch_score`, but neg_l2 may stop early once the score
    is known to be ``<= floor``; callers only keep scores ``> floor``."""
    if metric != 1:
        return patch_score(Q2, qy, qx, K2, ky, kx, p, C, metric, qn, kn)
    run = p * C
    limit = -floor
    acc = 0.0
    for dy in range(p):
        acc += _row_ssd(Q2, qy + dy, qx * C, K2, ky + dy, kx * C, run)
        if acc >= limit:
            return -acc
    return -acc


@njit(cache=True, inline="always")
def _contains(row, cand):
    for c in range(row.shape[0]):
        if row[c] == cand:
            return True
    return False


@njit(cache=True, inline="always")
def _insert(idx_row, sc_row, cand, s):
    """Insert into a descending list of fixed capacity; ties keep incumbents first."""
    k = idx_row.shape[0]
    if not s > sc_row[k - 1]:
        return False
    pos = k - 1
    while pos > 0 and sc_row[pos - 1] < s:
        sc_row[pos] = sc_row[pos - 1]
        idx_row[pos] = idx_row[pos - 1]
        pos -= 1
    sc_row[pos] = s
    idx_row[pos] = cand
    return True


def _init_random(Qpad, Kpad, p, metric, qn, kn, Hq, Wq, Hk, Wk, k, key, idx, sc, counts):
    C = Qpad.shape[2]
    Q2 = Qpad.reshape(Qpad.shape[0], Qpad.shape[1] * C)
    K2 = Kpad.reshape(Kpad.shape[0], Kpad.shape[1] * C)
    nk = Hk * Wk
    for y in prange(Hq):
        chosen = np.empty(k, dtype=np.int64)
        for x in range(Wq):
            q = y * Wq + x
            state = _stream(key, q)
            # Floyd's algorithm: uniform k-subset without replacement
            m = 0
            for j in range(nk - k, nk):
                state, t = _below(state, j + 1)
                dup = False
                for a in range(m):
                    if chosen[a] == t:
                        dup = True
                        break
                chosen[m] = j if dup else t
                m += 1
            for c in range(k):
                idx[q, c] = -1
                sc[q, c] = -np.inf
            for c in range(k):
                cand = chosen[c]
                ky = cand // Wk
                kx = cand - ky * Wk
                s = patch_score(Q2, y, x, K2, ky, kx, p, C, metric, qn, kn)
                _insert(idx[q], sc[q], cand, s)
            counts[q] += k


def _propagate(Qpad, Kpad, p, metric, qn, kn, Hq, Wq, Hk, Wk, idx, sc, src, counts):
    C = Qpad.shape[2]
    Q2 = Qpad.reshape(Qpad.shape[0], Qpad.shape[1] * C)
    K2 = Kpad.reshape(Kpad.shape[0], Kpad.shape[1] * C)
    k = idx.shape[1]
    for y in prange(Hq):
        for x in range(Wq):
            q = y * Wq + x
            n_eval = 0
            for li in range(4):
                step = 1 << li
                for d in range(4):
                    # up, down, left, right as (dy, dx)
                    if d == 0:
                        dy, dx = -step, 0
                    elif d == 1:
                        dy, dx = step, 0
                    elif d == 2:
                        dy, dx = 0, -step
                    else:
                        dy, dx = 0, step
                    ny = y + dy
                    nx = x + dx
                    if ny < 0 or ny >= Hq or nx < 0 or nx >= Wq:
                        continue
                    nb = ny * Wq + nx
                    for c in range(k):
                        j = src[nb, c]
                        jy = j // Wk
                        cy = jy - dy
                        cx = j - jy * Wk - dx
                        if cy < 0 or cy >= Hk or cx < 0 or cx >= Wk:
                            continue
                        cand = cy * Wk + cx
                        if _contains(idx[q], cand):
                            continue
                        s = bounded_score(Q2, y, x, K2, cy, cx, p, C, metric, qn, kn, sc[q, k - 1])
                        n_eval += 1
                        _insert(idx[q], sc[q], cand, s)
            counts[q] += n_eval


def _random_search(Qpad, Kpad, p, metric, qn, kn, Hq, Wq, Hk, Wk, idx, sc, key,
                   window_max, alpha, counts):
    C = Qpad.shape[2]
    Q2 = Qpad.reshape(Qpad.shape[0], Qpad.shape[1] * C)
    K2 = Kpad.reshape(Kpad.shape[0], Kpad.shape[1] * C)
    k = idx.shape[1]
    for y in prange(Hq):
        centres = np.empty(k, dtype=np.int64)
        for x in range(Wq):
            q = y * Wq + x
            state = _stream(key, q)
            n_eval = 0
            for c in range(k):
                centres[c] = idx[q, c]
            for c in range(k):
                cy = centres[c] // Wk
                cx = centres[c] - cy * Wk
                w = window_max
                while w >= 1.0:
                    r = int(w)
                    w *= alpha
                    y0 = max(cy - r, 0)
                    y1 = min(cy + r, Hk - 1)
                    x0 = max(cx - r, 0)
                    x1 = min(cx + r, Wk - 1)
                    state, ry = _below(state, y1 - y0 + 1)
                    state, rx = _below(state, x1 - x0 + 1)
                    ry += y0
                    rx += x0
                    cand = ry * Wk + rx
                    if _contains(idx[q], cand):
                        continue
                    s = bounded_score(Q2, y, x, K2, ry, rx, p, C, metric, qn, kn, sc[q, k - 1])
                    n_eval += 1
                    _insert(idx[q], sc[q], cand, s)
            counts[q] += n_eval


def _exact_topk(Qpad, Kpad, p, metric, qn, kn, Hq, Wq, Hk, Wk, idx, sc):
    C = Qpad.shape[2]
    Q2 = Qpad.reshape(Qpad.shape[0], Qpad.shape[1] * C)
    K2 = Kpad.reshape(Kpad.shape[0], Kpad.shape[1] * C)
    k = idx.shape[1]
    for y in prange(Hq):
        for x in range(Wq):
            q = y * Wq + x
            for c in range(k):
                idx[q, c] = -1
                sc[q, c] = -np.inf
            for ky in range(Hk):
                for kx in range(Wk):
                    s = patch_score(Q2, y, x, K2, ky, kx, p, C, metric, qn, kn)
                    _insert(idx[q], sc[q], ky * Wk + kx, s)


init_random_seq = njit(cache=True)(_init_random)
init_random_par = njit(parallel=True)(_init_random)
propagate_seq = njit(cache=True)(_propagate)
propagate_par = njit(parallel=True)(_propagate)
random_search_seq = njit(cache=True)(_random_search)
random_search_par = njit(parallel=True)(_random_search)
exact_topk_seq = njit(cache=True)(_exact_topk)
exact_topk_par = njit(parallel=True)(_exact_topk)


@njit(cache=True)
def gather_scores(Qpad, Kpad, p, metric, qn, kn, Wq, Wk, idx):
    C = Qpad.shape[2]
    Q2 = Qpad.reshape(Qpad.shape[0], Qpad.shape[1] * C)
    K2 = Kpad.reshape(Kpad.shape[0], Kpad.shape[1] * C)
    n, k = idx.shape
    out = np.empty((n, k))
    for q in range(n):
        y = q // Wq
        x = q - y * Wq
        for c in range(k):
            j = idx[q, c]
            ky = j // Wk
            out[q, c] = patch_score(Q2, y, x, K2, ky, j - ky * Wk, p, C, metric, qn, kn)
    return out


@njit(cache=True)
def scores_backward(Qpad, Kpad, p, metric, qn, kn, Wq, Wk, idx, dS, dQpad, dKpad):
    """Accumulate ``sum dS[q, c] * ds/dQ, ds/dK`` into padded gradient maps."""
    C = Qpad.shape[2]
    Q2 = Qpad.reshape(Qpad.shape[0], Qpad.shape[1] * C)
    K2 = Kpad.reshape(Kpad.shape[0], Kpad.shape[1] * C)
    n, k = idx.shape
    for q in range(n):
        y = q // Wq
        x = q - y * Wq
        for c in range(k):
            g = dS[q, c]
            if g == 0.0:
                continue
            j = idx[q, c]
            ky = j // Wk
            kx = j - ky * Wk
            if metric == 0:
                for dy in range(p):
                    for dx in range(p):
                        for ch in range(C):
                            dQpad[y + dy, x + dx, ch] += g * Kpad[ky + dy, kx + dx, ch]
                            dKpad[ky + dy, kx + dx, ch] += g * Qpad[y + dy, x + dx, ch]
            elif metric == 1:
                for dy in range(p):
                    for dx in range(p):
                        for ch in range(C):
                            diff = Qpad[y + dy, x + dx, ch] - Kpad[ky + dy, kx + dx, ch]
                            dQpad[y + dy, x + dx, ch] -= 2.0 * g * diff
                            dKpad[ky + dy, kx + dx, ch] += 2.0 * g * diff
            else:
                a = qn[y, x]
                b = kn[ky, kx]
                s = patch_score(Q2, y, x, K2, ky, kx, p, C, metric, qn, kn)
                for dy in range(p):
                    for dx in range(p):
                        for ch in range(C):
                            qv = Qpad[y + dy, x + dx, ch]
                            kv = Kpad[ky + dy, kx + dx, ch]
                            dQpad[y + dy, x + dx, ch] += g * (kv / (a * b) - s * qv / (a * a))
                            dKpad[ky + dy, kx + dx, ch] += g * (qv / (a * b) - s * kv / (b * b))


@njit(cache=True)
def aggregation_forward(S, idx, Hq, Wq, Hk, Wk, r, inv_t, V, out, raw):
    """Softmax over every vote ``j = j' - (i' - i)`` from the window around ``i``."""
    k = idx.shape[1]
    Cv = V.shape[1]
    for y in range(Hq):
        for x in range(Wq):
            i = y * Wq + x
            best = -np.inf
            for dy in range(-r, r + 1):
                for dx in range(-r, r + 1):
                    ny = y + dy
                    nx = x + dx
                    if ny < 0 or ny >= Hq or nx < 0 or nx >= Wq:
                        continue
                    ip = ny * Wq + nx
                    for c in range(k):
                        jp = idx[ip, c]
                        jy = jp // Wk
                        ty = jy - dy
                        tx = jp - jy * Wk - dx
                        if ty < 0 or ty >= Hk or tx < 0 or tx >= Wk:
                            continue
                        if not raw and S[ip, c] * inv_t > best:
                            best = S[ip, c] * inv_t
            for ch in range(Cv):
                out[i, ch] = 0.0
            z = 0.0
            for dy in range(-r, r + 1):
                for dx in range(-r, r + 1):
                    ny = y + dy
                    nx = x + dx
                    if ny < 0 or ny >= Hq or nx < 0 or nx >= Wq:
                        continue
                    ip = ny * Wq + nx
                    for c in range(k):
                        jp = idx[ip, c]
                        jy = jp // Wk
                        ty = jy - dy
                        tx = jp - jy * Wk - dx
                        if ty < 0 or ty >= Hk or tx < 0 or tx >= Wk:
                            continue
                        if raw:
                            w = S[ip, c]
                        else:
                            w = np.exp(S[ip, c] * inv_t - best)
                        z += w
                        j = ty * Wk + tx
                        for ch in range(Cv):
                            out[i, ch] += w * V[j, ch]
            if z != 0.0:
                for ch in range(Cv):
                    out[i, ch] /= z
    return out


@njit(cache=True)
def aggregation_backward(S, idx, Hq, Wq, Hk, Wk, r, inv_t, V, U, dS, dV):
    """Backprop ``U = dL/d(out)`` into the neighbour scores ``dS`` and values ``dV``."""
    k = idx.shape[1]
    Cv = V.shape[1]
    for y in range(Hq):
        for x in range(Wq):
            i = y * Wq + x
            best = -np.inf
            for dy in range(-r, r + 1):
                for dx in range(-r, r + 1):
                    ny = y + dy
                    nx = x + dx
                    if ny < 0 or ny >= Hq or nx < 0 or nx >= Wq:
                        continue
                    ip = ny * Wq + nx
                    for c in range(k):
                        jp = idx[ip, c]
                        jy = jp // Wk
                        ty = jy - dy
                        tx = jp - jy * Wk - dx
                        if ty < 0 or ty >= Hk or tx < 0 or tx >= Wk:
                            continue
                        if S[ip, c] * inv_t > best:
                            best = S[ip, c] * inv_t
            # pass 2: partition function and mean upstream alignment
            z = 0.0
            gbar = 0.0
            for dy in range(-r, r + 1):
                for dx in range(-r, r + 1):
                    ny = y + dy
                    nx = x + dx
                    if ny < 0 or ny >= Hq or nx < 0 or nx >= Wq:
                        continue
                    ip = ny * Wq + nx
                    for c in range(k):
                        jp = idx[ip, c]
                        jy = jp // Wk
                        ty = jy - dy
                        tx = jp - jy * Wk - dx
                        if ty < 0 or ty >= Hk or tx < 0 or tx >= Wk:
                            continue
                        w = np.exp(S[ip, c] * inv_t - best)
                        j = ty * Wk + tx
                        g = 0.0
                        for ch in range(Cv):
                            g += U[i, ch] * V[j, ch]
                        z += w
                        gbar += w * g
            if z == 0.0:
                continue
            gbar /= z
            for dy in range(-r, r + 1):
                for dx in range(-r, r + 1):
                    ny = y + dy
                    nx = x + dx
                    if ny < 0 or ny >= Hq or nx < 0 or nx >= Wq:
                        continue
                    ip = ny * Wq + nx
                    for c in range(k):
                        jp = idx[ip, c]
                        jy = jp // Wk
                        ty = jy - dy
                        tx = jp - jy * Wk - dx
                        if ty < 0 or ty >= Hk or tx < 0 or tx >= Wk:
                            continue
                        w = np.exp(S[ip, c] * inv_t - best) / z
                        j = ty * Wk + tx
                        g = 0.0
                        for ch in range(Cv):
                            g += U[i, ch] * V[j, ch]
                            dV[j, ch] += w * U[i, ch]
                        dS[ip, c] += w * (g - gbar) * inv_t
