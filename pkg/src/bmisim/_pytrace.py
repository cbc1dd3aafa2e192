"""Vectorized numpy implementation of the sequential bundle trace.

This is the reference backend; ``_ctrace`` compiles the same loop.  Both take
the flat surface table produced by :meth:`LensPrescription.surface_table`.
"""

import numpy as np

ALIVE, MISS, CLIPPED, TIR = 0, 1, 2, 3
KIND_REFRACT, KIND_STOP, KIND_SENSOR = 0, 1, 2

NEWTON_TOL = 1e-10
NEWTON_MAXITER = 50


def _sag_terms(px, py, c, a):
    r2 = px * px + py * py
    arg = 1.0 - c * c * r2
    bad = arg < 0.0
    sq = np.sqrt(np.where(bad, 1.0, arg))
    sag = c * r2 / (1.0 + sq) + r2 * r2 * (a[0] + r2 * (a[1] + r2 * (a[2] + r2 * a[3])))
    # d(sag)/dr divided by r
    g = c / sq + r2 * (4 * a[0] + r2 * (6 * a[1] + r2 * (8 * a[2] + r2 * 10 * a[3])))
    return sag, g, bad


def _asphere_newton(o, d, t, c, a):
    """Refine the spherical intersection parameter ``t`` onto the even asphere."""
    n = t.shape[0]
    ok = np.ones(n, dtype=bool)
    active = np.ones(n, dtype=bool)
    for _ in range(NEWTON_MAXITER):
        idx = np.nonzero(active)[0]
        if idx.size == 0:
            break
        ti = t[idx]
        p = o[idx] + ti[:, None] * d[idx]
        sag, g, bad = _sag_terms(p[:, 0], p[:, 1], c, a)
        f = p[:, 2] - sag
        done = (np.abs(f) < NEWTON_TOL) & ~bad
        fp = d[idx, 2] - g * (p[:, 0] * d[idx, 0] + p[:, 1] * d[idx, 1])
        fail = bad | (fp == 0.0)
        step = np.where(fail | done, 0.0, -f / np.where(fp == 0.0, 1.0, fp))
        # backtrack while the residual grows
        absf = np.abs(f)
        for _ in range(20):
            pn = o[idx] + (ti + step)[:, None] * d[idx]
            sn, _, badn = _sag_terms(pn[:, 0], pn[:, 1], c, a)
            worse = (badn | (np.abs(pn[:, 2] - sn) > absf)) & (step != 0.0)
            if not worse.any():
                break
            step = np.where(worse, 0.5 * step, step)
        t[idx] = ti + step
        ok[idx[fail & ~done]] = False
        active[idx[done | fail]] = False
    ok &= ~active
    return t, ok


def trace_bundle(origins, directions, kind, z, c, sd, asph, n1, n2):
    """Trace rays through the table, returning end points, directions and status.

    Returns ``(pos, dirs, status, surf)`` where ``status`` is one of
    ``ALIVE/MISS/CLIPPED/TIR`` and ``surf`` is the index of the surface that
    terminated the ray (``-1`` for rays alive at the last surface).
    """
    pos = np.array(origins, dtype=np.float64, copy=True)
    dirs = np.array(directions, dtype=np.float64, copy=True)
    nray = pos.shape[0]
    status = np.zeros(nray, dtype=np.int8)
    surf = np.full(nray, -1, dtype=np.int32)

    for s in range(len(kind)):
        live = np.nonzero(status == ALIVE)[0]
        if live.size == 0:
            break
        o = pos[live].copy()
        o[:, 2] -= z[s]
        d = dirs[live]
        cs = c[s]
        # transfer to the vertex plane first; keeps |o| small for distant objects
        backward = d[:, 2] <= 0.0
        t0 = -o[:, 2] / np.where(backward, 1.0, d[:, 2])
        o = o + t0[:, None] * d
        o[:, 2] = 0.0
        od = np.einsum("ij,ij->i", o, d)
        oo = np.einsum("ij,ij->i", o, o)
        B = d[:, 2] - cs * od
        C = cs * oo - 2.0 * o[:, 2]
        disc = B * B - cs * C
        root = np.sqrt(np.where(disc < 0.0, 0.0, disc))
        denom = B + root
        miss = (disc < 0.0) | (denom <= 0.0) | backward
        t = C / np.where(miss, 1.0, denom)

        a = asph[s]
        aspheric = bool(np.any(a != 0.0))
        if aspheric:
            t, ok = _asphere_newton(o, d, t, cs, a)
            miss |= ~ok
        p = o + t[:, None] * d

        r2 = p[:, 0] ** 2 + p[:, 1] ** 2
        clipped = ~miss & (r2 > sd[s] * sd[s])

        dead = miss | clipped
        status[live[miss]] = MISS
        status[live[clipped]] = CLIPPED
        surf[live[dead]] = s

        keep = ~dead
        live = live[keep]
        p = p[keep]
        d = d[keep]
        p_global = p.copy()
        p_global[:, 2] += z[s]
        pos[live] = p_global

        if kind[s] == KIND_REFRACT and n1[s] != n2[s]:
            if aspheric:
                _, g, _ = _sag_terms(p[:, 0], p[:, 1], cs, a)
                nrm = np.stack([-g * p[:, 0], -g * p[:, 1], np.ones_like(g)], axis=1)
            else:
                nrm = np.stack([-cs * p[:, 0], -cs * p[:, 1], 1.0 - cs * p[:, 2]], axis=1)
            nrm /= np.linalg.norm(nrm, axis=1)[:, None]
            new_d, tir = refract_many(d, nrm, n1[s], n2[s])
            status[live[tir]] = TIR
            surf[live[tir]] = s
            ok = ~tir
            dirs[live[ok]] = new_d[ok]
        if kind[s] == KIND_SENSOR:
            break

    return pos, dirs, status, surf


def refract_many(d, nrm, n1, n2):
    cos_i = -np.einsum("ij,ij->i", nrm, d)
    flip = cos_i < 0.0
    nrm = np.where(flip[:, None], -nrm, nrm)
    cos_i = np.abs(cos_i)
    eta = n1 / n2
    k = 1.0 - eta * eta * (1.0 - cos_i * cos_i)
    tir = k < 0.0
    sk = np.sqrt(np.where(tir, 0.0, k))
    t = eta * d + (eta * cos_i - sk)[:, None] * nrm
    t /= np.linalg.norm(t, axis=1)[:, None]
    return t, tir
