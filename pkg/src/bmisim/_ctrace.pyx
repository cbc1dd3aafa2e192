# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled per-ray sequential trace.  Same contract as ``_pytrace.trace_bundle``."""

import numpy as np
cimport numpy as cnp
from libc.math cimport sqrt, fabs

cnp.import_array()

cdef enum:
    ALIVE = 0
    MISS = 1
    CLIPPED = 2
    TIR = 3
    KIND_REFRACT = 0
    KIND_SENSOR = 2
    NEWTON_MAXITER = 50

cdef double NEWTON_TOL = 1e-10


cdef inline bint _sag(double px, double py, double c, const double[::1] a,
                      double* sag, double* g) noexcept nogil:
    cdef double r2 = px * px + py * py
    cdef double arg = 1.0 - c * c * r2
    cdef double sq
    if arg < 0.0:
        return False
    sq = sqrt(arg)
    sag[0] = c * r2 / (1.0 + sq) + r2 * r2 * (a[0] + r2 * (a[1] + r2 * (a[2] + r2 * a[3])))
    g[0] = c / sq + r2 * (4 * a[0] + r2 * (6 * a[1] + r2 * (8 * a[2] + r2 * 10 * a[3])))
    return True


cdef inline bint _newton(double ox, double oy, double oz, double dx, double dy, double dz,
                         double c, const double[::1] a, double* t) noexcept nogil:
    cdef int it, k
    cdef double px, py, pz, sag, g, f, fp, step, sn, gn, tn
    for it in range(NEWTON_MAXITER):
        px = ox + t[0] * dx
        py = oy + t[0] * dy
        pz = oz + t[0] * dz
        if not _sag(px, py, c, a, &sag, &g):
            return False
        f = pz - sag
        if fabs(f) < NEWTON_TOL:
            return True
        fp = dz - g * (px * dx + py * dy)
        if fp == 0.0:
            return False
        step = -f / fp
        for k in range(20):
            tn = t[0] + step
            if _sag(ox + tn * dx, oy + tn * dy, c, a, &sn, &gn):
                if fabs(oz + tn * dz - sn) <= fabs(f):
                    break
            step = 0.5 * step
        t[0] = t[0] + step
    return False


def trace_bundle(origins, directions, int[::1] kind, double[::1] z, double[::1] c,
                 double[::1] sd, double[:, ::1] asph, double[::1] n1, double[::1] n2):
    cdef double[:, ::1] pos = np.array(origins, dtype=np.float64, order="C", copy=True)
    cdef double[:, ::1] dirs = np.array(directions, dtype=np.float64, order="C", copy=True)
    cdef Py_ssize_t nray = pos.shape[0]
    cdef Py_ssize_t nsurf = kind.shape[0]
    status_arr = np.zeros(nray, dtype=np.int8)
    surf_arr = np.full(nray, -1, dtype=np.int32)
    cdef signed char[::1] status = status_arr
    cdef int[::1] surf = surf_arr
    aspheric_arr = np.any(np.asarray(asph) != 0.0, axis=1).astype(np.int32)
    cdef int[::1] aspheric = aspheric_arr

    cdef Py_ssize_t i, s
    cdef double ox, oy, oz, dx, dy, dz, cs, B, C, disc, root, denom, t
    cdef double px, py, pz, qx, qy, qz, nx, ny, nz, nn, cos_i, eta, k, sk, tx, ty, tzz, tn, sag, g

    with nogil:
        for i in range(nray):
            dx = dirs[i, 0]
            dy = dirs[i, 1]
            dz = dirs[i, 2]
            px = pos[i, 0]
            py = pos[i, 1]
            pz = pos[i, 2]
            for s in range(nsurf):
                if dz <= 0.0:
                    status[i] = MISS
                    surf[i] = s
                    break
                # transfer to the vertex plane first; keeps |o| small for distant objects
                t = (z[s] - pz) / dz
                ox = px + t * dx
                oy = py + t * dy
                oz = 0.0
                cs = c[s]
                B = dz - cs * (ox * dx + oy * dy + oz * dz)
                C = cs * (ox * ox + oy * oy + oz * oz) - 2.0 * oz
                disc = B * B - cs * C
                if disc < 0.0:
                    status[i] = MISS
                    surf[i] = s
                    break
                root = sqrt(disc)
                denom = B + root
                if denom <= 0.0:
                    status[i] = MISS
                    surf[i] = s
                    break
                t = C / denom
                if aspheric[s]:
                    if not _newton(ox, oy, oz, dx, dy, dz, cs, asph[s], &t):
                        status[i] = MISS
                        surf[i] = s
                        break
                qx = ox + t * dx
                qy = oy + t * dy
                qz = oz + t * dz
                if qx * qx + qy * qy > sd[s] * sd[s]:
                    status[i] = CLIPPED
                    surf[i] = s
                    break
                px = qx
                py = qy
                pz = qz + z[s]
                if kind[s] == KIND_REFRACT and n1[s] != n2[s]:
                    if aspheric[s]:
                        _sag(qx, qy, cs, asph[s], &sag, &g)
                        nx = -g * qx
                        ny = -g * qy
                        nz = 1.0
                    else:
                        nx = -cs * qx
                        ny = -cs * qy
                        nz = 1.0 - cs * qz
                    nn = sqrt(nx * nx + ny * ny + nz * nz)
                    nx = nx / nn
                    ny = ny / nn
                    nz = nz / nn
                    cos_i = -(nx * dx + ny * dy + nz * dz)
                    if cos_i < 0.0:
                        nx = -nx
                        ny = -ny
                        nz = -nz
                        cos_i = -cos_i
                    eta = n1[s] / n2[s]
                    k = 1.0 - eta * eta * (1.0 - cos_i * cos_i)
                    if k < 0.0:
                        status[i] = TIR
                        surf[i] = s
                        break
                    sk = sqrt(k)
                    tx = eta * dx + (eta * cos_i - sk) * nx
                    ty = eta * dy + (eta * cos_i - sk) * ny
                    tzz = eta * dz + (eta * cos_i - sk) * nz
                    tn = sqrt(tx * tx + ty * ty + tzz * tzz)
                    dx = tx / tn
                    dy = ty / tn
                    dz = tzz / tn
                if kind[s] == KIND_SENSOR:
                    break
            pos[i, 0] = px
            pos[i, 1] = py
            pos[i, 2] = pz
            dirs[i, 0] = dx
            dirs[i, 1] = dy
            dirs[i, 2] = dz
    return np.asarray(pos), np.asarray(dirs), status_arr, surf_arr
