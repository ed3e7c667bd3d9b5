"""Compiled plant right-hand side and RK4 step.

Mirrors ``PlantModel.rhs`` loop by loop; ``tests/test_biofilter.py`` checks the
two against each other.
"""

import numpy as np
from numba import njit

# kin: mu_H, K_S, K_NO3, K_NO2, eta_NO3, eta_NO2, b_H
# geo: V_liquid, film_area, rho_f, k_L, lambda_f, k_det, bed_depth, layer thickness floor


@njit(cache=True)
def _sat(s, k):
    if s <= 0.0:
        return 0.0
    return s / (k + s)


@njit(cache=True)
def _react(c, kin, S, out):
    xh = c[4]
    sub = kin[0] * xh * _sat(c[0], kin[1])
    r0 = sub * kin[4] * _sat(c[1], kin[2])
    r1 = sub * kin[5] * _sat(c[2], kin[3])
    r2 = kin[6] * xh
    for j in range(6):
        out[j] = r0 * S[0, j] + r1 * S[1, j] + r2 * S[2, j]


@njit(cache=True)
def plant_rhs(y, feed, Q, nt, nl, kin, S, geo, D, out):
    V = geo[0]
    A = geo[1]
    rho_f = geo[2]
    k_L = geo[3]
    lam = geo[4]
    k_det = geo[5]
    depth = geo[6]
    h_floor = geo[7]
    nb = nt * 6
    nf = nt * nl * 6
    r = np.empty(6)
    cf = np.empty((nl, 6))
    h = np.empty(nl)
    for i in range(nt):
        b0 = i * 6
        f0 = nb + i * nl * 6
        # bulk reactions and advection
        _react(y[b0 : b0 + 6], kin, S, r)
        for j in range(6):
            up = feed[j] if i == 0 else y[b0 - 6 + j]
            out[b0 + j] = r[j] + (Q / V) * (up - y[b0 + j])
        L = 0.0
        h_top = 0.0
        for l in range(nl):
            o = f0 + l * 6
            hl = (y[o + 4] + y[o + 5]) / rho_f
            L += hl
            h_top = hl
            if hl < h_floor:
                hl = h_floor
            h[l] = hl
            for j in range(6):
                cf[l, j] = y[o + j] / hl
            _react(cf[l], kin, S, r)
            for j in range(6):
                out[o + j] = r[j] * hl
        top = f0 + (nl - 1) * 6
        for j in range(4):
            J = k_L * (cf[nl - 1, j] - y[b0 + j])
            out[b0 + j] += J * (A / V)
            out[top + j] -= J
        for l in range(nl - 1):
            dist = 0.5 * (h[l] + h[l + 1])
            o = f0 + l * 6
            for j in range(4):
                Fd = D[j] * (cf[l, j] - cf[l + 1, j]) / dist
                out[o + j] -= Fd
                out[o + 6 + j] += Fd
        for j in range(4, 6):
            if lam > 0.0:
                att = lam * Q * depth / nt * y[b0 + j]
                out[b0 + j] -= att / V
                out[top + j] += att / A
            if k_det > 0.0:
                det = cf[nl - 1, j] * k_det * L * h_top
                out[top + j] -= det
                out[b0 + j] += det * (A / V)
    last = (nt - 1) * 6
    for j in range(6):
        out[nb + nf + j] = Q * feed[j]
        out[nb + nf + 6 + j] = Q * y[last + j]


@njit(cache=True)
def plant_rk4(y, feed, Q, dt, nt, nl, kin, S, geo, D):
    n = y.size
    k1 = np.empty(n)
    k2 = np.empty(n)
    k3 = np.empty(n)
    k4 = np.empty(n)
    tmp = np.empty(n)
    plant_rhs(y, feed, Q, nt, nl, kin, S, geo, D, k1)
    for i in range(n):
        tmp[i] = y[i] + 0.5 * dt * k1[i]
    plant_rhs(tmp, feed, Q, nt, nl, kin, S, geo, D, k2)
    for i in range(n):
        tmp[i] = y[i] + 0.5 * dt * k2[i]
    plant_rhs(tmp, feed, Q, nt, nl, kin, S, geo, D, k3)
    for i in range(n):
        tmp[i] = y[i] + dt * k3[i]
    plant_rhs(tmp, feed, Q, nt, nl, kin, S, geo, D, k4)
    res = np.empty(n)
    for i in range(n):
        res[i] = y[i] + (dt / 6.0) * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i])
    return res


@njit(cache=True)
def relayer(M, rho_f):
    """Equal-thickness re-layering of film content, mass conserving.

    Content is taken as uniform within each old layer and each component's
    cumulative profile is cut at the new boundaries.
    """
    nt, nl, nc = M.shape
    out = M.copy()
    if nl == 1:
        return out
    z = np.empty(nl + 1)
    for i in range(nt):
        z[0] = 0.0
        for l in range(nl):
            z[l + 1] = z[l] + (M[i, l, 4] + M[i, l, 5]) / rho_f
        L = z[nl]
        if L <= 0.0:
            continue
        prev = np.zeros(nc)
        j = 0
        for k in range(1, nl + 1):
            if k == nl:
                cut = np.zeros(nc)
                for l in range(nl):
                    for c in range(nc):
                        cut[c] += M[i, l, c]
            else:
                zk = L * k / nl
                while j < nl - 1 and z[j + 1] <= zk:
                    j += 1
                hj = z[j + 1] - z[j]
                w = (zk - z[j]) / hj if hj > 0.0 else 0.0
                cut = np.zeros(nc)
                for l in range(j):
                    for c in range(nc):
                        cut[c] += M[i, l, c]
                for c in range(nc):
                    cut[c] += w * M[i, j, c]
            for c in range(nc):
                out[i, k - 1, c] = cut[c] - prev[c]
                prev[c] = cut[c]
    return out
