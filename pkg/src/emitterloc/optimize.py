"""Nelder-Mead downhill simplex minimizer."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass
class SimplexResult:
    x: np.ndarray
    fun: float
    nit: int
    nfev: int
    converged: bool


def nelder_mead(
    func,
    x0,
    steps,
    ftol: float = 1e-9,
    xtol: float = 1e-6,
    max_iter: int = 2000,
    reflect: float = 1.0,
    expand: float = 2.0,
    contract: float = 0.5,
    shrink: float = 0.5,
) -> SimplexResult:
    """Minimize ``func`` starting from the simplex ``x0, x0 + steps[k] e_k``.

    Converged when the spread of function values across the simplex is at
    most ``ftol * max(1, |f_best|)`` and every vertex lies within ``xtol``
    (max-norm) of the best vertex.  Hitting ``max_iter`` returns the best
    vertex with ``converged=False``.
    """
    x0 = np.asarray(x0, dtype=np.float64)
    n = x0.size
    sim = np.empty((n + 1, n))
    sim[0] = x0
    for k in range(n):
        sim[k + 1] = x0
        sim[k + 1, k] += steps[k]
    fsim = np.array([func(v) for v in sim])
    nfev = n + 1

    nit = 0
    converged = False
    while True:
        order = np.argsort(fsim, kind="stable")
        sim = sim[order]
        fsim = fsim[order]
        spread_f = fsim[-1] - fsim[0]
        spread_x = np.max(np.abs(sim[1:] - sim[0]))
        if spread_f <= ftol * max(1.0, abs(fsim[0])) and spread_x <= xtol:
            converged = True
            break
        if nit >= max_iter:
            break
        nit += 1

        centroid = sim[:-1].mean(axis=0)
        xr = centroid + reflect * (centroid - sim[-1])
        fr = func(xr)
        nfev += 1
        if fr < fsim[0]:
            xe = centroid + expand * (xr - centroid)
            fe = func(xe)
            nfev += 1
            if fe < fr:
                sim[-1], fsim[-1] = xe, fe
            else:
                sim[-1], fsim[-1] = xr, fr
            continue
        if fr < fsim[-2]:
            sim[-1], fsim[-1] = xr, fr
            continue
        if fr < fsim[-1]:
            xc = centroid + contract * (xr - centroid)
            fc = func(xc)
            nfev += 1
            if fc <= fr:
                sim[-1], fsim[-1] = xc, fc
                continue
        else:
            xc = centroid + contract * (sim[-1] - centroid)
            fc = func(xc)
            nfev += 1
            if fc < fsim[-1]:
                sim[-1], fsim[-1] = xc, fc
                continue
        sim[1:] = sim[0] + shrink * (sim[1:] - sim[0])
        for k in range(1, n + 1):
            fsim[k] = func(sim[k])
        nfev += n

    best = int(np.argmin(fsim))
    return SimplexResult(sim[best].copy(), float(fsim[best]), nit, nfev, converged)
