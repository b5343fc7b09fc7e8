"""Limited-memory BFGS with a strong-Wolfe line search."""

from __future__ import annotations

import csv
import logging
import math
import time
from collections import deque
from dataclasses import dataclass, field

import numpy as np

log = logging.getLogger(__name__)

CONVERGED = "converged"
MAX_ITERS = "max_iters"
TIME_LIMIT = "time_limit"
LINE_SEARCH_FAILED = "line_search_failed"
NONFINITE = "nonfinite"


@dataclass
class SolverConfig:
    history: int = 10
    c1: float = 1e-4
    c2: float = 0.9
    max_iters: int = 300_000
    grad_tol: float = 1e-2
    max_line_search: int = 30
    max_seconds: float | None = None
    curvature_eps: float = 1e-10

    def __post_init__(self):
        if not 0 < self.c1 < self.c2 < 1:
            raise ValueError("line search constants need 0 < c1 < c2 < 1")
        if self.history < 1 or self.max_iters < 0 or self.grad_tol < 0:
            raise ValueError("invalid solver settings")


@dataclass
class TraceRow:
    iter: int
    E: float
    grad_norm: float
    step: float


@dataclass
class SolverResult:
    x: np.ndarray
    f: float
    grad: np.ndarray
    iterations: int
    status: str
    trace: list = field(default_factory=list)
    n_evals: int = 0
    rejected_pairs: int = 0

    @property
    def converged(self) -> bool:
        return self.status == CONVERGED


def two_loop(grad, pairs, gamma0: float | None = None) -> np.ndarray:
    """Apply the L-BFGS inverse-Hessian approximation to ``grad``.

    ``pairs`` is an oldest-first sequence of ``(s, y)``; the initial matrix is
    ``gamma0 * I`` (default ``s'y / y'y`` of the newest pair).
    """
    q = np.array(grad, dtype=float, copy=True)
    if not pairs:
        return q
    rhos = [1.0 / float(y @ s) for s, y in pairs]
    alphas = []
    for (s, y), rho in zip(reversed(pairs), reversed(rhos)):
        a = rho * float(s @ q)
        q -= a * y
        alphas.append(a)
    if gamma0 is None:
        s, y = pairs[-1]
        gamma0 = float(s @ y) / float(y @ y)
    r = gamma0 * q
    for (s, y), rho, a in zip(pairs, rhos, reversed(alphas)):
        b = rho * float(y @ r)
        r += (a - b) * s
    return r


def _cubic_min(a, fa, da, b, fb, db):
    """Minimizer of the cubic interpolating (a, fa, da) and (b, fb, db), or None."""
    if a == b:
        return None
    d1 = da + db - 3 * (fa - fb) / (a - b)
    disc = d1 * d1 - da * db
    if disc < 0:
        return None
    d2 = math.copysign(math.sqrt(disc), b - a)
    den = db - da + 2 * d2
    if den == 0:
        return None
    return b - (b - a) * (db + d2 - d1) / den


class _LineSearch:
    def __init__(self, fun, x, f0, g0, d, cfg: SolverConfig):
        self.fun, self.x, self.d, self.cfg = fun, x, d, cfg
        self.f0 = f0
        self.d0 = float(g0 @ d)
        self.evals = 0
        self.nonfinite = False

    def phi(self, a):
        self.evals += 1
        f, g = self.fun(self.x + a * self.d)
        f = float(f)
        if not math.isfinite(f) or not np.all(np.isfinite(g)):
            self.nonfinite = True
            return math.inf, math.nan, None
        return f, float(g @ self.d), g

    def armijo_fails(self, a, f):
        return f > self.f0 + self.cfg.c1 * a * self.d0

    def curvature_ok(self, da):
        return abs(da) <= -self.cfg.c2 * self.d0

    def run(self, a1: float):
        """Strong-Wolfe step ``(alpha, f, g)`` or ``None``."""
        a_prev, f_prev, d_prev, g_prev = 0.0, self.f0, self.d0, None
        a = a1
        for i in range(self.cfg.max_line_search):
            if self.evals >= self.cfg.max_line_search:
                return None
            fa, da, ga = self.phi(a)
            if not math.isfinite(fa):
                # overshoot into an invalid region: retreat towards the last good step
                return self.zoom(a_prev, f_prev, d_prev, a, fa, da, g_prev)
            if self.armijo_fails(a, fa) or (i > 0 and fa >= f_prev):
                return self.zoom(a_prev, f_prev, d_prev, a, fa, da, g_prev)
            if self.curvature_ok(da):
                return a, fa, ga
            if da >= 0:
                return self.zoom(a, fa, da, a_prev, f_prev, d_prev, ga)
            a_prev, f_prev, d_prev, g_prev = a, fa, da, ga
            a = 2.0 * a
        return None

    def zoom(self, lo, flo, dlo, hi, fhi, dhi, glo=None):
        while self.evals < self.cfg.max_line_search:
            width = hi - lo
            a = None
            if math.isfinite(fhi) and math.isfinite(dhi):
                a = _cubic_min(lo, flo, dlo, hi, fhi, dhi)
            lo_b, hi_b = sorted((lo + 0.1 * width, hi - 0.1 * width))
            if a is None or not (lo_b <= a <= hi_b):
                a = lo + 0.5 * width
            if a == lo or a == hi:
                break
            fa, da, ga = self.phi(a)
            if not math.isfinite(fa) or self.armijo_fails(a, fa) or fa >= flo:
                hi, fhi, dhi = a, fa, da
            else:
                if self.curvature_ok(da):
                    return a, fa, ga
                if da * (hi - lo) >= 0:
                    hi, fhi, dhi = lo, flo, dlo
                lo, flo, dlo, glo = a, fa, da, ga
        # fall back to the best sufficient-decrease point found, if any
        if lo > 0 and glo is not None:
            return lo, flo, glo
        return None


def lbfgs(fun, x0, config: SolverConfig | None = None, callback=None) -> SolverResult:
    """Minimize ``fun(x) -> (f, grad)`` from ``x0``.

    Stops when ``||grad||_2 <= grad_tol`` (status ``"converged"``), after
    ``max_iters`` iterations, when the time budget runs out, or when the line
    search cannot make progress.  Iterates are only ever accepted at finite
    objective values, so on failure ``x`` is the last finite iterate.
    """
    cfg = config or SolverConfig()
    x = np.array(x0, dtype=float, copy=True)
    f, g = fun(x)
    f = float(f)
    g = np.asarray(g, dtype=float)
    if not math.isfinite(f) or not np.all(np.isfinite(g)):
        raise ValueError("objective is not finite at the starting point")
    gn = float(np.linalg.norm(g))
    trace = [TraceRow(0, f, gn, 0.0)]
    pairs: deque = deque(maxlen=cfg.history)
    n_evals = 1
    rejected = 0
    status = MAX_ITERS
    t0 = time.monotonic()
    it = 0
    while True:
        if gn <= cfg.grad_tol:
            status = CONVERGED
            break
        if it >= cfg.max_iters:
            status = MAX_ITERS
            break
        if cfg.max_seconds is not None and time.monotonic() - t0 > cfg.max_seconds:
            status = TIME_LIMIT
            break
        d = -two_loop(g, list(pairs))
        if not float(g @ d) < 0:
            pairs.clear()
            d = -g
        a1 = 1.0 if pairs else min(1.0, 1.0 / gn)
        ls = _LineSearch(fun, x, f, g, d, cfg)
        found = ls.run(a1)
        n_evals += ls.evals
        if found is None and pairs:
            log.debug("line search failed at iteration %d; restarting from steepest descent", it)
            pairs.clear()
            d = -g
            ls = _LineSearch(fun, x, f, g, d, cfg)
            found = ls.run(min(1.0, 1.0 / gn))
            n_evals += ls.evals
        if found is None:
            status = NONFINITE if ls.nonfinite else LINE_SEARCH_FAILED
            log.warning("stopping at iteration %d: %s", it, status)
            break
        a, f_new, g_new = found
        s = a * d
        y = g_new - g
        if float(y @ s) > cfg.curvature_eps * float(np.linalg.norm(y) * np.linalg.norm(s)):
            pairs.append((s, y))
        else:
            rejected += 1
        x = x + s
        f, g = f_new, g_new
        gn = float(np.linalg.norm(g))
        it += 1
        trace.append(TraceRow(it, f, gn, float(np.linalg.norm(s))))
        if callback is not None:
            callback(it, x, f, g)
    return SolverResult(x, f, g, it, status, trace, n_evals, rejected)


def write_trace_csv(trace, path):
    """Write ``iter,E,grad_norm,step`` rows."""
    with open(path, "w", newline="") as fh:
        fh.write("iter,E,grad_norm,step\n")
        for r in trace:
            fh.write(f"{r.iter},{r.E!r},{r.grad_norm!r},{r.step!r}\n")


def read_trace_csv(path) -> list[TraceRow]:
    with open(path, newline="") as fh:
        rd = csv.DictReader(fh)
        if rd.fieldnames != ["iter", "E", "grad_norm", "step"]:
            raise ValueError(f"unexpected trace header {rd.fieldnames}")
        return [TraceRow(int(r["iter"]), float(r["E"]), float(r["grad_norm"]), float(r["step"])) for r in rd]
