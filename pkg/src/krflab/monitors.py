"""Quantities tracked by the a-priori estimates, their evolution identities, and fitted envelopes."""

from __future__ import annotations

import json
import math
import os
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from scipy.optimize import linprog
from scipy.spatial import ConvexHull, QhullError

from .grid import GridSpec, assert_real, integrate
from .tensor import (
    MetricField,
    RefJet,
    Tensor,
    _convert_step,
    covderiv_ref,
    curvature_direct,
    curvature_via_ref,
    laplacian,
    metric_from_potential,
    pinch_eigenvalues,
    ricci,
    sup_abs,
    tensor_norm,
)

__all__ = [
    "EmptySeries",
    "DiagonalizationFailure",
    "MonitorRecord",
    "ResidualReport",
    "ConstantsFit",
    "WindowSample",
    "monitor_S",
    "monitor_Q",
    "monitor_Qm",
    "curvature_norms",
    "monitor_record",
    "evolution_residuals",
    "window_samples",
    "q_remainder",
    "q_evolution_decomposition",
    "fit_s_inequality",
    "q_plus_c5s_check",
    "max_principle_check",
    "shi_fit",
    "theorem1_verdict",
    "w_bound_check",
    "csv_header",
    "write_csv",
    "write_reports",
    "emit_plotdata",
]

CSV_VERSION = "# krflab monitor-series v1"
REPORT_VERSION = "krflab-reports v1"
PLOT_VERSION = "# krflab plotdata v1"


class EmptySeries(ValueError):
    """A fit was requested on a series without usable samples."""


class DiagonalizationFailure(ArithmeticError):
    """Simultaneous diagonalization of ``g`` against ``g0`` broke down at a point."""


# -- records ---------------------------------------------------------------


@dataclass
class MonitorRecord:
    t: float
    steps: int
    S_min: float
    S_max: float
    Q_sup: float
    Qm_sup: list[float]
    rm: list[float]
    lam_min: float
    lam_max: float
    C_eq: float
    volume: float
    w_sup: float
    ric_sup: float = float("nan")
    gauss_bonnet: float = float("nan")
    flags: str = ""

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "MonitorRecord":
        return cls(**{f.name: d[f.name] for f in fields(cls) if f.name in d})

    def csv_values(self) -> list[float]:
        return [self.t, self.S_min, self.S_max, self.Q_sup, *self.Qm_sup, *self.rm,
                self.lam_min, self.lam_max, self.C_eq, self.volume, self.w_sup]

    def s_sandwich_holds(self, n: int, tol: float = 1e-10) -> bool:
        """``n / C_eq <= S <= n C_eq`` with ``C_eq`` from the same record."""
        c = self.C_eq
        return n / c - tol <= self.S_min and self.S_max <= n * c + tol


@dataclass
class ResidualReport:
    name: str
    residual: float
    scale: float
    tolerance: float
    passed: bool
    times: list[float] = field(default_factory=list)
    extra: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return _jsonable(asdict(self))


@dataclass
class ConstantsFit:
    """Fitted envelope constants: ``A[k], B[k]`` per curvature order plus the Q-inequality constants."""

    A: list[float] = field(default_factory=list)
    B: list[float] = field(default_factory=list)
    t_split: float = 0.0
    C3: float | None = None
    C4: float | None = None
    c1: float | None = None
    C2: float | None = None
    C5: float | None = None
    C6: float | None = None

    def to_dict(self) -> dict:
        return _jsonable(asdict(self))


def _jsonable(obj):
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, (np.floating, float)):
        x = float(obj)
        return x if math.isfinite(x) else repr(x)
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, np.bool_):
        return bool(obj)
    return obj


# -- pointwise monitors ----------------------------------------------------


def monitor_S(g: MetricField, g0: MetricField) -> tuple[np.ndarray, float, float]:
    """``S = g0^{jbar i} g_{i jbar}`` with its extrema."""
    S = assert_real(np.einsum("ji...,ij...->...", g0.inv, g.g), tol=1e-10, what="S")
    return S, float(S.min()), float(S.max())


def monitor_Q(g: MetricField, g0: MetricField, jet: RefJet | None = None) -> tuple[np.ndarray, float]:
    """``Q = |g_{i jbar; k}|^2`` with every slot weighted by ``g``."""
    jet = jet or RefJet(g, g0)
    Q = assert_real(tensor_norm(jet.g_k, g), tol=1e-10, what="Q")
    return Q, float(Q.max())


def monitor_Qm(g: MetricField, g0: MetricField, m: int) -> tuple[np.ndarray, float]:
    """``Q_m = |nabla_0^m g|^2_{g0}`` summed over all ``2^m`` holomorphic/anti-holomorphic direction strings."""
    if m < 1:
        raise ValueError("m must be at least 1")
    blocks = [g.as_tensor()]
    for _ in range(m):
        blocks = [covderiv_ref(T, g0, kind) for T in blocks for kind in "ha"]
    Q = sum(tensor_norm(T, g0) for T in blocks)
    Q = assert_real(Q, tol=1e-10, what="Q_m")
    return Q, float(Q.max())


def curvature_norms(g: MetricField, g0: MetricField, k_max: int, R0: Tensor | None = None,
                    jet: RefJet | None = None) -> list[np.ndarray]:
    """Fields ``|nabla^k Rm|_g^2`` for ``k = 0..k_max`` built incrementally from the reference connection."""
    jet = jet or RefJet(g, g0)
    R = curvature_via_ref(g, g0, R0, jet)
    blocks = [R]
    out = [assert_real(tensor_norm(R, g), tol=1e-9, what="|Rm|^2")]
    for _ in range(k_max):
        blocks = [_convert_step(T, g0, jet.A, kind) for T in blocks for kind in "ha"]
        out.append(assert_real(sum(tensor_norm(T, g) for T in blocks), tol=1e-9, what="|nabla^k Rm|^2"))
    return out


def _reference_curvature(problem) -> Tensor:
    R0 = getattr(problem, "_R0", None)
    if R0 is None:
        R0 = problem._R0 = curvature_direct(problem.g0)
    return R0


def monitor_record(problem, state) -> MonitorRecord:
    cfg = problem.config
    g, g0 = state.g, problem.g0
    R0 = _reference_curvature(problem)
    jet = RefJet(g, g0)
    _, s_min, s_max = monitor_S(g, g0)
    _, q_sup = monitor_Q(g, g0, jet)
    qm = [monitor_Qm(g, g0, m)[1] for m in range(1, cfg.m_max + 1)]
    rm = [float(x.max()) for x in curvature_norms(g, g0, cfg.k_max, R0, jet)]
    pinch = pinch_eigenvalues(g, g0)
    ric = ricci(g).values
    gb = float("nan")
    if g.n == 1:
        # scalar curvature times the volume form integrates to zero on the torus
        gb = abs(integrate(g.grid, ric[0, 0] * g.inv[0, 0] * g.det))
    return MonitorRecord(
        t=float(state.t),
        steps=int(state.steps),
        S_min=s_min,
        S_max=s_max,
        Q_sup=q_sup,
        Qm_sup=qm,
        rm=rm,
        lam_min=pinch.lam_min,
        lam_max=pinch.lam_max,
        C_eq=pinch.c_eq,
        volume=float(integrate(g.grid, g.det).real),
        w_sup=sup_abs(state.w),
        ric_sup=sup_abs(ric),
        gauss_bonnet=gb,
    )


def monitor_raw(config) -> MonitorRecord:
    """Whatever can be measured on an inadmissible initial metric (no margin checks)."""
    from .grid import make_grid

    grid = make_grid(config.n, config.N)
    phi0 = config.reference.build(grid)
    u0 = config.initial.build(grid)
    g0 = (MetricField.flat(grid) if config.reference.kind == "zero" or config.reference.amplitude == 0
          else metric_from_potential(grid, phi0, check=False))
    g = metric_from_potential(grid, phi0 + u0, check=False)
    _, s_min, s_max = monitor_S(g, g0)
    pinch = pinch_eigenvalues(g, g0)
    nan = float("nan")
    return MonitorRecord(
        t=0.0, steps=0, S_min=s_min, S_max=s_max, Q_sup=nan, Qm_sup=[nan] * config.m_max,
        rm=[nan] * (config.k_max + 1), lam_min=pinch.lam_min, lam_max=pinch.lam_max, C_eq=pinch.c_eq,
        volume=float(integrate(grid, g.det).real), w_sup=nan, flags="inadmissible",
    )


# -- evolution identities on snapshot windows ------------------------------


def _time_derivative(xs: Sequence[np.ndarray], h: float) -> tuple[np.ndarray, float]:
    """Centred first derivative at the middle snapshot and an estimate of ``sup|x_ttt|``."""
    if len(xs) == 3:
        d1 = (xs[2] - xs[0]) / (2 * h)
        d2 = (xs[2] - 2 * xs[1] + xs[0]) / h**2
        n1 = sup_abs(d1)
        # geometric-decay estimate |x_ttt| ~ |x_tt|^2 / |x_t|
        scale = sup_abs(d2) ** 2 / n1 if n1 > 0 else sup_abs(d2) / h
        return d1, scale
    if len(xs) == 5:
        d1 = (xs[3] - xs[1]) / (2 * h)
        d3 = (xs[4] - 2 * xs[3] + 2 * xs[1] - xs[0]) / (2 * h**3)
        return d1, sup_abs(d3)
    raise ValueError("windows must hold 3 or 5 equally spaced snapshots")


def _spacing(window) -> float:
    ts = np.array([s.t for s in window])
    h = float(np.mean(np.diff(ts)))
    if not h > 0 or np.max(np.abs(np.diff(ts) - h)) > 1e-9 * max(h, 1e-300) + 1e-15:
        raise ValueError("window snapshots must be equally spaced in t")
    return h


def _report(name, lhs, rhs, h, scale, floor, times) -> ResidualReport:
    resid = sup_abs(lhs - rhs)
    tol = 4 * h**2 * scale + floor
    return ResidualReport(name, resid, scale, tol, resid <= tol, times,
                          {"h": h, "rhs_sup": sup_abs(rhs)})


def evolution_residuals(problem, window) -> list[ResidualReport]:
    """Centred time differences against the spatial right sides at the middle snapshot.

    Identities: the flow equation itself, ``(d_t - Delta) S``, the evolution
    of ``g_{i jbar; k}`` and the heat equation ``w_t = Delta w + c w``.
    """
    h = _spacing(window)
    mid = window[len(window) // 2]
    c = problem.config.c
    g0 = problem.g0
    g = mid.g
    times = [s.t for s in window]
    R0 = _reference_curvature(problem)
    reports = []

    ric = ricci(g).values
    flow_rhs = -ric + c * g.g
    dg, sc = _time_derivative([s.g.g for s in window], h)
    reports.append(_report("flow_equation", dg, flow_rhs, h, sc, 1e-8, times))

    S_series = [monitor_S(s.g, g0)[0] for s in window]
    dS, sc = _time_derivative(S_series, h)
    jet = RefJet(g, g0)
    S_rhs = laplacian(g, S_series[len(window) // 2]) + c * S_series[len(window) // 2] - _s_drain(g, g0, R0, jet)
    reports.append(_report("S_evolution", dS, S_rhs, h, sc, 1e-8 * (1 + sup_abs(S_rhs)), times))

    gk_series = [covderiv_ref(s.g.as_tensor(), g0, "h").values for s in window]
    dgk, sc = _time_derivative(gk_series, h)
    gk_rhs = covderiv_ref(Tensor(flow_rhs, "ha"), g0, "h").values
    reports.append(_report("g_k_evolution", dgk, gk_rhs, h, sc, 1e-8 * (1 + sup_abs(gk_rhs)), times))

    dw, sc = _time_derivative([s.w for s in window], h)
    w_rhs = laplacian(g, mid.w) + c * mid.w
    reports.append(_report("w_equation", dw, w_rhs, h, sc, 1e-6, times))
    return reports


def _s_drain(g: MetricField, g0: MetricField, R0: Tensor, jet: RefJet) -> np.ndarray:
    """Quadratic drain of ``(d_t - Delta) S``.

    ``g0^{jbar i} g^{lbar k} g^{nubar mu} g_{i nubar;k} g_{mu jbar;lbar}``
    ``+ g0^{jbar i} R0_{i mubar k lbar} g0^{mubar nu} g_{nu jbar} g^{lbar k}``
    """
    quad = np.einsum("ji...,lk...,vm...,ivk...,mjl...->...", g0.inv, g.inv, g.inv, jet.g_k.values,
                     jet.g_l.values, optimize=True)
    if not g0.is_flat:
        quad = quad + np.einsum("ji...,imkl...,mv...,vj...,lk...->...", g0.inv, R0.values, g0.inv, g.g, g.inv,
                                optimize=True)
    return quad


@dataclass
class WindowSample:
    """Pointwise data at the middle of a window of snapshots, flattened over the grid."""

    t: float
    Q: np.ndarray
    S: np.ndarray
    heat_Q: np.ndarray
    heat_S: np.ndarray
    squares: np.ndarray
    remainder: np.ndarray
    excluded: int = 0


def q_remainder(g: MetricField, g0: MetricField, jet: RefJet | None = None) -> tuple[np.ndarray, np.ndarray]:
    """The two square sums in the evolution of ``Q``, weighted by ``g`` on every slot (frame-free form).

    ``T1_{i kbar j lbar} = g_{i kbar; j lbar} - g^{gbar d} g_{i gbar; j} g_{d kbar; lbar}``
    ``T2_{i qbar k mu} = g_{i qbar; k mu} - g^{abar b} (g_{b qbar; i} g_{k abar; mu} + g_{b qbar; mu} g_{i abar; k})``
    """
    jet = jet or RefJet(g, g0)
    gk, gl = jet.g_k.values, jet.g_l.values
    T1 = jet.g_kl.values - np.einsum("cd...,icj...,dkl...->ikjl...", g.inv, gk, gl, optimize=True)
    gkm = covderiv_ref(jet.g_k, g0, "h").values
    T2 = gkm - np.einsum("ab...,bqi...,kam...->iqkm...", g.inv, gk, gk, optimize=True) \
        - np.einsum("ab...,bqm...,iak...->iqkm...", g.inv, gk, gk, optimize=True)
    s1 = assert_real(tensor_norm(Tensor(T1, "haha"), g), tol=1e-9, what="|T1|^2")
    s2 = assert_real(tensor_norm(Tensor(T2, "hahh"), g), tol=1e-9, what="|T2|^2")
    return s1, s2


def _centred(xs: Sequence[np.ndarray], h: float) -> np.ndarray:
    if len(xs) == 3:
        return (xs[2] - xs[0]) / (2 * h)
    return (-xs[4] + 8 * xs[3] - 8 * xs[1] + xs[0]) / (12 * h)


def window_samples(problem, window) -> WindowSample:
    """Heat operators of ``Q`` and ``S`` at the middle snapshot (second order for three snapshots,
    fourth order for five) and the remainder of the ``Q`` evolution."""
    if len(window) not in (3, 5):
        raise ValueError("window_samples needs three or five snapshots")
    h = _spacing(window)
    g0 = problem.g0
    mid = window[len(window) // 2]
    Qs = [monitor_Q(s.g, g0)[0] for s in window]
    Ss = [monitor_S(s.g, g0)[0] for s in window]
    Qm, Sm = Qs[len(window) // 2], Ss[len(window) // 2]
    heat_Q = _centred(Qs, h) - assert_real(laplacian(mid.g, Qm), tol=1e-8, what="Delta Q")
    heat_S = _centred(Ss, h) - assert_real(laplacian(mid.g, Sm), tol=1e-8, what="Delta S")
    s1, s2 = q_remainder(mid.g, g0)
    sq = s1 + s2
    return WindowSample(mid.t, Qm.ravel(), Sm.ravel(), heat_Q.ravel(), heat_S.ravel(), sq.ravel(),
                        (heat_Q + sq).ravel())


# -- fitted constants ------------------------------------------------------


def _upper_hull_points(x: np.ndarray, y: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Points that can be active for an upper supporting line (upper convex hull)."""
    pts = np.column_stack([x, y])
    pts = np.unique(pts, axis=0)
    if len(pts) < 3:
        return pts[:, 0], pts[:, 1]
    try:
        hull = ConvexHull(pts)
        idx = hull.vertices
    except QhullError:
        # collinear or degenerate cloud: extremes in x plus the top in y suffice
        idx = np.unique([np.argmin(pts[:, 0]), np.argmax(pts[:, 0]), np.argmax(pts[:, 1])])
    return pts[idx, 0], pts[idx, 1]


def _fit_line_above(x: np.ndarray, y: np.ndarray, slope_sign: int,
                    x_ref: float | None = None) -> tuple[float, float]:
    """Non-negative ``(a, b)`` minimizing ``b + slope_sign * a * x_ref`` subject to
    ``y <= b + slope_sign * a * x`` at every sample.

    ``x_ref`` defaults to ``max x / 2``, i.e. the mean of the line over ``[0, max x]``.
    """
    x = np.asarray(x, dtype=float).ravel()
    y = np.asarray(y, dtype=float).ravel()
    if x.size == 0:
        raise EmptySeries("no samples to fit")
    hx, hy = _upper_hull_points(x, y)
    xs = max(float(x.max()), 0.0)
    if xs <= 0:
        return 0.0, max(float(y.max()), 0.0)
    # variables (a, b); constraint: -slope*a*x - b <= -y
    A_ub = np.column_stack([-slope_sign * hx, -np.ones_like(hx)])
    x_ref = xs / 2 if x_ref is None else float(x_ref)
    res = linprog([slope_sign * x_ref, 1.0], A_ub=A_ub, b_ub=-hy,
                  bounds=[(0, None), (0, None)], method="highs")
    if res.status != 0:
        raise ArithmeticError(f"envelope fit failed: {res.message}")
    a, b = (float(v) for v in res.x)
    # absorb solver round-off so the envelope covers every sample exactly
    gap = float(np.max(y - (b + slope_sign * a * x)))
    if gap > 0:
        b += gap
    return a, b


def q_evolution_decomposition(samples: Sequence[WindowSample], tol: float = 1e-6,
                              q_ref: float | None = None) -> ResidualReport:
    """Fit ``|N| <= C3 Q + C4`` for the remainder ``N = (d_t - Delta) Q + |T1|^2 + |T2|^2``.

    The line is the tightest one at ``Q = q_ref`` (default: half the largest sampled ``Q``).
    Comparing fits across runs needs a common ``q_ref``.
    """
    if not samples:
        raise EmptySeries("no window samples")
    Q = np.concatenate([s.Q for s in samples])
    R = np.abs(np.concatenate([s.remainder for s in samples]))
    sq_min = min(float(s.squares.min()) for s in samples)
    C3, C4 = _fit_line_above(Q, R, +1, q_ref)
    viol = float(np.max(R - (C3 * Q + C4)))
    q_sup = float(Q.max())
    excluded = sum(s.excluded for s in samples)
    total = Q.size
    passed = viol <= tol * (1 + q_sup) and excluded <= 0.01 * total
    return ResidualReport(
        "q_evolution", max(viol, 0.0), 1 + q_sup, tol * (1 + q_sup), passed, [s.t for s in samples],
        {"C3": C3, "C4": C4, "remainder_sup": float(R.max()), "Q_sup": q_sup, "squares_min": sq_min,
         "excluded_points": excluded, "total_points": total},
    )


def fit_s_inequality(samples: Sequence[WindowSample]) -> tuple[float, float]:
    """Fit ``(d_t - Delta) S <= -c1 Q + C2`` with ``c1, C2 >= 0``."""
    Q = np.concatenate([s.Q for s in samples])
    H = np.concatenate([s.heat_S for s in samples])
    c1, C2 = _fit_line_above(Q, H, -1)
    if float(Q.max()) <= 0 or c1 <= 0:
        # no Q information: any positive c1 is consistent, take 1
        c1 = 1.0
        C2 = max(float(np.max(H + c1 * Q)), 0.0)
    return c1, C2


def q_plus_c5s_check(samples: Sequence[WindowSample], C5: float | None = None, C3: float | None = None,
                     c1: float | None = None, tol: float = 1e-6) -> ResidualReport:
    """Fit the smallest ``C6`` with ``(d_t - Delta)(Q + C5 S) <= -(Q + C5 S) + C6`` at all samples and
    verify ``sup (Q + C5 S) <= max(initial sup, C6)`` over the run."""
    if not samples:
        raise EmptySeries("no window samples")
    if C5 is None:
        if C3 is None:
            C3 = q_evolution_decomposition(samples).extra["C3"]
        if c1 is None:
            c1, _ = fit_s_inequality(samples)
        C5 = (1.0 + C3) / c1
    F = [s.Q + C5 * s.S for s in samples]
    C6 = max(0.0, max(float(np.max(s.heat_Q + C5 * s.heat_S + f)) for s, f in zip(samples, F)))
    sups = [float(np.max(f)) for f in F]
    bound = max(sups[0], C6)
    worst = max(sups) - bound
    passed = worst <= tol
    return ResidualReport("q_plus_c5s", max(worst, 0.0), bound, tol, passed,
                          [s.t for s in samples], {"C5": C5, "C6": C6, "sup_series": sups, "initial_sup": sups[0]})


# -- maximum principle at the discrete argmax ------------------------------


def max_principle_check(h: np.ndarray, g: MetricField) -> dict:
    """Gradient and Laplacian of ``h`` at its grid argmax, against grid-localization tolerances.

    The true maximum lies within ``d = sqrt(2n) / (2N)`` of some grid point, so
    ``|grad h|_g <= sqrt(Lambda) H d / 2`` there (``H`` the largest real Hessian
    norm, ``Lambda`` the largest eigenvalue of ``g^{-1}``) and
    ``Delta h <= d * sup|grad(Delta h)|``.
    """
    grid = g.grid
    h = assert_real(h, tol=1e-10, what="h").astype(complex)
    idx = np.unravel_index(np.argmax(h.real), grid.shape)
    dh = np.stack([grid.dz(h, i) for i in range(g.n)])
    grad2 = np.einsum("ji...,i...,j...->...", g.inv, dh, np.conj(dh)).real
    grad = math.sqrt(max(float(grad2[idx]), 0.0))
    lap = laplacian(g, h).real
    d = math.sqrt(grid.ndim) / (2 * grid.N)
    hh = grid.fft(h)
    hess = np.empty((grid.ndim, grid.ndim) + grid.shape)
    for a in range(grid.ndim):
        for b in range(a, grid.ndim):
            hess[a, b] = hess[b, a] = grid.ifft(hh * grid._dreal[a] * grid._dreal[b], overwrite=True).real
    H = float(np.max(np.linalg.norm(np.moveaxis(hess, (0, 1), (-2, -1)), ord=2, axis=(-2, -1))))
    lam = 1.0 / float(np.min(g.eigen_extremes[0]))
    eps_grad = math.sqrt(lam) * H * d / 2 + 1e-12
    lh = grid.fft(lap.astype(complex))
    glap = max(sup_abs(grid.ifft(lh * grid._dreal[a], overwrite=True)) for a in range(grid.ndim))
    eps_lap = d * glap + 1e-12
    return {
        "argmax": [int(i) for i in idx],
        "gradient": grad,
        "laplacian": float(lap[idx]),
        "eps_gradient": eps_grad,
        "eps_laplacian": eps_lap,
        "passed": grad <= eps_grad and lap[idx] <= eps_lap,
    }


# -- Shi envelopes and the verdict -----------------------------------------


def shi_fit(t: Sequence[float], values: Sequence[float], k: int, t_split: float | None = None,
            t_end: float | None = None) -> tuple[float, float]:
    """Minimal ``(A_k, B_k)`` with ``value <= A_k + B_k / t^k`` at every sample with ``t > 0``.

    ``A_k`` is the sup over ``t >= t_split``; ``B_k`` the sup over earlier
    samples of ``(value - A_k) t^k``, clamped at zero.
    """
    t = np.asarray(t, dtype=float)
    v = np.asarray(values, dtype=float)
    keep = np.isfinite(v) & (t > 0 if k > 0 else np.ones_like(t, dtype=bool))
    t, v = t[keep], v[keep]
    if t.size == 0:
        raise EmptySeries("no samples with t > 0")
    if k == 0:
        return float(v.max()), 0.0
    if t_split is None:
        t_split = 0.1 * (t_end if t_end is not None else float(t.max()))
    late = t >= t_split
    A = float(v[late].max()) if late.any() else 0.0
    early = ~late
    B = float(np.max((v[early] - A) * t[early] ** k)) if early.any() else 0.0
    return A, max(B, 0.0)


def theorem1_verdict(result, t_split: float | None = None, tol: float = 1e-12) -> dict:
    """Equivalence constant over the run and curvature envelopes with their coverage."""
    cfg = result.config
    recs = result.records
    ceq = np.array([r.C_eq for r in recs], dtype=float)
    out = {
        "termination": result.termination,
        "ceq_initial": float(ceq[0]) if ceq.size else float("nan"),
        "ceq_max": float(np.max(ceq)) if ceq.size else float("nan"),
        "ceq_bound": cfg.bound,
    }
    out["equivalence_held"] = bool(ceq.size and np.all(ceq <= cfg.bound))
    if not result.completed:
        out["ceq_exceeded_before_termination"] = bool(ceq.size and ceq[-1] > cfg.bound)
        out["verdict"] = "breakdown"
        return out
    t = np.array([r.t for r in recs])
    t_split = t_split if t_split is not None else 0.1 * cfg.t_end
    fit = ConstantsFit(t_split=t_split)
    coverage = []
    for k in range(cfg.k_max + 1):
        v = np.array([r.rm[k] for r in recs])
        A, B = shi_fit(t, v, k, t_split=t_split)
        fit.A.append(A)
        fit.B.append(B)
        mask = t > 0 if k else np.ones_like(t, dtype=bool)
        env = A + (B / t[mask] ** k if k else 0.0)
        viol = int(np.sum(v[mask] > env + tol * (1 + np.abs(env))))
        coverage.append({"k": k, "samples": int(mask.sum()), "violations": viol})
    out["fit"] = fit.to_dict()
    out["coverage"] = coverage
    out["verdict"] = "bounded" if out["equivalence_held"] and all(c["violations"] == 0 for c in coverage) else "fail"
    return out


def w_bound_check(result, tol: float = 1e-8) -> ResidualReport:
    """``sup|w|(t) <= e^{ct} sup|f|`` at every record."""
    c = result.config.c
    t = np.array([r.t for r in result.records], dtype=float)
    w = np.array([r.w_sup for r in result.records], dtype=float)
    ok = np.isfinite(w)
    t, w = t[ok], w[ok]
    bound = np.exp(c * t) * result.sup_f
    excess = float(np.max(w - bound)) if w.size else 0.0
    nonincreasing = bool(np.all(np.diff(w) <= tol)) if w.size > 1 else True
    return ResidualReport("w_bound", max(excess, 0.0), result.sup_f, tol, excess <= tol, t.tolist(),
                          {"sup_f": result.sup_f, "nonincreasing": nonincreasing})


# -- artifacts -------------------------------------------------------------


def csv_header(m_max: int, k_max: int) -> list[str]:
    return (["t", "S_min", "S_max", "Q_sup"] + [f"Q{m}_sup" for m in range(1, m_max + 1)]
            + [f"rm{k}" for k in range(k_max + 1)] + ["lam_min", "lam_max", "C_eq", "volume", "w_sup"])


def _fmt(x: float) -> str:
    return repr(float(x))


def write_csv(records: Iterable[MonitorRecord], path: str | os.PathLike, m_max: int, k_max: int) -> None:
    lines = [CSV_VERSION, ",".join(csv_header(m_max, k_max))]
    for r in sorted(records, key=lambda r: r.t):
        lines.append(",".join(_fmt(x) for x in r.csv_values()))
    Path(path).write_text("\n".join(lines) + "\n", encoding="ascii")


def read_csv(path: str | os.PathLike) -> tuple[list[str], np.ndarray]:
    lines = Path(path).read_text(encoding="ascii").splitlines()
    if not lines or lines[0] != CSV_VERSION:
        raise ValueError("not a krflab monitor series")
    header = lines[1].split(",")
    rows = [[float(x) for x in ln.split(",")] for ln in lines[2:] if ln]
    return header, np.array(rows, dtype=float).reshape(len(rows), len(header))


def write_reports(reports: Sequence[ResidualReport | dict], path: str | os.PathLike, **meta) -> None:
    body = {"format": REPORT_VERSION, **_jsonable(meta),
            "reports": [r.to_dict() if isinstance(r, ResidualReport) else _jsonable(r) for r in reports]}
    Path(path).write_text(json.dumps(body, indent=2, sort_keys=False) + "\n", encoding="ascii")


def emit_plotdata(result, out_dir: str | os.PathLike) -> list[Path]:
    """One two-column ``t value`` text file per monitored series; nothing is rendered."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    cfg = result.config
    names = csv_header(cfg.m_max, cfg.k_max)[1:]
    rows = [r.csv_values() for r in sorted(result.records, key=lambda r: r.t)]
    paths = []
    for j, name in enumerate(names, start=1):
        p = out_dir / f"{name}.dat"
        lines = [f"{PLOT_VERSION} t {name}"] + [f"{_fmt(row[0])} {_fmt(row[j])}" for row in rows]
        p.write_text("\n".join(lines) + "\n", encoding="ascii")
        paths.append(p)
    return paths
