"""Kähler tensor algebra on a flat torus with global coordinates.

Conventions
-----------
* A metric is stored as ``g[i, j] = g_{i jbar}`` with grid axes trailing.
  ``inv[j, i] = g^{jbar i}`` is the ordinary matrix inverse, so
  ``sum_j g[i, j] inv[j, k] = delta_ik``.
* ``Gamma[p, i, j] = Gamma^p_{ij} = g^{lbar p} d_i g_{j lbar}`` (Chern connection).
* Tensors have lower indices only.  Each slot is tagged ``'h'`` (holomorphic)
  or ``'a'`` (anti-holomorphic).  A covariant derivative appends its
  direction as a new last slot, so ``g_{i jbar; k lbar}`` has signature
  ``"haha"`` and values ``[i, j, k, l]``.
* Curvature ``R[i, j, k, l] = R_{i jbar k lbar}`` with
  ``R_{i jbar k lbar} = -d_k d_lbar g_{i jbar} + g^{nubar mu} d_k g_{i nubar} d_lbar g_{mu jbar}``.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property
from typing import Sequence

import numpy as np

from .grid import GridSpec, assert_real

__all__ = [
    "PositivityLoss",
    "Tensor",
    "MetricField",
    "PinchReport",
    "metric_from_potential",
    "christoffel_ref",
    "covderiv",
    "covderiv_ref",
    "connection_difference",
    "curvature_direct",
    "curvature_via_ref",
    "ricci",
    "ricci_trace",
    "trace_identity_residual",
    "trace_identity_terms",
    "laplacian",
    "pinch_eigenvalues",
    "pinch_lower_bound",
    "tensor_norm",
    "nabla_rm_evolving",
    "nabla_rm_direct",
    "ricci_commutator",
    "RefJet",
    "conversion_residual",
    "covderiv_slice",
    "sup_abs",
]

DEFAULT_MARGIN = 0.05
_LETTERS = "bcdefghijklmnopqrstuvw"


class PositivityLoss(ArithmeticError):
    """A metric fell below the admissibility margin (left the Kähler cone)."""

    def __init__(self, point: tuple[int, ...], eigenvalue: float, margin: float, stage: int | None = None):
        self.point = tuple(int(p) for p in point)
        self.eigenvalue = float(eigenvalue)
        self.margin = float(margin)
        self.stage = stage
        where = f" at RK stage {stage}" if stage is not None else ""
        super().__init__(
            f"smallest metric eigenvalue {self.eigenvalue:.6g} < margin {self.margin:g} "
            f"at grid point {self.point}{where}"
        )


def sup_abs(a: np.ndarray) -> float:
    return float(np.max(np.abs(a), initial=0.0))


@dataclass(frozen=True)
class Tensor:
    """Component array with trailing grid axes plus a slot signature such as ``"hah"``."""

    values: np.ndarray
    sig: str

    @property
    def rank(self) -> int:
        return len(self.sig)

    def __post_init__(self):
        if set(self.sig) - {"h", "a"}:
            raise ValueError(f"bad signature {self.sig!r}")

    def scaled(self, c: complex) -> "Tensor":
        return Tensor(self.values * c, self.sig)


def _hermitian_eig_extremes(g: np.ndarray, n: int) -> tuple[np.ndarray, np.ndarray]:
    if n == 1:
        lam = g[0, 0].real
        return lam, lam
    a, d, b = g[0, 0].real, g[1, 1].real, g[0, 1]
    disc = np.sqrt((a - d) ** 2 + 4 * np.abs(b) ** 2)
    return 0.5 * (a + d - disc), 0.5 * (a + d + disc)


class MetricField:
    """Hermitian positive-definite (1,1)-tensor field with cached inverse, determinant and derivatives.

    Parameters
    ----------
    grid : GridSpec
    g : ndarray, shape (n, n, *grid.shape)
        Components ``g[i, j] = g_{i jbar}``.
    margin : float
        Smallest admissible eigenvalue (Euclidean reference).  Points below it
        raise :class:`PositivityLoss`.
    check : bool
        Skip the Hermitian and margin checks when False (used to inspect
        inadmissible data without propagating it).
    """

    def __init__(self, grid: GridSpec, g: np.ndarray, margin: float = DEFAULT_MARGIN, check: bool = True):
        n = grid.n
        g = np.asarray(g, dtype=complex)
        if g.shape != (n, n) + grid.shape:
            raise ValueError(f"metric components have shape {g.shape}, expected {(n, n) + grid.shape}")
        self.grid = grid
        self.g = g
        self.margin = margin
        if check:
            herm = sup_abs(g - np.conj(np.swapaxes(g, 0, 1)))
            if herm > 1e-12 * max(1.0, sup_abs(g)):
                raise ValueError(f"metric is not Hermitian (residual {herm:.3e})")
            self.check_admissible()

    @classmethod
    def flat(cls, grid: GridSpec) -> "MetricField":
        eye = np.eye(grid.n).reshape((grid.n, grid.n) + (1,) * grid.ndim)
        out = cls(grid, np.broadcast_to(eye, (grid.n, grid.n) + grid.shape).astype(complex), check=False)
        out.is_flat = True
        return out

    is_flat = False

    @property
    def n(self) -> int:
        return self.grid.n

    def check_admissible(self, stage: int | None = None) -> None:
        lo, _ = self.eigen_extremes
        idx = np.unravel_index(np.argmin(lo), lo.shape)
        if lo[idx] < self.margin:
            raise PositivityLoss(idx, lo[idx], self.margin, stage)

    @cached_property
    def eigen_extremes(self) -> tuple[np.ndarray, np.ndarray]:
        """Pointwise (smallest, largest) eigenvalue against the Euclidean metric."""
        return _hermitian_eig_extremes(self.g, self.n)

    @cached_property
    def det(self) -> np.ndarray:
        g = self.g
        if self.n == 1:
            return g[0, 0].copy()
        return g[0, 0] * g[1, 1] - g[0, 1] * g[1, 0]

    @cached_property
    def inv(self) -> np.ndarray:
        g = self.g
        if self.n == 1:
            return (1.0 / g[0, 0])[None, None]
        det = self.det
        return np.stack(
            [np.stack([g[1, 1], -g[0, 1]]), np.stack([-g[1, 0], g[0, 0]])]
        ) / det

    @cached_property
    def spectrum(self) -> np.ndarray:
        return self.grid.fft(self.g)

    @cached_property
    def dg(self) -> np.ndarray:
        """``dg[k, i, j] = d_k g_{i jbar}``."""
        grid = self.grid
        if self.is_flat:
            return np.zeros((self.n,) * 3 + grid.shape, dtype=complex)
        return np.stack([grid.ifft(self.spectrum * grid.dz_symbol(k), overwrite=True) for k in range(self.n)])

    @cached_property
    def dgbar(self) -> np.ndarray:
        """``dgbar[l, i, j] = d_lbar g_{i jbar}``."""
        grid = self.grid
        if self.is_flat:
            return np.zeros((self.n,) * 3 + grid.shape, dtype=complex)
        return np.stack([grid.ifft(self.spectrum * grid.dzbar_symbol(l), overwrite=True) for l in range(self.n)])

    @cached_property
    def christoffel(self) -> np.ndarray | None:
        """``Gamma[p, i, j] = g^{lbar p} d_i g_{j lbar}``; ``None`` for the flat metric."""
        if self.is_flat:
            return None
        return np.einsum("lp...,ijl...->pij...", self.inv, self.dg)

    def release(self, *names: str) -> None:
        """Drop cached arrays (``spectrum``, ``dg``, ``dgbar``, ...) that are no longer needed."""
        for name in names:
            self.__dict__.pop(name, None)

    def scaled(self, a: float) -> "MetricField":
        return MetricField(self.grid, a * self.g, margin=min(self.margin, a * self.margin))

    def as_tensor(self) -> Tensor:
        return Tensor(self.g, "ha")


def _ddbar_all(grid: GridSpec, spec: np.ndarray) -> np.ndarray:
    """``[i, j] -> d_i d_jbar`` of the field whose spectrum is ``spec``."""
    rows = []
    for i in range(grid.n):
        sym_i = grid.dz_symbol(i)
        rows.append(np.stack([grid.ifft(spec * (sym_i * grid.dzbar_symbol(j)), overwrite=True)
                              for j in range(grid.n)]))
    return np.stack(rows)


def metric_from_potential(
    grid: GridSpec,
    phi: np.ndarray,
    base: MetricField | None = None,
    margin: float = DEFAULT_MARGIN,
    check: bool = True,
) -> MetricField:
    """``g_{i jbar} = base_{i jbar} + d_i d_jbar phi`` (flat base when ``base`` is None)."""
    n = grid.n
    ph = grid.fft(phi)
    hess = _ddbar_all(grid, ph)
    if base is None:
        eye = np.eye(n).reshape((n, n) + (1,) * grid.ndim)
        g = hess + eye
    else:
        g = hess + base.g
    return MetricField(grid, g, margin=margin, check=check)


def christoffel_ref(g0: MetricField) -> np.ndarray:
    """Chern connection symbols of the reference metric (zeros when flat)."""
    gam = g0.christoffel
    if gam is None:
        return np.zeros((g0.n,) * 3 + g0.grid.shape, dtype=complex)
    return gam


def _act_slot(M: np.ndarray, T: np.ndarray, slot: int, rank: int) -> np.ndarray:
    """``out[.. a ..] = sum_p M[p, a] T[.. p ..]`` with ``p``/``a`` at position ``slot``."""
    letters = _LETTERS[:rank]
    t_in = letters[:slot] + "y" + letters[slot + 1 :]
    return np.einsum(f"y{letters[slot]}...,{t_in}...->{letters}...", M, T)


def covderiv(grid: GridSpec, T: Tensor, gamma: np.ndarray | None, kind: str) -> Tensor:
    """Covariant derivative of ``T`` for the Kähler connection ``gamma`` in every ``kind`` direction.

    ``kind='h'`` differentiates along d_lambda and corrects holomorphic slots
    with ``-Gamma``; ``kind='a'`` differentiates along d_lambdabar and corrects
    anti-holomorphic slots with ``-conj(Gamma)``.  The direction becomes the
    new last slot.  ``gamma=None`` means a flat connection.
    """
    th = grid.fft(T.values)
    parts = [covderiv_slice(grid, T, gamma, kind, lam, th) for lam in range(grid.n)]
    return Tensor(np.stack(parts, axis=T.rank), T.sig + kind)


def covderiv_slice(
    grid: GridSpec, T: Tensor, gamma: np.ndarray | None, kind: str, lam: int, spectrum: np.ndarray | None = None
) -> np.ndarray:
    """One direction ``lam`` of :func:`covderiv`, without the new axis."""
    if kind not in ("h", "a"):
        raise ValueError(f"direction kind must be 'h' or 'a', got {kind!r}")
    if spectrum is None:
        spectrum = grid.fft(T.values)
    sym = grid.dz_symbol(lam) if kind == "h" else grid.dzbar_symbol(lam)
    D = grid.ifft(spectrum * sym, overwrite=True)
    if gamma is not None:
        M = gamma[:, lam] if kind == "h" else np.conj(gamma[:, lam])
        for s, tag in enumerate(T.sig):
            if tag == kind:
                D -= _act_slot(M, T.values, s, T.rank)
    return D


def covderiv_ref(T: Tensor, g0: MetricField, kind: str) -> Tensor:
    """Covariant derivative with respect to the reference metric ``g0`` (the ``;`` derivative)."""
    return covderiv(g0.grid, T, g0.christoffel, kind)


class RefJet:
    """Lazily computed ``g0``-covariant derivatives of ``g`` shared by the identity checks."""

    def __init__(self, g: MetricField, g0: MetricField):
        if g.grid != g0.grid:
            raise ValueError("metrics live on different grids")
        self.g = g
        self.g0 = g0

    def _first(self, kind: str) -> Tensor:
        g, g0 = self.g, self.g0
        gt = g.as_tensor()
        parts = [covderiv_slice(g.grid, gt, g0.christoffel, kind, lam, g.spectrum) for lam in range(g.n)]
        return Tensor(np.stack(parts, axis=2), "ha" + kind)

    @cached_property
    def g_k(self) -> Tensor:
        """``g_{i jbar; k}``"""
        return self._first("h")

    @cached_property
    def g_l(self) -> Tensor:
        """``g_{i jbar; lbar}``"""
        return self._first("a")

    @cached_property
    def g_kl(self) -> Tensor:
        """``g_{i jbar; k lbar}``"""
        return covderiv_ref(self.g_k, self.g0, "a")

    @cached_property
    def A(self) -> np.ndarray:
        return np.einsum("qp...,iqk...->pki...", self.g.inv, self.g_k.values)


def connection_difference(g: MetricField, g0: MetricField, g_k: Tensor | None = None) -> np.ndarray:
    """``A[p, k, i] = Gamma(g)^p_{ki} - Gamma(g0)^p_{ki} = g^{qbar p} g_{i qbar; k}``."""
    if g_k is None:
        g_k = covderiv_ref(g.as_tensor(), g0, "h")
    return np.einsum("qp...,iqk...->pki...", g.inv, g_k.values)


def curvature_direct(g: MetricField) -> Tensor:
    """Curvature from partial derivatives in the global flat coordinates."""
    grid = g.grid
    n = g.n
    if g.is_flat:
        return Tensor(np.zeros((n,) * 4 + grid.shape, dtype=complex), "haha")
    out = np.einsum("vm...,kiv...,lmj...->ijkl...", g.inv, g.dg, g.dgbar)
    for k in range(n):
        for l in range(n):
            out[:, :, k, l] -= grid.ifft(g.spectrum * (grid.dz_symbol(k) * grid.dzbar_symbol(l)), overwrite=True)
    return Tensor(out, "haha")


def _reference_term(g: MetricField, g0: MetricField, R0: Tensor) -> np.ndarray:
    # (R0)_{i mubar k lbar} g0^{mubar nu} g_{nu jbar}
    return np.einsum("imkl...,mv...,vj...->ijkl...", R0.values, g0.inv, g.g)


def curvature_via_ref(
    g: MetricField, g0: MetricField, R0: Tensor | None = None, jet: RefJet | None = None
) -> Tensor:
    """Curvature assembled from ``g0``-covariant derivatives of ``g`` plus the reference curvature.

    ``R = -g_{i jbar; k lbar} + g^{nubar mu} g_{i nubar; k} g_{mu jbar; lbar} + R0-term``.
    """
    if R0 is None:
        R0 = curvature_direct(g0)
    jet = jet or RefJet(g, g0)
    out = np.einsum("vm...,ivk...,mjl...->ijkl...", g.inv, jet.g_k.values, jet.g_l.values)
    out -= jet.g_kl.values
    if not g0.is_flat:
        out += _reference_term(g, g0, R0)
    return Tensor(out, "haha")


def ricci(g: MetricField) -> Tensor:
    """``R_{i jbar} = -d_i d_jbar log det g``."""
    grid = g.grid
    n = g.n
    if g.is_flat:
        return Tensor(np.zeros((n, n) + grid.shape, dtype=complex), "ha")
    lh = grid.fft(np.log(assert_real(g.det, tol=1e-10, what="det g")).astype(complex))
    out = _ddbar_all(grid, lh)
    out *= -1
    return Tensor(out, "ha")


def ricci_trace(g: MetricField, R: Tensor) -> Tensor:
    """``g^{lbar k} R_{i jbar k lbar}``."""
    return Tensor(np.einsum("lk...,ijkl...->ij...", g.inv, R.values), "ha")


def trace_identity_terms(g: MetricField, g0: MetricField, R0: Tensor | None = None, jet: RefJet | None = None):
    """Left and right sides of the traced second-derivative identity.

    ``g^{lbar k} g_{i jbar; k lbar} = -R_{i jbar}
    + g^{lbar k} g^{nubar mu} g_{i nubar; k} g_{mu jbar; lbar}
    + (R0)_{i mubar k lbar} g0^{mubar nu} g_{nu jbar} g^{lbar k}``,
    with ``R_{i jbar}`` taken from ``-d d-bar log det g``.
    """
    if R0 is None:
        R0 = curvature_direct(g0)
    jet = jet or RefJet(g, g0)
    lhs = np.einsum("lk...,ijkl...->ij...", g.inv, jet.g_kl.values)
    rhs = np.einsum("lk...,vm...,ivk...,mjl...->ij...", g.inv, g.inv, jet.g_k.values, jet.g_l.values, optimize=True)
    rhs -= ricci(g).values
    if not g0.is_flat:
        rhs += np.einsum("imkl...,mv...,vj...,lk...->ij...", R0.values, g0.inv, g.g, g.inv, optimize=True)
    return lhs, rhs


def trace_identity_residual(
    g: MetricField, g0: MetricField, R0: Tensor | None = None, jet: RefJet | None = None
) -> float:
    lhs, rhs = trace_identity_terms(g, g0, R0, jet)
    return sup_abs(lhs - rhs)


def laplacian(g: MetricField, h: np.ndarray) -> np.ndarray:
    """Chern Laplacian ``g^{jbar i} d_i d_jbar h``; a quarter of the Euclidean Laplacian when g is flat."""
    grid = g.grid
    hh = grid.fft(h)
    out = np.zeros(grid.shape, dtype=complex)
    for i in range(g.n):
        for j in range(g.n):
            out += g.inv[j, i] * grid.ifft(hh * (grid.dz_symbol(i) * grid.dzbar_symbol(j)), overwrite=True)
    return out


@dataclass
class PinchReport:
    """Generalized eigenvalues of ``g`` against ``g0``, sorted ascending along axis 0."""

    eigenvalues: np.ndarray
    lam_min: float
    lam_max: float

    @property
    def c_eq(self) -> float:
        if not self.lam_min > 0:
            return float("inf")
        return max(self.lam_max, 1.0 / self.lam_min)


def pinch_eigenvalues(g: MetricField, g0: MetricField) -> PinchReport:
    """Pointwise roots of ``det(g - lambda g0) = 0`` in closed form (n <= 2)."""
    if g.n == 1:
        eig = (g.g[0, 0].real / g0.g[0, 0].real)[None]
    else:
        G, H = g.g, g0.g
        a = assert_real(g0.det, tol=1e-10, what="det g0")
        c = assert_real(g.det, tol=1e-10, what="det g")
        b = (G[0, 0] * H[1, 1] + G[1, 1] * H[0, 0] - G[0, 1] * H[1, 0] - G[1, 0] * H[0, 1]).real
        disc = np.sqrt(np.maximum(b * b - 4 * a * c, 0.0))
        hi = (b + disc) / (2 * a)
        lo = np.where(hi != 0, c / (a * np.where(hi != 0, hi, 1.0)), 0.0)
        eig = np.stack([np.minimum(lo, hi), np.maximum(lo, hi)])
    return PinchReport(eig, float(eig[0].min()), float(eig[-1].max()))


def pinch_lower_bound(trace_bound: float, det_bound: float, n: int) -> float:
    """Smallest eigenvalue forced by ``sum(lambda) <= trace_bound`` and ``prod(lambda) >= det_bound``."""
    return det_bound * trace_bound ** (1 - n)


def _metric_list(metrics, rank: int) -> list[MetricField]:
    if isinstance(metrics, MetricField):
        return [metrics] * rank
    metrics = list(metrics)
    if len(metrics) != rank:
        raise ValueError(f"need one metric per slot ({rank}), got {len(metrics)}")
    return metrics


def tensor_norm(T: Tensor, metrics: MetricField | Sequence[MetricField]) -> np.ndarray:
    """Pointwise squared norm, contracting every slot of ``T`` with its conjugate through an inverse metric.

    For a holomorphic slot the weight is ``g^{bbar a} T_a conj(T_b)``; for an
    anti-holomorphic slot it is ``g^{abar b} T_abar conj(T_bbar)``.
    """
    X = T.values
    for s, (tag, m) in enumerate(zip(T.sig, _metric_list(metrics, T.rank))):
        W = np.swapaxes(m.inv, 0, 1) if tag == "h" else m.inv
        X = _act_slot(W, X, s, T.rank)
    return np.sum(X * np.conj(T.values), axis=tuple(range(T.rank)))


def nabla_rm_direct(g: MetricField, k: int) -> dict[str, Tensor]:
    """Blocks of ``nabla^k Rm`` using the Chern connection of ``g`` built from its own derivatives.

    Keys are the direction strings, e.g. ``"ha"`` for ``nabla_{mubar} nabla_{lambda} Rm``.
    """
    blocks = {"": curvature_direct(g)}
    for _ in range(k):
        blocks = {
            key + kind: covderiv(g.grid, T, g.christoffel, kind) for key, T in blocks.items() for kind in "ha"
        }
    return blocks


def _convert_step(T: Tensor, g0: MetricField, A: np.ndarray, kind: str) -> Tensor:
    D = covderiv_ref(T, g0, kind)
    vals = D.values
    rank = T.rank
    for lam in range(g0.n):
        M = A[:, lam] if kind == "h" else np.conj(A[:, lam])
        idx = (slice(None),) * rank + (lam,)
        for s, tag in enumerate(T.sig):
            if tag == kind:
                vals[idx] -= _act_slot(M, T.values, s, rank)
    return D


def nabla_rm_evolving(
    g: MetricField, g0: MetricField, k: int, R0: Tensor | None = None
) -> tuple[dict[str, Tensor], np.ndarray]:
    """``nabla^k Rm`` of the evolving metric, assembled from ``g0``-covariant derivatives.

    Each step uses ``nabla_lambda T = T_{;lambda} - A^p_{lambda a} T_{..p..}`` over
    holomorphic slots (and the conjugate rule for barred directions), where
    ``A = g^{-1} nabla_0 g`` is the connection difference.  Rm itself comes
    from :func:`curvature_via_ref`.

    Returns the direction blocks and the squared norm ``|nabla^k Rm|_g^2``
    summed over all blocks.
    """
    if not 0 <= k <= 2:
        raise ValueError("evolving-metric curvature derivatives are supported for k <= 2")
    R = curvature_via_ref(g, g0, R0)
    blocks = {"": R}
    if k:
        A = connection_difference(g, g0)
        for _ in range(k):
            blocks = {key + kind: _convert_step(T, g0, A, kind) for key, T in blocks.items() for kind in "ha"}
    norm = sum(tensor_norm(T, g) for T in blocks.values())
    return blocks, norm


def conversion_residual(
    g: MetricField, g0: MetricField, R0: Tensor | None = None, jet: RefJet | None = None,
    R: Tensor | None = None, R_ref: Tensor | None = None,
) -> tuple[float, float]:
    """Largest gap between ``nabla Rm`` built from the connection of ``g`` and from ``g0`` plus ``A``.

    Works one direction and one leading index at a time so no rank-5 tensor
    is ever held.  Returns ``(residual, sup|Rm|)``.
    """
    grid = g.grid
    n = g.n
    jet = jet or RefJet(g, g0)
    R = R if R is not None else curvature_direct(g)
    R_ref = R_ref if R_ref is not None else curvature_via_ref(g, g0, R0, jet)
    gam, gam0 = g.christoffel, g0.christoffel
    rank = R.rank
    worst = 0.0
    for i in range(n):
        # both paths apply the same spectral d_lambda, so transform the difference once
        spec = grid.fft(R.values[i] - R_ref.values[i])
        for kind in "ha":
            for lam in range(n):
                sym = grid.dz_symbol(lam) if kind == "h" else grid.dzbar_symbol(lam)
                gap = grid.ifft(spec * sym, overwrite=True)
                G = gam[:, lam]
                M = jet.A[:, lam] if gam0 is None else jet.A[:, lam] + gam0[:, lam]
                if kind == "a":
                    G, M = np.conj(G), np.conj(M)
                for s, tag in enumerate(R.sig):
                    if tag != kind:
                        continue
                    if s == 0:
                        gap -= np.einsum("p...,p...->...", G[:, i, None, None, None], R.values)
                        gap += np.einsum("p...,p...->...", M[:, i, None, None, None], R_ref.values)
                    else:
                        gap -= _act_slot(G, R.values[i], s - 1, rank - 1)
                        gap += _act_slot(M, R_ref.values[i], s - 1, rank - 1)
                worst = max(worst, sup_abs(gap))
                del gap
        del spec
    return worst, sup_abs(R.values)


def ricci_commutator(T: Tensor, g0: MetricField, R0: Tensor | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Both sides of the Ricci identity for the reference connection.

    ``lhs[..., k, l] = T_{;k lbar} - T_{;lbar k}`` and ``rhs`` is the curvature
    action ``sum_hol R0_{a qbar k lbar} g0^{qbar p} T_{..p..}
    - sum_anti R0_{p bbar k lbar} g0^{qbar p} T_{..qbar..}``.
    """
    if R0 is None:
        R0 = curvature_direct(g0)
    n = g0.n
    rank = T.rank
    kl = covderiv_ref(covderiv_ref(T, g0, "h"), g0, "a").values
    lk = covderiv_ref(covderiv_ref(T, g0, "a"), g0, "h").values
    lhs = kl - np.swapaxes(lk, rank, rank + 1)
    rhs = np.zeros_like(lhs)
    for k in range(n):
        for l in range(n):
            acc = np.zeros_like(T.values)
            Mh = np.einsum("aq...,qp...->pa...", R0.values[:, :, k, l], g0.inv)
            Ma = np.einsum("pb...,qp...->qb...", R0.values[:, :, k, l], g0.inv)
            for s, tag in enumerate(T.sig):
                if tag == "h":
                    acc += _act_slot(Mh, T.values, s, rank)
                else:
                    acc -= _act_slot(Ma, T.values, s, rank)
            rhs[(slice(None),) * rank + (k, l)] = acc
    return lhs, rhs
