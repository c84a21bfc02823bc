"""Periodic grids on the flat torus C^n / (Z + iZ)^n and spectral calculus on them.

Arrays that live on a grid carry the 2n grid axes *last*, ordered
``(x1, y1, ..., xn, yn)``.  Any leading axes are component axes and are
broadcast over by every operation here, so a metric ``g[i, j, ...]`` can be
differentiated in one call.
"""

from __future__ import annotations

import itertools
import os
from dataclasses import dataclass
from functools import cached_property
from typing import BinaryIO, Sequence

import numpy as np
import scipy.fft as sfft

__all__ = [
    "GridError",
    "GridSpec",
    "make_grid",
    "integrate",
    "random_bandlimited",
    "fd_oracle",
    "splitmix64",
    "assert_real",
    "write_field",
    "read_field",
]

_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_MIX1 = np.uint64(0xBF58476D1CE4E5B9)
_MIX2 = np.uint64(0x94D049BB133111EB)


class GridError(ValueError):
    """Invalid grid or field-generation request."""


def _workers() -> int:
    try:
        return max(1, int(os.environ.get("KRF_THREADS", "1")))
    except ValueError:
        return 1


def _is_fft_friendly(N: int) -> bool:
    # 2^a or 3 * 2^a
    if N % 3 == 0:
        N //= 3
    return N > 0 and N & (N - 1) == 0


@dataclass(frozen=True)
class GridSpec:
    """Uniform grid with ``N`` samples per real axis on the unit torus of complex dimension ``n``."""

    n: int
    N: int

    @property
    def ndim(self) -> int:
        return 2 * self.n

    @property
    def shape(self) -> tuple[int, ...]:
        return (self.N,) * self.ndim

    @property
    def size(self) -> int:
        return self.N**self.ndim

    @property
    def axes(self) -> tuple[int, ...]:
        return tuple(range(-self.ndim, 0))

    @cached_property
    def wavenumbers(self) -> np.ndarray:
        """Integer frequencies in standard FFT order, spanning ``[-N/2, N/2)``."""
        return np.rint(np.fft.fftfreq(self.N, d=1.0 / self.N)).astype(np.int64)

    def _along(self, vec: np.ndarray, axis: int) -> np.ndarray:
        shape = [1] * self.ndim
        shape[axis] = self.N
        return vec.reshape(shape)

    def coord(self, axis: int) -> np.ndarray:
        """Coordinate ``m/N`` along real axis ``axis`` (0 = x1, 1 = y1, ...), broadcastable."""
        return self._along(np.arange(self.N) / self.N, axis)

    def coords(self) -> list[np.ndarray]:
        return [np.broadcast_to(self.coord(a), self.shape) for a in range(self.ndim)]

    def freq(self, axis: int) -> np.ndarray:
        return self._along(self.wavenumbers.astype(float), axis)

    @cached_property
    def _dreal(self) -> list[np.ndarray]:
        # d/dx symbols; the Nyquist row is zeroed so the symbol stays odd in k
        out = []
        k = self.wavenumbers.astype(float)
        sym = 2j * np.pi * k
        sym[k == -self.N // 2] = 0.0
        for a in range(self.ndim):
            out.append(self._along(sym, a))
        return out

    def dz_symbol(self, j: int) -> np.ndarray:
        """Fourier multiplier of d/dz_j = (d/dx_j - i d/dy_j) / 2."""
        return 0.5 * (self._dreal[2 * j] - 1j * self._dreal[2 * j + 1])

    def dzbar_symbol(self, j: int) -> np.ndarray:
        return 0.5 * (self._dreal[2 * j] + 1j * self._dreal[2 * j + 1])

    @cached_property
    def dealias_mask(self) -> np.ndarray:
        """2/3-rule mask: keeps modes with every ``|k_axis| <= N/3``."""
        keep = np.abs(self.wavenumbers) <= self.N // 3
        mask = np.ones(self.shape, dtype=bool)
        for a in range(self.ndim):
            mask = mask & self._along(keep, a)
        return mask

    # -- transforms -----------------------------------------------------

    def fft(self, a: np.ndarray) -> np.ndarray:
        return sfft.fftn(a, axes=self.axes, workers=_workers())

    def ifft(self, a: np.ndarray, overwrite: bool = False) -> np.ndarray:
        """Inverse transform; ``overwrite=True`` lets it reuse ``a`` (pass only temporaries)."""
        return sfft.ifftn(a, axes=self.axes, workers=_workers(), overwrite_x=overwrite)

    def apply(self, a: np.ndarray, symbol: np.ndarray) -> np.ndarray:
        return self.ifft(self.fft(a) * symbol, overwrite=True)

    def dz(self, a: np.ndarray, j: int) -> np.ndarray:
        return self.apply(a, self.dz_symbol(j))

    def dzbar(self, a: np.ndarray, j: int) -> np.ndarray:
        return self.apply(a, self.dzbar_symbol(j))

    def ddbar(self, a: np.ndarray, i: int, j: int) -> np.ndarray:
        """``d_i d_jbar a`` in one transform pair."""
        return self.apply(a, self.dz_symbol(i) * self.dzbar_symbol(j))

    def dreal(self, a: np.ndarray, axis: int) -> np.ndarray:
        return self.apply(a, self._dreal[axis])

    def dealias(self, a: np.ndarray) -> np.ndarray:
        return self.ifft(self.fft(a) * self.dealias_mask, overwrite=True)


def make_grid(n: int, N: int) -> GridSpec:
    """Build a grid for complex dimension ``n`` with ``N`` samples per real axis.

    ``N`` must be a power of two between 16 and 256.  Three times a power of
    two (48, 96, 192) is also accepted so that resolution studies can sit
    between the binary sizes.
    """
    if n not in (1, 2):
        raise GridError(f"complex dimension must be 1 or 2, got {n}")
    if not isinstance(N, (int, np.integer)) or not _is_fft_friendly(int(N)):
        raise GridError(f"resolution must be power of two (or 3 x a power of two), got {N}")
    if not 16 <= N <= 256:
        raise GridError(f"resolution must lie in [16, 256], got {N}")
    return GridSpec(n=int(n), N=int(N))


def integrate(grid: GridSpec, field: np.ndarray) -> complex | np.ndarray:
    """Integral over the unit-volume torus, i.e. the grid mean (the zero Fourier mode)."""
    out = np.mean(field, axis=grid.axes)
    return complex(out) if np.ndim(out) == 0 else out


def assert_real(field: np.ndarray, tol: float = 1e-12, what: str = "field") -> np.ndarray:
    """Return the real part after checking that the imaginary residue is negligible.

    The residue is measured relative to ``max(1, max|field|)``.
    """
    field = np.asarray(field)
    if not np.iscomplexobj(field):
        return field
    scale = max(1.0, float(np.max(np.abs(field.real), initial=0.0)))
    resid = float(np.max(np.abs(field.imag), initial=0.0))
    if resid > tol * scale:
        raise ValueError(f"{what} should be real; imaginary residue {resid:.3e} (scale {scale:.3e})")
    return field.real


def splitmix64(seed: int, count: int) -> np.ndarray:
    """First ``count`` outputs of the SplitMix64 generator seeded with ``seed``.

    state_i = seed + (i + 1) * 0x9E3779B97F4A7C15 (mod 2^64), then
    z ^= z >> 30; z *= 0xBF58476D1CE4E5B9; z ^= z >> 27; z *= 0x94D049BB133111EB; z ^= z >> 31.
    """
    idx = np.arange(1, count + 1, dtype=np.uint64)
    with np.errstate(over="ignore"):
        z = np.uint64(seed % 2**64) + idx * _GOLDEN
        z = (z ^ (z >> np.uint64(30))) * _MIX1
        z = (z ^ (z >> np.uint64(27))) * _MIX2
    return z ^ (z >> np.uint64(31))


def _unit_uniforms(seed: int, count: int) -> np.ndarray:
    # top 53 bits -> [0, 1)
    return (splitmix64(seed, count) >> np.uint64(11)).astype(np.float64) * 2.0**-53


def _bandlimited_raw(grid: GridSpec, K: int, seed: int) -> np.ndarray:
    freqs = [k for k in itertools.product(range(-K, K + 1), repeat=grid.ndim) if _positive_half(k)]
    u = _unit_uniforms(seed, 2 * len(freqs)).reshape(-1, 2)
    coef = (2 * u[:, 0] - 1) + 1j * (2 * u[:, 1] - 1)
    spec = np.zeros(grid.shape, dtype=complex)
    for k, c in zip(freqs, coef):
        spec[tuple(ki % grid.N for ki in k)] = c
        spec[tuple(-ki % grid.N for ki in k)] = np.conj(c)
    return grid.ifft(spec, overwrite=True).real * grid.size


def random_bandlimited(grid: GridSpec, K: int, amplitude: float, seed: int,
                       norm_N: int | None = None) -> np.ndarray:
    """Seeded real trigonometric polynomial with frequencies in the max-norm ball of radius ``K``.

    Frequency vectors are enumerated lexicographically over ``[-K, K]^(2n)``;
    each vector whose first nonzero entry is positive draws two uniforms
    ``(a, b)`` and gets coefficient ``(2a - 1) + i(2b - 1)``, its negative gets
    the conjugate, and the mean is zero.  The coefficients do not depend on
    ``N``, so the same seed describes the same function on every grid.  The
    sampled field is rescaled to ``max|field| = amplitude``.

    With ``norm_N`` the maximum is taken on the ``norm_N`` grid instead, which
    gives literally the same function on every grid that resolves ``K``.
    """
    if amplitude <= 0:
        raise GridError("amplitude must be positive")
    if not 1 <= K <= grid.N // 3:
        raise GridError(f"max frequency K={K} must lie in [1, N/3] = [1, {grid.N // 3}]")
    if norm_N is not None and not 1 <= K <= norm_N // 3:
        raise GridError(f"max frequency K={K} is not resolved by the normalization grid N={norm_N}")
    field = _bandlimited_raw(grid, K, seed)
    if norm_N is None or norm_N == grid.N:
        peak = np.max(np.abs(field))
    else:
        peak = np.max(np.abs(_bandlimited_raw(make_grid(grid.n, norm_N), K, seed)))
    field *= amplitude / peak
    return field.astype(complex)


def _positive_half(k: Sequence[int]) -> bool:
    for ki in k:
        if ki != 0:
            return ki > 0
    return False


def fd_oracle(grid: GridSpec, field: np.ndarray, direction: int, order: int = 1) -> np.ndarray:
    """Second-order centred finite difference along real axis ``direction``.

    Only meant as an independent check on the spectral derivatives.
    """
    h = 1.0 / grid.N
    ax = grid.axes[direction]
    fwd = np.roll(field, -1, axis=ax)
    bwd = np.roll(field, 1, axis=ax)
    if order == 1:
        return (fwd - bwd) / (2 * h)
    if order == 2:
        return (fwd - 2 * field + bwd) / h**2
    raise GridError("finite-difference order must be 1 or 2")


# -- field dumps -----------------------------------------------------------

FIELD_MAGIC = "KRFLAB-FIELD v1"


def write_field(fh: BinaryIO, grid: GridSpec, field: np.ndarray, kind: str = "complex") -> None:
    """Write one field: an ASCII header line, then little-endian float64 samples.

    Samples are row-major over ``(x1, y1, ..., xn, yn)``; real parts first,
    then imaginary parts when ``kind == "complex"``.
    """
    if kind not in ("real", "complex"):
        raise GridError(f"unknown field kind {kind!r}")
    field = np.asarray(field)
    if field.shape != grid.shape:
        raise GridError(f"field shape {field.shape} does not match grid {grid.shape}")
    fh.write(f"{FIELD_MAGIC} n={grid.n} N={grid.N} kind={kind}\n".encode("ascii"))
    re = np.ascontiguousarray(field.real, dtype="<f8")
    fh.write(re.tobytes())
    if kind == "complex":
        fh.write(np.ascontiguousarray(field.imag, dtype="<f8").tobytes())


def read_field(fh: BinaryIO) -> tuple[GridSpec, np.ndarray, str]:
    line = fh.readline().decode("ascii", errors="replace").strip()
    parts = line.split()
    if " ".join(parts[:2]) != FIELD_MAGIC or len(parts) != 5:
        raise GridError(f"not a field dump header: {line!r}")
    meta = dict(p.split("=", 1) for p in parts[2:])
    grid = make_grid(int(meta["n"]), int(meta["N"]))
    kind = meta["kind"]
    nbytes = 8 * grid.size
    re = fh.read(nbytes)
    if len(re) != nbytes:
        raise GridError("truncated field dump")
    out = np.frombuffer(re, dtype="<f8").reshape(grid.shape).astype(complex)
    if kind == "complex":
        im = fh.read(nbytes)
        if len(im) != nbytes:
            raise GridError("truncated field dump")
        out = out + 1j * np.frombuffer(im, dtype="<f8").reshape(grid.shape)
    return grid, out, kind
