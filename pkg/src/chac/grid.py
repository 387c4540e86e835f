"""Periodic grids on [-1, 1]^d, Fourier transforms, spectral operators and norms.

Fields live on uniform tensor grids with power-of-two resolution. Transforms
use Fourier-series normalization: coefficients are the c(k) of
u(x) = sum_k c(k) exp(i pi k.x), so analytic mode amplitudes can be read off
directly from a Spectrum.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field

import numpy as np

#: side half-width of the fixed computational box [-1, 1]^d
BOX_VOLUME_1D = 2.0


class AsymmetricSpectrumError(ValueError):
    """Spectrum is not conjugate-symmetric: inverse transform is not real."""


class MeanViolationError(ValueError):
    """Right-hand side of a periodic Poisson solve has a non-negligible mean."""


def _is_power_of_two(n: int) -> bool:
    return n >= 1 and (n & (n - 1)) == 0


@dataclass(frozen=True)
class PeriodicGrid:
    """Uniform periodic grid on the box [-1, 1]^dim."""

    dim: int
    n: int  # points per axis, power of two >= 8

    def __post_init__(self) -> None:
        if self.dim not in (1, 2, 3):
            raise ValueError(f"dim must be 1, 2 or 3, got {self.dim}")
        if self.n < 8 or not _is_power_of_two(self.n):
            raise ValueError(f"points per axis must be a power of two >= 8, got {self.n}")

    @property
    def h(self) -> float:
        return 2.0 / self.n

    @property
    def shape(self) -> tuple[int, ...]:
        return (self.n,) * self.dim

    @property
    def size(self) -> int:
        return self.n**self.dim

    @property
    def volume(self) -> float:
        return BOX_VOLUME_1D**self.dim

    @property
    def cell_volume(self) -> float:
        return self.h**self.dim

    def axis_points(self) -> np.ndarray:
        return -1.0 + self.h * np.arange(self.n)

    def coords(self) -> tuple[np.ndarray, ...]:
        """Meshgrid coordinate arrays (ij indexing), one per axis."""
        x = self.axis_points()
        return tuple(np.meshgrid(*([x] * self.dim), indexing="ij"))

    def axis_frequencies(self) -> np.ndarray:
        """Integer mode numbers k in FFT ordering (0, 1, ..., -1)."""
        return np.rint(np.fft.fftfreq(self.n) * self.n).astype(int)

    def axis_wavenumbers(self) -> np.ndarray:
        """Wavenumbers xi_k = pi*k in FFT ordering."""
        return np.pi * self.axis_frequencies()

    def wavenumber_grids(self) -> tuple[np.ndarray, ...]:
        xi = self.axis_wavenumbers()
        return tuple(np.meshgrid(*([xi] * self.dim), indexing="ij"))

    def xi_squared(self) -> np.ndarray:
        """|xi|^2 on the full frequency grid."""
        out = np.zeros(self.shape)
        for g in self.wavenumber_grids():
            out = out + g**2
        return out

    def phase_factors(self) -> np.ndarray:
        """Per-mode factors exp(-i xi_k * x_origin) = (-1)^(k1+...+kd).

        They convert raw DFT sums (indexed from the grid corner x = -1) into
        true Fourier-series coefficients on [-1, 1]^d. Real-valued, so they
        preserve conjugate symmetry.
        """
        k = self.axis_frequencies()
        sign = np.where(k % 2 == 0, 1.0, -1.0)
        out = np.ones(self.shape)
        for axis in range(self.dim):
            shape = [1] * self.dim
            shape[axis] = self.n
            out = out * sign.reshape(shape)
        return out


@dataclass
class ScalarField:
    """Real scalar sampled on a PeriodicGrid."""

    grid: PeriodicGrid
    values: np.ndarray

    def __post_init__(self) -> None:
        v = np.asarray(self.values, dtype=float)
        if v.size != self.grid.size:
            raise ValueError(f"expected {self.grid.size} values, got {v.size}")
        self.values = v.reshape(self.grid.shape)
        if not np.all(np.isfinite(self.values)):
            raise ValueError("field contains non-finite values")

    @classmethod
    def zeros(cls, grid: PeriodicGrid) -> "ScalarField":
        return cls(grid, np.zeros(grid.shape))

    @classmethod
    def from_function(cls, grid: PeriodicGrid, fn) -> "ScalarField":
        return cls(grid, np.broadcast_to(fn(*grid.coords()), grid.shape).copy())

    def copy(self) -> "ScalarField":
        return ScalarField(self.grid, self.values.copy())

    def mean(self) -> float:
        return float(self.values.mean())


@dataclass
class Spectrum:
    """Fourier-series coefficients of a periodic scalar field."""

    grid: PeriodicGrid
    coefficients: np.ndarray

    def __post_init__(self) -> None:
        c = np.asarray(self.coefficients, dtype=complex)
        if c.size != self.grid.size:
            raise ValueError(f"expected {self.grid.size} coefficients, got {c.size}")
        self.coefficients = c.reshape(self.grid.shape)


def to_spectrum(f: ScalarField) -> Spectrum:
    """Forward transform: c(k) = (1/N_total) sum_x f(x) exp(-i xi_k.x)."""
    if not np.all(np.isfinite(f.values)):
        raise ValueError("field contains non-finite values")
    raw = np.fft.fftn(f.values) / f.grid.size
    return Spectrum(f.grid, f.grid.phase_factors() * raw)


def to_physical(s: Spectrum, imag_tol: float = 1e-10) -> ScalarField:
    """Inverse of to_spectrum; rejects spectra that are not conjugate-symmetric."""
    raw = s.coefficients * s.grid.phase_factors()
    w = np.fft.ifftn(raw) * s.grid.size
    scale = float(np.max(np.abs(w)))
    if scale > 0.0 and float(np.max(np.abs(w.imag))) > imag_tol * scale:
        raise AsymmetricSpectrumError(
            "inverse transform has imaginary residue "
            f"{np.max(np.abs(w.imag)) / scale:.3e} (relative), spectrum is corrupted"
        )
    return ScalarField(s.grid, w.real)


def _spectral_apply(f: ScalarField, multiplier: np.ndarray) -> ScalarField:
    # Phase factors cancel for diagonal multipliers; work on the raw DFT.
    out = np.fft.ifftn(multiplier * np.fft.fftn(f.values)).real
    return ScalarField(f.grid, out)


def gradient(f: ScalarField, axis: int) -> ScalarField:
    if not 0 <= axis < f.grid.dim:
        raise ValueError(f"axis {axis} out of range for dim {f.grid.dim}")
    return _spectral_apply(f, 1j * f.grid.wavenumber_grids()[axis])


def laplacian(f: ScalarField) -> ScalarField:
    return _spectral_apply(f, -f.grid.xi_squared())


def biharmonic(f: ScalarField) -> ScalarField:
    return _spectral_apply(f, f.grid.xi_squared() ** 2)


def apply_operator(f: ScalarField, op: str, axis: int | None = None) -> ScalarField:
    """Apply a named spectral operator: 'gradient' (with axis), 'laplacian', 'biharmonic'."""
    if op == "gradient":
        if axis is None:
            raise ValueError("gradient requires an axis")
        return gradient(f, axis)
    if op == "laplacian":
        return laplacian(f)
    if op == "biharmonic":
        return biharmonic(f)
    raise ValueError(f"unknown operator {op!r}")


def solve_poisson_periodic(
    rhs: ScalarField, tol_mean: float = 1e-8
) -> tuple[ScalarField, float]:
    """Solve Lap(G) = rhs - mean(rhs) with mean(G) = 0.

    Returns (G, discarded mean). The rhs must be mean-free relative to its L2
    size; a larger mean signals an inconsistent reconstruction residual.
    """
    mean = rhs.mean()
    l2 = norm(rhs, "L2")
    if l2 == 0.0:
        return ScalarField.zeros(rhs.grid), mean
    if abs(mean) > tol_mean * l2:
        raise MeanViolationError(
            f"rhs mean {mean:.3e} exceeds {tol_mean:.1e} * ||rhs||_L2 = {tol_mean * l2:.3e}"
        )
    xi2 = rhs.grid.xi_squared()
    c = np.fft.fftn(rhs.values)
    with np.errstate(divide="ignore", invalid="ignore"):
        g = np.where(xi2 > 0.0, c / (-xi2), 0.0)
    return ScalarField(rhs.grid, np.fft.ifftn(g).real), mean


def _multi_indices(dim: int, max_order: int):
    for alpha in itertools.product(range(max_order + 1), repeat=dim):
        if sum(alpha) <= max_order:
            yield alpha


def norm(f: ScalarField, kind: str) -> float:
    """Norm of a field: kind is 'Lk', 'Hk' or 'Ck' for integer k.

    Lk is the Lebesgue norm by grid quadrature, Hk the Sobolev norm with
    spectral derivatives, Ck the sum of grid maxima of derivatives.
    """
    letter, k = kind[0], int(kind[1:])
    grid = f.grid
    if letter == "L":
        if k < 1:
            raise ValueError("Lebesgue order must be >= 1")
        return float((grid.cell_volume * np.sum(np.abs(f.values) ** k)) ** (1.0 / k))
    if letter == "H":
        power = np.abs(np.fft.fftn(f.values) / grid.size) ** 2
        xis = grid.wavenumber_grids()
        total = 0.0
        for alpha in _multi_indices(grid.dim, k):
            mult = np.ones(grid.shape)
            for xi, a in zip(xis, alpha):
                if a:
                    mult = mult * xi ** (2 * a)
            total += grid.volume * float(np.sum(mult * power))
        return float(np.sqrt(total))
    if letter == "C":
        spec = np.fft.fftn(f.values)
        xis = grid.wavenumber_grids()
        total = 0.0
        for alpha in _multi_indices(grid.dim, k):
            mult = np.ones(grid.shape, dtype=complex)
            for xi, a in zip(xis, alpha):
                if a:
                    mult = mult * (1j * xi) ** a
            total += float(np.max(np.abs(np.fft.ifftn(mult * spec).real)))
        return total
    raise ValueError(f"unknown norm kind {kind!r}")


def inner_product(f: ScalarField, g: ScalarField) -> float:
    """L2 inner product by grid quadrature."""
    return float(f.grid.cell_volume * np.sum(f.values * g.values))


def dealias_mask(grid: PeriodicGrid) -> np.ndarray:
    """2/3-rule mask: keep modes with |k| <= n/3 on every axis."""
    k = np.abs(grid.axis_frequencies())
    keep = k <= grid.n // 3
    out = np.ones(grid.shape, dtype=bool)
    for axis in range(grid.dim):
        shape = [1] * grid.dim
        shape[axis] = grid.n
        out = out & keep.reshape(shape)
    return out


def dealias(f: ScalarField) -> ScalarField:
    return ScalarField(f.grid, np.fft.ifftn(np.fft.fftn(f.values) * dealias_mask(f.grid)).real)


def write_field_csv(path, f: ScalarField) -> None:
    """Write a field as `# field d=<dim> n=<n> domain=-1,1` plus one value per line."""
    with open(path, "w") as fh:
        fh.write(f"# field d={f.grid.dim} n={f.grid.n} domain=-1,1\n")
        for v in f.values.ravel(order="C"):
            fh.write(f"{v:.17g}\n")


def read_field_csv(path) -> ScalarField:
    with open(path) as fh:
        header = fh.readline().strip()
        if not header.startswith("# field"):
            raise ValueError(f"{path}: missing field header")
        meta = dict(tok.split("=", 1) for tok in header[2:].split()[1:])
        grid = PeriodicGrid(dim=int(meta["d"]), n=int(meta["n"]))
        values = np.array([float(line) for line in fh if line.strip()])
    return ScalarField(grid, values)
