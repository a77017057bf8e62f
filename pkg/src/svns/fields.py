"""Spectral fields on the periodic box [0, 2pi)^2.

Conventions used throughout the package:

    u(x) = sum_k u_hat(k) exp(i k . x),   k integer vectors, |k_i| <= n/2 - 1

so `transform` divides the forward FFT by n^2 and u_hat(0) is the spatial mean.
Real fields keep the full complex coefficient array with the conjugate symmetry
u_hat(-k) = conj(u_hat(k)) enforced explicitly. Products are formed on the grid
and dealiased by the 2/3 rule (modes with any |k_i| >= n/3 zeroed). Off-grid
evaluation is direct Fourier summation over the nonzero modes, which is exact
for band-limited fields.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

__all__ = [
    "TorusGrid",
    "SpectralField",
    "SpectralVectorField",
    "transform",
    "vector_transform",
    "inverse_transform",
    "dealias",
    "enforce_conjugate_symmetry",
    "conjugate_defect",
    "gradient",
    "divergence",
    "laplacian",
    "jacobian_matrix",
    "leray_project",
    "poisson_solve",
    "multiply",
    "evaluate_at",
    "PointEvaluator",
    "PhaseTable",
    "l2_norm",
    "linf_norm",
    "kinetic_energy",
    "mean_value",
    "momentum",
    "parseval_integral",
    "save_field_snapshot",
    "load_field_snapshot",
]

TWO_PI = 2.0 * np.pi


class TorusGrid:
    """Uniform n x n collocation grid on [0, 2pi)^2 with its wavenumbers.

    Arrays are precomputed eagerly (n is small in practice) and marked
    read-only. Grids compare equal iff their resolutions match.
    """

    def __init__(self, n: int):
        if n < 4 or n % 2 != 0:
            raise ValueError(f"grid size must be even and >= 4, got {n}")
        self.n = int(n)
        self.dim = 2
        self.spacing = TWO_PI / n
        self.axis = np.arange(n) * self.spacing
        x1, x2 = np.meshgrid(self.axis, self.axis, indexing="ij")
        self.x1 = x1
        self.x2 = x2
        # integer wavenumbers in FFT layout: 0, 1, ..., n/2-1, -n/2, ..., -1
        k = np.fft.fftfreq(n, d=1.0 / n).astype(np.int64)
        self.k = k
        self.k1 = k[:, None] * np.ones((1, n), dtype=np.int64)
        self.k2 = np.ones((n, 1), dtype=np.int64) * k[None, :]
        self.k_squared = (self.k1**2 + self.k2**2).astype(np.float64)
        # 2/3 rule: keep |k_i| < n/3 on every axis
        keep = np.abs(k) < n / 3.0
        self.dealias_mask = keep[:, None] & keep[None, :]
        for arr in (self.axis, self.x1, self.x2, self.k, self.k1, self.k2,
                    self.k_squared, self.dealias_mask):
            arr.setflags(write=False)

    @property
    def points(self) -> np.ndarray:
        """Grid points as an (n, n, 2) array."""
        return np.stack([self.x1, self.x2], axis=-1)

    def __eq__(self, other) -> bool:
        return isinstance(other, TorusGrid) and other.n == self.n

    def __hash__(self) -> int:
        return hash(("TorusGrid", self.n))

    def __repr__(self) -> str:
        return f"TorusGrid(n={self.n})"


def _check_coeffs(grid: TorusGrid, coeffs: np.ndarray, ncomp: int | None) -> np.ndarray:
    coeffs = np.asarray(coeffs, dtype=np.complex128)
    want = (grid.n, grid.n) if ncomp is None else (ncomp, grid.n, grid.n)
    if coeffs.shape != want:
        raise ValueError(f"coefficient array has shape {coeffs.shape}, expected {want}")
    return coeffs


@dataclass(eq=False)
class SpectralField:
    """Real scalar field stored as its full complex coefficient array."""

    grid: TorusGrid
    coeffs: np.ndarray

    def __post_init__(self):
        self.coeffs = _check_coeffs(self.grid, self.coeffs, None)

    def values(self) -> np.ndarray:
        return inverse_transform(self)

    def copy(self) -> "SpectralField":
        return SpectralField(self.grid, self.coeffs.copy())

    def __add__(self, other: "SpectralField") -> "SpectralField":
        _require_same_grid(self, other)
        return SpectralField(self.grid, self.coeffs + other.coeffs)

    def __sub__(self, other: "SpectralField") -> "SpectralField":
        _require_same_grid(self, other)
        return SpectralField(self.grid, self.coeffs - other.coeffs)

    def __mul__(self, scalar: float) -> "SpectralField":
        return SpectralField(self.grid, self.coeffs * float(scalar))

    __rmul__ = __mul__


@dataclass(eq=False)
class SpectralVectorField:
    """Real 2-component vector field, coefficients shaped (2, n, n)."""

    grid: TorusGrid
    coeffs: np.ndarray

    def __post_init__(self):
        self.coeffs = _check_coeffs(self.grid, self.coeffs, 2)

    def component(self, i: int) -> SpectralField:
        return SpectralField(self.grid, self.coeffs[i])

    def values(self) -> np.ndarray:
        """Grid values shaped (2, n, n)."""
        return _ifft(self.coeffs)

    def copy(self) -> "SpectralVectorField":
        return SpectralVectorField(self.grid, self.coeffs.copy())

    def __add__(self, other: "SpectralVectorField") -> "SpectralVectorField":
        _require_same_grid(self, other)
        return SpectralVectorField(self.grid, self.coeffs + other.coeffs)

    def __sub__(self, other: "SpectralVectorField") -> "SpectralVectorField":
        _require_same_grid(self, other)
        return SpectralVectorField(self.grid, self.coeffs - other.coeffs)

    def __mul__(self, scalar: float) -> "SpectralVectorField":
        return SpectralVectorField(self.grid, self.coeffs * float(scalar))

    __rmul__ = __mul__


def _require_same_grid(a, b) -> None:
    if a.grid != b.grid:
        raise ValueError("fields live on different grids")


# ---------------------------------------------------------------------------
# transforms and raw-array helpers
# ---------------------------------------------------------------------------

def _fft(values: np.ndarray) -> np.ndarray:
    """Forward transform of grid values over the last two axes."""
    n = values.shape[-1]
    return np.fft.fft2(values) / (n * n)


def _ifft(coeffs: np.ndarray) -> np.ndarray:
    """Real grid values of a conjugate-symmetric coefficient array."""
    n = coeffs.shape[-1]
    return np.fft.ifft2(coeffs * (n * n)).real


def transform(grid: TorusGrid, values: np.ndarray) -> SpectralField:
    """Scalar grid values -> spectral coefficients."""
    values = np.asarray(values, dtype=np.float64)
    if values.shape != (grid.n, grid.n):
        raise ValueError(f"values have shape {values.shape}, expected {(grid.n, grid.n)}")
    return SpectralField(grid, _fft(values))


def vector_transform(grid: TorusGrid, values: np.ndarray) -> SpectralVectorField:
    """Vector grid values (2, n, n) -> spectral coefficients."""
    values = np.asarray(values, dtype=np.float64)
    if values.shape != (2, grid.n, grid.n):
        raise ValueError(f"values have shape {values.shape}, expected {(2, grid.n, grid.n)}")
    return SpectralVectorField(grid, _fft(values))


def inverse_transform(field: SpectralField) -> np.ndarray:
    return _ifft(field.coeffs)


def _conjugate_flip(coeffs: np.ndarray) -> np.ndarray:
    """conj(u_hat(-k)) arranged on the same FFT layout."""
    flipped = np.flip(coeffs, axis=(-2, -1))
    return np.conj(np.roll(flipped, shift=(1, 1), axis=(-2, -1)))


def conjugate_defect(coeffs: np.ndarray) -> float:
    """Max deviation from the real-field symmetry u_hat(-k) = conj(u_hat(k))."""
    return float(np.max(np.abs(coeffs - _conjugate_flip(coeffs))))


def enforce_conjugate_symmetry(coeffs: np.ndarray) -> np.ndarray:
    """Project onto the conjugate-symmetric subspace (nearest real field)."""
    return 0.5 * (coeffs + _conjugate_flip(coeffs))


def dealias(field):
    """Zero all modes with any |k_i| >= n/3 (2/3 rule)."""
    mask = field.grid.dealias_mask
    return type(field)(field.grid, field.coeffs * mask)


# ---------------------------------------------------------------------------
# differential operators (exact in spectral space)
# ---------------------------------------------------------------------------

def _grad_coeffs(grid: TorusGrid, c: np.ndarray) -> np.ndarray:
    return np.stack([1j * grid.k1 * c, 1j * grid.k2 * c])


def gradient(field: SpectralField) -> SpectralVectorField:
    """grad u, componentwise i k_j u_hat."""
    return SpectralVectorField(field.grid, _grad_coeffs(field.grid, field.coeffs))


def divergence(v: SpectralVectorField) -> SpectralField:
    g = v.grid
    return SpectralField(g, 1j * g.k1 * v.coeffs[0] + 1j * g.k2 * v.coeffs[1])


def laplacian(field):
    """Delta u = -|k|^2 u_hat, scalar or vector."""
    return type(field)(field.grid, -field.grid.k_squared * field.coeffs)


def jacobian_matrix(v: SpectralVectorField) -> np.ndarray:
    """Coefficients of grad v as a (2, 2, n, n) array, entry [i, j] = d v_i / d x_j."""
    g = v.grid
    out = np.empty((2, 2, g.n, g.n), dtype=np.complex128)
    for i in range(2):
        out[i, 0] = 1j * g.k1 * v.coeffs[i]
        out[i, 1] = 1j * g.k2 * v.coeffs[i]
    return out


def _leray_coeffs(grid: TorusGrid, c: np.ndarray) -> np.ndarray:
    """Apply I - k k^T / |k|^2 modewise; the k = 0 mode passes through."""
    ksq = grid.k_squared.copy()
    ksq[0, 0] = 1.0  # k = 0: projector is the identity there
    kdot = (grid.k1 * c[0] + grid.k2 * c[1]) / ksq
    out = np.empty_like(c)
    out[0] = c[0] - grid.k1 * kdot
    out[1] = c[1] - grid.k2 * kdot
    out[0, 0, 0] = c[0, 0, 0]
    out[1, 0, 0] = c[1, 0, 0]
    return out


def leray_project(v: SpectralVectorField) -> SpectralVectorField:
    """Project onto divergence-free fields, preserving the mean mode."""
    return SpectralVectorField(v.grid, _leray_coeffs(v.grid, v.coeffs))


def poisson_solve(rhs: SpectralField, tol: float = 1e-10) -> SpectralField:
    """Solve -Delta phi = rhs with the mean-zero gauge phi_hat(0) = 0.

    The right-hand side must have (numerically) zero mean; otherwise no
    periodic solution exists and a ValueError is raised.
    """
    g = rhs.grid
    scale = max(1.0, float(np.max(np.abs(rhs.coeffs))))
    if abs(rhs.coeffs[0, 0]) > tol * scale:
        raise ValueError(
            f"Poisson right-hand side has nonzero mean {rhs.coeffs[0, 0]:.3e}"
        )
    ksq = g.k_squared.copy()
    ksq[0, 0] = 1.0
    phi = rhs.coeffs / ksq
    phi[0, 0] = 0.0
    return SpectralField(g, phi)


def multiply(a: SpectralField, b: SpectralField) -> SpectralField:
    """Pointwise product on the grid, transformed back and dealiased."""
    _require_same_grid(a, b)
    prod = _ifft(a.coeffs) * _ifft(b.coeffs)
    return SpectralField(a.grid, _fft(prod) * a.grid.dealias_mask)


# ---------------------------------------------------------------------------
# norms and integrals (Parseval)
# ---------------------------------------------------------------------------

def parseval_integral(coeffs: np.ndarray) -> float:
    """integral |u|^2 dx = (2 pi)^2 sum_k |u_hat(k)|^2, any leading axes summed."""
    return float(TWO_PI**2 * np.sum(np.abs(coeffs) ** 2))


def l2_norm(field) -> float:
    """L^2(dx) norm over the box (not normalized by volume)."""
    return float(np.sqrt(parseval_integral(field.coeffs)))


def linf_norm(field) -> float:
    """Sup norm of the grid values (componentwise max for vectors)."""
    return float(np.max(np.abs(_ifft(field.coeffs))))


def kinetic_energy(v: SpectralVectorField) -> float:
    """(1/2) integral |v|^2 dx."""
    return 0.5 * parseval_integral(v.coeffs)


def mean_value(field: SpectralField) -> float:
    return float(field.coeffs[0, 0].real)


def momentum(v: SpectralVectorField) -> np.ndarray:
    """integral v dx = (2 pi)^2 v_hat(0) componentwise."""
    return TWO_PI**2 * v.coeffs[:, 0, 0].real


# ---------------------------------------------------------------------------
# off-grid evaluation by direct Fourier summation
# ---------------------------------------------------------------------------

class PointEvaluator:
    """Direct-summation evaluator for a stack of coefficient arrays.

    The stack is trimmed to the rows/columns that carry nonzero coefficients,
    which is exact and keeps the per-point cost proportional to the active
    band. Evaluation at P points costs O(P * active modes) through two
    complex matmuls with shared phase matrices.
    """

    def __init__(self, grid: TorusGrid, coeffs_stack: np.ndarray):
        stack = np.asarray(coeffs_stack, dtype=np.complex128)
        if stack.ndim == 2:
            stack = stack[None]
        if stack.shape[-2:] != (grid.n, grid.n):
            raise ValueError("coefficient stack does not match the grid")
        self.grid = grid
        self.nfields = stack.shape[0]
        # modes below one ulp of the dominant coefficient contribute less than
        # the roundoff of the summation itself; dropping them keeps the active
        # band tight for fields that are sparse up to FFT noise
        mags = np.abs(stack)
        nz = mags > 1e-15 * mags.max(initial=0.0)
        rows = np.where(nz.any(axis=(0, 2)))[0]
        cols = np.where(nz.any(axis=(0, 1)))[0]
        if rows.size == 0:  # identically zero stack
            rows = np.array([0])
            cols = np.array([0])
        self.kr = grid.k[rows].astype(np.float64)
        self.kc = grid.k[cols].astype(np.float64)
        sub = stack[np.ix_(np.arange(self.nfields), rows, cols)]
        self.sub = np.ascontiguousarray(sub)

    def __call__(self, points: np.ndarray) -> np.ndarray:
        """Evaluate every field of the stack; returns (nfields,) + points.shape[:-1]."""
        return PhaseTable(points).evaluate(self)


class PhaseTable:
    """Cached phase powers for evaluating many coefficient stacks at one
    point set.

    Only the base phases e^{i x_axis} are exponentiated; every other
    e^{i k x} column comes from the power ladder by repeated multiplication,
    and assembled column matrices are cached per mode set, so each additional
    stack evaluated at the same points costs only its trimmed contraction.
    """

    # a mode block up to this many entries is contracted through a single
    # matmul with a cached outer-product phase matrix; larger blocks go
    # row-matrix by row-matrix to bound the temporaries
    _SMALL_BLOCK = 64

    def __init__(self, points: np.ndarray):
        pts = np.asarray(points, dtype=np.float64)
        if pts.shape[-1] != 2:
            raise ValueError("points must have a trailing axis of size 2")
        self.lead = pts.shape[:-1]
        flat = pts.reshape(-1, 2)
        self.npts = flat.shape[0]
        self._base = [np.exp(1j * flat[:, 0]), np.exp(1j * flat[:, 1])]
        # _ladder[axis][k] = e^{i k x_axis} for k = 0..top, grown on demand
        ones = np.ones((1, self.npts), dtype=np.complex128)
        self._ladder = [ones, ones]
        self._matrices: dict = {}
        self._outers: dict = {}

    def _grow(self, axis: int, top: int) -> np.ndarray:
        ladder = self._ladder[axis]
        have = ladder.shape[0]
        if top >= have:
            top = max(top, 2 * have - 1)  # geometric growth caps reallocations
            ext = np.broadcast_to(self._base[axis], (top - have + 1, self.npts))
            ext = np.cumprod(ext, axis=0) * ladder[-1]
            ladder = np.concatenate([ladder, ext])
            self._ladder[axis] = ladder
        return ladder

    def column(self, axis: int, k: int) -> np.ndarray:
        """e^{i k x_axis} at every point, from the cached power ladder."""
        col = self._grow(axis, abs(k))[abs(k)]
        return np.conj(col) if k < 0 else col

    def matrix(self, axis: int, ks: tuple[int, ...]) -> np.ndarray:
        """Assembled (len(ks), npts) phase matrix, cached per mode tuple."""
        key = (axis, ks)
        mat = self._matrices.get(key)
        if mat is None:
            arr = np.asarray(ks)
            ladder = self._grow(axis, int(np.abs(arr).max(initial=0)))
            mat = ladder[np.abs(arr)].copy()
            neg = arr < 0
            if neg.any():
                mat[neg] = np.conj(mat[neg])
            self._matrices[key] = mat
        return mat

    def _outer(self, kr: tuple[int, ...], kc: tuple[int, ...]) -> np.ndarray:
        """(len(kr) * len(kc), npts) matrix of e^{i(k1 x1 + k2 x2)} products."""
        key = (kr, kc)
        mat = self._outers.get(key)
        if mat is None:
            e1 = self.matrix(0, kr)
            e2 = self.matrix(1, kc)
            mat = (e1[:, None, :] * e2[None, :, :]).reshape(-1, self.npts)
            self._outers[key] = mat
        return mat

    def evaluate(self, ev: PointEvaluator) -> np.ndarray:
        """Evaluate a trimmed stack; returns (nfields,) + points.shape[:-1]."""
        kr = tuple(int(k) for k in ev.kr)
        kc = tuple(int(k) for k in ev.kc)
        na, nb = len(kr), len(kc)
        if na * nb <= self._SMALL_BLOCK:
            o = self._outer(kr, kc)
            flat = ev.sub.reshape(ev.nfields, na * nb)
            out = (flat @ o).real
        else:
            e1 = self.matrix(0, kr)
            e2 = self.matrix(1, kc)
            t = ev.sub.transpose(1, 0, 2).reshape(na, ev.nfields * nb).T @ e1
            t = t.reshape(ev.nfields, nb, self.npts)
            out = np.einsum("fbp,bp->fp", t, e2).real
        return np.ascontiguousarray(out).reshape((ev.nfields,) + self.lead)


def evaluate_at(field, points: np.ndarray) -> np.ndarray:
    """Evaluate a scalar or vector field at arbitrary points (exact summation).

    Returns points.shape[:-1] for scalars and points.shape[:-1] + (2,) for
    vectors.
    """
    if isinstance(field, SpectralField):
        return PointEvaluator(field.grid, field.coeffs[None])(points)[0]
    vals = PointEvaluator(field.grid, field.coeffs)(points)
    return np.moveaxis(vals, 0, -1)


# ---------------------------------------------------------------------------
# snapshot format: one row per mode, bit-exact text round trip
# ---------------------------------------------------------------------------

def save_field_snapshot(field, path) -> None:
    """Write coefficients as text rows (k1, k2, component, Re, Im).

    The header records the grid size and component count; %.17g formatting
    makes the round trip bit-exact for float64.
    """
    if isinstance(field, SpectralField):
        stack = field.coeffs[None]
    elif isinstance(field, SpectralVectorField):
        stack = field.coeffs
    else:
        raise TypeError(f"cannot snapshot object of type {type(field).__name__}")
    n = field.grid.n
    ncomp = stack.shape[0]
    with open(path, "w") as fh:
        fh.write("# spectral field snapshot\n")
        fh.write(f"# n = {n}\n")
        fh.write(f"# components = {ncomp}\n")
        fh.write("# k1 k2 component re im\n")
        for c in range(ncomp):
            for i in range(n):
                for j in range(n):
                    z = stack[c, i, j]
                    fh.write(
                        f"{field.grid.k[i]} {field.grid.k[j]} {c} "
                        f"{z.real:.17g} {z.imag:.17g}\n"
                    )


def load_field_snapshot(path):
    """Read a snapshot written by save_field_snapshot."""
    n = None
    ncomp = None
    rows = []
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            if line.startswith("#"):
                if "n =" in line:
                    n = int(line.split("=")[1])
                elif "components =" in line:
                    ncomp = int(line.split("=")[1])
                continue
            k1, k2, c, re, im = line.split()
            rows.append((int(k1), int(k2), int(c), float(re), float(im)))
    if n is None or ncomp is None:
        raise ValueError(f"snapshot {path} is missing its header")
    grid = TorusGrid(n)
    index = {int(k): i for i, k in enumerate(grid.k)}
    stack = np.zeros((ncomp, n, n), dtype=np.complex128)
    for k1, k2, c, re, im in rows:
        stack[c, index[k1], index[k2]] = complex(re, im)
    if ncomp == 1:
        return SpectralField(grid, stack[0])
    return SpectralVectorField(grid, stack)
