"""Discretized forward operators for the two built-in physics.

Both models expose the same surface:

* ``system_matrix(m)``       -- the sparse complex system A(m),
* ``state_jacobian(m, u)``   -- d(A(m) u)/dm,
* ``adjoint_state_jacobian(m, v)`` -- d(A(m)^H v)/dm,
* ``curvature_term(m, u, v)``      -- d(state_jacobian(m, u)^H v)/dm,

plus grid metadata, the model-space smoothing operator used for
regularization, and the coordinates of the model degrees of freedom
(used when resampling models between grids).

The 1D model is a time-harmonic diffusion operator with a lumped mass
vector and cell-centred parameters; the 2D model is a scalar Helmholtz
operator with radiation boundary conditions and node-based parameters.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp


def difference_matrix(n: int, h: float) -> sp.csr_matrix:
    """(n-1) x n forward-difference matrix scaled by 1/h."""
    if n < 2:
        raise ValueError("need at least two points")
    rows = np.repeat(np.arange(n - 1), 2)
    cols = np.empty(2 * (n - 1), dtype=int)
    cols[0::2] = np.arange(n - 1)
    cols[1::2] = np.arange(1, n)
    vals = np.empty(2 * (n - 1))
    vals[0::2] = -1.0 / h
    vals[1::2] = 1.0 / h
    return sp.csr_matrix((vals, (rows, cols)), shape=(n - 1, n))


@dataclass(frozen=True)
class Grid1D:
    """Uniform grid on [0, 1] with n nodes; parameters live on cell centres."""

    n: int

    def __post_init__(self):
        if self.n < 3:
            raise ValueError("Grid1D needs n >= 3")

    @property
    def h(self) -> float:
        return 1.0 / (self.n - 1)

    def nodes(self) -> np.ndarray:
        return np.linspace(0.0, 1.0, self.n)

    def cell_centres(self) -> np.ndarray:
        x = self.nodes()
        return 0.5 * (x[:-1] + x[1:])


@dataclass(frozen=True)
class Grid2D:
    """Uniform tensor grid on [0, extent1] x [0, extent2]; parameters on nodes.

    Node ``(i1, i2)`` maps to flat index ``i1 + n1 * i2``.
    """

    n1: int
    n2: int
    extent1: float = 1.0
    extent2: float = 1.0

    def __post_init__(self):
        if self.n1 < 3 or self.n2 < 3:
            raise ValueError("Grid2D needs n1, n2 >= 3")
        if self.extent1 <= 0 or self.extent2 <= 0:
            raise ValueError("extents must be positive")

    @property
    def h1(self) -> float:
        return self.extent1 / (self.n1 - 1)

    @property
    def h2(self) -> float:
        return self.extent2 / (self.n2 - 1)

    @property
    def n_nodes(self) -> int:
        return self.n1 * self.n2

    def nodes1(self) -> np.ndarray:
        return np.linspace(0.0, self.extent1, self.n1)

    def nodes2(self) -> np.ndarray:
        return np.linspace(0.0, self.extent2, self.n2)

    def node_coordinates(self) -> np.ndarray:
        """(n1*n2, 2) coordinates in flat-index order."""
        x1, x2 = np.meshgrid(self.nodes1(), self.nodes2(), indexing="ij")
        return np.column_stack([x1.ravel(order="F"), x2.ravel(order="F")])

    def boundary_mask(self) -> np.ndarray:
        """Boolean mask of boundary nodes (corners count once)."""
        i1 = np.tile(np.arange(self.n1), self.n2)
        i2 = np.repeat(np.arange(self.n2), self.n1)
        return (i1 == 0) | (i1 == self.n1 - 1) | (i2 == 0) | (i2 == self.n2 - 1)


def _check_positive_model(m: np.ndarray, dim: int) -> np.ndarray:
    m = np.asarray(m, dtype=np.float64)
    if m.shape != (dim,):
        raise ValueError(f"model must have shape ({dim},), got {m.shape}")
    if np.any(m <= 0.0):
        raise ValueError("model values must be strictly positive")
    return m


class Parabolic1DModel:
    """Time-harmonic 1D diffusion operator with Neumann ends.

    A(m) = i*omega*diag(w) + D^T diag(m) D with the lumped mass vector
    w = [1/2, 1, ..., 1, 1/2] and D the forward-difference matrix.  The
    parameter m holds the diffusivity in the cell centres, so A(m) u is
    linear in m and the model Jacobians are exact.
    """

    def __init__(self, grid: Grid1D, omega: float):
        self.grid = grid
        self.omega = float(omega)
        self.diff = difference_matrix(grid.n, grid.h)
        self._diff_t = self.diff.T.tocsr()
        w = np.ones(grid.n)
        w[0] = w[-1] = 0.5
        self.lumping = w
        self._mass = sp.diags(1j * self.omega * w).tocsr()

    @property
    def state_dim(self) -> int:
        return self.grid.n

    @property
    def model_dim(self) -> int:
        return self.grid.n - 1

    def check_model(self, m: np.ndarray) -> np.ndarray:
        return _check_positive_model(m, self.model_dim)

    def system_matrix(self, m: np.ndarray) -> sp.csr_matrix:
        m = self.check_model(m)
        return (self._mass + self._diff_t @ sp.diags(m) @ self.diff).tocsr()

    def state_jacobian(self, m: np.ndarray, u: np.ndarray) -> sp.csr_matrix:
        # d(A(m)u)/dm = D^T diag(D u); independent of m for this physics
        return (self._diff_t @ sp.diags(self.diff @ u)).tocsr()

    def adjoint_state_jacobian(self, m: np.ndarray, v: np.ndarray) -> sp.csr_matrix:
        return (self._diff_t @ sp.diags(self.diff @ v)).tocsr()

    def curvature_term(self, m: np.ndarray, u: np.ndarray, v: np.ndarray) -> sp.csr_matrix:
        return sp.csr_matrix((self.model_dim, self.model_dim), dtype=np.complex128)

    def regularizer_matrix(self) -> sp.csr_matrix:
        """First-difference operator on the cell-centred model values."""
        return difference_matrix(self.model_dim, self.grid.h)

    def model_points(self) -> np.ndarray:
        return self.grid.cell_centres()


class Helmholtz2DModel:
    """Scalar 2D Helmholtz operator with radiation boundary conditions.

    A(m) = diag(s(m)) - D^T D with D the stacked per-axis difference matrix
    and s(m) = omega^2 m in the interior and
    s(m) = omega^2 m / 2 + i omega sqrt(m) / h on boundary nodes.  The model
    m is the squared slowness on the nodes.  Uniform spacing (h1 == h2) is
    required because the boundary term carries a single 1/h factor.
    """

    def __init__(self, grid: Grid2D, omega: float):
        if not np.isclose(grid.h1, grid.h2, rtol=1e-9, atol=0.0):
            raise ValueError("Helmholtz2DModel requires h1 == h2")
        self.grid = grid
        self.omega = float(omega)
        self.h = grid.h1
        d1 = difference_matrix(grid.n1, grid.h1)
        d2 = difference_matrix(grid.n2, grid.h2)
        self.diff = sp.vstack(
            [sp.kron(sp.eye(grid.n2), d1), sp.kron(d2, sp.eye(grid.n1))]
        ).tocsr()
        self._laplacian = (self.diff.T @ self.diff).tocsr()
        self.boundary = grid.boundary_mask()

    @property
    def state_dim(self) -> int:
        return self.grid.n_nodes

    @property
    def model_dim(self) -> int:
        return self.grid.n_nodes

    def check_model(self, m: np.ndarray) -> np.ndarray:
        return _check_positive_model(m, self.model_dim)

    def _mass_coefficient(self, m: np.ndarray) -> np.ndarray:
        s = (self.omega**2 * m).astype(np.complex128)
        b = self.boundary
        s[b] = 0.5 * self.omega**2 * m[b] + 1j * self.omega * np.sqrt(m[b]) / self.h
        return s

    def _mass_derivative(self, m: np.ndarray) -> np.ndarray:
        ds = np.full(self.model_dim, self.omega**2, dtype=np.complex128)
        b = self.boundary
        ds[b] = 0.5 * self.omega**2 + 1j * self.omega / (2.0 * np.sqrt(m[b]) * self.h)
        return ds

    def _mass_second_derivative(self, m: np.ndarray) -> np.ndarray:
        d2s = np.zeros(self.model_dim, dtype=np.complex128)
        b = self.boundary
        d2s[b] = -1j * self.omega / (4.0 * m[b] ** 1.5 * self.h)
        return d2s

    def system_matrix(self, m: np.ndarray) -> sp.csr_matrix:
        m = self.check_model(m)
        return (sp.diags(self._mass_coefficient(m)) - self._laplacian).tocsr()

    def state_jacobian(self, m: np.ndarray, u: np.ndarray) -> sp.csr_matrix:
        m = self.check_model(m)
        return sp.diags(self._mass_derivative(m) * u).tocsr()

    def adjoint_state_jacobian(self, m: np.ndarray, v: np.ndarray) -> sp.csr_matrix:
        m = self.check_model(m)
        return sp.diags(np.conj(self._mass_derivative(m)) * v).tocsr()

    def curvature_term(self, m: np.ndarray, u: np.ndarray, v: np.ndarray) -> sp.csr_matrix:
        m = self.check_model(m)
        return sp.diags(np.conj(self._mass_second_derivative(m) * u) * v).tocsr()

    def regularizer_matrix(self) -> sp.csr_matrix:
        return self.diff

    def model_points(self) -> np.ndarray:
        return self.grid.node_coordinates()


def helmholtz_1d_operator(n: int, omega: float, m=1.0) -> sp.csr_matrix:
    """1D time-harmonic wave operator with Neumann ends.

    A = omega^2 diag(w * m) - D^T D, the companion operator to the parabolic
    one in the condition-number studies of the augmented system.
    """
    grid = Grid1D(n)
    d = difference_matrix(n, grid.h)
    w = np.ones(n)
    w[0] = w[-1] = 0.5
    m = np.broadcast_to(np.asarray(m, dtype=np.float64), (n,))
    return (sp.diags(omega**2 * w * m) - d.T @ d).tocsr().astype(np.complex128)


@dataclass(frozen=True)
class SamplingOperator:
    """Linear-interpolation sampling of the state at receiver locations."""

    matrix: sp.csr_matrix
    locations: np.ndarray

    @property
    def n_receivers(self) -> int:
        return self.matrix.shape[0]


def _axis_weights(x: float, h: float, n: int, extent: float, label: str):
    eps = 1e-12 * max(extent, 1.0)
    if x < -eps or x > extent + eps:
        raise ValueError(f"{label} {x} outside domain [0, {extent}]")
    x = min(max(x, 0.0), extent)
    i = min(int(np.floor(x / h)), n - 2)
    t = x / h - i
    return i, min(max(t, 0.0), 1.0)


def interpolation_matrix(grid, points) -> sp.csr_matrix:
    """Rows of linear (1D) / bilinear (2D) interpolation weights.

    Each row holds nonnegative weights summing to one; exact-node hits
    produce a single unit entry.
    """
    if isinstance(grid, Grid1D):
        pts = np.atleast_1d(np.asarray(points, dtype=np.float64))
        rows, cols, vals = [], [], []
        for r, x in enumerate(pts):
            i, t = _axis_weights(float(x), grid.h, grid.n, 1.0, "location")
            rows += [r, r]
            cols += [i, i + 1]
            vals += [1.0 - t, t]
        mat = sp.csr_matrix((vals, (rows, cols)), shape=(len(pts), grid.n))
    elif isinstance(grid, Grid2D):
        pts = np.atleast_2d(np.asarray(points, dtype=np.float64))
        if pts.shape[1] != 2:
            raise ValueError("2D locations must be (L, 2)")
        rows, cols, vals = [], [], []
        for r, (x1, x2) in enumerate(pts):
            i1, t1 = _axis_weights(float(x1), grid.h1, grid.n1, grid.extent1, "location")
            i2, t2 = _axis_weights(float(x2), grid.h2, grid.n2, grid.extent2, "location")
            for di1, w1 in ((0, 1.0 - t1), (1, t1)):
                for di2, w2 in ((0, 1.0 - t2), (1, t2)):
                    rows.append(r)
                    cols.append((i1 + di1) + grid.n1 * (i2 + di2))
                    vals.append(w1 * w2)
        mat = sp.csr_matrix((vals, (rows, cols)), shape=(len(pts), grid.n_nodes))
    else:
        raise TypeError(f"unsupported grid type {type(grid)!r}")
    mat.eliminate_zeros()
    return mat


def sampling_operator(grid, receiver_locations) -> SamplingOperator:
    """Build the receiver sampling operator for a grid."""
    locs = np.asarray(receiver_locations, dtype=np.float64)
    return SamplingOperator(interpolation_matrix(grid, locs), locs)


def source_vector(grid, source_location, amplitude: float = 1.0) -> np.ndarray:
    """Point source placed by adjoint linear interpolation."""
    row = interpolation_matrix(grid, [source_location])
    q = np.asarray(row.T @ np.array([amplitude], dtype=np.complex128)).ravel()
    return q
