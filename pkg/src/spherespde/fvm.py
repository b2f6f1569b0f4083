"""Finite-volume precision matrix of the deformed SPDE on a triangulated sphere.

With piecewise-constant cells, a two-point flux across each shared edge and
``D = L = diag(|T_i| / rho_i^2)``, the GMRF precision is

    Q = (D - A_H)^T L^{-1} (D - A_H).
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import scipy.sparse as sp
from scipy.special import k1

from .deform import DeformationCoeffs, edge_fields, mesh_basis
from .errors import DegenerateMetricError, FormatError, InputError
from .gmrf import factorize
from .mesh import SphereMesh

MIN_MATERN_CELLS = 500


@dataclass(frozen=True, eq=False)
class PrecisionBuild:
    """Precision ``Q`` with its finite-volume factors (all CSR)."""

    Q: sp.csr_matrix
    D: sp.dia_matrix
    A_H: sp.csr_matrix
    L: sp.dia_matrix
    transmissibility: np.ndarray
    rho_cells: np.ndarray


def transmissibilities(mesh: SphereMesh, coeffs: DeformationCoeffs) -> np.ndarray:
    """Edge couplings ``|sigma| n^T H n / dist(c_i, c_k)`` with H at the midpoint."""
    v, n2 = edge_fields(coeffs, mesh)
    vn = np.sum(v * n2, axis=1)
    nHn = (np.sum(n2 * n2, axis=1) + vn**2) / np.sqrt(1.0 + np.sum(v * v, axis=1))
    t = mesh.edge_lengths * nHn / mesh.centroid_distances
    if not np.all(t > 0):
        raise AssertionError("non-positive transmissibility; H must be positive definite")
    return t


def flux_matrix(n: int, edge_tris: np.ndarray, t: np.ndarray) -> sp.csr_matrix:
    """``A_H`` with off-diagonals ``t_ik`` and zero row sums."""
    i, k = edge_tris[:, 0], edge_tris[:, 1]
    diag = -np.bincount(i, weights=t, minlength=n) - np.bincount(k, weights=t, minlength=n)
    rows = np.concatenate([i, k, np.arange(n)])
    cols = np.concatenate([k, i, np.arange(n)])
    return sp.csr_matrix((np.concatenate([t, t, diag]), (rows, cols)), shape=(n, n))


def assemble_precision(mesh: SphereMesh, coeffs: DeformationCoeffs) -> PrecisionBuild:
    """Assemble the GMRF precision for ``coeffs`` on a region-tagged mesh."""
    if not mesh.tagged:
        raise InputError("mesh must be region-tagged before assembly")
    n = mesh.n_triangles
    rho = mesh_basis(mesh, coeffs.order).rho_cells(coeffs)
    with np.errstate(over="ignore", divide="ignore"):
        dvals = mesh.areas / rho**2
    if not np.all(np.isfinite(dvals) & (dvals > 0)):
        raise DegenerateMetricError("range field under- or overflows on the mesh")
    t = transmissibilities(mesh, coeffs)
    A = flux_matrix(n, mesh.edge_tris, t)
    D = sp.diags(dvals)
    K = (D - A).tocsr()
    Q = (K.T @ sp.diags(1.0 / dvals) @ K).tocsr()
    Q = (0.5 * (Q + Q.T)).tocsr()
    Q.sort_indices()
    return PrecisionBuild(Q=Q, D=D, A_H=A, L=sp.diags(dvals), transmissibility=t, rho_cells=rho)


def precision(mesh: SphereMesh, coeffs: DeformationCoeffs) -> sp.csr_matrix:
    return assemble_precision(mesh, coeffs).Q


# -- coordinate text format -------------------------------------------------
def save_coo(M, path) -> None:
    """Write ``n_rows n_cols nnz`` then one ``row col value`` line per entry (0-based)."""
    M = sp.coo_matrix(M)
    order = np.lexsort((M.col, M.row))
    with open(path, "w") as fh:
        fh.write(f"{M.shape[0]} {M.shape[1]} {M.nnz}\n")
        for r, c, v in zip(M.row[order], M.col[order], M.data[order]):
            fh.write(f"{r} {c} {float(v)!r}\n")


def load_coo(path) -> sp.csr_matrix:
    lines = Path(path).read_text().split("\n")
    try:
        nr, nc, nnz = (int(x) for x in lines[0].split())
        body = np.array([ln.split() for ln in lines[1 : nnz + 1]], dtype=float).reshape(nnz, 3)
    except ValueError as exc:
        raise FormatError(f"malformed coordinate file {path}") from exc
    return sp.csr_matrix((body[:, 2], (body[:, 0].astype(int), body[:, 1].astype(int))), shape=(nr, nc))


# -- stationary correlation check --------------------------------------------
def matern_correlation(r, rho: float) -> np.ndarray:
    """Smoothness-one Matern correlation ``(r/rho) K_1(r/rho)``, equal to 1 at 0."""
    r = np.asarray(r, dtype=float)
    x = r / rho
    with np.errstate(invalid="ignore", divide="ignore"):
        c = x * k1(x)
    return np.where(x == 0, 1.0, c)


@dataclass(frozen=True, eq=False)
class MaternTable:
    distance: np.ndarray
    empirical: np.ndarray
    analytic: np.ndarray
    coarse_mesh: bool

    def max_deviation(self, lo: float = 0.1, hi: float = 1.0) -> float:
        sel = (self.distance >= lo) & (self.distance <= hi)
        return float(np.max(np.abs(self.empirical[sel] - self.analytic[sel])))


def matern_check(mesh: SphereMesh, rho_const: float, n_ref: int = 8, seed: int = 0) -> MaternTable:
    """Correlations of the stationary GMRF against the analytic Matern.

    Columns of ``Q^{-1}`` are obtained by sparse solves for ``n_ref``
    reference cells and normalised with the exact marginal variances. One
    row is returned per (reference cell, cell) pair.
    """
    if rho_const <= 0:
        raise InputError("rho_const must be positive")
    coarse = mesh.n_triangles < MIN_MATERN_CELLS
    if coarse:
        warnings.warn(f"mesh has {mesh.n_triangles} < {MIN_MATERN_CELLS} cells; correlations are unreliable",
                      stacklevel=2)
    if not mesh.tagged:
        mesh = mesh.with_uniform_region("sea")
    Q = precision(mesh, DeformationCoeffs.stationary(rho_const))
    fac = factorize(Q)
    var = fac.diag_inverse()
    rng = np.random.default_rng(seed)
    refs = rng.choice(mesh.n_triangles, size=min(n_ref, mesh.n_triangles), replace=False)
    rhs = np.zeros((mesh.n_triangles, len(refs)))
    rhs[refs, np.arange(len(refs))] = 1.0
    cols = fac.solve(rhs)
    dist, emp = [], []
    for j, r in enumerate(refs):
        d = np.arctan2(np.linalg.norm(np.cross(mesh.centroids, mesh.centroids[r]), axis=1),
                       mesh.centroids @ mesh.centroids[r])
        dist.append(d)
        emp.append(cols[:, j] / np.sqrt(var * var[r]))
    dist = np.concatenate(dist)
    emp = np.concatenate(emp)
    order = np.argsort(dist, kind="stable")
    dist, emp = dist[order], emp[order]
    return MaternTable(dist, emp, matern_correlation(dist, rho_const), coarse)
