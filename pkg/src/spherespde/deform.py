"""Spatially varying range ``rho(s)``, vector field ``v(s)`` and local metric.

Two domains (sea, land) each carry their own harmonic expansion of
``log rho`` and of ``v``. Buffer cells inherit the expansion of the nearest
non-buffer domain with the range multiplied by the drop ``d``.

Flat parameter layout (``pack``), with ``nb0 = (L+1)^2`` and ``nb1 = L^2+2L``::

    alpha[sea] (nb0), alpha[land] (nb0),
    e1[sea] (nb1), e1[land] (nb1),
    e2[sea] (nb1), e2[land] (nb1),
    d, tau2[sea], tau2[land]

for ``6(L^2+2L)+5`` entries. ``to_theta`` uses the same order with ``d``
on the logit scale and the nuggets on the log scale.
"""
from __future__ import annotations

import weakref
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.special import expit, logit

from .errors import DegenerateMetricError, FormatError, InputError
from .harmonics import gradient_matrix, harmonic_matrix, lm_pairs, n_basis, tangent_basis
from .mesh import BUFFER, LAND, SEA, SphereMesh, nearest_nonbuffer

DOMAINS = ("sea", "land")
MAX_ORDER = 4


def _frozen(a):
    a = np.array(a, dtype=float)
    a.setflags(write=False)
    return a


def _exp_nugget(log_tau2):
    """``exp`` of log-nuggets; values that under- or overflow are degenerate."""
    with np.errstate(over="ignore", under="ignore"):
        tau2 = np.exp(log_tau2)
    if not np.all(np.isfinite(tau2) & (tau2 > 0)):
        raise DegenerateMetricError(f"log-nugget {log_tau2} is outside the representable range")
    return tau2


@dataclass(frozen=True, eq=False)
class DeformationCoeffs:
    """Spatial hyperparameters for the two-domain deformed SPDE.

    Parameters
    ----------
    order : int
        Highest harmonic degree ``L`` (0 gives a stationary model).
    alpha : (2, (L+1)^2) array
        ``log rho`` coefficients, rows indexed by domain (sea, land), columns
        by :func:`~spherespde.harmonics.lm_pairs` order.
    e1, e2 : (2, L^2+2L) arrays
        Gradient and rotated-gradient coefficients of ``v``.
    drop_d : float
        Multiplicative range drop in the buffer, in [0, 1].
    nugget : (2,) array
        Nugget variances per domain, strictly positive.
    """

    order: int
    alpha: np.ndarray
    e1: np.ndarray
    e2: np.ndarray
    drop_d: float = 1.0
    nugget: np.ndarray = field(default_factory=lambda: np.ones(2))

    def __post_init__(self):
        if not 0 <= self.order <= MAX_ORDER:
            raise InputError(f"harmonic order must be in [0, {MAX_ORDER}], got {self.order}")
        nb0, nb1 = n_basis(self.order), n_basis(self.order, start=1)
        for name, shape in (("alpha", (2, nb0)), ("e1", (2, nb1)), ("e2", (2, nb1))):
            arr = _frozen(getattr(self, name))
            if arr.shape != shape:
                raise InputError(f"{name} must have shape {shape}, got {arr.shape}")
            object.__setattr__(self, name, arr)
        nug = _frozen(np.broadcast_to(np.asarray(self.nugget, dtype=float), (2,)))
        object.__setattr__(self, "nugget", nug)
        if not 0.0 <= self.drop_d <= 1.0:
            raise InputError(f"drop_d must lie in [0, 1], got {self.drop_d}")
        if np.any(nug <= 0) or not np.all(np.isfinite(nug)):
            raise InputError("nuggets must be strictly positive")
        object.__setattr__(self, "drop_d", float(self.drop_d))

    # -- construction -----------------------------------------------------
    @classmethod
    def zeros(cls, order: int, drop_d: float = 1.0, nugget=1.0) -> "DeformationCoeffs":
        nb0, nb1 = n_basis(order), n_basis(order, start=1)
        return cls(order, np.zeros((2, nb0)), np.zeros((2, nb1)), np.zeros((2, nb1)), drop_d, nugget)

    @classmethod
    def stationary(cls, rho: float, order: int = 0, nugget=1.0) -> "DeformationCoeffs":
        """Constant range ``rho`` everywhere, ``v = 0``."""
        if rho <= 0:
            raise InputError("rho must be positive")
        c = cls.zeros(order, nugget=nugget)
        alpha = np.array(c.alpha)
        alpha[:, 0] = np.log(rho) * 2.0 * np.sqrt(np.pi)
        return c.replace(alpha=alpha)

    def replace(self, **kw) -> "DeformationCoeffs":
        args = dict(order=self.order, alpha=self.alpha, e1=self.e1, e2=self.e2,
                    drop_d=self.drop_d, nugget=self.nugget)
        args.update(kw)
        return DeformationCoeffs(**args)

    # -- flat vectors -----------------------------------------------------
    @staticmethod
    def size(order: int) -> int:
        return 6 * (order**2 + 2 * order) + 5

    def pack(self) -> np.ndarray:
        return np.concatenate([self.alpha.ravel(), self.e1.ravel(), self.e2.ravel(),
                               [self.drop_d], self.nugget])

    @classmethod
    def unpack(cls, vec, order: int) -> "DeformationCoeffs":
        vec = np.asarray(vec, dtype=float)
        if vec.shape != (cls.size(order),):
            raise InputError(f"expected {cls.size(order)} parameters for order {order}, got {vec.shape}")
        nb0, nb1 = n_basis(order), n_basis(order, start=1)
        a = vec[: 2 * nb0].reshape(2, nb0)
        o = 2 * nb0
        e1 = vec[o : o + 2 * nb1].reshape(2, nb1)
        e2 = vec[o + 2 * nb1 : o + 4 * nb1].reshape(2, nb1)
        return cls(order, a, e1, e2, vec[-3], vec[-2:])

    def to_theta(self) -> np.ndarray:
        """Unconstrained vector: logit(d) and log(tau2) replace d and tau2."""
        if not 0.0 < self.drop_d < 1.0:
            raise InputError("d must be strictly inside (0, 1) to map to the logit scale")
        v = self.pack()
        v[-3] = logit(self.drop_d)
        v[-2:] = np.log(self.nugget)
        return v

    @classmethod
    def from_theta(cls, theta, order: int) -> "DeformationCoeffs":
        v = np.array(theta, dtype=float)
        if v.shape != (cls.size(order),):
            raise InputError(f"expected {cls.size(order)} parameters for order {order}, got {v.shape}")
        v[-3] = expit(v[-3])
        v[-2:] = _exp_nugget(v[-2:])
        return cls.unpack(v, order)

    @staticmethod
    def names(order: int) -> list:
        out = []
        for field_name, start in (("alpha", 0), ("e1", 1), ("e2", 1)):
            for dom in DOMAINS:
                out += [f"{field_name}[{dom}][{l},{m}]" for l, m in lm_pairs(order, start)]
        return out + ["d", "tau2[sea]", "tau2[land]"]

    # -- key/value file ---------------------------------------------------
    def to_text(self) -> str:
        lines = [f"order {self.order}", f"drop_d {self.drop_d!r}"]
        for j, dom in enumerate(DOMAINS):
            lines.append(f"nugget {dom} {float(self.nugget[j])!r}")
        for field_name, start in (("alpha", 0), ("e1", 1), ("e2", 1)):
            arr = getattr(self, field_name)
            for j, dom in enumerate(DOMAINS):
                for b, (l, m) in enumerate(lm_pairs(self.order, start)):
                    lines.append(f"{dom} {field_name} {l} {m} {float(arr[j, b])!r}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "DeformationCoeffs":
        entries, order, drop_d, nugget = [], None, 1.0, [1.0, 1.0]
        for lineno, raw in enumerate(text.splitlines(), 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            tok = line.split()
            try:
                if tok[0] == "order":
                    order = int(tok[1])
                elif tok[0] == "drop_d":
                    drop_d = float(tok[1])
                elif tok[0] == "nugget":
                    nugget[DOMAINS.index(tok[1])] = float(tok[2])
                else:
                    dom, name, l, m, val = tok
                    entries.append((DOMAINS.index(dom), name, int(l), int(m), float(val)))
            except (ValueError, IndexError) as exc:
                raise FormatError(f"line {lineno}: cannot parse {raw!r}") from exc
        if order is None:
            raise FormatError("coefficient file lacks an 'order' line")
        c = cls.zeros(order, drop_d=drop_d, nugget=nugget)
        arrays = {"alpha": np.array(c.alpha), "e1": np.array(c.e1), "e2": np.array(c.e2)}
        for j, name, l, m, val in entries:
            if name not in arrays:
                raise FormatError(f"unknown coefficient field {name!r}")
            start = 0 if name == "alpha" else 1
            pairs = lm_pairs(order, start)
            if (l, m) not in pairs:
                raise FormatError(f"({l}, {m}) is outside the order-{order} basis of {name}")
            arrays[name][j, pairs.index((l, m))] = val
        return c.replace(**arrays)

    def save(self, path) -> None:
        Path(path).write_text(self.to_text())

    @classmethod
    def load(cls, path) -> "DeformationCoeffs":
        return cls.from_text(Path(path).read_text())


@dataclass(frozen=True)
class CoeffLayout:
    """Reduced parameterisations used for the model variants.

    ``land_sea=True`` keeps separate land/sea coefficients, a free buffer
    drop and two nuggets (the full vector of :class:`DeformationCoeffs`).
    ``land_sea=False`` ties both domains to one expansion and one nugget and
    fixes ``d = 1``, so buffer cells behave like their neighbours.
    """

    order: int
    land_sea: bool = True

    @property
    def size(self) -> int:
        if self.land_sea:
            return DeformationCoeffs.size(self.order)
        return n_basis(self.order) + 2 * n_basis(self.order, start=1) + 1

    def names(self) -> list:
        if self.land_sea:
            return DeformationCoeffs.names(self.order)
        out = []
        for field_name, start in (("alpha", 0), ("e1", 1), ("e2", 1)):
            out += [f"{field_name}[{l},{m}]" for l, m in lm_pairs(self.order, start)]
        return out + ["tau2"]

    def expand(self, theta) -> DeformationCoeffs:
        theta = np.asarray(theta, dtype=float)
        if theta.shape != (self.size,):
            raise InputError(f"layout expects {self.size} parameters, got {theta.shape}")
        if self.land_sea:
            return DeformationCoeffs.from_theta(theta, self.order)
        nb0, nb1 = n_basis(self.order), n_basis(self.order, start=1)
        a = theta[:nb0]
        e1 = theta[nb0 : nb0 + nb1]
        e2 = theta[nb0 + nb1 : nb0 + 2 * nb1]
        tau2 = float(_exp_nugget(theta[-1]))
        return DeformationCoeffs(self.order, np.stack([a, a]), np.stack([e1, e1]),
                                 np.stack([e2, e2]), 1.0, [tau2, tau2])

    def prior_mode(self) -> np.ndarray:
        return np.zeros(self.size)


@dataclass(frozen=True)
class LocalMetric:
    """Range, vector field and 2x2 tensors at one point (east/north frame)."""

    rho: float
    v: np.ndarray
    Ginv: np.ndarray
    H: np.ndarray


def tensor_H(v) -> np.ndarray:
    """``H = (I + v v^T) / sqrt(1 + |v|^2)`` for v of shape (..., 2)."""
    v = np.asarray(v, dtype=float)
    outer = v[..., :, None] * v[..., None, :]
    scale = 1.0 / np.sqrt(1.0 + np.sum(v * v, axis=-1))
    return (np.eye(2) + outer) * scale[..., None, None]


def fields_at(coeffs: DeformationCoeffs, s, domain, in_buffer=None):
    """Vectorised ``rho`` and ``v`` at points ``s``.

    Parameters
    ----------
    s : (N, 3) unit vectors
    domain : (N,) governing domain code (SEA or LAND) of each point
    in_buffer : (N,) bool, optional
        Points in the buffer get ``rho`` multiplied by ``drop_d``.

    Returns
    -------
    rho : (N,) and v : (N, 2) in (east, north) components.
    """
    s = np.atleast_2d(np.asarray(s, dtype=float))
    domain = np.broadcast_to(np.asarray(domain), (len(s),))
    if np.any((domain != SEA) & (domain != LAND)):
        raise InputError("governing domain must be sea or land")
    log_rho = np.einsum("nb,nb->n", harmonic_matrix(coeffs.order, s), coeffs.alpha[domain])
    rho = np.exp(log_rho)
    if in_buffer is not None and np.any(in_buffer):
        if coeffs.drop_d <= 0.0:
            raise DegenerateMetricError("drop_d = 0 gives zero range in the buffer")
        rho = np.where(in_buffer, coeffs.drop_d * rho, rho)
    v = np.zeros((len(s), 2))
    if coeffs.order >= 1:
        g = gradient_matrix(coeffs.order, s)  # (N, nb, 2)
        rot = np.stack([-g[..., 1], g[..., 0]], axis=-1)  # r x grad Y
        v = np.einsum("nb,nbk->nk", coeffs.e1[domain], g) + np.einsum("nb,nbk->nk", coeffs.e2[domain], rot)
    return rho, v


def _nearest_nonbuffer_domain(mesh: SphereMesh, points) -> np.ndarray:
    return mesh.region[nearest_nonbuffer(mesh.centroids, mesh.region, points)].astype(np.int64)


def eval_metric(coeffs: DeformationCoeffs, mesh: SphereMesh | None, s, region: int) -> LocalMetric:
    """Local metric at a single point ``s`` given its region tag.

    For ``region == BUFFER`` the governing domain is the tag of the nearest
    non-buffer triangle centroid of ``mesh``.
    """
    s = np.asarray(s, dtype=float)
    if region == BUFFER:
        if mesh is None or mesh.region is None:
            raise InputError("buffer points need a tagged mesh to find their governing domain")
        domain = _nearest_nonbuffer_domain(mesh, s)[0]
    elif region in (SEA, LAND):
        domain = region
    else:
        raise InputError(f"unknown region code {region}")
    rho, v = fields_at(coeffs, s[None, :], np.array([domain]), np.array([region == BUFFER]))
    H = tensor_H(v[0])
    return LocalMetric(rho=float(rho[0]), v=v[0], Ginv=rho[0] ** 2 * H, H=H)


def edge_governance(mesh: SphereMesh):
    """Governing domain and buffer flag for each edge.

    Matching tags keep their region; any disagreement uses the buffer rule.
    The governing domain of a buffer edge is the non-buffer tag when exactly
    one side has one, the lower-index triangle's tag when both do, and the
    nearest non-buffer centroid to the midpoint when neither does (ties go
    to the lowest triangle index).
    """
    if mesh.region is None:
        raise InputError("mesh must be region-tagged")
    ri = mesh.region[mesh.edge_tris[:, 0]].astype(np.int64)
    rk = mesh.region[mesh.edge_tris[:, 1]].astype(np.int64)
    in_buffer = (ri != rk) | (ri == BUFFER)
    domain = np.where(ri != BUFFER, ri, rk)
    both = (ri == BUFFER) & (rk == BUFFER)
    if both.any():
        domain[both] = _nearest_nonbuffer_domain(mesh, mesh.edge_midpoints[both])
    return domain, in_buffer


class MeshBasis:
    """Harmonic bases of one mesh, evaluated once and reused across coefficients.

    Holds ``Y`` at the centroids, ``grad Y`` at centroids and edge midpoints,
    and the edge normals in the midpoint tangent frame.
    """

    def __init__(self, mesh: SphereMesh, order: int):
        if mesh.region is None:
            raise InputError("mesh must be region-tagged")
        self.order = order
        self.cell_domain = mesh.domain.astype(np.int64)
        self.cell_buffer = mesh.region == BUFFER
        self.edge_domain, self.edge_buffer = edge_governance(mesh)
        self.Y_cells = harmonic_matrix(order, mesh.centroids)
        self.grad_cells = gradient_matrix(order, mesh.centroids)
        self.grad_edges = gradient_matrix(order, mesh.edge_midpoints)
        east, north = tangent_basis(mesh.edge_midpoints)
        n = mesh.edge_normals
        self.edge_n2 = np.stack([np.sum(n * east, axis=1), np.sum(n * north, axis=1)], axis=1)

    def _check(self, coeffs):
        if coeffs.order != self.order:
            raise InputError(f"basis is order {self.order}, coefficients are order {coeffs.order}")

    def rho_cells(self, coeffs: DeformationCoeffs) -> np.ndarray:
        self._check(coeffs)
        with np.errstate(over="ignore"):
            rho = np.exp(np.einsum("nb,nb->n", self.Y_cells, coeffs.alpha[self.cell_domain]))
        if self.cell_buffer.any():
            if coeffs.drop_d <= 0.0:
                raise DegenerateMetricError("drop_d = 0 gives zero range in the buffer")
            rho = np.where(self.cell_buffer, coeffs.drop_d * rho, rho)
        return rho

    @staticmethod
    def _v(coeffs, grad, domain):
        if coeffs.order == 0:
            return np.zeros((len(domain), 2))
        rot = np.stack([-grad[..., 1], grad[..., 0]], axis=-1)
        return (np.einsum("nb,nbk->nk", coeffs.e1[domain], grad)
                + np.einsum("nb,nbk->nk", coeffs.e2[domain], rot))

    def v_cells(self, coeffs: DeformationCoeffs) -> np.ndarray:
        self._check(coeffs)
        return self._v(coeffs, self.grad_cells, self.cell_domain)

    def v_edges(self, coeffs: DeformationCoeffs) -> np.ndarray:
        self._check(coeffs)
        return self._v(coeffs, self.grad_edges, self.edge_domain)


_BASES: "weakref.WeakKeyDictionary[SphereMesh, dict]" = weakref.WeakKeyDictionary()


def mesh_basis(mesh: SphereMesh, order: int) -> MeshBasis:
    """Cached :class:`MeshBasis` for ``(mesh, order)``."""
    per_mesh = _BASES.setdefault(mesh, {})
    if order not in per_mesh:
        per_mesh[order] = MeshBasis(mesh, order)
    return per_mesh[order]


def cell_fields(coeffs: DeformationCoeffs, mesh: SphereMesh):
    """``rho`` and ``v`` at triangle centroids."""
    basis = mesh_basis(mesh, coeffs.order)
    return basis.rho_cells(coeffs), basis.v_cells(coeffs)


def edge_fields(coeffs: DeformationCoeffs, mesh: SphereMesh):
    """``v`` and the east/north components of the edge normal at the midpoints."""
    basis = mesh_basis(mesh, coeffs.order)
    return basis.v_edges(coeffs), basis.edge_n2
