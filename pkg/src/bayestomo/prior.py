"""CAR / GMRF spatial prior: neighbourhoods, weights and the precision Q(psi).

Q(psi) has diagonal ``1 + |psi| * sum_j w(d_ij)`` and off-diagonal
``-psi * w(d_ij)`` for neighbouring nodes. It is assembled as
``I + psi * G`` (``psi >= 0``) where ``G`` is the weighted graph Laplacian,
so any Q(psi) shares one sparsity pattern.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from typing import Literal

import numpy as np

from .sparse import (
    SparseSymMatrix,
    SymbolicCholesky,
    amd_order,
    from_coo,
    selected_inverse_diagonal,
)

WeightKind = Literal["exponential", "reciprocal"]


@dataclass(frozen=True)
class NodeSet:
    coords: np.ndarray  # (n, 3) kilometres

    def __post_init__(self):
        coords = np.asarray(self.coords, dtype=float)
        if coords.ndim != 2 or coords.shape[1] != 3 or coords.shape[0] < 1:
            raise ValueError("coords must be an (n, 3) array with n >= 1")
        if not np.all(np.isfinite(coords)):
            raise ValueError("node coordinates must be finite")
        object.__setattr__(self, "coords", coords)

    @property
    def count(self) -> int:
        return self.coords.shape[0]

    @classmethod
    def from_csv(cls, path) -> "NodeSet":
        with open(path, newline="") as fh:
            reader = csv.DictReader(fh)
            if reader.fieldnames is None or [f.strip() for f in reader.fieldnames] != ["id", "x", "y", "z"]:
                raise ValueError(f"{path}: expected header 'id,x,y,z'")
            rows = sorted(reader, key=lambda r: int(r["id"]))
        return cls(np.array([[float(r["x"]), float(r["y"]), float(r["z"])] for r in rows]))

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["id", "x", "y", "z"])
            for i, (x, y, z) in enumerate(self.coords):
                w.writerow([i, repr(float(x)), repr(float(y)), repr(float(z))])


def rotation_matrix(angles_deg=(0.0, 0.0, 0.0)) -> np.ndarray:
    """R = R_x R_y R_z for Euler angles (degrees) about x, y and z."""
    ax, ay, az = np.radians(angles_deg)
    cx, sx = np.cos(ax), np.sin(ax)
    cy, sy = np.cos(ay), np.sin(ay)
    cz, sz = np.cos(az), np.sin(az)
    rx = np.array([[1, 0, 0], [0, cx, -sx], [0, sx, cx]])
    ry = np.array([[cy, 0, sy], [0, 1, 0], [-sy, 0, cy]])
    rz = np.array([[cz, -sz, 0], [sz, cz, 0], [0, 0, 1]])
    return rx @ ry @ rz


@dataclass(frozen=True)
class NeighborhoodSpec:
    dx: float
    dy: float
    dz: float
    weight_kind: WeightKind = "reciprocal"
    rotation: np.ndarray = None  # type: ignore[assignment]

    def __post_init__(self):
        if min(self.dx, self.dy, self.dz) <= 0:
            raise ValueError("semi-axes must be positive")
        if self.weight_kind not in ("exponential", "reciprocal"):
            raise ValueError(f"unknown weight kind {self.weight_kind!r}")
        rot = np.eye(3) if self.rotation is None else np.asarray(self.rotation, dtype=float)
        if rot.shape != (3, 3) or not np.allclose(rot @ rot.T, np.eye(3), atol=1e-12, rtol=0):
            raise ValueError("rotation must be a 3x3 orthogonal matrix")
        object.__setattr__(self, "rotation", rot)

    @classmethod
    def spherical(cls, radius: float, weight_kind: WeightKind = "reciprocal") -> "NeighborhoodSpec":
        return cls(radius, radius, radius, weight_kind)

    @classmethod
    def ellipsoidal(cls, dx, dy, dz, weight_kind: WeightKind = "reciprocal", angles_deg=(0.0, 0.0, 0.0)):
        return cls(dx, dy, dz, weight_kind, rotation_matrix(angles_deg))

    @property
    def max_axis(self) -> float:
        return max(self.dx, self.dy, self.dz)


def weight(d, spec: NeighborhoodSpec):
    """Neighbour weight for distance ``d`` (0 < d <= D, D the largest semi-axis)."""
    d_arr = np.asarray(d, dtype=float)
    D = spec.max_axis
    if np.any(d_arr <= 0) or np.any(d_arr > D):
        raise ValueError(f"weight distance must lie in (0, {D}]")
    if spec.weight_kind == "exponential":
        w = np.exp(-3.0 * d_arr**2 / D**2)
    else:
        w = D / d_arr - 1.0
    return float(w) if np.ndim(d) == 0 else w


@dataclass(frozen=True)
class NeighborGraph:
    """Undirected weighted graph; each edge is stored once with i > j."""

    n: int
    rows: np.ndarray
    cols: np.ndarray
    distances: np.ndarray
    weights: np.ndarray

    def neighbors(self, i: int) -> np.ndarray:
        return np.sort(np.concatenate([self.cols[self.rows == i], self.rows[self.cols == i]]))

    def weight_sums(self) -> np.ndarray:
        return np.bincount(self.rows, self.weights, self.n) + np.bincount(self.cols, self.weights, self.n)

    def neighbor_counts(self) -> np.ndarray:
        return np.bincount(self.rows, minlength=self.n) + np.bincount(self.cols, minlength=self.n)

    @classmethod
    def from_edges(cls, n: int, edges, weights) -> "NeighborGraph":
        """Graph with explicit weights (distances set to 1); handy for small tests."""
        e = np.asarray(edges, dtype=np.int64).reshape(-1, 2)
        w = np.broadcast_to(np.asarray(weights, dtype=float), (e.shape[0],)).copy()
        if np.any(e[:, 0] == e[:, 1]) or np.any(w <= 0):
            raise ValueError("self-loops and non-positive weights are not allowed")
        hi, lo = np.maximum(e[:, 0], e[:, 1]), np.minimum(e[:, 0], e[:, 1])
        if len(set(zip(hi.tolist(), lo.tolist()))) != len(hi):
            raise ValueError("duplicate edge")
        return cls(n, hi, lo, np.ones(len(hi)), w)


def build_neighbor_graph(nodes: NodeSet, spec: NeighborhoodSpec) -> NeighborGraph:
    """Node j neighbours node i iff the rotated offset lies inside the ellipsoid.

    Pairs whose weight is exactly zero (reciprocal weight at d = D) carry no
    coupling and are omitted.
    """
    coords = nodes.coords
    n = nodes.count
    axes = np.array([spec.dx, spec.dy, spec.dz])
    rows, cols, dists = [], [], []
    for i in range(1, n):
        off = coords[i] - coords[:i]
        rotated = off @ spec.rotation.T
        inside = np.sum((rotated / axes) ** 2, axis=1) <= 1.0
        j = np.nonzero(inside)[0]
        if j.size == 0:
            continue
        d = np.sqrt(np.sum(off[j] ** 2, axis=1))
        if np.any(d == 0):
            raise ValueError(f"duplicate node positions at nodes {i} and {int(j[np.argmin(d)])}")
        rows.append(np.full(j.size, i))
        cols.append(j)
        dists.append(d)
    if rows:
        r = np.concatenate(rows)
        c = np.concatenate(cols)
        d = np.concatenate(dists)
    else:
        r = c = np.empty(0, dtype=np.int64)
        d = np.empty(0)
    w = weight(d, spec) if d.size else np.empty(0)
    keep = w > 0
    return NeighborGraph(n, r[keep].astype(np.int64), c[keep].astype(np.int64), d[keep], np.asarray(w)[keep])


def assemble_Q(graph: NeighborGraph, psi: float) -> SparseSymMatrix:
    n = graph.n
    diag = 1.0 + abs(psi) * graph.weight_sums()
    rows = np.concatenate([np.arange(n), graph.rows])
    cols = np.concatenate([np.arange(n), graph.cols])
    vals = np.concatenate([diag, -psi * graph.weights])
    return from_coo(n, rows, cols, vals)


class PrecisionModel:
    """Q(psi) on a fixed graph, with pattern analysis shared across psi values."""

    def __init__(self, graph: NeighborGraph):
        self.graph = graph
        self.n = graph.n
        # Explicit diagonal plus edges: both components share one pattern.
        identity_part = assemble_Q(graph, 0.0)
        laplacian = assemble_Q(graph, 1.0)
        self._eye = identity_part.data
        self._lap = laplacian.data - identity_part.data
        self.pattern = laplacian
        self._symbolic: SymbolicCholesky | None = None

    @property
    def symbolic(self) -> SymbolicCholesky:
        if self._symbolic is None:
            self._symbolic = SymbolicCholesky(self.pattern, amd_order(self.pattern))
        return self._symbolic

    def laplacian_data(self) -> np.ndarray:
        """Values of G = Q(1) - I aligned with :attr:`pattern`."""
        return self._lap

    def Q(self, psi: float) -> SparseSymMatrix:
        if psi >= 0:
            return self.pattern.with_data(self._eye + psi * self._lap)
        return assemble_Q(self.graph, psi)

    def factor(self, psi: float):
        return self.symbolic.factor(self.Q(psi))

    def log_det(self, psi: float) -> float:
        if psi == 0:
            return 0.0
        F = self.factor(psi)
        return 2.0 * float(np.sum(np.log(F.diag())))

    def quad_form(self, v: np.ndarray, psi: float) -> float:
        """v' Q(psi) v."""
        return self.Q(psi).quad_form(v)


def prior_variance_profile(graph: NeighborGraph, psi: float) -> np.ndarray:
    """diag(Q(psi)^-1), one triangular solve per node."""
    return selected_inverse_diagonal(PrecisionModel(graph).factor(psi))


def identity_graph(n: int) -> NeighborGraph:
    empty = np.empty(0, dtype=np.int64)
    return NeighborGraph(n, empty, empty, np.empty(0), np.empty(0))


# Prior structures (0)-(4): independent, then spherical/ellipsoidal with
# reciprocal/exponential weights. Semi-axes in km.
SPHERICAL_RADIUS = 150.0
ELLIPSOID_AXES = (300.0, 300.0, 150.0)


def structure_spec(structure: int, spherical_radius: float = SPHERICAL_RADIUS,
                   ellipsoid_axes=ELLIPSOID_AXES, angles_deg=(0.0, 0.0, 0.0)) -> NeighborhoodSpec | None:
    """NeighborhoodSpec for prior structure 0-4 (None for the independent model)."""
    if structure == 0:
        return None
    kinds = {1: ("sph", "reciprocal"), 2: ("ell", "reciprocal"), 3: ("sph", "exponential"), 4: ("ell", "exponential")}
    if structure not in kinds:
        raise ValueError(f"prior structure must be 0-4, got {structure}")
    shape, kind = kinds[structure]
    if shape == "sph":
        return NeighborhoodSpec.spherical(spherical_radius, kind)
    return NeighborhoodSpec.ellipsoidal(*ellipsoid_axes, weight_kind=kind, angles_deg=angles_deg)


def structure_graph(nodes: NodeSet, structure: int, **kwargs) -> NeighborGraph:
    spec = structure_spec(structure, **kwargs)
    if spec is None:
        return identity_graph(nodes.count)
    return build_neighbor_graph(nodes, spec)

