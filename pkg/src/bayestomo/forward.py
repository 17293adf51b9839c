"""Straight-ray travel-time forward model on a regular voxel grid.

Coordinates are kilometres with ``z`` as depth (positive downward, surface
at ``z = 0``). Each row of the velocity block holds the chord length of a
source-receiver ray inside every voxel it crosses.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Literal

import numpy as np
import scipy.sparse as sp

from .prior import NodeSet, PrecisionModel
from .sparse import sample_from_factor

DEFAULT_REFERENCE_VELOCITY = 10.0  # km/s


@dataclass(frozen=True)
class VoxelGrid:
    shape: tuple[int, int, int]
    cell_size: tuple[float, float, float] = (100.0, 100.0, 100.0)
    origin: tuple[float, float, float] = (0.0, 0.0, 0.0)

    def __post_init__(self):
        if len(self.shape) != 3 or min(self.shape) < 1:
            raise ValueError("grid needs three cell counts >= 1")
        if len(self.cell_size) != 3 or min(self.cell_size) <= 0:
            raise ValueError("cell sizes must be positive")
        object.__setattr__(self, "shape", tuple(int(s) for s in self.shape))
        object.__setattr__(self, "cell_size", tuple(float(c) for c in self.cell_size))
        object.__setattr__(self, "origin", tuple(float(o) for o in self.origin))

    @property
    def n_cells(self) -> int:
        nx, ny, nz = self.shape
        return nx * ny * nz

    @property
    def extent(self) -> np.ndarray:
        return np.asarray(self.origin) + np.asarray(self.shape) * np.asarray(self.cell_size)

    def cell_index(self, ix, iy, iz):
        nx, ny, nz = self.shape
        return (np.asarray(ix) * ny + np.asarray(iy)) * nz + np.asarray(iz)

    def cell_centers(self) -> np.ndarray:
        nx, ny, nz = self.shape
        ix, iy, iz = np.meshgrid(np.arange(nx), np.arange(ny), np.arange(nz), indexing="ij")
        idx = np.stack([ix.ravel(), iy.ravel(), iz.ravel()], axis=1)
        return np.asarray(self.origin) + (idx + 0.5) * np.asarray(self.cell_size)

    def nodes(self) -> NodeSet:
        return NodeSet(self.cell_centers())


def trace_ray(grid: VoxelGrid, source, receiver) -> tuple[np.ndarray, np.ndarray]:
    """Chord length of the segment source->receiver in every cell it crosses.

    Returns ``(cell_indices, lengths)`` sorted by cell index. Parts of the
    segment outside the grid contribute nothing; crossings of zero length
    (grazing an edge or corner) are dropped.
    """
    s = np.asarray(source, dtype=float)
    r = np.asarray(receiver, dtype=float)
    delta = r - s
    length = float(np.linalg.norm(delta))
    if length == 0.0:
        raise ValueError("degenerate ray: source and receiver coincide")
    lo = np.asarray(grid.origin)
    hi = grid.extent
    h = np.asarray(grid.cell_size)

    # clip the parameter range [0, 1] to the grid box
    t0, t1 = 0.0, 1.0
    for a in range(3):
        if delta[a] == 0.0:
            if s[a] < lo[a] or s[a] > hi[a]:
                return np.empty(0, dtype=np.int64), np.empty(0)
            continue
        ta = (lo[a] - s[a]) / delta[a]
        tb = (hi[a] - s[a]) / delta[a]
        t0 = max(t0, min(ta, tb))
        t1 = min(t1, max(ta, tb))
    if t1 <= t0:
        return np.empty(0, dtype=np.int64), np.empty(0)

    # parameters of every grid-plane crossing inside (t0, t1)
    ts = [np.array([t0, t1])]
    for a in range(3):
        if delta[a] == 0.0:
            continue
        planes = lo[a] + h[a] * np.arange(grid.shape[a] + 1)
        tp = (planes - s[a]) / delta[a]
        ts.append(tp[(tp > t0) & (tp < t1)])
    t = np.unique(np.concatenate(ts))
    seg = np.diff(t) * length
    mid = 0.5 * (t[:-1] + t[1:])
    keep = seg > 0.0
    seg, mid = seg[keep], mid[keep]
    points = s[None, :] + mid[:, None] * delta[None, :]
    ijk = np.floor((points - lo) / h).astype(np.int64)
    ijk = np.clip(ijk, 0, np.asarray(grid.shape) - 1)
    cells = grid.cell_index(ijk[:, 0], ijk[:, 1], ijk[:, 2])
    uniq, inv = np.unique(cells, return_inverse=True)
    return uniq.astype(np.int64), np.bincount(inv, weights=seg)


def hypocenter_derivative(source, receiver, v0: float = DEFAULT_REFERENCE_VELOCITY) -> np.ndarray:
    """d(travel time)/d(source position): minus the unit ray direction over ``v0``.

    Shifting the source along the ray towards the receiver shortens the path.
    """
    d = np.asarray(receiver, dtype=float) - np.asarray(source, dtype=float)
    return -d / np.linalg.norm(d) / v0


@dataclass(frozen=True)
class EventStationGeometry:
    events: np.ndarray  # (n_events, 3), z is depth > 0
    stations: np.ndarray  # (n_stations, 2), on the surface z = 0
    paths: np.ndarray  # (n_paths, 2) of (event, station)

    def __post_init__(self):
        ev = np.asarray(self.events, dtype=float).reshape(-1, 3)
        st = np.asarray(self.stations, dtype=float).reshape(-1, 2)
        pa = np.asarray(self.paths, dtype=np.int64).reshape(-1, 2)
        if np.any(ev[:, 2] <= 0):
            raise ValueError("events must lie below the surface (z > 0)")
        if pa.size and (pa[:, 0].min() < 0 or pa[:, 0].max() >= len(ev) or pa[:, 1].min() < 0 or pa[:, 1].max() >= len(st)):
            raise ValueError("path references an unknown event or station")
        object.__setattr__(self, "events", ev)
        object.__setattr__(self, "stations", st)
        object.__setattr__(self, "paths", pa)

    @property
    def n_events(self) -> int:
        return self.events.shape[0]

    def receiver(self, station: int) -> np.ndarray:
        x, y = self.stations[station]
        return np.array([x, y, 0.0])

    def to_csv(self, directory) -> None:
        d = Path(directory)
        with open(d / "events.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["id", "x", "y", "z"])
            for i, p in enumerate(self.events):
                w.writerow([i, *(repr(float(v)) for v in p)])
        with open(d / "stations.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["id", "x", "y"])
            for i, p in enumerate(self.stations):
                w.writerow([i, *(repr(float(v)) for v in p)])
        with open(d / "paths.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["event_id", "station_id"])
            for e, s in self.paths:
                w.writerow([int(e), int(s)])

    @classmethod
    def from_csv(cls, events_path, stations_path, paths_path) -> "EventStationGeometry":
        ev = _read_table(events_path, ["id", "x", "y", "z"])
        st = _read_table(stations_path, ["id", "x", "y"])
        pa = _read_table(paths_path, ["event_id", "station_id"])
        ev_ids = {int(r[0]): k for k, r in enumerate(ev)}
        st_ids = {int(r[0]): k for k, r in enumerate(st)}
        try:
            paths = [(ev_ids[int(e)], st_ids[int(s)]) for e, s in pa]
        except KeyError as exc:
            raise ValueError(f"{paths_path}: unknown id {exc.args[0]}") from None
        return cls(
            np.array([r[1:] for r in ev], dtype=float).reshape(-1, 3),
            np.array([r[1:] for r in st], dtype=float).reshape(-1, 2),
            np.array(paths, dtype=np.int64).reshape(-1, 2),
        )


def _read_table(path, header: list[str]) -> list[list[float]]:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        got = [h.strip() for h in next(reader, [])]
        if got != header:
            raise ValueError(f"{path}: expected header {','.join(header)}, got {','.join(got)}")
        return [[float(v) for v in row] for row in reader if row]


def random_geometry(grid: VoxelGrid, n_events: int, n_stations: int, n_paths: int | None,
                    rng: np.random.Generator) -> EventStationGeometry:
    """Stations uniform on the top face; events on the two x-faces.

    Placing events on opposite side walls gives obliquely incident rays from
    two directions, a crude stand-in for teleseismic arrivals. Without
    ``n_paths`` every event-station pair is used, otherwise a random subset.
    """
    lo = np.asarray(grid.origin)
    hi = grid.extent
    stations = np.column_stack([rng.uniform(lo[0], hi[0], n_stations), rng.uniform(lo[1], hi[1], n_stations)])
    side = rng.integers(0, 2, n_events)
    ex = np.where(side == 0, lo[0], hi[0])
    ey = rng.uniform(lo[1], hi[1], n_events)
    # keep sources off the surface plane and strictly inside the depth range
    ez = rng.uniform(lo[2] + 0.5 * (hi[2] - lo[2]), hi[2], n_events)
    events = np.column_stack([ex, ey, ez])
    pairs = np.array([(e, s) for e in range(n_events) for s in range(n_stations)], dtype=np.int64)
    if n_paths is not None and n_paths < len(pairs):
        pick = np.sort(rng.choice(len(pairs), size=n_paths, replace=False))
        pairs = pairs[pick]
    return EventStationGeometry(events, stations, pairs)


@dataclass(frozen=True)
class ForwardProblem:
    """Design blocks ``X = [X_usa | X_hyp | X_time]`` and data ``y``."""

    X_usa: sp.csr_matrix
    X_hyp: sp.csr_matrix | None = None
    X_time: sp.csr_matrix | None = None
    y: np.ndarray | None = None
    model: Literal["model1", "model2"] = "model1"
    _X: sp.csr_matrix | None = field(default=None, repr=False, compare=False)

    @property
    def n_obs(self) -> int:
        return self.X_usa.shape[0]

    @property
    def d_usa(self) -> int:
        return self.X_usa.shape[1]

    @property
    def d_hyp(self) -> int:
        return 0 if self.X_hyp is None else self.X_hyp.shape[1]

    @property
    def d_time(self) -> int:
        return 0 if self.X_time is None else self.X_time.shape[1]

    @property
    def dim(self) -> int:
        return self.d_usa + self.d_hyp + self.d_time

    @property
    def X(self) -> sp.csr_matrix:
        if self._X is None:
            blocks = [b for b in (self.X_usa, self.X_hyp, self.X_time) if b is not None]
            object.__setattr__(self, "_X", sp.hstack(blocks, format="csr"))
        return self._X

    def with_data(self, y) -> "ForwardProblem":
        y = np.asarray(y, dtype=float)
        if y.shape != (self.n_obs,):
            raise ValueError(f"expected {self.n_obs} observations, got {y.shape}")
        return ForwardProblem(self.X_usa, self.X_hyp, self.X_time, y, self.model)


def assemble_forward(grid: VoxelGrid, geometry: EventStationGeometry, model: str = "model1",
                     v0: float = DEFAULT_REFERENCE_VELOCITY) -> ForwardProblem:
    if model not in ("model1", "model2"):
        raise ValueError(f"unknown model {model!r}")
    rows, cols, vals = [], [], []
    hyp_rows, hyp_cols, hyp_vals = [], [], []
    for k, (e, s) in enumerate(geometry.paths):
        src = geometry.events[e]
        rec = geometry.receiver(s)
        cells, lengths = trace_ray(grid, src, rec)
        if cells.size == 0:
            raise ValueError(f"path {k} (event {e}, station {s}) does not intersect the grid")
        rows.append(np.full(cells.size, k))
        cols.append(cells)
        vals.append(lengths)
        if model == "model2":
            hyp_rows.extend([k] * 3)
            hyp_cols.extend(3 * int(e) + np.arange(3))
            hyp_vals.extend(hypocenter_derivative(src, rec, v0))
    n = len(geometry.paths)
    if rows:
        r, c, v = np.concatenate(rows), np.concatenate(cols), np.concatenate(vals)
    else:
        r = c = np.empty(0, dtype=np.int64)
        v = np.empty(0)
    X_usa = sp.csr_matrix((v, (r, c)), shape=(n, grid.n_cells))
    if model == "model1":
        return ForwardProblem(X_usa)
    ne = geometry.n_events
    X_hyp = sp.csr_matrix((hyp_vals, (hyp_rows, hyp_cols)), shape=(n, 3 * ne))
    X_time = sp.csr_matrix((np.ones(n), (np.arange(n), geometry.paths[:, 0])), shape=(n, ne))
    return ForwardProblem(X_usa, X_hyp, X_time, model="model2")


@dataclass(frozen=True)
class NoiseSpec:
    kind: Literal["gaussian", "student_t", "none"] = "gaussian"
    precision: float = 0.4
    dof: float = 3.0
    seed: int = 0

    def __post_init__(self):
        if self.kind not in ("gaussian", "student_t", "none"):
            raise ValueError(f"unknown noise kind {self.kind!r}")
        if self.kind == "gaussian" and not self.precision > 0:
            raise ValueError("noise precision must be positive")
        if self.kind == "student_t" and not self.dof > 2:
            raise ValueError("Student-t noise needs more than 2 degrees of freedom")

    @property
    def variance(self) -> float:
        if self.kind == "gaussian":
            return 1.0 / self.precision
        if self.kind == "student_t":
            return self.dof / (self.dof - 2.0)
        return 0.0


def synthesize_data(X, beta_true, noise: NoiseSpec) -> np.ndarray:
    """``y = X beta_true + eps`` with i.i.d. Gaussian or unit-scale Student-t noise.

    Both kinds start from the same standard normal vector ``z`` for a given
    seed (t noise is ``z / sqrt(chi2_nu / nu)``), so Gaussian and t data sets
    generated with one seed are paired draws.
    """
    beta_true = np.asarray(beta_true, dtype=float)
    if X.shape[1] != beta_true.size:
        raise ValueError("beta_true length does not match X")
    y = np.asarray(X @ beta_true, dtype=float)
    if noise.kind == "none":
        return y
    rng = np.random.default_rng(noise.seed)
    z = rng.standard_normal(y.size)
    if noise.kind == "gaussian":
        return y + z / np.sqrt(noise.precision)
    w = rng.chisquare(noise.dof, y.size) / noise.dof
    return y + z / np.sqrt(w)


def draw_beta_true(precision_model: PrecisionModel, eta: float, psi: float, center,
                   rng: np.random.Generator) -> np.ndarray:
    """One exact draw from N(center, (1/eta) Q(psi)^-1)."""
    center = np.asarray(center, dtype=float)
    Q = precision_model.Q(psi)
    omega = Q.with_data(eta * Q.data)
    F = precision_model.symbolic.factor(omega)
    return sample_from_factor(F, omega.matvec(center), rng)
