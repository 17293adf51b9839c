"""Binary artifact formats, trace records and manifests.

All binary files are little-endian and start with an 8-byte magic, a
uint32 format version and a length-prefixed JSON header. The header of
every artifact carries the hashes of the configuration that produced it.

Forward matrix (``BTFWDCOO``): header, then ``nnz`` int64 rows, ``nnz``
int64 columns and ``nnz`` float64 values of ``X = [X_usa | X_hyp | X_time]``.

Array (``BTARRAY1``): header, then ``length`` float64 values.

Trace (``BTTRACE1``): header, then framed records. A frame is a 4-byte tag,
a uint32 payload length, the payload and a uint32 CRC-32 of the payload.
Readers stop at the first truncated or corrupt frame, so an interrupted
run stays readable up to its last complete draw.
"""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.sparse as sp

from .forward import ForwardProblem

log = logging.getLogger(__name__)

FORMAT_VERSION = 1
FORWARD_MAGIC = b"BTFWDCOO"
ARRAY_MAGIC = b"BTARRAY1"
TRACE_MAGIC = b"BTTRACE1"
DRAW_TAG = b"DRAW"
MEAN_TAG = b"MEAN"
SCALAR_FIELDS = ("eta_usa", "phi", "psi", "eta_hyp", "eta_time", "loglik", "logpost")


class FormatError(OSError):
    """File does not follow the expected binary layout."""


def _write_header(fh, magic: bytes, header: dict) -> None:
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    fh.write(magic)
    fh.write(struct.pack("<II", FORMAT_VERSION, len(blob)))
    fh.write(blob)


def _read_header(fh, magic: bytes, path) -> dict:
    got = fh.read(8)
    if got != magic:
        raise FormatError(f"{path}: bad magic {got!r}, expected {magic!r}")
    raw = fh.read(8)
    if len(raw) != 8:
        raise FormatError(f"{path}: truncated header")
    version, n = struct.unpack("<II", raw)
    if version != FORMAT_VERSION:
        raise FormatError(f"{path}: unsupported format version {version}")
    blob = fh.read(n)
    if len(blob) != n:
        raise FormatError(f"{path}: truncated header")
    return json.loads(blob)


def _read_exact(fh, dtype: str, count: int, path) -> np.ndarray:
    dt = np.dtype(dtype)
    raw = fh.read(dt.itemsize * count)
    if len(raw) != dt.itemsize * count:
        raise FormatError(f"{path}: truncated data block")
    return np.frombuffer(raw, dtype=dt).copy()


# ---- forward matrix -----------------------------------------------------

def write_forward(path, problem: ForwardProblem, hashes: dict) -> None:
    coo = problem.X.tocoo()
    order = np.lexsort((coo.col, coo.row))
    header = {
        **hashes,
        "model": problem.model,
        "n_obs": problem.n_obs,
        "d_usa": problem.d_usa,
        "d_hyp": problem.d_hyp,
        "d_time": problem.d_time,
        "nnz": int(coo.nnz),
    }
    with open(path, "wb") as fh:
        _write_header(fh, FORWARD_MAGIC, header)
        fh.write(coo.row[order].astype("<i8").tobytes())
        fh.write(coo.col[order].astype("<i8").tobytes())
        fh.write(coo.data[order].astype("<f8").tobytes())


def read_forward(path) -> tuple[ForwardProblem, dict]:
    """Forward problem without data, plus the file header."""
    with open(path, "rb") as fh:
        h = _read_header(fh, FORWARD_MAGIC, path)
        nnz = h["nnz"]
        rows = _read_exact(fh, "<i8", nnz, path)
        cols = _read_exact(fh, "<i8", nnz, path)
        vals = _read_exact(fh, "<f8", nnz, path)
    n, u, hy, t = h["n_obs"], h["d_usa"], h["d_hyp"], h["d_time"]
    X = sp.csr_matrix((vals, (rows, cols)), shape=(n, u + hy + t))
    if h["model"] == "model1":
        return ForwardProblem(X[:, :u].tocsr()), h
    return ForwardProblem(X[:, :u].tocsr(), X[:, u:u + hy].tocsr(), X[:, u + hy:].tocsr(), model="model2"), h


# ---- plain arrays -------------------------------------------------------

def write_array(path, name: str, values, hashes: dict, **meta) -> None:
    v = np.asarray(values, dtype=float)
    with open(path, "wb") as fh:
        _write_header(fh, ARRAY_MAGIC, {**hashes, **meta, "name": name, "length": int(v.size)})
        fh.write(v.astype("<f8").tobytes())


def read_array(path) -> tuple[np.ndarray, dict]:
    with open(path, "rb") as fh:
        h = _read_header(fh, ARRAY_MAGIC, path)
        return _read_exact(fh, "<f8", h["length"], path), h


def write_vector_csv(path, columns: dict[str, np.ndarray]) -> None:
    names = list(columns)
    n = len(next(iter(columns.values())))
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["index", *names])
        for i in range(n):
            w.writerow([i, *(repr(float(columns[c][i])) for c in names)])


# ---- traces -------------------------------------------------------------

@dataclass
class TraceData:
    header: dict
    iteration: np.ndarray
    scalars: dict[str, np.ndarray]
    beta: np.ndarray  # (n_draws, len(nodes))
    nodes: np.ndarray
    beta_mean: np.ndarray | None = None  # full-length posterior mean from the closing record
    phi_mean: float | None = None
    complete: bool = False
    extra: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return self.iteration.size


class TraceWriter:
    """Streams stored draws to a framed binary trace.

    ``nodes`` selects the beta components written per draw (all by
    default). Each draw is flushed, so a crash loses at most one frame.
    """

    def __init__(self, path, header: dict, dim: int, nodes=None):
        self.path = Path(path)
        self.nodes = np.arange(dim) if nodes is None else np.asarray(nodes, dtype=np.int64)
        self.dim = dim
        self._fh = open(self.path, "wb")
        _write_header(self._fh, TRACE_MAGIC, {**header, "dim": dim, "nodes": self.nodes.tolist(),
                                              "scalars": list(SCALAR_FIELDS)})
        self._sum = np.zeros(dim)
        self._phi_sum = 0.0
        self._count = 0

    def _frame(self, tag: bytes, payload: bytes) -> None:
        self._fh.write(tag + struct.pack("<I", len(payload)) + payload + struct.pack("<I", zlib.crc32(payload)))
        self._fh.flush()

    def write_draw(self, iteration: int, scalars: dict, beta: np.ndarray) -> None:
        vals = np.array([np.nan if scalars.get(k) is None else scalars[k] for k in SCALAR_FIELDS], dtype="<f8")
        payload = struct.pack("<q", iteration) + vals.tobytes() + beta[self.nodes].astype("<f8").tobytes()
        self._frame(DRAW_TAG, payload)
        self._sum += beta
        self._phi_sum += scalars["phi"]
        self._count += 1

    def close(self, extra: dict | None = None) -> None:
        """Write the closing record (posterior means of beta and phi, run facts)."""
        if self._fh.closed:
            return
        if self._count:
            blob = json.dumps(extra or {}, sort_keys=True).encode()
            mean = np.concatenate([[self._phi_sum / self._count], self._sum / self._count]).astype("<f8")
            self._frame(MEAN_TAG, struct.pack("<I", len(blob)) + blob + mean.tobytes())
        self._fh.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self._fh.close()


def read_trace(path) -> TraceData:
    with open(path, "rb") as fh:
        h = _read_header(fh, TRACE_MAGIC, path)
        nodes = np.asarray(h["nodes"], dtype=np.int64)
        m, k = nodes.size, len(h["scalars"])
        draw_size = 8 + 8 * k + 8 * m
        iters, scal, betas = [], [], []
        beta_mean = phi_mean = None
        extra = {}
        complete = False
        while True:
            head = fh.read(8)
            if not head:
                break
            if len(head) < 8:
                log.warning("%s: truncated frame header; trace cut after %d draws", path, len(iters))
                break
            tag, n = head[:4], struct.unpack("<I", head[4:])[0]
            payload = fh.read(n)
            crc = fh.read(4)
            if len(payload) < n or len(crc) < 4 or struct.unpack("<I", crc)[0] != zlib.crc32(payload):
                log.warning("%s: incomplete or corrupt frame; trace cut after %d draws", path, len(iters))
                break
            if tag == DRAW_TAG:
                if n != draw_size:
                    raise FormatError(f"{path}: draw frame of {n} bytes, expected {draw_size}")
                iters.append(struct.unpack("<q", payload[:8])[0])
                scal.append(np.frombuffer(payload[8:8 + 8 * k], dtype="<f8"))
                betas.append(np.frombuffer(payload[8 + 8 * k:], dtype="<f8"))
            elif tag == MEAN_TAG:
                nb = struct.unpack("<I", payload[:4])[0]
                extra = json.loads(payload[4:4 + nb])
                vec = np.frombuffer(payload[4 + nb:], dtype="<f8")
                phi_mean, beta_mean = float(vec[0]), vec[1:].copy()
                complete = True
            else:
                raise FormatError(f"{path}: unknown frame tag {tag!r}")
    scal_arr = np.array(scal).reshape(-1, k)
    return TraceData(
        header=h,
        iteration=np.array(iters, dtype=np.int64),
        scalars={name: scal_arr[:, i].copy() for i, name in enumerate(h["scalars"])},
        beta=np.array(betas).reshape(-1, m),
        nodes=nodes,
        beta_mean=beta_mean,
        phi_mean=phi_mean,
        complete=complete,
        extra=extra,
    )


def trace_to_csv(trace: TraceData, path) -> None:
    """One row per draw: iteration, scalars, then beta_<node> columns."""
    names = list(trace.scalars)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["iteration", *names, *(f"beta_{j}" for j in trace.nodes)])
        for i in range(len(trace)):
            w.writerow([int(trace.iteration[i]), *(repr(float(trace.scalars[c][i])) for c in names),
                        *(repr(float(b)) for b in trace.beta[i])])


# ---- manifests ----------------------------------------------------------

def file_digest(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def write_json(path, obj) -> None:
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")


def read_json(path) -> dict:
    with open(path) as fh:
        return json.load(fh)
