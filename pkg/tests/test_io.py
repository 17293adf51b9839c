import struct

import numpy as np
import pytest
import scipy.sparse as sp

from bayestomo.forward import ForwardProblem
from bayestomo.io import (
    ARRAY_MAGIC,
    FormatError,
    TraceWriter,
    read_array,
    read_forward,
    read_trace,
    trace_to_csv,
    write_array,
    write_forward,
)

HASHES = {"config_hash": "c" * 64, "problem_hash": "p" * 64}


def _problem(model="model1"):
    rng = np.random.default_rng(0)
    X_usa = sp.random(7, 5, density=0.4, random_state=rng, format="csr")
    if model == "model1":
        return ForwardProblem(X_usa)
    X_hyp = sp.random(7, 6, density=0.3, random_state=rng, format="csr")
    X_time = sp.csr_matrix((np.ones(7), (np.arange(7), rng.integers(0, 2, 7))), shape=(7, 2))
    return ForwardProblem(X_usa, X_hyp, X_time, model="model2")


@pytest.mark.parametrize("model", ["model1", "model2"])
def test_forward_round_trip(tmp_path, model):
    fp = _problem(model)
    write_forward(tmp_path / "f.bin", fp, HASHES)
    back, header = read_forward(tmp_path / "f.bin")
    assert header["problem_hash"] == HASHES["problem_hash"]
    assert back.model == model and (back.d_usa, back.d_hyp, back.d_time) == (fp.d_usa, fp.d_hyp, fp.d_time)
    assert np.array_equal(back.X.toarray(), fp.X.toarray())


def test_forward_layout_is_little_endian_coo(tmp_path):
    fp = ForwardProblem(sp.csr_matrix(np.array([[0.0, 2.5], [1.0, 0.0]])))
    write_forward(tmp_path / "f.bin", fp, HASHES)
    raw = (tmp_path / "f.bin").read_bytes()
    assert raw[:8] == b"BTFWDCOO"
    version, n = struct.unpack("<II", raw[8:16])
    body = raw[16 + n:]
    rows = np.frombuffer(body[:16], "<i8")
    cols = np.frombuffer(body[16:32], "<i8")
    vals = np.frombuffer(body[32:], "<f8")
    assert version == 1
    assert rows.tolist() == [0, 1] and cols.tolist() == [1, 0] and vals.tolist() == [2.5, 1.0]


def test_array_round_trip_and_errors(tmp_path):
    write_array(tmp_path / "a.bin", "y", [1.0, -2.0], HASHES, kind="setup2")
    v, h = read_array(tmp_path / "a.bin")
    assert v.tolist() == [1.0, -2.0] and h["kind"] == "setup2" and h["name"] == "y"
    raw = (tmp_path / "a.bin").read_bytes()
    (tmp_path / "short.bin").write_bytes(raw[:-3])
    with pytest.raises(FormatError):
        read_array(tmp_path / "short.bin")
    (tmp_path / "magic.bin").write_bytes(b"XXXXXXXX" + raw[8:])
    with pytest.raises(FormatError, match="magic"):
        read_array(tmp_path / "magic.bin")
    (tmp_path / "ver.bin").write_bytes(ARRAY_MAGIC + struct.pack("<II", 99, 0))
    with pytest.raises(FormatError, match="version"):
        read_array(tmp_path / "ver.bin")


def _write_trace(path, n, dim=4, nodes=None, close=True):
    rng = np.random.default_rng(1)
    betas = rng.normal(size=(n, dim))
    phis = rng.uniform(1, 2, n)
    w = TraceWriter(path, dict(HASHES), dim, nodes)
    for i in range(n):
        w.write_draw(10 * (i + 1), {"eta_usa": 1.0, "phi": phis[i], "psi": 2.0, "eta_hyp": None,
                                    "eta_time": None, "loglik": -1.0, "logpost": -float(i)}, betas[i])
    if close:
        w.close({"psi_acceptance": 0.3})
    else:
        w.__exit__(None, None, None)
    return betas, phis


def test_trace_round_trip(tmp_path):
    betas, phis = _write_trace(tmp_path / "t.bin", 5)
    tr = read_trace(tmp_path / "t.bin")
    assert tr.complete and len(tr) == 5
    assert tr.iteration.tolist() == [10, 20, 30, 40, 50]
    assert np.array_equal(tr.beta, betas)
    assert np.array_equal(tr.scalars["phi"], phis)
    assert np.all(np.isnan(tr.scalars["eta_hyp"]))
    assert np.allclose(tr.beta_mean, betas.mean(axis=0)) and tr.phi_mean == pytest.approx(phis.mean())
    assert tr.extra == {"psi_acceptance": 0.3}
    assert tr.header["config_hash"] == HASHES["config_hash"]


def test_interrupted_trace_readable_to_last_complete_draw(tmp_path, caplog):
    betas, _ = _write_trace(tmp_path / "t.bin", 6, close=False)
    raw = (tmp_path / "t.bin").read_bytes()
    tr = read_trace(tmp_path / "t.bin")
    assert not tr.complete and len(tr) == 6
    frame = 4 + 4 + (8 + 7 * 8 + 4 * 8) + 4  # tag, length, payload, crc
    # cut inside the last frame, then inside the last frame header
    for cut in (len(raw) - 5, len(raw) - frame + 3):
        (tmp_path / "cut.bin").write_bytes(raw[:cut])
        tr = read_trace(tmp_path / "cut.bin")
        assert len(tr) == 5 and not tr.complete
        assert np.array_equal(tr.beta, betas[:5])
    assert "trace cut after 5 draws" in caplog.text


def test_corrupt_frame_stops_reading(tmp_path):
    _write_trace(tmp_path / "t.bin", 3)
    raw = bytearray((tmp_path / "t.bin").read_bytes())
    tr = read_trace(tmp_path / "t.bin")
    # flip a byte in the payload of the last frame (the closing record)
    raw[-10] ^= 0xFF
    (tmp_path / "bad.bin").write_bytes(bytes(raw))
    bad = read_trace(tmp_path / "bad.bin")
    assert len(bad) == len(tr) == 3 and not bad.complete


def test_subsampled_trace_keeps_full_means(tmp_path):
    betas, _ = _write_trace(tmp_path / "t.bin", 4, dim=6, nodes=[0, 3, 5])
    tr = read_trace(tmp_path / "t.bin")
    assert tr.nodes.tolist() == [0, 3, 5]
    assert np.array_equal(tr.beta, betas[:, [0, 3, 5]])
    assert tr.beta_mean.size == 6 and np.allclose(tr.beta_mean, betas.mean(axis=0))


def test_trace_csv_export(tmp_path):
    betas, _ = _write_trace(tmp_path / "t.bin", 2, dim=2)
    trace_to_csv(read_trace(tmp_path / "t.bin"), tmp_path / "t.csv")
    lines = (tmp_path / "t.csv").read_text().splitlines()
    assert lines[0] == "iteration,eta_usa,phi,psi,eta_hyp,eta_time,loglik,logpost,beta_0,beta_1"
    assert len(lines) == 3
    assert float(lines[1].split(",")[-1]) == betas[0, 1]
