import numpy as np
import pytest

from ubw import container
from ubw.errors import DigestError, FormatError


def _arrays():
    rng = np.random.default_rng(0)
    return {"w": rng.standard_normal(7), "y": np.arange(3, dtype=np.int64), "m": np.array([True, False])}


def test_round_trip_is_lossless(tmp_path):
    arrays = _arrays()
    digest = container.write(tmp_path / "a", "checkpoint", {"x": 1}, arrays)
    kind, header, back = container.read(tmp_path / "a", expect_kind="checkpoint")
    assert kind == "checkpoint" and header["x"] == 1 and header["digest"] == digest
    for k, v in arrays.items():
        assert back[k].dtype == v.dtype
        assert back[k].tobytes() == v.tobytes()


def test_writes_are_deterministic():
    a = container.dumps("dataset", {"b": 2, "a": 1}, _arrays())
    b = container.dumps("dataset", {"a": 1, "b": 2}, _arrays())
    assert a == b


def test_tampered_payload_fails_digest(tmp_path):
    container.write(tmp_path / "a", "dataset", {}, _arrays())
    blob = bytearray((tmp_path / "a").read_bytes())
    blob[-1] ^= 0xFF
    with pytest.raises(DigestError):
        container.loads(bytes(blob))
    container.loads(bytes(blob), verify=False)


def test_format_errors():
    with pytest.raises(FormatError, match="magic"):
        container.loads(b"XXXX\x00\x01")
    blob = container.dumps("dataset", {}, _arrays())
    with pytest.raises(FormatError, match="expected"):
        container.loads(blob, expect_kind="checkpoint")
    with pytest.raises(FormatError, match="truncated"):
        container.loads(blob[:-9], verify=False)


def test_unsupported_dtype():
    with pytest.raises(FormatError):
        container.dumps("dataset", {}, {"c": np.zeros(2, dtype=np.complex128)})
