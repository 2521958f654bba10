import json

import numpy as np
import pytest

from driftback import io
from driftback.errors import ConfigError, ParseError
from driftback.models import init_classifier


PTS = np.random.default_rng(0).standard_normal((17, 3)) * 1e3


@pytest.mark.parametrize("suffix", [".xyz", ".dpc"])
def test_cloud_round_trip_is_exact(tmp_path, suffix):
    path = tmp_path / f"c{suffix}"
    io.save_cloud(PTS, path)
    assert np.array_equal(io.load_cloud(path).points, PTS)


def test_dpc_layout(tmp_path):
    path = tmp_path / "c.dpc"
    io.save_cloud(PTS, path)
    raw = path.read_bytes()
    assert raw[:4] == b"DPC1" and int.from_bytes(raw[4:8], "little") == 17
    assert len(raw) == 8 + 17 * 24


def test_xyz_comments_and_errors(tmp_path):
    path = tmp_path / "c.xyz"
    path.write_text("# header\n1 2 3\n\n4 5 6\n")
    np.testing.assert_array_equal(io.load_cloud(path).points, [[1, 2, 3], [4, 5, 6]])
    path.write_text("1 2 3\n4 5\n")
    with pytest.raises(ParseError, match="line 2"):
        io.load_cloud(path)
    path.write_text("1 2 3\n4 5 6\n7 x 9\n")
    with pytest.raises(ParseError, match="line 3"):
        io.load_cloud(path)
    path.write_text("# nothing\n")
    with pytest.raises(ValueError):
        io.load_cloud(path)


def test_dpc_errors(tmp_path):
    path = tmp_path / "c.dpc"
    path.write_bytes(b"XXXX" + (1).to_bytes(4, "little") + bytes(24))
    with pytest.raises(ParseError, match="magic"):
        io.load_cloud(path)
    path.write_bytes(b"DPC1" + (2).to_bytes(4, "little") + bytes(24))
    with pytest.raises(ParseError, match="offset"):
        io.load_cloud(path)
    path.write_bytes(b"DPC1" + (0).to_bytes(4, "little"))
    with pytest.raises(ValueError):
        io.load_cloud(path)


def test_unknown_extension(tmp_path):
    with pytest.raises(ValueError):
        io.save_cloud(PTS, tmp_path / "c.ply")


def test_model_round_trip(tmp_path):
    model = init_classifier(np.random.default_rng(1), classes=3)
    path = tmp_path / "clf.dbt"
    io.save_model(model, path, extra={"note": 1})
    back, extra = io.load_model(path)
    assert extra == {"note": 1} and back.kind == model.kind and back.dims == model.dims
    for (na, a), (nb, b) in zip(model.arrays(), back.arrays()):
        assert na == nb and np.array_equal(a, b)
    with pytest.raises(ConfigError):
        io.load_model(tmp_path / "missing.dbt")


def test_manifest(tmp_path):
    ck = tmp_path / "w.dbt"
    ck.write_bytes(b"abc")
    m = io.RunManifest("adapt", ["adapt", "--x"], config={"t_w": 5}, seeds={"seed": 0})
    m.add_checkpoint(ck)
    m.outputs.append("b.json")
    out = m.write(tmp_path / "run")
    body = json.loads(out.read_text())
    assert body["command"] == "adapt" and body["config"] == {"t_w": 5}
    assert body["checkpoints"][str(ck)] == \
        "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"
    assert not [p for p in out.parent.iterdir() if p.name.startswith(".")]
