import numpy as np
import pytest

from app.models.errors import ParseError
from app.models.geometry import PointCloud
from app.services.storage import CloudStore, atomic_write, encode_cloud, read_cloud, read_index, write_cloud

EXACT = np.array([[0.5, -1.25, 2.0], [0.0, 3.75, -0.125]])


@pytest.mark.parametrize("suffix", [".xyz", ".pcb"])
def test_write_then_read_preserves_exact_values(tmp_path, suffix):
    path = write_cloud(tmp_path / f"shape{suffix}", PointCloud(points=EXACT))
    loaded = read_cloud(path, class_label="box")
    assert np.array_equal(loaded.points, EXACT)
    assert loaded.source_id == "shape"
    assert loaded.class_label == "box"


def test_xyz_parse_error_reports_line(tmp_path):
    path = tmp_path / "bad.xyz"
    path.write_text("0 0 0\n1 2\n", encoding="utf-8")
    with pytest.raises(ParseError) as excinfo:
        read_cloud(path)
    assert excinfo.value.line == 2


def test_xyz_rejects_non_numeric_tokens(tmp_path):
    path = tmp_path / "bad.xyz"
    path.write_text("0 0 zero\n", encoding="utf-8")
    with pytest.raises(ParseError):
        read_cloud(path)


def test_pcb_truncation_reports_offset(tmp_path):
    data = encode_cloud(PointCloud(points=EXACT), "pcb")[:-4]
    path = tmp_path / "short.pcb"
    path.write_bytes(data)
    with pytest.raises(ParseError) as excinfo:
        read_cloud(path)
    assert excinfo.value.offset == len(data)


def test_pcb_rejects_bad_magic_and_trailing_bytes(tmp_path):
    data = encode_cloud(PointCloud(points=EXACT), "pcb")
    (tmp_path / "magic.pcb").write_bytes(b"XXXX" + data[4:])
    (tmp_path / "tail.pcb").write_bytes(data + b"\x00")
    for name in ("magic.pcb", "tail.pcb"):
        with pytest.raises(ParseError):
            read_cloud(tmp_path / name)


def test_unknown_suffix_and_missing_file(tmp_path):
    with pytest.raises(ParseError):
        read_cloud(tmp_path / "cloud.ply")
    with pytest.raises(ParseError):
        read_cloud(tmp_path / "missing.xyz")


def test_atomic_write_leaves_nothing_on_failure(tmp_path):
    target = tmp_path / "out.bin"
    with pytest.raises(RuntimeError):
        with atomic_write(target) as handle:
            handle.write(b"partial")
            raise RuntimeError("中断")
    assert not target.exists()
    assert list(tmp_path.iterdir()) == []


def test_cloud_store_keeps_class_labels_in_index(tmp_path):
    store = CloudStore(tmp_path / "store", "xyz")
    store.put_cloud(PointCloud(points=EXACT, class_label="torus", source_id="t0"), seed=7)
    index = store.flush_index()
    assert read_index(index) == [("t0.xyz", "torus", "7")]

    loaded = CloudStore(tmp_path / "store").load_all()
    path, cloud = loaded["t0"]
    assert path.name == "t0.xyz"
    assert cloud.class_label == "torus"


def test_cloud_store_requires_source_id(tmp_path):
    with pytest.raises(ParseError):
        CloudStore(tmp_path / "store").put_cloud(PointCloud(points=EXACT))
