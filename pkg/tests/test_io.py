import struct

import numpy as np
import pytest

from adaocc import io as aio
from adaocc.features import FeatureVolume
from adaocc.folding import FoldingDecoder
from adaocc.geometry import GridSpec, OrientedBox3, Pose, SceneBounds
from adaocc.occhead import OccHead
from adaocc.scene import SceneConfig, gen_scene
from adaocc.voxel import PointCloud, SemanticVoxelGrid

N = 50


def _spec(rng):
    dims = tuple(int(d) for d in rng.integers(1, 9, 3))
    return GridSpec(rng.uniform(-50, 50, 3), float(rng.choice([0.2, 0.4, 0.8, rng.uniform(0.01, 2)])), dims)


def test_occgrid_layout_by_hand():
    labels = np.zeros((2, 1, 1), dtype=np.uint8)
    labels[1, 0, 0] = 3
    g = SemanticVoxelGrid(GridSpec([1.0, 2.0, 3.0], 0.5, (2, 1, 1)), labels, 12)
    want = b"OCG1" + struct.pack("<3I", 2, 1, 1) + struct.pack("<4d", 1, 2, 3, 0.5) + struct.pack("<I", 12) + b"\x00\x03"
    assert aio.occgrid_bytes(g) == want


def test_occgrid_roundtrip(rng, tmp_path):
    for n in range(N):
        spec = _spec(rng)
        C = int(rng.integers(1, 256))
        g = SemanticVoxelGrid(spec, rng.integers(0, C + 1, spec.dims), C)
        p = tmp_path / f"g{n}.occgrid"
        aio.write_occgrid(p, g)
        back = aio.read_occgrid(p)
        assert back == g
        assert aio.occgrid_bytes(back) == p.read_bytes()


def test_featvol_roundtrip(rng, tmp_path):
    for n in range(N):
        spec = _spec(rng)
        C = int(rng.integers(1, 6))
        F = FeatureVolume(spec, rng.normal(size=spec.dims + (C,)) * 10)
        b1 = aio.featvol_bytes(F)
        p = tmp_path / f"f{n}.featvol"
        p.write_bytes(b1)
        back = aio.read_featvol(p)
        assert aio.featvol_bytes(back) == b1
        np.testing.assert_allclose(back.data, F.data.astype(np.float32), rtol=0)


def test_featvol_channel_innermost():
    spec = GridSpec([0, 0, 0], 1.0, (2, 1, 1))
    data = np.array([[[[1, 2]]], [[[3, 4]]]], dtype=float)
    body = aio.featvol_bytes(FeatureVolume(spec, data))[struct.calcsize("<4s4I3dd") :]
    np.testing.assert_array_equal(np.frombuffer(body, "<f4"), [1, 2, 3, 4])


def test_fold_roundtrip(rng, tmp_path):
    for n in range(N):
        C, h, K = int(rng.integers(1, 9)), int(rng.integers(1, 9)), int(rng.integers(1, 3000))
        dec = FoldingDecoder(hidden=h, n_points=K, seed=n).initialize(C)
        p = tmp_path / f"m{n}.fold"
        aio.write_fold(p, dec)
        back = aio.read_fold(p)
        assert aio.fold_bytes(back) == p.read_bytes()
        c = rng.normal(size=(1, C))
        np.testing.assert_array_equal(back.predict(c, n_points=9), dec.predict(c, n_points=9))


def test_occh_roundtrip(rng, tmp_path):
    for n in range(N):
        D, h, k = int(rng.integers(1, 9)), int(rng.integers(1, 9)), int(rng.integers(2, 14))
        head = OccHead(hidden=h, n_classes=k, dual_frame=bool(n % 2), seed=n).initialize(D)
        p = tmp_path / f"m{n}.occh"
        aio.write_occh(p, head)
        back = aio.read_occh(p)
        assert aio.occh_bytes(back) == p.read_bytes()
        assert back.dual_frame == head.dual_frame
        X = rng.normal(size=(3, D))
        np.testing.assert_array_equal(back.decision_function(X), head.decision_function(X))


def test_read_model_dispatch(tmp_path):
    aio.write_fold(tmp_path / "a", FoldingDecoder(hidden=2, n_points=4).initialize(3))
    aio.write_occh(tmp_path / "b", OccHead(hidden=2, n_classes=3).initialize(3))
    assert isinstance(aio.read_model(tmp_path / "a"), FoldingDecoder)
    assert isinstance(aio.read_model(tmp_path / "b"), OccHead)
    (tmp_path / "c").write_bytes(b"XXXX")
    with pytest.raises(aio.FormatError):
        aio.read_model(tmp_path / "c")


def test_ply_roundtrip(rng, tmp_path):
    for n in range(N):
        m = int(rng.integers(0, 200))
        cid = None if n % 3 == 0 else int(rng.integers(1, 13))
        cloud = PointCloud(rng.normal(size=(m, 3)) * 20, cid)
        p = tmp_path / f"c{n}.ply"
        aio.write_ply(p, cloud)
        back = aio.read_ply(p)
        assert back.class_id == cid and len(back) == m
        assert aio.ply_text(back) == p.read_text()
        np.testing.assert_array_equal(back.points, cloud.points.astype(np.float32))


def test_ply_header():
    text = aio.ply_text(PointCloud([[1, 2, 3]], 4))
    assert text.splitlines()[:4] == ["ply", "format ascii 1.0", "comment class_id 4", "element vertex 1"]


def test_scene_roundtrip(tmp_path):
    for n in range(N):
        cfg = SceneConfig(
            bounds=SceneBounds([-12.8, -12.8, -5.0], [12.8, 12.8, 3.0]), n_objects=n % 12, n_walls=n % 3
        )
        s = gen_scene(1000 + n, cfg)
        p = tmp_path / f"s{n}.json"
        aio.write_scene(p, s)
        back = aio.read_scene(p)
        assert back.to_json() == p.read_text()
        assert back == s or back.to_json() == s.to_json()


def test_boxes_json_roundtrip(rng):
    for _ in range(N):
        boxes = [
            OrientedBox3(Pose(rng.normal(size=3), rng.normal(size=4)), rng.uniform(0.1, 5, 3), int(rng.integers(1, 11)), float(rng.uniform()))
            for _ in range(int(rng.integers(0, 6)))
        ]
        text = aio.boxes_json(boxes)
        back = aio.boxes_from_json(text)
        assert aio.boxes_json(back) == text
        assert back == boxes


def test_loss_csv(tmp_path):
    aio.write_loss_csv(tmp_path / "l.csv", [1.5, 0.25], "mean_focal")
    assert (tmp_path / "l.csv").read_text() == "epoch,mean_focal\n0,1.5\n1,0.25\n"


@pytest.mark.parametrize(
    "reader,good",
    [
        (aio.occgrid_from_bytes, lambda: aio.occgrid_bytes(SemanticVoxelGrid.empty(GridSpec([0, 0, 0], 1, (2, 2, 2)), 1))),
        (aio.featvol_from_bytes, lambda: aio.featvol_bytes(FeatureVolume(GridSpec([0, 0, 0], 1, (1, 1, 1)), np.zeros((1, 1, 1, 2))))),
        (aio.fold_from_bytes, lambda: aio.fold_bytes(FoldingDecoder(hidden=2, n_points=4).initialize(2))),
        (aio.occh_from_bytes, lambda: aio.occh_bytes(OccHead(hidden=2, n_classes=2).initialize(2))),
    ],
)
def test_corrupt_files_rejected(reader, good):
    buf = good()
    with pytest.raises(aio.FormatError):
        reader(b"NOPE" + buf[4:])
    with pytest.raises(aio.FormatError):
        reader(buf[:-1])
    with pytest.raises(aio.FormatError):
        reader(buf + b"\x00")
