"""Readers and writers for every on-disk artifact.

Binary layouts are little-endian:

* OCCGRID v1: ``b"OCG1"``, u32 nx ny nz, f64 origin[3], f64 voxel_size,
  u32 class_count, then ``nx*ny*nz`` u8 labels, x fastest.
* FEATVOL v1: ``b"FVL1"``, u32 nx ny nz C, f64 origin[3], f64 voxel_size,
  then f32 data, x fastest with channels innermost.
* FOLD v1: ``b"FLD1"``, u32 C_vox hidden K_train, then f64 weights
  (row-major, ``(fan_in, fan_out)``) and biases for the three stage-1
  layers followed by the three stage-2 layers, weight before bias.
* OCCH v1: ``b"OCH1"``, u32 n_features hidden n_classes dual_frame, then the
  two layers as in FOLD v1.

Point clouds are ASCII PLY with float32 vertices and a ``comment class_id``
line; scenes and boxes are JSON.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .features import FeatureVolume
from .folding import FoldingDecoder
from .geometry import GridSpec, OrientedBox3
from .occhead import OccHead
from .scene import SceneSpec
from .voxel import PointCloud, SemanticVoxelGrid

__all__ = [
    "FormatError",
    "occgrid_bytes",
    "occgrid_from_bytes",
    "write_occgrid",
    "read_occgrid",
    "featvol_bytes",
    "featvol_from_bytes",
    "write_featvol",
    "read_featvol",
    "fold_bytes",
    "fold_from_bytes",
    "write_fold",
    "read_fold",
    "occh_bytes",
    "occh_from_bytes",
    "write_occh",
    "read_occh",
    "ply_text",
    "ply_from_text",
    "write_ply",
    "read_ply",
    "write_scene",
    "read_scene",
    "boxes_json",
    "boxes_from_json",
    "write_loss_csv",
    "read_model",
]


class FormatError(ValueError):
    pass


def _check_magic(buf, magic):
    if bytes(buf[:4]) != magic:
        raise FormatError(f"bad magic: expected {magic!r}, got {bytes(buf[:4])!r}")


# OCCGRID ------------------------------------------------------------------

_OCG_HEAD = struct.Struct("<4s3I3ddI")


def occgrid_bytes(grid: SemanticVoxelGrid) -> bytes:
    s = grid.spec
    head = _OCG_HEAD.pack(b"OCG1", *s.dims, *s.origin, s.voxel_size, grid.class_count)
    return head + grid.flat_labels().astype("<u1").tobytes()


def occgrid_from_bytes(buf: bytes) -> SemanticVoxelGrid:
    _check_magic(buf, b"OCG1")
    if len(buf) < _OCG_HEAD.size:
        raise FormatError("truncated OCCGRID header")
    _, nx, ny, nz, ox, oy, oz, vs, C = _OCG_HEAD.unpack_from(buf)
    n = nx * ny * nz
    body = buf[_OCG_HEAD.size :]
    if len(body) != n:
        raise FormatError(f"OCCGRID body has {len(body)} bytes, expected {n}")
    labels = np.frombuffer(body, dtype="<u1")
    return SemanticVoxelGrid(GridSpec((ox, oy, oz), vs, (nx, ny, nz)), labels, C)


def write_occgrid(path, grid):
    Path(path).write_bytes(occgrid_bytes(grid))


def read_occgrid(path) -> SemanticVoxelGrid:
    return occgrid_from_bytes(Path(path).read_bytes())


# FEATVOL ------------------------------------------------------------------

_FVL_HEAD = struct.Struct("<4s4I3dd")


def featvol_bytes(F: FeatureVolume) -> bytes:
    s = F.spec
    head = _FVL_HEAD.pack(b"FVL1", *s.dims, F.channels, *s.origin, s.voxel_size)
    # x fastest, channel innermost: axis order (k, j, i, c)
    data = np.ascontiguousarray(F.data.transpose(2, 1, 0, 3)).astype("<f4")
    return head + data.tobytes()


def featvol_from_bytes(buf: bytes) -> FeatureVolume:
    _check_magic(buf, b"FVL1")
    if len(buf) < _FVL_HEAD.size:
        raise FormatError("truncated FEATVOL header")
    _, nx, ny, nz, C, ox, oy, oz, vs = _FVL_HEAD.unpack_from(buf)
    body = buf[_FVL_HEAD.size :]
    if len(body) != nx * ny * nz * C * 4:
        raise FormatError("FEATVOL body size does not match header")
    data = np.frombuffer(body, dtype="<f4").reshape(nz, ny, nx, C).transpose(2, 1, 0, 3)
    return FeatureVolume(GridSpec((ox, oy, oz), vs, (nx, ny, nz)), data.astype(np.float64))


def write_featvol(path, F):
    Path(path).write_bytes(featvol_bytes(F))


def read_featvol(path) -> FeatureVolume:
    return featvol_from_bytes(Path(path).read_bytes())


# model files ----------------------------------------------------------------


def _pack_layers(arrays):
    return b"".join(np.ascontiguousarray(a, dtype="<f8").tobytes() for a in arrays)


def _unpack_layers(buf, offset, shapes):
    out = []
    for shape in shapes:
        n = int(np.prod(shape))
        end = offset + 8 * n
        if end > len(buf):
            raise FormatError("truncated model file")
        out.append(np.frombuffer(buf[offset:end], dtype="<f8").reshape(shape).astype(np.float64))
        offset = end
    if offset != len(buf):
        raise FormatError("trailing bytes in model file")
    return out


def _mlp_shapes(sizes):
    shapes = []
    for a, b in zip(sizes[:-1], sizes[1:]):
        shapes += [(a, b), (b,)]
    return shapes


def fold_bytes(dec: FoldingDecoder) -> bytes:
    head = struct.pack("<4s3I", b"FLD1", dec.n_features_in_, dec.hidden, dec.n_points)
    return head + _pack_layers(dec.parameters())


def fold_from_bytes(buf: bytes) -> FoldingDecoder:
    _check_magic(buf, b"FLD1")
    _, C, h, K = struct.unpack_from("<4s3I", buf)
    dec = FoldingDecoder(hidden=h, n_points=K).initialize(C)
    shapes = _mlp_shapes([C + 2, h, h, 3]) + _mlp_shapes([C + 3, h, h, 3])
    dec.set_parameters(_unpack_layers(buf, struct.calcsize("<4s3I"), shapes))
    return dec


def write_fold(path, dec):
    Path(path).write_bytes(fold_bytes(dec))


def read_fold(path) -> FoldingDecoder:
    return fold_from_bytes(Path(path).read_bytes())


def occh_bytes(head: OccHead) -> bytes:
    hdr = struct.pack(
        "<4s4I", b"OCH1", head.n_features_in_, head.hidden, head.n_classes, int(bool(head.dual_frame))
    )
    return hdr + _pack_layers(head.parameters())


def occh_from_bytes(buf: bytes) -> OccHead:
    _check_magic(buf, b"OCH1")
    _, D, h, n_cls, dual = struct.unpack_from("<4s4I", buf)
    head = OccHead(hidden=h, n_classes=n_cls, dual_frame=bool(dual)).initialize(D)
    arrays = _unpack_layers(buf, struct.calcsize("<4s4I"), _mlp_shapes([D, h, n_cls]))
    for dst, src in zip(head.parameters(), arrays):
        dst[...] = src
    return head


def write_occh(path, head):
    Path(path).write_bytes(occh_bytes(head))


def read_occh(path) -> OccHead:
    return occh_from_bytes(Path(path).read_bytes())


def read_model(path):
    """Load a FOLD or OCCH model, dispatching on the magic bytes."""
    buf = Path(path).read_bytes()
    if buf[:4] == b"FLD1":
        return fold_from_bytes(buf)
    if buf[:4] == b"OCH1":
        return occh_from_bytes(buf)
    raise FormatError(f"unknown model magic {buf[:4]!r}")


# PLY ------------------------------------------------------------------------


def ply_text(cloud: PointCloud) -> str:
    lines = ["ply", "format ascii 1.0"]
    if cloud.class_id is not None:
        lines.append(f"comment class_id {cloud.class_id}")
    lines += [
        f"element vertex {len(cloud)}",
        "property float x",
        "property float y",
        "property float z",
        "end_header",
    ]
    pts = cloud.points.astype(np.float32)
    lines += [" ".join(str(v) for v in row) for row in pts]
    return "\n".join(lines) + "\n"


def ply_from_text(text: str) -> PointCloud:
    lines = text.splitlines()
    if not lines or lines[0].strip() != "ply":
        raise FormatError("not a PLY file")
    class_id = None
    n = None
    i = 1
    while i < len(lines):
        tok = lines[i].split()
        i += 1
        if not tok:
            continue
        if tok[0] == "format" and tok[1] != "ascii":
            raise FormatError("only ASCII PLY is supported")
        if tok[0] == "comment" and len(tok) >= 3 and tok[1] == "class_id":
            class_id = int(tok[2])
        elif tok[0] == "element" and tok[1] == "vertex":
            n = int(tok[2])
        elif tok[0] == "end_header":
            break
    if n is None:
        raise FormatError("PLY header has no vertex element")
    rows = [ln.split()[:3] for ln in lines[i : i + n]]
    if len(rows) != n:
        raise FormatError("PLY body is truncated")
    pts = np.array(rows, dtype=np.float32).reshape(n, 3).astype(np.float64)
    return PointCloud(pts, class_id)


def write_ply(path, cloud):
    Path(path).write_text(ply_text(cloud))


def read_ply(path) -> PointCloud:
    return ply_from_text(Path(path).read_text())


# JSON -----------------------------------------------------------------------


def write_scene(path, scene: SceneSpec):
    Path(path).write_text(scene.to_json())


def read_scene(path) -> SceneSpec:
    return SceneSpec.from_json(Path(path).read_text())


def boxes_json(boxes) -> str:
    return json.dumps([b.to_dict() for b in boxes], sort_keys=True, separators=(",", ":"))


def boxes_from_json(text):
    return [OrientedBox3.from_dict(d) for d in json.loads(text)]


def write_loss_csv(path, curve, header="mean_chamfer"):
    rows = [f"epoch,{header}"] + [f"{i},{float(v)!r}" for i, v in enumerate(curve)]
    Path(path).write_text("\n".join(rows) + "\n")
