"""File formats: PFM depth/normal images, PGM masks, OBJ and PLY meshes.

PFM data is little-endian float32 stored bottom row first. Depth files
carry ``#`` comment lines after the magic naming the sign convention and
camera intrinsics; readers skip comments but return them.
"""

from __future__ import annotations

import os
import re

import numpy as np

from .geometry import Camera, ContractError, DepthMap, NormalMap
from .meshing import TriangleMesh

DEPTH_CONVENTION = "depth: positive meters along the camera +z (optical) axis"


class FormatError(ValueError):
    """Malformed file; ``offset`` is the byte position of the problem."""

    def __init__(self, path, offset, message):
        super().__init__(f"{path}: byte {offset}: {message}")
        self.path = str(path)
        self.offset = offset


class _Header:
    """Line-oriented header reader tracking byte offsets."""

    def __init__(self, data: bytes, path):
        self.data = data
        self.pos = 0
        self.path = path
        self.comments = []

    def line(self, allow_comments=True) -> tuple[str, int]:
        while True:
            start = self.pos
            end = self.data.find(b"\n", start)
            if end < 0:
                raise FormatError(self.path, start, "unexpected end of header")
            self.pos = end + 1
            raw = self.data[start:end].rstrip(b"\r")
            try:
                text = raw.decode("ascii")
            except UnicodeDecodeError:
                raise FormatError(self.path, start, "non-ASCII header line") from None
            if allow_comments and text.startswith("#"):
                self.comments.append(text[1:].strip())
                continue
            return text.strip(), start

    def error(self, offset, msg):
        return FormatError(self.path, offset, msg)


def _atomic_write(path, payload: bytes):
    tmp = f"{path}.tmp{os.getpid()}"
    with open(tmp, "wb") as fh:
        fh.write(payload)
    os.replace(tmp, path)


# ---------------------------------------------------------------- PFM / PGM


def write_pfm(path, image, comments=()):
    image = np.asarray(image)
    if image.ndim == 2:
        magic, h, w = b"Pf", *image.shape
    elif image.ndim == 3 and image.shape[2] == 3:
        magic, h, w = b"PF", *image.shape[:2]
    else:
        raise ContractError(f"PFM needs an HxW or HxWx3 image, got {image.shape}")
    data = np.ascontiguousarray(np.flipud(image).astype("<f4"))
    head = [magic]
    head += [f"# {c}".encode("ascii") for c in comments]
    head += [f"{w} {h}".encode("ascii"), b"-1.0"]
    _atomic_write(path, b"\n".join(head) + b"\n" + data.tobytes())


def read_pfm(path):
    """Return ``(image_float64, comments)``."""
    with open(path, "rb") as fh:
        data = fh.read()
    hdr = _Header(data, path)
    magic, off = hdr.line(allow_comments=False)
    if magic not in ("PF", "Pf"):
        raise hdr.error(off, f"bad PFM magic {magic!r}")
    dims, off = hdr.line()
    m = re.fullmatch(r"(\d+)\s+(\d+)", dims)
    if not m:
        raise hdr.error(off, f"bad PFM dimensions {dims!r}")
    w, h = int(m.group(1)), int(m.group(2))
    scale_txt, off = hdr.line()
    try:
        scale = float(scale_txt)
    except ValueError:
        raise hdr.error(off, f"bad PFM scale {scale_txt!r}") from None
    if scale == 0:
        raise hdr.error(off, "PFM scale must be non-zero")
    channels = 3 if magic == "PF" else 1
    n_bytes = 4 * w * h * channels
    payload = data[hdr.pos : hdr.pos + n_bytes]
    if len(payload) != n_bytes:
        raise hdr.error(hdr.pos + len(payload), f"expected {n_bytes} data bytes, found {len(payload)}")
    dtype = "<f4" if scale < 0 else ">f4"
    img = np.frombuffer(payload, dtype=dtype).reshape((h, w, channels) if channels == 3 else (h, w))
    return np.flipud(img).astype(np.float64), hdr.comments


def write_pgm(path, mask):
    mask = np.asarray(mask, dtype=bool)
    h, w = mask.shape
    pix = np.where(mask, 255, 0).astype(np.uint8)
    _atomic_write(path, f"P5\n{w} {h}\n255\n".encode("ascii") + pix.tobytes())


def read_pgm(path) -> np.ndarray:
    """Binary PGM mask; any non-zero sample is valid."""
    with open(path, "rb") as fh:
        data = fh.read()
    hdr = _Header(data, path)
    magic, off = hdr.line(allow_comments=False)
    if magic != "P5":
        raise hdr.error(off, f"bad PGM magic {magic!r}")
    dims, off = hdr.line()
    m = re.fullmatch(r"(\d+)\s+(\d+)", dims)
    if not m:
        raise hdr.error(off, f"bad PGM dimensions {dims!r}")
    w, h = int(m.group(1)), int(m.group(2))
    maxval_txt, off = hdr.line()
    if not maxval_txt.isdigit() or not 0 < int(maxval_txt) < 256:
        raise hdr.error(off, f"unsupported PGM maxval {maxval_txt!r}")
    payload = data[hdr.pos : hdr.pos + w * h]
    if len(payload) != w * h:
        raise hdr.error(hdr.pos + len(payload), f"expected {w * h} data bytes, found {len(payload)}")
    return np.frombuffer(payload, dtype=np.uint8).reshape(h, w) > 0


def _camera_comment(cam: Camera) -> str:
    return f"camera focal_px={cam.focal_px!r} cx={cam.cx!r} cy={cam.cy!r}"


def camera_from_comments(comments, shape) -> Camera | None:
    for c in comments:
        if c.startswith("camera "):
            fields = dict(kv.split("=", 1) for kv in c.split()[1:])
            h, w = shape
            return Camera(float(fields["focal_px"]), float(fields["cx"]), float(fields["cy"]), w, h)
    return None


def write_depth(path, depth: DepthMap, cam: Camera | None = None):
    """Write depth as a 1-channel PFM; masked-out pixels are stored as 0."""
    values = depth.filled(0.0)
    if not np.all(np.isfinite(values)):
        raise ContractError("depth contains NaN or Inf")
    comments = [DEPTH_CONVENTION] + ([_camera_comment(cam)] if cam else [])
    write_pfm(path, values, comments)


def read_depth(path, mask_path=None):
    """Read a depth PFM and optional PGM mask.

    Without a mask, positive values are valid. Returns ``(DepthMap, camera
    or None)`` where the camera comes from the header comment.
    """
    values, comments = read_pfm(path)
    if values.ndim != 2:
        raise FormatError(path, 0, "depth PFM must be single-channel")
    if not np.all(np.isfinite(values)):
        bad = np.argwhere(~np.isfinite(values))[0]
        raise ContractError(f"{path}: non-finite depth at (u={bad[1]}, v={bad[0]})")
    mask = read_pgm(mask_path) if mask_path else values > 0
    if mask.shape != values.shape:
        raise ContractError(f"mask {mask.shape} does not match depth {values.shape}")
    return DepthMap(np.where(mask, values, 0.0), mask), camera_from_comments(comments, values.shape)


def write_normals(path, normals: NormalMap, cam: Camera | None = None):
    comments = ["normals: unit vectors in camera frame, oriented toward the camera"]
    if cam:
        comments.append(_camera_comment(cam))
    write_pfm(path, normals.values, comments)


def read_normals(path, mask_path=None):
    """Read a 3-channel normal PFM. Returns ``(NormalMap, camera or None)``.

    Without a mask, pixels differing from the constant normal are valid.
    """
    values, comments = read_pfm(path)
    if values.ndim != 3:
        raise FormatError(path, 0, "normal PFM must have three channels")
    if not np.all(np.isfinite(values)):
        raise ContractError(f"{path}: non-finite normal components")
    if mask_path:
        mask = read_pgm(mask_path)
    else:
        mask = np.any(values != np.array([0.0, 0.0, -1.0]), axis=-1)
    if mask.shape != values.shape[:2]:
        raise ContractError(f"mask {mask.shape} does not match normals {values.shape[:2]}")
    values = np.where(mask[..., None], values, np.array([0.0, 0.0, -1.0]))
    return NormalMap(values, mask), camera_from_comments(comments, mask.shape)


# ---------------------------------------------------------------- meshes


def write_obj(path, mesh: TriangleMesh):
    lines = ["# depthscan mesh"]
    lines += [f"v {x!r} {y!r} {z!r}" for x, y, z in mesh.vertices.tolist()]
    lines += [f"f {a + 1} {b + 1} {c + 1}" for a, b, c in mesh.triangles.tolist()]
    _atomic_write(path, ("\n".join(lines) + "\n").encode("ascii"))


def read_obj(path) -> TriangleMesh:
    verts, faces = [], []
    offset = 0
    with open(path, "rb") as fh:
        for raw in fh:
            parts = raw.decode("ascii", errors="replace").split()
            try:
                if parts and parts[0] == "v":
                    verts.append([float(p) for p in parts[1:4]])
                elif parts and parts[0] == "f":
                    idx = [int(p.split("/")[0]) for p in parts[1:]]
                    idx = [i - 1 if i > 0 else len(verts) + i for i in idx]
                    for k in range(1, len(idx) - 1):
                        faces.append([idx[0], idx[k], idx[k + 1]])
            except (ValueError, IndexError):
                raise FormatError(path, offset, f"bad OBJ record {raw!r}") from None
            offset += len(raw)
    return TriangleMesh(np.array(verts).reshape(-1, 3), np.array(faces, dtype=np.int64).reshape(-1, 3))


_PLY_TYPES = {
    "char": "i1", "int8": "i1", "uchar": "u1", "uint8": "u1",
    "short": "i2", "int16": "i2", "ushort": "u2", "uint16": "u2",
    "int": "i4", "int32": "i4", "uint": "u4", "uint32": "u4",
    "float": "f4", "float32": "f4", "double": "f8", "float64": "f8",
}


def write_ply(path, mesh: TriangleMesh):
    """Binary little-endian PLY with double coordinates and a ``source`` tag."""
    nv, nf = mesh.n_vertices, mesh.n_triangles
    header = (
        "ply\nformat binary_little_endian 1.0\ncomment depthscan mesh\n"
        f"element vertex {nv}\nproperty double x\nproperty double y\nproperty double z\n"
        "property uchar source\n"
        f"element face {nf}\nproperty list uchar int vertex_indices\nend_header\n"
    ).encode("ascii")
    vdt = np.dtype([("x", "<f8"), ("y", "<f8"), ("z", "<f8"), ("source", "u1")])
    vrec = np.empty(nv, dtype=vdt)
    vrec["x"], vrec["y"], vrec["z"] = mesh.vertices.T
    vrec["source"] = mesh.source
    fdt = np.dtype([("n", "u1"), ("idx", "<i4", (3,))])
    frec = np.empty(nf, dtype=fdt)
    frec["n"] = 3
    frec["idx"] = mesh.triangles
    _atomic_write(path, header + vrec.tobytes() + frec.tobytes())


def read_ply(path) -> TriangleMesh:
    """Read binary little-endian PLY with triangle faces."""
    with open(path, "rb") as fh:
        data = fh.read()
    hdr = _Header(data, path)
    magic, off = hdr.line(allow_comments=False)
    if magic != "ply":
        raise hdr.error(off, "missing 'ply' magic")
    elements = []
    while True:
        text, off = hdr.line(allow_comments=False)
        parts = text.split()
        if not parts or parts[0] in ("comment", "obj_info"):
            continue
        if parts[0] == "end_header":
            break
        if parts[0] == "format":
            if parts[1:2] != ["binary_little_endian"]:
                raise hdr.error(off, f"unsupported PLY format {' '.join(parts[1:])!r}")
        elif parts[0] == "element" and len(parts) == 3:
            elements.append([parts[1], int(parts[2]), []])
        elif parts[0] == "property" and elements:
            if parts[1] == "list":
                if len(parts) != 5 or parts[2] not in _PLY_TYPES or parts[3] not in _PLY_TYPES:
                    raise hdr.error(off, f"bad list property {text!r}")
                elements[-1][2].append((parts[4], "list", _PLY_TYPES[parts[2]], _PLY_TYPES[parts[3]]))
            elif len(parts) == 3 and parts[1] in _PLY_TYPES:
                elements[-1][2].append((parts[2], _PLY_TYPES[parts[1]]))
            else:
                raise hdr.error(off, f"bad property {text!r}")
        else:
            raise hdr.error(off, f"unexpected header line {text!r}")

    pos = hdr.pos
    verts = np.zeros((0, 3))
    source = None
    faces = np.zeros((0, 3), dtype=np.int64)
    for name, count, props in elements:
        if any(p[1] == "list" for p in props):
            if name != "face" or len(props) != 1:
                raise FormatError(path, pos, f"unsupported list element {name!r}")
            _, _, ctype, itype = props[0]
            rec = np.dtype([("n", "<" + ctype), ("idx", "<" + itype, (3,))])
            size = rec.itemsize * count
            chunk = data[pos : pos + size]
            if len(chunk) != size:
                raise FormatError(path, pos + len(chunk), "truncated face data")
            arr = np.frombuffer(chunk, dtype=rec)
            if count and np.any(arr["n"] != 3):
                raise FormatError(path, pos, "only triangle faces are supported")
            faces = arr["idx"].astype(np.int64)
            pos += size
        else:
            rec = np.dtype([(p[0], "<" + p[1]) for p in props])
            size = rec.itemsize * count
            chunk = data[pos : pos + size]
            if len(chunk) != size:
                raise FormatError(path, pos + len(chunk), f"truncated {name} data")
            arr = np.frombuffer(chunk, dtype=rec)
            if name == "vertex":
                verts = np.stack([arr["x"], arr["y"], arr["z"]], axis=1).astype(np.float64)
                if "source" in arr.dtype.names:
                    source = arr["source"].astype(np.uint8)
            pos += size
    return TriangleMesh(verts, faces, source)


def read_mesh(path) -> TriangleMesh:
    ext = os.path.splitext(str(path))[1].lower()
    if ext == ".ply":
        return read_ply(path)
    if ext == ".obj":
        return read_obj(path)
    raise ContractError(f"unknown mesh format {ext!r}; expected .ply or .obj")


def write_mesh(path, mesh: TriangleMesh):
    ext = os.path.splitext(str(path))[1].lower()
    if ext == ".ply":
        write_ply(path, mesh)
    elif ext == ".obj":
        write_obj(path, mesh)
    else:
        raise ContractError(f"unknown mesh format {ext!r}; expected .ply or .obj")
