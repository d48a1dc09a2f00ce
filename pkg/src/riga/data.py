"""Synthetic partial-overlap pairs and the on-disk formats.

Formats
-------
PLY
    ``ascii`` and ``binary_little_endian``; the ``vertex`` element must carry
    ``x y z`` and may carry ``nx ny nz``. Scalar property types of 1 to 8
    bytes are accepted. Clouds are written with ``double`` properties so
    values survive a round trip exactly.
XYZ
    Whitespace-separated text, three (position) or six (position + normal)
    numbers per line; ``#`` starts a comment line.
Manifest
    One pair per line: ``source target [16 numbers]``. The optional numbers
    are the row-major 4x4 ground-truth transform mapping source into target.
    Relative paths resolve against the manifest's directory; ``#`` lines are
    ignored.
Checkpoint
    ``b"RIGA"``, u32 format version, u32 metadata length and UTF-8 JSON
    metadata, u32 parameter count, then per parameter: u16 name length,
    UTF-8 name, u8 rank, ``rank`` u32 dims and the float64 data. All integers
    and floats are little-endian.
"""

from __future__ import annotations

import hashlib
import json
import math
import os
import struct
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Optional

import numpy as np
from numpy.typing import NDArray

from .diffcore import Parameter
from .errors import BadMagicError, CheckpointError, DimensionMismatchError, InvalidInputError, \
    ParseError, VersionMismatchError
from .geom import PointCloud, RigidTransform, estimate_normals

SHAPES = ("sphere", "box", "cylinder", "torus", "composite")
NORMAL_MODES = ("none", "analytic", "estimated")


# ---------------------------------------------------------------------------
# synthetic shapes
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SynthConfig:
    shape: str = "composite"
    n_points: int = 1024
    partial_points: int = 768
    noise_sigma: float = 0.01
    noise_clip: float = 0.05
    rot_max_deg: float = 45.0
    trans_range: float = 0.5
    seed: int = 0
    shared_viewpoint: bool = False
    viewpoint_radius: float = 3.0
    # 0: every seed draws its own composite layout; k > 0: layouts repeat with period k
    shape_pool: int = 0
    # "none": leave estimation to the caller; "analytic": clean surface normals;
    # "estimated": PCA normals of the noisy points, signed to agree with the surface
    normals: str = "estimated"
    normal_k: int = 16

    def __post_init__(self):
        if self.shape not in SHAPES:
            raise InvalidInputError(f"unknown shape {self.shape!r}")
        if not 1 <= self.partial_points <= self.n_points:
            raise InvalidInputError("partial_points must lie in [1, n_points]")
        if self.noise_clip < 0 or self.noise_sigma < 0:
            raise InvalidInputError("noise parameters must be nonnegative")
        if self.normals not in NORMAL_MODES:
            raise InvalidInputError(f"normals must be one of {NORMAL_MODES}")
        if self.shape_pool < 0:
            raise InvalidInputError("shape_pool must be nonnegative")


@dataclass
class SynthPair:
    source: PointCloud
    target: PointCloud
    T_gt: RigidTransform  # maps source coordinates onto the target


def _unit_vectors(rng, n):
    v = rng.normal(size=(n, 3))
    return v / np.linalg.norm(v, axis=1, keepdims=True)


def _sample_sphere(rng, n, radius=1.0):
    u = _unit_vectors(rng, n)
    return radius * u, u


def _sample_box(rng, n, size=(1.0, 0.7, 0.5)):
    a, b, c = size
    faces = np.array([b * c, b * c, a * c, a * c, a * b, a * b])
    face = rng.choice(6, size=n, p=faces / faces.sum())
    uv = rng.uniform(-0.5, 0.5, size=(n, 2))
    pts = np.empty((n, 3))
    nrm = np.zeros((n, 3))
    axis = face // 2
    sign = np.where(face % 2 == 0, 1.0, -1.0)
    half = np.array(size)
    for k in range(3):
        sel = axis == k
        others = [d for d in range(3) if d != k]
        pts[sel, k] = 0.5 * sign[sel] * half[k]
        pts[sel, others[0]] = uv[sel, 0] * half[others[0]]
        pts[sel, others[1]] = uv[sel, 1] * half[others[1]]
        nrm[sel, k] = sign[sel]
    return pts, nrm


def _sample_cylinder(rng, n, radius=0.5, height=1.2):
    side = 2 * np.pi * radius * height
    cap = np.pi * radius ** 2
    which = rng.choice(3, size=n, p=np.array([side, cap, cap]) / (side + 2 * cap))
    theta = rng.uniform(0, 2 * np.pi, size=n)
    r = np.where(which == 0, radius, radius * np.sqrt(rng.uniform(size=n)))
    z = np.where(which == 0, rng.uniform(-height / 2, height / 2, size=n),
                 np.where(which == 1, height / 2, -height / 2))
    pts = np.stack([r * np.cos(theta), r * np.sin(theta), z], axis=1)
    side_n = np.stack([np.cos(theta), np.sin(theta), np.zeros(n)], axis=1)
    cap_n = np.zeros((n, 3))
    cap_n[:, 2] = np.where(which == 1, 1.0, -1.0)
    return pts, np.where((which == 0)[:, None], side_n, cap_n)


def _sample_torus(rng, n, major=0.7, minor=0.3):
    us, vs = [], []
    while sum(len(u) for u in us) < n:
        u = rng.uniform(0, 2 * np.pi, size=2 * n)
        v = rng.uniform(0, 2 * np.pi, size=2 * n)
        # area element is proportional to (major + minor cos v)
        keep = rng.uniform(0, major + minor, size=2 * n) < major + minor * np.cos(v)
        us.append(u[keep])
        vs.append(v[keep])
    u, v = np.concatenate(us)[:n], np.concatenate(vs)[:n]
    nrm = np.stack([np.cos(v) * np.cos(u), np.cos(v) * np.sin(u), np.sin(v)], axis=1)
    pts = np.stack([major * np.cos(u), major * np.sin(u), np.zeros(n)], axis=1) + minor * nrm
    return pts, nrm


_PRIMITIVES = {"sphere": _sample_sphere, "box": _sample_box,
               "cylinder": _sample_cylinder, "torus": _sample_torus}


def _random_rotation(rng) -> NDArray[np.float64]:
    return RigidTransform.random(rng).rotation


def _composite_layout(rng):
    """Random part list ``(kind, scale, rotation, offset)`` for a 2-4 part composite."""
    k = int(rng.integers(2, 5))
    kinds = rng.choice(list(_PRIMITIVES), size=k)
    scales = rng.uniform(0.35, 0.8, size=k)
    return [(str(kind), float(s), _random_rotation(rng), rng.uniform(-0.6, 0.6, size=3))
            for kind, s in zip(kinds, scales)]


def _sample_composite(layout, rng, n):
    scales = np.array([part[1] for part in layout])
    counts = rng.multinomial(n, scales ** 2 / np.sum(scales ** 2))
    pts, nrm = [], []
    for (kind, s, R, t), c in zip(layout, counts):
        p, q = _PRIMITIVES[kind](rng, int(c))
        pts.append(s * p @ R.T + t)
        nrm.append(q @ R.T)
    return np.concatenate(pts), np.concatenate(nrm)


def sample_shape(shape: str, n: int, rng: np.random.Generator,
                 layout_rng: Optional[np.random.Generator] = None):
    """``n`` surface samples and their analytic outward normals, centred and
    scaled into the unit ball.

    For composites the part layout is drawn from ``layout_rng`` (default:
    ``rng``) so one layout can be resampled many times.
    """
    if shape == "composite":
        pts, nrm = _sample_composite(_composite_layout(layout_rng or rng), rng, n)
    else:
        pts, nrm = _PRIMITIVES[shape](rng, n)
    pts = pts - pts.mean(axis=0)
    return pts / np.max(np.linalg.norm(pts, axis=1)), nrm


def _euler_rotation(rng, max_deg):
    ax, ay, az = np.radians(rng.uniform(0.0, max_deg, size=3))
    cx, sx, cy, sy, cz, sz = np.cos(ax), np.sin(ax), np.cos(ay), np.sin(ay), np.cos(az), np.sin(az)
    Rx = np.array([[1, 0, 0], [0, cx, -sx], [0, sx, cx]])
    Ry = np.array([[cy, 0, sy], [0, 1, 0], [-sy, 0, cy]])
    Rz = np.array([[cz, -sz, 0], [sz, cz, 0], [0, 0, 1]])
    return Rz @ Ry @ Rx


def _crop(points, viewpoint, k):
    d = np.sqrt(np.sum((points - viewpoint) ** 2, axis=1))
    nearest = np.lexsort((np.arange(len(points)), d))[:k]
    return np.sort(nearest)


def _with_normals(cloud: PointCloud, surface_normals, cfg: SynthConfig) -> PointCloud:
    if cfg.normals == "none":
        return cloud
    if cfg.normals == "analytic":
        return PointCloud(cloud.points, surface_normals, cloud.viewpoint)
    est = estimate_normals(cloud, cfg.normal_k, "away_from_centroid").normals
    flip = np.sum(est * surface_normals, axis=1) < 0
    est[flip] *= -1.0
    return PointCloud(cloud.points, est, cloud.viewpoint)


def synth_pair(cfg: SynthConfig = SynthConfig()) -> SynthPair:
    """A partially overlapping source/target pair from one shared base sample.

    Each side keeps the ``partial_points`` base points nearest to its own
    random viewpoint; the source side is then moved by a random rigid motion
    and both sides receive clipped Gaussian noise. The returned ``T_gt``
    maps the source onto the target.
    """
    rng = np.random.default_rng(cfg.seed)
    layout_rng = None
    if cfg.shape_pool:
        layout_rng = np.random.default_rng([cfg.seed % cfg.shape_pool, 0x5EED])
    base, base_normals = sample_shape(cfg.shape, cfg.n_points, rng, layout_rng)
    vp_s = cfg.viewpoint_radius * _unit_vectors(rng, 1)[0]
    vp_t = vp_s.copy() if cfg.shared_viewpoint else cfg.viewpoint_radius * _unit_vectors(rng, 1)[0]
    src_idx = _crop(base, vp_s, cfg.partial_points)
    tgt_idx = _crop(base, vp_t, cfg.partial_points)

    R = _euler_rotation(rng, cfg.rot_max_deg)
    t = rng.uniform(-cfg.trans_range, cfg.trans_range, size=3) if cfg.trans_range > 0 else np.zeros(3)
    motion = RigidTransform(R, t)

    def noise(n):
        if cfg.noise_sigma == 0:
            return np.zeros((n, 3))
        return np.clip(rng.normal(0.0, cfg.noise_sigma, size=(n, 3)), -cfg.noise_clip, cfg.noise_clip)

    src = motion.apply(base[src_idx]) + noise(len(src_idx))
    tgt = base[tgt_idx] + noise(len(tgt_idx))
    source = _with_normals(PointCloud(src, viewpoint=motion.apply(vp_s)[0]), base_normals[src_idx] @ R.T, cfg)
    target = _with_normals(PointCloud(tgt, viewpoint=vp_t), base_normals[tgt_idx], cfg)
    return SynthPair(source, target, motion.inverse())


# ---------------------------------------------------------------------------
# PLY
# ---------------------------------------------------------------------------

_PLY_TYPES = {
    "char": "i1", "int8": "i1", "uchar": "u1", "uint8": "u1",
    "short": "i2", "int16": "i2", "ushort": "u2", "uint16": "u2",
    "int": "i4", "int32": "i4", "uint": "u4", "uint32": "u4",
    "float": "f4", "float32": "f4", "double": "f8", "float64": "f8",
}


@dataclass
class _PlyElement:
    name: str
    count: int
    props: list  # (name, numpy type) or (name, None) for list properties


def _parse_ply_header(raw: bytes):
    end = raw.find(b"end_header")
    if end < 0:
        raise ParseError("PLY header has no end_header", offset=len(raw))
    nl = raw.find(b"\n", end)
    body_start = len(raw) if nl < 0 else nl + 1
    try:
        text = raw[:end].decode("ascii")
    except UnicodeDecodeError as exc:
        raise ParseError("PLY header is not ASCII", offset=exc.start) from None
    lines = text.replace("\r", "").split("\n")
    if not lines or lines[0].strip() != "ply":
        raise ParseError("missing 'ply' magic line", offset=0)
    fmt, elements = None, []
    offset = len(lines[0]) + 1
    for line in lines[1:]:
        parts = line.split()
        if not parts or parts[0] in ("comment", "obj_info"):
            pass
        elif parts[0] == "format":
            if len(parts) != 3:
                raise ParseError("malformed format line", offset=offset)
            fmt = parts[1]
        elif parts[0] == "element":
            if len(parts) != 3 or not parts[2].isdigit():
                raise ParseError("malformed element line", offset=offset)
            elements.append(_PlyElement(parts[1], int(parts[2]), []))
        elif parts[0] == "property":
            if not elements:
                raise ParseError("property before any element", offset=offset)
            name = parts[-1]
            if any(name == p[0] for p in elements[-1].props):
                raise ParseError(f"property {name!r} declared twice", offset=offset)
            if len(parts) == 5 and parts[1] == "list":
                elements[-1].props.append((parts[4], None))
            elif len(parts) == 3 and parts[1] in _PLY_TYPES:
                elements[-1].props.append((parts[2], _PLY_TYPES[parts[1]]))
            else:
                raise ParseError(f"unsupported property declaration {line.strip()!r}", offset=offset)
        else:
            raise ParseError(f"unknown header keyword {parts[0]!r}", offset=offset)
        offset += len(line) + 1
    if fmt not in ("ascii", "binary_little_endian"):
        raise ParseError(f"unsupported PLY format {fmt!r}", offset=0)
    return fmt, elements, body_start


def _normal_norms(normals):
    """Row norms, or the first offending row when a normal is non-finite or zero."""
    with np.errstate(over="ignore", invalid="ignore"):
        norms = np.linalg.norm(normals, axis=1, keepdims=True)
    bad = ~np.isfinite(norms[:, 0]) | (norms[:, 0] < 1e-12)
    return norms, (int(np.argmax(bad)) if bad.any() else None)


def _unit_rows(normals, norms):
    """Rescale rows that are not already unit length, leaving stored unit normals bit-exact."""
    off = np.abs(norms[:, 0] - 1.0) > 1e-12
    normals = normals.copy()
    normals[off] /= norms[off]
    return normals


def load_ply(path) -> PointCloud:
    raw = Path(path).read_bytes()
    fmt, elements, body = _parse_ply_header(raw)
    names = [e.name for e in elements]
    if "vertex" not in names:
        raise ParseError("PLY file has no vertex element", offset=0)
    vi = names.index("vertex")
    vertex = elements[vi]
    prop_names = [p[0] for p in vertex.props]
    for axis in "xyz":
        if axis not in prop_names:
            raise ParseError(f"vertex element lacks property {axis!r}", offset=0)
    if any(t is None for _, t in vertex.props):
        raise ParseError("list properties in the vertex element are not supported", offset=0)

    if fmt == "ascii":
        table = _read_ascii_vertices(raw[body:], elements, vi)
        cols = {n: table[:, k] for k, n in enumerate(prop_names)}
    else:
        skip = 0
        for e in elements[:vi]:
            if any(t is None for _, t in e.props):
                raise ParseError(f"binary element {e.name!r} with list properties precedes vertices",
                                 offset=body)
            skip += e.count * sum(np.dtype(t).itemsize for _, t in e.props)
        dtype = np.dtype([(n, "<" + t) for n, t in vertex.props])
        start = body + skip
        need = vertex.count * dtype.itemsize
        have = max(len(raw) - start, 0)
        if have < need:
            raise ParseError(f"truncated binary payload: expected {need} bytes of vertex data, got {have}",
                             offset=len(raw))
        rec = np.frombuffer(raw, dtype=dtype, count=vertex.count, offset=start)
        cols = {n: rec[n].astype(np.float64) for n in prop_names}

    points = np.stack([cols["x"], cols["y"], cols["z"]], axis=1)
    normals = None
    if all(n in cols for n in ("nx", "ny", "nz")):
        normals = np.stack([cols["nx"], cols["ny"], cols["nz"]], axis=1)
        norms, bad = _normal_norms(normals)
        if bad is not None:
            raise ParseError(f"zero-length or non-finite normal at vertex {bad}", offset=body)
        normals = _unit_rows(normals, norms)
    if not np.all(np.isfinite(points)):
        raise ParseError("non-finite vertex coordinates", offset=body)
    return PointCloud(points, normals)


def _read_ascii_vertices(body: bytes, elements, vi):
    lines = body.decode("ascii", errors="replace").splitlines()
    start = sum(e.count for e in elements[:vi])
    vertex = elements[vi]
    if len(lines) < start + vertex.count:
        raise ParseError(f"truncated ASCII payload: expected {start + vertex.count} data lines, "
                         f"got {len(lines)}", offset=len(body))
    rows = []
    offset = sum(len(l) + 1 for l in lines[:start])
    for line in lines[start:start + vertex.count]:
        parts = line.split()
        if len(parts) != len(vertex.props):
            raise ParseError(f"expected {len(vertex.props)} values per vertex, got {len(parts)}",
                             offset=offset)
        try:
            rows.append([float(p) for p in parts])
        except ValueError:
            raise ParseError(f"non-numeric vertex value in {line!r}", offset=offset) from None
        offset += len(line) + 1
    return np.array(rows, dtype=np.float64).reshape(vertex.count, len(vertex.props))


def save_ply(path, cloud: PointCloud, encoding: str = "binary_little_endian") -> None:
    if encoding not in ("ascii", "binary_little_endian"):
        raise InvalidInputError(f"unsupported encoding {encoding!r}")
    names = ["x", "y", "z"] + (["nx", "ny", "nz"] if cloud.normals is not None else [])
    data = cloud.points if cloud.normals is None else np.hstack([cloud.points, cloud.normals])
    header = ["ply", f"format {encoding} 1.0", f"element vertex {len(cloud)}"]
    header += [f"property double {n}" for n in names]
    header.append("end_header")
    with open(path, "wb") as fh:
        fh.write(("\n".join(header) + "\n").encode("ascii"))
        if encoding == "ascii":
            fh.write("".join(" ".join(repr(float(v)) for v in row) + "\n" for row in data).encode("ascii"))
        else:
            fh.write(np.ascontiguousarray(data, dtype="<f8").tobytes())


def _read_text(path) -> str:
    raw = Path(path).read_bytes()
    try:
        return raw.decode("utf-8")
    except UnicodeDecodeError as exc:
        line = raw[:exc.start].count(b"\n") + 1
        raise ParseError("file is not valid UTF-8 text", line=line, offset=exc.start) from None


def load_xyz(path) -> PointCloud:
    rows, linenos = [], []
    width = None
    for lineno, line in enumerate(_read_text(path).splitlines(), start=1):
        s = line.strip()
        if not s or s.startswith("#"):
            continue
        parts = s.replace(",", " ").split()
        if len(parts) not in (3, 6) or (width is not None and len(parts) != width):
            raise ParseError(f"expected 3 or 6 values consistently, got {len(parts)}", line=lineno)
        width = len(parts)
        try:
            rows.append([float(p) for p in parts])
        except ValueError:
            raise ParseError(f"non-numeric value in {s!r}", line=lineno) from None
        linenos.append(lineno)
    if not rows:
        raise ParseError("no points in XYZ file", line=1)
    arr = np.array(rows)
    normals = None
    if width == 6:
        norms, bad = _normal_norms(arr[:, 3:])
        if bad is not None:
            raise ParseError("zero-length or non-finite normal", line=linenos[bad])
        normals = _unit_rows(arr[:, 3:], norms)
    return PointCloud(arr[:, :3], normals)


def load_cloud(path) -> PointCloud:
    """Dispatch on extension: ``.ply`` or anything else as XYZ text."""
    return load_ply(path) if str(path).lower().endswith(".ply") else load_xyz(path)


# ---------------------------------------------------------------------------
# manifests
# ---------------------------------------------------------------------------

@dataclass
class ManifestRecord:
    source: Path
    target: Path
    transform: Optional[RigidTransform] = None


def load_manifest(path) -> list[ManifestRecord]:
    path = Path(path)
    root = path.parent
    records = []
    for lineno, line in enumerate(_read_text(path).splitlines(), start=1):
        s = line.strip()
        if not s or s.startswith("#"):
            continue
        parts = s.split()
        if len(parts) not in (2, 18):
            raise ParseError(f"expected 2 paths plus optionally 16 numbers, got {len(parts)} fields",
                             line=lineno)
        T = None
        if len(parts) == 18:
            try:
                vals = np.array([float(p) for p in parts[2:]])
            except ValueError:
                raise ParseError("ground-truth transform is not numeric", line=lineno) from None
            try:
                T = RigidTransform.from_matrix(vals.reshape(4, 4), orthonormalize=True)
            except InvalidInputError as exc:
                raise ParseError(f"invalid ground-truth transform: {exc}", line=lineno) from None
        records.append(ManifestRecord(root / parts[0], root / parts[1], T))
    return records


def format_matrix_row_major(T: RigidTransform) -> str:
    return " ".join(repr(float(v)) for v in T.as_matrix().reshape(-1))


def write_manifest(path, records) -> None:
    lines = ["# source target [4x4 row-major ground truth]"]
    root = Path(path).parent
    for r in records:
        src = os.path.relpath(r.source, root)
        tgt = os.path.relpath(r.target, root)
        gt = "" if r.transform is None else " " + format_matrix_row_major(r.transform)
        lines.append(f"{src} {tgt}{gt}")
    Path(path).write_text("\n".join(lines) + "\n")


def save_transform(path, T: RigidTransform) -> None:
    M = T.as_matrix()
    Path(path).write_text("".join(" ".join(repr(float(v)) for v in row) + "\n" for row in M))


def load_transform(path) -> RigidTransform:
    text = _read_text(path).split()
    if len(text) != 16:
        raise ParseError(f"transform file needs 16 numbers, got {len(text)}", line=1)
    try:
        vals = np.array([float(v) for v in text])
    except ValueError:
        raise ParseError("transform file is not numeric", line=1) from None
    return RigidTransform.from_matrix(vals.reshape(4, 4), orthonormalize=True)


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

CHECKPOINT_MAGIC = b"RIGA"
CHECKPOINT_VERSION = 1


def config_hash(obj) -> str:
    blob = json.dumps(obj, sort_keys=True, default=str).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def save_checkpoint(params, path, metadata: Optional[dict] = None) -> None:
    meta = json.dumps(metadata or {}, sort_keys=True).encode("utf-8")
    out = [CHECKPOINT_MAGIC, struct.pack("<II", CHECKPOINT_VERSION, len(meta)), meta,
           struct.pack("<I", len(params))]
    for name, p in params.items():
        data = np.ascontiguousarray(p.data, dtype="<f8")
        encoded = name.encode("utf-8")
        out.append(struct.pack("<H", len(encoded)) + encoded)
        out.append(struct.pack("<B", data.ndim) + struct.pack(f"<{data.ndim}I", *data.shape))
        out.append(data.tobytes())
    Path(path).write_bytes(b"".join(out))


class _Reader:
    def __init__(self, raw: bytes):
        self.raw, self.pos = raw, 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.raw):
            raise CheckpointError(f"truncated checkpoint: needed {n} bytes at offset {self.pos}, "
                                  f"{len(self.raw) - self.pos} left")
        b = self.raw[self.pos:self.pos + n]
        self.pos += n
        return b

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def load_checkpoint_with_metadata(path, expected=None):
    """Read a checkpoint; returns ``(params, metadata)``.

    ``expected`` (a params dict) enables the architecture check: every
    expected name must be present with the same shape.
    """
    r = _Reader(Path(path).read_bytes())
    magic = r.raw[:4]
    if magic != CHECKPOINT_MAGIC:
        raise BadMagicError(f"not a checkpoint: bad magic {magic!r}")
    r.pos = 4
    version, meta_len = r.unpack("<II")
    if version != CHECKPOINT_VERSION:
        raise VersionMismatchError(f"checkpoint format version {version}, expected {CHECKPOINT_VERSION}")
    try:
        meta = json.loads(r.take(meta_len).decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"corrupt checkpoint metadata: {exc}") from None
    (count,) = r.unpack("<I")
    params = {}
    for _ in range(count):
        (nlen,) = r.unpack("<H")
        try:
            name = r.take(nlen).decode("utf-8")
        except UnicodeDecodeError:
            raise CheckpointError(f"parameter name at offset {r.pos - nlen} is not UTF-8") from None
        (rank,) = r.unpack("<B")
        dims = r.unpack(f"<{rank}I") if rank else ()
        if 0 in dims:
            raise CheckpointError(f"parameter {name!r} has an empty shape {dims}")
        n = math.prod(dims)
        data = np.frombuffer(r.take(8 * n), dtype="<f8").astype(np.float64).reshape(dims)
        params[name] = Parameter(data, name)
    if r.pos != len(r.raw):
        raise CheckpointError(f"{len(r.raw) - r.pos} trailing bytes after the last parameter")
    if expected is not None:
        for name, p in expected.items():
            if name not in params:
                raise DimensionMismatchError(f"checkpoint lacks parameter {name!r}", name)
            if params[name].shape != p.shape:
                raise DimensionMismatchError(
                    f"parameter {name!r} has shape {params[name].shape}, model expects {p.shape}", name)
        extra = sorted(set(params) - set(expected))
        if extra:
            raise DimensionMismatchError(f"checkpoint has unexpected parameter {extra[0]!r}", extra[0])
    return params, meta


def load_checkpoint(path, expected=None):
    return load_checkpoint_with_metadata(path, expected)[0]
