"""On-disk formats: volumes, HNN and forest checkpoints, manifests and slice overlays.

Volume = ``<name>.json`` header plus ``<name>.raw`` payload, x-fastest and
little-endian. Headers written here carry a ``crc32`` of their canonical
form; when present, the header must be byte-identical to that canonical
serialization, so any corruption of a stored header is detected.
"""
from __future__ import annotations

import hashlib
import io as _io
import json
import struct
import zlib
from collections import OrderedDict
from pathlib import Path

import numpy as np
import torch

from .errors import FormatError, InvalidArgument
from .forest import ForestModel, Tree, LEAF
from .hnn import HnnParams, NetConfig, param_shapes
from .volume import Volume

MAGIC = "CSEG"
VERSION = 1
_CODES = {"i16": np.dtype("<i2"), "f32": np.dtype("<f4"), "u8": np.dtype("u1")}
_HEADER_KEYS = ("magic", "version", "dims", "spacing_mm", "dtype", "order", "endianness")


def _paths(path):
    p = Path(path)
    if p.suffix in (".json", ".raw"):
        p = p.with_suffix("")
    return p.with_suffix(".json"), p.with_suffix(".raw")


def _canonical(header: dict) -> bytes:
    return (json.dumps({k: header[k] for k in _HEADER_KEYS}, separators=(", ", ": ")) + "\n").encode()


def _with_crc(header: dict) -> bytes:
    body = {k: header[k] for k in _HEADER_KEYS}
    body["crc32"] = zlib.crc32(_canonical(header))
    return (json.dumps(body, separators=(", ", ": ")) + "\n").encode()


def volume_header(vol: Volume) -> dict:
    return {
        "magic": MAGIC,
        "version": VERSION,
        "dims": list(vol.dims),
        "spacing_mm": list(vol.spacing),
        "dtype": vol.dtype_code,
        "order": "x-fastest",
        "endianness": "little",
    }


def store_volume(vol: Volume, path) -> tuple:
    """Write header and payload; returns their paths."""
    hpath, rpath = _paths(path)
    hpath.parent.mkdir(parents=True, exist_ok=True)
    header = volume_header(vol)
    payload = np.asarray(vol.data, dtype=_CODES[header["dtype"]]).tobytes(order="F")
    hpath.write_bytes(_with_crc(header))
    rpath.write_bytes(payload)
    return hpath, rpath


def _key_offset(text: bytes, key: str) -> int:
    i = text.find(f'"{key}"'.encode())
    return max(i, 0)


def parse_header(raw: bytes) -> dict:
    """Validate a header document, raising :class:`FormatError` with a byte offset."""
    try:
        text = raw.decode("utf-8")
    except UnicodeDecodeError as e:
        raise FormatError(f"header is not UTF-8: {e.reason}", e.start) from None
    try:
        h = json.loads(text)
    except json.JSONDecodeError as e:
        raise FormatError(f"malformed header JSON: {e.msg}", len(text[: e.pos].encode())) from None
    if not isinstance(h, dict):
        raise FormatError("header must be a JSON object", 0)
    extra = set(h) - set(_HEADER_KEYS) - {"crc32"}
    if extra:
        k = sorted(extra)[0]
        raise FormatError(f"unknown header field {k!r}", _key_offset(raw, k))
    for k in _HEADER_KEYS:
        if k not in h:
            raise FormatError(f"missing header field {k!r}", 0)

    def bad(key, msg):
        raise FormatError(f"{key}: {msg}", _key_offset(raw, key))

    if h["magic"] != MAGIC:
        bad("magic", f"expected {MAGIC!r}, got {h['magic']!r}")
    if type(h["version"]) is not int or h["version"] != VERSION:
        bad("version", f"unsupported version {h['version']!r}")
    dims = h["dims"]
    if not (isinstance(dims, list) and len(dims) == 3 and all(type(d) is int and d >= 1 for d in dims)):
        bad("dims", "expected three positive integers")
    sp = h["spacing_mm"]
    if not (isinstance(sp, list) and len(sp) == 3
            and all(type(s) in (int, float) and np.isfinite(s) and s > 0 for s in sp)):
        bad("spacing_mm", "expected three positive finite numbers")
    if not isinstance(h["dtype"], str) or h["dtype"] not in _CODES:
        bad("dtype", f"unsupported element type {h['dtype']!r}")
    if h["order"] != "x-fastest":
        bad("order", "only x-fastest payloads are supported")
    if h["endianness"] != "little":
        bad("endianness", "only little-endian payloads are supported")
    if "crc32" in h:
        if type(h["crc32"]) is not int or h["crc32"] != zlib.crc32(_canonical(h)):
            bad("crc32", "header checksum mismatch")
        expected = _with_crc(h)
        if raw != expected:
            pos = next((i for i, (a, b) in enumerate(zip(raw, expected)) if a != b), min(len(raw), len(expected)))
            raise FormatError("header is not in canonical form", pos)
    return h


def load_volume(path) -> Volume:
    hpath, rpath = _paths(path)
    try:
        raw = hpath.read_bytes()
    except OSError as e:
        raise FormatError(f"cannot read header {hpath}: {e.strerror}", 0) from None
    h = parse_header(raw)
    dt = _CODES[h["dtype"]]
    expected = int(np.prod(h["dims"])) * dt.itemsize
    try:
        payload = rpath.read_bytes()
    except OSError as e:
        raise FormatError(f"cannot read payload {rpath}: {e.strerror}", 0) from None
    if len(payload) != expected:
        raise FormatError(f"payload size mismatch: expected {expected} bytes, found {len(payload)}",
                          min(len(payload), expected))
    data = np.frombuffer(payload, dtype=dt).reshape(h["dims"], order="F")
    if h["dtype"] == "f32":
        bad = np.flatnonzero(~np.isfinite(data.ravel(order="F")))
        if bad.size:
            raise FormatError("non-finite f32 element in payload", int(bad[0]) * 4)
        out = np.flatnonzero((data.ravel(order="F") < 0) | (data.ravel(order="F") > 1))
        if out.size:
            raise FormatError("f32 element outside [0, 1]", int(out[0]) * 4)
    return Volume(data.astype(dt.newbyteorder("="), copy=True), tuple(float(s) for s in h["spacing_mm"]))


# ---- binary helpers -------------------------------------------------------

class _Reader:
    def __init__(self, buf: bytes):
        self.buf, self.pos = buf, 0

    def take(self, n: int) -> bytes:
        if n < 0 or self.pos + n > len(self.buf):
            raise FormatError(f"unexpected end of data: need {n} bytes", self.pos)
        out = self.buf[self.pos: self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        at = self.pos
        vals = struct.unpack("<" + fmt, self.take(struct.calcsize("<" + fmt)))
        self.last = at
        return vals if len(vals) > 1 else vals[0]

    def array(self, dtype, count):
        dt = np.dtype(dtype)
        return np.frombuffer(self.take(dt.itemsize * count), dtype=dt).copy()


HNN_MAGIC = b"CSHN"
FOREST_MAGIC = b"CSRF"


def store_hnn(params: HnnParams, path) -> Path:
    """Checkpoint: magic, u32 version, u32-length NetConfig JSON, then named f32 LE tensors."""
    out = _io.BytesIO()
    cfg = json.dumps(params.config.to_json(), sort_keys=True).encode()
    out.write(HNN_MAGIC + struct.pack("<II", VERSION, len(cfg)) + cfg)
    out.write(struct.pack("<I", len(params.tensors)))
    for name, t in params.tensors.items():
        arr = t.detach().cpu().numpy().astype("<f4")
        nb = name.encode()
        out.write(struct.pack("<H", len(nb)) + nb + struct.pack("<B", arr.ndim))
        out.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        out.write(arr.tobytes(order="C"))
    p = Path(path)
    p.parent.mkdir(parents=True, exist_ok=True)
    p.write_bytes(out.getvalue())
    return p


def load_hnn(path) -> HnnParams:
    r = _Reader(Path(path).read_bytes())
    if r.take(4) != HNN_MAGIC:
        raise FormatError("not an HNN checkpoint (bad magic)", 0)
    version = r.unpack("I")
    if version != VERSION:
        raise FormatError(f"unsupported HNN checkpoint version {version}", 4)
    n = r.unpack("I")
    at = r.pos
    try:
        cfg = NetConfig.from_json(json.loads(r.take(n).decode()))
    except (ValueError, KeyError, TypeError) as e:
        raise FormatError(f"bad network config: {e}", at) from None
    shapes = param_shapes(cfg)
    count = r.unpack("I")
    if count != len(shapes):
        raise FormatError(f"expected {len(shapes)} tensors, found {count}", r.last)
    tensors = OrderedDict()
    for _ in range(count):
        at = r.pos
        name = r.take(r.unpack("H")).decode("utf-8", "replace")
        ndim = r.unpack("B")
        shape = tuple(r.unpack(f"{ndim}I")) if ndim > 1 else ((r.unpack("I"),) if ndim == 1 else ())
        if name not in shapes or tuple(shapes[name]) != shape:
            raise FormatError(f"unexpected tensor {name!r} with shape {shape}", at)
        arr = r.array("<f4", int(np.prod(shape))).reshape(shape)
        if not np.all(np.isfinite(arr)):
            raise FormatError(f"non-finite values in tensor {name!r}", at)
        tensors[name] = torch.from_numpy(arr.astype(np.float32))
    if r.pos != len(r.buf):
        raise FormatError("trailing bytes after last tensor", r.pos)
    return HnnParams(cfg, OrderedDict((k, tensors[k]) for k in shapes))


_NODE = np.dtype([("feature", "<u2"), ("threshold", "<f4"), ("left", "<i4"), ("right", "<i4")])
_MODES = {"classification": 0, "regression": 1}


def forest_bytes(model: ForestModel) -> bytes:
    """Forest container: header, then per tree a node record table and leaf payloads.

    Node record: u16 feature (0xFFFF marks a leaf), f32 threshold, i32 left
    and right child offsets (-1 at leaves). Each node then carries
    ``n_outputs`` f32 values (class frequencies or regression means).
    """
    if model.n_features >= 0xFFFF:
        raise InvalidArgument("too many features for the forest container")
    out = _io.BytesIO()
    out.write(FOREST_MAGIC + struct.pack("<IBHHqd", VERSION, _MODES[model.mode], model.n_features,
                                         model.n_outputs, model.seed, model.oob_score))
    classes = np.asarray(model.classes if model.classes is not None else [], dtype="<i8")
    out.write(struct.pack("<H", len(classes)) + classes.tobytes())
    out.write(struct.pack("<I", len(model.trees)))
    for t in model.trees:
        rec = np.zeros(t.n_nodes, dtype=_NODE)
        rec["feature"] = np.where(t.feature == LEAF, 0xFFFF, t.feature)
        rec["threshold"] = t.threshold
        rec["left"] = t.left
        rec["right"] = t.right
        out.write(struct.pack("<I", t.n_nodes) + rec.tobytes())
        out.write(np.asarray(t.value, dtype="<f4").tobytes())
    return out.getvalue()


def forest_from_bytes(buf: bytes) -> ForestModel:
    r = _Reader(buf)
    if r.take(4) != FOREST_MAGIC:
        raise FormatError("not a forest checkpoint (bad magic)", 0)
    version, mode, nf, no, seed, oob = r.unpack("IBHHqd")
    if version != VERSION:
        raise FormatError(f"unsupported forest version {version}", 4)
    if mode not in (0, 1):
        raise FormatError(f"unknown forest mode {mode}", 8)
    nc = r.unpack("H")
    classes = r.array("<i8", nc) if nc else None
    if mode == 0 and nc != no:
        raise FormatError("class count does not match output count", r.pos)
    trees = []
    for _ in range(r.unpack("I")):
        at = r.pos
        n = r.unpack("I")
        rec = r.array(_NODE, n)
        value = r.array("<f4", n * no).reshape(n, no)
        feat = np.where(rec["feature"] == 0xFFFF, LEAF, rec["feature"].astype(np.int32)).astype(np.int32)
        internal = feat != LEAF
        if n == 0 or np.any(feat[internal] >= nf) or np.any(
            (rec["left"][internal] <= 0) | (rec["left"][internal] >= n)
            | (rec["right"][internal] <= 0) | (rec["right"][internal] >= n)
        ):
            raise FormatError("corrupt tree node table", at)
        trees.append(Tree(feat, rec["threshold"].astype(np.float32), rec["left"].astype(np.int32),
                          rec["right"].astype(np.int32), value.astype(np.float32)))
    if r.pos != len(buf):
        raise FormatError("trailing bytes after last tree", r.pos)
    name = "classification" if mode == 0 else "regression"
    return ForestModel(name, nf, no, trees, seed, classes, oob)


def store_forest(model: ForestModel, path) -> Path:
    p = Path(path)
    p.parent.mkdir(parents=True, exist_ok=True)
    p.write_bytes(forest_bytes(model))
    return p


def load_forest(path) -> ForestModel:
    return forest_from_bytes(Path(path).read_bytes())


# ---- manifests, json, overlays ---------------------------------------------

def sha256_file(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def write_json(obj, path) -> Path:
    p = Path(path)
    p.parent.mkdir(parents=True, exist_ok=True)
    p.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")
    return p


def write_manifest(root, files, path=None, extra=None) -> Path:
    """Manifest of ``files`` (relative to ``root``) with byte sizes and sha256 digests."""
    root = Path(root)
    entries = []
    for f in sorted({Path(f).resolve() for f in files}):
        entries.append({"path": str(f.relative_to(root.resolve())), "bytes": f.stat().st_size,
                        "sha256": sha256_file(f)})
    doc = {"files": entries}
    if extra:
        doc.update(extra)
    return write_json(doc, path or root / "manifest.json")


def verify_manifest(path) -> list:
    """Paths whose current hash no longer matches the manifest."""
    p = Path(path)
    doc = json.loads(p.read_text())
    return [e["path"] for e in doc["files"]
            if not (p.parent / e["path"]).exists() or sha256_file(p.parent / e["path"]) != e["sha256"]]


def _contour(mask2d):
    from scipy import ndimage
    m = mask2d.astype(bool)
    return m & ~ndimage.binary_erosion(m, border_value=0)


def write_overlay(path, ct_slice, gt=None, pred=None, window=(-160.0, 240.0)) -> Path:
    """PPM of a windowed CT slice (x right, y down) with gt contour in green and prediction in red.

    Without masks a PGM is written instead.
    """
    lo, hi = window
    img = np.clip((np.asarray(ct_slice, dtype=np.float64) - lo) / (hi - lo), 0, 1)
    gray = np.floor(255 * img + 0.5).astype(np.uint8).T  # rows = y
    p = Path(path)
    p.parent.mkdir(parents=True, exist_ok=True)
    h, w = gray.shape
    if gt is None and pred is None:
        p.write_bytes(f"P5\n{w} {h}\n255\n".encode() + gray.tobytes())
        return p
    rgb = np.repeat(gray[:, :, None], 3, axis=2)
    if gt is not None:
        rgb[_contour(np.asarray(gt).T)] = (0, 255, 0)
    if pred is not None:
        rgb[_contour(np.asarray(pred).T)] = (255, 0, 0)
    p.write_bytes(f"P6\n{w} {h}\n255\n".encode() + rgb.tobytes())
    return p


# ---- cases and boxes -------------------------------------------------------

def store_case(case, directory) -> list:
    """``<dir>/ct``, ``gt_interior`` and ``gt_boundary`` volumes plus ``case.json``; returns files."""
    d = Path(directory)
    files = []
    for name in ("ct", "gt_interior", "gt_boundary"):
        files += store_volume(getattr(case, name), d / name)
    files.append(write_json({"id": case.id, "meta": case.meta}, d / "case.json"))
    return files


def load_case(directory):
    from .phantom import Case

    d = Path(directory)
    try:
        info = json.loads((d / "case.json").read_text())
    except (OSError, ValueError) as e:
        raise FormatError(f"cannot read {d / 'case.json'}: {e}", 0) from None
    vols = {n: load_volume(d / n) for n in ("ct", "gt_interior", "gt_boundary")}
    return Case(str(info.get("id", d.name)), vols["ct"], vols["gt_interior"], vols["gt_boundary"], info.get("meta", {}))


def load_corpus(directory) -> list:
    """Every case directory below ``directory`` (sorted by name)."""
    root = Path(directory)
    dirs = sorted(p.parent for p in root.glob("*/case.json"))
    if not dirs:
        raise FormatError(f"no case directories under {root}", 0)
    return [load_case(p) for p in dirs]


def store_bbox(box, path, extra=None) -> Path:
    doc = box.to_json()
    if extra:
        doc.update(extra)
    return write_json(doc, path)


def load_bbox(path):
    from .volume import BBox3

    try:
        return BBox3.from_json(json.loads(Path(path).read_text()))
    except (OSError, ValueError, KeyError, TypeError) as e:
        raise FormatError(f"cannot read box {path}: {e}", 0) from None
