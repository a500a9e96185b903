"""Core data types and bit-exact file formats (PGM images/masks, tensor container)."""

from __future__ import annotations

import hashlib
import json
import re
import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import CapacityError, ContractError, FormatError

MADC_MAGIC = b"MADC"
MADC_VERSION = 1
MAX_TENSOR_ELEMS = 2**31  # refuse absurd dim products before allocating

FLOW_NORM_TOL = 1e-6


def _locked(arr: np.ndarray, dtype) -> np.ndarray:
    """Contiguous copy with the write flag cleared; types are immutable after construction."""
    out = np.ascontiguousarray(arr, dtype=dtype)
    if out is arr:
        out = out.copy()
    out.flags.writeable = False
    return out


@dataclass(frozen=True)
class Image:
    """Grayscale intensity raster, float32 in [0, 1]."""

    data: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "data", _locked(self.data, np.float32))
        d = self.data
        if d.ndim != 2 or d.shape[0] < 8 or d.shape[1] < 8:
            raise ContractError(f"image must be 2-d with sides >= 8, got shape {d.shape}")
        if not np.all(np.isfinite(d)):
            raise ContractError("image contains non-finite values")
        if d.min() < 0.0 or d.max() > 1.0:
            raise ContractError("image values must lie in [0, 1]")

    @property
    def h(self) -> int:
        return self.data.shape[0]

    @property
    def w(self) -> int:
        return self.data.shape[1]


def relabel(raw: np.ndarray) -> np.ndarray:
    """Map nonzero labels to 1..N in row-major first-appearance order; 0 stays background."""
    flat = np.ascontiguousarray(raw).ravel()
    values, first = np.unique(flat, return_index=True)
    nonzero = values[values != 0]
    if nonzero.size == 0:
        return np.zeros(raw.shape, dtype=np.uint32)
    order = np.argsort(first[values != 0], kind="stable")
    lut = np.zeros(int(flat.max()) + 1, dtype=np.uint32)
    lut[nonzero[order]] = np.arange(1, nonzero.size + 1, dtype=np.uint32)
    return lut[flat].reshape(raw.shape)


@dataclass(frozen=True)
class InstanceMask:
    """Per-pixel instance labels: 0 = background, 1..N = cells (contiguous ids)."""

    labels: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "labels", _locked(self.labels, np.uint32))
        lab = self.labels
        if lab.ndim != 2:
            raise ContractError(f"mask must be 2-d, got shape {lab.shape}")
        # every positive label 1..N must occupy at least one pixel (no gaps)
        uniq = np.unique(lab)
        positive = uniq[uniq > 0]
        n = int(lab.max())
        if positive.size != n or (positive.size and (positive[0] != 1 or positive[-1] != n)):
            raise ContractError("mask labels must form a gap-free set {0,1,..,N}")

    @classmethod
    def from_raw(cls, raw: np.ndarray) -> "InstanceMask":
        """Repair arbitrary non-negative labels into a valid contiguous mask."""
        return cls(relabel(raw))

    @property
    def h(self) -> int:
        return self.labels.shape[0]

    @property
    def w(self) -> int:
        return self.labels.shape[1]

    @property
    def n_instances(self) -> int:
        return int(self.labels.max())


@dataclass(frozen=True)
class TargetField:
    """Per-pixel supervision: distance d, unit flow (gx, gy), boundary b."""

    d: np.ndarray
    gx: np.ndarray
    gy: np.ndarray
    b: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "d", _locked(self.d, np.float32))
        object.__setattr__(self, "gx", _locked(self.gx, np.float32))
        object.__setattr__(self, "gy", _locked(self.gy, np.float32))
        object.__setattr__(self, "b", _locked(self.b, np.uint8))
        shapes = {self.d.shape, self.gx.shape, self.gy.shape, self.b.shape}
        if len(shapes) != 1 or self.d.ndim != 2:
            raise ContractError("target grids must share one 2-d shape")
        if not (np.all(np.isfinite(self.d)) and np.all(np.isfinite(self.gx)) and np.all(np.isfinite(self.gy))):
            raise ContractError("target fields contain non-finite values")
        if self.d.min() < 0:
            raise ContractError("distance field must be non-negative")
        norm = np.hypot(self.gx.astype(np.float64), self.gy.astype(np.float64))
        ok = (norm <= FLOW_NORM_TOL) | (np.abs(norm - 1.0) <= FLOW_NORM_TOL)
        if not np.all(ok):
            raise ContractError("flow vectors must have l2 norm 0 or 1 (+-1e-6)")
        if not np.all(np.isin(self.b, (0, 1))):
            raise ContractError("boundary grid must be binary")
        if np.any((self.b == 1) & (self.d <= 0)):
            raise ContractError("boundary pixels must be cell pixels (d > 0)")

    @property
    def shape(self):
        return self.d.shape

    def flow(self) -> np.ndarray:
        """(h, w, 2) stack of (gx, gy)."""
        return np.stack([self.gx, self.gy], axis=-1)


class FeatureMap:
    """Network output: phi (distance), u = (u1, u2) (flow), z (boundary logit)."""

    def __init__(self, arr: np.ndarray):
        arr = np.ascontiguousarray(arr)
        if arr.ndim != 3 or arr.shape[2] != 4:
            raise ContractError(f"feature map must be (h, w, 4), got {arr.shape}")
        if not np.all(np.isfinite(arr)):
            raise ContractError("feature map contains non-finite values")
        self.arr = arr

    @classmethod
    def from_parts(cls, phi, u, z) -> "FeatureMap":
        return cls(np.concatenate([np.asarray(phi)[..., None], np.asarray(u), np.asarray(z)[..., None]], axis=-1))

    @property
    def h(self) -> int:
        return self.arr.shape[0]

    @property
    def w(self) -> int:
        return self.arr.shape[1]

    @property
    def phi(self) -> np.ndarray:
        return self.arr[..., 0]

    @property
    def u(self) -> np.ndarray:
        return self.arr[..., 1:3]

    @property
    def z(self) -> np.ndarray:
        return self.arr[..., 3]


@dataclass
class Dataset:
    """A named list of (Image, InstanceMask) pairs."""

    items: list
    name: str
    split: str = "train"

    def __post_init__(self):
        if self.split not in ("train", "test"):
            raise ContractError(f"split must be train or test, got {self.split!r}")
        if not self.items:
            raise ContractError("dataset must be nonempty")
        for img, msk in self.items:
            if (img.h, img.w) != (msk.h, msk.w):
                raise ContractError("image/mask shape mismatch inside dataset item")

    def __len__(self) -> int:
        return len(self.items)


@dataclass
class Checkpoint:
    """Named parameter tensors plus optimizer state, config digest, and epoch counter."""

    params: dict
    opt: dict = field(default_factory=dict)
    config_digest: bytes = b"\x00" * 32
    epoch: int = 0
    meta: dict = field(default_factory=dict)  # small ints describing the model (levels, base_channels)

    def __post_init__(self):
        if len(self.config_digest) != 32:
            raise ContractError("config digest must be exactly 32 bytes")


def config_digest(obj) -> bytes:
    """32-byte sha256 of a canonical-JSON rendering of a config mapping."""
    text = json.dumps(obj, sort_keys=True, separators=(",", ":"), default=str)
    return hashlib.sha256(text.encode()).digest()


# ---------------------------------------------------------------------------
# PGM (P5) reader/writer.  maxval 255 -> Image, maxval 65535 -> InstanceMask.


def _parse_pgm_header(buf: bytes):
    # token scanner honoring '#' comments; returns (w, h, maxval, payload offset)
    pos = 0
    if buf[:2] != b"P5":
        raise FormatError("not a binary PGM: missing P5 magic at byte 0")
    pos = 2
    fields = []
    while len(fields) < 3:
        while pos < len(buf) and buf[pos : pos + 1].isspace():
            pos += 1
        if pos < len(buf) and buf[pos : pos + 1] == b"#":
            while pos < len(buf) and buf[pos : pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(buf) and not buf[pos : pos + 1].isspace():
            pos += 1
        tok = buf[start:pos]
        if not re.fullmatch(rb"\d+", tok):
            raise FormatError(f"bad PGM header token {tok!r} at byte {start}")
        fields.append(int(tok))
    if pos >= len(buf):
        raise FormatError(f"PGM header ends prematurely at byte {pos}")
    pos += 1  # single whitespace byte before payload
    w, h, maxval = fields
    if w <= 0 or h <= 0:
        raise FormatError(f"non-positive PGM dimensions {w}x{h} (header ending at byte {pos})")
    return w, h, maxval, pos


def read_pgm(path):
    """Read a binary PGM: returns an Image (maxval 255) or an InstanceMask (maxval 65535)."""
    with open(path, "rb") as f:
        buf = f.read()
    w, h, maxval, pos = _parse_pgm_header(buf)
    if maxval not in (255, 65535):
        raise FormatError(f"unsupported PGM maxval {maxval} (byte {pos}); expected 255 or 65535")
    itemsize = 1 if maxval == 255 else 2
    expected = w * h * itemsize
    payload = buf[pos : pos + expected]
    if len(payload) != expected:
        raise FormatError(
            f"truncated PGM payload at byte {pos}: expected {expected} bytes, got {len(payload)}"
        )
    if maxval == 255:
        raw = np.frombuffer(payload, dtype=np.uint8).reshape(h, w)
        return Image(raw.astype(np.float32) / 255.0)
    raw = np.frombuffer(payload, dtype=">u2").reshape(h, w)
    return InstanceMask.from_raw(raw.astype(np.uint32))


def write_pgm(obj, path) -> None:
    """Write an Image (maxval 255, round-half-up) or InstanceMask (maxval 65535) as binary PGM."""
    if isinstance(obj, Image):
        payload = np.floor(obj.data.astype(np.float64) * 255.0 + 0.5).astype(np.uint8)
        header = f"P5\n{obj.w} {obj.h}\n255\n".encode()
        body = payload.tobytes()
    elif isinstance(obj, InstanceMask):
        if obj.n_instances > 65535:
            raise CapacityError(f"mask has {obj.n_instances} instances; PGM caps at 65535")
        header = f"P5\n{obj.w} {obj.h}\n65535\n".encode()
        body = obj.labels.astype(">u2").tobytes()
    else:
        raise ContractError(f"write_pgm expects Image or InstanceMask, got {type(obj).__name__}")
    with open(path, "wb") as f:
        f.write(header + body)


# ---------------------------------------------------------------------------
# "MADC" tensor container: magic, version u32, count u32; per tensor the name,
# dims, and a little-endian f32 payload.  Tensors are written in lexicographic
# name order so files are bit-reproducible.


def write_tensors(path, tensors: dict) -> None:
    names = sorted(tensors)
    blob = [MADC_MAGIC, struct.pack("<II", MADC_VERSION, len(names))]
    for name in names:
        arr = np.ascontiguousarray(tensors[name], dtype="<f4")
        if arr.size > MAX_TENSOR_ELEMS:
            raise CapacityError(f"tensor {name!r} has {arr.size} elements; container caps at {MAX_TENSOR_ELEMS}")
        nb = name.encode()
        blob.append(struct.pack("<I", len(nb)))
        blob.append(nb)
        blob.append(struct.pack("<I", arr.ndim))
        blob.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        blob.append(arr.tobytes())
    with open(path, "wb") as f:
        f.write(b"".join(blob))


def read_tensors(path) -> dict:
    with open(path, "rb") as f:
        buf = f.read()
    if buf[:4] != MADC_MAGIC:
        raise FormatError(f"bad container magic {buf[:4]!r} at byte 0")
    if len(buf) < 12:
        raise FormatError(f"container header truncated: {len(buf)} bytes")
    version, count = struct.unpack_from("<II", buf, 4)
    if version != MADC_VERSION:
        raise FormatError(f"unsupported container version {version} at byte 4")
    pos = 12
    out = {}
    for _ in range(count):
        (nlen,) = struct.unpack_from("<I", buf, pos)
        pos += 4
        name = buf[pos : pos + nlen].decode()
        pos += nlen
        (ndim,) = struct.unpack_from("<I", buf, pos)
        pos += 4
        dims = struct.unpack_from(f"<{ndim}Q", buf, pos)
        pos += 8 * ndim
        size = int(np.prod(dims, dtype=np.float64)) if ndim else 1
        if size > MAX_TENSOR_ELEMS:
            raise CapacityError(f"tensor {name!r} dims {dims} overflow the element cap")
        nbytes = size * 4
        if pos + nbytes > len(buf):
            raise FormatError(f"truncated tensor payload for {name!r} at byte {pos}")
        out[name] = np.frombuffer(buf, dtype="<f4", count=size, offset=pos).reshape(dims).copy()
        pos += nbytes
    return out


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    tensors = dict(ckpt.params)
    for k, v in ckpt.opt.items():
        tensors[f"opt.{k}"] = v
    tensors["meta.epoch"] = np.array([ckpt.epoch], dtype=np.float32)
    tensors["meta.config_digest"] = np.frombuffer(ckpt.config_digest, dtype=np.uint8).astype(np.float32)
    for k, v in ckpt.meta.items():
        tensors[f"meta.{k}"] = np.array([v], dtype=np.float32)
    write_tensors(path, tensors)


def load_checkpoint(path) -> Checkpoint:
    tensors = read_tensors(path)
    params, opt, meta = {}, {}, {}
    epoch = 0
    digest = b"\x00" * 32
    for name, arr in tensors.items():
        if name == "meta.epoch":
            epoch = int(arr[0])
        elif name == "meta.config_digest":
            digest = arr.astype(np.uint8).tobytes()
        elif name.startswith("meta."):
            meta[name[5:]] = int(arr[0])
        elif name.startswith("opt."):
            opt[name[4:]] = arr
        else:
            params[name] = arr
    return Checkpoint(params=params, opt=opt, config_digest=digest, epoch=epoch, meta=meta)
