"""Binary containers: scene files, tensor files, and PPM/PGM previews.

All multi-byte values are little-endian.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .scene import Camera, Gaussians, IdsField, Scene

SCENE_MAGIC = b"IDSF"
SCENE_VERSION = 1
TENSOR_MAGIC = b"TNSR"
TENSOR_VERSION = 1

_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8"), 2: np.dtype("<i8"), 3: np.dtype("u1")}
_DTYPE_CODES = {v: k for k, v in _DTYPES.items()}


class FormatError(ValueError):
    """Base class for unreadable container files."""


class MalformedHeader(FormatError):
    pass


class VersionMismatch(FormatError):
    pass


class TruncatedPayload(FormatError):
    pass


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise TruncatedPayload(f"need {n} bytes at offset {self.pos}, file has {len(self.buf)}")
        out = self.buf[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def array(self, dtype, shape) -> np.ndarray:
        dtype = np.dtype(dtype)
        count = int(np.prod(shape, dtype=np.int64))
        return np.frombuffer(self.take(count * dtype.itemsize), dtype=dtype).reshape(shape).copy()


# --------------------------------------------------------------------- scene


def scene_to_bytes(scene: Scene) -> bytes:
    g, f = scene.gaussians, scene.idsf
    parts = [SCENE_MAGIC, struct.pack("<III", SCENE_VERSION, len(g), f.dim)]
    for arr in (g.positions, g.rotations, g.log_scales, g.opacity_logits, g.colors, f.features):
        parts.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    parts.append(np.ascontiguousarray(f.ids, dtype="<i8").tobytes())
    parts.append(struct.pack("<I", len(scene.cameras)))
    for cam in scene.cameras:
        parts.append(struct.pack("<II", cam.width, cam.height))
        vec = np.concatenate([[cam.fx, cam.fy, cam.cx, cam.cy], cam.R.ravel(), cam.t, [cam.near, cam.far]])
        parts.append(vec.astype("<f8").tobytes())
    for im in scene.train_images:
        parts.append(struct.pack("<II", im.shape[0], im.shape[1]))
        parts.append(np.ascontiguousarray(im, dtype="<f4").tobytes())
    return b"".join(parts)


def scene_from_bytes(buf: bytes) -> Scene:
    r = _Reader(buf)
    if len(buf) < 16 or r.take(4) != SCENE_MAGIC:
        raise MalformedHeader("not a scene container (bad magic)")
    version, n, dim = r.unpack("<III")
    if version != SCENE_VERSION:
        raise VersionMismatch(f"scene version {version}, expected {SCENE_VERSION}")
    positions = r.array("<f4", (n, 3))
    rotations = r.array("<f4", (n, 4))
    log_scales = r.array("<f4", (n, 3))
    logits = r.array("<f4", (n,))
    colors = r.array("<f4", (n, 3))
    features = r.array("<f4", (n, dim))
    ids = r.array("<i8", (n,))
    (n_cams,) = r.unpack("<I")
    cameras = []
    for _ in range(n_cams):
        w, h = r.unpack("<II")
        v = r.array("<f8", (18,))
        cameras.append(Camera(v[0], v[1], v[2], v[3], v[4:13].reshape(3, 3), v[13:16], w, h, v[16], v[17]))
    images = []
    for _ in range(n_cams):
        h, w = r.unpack("<II")
        images.append(r.array("<f4", (h, w, 3)))
    if r.pos != len(buf):
        raise FormatError(f"{len(buf) - r.pos} trailing bytes after scene payload")
    return Scene(
        Gaussians(positions, rotations, log_scales, logits, colors),
        IdsField(features.astype(np.float32), ids.astype(np.int64)),
        cameras,
        images,
    )


def save_scene(scene: Scene, path) -> None:
    Path(path).write_bytes(scene_to_bytes(scene))


def load_scene(path) -> Scene:
    return scene_from_bytes(Path(path).read_bytes())


# -------------------------------------------------------------------- tensor


def tensor_to_bytes(arr: np.ndarray) -> bytes:
    arr = np.asarray(arr)
    dtype = arr.dtype.newbyteorder("<") if arr.dtype.itemsize > 1 else arr.dtype
    if dtype not in _DTYPE_CODES:
        raise TypeError(f"unsupported tensor dtype {arr.dtype}")
    header = TENSOR_MAGIC + struct.pack("<IBB", TENSOR_VERSION, _DTYPE_CODES[dtype], arr.ndim)
    header += struct.pack(f"<{arr.ndim}Q", *arr.shape)
    return header + np.ascontiguousarray(arr, dtype=dtype).tobytes()


def tensor_from_bytes(buf: bytes) -> np.ndarray:
    r = _Reader(buf)
    if len(buf) < 10 or r.take(4) != TENSOR_MAGIC:
        raise MalformedHeader("not a tensor file (bad magic)")
    version, code, rank = r.unpack("<IBB")
    if version != TENSOR_VERSION:
        raise VersionMismatch(f"tensor version {version}, expected {TENSOR_VERSION}")
    if code not in _DTYPES:
        raise MalformedHeader(f"unknown dtype code {code}")
    dims = r.unpack(f"<{rank}Q") if rank else ()
    dtype = _DTYPES[code]
    expected = int(np.prod(dims, dtype=np.int64)) * dtype.itemsize
    if len(buf) - r.pos != expected:
        raise TruncatedPayload(f"payload is {len(buf) - r.pos} bytes, dims {dims} need {expected}")
    return r.array(dtype, dims)


def save_tensor(path, arr) -> None:
    Path(path).write_bytes(tensor_to_bytes(arr))


def load_tensor(path) -> np.ndarray:
    return tensor_from_bytes(Path(path).read_bytes())


def save_tensors(directory, tensors: dict) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for name, arr in tensors.items():
        save_tensor(directory / f"{name}.tnsr", arr)


def load_tensors(directory) -> dict:
    return {p.stem: load_tensor(p) for p in sorted(Path(directory).glob("*.tnsr"))}


# ----------------------------------------------------------------- PPM / PGM


def _to_u8(img) -> np.ndarray:
    img = np.asarray(img)
    if img.dtype == np.uint8:
        return img
    if img.dtype == bool:
        return img.astype(np.uint8) * 255
    return np.clip(np.round(np.asarray(img, np.float64) * 255.0), 0, 255).astype(np.uint8)


def write_ppm(path, img) -> None:
    """8-bit binary PPM (P6) from an H x W x 3 float image in [0, 1]."""
    data = _to_u8(img)
    h, w, _ = data.shape
    Path(path).write_bytes(f"P6\n{w} {h}\n255\n".encode() + data.tobytes())


def write_pgm(path, img) -> None:
    """8-bit binary PGM (P5); boolean masks map to 0/255."""
    data = _to_u8(img)
    h, w = data.shape
    Path(path).write_bytes(f"P5\n{w} {h}\n255\n".encode() + data.tobytes())


def _read_pnm(path, magic: bytes, channels: int) -> np.ndarray:
    buf = Path(path).read_bytes()
    tokens, pos = [], 0
    while len(tokens) < 4:
        while pos < len(buf) and buf[pos : pos + 1].isspace():
            pos += 1
        if buf[pos : pos + 1] == b"#":
            pos = buf.index(b"\n", pos) + 1
            continue
        start = pos
        while pos < len(buf) and not buf[pos : pos + 1].isspace():
            pos += 1
        tokens.append(buf[start:pos])
    if tokens[0] != magic or int(tokens[3]) != 255:
        raise MalformedHeader(f"expected 8-bit {magic.decode()} image")
    w, h = int(tokens[1]), int(tokens[2])
    pos += 1
    data = np.frombuffer(buf[pos : pos + w * h * channels], dtype=np.uint8)
    if data.size != w * h * channels:
        raise TruncatedPayload("image payload too short")
    return data.reshape((h, w, channels) if channels > 1 else (h, w)).copy()


def read_ppm(path) -> np.ndarray:
    return _read_pnm(path, b"P6", 3).astype(np.float32) / 255.0


def read_pgm(path) -> np.ndarray:
    return _read_pnm(path, b"P5", 1)
