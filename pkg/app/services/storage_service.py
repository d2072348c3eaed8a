import os
import struct
import tempfile
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, Optional, Tuple

import numpy as np
import pandas as pd
from PIL import Image

from app.core.errors import ArtifactIOError, FormatError
from app.core.logger import logger

VERSION = 1
SINO_MAGIC = b"SINO"
IMGF_MAGIC = b"IMGF"
LMPT_MAGIC = b"LMPT"
CKPT_MAGIC = b"CKPT"
QSTA_MAGIC = b"QSTA"


@dataclass(eq=False)
class SinogramArtifact:
    values: np.ndarray
    mask: np.ndarray


@dataclass(eq=False)
class ImageArtifact:
    values: np.ndarray
    voxel_size_mm: float


# ---------------------------------------------------------------------------
# Low-level helpers
# ---------------------------------------------------------------------------

def atomic_write(path, payload: bytes):
    """Write bytes to a temp file next to `path`, then rename over it."""
    path = Path(path)
    if not path.parent.is_dir():
        raise ArtifactIOError(f"parent directory does not exist: {path.parent}")
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(payload)
        os.replace(tmp, path)
    except Exception as e:
        if os.path.exists(tmp):
            os.unlink(tmp)
        logger.error(f"Error writing artifact {path}: {e}")
        raise


class _Reader:
    """Cursor over a byte buffer that raises ArtifactIOError on truncation."""

    def __init__(self, data: bytes, path):
        self.data = data
        self.pos = 0
        self.path = path

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise ArtifactIOError(f"{self.path}: truncated, needed {n} bytes at offset {self.pos}")
        chunk = self.data[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def array(self, dtype: str, count: int) -> np.ndarray:
        size = np.dtype(dtype).itemsize * count
        return np.frombuffer(self.take(size), dtype=dtype).copy()

    def finish(self):
        if self.pos != len(self.data):
            raise ArtifactIOError(f"{self.path}: {len(self.data) - self.pos} bytes beyond declared payload")


def _read_bytes(path) -> bytes:
    try:
        return Path(path).read_bytes()
    except OSError as e:
        raise ArtifactIOError(f"cannot read {path}: {e}") from e


def _open(path, magic: bytes) -> _Reader:
    reader = _Reader(_read_bytes(path), path)
    found = reader.take(4) if len(reader.data) >= 4 else reader.data
    if found != magic:
        raise FormatError(f"{path}: expected magic {magic.decode()!r}, found {found.decode(errors='replace')!r}")
    (version,) = reader.unpack("<B")
    if version != VERSION:
        raise FormatError(f"{path}: expected version {VERSION}, found {version}")
    return reader


def _header(magic: bytes, shape: Tuple[int, ...]) -> bytes:
    return magic + struct.pack("<BI", VERSION, len(shape)) + struct.pack(f"<{len(shape)}I", *shape)


def _read_shape(reader: _Reader) -> Tuple[int, ...]:
    (ndim,) = reader.unpack("<I")
    return tuple(reader.unpack(f"<{ndim}I"))


# ---------------------------------------------------------------------------
# Formats
# ---------------------------------------------------------------------------

def write_sinogram(path, values: np.ndarray, mask: Optional[np.ndarray] = None):
    values = np.asarray(values, dtype="<f8")
    mask = np.ones(values.shape, dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
    atomic_write(path, _header(SINO_MAGIC, values.shape) + values.tobytes() + mask.astype("u1").tobytes())


def read_sinogram(path) -> SinogramArtifact:
    reader = _open(path, SINO_MAGIC)
    shape = _read_shape(reader)
    count = int(np.prod(shape))
    values = reader.array("<f8", count).reshape(shape)
    mask = reader.array("u1", count).reshape(shape).astype(bool)
    reader.finish()
    return SinogramArtifact(values=values, mask=mask)


def write_image(path, values: np.ndarray, voxel_size_mm: float):
    values = np.asarray(values, dtype="<f8")
    atomic_write(path, _header(IMGF_MAGIC, values.shape) + struct.pack("<d", voxel_size_mm) + values.tobytes())


def read_image(path) -> ImageArtifact:
    reader = _open(path, IMGF_MAGIC)
    shape = _read_shape(reader)
    (voxel,) = reader.unpack("<d")
    values = reader.array("<f8", int(np.prod(shape))).reshape(shape)
    reader.finish()
    return ImageArtifact(values=values, voxel_size_mm=voxel)


def write_listmode(path, events: np.ndarray, geometry_digest: bytes):
    events = np.asarray(events, dtype="<u2").reshape(-1, 4)
    if len(geometry_digest) != 16:
        raise FormatError(f"geometry digest must be 16 bytes, got {len(geometry_digest)}")
    head = LMPT_MAGIC + struct.pack("<B", VERSION) + geometry_digest + struct.pack("<I", events.shape[0])
    atomic_write(path, head + events.tobytes())


def read_listmode(path, geometry_digest: Optional[bytes] = None) -> np.ndarray:
    reader = _open(path, LMPT_MAGIC)
    digest = reader.take(16)
    if geometry_digest is not None and digest != geometry_digest:
        raise FormatError(f"{path}: listmode was recorded for a different scanner geometry")
    (n,) = reader.unpack("<I")
    events = reader.array("<u2", 4 * n).reshape(n, 4)
    reader.finish()
    return events


def write_checkpoint(path, blocks: Dict[str, np.ndarray]):
    parts = [CKPT_MAGIC, struct.pack("<BI", VERSION, len(blocks))]
    for name, value in blocks.items():
        raw = name.encode("utf-8")
        value = np.asarray(value, dtype="<f4")
        parts.append(struct.pack("<I", len(raw)) + raw)
        parts.append(struct.pack("<I", value.ndim) + struct.pack(f"<{value.ndim}I", *value.shape))
        parts.append(value.tobytes())
    atomic_write(path, b"".join(parts))


def read_checkpoint(path) -> Dict[str, np.ndarray]:
    reader = _open(path, CKPT_MAGIC)
    (count,) = reader.unpack("<I")
    blocks = {}
    for _ in range(count):
        (name_len,) = reader.unpack("<I")
        name = reader.take(name_len).decode("utf-8")
        shape = _read_shape(reader)
        blocks[name] = reader.array("<f4", int(np.prod(shape))).reshape(shape)
    reader.finish()
    return blocks


def write_quality_stats(path, mean: np.ndarray, cov: np.ndarray):
    mean = np.asarray(mean, dtype="<f8")
    cov = np.asarray(cov, dtype="<f8")
    n = mean.shape[0]
    if cov.shape != (n, n):
        raise FormatError(f"covariance {cov.shape} does not match mean length {n}")
    atomic_write(path, QSTA_MAGIC + struct.pack("<BI", VERSION, n) + mean.tobytes() + cov.tobytes())


def read_quality_stats(path) -> Tuple[np.ndarray, np.ndarray]:
    reader = _open(path, QSTA_MAGIC)
    (n,) = reader.unpack("<I")
    mean = reader.array("<f8", n)
    cov = reader.array("<f8", n * n).reshape(n, n)
    reader.finish()
    return mean, cov


def to_uint8(image: np.ndarray) -> np.ndarray:
    image = np.asarray(image, dtype=np.float64)
    lo, hi = float(image.min()), float(image.max())
    if hi <= lo:
        return np.zeros(image.shape, dtype=np.uint8)
    return np.round(255.0 * (image - lo) / (hi - lo)).astype(np.uint8)


def write_pgm_grid(path, images, columns: int = 4, pad: int = 2):
    """Tile 2-D images (each scaled to 0..255 on its own) into one PGM file."""
    tiles = [to_uint8(im) for im in images]
    if not tiles:
        raise ArtifactIOError("no images to write")
    h = max(t.shape[0] for t in tiles)
    w = max(t.shape[1] for t in tiles)
    columns = min(columns, len(tiles))
    rows = -(-len(tiles) // columns)
    canvas = np.zeros((rows * (h + pad) - pad, columns * (w + pad) - pad), dtype=np.uint8)
    for k, tile in enumerate(tiles):
        r, c = divmod(k, columns)
        canvas[r * (h + pad):r * (h + pad) + tile.shape[0], c * (w + pad):c * (w + pad) + tile.shape[1]] = tile
    path = Path(path)
    if not path.parent.is_dir():
        raise ArtifactIOError(f"parent directory does not exist: {path.parent}")
    Image.fromarray(canvas).save(path, format="PPM")


class StorageService:
    """Lays out and reads back the artifacts of one run directory."""

    def __init__(self, out_dir):
        self.root = Path(out_dir)
        for sub in ("phantoms", "sinograms", "completed", "recon", "refined", "models", "figures"):
            (self.root / sub).mkdir(parents=True, exist_ok=True)

    def path(self, kind: str, name: str) -> Path:
        return self.root / kind / name

    def exists(self, kind: str, name: str) -> bool:
        return self.path(kind, name).exists()

    # volume-level helpers
    def save_volume_image(self, kind: str, name: str, values: np.ndarray, voxel_mm: float) -> str:
        target = self.path(kind, name)
        write_image(target, values, voxel_mm)
        logger.debug(f"Saved image artifact: {target}")
        return str(target)

    def load_volume_image(self, kind: str, name: str) -> ImageArtifact:
        return read_image(self.path(kind, name))

    def save_sinogram(self, kind: str, name: str, values: np.ndarray, mask: Optional[np.ndarray] = None) -> str:
        target = self.path(kind, name)
        write_sinogram(target, values, mask)
        logger.debug(f"Saved sinogram artifact: {target}")
        return str(target)

    def load_sinogram(self, kind: str, name: str) -> SinogramArtifact:
        return read_sinogram(self.path(kind, name))

    def save_frame(self, name: str, frame: pd.DataFrame) -> str:
        target = self.root / name
        atomic_write(target, frame.to_csv(index=False).encode("utf-8"))
        logger.info(f"Wrote {len(frame)} rows to {target}")
        return str(target)

    def load_frame(self, name: str) -> pd.DataFrame:
        target = self.root / name
        if not target.exists():
            raise ArtifactIOError(f"missing table {target}; run the earlier stages first")
        return pd.read_csv(target)
