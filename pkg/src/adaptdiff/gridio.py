"""Bit-exact grid container and dataset manifests.

Grid file layout (all integers little-endian)::

    offset 0   4 bytes  magic b"AVDT"
    offset 4   u8       version (1)
    offset 5   u8       kind (0 = float32 image in [0, 1], 1 = uint8 mask in {0, 1})
    offset 6   u32      height
    offset 10  u32      width
    offset 14  payload  row-major, 4 bytes per pixel (kind 0) or 1 byte (kind 1)
"""

from __future__ import annotations

import csv
import os
import struct
import tempfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

MAGIC = b"AVDT"
VERSION = 1
KIND_IMAGE = 0
KIND_MASK = 1
HEADER = struct.Struct("<4sBBII")
PROVENANCES = ("real", "pseudo", "synthetic")


class GridFormatError(ValueError):
    def __init__(self, path, offset: int, message: str):
        super().__init__(f"{path}: {message} (byte offset {offset})")
        self.offset = offset


def atomic_write(path: str | os.PathLike, data: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_text(path, text: str) -> None:
    atomic_write(path, text.encode("utf-8"))


def encode_grid(grid: np.ndarray, kind: int | None = None) -> bytes:
    grid = np.asarray(grid)
    if grid.ndim != 2:
        raise ValueError(f"grids are 2-d, got shape {grid.shape}")
    if kind is None:
        kind = KIND_MASK if grid.dtype in (np.bool_, np.uint8) else KIND_IMAGE
    if kind == KIND_MASK:
        payload = grid.astype(np.uint8)
        if np.any(payload > 1):
            raise ValueError("mask values must be 0 or 1")
    elif kind == KIND_IMAGE:
        payload = grid.astype("<f4")
        if not np.all((payload >= 0) & (payload <= 1)):
            raise ValueError("image values must lie in [0, 1]")
    else:
        raise ValueError(f"unknown grid kind {kind}")
    h, w = grid.shape
    return HEADER.pack(MAGIC, VERSION, kind, h, w) + np.ascontiguousarray(payload).tobytes()


def decode_grid(data: bytes, path="<bytes>") -> np.ndarray:
    if len(data) < HEADER.size:
        raise GridFormatError(path, len(data), f"header needs {HEADER.size} bytes, file has {len(data)}")
    magic, version, kind, h, w = HEADER.unpack_from(data)
    if magic != MAGIC:
        raise GridFormatError(path, 0, f"bad magic {magic!r}")
    if version != VERSION:
        raise GridFormatError(path, 4, f"unsupported version {version}")
    if kind not in (KIND_IMAGE, KIND_MASK):
        raise GridFormatError(path, 5, f"unknown kind {kind}")
    itemsize = 4 if kind == KIND_IMAGE else 1
    expected = h * w * itemsize
    actual = len(data) - HEADER.size
    if actual != expected:
        raise GridFormatError(
            path, HEADER.size, f"payload length mismatch: expected {expected} bytes, got {actual}"
        )
    if kind == KIND_IMAGE:
        grid = np.frombuffer(data, dtype="<f4", offset=HEADER.size).reshape(h, w)
        bad = ~((grid >= 0) & (grid <= 1))
    else:
        grid = np.frombuffer(data, dtype=np.uint8, offset=HEADER.size).reshape(h, w)
        bad = grid > 1
    if bad.any():
        first = int(np.flatnonzero(bad.ravel())[0])
        raise GridFormatError(path, HEADER.size + first * itemsize, "value out of range")
    return grid.astype(np.float32 if kind == KIND_IMAGE else np.uint8)


def write_grid(path: str | os.PathLike, grid: np.ndarray, kind: int | None = None) -> None:
    """Write an image (float, stored as float32) or mask (bool/uint8) grid."""
    atomic_write(path, encode_grid(grid, kind))


def read_grid(path: str | os.PathLike) -> np.ndarray:
    """float32 array for images, uint8 array for masks."""
    return decode_grid(Path(path).read_bytes(), path)


def write_pgm(path, grid: np.ndarray) -> None:
    """8-bit binary PGM copy of a [0, 1] image or a {0, 1} mask, for viewing."""
    g = np.asarray(grid, dtype=np.float64)
    pixels = np.clip(np.round(g * 255.0), 0, 255).astype(np.uint8)
    h, w = pixels.shape
    atomic_write(path, f"P5\n{w} {h}\n255\n".encode("ascii") + pixels.tobytes())


# -- manifests -------------------------------------------------------------------


@dataclass
class Record:
    id: str
    image: str
    mask: str | None
    domain: str
    provenance: str = "real"


@dataclass
class Manifest:
    """Ordered records whose paths are relative to ``root``."""

    root: Path
    records: list[Record] = field(default_factory=list)

    FILENAME = "manifest.tsv"

    def __len__(self) -> int:
        return len(self.records)

    def __iter__(self):
        return iter(self.records)

    def validate(self) -> None:
        ids = [r.id for r in self.records]
        if len(set(ids)) != len(ids):
            raise ValueError(f"{self.root}: duplicate record ids")
        shape = None
        for r in self.records:
            if r.provenance not in PROVENANCES:
                raise ValueError(f"record {r.id}: unknown provenance {r.provenance!r}")
            for p in (r.image, r.mask):
                if p is None:
                    continue
                g = read_grid(self.root / p)
                if shape is None:
                    shape = g.shape
                elif g.shape != shape:
                    raise ValueError(f"record {r.id}: resolution {g.shape} differs from {shape}")

    def images(self) -> np.ndarray:
        return np.stack([read_grid(self.root / r.image) for r in self.records])

    def masks(self) -> np.ndarray:
        missing = [r.id for r in self.records if r.mask is None]
        if missing:
            raise ValueError(f"{self.root}: records without masks: {missing[:5]}")
        return np.stack([read_grid(self.root / r.mask) for r in self.records])

    @property
    def resolution(self) -> tuple[int, int] | None:
        if not self.records:
            return None
        return read_grid(self.root / self.records[0].image).shape

    def save(self) -> Path:
        import io

        buf = io.StringIO()
        writer = csv.writer(buf, delimiter="\t", lineterminator="\n")
        writer.writerow(["id", "image", "mask", "domain", "provenance"])
        for r in self.records:
            writer.writerow([r.id, r.image, r.mask or "", r.domain, r.provenance])
        path = Path(self.root) / self.FILENAME
        atomic_write_text(path, buf.getvalue())
        return path

    @classmethod
    def load(cls, root: str | os.PathLike) -> "Manifest":
        root = Path(root)
        path = root / cls.FILENAME if root.is_dir() else root
        with open(path, newline="") as fh:
            rows = list(csv.DictReader(fh, delimiter="\t"))
        records = [
            Record(row["id"], row["image"], row["mask"] or None, row["domain"], row["provenance"])
            for row in rows
        ]
        m = cls(path.parent, records)
        m.validate()
        return m

    @classmethod
    def write(
        cls,
        root: str | os.PathLike,
        domain: str,
        images: np.ndarray,
        masks: np.ndarray | None = None,
        provenance: str = "real",
        ids: list[str] | None = None,
        export_pgm: bool = False,
    ) -> "Manifest":
        """Persist a stack of images (and optional masks) as a new manifest."""
        root = Path(root)
        n = len(images) if images is not None else len(masks)
        ids = ids or [f"{domain}_{i:04d}" for i in range(n)]
        records = []
        for i, rid in enumerate(ids):
            img_rel = mask_rel = None
            if images is not None:
                img_rel = f"{rid}.img.avdt"
                write_grid(root / img_rel, np.asarray(images[i], dtype=np.float32), KIND_IMAGE)
                if export_pgm:
                    write_pgm(root / "pgm" / f"{rid}.img.pgm", images[i])
            if masks is not None:
                mask_rel = f"{rid}.mask.avdt"
                write_grid(root / mask_rel, np.asarray(masks[i], dtype=np.uint8), KIND_MASK)
                if export_pgm:
                    write_pgm(root / "pgm" / f"{rid}.mask.pgm", masks[i])
            records.append(Record(rid, img_rel, mask_rel, domain, provenance))
        m = cls(root, records)
        m.save()
        return m
