"""Embedding matrices, their binary file format, and manifests.

File layout (little-endian)::

    magic "APEB" | version u32 = 1 | dtype u8 = 1 (f32) | normalized u8
    | flags u16 | rows u64 | dim u64 | payload rows*dim f32, row-major

``flags`` is zero for embedding data. Non-zero bits mark other payload kinds
stored in the same container (see :mod:`actprompt.adapter`).
"""

from __future__ import annotations

import hashlib
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from ._io import atomic_write_bytes, read_json, write_json
from .errors import (
    BadMagic,
    ChecksumMismatch,
    DimMismatch,
    EmptyMatrix,
    FormatError,
    IoError,
    ManifestError,
    NonFiniteValue,
    NotNormalized,
    ShapeMismatch,
    TruncatedFile,
    ZeroNormRow,
)

MAGIC = b"APEB"
FORMAT_VERSION = 1
DTYPE_F32 = 1
HEADER = struct.Struct("<4sIBBHQQ")

FLAG_ADAPTER = 0x1
FLAG_ADAPTER_BIAS = 0x2

NORM_TOL = 1e-5
ZERO_NORM = 1e-12

KIND_VIDEO_FRAMES = "video_frames"
KIND_PROMPT_TEXTS = "prompt_texts"
MANIFEST_KINDS = (KIND_VIDEO_FRAMES, KIND_PROMPT_TEXTS)

_F32 = np.dtype("<f4")


def _first_nonfinite(arr: np.ndarray) -> int:
    bad = np.flatnonzero(~np.isfinite(arr))
    return int(bad[0]) if bad.size else -1


@dataclass(frozen=True, eq=False)
class EmbeddingMatrix:
    """Dense row-major float32 matrix of embeddings (one row per frame or prompt).

    The stored array is a read-only private copy, so instances can be shared
    between threads freely.
    """

    data: np.ndarray
    normalized: bool = False

    def __post_init__(self) -> None:
        arr = np.array(self.data, dtype=_F32, order="C", copy=True)
        if arr.ndim != 2:
            raise ShapeMismatch(f"expected a 2-D matrix, got shape {arr.shape}")
        if arr.shape[0] < 1 or arr.shape[1] < 1:
            raise EmptyMatrix(f"matrix must have rows >= 1 and dim >= 1, got {arr.shape}")
        pos = _first_nonfinite(arr)
        if pos >= 0:
            raise NonFiniteValue(f"non-finite value at row {pos // arr.shape[1]}, col {pos % arr.shape[1]}")
        if self.normalized:
            norms = row_norms(arr)
            worst = int(np.argmax(np.abs(norms - 1.0)))
            if abs(norms[worst] - 1.0) > NORM_TOL:
                raise NotNormalized(f"row {worst} has norm {norms[worst]:.8f}")
        arr.setflags(write=False)
        object.__setattr__(self, "data", arr)
        object.__setattr__(self, "normalized", bool(self.normalized))

    @property
    def rows(self) -> int:
        return self.data.shape[0]

    @property
    def dim(self) -> int:
        return self.data.shape[1]

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, EmbeddingMatrix):
            return NotImplemented
        # bit-level comparison, so -0.0 != 0.0 and NaN payloads would matter
        return (
            self.normalized == other.normalized
            and self.data.shape == other.data.shape
            and np.array_equal(self.data.view(np.uint32), other.data.view(np.uint32))
        )

    __hash__ = None  # type: ignore[assignment]

    def __repr__(self) -> str:
        return f"EmbeddingMatrix(rows={self.rows}, dim={self.dim}, normalized={self.normalized})"


def row_norms(arr: np.ndarray) -> np.ndarray:
    a = np.asarray(arr, dtype=np.float64)
    return np.sqrt((a * a).sum(axis=-1))


def l2_normalize(m: EmbeddingMatrix | np.ndarray) -> EmbeddingMatrix:
    """Divide every row by its L2 norm (computed in float64)."""
    arr = m.data if isinstance(m, EmbeddingMatrix) else np.asarray(m)
    a = np.asarray(arr, dtype=np.float64)
    if a.ndim != 2 or a.shape[0] < 1 or a.shape[1] < 1:
        raise EmptyMatrix(f"cannot normalize shape {a.shape}")
    norms = np.sqrt((a * a).sum(axis=1))
    bad = np.flatnonzero(~(norms > ZERO_NORM))
    if bad.size:
        raise ZeroNormRow(int(bad[0]))
    return EmbeddingMatrix(a / norms[:, None], normalized=True)


def _encode(arr: np.ndarray, normalized: bool, flags: int) -> bytes:
    arr = np.ascontiguousarray(arr, dtype=_F32)
    rows, dim = arr.shape
    head = HEADER.pack(MAGIC, FORMAT_VERSION, DTYPE_F32, int(normalized), flags, rows, dim)
    return head + arr.tobytes(order="C")


def content_checksum(blob: bytes) -> str:
    """64-bit BLAKE2b digest of a file's bytes, as 16 hex chars."""
    return hashlib.blake2b(blob, digest_size=8).hexdigest()


def file_checksum(path: str | os.PathLike) -> str:
    try:
        return content_checksum(Path(path).read_bytes())
    except OSError as exc:
        raise IoError(f"cannot read {path}: {exc}") from exc


def write_raw(path: str | os.PathLike, arr: np.ndarray, *, normalized: bool = False, flags: int = 0) -> str:
    blob = _encode(arr, normalized, flags)
    atomic_write_bytes(path, blob)
    return content_checksum(blob)


def save_matrix(m: EmbeddingMatrix, path: str | os.PathLike) -> str:
    """Write ``m`` to ``path`` and return the file's content checksum."""
    return write_raw(path, m.data, normalized=m.normalized, flags=0)


@dataclass(frozen=True)
class Header:
    normalized: bool
    flags: int
    rows: int
    dim: int


def _parse_header(blob: bytes, path) -> Header:
    if len(blob) < 4 or blob[:4] != MAGIC:
        raise BadMagic(f"{path}: not an embedding file")
    if len(blob) < HEADER.size:
        raise TruncatedFile(f"{path}: header is {len(blob)} bytes, need {HEADER.size}")
    magic, version, dtype, normalized, flags, rows, dim = HEADER.unpack_from(blob)
    if version != FORMAT_VERSION:
        raise FormatError(f"{path}: unsupported format version {version}")
    if dtype != DTYPE_F32:
        raise FormatError(f"{path}: unsupported dtype code {dtype}")
    if normalized not in (0, 1):
        raise FormatError(f"{path}: bad normalized flag {normalized}")
    return Header(bool(normalized), flags, rows, dim)


def read_header(path: str | os.PathLike) -> Header:
    try:
        with open(path, "rb") as fh:
            blob = fh.read(HEADER.size)
    except OSError as exc:
        raise IoError(f"cannot read {path}: {exc}") from exc
    return _parse_header(blob, path)


def read_raw(path: str | os.PathLike) -> tuple[Header, np.ndarray]:
    """Read any container file; returns the header and a float32 array."""
    try:
        blob = Path(path).read_bytes()
    except OSError as exc:
        raise IoError(f"cannot read {path}: {exc}") from exc
    head = _parse_header(blob, path)
    want = head.rows * head.dim * 4
    have = len(blob) - HEADER.size
    if have < want:
        raise TruncatedFile(f"{path}: payload has {have} bytes, header declares {want}")
    if have > want:
        raise ShapeMismatch(f"{path}: payload has {have} bytes, header declares {want}")
    arr = np.frombuffer(blob, dtype=_F32, offset=HEADER.size).reshape(head.rows, head.dim)
    pos = _first_nonfinite(arr)
    if pos >= 0:
        raise NonFiniteValue(f"{path}: non-finite value at flat index {pos}")
    return head, arr


def load_matrix(path: str | os.PathLike) -> EmbeddingMatrix:
    """Load an embedding file exactly as stored (bit-for-bit)."""
    head, arr = read_raw(path)
    if head.flags != 0:
        raise FormatError(f"{path}: flags {head.flags:#x} mark a non-embedding payload")
    return EmbeddingMatrix(arr, normalized=head.normalized)


def ingest_matrix(path: str | os.PathLike) -> EmbeddingMatrix:
    """Load a file and normalize its rows unless the header says they already are."""
    m = load_matrix(path)
    return m if m.normalized else l2_normalize(m)


@dataclass
class ManifestEntry:
    id: str
    path: str
    rows: int
    dim: int
    checksum: str


@dataclass
class EmbeddingManifest:
    """A JSON index of embedding files; paths are relative to ``root``."""

    kind: str
    entries: list[ManifestEntry] = field(default_factory=list)
    root: Path = field(default=Path("."), compare=False, repr=False)

    def __post_init__(self) -> None:
        if self.kind not in MANIFEST_KINDS:
            raise ManifestError(f"unknown manifest kind {self.kind!r}")
        self.root = Path(self.root)
        self._check_ids()

    def _check_ids(self) -> None:
        seen = set()
        for e in self.entries:
            if e.id in seen:
                raise ManifestError(f"duplicate id {e.id!r}")
            seen.add(e.id)

    @property
    def ids(self) -> list[str]:
        return [e.id for e in self.entries]

    def entry(self, id: str) -> ManifestEntry:
        for e in self.entries:
            if e.id == id:
                return e
        raise ManifestError(f"no entry with id {id!r}")

    def __contains__(self, id: str) -> bool:
        return any(e.id == id for e in self.entries)

    def add(self, id: str, m: EmbeddingMatrix, relpath: str | None = None) -> ManifestEntry:
        """Save ``m`` under ``root`` and register it."""
        if id in self:
            raise ManifestError(f"duplicate id {id!r}")
        if relpath is None:
            taken = {e.path for e in self.entries}
            base = _safe_name(id)
            relpath, n = f"{base}.apeb", 1
            while relpath in taken:
                relpath, n = f"{base}-{n}.apeb", n + 1
        checksum = save_matrix(m, self.root / relpath)
        e = ManifestEntry(id=id, path=relpath, rows=m.rows, dim=m.dim, checksum=checksum)
        self.entries.append(e)
        return e

    def load(self, id: str, *, verify: bool = False) -> EmbeddingMatrix:
        """Load (and normalize if needed) the matrix registered under ``id``."""
        e = self.entry(id)
        path = self.root / e.path
        if verify:
            self._verify(e)
        m = ingest_matrix(path)
        if (m.rows, m.dim) != (e.rows, e.dim):
            raise ShapeMismatch(f"{e.id}: file is {m.rows}x{m.dim}, manifest says {e.rows}x{e.dim}")
        return m

    def _verify(self, e: ManifestEntry) -> None:
        path = self.root / e.path
        if not path.is_file():
            raise ManifestError(f"{e.id}: missing file {path}")
        head = read_header(path)
        if (head.rows, head.dim) != (e.rows, e.dim):
            raise ShapeMismatch(f"{e.id}: header is {head.rows}x{head.dim}, manifest says {e.rows}x{e.dim}")
        got = file_checksum(path)
        if got != e.checksum:
            raise ChecksumMismatch(f"{e.id}: checksum {got} != {e.checksum}")

    def validate(self) -> None:
        self._check_ids()
        for e in self.entries:
            self._verify(e)

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "entries": [
                {"id": e.id, "path": e.path, "rows": e.rows, "dim": e.dim, "checksum": e.checksum}
                for e in self.entries
            ],
        }

    @classmethod
    def from_dict(cls, d: dict, root: str | os.PathLike = ".") -> "EmbeddingManifest":
        try:
            entries = [
                ManifestEntry(
                    id=str(x["id"]),
                    path=str(x["path"]),
                    rows=int(x["rows"]),
                    dim=int(x["dim"]),
                    checksum=str(x["checksum"]),
                )
                for x in d["entries"]
            ]
            return cls(kind=d["kind"], entries=entries, root=Path(root))
        except (KeyError, TypeError, ValueError) as exc:
            raise ManifestError(f"malformed manifest: {exc}") from exc

    def save(self, path: str | os.PathLike) -> None:
        write_json(path, self.to_dict())

    @classmethod
    def read(cls, path: str | os.PathLike, *, validate: bool = True) -> "EmbeddingManifest":
        path = Path(path)
        man = cls.from_dict(read_json(path), root=path.parent)
        if validate:
            man.validate()
        return man


def _safe_name(id: str) -> str:
    return "".join(ch if ch.isalnum() or ch in "-_." else "_" for ch in id)


@dataclass(frozen=True)
class VideoRecord:
    """One video: frame embeddings for each spatial-crop x temporal-clip view."""

    video_id: str
    views: tuple[EmbeddingMatrix, ...]
    label: str | None = None

    def __post_init__(self) -> None:
        views = tuple(self.views)
        if not views:
            raise EmptyMatrix(f"video {self.video_id!r} has no views")
        dims = {v.dim for v in views}
        if len(dims) != 1:
            raise DimMismatch(f"video {self.video_id!r} views have dims {sorted(dims)}")
        object.__setattr__(self, "views", views)

    @property
    def dim(self) -> int:
        return self.views[0].dim

    @property
    def n_frames(self) -> int:
        return sum(v.rows for v in self.views)


def view_ids_for(manifest: EmbeddingManifest, video_id: str) -> list[str]:
    """Resolve a video id to manifest entry ids.

    An entry named exactly ``video_id`` is a single-view video; otherwise every
    entry named ``video_id#...`` is a view, in manifest order.
    """
    if video_id in manifest:
        return [video_id]
    prefix = f"{video_id}#"
    ids = [i for i in manifest.ids if i.startswith(prefix)]
    if not ids:
        raise ManifestError(f"no embeddings for video {video_id!r}")
    return ids


def load_video(
    manifest: EmbeddingManifest,
    video_id: str,
    view_ids: Sequence[str] | None = None,
    label: str | None = None,
) -> VideoRecord:
    ids = list(view_ids) if view_ids else view_ids_for(manifest, video_id)
    return VideoRecord(video_id, tuple(manifest.load(i) for i in ids), label)


def stack_rows(ms: Iterable[EmbeddingMatrix]) -> EmbeddingMatrix:
    ms = list(ms)
    dims = {m.dim for m in ms}
    if len(dims) != 1:
        raise DimMismatch(f"cannot stack dims {sorted(dims)}")
    return EmbeddingMatrix(np.vstack([m.data for m in ms]), normalized=all(m.normalized for m in ms))
