"""Domain types and file formats: clouds, descriptor caches, manifests.

Point clouds and displacement fields are plain float64 arrays of shape
(N, 3), validated at module boundaries. All coordinates are millimeters.
Formats round-trip exactly: text files print floats with shortest
round-trip precision, the descriptor cache is little-endian binary.
"""

from __future__ import annotations

import hashlib
import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, TypeAlias

import numpy as np
from numpy.typing import NDArray

Points: TypeAlias = NDArray[np.float64]  # shape (N, 3), mm

DESC_MAGIC = b"GERADESC"
DESC_VERSION = 1

SPLITS = ("train", "val", "test")


class FormatError(ValueError):
    """Raised when a file does not match its declared format."""


def pair_count(n_desc: int) -> int:
    """Number of edges in the fully connected graph on n_desc vertices."""
    return n_desc * (n_desc - 1) // 2


def as_points(data, what: str = "point cloud") -> Points:
    """Validate and convert to a float64 (N, 3) array.

    Rejects empty inputs, wrong shapes, and non-finite coordinates.
    """
    pts = np.asarray(data, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[1] != 3:
        raise ValueError(f"{what} must have shape (N, 3), got {pts.shape}")
    if pts.shape[0] == 0:
        raise ValueError(f"{what} is empty")
    if not np.isfinite(pts).all():
        raise ValueError(f"{what} contains non-finite coordinates")
    return pts


@dataclass(frozen=True)
class DescriptorSet:
    """Per-point geometric descriptors: one row of pairwise edge lengths
    per point, built over n_desc graph vertices (the point plus its
    n_desc - 1 nearest neighbors).
    """

    vectors: NDArray[np.float64]  # (M, d), mm
    n_desc: int

    def __post_init__(self):
        vecs = np.asarray(self.vectors, dtype=np.float64)
        object.__setattr__(self, "vectors", vecs)
        if vecs.ndim != 2:
            raise ValueError(f"descriptor vectors must be 2-D, got {vecs.ndim}-D")
        d = pair_count(self.n_desc)
        if vecs.shape[1] != d:
            raise ValueError(
                f"descriptor width {vecs.shape[1]} != C({self.n_desc},2) = {d}"
            )
        if not np.isfinite(vecs).all():
            raise ValueError("descriptor set contains non-finite entries")
        if (vecs < 0).any():
            raise ValueError("descriptor set contains negative edge lengths")

    @property
    def count(self) -> int:
        return self.vectors.shape[0]

    @property
    def dim(self) -> int:
        return self.vectors.shape[1]


@dataclass(frozen=True)
class RegistrationConfig:
    """Knobs shared across the pipeline.

    alpha_loss blends the geometric and coordinate losses; alpha_loss = 0
    is the coordinate-only variant. The geometric term is a sum over
    descriptor rows and carries gradients about 1e5 times larger than
    the RMSE term at 1,024 points, so the default keeps both
    contributions comparable. epsilon_mode selects the smoothness
    adjustment applied after the predicted displacement (only "zero" is
    defined).
    """

    n_desc: int = 10
    alpha_loss: float = 1e-5
    epsilon_mode: str = "zero"
    seed: int = 0
    encoder_widths: tuple[int, ...] = (64, 128, 256)
    decoder_widths: tuple[int, ...] = (256, 128, 64)

    def __post_init__(self):
        if self.n_desc < 3:
            raise ValueError(f"n_desc must be >= 3, got {self.n_desc}")
        if not 0.0 <= self.alpha_loss <= 1.0:
            raise ValueError(f"alpha_loss must be in [0, 1], got {self.alpha_loss}")
        if self.epsilon_mode != "zero":
            raise ValueError(f"unknown epsilon_mode {self.epsilon_mode!r}")

    @property
    def descriptor_dim(self) -> int:
        return pair_count(self.n_desc)


@dataclass(frozen=True)
class ManifestRecord:
    """One registration pair: file paths plus generation parameters."""

    source: str
    target: str
    gt: str
    deform_mm: float
    noise_mm: tuple[float, float]
    seed: int
    split: str

    def __post_init__(self):
        if self.split not in SPLITS:
            raise ValueError(f"split must be one of {SPLITS}, got {self.split!r}")


@dataclass
class DatasetManifest:
    """Train/val/test pairing of generated clouds with ground truth."""

    records: list[ManifestRecord]
    root: Path = field(default_factory=Path)

    def split(self, name: str) -> list[ManifestRecord]:
        if name not in SPLITS:
            raise ValueError(f"unknown split {name!r}")
        return [r for r in self.records if r.split == name]

    def resolve(self, relpath: str) -> Path:
        return self.root / relpath

    def cloud_paths(self) -> list[Path]:
        """Unique source/target cloud paths, in first-appearance order."""
        seen: dict[Path, None] = {}
        for rec in self.records:
            seen.setdefault(self.resolve(rec.source))
            seen.setdefault(self.resolve(rec.target))
        return list(seen)

    def validate_files(self) -> None:
        """Check every referenced file exists and parses."""
        for rec in self.records:
            for rel in (rec.source, rec.target, rec.gt):
                path = self.resolve(rel)
                if not path.exists():
                    raise FileNotFoundError(f"manifest references missing file {path}")
                load_cloud(path)


def _format_floats(row: Iterable[float]) -> str:
    # repr() gives the shortest digits that round-trip exactly
    return " ".join(repr(float(v)) for v in row)


def _parse_xyz_line(line: str, lineno: int, path: Path) -> tuple[float, float, float]:
    tokens = line.split()
    if len(tokens) != 3:
        raise FormatError(f"{path}:{lineno}: expected 3 values, got {len(tokens)}")
    try:
        x, y, z = (float(t) for t in tokens)
    except ValueError as exc:
        raise FormatError(f"{path}:{lineno}: {exc}") from None
    if not all(math.isfinite(v) for v in (x, y, z)):
        raise FormatError(f"{path}:{lineno}: non-finite value")
    return x, y, z


def load_cloud(path: str | Path, format: str | None = None) -> Points:
    """Load a point cloud from an xyz or ply-ascii file.

    The format defaults to the file suffix (.xyz or .ply). Coordinates
    are taken as millimeters, in file order.
    """
    path = Path(path)
    fmt = format or path.suffix.lstrip(".").lower()
    if fmt == "xyz":
        return _load_xyz(path)
    if fmt in ("ply", "ply-ascii"):
        return _load_ply(path)
    raise ValueError(f"unsupported cloud format {fmt!r}")


def save_cloud(cloud: Points, path: str | Path, format: str | None = None) -> None:
    """Write a cloud so that load_cloud reproduces it exactly."""
    cloud = as_points(cloud)
    path = Path(path)
    fmt = format or path.suffix.lstrip(".").lower()
    if fmt == "xyz":
        _save_xyz(cloud, path)
    elif fmt in ("ply", "ply-ascii"):
        _save_ply(cloud, path)
    else:
        raise ValueError(f"unsupported cloud format {fmt!r}")


def _load_xyz(path: Path) -> Points:
    rows = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            rows.append(_parse_xyz_line(line, lineno, path))
    if not rows:
        raise FormatError(f"{path}: empty cloud")
    return np.array(rows, dtype=np.float64)


def _save_xyz(cloud: Points, path: Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for row in cloud:
            fh.write(_format_floats(row) + "\n")


def _load_ply(path: Path) -> Points:
    with open(path, encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    if not lines or lines[0].strip() != "ply":
        raise FormatError(f"{path}:1: missing 'ply' magic line")

    count = None
    props: list[str] = []
    body_start = None
    for lineno, raw in enumerate(lines[1:], start=2):
        line = raw.strip()
        if line.startswith("comment") or not line:
            continue
        if line.startswith("format"):
            if line.split()[1] != "ascii":
                raise FormatError(f"{path}:{lineno}: only ascii ply is supported")
        elif line.startswith("element"):
            parts = line.split()
            if parts[1] != "vertex" or count is not None:
                raise FormatError(f"{path}:{lineno}: only a single vertex element is supported")
            count = int(parts[2])
        elif line.startswith("property"):
            parts = line.split()
            if parts[1] not in ("float", "double", "float32", "float64"):
                raise FormatError(f"{path}:{lineno}: unsupported property type {parts[1]!r}")
            props.append(parts[2])
        elif line == "end_header":
            body_start = lineno
            break
        else:
            raise FormatError(f"{path}:{lineno}: unexpected header line {line!r}")
    if body_start is None or count is None:
        raise FormatError(f"{path}: truncated ply header")
    if props != ["x", "y", "z"]:
        raise FormatError(f"{path}: vertex properties must be x y z, got {props}")
    if count == 0:
        raise FormatError(f"{path}: empty cloud")

    body = lines[body_start:]
    if len(body) < count:
        raise FormatError(f"{path}: header declares {count} vertices, found {len(body)}")
    if any(line.strip() for line in body[count:]):
        raise FormatError(f"{path}: data beyond the declared {count} vertices")
    rows = []
    for offset in range(count):
        lineno = body_start + 1 + offset
        rows.append(_parse_xyz_line(body[offset], lineno, path))
    return np.array(rows, dtype=np.float64)


def _save_ply(cloud: Points, path: Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("ply\n")
        fh.write("format ascii 1.0\n")
        fh.write(f"element vertex {cloud.shape[0]}\n")
        fh.write("property double x\n")
        fh.write("property double y\n")
        fh.write("property double z\n")
        fh.write("end_header\n")
        for row in cloud:
            fh.write(_format_floats(row) + "\n")


def load_displacements(path: str | Path) -> NDArray[np.float64]:
    """Displacement fields share the 3-column text layout of xyz files."""
    return _load_xyz(Path(path))


def save_displacements(field: NDArray[np.float64], path: str | Path) -> None:
    field = np.asarray(field, dtype=np.float64)
    if field.ndim != 2 or field.shape[1] != 3 or field.shape[0] == 0:
        raise ValueError(f"displacement field must have shape (M, 3), got {field.shape}")
    if not np.isfinite(field).all():
        raise ValueError("displacement field contains non-finite entries")
    _save_xyz(field, Path(path))


# Descriptor cache: magic, u32 version, u64 M, u32 n_desc, u32 d, then
# M*d row-major little-endian float64.
_DESC_HEADER = struct.Struct("<8sIQII")


def save_descriptors(desc: DescriptorSet, path: str | Path) -> None:
    header = _DESC_HEADER.pack(
        DESC_MAGIC, DESC_VERSION, desc.count, desc.n_desc, desc.dim
    )
    payload = np.ascontiguousarray(desc.vectors, dtype="<f8").tobytes()
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(payload)


def load_descriptors(path: str | Path) -> DescriptorSet:
    path = Path(path)
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < _DESC_HEADER.size:
        raise FormatError(f"{path}: truncated descriptor header")
    magic, version, m, n_desc, d = _DESC_HEADER.unpack_from(raw)
    if magic != DESC_MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}")
    if version != DESC_VERSION:
        raise FormatError(f"{path}: unsupported version {version}")
    if d != pair_count(n_desc):
        raise FormatError(f"{path}: header d={d} != C({n_desc},2)")
    expected = _DESC_HEADER.size + m * d * 8
    if len(raw) != expected:
        raise FormatError(f"{path}: payload size {len(raw)} != expected {expected}")
    vectors = np.frombuffer(raw, dtype="<f8", offset=_DESC_HEADER.size).reshape(m, d)
    return DescriptorSet(vectors=vectors.copy(), n_desc=n_desc)


def save_manifest(manifest: DatasetManifest, path: str | Path) -> None:
    """One JSON record per line; keys sorted so output is byte-stable."""
    with open(path, "w", encoding="utf-8") as fh:
        for rec in manifest.records:
            obj = {
                "source": rec.source,
                "target": rec.target,
                "gt": rec.gt,
                "deform_mm": rec.deform_mm,
                "noise_mm": list(rec.noise_mm),
                "seed": rec.seed,
                "split": rec.split,
            }
            fh.write(json.dumps(obj, sort_keys=True) + "\n")


def load_manifest(path: str | Path) -> DatasetManifest:
    path = Path(path)
    records = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise FormatError(f"{path}:{lineno}: {exc}") from None
            try:
                records.append(
                    ManifestRecord(
                        source=obj["source"],
                        target=obj["target"],
                        gt=obj["gt"],
                        deform_mm=float(obj["deform_mm"]),
                        noise_mm=(float(obj["noise_mm"][0]), float(obj["noise_mm"][1])),
                        seed=int(obj["seed"]),
                        split=obj["split"],
                    )
                )
            except (KeyError, IndexError, TypeError) as exc:
                raise FormatError(f"{path}:{lineno}: bad record ({exc})") from None
    return DatasetManifest(records=records, root=path.parent)


def file_sha256(path: str | Path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            digest.update(chunk)
    return digest.hexdigest()
