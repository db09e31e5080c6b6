"""File formats and persistence: tensor files, manifests, pool state, run logs.

The tensor container is a minimal little-endian binary format:

    magic   4 bytes  b"MCDS"
    version u16      currently 1
    dtype   u8       1 = float32, 2 = uint8
    ndim    u8
    dims    ndim x u32
    payload row-major values, little-endian

Probability stacks are float32 [T, C, H, W]; label maps and predictions are
uint8 [H, W].  Files are immutable once written; all writers go through a
write-to-temp-then-rename step so readers never observe partial files.
"""

import csv
import json
import os
import struct
import tempfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .metrics import Measure, PredictionStack

MAGIC = b"MCDS"
FORMAT_VERSION = 1
MANIFEST_SCHEMA_VERSION = 1
POOL_STATE_SCHEMA_VERSION = 1

_DTYPE_CODES = {1: np.dtype("<f4"), 2: np.dtype("u1")}
_CODE_FOR_KIND = {"f": 1, "u": 2}

RUNLOG_COLUMNS = [
    "iteration",
    "mode",
    "pct_train",
    "pct_val",
    "selected_train",
    "selected_val",
    "discarded_train",
    "discarded_val",
    "tr_train",
    "tr_val",
    "eu_mean_train",
    "eu_std_train",
    "eu_mean_val",
    "eu_std_val",
    "test_mean_iou",
]

SCORE_COLUMNS = ["image_id", "split", "eu_img", "measure", "iteration_scored", "error"]


class TensorFileError(Exception):
    """Base class for tensor-file format violations."""


class BadMagicError(TensorFileError):
    pass


class VersionMismatchError(TensorFileError):
    pass


class TruncatedPayloadError(TensorFileError):
    pass


class ProbabilitySumError(TensorFileError):
    pass


class ManifestError(ValueError):
    pass


def _atomic_write_bytes(path, data: bytes):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name + ".", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as handle:
            handle.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _atomic_write_text(path, text: str):
    _atomic_write_bytes(path, text.encode("utf-8"))


def format_number(value) -> str:
    """Render a numeric field with 9 significant digits."""
    if value is None:
        return "nan"
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    return f"{float(value):.9g}"


def resolve_path(path, data_root=None) -> Path:
    """Resolve a possibly-relative path against the configured data root."""
    path = Path(path)
    if path.is_absolute() or data_root is None:
        return path
    return Path(data_root) / path


# ---------------------------------------------------------------------------
# Tensor files


def write_tensor(array: np.ndarray, path):
    """Write an array (float32 or uint8) to the binary tensor format."""
    arr = np.ascontiguousarray(array)
    if arr.dtype.kind == "f":
        code, arr = 1, arr.astype("<f4", copy=False)
    elif arr.dtype.kind in ("u", "i"):
        if arr.dtype != np.uint8 and (arr.min() < 0 or arr.max() > 255):
            raise TensorFileError("integer tensors must fit uint8")
        code, arr = 2, arr.astype("u1", copy=False)
    else:
        raise TensorFileError(f"unsupported dtype {arr.dtype}")
    header = MAGIC + struct.pack("<HBB", FORMAT_VERSION, code, arr.ndim)
    header += struct.pack(f"<{arr.ndim}I", *arr.shape)
    _atomic_write_bytes(path, header + arr.tobytes(order="C"))


def read_tensor(path) -> np.ndarray:
    data = Path(path).read_bytes()
    if len(data) < 4:
        raise TruncatedPayloadError(f"{path}: file shorter than the magic header")
    if data[:4] != MAGIC:
        raise BadMagicError(f"{path}: bad magic {data[:4]!r}")
    if len(data) < 8:
        raise TruncatedPayloadError(f"{path}: truncated header")
    version, code, ndim = struct.unpack("<HBB", data[4:8])
    if version != FORMAT_VERSION:
        raise VersionMismatchError(f"{path}: unsupported format version {version}")
    if code not in _DTYPE_CODES:
        raise TensorFileError(f"{path}: unknown dtype code {code}")
    dims_end = 8 + 4 * ndim
    if len(data) < dims_end:
        raise TruncatedPayloadError(f"{path}: truncated dims")
    dims = struct.unpack(f"<{ndim}I", data[8:dims_end])
    dtype = _DTYPE_CODES[code]
    expected = int(np.prod(dims, dtype=np.int64)) * dtype.itemsize
    payload = data[dims_end:]
    if len(payload) < expected:
        raise TruncatedPayloadError(
            f"{path}: truncated payload ({len(payload)} of {expected} bytes)"
        )
    if len(payload) > expected:
        raise TensorFileError(f"{path}: {len(payload) - expected} trailing bytes")
    return np.frombuffer(payload, dtype=dtype).reshape(dims).copy()


def write_stack(stack: PredictionStack, path):
    write_tensor(stack.passes, path)


def read_stack(path, image_id=None, renormalize=False) -> PredictionStack:
    """Read and validate a probability stack.

    With renormalize=True each pixel's class vector is rescaled to sum to 1
    instead of rejecting out-of-tolerance sums.
    """
    arr = read_tensor(path)
    if arr.dtype != np.float32:
        raise TensorFileError(f"{path}: stacks must be float32, got {arr.dtype}")
    if arr.ndim != 4:
        raise TensorFileError(f"{path}: stacks must be [T, C, H, W], got {arr.shape}")
    if image_id is None:
        image_id = Path(path).stem
    if renormalize:
        sums = arr.sum(axis=1, dtype=np.float64)
        if (sums <= 0).any():
            raise ProbabilitySumError(f"{path}: cannot renormalize a zero-sum pixel")
        arr = (arr.astype(np.float64) / sums[:, None]).astype(np.float32)
    try:
        return PredictionStack(image_id, arr)
    except ValueError as exc:
        if "sum to" in str(exc):
            raise ProbabilitySumError(f"{path}: {exc}") from exc
        raise TensorFileError(f"{path}: {exc}") from exc


def write_label_map(labels: np.ndarray, path):
    arr = np.asarray(labels)
    if arr.ndim != 2:
        raise TensorFileError(f"label maps must be [H, W], got {arr.shape}")
    write_tensor(arr.astype(np.uint8), path)


def read_label_map(path) -> np.ndarray:
    arr = read_tensor(path)
    if arr.dtype != np.uint8 or arr.ndim != 2:
        raise TensorFileError(f"{path}: label maps must be uint8 [H, W]")
    return arr


# ---------------------------------------------------------------------------
# Manifests

SPLIT_NAMES = ("train", "val", "test")
_ENTRY_FIELDS = ("id", "image_path", "stack_path", "label_path", "meta")


@dataclass
class ManifestEntry:
    id: str
    image_path: str | None = None
    stack_path: str | None = None
    label_path: str | None = None
    meta: dict = field(default_factory=dict)
    extra: dict = field(default_factory=dict)  # unknown fields, preserved on save

    def to_dict(self) -> dict:
        out = {"id": self.id}
        for key in ("image_path", "stack_path", "label_path"):
            value = getattr(self, key)
            if value is not None:
                out[key] = value
        if self.meta:
            out["meta"] = self.meta
        out.update(self.extra)
        return out

    @classmethod
    def from_dict(cls, raw: dict) -> "ManifestEntry":
        if "id" not in raw or not isinstance(raw["id"], str) or not raw["id"]:
            raise ManifestError(f"manifest entry missing a string id: {raw!r}")
        extra = {k: v for k, v in raw.items() if k not in _ENTRY_FIELDS}
        return cls(
            id=raw["id"],
            image_path=raw.get("image_path"),
            stack_path=raw.get("stack_path"),
            label_path=raw.get("label_path"),
            meta=dict(raw.get("meta") or {}),
            extra=extra,
        )


@dataclass
class Manifest:
    splits: dict[str, list[ManifestEntry]]
    schema_version: int = MANIFEST_SCHEMA_VERSION
    extra: dict = field(default_factory=dict)

    def ids(self, split: str) -> list[str]:
        return [entry.id for entry in self.splits[split]]

    def entry(self, image_id: str) -> ManifestEntry:
        for entries in self.splits.values():
            for entry in entries:
                if entry.id == image_id:
                    return entry
        raise KeyError(image_id)

    def validate(self):
        for name in SPLIT_NAMES:
            if name not in self.splits:
                raise ManifestError(f"manifest is missing the {name!r} split")
        seen: set[str] = set()
        for entries in self.splits.values():
            for entry in entries:
                if entry.id in seen:
                    raise ManifestError(f"duplicate image id {entry.id!r} in manifest")
                seen.add(entry.id)
        if not self.splits["train"]:
            raise ManifestError("manifest train split is empty")
        for entry in self.splits["test"]:
            if not entry.label_path:
                raise ManifestError(f"test entry {entry.id!r} is missing label_path")

    def to_dict(self) -> dict:
        out = {
            "schema_version": self.schema_version,
            "splits": {
                name: [entry.to_dict() for entry in entries]
                for name, entries in self.splits.items()
            },
        }
        out.update(self.extra)
        return out


def load_manifest(path) -> Manifest:
    raw = json.loads(Path(path).read_text())
    version = raw.get("schema_version")
    if version != MANIFEST_SCHEMA_VERSION:
        raise ManifestError(f"unsupported manifest schema_version {version!r}")
    splits_raw = raw.get("splits")
    if not isinstance(splits_raw, dict):
        raise ManifestError("manifest is missing the splits object")
    splits = {
        name: [ManifestEntry.from_dict(e) for e in entries]
        for name, entries in splits_raw.items()
    }
    extra = {k: v for k, v in raw.items() if k not in ("schema_version", "splits")}
    manifest = Manifest(splits=splits, schema_version=version, extra=extra)
    manifest.validate()
    return manifest


def save_manifest(manifest: Manifest, path):
    manifest.validate()
    _atomic_write_text(path, json.dumps(manifest.to_dict(), indent=2) + "\n")


# ---------------------------------------------------------------------------
# Pool state (JSON); the pool module owns the in-memory types.


def save_pool_state(state, path):
    from .pool import PoolState  # local import to avoid a cycle

    assert isinstance(state, PoolState)
    doc = {"schema_version": POOL_STATE_SCHEMA_VERSION, **state.to_dict()}
    _atomic_write_text(path, json.dumps(doc, indent=2) + "\n")


def load_pool_state(path):
    from .pool import PoolState

    raw = json.loads(Path(path).read_text())
    version = raw.get("schema_version")
    if version != POOL_STATE_SCHEMA_VERSION:
        raise ManifestError(f"unsupported pool-state schema_version {version!r}")
    return PoolState.from_dict(raw)


# ---------------------------------------------------------------------------
# Score CSV


def write_scores(records, path, errors=()):
    """Write ScoreRecords (and optional per-image error rows) as CSV."""
    rows = []
    for rec in records:
        rows.append(
            {
                "image_id": rec.image_id,
                "split": rec.split,
                "eu_img": format_number(rec.eu_img),
                "measure": rec.measure.value,
                "iteration_scored": rec.iteration_scored,
                "error": "",
            }
        )
    for image_id, split, message in errors:
        rows.append(
            {
                "image_id": image_id,
                "split": split,
                "eu_img": "",
                "measure": "",
                "iteration_scored": "",
                "error": message,
            }
        )
    rows.sort(key=lambda r: r["image_id"])
    import io as _io

    buffer = _io.StringIO()
    writer = csv.DictWriter(buffer, fieldnames=SCORE_COLUMNS, lineterminator="\n")
    writer.writeheader()
    writer.writerows(rows)
    _atomic_write_text(path, buffer.getvalue())


def read_scores(path):
    """Read a score CSV; returns (records, error_rows)."""
    from .pool import ScoreRecord

    records, errors = [], []
    with open(path, newline="") as handle:
        for row in csv.DictReader(handle):
            if row.get("error"):
                errors.append((row["image_id"], row["split"], row["error"]))
                continue
            records.append(
                ScoreRecord(
                    image_id=row["image_id"],
                    split=row["split"],
                    eu_img=float(row["eu_img"]),
                    measure=Measure(row["measure"]),
                    iteration_scored=int(row["iteration_scored"]),
                )
            )
    return records, errors


# ---------------------------------------------------------------------------
# Run log (append-only CSV)


def append_runlog(path, record: dict):
    """Append one (iteration, mode) record; writes the header on first use."""
    path = Path(path)
    line = ",".join(
        str(record[col]) if col in ("iteration", "mode") else format_number(record.get(col))
        for col in RUNLOG_COLUMNS
    )
    path.parent.mkdir(parents=True, exist_ok=True)
    new_file = not path.exists()
    with open(path, "a") as handle:
        if new_file:
            handle.write(",".join(RUNLOG_COLUMNS) + "\n")
        handle.write(line + "\n")


def read_runlog(path) -> list[dict]:
    with open(path, newline="") as handle:
        return list(csv.DictReader(handle))
