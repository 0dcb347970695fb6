"""Bit-exact on-disk tensor format and the JSON manifest that indexes it.

File layout (little-endian throughout, any platform reads any other's files):

    magic "TCB1" | dtype:u8 (0=float32, 1=float64) | rank:u8
    | extents:u64 x rank | payload: raw row-major scalars

The manifest is a JSON document ``{"version": 1, "metadata": {...},
"entries": [{"name", "path", "dtype", "shape", "role"}]}`` with roles
``W`` (rank-2 V x d), ``h`` (rank-1 d), ``logits``/``probs`` (rank-1 V).

Non-finite scalars are rejected at read time unless explicitly allowed:
every downstream formula divides by norms, and silent NaN propagation
would mask bugs.  float32 tensors round-trip bit-exactly but are up-cast
to float64 when handed to the analysis code.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

MAGIC = b"TCB1"
MAX_RANK = 8
MANIFEST_VERSION = 1
ROLES = ("W", "h", "logits", "probs")

_DTYPE_CODES = {"float32": 0, "float64": 1}
_CODE_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_DTYPE_NAMES = {0: "float32", 1: "float64"}


class TensorFormatError(ValueError):
    """Malformed or inconsistent tensor file."""


class ManifestError(ValueError):
    """Malformed manifest or manifest/tensor mismatch."""


@dataclass(frozen=True)
class TensorBlock:
    """Dense row-major array with an explicit dtype: the universal carrier."""

    dtype: str
    shape: tuple[int, ...]
    data: np.ndarray  # flat, contiguous, native dtype

    def __post_init__(self):
        if self.dtype not in _DTYPE_CODES:
            raise TensorFormatError(f"unsupported dtype {self.dtype!r}")
        n = 1
        for extent in self.shape:
            if extent < 0:
                raise TensorFormatError("negative extent in shape")
            n *= extent
        if self.data.size != n:
            raise TensorFormatError(
                f"data length {self.data.size} != product of shape {self.shape}"
            )

    @classmethod
    def from_array(cls, arr) -> "TensorBlock":
        a = np.asarray(arr)
        if a.dtype == np.float32:
            name = "float32"
        elif a.dtype == np.float64:
            name = "float64"
        else:
            a = a.astype(np.float64)
            name = "float64"
        return cls(dtype=name, shape=tuple(int(s) for s in a.shape), data=np.ascontiguousarray(a).reshape(-1))

    def as_array(self) -> np.ndarray:
        """The block reshaped to its declared shape (original dtype)."""
        return self.data.reshape(self.shape)

    def as_float64(self) -> np.ndarray:
        """Computation view: up-cast to float64."""
        return self.as_array().astype(np.float64, copy=False)


def write_tensor(block: TensorBlock, path) -> None:
    """Write a block; read_tensor reproduces it bit-exactly."""
    rank = len(block.shape)
    if rank > MAX_RANK:
        raise TensorFormatError(f"rank {rank} exceeds maximum {MAX_RANK}")
    code = _DTYPE_CODES[block.dtype]
    le = block.data.astype(_CODE_DTYPES[code], copy=False)
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<BB", code, rank))
        if rank:
            fh.write(struct.pack(f"<{rank}Q", *block.shape))
        fh.write(le.tobytes())


def _read_header(fh, path) -> tuple[int, tuple[int, ...]]:
    head = fh.read(6)
    if len(head) < 6 or head[:4] != MAGIC:
        raise TensorFormatError(f"{path}: bad magic (not a TCB1 tensor file)")
    code, rank = struct.unpack("<BB", head[4:6])
    if code not in _CODE_DTYPES:
        raise TensorFormatError(f"{path}: unknown dtype code {code}")
    if rank > MAX_RANK:
        raise TensorFormatError(f"{path}: rank {rank} exceeds maximum {MAX_RANK}")
    raw = fh.read(8 * rank)
    if len(raw) != 8 * rank:
        raise TensorFormatError(f"{path}: truncated header")
    shape = struct.unpack(f"<{rank}Q", raw) if rank else ()
    return code, tuple(int(s) for s in shape)


def read_tensor_header(path) -> tuple[str, tuple[int, ...]]:
    """Dtype name and shape from the file header, without loading the payload."""
    with open(path, "rb") as fh:
        code, shape = _read_header(fh, path)
    return _DTYPE_NAMES[code], shape


def read_tensor(path, allow_nonfinite: bool = False) -> TensorBlock:
    """Read a tensor file back into a block, validating size and finiteness."""
    with open(path, "rb") as fh:
        code, shape = _read_header(fh, path)
        dtype = _CODE_DTYPES[code]
        count = 1
        for extent in shape:
            count *= extent
        payload = fh.read()
    expected = count * dtype.itemsize
    if len(payload) < expected:
        raise TensorFormatError(
            f"{path}: truncated payload ({len(payload)} bytes, expected {expected})"
        )
    if len(payload) > expected:
        raise TensorFormatError(
            f"{path}: trailing bytes after payload ({len(payload)} > {expected})"
        )
    data = np.frombuffer(payload, dtype=dtype).astype(dtype.newbyteorder("="), copy=False)
    if not allow_nonfinite and count and not np.all(np.isfinite(data)):
        raise TensorFormatError(
            f"{path}: non-finite scalar in payload (pass allow_nonfinite to accept)"
        )
    return TensorBlock(dtype=_DTYPE_NAMES[code], shape=shape, data=data)


@dataclass(frozen=True)
class ManifestEntry:
    name: str
    path: Path
    dtype: str
    shape: tuple[int, ...]
    role: str


@dataclass
class TensorManifest:
    """Validated index of tensor files plus free-form metadata."""

    metadata: dict
    entries: list[ManifestEntry]
    base_dir: Path
    _by_name: dict[str, ManifestEntry] = field(default_factory=dict, repr=False)

    def __post_init__(self):
        self._by_name = {e.name: e for e in self.entries}

    def entry(self, name: str) -> ManifestEntry:
        try:
            return self._by_name[name]
        except KeyError:
            raise ManifestError(f"no manifest entry named {name!r}") from None

    def by_role(self, role: str) -> list[ManifestEntry]:
        return [e for e in self.entries if e.role == role]

    def load(self, name: str, allow_nonfinite: bool = False) -> np.ndarray:
        """Load an entry as a float64 array (the computation dtype)."""
        return read_tensor(self.entry(name).path, allow_nonfinite=allow_nonfinite).as_float64()


def _role_shape_error(entry: ManifestEntry, why: str) -> ManifestError:
    return ManifestError(f"entry {entry.name!r} (role {entry.role}): {why}")


def load_manifest(path, check_files: bool = True) -> TensorManifest:
    """Parse and validate a manifest JSON document.

    Validation covers the schema, role/shape consistency (W rank-2 V x d,
    h rank-1 d, logits/probs rank-1 V), agreement of metadata V and d with
    the W entries, and - when ``check_files`` - existence and header
    agreement of every referenced tensor file.
    """
    mpath = Path(path)
    try:
        doc = json.loads(mpath.read_text())
    except FileNotFoundError:
        raise ManifestError(f"manifest not found: {mpath}") from None
    except json.JSONDecodeError as exc:
        raise ManifestError(f"{mpath}: not valid JSON ({exc})") from None
    if not isinstance(doc, dict):
        raise ManifestError(f"{mpath}: manifest must be a JSON object")
    if doc.get("version") != MANIFEST_VERSION:
        raise ManifestError(f"{mpath}: unsupported manifest version {doc.get('version')!r}")
    metadata = doc.get("metadata", {})
    if not isinstance(metadata, dict):
        raise ManifestError(f"{mpath}: metadata must be an object")
    raw_entries = doc.get("entries")
    if not isinstance(raw_entries, list):
        raise ManifestError(f"{mpath}: entries must be a list")

    base_dir = mpath.parent
    entries: list[ManifestEntry] = []
    seen: set[str] = set()
    for idx, raw in enumerate(raw_entries):
        if not isinstance(raw, dict):
            raise ManifestError(f"{mpath}: entry {idx} is not an object")
        missing = {"name", "path", "dtype", "shape", "role"} - set(raw)
        if missing:
            raise ManifestError(f"{mpath}: entry {idx} missing keys {sorted(missing)}")
        name = raw["name"]
        if name in seen:
            raise ManifestError(f"{mpath}: duplicate entry name {name!r}")
        seen.add(name)
        if raw["role"] not in ROLES:
            raise ManifestError(f"{mpath}: entry {name!r} has unknown role {raw['role']!r}")
        if raw["dtype"] not in _DTYPE_CODES:
            raise ManifestError(f"{mpath}: entry {name!r} has unknown dtype {raw['dtype']!r}")
        shape = tuple(int(s) for s in raw["shape"])
        epath = Path(raw["path"])
        if not epath.is_absolute():
            epath = base_dir / epath
        entries.append(
            ManifestEntry(name=name, path=epath, dtype=raw["dtype"], shape=shape, role=raw["role"])
        )

    # Role/rank checks and V/d consistency across entries and metadata.
    v_meta = metadata.get("V")
    d_meta = metadata.get("d")
    v = int(v_meta) if v_meta is not None else None
    d = int(d_meta) if d_meta is not None else None
    for entry in entries:
        if entry.role == "W":
            if len(entry.shape) != 2:
                raise _role_shape_error(entry, f"must be rank 2, got shape {entry.shape}")
            if v is None:
                v = entry.shape[0]
            if d is None:
                d = entry.shape[1]
            if entry.shape != (v, d):
                raise _role_shape_error(entry, f"shape {entry.shape} != (V, d) = ({v}, {d})")
    for entry in entries:
        if entry.role == "h":
            if len(entry.shape) != 1:
                raise _role_shape_error(entry, f"must be rank 1, got shape {entry.shape}")
            if d is None:
                d = entry.shape[0]
            if entry.shape[0] != d:
                raise _role_shape_error(entry, f"length {entry.shape[0]} != d = {d}")
        elif entry.role in ("logits", "probs"):
            if len(entry.shape) != 1:
                raise _role_shape_error(entry, f"must be rank 1, got shape {entry.shape}")
            if v is None:
                v = entry.shape[0]
            if entry.shape[0] != v:
                raise _role_shape_error(entry, f"length {entry.shape[0]} != V = {v}")

    if check_files:
        for entry in entries:
            if not entry.path.is_file():
                raise ManifestError(f"missing tensor file for entry {entry.name!r}: {entry.path}")
            dtype, shape = read_tensor_header(entry.path)
            if dtype != entry.dtype or shape != entry.shape:
                raise ManifestError(
                    f"entry {entry.name!r}: file has dtype={dtype} shape={shape}, "
                    f"manifest declares dtype={entry.dtype} shape={entry.shape}"
                )

    return TensorManifest(metadata=metadata, entries=entries, base_dir=base_dir)


def write_manifest(path, metadata: dict, entries: list[dict]) -> None:
    """Write a manifest document; entry paths should be relative to it."""
    doc = {"version": MANIFEST_VERSION, "metadata": metadata, "entries": entries}
    Path(path).write_text(json.dumps(doc, indent=2, sort_keys=False) + "\n")
