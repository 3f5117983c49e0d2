"""Binary tensor container ("DPT1") and dataset manifest loading.

File layout, little-endian throughout:

    magic "DPT1" | dtype code u8 (1=float32, 2=float64) | rank u8 |
    2 reserved zero bytes | rank u64 extents | row-major payload

Tensors are plain numpy arrays; every load validates the header, the
payload length, strictly positive extents and finiteness, so no partially
constructed tensor ever escapes.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

MAGIC = b"DPT1"
_CODE_TO_DTYPE = {1: np.dtype("<f4"), 2: np.dtype("<f8")}
_DTYPE_TO_CODE = {np.dtype(np.float32): 1, np.dtype(np.float64): 2}

MANIFEST_KEYS = {"classes", "split", "granularities", "anchors", "samples", "dims"}
DIM_KEYS = ("C", "Gr", "d", "S", "n")


class TensorFormatError(ValueError):
    """Raised for malformed or invariant-violating tensor files."""


class ManifestError(ValueError):
    """Raised for malformed or inconsistent dataset manifests."""


def _check_tensor(arr: np.ndarray) -> None:
    if arr.ndim < 1:
        raise TensorFormatError("rank must be at least 1")
    if any(e < 1 for e in arr.shape):
        raise TensorFormatError("zero extent")
    if arr.dtype not in _DTYPE_TO_CODE:
        raise TensorFormatError(f"unsupported dtype {arr.dtype}")
    if not np.isfinite(arr).all():
        raise TensorFormatError("non-finite element")


def save_tensor(arr: np.ndarray, path: str | Path) -> None:
    """Write `arr` in the DPT1 layout; rejects invalid tensors before writing."""
    arr = np.asarray(arr)
    _check_tensor(arr)
    code = _DTYPE_TO_CODE[arr.dtype]
    header = MAGIC + bytes([code, arr.ndim, 0, 0])
    extents = np.asarray(arr.shape, dtype="<u8").tobytes()
    payload = np.ascontiguousarray(arr).astype(_CODE_TO_DTYPE[code], copy=False).tobytes()
    with open(path, "wb") as f:
        f.write(header + extents + payload)


def load_tensor(path: str | Path) -> np.ndarray:
    """Read a DPT1 file back into a numpy array, validating every invariant."""
    p = Path(path)
    if not p.exists():
        raise FileNotFoundError(f"file not found: {p}")
    raw = p.read_bytes()
    if len(raw) < 8:
        raise TensorFormatError("truncated header")
    if raw[:4] != MAGIC:
        raise TensorFormatError("bad magic")
    code, rank = raw[4], raw[5]
    if code not in _CODE_TO_DTYPE:
        raise TensorFormatError(f"unknown dtype code {code}")
    if rank < 1:
        raise TensorFormatError("rank must be at least 1")
    if raw[6:8] != b"\x00\x00":
        raise TensorFormatError("nonzero reserved bytes")
    body = raw[8:]
    if len(body) < 8 * rank:
        raise TensorFormatError("truncated extents")
    shape = tuple(int(e) for e in np.frombuffer(body[: 8 * rank], dtype="<u8"))
    if any(e == 0 for e in shape):
        raise TensorFormatError("zero extent")
    dtype = _CODE_TO_DTYPE[code]
    expected = int(np.prod(shape)) * dtype.itemsize
    payload = body[8 * rank:]
    if len(payload) != expected:
        raise TensorFormatError(
            f"payload length mismatch: expected {expected} bytes, got {len(payload)}"
        )
    arr = np.frombuffer(payload, dtype=dtype).reshape(shape)
    arr = arr.astype(arr.dtype.newbyteorder("="), copy=True)
    if not np.isfinite(arr).all():
        raise TensorFormatError("non-finite element")
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class ClassSplit:
    seen: frozenset[int]
    unseen: frozenset[int]

    def all_classes(self) -> frozenset[int]:
        return self.seen | self.unseen


@dataclass(frozen=True)
class ClassRecord:
    class_id: int
    name: str
    descriptions: tuple[str, ...]


@dataclass(frozen=True)
class SampleRecord:
    sample_id: str
    class_id: int
    feature_file: str


@dataclass(frozen=True)
class DatasetManifest:
    class_records: tuple[ClassRecord, ...]
    split: ClassSplit
    granularity_labels: tuple[str, ...]
    anchor_file: str
    sample_records: tuple[SampleRecord, ...]
    dims: dict[str, int]
    root: Path

    def class_ids(self) -> tuple[int, ...]:
        return tuple(r.class_id for r in self.class_records)


def _check_granularities(labels: list[str]) -> None:
    if labels.count("global") != 1 or labels[0] != "global":
        raise ManifestError("granularity labels must start with exactly one 'global'")
    rest = labels[1:]
    p = 0
    while p < len(rest) and rest[p] == f"bp_{p + 1}":
        p += 1
    z = 0
    while p + z < len(rest) and rest[p + z] == f"ti_{z + 1}":
        z += 1
    if p + z != len(rest):
        raise ManifestError(f"granularity labels malformed: {labels}")


def load_manifest(path: str | Path) -> DatasetManifest:
    """Parse and validate a dataset manifest JSON file."""
    p = Path(path)
    if not p.exists():
        raise FileNotFoundError(f"file not found: {p}")
    try:
        doc = json.loads(p.read_text())
    except json.JSONDecodeError as e:
        raise ManifestError(f"malformed manifest JSON: {e}") from e
    if not isinstance(doc, dict):
        raise ManifestError("manifest must be a JSON object")
    unknown = set(doc) - MANIFEST_KEYS
    if unknown:
        raise ManifestError(f"unknown manifest keys: {sorted(unknown)}")
    missing = MANIFEST_KEYS - set(doc)
    if missing:
        raise ManifestError(f"missing manifest keys: {sorted(missing)}")

    dims = doc["dims"]
    if set(dims) != set(DIM_KEYS):
        raise ManifestError(f"dims must have exactly keys {DIM_KEYS}")
    dims = {k: int(dims[k]) for k in DIM_KEYS}
    if any(v < 1 for v in dims.values()):
        raise ManifestError("all dims must be positive")

    labels = [str(x) for x in doc["granularities"]]
    _check_granularities(labels)
    gr = len(labels)
    if gr != dims["Gr"]:
        raise ManifestError(
            f"granularity count mismatch: {gr} labels for Gr={dims['Gr']}"
        )

    records = []
    seen_ids: set[int] = set()
    for c in doc["classes"]:
        cid = int(c["id"])
        if cid in seen_ids:
            raise ManifestError(f"duplicate class_id: {cid}")
        seen_ids.add(cid)
        desc = tuple(str(s) for s in c["descriptions"])
        if len(desc) != gr:
            raise ManifestError(
                f"granularity count mismatch: class {cid} has "
                f"{len(desc)} descriptions for Gr={gr}"
            )
        records.append(ClassRecord(cid, str(c["name"]), desc))
    if len(records) != dims["C"]:
        raise ManifestError(f"{len(records)} classes but dims C={dims['C']}")

    seen = frozenset(int(x) for x in doc["split"]["seen"])
    unseen = frozenset(int(x) for x in doc["split"]["unseen"])
    if seen & unseen:
        raise ManifestError(f"split overlap: {sorted(seen & unseen)}")
    if not seen:
        raise ManifestError("seen split must be nonempty")
    if seen | unseen != seen_ids:
        raise ManifestError("split does not cover exactly the declared classes")

    samples = []
    sample_ids: set[str] = set()
    for s in doc["samples"]:
        sid = str(s["id"])
        if sid in sample_ids:
            raise ManifestError(f"duplicate sample id: {sid}")
        sample_ids.add(sid)
        cid = int(s["class"])
        if cid not in seen_ids:
            raise ManifestError(f"sample {sid} references unknown class {cid}")
        samples.append(SampleRecord(sid, cid, str(s["features"])))

    return DatasetManifest(
        class_records=tuple(records),
        split=ClassSplit(seen, unseen),
        granularity_labels=tuple(labels),
        anchor_file=str(doc["anchors"]),
        sample_records=tuple(samples),
        dims=dims,
        root=p.parent,
    )


@dataclass
class ValidatedDataset:
    """Manifest plus lazily loadable, shape-checked tensors."""

    manifest: DatasetManifest
    _cache: dict[str, np.ndarray] = field(default_factory=dict, repr=False)

    def anchor_tensor(self) -> np.ndarray:
        key = "__anchors__"
        if key not in self._cache:
            self._cache[key] = load_tensor(self.manifest.root / self.manifest.anchor_file)
        return self._cache[key]

    def features(self, sample_id: str) -> np.ndarray:
        if sample_id not in self._cache:
            rec = next(
                (s for s in self.manifest.sample_records if s.sample_id == sample_id),
                None,
            )
            if rec is None:
                raise KeyError(f"unknown sample id: {sample_id}")
            self._cache[sample_id] = load_tensor(self.manifest.root / rec.feature_file)
        return self._cache[sample_id]


def validate_dataset(manifest: DatasetManifest) -> ValidatedDataset:
    """Cross-check every referenced tensor file against the manifest dims."""
    dims = manifest.dims
    anchor_path = manifest.root / manifest.anchor_file
    anchors = load_tensor(anchor_path)
    want = (dims["C"], dims["Gr"], dims["d"])
    if anchors.shape != want:
        raise ManifestError(
            f"anchor tensor {anchor_path}: expected shape {want}, got {anchors.shape}"
        )
    ds = ValidatedDataset(manifest)
    ds._cache["__anchors__"] = anchors
    want_feat = (dims["S"], dims["n"])
    for rec in manifest.sample_records:
        path = manifest.root / rec.feature_file
        feat = load_tensor(path)
        if feat.shape != want_feat:
            raise ManifestError(
                f"feature tensor {path}: expected shape {want_feat}, got {feat.shape}"
            )
    return ds
