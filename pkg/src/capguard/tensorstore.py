"""Bit-exact tensor container format, dataset manifests, and mask loading.

Tensor file format "GCT1" (no compression, no alignment padding):

    magic       - 4 bytes, ASCII "GCT1"
    rank        - uint32 little-endian, >= 1
    shape_1     - uint32 little-endian, >= 1
    ...
    shape_rank  - uint32 little-endian
    payload     - rank-major (C order) float32 little-endian values

Total file size is exactly 8 + 4*rank + 4*numel bytes.  Payloads must be
finite; NaN or Inf anywhere is a load error.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

TENSOR_MAGIC = b"GCT1"
MANIFEST_VERSION = "capguard-manifest-v1"

DEFAULT_MASK_THRESHOLD = 127


class TensorStoreError(Exception):
    """Base class for tensor/manifest I/O failures."""


class BadMagicError(TensorStoreError):
    """File does not start with the GCT1 magic."""


class TruncatedTensorError(TensorStoreError):
    """File is shorter (or longer) than its header promises."""


class NonFiniteTensorError(TensorStoreError):
    """Payload contains NaN or Inf."""


class MaskError(TensorStoreError):
    """Mask image is unreadable or not 8-bit grayscale."""


class ManifestError(TensorStoreError):
    """Manifest is malformed or violates a record invariant."""


def _check_tensor(arr: np.ndarray) -> np.ndarray:
    if arr.ndim < 1:
        raise ValueError("tensor rank must be >= 1")
    if any(d < 1 for d in arr.shape):
        raise ValueError(f"tensor dimensions must be >= 1, got {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise NonFiniteTensorError("tensor contains NaN or Inf")
    return np.ascontiguousarray(arr, dtype="<f4")


def write_tensor(arr: np.ndarray, path) -> None:
    """Write a float array to *path* in the GCT1 format."""
    arr = _check_tensor(np.asarray(arr))
    with open(path, "wb") as fh:
        fh.write(TENSOR_MAGIC)
        fh.write(struct.pack("<I", arr.ndim))
        fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        fh.write(arr.tobytes(order="C"))


def read_tensor(path) -> np.ndarray:
    """Read a GCT1 file back into a float32 array (inverse of write_tensor)."""
    raw = Path(path).read_bytes()
    if raw[:4] != TENSOR_MAGIC:
        raise BadMagicError(f"{path}: expected magic {TENSOR_MAGIC!r}, got {raw[:4]!r}")
    if len(raw) < 8:
        raise TruncatedTensorError(f"{path}: header truncated")
    (rank,) = struct.unpack_from("<I", raw, 4)
    if rank < 1:
        raise TruncatedTensorError(f"{path}: rank must be >= 1, got {rank}")
    header_end = 8 + 4 * rank
    if len(raw) < header_end:
        raise TruncatedTensorError(f"{path}: shape header truncated")
    shape = struct.unpack_from(f"<{rank}I", raw, 8)
    if any(d < 1 for d in shape):
        raise TruncatedTensorError(f"{path}: zero-sized dimension in {shape}")
    numel = int(np.prod(shape))
    expected = header_end + 4 * numel
    if len(raw) != expected:
        raise TruncatedTensorError(
            f"{path}: expected {expected} bytes for shape {shape}, file has {len(raw)}"
        )
    data = np.frombuffer(raw, dtype="<f4", offset=header_end, count=numel)
    if not np.all(np.isfinite(data)):
        raise NonFiniteTensorError(f"{path}: payload contains NaN or Inf")
    return data.reshape(shape).copy()


def load_mask(path, threshold: int = DEFAULT_MASK_THRESHOLD) -> np.ndarray:
    """Load an 8-bit grayscale PNG/PGM as a boolean lesion mask.

    A pixel is lesion iff its intensity is strictly greater than *threshold*.
    """
    if not 0 <= threshold <= 255:
        raise ValueError(f"threshold must be in [0, 255], got {threshold}")
    try:
        img = Image.open(path)
        img.load()
    except Exception as exc:
        raise MaskError(f"{path}: unreadable mask image: {exc}") from exc
    if img.mode != "L":
        raise MaskError(f"{path}: mask must be 8-bit grayscale, got mode {img.mode!r}")
    return np.asarray(img, dtype=np.uint8) > threshold


def save_mask(mask: np.ndarray, path) -> None:
    """Write a boolean mask as an 8-bit grayscale PNG (lesion = 255)."""
    arr = np.where(np.asarray(mask, dtype=bool), 255, 0).astype(np.uint8)
    Image.fromarray(arr, mode="L").save(path, format="PNG")


@dataclass(frozen=True)
class SampleRecord:
    """One classified image: probabilities, prediction, and tensor references.

    Exactly one of {activation_ref + gradient_refs, cam_refs} is set.  All
    file references are relative to the manifest's directory.
    """

    id: str
    num_classes: int
    probs: tuple[float, ...]
    predicted_class: int
    true_class: int | None = None
    activation_ref: str | None = None
    gradient_refs: tuple[str, ...] | None = None
    cam_refs: tuple[str, ...] | None = None
    mask_ref: str | None = None
    image_ref: str | None = None

    @property
    def max_prob(self) -> float:
        return max(self.probs)

    @property
    def correct(self) -> bool | None:
        if self.true_class is None:
            return None
        return self.predicted_class == self.true_class


@dataclass
class DatasetManifest:
    """An ordered collection of SampleRecords at one evaluation resolution."""

    image_height: int
    image_width: int
    samples: list[SampleRecord] = field(default_factory=list)
    version: str = MANIFEST_VERSION
    root: Path = field(default_factory=Path)

    def resolve(self, ref: str) -> Path:
        return self.root / ref


def _validate_record(rec: SampleRecord) -> None:
    if rec.num_classes < 2:
        raise ManifestError(f"{rec.id}: num_classes must be >= 2")
    if len(rec.probs) != rec.num_classes:
        raise ManifestError(f"{rec.id}: probs length != num_classes")
    if any(p < 0 for p in rec.probs):
        raise ManifestError(f"{rec.id}: negative probability")
    total = sum(rec.probs)
    if abs(total - 1.0) > 1e-5:
        raise ManifestError(f"{rec.id}: probs sum to {total}, not 1")
    argmax = max(range(rec.num_classes), key=lambda c: (rec.probs[c], -c))
    if rec.predicted_class != argmax:
        raise ManifestError(
            f"{rec.id}: predicted_class {rec.predicted_class} != argmax(probs) {argmax}"
        )
    if rec.true_class is not None and not 0 <= rec.true_class < rec.num_classes:
        raise ManifestError(f"{rec.id}: true_class out of range")
    has_grads = rec.activation_ref is not None or rec.gradient_refs is not None
    has_cams = rec.cam_refs is not None
    if has_grads == has_cams:
        raise ManifestError(
            f"{rec.id}: exactly one of activation+gradients or cams must be supplied"
        )
    if has_grads:
        if rec.activation_ref is None or rec.gradient_refs is None:
            raise ManifestError(f"{rec.id}: activation_ref and gradient_refs go together")
        if len(rec.gradient_refs) != rec.num_classes:
            raise ManifestError(f"{rec.id}: need one gradient tensor per class")
    elif len(rec.cam_refs) != rec.num_classes:
        raise ManifestError(f"{rec.id}: need one cam tensor per class")


def _record_refs(rec: SampleRecord):
    if rec.activation_ref is not None:
        yield rec.activation_ref
    for ref in rec.gradient_refs or ():
        yield ref
    for ref in rec.cam_refs or ():
        yield ref
    if rec.mask_ref is not None:
        yield rec.mask_ref
    if rec.image_ref is not None:
        yield rec.image_ref


def _record_to_json(rec: SampleRecord) -> dict:
    out = {
        "id": rec.id,
        "num_classes": rec.num_classes,
        "probs": list(rec.probs),
        "predicted_class": rec.predicted_class,
    }
    if rec.true_class is not None:
        out["true_class"] = rec.true_class
    if rec.activation_ref is not None:
        out["activation_ref"] = rec.activation_ref
        out["gradient_refs"] = list(rec.gradient_refs)
    if rec.cam_refs is not None:
        out["cam_refs"] = list(rec.cam_refs)
    if rec.mask_ref is not None:
        out["mask_ref"] = rec.mask_ref
    if rec.image_ref is not None:
        out["image_ref"] = rec.image_ref
    return out


def _record_from_json(obj: dict) -> SampleRecord:
    try:
        grads = obj.get("gradient_refs")
        cams = obj.get("cam_refs")
        return SampleRecord(
            id=obj["id"],
            num_classes=obj["num_classes"],
            probs=tuple(float(p) for p in obj["probs"]),
            predicted_class=obj["predicted_class"],
            true_class=obj.get("true_class"),
            activation_ref=obj.get("activation_ref"),
            gradient_refs=tuple(grads) if grads is not None else None,
            cam_refs=tuple(cams) if cams is not None else None,
            mask_ref=obj.get("mask_ref"),
            image_ref=obj.get("image_ref"),
        )
    except (KeyError, TypeError) as exc:
        raise ManifestError(f"malformed sample record: {exc}") from exc


def save_manifest(manifest: DatasetManifest, path) -> None:
    """Write a manifest as schema-versioned JSON (refs stay relative)."""
    doc = {
        "version": manifest.version,
        "image_height": manifest.image_height,
        "image_width": manifest.image_width,
        "samples": [_record_to_json(rec) for rec in manifest.samples],
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_manifest(path, check_files: bool = True) -> DatasetManifest:
    """Parse and validate a manifest file.

    Checks record invariants, id uniqueness, a shared class count, and
    (unless *check_files* is false) that every referenced file exists.
    Record order is preserved.
    """
    path = Path(path)
    try:
        doc = json.loads(path.read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise ManifestError(f"{path}: cannot parse manifest: {exc}") from exc
    if doc.get("version") != MANIFEST_VERSION:
        raise ManifestError(f"{path}: unsupported manifest version {doc.get('version')!r}")
    try:
        manifest = DatasetManifest(
            image_height=int(doc["image_height"]),
            image_width=int(doc["image_width"]),
            samples=[_record_from_json(o) for o in doc["samples"]],
            version=doc["version"],
            root=path.parent,
        )
    except (KeyError, TypeError) as exc:
        raise ManifestError(f"{path}: missing manifest field: {exc}") from exc
    if manifest.image_height < 1 or manifest.image_width < 1:
        raise ManifestError(f"{path}: invalid evaluation resolution")

    seen = set()
    for rec in manifest.samples:
        if rec.id in seen:
            raise ManifestError(f"{path}: duplicate sample id {rec.id!r}")
        seen.add(rec.id)
        _validate_record(rec)
    counts = {rec.num_classes for rec in manifest.samples}
    if len(counts) > 1:
        raise ManifestError(f"{path}: records disagree on num_classes: {sorted(counts)}")
    if check_files:
        for rec in manifest.samples:
            for ref in _record_refs(rec):
                if not manifest.resolve(ref).is_file():
                    raise ManifestError(f"{path}: {rec.id}: missing referenced file {ref!r}")
    return manifest
