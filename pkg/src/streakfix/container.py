"""Bit-exact on-disk formats: SVCB image files and the dataset manifest.

An image file is a 16-byte header (magic ``SVCB``, u32 version, u32 width,
u32 height, all little-endian) followed by a width*height float32
little-endian row-major payload.  A dataset is a directory containing a
``manifest.json`` that lists paired samples plus the generation settings.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import InputError

IMAGE_MAGIC = b"SVCB"
IMAGE_VERSION = 1
_HEADER = struct.Struct("<4sIII")

MANIFEST_NAME = "manifest.json"


def write_image(path, image):
    """Write a 2D float array to `path` in the SVCB container format."""
    arr = np.asarray(image)
    if arr.ndim != 2:
        raise InputError(f"expected a 2D image, got shape {arr.shape}")
    height, width = arr.shape
    payload = np.ascontiguousarray(arr, dtype="<f4")
    path = Path(path)
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(IMAGE_MAGIC, IMAGE_VERSION, width, height))
        fh.write(payload.tobytes())


def read_image(path):
    """Read an SVCB image file back into a float32 (height, width) array."""
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise OSError(f"cannot read image file {path}: {exc}") from exc
    if len(raw) < _HEADER.size:
        raise InputError(f"{path}: truncated header ({len(raw)} bytes)")
    magic, version, width, height = _HEADER.unpack_from(raw)
    if magic != IMAGE_MAGIC:
        raise InputError(f"{path}: bad magic {magic!r}, expected {IMAGE_MAGIC!r}")
    if version != IMAGE_VERSION:
        raise InputError(f"{path}: unsupported version {version}")
    expected = _HEADER.size + 4 * width * height
    if len(raw) != expected:
        raise InputError(f"{path}: payload size {len(raw)} != expected {expected}")
    data = np.frombuffer(raw, dtype="<f4", offset=_HEADER.size)
    return data.reshape(height, width).copy()


def export_png16(path, image):
    """Export an image in [0, 1] as a 16-bit grayscale PNG (visualization only)."""
    from PIL import Image as PILImage

    arr = np.clip(np.asarray(image, dtype=np.float64), 0.0, 1.0)
    quantized = np.round(arr * 65535.0).astype(np.uint16)
    PILImage.fromarray(quantized).save(Path(path))


@dataclass
class SampleRecord:
    """One paired sparse/dense sample as listed in a dataset manifest."""

    phantom_id: str
    slice_id: str
    sparse_path: str
    dense_path: str
    width: int
    height: int

    def to_dict(self):
        return {
            "phantom_id": self.phantom_id,
            "slice_id": self.slice_id,
            "sparse_path": self.sparse_path,
            "dense_path": self.dense_path,
            "width": self.width,
            "height": self.height,
        }

    @classmethod
    def from_dict(cls, d):
        return cls(
            phantom_id=d["phantom_id"],
            slice_id=d["slice_id"],
            sparse_path=d["sparse_path"],
            dense_path=d["dense_path"],
            width=int(d["width"]),
            height=int(d["height"]),
        )


class Dataset:
    """A persisted collection of paired samples rooted at a directory."""

    def __init__(self, root, samples, meta=None):
        self.root = Path(root)
        self.samples = list(samples)
        self.meta = dict(meta or {})

    def __len__(self):
        return len(self.samples)

    @property
    def phantom_ids(self):
        """Unique phantom ids in first-appearance order."""
        seen = {}
        for rec in self.samples:
            seen.setdefault(rec.phantom_id, None)
        return list(seen)

    def load_pair(self, record):
        """Load (sparse, dense) arrays for one sample record."""
        sparse = read_image(self.root / record.sparse_path)
        dense = read_image(self.root / record.dense_path)
        return sparse, dense

    def samples_for(self, phantom_ids):
        wanted = set(phantom_ids)
        return [rec for rec in self.samples if rec.phantom_id in wanted]

    def manifest_dict(self):
        return {
            "format": "svcb-dataset",
            "version": 1,
            "meta": self.meta,
            "samples": [rec.to_dict() for rec in self.samples],
        }

    def write_manifest(self):
        text = json.dumps(self.manifest_dict(), indent=2, sort_keys=True)
        (self.root / MANIFEST_NAME).write_text(text + "\n")

    @classmethod
    def load(cls, root):
        root = Path(root)
        manifest = root / MANIFEST_NAME
        try:
            doc = json.loads(manifest.read_text())
        except OSError as exc:
            raise OSError(f"cannot read dataset manifest {manifest}: {exc}") from exc
        except json.JSONDecodeError as exc:
            raise InputError(f"{manifest}: invalid JSON: {exc}") from exc
        if doc.get("format") != "svcb-dataset":
            raise InputError(f"{manifest}: not a svcb-dataset manifest")
        samples = [SampleRecord.from_dict(d) for d in doc.get("samples", [])]
        return cls(root, samples, doc.get("meta", {}))


def write_output_set(root, keyed_images, meta=None):
    """Persist model outputs keyed by (phantom_id, slice_id).

    `keyed_images` is an ordered sequence of ((phantom_id, slice_id), image)
    pairs; each image lands in `root`/images/ and the manifest records the
    mapping so outputs can later be joined back to their source samples.
    """
    root = Path(root)
    entries = []
    for (phantom_id, slice_id), image in keyed_images:
        arr = np.asarray(image)
        if arr.ndim != 2:
            raise InputError(
                f"output {phantom_id}/{slice_id} is not 2D: shape {arr.shape}"
            )
        rel = f"images/{phantom_id}_{slice_id}.svcb"
        entries.append(
            {
                "phantom_id": phantom_id,
                "slice_id": slice_id,
                "path": rel,
                "width": int(arr.shape[1]),
                "height": int(arr.shape[0]),
                "image": arr,
            }
        )
    (root / "images").mkdir(parents=True, exist_ok=True)
    for entry in entries:
        write_image(root / entry["path"], entry.pop("image"))
    doc = {
        "format": "svcb-outputs",
        "version": 1,
        "meta": dict(meta or {}),
        "outputs": entries,
    }
    text = json.dumps(doc, indent=2, sort_keys=True)
    (root / MANIFEST_NAME).write_text(text + "\n")


def load_output_set(root):
    """Load an output set written by `write_output_set`.

    Returns (images, meta) with images keyed by (phantom_id, slice_id).
    """
    root = Path(root)
    manifest = root / MANIFEST_NAME
    try:
        doc = json.loads(manifest.read_text())
    except OSError as exc:
        raise OSError(f"cannot read output manifest {manifest}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise InputError(f"{manifest}: invalid JSON: {exc}") from exc
    if doc.get("format") != "svcb-outputs":
        raise InputError(f"{manifest}: not a svcb-outputs manifest")
    images = {}
    for entry in doc.get("outputs", []):
        key = (entry["phantom_id"], entry["slice_id"])
        images[key] = read_image(root / entry["path"])
    return images, doc.get("meta", {})
