"""File formats: UFG1 feature grids, annotation-set JSON, and config files.

UFG1 layout (little-endian): 4-byte magic "UFG1"; four uint32 fields gh, gw,
dim, patch_size; then gh*gw*dim IEEE-754 float32 values ordered row-major
(y, then x, then channel). Annotation sets are JSON documents with bit-exact
float round-tripping (shortest-repr decimal serialization).
"""

from __future__ import annotations

import json
import os
import struct
import tempfile
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Dict, List, Optional, Tuple, Union

import jsonschema
import numpy as np

from hiermask.features import FeatureGrid
from hiermask.masks import BinaryMask, ScoredMask
from hiermask.postprocess import AnnotationSet

MAGIC = b"UFG1"
_HEADER = struct.Struct("<4sIIII")


class FeatureGridFormatError(ValueError):
    """Malformed UFG1 file."""


class BadMagicError(FeatureGridFormatError):
    pass


class TruncatedPayloadError(FeatureGridFormatError):
    pass


class NonFiniteFeatureError(FeatureGridFormatError):
    pass


class AnnotationFormatError(ValueError):
    """Malformed annotation-set JSON; the message carries a JSON pointer."""


class ConfigError(ValueError):
    """Unknown key, unparsable value, or out-of-range value in a config file."""


def _atomic_write_bytes(path: Union[str, Path], payload: bytes) -> None:
    path = Path(path)
    fd, tmp = tempfile.mkstemp(dir=path.parent or Path("."), prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def write_feature_grid(path: Union[str, Path], grid: FeatureGrid) -> None:
    """Serialize a feature grid to a UFG1 file (atomic write)."""
    header = _HEADER.pack(MAGIC, grid.gh, grid.gw, grid.dim, grid.patch_size)
    payload = np.ascontiguousarray(grid.data, dtype="<f4").tobytes()
    _atomic_write_bytes(path, header + payload)


def read_feature_grid(path: Union[str, Path]) -> FeatureGrid:
    """Parse and validate a UFG1 file."""
    blob = Path(path).read_bytes()
    if len(blob) < 4 or blob[:4] != MAGIC:
        raise BadMagicError(f"bad magic in {path}: expected {MAGIC!r}, got {blob[:4]!r}")
    if len(blob) < _HEADER.size:
        raise TruncatedPayloadError(f"truncated header in {path}: {len(blob)} bytes")
    _, gh, gw, dim, patch_size = _HEADER.unpack_from(blob)
    expected = gh * gw * dim * 4
    got = len(blob) - _HEADER.size
    if got < expected:
        raise TruncatedPayloadError(
            f"truncated payload in {path}: expected {expected} bytes, got {got}"
        )
    if got > expected:
        raise FeatureGridFormatError(
            f"oversized payload in {path}: expected {expected} bytes, got {got}"
        )
    data = np.frombuffer(blob, dtype="<f4", offset=_HEADER.size).reshape(gh, gw, dim)
    finite = np.isfinite(data)
    if not finite.all():
        bad = np.argwhere(~finite)[0]
        raise NonFiniteFeatureError(
            f"non-finite value at (y={bad[0]}, x={bad[1]}, c={bad[2]}) in {path}"
        )
    return FeatureGrid(data, int(patch_size))


ANNOTATION_SCHEMA = {
    "type": "object",
    "required": ["image_id", "height", "width", "masks"],
    "additionalProperties": False,
    "properties": {
        "image_id": {"type": ["string", "integer"]},
        "height": {"type": "integer", "minimum": 1},
        "width": {"type": "integer", "minimum": 1},
        "masks": {
            "type": "array",
            "items": {
                "type": "object",
                "required": ["id", "rle", "score", "level"],
                "additionalProperties": False,
                "properties": {
                    "id": {"type": ["string", "integer"]},
                    "rle": {"type": "array", "items": {"type": "integer", "minimum": 0},
                            "minItems": 1},
                    "score": {"type": "number", "minimum": 0, "maximum": 1},
                    "level": {"type": "integer", "minimum": 0},
                    "parent_id": {"type": ["string", "integer"]},
                    "provenance": {"type": "string"},
                },
            },
        },
    },
}
_VALIDATOR = jsonschema.Draft202012Validator(ANNOTATION_SCHEMA)


def _pointer(parts) -> str:
    return "/" + "/".join(str(p) for p in parts) if parts else "/"


def annotation_to_doc(aset: AnnotationSet) -> Dict[str, object]:
    """JSON-ready document for an annotation set; every mask needs an id."""
    masks = []
    for i, m in enumerate(aset.masks):
        if m.mask_id is None:
            raise AnnotationFormatError(f"mask at /masks/{i} has no id; assign ids before writing")
        entry: Dict[str, object] = {
            "id": m.mask_id,
            "rle": list(m.mask.rle),
            "score": m.score,
            "level": m.level,
        }
        if m.parent_id is not None:
            entry["parent_id"] = m.parent_id
        if m.provenance is not None:
            entry["provenance"] = m.provenance
        masks.append(entry)
    return {
        "image_id": aset.image_id,
        "height": aset.height,
        "width": aset.width,
        "masks": masks,
    }


def annotation_bytes(aset: AnnotationSet) -> bytes:
    return (json.dumps(annotation_to_doc(aset), indent=2) + "\n").encode("utf-8")


def write_annotation_set(path: Union[str, Path], aset: AnnotationSet) -> None:
    """Serialize an annotation set to JSON (atomic write)."""
    _atomic_write_bytes(path, annotation_bytes(aset))


def read_annotation_set(path: Union[str, Path]) -> AnnotationSet:
    """Parse and validate an annotation-set JSON file."""
    try:
        doc = json.loads(Path(path).read_text("utf-8"))
    except json.JSONDecodeError as exc:
        raise AnnotationFormatError(f"invalid JSON in {path}: {exc}") from exc
    error = jsonschema.exceptions.best_match(_VALIDATOR.iter_errors(doc))
    if error is not None:
        raise AnnotationFormatError(
            f"schema violation at {_pointer(error.absolute_path)}: {error.message}"
        )
    height, width = doc["height"], doc["width"]
    masks: List[ScoredMask] = []
    for i, entry in enumerate(doc["masks"]):
        where = f"/masks/{i}"
        total = sum(entry["rle"])
        if total != height * width:
            raise AnnotationFormatError(
                f"schema violation at {where}/rle: counts sum to {total}, "
                f"expected {height * width}"
            )
        try:
            masks.append(
                ScoredMask(
                    mask=BinaryMask(height, width, tuple(entry["rle"])),
                    score=float(entry["score"]),
                    level=int(entry["level"]),
                    parent_id=entry.get("parent_id"),
                    mask_id=entry["id"],
                    provenance=entry.get("provenance"),
                )
            )
        except ValueError as exc:
            raise AnnotationFormatError(f"invalid mask at {where}: {exc}") from exc
    try:
        return AnnotationSet(doc["image_id"], height, width, masks)
    except ValueError as exc:
        raise AnnotationFormatError(f"invalid annotation set in {path}: {exc}") from exc


@dataclass(frozen=True)
class PipelineConfig:
    """All pipeline tunables with their paper-default values."""

    tau: float = 0.3
    thetas: Tuple[float, ...] = (0.6, 0.5, 0.4, 0.3, 0.2, 0.1)
    tau_self_train: float = 0.7
    selftrain_dedup_iou: float = 0.5
    tau_plus: float = 0.02
    tau_ncut: float = 0.15
    epsilon: float = 1e-5
    t_max: int = 3
    nms_iou: float = 0.9
    k_point: int = 6
    min_area: int = 100

    def __post_init__(self) -> None:
        def bad(key: str, why: str):
            return ConfigError(f"config key {key!r} {why}")

        if not 0.0 <= self.tau <= 1.0:
            raise bad("tau", f"must be in [0, 1], got {self.tau}")
        if not self.thetas:
            raise bad("thetas", "must not be empty")
        if any(not (0.0 < t < 1.0) for t in self.thetas):
            raise bad("thetas", f"entries must be in (0, 1), got {self.thetas}")
        if any(nxt >= prev for nxt, prev in zip(self.thetas[1:], self.thetas)):
            raise bad("thetas", f"must be strictly descending, got {self.thetas}")
        if not 0.0 <= self.tau_self_train <= 1.0:
            raise bad("tau_self_train", f"must be in [0, 1], got {self.tau_self_train}")
        if not 0.0 < self.selftrain_dedup_iou <= 1.0:
            raise bad("selftrain_dedup_iou", f"must be in (0, 1], got {self.selftrain_dedup_iou}")
        if not 0.0 <= self.tau_plus <= 1.0:
            raise bad("tau_plus", f"must be in [0, 1], got {self.tau_plus}")
        if not 0.0 < self.epsilon < self.tau_ncut < 1.0:
            raise bad("epsilon", f"must satisfy 0 < epsilon < tau_ncut < 1, got "
                                 f"epsilon={self.epsilon}, tau_ncut={self.tau_ncut}")
        if self.t_max < 1:
            raise bad("t_max", f"must be >= 1, got {self.t_max}")
        if not 0.0 < self.nms_iou <= 1.0:
            raise bad("nms_iou", f"must be in (0, 1], got {self.nms_iou}")
        if self.k_point < 1:
            raise bad("k_point", f"must be >= 1, got {self.k_point}")
        if self.min_area < 0:
            raise bad("min_area", f"must be >= 0, got {self.min_area}")


_INT_KEYS = {"t_max", "k_point", "min_area"}


def _parse_config_value(key: str, raw: str):
    raw = raw.strip()
    try:
        if key == "thetas":
            body = raw.strip().lstrip("[").rstrip("]")
            return tuple(float(v.strip()) for v in body.split(",") if v.strip())
        if key in _INT_KEYS:
            return int(raw)
        return float(raw)
    except ValueError as exc:
        raise ConfigError(f"config key {key!r} has unparsable value {raw!r}") from exc


def load_config(path: Union[str, Path], overrides: Optional[Dict[str, object]] = None) -> PipelineConfig:
    """Parse a ``key = value`` config file; omitted keys keep their defaults.

    Lines starting with '#' and blank lines are ignored. ``thetas`` accepts a
    comma-separated list, optionally in brackets. ``overrides`` (e.g. parsed
    CLI flags) win over file values.
    """
    known = {f.name for f in fields(PipelineConfig)}
    values: Dict[str, object] = {}
    for lineno, line in enumerate(Path(path).read_text("utf-8").splitlines(), start=1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        if "=" not in stripped:
            raise ConfigError(f"line {lineno} is not a key=value pair: {line!r}")
        key, raw = stripped.split("=", 1)
        key = key.strip()
        if key not in known:
            raise ConfigError(f"unknown config key: {key!r}")
        values[key] = _parse_config_value(key, raw)
    if overrides:
        for key, value in overrides.items():
            if key not in known:
                raise ConfigError(f"unknown config key: {key!r}")
            if value is not None:
                values[key] = value
    return PipelineConfig(**values)
