"""Portable file formats: 16-bit PGM label rasters and polygon JSON lines.

Label rasters are binary PGM (P5, maxval 65535, big-endian samples) where
the sample value is the instance id, plus a required JSON sidecar carrying
the physical resolution and the id-to-class map. Polygons are one JSON
record per line with 64-bit lossless round-tripping. Parsers reject rather
than coerce.
"""

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .bounds import LabelRaster
from .geometry import RAY_COUNT, ShapeDescriptor

IMAGENET_MEAN = np.array([0.485, 0.456, 0.406])
IMAGENET_STD = np.array([0.229, 0.224, 0.225])

PGM_MAXVAL = 65535


class PgmFormatError(ValueError):
    """Malformed PGM container."""


class SidecarError(ValueError):
    """Missing or inconsistent label-raster sidecar."""


class PolygonFormatError(ValueError):
    """Malformed polygon JSONL record."""


def sidecar_path(pgm_path) -> Path:
    return Path(pgm_path).with_suffix(".json")


def write_label_raster(labels: LabelRaster, path) -> None:
    """Write ids as 16-bit big-endian P5 plus the JSON sidecar."""
    ids = labels.ids
    if ids.max(initial=0) > PGM_MAXVAL:
        raise PgmFormatError(f"instance id {ids.max()} exceeds 16-bit range")
    path = Path(path)
    with open(path, "wb") as fh:
        fh.write(f"P5\n{labels.width} {labels.height}\n{PGM_MAXVAL}\n".encode())
        fh.write(ids.astype(">u2").tobytes())
    sidecar = {
        "resolution_um_per_px": labels.resolution,
        "classes": {str(i): labels.classes[i] for i in labels.instance_ids},
    }
    with open(sidecar_path(path), "w") as fh:
        json.dump(sidecar, fh, indent=2)
        fh.write("\n")


def _parse_pgm_header(data: bytes, path):
    """Header tokens of a P5 file; comments (#...) are part of the format."""
    pos = 0
    tokens = []
    while len(tokens) < 4:
        if pos >= len(data):
            raise PgmFormatError(f"{path}: truncated PGM header")
        ch = data[pos : pos + 1]
        if ch == b"#":
            while pos < len(data) and data[pos : pos + 1] != b"\n":
                pos += 1
        elif ch.isspace():
            pos += 1
        else:
            start = pos
            while pos < len(data) and not data[pos : pos + 1].isspace():
                pos += 1
            tokens.append(data[start:pos])
    if pos >= len(data) or not data[pos : pos + 1].isspace():
        raise PgmFormatError(f"{path}: missing whitespace after maxval")
    return tokens, pos + 1


def read_label_raster(path) -> LabelRaster:
    path = Path(path)
    data = path.read_bytes()
    tokens, offset = _parse_pgm_header(data, path)
    if tokens[0] != b"P5":
        raise PgmFormatError(f"{path}: expected P5, found {tokens[0]!r}")
    try:
        width, height, maxval = (int(t) for t in tokens[1:])
    except ValueError as exc:
        raise PgmFormatError(f"{path}: non-integer header fields {tokens[1:]}") from exc
    if maxval != PGM_MAXVAL:
        raise PgmFormatError(f"{path}: maxval must be {PGM_MAXVAL}, found {maxval}")
    if width <= 0 or height <= 0:
        raise PgmFormatError(f"{path}: invalid dimensions {width}x{height}")
    expected = 2 * width * height
    body = data[offset:]
    if len(body) != expected:
        raise PgmFormatError(
            f"{path}: expected {expected} sample bytes, found {len(body)}"
        )
    ids = np.frombuffer(body, dtype=">u2").reshape(height, width).astype(np.int32)

    side = sidecar_path(path)
    if not side.exists():
        raise SidecarError(f"{path}: missing sidecar {side}")
    try:
        meta = json.loads(side.read_text())
    except json.JSONDecodeError as exc:
        raise SidecarError(f"{side}: invalid JSON: {exc}") from exc
    if "resolution_um_per_px" not in meta:
        raise SidecarError(f"{side}: missing resolution_um_per_px")
    resolution = float(meta["resolution_um_per_px"])
    if resolution <= 0:
        raise SidecarError(f"{side}: resolution must be positive, got {resolution}")
    raw_classes = meta.get("classes", {})
    classes = {}
    for key, name in raw_classes.items():
        try:
            classes[int(key)] = str(name)
        except ValueError as exc:
            raise SidecarError(f"{side}: non-integer instance id {key!r}") from exc
    present = set(np.unique(ids).tolist()) - {0}
    missing = sorted(present - set(classes))
    if missing:
        raise SidecarError(f"{side}: instance ids without classes: {missing}")
    return LabelRaster(ids, classes, resolution)


@dataclass(frozen=True)
class PolygonRecord:
    """One serialized nucleus polygon."""

    id: int
    class_name: str
    score: float
    p: tuple
    r: tuple

    def __post_init__(self):
        if len(self.p) != 2:
            raise PolygonFormatError(f"record {self.id}: p must have 2 coordinates")
        if len(self.r) != RAY_COUNT:
            raise PolygonFormatError(
                f"record {self.id}: expected {RAY_COUNT} radii, found {len(self.r)}"
            )
        if not 0.0 <= self.score <= 1.0:
            raise PolygonFormatError(f"record {self.id}: score {self.score} not in [0,1]")
        if any(x <= 0 or not np.isfinite(x) for x in self.r):
            raise PolygonFormatError(f"record {self.id}: radii must be positive and finite")


def write_polygons(records, path) -> None:
    with open(path, "w") as fh:
        for rec in records:
            fh.write(
                json.dumps(
                    {
                        "id": rec.id,
                        "class": rec.class_name,
                        "score": rec.score,
                        "p": list(rec.p),
                        "r": list(rec.r),
                    }
                )
            )
            fh.write("\n")


def read_polygons(path) -> list:
    records = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                payload = json.loads(line)
            except json.JSONDecodeError as exc:
                raise PolygonFormatError(f"{path}:{lineno}: invalid JSON: {exc}") from exc
            try:
                records.append(
                    PolygonRecord(
                        id=int(payload["id"]),
                        class_name=str(payload["class"]),
                        score=float(payload["score"]),
                        p=tuple(float(x) for x in payload["p"]),
                        r=tuple(float(x) for x in payload["r"]),
                    )
                )
            except KeyError as exc:
                raise PolygonFormatError(f"{path}:{lineno}: missing key {exc}") from exc
            except PolygonFormatError as exc:
                raise PolygonFormatError(f"{path}:{lineno}: {exc}") from exc
    return records


def descriptor_to_record(d: ShapeDescriptor, rec_id: int, class_names) -> PolygonRecord:
    names = list(class_names) + ["none"]
    return PolygonRecord(
        id=rec_id,
        class_name=names[d.best_class],
        score=d.score,
        p=tuple(float(x) for x in d.p),
        r=tuple(float(x) for x in d.r),
    )


def record_to_descriptor(rec: PolygonRecord, class_names) -> ShapeDescriptor:
    """Rebuild a descriptor; the stored score becomes the class-slot logit.

    Slots other than the record's class get a large negative logit
    (probability ~ 0), so classification terms reduce to the stored
    confidence.
    """
    names = list(class_names)
    if rec.class_name not in names:
        raise PolygonFormatError(
            f"record {rec.id}: class {rec.class_name!r} not in vocabulary {names}"
        )
    logits = np.full(len(names) + 1, -15.0)
    q = min(max(rec.score, 1e-6), 1.0 - 1e-6)
    logits[names.index(rec.class_name)] = np.log(q / (1.0 - q))
    return ShapeDescriptor(np.array(rec.p), np.array(rec.r), logits)


def normalize_image(image: np.ndarray) -> np.ndarray:
    """Standard per-channel (v - mean)/std RGB normalization."""
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 3 or image.shape[2] != 3:
        raise ValueError(f"expected an HxWx3 RGB image, got shape {image.shape}")
    return (image - IMAGENET_MEAN) / IMAGENET_STD
