"""File formats: PPM/PGM images, keypoint JSON, dataset manifests and checkpoints."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .hand_model import N_JOINTS, HandParams
from .losses import Keypoints2D
from .render import CameraModel

log = logging.getLogger(__name__)

MANIFEST_SCHEMA = "handfit.manifest/1"
CHECKPOINT_SCHEMA = "handfit.checkpoint/1"
_MANIFEST_FIELDS = {"schema", "root", "sequences", "description"}


class FormatError(ValueError):
    pass


# ---------------------------------------------------------------- images


def _read_header(data: bytes, path):
    tokens, pos = [], 0
    while len(tokens) < 4:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if pos < len(data) and data[pos:pos + 1] == b"#":
            while pos < len(data) and data[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise FormatError(f"{path}: truncated header")
        tokens.append(data[start:pos])
    # exactly one whitespace byte separates the header from the raster
    return tokens, pos + 1


def read_image(path) -> np.ndarray:
    """Read a binary 8-bit PPM (P6) as ``(H, W, 3)`` or PGM (P5) as ``(H, W)`` floats in [0, 1]."""
    data = Path(path).read_bytes()
    magic = data[:2]
    if magic in (b"P3", b"P2"):
        raise FormatError(f"{path}: ASCII {magic.decode()} images are not supported")
    if magic not in (b"P6", b"P5"):
        raise FormatError(f"{path}: not a binary PPM/PGM file")
    try:
        tokens, start = _read_header(data, path)
        w, h, maxval = int(tokens[1]), int(tokens[2]), int(tokens[3])
    except ValueError as exc:
        raise FormatError(f"{path}: malformed header") from exc
    if maxval != 255:
        raise FormatError(f"{path}: only 8-bit images (max value 255) are supported, got {maxval}")
    ch = 3 if magic == b"P6" else 1
    raster = np.frombuffer(data, dtype=np.uint8, count=w * h * ch, offset=start) if len(data) >= start + w * h * ch else None
    if raster is None:
        raise FormatError(f"{path}: truncated raster")
    img = raster.reshape(h, w, ch) if ch == 3 else raster.reshape(h, w)
    return img.astype(float) / 255.0


def to_uint8(img) -> np.ndarray:
    return np.round(np.clip(np.asarray(img, dtype=float), 0.0, 1.0) * 255.0).astype(np.uint8)


def write_image(path, img) -> None:
    """Write ``(H, W, 3)`` as P6 or ``(H, W)`` as P5; values in [0, 1] are quantised to 8 bits."""
    a = to_uint8(img)
    if a.ndim == 3 and a.shape[2] == 3:
        magic = b"P6"
    elif a.ndim == 2:
        magic = b"P5"
    else:
        raise FormatError(f"cannot write image of shape {a.shape}")
    header = magic + b"\n%d %d\n255\n" % (a.shape[1], a.shape[0])
    Path(path).write_bytes(header + a.tobytes())


# ---------------------------------------------------------------- keypoints


def parse_keypoints(data, width: int, height: int, source="keypoints") -> Keypoints2D:
    """Pixel triples ``[u, v, conf]`` (list or OpenPose dict) to normalized keypoints."""
    if isinstance(data, dict):
        if "people" in data:
            people = data["people"]
            if not people:
                raise FormatError(f"{source}: no people in OpenPose output")
            data = people[0]
        flat = data.get("hand_right_keypoints_2d", data.get("keypoints"))
        if flat is None:
            raise FormatError(f"{source}: no keypoint array found")
        arr = np.asarray(flat, dtype=float)
        if arr.ndim == 1:
            if arr.size % 3:
                raise FormatError(f"{source}: flat keypoint array length {arr.size} is not a multiple of 3")
            arr = arr.reshape(-1, 3)
    else:
        try:
            arr = np.asarray(data, dtype=float)
        except (TypeError, ValueError) as exc:
            raise FormatError(f"{source}: keypoints must be numeric triples") from exc
    if arr.ndim != 2 or arr.shape[1] != 3:
        raise FormatError(f"{source}: expected {N_JOINTS} [u, v, conf] triples, got shape {arr.shape}")
    if arr.shape[0] != N_JOINTS:
        raise FormatError(f"{source}: expected {N_JOINTS} keypoints, got {arr.shape[0]}")
    if not np.all(np.isfinite(arr)):
        raise FormatError(f"{source}: non-finite keypoint values")
    conf = arr[:, 2]
    if np.any((conf < 0) | (conf > 1)):
        log.warning("%s: confidences outside [0, 1] clamped", source)
        conf = np.clip(conf, 0.0, 1.0)
    pts = arr[:, :2] / np.array([width, height], dtype=float)
    return Keypoints2D(pts, conf)


def load_keypoints(path, width: int, height: int) -> Keypoints2D:
    path = Path(path)
    try:
        data = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: invalid JSON ({exc})") from exc
    return parse_keypoints(data, width, height, source=str(path))


def keypoints_to_json(kp: Keypoints2D, width: int, height: int) -> list:
    px = kp.points * np.array([width, height])
    return [[float(u), float(v), float(c)] for (u, v), c in zip(px, kp.conf)]


# ---------------------------------------------------------------- manifest


@dataclass
class FrameRecord:
    index: int
    image_path: Path | None
    keypoints: Keypoints2D
    camera: CameraModel
    gt_path: Path | None = None
    image: np.ndarray | None = None

    def load_image(self) -> np.ndarray:
        if self.image is None:
            self.image = read_image(self.image_path)
        return self.image


@dataclass
class Sequence:
    id: str
    frames: list = field(default_factory=list)


@dataclass
class Manifest:
    root: Path
    sequences: list


class ManifestError(FormatError):
    def __init__(self, problems):
        super().__init__("; ".join(problems))
        self.problems = list(problems)


def load_manifest(path) -> Manifest:
    """Validate and load a manifest; every violation found is reported together."""
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ManifestError([f"{path}: invalid JSON ({exc})"]) from exc
    problems = []
    if doc.get("schema") != MANIFEST_SCHEMA:
        problems.append(f"schema must be {MANIFEST_SCHEMA!r}")
    for key in sorted(set(doc) - _MANIFEST_FIELDS):
        log.warning("%s: unknown top-level field %r ignored", path, key)
    root = (path.parent / doc.get("root", ".")).resolve()
    sequences = []
    for s in doc.get("sequences", []):
        sid = str(s.get("id", "?"))
        seq = Sequence(sid)
        last = None
        for fr in s.get("frames", []):
            idx = fr.get("index")
            where = f"sequence {sid} frame {idx}"
            if not isinstance(idx, int):
                problems.append(f"{where}: integer index required")
                continue
            if last is not None and idx <= last:
                problems.append(f"{where}: frame indices must be strictly increasing")
            last = idx
            try:
                cam = CameraModel.from_dict(fr.get("camera", s.get("camera", {})))
            except (TypeError, ValueError) as exc:
                problems.append(f"{where}: bad camera ({exc})")
                continue
            img = root / fr["image"] if "image" in fr else None
            if img is not None and not img.exists():
                problems.append(f"{where}: missing image file {img}")
            kp_path = root / fr.get("keypoints", "")
            if "keypoints" not in fr or not kp_path.is_file():
                problems.append(f"{where}: missing keypoint file {kp_path}")
                continue
            gt = root / fr["ground_truth"] if "ground_truth" in fr else None
            if gt is not None and not gt.exists():
                problems.append(f"{where}: missing ground-truth file {gt}")
            try:
                kp = load_keypoints(kp_path, cam.width, cam.height)
            except FormatError as exc:
                problems.append(f"{where}: {exc}")
                continue
            seq.frames.append(FrameRecord(idx, img, kp, cam, gt))
        sequences.append(seq)
    if not sequences:
        problems.append("manifest lists no sequences")
    if problems:
        raise ManifestError(problems)
    return Manifest(root, sequences)


def write_manifest(path, sequences: dict, root: str = ".", description: str | None = None) -> None:
    """``sequences`` maps id -> list of frame dicts (index, image, keypoints, camera, ground_truth)."""
    doc = {"schema": MANIFEST_SCHEMA, "root": root,
           "sequences": [{"id": sid, "frames": frames} for sid, frames in sequences.items()]}
    if description:
        doc["description"] = description
    Path(path).write_text(json.dumps(doc, indent=1))


# ---------------------------------------------------------------- checkpoints


def save_checkpoint(path, params: list, frame_indices=None, extra: dict | None = None) -> None:
    doc = {
        "schema": CHECKPOINT_SCHEMA,
        "frames": [p.to_dict() for p in params],
        "frame_indices": list(frame_indices) if frame_indices is not None else list(range(len(params))),
    }
    if extra:
        doc.update(extra)
    Path(path).write_text(json.dumps(doc))


def load_checkpoint(path):
    doc = json.loads(Path(path).read_text())
    if doc.get("schema") != CHECKPOINT_SCHEMA:
        raise FormatError(f"{path}: unsupported checkpoint schema {doc.get('schema')!r}")
    return [HandParams.from_dict(d) for d in doc["frames"]], doc
