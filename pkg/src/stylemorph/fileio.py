"""On-disk formats: MFTN tensors, PNG images, landmark/score CSV, manifests.

MFTN layout: magic ``MFTN``, version byte 0x01, dtype byte (0x01 = f32,
0x02 = f64), rank byte, rank little-endian u32 dims, then the row-major
little-endian payload. Multi-tensor artifacts (weights, noise sets, styles,
PCA models) are directories of ``.mftn`` files plus a ``manifest.json``
sidecar.
"""

from __future__ import annotations

import csv
import json
import struct
from pathlib import Path

import numpy as np
from PIL import Image

MAGIC = b"MFTN"
VERSION = 1
_DTYPES = {0x01: "<f4", 0x02: "<f8"}
_CODES = {"<f4": 0x01, "<f8": 0x02}


class FileFormatError(ValueError):
    """Malformed or unsupported artifact file."""


def save_tensor(path, array: np.ndarray, dtype: str = "f64") -> None:
    """Write one tensor as MFTN. ``dtype`` is ``"f32"`` or ``"f64"``."""
    code = {"f32": "<f4", "f64": "<f8"}.get(dtype)
    if code is None:
        raise FileFormatError(f"unsupported dtype {dtype!r}")
    # note: ascontiguousarray would promote 0-d arrays to 1-d
    a = np.asarray(array, dtype=np.float64, order="C")
    if a.ndim > 255:
        raise FileFormatError("rank exceeds format limit")
    header = MAGIC + bytes([VERSION, _CODES[code], a.ndim])
    header += b"".join(struct.pack("<I", d) for d in a.shape)
    payload = a.astype(code).tobytes(order="C")
    Path(path).write_bytes(header + payload)


def load_tensor(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if len(raw) < 7 or raw[:4] != MAGIC:
        raise FileFormatError(f"{path}: not an MFTN file")
    if raw[4] != VERSION:
        raise FileFormatError(f"{path}: unsupported version {raw[4]}")
    dtype = _DTYPES.get(raw[5])
    if dtype is None:
        raise FileFormatError(f"{path}: unknown dtype code {raw[5]:#x}")
    rank = raw[6]
    off = 7 + 4 * rank
    dims = struct.unpack(f"<{rank}I", raw[7:off]) if rank else ()
    count = int(np.prod(dims)) if rank else 1
    data = np.frombuffer(raw, dtype=dtype, count=count, offset=off)
    if data.size != count:
        raise FileFormatError(f"{path}: truncated payload")
    return data.astype(np.float64).reshape(dims)


def save_tensor_dir(dirpath, tensors: dict[str, np.ndarray],
                    meta: dict | None = None, dtype: str = "f64") -> None:
    """Write a named tensor collection with a JSON manifest sidecar."""
    d = Path(dirpath)
    d.mkdir(parents=True, exist_ok=True)
    files = {}
    for name in sorted(tensors):
        fname = name.replace("/", "_") + ".mftn"
        save_tensor(d / fname, tensors[name], dtype=dtype)
        files[name] = fname
    manifest = {"format": "mftn-dir", "tensors": files, "meta": meta or {}}
    (d / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))


def load_tensor_dir(dirpath) -> tuple[dict[str, np.ndarray], dict]:
    d = Path(dirpath)
    mpath = d / "manifest.json"
    if not mpath.is_file():
        raise FileFormatError(f"{dirpath}: missing manifest.json")
    manifest = json.loads(mpath.read_text())
    if manifest.get("format") != "mftn-dir":
        raise FileFormatError(f"{dirpath}: not a tensor directory")
    tensors = {name: load_tensor(d / fname)
               for name, fname in manifest["tensors"].items()}
    return tensors, manifest.get("meta", {})


# -- images -------------------------------------------------------------------

def save_image(path, image: np.ndarray) -> None:
    """Write an HxWx3 float image in [0,1] as 8-bit RGB PNG."""
    a = np.asarray(image, dtype=np.float64)
    if a.ndim != 3 or a.shape[2] != 3:
        raise FileFormatError(f"expected HxWx3 image, got {a.shape}")
    u8 = np.clip(np.rint(a * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(u8, mode="RGB").save(path, format="PNG")


def load_image(path) -> np.ndarray:
    with Image.open(path) as im:
        u8 = np.asarray(im.convert("RGB"), dtype=np.uint8)
    return u8.astype(np.float64) / 255.0


# -- landmark CSV ----------------------------------------------------------------

def save_landmarks(path, points: np.ndarray) -> None:
    pts = np.asarray(points, dtype=np.float64)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["index", "x", "y"])
        for i, (x, y) in enumerate(pts):
            w.writerow([i, repr(float(x)), repr(float(y))])


def load_landmarks(path) -> np.ndarray:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    if not rows:
        raise FileFormatError(f"{path}: no landmark rows")
    try:
        pts = [(int(r["index"]), float(r["x"]), float(r["y"])) for r in rows]
    except (KeyError, TypeError, ValueError) as e:
        raise FileFormatError(f"{path}: bad landmark row: {e}") from e
    pts.sort()
    if [i for i, _, _ in pts] != list(range(len(pts))):
        raise FileFormatError(f"{path}: landmark indices not contiguous from 0")
    return np.array([(x, y) for _, x, y in pts], dtype=np.float64)


# -- score CSV --------------------------------------------------------------------

def save_scores(path, labeled_scores: list[tuple[str, float]]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["label", "score"])
        for label, score in labeled_scores:
            w.writerow([label, repr(float(score))])


def load_scores(path) -> tuple[np.ndarray, np.ndarray]:
    """Read a label,score CSV into (bona_fide_scores, morph_scores)."""
    bona, morph = [], []
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            try:
                label, score = row["label"].strip(), float(row["score"])
            except (KeyError, TypeError, ValueError) as e:
                raise FileFormatError(f"{path}: bad score row: {e}") from e
            if label == "bona_fide":
                bona.append(score)
            elif label == "morph":
                morph.append(score)
            else:
                raise FileFormatError(f"{path}: unknown label {label!r}")
    return np.asarray(bona), np.asarray(morph)


def save_trial_scores(path, trials: list[tuple[str, float, float]]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["morph_id", "score_a", "score_b"])
        for mid, sa, sb in trials:
            w.writerow([mid, repr(float(sa)), repr(float(sb))])


# -- pair manifest ------------------------------------------------------------------

_PAIR_KEYS = ("subject_a", "subject_b", "landmarks_a", "landmarks_b",
              "probe_a", "probe_b")


def load_pair_manifest(path) -> list[dict]:
    """Parse and validate a JSON list of morphing-pair entries.

    Each entry names the two subjects, their landmark CSVs and probe images;
    an optional ``morph`` path points at the synthesized morph to score.
    Every referenced file must exist.
    """
    base = Path(path).parent
    try:
        entries = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as e:
        raise FileFormatError(f"{path}: {e}") from e
    if not isinstance(entries, list) or not entries:
        raise FileFormatError(f"{path}: manifest must be a non-empty list")
    out = []
    for i, entry in enumerate(entries):
        if not isinstance(entry, dict):
            raise FileFormatError(f"{path}: entry {i} is not an object")
        missing = [k for k in _PAIR_KEYS if k not in entry]
        if missing:
            raise FileFormatError(f"{path}: entry {i} missing {missing}")
        resolved = {"id": str(entry.get("id", f"pair{i:03d}"))}
        for key in _PAIR_KEYS + ("morph",):
            if key not in entry:
                continue
            p = Path(entry[key])
            if not p.is_absolute():
                p = base / p
            if not p.is_file():
                raise FileFormatError(f"{path}: entry {i} {key} not found: {p}")
            resolved[key] = p
        out.append(resolved)
    return out
