"""Dataset records, image loading, and split handling.

The QA corpus is a JSON-lines file; every line carries exactly the fields
id / image_paths / question / answer / category. Malformed lines fail fast
with their line number so bad exports are caught before training.
"""

import json
import os
from dataclasses import dataclass

import numpy as np
from PIL import Image

CATEGORIES = ("perception", "prediction", "planning", "behavior")
RECORD_FIELDS = ("id", "image_paths", "question", "answer", "category")
IMAGE_SIZE = 224
SPLIT_RATIOS = (0.7, 0.2, 0.1)


@dataclass(frozen=True)
class VqaRecord:
    id: str
    image_paths: tuple
    question: str
    answer: str
    category: str


def _check_record(obj, where):
    if not isinstance(obj, dict):
        raise ValueError(f"{where}: expected a JSON object, got {type(obj).__name__}")
    keys = set(obj)
    missing = set(RECORD_FIELDS) - keys
    extra = keys - set(RECORD_FIELDS)
    if missing:
        raise ValueError(f"{where}: missing fields {sorted(missing)}")
    if extra:
        raise ValueError(f"{where}: unexpected fields {sorted(extra)}")
    if not isinstance(obj["id"], str) or not obj["id"]:
        raise ValueError(f"{where}: id must be a non-empty string")
    paths = obj["image_paths"]
    if (not isinstance(paths, list) or not paths
            or not all(isinstance(p, str) and p for p in paths)):
        raise ValueError(f"{where}: image_paths must be a non-empty list of strings")
    for field in ("question", "answer"):
        if not isinstance(obj[field], str) or not obj[field].strip():
            raise ValueError(f"{where}: {field} must be a non-empty string")
    if obj["category"] not in CATEGORIES:
        raise ValueError(f"{where}: category {obj['category']!r} not one of {CATEGORIES}")


def load_records(path):
    """Parse a QA JSON-lines file into VqaRecord objects, validating every
    line. Raises ValueError naming the 1-based line of the first problem."""
    records = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            where = f"{path} line {lineno}"
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ValueError(f"{where}: invalid JSON ({exc.msg})") from exc
            _check_record(obj, where)
            records.append(VqaRecord(
                id=obj["id"],
                image_paths=tuple(obj["image_paths"]),
                question=obj["question"],
                answer=obj["answer"],
                category=obj["category"],
            ))
    if not records:
        raise ValueError(f"{path}: no records found")
    return records


def load_image(path, size=IMAGE_SIZE):
    """Decode to (3, size, size) float32 in [0, 1]."""
    with Image.open(path) as img:
        img = img.convert("RGB")
        if img.size != (size, size):
            img = img.resize((size, size), Image.BILINEAR)
        arr = np.asarray(img, dtype=np.float32) / 255.0
    return np.ascontiguousarray(arr.transpose(2, 0, 1))


def load_views(paths, root=None, size=IMAGE_SIZE):
    """Stack a record's views into (n_views, 3, size, size)."""
    resolved = [os.path.join(root, p) if root else p for p in paths]
    return np.stack([load_image(p, size=size) for p in resolved])


def split_indices(count, seed, ratios=SPLIT_RATIOS):
    """Deterministic shuffle split into train/val/test index arrays."""
    if abs(sum(ratios) - 1.0) > 1e-9:
        raise ValueError(f"split ratios must sum to 1, got {ratios}")
    order = np.random.default_rng(seed).permutation(count)
    n_train = int(round(ratios[0] * count))
    n_val = int(round(ratios[1] * count))
    return {
        "train": np.sort(order[:n_train]),
        "val": np.sort(order[n_train:n_train + n_val]),
        "test": np.sort(order[n_train + n_val:]),
    }


def split_records(records, seed, ratios=SPLIT_RATIOS):
    """Split whole frames, not individual QA rows: all questions about one
    frame land in the same split so evaluation never sees trained imagery."""
    frames = []
    seen = set()
    for rec in records:
        if rec.image_paths not in seen:
            seen.add(rec.image_paths)
            frames.append(rec.image_paths)
    idx = split_indices(len(frames), seed, ratios)
    frame_split = {}
    for name, ids in idx.items():
        for i in ids:
            frame_split[frames[i]] = name
    out = {"train": [], "val": [], "test": []}
    for rec in records:
        out[frame_split[rec.image_paths]].append(rec)
    return out
