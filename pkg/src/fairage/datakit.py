"""Dataset construction and kinship data preparation.

The training corpus is a race-balanced subset of an age/gender/race-stamped
face collection whose filenames follow ``<age>_<gender>_<race>_<stamp>.<ext>``
(the UTKFace convention). The full-source per-race train/test targets are:

    Indian 1284/316, White 1235/295, Asian 1138/274, Black 1170/258

With fewer source files, every race is scaled down by the same factor so
the race balance (and each race's train:test ratio, within one sample) is
preserved. Selection is seeded and the manifest is byte-stable.

Kinship pairs come from the KinFaceW-I / KinFaceW-II benchmark layout:
``images/<relation-dir>/*.jpg`` plus per-relation five-fold metadata in
``meta_data/`` (MATLAB ``*_pairs.mat`` or a ``fold,label,name1,name2`` CSV).
"""

import csv
import json
import math
import os
import random
import re
from collections import Counter
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from .core import (IMAGE_SIZE, ConfigError, IntegrityError, RaceLabel,
                   ShapeError, ValidationError, derive_seed, normalize_image,
                   denormalize_image, validate_age, validate_image)

# Source race codes, per the public filename convention. Code 4 ("others")
# falls outside the four-way label set and is skipped during construction.
UTKFACE_RACE_CODES = {0: RaceLabel.WHITE, 1: RaceLabel.BLACK,
                      2: RaceLabel.ASIAN, 3: RaceLabel.INDIAN}

FULL_SPLIT_COUNTS = {
    RaceLabel.INDIAN: (1284, 316),
    RaceLabel.WHITE: (1235, 295),
    RaceLabel.ASIAN: (1138, 274),
    RaceLabel.BLACK: (1170, 258),
}

RELATIONS = ("FS", "FD", "MS", "MD")
RELATION_DIRS = {"FS": "father-son", "FD": "father-dau",
                 "MS": "mother-son", "MD": "mother-dau"}
RELATION_PREFIX = {"FS": "fs", "FD": "fd", "MS": "ms", "MD": "md"}
KINSHIP_PAIR_COUNTS = {
    "KinFaceW-I": {"FS": 156, "FD": 134, "MS": 116, "MD": 127},
    "KinFaceW-II": {"FS": 250, "FD": 250, "MS": 250, "MD": 250},
}
FOLDS = (1, 2, 3, 4, 5)

_NAME_RE = re.compile(r"^(?P<age>\d+)_(?P<gender>\d+)_(?P<race>\d+)_(?P<stamp>.+)$")


class ParseError(ValidationError):
    """A source filename does not follow the stamped naming convention."""


class ShortfallError(IntegrityError):
    """Not enough source files to build the requested dataset."""

    def __init__(self, message, report=None):
        super().__init__(message)
        self.report = report or {}


@dataclass(frozen=True)
class LabeledFace:
    path: str
    age: int
    race: RaceLabel
    split: str


@dataclass(frozen=True)
class KinPair:
    parent: str
    child: str
    relation: str
    kin: bool
    fold: int


def parse_source_filename(name: str):
    """Split ``<age>_<gender>_<race>_<stamp>.<ext>`` into its integer fields."""
    stem = name
    for suffix in Path(name).suffixes[::-1]:
        stem = stem[:-len(suffix)]
    match = _NAME_RE.match(stem)
    if match is None:
        parts = stem.split("_")
        for i, field in enumerate(("age", "gender", "race")):
            if i >= len(parts) or not parts[i].isdigit():
                bad = parts[i] if i < len(parts) else "<missing>"
                raise ParseError(f"cannot parse {name!r}: bad {field} token {bad!r}")
        raise ParseError(f"cannot parse {name!r}: missing stamp token")
    return (int(match.group("age")), int(match.group("gender")), int(match.group("race")))


def scan_source(source_dir):
    """Collect parseable faces per race; returns (by_race, skipped counters)."""
    source_dir = Path(source_dir)
    if not source_dir.is_dir():
        raise ConfigError(f"source directory not found: {source_dir}")
    by_race = {race: [] for race in RaceLabel}
    skipped = Counter()
    for entry in sorted(p for p in source_dir.iterdir() if p.is_file()):
        try:
            age, _, race_code = parse_source_filename(entry.name)
        except ParseError:
            skipped["unparseable"] += 1
            continue
        label = UTKFACE_RACE_CODES.get(race_code)
        if label is None:
            skipped["other_race"] += 1
            continue
        if not (0 < age <= 120):
            skipped["age_out_of_range"] += 1
            continue
        by_race[label].append((str(entry), age))
    return by_race, dict(skipped)


def build_balanced_dataset(source_dir, seed: int, strict: bool = False):
    """Select a race-balanced train/test subset; returns (faces, summary).

    ``strict=True`` demands the full per-race targets and raises a
    :class:`ShortfallError` listing the per-race deficit otherwise.
    """
    by_race, skipped = scan_source(source_dir)
    availability = {race: len(files) for race, files in by_race.items()}
    totals = {race: sum(FULL_SPLIT_COUNTS[race]) for race in RaceLabel}
    empty = [race.name for race in RaceLabel if availability[race] == 0]
    if empty:
        raise ShortfallError(f"no usable files for race(s): {', '.join(empty)}",
                             report={"available": {r.name: availability[r] for r in RaceLabel}})
    scale = min(1.0, min(availability[race] / totals[race] for race in RaceLabel))
    if strict and scale < 1.0:
        deficit = {race.name: max(0, totals[race] - availability[race]) for race in RaceLabel}
        raise ShortfallError(f"insufficient files for the full targets (scale {scale:.4f})",
                             report={"available": {r.name: availability[r] for r in RaceLabel},
                                     "deficit": deficit})

    faces = []
    counts = {}
    for race in RaceLabel:
        train_full, test_full = FULL_SPLIT_COUNTS[race]
        total_full = train_full + test_full
        take = math.floor(scale * total_full)
        n_test = round(take * (test_full / total_full))
        n_train = take - n_test
        files = sorted(by_race[race])
        rng = random.Random(derive_seed(seed, "balanced-split", race.name))
        rng.shuffle(files)
        chosen = files[:take]
        for path, age in chosen[:n_test]:
            faces.append(LabeledFace(path, age, race, "test"))
        for path, age in chosen[n_test:]:
            faces.append(LabeledFace(path, age, race, "train"))
        counts[race.name] = {"train": n_train, "test": n_test}

    faces.sort(key=lambda f: (f.split, f.race.value, f.path))
    histogram = {"train": {}, "test": {}}
    for face in faces:
        bucket = histogram[face.split]
        bucket[str(face.age)] = bucket.get(str(face.age), 0) + 1
    summary = {
        "seed": seed,
        "source": str(Path(source_dir)),
        "scale": scale,
        "counts": counts,
        "age_histogram": {split: dict(sorted(h.items(), key=lambda kv: int(kv[0])))
                          for split, h in histogram.items()},
        "skipped": skipped,
    }
    return faces, summary


def write_manifest(faces, summary, out_dir):
    """Write the line-delimited manifest plus its summary, atomically."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    manifest_path = out_dir / "manifest.jsonl"
    summary_path = out_dir / "manifest.summary.json"
    tmp = manifest_path.with_suffix(".jsonl.tmp")
    with open(tmp, "w") as fh:
        for face in faces:
            fh.write(json.dumps({"path": face.path, "age": face.age,
                                 "race": face.race.name, "split": face.split},
                                sort_keys=True) + "\n")
    os.replace(tmp, manifest_path)
    tmp = summary_path.with_suffix(".json.tmp")
    tmp.write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    os.replace(tmp, summary_path)
    return manifest_path, summary_path


def load_manifest(path):
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"manifest not found: {path}")
    faces = []
    for lineno, line in enumerate(path.read_text().splitlines(), 1):
        if not line.strip():
            continue
        try:
            record = json.loads(line)
            faces.append(LabeledFace(record["path"], int(record["age"]),
                                     RaceLabel[record["race"]], record["split"]))
        except (KeyError, ValueError) as exc:
            raise IntegrityError(f"{path}:{lineno}: bad manifest record: {exc}") from exc
    return faces


def load_image_raw(path) -> torch.Tensor:
    """Read an image file as a (3, H, W) float tensor with values in [0, 255]."""
    try:
        with Image.open(path) as img:
            array = np.asarray(img.convert("RGB"), dtype=np.float32)
    except (OSError, ValueError) as exc:
        raise ValidationError(f"cannot read image {path}: {exc}") from exc
    return torch.from_numpy(array.transpose(2, 0, 1))


def load_image_normalized(path, size: int = IMAGE_SIZE) -> torch.Tensor:
    """Read an image file as a normalized (3, size, size) tensor."""
    try:
        with Image.open(path) as img:
            rgb = img.convert("RGB")
            if rgb.size != (size, size):
                rgb = rgb.resize((size, size), Image.BILINEAR)
            array = np.asarray(rgb, dtype=np.float32)
    except (OSError, ValueError) as exc:
        raise ValidationError(f"cannot read image {path}: {exc}") from exc
    return normalize_image(torch.from_numpy(array.transpose(2, 0, 1)))


def save_image_png(path, image: torch.Tensor) -> None:
    """Write a normalized image tensor as an 8-bit PNG."""
    validate_image(image, channels=3)
    array = denormalize_image(image.detach().clamp(-1.0, 1.0))
    array = array.round().to(torch.uint8).numpy().transpose(1, 2, 0)
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(array, "RGB").save(path, format="PNG")


def mirror_tile(image: torch.Tensor) -> torch.Tensor:
    """Reflect an image into a 2x2 mirror tiling (doubles both sides).

    Every row of the result is its own horizontal mirror-pair, so flipping
    the canvas left-right (or top-bottom) reproduces it exactly.
    """
    top = torch.cat([image, torch.flip(image, dims=(-1,))], dim=-1)
    return torch.cat([top, torch.flip(top, dims=(-2,))], dim=-2)


def _pad_to_square(image: torch.Tensor) -> torch.Tensor:
    _, h, w = image.shape
    side = max(h, w)
    array = image.detach().cpu().numpy()
    while array.shape[1] != side or array.shape[2] != side:
        need_h, need_w = side - array.shape[1], side - array.shape[2]
        step_h = min(need_h, 2 * (array.shape[1] - 1)) if need_h else 0
        step_w = min(need_w, 2 * (array.shape[2] - 1)) if need_w else 0
        pad_h = (step_h // 2, step_h - step_h // 2)
        pad_w = (step_w // 2, step_w - step_w // 2)
        array = np.pad(array, ((0, 0), pad_h, pad_w), mode="symmetric")
    return torch.from_numpy(array.copy())


def mirror_pad(image: torch.Tensor, out_size: int = IMAGE_SIZE) -> torch.Tensor:
    """Mirror a cropped face out to a full (3, 256, 256) canvas.

    The crop is squared up if needed, resized to half the output side, and
    reflected into a 2x2 mirror tiling, which makes the output exactly
    symmetric under horizontal reflection.
    """
    validate_image(image, channels=3, name="cropped face")
    if image.dim() != 3:
        raise ShapeError("mirror padding expects a single (3, H, W) crop")
    _, h, w = image.shape
    if (h, w) == (out_size, out_size):
        raise ValidationError(f"input is already {out_size}x{out_size}; refusing to re-pad")
    if max(h, w) > 4 * min(h, w):
        raise ValidationError(f"aspect ratio {max(h, w)}:{min(h, w)} exceeds 4:1")
    square = _pad_to_square(image)
    half = out_size // 2
    resized = torch.nn.functional.interpolate(
        square.unsqueeze(0).float(), size=(half, half), mode="bilinear",
        align_corners=False).squeeze(0)
    return mirror_tile(resized)


def _read_pairs_metadata(meta_dir: Path, relation: str):
    """Yield (fold, label, name1, name2) from .mat or .csv fold lists."""
    prefix = RELATION_PREFIX[relation]
    mat_path = meta_dir / f"{prefix}_pairs.mat"
    csv_path = meta_dir / f"{prefix}_pairs.csv"
    rows = []
    if mat_path.exists():
        from scipy.io import loadmat
        data = loadmat(str(mat_path))
        if "pairs" not in data:
            raise IntegrityError(f"{mat_path}: no 'pairs' variable")
        for row in data["pairs"]:
            fold = int(np.asarray(row[0]).flat[0])
            label = int(np.asarray(row[1]).flat[0])
            name1 = str(np.asarray(row[2]).flat[0])
            name2 = str(np.asarray(row[3]).flat[0])
            rows.append((fold, label, name1, name2))
    elif csv_path.exists():
        with open(csv_path, newline="") as fh:
            for record in csv.reader(fh):
                if not record or record[0].strip().lower() == "fold":
                    continue
                rows.append((int(record[0]), int(record[1]), record[2].strip(),
                             record[3].strip()))
    else:
        raise ConfigError(f"no fold metadata for {relation}: expected {mat_path} or {csv_path}")
    return rows


def load_kin_pairs(dataset_root, dataset: str):
    """Load all four relations of one benchmark with integrity checks.

    ``dataset`` is ``KinFaceW-I`` or ``KinFaceW-II`` (pair counts enforced),
    or ``custom`` for arbitrary smoke-test sets in the same layout.
    """
    root = Path(dataset_root)
    if dataset not in KINSHIP_PAIR_COUNTS and dataset != "custom":
        raise ConfigError(f"unknown kinship dataset {dataset!r}; expected "
                          f"{sorted(KINSHIP_PAIR_COUNTS)} or 'custom'")
    meta_dir = root / "meta_data"
    images_dir = root / "images"
    pairs = []
    for relation in RELATIONS:
        rows = _read_pairs_metadata(meta_dir, relation)
        rel_dir = images_dir / RELATION_DIRS[relation]
        kin = sum(1 for fold, label, *_ in rows if label == 1)
        non_kin = len(rows) - kin
        if dataset != "custom":
            expected = KINSHIP_PAIR_COUNTS[dataset][relation]
            if kin != expected:
                raise IntegrityError(f"{dataset} {relation}: expected {expected} kin pairs, "
                                     f"metadata lists {kin}")
            if non_kin and non_kin != kin:
                raise IntegrityError(f"{dataset} {relation}: {kin} kin but {non_kin} non-kin "
                                     "pairs; the protocol expects balanced lists")
        missing = []
        for fold, label, name1, name2 in rows:
            if fold not in FOLDS:
                raise IntegrityError(f"{dataset} {relation}: fold {fold} outside {FOLDS}")
            parent, child = rel_dir / name1, rel_dir / name2
            for p in (parent, child):
                if not p.exists():
                    missing.append(str(p))
            pairs.append(KinPair(str(parent), str(child), relation, label == 1, fold))
        if missing:
            raise IntegrityError(f"{dataset} {relation}: {len(missing)} image files missing, "
                                 f"first: {missing[0]}")
    return pairs
