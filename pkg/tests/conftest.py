"""Shared fixtures: a session-scoped toy stack and synthetic data builders."""

import csv
import json
from pathlib import Path

import numpy as np
import pytest
import torch
from PIL import Image

from fairage.core import Config, RaceLabel
from fairage.backbones import build_all_backbones
from fairage.losses import CompositeLoss
from fairage.synthesis import build_model
from fairage.datakit import FULL_SPLIT_COUNTS, KINSHIP_PAIR_COUNTS, RELATION_DIRS, RELATION_PREFIX


@pytest.fixture(scope="session")
def config():
    return Config()


@pytest.fixture(scope="session")
def backbones(config):
    return build_all_backbones(config)


@pytest.fixture(scope="session")
def model(config, backbones):
    return build_model(config, backbones)


@pytest.fixture(scope="session")
def composite(config, backbones):
    return CompositeLoss(backbones["identity"], backbones["age"], backbones["race"],
                         config.loss_weights)


def make_images(n, seed=0, size=256, smooth=True):
    """Deterministic smooth test images in [-1, 1]."""
    g = torch.Generator()
    g.manual_seed(seed)
    base = torch.rand(n, 3, 8, 8, generator=g)
    if smooth:
        up = torch.nn.functional.interpolate(base, size=(size, size), mode="bilinear",
                                             align_corners=False)
    else:
        up = torch.nn.functional.interpolate(base, size=(size, size), mode="nearest")
    return up * 2 - 1


@pytest.fixture()
def images4():
    return make_images(4, seed=42)


def write_png(path, seed=0, size=32):
    g = np.random.default_rng(seed)
    array = g.integers(0, 256, size=(size, size, 3), dtype=np.uint8)
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(array, "RGB").save(path)
    return path


def make_source_tree(root, per_race, image_files=False, seed=0):
    """Synthetic stamped-filename source directory.

    ``per_race`` maps RaceLabel -> file count. With ``image_files`` the files
    are small real PNGs (loadable), otherwise empty placeholders.
    """
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    code_of = {RaceLabel.WHITE: 0, RaceLabel.BLACK: 1, RaceLabel.ASIAN: 2, RaceLabel.INDIAN: 3}
    counter = 0
    for race, count in per_race.items():
        for i in range(count):
            age = 10 + (i * 7) % 70
            name = f"{age}_{i % 2}_{code_of[race]}_stamp{counter:06d}.jpg"
            path = root / name
            if image_files:
                write_png(path, seed=seed + counter)
            else:
                path.touch()
            counter += 1
    return root


def make_kinface_tree(root, dataset="custom", pairs_per_relation=None, image_size=24,
                      image_files=True, metadata="csv", seed=0):
    """Synthetic KinFaceW-style benchmark: images/ plus meta_data/ fold lists.

    Kin pairs use one shared seed per pair (separable-by-construction), and
    every relation gets an equal number of non-kin pairs. Folds cycle 1..5.
    """
    root = Path(root)
    counts = pairs_per_relation or KINSHIP_PAIR_COUNTS.get(dataset)
    meta_dir = root / "meta_data"
    meta_dir.mkdir(parents=True, exist_ok=True)
    for relation, n in counts.items():
        rel_dir = root / "images" / RELATION_DIRS[relation]
        rel_dir.mkdir(parents=True, exist_ok=True)
        prefix = RELATION_PREFIX[relation]
        rows = []
        for i in range(1, n + 1):
            parent = f"{prefix}_{i:03d}_1.jpg"
            child = f"{prefix}_{i:03d}_2.jpg"
            for k, name in ((1, parent), (2, child)):
                path = rel_dir / name
                if image_files:
                    write_png(path, seed=seed + i * 2 + k, size=image_size)
                else:
                    path.touch()
            rows.append(((i - 1) % 5 + 1, 1, parent, child))
        for i in range(1, n + 1):
            parent = f"{prefix}_{i:03d}_1.jpg"
            other = f"{prefix}_{i % n + 1:03d}_2.jpg"
            rows.append(((i - 1) % 5 + 1, 0, parent, other))
        if metadata == "csv":
            with open(meta_dir / f"{prefix}_pairs.csv", "w", newline="") as fh:
                writer = csv.writer(fh)
                writer.writerow(["fold", "label", "name1", "name2"])
                writer.writerows(rows)
        else:
            from scipy.io import savemat
            cells = np.empty((len(rows), 4), dtype=object)
            for r, (fold, label, n1, n2) in enumerate(rows):
                cells[r, 0] = np.array([[fold]])
                cells[r, 1] = np.array([[label]])
                cells[r, 2] = np.array([n1])
                cells[r, 3] = np.array([n2])
            savemat(str(meta_dir / f"{prefix}_pairs.mat"), {"pairs": cells})
    return root
