"""Python module that generates deterministic synthetic expression datasets.

Every class gets its own procedural texture (stripe orientation, frequency,
brightness and tint), so a small model can separate the classes without any
external data. Images are written as PNG next to a ``labels.csv`` manifest.
"""
import logging
import math
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import pandas as pd
from PIL import Image

from autodiff.tensor import seeded_rng
from utilities.exceptions import ConfigError

logger = logging.getLogger(__name__)

FIXTURE_SIZES = (48, 224)


def class_texture(
    label: int,
    num_classes: int,
    size: int,
    rng: np.random.Generator,
    grayscale: bool = False,
    noise: float = 0.05,
) -> np.ndarray:
    """
    Render one texture of class ``label``.

    Args:
        label: Class index
        num_classes: Number of classes
        size: Square extent in pixels
        rng: Source for the per-sample phase and noise
        grayscale: Render a single channel
        noise: Standard deviation of the additive pixel noise

    Returns:
        uint8 array, size×size (grayscale) or size×size×3
    """
    coords = (np.arange(size, dtype=np.float64) + 0.5) / size
    x, y = np.meshgrid(coords, coords)
    angle = math.pi * label / num_classes
    frequency = 3 + 2 * (label % 3)
    brightness = 0.3 + 0.4 * label / max(num_classes - 1, 1)
    phase = rng.uniform(0.0, 2.0 * math.pi)
    wave = np.sin(2.0 * math.pi * frequency * (x * math.cos(angle) + y * math.sin(angle)) + phase)
    field = brightness + 0.25 * wave
    if grayscale:
        image = field + rng.normal(0.0, noise, size=field.shape)
    else:
        hue = 2.0 * math.pi * label / num_classes
        tint = 0.15 * np.array([math.cos(hue), math.cos(hue + 2.0), math.cos(hue + 4.0)])
        image = field[..., None] + tint + rng.normal(0.0, noise, size=field.shape + (3,))
    return np.clip(np.round(image * 255.0), 0, 255).astype(np.uint8)


def make_fixture(
    out_dir,
    class_names: Sequence[str],
    samples_per_class: int = 8,
    size: int = 224,
    seed: int = 0,
    grayscale: bool = False,
    with_bbox: bool = False,
    test_fraction: Optional[float] = None,
    logger=None,
) -> Path:
    """
    Write a synthetic dataset and its manifest.

    Args:
        out_dir: Dataset root; images go to ``images/<class>/``
        class_names: Class names used as labels
        samples_per_class: Images per class
        size: Image extent, 48 (FER-2013 style) or 224
        seed: Generation seed; identical seeds give identical files
        grayscale: Write single-channel PNGs
        with_bbox: Add bounding-box columns around a centered face region
        test_fraction: If set, write a ``split`` column with a per-class test share

    Returns:
        Path of the written ``labels.csv``
    """
    logger = logger or logging.getLogger(__name__)
    if size not in FIXTURE_SIZES:
        raise ConfigError(f"fixture.size must be one of {FIXTURE_SIZES}, got {size}")
    if len(class_names) < 2 or samples_per_class < 1:
        raise ConfigError("A fixture needs at least 2 classes and 1 sample per class")
    if test_fraction is not None and not 0.0 < test_fraction < 1.0:
        raise ConfigError(f"fixture.test_fraction must be in (0, 1), got {test_fraction}")

    root = Path(out_dir)
    rng = seeded_rng(seed)
    rows = []
    for label, name in enumerate(class_names):
        class_dir = root / "images" / name
        class_dir.mkdir(parents=True, exist_ok=True)
        n_test = int(round(samples_per_class * test_fraction)) if test_fraction else 0
        for index in range(samples_per_class):
            pixels = class_texture(label, len(class_names), size, rng, grayscale=grayscale)
            relative_path = Path("images") / name / f"{name}_{index:04d}.png"
            Image.fromarray(pixels).save(root / relative_path)
            row = {"id": f"{name}_{index:04d}", "relative_path": relative_path.as_posix(), "label": name}
            if test_fraction:
                row["split"] = "test" if index < n_test else "train"
            if with_bbox:
                w, h = rng.uniform(0.5, 0.8, size=2)
                x, y = rng.uniform(0.0, 1.0 - w), rng.uniform(0.0, 1.0 - h)
                row.update(bbox_x=round(x, 4), bbox_y=round(y, 4), bbox_w=round(w, 4), bbox_h=round(h, 4))
            rows.append(row)

    labels_path = root / "labels.csv"
    pd.DataFrame(rows).to_csv(labels_path, index=False)
    logger.info(f"Wrote {len(rows)} synthetic {size}x{size} samples for {len(class_names)} classes to {root}")
    return labels_path
