"""Python module with the expression dataset: manifest loading, splitting, preprocessing and batching.

Manifest CSV header: ``id,relative_path,label[,split][,bbox_x,bbox_y,bbox_w,bbox_h]``.
Labels are class names (or integer class indices); bounding boxes are relative
coordinates in [0, 1]. Images live at ``root/<relative_path>``.
"""
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Dict, Iterator, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
import torch
from PIL import Image, UnidentifiedImageError
from torch.utils.data import DataLoader, Dataset

from autodiff.tensor import seeded_rng
from utilities.exceptions import DataError, PreprocessError

logger = logging.getLogger(__name__)

REQUIRED_COLUMNS = ["id", "relative_path", "label"]
BBOX_COLUMNS = ["bbox_x", "bbox_y", "bbox_w", "bbox_h"]
SPLITS = ("train", "val", "test")
ON_ERROR = ("skip", "abort")
BBOX_MARGIN = 0.1
IMAGE_SIZE = 224

BBox = Tuple[float, float, float, float]


@dataclass(frozen=True)
class LabeledSample:
    id: str
    image_path: Path
    label: int
    bbox: Optional[BBox] = None
    split: Optional[str] = None


@dataclass
class DatasetManifest:
    """Samples plus the ordered class names their labels index."""
    samples: List[LabeledSample]
    class_names: List[str]
    warnings: List[str] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.samples)

    @property
    def num_classes(self) -> int:
        return len(self.class_names)

    def split(self, name: str) -> List[LabeledSample]:
        """Samples assigned to ``name``, in manifest order."""
        if name not in SPLITS:
            raise ValueError(f"Unknown split '{name}'; expected one of {SPLITS}")
        return [sample for sample in self.samples if sample.split == name]

    def has_split(self) -> bool:
        return all(sample.split is not None for sample in self.samples)

    def labels(self) -> np.ndarray:
        return np.array([sample.label for sample in self.samples], dtype=np.int64)

    def class_distribution(self) -> pd.DataFrame:
        """Per-class sample counts, one column per split present (plus ``total``)."""
        frame = pd.DataFrame({
            "class": [self.class_names[sample.label] for sample in self.samples],
            "split": [sample.split or "unassigned" for sample in self.samples],
        })
        table = pd.crosstab(frame["class"], frame["split"]).reindex(self.class_names, fill_value=0)
        ordered = [name for name in SPLITS + ("unassigned",) if name in table.columns]
        table = table[ordered]
        table["total"] = table.sum(axis=1)
        table.index.name = "class"
        return table


def _parse_label(raw: str, class_names: Sequence[str], line: int) -> int:
    raw = str(raw).strip()
    if raw in class_names:
        return list(class_names).index(raw)
    if raw.lstrip("-").isdigit():
        index = int(raw)
        if 0 <= index < len(class_names):
            return index
    raise DataError(f"Line {line}: unknown label '{raw}' (classes: {', '.join(class_names)})")


def _parse_bbox(row: pd.Series, line: int) -> Optional[BBox]:
    values = [row.get(column) for column in BBOX_COLUMNS]
    if all(pd.isna(value) or str(value).strip() == "" for value in values):
        return None
    try:
        x, y, w, h = (float(value) for value in values)
    except (TypeError, ValueError) as e:
        raise DataError(f"Line {line}: malformed bounding box {values}") from e
    if not (w > 0 and h > 0) or not all(np.isfinite([x, y, w, h])):
        raise DataError(f"Line {line}: bounding box needs positive width and height, got {values}")
    # Clamp into the unit square; an empty remainder is a data error.
    x0, y0 = min(max(x, 0.0), 1.0), min(max(y, 0.0), 1.0)
    x1, y1 = min(max(x + w, 0.0), 1.0), min(max(y + h, 0.0), 1.0)
    if x1 <= x0 or y1 <= y0:
        raise DataError(f"Line {line}: bounding box {values} lies outside the image")
    return (x0, y0, x1 - x0, y1 - y0)


def load_manifest(root, labels_file, class_names: Sequence[str], logger=None) -> DatasetManifest:
    """
    Read and validate a manifest CSV.

    Rows whose image file is missing are dropped with a warning naming the row.

    Args:
        root: Directory the relative paths are resolved against
        labels_file: CSV file; relative paths are resolved against ``root``
        class_names: Ordered class names; labels index this list
        logger: Optional logger

    Returns:
        DatasetManifest

    Raises:
        DataError: On malformed rows (with line numbers), unknown labels or duplicate ids
    """
    logger = logger or logging.getLogger(__name__)
    root = Path(root)
    labels_path = Path(labels_file)
    if not labels_path.is_absolute() and not labels_path.exists():
        labels_path = root / labels_path
    if not class_names:
        raise DataError("No class names configured for the manifest")

    try:
        frame = pd.read_csv(labels_path, dtype=str, keep_default_na=False, skipinitialspace=True)
    except FileNotFoundError as e:
        raise DataError(f"Labels file not found: {labels_path}") from e
    except (pd.errors.ParserError, pd.errors.EmptyDataError, UnicodeDecodeError) as e:
        raise DataError(f"Malformed labels file {labels_path}: {e}") from e

    frame.columns = [column.strip() for column in frame.columns]
    missing_columns = [column for column in REQUIRED_COLUMNS if column not in frame.columns]
    if missing_columns:
        raise DataError(f"{labels_path}: missing required columns {missing_columns}")
    present_bbox = [column for column in BBOX_COLUMNS if column in frame.columns]
    if present_bbox and len(present_bbox) != len(BBOX_COLUMNS):
        raise DataError(f"{labels_path}: bounding boxes need all of {BBOX_COLUMNS}, found {present_bbox}")
    has_split = "split" in frame.columns

    samples: List[LabeledSample] = []
    warnings: List[str] = []
    seen: Dict[str, int] = {}
    for position, row in frame.iterrows():
        line = int(position) + 2  # header is line 1
        sample_id = str(row["id"]).strip()
        relative_path = str(row["relative_path"]).strip()
        if not sample_id or not relative_path:
            raise DataError(f"Line {line}: empty id or relative_path")
        if sample_id in seen:
            raise DataError(f"Line {line}: duplicate id '{sample_id}' (first seen on line {seen[sample_id]})")
        seen[sample_id] = line
        label = _parse_label(row["label"], class_names, line)
        bbox = _parse_bbox(row, line) if present_bbox else None
        split = None
        if has_split:
            split = str(row["split"]).strip().lower() or None
            if split is not None and split not in ("train", "test"):
                raise DataError(f"Line {line}: split must be 'train' or 'test', got '{row['split']}'")

        image_path = root / relative_path
        if not image_path.is_file():
            message = f"Line {line}: image for sample '{sample_id}' not found at {image_path}"
            warnings.append(message)
            logger.warning(message)
            continue
        samples.append(LabeledSample(sample_id, image_path, label, bbox, split))

    if not samples:
        raise DataError(f"{labels_path}: no usable samples")
    logger.info(f"Loaded manifest {labels_path}: {len(samples)} samples, {len(warnings)} missing files")
    return DatasetManifest(samples, list(class_names), warnings)


def stratified_split(manifest: DatasetManifest, test_fraction: float, seed: int) -> DatasetManifest:
    """
    Assign every sample to train or test, preserving class proportions.

    Each class sends round(class_count * test_fraction) samples (half-up, at most
    class_count - 1) to the test side, so small classes may contribute none.

    Args:
        manifest: Samples to split (existing assignments are replaced)
        test_fraction: Fraction in (0, 1) sent to the test side
        seed: Shuffle seed

    Returns:
        A new manifest with ``split`` set on every sample
    """
    if not 0.0 < test_fraction < 1.0:
        raise DataError(f"test_fraction must be in (0, 1), got {test_fraction}")
    return _partition(manifest, range(len(manifest)), test_fraction, seed, "train", "test")


def carve_validation(manifest: DatasetManifest, val_fraction: float, seed: int) -> DatasetManifest:
    """Move a stratified ``val_fraction`` of the train split to a separate ``val`` split."""
    if not 0.0 < val_fraction < 1.0:
        raise DataError(f"val_fraction must be in (0, 1), got {val_fraction}")
    train_positions = [i for i, sample in enumerate(manifest.samples) if sample.split == "train"]
    if not train_positions:
        raise DataError("Cannot carve a validation split from an empty train split")
    return _partition(manifest, train_positions, val_fraction, seed, "train", "val")


def _holdout_count(count: int, fraction: float) -> int:
    # Half-up rounding, capped so every class keeps one sample on the kept side.
    return min(int(np.floor(count * fraction + 0.5)), count - 1)


def _partition(manifest, positions, fraction, seed, keep, carve) -> DatasetManifest:
    positions = np.asarray(list(positions), dtype=np.int64)
    labels = manifest.labels()[positions]
    classes, counts = np.unique(labels, return_counts=True)
    too_small = [manifest.class_names[c] for c, n in zip(classes, counts) if n < 2]
    if too_small:
        raise DataError(f"Stratified split needs at least 2 samples per class; too few in {too_small}")

    rng = seeded_rng(seed)
    assignment = {}
    for label, count in zip(classes, counts):
        members = rng.permutation(positions[labels == label])
        n_carved = _holdout_count(int(count), fraction)
        assignment.update({int(position): carve for position in members[:n_carved]})
        assignment.update({int(position): keep for position in members[n_carved:]})

    samples = [
        replace(sample, split=assignment.get(i, sample.split)) for i, sample in enumerate(manifest.samples)
    ]
    n_carved = sum(1 for split in assignment.values() if split == carve)
    logger.debug(f"Stratified {keep}/{carve} split: {len(assignment) - n_carved}/{n_carved} samples")
    return DatasetManifest(samples, manifest.class_names, manifest.warnings)


def _crop_box(bbox: BBox, width: int, height: int) -> Tuple[int, int, int, int]:
    x, y, w, h = bbox
    left = max(0.0, x - BBOX_MARGIN * w) * width
    top = max(0.0, y - BBOX_MARGIN * h) * height
    right = min(1.0, x + w + BBOX_MARGIN * w) * width
    bottom = min(1.0, y + h + BBOX_MARGIN * h) * height
    return int(round(left)), int(round(top)), int(round(right)), int(round(bottom))


def preprocess(sample: LabeledSample, size: int = IMAGE_SIZE) -> np.ndarray:
    """
    Decode, crop, resize and normalize one sample.

    The bounding box (if any) is widened by 10% of its size on each side and
    clamped to the image. Grayscale images are replicated across three channels.

    Args:
        sample: Sample to load
        size: Output extent (square)

    Returns:
        size×size×3 float32 array with values in [0, 1]

    Raises:
        PreprocessError: If the image cannot be decoded or the crop is empty
    """
    try:
        with Image.open(sample.image_path) as image:
            image = image.convert("RGB")
    except (FileNotFoundError, UnidentifiedImageError, OSError) as e:
        raise PreprocessError(sample.id, f"cannot decode {sample.image_path}: {e}") from e

    if sample.bbox is not None:
        box = _crop_box(sample.bbox, *image.size)
        if box[2] <= box[0] or box[3] <= box[1]:
            raise PreprocessError(sample.id, f"bounding box {sample.bbox} is empty after clamping")
        image = image.crop(box)
    if image.size != (size, size):
        image = image.resize((size, size), Image.BILINEAR)
    return np.asarray(image, dtype=np.float32) / 255.0


def one_hot(labels: Sequence[int], num_classes: int) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64)
    if labels.size and (labels.min() < 0 or labels.max() >= num_classes):
        raise ValueError(f"Labels must lie in [0, {num_classes})")
    encoded = np.zeros((labels.size, num_classes), dtype=np.float32)
    encoded[np.arange(labels.size), labels] = 1.0
    return encoded


@dataclass
class Batch:
    ids: List[str]
    images: np.ndarray  # B×S×S×3 in [0, 1]
    labels: np.ndarray  # B×K one-hot

    def __len__(self) -> int:
        return len(self.ids)

    @property
    def label_indices(self) -> np.ndarray:
        return self.labels.argmax(axis=1)


class ExpressionDataset(Dataset):
    """
    Lazily preprocessed samples.

    Failures are returned as an ``error`` field instead of raised, so the batch
    generator decides between skipping and aborting in the main process.
    """

    def __init__(self, samples: Sequence[LabeledSample], image_size: int = IMAGE_SIZE):
        self.samples = list(samples)
        self.image_size = image_size

    def __len__(self) -> int:
        return len(self.samples)

    def __getitem__(self, idx) -> dict:
        if torch.is_tensor(idx):
            idx = idx.tolist()
        sample = self.samples[idx]
        try:
            image = preprocess(sample, self.image_size)
            error = None
        except PreprocessError as e:
            image, error = None, e.detail
        return {"id": sample.id, "label": sample.label, "image": image, "error": error}


def _collate(items: List[dict]) -> List[dict]:
    return items


class BatchGenerator:
    """
    Streams one split as batches, one epoch at a time.

    The train split is shuffled with a stream seeded by ``(seed, epoch)``; other
    splits keep manifest order. With ``prefetch > 0`` a torch ``DataLoader``
    worker decodes up to that many batches ahead; delivery order is the same as
    with ``prefetch = 0``. ``skipped`` and ``dropped_batches`` describe the most
    recent epoch only.

    Args:
        samples: Samples of the split
        num_classes: Width of the one-hot labels
        batch_size: Maximum batch size; the last batch may be smaller
        shuffle: Shuffle per epoch
        seed: Shuffle seed
        image_size: Square extent of the decoded images
        on_error: "skip" drops undecodable samples with a warning, "abort" raises
        prefetch: Batches decoded ahead by a background worker (0 decodes in the caller)
        logger: Optional logger
    """

    def __init__(
        self,
        samples: Sequence[LabeledSample],
        num_classes: int,
        batch_size: int = 32,
        shuffle: bool = False,
        seed: int = 0,
        image_size: int = IMAGE_SIZE,
        on_error: str = "abort",
        prefetch: int = 0,
        logger=None,
    ):
        if not samples:
            raise DataError("Cannot stream an empty split")
        if batch_size < 1:
            raise DataError(f"batch_size must be >= 1, got {batch_size}")
        if on_error not in ON_ERROR:
            raise DataError(f"on_error must be one of {ON_ERROR}, got '{on_error}'")
        self.logger = logger or logging.getLogger(__name__)
        self.dataset = ExpressionDataset(samples, image_size)
        self.num_classes = num_classes
        self.batch_size = batch_size
        self.shuffle = shuffle
        self.seed = seed
        self.on_error = on_error
        self.prefetch = prefetch
        self.skipped: List[str] = []
        self.dropped_batches = 0

    def __len__(self) -> int:
        return -(-len(self.dataset) // self.batch_size)

    @property
    def ids(self) -> List[str]:
        return [sample.id for sample in self.dataset.samples]

    def order(self, epoch: int = 0) -> np.ndarray:
        """Sample positions in delivery order for ``epoch``."""
        if self.shuffle:
            return seeded_rng((self.seed, epoch)).permutation(len(self.dataset))
        return np.arange(len(self.dataset))

    def batch_indices(self, epoch: int = 0) -> List[List[int]]:
        order = self.order(epoch).tolist()
        return [order[start:start + self.batch_size] for start in range(0, len(order), self.batch_size)]

    def epoch(self, epoch: int = 0) -> Iterator[Batch]:
        """Yield every sample of the split exactly once (minus skipped failures)."""
        self.skipped = []
        self.dropped_batches = 0
        # One worker keeps delivery order; prefetch_factor bounds the batches in flight.
        workers = {"num_workers": 0}
        if self.prefetch > 0:
            workers = {"num_workers": 1, "prefetch_factor": self.prefetch}
        loader = DataLoader(
            self.dataset,
            batch_sampler=self.batch_indices(epoch),
            collate_fn=_collate,
            **workers,
        )
        for items in loader:
            kept = []
            for item in items:
                if item["error"] is None:
                    kept.append(item)
                    continue
                if self.on_error == "abort":
                    raise PreprocessError(item["id"], item["error"])
                self.skipped.append(item["id"])
                self.logger.warning(f"Skipping sample '{item['id']}': {item['error']}")
            if not kept:
                self.dropped_batches += 1
                continue
            yield Batch(
                ids=[item["id"] for item in kept],
                images=np.stack([item["image"] for item in kept]),
                labels=one_hot([item["label"] for item in kept], self.num_classes),
            )

    __iter__ = epoch


def batch_generator(
    manifest: DatasetManifest,
    split: str,
    batch_size: int = 32,
    shuffle_seed: int = 0,
    epoch: int = 0,
    **kwargs,
) -> Iterator[Batch]:
    """One epoch over ``split``; shuffled (seeded by ``shuffle_seed`` and ``epoch``) for train only."""
    generator = BatchGenerator(
        manifest.split(split),
        manifest.num_classes,
        batch_size=batch_size,
        shuffle=split == "train",
        seed=shuffle_seed,
        **kwargs,
    )
    return generator.epoch(epoch)
