"""
Synthetic shapes dataset
Renders seeded grayscale images of circles, squares and triangles with exact
instance masks, and reads/writes COCO-style annotation files
"""
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import structlog
import torch
from PIL import Image
from pydantic import ValidationError
from torch.utils.data import Dataset

from sbrcnn.exceptions import ManifestError
from sbrcnn.geometry import Box, boxes_to_tensor
from sbrcnn.schemas import (
    AnnotationRecord,
    CategoryRecord,
    DatasetManifest,
    GeneratorConfig,
    ImageRecord,
    RLEMask,
)

logger = structlog.get_logger(__name__)

CATEGORIES: Dict[int, str] = {1: "circle", 2: "square", 3: "triangle"}

# Max pairwise gt IoU allowed by each overlap policy
OVERLAP_CAPS: Dict[str, float] = {"sparse": 0.3, "crowded": 0.75}

MAX_PLACEMENT_RETRIES = 50
BACKGROUND_LEVEL = 20
BACKGROUND_NOISE = 16
FILL_RANGE = (120, 256)


@dataclass
class ShapeInstance:
    """One rendered instance; the mask is amodal (ignores occlusion)"""
    category_id: int
    mask: np.ndarray
    box: Box
    intensity: int

    @property
    def area(self) -> int:
        return int(self.mask.sum())


# Rasterization
def _pixel_centers(height: int, width: int) -> Tuple[np.ndarray, np.ndarray]:
    ys, xs = np.mgrid[0:height, 0:width]
    return xs + 0.5, ys + 0.5


def square_mask(height: int, width: int, x1: float, y1: float, side: float) -> np.ndarray:
    px, py = _pixel_centers(height, width)
    return (px >= x1) & (px < x1 + side) & (py >= y1) & (py < y1 + side)


def circle_mask(height: int, width: int, cx: float, cy: float, radius: float) -> np.ndarray:
    px, py = _pixel_centers(height, width)
    return (px - cx) ** 2 + (py - cy) ** 2 <= radius ** 2


def triangle_mask(height: int, width: int, x1: float, y1: float, side: float) -> np.ndarray:
    """Upright isosceles triangle inscribed in the square (x1, y1, x1 + side, y1 + side)"""
    px, py = _pixel_centers(height, width)
    apex_x = x1 + side / 2.0
    bottom = y1 + side
    # both slanted edges run from the apex to a bottom corner
    half = (py - y1) / 2.0
    return (py >= y1) & (py < bottom) & (px >= apex_x - half) & (px < apex_x + half)


def render_shape(category_id: int, height: int, width: int, x1: float, y1: float, side: float) -> np.ndarray:
    """Boolean mask of a shape whose bounding square starts at (x1, y1)"""
    if category_id == 1:
        return circle_mask(height, width, x1 + side / 2.0, y1 + side / 2.0, side / 2.0)
    if category_id == 2:
        return square_mask(height, width, x1, y1, side)
    if category_id == 3:
        return triangle_mask(height, width, x1, y1, side)
    raise ValueError(f"unknown category {category_id}")


def mask_to_box(mask: np.ndarray) -> Box:
    """Tight box of the true pixels, in continuous coordinates"""
    ys, xs = np.nonzero(mask)
    if xs.size == 0:
        return Box(0.0, 0.0, 0.0, 0.0)
    return Box(float(xs.min()), float(ys.min()), float(xs.max() + 1), float(ys.max() + 1))


# Run-length encoding
def rle_encode(mask: np.ndarray) -> RLEMask:
    """Row-major uncompressed RLE; the first run counts zeros and may be empty"""
    flat = np.asarray(mask, dtype=bool).ravel(order="C")
    if flat.size == 0:
        return RLEMask(size=(mask.shape[0], mask.shape[1]), counts=[])
    change = np.flatnonzero(flat[1:] != flat[:-1]) + 1
    bounds = np.concatenate([[0], change, [flat.size]])
    counts = np.diff(bounds).tolist()
    if flat[0]:
        counts = [0] + counts
    return RLEMask(size=(int(mask.shape[0]), int(mask.shape[1])), counts=[int(c) for c in counts])


def rle_decode(rle: RLEMask) -> np.ndarray:
    h, w = rle.size
    values = np.zeros(len(rle.counts), dtype=bool)
    values[1::2] = True
    flat = np.repeat(values, rle.counts)
    return flat.reshape(h, w)


# Generation
def _box_iou(a: Box, b: Box) -> float:
    iw = max(0.0, min(a.x2, b.x2) - max(a.x1, b.x1))
    ih = max(0.0, min(a.y2, b.y2) - max(a.y1, b.y1))
    inter = iw * ih
    union = a.area + b.area - inter
    return inter / union if union > 0 else 0.0


def generate_image(index: int, config: GeneratorConfig) -> Tuple[np.ndarray, List[ShapeInstance], int]:
    """
    Render one image from its own derived seed

    Args:
        index: Image index, mixed into the dataset seed
        config: Generator parameters

    Returns:
        (uint8 image, instances in paint order, number of dropped instances)
    """
    rng = np.random.default_rng([config.seed, index])
    size = config.image_size
    cap = OVERLAP_CAPS[config.overlap_policy]

    image = BACKGROUND_LEVEL + rng.integers(0, BACKGROUND_NOISE, size=(size, size))
    lo, hi = config.instances_per_image
    wanted = int(rng.integers(lo, hi + 1))
    instances: List[ShapeInstance] = []
    dropped = 0

    for _ in range(wanted):
        category_id = int(rng.integers(1, len(CATEGORIES) + 1))
        intensity = int(rng.integers(*FILL_RANGE))
        placed = None
        for _ in range(MAX_PLACEMENT_RETRIES):
            side = int(rng.integers(config.size_range[0], config.size_range[1] + 1))
            x1 = int(rng.integers(0, size - side + 1))
            y1 = int(rng.integers(0, size - side + 1))
            mask = render_shape(category_id, size, size, x1, y1, side)
            if not mask.any():
                continue
            box = mask_to_box(mask)
            if all(_box_iou(box, other.box) <= cap for other in instances):
                placed = ShapeInstance(category_id=category_id, mask=mask, box=box, intensity=intensity)
                break
        if placed is None:
            dropped += 1
            continue
        instances.append(placed)
        image[placed.mask] = placed.intensity

    return image.astype(np.uint8), instances, dropped


def generate_dataset(config: GeneratorConfig) -> Tuple[DatasetManifest, List[np.ndarray]]:
    """
    Generate a full dataset in memory

    Args:
        config: Generator parameters (count, size, instance range, overlap policy, seed)

    Returns:
        Manifest and the rendered uint8 images, index-aligned with manifest.images
    """
    images: List[np.ndarray] = []
    image_records: List[ImageRecord] = []
    annotations: List[AnnotationRecord] = []
    ann_id = 1

    for index in range(config.n_images):
        image, instances, dropped = generate_image(index, config)
        image_id = index + 1
        images.append(image)
        image_records.append(
            ImageRecord(
                id=image_id,
                width=config.image_size,
                height=config.image_size,
                file_name=f"images/{image_id:06d}.png",
                dropped_instances=dropped,
            )
        )
        for inst in instances:
            b = inst.box
            annotations.append(
                AnnotationRecord(
                    id=ann_id,
                    image_id=image_id,
                    category_id=inst.category_id,
                    bbox=(b.x1, b.y1, b.x2 - b.x1, b.y2 - b.y1),
                    area=inst.area,
                    segmentation=rle_encode(inst.mask),
                )
            )
            ann_id += 1

    manifest = DatasetManifest(
        info={"description": "synthetic shapes", "version": 1},
        generator=config,
        images=image_records,
        annotations=annotations,
        categories=[CategoryRecord(id=k, name=v) for k, v in CATEGORIES.items()],
    )
    total_dropped = sum(r.dropped_instances for r in image_records)
    logger.info(
        "dataset_generated",
        images=len(image_records),
        instances=len(annotations),
        dropped=total_dropped,
        seed=config.seed,
    )
    return manifest, images


def write_dataset(config: GeneratorConfig, root: Path) -> Path:
    """Generate a dataset and write images plus ``annotations.json`` under root"""
    root = Path(root)
    manifest, images = generate_dataset(config)
    (root / "images").mkdir(parents=True, exist_ok=True)
    for record, image in zip(manifest.images, images):
        Image.fromarray(image).save(root / record.file_name, format="PNG")
    path = root / "annotations.json"
    write_manifest(manifest, path)
    return path


# Manifest I/O
def write_manifest(manifest: DatasetManifest, path: Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(manifest.model_dump_json(indent=2), encoding="utf-8")


def _describe_error(raw: dict, error: dict) -> str:
    loc = error.get("loc", ())
    where = ""
    for part in loc:
        where += f"[{part}]" if isinstance(part, int) else (f".{part}" if where else str(part))
    record = ""
    if len(loc) >= 2 and isinstance(loc[1], int):
        try:
            item = raw[loc[0]][loc[1]]
            if isinstance(item, dict) and "id" in item:
                record = f" ({loc[0]} record id={item['id']})"
        except (KeyError, IndexError, TypeError):
            pass
    return f"{where or 'manifest'}{record}: {error.get('msg', 'invalid')}"


def read_manifest(path: Path) -> DatasetManifest:
    """
    Load and validate a COCO-style annotation file

    Raises:
        ManifestError: Missing file, malformed JSON, or a record violating the schema
    """
    path = Path(path)
    if not path.exists():
        raise ManifestError(f"manifest not found: {path}")
    try:
        raw = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as e:
        raise ManifestError(f"{path}: not valid JSON ({e})") from e
    if not isinstance(raw, dict):
        raise ManifestError(f"{path}: top level must be an object")
    for key in ("images", "annotations", "categories"):
        if key not in raw:
            raise ManifestError(f"{path}: missing '{key}' array")
    try:
        return DatasetManifest.model_validate(raw)
    except ValidationError as e:
        details = "; ".join(_describe_error(raw, err) for err in e.errors()[:5])
        raise ManifestError(f"{path}: {details}") from e


# Training-time access
def load_image(path: Path) -> np.ndarray:
    with Image.open(path) as img:
        return np.asarray(img.convert("L"), dtype=np.uint8)


def annotation_box(ann: AnnotationRecord) -> Box:
    x, y, w, h = ann.bbox
    return Box(x, y, x + w, y + h)


class ShapesDataset(Dataset):
    """
    Torch dataset over a manifest

    Items are ``(image, target)`` where image is a (1, H, W) float tensor in
    [0, 1] and target holds boxes, labels, masks and image_id.
    """

    def __init__(
        self,
        manifest: DatasetManifest,
        image_root: Optional[Path] = None,
        images: Optional[Sequence[np.ndarray]] = None,
    ):
        if image_root is None and images is None:
            raise ManifestError("ShapesDataset needs an image_root or in-memory images")
        self.manifest = manifest
        self.image_root = Path(image_root) if image_root is not None else None
        self.images = images
        self._annotations = manifest.annotations_by_image()

    @classmethod
    def from_path(cls, path: Path) -> "ShapesDataset":
        path = Path(path)
        return cls(read_manifest(path), image_root=path.parent)

    def __len__(self) -> int:
        return len(self.manifest.images)

    def _raw_image(self, idx: int) -> np.ndarray:
        if self.images is not None:
            return np.asarray(self.images[idx], dtype=np.uint8)
        record = self.manifest.images[idx]
        path = self.image_root / record.file_name
        if not path.exists():
            raise ManifestError(f"image {record.id} missing on disk: {path}")
        return load_image(path)

    def __getitem__(self, idx: int):
        record = self.manifest.images[idx]
        image = torch.from_numpy(self._raw_image(idx).astype(np.float32) / 255.0)[None]
        anns = self._annotations.get(record.id, [])
        if anns:
            masks = torch.from_numpy(np.stack([rle_decode(a.segmentation) for a in anns]).astype(np.uint8))
        else:
            masks = torch.zeros((0, record.height, record.width), dtype=torch.uint8)
        target = {
            "image_id": record.id,
            "boxes": boxes_to_tensor([annotation_box(a) for a in anns]),
            "labels": torch.tensor([a.category_id for a in anns], dtype=torch.int64),
            "masks": masks,
        }
        return image, target


def collate(batch):
    """Keep variable-length targets as lists"""
    images, targets = zip(*batch)
    return list(images), list(targets)
